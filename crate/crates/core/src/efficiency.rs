//! Analytic prefill FLOPs and KV-cache size under a pruning schedule.

use std::io::Write;

use crate::engine::{layer_macs, ArchConfig};
use crate::error::{Error, Result};
use crate::pruning::PruneSchedule;

/// Average visual tokens budgeted by the published 7B configuration.
pub const LLAVA_VISUAL_TOKENS: usize = 576;
/// Unpruned prefill cost the calibration aims for.
pub const LLAVA_BASELINE_FLOPS: f64 = 9.22e12;

#[derive(Clone, Debug, PartialEq)]
pub struct CostReport {
    pub per_layer_flops: Vec<u64>,
    pub total_flops: u64,
    pub kv_cache_bytes: u64,
    /// Tokens (text plus alive visual) entering each decoder layer.
    pub token_count_per_layer: Vec<usize>,
}

impl CostReport {
    pub fn total_tflops(&self) -> f64 {
        self.total_flops as f64 / 1e12
    }

    pub fn kv_cache_mib(&self) -> f64 {
        self.kv_cache_bytes as f64 / (1024.0 * 1024.0)
    }

    pub fn mean_visual_tokens(&self, n_text: usize) -> f64 {
        let n = self.token_count_per_layer.len().max(1) as f64;
        self.token_count_per_layer.iter().map(|t| (t - n_text) as f64).sum::<f64>() / n
    }

    /// Relative reduction of total FLOPs against `baseline`, in percent.
    pub fn reduction_vs(&self, baseline: &CostReport) -> f64 {
        100.0 * (1.0 - self.total_flops as f64 / baseline.total_flops as f64)
    }
}

/// FLOPs for one layer over `n` tokens: two per multiply-accumulate.
pub fn layer_flops(n: usize, d: usize, m: usize) -> u64 {
    2 * layer_macs(n, d, m)
}

pub fn flops_estimate(
    arch: &ArchConfig,
    schedule: &PruneSchedule,
    n_visual: usize,
    n_text: usize,
    bytes_per_element: u64,
) -> Result<CostReport> {
    if n_text == 0 {
        return Err(Error::Config("n_text must be at least 1".into()));
    }
    let alive = schedule.alive_counts(n_visual, arch.n_layers)?;
    let token_count_per_layer: Vec<usize> = alive.iter().map(|v| v + n_text).collect();
    let per_layer_flops: Vec<u64> = token_count_per_layer
        .iter()
        .map(|&n| layer_flops(n, arch.d_model, arch.mlp_width))
        .collect();
    let kv_cache_bytes = token_count_per_layer
        .iter()
        .map(|&n| 2 * n as u64 * arch.d_model as u64 * bytes_per_element)
        .sum();
    Ok(CostReport {
        total_flops: per_layer_flops.iter().sum(),
        per_layer_flops,
        kv_cache_bytes,
        token_count_per_layer,
    })
}

/// Text length whose unpruned estimate lies closest to `target` FLOPs.
pub fn calibrate_text_tokens(arch: &ArchConfig, n_visual: usize, target: f64) -> usize {
    let unpruned = |t: usize| -> f64 {
        arch.n_layers as f64 * layer_flops(n_visual + t, arch.d_model, arch.mlp_width) as f64
    };
    // The cost is increasing in t, so bracket then bisect.
    let mut hi = 1usize;
    while unpruned(hi) < target && hi < 1 << 24 {
        hi *= 2;
    }
    let mut lo = 1usize;
    while lo < hi {
        let mid = (lo + hi) / 2;
        if unpruned(mid) < target {
            lo = mid + 1;
        } else {
            hi = mid;
        }
    }
    if lo > 1 && (target - unpruned(lo - 1)).abs() <= (unpruned(lo) - target).abs() {
        lo - 1
    } else {
        lo
    }
}

/// Published decoder shapes used for cost reports.
pub fn arch_preset(name: &str) -> Option<ArchConfig> {
    match name {
        "llava-7b" => Some(ArchConfig::new(32, 4096, 32, 11008, 32000, 4096)),
        "qwen25vl-7b" => Some(ArchConfig::new(28, 3584, 28, 18944, 152064, 32768)),
        _ => None,
    }
}

pub const ARCH_PRESETS: [&str; 2] = ["llava-7b", "qwen25vl-7b"];

/// Writes `method,tokens,flops_T,storage_MB` rows; storage is in MiB.
pub fn write_cost_csv<W: Write>(out: W, rows: &[(String, f64, &CostReport)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["method", "tokens", "flops_T", "storage_MB"])?;
    for (method, tokens, r) in rows {
        w.write_record([
            method.clone(),
            format!("{tokens:.1}"),
            format!("{:.4}", r.total_tflops()),
            format!("{:.1}", r.kv_cache_mib()),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pruning::preset;

    #[test]
    fn one_token_hand_count() {
        let arch = ArchConfig::new(1, 2, 1, 4, 4, 4);
        let r = flops_estimate(&arch, &PruneSchedule::empty("none"), 0, 1, 2).unwrap();
        // 8nd^2 + 4n^2d + 6ndm with n = 1, d = 2, m = 4.
        assert_eq!(r.total_flops, 32 + 8 + 48);
        assert_eq!(r.kv_cache_bytes, 2 * 2 * 2);
    }

    #[test]
    fn calibration_is_closest() {
        let arch = arch_preset("llava-7b").unwrap();
        let t = calibrate_text_tokens(&arch, 576, LLAVA_BASELINE_FLOPS);
        let cost = |t: usize| {
            flops_estimate(&arch, &PruneSchedule::empty("none"), 576, t, 2).unwrap().total_flops as f64
        };
        let best = (t.saturating_sub(3).max(1)..t + 4)
            .min_by(|&a, &b| {
                (cost(a) - LLAVA_BASELINE_FLOPS)
                    .abs()
                    .total_cmp(&(cost(b) - LLAVA_BASELINE_FLOPS).abs())
            })
            .unwrap();
        assert_eq!(t, best);
    }

    #[test]
    fn schedule_past_depth_is_rejected() {
        let arch = ArchConfig::new(4, 8, 2, 16, 8, 64);
        assert!(flops_estimate(&arch, &preset("dart-192").unwrap(), 16, 4, 2).is_ok());
        assert!(flops_estimate(&arch, &preset("divprune-vtw-192").unwrap(), 16, 4, 2).is_err());
        assert!(flops_estimate(&arch, &PruneSchedule::empty("none"), 16, 0, 2).is_err());
    }
}
