//! Experiment runners. Each is a pure function of the model, its data and a
//! config, and returns CSV text plus summary values and plots.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::plot::{line_chart, Series};
use crate::efficiency::flops_estimate;
use crate::engine::{CaptureFlags, LayerCheckpoint, Model, MultimodalSequence, PrefillResult, Slot, VisualTreatment};
use crate::error::{Error, Result};
use crate::information::{
    average_stats, detect_horizon, information_profile, profile_stats, retained_information, InformationProfile,
    LayerStats, DEFAULT_PERSISTENCE, DEFAULT_TAU,
};
use crate::pruning::{apply_schedule, retained_count, select_tokens, PruneSchedule, Strategy};
use crate::tensor::{Matrix, Scalar};

pub const EXPERIMENT_IDS: [&str; 5] = ["info-prune", "strategy-eval", "withdraw", "schedule-bench", "capacity"];

/// Shared knobs; every field has a default so config files may be partial.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    /// Samples scored for accuracy.
    pub samples: usize,
    /// Samples profiled for information.
    pub info_samples: usize,
    /// Fractions of visual tokens removed (info-prune).
    pub prune_ratios: Vec<f64>,
    /// Fractions of visual tokens kept (strategy-eval).
    pub retain_ratios: Vec<f64>,
    /// Layer boundaries to test; empty means all of `0..=L`.
    pub layers: Vec<usize>,
    pub strategies: Vec<Strategy>,
    /// Schedule preset names or files (schedule-bench).
    pub schedules: Vec<String>,
    pub seed: u64,
    pub tau: f64,
    pub persistence: usize,
    /// Accuracy drop tolerated by the empirical horizon, as a fraction.
    pub horizon_slack: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            samples: 1000,
            info_samples: 200,
            prune_ratios: vec![0.0, 0.5, 0.75, 0.9],
            retain_ratios: vec![0.25, 0.5],
            layers: Vec::new(),
            strategies: vec![
                Strategy::Random,
                Strategy::AttentionTopk,
                Strategy::MaxminDiversity,
                Strategy::LowDuplication,
                Strategy::Withdraw,
            ],
            schedules: vec!["none".into()],
            seed: 0,
            tau: DEFAULT_TAU,
            persistence: DEFAULT_PERSISTENCE,
            horizon_slack: 0.01,
        }
    }
}

impl SweepConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    fn layers_for(&self, n_layers: usize) -> Vec<usize> {
        if self.layers.is_empty() {
            (0..=n_layers).collect()
        } else {
            self.layers.iter().copied().filter(|&l| l <= n_layers).collect()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentResult {
    pub id: String,
    pub seed: u64,
    pub checkpoint_hash: String,
    pub schedule: String,
    pub csv: String,
    pub summary: BTreeMap<String, String>,
    /// `(file stem, svg)` pairs.
    pub plots: Vec<(String, String)>,
}

impl ExperimentResult {
    fn new(id: &str, seed: u64, checkpoint_hash: &str, schedule: &str) -> Self {
        Self {
            id: id.to_string(),
            seed,
            checkpoint_hash: checkpoint_hash.to_string(),
            schedule: schedule.to_string(),
            csv: String::new(),
            summary: BTreeMap::new(),
            plots: Vec::new(),
        }
    }

    pub fn summary_value(&self, key: &str) -> Option<&str> {
        self.summary.get(key).map(String::as_str)
    }

    pub fn summary_csv(&self, manifest: Option<&str>) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["key", "value"])?;
        w.write_record(["experiment", &self.id])?;
        w.write_record(["seed", &self.seed.to_string()])?;
        w.write_record(["checkpoint_hash", &self.checkpoint_hash])?;
        w.write_record(["schedule", &self.schedule])?;
        if let Some(m) = manifest {
            w.write_record(["manifest", m])?;
        }
        for (k, v) in &self.summary {
            w.write_record([k, v])?;
        }
        Ok(String::from_utf8(w.into_inner().map_err(|e| Error::Io(e.into_error()))?).expect("utf8"))
    }

    /// Writes `<id>.csv`, `<id>.summary.csv` and one SVG per plot.
    pub fn write_to(&self, dir: &Path, manifest: Option<&str>) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
        let mut files = vec![
            (dir.join(format!("{}.csv", self.id)), self.csv.clone()),
            (dir.join(format!("{}.summary.csv", self.id)), self.summary_csv(manifest)?),
        ];
        for (stem, svg) in &self.plots {
            files.push((dir.join(format!("{stem}.svg")), svg.clone()));
        }
        for (path, body) in &files {
            fs::write(path, body).map_err(|e| Error::file(path, e))?;
        }
        Ok(files.into_iter().map(|(p, _)| p).collect())
    }
}

fn csv_text(header: &[&str], rows: Vec<Vec<String>>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    Ok(String::from_utf8(w.into_inner().map_err(|e| Error::Io(e.into_error()))?).expect("utf8"))
}

fn fmt_opt(h: Option<usize>) -> String {
    h.map_or_else(|| "none".to_string(), |v| v.to_string())
}

/// Deterministic per-unit seed.
pub fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ b.wrapping_mul(0xc2b2_ae3d_27d4_eb4f);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Row slots of an unpruned sequence.
pub fn sequence_slots(seq: &MultimodalSequence) -> Vec<Slot> {
    let p = seq.prefix_ids.len();
    (0..p)
        .map(Slot::Text)
        .chain((0..seq.n_visual()).map(Slot::Visual))
        .chain((0..seq.question_ids.len()).map(|q| Slot::Text(p + q)))
        .collect()
}

fn hits(result: &PrefillResult<impl Scalar>, seq: &MultimodalSequence) -> usize {
    usize::from(result.argmax() == seq.label)
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let mut n = 0usize;
    let mut s = 0.0;
    for x in xs {
        s += x;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Fraction of `data` answered correctly.
pub fn eval_accuracy<T: Scalar>(model: &Model<T>, data: &[MultimodalSequence]) -> Result<f64> {
    let h = data
        .par_iter()
        .map(|s| Ok(hits(&model.forward_prefill(s, &CaptureFlags::none())?, s)))
        .collect::<Result<Vec<_>>>()?;
    Ok(h.iter().sum::<usize>() as f64 / data.len().max(1) as f64)
}

/// Profiles plus averaged layer statistics over `data`.
pub fn profile_dataset<T: Scalar>(
    model: &Model<T>,
    data: &[MultimodalSequence],
) -> Result<(Vec<InformationProfile>, Vec<LayerStats>)> {
    let profiles = data
        .par_iter()
        .map(|s| information_profile(model, s))
        .collect::<Result<Vec<_>>>()?;
    let stats: Vec<Vec<LayerStats>> = profiles.iter().map(profile_stats).collect();
    Ok((profiles, average_stats(&stats)))
}

/// Accuracy after withdrawing every visual token at each boundary `0..=L`.
pub fn withdraw_curve<T: Scalar>(model: &Model<T>, data: &[MultimodalSequence]) -> Result<Vec<f64>> {
    let n_layers = model.arch().n_layers;
    let per_sample = data
        .par_iter()
        .map(|s| {
            let full = model.forward_prefill(s, &CaptureFlags::all_checkpoints(n_layers))?;
            full.checkpoints
                .values()
                .map(|ck| {
                    let r = model.resume_forward(ck, &VisualTreatment::Drop(Vec::new()), &CaptureFlags::none())?;
                    Ok(hits(&r, s))
                })
                .collect::<Result<Vec<usize>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((0..=n_layers)
        .map(|i| per_sample.iter().map(|h| h[i]).sum::<usize>() as f64 / data.len().max(1) as f64)
        .collect())
}

/// Smallest boundary from which every later withdraw keeps accuracy within
/// `slack` of `baseline`.
pub fn empirical_horizon(curve: &[f64], baseline: f64, slack: f64) -> Option<usize> {
    let ok: Vec<bool> = curve.iter().map(|&a| a >= baseline - slack - 1e-12).collect();
    (0..ok.len()).find(|&i| ok[i..].iter().all(|&b| b))
}

/// Prunes the lowest-information (or random) visual tokens at one boundary
/// and scores accuracy.
pub fn run_info_prune_curve<T: Scalar>(
    model: &Model<T>,
    checkpoint_hash: &str,
    data: &[MultimodalSequence],
    cfg: &SweepConfig,
) -> Result<ExperimentResult> {
    let n_layers = model.arch().n_layers;
    let layers = cfg.layers_for(n_layers);
    let data = &data[..cfg.info_samples.min(data.len())];
    // Per sample: baseline hit, then hits per (layer, ratio) for both rules.
    type Row = (usize, Vec<(usize, usize)>, Vec<LayerStats>);
    let rows: Vec<Row> = data
        .par_iter()
        .enumerate()
        .map(|(si, s)| {
            let full = model.forward_prefill(s, &CaptureFlags::all_checkpoints(n_layers))?;
            let profile = information_profile(model, s)?;
            let alive: Vec<usize> = (0..s.n_visual()).collect();
            let mut cells = Vec::new();
            for &layer in &layers {
                let ck = &full.checkpoints[&layer];
                for &ratio in &cfg.prune_ratios {
                    let keep = retained_count(1.0 - ratio, s.n_visual())?;
                    let informed = top_information(&profile, layer, keep);
                    let seed = mix_seed(cfg.seed, si as u64, layer as u64);
                    let random = select_tokens(Strategy::Random, keep, seed, &alive, &Matrix::<T>::zeros(0, 0), None, layer)?;
                    let run = |kept: Vec<usize>| -> Result<usize> {
                        Ok(hits(&model.resume_forward(ck, &VisualTreatment::Drop(kept), &CaptureFlags::none())?, s))
                    };
                    cells.push((run(informed)?, run(random)?));
                }
            }
            Ok((hits(&full, s), cells, profile_stats(&profile)))
        })
        .collect::<Result<_>>()?;
    let n = data.len().max(1) as f64;
    let baseline = rows.iter().map(|r| r.0).sum::<usize>() as f64 / n;
    let stats = average_stats(&rows.iter().map(|r| r.2.clone()).collect::<Vec<_>>());
    let horizon = detect_horizon(&stats, cfg.tau, cfg.persistence);

    let mut out = ExperimentResult::new("info-prune", cfg.seed, checkpoint_hash, "single-layer drop");
    let mut csv_rows = Vec::new();
    let mut series: Vec<Series> = Vec::new();
    for (ri, &ratio) in cfg.prune_ratios.iter().enumerate() {
        let mut low = Vec::new();
        let mut rnd = Vec::new();
        for (li, &layer) in layers.iter().enumerate() {
            let idx = li * cfg.prune_ratios.len() + ri;
            let a_low = rows.iter().map(|r| r.1[idx].0).sum::<usize>() as f64 / n;
            let a_rnd = rows.iter().map(|r| r.1[idx].1).sum::<usize>() as f64 / n;
            for (method, acc) in [("low-information", a_low), ("random", a_rnd)] {
                csv_rows.push(vec![
                    layer.to_string(),
                    ratio.to_string(),
                    method.to_string(),
                    acc.to_string(),
                    data.len().to_string(),
                ]);
            }
            low.push((layer as f64, a_low));
            rnd.push((layer as f64, a_rnd));
        }
        series.push(Series::new(format!("low-info {ratio}"), low));
        series.push(Series::new(format!("random {ratio}"), rnd));
    }
    out.csv = csv_text(&["layer", "prune_ratio", "method", "accuracy", "samples"], csv_rows)?;
    out.summary.insert("baseline_accuracy".into(), baseline.to_string());
    out.summary.insert("detected_horizon".into(), fmt_opt(horizon));
    out.summary.insert("tau".into(), cfg.tau.to_string());
    out.plots.push((
        "info-prune".into(),
        line_chart("Accuracy after pruning at one layer", "layer", "accuracy", &series),
    ));
    Ok(out)
}

/// The `keep` visual tokens with the largest information at `layer`.
pub fn top_information(profile: &InformationProfile, layer: usize, keep: usize) -> Vec<usize> {
    let row = profile.row(layer);
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    let mut kept: Vec<usize> = order.into_iter().take(keep).collect();
    kept.sort_unstable();
    kept
}

/// Selection at one layer, from a full forward with captured state.
fn select_at<T: Scalar>(
    seq: &MultimodalSequence,
    full: &PrefillResult<T>,
    slots: &[Slot],
    strategy: Strategy,
    retain: f64,
    layer: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    let ck: &LayerCheckpoint<T> = &full.checkpoints[&layer];
    let alive = ck.alive_visual.clone();
    let keep = if strategy == Strategy::Withdraw {
        0
    } else {
        retained_count(retain, alive.len())?
    };
    let features = if layer == 0 {
        seq.visual.select_rows(&alive).cast()
    } else {
        ck.hidden_visual.clone()
    };
    let attention = full.attention.get(&layer).map(|a| (a, slots));
    select_tokens(strategy, keep, seed, &alive, &features, attention, layer)
}

/// Mean retained information per (strategy, retain ratio, layer).
pub fn run_strategy_eval<T: Scalar>(
    model: &Model<T>,
    checkpoint_hash: &str,
    data: &[MultimodalSequence],
    cfg: &SweepConfig,
) -> Result<ExperimentResult> {
    let n_layers = model.arch().n_layers;
    let layers = cfg.layers_for(n_layers);
    let data = &data[..cfg.info_samples.min(data.len())];
    let capture = CaptureFlags::all_checkpoints(n_layers).with_attention(1..=n_layers);
    // Per sample: retained information per (strategy, ratio, layer), with NaN
    // where the rule cannot run, plus the full row sum per layer.
    let per_sample: Vec<(Vec<f64>, Vec<f64>, Vec<LayerStats>)> = data
        .par_iter()
        .enumerate()
        .map(|(si, s)| {
            let full = model.forward_prefill(s, &capture)?;
            let profile = information_profile(model, s)?;
            let slots = sequence_slots(s);
            let all: Vec<usize> = (0..s.n_visual()).collect();
            let mut cells = Vec::new();
            for &strategy in &cfg.strategies {
                for &ratio in &cfg.retain_ratios {
                    for &layer in &layers {
                        if strategy == Strategy::AttentionTopk && layer == 0 {
                            cells.push(f64::NAN);
                            continue;
                        }
                        let seed = mix_seed(cfg.seed, si as u64, layer as u64);
                        let kept = select_at(s, &full, &slots, strategy, ratio, layer, seed)?;
                        cells.push(retained_information(&profile, layer, &kept, false));
                    }
                }
            }
            let sums = layers
                .iter()
                .map(|&l| retained_information(&profile, l, &all, false))
                .collect();
            Ok((cells, sums, profile_stats(&profile)))
        })
        .collect::<Result<_>>()?;
    let stats = average_stats(&per_sample.iter().map(|r| r.2.clone()).collect::<Vec<_>>());
    let horizon = detect_horizon(&stats, cfg.tau, cfg.persistence);

    let mut out = ExperimentResult::new("strategy-eval", cfg.seed, checkpoint_hash, "single-layer selection");
    let mut rows = Vec::new();
    let mut series = Vec::new();
    let mut idx = 0;
    for &strategy in &cfg.strategies {
        for &ratio in &cfg.retain_ratios {
            let mut pts = Vec::new();
            for &layer in &layers {
                let v = mean(per_sample.iter().map(|r| r.0[idx]));
                idx += 1;
                if v.is_nan() {
                    continue;
                }
                rows.push(vec![
                    strategy.to_string(),
                    ratio.to_string(),
                    layer.to_string(),
                    v.to_string(),
                    data.len().to_string(),
                ]);
                pts.push((layer as f64, v));
            }
            series.push(Series::new(format!("{strategy} {ratio}"), pts));
        }
    }
    let mut pts = Vec::new();
    for (li, &layer) in layers.iter().enumerate() {
        let v = mean(per_sample.iter().map(|r| r.1[li]));
        rows.push(vec!["all".into(), "1".into(), layer.to_string(), v.to_string(), data.len().to_string()]);
        pts.push((layer as f64, v));
    }
    series.push(Series::new("all tokens", pts));
    out.csv = csv_text(&["strategy", "retain_ratio", "layer", "retained_information", "samples"], rows)?;
    out.summary.insert("detected_horizon".into(), fmt_opt(horizon));
    out.summary.insert("tau".into(), cfg.tau.to_string());
    out.summary.insert("aggregation".into(), "mean over samples".into());
    out.summary.insert("information_sum".into(), "signed".into());
    out.plots.push((
        "strategy-eval".into(),
        line_chart("Retained visual information", "layer", "retained information", &series),
    ));
    Ok(out)
}

/// Withdraw sweep plus information curve for one labelled dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct WithdrawSweep {
    pub label: String,
    pub baseline: f64,
    pub accuracy: Vec<f64>,
    pub stats: Vec<LayerStats>,
    pub empirical_horizon: Option<usize>,
    pub detected_horizon: Option<usize>,
}

pub fn withdraw_sweep<T: Scalar>(
    model: &Model<T>,
    label: &str,
    data: &[MultimodalSequence],
    cfg: &SweepConfig,
) -> Result<WithdrawSweep> {
    let acc_data = &data[..cfg.samples.min(data.len())];
    let info_data = &data[..cfg.info_samples.min(data.len())];
    let baseline = eval_accuracy(model, acc_data)?;
    let accuracy = withdraw_curve(model, acc_data)?;
    let (_, stats) = profile_dataset(model, info_data)?;
    Ok(WithdrawSweep {
        label: label.to_string(),
        baseline,
        empirical_horizon: empirical_horizon(&accuracy, baseline, cfg.horizon_slack),
        detected_horizon: detect_horizon(&stats, cfg.tau, cfg.persistence),
        accuracy,
        stats,
    })
}

fn withdraw_result(id: &str, checkpoint_hash: &str, cfg: &SweepConfig, sweeps: &[WithdrawSweep]) -> Result<ExperimentResult> {
    let mut out = ExperimentResult::new(id, cfg.seed, checkpoint_hash, "withdraw at each layer");
    let mut rows = Vec::new();
    let mut acc_series = Vec::new();
    let mut info_series = Vec::new();
    for s in sweeps {
        for (i, (a, st)) in s.accuracy.iter().zip(&s.stats).enumerate() {
            rows.push(vec![
                s.label.clone(),
                i.to_string(),
                a.to_string(),
                st.mean.to_string(),
                st.mean_abs.to_string(),
                st.variance.to_string(),
            ]);
        }
        acc_series.push(Series::new(
            s.label.clone(),
            s.accuracy.iter().enumerate().map(|(i, &a)| (i as f64, a)).collect(),
        ));
        info_series.push(Series::new(
            s.label.clone(),
            s.stats.iter().enumerate().map(|(i, st)| (i as f64, st.mean)).collect(),
        ));
        out.summary.insert(format!("{}.baseline_accuracy", s.label), s.baseline.to_string());
        out.summary.insert(format!("{}.empirical_horizon", s.label), fmt_opt(s.empirical_horizon));
        out.summary.insert(format!("{}.detected_horizon", s.label), fmt_opt(s.detected_horizon));
    }
    out.summary.insert("tau".into(), cfg.tau.to_string());
    out.summary.insert("horizon_slack".into(), cfg.horizon_slack.to_string());
    out.csv = csv_text(
        &["dataset", "layer", "withdraw_accuracy", "mean_information", "mean_abs_information", "variance"],
        rows,
    )?;
    out.plots.push((
        format!("{id}-accuracy"),
        line_chart("Accuracy after withdrawing all visual tokens", "layer", "accuracy", &acc_series),
    ));
    out.plots.push((
        format!("{id}-information"),
        line_chart("Mean visual token information", "layer", "mean information", &info_series),
    ));
    Ok(out)
}

/// Withdraw sweep over several labelled datasets on one model.
pub fn run_withdraw_sweep<T: Scalar>(
    model: &Model<T>,
    checkpoint_hash: &str,
    datasets: &[(String, Vec<MultimodalSequence>)],
    cfg: &SweepConfig,
) -> Result<ExperimentResult> {
    let sweeps = datasets
        .iter()
        .map(|(label, data)| withdraw_sweep(model, label, data, cfg))
        .collect::<Result<Vec<_>>>()?;
    withdraw_result("withdraw", checkpoint_hash, cfg, &sweeps)
}

/// Accuracy and analytic cost for each schedule.
pub fn run_schedule_bench<T: Scalar>(
    model: &Model<T>,
    checkpoint_hash: &str,
    data: &[MultimodalSequence],
    schedules: &[PruneSchedule],
    cfg: &SweepConfig,
) -> Result<ExperimentResult> {
    let data = &data[..cfg.samples.min(data.len())];
    let first = data.first().ok_or_else(|| Error::Dataset("no samples".into()))?;
    let baseline = eval_accuracy(model, data)?;
    let base_cost = flops_estimate(model.arch(), &PruneSchedule::empty("none"), first.n_visual(), first.n_text(), 2)?;
    let mut rows = Vec::new();
    let mut names = Vec::new();
    for sch in schedules {
        let h = data
            .par_iter()
            .map(|s| Ok(hits(&apply_schedule(model, s, sch)?.result, s)))
            .collect::<Result<Vec<_>>>()?;
        let acc = h.iter().sum::<usize>() as f64 / data.len() as f64;
        let cost = flops_estimate(model.arch(), sch, first.n_visual(), first.n_text(), 2)?;
        let rel = if baseline > 0.0 { 100.0 * acc / baseline } else { f64::NAN };
        rows.push(vec![
            sch.name.clone(),
            acc.to_string(),
            rel.to_string(),
            cost.total_flops.to_string(),
            cost.reduction_vs(&base_cost).to_string(),
            cost.mean_visual_tokens(first.n_text()).to_string(),
        ]);
        names.push(sch.name.clone());
    }
    let mut out = ExperimentResult::new("schedule-bench", cfg.seed, checkpoint_hash, &names.join("+"));
    out.summary.insert("baseline_accuracy".into(), baseline.to_string());
    out.summary.insert("samples".into(), data.len().to_string());
    out.csv = csv_text(
        &["method", "accuracy", "relative_accuracy", "flops", "flops_reduction_pct", "mean_visual_tokens"],
        rows,
    )?;
    Ok(out)
}

/// Withdraw sweeps on models of different capacity, smallest first. Each
/// model brings the shared samples encoded at its own width.
pub fn run_capacity<T: Scalar>(
    models: &[(String, &Model<T>, String, Vec<MultimodalSequence>)],
    cfg: &SweepConfig,
) -> Result<ExperimentResult> {
    let mut sweeps = Vec::new();
    for (label, model, _, data) in models {
        sweeps.push(withdraw_sweep(*model, label, data, cfg)?);
    }
    let hashes: Vec<&str> = models.iter().map(|m| m.2.as_str()).collect();
    let mut out = withdraw_result("capacity", &hashes.join("+"), cfg, &sweeps)?;
    if let [small, .., large] = sweeps.as_slice() {
        let ok = match (small.empirical_horizon, large.empirical_horizon) {
            (Some(s), Some(l)) => l + 1 >= s,
            _ => false,
        };
        out.summary.insert(
            "capacity_trend".into(),
            format!(
                "{}: {} horizon {} vs {} horizon {}",
                if ok { "holds" } else { "not observed" },
                large.label,
                fmt_opt(large.empirical_horizon),
                small.label,
                fmt_opt(small.empirical_horizon)
            ),
        );
    }
    Ok(out)
}
