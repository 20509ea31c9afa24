//! Per-token visual information and the layer beyond which it vanishes.
//!
//! `I_i(V_k)` is the label probability when only visual token `k` survives a
//! zero mask applied after `i` decoder layers, minus the probability when no
//! visual token survives. Both runs resume from the same captured state.

use std::io::Write;

use rayon::prelude::*;

use crate::engine::{CaptureFlags, LayerCheckpoint, Model, MultimodalSequence, VisualTreatment};
use crate::error::{Error, Result};
use crate::tensor::{Matrix, Scalar};

pub const DEFAULT_TAU: f64 = 1e-3;
pub const DEFAULT_PERSISTENCE: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct InformationProfile {
    /// `(L + 1) x N_v`; row `i` masks after `i` decoder layers.
    pub values: Matrix<f64>,
    /// Text-only label probability per layer boundary.
    pub text_baseline: Vec<f64>,
    pub label: u32,
    pub fingerprint: String,
}

impl InformationProfile {
    pub fn n_layers(&self) -> usize {
        self.values.rows() - 1
    }

    pub fn n_visual(&self) -> usize {
        self.values.cols()
    }

    pub fn get(&self, layer: usize, token: usize) -> f64 {
        self.values.get(layer, token)
    }

    pub fn row(&self, layer: usize) -> &[f64] {
        self.values.row(layer)
    }
}

fn check_label<T: Scalar>(model: &Model<T>, seq: &MultimodalSequence) -> Result<()> {
    let vocab = model.arch().vocab_size;
    if seq.label as usize >= vocab {
        return Err(Error::LabelOutOfRange {
            label: seq.label,
            vocab,
        });
    }
    Ok(())
}

fn check_layer<T: Scalar>(model: &Model<T>, layer: usize) -> Result<()> {
    let n_layers = model.arch().n_layers;
    if layer > n_layers {
        return Err(Error::LayerOutOfRange { layer, n_layers });
    }
    Ok(())
}

fn state_at<T: Scalar>(model: &Model<T>, seq: &MultimodalSequence, layer: usize) -> Result<LayerCheckpoint<T>> {
    let mut run = model.start(seq)?;
    while run.layer() < layer {
        run.step(false)?;
    }
    Ok(run.checkpoint())
}

fn masked_prob<T: Scalar>(model: &Model<T>, state: &LayerCheckpoint<T>, keep: Option<usize>, label: u32) -> Result<f64> {
    let n = state.alive_visual.len();
    let mask = (0..n).map(|k| Some(k) == keep).collect();
    let r = model.resume_forward(state, &VisualTreatment::ZeroMask(mask), &CaptureFlags::none())?;
    Ok(r.prob(label))
}

/// Label probability with every visual hidden state zeroed after `layer`
/// decoder layers.
pub fn text_only_prob<T: Scalar>(model: &Model<T>, seq: &MultimodalSequence, layer: usize) -> Result<f64> {
    check_label(model, seq)?;
    check_layer(model, layer)?;
    let state = state_at(model, seq, layer)?;
    masked_prob(model, &state, None, seq.label)
}

/// `I_layer(V_token)` for a 0-based visual `token`.
pub fn token_information<T: Scalar>(
    model: &Model<T>,
    seq: &MultimodalSequence,
    layer: usize,
    token: usize,
) -> Result<f64> {
    check_label(model, seq)?;
    check_layer(model, layer)?;
    if token >= seq.n_visual() {
        return Err(Error::InvalidSequence(format!(
            "visual token {token} out of range for {} tokens",
            seq.n_visual()
        )));
    }
    let state = state_at(model, seq, layer)?;
    let p_k = masked_prob(model, &state, Some(token), seq.label)?;
    let p_text = masked_prob(model, &state, None, seq.label)?;
    Ok(p_k - p_text)
}

/// Every `I_i(V_k)` from one captured prefill; rows run in parallel.
pub fn information_profile<T: Scalar>(model: &Model<T>, seq: &MultimodalSequence) -> Result<InformationProfile> {
    check_label(model, seq)?;
    let n_layers = model.arch().n_layers;
    let n_visual = seq.n_visual();
    let full = model.forward_prefill(seq, &CaptureFlags::all_checkpoints(n_layers))?;
    let rows: Vec<(f64, Vec<f64>)> = full
        .checkpoints
        .values()
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|state| {
            let p_text = masked_prob(model, state, None, seq.label)?;
            let row = (0..n_visual)
                .map(|k| Ok(masked_prob(model, state, Some(k), seq.label)? - p_text))
                .collect::<Result<Vec<f64>>>()?;
            Ok((p_text, row))
        })
        .collect::<Result<_>>()?;
    let mut values = Matrix::zeros(n_layers + 1, n_visual);
    let mut text_baseline = Vec::with_capacity(n_layers + 1);
    for (i, (p_text, row)) in rows.into_iter().enumerate() {
        values.row_mut(i).copy_from_slice(&row);
        text_baseline.push(p_text);
    }
    Ok(InformationProfile {
        values,
        text_baseline,
        label: seq.label,
        fingerprint: seq.fingerprint(),
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LayerStats {
    pub mean: f64,
    /// Population variance across tokens.
    pub variance: f64,
    pub mean_abs: f64,
    pub p_text: f64,
}

/// Two-pass population mean and variance of each profile row.
pub fn profile_stats(profile: &InformationProfile) -> Vec<LayerStats> {
    (0..profile.values.rows())
        .map(|i| {
            let row = profile.row(i);
            let (mean, variance) = mean_variance(row);
            LayerStats {
                mean,
                variance,
                mean_abs: row.iter().map(|x| x.abs()).sum::<f64>() / row.len() as f64,
                p_text: profile.text_baseline[i],
            }
        })
        .collect()
}

pub fn mean_variance(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let variance = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, variance)
}

/// Averages per-sample layer statistics, field by field, in sample order.
pub fn average_stats(per_sample: &[Vec<LayerStats>]) -> Vec<LayerStats> {
    let Some(first) = per_sample.first() else {
        return Vec::new();
    };
    let n = per_sample.len() as f64;
    (0..first.len())
        .map(|i| {
            let mut acc = LayerStats::default();
            for s in per_sample {
                acc.mean += s[i].mean;
                acc.variance += s[i].variance;
                acc.mean_abs += s[i].mean_abs;
                acc.p_text += s[i].p_text;
            }
            LayerStats {
                mean: acc.mean / n,
                variance: acc.variance / n,
                mean_abs: acc.mean_abs / n,
                p_text: acc.p_text / n,
            }
        })
        .collect()
}

/// Smallest layer from which every later layer has `|mean| <= tau` and
/// `variance <= tau^2`, with at least `persistence` quiet layers counted
/// where the stats run long enough.
pub fn detect_horizon(stats: &[LayerStats], tau: f64, persistence: usize) -> Option<usize> {
    let quiet: Vec<bool> = stats
        .iter()
        .map(|s| s.mean.abs() <= tau && s.variance <= tau * tau)
        .collect();
    let last = quiet.len().checked_sub(1)?;
    (0..=last).find(|&i| {
        let window_end = (i + persistence.max(1) - 1).min(last);
        quiet[i..=window_end].iter().all(|&q| q) && quiet[i..].iter().all(|&q| q)
    })
}

/// Sum of the information of `kept` tokens at `layer`; `clamp` drops
/// negative contributions.
pub fn retained_information(profile: &InformationProfile, layer: usize, kept: &[usize], clamp: bool) -> f64 {
    let row = profile.row(layer);
    kept.iter()
        .map(|&k| if clamp { row[k].max(0.0) } else { row[k] })
        .sum()
}

/// Writes `sample_id,layer,token_index,information` rows.
pub fn write_profile_csv<W: Write>(
    out: W,
    profiles: &[(String, &InformationProfile)],
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["sample_id", "layer", "token_index", "information"])?;
    for (id, p) in profiles {
        for i in 0..p.values.rows() {
            for (k, v) in p.row(i).iter().enumerate() {
                w.write_record([id.clone(), i.to_string(), k.to_string(), v.to_string()])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Writes `layer,mean,variance,p_text` rows.
pub fn write_stats_csv<W: Write>(out: W, stats: &[LayerStats]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["layer", "mean", "variance", "p_text"])?;
    for (i, s) in stats.iter().enumerate() {
        w.write_record([i.to_string(), s.mean.to_string(), s.variance.to_string(), s.p_text.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
