//! Exact gradients of the first-answer-token cross-entropy and a small
//! deterministic mini-batch trainer.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::arch::Precision;
use super::checkpoint::ModelCheckpoint;
use super::model::{head_slice, LayerTrace, Model, Slot};
use super::params::{LayerParams, Params};
use super::sequence::MultimodalSequence;
use crate::error::{Error, Result};
use crate::tensor::{matmul_nt, matmul_tn_acc, sigmoid, silu, softmax_in_place, Matrix, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum Optimizer {
    /// Plain gradient descent; `momentum = 0` disables the velocity term.
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Sgd { momentum: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
    #[serde(default)]
    pub optimizer: Optimizer,
    /// Global gradient-norm clip; 0 disables clipping.
    #[serde(default)]
    pub clip_norm: f64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        Ok(())
    }
}

fn dsilu<T: Scalar>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}

/// Backward through RMS normalisation; accumulates the gain gradient and
/// returns the input gradient.
fn rmsnorm_backward<T: Scalar>(
    x: &Matrix<T>,
    inv_rms: &[T],
    gain: &Matrix<T>,
    dy: &Matrix<T>,
    dgain: &mut Matrix<T>,
) -> Matrix<T> {
    let d = x.cols();
    let dn = T::from_f64(d as f64);
    let g = gain.as_slice();
    let mut dx = Matrix::zeros(x.rows(), d);
    for t in 0..x.rows() {
        let r = inv_rms[t];
        let (xr, dyr) = (x.row(t), dy.row(t));
        let mut s = T::zero();
        for j in 0..d {
            s = s + dyr[j] * g[j] * xr[j];
        }
        let dg = dgain.as_mut_slice();
        for j in 0..d {
            dg[j] = dg[j] + dyr[j] * xr[j] * r;
        }
        let coef = r * r * r * s / dn;
        for (j, o) in dx.row_mut(t).iter_mut().enumerate() {
            *o = r * dyr[j] * g[j] - coef * xr[j];
        }
    }
    dx
}

fn layer_backward<T: Scalar>(
    p: &LayerParams<T>,
    g: &mut LayerParams<T>,
    tr: &LayerTrace<T>,
    dout: &Matrix<T>,
    n_heads: usize,
) -> Matrix<T> {
    let n = dout.rows();
    let d = dout.cols();
    let dh = d / n_heads;

    // Gated MLP.
    matmul_tn_acc(&tr.act, dout, &mut g.w_down);
    let dact = matmul_nt(dout, &p.w_down);
    let m = dact.cols();
    let mut dgate = Matrix::zeros(n, m);
    let mut dup = Matrix::zeros(n, m);
    for i in 0..n * m {
        let (ga, u, da) = (tr.gate.as_slice()[i], tr.up.as_slice()[i], dact.as_slice()[i]);
        dgate.as_mut_slice()[i] = da * u * dsilu(ga);
        dup.as_mut_slice()[i] = da * silu(ga);
    }
    matmul_tn_acc(&tr.b, &dgate, &mut g.w_gate);
    matmul_tn_acc(&tr.b, &dup, &mut g.w_up);
    let mut db = matmul_nt(&dgate, &p.w_gate);
    db.add_assign(&matmul_nt(&dup, &p.w_up));
    let mut dh1 = rmsnorm_backward(&tr.h1, &tr.r_mlp, &p.mlp_norm, &db, &mut g.mlp_norm);
    dh1.add_assign(dout);

    // Attention.
    matmul_tn_acc(&tr.o, &dh1, &mut g.wo);
    let d_o = matmul_nt(&dh1, &p.wo);
    let scale = T::one() / T::from_f64(dh as f64).sqrt();
    let mut dq = Matrix::zeros(n, d);
    let mut dk = Matrix::zeros(n, d);
    let mut dv = Matrix::zeros(n, d);
    for (h, probs) in tr.probs.iter().enumerate() {
        let doh = head_slice(&d_o, h, dh);
        let qh = head_slice(&tr.q, h, dh);
        let kh = head_slice(&tr.k, h, dh);
        let vh = head_slice(&tr.v, h, dh);
        let dp = matmul_nt(&doh, &vh);
        let mut dvh = Matrix::zeros(n, dh);
        matmul_tn_acc(probs, &doh, &mut dvh);
        let mut ds = Matrix::zeros(n, n);
        for t in 0..n {
            let (pr, dpr) = (probs.row(t), dp.row(t));
            let dot: T = pr.iter().zip(dpr).map(|(&a, &b)| a * b).sum();
            for (j, o) in ds.row_mut(t).iter_mut().enumerate() {
                *o = pr[j] * (dpr[j] - dot) * scale;
            }
        }
        let dqh = crate::tensor::matmul(&ds, &kh);
        let mut dkh = Matrix::zeros(n, dh);
        matmul_tn_acc(&ds, &qh, &mut dkh);
        for t in 0..n {
            dq.row_mut(t)[h * dh..(h + 1) * dh].copy_from_slice(dqh.row(t));
            dk.row_mut(t)[h * dh..(h + 1) * dh].copy_from_slice(dkh.row(t));
            dv.row_mut(t)[h * dh..(h + 1) * dh].copy_from_slice(dvh.row(t));
        }
    }
    matmul_tn_acc(&tr.a, &dq, &mut g.wq);
    matmul_tn_acc(&tr.a, &dk, &mut g.wk);
    matmul_tn_acc(&tr.a, &dv, &mut g.wv);
    let mut da = matmul_nt(&dq, &p.wq);
    da.add_assign(&matmul_nt(&dk, &p.wk));
    da.add_assign(&matmul_nt(&dv, &p.wv));
    let mut dx = rmsnorm_backward(&tr.x, &tr.r_attn, &p.attn_norm, &da, &mut g.attn_norm);
    dx.add_assign(&dh1);
    dx
}

/// `logsumexp(logits) - logits[y]` in f64, finite even when `p[y]` underflows.
fn cross_entropy<T: Scalar>(logits: &[T], y: usize) -> f64 {
    let max = logits.iter().map(|x| x.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|x| (x.as_f64() - max).exp()).sum::<f64>().ln();
    lse - logits[y].as_f64()
}

/// Cross-entropy of `seq.label` at the last position and its exact gradient
/// with respect to every weight.
pub fn loss_and_grad<T: Scalar>(model: &Model<T>, seq: &MultimodalSequence) -> Result<(f64, Params<T>)> {
    let arch = model.arch();
    let params = model.params();
    let stream = model.embed(seq)?;
    let slots = stream.slots.clone();
    let positions = stream.positions.clone();
    let mut x = stream.hidden;
    let mut traces = Vec::with_capacity(arch.n_layers);
    let mut macs = 0;
    for l in 0..arch.n_layers {
        let (out, trace) = model.layer_forward(l, x, &mut macs);
        if !out.is_finite() {
            return Err(Error::NonFinite { layer: l + 1 });
        }
        traces.push(trace);
        x = out;
    }
    let (logits, z, inv) = model.logits(&x);
    let mut probs = logits.as_slice().to_vec();
    softmax_in_place(&mut probs);
    let y = seq.label as usize;
    let loss = cross_entropy(logits.as_slice(), y);

    let mut grad = params.zeros_like();
    let mut dlogits = Matrix::from_vec(1, probs.len(), probs);
    dlogits.as_mut_slice()[y] = dlogits.as_slice()[y] - T::one();
    matmul_tn_acc(&z, &dlogits, &mut grad.unembedding);
    let dz = matmul_nt(&dlogits, &params.unembedding);
    let n = x.rows();
    let last = x.select_rows(&[n - 1]);
    let dlast = rmsnorm_backward(&last, &inv, &params.final_norm, &dz, &mut grad.final_norm);
    let mut dx = Matrix::zeros(n, arch.d_model);
    dx.row_mut(n - 1).copy_from_slice(dlast.row(0));

    for l in (0..arch.n_layers).rev() {
        let trace = traces.pop().expect("one trace per layer");
        dx = layer_backward(&params.layers[l], &mut grad.layers[l], &trace, &dx, arch.n_heads);
    }

    let text_ids: Vec<u32> = seq.text_ids().collect();
    for (r, slot) in slots.iter().enumerate() {
        let row = dx.row(r);
        let pe = grad.position_embedding.row_mut(positions[r]);
        for (a, &b) in pe.iter_mut().zip(row) {
            *a = *a + b;
        }
        if let Slot::Text(j) = *slot {
            let te = grad.token_embedding.row_mut(text_ids[j] as usize);
            for (a, &b) in te.iter_mut().zip(row) {
                *a = *a + b;
            }
        }
    }
    Ok((loss, grad))
}

/// Mean cross-entropy over a set of sequences.
pub fn mean_loss<T: Scalar>(model: &Model<T>, data: &[MultimodalSequence]) -> Result<f64> {
    let losses = data
        .par_iter()
        .map(|seq| {
            let r = model.forward_prefill(seq, &super::model::CaptureFlags::none())?;
            Ok(-r.prob(seq.label).max(f64::MIN_POSITIVE).ln())
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(losses.iter().sum::<f64>() / data.len().max(1) as f64)
}

/// Trains on `data` and returns the new checkpoint with the per-step mean
/// batch loss. Runs in the checkpoint's precision mode.
pub fn train(
    checkpoint: &ModelCheckpoint,
    data: &[MultimodalSequence],
    config: &TrainConfig,
) -> Result<(ModelCheckpoint, Vec<f64>)> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Dataset("training set is empty".into()));
    }
    if config.steps == 0 {
        return Ok((checkpoint.clone(), Vec::new()));
    }
    match checkpoint.arch.precision {
        Precision::Single => train_typed::<f32>(checkpoint, data, config),
        Precision::Double => train_typed::<f64>(checkpoint, data, config),
    }
}

fn train_typed<T: Scalar>(
    checkpoint: &ModelCheckpoint,
    data: &[MultimodalSequence],
    config: &TrainConfig,
) -> Result<(ModelCheckpoint, Vec<f64>)> {
    let mut model = checkpoint.model::<T>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let mut first = model.params().zeros_like();
    let mut second = model.params().zeros_like();
    let mut trace = Vec::with_capacity(config.steps);

    for step in 0..config.steps {
        let mut batch = Vec::with_capacity(config.batch);
        while batch.len() < config.batch {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let parts = batch
            .par_iter()
            .map(|&i| loss_and_grad(&model, &data[i]))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| match e {
                Error::NonFinite { .. } => Error::Diverged { step, loss: f64::NAN },
                other => other,
            })?;
        let inv_b = T::one() / T::from_f64(config.batch as f64);
        let mut grad = model.params().zeros_like();
        let mut loss = 0.0;
        for (l, g) in &parts {
            loss += l;
            grad.axpy(inv_b, g);
        }
        loss /= config.batch as f64;
        if !loss.is_finite() || loss > 1e3 {
            return Err(Error::Diverged { step, loss });
        }
        trace.push(loss);

        if config.clip_norm > 0.0 {
            let norm = grad
                .tensors()
                .iter()
                .flat_map(|t| t.as_slice())
                .map(|x| x.as_f64() * x.as_f64())
                .sum::<f64>()
                .sqrt();
            if norm > config.clip_norm {
                let s = T::from_f64(config.clip_norm / norm);
                for t in grad.tensors_mut() {
                    t.as_mut_slice().iter_mut().for_each(|x| *x = *x * s);
                }
            }
        }

        let lr = T::from_f64(config.lr);
        let params = model_params_mut(&mut model);
        match config.optimizer {
            Optimizer::Sgd { momentum } => {
                let mu = T::from_f64(momentum);
                for ((w, v), g) in params
                    .tensors_mut()
                    .into_iter()
                    .zip(first.tensors_mut())
                    .zip(grad.tensors())
                {
                    for ((wi, vi), &gi) in w.as_mut_slice().iter_mut().zip(v.as_mut_slice()).zip(g.as_slice()) {
                        *vi = mu * *vi + gi;
                        *wi = *wi - lr * *vi;
                    }
                }
            }
            Optimizer::Adam { beta1, beta2, eps } => {
                let t = (step + 1) as i32;
                let c1 = T::from_f64(1.0 - beta1.powi(t));
                let c2 = T::from_f64(1.0 - beta2.powi(t));
                let (b1, b2, e) = (T::from_f64(beta1), T::from_f64(beta2), T::from_f64(eps));
                for (((w, m), v), g) in params
                    .tensors_mut()
                    .into_iter()
                    .zip(first.tensors_mut())
                    .zip(second.tensors_mut())
                    .zip(grad.tensors())
                {
                    for (((wi, mi), vi), &gi) in w
                        .as_mut_slice()
                        .iter_mut()
                        .zip(m.as_mut_slice())
                        .zip(v.as_mut_slice())
                        .zip(g.as_slice())
                    {
                        *mi = b1 * *mi + (T::one() - b1) * gi;
                        *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                        let mhat = *mi / c1;
                        let vhat = *vi / c2;
                        *wi = *wi - lr * mhat / (vhat.sqrt() + e);
                    }
                }
            }
        }
        if !params.is_finite() {
            return Err(Error::Diverged { step, loss: f64::NAN });
        }
        if step % 500 == 0 {
            log::debug!("step {step}: loss {loss:.5}");
        }
    }
    let arch = model.arch().clone();
    let params = model.into_params().cast::<f64>();
    Ok((ModelCheckpoint::new(arch, params)?, trace))
}

fn model_params_mut<T: Scalar>(model: &mut Model<T>) -> &mut Params<T> {
    model.params_mut()
}
