//! Test-only oracles kept independent of the engine's code paths.
#![allow(dead_code)]

use tokenhorizon::engine::{MultimodalSequence, Params};
use tokenhorizon::tensor::Matrix;

/// How the straight-line oracle treats visual tokens.
#[derive(Clone, Debug, Default)]
pub struct OracleMask {
    /// Zero the hidden state of visual tokens with `false` at this boundary.
    pub zero_at: Option<(usize, Vec<bool>)>,
    /// From decoder layer `i + 1` on, visual tokens outside the set receive
    /// `-inf` attention scores as keys.
    pub disable_keys_from: Option<(usize, Vec<usize>)>,
}

fn mat_rows(m: &Matrix<f64>) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

fn vecmat(x: &[f64], w: &Matrix<f64>) -> Vec<f64> {
    let mut out = vec![0.0; w.cols()];
    for (i, &xi) in x.iter().enumerate() {
        for (j, o) in out.iter_mut().enumerate() {
            *o += xi * w.get(i, j);
        }
    }
    out
}

fn rms(x: &[f64], g: &Matrix<f64>, eps: f64) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let r = 1.0 / (ms + eps).sqrt();
    x.iter().enumerate().map(|(j, v)| v * r * g.get(0, j)).collect()
}

/// Naive forward: nested loops, no checkpoints, no shared kernels.
pub fn naive_forward(
    params: &Params<f64>,
    n_heads: usize,
    eps: f64,
    seq: &MultimodalSequence,
    mask: &OracleMask,
) -> Vec<f64> {
    let np = seq.prefix_ids.len();
    let nv = seq.n_visual();
    let n = seq.len();
    let d = params.token_embedding.cols();
    let dh = d / n_heads;
    let tok = mat_rows(&params.token_embedding);
    let mut h: Vec<Vec<f64>> = (0..n)
        .map(|r| {
            let base: Vec<f64> = if r < np {
                tok[seq.prefix_ids[r] as usize].clone()
            } else if r < np + nv {
                seq.visual.row(r - np).to_vec()
            } else {
                tok[seq.question_ids[r - np - nv] as usize].clone()
            };
            let pos = seq.position_ids[r];
            base.iter()
                .enumerate()
                .map(|(j, b)| b + params.position_embedding.get(pos, j))
                .collect()
        })
        .collect();
    let is_visual = |r: usize| r >= np && r < np + nv;

    for (l, p) in params.layers.iter().enumerate() {
        if let Some((at, m)) = &mask.zero_at {
            if *at == l {
                for k in 0..nv {
                    if !m[k] {
                        h[np + k].iter_mut().for_each(|x| *x = 0.0);
                    }
                }
            }
        }
        let key_ok = |j: usize| -> bool {
            match &mask.disable_keys_from {
                Some((from, kept)) if l >= *from && is_visual(j) => kept.contains(&(j - np)),
                _ => true,
            }
        };
        let a: Vec<Vec<f64>> = h.iter().map(|x| rms(x, &p.attn_norm, eps)).collect();
        let q: Vec<Vec<f64>> = a.iter().map(|x| vecmat(x, &p.wq)).collect();
        let k: Vec<Vec<f64>> = a.iter().map(|x| vecmat(x, &p.wk)).collect();
        let v: Vec<Vec<f64>> = a.iter().map(|x| vecmat(x, &p.wv)).collect();
        let mut o = vec![vec![0.0; d]; n];
        for head in 0..n_heads {
            let cols = head * dh..(head + 1) * dh;
            for t in 0..n {
                let mut scores = Vec::new();
                for j in 0..=t {
                    if key_ok(j) {
                        let s: f64 = cols.clone().map(|c| q[t][c] * k[j][c]).sum();
                        scores.push((j, s / (dh as f64).sqrt()));
                    }
                }
                let mx = scores.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter().map(|s| (s.1 - mx).exp()).sum();
                for &(j, s) in &scores {
                    let w = (s - mx).exp() / z;
                    for c in cols.clone() {
                        o[t][c] += w * v[j][c];
                    }
                }
            }
        }
        for t in 0..n {
            let proj = vecmat(&o[t], &p.wo);
            for j in 0..d {
                h[t][j] += proj[j];
            }
            let b = rms(&h[t], &p.mlp_norm, eps);
            let gate = vecmat(&b, &p.w_gate);
            let up = vecmat(&b, &p.w_up);
            let act: Vec<f64> = gate
                .iter()
                .zip(&up)
                .map(|(g, u)| g / (1.0 + (-g).exp()) * u)
                .collect();
            let down = vecmat(&act, &p.w_down);
            for j in 0..d {
                h[t][j] += down[j];
            }
        }
    }
    let z = rms(&h[n - 1], &params.final_norm, eps);
    let logits = vecmat(&z, &params.unembedding);
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|x| (x - mx).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

/// Small deterministic sequence with Gaussian-ish visual rows.
pub fn random_sequence(d: usize, n_prefix: usize, n_visual: usize, n_question: usize, vocab: u32, seed: u64) -> MultimodalSequence {
    let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    let mut next = move || {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        state
    };
    let mut unif = || (next() % 1_000_000) as f64 / 1_000_000.0;
    let visual = Matrix::from_fn(n_visual, d, |_, _| unif() * 2.0 - 1.0);
    let prefix = (0..n_prefix).map(|_| (unif() * vocab as f64) as u32 % vocab).collect();
    let question = (0..n_question).map(|_| (unif() * vocab as f64) as u32 % vocab).collect();
    let label = (unif() * vocab as f64) as u32 % vocab;
    MultimodalSequence::new(prefix, visual, question, label)
}
