use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::arch::ArchConfig;
use crate::tensor::{Matrix, Scalar};

/// Weights of one decoder block. Projections are applied as `x * W`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T> {
    pub attn_norm: Matrix<T>,
    pub wq: Matrix<T>,
    pub wk: Matrix<T>,
    pub wv: Matrix<T>,
    pub wo: Matrix<T>,
    pub mlp_norm: Matrix<T>,
    pub w_gate: Matrix<T>,
    pub w_up: Matrix<T>,
    pub w_down: Matrix<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Params<T> {
    pub token_embedding: Matrix<T>,
    pub position_embedding: Matrix<T>,
    pub layers: Vec<LayerParams<T>>,
    pub final_norm: Matrix<T>,
    pub unembedding: Matrix<T>,
}

impl<T: Scalar> LayerParams<T> {
    fn zeros(d: usize, m: usize) -> Self {
        Self {
            attn_norm: Matrix::from_vec(1, d, vec![T::one(); d]),
            wq: Matrix::zeros(d, d),
            wk: Matrix::zeros(d, d),
            wv: Matrix::zeros(d, d),
            wo: Matrix::zeros(d, d),
            mlp_norm: Matrix::from_vec(1, d, vec![T::one(); d]),
            w_gate: Matrix::zeros(d, m),
            w_up: Matrix::zeros(d, m),
            w_down: Matrix::zeros(m, d),
        }
    }

    fn tensors(&self) -> [&Matrix<T>; 9] {
        [
            &self.attn_norm,
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.mlp_norm,
            &self.w_gate,
            &self.w_up,
            &self.w_down,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Matrix<T>; 9] {
        [
            &mut self.attn_norm,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.mlp_norm,
            &mut self.w_gate,
            &mut self.w_up,
            &mut self.w_down,
        ]
    }
}

const LAYER_TENSOR_NAMES: [&str; 9] = [
    "attn_norm", "wq", "wk", "wv", "wo", "mlp_norm", "w_gate", "w_up", "w_down",
];

impl<T: Scalar> Params<T> {
    /// Pass-through model: every projection is zero and every norm gain is
    /// one, so each block is the identity on the residual stream.
    pub fn identity(arch: &ArchConfig) -> Self {
        let (d, m) = (arch.d_model, arch.mlp_width);
        Self {
            token_embedding: Matrix::zeros(arch.vocab_size, d),
            position_embedding: Matrix::zeros(arch.max_seq_len, d),
            layers: (0..arch.n_layers).map(|_| LayerParams::zeros(d, m)).collect(),
            final_norm: Matrix::from_vec(1, d, vec![T::one(); d]),
            unembedding: Matrix::zeros(d, arch.vocab_size),
        }
    }

    /// Seeded Gaussian initialisation with fan-in scaling; residual output
    /// projections are shrunk by `1/sqrt(2L)`.
    pub fn init(arch: &ArchConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, m) = (arch.d_model, arch.mlp_width);
        let residual = 1.0 / (2.0 * arch.n_layers as f64).sqrt();
        let mut gauss = |rows: usize, cols: usize, std: f64| -> Matrix<T> {
            let normal = Normal::new(0.0, std).expect("finite std");
            Matrix::from_fn(rows, cols, |_, _| T::from_f64(normal.sample(&mut rng)))
        };
        let token_embedding = gauss(arch.vocab_size, d, 1.0);
        let position_embedding = gauss(arch.max_seq_len, d, 0.5);
        let in_std = 1.0 / (d as f64).sqrt();
        let mlp_std = 1.0 / (m as f64).sqrt();
        let layers = (0..arch.n_layers)
            .map(|_| LayerParams {
                attn_norm: Matrix::from_vec(1, d, vec![T::one(); d]),
                wq: gauss(d, d, in_std),
                wk: gauss(d, d, in_std),
                wv: gauss(d, d, in_std),
                wo: gauss(d, d, in_std * residual),
                mlp_norm: Matrix::from_vec(1, d, vec![T::one(); d]),
                w_gate: gauss(d, m, in_std),
                w_up: gauss(d, m, in_std),
                w_down: gauss(m, d, mlp_std * residual),
            })
            .collect();
        let unembedding = gauss(d, arch.vocab_size, in_std);
        Self {
            token_embedding,
            position_embedding,
            layers,
            final_norm: Matrix::from_vec(1, d, vec![T::one(); d]),
            unembedding,
        }
    }

    /// All tensors in the fixed serialisation order.
    pub fn tensors(&self) -> Vec<&Matrix<T>> {
        let mut out = vec![&self.token_embedding, &self.position_embedding];
        for layer in &self.layers {
            out.extend(layer.tensors());
        }
        out.push(&self.final_norm);
        out.push(&self.unembedding);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix<T>> {
        let mut out = vec![&mut self.token_embedding, &mut self.position_embedding];
        for layer in &mut self.layers {
            out.extend(layer.tensors_mut());
        }
        out.push(&mut self.final_norm);
        out.push(&mut self.unembedding);
        out
    }

    /// Names matching [`Params::tensors`] order.
    pub fn tensor_names(n_layers: usize) -> Vec<String> {
        let mut out = vec!["token_embedding".to_string(), "position_embedding".to_string()];
        for l in 0..n_layers {
            out.extend(LAYER_TENSOR_NAMES.iter().map(|n| format!("layers.{l}.{n}")));
        }
        out.push("final_norm".into());
        out.push("unembedding".into());
        out
    }

    pub fn n_elements(&self) -> usize {
        self.tensors().iter().map(|t| t.as_slice().len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> Params<U> {
        Params {
            token_embedding: self.token_embedding.cast(),
            position_embedding: self.position_embedding.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    attn_norm: l.attn_norm.cast(),
                    wq: l.wq.cast(),
                    wk: l.wk.cast(),
                    wv: l.wv.cast(),
                    wo: l.wo.cast(),
                    mlp_norm: l.mlp_norm.cast(),
                    w_gate: l.w_gate.cast(),
                    w_up: l.w_up.cast(),
                    w_down: l.w_down.cast(),
                })
                .collect(),
            final_norm: self.final_norm.cast(),
            unembedding: self.unembedding.cast(),
        }
    }

    /// Same shapes, all zeros; used as a gradient buffer.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill_zero();
        }
        z
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    /// `self += scale * other`, tensor by tensor.
    pub fn axpy(&mut self, scale: T, other: &Params<T>) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, &y) in a.as_mut_slice().iter_mut().zip(b.as_slice()) {
                *x = *x + scale * y;
            }
        }
    }

    pub(crate) fn shapes_match(&self, arch: &ArchConfig) -> bool {
        let reference = Params::<T>::identity(arch);
        self.layers.len() == arch.n_layers
            && self
                .tensors()
                .iter()
                .zip(reference.tensors())
                .all(|(a, b)| a.rows() == b.rows() && a.cols() == b.cols())
    }
}
