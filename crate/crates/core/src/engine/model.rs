use std::collections::BTreeMap;

use super::arch::ArchConfig;
use super::params::{LayerParams, Params};
use super::sequence::MultimodalSequence;
use crate::error::{Error, Result};
use crate::tensor::{matmul, matmul_nt, silu, softmax_in_place, Matrix, Scalar};

/// What a row of the residual stream holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Slot {
    /// Text token, indexed in prefix-then-question order.
    Text(usize),
    /// Visual token, by its original 0-based index.
    Visual(usize),
}

/// Hidden states at a layer boundary. `layer_index` counts completed decoder
/// layers, so 0 is the embedding output and `L` is the final residual stream.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerCheckpoint<T> {
    pub layer_index: usize,
    /// One row per alive visual token, in `alive_visual` order.
    pub hidden_visual: Matrix<T>,
    /// One row per text token, prefix first.
    pub hidden_text: Matrix<T>,
    pub alive_visual: Vec<usize>,
    pub visual_positions: Vec<usize>,
    pub text_positions: Vec<usize>,
}

/// How visual columns are treated when resuming from a checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub enum VisualTreatment {
    KeepAll,
    /// Binary mask over the alive visual tokens; zero entries zero the hidden
    /// state but the token stays in the sequence.
    ZeroMask(Vec<bool>),
    /// Keep only these original visual indices; the rest leave the sequence.
    Drop(Vec<usize>),
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CaptureFlags {
    pub checkpoint_layers: Vec<usize>,
    /// 1-based decoder layers whose head-averaged attention is returned.
    pub attention_layers: Vec<usize>,
}

impl CaptureFlags {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn all_checkpoints(n_layers: usize) -> Self {
        Self {
            checkpoint_layers: (0..=n_layers).collect(),
            attention_layers: Vec::new(),
        }
    }

    pub fn checkpoints(layers: impl IntoIterator<Item = usize>) -> Self {
        Self {
            checkpoint_layers: layers.into_iter().collect(),
            attention_layers: Vec::new(),
        }
    }

    pub fn with_attention(mut self, layers: impl IntoIterator<Item = usize>) -> Self {
        self.attention_layers.extend(layers);
        self
    }
}

#[derive(Clone, Debug)]
pub struct PrefillResult<T> {
    /// `p(g_1)` over the vocabulary, read at the final text position.
    pub probs: Vec<f64>,
    pub checkpoints: BTreeMap<usize, LayerCheckpoint<T>>,
    /// Head-averaged attention keyed by 1-based layer; rows and columns follow
    /// the live sequence order at that layer.
    pub attention: BTreeMap<usize, Matrix<T>>,
    /// Multiply-accumulates spent in decoder layers.
    pub macs: u64,
}

impl<T> PrefillResult<T> {
    pub fn prob(&self, token: u32) -> f64 {
        self.probs[token as usize]
    }

    /// Index of the most probable token, smaller id on ties.
    pub fn argmax(&self) -> u32 {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best as u32
    }
}

/// Residual stream rows in sequence order.
#[derive(Clone, Debug)]
pub(crate) struct Stream<T> {
    pub hidden: Matrix<T>,
    pub slots: Vec<Slot>,
    pub positions: Vec<usize>,
}

impl<T: Scalar> Stream<T> {
    fn visual_rows(&self) -> Vec<usize> {
        (0..self.slots.len())
            .filter(|&r| matches!(self.slots[r], Slot::Visual(_)))
            .collect()
    }

    fn to_checkpoint(&self, layer_index: usize) -> LayerCheckpoint<T> {
        let mut vis_rows = Vec::new();
        let mut alive = Vec::new();
        let mut vis_pos = Vec::new();
        let mut text_rows: Vec<(usize, usize)> = Vec::new();
        for (r, slot) in self.slots.iter().enumerate() {
            match *slot {
                Slot::Visual(k) => {
                    vis_rows.push(r);
                    alive.push(k);
                    vis_pos.push(self.positions[r]);
                }
                Slot::Text(j) => text_rows.push((j, r)),
            }
        }
        text_rows.sort_unstable();
        let text_idx: Vec<usize> = text_rows.iter().map(|&(_, r)| r).collect();
        LayerCheckpoint {
            layer_index,
            hidden_visual: self.hidden.select_rows(&vis_rows),
            hidden_text: self.hidden.select_rows(&text_idx),
            alive_visual: alive,
            visual_positions: vis_pos,
            text_positions: text_idx.iter().map(|&r| self.positions[r]).collect(),
        }
    }

    fn from_checkpoint(cp: &LayerCheckpoint<T>) -> Result<Self> {
        if cp.hidden_visual.rows() != cp.alive_visual.len()
            || cp.visual_positions.len() != cp.alive_visual.len()
        {
            return Err(Error::MaskLength {
                expected: cp.alive_visual.len(),
                got: cp.hidden_visual.rows(),
            });
        }
        if cp.hidden_text.rows() != cp.text_positions.len() {
            return Err(Error::MaskLength {
                expected: cp.text_positions.len(),
                got: cp.hidden_text.rows(),
            });
        }
        // Merge both lists by original position.
        let mut entries: Vec<(usize, Slot, usize)> = Vec::new();
        for (i, (&k, &p)) in cp.alive_visual.iter().zip(&cp.visual_positions).enumerate() {
            entries.push((p, Slot::Visual(k), i));
        }
        for (j, &p) in cp.text_positions.iter().enumerate() {
            entries.push((p, Slot::Text(j), j));
        }
        entries.sort_by_key(|e| e.0);
        if entries.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(Error::InvalidSequence("duplicate position ids in checkpoint".into()));
        }
        let d = cp.hidden_text.cols().max(cp.hidden_visual.cols());
        let mut hidden = Matrix::zeros(entries.len(), d);
        for (r, &(_, slot, i)) in entries.iter().enumerate() {
            let src = match slot {
                Slot::Visual(_) => cp.hidden_visual.row(i),
                Slot::Text(_) => cp.hidden_text.row(i),
            };
            hidden.row_mut(r).copy_from_slice(src);
        }
        Ok(Self {
            hidden,
            slots: entries.iter().map(|e| e.1).collect(),
            positions: entries.iter().map(|e| e.0).collect(),
        })
    }

    /// Keep only the visual tokens in `kept` (original indices).
    pub(crate) fn drop_visual(&mut self, kept: &[usize]) -> Result<()> {
        let alive: Vec<usize> = self
            .slots
            .iter()
            .filter_map(|s| match s {
                Slot::Visual(k) => Some(*k),
                _ => None,
            })
            .collect();
        if kept.len() > alive.len() {
            return Err(Error::MaskLength {
                expected: alive.len(),
                got: kept.len(),
            });
        }
        if let Some(bad) = kept.iter().find(|k| !alive.contains(k)) {
            return Err(Error::InvalidSequence(format!(
                "visual token {bad} is not alive"
            )));
        }
        let rows: Vec<usize> = (0..self.slots.len())
            .filter(|&r| match self.slots[r] {
                Slot::Visual(k) => kept.contains(&k),
                Slot::Text(_) => true,
            })
            .collect();
        self.hidden = self.hidden.select_rows(&rows);
        self.slots = rows.iter().map(|&r| self.slots[r]).collect();
        self.positions = rows.iter().map(|&r| self.positions[r]).collect();
        Ok(())
    }

    fn zero_mask(&mut self, mask: &[bool]) -> Result<()> {
        let vis = self.visual_rows();
        if mask.len() != vis.len() {
            return Err(Error::MaskLength {
                expected: vis.len(),
                got: mask.len(),
            });
        }
        for (&r, &keep) in vis.iter().zip(mask) {
            let m = if keep { T::one() } else { T::zero() };
            for x in self.hidden.row_mut(r) {
                *x = *x * m;
            }
        }
        Ok(())
    }
}

/// Intermediate values of one decoder block, kept for backpropagation.
pub(crate) struct LayerTrace<T> {
    pub x: Matrix<T>,
    pub r_attn: Vec<T>,
    pub a: Matrix<T>,
    pub q: Matrix<T>,
    pub k: Matrix<T>,
    pub v: Matrix<T>,
    /// Per-head softmax probabilities, `n x n`.
    pub probs: Vec<Matrix<T>>,
    pub o: Matrix<T>,
    pub h1: Matrix<T>,
    pub r_mlp: Vec<T>,
    pub b: Matrix<T>,
    pub gate: Matrix<T>,
    pub up: Matrix<T>,
    pub act: Matrix<T>,
}

/// RMS normalisation per row; returns the normalised rows and the per-row
/// inverse RMS. A zero row maps to zero.
pub(crate) fn rmsnorm<T: Scalar>(x: &Matrix<T>, gain: &Matrix<T>, eps: T) -> (Matrix<T>, Vec<T>) {
    let d = x.cols();
    let dn = T::from_f64(d as f64);
    let mut out = Matrix::zeros(x.rows(), d);
    let mut inv = Vec::with_capacity(x.rows());
    let g = gain.as_slice();
    for t in 0..x.rows() {
        let row = x.row(t);
        let ms = row.iter().map(|&v| v * v).sum::<T>() / dn;
        let r = T::one() / (ms + eps).sqrt();
        inv.push(r);
        for (o, (&v, &gj)) in out.row_mut(t).iter_mut().zip(row.iter().zip(g)) {
            *o = v * r * gj;
        }
    }
    (out, inv)
}

pub(crate) fn head_slice<T: Scalar>(m: &Matrix<T>, head: usize, dh: usize) -> Matrix<T> {
    Matrix::from_fn(m.rows(), dh, |r, c| m.get(r, head * dh + c))
}

/// Decoder-layer multiply-accumulates for `n` live tokens.
pub fn layer_macs(n: usize, d: usize, m: usize) -> u64 {
    let (n, d, m) = (n as u64, d as u64, m as u64);
    4 * n * d * d + 2 * n * n * d + 3 * n * d * m
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    arch: ArchConfig,
    params: Params<T>,
}

impl<T: Scalar> Model<T> {
    pub fn new(arch: ArchConfig, params: Params<T>) -> Result<Self> {
        arch.validate()?;
        if !params.shapes_match(&arch) {
            return Err(Error::Config("parameter shapes do not match the architecture".into()));
        }
        Ok(Self { arch, params })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn params(&self) -> &Params<T> {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut Params<T> {
        &mut self.params
    }

    pub(crate) fn into_params(self) -> Params<T> {
        self.params
    }

    fn eps(&self) -> T {
        T::from_f64(self.arch.norm_epsilon)
    }

    /// Layer-0 residual stream: token or visual embedding plus position.
    pub(crate) fn embed(&self, seq: &MultimodalSequence) -> Result<Stream<T>> {
        seq.validate(&self.arch)?;
        let d = self.arch.d_model;
        let n = seq.len();
        let mut hidden = Matrix::zeros(n, d);
        let mut slots = Vec::with_capacity(n);
        let np = seq.prefix_ids.len();
        let nv = seq.n_visual();
        for r in 0..n {
            let pos = seq.position_ids[r];
            let pe = self.params.position_embedding.row(pos);
            let (slot, src): (Slot, Vec<T>) = if r < np {
                let id = seq.prefix_ids[r] as usize;
                (Slot::Text(r), self.params.token_embedding.row(id).to_vec())
            } else if r < np + nv {
                let k = r - np;
                (
                    Slot::Visual(k),
                    seq.visual.row(k).iter().map(|&v| T::from_f64(v)).collect(),
                )
            } else {
                let j = r - nv;
                let id = seq.question_ids[r - np - nv] as usize;
                (Slot::Text(j), self.params.token_embedding.row(id).to_vec())
            };
            for (o, (&s, &p)) in hidden.row_mut(r).iter_mut().zip(src.iter().zip(pe)) {
                *o = s + p;
            }
            slots.push(slot);
        }
        Ok(Stream {
            hidden,
            slots,
            positions: seq.position_ids.clone(),
        })
    }

    /// One pre-norm decoder block over the full stream (0-based `l`).
    pub(crate) fn layer_forward(&self, l: usize, x: Matrix<T>, macs: &mut u64) -> (Matrix<T>, LayerTrace<T>) {
        let p: &LayerParams<T> = &self.params.layers[l];
        let n = x.rows();
        let d = self.arch.d_model;
        let heads = self.arch.n_heads;
        let dh = self.arch.head_dim();
        let eps = self.eps();

        let (a, r_attn) = rmsnorm(&x, &p.attn_norm, eps);
        let q = matmul(&a, &p.wq);
        let k = matmul(&a, &p.wk);
        let v = matmul(&a, &p.wv);
        let scale = T::one() / T::from_f64(dh as f64).sqrt();
        let mut o = Matrix::zeros(n, d);
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = head_slice(&q, h, dh);
            let kh = head_slice(&k, h, dh);
            let vh = head_slice(&v, h, dh);
            let mut s = matmul_nt(&qh, &kh);
            for t in 0..n {
                let row = s.row_mut(t);
                for (j, val) in row.iter_mut().enumerate() {
                    *val = if j > t { T::neg_infinity() } else { *val * scale };
                }
                softmax_in_place(row);
            }
            let oh = matmul(&s, &vh);
            for t in 0..n {
                o.row_mut(t)[h * dh..(h + 1) * dh].copy_from_slice(oh.row(t));
            }
            probs.push(s);
        }
        let mut h1 = matmul(&o, &p.wo);
        h1.add_assign(&x);

        let (b, r_mlp) = rmsnorm(&h1, &p.mlp_norm, eps);
        let gate = matmul(&b, &p.w_gate);
        let up = matmul(&b, &p.w_up);
        let act = Matrix::from_vec(
            n,
            self.arch.mlp_width,
            gate.as_slice()
                .iter()
                .zip(up.as_slice())
                .map(|(&g, &u)| silu(g) * u)
                .collect(),
        );
        let mut out = matmul(&act, &p.w_down);
        out.add_assign(&h1);

        *macs += layer_macs(n, d, self.arch.mlp_width);
        let trace = LayerTrace {
            x,
            r_attn,
            a,
            q,
            k,
            v,
            probs,
            o,
            h1,
            r_mlp,
            b,
            gate,
            up,
            act,
        };
        (out, trace)
    }

    /// Final norm and unembedding at the last row; returns logits.
    pub(crate) fn logits(&self, hidden: &Matrix<T>) -> (Matrix<T>, Matrix<T>, Vec<T>) {
        let last = hidden.select_rows(&[hidden.rows() - 1]);
        let (z, inv) = rmsnorm(&last, &self.params.final_norm, self.eps());
        (matmul(&z, &self.params.unembedding), z, inv)
    }

    fn readout(&self, stream: &Stream<T>) -> Result<Vec<f64>> {
        if !matches!(stream.slots.last(), Some(Slot::Text(_))) {
            return Err(Error::InvalidSequence("the last token must be text".into()));
        }
        let (logits, _, _) = self.logits(&stream.hidden);
        let mut probs: Vec<f64> = logits.as_slice().iter().map(|x| x.as_f64()).collect();
        softmax_in_place(&mut probs);
        Ok(probs)
    }

    /// Starts a layer-by-layer run over `seq`.
    pub fn start(&self, seq: &MultimodalSequence) -> Result<PrefillRun<'_, T>> {
        let stream = self.embed(seq)?;
        Ok(PrefillRun {
            model: self,
            stream,
            layer: 0,
            macs: 0,
            last_attention: None,
        })
    }

    /// Resumes a run from a captured layer boundary.
    pub fn resume(&self, state: &LayerCheckpoint<T>) -> Result<PrefillRun<'_, T>> {
        if state.layer_index > self.arch.n_layers {
            return Err(Error::LayerOutOfRange {
                layer: state.layer_index,
                n_layers: self.arch.n_layers,
            });
        }
        let stream = Stream::from_checkpoint(state)?;
        if stream.hidden.cols() != self.arch.d_model {
            return Err(Error::InvalidSequence("checkpoint width does not match d_model".into()));
        }
        Ok(PrefillRun {
            model: self,
            stream,
            layer: state.layer_index,
            macs: 0,
            last_attention: None,
        })
    }

    pub fn forward_prefill(&self, seq: &MultimodalSequence, capture: &CaptureFlags) -> Result<PrefillResult<T>> {
        self.start(seq)?.run_to_end(capture)
    }

    pub fn resume_forward(
        &self,
        state: &LayerCheckpoint<T>,
        treatment: &VisualTreatment,
        capture: &CaptureFlags,
    ) -> Result<PrefillResult<T>> {
        let mut run = self.resume(state)?;
        run.apply(treatment)?;
        run.run_to_end(capture)
    }

    /// Head-averaged post-softmax attention of 1-based decoder `layer`.
    pub fn attention_scores(&self, seq: &MultimodalSequence, layer: usize) -> Result<Matrix<T>> {
        if layer == 0 || layer > self.arch.n_layers {
            return Err(Error::LayerOutOfRange {
                layer,
                n_layers: self.arch.n_layers,
            });
        }
        let mut run = self.start(seq)?;
        while run.layer() < layer {
            run.step(true)?;
        }
        Ok(run.last_attention.take().expect("attention tracked"))
    }
}

/// A forward pass paused at a layer boundary.
pub struct PrefillRun<'m, T> {
    model: &'m Model<T>,
    stream: Stream<T>,
    layer: usize,
    macs: u64,
    last_attention: Option<Matrix<T>>,
}

impl<'m, T: Scalar> PrefillRun<'m, T> {
    /// Number of decoder layers already applied.
    pub fn layer(&self) -> usize {
        self.layer
    }

    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn is_done(&self) -> bool {
        self.layer == self.model.arch.n_layers
    }

    pub fn checkpoint(&self) -> LayerCheckpoint<T> {
        self.stream.to_checkpoint(self.layer)
    }

    /// Original indices of visual tokens still in the sequence.
    pub fn alive_visual(&self) -> Vec<usize> {
        self.stream
            .slots
            .iter()
            .filter_map(|s| match s {
                Slot::Visual(k) => Some(*k),
                _ => None,
            })
            .collect()
    }

    /// Hidden rows of the alive visual tokens, in `alive_visual` order.
    pub fn visual_hidden(&self) -> Matrix<T> {
        self.stream.hidden.select_rows(&self.stream.visual_rows())
    }

    pub fn slots(&self) -> &[Slot] {
        &self.stream.slots
    }

    /// Head-averaged attention of the layer applied last, if it was tracked.
    pub fn last_attention(&self) -> Option<&Matrix<T>> {
        self.last_attention.as_ref()
    }

    pub fn apply(&mut self, treatment: &VisualTreatment) -> Result<()> {
        match treatment {
            VisualTreatment::KeepAll => Ok(()),
            VisualTreatment::ZeroMask(mask) => self.stream.zero_mask(mask),
            VisualTreatment::Drop(kept) => self.stream.drop_visual(kept),
        }
    }

    /// Applies the next decoder layer.
    pub fn step(&mut self, track_attention: bool) -> Result<()> {
        let l = self.layer;
        if l >= self.model.arch.n_layers {
            return Err(Error::LayerOutOfRange {
                layer: l + 1,
                n_layers: self.model.arch.n_layers,
            });
        }
        let x = std::mem::replace(&mut self.stream.hidden, Matrix::zeros(0, 0));
        let (out, trace) = self.model.layer_forward(l, x, &mut self.macs);
        if !out.is_finite() {
            return Err(Error::NonFinite { layer: l + 1 });
        }
        self.stream.hidden = out;
        self.layer += 1;
        self.last_attention = if track_attention {
            let n = self.stream.hidden.rows();
            let mut avg = Matrix::zeros(n, n);
            let heads = trace.probs.len();
            for p in &trace.probs {
                avg.add_assign(p);
            }
            let inv = T::one() / T::from_f64(heads as f64);
            avg.as_mut_slice().iter_mut().for_each(|x| *x = *x * inv);
            Some(avg)
        } else {
            None
        };
        Ok(())
    }

    pub fn run_to_end(mut self, capture: &CaptureFlags) -> Result<PrefillResult<T>> {
        let mut checkpoints = BTreeMap::new();
        let mut attention = BTreeMap::new();
        if capture.checkpoint_layers.contains(&self.layer) {
            checkpoints.insert(self.layer, self.checkpoint());
        }
        while !self.is_done() {
            let want_attn = capture.attention_layers.contains(&(self.layer + 1));
            self.step(want_attn)?;
            if let Some(a) = self.last_attention.take() {
                attention.insert(self.layer, a);
            }
            if capture.checkpoint_layers.contains(&self.layer) {
                checkpoints.insert(self.layer, self.checkpoint());
            }
        }
        let probs = self.model.readout(&self.stream)?;
        Ok(PrefillResult {
            probs,
            checkpoints,
            attention,
            macs: self.macs,
        })
    }
}
