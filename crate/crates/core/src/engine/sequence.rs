use sha2::{Digest, Sha256};

use super::arch::ArchConfig;
use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// One prompt: text prefix, a contiguous visual block, then the question.
///
/// `visual` holds one row per visual token (`N_v x d`), produced directly by
/// the task generator. Visual indices are 0-based throughout the crate.
#[derive(Clone, Debug, PartialEq)]
pub struct MultimodalSequence {
    pub prefix_ids: Vec<u32>,
    pub visual: Matrix<f64>,
    pub question_ids: Vec<u32>,
    pub label: u32,
    pub position_ids: Vec<usize>,
}

impl MultimodalSequence {
    /// Builds a sequence with positions `0..len`.
    pub fn new(prefix_ids: Vec<u32>, visual: Matrix<f64>, question_ids: Vec<u32>, label: u32) -> Self {
        let len = prefix_ids.len() + visual.rows() + question_ids.len();
        Self {
            prefix_ids,
            visual,
            question_ids,
            label,
            position_ids: (0..len).collect(),
        }
    }

    pub fn n_visual(&self) -> usize {
        self.visual.rows()
    }

    pub fn n_text(&self) -> usize {
        self.prefix_ids.len() + self.question_ids.len()
    }

    pub fn len(&self) -> usize {
        self.n_text() + self.n_visual()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn text_ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.prefix_ids.iter().chain(&self.question_ids).copied()
    }

    /// Positions of the visual block.
    pub fn visual_positions(&self) -> &[usize] {
        let p = self.prefix_ids.len();
        &self.position_ids[p..p + self.n_visual()]
    }

    /// Positions of text tokens, prefix first.
    pub fn text_positions(&self) -> Vec<usize> {
        let p = self.prefix_ids.len();
        let v = self.n_visual();
        self.position_ids[..p]
            .iter()
            .chain(&self.position_ids[p + v..])
            .copied()
            .collect()
    }

    /// Short hex digest of ids, label, positions and visual values.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for id in self.text_ids().chain([self.label]) {
            h.update(id.to_le_bytes());
        }
        h.update((self.prefix_ids.len() as u64).to_le_bytes());
        for &p in &self.position_ids {
            h.update((p as u64).to_le_bytes());
        }
        for x in self.visual.as_slice() {
            h.update(x.to_le_bytes());
        }
        h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self, arch: &ArchConfig) -> Result<()> {
        if self.n_visual() == 0 {
            return Err(Error::InvalidSequence("no visual tokens".into()));
        }
        if self.question_ids.is_empty() {
            return Err(Error::InvalidSequence(
                "the question must hold at least one token".into(),
            ));
        }
        if self.visual.cols() != arch.d_model {
            return Err(Error::InvalidSequence(format!(
                "visual width {} does not match d_model {}",
                self.visual.cols(),
                arch.d_model
            )));
        }
        if self.len() > arch.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: self.len(),
                max: arch.max_seq_len,
            });
        }
        if let Some(bad) = self.text_ids().find(|&id| id as usize >= arch.vocab_size) {
            return Err(Error::InvalidSequence(format!(
                "token id {bad} outside vocabulary of size {}",
                arch.vocab_size
            )));
        }
        if self.label as usize >= arch.vocab_size {
            return Err(Error::LabelOutOfRange {
                label: self.label,
                vocab: arch.vocab_size,
            });
        }
        if self.position_ids.len() != self.len() {
            return Err(Error::InvalidSequence(format!(
                "{} position ids for {} tokens",
                self.position_ids.len(),
                self.len()
            )));
        }
        if self.position_ids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidSequence(
                "position ids must be strictly increasing".into(),
            ));
        }
        if self.position_ids.last().is_some_and(|&p| p >= arch.max_seq_len) {
            return Err(Error::InvalidSequence(
                "position id beyond max_seq_len".into(),
            ));
        }
        if !self.visual.is_finite() {
            return Err(Error::InvalidSequence("non-finite visual embedding".into()));
        }
        Ok(())
    }
}
