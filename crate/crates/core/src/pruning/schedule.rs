use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::select::{
    check_ratio, last_row_visual_attention, low_duplication_subset, maxmin_subset, random_subset,
    retained_count, topk_by_score,
};
use crate::engine::{CaptureFlags, Slot, Model, MultimodalSequence, PrefillResult, VisualTreatment};
use crate::error::{Error, Result};
use crate::tensor::{Matrix, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Random,
    /// Last-text-token attention ranking (FastV-style).
    AttentionTopk,
    /// Greedy farthest-first under cosine distance (DivPrune-style).
    MaxminDiversity,
    /// Pivot duplication ranking (DART-style).
    LowDuplication,
    /// Drop every remaining visual token (VTW-style).
    Withdraw,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::Random,
        Strategy::AttentionTopk,
        Strategy::MaxminDiversity,
        Strategy::LowDuplication,
        Strategy::Withdraw,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Random => "random",
            Strategy::AttentionTopk => "attention-topk",
            Strategy::MaxminDiversity => "maxmin-diversity",
            Strategy::LowDuplication => "low-duplication",
            Strategy::Withdraw => "withdraw",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Schedule(format!("unknown strategy {s:?}")))
    }
}

/// What a schedule's retain ratios are fractions of.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RatioBasis {
    /// The sequence's full visual token count.
    #[default]
    Original,
    /// The tokens still alive when the action runs.
    Alive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneAction {
    /// Layer boundary: 0 prunes before decoder layer 1.
    pub layer: usize,
    pub strategy: Strategy,
    pub retain_ratio: f64,
    #[serde(default)]
    pub seed: u64,
}

impl PruneAction {
    pub fn new(layer: usize, strategy: Strategy, retain_ratio: f64, seed: u64) -> Self {
        Self {
            layer,
            strategy,
            retain_ratio,
            seed,
        }
    }

    pub fn withdraw(layer: usize) -> Self {
        Self::new(layer, Strategy::Withdraw, 0.0, 0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneSchedule {
    pub name: String,
    #[serde(default)]
    pub ratio_basis: RatioBasis,
    #[serde(default, rename = "action")]
    pub actions: Vec<PruneAction>,
}

impl PruneSchedule {
    pub fn empty(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            ratio_basis: RatioBasis::Original,
            actions: Vec::new(),
        }
    }

    pub fn new(name: impl Into<String>, ratio_basis: RatioBasis, actions: Vec<PruneAction>) -> Result<Self> {
        let s = Self {
            name: name.into(),
            ratio_basis,
            actions,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        for a in &self.actions {
            check_ratio(a.retain_ratio)?;
            if a.strategy == Strategy::Withdraw && a.retain_ratio != 0.0 {
                return Err(Error::Schedule(format!(
                    "withdraw at layer {} must have retain ratio 0",
                    a.layer
                )));
            }
        }
        if self.actions.windows(2).any(|w| w[0].layer >= w[1].layer) {
            return Err(Error::Schedule(format!(
                "{}: action layers must be strictly increasing",
                self.name
            )));
        }
        if self.ratio_basis == RatioBasis::Original
            && self.actions.windows(2).any(|w| w[1].retain_ratio > w[0].retain_ratio)
        {
            return Err(Error::Schedule(format!(
                "{}: retained count would grow between actions",
                self.name
            )));
        }
        Ok(())
    }

    pub fn validate_for(&self, n_layers: usize) -> Result<()> {
        self.validate()?;
        if let Some(a) = self.actions.iter().find(|a| a.layer > n_layers) {
            return Err(Error::Schedule(format!(
                "{}: action at layer {} but the model has {n_layers} layers",
                self.name, a.layer
            )));
        }
        Ok(())
    }

    pub fn action_at(&self, layer: usize) -> Option<&PruneAction> {
        self.actions.iter().find(|a| a.layer == layer)
    }

    /// Tokens kept by `action` when `alive` are alive out of `n_visual`.
    pub fn target_count(&self, action: &PruneAction, alive: usize, n_visual: usize) -> Result<usize> {
        if action.strategy == Strategy::Withdraw {
            return Ok(0);
        }
        Ok(match self.ratio_basis {
            RatioBasis::Original => retained_count(action.retain_ratio, n_visual)?.min(alive),
            RatioBasis::Alive => retained_count(action.retain_ratio, alive)?,
        })
    }

    /// Visual tokens processed by each decoder layer `1..=L`.
    pub fn alive_counts(&self, n_visual: usize, n_layers: usize) -> Result<Vec<usize>> {
        self.validate_for(n_layers)?;
        let mut alive = n_visual;
        let mut out = Vec::with_capacity(n_layers);
        for boundary in 0..n_layers {
            if let Some(a) = self.action_at(boundary) {
                alive = self.target_count(a, alive, n_visual)?;
            }
            out.push(alive);
        }
        Ok(out)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("schedule serialises")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let s: Self = toml::from_str(text).map_err(|e| Error::Schedule(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Self::from_toml(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_toml()).map_err(|e| Error::file(path, e))
    }
}

#[derive(Clone, Debug)]
pub struct ScheduleRun<T> {
    pub result: PrefillResult<T>,
    /// Alive visual set entering decoder layer `i + 1`, for `i` in `0..L`.
    pub alive_sets: Vec<Vec<usize>>,
    /// Sizes of `alive_sets`.
    pub retained_counts: Vec<usize>,
}

/// Runs a prefill, pruning with drop semantics at every scheduled boundary.
pub fn apply_schedule<T: Scalar>(
    model: &Model<T>,
    seq: &MultimodalSequence,
    schedule: &PruneSchedule,
) -> Result<ScheduleRun<T>> {
    let n_layers = model.arch().n_layers;
    schedule.validate_for(n_layers)?;
    let n_visual = seq.n_visual();
    let mut run = model.start(seq)?;
    let mut alive_sets = Vec::with_capacity(n_layers);
    for boundary in 0..=n_layers {
        if let Some(action) = schedule.action_at(boundary) {
            let alive = run.alive_visual();
            let keep = schedule.target_count(action, alive.len(), n_visual)?;
            let features = features_at(&run, seq, boundary, &alive);
            let attention = run.last_attention().map(|a| (a, run.slots()));
            let kept = select_tokens(action.strategy, keep, action.seed, &alive, &features, attention, boundary)?;
            run.apply(&VisualTreatment::Drop(kept))?;
        }
        if boundary < n_layers {
            alive_sets.push(run.alive_visual());
            let next_needs_attention = schedule
                .action_at(boundary + 1)
                .is_some_and(|a| a.strategy == Strategy::AttentionTopk);
            run.step(next_needs_attention)?;
        }
    }
    let result = run.run_to_end(&CaptureFlags::none())?;
    let retained_counts = alive_sets.iter().map(Vec::len).collect();
    Ok(ScheduleRun {
        result,
        alive_sets,
        retained_counts,
    })
}

/// Runs one selection rule keeping `keep` of `alive`. `features` has one
/// row per alive token; `attention` is the head-averaged matrix of the layer
/// just applied, with its column slots.
pub fn select_tokens<T: Scalar>(
    strategy: Strategy,
    keep: usize,
    seed: u64,
    alive: &[usize],
    features: &Matrix<T>,
    attention: Option<(&Matrix<T>, &[Slot])>,
    layer: usize,
) -> Result<Vec<usize>> {
    let keep = keep.min(alive.len());
    Ok(match strategy {
        Strategy::Withdraw => Vec::new(),
        Strategy::Random => random_subset(alive, keep, seed),
        Strategy::AttentionTopk => {
            let (attn, slots) = attention.ok_or(Error::AttentionUnavailable { layer })?;
            let w = last_row_visual_attention(attn, slots, alive)?;
            topk_by_score(alive, &w, keep)
        }
        Strategy::MaxminDiversity => maxmin_subset(features, alive, keep),
        Strategy::LowDuplication => low_duplication_subset(features, alive, keep, seed),
    })
}

/// Selection features: raw visual embeddings before the decoder, hidden
/// states afterwards.
fn features_at<T: Scalar>(
    run: &crate::engine::PrefillRun<'_, T>,
    seq: &MultimodalSequence,
    boundary: usize,
    alive: &[usize],
) -> Matrix<T> {
    if boundary == 0 {
        seq.visual.select_rows(alive).cast()
    } else {
        run.visual_hidden()
    }
}
