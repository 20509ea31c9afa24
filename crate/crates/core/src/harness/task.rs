//! Synthetic colour-grid question answering.
//!
//! Every sample is a `G x G` grid of colours shown to the model as `G^2`
//! visual tokens. *Lookup* asks for the colour of one cell (fine detail);
//! *Majority* asks for the most frequent colour (global summary).

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::engine::MultimodalSequence;
use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const BOS: u32 = 0;
pub const Q_LOOKUP: u32 = 1;
pub const Q_MAJORITY: u32 = 2;

pub const DEFAULT_ENCODER_SEED: u64 = 0x5eed_c0de;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Lookup,
    Majority,
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::Lookup => "lookup",
            TaskKind::Majority => "majority",
        })
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lookup" => Ok(TaskKind::Lookup),
            "majority" => Ok(TaskKind::Majority),
            other => Err(Error::Config(format!("unknown task {other:?} (lookup, majority)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub grid_side: usize,
    pub n_colors: usize,
    /// Training samples.
    pub n_samples: usize,
    pub n_heldout: usize,
    pub seed: u64,
    #[serde(default = "default_encoder_seed")]
    pub encoder_seed: u64,
}

fn default_encoder_seed() -> u64 {
    DEFAULT_ENCODER_SEED
}

impl TaskSpec {
    pub fn new(kind: TaskKind, grid_side: usize, n_colors: usize, n_samples: usize, n_heldout: usize, seed: u64) -> Self {
        Self {
            kind,
            grid_side,
            n_colors,
            n_samples,
            n_heldout,
            seed,
            encoder_seed: DEFAULT_ENCODER_SEED,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_side == 0 || self.grid_side > 16 {
            return Err(Error::Config(format!("grid side {} outside 1..=16", self.grid_side)));
        }
        if self.n_colors < 2 || self.n_colors > 64 {
            return Err(Error::Config(format!("n_colors {} outside 2..=64", self.n_colors)));
        }
        Ok(())
    }

    pub fn n_visual(&self) -> usize {
        self.grid_side * self.grid_side
    }

    pub fn vocab(&self) -> TaskVocab {
        TaskVocab {
            grid_side: self.grid_side,
            n_colors: self.n_colors,
        }
    }
}

/// Token id layout: BOS, two question markers, row ids, column ids, colours.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TaskVocab {
    pub grid_side: usize,
    pub n_colors: usize,
}

impl TaskVocab {
    pub fn row(&self, r: usize) -> u32 {
        (3 + r) as u32
    }

    pub fn col(&self, c: usize) -> u32 {
        (3 + self.grid_side + c) as u32
    }

    pub fn color(&self, color: usize) -> u32 {
        (3 + 2 * self.grid_side + color) as u32
    }

    pub fn color_of_token(&self, token: u32) -> Option<usize> {
        let base = 3 + 2 * self.grid_side;
        let t = token as usize;
        (t >= base && t < base + self.n_colors).then(|| t - base)
    }

    /// Smallest vocabulary that holds every token.
    pub fn size(&self) -> usize {
        3 + 2 * self.grid_side + self.n_colors
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TaskSample {
    pub kind: TaskKind,
    /// Row-major colours, one per cell.
    pub grid: Vec<u8>,
    pub query: Option<(u8, u8)>,
    pub answer: u8,
}

/// Fixed Gaussian codes for cell positions and colours.
#[derive(Clone, Debug)]
pub struct VisualEncoder {
    position_codes: Matrix<f64>,
    color_codes: Matrix<f64>,
}

impl VisualEncoder {
    pub fn new(d_model: usize, n_cells: usize, n_colors: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |rows: usize| {
            Matrix::from_fn(rows, d_model, |_, _| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z
            })
        };
        let position_codes = draw(n_cells);
        let color_codes = draw(n_colors);
        Self {
            position_codes,
            color_codes,
        }
    }

    pub fn for_spec(spec: &TaskSpec, d_model: usize) -> Self {
        Self::new(d_model, spec.n_visual(), spec.n_colors, spec.encoder_seed)
    }

    pub fn encode(&self, grid: &[u8]) -> Matrix<f64> {
        let d = self.color_codes.cols();
        Matrix::from_fn(grid.len(), d, |cell, j| {
            self.position_codes.get(cell, j) + self.color_codes.get(grid[cell] as usize, j)
        })
    }
}

/// Most frequent colour; smallest colour id on ties.
pub fn majority_color(grid: &[u8], n_colors: usize) -> u8 {
    let mut counts = vec![0usize; n_colors];
    for &c in grid {
        counts[c as usize] += 1;
    }
    let mut best = 0;
    for (c, &n) in counts.iter().enumerate() {
        if n > counts[best] {
            best = c;
        }
    }
    best as u8
}

impl TaskSample {
    fn generate(spec: &TaskSpec, rng: &mut ChaCha8Rng) -> Self {
        let cells = spec.n_visual();
        match spec.kind {
            TaskKind::Lookup => {
                let grid: Vec<u8> = (0..cells).map(|_| rng.random_range(0..spec.n_colors) as u8).collect();
                let r = rng.random_range(0..spec.grid_side);
                let c = rng.random_range(0..spec.grid_side);
                let answer = grid[r * spec.grid_side + c];
                Self {
                    kind: TaskKind::Lookup,
                    grid,
                    query: Some((r as u8, c as u8)),
                    answer,
                }
            }
            TaskKind::Majority => {
                // One colour covers a strict majority of cells, so the mode
                // is unique and spread over many tokens.
                let dominant = rng.random_range(0..spec.n_colors);
                let count = rng.random_range(cells / 2 + 1..=cells);
                let mut grid = vec![u8::MAX; cells];
                for i in index::sample(rng, cells, count) {
                    grid[i] = dominant as u8;
                }
                for g in grid.iter_mut().filter(|g| **g == u8::MAX) {
                    let other = rng.random_range(0..spec.n_colors - 1);
                    *g = (if other >= dominant { other + 1 } else { other }) as u8;
                }
                let answer = majority_color(&grid, spec.n_colors);
                Self {
                    kind: TaskKind::Majority,
                    grid,
                    query: None,
                    answer,
                }
            }
        }
    }

    pub fn to_sequence(&self, vocab: &TaskVocab, encoder: &VisualEncoder) -> MultimodalSequence {
        let question = match (self.kind, self.query) {
            (TaskKind::Lookup, Some((r, c))) => vec![Q_LOOKUP, vocab.row(r as usize), vocab.col(c as usize)],
            _ => vec![Q_MAJORITY],
        };
        MultimodalSequence::new(
            vec![BOS],
            encoder.encode(&self.grid),
            question,
            vocab.color(self.answer as usize),
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Heldout,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Heldout => "heldout",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: TaskSpec,
    pub split: Split,
    pub samples: Vec<TaskSample>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSplits {
    pub train: Dataset,
    pub heldout: Dataset,
}

/// Generates disjoint train and held-out sets, deterministic per seed.
pub fn gen_task(spec: &TaskSpec) -> Result<TaskSplits> {
    spec.validate()?;
    let mut train_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    train_rng.set_stream(1);
    let train: Vec<TaskSample> = (0..spec.n_samples)
        .map(|_| TaskSample::generate(spec, &mut train_rng))
        .collect();
    let seen: HashSet<&TaskSample> = train.iter().collect();
    let mut held_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    held_rng.set_stream(2);
    let mut heldout = Vec::with_capacity(spec.n_heldout);
    let mut attempts = 0usize;
    while heldout.len() < spec.n_heldout {
        attempts += 1;
        if attempts > 100 * (spec.n_heldout + 10) {
            return Err(Error::Dataset(
                "sample space too small for a disjoint held-out split".into(),
            ));
        }
        let s = TaskSample::generate(spec, &mut held_rng);
        if !seen.contains(&s) {
            heldout.push(s);
        }
    }
    Ok(TaskSplits {
        train: Dataset {
            spec: spec.clone(),
            split: Split::Train,
            samples: train,
        },
        heldout: Dataset {
            spec: spec.clone(),
            split: Split::Heldout,
            samples: heldout,
        },
    })
}

pub const DATASET_MAGIC: &[u8; 8] = b"VTHZDATA";
pub const DATASET_VERSION: u32 = 1;

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn sequences(&self, d_model: usize) -> Vec<MultimodalSequence> {
        let encoder = VisualEncoder::for_spec(&self.spec, d_model);
        let vocab = self.spec.vocab();
        self.samples.iter().map(|s| s.to_sequence(&vocab, &encoder)).collect()
    }

    pub fn truncated(&self, n: usize) -> Self {
        Self {
            spec: self.spec.clone(),
            split: self.split,
            samples: self.samples.iter().take(n).cloned().collect(),
        }
    }

    /// Binary layout: magic, version, header length and sorted `key=value`
    /// header, then per sample `G^2` colour bytes, row and column bytes
    /// (`0xff` for none) and the answer colour byte.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = BTreeMap::new();
        header.insert("encoder_seed", self.spec.encoder_seed.to_string());
        header.insert("grid_side", self.spec.grid_side.to_string());
        header.insert("kind", self.spec.kind.to_string());
        header.insert("n_colors", self.spec.n_colors.to_string());
        header.insert("n_heldout", self.spec.n_heldout.to_string());
        header.insert("n_records", self.samples.len().to_string());
        header.insert("n_samples", self.spec.n_samples.to_string());
        header.insert("seed", self.spec.seed.to_string());
        header.insert("split", self.split.to_string());
        let text: String = header.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        let mut out = Vec::new();
        out.extend_from_slice(DATASET_MAGIC);
        out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        for s in &self.samples {
            out.extend_from_slice(&s.grid);
            let (r, c) = s.query.unwrap_or((0xff, 0xff));
            out.extend_from_slice(&[r, c, s.answer]);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Dataset(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != DATASET_MAGIC {
            return Err(bad("bad magic bytes"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != DATASET_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let hl = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
        let text = bytes
            .get(16..16 + hl)
            .and_then(|b| std::str::from_utf8(b).ok())
            .ok_or_else(|| bad("truncated or corrupt header"))?;
        let map: BTreeMap<&str, &str> = text.lines().filter_map(|l| l.split_once('=')).collect();
        let get = |k: &str| map.get(k).copied().ok_or_else(|| bad(&format!("missing {k}")));
        let num = |k: &str| -> Result<u64> { get(k)?.parse().map_err(|_| bad(&format!("bad {k}"))) };
        let spec = TaskSpec {
            kind: get("kind")?.parse()?,
            grid_side: num("grid_side")? as usize,
            n_colors: num("n_colors")? as usize,
            n_samples: num("n_samples")? as usize,
            n_heldout: num("n_heldout")? as usize,
            seed: num("seed")?,
            encoder_seed: num("encoder_seed")?,
        };
        spec.validate()?;
        let split = match get("split")? {
            "train" => Split::Train,
            "heldout" => Split::Heldout,
            other => return Err(bad(&format!("unknown split {other}"))),
        };
        let n = num("n_records")? as usize;
        let cells = spec.n_visual();
        let rec = cells + 3;
        let body = &bytes[16 + hl..];
        if body.len() != n * rec {
            return Err(bad(&format!("expected {} record bytes, found {}", n * rec, body.len())));
        }
        let mut samples = Vec::with_capacity(n);
        for chunk in body.chunks_exact(rec) {
            let grid = chunk[..cells].to_vec();
            if grid.iter().any(|&c| c as usize >= spec.n_colors) {
                return Err(bad("colour id out of range"));
            }
            let (r, c, answer) = (chunk[cells], chunk[cells + 1], chunk[cells + 2]);
            let query = (r != 0xff).then_some((r, c));
            samples.push(TaskSample {
                kind: spec.kind,
                grid,
                query,
                answer,
            });
        }
        Ok(Self { spec, split, samples })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::file(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::file(path, e))?;
        Self::from_bytes(&bytes)
    }
}
