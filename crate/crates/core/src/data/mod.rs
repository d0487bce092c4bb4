//! Offline transition datasets: generation, a checksummed binary file format
//! and seeded minibatch sampling.

mod generate;

pub use generate::{gen_bandit_dataset, gen_mode_bandit_dataset, gen_spread_dataset, MixtureSpec};

use std::fs;
use std::path::Path;

use crc::{Crc, CRC_64_XZ};
use ndarray::{Array2, Axis};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::envs::Env;
use crate::error::{Error, Result};
use crate::rng::{rng_seeded, Rng};

pub const MAGIC: &[u8; 8] = b"OMSDDS1\0";
pub const FORMAT_VERSION: u32 = 1;
const CRC64: Crc<u64> = Crc::<u64>::new(&CRC_64_XZ);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub format_version: u32,
    pub env: Env,
    pub n_agents: usize,
    pub state_dim: usize,
    /// Per-agent action dimension.
    pub action_dim: usize,
    pub n_transitions: usize,
    pub quality: String,
    pub seed: u64,
    pub n_episodes: usize,
    pub return_mean: f64,
    pub return_max: f64,
}

impl DatasetMeta {
    pub fn joint_action_dim(&self) -> usize {
        self.n_agents * self.action_dim
    }
}

/// Immutable table of transitions, stored row-major in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    meta: DatasetMeta,
    states: Array2<f64>,
    actions: Array2<f64>,
    rewards: Vec<f64>,
    next_states: Array2<f64>,
    dones: Vec<u8>,
}

/// Episode return statistics recomputed from the stored columns.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReturnStats {
    pub n_episodes: usize,
    pub mean: f64,
    pub max: f64,
}

pub fn episode_returns(rewards: &[f64], dones: &[u8]) -> Vec<f64> {
    let mut out = Vec::new();
    let mut acc = 0.0;
    let mut open = false;
    for (&r, &d) in rewards.iter().zip(dones) {
        acc += r;
        open = true;
        if d != 0 {
            out.push(acc);
            acc = 0.0;
            open = false;
        }
    }
    if open {
        out.push(acc);
    }
    out
}

fn return_stats(rewards: &[f64], dones: &[u8]) -> ReturnStats {
    let returns = episode_returns(rewards, dones);
    let n = returns.len();
    let mean = if n == 0 {
        0.0
    } else {
        returns.iter().sum::<f64>() / n as f64
    };
    let max = returns.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    ReturnStats {
        n_episodes: n,
        mean,
        max: if n == 0 { 0.0 } else { max },
    }
}

/// Columns handed to [`Dataset::new`].
pub struct Columns {
    pub states: Array2<f64>,
    pub actions: Array2<f64>,
    pub rewards: Vec<f64>,
    pub next_states: Array2<f64>,
    pub dones: Vec<u8>,
}

impl Dataset {
    /// Validates the columns against `env` and fills in the derived metadata.
    pub fn new(env: Env, quality: &str, seed: u64, cols: Columns) -> Result<Self> {
        let n = cols.rewards.len();
        let sd = env.state_dim();
        let jd = env.joint_action_dim();
        if cols.states.dim() != (n, sd)
            || cols.next_states.dim() != (n, sd)
            || cols.actions.dim() != (n, jd)
            || cols.dones.len() != n
        {
            return Err(Error::shape(format!(
                "dataset columns disagree: states {:?}, actions {:?}, next_states {:?}, {} rewards, {} dones",
                cols.states.dim(),
                cols.actions.dim(),
                cols.next_states.dim(),
                n,
                cols.dones.len()
            )));
        }
        let (lo, hi) = env.action_box();
        if cols.actions.iter().any(|a| !(lo..=hi).contains(a)) {
            return Err(Error::domain("dataset action outside the env's action box"));
        }
        if cols.rewards.iter().any(|r| !r.is_finite()) {
            return Err(Error::domain("dataset contains a non-finite reward"));
        }
        let stats = return_stats(&cols.rewards, &cols.dones);
        let meta = DatasetMeta {
            format_version: FORMAT_VERSION,
            n_agents: env.n_agents(),
            state_dim: sd,
            action_dim: env.action_dim(),
            env,
            n_transitions: n,
            quality: quality.to_string(),
            seed,
            n_episodes: stats.n_episodes,
            return_mean: stats.mean,
            return_max: stats.max,
        };
        Ok(Self {
            meta,
            states: cols.states,
            actions: cols.actions,
            rewards: cols.rewards,
            next_states: cols.next_states,
            dones: cols.dones,
        })
    }

    pub fn meta(&self) -> &DatasetMeta {
        &self.meta
    }

    pub fn env(&self) -> &Env {
        &self.meta.env
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn states(&self) -> &Array2<f64> {
        &self.states
    }

    pub fn actions(&self) -> &Array2<f64> {
        &self.actions
    }

    pub fn rewards(&self) -> &[f64] {
        &self.rewards
    }

    pub fn next_states(&self) -> &Array2<f64> {
        &self.next_states
    }

    pub fn dones(&self) -> &[u8] {
        &self.dones
    }

    pub fn recomputed_returns(&self) -> ReturnStats {
        return_stats(&self.rewards, &self.dones)
    }

    /// Per-dimension state mean and standard deviation.
    pub fn state_moments(&self) -> (Vec<f64>, Vec<f64>) {
        let mean = self.states.mean_axis(Axis(0)).map(|m| m.to_vec()).unwrap_or_default();
        let std = self.states.std_axis(Axis(0), 0.0).to_vec();
        (mean, std)
    }

    pub fn gather(&self, idx: &[usize]) -> Batch {
        Batch {
            states: self.states.select(Axis(0), idx),
            actions: self.actions.select(Axis(0), idx),
            rewards: idx.iter().map(|&i| self.rewards[i]).collect(),
            next_states: self.next_states.select(Axis(0), idx),
            dones: idx.iter().map(|&i| f64::from(self.dones[i])).collect(),
        }
    }

    pub fn payload_bytes(&self) -> usize {
        let m = &self.meta;
        self.len() * (8 * (2 * m.state_dim + m.joint_action_dim() + 1) + 1)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta)?;
        let mut out = Vec::with_capacity(8 + meta.len() + 1 + self.payload_bytes() + 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&meta);
        out.push(b'\n');
        let start = out.len();
        for col in [&self.states, &self.actions] {
            write_columns(&mut out, col);
        }
        for r in &self.rewards {
            out.extend_from_slice(&r.to_le_bytes());
        }
        write_columns(&mut out, &self.next_states);
        out.extend_from_slice(&self.dones);
        let crc = CRC64.checksum(&out[start..]);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Format("not a dataset file (bad magic)".into()));
        }
        let rest = &bytes[MAGIC.len()..];
        let nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Integrity("dataset truncated in metadata".into()))?;
        let raw: serde_json::Value = serde_json::from_slice(&rest[..nl])
            .map_err(|e| Error::Format(format!("dataset metadata: {e}")))?;
        let found = raw.get("format_version").and_then(|v| v.as_u64());
        if found != Some(u64::from(FORMAT_VERSION)) {
            return Err(Error::Format(format!(
                "dataset format version mismatch: expected {FORMAT_VERSION}, found {}",
                found.map_or("none".to_string(), |v| v.to_string())
            )));
        }
        let meta: DatasetMeta =
            serde_json::from_value(raw).map_err(|e| Error::Format(format!("dataset metadata: {e}")))?;
        let body = &rest[nl + 1..];
        let n = meta.n_transitions;
        let (sd, jd) = (meta.state_dim, meta.joint_action_dim());
        let payload_len = n * (8 * (2 * sd + jd + 1) + 1);
        if body.len() != payload_len + 8 {
            return Err(Error::Integrity(format!(
                "dataset body has {} bytes, expected {}",
                body.len(),
                payload_len + 8
            )));
        }
        let (payload, trailer) = body.split_at(payload_len);
        let stored = u64::from_le_bytes(trailer.try_into().unwrap());
        if CRC64.checksum(payload) != stored {
            return Err(Error::Integrity("dataset checksum mismatch".into()));
        }
        let mut cur = payload;
        let states = read_columns(&mut cur, n, sd);
        let actions = read_columns(&mut cur, n, jd);
        let rewards = read_columns(&mut cur, n, 1).into_raw_vec_and_offset().0;
        let next_states = read_columns(&mut cur, n, sd);
        let dones = cur.to_vec();
        let env = meta.env.clone();
        let ds = Dataset::new(
            env,
            &meta.quality,
            meta.seed,
            Columns {
                states,
                actions,
                rewards,
                next_states,
                dones,
            },
        )
        .map_err(|e| Error::Integrity(format!("dataset contents invalid: {e}")))?;
        if ds.meta != meta {
            return Err(Error::Integrity(
                "stored metadata disagrees with recomputed statistics".into(),
            ));
        }
        Ok(ds)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn write_columns(out: &mut Vec<u8>, m: &Array2<f64>) {
    for col in m.axis_iter(Axis(1)) {
        for v in col {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

fn read_columns(cur: &mut &[u8], rows: usize, cols: usize) -> Array2<f64> {
    let (head, tail) = cur.split_at(8 * rows * cols);
    *cur = tail;
    let vals: Vec<f64> = head
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Array2::from_shape_vec((cols, rows), vals).unwrap().reversed_axes().as_standard_layout().into_owned()
}

/// A minibatch gathered from a dataset; `dones` holds 0.0 or 1.0.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub states: Array2<f64>,
    pub actions: Array2<f64>,
    pub rewards: Vec<f64>,
    pub next_states: Array2<f64>,
    pub dones: Vec<f64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

/// Uniform with-replacement index stream over a dataset.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    n: usize,
    batch_size: usize,
    rng: Rng,
}

impl BatchSampler {
    pub const DEFAULT_BATCH: usize = 512;

    pub fn new(n_transitions: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if n_transitions == 0 {
            return Err(Error::config("cannot sample from an empty dataset"));
        }
        if batch_size == 0 {
            return Err(Error::config("batch size must be >= 1"));
        }
        Ok(Self {
            n: n_transitions,
            batch_size,
            rng: rng_seeded(seed),
        })
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn next_indices(&mut self) -> Vec<usize> {
        (0..self.batch_size).map(|_| self.rng.random_range(0..self.n)).collect()
    }

    pub fn sample(&mut self, ds: &Dataset) -> Batch {
        let idx = self.next_indices();
        ds.gather(&idx)
    }
}
