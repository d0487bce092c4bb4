//! Score-regularized deterministic policy extraction.
//!
//! Every algorithm ascends `Q(s, a) + (1/beta) log mu(a_i | ...)` with respect
//! to each actor's parameters, using a critic for the first term and a
//! pretrained score model for the second. The variants differ only in which
//! critic and score models they pair and in how actors are scheduled within
//! one update step.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::critic::{agent_cols, AdvClamp, Critic};
use crate::data::{BatchSampler, Dataset};
use crate::diffusion::{ScoreModel, T_EVAL};
use crate::envs::{rollout, Env, JointPolicy};
use crate::error::{Error, Result};
use crate::nn::{Adam, AdamConfig, Checkpoint, Mlp, MlpSpec, OutputActivation};
use crate::rng::{derive_seed, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Omsd,
    BrpoJal,
    BrpoInd,
    BrpoIgo,
}

impl Algorithm {
    pub const ALL: [Algorithm; 4] = [Algorithm::Omsd, Algorithm::BrpoJal, Algorithm::BrpoInd, Algorithm::BrpoIgo];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Omsd => "omsd",
            Algorithm::BrpoJal => "brpo_jal",
            Algorithm::BrpoInd => "brpo_ind",
            Algorithm::BrpoIgo => "brpo_igo",
        }
    }

    pub fn scheme(self, updated_prefix: bool) -> Scheme {
        match self {
            Algorithm::Omsd | Algorithm::BrpoJal => Scheme::Sequential { updated_prefix },
            Algorithm::BrpoInd | Algorithm::BrpoIgo => Scheme::Simultaneous,
        }
    }
}

impl std::str::FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::config(format!("unknown algorithm `{s}`")))
    }
}

/// How actors are scheduled inside one update step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Scheme {
    /// Actors update one after another in `order`. With `updated_prefix`, each
    /// actor sees the earlier actors' outputs under their freshly updated
    /// parameters; otherwise every actor sees the actions from the start of
    /// the step.
    Sequential { updated_prefix: bool },
    /// Every actor's gradient is taken at the same joint action, then all
    /// updates are applied.
    Simultaneous,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractionConfig {
    pub algorithm: Algorithm,
    pub beta: f64,
    /// Optional per-agent override of `beta` (one entry per actor block).
    pub beta_per_agent: Option<Vec<f64>>,
    pub hidden: Vec<usize>,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub anneal: bool,
    pub eval_interval: usize,
    pub eval_episodes: usize,
    pub t_eval: f64,
    pub updated_prefix: bool,
    /// Agent update order; defaults to index order.
    pub order: Option<Vec<usize>>,
    /// State at which joint actions are logged; defaults to the first dataset state.
    pub probe_state: Option<Vec<f64>>,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Omsd,
            beta: 0.05,
            beta_per_agent: None,
            hidden: vec![256, 256],
            steps: 100_000,
            batch_size: 512,
            lr: 3e-4,
            anneal: true,
            eval_interval: 5000,
            eval_episodes: 10,
            t_eval: T_EVAL,
            updated_prefix: true,
            order: None,
            probe_state: None,
        }
    }
}

impl ExtractionConfig {
    /// Default temperatures for the navigation tiers.
    pub fn spread_beta(tier: &str) -> f64 {
        match tier {
            "expert" => 0.001,
            "medium" => 0.005,
            _ => 0.05,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let betas = std::iter::once(self.beta).chain(self.beta_per_agent.iter().flatten().copied());
        for b in betas {
            if !(b > 0.0) || !b.is_finite() {
                return Err(Error::config(format!("temperature beta must be > 0, got {b}")));
            }
        }
        if self.batch_size == 0 || self.eval_interval == 0 {
            return Err(Error::config("batch size and eval interval must be >= 1"));
        }
        Ok(())
    }

    fn inv_beta(&self, block: usize) -> f64 {
        1.0 / self.beta_per_agent.as_ref().and_then(|b| b.get(block).copied()).unwrap_or(self.beta)
    }
}

/// Gradient of a critic's value with respect to some action columns.
pub trait QGradient {
    fn q_grad(&self, cols: &[usize], states: ArrayView2<'_, f64>, joint: ArrayView2<'_, f64>) -> Result<Array2<f64>>;
}

/// Behaviour score for the given action columns.
pub trait BehaviorScore {
    fn score(&self, cols: &[usize], states: ArrayView2<'_, f64>, joint: ArrayView2<'_, f64>, t_eval: f64) -> Result<Array2<f64>>;
}

fn positions(cols: &[usize], within: &[usize]) -> Option<Vec<usize>> {
    cols.iter().map(|c| within.iter().position(|x| x == c)).collect()
}

impl QGradient for Critic {
    fn q_grad(&self, cols: &[usize], states: ArrayView2<'_, f64>, joint: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let pos = positions(cols, &self.action_cols)
            .ok_or_else(|| Error::config(format!("critic over {:?} cannot score columns {cols:?}", self.action_cols)))?;
        let (_, g) = self.q_and_action_grad(states, joint)?;
        Ok(g.select(Axis(1), &pos))
    }
}

/// Uses the first critic that covers the requested columns.
impl QGradient for Vec<Critic> {
    fn q_grad(&self, cols: &[usize], states: ArrayView2<'_, f64>, joint: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.iter()
            .find(|c| positions(cols, &c.action_cols).is_some())
            .ok_or_else(|| Error::config(format!("no critic covers action columns {cols:?}")))?
            .q_grad(cols, states, joint)
    }
}

impl BehaviorScore for ScoreModel {
    fn score(&self, cols: &[usize], states: ArrayView2<'_, f64>, joint: ArrayView2<'_, f64>, t_eval: f64) -> Result<Array2<f64>> {
        if cols != self.action_cols.as_slice() {
            return Err(Error::config(format!("score model over {:?} asked for {cols:?}", self.action_cols)));
        }
        let (a, prefix) = self.split_actions(joint);
        self.score_at(states, prefix.view(), a.view(), t_eval)
    }
}

/// Uses the model whose generated columns equal the requested ones.
impl BehaviorScore for Vec<ScoreModel> {
    fn score(&self, cols: &[usize], states: ArrayView2<'_, f64>, joint: ArrayView2<'_, f64>, t_eval: f64) -> Result<Array2<f64>> {
        self.iter()
            .find(|m| m.action_cols == cols)
            .ok_or_else(|| Error::config(format!("no score model generates columns {cols:?}")))?
            .score(cols, states, joint, t_eval)
    }
}

/// Critic stub with zero gradient everywhere.
pub struct ZeroCritic;

impl QGradient for ZeroCritic {
    fn q_grad(&self, cols: &[usize], states: ArrayView2<'_, f64>, _joint: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        Ok(Array2::zeros((states.nrows(), cols.len())))
    }
}

/// Score stub with zero output everywhere.
pub struct ZeroScore;

impl BehaviorScore for ZeroScore {
    fn score(&self, cols: &[usize], states: ArrayView2<'_, f64>, _joint: ArrayView2<'_, f64>, _t: f64) -> Result<Array2<f64>> {
        Ok(Array2::zeros((states.nrows(), cols.len())))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActorBlock {
    pub net: Mlp,
    pub cols: Vec<usize>,
    opt: Adam,
}

/// Deterministic actors, each producing a block of joint-action columns
/// from the state alone. Outputs are mapped from `tanh` into the action box.
#[derive(Clone, Debug, PartialEq)]
pub struct ActorSet {
    pub blocks: Vec<ActorBlock>,
    pub order: Vec<usize>,
    pub action_box: (f64, f64),
    joint_dim: usize,
}

/// Norms logged for one actor update.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct UpdateStats {
    /// Mean over the batch of the per-row L2 norm of the Q-gradient.
    pub q_grad_norm: f64,
    /// Same for the scaled score term `(1/beta) * score`.
    pub score_norm: f64,
}

impl ActorSet {
    pub fn new(
        state_dim: usize,
        blocks: Vec<Vec<usize>>,
        hidden: &[usize],
        action_box: (f64, f64),
        adam: AdamConfig,
        seed: u64,
    ) -> Result<Self> {
        let joint_dim = blocks.iter().map(Vec::len).sum();
        let mut seen = vec![false; joint_dim];
        for &c in blocks.iter().flatten() {
            if c >= joint_dim || seen[c] {
                return Err(Error::config(format!("actor blocks {blocks:?} do not partition the joint action")));
            }
            seen[c] = true;
        }
        let blocks = blocks
            .into_iter()
            .enumerate()
            .map(|(k, cols)| {
                let spec = MlpSpec::new(state_dim, hidden, cols.len()).with_output(OutputActivation::Tanh);
                let net = Mlp::new(spec, derive_seed(seed, &format!("actor{k}")))?;
                let opt = Adam::new(adam, net.params().len());
                Ok(ActorBlock { net, cols, opt })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            order: (0..blocks.len()).collect(),
            blocks,
            action_box,
            joint_dim,
        })
    }

    /// One actor per agent.
    pub fn per_agent(env: &Env, hidden: &[usize], adam: AdamConfig, seed: u64) -> Result<Self> {
        let blocks = (0..env.n_agents()).map(|i| agent_cols(i, env.action_dim())).collect();
        Self::new(env.state_dim(), blocks, hidden, env.action_box(), adam, seed)
    }

    /// A single actor over the whole joint action.
    pub fn joint(env: &Env, hidden: &[usize], adam: AdamConfig, seed: u64) -> Result<Self> {
        Self::new(env.state_dim(), vec![(0..env.joint_action_dim()).collect()], hidden, env.action_box(), adam, seed)
    }

    pub fn with_order(mut self, order: Vec<usize>) -> Result<Self> {
        let mut sorted = order.clone();
        sorted.sort_unstable();
        if sorted != (0..self.blocks.len()).collect::<Vec<_>>() {
            return Err(Error::config(format!("order {order:?} is not a permutation of the actors")));
        }
        self.order = order;
        Ok(self)
    }

    pub fn joint_dim(&self) -> usize {
        self.joint_dim
    }

    pub fn state_dim(&self) -> usize {
        self.blocks[0].net.input_dim()
    }

    fn to_box(&self, y: f64) -> f64 {
        let (lo, hi) = self.action_box;
        lo + (hi - lo) * (y + 1.0) * 0.5
    }

    pub fn block_actions(&self, k: usize, states: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        Ok(self.blocks[k].net.forward_batch(states)?.mapv(|y| self.to_box(y)))
    }

    /// Joint actions for a batch of states.
    pub fn act_batch(&self, states: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let mut joint = Array2::zeros((states.nrows(), self.joint_dim));
        for k in 0..self.blocks.len() {
            self.write_block(k, states, &mut joint)?;
        }
        Ok(joint)
    }

    fn write_block(&self, k: usize, states: ArrayView2<'_, f64>, joint: &mut Array2<f64>) -> Result<()> {
        let a = self.block_actions(k, states)?;
        for (j, &c) in self.blocks[k].cols.iter().enumerate() {
            joint.column_mut(c).assign(&a.column(j));
        }
        Ok(())
    }

    pub fn act_one(&self, state: &[f64]) -> Result<Vec<f64>> {
        let s = ArrayView2::from_shape((1, state.len()), state).map_err(|e| Error::shape(e.to_string()))?;
        Ok(self.act_batch(s)?.into_raw_vec_and_offset().0)
    }

    /// Gradient of the regularized objective for block `k` at `joint`, and
    /// optionally the optimizer step.
    #[allow(clippy::too_many_arguments)]
    fn block_update(
        &mut self,
        k: usize,
        states: ArrayView2<'_, f64>,
        joint: &Array2<f64>,
        q: &dyn QGradient,
        score: &dyn BehaviorScore,
        inv_beta: f64,
        t_eval: f64,
    ) -> Result<(UpdateStats, Vec<f64>)> {
        let n = states.nrows() as f64;
        let cols = self.blocks[k].cols.clone();
        let cache = self.blocks[k].net.forward_cached(states)?;
        let mut joint = joint.clone();
        for (j, &c) in cols.iter().enumerate() {
            let col = cache.output().column(j).mapv(|y| self.to_box(y));
            joint.column_mut(c).assign(&col);
        }
        let gq = q.q_grad(&cols, states, joint.view())?;
        let sc = score.score(&cols, states, joint.view(), t_eval)? * inv_beta;
        let stats = UpdateStats {
            q_grad_norm: mean_row_norm(&gq),
            score_norm: mean_row_norm(&sc),
        };
        let (lo, hi) = self.action_box;
        // Ascent on the objective is descent on its negation.
        let up = (gq + sc) * (-(hi - lo) * 0.5 / n);
        let (grads, _) = self.blocks[k].net.backward(&cache, up.view())?;
        Ok((stats, grads))
    }

    fn apply(&mut self, k: usize, grads: &[f64]) -> Result<()> {
        let block = &mut self.blocks[k];
        block.opt.step(block.net.params_mut(), grads)
    }

    /// One update of every actor on `states`. Returns stats indexed by block.
    pub fn update(
        &mut self,
        states: ArrayView2<'_, f64>,
        q: &dyn QGradient,
        score: &dyn BehaviorScore,
        config: &ExtractionConfig,
        scheme: Scheme,
        apply: bool,
    ) -> Result<Vec<UpdateStats>> {
        let mut stats = vec![UpdateStats::default(); self.blocks.len()];
        let mut joint = self.act_batch(states)?;
        let order = self.order.clone();
        match scheme {
            Scheme::Sequential { updated_prefix } => {
                for &k in &order {
                    let (s, g) = self.block_update(k, states, &joint, q, score, config.inv_beta(k), config.t_eval)?;
                    stats[k] = s;
                    if apply {
                        self.apply(k, &g)?;
                        if updated_prefix {
                            self.write_block(k, states, &mut joint)?;
                        }
                    }
                }
            }
            Scheme::Simultaneous => {
                let mut all = Vec::with_capacity(order.len());
                for &k in &order {
                    let (s, g) = self.block_update(k, states, &joint, q, score, config.inv_beta(k), config.t_eval)?;
                    stats[k] = s;
                    all.push((k, g));
                }
                if apply {
                    for (k, g) in all {
                        self.apply(k, &g)?;
                    }
                }
            }
        }
        Ok(stats)
    }

    pub fn checkpoints(&self, seed: u64) -> Vec<Checkpoint> {
        self.blocks
            .iter()
            .enumerate()
            .map(|(k, b)| {
                let mut ck = b.net.to_checkpoint("actor", seed);
                if let Some(obj) = ck.meta.as_object_mut() {
                    obj.insert("block".into(), json!(k));
                    obj.insert("cols".into(), json!(b.cols));
                    obj.insert("action_box".into(), json!([self.action_box.0, self.action_box.1]));
                }
                ck
            })
            .collect()
    }

    /// Writes `{prefix}_actor{k}.ckpt` per block.
    pub fn save(&self, dir: &Path, prefix: &str, seed: u64) -> Result<Vec<std::path::PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut out = Vec::new();
        for (k, ck) in self.checkpoints(seed).into_iter().enumerate() {
            let p = dir.join(format!("{prefix}_actor{k}.ckpt"));
            ck.save(&p)?;
            out.push(p);
        }
        Ok(out)
    }

    pub fn load(dir: &Path, prefix: &str, n_blocks: usize) -> Result<Self> {
        let mut blocks = Vec::new();
        let mut action_box = (-1.0, 1.0);
        for k in 0..n_blocks {
            let ck = Checkpoint::load(&dir.join(format!("{prefix}_actor{k}.ckpt")))?;
            let cols: Vec<usize> = ck
                .meta
                .get("cols")
                .cloned()
                .and_then(|v| serde_json::from_value(v).ok())
                .ok_or_else(|| Error::Format("actor checkpoint lacks cols".into()))?;
            let bx: [f64; 2] = ck
                .meta
                .get("action_box")
                .cloned()
                .and_then(|v| serde_json::from_value(v).ok())
                .ok_or_else(|| Error::Format("actor checkpoint lacks action_box".into()))?;
            action_box = (bx[0], bx[1]);
            let net = Mlp::from_checkpoint(&ck)?;
            let opt = Adam::new(AdamConfig::default(), net.params().len());
            blocks.push(ActorBlock { net, cols, opt });
        }
        let joint_dim = blocks.iter().map(|b| b.cols.len()).sum();
        Ok(Self {
            order: (0..blocks.len()).collect(),
            blocks,
            action_box,
            joint_dim,
        })
    }
}

fn mean_row_norm(m: &Array2<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    m.rows().into_iter().map(|r| r.dot(&r).sqrt()).sum::<f64>() / m.nrows() as f64
}

impl JointPolicy for ActorSet {
    fn act(&mut self, state: &[f64], _t: usize, _rng: &mut Rng) -> Result<Vec<f64>> {
        self.act_one(state)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRecord {
    pub step: usize,
    pub agent: usize,
    pub q_grad_norm: f64,
    pub score_norm: f64,
    pub eval_mean: f64,
    pub eval_std: f64,
    /// Joint action at the probe state.
    pub actions: Vec<f64>,
}

/// Append-only training log, one record per actor per logging step.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
}

impl TrainLog {
    pub fn push(&mut self, r: LogRecord) -> Result<()> {
        if let Some(last) = self.records.last() {
            if r.step < last.step {
                return Err(Error::config("train log records must be ordered by step"));
            }
        }
        self.records.push(r);
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let d = self.records.first().map_or(0, |r| r.actions.len());
        let mut out = String::from("step,agent,q_grad_norm,score_norm,eval_mean,eval_std");
        for k in 0..d {
            let _ = write!(out, ",action_{k}");
        }
        out.push('\n');
        for r in &self.records {
            let _ = write!(
                out,
                "{},{},{},{},{},{}",
                r.step, r.agent, r.q_grad_norm, r.score_norm, r.eval_mean, r.eval_std
            );
            for a in &r.actions {
                let _ = write!(out, ",{a}");
            }
            out.push('\n');
        }
        out
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut log = TrainLog::default();
        for (i, line) in text.lines().enumerate().skip(1) {
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() < 6 {
                return Err(Error::Format(format!("train log line {} has {} fields", i + 1, f.len())));
            }
            let num = |s: &str| -> Result<f64> { s.parse().map_err(|_| Error::Format(format!("bad number `{s}` on line {}", i + 1))) };
            let int = |s: &str| -> Result<usize> { s.parse().map_err(|_| Error::Format(format!("bad integer `{s}` on line {}", i + 1))) };
            log.push(LogRecord {
                step: int(f[0])?,
                agent: int(f[1])?,
                q_grad_norm: num(f[2])?,
                score_norm: num(f[3])?,
                eval_mean: num(f[4])?,
                eval_std: num(f[5])?,
                actions: f[6..].iter().map(|s| num(s)).collect::<Result<_>>()?,
            })?;
        }
        Ok(log)
    }

    /// Probe joint actions in step order, one per logging step.
    pub fn action_trajectory(&self) -> Vec<(usize, Vec<f64>)> {
        let mut out: Vec<(usize, Vec<f64>)> = Vec::new();
        for r in &self.records {
            if out.last().map(|(s, _)| *s) != Some(r.step) {
                out.push((r.step, r.actions.clone()));
            }
        }
        out
    }

    pub fn final_eval(&self) -> Option<(f64, f64)> {
        self.records.last().map(|r| (r.eval_mean, r.eval_std))
    }
}

/// Mean and population std of episode returns over `episodes` rollouts.
pub fn evaluate_policy(policy: &mut dyn JointPolicy, env: &Env, episodes: usize, seed: u64) -> Result<(f64, f64)> {
    if episodes == 0 {
        return Err(Error::config("need >= 1 evaluation episode"));
    }
    let returns: Vec<f64> = (0..episodes)
        .map(|k| rollout(policy, env, derive_seed(seed, &format!("eval{k}"))).map(|t| t.episode_return()))
        .collect::<Result<_>>()?;
    let n = returns.len() as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let var = returns.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}

/// Pretrained models available to extraction; only the ones an algorithm needs
/// must be present.
#[derive(Clone, Debug, Default)]
pub struct Pretrained {
    pub joint_critic: Option<Critic>,
    pub independent_critics: Option<Vec<Critic>>,
    pub sequential_models: Option<Vec<ScoreModel>>,
    pub independent_models: Option<Vec<ScoreModel>>,
    pub joint_model: Option<ScoreModel>,
}

fn need<'a, T>(x: &'a Option<T>, name: &str, alg: Algorithm) -> Result<&'a T> {
    x.as_ref()
        .ok_or_else(|| Error::config(format!("{} needs the pretrained artifact `{name}`", alg.name())))
}

impl Pretrained {
    /// The critic and score sources `alg` pairs.
    pub fn sources(&self, alg: Algorithm) -> Result<(&dyn QGradient, &dyn BehaviorScore)> {
        Ok(match alg {
            Algorithm::Omsd => (
                need(&self.joint_critic, "joint_critic", alg)? as &dyn QGradient,
                need(&self.sequential_models, "sequential_models", alg)? as &dyn BehaviorScore,
            ),
            Algorithm::BrpoJal => (
                need(&self.joint_critic, "joint_critic", alg)?,
                need(&self.joint_model, "joint_model", alg)? as &dyn BehaviorScore,
            ),
            Algorithm::BrpoInd => (
                need(&self.independent_critics, "independent_critics", alg)? as &dyn QGradient,
                need(&self.independent_models, "independent_models", alg)?,
            ),
            Algorithm::BrpoIgo => (
                need(&self.joint_critic, "joint_critic", alg)?,
                need(&self.independent_models, "independent_models", alg)?,
            ),
        })
    }
}

/// Builds the actor layout `alg` trains.
pub fn initial_actors(env: &Env, config: &ExtractionConfig, seed: u64) -> Result<ActorSet> {
    let adam = if config.anneal {
        AdamConfig::cosine(config.lr, config.steps as u64)
    } else {
        AdamConfig::with_lr(config.lr)
    };
    let seed = derive_seed(seed, "actors");
    let actors = match config.algorithm {
        Algorithm::BrpoJal => ActorSet::joint(env, &config.hidden, adam, seed)?,
        _ => ActorSet::per_agent(env, &config.hidden, adam, seed)?,
    };
    match (&config.order, config.algorithm) {
        (Some(order), alg) if alg != Algorithm::BrpoJal => actors.with_order(order.clone()),
        _ => Ok(actors),
    }
}

/// Runs extraction from `pretrained` artifacts.
pub fn extract(dataset: &Dataset, pretrained: &Pretrained, config: &ExtractionConfig, seed: u64) -> Result<(ActorSet, TrainLog)> {
    let (q, score) = pretrained.sources(config.algorithm)?;
    let actors = initial_actors(dataset.env(), config, seed)?;
    extract_with(dataset, actors, q, score, config, seed)
}

/// Extraction with explicit critic and score sources (stubs allowed).
pub fn extract_with(
    dataset: &Dataset,
    mut actors: ActorSet,
    q: &dyn QGradient,
    score: &dyn BehaviorScore,
    config: &ExtractionConfig,
    seed: u64,
) -> Result<(ActorSet, TrainLog)> {
    config.validate()?;
    let env = dataset.env().clone();
    if actors.joint_dim() != env.joint_action_dim() || actors.state_dim() != env.state_dim() {
        return Err(Error::config("actor dimensions do not match the dataset's environment"));
    }
    let scheme = config.algorithm.scheme(config.updated_prefix);
    let probe = config
        .probe_state
        .clone()
        .unwrap_or_else(|| dataset.states().row(0).to_vec());
    let mut sampler = BatchSampler::new(dataset.len(), config.batch_size, derive_seed(seed, "extract/batches"))?;
    let mut log = TrainLog::default();
    let eval_seed = derive_seed(seed, "extract/eval");
    let record = |actors: &mut ActorSet, step: usize, stats: &[UpdateStats], log: &mut TrainLog| -> Result<()> {
        let (mean, std) = evaluate_policy(actors, &env, config.eval_episodes, derive_seed(eval_seed, &step.to_string()))?;
        let actions = actors.act_one(&probe)?;
        for (agent, s) in stats.iter().enumerate() {
            log.push(LogRecord {
                step,
                agent,
                q_grad_norm: s.q_grad_norm,
                score_norm: s.score_norm,
                eval_mean: mean,
                eval_std: std,
                actions: actions.clone(),
            })?;
        }
        Ok(())
    };
    let first = sampler.sample(dataset);
    let stats0 = actors.update(first.states.view(), q, score, config, scheme, false)?;
    record(&mut actors, 0, &stats0, &mut log)?;
    for step in 1..=config.steps {
        let batch = if step == 1 { first.clone() } else { sampler.sample(dataset) };
        let stats = actors.update(batch.states.view(), q, score, config, scheme, true).map_err(|e| match e {
            Error::Divergence { what, .. } => Error::Divergence { step: step as u64, what },
            e => e,
        })?;
        if step % config.eval_interval == 0 || step == config.steps {
            record(&mut actors, step, &stats, &mut log)?;
        }
    }
    Ok((actors, log))
}

/// One advantage-weighted regression step of every actor toward dataset
/// actions. Returns the pre-step weighted loss.
pub fn awr_actor_step(
    critic: &Critic,
    actors: &mut ActorSet,
    batch: &crate::data::Batch,
    temperature: f64,
    clamp: AdvClamp,
) -> Result<f64> {
    let w = critic.awr_weights(batch, temperature, clamp)?;
    let n = batch.len() as f64;
    let (lo, hi) = actors.action_box;
    let mut loss = 0.0;
    for k in 0..actors.blocks.len() {
        let cache = actors.blocks[k].net.forward_cached(batch.states.view())?;
        let cols = actors.blocks[k].cols.clone();
        let target = batch.actions.select(Axis(1), &cols);
        let pred = cache.output().mapv(|y| lo + (hi - lo) * (y + 1.0) * 0.5);
        let diff = pred - target;
        let mut up = diff.clone();
        for (r, mut row) in up.rows_mut().into_iter().enumerate() {
            loss += w[r] * diff.row(r).dot(&diff.row(r)) / n;
            row *= 2.0 * w[r] / n * (hi - lo) * 0.5;
        }
        let (g, _) = actors.blocks[k].net.backward(&cache, up.view())?;
        actors.apply(k, &g)?;
    }
    if !loss.is_finite() {
        return Err(Error::Divergence {
            step: 0,
            what: format!("weighted regression loss is {loss}"),
        });
    }
    Ok(loss)
}

/// Trains per-agent actors by advantage-weighted regression for `steps` steps.
pub fn train_awr(
    dataset: &Dataset,
    critic: &Critic,
    config: &ExtractionConfig,
    temperature: f64,
    clamp: AdvClamp,
    seed: u64,
) -> Result<ActorSet> {
    let adam = if config.anneal {
        AdamConfig::cosine(config.lr, config.steps as u64)
    } else {
        AdamConfig::with_lr(config.lr)
    };
    let mut actors = ActorSet::per_agent(dataset.env(), &config.hidden, adam, derive_seed(seed, "awr/actors"))?;
    let mut sampler = BatchSampler::new(dataset.len(), config.batch_size, derive_seed(seed, "awr/batches"))?;
    for step in 0..config.steps {
        let batch = sampler.sample(dataset);
        awr_actor_step(critic, &mut actors, &batch, temperature, clamp).map_err(|e| match e {
            Error::Divergence { what, .. } => Error::Divergence { step: step as u64, what },
            e => e,
        })?;
    }
    Ok(actors)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_bandit_dataset, MixtureSpec};

    fn small(alg: Algorithm) -> ExtractionConfig {
        ExtractionConfig {
            algorithm: alg,
            hidden: vec![8],
            steps: 20,
            batch_size: 16,
            eval_interval: 10,
            eval_episodes: 2,
            ..ExtractionConfig::default()
        }
    }

    /// Q(a) = -||a - c||^2 for a fixed target `c` over the whole joint action.
    struct Quadratic(Vec<f64>);

    impl QGradient for Quadratic {
        fn q_grad(&self, cols: &[usize], _s: ArrayView2<'_, f64>, joint: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
            Ok(Array2::from_shape_fn((joint.nrows(), cols.len()), |(r, j)| -2.0 * (joint[[r, cols[j]]] - self.0[cols[j]])))
        }
    }

    #[test]
    fn actions_stay_in_box() {
        let env = Env::mode_bandit(3);
        let a = ActorSet::per_agent(&env, &[4], AdamConfig::default(), 0).unwrap();
        let s = Array2::from_shape_fn((50, 1), |(r, _)| r as f64 - 25.0);
        assert!(a.act_batch(s.view()).unwrap().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn zero_steps_returns_initial_actors() {
        let ds = gen_bandit_dataset(&MixtureSpec::bandit(), 100, 0).unwrap();
        let mut cfg = small(Algorithm::Omsd);
        cfg.steps = 0;
        let init = initial_actors(ds.env(), &cfg, 1).unwrap();
        let (out, log) = extract_with(&ds, init.clone(), &ZeroCritic, &ZeroScore, &cfg, 1).unwrap();
        assert_eq!(out, init);
        let mut fresh = init.clone();
        let expect = evaluate_policy(&mut fresh, ds.env(), 2, derive_seed(derive_seed(1, "extract/eval"), "0")).unwrap();
        assert_eq!(log.final_eval().unwrap(), expect);
    }

    #[test]
    fn missing_artifact_is_named() {
        let ds = gen_bandit_dataset(&MixtureSpec::bandit(), 10, 0).unwrap();
        let err = extract(&ds, &Pretrained::default(), &small(Algorithm::BrpoIgo), 0).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("joint_critic"));
    }

    #[test]
    fn quadratic_critic_drives_actors_to_target() {
        let ds = gen_bandit_dataset(&MixtureSpec::bandit(), 100, 0).unwrap();
        let mut cfg = small(Algorithm::BrpoIgo);
        cfg.steps = 600;
        cfg.lr = 1e-2;
        cfg.anneal = false;
        let init = initial_actors(ds.env(), &cfg, 2).unwrap();
        let (a, _) = extract_with(&ds, init, &Quadratic(vec![0.3, -0.6]), &ZeroScore, &cfg, 2).unwrap();
        let out = a.act_one(&[0.0]).unwrap();
        assert!((out[0] - 0.3).abs() < 0.02 && (out[1] + 0.6).abs() < 0.02, "{out:?}");
    }

    #[test]
    fn same_seed_same_log() {
        let ds = gen_bandit_dataset(&MixtureSpec::bandit(), 100, 0).unwrap();
        let cfg = small(Algorithm::Omsd);
        let run = || {
            let init = initial_actors(ds.env(), &cfg, 3).unwrap();
            extract_with(&ds, init, &Quadratic(vec![0.5, 0.5]), &ZeroScore, &cfg, 3).unwrap().1.to_csv()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn csv_round_trip() {
        let mut log = TrainLog::default();
        log.push(LogRecord {
            step: 0,
            agent: 1,
            q_grad_norm: 0.1,
            score_norm: 1e-17,
            eval_mean: -0.5,
            eval_std: 0.0,
            actions: vec![0.25, -1.0],
        })
        .unwrap();
        let text = log.to_csv();
        assert!(text.starts_with("step,agent,q_grad_norm,score_norm,eval_mean,eval_std,action_0,action_1\n"));
        assert_eq!(TrainLog::from_csv(&text).unwrap(), log);
    }

    #[test]
    fn bad_beta_rejected() {
        let mut cfg = small(Algorithm::Omsd);
        cfg.beta = 0.0;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
