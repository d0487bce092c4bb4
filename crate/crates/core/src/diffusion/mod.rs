//! Conditional noise-prediction models of the behaviour policy.
//!
//! A [`ScoreModel`] predicts the noise added to the action columns it models,
//! conditioned on the state and on a (possibly empty) prefix of other agents'
//! dataset actions. Its score is read off at low noise as `-eps_hat / sigma_t`.

mod schedule;

pub use schedule::{perturb, VpSchedule};

use std::path::Path;

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::critic::agent_cols;
use crate::data::{BatchSampler, Dataset};
use crate::error::{Error, Result};
use crate::nn::{
    Adam, AdamConfig, Checkpoint, FourierFeatures, ForwardCache, Mlp, MlpSpec, OutputActivation, TimeEmbedding,
    TimeEmbeddingCache,
};
use crate::rng::{derive_seed, rng_from, Rng};

/// Default low-noise evaluation time for scores.
pub const T_EVAL: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Conditioning {
    /// One agent's marginal given the state.
    Independent { agent: usize },
    /// The whole joint action given the state.
    Joint,
    /// One agent's conditional given the state and earlier agents' actions.
    Sequential { agent: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiffusionConfig {
    pub hidden: Vec<usize>,
    pub cond_dim: usize,
    pub time_projection_dim: usize,
    pub time_embedding_dim: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Cosine-anneal the learning rate to zero over `steps`.
    pub anneal: bool,
    pub t_min: f64,
    pub t_max: f64,
    pub schedule: VpSchedule,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            hidden: vec![512, 512],
            cond_dim: 32,
            time_projection_dim: 32,
            time_embedding_dim: 64,
            steps: 100_000,
            batch_size: 512,
            lr: 3e-4,
            anneal: true,
            t_min: 0.02,
            t_max: 0.98,
            schedule: VpSchedule::default(),
        }
    }
}

impl DiffusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.t_min && self.t_min < self.t_max && self.t_max <= 1.0) {
            return Err(Error::config(format!(
                "diffusion time range [{}, {}] must satisfy 0 < t_min < t_max <= 1",
                self.t_min, self.t_max
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::config("diffusion batch size must be >= 1"));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        if self.anneal {
            AdamConfig::cosine(self.lr, self.steps as u64)
        } else {
            AdamConfig::with_lr(self.lr)
        }
    }
}

/// Anything that predicts the injected noise from `(state, prefix, x_t, t)`.
pub trait EpsPredictor {
    fn predict(
        &self,
        states: ArrayView2<'_, f64>,
        prefix: ArrayView2<'_, f64>,
        x_t: ArrayView2<'_, f64>,
        t: &[f64],
    ) -> Result<Array2<f64>>;
}

/// Sum by recursive halving; keeps rounding error logarithmic in `n`.
pub fn pairwise_sum(v: &[f64]) -> f64 {
    if v.len() <= 8 {
        v.iter().sum()
    } else {
        let (a, b) = v.split_at(v.len() / 2);
        pairwise_sum(a) + pairwise_sum(b)
    }
}

fn check_rows(states: ArrayView2<'_, f64>, prefix: ArrayView2<'_, f64>, x: ArrayView2<'_, f64>, t: &[f64]) -> Result<()> {
    let n = x.nrows();
    if states.nrows() != n || prefix.nrows() != n || t.len() != n {
        return Err(Error::shape(format!(
            "row counts differ: states {}, prefix {}, actions {}, times {}",
            states.nrows(),
            prefix.nrows(),
            n,
            t.len()
        )));
    }
    Ok(())
}

/// Mean over rows of `||eps_hat - eps||^2` for explicit times and noise.
pub fn denoise_loss_with(
    model: &dyn EpsPredictor,
    schedule: &VpSchedule,
    states: ArrayView2<'_, f64>,
    prefix: ArrayView2<'_, f64>,
    actions: ArrayView2<'_, f64>,
    t: &[f64],
    eps: ArrayView2<'_, f64>,
) -> Result<f64> {
    check_rows(states, prefix, actions, t)?;
    if eps.dim() != actions.dim() {
        return Err(Error::shape("noise and actions differ in shape"));
    }
    let x_t = noised(schedule, actions, t, eps)?;
    let pred = model.predict(states, prefix, x_t.view(), t)?;
    let per_row: Vec<f64> = pred
        .rows()
        .into_iter()
        .zip(eps.rows())
        .map(|(p, e)| p.iter().zip(e).map(|(a, b)| (a - b) * (a - b)).sum())
        .collect();
    Ok(pairwise_sum(&per_row) / per_row.len() as f64)
}

/// Denoising loss with `t ~ U(t_min, t_max)` and standard normal noise from `rng`.
pub fn denoise_loss(
    model: &dyn EpsPredictor,
    schedule: &VpSchedule,
    states: ArrayView2<'_, f64>,
    prefix: ArrayView2<'_, f64>,
    actions: ArrayView2<'_, f64>,
    t_range: (f64, f64),
    rng: &mut Rng,
) -> Result<f64> {
    let (t, eps) = draw_noise(actions.nrows(), actions.ncols(), t_range, rng);
    denoise_loss_with(model, schedule, states, prefix, actions, &t, eps.view())
}

fn draw_noise(n: usize, d: usize, (t_min, t_max): (f64, f64), rng: &mut Rng) -> (Vec<f64>, Array2<f64>) {
    let t: Vec<f64> = (0..n).map(|_| t_min + (t_max - t_min) * rng.random::<f64>()).collect();
    let eps = Array2::from_shape_simple_fn((n, d), || StandardNormal.sample(rng));
    (t, eps)
}

fn noised(schedule: &VpSchedule, a: ArrayView2<'_, f64>, t: &[f64], eps: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let mut x = a.to_owned();
    for (r, mut row) in x.rows_mut().into_iter().enumerate() {
        let (alpha, sigma) = schedule.alpha_sigma(t[r])?;
        row.zip_mut_with(&eps.row(r), |v, &e| *v = alpha * *v + sigma * e);
    }
    Ok(x)
}

/// Noise predictor: a conditioning embedding of `state ++ prefix`, a time
/// embedding, and a two-layer trunk over `[cond, x_t, time]`, plus a
/// zero-initialized linear skip from `x_t` to the output.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreNet {
    pub cond: Mlp,
    pub time: TimeEmbedding,
    pub trunk: Mlp,
    pub skip: Mlp,
}

struct ScoreNetCache {
    cond: ForwardCache,
    time: TimeEmbeddingCache,
    trunk: ForwardCache,
    skip: ForwardCache,
    output: Array2<f64>,
}

impl ScoreNet {
    pub fn new(cond_in: usize, action_dim: usize, config: &DiffusionConfig, seed: u64) -> Result<Self> {
        let cond_spec = MlpSpec::new(cond_in.max(1), &[], config.cond_dim).with_output(OutputActivation::Relu);
        let cond = Mlp::new(cond_spec, derive_seed(seed, "cond"))?;
        let time = TimeEmbedding::new(config.time_projection_dim, config.time_embedding_dim, derive_seed(seed, "time"))?;
        let trunk_in = config.cond_dim + action_dim + config.time_embedding_dim;
        let trunk = Mlp::new(MlpSpec::new(trunk_in, &config.hidden, action_dim), derive_seed(seed, "trunk"))?;
        let skip = Mlp::zeros(MlpSpec::new(action_dim, &[], action_dim))?;
        Ok(Self { cond, time, trunk, skip })
    }

    fn cond_input(&self, states: ArrayView2<'_, f64>, prefix: ArrayView2<'_, f64>) -> Array2<f64> {
        if states.ncols() + prefix.ncols() == 0 {
            Array2::zeros((states.nrows(), 1))
        } else {
            concatenate(Axis(1), &[states, prefix]).unwrap()
        }
    }

    fn forward_cached(
        &self,
        states: ArrayView2<'_, f64>,
        prefix: ArrayView2<'_, f64>,
        x_t: ArrayView2<'_, f64>,
        t: &[f64],
    ) -> Result<ScoreNetCache> {
        check_rows(states, prefix, x_t, t)?;
        let cond = self.cond.forward_cached(self.cond_input(states, prefix).view())?;
        let time = self.time.forward_cached(t)?;
        let h = concatenate(Axis(1), &[cond.output().view(), x_t, time.output().view()])
            .map_err(|e| Error::shape(e.to_string()))?;
        let trunk = self.trunk.forward_cached(h.view())?;
        let skip = self.skip.forward_cached(x_t)?;
        let output = trunk.output() + skip.output();
        Ok(ScoreNetCache {
            cond,
            time,
            trunk,
            skip,
            output,
        })
    }

    /// Parameter gradients `[cond, time, trunk, skip]` of `sum(output * upstream)`.
    fn backward(&self, cache: &ScoreNetCache, upstream: ArrayView2<'_, f64>) -> Result<[Vec<f64>; 4]> {
        let (g_trunk, dh) = self.trunk.backward(&cache.trunk, upstream)?;
        let (g_skip, _) = self.skip.backward(&cache.skip, upstream)?;
        let c = self.cond.output_dim();
        let d = self.skip.output_dim();
        let (g_cond, _) = self.cond.backward(&cache.cond, dh.slice(s![.., ..c]))?;
        let g_time = self.time.backward(&cache.time, dh.slice(s![.., c + d..]))?;
        Ok([g_cond, g_time, g_trunk, g_skip])
    }

    fn param_groups_mut(&mut self) -> [&mut [f64]; 4] {
        [
            self.cond.params_mut(),
            self.time.dense.params_mut(),
            self.trunk.params_mut(),
            self.skip.params_mut(),
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreModel {
    pub conditioning: Conditioning,
    pub state_dim: usize,
    /// Joint-action columns this model generates.
    pub action_cols: Vec<usize>,
    /// Joint-action columns it conditions on.
    pub prefix_cols: Vec<usize>,
    pub action_box: (f64, f64),
    pub schedule: VpSchedule,
    pub t_range: (f64, f64),
    pub net: ScoreNet,
    opts: Vec<Adam>,
    steps: u64,
}

impl EpsPredictor for ScoreModel {
    fn predict(
        &self,
        states: ArrayView2<'_, f64>,
        prefix: ArrayView2<'_, f64>,
        x_t: ArrayView2<'_, f64>,
        t: &[f64],
    ) -> Result<Array2<f64>> {
        self.check_inputs(states, prefix, x_t)?;
        Ok(self.net.forward_cached(states, prefix, x_t, t)?.output)
    }
}

impl ScoreModel {
    pub fn new(
        conditioning: Conditioning,
        state_dim: usize,
        action_cols: Vec<usize>,
        prefix_cols: Vec<usize>,
        action_box: (f64, f64),
        config: &DiffusionConfig,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if action_cols.is_empty() {
            return Err(Error::config("score model must generate at least one action column"));
        }
        let net = ScoreNet::new(state_dim + prefix_cols.len(), action_cols.len(), config, seed)?;
        let adam = config.adam();
        let opts = vec![
            Adam::new(adam, net.cond.params().len()),
            Adam::new(adam, net.time.dense.params().len()),
            Adam::new(adam, net.trunk.params().len()),
            Adam::new(adam, net.skip.params().len()),
        ];
        Ok(Self {
            conditioning,
            state_dim,
            action_cols,
            prefix_cols,
            action_box,
            schedule: config.schedule,
            t_range: (config.t_min, config.t_max),
            net,
            opts,
            steps: 0,
        })
    }

    pub fn action_dim(&self) -> usize {
        self.action_cols.len()
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    fn check_inputs(&self, states: ArrayView2<'_, f64>, prefix: ArrayView2<'_, f64>, x: ArrayView2<'_, f64>) -> Result<()> {
        if states.ncols() != self.state_dim || prefix.ncols() != self.prefix_cols.len() || x.ncols() != self.action_dim() {
            return Err(Error::shape(format!(
                "score model expects (state {}, prefix {}, action {}) columns, got ({}, {}, {})",
                self.state_dim,
                self.prefix_cols.len(),
                self.action_dim(),
                states.ncols(),
                prefix.ncols(),
                x.ncols()
            )));
        }
        Ok(())
    }

    /// Splits full joint actions into this model's `(targets, prefix)` columns.
    pub fn split_actions(&self, joint: ArrayView2<'_, f64>) -> (Array2<f64>, Array2<f64>) {
        (joint.select(Axis(1), &self.action_cols), joint.select(Axis(1), &self.prefix_cols))
    }

    /// One optimizer step on a batch of dataset rows. Returns the pre-step loss.
    pub fn train_step(&mut self, states: ArrayView2<'_, f64>, joint_actions: ArrayView2<'_, f64>, rng: &mut Rng) -> Result<f64> {
        let (a0, prefix) = self.split_actions(joint_actions);
        self.check_inputs(states, prefix.view(), a0.view())?;
        let (t, eps) = draw_noise(a0.nrows(), a0.ncols(), self.t_range, rng);
        let x_t = noised(&self.schedule, a0.view(), &t, eps.view())?;
        let cache = self.net.forward_cached(states, prefix.view(), x_t.view(), &t)?;
        let n = a0.nrows() as f64;
        let diff = &cache.output - &eps;
        let per_row: Vec<f64> = diff.rows().into_iter().map(|r| r.dot(&r)).collect();
        let loss = pairwise_sum(&per_row) / n;
        if !loss.is_finite() {
            return Err(Error::Divergence {
                step: self.steps,
                what: format!("denoising loss is {loss}"),
            });
        }
        let up = diff * (2.0 / n);
        let grads = self.net.backward(&cache, up.view())?;
        for ((params, g), opt) in self.net.param_groups_mut().into_iter().zip(&grads).zip(&mut self.opts) {
            opt.step(params, g)?;
        }
        self.steps += 1;
        Ok(loss)
    }

    /// `-eps_hat(alpha_t * a, state, prefix, t) / sigma_t`, one row per sample.
    pub fn score_at(
        &self,
        states: ArrayView2<'_, f64>,
        prefix: ArrayView2<'_, f64>,
        actions: ArrayView2<'_, f64>,
        t_eval: f64,
    ) -> Result<Array2<f64>> {
        if t_eval < self.t_range.0 - 1e-12 || t_eval > self.t_range.1 + 1e-12 {
            return Err(Error::domain(format!(
                "score time {t_eval} outside the trained range [{}, {}]",
                self.t_range.0, self.t_range.1
            )));
        }
        let (alpha, sigma) = self.schedule.alpha_sigma(t_eval)?;
        if sigma == 0.0 {
            return Err(Error::domain("score undefined at zero noise"));
        }
        let x = actions.mapv(|v| alpha * v);
        let t = vec![t_eval; actions.nrows()];
        let eps = self.predict(states, prefix, x.view(), &t)?;
        Ok(eps.mapv(|e| -e / sigma))
    }

    /// Reverse-time sampling on a uniform grid of `n_steps` times from
    /// `t_max` down to `t_min`, with the clean-action estimate clipped to the
    /// action box at every step.
    pub fn ancestral_sample(
        &self,
        states: ArrayView2<'_, f64>,
        prefix: ArrayView2<'_, f64>,
        n_steps: usize,
        rng: &mut Rng,
    ) -> Result<Array2<f64>> {
        if n_steps < 2 {
            return Err(Error::config("sampler needs >= 2 steps"));
        }
        let n = states.nrows();
        let d = self.action_dim();
        let (lo, hi) = self.action_box;
        let (t_min, t_max) = self.t_range;
        let grid: Vec<f64> = (0..n_steps)
            .map(|k| t_max - (t_max - t_min) * k as f64 / (n_steps - 1) as f64)
            .collect();
        let mut x = Array2::from_shape_simple_fn((n, d), || StandardNormal.sample(rng));
        for k in 0..n_steps {
            let t = grid[k];
            let (a_t, s_t) = self.schedule.alpha_sigma(t)?;
            let eps = self.predict(states, prefix, x.view(), &vec![t; n])?;
            let x0 = (&x - &(eps * s_t)).mapv(|v| (v / a_t).clamp(lo, hi));
            if k + 1 == n_steps {
                return Ok(x0);
            }
            let (a_s, s_s) = self.schedule.alpha_sigma(grid[k + 1])?;
            let a_ts = a_t / a_s;
            let var_ts = s_t * s_t - a_ts * a_ts * s_s * s_s;
            let c_x = a_ts * s_s * s_s / (s_t * s_t);
            let c_0 = a_s * var_ts / (s_t * s_t);
            let std = (var_ts * s_s * s_s / (s_t * s_t)).max(0.0).sqrt();
            x = x * c_x + x0 * c_0;
            x.mapv_inplace(|v| {
                let z: f64 = StandardNormal.sample(rng);
                v + std * z
            });
        }
        unreachable!()
    }

    pub fn to_checkpoint(&self, seed: u64) -> Checkpoint {
        let mut ck = Checkpoint::new(json!({
            "kind": "score_model",
            "role": "score",
            "seed": seed,
            "conditioning": self.conditioning,
            "state_dim": self.state_dim,
            "action_cols": self.action_cols,
            "prefix_cols": self.prefix_cols,
            "action_box": [self.action_box.0, self.action_box.1],
            "schedule": self.schedule,
            "t_range": [self.t_range.0, self.t_range.1],
            "cond_spec": self.net.cond.spec(),
            "time_spec": self.net.time.dense.spec(),
            "trunk_spec": self.net.trunk.spec(),
            "skip_spec": self.net.skip.spec(),
            "train_steps": self.steps,
        }));
        ck.push_block(self.net.cond.params());
        ck.push_block(self.net.time.dense.params());
        ck.push_block(self.net.trunk.params());
        ck.push_block(self.net.skip.params());
        ck.push_block(self.net.time.projection.freqs());
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        fn field<T: serde::de::DeserializeOwned>(ck: &Checkpoint, key: &str) -> Result<T> {
            ck.meta
                .get(key)
                .cloned()
                .ok_or_else(|| Error::Format(format!("score checkpoint lacks `{key}`")))
                .and_then(|v| serde_json::from_value(v).map_err(|e| Error::Format(format!("`{key}`: {e}"))))
        }
        if ck.blocks.len() != 5 {
            return Err(Error::Format(format!("score checkpoint has {} blocks, expected 5", ck.blocks.len())));
        }
        let action_box: [f64; 2] = field(ck, "action_box")?;
        let t_range: [f64; 2] = field(ck, "t_range")?;
        let net = ScoreNet {
            cond: Mlp::from_params(field(ck, "cond_spec")?, ck.blocks[0].clone())?,
            time: TimeEmbedding {
                projection: FourierFeatures::from_freqs(ck.blocks[4].clone()),
                dense: Mlp::from_params(field(ck, "time_spec")?, ck.blocks[1].clone())?,
            },
            trunk: Mlp::from_params(field(ck, "trunk_spec")?, ck.blocks[2].clone())?,
            skip: Mlp::from_params(field(ck, "skip_spec")?, ck.blocks[3].clone())?,
        };
        let opts = vec![
            Adam::new(AdamConfig::default(), net.cond.params().len()),
            Adam::new(AdamConfig::default(), net.time.dense.params().len()),
            Adam::new(AdamConfig::default(), net.trunk.params().len()),
            Adam::new(AdamConfig::default(), net.skip.params().len()),
        ];
        Ok(Self {
            conditioning: field(ck, "conditioning")?,
            state_dim: field(ck, "state_dim")?,
            action_cols: field(ck, "action_cols")?,
            prefix_cols: field(ck, "prefix_cols")?,
            action_box: (action_box[0], action_box[1]),
            schedule: field(ck, "schedule")?,
            t_range: (t_range[0], t_range[1]),
            net,
            opts,
            steps: field(ck, "train_steps")?,
        })
    }

    pub fn save(&self, path: &Path, seed: u64) -> Result<()> {
        self.to_checkpoint(seed).save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Trains one model for `config.steps` steps on uniformly sampled batches.
pub fn train_score_model(
    dataset: &Dataset,
    conditioning: Conditioning,
    action_cols: Vec<usize>,
    prefix_cols: Vec<usize>,
    config: &DiffusionConfig,
    seed: u64,
) -> Result<ScoreModel> {
    let meta = dataset.meta();
    let jd = meta.joint_action_dim();
    if action_cols.iter().chain(&prefix_cols).any(|&c| c >= jd) {
        return Err(Error::config(format!("action column out of range for joint dim {jd}")));
    }
    let mut model = ScoreModel::new(
        conditioning,
        meta.state_dim,
        action_cols,
        prefix_cols,
        dataset.env().action_box(),
        config,
        derive_seed(seed, "init"),
    )?;
    let mut sampler = BatchSampler::new(dataset.len(), config.batch_size, derive_seed(seed, "batches"))?;
    let mut rng = rng_from(seed, "noise");
    let mut running = 0.0;
    for step in 0..config.steps {
        let batch = sampler.sample(dataset);
        let loss = model.train_step(batch.states.view(), batch.actions.view(), &mut rng)?;
        running = if step == 0 { loss } else { 0.99 * running + 0.01 * loss };
        if (step + 1) % 5000 == 0 {
            log::debug!("diffusion {:?} step {}: loss {running:.4}", model.conditioning, step + 1);
        }
    }
    Ok(model)
}

fn check_order(order: &[usize], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    if order.len() != n {
        return Err(Error::config(format!("agent order has {} entries, expected {n}", order.len())));
    }
    for &i in order {
        if i >= n || seen[i] {
            return Err(Error::config(format!("agent order {order:?} is not a permutation of 0..{n}")));
        }
        seen[i] = true;
    }
    Ok(())
}

/// One conditional model per agent; the model of `order[k]` conditions on the
/// dataset actions of `order[..k]`. Returned in agent index order.
pub fn train_sequential_set(dataset: &Dataset, order: &[usize], config: &DiffusionConfig, seed: u64) -> Result<Vec<ScoreModel>> {
    let meta = dataset.meta();
    check_order(order, meta.n_agents)?;
    if meta.n_agents < 2 {
        return Err(Error::config("sequential decomposition needs >= 2 agents"));
    }
    let mut models: Vec<Option<ScoreModel>> = vec![None; meta.n_agents];
    for (k, &agent) in order.iter().enumerate() {
        let prefix: Vec<usize> = order[..k].iter().flat_map(|&j| agent_cols(j, meta.action_dim)).collect();
        let m = train_score_model(
            dataset,
            Conditioning::Sequential { agent },
            agent_cols(agent, meta.action_dim),
            prefix,
            config,
            derive_seed(seed, &format!("seq/agent{agent}")),
        )?;
        models[agent] = Some(m);
    }
    Ok(models.into_iter().map(Option::unwrap).collect())
}

/// One marginal model per agent.
pub fn train_independent_set(dataset: &Dataset, config: &DiffusionConfig, seed: u64) -> Result<Vec<ScoreModel>> {
    let meta = dataset.meta();
    (0..meta.n_agents)
        .map(|agent| {
            train_score_model(
                dataset,
                Conditioning::Independent { agent },
                agent_cols(agent, meta.action_dim),
                Vec::new(),
                config,
                derive_seed(seed, &format!("ind/agent{agent}")),
            )
        })
        .collect()
}

/// A single model of the whole joint action.
pub fn train_joint_model(dataset: &Dataset, config: &DiffusionConfig, seed: u64) -> Result<ScoreModel> {
    let jd = dataset.meta().joint_action_dim();
    train_score_model(dataset, Conditioning::Joint, (0..jd).collect(), Vec::new(), config, derive_seed(seed, "joint"))
}
