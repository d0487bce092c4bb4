//! Expectile-regression value pretraining (implicit Q-learning).
//!
//! A [`Critic`] scores `state ++ actions[cols]`; the joint critic uses every
//! action column, an independent critic only its own agent's columns.

use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::data::{Batch, BatchSampler, Dataset};
use crate::error::{Error, Result};
use crate::nn::{soft_update, Adam, AdamConfig, Checkpoint, Mlp, MlpSpec};
use crate::rng::derive_seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvClamp {
    /// `min(exp(temperature * adv), 100)`.
    ExpClamp100,
    /// `exp(temperature * clamp(adv, -1, 1))`.
    AdvClampUnit,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CriticMode {
    Joint,
    Independent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CriticConfig {
    pub hidden: Vec<usize>,
    pub lr: f64,
    pub expectile: f64,
    pub discount: f64,
    pub tau_soft: f64,
    pub batch_size: usize,
    pub steps_per_epoch: usize,
    pub epochs: usize,
    pub checkpoint_every: usize,
    pub temperature: f64,
    pub adv_clamp: AdvClamp,
}

impl Default for CriticConfig {
    fn default() -> Self {
        Self {
            hidden: vec![256, 256],
            lr: 3e-4,
            expectile: 0.7,
            discount: 0.99,
            tau_soft: 0.005,
            batch_size: 512,
            steps_per_epoch: 1000,
            epochs: 500,
            checkpoint_every: 50,
            temperature: 3.0,
            adv_clamp: AdvClamp::ExpClamp100,
        }
    }
}

impl CriticConfig {
    /// Expectile and AWR temperature defaults per navigation dataset tier.
    pub fn for_spread_tier(tier: &str) -> Self {
        let (expectile, temperature) = match tier {
            "expert" => (0.5, 3.0),
            "medium" => (0.7, 0.5),
            "random" => (0.5, 0.5),
            _ => (0.7, 3.0),
        };
        Self {
            expectile,
            temperature,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_expectile(self.expectile)?;
        if self.batch_size == 0 || self.steps_per_epoch == 0 {
            return Err(Error::config("critic batch size and steps per epoch must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.discount) {
            return Err(Error::config(format!("discount {} outside [0, 1]", self.discount)));
        }
        Ok(())
    }
}

fn check_expectile(tau: f64) -> Result<()> {
    if tau > 0.0 && tau < 1.0 {
        Ok(())
    } else {
        Err(Error::config(format!("expectile {tau} outside (0, 1)")))
    }
}

/// `|tau - 1(u < 0)| * u^2`.
pub fn expectile_loss(u: f64, tau: f64) -> Result<f64> {
    check_expectile(tau)?;
    Ok(expectile_weight(u, tau) * u * u)
}

fn expectile_weight(u: f64, tau: f64) -> f64 {
    if u < 0.0 {
        1.0 - tau
    } else {
        tau
    }
}

/// `state ++ actions[cols]`, row by row.
pub fn critic_inputs(states: ArrayView2<'_, f64>, actions: ArrayView2<'_, f64>, cols: &[usize]) -> Array2<f64> {
    let sd = states.ncols();
    let mut x = Array2::zeros((states.nrows(), sd + cols.len()));
    x.slice_mut(s![.., ..sd]).assign(&states);
    for (k, &c) in cols.iter().enumerate() {
        x.column_mut(sd + k).assign(&actions.column(c));
    }
    x
}

fn column(m: Array2<f64>) -> Array1<f64> {
    m.index_axis_move(Axis(1), 0)
}

fn check_finite(loss: f64, step: u64, what: &str) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence {
            step,
            what: format!("{what} loss is {loss}"),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Critic {
    pub state_dim: usize,
    pub action_cols: Vec<usize>,
    pub q1: Mlp,
    pub q2: Mlp,
    pub q1_target: Mlp,
    pub q2_target: Mlp,
    pub v: Mlp,
    pub expectile: f64,
    pub discount: f64,
    pub tau_soft: f64,
    opt_q1: Adam,
    opt_q2: Adam,
    opt_v: Adam,
    steps: u64,
}

impl Critic {
    pub fn new(state_dim: usize, action_cols: Vec<usize>, config: &CriticConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let q_spec = MlpSpec::new(state_dim + action_cols.len(), &config.hidden, 1);
        let v_spec = MlpSpec::new(state_dim, &config.hidden, 1);
        let q1 = Mlp::new(q_spec.clone(), derive_seed(seed, "q1"))?;
        let q2 = Mlp::new(q_spec, derive_seed(seed, "q2"))?;
        let v = Mlp::new(v_spec, derive_seed(seed, "v"))?;
        let adam = AdamConfig::with_lr(config.lr);
        Ok(Self {
            state_dim,
            action_cols,
            opt_q1: Adam::new(adam, q1.params().len()),
            opt_q2: Adam::new(adam, q1.params().len()),
            opt_v: Adam::new(adam, v.params().len()),
            q1_target: q1.clone(),
            q2_target: q2.clone(),
            q1,
            q2,
            v,
            expectile: config.expectile,
            discount: config.discount,
            tau_soft: config.tau_soft,
            steps: 0,
        })
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    fn inputs(&self, states: ArrayView2<'_, f64>, actions: ArrayView2<'_, f64>) -> Array2<f64> {
        critic_inputs(states, actions, &self.action_cols)
    }

    /// `min(Q1, Q2)` of the online networks.
    pub fn q_min(&self, states: ArrayView2<'_, f64>, actions: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
        let x = self.inputs(states, actions);
        let a = column(self.q1.forward_batch(x.view())?);
        let b = column(self.q2.forward_batch(x.view())?);
        Ok(ndarray::Zip::from(&a).and(&b).map_collect(|&p, &q| p.min(q)))
    }

    pub fn q_target_min(&self, states: ArrayView2<'_, f64>, actions: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
        let x = self.inputs(states, actions);
        let a = column(self.q1_target.forward_batch(x.view())?);
        let b = column(self.q2_target.forward_batch(x.view())?);
        Ok(ndarray::Zip::from(&a).and(&b).map_collect(|&p, &q| p.min(q)))
    }

    pub fn value(&self, states: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
        Ok(column(self.v.forward_batch(states)?))
    }

    /// `min(Q1, Q2)` and its gradient with respect to this critic's action
    /// inputs (one column per entry of `action_cols`), taken through whichever
    /// network attains the minimum for each row.
    pub fn q_and_action_grad(
        &self,
        states: ArrayView2<'_, f64>,
        actions: ArrayView2<'_, f64>,
    ) -> Result<(Array1<f64>, Array2<f64>)> {
        let x = self.inputs(states, actions);
        let c1 = self.q1.forward_cached(x.view())?;
        let c2 = self.q2.forward_cached(x.view())?;
        let n = x.nrows();
        let mut u1 = Array2::zeros((n, 1));
        let mut u2 = Array2::zeros((n, 1));
        let mut q = Array1::zeros(n);
        for r in 0..n {
            let (a, b) = (c1.output()[[r, 0]], c2.output()[[r, 0]]);
            if a <= b {
                q[r] = a;
                u1[[r, 0]] = 1.0;
            } else {
                q[r] = b;
                u2[[r, 0]] = 1.0;
            }
        }
        let g = self.q1.backward_input(&c1, u1.view())? + self.q2.backward_input(&c2, u2.view())?;
        Ok((q, g.slice(s![.., self.state_dim..]).to_owned()))
    }

    /// One expectile-regression step of V toward the target-network min-Q.
    /// Returns the pre-step loss.
    pub fn v_step(&mut self, batch: &Batch) -> Result<f64> {
        let target = self.q_target_min(batch.states.view(), batch.actions.view())?;
        let cache = self.v.forward_cached(batch.states.view())?;
        let n = batch.len() as f64;
        let mut loss = 0.0;
        let mut up = Array2::zeros((batch.len(), 1));
        for r in 0..batch.len() {
            let u = target[r] - cache.output()[[r, 0]];
            let w = expectile_weight(u, self.expectile);
            loss += w * u * u;
            up[[r, 0]] = -2.0 * w * u / n;
        }
        loss /= n;
        check_finite(loss, self.steps, "value")?;
        let (g, _) = self.v.backward(&cache, up.view())?;
        self.opt_v.step(self.v.params_mut(), &g)?;
        Ok(loss)
    }

    /// One regression step of both Q networks toward `r + discount * (1 - done) * V(s')`,
    /// followed by a soft target update. Returns the mean pre-step loss of the pair.
    pub fn q_step(&mut self, batch: &Batch) -> Result<f64> {
        let v_next = self.value(batch.next_states.view())?;
        let y: Array1<f64> = (0..batch.len())
            .map(|r| batch.rewards[r] + self.discount * (1.0 - batch.dones[r]) * v_next[r])
            .collect();
        let x = self.inputs(batch.states.view(), batch.actions.view());
        let n = batch.len() as f64;
        let mut total = 0.0;
        for (net, opt) in [(&mut self.q1, &mut self.opt_q1), (&mut self.q2, &mut self.opt_q2)] {
            let cache = net.forward_cached(x.view())?;
            let mut up = Array2::zeros((batch.len(), 1));
            let mut loss = 0.0;
            for r in 0..batch.len() {
                let d = cache.output()[[r, 0]] - y[r];
                loss += d * d;
                up[[r, 0]] = 2.0 * d / n;
            }
            loss /= n;
            check_finite(loss, self.steps, "q")?;
            let (g, _) = net.backward(&cache, up.view())?;
            opt.step(net.params_mut(), &g)?;
            total += 0.5 * loss;
        }
        soft_update(&mut self.q1_target, &self.q1, self.tau_soft)?;
        soft_update(&mut self.q2_target, &self.q2, self.tau_soft)?;
        self.steps += 1;
        Ok(total)
    }

    /// Advantage-weighted regression weights for the batch.
    pub fn awr_weights(&self, batch: &Batch, temperature: f64, clamp: AdvClamp) -> Result<Array1<f64>> {
        let q = self.q_target_min(batch.states.view(), batch.actions.view())?;
        let v = self.value(batch.states.view())?;
        Ok(ndarray::Zip::from(&q).and(&v).map_collect(|&q, &v| {
            let adv = q - v;
            match clamp {
                AdvClamp::ExpClamp100 => (temperature * adv).exp().min(100.0),
                AdvClamp::AdvClampUnit => (temperature * adv.clamp(-1.0, 1.0)).exp(),
            }
        }))
    }

    /// Named networks with their checkpoint role tags.
    pub fn networks(&self) -> [(&'static str, &Mlp); 5] {
        [
            ("q1", &self.q1),
            ("q2", &self.q2),
            ("q1t", &self.q1_target),
            ("q2t", &self.q2_target),
            ("v", &self.v),
        ]
    }

    pub fn checkpoints(&self, seed: u64) -> Vec<(&'static str, Checkpoint)> {
        self.networks()
            .into_iter()
            .map(|(role, net)| {
                let mut ck = net.to_checkpoint(role, seed);
                if let Some(obj) = ck.meta.as_object_mut() {
                    obj.insert("action_cols".into(), json!(self.action_cols));
                    obj.insert("expectile".into(), json!(self.expectile));
                    obj.insert("discount".into(), json!(self.discount));
                    obj.insert("critic_steps".into(), json!(self.steps));
                }
                (role, ck)
            })
            .collect()
    }

    /// Writes the five networks as `{prefix}_{role}.ckpt` into `dir`.
    pub fn save(&self, dir: &Path, prefix: &str, seed: u64) -> Result<Vec<std::path::PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut out = Vec::new();
        for (role, ck) in self.checkpoints(seed) {
            let path = dir.join(format!("{prefix}_{role}.ckpt"));
            ck.save(&path)?;
            out.push(path);
        }
        Ok(out)
    }

    /// Restores networks saved by [`Critic::save`]. Optimizer state starts fresh.
    pub fn load(dir: &Path, prefix: &str, config: &CriticConfig) -> Result<Self> {
        let mut nets = Vec::new();
        let mut cols = Vec::new();
        for role in ["q1", "q2", "q1t", "q2t", "v"] {
            let ck = Checkpoint::load(&dir.join(format!("{prefix}_{role}.ckpt")))?;
            if role == "q1" {
                cols = ck
                    .meta
                    .get("action_cols")
                    .cloned()
                    .and_then(|v| serde_json::from_value(v).ok())
                    .ok_or_else(|| Error::Format("critic checkpoint lacks action_cols".into()))?;
            }
            nets.push(Mlp::from_checkpoint(&ck)?);
        }
        let state_dim = nets[4].input_dim();
        let mut critic = Critic::new(state_dim, cols, config, 0)?;
        let mut it = nets.into_iter();
        critic.q1 = it.next().unwrap();
        critic.q2 = it.next().unwrap();
        critic.q1_target = it.next().unwrap();
        critic.q2_target = it.next().unwrap();
        critic.v = it.next().unwrap();
        Ok(critic)
    }
}

/// Either one centralized critic or one critic per agent.
#[derive(Clone, Debug, PartialEq)]
pub enum CriticSet {
    Joint(Critic),
    Independent(Vec<Critic>),
}

impl CriticSet {
    pub fn critics(&self) -> Vec<&Critic> {
        match self {
            CriticSet::Joint(c) => vec![c],
            CriticSet::Independent(cs) => cs.iter().collect(),
        }
    }

    pub fn joint(&self) -> Option<&Critic> {
        match self {
            CriticSet::Joint(c) => Some(c),
            CriticSet::Independent(_) => None,
        }
    }
}

/// Action columns owned by `agent` in the flat joint action.
pub fn agent_cols(agent: usize, action_dim: usize) -> Vec<usize> {
    (agent * action_dim..(agent + 1) * action_dim).collect()
}

/// Alternating V/Q training for `epochs * steps_per_epoch` steps.
///
/// With `checkpoint_dir` set, every critic is written there every
/// `checkpoint_every` epochs as `{tag}_e{epoch}_{role}.ckpt`.
pub fn pretrain_critic(
    dataset: &Dataset,
    config: &CriticConfig,
    mode: CriticMode,
    seed: u64,
    checkpoint_dir: Option<&Path>,
) -> Result<CriticSet> {
    config.validate()?;
    let meta = dataset.meta();
    let mut critics: Vec<Critic> = match mode {
        CriticMode::Joint => vec![Critic::new(
            meta.state_dim,
            (0..meta.joint_action_dim()).collect(),
            config,
            derive_seed(seed, "critic/joint"),
        )?],
        CriticMode::Independent => (0..meta.n_agents)
            .map(|i| {
                Critic::new(
                    meta.state_dim,
                    agent_cols(i, meta.action_dim),
                    config,
                    derive_seed(seed, &format!("critic/agent{i}")),
                )
            })
            .collect::<Result<_>>()?,
    };
    for (k, critic) in critics.iter_mut().enumerate() {
        let mut sampler = BatchSampler::new(dataset.len(), config.batch_size, derive_seed(seed, &format!("critic/batches{k}")))?;
        for epoch in 1..=config.epochs {
            let mut last = (0.0, 0.0);
            for _ in 0..config.steps_per_epoch {
                let batch = sampler.sample(dataset);
                last.0 = critic.v_step(&batch)?;
                last.1 = critic.q_step(&batch)?;
            }
            log::debug!("critic {k} epoch {epoch}: v_loss {:.5} q_loss {:.5}", last.0, last.1);
            if let Some(dir) = checkpoint_dir {
                if config.checkpoint_every > 0 && (epoch % config.checkpoint_every == 0 || epoch == config.epochs) {
                    critic.save(dir, &format!("critic{k}_e{epoch}"), seed)?;
                }
            }
        }
    }
    Ok(match mode {
        CriticMode::Joint => CriticSet::Joint(critics.pop().unwrap()),
        CriticMode::Independent => CriticSet::Independent(critics),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_bandit_dataset, Columns, MixtureSpec};
    use crate::envs::Env;
    use proptest::prelude::*;

    fn small_config() -> CriticConfig {
        CriticConfig {
            hidden: vec![16, 16],
            lr: 1e-3,
            batch_size: 32,
            steps_per_epoch: 100,
            epochs: 1,
            ..CriticConfig::default()
        }
    }

    fn batch_of(states: Vec<f64>, actions: Vec<[f64; 2]>, rewards: Vec<f64>, dones: Vec<f64>) -> Batch {
        let n = rewards.len();
        Batch {
            states: Array2::from_shape_vec((n, 1), states.clone()).unwrap(),
            actions: Array2::from_shape_fn((n, 2), |(r, c)| actions[r][c]),
            rewards,
            next_states: Array2::from_shape_vec((n, 1), states).unwrap(),
            dones,
        }
    }

    #[test]
    fn expectile_examples() {
        assert_eq!(expectile_loss(1.0, 0.7).unwrap(), 0.7);
        assert!((expectile_loss(-1.0, 0.7).unwrap() - 0.3).abs() < 1e-15);
        assert_eq!(expectile_loss(0.0, 0.3).unwrap(), 0.0);
        assert!(matches!(expectile_loss(1.0, 1.0), Err(Error::Config(_))));
        assert!(matches!(expectile_loss(1.0, 0.0), Err(Error::Config(_))));
    }

    proptest! {
        #[test]
        fn expectile_reflection(u in -10.0f64..10.0, k in 1u32..1024) {
            // Dyadic rates keep 1 - tau exact, so the identity holds bit for bit.
            let tau = f64::from(k) / 1024.0;
            prop_assert_eq!(expectile_loss(u, tau).unwrap(), expectile_loss(-u, 1.0 - tau).unwrap());
        }

        #[test]
        fn expectile_reflection_any_rate(u in -10.0f64..10.0, tau in 0.01f64..0.99) {
            let a = expectile_loss(u, tau).unwrap();
            let b = expectile_loss(-u, 1.0 - tau).unwrap();
            prop_assert!((a - b).abs() <= 1e-13 * a.abs().max(1e-300));
        }

        #[test]
        fn expectile_convex(a in -5.0f64..5.0, b in -5.0f64..5.0, lam in 0.0f64..1.0, tau in 0.01f64..0.99) {
            let mid = lam * a + (1.0 - lam) * b;
            let lhs = expectile_loss(mid, tau).unwrap();
            let rhs = lam * expectile_loss(a, tau).unwrap() + (1.0 - lam) * expectile_loss(b, tau).unwrap();
            prop_assert!(lhs <= rhs + 1e-12);
        }
    }

    #[test]
    fn half_expectile_is_half_squared_error() {
        for &u in &[-3.0, -0.5, 0.0, 0.25, 2.0] {
            assert_eq!(expectile_loss(u, 0.5).unwrap(), 0.5 * u * u);
        }
    }

    #[test]
    fn v_step_loss_is_zero_when_v_matches_min_q() {
        let mut cfg = small_config();
        cfg.hidden = vec![];
        let mut c = Critic::new(1, vec![0, 1], &cfg, 0).unwrap();
        // Q nets: constant 0.4 and 0.7; V: constant 0.4.
        c.q1_target.params_mut().fill(0.0);
        c.q1_target.bias_mut(0)[0] = 0.4;
        c.q2_target.params_mut().fill(0.0);
        c.q2_target.bias_mut(0)[0] = 0.7;
        c.v.params_mut().fill(0.0);
        c.v.bias_mut(0)[0] = 0.4;
        let before = c.v.clone();
        let b = batch_of(vec![0.0, 0.0], vec![[0.1, 0.2], [-0.3, 0.9]], vec![0.0, 0.0], vec![1.0, 1.0]);
        assert_eq!(c.v_step(&b).unwrap(), 0.0);
        assert_eq!(c.v, before);
    }

    #[test]
    fn terminal_and_zero_discount_targets_ignore_v() {
        let mut cfg = small_config();
        cfg.hidden = vec![];
        cfg.discount = 0.0;
        let mut a = Critic::new(1, vec![0, 1], &cfg, 1).unwrap();
        cfg.discount = 0.99;
        let mut b = Critic::new(1, vec![0, 1], &cfg, 1).unwrap();
        b.v.params_mut().iter_mut().for_each(|p| *p = 5.0);
        let batch = batch_of(vec![0.3], vec![[0.5, 0.5]], vec![1.0], vec![1.0]);
        assert_eq!(a.q_step(&batch).unwrap(), b.q_step(&batch).unwrap());
        assert_eq!(a.q1, b.q1);
    }

    #[test]
    fn targets_follow_exponential_average() {
        let cfg = small_config();
        let mut c = Critic::new(1, vec![0, 1], &cfg, 3).unwrap();
        let b = batch_of(vec![0.0; 4], vec![[0.1, 0.1], [0.9, -0.2], [-0.5, 0.5], [0.0, 1.0]], vec![1.0, -1.0, 0.2, 0.0], vec![1.0; 4]);
        let mut expect = c.q1_target.params().to_vec();
        for _ in 0..50 {
            c.q_step(&b).unwrap();
            for (e, o) in expect.iter_mut().zip(c.q1.params()) {
                *e = 0.995 * *e + 0.005 * o;
            }
        }
        for (e, t) in expect.iter().zip(c.q1_target.params()) {
            assert!((e - t).abs() < 1e-10);
        }
    }

    #[test]
    fn action_grad_matches_finite_difference() {
        let c = Critic::new(1, vec![0, 1], &small_config(), 5).unwrap();
        let s = Array2::from_elem((1, 1), 0.0);
        let a = Array2::from_shape_vec((1, 2), vec![0.3, -0.4]).unwrap();
        let (_, g) = c.q_and_action_grad(s.view(), a.view()).unwrap();
        let h = 1e-6;
        for k in 0..2 {
            let mut p = a.clone();
            let mut m = a.clone();
            p[[0, k]] += h;
            m[[0, k]] -= h;
            let fd = (c.q_min(s.view(), p.view()).unwrap()[0] - c.q_min(s.view(), m.view()).unwrap()[0]) / (2.0 * h);
            assert!((fd - g[[0, k]]).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_reward_dataset_gives_near_zero_q() {
        let n = 200;
        let env = Env::bandit();
        let ds = Dataset::new(
            env,
            "zero",
            0,
            Columns {
                states: Array2::zeros((n, 1)),
                actions: Array2::from_shape_fn((n, 2), |(r, c)| ((r * 7 + c * 3) % 11) as f64 / 5.5 - 1.0),
                rewards: vec![0.0; n],
                next_states: Array2::zeros((n, 1)),
                dones: vec![1; n],
            },
        )
        .unwrap();
        let cfg = CriticConfig {
            epochs: 20,
            ..small_config()
        };
        let set = pretrain_critic(&ds, &cfg, CriticMode::Joint, 0, None).unwrap();
        let q = set.joint().unwrap().q_min(ds.states().view(), ds.actions().view()).unwrap();
        assert!(q.iter().all(|v| v.abs() < 0.05), "{q:?}");
    }

    #[test]
    fn temperature_zero_gives_uniform_weights() {
        let ds = gen_bandit_dataset(&MixtureSpec::bandit(), 64, 0).unwrap();
        let c = Critic::new(1, vec![0, 1], &small_config(), 0).unwrap();
        let b = ds.gather(&(0..64).collect::<Vec<_>>());
        let w = c.awr_weights(&b, 0.0, AdvClamp::ExpClamp100).unwrap();
        assert!(w.iter().all(|&v| v == 1.0));
        let w = c.awr_weights(&b, 1e6, AdvClamp::ExpClamp100).unwrap();
        assert!(w.iter().all(|&v| v <= 100.0));
        let w = c.awr_weights(&b, 2.0, AdvClamp::AdvClampUnit).unwrap();
        assert!(w.iter().all(|&v| v <= 2f64.exp() + 1e-12));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let c = Critic::new(1, vec![1], &small_config(), 8).unwrap();
        c.save(dir.path(), "x", 8).unwrap();
        let back = Critic::load(dir.path(), "x", &small_config()).unwrap();
        assert_eq!(back.q1, c.q1);
        assert_eq!(back.v, c.v);
        assert_eq!(back.action_cols, vec![1]);
    }
}
