//! Fully observed cooperative environments.
//!
//! Every environment exposes a flat state vector and a flat joint action
//! (agent blocks concatenated in index order). Bandits are single-step games
//! over a constant one-dimensional dummy state.

mod spread;

pub use spread::{SpreadExpert, SpreadLiteEnv, SpreadMedium, SpreadTier, UniformPolicy};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{rng_from, Rng};

pub const DEFAULT_KERNEL_WIDTH: f64 = 0.3;

fn kernel(a: &[f64], c: &[f64], width: f64) -> f64 {
    let d2: f64 = a.iter().zip(c).map(|(x, y)| (x - y) * (x - y)).sum();
    (-d2 / (2.0 * width * width)).exp()
}

fn check_box(a: &[f64], lo: f64, hi: f64) -> Result<()> {
    match a.iter().position(|v| !(lo..=hi).contains(v)) {
        Some(i) => Err(Error::domain(format!(
            "action component {i} = {} outside [{lo}, {hi}]",
            a[i]
        ))),
        None => Ok(()),
    }
}

/// Two-agent continuous bandit: `+1` at the coordinated corners `(1,1)` and
/// `(-1,-1)`, `-1` at the anti-coordinated corners.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BanditEnv {
    pub kernel_width: f64,
}

impl Default for BanditEnv {
    fn default() -> Self {
        Self {
            kernel_width: DEFAULT_KERNEL_WIDTH,
        }
    }
}

impl BanditEnv {
    pub const MODES: [[f64; 2]; 2] = [[1.0, 1.0], [-1.0, -1.0]];
    pub const ANTI_MODES: [[f64; 2]; 2] = [[1.0, -1.0], [-1.0, 1.0]];

    pub fn reward(&self, a: &[f64]) -> Result<f64> {
        if a.len() != 2 {
            return Err(Error::shape(format!("bandit joint action has 2 entries, got {}", a.len())));
        }
        check_box(a, -1.0, 1.0)?;
        let w = self.kernel_width;
        let pos: f64 = Self::MODES.iter().map(|c| kernel(a, c, w)).sum();
        let neg: f64 = Self::ANTI_MODES.iter().map(|c| kernel(a, c, w)).sum();
        Ok(pos - neg)
    }
}

/// n-agent game on `[0,1]^n` whose optima are the all-ones and all-zeros corners.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeBanditEnv {
    pub n_agents: usize,
    pub kernel_width: f64,
}

impl ModeBanditEnv {
    pub fn new(n_agents: usize) -> Self {
        Self {
            n_agents,
            kernel_width: DEFAULT_KERNEL_WIDTH,
        }
    }

    pub fn reward(&self, a: &[f64]) -> Result<f64> {
        if a.len() != self.n_agents {
            return Err(Error::shape(format!(
                "mode bandit expects {} actions, got {}",
                self.n_agents,
                a.len()
            )));
        }
        check_box(a, 0.0, 1.0)?;
        let ones = vec![1.0; a.len()];
        let zeros = vec![0.0; a.len()];
        Ok(kernel(a, &ones, self.kernel_width).max(kernel(a, &zeros, self.kernel_width)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Env {
    Bandit(BanditEnv),
    ModeBandit(ModeBanditEnv),
    Spread(SpreadLiteEnv),
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub next_state: Vec<f64>,
    pub reward: f64,
    pub done: bool,
}

impl Env {
    pub fn bandit() -> Self {
        Env::Bandit(BanditEnv::default())
    }

    pub fn mode_bandit(n_agents: usize) -> Self {
        Env::ModeBandit(ModeBanditEnv::new(n_agents))
    }

    pub fn spread() -> Self {
        Env::Spread(SpreadLiteEnv::default())
    }

    pub fn id(&self) -> &'static str {
        match self {
            Env::Bandit(_) => "bandit",
            Env::ModeBandit(_) => "mode_bandit",
            Env::Spread(_) => "spread",
        }
    }

    pub fn n_agents(&self) -> usize {
        match self {
            Env::Bandit(_) => 2,
            Env::ModeBandit(e) => e.n_agents,
            Env::Spread(e) => e.n_agents,
        }
    }

    pub fn state_dim(&self) -> usize {
        match self {
            Env::Bandit(_) | Env::ModeBandit(_) => 1,
            Env::Spread(e) => e.state_dim(),
        }
    }

    /// Per-agent action dimension.
    pub fn action_dim(&self) -> usize {
        match self {
            Env::Bandit(_) | Env::ModeBandit(_) => 1,
            Env::Spread(_) => 2,
        }
    }

    pub fn joint_action_dim(&self) -> usize {
        self.n_agents() * self.action_dim()
    }

    /// Per-component action bounds.
    pub fn action_box(&self) -> (f64, f64) {
        match self {
            Env::ModeBandit(_) => (0.0, 1.0),
            Env::Bandit(_) | Env::Spread(_) => (-1.0, 1.0),
        }
    }

    pub fn episode_length(&self) -> usize {
        match self {
            Env::Bandit(_) | Env::ModeBandit(_) => 1,
            Env::Spread(e) => e.episode_length,
        }
    }

    pub fn reset(&self, rng: &mut Rng) -> Vec<f64> {
        match self {
            Env::Bandit(_) | Env::ModeBandit(_) => vec![0.0],
            Env::Spread(e) => e.reset(rng),
        }
    }

    /// Advances one step; `t` is the zero-based index of the step being taken.
    pub fn step(&self, state: &[f64], t: usize, action: &[f64]) -> Result<StepOutcome> {
        if state.len() != self.state_dim() {
            return Err(Error::shape(format!(
                "{} state has {} entries, got {}",
                self.id(),
                self.state_dim(),
                state.len()
            )));
        }
        match self {
            Env::Bandit(e) => Ok(StepOutcome {
                next_state: state.to_vec(),
                reward: e.reward(action)?,
                done: true,
            }),
            Env::ModeBandit(e) => Ok(StepOutcome {
                next_state: state.to_vec(),
                reward: e.reward(action)?,
                done: true,
            }),
            Env::Spread(e) => {
                let (next_state, reward) = e.step(state, action)?;
                Ok(StepOutcome {
                    next_state,
                    reward,
                    done: t + 1 >= e.episode_length,
                })
            }
        }
    }
}

/// Something that picks a joint action from the full state.
pub trait JointPolicy {
    /// Called once after each reset.
    fn begin_episode(&mut self, _state: &[f64], _rng: &mut Rng) {}

    fn act(&mut self, state: &[f64], t: usize, rng: &mut Rng) -> Result<Vec<f64>>;
}

/// The same joint action at every step.
#[derive(Clone, Debug)]
pub struct ConstantPolicy(pub Vec<f64>);

impl JointPolicy for ConstantPolicy {
    fn act(&mut self, _state: &[f64], _t: usize, _rng: &mut Rng) -> Result<Vec<f64>> {
        Ok(self.0.clone())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub done: bool,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Trajectory {
    pub transitions: Vec<Transition>,
    /// Number of action components that had to be clamped into the box.
    pub clamped: usize,
}

impl Trajectory {
    pub fn episode_return(&self) -> f64 {
        self.transitions.iter().map(|t| t.reward).sum()
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }
}

/// Runs one episode. The whole episode is a function of `(policy, env, seed)`.
pub fn rollout(policy: &mut dyn JointPolicy, env: &Env, seed: u64) -> Result<Trajectory> {
    let mut rng = rng_from(seed, "rollout");
    let mut state = env.reset(&mut rng);
    policy.begin_episode(&state, &mut rng);
    let (lo, hi) = env.action_box();
    let mut traj = Trajectory::default();
    for t in 0..env.episode_length() {
        let mut action = policy.act(&state, t, &mut rng)?;
        if action.len() != env.joint_action_dim() {
            return Err(Error::config(format!(
                "policy produced {} action entries, env needs {}",
                action.len(),
                env.joint_action_dim()
            )));
        }
        for a in &mut action {
            if !a.is_finite() {
                return Err(Error::domain("policy produced a non-finite action"));
            }
            if *a < lo || *a > hi {
                *a = a.clamp(lo, hi);
                traj.clamped += 1;
            }
        }
        let out = env.step(&state, t, &action)?;
        traj.transitions.push(Transition {
            state: std::mem::replace(&mut state, out.next_state.clone()),
            action,
            reward: out.reward,
            next_state: out.next_state,
            done: out.done,
        });
        if out.done {
            break;
        }
    }
    if traj.clamped > 0 {
        log::warn!("{} action components clamped into [{lo}, {hi}] during rollout", traj.clamped);
    }
    Ok(traj)
}
