use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::JointPolicy;
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Holonomic point-mass cooperative navigation.
///
/// State layout: agent positions `(x, y)` for every agent, then landmark
/// positions. Landmarks never move. Velocities are the actions themselves.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpreadLiteEnv {
    pub n_agents: usize,
    pub n_landmarks: usize,
    pub dt: f64,
    pub collision_radius: f64,
    pub collision_penalty: f64,
    pub episode_length: usize,
    /// Half-width of the square arena.
    pub arena: f64,
    /// When set, every episode starts from this state instead of a random one.
    #[serde(default)]
    pub fixed_start: Option<Vec<f64>>,
}

impl Default for SpreadLiteEnv {
    fn default() -> Self {
        Self {
            n_agents: 3,
            n_landmarks: 3,
            dt: 0.1,
            collision_radius: 0.15,
            collision_penalty: 1.0,
            episode_length: 25,
            arena: 1.0,
            fixed_start: None,
        }
    }
}

impl SpreadLiteEnv {
    pub fn state_dim(&self) -> usize {
        2 * (self.n_agents + self.n_landmarks)
    }

    pub fn agent(&self, state: &[f64], i: usize) -> [f64; 2] {
        [state[2 * i], state[2 * i + 1]]
    }

    pub fn landmark(&self, state: &[f64], j: usize) -> [f64; 2] {
        let off = 2 * self.n_agents;
        [state[off + 2 * j], state[off + 2 * j + 1]]
    }

    pub fn reset(&self, rng: &mut Rng) -> Vec<f64> {
        if let Some(s) = &self.fixed_start {
            return s.clone();
        }
        (0..self.state_dim())
            .map(|_| rng.random_range(-self.arena..=self.arena))
            .collect()
    }

    /// `-sum_landmarks min_agent distance - penalty * colliding_pairs`.
    pub fn reward(&self, state: &[f64]) -> f64 {
        let mut cover = 0.0;
        for j in 0..self.n_landmarks {
            let l = self.landmark(state, j);
            let nearest = (0..self.n_agents)
                .map(|i| dist(self.agent(state, i), l))
                .fold(f64::INFINITY, f64::min);
            cover += nearest;
        }
        let mut collisions = 0usize;
        for i in 0..self.n_agents {
            for k in i + 1..self.n_agents {
                if dist(self.agent(state, i), self.agent(state, k)) < self.collision_radius {
                    collisions += 1;
                }
            }
        }
        -cover - self.collision_penalty * collisions as f64
    }

    /// Moves every agent by `dt * velocity`, clamps to the arena and scores
    /// the resulting state.
    pub fn step(&self, state: &[f64], action: &[f64]) -> Result<(Vec<f64>, f64)> {
        if state.len() != self.state_dim() {
            return Err(Error::shape(format!(
                "spread state has {} entries, got {}",
                self.state_dim(),
                state.len()
            )));
        }
        if action.len() != 2 * self.n_agents {
            return Err(Error::shape(format!(
                "spread joint action has {} entries, got {}",
                2 * self.n_agents,
                action.len()
            )));
        }
        let mut next = state.to_vec();
        for (p, v) in next.iter_mut().zip(action) {
            *p = (*p + self.dt * v).clamp(-self.arena, self.arena);
        }
        let r = self.reward(&next);
        Ok((next, r))
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpreadTier {
    Expert,
    Medium,
    Random,
}

impl SpreadTier {
    pub fn name(self) -> &'static str {
        match self {
            SpreadTier::Expert => "expert",
            SpreadTier::Medium => "medium",
            SpreadTier::Random => "random",
        }
    }

    pub fn policy(self, env: &SpreadLiteEnv) -> Box<dyn JointPolicy> {
        match self {
            SpreadTier::Expert => Box::new(SpreadExpert::new(env.clone())),
            SpreadTier::Medium => Box::new(SpreadMedium::new(env.clone(), 0.5)),
            SpreadTier::Random => Box::new(UniformPolicy::new(2 * env.n_agents, -1.0, 1.0)),
        }
    }
}

impl std::str::FromStr for SpreadTier {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "expert" => Ok(SpreadTier::Expert),
            "medium" => Ok(SpreadTier::Medium),
            "random" => Ok(SpreadTier::Random),
            other => Err(Error::config(format!("unknown dataset tier `{other}`"))),
        }
    }
}

/// Scripted controller: each agent heads at full speed for the landmark its
/// per-episode random assignment names, slowing so it stops on arrival.
#[derive(Clone, Debug)]
pub struct SpreadExpert {
    env: SpreadLiteEnv,
    assignment: Vec<usize>,
}

impl SpreadExpert {
    pub fn new(env: SpreadLiteEnv) -> Self {
        let assignment = (0..env.n_agents).map(|i| i % env.n_landmarks).collect();
        Self { env, assignment }
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn action_for(&self, state: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(2 * self.env.n_agents);
        for (i, &j) in self.assignment.iter().enumerate() {
            let p = self.env.agent(state, i);
            let l = self.env.landmark(state, j);
            let d = [l[0] - p[0], l[1] - p[1]];
            let norm = (d[0] * d[0] + d[1] * d[1]).sqrt();
            if norm == 0.0 {
                out.extend([0.0, 0.0]);
            } else {
                let speed = (norm / self.env.dt).min(1.0);
                out.extend([speed * d[0] / norm, speed * d[1] / norm]);
            }
        }
        out
    }
}

impl JointPolicy for SpreadExpert {
    fn begin_episode(&mut self, _state: &[f64], rng: &mut Rng) {
        let mut perm: Vec<usize> = (0..self.env.n_landmarks).collect();
        perm.shuffle(rng);
        self.assignment = (0..self.env.n_agents).map(|i| perm[i % perm.len()]).collect();
    }

    fn act(&mut self, state: &[f64], _t: usize, _rng: &mut Rng) -> Result<Vec<f64>> {
        Ok(self.action_for(state))
    }
}

/// Expert joint action with probability `p_expert` per step, otherwise uniform.
#[derive(Clone, Debug)]
pub struct SpreadMedium {
    expert: SpreadExpert,
    p_expert: f64,
}

impl SpreadMedium {
    pub fn new(env: SpreadLiteEnv, p_expert: f64) -> Self {
        Self {
            expert: SpreadExpert::new(env),
            p_expert,
        }
    }
}

impl JointPolicy for SpreadMedium {
    fn begin_episode(&mut self, state: &[f64], rng: &mut Rng) {
        self.expert.begin_episode(state, rng);
    }

    fn act(&mut self, state: &[f64], _t: usize, rng: &mut Rng) -> Result<Vec<f64>> {
        if rng.random::<f64>() < self.p_expert {
            Ok(self.expert.action_for(state))
        } else {
            let n = 2 * self.expert.env.n_agents;
            Ok((0..n).map(|_| rng.random_range(-1.0..=1.0)).collect())
        }
    }
}

#[derive(Clone, Debug)]
pub struct UniformPolicy {
    dim: usize,
    lo: f64,
    hi: f64,
}

impl UniformPolicy {
    pub fn new(dim: usize, lo: f64, hi: f64) -> Self {
        Self { dim, lo, hi }
    }
}

impl JointPolicy for UniformPolicy {
    fn act(&mut self, _state: &[f64], _t: usize, rng: &mut Rng) -> Result<Vec<f64>> {
        Ok((0..self.dim).map(|_| rng.random_range(self.lo..=self.hi)).collect())
    }
}
