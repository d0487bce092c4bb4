//! End-to-end runs driven by a versioned JSON config.
//!
//! A run writes every artifact under its output directory and finishes by
//! writing `manifest.json`, which lists each file with its SHA-256 digest.
//! On failure the manifest still lands, with an error record naming the phase.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::{evaluate_actors, pca_policy_viz, ScoreReport};
use crate::critic::{pretrain_critic, Critic, CriticConfig, CriticMode, CriticSet};
use crate::data::{gen_bandit_dataset, gen_mode_bandit_dataset, gen_spread_dataset, Dataset, MixtureSpec};
use crate::diffusion::{train_independent_set, train_joint_model, train_sequential_set, DiffusionConfig, ScoreModel};
use crate::envs::{Env, SpreadLiteEnv, SpreadTier};
use crate::error::{Error, Result};
use crate::policy::{extract, Algorithm, ExtractionConfig, Pretrained};
use crate::rng::derive_seed;

pub const CONFIG_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GenSpec {
    Bandit { n: usize, mixture: MixtureSpec },
    ModeBandit { n_agents: usize, n: usize, mode_std: f64 },
    Spread { tier: SpreadTier, n_episodes: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DatasetSource {
    Path { path: PathBuf },
    Generate { spec: GenSpec, seed: u64 },
}

impl DatasetSource {
    pub fn load(&self, env: &Env) -> Result<Dataset> {
        match self {
            DatasetSource::Path { path } => Dataset::load(path),
            DatasetSource::Generate { spec, seed } => generate(spec, env, *seed),
        }
    }
}

pub fn generate(spec: &GenSpec, env: &Env, seed: u64) -> Result<Dataset> {
    match (spec, env) {
        (GenSpec::Bandit { n, mixture }, Env::Bandit(_)) => gen_bandit_dataset(mixture, *n, seed),
        (GenSpec::ModeBandit { n_agents, n, mode_std }, Env::ModeBandit(_)) => gen_mode_bandit_dataset(*n_agents, *n, *mode_std, seed),
        (GenSpec::Spread { tier, n_episodes }, Env::Spread(e)) => gen_spread_dataset(e, *tier, *n_episodes, seed),
        _ => Err(Error::config(format!("generation spec does not match environment `{}`", env.id()))),
    }
}

fn default_eval_episodes() -> usize {
    100
}

fn default_viz_points() -> usize {
    2000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub config_version: u32,
    pub env: Env,
    pub dataset: DatasetSource,
    pub algorithm: Algorithm,
    #[serde(default)]
    pub critic: CriticConfig,
    #[serde(default)]
    pub diffusion: DiffusionConfig,
    #[serde(default)]
    pub extraction: ExtractionConfig,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    #[serde(default = "default_eval_episodes")]
    pub eval_episodes: usize,
    /// `[s_random, s_expert]`; derived from generated tiers on SpreadLite when absent.
    #[serde(default)]
    pub references: Option<[f64; 2]>,
    #[serde(default = "default_viz_points")]
    pub viz_points: usize,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.config_version != CONFIG_VERSION {
            return Err(Error::config(format!(
                "config_version {} is not supported (expected {CONFIG_VERSION})",
                self.config_version
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds must be non-empty"));
        }
        if self.seeds.iter().collect::<BTreeSet<_>>().len() != self.seeds.len() {
            return Err(Error::config("seeds must be distinct"));
        }
        if let DatasetSource::Path { path } = &self.dataset {
            if !path.exists() {
                return Err(Error::config(format!("dataset path {} does not exist", path.display())));
            }
        }
        if self.eval_episodes == 0 {
            return Err(Error::config("eval_episodes must be >= 1"));
        }
        self.critic.validate()?;
        self.diffusion.validate()?;
        self.extraction_config().validate()
    }

    pub fn extraction_config(&self) -> ExtractionConfig {
        ExtractionConfig {
            algorithm: self.algorithm,
            ..self.extraction.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorRecord {
    pub phase: String,
    pub message: String,
    pub exit_code: i32,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_version: u32,
    pub algorithm: Algorithm,
    pub phases: Vec<String>,
    pub files: Vec<FileEntry>,
    pub error: Option<ErrorRecord>,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let p = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Re-hashes every listed file.
    pub fn verify(&self, dir: &Path) -> Result<()> {
        for f in &self.files {
            let p = dir.join(&f.path);
            let bytes = std::fs::read(&p).map_err(|e| Error::io(&p, e))?;
            if sha256_hex(&bytes) != f.sha256 {
                return Err(Error::Integrity(format!("{} does not match its manifest hash", f.path)));
            }
        }
        Ok(())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn list_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            list_files(root, &p, out)?;
        } else if p != root.join(MANIFEST_FILE) {
            out.push(p);
        }
    }
    Ok(())
}

fn hash_tree(root: &Path) -> Result<Vec<FileEntry>> {
    let mut files = Vec::new();
    list_files(root, root, &mut files)?;
    files
        .into_iter()
        .map(|p| {
            let bytes = std::fs::read(&p).map_err(|e| Error::io(&p, e))?;
            let rel = p.strip_prefix(root).unwrap_or(&p);
            Ok(FileEntry {
                path: rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/"),
                sha256: sha256_hex(&bytes),
                bytes: bytes.len() as u64,
            })
        })
        .collect()
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Expert and random tier mean returns on SpreadLite.
pub fn spread_references(env: &SpreadLiteEnv, n_episodes: usize, seed: u64) -> Result<(f64, f64)> {
    let random = gen_spread_dataset(env, SpreadTier::Random, n_episodes, derive_seed(seed, "ref/random"))?;
    let expert = gen_spread_dataset(env, SpreadTier::Expert, n_episodes, derive_seed(seed, "ref/expert"))?;
    Ok((random.meta().return_mean, expert.meta().return_mean))
}

/// Trains the critic and behaviour models `alg` needs.
pub fn pretrain_for(
    alg: Algorithm,
    dataset: &Dataset,
    critic: &CriticConfig,
    diffusion: &DiffusionConfig,
    order: Option<&[usize]>,
    seed: u64,
    checkpoint_dir: Option<&Path>,
) -> Result<Pretrained> {
    let mut out = Pretrained::default();
    let critic_dir = checkpoint_dir.map(|d| d.join("critic"));
    let critic_seed = derive_seed(seed, "critic");
    match alg {
        Algorithm::BrpoInd => {
            if let CriticSet::Independent(c) = pretrain_critic(dataset, critic, CriticMode::Independent, critic_seed, critic_dir.as_deref())
                .map_err(|e| e.in_phase("critic"))?
            {
                out.independent_critics = Some(c);
            }
        }
        _ => {
            if let CriticSet::Joint(c) = pretrain_critic(dataset, critic, CriticMode::Joint, critic_seed, critic_dir.as_deref())
                .map_err(|e| e.in_phase("critic"))?
            {
                out.joint_critic = Some(c);
            }
        }
    }
    let dseed = derive_seed(seed, "diffusion");
    let identity: Vec<usize> = (0..dataset.meta().n_agents).collect();
    let in_diffusion = |e: Error| e.in_phase("diffusion");
    match alg {
        Algorithm::Omsd => {
            out.sequential_models = Some(train_sequential_set(dataset, order.unwrap_or(&identity), diffusion, dseed).map_err(in_diffusion)?);
        }
        Algorithm::BrpoJal => out.joint_model = Some(train_joint_model(dataset, diffusion, dseed).map_err(in_diffusion)?),
        Algorithm::BrpoInd | Algorithm::BrpoIgo => {
            out.independent_models = Some(train_independent_set(dataset, diffusion, dseed).map_err(in_diffusion)?);
        }
    }
    Ok(out)
}

/// Writes whichever artifacts are present using the fixed file layout.
pub fn save_pretrained(p: &Pretrained, dir: &Path, seed: u64) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    if let Some(c) = &p.joint_critic {
        c.save(dir, "critic_joint", seed)?;
    }
    for (k, c) in p.independent_critics.iter().flatten().enumerate() {
        c.save(dir, &format!("critic_agent{k}"), seed)?;
    }
    let groups = [("sequential", &p.sequential_models), ("independent", &p.independent_models)];
    for (name, models) in groups {
        for (k, m) in models.iter().flatten().enumerate() {
            m.save(&dir.join(format!("diffusion_{name}{k}.ckpt")), seed)?;
        }
    }
    if let Some(m) = &p.joint_model {
        m.save(&dir.join("diffusion_joint.ckpt"), seed)?;
    }
    Ok(())
}

fn load_numbered<T>(name: impl Fn(usize) -> PathBuf, load: impl Fn(usize) -> Result<T>) -> Result<Option<Vec<T>>> {
    let mut out = Vec::new();
    while name(out.len()).exists() {
        out.push(load(out.len())?);
    }
    Ok((!out.is_empty()).then_some(out))
}

/// Loads every artifact found in `dir`; absent ones stay `None`.
pub fn load_pretrained(dir: &Path, critic: &CriticConfig) -> Result<Pretrained> {
    if !dir.is_dir() {
        return Err(Error::config(format!("artifact directory {} does not exist", dir.display())));
    }
    let joint_critic = if dir.join("critic_joint_q1.ckpt").exists() {
        Some(Critic::load(dir, "critic_joint", critic)?)
    } else {
        None
    };
    let independent_critics = load_numbered(
        |k| dir.join(format!("critic_agent{k}_q1.ckpt")),
        |k| Critic::load(dir, &format!("critic_agent{k}"), critic),
    )?;
    let models = |name: &str| {
        load_numbered(
            |k| dir.join(format!("diffusion_{name}{k}.ckpt")),
            |k| ScoreModel::load(&dir.join(format!("diffusion_{name}{k}.ckpt"))),
        )
    };
    let joint_path = dir.join("diffusion_joint.ckpt");
    Ok(Pretrained {
        joint_critic,
        independent_critics,
        sequential_models: models("sequential")?,
        independent_models: models("independent")?,
        joint_model: if joint_path.exists() { Some(ScoreModel::load(&joint_path)?) } else { None },
    })
}

/// Runs every phase and returns the run directory.
pub fn run_pipeline(config: &RunConfig) -> Result<PathBuf> {
    config.validate()?;
    let dir = config.output_dir.clone();
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut phases = Vec::new();
    let outcome = run_phases(config, &dir, &mut phases);
    let error = outcome.as_ref().err().map(|e| ErrorRecord {
        phase: match e {
            Error::Phase { phase, .. } => phase.clone(),
            _ => "setup".into(),
        },
        message: e.to_string(),
        exit_code: e.exit_code(),
    });
    let manifest = Manifest {
        config_version: CONFIG_VERSION,
        algorithm: config.algorithm,
        phases,
        files: hash_tree(&dir)?,
        error,
    };
    write(&dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    outcome.map(|()| dir)
}

fn run_phases(config: &RunConfig, dir: &Path, phases: &mut Vec<String>) -> Result<()> {
    let ph = |name: &'static str| move |e: Error| e.in_phase(name);
    write(&dir.join("config.json"), config.to_json()?.as_bytes())?;

    let dataset = config.dataset.load(&config.env).map_err(ph("data"))?;
    if dataset.env() != &config.env {
        return Err(Error::config(format!(
            "dataset was generated for `{}` but the config names `{}`",
            dataset.env().id(),
            config.env.id()
        ))
        .in_phase("data"));
    }
    dataset.save(&dir.join("dataset.omsd")).map_err(ph("data"))?;
    phases.push("data".into());

    let root = config.seeds[0];
    let xcfg = config.extraction_config();
    let pretrained = pretrain_for(
        config.algorithm,
        &dataset,
        &config.critic,
        &config.diffusion,
        xcfg.order.as_deref(),
        root,
        Some(dir),
    )?;
    save_pretrained(&pretrained, &dir.join("pretrained"), root).map_err(ph("pretrain"))?;
    phases.push("pretrain".into());

    let mut runs = Vec::new();
    for &seed in &config.seeds {
        let (actors, log) = extract(&dataset, &pretrained, &xcfg, seed).map_err(ph("extract"))?;
        let sdir = dir.join(format!("seed{seed}"));
        write(&sdir.join("trainlog.csv"), log.to_csv().as_bytes())?;
        actors.save(&sdir, "final", seed).map_err(ph("extract"))?;
        runs.push((seed, actors, log));
    }
    phases.push("extract".into());

    let references = match (config.references, &config.env) {
        (Some([r, e]), _) => Some((r, e)),
        (None, Env::Spread(env)) => Some(spread_references(env, config.eval_episodes, root).map_err(ph("evaluate"))?),
        _ => None,
    };
    let pairs: Vec<(u64, &_)> = runs.iter().map(|(s, a, _)| (*s, a)).collect();
    let report: ScoreReport = evaluate_actors(&pairs, &config.env, config.eval_episodes, references).map_err(ph("evaluate"))?;
    write(&dir.join("report.csv"), report.to_csv().as_bytes())?;
    write(&dir.join("report.json"), serde_json::to_string_pretty(&report)?.as_bytes())?;
    phases.push("evaluate".into());

    let probe = xcfg
        .probe_state
        .clone()
        .unwrap_or_else(|| dataset.states().row(0).to_vec());
    for (seed, _, log) in &runs {
        let viz = pca_policy_viz(&dataset, log, &probe, config.viz_points).map_err(ph("viz"))?;
        let sdir = dir.join(format!("seed{seed}"));
        write(&sdir.join("pca.svg"), viz.svg.as_bytes())?;
        write(&sdir.join("pca.csv"), viz.csv.as_bytes())?;
    }
    phases.push("viz".into());
    Ok(())
}
