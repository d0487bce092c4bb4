use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use omsd_core::analysis::{
    evaluate_actors, pca_policy_viz, tv_factorized_analytic, tv_factorized_empirical, tv_factorized_enumerate,
    MAX_ENUMERATION_AGENTS,
};
use omsd_core::critic::{pretrain_critic, CriticConfig, CriticMode, CriticSet};
use omsd_core::data::{gen_mode_bandit_dataset, Dataset, MixtureSpec};
use omsd_core::diffusion::{train_independent_set, train_joint_model, train_sequential_set, DiffusionConfig};
use omsd_core::envs::{Env, SpreadTier};
use omsd_core::error::{Error, Result};
use omsd_core::pipeline::{generate, load_pretrained, run_pipeline, save_pretrained, GenSpec, RunConfig};
use omsd_core::policy::{extract, ActorSet, Algorithm, ExtractionConfig, Pretrained, TrainLog};
use serde::de::DeserializeOwned;

#[derive(Parser)]
#[command(name = "omsd", version, about = "Offline cooperative multi-agent policy extraction with diffusion behaviour scores")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum EnvKind {
    Bandit,
    ModeBandit,
    Spread,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelKind {
    Sequential,
    Independent,
    Joint,
}

#[derive(Subcommand)]
enum Command {
    /// Generate an offline dataset file.
    GenData {
        #[arg(long, value_enum)]
        env: EnvKind,
        /// Transitions (bandits) or episodes (spread).
        #[arg(long, default_value_t = 1_000_000)]
        n: usize,
        #[arg(long, default_value_t = 2)]
        n_agents: usize,
        #[arg(long, default_value_t = 0.0)]
        mode_std: f64,
        #[arg(long, default_value = "medium")]
        tier: SpreadTier,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain IQL critics.
    TrainCritic {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        independent: bool,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain diffusion behaviour models.
    TrainDiffusion {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "sequential")]
        kind: ModelKind,
        /// Comma-separated agent order for sequential models.
        #[arg(long, value_delimiter = ',')]
        order: Option<Vec<usize>>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Extract deterministic actors from pretrained artifacts.
    Extract {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        artifacts: PathBuf,
        #[arg(long, default_value = "omsd")]
        algorithm: Algorithm,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        critic_config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate saved actors with decentralized execution.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        actors: PathBuf,
        #[arg(long, default_value_t = 100)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check the factorization total-variation result.
    VerifyProp1 {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        empirical: bool,
        #[arg(long, default_value_t = 1_000_000)]
        samples: usize,
        #[arg(long, default_value_t = 2)]
        bins: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// PCA plot of dataset and logged policy actions.
    Viz {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        log: PathBuf,
        #[arg(long, default_value_t = 2000)]
        points: usize,
        /// Output prefix; writes `<out>.svg` and `<out>.csv`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every phase from a JSON config.
    Pipeline {
        #[arg(long)]
        config: PathBuf,
    },
}

fn read_json<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            Ok(serde_json::from_str(&text)?)
        }
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { env, n, n_agents, mode_std, tier, seed, out } => {
            let ds = match env {
                EnvKind::Bandit => generate(&GenSpec::Bandit { n, mixture: MixtureSpec::bandit() }, &Env::bandit(), seed)?,
                EnvKind::ModeBandit => gen_mode_bandit_dataset(n_agents, n, mode_std, seed)?,
                EnvKind::Spread => generate(&GenSpec::Spread { tier, n_episodes: n }, &Env::spread(), seed)?,
            };
            ds.save(&out)?;
            println!("{}", serde_json::to_string(ds.meta())?);
        }
        Command::TrainCritic { data, independent, config, seed, out } => {
            let ds = Dataset::load(&data)?;
            let cfg: CriticConfig = read_json(config.as_deref())?;
            let mode = if independent { CriticMode::Independent } else { CriticMode::Joint };
            let mut p = Pretrained::default();
            match pretrain_critic(&ds, &cfg, mode, seed, Some(&out.join("epochs")))? {
                CriticSet::Joint(c) => p.joint_critic = Some(c),
                CriticSet::Independent(c) => p.independent_critics = Some(c),
            }
            save_pretrained(&p, &out, seed)?;
        }
        Command::TrainDiffusion { data, kind, order, config, seed, out } => {
            let ds = Dataset::load(&data)?;
            let cfg: DiffusionConfig = read_json(config.as_deref())?;
            let mut p = Pretrained::default();
            match kind {
                ModelKind::Sequential => {
                    let order = order.unwrap_or_else(|| (0..ds.meta().n_agents).collect());
                    p.sequential_models = Some(train_sequential_set(&ds, &order, &cfg, seed)?);
                }
                ModelKind::Independent => p.independent_models = Some(train_independent_set(&ds, &cfg, seed)?),
                ModelKind::Joint => p.joint_model = Some(train_joint_model(&ds, &cfg, seed)?),
            }
            save_pretrained(&p, &out, seed)?;
        }
        Command::Extract { data, artifacts, algorithm, beta, config, critic_config, seed, out } => {
            let ds = Dataset::load(&data)?;
            let critic: CriticConfig = read_json(critic_config.as_deref())?;
            let mut cfg: ExtractionConfig = read_json(config.as_deref())?;
            cfg.algorithm = algorithm;
            if let Some(b) = beta {
                cfg.beta = b;
            }
            let pretrained = load_pretrained(&artifacts, &critic)?;
            let (actors, log) = extract(&ds, &pretrained, &cfg, seed)?;
            actors.save(&out, "final", seed)?;
            log.save_csv(&out.join("trainlog.csv"))?;
            if let Some((m, s)) = log.final_eval() {
                println!("final eval {m} +- {s}");
            }
        }
        Command::Evaluate { data, actors, episodes, seed, out } => {
            let ds = Dataset::load(&data)?;
            let n_blocks = (0..).take_while(|k| actors.join(format!("final_actor{k}.ckpt")).exists()).count();
            if n_blocks == 0 {
                return Err(Error::config(format!("no actor checkpoints in {}", actors.display())));
            }
            let set = ActorSet::load(&actors, "final", n_blocks)?;
            let report = evaluate_actors(&[(seed, &set)], ds.env(), episodes, None)?;
            match out {
                Some(p) => write_file(&p, &report.to_csv())?,
                None => print!("{}", report.to_csv()),
            }
        }
        Command::VerifyProp1 { n, empirical, samples, bins, seed } => {
            println!("n,analytic,enumerated,empirical");
            let analytic = tv_factorized_analytic(n)?;
            let enumerated = if n <= MAX_ENUMERATION_AGENTS { Some(tv_factorized_enumerate(n)?) } else { None };
            let emp = if empirical {
                let ds = gen_mode_bandit_dataset(n, samples, 0.0, seed)?;
                Some(tv_factorized_empirical(&ds, bins)?.empirical_tv)
            } else {
                None
            };
            let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
            println!("{n},{analytic},{},{}", opt(enumerated), opt(emp));
        }
        Command::Viz { data, log, points, out } => {
            let ds = Dataset::load(&data)?;
            let text = std::fs::read_to_string(&log).map_err(|e| Error::io(&log, e))?;
            let log = TrainLog::from_csv(&text)?;
            let probe = ds.states().row(0).to_vec();
            let viz = pca_policy_viz(&ds, &log, &probe, points)?;
            write_file(&out.with_extension("svg"), &viz.svg)?;
            write_file(&out.with_extension("csv"), &viz.csv)?;
        }
        Command::Pipeline { config } => {
            let cfg = RunConfig::load(&config)?;
            let dir = run_pipeline(&cfg)?;
            println!("{}", dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
