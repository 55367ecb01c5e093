//! `iwr`: collect demonstrations, train, collect interventions, evaluate,
//! run the full protocol, cross-train, or host a teleop session.
//!
//! Every command reads one TOML config (`--config`, all keys optional) and
//! writes into `--out`:
//!
//! ```text
//! out/config.resolved   every setting actually used, seeds included
//! out/datasets/         JSON Lines trajectory files
//! out/checkpoints/      policy checkpoints
//! out/reports/          tables, CSV and JSON
//! ```
//!
//! Rerunning with `--config out/config.resolved` reproduces the reports.

use std::collections::BTreeMap;
use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use iwr_core::config::Config;
use iwr_core::datastore::{DatasetStore, IngestRule};
use iwr_core::env::ThreadEnv;
use iwr_core::methods::MethodRegistry;
use iwr_core::operator::{collect_full_demos, Expert, ScriptedGate};
use iwr_core::orchestrator::{collect_round, cross_train, evaluate, evaluate_checkpoints, run_experiment};
use iwr_core::policy::{load_checkpoint, save_checkpoint};
use iwr_core::report;
use iwr_core::trainer::train;
use iwr_core::Error;

#[derive(Parser)]
#[command(name = "iwr", version, about = "Intervention-weighted imitation learning on a grasp-and-thread task")]
struct Cli {
    /// TOML config; omitted keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "iwr-out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Collect full expert demonstrations into datasets/demos.jsonl.
    Demos {
        #[arg(long)]
        n: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed_base: u64,
    },
    /// Train a policy on a dataset file; checkpoints go to checkpoints/.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Run the policy with the scripted operator until the intervention
    /// quota is met; writes datasets/interventions.jsonl.
    Collect {
        #[arg(long)]
        policy: PathBuf,
        /// Human-labeled samples to collect.
        #[arg(long)]
        quota: usize,
        #[arg(long, default_value_t = 1)]
        round: u32,
        #[arg(long, default_value_t = 0)]
        seed_base: u64,
    },
    /// Success rate of a checkpoint over the evaluation seeds.
    Eval {
        #[arg(long)]
        policy: PathBuf,
        #[arg(long)]
        rollouts: Option<usize>,
    },
    /// Full protocol for every configured seed and method.
    Experiment {
        /// Comma-separated experiment seeds.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long, value_delimiter = ',')]
        methods: Option<Vec<String>>,
    },
    /// Train each method on each dataset and tabulate success.
    Cross {
        /// `name=path` pairs, one per collected dataset.
        #[arg(long = "data", value_parser = parse_named, required = true)]
        datasets: Vec<(String, PathBuf)>,
        #[arg(long, value_delimiter = ',', default_value = "hg-dagger,iwr")]
        trainers: Vec<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// WebSocket teleop service.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: SocketAddr,
        #[arg(long)]
        policy_dir: PathBuf,
        /// Defaults to datasets/teleop.jsonl under --out.
        #[arg(long)]
        dataset_out: Option<PathBuf>,
        #[arg(long, default_value_t = 20.0)]
        tick_hz: f64,
        /// Browser client files to serve at `/`.
        #[arg(long)]
        static_dir: Option<PathBuf>,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
}

fn parse_named(s: &str) -> Result<(String, PathBuf), String> {
    let (name, path) = s.split_once('=').ok_or_else(|| format!("expected name=path, got `{s}`"))?;
    Ok((name.to_string(), PathBuf::from(path)))
}

#[derive(Debug)]
enum CliError {
    Core(Error),
    Teleop(iwr_teleop::TeleopError),
    Io(PathBuf, std::io::Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    fn category(&self) -> (&'static str, u8) {
        match self {
            CliError::Core(Error::ConfigInvalid(_) | Error::UnknownMethod(_)) => ("config", 3),
            CliError::Core(Error::Io { .. }) | CliError::Io(..) => ("io", 4),
            CliError::Core(
                Error::SchemaViolation { .. }
                | Error::CorruptCheckpoint(_)
                | Error::TaskMismatch { .. }
                | Error::ReplayMismatch { .. }
                | Error::EmptyBucket(_)
                | Error::EmptyStore
                | Error::EmptyInterventionBucket,
            ) => ("data", 5),
            CliError::Teleop(_) => ("teleop", 7),
            CliError::Core(_) => ("run", 6),
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Core(e) => e.fmt(f),
            CliError::Teleop(e) => e.fmt(f),
            CliError::Io(p, e) => write!(f, "{}: {e}", p.display()),
        }
    }
}

struct Out {
    root: PathBuf,
}

impl Out {
    fn create(root: &Path, cfg: &Config) -> Result<Out, CliError> {
        for sub in ["datasets", "checkpoints", "reports"] {
            let p = root.join(sub);
            fs::create_dir_all(&p).map_err(|e| CliError::Io(p, e))?;
        }
        let out = Out { root: root.to_path_buf() };
        out.write("config.resolved", &cfg.to_toml())?;
        Ok(out)
    }

    /// `root/rel`, creating its parent directory.
    fn path(&self, rel: &str) -> Result<PathBuf, CliError> {
        let p = self.root.join(rel);
        if let Some(dir) = p.parent() {
            fs::create_dir_all(dir).map_err(|e| CliError::Io(dir.to_path_buf(), e))?;
        }
        Ok(p)
    }

    fn write(&self, rel: &str, text: &str) -> Result<(), CliError> {
        let p = self.path(rel)?;
        fs::write(&p, text).map_err(|e| CliError::Io(p, e))
    }

    fn json(&self, rel: &str, value: &impl serde::Serialize) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(value).expect("reports serialize");
        text.push('\n');
        self.write(rel, &text)
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    let registry = MethodRegistry::builtin();

    match cli.command {
        Command::Demos { n, seed_base } => {
            if let Some(n) = n {
                cfg.experiment.n_initial_demos = n;
            }
            cfg.validate(&registry)?;
            let out = Out::create(&cli.out, &cfg)?;
            let mut env = ThreadEnv::new(cfg.task.clone())?;
            let batch = collect_full_demos(
                cfg.experiment.n_initial_demos,
                &Expert::new(cfg.expert.clone()),
                &mut env,
                seed_base,
                0,
                &cfg.experiment.operator_id,
            )?;
            let mut store = DatasetStore::new(cfg.task.name.clone());
            store.ingest_all(&batch.trajectories, IngestRule::AllHuman);
            store.save(out.path("datasets/demos.jsonl")?)?;
            println!(
                "{} demonstrations, {} samples, {} attempts (env seeds {}..{})",
                batch.trajectories.len(),
                store.len(),
                batch.attempts,
                seed_base,
                batch.next_seed
            );
        }
        Command::Train { data, train: t } => {
            if let Some(m) = t.method {
                cfg.train.method = m;
            }
            if let Some(s) = t.seed {
                cfg.train.seed = s;
            }
            if let Some(e) = t.epochs {
                cfg.train.epochs = e;
            }
            cfg.validate(&registry)?;
            let out = Out::create(&cli.out, &cfg)?;
            let store = DatasetStore::load(&data)?;
            let set = train(&store, &cfg.train, &registry)?;
            let e = &cfg.experiment;
            let scores = evaluate_checkpoints(&set, &cfg.task, e.eval_rollouts, e.eval_seed(0))?;
            for (c, s) in set.checkpoints.iter().zip(&scores) {
                save_checkpoint(&c.params, out.path(&format!("checkpoints/epoch_{:05}.ckpt", c.epoch))?)?;
                println!("epoch {:>5}  loss {:.6}  success {:.3}", c.epoch, c.training_loss, s.success);
            }
            save_checkpoint(&set.last().params, out.path("checkpoints/final.ckpt")?)?;
            out.json("reports/train.json", &scores)?;
        }
        Command::Collect {
            policy,
            quota,
            round,
            seed_base,
        } => {
            cfg.validate(&registry)?;
            let out = Out::create(&cli.out, &cfg)?;
            let params = load_checkpoint(&policy)?;
            let mut env = ThreadEnv::new(cfg.task.clone())?;
            let mut gate = ScriptedGate::new(cfg.gate.clone());
            let c = collect_round(
                &params,
                &Expert::new(cfg.expert.clone()),
                &mut gate,
                &mut env,
                quota,
                |k| seed_base + k,
                round,
                &cfg.experiment.operator_id,
            )?;
            let mut store = DatasetStore::new(cfg.task.name.clone());
            store.ingest_all(&c.trajectories, IngestRule::Split);
            store.save(out.path("datasets/interventions.jsonl")?)?;
            println!(
                "{} episodes, {} intervention samples, {} policy samples",
                c.trajectories.len(),
                store.n_interventions(),
                store.n_on_policy()
            );
        }
        Command::Eval { policy, rollouts } => {
            if let Some(n) = rollouts {
                cfg.experiment.eval_rollouts = n;
            }
            cfg.validate(&registry)?;
            let out = Out::create(&cli.out, &cfg)?;
            let params = load_checkpoint(&policy)?;
            let e = &cfg.experiment;
            let rate = evaluate(&params, &cfg.task, e.eval_rollouts, e.eval_seed(0))?;
            out.write("reports/eval.txt", &format!("{rate}\n"))?;
            println!("{rate}");
        }
        Command::Experiment { seeds, methods } => {
            if let Some(s) = seeds {
                cfg.experiment.seeds = s;
            }
            if let Some(m) = methods {
                cfg.experiment.methods = m;
            }
            cfg.validate(&registry)?;
            let out = Out::create(&cli.out, &cfg)?;
            let outcome = run_experiment(&cfg, &registry)?;
            for s in &outcome.seeds {
                s.initial.save(out.path(&format!("datasets/seed{}/initial.jsonl", s.seed))?)?;
                save_checkpoint(&s.base_policy, out.path(&format!("checkpoints/seed{}/base.ckpt", s.seed))?)?;
                for (name, m) in &s.methods {
                    m.collected.save(out.path(&format!("datasets/seed{}/{name}.jsonl", s.seed))?)?;
                    save_checkpoint(&m.final_policy, out.path(&format!("checkpoints/seed{}/{name}.ckpt", s.seed))?)?;
                }
            }
            let table = report::text_table(&outcome.reports);
            out.write("reports/summary.txt", &table)?;
            out.write("reports/summary.csv", &report::to_csv(&outcome.reports))?;
            out.json("reports/experiment.json", &outcome.reports)?;
            print!("{table}");
        }
        Command::Cross {
            datasets,
            trainers,
            seed,
        } => {
            cfg.validate(&registry)?;
            let out = Out::create(&cli.out, &cfg)?;
            let mut stores = BTreeMap::new();
            for (name, path) in datasets {
                stores.insert(name, DatasetStore::load(&path)?);
            }
            let cells = cross_train(&cfg, &registry, &stores, &trainers, seed)?;
            let table = report::cross_table(&cells);
            out.write("reports/cross.txt", &table)?;
            out.json("reports/cross.json", &cells)?;
            print!("{table}");
        }
        Command::Serve {
            bind,
            policy_dir,
            dataset_out,
            tick_hz,
            static_dir,
        } => {
            cfg.validate(&registry)?;
            let out = Out::create(&cli.out, &cfg)?;
            let mut sc = iwr_teleop::ServeConfig::new(
                bind,
                policy_dir,
                match dataset_out {
                    Some(p) => p,
                    None => out.path("datasets/teleop.jsonl")?,
                },
            );
            sc.tick_hz = tick_hz;
            sc.static_dir = static_dir;
            sc.task = cfg.task.clone();
            let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::Io(PathBuf::from("<runtime>"), e))?;
            rt.block_on(async {
                let handle = iwr_teleop::serve(sc).await?;
                println!("listening on ws://{}/ws", handle.addr);
                tokio::select! {
                    r = handle.wait() => r,
                    _ = tokio::signal::ctrl_c() => Ok(()),
                }
            })
            .map_err(CliError::Teleop)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (category, code) = e.category();
            eprintln!("error [{category}]: {e}");
            ExitCode::from(code)
        }
    }
}
