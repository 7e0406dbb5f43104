use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mixloc::scenegen::{export_dataset, make_world, Split};
use mixloc::trainer::{
    ablate, evaluate, export_maps, gradcheck_suite, train_with_log, Checkpoint, EvalConfig, LogEvent, LossTerm,
    TrainConfig,
};
use mixloc::walk::LossKind;
use mixloc::Error;

#[derive(Parser)]
#[command(name = "mixloc", version, about = "Localize sound sources in synthetic audio-visual mixtures")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON training config; omitted fields take their defaults.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the dataset described by a config to a directory.
    Gen {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Write at most this many examples per split.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Train and write the final checkpoint to OUT/final.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Train with this loss alone instead of the configured ones.
        #[arg(long)]
        loss: Option<String>,
    },
    /// Evaluate a checkpoint; writes eval_<split>.csv and .json.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Report directory, the checkpoint directory by default.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        max_examples: Option<usize>,
    },
    /// Write localization maps and masks as PGM and raw arrays.
    Export {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value_t = 10)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train each ablation loss on shared seeds and write a comparison CSV.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        max_examples: Option<usize>,
    },
    /// Compare reverse-mode gradients of every loss against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 10)]
        settings: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
}

enum Failure {
    Usage(String),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

fn load_config(args: &ConfigArgs) -> Result<TrainConfig, Failure> {
    let text = fs::read_to_string(&args.config)
        .map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", args.config.display())))?;
    let mut cfg: TrainConfig = serde_json::from_str(&text)
        .map_err(|e| Failure::Usage(format!("invalid config {}: {e}", args.config.display())))?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate().map_err(|e| Failure::Usage(format!("invalid config {}: {e}", args.config.display())))?;
    Ok(cfg)
}

fn parse_split(s: &str) -> Result<Split, Failure> {
    Split::parse(s).map_err(|e| Failure::Usage(e.to_string()))
}

fn write_file(path: &Path, contents: &[u8]) -> Result<(), Failure> {
    fs::write(path, contents).map_err(|e| Failure::Run(Error::Io { path: path.to_path_buf(), source: e }))
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Gen { cfg, out, limit } => {
            let cfg = load_config(&cfg)?;
            let world = make_world(&cfg.world)?;
            let mut manifest = cfg.manifest();
            if let Some(n) = limit {
                for entries in manifest.splits.values_mut() {
                    entries.truncate(n);
                }
            }
            export_dataset(&world, &manifest, &out)?;
            eprintln!("wrote dataset to {}", out.display());
        }
        Command::Train { cfg, out, loss } => {
            let mut cfg = load_config(&cfg)?;
            if let Some(name) = loss {
                let kind = LossKind::parse(&name).map_err(|e| Failure::Usage(e.to_string()))?;
                cfg.losses = LossTerm::single(kind);
                cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
            }
            fs::create_dir_all(&out).map_err(|e| Error::Io { path: out.clone(), source: e })?;
            let total = cfg.total_steps() as u64;
            let mut log = String::from("step,loss\n");
            let ck = train_with_log(&cfg, |ev| match ev {
                LogEvent::Step { step, loss } => {
                    log.push_str(&format!("{step},{loss}\n"));
                    if step % 100 == 0 || *step == total {
                        eprintln!("step {step}/{total} loss {loss:.6}");
                    }
                }
                LogEvent::Eval { step, metrics } => {
                    let parts: Vec<String> = metrics.iter().map(|(n, v)| format!("{n}={v:.4}")).collect();
                    eprintln!("step {step} val {}", parts.join(" "));
                }
            })?;
            write_file(&out.join("train_log.csv"), log.as_bytes())?;
            let dir = out.join("final");
            ck.save(&dir)?;
            eprintln!("saved {}", dir.display());
        }
        Command::Eval { ckpt, split, out, max_examples } => {
            let split = parse_split(&split)?;
            let ck = Checkpoint::load(&ckpt)?;
            let cfg = EvalConfig { max_examples, ..EvalConfig::default() };
            let report = evaluate(&ck, split, &cfg)?;
            let dir = out.unwrap_or(ckpt);
            fs::create_dir_all(&dir).map_err(|e| Error::Io { path: dir.clone(), source: e })?;
            let name = format!("eval_{}", split.name());
            report.write(&dir.join(format!("{name}.csv")), &dir.join(format!("{name}.json")))?;
            print!("{}", report.to_csv());
        }
        Command::Export { ckpt, split, count, out } => {
            let split = parse_split(&split)?;
            let ck = Checkpoint::load(&ckpt)?;
            let files = export_maps(&ck, split, count, &out)?;
            eprintln!("wrote {} files to {}", files.len(), out.display());
        }
        Command::Ablate { config, seeds, out, max_examples } => {
            let cfg = load_config(&ConfigArgs { config, seed: None })?;
            let eval = EvalConfig { max_examples, ..EvalConfig::default() };
            let result = ablate(&cfg, &seeds, &eval)?;
            if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent).map_err(|e| Error::Io { path: parent.to_path_buf(), source: e })?;
            }
            write_file(&out, result.to_csv().as_bytes())?;
            print!("{}", result.to_csv());
        }
        Command::Gradcheck { settings, seed, tol } => {
            let rows = gradcheck_suite(settings, seed)?;
            let mut stdout = std::io::stdout().lock();
            let _ = writeln!(stdout, "loss,setting,seed,rel_error,margin");
            let mut worst: f64 = 0.0;
            for r in &rows {
                let _ = writeln!(stdout, "{},{},{},{:e},{:e}", r.loss, r.setting, r.seed, r.rel_error, r.margin);
                worst = worst.max(r.rel_error);
            }
            if !(worst < tol) {
                return Err(Failure::Run(Error::Domain(format!(
                    "worst relative gradient error {worst:e} exceeds {tol:e}"
                ))));
            }
            eprintln!("all {} checks below {tol:e} (worst {worst:e})", rows.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
