use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use dcl_core::cl::Method;
use dcl_core::harness::{self, ExperimentConfig, RunLog};
use dcl_core::metrics::EvalMode;

#[derive(Parser)]
#[command(name = "dcl", about = "Decoder-side continual learning experiments on synthetic languages")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (JSON). Defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the root seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Restricts the methods run, e.g. `--method ER,AGEM_M`.
    #[arg(long = "method", value_delimiter = ',')]
    methods: Vec<Method>,
    /// Comma-separated evaluation modes: aware, agnostic.
    #[arg(long, value_delimiter = ',')]
    modes: Vec<EvalMode>,
}

#[derive(Subcommand)]
enum Command {
    /// Writes the synthetic datasets, sidecars and base vocabulary.
    GenerateData(Common),
    /// Pre-trains the base model on the old languages.
    Pretrain(Common),
    /// Adapts to one new language with every method.
    RunPair(Common),
    /// Adapts to several new languages in order.
    RunSequential(Common),
    /// Runs the four ablation families.
    Ablate(Common),
    /// Grid search on validation AWER, then test on the winners.
    Sweep(Common),
    /// Prints a saved run as markdown tables.
    Report {
        /// Run directory containing runlog.json.
        #[arg(long)]
        out: PathBuf,
    },
}

impl Common {
    fn load(&self) -> anyhow::Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if !self.methods.is_empty() {
            cfg.adapt.methods = self.methods.clone();
        }
        if !self.modes.is_empty() {
            cfg.eval.modes = self.modes.clone();
        }
        if let Some(o) = &self.out {
            cfg.output_dir = Some(o.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn out_dir(cfg: &ExperimentConfig) -> anyhow::Result<PathBuf> {
    match &cfg.output_dir {
        Some(p) => Ok(p.clone()),
        None => bail!("no output directory: pass --out or set output_dir"),
    }
}

fn finish(mut log: RunLog, dir: &Path) -> anyhow::Result<()> {
    harness::write_run_outputs(&mut log, dir)?;
    if let Some(w) = &log.pretrain.warning {
        eprintln!("warning: {w}");
    }
    print!("{}", harness::report(dir)?);
    eprintln!("wrote {} ({:.1}s)", dir.display(), log.wall_clock_secs);
    Ok(())
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::GenerateData(c) => {
            let cfg = c.load()?;
            for p in harness::generate_data(&cfg, &out_dir(&cfg)?)? {
                println!("{}", p.display());
            }
        }
        Command::Pretrain(c) => {
            let cfg = c.load()?;
            let dir = out_dir(&cfg)?;
            let s = harness::pretrain_to_dir(&cfg, &dir)?;
            println!(
                "epochs {} mastered {} sha256 {}",
                s.epochs_run, s.mastered, s.checkpoint_sha256
            );
            for (l, w) in &s.val_wer {
                println!("{l} val WER {:.4}", w);
            }
            if let Some(w) = s.warning {
                eprintln!("warning: {w}");
            }
        }
        Command::RunPair(c) => {
            let cfg = c.load()?;
            finish(harness::run_pair_setting(&cfg)?, &out_dir(&cfg)?)?;
        }
        Command::RunSequential(c) => {
            let cfg = c.load()?;
            finish(harness::run_sequential_setting(&cfg)?, &out_dir(&cfg)?)?;
        }
        Command::Ablate(c) => {
            let cfg = c.load()?;
            finish(harness::run_ablation(&cfg)?, &out_dir(&cfg)?)?;
        }
        Command::Sweep(c) => {
            let cfg = c.load()?;
            finish(harness::sweep(&cfg)?, &out_dir(&cfg)?)?;
        }
        Command::Report { out } => print!("{}", harness::report(&out)?),
    }
    Ok(())
}
