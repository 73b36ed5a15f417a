use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use segcap::commands::{cmd_ablate, cmd_eval, cmd_gen, cmd_gradcheck, cmd_train, thread_pool};
use segcap::config::{parse_variant, RunConfig};
use segcap::{Error, Result};

#[derive(Parser)]
#[command(name = "segcap", version, about = "Prompt-guided video segmentation and captioning on synthetic clips")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Overrides {
    /// JSON run configuration; omitted fields keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for initialisation and sample order.
    #[arg(long)]
    seed: Option<u64>,
    /// Encoder variant: full, spa-only, tem-only or neither.
    #[arg(long)]
    variant: Option<String>,
    /// Weight of the contrastive term.
    #[arg(long)]
    lambda: Option<f64>,
    /// Use the contrastive loss with the positive term in the denominator.
    #[arg(long)]
    include_positive_in_denominator: bool,
}

impl Overrides {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg = cfg.with_seed(seed);
            cfg.seeds = vec![seed];
        }
        if let Some(v) = &self.variant {
            cfg.model.variant = parse_variant(v)?;
        }
        if let Some(l) = self.lambda {
            cfg.model.lambda = l;
        }
        if self.include_positive_in_denominator {
            cfg.model.include_positive_in_denominator = true;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset.
    Gen {
        #[command(flatten)]
        opts: Overrides,
        /// Dataset directory to create.
        #[arg(long)]
        out: PathBuf,
        /// Replace a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Train on the dataset's train split.
    Train {
        #[command(flatten)]
        opts: Overrides,
        #[arg(long)]
        dataset: PathBuf,
        /// Run directory for the loss log and checkpoint.
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Score a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value = "eval")]
        split: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Train and score the component and λ ablation grid.
    Ablate {
        #[command(flatten)]
        opts: Overrides,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Check every differentiable op and loss against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the report as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { opts, out, force } => {
            let cfg = opts.resolve()?;
            let m = cmd_gen(&cfg, &out, force)?;
            println!("wrote {} train and {} eval videos to {}", m.train.len(), m.eval.len(), out.display());
        }
        Command::Train {
            opts,
            dataset,
            out,
            resume,
            force,
        } => {
            let cfg = opts.resolve()?;
            let s = cmd_train(&cfg, &dataset, &out, resume.as_deref(), force)?;
            println!("trained {} steps; checkpoint {}", s.steps, s.checkpoint.display());
        }
        Command::Eval {
            checkpoint,
            dataset,
            split,
            out,
            force,
        } => {
            let m = cmd_eval(&checkpoint, &dataset, &split, &out, force)?;
            for r in &m.metrics {
                println!("{:<13} {:.4}", r.metric, r.value);
            }
        }
        Command::Ablate {
            opts,
            dataset,
            out,
            force,
        } => {
            let cfg = opts.resolve()?;
            let r = cmd_ablate(&cfg, &dataset, &out, force)?;
            println!("{} ablation rows written to {}", r.rows.len(), out.join("ablation.csv").display());
        }
        Command::Gradcheck { seed, out, inject_fault } => {
            let report = cmd_gradcheck(inject_fault, seed);
            for c in &report.checks {
                let status = if c.passed { "ok  " } else { "FAIL" };
                println!("{status} {:<26} {:?} max rel err {:.3e} over {} points", c.name, c.kind, c.max_rel_err, c.points);
            }
            if let Some(p) = out {
                segcap::formats::write_json(&p, &report)?;
            }
            if !report.passed() {
                let names: Vec<_> = report.failures().iter().map(|c| c.name.clone()).collect();
                return Err(Error::GradCheck(names.join(", ")));
            }
            println!("all {} checks passed (tolerance {:e})", report.checks.len(), report.tolerance);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let pool = match thread_pool() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match pool.install(|| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
