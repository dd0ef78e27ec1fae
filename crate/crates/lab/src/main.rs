use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use kase_core::gradcheck::{grad_check, random_case, DEFAULT_STEP};
use kase_core::objective::{LossPlan, Term};
use kase_core::{ClassWeights, WeightFormula};
use kase_lab::experiment::{self, ExperimentSpec, MethodRun};
use kase_lab::LabError;

#[derive(Parser)]
#[command(name = "kase", version, about = "Open-set domain adaptation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train, evaluate and export every method × seed pair.
    Run(RunArgs),
    /// Compare analytic and finite-difference gradients on random models.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        models: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Formula {
    Corrected,
    Literal,
}

#[derive(clap::Args)]
struct RunArgs {
    /// JSON experiment file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Method name, optionally with `:no-reweight`. Repeatable.
    #[arg(long = "method")]
    methods: Vec<MethodRun>,
    /// Repeatable.
    #[arg(long = "seed")]
    seeds: Vec<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    weight_formula: Option<Formula>,
    #[arg(long)]
    no_reweight: bool,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

fn build_spec(args: &RunArgs) -> Result<ExperimentSpec, LabError> {
    let mut spec = match &args.config {
        Some(path) => ExperimentSpec::load(path)?,
        None => ExperimentSpec::default(),
    };
    if !args.methods.is_empty() {
        spec.methods = args.methods.clone();
    }
    if !args.seeds.is_empty() {
        spec.seeds = args.seeds.clone();
    }
    if let Some(out) = &args.out {
        spec.out = out.clone();
    }
    if let Some(f) = args.weight_formula {
        spec.train.weight_formula = match f {
            Formula::Corrected => WeightFormula::Corrected,
            Formula::Literal => WeightFormula::Literal,
        };
    }
    if args.no_reweight {
        spec.train.reweight = false;
    }
    if let Some(e) = args.epochs {
        spec.train.epochs = e;
    }
    spec.validate()?;
    Ok(spec)
}

fn run(args: &RunArgs) -> ExitCode {
    let spec = match build_spec(args) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    match experiment::run(&spec, args.jobs) {
        Ok(outcome) => {
            for m in &outcome.summary.methods {
                let median = m.median.map_or("-".to_string(), |v| format!("{:.4}", v));
                println!("{:<36} median mAcc {median}", m.method);
            }
            for f in &outcome.summary.failures {
                eprintln!("failed: {f}");
            }
            if outcome.all_ok() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e @ LabError::Config(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn gradcheck(models: u64) -> ExitCode {
    let plan = LossPlan::kase(10.0, 0.1, WeightFormula::Corrected);
    let mut worst = 0.0f64;
    for seed in 0..models {
        let sizes = [2 + seed as usize % 3, 8, 6, 3 + seed as usize % 3];
        let (model, batch) = match random_case(seed, &sizes) {
            Ok(c) => c,
            Err(e) => {
                eprintln!("error: {e}");
                return ExitCode::from(1);
            }
        };
        let weights = ClassWeights::uniform(sizes[3]);
        for term in Term::ALL {
            match grad_check(&model, &batch, &plan, &weights, term, DEFAULT_STEP) {
                Ok(r) => worst = worst.max(r.max_rel_error),
                Err(e) => {
                    eprintln!("model {seed} {term:?}: {e}");
                    return ExitCode::from(1);
                }
            }
        }
    }
    println!("{models} models, max relative error {worst:.3e}");
    if worst < 1e-4 {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run(args) => run(&args),
        Command::Gradcheck { models } => gradcheck(models),
    }
}
