//! `hies`: train, score, prune, verify, diagnose and sweep from the command line.

mod commands;
mod verify;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use hies_core::pruning::Criterion;
use hies_core::scoring::NormScope;

#[derive(Parser, Debug)]
#[command(name = "hies", version, about = "Attention-head pruning with importance and entropy scores")]
struct Cli {
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model for one seed of an experiment config.
    Train(TrainArgs),
    /// Compute HIS, AE and HIES on the calibration split.
    Score(ScoreArgs),
    /// Build a pruning mask from a score file.
    Prune(PruneArgs),
    /// Run a numerical verification suite.
    Verify(VerifyArgs),
    /// Gradient orthogonality statistics per head.
    Diagnose(DiagnoseArgs),
    /// Accuracy and stability of every criterion across pruning ratios.
    Sweep(SweepArgs),
    /// wAUC of HIES across an alpha grid.
    AlphaSweep(SweepArgs),
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Experiment config (JSON); the built-in desk needle config when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed override; HIES_SEED is used when this flag is absent.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; nothing is written elsewhere.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct ScoreArgs {
    #[command(flatten)]
    common: Common,
    /// Checkpoint written by `train`.
    #[arg(long)]
    model: PathBuf,
    /// HIES mixing weight in [0, 1).
    #[arg(long, default_value_t = 0.5)]
    alpha: f64,
    /// Min-max normalization over all heads or within each layer.
    #[arg(long, value_enum, default_value_t = Scope::Global)]
    scope: Scope,
}

#[derive(Args, Debug)]
struct PruneArgs {
    /// Score file (JSONL with at least layer, head, his, ae).
    #[arg(long)]
    scores: PathBuf,
    /// Fraction of heads to prune.
    #[arg(long)]
    ratio: f64,
    /// Head-selection criterion.
    #[arg(long, value_enum, default_value_t = CriterionArg::Hies)]
    criterion: CriterionArg,
    /// HIES mixing weight in [0, 1).
    #[arg(long, default_value_t = 0.5)]
    alpha: f64,
    /// Min-max normalization over all heads or within each layer.
    #[arg(long, value_enum, default_value_t = Scope::Global)]
    scope: Scope,
    /// Checkpoint, required by the l2 criterion.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Seed for the random criterion; HIES_SEED is used when absent.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for mask.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    /// Which inequality family to check.
    #[arg(long, value_enum)]
    suite: Suite,
    /// Random trials for the randomized suites.
    #[arg(long, default_value_t = 1000)]
    trials: usize,
    /// Root seed; HIES_SEED is used when absent, then 0.
    #[arg(long)]
    seed: Option<u64>,
    /// Linear-head checkpoint for the model suites; a seeded toy model is
    /// trained when absent.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Experiment config supplying calibration data for --model.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Pruning ratio for the gap and quad suites.
    #[arg(long, default_value_t = 0.25)]
    ratio: f64,
    /// Directory for bounds.csv.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct DiagnoseArgs {
    #[command(flatten)]
    common: Common,
    /// Checkpoint written by `train`.
    #[arg(long)]
    model: PathBuf,
    /// Skip the simplex tangent projection.
    #[arg(long, default_value_t = false)]
    no_projection: bool,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    /// Sweep this trained checkpoint instead of training one model per seed.
    #[arg(long)]
    model: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum Scope {
    Global,
    PerLayer,
}

impl From<Scope> for NormScope {
    fn from(s: Scope) -> Self {
        match s {
            Scope::Global => NormScope::Global,
            Scope::PerLayer => NormScope::PerLayer,
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum CriterionArg {
    Hies,
    His,
    Ad,
    L2,
    Random,
}

impl From<CriterionArg> for Criterion {
    fn from(c: CriterionArg) -> Self {
        match c {
            CriterionArg::Hies => Criterion::Hies,
            CriterionArg::His => Criterion::His,
            CriterionArg::Ad => Criterion::Ad,
            CriterionArg::L2 => Criterion::L2,
            CriterionArg::Random => Criterion::Random,
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum Suite {
    EntropyTv,
    Curvature,
    PowerIter,
    LossBound,
    Gap,
    Quad,
    OpIneq,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    let outcome = match cli.command {
        Command::Train(a) => commands::train(&a.common),
        Command::Score(a) => commands::score(&a),
        Command::Prune(a) => commands::prune(&a),
        Command::Verify(a) => verify::run(&a),
        Command::Diagnose(a) => commands::diagnose(&a),
        Command::Sweep(a) => commands::sweep(&a),
        Command::AlphaSweep(a) => commands::alpha_sweep(&a),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
