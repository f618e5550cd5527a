//! `gforest`: train, sample, impute and evaluate generative forests from the
//! command line.
//!
//! Exit codes: 0 success, 2 usage, 3 data, 4 internal error.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use gforest::data::{self, Mask};
use gforest::evaluator::{self, Generator, GroundCost, OtOptions};
use gforest::imputer::{self, MarginalStrategy};
use gforest::sampler::{self, Ordering};
use gforest::{Error, GenerativeForest, Loss, Mode, TrainConfig};

#[derive(Parser)]
#[command(name = "gforest", version, about = "Generative forests for tabular data")]
struct Cli {
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Token for missing values, e.g. `?`. Empty cells are always missing
    /// and are what gets written by default.
    #[arg(long, global = true, default_value = "")]
    missing: String,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a GF or EOGT and write the model and its history.
    Train(TrainArgs),
    /// Sample observations from a model.
    Generate(GenerateArgs),
    /// Fill missing values of a CSV.
    Impute(ImputeArgs),
    /// Model density at the rows of a CSV.
    Density(DensityArgs),
    /// Evaluation workflows.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Write a simulated domain, optionally with MCAR missingness.
    Synth(SynthArgs),
    /// Convert a GF model into an EOGT model.
    Convert(ConvertArgs),
}

#[derive(Args)]
struct ModelArgs {
    /// Training CSV. Needed by GF models, ignored by EOGT models.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Model file.
    #[arg(long)]
    model: PathBuf,
}

#[derive(Args, Clone)]
struct ForestArgs {
    #[arg(long, default_value_t = 1)]
    trees: usize,
    #[arg(long, default_value_t = 0)]
    splits: usize,
    #[arg(long, default_value = "gf", value_parser = parse::<Mode>)]
    mode: Mode,
    #[arg(long, default_value = "square", value_parser = parse::<Loss>)]
    loss: Loss,
    #[arg(long, default_value_t = 0.5)]
    prior: f64,
    #[arg(long, default_value_t = 22)]
    cat_cutoff: usize,
    #[arg(long, default_value_t = 1024)]
    cat_samples: usize,
    #[arg(long, default_value_t = 1)]
    min_leaf_rows: usize,
}

impl ForestArgs {
    fn config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            splits: self.splits,
            trees: self.trees,
            loss: self.loss,
            prior: self.prior,
            mode: self.mode,
            cat_cutoff: self.cat_cutoff,
            cat_samples: self.cat_samples,
            seed,
            min_leaf_rows: self.min_leaf_rows,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    forest: ForestArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// History CSV (default: the model path with `.history.csv`).
    #[arg(long)]
    history: Option<PathBuf>,
    /// Print every tree.
    #[arg(long)]
    dump: bool,
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "iterative", value_parser = parse::<Ordering>)]
    order: Ordering,
    /// Output CSV (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ImputeArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// CSV with missing cells, read against the model schema.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the 0/1 mask of imputed cells.
    #[arg(long)]
    mask_out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct DensityArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Complete rows to evaluate.
    #[arg(long)]
    points: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum EvalCommand {
    /// perr and rmse of an imputation against the truth, over masked cells.
    ImputeMetrics(ImputeMetricsArgs),
    /// Imputation of a masked CSV by a GF and by the marginal baseline.
    ImputeCompare(ImputeCompareArgs),
    /// k-fold entropic OT between generated and held-out data.
    Lifelike(LifelikeArgs),
}

#[derive(Args)]
struct ImputeMetricsArgs {
    #[arg(long)]
    imputed: PathBuf,
    #[arg(long)]
    truth: PathBuf,
    #[arg(long)]
    mask: PathBuf,
}

#[derive(Args)]
struct ImputeCompareArgs {
    /// Complete data.
    #[arg(long)]
    truth: PathBuf,
    #[arg(long, default_value_t = 0.05)]
    rate: f64,
    #[command(flatten)]
    forest: ForestArgs,
    #[arg(long, default_value = "sample", value_parser = parse::<MarginalStrategy>)]
    marginal: MarginalStrategy,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct LifelikeArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 5)]
    folds: usize,
    #[arg(long, default_value = "gf", value_parser = parse::<Generator>)]
    generator: Generator,
    #[command(flatten)]
    forest: ForestArgs,
    #[arg(long, default_value_t = 0.5)]
    eps: f64,
    #[arg(long, default_value = "l1", value_parser = parse::<GroundCost>)]
    cost: GroundCost,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Per-fold CSV.
    #[arg(long)]
    out: Option<PathBuf>,
    /// JSON report.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    /// ringGauss, gridGauss, circGauss or randGauss.
    #[arg(long)]
    domain: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// MCAR rate for `--masked-out`.
    #[arg(long, default_value_t = 0.0)]
    mcar: f64,
    #[arg(long, requires = "mask_out")]
    masked_out: Option<PathBuf>,
    #[arg(long, requires = "masked_out")]
    mask_out: Option<PathBuf>,
}

#[derive(Args)]
struct ConvertArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    out: PathBuf,
}

fn parse<T: std::str::FromStr<Err = Error>>(s: &str) -> Result<T, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Failure of a command, mapped to an exit code.
enum Failure {
    Usage(String),
    Data(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidArgument(_) | Error::WrongMode(_) | Error::UnknownDomain(_) => Failure::Usage(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Data(e.to_string())
    }
}

type CmdResult = Result<(), Failure>;

fn output(path: Option<&Path>) -> io::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn load_model(args: &ModelArgs, missing: &str) -> Result<GenerativeForest, Failure> {
    let text = std::fs::read_to_string(&args.model)?;
    let data = match GenerativeForest::model_mode(&text)? {
        Mode::Eogt => None,
        Mode::Gf => {
            let path = args
                .data
                .as_ref()
                .ok_or_else(|| Failure::Usage("a GF model needs its training CSV (--data)".into()))?;
            Some(Arc::new(data::load_csv(path, missing)?))
        }
    };
    Ok(GenerativeForest::from_model_str(&text, data)?)
}

fn cmd_train(a: &TrainArgs, missing: &str) -> CmdResult {
    let ds = data::load_csv(&a.data, missing)?;
    let cfg = a.forest.config(a.seed);
    let schema = ds.schema().clone();
    let (forest, history) = gforest::train(ds, &cfg)?;
    forest.save(&a.out)?;
    let history_path = a.history.clone().unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".history.csv");
        PathBuf::from(p)
    });
    history.write_csv(BufWriter::new(File::create(&history_path)?), &schema)?;
    let mut out = io::stdout().lock();
    writeln!(out, "mode: {}", forest.mode())?;
    writeln!(out, "splits: {}", history.steps.len())?;
    if history.stopped_early {
        writeln!(out, "stopped early: no leaf admits a split")?;
    }
    writeln!(out, "initial poprisk: {:.6}", history.initial_poprisk)?;
    writeln!(out, "final poprisk: {:.6}", history.final_poprisk())?;
    let leaves: Vec<String> = forest.leaf_counts().iter().map(usize::to_string).collect();
    writeln!(out, "leaves per tree: {}", leaves.join(" "))?;
    if a.dump {
        for (i, t) in forest.trees().iter().enumerate() {
            writeln!(out, "tree {i}")?;
            write!(out, "{}", t.dump(&schema))?;
        }
    }
    Ok(())
}

fn cmd_generate(a: &GenerateArgs, missing: &str) -> CmdResult {
    let forest = load_model(&a.model, missing)?;
    let ds = sampler::generate(&forest, a.n, a.seed, a.order)?;
    let mut w = output(a.out.as_deref())?;
    ds.write_csv(&mut w, missing)?;
    w.flush()?;
    Ok(())
}

fn cmd_impute(a: &ImputeArgs, missing: &str) -> CmdResult {
    let forest = load_model(&a.model, missing)?;
    let ds = data::load_csv_with_schema(&a.input, forest.schema(), missing)?;
    let mask = Mask::of_missing(&ds);
    let done = imputer::impute_dataset(&forest, &ds, a.seed)?;
    let mut w = output(a.out.as_deref())?;
    done.write_csv(&mut w, missing)?;
    w.flush()?;
    if let Some(p) = &a.mask_out {
        mask.write_csv(BufWriter::new(File::create(p)?), ds.schema())?;
    }
    eprintln!("imputed {} cells in {} rows", mask.count(), ds.m());
    Ok(())
}

fn cmd_density(a: &DensityArgs, missing: &str) -> CmdResult {
    let forest = load_model(&a.model, missing)?;
    let ds = data::load_csv_with_schema(&a.points, forest.schema(), missing)?;
    let mut w = output(a.out.as_deref())?;
    writeln!(w, "density,point_mass")?;
    for (i, row) in ds.rows().iter().enumerate() {
        let x: Option<Vec<f64>> = row.iter().copied().collect();
        let x = x.ok_or_else(|| Failure::Data(format!("row {} has missing values", i + 1)))?;
        let d = forest.density(&x)?;
        writeln!(w, "{:?},{}", d.value, d.point_mass)?;
    }
    w.flush()?;
    Ok(())
}

fn print_metric(out: &mut impl Write, name: &str, v: Option<f64>) -> io::Result<()> {
    match v {
        Some(v) => writeln!(out, "{name}: {v:.6}"),
        None => writeln!(out, "{name}: absent"),
    }
}

fn cmd_impute_metrics(a: &ImputeMetricsArgs, missing: &str) -> CmdResult {
    let truth = data::load_csv(&a.truth, missing)?;
    let imputed = data::load_csv_with_schema(&a.imputed, truth.schema(), missing)?;
    let mask = Mask::read_csv(File::open(&a.mask)?)?;
    let mut out = io::stdout().lock();
    print_metric(&mut out, "perr", evaluator::perr(&imputed, &truth, &mask)?)?;
    print_metric(&mut out, "rmse", evaluator::rmse(&imputed, &truth, &mask)?)?;
    Ok(())
}

fn cmd_impute_compare(a: &ImputeCompareArgs, missing: &str) -> CmdResult {
    let truth = data::load_csv(&a.truth, missing)?;
    let (masked, mask) = data::apply_mcar(&truth, a.rate, a.seed)?;
    let (forest, _) = gforest::train(masked.clone(), &a.forest.config(a.seed))?;
    let gf = imputer::impute_dataset(&forest, &masked, a.seed)?;
    let marginal = imputer::marginal_impute(&masked, &masked, a.seed, a.marginal)?;
    let mut out = io::stdout().lock();
    writeln!(out, "masked cells: {}", mask.count())?;
    print_metric(&mut out, "gf perr", evaluator::perr(&gf, &truth, &mask)?)?;
    print_metric(&mut out, "gf rmse", evaluator::rmse(&gf, &truth, &mask)?)?;
    print_metric(&mut out, "marginal perr", evaluator::perr(&marginal, &truth, &mask)?)?;
    print_metric(&mut out, "marginal rmse", evaluator::rmse(&marginal, &truth, &mask)?)?;
    Ok(())
}

fn cmd_lifelike(a: &LifelikeArgs, missing: &str) -> CmdResult {
    let ds = data::load_csv(&a.data, missing)?;
    let opts = OtOptions {
        eps: a.eps,
        cost: a.cost,
        ..Default::default()
    };
    let report = evaluator::kfold_lifelike(&ds, a.folds, &a.forest.config(a.seed), a.generator, &opts, a.seed)?;
    if let Some(p) = &a.out {
        report.write_csv(BufWriter::new(File::create(p)?))?;
    }
    if let Some(p) = &a.json {
        std::fs::write(p, report.to_json() + "\n")?;
    }
    let mut out = io::stdout().lock();
    for f in &report.folds {
        let warn = if f.converged { "" } else { " (not converged)" };
        writeln!(out, "fold {}: {:.6}{warn}", f.fold, f.cost)?;
    }
    writeln!(out, "ot: {:.6} ± {:.6}", report.mean, report.std)?;
    Ok(())
}

fn cmd_synth(a: &SynthArgs, missing: &str) -> CmdResult {
    let ds = data::synth_domain(&a.domain, a.seed)?;
    ds.save_csv(&a.out, missing)?;
    if let (Some(masked_out), Some(mask_out)) = (&a.masked_out, &a.mask_out) {
        let (masked, mask) = data::apply_mcar(&ds, a.mcar, a.seed)?;
        masked.save_csv(masked_out, missing)?;
        mask.write_csv(BufWriter::new(File::create(mask_out)?), ds.schema())?;
    }
    Ok(())
}

fn cmd_convert(a: &ConvertArgs, missing: &str) -> CmdResult {
    let forest = load_model(&a.model, missing)?;
    forest.to_eogt()?.save(&a.out)?;
    Ok(())
}

fn run(cli: &Cli) -> CmdResult {
    let m = cli.missing.as_str();
    match &cli.command {
        Command::Train(a) => cmd_train(a, m),
        Command::Generate(a) => cmd_generate(a, m),
        Command::Impute(a) => cmd_impute(a, m),
        Command::Density(a) => cmd_density(a, m),
        Command::Eval(EvalCommand::ImputeMetrics(a)) => cmd_impute_metrics(a, m),
        Command::Eval(EvalCommand::ImputeCompare(a)) => cmd_impute_compare(a, m),
        Command::Eval(EvalCommand::Lifelike(a)) => cmd_lifelike(a, m),
        Command::Synth(a) => cmd_synth(a, m),
        Command::Convert(a) => cmd_convert(a, m),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be positive");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(4);
        }
    }
    match std::panic::catch_unwind(|| run(&cli)) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(Failure::Usage(msg))) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Ok(Err(Failure::Data(msg))) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
        Err(_) => ExitCode::from(4),
    }
}
