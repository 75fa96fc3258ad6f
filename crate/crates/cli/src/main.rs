use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use dfsl::bench::{self, BenchmarkConfig, ModelKind};
use dfsl::changepoint::{self, ChangeScore, DetectionPolicy};
use dfsl::dataset::{FunctionalDataset, NoiseModel};
use dfsl::simulate::{self, GroundTruthRecord, SimulationConfigRecord};
use dfsl::solver::{self, BcdOptions, CoefficientPath, FistaOptions, FitRecord, PenaltyConfig};
use dfsl::subspace::{self, ClusterModel, ClusteringConfig, MfpcaOptions};
use dfsl::tuning::{self, GridSpec};

#[derive(Parser)]
#[command(name = "dfsl", version, about = "Dynamic functional subspace learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a segmented subspace model.
    Simulate(SimulateArgs),
    /// Fit coefficient paths at fixed penalties.
    Fit(FitArgs),
    /// Grid-search the penalties and write the grid (and optionally the best fit).
    Tune(TuneArgs),
    /// Detect change points in a fitted model.
    Changepoints(ChangepointArgs),
    /// Cluster channels per segment and extract smooth bases.
    Cluster(ClusterArgs),
    /// Smooth MFPCA of a block of channels and times.
    Mfpca(MfpcaArgs),
    /// Run the simulation benchmark.
    Benchmark(BenchmarkArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum SimModel {
    #[value(name = "I")]
    I,
    #[value(name = "II")]
    II,
    #[value(name = "custom")]
    Custom,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, value_enum)]
    model: SimModel,
    /// JSON description for `--model custom`.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 500)]
    n_samples: usize,
    #[arg(long, default_value_t = 0.05)]
    sigma: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Channels per subspace (Model I only).
    #[arg(long, default_value_t = 4)]
    p_per_subspace: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    truth: Option<PathBuf>,
}

#[derive(Args)]
struct NoiseArgs {
    /// Use the noise model stored in a truth file; identity otherwise.
    #[arg(long)]
    noise_from: Option<PathBuf>,
}

impl NoiseArgs {
    fn load(&self, data: &FunctionalDataset) -> Result<NoiseModel> {
        match &self.noise_from {
            Some(path) => {
                let truth: GroundTruthRecord = read_json(path)?;
                let noise = NoiseModel::from_record(&truth.noise)?;
                if noise.n_channels() != data.n_channels() || noise.n_times() != data.n_times() {
                    bail!("noise model in {} does not match the data dimensions", path.display());
                }
                Ok(noise)
            }
            None => Ok(NoiseModel::identity(data.n_channels(), data.n_times(), 1.0)),
        }
    }
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    input: PathBuf,
    /// Fusion penalty.
    #[arg(long)]
    lambda1: f64,
    /// Sparsity penalty.
    #[arg(long)]
    lambda2: f64,
    /// Estimate the noise covariances by block coordinate descent.
    #[arg(long)]
    bcd: bool,
    #[arg(long, default_value_t = 20)]
    max_outer: usize,
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    #[arg(long, default_value_t = 5000)]
    max_iter: usize,
    /// Scale every curve to unit norm before fitting.
    #[arg(long)]
    normalize: bool,
    #[command(flatten)]
    noise: NoiseArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TuneArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.3,0.5,0.7,0.9")]
    rho_grid: Vec<f64>,
    #[arg(long, default_value_t = 10)]
    n_lambda: usize,
    #[arg(long, default_value_t = 0.01)]
    min_ratio: f64,
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    #[arg(long, default_value_t = 5000)]
    max_iter: usize,
    #[arg(long)]
    normalize: bool,
    #[command(flatten)]
    noise: NoiseArgs,
    #[arg(long)]
    out: PathBuf,
    /// Also write the selected fit as a model file.
    #[arg(long)]
    model_out: Option<PathBuf>,
}

#[derive(Args)]
struct ChangepointArgs {
    #[arg(long)]
    model: PathBuf,
    /// `count:<c>` or `sigma:<m>`.
    #[arg(long, default_value = "count:1")]
    policy: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ClusterArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    cps: PathBuf,
    #[arg(long)]
    input: PathBuf,
    /// `spectral:<k>`, `hier:<distance>` or `hier-vec:<distance>`.
    #[arg(long, default_value = "spectral:2")]
    method: String,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 1.0)]
    lambda3: f64,
    #[arg(long, default_value_t = 0.95)]
    variance: f64,
    #[arg(long)]
    normalize: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MfpcaArgs {
    #[arg(long)]
    input: PathBuf,
    /// 0-based channel indices.
    #[arg(long, value_delimiter = ',')]
    channels: Vec<usize>,
    /// First time index (1-based).
    #[arg(long, default_value_t = 1)]
    start: usize,
    /// One past the last time index (1-based); defaults to the end.
    #[arg(long)]
    end: Option<usize>,
    #[arg(long, default_value_t = 1.0)]
    lambda3: f64,
    #[arg(long, default_value_t = 0.95)]
    variance: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchmarkArgs {
    #[arg(long, default_value = "I")]
    model: String,
    #[arg(long, value_delimiter = ',', default_value = "0.05,0.1,0.2,0.3,0.5")]
    sigmas: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "500")]
    n_samples: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "4")]
    p_per_subspace: Vec<usize>,
    #[arg(long, default_value_t = 10)]
    reps: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 50)]
    n_test: usize,
    #[arg(long, default_value = "count:1")]
    policy: String,
    /// Record wall-clock seconds per fit (makes the report nondeterministic).
    #[arg(long)]
    timing: bool,
    #[arg(long)]
    out: PathBuf,
    /// Per-replication results as JSON.
    #[arg(long)]
    replications_out: Option<PathBuf>,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    serde_json::from_reader(BufReader::new(file)).with_context(|| format!("parsing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn read_data(path: &Path, normalize: bool) -> Result<FunctionalDataset> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let data = FunctionalDataset::read_csv(BufReader::new(file)).with_context(|| format!("reading {}", path.display()))?;
    Ok(if normalize { data.normalize_channels()? } else { data })
}

fn fista_options(tol: f64, max_iter: usize) -> FistaOptions {
    FistaOptions { tol, max_iter, ..FistaOptions::default() }
}

fn warn_unconverged(converged: &[bool]) {
    let bad: Vec<usize> = converged.iter().enumerate().filter(|(_, c)| !**c).map(|(j, _)| j).collect();
    if !bad.is_empty() {
        eprintln!("warning: channels {bad:?} hit the iteration limit before converging");
    }
}

fn simulate_cmd(args: SimulateArgs) -> Result<()> {
    let config = match args.model {
        SimModel::I => simulate::model_i_config(args.p_per_subspace)?,
        SimModel::II => ModelKind::II.config(4)?,
        SimModel::Custom => {
            let path = args.config.as_ref().context("--model custom needs --config")?;
            let record: SimulationConfigRecord = read_json(path)?;
            record.build()?
        }
    };
    let (data, truth) = simulate::generate(&config, args.n_samples, args.sigma, args.seed)?;
    let mut out = create(&args.out)?;
    data.write_csv(&mut out)?;
    out.flush()?;
    if let Some(path) = &args.truth {
        write_json(path, &GroundTruthRecord::from(&truth))?;
    }
    Ok(())
}

fn fit_cmd(args: FitArgs) -> Result<()> {
    let data = read_data(&args.input, args.normalize)?;
    let penalties = PenaltyConfig::new(args.lambda1, args.lambda2)?;
    let fista = fista_options(args.tol, args.max_iter);
    let record = if args.bcd {
        let opts = BcdOptions { fista, max_outer: args.max_outer, ..BcdOptions::default() };
        let fit = solver::fit_bcd(&data, penalties, &opts)?;
        if !fit.converged {
            eprintln!("warning: block coordinate descent stopped after {} outer iterations", fit.outer_iterations);
        }
        FitRecord::new(&fit.fit, &fit.noise, penalties)
    } else {
        let noise = args.noise.load(&data)?;
        let fit = solver::fit_dfsl(&data, penalties, &noise, &fista)?;
        FitRecord::new(&fit, &noise, penalties)
    };
    warn_unconverged(&record.converged);
    write_json(&args.out, &record)
}

fn tune_cmd(args: TuneArgs) -> Result<()> {
    let data = read_data(&args.input, args.normalize)?;
    let noise = args.noise.load(&data)?;
    let grid = GridSpec { rho_values: args.rho_grid, n_lambda: args.n_lambda, min_ratio: args.min_ratio };
    let selection = tuning::select(&data, &grid, &noise, &fista_options(args.tol, args.max_iter))?;
    let mut out = create(&args.out)?;
    selection.grid.write_csv(&mut out)?;
    out.flush()?;
    let best = &selection.grid.cells[selection.cell];
    eprintln!("selected rho = {}, lambda0 = {} ({} nonzeros)", best.rho, best.lambda0, best.nonzeros);
    if let Some(path) = &args.model_out {
        write_json(path, &FitRecord::new(&selection.fit, &noise, selection.penalties))?;
    }
    Ok(())
}

fn load_path(path: &Path) -> Result<CoefficientPath> {
    let record: FitRecord = read_json(path)?;
    Ok(CoefficientPath::from_record(&record.path)?)
}

#[derive(Serialize, Deserialize)]
struct ChangepointReport {
    policy: DetectionPolicy,
    #[serde(flatten)]
    score: ChangeScore,
}

fn changepoints_cmd(args: ChangepointArgs) -> Result<()> {
    let path = load_path(&args.model)?;
    let policy = DetectionPolicy::parse(&args.policy)?;
    let score = changepoint::detect(&changepoint::score(&path), &policy);
    write_json(&args.out, &ChangepointReport { policy, score })
}

fn cluster_cmd(args: ClusterArgs) -> Result<()> {
    let path = load_path(&args.model)?;
    let cps: ChangepointReport = read_json(&args.cps)?;
    let data = read_data(&args.input, args.normalize)?;
    let config = ClusteringConfig::parse(&args.method, args.seed)?;
    let options = MfpcaOptions { lambda3: args.lambda3, variance_target: args.variance };
    let model = subspace::infer(&path, &cps.score.change_points, &data, &config, &options)?;
    for seg in &model.segments {
        if let Some(w) = &seg.warning {
            eprintln!("warning: segment [{}, {}): {w}", seg.start, seg.end);
        }
    }
    write_json(&args.out, &model)
}

fn mfpca_cmd(args: MfpcaArgs) -> Result<()> {
    let data = read_data(&args.input, false)?;
    let end = args.end.unwrap_or(data.n_times() + 1);
    if args.start < 1 || args.start >= end || end > data.n_times() + 1 {
        bail!("time range [{}, {end}) is empty or outside the data", args.start);
    }
    if args.channels.is_empty() || args.channels.iter().any(|&c| c >= data.n_channels()) {
        bail!("channels must be 0-based indices below {}", data.n_channels());
    }
    let block = data.time_window(args.start - 1, end - 1)?.select_channels(&args.channels)?;
    let fit = subspace::smooth_mfpca(block.values().view(), args.lambda3, args.variance)?;
    write_json(&args.out, &ClusterModel::from_mfpca(1, args.channels.clone(), &fit))
}

fn benchmark_cmd(args: BenchmarkArgs) -> Result<()> {
    let mut config = BenchmarkConfig::new(ModelKind::parse(&args.model)?);
    config.sigmas = args.sigmas;
    config.n_samples = args.n_samples;
    config.p_per_subspace = args.p_per_subspace;
    config.replications = args.reps;
    config.seed = args.seed;
    config.n_test = args.n_test;
    config.policy = DetectionPolicy::parse(&args.policy)?;
    config.timing = args.timing;
    let output = bench::run_benchmark(&config)?;
    for (cell, err) in &output.failures {
        eprintln!("warning: {cell} failed: {err}");
    }
    let mut out = create(&args.out)?;
    bench::write_report(&output.rows, &mut out)?;
    out.flush()?;
    if let Some(path) = &args.replications_out {
        write_json(path, &output.replications)?;
    }
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Simulate(args) => simulate_cmd(args),
        Command::Fit(args) => fit_cmd(args),
        Command::Tune(args) => tune_cmd(args),
        Command::Changepoints(args) => changepoints_cmd(args),
        Command::Cluster(args) => cluster_cmd(args),
        Command::Mfpca(args) => mfpca_cmd(args),
        Command::Benchmark(args) => benchmark_cmd(args),
    }
}
