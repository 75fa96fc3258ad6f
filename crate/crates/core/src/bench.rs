//! Prediction, evaluation metrics and the simulation benchmark.
//!
//! Each benchmark replication simulates `N + n_test` samples, fits the
//! dynamic model and the static baseline on the first `N` (each tuned by the
//! BIC-like criterion, with the true noise model), and scores both on the
//! held-out samples. Replication seeds are derived from the cell parameters,
//! so a cell's numbers do not depend on which other cells run alongside it.

use std::io::Write;
use std::time::Instant;

use ndarray::Array3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::WaveletFamily;
use crate::changepoint::{self, DetectionPolicy};
use crate::dataset::FunctionalDataset;
use crate::rng;
use crate::simulate::{self, GroundTruth, SimulationConfig};
use crate::solver::{CoefficientPath, FistaOptions, ZERO_THRESHOLD};
use crate::tuning::{self, GridSpec};
use crate::{DfslError, Result};

/// `Y_hat_ij(t_k) = sum_{r != j} Y_ir(t_k) b_jr(t_k)` for every sample.
pub fn predict(path: &CoefficientPath, data: &FunctionalDataset) -> Result<Array3<f64>> {
    let (n_samples, n, p) = data.values().dim();
    if path.n_times() != n || path.n_channels() != p {
        return Err(DfslError::mismatch(format!(
            "path is {} x {} but data have {n} times and {p} channels",
            path.n_times(),
            path.n_channels()
        )));
    }
    let y = data.values();
    Ok(Array3::from_shape_fn((n_samples, n, p), |(i, k, j)| {
        (0..p).filter(|&r| r != j).map(|r| y[(i, k, r)] * path.get(j, r, k)).sum()
    }))
}

/// Mean squared error between predictions and the observed curves.
pub fn mse(predicted: &Array3<f64>, data: &FunctionalDataset) -> Result<f64> {
    if predicted.dim() != data.values().dim() {
        return Err(DfslError::mismatch("prediction and data shapes differ"));
    }
    let total: f64 = predicted.iter().zip(data.values().iter()).map(|(a, b)| (a - b).powi(2)).sum();
    Ok(total / predicted.len() as f64)
}

/// Fraction of channels whose time-averaged coefficients put weight above
/// [`ZERO_THRESHOLD`] on a channel of another subspace.
pub fn false_subspace_rate(path: &CoefficientPath, assignment: &[usize]) -> Result<f64> {
    let p = path.n_channels();
    if assignment.len() != p {
        return Err(DfslError::mismatch(format!("assignment has {} channels, path has {p}", assignment.len())));
    }
    let wrong = (0..p)
        .filter(|&j| {
            let mean = path.time_average(j);
            (0..p).any(|r| assignment[r] != assignment[j] && mean[r].abs() > ZERO_THRESHOLD)
        })
        .count();
    Ok(wrong as f64 / p as f64)
}

/// `(false, missed)` detections. A detection within one index of a true
/// change point matches it; each true point takes at most one detection
/// (the closest, earliest on ties).
pub fn change_point_metrics(detected: &[usize], truth: &[usize]) -> (usize, usize) {
    let mut used = vec![false; detected.len()];
    let mut missed = 0;
    for &t in truth {
        let best = detected
            .iter()
            .enumerate()
            .filter(|&(i, &d)| !used[i] && d.abs_diff(t) <= 1)
            .min_by_key(|&(i, &d)| (d.abs_diff(t), i));
        match best {
            Some((i, _)) => used[i] = true,
            None => missed += 1,
        }
    }
    (used.iter().filter(|u| !**u).count(), missed)
}

/// Distance from each true change point to the nearest detection, or `n`
/// when nothing was detected.
pub fn change_point_errors(detected: &[usize], truth: &[usize], n: usize) -> Vec<usize> {
    truth.iter().map(|&t| detected.iter().map(|&d| d.abs_diff(t)).min().unwrap_or(n)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "I")]
    I,
    #[serde(rename = "II")]
    II,
}

impl ModelKind {
    pub fn parse(text: &str) -> Result<Self> {
        match text {
            "I" | "i" | "1" => Ok(Self::I),
            "II" | "ii" | "2" => Ok(Self::II),
            _ => Err(DfslError::invalid(format!("unknown model {text:?}; expected I or II"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::I => "I",
            Self::II => "II",
        }
    }

    pub fn config(self, p_per_subspace: usize) -> Result<SimulationConfig> {
        match self {
            Self::I => simulate::model_i_config(p_per_subspace),
            Self::II if p_per_subspace == 4 => simulate::model_ii_config(WaveletFamily::Db4),
            Self::II => Err(DfslError::invalid("Model II has four channels per subspace")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "DFSL")]
    Dfsl,
    #[serde(rename = "SFSL")]
    Sfsl,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Self::Dfsl => "DFSL",
            Self::Sfsl => "SFSL",
        }
    }
}

#[derive(Debug, Clone)]
pub struct BenchmarkConfig {
    pub model: ModelKind,
    pub n_samples: Vec<usize>,
    pub sigmas: Vec<f64>,
    pub p_per_subspace: Vec<usize>,
    pub replications: usize,
    pub seed: u64,
    pub n_test: usize,
    pub grid: GridSpec,
    pub fista: FistaOptions,
    pub policy: DetectionPolicy,
    /// Record wall-clock seconds per fit. Off by default so reports are
    /// reproducible byte for byte.
    pub timing: bool,
}

impl BenchmarkConfig {
    pub fn new(model: ModelKind) -> Self {
        Self {
            model,
            n_samples: vec![500],
            sigmas: vec![0.05, 0.1, 0.2, 0.3, 0.5],
            p_per_subspace: vec![4],
            replications: 10,
            seed: 7,
            n_test: 50,
            grid: GridSpec::default(),
            fista: FistaOptions::default(),
            policy: DetectionPolicy::default(),
            timing: false,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_samples.is_empty() || self.sigmas.is_empty() || self.p_per_subspace.is_empty() {
            return Err(DfslError::invalid("benchmark grid has an empty axis"));
        }
        if self.replications == 0 || self.n_test == 0 || self.n_samples.contains(&0) {
            return Err(DfslError::invalid("replications, test size and sample sizes must be positive"));
        }
        if self.sigmas.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(DfslError::invalid("noise levels must be finite and non-negative"));
        }
        for &p in &self.p_per_subspace {
            self.model.config(p)?;
        }
        Ok(())
    }
}

/// One method on one simulated replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationResult {
    pub model: ModelKind,
    pub sigma: f64,
    pub n_samples: usize,
    pub p_per_subspace: usize,
    pub replication: usize,
    pub method: Method,
    pub mse: f64,
    pub false_subspace_rate: f64,
    pub detected: Vec<usize>,
    pub false_cp: usize,
    pub miss_cp: usize,
    /// Distance from each true change point to the nearest detection.
    pub cp_errors: Vec<usize>,
    pub runtime_s: Option<f64>,
}

/// Aggregated row of the benchmark report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub model: ModelKind,
    pub sigma: f64,
    #[serde(rename = "N")]
    pub n_samples: usize,
    pub p_per_subspace: usize,
    pub method: Method,
    pub mse_mean: f64,
    pub mse_se: f64,
    pub false_subspace_rate: f64,
    pub false_cp_mean: f64,
    pub miss_cp_mean: f64,
    /// Mean seconds per fit, `NA` in the CSV when timing is off.
    pub runtime_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkOutput {
    pub rows: Vec<MetricReport>,
    pub replications: Vec<ReplicationResult>,
    /// `(cell description, error)` for replications that failed.
    pub failures: Vec<(String, String)>,
}

#[derive(Debug, Clone, Copy)]
struct Cell {
    sigma: f64,
    n_samples: usize,
    p_per_subspace: usize,
}

fn cell_seed(seed: u64, cell: &Cell, rep: usize) -> u64 {
    rng::derive_key(seed, &[cell.n_samples as u64, cell.sigma.to_bits(), cell.p_per_subspace as u64, rep as u64])
}

#[allow(clippy::too_many_arguments)]
fn evaluate(
    config: &BenchmarkConfig,
    cell: &Cell,
    rep: usize,
    method: Method,
    path: &CoefficientPath,
    test: &FunctionalDataset,
    truth: &GroundTruth,
    runtime: Option<f64>,
) -> Result<ReplicationResult> {
    let assignment = truth.assignment.first().ok_or_else(|| DfslError::invalid("truth has no segments"))?;
    if truth.assignment.iter().any(|a| a != assignment) {
        return Err(DfslError::invalid("false subspace rate needs a time-constant assignment"));
    }
    let detected = changepoint::detect(&changepoint::score(path), &config.policy).change_points;
    let (false_cp, miss_cp) = change_point_metrics(&detected, &truth.change_points);
    Ok(ReplicationResult {
        model: config.model,
        sigma: cell.sigma,
        n_samples: cell.n_samples,
        p_per_subspace: cell.p_per_subspace,
        replication: rep,
        method,
        mse: mse(&predict(path, test)?, test)?,
        false_subspace_rate: false_subspace_rate(path, assignment)?,
        cp_errors: change_point_errors(&detected, &truth.change_points, path.n_times()),
        detected,
        false_cp,
        miss_cp,
        runtime_s: runtime,
    })
}

/// Fit and score both methods on one replication.
pub fn run_replication(config: &BenchmarkConfig, sigma: f64, n_samples: usize, p_per_subspace: usize, rep: usize) -> Result<[ReplicationResult; 2]> {
    let cell = Cell { sigma, n_samples, p_per_subspace };
    let sim = config.model.config(p_per_subspace)?;
    let (all, truth) = simulate::generate(&sim, n_samples + config.n_test, sigma, cell_seed(config.seed, &cell, rep))?;
    let train = all.select_samples(&(0..n_samples).collect::<Vec<_>>())?;
    let test = all.select_samples(&(n_samples..n_samples + config.n_test).collect::<Vec<_>>())?;
    let clock = Instant::now();
    let dynamic = tuning::select(&train, &config.grid, &truth.noise, &config.fista)?;
    let dynamic_time = config.timing.then(|| clock.elapsed().as_secs_f64());
    let clock = Instant::now();
    let fixed =
        tuning::select_static(&train, config.grid.n_lambda, config.grid.min_ratio, &truth.noise, &config.fista)?;
    let static_time = config.timing.then(|| clock.elapsed().as_secs_f64());
    let n = train.n_times();
    Ok([
        evaluate(config, &cell, rep, Method::Dfsl, &dynamic.fit.path, &test, &truth, dynamic_time)?,
        evaluate(config, &cell, rep, Method::Sfsl, &fixed.fit.as_path(n), &test, &truth, static_time)?,
    ])
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn standard_error(values: &[f64]) -> f64 {
    let m = values.len();
    if m < 2 {
        return 0.0;
    }
    let mu = mean(values);
    (values.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (m - 1) as f64 / m as f64).sqrt()
}

fn aggregate(cell: &Cell, model: ModelKind, method: Method, reps: &[&ReplicationResult]) -> MetricReport {
    let pick = |f: &dyn Fn(&ReplicationResult) -> f64| reps.iter().map(|r| f(r)).collect::<Vec<_>>();
    let mses = pick(&|r| r.mse);
    let runtimes: Option<Vec<f64>> = reps.iter().map(|r| r.runtime_s).collect();
    MetricReport {
        model,
        sigma: cell.sigma,
        n_samples: cell.n_samples,
        p_per_subspace: cell.p_per_subspace,
        method,
        mse_mean: mean(&mses),
        mse_se: standard_error(&mses),
        false_subspace_rate: mean(&pick(&|r| r.false_subspace_rate)),
        false_cp_mean: mean(&pick(&|r| r.false_cp as f64)),
        miss_cp_mean: mean(&pick(&|r| r.miss_cp as f64)),
        runtime_s: runtimes.map(|t| mean(&t)),
    }
}

/// Run every `(p_per_subspace, N, sigma)` cell for the configured number of
/// replications. Failed replications are reported and left out of the means.
pub fn run_benchmark(config: &BenchmarkConfig) -> Result<BenchmarkOutput> {
    config.validate()?;
    let mut cells = Vec::new();
    for &p_per_subspace in &config.p_per_subspace {
        for &n_samples in &config.n_samples {
            for &sigma in &config.sigmas {
                cells.push(Cell { sigma, n_samples, p_per_subspace });
            }
        }
    }
    let jobs: Vec<(usize, usize)> = (0..cells.len()).flat_map(|c| (0..config.replications).map(move |r| (c, r))).collect();
    let outcomes: Vec<(usize, usize, Result<[ReplicationResult; 2]>)> = jobs
        .par_iter()
        .map(|&(c, rep)| {
            let cell = &cells[c];
            (c, rep, run_replication(config, cell.sigma, cell.n_samples, cell.p_per_subspace, rep))
        })
        .collect();
    let mut replications = Vec::new();
    let mut failures = Vec::new();
    let mut per_cell: Vec<Vec<ReplicationResult>> = vec![Vec::new(); cells.len()];
    for (c, rep, outcome) in outcomes {
        match outcome {
            Ok(pair) => per_cell[c].extend(pair),
            Err(e) => {
                let cell = &cells[c];
                failures.push((
                    format!(
                        "model {} sigma {} N {} p {} rep {rep}",
                        config.model.name(),
                        cell.sigma,
                        cell.n_samples,
                        cell.p_per_subspace
                    ),
                    e.to_string(),
                ));
            }
        }
    }
    let mut rows = Vec::new();
    for (cell, results) in cells.iter().zip(&per_cell) {
        for method in [Method::Dfsl, Method::Sfsl] {
            let reps: Vec<&ReplicationResult> = results.iter().filter(|r| r.method == method).collect();
            if !reps.is_empty() {
                rows.push(aggregate(cell, config.model, method, &reps));
            }
        }
        replications.extend(results.iter().cloned());
    }
    Ok(BenchmarkOutput { rows, replications, failures })
}

/// Write report rows as CSV with `NA` for missing runtimes.
pub fn write_report<W: Write>(rows: &[MetricReport], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "model",
        "sigma",
        "N",
        "p_per_subspace",
        "method",
        "mse_mean",
        "mse_se",
        "false_subspace_rate",
        "false_cp_mean",
        "miss_cp_mean",
        "runtime_s",
    ])?;
    for r in rows {
        w.write_record([
            r.model.name().to_string(),
            r.sigma.to_string(),
            r.n_samples.to_string(),
            r.p_per_subspace.to_string(),
            r.method.name().to_string(),
            r.mse_mean.to_string(),
            r.mse_se.to_string(),
            r.false_subspace_rate.to_string(),
            r.false_cp_mean.to_string(),
            r.miss_cp_mean.to_string(),
            r.runtime_s.map_or_else(|| "NA".to_string(), |t| t.to_string()),
        ])?;
    }
    w.flush()?;
    Ok(())
}
