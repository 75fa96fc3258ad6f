//! Penalty selection over the `(lambda0, rho)` grid.
//!
//! Penalties are reparameterized as `lambda1 = rho * lambda0` (fusion) and
//! `lambda2 = (1 - rho) * lambda0` (sparsity). For each `rho` the grid spans
//! `lambda0` values below the smallest one that zeroes every coefficient, and
//! the cell minimizing
//!
//! ```text
//! (N n) sum_j log(RSS_j / (N n)) + log(N n) sum_j k_j
//! ```
//!
//! is selected, where `RSS_j` is the whitened residual sum of squares and
//! `k_j` the number of nonzero coefficients of channel `j`.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{FunctionalDataset, NoiseModel};
use crate::solver::{
    self, ChannelProblem, CoefficientPath, DfslFit, FistaOptions, PenaltyConfig, StaticFit, StaticProblem,
    ZERO_THRESHOLD,
};
use crate::{DfslError, Result};

/// Relative bracket width at which the `lambda0` bisection stops.
const BISECTION_TOL: f64 = 1e-10;

/// Whether `b = 0` minimizes `1/2 ||b||^2 - g'b + l2 ||b||_1 + l1 ||Db||_1`,
/// i.e. whether `g = l2 s + D'u` for some `|s| <= 1`, `|u| <= l1`.
///
/// The feasible values of each dual coordinate `u_k` form an interval, so a
/// single forward sweep decides the question exactly.
pub fn zero_is_optimal(g: &[f64], l1: f64, l2: f64) -> bool {
    let n = g.len();
    let (mut lo, mut hi) = (0.0f64, 0.0f64);
    for (k, &gk) in g.iter().enumerate() {
        let (next_lo, next_hi) = (lo - gk - l2, hi - gk + l2);
        if k + 1 == n {
            return next_lo <= 0.0 && 0.0 <= next_hi;
        }
        lo = next_lo.max(-l1);
        hi = next_hi.min(l1);
        if lo > hi {
            return false;
        }
    }
    true
}

/// Smallest `lambda0` that zeroes one coefficient path with cross-product `g`.
fn coordinate_lambda_max(g: &[f64], rho: f64) -> f64 {
    let sup = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if sup == 0.0 {
        return 0.0;
    }
    let feasible = |l0: f64| zero_is_optimal(g, rho * l0, (1.0 - rho) * l0);
    // the sparsity term alone zeroes the path once (1 - rho) lambda0 >= |g|_inf
    let (mut lo, mut hi) = (0.0, sup / (1.0 - rho));
    while hi - lo > BISECTION_TOL * hi {
        let mid = 0.5 * (lo + hi);
        if feasible(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi
}

fn check_rho(rho: f64) -> Result<()> {
    if !(rho > 0.0 && rho < 1.0) {
        return Err(DfslError::invalid(format!("rho must lie in (0, 1), got {rho}")));
    }
    Ok(())
}

/// `lambda0^max(rho)` from prebuilt channel problems.
pub fn lambda_max_from(problems: &[ChannelProblem], rho: f64) -> Result<f64> {
    check_rho(rho)?;
    Ok(problems
        .par_iter()
        .map(|cp| {
            (0..cp.peers().len())
                .map(|a| {
                    let g: Vec<f64> = (0..cp.n_times()).map(|k| cp.cross(k)[a]).collect();
                    coordinate_lambda_max(&g, rho)
                })
                .fold(0.0, f64::max)
        })
        .reduce(|| 0.0, f64::max))
}

/// Smallest `lambda0` at which the dynamic fit is identically zero,
/// certified through the optimality conditions at zero.
pub fn lambda_max(data: &FunctionalDataset, rho: f64, noise: &NoiseModel) -> Result<f64> {
    lambda_max_from(&solver::build_problems(data, noise)?, rho)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub rho_values: Vec<f64>,
    /// Number of `lambda0` candidates per `rho`.
    pub n_lambda: usize,
    /// Candidates are log-spaced over `(min_ratio * max, max]`.
    pub min_ratio: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self { rho_values: vec![0.1, 0.3, 0.5, 0.7, 0.9], n_lambda: 10, min_ratio: 0.01 }
    }
}

impl GridSpec {
    fn validate(&self) -> Result<()> {
        if self.rho_values.is_empty() || self.n_lambda == 0 {
            return Err(DfslError::invalid("tuning grid is empty"));
        }
        for &rho in &self.rho_values {
            check_rho(rho)?;
        }
        if !(self.min_ratio > 0.0 && self.min_ratio < 1.0) {
            return Err(DfslError::invalid(format!("min_ratio must lie in (0, 1), got {}", self.min_ratio)));
        }
        Ok(())
    }

    /// `max * min_ratio^(i / n_lambda)` for `i = 0..n_lambda`, descending.
    pub fn lambda_values(&self, max: f64) -> Vec<f64> {
        (0..self.n_lambda).map(|i| max * self.min_ratio.powf(i as f64 / self.n_lambda as f64)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningCell {
    pub rho: f64,
    pub lambda0: f64,
    pub lambda0_max: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub criterion: f64,
    /// `(N n) sum_j log(RSS_j / (N n))`.
    pub fit_term: f64,
    pub nonzeros: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuningGrid {
    pub rho_values: Vec<f64>,
    pub n_lambda: usize,
    pub cells: Vec<TuningCell>,
}

impl TuningGrid {
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for cell in &self.cells {
            w.serialize(cell)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub penalties: PenaltyConfig,
    pub cell: usize,
    pub grid: TuningGrid,
    pub fit: DfslFit,
}

/// Criterion value split into its fit term and total nonzero count.
fn criterion(rss: impl Iterator<Item = f64>, nonzeros: usize, n_obs: f64) -> (f64, f64) {
    let fit_term: f64 = rss.map(|r| n_obs * (r.max(f64::MIN_POSITIVE) / n_obs).ln()).sum();
    (fit_term, fit_term + n_obs.ln() * nonzeros as f64)
}

/// Index of the best cell: lowest criterion among converged cells, ties to
/// larger `lambda0`, then larger `rho`.
fn argmin(cells: &[TuningCell]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, c) in cells.iter().enumerate() {
        if !c.converged || !c.criterion.is_finite() {
            continue;
        }
        best = match best {
            None => Some(i),
            Some(b) => {
                let o = &cells[b];
                let better = c
                    .criterion
                    .total_cmp(&o.criterion)
                    .then(o.lambda0.total_cmp(&c.lambda0))
                    .then(o.rho.total_cmp(&c.rho))
                    .is_lt();
                Some(if better { i } else { b })
            }
        };
    }
    best
}

fn no_converged(cells: &[TuningCell]) -> DfslError {
    let detail: Vec<String> = cells
        .iter()
        .map(|c| format!("rho={} lambda0={:.4e} converged={}", c.rho, c.lambda0, c.converged))
        .collect();
    DfslError::NoConvergedCell(detail.join("; "))
}

/// Fit every grid cell and return the one minimizing the criterion.
pub fn select(data: &FunctionalDataset, grid: &GridSpec, noise: &NoiseModel, opts: &FistaOptions) -> Result<Selection> {
    grid.validate()?;
    let problems = solver::build_problems(data, noise)?;
    let n_obs = (data.n_samples() * data.n_times()) as f64;
    let mut specs = Vec::new();
    for &rho in &grid.rho_values {
        let max = lambda_max_from(&problems, rho)?;
        for lambda0 in grid.lambda_values(max) {
            specs.push((rho, lambda0, max));
        }
    }
    let results: Vec<(TuningCell, DfslFit)> = specs
        .par_iter()
        .map(|&(rho, lambda0, max)| {
            let penalties = PenaltyConfig::from_lambda0(lambda0, rho)?;
            let fit = solver::fit_problems(&problems, penalties, opts);
            let nonzeros: usize = (0..data.n_channels()).map(|j| fit.path.nonzero_count(j)).sum();
            let rss = problems.iter().enumerate().map(|(j, cp)| cp.rss(&cp.restrict(&slice_of(&fit.path, j))));
            let (fit_term, value) = criterion(rss, nonzeros, n_obs);
            let cell = TuningCell {
                rho,
                lambda0,
                lambda0_max: max,
                lambda1: penalties.lambda1,
                lambda2: penalties.lambda2,
                criterion: value,
                fit_term,
                nonzeros,
                converged: fit.converged(),
            };
            Ok((cell, fit))
        })
        .collect::<Result<_>>()?;
    let cells: Vec<TuningCell> = results.iter().map(|(c, _)| c.clone()).collect();
    let best = argmin(&cells).ok_or_else(|| no_converged(&cells))?;
    let penalties = PenaltyConfig::new(cells[best].lambda1, cells[best].lambda2)?;
    let fit = results.into_iter().nth(best).expect("index from cells").1;
    let grid = TuningGrid { rho_values: grid.rho_values.clone(), n_lambda: grid.n_lambda, cells };
    Ok(Selection { penalties, cell: best, grid, fit })
}

fn slice_of(path: &CoefficientPath, j: usize) -> nalgebra::DMatrix<f64> {
    let ch = path.channel(j);
    nalgebra::DMatrix::from_fn(ch.nrows(), ch.ncols(), |r, k| ch[(r, k)])
}

/// Selected static baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct StaticSelection {
    pub lambda: f64,
    pub criterion: f64,
    pub fit: StaticFit,
}

/// Tune the static baseline's single penalty with the same criterion.
pub fn select_static(
    data: &FunctionalDataset,
    n_lambda: usize,
    min_ratio: f64,
    noise: &NoiseModel,
    opts: &FistaOptions,
) -> Result<StaticSelection> {
    let grid = GridSpec { rho_values: vec![0.5], n_lambda, min_ratio };
    grid.validate()?;
    let statics: Vec<StaticProblem> =
        solver::build_problems(data, noise)?.iter().map(StaticProblem::from_channel).collect();
    let max = statics.iter().map(|sp| sp.cross.amax()).fold(0.0, f64::max);
    let n_obs = (data.n_samples() * data.n_times()) as f64;
    let results: Vec<(f64, f64, bool, StaticFit)> = grid
        .lambda_values(max)
        .into_par_iter()
        .map(|lambda| {
            let fit = solver::fit_static_problems(&statics, lambda, opts);
            let nonzeros = fit.b.iter().filter(|v| v.abs() > ZERO_THRESHOLD).count();
            let rss = statics.iter().enumerate().map(|(j, sp)| {
                let beta = nalgebra::DVector::from_iterator(sp.peers.len(), sp.peers.iter().map(|&r| fit.b[(j, r)]));
                2.0 * sp.loss(&beta)
            });
            let (_, value) = criterion(rss, nonzeros, n_obs);
            (lambda, value, fit.converged(), fit)
        })
        .collect();
    let mut best: Option<usize> = None;
    for (i, r) in results.iter().enumerate() {
        if !r.2 || !r.1.is_finite() {
            continue;
        }
        // candidates are in descending lambda order, so strict improvement keeps ties sparse
        if best.is_none_or(|b| r.1 < results[b].1) {
            best = Some(i);
        }
    }
    let best = best.ok_or_else(|| DfslError::NoConvergedCell("no converged static fit".into()))?;
    let (lambda, criterion, _, fit) = results.into_iter().nth(best).expect("index from results");
    Ok(StaticSelection { lambda, criterion, fit })
}
