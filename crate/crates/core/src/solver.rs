//! Time-varying self-expressive regression.
//!
//! For channel `j` the dynamic problem is
//!
//! ```text
//! min  lambda1 sum_r ||D b_jr||_1 + lambda2 sum_r ||b_jr||_1
//!      + 1/2 sum_i || Yw_ij - sum_{r != j} diag(Yw_ir) b_jr ||^2
//! ```
//!
//! where `Yw_ir = Gamma_j^{-1/2} Y_ir` is the data whitened with channel
//! `j`'s noise autocorrelation and `D` takes first differences in time. The
//! smooth part is separable over time points, so it is summarised by a small
//! Gram matrix and cross-product vector per time point. FISTA alternates a
//! gradient step on those statistics with the exact fused lasso proximal
//! operator for each peer channel.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::{Array3, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{FunctionalDataset, NoiseModel, NoiseModelRecord};
use crate::flsa::{flsa_into, soft_threshold};
use crate::linalg;
use crate::{DfslError, Result};

/// Entries with magnitude at or below this count as zero.
pub const ZERO_THRESHOLD: f64 = 1e-10;

/// Eigenvalue floor used when inverting autocorrelation matrices.
pub const EIGEN_FLOOR: f64 = 1e-10;

/// Dense `p x p x n` coefficient tensor, entry `(j, r, k)` = `b_jr(t_k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientPath {
    values: Array3<f64>,
}

impl CoefficientPath {
    pub fn new(values: Array3<f64>) -> Result<Self> {
        let (p, p2, _) = values.dim();
        if p != p2 {
            return Err(DfslError::mismatch(format!("coefficient tensor must be p x p x n, got {p} x {p2}")));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(DfslError::NonFinite("coefficient path"));
        }
        for j in 0..p {
            if values.slice(ndarray::s![j, j, ..]).iter().any(|&v| v != 0.0) {
                return Err(DfslError::invalid(format!("diagonal coefficients of channel {j} must be zero")));
            }
        }
        Ok(Self { values })
    }

    pub fn zeros(p: usize, n: usize) -> Self {
        Self { values: Array3::zeros((p, p, n)) }
    }

    /// Time-constant path from a static `p x p` matrix.
    pub fn constant(b: &DMatrix<f64>, n: usize) -> Result<Self> {
        let p = b.nrows();
        Self::new(Array3::from_shape_fn((p, p, n), |(j, r, _)| if j == r { 0.0 } else { b[(j, r)] }))
    }

    pub fn n_channels(&self) -> usize {
        self.values.dim().0
    }

    pub fn n_times(&self) -> usize {
        self.values.dim().2
    }

    pub fn values(&self) -> &Array3<f64> {
        &self.values
    }

    pub fn get(&self, j: usize, r: usize, k: usize) -> f64 {
        self.values[(j, r, k)]
    }

    /// Coefficients of channel `j` as a `p x n` view (row `r` is `b_jr`).
    pub fn channel(&self, j: usize) -> ArrayView2<'_, f64> {
        self.values.index_axis(Axis(0), j)
    }

    /// Time average `sum_k b_j(t_k) / n` of channel `j`'s coefficients.
    pub fn time_average(&self, j: usize) -> Vec<f64> {
        let n = self.n_times() as f64;
        self.channel(j).rows().into_iter().map(|row| row.sum() / n).collect()
    }

    /// Number of entries of channel `j` with `|b| > ZERO_THRESHOLD`.
    pub fn nonzero_count(&self, j: usize) -> usize {
        self.channel(j).iter().filter(|v| v.abs() > ZERO_THRESHOLD).count()
    }

    /// Same path with channels reordered: new channel `a` is old `perm[a]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let (p, _, n) = self.values.dim();
        Self { values: Array3::from_shape_fn((p, p, n), |(a, b, k)| self.values[(perm[a], perm[b], k)]) }
    }

    pub fn to_record(&self) -> CoefficientPathRecord {
        let (p, _, n) = self.values.dim();
        CoefficientPathRecord { p, n, values: self.values.iter().copied().collect() }
    }

    pub fn from_record(rec: &CoefficientPathRecord) -> Result<Self> {
        let values = Array3::from_shape_vec((rec.p, rec.p, rec.n), rec.values.clone())
            .map_err(|e| DfslError::mismatch(format!("coefficient path record: {e}")))?;
        Self::new(values)
    }
}

/// Row-major `(j, r, k)` serialization of a [`CoefficientPath`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientPathRecord {
    pub p: usize,
    pub n: usize,
    pub values: Vec<f64>,
}

/// Penalty weights: `lambda1` on successive differences (fusion) and
/// `lambda2` on magnitudes (sparsity).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PenaltyConfig {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl PenaltyConfig {
    pub fn new(lambda1: f64, lambda2: f64) -> Result<Self> {
        if !(lambda1.is_finite() && lambda2.is_finite()) || lambda1 < 0.0 || lambda2 < 0.0 {
            return Err(DfslError::invalid(format!(
                "penalties must be finite and non-negative, got lambda1={lambda1}, lambda2={lambda2}"
            )));
        }
        Ok(Self { lambda1, lambda2 })
    }

    /// `lambda1 = rho * lambda0`, `lambda2 = (1 - rho) * lambda0`.
    pub fn from_lambda0(lambda0: f64, rho: f64) -> Result<Self> {
        if !(rho > 0.0 && rho < 1.0) {
            return Err(DfslError::invalid(format!("rho must lie in (0, 1), got {rho}")));
        }
        Self::new(rho * lambda0, (1.0 - rho) * lambda0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FistaOptions {
    /// Stop once `sum_r ||b^k - b^{k-1}||^2` drops to this value.
    pub tol: f64,
    pub max_iter: usize,
    /// Reset momentum whenever the objective increases.
    pub restart: bool,
}

impl Default for FistaOptions {
    fn default() -> Self {
        Self { tol: 1e-8, max_iter: 5000, restart: true }
    }
}

/// Iteration state of FISTA for one channel.
#[derive(Debug, Clone)]
pub struct FistaState {
    /// Current iterate, `(p - 1) x n`.
    pub current: DMatrix<f64>,
    pub previous: DMatrix<f64>,
    /// Momentum scalar `t_k >= 1`.
    pub momentum: f64,
    pub lipschitz: f64,
    pub iteration: usize,
    pub tol: f64,
}

/// Sufficient statistics of one channel's smooth loss.
#[derive(Debug, Clone)]
pub struct ChannelProblem {
    channel: usize,
    peers: Vec<usize>,
    /// Per time point, `G_k[a, b] = sum_i Yw_{i,k,peer a} Yw_{i,k,peer b}`.
    gram: Vec<DMatrix<f64>>,
    /// Per time point, `g_k[a] = sum_i Yw_{i,k,peer a} Yw_{i,k,j}`.
    cross: Vec<DVector<f64>>,
    /// `sum_i ||Yw_ij||^2`.
    target_energy: f64,
    lipschitz: f64,
}

impl ChannelProblem {
    /// Statistics for channel `j`, whitened by `noise.gamma(j)`.
    pub fn build(data: &FunctionalDataset, j: usize, noise: &NoiseModel) -> Result<Self> {
        noise.check_dims(data)?;
        check_channel(data, j)?;
        let gamma = noise.gamma(j);
        let whitener = if linalg::is_identity(gamma) { None } else { Some(linalg::sym_inv_sqrt(gamma, EIGEN_FLOOR)) };
        Ok(Self::with_whitener(data, j, whitener.as_ref()))
    }

    /// Statistics with an explicit whitening matrix (`None` = raw data).
    pub fn with_whitener(data: &FunctionalDataset, j: usize, whitener: Option<&DMatrix<f64>>) -> Self {
        let (n_samples, n, p) = data.values().dim();
        let peers: Vec<usize> = (0..p).filter(|&r| r != j).collect();
        let q = peers.len();
        let mut gram = vec![DMatrix::zeros(q, q); n];
        let mut cross = vec![DVector::zeros(q); n];
        let mut target_energy = 0.0;
        let mut sample = DMatrix::zeros(n, p);
        for i in 0..n_samples {
            let view = data.sample(i);
            for k in 0..n {
                for c in 0..p {
                    sample[(k, c)] = view[(k, c)];
                }
            }
            let w = match whitener {
                Some(w) => w * &sample,
                None => sample.clone(),
            };
            for k in 0..n {
                let y = w[(k, j)];
                target_energy += y * y;
                let g = &mut gram[k];
                for (a, &ra) in peers.iter().enumerate() {
                    let ya = w[(k, ra)];
                    cross[k][a] += ya * y;
                    for (b, &rb) in peers.iter().enumerate().skip(a) {
                        g[(a, b)] += ya * w[(k, rb)];
                    }
                }
            }
        }
        for g in &mut gram {
            for a in 0..q {
                for b in 0..a {
                    g[(a, b)] = g[(b, a)];
                }
            }
        }
        let lipschitz = gram
            .iter()
            .map(|g| if q == 0 { 0.0 } else { SymmetricEigen::new(g.clone()).eigenvalues.max() })
            .fold(0.0, f64::max);
        Self { channel: j, peers, gram, cross, target_energy, lipschitz }
    }

    pub fn channel(&self) -> usize {
        self.channel
    }

    pub fn peers(&self) -> &[usize] {
        &self.peers
    }

    pub fn n_times(&self) -> usize {
        self.gram.len()
    }

    pub fn gram(&self, k: usize) -> &DMatrix<f64> {
        &self.gram[k]
    }

    pub fn cross(&self, k: usize) -> &DVector<f64> {
        &self.cross[k]
    }

    /// Squared spectral norm of the stacked whitened design.
    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    /// Smooth loss at `b` (`(p - 1) x n`, rows follow [`Self::peers`]).
    pub fn loss(&self, b: &DMatrix<f64>) -> f64 {
        let mut acc = self.target_energy;
        for k in 0..self.n_times() {
            let bk = b.column(k);
            acc += (bk.transpose() * &self.gram[k] * bk)[(0, 0)] - 2.0 * bk.dot(&self.cross[k]);
        }
        0.5 * acc.max(0.0)
    }

    /// Whitened residual sum of squares `sum_i ||Yw_ij - sum_r diag(Yw_ir) b_jr||^2`.
    pub fn rss(&self, b: &DMatrix<f64>) -> f64 {
        2.0 * self.loss(b)
    }

    pub fn objective(&self, b: &DMatrix<f64>, penalties: PenaltyConfig) -> f64 {
        self.loss(b) + penalty(b, penalties)
    }

    fn gradient_into(&self, b: &DMatrix<f64>, out: &mut DMatrix<f64>) {
        for k in 0..self.n_times() {
            let gk = &self.gram[k] * b.column(k) - &self.cross[k];
            out.column_mut(k).copy_from(&gk);
        }
    }

    /// Minimize the channel objective by FISTA from `init` (zeros if absent).
    pub fn solve(&self, penalties: PenaltyConfig, opts: &FistaOptions, init: Option<&DMatrix<f64>>) -> ChannelSolution {
        let (q, n) = (self.peers.len(), self.n_times());
        let start = init.cloned().unwrap_or_else(|| DMatrix::zeros(q, n));
        if q == 0 || n == 0 || self.lipschitz <= 0.0 {
            // no peer signal: the loss is constant and zero is optimal
            let b = DMatrix::zeros(q, n);
            let objective = self.objective(&b, penalties);
            return ChannelSolution { coefficients: b, objective, iterations: 0, converged: true };
        }
        let l = self.lipschitz;
        let (s_sparse, s_fuse) = (penalties.lambda2 / l, penalties.lambda1 / l);
        let mut state = FistaState {
            previous: start.clone(),
            current: start,
            momentum: 1.0,
            lipschitz: l,
            iteration: 0,
            tol: opts.tol,
        };
        let mut search = state.current.clone();
        let mut grad = DMatrix::zeros(q, n);
        let mut next = DMatrix::zeros(q, n);
        let mut z = vec![0.0; n];
        let mut row = vec![0.0; n];
        let mut current_obj = self.objective(&state.current, penalties);
        let mut best = (state.current.clone(), current_obj);
        let mut converged = false;
        while state.iteration < opts.max_iter {
            state.iteration += 1;
            self.gradient_into(&search, &mut grad);
            for a in 0..q {
                for k in 0..n {
                    z[k] = search[(a, k)] - grad[(a, k)] / l;
                }
                flsa_into(&z, s_sparse, s_fuse, &mut row);
                for k in 0..n {
                    next[(a, k)] = row[k];
                }
            }
            let next_obj = self.objective(&next, penalties);
            if opts.restart && next_obj > current_obj && state.momentum > 1.0 {
                // drop the momentum and retake a plain proximal step
                state.momentum = 1.0;
                search.copy_from(&state.current);
                continue;
            }
            let change = (&next - &state.current).norm_squared();
            std::mem::swap(&mut state.previous, &mut state.current);
            state.current.copy_from(&next);
            current_obj = next_obj;
            if current_obj < best.1 {
                best = (state.current.clone(), current_obj);
            }
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * state.momentum * state.momentum).sqrt());
            let beta = (state.momentum - 1.0) / t_next;
            state.momentum = t_next;
            search.copy_from(&state.current);
            search += (&state.current - &state.previous) * beta;
            if change <= opts.tol {
                converged = true;
                break;
            }
        }
        ChannelSolution { coefficients: best.0, objective: best.1, iterations: state.iteration, converged }
    }

    /// Expand a `(p - 1) x n` solution to `p x n` with a zero row `j`.
    pub fn expand(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let p = self.peers.len() + 1;
        let mut out = DMatrix::zeros(p, b.ncols());
        for (a, &r) in self.peers.iter().enumerate() {
            out.row_mut(r).copy_from(&b.row(a));
        }
        out
    }

    /// Restrict a `p x n` slice to the peer rows.
    pub fn restrict(&self, slice: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(self.peers.len(), slice.ncols(), |a, k| slice[(self.peers[a], k)])
    }
}

/// `lambda1 sum_r ||D b_r||_1 + lambda2 sum_r ||b_r||_1` over the rows of `b`.
pub fn penalty(b: &DMatrix<f64>, penalties: PenaltyConfig) -> f64 {
    let mut fuse = 0.0;
    let mut sparse = 0.0;
    for a in 0..b.nrows() {
        for k in 0..b.ncols() {
            sparse += b[(a, k)].abs();
            if k > 0 {
                fuse += (b[(a, k)] - b[(a, k - 1)]).abs();
            }
        }
    }
    penalties.lambda1 * fuse + penalties.lambda2 * sparse
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSolution {
    /// `(p - 1) x n`, rows follow the peer order.
    pub coefficients: DMatrix<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Per-channel result with the coefficients laid out as `p x n`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelFit {
    pub slice: DMatrix<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn check_channel(data: &FunctionalDataset, j: usize) -> Result<()> {
    if j >= data.n_channels() {
        return Err(DfslError::invalid(format!("channel {j} out of range for {} channels", data.n_channels())));
    }
    Ok(())
}

/// Fit channel `j` of the dynamic model.
pub fn fit_channel_dfsl(
    data: &FunctionalDataset,
    j: usize,
    penalties: PenaltyConfig,
    noise: &NoiseModel,
    opts: &FistaOptions,
) -> Result<ChannelFit> {
    let problem = ChannelProblem::build(data, j, noise)?;
    let sol = problem.solve(penalties, opts, None);
    Ok(ChannelFit {
        slice: problem.expand(&sol.coefficients),
        objective: sol.objective,
        iterations: sol.iterations,
        converged: sol.converged,
    })
}

/// Squared spectral norm of channel `j`'s stacked whitened design.
pub fn lipschitz_constant(data: &FunctionalDataset, j: usize, noise: &NoiseModel) -> Result<f64> {
    Ok(ChannelProblem::build(data, j, noise)?.lipschitz())
}

/// Value of channel `j`'s dynamic objective at a `p x n` slice.
pub fn objective(
    data: &FunctionalDataset,
    j: usize,
    penalties: PenaltyConfig,
    noise: &NoiseModel,
    slice: &DMatrix<f64>,
) -> Result<f64> {
    let problem = ChannelProblem::build(data, j, noise)?;
    if slice.nrows() != data.n_channels() || slice.ncols() != data.n_times() {
        return Err(DfslError::mismatch("coefficient slice must be p x n"));
    }
    Ok(problem.objective(&problem.restrict(slice), penalties))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelDiagnostics {
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DfslFit {
    pub path: CoefficientPath,
    pub diagnostics: Vec<ChannelDiagnostics>,
}

impl DfslFit {
    pub fn converged(&self) -> bool {
        self.diagnostics.iter().all(|d| d.converged)
    }

    pub fn objective(&self) -> f64 {
        self.diagnostics.iter().map(|d| d.objective).sum()
    }
}

fn assemble(p: usize, n: usize, fits: Vec<ChannelFit>) -> DfslFit {
    let mut values = Array3::zeros((p, p, n));
    let mut diagnostics = Vec::with_capacity(p);
    for (j, fit) in fits.into_iter().enumerate() {
        for r in 0..p {
            for k in 0..n {
                values[(j, r, k)] = fit.slice[(r, k)];
            }
        }
        diagnostics.push(ChannelDiagnostics { objective: fit.objective, iterations: fit.iterations, converged: fit.converged });
    }
    DfslFit { path: CoefficientPath { values }, diagnostics }
}

fn with_channel<T>(j: usize, r: Result<T>) -> Result<T> {
    r.map_err(|e| DfslError::Channel { channel: j, source: Box::new(e) })
}

/// Fit every channel of the dynamic model (channels in parallel).
pub fn fit_dfsl(
    data: &FunctionalDataset,
    penalties: PenaltyConfig,
    noise: &NoiseModel,
    opts: &FistaOptions,
) -> Result<DfslFit> {
    Ok(fit_problems(&build_problems(data, noise)?, penalties, opts))
}

/// Sufficient statistics of every channel (built in parallel).
pub fn build_problems(data: &FunctionalDataset, noise: &NoiseModel) -> Result<Vec<ChannelProblem>> {
    noise.check_dims(data)?;
    (0..data.n_channels())
        .into_par_iter()
        .map(|j| with_channel(j, ChannelProblem::build(data, j, noise)))
        .collect()
}

/// Fit prebuilt channel problems, e.g. across a penalty grid.
pub fn fit_problems(problems: &[ChannelProblem], penalties: PenaltyConfig, opts: &FistaOptions) -> DfslFit {
    let p = problems.len();
    let n = problems.first().map_or(0, ChannelProblem::n_times);
    let fits = problems
        .par_iter()
        .map(|cp| {
            let sol = cp.solve(penalties, opts, None);
            ChannelFit {
                slice: cp.expand(&sol.coefficients),
                objective: sol.objective,
                iterations: sol.iterations,
                converged: sol.converged,
            }
        })
        .collect();
    assemble(p, n, fits)
}

/// Time-constant coefficients of the static baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct StaticFit {
    /// `p x p`, row `j` holds channel `j`'s coefficients, zero diagonal.
    pub b: DMatrix<f64>,
    pub diagnostics: Vec<ChannelDiagnostics>,
}

impl StaticFit {
    pub fn as_path(&self, n: usize) -> CoefficientPath {
        CoefficientPath::constant(&self.b, n).expect("static fit has a zero diagonal")
    }

    pub fn converged(&self) -> bool {
        self.diagnostics.iter().all(|d| d.converged)
    }
}

/// Lasso statistics of the static problem: the dynamic ones summed over time.
#[derive(Debug, Clone)]
pub struct StaticProblem {
    pub peers: Vec<usize>,
    pub gram: DMatrix<f64>,
    pub cross: DVector<f64>,
    pub target_energy: f64,
    pub lipschitz: f64,
}

impl StaticProblem {
    pub fn from_channel(problem: &ChannelProblem) -> Self {
        let q = problem.peers.len();
        let mut gram = DMatrix::zeros(q, q);
        let mut cross = DVector::zeros(q);
        for k in 0..problem.n_times() {
            gram += &problem.gram[k];
            cross += &problem.cross[k];
        }
        let lipschitz = if q == 0 { 0.0 } else { SymmetricEigen::new(gram.clone()).eigenvalues.max().max(0.0) };
        Self { peers: problem.peers.clone(), gram, cross, target_energy: problem.target_energy, lipschitz }
    }

    pub fn loss(&self, beta: &DVector<f64>) -> f64 {
        let quad = (beta.transpose() * &self.gram * beta)[(0, 0)];
        0.5 * (self.target_energy + quad - 2.0 * beta.dot(&self.cross)).max(0.0)
    }

    pub fn objective(&self, beta: &DVector<f64>, lambda: f64) -> f64 {
        self.loss(beta) + lambda * beta.lp_norm(1)
    }

    /// Lasso by FISTA with the same stopping and restart rules.
    pub fn solve(&self, lambda: f64, opts: &FistaOptions) -> (DVector<f64>, ChannelDiagnostics) {
        let q = self.peers.len();
        let zero = DVector::zeros(q);
        if q == 0 || self.lipschitz <= 0.0 {
            let objective = self.objective(&zero, lambda);
            return (zero, ChannelDiagnostics { objective, iterations: 0, converged: true });
        }
        let l = self.lipschitz;
        let (mut current, mut previous, mut search) = (zero.clone(), zero.clone(), zero);
        let mut t: f64 = 1.0;
        let mut current_obj = self.objective(&current, lambda);
        let mut best = (current.clone(), current_obj);
        let mut converged = false;
        let mut iterations = 0;
        while iterations < opts.max_iter {
            iterations += 1;
            let grad = &self.gram * &search - &self.cross;
            let next = DVector::from_fn(q, |a, _| soft_threshold(search[a] - grad[a] / l, lambda / l));
            let next_obj = self.objective(&next, lambda);
            if opts.restart && next_obj > current_obj && t > 1.0 {
                t = 1.0;
                search.copy_from(&current);
                continue;
            }
            let change = (&next - &current).norm_squared();
            previous.copy_from(&current);
            current = next;
            current_obj = next_obj;
            if current_obj < best.1 {
                best = (current.clone(), current_obj);
            }
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
            search = &current + (&current - &previous) * ((t - 1.0) / t_next);
            t = t_next;
            if change <= opts.tol {
                converged = true;
                break;
            }
        }
        (best.0, ChannelDiagnostics { objective: best.1, iterations, converged })
    }
}

/// Static baseline: a lasso on the time-stacked whitened regression.
pub fn fit_sfsl(data: &FunctionalDataset, lambda: f64, noise: &NoiseModel, opts: &FistaOptions) -> Result<StaticFit> {
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(DfslError::invalid(format!("lambda must be finite and non-negative, got {lambda}")));
    }
    let statics: Vec<StaticProblem> = build_problems(data, noise)?.iter().map(StaticProblem::from_channel).collect();
    Ok(fit_static_problems(&statics, lambda, opts))
}

/// Fit prebuilt static problems.
pub fn fit_static_problems(problems: &[StaticProblem], lambda: f64, opts: &FistaOptions) -> StaticFit {
    let p = problems.len();
    let fits: Vec<_> = problems
        .par_iter()
        .map(|sp| {
            let (beta, diag) = sp.solve(lambda, opts);
            (sp.peers.clone(), beta, diag)
        })
        .collect();
    let mut b = DMatrix::zeros(p, p);
    let mut diagnostics = Vec::with_capacity(p);
    for (j, (peers, beta, diag)) in fits.into_iter().enumerate() {
        for (a, &r) in peers.iter().enumerate() {
            b[(j, r)] = beta[a];
        }
        diagnostics.push(diag);
    }
    StaticFit { b, diagnostics }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BcdOptions {
    pub fista: FistaOptions,
    /// Outer stop: summed squared coefficient change.
    pub tol_b: f64,
    /// Outer stop: summed squared spectral-norm covariance change.
    pub tol_sigma: f64,
    pub max_outer: usize,
    /// Keep this noise model instead of estimating one.
    pub fixed_noise: Option<NoiseModel>,
}

impl Default for BcdOptions {
    fn default() -> Self {
        Self { fista: FistaOptions::default(), tol_b: 1e-6, tol_sigma: 1e-4, max_outer: 20, fixed_noise: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BcdFit {
    pub fit: DfslFit,
    /// Noise model used for the final coefficient fit.
    pub noise: NoiseModel,
    /// Shrunk residual covariance `Sigma_j` per channel.
    pub covariances: Vec<DMatrix<f64>>,
    pub outer_iterations: usize,
    pub converged: bool,
}

/// Per-time least squares `b_j(t_k) = G_k^{-1} g_k` on the raw data, with a
/// small ridge when `G_k` is singular.
pub fn per_time_ols(problem: &ChannelProblem) -> DMatrix<f64> {
    let (q, n) = (problem.peers.len(), problem.n_times());
    let mut out = DMatrix::zeros(q, n);
    for k in 0..n {
        let g = &problem.gram[k];
        let sol = g.clone().cholesky().map(|c| c.solve(&problem.cross[k])).or_else(|| {
            let ridge = 1e-6 * (g.trace() / q.max(1) as f64).max(f64::MIN_POSITIVE);
            (g + DMatrix::identity(q, q) * ridge).cholesky().map(|c| c.solve(&problem.cross[k]))
        });
        if let Some(b) = sol {
            out.column_mut(k).copy_from(&b);
        }
    }
    out
}

/// Residuals `eps_ij = Y_ij - sum_r Y_ir * b_jr` of channel `j`, `N x n`.
pub fn residuals(data: &FunctionalDataset, j: usize, slice: &DMatrix<f64>) -> DMatrix<f64> {
    let (n_samples, n, p) = data.values().dim();
    DMatrix::from_fn(n_samples, n, |i, k| {
        let y = data.values();
        let mut e = y[(i, k, j)];
        for r in 0..p {
            if r != j {
                e -= y[(i, k, r)] * slice[(r, k)];
            }
        }
        e
    })
}

/// Sample covariance `(1/N) sum_i eps_i eps_i'` shrunk toward its diagonal
/// with weight `min(1, n / (10 N))`.
pub fn shrunk_covariance(resid: &DMatrix<f64>) -> DMatrix<f64> {
    let (n_samples, n) = (resid.nrows(), resid.ncols());
    let mut cov = resid.transpose() * resid / n_samples as f64;
    let gamma = (n as f64 / (10.0 * n_samples as f64)).min(1.0);
    for u in 0..n {
        for v in 0..n {
            if u != v {
                cov[(u, v)] *= 1.0 - gamma;
            }
        }
    }
    linalg::symmetrize(&cov)
}

/// Alternate coefficient fits and residual covariance estimates.
pub fn fit_bcd(data: &FunctionalDataset, penalties: PenaltyConfig, opts: &BcdOptions) -> Result<BcdFit> {
    let (p, n) = (data.n_channels(), data.n_times());
    if let Some(noise) = &opts.fixed_noise {
        // the problem is convex for known noise: one fit is the whole loop
        let fit = fit_dfsl(data, penalties, noise, &opts.fista)?;
        let covariances = (0..p).map(|j| noise.covariance(j)).collect();
        let converged = fit.converged();
        return Ok(BcdFit { fit, noise: noise.clone(), covariances, outer_iterations: 1, converged });
    }
    if opts.max_outer == 0 {
        return Err(DfslError::invalid("max_outer must be positive"));
    }
    let identity = NoiseModel::identity(p, n, 1.0);
    let mut slices: Vec<DMatrix<f64>> = (0..p)
        .into_par_iter()
        .map(|j| ChannelProblem::build(data, j, &identity).map(|cp| cp.expand(&per_time_ols(&cp))))
        .collect::<Result<_>>()?;
    let mut covariances: Option<Vec<DMatrix<f64>>> = None;
    let mut last: Option<(DfslFit, NoiseModel)> = None;
    let mut converged = false;
    let mut outer = 0;
    while outer < opts.max_outer {
        outer += 1;
        let cov: Vec<DMatrix<f64>> = (0..p).into_par_iter().map(|j| shrunk_covariance(&residuals(data, j, &slices[j]))).collect();
        let noise = NoiseModel::from_covariances(&cov)?;
        let fits = (0..p)
            .into_par_iter()
            .map(|j| {
                with_channel(j, ChannelProblem::build(data, j, &noise)).map(|cp| {
                    let init = cp.restrict(&slices[j]);
                    let sol = cp.solve(penalties, &opts.fista, Some(&init));
                    ChannelFit {
                        slice: cp.expand(&sol.coefficients),
                        objective: sol.objective,
                        iterations: sol.iterations,
                        converged: sol.converged,
                    }
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let fit = assemble(p, n, fits);
        let new_slices: Vec<DMatrix<f64>> = (0..p)
            .map(|j| DMatrix::from_fn(p, n, |r, k| fit.path.get(j, r, k)))
            .collect();
        let db: f64 = new_slices.iter().zip(&slices).map(|(a, b)| (a - b).norm_squared()).sum();
        let ds = covariances
            .as_ref()
            .map(|old| old.iter().zip(&cov).map(|(a, b)| linalg::spectral_norm(&(a - b)).powi(2)).sum::<f64>());
        slices = new_slices;
        covariances = Some(cov);
        last = Some((fit, noise));
        if db <= opts.tol_b && ds.is_some_and(|d| d <= opts.tol_sigma) {
            converged = true;
            break;
        }
    }
    let (fit, noise) = last.expect("at least one outer iteration");
    Ok(BcdFit { fit, noise, covariances: covariances.expect("set with fit"), outer_iterations: outer, converged })
}

/// JSON form of a fitted model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitRecord {
    pub path: CoefficientPathRecord,
    pub noise: NoiseModelRecord,
    pub penalties: PenaltyConfig,
    pub converged: Vec<bool>,
    pub iterations: Vec<usize>,
}

impl FitRecord {
    pub fn new(fit: &DfslFit, noise: &NoiseModel, penalties: PenaltyConfig) -> Self {
        Self {
            path: fit.path.to_record(),
            noise: noise.to_record(),
            penalties,
            converged: fit.diagnostics.iter().map(|d| d.converged).collect(),
            iterations: fit.diagnostics.iter().map(|d| d.iterations).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn dataset(values: Vec<f64>, shape: (usize, usize, usize)) -> FunctionalDataset {
        FunctionalDataset::from_values(Array3::from_shape_vec(shape, values).unwrap()).unwrap()
    }

    fn wavy(n_samples: usize, n: usize, p: usize, seed: u64) -> FunctionalDataset {
        let v = Array3::from_shape_fn((n_samples, n, p), |(i, k, j)| {
            ((seed as f64 + 1.0) * (i as f64 + 0.3) * (k as f64 + 1.1) * (j as f64 + 0.7)).sin()
        });
        FunctionalDataset::from_values(v).unwrap()
    }

    #[test]
    fn lipschitz_of_a_single_point() {
        let data = dataset(vec![0.7, -1.3], (1, 1, 2));
        let noise = NoiseModel::identity(2, 1, 1.0);
        assert!((lipschitz_constant(&data, 0, &noise).unwrap() - 1.69).abs() < 1e-15);
        assert!((lipschitz_constant(&data, 1, &noise).unwrap() - 0.49).abs() < 1e-15);
    }

    #[test]
    fn lipschitz_is_quadratically_homogeneous() {
        let data = wavy(4, 6, 3, 1);
        let scaled = FunctionalDataset::from_values(data.values() * 3.0).unwrap();
        let noise = NoiseModel::segmented_ar1(3, &[6], 0.4, 1.0).unwrap();
        let a = lipschitz_constant(&data, 1, &noise).unwrap();
        let b = lipschitz_constant(&scaled, 1, &noise).unwrap();
        assert!((b / a - 9.0).abs() < 1e-12);
    }

    #[test]
    fn zero_target_gives_zero_slice() {
        let mut v = wavy(5, 8, 3, 2).values().clone();
        v.slice_mut(ndarray::s![.., .., 1]).fill(0.0);
        let data = FunctionalDataset::from_values(v).unwrap();
        let noise = NoiseModel::identity(3, 8, 1.0);
        let fit = fit_channel_dfsl(&data, 1, PenaltyConfig::new(0.01, 0.01).unwrap(), &noise, &FistaOptions::default()).unwrap();
        assert!(fit.slice.iter().all(|&v| v == 0.0));
        assert!(fit.converged);
    }

    #[test]
    fn identity_whitening_is_bit_exact() {
        let data = wavy(6, 9, 4, 3);
        let eye = DMatrix::identity(9, 9);
        let raw = ChannelProblem::with_whitener(&data, 2, None);
        let white = ChannelProblem::with_whitener(&data, 2, Some(&eye));
        let pen = PenaltyConfig::new(0.05, 0.02).unwrap();
        let opts = FistaOptions { max_iter: 200, ..Default::default() };
        let a = raw.solve(pen, &opts, None);
        let b = white.solve(pen, &opts, None);
        assert_eq!(a, b);
        assert_eq!(raw.lipschitz().to_bits(), white.lipschitz().to_bits());
    }

    #[test]
    fn fista_decreases_the_objective_from_its_start() {
        let data = wavy(5, 10, 4, 4);
        let noise = NoiseModel::segmented_ar1(4, &[5, 5], 0.3, 1.0).unwrap();
        let cp = ChannelProblem::build(&data, 0, &noise).unwrap();
        let pen = PenaltyConfig::new(0.02, 0.05).unwrap();
        let init = per_time_ols(&cp);
        for start in [None, Some(&init)] {
            let origin = start.cloned().unwrap_or_else(|| DMatrix::zeros(3, 10));
            let sol = cp.solve(pen, &FistaOptions::default(), start);
            assert!(sol.objective <= cp.objective(&origin, pen));
            assert!((cp.objective(&sol.coefficients, pen) - sol.objective).abs() < 1e-12);
        }
    }

    #[test]
    fn huge_static_penalty_gives_zero() {
        let data = wavy(4, 6, 3, 5);
        let noise = NoiseModel::identity(3, 6, 1.0);
        let fit = fit_sfsl(&data, 1e6, &noise, &FistaOptions::default()).unwrap();
        assert!(fit.b.iter().all(|&v| v == 0.0));
        assert_eq!(fit.as_path(6), CoefficientPath::zeros(3, 6));
    }

    #[test]
    fn path_record_roundtrip_and_validation() {
        let mut v = Array3::zeros((2, 2, 3));
        v[(0, 1, 2)] = 0.5;
        let path = CoefficientPath::new(v.clone()).unwrap();
        assert_eq!(CoefficientPath::from_record(&path.to_record()).unwrap(), path);
        assert_eq!(path.nonzero_count(0), 1);
        assert_eq!(path.time_average(0), vec![0.0, 0.5 / 3.0]);
        v[(1, 1, 0)] = 1.0;
        assert!(CoefficientPath::new(v).is_err());
        assert!(PenaltyConfig::new(-1.0, 0.0).is_err());
        assert!(PenaltyConfig::from_lambda0(1.0, 1.0).is_err());
    }

    #[test]
    fn shrinkage_keeps_the_diagonal() {
        let resid = DMatrix::from_fn(3, 4, |i, k| (i as f64 + 1.0) * (k as f64 - 1.5));
        let cov = shrunk_covariance(&resid);
        let raw = resid.transpose() * &resid / 3.0;
        let gamma = (4.0f64 / 30.0).min(1.0);
        for u in 0..4 {
            assert_eq!(cov[(u, u)], raw[(u, u)]);
            for v in 0..4 {
                if u != v {
                    assert!((cov[(u, v)] - (1.0 - gamma) * raw[(u, v)]).abs() < 1e-14);
                }
            }
        }
    }
}
