//! Segmented subspace simulators.
//!
//! In each time segment `s` the channels of subspace `l` are generated as
//! `Phi_l^s R_i V_l^s`: `Phi` holds the `d` basis functions, the rows of the
//! `d x m` matrix `R_i` are drawn per sample from `N(0, coeff_cov)`, and the
//! `m x p_l` variation matrix `V` has orthonormal rows fixed by the seed.
//! Segments are concatenated, channels are scaled, and autocorrelated noise
//! with `Cov = sigma^2 Gamma / n` is added.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, Array3, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{self, BasisFamily, BasisMatrix, WaveletFamily};
use crate::dataset::{FunctionalDataset, NoiseModel};
use crate::linalg;
use crate::rng;
use crate::{DfslError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SubspaceSpec {
    pub basis: BasisMatrix,
    /// 0-based channel indices belonging to this subspace.
    pub channels: Vec<usize>,
    pub n_patterns: usize,
    pub coeff_cov: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentSpec {
    pub length: usize,
    pub subspaces: Vec<SubspaceSpec>,
}

/// Within-segment noise autocorrelation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseCorrelation {
    Identity,
    /// `rho^|u - v|`
    Ar1(f64),
}

/// How channel signals are brought to unit scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalScaling {
    /// Divide channel `j` by the square root of its expected squared norm
    /// `E ||X_ij||^2`, a constant shared by all samples. Self-expressive
    /// coefficients are then identical across samples.
    #[default]
    Expected,
    /// Divide every `(sample, channel)` curve by its own norm.
    PerSample,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationConfig {
    pub segments: Vec<SegmentSpec>,
    pub noise: NoiseCorrelation,
    pub scaling: SignalScaling,
}

impl SimulationConfig {
    pub fn n_times(&self) -> usize {
        self.segments.iter().map(|s| s.length).sum()
    }

    pub fn n_channels(&self) -> usize {
        self.segments.first().map_or(0, |s| s.subspaces.iter().map(|l| l.channels.len()).sum())
    }

    /// 1-based index of the first time point of every segment after the first.
    pub fn change_points(&self) -> Vec<usize> {
        let mut out = Vec::new();
        let mut start = 0;
        for seg in &self.segments[..self.segments.len().saturating_sub(1)] {
            start += seg.length;
            out.push(start + 1);
        }
        out
    }

    fn validate(&self) -> Result<()> {
        if self.segments.is_empty() {
            return Err(DfslError::invalid("simulation needs at least one segment"));
        }
        let p = self.n_channels();
        if p == 0 {
            return Err(DfslError::invalid("simulation needs at least one channel"));
        }
        for (s, seg) in self.segments.iter().enumerate() {
            let mut seen = vec![false; p];
            for (l, sub) in seg.subspaces.iter().enumerate() {
                let tag = format!("segment {s}, subspace {l}");
                if sub.basis.n_points() != seg.length {
                    return Err(DfslError::mismatch(format!(
                        "{tag}: basis has {} points, segment has {}",
                        sub.basis.n_points(),
                        seg.length
                    )));
                }
                let (d, m, pl) = (sub.basis.dim(), sub.n_patterns, sub.channels.len());
                if d > seg.length {
                    return Err(DfslError::mismatch(format!("{tag}: {d} basis functions exceed length {}", seg.length)));
                }
                if m == 0 || m > d || m > pl {
                    return Err(DfslError::mismatch(format!(
                        "{tag}: need 1 <= n_patterns <= min(d, p_l), got m={m}, d={d}, p_l={pl}"
                    )));
                }
                if sub.coeff_cov.nrows() != m || sub.coeff_cov.ncols() != m {
                    return Err(DfslError::mismatch(format!("{tag}: coefficient covariance must be {m}x{m}")));
                }
                if linalg::cholesky_lower(&sub.coeff_cov).is_none() {
                    return Err(DfslError::invalid(format!("{tag}: coefficient covariance is not positive definite")));
                }
                for &c in &sub.channels {
                    if c >= p || seen[c] {
                        return Err(DfslError::invalid(format!("{tag}: channel {c} repeated or out of range")));
                    }
                    seen[c] = true;
                }
            }
            if seen.iter().any(|&v| !v) {
                return Err(DfslError::invalid(format!("segment {s}: subspaces do not cover all {p} channels")));
            }
        }
        if let NoiseCorrelation::Ar1(rho) = self.noise {
            if rho.is_nan() || rho.abs() >= 1.0 {
                return Err(DfslError::invalid(format!("AR(1) coefficient must lie in (-1, 1), got {rho}")));
            }
        }
        Ok(())
    }

    fn noise_block(&self, len: usize) -> DMatrix<f64> {
        match self.noise {
            NoiseCorrelation::Identity => DMatrix::identity(len, len),
            NoiseCorrelation::Ar1(rho) => linalg::ar1_correlation(len, rho),
        }
    }

    /// True noise model (shared block-diagonal autocorrelation).
    pub fn noise_model(&self, sigma: f64) -> Result<NoiseModel> {
        let blocks: Vec<_> = self.segments.iter().map(|s| self.noise_block(s.length)).collect();
        let gamma = linalg::block_diag(&blocks);
        NoiseModel::new(vec![sigma; self.n_channels()], vec![gamma; self.n_channels()])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    /// 1-based first time index of each new segment.
    pub change_points: Vec<usize>,
    /// `assignment[s][j]`: 1-based subspace label of channel `j` in segment `s`.
    pub assignment: Vec<Vec<usize>>,
    /// `bases[s][l]`: basis of subspace `l + 1` in segment `s`.
    pub bases: Vec<Vec<BasisMatrix>>,
    /// `patterns[s][l]`: the `m x p_l` variation matrix `V` (orthonormal rows).
    pub patterns: Vec<Vec<DMatrix<f64>>>,
    /// Divisor applied to each channel under [`SignalScaling::Expected`]
    /// (all ones under `PerSample`).
    pub channel_scale: Vec<f64>,
    /// Noiseless signal `X`, indexed like the dataset.
    pub signal: Array3<f64>,
    pub noise: NoiseModel,
}

impl GroundTruth {
    /// 0-based half-open time ranges of the segments.
    pub fn segment_ranges(&self) -> Vec<(usize, usize)> {
        segment_ranges(&self.change_points, self.signal.dim().1)
    }

    /// Channels of subspace `label` (1-based) in segment `s`.
    pub fn members(&self, s: usize, label: usize) -> Vec<usize> {
        self.assignment[s].iter().enumerate().filter(|(_, &l)| l == label).map(|(j, _)| j).collect()
    }
}

/// Convert 1-based change points into 0-based half-open segment ranges.
pub fn segment_ranges(change_points: &[usize], n: usize) -> Vec<(usize, usize)> {
    let mut bounds = vec![0];
    bounds.extend(change_points.iter().map(|&c| c - 1));
    bounds.push(n);
    bounds.windows(2).map(|w| (w[0], w[1])).collect()
}

fn orthonormal_rows(m: usize, cols: usize, seed: u64, path: &[u64]) -> Result<DMatrix<f64>> {
    let mut r = rng::stream(seed, path);
    let g = DMatrix::from_fn(cols, m, |_, _| r.sample::<f64, _>(StandardNormal));
    Ok(linalg::gram_schmidt(&g, 1e-10)?.transpose())
}

/// Draw `(dataset, truth)` from a segmented subspace model.
pub fn generate(config: &SimulationConfig, n_samples: usize, sigma: f64, seed: u64) -> Result<(FunctionalDataset, GroundTruth)> {
    config.validate()?;
    if n_samples == 0 {
        return Err(DfslError::invalid("n_samples must be positive"));
    }
    if !sigma.is_finite() || sigma < 0.0 {
        return Err(DfslError::invalid(format!("sigma must be finite and non-negative, got {sigma}")));
    }
    let n = config.n_times();
    let p = config.n_channels();

    // variation matrices and coefficient factors, fixed per (segment, subspace)
    let mut patterns: Vec<Vec<DMatrix<f64>>> = Vec::new();
    let mut factors: Vec<Vec<DMatrix<f64>>> = Vec::new();
    for (s, seg) in config.segments.iter().enumerate() {
        let mut vs = Vec::new();
        let mut ls = Vec::new();
        for (l, sub) in seg.subspaces.iter().enumerate() {
            vs.push(orthonormal_rows(sub.n_patterns, sub.channels.len(), seed, &[1, s as u64, l as u64])?);
            ls.push(linalg::cholesky_lower(&sub.coeff_cov).expect("validated"));
        }
        patterns.push(vs);
        factors.push(ls);
    }

    // E ||X_ij||^2 = sum_s tr(Phi'Phi) v_j' C v_j
    let mut expected_sq = vec![0.0; p];
    for (s, seg) in config.segments.iter().enumerate() {
        for (l, sub) in seg.subspaces.iter().enumerate() {
            let trace = sub.basis.columns.norm_squared();
            let v = &patterns[s][l];
            for (c, &j) in sub.channels.iter().enumerate() {
                let vj: DVector<f64> = v.column(c).clone_owned();
                expected_sq[j] += trace * (vj.transpose() * &sub.coeff_cov * &vj)[(0, 0)];
            }
        }
    }

    let noise_factors: Vec<DMatrix<f64>> = config
        .segments
        .iter()
        .map(|seg| linalg::cholesky_lower(&config.noise_block(seg.length)).expect("correlation is PD"))
        .collect();
    let noise_scale = sigma / (n as f64).sqrt();

    let samples: Vec<(Array2<f64>, Array2<f64>)> = (0..n_samples)
        .into_par_iter()
        .map(|i| {
            let mut x = Array2::<f64>::zeros((n, p));
            let mut offset = 0;
            for (s, seg) in config.segments.iter().enumerate() {
                for (l, sub) in seg.subspaces.iter().enumerate() {
                    let (d, m) = (sub.basis.dim(), sub.n_patterns);
                    let mut r = rng::stream(seed, &[2, i as u64, s as u64, l as u64]);
                    let z = DMatrix::from_fn(m, d, |_, _| r.sample::<f64, _>(StandardNormal));
                    // rows of R are L z_q
                    let coeffs = (&factors[s][l] * z).transpose();
                    let block = &sub.basis.columns * coeffs * &patterns[s][l];
                    for (c, &j) in sub.channels.iter().enumerate() {
                        for k in 0..seg.length {
                            x[(offset + k, j)] = block[(k, c)];
                        }
                    }
                }
                offset += seg.length;
            }
            match config.scaling {
                SignalScaling::Expected => {
                    for (j, mut col) in x.axis_iter_mut(Axis(1)).enumerate() {
                        let scale = expected_sq[j].sqrt();
                        col.mapv_inplace(|v| v / scale);
                    }
                }
                SignalScaling::PerSample => {
                    for mut col in x.axis_iter_mut(Axis(1)) {
                        let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
                        if norm > 0.0 {
                            col.mapv_inplace(|v| v / norm);
                        }
                    }
                }
            }
            let mut y = x.clone();
            if sigma > 0.0 {
                for j in 0..p {
                    let mut r = rng::stream(seed, &[3, i as u64, j as u64]);
                    let mut offset = 0;
                    for (s, seg) in config.segments.iter().enumerate() {
                        let z = DVector::from_fn(seg.length, |_, _| r.sample::<f64, _>(StandardNormal));
                        let e = &noise_factors[s] * z;
                        for k in 0..seg.length {
                            y[(offset + k, j)] += noise_scale * e[k];
                        }
                        offset += seg.length;
                    }
                }
            }
            (x, y)
        })
        .collect();

    let mut signal = Array3::<f64>::zeros((n_samples, n, p));
    let mut values = Array3::<f64>::zeros((n_samples, n, p));
    for (i, (x, y)) in samples.into_iter().enumerate() {
        signal.index_axis_mut(Axis(0), i).assign(&x);
        values.index_axis_mut(Axis(0), i).assign(&y);
    }

    let assignment = config
        .segments
        .iter()
        .map(|seg| {
            let mut a = vec![0; p];
            for (l, sub) in seg.subspaces.iter().enumerate() {
                for &j in &sub.channels {
                    a[j] = l + 1;
                }
            }
            a
        })
        .collect();
    let bases = config.segments.iter().map(|seg| seg.subspaces.iter().map(|s| s.basis.clone()).collect()).collect();

    let channel_scale = match config.scaling {
        SignalScaling::Expected => expected_sq.iter().map(|v| v.sqrt()).collect(),
        SignalScaling::PerSample => vec![1.0; p],
    };
    let truth = GroundTruth {
        change_points: config.change_points(),
        assignment,
        bases,
        patterns,
        channel_scale,
        signal,
        noise: config.noise_model(sigma)?,
    };
    Ok((FunctionalDataset::from_values(values)?, truth))
}

/// Coefficient covariance `(Sigma)_uv = 0.5^|u - v|` used by both presets.
pub fn preset_coeff_cov(m: usize) -> DMatrix<f64> {
    linalg::ar1_correlation(m, 0.5)
}

/// Preset noise autocorrelation `(Gamma)_uv = 0.2^|u - v|`.
pub const PRESET_NOISE_AR1: f64 = 0.2;

fn subspace(family: &BasisFamily, len: usize, channels: Vec<usize>) -> Result<SubspaceSpec> {
    Ok(SubspaceSpec {
        basis: basis::orthogonalize(&build_basis(family, len)?)?,
        channels,
        n_patterns: 2,
        coeff_cov: preset_coeff_cov(2),
    })
}

/// Evaluate a basis family description on a segment of `len` points.
pub fn build_basis(family: &BasisFamily, len: usize) -> Result<BasisMatrix> {
    match family {
        BasisFamily::Bspline { order, selected } => basis::bspline_basis(len, *order, selected),
        BasisFamily::Fourier { q_max } => basis::fourier_basis(len, *q_max),
        BasisFamily::Wavelet { wavelet, n_funcs } => basis::wavelet_basis(len, *n_funcs, *wavelet),
    }
}

fn bspline_family() -> BasisFamily {
    BasisFamily::Bspline { order: 3, selected: vec![1, 4, 7] }
}

/// Model I with `p_per_subspace` channels in each of the two subspaces
/// (B-spline then Fourier), `n = 40`, change point at 21.
pub fn model_i_config(p_per_subspace: usize) -> Result<SimulationConfig> {
    if p_per_subspace < 2 {
        return Err(DfslError::invalid("Model I needs at least two channels per subspace"));
    }
    let q = p_per_subspace;
    let segments = (0..2)
        .map(|_| {
            Ok(SegmentSpec {
                length: 20,
                subspaces: vec![
                    subspace(&bspline_family(), 20, (0..q).collect())?,
                    subspace(&BasisFamily::Fourier { q_max: 3 }, 20, (q..2 * q).collect())?,
                ],
            })
        })
        .collect::<Result<_>>()?;
    Ok(SimulationConfig { segments, noise: NoiseCorrelation::Ar1(PRESET_NOISE_AR1), scaling: SignalScaling::Expected })
}

/// Model II: 12 channels in B-spline, Fourier and wavelet subspaces,
/// `n = 128`, change points at 33 and 65.
pub fn model_ii_config(wavelet: WaveletFamily) -> Result<SimulationConfig> {
    let segments = [32usize, 32, 64]
        .iter()
        .map(|&len| {
            Ok(SegmentSpec {
                length: len,
                subspaces: vec![
                    subspace(&bspline_family(), len, (0..4).collect())?,
                    subspace(&BasisFamily::Fourier { q_max: 3 }, len, (4..8).collect())?,
                    subspace(&BasisFamily::Wavelet { wavelet, n_funcs: 3 }, len, (8..12).collect())?,
                ],
            })
        })
        .collect::<Result<_>>()?;
    Ok(SimulationConfig { segments, noise: NoiseCorrelation::Ar1(PRESET_NOISE_AR1), scaling: SignalScaling::Expected })
}

pub fn model_i(n_samples: usize, sigma: f64, seed: u64) -> Result<(FunctionalDataset, GroundTruth)> {
    generate(&model_i_config(4)?, n_samples, sigma, seed)
}

pub fn model_ii(n_samples: usize, sigma: f64, seed: u64) -> Result<(FunctionalDataset, GroundTruth)> {
    generate(&model_ii_config(WaveletFamily::Db4)?, n_samples, sigma, seed)
}

/// JSON description of a custom simulation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimulationConfigRecord {
    pub segments: Vec<SegmentRecord>,
    #[serde(default = "default_noise")]
    pub noise: NoiseCorrelation,
    #[serde(default)]
    pub scaling: SignalScaling,
}

fn default_noise() -> NoiseCorrelation {
    NoiseCorrelation::Ar1(PRESET_NOISE_AR1)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SegmentRecord {
    pub length: usize,
    pub subspaces: Vec<SubspaceRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubspaceRecord {
    pub basis: BasisFamily,
    pub channels: Vec<usize>,
    pub n_patterns: usize,
    /// Row-major `m x m`; defaults to `0.5^|u - v|`.
    #[serde(default)]
    pub coeff_cov: Option<Vec<Vec<f64>>>,
}

impl SimulationConfigRecord {
    pub fn build(&self) -> Result<SimulationConfig> {
        let segments = self
            .segments
            .iter()
            .map(|seg| {
                let subspaces = seg
                    .subspaces
                    .iter()
                    .map(|sub| {
                        let m = sub.n_patterns;
                        let coeff_cov = match &sub.coeff_cov {
                            None => preset_coeff_cov(m),
                            Some(rows) => {
                                if rows.len() != m || rows.iter().any(|r| r.len() != m) {
                                    return Err(DfslError::mismatch(format!("coeff_cov must be {m}x{m}")));
                                }
                                DMatrix::from_fn(m, m, |r, c| rows[r][c])
                            }
                        };
                        Ok(SubspaceSpec {
                            basis: basis::orthogonalize(&build_basis(&sub.basis, seg.length)?)?,
                            channels: sub.channels.clone(),
                            n_patterns: m,
                            coeff_cov,
                        })
                    })
                    .collect::<Result<_>>()?;
                Ok(SegmentSpec { length: seg.length, subspaces })
            })
            .collect::<Result<_>>()?;
        Ok(SimulationConfig { segments, noise: self.noise, scaling: self.scaling })
    }
}

/// JSON form of [`GroundTruth`] (the noiseless signal is omitted).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GroundTruthRecord {
    pub change_points: Vec<usize>,
    pub assignment: Vec<Vec<usize>>,
    /// `bases[s][l]` is a list of columns.
    pub bases: Vec<Vec<Vec<Vec<f64>>>>,
    pub noise: crate::dataset::NoiseModelRecord,
}

impl From<&GroundTruth> for GroundTruthRecord {
    fn from(t: &GroundTruth) -> Self {
        GroundTruthRecord {
            change_points: t.change_points.clone(),
            assignment: t.assignment.clone(),
            bases: t
                .bases
                .iter()
                .map(|seg| {
                    seg.iter().map(|b| b.columns.column_iter().map(|c| c.iter().copied().collect()).collect()).collect()
                })
                .collect(),
            noise: t.noise.to_record(),
        }
    }
}
