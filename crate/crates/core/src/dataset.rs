//! Multichannel functional data and noise models.

use std::collections::HashMap;
use std::io::{Read, Write};

use nalgebra::DMatrix;
use ndarray::{Array3, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::linalg;
use crate::rng;
use crate::{DfslError, Result};

/// Maximum relative deviation of consecutive time gaps from their mean.
pub const SPACING_TOLERANCE: f64 = 1e-9;

/// `N` samples of `p` channels observed on a common grid of `n` time points.
///
/// Values are indexed `(sample, time, channel)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FunctionalDataset {
    values: Array3<f64>,
    time_points: Vec<f64>,
    channel_names: Vec<String>,
}

impl FunctionalDataset {
    pub fn new(values: Array3<f64>, time_points: Vec<f64>, channel_names: Vec<String>) -> Result<Self> {
        let (n_samples, n_times, n_channels) = values.dim();
        if n_samples == 0 || n_times == 0 || n_channels == 0 {
            return Err(DfslError::invalid(format!(
                "dataset dimensions must be positive, got {n_samples}x{n_times}x{n_channels}"
            )));
        }
        if time_points.len() != n_times {
            return Err(DfslError::mismatch(format!(
                "{} time points for {n_times} observations per curve",
                time_points.len()
            )));
        }
        if channel_names.len() != n_channels {
            return Err(DfslError::mismatch(format!(
                "{} channel names for {n_channels} channels",
                channel_names.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(DfslError::NonFinite("observations"));
        }
        if time_points.iter().any(|t| !t.is_finite()) {
            return Err(DfslError::NonFinite("time points"));
        }
        check_spacing(&time_points)?;
        Ok(Self { values, time_points, channel_names })
    }

    /// Dataset on the integer grid `0..n` with channels named `ch1..chp`.
    pub fn from_values(values: Array3<f64>) -> Result<Self> {
        let (_, n, p) = values.dim();
        let time = (0..n).map(|k| k as f64).collect();
        let names = (1..=p).map(|j| format!("ch{j}")).collect();
        Self::new(values, time, names)
    }

    pub fn n_samples(&self) -> usize {
        self.values.dim().0
    }

    pub fn n_times(&self) -> usize {
        self.values.dim().1
    }

    pub fn n_channels(&self) -> usize {
        self.values.dim().2
    }

    pub fn values(&self) -> &Array3<f64> {
        &self.values
    }

    pub fn time_points(&self) -> &[f64] {
        &self.time_points
    }

    pub fn channel_names(&self) -> &[String] {
        &self.channel_names
    }

    /// The `n x p` matrix of sample `i`.
    pub fn sample(&self, i: usize) -> ArrayView2<'_, f64> {
        self.values.index_axis(Axis(0), i)
    }

    /// The curve of channel `j` in sample `i`.
    pub fn curve(&self, i: usize, j: usize) -> ArrayView1<'_, f64> {
        self.values.slice(ndarray::s![i, .., j])
    }

    /// Keep the listed samples, in the given order.
    pub fn select_samples(&self, idx: &[usize]) -> Result<Self> {
        if idx.is_empty() || idx.iter().any(|&i| i >= self.n_samples()) {
            return Err(DfslError::invalid("sample selection empty or out of range"));
        }
        Ok(Self {
            values: self.values.select(Axis(0), idx),
            time_points: self.time_points.clone(),
            channel_names: self.channel_names.clone(),
        })
    }

    /// Keep the listed channels, in the given order.
    pub fn select_channels(&self, idx: &[usize]) -> Result<Self> {
        if idx.is_empty() || idx.iter().any(|&j| j >= self.n_channels()) {
            return Err(DfslError::invalid("channel selection empty or out of range"));
        }
        Ok(Self {
            values: self.values.select(Axis(2), idx),
            time_points: self.time_points.clone(),
            channel_names: idx.iter().map(|&j| self.channel_names[j].clone()).collect(),
        })
    }

    /// Restrict to time indices `lo..hi` (0-based, half open).
    pub fn time_window(&self, lo: usize, hi: usize) -> Result<Self> {
        if lo >= hi || hi > self.n_times() {
            return Err(DfslError::invalid(format!(
                "time window {lo}..{hi} invalid for {} time points",
                self.n_times()
            )));
        }
        Ok(Self {
            values: self.values.slice(ndarray::s![.., lo..hi, ..]).to_owned(),
            time_points: self.time_points[lo..hi].to_vec(),
            channel_names: self.channel_names.clone(),
        })
    }

    /// Scale every `(sample, channel)` curve to unit Euclidean norm.
    pub fn normalize_channels(&self) -> Result<Self> {
        let mut values = self.values.clone();
        for (i, mut sample) in values.axis_iter_mut(Axis(0)).enumerate() {
            for (j, mut col) in sample.axis_iter_mut(Axis(1)).enumerate() {
                let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm == 0.0 {
                    return Err(DfslError::ZeroNormColumn { sample: i, channel: j });
                }
                col.mapv_inplace(|v| v / norm);
            }
        }
        Ok(Self { values, time_points: self.time_points.clone(), channel_names: self.channel_names.clone() })
    }

    /// Random train/test partition of the samples. Both parts keep the
    /// original sample order.
    pub fn split(&self, n_train: usize, seed: u64) -> Result<(Self, Self)> {
        let n = self.n_samples();
        if n_train == 0 || n_train >= n {
            return Err(DfslError::invalid(format!("n_train must lie in 1..{n}, got {n_train}")));
        }
        let (train, test) = split_indices(n, n_train, seed);
        Ok((self.select_samples(&train)?, self.select_samples(&test)?))
    }

    /// Read the long CSV format `sample_id,time_index,channel_id,value`.
    ///
    /// Samples and channels are ordered by first appearance; every
    /// `(sample, time, channel)` cell must be present exactly once.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers()?.clone();
        let expected = ["sample_id", "time_index", "channel_id", "value"];
        if headers.len() != 4 || headers.iter().zip(expected).any(|(h, e)| h != e) {
            return Err(DfslError::invalid(format!(
                "expected header {}, found {}",
                expected.join(","),
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }

        let mut samples: Vec<String> = Vec::new();
        let mut sample_idx: HashMap<String, usize> = HashMap::new();
        let mut channels: Vec<String> = Vec::new();
        let mut channel_idx: HashMap<String, usize> = HashMap::new();
        let mut cells: Vec<(usize, usize, usize, f64)> = Vec::new();
        let mut max_time = 0usize;

        for (line, record) in rdr.records().enumerate() {
            let record = record?;
            let row = line + 2;
            let sid = record[0].to_string();
            let cid = record[2].to_string();
            let k: usize = record[1]
                .parse()
                .map_err(|_| DfslError::invalid(format!("line {row}: bad time_index '{}'", &record[1])))?;
            let v: f64 = record[3]
                .parse()
                .map_err(|_| DfslError::invalid(format!("line {row}: bad value '{}'", &record[3])))?;
            let next = samples.len();
            let i = *sample_idx.entry(sid.clone()).or_insert_with(|| {
                samples.push(sid);
                next
            });
            let next = channels.len();
            let j = *channel_idx.entry(cid.clone()).or_insert_with(|| {
                channels.push(cid);
                next
            });
            max_time = max_time.max(k);
            cells.push((i, k, j, v));
        }
        if cells.is_empty() {
            return Err(DfslError::invalid("csv contains no observations"));
        }

        let dims = (samples.len(), max_time + 1, channels.len());
        let mut values = Array3::<f64>::from_elem(dims, f64::NAN);
        let mut seen = ndarray::Array3::<bool>::from_elem(dims, false);
        for (i, k, j, v) in cells {
            if seen[(i, k, j)] {
                return Err(DfslError::invalid(format!(
                    "duplicate cell (sample {}, time {k}, channel {})",
                    samples[i], channels[j]
                )));
            }
            seen[(i, k, j)] = true;
            values[(i, k, j)] = v;
        }
        if let Some(((i, k, j), _)) = seen.indexed_iter().find(|(_, &s)| !s) {
            return Err(DfslError::invalid(format!(
                "missing cell (sample {}, time {k}, channel {})",
                samples[i], channels[j]
            )));
        }
        let time = (0..dims.1).map(|k| k as f64).collect();
        Self::new(values, time, channels)
    }

    /// Write the long CSV format; samples are labeled `0..N`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["sample_id", "time_index", "channel_id", "value"])?;
        for ((i, k, j), v) in self.values.indexed_iter() {
            w.write_record([i.to_string(), k.to_string(), self.channel_names[j].clone(), v.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn check_spacing(t: &[f64]) -> Result<()> {
    if t.len() < 2 {
        return Ok(());
    }
    let gaps: Vec<f64> = t.windows(2).map(|w| w[1] - w[0]).collect();
    if gaps.iter().any(|&g| g <= 0.0) {
        return Err(DfslError::invalid("time points must be strictly increasing"));
    }
    let mean = gaps.iter().sum::<f64>() / gaps.len() as f64;
    let deviation = gaps.iter().map(|g| (g - mean).abs()).fold(0.0, f64::max) / mean;
    if deviation >= SPACING_TOLERANCE {
        return Err(DfslError::UnequalSpacing { deviation });
    }
    Ok(())
}

/// Sorted train and test index sets.
pub fn split_indices(n: usize, n_train: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(seed, &[0x5_9117]));
    let mut train = idx[..n_train].to_vec();
    let mut test = idx[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

/// Per-channel noise: scale `sigma_j` and unit-diagonal autocorrelation
/// `Gamma_j`, so that `Cov(eps_ij) = sigma_j^2 Gamma_j / n`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseModel {
    sigma: Vec<f64>,
    gamma: Vec<DMatrix<f64>>,
}

impl NoiseModel {
    pub fn new(sigma: Vec<f64>, gamma: Vec<DMatrix<f64>>) -> Result<Self> {
        if sigma.len() != gamma.len() || sigma.is_empty() {
            return Err(DfslError::mismatch(format!(
                "{} noise scales for {} autocorrelation matrices",
                sigma.len(),
                gamma.len()
            )));
        }
        let n = gamma[0].nrows();
        for (j, (s, g)) in sigma.iter().zip(&gamma).enumerate() {
            let bad = |reason: String| DfslError::InvalidAutocorrelation { channel: j, reason };
            if !s.is_finite() || *s < 0.0 {
                return Err(bad(format!("sigma {s} must be finite and non-negative")));
            }
            if g.nrows() != n || g.ncols() != n {
                return Err(bad(format!("shape {}x{}, expected {n}x{n}", g.nrows(), g.ncols())));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(bad("non-finite entry".into()));
            }
            if linalg::asymmetry(g) > 1e-10 {
                return Err(bad("not symmetric".into()));
            }
            if g.diagonal().iter().any(|d| (d - 1.0).abs() > 1e-10) {
                return Err(bad("diagonal entries differ from 1".into()));
            }
            let min_eig = linalg::sym_eigenvalues(g)[0];
            if min_eig <= 0.0 {
                return Err(bad(format!("not positive definite (minimum eigenvalue {min_eig:.3e})")));
            }
        }
        Ok(Self { sigma, gamma })
    }

    /// Uncorrelated noise of scale `sigma` in every channel.
    pub fn identity(p: usize, n: usize, sigma: f64) -> Self {
        Self { sigma: vec![sigma; p], gamma: vec![DMatrix::identity(n, n); p] }
    }

    /// Block-diagonal AR(1)-type autocorrelation `rho^|u-v|` within each of
    /// the given consecutive segment lengths, shared by all channels.
    pub fn segmented_ar1(p: usize, segment_lengths: &[usize], rho: f64, sigma: f64) -> Result<Self> {
        let blocks: Vec<_> = segment_lengths.iter().map(|&len| linalg::ar1_correlation(len, rho)).collect();
        let gamma = linalg::block_diag(&blocks);
        Self::new(vec![sigma; p], vec![gamma; p])
    }

    /// Split a covariance `Sigma_j` into `(sigma_j, Gamma_j)`.
    ///
    /// `sigma_j^2 / n` is the mean diagonal of `Sigma_j` and `Gamma_j` is its
    /// correlation matrix; the stored model therefore has a homogeneous
    /// marginal variance.
    pub fn from_covariances(cov: &[DMatrix<f64>]) -> Result<Self> {
        let mut sigma = Vec::with_capacity(cov.len());
        let mut gamma = Vec::with_capacity(cov.len());
        for (j, s) in cov.iter().enumerate() {
            let n = s.nrows();
            let diag: Vec<f64> = s.diagonal().iter().copied().collect();
            if diag.iter().any(|&d| d <= 0.0 || !d.is_finite()) {
                return Err(DfslError::InvalidAutocorrelation {
                    channel: j,
                    reason: "covariance has a non-positive variance".into(),
                });
            }
            let mean_var = diag.iter().sum::<f64>() / n as f64;
            sigma.push((mean_var * n as f64).sqrt());
            let mut g = DMatrix::from_fn(n, n, |u, v| s[(u, v)] / (diag[u] * diag[v]).sqrt());
            g = linalg::symmetrize(&g);
            g.fill_diagonal(1.0);
            gamma.push(g);
        }
        Self::new(sigma, gamma)
    }

    pub fn n_channels(&self) -> usize {
        self.sigma.len()
    }

    pub fn n_times(&self) -> usize {
        self.gamma[0].nrows()
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    pub fn gamma(&self, j: usize) -> &DMatrix<f64> {
        &self.gamma[j]
    }

    /// `Sigma_j = sigma_j^2 Gamma_j / n`.
    pub fn covariance(&self, j: usize) -> DMatrix<f64> {
        let n = self.n_times() as f64;
        &self.gamma[j] * (self.sigma[j] * self.sigma[j] / n)
    }

    pub(crate) fn check_dims(&self, data: &FunctionalDataset) -> Result<()> {
        if self.n_channels() != data.n_channels() || self.n_times() != data.n_times() {
            return Err(DfslError::mismatch(format!(
                "noise model is {} channels x {} times, data is {} x {}",
                self.n_channels(),
                self.n_times(),
                data.n_channels(),
                data.n_times()
            )));
        }
        Ok(())
    }

    pub fn to_record(&self) -> NoiseModelRecord {
        let n = self.n_times();
        NoiseModelRecord {
            n_times: n,
            sigma: self.sigma.clone(),
            gamma: self
                .gamma
                .iter()
                .map(|g| (0..n).flat_map(|r| (0..n).map(move |c| g[(r, c)])).collect())
                .collect(),
        }
    }

    pub fn from_record(rec: &NoiseModelRecord) -> Result<Self> {
        let n = rec.n_times;
        let gamma = rec
            .gamma
            .iter()
            .map(|flat| {
                if flat.len() != n * n {
                    return Err(DfslError::mismatch(format!("gamma has {} entries, expected {}", flat.len(), n * n)));
                }
                Ok(DMatrix::from_row_slice(n, n, flat))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(rec.sigma.clone(), gamma)
    }
}

/// JSON form of a [`NoiseModel`]; `gamma` matrices are row-major.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct NoiseModelRecord {
    pub n_times: usize,
    pub sigma: Vec<f64>,
    pub gamma: Vec<Vec<f64>>,
}
