//! Per-segment subspace recovery.
//!
//! Within a segment `[lo, hi)` (1-based time indices, `hi` exclusive, so a
//! segment starts at one change point and stops before the next) the mean
//! absolute coefficients `B[j][r]` give the affinity `A = B + B'`. Channels
//! are clustered on `A`, and each cluster's curves are summarized by a
//! smooth multichannel functional PCA: orthonormal basis functions `phi_q`
//! and per-sample, per-channel scores `alpha_iq` that minimize
//!
//! ```text
//! sum_i || Y_i - sum_q phi_q alpha_iq' ||_F^2 + lambda3 sum_q || D phi_q ||^2
//! ```
//!
//! with `D` the first-difference operator.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array3, ArrayView3, Axis};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::FunctionalDataset;
use crate::linalg;
use crate::rng;
use crate::solver::CoefficientPath;
use crate::{DfslError, Result};

/// Offset in the affinity-to-dissimilarity map `d = 1 / (EPS + A)`.
pub const DISSIMILARITY_EPS: f64 = 1e-6;
pub const KMEANS_RESTARTS: usize = 20;
const KMEANS_MAX_ITER: usize = 300;

fn check_segment(n: usize, segment: (usize, usize)) -> Result<(usize, usize)> {
    let (lo, hi) = segment;
    if lo < 1 || lo >= hi || hi > n + 1 {
        return Err(DfslError::invalid(format!("segment [{lo}, {hi}) is empty or outside 1..={n}")));
    }
    Ok((lo - 1, hi - 1))
}

/// Segments `[start, end)` (1-based, end exclusive) cut by 1-based change
/// points.
pub fn segments_from_change_points(change_points: &[usize], n: usize) -> Result<Vec<(usize, usize)>> {
    let mut bounds = vec![1];
    for &c in change_points {
        if c <= *bounds.last().expect("nonempty") || c > n {
            return Err(DfslError::invalid(format!("change points must increase within 2..={n}, got {change_points:?}")));
        }
        bounds.push(c);
    }
    bounds.push(n + 1);
    Ok(bounds.windows(2).map(|w| (w[0], w[1])).collect())
}

/// Mean absolute coefficient matrix of a segment.
pub fn mean_abs_coefficients(path: &CoefficientPath, segment: (usize, usize)) -> Result<DMatrix<f64>> {
    let (lo, hi) = check_segment(path.n_times(), segment)?;
    let p = path.n_channels();
    let len = (hi - lo) as f64;
    Ok(DMatrix::from_fn(p, p, |j, r| {
        if j == r {
            return 0.0;
        }
        (lo..hi).map(|k| path.get(j, r, k).abs()).sum::<f64>() / len
    }))
}

/// Symmetric affinity `A = B + B'` of a segment, zero on the diagonal.
pub fn segment_affinity(path: &CoefficientPath, segment: (usize, usize)) -> Result<DMatrix<f64>> {
    let b = mean_abs_coefficients(path, segment)?;
    let p = b.nrows();
    // summing each pair in a fixed order keeps A exactly symmetric
    Ok(DMatrix::from_fn(p, p, |j, r| {
        if j == r {
            0.0
        } else {
            let (a, c) = (j.min(r), j.max(r));
            b[(a, c)] + b[(c, a)]
        }
    }))
}

/// Euclidean distances between segment-averaged (signed) coefficient
/// vectors, for clustering channels directly on their regressions.
pub fn coefficient_distances(path: &CoefficientPath, segment: (usize, usize)) -> Result<DMatrix<f64>> {
    let (lo, hi) = check_segment(path.n_times(), segment)?;
    let p = path.n_channels();
    let len = (hi - lo) as f64;
    let mean = DMatrix::from_fn(p, p, |j, r| (lo..hi).map(|k| path.get(j, r, k)).sum::<f64>() / len);
    Ok(DMatrix::from_fn(p, p, |a, b| (mean.row(a) - mean.row(b)).norm()))
}

fn check_affinity(a: &DMatrix<f64>) -> Result<()> {
    if !a.is_square() || a.nrows() == 0 {
        return Err(DfslError::invalid("affinity must be a nonempty square matrix"));
    }
    if a.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(DfslError::invalid("affinity entries must be finite and non-negative"));
    }
    if linalg::asymmetry(a) > 1e-12 * a.amax().max(1.0) {
        return Err(DfslError::invalid("affinity must be symmetric"));
    }
    Ok(())
}

/// Relabel so that ids are contiguous from 1 in order of first appearance.
pub fn canonical_labels(labels: &[usize]) -> Vec<usize> {
    let mut seen: Vec<usize> = Vec::new();
    labels
        .iter()
        .map(|l| match seen.iter().position(|s| s == l) {
            Some(i) => i + 1,
            None => {
                seen.push(*l);
                seen.len()
            }
        })
        .collect()
}

/// Number of connected components of the graph `A_jr > 0`.
pub fn connected_components(a: &DMatrix<f64>) -> usize {
    let p = a.nrows();
    let mut seen = vec![false; p];
    let mut count = 0;
    for start in 0..p {
        if seen[start] {
            continue;
        }
        count += 1;
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(j) = stack.pop() {
            for r in 0..p {
                if !seen[r] && r != j && a[(j, r)] > 0.0 {
                    seen[r] = true;
                    stack.push(r);
                }
            }
        }
    }
    count
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clustering {
    /// Cluster id per channel, contiguous from 1.
    pub assignment: Vec<usize>,
    pub warning: Option<String>,
}

impl Clustering {
    pub fn n_clusters(&self) -> usize {
        self.assignment.iter().copied().max().unwrap_or(0)
    }

    /// 0-based channels of cluster `id`.
    pub fn members(&self, id: usize) -> Vec<usize> {
        self.assignment.iter().enumerate().filter(|(_, &l)| l == id).map(|(j, _)| j).collect()
    }
}

/// Lloyd iterations from a k-means++ start. Returns labels and inertia.
fn kmeans_once(points: &DMatrix<f64>, k: usize, rng: &mut impl Rng) -> (Vec<usize>, f64) {
    let (n, dim) = (points.nrows(), points.ncols());
    let dist2 = |i: usize, c: &DMatrix<f64>, l: usize| (0..dim).map(|d| (points[(i, d)] - c[(l, d)]).powi(2)).sum::<f64>();
    let mut centers = DMatrix::zeros(k, dim);
    centers.row_mut(0).copy_from(&points.row(rng.random_range(0..n)));
    let mut nearest: Vec<f64> = (0..n).map(|i| dist2(i, &centers, 0)).collect();
    for c in 1..k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in nearest.iter().enumerate() {
                if u < d {
                    pick = i;
                    break;
                }
                u -= d;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        centers.row_mut(c).copy_from(&points.row(pick));
        for (i, near) in nearest.iter_mut().enumerate() {
            *near = near.min(dist2(i, &centers, c));
        }
    }
    let mut labels = vec![usize::MAX; n];
    for _ in 0..KMEANS_MAX_ITER {
        let mut changed = false;
        for (i, label) in labels.iter_mut().enumerate() {
            let best = (0..k).min_by(|&a, &b| dist2(i, &centers, a).total_cmp(&dist2(i, &centers, b))).expect("k >= 1");
            if *label != best {
                *label = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = DMatrix::zeros(k, dim);
        let mut counts = vec![0usize; k];
        for (i, &l) in labels.iter().enumerate() {
            counts[l] += 1;
            let row = points.row(i).clone_owned();
            sums.row_mut(l).iter_mut().zip(row.iter()).for_each(|(s, v)| *s += v);
        }
        for (l, &count) in counts.iter().enumerate() {
            if count > 0 {
                let mean = sums.row(l) / count as f64;
                centers.row_mut(l).copy_from(&mean);
            } else {
                // reseed an empty cluster at the worst-fit point
                let far = (0..n)
                    .max_by(|&a, &b| dist2(a, &centers, labels[a]).total_cmp(&dist2(b, &centers, labels[b])))
                    .expect("n >= 1");
                centers.row_mut(l).copy_from(&points.row(far));
            }
        }
    }
    let inertia = (0..n).map(|i| dist2(i, &centers, labels[i])).sum();
    (labels, inertia)
}

/// Seeded k-means with [`KMEANS_RESTARTS`] restarts; the lowest inertia wins
/// (earliest restart on ties).
pub fn kmeans(points: &DMatrix<f64>, k: usize, seed: u64) -> Result<Vec<usize>> {
    if k == 0 || k > points.nrows() {
        return Err(DfslError::invalid(format!("k = {k} must lie in 1..={}", points.nrows())));
    }
    let mut best: Option<(Vec<usize>, f64)> = None;
    for restart in 0..KMEANS_RESTARTS {
        let mut r = rng::stream(seed, &[restart as u64]);
        let (labels, inertia) = kmeans_once(points, k, &mut r);
        if best.as_ref().is_none_or(|(_, b)| inertia < *b) {
            best = Some((labels, inertia));
        }
    }
    Ok(canonical_labels(&best.expect("at least one restart").0))
}

/// Spectral clustering of Ng, Jordan and Weiss: top-`k` eigenvectors of
/// `D^{-1/2} A D^{-1/2}`, rows scaled to unit length, then k-means.
pub fn spectral_cluster(affinity: &DMatrix<f64>, k: usize, seed: u64) -> Result<Clustering> {
    check_affinity(affinity)?;
    let p = affinity.nrows();
    if k == 0 || k > p {
        return Err(DfslError::invalid(format!("cluster count {k} must lie in 1..={p}")));
    }
    let components = connected_components(affinity);
    let warning = (components > k)
        .then(|| format!("affinity has {components} connected components but only {k} clusters were requested"));
    let inv_sqrt: Vec<f64> = affinity
        .row_iter()
        .map(|row| {
            let d: f64 = row.iter().sum();
            if d > 0.0 { 1.0 / d.sqrt() } else { 0.0 }
        })
        .collect();
    let normalized = DMatrix::from_fn(p, p, |j, r| inv_sqrt[j] * affinity[(j, r)] * inv_sqrt[r]);
    let (_, vectors) = linalg::sym_eigen_desc(&linalg::symmetrize(&normalized));
    let mut embed = vectors.columns(0, k).clone_owned();
    for mut row in embed.row_iter_mut() {
        let norm = row.norm();
        if norm > 0.0 {
            row /= norm;
        }
    }
    Ok(Clustering { assignment: kmeans(&embed, k, seed)?, warning })
}

/// Complete-linkage agglomeration on a dissimilarity matrix, merging while
/// the closest pair of clusters is within `max_within_distance`.
pub fn hierarchical_cluster_distances(dist: &DMatrix<f64>, max_within_distance: f64) -> Result<Clustering> {
    if max_within_distance.is_nan() || max_within_distance <= 0.0 {
        return Err(DfslError::invalid("the distance threshold must be positive"));
    }
    if !dist.is_square() || dist.nrows() == 0 || dist.iter().any(|v| v.is_nan()) {
        return Err(DfslError::invalid("distances must form a nonempty square matrix without NaN"));
    }
    let p = dist.nrows();
    let mut clusters: Vec<Vec<usize>> = (0..p).map(|j| vec![j]).collect();
    let linkage = |a: &[usize], b: &[usize]| {
        a.iter().flat_map(|&i| b.iter().map(move |&j| (i, j))).fold(0.0f64, |m, (i, j)| m.max(dist[(i, j)]))
    };
    loop {
        let mut best: Option<(usize, usize, f64)> = None;
        for a in 0..clusters.len() {
            for b in (a + 1)..clusters.len() {
                let d = linkage(&clusters[a], &clusters[b]);
                if best.is_none_or(|(_, _, bd)| d < bd) {
                    best = Some((a, b, d));
                }
            }
        }
        match best {
            Some((a, b, d)) if d <= max_within_distance => {
                let moved = clusters.remove(b);
                clusters[a].extend(moved);
            }
            _ => break,
        }
    }
    let mut labels = vec![0; p];
    for (id, members) in clusters.iter().enumerate() {
        for &j in members {
            labels[j] = id;
        }
    }
    Ok(Clustering { assignment: canonical_labels(&labels), warning: None })
}

/// Complete linkage on `d_jr = 1 / (1e-6 + A_jr)`.
pub fn hierarchical_cluster(affinity: &DMatrix<f64>, max_within_distance: f64) -> Result<Clustering> {
    check_affinity(affinity)?;
    let p = affinity.nrows();
    let dist = DMatrix::from_fn(p, p, |j, r| if j == r { 0.0 } else { 1.0 / (DISSIMILARITY_EPS + affinity[(j, r)]) });
    hierarchical_cluster_distances(&dist, max_within_distance)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum ClusteringConfig {
    Spectral { k: usize, seed: u64 },
    /// Complete linkage on the affinity-derived dissimilarity.
    Hierarchical { max_within_distance: f64 },
    /// Complete linkage on distances between averaged coefficient vectors.
    HierarchicalVectors { max_within_distance: f64 },
}

impl ClusteringConfig {
    /// Parse `spectral:<k>`, `hier:<distance>` or `hier-vec:<distance>`.
    pub fn parse(text: &str, seed: u64) -> Result<Self> {
        let (kind, value) = text
            .split_once(':')
            .ok_or_else(|| DfslError::invalid(format!("method must look like spectral:2 or hier:1.4, got {text:?}")))?;
        let bad = || DfslError::invalid(format!("bad clustering value in {text:?}"));
        let distance = || -> Result<f64> {
            let d: f64 = value.parse().map_err(|_| bad())?;
            if d > 0.0 { Ok(d) } else { Err(bad()) }
        };
        match kind {
            "spectral" => {
                let k: usize = value.parse().map_err(|_| bad())?;
                if k == 0 {
                    return Err(bad());
                }
                Ok(Self::Spectral { k, seed })
            }
            "hier" => Ok(Self::Hierarchical { max_within_distance: distance()? }),
            "hier-vec" => Ok(Self::HierarchicalVectors { max_within_distance: distance()? }),
            _ => Err(DfslError::invalid(format!("unknown clustering method {kind:?}"))),
        }
    }
}

/// Cluster the channels of one segment.
pub fn cluster_segment(path: &CoefficientPath, segment: (usize, usize), config: &ClusteringConfig) -> Result<Clustering> {
    match *config {
        ClusteringConfig::Spectral { k, seed } => spectral_cluster(&segment_affinity(path, segment)?, k, seed),
        ClusteringConfig::Hierarchical { max_within_distance } => {
            hierarchical_cluster(&segment_affinity(path, segment)?, max_within_distance)
        }
        ClusteringConfig::HierarchicalVectors { max_within_distance } => {
            hierarchical_cluster_distances(&coefficient_distances(path, segment)?, max_within_distance)
        }
    }
}

/// Smooth MFPCA of one cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct Mfpca {
    /// `n_s x d` orthonormal basis functions.
    pub basis: DMatrix<f64>,
    /// `alpha[(i, q, c)]`: score of sample `i`, component `q`, channel `c`.
    pub scores: Array3<f64>,
    /// Energy `||Z' phi_q||^2` captured by each component.
    pub explained: Vec<f64>,
    /// Total energy `||Z||_F^2` of the stacked (uncentered) data.
    pub total: f64,
}

impl Mfpca {
    pub fn dim(&self) -> usize {
        self.basis.ncols()
    }

    /// Cumulative explained fractions.
    pub fn cumulative(&self) -> Vec<f64> {
        self.explained
            .iter()
            .scan(0.0, |acc, e| {
                *acc += e;
                Some(*acc / self.total)
            })
            .collect()
    }
}

/// First-difference roughness `D'D` on `n` points.
fn roughness(n: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n, n);
    for k in 1..n {
        m[(k - 1, k - 1)] += 1.0;
        m[(k, k)] += 1.0;
        m[(k - 1, k)] -= 1.0;
        m[(k, k - 1)] -= 1.0;
    }
    m
}

/// Flip so that the largest-magnitude entry (first on ties) is positive.
fn sign_fix(v: &mut DVector<f64>) {
    let mut at = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[at].abs() {
            at = i;
        }
    }
    if v[at] < 0.0 {
        v.neg_mut();
    }
}

/// Smooth multichannel FPCA of an `N x n_s x p_l` block.
///
/// With the stacked data `Z = [Y_1 ... Y_N]` (`n_s x N p_l`) and energy
/// `M = Z Z'`, component `q` maximizes `phi' M phi - lambda3 phi' D'D phi`
/// over unit vectors orthogonal to the earlier components, which is the
/// leading eigenvector of that form restricted to their complement. The
/// penalty is absolute, so its pull weakens as the block's energy grows.
/// Extraction stops once the cumulative share of `||Z||_F^2` reaches
/// `variance_target`. Scores are `alpha_iq = Y_i' phi_q`.
pub fn smooth_mfpca(block: ArrayView3<'_, f64>, lambda3: f64, variance_target: f64) -> Result<Mfpca> {
    let (n_samples, n_s, p_l) = block.dim();
    if n_samples == 0 || n_s == 0 || p_l == 0 {
        return Err(DfslError::invalid("MFPCA needs a nonempty block"));
    }
    if !lambda3.is_finite() || lambda3 < 0.0 {
        return Err(DfslError::invalid("lambda3 must be finite and non-negative"));
    }
    if !(variance_target > 0.0 && variance_target <= 1.0) {
        return Err(DfslError::invalid("variance target must lie in (0, 1]"));
    }
    if block.iter().any(|v| !v.is_finite()) {
        return Err(DfslError::NonFinite("MFPCA input"));
    }
    let z = DMatrix::from_fn(n_s, n_samples * p_l, |k, col| block[(col / p_l, k, col % p_l)]);
    let energy = &z * z.transpose();
    let total = energy.trace();
    if total <= 0.0 {
        return Err(DfslError::invalid("MFPCA block has zero energy"));
    }
    let form = &energy - roughness(n_s) * lambda3;
    let mut columns: Vec<DVector<f64>> = Vec::new();
    let mut explained = Vec::new();
    let mut captured = 0.0;
    while columns.len() < n_s && captured < variance_target * total {
        // orthonormal basis of the complement of the components so far
        let complement = if columns.is_empty() {
            DMatrix::identity(n_s, n_s)
        } else {
            let done = DMatrix::from_columns(&columns);
            let (_, vectors) = linalg::sym_eigen_desc(&(DMatrix::identity(n_s, n_s) - &done * done.transpose()));
            vectors.columns(0, n_s - columns.len()).into_owned()
        };
        let restricted = linalg::symmetrize(&(complement.transpose() * &form * &complement));
        let (_, vectors) = linalg::sym_eigen_desc(&restricted);
        let mut phi = &complement * vectors.column(0);
        phi /= phi.norm();
        sign_fix(&mut phi);
        let e = phi.dot(&(&energy * &phi));
        captured += e;
        explained.push(e);
        columns.push(phi);
    }
    let basis = DMatrix::from_columns(&columns);
    let scores = Array3::from_shape_fn((n_samples, basis.ncols(), p_l), |(i, q, c)| {
        (0..n_s).map(|k| block[(i, k, c)] * basis[(k, q)]).sum()
    });
    Ok(Mfpca { basis, scores, explained, total })
}

/// Orthogonal Procrustes alignment of an estimated basis to a reference.
#[derive(Debug, Clone, PartialEq)]
pub struct Procrustes {
    /// `d x d` orthogonal matrix minimizing `||estimated R - truth||_F`.
    pub rotation: DMatrix<f64>,
    pub aligned: DMatrix<f64>,
    pub error: f64,
}

/// Solve `min_R ||estimated R - truth||_F` over orthogonal `R` from the SVD
/// of `estimated' truth = U S V'`, giving `R = U V'`.
pub fn procrustes_align(estimated: &DMatrix<f64>, truth: &DMatrix<f64>) -> Result<Procrustes> {
    if estimated.shape() != truth.shape() {
        return Err(DfslError::mismatch(format!("basis shapes {:?} and {:?} differ", estimated.shape(), truth.shape())));
    }
    if estimated.ncols() == 0 {
        return Err(DfslError::invalid("bases must have at least one column"));
    }
    let (u, _, v) = linalg::thin_svd(&(estimated.transpose() * truth));
    let rotation = u * v.transpose();
    let aligned = estimated * &rotation;
    let error = (&aligned - truth).norm();
    Ok(Procrustes { rotation, aligned, error })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubspaceAffinity {
    /// `||Phi_a' Phi_b||_F`.
    pub raw: f64,
    /// `raw / sqrt(max(d_a, d_b))`, in `[0, 1]` for orthonormal bases.
    pub normalized: f64,
}

/// Affinity between the subspaces spanned by two orthonormal bases.
pub fn subspace_affinity(phi_a: &DMatrix<f64>, phi_b: &DMatrix<f64>) -> Result<SubspaceAffinity> {
    if phi_a.nrows() != phi_b.nrows() {
        return Err(DfslError::mismatch(format!("bases have {} and {} points", phi_a.nrows(), phi_b.nrows())));
    }
    let raw = (phi_a.transpose() * phi_b).norm();
    let width = phi_a.ncols().max(phi_b.ncols()).max(1) as f64;
    Ok(SubspaceAffinity { raw, normalized: raw / width.sqrt() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub id: usize,
    /// 0-based channel indices.
    pub channels: Vec<usize>,
    pub dim: usize,
    /// Basis functions, one array per column.
    pub basis: Vec<Vec<f64>>,
    /// `scores[i][q][c]` for sample `i`, component `q`, member channel `c`.
    pub scores: Vec<Vec<Vec<f64>>>,
    pub explained: Vec<f64>,
    pub cumulative: Vec<f64>,
    pub total_energy: f64,
}

impl ClusterModel {
    pub fn from_mfpca(id: usize, channels: Vec<usize>, fit: &Mfpca) -> Self {
        Self {
            id,
            channels,
            dim: fit.dim(),
            basis: fit.basis.column_iter().map(|c| c.iter().copied().collect()).collect(),
            scores: fit
                .scores
                .outer_iter()
                .map(|s| s.outer_iter().map(|q| q.to_vec()).collect())
                .collect(),
            explained: fit.explained.clone(),
            cumulative: fit.cumulative(),
            total_energy: fit.total,
        }
    }

    pub fn basis_matrix(&self) -> DMatrix<f64> {
        let n = self.basis.first().map_or(0, Vec::len);
        DMatrix::from_fn(n, self.basis.len(), |k, q| self.basis[q][k])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentModel {
    /// First time index (1-based).
    pub start: usize,
    /// One past the last time index (1-based).
    pub end: usize,
    /// Row-major `p x p` affinity.
    pub affinity: Vec<Vec<f64>>,
    pub assignment: Vec<usize>,
    pub clusters: Vec<ClusterModel>,
    pub warning: Option<String>,
}

impl SegmentModel {
    pub fn affinity_matrix(&self) -> DMatrix<f64> {
        let p = self.affinity.len();
        DMatrix::from_fn(p, p, |j, r| self.affinity[j][r])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentedSubspaceModel {
    pub change_points: Vec<usize>,
    pub clustering: ClusteringConfig,
    pub lambda3: f64,
    pub variance_target: f64,
    pub segments: Vec<SegmentModel>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MfpcaOptions {
    pub lambda3: f64,
    pub variance_target: f64,
}

impl Default for MfpcaOptions {
    fn default() -> Self {
        Self { lambda3: 1.0, variance_target: 0.95 }
    }
}

/// Cluster every segment and extract each cluster's smooth basis.
pub fn infer(
    path: &CoefficientPath,
    change_points: &[usize],
    data: &FunctionalDataset,
    config: &ClusteringConfig,
    options: &MfpcaOptions,
) -> Result<SegmentedSubspaceModel> {
    let (n, p) = (data.n_times(), data.n_channels());
    if path.n_times() != n || path.n_channels() != p {
        return Err(DfslError::mismatch(format!(
            "path is {} x {} but data have {n} times and {p} channels",
            path.n_times(),
            path.n_channels()
        )));
    }
    let segments = segments_from_change_points(change_points, n)?;
    let fitted = segments
        .par_iter()
        .map(|&(start, end)| {
            let affinity = segment_affinity(path, (start, end))?;
            let clustering = cluster_segment(path, (start, end), config)?;
            let clusters = (1..=clustering.n_clusters())
                .into_par_iter()
                .map(|id| {
                    let members = clustering.members(id);
                    let block = data
                        .values()
                        .slice(ndarray::s![.., start - 1..end - 1, ..])
                        .select(Axis(2), &members);
                    let fit = smooth_mfpca(block.view(), options.lambda3, options.variance_target)?;
                    Ok(ClusterModel::from_mfpca(id, members, &fit))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(SegmentModel {
                start,
                end,
                affinity: affinity.row_iter().map(|r| r.iter().copied().collect()).collect(),
                assignment: clustering.assignment,
                clusters,
                warning: clustering.warning,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SegmentedSubspaceModel {
        change_points: change_points.to_vec(),
        clustering: *config,
        lambda3: options.lambda3,
        variance_target: options.variance_target,
        segments: fitted,
    })
}
