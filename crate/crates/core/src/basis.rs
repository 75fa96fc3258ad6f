//! Basis-function families for the simulators and subspace diagnostics.
//!
//! All generators evaluate on an equally spaced grid and return unit-norm
//! columns. Outputs are pure functions of the arguments.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::linalg;
use crate::{DfslError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WaveletFamily {
    Haar,
    /// Daubechies wavelet with four taps (two vanishing moments).
    Db4,
}

impl WaveletFamily {
    fn lowpass(self) -> Vec<f64> {
        match self {
            WaveletFamily::Haar => vec![std::f64::consts::FRAC_1_SQRT_2; 2],
            WaveletFamily::Db4 => {
                let s3 = 3f64.sqrt();
                let d = 4.0 * 2f64.sqrt();
                vec![(1.0 + s3) / d, (3.0 + s3) / d, (3.0 - s3) / d, (1.0 - s3) / d]
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum BasisFamily {
    /// Selected clamped B-splines (1-based indices) of the given order
    /// (order = degree + 1).
    Bspline { order: usize, selected: Vec<usize> },
    /// `cos(q t + q pi)` for `q = 1..=q_max` on `[0, 2 pi]`.
    Fourier { q_max: usize },
    Wavelet { wavelet: WaveletFamily, n_funcs: usize },
}

/// `n_points x d` matrix of basis functions, one per column.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisMatrix {
    pub columns: DMatrix<f64>,
    pub family: BasisFamily,
    pub orthonormal: bool,
}

impl BasisMatrix {
    pub fn n_points(&self) -> usize {
        self.columns.nrows()
    }

    pub fn dim(&self) -> usize {
        self.columns.ncols()
    }

    /// Largest `|<phi_a, phi_b>|` over distinct columns.
    pub fn max_cross_inner(&self) -> f64 {
        let g = self.columns.transpose() * &self.columns;
        let mut worst = 0.0f64;
        for a in 0..g.nrows() {
            for b in 0..g.ncols() {
                if a != b {
                    worst = worst.max(g[(a, b)].abs());
                }
            }
        }
        worst
    }
}

fn unit_columns(mut m: DMatrix<f64>) -> Result<DMatrix<f64>> {
    for (c, mut col) in m.column_iter_mut().enumerate() {
        let norm = col.norm();
        if norm == 0.0 {
            return Err(DfslError::RankDeficient { column: c });
        }
        col /= norm;
    }
    Ok(m)
}

fn unit_grid(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![0.0];
    }
    (0..n).map(|k| k as f64 / (n - 1) as f64).collect()
}

/// Clamped knot vector with `n_knots` equally spaced knots on `[0, 1]` and
/// boundary knots repeated to multiplicity `order`.
pub fn clamped_knots(n_knots: usize, order: usize) -> Vec<f64> {
    let mut knots = vec![0.0; order - 1];
    knots.extend(unit_grid(n_knots));
    knots.extend(std::iter::repeat_n(1.0, order - 1));
    knots
}

/// All B-splines of the clamped system evaluated at `x` (Cox-de Boor).
pub fn bspline_values(knots: &[f64], order: usize, x: f64) -> Vec<f64> {
    let n_basis = knots.len() - order;
    let last = knots[knots.len() - 1];
    // degree-0 indicators; the right end belongs to the last non-empty span
    let mut b: Vec<f64> = (0..knots.len() - 1)
        .map(|i| {
            let (lo, hi) = (knots[i], knots[i + 1]);
            let inside = if hi == last && x == last { lo < hi } else { lo <= x && x < hi };
            if inside {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    if x == last {
        // keep only the last non-degenerate span
        if let Some(pos) = b.iter().rposition(|&v| v == 1.0) {
            b.iter_mut().enumerate().for_each(|(i, v)| *v = if i == pos { 1.0 } else { 0.0 });
        }
    }
    for k in 2..=order {
        let next: Vec<f64> = (0..knots.len() - k)
            .map(|i| {
                let d1 = knots[i + k - 1] - knots[i];
                let d2 = knots[i + k] - knots[i + 1];
                let left = if d1 > 0.0 { (x - knots[i]) / d1 * b[i] } else { 0.0 };
                let right = if d2 > 0.0 { (knots[i + k] - x) / d2 * b[i + 1] } else { 0.0 };
                left + right
            })
            .collect();
        b = next;
    }
    b.truncate(n_basis);
    b
}

/// Full (unselected, unnormalized) clamped B-spline design on the grid.
pub fn bspline_design(n_points: usize, order: usize) -> Result<DMatrix<f64>> {
    if order == 0 || n_points < 2 {
        return Err(DfslError::invalid("B-splines need order >= 1 and at least two grid points"));
    }
    let knots = clamped_knots(n_points, order);
    let n_basis = knots.len() - order;
    let grid = unit_grid(n_points);
    let mut m = DMatrix::zeros(n_points, n_basis);
    for (r, &x) in grid.iter().enumerate() {
        for (c, v) in bspline_values(&knots, order, x).into_iter().enumerate() {
            m[(r, c)] = v;
        }
    }
    Ok(m)
}

/// Selected B-spline basis functions (1-based indices), unit-normalized.
pub fn bspline_basis(n_points: usize, order: usize, selected: &[usize]) -> Result<BasisMatrix> {
    let full = bspline_design(n_points, order)?;
    let count = full.ncols();
    if selected.is_empty() {
        return Err(DfslError::invalid("no B-spline selected"));
    }
    if let Some(&bad) = selected.iter().find(|&&s| s == 0 || s > count) {
        return Err(DfslError::invalid(format!(
            "B-spline index {bad} outside 1..={count} for {n_points} knots of order {order}"
        )));
    }
    let cols = DMatrix::from_fn(n_points, selected.len(), |r, c| full[(r, selected[c] - 1)]);
    Ok(BasisMatrix {
        columns: unit_columns(cols)?,
        family: BasisFamily::Bspline { order, selected: selected.to_vec() },
        orthonormal: false,
    })
}

/// `cos(q t_k + q pi)`, `q = 1..=q_max`, on `n_points` equally spaced points
/// of `[0, 2 pi]` including both ends.
pub fn fourier_basis(n_points: usize, q_max: usize) -> Result<BasisMatrix> {
    if q_max == 0 || n_points == 0 {
        return Err(DfslError::invalid("fourier basis needs q_max >= 1 and n_points >= 1"));
    }
    let grid: Vec<f64> = unit_grid(n_points).into_iter().map(|u| 2.0 * PI * u).collect();
    let cols = DMatrix::from_fn(n_points, q_max, |r, c| {
        let q = (c + 1) as f64;
        (q * grid[r] + q * PI).cos()
    });
    Ok(BasisMatrix { columns: unit_columns(cols)?, family: BasisFamily::Fourier { q_max }, orthonormal: false })
}

fn highpass(lowpass: &[f64]) -> Vec<f64> {
    let l = lowpass.len();
    (0..l).map(|k| if k % 2 == 0 { lowpass[l - 1 - k] } else { -lowpass[l - 1 - k] }).collect()
}

/// Forward periodic multilevel transform down to a single approximation
/// coefficient. Layout: `[a, d_coarsest, ..., d_finest]`.
pub fn wavelet_forward(x: &[f64], family: WaveletFamily) -> Result<Vec<f64>> {
    check_pow2(x.len())?;
    let h = family.lowpass();
    let g = highpass(&h);
    let mut out = x.to_vec();
    let mut len = x.len();
    while len >= 2 {
        let half = len / 2;
        let mut next = vec![0.0; len];
        for i in 0..half {
            for k in 0..h.len() {
                let v = out[(2 * i + k) % len];
                next[i] += h[k] * v;
                next[half + i] += g[k] * v;
            }
        }
        out[..len].copy_from_slice(&next);
        len = half;
    }
    Ok(out)
}

/// Inverse of [`wavelet_forward`].
pub fn wavelet_inverse(coeffs: &[f64], family: WaveletFamily) -> Result<Vec<f64>> {
    check_pow2(coeffs.len())?;
    let h = family.lowpass();
    let g = highpass(&h);
    let mut out = coeffs.to_vec();
    let mut len = 2;
    while len <= coeffs.len() {
        let half = len / 2;
        let mut next = vec![0.0; len];
        for i in 0..half {
            for k in 0..h.len() {
                next[(2 * i + k) % len] += h[k] * out[i] + g[k] * out[half + i];
            }
        }
        out[..len].copy_from_slice(&next);
        len *= 2;
    }
    Ok(out)
}

fn check_pow2(len: usize) -> Result<()> {
    if len == 0 || !len.is_power_of_two() {
        return Err(DfslError::NotPowerOfTwo { len, suggestion: len.max(1).next_power_of_two() });
    }
    Ok(())
}

/// First `n_funcs` synthesis vectors (inverse transforms of unit coordinate
/// vectors) of an orthonormal periodic wavelet system.
pub fn wavelet_basis(n_points: usize, n_funcs: usize, family: WaveletFamily) -> Result<BasisMatrix> {
    check_pow2(n_points)?;
    if n_funcs == 0 || n_funcs > n_points {
        return Err(DfslError::invalid(format!("n_funcs must lie in 1..={n_points}, got {n_funcs}")));
    }
    let mut cols = DMatrix::zeros(n_points, n_funcs);
    for q in 0..n_funcs {
        let mut e = vec![0.0; n_points];
        e[q] = 1.0;
        let v = wavelet_inverse(&e, family)?;
        cols.column_mut(q).copy_from_slice(&v);
    }
    Ok(BasisMatrix {
        columns: unit_columns(cols)?,
        family: BasisFamily::Wavelet { wavelet: family, n_funcs },
        orthonormal: false,
    })
}

/// Gram-Schmidt in column order; the span and first direction are kept.
pub fn orthogonalize(basis: &BasisMatrix) -> Result<BasisMatrix> {
    Ok(BasisMatrix {
        columns: linalg::gram_schmidt(&basis.columns, 1e-10)?,
        family: basis.family.clone(),
        orthonormal: true,
    })
}
