//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use dfsl::flsa::flsa_objective;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Dual of the FLSA: minimize 1/2 ||z - v - D'u||^2 over |v| <= s1, |u| <= s2.
/// Returns the primal point `z - v - D'u` and the final duality gap.
pub fn dual_oracle(z: &[f64], s1: f64, s2: f64) -> (Vec<f64>, f64) {
    let n = z.len();
    let m = n.saturating_sub(1);
    let primal = |v: &[f64], u: &[f64]| -> Vec<f64> {
        (0..n)
            .map(|k| {
                // (D'u)_k = u_{k-1} - u_k with D_{k,k} = -1, D_{k,k+1} = 1
                let dtu = if k > 0 { u[k - 1] } else { 0.0 } - if k < m { u[k] } else { 0.0 };
                z[k] - v[k] - dtu
            })
            .collect()
    };
    let dual_value = |w: &[f64]| 0.5 * z.iter().map(|x| x * x).sum::<f64>() - 0.5 * w.iter().map(|x| x * x).sum::<f64>();
    let step = 1.0 / 5.0;
    let (mut v, mut u) = (vec![0.0; n], vec![0.0; m]);
    let (mut yv, mut yu) = (v.clone(), u.clone());
    let mut t = 1.0f64;
    let mut best = (primal(&v, &u), f64::INFINITY);
    for it in 0..400_000 {
        let w = primal(&yv, &yu);
        // gradient of the dual objective is -w for v and -Dw for u
        let nv: Vec<f64> = (0..n).map(|k| (yv[k] + step * w[k]).clamp(-s1, s1)).collect();
        let nu: Vec<f64> = (0..m).map(|k| (yu[k] + step * (w[k + 1] - w[k])).clamp(-s2, s2)).collect();
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let beta = (t - 1.0) / t_next;
        yv = (0..n).map(|k| nv[k] + beta * (nv[k] - v[k])).collect();
        yu = (0..m).map(|k| nu[k] + beta * (nu[k] - u[k])).collect();
        v = nv;
        u = nu;
        t = t_next;
        if it % 200 == 0 {
            let b = primal(&v, &u);
            let gap = flsa_objective(z, s1, s2, &b) - dual_value(&b);
            if gap < best.1 {
                best = (b, gap);
            }
            if gap < 1e-13 {
                break;
            }
        }
    }
    best
}

pub fn log_uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    (rng.random_range(lo.ln()..hi.ln())).exp()
}

/// One channel's dynamic problem as a dense lasso-type program over the
/// stacked coefficients `x[a * n + k] = b_{j, peer a}(t_k)`.
pub struct DenseChannel {
    pub q: usize,
    pub n: usize,
    pub gram: DMatrix<f64>,
    pub lin: DVector<f64>,
    pub energy: f64,
}

/// Build the dense program from the raw `N x n x p` tensor, whitening with
/// the inverse square root of `gamma`.
pub fn dense_channel(values: &ndarray::Array3<f64>, j: usize, gamma: &DMatrix<f64>) -> DenseChannel {
    let (n_samples, n, p) = values.dim();
    let eig = SymmetricEigen::new(gamma.clone());
    let inv_sqrt = &eig.eigenvectors
        * DMatrix::from_diagonal(&eig.eigenvalues.map(|v| 1.0 / v.sqrt()))
        * eig.eigenvectors.transpose();
    let peers: Vec<usize> = (0..p).filter(|&r| r != j).collect();
    let q = peers.len();
    let mut design = DMatrix::zeros(n_samples * n, q * n);
    let mut target = DVector::zeros(n_samples * n);
    for i in 0..n_samples {
        let y = DMatrix::from_fn(n, p, |k, c| values[(i, k, c)]);
        let w = &inv_sqrt * y;
        for k in 0..n {
            target[i * n + k] = w[(k, j)];
            for (a, &r) in peers.iter().enumerate() {
                design[(i * n + k, a * n + k)] = w[(k, r)];
            }
        }
    }
    DenseChannel {
        q,
        n,
        gram: design.transpose() * &design,
        lin: design.transpose() * &target,
        energy: target.norm_squared(),
    }
}

impl DenseChannel {
    pub fn objective(&self, x: &DVector<f64>, lambda1: f64, lambda2: f64) -> f64 {
        let smooth = 0.5 * (self.energy - 2.0 * self.lin.dot(x) + (x.transpose() * &self.gram * x)[(0, 0)]);
        let mut fuse = 0.0;
        for a in 0..self.q {
            for k in 1..self.n {
                fuse += (x[a * self.n + k] - x[a * self.n + k - 1]).abs();
            }
        }
        smooth + lambda2 * x.lp_norm(1) + lambda1 * fuse
    }

    /// Condat-Vu primal-dual splitting: gradient on the quadratic, soft
    /// thresholding for the magnitude term and a clipped dual variable for
    /// the difference term. No fused-lasso proximal operator is involved.
    pub fn primal_dual(&self, lambda1: f64, lambda2: f64, iterations: usize) -> DVector<f64> {
        let (q, n) = (self.q, self.n);
        let m = n - 1;
        let lip = SymmetricEigen::new(self.gram.clone()).eigenvalues.max().max(1e-12);
        // 1/tau - sigma ||K||^2 >= L/2 with ||K||^2 <= 4
        let tau = 0.9 / lip;
        let sigma = lip / 8.0;
        let mut x = DVector::zeros(q * n);
        let mut u = DVector::zeros(q * m);
        let mut xt = DVector::zeros(q * n);
        for _ in 0..iterations {
            let grad = &self.gram * &x - &self.lin;
            for a in 0..q {
                for k in 0..n {
                    // (K'u)_k = u_{k-1} - u_k for differences x_{k+1} - x_k
                    let ktu = if k > 0 { u[a * m + k - 1] } else { 0.0 } - if k < m { u[a * m + k] } else { 0.0 };
                    let v = x[a * n + k] - tau * (grad[a * n + k] + ktu);
                    xt[a * n + k] = v.signum() * (v.abs() - tau * lambda2).max(0.0);
                }
            }
            for a in 0..q {
                for k in 0..m {
                    let bar_next = 2.0 * xt[a * n + k + 1] - x[a * n + k + 1];
                    let bar = 2.0 * xt[a * n + k] - x[a * n + k];
                    u[a * m + k] = (u[a * m + k] + sigma * (bar_next - bar)).clamp(-lambda1, lambda1);
                }
            }
            std::mem::swap(&mut x, &mut xt);
        }
        x
    }

    pub fn lipschitz(&self) -> f64 {
        SymmetricEigen::new(self.gram.clone()).eigenvalues.max()
    }

    /// Unstack `x` into `(q, n)` rows.
    pub fn unstack(&self, x: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(self.q, self.n, |a, k| x[a * self.n + k])
    }
}

/// Normalized cut `sum_c cut(C, rest) / vol(C)` of a labeling (labels from 1).
pub fn ncut(a: &DMatrix<f64>, labels: &[usize]) -> f64 {
    let k = labels.iter().copied().max().unwrap_or(0);
    let p = a.nrows();
    (1..=k)
        .map(|c| {
            let (mut cut, mut vol) = (0.0, 0.0);
            for j in (0..p).filter(|&j| labels[j] == c) {
                for r in 0..p {
                    vol += a[(j, r)];
                    if labels[r] != c {
                        cut += a[(j, r)];
                    }
                }
            }
            if vol > 0.0 { cut / vol } else { 0.0 }
        })
        .sum()
}

/// Every partition of `0..p` into exactly `k` nonempty blocks, as restricted
/// growth strings with labels from 1.
pub fn partitions(p: usize, k: usize) -> Vec<Vec<usize>> {
    fn grow(prefix: &mut Vec<usize>, p: usize, k: usize, out: &mut Vec<Vec<usize>>) {
        if prefix.len() == p {
            if prefix.iter().copied().max() == Some(k) {
                out.push(prefix.clone());
            }
            return;
        }
        let top = prefix.iter().copied().max().unwrap_or(0);
        for l in 1..=(top + 1).min(k) {
            prefix.push(l);
            grow(prefix, p, k, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    grow(&mut Vec::new(), p, k, &mut out);
    out
}

/// Exhaustive minimum normalized cut over all `k`-partitions.
pub fn brute_force_ncut(a: &DMatrix<f64>, k: usize) -> (Vec<usize>, f64) {
    partitions(a.nrows(), k)
        .into_iter()
        .map(|l| {
            let v = ncut(a, &l);
            (l, v)
        })
        .min_by(|x, y| x.1.total_cmp(&y.1))
        .expect("at least one partition")
}

/// Adjusted Rand index from the pair-counting contingency table.
pub fn adjusted_rand_index(x: &[usize], y: &[usize]) -> f64 {
    assert_eq!(x.len(), y.len());
    let choose2 = |m: usize| (m * m.saturating_sub(1)) as f64 / 2.0;
    let (kx, ky) = (x.iter().max().map_or(0, |m| m + 1), y.iter().max().map_or(0, |m| m + 1));
    let mut table = vec![vec![0usize; ky]; kx];
    for (&a, &b) in x.iter().zip(y) {
        table[a][b] += 1;
    }
    let index: f64 = table.iter().flatten().map(|&m| choose2(m)).sum();
    let rows: f64 = table.iter().map(|r| choose2(r.iter().sum())).sum();
    let cols: f64 = (0..ky).map(|b| choose2(table.iter().map(|r| r[b]).sum())).sum();
    let expected = rows * cols / choose2(x.len());
    let max = 0.5 * (rows + cols);
    if max == expected {
        return 1.0;
    }
    (index - expected) / (max - expected)
}

/// `min ||x R - y||_F` over orthogonal `R` by Cayley-retraction gradient
/// descent from several starts covering both components of O(d).
pub fn rotation_descent(x: &DMatrix<f64>, y: &DMatrix<f64>, rng: &mut ChaCha8Rng) -> f64 {
    let d = x.ncols();
    let f = |r: &DMatrix<f64>| (x * r - y).norm_squared();
    let mut starts = vec![DMatrix::identity(d, d)];
    let mut flip = DMatrix::identity(d, d);
    flip[(0, 0)] = -1.0;
    starts.push(flip.clone());
    for _ in 0..6 {
        let g = DMatrix::from_fn(d, d, |_, _| rng.random::<f64>() - 0.5);
        let q = g.qr().q();
        starts.push(q.clone());
        starts.push(q * &flip);
    }
    let eye = DMatrix::identity(d, d);
    let mut best = f64::INFINITY;
    for mut r in starts {
        let mut step = 1.0;
        for _ in 0..20_000 {
            let g = 2.0 * x.transpose() * (x * &r - y);
            let rg = r.transpose() * &g;
            let w = 0.5 * (&rg - rg.transpose());
            if w.norm() < 1e-14 {
                break;
            }
            let current = f(&r);
            loop {
                let left = (&eye + 0.5 * step * &w).try_inverse().expect("Cayley factor is invertible");
                let cand = &r * left * (&eye - 0.5 * step * &w);
                if f(&cand) < current || step < 1e-16 {
                    r = cand;
                    step *= 2.0;
                    break;
                }
                step *= 0.5;
            }
        }
        best = best.min(f(&r).sqrt());
    }
    best
}
