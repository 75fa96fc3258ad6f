mod support;

use dfsl::simulate;
use dfsl::solver::{CoefficientPath, FistaOptions};
use dfsl::subspace::{self, ClusteringConfig, MfpcaOptions};
use dfsl::tuning::{self, GridSpec};
use nalgebra::{DMatrix, DVector};
use ndarray::{s, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use support::{adjusted_rand_index, brute_force_ncut, ncut, rotation_descent};

fn random_orthogonal(d: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(d, d, |_, _| rng.random::<f64>() - 0.5).qr().q()
}

fn random_orthonormal(n: usize, d: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let g = DMatrix::from_fn(n, d, |_, _| rng.random::<f64>() - 0.5);
    g.qr().q().columns(0, d).clone_owned()
}

fn zero_based(labels: &[usize]) -> Vec<usize> {
    labels.iter().map(|l| l - 1).collect()
}

#[test]
fn two_block_support_gives_block_diagonal_affinity() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut v = Array3::zeros((6, 6, 10));
    for j in 0..6 {
        for r in 0..6 {
            if j != r && (j < 3) == (r < 3) {
                for k in 0..10 {
                    v[(j, r, k)] = rng.random::<f64>() - 0.5;
                }
            }
        }
    }
    let path = CoefficientPath::new(v).unwrap();
    let a = subspace::segment_affinity(&path, (3, 9)).unwrap();
    for j in 0..6 {
        assert_eq!(a[(j, j)], 0.0);
        for r in 0..6 {
            assert_eq!(a[(j, r)].to_bits(), a[(r, j)].to_bits());
            if (j < 3) != (r < 3) {
                assert_eq!(a[(j, r)], 0.0);
            } else if j != r {
                assert!(a[(j, r)] > 0.0);
            }
        }
    }
    let expected: f64 = (2..8).map(|k| path.get(0, 1, k).abs() + path.get(1, 0, k).abs()).sum::<f64>() / 6.0;
    assert!((a[(0, 1)] - expected).abs() < 1e-14);
    assert!(subspace::segment_affinity(&path, (5, 5)).is_err());
    assert!(subspace::segment_affinity(&path, (0, 4)).is_err());
    assert!(subspace::segment_affinity(&path, (4, 12)).is_err());
}

fn block_noise_affinity(rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let block = [0, 0, 1, 1, 2, 2];
    let mut a = DMatrix::zeros(6, 6);
    for j in 0..6 {
        for r in (j + 1)..6 {
            let base = if block[j] == block[r] { 1.0 } else { 0.0 };
            let v = base + 0.3 * rng.random::<f64>();
            a[(j, r)] = v;
            a[(r, j)] = v;
        }
    }
    a
}

#[test]
fn spectral_matches_exhaustive_normalized_cut() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..20 {
        let a = block_noise_affinity(&mut rng);
        let got = subspace::spectral_cluster(&a, 3, case).unwrap();
        let (best, value) = brute_force_ncut(&a, 3);
        assert_eq!(got.assignment, best, "case {case}");
        assert!((ncut(&a, &got.assignment) - value).abs() < 1e-12);
    }
}

#[test]
fn spectral_ignores_affinity_scale() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..10 {
        let a = block_noise_affinity(&mut rng);
        let base = subspace::spectral_cluster(&a, 3, 2).unwrap();
        for c in [1e-3, 0.7, 250.0] {
            assert_eq!(subspace::spectral_cluster(&(&a * c), 3, 2).unwrap(), base);
        }
    }
}

#[test]
fn hierarchical_splits_at_the_dissimilarity_gap() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..20 {
        let strong = 1.0 + rng.random::<f64>();
        let weak = 0.05 * rng.random::<f64>();
        let a = DMatrix::from_fn(7, 7, |j, r| {
            if j == r {
                0.0
            } else if (j < 4) == (r < 4) {
                strong
            } else {
                weak
            }
        });
        let (inner, cross) = (1.0 / (1e-6 + strong), 1.0 / (1e-6 + weak));
        let threshold = inner + rng.random::<f64>() * (cross - inner);
        let c = subspace::hierarchical_cluster(&a, threshold).unwrap();
        assert_eq!(c.assignment, vec![1, 1, 1, 1, 2, 2, 2]);
        assert_eq!(subspace::hierarchical_cluster(&a, 0.5 * inner).unwrap().n_clusters(), 7);
        assert_eq!(subspace::hierarchical_cluster(&a, 2.0 * cross).unwrap().n_clusters(), 1);
    }
}

#[test]
fn rank_one_mfpca_matches_the_singular_vector() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (n_samples, n_s, p_l) = (15, 12, 3);
    let phi: Vec<f64> = (0..n_s).map(|_| rng.random::<f64>() - 0.5).collect();
    let loads = DMatrix::from_fn(n_samples, p_l, |_, _| rng.random::<f64>() - 0.5);
    let block = Array3::from_shape_fn((n_samples, n_s, p_l), |(i, k, c)| phi[k] * loads[(i, c)]);
    let fit = subspace::smooth_mfpca(block.view(), 0.0, 0.95).unwrap();
    assert_eq!(fit.dim(), 1);
    let z = DMatrix::from_fn(n_s, n_samples * p_l, |k, col| block[(col / p_l, k, col % p_l)]);
    let (u, sv, v) = dfsl::linalg::thin_svd(&z);
    let sign = fit.basis[(0, 0)].signum() * u[(0, 0)].signum();
    for k in 0..n_s {
        assert!((fit.basis[(k, 0)] - sign * u[(k, 0)]).abs() < 1e-10);
    }
    for col in 0..n_samples * p_l {
        let score = fit.scores[(col / p_l, 0, col % p_l)];
        assert!((score - sign * sv[0] * v[(col, 0)]).abs() < 1e-10);
    }
    assert!((fit.cumulative()[0] - 1.0).abs() < 1e-10);
}

#[test]
fn first_component_maximizes_the_penalized_energy() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (n_samples, n_s, p_l) = (25, 8, 2);
    let block = Array3::from_shape_fn((n_samples, n_s, p_l), |_| rng.random::<f64>() - 0.5);
    let z = DMatrix::from_fn(n_s, n_samples * p_l, |k, col| block[(col / p_l, k, col % p_l)]);
    let energy = &z * z.transpose();
    for lambda3 in [0.1, 2.0, 20.0] {
        let dd = DMatrix::from_fn(n_s, n_s, |u, v| {
            let degree = if u == 0 || u == n_s - 1 { 1.0 } else { 2.0 };
            if u == v { degree } else if u.abs_diff(v) == 1 { -1.0 } else { 0.0 }
        });
        let form = &energy - dd * lambda3;
        let value = |v: &DVector<f64>| v.dot(&(&form * v));
        let fit = subspace::smooth_mfpca(block.view(), lambda3, 0.99).unwrap();
        let best = value(&fit.basis.column(0).into_owned());
        // projected gradient ascent on the sphere from random starts
        let step = 0.2 / form.norm();
        for _ in 0..10 {
            let mut v = DVector::from_fn(n_s, |_, _| rng.random::<f64>() - 0.5);
            v /= v.norm();
            for _ in 0..5000 {
                v += &form * &v * (2.0 * step);
                v /= v.norm();
            }
            assert!(value(&v) <= best + 1e-9 * best.abs().max(1.0), "lambda3 {lambda3}: {} > {best}", value(&v));
        }
    }
}

#[test]
fn heavy_smoothing_flattens_the_first_component() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let block = Array3::from_shape_fn((10, 9, 2), |(_, k, _)| 1.0 + 0.3 * (k as f64) + 0.2 * (rng.random::<f64>() - 0.5));
    let fit = subspace::smooth_mfpca(block.view(), 1e12, 0.5).unwrap();
    let flat = 1.0 / 3.0;
    for k in 0..9 {
        assert!((fit.basis[(k, 0)] - flat).abs() < 1e-6, "{}", fit.basis[(k, 0)]);
    }
}

#[test]
fn mfpca_bases_are_orthonormal_and_energy_adds_up() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for lambda3 in [0.0, 0.5, 3.0] {
        let block = Array3::from_shape_fn((20, 10, 3), |_| rng.random::<f64>() - 0.5);
        let fit = subspace::smooth_mfpca(block.view(), lambda3, 0.9).unwrap();
        let gram = fit.basis.transpose() * &fit.basis;
        assert!((gram - DMatrix::identity(fit.dim(), fit.dim())).amax() < 1e-8);
        let cumulative = fit.cumulative();
        assert!(cumulative.windows(2).all(|w| w[1] >= w[0]));
        assert!(*cumulative.last().unwrap() >= 0.9 && *cumulative.last().unwrap() <= 1.0 + 1e-12);
        assert!(cumulative.len() < 2 || cumulative[cumulative.len() - 2] < 0.9);
        for q in 0..fit.dim() {
            let col = fit.basis.column(q);
            let at = col.iamax();
            assert!(col[at] > 0.0);
        }
    }
}

#[test]
fn procrustes_undoes_exact_rotations() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for d in 1..=4 {
        let phi = random_orthonormal(20, d, &mut rng);
        let q = random_orthogonal(d, &mut rng);
        let est = &phi * q.transpose();
        let out = subspace::procrustes_align(&est, &phi).unwrap();
        assert!(out.error < 1e-10, "d {d}: {}", out.error);
        let orth = out.rotation.transpose() * &out.rotation;
        assert!((orth - DMatrix::identity(d, d)).amax() < 1e-10);
    }
}

#[test]
fn procrustes_matches_descent_over_rotations() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for case in 0..15 {
        let d = 1 + case % 3;
        let phi = random_orthonormal(16, d, &mut rng);
        let noisy = &phi * random_orthogonal(d, &mut rng) + DMatrix::from_fn(16, d, |_, _| 0.2 * (rng.random::<f64>() - 0.5));
        let est = noisy.qr().q().columns(0, d).clone_owned();
        let out = subspace::procrustes_align(&est, &phi).unwrap();
        let oracle = rotation_descent(&est, &phi, &mut rng);
        assert!((out.error - oracle).abs() < 1e-6, "case {case}: {} vs {oracle}", out.error);
        // a common orthogonal factor on the right leaves the error unchanged
        let w = random_orthogonal(d, &mut rng);
        let moved = subspace::procrustes_align(&(&est * &w), &(&phi * &w)).unwrap();
        assert!((moved.error - out.error).abs() < 1e-10);
    }
}

#[test]
fn subspace_affinity_reference_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let phi = random_orthonormal(10, 3, &mut rng);
    let same = subspace::subspace_affinity(&phi, &phi).unwrap();
    assert!((same.raw - 3f64.sqrt()).abs() < 1e-12);
    assert!((same.normalized - 1.0).abs() < 1e-12);
    let e = DMatrix::<f64>::identity(6, 6);
    let orth = subspace::subspace_affinity(&e.columns(0, 2).clone_owned(), &e.columns(2, 3).clone_owned()).unwrap();
    assert_eq!(orth.raw, 0.0);
    assert!(subspace::subspace_affinity(&phi, &e).is_err());

    // B-spline against Fourier on a 32-point segment, computed with scipy
    // (order-3 B-splines 1, 4, 7 on 32 knots; cos(q t + q pi), q = 1..3)
    let (_, truth) = simulate::model_ii(2, 0.05, 1).unwrap();
    let aff = subspace::subspace_affinity(&truth.bases[0][0].columns, &truth.bases[0][1].columns).unwrap();
    assert!((aff.raw - 0.675_154_366_822_186_8).abs() < 1e-10, "{}", aff.raw);
}

fn tuned_path(data: &dfsl::dataset::FunctionalDataset, noise: &dfsl::dataset::NoiseModel) -> CoefficientPath {
    tuning::select(data, &GridSpec::default(), noise, &FistaOptions::default()).unwrap().fit.path
}

#[test]
fn model_i_affinity_is_nearly_block_diagonal_and_clusters_exactly() {
    let (data, truth) = simulate::model_i(500, 0.05, 1).unwrap();
    let path = tuned_path(&data, &truth.noise);
    let a = subspace::segment_affinity(&path, (1, 21)).unwrap();
    let (mut inside, mut outside) = (0.0, 0.0);
    for j in 0..8 {
        for r in 0..8 {
            if (j < 4) == (r < 4) {
                inside += a[(j, r)];
            } else {
                outside += a[(j, r)];
            }
        }
    }
    assert!(outside / inside < 0.05, "{}", outside / inside);

    let model = subspace::infer(
        &path,
        &truth.change_points,
        &data,
        &ClusteringConfig::Spectral { k: 2, seed: 1 },
        &MfpcaOptions::default(),
    )
    .unwrap();
    assert_eq!(model.segments.len(), 2);
    for (s, seg) in model.segments.iter().enumerate() {
        let ari = adjusted_rand_index(&zero_based(&seg.assignment), &zero_based(&truth.assignment[s]));
        assert_eq!(ari, 1.0, "segment {s}: {:?}", seg.assignment);
        for cluster in &seg.clusters {
            let phi = cluster.basis_matrix();
            assert!((phi.transpose() * &phi - DMatrix::identity(cluster.dim, cluster.dim)).amax() < 1e-8);
        }
    }
}

#[test]
fn single_segment_covers_the_whole_axis() {
    let (data, truth) = simulate::model_i(60, 0.05, 2).unwrap();
    let path = tuned_path(&data, &truth.noise);
    let model = subspace::infer(&path, &[], &data, &ClusteringConfig::Hierarchical { max_within_distance: 1.4 }, &MfpcaOptions::default()).unwrap();
    assert_eq!(model.segments.len(), 1);
    assert_eq!((model.segments[0].start, model.segments[0].end), (1, 41));
    let json = serde_json::to_string(&model).unwrap();
    let back: subspace::SegmentedSubspaceModel = serde_json::from_str(&json).unwrap();
    assert_eq!(back, model);
}

#[test]
fn model_ii_pipeline_recovers_three_subspaces_per_segment() {
    let (data, truth) = simulate::model_ii(500, 0.05, 1).unwrap();
    let path = tuned_path(&data, &truth.noise);
    let model = subspace::infer(
        &path,
        &truth.change_points,
        &data,
        &ClusteringConfig::Spectral { k: 3, seed: 1 },
        &MfpcaOptions::default(),
    )
    .unwrap();
    assert_eq!(model.segments.len(), 3);
    for (s, seg) in model.segments.iter().enumerate() {
        assert_eq!(seg.clusters.len(), 3);
        let ari = adjusted_rand_index(&zero_based(&seg.assignment), &zero_based(&truth.assignment[s]));
        assert_eq!(ari, 1.0, "segment {s}: {:?}", seg.assignment);
    }

    // wavelet subspace of the last segment
    let members = truth.members(2, 3);
    let block = data.values().slice(s![.., 64..128, ..]).select(Axis(2), &members);
    let fit = subspace::smooth_mfpca(block.view(), 1.0, 0.95).unwrap();
    let reference = &truth.bases[2][2].columns;
    assert_eq!(fit.dim(), 3, "{:?}", fit.cumulative());
    let aligned = subspace::procrustes_align(&fit.basis, reference).unwrap();
    assert!(aligned.error < 0.2 * reference.norm(), "{}", aligned.error);
}
