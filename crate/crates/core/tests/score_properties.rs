use nalgebra::{DMatrix, DVector};
use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use local_ensembles::score::{
    extrapolation_score, extrapolation_score_by_coefficients, influence_score, laplace_variance, project_out,
    score_sweep,
};
use local_ensembles::spectral::{dense_eig, Provenance};
use local_ensembles::SpectralBasis;

fn orthogonal(p: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(p, p, |_, _| StandardNormal.sample(rng)).qr().q()
}

/// First `m` columns of a random orthogonal matrix as basis rows.
fn random_basis(p: usize, m: usize, seed: u64) -> (SpectralBasis, DMatrix<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q = orthogonal(p, &mut rng);
    let rows = Array2::from_shape_fn((m, p), |(i, j)| q[(j, i)]);
    let values = (0..m).map(|i| (m - i) as f64 + 0.5).collect();
    (SpectralBasis::new(values, rows, Provenance::default()).unwrap(), q)
}

fn gaussian(p: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..p).map(|_| StandardNormal.sample(&mut rng)).collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dims() -> impl Strategy<Value = (usize, usize)> {
    (1usize..24).prop_flat_map(|p| (Just(p), 0..=p))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn projection_is_idempotent((p, m) in dims(), seed in any::<u64>()) {
        let (basis, _) = random_basis(p, m, seed);
        let g = gaussian(p, seed ^ 1);
        let once = project_out(&basis, &g).unwrap();
        let twice = project_out(&basis, &once).unwrap();
        for (a, b) in once.iter().zip(&twice) {
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + norm(&g)));
        }
    }

    #[test]
    fn score_is_nonincreasing_in_m((p, _) in dims(), seed in any::<u64>()) {
        let (basis, _) = random_basis(p, p, seed);
        let g = gaussian(p, seed ^ 2);
        let ms: Vec<usize> = (0..=p).collect();
        let sweep = score_sweep(&basis, &g, &ms).unwrap();
        prop_assert!((sweep[0].value - norm(&g)).abs() <= 1e-12 * norm(&g));
        for w in sweep.windows(2) {
            prop_assert!(w[1].value <= w[0].value + 1e-12);
        }
        prop_assert!(sweep[p].value <= 1e-6 * norm(&g));
    }

    #[test]
    fn score_is_scale_equivariant((p, m) in dims(), seed in any::<u64>(), c in -50.0f64..50.0) {
        let (basis, _) = random_basis(p, m, seed);
        let g = gaussian(p, seed ^ 3);
        let scaled: Vec<f64> = g.iter().map(|x| c * x).collect();
        let a = extrapolation_score(&basis, &g).unwrap().value;
        let b = extrapolation_score(&basis, &scaled).unwrap().value;
        prop_assert!((b - c.abs() * a).abs() <= 1e-10 * (1.0 + c.abs() * norm(&g)));
    }

    #[test]
    fn sweep_matches_residual_norm((p, _) in dims(), seed in any::<u64>()) {
        let (basis, _) = random_basis(p, p, seed);
        let g = gaussian(p, seed ^ 4);
        let ms: Vec<usize> = (0..p).collect();
        for (r, &m) in score_sweep(&basis, &g, &ms).unwrap().iter().zip(&ms) {
            let direct = extrapolation_score(&basis.truncate(m), &g).unwrap().value;
            prop_assert!((r.value - direct).abs() <= 1e-10, "m = {}: {} vs {}", m, r.value, direct);
            prop_assert_eq!(r.m_used, m);
        }
    }

    #[test]
    fn two_forms_agree((p, m) in dims(), seed in any::<u64>()) {
        prop_assume!(m < p);
        let (basis, _) = random_basis(p, m, seed);
        let g = gaussian(p, seed ^ 5);
        let a = extrapolation_score(&basis, &g).unwrap().value;
        let b = extrapolation_score_by_coefficients(&basis, &g).unwrap();
        prop_assert!((a - b).abs() <= 1e-10, "{} vs {}", a, b);
    }

    #[test]
    fn span_vectors_score_zero_and_complements_keep_their_norm((p, m) in dims(), seed in any::<u64>()) {
        let (basis, q) = random_basis(p, m, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 6);
        let coeffs: Vec<f64> = (0..p).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let inside: Vec<f64> = (0..p).map(|i| (0..m).map(|j| coeffs[j] * q[(i, j)]).sum()).collect();
        let outside: Vec<f64> = (0..p).map(|i| (m..p).map(|j| coeffs[j] * q[(i, j)]).sum()).collect();
        prop_assert!(extrapolation_score(&basis, &inside).unwrap().value <= 1e-12 * (1.0 + norm(&inside)));
        let e = extrapolation_score(&basis, &outside).unwrap().value;
        prop_assert!((e - norm(&outside)).abs() <= 1e-12 * (1.0 + norm(&outside)));
    }

    #[test]
    fn eigenvector_signs_do_not_matter((p, m) in dims(), seed in any::<u64>(), flips in any::<u32>()) {
        let (basis, _) = random_basis(p, m, seed);
        let mut flipped = basis.clone();
        for (j, mut row) in flipped.eigenvectors.outer_iter_mut().enumerate() {
            if flips >> (j % 32) & 1 == 1 {
                row.mapv_inplace(|v| -v);
            }
        }
        let g = gaussian(p, seed ^ 7);
        let a = extrapolation_score(&basis, &g).unwrap().value;
        let b = extrapolation_score(&flipped, &g).unwrap().value;
        prop_assert!((a - b).abs() <= 1e-13 * (1.0 + norm(&g)));
    }

    #[test]
    fn inverse_hessian_forms_match_direct_solves(p in 1usize..16, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = orthogonal(p, &mut rng);
        let lambdas = DVector::from_fn(p, |_, _| rng.gen_range(0.5..20.0));
        let h = &q * DMatrix::from_diagonal(&lambdas) * q.transpose();
        let h = (&h + h.transpose()) * 0.5;
        let g = DVector::from_fn(p, |_, _| StandardNormal.sample(&mut rng));
        let chol = h.clone().cholesky().expect("positive definite");
        let h_inv_g = chol.solve(&g);
        let laplace_direct = g.dot(&h_inv_g);
        let influence_direct = h_inv_g.dot(&h_inv_g);

        let dense = Array2::from_shape_fn((p, p), |(i, j)| h[(i, j)]);
        let full = SpectralBasis::from_dense(dense_eig(&dense).unwrap(), Provenance::default());
        let lap = laplace_variance(&full, g.as_slice()).unwrap();
        let inf = influence_score(&full, g.as_slice()).unwrap();
        prop_assert_eq!(lap.clamped, 0);
        prop_assert_eq!(inf.clamped, 0);
        prop_assert!((lap.value - laplace_direct).abs() <= 1e-9 * laplace_direct.abs());
        prop_assert!((inf.value - influence_direct).abs() <= 1e-9 * influence_direct.abs());
    }
}

#[test]
fn sweep_rejects_unsorted_or_oversized_m() {
    let (basis, _) = random_basis(5, 3, 0);
    let g = gaussian(5, 1);
    assert!(score_sweep(&basis, &g, &[2, 1]).is_err());
    assert!(score_sweep(&basis, &g, &[4]).is_err());
    assert!(score_sweep(&basis, &g[..4], &[1]).is_err());
}
