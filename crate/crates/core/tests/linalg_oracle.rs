use lrf_core::linalg::{energy, energy_to_rank, reconstruct, svd, truncate, Matrix, SvdFactors};
use nalgebra::{DMatrix, SymmetricEigen};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn seeded(rows: usize, cols: usize, seed: u64) -> Matrix {
    Matrix::random_normal(rows, cols, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn to_nalgebra(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), &m.to_row_major())
}

/// Singular values as square roots of the eigenvalues of MᵀM (or MMᵀ), descending.
fn oracle_sigma(m: &Matrix) -> Vec<f64> {
    let a = to_nalgebra(m);
    let gram = if m.rows() >= m.cols() {
        a.transpose() * &a
    } else {
        &a * a.transpose()
    };
    let eig = SymmetricEigen::new(gram);
    let mut vals: Vec<f64> = eig.eigenvalues.iter().map(|v| v.max(0.0).sqrt()).collect();
    vals.sort_by(|a, b| b.total_cmp(a));
    vals
}

fn max_orthonormality_defect(f: &SvdFactors) -> f64 {
    let utu = f.u.transpose().matmul(&f.u).unwrap();
    let vvt = f.vt.matmul(&f.vt.transpose()).unwrap();
    let r = f.sigma.len();
    let eye = Matrix::identity(r);
    utu.max_abs_diff(&eye).unwrap().max(vvt.max_abs_diff(&eye).unwrap())
}

#[test]
fn sigma_matches_gram_eigenvalues() {
    let m = seeded(8, 5, 7);
    let f = svd(&m).unwrap();
    let expected = oracle_sigma(&m);
    for (got, want) in f.sigma.iter().zip(&expected) {
        assert!((got - want).abs() < 1e-8, "{got} vs {want}");
    }
}

#[test]
fn truncation_error_matches_discarded_tail() {
    let m = seeded(16, 12, 11);
    let expected_sigma = oracle_sigma(&m);
    let tail: f64 = expected_sigma[4..].iter().map(|s| s * s).sum::<f64>().sqrt();
    let f = svd(&m).unwrap();
    let approx = reconstruct(&truncate(&f, 4).unwrap()).unwrap();
    let err = approx.frobenius_distance(&m).unwrap();
    assert!((err - tail).abs() < 1e-8, "{err} vs {tail}");
}

#[test]
fn rank_two_product_matches_triple_product() {
    let m = seeded(8, 5, 7);
    let f = svd(&m).unwrap();
    let got = reconstruct(&truncate(&f, 2).unwrap()).unwrap();

    // U₂ Σ₂ V₂ᵀ assembled element by element from the raw factors.
    let mut want = vec![0.0; 8 * 5];
    for i in 0..8 {
        for j in 0..5 {
            for k in 0..2 {
                want[i * 5 + j] += f.u.get(i, k) * f.sigma[k] * f.vt.get(k, j);
            }
        }
    }
    let want = Matrix::new(8, 5, want).unwrap();
    assert!(got.max_abs_diff(&want).unwrap() < 1e-10);
}

#[test]
fn full_rank_reconstruction() {
    let m = seeded(8, 5, 7);
    let f = svd(&m).unwrap();
    let r = reconstruct(&truncate(&f, 5).unwrap()).unwrap();
    assert!(r.frobenius_distance(&m).unwrap() / m.frobenius_norm() < 1e-6);
}

#[test]
fn energy_matches_cumulative_sum() {
    let m = seeded(8, 5, 7);
    let sigma = oracle_sigma(&m);
    let want = sigma[..3].iter().sum::<f64>() / sigma.iter().sum::<f64>();
    let got = energy(&svd(&m).unwrap(), 3).unwrap();
    assert!((got - want).abs() < 1e-12);
}

#[test]
fn energy_to_rank_matches_linear_scan() {
    let m = seeded(32, 32, 3);
    let sigma = oracle_sigma(&m);
    let total: f64 = sigma.iter().sum();
    let scan = (1..=32)
        .find(|&k| sigma[..k].iter().sum::<f64>() / total >= 0.9)
        .unwrap();
    assert_eq!(energy_to_rank(&svd(&m).unwrap(), 0.9), scan);
}

#[test]
fn repeated_svd_is_bit_identical() {
    let m = seeded(40, 24, 5);
    let a = svd(&m).unwrap();
    let b = svd(&m).unwrap();
    assert_eq!(a, b);
}

fn matrix_strategy() -> impl Strategy<Value = Matrix> {
    (1usize..24, 1usize..24).prop_flat_map(|(r, c)| {
        proptest::collection::vec(-10.0f64..10.0, r * c)
            .prop_map(move |data| Matrix::new(r, c, data).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn svd_invariants(m in matrix_strategy()) {
        let f = svd(&m).unwrap();
        prop_assert!(f.sigma.windows(2).all(|w| w[0] >= w[1]));
        prop_assert!(f.sigma.iter().all(|s| *s >= 0.0));
        prop_assert!(max_orthonormality_defect(&f) <= 1e-8);

        let r = f.sigma.len();
        let scale = m.frobenius_norm().max(f64::MIN_POSITIVE);
        for k in 1..=r {
            let approx = reconstruct(&truncate(&f, k).unwrap()).unwrap();
            let err = approx.frobenius_distance(&m).unwrap();
            let tail = f.sigma[k..].iter().map(|s| s * s).sum::<f64>().sqrt();
            prop_assert!((err - tail).abs() <= 1e-6 * scale);
        }

        // sign convention
        for c in 0..r {
            let col: Vec<f64> = (0..f.u.rows()).map(|i| f.u.get(i, c)).collect();
            let max_abs = col.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            let first = col.iter().find(|v| v.abs() == max_abs).unwrap();
            prop_assert!(*first >= 0.0);
        }
    }

    #[test]
    fn energy_monotone_and_inverse(m in matrix_strategy()) {
        let f = svd(&m).unwrap();
        prop_assume!(f.sigma[0] > 0.0);
        let r = f.sigma.len();
        let mut prev = 0.0;
        for k in 1..=r {
            let e = energy(&f, k).unwrap();
            prop_assert!(e >= prev);
            prop_assert!(energy_to_rank(&f, e) <= k);
            prev = e;
        }
        prop_assert_eq!(energy(&f, r).unwrap(), 1.0);
    }
}
