//! Operator diagnostics: Gram matrices, singular spectrum, effective rank and
//! empirical isometry constants on a subspace.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{invalid, Result, SpxError};
use crate::patterns::SensingOperator;
use crate::rng::{derive_seed, streams, SpxRng};

/// Default cap on the side length of a materialized Gram matrix.
pub const DEFAULT_GRAM_LIMIT: usize = 4096;
pub const DEFAULT_EPS_RANK: f64 = 1e-10;
pub const DEFAULT_NUM_PROBES: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GramSide {
    /// `Phi Phi^T` (`M x M`).
    Rows,
    /// `Phi^T Phi` (`N x N`).
    Cols,
}

pub fn gram(op: &SensingOperator, side: GramSide) -> Result<DMatrix<f64>> {
    gram_with_limit(op, side, Some(DEFAULT_GRAM_LIMIT))
}

/// Gram matrix, symmetrized as `(A + A^T) / 2`. `limit` guards the `Cols`
/// side; `None` lifts the guard.
pub fn gram_with_limit(op: &SensingOperator, side: GramSide, limit: Option<usize>) -> Result<DMatrix<f64>> {
    let phi = op.to_dense();
    let g = match side {
        GramSide::Rows => &phi * phi.transpose(),
        GramSide::Cols => {
            if let Some(limit) = limit {
                if op.n_pixels() > limit {
                    return Err(SpxError::ResourceLimit(format!(
                        "column Gram would be {n}x{n} (limit {limit})",
                        n = op.n_pixels()
                    )));
                }
            }
            phi.transpose() * &phi
        }
    };
    Ok((&g + g.transpose()) * 0.5)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumReport {
    /// `min(M, N)` values, nonincreasing.
    pub singular_values: Vec<f64>,
    /// Count of `sigma_i >= eps_rank * sigma_1`.
    pub threshold_rank: usize,
    /// `exp` of the Shannon entropy of `sigma_i^2 / sum sigma_j^2`; 0 for a zero operator.
    pub entropy_rank: f64,
    /// `sum sigma_i^2`.
    pub spectral_mass: f64,
}

impl SpectrumReport {
    pub fn sigma_max(&self) -> f64 {
        self.singular_values.first().copied().unwrap_or(0.0)
    }

    pub fn sigma_min(&self) -> f64 {
        self.singular_values.last().copied().unwrap_or(0.0)
    }
}

pub fn spectrum(op: &SensingOperator, eps_rank: f64) -> Result<SpectrumReport> {
    spectrum_with_limit(op, eps_rank, Some(DEFAULT_GRAM_LIMIT))
}

/// Singular values from the eigenvalues of the smaller Gram matrix.
pub fn spectrum_with_limit(op: &SensingOperator, eps_rank: f64, limit: Option<usize>) -> Result<SpectrumReport> {
    if !(eps_rank > 0.0 && eps_rank < 1.0) {
        return Err(invalid(format!("eps_rank must lie in (0, 1), got {eps_rank}")));
    }
    let (m, n) = (op.m(), op.n_pixels());
    let side = if m <= n { GramSide::Rows } else { GramSide::Cols };
    if let Some(limit) = limit {
        if m.min(n) > limit {
            return Err(SpxError::ResourceLimit(format!(
                "spectrum needs a {k}x{k} Gram (limit {limit})",
                k = m.min(n)
            )));
        }
    }
    let g = gram_with_limit(op, side, None)?;
    let eig = SymmetricEigen::new(g);
    let mut sq: Vec<f64> = eig.eigenvalues.iter().map(|&l| l.max(0.0)).collect();
    sq.sort_by(|a, b| b.total_cmp(a));
    let singular_values: Vec<f64> = sq.iter().map(|l| l.sqrt()).collect();
    let spectral_mass: f64 = sq.iter().sum();
    let sigma1 = singular_values.first().copied().unwrap_or(0.0);
    let threshold_rank = if sigma1 > 0.0 {
        singular_values.iter().filter(|&&s| s >= eps_rank * sigma1).count()
    } else {
        0
    };
    let entropy_rank = if spectral_mass > 0.0 {
        let h: f64 = sq
            .iter()
            .map(|&l| l / spectral_mass)
            .filter(|&p| p > 0.0)
            .map(|p| -p * p.ln())
            .sum();
        h.exp()
    } else {
        0.0
    };
    Ok(SpectrumReport {
        singular_values,
        threshold_rank,
        entropy_rank,
        spectral_mass,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct IsometryReport {
    pub c1_hat: f64,
    pub c2_hat: f64,
    pub subspace_dim: usize,
    pub num_probes: usize,
    pub seed: u64,
}

impl IsometryReport {
    pub fn condition(&self) -> f64 {
        self.c2_hat / self.c1_hat
    }
}

/// Modified Gram–Schmidt, applied twice per column.
pub fn orthonormalize(basis: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (n, d) = basis.shape();
    if d == 0 || d > n {
        return Err(SpxError::DegenerateSubspace(format!(
            "subspace dimension {d} for ambient dimension {n}"
        )));
    }
    let mut q = basis.clone();
    for j in 0..d {
        let original = q.column(j).norm();
        let mut v = q.column(j).into_owned();
        for _pass in 0..2 {
            for k in 0..j {
                let qk = q.column(k);
                let c = qk.dot(&v);
                v.axpy(-c, &qk, 1.0);
            }
        }
        let norm = v.norm();
        if !(norm > 1e-10 * original) || original == 0.0 {
            return Err(SpxError::DegenerateSubspace(format!(
                "basis column {j} is (numerically) dependent on the previous ones"
            )));
        }
        q.set_column(j, &(v / norm));
    }
    Ok(q)
}

/// Rows rescaled to RMS entry 1 (norm `sqrt(N)`), then the whole matrix by
/// `1/sqrt(M)`, so `E ||Phi z||^2 = ||z||^2` for random sign rows. Zero rows stay zero.
pub fn normalized_operator(op: &SensingOperator) -> DMatrix<f64> {
    let mut phi = op.to_dense();
    let target = (op.n_pixels() as f64).sqrt() / (op.m() as f64).sqrt();
    for mut row in phi.row_iter_mut() {
        let norm = row.norm();
        if norm > 0.0 {
            row *= target / norm;
        }
    }
    phi
}

/// Random `n x d` basis with i.i.d. standard normal entries.
pub fn random_subspace(n: usize, d: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = SpxRng::new(seed);
    DMatrix::from_fn(n, d, |_, _| rng.normal())
}

/// Extremes of `||Phi_hat z||^2` over `num_probes` random unit vectors `z` in
/// the span of `basis`. Probe `k` draws its Gaussian coefficients from
/// `derive_seed(derive_seed(seed, PROBE), k)`.
pub fn isometry_constants(
    op: &SensingOperator,
    basis: &DMatrix<f64>,
    num_probes: usize,
    seed: u64,
) -> Result<IsometryReport> {
    if basis.nrows() != op.n_pixels() {
        return Err(invalid(format!(
            "basis has {} rows for {} pixels",
            basis.nrows(),
            op.n_pixels()
        )));
    }
    if num_probes == 0 {
        return Err(invalid("num_probes must be >= 1"));
    }
    let q = orthonormalize(basis)?;
    let d = q.ncols();
    let b = normalized_operator(op) * &q;
    let probe_root = derive_seed(seed, streams::PROBE);
    let mut c1 = f64::INFINITY;
    let mut c2 = 0.0f64;
    for k in 0..num_probes {
        let mut rng = SpxRng::new(derive_seed(probe_root, k as u64));
        let g = DVector::from_fn(d, |_, _| rng.normal());
        let gn = g.norm_squared();
        if gn == 0.0 {
            continue;
        }
        let ratio = (&b * &g).norm_squared() / gn;
        c1 = c1.min(ratio);
        c2 = c2.max(ratio);
    }
    Ok(IsometryReport {
        c1_hat: c1,
        c2_hat: c2,
        subspace_dim: d,
        num_probes,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::patterns::{gen_hadamard, gen_speckle, select, SelectionPolicy};

    fn dense(m: DMatrix<f64>) -> SensingOperator {
        let n = m.ncols();
        SensingOperator::from_dense(m, 1, n).unwrap()
    }

    #[test]
    fn diag_gram() {
        let op = dense(DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 2.0]));
        let g = gram(&op, GramSide::Rows).unwrap();
        assert_eq!(g, DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 4.0]));
    }

    #[test]
    fn hadamard_gram() {
        let op = select(&gen_hadamard(16, 4, 4).unwrap(), 16, SelectionPolicy::Prefix).unwrap();
        assert_eq!(gram(&op, GramSide::Rows).unwrap(), DMatrix::identity(16, 16) * 16.0);
    }

    #[test]
    fn gram_matches_triple_loop() {
        let mut rng = SpxRng::new(4);
        let phi = DMatrix::from_fn(3, 5, |_, _| rng.normal());
        let op = dense(phi.clone());
        let rows = gram(&op, GramSide::Rows).unwrap();
        let cols = gram(&op, GramSide::Cols).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let s: f64 = (0..5).map(|k| phi[(i, k)] * phi[(j, k)]).sum();
                assert!((rows[(i, j)] - s).abs() < 1e-12);
            }
        }
        for i in 0..5 {
            for j in 0..5 {
                let s: f64 = (0..3).map(|k| phi[(k, i)] * phi[(k, j)]).sum();
                assert!((cols[(i, j)] - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gram_guard() {
        let op = dense(DMatrix::zeros(1, 5000));
        assert!(matches!(gram(&op, GramSide::Cols), Err(SpxError::ResourceLimit(_))));
        assert!(gram(&op, GramSide::Rows).is_ok());
        let op = dense(DMatrix::zeros(1, 20));
        assert!(gram_with_limit(&op, GramSide::Cols, Some(10)).is_err());
        assert!(gram_with_limit(&op, GramSide::Cols, None).is_ok());
    }

    #[test]
    fn diag_spectrum() {
        let op = dense(DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 2.0]));
        let s = spectrum(&op, 1e-10).unwrap();
        assert!((s.singular_values[0] - 2.0).abs() < 1e-14);
        assert!((s.singular_values[1] - 1.0).abs() < 1e-14);
        assert!((s.spectral_mass - 5.0).abs() < 1e-13);
        assert_eq!(s.threshold_rank, 2);
    }

    #[test]
    fn uniform_spectrum_entropy_rank() {
        let op = select(&gen_hadamard(64, 8, 8).unwrap(), 16, SelectionPolicy::Prefix).unwrap();
        let s = spectrum(&op, 1e-10).unwrap();
        assert!((s.entropy_rank - 16.0).abs() < 1e-9);
        assert_eq!(s.threshold_rank, 16);
        assert_eq!(s.singular_values.len(), 16);
    }

    #[test]
    fn spectrum_of_tall_operator_uses_column_gram() {
        let mut rng = SpxRng::new(9);
        let op = dense(DMatrix::from_fn(7, 3, |_, _| rng.normal()));
        let s = spectrum(&op, 1e-10).unwrap();
        assert_eq!(s.singular_values.len(), 3);
        let svd = op.to_dense().svd(false, false);
        let mut reference: Vec<f64> = svd.singular_values.iter().copied().collect();
        reference.sort_by(|a, b| b.total_cmp(a));
        for (a, b) in s.singular_values.iter().zip(&reference) {
            assert!((a - b).abs() < 1e-10 * reference[0]);
        }
    }

    #[test]
    fn spectral_mass_increases_with_nesting() {
        let lib = gen_speckle(64, 8, 8, 3).unwrap();
        let masses: Vec<f64> = [16, 32, 64]
            .iter()
            .map(|&m| spectrum(&select(&lib, m, SelectionPolicy::Prefix).unwrap(), 1e-10).unwrap().spectral_mass)
            .collect();
        assert!(masses[0] < masses[1] && masses[1] < masses[2], "{masses:?}");
    }

    #[test]
    fn eps_rank_validation() {
        let op = dense(DMatrix::identity(2, 2));
        assert!(spectrum(&op, 0.0).is_err());
        assert!(spectrum(&op, 1.0).is_err());
    }

    #[test]
    fn scaled_identity_is_exact_isometry() {
        let op = dense(DMatrix::identity(12, 12) * 3.0);
        let basis = random_subspace(12, 4, 1);
        let r = isometry_constants(&op, &basis, 200, 7).unwrap();
        assert!((r.c1_hat - 1.0).abs() < 1e-12 && (r.c2_hat - 1.0).abs() < 1e-12);
    }

    #[test]
    fn one_dimensional_subspace() {
        let lib = gen_speckle(10, 4, 4, 2).unwrap();
        let op = select(&lib, 10, SelectionPolicy::Prefix).unwrap();
        let b = random_subspace(16, 1, 5);
        let r = isometry_constants(&op, &b, 50, 1).unwrap();
        let unit = b.column(0) / b.column(0).norm();
        let expected = (normalized_operator(&op) * unit).norm_squared();
        assert!((r.c1_hat - expected).abs() < 1e-12 * expected);
        assert!((r.c2_hat - expected).abs() < 1e-12 * expected);
    }

    #[test]
    fn isometry_is_reproducible_and_ordered() {
        let lib = gen_speckle(32, 8, 8, 2).unwrap();
        let op = select(&lib, 32, SelectionPolicy::Prefix).unwrap();
        let b = random_subspace(64, 3, 5);
        let a = isometry_constants(&op, &b, 100, 9).unwrap();
        assert_eq!(a, isometry_constants(&op, &b, 100, 9).unwrap());
        assert!(a.c1_hat <= a.c2_hat);
    }

    #[test]
    fn degenerate_basis() {
        let op = dense(DMatrix::identity(4, 4));
        let mut b = random_subspace(4, 2, 3);
        let c0 = b.column(0).into_owned();
        b.set_column(1, &(c0 * 2.0));
        assert!(matches!(isometry_constants(&op, &b, 10, 0), Err(SpxError::DegenerateSubspace(_))));
        assert!(isometry_constants(&op, &random_subspace(4, 5, 1), 10, 0).is_err());
    }

    #[test]
    fn orthonormalize_produces_orthonormal_columns() {
        let q = orthonormalize(&random_subspace(30, 6, 4)).unwrap();
        let g = q.transpose() * &q;
        assert!((g - DMatrix::<f64>::identity(6, 6)).amax() < 1e-13);
    }
}
