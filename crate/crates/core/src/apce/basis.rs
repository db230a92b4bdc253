use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::indices::MultiIndexSet;
use crate::error::{Error, Result};

/// Diagonal shifts tried, as fractions of `trace(G)/L`, when the plain
/// Cholesky factorization fails.
pub const JITTER_LADDER: [f64; 3] = [1e-12, 1e-10, 1e-8];
const WHITEN_TOL: f64 = 1e-8;

fn check_dim(indices: &MultiIndexSet, xi: &DMatrix<f64>) -> Result<()> {
    if xi.ncols() != indices.dimension {
        return Err(Error::Dimension {
            what: "APCE samples",
            expected: indices.dimension,
            got: xi.ncols(),
        });
    }
    Ok(())
}

/// Row `l`, column `i` holds `Π_k ξ_k^(l) ^ j_k^(i)`.
pub fn monomial_matrix(indices: &MultiIndexSet, xi: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_dim(indices, xi)?;
    let (ns, l) = (xi.nrows(), indices.len());
    let rows: Vec<Vec<f64>> = (0..ns)
        .into_par_iter()
        .map(|r| {
            indices
                .indices
                .iter()
                .map(|j| {
                    let mut v = 1.0;
                    for (k, &e) in j.iter().enumerate() {
                        for _ in 0..e {
                            v *= xi[(r, k)];
                        }
                    }
                    v
                })
                .collect()
        })
        .collect();
    Ok(DMatrix::from_fn(ns, l, |r, c| rows[r][c]))
}

/// Empirical Gram matrix `(1/N_s)·MᵀM` of the monomials.
pub fn gram_estimate(indices: &MultiIndexSet, xi: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let m = monomial_matrix(indices, xi)?;
    if m.nrows() == 0 {
        return Err(Error::NoScenarios);
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("monomial powers of the samples".into()));
    }
    if m.nrows() < m.ncols() {
        log::warn!(
            "{} samples for {} basis functions; the Gram estimate is rank deficient",
            m.nrows(),
            m.ncols()
        );
    }
    let g = m.tr_mul(&m) / m.nrows() as f64;
    Ok((&g + g.transpose()) * 0.5)
}

/// Inverse lower Cholesky factor `W` of `gram`, with the diagonal jitter
/// that had to be added, as a fraction of `trace(G)/L` (zero when none).
pub fn whiten(gram: &DMatrix<f64>) -> Result<(DMatrix<f64>, f64)> {
    let l = gram.nrows();
    if l == 0 || !gram.is_square() {
        return Err(Error::InvalidArgument("Gram matrix must be square and non-empty".into()));
    }
    let mean_diag = gram.trace() / l as f64;
    for lambda in std::iter::once(0.0).chain(JITTER_LADDER) {
        let shifted = gram + DMatrix::identity(l, l) * (lambda * mean_diag);
        let Some(chol) = shifted.clone().cholesky() else {
            continue;
        };
        let u = chol.l();
        let Some(w) = u.solve_lower_triangular(&DMatrix::identity(l, l)) else {
            continue;
        };
        let dev = (&w * &shifted * w.transpose() - DMatrix::identity(l, l)).amax();
        if dev.is_finite() && dev <= WHITEN_TOL {
            if lambda > 0.0 {
                log::warn!("Gram matrix needed diagonal jitter {lambda:e}·trace/L");
            }
            return Ok((w, lambda));
        }
    }
    Err(Error::GramSingular)
}

/// The Cholesky factor of `MᵀM/N` is the transposed `R` of a QR
/// factorization of `M/√N` (with a positive diagonal). Going through QR
/// keeps `Ψ` orthonormal to working precision on ill-conditioned Gram
/// matrices. `None` when the design is too close to rank deficient.
fn qr_whitening(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let (n, l) = m.shape();
    if n < l {
        return None;
    }
    let r = (m / (n as f64).sqrt()).qr().r();
    let diag: Vec<f64> = r.diagonal().iter().map(|d| d.abs()).collect();
    let dmax = diag.iter().copied().fold(0.0, f64::max);
    if !(dmax.is_finite() && diag.iter().all(|&d| d > 1e-7 * dmax)) {
        return None;
    }
    let mut u = r.transpose();
    for (c, mut col) in u.column_iter_mut().enumerate() {
        if col[c] < 0.0 {
            col.neg_mut();
        }
    }
    let mut w = u.solve_lower_triangular(&DMatrix::identity(l, l))?;
    // The constant monomial has an exact unit second moment.
    w[(0, 0)] = 1.0;
    Some(w)
}

/// Affine map of each input to zero mean and unit variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardization {
    pub fn fit(xi: &DMatrix<f64>) -> Self {
        let n = xi.nrows().max(1) as f64;
        let mut mean = Vec::with_capacity(xi.ncols());
        let mut scale = Vec::with_capacity(xi.ncols());
        for c in xi.column_iter() {
            let m = c.sum() / n;
            let sd = (c.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n).sqrt();
            mean.push(m);
            scale.push(if sd > 0.0 { sd } else { 1.0 });
        }
        Standardization { mean, scale }
    }

    pub fn apply(&self, xi: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(xi.nrows(), xi.ncols(), |r, c| (xi[(r, c)] - self.mean[c]) / self.scale[c])
    }
}

/// Polynomials orthonormal under the empirical measure of the fitting
/// samples: `Ψ(ξ) = W·P(standardized ξ)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApceBasis {
    pub indices: MultiIndexSet,
    pub standardization: Standardization,
    /// Lower-triangular, `L × L`.
    pub whitening: DMatrix<f64>,
    /// Diagonal shift used in the factorization, relative to `trace(G)/L`.
    pub jitter: f64,
    /// Ratio of extreme eigenvalues of the Gram estimate.
    pub gram_condition: f64,
}

impl ApceBasis {
    pub fn fit(indices: MultiIndexSet, xi: &DMatrix<f64>) -> Result<Self> {
        check_dim(&indices, xi)?;
        let standardization = Standardization::fit(xi);
        let std_xi = standardization.apply(xi);
        let gram = gram_estimate(&indices, &std_xi)?;
        let eig = gram.clone().symmetric_eigenvalues();
        let gram_condition = eig.max() / eig.min().max(0.0);
        let (whitening, jitter) = match qr_whitening(&monomial_matrix(&indices, &std_xi)?) {
            Some(w) => (w, 0.0),
            None => whiten(&gram)?,
        };
        Ok(ApceBasis {
            indices,
            standardization,
            whitening,
            jitter,
            gram_condition,
        })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn dimension(&self) -> usize {
        self.indices.dimension
    }

    /// `N_s × L` design matrix of basis values.
    pub fn psi(&self, xi: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_dim(&self.indices, xi)?;
        let m = monomial_matrix(&self.indices, &self.standardization.apply(xi))?;
        Ok(m * self.whitening.transpose())
    }
}

/// `‖(1/N_s)ΨᵀΨ − I‖_max` on `xi`.
pub fn orthonormality_check(basis: &ApceBasis, xi: &DMatrix<f64>) -> Result<f64> {
    let psi = basis.psi(xi)?;
    if psi.nrows() == 0 {
        return Err(Error::NoScenarios);
    }
    let g = psi.tr_mul(&psi) / psi.nrows() as f64;
    Ok((g - DMatrix::identity(basis.len(), basis.len())).amax())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::apce::indices::{reduced_indices, total_degree_indices};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Beta, Distribution};

    fn column(vals: &[f64]) -> DMatrix<f64> {
        DMatrix::from_column_slice(vals.len(), 1, vals)
    }

    #[test]
    fn monomial_entries() {
        let set = total_degree_indices(2, 3).unwrap();
        let xi = DMatrix::from_row_slice(1, 2, &[2.0, 3.0]);
        let m = monomial_matrix(&set, &xi).unwrap();
        let k = set.indices.iter().position(|j| j == &vec![1, 2]).unwrap();
        assert_eq!(m[(0, k)], 18.0);
        assert_eq!(m[(0, 0)], 1.0);
    }

    #[test]
    fn monomials_match_loop_oracle() {
        let set = total_degree_indices(3, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xi = DMatrix::from_fn(40, 3, |_, _| rng.random_range(-2.0..2.0));
        let m = monomial_matrix(&set, &xi).unwrap();
        for r in 0..40 {
            for (c, j) in set.indices.iter().enumerate() {
                let mut v = 1.0;
                for k in 0..3 {
                    for _ in 0..j[k] {
                        v *= xi[(r, k)];
                    }
                }
                assert_eq!(m[(r, c)], v);
            }
        }
    }

    #[test]
    fn three_point_gram() {
        let set = total_degree_indices(1, 2).unwrap();
        let g = gram_estimate(&set, &column(&[-1.0, 0.0, 1.0])).unwrap();
        let t = 2.0 / 3.0;
        let expect = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, t, 0.0, t, 0.0, t, 0.0, t]);
        assert!((g - expect).amax() < 1e-15);
    }

    #[test]
    fn gram_is_normalized_product_and_psd() {
        let set = reduced_indices(4, 2, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let xi = DMatrix::from_fn(300, 4, |_, _| rng.random_range(0.0..1.0));
        let g = gram_estimate(&set, &xi).unwrap();
        let m = monomial_matrix(&set, &xi).unwrap();
        assert!((&g - m.transpose() * &m / 300.0).amax() < 1e-12);
        assert_eq!(g[(0, 0)], 1.0);
        assert!(g.symmetric_eigenvalues().min() > 0.0);
    }

    #[test]
    fn identity_gram_whitens_to_identity() {
        let (w, jitter) = whiten(&DMatrix::identity(4, 4)).unwrap();
        assert_eq!(w, DMatrix::identity(4, 4));
        assert_eq!(jitter, 0.0);
    }

    #[test]
    fn hand_cholesky_of_three_point_gram() {
        let set = total_degree_indices(1, 2).unwrap();
        let xi = column(&[-1.0, 0.0, 1.0]);
        let (w, _) = whiten(&gram_estimate(&set, &xi).unwrap()).unwrap();
        let t: f64 = 2.0 / 3.0;
        for &x in &[-1.0, 0.0, 1.0, 0.4] {
            let p = [1.0, x, x * x];
            let psi2 = w[(1, 0)] * p[0] + w[(1, 1)] * p[1];
            let psi3 = w[(2, 0)] * p[0] + w[(2, 1)] * p[1] + w[(2, 2)] * p[2];
            assert!((psi2 - x / t.sqrt()).abs() < 1e-12);
            assert!((psi3 - (x * x - t) / (2.0f64 / 9.0).sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn singular_gram_needs_jitter() {
        // Two distinct points cannot support a quadratic term.
        let set = total_degree_indices(1, 2).unwrap();
        let g = gram_estimate(&set, &column(&[1.0, 2.0, 1.0, 2.0])).unwrap();
        let (w, lambda) = whiten(&g).unwrap();
        assert!(JITTER_LADDER.contains(&lambda));
        let shifted = &g + DMatrix::identity(3, 3) * (lambda * g.trace() / 3.0);
        assert!((&w * shifted * w.transpose() - DMatrix::identity(3, 3)).amax() < 1e-8);
    }

    #[test]
    fn indefinite_gram_is_reported() {
        let g = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(whiten(&g), Err(Error::GramSingular)));
    }

    #[test]
    fn fitted_basis_is_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let beta = Beta::new(2.0, 5.0).unwrap();
        // Bounded plant outputs with a shared component.
        let mut draw = |n: usize| {
            let mut out = DMatrix::zeros(n, 3);
            for r in 0..n {
                let common: f64 = beta.sample(&mut rng);
                for c in 0..3 {
                    out[(r, c)] = 50.0 * (0.6 * common + 0.4 * beta.sample(&mut rng));
                }
            }
            out
        };
        let xi = draw(10_000);
        let basis = ApceBasis::fit(total_degree_indices(3, 2).unwrap(), &xi).unwrap();
        assert!(orthonormality_check(&basis, &xi).unwrap() < 1e-8);
        let w = &basis.whitening;
        assert!((0..w.nrows()).all(|r| (r + 1..w.ncols()).all(|c| w[(r, c)] == 0.0)));

        // On fresh samples each entry of (1/N)ΨᵀΨ − I is a sample-mean
        // fluctuation; compare it with its own standard error, inflated for
        // the noise already present in the fitting set.
        let fresh = draw(10_000);
        let psi = basis.psi(&fresh).unwrap();
        let n = psi.nrows() as f64;
        let l = basis.len();
        let mut worst: f64 = 0.0;
        for i in 0..l {
            for j in 0..=i {
                let prod: Vec<f64> = (0..psi.nrows()).map(|r| psi[(r, i)] * psi[(r, j)]).collect();
                let mean = prod.iter().sum::<f64>() / n;
                let var = prod.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
                let se = (2.0 * var / n).sqrt();
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((mean - target).abs() / se);
            }
        }
        assert!(worst < 5.0, "largest standardized deviation {worst}");
        assert!(orthonormality_check(&basis, &fresh).unwrap() < 0.2);
    }

    #[test]
    fn single_function_basis_has_no_deviation() {
        let set = total_degree_indices(2, 0).unwrap();
        let xi = DMatrix::from_fn(5, 2, |r, c| (r + c) as f64);
        let basis = ApceBasis::fit(set, &xi).unwrap();
        assert_eq!(orthonormality_check(&basis, &xi).unwrap(), 0.0);
    }
}
