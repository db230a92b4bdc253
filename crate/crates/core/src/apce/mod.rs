//! Data-driven polynomial chaos: bases orthonormal under the empirical
//! measure of correlated samples, least-squares expansions, and quantiles.

mod basis;
mod indices;

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use basis::{gram_estimate, monomial_matrix, orthonormality_check, whiten, ApceBasis, Standardization, JITTER_LADDER};
pub use indices::{
    grevlex, reduced_count, reduced_indices, reduced_indices_capped, total_degree_count, total_degree_indices,
    total_degree_indices_capped, MultiIndexSet, Truncation, DEFAULT_BASIS_CAP,
};

pub const SCHEMA_VERSION: u32 = 1;

/// Expansions `x̂_i(ξ) = Σ_j a_ij Ψ_j(ξ)` sharing one basis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApceModel {
    pub schema_version: u32,
    pub basis: ApceBasis,
    /// `outputs × L`.
    pub coefficients: DMatrix<f64>,
    pub labels: Vec<String>,
    /// Numerical rank of the design at fit time.
    pub effective_rank: usize,
}

impl ApceModel {
    pub fn n_outputs(&self) -> usize {
        self.coefficients.nrows()
    }

    /// Mean of each output under the fitting measure.
    pub fn mean(&self) -> Vec<f64> {
        self.coefficients.column(0).iter().copied().collect()
    }

    /// Variance of each output under the fitting measure.
    pub fn variance(&self) -> Vec<f64> {
        self.coefficients
            .row_iter()
            .map(|r| r.iter().skip(1).map(|a| a * a).sum())
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let model: ApceModel = serde_json::from_str(text)?;
        if model.schema_version != SCHEMA_VERSION {
            return Err(Error::Model(format!(
                "schema version {} (expected {SCHEMA_VERSION})",
                model.schema_version
            )));
        }
        let l = model.basis.len();
        if model.coefficients.ncols() != l || model.basis.whitening.shape() != (l, l) {
            return Err(Error::Model("coefficient or whitening shape does not match the basis".into()));
        }
        if model.labels.len() != model.coefficients.nrows() {
            return Err(Error::Model("one label per output required".into()));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Least-squares coefficients for each column of `responses`
/// (`N_s × outputs`). A rank-deficient design is solved in the
/// minimum-norm sense and reported through `effective_rank`.
pub fn fit_coefficients(
    basis: ApceBasis,
    xi: &DMatrix<f64>,
    responses: &DMatrix<f64>,
    labels: Vec<String>,
) -> Result<ApceModel> {
    if responses.nrows() != xi.nrows() {
        return Err(Error::Dimension {
            what: "APCE responses",
            expected: xi.nrows(),
            got: responses.nrows(),
        });
    }
    if labels.len() != responses.ncols() {
        return Err(Error::Dimension {
            what: "APCE output labels",
            expected: responses.ncols(),
            got: labels.len(),
        });
    }
    if responses.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("APCE responses".into()));
    }
    let psi = basis.psi(xi)?;
    let size = psi.nrows().max(psi.ncols()) as f64;
    let svd = psi.svd(true, true);
    let smax = svd.singular_values.max();
    // A jittered factorization leaves null directions of the Gram matrix
    // with singular values near sqrt(round-off / jitter) instead of zero.
    let rcond = (size * f64::EPSILON).max(10.0 * basis.jitter.sqrt());
    let eps = smax * rcond;
    let effective_rank = svd.singular_values.iter().filter(|&&s| s > eps).count();
    if effective_rank < basis.len() {
        log::warn!(
            "APCE design has effective rank {effective_rank} of {}; using the minimum-norm solution",
            basis.len()
        );
    }
    let a = svd
        .solve(responses, eps)
        .map_err(|e| Error::InvalidArgument(format!("least-squares solve: {e}")))?;
    Ok(ApceModel {
        schema_version: SCHEMA_VERSION,
        basis,
        coefficients: a.transpose(),
        labels,
        effective_rank,
    })
}

/// Builds the basis on `xi` and fits every response column in one go.
pub fn fit_apce(
    truncation: Truncation,
    xi: &DMatrix<f64>,
    responses: &DMatrix<f64>,
    labels: Vec<String>,
) -> Result<ApceModel> {
    let basis = ApceBasis::fit(truncation.indices(xi.ncols())?, xi)?;
    fit_coefficients(basis, xi, responses, labels)
}

/// `N_s × outputs` model values.
pub fn evaluate(model: &ApceModel, xi: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    Ok(model.basis.psi(xi)? * model.coefficients.transpose())
}

/// Per-output `⌈α·N_s⌉`-th smallest model value over `xi`.
pub fn quantile(model: &ApceModel, xi: &DMatrix<f64>, alpha: f64) -> Result<Vec<f64>> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidArgument(format!("quantile level {alpha} outside (0, 1)")));
    }
    if xi.nrows() == 0 {
        return Err(Error::NoScenarios);
    }
    let values = evaluate(model, xi)?;
    Ok(values.column_iter().map(|c| order_statistic(c.iter().copied().collect(), alpha)).collect())
}

/// Ceiling order statistic of `values` at level `alpha`.
pub fn order_statistic(mut values: Vec<f64>, alpha: f64) -> f64 {
    let n = values.len();
    let k = ((alpha * n as f64).ceil() as usize).clamp(1, n);
    let (_, kth, _) = values.select_nth_unstable_by(k - 1, f64::total_cmp);
    *kth
}
