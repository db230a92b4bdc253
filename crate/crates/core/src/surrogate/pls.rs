//! Single-response partial least squares (SIMPLS).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Linear map `ν = (z − center)·P` onto `P.ncols()` latent components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlsMap {
    pub projection: DMatrix<f64>,
    pub center: Vec<f64>,
    /// Share of response variance captured by each component.
    pub explained: Vec<f64>,
    /// Regression of the centered response on the latent scores.
    pub y_loadings: Vec<f64>,
    pub y_mean: f64,
}

impl PlsMap {
    pub fn n_components(&self) -> usize {
        self.projection.ncols()
    }

    pub fn input_dim(&self) -> usize {
        self.projection.nrows()
    }

    pub fn cumulative_explained(&self) -> Vec<f64> {
        self.explained
            .iter()
            .scan(0.0, |acc, e| {
                *acc += e;
                Some(*acc)
            })
            .collect()
    }

    pub fn project(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.input_dim() {
            return Err(Error::Dimension {
                what: "PLS input",
                expected: self.input_dim(),
                got: z.len(),
            });
        }
        let centered = DVector::from_iterator(z.len(), z.iter().zip(&self.center).map(|(a, b)| a - b));
        Ok((self.projection.transpose() * centered).iter().copied().collect())
    }

    pub fn project_rows(&self, z: &DMatrix<f64>) -> DMatrix<f64> {
        let mut c = z.clone();
        for mut row in c.row_iter_mut() {
            for (k, v) in row.iter_mut().enumerate() {
                *v -= self.center[k];
            }
        }
        c * &self.projection
    }

    /// Keeps the first `m` components.
    pub fn truncated(&self, m: usize) -> PlsMap {
        let m = m.min(self.n_components());
        PlsMap {
            projection: self.projection.columns(0, m).into_owned(),
            center: self.center.clone(),
            explained: self.explained[..m].to_vec(),
            y_loadings: self.y_loadings[..m].to_vec(),
            y_mean: self.y_mean,
        }
    }

    /// Latent linear prediction `y_mean + ν·q`.
    pub fn linear_predict(&self, z: &[f64]) -> Result<f64> {
        let nu = self.project(z)?;
        Ok(self.y_mean + nu.iter().zip(&self.y_loadings).map(|(a, b)| a * b).sum::<f64>())
    }
}

/// Fits `n_components` SIMPLS components on column-standardized `z`. The
/// standardization is folded into the returned projection.
pub fn fit_pls(z: &DMatrix<f64>, sigma: &DVector<f64>, n_components: usize) -> Result<PlsMap> {
    let (n, p) = z.shape();
    if sigma.len() != n {
        return Err(Error::Dimension {
            what: "PLS responses",
            expected: n,
            got: sigma.len(),
        });
    }
    let max_rank = n.saturating_sub(1).min(p);
    if n_components == 0 || n_components > max_rank {
        return Err(Error::RankExceeded {
            requested: n_components,
            rank: max_rank,
        });
    }

    let center: Vec<f64> = z.column_iter().map(|c| c.sum() / n as f64).collect();
    let scale: Vec<f64> = z
        .column_iter()
        .zip(&center)
        .map(|(c, m)| {
            let s = (c.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64).sqrt();
            if s > 0.0 {
                s
            } else {
                1.0
            }
        })
        .collect();
    let x = DMatrix::from_fn(n, p, |r, c| (z[(r, c)] - center[c]) / scale[c]);
    let y_mean = sigma.mean();
    let yc = sigma.map(|v| v - y_mean);
    let y_ss = yc.norm_squared();

    let mut s = x.transpose() * &yc;
    let s0 = s.norm();
    let x_norm = x.norm();
    let mut r_mat = DMatrix::zeros(p, n_components);
    let mut v_mat: DMatrix<f64> = DMatrix::zeros(p, n_components);
    let mut explained = Vec::with_capacity(n_components);
    let mut loadings = Vec::with_capacity(n_components);

    for a in 0..n_components {
        if !(s.norm() > 1e-12 * s0.max(f64::MIN_POSITIVE)) {
            return Err(Error::RankExceeded {
                requested: n_components,
                rank: a,
            });
        }
        let mut r = s.clone();
        let mut t = &x * &r;
        let t_norm = t.norm();
        if !(t_norm > 1e-12 * x_norm * r.norm()) {
            return Err(Error::RankExceeded {
                requested: n_components,
                rank: a,
            });
        }
        t /= t_norm;
        r /= t_norm;
        let load = x.transpose() * &t;
        let q = yc.dot(&t);
        let mut v = load;
        for _ in 0..2 {
            for b in 0..a {
                let vb = v_mat.column(b);
                let proj = vb.dot(&v);
                v -= proj * vb;
            }
        }
        v /= v.norm();
        v_mat.set_column(a, &v);
        for _ in 0..2 {
            for b in 0..=a {
                let vb = v_mat.column(b);
                let proj = vb.dot(&s);
                s -= proj * vb;
            }
        }
        r_mat.set_column(a, &r);
        explained.push(if y_ss > 0.0 { q * q / y_ss } else { 0.0 });
        loadings.push(q);
    }

    let projection = DMatrix::from_fn(p, n_components, |i, a| r_mat[(i, a)] / scale[i]);
    Ok(PlsMap {
        projection,
        center,
        explained,
        y_loadings: loadings,
        y_mean,
    })
}

/// Smallest component count whose cumulative explained variance reaches
/// `threshold`; the full count (with a warning) when it never does.
pub fn choose_components(pls: &PlsMap, threshold: f64) -> usize {
    let cum = pls.cumulative_explained();
    match cum.iter().position(|&c| c >= threshold - 1e-12) {
        Some(k) => k + 1,
        None => {
            log::warn!(
                "explained variance {:.6} never reaches {threshold}; keeping all {} components",
                cum.last().copied().unwrap_or(0.0),
                cum.len()
            );
            cum.len()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(n: usize, p: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(n, p, |_, _| rng.random_range(-1.0..1.0))
    }

    /// Random design whose centered columns are mutually orthogonal.
    fn orthogonal_design(n: usize, p: usize, seed: u64) -> DMatrix<f64> {
        let mut z = random(n, p, seed);
        for c in 0..p {
            let mean = z.column(c).mean();
            z.column_mut(c).add_scalar_mut(-mean);
            for b in 0..c {
                let prev = z.column(b).into_owned();
                let proj = prev.dot(&z.column(c)) / prev.norm_squared();
                z.column_mut(c).axpy(-proj, &prev, 1.0);
            }
        }
        z
    }

    #[test]
    fn single_relevant_predictor() {
        let z = orthogonal_design(200, 5, 1);
        let sigma = DVector::from_fn(200, |r, _| 5.0 * z[(r, 0)]);
        let pls = fit_pls(&z, &sigma, 1).unwrap();
        assert!(pls.explained[0] > 0.999);
        let col = pls.projection.column(0);
        let dir = col / col.norm();
        assert!(dir[0].abs() > 0.999, "{dir}");
        assert_eq!(choose_components(&pls, 0.999), 1);
    }

    #[test]
    fn full_rank_reproduces_ordinary_least_squares() {
        let (n, p) = (60, 6);
        let z = random(n, p, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sigma = DVector::from_fn(n, |_, _| rng.random_range(0.0..1.0));
        let pls = fit_pls(&z, &sigma, p).unwrap();

        // OLS with intercept through an SVD solve.
        let design = DMatrix::from_fn(n, p + 1, |r, c| if c == 0 { 1.0 } else { z[(r, c - 1)] });
        let beta = design.clone().svd(true, true).solve(&sigma, 1e-14).unwrap();
        let ols = &design * beta;
        for r in 0..n {
            let row: Vec<f64> = z.row(r).iter().copied().collect();
            assert!((pls.linear_predict(&row).unwrap() - ols[r]).abs() < 1e-8);
        }
        assert_eq!(choose_components(&pls, 1.0), p);
    }

    #[test]
    fn scores_are_orthogonal_and_variance_accumulates() {
        let z = random(300, 8, 4);
        let sigma = DVector::from_fn(300, |r, _| z[(r, 0)] * z[(r, 1)] + z[(r, 2)].sin() + 0.2 * z[(r, 5)]);
        let pls = fit_pls(&z, &sigma, 8).unwrap();
        let t = pls.project_rows(&z);
        let gram = t.transpose() * &t;
        let scale = gram.diagonal().max();
        for i in 0..8 {
            for j in 0..8 {
                if i != j {
                    assert!(gram[(i, j)].abs() < 1e-8 * scale);
                }
            }
        }
        let cum = pls.cumulative_explained();
        assert!(cum.windows(2).all(|w| w[1] >= w[0]));
        assert!(pls.explained.iter().all(|&e| (0.0..=1.0).contains(&e)));
        assert!(*cum.last().unwrap() <= 1.0 + 1e-12);
    }

    #[test]
    fn threshold_edges() {
        let z = random(100, 4, 5);
        let sigma = DVector::from_fn(100, |r, _| z[(r, 0)] + 0.5 * z[(r, 3)] + (z[(r, 1)] * 3.0).cos());
        let pls = fit_pls(&z, &sigma, 4).unwrap();
        assert_eq!(choose_components(&pls, 1e-9), 1);
        assert_eq!(choose_components(&pls, 2.0), 4);
    }

    #[test]
    fn too_many_components_is_rejected() {
        let z = random(10, 3, 6);
        let sigma = DVector::from_fn(10, |r, _| z[(r, 0)]);
        assert!(matches!(fit_pls(&z, &sigma, 4), Err(Error::RankExceeded { rank: 3, .. })));
        // Two identical columns leave rank 2 for a generic response.
        let mut z2 = random(40, 3, 7);
        let c0 = z2.column(0).into_owned();
        z2.set_column(2, &c0);
        let s2 = DVector::from_fn(40, |r, _| (z2[(r, 0)] * 2.0).sin() + z2[(r, 1)].powi(3));
        assert!(matches!(fit_pls(&z2, &s2, 3), Err(Error::RankExceeded { rank: 2, .. })));
    }
}
