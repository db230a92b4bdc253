//! Surrogate for the stability index: an MLP on the state `z`, optionally
//! behind a PLS projection, with value/gradient/Hessian retrieval in the
//! original coordinates.

mod mlp;
mod pls;

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

pub use mlp::{
    error_stats, train_mlp, Activation, Layer, MlpSurrogate, SurrogateErrorStats, TrainConfig,
    MIN_TRAINING_ROWS,
};
pub use pls::{choose_components, fit_pls, PlsMap};

use crate::error::{Error, Result};
use crate::scenarios::VsiDataset;

pub const SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_FD_STEP: f64 = 1e-4;

/// MLP on latent inputs `ν = (z − c)·P`; without a PLS block the MLP sees
/// `z` directly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReducedSurrogate {
    pub schema_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pls: Option<PlsMap>,
    pub mlp: MlpSurrogate,
    /// Finite-difference step on the standardized latent scale.
    pub fd_step: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stats: Option<SurrogateErrorStats>,
}

/// Value, gradient and Hessian of the surrogate with respect to `z`.
#[derive(Debug, Clone, PartialEq)]
pub struct Derivatives {
    pub value: f64,
    pub gradient: DVector<f64>,
    pub hessian: DMatrix<f64>,
}

impl ReducedSurrogate {
    pub fn new(pls: Option<PlsMap>, mlp: MlpSurrogate, fd_step: f64) -> Result<Self> {
        ReducedSurrogate {
            schema_version: SCHEMA_VERSION,
            pls,
            mlp,
            fd_step,
            stats: None,
        }
        .validated()
    }

    fn validated(self) -> Result<Self> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Model(format!(
                "schema version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if !(self.fd_step > 0.0) {
            return Err(Error::Model("fd_step must be positive".into()));
        }
        if let Some(p) = &self.pls {
            if p.n_components() != self.mlp.input_dim() || p.center.len() != p.input_dim() {
                return Err(Error::Dimension {
                    what: "PLS components vs network inputs",
                    expected: self.mlp.input_dim(),
                    got: p.n_components(),
                });
            }
        }
        let mlp = self.mlp.validated()?;
        Ok(ReducedSurrogate { mlp, ..self })
    }

    /// Dimension of `z`.
    pub fn input_dim(&self) -> usize {
        self.pls.as_ref().map_or(self.mlp.input_dim(), |p| p.input_dim())
    }

    pub fn latent(&self, z: &[f64]) -> Result<Vec<f64>> {
        match &self.pls {
            Some(p) => p.project(z),
            None if z.len() == self.mlp.input_dim() => Ok(z.to_vec()),
            None => Err(Error::Dimension {
                what: "surrogate input",
                expected: self.mlp.input_dim(),
                got: z.len(),
            }),
        }
    }

    pub fn predict(&self, z: &[f64]) -> Result<f64> {
        self.mlp.predict(&self.latent(z)?)
    }

    pub fn predict_rows(&self, z: &DMatrix<f64>) -> Result<Vec<f64>> {
        match &self.pls {
            Some(p) => {
                if z.ncols() != p.input_dim() {
                    return Err(Error::Dimension {
                        what: "surrogate input",
                        expected: p.input_dim(),
                        got: z.ncols(),
                    });
                }
                self.mlp.predict_rows(&p.project_rows(z))
            }
            None => self.mlp.predict_rows(z),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let model: ReducedSurrogate = serde_json::from_str(text)?;
        model.validated()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Central-difference value, gradient and Hessian of `f` at `x`, with a
/// separate step per coordinate. Mixed partials use the four-point stencil;
/// only the upper triangle is computed, so the result is exactly symmetric.
pub fn central_derivatives(
    f: impl Fn(&[f64]) -> Result<f64>,
    x: &[f64],
    steps: &[f64],
) -> Result<(f64, DVector<f64>, DMatrix<f64>)> {
    let d = x.len();
    let mut buf = x.to_vec();
    let mut eval = |shifts: &[(usize, f64)]| -> Result<f64> {
        for &(k, s) in shifts {
            buf[k] += s;
        }
        let v = f(&buf);
        buf.copy_from_slice(x);
        v
    };
    let f0 = eval(&[])?;
    let mut g = DVector::zeros(d);
    let mut h = DMatrix::zeros(d, d);
    for k in 0..d {
        let hk = steps[k];
        let fp = eval(&[(k, hk)])?;
        let fm = eval(&[(k, -hk)])?;
        g[k] = (fp - fm) / (2.0 * hk);
        h[(k, k)] = (fp - 2.0 * f0 + fm) / (hk * hk);
        for l in k + 1..d {
            let hl = steps[l];
            let fpp = eval(&[(k, hk), (l, hl)])?;
            let fpm = eval(&[(k, hk), (l, -hl)])?;
            let fmp = eval(&[(k, -hk), (l, hl)])?;
            let fmm = eval(&[(k, -hk), (l, -hl)])?;
            let v = (fpp - fpm - fmp + fmm) / (4.0 * hk * hl);
            h[(k, l)] = v;
            h[(l, k)] = v;
        }
    }
    if !(f0.is_finite() && g.iter().chain(h.iter()).all(|v| v.is_finite())) {
        return Err(Error::NonFinite("surrogate latent evaluation".into()));
    }
    Ok((f0, g, h))
}

/// Maps latent derivatives back to `z`: `P·g` and `P·H·Pᵀ` (identity when
/// `projection` is `None`). The Hessian is symmetrized entrywise.
pub fn retrieve(
    projection: Option<&DMatrix<f64>>,
    g: DVector<f64>,
    h: DMatrix<f64>,
) -> (DVector<f64>, DMatrix<f64>) {
    let Some(p) = projection else {
        return (g, h);
    };
    let grad = p * g;
    let mut hess = p * h * p.transpose();
    let n = hess.nrows();
    for i in 0..n {
        for j in i + 1..n {
            let v = 0.5 * (hess[(i, j)] + hess[(j, i)]);
            hess[(i, j)] = v;
            hess[(j, i)] = v;
        }
    }
    (grad, hess)
}

/// Differences are taken on the standardized inputs and output, so the
/// shifts never enter the stencils; the result is then rescaled.
pub fn eval_with_derivatives(red: &ReducedSurrogate, z: &[f64]) -> Result<Derivatives> {
    let mlp = &red.mlp;
    let x = mlp.standardize(&red.latent(z)?);
    let steps = vec![red.fd_step; x.len()];
    let (v, g, h) = central_derivatives(|u| Ok(mlp.forward_standardized(u)), &x, &steps)?;
    let (scale, s) = (mlp.output_scale, &mlp.input_scale);
    let g = DVector::from_fn(x.len(), |k, _| scale * g[k] / s[k]);
    let h = DMatrix::from_fn(x.len(), x.len(), |k, l| scale * h[(k, l)] / (s[k] * s[l]));
    let (gradient, hessian) = retrieve(red.pls.as_ref().map(|p| &p.projection), g, h);
    Ok(Derivatives {
        value: mlp.output_shift + scale * v,
        gradient,
        hessian,
    })
}

/// Largest absolute prediction error `ρ` over a test set.
pub fn max_abs_error(model: &ReducedSurrogate, z: &DMatrix<f64>, sigma: &DVector<f64>) -> Result<f64> {
    if z.nrows() == 0 {
        return Err(Error::InvalidArgument("empty test set".into()));
    }
    let pred = model.predict_rows(z)?;
    Ok(pred
        .iter()
        .zip(sigma.iter())
        .map(|(p, s)| (p - s).abs())
        .fold(0.0, f64::max))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlsConfig {
    /// Target cumulative explained response variance.
    pub threshold: f64,
    /// PLS is engaged only when the state dimension exceeds this.
    #[serde(default)]
    pub min_inputs: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SurrogateConfig {
    #[serde(default)]
    pub pls: Option<PlsConfig>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub fd_step: Option<f64>,
}

/// Full training pipeline: optional PLS reduction fitted on the training
/// rows, then the MLP on the latent inputs.
pub fn train_surrogate(data: &VsiDataset, config: &SurrogateConfig) -> Result<ReducedSurrogate> {
    let fd_step = config.fd_step.unwrap_or(DEFAULT_FD_STEP);
    let dim = data.z.ncols();
    let pls = match &config.pls {
        Some(pc) if dim > pc.min_inputs => {
            if !(pc.threshold > 0.0 && pc.threshold <= 1.0) {
                return Err(Error::InvalidArgument("PLS threshold must lie in (0, 1]".into()));
            }
            let (train_idx, _) = mlp::holdout_split(data.len(), config.train.test_fraction, config.train.seed);
            let z = data.z.select_rows(&train_idx);
            let s = data.sigma.select_rows(&train_idx);
            let max = z.nrows().saturating_sub(1).min(dim);
            let full = match fit_pls(&z, &s, max) {
                Err(Error::RankExceeded { rank, .. }) if rank > 0 => fit_pls(&z, &s, rank)?,
                other => other?,
            };
            let m = choose_components(&full, pc.threshold);
            log::info!("PLS keeps {m} of {dim} directions");
            Some(full.truncated(m))
        }
        _ => None,
    };
    let x = match &pls {
        Some(p) => p.project_rows(&data.z),
        None => data.z.clone(),
    };
    let (mlp, stats) = train_mlp(&x, &data.sigma, &config.train)?;
    let mut model = ReducedSurrogate::new(pls, mlp, fd_step)?;
    model.stats = Some(stats);
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quadratic_along_first_direction() {
        let f = |u: &[f64]| Ok(u[0] * u[0]);
        let (v, g, h) = central_derivatives(f, &[0.0, 0.0], &[1e-4, 1e-4]).unwrap();
        assert_eq!(v, 0.0);
        let p = DMatrix::from_column_slice(3, 1, &[1.0, 0.0, 0.0]);
        let (_, _, h1) = central_derivatives(f, &[0.0], &[1e-4]).unwrap();
        let (gz, hz) = retrieve(Some(&p), DVector::from_element(1, g[0]), h1);
        let mut expected = DMatrix::zeros(3, 3);
        expected[(0, 0)] = 2.0;
        assert_eq!(hz, expected);
        assert_eq!(gz, DVector::zeros(3));
        assert_eq!(h[(0, 0)], 2.0);
        assert_eq!(h[(1, 1)], 0.0);
    }

    #[test]
    fn identity_projection_keeps_latent_derivatives() {
        let f = |u: &[f64]| Ok(u[0].sin() * u[1] + u[1].powi(3));
        let x = [0.3, -0.7];
        let (_, g, h) = central_derivatives(f, &x, &[1e-4, 1e-4]).unwrap();
        let (g2, h2) = retrieve(None, g.clone(), h.clone());
        assert_eq!((g, h), (g2, h2));
    }

    fn trained(pls: bool) -> (ReducedSurrogate, VsiDataset) {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let z: DMatrix<f64> = DMatrix::from_fn(400, 6, |_, _| rng.random_range(-1.0..1.0));
        let sigma = DVector::from_fn(400, |r, _| (z[(r, 0)] + 0.5 * z[(r, 1)]).tanh() + 0.1 * z[(r, 2)].powi(2));
        let data = VsiDataset::new(z, sigma).unwrap();
        let cfg = SurrogateConfig {
            pls: pls.then_some(PlsConfig {
                threshold: 0.999,
                min_inputs: 0,
            }),
            train: TrainConfig {
                epochs: 40,
                seed: 2,
                ..TrainConfig::default()
            },
            fd_step: None,
        };
        (train_surrogate(&data, &cfg).unwrap(), data)
    }

    #[test]
    fn retrieved_derivatives_match_composed_map() {
        let (model, data) = trained(true);
        assert!(model.pls.is_some());
        let z: Vec<f64> = data.z.row(3).iter().copied().collect();
        let d = eval_with_derivatives(&model, &z).unwrap();
        assert_eq!(d.value, model.predict(&z).unwrap());
        assert_eq!(d.hessian, d.hessian.transpose());
        let h = 1e-5;
        for k in 0..z.len() {
            let mut zp = z.clone();
            let mut zm = z.clone();
            zp[k] += h;
            zm[k] -= h;
            let fd = (model.predict(&zp).unwrap() - model.predict(&zm).unwrap()) / (2.0 * h);
            assert!((fd - d.gradient[k]).abs() <= 1e-4 * d.gradient.amax().max(1e-8), "{k}");
        }
    }

    #[test]
    fn model_file_round_trip_is_exact() {
        for pls in [false, true] {
            let (model, _) = trained(pls);
            let text = model.to_json().unwrap();
            let back = ReducedSurrogate::from_json(&text).unwrap();
            assert_eq!(back, model);
            assert_eq!(back.to_json().unwrap(), text);
            assert_eq!(text.contains("\"pls\""), pls);
        }
    }

    #[test]
    fn rho_definition() {
        let (model, data) = trained(false);
        let pred = model.predict_rows(&data.z).unwrap();
        let rho = max_abs_error(&model, &data.z, &DVector::from_vec(pred)).unwrap();
        assert_eq!(rho, 0.0);

        let mut constant = model.clone();
        for l in &mut constant.mlp.layers {
            l.weights.fill(0.0);
            l.bias.fill(0.0);
        }
        constant.mlp.output_shift = 1.0;
        let z = data.z.rows(0, 2).into_owned();
        let rho = max_abs_error(&constant, &z, &DVector::from_vec(vec![0.0, 3.0])).unwrap();
        assert_eq!(rho, 2.0);
    }

    #[test]
    fn wrong_schema_version_is_rejected() {
        let (model, _) = trained(false);
        let text = model.to_json().unwrap().replace("\"schema_version\": 1", "\"schema_version\": 9");
        assert!(matches!(ReducedSurrogate::from_json(&text), Err(Error::Model(_))));
    }
}
