//! Correlated plant outputs by rank reordering of independent marginal
//! draws (Iman–Conover).

use std::cmp::Ordering;

use nalgebra::DMatrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, LogNormal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::ScenarioSet;
use crate::error::{Error, Result};

/// Marginal family of one plant's output in MW, truncated to `[0, capacity]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum Marginal {
    /// `capacity · Beta(alpha, beta)`.
    Beta { alpha: f64, beta: f64 },
    /// `exp(mu + sigma·Z)` MW, redrawn while above capacity.
    Lognormal { mu: f64, sigma: f64 },
    /// Uniform on `[0, capacity]`.
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantSpec {
    pub bus: u32,
    pub capacity_mw: f64,
    pub marginal: Marginal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    #[serde(default = "default_base")]
    pub base_mva: f64,
    pub plants: Vec<PlantSpec>,
    /// Target Spearman rank correlation; identity when omitted.
    #[serde(default)]
    pub rank_correlation: Option<Vec<Vec<f64>>>,
}

fn default_base() -> f64 {
    100.0
}

const MAX_REDRAWS: usize = 10_000;

enum Sampler {
    Beta(Beta<f64>, f64),
    Lognormal(LogNormal<f64>, f64),
    Uniform(f64),
}

impl Sampler {
    fn new(p: &PlantSpec) -> Result<Self> {
        let cap = p.capacity_mw;
        if !(cap > 0.0 && cap.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "plant at bus {}: capacity must be positive",
                p.bus
            )));
        }
        let bad = |what: &str| Error::InvalidArgument(format!("plant at bus {}: {what}", p.bus));
        Ok(match p.marginal {
            Marginal::Beta { alpha, beta } => {
                Sampler::Beta(Beta::new(alpha, beta).map_err(|_| bad("invalid beta parameters"))?, cap)
            }
            Marginal::Lognormal { mu, sigma } => Sampler::Lognormal(
                LogNormal::new(mu, sigma).map_err(|_| bad("invalid lognormal parameters"))?,
                cap,
            ),
            Marginal::Uniform => Sampler::Uniform(cap),
        })
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> Result<f64> {
        Ok(match self {
            Sampler::Beta(d, cap) => cap * d.sample(rng),
            Sampler::Lognormal(d, cap) => {
                for _ in 0..MAX_REDRAWS {
                    let x = d.sample(rng);
                    if x <= *cap {
                        return Ok(x);
                    }
                }
                return Err(Error::InvalidArgument(
                    "lognormal marginal puts almost no mass below capacity".into(),
                ));
            }
            Sampler::Uniform(cap) => cap * rng.random::<f64>(),
        })
    }
}

fn target_matrix(spec: &SynthSpec) -> Result<DMatrix<f64>> {
    let k = spec.plants.len();
    let Some(rows) = &spec.rank_correlation else {
        return Ok(DMatrix::identity(k, k));
    };
    if rows.len() != k || rows.iter().any(|r| r.len() != k) {
        return Err(Error::Dimension {
            what: "rank correlation matrix",
            expected: k,
            got: rows.len(),
        });
    }
    let m = DMatrix::from_fn(k, k, |i, j| rows[i][j]);
    for i in 0..k {
        if m[(i, i)] != 1.0 {
            return Err(Error::InvalidArgument("correlation diagonal must be 1".into()));
        }
        for j in 0..k {
            if m[(i, j)] != m[(j, i)] || m[(i, j)].abs() > 1.0 {
                return Err(Error::InvalidArgument(
                    "correlation matrix must be symmetric with entries in [-1, 1]".into(),
                ));
            }
        }
    }
    Ok(m)
}

fn argsort(col: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..col.len()).collect();
    idx.sort_by(|&a, &b| col[a].total_cmp(&col[b]));
    idx
}

fn pearson(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows() as f64;
    let means = m.row_mean();
    let centered = DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)] - means[j]);
    let cov = centered.transpose() * &centered / n;
    let sd: Vec<f64> = (0..m.ncols()).map(|j| cov[(j, j)].sqrt()).collect();
    DMatrix::from_fn(m.ncols(), m.ncols(), |i, j| cov[(i, j)] / (sd[i] * sd[j]))
}

/// Average ranks (1-based) with ties sharing their mean rank.
fn ranks(col: &[f64]) -> Vec<f64> {
    let order = argsort(col);
    let mut r = vec![0.0; col.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && col[order[j + 1]].partial_cmp(&col[order[i]]) == Some(Ordering::Equal) {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            r[o] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation matrix of the columns.
pub fn rank_correlation(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut r = DMatrix::zeros(m.nrows(), m.ncols());
    for j in 0..m.ncols() {
        let col: Vec<f64> = m.column(j).iter().copied().collect();
        r.set_column(j, &nalgebra::DVector::from_vec(ranks(&col)));
    }
    pearson(&r)
}

/// Draws `n` scenarios. Output is a pure function of `(spec, n, seed)`.
pub fn synth_scenarios(spec: &SynthSpec, n: usize, seed: u64) -> Result<ScenarioSet> {
    if n == 0 {
        return Err(Error::NoScenarios);
    }
    if !(spec.base_mva > 0.0) {
        return Err(Error::InvalidArgument("base_mva must be positive".into()));
    }
    let k = spec.plants.len();
    let target = target_matrix(spec)?;
    if target.clone().cholesky().is_none() {
        return Err(Error::NotPositiveDefinite);
    }
    let normal_target = target.map(|r| 2.0 * (std::f64::consts::PI * r / 6.0).sin());
    let chol_target = normal_target
        .cholesky()
        .ok_or(Error::NotPositiveDefinite)?
        .l();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samplers = spec.plants.iter().map(Sampler::new).collect::<Result<Vec<_>>>()?;
    let mut x = DMatrix::zeros(n, k);
    for (j, s) in samplers.iter().enumerate() {
        for i in 0..n {
            x[(i, j)] = s.draw(&mut rng)?;
        }
    }

    if k > 1 {
        let scores = DMatrix::from_fn(n, k, |_, _| rng.sample::<f64, _>(StandardNormal));
        // Remove the sample correlation of the scores before imposing the
        // target, when it can be estimated.
        let decorrelated = match (n > k).then(|| pearson(&scores).cholesky()).flatten() {
            Some(c) => {
                let l_inv = c.l().try_inverse().ok_or(Error::NotPositiveDefinite)?;
                &scores * l_inv.transpose()
            }
            None => scores,
        };
        let shaped = decorrelated * chol_target.transpose();
        for j in 0..k {
            let mut sorted: Vec<f64> = x.column(j).iter().copied().collect();
            sorted.sort_by(f64::total_cmp);
            let key: Vec<f64> = shaped.column(j).iter().copied().collect();
            for (r, &i) in argsort(&key).iter().enumerate() {
                x[(i, j)] = sorted[r];
            }
        }
    }

    let values = x / spec.base_mva;
    let buses = spec.plants.iter().map(|p| p.bus).collect();
    ScenarioSet::new(values, buses, format!("synthetic(seed={seed})"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(corr: Option<Vec<Vec<f64>>>) -> SynthSpec {
        SynthSpec {
            base_mva: 100.0,
            plants: vec![
                PlantSpec {
                    bus: 4,
                    capacity_mw: 60.0,
                    marginal: Marginal::Beta { alpha: 2.0, beta: 5.0 },
                },
                PlantSpec {
                    bus: 9,
                    capacity_mw: 60.0,
                    marginal: Marginal::Lognormal { mu: 3.0, sigma: 0.5 },
                },
                PlantSpec {
                    bus: 14,
                    capacity_mw: 40.0,
                    marginal: Marginal::Uniform,
                },
            ],
            rank_correlation: corr,
        }
    }

    /// Kolmogorov–Smirnov distance against a known CDF.
    fn ks(mut xs: Vec<f64>, cdf: impl Fn(f64) -> f64) -> f64 {
        xs.sort_by(f64::total_cmp);
        let n = xs.len() as f64;
        xs.iter()
            .enumerate()
            .map(|(i, &x)| {
                let f = cdf(x);
                (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn independent_columns_have_right_marginals() {
        let set = synth_scenarios(&spec(None), 5000, 11).unwrap();
        let r = rank_correlation(&set.values);
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    assert!(r[(i, j)].abs() < 0.05, "{}", r[(i, j)]);
                }
            }
        }
        // Uniform plant: KS distance well inside the 1% critical value.
        let u: Vec<f64> = set.values.column(2).iter().map(|v| v * 100.0 / 40.0).collect();
        assert!(ks(u, |x| x.clamp(0.0, 1.0)) < 1.63 / (5000f64).sqrt());
        // Beta(2,5) CDF: I_x(2,5) = 1 - (1-x)^6 - 6x(1-x)^5.
        let b: Vec<f64> = set.values.column(0).iter().map(|v| v * 100.0 / 60.0).collect();
        let beta_cdf = |x: f64| {
            let x = x.clamp(0.0, 1.0);
            1.0 - (1.0 - x).powi(6) - 6.0 * x * (1.0 - x).powi(5)
        };
        assert!(ks(b, beta_cdf) < 1.63 / (5000f64).sqrt());
        assert!(set.values.column(1).iter().all(|&v| v <= 0.6 && v >= 0.0));
    }

    #[test]
    fn target_rank_correlation_is_reached() {
        let corr = vec![
            vec![1.0, 0.8, 0.3],
            vec![0.8, 1.0, 0.5],
            vec![0.3, 0.5, 1.0],
        ];
        let set = synth_scenarios(&spec(Some(corr.clone())), 5000, 3).unwrap();
        let r = rank_correlation(&set.values);
        for i in 0..3 {
            for j in 0..3 {
                assert!((r[(i, j)] - corr[i][j]).abs() < 0.05, "({i},{j}) {}", r[(i, j)]);
            }
        }
    }

    #[test]
    fn fixed_seed_is_reproducible() {
        let s = spec(Some(vec![
            vec![1.0, 0.6, 0.0],
            vec![0.6, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ]));
        let a = synth_scenarios(&s, 500, 9).unwrap();
        let b = synth_scenarios(&s, 500, 9).unwrap();
        let (mut ba, mut bb) = (Vec::new(), Vec::new());
        a.write_csv(100.0, &mut ba).unwrap();
        b.write_csv(100.0, &mut bb).unwrap();
        assert_eq!(ba, bb);
        let c = synth_scenarios(&s, 500, 10).unwrap();
        assert_ne!(a.values, c.values);
    }

    #[test]
    fn indefinite_target_is_rejected() {
        let corr = vec![
            vec![1.0, 0.9, -0.9],
            vec![0.9, 1.0, 0.9],
            vec![-0.9, 0.9, 1.0],
        ];
        let err = synth_scenarios(&spec(Some(corr)), 100, 1).unwrap_err();
        assert!(matches!(err, Error::NotPositiveDefinite));
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }
}
