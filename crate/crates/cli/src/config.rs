use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ccvsc_core::apce::Truncation;
use ccvsc_core::ccopf::{CalibrationParams, ChanceSpec, IterateOptions};
use ccvsc_core::netmodel::NetworkCase;
use ccvsc_core::scenarios::{load_scenarios, synth_scenarios, ScenarioSet, SynthSpec};
use ccvsc_core::surrogate::{PlsConfig, SurrogateConfig, TrainConfig};
use serde::Deserialize;

/// Every random stream has an explicit seed; there is no fallback to
/// system entropy.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    pub lhs: u64,
    pub train: u64,
    pub scenarios: u64,
    pub holdout: u64,
}

#[derive(Debug, Clone, Deserialize)]
pub struct SynthConfig {
    pub samples: usize,
    #[serde(flatten)]
    pub spec: SynthSpec,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub samples: usize,
    /// Reused by `train` when it already exists.
    #[serde(default)]
    pub path: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChanceConfig {
    pub eps: f64,
    pub sigma_min: f64,
    pub eps_p: Option<f64>,
    pub eps_q: Option<f64>,
    pub eps_v: Option<f64>,
    pub eps_i: Option<f64>,
    pub eps_sigma: Option<f64>,
}

impl ChanceConfig {
    pub fn spec(&self) -> Result<ChanceSpec> {
        let e = self.eps;
        Ok(ChanceSpec {
            eps_p: self.eps_p.unwrap_or(e),
            eps_q: self.eps_q.unwrap_or(e),
            eps_v: self.eps_v.unwrap_or(e),
            eps_i: self.eps_i.unwrap_or(e),
            eps_sigma: self.eps_sigma.unwrap_or(e),
            sigma_min: self.sigma_min,
        }
        .validated()?)
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ApceConfig {
    pub m: usize,
    /// Interaction order; total-degree truncation when absent.
    pub s: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationConfig {
    #[serde(default)]
    pub enabled: bool,
    /// Defaults to the largest test error recorded in the model file.
    pub rho: Option<f64>,
    pub delta: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolveConfig {
    #[serde(default = "default_k_max")]
    pub k_max: usize,
    #[serde(default = "default_margin_tol")]
    pub margin_tol: f64,
    #[serde(default = "default_holdout")]
    pub holdout_fraction: f64,
}

impl Default for SolveConfig {
    fn default() -> Self {
        SolveConfig {
            k_max: default_k_max(),
            margin_tol: default_margin_tol(),
            holdout_fraction: default_holdout(),
        }
    }
}

fn default_k_max() -> usize {
    50
}

fn default_margin_tol() -> f64 {
    1e-6
}

fn default_holdout() -> f64 {
    0.2
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub case: PathBuf,
    /// Scenario CSV; alternative to `[synth]`.
    pub scenarios: Option<PathBuf>,
    pub synth: Option<SynthConfig>,
    pub model: PathBuf,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    pub seeds: Seeds,
    pub chance: ChanceConfig,
    pub dataset: DatasetConfig,
    pub apce: Option<ApceConfig>,
    #[serde(default)]
    pub train: TrainConfig,
    pub pls: Option<PlsConfig>,
    #[serde(default)]
    pub calibration: CalibrationConfig,
    #[serde(default)]
    pub solve: SolveConfig,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

/// Which files a command needs to exist before it starts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Needs {
    Inputs,
    Model,
}

impl RunConfig {
    /// Reads the TOML file and makes relative paths relative to it.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg: RunConfig = toml::from_str(&text).with_context(|| format!("config {}", path.display()))?;
        let dir = path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        fix(&mut cfg.case);
        fix(&mut cfg.model);
        fix(&mut cfg.out);
        if let Some(p) = cfg.scenarios.as_mut() {
            fix(p);
        }
        if let Some(p) = cfg.dataset.path.as_mut() {
            fix(p);
        }
        Ok(cfg)
    }

    pub fn check(&self, needs: Needs) -> Result<()> {
        match (&self.scenarios, &self.synth) {
            (Some(_), Some(_)) => bail!("give either `scenarios` or `[synth]`, not both"),
            (None, None) => bail!("no scenario source: set `scenarios` or `[synth]`"),
            _ => {}
        }
        let mut required = vec![&self.case];
        required.extend(self.scenarios.as_ref());
        if needs == Needs::Model {
            required.push(&self.model);
        }
        for p in required {
            if !p.exists() {
                bail!("{} does not exist", p.display());
            }
        }
        self.chance.spec()?;
        if let Some(a) = &self.apce {
            self.truncation_from(a)?;
        }
        if self.dataset.samples == 0 {
            bail!("dataset.samples must be positive");
        }
        Ok(())
    }

    fn truncation_from(&self, a: &ApceConfig) -> Result<Truncation> {
        if a.m == 0 || a.s == Some(0) {
            bail!("APCE truncation needs m ≥ 1 and s ≥ 1");
        }
        Ok(match a.s {
            Some(s) => Truncation::Reduced { s, m: a.m },
            None => Truncation::TotalDegree { m: a.m },
        })
    }

    pub fn truncation(&self) -> Result<Option<Truncation>> {
        self.apce.as_ref().map(|a| self.truncation_from(a)).transpose()
    }

    pub fn load_case(&self) -> Result<NetworkCase> {
        NetworkCase::load(&self.case).with_context(|| format!("case {}", self.case.display()))
    }

    /// The fitting scenarios: the CSV file, or the synthetic set drawn with
    /// `seed` (the configured scenario seed unless overridden).
    pub fn load_scenarios(&self, case: &NetworkCase, seed: Option<u64>) -> Result<ScenarioSet> {
        match (&self.scenarios, &self.synth) {
            (Some(p), _) => Ok(load_scenarios(p, case).with_context(|| format!("scenarios {}", p.display()))?),
            (None, Some(s)) => Ok(synth_scenarios(&s.spec, s.samples, seed.unwrap_or(self.seeds.scenarios))?),
            (None, None) => bail!("no scenario source: set `scenarios` or `[synth]`"),
        }
    }

    pub fn surrogate_config(&self) -> SurrogateConfig {
        SurrogateConfig {
            pls: self.pls.clone(),
            train: TrainConfig {
                seed: self.seeds.train,
                ..self.train.clone()
            },
            fd_step: None,
        }
    }

    pub fn iterate_options(&self, rho: f64, stability: bool) -> Result<IterateOptions> {
        Ok(IterateOptions {
            k_max: self.solve.k_max,
            margin_tol: self.solve.margin_tol,
            truncation: self.truncation()?,
            calibration: CalibrationParams {
                rho: self.calibration.rho.unwrap_or(rho),
                delta: self.calibration.delta,
                enabled: self.calibration.enabled,
            },
            stability,
            holdout_fraction: self.solve.holdout_fraction,
            seed: self.seeds.holdout,
            ..IterateOptions::default()
        })
    }
}
