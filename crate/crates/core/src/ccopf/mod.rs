//! Chance-constrained, stability-constrained OPF: the deterministic
//! interior-point solve and the iterative quantile tightening around it.

pub mod ipm;
mod problem;

use std::io::Write;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use ipm::{IpmOptions, IpmSolution, KktResidual, Nlp};
pub use problem::{build_deterministic, solve_deterministic, DeterministicSolution, NlpProblem};

use crate::apce::{evaluate, fit_coefficients, order_statistic, ApceBasis, ApceModel, Truncation};
use crate::error::{Error, Result};
use crate::netmodel::NetworkCase;
use crate::powerflow::{Grid, OperatingPoint, PfOptions, PowerFlowSolution};
use crate::scenarios::ScenarioSet;
use crate::surrogate::ReducedSurrogate;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Slack allowed when counting a physical limit as violated, matching the
/// interior-point feasibility tolerance.
pub const VIOLATION_TOL: f64 = 1e-8;

/// Upper bounds may be `+∞`; JSON has no infinity, so they round-trip as
/// `null`.
mod upper_bound {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

/// A random response subject to a chance constraint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Quantity {
    ActivePower { gen: usize },
    ReactivePower { gen: usize },
    Voltage { bus: usize },
    Current { branch: usize },
    Stability,
}

impl Quantity {
    pub fn label(&self, case: &NetworkCase) -> String {
        match *self {
            Quantity::ActivePower { gen } => format!("p_g of generator {gen} (bus {})", case.generators[gen].bus),
            Quantity::ReactivePower { gen } => format!("q_g of generator {gen} (bus {})", case.generators[gen].bus),
            Quantity::Voltage { bus } => format!("v at bus {}", case.buses[bus].id),
            Quantity::Current { branch } => {
                let b = &case.branches[branch];
                format!("current on branch {}-{}", b.from_bus, b.to_bus)
            }
            Quantity::Stability => "stability index".into(),
        }
    }

    /// Value of this response in a solved power flow.
    pub fn measure(&self, grid: &Grid, sol: &PowerFlowSolution) -> f64 {
        match *self {
            Quantity::ActivePower { gen } => sol.p_gen[gen],
            Quantity::ReactivePower { gen } => sol.q_gen[gen],
            Quantity::Voltage { bus } => sol.v[bus],
            Quantity::Current { branch } => grid.branch_current(&sol.v, &sol.theta, branch),
            Quantity::Stability => grid.vsi(&sol.v, &sol.theta),
        }
    }
}

/// Violation probabilities per constraint class and the stability threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChanceSpec {
    pub eps_p: f64,
    pub eps_q: f64,
    pub eps_v: f64,
    pub eps_i: f64,
    pub eps_sigma: f64,
    pub sigma_min: f64,
}

impl ChanceSpec {
    /// The same `eps` for every class.
    pub fn uniform(eps: f64, sigma_min: f64) -> Result<Self> {
        ChanceSpec {
            eps_p: eps,
            eps_q: eps,
            eps_v: eps,
            eps_i: eps,
            eps_sigma: eps,
            sigma_min,
        }
        .validated()
    }

    pub fn validated(self) -> Result<Self> {
        for (name, e) in [
            ("eps_p", self.eps_p),
            ("eps_q", self.eps_q),
            ("eps_v", self.eps_v),
            ("eps_i", self.eps_i),
            ("eps_sigma", self.eps_sigma),
        ] {
            if !(e > 0.0 && e < 0.5) {
                return Err(Error::InvalidArgument(format!("{name} = {e} outside (0, 0.5)")));
            }
        }
        if !(self.sigma_min > 0.0 && self.sigma_min.is_finite()) {
            return Err(Error::InvalidArgument(format!("sigma_min = {} must be positive", self.sigma_min)));
        }
        Ok(self)
    }

    pub fn epsilon(&self, q: &Quantity) -> f64 {
        match q {
            Quantity::ActivePower { .. } => self.eps_p,
            Quantity::ReactivePower { .. } => self.eps_q,
            Quantity::Voltage { .. } => self.eps_v,
            Quantity::Current { .. } => self.eps_i,
            Quantity::Stability => self.eps_sigma,
        }
    }
}

/// Surrogate error `rho` and APCE truncation error `delta`, both in units
/// of the stability index. A missing `delta` is estimated from held-out
/// scenarios.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CalibrationParams {
    pub rho: f64,
    #[serde(default)]
    pub delta: Option<f64>,
    pub enabled: bool,
}

impl CalibrationParams {
    pub fn validated(self) -> Result<Self> {
        if !(self.rho >= 0.0) || self.delta.is_some_and(|d| !(d >= 0.0)) {
            return Err(Error::InvalidArgument("calibration errors must be non-negative".into()));
        }
        Ok(self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundEntry {
    pub quantity: Quantity,
    pub label: String,
    pub min0: f64,
    #[serde(with = "upper_bound")]
    pub max0: f64,
    pub min: f64,
    #[serde(with = "upper_bound")]
    pub max: f64,
    pub margin: Margin,
}

impl BoundEntry {
    pub fn tightened(&self) -> bool {
        self.min != self.min0 || self.max != self.max0
    }
}

/// Current and original bounds of every chance-constrained response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundsState {
    pub k: usize,
    pub entries: Vec<BoundEntry>,
}

impl BoundsState {
    /// Physical limits of the case: reference-bus active output, every
    /// reactive output, PQ voltages, rated branch currents and, when
    /// `stability` is set, the stability threshold.
    pub fn initial(case: &NetworkCase, chance: &ChanceSpec, stability: bool) -> Result<Self> {
        let grid = Grid::new(case)?;
        let mut entries = Vec::new();
        let mut push = |quantity: Quantity, min0: f64, max0: f64| {
            entries.push(BoundEntry {
                quantity,
                label: quantity.label(case),
                min0,
                max0,
                min: min0,
                max: max0,
                margin: Margin::default(),
            })
        };
        for (g, gen) in case.generators.iter().enumerate() {
            if grid.gen_bus()[g] == grid.reference() {
                push(Quantity::ActivePower { gen: g }, gen.p_min, gen.p_max);
            }
        }
        for (g, gen) in case.generators.iter().enumerate() {
            push(Quantity::ReactivePower { gen: g }, gen.q_min, gen.q_max);
        }
        for &i in grid.pq() {
            push(Quantity::Voltage { bus: i }, case.buses[i].v_min, case.buses[i].v_max);
        }
        for (k, br) in case.branches.iter().enumerate() {
            if let Some(imax) = br.i_max {
                push(Quantity::Current { branch: k }, 0.0, imax);
            }
        }
        if stability {
            push(Quantity::Stability, chance.sigma_min, f64::INFINITY);
        }
        Ok(BoundsState { k: 0, entries })
    }

    pub fn get(&self, q: &Quantity) -> Option<&BoundEntry> {
        self.entries.iter().find(|e| &e.quantity == q)
    }

    pub fn has_stability(&self) -> bool {
        self.get(&Quantity::Stability).is_some()
    }

    /// True when every interval of `self` lies inside the matching one of
    /// `outer`.
    pub fn nested_in(&self, outer: &BoundsState) -> bool {
        self.entries.len() == outer.entries.len()
            && self.entries.iter().zip(&outer.entries).all(|(a, b)| {
                a.quantity == b.quantity && a.min >= b.min && a.max <= b.max
            })
    }
}

/// Tightening of one constraint's lower and upper bound.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Margin {
    pub lower: f64,
    pub upper: f64,
}

impl Margin {
    pub fn max(&self) -> f64 {
        self.lower.max(self.upper)
    }
}

/// Lower (`Q_ε`) and upper (`Q_{1−ε}`) quantiles of one response.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quantiles {
    pub low: f64,
    pub high: f64,
}

/// `[x_min0 − Q_ε + extra]⁺` and `[Q_{1−ε} − x_max0]⁺`.
pub fn margin(min0: f64, max0: f64, q: Quantiles, extra: f64) -> Margin {
    Margin {
        lower: (min0 - q.low + extra).max(0.0),
        upper: (q.high - max0).max(0.0),
    }
}

/// Margins for every entry of `bounds`; `delta` is added to the lower
/// margin of the stability constraint only.
pub fn margins(bounds: &BoundsState, quantiles: &[Quantiles], delta: f64) -> Result<Vec<Margin>> {
    if quantiles.len() != bounds.entries.len() {
        return Err(Error::Dimension {
            what: "quantiles",
            expected: bounds.entries.len(),
            got: quantiles.len(),
        });
    }
    Ok(bounds
        .entries
        .iter()
        .zip(quantiles)
        .map(|(e, &q)| {
            let extra = if e.quantity == Quantity::Stability { delta } else { 0.0 };
            margin(e.min0, e.max0, q, extra)
        })
        .collect())
}

/// Moves every bound inward by its margin and advances `k`.
pub fn tighten(bounds: &BoundsState, margins: &[Margin]) -> Result<BoundsState> {
    if margins.len() != bounds.entries.len() {
        return Err(Error::Dimension {
            what: "margins",
            expected: bounds.entries.len(),
            got: margins.len(),
        });
    }
    let mut next = bounds.clone();
    for (e, m) in next.entries.iter_mut().zip(margins) {
        if !(m.lower >= 0.0 && m.upper >= 0.0) {
            return Err(Error::InvalidArgument(format!("negative margin on {}", e.label)));
        }
        e.min += m.lower;
        e.max -= m.upper;
        e.margin = *m;
        if e.min > e.max {
            return Err(Error::CrossedBounds {
                constraint: e.label.clone(),
                lower: e.min,
                upper: e.max,
            });
        }
    }
    next.k += 1;
    Ok(next)
}

/// Exact responses at every scenario; `None` where the power flow failed.
fn sweep(
    grid: &Grid,
    point: &OperatingPoint,
    scenarios: &ScenarioSet,
    quantities: &[Quantity],
    opts: &PfOptions,
) -> Result<Vec<Option<Vec<f64>>>> {
    let mean = scenarios.mean();
    let base_inj = grid.injections(point, &scenarios.plant_buses, &mean)?;
    let base = grid.solve(&base_inj, None, opts).ok().filter(|s| s.converged);
    (0..scenarios.n_samples())
        .into_par_iter()
        .map(|l| {
            let inj = grid.injections(point, &scenarios.plant_buses, &scenarios.row(l))?;
            Ok(match grid.solve(&inj, base.as_ref(), opts) {
                Ok(sol) if sol.converged => {
                    let vals: Vec<f64> = quantities.iter().map(|q| q.measure(grid, &sol)).collect();
                    vals.iter().all(|v| v.is_finite()).then_some(vals)
                }
                _ => None,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Lower,
    Upper,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViolationRow {
    pub label: String,
    pub quantity: Quantity,
    pub side: Side,
    pub bound: f64,
    pub epsilon: f64,
    pub violations: usize,
    /// Violations (power-flow failures included) over all scenarios.
    pub probability: f64,
    /// Whether the iterative scheme moved this bound.
    pub tightened: bool,
}

/// Per-constraint empirical violation probabilities against the physical
/// limits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViolationReport {
    pub n_scenarios: usize,
    pub pf_failures: usize,
    pub rows: Vec<ViolationRow>,
    pub max_probability: f64,
}

impl ViolationReport {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["constraint", "side", "bound", "epsilon", "violations", "probability", "tightened"])?;
        for r in &self.rows {
            w.write_record([
                r.label.clone(),
                format!("{:?}", r.side).to_lowercase(),
                format!("{:e}", r.bound),
                format!("{}", r.epsilon),
                r.violations.to_string(),
                format!("{:e}", r.probability),
                r.tightened.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn violation_table(
    entries: &[BoundEntry],
    chance: &ChanceSpec,
    values: &[Option<Vec<f64>>],
) -> ViolationReport {
    let n = values.len();
    let pf_failures = values.iter().filter(|v| v.is_none()).count();
    let mut rows = Vec::new();
    for (c, e) in entries.iter().enumerate() {
        for (side, bound) in [(Side::Lower, e.min0), (Side::Upper, e.max0)] {
            // Current magnitudes cannot go below zero.
            let current_floor = side == Side::Lower && matches!(e.quantity, Quantity::Current { .. });
            if !bound.is_finite() || current_floor {
                continue;
            }
            let violations = values
                .iter()
                .filter(|v| match v {
                    None => true,
                    Some(v) => match side {
                        Side::Lower => v[c] < bound - VIOLATION_TOL,
                        Side::Upper => v[c] > bound + VIOLATION_TOL,
                    },
                })
                .count();
            rows.push(ViolationRow {
                label: e.label.clone(),
                quantity: e.quantity,
                side,
                bound,
                epsilon: chance.epsilon(&e.quantity),
                violations,
                probability: violations as f64 / n.max(1) as f64,
                tightened: match side {
                    Side::Lower => e.min != e.min0,
                    Side::Upper => e.max != e.max0,
                },
            });
        }
    }
    let max_probability = rows.iter().map(|r| r.probability).fold(0.0, f64::max);
    ViolationReport {
        n_scenarios: n,
        pf_failures,
        rows,
        max_probability,
    }
}

/// Solves a power flow per scenario at `y` and counts violations of the
/// physical limits. Failed power flows count against every constraint.
pub fn empirical_violation(
    case: &NetworkCase,
    y: &OperatingPoint,
    scenarios: &ScenarioSet,
    chance: &ChanceSpec,
    stability: bool,
) -> Result<ViolationReport> {
    let grid = Grid::new(case)?;
    let bounds = BoundsState::initial(case, chance, stability)?;
    let quantities: Vec<Quantity> = bounds.entries.iter().map(|e| e.quantity).collect();
    let values = sweep(&grid, y, scenarios, &quantities, &PfOptions::default())?;
    Ok(violation_table(&bounds.entries, chance, &values))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IterateOptions {
    pub k_max: usize,
    pub margin_tol: f64,
    /// Basis truncation; chosen from the number of plants when absent.
    pub truncation: Option<Truncation>,
    pub calibration: CalibrationParams,
    /// Enforce the stability constraint. The stability index is collected
    /// as a response either way.
    pub stability: bool,
    /// Share of scenarios held out when estimating `delta`.
    pub holdout_fraction: f64,
    pub seed: u64,
    pub ipm: IpmOptions,
}

impl Default for IterateOptions {
    fn default() -> Self {
        IterateOptions {
            k_max: 50,
            margin_tol: 1e-6,
            truncation: None,
            calibration: CalibrationParams::default(),
            stability: true,
            holdout_fraction: 0.2,
            seed: 0,
            ipm: IpmOptions::default(),
        }
    }
}

/// Bounds and operating point to resume from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarmStart {
    pub bounds: BoundsState,
    pub point: OperatingPoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub min: f64,
    #[serde(with = "upper_bound")]
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub k: usize,
    pub cost: f64,
    pub sigma_hat: Option<f64>,
    /// Bounds used by this iteration's deterministic solve.
    pub bounds: Vec<Interval>,
    pub quantiles: Vec<Quantiles>,
    pub margins: Vec<Margin>,
    pub max_margin: f64,
    pub worst: String,
    pub pf_failures: usize,
    pub delta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Timing {
    pub nlp_seconds: f64,
    pub pf_seconds: f64,
    pub apce_seconds: f64,
}

/// Probability that the stability index falls below its threshold, from
/// the APCE model and from the exact power flows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StabilityRisk {
    pub sigma_min: f64,
    pub apce: f64,
    pub exact: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub schema_version: u32,
    pub converged: bool,
    /// Number of tightening steps taken.
    pub iterations: usize,
    pub point: OperatingPoint,
    /// Generation cost at the expected plant output ($/h).
    pub cost: f64,
    pub solution: DeterministicSolution,
    pub stability_enabled: bool,
    pub chance: ChanceSpec,
    pub calibration: CalibrationParams,
    pub bounds: BoundsState,
    pub history: Vec<IterationRecord>,
    /// Checked on the scenarios used for fitting.
    pub violations: ViolationReport,
    pub stability_risk: StabilityRisk,
    pub timing: Timing,
    pub apce: ApceModel,
}

impl SolveReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: SolveReport = serde_json::from_str(text)?;
        if r.schema_version != REPORT_SCHEMA_VERSION {
            return Err(Error::Model(format!(
                "report schema version {} (expected {REPORT_SCHEMA_VERSION})",
                r.schema_version
            )));
        }
        Ok(r)
    }

    pub fn warm_start(&self) -> WarmStart {
        WarmStart {
            bounds: self.bounds.clone(),
            point: self.point.clone(),
        }
    }

    /// One row per iteration and constraint.
    pub fn write_history_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["k", "cost", "constraint", "min", "max", "q_low", "q_high", "margin_lower", "margin_upper"])?;
        for rec in &self.history {
            for (c, e) in self.bounds.entries.iter().enumerate() {
                w.write_record([
                    rec.k.to_string(),
                    format!("{:.10e}", rec.cost),
                    e.label.clone(),
                    format!("{:e}", rec.bounds[c].min),
                    format!("{:e}", rec.bounds[c].max),
                    format!("{:e}", rec.quantiles[c].low),
                    format!("{:e}", rec.quantiles[c].high),
                    format!("{:e}", rec.margins[c].lower),
                    format!("{:e}", rec.margins[c].upper),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// APCE evaluations of every response at every scenario, for plotting.
pub fn write_distribution_csv<W: Write>(model: &ApceModel, scenarios: &ScenarioSet, out: W) -> Result<()> {
    let values = evaluate(model, &scenarios.values)?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(&model.labels)?;
    for row in values.row_iter() {
        w.write_record(row.iter().map(|v| format!("{v:e}")))?;
    }
    w.flush()?;
    Ok(())
}

/// 99.9th percentile of the absolute residual of the last response column,
/// fitted on part of the scenarios and scored on the rest.
fn holdout_delta(basis: &ApceBasis, xi: &DMatrix<f64>, response: &[f64], fraction: f64, seed: u64) -> Result<f64> {
    let n = response.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_test = ((fraction * n as f64).round() as usize).min(n);
    let (test, train) = idx.split_at(n_test);
    if test.is_empty() || train.len() < basis.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot hold out {n_test} of {n} scenarios for the truncation error"
        )));
    }
    let y = DMatrix::from_fn(train.len(), 1, |r, _| response[train[r]]);
    let model = fit_coefficients(basis.clone(), &xi.select_rows(train), &y, vec!["sigma".into()])?;
    let pred = evaluate(&model, &xi.select_rows(test))?;
    let res: Vec<f64> = test.iter().enumerate().map(|(r, &l)| (pred[(r, 0)] - response[l]).abs()).collect();
    Ok(order_statistic(res, 0.999))
}

/// The iterative data-driven scheme: solve the deterministic problem, fit
/// the APCE of the exact responses over the scenarios, tighten by the
/// quantile overshoot and repeat until every margin is below
/// `opts.margin_tol`.
pub fn iterate(
    case: &NetworkCase,
    scenarios: &ScenarioSet,
    chance: &ChanceSpec,
    surrogate: Option<&ReducedSurrogate>,
    opts: &IterateOptions,
    start: Option<&WarmStart>,
) -> Result<SolveReport> {
    let chance = chance.validated()?;
    let calib = opts.calibration.validated()?;
    if opts.k_max == 0 {
        return Err(Error::InvalidArgument("k_max must be at least 1".into()));
    }
    if opts.stability && surrogate.is_none() {
        return Err(Error::InvalidArgument("stability constraint requested without a surrogate".into()));
    }
    let grid = Grid::new(case)?;
    let pf_opts = PfOptions::default();
    let xi = &scenarios.values;
    let xi_mean = scenarios.mean();
    let mut timing = Timing::default();

    let mut bounds = match start {
        Some(s) => {
            if s.bounds.has_stability() != opts.stability {
                return Err(Error::InvalidArgument(
                    "warm-start bounds disagree with the stability setting".into(),
                ));
            }
            s.bounds.clone()
        }
        None => BoundsState::initial(case, &chance, opts.stability)?,
    };
    let mut point = start.map_or_else(|| OperatingPoint::base_case(case), |s| s.point.clone());

    let mut quantities: Vec<Quantity> = bounds.entries.iter().map(|e| e.quantity).collect();
    if !opts.stability {
        quantities.push(Quantity::Stability);
    }
    let labels: Vec<String> = quantities.iter().map(|q| q.label(case)).collect();
    let sigma_col = quantities.iter().position(|q| *q == Quantity::Stability).unwrap_or(0);

    let t = Instant::now();
    let truncation = opts.truncation.unwrap_or_else(|| Truncation::default_for(scenarios.n_plants()));
    let basis = ApceBasis::fit(truncation.indices(scenarios.n_plants())?, xi)?;
    timing.apce_seconds += t.elapsed().as_secs_f64();

    let mut history = Vec::new();
    let mut delta_used = calib.delta.unwrap_or(0.0);
    let first_k = bounds.k;
    loop {
        let k = bounds.k;
        let step = k - first_k;
        let ctx = |e: Error| e.at_iteration(k);

        let t = Instant::now();
        let nlp = build_deterministic(case, &bounds, surrogate, &calib, &scenarios.plant_buses, &xi_mean).map_err(ctx)?;
        let sol = solve_deterministic(&nlp, &point, &opts.ipm).map_err(ctx)?;
        timing.nlp_seconds += t.elapsed().as_secs_f64();
        point = sol.point.clone();
        if let Some(prev) = history.last().map(|r: &IterationRecord| r.cost) {
            if sol.cost < prev - 1e-6 * (1.0 + prev.abs()) {
                log::warn!("iteration {k}: cost fell from {prev} to {}", sol.cost);
            }
        }

        let t = Instant::now();
        let values = sweep(&grid, &point, scenarios, &quantities, &pf_opts).map_err(ctx)?;
        timing.pf_seconds += t.elapsed().as_secs_f64();
        let ok: Vec<usize> = (0..values.len()).filter(|&l| values[l].is_some()).collect();
        let pf_failures = values.len() - ok.len();
        if ok.len() < basis.len() {
            return Err(ctx(Error::InvalidArgument(format!(
                "only {} of {} scenario power flows converged",
                ok.len(),
                values.len()
            ))));
        }

        let t = Instant::now();
        let resp = DMatrix::from_fn(ok.len(), quantities.len(), |r, c| values[ok[r]].as_ref().unwrap()[c]);
        let xi_ok = xi.select_rows(&ok);
        let model = fit_coefficients(basis.clone(), &xi_ok, &resp, labels.clone()).map_err(ctx)?;
        let evals = evaluate(&model, xi).map_err(ctx)?;
        if calib.enabled && opts.stability && calib.delta.is_none() {
            let sig: Vec<f64> = resp.column(sigma_col).iter().copied().collect();
            delta_used = holdout_delta(&basis, &xi_ok, &sig, opts.holdout_fraction, opts.seed).map_err(ctx)?;
        }
        timing.apce_seconds += t.elapsed().as_secs_f64();

        let quantiles: Vec<Quantiles> = bounds
            .entries
            .iter()
            .enumerate()
            .map(|(c, e)| {
                let eps = chance.epsilon(&e.quantity);
                let col: Vec<f64> = evals.column(c).iter().copied().collect();
                Quantiles {
                    low: order_statistic(col.clone(), eps),
                    high: order_statistic(col, 1.0 - eps),
                }
            })
            .collect();
        let delta = if calib.enabled { delta_used } else { 0.0 };
        let m = margins(&bounds, &quantiles, delta)?;
        let (worst_idx, max_margin) = m
            .iter()
            .enumerate()
            .map(|(i, m)| (i, m.max()))
            .fold((0, 0.0), |acc, x| if x.1 > acc.1 { x } else { acc });
        let worst = bounds.entries.get(worst_idx).map_or_else(String::new, |e| e.label.clone());
        log::info!(
            "iteration {k}: cost {:.6} max margin {max_margin:.3e} ({worst}), {pf_failures} power-flow failures",
            sol.cost
        );
        history.push(IterationRecord {
            k,
            cost: sol.cost,
            sigma_hat: sol.sigma_hat,
            bounds: bounds.entries.iter().map(|e| Interval { min: e.min, max: e.max }).collect(),
            quantiles,
            margins: m.clone(),
            max_margin,
            worst: worst.clone(),
            pf_failures,
            delta,
        });

        if max_margin < opts.margin_tol {
            for (e, mm) in bounds.entries.iter_mut().zip(&m) {
                e.margin = *mm;
            }
            let sigma_vals: Vec<f64> = evals.column(sigma_col).iter().copied().collect();
            let below = sigma_vals.iter().filter(|&&s| s < chance.sigma_min).count();
            let exact_below = values
                .iter()
                .filter(|v| v.as_ref().is_none_or(|v| v[sigma_col] < chance.sigma_min))
                .count();
            let n = values.len() as f64;
            let violations = violation_table(&bounds.entries, &chance, &values);
            return Ok(SolveReport {
                schema_version: REPORT_SCHEMA_VERSION,
                converged: true,
                iterations: step,
                cost: sol.cost,
                point,
                solution: sol,
                stability_enabled: opts.stability,
                chance,
                calibration: CalibrationParams {
                    rho: calib.rho,
                    delta: Some(delta),
                    enabled: calib.enabled,
                },
                bounds,
                history,
                violations,
                stability_risk: StabilityRisk {
                    sigma_min: chance.sigma_min,
                    apce: below as f64 / n,
                    exact: exact_below as f64 / n,
                },
                timing,
                apce: model,
            });
        }
        if step >= opts.k_max {
            return Err(Error::NotConverged {
                k_max: opts.k_max,
                max_margin,
                constraint: worst,
            });
        }
        bounds = tighten(&bounds, &m).map_err(ctx)?;
    }
}

#[cfg(test)]
pub(crate) mod testutil {
    use std::sync::OnceLock;

    use super::*;
    use crate::netmodel::{parse_case_text, CASE14};
    use crate::scenarios::{build_vsi_dataset, lhs_sample, synth_scenarios, ControlBounds, Marginal, PlantSpec, SynthSpec};
    use crate::surrogate::{train_surrogate, SurrogateConfig, TrainConfig};

    pub fn plain_bounds(case: &NetworkCase) -> BoundsState {
        BoundsState::initial(case, &ChanceSpec::uniform(0.05, 0.5).unwrap(), false).unwrap()
    }

    /// Three correlated 20 MW plants on the 14-bus network.
    pub fn plants(n: usize, seed: u64) -> ScenarioSet {
        let spec = SynthSpec {
            base_mva: 100.0,
            plants: [4, 9, 13]
                .into_iter()
                .map(|bus| PlantSpec {
                    bus,
                    capacity_mw: 20.0,
                    marginal: Marginal::Beta { alpha: 2.0, beta: 2.0 },
                })
                .collect(),
            rank_correlation: Some(vec![vec![1.0, 0.6, 0.5], vec![0.6, 1.0, 0.6], vec![0.5, 0.6, 1.0]]),
        };
        synth_scenarios(&spec, n, seed).unwrap()
    }

    /// A quickly trained 14-bus surrogate; accurate enough to steer the
    /// solver, not for accuracy claims.
    pub fn small_surrogate() -> &'static ReducedSurrogate {
        static S: OnceLock<ReducedSurrogate> = OnceLock::new();
        S.get_or_init(|| {
            let case = parse_case_text(CASE14).unwrap();
            let b = ControlBounds::from_case(&case).unwrap();
            let base = OperatingPoint::base_case(&case);
            let ops: Vec<_> = lhs_sample(&b, 800, 5).iter().map(|y| b.operating_point(y, &base).unwrap()).collect();
            let sc = plants(1000, 1);
            let ds = build_vsi_dataset(&case, &ops, &sc.plant_buses, &sc.mean()).unwrap();
            let cfg = SurrogateConfig {
                train: TrainConfig {
                    epochs: 200,
                    polish_iterations: 300,
                    ..TrainConfig::default()
                },
                ..SurrogateConfig::default()
            };
            train_surrogate(&ds, &cfg).unwrap()
        })
    }
}

#[cfg(test)]
mod tests {
    use super::testutil::{plants, small_surrogate};
    use super::*;
    use crate::netmodel::{parse_case_text, CASE14};
    use crate::powerflow::{injections_from_dispatch, solve_pf};
    use proptest::prelude::*;

    fn entry(min0: f64, max0: f64) -> BoundEntry {
        BoundEntry {
            quantity: Quantity::Voltage { bus: 0 },
            label: "v at bus 1".into(),
            min0,
            max0,
            min: min0,
            max: max0,
            margin: Margin::default(),
        }
    }

    fn one(min0: f64, max0: f64) -> BoundsState {
        BoundsState {
            k: 0,
            entries: vec![entry(min0, max0)],
        }
    }

    #[test]
    fn upper_margin_is_the_quantile_overshoot() {
        let m = margin(0.95, 1.05, Quantiles { low: 1.0, high: 1.06 }, 0.0);
        assert!((m.upper - 0.01).abs() < 1e-12 && m.lower == 0.0);
        let m = margin(0.95, 1.05, Quantiles { low: 1.0, high: 1.04 }, 0.0);
        assert_eq!(m, Margin::default());
    }

    #[test]
    fn stability_margin_includes_truncation_error() {
        let b = BoundsState {
            k: 0,
            entries: vec![BoundEntry {
                quantity: Quantity::Stability,
                label: "stability index".into(),
                min0: 0.56,
                max0: f64::INFINITY,
                min: 0.56,
                max: f64::INFINITY,
                margin: Margin::default(),
            }],
        };
        let m = margins(&b, &[Quantiles { low: 0.55, high: 0.7 }], 0.005).unwrap();
        assert!((m[0].lower - 0.015).abs() < 1e-12 && m[0].upper == 0.0);
        // The extra term is specific to the stability index.
        let m = margins(&one(0.95, 1.05), &[Quantiles { low: 0.94, high: 1.0 }], 0.005).unwrap();
        assert!((m[0].lower - 0.01).abs() < 1e-12);
    }

    #[test]
    fn tightening_moves_bounds_inward() {
        let b = one(0.95, 1.05);
        let same = tighten(&b, &[Margin::default()]).unwrap();
        assert_eq!((same.k, same.entries[0].min, same.entries[0].max), (1, 0.95, 1.05));
        let t = tighten(&b, &[Margin { lower: 0.0, upper: 0.01 }]).unwrap();
        assert_eq!(t.entries[0].min, 0.95);
        assert!((t.entries[0].max - 1.04).abs() < 1e-15);
        assert!(t.nested_in(&b));
    }

    #[test]
    fn crossing_bounds_is_an_error() {
        let mut b = one(0.95, 1.05);
        let m = [Margin { lower: 0.03, upper: 0.03 }];
        b = tighten(&b, &m).unwrap();
        let err = tighten(&b, &m).unwrap_err();
        assert!(matches!(err, Error::CrossedBounds { .. }));
        assert_eq!(err.kind(), crate::error::ErrorKind::Infeasible);
    }

    proptest! {
        #[test]
        fn tightening_is_monotone(lo in -1.0..1.0f64, width in 0.1..2.0f64, qs in prop::collection::vec((-3.0..3.0f64, 0.0..2.0f64), 1..6)) {
            let mut b = one(lo, lo + width);
            for (low, spread) in qs {
                let m = margins(&b, &[Quantiles { low, high: low + spread }], 0.0).unwrap();
                prop_assert!(m[0].lower >= 0.0 && m[0].upper >= 0.0);
                match tighten(&b, &m) {
                    Ok(next) => {
                        prop_assert!(next.nested_in(&b));
                        prop_assert!(next.entries[0].min >= next.entries[0].min0);
                        prop_assert!(next.entries[0].max <= next.entries[0].max0);
                        b = next;
                    }
                    Err(Error::CrossedBounds { lower, upper, .. }) => prop_assert!(lower > upper),
                    Err(e) => return Err(TestCaseError::fail(e.to_string())),
                }
            }
        }
    }

    #[test]
    fn chance_spec_is_validated() {
        assert!(ChanceSpec::uniform(0.05, 0.56).is_ok());
        assert!(ChanceSpec::uniform(0.0, 0.56).is_err());
        assert!(ChanceSpec::uniform(0.5, 0.56).is_err());
        assert!(ChanceSpec::uniform(0.05, 0.0).is_err());
        let bad = CalibrationParams {
            rho: -1.0,
            delta: None,
            enabled: true,
        };
        assert!(bad.validated().is_err());
    }

    #[test]
    fn initial_bounds_are_physical_limits() {
        let case = parse_case_text(CASE14).unwrap();
        let chance = ChanceSpec::uniform(0.05, 0.56).unwrap();
        let b = BoundsState::initial(&case, &chance, true).unwrap();
        assert_eq!(b.k, 0);
        let v4 = b.get(&Quantity::Voltage { bus: 3 }).unwrap();
        assert_eq!((v4.min, v4.max), (case.buses[3].v_min, case.buses[3].v_max));
        let q = b.get(&Quantity::ReactivePower { gen: 1 }).unwrap();
        assert_eq!((q.min, q.max), (case.generators[1].q_min, case.generators[1].q_max));
        let p = b.get(&Quantity::ActivePower { gen: 0 }).unwrap();
        assert_eq!((p.min, p.max), (case.generators[0].p_min, case.generators[0].p_max));
        assert!(b.get(&Quantity::ActivePower { gen: 1 }).is_none());
        assert!(b.get(&Quantity::Voltage { bus: 1 }).is_none());
        let s = b.get(&Quantity::Stability).unwrap();
        assert_eq!((s.min, s.max), (0.56, f64::INFINITY));
        assert!(b.entries.iter().all(|e| !e.tightened()));
        assert!(!BoundsState::initial(&case, &chance, false).unwrap().has_stability());

        let json = serde_json::to_string(&b).unwrap();
        let back: BoundsState = serde_json::from_str(&json).unwrap();
        assert_eq!(back, b);
    }

    #[test]
    fn unbounded_limits_are_never_violated() {
        let mut case = parse_case_text(CASE14).unwrap();
        for bus in &mut case.buses {
            bus.v_min = -1e6;
            bus.v_max = 1e6;
        }
        for g in &mut case.generators {
            (g.p_min, g.p_max, g.q_min, g.q_max) = (-1e6, 1e6, -1e6, 1e6);
        }
        let sc = plants(300, 2);
        let chance = ChanceSpec::uniform(0.05, 0.56).unwrap();
        let r = empirical_violation(&case, &OperatingPoint::base_case(&case), &sc, &chance, false).unwrap();
        assert!(!r.rows.is_empty());
        assert!(r.rows.iter().all(|row| row.probability == 0.0));
        assert_eq!((r.pf_failures, r.max_probability), (0, 0.0));
    }

    #[test]
    fn limit_at_the_95th_percentile_is_violated_five_percent_of_the_time() {
        let mut case = parse_case_text(CASE14).unwrap();
        let sc = plants(2000, 3);
        let op = OperatingPoint::base_case(&case);
        // Direct count with independent power-flow calls.
        let v: Vec<f64> = (0..sc.n_samples())
            .map(|l| {
                let inj = injections_from_dispatch(&case, &op, &sc.plant_buses, &sc.row(l)).unwrap();
                solve_pf(&case, &inj, None).unwrap().v[8]
            })
            .collect();
        let q95 = order_statistic(v.clone(), 0.95);
        case.buses[8].v_max = q95;
        let expected = v.iter().filter(|&&x| x > q95 + VIOLATION_TOL).count() as f64 / v.len() as f64;
        let chance = ChanceSpec::uniform(0.05, 0.56).unwrap();
        let r = empirical_violation(&case, &op, &sc, &chance, false).unwrap();
        let row = r
            .rows
            .iter()
            .find(|row| row.quantity == Quantity::Voltage { bus: 8 } && row.side == Side::Upper)
            .unwrap();
        assert_eq!(row.probability, expected);
        assert!((row.probability - 0.05).abs() <= 1.0 / 2000.0, "{}", row.probability);
    }

    fn iterate_opts() -> IterateOptions {
        IterateOptions {
            stability: false,
            ..IterateOptions::default()
        }
    }

    #[test]
    fn nearly_deterministic_scenarios_converge_immediately() {
        let case = parse_case_text(CASE14).unwrap();
        let mut sc = plants(500, 4);
        sc.values *= 1e-4;
        let chance = ChanceSpec::uniform(0.49, 0.56).unwrap();
        let r = iterate(&case, &sc, &chance, None, &iterate_opts(), None).unwrap();
        assert_eq!(r.iterations, 0);
        assert!(r.history[0].max_margin < 1e-6);
        let nlp = build_deterministic(
            &case,
            &BoundsState::initial(&case, &chance, false).unwrap(),
            None,
            &CalibrationParams::default(),
            &sc.plant_buses,
            &sc.mean(),
        )
        .unwrap();
        let det = solve_deterministic(&nlp, &OperatingPoint::base_case(&case), &IpmOptions::default()).unwrap();
        assert_eq!(r.point, det.point);
    }

    #[test]
    fn tightening_loop_meets_the_chance_constraints() {
        let case = parse_case_text(CASE14).unwrap();
        let sc = plants(2000, 5);
        let chance = ChanceSpec::uniform(0.05, 0.56).unwrap();
        let r = iterate(&case, &sc, &chance, None, &iterate_opts(), None).unwrap();
        assert!(r.converged && r.iterations >= 1 && r.iterations <= 25, "{}", r.iterations);
        let n = sc.n_samples() as f64;
        let tightened: Vec<_> = r.violations.rows.iter().filter(|row| row.tightened).collect();
        assert!(!tightened.is_empty());
        for row in tightened {
            assert!(row.probability <= row.epsilon + 1.0 / n, "{row:?}");
        }
        for w in r.history.windows(2) {
            assert!(w[1].cost >= w[0].cost - 1e-6 * w[0].cost);
            for (a, b) in w[0].bounds.iter().zip(&w[1].bounds) {
                assert!(b.min >= a.min && b.max <= a.max);
            }
        }
        assert!(r.stability_risk.apce > chance.eps_sigma);

        let again = iterate(&case, &sc, &chance, None, &iterate_opts(), Some(&r.warm_start())).unwrap();
        assert_eq!(again.iterations, 0);
        assert!(again.history[0].max_margin < 1e-6);

        let json = r.to_json().unwrap();
        let back = SolveReport::from_json(&json).unwrap();
        assert_eq!(back.bounds, r.bounds);
        assert_eq!(back.point, r.point);
    }

    #[test]
    fn deterministic_optimum_violates_active_limits_often() {
        let case = parse_case_text(CASE14).unwrap();
        let sc = plants(1000, 10);
        let chance = ChanceSpec::uniform(0.05, 0.56).unwrap();
        let b = BoundsState::initial(&case, &chance, false).unwrap();
        let nlp = build_deterministic(&case, &b, None, &CalibrationParams::default(), &sc.plant_buses, &sc.mean()).unwrap();
        let det = solve_deterministic(&nlp, &OperatingPoint::base_case(&case), &IpmOptions::default()).unwrap();
        let r = empirical_violation(&case, &det.point, &sc, &chance, false).unwrap();
        assert!(r.max_probability > chance.eps_q, "{}", r.max_probability);
    }

    #[test]
    fn thread_count_does_not_change_the_report() {
        let case = parse_case_text(CASE14).unwrap();
        let sc = plants(600, 6);
        let chance = ChanceSpec::uniform(0.05, 0.56).unwrap();
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            let mut r = pool.install(|| iterate(&case, &sc, &chance, None, &iterate_opts(), None)).unwrap();
            r.timing = Timing::default();
            r
        };
        assert_eq!(run(1), run(4));
    }

    #[test]
    fn iteration_cap_is_reported() {
        let case = parse_case_text(CASE14).unwrap();
        let sc = plants(600, 7);
        let chance = ChanceSpec::uniform(0.05, 0.56).unwrap();
        let opts = IterateOptions {
            k_max: 1,
            margin_tol: 1e-14,
            ..iterate_opts()
        };
        let err = iterate(&case, &sc, &chance, None, &opts, None).unwrap_err();
        assert!(matches!(err, Error::NotConverged { k_max: 1, .. }), "{err}");
        assert_eq!(err.kind(), crate::error::ErrorKind::Numerical);
    }

    #[test]
    fn narrow_limits_at_tiny_epsilon_cross() {
        let mut case = parse_case_text(CASE14).unwrap();
        case.generators[0].q_max = 0.02;
        let sc = plants(600, 8);
        let chance = ChanceSpec::uniform(1e-9, 0.56).unwrap();
        let err = iterate(&case, &sc, &chance, None, &iterate_opts(), None).unwrap_err();
        assert_eq!(err.kind(), crate::error::ErrorKind::Infeasible, "{err}");
    }

    #[test]
    fn stability_constrained_loop_controls_the_index() {
        let case = parse_case_text(CASE14).unwrap();
        let sc = plants(1000, 9);
        let chance = ChanceSpec::uniform(0.05, 0.56).unwrap();
        let s = small_surrogate();
        let opts = IterateOptions {
            calibration: CalibrationParams {
                rho: 0.0,
                delta: None,
                enabled: true,
            },
            ..IterateOptions::default()
        };
        let r = iterate(&case, &sc, &chance, Some(s), &opts, None).unwrap();
        assert!(r.stability_enabled);
        assert!(r.stability_risk.apce <= chance.eps_sigma, "{:?}", r.stability_risk);
        assert!(r.calibration.delta.unwrap() >= 0.0);
        let mut out = Vec::new();
        write_distribution_csv(&r.apce, &sc, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text.lines().count(), 1 + sc.n_samples());
        assert!(text.lines().next().unwrap().contains("stability index"));

        let err = iterate(&case, &sc, &chance, None, &opts, None).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
    }
}
