//! The deterministic VSC-OPF at the expected plant output.
//!
//! Variables are `x = [θ (non-reference buses), v, p_g, q_g]`, all in
//! per-unit, with the reference angle fixed at zero.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::ipm::{self, Evaluation, IpmOptions, KktResidual, Nlp};
use super::{BoundsState, CalibrationParams, Quantity};
use crate::error::{Error, Result};
use crate::netmodel::NetworkCase;
use crate::powerflow::{Grid, OperatingPoint, PfOptions};
use crate::surrogate::{eval_with_derivatives, ReducedSurrogate};

/// One side of a box on a single variable.
#[derive(Debug, Clone)]
struct BoxRow {
    var: usize,
    upper: bool,
    bound: f64,
    label: String,
}

#[derive(Debug, Clone)]
struct CurrentRow {
    branch: usize,
    limit_sq: f64,
    label: String,
}

/// The NLP handed to the interior-point solver.
#[derive(Clone)]
pub struct NlpProblem<'a> {
    grid: Grid,
    /// Active and reactive demand net of the expected plant output, per bus.
    p_demand: Vec<f64>,
    q_demand: Vec<f64>,
    boxes: Vec<BoxRow>,
    currents: Vec<CurrentRow>,
    stability: Option<(&'a ReducedSurrogate, f64)>,
    bus_labels: Vec<u32>,
}

/// Solution of one deterministic solve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeterministicSolution {
    pub point: OperatingPoint,
    pub cost: f64,
    pub v: Vec<f64>,
    pub theta: Vec<f64>,
    pub p_g: Vec<f64>,
    pub q_g: Vec<f64>,
    /// Surrogate stability index at the solution, when constrained.
    pub sigma_hat: Option<f64>,
    pub ipm_iterations: usize,
    pub kkt: KktResidual,
}

/// Builds the NLP for the current bounds. `expected_xi` gives the plant
/// buses and their expected output in per-unit.
pub fn build_deterministic<'a>(
    case: &NetworkCase,
    bounds: &BoundsState,
    surrogate: Option<&'a ReducedSurrogate>,
    calib: &CalibrationParams,
    plant_buses: &[u32],
    expected_xi: &[f64],
) -> Result<NlpProblem<'a>> {
    let grid = Grid::new(case)?;
    let n = grid.n();
    let ng = case.generators.len();
    if plant_buses.len() != expected_xi.len() {
        return Err(Error::Dimension {
            what: "expected plant output",
            expected: plant_buses.len(),
            got: expected_xi.len(),
        });
    }
    let mut p_demand: Vec<f64> = case.buses.iter().map(|b| b.p_load).collect();
    let q_demand = case.buses.iter().map(|b| b.q_load).collect();
    for (&id, &x) in plant_buses.iter().zip(expected_xi) {
        p_demand[case.bus_index(id)?] -= x;
    }

    let lay = Layout::new(n, ng);
    let mut lo = vec![f64::NEG_INFINITY; lay.dim];
    let mut hi = vec![f64::INFINITY; lay.dim];
    for (i, bus) in case.buses.iter().enumerate() {
        lo[lay.v + i] = bus.v_min;
        hi[lay.v + i] = bus.v_max;
    }
    for (g, gen) in case.generators.iter().enumerate() {
        lo[lay.p + g] = gen.p_min;
        hi[lay.p + g] = gen.p_max;
        lo[lay.q + g] = gen.q_min;
        hi[lay.q + g] = gen.q_max;
    }
    let mut currents = Vec::new();
    let mut stability = None;
    for e in &bounds.entries {
        let var = match e.quantity {
            Quantity::ActivePower { gen } => Some(lay.p + gen),
            Quantity::ReactivePower { gen } => Some(lay.q + gen),
            Quantity::Voltage { bus } => Some(lay.v + bus),
            Quantity::Current { branch } => {
                if branch >= case.branches.len() {
                    return Err(Error::InvalidArgument(format!("bound {} refers to no branch", e.label)));
                }
                if e.max.is_finite() {
                    currents.push(CurrentRow {
                        branch,
                        limit_sq: e.max.max(0.0).powi(2),
                        label: format!("{} max", e.label),
                    });
                }
                None
            }
            Quantity::Stability => {
                let Some(s) = surrogate else {
                    return Err(Error::InvalidArgument(
                        "stability constraint requested without a surrogate".into(),
                    ));
                };
                if s.input_dim() != grid.state_len() {
                    return Err(Error::Dimension {
                        what: "surrogate input vs network state",
                        expected: grid.state_len(),
                        got: s.input_dim(),
                    });
                }
                let rho = if calib.enabled { calib.rho } else { 0.0 };
                stability = Some((s, e.min + rho));
                None
            }
        };
        if let Some(k) = var {
            let in_range = match e.quantity {
                Quantity::ActivePower { gen } | Quantity::ReactivePower { gen } => gen < ng,
                Quantity::Voltage { bus } => bus < n,
                _ => true,
            };
            if !in_range {
                return Err(Error::InvalidArgument(format!("bound {} refers to no variable", e.label)));
            }
            lo[k] = e.min;
            hi[k] = e.max;
        }
    }

    let bus_labels: Vec<u32> = case.buses.iter().map(|b| b.id).collect();
    let mut boxes = Vec::new();
    for k in 0..lay.dim {
        let name = lay.name(k, &bus_labels, grid.non_ref());
        if lo[k].is_finite() {
            boxes.push(BoxRow {
                var: k,
                upper: false,
                bound: lo[k],
                label: format!("{name} min"),
            });
        }
        if hi[k].is_finite() {
            boxes.push(BoxRow {
                var: k,
                upper: true,
                bound: hi[k],
                label: format!("{name} max"),
            });
        }
    }

    Ok(NlpProblem {
        grid,
        p_demand,
        q_demand,
        boxes,
        currents,
        stability,
        bus_labels,
    })
}

#[derive(Debug, Clone, Copy)]
struct Layout {
    n: usize,
    v: usize,
    p: usize,
    q: usize,
    dim: usize,
}

impl Layout {
    fn new(n: usize, ng: usize) -> Self {
        let v = n - 1;
        let p = v + n;
        let q = p + ng;
        Layout { n, v, p, q, dim: q + ng }
    }

    fn name(&self, k: usize, ids: &[u32], non_ref: &[usize]) -> String {
        if k < self.v {
            format!("theta at bus {}", ids[non_ref[k]])
        } else if k < self.p {
            format!("v at bus {}", ids[k - self.v])
        } else if k < self.q {
            format!("p_g of generator {}", k - self.p)
        } else {
            format!("q_g of generator {}", k - self.q)
        }
    }
}

impl NlpProblem<'_> {
    fn layout(&self) -> Layout {
        Layout::new(self.grid.n(), self.grid.gen_bus().len())
    }

    /// Bus voltages and angles (reference angle zero) from `x`.
    fn state(&self, x: &DVector<f64>) -> (Vec<f64>, Vec<f64>) {
        let lay = self.layout();
        let v = x.rows(lay.v, lay.n).iter().copied().collect();
        let mut th = vec![0.0; lay.n];
        for (k, &i) in self.grid.non_ref().iter().enumerate() {
            th[i] = x[k];
        }
        (v, th)
    }

    /// Position in `x` of the state entry `z_k` used by the surrogate.
    fn z_to_x(&self, k: usize) -> usize {
        let lay = self.layout();
        if k < lay.n {
            lay.v + k
        } else {
            k - lay.n
        }
    }

    fn z_vector(&self, x: &DVector<f64>) -> Vec<f64> {
        let lay = self.layout();
        (0..2 * lay.n - 1).map(|k| x[self.z_to_x(k)]).collect()
    }

    /// Angle variable index of bus `i`, `None` at the reference.
    fn theta_var(&self, i: usize) -> Option<usize> {
        let r = self.grid.reference();
        match i.cmp(&r) {
            std::cmp::Ordering::Less => Some(i),
            std::cmp::Ordering::Equal => None,
            std::cmp::Ordering::Greater => Some(i - 1),
        }
    }

    pub fn n_variables(&self) -> usize {
        self.layout().dim
    }

    /// Stability threshold enforced on the surrogate, if any.
    pub fn stability_threshold(&self) -> Option<f64> {
        self.stability.map(|s| s.1)
    }

    /// Initial point from a power flow at the expected plant output with the
    /// given controls, clipped into the variable boxes.
    fn initial_point(&self, init: &OperatingPoint) -> Result<DVector<f64>> {
        let lay = self.layout();
        let case = self.grid.case();
        let ng = case.generators.len();
        if init.p_g.len() != ng || init.v_set.len() != self.grid.control().len() {
            return Err(Error::Dimension {
                what: "initial operating point",
                expected: ng + self.grid.control().len(),
                got: init.p_g.len() + init.v_set.len(),
            });
        }
        let mut inj = self.grid.injections(init, &[], &[])?;
        for i in 0..lay.n {
            inj.p[i] = -self.p_demand[i] + self.sched_at(init, i);
            inj.q[i] = -self.q_demand[i];
        }
        let mut x = DVector::zeros(lay.dim);
        match self.grid.solve(&inj, None, &PfOptions::default()) {
            Ok(sol) if sol.converged => {
                for i in 0..lay.n {
                    x[lay.v + i] = sol.v[i];
                    if let Some(k) = self.theta_var(i) {
                        x[k] = sol.theta[i];
                    }
                }
                for g in 0..ng {
                    x[lay.p + g] = sol.p_gen[g];
                    x[lay.q + g] = sol.q_gen[g];
                }
            }
            _ => {
                log::debug!("initial power flow failed; starting from a flat state");
                for i in 0..lay.n {
                    x[lay.v + i] = inj.v_set[i];
                }
                for g in 0..ng {
                    x[lay.p + g] = init.p_g[g];
                }
            }
        }
        for b in &self.boxes {
            x[b.var] = if b.upper { x[b.var].min(b.bound) } else { x[b.var].max(b.bound) };
        }
        Ok(x)
    }

    fn sched_at(&self, op: &OperatingPoint, bus: usize) -> f64 {
        self.grid
            .gen_bus()
            .iter()
            .zip(&op.p_g)
            .filter(|(&b, _)| b == bus)
            .map(|(_, &p)| p)
            .sum()
    }

    fn current_terms(&self, th: &[f64], branch: usize) -> CurrentTerms {
        let (f, t) = self.grid.branch_ends()[branch];
        let y = &self.grid.branch_admittance()[branch];
        let a = y.yff.norm_sqr();
        let b = y.yft.norm_sqr();
        let c = y.yff * y.yft.conj();
        let (s, co) = (th[f] - th[t]).sin_cos();
        CurrentTerms {
            f,
            t,
            a,
            b,
            phi: c.re * co - c.im * s,
            dphi: -c.re * s - c.im * co,
        }
    }
}

struct CurrentTerms {
    f: usize,
    t: usize,
    a: f64,
    b: f64,
    phi: f64,
    dphi: f64,
}

impl Nlp for NlpProblem<'_> {
    fn dim(&self) -> usize {
        self.layout().dim
    }

    fn evaluate(&self, x: &DVector<f64>) -> Result<Evaluation> {
        let lay = self.layout();
        let case = self.grid.case();
        let ng = case.generators.len();
        let base = case.base_mva;
        let (v, th) = self.state(x);

        let mut f = 0.0;
        let mut df = DVector::zeros(lay.dim);
        for (g, c) in case.costs.iter().enumerate() {
            let pmw = base * x[lay.p + g];
            f += c.eval(pmw);
            df[lay.p + g] = base * c.derivative(pmw);
        }

        let n = lay.n;
        let (p, q) = self.grid.power_injections(&v, &th);
        let d = self.grid.partials(&v, &th);
        let mut g = DVector::zeros(2 * n);
        let mut dg = DMatrix::zeros(2 * n, lay.dim);
        for i in 0..n {
            g[i] = p[i] + self.p_demand[i];
            g[n + i] = q[i] + self.q_demand[i];
            for j in 0..n {
                if let Some(k) = self.theta_var(j) {
                    dg[(i, k)] = d.dp_dth[(i, j)];
                    dg[(n + i, k)] = d.dq_dth[(i, j)];
                }
                dg[(i, lay.v + j)] = d.dp_dv[(i, j)];
                dg[(n + i, lay.v + j)] = d.dq_dv[(i, j)];
            }
        }
        for (k, &bus) in self.grid.gen_bus().iter().enumerate().take(ng) {
            g[bus] -= x[lay.p + k];
            g[n + bus] -= x[lay.q + k];
            dg[(bus, lay.p + k)] = -1.0;
            dg[(n + bus, lay.q + k)] = -1.0;
        }

        let niq = self.boxes.len() + self.currents.len() + usize::from(self.stability.is_some());
        let mut h = DVector::zeros(niq);
        let mut dh = DMatrix::zeros(niq, lay.dim);
        let mut r = 0;
        for b in &self.boxes {
            if b.upper {
                h[r] = x[b.var] - b.bound;
                dh[(r, b.var)] = 1.0;
            } else {
                h[r] = b.bound - x[b.var];
                dh[(r, b.var)] = -1.0;
            }
            r += 1;
        }
        for c in &self.currents {
            let t = self.current_terms(&th, c.branch);
            let (vf, vt) = (v[t.f], v[t.t]);
            h[r] = t.a * vf * vf + t.b * vt * vt + 2.0 * vf * vt * t.phi - c.limit_sq;
            dh[(r, lay.v + t.f)] += 2.0 * t.a * vf + 2.0 * vt * t.phi;
            dh[(r, lay.v + t.t)] += 2.0 * t.b * vt + 2.0 * vf * t.phi;
            if let Some(k) = self.theta_var(t.f) {
                dh[(r, k)] += 2.0 * vf * vt * t.dphi;
            }
            if let Some(k) = self.theta_var(t.t) {
                dh[(r, k)] -= 2.0 * vf * vt * t.dphi;
            }
            r += 1;
        }
        if let Some((s, threshold)) = self.stability {
            let d = eval_with_derivatives(s, &self.z_vector(x))?;
            h[r] = threshold - d.value;
            for (k, &gk) in d.gradient.iter().enumerate() {
                dh[(r, self.z_to_x(k))] = -gk;
            }
        }
        Ok(Evaluation { f, df, g, dg, h, dh })
    }

    fn lagrangian_hessian(&self, x: &DVector<f64>, lam: &DVector<f64>, mu: &DVector<f64>) -> Result<DMatrix<f64>> {
        let lay = self.layout();
        let case = self.grid.case();
        let base = case.base_mva;
        let n = lay.n;
        let (v, th) = self.state(x);
        let mut hess = DMatrix::zeros(lay.dim, lay.dim);

        for (g, c) in case.costs.iter().enumerate() {
            hess[(lay.p + g, lay.p + g)] = 2.0 * c.c2 * base * base;
        }

        // Second derivatives of Σ λ_i P_i + μ_i Q_i.
        for &(i, j, gij, bij) in self.grid.admittance().entries() {
            let (li, mi) = (lam[i], lam[n + i]);
            let vi = lay.v + i;
            if i == j {
                hess[(vi, vi)] += 2.0 * (li * gij - mi * bij);
                continue;
            }
            let vj = lay.v + j;
            let (s, co) = (th[i] - th[j]).sin_cos();
            let f = li * (gij * co + bij * s) + mi * (gij * s - bij * co);
            let fp = li * (-gij * s + bij * co) + mi * (gij * co + bij * s);
            let fpp = -f;
            let vv = v[i] * v[j];
            hess[(vi, vj)] += f;
            hess[(vj, vi)] += f;
            let ti = self.theta_var(i);
            let tj = self.theta_var(j);
            if let Some(a) = ti {
                hess[(a, a)] += vv * fpp;
                add_sym(&mut hess, a, vi, v[j] * fp);
                add_sym(&mut hess, a, vj, v[i] * fp);
            }
            if let Some(b) = tj {
                hess[(b, b)] += vv * fpp;
                add_sym(&mut hess, b, vi, -v[j] * fp);
                add_sym(&mut hess, b, vj, -v[i] * fp);
            }
            if let (Some(a), Some(b)) = (ti, tj) {
                add_sym(&mut hess, a, b, -vv * fpp);
            }
        }

        let mut r = self.boxes.len();
        for c in &self.currents {
            let m = mu[r];
            r += 1;
            if m == 0.0 {
                continue;
            }
            let t = self.current_terms(&th, c.branch);
            let (vf, vt) = (v[t.f], v[t.t]);
            let (ivf, ivt) = (lay.v + t.f, lay.v + t.t);
            hess[(ivf, ivf)] += m * 2.0 * t.a;
            hess[(ivt, ivt)] += m * 2.0 * t.b;
            add_sym(&mut hess, ivf, ivt, m * 2.0 * t.phi);
            let ddphi = -t.phi;
            let tf = self.theta_var(t.f);
            let tt = self.theta_var(t.t);
            if let Some(a) = tf {
                hess[(a, a)] += m * 2.0 * vf * vt * ddphi;
                add_sym(&mut hess, a, ivf, m * 2.0 * vt * t.dphi);
                add_sym(&mut hess, a, ivt, m * 2.0 * vf * t.dphi);
            }
            if let Some(b) = tt {
                hess[(b, b)] += m * 2.0 * vf * vt * ddphi;
                add_sym(&mut hess, b, ivf, -m * 2.0 * vt * t.dphi);
                add_sym(&mut hess, b, ivt, -m * 2.0 * vf * t.dphi);
            }
            if let (Some(a), Some(b)) = (tf, tt) {
                add_sym(&mut hess, a, b, -m * 2.0 * vf * vt * ddphi);
            }
        }
        if let Some((s, _)) = self.stability {
            let m = mu[r];
            if m != 0.0 {
                let d = eval_with_derivatives(s, &self.z_vector(x))?;
                let dz = d.hessian.nrows();
                for a in 0..dz {
                    for b in 0..dz {
                        hess[(self.z_to_x(a), self.z_to_x(b))] -= m * d.hessian[(a, b)];
                    }
                }
            }
        }
        Ok(hess)
    }

    fn equality_label(&self, k: usize) -> String {
        let n = self.grid.n();
        if k < n {
            format!("active balance at bus {}", self.bus_labels[k])
        } else {
            format!("reactive balance at bus {}", self.bus_labels[k - n])
        }
    }

    fn inequality_label(&self, k: usize) -> String {
        let nb = self.boxes.len();
        let nc = self.currents.len();
        if k < nb {
            self.boxes[k].label.clone()
        } else if k < nb + nc {
            self.currents[k - nb].label.clone()
        } else {
            "stability index min".into()
        }
    }
}

fn add_sym(h: &mut DMatrix<f64>, a: usize, b: usize, v: f64) {
    h[(a, b)] += v;
    h[(b, a)] += v;
}

/// Solves the deterministic problem from the power flow at `init`. With a
/// stability row the problem is first solved without it, and the full
/// problem is started from that optimum: far from the data the surrogate
/// flattens out and gives the solver nothing to recover feasibility with.
pub fn solve_deterministic(problem: &NlpProblem<'_>, init: &OperatingPoint, opts: &IpmOptions) -> Result<DeterministicSolution> {
    let x0 = problem.initial_point(init)?;
    let sol = match problem.stability {
        None => ipm::solve(problem, &x0, opts)?,
        Some(_) => {
            let plain = NlpProblem {
                stability: None,
                ..problem.clone()
            };
            let staged = ipm::solve(&plain, &x0, opts).and_then(|first| ipm::solve(problem, &first.x, opts));
            match staged {
                Ok(sol) => sol,
                Err(e) => {
                    log::debug!("staged solve failed ({e}); retrying from the power flow point");
                    ipm::solve(problem, &x0, opts).map_err(|_| e)?
                }
            }
        }
    };
    let lay = problem.layout();
    let x = &sol.x;
    let (v, theta) = problem.state(x);
    let ng = problem.grid.gen_bus().len();
    let p_g: Vec<f64> = (0..ng).map(|g| x[lay.p + g]).collect();
    let q_g: Vec<f64> = (0..ng).map(|g| x[lay.q + g]).collect();
    let v_set = problem.grid.control().iter().map(|&i| v[i]).collect();
    let sigma_hat = match problem.stability {
        Some((s, _)) => Some(s.predict(&problem.z_vector(x))?),
        None => None,
    };
    Ok(DeterministicSolution {
        point: OperatingPoint { p_g: p_g.clone(), v_set },
        cost: sol.f,
        v,
        theta,
        p_g,
        q_g,
        sigma_hat,
        ipm_iterations: sol.iterations,
        kkt: sol.kkt,
    })
}
