//! Polar AC power flow: Newton–Raphson solve, Jacobian, the minimum
//! singular value stability index and branch currents.
//!
//! The state vector `z` used by the surrogate is `[v_1..v_N, θ_k (k ≠ ref)]`
//! in internal bus order, see [`Grid::state_vector`].

mod jacobian;

use std::io::Write;

use nalgebra::{Complex, DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use jacobian::{
    assemble_jacobian, min_singular_value, vsi_msv, ColLabel, Partials, PfJacobian, RowLabel,
};

use crate::error::{Error, Result};
use crate::netmodel::{build_admittance, AdmittanceMatrix, BranchAdmittance, NetworkCase};

/// Controllable quantities `y`: active output of every generator and the
/// voltage setpoint of every PV/reference bus (ascending internal order,
/// matching [`NetworkCase::control_buses`]).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub p_g: Vec<f64>,
    pub v_set: Vec<f64>,
}

impl OperatingPoint {
    /// Dispatch and setpoints as stored in the case.
    pub fn base_case(case: &NetworkCase) -> Self {
        let p_g = case.generators.iter().map(|g| g.p_set).collect();
        let v_set = case
            .control_buses()
            .iter()
            .map(|&i| {
                let id = case.buses[i].id;
                case.generators
                    .iter()
                    .find(|g| g.bus == id)
                    .map_or(1.0, |g| g.v_setpoint)
            })
            .collect();
        OperatingPoint { p_g, v_set }
    }
}

/// Specified net injections plus the data the solver needs to pin PV
/// magnitudes and report generator outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct InjectionVector {
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    /// Magnitude setpoint per bus; only PV and reference entries are used.
    pub v_set: Vec<f64>,
    /// Scheduled active output per generator (already included in `p`).
    pub p_gen_sched: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerFlowSolution {
    pub v: Vec<f64>,
    pub theta: Vec<f64>,
    pub p_gen: Vec<f64>,
    pub q_gen: Vec<f64>,
    /// Computed net injection per bus.
    pub p_bus: Vec<f64>,
    pub q_bus: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub residual: f64,
}

impl PowerFlowSolution {
    /// Flat state (v = 1, θ = 0) with no generator information.
    pub fn flat(case: &NetworkCase) -> Self {
        let n = case.n_buses();
        PowerFlowSolution {
            v: vec![1.0; n],
            theta: vec![0.0; n],
            p_gen: vec![0.0; case.generators.len()],
            q_gen: vec![0.0; case.generators.len()],
            p_bus: vec![0.0; n],
            q_bus: vec![0.0; n],
            converged: false,
            iterations: 0,
            residual: f64::NAN,
        }
    }

    /// Writes `bus_id,v,theta,p,q` rows.
    pub fn write_csv<W: Write>(&self, case: &NetworkCase, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["bus_id", "v", "theta", "p", "q"])?;
        for (i, b) in case.buses.iter().enumerate() {
            w.write_record(&[
                b.id.to_string(),
                self.v[i].to_string(),
                self.theta[i].to_string(),
                self.p_bus[i].to_string(),
                self.q_bus[i].to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// How the active imbalance is shared among generators.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlackPolicy {
    /// The reference bus absorbs all imbalance.
    #[default]
    Reference,
    /// Imbalance shared in proportion to per-generator participation weights.
    Distributed(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PfOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub slack: SlackPolicy,
}

impl Default for PfOptions {
    fn default() -> Self {
        PfOptions {
            tol: 1e-8,
            max_iter: 30,
            slack: SlackPolicy::Reference,
        }
    }
}

/// A case compiled for repeated power flow work: admittance matrix, bus
/// classes and generator locations.
#[derive(Debug, Clone)]
pub struct Grid {
    case: NetworkCase,
    y: AdmittanceMatrix,
    reference: usize,
    non_ref: Vec<usize>,
    pq: Vec<usize>,
    control: Vec<usize>,
    gen_bus: Vec<usize>,
    branch_ends: Vec<(usize, usize)>,
    branch_y: Vec<BranchAdmittance>,
}

impl Grid {
    pub fn new(case: &NetworkCase) -> Result<Self> {
        let y = build_admittance(case)?;
        let reference = case.ref_bus().ok_or_else(|| {
            Error::InvalidCase(vec![crate::netmodel::Diagnostic::NoReferenceBus])
        })?;
        let lookup = case.bus_lookup();
        let gen_bus = case
            .generators
            .iter()
            .map(|g| lookup.get(&g.bus).copied().ok_or(Error::UnknownBus(g.bus)))
            .collect::<Result<_>>()?;
        let branch_ends = case
            .branches
            .iter()
            .map(|b| (lookup[&b.from_bus], lookup[&b.to_bus]))
            .collect();
        Ok(Grid {
            y,
            reference,
            non_ref: (0..case.n_buses()).filter(|&i| i != reference).collect(),
            pq: case.pq_buses(),
            control: case.control_buses(),
            gen_bus,
            branch_ends,
            branch_y: case.branches.iter().map(BranchAdmittance::of).collect(),
            case: case.clone(),
        })
    }

    pub fn case(&self) -> &NetworkCase {
        &self.case
    }

    pub fn admittance(&self) -> &AdmittanceMatrix {
        &self.y
    }

    pub fn n(&self) -> usize {
        self.case.n_buses()
    }

    pub fn reference(&self) -> usize {
        self.reference
    }

    /// Non-reference buses, ascending.
    pub fn non_ref(&self) -> &[usize] {
        &self.non_ref
    }

    pub fn pq(&self) -> &[usize] {
        &self.pq
    }

    /// PV and reference buses, ascending.
    pub fn control(&self) -> &[usize] {
        &self.control
    }

    /// Internal bus index of each generator.
    pub fn gen_bus(&self) -> &[usize] {
        &self.gen_bus
    }

    pub fn branch_ends(&self) -> &[(usize, usize)] {
        &self.branch_ends
    }

    pub fn branch_admittance(&self) -> &[BranchAdmittance] {
        &self.branch_y
    }

    /// Length of the state vector `z`.
    pub fn state_len(&self) -> usize {
        2 * self.n() - 1
    }

    pub fn state_vector(&self, v: &[f64], th: &[f64]) -> Vec<f64> {
        let mut z = v.to_vec();
        z.extend(self.non_ref.iter().map(|&i| th[i] - th[self.reference]));
        z
    }

    /// Inverse of [`Grid::state_vector`], with θ_ref = 0.
    pub fn split_state(&self, z: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let n = self.n();
        let v = z[..n].to_vec();
        let mut th = vec![0.0; n];
        for (k, &i) in self.non_ref.iter().enumerate() {
            th[i] = z[n + k];
        }
        (v, th)
    }

    /// Computed bus injections `P_i, Q_i` for a state.
    pub fn power_injections(&self, v: &[f64], th: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let n = self.n();
        let mut p = vec![0.0; n];
        let mut q = vec![0.0; n];
        for &(i, j, g, b) in self.y.entries() {
            let (s, c) = (th[i] - th[j]).sin_cos();
            let vv = v[i] * v[j];
            p[i] += vv * (g * c + b * s);
            q[i] += vv * (g * s - b * c);
        }
        (p, q)
    }

    /// Complex current entering branch `k` at its from end.
    pub fn branch_current_complex(&self, v: &[f64], th: &[f64], k: usize) -> Complex<f64> {
        let (f, t) = self.branch_ends[k];
        let y = &self.branch_y[k];
        let vf = Complex::from_polar(v[f], th[f]);
        let vt = Complex::from_polar(v[t], th[t]);
        y.yff * vf + y.yft * vt
    }

    pub fn branch_current(&self, v: &[f64], th: &[f64], k: usize) -> f64 {
        self.branch_current_complex(v, th, k).norm()
    }

    pub fn injections(&self, op: &OperatingPoint, plant_buses: &[u32], xi: &[f64]) -> Result<InjectionVector> {
        let case = &self.case;
        let n = self.n();
        if op.p_g.len() != case.generators.len() {
            return Err(Error::Dimension {
                what: "generator dispatch",
                expected: case.generators.len(),
                got: op.p_g.len(),
            });
        }
        if op.v_set.len() != self.control.len() {
            return Err(Error::Dimension {
                what: "voltage setpoints",
                expected: self.control.len(),
                got: op.v_set.len(),
            });
        }
        if xi.len() != plant_buses.len() {
            return Err(Error::Dimension {
                what: "scenario vector",
                expected: plant_buses.len(),
                got: xi.len(),
            });
        }
        let mut p: Vec<f64> = case.buses.iter().map(|b| -b.p_load).collect();
        let q = case.buses.iter().map(|b| -b.q_load).collect();
        for (g, &pg) in op.p_g.iter().enumerate() {
            p[self.gen_bus[g]] += pg;
        }
        for (&id, &x) in plant_buses.iter().zip(xi) {
            p[case.bus_index(id)?] += x;
        }
        let mut v_set = vec![1.0; n];
        for (&i, &v) in self.control.iter().zip(&op.v_set) {
            v_set[i] = v;
        }
        Ok(InjectionVector {
            p,
            q,
            v_set,
            p_gen_sched: op.p_g.clone(),
        })
    }

    pub fn solve(
        &self,
        inj: &InjectionVector,
        start: Option<&PowerFlowSolution>,
        opts: &PfOptions,
    ) -> Result<PowerFlowSolution> {
        let n = self.n();
        for (what, len) in [("active injections", inj.p.len()), ("reactive injections", inj.q.len()), ("voltage setpoints", inj.v_set.len())] {
            if len != n {
                return Err(Error::Dimension { what, expected: n, got: len });
            }
        }
        let weights = self.slack_weights(&opts.slack)?;
        let (mut v, mut th) = match start {
            Some(s) => {
                let shift = s.theta[self.reference];
                (s.v.clone(), s.theta.iter().map(|t| t - shift).collect::<Vec<_>>())
            }
            None => (vec![1.0; n], vec![0.0; n]),
        };
        for &i in &self.control {
            v[i] = inj.v_set[i];
        }

        let nr = &self.non_ref;
        let pq = &self.pq;
        let p_rows: Vec<usize> = match &weights {
            Some(_) => nr.iter().copied().chain([self.reference]).collect(),
            None => nr.clone(),
        };
        let dim = p_rows.len() + pq.len();
        let mut lambda = 0.0;
        let mut iterations = 0;
        let mut converged = false;
        let mut residual;

        loop {
            let (p, q) = self.power_injections(&v, &th);
            let spec_p = |i: usize, lambda: f64| {
                inj.p[i] + weights.as_ref().map_or(0.0, |w| lambda * w.bus[i])
            };
            let f: Vec<f64> = p_rows
                .iter()
                .map(|&i| p[i] - spec_p(i, lambda))
                .chain(pq.iter().map(|&i| q[i] - inj.q[i]))
                .collect();
            residual = f.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
            if !residual.is_finite() {
                residual = f64::INFINITY;
                break;
            }
            if residual < opts.tol {
                converged = true;
                break;
            }
            if iterations >= opts.max_iter {
                break;
            }

            let d = self.partials(&v, &th);
            let mut jac = DMatrix::zeros(dim, dim);
            for (r, &i) in p_rows.iter().enumerate() {
                for (c, &j) in nr.iter().enumerate() {
                    jac[(r, c)] = d.dp_dth[(i, j)];
                }
                for (c, &j) in pq.iter().enumerate() {
                    jac[(r, nr.len() + c)] = d.dp_dv[(i, j)];
                }
                if let Some(w) = &weights {
                    jac[(r, dim - 1)] = -w.bus[i];
                }
            }
            for (r, &i) in pq.iter().enumerate() {
                for (c, &j) in nr.iter().enumerate() {
                    jac[(p_rows.len() + r, c)] = d.dq_dth[(i, j)];
                }
                for (c, &j) in pq.iter().enumerate() {
                    jac[(p_rows.len() + r, nr.len() + c)] = d.dq_dv[(i, j)];
                }
            }
            let rhs = -DVector::from_vec(f);
            let dx = jac
                .lu()
                .solve(&rhs)
                .filter(|x| x.iter().all(|e| e.is_finite()))
                .ok_or(Error::SingularJacobian {
                    iteration: iterations + 1,
                })?;
            for (c, &j) in nr.iter().enumerate() {
                th[j] += dx[c];
            }
            for (c, &j) in pq.iter().enumerate() {
                v[j] += dx[nr.len() + c];
            }
            if weights.is_some() {
                lambda += dx[dim - 1];
            }
            iterations += 1;
        }

        let (p_bus, q_bus) = self.power_injections(&v, &th);
        let ng = self.case.generators.len();
        let mut p_gen = inj.p_gen_sched.clone();
        let mut q_gen = vec![0.0; ng];
        match &weights {
            Some(w) => {
                for (g, pg) in p_gen.iter_mut().enumerate() {
                    *pg += lambda * w.gen[g];
                }
            }
            None => {
                let r = self.reference;
                let at_ref: Vec<usize> = (0..ng).filter(|&g| self.gen_bus[g] == r).collect();
                let share = (p_bus[r] - inj.p[r]) / at_ref.len().max(1) as f64;
                for g in at_ref {
                    p_gen[g] += share;
                }
            }
        }
        for &i in &self.control {
            let here: Vec<usize> = (0..ng).filter(|&g| self.gen_bus[g] == i).collect();
            let share = (q_bus[i] - inj.q[i]) / here.len().max(1) as f64;
            for g in here {
                q_gen[g] = share;
            }
        }
        Ok(PowerFlowSolution {
            v,
            theta: th,
            p_gen,
            q_gen,
            p_bus,
            q_bus,
            converged,
            iterations,
            residual,
        })
    }

    /// Solves many injection vectors in parallel, all from the same start.
    /// Results come back in input order.
    pub fn solve_batch(
        &self,
        injs: &[InjectionVector],
        start: Option<&PowerFlowSolution>,
        opts: &PfOptions,
    ) -> Vec<Result<PowerFlowSolution>> {
        injs.par_iter().map(|inj| self.solve(inj, start, opts)).collect()
    }

    fn slack_weights(&self, policy: &SlackPolicy) -> Result<Option<SlackWeights>> {
        let SlackPolicy::Distributed(w) = policy else {
            return Ok(None);
        };
        let ng = self.case.generators.len();
        if w.len() != ng {
            return Err(Error::Dimension {
                what: "participation weights",
                expected: ng,
                got: w.len(),
            });
        }
        let total: f64 = w.iter().sum();
        if w.iter().any(|&x| !(x >= 0.0)) || !(total > 0.0) {
            return Err(Error::InvalidArgument(
                "participation weights must be non-negative with a positive sum".into(),
            ));
        }
        let gen: Vec<f64> = w.iter().map(|x| x / total).collect();
        let mut bus = vec![0.0; self.n()];
        for (g, &x) in gen.iter().enumerate() {
            bus[self.gen_bus[g]] += x;
        }
        Ok(Some(SlackWeights { gen, bus }))
    }
}

struct SlackWeights {
    gen: Vec<f64>,
    bus: Vec<f64>,
}

/// Net bus injections for a dispatch and renewable outputs `xi` at
/// `plant_buses`. Renewables run at unity power factor.
pub fn injections_from_dispatch(
    case: &NetworkCase,
    dispatch: &OperatingPoint,
    plant_buses: &[u32],
    xi: &[f64],
) -> Result<InjectionVector> {
    Grid::new(case)?.injections(dispatch, plant_buses, xi)
}

/// Newton–Raphson power flow with default options (tolerance 1e-8, 30
/// iterations, reference-bus slack). Flat start when `start` is `None`.
pub fn solve_pf(
    case: &NetworkCase,
    injections: &InjectionVector,
    start: Option<&PowerFlowSolution>,
) -> Result<PowerFlowSolution> {
    Grid::new(case)?.solve(injections, start, &PfOptions::default())
}

/// Current magnitude at the from end of branch `branch`.
pub fn branch_current(case: &NetworkCase, state: &PowerFlowSolution, branch: usize) -> Result<f64> {
    if branch >= case.branches.len() {
        return Err(Error::InvalidArgument(format!("no branch {branch}")));
    }
    Ok(Grid::new(case)?.branch_current(&state.v, &state.theta, branch))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netmodel::{parse_case_text, to_matpower_text, CASE14, CASE30};
    use proptest::prelude::*;

    const TWO_BUS: &str = "\
mpc.baseMVA = 100;
mpc.bus = [ 1 3 0 0 0 0 1 1 0 0 1 1.1 0.9; 2 1 10 0 0 0 1 1 0 0 1 1.1 0.9 ];
mpc.gen = [ 1 0 0 100 -100 1.0 100 1 200 0 ];
mpc.branch = [ 1 2 0 0.1 0 0 0 0 0 0 1 ];
";

    fn base_solution(case: &NetworkCase) -> PowerFlowSolution {
        let op = OperatingPoint::base_case(case);
        let inj = injections_from_dispatch(case, &op, &[], &[]).unwrap();
        solve_pf(case, &inj, None).unwrap()
    }

    fn bisect(mut lo: f64, mut hi: f64, f: impl Fn(f64) -> f64) -> f64 {
        let flo = f(lo);
        assert!(flo * f(hi) <= 0.0, "bracket");
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if (f(mid) > 0.0) == (flo > 0.0) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn zero_xi_gives_dispatch_minus_load() {
        let case = parse_case_text(CASE14).unwrap();
        let op = OperatingPoint::base_case(&case);
        let inj = injections_from_dispatch(&case, &op, &[], &[]).unwrap();
        for (i, b) in case.buses.iter().enumerate() {
            let gen: f64 = case
                .generators
                .iter()
                .filter(|g| g.bus == b.id)
                .map(|g| g.p_set)
                .sum();
            assert!((inj.p[i] - (gen - b.p_load)).abs() < 1e-15);
            assert_eq!(inj.q[i], -b.q_load);
        }
    }

    #[test]
    fn plant_output_shifts_only_its_bus() {
        let case = parse_case_text(CASE14).unwrap();
        let op = OperatingPoint::base_case(&case);
        let base = injections_from_dispatch(&case, &op, &[9], &[0.0]).unwrap();
        let with = injections_from_dispatch(&case, &op, &[9], &[0.5]).unwrap();
        for i in 0..14 {
            let dp = with.p[i] - base.p[i];
            assert_eq!(dp, if i == 8 { 0.5 } else { 0.0 });
            assert_eq!(with.q[i], base.q[i]);
        }
        assert!(injections_from_dispatch(&case, &op, &[99], &[0.1]).is_err());
    }

    #[test]
    fn slack_only_network_is_exact_at_flat_start() {
        let text = "mpc.baseMVA = 100;\nmpc.bus = [ 1 3 0 0 0 0 1 1 0 0 1 1.1 0.9 ];\nmpc.gen = [ 1 0 0 10 -10 1.0 100 1 50 0 ];\n";
        let case = parse_case_text(text).unwrap();
        let sol = base_solution(&case);
        assert!(sol.converged);
        assert_eq!(sol.iterations, 0);
        assert_eq!((sol.v[0], sol.theta[0]), (1.0, 0.0));
    }

    #[test]
    fn two_bus_matches_bisection_oracle() {
        let case = parse_case_text(TWO_BUS).unwrap();
        let sol = base_solution(&case);
        assert!(sol.converged);

        // Q balance at bus 2 solved for v by bisection on the high-voltage
        // branch, then P balance solved for θ.
        let (b12, b22) = (10.0, -10.0);
        let q_at = |v: f64, th: f64| v * (-b12 * th.cos()) - b22 * v * v;
        let v_of = |th: f64| bisect(0.5, 1.5, |v| q_at(v, th));
        let p_at = |th: f64| {
            let v = v_of(th);
            v * b12 * th.sin() + 0.1
        };
        let th2 = bisect(-0.5, 0.0, p_at);
        let v2 = v_of(th2);
        assert!((sol.v[1] - v2).abs() < 1e-6, "{} vs {v2}", sol.v[1]);
        assert!((sol.theta[1] - th2).abs() < 1e-6);

        let v1 = Complex::from_polar(sol.v[0], sol.theta[0]);
        let v2c = Complex::from_polar(sol.v[1], sol.theta[1]);
        let by_hand = ((v1 - v2c) / Complex::new(0.0, 0.1)).norm();
        let i = branch_current(&case, &sol, 0).unwrap();
        assert!((i - by_hand).abs() < 1e-14);
    }

    #[test]
    fn case14_converges_quickly() {
        let case = parse_case_text(CASE14).unwrap();
        let sol = base_solution(&case);
        assert!(sol.converged);
        assert!(sol.iterations <= 10);
        assert!(sol.residual < 1e-8);
        assert_eq!(sol.theta[0], 0.0);
    }

    #[test]
    fn warm_start_converges_immediately() {
        let case = parse_case_text(CASE30).unwrap();
        let sol = base_solution(&case);
        let op = OperatingPoint::base_case(&case);
        let inj = injections_from_dispatch(&case, &op, &[], &[]).unwrap();
        let again = solve_pf(&case, &inj, Some(&sol)).unwrap();
        assert!(again.converged);
        assert!(again.iterations <= 1);
    }

    #[test]
    fn max_iter_limit_reports_non_convergence() {
        let case = parse_case_text(CASE14).unwrap();
        let grid = Grid::new(&case).unwrap();
        let op = OperatingPoint::base_case(&case);
        let inj = grid.injections(&op, &[], &[]).unwrap();
        let opts = PfOptions {
            max_iter: 1,
            ..PfOptions::default()
        };
        let sol = grid.solve(&inj, None, &opts).unwrap();
        assert!(!sol.converged);
        assert!(sol.residual > 1e-8);
    }

    #[test]
    fn reference_gen_absorbs_plant_output() {
        let case = parse_case_text(CASE14).unwrap();
        let grid = Grid::new(&case).unwrap();
        let op = OperatingPoint::base_case(&case);
        let a = grid.solve(&grid.injections(&op, &[], &[]).unwrap(), None, &PfOptions::default()).unwrap();
        let b = grid.solve(&grid.injections(&op, &[14], &[0.2]).unwrap(), None, &PfOptions::default()).unwrap();
        let drop = a.p_gen[0] - b.p_gen[0];
        assert!(drop > 0.15 && drop < 0.25, "{drop}");
        for g in 1..5 {
            assert_eq!(a.p_gen[g], b.p_gen[g]);
        }
    }

    #[test]
    fn distributed_slack_shares_by_weight() {
        let case = parse_case_text(CASE14).unwrap();
        let grid = Grid::new(&case).unwrap();
        let op = OperatingPoint::base_case(&case);
        let inj = grid.injections(&op, &[14], &[0.2]).unwrap();
        let opts = PfOptions {
            slack: SlackPolicy::Distributed(vec![1.0, 1.0, 0.0, 0.0, 2.0]),
            ..PfOptions::default()
        };
        let sol = grid.solve(&inj, None, &opts).unwrap();
        assert!(sol.converged);
        let d: Vec<f64> = sol.p_gen.iter().zip(&op.p_g).map(|(a, b)| a - b).collect();
        assert!((d[0] - d[1]).abs() < 1e-12);
        assert!((d[4] - 2.0 * d[0]).abs() < 1e-12);
        assert_eq!((d[2], d[3]), (0.0, 0.0));
        let (p_load, _) = case.total_load();
        let total_gen: f64 = sol.p_gen.iter().sum::<f64>() + 0.2;
        let losses: f64 = sol.p_bus.iter().sum();
        assert!((total_gen - p_load - losses).abs() < 1e-9);
    }

    #[test]
    fn per_unit_base_does_not_change_magnitudes() {
        let case = parse_case_text(CASE30).unwrap();
        let mut scaled = case.clone();
        scaled.base_mva = 2.0 * case.base_mva;
        for b in &mut scaled.buses {
            b.p_load /= 2.0;
            b.q_load /= 2.0;
            b.g_shunt /= 2.0;
            b.b_shunt /= 2.0;
        }
        for br in &mut scaled.branches {
            br.r *= 2.0;
            br.x *= 2.0;
            br.b /= 2.0;
            br.i_max = br.i_max.map(|i| i / 2.0);
        }
        for g in &mut scaled.generators {
            g.p_set /= 2.0;
            g.p_min /= 2.0;
            g.p_max /= 2.0;
            g.q_min /= 2.0;
            g.q_max /= 2.0;
        }
        let reparsed = parse_case_text(&to_matpower_text(&scaled)).unwrap();
        let a = base_solution(&case);
        let b = base_solution(&reparsed);
        for i in 0..case.n_buses() {
            assert!((a.v[i] - b.v[i]).abs() < 1e-10);
            assert!((a.theta[i] - b.theta[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn sigma_falls_along_load_ray() {
        let case = parse_case_text(CASE14).unwrap();
        let mut last = f64::INFINITY;
        let mut start: Option<PowerFlowSolution> = None;
        let mut steps = 0;
        for k in 0..200 {
            let mut c = case.clone();
            let factor = 1.0 + 0.05 * k as f64;
            c.scale_loads(factor);
            for g in &mut c.generators {
                g.p_set *= factor;
            }
            let grid = Grid::new(&c).unwrap();
            let inj = grid.injections(&OperatingPoint::base_case(&c), &[], &[]).unwrap();
            let Ok(sol) = grid.solve(&inj, start.as_ref(), &PfOptions::default()) else {
                break;
            };
            if !sol.converged {
                break;
            }
            let sigma = grid.vsi(&sol.v, &sol.theta);
            assert!(sigma <= last + 1e-4, "k={k}: {sigma} > {last}");
            last = sigma;
            start = Some(sol);
            steps += 1;
        }
        assert!(steps > 5);
        assert!(last < 0.3, "{last}");
    }

    #[test]
    fn csv_export_has_one_row_per_bus() {
        let case = parse_case_text(CASE14).unwrap();
        let sol = base_solution(&case);
        let mut buf = Vec::new();
        sol.write_csv(&case, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 15);
        assert!(text.starts_with("bus_id,v,theta,p,q"));
    }

    #[test]
    fn equal_voltages_give_zero_current() {
        let case = parse_case_text(TWO_BUS).unwrap();
        let mut sol = PowerFlowSolution::flat(&case);
        sol.theta = vec![0.3, 0.3];
        assert_eq!(branch_current(&case, &sol, 0).unwrap(), 0.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn global_angle_shift_is_invisible(shift in -3.0f64..3.0, seed in 0u64..1000) {
            use rand::{Rng, SeedableRng};
            let case = parse_case_text(CASE14).unwrap();
            let grid = Grid::new(&case).unwrap();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let v: Vec<f64> = (0..14).map(|_| rng.random_range(0.9..1.1)).collect();
            let th: Vec<f64> = (0..14).map(|_| rng.random_range(-0.3..0.3)).collect();
            let th2: Vec<f64> = th.iter().map(|t| t + shift).collect();
            let (p1, q1) = grid.power_injections(&v, &th);
            let (p2, q2) = grid.power_injections(&v, &th2);
            for i in 0..14 {
                prop_assert!((p1[i] - p2[i]).abs() < 1e-10);
                prop_assert!((q1[i] - q2[i]).abs() < 1e-10);
            }
            for k in 0..case.branches.len() {
                let a = grid.branch_current(&v, &th, k);
                let b = grid.branch_current(&v, &th2, k);
                prop_assert!((a - b).abs() < 1e-10);
            }
            let s1 = grid.vsi(&v, &th);
            let s2 = grid.vsi(&v, &th2);
            prop_assert!((s1 - s2).abs() < 1e-10);
        }
    }
}
