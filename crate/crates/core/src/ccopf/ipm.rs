//! Primal-dual interior-point method for
//! `min f(x)  s.t.  g(x) = 0,  h(x) ≤ 0`
//! with slacks on the inequalities, a fraction-to-boundary step rule and a
//! monotone barrier schedule. Dense linear algebra throughout.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Function values and first derivatives at one point. Jacobians have
/// one row per constraint.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub f: f64,
    pub df: DVector<f64>,
    pub g: DVector<f64>,
    pub dg: DMatrix<f64>,
    pub h: DVector<f64>,
    pub dh: DMatrix<f64>,
}

pub trait Nlp {
    fn dim(&self) -> usize;
    fn evaluate(&self, x: &DVector<f64>) -> Result<Evaluation>;
    /// Hessian of `f + λᵀg + μᵀh`.
    fn lagrangian_hessian(&self, x: &DVector<f64>, lam: &DVector<f64>, mu: &DVector<f64>) -> Result<DMatrix<f64>>;
    fn equality_label(&self, k: usize) -> String {
        format!("equality {k}")
    }
    fn inequality_label(&self, k: usize) -> String {
        format!("inequality {k}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IpmOptions {
    pub feas_tol: f64,
    pub grad_tol: f64,
    pub comp_tol: f64,
    pub cost_tol: f64,
    pub max_iter: usize,
    /// Fraction-to-boundary factor.
    pub boundary_fraction: f64,
    /// Centering parameter of the barrier update.
    pub centering: f64,
    /// Initial slack value.
    pub z0: f64,
}

impl Default for IpmOptions {
    fn default() -> Self {
        IpmOptions {
            feas_tol: 1e-8,
            grad_tol: 1e-8,
            comp_tol: 1e-8,
            cost_tol: 1e-10,
            max_iter: 200,
            boundary_fraction: 0.99995,
            centering: 0.1,
            z0: 1.0,
        }
    }
}

/// Scaled optimality measures, all dimensionless.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KktResidual {
    pub feasibility: f64,
    pub stationarity: f64,
    pub complementarity: f64,
    pub cost_change: f64,
}

impl KktResidual {
    pub fn max(&self) -> f64 {
        self.feasibility.max(self.stationarity).max(self.complementarity)
    }
}

#[derive(Debug, Clone)]
pub struct IpmSolution {
    pub x: DVector<f64>,
    pub f: f64,
    pub lam: DVector<f64>,
    pub mu: DVector<f64>,
    pub z: DVector<f64>,
    pub iterations: usize,
    pub kkt: KktResidual,
    /// Largest diagonal shift used to correct the KKT inertia.
    pub max_regularization: f64,
}

struct Kkt {
    resid: KktResidual,
    lx: DVector<f64>,
}

fn kkt(ev: &Evaluation, x: &DVector<f64>, z: &DVector<f64>, lam: &DVector<f64>, mu: &DVector<f64>, f_prev: f64) -> Kkt {
    let lx = &ev.df + ev.dg.tr_mul(lam) + ev.dh.tr_mul(mu);
    let maxh = ev.h.iter().copied().fold(0.0, f64::max);
    let ginf = ev.g.amax();
    let xinf = x.amax();
    let zinf = if z.is_empty() { 0.0 } else { z.amax() };
    let laminf = if lam.is_empty() { 0.0 } else { lam.amax() };
    let muinf = if mu.is_empty() { 0.0 } else { mu.amax() };
    Kkt {
        resid: KktResidual {
            feasibility: ginf.max(maxh) / (1.0 + xinf.max(zinf)),
            stationarity: lx.amax() / (1.0 + laminf.max(muinf)),
            complementarity: z.dot(mu) / (1.0 + xinf),
            cost_change: (ev.f - f_prev).abs() / (1.0 + f_prev.abs()),
        },
        lx,
    }
}

/// Orthonormal basis of the null space of the `neq × n` matrix `a`, taken
/// as the `n − neq` eigenvectors of `aᵀa` with the smallest eigenvalues,
/// and whether `a` has full row rank.
fn null_space(a: &DMatrix<f64>, n: usize) -> (DMatrix<f64>, bool) {
    let neq = a.nrows();
    if neq == 0 {
        return (DMatrix::identity(n, n), true);
    }
    let dimz = n.saturating_sub(neq);
    let eig = a.tr_mul(a).symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let top = eig.eigenvalues.max().max(f64::MIN_POSITIVE);
    let full_rank = neq <= n && eig.eigenvalues[order[dimz]] > 1e-14 * top;
    let basis = DMatrix::from_fn(n, dimz, |r, c| eig.eigenvectors[(r, order[c])]);
    (basis, full_rank)
}

fn most_violated<P: Nlp + ?Sized>(problem: &P, ev: &Evaluation) -> (String, f64) {
    let mut worst = (String::from("none"), 0.0);
    for (k, &g) in ev.g.iter().enumerate() {
        if g.abs() > worst.1 {
            worst = (problem.equality_label(k), g.abs());
        }
    }
    for (k, &h) in ev.h.iter().enumerate() {
        if h > worst.1 {
            worst = (problem.inequality_label(k), h);
        }
    }
    worst
}

pub fn solve<P: Nlp + ?Sized>(problem: &P, x0: &DVector<f64>, opts: &IpmOptions) -> Result<IpmSolution> {
    let n = problem.dim();
    if x0.len() != n {
        return Err(Error::Dimension {
            what: "initial point",
            expected: n,
            got: x0.len(),
        });
    }
    let mut x = x0.clone();
    let mut ev = problem.evaluate(&x)?;
    let (neq, niq) = (ev.g.len(), ev.h.len());

    let mut z = DVector::from_element(niq, opts.z0);
    for k in 0..niq {
        if ev.h[k] < -opts.z0 {
            z[k] = -ev.h[k];
        }
    }
    let mut gamma = 1.0;
    let mut mu = DVector::from_fn(niq, |k, _| if gamma / z[k] > opts.z0 { gamma / z[k] } else { opts.z0 });
    let mut lam = DVector::zeros(neq);
    let mut f_prev = ev.f;
    let mut best_reg: f64 = 0.0;
    let mut last_reg: f64 = 0.0;

    let mut state = kkt(&ev, &x, &z, &lam, &mu, f_prev);
    let mut last_good = (x.clone(), ev.clone());
    for it in 0..=opts.max_iter {
        let r = state.resid;
        let done = r.feasibility < opts.feas_tol
            && r.stationarity < opts.grad_tol
            && r.complementarity < opts.comp_tol
            && (it > 0 && r.cost_change < opts.cost_tol || r.stationarity < opts.grad_tol * 1e-2);
        if done {
            return Ok(IpmSolution {
                f: ev.f,
                x,
                lam,
                mu,
                z,
                iterations: it,
                kkt: r,
                max_regularization: best_reg,
            });
        }
        if it == opts.max_iter {
            break;
        }
        log::trace!(
            "ipm {it}: f {:.8e} feas {:.2e} grad {:.2e} comp {:.2e}",
            ev.f,
            r.feasibility,
            r.stationarity,
            r.complementarity
        );

        let lxx = problem.lagrangian_hessian(&x, &lam, &mu)?;
        let zinv = z.map(|v| 1.0 / v);
        let w = mu.component_mul(&zinv);
        let dh_scaled = DMatrix::from_fn(niq, n, |r, c| ev.dh[(r, c)] * w[r]);
        let m = &lxx + ev.dh.tr_mul(&dh_scaled);
        let rhs_h = DVector::from_fn(niq, |k, _| (mu[k] * ev.h[k] + gamma) * zinv[k]);
        let nvec = &state.lx + ev.dh.tr_mul(&rhs_h);

        let dim = n + neq;
        let mut rhs = DVector::zeros(dim);
        rhs.rows_mut(0, n).copy_from(&(-&nvec));
        rhs.rows_mut(n, neq).copy_from(&(-&ev.g));

        // Regularize until the Hessian is positive definite on the null
        // space of the equality Jacobian, which gives the KKT matrix the
        // inertia (n, neq, 0) of a descent step.
        let (basis, full_rank) = null_space(&ev.dg, n);
        let reduced = basis.tr_mul(&m) * &basis;
        let reduced = (&reduced + reduced.transpose()) * 0.5;
        let mut shift = 0.0;
        let ok = loop {
            if reduced.iter().any(|v| !v.is_finite()) {
                break false;
            }
            let mut r = reduced.clone();
            for i in 0..r.nrows() {
                r[(i, i)] += shift;
            }
            if r.cholesky().is_some() {
                break true;
            }
            shift = if shift == 0.0 {
                if last_reg == 0.0 {
                    1e-4
                } else {
                    (last_reg / 3.0).max(1e-20)
                }
            } else {
                shift * 8.0
            };
            if shift > 1e20 {
                break false;
            }
        };
        if !ok {
            log::debug!("ipm {it}: KKT matrix could not be regularized");
            break;
        }
        let dc = if full_rank { 0.0 } else { 1e-8 };
        let mut kmat = DMatrix::zeros(dim, dim);
        kmat.view_mut((0, 0), (n, n)).copy_from(&m);
        for i in 0..n {
            kmat[(i, i)] += shift;
        }
        kmat.view_mut((0, n), (n, neq)).copy_from(&ev.dg.transpose());
        kmat.view_mut((n, 0), (neq, n)).copy_from(&ev.dg);
        for i in 0..neq {
            kmat[(n + i, n + i)] = -dc;
        }
        last_reg = shift;
        best_reg = best_reg.max(shift);

        let Some(step) = kmat.lu().solve(&rhs) else {
            break;
        };
        if step.iter().any(|v| !v.is_finite()) {
            break;
        }
        let dx = step.rows(0, n).into_owned();
        let dlam = step.rows(n, neq).into_owned();
        let dz = -&ev.h - &z - &ev.dh * &dx;
        let dmu = DVector::from_fn(niq, |k, _| -mu[k] + zinv[k] * (gamma - mu[k] * dz[k]));

        let ratio = |v: &DVector<f64>, dv: &DVector<f64>| {
            let mut a: f64 = 1.0;
            for k in 0..v.len() {
                if dv[k] < 0.0 {
                    a = a.min(opts.boundary_fraction * v[k] / -dv[k]);
                }
            }
            a
        };
        let alpha_p = ratio(&z, &dz);
        let alpha_d = ratio(&mu, &dmu);

        let x_new = &x + alpha_p * &dx;
        let ev_new = match problem.evaluate(&x_new) {
            Ok(e) if e.f.is_finite() && e.g.iter().chain(e.h.iter()).all(|v| v.is_finite()) => e,
            _ => break,
        };
        f_prev = ev.f;
        x = x_new;
        ev = ev_new;
        z += alpha_p * &dz;
        lam += alpha_d * &dlam;
        mu += alpha_d * &dmu;
        if niq > 0 {
            gamma = opts.centering * z.dot(&mu) / niq as f64;
        }
        state = kkt(&ev, &x, &z, &lam, &mu, f_prev);
        last_good = (x.clone(), ev.clone());
    }

    let (_, ev) = last_good;
    let (constraint, violation) = most_violated(problem, &ev);
    let xinf = x.amax();
    if violation / (1.0 + xinf) > opts.feas_tol.max(1e-6) {
        Err(Error::Restoration { constraint, violation })
    } else {
        Err(Error::MaxIterations {
            iterations: opts.max_iter,
            constraint,
            violation,
        })
    }
}
