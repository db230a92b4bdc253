use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{Grid, PowerFlowSolution};
use crate::error::Result;
use crate::netmodel::NetworkCase;

/// Partial derivatives of the bus injections `P`, `Q` with respect to all
/// angles and magnitudes (N×N blocks, no rows or columns removed).
#[derive(Debug, Clone)]
pub struct Partials {
    pub dp_dth: DMatrix<f64>,
    pub dp_dv: DMatrix<f64>,
    pub dq_dth: DMatrix<f64>,
    pub dq_dv: DMatrix<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RowLabel {
    P(u32),
    Q(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ColLabel {
    Theta(u32),
    V(u32),
}

/// Reduced Newton–Raphson Jacobian: `P` rows and `θ` columns for every
/// non-reference bus, `Q` rows and `v` columns for PQ buses.
#[derive(Debug, Clone)]
pub struct PfJacobian {
    pub matrix: DMatrix<f64>,
    pub rows: Vec<RowLabel>,
    pub cols: Vec<ColLabel>,
}

impl Grid {
    pub fn partials(&self, v: &[f64], th: &[f64]) -> Partials {
        let n = self.n();
        let (p, q) = self.power_injections(v, th);
        let mut dp_dth = DMatrix::zeros(n, n);
        let mut dp_dv = DMatrix::zeros(n, n);
        let mut dq_dth = DMatrix::zeros(n, n);
        let mut dq_dv = DMatrix::zeros(n, n);
        for &(i, j, g, b) in self.admittance().entries() {
            if i == j {
                continue;
            }
            let (s, c) = (th[i] - th[j]).sin_cos();
            let a = g * c + b * s;
            let r = g * s - b * c;
            dp_dth[(i, j)] = v[i] * v[j] * r;
            dp_dv[(i, j)] = v[i] * a;
            dq_dth[(i, j)] = -v[i] * v[j] * a;
            dq_dv[(i, j)] = v[i] * r;
        }
        let y = self.admittance();
        for i in 0..n {
            let (gii, bii) = (y.g[(i, i)], y.b[(i, i)]);
            dp_dth[(i, i)] = -q[i] - bii * v[i] * v[i];
            dp_dv[(i, i)] = p[i] / v[i] + gii * v[i];
            dq_dth[(i, i)] = p[i] - gii * v[i] * v[i];
            dq_dv[(i, i)] = q[i] / v[i] - bii * v[i];
        }
        Partials {
            dp_dth,
            dp_dv,
            dq_dth,
            dq_dv,
        }
    }

    /// Reduced NR Jacobian at the given state.
    pub fn jacobian(&self, v: &[f64], th: &[f64]) -> PfJacobian {
        let d = self.partials(v, th);
        let nr = self.non_ref();
        let pq = self.pq();
        let dim = nr.len() + pq.len();
        let mut m = DMatrix::zeros(dim, dim);
        for (r, &i) in nr.iter().enumerate() {
            for (c, &j) in nr.iter().enumerate() {
                m[(r, c)] = d.dp_dth[(i, j)];
            }
            for (c, &j) in pq.iter().enumerate() {
                m[(r, nr.len() + c)] = d.dp_dv[(i, j)];
            }
        }
        for (r, &i) in pq.iter().enumerate() {
            for (c, &j) in nr.iter().enumerate() {
                m[(nr.len() + r, c)] = d.dq_dth[(i, j)];
            }
            for (c, &j) in pq.iter().enumerate() {
                m[(nr.len() + r, nr.len() + c)] = d.dq_dv[(i, j)];
            }
        }
        let id = |i: usize| self.case().buses[i].id;
        let rows = nr
            .iter()
            .map(|&i| RowLabel::P(id(i)))
            .chain(pq.iter().map(|&i| RowLabel::Q(id(i))))
            .collect();
        let cols = nr
            .iter()
            .map(|&i| ColLabel::Theta(id(i)))
            .chain(pq.iter().map(|&i| ColLabel::V(id(i))))
            .collect();
        PfJacobian {
            matrix: m,
            rows,
            cols,
        }
    }

    /// Minimum singular value of the reduced Jacobian at a state.
    pub fn vsi(&self, v: &[f64], th: &[f64]) -> f64 {
        min_singular_value(&self.jacobian(v, th).matrix)
    }
}

pub fn assemble_jacobian(case: &NetworkCase, state: &PowerFlowSolution) -> Result<PfJacobian> {
    Ok(Grid::new(case)?.jacobian(&state.v, &state.theta))
}

/// Voltage stability index: the smallest singular value of the Jacobian.
pub fn vsi_msv(jac: &PfJacobian) -> f64 {
    min_singular_value(&jac.matrix)
}

/// Smallest singular value; `+∞` for an empty matrix.
pub fn min_singular_value(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return f64::INFINITY;
    }
    m.clone()
        .svd(false, false)
        .singular_values
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}
