use nalgebra::{Complex, DMatrix};

use super::{BranchRecord, NetworkCase};
use crate::error::{Error, Result};

type C64 = Complex<f64>;

/// Two-port admittances of a single branch (pi model, real tap at the
/// from end).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BranchAdmittance {
    pub yff: C64,
    pub yft: C64,
    pub ytf: C64,
    pub ytt: C64,
}

impl BranchAdmittance {
    pub fn of(branch: &BranchRecord) -> Self {
        let ys = C64::new(1.0, 0.0) / C64::new(branch.r, branch.x);
        let ytt = ys + C64::new(0.0, branch.b / 2.0);
        let t = branch.tap;
        BranchAdmittance {
            yff: ytt / (t * t),
            yft: -ys / t,
            ytf: -ys / t,
            ytt,
        }
    }
}

/// Bus admittance matrix `G + jB` in internal bus order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdmittanceMatrix {
    pub g: DMatrix<f64>,
    pub b: DMatrix<f64>,
    /// Structurally nonzero entries `(i, j, G_ij, B_ij)`, row-major.
    entries: Vec<(usize, usize, f64, f64)>,
}

impl AdmittanceMatrix {
    pub fn dim(&self) -> usize {
        self.g.nrows()
    }

    pub fn entries(&self) -> &[(usize, usize, f64, f64)] {
        &self.entries
    }
}

/// Standard bus admittance construction from branch impedances, taps,
/// line charging and bus shunts.
pub fn build_admittance(case: &NetworkCase) -> Result<AdmittanceMatrix> {
    let n = case.n_buses();
    let lookup = case.bus_lookup();
    let mut g = DMatrix::zeros(n, n);
    let mut b = DMatrix::zeros(n, n);
    let mut pattern = DMatrix::from_element(n, n, false);

    let mut add = |i: usize, j: usize, y: C64| {
        g[(i, j)] += y.re;
        b[(i, j)] += y.im;
        pattern[(i, j)] = true;
    };

    for (i, bus) in case.buses.iter().enumerate() {
        add(i, i, C64::new(bus.g_shunt, bus.b_shunt));
    }
    for br in &case.branches {
        let f = *lookup.get(&br.from_bus).ok_or(Error::UnknownBus(br.from_bus))?;
        let t = *lookup.get(&br.to_bus).ok_or(Error::UnknownBus(br.to_bus))?;
        let y = BranchAdmittance::of(br);
        add(f, f, y.yff);
        add(f, t, y.yft);
        add(t, f, y.ytf);
        add(t, t, y.ytt);
    }

    let mut entries = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if pattern[(i, j)] {
                entries.push((i, j, g[(i, j)], b[(i, j)]));
            }
        }
    }
    Ok(AdmittanceMatrix { g, b, entries })
}
