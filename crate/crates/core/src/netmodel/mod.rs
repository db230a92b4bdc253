//! Static grid description: buses, branches, generators and cost curves.
//!
//! All electrical quantities are stored in per-unit on `base_mva`. Cost
//! curves stay in the MATPOWER convention ($/h as a polynomial in MW), so
//! evaluating them requires the base to convert dispatch back to MW.
//!
//! Bus ids are external labels; internal computations use the position of
//! the bus in [`NetworkCase::buses`]. See [`NetworkCase::bus_lookup`].

mod admittance;
mod matpower;
mod validate;

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use admittance::{build_admittance, AdmittanceMatrix, BranchAdmittance};
pub use matpower::{parse_case_text, parse_case_text_with_warnings, to_matpower_text};
pub use validate::{validate_case, Diagnostic};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BusType {
    PQ,
    PV,
    Ref,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BusRecord {
    pub id: u32,
    pub bus_type: BusType,
    pub p_load: f64,
    pub q_load: f64,
    /// Shunt conductance at 1 p.u. voltage.
    #[serde(default)]
    pub g_shunt: f64,
    /// Shunt susceptance at 1 p.u. voltage.
    #[serde(default)]
    pub b_shunt: f64,
    pub v_min: f64,
    pub v_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchRecord {
    pub from_bus: u32,
    pub to_bus: u32,
    pub r: f64,
    pub x: f64,
    /// Total line-charging susceptance.
    #[serde(default)]
    pub b: f64,
    /// Off-nominal turns ratio at the from end (1.0 for lines).
    #[serde(default = "unit_tap")]
    pub tap: f64,
    /// Current magnitude limit; `None` means unrated.
    #[serde(default)]
    pub i_max: Option<f64>,
}

fn unit_tap() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenRecord {
    pub bus: u32,
    /// Scheduled active output of the base case.
    pub p_set: f64,
    pub p_min: f64,
    pub p_max: f64,
    pub q_min: f64,
    pub q_max: f64,
    pub v_setpoint: f64,
}

/// Quadratic generation cost `c2·P² + c1·P + c0` in $/h with `P` in MW.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostCurve {
    pub c2: f64,
    pub c1: f64,
    pub c0: f64,
}

impl CostCurve {
    pub fn eval(&self, p_mw: f64) -> f64 {
        (self.c2 * p_mw + self.c1) * p_mw + self.c0
    }

    pub fn derivative(&self, p_mw: f64) -> f64 {
        2.0 * self.c2 * p_mw + self.c1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkCase {
    pub base_mva: f64,
    pub buses: Vec<BusRecord>,
    pub branches: Vec<BranchRecord>,
    pub generators: Vec<GenRecord>,
    /// One curve per generator, or empty for power-flow-only cases.
    #[serde(default)]
    pub costs: Vec<CostCurve>,
}

impl NetworkCase {
    /// Runs [`validate_case`] and fails on the first batch of diagnostics.
    pub fn validated(self) -> Result<Self> {
        let diags = validate_case(&self);
        if diags.is_empty() {
            Ok(self)
        } else {
            Err(Error::InvalidCase(diags))
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let case: NetworkCase = serde_json::from_str(text)?;
        case.validated()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Loads a case from disk; `.json` files use the native schema, anything
    /// else goes through the MATPOWER importer.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => Self::from_json(&text),
            _ => parse_case_text(&text),
        }
    }

    pub fn n_buses(&self) -> usize {
        self.buses.len()
    }

    /// External id → internal index.
    pub fn bus_lookup(&self) -> HashMap<u32, usize> {
        self.buses
            .iter()
            .enumerate()
            .map(|(i, b)| (b.id, i))
            .collect()
    }

    pub fn bus_index(&self, id: u32) -> Result<usize> {
        self.buses
            .iter()
            .position(|b| b.id == id)
            .ok_or(Error::UnknownBus(id))
    }

    pub fn ref_bus(&self) -> Option<usize> {
        self.buses.iter().position(|b| b.bus_type == BusType::Ref)
    }

    /// Internal indices of PV and reference buses, ascending.
    pub fn control_buses(&self) -> Vec<usize> {
        self.buses
            .iter()
            .enumerate()
            .filter(|(_, b)| b.bus_type != BusType::PQ)
            .map(|(i, _)| i)
            .collect()
    }

    /// Internal indices of PQ buses, ascending.
    pub fn pq_buses(&self) -> Vec<usize> {
        self.buses
            .iter()
            .enumerate()
            .filter(|(_, b)| b.bus_type == BusType::PQ)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn total_load(&self) -> (f64, f64) {
        self.buses
            .iter()
            .fold((0.0, 0.0), |(p, q), b| (p + b.p_load, q + b.q_load))
    }

    /// Multiplies every bus load by `factor`.
    pub fn scale_loads(&mut self, factor: f64) {
        for b in &mut self.buses {
            b.p_load *= factor;
            b.q_load *= factor;
        }
    }

    /// Total generation cost in $/h for per-unit active outputs.
    pub fn generation_cost(&self, p_gen: &[f64]) -> f64 {
        self.costs
            .iter()
            .zip(p_gen)
            .map(|(c, &p)| c.eval(p * self.base_mva))
            .sum()
    }
}

/// The bundled IEEE 14-bus case in MATPOWER format.
pub const CASE14: &str = include_str!("../../data/case14.m");
/// The bundled IEEE 30-bus case in MATPOWER format.
pub const CASE30: &str = include_str!("../../data/case30.m");
