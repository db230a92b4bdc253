use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{BusType, NetworkCase};

/// One violated case invariant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Diagnostic {
    NonPositiveBase(f64),
    NoReferenceBus,
    MultipleReferenceBuses(Vec<u32>),
    DuplicateBus(u32),
    VoltageLimits { bus: u32, v_min: f64, v_max: f64 },
    NonFiniteLoad { bus: u32 },
    UnknownBranchBus { branch: usize, bus: u32 },
    ZeroImpedance { branch: usize },
    BadTap { branch: usize, tap: f64 },
    BadRating { branch: usize, i_max: f64 },
    UnknownGenBus { generator: usize, bus: u32 },
    GenOnPqBus { generator: usize, bus: u32 },
    ActiveLimits { generator: usize, p_min: f64, p_max: f64 },
    ReactiveLimits { generator: usize, q_min: f64, q_max: f64 },
    CostCount { generators: usize, costs: usize },
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Diagnostic::NonPositiveBase(b) => write!(f, "base_mva must be positive, got {b}"),
            Diagnostic::NoReferenceBus => f.write_str("no reference bus"),
            Diagnostic::MultipleReferenceBuses(ids) => {
                write!(f, "more than one reference bus: {ids:?}")
            }
            Diagnostic::DuplicateBus(id) => write!(f, "duplicate bus id {id}"),
            Diagnostic::VoltageLimits { bus, v_min, v_max } => {
                write!(f, "bus {bus}: v_min {v_min} must be below v_max {v_max}")
            }
            Diagnostic::NonFiniteLoad { bus } => write!(f, "bus {bus}: non-finite load"),
            Diagnostic::UnknownBranchBus { branch, bus } => {
                write!(f, "branch {branch} references unknown bus {bus}")
            }
            Diagnostic::ZeroImpedance { branch } => write!(f, "branch {branch}: zero impedance"),
            Diagnostic::BadTap { branch, tap } => {
                write!(f, "branch {branch}: tap ratio {tap} must be positive")
            }
            Diagnostic::BadRating { branch, i_max } => {
                write!(f, "branch {branch}: current limit {i_max} must be positive")
            }
            Diagnostic::UnknownGenBus { generator, bus } => {
                write!(f, "generator {generator} references unknown bus {bus}")
            }
            Diagnostic::GenOnPqBus { generator, bus } => {
                write!(f, "generator {generator} sits on PQ bus {bus}")
            }
            Diagnostic::ActiveLimits {
                generator,
                p_min,
                p_max,
            } => write!(f, "generator {generator}: p_min {p_min} exceeds p_max {p_max}"),
            Diagnostic::ReactiveLimits {
                generator,
                q_min,
                q_max,
            } => write!(f, "generator {generator}: q_min {q_min} exceeds q_max {q_max}"),
            Diagnostic::CostCount { generators, costs } => write!(
                f,
                "{costs} cost curves for {generators} generators"
            ),
        }
    }
}

/// Checks every case invariant; an empty result means the case is valid.
pub fn validate_case(case: &NetworkCase) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    if !(case.base_mva > 0.0) {
        out.push(Diagnostic::NonPositiveBase(case.base_mva));
    }

    let mut seen = HashSet::new();
    let mut refs = Vec::new();
    for bus in &case.buses {
        if !seen.insert(bus.id) {
            out.push(Diagnostic::DuplicateBus(bus.id));
        }
        if bus.bus_type == BusType::Ref {
            refs.push(bus.id);
        }
        if !(bus.v_min < bus.v_max) {
            out.push(Diagnostic::VoltageLimits {
                bus: bus.id,
                v_min: bus.v_min,
                v_max: bus.v_max,
            });
        }
        if !(bus.p_load.is_finite() && bus.q_load.is_finite()) {
            out.push(Diagnostic::NonFiniteLoad { bus: bus.id });
        }
    }
    match refs.len() {
        0 => out.push(Diagnostic::NoReferenceBus),
        1 => {}
        _ => out.push(Diagnostic::MultipleReferenceBuses(refs)),
    }

    for (k, br) in case.branches.iter().enumerate() {
        for end in [br.from_bus, br.to_bus] {
            if !seen.contains(&end) {
                out.push(Diagnostic::UnknownBranchBus { branch: k, bus: end });
            }
        }
        if br.r == 0.0 && br.x == 0.0 {
            out.push(Diagnostic::ZeroImpedance { branch: k });
        }
        if !(br.tap > 0.0) {
            out.push(Diagnostic::BadTap { branch: k, tap: br.tap });
        }
        if let Some(i_max) = br.i_max {
            if !(i_max > 0.0) {
                out.push(Diagnostic::BadRating { branch: k, i_max });
            }
        }
    }

    for (k, g) in case.generators.iter().enumerate() {
        match case.buses.iter().find(|b| b.id == g.bus) {
            None => out.push(Diagnostic::UnknownGenBus {
                generator: k,
                bus: g.bus,
            }),
            Some(b) if b.bus_type == BusType::PQ => out.push(Diagnostic::GenOnPqBus {
                generator: k,
                bus: g.bus,
            }),
            Some(_) => {}
        }
        if g.p_min > g.p_max {
            out.push(Diagnostic::ActiveLimits {
                generator: k,
                p_min: g.p_min,
                p_max: g.p_max,
            });
        }
        if g.q_min > g.q_max {
            out.push(Diagnostic::ReactiveLimits {
                generator: k,
                q_min: g.q_min,
                q_max: g.q_max,
            });
        }
    }
    if !case.costs.is_empty() && case.costs.len() != case.generators.len() {
        out.push(Diagnostic::CostCount {
            generators: case.generators.len(),
            costs: case.costs.len(),
        });
    }
    out
}
