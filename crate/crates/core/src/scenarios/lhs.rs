use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netmodel::NetworkCase;
use crate::powerflow::OperatingPoint;

/// Sampling box for the control vector `y`: active output of every
/// generator off the reference bus, then the voltage setpoint of every
/// PV/reference bus. The reference generator output is left to the slack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlBounds {
    /// Generator indices whose output is sampled.
    pub gens: Vec<usize>,
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl ControlBounds {
    pub fn new(gens: Vec<usize>, min: Vec<f64>, max: Vec<f64>) -> Result<Self> {
        if min.len() != max.len() {
            return Err(Error::Dimension {
                what: "control bounds",
                expected: min.len(),
                got: max.len(),
            });
        }
        if let Some(k) = (0..min.len()).find(|&k| !(min[k] < max[k])) {
            return Err(Error::InvalidArgument(format!(
                "control variable {k}: min {} must be below max {}",
                min[k], max[k]
            )));
        }
        Ok(ControlBounds { gens, min, max })
    }

    /// Physical limits of the case.
    pub fn from_case(case: &NetworkCase) -> Result<Self> {
        let reference = case.ref_bus().map(|i| case.buses[i].id);
        let gens: Vec<usize> = (0..case.generators.len())
            .filter(|&g| Some(case.generators[g].bus) != reference)
            .collect();
        let mut min: Vec<f64> = gens.iter().map(|&g| case.generators[g].p_min).collect();
        let mut max: Vec<f64> = gens.iter().map(|&g| case.generators[g].p_max).collect();
        for i in case.control_buses() {
            min.push(case.buses[i].v_min);
            max.push(case.buses[i].v_max);
        }
        ControlBounds::new(gens, min, max)
    }

    pub fn len(&self) -> usize {
        self.min.len()
    }

    pub fn is_empty(&self) -> bool {
        self.min.is_empty()
    }

    /// Maps a sample `y` onto a full operating point, taking the unsampled
    /// generator outputs from `base`.
    pub fn operating_point(&self, y: &[f64], base: &OperatingPoint) -> Result<OperatingPoint> {
        let expected = self.gens.len() + base.v_set.len();
        if y.len() != expected || self.len() != expected {
            return Err(Error::Dimension {
                what: "control sample",
                expected,
                got: y.len(),
            });
        }
        let mut op = base.clone();
        for (k, &g) in self.gens.iter().enumerate() {
            op.p_g[g] = y[k];
        }
        op.v_set.copy_from_slice(&y[self.gens.len()..]);
        Ok(op)
    }
}

/// Latin hypercube sample of `m` points: every variable gets exactly one
/// point in each of its `m` equal-width strata.
pub fn lhs_sample(bounds: &ControlBounds, m: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![vec![0.0; bounds.len()]; m];
    let mut strata: Vec<usize> = (0..m).collect();
    for k in 0..bounds.len() {
        strata.shuffle(&mut rng);
        let (lo, hi) = (bounds.min[k], bounds.max[k]);
        for (row, &s) in out.iter_mut().zip(&strata) {
            let u = (s as f64 + rng.random::<f64>()) / m as f64;
            row[k] = lo + u * (hi - lo);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netmodel::{parse_case_text, CASE14};
    use proptest::prelude::*;

    fn unit(n: usize) -> ControlBounds {
        ControlBounds::new(vec![], vec![0.0; n], vec![1.0; n]).unwrap()
    }

    #[test]
    fn four_points_fill_four_strata() {
        let pts = lhs_sample(&unit(1), 4, 5);
        let mut bins: Vec<usize> = pts.iter().map(|p| (p[0] * 4.0).floor() as usize).collect();
        bins.sort();
        assert_eq!(bins, vec![0, 1, 2, 3]);
    }

    #[test]
    fn sample_mean_is_near_midpoint() {
        let b = ControlBounds::new(vec![], vec![2.0, -1.0], vec![4.0, 1.0]).unwrap();
        let m = 1000;
        let pts = lhs_sample(&b, m, 17);
        for k in 0..2 {
            let mean = pts.iter().map(|p| p[k]).sum::<f64>() / m as f64;
            let mid = 0.5 * (b.min[k] + b.max[k]);
            let tol = 3.0 * (b.max[k] - b.min[k]) / (2.0 * (3.0 * m as f64).sqrt());
            assert!((mean - mid).abs() < tol);
        }
    }

    #[test]
    fn single_point_is_inside() {
        let b = ControlBounds::new(vec![], vec![0.9], vec![1.1]).unwrap();
        let p = lhs_sample(&b, 1, 0);
        assert!(p[0][0] >= 0.9 && p[0][0] <= 1.1);
    }

    #[test]
    fn case_bounds_skip_reference_generator() {
        let case = parse_case_text(CASE14).unwrap();
        let b = ControlBounds::from_case(&case).unwrap();
        assert_eq!(b.gens, vec![1, 2, 3, 4]);
        assert_eq!(b.len(), 4 + 5);
        let y: Vec<f64> = (0..9).map(|k| b.min[k]).collect();
        let op = b.operating_point(&y, &OperatingPoint::base_case(&case)).unwrap();
        assert_eq!(op.p_g[0], case.generators[0].p_set);
        assert_eq!(op.v_set, vec![0.94; 5]);
    }

    #[test]
    fn inverted_bounds_are_rejected() {
        assert!(ControlBounds::new(vec![], vec![1.0], vec![1.0]).is_err());
    }

    proptest! {
        #[test]
        fn every_stratum_holds_one_point(m in 1usize..200, dims in 1usize..5, seed in any::<u64>()) {
            let pts = lhs_sample(&unit(dims), m, seed);
            prop_assert_eq!(pts.len(), m);
            for k in 0..dims {
                let mut bins: Vec<usize> = pts.iter().map(|p| ((p[k] * m as f64).floor() as usize).min(m - 1)).collect();
                bins.sort();
                prop_assert_eq!(bins, (0..m).collect::<Vec<_>>());
            }
        }

        #[test]
        fn fixed_seed_is_deterministic(seed in any::<u64>()) {
            prop_assert_eq!(lhs_sample(&unit(3), 20, seed), lhs_sample(&unit(3), 20, seed));
        }
    }
}
