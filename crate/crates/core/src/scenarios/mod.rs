//! Renewable output scenarios, control-space sampling and the stability
//! training dataset.

mod dataset;
mod lhs;
mod synth;

use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

pub use dataset::{build_vsi_dataset, VsiDataset};
pub use lhs::{lhs_sample, ControlBounds};
pub use synth::{rank_correlation, synth_scenarios, Marginal, PlantSpec, SynthSpec};

use crate::error::{Error, Result};
use crate::netmodel::NetworkCase;

/// `N_s × N_ξ` matrix of plant outputs in per-unit, one column per plant.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSet {
    pub values: DMatrix<f64>,
    pub plant_buses: Vec<u32>,
    pub source: String,
}

impl ScenarioSet {
    pub fn new(values: DMatrix<f64>, plant_buses: Vec<u32>, source: impl Into<String>) -> Result<Self> {
        if values.nrows() == 0 {
            return Err(Error::NoScenarios);
        }
        if values.ncols() != plant_buses.len() {
            return Err(Error::Dimension {
                what: "scenario columns",
                expected: plant_buses.len(),
                got: values.ncols(),
            });
        }
        let mut seen = HashSet::new();
        for &b in &plant_buses {
            if !seen.insert(b) {
                return Err(Error::Scenario(format!("bus {b} listed twice")));
            }
        }
        if let Some(bad) = values.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::Scenario(format!("invalid plant output {bad}")));
        }
        Ok(ScenarioSet {
            values,
            plant_buses,
            source: source.into(),
        })
    }

    pub fn n_samples(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_plants(&self) -> usize {
        self.values.ncols()
    }

    pub fn row(&self, l: usize) -> Vec<f64> {
        self.values.row(l).iter().copied().collect()
    }

    /// Per-plant sample mean, used as the expected renewable output.
    pub fn mean(&self) -> Vec<f64> {
        self.values.row_mean().iter().copied().collect()
    }

    /// First `n` rows as a new set.
    pub fn head(&self, n: usize) -> Result<Self> {
        let n = n.min(self.n_samples());
        ScenarioSet::new(
            self.values.rows(0, n).into_owned(),
            self.plant_buses.clone(),
            self.source.clone(),
        )
    }

    /// Reads the scenario CSV: header of plant bus ids, rows in MW, `#`
    /// comments.
    pub fn read_csv<R: Read>(reader: R, case: &NetworkCase, source: &str) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .flexible(true)
            .from_reader(reader);
        let mut records = rdr.records();
        let header = match records.next() {
            None => return Err(Error::NoScenarios),
            Some(r) => r?,
        };
        let mut buses = Vec::with_capacity(header.len());
        for field in header.iter() {
            let id: u32 = field
                .parse()
                .map_err(|_| Error::Scenario(format!("header entry `{field}` is not a bus id")))?;
            case.bus_index(id)?;
            buses.push(id);
        }
        let mut data = Vec::new();
        let mut rows = 0;
        for rec in records {
            let rec = rec?;
            let line = rec.position().map_or(0, |p| p.line());
            if rec.len() != buses.len() {
                return Err(Error::Scenario(format!(
                    "line {line}: expected {} values, found {}",
                    buses.len(),
                    rec.len()
                )));
            }
            for field in rec.iter() {
                let mw: f64 = field
                    .parse()
                    .map_err(|_| Error::Scenario(format!("line {line}: invalid number `{field}`")))?;
                if !mw.is_finite() {
                    return Err(Error::Scenario(format!("line {line}: non-finite value")));
                }
                if mw < 0.0 {
                    return Err(Error::Scenario(format!("line {line}: negative power {mw}")));
                }
                data.push(mw / case.base_mva);
            }
            rows += 1;
        }
        if rows == 0 {
            return Err(Error::NoScenarios);
        }
        let values = DMatrix::from_row_slice(rows, buses.len(), &data);
        ScenarioSet::new(values, buses, source)
    }

    /// Writes the set in the CSV format accepted by [`ScenarioSet::read_csv`].
    pub fn write_csv<W: Write>(&self, base_mva: f64, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(self.plant_buses.iter().map(|b| b.to_string()))?;
        for l in 0..self.n_samples() {
            w.write_record(self.values.row(l).iter().map(|v| (v * base_mva).to_string()))?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn load_scenarios(path: impl AsRef<Path>, case: &NetworkCase) -> Result<ScenarioSet> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)?;
    ScenarioSet::read_csv(file, case, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netmodel::{parse_case_text, CASE14};

    fn case() -> NetworkCase {
        parse_case_text(CASE14).unwrap()
    }

    #[test]
    fn reads_three_plants() {
        let mut text = String::from("# plant outputs in MW\n4,9,14\n");
        for l in 0..100 {
            text.push_str(&format!("{},{},{}\n", l as f64 * 0.1, 2.0, 30.0));
        }
        let set = ScenarioSet::read_csv(text.as_bytes(), &case(), "t").unwrap();
        assert_eq!((set.n_samples(), set.n_plants()), (100, 3));
        assert_eq!(set.plant_buses, vec![4, 9, 14]);
        assert!((set.values[(0, 2)] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn unknown_header_bus_is_rejected() {
        let err = ScenarioSet::read_csv("4,99\n1,2\n".as_bytes(), &case(), "t").unwrap_err();
        assert!(matches!(err, Error::UnknownBus(99)));
    }

    #[test]
    fn empty_file_has_no_scenarios() {
        for text in ["", "# nothing\n", "4,9\n"] {
            let err = ScenarioSet::read_csv(text.as_bytes(), &case(), "t").unwrap_err();
            assert_eq!(err.to_string(), "no scenarios");
        }
    }

    #[test]
    fn negative_and_ragged_rows_are_rejected() {
        let err = ScenarioSet::read_csv("4,9\n1,-2\n".as_bytes(), &case(), "t").unwrap_err();
        assert!(err.to_string().contains("negative"), "{err}");
        let err = ScenarioSet::read_csv("4,9\n1,2\n3\n".as_bytes(), &case(), "t").unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
    }

    #[test]
    fn csv_round_trip() {
        let values = DMatrix::from_row_slice(2, 2, &[0.1, 0.25, 0.0, 0.7]);
        let set = ScenarioSet::new(values, vec![4, 9], "t").unwrap();
        let mut buf = Vec::new();
        set.write_csv(100.0, &mut buf).unwrap();
        let back = ScenarioSet::read_csv(buf.as_slice(), &case(), "t").unwrap();
        assert!((back.values - &set.values).abs().max() < 1e-15);
    }
}
