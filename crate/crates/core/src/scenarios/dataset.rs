use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::netmodel::NetworkCase;
use crate::powerflow::{Grid, OperatingPoint, PfOptions};

/// Pairs of state `z` and stability index `σ` from converged power flows.
#[derive(Debug, Clone, PartialEq)]
pub struct VsiDataset {
    /// One row per accepted sample, columns `v_1..v_N` then non-reference θ.
    pub z: DMatrix<f64>,
    pub sigma: DVector<f64>,
    pub accepted: usize,
    pub rejected: usize,
}

impl VsiDataset {
    pub fn new(z: DMatrix<f64>, sigma: DVector<f64>) -> Result<Self> {
        if z.nrows() != sigma.len() {
            return Err(Error::Dimension {
                what: "dataset responses",
                expected: z.nrows(),
                got: sigma.len(),
            });
        }
        Ok(VsiDataset {
            accepted: z.nrows(),
            z,
            sigma,
            rejected: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.sigma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sigma.is_empty()
    }

    pub fn select(&self, rows: &[usize]) -> VsiDataset {
        VsiDataset {
            z: self.z.select_rows(rows),
            sigma: self.sigma.select_rows(rows),
            accepted: rows.len(),
            rejected: 0,
        }
    }

    /// Shuffled split; the first part holds `round(train_frac · len)` rows.
    pub fn split(&self, train_frac: f64, seed: u64) -> (VsiDataset, VsiDataset) {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let cut = ((train_frac * self.len() as f64).round() as usize).min(self.len());
        (self.select(&idx[..cut]), self.select(&idx[cut..]))
    }

    /// CSV with header `z1..z{2N-1},sigma`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = (1..=self.z.ncols()).map(|k| format!("z{k}")).collect();
        header.push("sigma".into());
        w.write_record(&header)?;
        for r in 0..self.len() {
            let row = self
                .z
                .row(r)
                .iter()
                .chain(std::iter::once(&self.sigma[r]))
                .map(|v| format!("{v:e}"))
                .collect::<Vec<_>>();
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(input);
        let cols = rdr.headers()?.len();
        if cols < 2 {
            return Err(Error::Scenario("dataset needs state columns and sigma".into()));
        }
        let mut data = Vec::new();
        let mut rows = 0;
        for rec in rdr.records() {
            let rec = rec?;
            for f in rec.iter() {
                data.push(f.trim().parse::<f64>().map_err(|_| {
                    Error::Scenario(format!("dataset row {}: invalid number `{f}`", rows + 1))
                })?);
            }
            rows += 1;
        }
        if rows == 0 {
            return Err(Error::EmptyDataset { rejected: 0 });
        }
        let m = DMatrix::from_row_slice(rows, cols, &data);
        VsiDataset::new(m.columns(0, cols - 1).into_owned(), m.column(cols - 1).into_owned())
    }
}

/// Runs a flat-start power flow for every candidate operating point with
/// plant outputs fixed at `xi`, keeping `(z, σ)` for the converged ones.
pub fn build_vsi_dataset(
    case: &NetworkCase,
    samples: &[OperatingPoint],
    plant_buses: &[u32],
    xi: &[f64],
) -> Result<VsiDataset> {
    let grid = Grid::new(case)?;
    let opts = PfOptions::default();
    let rows: Vec<Option<(Vec<f64>, f64)>> = samples
        .par_iter()
        .map(|op| -> Result<Option<(Vec<f64>, f64)>> {
            let inj = grid.injections(op, plant_buses, xi)?;
            let Ok(sol) = grid.solve(&inj, None, &opts) else {
                return Ok(None);
            };
            if !sol.converged {
                return Ok(None);
            }
            let sigma = grid.vsi(&sol.v, &sol.theta);
            Ok(sigma.is_finite().then(|| (grid.state_vector(&sol.v, &sol.theta), sigma)))
        })
        .collect::<Result<_>>()?;

    let accepted: Vec<(Vec<f64>, f64)> = rows.into_iter().flatten().collect();
    let rejected = samples.len() - accepted.len();
    if accepted.is_empty() {
        return Err(Error::EmptyDataset { rejected });
    }
    let width = grid.state_len();
    let z = DMatrix::from_fn(accepted.len(), width, |r, c| accepted[r].0[c]);
    let sigma = DVector::from_iterator(accepted.len(), accepted.iter().map(|a| a.1));
    if rejected > 0 {
        log::info!("dataset: {} accepted, {rejected} rejected", accepted.len());
    }
    Ok(VsiDataset {
        z,
        sigma,
        accepted: accepted.len(),
        rejected,
    })
}
