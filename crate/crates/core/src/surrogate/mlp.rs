use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Tanh,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the activation output `a = f(x)`.
    fn slope_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => 1.0 - a * a,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// `outputs × inputs`.
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub activation: Activation,
}

/// Feed-forward network with standardized inputs and a scalar output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSurrogate {
    pub layers: Vec<Layer>,
    pub input_shift: Vec<f64>,
    pub input_scale: Vec<f64>,
    pub output_shift: f64,
    pub output_scale: f64,
}

impl MlpSurrogate {
    pub fn input_dim(&self) -> usize {
        self.input_shift.len()
    }

    /// Network output on already standardized inputs, before the output
    /// is mapped back to raw units.
    pub fn forward_standardized(&self, x: &[f64]) -> f64 {
        let mut a = DVector::from_column_slice(x);
        for layer in &self.layers {
            let mut z = &layer.weights * &a + &layer.bias;
            z.apply(|v| *v = layer.activation.apply(*v));
            a = z;
        }
        a[0]
    }

    pub fn standardize(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(&self.input_shift)
            .zip(&self.input_scale)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }

    /// Prediction in raw units.
    pub fn predict(&self, z: &[f64]) -> Result<f64> {
        if z.len() != self.input_dim() {
            return Err(Error::Dimension {
                what: "surrogate input",
                expected: self.input_dim(),
                got: z.len(),
            });
        }
        Ok(self.output_shift + self.output_scale * self.forward_standardized(&self.standardize(z)))
    }

    /// Row-wise prediction, parallel over rows.
    pub fn predict_rows(&self, x: &DMatrix<f64>) -> Result<Vec<f64>> {
        (0..x.nrows())
            .into_par_iter()
            .map(|r| self.predict(&x.row(r).iter().copied().collect::<Vec<_>>()))
            .collect()
    }

    fn check_shapes(&self) -> Result<()> {
        let mut width = self.input_dim();
        for (k, l) in self.layers.iter().enumerate() {
            if l.weights.ncols() != width || l.bias.len() != l.weights.nrows() {
                return Err(Error::Model(format!("layer {k} has incompatible dimensions")));
            }
            width = l.weights.nrows();
        }
        if width != 1 || self.input_scale.len() != self.input_dim() {
            return Err(Error::Model("network must map to a scalar output".into()));
        }
        Ok(())
    }

    pub(crate) fn validated(self) -> Result<Self> {
        self.check_shapes()?;
        Ok(self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Multiplicative learning-rate decay applied after every epoch.
    pub lr_decay: f64,
    /// Fraction of rows held out for the reported test statistics.
    pub test_fraction: f64,
    /// Fraction of the training rows used for early stopping.
    pub validation_fraction: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Full-batch L-BFGS iterations run after the mini-batch phase; the
    /// refined weights are kept only if validation error improves.
    pub polish_iterations: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            hidden: vec![32],
            epochs: 1500,
            batch_size: 64,
            learning_rate: 3e-3,
            lr_decay: 0.997,
            test_fraction: 0.3,
            validation_fraction: 0.15,
            patience: 150,
            polish_iterations: 2000,
            seed: 0,
        }
    }
}

/// Held-out accuracy of a trained model, in raw response units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurrogateErrorStats {
    pub train_mae: f64,
    pub test_mae: f64,
    /// Largest absolute test error `ρ`.
    pub max_abs_error: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub epochs_run: usize,
}

pub const MIN_TRAINING_ROWS: usize = 50;

fn column_stats(x: &DMatrix<f64>) -> (Vec<f64>, Vec<f64>) {
    let n = x.nrows() as f64;
    let mut shift = Vec::with_capacity(x.ncols());
    let mut scale = Vec::with_capacity(x.ncols());
    for c in x.column_iter() {
        let m = c.sum() / n;
        let var = c.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
        shift.push(m);
        scale.push(if var > 0.0 { var.sqrt() } else { 1.0 });
    }
    (shift, scale)
}

/// Mean and largest absolute error of `model` on rows of `x`.
pub fn error_stats(model: &MlpSurrogate, x: &DMatrix<f64>, y: &DVector<f64>) -> Result<(f64, f64)> {
    let pred = model.predict_rows(x)?;
    let errs: Vec<f64> = pred.iter().zip(y.iter()).map(|(p, t)| (p - t).abs()).collect();
    let mae = errs.iter().sum::<f64>() / errs.len().max(1) as f64;
    Ok((mae, errs.iter().copied().fold(0.0, f64::max)))
}

struct Adam {
    m: Vec<(DMatrix<f64>, DVector<f64>)>,
    v: Vec<(DMatrix<f64>, DVector<f64>)>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(layers: &[Layer]) -> Self {
        let zeros = || {
            layers
                .iter()
                .map(|l| (l.weights.map(|_| 0.0), l.bias.map(|_| 0.0)))
                .collect::<Vec<_>>()
        };
        Adam {
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    fn step(&mut self, layers: &mut [Layer], grads: &[(DMatrix<f64>, DVector<f64>)], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for (k, layer) in layers.iter_mut().enumerate() {
            let (gw, gb) = &grads[k];
            let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
                *m = Self::B1 * *m + (1.0 - Self::B1) * g;
                *v = Self::B2 * *v + (1.0 - Self::B2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
            };
            let (mw, mb) = &mut self.m[k];
            let (vw, vb) = &mut self.v[k];
            for i in 0..gw.len() {
                update(&mut layer.weights[i], gw[i], &mut mw[i], &mut vw[i]);
            }
            for i in 0..gb.len() {
                update(&mut layer.bias[i], gb[i], &mut mb[i], &mut vb[i]);
            }
        }
    }
}

/// Mean squared error gradient on one standardized mini-batch.
fn batch_gradient(layers: &[Layer], x: &DMatrix<f64>, y: &DVector<f64>) -> (f64, Vec<(DMatrix<f64>, DVector<f64>)>) {
    let b = x.nrows() as f64;
    let mut acts = vec![x.clone()];
    for l in layers {
        let mut z = acts.last().unwrap() * l.weights.transpose();
        for mut row in z.row_iter_mut() {
            row += l.bias.transpose();
        }
        z.apply(|v| *v = l.activation.apply(*v));
        acts.push(z);
    }
    let out = acts.last().unwrap().column(0);
    let resid = out - y;
    let loss = resid.norm_squared() / b;
    let mut delta = DMatrix::from_column_slice(x.nrows(), 1, (resid * (2.0 / b)).as_slice());
    let mut grads = Vec::with_capacity(layers.len());
    for k in (0..layers.len()).rev() {
        let a = &acts[k + 1];
        let act = layers[k].activation;
        delta.zip_apply(a, |d, a| *d *= act.slope_from_output(a));
        let gw = delta.transpose() * &acts[k];
        let gb = DVector::from_iterator(delta.ncols(), delta.column_iter().map(|c| c.sum()));
        let next = &delta * &layers[k].weights;
        grads.push((gw, gb));
        delta = next;
    }
    grads.reverse();
    (loss, grads)
}

fn flatten(layers: &[Layer]) -> Vec<f64> {
    layers
        .iter()
        .flat_map(|l| l.weights.iter().chain(l.bias.iter()).copied())
        .collect()
}

fn unflatten(template: &[Layer], p: &[f64]) -> Vec<Layer> {
    let mut at = 0;
    template
        .iter()
        .map(|l| {
            let (r, c) = l.weights.shape();
            let weights = DMatrix::from_column_slice(r, c, &p[at..at + r * c]);
            at += r * c;
            let bias = DVector::from_column_slice(&p[at..at + r]);
            at += r;
            Layer {
                weights,
                bias,
                activation: l.activation,
            }
        })
        .collect()
}

/// Mean squared error over a whole standardized training set.
struct FullBatch<'a> {
    template: &'a [Layer],
    x: &'a DMatrix<f64>,
    y: &'a DVector<f64>,
}

impl FullBatch<'_> {
    fn loss_and_gradient(&self, p: &[f64]) -> (f64, Vec<f64>) {
        let layers = unflatten(self.template, p);
        let n = self.x.nrows();
        let chunk = 512;
        let parts: Vec<(f64, Vec<f64>)> = (0..n.div_ceil(chunk))
            .into_par_iter()
            .map(|k| {
                let rows: Vec<usize> = (k * chunk..((k + 1) * chunk).min(n)).collect();
                let w = rows.len() as f64 / n as f64;
                let (loss, grads) = batch_gradient(&layers, &self.x.select_rows(&rows), &self.y.select_rows(&rows));
                let flat = grads
                    .iter()
                    .flat_map(|(gw, gb)| gw.iter().chain(gb.iter()).map(move |g| g * w))
                    .collect();
                (loss * w, flat)
            })
            .collect();
        let mut total = vec![0.0; p.len()];
        let mut loss = 0.0;
        for (l, g) in parts {
            loss += l;
            total.iter_mut().zip(g).for_each(|(t, g)| *t += g);
        }
        (loss, total)
    }
}

impl argmin::core::CostFunction for FullBatch<'_> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, p: &Vec<f64>) -> std::result::Result<f64, argmin::core::Error> {
        Ok(self.loss_and_gradient(p).0)
    }
}

impl argmin::core::Gradient for FullBatch<'_> {
    type Param = Vec<f64>;
    type Gradient = Vec<f64>;

    fn gradient(&self, p: &Vec<f64>) -> std::result::Result<Vec<f64>, argmin::core::Error> {
        Ok(self.loss_and_gradient(p).1)
    }
}

fn lbfgs_polish(layers: &[Layer], x: &DMatrix<f64>, y: &DVector<f64>, iterations: usize) -> Option<Vec<Layer>> {
    use argmin::core::{Executor, State};
    use argmin::solver::linesearch::MoreThuenteLineSearch;
    use argmin::solver::quasinewton::LBFGS;

    let problem = FullBatch { template: layers, x, y };
    let solver = LBFGS::new(MoreThuenteLineSearch::new(), 10)
        .with_tolerance_grad(1e-12)
        .ok()?
        .with_tolerance_cost(0.0)
        .ok()?;
    let run = Executor::new(problem, solver)
        .configure(|s| s.param(flatten(layers)).max_iters(iterations as u64))
        .run();
    match run {
        Ok(res) => {
            let best = res.state().get_best_param()?.clone();
            best.iter().all(|v| v.is_finite()).then(|| unflatten(layers, &best))
        }
        Err(e) => {
            log::debug!("L-BFGS refinement stopped: {e}");
            None
        }
    }
}

fn init_layers(sizes: &[usize], rng: &mut ChaCha8Rng) -> Vec<Layer> {
    let mut layers = Vec::new();
    for w in sizes.windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let weights = DMatrix::from_fn(fan_out, fan_in, |_, _| rng.random_range(-limit..limit));
        let last = layers.len() + 2 == sizes.len();
        layers.push(Layer {
            weights,
            bias: DVector::zeros(fan_out),
            activation: if last { Activation::Identity } else { Activation::Tanh },
        });
    }
    layers
}

fn split_indices(n: usize, frac: f64, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let cut = n - ((frac * n as f64).round() as usize).min(n);
    let (a, b) = idx.split_at(cut);
    (a.to_vec(), b.to_vec())
}

/// Train/test row indices used by [`train_mlp`] for a given seed.
pub(crate) fn holdout_split(n: usize, test_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    split_indices(n, test_fraction, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Trains a network on rows of `x` against `y`. Deterministic for a
/// fixed `config.seed`. A constant response yields a constant model.
pub fn train_mlp(x: &DMatrix<f64>, y: &DVector<f64>, config: &TrainConfig) -> Result<(MlpSurrogate, SurrogateErrorStats)> {
    if x.nrows() != y.len() {
        return Err(Error::Dimension {
            what: "training responses",
            expected: x.nrows(),
            got: y.len(),
        });
    }
    if x.nrows() < MIN_TRAINING_ROWS {
        return Err(Error::Degenerate(format!(
            "{} rows, at least {MIN_TRAINING_ROWS} required",
            x.nrows()
        )));
    }
    if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("training data".into()));
    }
    if !(0.0..1.0).contains(&config.test_fraction) || !(0.0..1.0).contains(&config.validation_fraction) {
        return Err(Error::InvalidArgument("split fractions must lie in [0, 1)".into()));
    }
    if config.batch_size == 0 || config.hidden.contains(&0) {
        return Err(Error::InvalidArgument("batch size and layer widths must be positive".into()));
    }

    let (train_idx, test_idx) = holdout_split(x.nrows(), config.test_fraction, config.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let (fit_idx, val_idx) = split_indices(train_idx.len(), config.validation_fraction, &mut rng);
    let fit_idx: Vec<usize> = fit_idx.iter().map(|&i| train_idx[i]).collect();
    let val_idx: Vec<usize> = val_idx.iter().map(|&i| train_idx[i]).collect();

    let x_train = x.select_rows(&train_idx);
    let y_train = y.select_rows(&train_idx);
    let (input_shift, input_scale) = column_stats(&x_train);
    let (out_shift, out_scale) = {
        let (m, s) = column_stats(&DMatrix::from_column_slice(y_train.len(), 1, y_train.as_slice()));
        (m[0], s[0])
    };
    let constant = y_train.iter().all(|&v| v == y_train[0]);

    let sizes: Vec<usize> = std::iter::once(x.ncols())
        .chain(config.hidden.iter().copied())
        .chain(std::iter::once(1))
        .collect();
    let mut model = MlpSurrogate {
        layers: init_layers(&sizes, &mut rng),
        input_shift,
        input_scale,
        output_shift: out_shift,
        output_scale: out_scale,
    };

    let mut epochs_run = 0;
    if constant {
        log::warn!("response has zero variance; fitting a constant model");
        for l in &mut model.layers {
            l.weights.fill(0.0);
            l.bias.fill(0.0);
        }
        model.output_shift = y_train[0];
        model.output_scale = 0.0;
    } else {
        let standardize_rows = |idx: &[usize]| {
            let xs = DMatrix::from_fn(idx.len(), x.ncols(), |r, c| {
                (x[(idx[r], c)] - model.input_shift[c]) / model.input_scale[c]
            });
            let ys = DVector::from_fn(idx.len(), |r, _| (y[idx[r]] - out_shift) / out_scale);
            (xs, ys)
        };
        let (xf, yf) = standardize_rows(&fit_idx);
        let (xv, yv) = standardize_rows(&val_idx);
        let val_mae = |layers: &[Layer]| {
            if xv.nrows() == 0 {
                return 0.0;
            }
            let probe = MlpSurrogate {
                layers: layers.to_vec(),
                input_shift: vec![0.0; xv.ncols()],
                input_scale: vec![1.0; xv.ncols()],
                output_shift: 0.0,
                output_scale: 1.0,
            };
            (0..xv.nrows())
                .map(|r| (probe.forward_standardized(xv.row(r).transpose().as_slice()) - yv[r]).abs())
                .sum::<f64>()
                / xv.nrows() as f64
        };

        let mut adam = Adam::new(&model.layers);
        let mut best = (f64::INFINITY, model.layers.clone());
        let mut since_best = 0;
        let mut lr = config.learning_rate;
        let mut order: Vec<usize> = (0..xf.nrows()).collect();
        for epoch in 0..config.epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(config.batch_size) {
                let xb = xf.select_rows(chunk);
                let yb = yf.select_rows(chunk);
                let (loss, grads) = batch_gradient(&model.layers, &xb, &yb);
                if !loss.is_finite() {
                    return Err(Error::TrainingDiverged { epoch: epoch + 1 });
                }
                adam.step(&mut model.layers, &grads, lr);
            }
            lr *= config.lr_decay;
            epochs_run = epoch + 1;
            let mae = val_mae(&model.layers);
            if !mae.is_finite() {
                return Err(Error::TrainingDiverged { epoch: epoch + 1 });
            }
            if mae < best.0 {
                best = (mae, model.layers.clone());
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= config.patience {
                    break;
                }
            }
        }
        if config.polish_iterations > 0 {
            if let Some(refined) = lbfgs_polish(&best.1, &xf, &yf, config.polish_iterations) {
                let mae = val_mae(&refined);
                let fit_loss = |l: &[Layer]| batch_gradient(l, &xf, &yf).0;
                let better = if xv.nrows() > 0 { mae < best.0 } else { fit_loss(&refined) < fit_loss(&best.1) };
                if better {
                    best = (mae, refined);
                }
            }
        }
        model.layers = best.1;
    }

    let (train_mae, _) = error_stats(&model, &x_train, &y_train)?;
    let (test_mae, rho) = if test_idx.is_empty() {
        (train_mae, 0.0)
    } else {
        error_stats(&model, &x.select_rows(&test_idx), &y.select_rows(&test_idx))?
    };
    let stats = SurrogateErrorStats {
        train_mae,
        test_mae,
        max_abs_error: rho,
        n_train: train_idx.len(),
        n_test: test_idx.len(),
        epochs_run,
    };
    Ok((model, stats))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_net(w1: f64, w2: f64) -> MlpSurrogate {
        MlpSurrogate {
            layers: vec![
                Layer {
                    weights: DMatrix::from_element(1, 1, w1),
                    bias: DVector::zeros(1),
                    activation: Activation::Identity,
                },
                Layer {
                    weights: DMatrix::from_element(1, 1, w2),
                    bias: DVector::zeros(1),
                    activation: Activation::Identity,
                },
            ],
            input_shift: vec![0.0],
            input_scale: vec![1.0],
            output_shift: 0.5,
            output_scale: 2.0,
        }
    }

    #[test]
    fn hand_evaluated_composition() {
        let m = identity_net(1.0, 2.0);
        assert_eq!(m.forward_standardized(&[3.0]), 6.0);
        assert_eq!(m.predict(&[3.0]).unwrap(), 0.5 + 2.0 * 6.0);
    }

    #[test]
    fn zero_weights_give_output_shift() {
        let mut m = identity_net(0.0, 0.0);
        m.layers[0].activation = Activation::Tanh;
        assert_eq!(m.predict(&[7.0]).unwrap(), 0.5);
    }

    #[test]
    fn wrong_input_length_is_rejected() {
        let m = identity_net(1.0, 1.0);
        assert!(matches!(m.predict(&[1.0, 2.0]), Err(Error::Dimension { .. })));
    }

    fn independent_forward(m: &MlpSurrogate, z: &[f64]) -> f64 {
        let mut a: Vec<f64> = z
            .iter()
            .enumerate()
            .map(|(i, v)| (v - m.input_shift[i]) / m.input_scale[i])
            .collect();
        for l in &m.layers {
            let mut next = Vec::new();
            for r in 0..l.weights.nrows() {
                let mut s = l.bias[r];
                for c in 0..l.weights.ncols() {
                    s += l.weights[(r, c)] * a[c];
                }
                next.push(match l.activation {
                    Activation::Identity => s,
                    Activation::Tanh => s.tanh(),
                });
            }
            a = next;
        }
        m.output_shift + m.output_scale * a[0]
    }

    fn random_rows(n: usize, d: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn forward_matches_loop_oracle() {
        let x = random_rows(200, 4, 1);
        let y = DVector::from_fn(200, |r, _| (x[(r, 0)] * 2.0).sin() + x[(r, 1)] * x[(r, 2)]);
        let cfg = TrainConfig {
            epochs: 20,
            ..TrainConfig::default()
        };
        let (m, _) = train_mlp(&x, &y, &cfg).unwrap();
        for r in 0..20 {
            let z: Vec<f64> = x.row(r).iter().copied().collect();
            let a = m.predict(&z).unwrap();
            let b = independent_forward(&m, &z);
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let layers = init_layers(&[3, 5, 4, 1], &mut rng);
        let x = random_rows(7, 3, 4);
        let y = DVector::from_fn(7, |r, _| r as f64 * 0.1);
        let (_, grads) = batch_gradient(&layers, &x, &y);
        let h = 1e-6;
        for k in 0..layers.len() {
            for i in 0..layers[k].weights.len() {
                let mut lp = layers.clone();
                let mut lm = layers.clone();
                lp[k].weights[i] += h;
                lm[k].weights[i] -= h;
                let fd = (batch_gradient(&lp, &x, &y).0 - batch_gradient(&lm, &x, &y).0) / (2.0 * h);
                assert!((fd - grads[k].0[i]).abs() < 1e-7, "layer {k} w{i}");
            }
            for i in 0..layers[k].bias.len() {
                let mut lp = layers.clone();
                let mut lm = layers.clone();
                lp[k].bias[i] += h;
                lm[k].bias[i] -= h;
                let fd = (batch_gradient(&lp, &x, &y).0 - batch_gradient(&lm, &x, &y).0) / (2.0 * h);
                assert!((fd - grads[k].1[i]).abs() < 1e-7, "layer {k} b{i}");
            }
        }
    }

    #[test]
    fn constant_response_gives_constant_model() {
        let x = random_rows(100, 3, 2);
        let y = DVector::from_element(100, 3.0);
        let (m, stats) = train_mlp(&x, &y, &TrainConfig::default()).unwrap();
        for r in 0..100 {
            let z: Vec<f64> = x.row(r).iter().copied().collect();
            assert!((m.predict(&z).unwrap() - 3.0).abs() < 1e-6);
        }
        assert_eq!(stats.max_abs_error, 0.0);
    }

    #[test]
    fn linear_target_is_learned() {
        let x = random_rows(1000, 3, 5);
        let y = DVector::from_fn(1000, |r, _| 0.3 + 2.0 * x[(r, 0)] - x[(r, 1)] + 0.5 * x[(r, 2)]);
        let range = y.max() - y.min();
        let cfg = TrainConfig {
            hidden: vec![8],
            seed: 1,
            ..TrainConfig::default()
        };
        let (_, stats) = train_mlp(&x, &y, &cfg).unwrap();
        assert!(stats.test_mae < 1e-4 * range, "{stats:?} range {range}");
        assert!(stats.max_abs_error >= stats.test_mae);
    }

    #[test]
    fn training_is_deterministic() {
        let x = random_rows(120, 2, 8);
        let y = DVector::from_fn(120, |r, _| x[(r, 0)].powi(2) - x[(r, 1)]);
        let cfg = TrainConfig {
            epochs: 30,
            seed: 4,
            ..TrainConfig::default()
        };
        let a = train_mlp(&x, &y, &cfg).unwrap();
        let b = train_mlp(&x, &y, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn too_few_rows_and_divergence_are_reported() {
        let x = random_rows(10, 2, 1);
        let y = DVector::from_element(10, 1.0);
        assert!(matches!(train_mlp(&x, &y, &TrainConfig::default()), Err(Error::Degenerate(_))));

        let x = random_rows(100, 2, 1);
        let y = DVector::from_fn(100, |r, _| x[(r, 0)]);
        let cfg = TrainConfig {
            learning_rate: f64::INFINITY,
            ..TrainConfig::default()
        };
        assert!(matches!(train_mlp(&x, &y, &cfg), Err(Error::TrainingDiverged { .. })));
    }
}
