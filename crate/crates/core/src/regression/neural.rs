//! Single-hidden-layer feed-forward network with weight decay, fitted by BFGS
//! with a backtracking (Armijo) line search so the penalised objective is
//! non-increasing across iterations. Logistic hidden units, identity output
//! link. Inputs and targets are z-scored with weighted moments inside the fit.
//!
//! The decay penalty applies to connection weights only, not bias terms, so
//! that in the strong-shrinkage limit predictions collapse to the weighted
//! target mean rather than to zero.

use crate::error::{AbcError, Result};
use crate::regression::DesignMatrix;
use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

pub const MAX_ITERATIONS: usize = 500;
pub const GRADIENT_TOLERANCE: f64 = 1e-6;

/// Network shape: k inputs, H logistic hidden units, q linear outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NnShape {
    pub inputs: usize,
    pub hidden: usize,
    pub outputs: usize,
}

impl NnShape {
    pub fn dim(&self) -> usize {
        self.hidden * (self.inputs + 1) + self.outputs * (self.hidden + 1)
    }
}

// Parameter packing: W1 (H x k, row major), b1 (H), W2 (q x H, row major), b2 (q).
fn unpack(shape: &NnShape, params: &[f64]) -> (DMatrix<f64>, DVector<f64>, DMatrix<f64>, DVector<f64>) {
    let (k, h, q) = (shape.inputs, shape.hidden, shape.outputs);
    let mut off = 0;
    let w1 = DMatrix::from_row_slice(h, k, &params[off..off + h * k]);
    off += h * k;
    let b1 = DVector::from_column_slice(&params[off..off + h]);
    off += h;
    let w2 = DMatrix::from_row_slice(q, h, &params[off..off + q * h]);
    off += q * h;
    let b2 = DVector::from_column_slice(&params[off..off + q]);
    (w1, b1, w2, b2)
}

fn sigmoid(a: f64) -> f64 {
    1.0 / (1.0 + (-a).exp())
}

/// Penalised objective sum_i w_i ||m(x_i) - y_i||^2 + lambda (||W1||^2 + ||W2||^2)
/// and its analytic gradient, on the given (already standardised) data.
pub fn penalised_objective_and_grad(
    shape: &NnShape,
    params: &[f64],
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    weights: &DVector<f64>,
    lambda: f64,
) -> (f64, Vec<f64>) {
    let (k, h, q) = (shape.inputs, shape.hidden, shape.outputs);
    let (w1, b1, w2, b2) = unpack(shape, params);
    let m = x.nrows();

    let mut gw1 = DMatrix::zeros(h, k);
    let mut gb1 = DVector::zeros(h);
    let mut gw2 = DMatrix::zeros(q, h);
    let mut gb2 = DVector::zeros(q);
    let mut loss = 0.0;

    for i in 0..m {
        let xi = x.row(i).transpose();
        let a = &w1 * &xi + &b1;
        let z = a.map(sigmoid);
        let pred = &w2 * &z + &b2;
        let mut dm = DVector::zeros(q);
        for l in 0..q {
            let e = pred[l] - y[(i, l)];
            loss += weights[i] * e * e;
            dm[l] = 2.0 * weights[i] * e;
        }
        gw2 += &dm * z.transpose();
        gb2 += &dm;
        let dz = w2.transpose() * &dm;
        let da = dz.component_mul(&z.component_mul(&z.map(|v| 1.0 - v)));
        gw1 += &da * xi.transpose();
        gb1 += &da;
    }

    let penalty: f64 =
        lambda * (w1.iter().map(|v| v * v).sum::<f64>() + w2.iter().map(|v| v * v).sum::<f64>());
    gw1 += 2.0 * lambda * &w1;
    gw2 += 2.0 * lambda * &w2;

    let mut grad = Vec::with_capacity(shape.dim());
    for r in 0..h {
        for c in 0..k {
            grad.push(gw1[(r, c)]);
        }
    }
    grad.extend(gb1.iter());
    for r in 0..q {
        for c in 0..h {
            grad.push(gw2[(r, c)]);
        }
    }
    grad.extend(gb2.iter());
    (loss + penalty, grad)
}

struct TrainResult {
    params: Vec<f64>,
    objective: f64,
    history: Vec<f64>,
    converged: bool,
}

fn bfgs_train(
    shape: &NnShape,
    init: Vec<f64>,
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    weights: &DVector<f64>,
    lambda: f64,
) -> TrainResult {
    let dim = shape.dim();
    let mut p = DVector::from_vec(init);
    let (mut f, g) = penalised_objective_and_grad(shape, p.as_slice(), x, y, weights, lambda);
    let mut g = DVector::from_vec(g);
    let mut hinv = DMatrix::<f64>::identity(dim, dim);
    let mut history = vec![f];
    let mut converged = false;

    for _ in 0..MAX_ITERATIONS {
        if g.norm() < GRADIENT_TOLERANCE {
            converged = true;
            break;
        }
        let mut dir = -(&hinv * &g);
        let mut slope = dir.dot(&g);
        if slope >= 0.0 {
            // curvature information went bad, restart from steepest descent
            hinv = DMatrix::identity(dim, dim);
            dir = -g.clone();
            slope = dir.dot(&g);
        }
        // Armijo backtracking
        let c1 = 1e-4;
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..50 {
            let cand = &p + t * &dir;
            let (fc, gc) =
                penalised_objective_and_grad(shape, cand.as_slice(), x, y, weights, lambda);
            if fc.is_finite() && fc <= f + c1 * t * slope {
                accepted = Some((cand, fc, DVector::from_vec(gc)));
                break;
            }
            t *= 0.5;
        }
        let Some((p_new, f_new, g_new)) = accepted else {
            break; // no descent step representable; keep best iterate
        };
        let s = &p_new - &p;
        let yv = &g_new - &g;
        let sy = s.dot(&yv);
        if sy > 1e-12 {
            // BFGS inverse update
            let rho = 1.0 / sy;
            let hy = &hinv * &yv;
            let yhy = yv.dot(&hy);
            hinv = &hinv - rho * (&hy * s.transpose() + &s * hy.transpose())
                + rho * rho * (sy + yhy) * (&s * s.transpose());
        } else {
            hinv = DMatrix::identity(dim, dim);
        }
        p = p_new;
        f = f_new;
        g = g_new;
        history.push(f);
    }
    TrainResult { params: p.as_slice().to_vec(), objective: f, history, converged }
}

/// Fitted network plus the standardisation it was trained under.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuralNetFit {
    /// Hidden-layer weights including biases, H x (k+1): column 0 is the bias.
    pub first_layer_weights: DMatrix<f64>,
    /// Output-layer weights including bias, q x (H+1): column 0 is the bias.
    pub second_layer_weights: DMatrix<f64>,
    pub hidden_units: usize,
    pub decay: f64,
    /// Best penalised objective over restarts (standardised scale).
    pub objective: f64,
    /// Objective after each accepted optimiser iteration of the winning
    /// restart; non-increasing by the line-search contract.
    pub objective_history: Vec<f64>,
    /// False when the gradient tolerance was not reached within the iteration
    /// budget; the best iterate is still returned.
    pub converged: bool,
    x_mean: DVector<f64>,
    x_sd: DVector<f64>,
    y_mean: DVector<f64>,
    y_sd: DVector<f64>,
}

impl NeuralNetFit {
    fn shape(&self) -> NnShape {
        NnShape {
            inputs: self.first_layer_weights.ncols() - 1,
            hidden: self.hidden_units,
            outputs: self.second_layer_weights.nrows(),
        }
    }

    pub fn predict(&self, predictors: &DVector<f64>) -> DVector<f64> {
        let shape = self.shape();
        let xs = DVector::from_fn(shape.inputs, |j, _| {
            (predictors[j] - self.x_mean[j]) / self.x_sd[j]
        });
        let mut z = DVector::zeros(shape.hidden);
        for r in 0..shape.hidden {
            let mut a = self.first_layer_weights[(r, 0)];
            for j in 0..shape.inputs {
                a += self.first_layer_weights[(r, j + 1)] * xs[j];
            }
            z[r] = sigmoid(a);
        }
        DVector::from_fn(shape.outputs, |l, _| {
            let mut out = self.second_layer_weights[(l, 0)];
            for r in 0..shape.hidden {
                out += self.second_layer_weights[(l, r + 1)] * z[r];
            }
            self.y_mean[l] + self.y_sd[l] * out
        })
    }

    pub fn predict_rows(&self, predictors: &DMatrix<f64>) -> DMatrix<f64> {
        let q = self.second_layer_weights.nrows();
        let mut out = DMatrix::zeros(predictors.nrows(), q);
        for i in 0..predictors.nrows() {
            out.row_mut(i)
                .copy_from(&self.predict(&predictors.row(i).transpose()).transpose());
        }
        out
    }
}

/// Trains the network by minimising the weight-decay-penalised weighted
/// least-squares criterion; the best restart by penalised objective wins.
pub fn fit_neural_net(
    design: &DesignMatrix,
    targets: &DMatrix<f64>,
    weights: &DVector<f64>,
    hidden_units: usize,
    decay: f64,
    restarts: usize,
    seed: u64,
) -> Result<NeuralNetFit> {
    if hidden_units == 0 {
        return Err(AbcError::InvalidInput("neural net requires H >= 1".into()));
    }
    if decay <= 0.0 {
        return Err(AbcError::InvalidInput("neural net requires decay > 0".into()));
    }
    if restarts == 0 {
        return Err(AbcError::InvalidInput("neural net requires >= 1 restart".into()));
    }
    let m = design.nrows();
    let k = design.k();
    let q = targets.ncols();
    if targets.nrows() != m || weights.len() != m {
        return Err(AbcError::InvalidInput("design/target/weight row mismatch".into()));
    }
    let wsum: f64 = weights.sum();

    let preds = design.predictors();
    let moments = |col: nalgebra::DVectorView<f64>| {
        let mu = col.iter().zip(weights.iter()).map(|(v, w)| v * w).sum::<f64>() / wsum;
        let var = col
            .iter()
            .zip(weights.iter())
            .map(|(v, w)| w * (v - mu).powi(2))
            .sum::<f64>()
            / wsum;
        (mu, if var > 0.0 { var.sqrt() } else { 1.0 })
    };
    let mut x_mean = DVector::zeros(k);
    let mut x_sd = DVector::zeros(k);
    for j in 0..k {
        let (mu, sd) = moments(preds.column(j));
        x_mean[j] = mu;
        x_sd[j] = sd;
    }
    let mut y_mean = DVector::zeros(q);
    let mut y_sd = DVector::zeros(q);
    for l in 0..q {
        let (mu, sd) = moments(targets.column(l));
        y_mean[l] = mu;
        y_sd[l] = sd;
    }
    let xs = DMatrix::from_fn(m, k, |i, j| (preds[(i, j)] - x_mean[j]) / x_sd[j]);
    let ys = DMatrix::from_fn(m, q, |i, l| (targets[(i, l)] - y_mean[l]) / y_sd[l]);

    let shape = NnShape { inputs: k, hidden: hidden_units, outputs: q };
    let mut best: Option<TrainResult> = None;
    for r in 0..restarts {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        rng.set_stream(r as u64);
        let scale = 0.7 / (k as f64).sqrt().max(1.0);
        let init: Vec<f64> =
            (0..shape.dim()).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
        let result = bfgs_train(&shape, init, &xs, &ys, weights, decay);
        if best.as_ref().map_or(true, |b| result.objective < b.objective) {
            best = Some(result);
        }
    }
    let best = best.unwrap();
    let (w1, b1, w2, b2) = unpack(&shape, &best.params);
    let first_layer_weights = DMatrix::from_fn(hidden_units, k + 1, |r, c| {
        if c == 0 {
            b1[r]
        } else {
            w1[(r, c - 1)]
        }
    });
    let second_layer_weights = DMatrix::from_fn(q, hidden_units + 1, |l, c| {
        if c == 0 {
            b2[l]
        } else {
            w2[(l, c - 1)]
        }
    });
    Ok(NeuralNetFit {
        first_layer_weights,
        second_layer_weights,
        hidden_units,
        decay,
        objective: best.objective,
        objective_history: best.history,
        converged: best.converged,
        x_mean,
        x_sd,
        y_mean,
        y_sd,
    })
}
