//! Per-layer merge objective, its gradients, and the iterative solver.
//!
//! For task matrices `τ_i` (all `r × c`) and a merged matrix `τ_m`, the
//! weighted interference loss is
//!
//! ```text
//! L(τ_m) = Σ_i (w_i / ‖τ_i‖²) · ‖(τ_m − τ_i) τ_iᵀ‖²
//! ∇L     = τ_m·H − C,   H = 2 Σ_i (w_i / ‖τ_i‖²) τ_iᵀτ_i
//! ```
//!
//! and the projection penalty on the gradient `G = ∇L` is
//! `R = λ Σ_i ‖G·M_i‖²` with `M_i = I − τ_iᵀτ_i / ‖τ_i‖²`. Because `G` is
//! affine in `τ_m`, `∇R = 2λ · G · (Σ_i M_i M_iᵀ) · H`.

use serde::Serialize;

use super::{MergeConfig, MergeMethod, StepRule};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Task matrices of one layer with their Gram matrices and squared norms.
pub(crate) struct LayerTasks<'a> {
    taus: Vec<&'a Matrix>,
    grams: Vec<Matrix>,
    norms: Vec<f64>,
}

impl<'a> LayerTasks<'a> {
    pub(crate) fn new(taus: impl IntoIterator<Item = &'a Matrix>) -> Result<Self> {
        let taus: Vec<&Matrix> = taus.into_iter().collect();
        let first = taus
            .first()
            .ok_or_else(|| Error::Contract("no task matrices".into()))?;
        let mut grams = Vec::with_capacity(taus.len());
        let mut norms = Vec::with_capacity(taus.len());
        for (index, t) in taus.iter().enumerate() {
            if t.shape() != first.shape() {
                return Err(Error::Shape {
                    op: "layer tasks",
                    lhs: first.shape(),
                    rhs: t.shape(),
                });
            }
            let n = t.frobenius_norm_sq();
            if n == 0.0 {
                return Err(Error::ZeroNormTask { index });
            }
            norms.push(n);
            grams.push(t.gram());
        }
        Ok(Self { taus, grams, norms })
    }

    fn len(&self) -> usize {
        self.taus.len()
    }

    fn check_tau_m(&self, tau_m: &Matrix) -> Result<()> {
        if tau_m.shape() != self.taus[0].shape() {
            return Err(Error::Shape {
                op: "merged vs task",
                lhs: tau_m.shape(),
                rhs: self.taus[0].shape(),
            });
        }
        Ok(())
    }

    fn check_weights(&self, weights: &[f64]) -> Result<()> {
        if weights.len() != self.len() {
            return Err(Error::Contract(format!(
                "{} weights for {} tasks",
                weights.len(),
                self.len()
            )));
        }
        Ok(())
    }

    /// `(τ_m − τ_i)·τ_iᵀτ_i` and `‖(τ_m − τ_i)τ_iᵀ‖²` for task `i`.
    fn residual(&self, i: usize, tau_m: &Matrix) -> (Matrix, f64) {
        let diff = tau_m.sub(self.taus[i]).expect("shape checked");
        let projected = diff.matmul(&self.grams[i]).expect("shape checked");
        let sq = projected
            .data()
            .iter()
            .zip(diff.data())
            .map(|(a, b)| a * b)
            .sum::<f64>()
            .max(0.0);
        (projected, sq)
    }

    /// Per-task normalized interference `‖(τ_m − τ_i)τ_iᵀ‖² / ‖τ_i‖²`.
    fn interference(&self, tau_m: &Matrix) -> Vec<f64> {
        (0..self.len())
            .map(|i| self.residual(i, tau_m).1 / self.norms[i])
            .collect()
    }

    fn loss_and_gradient(&self, tau_m: &Matrix, weights: &[f64]) -> (f64, Matrix) {
        let mut loss = 0.0;
        let mut grad = Matrix::zeros(tau_m.rows(), tau_m.cols());
        for (i, &w) in weights.iter().enumerate() {
            let (projected, sq) = self.residual(i, tau_m);
            let k = w / self.norms[i];
            loss += k * sq;
            grad.add_scaled(2.0 * k, &projected).expect("shape checked");
        }
        (loss, grad)
    }

    fn loss(&self, tau_m: &Matrix, weights: &[f64]) -> f64 {
        weights
            .iter()
            .enumerate()
            .map(|(i, w)| w / self.norms[i] * self.residual(i, tau_m).1)
            .sum()
    }

    /// `H = 2 Σ_i (w_i / ‖τ_i‖²) τ_iᵀτ_i`.
    fn hessian(&self, weights: &[f64]) -> Matrix {
        let c = self.taus[0].cols();
        let mut h = Matrix::zeros(c, c);
        for (i, &w) in weights.iter().enumerate() {
            h.add_scaled(2.0 * w / self.norms[i], &self.grams[i])
                .expect("square");
        }
        h
    }

    /// `M_i = I − τ_iᵀτ_i / ‖τ_i‖²`.
    fn complement(&self, i: usize) -> Matrix {
        let c = self.taus[0].cols();
        Matrix::axpy(-1.0 / self.norms[i], &self.grams[i], &Matrix::identity(c)).expect("square")
    }

    /// `Σ_i M_i M_iᵀ`, independent of the weights.
    fn complement_sum(&self) -> Matrix {
        let c = self.taus[0].cols();
        let mut s = Matrix::zeros(c, c);
        for i in 0..self.len() {
            let m = self.complement(i);
            s.add_scaled(1.0, &m.matmul_t(&m).expect("square"))
                .expect("square");
        }
        s
    }

    fn penalty(&self, grad: &Matrix, lambda: f64) -> f64 {
        let total: f64 = (0..self.len())
            .map(|i| {
                grad.matmul(&self.complement(i))
                    .expect("shape checked")
                    .frobenius_norm_sq()
            })
            .sum();
        lambda * total
    }
}

fn validate_shapes(tau_m: &Matrix, tasks: &LayerTasks) -> Result<()> {
    tasks.check_tau_m(tau_m)
}

/// Norm-proportional task importance `α_i = ‖τ_i‖² / Σ_j ‖τ_j‖²`.
pub fn alpha_weights(taus: &[Matrix]) -> Result<Vec<f64>> {
    let norms: Vec<f64> = taus.iter().map(Matrix::frobenius_norm_sq).collect();
    let total: f64 = norms.iter().sum();
    if total == 0.0 || !total.is_finite() {
        return Err(Error::AllZeroLayers);
    }
    Ok(norms.into_iter().map(|n| n / total).collect())
}

/// Compatibility of each task with the current merge,
/// `β_i = exp(−γ · ‖(τ_m − τ_i)τ_iᵀ‖² / ‖τ_i‖²)`.
pub fn beta_weights(tau_m_prev: &Matrix, taus: &[Matrix], gamma: f64) -> Result<Vec<f64>> {
    let tasks = LayerTasks::new(taus)?;
    validate_shapes(tau_m_prev, &tasks)?;
    Ok(betas_from(&tasks, tau_m_prev, gamma))
}

fn betas_from(tasks: &LayerTasks, tau_m: &Matrix, gamma: f64) -> Vec<f64> {
    tasks
        .interference(tau_m)
        .into_iter()
        .map(|d| (-gamma * d).exp())
        .collect()
}

/// Weighted interference loss.
pub fn amm_loss(tau_m: &Matrix, taus: &[Matrix], weights: &[f64]) -> Result<f64> {
    let tasks = LayerTasks::new(taus)?;
    validate_shapes(tau_m, &tasks)?;
    tasks.check_weights(weights)?;
    Ok(tasks.loss(tau_m, weights))
}

/// `∇L = 2 Σ_i (w_i / ‖τ_i‖²) (τ_m − τ_i) τ_iᵀτ_i`.
pub fn amm_loss_gradient(tau_m: &Matrix, taus: &[Matrix], weights: &[f64]) -> Result<Matrix> {
    let tasks = LayerTasks::new(taus)?;
    validate_shapes(tau_m, &tasks)?;
    tasks.check_weights(weights)?;
    Ok(tasks.loss_and_gradient(tau_m, weights).1)
}

/// Penalty on the part of `grad` orthogonal to each task's row space.
pub fn projection_penalty(grad: &Matrix, taus: &[Matrix], lambda: f64) -> Result<f64> {
    let tasks = LayerTasks::new(taus)?;
    validate_shapes(grad, &tasks)?;
    Ok(tasks.penalty(grad, lambda))
}

/// Gradient of `projection_penalty(amm_loss_gradient(τ_m))` with respect to
/// `τ_m`, weights held fixed.
pub fn penalty_gradient(
    tau_m: &Matrix,
    taus: &[Matrix],
    weights: &[f64],
    lambda: f64,
) -> Result<Matrix> {
    let tasks = LayerTasks::new(taus)?;
    validate_shapes(tau_m, &tasks)?;
    tasks.check_weights(weights)?;
    let (_, grad) = tasks.loss_and_gradient(tau_m, weights);
    Ok(penalty_grad_from(
        &grad,
        &tasks.complement_sum(),
        &tasks.hessian(weights),
        lambda,
    ))
}

fn penalty_grad_from(
    grad: &Matrix,
    complement_sum: &Matrix,
    hessian: &Matrix,
    lambda: f64,
) -> Matrix {
    if lambda == 0.0 {
        return Matrix::zeros(grad.rows(), grad.cols());
    }
    grad.matmul(complement_sum)
        .and_then(|m| m.matmul(hessian))
        .expect("square factors")
        .scale(2.0 * lambda)
}

/// Unnormalized interference `‖(τ_m − τ_i)τ_iᵀ‖_F` for every task.
pub fn task_interference(tau_m: &Matrix, taus: &[Matrix]) -> Result<Vec<f64>> {
    taus.iter()
        .map(|t| Ok(tau_m.sub(t)?.matmul_t(t)?.frobenius_norm()))
        .collect()
}

/// Outcome of optimizing one layer.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerMergeState {
    pub tau_m: Matrix,
    /// Per input task; zero for dropped tasks.
    pub alphas: Vec<f64>,
    /// Last computed compatibility per task; zero for dropped tasks.
    pub betas: Vec<f64>,
    /// Last effective weights per task; zero for dropped tasks.
    pub weights: Vec<f64>,
    /// Loss evaluated before each step.
    pub loss_history: Vec<f64>,
    /// Weights used at each step.
    pub weight_history: Vec<Vec<f64>>,
    /// Loss at the final iterate under the last step's weights.
    pub final_loss: f64,
    pub steps_run: usize,
    /// Indices of zero-norm tasks excluded from this layer.
    pub dropped: Vec<usize>,
}

/// Expands per-active-task values to all tasks, filling dropped slots with 0.
fn scatter(active: &[usize], values: &[f64], total: usize) -> Vec<f64> {
    let mut out = vec![0.0; total];
    for (&i, &v) in active.iter().zip(values) {
        out[i] = v;
    }
    out
}

/// Merges one linear layer.
///
/// Task arithmetic returns `coeff · Σ τ_i` directly. The iterative methods
/// start from the α-weighted sum (β⁰ = 1) and take `cfg.steps` gradient
/// steps on the weighted loss plus projection penalty, refreshing β and the
/// weights from the previous iterate before each step. In WUDI mode the
/// weights are fixed at 1, the start is the plain sum, and the penalty is
/// off.
pub fn merge_layer(taus: &[Matrix], cfg: &MergeConfig) -> Result<LayerMergeState> {
    cfg.validate()?;
    let first = taus
        .first()
        .ok_or_else(|| Error::Contract("merge_layer needs at least one task".into()))?;
    if let Some(bad) = taus.iter().find(|t| t.shape() != first.shape()) {
        return Err(Error::Shape {
            op: "merge_layer",
            lhs: first.shape(),
            rhs: bad.shape(),
        });
    }
    let total = taus.len();
    let (rows, cols) = first.shape();

    if cfg.method == MergeMethod::TaskArithmetic {
        let mut tau_m = Matrix::zeros(rows, cols);
        for t in taus {
            tau_m.add_scaled(cfg.ta_coefficient, t)?;
        }
        return Ok(LayerMergeState {
            tau_m,
            alphas: vec![0.0; total],
            betas: vec![0.0; total],
            weights: vec![cfg.ta_coefficient; total],
            loss_history: Vec::new(),
            weight_history: Vec::new(),
            final_loss: f64::NAN,
            steps_run: 0,
            dropped: Vec::new(),
        });
    }

    let (active, dropped): (Vec<usize>, Vec<usize>) =
        (0..total).partition(|&i| taus[i].frobenius_norm_sq() > 0.0);

    if active.is_empty() {
        let mut tau_m = Matrix::zeros(rows, cols);
        for t in taus {
            tau_m.add_scaled(1.0 / total as f64, t)?;
        }
        return Ok(LayerMergeState {
            tau_m,
            alphas: vec![0.0; total],
            betas: vec![0.0; total],
            weights: vec![1.0 / total as f64; total],
            loss_history: Vec::new(),
            weight_history: Vec::new(),
            final_loss: 0.0,
            steps_run: 0,
            dropped,
        });
    }

    let tasks = LayerTasks::new(active.iter().map(|&i| &taus[i]))?;
    let wudi = cfg.is_wudi();
    let lambda = if wudi { 0.0 } else { cfg.lambda };
    let k = active.len();

    let alphas = {
        let norms: Vec<f64> = tasks.norms.clone();
        let sum: f64 = norms.iter().sum();
        norms.into_iter().map(|n| n / sum).collect::<Vec<_>>()
    };
    let mut betas = vec![1.0; k];
    let mut weights = if wudi { vec![1.0; k] } else { alphas.clone() };

    let mut tau_m = Matrix::zeros(rows, cols);
    for (t, &w) in tasks.taus.iter().zip(&weights) {
        tau_m.add_scaled(w, t)?;
    }

    let complement_sum = (lambda != 0.0).then(|| tasks.complement_sum());
    let mut loss_history = Vec::with_capacity(cfg.steps);
    let mut weight_history = Vec::with_capacity(cfg.steps);

    for _ in 0..cfg.steps {
        if !wudi {
            betas = betas_from(&tasks, &tau_m, cfg.gamma);
            let raw: Vec<f64> = alphas.iter().zip(&betas).map(|(a, b)| a * b).collect();
            let z: f64 = raw.iter().sum();
            weights = if z > 0.0 && z.is_finite() {
                raw.into_iter().map(|v| v / z).collect()
            } else {
                // every β underflowed; fall back to importance alone
                alphas.clone()
            };
        }
        let (loss, grad) = tasks.loss_and_gradient(&tau_m, &weights);
        loss_history.push(loss);
        weight_history.push(scatter(&active, &weights, total));

        let hessian = tasks.hessian(&weights);
        let step = match cfg.step_rule {
            StepRule::Fixed { lr } => lr,
            StepRule::Adaptive { c } => c / hessian.trace(),
        };
        let mut direction = grad;
        if let Some(s) = &complement_sum {
            let pg = penalty_grad_from(&direction, s, &hessian, lambda);
            direction.add_scaled(1.0, &pg)?;
        }
        tau_m.add_scaled(-step, &direction)?;
    }

    let final_loss = tasks.loss(&tau_m, &weights);
    Ok(LayerMergeState {
        tau_m,
        alphas: scatter(&active, &alphas, total),
        betas: scatter(&active, &betas, total),
        weights: scatter(&active, &weights, total),
        loss_history,
        weight_history,
        final_loss,
        steps_run: cfg.steps,
        dropped,
    })
}
