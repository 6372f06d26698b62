//! Task-vector merging: Task Arithmetic, WUDI, and adaptive (AMM) merging.

mod layer;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use layer::{
    alpha_weights, amm_loss, amm_loss_gradient, beta_weights, merge_layer, penalty_gradient,
    projection_penalty, task_interference, LayerMergeState,
};

use crate::checkpoint::{
    check_aligned, compute_task_vectors, Checkpoint, LinearClassifier, TaskVector, Tensor,
};
use crate::error::{Error, Result};
use crate::par::{self, Schedule};

/// How non-linear-layer tensors are combined by the iterative methods.
pub const RESIDUAL_RULE_ALPHA: &str = "alpha_weighted_average";
pub const RESIDUAL_RULE_TA: &str = "task_arithmetic";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[clap(rename_all = "snake_case")]
pub enum MergeMethod {
    TaskArithmetic,
    Wudi,
    Amm,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StepRule {
    /// Constant learning rate.
    Fixed { lr: f64 },
    /// `ζ = c / trace(H)`, recomputed whenever the weights change.
    Adaptive { c: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeConfig {
    pub method: MergeMethod,
    pub steps: usize,
    pub step_rule: StepRule,
    pub gamma: f64,
    pub lambda: f64,
    pub ta_coefficient: f64,
    /// Runs the AMM path with unit weights and no penalty (plain WUDI).
    pub wudi_compat: bool,
    pub classifier: LinearClassifier,
}

impl Default for MergeConfig {
    fn default() -> Self {
        Self {
            method: MergeMethod::Amm,
            steps: 300,
            step_rule: StepRule::Adaptive { c: 0.1 },
            gamma: 1.0,
            lambda: 0.1,
            ta_coefficient: 1.0,
            wudi_compat: false,
            classifier: LinearClassifier::default(),
        }
    }
}

impl MergeConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.steps == 0 {
            return bad("steps must be at least 1".into());
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return bad(format!(
                "gamma must be a non-negative number, got {}",
                self.gamma
            ));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!(
                "lambda must be a non-negative number, got {}",
                self.lambda
            ));
        }
        if !self.ta_coefficient.is_finite() {
            return bad("ta_coefficient must be finite".into());
        }
        match self.step_rule {
            StepRule::Adaptive { c } if !(c > 0.0 && c <= 1.0) => {
                bad(format!("adaptive step constant must be in (0, 1], got {c}"))
            }
            StepRule::Fixed { lr } if !(lr > 0.0 && lr.is_finite()) => {
                bad(format!("learning rate must be positive, got {lr}"))
            }
            _ => Ok(()),
        }
    }

    /// Whether the iterative path runs with unit weights and no penalty.
    pub fn is_wudi(&self) -> bool {
        self.method == MergeMethod::Wudi || self.wudi_compat
    }

    fn residual_rule(&self) -> &'static str {
        match self.method {
            MergeMethod::TaskArithmetic => RESIDUAL_RULE_TA,
            _ => RESIDUAL_RULE_ALPHA,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerReport {
    pub name: String,
    pub steps_run: usize,
    /// `None` for methods that do not optimize a loss.
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
    pub final_weights: Vec<f64>,
    pub dropped_tasks: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MergeReport {
    pub models: Vec<String>,
    pub residual_rule: String,
    pub layers: Vec<LayerReport>,
    pub config: MergeConfig,
}

/// Merged deltas, before they are added back onto the base.
#[derive(Debug, Clone)]
pub struct MergedTaskVector {
    pub layers: BTreeMap<String, LayerMergeState>,
    pub residual: BTreeMap<String, Vec<f64>>,
}

/// `θ_m = θ_0 + coeff · Σ_i τ_i` over every tensor.
pub fn merge_task_arithmetic(
    base: &Checkpoint,
    taus: &[TaskVector],
    coeff: f64,
) -> Result<Checkpoint> {
    if taus.is_empty() {
        return Err(Error::Contract(
            "task arithmetic needs at least one task vector".into(),
        ));
    }
    let deltas = base
        .tensors()
        .map(|(name, t)| {
            let mut sum = vec![0.0; t.numel()];
            for tv in taus {
                let v = tv
                    .values(name)
                    .filter(|v| v.len() == sum.len())
                    .ok_or_else(|| Error::Alignment {
                        tensor: name.to_string(),
                        base: "base".into(),
                        other: tv.source_id.clone(),
                        detail: "missing or mis-sized in task vector".into(),
                    })?;
                for (s, d) in sum.iter_mut().zip(v) {
                    *s += coeff * d;
                }
            }
            Ok((name.to_string(), sum))
        })
        .collect::<Result<BTreeMap<_, _>>>()?;
    apply_deltas(base, &deltas)
}

fn apply_deltas(base: &Checkpoint, deltas: &BTreeMap<String, Vec<f64>>) -> Result<Checkpoint> {
    let mut out = Checkpoint::new();
    for (name, t) in base.tensors() {
        let d = &deltas[name];
        let values = t.values().iter().zip(d).map(|(b, d)| b + d).collect();
        out.insert(name, Tensor::new(t.dtype(), t.shape().to_vec(), values)?)?;
    }
    for (k, v) in base.metadata() {
        out.set_metadata(k.clone(), v.clone());
    }
    Ok(out)
}

/// α-weighted average of residual deltas; zero when every delta is zero.
fn alpha_average(deltas: &[&[f64]]) -> Vec<f64> {
    let norms: Vec<f64> = deltas
        .iter()
        .map(|d| d.iter().map(|v| v * v).sum())
        .collect();
    let total: f64 = norms.iter().sum();
    let mut out = vec![0.0; deltas.first().map_or(0, |d| d.len())];
    if total == 0.0 {
        return out;
    }
    for (d, n) in deltas.iter().zip(&norms) {
        let a = n / total;
        for (o, v) in out.iter_mut().zip(d.iter()) {
            *o += a * v;
        }
    }
    out
}

/// Merges aligned task vectors layer by layer. Linear layers are optimized
/// independently under `schedule`; the result does not depend on it.
pub fn merge_task_vectors(
    taus: &[TaskVector],
    cfg: &MergeConfig,
    schedule: Schedule,
) -> Result<MergedTaskVector> {
    cfg.validate()?;
    let first = taus
        .first()
        .ok_or_else(|| Error::Contract("merge needs at least one task vector".into()))?;
    for tv in &taus[1..] {
        let same = tv.linear_layers.keys().eq(first.linear_layers.keys())
            && tv.residual.keys().eq(first.residual.keys());
        if !same {
            return Err(Error::Alignment {
                tensor: "*".into(),
                base: first.source_id.clone(),
                other: tv.source_id.clone(),
                detail: "task vectors cover different tensors".into(),
            });
        }
    }

    let names: Vec<&String> = first.linear_layers.keys().collect();
    let states = par::try_map(&names, schedule, |name| {
        let mats: Vec<_> = taus
            .iter()
            .map(|tv| tv.linear_layers[*name].clone())
            .collect();
        merge_layer(&mats, cfg).map(|s| ((*name).clone(), s))
    })?;

    let residual = first
        .residual
        .keys()
        .map(|name| {
            let deltas: Vec<&[f64]> = taus.iter().map(|tv| tv.residual[name].as_slice()).collect();
            let merged = match cfg.method {
                MergeMethod::TaskArithmetic => {
                    let mut sum = vec![0.0; deltas[0].len()];
                    for d in &deltas {
                        for (s, v) in sum.iter_mut().zip(d.iter()) {
                            *s += cfg.ta_coefficient * v;
                        }
                    }
                    sum
                }
                _ => alpha_average(&deltas),
            };
            (name.clone(), merged)
        })
        .collect();

    Ok(MergedTaskVector {
        layers: states.into_iter().collect(),
        residual,
    })
}

pub fn merge_models(
    base: &Checkpoint,
    tuned: &[(&str, &Checkpoint)],
    cfg: &MergeConfig,
) -> Result<(Checkpoint, MergeReport)> {
    merge_models_with(base, tuned, cfg, Schedule::default())
}

/// [`merge_models`] with an explicit layer schedule.
pub fn merge_models_with(
    base: &Checkpoint,
    tuned: &[(&str, &Checkpoint)],
    cfg: &MergeConfig,
    schedule: Schedule,
) -> Result<(Checkpoint, MergeReport)> {
    cfg.validate()?;
    for (id, m) in tuned {
        check_aligned(base, m, id)?;
    }
    let taus = compute_task_vectors(base, tuned, &cfg.classifier)?;
    let merged = merge_task_vectors(&taus, cfg, schedule)?;

    let mut deltas = merged.residual.clone();
    for (name, state) in &merged.layers {
        deltas.insert(name.clone(), state.tau_m.data().to_vec());
    }
    let mut out = apply_deltas(base, &deltas)?;
    out.set_metadata("merge_method", method_name(cfg.method));
    out.set_metadata("residual_merge", cfg.residual_rule());

    let ids: Vec<String> = tuned.iter().map(|(id, _)| id.to_string()).collect();
    let iterative = cfg.method != MergeMethod::TaskArithmetic;
    let layers = merged
        .layers
        .iter()
        .map(|(name, s)| LayerReport {
            name: name.clone(),
            steps_run: s.steps_run,
            initial_loss: iterative
                .then(|| s.loss_history.first().copied().unwrap_or(s.final_loss)),
            final_loss: iterative.then_some(s.final_loss),
            final_weights: s.weights.clone(),
            dropped_tasks: s.dropped.iter().map(|&i| ids[i].clone()).collect(),
        })
        .collect();

    let report = MergeReport {
        models: ids,
        residual_rule: cfg.residual_rule().to_string(),
        layers,
        config: cfg.clone(),
    };
    Ok((out, report))
}

fn method_name(m: MergeMethod) -> &'static str {
    match m {
        MergeMethod::TaskArithmetic => "task_arithmetic",
        MergeMethod::Wudi => "wudi",
        MergeMethod::Amm => "amm",
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::DType;

    fn ckpt(entries: &[(&str, &[usize], &[f64])]) -> Checkpoint {
        let mut c = Checkpoint::new();
        for (name, shape, values) in entries {
            c.insert(
                *name,
                Tensor::new(DType::F32, shape.to_vec(), values.to_vec()).unwrap(),
            )
            .unwrap();
        }
        c
    }

    #[test]
    fn config_validation() {
        assert!(MergeConfig::default().validate().is_ok());
        let bad = [
            MergeConfig {
                steps: 0,
                ..Default::default()
            },
            MergeConfig {
                gamma: -1.0,
                ..Default::default()
            },
            MergeConfig {
                lambda: f64::NAN,
                ..Default::default()
            },
            MergeConfig {
                step_rule: StepRule::Adaptive { c: 1.5 },
                ..Default::default()
            },
            MergeConfig {
                step_rule: StepRule::Fixed { lr: 0.0 },
                ..Default::default()
            },
        ];
        for cfg in bad {
            assert!(matches!(cfg.validate(), Err(Error::Config(_))), "{cfg:?}");
        }
    }

    #[test]
    fn task_arithmetic_cancellation() {
        let base = ckpt(&[("w", &[2, 2], &[1.0, 2.0, 3.0, 4.0])]);
        let up = ckpt(&[("w", &[2, 2], &[2.0, 3.0, 4.0, 5.0])]);
        let down = ckpt(&[("w", &[2, 2], &[0.0, 1.0, 2.0, 3.0])]);
        let taus = compute_task_vectors(
            &base,
            &[("u", &up), ("d", &down)],
            &LinearClassifier::default(),
        )
        .unwrap();
        assert_eq!(merge_task_arithmetic(&base, &taus, 1.0).unwrap(), base);
        assert_eq!(merge_task_arithmetic(&base, &taus[..1], 1.0).unwrap(), up);
        assert!(merge_task_arithmetic(&base, &[], 1.0).is_err());
    }

    #[test]
    fn report_lists_layers_and_metadata() {
        let base = ckpt(&[
            ("a.weight", &[2, 3], &[0.0; 6]),
            ("a.bias", &[2], &[0.0; 2]),
        ]);
        let m1 = ckpt(&[
            ("a.weight", &[2, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]),
            ("a.bias", &[2], &[1.0, 0.0]),
        ]);
        let m2 = ckpt(&[
            ("a.weight", &[2, 3], &[0.0, 0.0, 1.0, 0.0, 0.0, 0.0]),
            ("a.bias", &[2], &[0.0, 0.0]),
        ]);
        let cfg = MergeConfig {
            steps: 10,
            ..Default::default()
        };
        let (out, report) = merge_models(&base, &[("m1", &m1), ("m2", &m2)], &cfg).unwrap();
        assert_eq!(report.layers.len(), 1);
        assert_eq!(report.layers[0].name, "a.weight");
        assert_eq!(report.layers[0].steps_run, 10);
        assert_eq!(report.residual_rule, RESIDUAL_RULE_ALPHA);
        assert_eq!(out.metadata()["residual_merge"], RESIDUAL_RULE_ALPHA);
        // m2's bias delta is zero, so α puts everything on m1
        assert_eq!(out.get("a.bias").unwrap().values(), &[1.0, 0.0]);
        let json = serde_json::to_value(&report).unwrap();
        assert_eq!(json["config"]["step_rule"]["kind"], "adaptive");
        assert_eq!(json["config"]["method"], "amm");
    }

    #[test]
    fn misaligned_models_rejected() {
        let base = ckpt(&[("w", &[2, 2], &[0.0; 4])]);
        let other = ckpt(&[("v", &[2, 2], &[0.0; 4])]);
        let err = merge_models(&base, &[("x", &other)], &MergeConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Alignment { .. }));
    }

    #[test]
    fn alpha_average_handles_zero() {
        assert_eq!(alpha_average(&[&[0.0, 0.0], &[0.0, 0.0]]), vec![0.0, 0.0]);
        let out = alpha_average(&[&[1.0, 0.0], &[0.0, 3.0]]);
        assert!((out[0] - 0.1).abs() < 1e-15 && (out[1] - 2.7).abs() < 1e-15);
    }
}
