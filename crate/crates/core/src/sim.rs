//! Toy policy optimization over discrete response templates.
//!
//! Each synthetic question offers a fixed set of templates with a length and
//! a quality. A tabular softmax policy samples a group of templates per
//! question, rewards are noisy qualities, advantages come from GRPO or the
//! length-informed pipeline, and one clipped-surrogate ascent step follows.

use std::io::Write;
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lipo::{grpo_advantages, lipo_advantages, AdvantageMethod, LipoConfig, ResponseRecord};
use crate::par::{self, Schedule};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Template {
    pub length: usize,
    pub quality: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimTask {
    pub templates: Vec<Template>,
}

impl SimTask {
    pub fn new(templates: &[(usize, f64)]) -> Self {
        Self {
            templates: templates
                .iter()
                .map(|&(length, quality)| Template { length, quality })
                .collect(),
        }
    }

    /// Requires at least two templates and a high-quality option on each side
    /// of the length threshold.
    pub fn validate(&self, length_threshold: usize) -> Result<()> {
        if self.templates.len() < 2 {
            return Err(Error::Config("a task needs at least 2 templates".into()));
        }
        if let Some(t) = self
            .templates
            .iter()
            .find(|t| t.length == 0 || !(0.0..=1.0).contains(&t.quality))
        {
            return Err(Error::Config(format!("invalid template {t:?}")));
        }
        let good = |short: bool| {
            self.templates.iter().any(|t| {
                t.quality >= 0.9
                    && if short {
                        t.length < length_threshold
                    } else {
                        t.length > length_threshold
                    }
            })
        };
        if !good(true) || !good(false) {
            return Err(Error::Config(format!(
                "a task needs quality ≥ 0.9 templates both below and above length {length_threshold}"
            )));
        }
        Ok(())
    }
}

/// The shipped task suite.
pub fn default_tasks() -> Vec<SimTask> {
    vec![
        SimTask::new(&[(40, 0.95), (90, 0.95), (180, 0.95), (260, 0.95), (60, 0.4)]),
        SimTask::new(&[(70, 0.92), (150, 0.92), (300, 0.93), (30, 0.2)]),
        SimTask::new(&[(100, 1.0), (200, 1.0), (350, 1.0)]),
        SimTask::new(&[(50, 0.6), (110, 0.95), (240, 0.95), (400, 0.96)]),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub group_size: usize,
    pub steps: usize,
    pub clip: f64,
    pub kl_coeff: f64,
    pub step_size: f64,
    pub reward_noise_sd: f64,
    pub seed: u64,
    pub advantage_method: AdvantageMethod,
    pub lipo: LipoConfig,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            group_size: 5,
            steps: 200,
            clip: 0.2,
            kl_coeff: 0.0,
            step_size: 0.05,
            reward_noise_sd: 0.02,
            seed: 0,
            advantage_method: AdvantageMethod::Lipo,
            lipo: LipoConfig::default(),
        }
    }
}

/// Flat key-value form of [`SimConfig`]; LIPO fields sit at the top level.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct SimConfigFile {
    group_size: Option<usize>,
    steps: Option<usize>,
    clip: Option<f64>,
    kl_coeff: Option<f64>,
    step_size: Option<f64>,
    reward_noise_sd: Option<f64>,
    seed: Option<u64>,
    advantage_method: Option<AdvantageMethod>,
    eta: Option<f64>,
    alpha: Option<f64>,
    length_threshold: Option<usize>,
    min_length: Option<usize>,
    phi: Option<f64>,
    eps: Option<f64>,
}

impl SimConfig {
    /// Parses `key = value` lines; missing keys keep their defaults.
    pub fn from_kv_str(text: &str) -> Result<Self> {
        let f: SimConfigFile =
            toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        let mut cfg = SimConfig::default();
        macro_rules! set {
            ($($field:ident).+ <- $src:ident) => {
                if let Some(v) = f.$src {
                    cfg.$($field).+ = v;
                }
            };
        }
        set!(group_size <- group_size);
        set!(steps <- steps);
        set!(clip <- clip);
        set!(kl_coeff <- kl_coeff);
        set!(step_size <- step_size);
        set!(reward_noise_sd <- reward_noise_sd);
        set!(seed <- seed);
        set!(advantage_method <- advantage_method);
        set!(lipo.eta <- eta);
        set!(lipo.alpha <- alpha);
        set!(lipo.length_threshold <- length_threshold);
        set!(lipo.min_length <- min_length);
        set!(lipo.phi <- phi);
        set!(lipo.eps <- eps);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_kv_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_kv_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.group_size == 0 {
            return Err(Error::Config("group_size must be positive".into()));
        }
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return Err(Error::Config(format!(
                "clip must lie in (0, 1), got {}",
                self.clip
            )));
        }
        if !(self.kl_coeff >= 0.0 && self.reward_noise_sd >= 0.0) {
            return Err(Error::Config(
                "kl_coeff and reward_noise_sd must be non-negative".into(),
            ));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::Config("step_size must be positive".into()));
        }
        self.lipo.validate()
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn entropy(probs: &[f64]) -> f64 {
    -probs
        .iter()
        .filter(|p| **p > 0.0)
        .map(|p| p * p.ln())
        .sum::<f64>()
}

/// `KL(p ‖ q)` over a shared discrete support.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi / qi).ln())
        .sum()
}

/// Tabular softmax policy: one logit vector per task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimPolicy {
    pub logits: Vec<Vec<f64>>,
}

impl SimPolicy {
    pub fn uniform(tasks: &[SimTask]) -> Self {
        Self {
            logits: tasks.iter().map(|t| vec![0.0; t.templates.len()]).collect(),
        }
    }

    pub fn probs(&self, task: usize) -> Vec<f64> {
        softmax(&self.logits[task])
    }
}

/// One sampled rollout group.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledGroup {
    pub records: Vec<ResponseRecord>,
    pub actions: Vec<usize>,
    /// Sampling probability of each chosen action.
    pub old_probs: Vec<f64>,
}

pub fn sample_group(
    logits: &[f64],
    task: &SimTask,
    cfg: &SimConfig,
    rng: &mut ChaCha8Rng,
) -> SampledGroup {
    let probs = softmax(logits);
    let dist = WeightedIndex::new(&probs).expect("softmax yields valid weights");
    let noise = Normal::new(0.0, cfg.reward_noise_sd).expect("non-negative sd");
    let mut out = SampledGroup {
        records: Vec::with_capacity(cfg.group_size),
        actions: Vec::with_capacity(cfg.group_size),
        old_probs: Vec::with_capacity(cfg.group_size),
    };
    for i in 0..cfg.group_size {
        let a = dist.sample(rng);
        let t = task.templates[a];
        let reward = (t.quality + noise.sample(rng)).clamp(0.0, 1.0);
        out.records
            .push(ResponseRecord::new(i.to_string(), t.length, reward));
        out.actions.push(a);
        out.old_probs.push(probs[a]);
    }
    out
}

/// Clipped surrogate minus the KL penalty, averaged over the group.
pub fn surrogate(
    logits: &[f64],
    reference: &[f64],
    actions: &[usize],
    old_probs: &[f64],
    advantages: &[f64],
    cfg: &SimConfig,
) -> f64 {
    let probs = softmax(logits);
    let g = actions.len() as f64;
    let clipped: f64 = actions
        .iter()
        .zip(old_probs)
        .zip(advantages)
        .map(|((&a, &old), &adv)| {
            let r = probs[a] / old;
            (r * adv).min(r.clamp(1.0 - cfg.clip, 1.0 + cfg.clip) * adv)
        })
        .sum::<f64>()
        / g;
    let kl = if cfg.kl_coeff > 0.0 {
        kl_divergence(&probs, &softmax(reference))
    } else {
        0.0
    };
    clipped - cfg.kl_coeff * kl
}

/// Exact gradient of [`surrogate`] with respect to the logits. On a clip
/// boundary the unclipped branch is taken.
pub fn surrogate_gradient(
    logits: &[f64],
    reference: &[f64],
    actions: &[usize],
    old_probs: &[f64],
    advantages: &[f64],
    cfg: &SimConfig,
) -> Vec<f64> {
    let probs = softmax(logits);
    let g = actions.len() as f64;
    let mut grad = vec![0.0; logits.len()];
    for ((&a, &old), &adv) in actions.iter().zip(old_probs).zip(advantages) {
        let r = probs[a] / old;
        let active = if adv >= 0.0 {
            r <= 1.0 + cfg.clip
        } else {
            r >= 1.0 - cfg.clip
        };
        if !active || adv == 0.0 {
            continue;
        }
        // dr/dz_k = r (δ_ak − π_k)
        for (k, gk) in grad.iter_mut().enumerate() {
            let delta = if k == a { 1.0 } else { 0.0 };
            *gk += adv * r * (delta - probs[k]) / g;
        }
    }
    if cfg.kl_coeff > 0.0 {
        let ref_probs = softmax(reference);
        let kl = kl_divergence(&probs, &ref_probs);
        for (k, gk) in grad.iter_mut().enumerate() {
            if probs[k] > 0.0 {
                *gk -= cfg.kl_coeff * probs[k] * ((probs[k] / ref_probs[k]).ln() - kl);
            }
        }
    }
    grad
}

/// One ascent step on the surrogate; returns the new logits.
pub fn policy_update(
    logits: &[f64],
    reference: &[f64],
    sampled: &SampledGroup,
    advantages: &[f64],
    cfg: &SimConfig,
) -> Vec<f64> {
    let grad = surrogate_gradient(
        logits,
        reference,
        &sampled.actions,
        &sampled.old_probs,
        advantages,
        cfg,
    );
    logits
        .iter()
        .zip(grad)
        .map(|(z, g)| z + cfg.step_size * g)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub mean_length: f64,
    pub mean_reward: f64,
    pub mean_entropy: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct MetricsSeries {
    pub steps: Vec<StepMetrics>,
}

impl MetricsSeries {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Averages of length and reward over the last `fraction` of steps.
    pub fn tail_means(&self, fraction: f64) -> (f64, f64) {
        let n = ((self.steps.len() as f64 * fraction).ceil() as usize)
            .clamp(1, self.steps.len().max(1));
        let tail = &self.steps[self.steps.len().saturating_sub(n)..];
        let k = tail.len().max(1) as f64;
        (
            tail.iter().map(|s| s.mean_length).sum::<f64>() / k,
            tail.iter().map(|s| s.mean_reward).sum::<f64>() / k,
        )
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["step", "mean_length", "mean_reward", "mean_entropy"])?;
        for s in &self.steps {
            w.serialize((s.step, s.mean_length, s.mean_reward, s.mean_entropy))?;
        }
        w.flush().map_err(|e| Error::Csv(e.into()))?;
        Ok(())
    }

    pub fn write_csv_file(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimOutcome {
    pub metrics: MetricsSeries,
    pub policy: SimPolicy,
}

fn advantages_for(records: &[ResponseRecord], cfg: &SimConfig) -> Result<Vec<f64>> {
    match cfg.advantage_method {
        AdvantageMethod::Grpo => {
            let rewards: Vec<f64> = records.iter().map(|r| r.reward).collect();
            grpo_advantages(&rewards, cfg.lipo.eps)
        }
        AdvantageMethod::Lipo => Ok(lipo_advantages(records, &cfg.lipo)?.advantages()),
    }
}

/// Runs the sample → advantage → update loop, starting from a uniform
/// policy that also serves as the KL reference.
pub fn run_simulation(cfg: &SimConfig, tasks: &[SimTask]) -> Result<SimOutcome> {
    cfg.validate()?;
    for t in tasks {
        t.validate(cfg.lipo.length_threshold)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let reference = SimPolicy::uniform(tasks);
    let mut policy = reference.clone();
    let mut metrics = MetricsSeries::default();

    for step in 0..cfg.steps {
        let (mut len_sum, mut reward_sum, mut entropy_sum) = (0.0, 0.0, 0.0);
        for (ti, task) in tasks.iter().enumerate() {
            let logits = &policy.logits[ti];
            entropy_sum += entropy(&softmax(logits));
            let group = sample_group(logits, task, cfg, &mut rng);
            len_sum += group.records.iter().map(|r| r.length as f64).sum::<f64>();
            reward_sum += group.records.iter().map(|r| r.reward).sum::<f64>();
            let adv = advantages_for(&group.records, cfg)?;
            policy.logits[ti] = policy_update(logits, &reference.logits[ti], &group, &adv, cfg);
        }
        let samples = (tasks.len() * cfg.group_size).max(1) as f64;
        metrics.steps.push(StepMetrics {
            step,
            mean_length: len_sum / samples,
            mean_reward: reward_sum / samples,
            mean_entropy: entropy_sum / tasks.len().max(1) as f64,
        });
    }
    Ok(SimOutcome { metrics, policy })
}

/// Independent runs over `seeds`, in seed order.
pub fn run_seeds(
    cfg: &SimConfig,
    tasks: &[SimTask],
    seeds: &[u64],
    schedule: Schedule,
) -> Result<Vec<SimOutcome>> {
    par::try_map(seeds, schedule, |&seed| {
        let cfg = SimConfig {
            seed,
            ..cfg.clone()
        };
        run_simulation(&cfg, tasks)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> SimConfig {
        SimConfig::default()
    }

    #[test]
    fn default_suite_is_valid() {
        for t in default_tasks() {
            t.validate(120).unwrap();
        }
        assert!(SimTask::new(&[(10, 1.0)]).validate(120).is_err());
        assert!(SimTask::new(&[(10, 1.0), (20, 1.0)]).validate(120).is_err());
    }

    #[test]
    fn single_template_group_is_degenerate() {
        let task = SimTask::new(&[(50, 0.9)]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = sample_group(&[0.0], &task, &cfg(), &mut rng);
        assert!(g.records.iter().all(|r| r.length == 50));
        assert!(g.actions.iter().all(|a| *a == 0));
        assert!(g.records.iter().all(|r| (r.reward - 0.9).abs() < 0.2));
    }

    #[test]
    fn sampling_is_reproducible() {
        let task = SimTask::new(&[(50, 0.9), (200, 0.9)]);
        let c = SimConfig {
            reward_noise_sd: 0.0,
            ..cfg()
        };
        let a = sample_group(&[0.0, 0.0], &task, &c, &mut ChaCha8Rng::seed_from_u64(9));
        let b = sample_group(&[0.0, 0.0], &task, &c, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
        assert!(a.records.iter().all(|r| r.reward == 0.9));
        assert!(a.old_probs.iter().all(|p| *p == 0.5));
    }

    #[test]
    fn sampling_frequencies_match_softmax() {
        let task = SimTask::new(&[(10, 0.5), (20, 0.5), (30, 0.5)]);
        let logits = [0.3, -0.2, 1.1];
        let probs = softmax(&logits);
        let c = SimConfig {
            group_size: 100_000,
            ..cfg()
        };
        let g = sample_group(&logits, &task, &c, &mut ChaCha8Rng::seed_from_u64(4));
        let n = c.group_size as f64;
        for (k, p) in probs.iter().enumerate() {
            let count = g.actions.iter().filter(|a| **a == k).count() as f64;
            let sd = (n * p * (1.0 - p)).sqrt();
            assert!(
                (count - n * p).abs() <= 3.0 * sd,
                "action {k}: {count} vs {}",
                n * p
            );
        }
    }

    #[test]
    fn zero_advantages_leave_policy() {
        let logits = vec![0.1, -0.4, 0.3];
        let g = SampledGroup {
            records: vec![],
            actions: vec![0, 2, 2],
            old_probs: softmax(&logits).iter().copied().take(3).collect(),
        };
        let out = policy_update(&logits, &logits, &g, &[0.0; 3], &cfg());
        assert_eq!(out, logits);
    }

    #[test]
    fn positive_advantage_raises_probability() {
        let logits = vec![0.0; 3];
        let p = softmax(&logits);
        let g = SampledGroup {
            records: vec![],
            actions: vec![1],
            old_probs: vec![p[1]],
        };
        let out = policy_update(&logits, &logits, &g, &[1.0], &cfg());
        assert!(softmax(&out)[1] > p[1]);
    }

    fn fd_check(logits: &[f64], old: &[f64], c: &SimConfig) {
        let reference = vec![0.2, -0.1, 0.0, 0.4];
        let actions = [0, 2, 3, 2, 1];
        let old_probs: Vec<f64> = actions.iter().map(|&a| softmax(old)[a]).collect();
        let adv = [0.8, -1.2, 0.3, 0.5, -0.4];
        let grad = surrogate_gradient(logits, &reference, &actions, &old_probs, &adv, c);
        let h = 1e-6;
        for k in 0..logits.len() {
            let mut up = logits.to_vec();
            up[k] += h;
            let mut dn = logits.to_vec();
            dn[k] -= h;
            let fd = (surrogate(&up, &reference, &actions, &old_probs, &adv, c)
                - surrogate(&dn, &reference, &actions, &old_probs, &adv, c))
                / (2.0 * h);
            let rel = (fd - grad[k]).abs() / fd.abs().max(grad[k].abs()).max(1e-8);
            assert!(rel <= 1e-5, "k={k} fd={fd} analytic={}", grad[k]);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let logits = vec![0.3, -0.5, 0.1, 0.7];
        fd_check(&logits, &logits, &cfg());
        fd_check(
            &logits,
            &logits,
            &SimConfig {
                kl_coeff: 0.3,
                ..cfg()
            },
        );
        // off the old policy but with every ratio inside the clip range
        let moved = vec![0.32, -0.52, 0.12, 0.69];
        fd_check(
            &moved,
            &logits,
            &SimConfig {
                kl_coeff: 0.1,
                ..cfg()
            },
        );
        // ratios far outside the clip range: clipped samples drop out
        let far = vec![1.5, -1.0, 0.1, 0.7];
        fd_check(&far, &logits, &cfg());
    }

    #[test]
    fn synced_ratios_are_one() {
        let logits = vec![0.3, -0.5, 0.1, 0.7];
        let p = softmax(&logits);
        let actions = [0, 3, 3];
        let old: Vec<f64> = actions.iter().map(|&a| p[a]).collect();
        let adv = [1.0, -0.5, 0.25];
        let grad = surrogate_gradient(&logits, &logits, &actions, &old, &adv, &cfg());
        // plain policy gradient: Σ A_i ∇log π(a_i) / G
        let mut pg = vec![0.0; 4];
        for (&a, &ad) in actions.iter().zip(&adv) {
            for k in 0..4 {
                pg[k] += ad * ((k == a) as u8 as f64 - p[k]) / 3.0;
            }
        }
        for (a, b) in grad.iter().zip(&pg) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_steps_is_noop() {
        let c = SimConfig { steps: 0, ..cfg() };
        let out = run_simulation(&c, &default_tasks()).unwrap();
        assert!(out.metrics.is_empty());
        assert_eq!(out.policy, SimPolicy::uniform(&default_tasks()));
    }

    #[test]
    fn deterministic_and_normalized() {
        let c = SimConfig {
            steps: 30,
            seed: 5,
            ..cfg()
        };
        let a = run_simulation(&c, &default_tasks()).unwrap();
        let b = run_simulation(&c, &default_tasks()).unwrap();
        assert_eq!(a, b);
        for t in 0..default_tasks().len() {
            assert!((a.policy.probs(t).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn grpo_and_ablated_lipo_agree() {
        let ablated = LipoConfig {
            alpha: 0.0,
            phi: 0.0,
            ..LipoConfig::default()
        };
        let g = SimConfig {
            steps: 40,
            seed: 3,
            advantage_method: AdvantageMethod::Grpo,
            lipo: ablated,
            ..cfg()
        };
        let l = SimConfig {
            advantage_method: AdvantageMethod::Lipo,
            ..g.clone()
        };
        let a = run_simulation(&g, &default_tasks()).unwrap();
        let b = run_simulation(&l, &default_tasks()).unwrap();
        for (x, y) in a.metrics.steps.iter().zip(&b.metrics.steps) {
            assert_eq!(x.mean_length, y.mean_length);
            assert!((x.mean_reward - y.mean_reward).abs() < 1e-12);
        }
    }

    #[test]
    fn kv_config_parsing() {
        let c = SimConfig::from_kv_str(
            "steps = 10\ngroup_size = 7\neta = 0.3\nadvantage_method = \"grpo\"\n",
        )
        .unwrap();
        assert_eq!(c.steps, 10);
        assert_eq!(c.group_size, 7);
        assert_eq!(c.lipo.eta, 0.3);
        assert_eq!(c.advantage_method, AdvantageMethod::Grpo);
        assert_eq!(c.lipo.length_threshold, 120);
        assert!(SimConfig::from_kv_str("bogus = 1").is_err());
        assert!(SimConfig::from_kv_str("clip = 2.0").is_err());
    }

    #[test]
    fn csv_layout() {
        let c = SimConfig {
            steps: 2,
            seed: 1,
            ..cfg()
        };
        let out = run_simulation(&c, &default_tasks()).unwrap();
        let mut buf = Vec::new();
        out.metrics.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next(),
            Some("step,mean_length,mean_reward,mean_entropy")
        );
        assert!(lines.next().unwrap().starts_with("0,"));
        assert!(lines.next().unwrap().starts_with("1,"));
        assert_eq!(lines.next(), None);
    }
}
