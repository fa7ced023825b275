//! Group-relative policy optimization on a single-state softmax bandit.
//!
//! Each outer step freezes the current policy as the sampling policy, draws a
//! group of actions, standardizes their binary rewards within the group and
//! runs several gradient-ascent epochs on the mean clipped surrogate. Clip
//! events from every (sample, epoch) evaluation feed the step's statistics.

use std::path::Path;

use rand::distr::{weighted::WeightedIndex, Distribution as _};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::operator::{clip_ratio, token_objective, ClipMode, TokenContext};
use crate::solver::{RatioBounds, SolverConfig};

/// Softmax over a logit vector.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxPolicy {
    logits: Vec<f64>,
}

impl SoftmaxPolicy {
    pub fn new(logits: Vec<f64>) -> Result<SoftmaxPolicy> {
        if logits.len() < 2 {
            return Err(Error::Config("policy needs at least 2 actions".into()));
        }
        if logits.iter().any(|x| !x.is_finite()) {
            return Err(Error::Config("logits must be finite".into()));
        }
        Ok(SoftmaxPolicy { logits })
    }

    /// Policy with the given (full-support) action probabilities.
    pub fn from_probs(probs: &[f64]) -> Result<SoftmaxPolicy> {
        if probs.iter().any(|&p| !(p > 0.0)) {
            return Err(Error::Config("initial probabilities must be > 0".into()));
        }
        SoftmaxPolicy::new(probs.iter().map(|p| p.ln()).collect())
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn num_actions(&self) -> usize {
        self.logits.len()
    }

    pub fn probs(&self) -> Vec<f64> {
        softmax(&self.logits)
    }

    pub fn entropy(&self) -> f64 {
        policy_entropy(self)
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Shannon entropy in nats.
pub fn policy_entropy(policy: &SoftmaxPolicy) -> f64 {
    policy.probs().iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum()
}

/// `D_KL(reference || current) = sum_k ref_k ln(ref_k / cur_k)`.
pub fn kl_to_reference(reference: &[f64], current: &[f64]) -> f64 {
    reference
        .iter()
        .zip(current)
        .filter(|(&r, _)| r > 0.0)
        .map(|(&r, &c)| r * (r / c).ln())
        .sum()
}

/// A single-state bandit with reward 1 on `correct` actions and 0 elsewhere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BanditTask {
    pub initial_probs: Vec<f64>,
    pub correct: Vec<usize>,
}

impl BanditTask {
    pub fn new(initial_probs: Vec<f64>, mut correct: Vec<usize>) -> Result<BanditTask> {
        let v = initial_probs.len();
        if v < 2 {
            return Err(Error::Config("bandit needs at least 2 actions".into()));
        }
        let total: f64 = initial_probs.iter().sum();
        if initial_probs.iter().any(|&p| !(p > 0.0)) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config("initial probabilities must be > 0 and sum to 1".into()));
        }
        correct.sort_unstable();
        correct.dedup();
        if correct.is_empty() || correct.len() == v {
            return Err(Error::Config("correct set must be a nonempty proper subset".into()));
        }
        if let Some(&bad) = correct.iter().find(|&&a| a >= v) {
            return Err(Error::Config(format!("correct action {bad} out of range")));
        }
        Ok(BanditTask { initial_probs, correct })
    }

    /// The standard tail task: `actions` arms, arm 0 is the only correct
    /// one and starts at `tail_prob`; the remaining mass is spread evenly.
    pub fn tail(actions: usize, tail_prob: f64) -> Result<BanditTask> {
        if actions < 2 || !(tail_prob > 0.0 && tail_prob < 1.0) {
            return Err(Error::Config(
                "tail task needs >= 2 actions and tail_prob in (0, 1)".into(),
            ));
        }
        let rest = (1.0 - tail_prob) / (actions - 1) as f64;
        let mut probs = vec![rest; actions];
        probs[0] = tail_prob;
        BanditTask::new(probs, vec![0])
    }

    /// 100 arms with the correct one at probability 0.01.
    pub fn default_tail() -> BanditTask {
        BanditTask::tail(100, 0.01).expect("valid constants")
    }

    pub fn num_actions(&self) -> usize {
        self.initial_probs.len()
    }

    pub fn reward(&self, action: usize) -> f64 {
        if self.correct.binary_search(&action).is_ok() {
            1.0
        } else {
            0.0
        }
    }

    /// Whether some correct action starts below `threshold`.
    pub fn has_tail_correct(&self, threshold: f64) -> bool {
        self.correct.iter().any(|&a| self.initial_probs[a] < threshold)
    }

    pub fn expected_reward(&self, probs: &[f64]) -> f64 {
        self.correct.iter().map(|&a| probs[a]).sum()
    }

    pub fn initial_policy(&self) -> SoftmaxPolicy {
        SoftmaxPolicy::from_probs(&self.initial_probs).expect("validated in BanditTask::new")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub group_size: usize,
    pub learning_rate: f64,
    pub outer_steps: usize,
    pub inner_epochs: usize,
    pub clip_mode: ClipMode,
    pub beta: f64,
    pub seed: u64,
    pub low_prob_threshold: f64,
    pub solver: SolverConfig,
}

impl TrainConfig {
    pub fn new(clip_mode: ClipMode) -> TrainConfig {
        TrainConfig {
            group_size: 16,
            learning_rate: 0.5,
            outer_steps: 300,
            inner_epochs: 4,
            clip_mode,
            beta: 0.0,
            seed: 0,
            low_prob_threshold: 0.2,
            solver: SolverConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(Error::Config(format!(
                "group_size must be >= 2, got {}",
                self.group_size
            )));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config("learning_rate must be finite and > 0".into()));
        }
        if self.outer_steps == 0 || self.inner_epochs == 0 {
            return Err(Error::Config("outer_steps and inner_epochs must be positive".into()));
        }
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return Err(Error::Config("beta must be finite and >= 0".into()));
        }
        if !(self.low_prob_threshold > 0.0 && self.low_prob_threshold < 1.0) {
            return Err(Error::Config("low_prob_threshold must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Key-value file form of [`TrainConfig`]; every field optional.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfigFile {
    pub group_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub outer_steps: Option<usize>,
    pub inner_epochs: Option<usize>,
    pub mode: Option<String>,
    pub beta: Option<f64>,
    pub seed: Option<u64>,
    pub low_prob_threshold: Option<f64>,
    pub tolerance: Option<f64>,
}

impl TrainConfigFile {
    pub fn load(path: impl AsRef<Path>) -> Result<TrainConfigFile> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Overrides fields of `base` that are present in the file.
    pub fn apply(&self, base: &mut TrainConfig) -> Result<()> {
        if let Some(v) = self.group_size {
            base.group_size = v;
        }
        if let Some(v) = self.learning_rate {
            base.learning_rate = v;
        }
        if let Some(v) = self.outer_steps {
            base.outer_steps = v;
        }
        if let Some(v) = self.inner_epochs {
            base.inner_epochs = v;
        }
        if let Some(mode) = &self.mode {
            base.clip_mode = mode.parse()?;
        }
        if let Some(v) = self.beta {
            base.beta = v;
        }
        if let Some(v) = self.seed {
            base.seed = v;
        }
        if let Some(v) = self.low_prob_threshold {
            base.low_prob_threshold = v;
        }
        if let Some(v) = self.tolerance {
            base.solver = SolverConfig::new(v, base.solver.max_iterations)?;
        }
        Ok(())
    }
}

/// Group-standardized advantages with the population standard deviation.
/// Zero-variance groups get all-zero advantages.
pub fn group_advantages(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::Config(format!(
            "group needs at least 2 rewards, got {}",
            rewards.len()
        )));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < 1e-8 {
        return Ok(vec![0.0; rewards.len()]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClipEvent {
    pub old_prob: f64,
    pub clipped_high: bool,
    pub clipped_low: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct ClipStats {
    pub total: usize,
    pub clipped: usize,
    pub tail_clipped_high: usize,
    pub overall_clip_rate: f64,
    pub tail_cliphigh_fraction: f64,
}

impl ClipStats {
    fn from_counts(total: usize, clipped: usize, tail_clipped_high: usize) -> ClipStats {
        ClipStats {
            total,
            clipped,
            tail_clipped_high,
            overall_clip_rate: if total == 0 { 0.0 } else { clipped as f64 / total as f64 },
            tail_cliphigh_fraction: if clipped == 0 {
                0.0
            } else {
                tail_clipped_high as f64 / clipped as f64
            },
        }
    }
}

/// Clip rate over all events, and the share of clipped events that were
/// upper-clipped with old probability below `threshold`.
pub fn clip_statistics(events: &[ClipEvent], threshold: f64) -> ClipStats {
    let clipped = events.iter().filter(|e| e.clipped_high || e.clipped_low).count();
    let tail = events
        .iter()
        .filter(|e| e.clipped_high && e.old_prob < threshold)
        .count();
    ClipStats::from_counts(events.len(), clipped, tail)
}

/// One group of sampled actions frozen at the start of an outer step.
#[derive(Debug, Clone)]
pub struct Group {
    pub old_probs: Vec<f64>,
    pub reference_probs: Vec<f64>,
    pub actions: Vec<usize>,
    pub advantages: Vec<f64>,
}

/// Mean clipped surrogate over the group at `logits`, minus the KL penalty.
pub fn surrogate_objective(
    logits: &[f64],
    group: &Group,
    mode: &ClipMode,
    beta: f64,
    cfg: &SolverConfig,
) -> Result<f64> {
    let probs = softmax(logits);
    let kl = if beta > 0.0 {
        kl_to_reference(&group.reference_probs, &probs)
    } else {
        0.0
    };
    let mut total = 0.0;
    for (&a, &adv) in group.actions.iter().zip(&group.advantages) {
        let ctx = TokenContext {
            ratio: probs[a] / group.old_probs[a],
            old_prob: group.old_probs[a],
            advantage: adv,
            kl_penalty: kl,
            beta,
        };
        total += token_objective(mode, &ctx, cfg)?;
    }
    Ok(total / group.actions.len() as f64)
}

/// Gradient of [`surrogate_objective`] with respect to the logits, with the
/// clipped branch held constant. Also returns the clip events.
pub fn surrogate_gradient(
    logits: &[f64],
    group: &Group,
    mode: &ClipMode,
    beta: f64,
    cfg: &SolverConfig,
) -> Result<(Vec<f64>, Vec<ClipEvent>, Vec<f64>)> {
    let probs = softmax(logits);
    let g = group.actions.len() as f64;
    let mut grad = vec![0.0; logits.len()];
    let mut events = Vec::with_capacity(group.actions.len());
    let mut ratios = Vec::with_capacity(group.actions.len());
    let mut bounds_cache: Vec<Option<RatioBounds>> = vec![None; logits.len()];
    for (&a, &adv) in group.actions.iter().zip(&group.advantages) {
        let old = group.old_probs[a];
        let ratio = probs[a] / old;
        let ctx = TokenContext::new(ratio, old, adv);
        let outcome = match bounds_cache[a] {
            Some(bounds) => crate::operator::ClipOutcome {
                clipped_ratio: bounds.clip(ratio),
                bounds,
                clipped_high: ratio > bounds.upper,
                clipped_low: ratio < bounds.lower,
            },
            None => {
                let outcome = clip_ratio(mode, &ctx, cfg)?;
                bounds_cache[a] = Some(outcome.bounds);
                outcome
            }
        };
        events.push(ClipEvent {
            old_prob: old,
            clipped_high: outcome.clipped_high,
            clipped_low: outcome.clipped_low,
        });
        ratios.push(ratio);
        // d ratio / d logit_k = ratio * (1[k = a] - probs_k)
        let weight = outcome.surrogate_slope(ratio, adv) * ratio / g;
        if weight != 0.0 {
            for (gk, &pk) in grad.iter_mut().zip(&probs) {
                *gk -= weight * pk;
            }
            grad[a] += weight;
        }
    }
    if beta > 0.0 {
        // d/dz of -beta * KL(ref || softmax(z)) = -beta * (probs - ref)
        for ((gk, &pk), &rk) in grad.iter_mut().zip(&probs).zip(&group.reference_probs) {
            *gk -= beta * (pk - rk);
        }
    }
    Ok((grad, events, ratios))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepMetrics {
    pub step: usize,
    /// Mean sampled reward of the group.
    pub mean_reward: f64,
    /// Probability mass on correct actions after the update.
    pub expected_reward: f64,
    /// Entropy after the update.
    pub policy_entropy: f64,
    pub overall_clip_rate: f64,
    pub tail_cliphigh_fraction: f64,
    pub mean_ratio: f64,
    pub evaluations: usize,
    pub clipped: usize,
    pub tail_clipped_high: usize,
}

pub fn train_step(
    policy: &SoftmaxPolicy,
    reference: &[f64],
    task: &BanditTask,
    cfg: &TrainConfig,
    step: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(SoftmaxPolicy, StepMetrics)> {
    let old_probs = policy.probs();
    let sampler = WeightedIndex::new(&old_probs).map_err(|e| Error::Config(e.to_string()))?;
    let actions: Vec<usize> = (0..cfg.group_size).map(|_| sampler.sample(rng)).collect();
    let rewards: Vec<f64> = actions.iter().map(|&a| task.reward(a)).collect();
    let advantages = group_advantages(&rewards)?;
    let group = Group {
        old_probs,
        reference_probs: reference.to_vec(),
        actions,
        advantages,
    };

    let mut logits = policy.logits.clone();
    let mut events = Vec::with_capacity(cfg.group_size * cfg.inner_epochs);
    let mut ratio_sum = 0.0;
    for _ in 0..cfg.inner_epochs {
        let (grad, epoch_events, ratios) = surrogate_gradient(&logits, &group, &cfg.clip_mode, cfg.beta, &cfg.solver)?;
        events.extend(epoch_events);
        ratio_sum += ratios.iter().sum::<f64>();
        for (z, g) in logits.iter_mut().zip(&grad) {
            *z += cfg.learning_rate * g;
        }
        if logits.iter().any(|z| !z.is_finite()) {
            return Err(Error::Diverged { step });
        }
    }
    let updated = SoftmaxPolicy { logits };
    let probs = updated.probs();
    let stats = clip_statistics(&events, cfg.low_prob_threshold);
    let metrics = StepMetrics {
        step,
        mean_reward: rewards.iter().sum::<f64>() / rewards.len() as f64,
        expected_reward: task.expected_reward(&probs),
        policy_entropy: updated.entropy(),
        overall_clip_rate: stats.overall_clip_rate,
        tail_cliphigh_fraction: stats.tail_cliphigh_fraction,
        mean_ratio: ratio_sum / events.len() as f64,
        evaluations: stats.total,
        clipped: stats.clipped,
        tail_clipped_high: stats.tail_clipped_high,
    };
    Ok((updated, metrics))
}

/// Per-step metric series of one run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainMetrics {
    pub steps: Vec<StepMetrics>,
}

/// Run-level aggregates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrainSummary {
    pub final_entropy: f64,
    pub final_mean_reward: f64,
    pub final_expected_reward: f64,
    /// Clipped evaluations over all evaluations in the run.
    pub overall_clip_rate: f64,
    /// Tail clip-high events over all clipped events in the run.
    pub tail_cliphigh_fraction: f64,
}

impl TrainMetrics {
    pub fn summary(&self) -> TrainSummary {
        let last = self.steps.last().expect("runs have at least one step");
        let total: usize = self.steps.iter().map(|s| s.evaluations).sum();
        let clipped: usize = self.steps.iter().map(|s| s.clipped).sum();
        let tail: usize = self.steps.iter().map(|s| s.tail_clipped_high).sum();
        let stats = ClipStats::from_counts(total, clipped, tail);
        TrainSummary {
            final_entropy: last.policy_entropy,
            final_mean_reward: last.mean_reward,
            final_expected_reward: last.expected_reward,
            overall_clip_rate: stats.overall_clip_rate,
            tail_cliphigh_fraction: stats.tail_cliphigh_fraction,
        }
    }

    /// One JSON object per step, newline-terminated.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for step in &self.steps {
            out.push_str(&serde_json::to_string(step).expect("metrics serialize"));
            out.push('\n');
        }
        out
    }
}

pub fn run_training(task: &BanditTask, cfg: &TrainConfig) -> Result<TrainMetrics> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut policy = task.initial_policy();
    let reference = policy.probs();
    let mut steps = Vec::with_capacity(cfg.outer_steps);
    for step in 0..cfg.outer_steps {
        let (next, metrics) = train_step(&policy, &reference, task, cfg, step, &mut rng)?;
        policy = next;
        steps.push(metrics);
    }
    Ok(TrainMetrics { steps })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::divergence::DivergenceKind;
    use crate::solver::TrustRegion;
    use rand::Rng;

    fn approx(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() < tol)
    }

    #[test]
    fn advantages() {
        assert_eq!(group_advantages(&[1.0, 0.0]).unwrap(), vec![1.0, -1.0]);
        assert_eq!(group_advantages(&[1.0, 1.0, 1.0]).unwrap(), vec![0.0; 3]);
        let a = group_advantages(&[1.0, 0.0, 0.0, 0.0]).unwrap();
        let s3 = 3f64.sqrt();
        assert!(approx(&a, &[s3, -1.0 / s3, -1.0 / s3, -1.0 / s3], 1e-15), "{a:?}");
        assert!(group_advantages(&[1.0]).is_err());
    }

    #[test]
    fn entropy_values() {
        let uniform = SoftmaxPolicy::new(vec![0.0; 4]).unwrap();
        assert!((uniform.entropy() - 4f64.ln()).abs() < 1e-15);
        let two = SoftmaxPolicy::new(vec![0.3, 0.3]).unwrap();
        assert!((two.entropy() - 2f64.ln()).abs() < 1e-15);
        let peaked = SoftmaxPolicy::new(vec![60.0, 0.0, 0.0]).unwrap();
        assert!(peaked.entropy() < 1e-20);
    }

    #[test]
    fn clip_statistics_counts() {
        assert_eq!(clip_statistics(&[], 0.2), ClipStats::default());
        let mut events = vec![
            ClipEvent {
                old_prob: 0.5,
                clipped_high: false,
                clipped_low: false
            };
            10
        ];
        events[0] = ClipEvent {
            old_prob: 0.1,
            clipped_high: true,
            clipped_low: false,
        };
        events[1] = ClipEvent {
            old_prob: 0.05,
            clipped_high: true,
            clipped_low: false,
        };
        events[2] = ClipEvent {
            old_prob: 0.5,
            clipped_high: true,
            clipped_low: false,
        };
        events[3] = ClipEvent {
            old_prob: 0.1,
            clipped_high: false,
            clipped_low: true,
        };
        let s = clip_statistics(&events, 0.2);
        assert_eq!((s.overall_clip_rate, s.tail_cliphigh_fraction), (0.4, 0.5));
        let low: Vec<ClipEvent> = (0..3)
            .map(|_| ClipEvent {
                old_prob: 0.1,
                clipped_high: false,
                clipped_low: true,
            })
            .collect();
        assert_eq!(clip_statistics(&low, 0.2).tail_cliphigh_fraction, 0.0);
    }

    fn random_group(rng: &mut ChaCha8Rng, v: usize, g: usize) -> (Vec<f64>, Group) {
        let logits: Vec<f64> = (0..v).map(|_| rng.random_range(-1.0..1.0)).collect();
        let old_logits: Vec<f64> = logits.iter().map(|z| z + rng.random_range(-0.3..0.3)).collect();
        let reference: Vec<f64> = softmax(&(0..v).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>());
        let actions: Vec<usize> = (0..g).map(|_| rng.random_range(0..v)).collect();
        let advantages: Vec<f64> = (0..g).map(|_| rng.random_range(-2.0..2.0)).collect();
        let group = Group {
            old_probs: softmax(&old_logits),
            reference_probs: reference,
            actions,
            advantages,
        };
        (logits, group)
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cfg = SolverConfig::default();
        let modes = [
            ClipMode::FixedSymmetric(0.2),
            ClipMode::Band(TrustRegion::new(DivergenceKind::Kl, 0.05).unwrap()),
        ];
        for trial in 0..20 {
            let v = rng.random_range(2..=8);
            let g = rng.random_range(2..=4);
            let (logits, group) = random_group(&mut rng, v, g);
            let mode = &modes[trial % 2];
            let beta = if trial % 3 == 0 { 0.1 } else { 0.0 };
            let (grad, _, _) = surrogate_gradient(&logits, &group, mode, beta, &cfg).unwrap();
            for k in 0..v {
                let h = 1e-6;
                let mut plus = logits.clone();
                let mut minus = logits.clone();
                plus[k] += h;
                minus[k] -= h;
                let fd = (surrogate_objective(&plus, &group, mode, beta, &cfg).unwrap()
                    - surrogate_objective(&minus, &group, mode, beta, &cfg).unwrap())
                    / (2.0 * h);
                let scale = grad[k].abs().max(1e-3);
                assert!(
                    (fd - grad[k]).abs() / scale < 1e-5,
                    "trial {trial} k={k}: fd {fd} vs {}",
                    grad[k]
                );
            }
        }
    }

    fn small_task() -> BanditTask {
        BanditTask::new(vec![0.1, 0.3, 0.6], vec![0]).unwrap()
    }

    #[test]
    fn first_epoch_is_never_clipped() {
        let mut cfg = TrainConfig::new(ClipMode::FixedSymmetric(0.2));
        cfg.inner_epochs = 1;
        cfg.outer_steps = 20;
        let metrics = run_training(&small_task(), &cfg).unwrap();
        assert!(metrics
            .steps
            .iter()
            .all(|s| s.overall_clip_rate == 0.0 && s.mean_ratio == 1.0));
    }

    #[test]
    fn first_epoch_is_vanilla_policy_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (_, group) = random_group(&mut rng, 6, 4);
        let logits: Vec<f64> = group.old_probs.iter().map(|p| p.ln()).collect();
        let (grad, events, _) = surrogate_gradient(
            &logits,
            &group,
            &ClipMode::FixedSymmetric(0.2),
            0.0,
            &SolverConfig::default(),
        )
        .unwrap();
        assert!(events.iter().all(|e| !e.clipped_high && !e.clipped_low));
        let probs = softmax(&logits);
        let mut expected = vec![0.0; 6];
        for (&a, &adv) in group.actions.iter().zip(&group.advantages) {
            for k in 0..6 {
                let indicator = if k == a { 1.0 } else { 0.0 };
                expected[k] += adv * (indicator - probs[k]) / 4.0;
            }
        }
        assert!(approx(&grad, &expected, 1e-14));
    }

    #[test]
    fn positive_advantage_raises_correct_action() {
        let task = BanditTask::new(vec![0.5, 0.5], vec![0]).unwrap();
        let policy = task.initial_policy();
        let group = Group {
            old_probs: policy.probs(),
            reference_probs: policy.probs(),
            actions: vec![0, 1],
            advantages: group_advantages(&[1.0, 0.0]).unwrap(),
        };
        let mode = ClipMode::FixedSymmetric(0.2);
        let (grad, _, _) = surrogate_gradient(policy.logits(), &group, &mode, 0.0, &SolverConfig::default()).unwrap();
        assert!(grad[0] > 0.0 && grad[1] < 0.0);
        // a small step along the gradient increases the surrogate
        let stepped: Vec<f64> = policy.logits().iter().zip(&grad).map(|(z, g)| z + 1e-3 * g).collect();
        let before = surrogate_objective(policy.logits(), &group, &mode, 0.0, &SolverConfig::default()).unwrap();
        let after = surrogate_objective(&stepped, &group, &mode, 0.0, &SolverConfig::default()).unwrap();
        assert!(after > before);
        assert!(softmax(&stepped)[0] > 0.5);
    }

    #[test]
    fn zero_advantages_leave_policy_unchanged() {
        // every action is rewarded except one that can never be sampled in practice
        let task = BanditTask::new(vec![0.5 - 1e-300, 0.5, 1e-300], vec![0, 1]).unwrap();
        let mut cfg = TrainConfig::new(ClipMode::FixedSymmetric(0.2));
        cfg.outer_steps = 1;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let policy = task.initial_policy();
        let (next, _) = train_step(&policy, &policy.probs(), &task, &cfg, 0, &mut rng).unwrap();
        assert_eq!(next, policy);
    }

    #[test]
    fn kl_penalty_pulls_toward_reference() {
        let reference = softmax(&[0.0, 0.0, 0.0]);
        let mut logits = vec![1.0, -0.5, 0.2];
        let group = Group {
            old_probs: softmax(&logits),
            reference_probs: reference.clone(),
            actions: vec![0, 1],
            advantages: vec![0.0, 0.0],
        };
        let mode = ClipMode::FixedSymmetric(0.2);
        let cfg = SolverConfig::default();
        let mut kl = kl_to_reference(&reference, &softmax(&logits));
        for _ in 0..50 {
            let (grad, _, _) = surrogate_gradient(&logits, &group, &mode, 0.5, &cfg).unwrap();
            let probs = softmax(&logits);
            for k in 0..3 {
                assert!((grad[k] + 0.5 * (probs[k] - reference[k])).abs() < 1e-15);
            }
            for (z, g) in logits.iter_mut().zip(&grad) {
                *z += 0.5 * g;
            }
            let next = kl_to_reference(&reference, &softmax(&logits));
            assert!(next < kl);
            kl = next;
        }
        assert!(kl < 1e-3);
    }

    #[test]
    fn probabilities_stay_normalized() {
        let mut cfg = TrainConfig::new(ClipMode::Band(TrustRegion::new(DivergenceKind::Kl, 0.05).unwrap()));
        cfg.outer_steps = 50;
        let task = small_task();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut policy = task.initial_policy();
        let reference = policy.probs();
        for step in 0..50 {
            policy = train_step(&policy, &reference, &task, &cfg, step, &mut rng).unwrap().0;
            let total: f64 = policy.probs().iter().sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn runs_are_deterministic() {
        let mut cfg = TrainConfig::new(ClipMode::FixedSymmetric(0.2));
        cfg.outer_steps = 30;
        cfg.seed = 9;
        let a = run_training(&small_task(), &cfg).unwrap();
        let b = run_training(&small_task(), &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_jsonl().lines().count(), 30);
    }

    #[test]
    fn divergence_is_reported() {
        let mut cfg = TrainConfig::new(ClipMode::FixedSymmetric(0.2));
        cfg.learning_rate = 1e300;
        cfg.beta = 1e300;
        cfg.outer_steps = 50;
        let task = BanditTask::new(vec![0.5, 0.5], vec![0]).unwrap();
        assert!(matches!(run_training(&task, &cfg), Err(Error::Diverged { .. })));
    }

    #[test]
    fn default_tail_task() {
        let task = BanditTask::default_tail();
        assert_eq!(task.num_actions(), 100);
        assert_eq!(task.correct, vec![0]);
        assert!(task.has_tail_correct(0.05));
        assert!((task.initial_probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        let mut cfg = TrainConfig::new(ClipMode::FixedSymmetric(0.2));
        cfg.group_size = 1;
        assert!(cfg.validate().is_err());
        assert!(BanditTask::new(vec![0.5, 0.5], vec![]).is_err());
        assert!(BanditTask::new(vec![0.5, 0.5], vec![0, 1]).is_err());
        assert!(BanditTask::new(vec![0.5, 0.6], vec![0]).is_err());
    }

    #[test]
    fn config_file_overrides() {
        let file: TrainConfigFile = toml::from_str("mode = \"band:kl:0.05\"\nseed = 7\ngroup_size = 8\n").unwrap();
        let mut cfg = TrainConfig::new(ClipMode::FixedSymmetric(0.2));
        file.apply(&mut cfg).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.group_size, 8);
        assert_eq!(cfg.clip_mode.to_string(), "band:kl:0.05");
        assert!(toml::from_str::<TrainConfigFile>("unknown = 1").is_err());
    }
}
