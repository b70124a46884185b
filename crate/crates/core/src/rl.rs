//! Clipped policy-gradient updates for the controllers and the motion-average
//! reward tracker.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::controller::{accumulate_into, trace_fingerprint, ControllerPolicy, Init, JointPolicy, SampleTrace};
use crate::error::{Error, Result};
use crate::space::Architecture;
use crate::tensor::{Adam, AdamConfig, Graph, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    /// Negative running mean of every validation error seen for the key.
    MotionAverage,
    /// Negative validation error of the trial alone.
    SingleTrial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PpoConfig {
    pub clip_epsilon: f64,
    pub lr: f64,
    /// Subtract an exponential moving average of past rewards.
    pub use_advantage: bool,
    pub baseline_decay: f64,
    pub entropy_weight: f64,
    pub reward_mode: RewardMode,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            clip_epsilon: 0.2,
            lr: 3e-4,
            use_advantage: true,
            baseline_decay: 0.95,
            entropy_weight: 1e-2,
            reward_mode: RewardMode::MotionAverage,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            return Err(Error::Contract(format!(
                "clip epsilon {} is outside (0, 1)",
                self.clip_epsilon
            )));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Contract(format!("learning rate {} must be positive", self.lr)));
        }
        if !(0.0..1.0).contains(&self.baseline_decay) || !(self.entropy_weight >= 0.0) {
            return Err(Error::Contract(format!(
                "baseline decay {} or entropy weight {} out of range",
                self.baseline_decay, self.entropy_weight
            )));
        }
        Ok(())
    }

    pub fn adam(&self) -> Adam {
        Adam::new(AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        })
    }
}

/// The clip target: `(1+eps) r` for non-negative `r`, `(1-eps) r` otherwise.
pub fn clip_target(reward: f64, epsilon: f64) -> f64 {
    if reward >= 0.0 {
        (1.0 + epsilon) * reward
    } else {
        (1.0 - epsilon) * reward
    }
}

/// Per-sample clipped surrogate `min(ratio * r, g(eps, r))`.
pub fn ppo_objective(log_prob_new: f64, log_prob_old: f64, reward: f64, epsilon: f64) -> f64 {
    let ratio = (log_prob_new - log_prob_old).exp();
    (ratio * reward).min(clip_target(reward, epsilon))
}

/// Sum of the stream and fusion log-probabilities. The fusion trace must
/// have been sampled conditioned on exactly `stream_traces`.
pub fn joint_log_prob(stream_traces: &[&SampleTrace], fusion_trace: &SampleTrace) -> Result<f64> {
    match fusion_trace.conditioned_on {
        Some(fp) if fp == trace_fingerprint(stream_traces) => {}
        Some(_) => {
            return Err(Error::Factorization(
                "fusion trace was conditioned on different stream traces".into(),
            ))
        }
        None => return Err(Error::Factorization("trace carries no fusion conditioning".into())),
    }
    if stream_traces.iter().any(|t| t.conditioned_on.is_some()) {
        return Err(Error::Factorization(
            "a fusion trace was passed as a stream trace".into(),
        ));
    }
    Ok(stream_traces.iter().map(|t| t.total_log_prob).sum::<f64>() + fusion_trace.total_log_prob)
}

/// Error-free accumulation of doubles (Shewchuk partials); [`ExactSum::value`]
/// is the correctly rounded sum, independent of insertion order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExactSum {
    partials: Vec<f64>,
}

impl ExactSum {
    pub fn add(&mut self, value: f64) {
        let mut x = value;
        let mut i = 0;
        for j in 0..self.partials.len() {
            let mut y = self.partials[j];
            if x.abs() < y.abs() {
                core::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                self.partials[i] = lo;
                i += 1;
            }
            x = hi;
        }
        self.partials.truncate(i);
        self.partials.push(x);
    }

    pub fn value(&self) -> f64 {
        let p = &self.partials;
        let mut n = p.len();
        if n == 0 {
            return 0.0;
        }
        n -= 1;
        let mut hi = p[n];
        let mut lo = 0.0;
        while n > 0 {
            let x = hi;
            n -= 1;
            let y = p[n];
            hi = x + y;
            lo = y - (hi - x);
            if lo != 0.0 {
                break;
            }
        }
        // round half-even across the remaining partials
        if n > 0 && ((lo < 0.0 && p[n - 1] < 0.0) || (lo > 0.0 && p[n - 1] > 0.0)) {
            let y = lo * 2.0;
            let x = hi + y;
            if y == x - hi {
                hi = x;
            }
        }
        hi
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrackerEntry {
    pub count: u64,
    sum: ExactSum,
    /// Welford running second moment, for diagnostics only.
    m2: f64,
    running_mean: f64,
}

impl TrackerEntry {
    pub fn mean(&self) -> f64 {
        self.sum.value() / self.count as f64
    }

    /// Population variance of the observed errors.
    pub fn variance(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.m2 / self.count as f64
        }
    }
}

/// Running mean validation error per canonical architecture key.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MotionAverageTracker {
    entries: BTreeMap<String, TrackerEntry>,
}

impl MotionAverageTracker {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records one validation error and returns the updated mean.
    pub fn observe(&mut self, key: &str, e_val: f64) -> Result<f64> {
        if !e_val.is_finite() || e_val < 0.0 {
            return Err(Error::InvalidError(e_val));
        }
        let e = self.entries.entry(key.into()).or_default();
        e.count += 1;
        e.sum.add(e_val);
        let delta = e_val - e.running_mean;
        e.running_mean += delta / e.count as f64;
        e.m2 += delta * (e_val - e.running_mean);
        Ok(e.mean())
    }

    pub fn mean(&self, key: &str) -> Option<f64> {
        self.entries.get(key).map(TrackerEntry::mean)
    }

    pub fn count(&self, key: &str) -> u64 {
        self.entries.get(key).map_or(0, |e| e.count)
    }

    pub fn entry(&self, key: &str) -> Option<&TrackerEntry> {
        self.entries.get(key)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &TrackerEntry)> {
        self.entries.iter().map(|(k, e)| (k.as_str(), e))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Records `e_val` and returns the reward under `mode`.
pub fn reward(tracker: &mut MotionAverageTracker, key: &str, e_val: f64, mode: RewardMode) -> Result<f64> {
    let mean = tracker.observe(key, e_val)?;
    Ok(match mode {
        RewardMode::MotionAverage => -mean,
        RewardMode::SingleTrial => -e_val,
    })
}

/// Exponential moving average of batch-mean rewards.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Baseline {
    pub value: Option<f64>,
}

impl Baseline {
    /// Advantages against the current baseline, then folds the batch in.
    /// The first batch is centred on its own mean.
    pub fn advantages(&mut self, rewards: &[f64], cfg: &PpoConfig) -> Vec<f64> {
        if !cfg.use_advantage {
            return rewards.to_vec();
        }
        let mean = rewards.iter().sum::<f64>() / rewards.len() as f64;
        let b = self.value.unwrap_or(mean);
        self.value = Some(cfg.baseline_decay * b + (1.0 - cfg.baseline_decay) * mean);
        rewards.iter().map(|r| r - b).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    /// Mean clipped surrogate before the step.
    pub objective: f64,
    pub mean_reward: f64,
    /// Population standard deviation of the batch rewards.
    pub reward_std: f64,
    pub mean_advantage: f64,
    /// Fraction of samples whose surrogate took the clip target.
    pub clip_fraction: f64,
    pub mean_entropy: f64,
}

fn check_batch(n: usize, old: &[f64], rewards: &[f64]) -> Result<()> {
    if n == 0 || old.len() != n || rewards.len() != n {
        return Err(Error::Contract(format!(
            "batch of {n} samples with {} old log-probs and {} rewards",
            old.len(),
            rewards.len()
        )));
    }
    if rewards.iter().chain(old).any(|v| !v.is_finite()) {
        return Err(Error::Contract("rewards and log-probs must be finite".into()));
    }
    Ok(())
}

/// Builds the negated objective `-(mean J + w * mean entropy)` on the tape.
fn surrogate_loss(
    g: &mut Graph,
    log_prob: Var,
    entropy: Var,
    old: &[f64],
    adv: &[f64],
    rewards: &[f64],
    cfg: &PpoConfig,
) -> Result<(Var, UpdateStats)> {
    let n = old.len();
    let old_v = g.constant(Tensor::vector(old.to_vec()));
    let adv_v = g.constant(Tensor::vector(adv.to_vec()));
    let targets: Vec<f64> = adv.iter().map(|&a| clip_target(a, cfg.clip_epsilon)).collect();
    let target_v = g.constant(Tensor::vector(targets.clone()));
    let diff = g.sub(log_prob, old_v)?;
    let ratio = g.exp(diff);
    let unclipped = g.mul(ratio, adv_v)?;
    let j = g.min(unclipped, target_v)?;
    let j_mean = g.mean(j);
    let ent_mean = g.mean(entropy);
    let bonus = g.scale(ent_mean, cfg.entropy_weight);
    let total = g.add(j_mean, bonus)?;
    let loss = g.neg(total);

    let un = g.value(unclipped).data().to_vec();
    let clipped = un.iter().zip(&targets).filter(|(u, t)| u > t).count();
    let mean_reward = rewards.iter().sum::<f64>() / n as f64;
    let var = rewards
        .iter()
        .map(|r| (r - mean_reward) * (r - mean_reward))
        .sum::<f64>()
        / n as f64;
    let stats = UpdateStats {
        objective: g.value(j_mean).item()?,
        mean_reward,
        reward_std: var.sqrt(),
        mean_advantage: adv.iter().sum::<f64>() / n as f64,
        clip_fraction: clipped as f64 / n as f64,
        mean_entropy: g.value(ent_mean).item()?,
    };
    Ok((loss, stats))
}

/// Writes the gradient of the negated surrogate into the policy's parameter
/// gradients (after zeroing them) without stepping.
pub fn stream_surrogate_gradient(
    policy: &mut ControllerPolicy,
    tokens: &[Vec<usize>],
    old_log_probs: &[f64],
    advantages: &[f64],
    rewards: &[f64],
    cfg: &PpoConfig,
) -> Result<UpdateStats> {
    check_batch(tokens.len(), old_log_probs, rewards)?;
    for t in tokens {
        policy.check_tokens(t)?;
    }
    let mut g = Graph::new();
    let pv = policy.param_vars(&mut g);
    let u = policy.unroll(&mut g, &pv, tokens.len(), Init::Start, &mut |t, _, _| {
        Ok(tokens.iter().map(|s| s[t]).collect())
    })?;
    let (loss, stats) = surrogate_loss(&mut g, u.log_prob, u.entropy, old_log_probs, advantages, rewards, cfg)?;
    let grads = g.backward_full(loss)?;
    policy.params_mut().zero_grad();
    accumulate_into(policy.params_mut(), &grads, &pv);
    Ok(stats)
}

/// One Adam ascent step of a stream controller on a batch of sampled token
/// sequences.
pub fn update_stream(
    policy: &mut ControllerPolicy,
    opt: &mut Adam,
    baseline: &mut Baseline,
    tokens: &[Vec<usize>],
    old_log_probs: &[f64],
    rewards: &[f64],
    cfg: &PpoConfig,
) -> Result<UpdateStats> {
    cfg.validate()?;
    check_batch(tokens.len(), old_log_probs, rewards)?;
    let adv = baseline.advantages(rewards, cfg);
    let stats = stream_surrogate_gradient(policy, tokens, old_log_probs, &adv, rewards, cfg)?;
    opt.step(policy.params_mut())?;
    Ok(stats)
}

/// One Adam optimizer per controller of a joint policy.
pub fn joint_optimizers(policy: &JointPolicy, cfg: &PpoConfig) -> Vec<Adam> {
    vec![cfg.adam(); policy.streams.len() + 1]
}

/// One ascent step of every controller on a batch of joint architectures.
/// The joint log-probability is built on a single tape, so the fusion term
/// also updates the stream controllers through the conditioning.
pub fn update_joint(
    policy: &mut JointPolicy,
    opts: &mut [Adam],
    baseline: &mut Baseline,
    archs: &[Architecture],
    old_log_probs: &[f64],
    rewards: &[f64],
    cfg: &PpoConfig,
) -> Result<UpdateStats> {
    cfg.validate()?;
    check_batch(archs.len(), old_log_probs, rewards)?;
    if opts.len() != policy.streams.len() + 1 {
        return Err(Error::Contract("one optimizer per controller is required".into()));
    }
    let adv = baseline.advantages(rewards, cfg);
    let mut g = Graph::new();
    let pvs = policy.param_vars(&mut g);
    let u = policy.unroll(&mut g, &pvs, archs)?;
    let (loss, stats) = surrogate_loss(&mut g, u.log_prob, u.entropy, old_log_probs, &adv, rewards, cfg)?;
    let grads = g.backward_full(loss)?;
    policy.streams.iter_mut().for_each(|p| p.params_mut().zero_grad());
    policy.fusion.params_mut().zero_grad();
    policy.accumulate_grads(&grads, &pvs);
    let policies = policy.streams.iter_mut().chain(core::iter::once(&mut policy.fusion));
    for (p, opt) in policies.zip(opts.iter_mut()) {
        opt.step(p.params_mut())?;
    }
    Ok(stats)
}

/// Exact log-probabilities of `archs` under the joint policy.
pub fn joint_log_probs(policy: &JointPolicy, archs: &[Architecture]) -> Result<Vec<f64>> {
    let mut g = Graph::eval();
    let pvs = policy.param_vars(&mut g);
    let u = policy.unroll(&mut g, &pvs, archs)?;
    Ok(g.value(u.log_prob).data().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::child::fixture::small_joint_space;
    use crate::controller::PolicyRole;
    use crate::rng::Rng;
    use crate::space::enumerate_joint;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn objective_hand_cases() {
        assert!(close(ppo_objective(1.5f64.ln(), 0.0, 1.0, 0.2), 1.2));
        assert!(close(ppo_objective(0.0, 0.0, -2.0, 0.2), -2.0));
        assert_eq!(ppo_objective(0.3, -0.1, 0.0, 0.2), 0.0);
        // ratio 0.5 against a negative reward: the clip target is smaller
        assert!(close(ppo_objective(0.5f64.ln(), 0.0, -1.0, 0.2), -0.8));
        assert!(close(ppo_objective(0.5f64.ln(), 0.0, 1.0, 0.2), 0.5));
    }

    #[test]
    fn joint_distribution_sums_to_one() {
        let (space, _) = small_joint_space();
        let policy = JointPolicy::new(&space, 6, 3).unwrap();
        let archs = enumerate_joint(&space, 1 << 12).unwrap();
        let total: f64 = joint_log_probs(&policy, &archs).unwrap().iter().map(|l| l.exp()).sum();
        assert!((total - 1.0).abs() < 1e-10, "{total}");
    }

    #[test]
    fn joint_log_prob_matches_the_scored_architecture() {
        let (space, _) = small_joint_space();
        let policy = JointPolicy::new(&space, 5, 4).unwrap();
        let trace = policy.sample(9).unwrap();
        let refs: Vec<&SampleTrace> = trace.streams.iter().collect();
        let lp = joint_log_prob(&refs, &trace.fusion).unwrap();
        let scored = joint_log_probs(&policy, &[trace.architecture(&space)]).unwrap()[0];
        assert!((lp - scored).abs() < 1e-12);

        let other = policy.sample(10).unwrap();
        let swapped: Vec<&SampleTrace> = vec![&other.streams[0], &trace.streams[1]];
        if other.streams[0] != trace.streams[0] {
            assert!(matches!(
                joint_log_prob(&swapped, &trace.fusion),
                Err(Error::Factorization(_))
            ));
        }
        assert!(matches!(
            joint_log_prob(&refs, &trace.streams[0]),
            Err(Error::Factorization(_))
        ));
    }

    fn manual_trace(total: f64) -> SampleTrace {
        SampleTrace {
            tokens: vec![0],
            log_probs: vec![total],
            total_log_prob: total,
            final_h: vec![0.5],
            final_c: vec![total],
            conditioned_on: None,
        }
    }

    #[test]
    fn joint_log_prob_adds_the_factors() {
        let (a, b) = (manual_trace(-1.0), manual_trace(-1.0));
        let mut f = manual_trace(-0.5);
        f.conditioned_on = Some(trace_fingerprint(&[&a, &b]));
        assert_eq!(joint_log_prob(&[&a, &b], &f).unwrap(), -2.5);
        // a fusion trace sampled for a different pair is refused
        let c = manual_trace(-1.25);
        assert!(matches!(joint_log_prob(&[&a, &c], &f), Err(Error::Factorization(_))));
    }

    #[test]
    fn deterministic_policies_have_zero_log_prob() {
        use crate::space::{
            Choice, CnnOp, DecisionSlot, FusionOp, FusionSearchSpace, JointSpace, StreamKind, StreamSearchSpace,
        };
        use crate::spectral::AttributeKind;
        let stream = StreamSearchSpace {
            stream_id: "s".into(),
            attribute: AttributeKind::Aus,
            kind: StreamKind::Cnn,
            slots: vec![DecisionSlot::new("l0", vec![Choice::Cnn(CnnOp::Identity)])],
        };
        let blocks = vec![DecisionSlot::new(
            "b0",
            vec![Choice::Fusion {
                op: FusionOp::Add,
                width: 2,
            }],
        )];
        let fusion = FusionSearchSpace::new(core::slice::from_ref(&stream), blocks);
        let space = JointSpace {
            streams: vec![stream],
            fusion,
        };
        let policy = JointPolicy::new(&space, 3, 0).unwrap();
        let t = policy.sample(1).unwrap();
        assert_eq!(joint_log_prob(&[&t.streams[0]], &t.fusion).unwrap(), 0.0);
    }

    #[test]
    fn zero_rewards_leave_parameters_unchanged() {
        let cfg = PpoConfig {
            entropy_weight: 0.0,
            ..PpoConfig::default()
        };
        let mut p = bandit(vec![3, 2], 8);
        let before = p.params().flat_values();
        let mut opt = cfg.adam();
        let mut base = Baseline::default();
        for seed in 0..2 {
            let t = p.sample(seed).unwrap();
            update_stream(
                &mut p,
                &mut opt,
                &mut base,
                &[t.tokens],
                &[t.total_log_prob],
                &[0.0],
                &cfg,
            )
            .unwrap();
        }
        assert_eq!(p.params().flat_values(), before);
    }

    #[test]
    fn empty_batches_are_rejected() {
        let cfg = PpoConfig::default();
        let mut p = bandit(vec![2], 1);
        let mut opt = cfg.adam();
        let r = update_stream(&mut p, &mut opt, &mut Baseline::default(), &[], &[], &[], &cfg);
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn exact_sum_is_order_independent() {
        let mut rng = Rng::new(1);
        let mut xs: Vec<f64> = (0..500)
            .map(|_| rng.normal() * 10f64.powi(rng.below(20) as i32 - 10))
            .collect();
        let mut a = ExactSum::default();
        xs.iter().for_each(|&x| a.add(x));
        rng.shuffle(&mut xs);
        let mut b = ExactSum::default();
        xs.iter().for_each(|&x| b.add(x));
        assert_eq!(a.value().to_bits(), b.value().to_bits());
        let mut c = ExactSum::default();
        for x in [1e100, 1.0, -1e100, 1e-30] {
            c.add(x);
        }
        assert_eq!(c.value(), 1.0 + 1e-30);
    }

    #[test]
    fn tracker_mean_matches_compensated_sum() {
        let mut rng = Rng::new(2);
        let mut t = MotionAverageTracker::new();
        let mut vals: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for _ in 0..10_000 {
            let key = format!("k{}", rng.below(7));
            let e = rng.uniform_range(0.0, 24.0);
            t.observe(&key, e).unwrap();
            vals.entry(key).or_default().push(e);
        }
        for (k, v) in &vals {
            // Neumaier summation
            let (mut s, mut c) = (0.0f64, 0.0f64);
            for &x in v {
                let y = s + x;
                c += if s.abs() >= x.abs() { (s - y) + x } else { (x - y) + s };
                s = y;
            }
            let oracle = (s + c) / v.len() as f64;
            assert!((t.mean(k).unwrap() - oracle).abs() < 1e-12);
            assert_eq!(t.count(k), v.len() as u64);
        }
    }

    #[test]
    fn invalid_errors_leave_the_tracker_untouched() {
        let mut t = MotionAverageTracker::new();
        t.observe("a", 2.0).unwrap();
        let before = t.clone();
        for bad in [f64::NAN, f64::INFINITY, -1.0] {
            assert!(matches!(t.observe("a", bad), Err(Error::InvalidError(_))));
            assert!(matches!(
                reward(&mut t, "b", bad, RewardMode::MotionAverage),
                Err(Error::InvalidError(_))
            ));
        }
        assert_eq!(t, before);
    }

    #[test]
    fn reward_modes() {
        let mut t = MotionAverageTracker::new();
        assert_eq!(reward(&mut t, "a", 2.0, RewardMode::MotionAverage).unwrap(), -2.0);
        assert_eq!(reward(&mut t, "a", 4.0, RewardMode::MotionAverage).unwrap(), -3.0);
        assert_eq!(reward(&mut t, "a", 6.0, RewardMode::SingleTrial).unwrap(), -6.0);
        assert_eq!(t.mean("a"), Some(4.0));
    }

    fn bandit(arities: Vec<usize>, seed: u64) -> ControllerPolicy {
        ControllerPolicy::new(PolicyRole::Stream("b".into()), arities, 4, seed).unwrap()
    }

    #[test]
    fn surrogate_gradient_is_the_score_function_estimator() {
        let cfg = PpoConfig {
            entropy_weight: 0.0,
            ..PpoConfig::default()
        };
        let mut rng = Rng::new(5);
        let mut p = bandit(vec![3, 2], 6);
        for q in p.params_mut().iter_mut() {
            q.value
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = rng.uniform_range(-1.0, 1.0));
        }
        let tokens: Vec<Vec<usize>> = (0..5).map(|_| vec![rng.below(3), rng.below(2)]).collect();
        let old: Vec<f64> = tokens.iter().map(|t| p.score(t).unwrap()).collect();
        let adv: Vec<f64> = (0..5).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
        stream_surrogate_gradient(&mut p, &tokens, &old, &adv, &adv, &cfg).unwrap();
        let got = p.params().flat_grads();

        // ratio is 1 at the old policy, so the gradient of the negated
        // surrogate is -mean(A * grad log pi), estimated by central differences
        let h = 1e-6;
        let mut expected = Vec::new();
        let n_params = p.params().len();
        for pi in 0..n_params {
            let len = p.params().iter().nth(pi).unwrap().value.len();
            for e in 0..len {
                let obj = |delta: f64| {
                    let mut q = p.clone();
                    q.params_mut().iter_mut().nth(pi).unwrap().value.data_mut()[e] += delta;
                    tokens
                        .iter()
                        .zip(&adv)
                        .map(|(t, a)| a * q.score(t).unwrap())
                        .sum::<f64>()
                        / tokens.len() as f64
                };
                expected.push(-(obj(h) - obj(-h)) / (2.0 * h));
            }
        }
        for (a, b) in got.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-6 * (1.0 + b.abs()), "{a} vs {b}");
        }
    }

    #[test]
    fn clipped_samples_contribute_no_gradient() {
        let cfg = PpoConfig {
            entropy_weight: 0.0,
            ..PpoConfig::default()
        };
        let mut p = bandit(vec![3], 7);
        let lp = p.score(&[1]).unwrap();
        // ratio 2 against a positive advantage takes the constant clip target
        let stats = stream_surrogate_gradient(&mut p, &[vec![1]], &[lp - 2f64.ln()], &[1.0], &[1.0], &cfg).unwrap();
        assert_eq!(stats.clip_fraction, 1.0);
        assert!((stats.objective - 1.2).abs() < 1e-12);
        assert!(p.params().flat_grads().iter().all(|&g| g == 0.0));
    }

    fn run_bandit(seed: u64, shift: f64, updates: usize) -> (ControllerPolicy, Vec<f64>) {
        let cfg = PpoConfig {
            lr: 0.05,
            ..PpoConfig::default()
        };
        let mut p = bandit(vec![2], seed);
        let mut opt = cfg.adam();
        let mut base = Baseline::default();
        let mut tracker = MotionAverageTracker::new();
        let mut probs = Vec::new();
        for step in 0..updates {
            let traces: Vec<SampleTrace> = (0..8)
                .map(|i| {
                    p.sample(crate::rng::derive_seed(seed, (step * 100 + i) as u64))
                        .unwrap()
                })
                .collect();
            let tokens: Vec<Vec<usize>> = traces.iter().map(|t| t.tokens.clone()).collect();
            let old: Vec<f64> = traces.iter().map(|t| t.total_log_prob).collect();
            let rewards: Vec<f64> = tokens
                .iter()
                .map(|t| {
                    let e = if t[0] == 0 { 2.0 } else { 1.0 };
                    reward(&mut tracker, &format!("arm{}", t[0]), e, cfg.reward_mode).unwrap() + shift
                })
                .collect();
            update_stream(&mut p, &mut opt, &mut base, &tokens, &old, &rewards, &cfg).unwrap();
            probs.push(p.score(&[1]).unwrap().exp());
        }
        (p, probs)
    }

    #[test]
    fn two_arm_bandit_prefers_the_lower_error() {
        for seed in 0..5 {
            let (_, probs) = run_bandit(seed, 0.0, 200);
            let last = *probs.last().unwrap();
            assert!(last > 0.9, "seed {seed}: p = {last}");
        }
    }

    #[test]
    fn baseline_makes_updates_shift_invariant() {
        let (a, _) = run_bandit(11, 0.0, 15);
        let (b, _) = run_bandit(11, 5.0, 15);
        for (x, y) in a.params().flat_values().iter().zip(b.params().flat_values()) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn joint_update_moves_stream_controllers() {
        let (space, _) = small_joint_space();
        let mut policy = JointPolicy::new(&space, 5, 1).unwrap();
        let before: Vec<Vec<f64>> = policy.streams.iter().map(|p| p.params().flat_values()).collect();
        let cfg = PpoConfig {
            entropy_weight: 0.0,
            ..PpoConfig::default()
        };
        let mut opts = joint_optimizers(&policy, &cfg);
        let traces: Vec<_> = (0..4).map(|i| policy.sample(i).unwrap()).collect();
        let archs: Vec<Architecture> = traces.iter().map(|t| t.architecture(&space)).collect();
        let old: Vec<f64> = traces
            .iter()
            .map(|t| {
                let r: Vec<&SampleTrace> = t.streams.iter().collect();
                joint_log_prob(&r, &t.fusion).unwrap()
            })
            .collect();
        let scored = joint_log_probs(&policy, &archs).unwrap();
        for (a, b) in old.iter().zip(&scored) {
            assert!((a - b).abs() < 1e-12);
        }
        let rewards = [-1.0, -2.0, -3.0, -1.5];
        let stats = update_joint(
            &mut policy,
            &mut opts,
            &mut Baseline::default(),
            &archs,
            &old,
            &rewards,
            &cfg,
        )
        .unwrap();
        assert_eq!(stats.clip_fraction, 0.0);
        for (p, b) in policy.streams.iter().zip(&before) {
            assert_ne!(&p.params().flat_values(), b);
        }
    }

    #[test]
    fn config_validation() {
        assert!(PpoConfig::default().validate().is_ok());
        for eps in [0.0, 1.0, -0.1] {
            let c = PpoConfig {
                clip_epsilon: eps,
                ..PpoConfig::default()
            };
            assert!(c.validate().is_err());
        }
    }
}
