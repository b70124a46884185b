//! Warm-up search per stream, joint search over the reduced streams plus
//! fusion, and retraining of the finalists.
//!
//! Every sampling and training seed is a pure function of the run seed, the
//! stage, the timestep and the trial index. A run can therefore be resumed by
//! replaying the logged trial results: the controllers are rebuilt exactly and
//! only the missing trials are trained.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::cmp::Ordering;
use core::fmt;

#[allow(unused_imports)]
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::child::{
    input_shapes, instantiate_joint, instantiate_stream, train_epochs, train_from_scratch, ChildModel, EncodedClip,
    InputShapes, TrainConfig, TrialResult,
};
use crate::controller::{reduce_space, ControllerPolicy, JointPolicy, PolicyRole, SampleTrace, DEFAULT_HIDDEN};
use crate::error::{Error, Result};
use crate::metrics::{Prediction, PredictionSet};
use crate::rl::{
    joint_log_prob, joint_optimizers, reward, update_joint, update_stream, Baseline, MotionAverageTracker, PpoConfig,
    UpdateStats,
};
use crate::rng::derive_seed;
use crate::space::{stream_key, Architecture, JointSpace, ReducedSpace};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchBudget {
    /// Controller updates.
    pub timesteps: usize,
    /// Trials sampled per update.
    pub samples_per_step: usize,
    pub workers: usize,
    /// Seconds; checked between timesteps by the hooks that own a clock.
    pub wall_clock_cap_s: Option<f64>,
}

impl Default for SearchBudget {
    fn default() -> Self {
        SearchBudget {
            timesteps: 10,
            samples_per_step: 8,
            workers: 1,
            wall_clock_cap_s: None,
        }
    }
}

impl SearchBudget {
    pub fn validate(&self) -> Result<()> {
        if self.timesteps == 0 || self.samples_per_step == 0 || self.workers == 0 {
            return Err(Error::Contract(format!("budget values must be positive: {self:?}")));
        }
        Ok(())
    }

    pub fn trials(&self) -> usize {
        self.timesteps * self.samples_per_step
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    pub warmup: SearchBudget,
    pub joint: SearchBudget,
    /// Search the full stream spaces jointly without a warm-up.
    pub skip_warmup: bool,
    /// Choices kept per slot when reducing a stream space.
    pub keep_per_slot: usize,
    pub hidden: usize,
    pub ppo: PpoConfig,
    pub train: TrainConfig,
    pub seed: u64,
    pub leaderboard_size: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            warmup: SearchBudget::default(),
            joint: SearchBudget::default(),
            skip_warmup: false,
            keep_per_slot: 2,
            hidden: DEFAULT_HIDDEN,
            ppo: PpoConfig::default(),
            train: TrainConfig::default(),
            seed: 0,
            leaderboard_size: 10,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        self.warmup.validate()?;
        self.joint.validate()?;
        self.ppo.validate()?;
        self.train.validate()?;
        if self.keep_per_slot == 0 || self.hidden == 0 || self.leaderboard_size == 0 {
            return Err(Error::Contract(
                "keep per slot, hidden width and leaderboard size must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Warmup(String),
    Joint,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Stage::Warmup(s) => write!(f, "warmup:{s}"),
            Stage::Joint => f.write_str("joint"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialSpec {
    Stream { stream: String, tokens: Vec<usize> },
    Joint(Architecture),
}

/// One child to train.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialJob {
    pub stage: Stage,
    pub timestep: usize,
    pub index: usize,
    pub key: String,
    pub seed: u64,
    pub spec: TrialSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialOutcome {
    Trained(TrialResult),
    Failed(String),
}

/// A finished trial as written to the trial log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub stage: Stage,
    pub timestep: usize,
    pub index: usize,
    pub key: String,
    pub seed: u64,
    /// Log-probability under the policy that sampled it.
    pub log_prob: f64,
    pub outcome: TrialOutcome,
    pub reward: Option<f64>,
}

impl TrialRecord {
    pub fn e_val(&self) -> Option<f64> {
        match &self.outcome {
            TrialOutcome::Trained(r) => Some(r.e_val),
            TrialOutcome::Failed(_) => None,
        }
    }
}

/// Trains batches of children. Implementations may run jobs concurrently but
/// must return results in job order.
pub trait TrialExecutor {
    fn execute(&self, space: &JointSpace, jobs: &[TrialJob]) -> Vec<Result<TrialResult>>;
}

/// Data and settings shared by every trial.
#[derive(Debug, Clone)]
pub struct TrialContext<'a> {
    pub train: Vec<&'a EncodedClip>,
    pub val: Vec<&'a EncodedClip>,
    pub shapes: InputShapes,
    pub train_cfg: TrainConfig,
}

impl<'a> TrialContext<'a> {
    pub fn new(train: Vec<&'a EncodedClip>, val: Vec<&'a EncodedClip>, train_cfg: TrainConfig) -> Result<Self> {
        let shapes = input_shapes(&train)?;
        train_cfg.validate()?;
        Ok(TrialContext {
            train,
            val,
            shapes,
            train_cfg,
        })
    }

    /// Instantiates the job's child from scratch and trains it.
    pub fn run(&self, space: &JointSpace, job: &TrialJob) -> Result<TrialResult> {
        let init_seed = derive_seed(job.seed, 0);
        let cfg = TrainConfig {
            seed: derive_seed(job.seed, 1),
            ..self.train_cfg.clone()
        };
        let mut model = match &job.spec {
            TrialSpec::Stream { stream, tokens } => {
                let s = space
                    .stream(stream)
                    .ok_or_else(|| Error::Contract(format!("no stream `{stream}` in the space")))?;
                instantiate_stream(s, tokens, &self.shapes, cfg.dropout, init_seed)?
            }
            TrialSpec::Joint(arch) => instantiate_joint(space, arch, &self.shapes, cfg.dropout, init_seed)?,
        };
        let mut r = train_from_scratch(&mut model, &self.train, &self.val, &cfg)?;
        r.key = job.key.clone();
        Ok(r)
    }
}

/// Runs jobs one after another on the calling thread.
pub struct SequentialExecutor<'a>(pub TrialContext<'a>);

impl TrialExecutor for SequentialExecutor<'_> {
    fn execute(&self, space: &JointSpace, jobs: &[TrialJob]) -> Vec<Result<TrialResult>> {
        jobs.iter().map(|j| self.0.run(space, j)).collect()
    }
}

/// Per-timestep summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSummary {
    pub stage: Stage,
    pub timestep: usize,
    pub trials: usize,
    pub failures: usize,
    /// Mean validation error of the step's successful trials.
    pub mean_e_val: Option<f64>,
    pub min_e_val: Option<f64>,
    /// Trials whose architecture had been seen before this step.
    pub repeated: usize,
    pub update: Option<UpdateStats>,
}

#[derive(Debug, Clone, Copy)]
pub enum PolicyView<'a> {
    Stream(&'a ControllerPolicy),
    Joint(&'a JointPolicy),
}

/// Persistence and control points of a search run.
pub trait SearchHooks {
    /// A previously logged result for `job`, when resuming.
    fn replay(&mut self, _job: &TrialJob) -> Option<TrialRecord> {
        None
    }

    /// Called once for every newly trained trial.
    fn on_trial(&mut self, _record: &TrialRecord) -> Result<()> {
        Ok(())
    }

    /// Called after each controller update.
    fn on_step(&mut self, _summary: &StepSummary, _policy: PolicyView<'_>) -> Result<()> {
        Ok(())
    }

    /// Checked before each timestep; `true` ends the run early.
    fn should_stop(&mut self) -> bool {
        false
    }
}

pub struct NoHooks;

impl SearchHooks for NoHooks {}

/// In-memory trial log that also serves replays.
#[derive(Debug, Clone, Default)]
pub struct TrialLog {
    pub records: Vec<TrialRecord>,
    /// Stop once this many timesteps (over all stages) have completed.
    pub stop_after_steps: Option<usize>,
    pub steps: usize,
    index: BTreeMap<(Stage, usize, usize), usize>,
}

impl TrialLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_records(records: Vec<TrialRecord>) -> Self {
        let mut log = TrialLog::new();
        for r in records {
            log.push(r);
        }
        log
    }

    pub fn push(&mut self, record: TrialRecord) {
        let id = (record.stage.clone(), record.timestep, record.index);
        self.index.insert(id, self.records.len());
        self.records.push(record);
    }
}

impl SearchHooks for TrialLog {
    fn replay(&mut self, job: &TrialJob) -> Option<TrialRecord> {
        let i = *self.index.get(&(job.stage.clone(), job.timestep, job.index))?;
        Some(self.records[i].clone())
    }

    fn on_trial(&mut self, record: &TrialRecord) -> Result<()> {
        self.push(record.clone());
        Ok(())
    }

    fn on_step(&mut self, _summary: &StepSummary, _policy: PolicyView<'_>) -> Result<()> {
        self.steps += 1;
        Ok(())
    }

    fn should_stop(&mut self) -> bool {
        self.stop_after_steps.is_some_and(|n| self.steps >= n)
    }
}

fn seed_path(root: u64, path: &[u64]) -> u64 {
    path.iter().fold(root, |s, &t| derive_seed(s, t))
}

const WARMUP_TAG: u64 = 1;
const JOINT_TAG: u64 = 2;

/// Trains (or replays) one batch, then assigns rewards in index order.
fn run_batch(
    executor: &dyn TrialExecutor,
    space: &JointSpace,
    jobs: Vec<TrialJob>,
    log_probs: &[f64],
    tracker: &mut MotionAverageTracker,
    cfg: &PpoConfig,
    hooks: &mut dyn SearchHooks,
) -> Result<(Vec<TrialRecord>, usize)> {
    let mut replayed: Vec<Option<TrialRecord>> = Vec::with_capacity(jobs.len());
    for job in &jobs {
        let r = hooks.replay(job);
        if let Some(rec) = &r {
            if rec.key != job.key || rec.seed != job.seed {
                return Err(Error::Contract(format!(
                    "logged trial {} / {} / {} is `{}` but the run samples `{}`",
                    job.stage, job.timestep, job.index, rec.key, job.key
                )));
            }
        }
        replayed.push(r);
    }
    let pending: Vec<TrialJob> = jobs
        .iter()
        .zip(&replayed)
        .filter(|(_, r)| r.is_none())
        .map(|(j, _)| j.clone())
        .collect();
    let results = executor.execute(space, &pending);
    if results.len() != pending.len() {
        return Err(Error::Contract(format!(
            "executor returned {} results for {} jobs",
            results.len(),
            pending.len()
        )));
    }
    let mut fresh = results.into_iter();
    let mut records = Vec::with_capacity(jobs.len());
    let mut repeated = 0;
    for ((job, old), lp) in jobs.into_iter().zip(replayed).zip(log_probs) {
        let is_new = old.is_none();
        let outcome = match old {
            Some(rec) => rec.outcome,
            None => match fresh.next().expect("one result per pending job") {
                Ok(r) => TrialOutcome::Trained(r),
                Err(e @ Error::Diverged { .. }) => TrialOutcome::Failed(e.to_string()),
                Err(e) => return Err(e),
            },
        };
        if tracker.count(&job.key) > 0 {
            repeated += 1;
        }
        let reward = match &outcome {
            TrialOutcome::Trained(r) => Some(reward(tracker, &job.key, r.e_val, cfg.reward_mode)?),
            TrialOutcome::Failed(_) => None,
        };
        let record = TrialRecord {
            stage: job.stage,
            timestep: job.timestep,
            index: job.index,
            key: job.key,
            seed: job.seed,
            log_prob: *lp,
            outcome,
            reward,
        };
        if is_new {
            hooks.on_trial(&record)?;
        }
        records.push(record);
    }
    Ok((records, repeated))
}

fn summarize(stage: &Stage, t: usize, records: &[TrialRecord], repeated: usize) -> StepSummary {
    let errs: Vec<f64> = records.iter().filter_map(TrialRecord::e_val).collect();
    StepSummary {
        stage: stage.clone(),
        timestep: t,
        trials: records.len(),
        failures: records.len() - errs.len(),
        mean_e_val: (!errs.is_empty()).then(|| errs.iter().sum::<f64>() / errs.len() as f64),
        min_e_val: errs.iter().copied().reduce(f64::min),
        repeated,
        update: None,
    }
}

fn stage_failure(stage: &Stage, records: &[TrialRecord]) -> Error {
    let first = records.iter().find_map(|r| match &r.outcome {
        TrialOutcome::Failed(m) => Some(m.clone()),
        TrialOutcome::Trained(_) => None,
    });
    Error::StageFailure(format!(
        "all {} trials of stage {stage} failed; first failure: {}",
        records.len(),
        first.unwrap_or_default()
    ))
}

/// Result of one stream's warm-up.
#[derive(Debug, Clone)]
pub struct WarmupOutcome {
    pub policy: ControllerPolicy,
    /// `None` when the run stopped before the stage finished.
    pub reduced: Option<ReducedSpace>,
    pub tracker: MotionAverageTracker,
    pub history: Vec<StepSummary>,
    pub records: Vec<TrialRecord>,
}

/// Pre-searches stream `m` of `space` with standalone children, then reduces
/// its space to the policy's most probable choices.
pub fn warmup_stream(
    space: &JointSpace,
    m: usize,
    cfg: &SearchConfig,
    executor: &dyn TrialExecutor,
    hooks: &mut dyn SearchHooks,
) -> Result<WarmupOutcome> {
    cfg.validate()?;
    let stream = space
        .streams
        .get(m)
        .ok_or_else(|| Error::Contract(format!("no stream {m} in a {}-stream space", space.streams.len())))?;
    let stage = Stage::Warmup(stream.stream_id.clone());
    let base = [WARMUP_TAG, m as u64];
    let mut policy = ControllerPolicy::for_stream(stream, cfg.hidden, seed_path(cfg.seed, &[base[0], base[1], 0]))?;
    let mut opt = cfg.ppo.adam();
    let mut baseline = Baseline::default();
    let mut tracker = MotionAverageTracker::new();
    let mut history = Vec::new();
    let mut all = Vec::new();
    let budget = &cfg.warmup;
    for t in 0..budget.timesteps {
        if hooks.should_stop() {
            return Ok(WarmupOutcome {
                policy,
                reduced: None,
                tracker,
                history,
                records: all,
            });
        }
        let mut traces = Vec::with_capacity(budget.samples_per_step);
        let mut jobs = Vec::with_capacity(budget.samples_per_step);
        for i in 0..budget.samples_per_step {
            let path = [base[0], base[1], 2, t as u64, i as u64];
            let trace = policy.sample(seed_path(cfg.seed, &path))?;
            jobs.push(TrialJob {
                stage: stage.clone(),
                timestep: t,
                index: i,
                key: stream_key(stream, &trace.tokens)?,
                seed: seed_path(seed_path(cfg.seed, &path), &[1]),
                spec: TrialSpec::Stream {
                    stream: stream.stream_id.clone(),
                    tokens: trace.tokens.clone(),
                },
            });
            traces.push(trace);
        }
        let lps: Vec<f64> = traces.iter().map(|tr| tr.total_log_prob).collect();
        let (records, repeated) = run_batch(executor, space, jobs, &lps, &mut tracker, &cfg.ppo, hooks)?;
        let mut summary = summarize(&stage, t, &records, repeated);
        let ok: Vec<usize> = (0..records.len()).filter(|&i| records[i].reward.is_some()).collect();
        if !ok.is_empty() {
            let tokens: Vec<Vec<usize>> = ok.iter().map(|&i| traces[i].tokens.clone()).collect();
            let old: Vec<f64> = ok.iter().map(|&i| lps[i]).collect();
            let rewards: Vec<f64> = ok.iter().filter_map(|&i| records[i].reward).collect();
            summary.update = Some(update_stream(
                &mut policy,
                &mut opt,
                &mut baseline,
                &tokens,
                &old,
                &rewards,
                &cfg.ppo,
            )?);
        }
        hooks.on_step(&summary, PolicyView::Stream(&policy))?;
        history.push(summary);
        all.extend(records);
    }
    if all.iter().all(|r| r.reward.is_none()) {
        return Err(stage_failure(&stage, &all));
    }
    let reduced = reduce_space(
        stream,
        &policy,
        cfg.keep_per_slot,
        seed_path(cfg.seed, &[base[0], base[1], 1]),
    )?;
    Ok(WarmupOutcome {
        policy,
        reduced: Some(reduced),
        tracker,
        history,
        records: all,
    })
}

/// Result of the joint stage.
#[derive(Debug, Clone)]
pub struct JointOutcome {
    pub policy: JointPolicy,
    pub tracker: MotionAverageTracker,
    pub history: Vec<StepSummary>,
    pub records: Vec<TrialRecord>,
    pub complete: bool,
}

/// Samples all streams and the conditioned fusion controller, trains every
/// joint child from scratch, and updates all controllers together.
pub fn joint_search(
    space: &JointSpace,
    mut policy: JointPolicy,
    cfg: &SearchConfig,
    executor: &dyn TrialExecutor,
    hooks: &mut dyn SearchHooks,
) -> Result<JointOutcome> {
    cfg.validate()?;
    space.validate()?;
    if policy.streams.len() != space.streams.len()
        || policy
            .streams
            .iter()
            .zip(&space.streams)
            .any(|(p, s)| p.arities != s.arities())
        || policy.fusion.arities != space.fusion.arities()
    {
        return Err(Error::Contract("joint policy does not match the searched space".into()));
    }
    let stage = Stage::Joint;
    let mut opts = joint_optimizers(&policy, &cfg.ppo);
    let mut baseline = Baseline::default();
    let mut tracker = MotionAverageTracker::new();
    let mut history = Vec::new();
    let mut all = Vec::new();
    let budget = &cfg.joint;
    for t in 0..budget.timesteps {
        if hooks.should_stop() {
            return Ok(JointOutcome {
                policy,
                tracker,
                history,
                records: all,
                complete: false,
            });
        }
        let mut archs = Vec::with_capacity(budget.samples_per_step);
        let mut lps = Vec::with_capacity(budget.samples_per_step);
        let mut jobs = Vec::with_capacity(budget.samples_per_step);
        for i in 0..budget.samples_per_step {
            let path = [JOINT_TAG, 2, t as u64, i as u64];
            let trace = policy.sample(seed_path(cfg.seed, &path))?;
            let refs: Vec<&SampleTrace> = trace.streams.iter().collect();
            lps.push(joint_log_prob(&refs, &trace.fusion)?);
            let arch = trace.architecture(space);
            jobs.push(TrialJob {
                stage: stage.clone(),
                timestep: t,
                index: i,
                key: arch.canonical_key(space)?,
                seed: seed_path(seed_path(cfg.seed, &path), &[1]),
                spec: TrialSpec::Joint(arch.clone()),
            });
            archs.push(arch);
        }
        let (records, repeated) = run_batch(executor, space, jobs, &lps, &mut tracker, &cfg.ppo, hooks)?;
        let mut summary = summarize(&stage, t, &records, repeated);
        let ok: Vec<usize> = (0..records.len()).filter(|&i| records[i].reward.is_some()).collect();
        if !ok.is_empty() {
            let a: Vec<Architecture> = ok.iter().map(|&i| archs[i].clone()).collect();
            let old: Vec<f64> = ok.iter().map(|&i| lps[i]).collect();
            let rewards: Vec<f64> = ok.iter().filter_map(|&i| records[i].reward).collect();
            summary.update = Some(update_joint(
                &mut policy,
                &mut opts,
                &mut baseline,
                &a,
                &old,
                &rewards,
                &cfg.ppo,
            )?);
        }
        hooks.on_step(&summary, PolicyView::Joint(&policy))?;
        history.push(summary);
        all.extend(records);
    }
    if all.iter().all(|r| r.reward.is_none()) {
        return Err(stage_failure(&stage, &all));
    }
    Ok(JointOutcome {
        policy,
        tracker,
        history,
        records: all,
        complete: true,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeaderboardEntry {
    pub key: String,
    pub mean_e_val: f64,
    pub count: u64,
}

fn rank(a: &LeaderboardEntry, b: &LeaderboardEntry) -> Ordering {
    (a.count < 2)
        .cmp(&(b.count < 2))
        .then(a.mean_e_val.total_cmp(&b.mean_e_val))
        .then(b.count.cmp(&a.count))
        .then(a.key.cmp(&b.key))
}

/// Top `k` tracked architectures by motion-average error, entries observed
/// at least twice first.
pub fn leaderboard(tracker: &MotionAverageTracker, k: usize) -> Vec<LeaderboardEntry> {
    let mut v: Vec<LeaderboardEntry> = tracker
        .iter()
        .map(|(key, e)| LeaderboardEntry {
            key: key.into(),
            mean_e_val: e.mean(),
            count: e.count,
        })
        .collect();
    v.sort_by(rank);
    v.truncate(k);
    v
}

/// Everything a run produced, in serializable form.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchRunState {
    /// Stage and timestep the run reached (the next one to execute when
    /// incomplete).
    pub stage: Stage,
    pub timestep: usize,
    pub complete: bool,
    pub reduced: Vec<ReducedSpace>,
    /// The joint space that was searched (reduced streams plus fusion).
    pub searched_space: JointSpace,
    pub tracker: MotionAverageTracker,
    pub leaderboard: Vec<LeaderboardEntry>,
    pub history: Vec<StepSummary>,
    pub trials: usize,
    #[serde(skip)]
    pub policy: Option<JointPolicy>,
}

/// Warm-up for every stream (unless skipped), then the joint search.
pub fn run_search(
    space: &JointSpace,
    cfg: &SearchConfig,
    executor: &dyn TrialExecutor,
    hooks: &mut dyn SearchHooks,
) -> Result<SearchRunState> {
    cfg.validate()?;
    space.validate()?;
    let mut history = Vec::new();
    let mut trials = 0;
    let mut reduced = Vec::new();
    let mut stream_policies = Vec::new();
    if !cfg.skip_warmup {
        for m in 0..space.streams.len() {
            let w = warmup_stream(space, m, cfg, executor, hooks)?;
            trials += w.records.len();
            let done = w.history.len();
            history.extend(w.history);
            let Some(r) = w.reduced else {
                return Ok(SearchRunState {
                    stage: Stage::Warmup(space.streams[m].stream_id.clone()),
                    timestep: done,
                    complete: false,
                    reduced,
                    searched_space: space.clone(),
                    tracker: w.tracker,
                    leaderboard: Vec::new(),
                    history,
                    trials,
                    policy: None,
                });
            };
            stream_policies.push(w.policy.restrict(&r.kept)?);
            reduced.push(r);
        }
    }
    let searched_space = if cfg.skip_warmup {
        space.clone()
    } else {
        JointSpace {
            streams: reduced.iter().map(|r| r.space.clone()).collect(),
            fusion: space.fusion.clone(),
        }
    };
    let joint_seed = seed_path(cfg.seed, &[JOINT_TAG, 0]);
    let policy = if cfg.skip_warmup {
        JointPolicy::new(&searched_space, cfg.hidden, joint_seed)?
    } else {
        let fusion = ControllerPolicy::new(
            PolicyRole::Fusion {
                streams: searched_space.streams.len(),
            },
            searched_space.fusion.arities(),
            cfg.hidden,
            joint_seed,
        )?;
        JointPolicy {
            streams: stream_policies,
            fusion,
        }
    };
    let j = joint_search(&searched_space, policy, cfg, executor, hooks)?;
    trials += j.records.len();
    let done = j.history.len();
    history.extend(j.history);
    Ok(SearchRunState {
        stage: Stage::Joint,
        timestep: done,
        complete: j.complete,
        reduced,
        searched_space,
        leaderboard: leaderboard(&j.tracker, cfg.leaderboard_size),
        tracker: j.tracker,
        history,
        trials,
        policy: Some(j.policy),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinalizeConfig {
    /// Leaderboard entries to retrain.
    pub top: usize,
    /// Training seeds per finalist; metrics are averaged over them.
    pub seeds: Vec<u64>,
    pub train: TrainConfig,
}

impl Default for FinalizeConfig {
    fn default() -> Self {
        FinalizeConfig {
            top: 3,
            seeds: alloc::vec![0],
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalistRun {
    pub seed: u64,
    pub rmse: f64,
    pub mae: f64,
    pub train_rmse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalistReport {
    pub canonical_key: String,
    pub search_mean_e_val: f64,
    pub search_count: u64,
    pub runs: Vec<FinalistRun>,
    /// Test metrics averaged over the seeds.
    pub rmse: f64,
    pub mae: f64,
    pub best: bool,
    /// Test predictions of the first seed.
    pub predictions: Vec<Prediction>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalReport {
    /// Ranked by test RMSE.
    pub finalists: Vec<FinalistReport>,
    pub best_key: String,
}

/// A report plus the first-seed model of every finalist, in report order.
#[derive(Debug, Clone)]
pub struct Finalized {
    pub report: FinalReport,
    pub models: Vec<ChildModel>,
}

/// Retrains the leading architectures on `full_train` for a fixed number of
/// epochs and evaluates them on `test`.
pub fn finalize(
    state: &SearchRunState,
    full_train: &[&EncodedClip],
    test: &[&EncodedClip],
    cfg: &FinalizeConfig,
) -> Result<Finalized> {
    if state.leaderboard.is_empty() {
        return Err(Error::Contract("the leaderboard is empty".into()));
    }
    if cfg.top == 0 || cfg.seeds.is_empty() || test.is_empty() {
        return Err(Error::Contract(
            "finalize needs at least one finalist, seed and test clip".into(),
        ));
    }
    let shapes = input_shapes(full_train)?;
    let space = &state.searched_space;
    let mut finalists = Vec::new();
    let mut models = Vec::new();
    for entry in state.leaderboard.iter().take(cfg.top) {
        let arch = Architecture::parse(&entry.key, space)?;
        let mut runs = Vec::with_capacity(cfg.seeds.len());
        let mut predictions = Vec::new();
        let mut first_model = None;
        for &seed in &cfg.seeds {
            let tc = TrainConfig {
                seed: derive_seed(seed, 1),
                ..cfg.train.clone()
            };
            let mut model = instantiate_joint(space, &arch, &shapes, tc.dropout, derive_seed(seed, 0))?;
            let train_rmse = train_epochs(&mut model, full_train, &tc)?;
            let preds = model.predict_many(test)?;
            let set = PredictionSet::new(
                test.iter()
                    .zip(&preds)
                    .map(|(c, &p)| Prediction {
                        clip_id: c.clip_id.clone(),
                        predicted: p,
                        actual: c.label,
                    })
                    .collect(),
            )?;
            runs.push(FinalistRun {
                seed,
                rmse: set.rmse()?,
                mae: set.mae()?,
                train_rmse,
            });
            if first_model.is_none() {
                predictions = set.items().to_vec();
                first_model = Some(model);
            }
        }
        let n = runs.len() as f64;
        models.push(first_model.expect("at least one seed"));
        finalists.push(FinalistReport {
            canonical_key: entry.key.clone(),
            search_mean_e_val: entry.mean_e_val,
            search_count: entry.count,
            rmse: runs.iter().map(|r| r.rmse).sum::<f64>() / n,
            mae: runs.iter().map(|r| r.mae).sum::<f64>() / n,
            runs,
            best: false,
            predictions,
        });
    }
    let mut order: Vec<usize> = (0..finalists.len()).collect();
    order.sort_by(|&a, &b| {
        let (x, y) = (&finalists[a], &finalists[b]);
        x.rmse.total_cmp(&y.rmse).then(x.canonical_key.cmp(&y.canonical_key))
    });
    let mut slots: Vec<Option<(FinalistReport, ChildModel)>> = finalists.into_iter().zip(models).map(Some).collect();
    let (mut finalists, models): (Vec<_>, Vec<_>) =
        order.iter().map(|&i| slots[i].take().expect("permutation")).unzip();
    finalists[0].best = true;
    Ok(Finalized {
        report: FinalReport {
            best_key: finalists[0].canonical_key.clone(),
            finalists,
        },
        models,
    })
}
