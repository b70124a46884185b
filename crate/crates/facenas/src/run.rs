//! Run directories, file-backed search hooks and the thread-pool executor.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use anyhow::Context;
use facenas_core::child::TrialResult;
use facenas_core::search::{
    PolicyView, SearchHooks, Stage, StepSummary, TrialContext, TrialExecutor, TrialJob, TrialLog, TrialRecord,
};
use facenas_core::space::JointSpace;
use facenas_core::Error as CoreError;
use rayon::prelude::*;
use serde::Serialize;

use crate::checkpoint;

/// Paths inside a run directory.
#[derive(Debug, Clone, PartialEq)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunDir { root: root.into() }
    }

    pub fn create(&self) -> std::io::Result<()> {
        fs::create_dir_all(self.policies())
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }
    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }
    pub fn encoded(&self) -> PathBuf {
        self.root.join("encoded.ckpt")
    }
    pub fn rejections(&self) -> PathBuf {
        self.root.join("rejections.json")
    }
    pub fn trials(&self) -> PathBuf {
        self.root.join("trials.jsonl")
    }
    pub fn tracker_log(&self) -> PathBuf {
        self.root.join("tracker.log")
    }
    pub fn updates(&self) -> PathBuf {
        self.root.join("updates.csv")
    }
    pub fn policies(&self) -> PathBuf {
        self.root.join("policies")
    }
    pub fn warmup(&self) -> PathBuf {
        self.root.join("warmup.json")
    }
    pub fn state(&self) -> PathBuf {
        self.root.join("state.json")
    }
    pub fn leaderboard(&self) -> PathBuf {
        self.root.join("leaderboard.json")
    }
    pub fn report(&self) -> PathBuf {
        self.root.join("report.json")
    }
    pub fn finalists(&self) -> PathBuf {
        self.root.join("finalists")
    }
    pub fn predictions(&self) -> PathBuf {
        self.root.join("predictions.csv")
    }
}

/// Pretty JSON with a trailing newline, written atomically.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    if let Some(d) = path.parent() {
        fs::create_dir_all(d)?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Reads a trial log. A torn final line (from a crash mid-write) is dropped;
/// a bad line anywhere else is an error.
pub fn read_trial_log(path: &Path) -> anyhow::Result<Vec<TrialRecord>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let lines: Vec<String> = BufReader::new(File::open(path)?).lines().collect::<Result<_, _>>()?;
    let mut out = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(r) => out.push(r),
            Err(_) if i + 1 == lines.len() => break,
            Err(e) => return Err(e).with_context(|| format!("{}:{}", path.display(), i + 1)),
        }
    }
    Ok(out)
}

const UPDATE_COLUMNS: [&str; 13] = [
    "stage",
    "timestep",
    "trials",
    "failures",
    "repeated",
    "mean_e_val",
    "min_e_val",
    "objective",
    "mean_reward",
    "reward_std",
    "mean_advantage",
    "clip_fraction",
    "mean_entropy",
];

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn update_row(s: &StepSummary) -> Vec<String> {
    let u = s.update.as_ref();
    vec![
        s.stage.to_string(),
        s.timestep.to_string(),
        s.trials.to_string(),
        s.failures.to_string(),
        s.repeated.to_string(),
        opt(s.mean_e_val),
        opt(s.min_e_val),
        opt(u.map(|u| u.objective)),
        opt(u.map(|u| u.mean_reward)),
        opt(u.map(|u| u.reward_std)),
        opt(u.map(|u| u.mean_advantage)),
        opt(u.map(|u| u.clip_fraction)),
        opt(u.map(|u| u.mean_entropy)),
    ]
}

pub fn policy_tensors(view: PolicyView<'_>) -> checkpoint::Tensors {
    match view {
        PolicyView::Stream(p) => checkpoint::params_to_tensors(p.params(), ""),
        PolicyView::Joint(j) => {
            let mut t = Vec::new();
            for (i, p) in j.streams.iter().enumerate() {
                t.extend(checkpoint::params_to_tensors(p.params(), &format!("stream{i}.")));
            }
            t.extend(checkpoint::params_to_tensors(j.fusion.params(), "fusion."));
            t
        }
    }
}

fn policy_file(stage: &Stage) -> String {
    match stage {
        Stage::Warmup(id) => format!("warmup_{id}.ckpt"),
        Stage::Joint => "joint.ckpt".into(),
    }
}

/// Logs every trial to `trials.jsonl`, every update to `updates.csv` and the
/// latest policy of each stage to `policies/`; serves replays from a
/// previous log and stops at the wall-clock cap.
pub struct FileHooks {
    dir: RunDir,
    replay: TrialLog,
    trials: BufWriter<File>,
    updates: csv::Writer<File>,
    started: Instant,
    cap: Option<Duration>,
    pub stop_after_steps: Option<usize>,
    pub steps: usize,
    pub new_trials: usize,
    pub replayed: usize,
}

impl FileHooks {
    /// With `resume`, the existing log is read back (and rewritten without a
    /// torn tail); otherwise it is truncated.
    pub fn open(dir: &RunDir, resume: bool, cap: Option<Duration>) -> anyhow::Result<Self> {
        dir.create()?;
        let records = if resume {
            read_trial_log(&dir.trials())?
        } else {
            Vec::new()
        };
        let mut text = String::new();
        for r in &records {
            text.push_str(&serde_json::to_string(r)?);
            text.push('\n');
        }
        write_atomic(&dir.trials(), text.as_bytes())?;
        let trials = BufWriter::new(OpenOptions::new().append(true).open(dir.trials())?);
        let mut updates = csv::Writer::from_path(dir.updates())?;
        updates.write_record(UPDATE_COLUMNS)?;
        updates.flush()?;
        Ok(FileHooks {
            dir: dir.clone(),
            replay: TrialLog::from_records(records),
            trials,
            updates,
            started: Instant::now(),
            cap,
            stop_after_steps: None,
            steps: 0,
            new_trials: 0,
            replayed: 0,
        })
    }

    pub fn logged(&self) -> usize {
        self.replay.records.len()
    }
}

fn io_err(e: impl std::fmt::Display) -> CoreError {
    CoreError::Contract(format!("run directory write failed: {e}"))
}

impl SearchHooks for FileHooks {
    fn replay(&mut self, job: &TrialJob) -> Option<TrialRecord> {
        let r = self.replay.replay(job);
        self.replayed += usize::from(r.is_some());
        r
    }

    fn on_trial(&mut self, record: &TrialRecord) -> facenas_core::Result<()> {
        let line = serde_json::to_string(record).map_err(io_err)?;
        writeln!(self.trials, "{line}").map_err(io_err)?;
        self.trials.flush().map_err(io_err)?;
        self.new_trials += 1;
        Ok(())
    }

    fn on_step(&mut self, summary: &StepSummary, policy: PolicyView<'_>) -> facenas_core::Result<()> {
        self.updates.write_record(update_row(summary)).map_err(io_err)?;
        self.updates.flush().map_err(io_err)?;
        let path = self.dir.policies().join(policy_file(&summary.stage));
        checkpoint::save(&path, &policy_tensors(policy)).map_err(io_err)?;
        self.steps += 1;
        Ok(())
    }

    fn should_stop(&mut self) -> bool {
        self.stop_after_steps.is_some_and(|n| self.steps >= n) || self.cap.is_some_and(|c| self.started.elapsed() >= c)
    }
}

/// Trains the jobs of a batch concurrently on a private thread pool; results
/// come back in job order.
pub struct ParallelExecutor<'a> {
    pub ctx: TrialContext<'a>,
    pool: rayon::ThreadPool,
}

impl<'a> ParallelExecutor<'a> {
    pub fn new(ctx: TrialContext<'a>, workers: usize) -> anyhow::Result<Self> {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(workers.max(1)).build()?;
        Ok(ParallelExecutor { ctx, pool })
    }

    pub fn workers(&self) -> usize {
        self.pool.current_num_threads()
    }
}

impl TrialExecutor for ParallelExecutor<'_> {
    fn execute(&self, space: &JointSpace, jobs: &[TrialJob]) -> Vec<facenas_core::Result<TrialResult>> {
        self.pool.install(|| {
            jobs.par_iter()
                .map(|j| {
                    let t = Instant::now();
                    self.ctx.run(space, j).map(|mut r| {
                        r.wall_time_ms = t.elapsed().as_secs_f64() * 1e3;
                        r
                    })
                })
                .collect()
        })
    }
}
