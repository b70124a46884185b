//! The stages behind each subcommand, operating on one run directory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::Context;
use facenas_core::child::{split_indices, EncodedClip};
use facenas_core::metrics::{Prediction, PredictionSet};
use facenas_core::search::{finalize, run_search, warmup_stream, FinalReport, SearchRunState, TrialContext};
use facenas_core::space::{JointSpace, ReducedSpace};
use facenas_core::synth::generate;
use serde::Serialize;

use crate::cache;
use crate::checkpoint;
use crate::config::{effective_workers, DataSource, RunConfig};
use crate::io::{ingest, screen, write_dataset, IngestConfig, Ingested};
use crate::presets::resolve_space;
use crate::report;
use crate::run::{read_trial_log, write_atomic, write_json, FileHooks, ParallelExecutor, RunDir};

/// Bad invocation rather than a failed stage.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

#[derive(Debug, Clone, Copy, Default)]
pub struct SearchOptions {
    /// Replay the existing trial log.
    pub resume: bool,
    /// Discard the existing trial log.
    pub fresh: bool,
    /// Stop after this many timesteps in this invocation.
    pub stop_after_steps: Option<usize>,
}

pub struct Splits<'a> {
    pub train: Vec<&'a EncodedClip>,
    pub val: Vec<&'a EncodedClip>,
    pub test: Vec<&'a EncodedClip>,
}

/// Seeded 70/15/15 split by clip id.
pub fn split(clips: &[EncodedClip], seed: u64) -> Splits<'_> {
    let ids: Vec<&str> = clips.iter().map(|c| c.clip_id.as_str()).collect();
    let (tr, va, te) = split_indices(&ids, seed);
    let pick = |ix: Vec<usize>| ix.into_iter().map(|i| &clips[i]).collect();
    Splits {
        train: pick(tr),
        val: pick(va),
        test: pick(te),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EncodeSummary {
    pub clips: usize,
    pub rejected: Vec<crate::io::Rejection>,
}

#[derive(Serialize)]
struct FinalistSidecar<'a> {
    canonical_key: &'a str,
    rank: usize,
    best: bool,
    rmse: f64,
    mae: f64,
    runs: &'a [facenas_core::search::FinalistRun],
    config: &'a facenas_core::search::FinalizeConfig,
}

pub struct Session {
    pub cfg: RunConfig,
    /// Directory that relative paths in the config are resolved against.
    pub base: PathBuf,
    pub dir: RunDir,
}

impl Session {
    pub fn new(cfg: RunConfig, base: &Path) -> Self {
        let dir = RunDir::new(base.join(&cfg.out_dir));
        Session {
            cfg,
            base: base.to_path_buf(),
            dir,
        }
    }

    /// Writes `config.toml`; with `check`, an existing snapshot must match.
    pub fn snapshot_config(&self, check: bool) -> anyhow::Result<()> {
        let text = self.cfg.to_toml()?;
        let path = self.dir.config();
        if check && path.exists() && fs::read_to_string(&path)? != text {
            return Err(UsageError(format!(
                "{} was written by a different configuration; refusing to resume",
                path.display()
            ))
            .into());
        }
        self.dir.create()?;
        write_atomic(&path, text.as_bytes())
    }

    pub fn space(&self) -> anyhow::Result<JointSpace> {
        resolve_space(&self.cfg.space, &self.base)
    }

    fn ingest_config(&self) -> IngestConfig {
        match &self.cfg.data {
            DataSource::Synthetic(s) => IngestConfig {
                pipeline: self.cfg.pipeline.clone(),
                layout: s.layout.clone(),
                label_min: s.label_min,
                label_max: s.label_max,
            },
            DataSource::Directory {
                layout,
                label_min,
                label_max,
                ..
            } => IngestConfig {
                pipeline: self.cfg.pipeline.clone(),
                layout: layout.clone(),
                label_min: *label_min,
                label_max: *label_max,
            },
        }
    }

    /// Writes the synthetic dataset as CSV into `data/`.
    pub fn gen_data(&self) -> anyhow::Result<(PathBuf, usize)> {
        let DataSource::Synthetic(spec) = &self.cfg.data else {
            return Err(UsageError("gen-data needs a synthetic data source".into()).into());
        };
        let clips = generate(spec)?;
        self.snapshot_config(false)?;
        write_dataset(&self.dir.data(), &clips)?;
        Ok((self.dir.data(), clips.len()))
    }

    pub fn records(&self) -> anyhow::Result<Ingested> {
        match &self.cfg.data {
            DataSource::Synthetic(spec) => {
                let (records, rejected) = screen(generate(spec)?, &self.cfg.pipeline);
                Ok(Ingested { records, rejected })
            }
            DataSource::Directory { path, .. } => Ok(ingest(&self.base.join(path), &self.ingest_config())?),
        }
    }

    /// Encodes every clip and caches the result.
    pub fn encode(&self) -> anyhow::Result<EncodeSummary> {
        let ing = self.records()?;
        let (clips, mut rejected) = cache::encode_dataset(&ing.records, &self.cfg.pipeline, self.cfg.data.layout());
        rejected.splice(0..0, ing.rejected);
        self.dir.create()?;
        cache::save(&self.dir.encoded(), &clips)?;
        write_json(&self.dir.rejections(), &rejected)?;
        Ok(EncodeSummary {
            clips: clips.len(),
            rejected,
        })
    }

    /// The cached encoding, built first when absent.
    pub fn encoded(&self) -> anyhow::Result<Vec<EncodedClip>> {
        if !self.dir.encoded().exists() {
            self.encode()?;
        }
        cache::load(&self.dir.encoded(), self.cfg.data.layout())
    }

    fn hooks(&self, opts: SearchOptions) -> anyhow::Result<FileHooks> {
        let logged = !read_trial_log(&self.dir.trials())?.is_empty();
        if logged && !opts.resume && !opts.fresh {
            return Err(UsageError(format!(
                "{} already holds trials; pass --resume to continue or --fresh to start over",
                self.dir.root.display()
            ))
            .into());
        }
        self.snapshot_config(opts.resume)?;
        let s = &self.cfg.search;
        let cap = match (s.warmup.wall_clock_cap_s, s.joint.wall_clock_cap_s) {
            (Some(a), Some(b)) => Some(a + b),
            (a, b) => a.or(b),
        };
        let mut h = FileHooks::open(&self.dir, opts.resume, cap.map(Duration::from_secs_f64))?;
        h.stop_after_steps = opts.stop_after_steps;
        Ok(h)
    }

    fn workers(&self) -> usize {
        effective_workers(self.cfg.search.joint.workers.max(self.cfg.search.warmup.workers))
    }

    /// Warm-up of every stream only; writes the reduced spaces.
    pub fn warmup(&self, opts: SearchOptions) -> anyhow::Result<Vec<ReducedSpace>> {
        let space = self.space()?;
        let clips = self.encoded()?;
        let sp = split(&clips, self.cfg.split_seed);
        let exec = ParallelExecutor::new(
            TrialContext::new(sp.train, sp.val, self.cfg.search.train.clone())?,
            self.workers(),
        )?;
        let mut hooks = self.hooks(opts)?;
        let mut reduced = Vec::new();
        for m in 0..space.streams.len() {
            let w = warmup_stream(&space, m, &self.cfg.search, &exec, &mut hooks)?;
            match w.reduced {
                Some(r) => reduced.push(r),
                None => break,
            }
        }
        write_json(&self.dir.warmup(), &reduced)?;
        Ok(reduced)
    }

    /// Warm-up plus joint search; writes state, leaderboard and tracker.
    pub fn search(&self, opts: SearchOptions) -> anyhow::Result<SearchRunState> {
        let space = self.space()?;
        let clips = self.encoded()?;
        let sp = split(&clips, self.cfg.split_seed);
        let exec = ParallelExecutor::new(
            TrialContext::new(sp.train, sp.val, self.cfg.search.train.clone())?,
            self.workers(),
        )?;
        let mut hooks = self.hooks(opts)?;
        let state = run_search(&space, &self.cfg.search, &exec, &mut hooks)?;
        self.write_state(&state)?;
        Ok(state)
    }

    pub fn write_state(&self, state: &SearchRunState) -> anyhow::Result<()> {
        write_json(&self.dir.state(), state)?;
        write_json(&self.dir.leaderboard(), &state.leaderboard)?;
        write_json(&self.dir.warmup(), &state.reduced)?;
        let mut log = String::from("key\tcount\tmean_e_val\n");
        for (k, e) in state.tracker.iter() {
            let _ = writeln!(log, "{k}\t{}\t{}", e.count, e.mean());
        }
        write_atomic(&self.dir.tracker_log(), log.as_bytes())
    }

    pub fn load_state(&self) -> anyhow::Result<SearchRunState> {
        let p = self.dir.state();
        let text = fs::read_to_string(&p).with_context(|| format!("reading {} (run `search` first)", p.display()))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Retrains the finalists on train+validation and scores them on test.
    pub fn finalize(&self) -> anyhow::Result<FinalReport> {
        let state = self.load_state()?;
        let clips = self.encoded()?;
        let sp = split(&clips, self.cfg.split_seed);
        let full: Vec<&EncodedClip> = sp.train.iter().chain(&sp.val).copied().collect();
        let fin = finalize(&state, &full, &sp.test, &self.cfg.finalize)?;
        let dir = self.dir.finalists();
        fs::create_dir_all(&dir)?;
        for (i, (f, model)) in fin.report.finalists.iter().zip(&fin.models).enumerate() {
            let rank = i + 1;
            checkpoint::save(&dir.join(format!("{rank}.ckpt")), &model.state_tensors())?;
            write_json(
                &dir.join(format!("{rank}.json")),
                &FinalistSidecar {
                    canonical_key: &f.canonical_key,
                    rank,
                    best: f.best,
                    rmse: f.rmse,
                    mae: f.mae,
                    runs: &f.runs,
                    config: &self.cfg.finalize,
                },
            )?;
        }
        write_json(&self.dir.report(), &fin.report)?;
        let best = &fin.report.finalists[0];
        write_atomic(&self.dir.predictions(), &report::predictions_csv(&best.predictions)?)?;
        Ok(fin.report)
    }

    /// CSV tables and SVG plots from whatever the run has produced.
    pub fn report(&self) -> anyhow::Result<Vec<PathBuf>> {
        let state = self.load_state()?;
        let mut out = Vec::new();
        let mut put = |name: &str, bytes: &[u8]| -> anyhow::Result<()> {
            let p = self.dir.root.join(name);
            write_atomic(&p, bytes)?;
            out.push(p);
            Ok(())
        };
        put("leaderboard.csv", &report::leaderboard_csv(&state.leaderboard)?)?;
        put("learning_curve.csv", &report::learning_curve_csv(&state.history)?)?;
        put(
            "learning_curve.svg",
            report::learning_curve_svg(&state.history).as_bytes(),
        )?;
        if self.dir.report().exists() {
            let rep: FinalReport = serde_json::from_str(&fs::read_to_string(self.dir.report())?)?;
            let best = &rep.finalists[0];
            put("finalists.csv", &report::finalists_csv(&rep)?)?;
            put("predictions.csv", &report::predictions_csv(&best.predictions)?)?;
            let title = format!("Test predictions of {}", best.canonical_key);
            put("scatter.svg", report::scatter_svg(&best.predictions, &title).as_bytes())?;
        }
        Ok(out)
    }
}

/// Reads a `clip_id,predicted,actual` CSV.
pub fn read_predictions(path: &Path) -> anyhow::Result<PredictionSet> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let mut items = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let num = |j: usize| -> anyhow::Result<f64> {
            rec.get(j)
                .ok_or_else(|| anyhow::anyhow!("row {} has too few columns", i + 2))?
                .trim()
                .parse::<f64>()
                .with_context(|| format!("row {} column {}", i + 2, j + 1))
        };
        items.push(Prediction {
            clip_id: rec.get(0).unwrap_or_default().to_string(),
            predicted: num(1)?,
            actual: num(2)?,
        });
    }
    Ok(PredictionSet::new(items)?)
}
