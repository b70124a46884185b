//! Landmark stream ablation: the same warm-up search run once with a CNN
//! stream and once with a GNN stream over the landmark attribute.

use facenas_core::search::{leaderboard, warmup_stream, NoHooks, SearchConfig, TrialExecutor};
use facenas_core::space::{default_fusion_space, JointSpace, StreamKind, StreamSearchSpace};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub seed: u64,
    pub kind: StreamKind,
    pub stream_id: String,
    pub best_key: String,
    /// Motion-average validation error of the best architecture.
    pub best_e_val: f64,
    pub trials: usize,
}

/// Runs a warm-up search of `cnn` and of `gnn` for every seed.
pub fn landmark_ablation(
    cnn: &StreamSearchSpace,
    gnn: &StreamSearchSpace,
    cfg: &SearchConfig,
    seeds: &[u64],
    executor: &dyn TrialExecutor,
) -> anyhow::Result<Vec<AblationRow>> {
    anyhow::ensure!(
        cnn.attribute == gnn.attribute && cnn.kind == StreamKind::Cnn && gnn.kind == StreamKind::Gnn,
        "the ablation needs a CNN and a GNN stream over the same attribute"
    );
    let streams = vec![cnn.clone(), gnn.clone()];
    let fusion = default_fusion_space(&streams);
    let space = JointSpace { streams, fusion };
    space.validate()?;
    let mut rows = Vec::new();
    for &seed in seeds {
        let c = SearchConfig { seed, ..cfg.clone() };
        for (m, s) in space.streams.iter().enumerate() {
            let w = warmup_stream(&space, m, &c, executor, &mut NoHooks)?;
            let best = leaderboard(&w.tracker, 1)
                .into_iter()
                .next()
                .ok_or_else(|| anyhow::anyhow!("no successful trial for `{}`", s.stream_id))?;
            rows.push(AblationRow {
                seed,
                kind: s.kind,
                stream_id: s.stream_id.clone(),
                best_key: best.key,
                best_e_val: best.mean_e_val,
                trials: w.records.len(),
            });
        }
    }
    Ok(rows)
}

/// One row per seed: CNN and GNN errors side by side.
pub fn ablation_csv(rows: &[AblationRow]) -> anyhow::Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["seed", "cnn_e_val", "gnn_e_val", "gnn_wins", "cnn_best", "gnn_best"])?;
    let mut seeds: Vec<u64> = rows.iter().map(|r| r.seed).collect();
    seeds.dedup();
    for s in seeds {
        let pick = |k: StreamKind| rows.iter().find(|r| r.seed == s && r.kind == k);
        if let (Some(c), Some(g)) = (pick(StreamKind::Cnn), pick(StreamKind::Gnn)) {
            w.write_record([
                s.to_string(),
                c.best_e_val.to_string(),
                g.best_e_val.to_string(),
                (g.best_e_val <= c.best_e_val).to_string(),
                c.best_key.clone(),
                g.best_key.clone(),
            ])?;
        }
    }
    Ok(w.into_inner()?)
}
