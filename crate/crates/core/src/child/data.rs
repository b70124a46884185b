//! Encoded clips, dataset splits, standardizers and mini-batch assembly.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::landmarks::{build_landmark_graph, LandmarkGraph, LandmarkLayout};
use crate::rng::Rng;
use crate::spectral::{
    encode_clip_attribute, to_heatmap, AttributeKind, AttributeTimeSeries, HeatmapRepresentation, PipelineConfig,
};

/// Raw clip: one time series per attribute plus the regression label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipRecord {
    pub clip_id: String,
    pub label: f64,
    pub series: BTreeMap<AttributeKind, AttributeTimeSeries>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodedAttribute {
    pub heatmap: HeatmapRepresentation,
    /// Present for the landmark attribute.
    pub graph: Option<LandmarkGraph>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodedClip {
    pub clip_id: String,
    pub label: f64,
    pub attributes: BTreeMap<AttributeKind, EncodedAttribute>,
}

impl EncodedClip {
    pub fn attribute(&self, kind: AttributeKind) -> Result<&EncodedAttribute> {
        self.attributes
            .get(&kind)
            .ok_or_else(|| Error::Input(format!("clip `{}` has no `{kind}` representation", self.clip_id)))
    }
}

/// Encodes every attribute of a clip. The landmark attribute additionally
/// gets its graph built from `layout`.
pub fn encode_clip(record: &ClipRecord, cfg: &PipelineConfig, layout: &LandmarkLayout) -> Result<EncodedClip> {
    if !record.label.is_finite() {
        return Err(Error::Input(format!(
            "clip `{}` has a non-finite label",
            record.clip_id
        )));
    }
    let mut attributes = BTreeMap::new();
    for (&kind, series) in &record.series {
        let rep = encode_clip_attribute(series, cfg)?;
        let graph = if kind == AttributeKind::Landmarks {
            Some(build_landmark_graph(&rep, layout)?)
        } else {
            None
        };
        attributes.insert(
            kind,
            EncodedAttribute {
                heatmap: to_heatmap(&rep),
                graph,
            },
        );
    }
    Ok(EncodedClip {
        clip_id: record.clip_id.clone(),
        label: record.label,
        attributes,
    })
}

/// Input geometry of one attribute, shared by every clip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeShape {
    /// Heatmap rows (2 x channels) and bins.
    pub rows: usize,
    pub k: usize,
    /// Graph geometry, when the attribute has one.
    pub nodes: usize,
    pub feature_dim: usize,
    pub edges: Vec<(usize, usize)>,
}

pub type InputShapes = BTreeMap<AttributeKind, AttributeShape>;

/// Reads the input geometry from `clips`, checking that all clips agree.
pub fn input_shapes(clips: &[&EncodedClip]) -> Result<InputShapes> {
    let first = clips
        .first()
        .ok_or_else(|| Error::Contract("cannot infer input shapes from an empty dataset".into()))?;
    let mut shapes = InputShapes::new();
    for (&kind, attr) in &first.attributes {
        let (nodes, feature_dim, edges) = match &attr.graph {
            Some(g) => (g.num_nodes, g.feature_dim, g.directed_edges()),
            None => (0, 0, Vec::new()),
        };
        shapes.insert(
            kind,
            AttributeShape {
                rows: attr.heatmap.rows,
                k: attr.heatmap.k,
                nodes,
                feature_dim,
                edges,
            },
        );
    }
    for clip in clips {
        for (kind, s) in &shapes {
            let a = clip.attribute(*kind)?;
            let graph_ok = match &a.graph {
                Some(g) => g.num_nodes == s.nodes && g.feature_dim == s.feature_dim,
                None => s.nodes == 0,
            };
            if a.heatmap.rows != s.rows || a.heatmap.k != s.k || !graph_ok {
                return Err(Error::Input(format!(
                    "clip `{}` attribute `{kind}` has a different shape than clip `{}`",
                    clip.clip_id, first.clip_id
                )));
            }
        }
    }
    Ok(shapes)
}

/// Seeded train/validation/test split of indices, by clip id. Fractions are
/// 70/15/15 with rounding in favour of the training set.
pub fn split_indices(clip_ids: &[&str], seed: u64) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..clip_ids.len()).collect();
    order.sort_by(|&a, &b| clip_ids[a].cmp(clip_ids[b]));
    Rng::new(seed).shuffle(&mut order);
    let n = order.len();
    let n_val = (n as f64 * 0.15).floor() as usize;
    let n_test = (n as f64 * 0.15).floor() as usize;
    let n_train = n - n_val - n_test;
    let train = order[..n_train].to_vec();
    let val = order[n_train..n_train + n_val].to_vec();
    let test = order[n_train + n_val..].to_vec();
    (train, val, test)
}

/// Elementwise `(x - mean) / scale`, with the statistics cycling over chunks
/// of `mean.len()` values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

const MIN_SCALE: f64 = 1e-8;

impl Standardizer {
    pub fn identity(dim: usize) -> Self {
        Standardizer {
            mean: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    /// Fits per-position statistics over all chunks of length `dim` in `rows`.
    pub fn fit<'a>(rows: impl Iterator<Item = &'a [f64]>, dim: usize) -> Self {
        let mut sum = vec![0.0; dim];
        let mut sq = vec![0.0; dim];
        let mut n = 0usize;
        let mut chunks: Vec<&[f64]> = Vec::new();
        for r in rows {
            for c in r.chunks_exact(dim) {
                for (s, &v) in sum.iter_mut().zip(c) {
                    *s += v;
                }
                chunks.push(c);
                n += 1;
            }
        }
        if n == 0 {
            return Self::identity(dim);
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        for c in chunks {
            for ((q, &v), m) in sq.iter_mut().zip(c).zip(&mean) {
                *q += (v - m) * (v - m);
            }
        }
        let scale = sq
            .iter()
            .map(|q| {
                let sd = (q / n as f64).sqrt();
                if sd > MIN_SCALE {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Standardizer { mean, scale }
    }

    /// Like [`Standardizer::fit`], but positions are centred individually
    /// while the scale is shared by each run of `group` consecutive
    /// positions, so relative variances inside a group are preserved.
    pub fn fit_grouped<'a>(rows: impl Iterator<Item = &'a [f64]>, dim: usize, group: usize) -> Self {
        let mut s = Self::fit(rows, dim);
        if group <= 1 || dim % group != 0 {
            return s;
        }
        for chunk in s.scale.chunks_mut(group) {
            let var = chunk.iter().map(|v| v * v).sum::<f64>() / group as f64;
            let sd = var.sqrt();
            chunk.fill(if sd > MIN_SCALE { sd } else { 1.0 });
        }
        s
    }

    pub fn apply(&self, x: &[f64], out: &mut Vec<f64>) {
        let d = self.mean.len();
        out.extend(
            x.iter()
                .enumerate()
                .map(|(i, &v)| (v - self.mean[i % d]) / self.scale[i % d]),
        );
    }
}

/// Affine label transform `y = shift + scale * z`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetScaler {
    pub shift: f64,
    pub scale: f64,
}

impl Default for TargetScaler {
    fn default() -> Self {
        TargetScaler { shift: 0.0, scale: 1.0 }
    }
}

impl TargetScaler {
    pub fn fit(labels: &[f64]) -> Self {
        if labels.is_empty() {
            return Self::default();
        }
        let n = labels.len() as f64;
        let mean = labels.iter().sum::<f64>() / n;
        let var = labels.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>() / n;
        let sd = var.sqrt();
        TargetScaler {
            shift: mean,
            scale: if sd > MIN_SCALE { sd } else { 1.0 },
        }
    }

    pub fn encode(&self, y: f64) -> f64 {
        (y - self.shift) / self.scale
    }

    pub fn decode(&self, z: f64) -> f64 {
        self.shift + self.scale * z
    }
}

/// Network input for one stream over a mini-batch.
#[derive(Debug, Clone, PartialEq)]
pub enum StreamBatch {
    /// `[batch, rows, k]` heatmaps.
    Cnn { data: Vec<f64>, rows: usize, k: usize },
    /// Disjoint union of the batch's graphs.
    Gnn {
        /// `[batch * nodes, feature_dim]`.
        features: Vec<f64>,
        feature_dim: usize,
        nodes: usize,
        /// `(source, target)` over the union.
        edges: Vec<(usize, usize)>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub size: usize,
    pub streams: Vec<StreamBatch>,
    /// Encoded labels (empty at prediction time).
    pub targets: Vec<f64>,
}

pub(crate) fn cnn_batch(clips: &[&EncodedClip], kind: AttributeKind, norm: &Standardizer) -> Result<StreamBatch> {
    let mut data = Vec::new();
    let (mut rows, mut k) = (0, 0);
    for clip in clips {
        let h = &clip.attribute(kind)?.heatmap;
        if h.matrix.len() != norm.mean.len() {
            return Err(Error::Input(format!(
                "clip `{}` attribute `{kind}`: {} heatmap values, model expects {}",
                clip.clip_id,
                h.matrix.len(),
                norm.mean.len()
            )));
        }
        rows = h.rows;
        k = h.k;
        norm.apply(&h.matrix, &mut data);
    }
    Ok(StreamBatch::Cnn { data, rows, k })
}

pub(crate) fn gnn_batch(
    clips: &[&EncodedClip],
    kind: AttributeKind,
    norm: &Standardizer,
    edges: &[(usize, usize)],
) -> Result<StreamBatch> {
    let mut features = Vec::new();
    let mut all_edges = Vec::with_capacity(edges.len() * clips.len());
    let mut nodes = 0;
    for (b, clip) in clips.iter().enumerate() {
        let g = clip
            .attribute(kind)?
            .graph
            .as_ref()
            .ok_or_else(|| Error::Input(format!("clip `{}` has no `{kind}` graph", clip.clip_id)))?;
        if g.feature_dim != norm.mean.len() {
            return Err(Error::Input(format!(
                "clip `{}` attribute `{kind}`: node features of width {}, model expects {}",
                clip.clip_id,
                g.feature_dim,
                norm.mean.len()
            )));
        }
        nodes = g.num_nodes;
        norm.apply(&g.node_features, &mut features);
        let off = b * nodes;
        all_edges.extend(edges.iter().map(|&(s, t)| (s + off, t + off)));
    }
    Ok(StreamBatch::Gnn {
        features,
        feature_dim: norm.mean.len(),
        nodes,
        edges: all_edges,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grouped_scale_keeps_relative_variance() {
        // two groups of two positions; position 0 varies 10x more than 1
        let data = [vec![10.0, 1.0, 5.0, 5.0], vec![-10.0, -1.0, 7.0, 3.0]];
        let s = Standardizer::fit_grouped(data.iter().map(Vec::as_slice), 4, 2);
        assert_eq!(s.mean, vec![0.0, 0.0, 6.0, 4.0]);
        let expect = ((100.0 + 1.0) / 2.0f64).sqrt();
        assert!((s.scale[0] - expect).abs() < 1e-12 && (s.scale[1] - expect).abs() < 1e-12);
        assert!((s.scale[2] - 1.0).abs() < 1e-12 && (s.scale[3] - 1.0).abs() < 1e-12);
        let mut out = Vec::new();
        s.apply(&data[0], &mut out);
        assert!((out[0] / out[1] - 10.0).abs() < 1e-12);
    }
}
