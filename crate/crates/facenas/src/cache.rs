//! Encoded datasets stored in the checkpoint format, one `[rows, k]` heatmap
//! per `<clip_id>/<attribute>` plus a `<clip_id>/label` scalar. Landmark
//! graphs are rebuilt from the heatmap on load.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{anyhow, bail, Context};
use facenas_core::child::{encode_clip, ClipRecord, EncodedAttribute, EncodedClip};
use facenas_core::landmarks::{build_landmark_graph, LandmarkLayout};
use facenas_core::spectral::{AttributeKind, HeatmapRepresentation, PipelineConfig, SpectralRepresentation};
use facenas_core::tensor::Tensor;
use rayon::prelude::*;

use crate::checkpoint;
use crate::io::Rejection;

/// Encodes every clip in parallel; clips that fail any attribute are
/// rejected whole.
pub fn encode_dataset(
    records: &[ClipRecord],
    cfg: &PipelineConfig,
    layout: &LandmarkLayout,
) -> (Vec<EncodedClip>, Vec<Rejection>) {
    let results: Vec<_> = records.par_iter().map(|r| (r, encode_clip(r, cfg, layout))).collect();
    let mut clips = Vec::new();
    let mut rejected = Vec::new();
    for (r, res) in results {
        match res {
            Ok(c) => clips.push(c),
            Err(e) => rejected.push(Rejection {
                clip_id: r.clip_id.clone(),
                attribute: String::new(),
                reason: e.to_string(),
            }),
        }
    }
    (clips, rejected)
}

pub fn to_tensors(clips: &[EncodedClip]) -> anyhow::Result<checkpoint::Tensors> {
    let mut out = Vec::new();
    for c in clips {
        out.push((format!("{}/label", c.clip_id), Tensor::scalar(c.label)));
        for (kind, a) in &c.attributes {
            let h = &a.heatmap;
            out.push((
                format!("{}/{kind}", c.clip_id),
                Tensor::new(vec![h.rows, h.k], h.matrix.clone())?,
            ));
        }
    }
    Ok(out)
}

pub fn from_tensors(tensors: checkpoint::Tensors, layout: &LandmarkLayout) -> anyhow::Result<Vec<EncodedClip>> {
    let mut order: Vec<String> = Vec::new();
    let mut by_clip: BTreeMap<String, EncodedClip> = BTreeMap::new();
    for (name, t) in tensors {
        let (id, field) = name
            .rsplit_once('/')
            .ok_or_else(|| anyhow!("cache entry `{name}` is not `<clip>/<field>`"))?;
        let clip = by_clip.entry(id.to_string()).or_insert_with(|| {
            order.push(id.to_string());
            EncodedClip {
                clip_id: id.to_string(),
                label: f64::NAN,
                attributes: BTreeMap::new(),
            }
        });
        if field == "label" {
            clip.label = t.item()?;
            continue;
        }
        let kind: AttributeKind = field.parse()?;
        let &[rows, k] = t.dims() else {
            bail!("cache entry `{name}` is not a matrix");
        };
        let heatmap = HeatmapRepresentation {
            rows,
            k,
            matrix: t.into_data(),
        };
        let graph = if kind == AttributeKind::Landmarks {
            let (amplitude, phase) = heatmap.split();
            let rep = SpectralRepresentation {
                kind,
                channels: rows / 2,
                k,
                amplitude,
                phase,
            };
            Some(build_landmark_graph(&rep, layout).with_context(|| format!("rebuilding the graph of `{id}`"))?)
        } else {
            None
        };
        clip.attributes.insert(kind, EncodedAttribute { heatmap, graph });
    }
    order
        .into_iter()
        .map(|id| {
            let c = by_clip.remove(&id).expect("inserted above");
            if !c.label.is_finite() {
                bail!("cache has no label for `{id}`");
            }
            Ok(c)
        })
        .collect()
}

pub fn save(path: &Path, clips: &[EncodedClip]) -> anyhow::Result<()> {
    checkpoint::save(path, &to_tensors(clips)?)?;
    Ok(())
}

pub fn load(path: &Path, layout: &LandmarkLayout) -> anyhow::Result<Vec<EncodedClip>> {
    let t = checkpoint::load(path).with_context(|| format!("reading {}", path.display()))?;
    from_tensors(t, layout)
}
