use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use serde::{Deserialize, Serialize};

use super::data::{cnn_batch, gnn_batch, Batch, EncodedClip, InputShapes, Standardizer, StreamBatch, TargetScaler};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::space::{
    stream_key, Aggregator, Architecture, CnnOp, DecodedStream, FusionOp, JointSpace, Readout, StreamKind,
    StreamSearchSpace,
};
use crate::spectral::AttributeKind;
use crate::tensor::{Graph, ParamId, ParamSet, PoolKind, Tensor, Var};

/// Length every tapped latent is average-pooled to before fusion.
pub const FUSION_LATENT: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// One stream with a pooling + dropout + linear head.
    Standalone,
    /// All streams feeding the fusion blocks through their tap points.
    Joint,
}

#[derive(Debug, Clone, Copy)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone)]
enum Layer {
    Conv {
        w: ParamId,
        b: ParamId,
        dilation: usize,
        k: usize,
    },
    Pool {
        kind: PoolKind,
        k: usize,
    },
    Identity,
    Graph {
        agg: Aggregator,
        lin: Linear,
        att: Option<(ParamId, ParamId)>,
    },
}

#[derive(Debug, Clone)]
struct StreamNet {
    stream_id: String,
    attribute: AttributeKind,
    kind: StreamKind,
    /// Only the layers up to the tap point are built.
    layers: Vec<Layer>,
    out_dim: usize,
    readout: Readout,
    norm: Standardizer,
    edges: Vec<(usize, usize)>,
}

#[derive(Debug, Clone)]
struct FusionBlock {
    op: FusionOp,
    joint: Option<Linear>,
    proj: Vec<Linear>,
    gates: Vec<Linear>,
    attn: Option<ParamId>,
}

/// A concrete child network with its parameters.
#[derive(Debug, Clone)]
pub struct ChildModel {
    pub key: String,
    pub mode: Mode,
    pub dropout: f64,
    pub target: TargetScaler,
    params: ParamSet,
    streams: Vec<StreamNet>,
    fusion: Vec<FusionBlock>,
    head: Linear,
}

struct Builder<'a> {
    params: ParamSet,
    rng: &'a mut Rng,
}

impl Builder<'_> {
    fn weight(&mut self, name: String, shape: &[usize], fan_in: usize) -> ParamId {
        let bound = (6.0 / fan_in.max(1) as f64).sqrt();
        let t = Tensor::uniform(shape.to_vec(), bound, self.rng);
        self.params.add(name, t)
    }

    fn zeros(&mut self, name: String, shape: &[usize]) -> ParamId {
        self.params.add(name, Tensor::zeros(shape.to_vec()))
    }

    fn linear(&mut self, name: &str, d_in: usize, d_out: usize) -> Linear {
        Linear {
            w: self.weight(format!("{name}.w"), &[d_in, d_out], d_in),
            b: self.zeros(format!("{name}.b"), &[d_out]),
        }
    }
}

fn build_stream(
    b: &mut Builder<'_>,
    space: &StreamSearchSpace,
    tokens: &[usize],
    shapes: &InputShapes,
    depth: usize,
) -> Result<StreamNet> {
    let id = &space.stream_id;
    let shape = shapes
        .get(&space.attribute)
        .ok_or_else(|| Error::Input(format!("no `{}` data for stream `{id}`", space.attribute)))?;
    let mut layers = Vec::new();
    let (out_dim, readout, norm, edges) = match space.decode(tokens)? {
        DecodedStream::Cnn { layers: ops } => {
            let mut c = shape.rows;
            for (i, &(op, width)) in ops[..depth].iter().enumerate() {
                layers.push(match op {
                    CnnOp::Conv { k, dilation } => {
                        let w = b.weight(format!("{id}.l{i}.w"), &[width, c, k], c * k);
                        let bias = b.zeros(format!("{id}.l{i}.b"), &[width]);
                        c = width;
                        Layer::Conv {
                            w,
                            b: bias,
                            dilation,
                            k,
                        }
                    }
                    CnnOp::MaxPool { k } => Layer::Pool { kind: PoolKind::Max, k },
                    CnnOp::AvgPool { k } => Layer::Pool {
                        kind: PoolKind::Mean,
                        k,
                    },
                    CnnOp::Identity => Layer::Identity,
                });
            }
            (
                c,
                Readout::Mean,
                Standardizer::identity(shape.rows * shape.k),
                Vec::new(),
            )
        }
        DecodedStream::Gnn { layers: ops, readout } => {
            if shape.nodes == 0 {
                return Err(Error::Input(format!(
                    "stream `{id}` is a GNN but attribute `{}` has no graph",
                    space.attribute
                )));
            }
            let mut f = shape.feature_dim;
            for (i, &(agg, width)) in ops[..depth].iter().enumerate() {
                let lin = b.linear(&format!("{id}.l{i}"), 2 * f, width);
                let att = if agg == Aggregator::Attention {
                    Some((
                        b.weight(format!("{id}.l{i}.att_dst"), &[f, 1], f),
                        b.weight(format!("{id}.l{i}.att_src"), &[f, 1], f),
                    ))
                } else {
                    None
                };
                layers.push(Layer::Graph { agg, lin, att });
                f = width;
            }
            (
                f,
                readout,
                Standardizer::identity(shape.feature_dim),
                shape.edges.clone(),
            )
        }
    };
    Ok(StreamNet {
        stream_id: id.clone(),
        attribute: space.attribute,
        kind: space.kind,
        layers,
        out_dim,
        readout,
        norm,
        edges,
    })
}

/// Builds a stream network with its standalone regression head.
pub fn instantiate_stream(
    space: &StreamSearchSpace,
    tokens: &[usize],
    shapes: &InputShapes,
    dropout: f64,
    seed: u64,
) -> Result<ChildModel> {
    check_dropout(dropout)?;
    let mut rng = Rng::new(seed);
    let mut b = Builder {
        params: ParamSet::new(),
        rng: &mut rng,
    };
    let stream = build_stream(&mut b, space, tokens, shapes, space.depth())?;
    let head = b.linear("head", stream.out_dim, 1);
    Ok(ChildModel {
        key: stream_key(space, tokens)?,
        mode: Mode::Standalone,
        dropout,
        target: TargetScaler::default(),
        params: b.params,
        streams: vec![stream],
        fusion: Vec::new(),
        head,
    })
}

/// Builds the joint model: every stream up to its tap point, the fusion
/// blocks, and the final head.
pub fn instantiate_joint(
    space: &JointSpace,
    arch: &Architecture,
    shapes: &InputShapes,
    dropout: f64,
    seed: u64,
) -> Result<ChildModel> {
    check_dropout(dropout)?;
    let key = arch.canonical_key(space)?;
    let decoded = space.fusion.decode(&arch.fusion, &space.streams)?;
    let mut rng = Rng::new(seed);
    let mut b = Builder {
        params: ParamSet::new(),
        rng: &mut rng,
    };
    let mut streams = Vec::with_capacity(space.streams.len());
    for ((s, (_, tokens)), &tap) in space.streams.iter().zip(&arch.streams).zip(&decoded.taps) {
        streams.push(build_stream(&mut b, s, tokens, shapes, tap)?);
    }
    let m = streams.len();
    let mut fusion = Vec::with_capacity(decoded.blocks.len());
    let mut prev: Option<usize> = None;
    for (j, &(op, width)) in decoded.blocks.iter().enumerate() {
        let mut dims: Vec<usize> = prev.into_iter().collect();
        dims.extend(core::iter::repeat_n(FUSION_LATENT, m));
        let name = format!("fuse{j}");
        let mut block = FusionBlock {
            op,
            joint: None,
            proj: Vec::new(),
            gates: Vec::new(),
            attn: None,
        };
        match op {
            FusionOp::ConcatLinear => block.joint = Some(b.linear(&name, dims.iter().sum(), width)),
            _ => {
                for (i, &d) in dims.iter().enumerate() {
                    block.proj.push(b.linear(&format!("{name}.p{i}"), d, width));
                }
                if op == FusionOp::GatedSum {
                    for (i, &d) in dims.iter().enumerate() {
                        block.gates.push(b.linear(&format!("{name}.g{i}"), d, width));
                    }
                }
                if op == FusionOp::AttentionSum {
                    block.attn = Some(b.weight(format!("{name}.att"), &[width, 1], width));
                }
            }
        }
        fusion.push(block);
        prev = Some(width);
    }
    let head = b.linear("head", prev.unwrap_or(FUSION_LATENT * m), 1);
    Ok(ChildModel {
        key,
        mode: Mode::Joint,
        dropout,
        target: TargetScaler::default(),
        params: b.params,
        streams,
        fusion,
        head,
    })
}

fn check_dropout(p: f64) -> Result<()> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Contract(format!("dropout {p} is outside [0, 1)")));
    }
    Ok(())
}

/// `[c, out]` matrix averaging `c` inputs into `out` adaptive bins.
fn adaptive_pool_matrix(c: usize, out: usize) -> Tensor {
    let mut m = vec![0.0; c * out];
    for j in 0..out {
        let start = j * c / out;
        let end = ((j + 1) * c).div_ceil(out);
        let w = 1.0 / (end - start) as f64;
        for i in start..end {
            m[i * out + j] = w;
        }
    }
    Tensor::new([c, out], m).expect("sized above")
}

impl ChildModel {
    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn attributes(&self) -> Vec<AttributeKind> {
        self.streams.iter().map(|s| s.attribute).collect()
    }

    pub fn stream_ids(&self) -> Vec<&str> {
        self.streams.iter().map(|s| s.stream_id.as_str()).collect()
    }

    /// Sets the final linear layer's weights and bias to zero.
    pub fn zero_head(&mut self) {
        self.params.get_mut(self.head.w).value.fill(0.0);
        self.params.get_mut(self.head.b).value.fill(0.0);
    }

    /// Fits the input standardizers and the label scaler on training clips.
    pub fn fit_normalizers(&mut self, train: &[&EncodedClip]) -> Result<()> {
        for s in &mut self.streams {
            let mut rows: Vec<&[f64]> = Vec::with_capacity(train.len());
            let mut k = 1;
            for clip in train {
                let a = clip.attribute(s.attribute)?;
                match s.kind {
                    StreamKind::Cnn => {
                        rows.push(&a.heatmap.matrix);
                        k = a.heatmap.k;
                    }
                    StreamKind::Gnn => {
                        let g = a.graph.as_ref().ok_or_else(|| {
                            Error::Input(format!("clip `{}` has no `{}` graph", clip.clip_id, s.attribute))
                        })?;
                        rows.push(&g.node_features);
                    }
                }
            }
            let dim = s.norm.mean.len();
            s.norm = match s.kind {
                // one scale per heatmap row: the stream ends in a mean over
                // bins, which per-bin scaling would flood with noise bins
                StreamKind::Cnn => Standardizer::fit_grouped(rows.into_iter(), dim, k),
                StreamKind::Gnn => Standardizer::fit(rows.into_iter(), dim),
            };
        }
        let labels: Vec<f64> = train.iter().map(|c| c.label).collect();
        self.target = TargetScaler::fit(&labels);
        Ok(())
    }

    /// Assembles normalized network inputs (and encoded targets) for `clips`.
    pub fn make_batch(&self, clips: &[&EncodedClip]) -> Result<Batch> {
        let streams = self
            .streams
            .iter()
            .map(|s| match s.kind {
                StreamKind::Cnn => cnn_batch(clips, s.attribute, &s.norm),
                StreamKind::Gnn => gnn_batch(clips, s.attribute, &s.norm, &s.edges),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Batch {
            size: clips.len(),
            streams,
            targets: clips.iter().map(|c| self.target.encode(c.label)).collect(),
        })
    }

    /// Places every parameter on the tape.
    pub fn param_vars(&self, g: &mut Graph) -> Vec<Var> {
        (0..self.params.len())
            .map(|i| g.param(&self.params, ParamId(i)))
            .collect()
    }

    /// Forward pass returning normalized predictions `[batch]`.
    pub fn forward(&self, g: &mut Graph, batch: &Batch, rng: &mut Rng) -> Result<Var> {
        let pv = self.param_vars(g);
        self.forward_with(g, &pv, batch, rng)
    }

    /// Forward pass with the parameter vars supplied by the caller (one per
    /// parameter, in parameter order).
    pub fn forward_with(&self, g: &mut Graph, pv: &[Var], batch: &Batch, rng: &mut Rng) -> Result<Var> {
        if pv.len() != self.params.len() {
            return Err(Error::Contract(format!(
                "{} parameter vars for {} parameters",
                pv.len(),
                self.params.len()
            )));
        }
        if batch.streams.len() != self.streams.len() {
            return Err(Error::Contract("batch does not match the model's streams".into()));
        }
        let mut latents = Vec::with_capacity(self.streams.len());
        for (s, sb) in self.streams.iter().zip(&batch.streams) {
            latents.push(stream_forward(s, g, pv, sb, batch.size)?);
        }
        let features = match self.mode {
            Mode::Standalone => latents[0],
            Mode::Joint => {
                let mut pooled = Vec::with_capacity(latents.len());
                for (z, s) in latents.iter().zip(&self.streams) {
                    let p = g.constant(adaptive_pool_matrix(s.out_dim, FUSION_LATENT));
                    pooled.push(g.matmul(*z, p)?);
                }
                let mut prev: Option<Var> = None;
                for block in &self.fusion {
                    let mut inputs: Vec<Var> = prev.into_iter().collect();
                    inputs.extend(&pooled);
                    prev = Some(fusion_forward(block, g, pv, &inputs, batch.size)?);
                }
                match prev {
                    Some(h) => h,
                    None => g.concat(&pooled, 1)?,
                }
            }
        };
        let dropped = g.dropout(features, self.dropout, rng)?;
        let out = linear(g, pv, self.head, dropped)?;
        g.reshape(out, [batch.size])
    }

    /// Predicted labels (decoded to the label scale), evaluated in chunks.
    pub fn predict_many(&self, clips: &[&EncodedClip]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(clips.len());
        let mut rng = Rng::new(0);
        for chunk in clips.chunks(64) {
            let batch = self.make_batch(chunk)?;
            let mut g = Graph::eval();
            let y = self.forward(&mut g, &batch, &mut rng)?;
            out.extend(g.value(y).data().iter().map(|&z| self.target.decode(z)));
        }
        Ok(out)
    }

    pub fn predict(&self, clip: &EncodedClip) -> Result<f64> {
        let y = self.predict_many(&[clip])?[0];
        if !y.is_finite() {
            return Err(Error::Diverged { epoch: 0 });
        }
        Ok(y)
    }

    /// Parameters followed by the fitted normalizer statistics, by name.
    pub fn state_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self.params.iter().map(|p| (p.name.clone(), p.value.clone())).collect();
        for s in &self.streams {
            out.push((
                format!("norm.{}.mean", s.stream_id),
                Tensor::vector(s.norm.mean.clone()),
            ));
            out.push((
                format!("norm.{}.scale", s.stream_id),
                Tensor::vector(s.norm.scale.clone()),
            ));
        }
        out.push((
            "target".into(),
            Tensor::vector(vec![self.target.shift, self.target.scale]),
        ));
        out
    }

    /// Inverse of [`ChildModel::state_tensors`]; names and shapes must match.
    pub fn load_state_tensors(&mut self, tensors: &[(String, Tensor)]) -> Result<()> {
        let expected = self.state_tensors();
        if tensors.len() != expected.len() {
            return Err(Error::Contract(format!(
                "checkpoint holds {} tensors, model `{}` has {}",
                tensors.len(),
                self.key,
                expected.len()
            )));
        }
        for ((name, t), (want, e)) in tensors.iter().zip(&expected) {
            if name != want || t.shape() != e.shape() {
                return Err(Error::Contract(format!(
                    "checkpoint tensor `{name}` {} does not match `{want}` {}",
                    t.shape(),
                    e.shape()
                )));
            }
        }
        let n = self.params.len();
        for (p, (_, t)) in self.params.iter_mut().zip(tensors) {
            p.value = t.clone();
        }
        for (i, s) in self.streams.iter_mut().enumerate() {
            s.norm.mean = tensors[n + 2 * i].1.data().to_vec();
            s.norm.scale = tensors[n + 2 * i + 1].1.data().to_vec();
        }
        let t = tensors[tensors.len() - 1].1.data();
        self.target = TargetScaler {
            shift: t[0],
            scale: t[1],
        };
        Ok(())
    }
}

fn linear(g: &mut Graph, pv: &[Var], l: Linear, x: Var) -> Result<Var> {
    let y = g.matmul(x, pv[l.w.0])?;
    g.add_bias(y, pv[l.b.0], 1)
}

fn stream_forward(s: &StreamNet, g: &mut Graph, pv: &[Var], sb: &StreamBatch, batch: usize) -> Result<Var> {
    match sb {
        StreamBatch::Cnn { data, rows, k } => {
            let mut x = g.constant(Tensor::new([batch, *rows, *k], data.clone())?);
            for layer in &s.layers {
                x = match *layer {
                    Layer::Conv { w, b, dilation, k } => {
                        let y = g.conv1d(x, pv[w.0], 1, dilation, dilation * (k - 1) / 2)?;
                        let y = g.add_bias(y, pv[b.0], 1)?;
                        g.relu(y)
                    }
                    Layer::Pool { kind, k } => g.pool1d(x, kind, k, 1, (k - 1) / 2)?,
                    Layer::Identity => x,
                    Layer::Graph { .. } => unreachable!("graph layer in a CNN stream"),
                };
            }
            g.mean_axis(x, 2)
        }
        StreamBatch::Gnn {
            features,
            feature_dim,
            nodes,
            edges,
        } => {
            let n = batch * nodes;
            let mut h = g.constant(Tensor::new([n, *feature_dim], features.clone())?);
            let src: Vec<usize> = edges.iter().map(|e| e.0).collect();
            let tgt: Vec<usize> = edges.iter().map(|e| e.1).collect();
            let mut deg = vec![0.0f64; n];
            for &t in &tgt {
                deg[t] += 1.0;
            }
            let inv_deg = Tensor::vector(deg.iter().map(|&d| if d > 0.0 { 1.0 / d } else { 0.0 }).collect());
            let inv_deg = g.constant(inv_deg);
            for layer in &s.layers {
                let Layer::Graph { agg, lin, att } = *layer else {
                    unreachable!("CNN layer in a GNN stream")
                };
                let msgs = g.index_rows(h, &src)?;
                let aggregated = match agg {
                    Aggregator::Sum => g.scatter_sum(msgs, &tgt, n)?,
                    Aggregator::Mean => {
                        let s = g.scatter_sum(msgs, &tgt, n)?;
                        g.scale_rows(s, inv_deg)?
                    }
                    Aggregator::Max => g.scatter_max(msgs, &tgt, n)?,
                    Aggregator::Attention => {
                        let (u, v) = att.expect("attention parameters");
                        let sd = g.matmul(h, pv[u.0])?;
                        let ss = g.matmul(h, pv[v.0])?;
                        let ed = g.index_rows(sd, &tgt)?;
                        let es = g.index_rows(ss, &src)?;
                        let e = g.add(ed, es)?;
                        let e = g.tanh(e);
                        let e = g.reshape(e, [edges.len()])?;
                        let alpha = g.segment_softmax(e, &tgt, n)?;
                        let weighted = g.scale_rows(msgs, alpha)?;
                        g.scatter_sum(weighted, &tgt, n)?
                    }
                };
                let cat = g.concat(&[h, aggregated], 1)?;
                let y = linear(g, pv, lin, cat)?;
                h = g.relu(y);
            }
            let graph_of: Vec<usize> = (0..n).map(|i| i / nodes).collect();
            match s.readout {
                Readout::Sum => g.scatter_sum(h, &graph_of, batch),
                Readout::Max => g.scatter_max(h, &graph_of, batch),
                Readout::Mean => {
                    let total = g.scatter_sum(h, &graph_of, batch)?;
                    Ok(g.scale(total, 1.0 / *nodes as f64))
                }
            }
        }
    }
}

fn fusion_forward(block: &FusionBlock, g: &mut Graph, pv: &[Var], inputs: &[Var], batch: usize) -> Result<Var> {
    if let Some(l) = block.joint {
        let cat = g.concat(inputs, 1)?;
        let y = linear(g, pv, l, cat)?;
        return Ok(g.relu(y));
    }
    let mut proj = Vec::with_capacity(inputs.len());
    for (&x, &l) in inputs.iter().zip(&block.proj) {
        proj.push(linear(g, pv, l, x)?);
    }
    match block.op {
        FusionOp::Add => {
            let mut acc = proj[0];
            for &p in &proj[1..] {
                acc = g.add(acc, p)?;
            }
            Ok(g.relu(acc))
        }
        FusionOp::Mul => {
            let mut acc = proj[0];
            for &p in &proj[1..] {
                acc = g.mul(acc, p)?;
            }
            Ok(acc)
        }
        FusionOp::GatedSum => {
            let mut acc: Option<Var> = None;
            for ((&x, &p), &gl) in inputs.iter().zip(&proj).zip(&block.gates) {
                let gate = linear(g, pv, gl, x)?;
                let gate = g.sigmoid(gate);
                let term = g.mul(gate, p)?;
                acc = Some(match acc {
                    Some(a) => g.add(a, term)?,
                    None => term,
                });
            }
            Ok(acc.expect("at least one fusion input"))
        }
        FusionOp::AttentionSum => {
            let a = pv[block.attn.expect("attention vector").0];
            let squashed: Vec<Var> = proj.iter().map(|&p| g.tanh(p)).collect();
            let mut scores = Vec::with_capacity(squashed.len());
            for &p in &squashed {
                scores.push(g.matmul(p, a)?);
            }
            let scores = g.concat(&scores, 1)?;
            let alpha = g.softmax(scores)?;
            let mut acc: Option<Var> = None;
            for (i, &p) in squashed.iter().enumerate() {
                let w = g.narrow(alpha, 1, i, 1)?;
                let w = g.reshape(w, [batch])?;
                let term = g.scale_rows(p, w)?;
                acc = Some(match acc {
                    Some(s) => g.add(s, term)?,
                    None => term,
                });
            }
            Ok(acc.expect("at least one fusion input"))
        }
        FusionOp::ConcatLinear => unreachable!("handled above"),
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::child::data::input_shapes;
    use crate::child::testing::{toy_clips, toy_joint_space};
    use crate::space::{default_cnn_space, default_gnn_space, Choice, DecisionSlot};

    #[test]
    fn all_identity_cnn_pools_the_input() {
        let clips = toy_clips(4, 1);
        let refs: Vec<&EncodedClip> = clips.iter().collect();
        let shapes = input_shapes(&refs).unwrap();
        let space = default_cnn_space("aus", AttributeKind::Aus);
        let model = instantiate_stream(&space, &[6, 6, 6, 6, 0, 0], &shapes, 0.0, 3).unwrap();
        let batch = model.make_batch(&refs).unwrap();
        let mut g = Graph::eval();
        let pv = model.param_vars(&mut g);
        let StreamBatch::Cnn { rows, k, .. } = &batch.streams[0] else {
            panic!()
        };
        let z = stream_forward(&model.streams[0], &mut g, &pv, &batch.streams[0], 4).unwrap();
        for (b, clip) in clips.iter().enumerate() {
            let h = &clip.attributes[&AttributeKind::Aus].heatmap;
            for r in 0..*rows {
                let expect = h.row(r).iter().sum::<f64>() / *k as f64;
                assert!((g.value(z).data()[b * rows + r] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn same_seed_same_parameters() {
        let clips = toy_clips(3, 2);
        let refs: Vec<&EncodedClip> = clips.iter().collect();
        let shapes = input_shapes(&refs).unwrap();
        let (space, arch) = toy_joint_space();
        let a = instantiate_joint(&space, &arch, &shapes, 0.1, 9).unwrap();
        let b = instantiate_joint(&space, &arch, &shapes, 0.1, 9).unwrap();
        let c = instantiate_joint(&space, &arch, &shapes, 0.1, 10).unwrap();
        assert_eq!(a.params().flat_values(), b.params().flat_values());
        assert_ne!(a.params().flat_values(), c.params().flat_values());
    }

    #[test]
    fn zero_head_predicts_zero() {
        let clips = toy_clips(3, 4);
        let refs: Vec<&EncodedClip> = clips.iter().collect();
        let shapes = input_shapes(&refs).unwrap();
        let (space, arch) = toy_joint_space();
        let mut m = instantiate_joint(&space, &arch, &shapes, 0.0, 1).unwrap();
        m.zero_head();
        assert_eq!(m.predict(&clips[0]).unwrap(), 0.0);
    }

    #[test]
    fn missing_attribute_names_it() {
        let mut clips = toy_clips(2, 5);
        let refs: Vec<&EncodedClip> = clips.iter().collect();
        let shapes = input_shapes(&refs).unwrap();
        let space = default_cnn_space("pose", AttributeKind::Pose);
        let m = instantiate_stream(&space, &[0, 0, 0, 0, 0, 0], &shapes, 0.0, 1).unwrap();
        clips[0].attributes.remove(&AttributeKind::Pose);
        let err = m.predict(&clips[0]).unwrap_err();
        assert!(matches!(&err, Error::Input(msg) if msg.contains("pose")), "{err}");
    }

    #[test]
    fn mean_gnn_keeps_equal_node_embeddings_equal() {
        let mut clips = toy_clips(1, 6);
        let g0 = clips[0]
            .attributes
            .get_mut(&AttributeKind::Landmarks)
            .unwrap()
            .graph
            .as_mut()
            .unwrap();
        let f = g0.feature_dim;
        let row: Vec<f64> = (0..f).map(|i| (i as f64 * 0.37).sin()).collect();
        for n in 0..g0.num_nodes {
            g0.node_features[n * f..(n + 1) * f].copy_from_slice(&row);
        }
        let refs: Vec<&EncodedClip> = clips.iter().collect();
        let shapes = input_shapes(&refs).unwrap();
        let space = default_gnn_space("lm", AttributeKind::Landmarks);
        let m = instantiate_stream(&space, &[0, 1, 0, 0], &shapes, 0.0, 2).unwrap();
        let batch = m.make_batch(&refs).unwrap();
        // inspect node embeddings after every layer via max == mean readout
        let s = &m.streams[0];
        let mut g = Graph::eval();
        let pv = m.param_vars(&mut g);
        let mut probe = s.clone();
        for depth in 1..=s.layers.len() {
            probe.layers = s.layers[..depth].to_vec();
            probe.readout = Readout::Max;
            let mx = stream_forward(&probe, &mut g, &pv, &batch.streams[0], 1).unwrap();
            probe.readout = Readout::Mean;
            let mn = stream_forward(&probe, &mut g, &pv, &batch.streams[0], 1).unwrap();
            for (a, b) in g.value(mx).data().iter().zip(g.value(mn).data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gnn_prediction_is_invariant_to_node_relabelling() {
        let clips = toy_clips(2, 7);
        let refs: Vec<&EncodedClip> = clips.iter().collect();
        let shapes = input_shapes(&refs).unwrap();
        let mut space = default_gnn_space("lm", AttributeKind::Landmarks);
        space.slots.truncate(2);
        space.slots[0] = DecisionSlot::new(
            "layer0",
            vec![Choice::Gnn {
                agg: Aggregator::Attention,
                width: 8,
            }],
        );
        space.slots[1] = DecisionSlot::new(
            "layer1",
            vec![Choice::Gnn {
                agg: Aggregator::Max,
                width: 8,
            }],
        );
        let m = instantiate_stream(&space, &[0, 0], &shapes, 0.0, 4).unwrap();
        let before = m.predict_many(&refs).unwrap();

        // random consistent permutation of node indices
        let n = shapes[&AttributeKind::Landmarks].nodes;
        let mut perm: Vec<usize> = (0..n).collect();
        Rng::new(11).shuffle(&mut perm);
        let mut permuted = clips.clone();
        for clip in &mut permuted {
            let g = clip
                .attributes
                .get_mut(&AttributeKind::Landmarks)
                .unwrap()
                .graph
                .as_mut()
                .unwrap();
            let f = g.feature_dim;
            let old = g.node_features.clone();
            for v in 0..n {
                g.node_features[perm[v] * f..(perm[v] + 1) * f].copy_from_slice(&old[v * f..(v + 1) * f]);
            }
        }
        let mut pm = m.clone();
        pm.streams[0].edges = m.streams[0].edges.iter().map(|&(s, t)| (perm[s], perm[t])).collect();
        let prefs: Vec<&EncodedClip> = permuted.iter().collect();
        let after = pm.predict_many(&prefs).unwrap();
        for (a, b) in before.iter().zip(&after) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn state_tensors_round_trip() {
        let clips = toy_clips(8, 9);
        let refs: Vec<&EncodedClip> = clips.iter().collect();
        let shapes = input_shapes(&refs).unwrap();
        let (space, arch) = toy_joint_space();
        let mut a = instantiate_joint(&space, &arch, &shapes, 0.0, 1).unwrap();
        a.fit_normalizers(&refs).unwrap();
        let mut b = instantiate_joint(&space, &arch, &shapes, 0.0, 2).unwrap();
        assert_ne!(a.predict_many(&refs).unwrap(), b.predict_many(&refs).unwrap());
        b.load_state_tensors(&a.state_tensors()).unwrap();
        assert_eq!(a.predict_many(&refs).unwrap(), b.predict_many(&refs).unwrap());
        let mut short = a.state_tensors();
        short.pop();
        assert!(b.load_state_tensors(&short).is_err());
    }

    #[test]
    fn adaptive_pool_rows_average() {
        let p = adaptive_pool_matrix(6, 32);
        for j in 0..32 {
            let col: f64 = (0..6).map(|i| p.data()[i * 32 + j]).sum();
            assert!((col - 1.0).abs() < 1e-12);
        }
        let q = adaptive_pool_matrix(64, 32);
        assert_eq!(q.data()[32], 0.5);
    }
}
