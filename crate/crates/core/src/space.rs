//! Candidate-operator spaces for streams and fusion, architecture tokens,
//! and search-complexity accounting.

use alloc::borrow::ToOwned;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use num_bigint::BigUint;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::AttributeKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CnnOp {
    Conv { k: usize, dilation: usize },
    MaxPool { k: usize },
    AvgPool { k: usize },
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Aggregator {
    Mean,
    Sum,
    Max,
    Attention,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Readout {
    Mean,
    Max,
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FusionOp {
    ConcatLinear,
    Add,
    Mul,
    GatedSum,
    AttentionSum,
}

/// One categorical option of a decision slot. Serialized as its label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Choice {
    Cnn(CnnOp),
    Width(usize),
    Gnn {
        agg: Aggregator,
        width: usize,
    },
    Readout(Readout),
    /// 1-based layer index whose output feeds the fusion input block.
    Tap(usize),
    Fusion {
        op: FusionOp,
        width: usize,
    },
}

impl fmt::Display for Choice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Choice::Cnn(CnnOp::Conv { k, dilation: 1 }) => write!(f, "conv_k{k}"),
            Choice::Cnn(CnnOp::Conv { k, dilation }) => write!(f, "dilconv_k{k}_d{dilation}"),
            Choice::Cnn(CnnOp::MaxPool { k }) => write!(f, "max_pool_k{k}"),
            Choice::Cnn(CnnOp::AvgPool { k }) => write!(f, "avg_pool_k{k}"),
            Choice::Cnn(CnnOp::Identity) => f.write_str("identity"),
            Choice::Width(w) => write!(f, "w{w}"),
            Choice::Gnn { agg, width } => {
                let a = match agg {
                    Aggregator::Mean => "mean",
                    Aggregator::Sum => "sum",
                    Aggregator::Max => "max",
                    Aggregator::Attention => "attn",
                };
                write!(f, "gnn_{a}_w{width}")
            }
            Choice::Readout(r) => {
                let r = match r {
                    Readout::Mean => "mean",
                    Readout::Max => "max",
                    Readout::Sum => "sum",
                };
                write!(f, "readout_{r}")
            }
            Choice::Tap(l) => write!(f, "tap{l}"),
            Choice::Fusion { op, width } => {
                let o = match op {
                    FusionOp::ConcatLinear => "concat",
                    FusionOp::Add => "add",
                    FusionOp::Mul => "mul",
                    FusionOp::GatedSum => "gated",
                    FusionOp::AttentionSum => "attn_sum",
                };
                write!(f, "fuse_{o}_w{width}")
            }
        }
    }
}

fn parse_num(s: &str, label: &str) -> Result<usize> {
    s.parse::<usize>()
        .ok()
        .filter(|&v| v > 0)
        .ok_or_else(|| Error::Parse(format!("bad number in choice label `{label}`")))
}

fn split_width<'a>(rest: &'a str, label: &str) -> Result<(&'a str, usize)> {
    let (head, w) = rest
        .rsplit_once("_w")
        .ok_or_else(|| Error::Parse(format!("choice label `{label}` lacks a width")))?;
    Ok((head, parse_num(w, label)?))
}

impl FromStr for Choice {
    type Err = Error;

    fn from_str(label: &str) -> Result<Self> {
        let bad = || Error::Parse(format!("unknown choice label `{label}`"));
        if label == "identity" {
            return Ok(Choice::Cnn(CnnOp::Identity));
        }
        if let Some(k) = label.strip_prefix("conv_k") {
            return Ok(Choice::Cnn(CnnOp::Conv {
                k: parse_num(k, label)?,
                dilation: 1,
            }));
        }
        if let Some(rest) = label.strip_prefix("dilconv_k") {
            let (k, d) = rest.split_once("_d").ok_or_else(bad)?;
            return Ok(Choice::Cnn(CnnOp::Conv {
                k: parse_num(k, label)?,
                dilation: parse_num(d, label)?,
            }));
        }
        if let Some(k) = label.strip_prefix("max_pool_k") {
            return Ok(Choice::Cnn(CnnOp::MaxPool {
                k: parse_num(k, label)?,
            }));
        }
        if let Some(k) = label.strip_prefix("avg_pool_k") {
            return Ok(Choice::Cnn(CnnOp::AvgPool {
                k: parse_num(k, label)?,
            }));
        }
        if let Some(rest) = label.strip_prefix("gnn_") {
            let (agg, width) = split_width(rest, label)?;
            let agg = match agg {
                "mean" => Aggregator::Mean,
                "sum" => Aggregator::Sum,
                "max" => Aggregator::Max,
                "attn" => Aggregator::Attention,
                _ => return Err(bad()),
            };
            return Ok(Choice::Gnn { agg, width });
        }
        if let Some(r) = label.strip_prefix("readout_") {
            return Ok(Choice::Readout(match r {
                "mean" => Readout::Mean,
                "max" => Readout::Max,
                "sum" => Readout::Sum,
                _ => return Err(bad()),
            }));
        }
        if let Some(rest) = label.strip_prefix("fuse_") {
            let (op, width) = split_width(rest, label)?;
            let op = match op {
                "concat" => FusionOp::ConcatLinear,
                "add" => FusionOp::Add,
                "mul" => FusionOp::Mul,
                "gated" => FusionOp::GatedSum,
                "attn_sum" => FusionOp::AttentionSum,
                _ => return Err(bad()),
            };
            return Ok(Choice::Fusion { op, width });
        }
        if let Some(l) = label.strip_prefix("tap") {
            return Ok(Choice::Tap(parse_num(l, label)?));
        }
        if let Some(w) = label.strip_prefix('w') {
            return Ok(Choice::Width(parse_num(w, label)?));
        }
        Err(bad())
    }
}

impl TryFrom<String> for Choice {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Choice> for String {
    fn from(c: Choice) -> String {
        c.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SlotRole {
    CnnLayer,
    Width,
    GnnLayer,
    Readout,
    Tap,
    Fusion,
}

impl Choice {
    fn role(&self) -> SlotRole {
        match self {
            Choice::Cnn(_) => SlotRole::CnnLayer,
            Choice::Width(_) => SlotRole::Width,
            Choice::Gnn { .. } => SlotRole::GnnLayer,
            Choice::Readout(_) => SlotRole::Readout,
            Choice::Tap(_) => SlotRole::Tap,
            Choice::Fusion { .. } => SlotRole::Fusion,
        }
    }
}

/// One categorical decision.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionSlot {
    pub name: String,
    pub choices: Vec<Choice>,
}

impl DecisionSlot {
    pub fn new(name: impl Into<String>, choices: Vec<Choice>) -> Self {
        DecisionSlot {
            name: name.into(),
            choices,
        }
    }

    pub fn arity(&self) -> usize {
        self.choices.len()
    }

    pub fn labels(&self) -> Vec<String> {
        self.choices.iter().map(|c| c.to_string()).collect()
    }

    fn validate(&self) -> Result<()> {
        if self.choices.is_empty() {
            return Err(Error::Contract(format!("slot `{}` has no choices", self.name)));
        }
        let role = self.choices[0].role();
        if self.choices.iter().any(|c| c.role() != role) {
            return Err(Error::Contract(format!("slot `{}` mixes choice kinds", self.name)));
        }
        let labels = self.labels();
        for (i, l) in labels.iter().enumerate() {
            if labels[..i].contains(l) {
                return Err(Error::Contract(format!("slot `{}` repeats label `{l}`", self.name)));
            }
        }
        Ok(())
    }

    fn role(&self) -> SlotRole {
        self.choices[0].role()
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.choices.iter().position(|c| c.to_string() == label)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StreamKind {
    Cnn,
    Gnn,
}

/// Width used by CNN convolutions when a stream declares no width slot.
pub const DEFAULT_CNN_WIDTH: usize = 16;

/// Search space for one feature extractor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamSearchSpace {
    pub stream_id: String,
    pub attribute: AttributeKind,
    pub kind: StreamKind,
    pub slots: Vec<DecisionSlot>,
}

impl StreamSearchSpace {
    pub fn validate(&self) -> Result<()> {
        if self.stream_id.is_empty() || self.stream_id.contains(['=', '|', '.']) {
            return Err(Error::Contract(format!("invalid stream id `{}`", self.stream_id)));
        }
        for s in &self.slots {
            s.validate()?;
            let ok = match self.kind {
                StreamKind::Cnn => matches!(s.role(), SlotRole::CnnLayer | SlotRole::Width),
                StreamKind::Gnn => matches!(s.role(), SlotRole::GnnLayer | SlotRole::Readout),
            };
            if !ok {
                return Err(Error::Contract(format!(
                    "slot `{}` does not belong in a {:?} stream",
                    s.name, self.kind
                )));
            }
        }
        if self.depth() == 0 {
            return Err(Error::Contract(format!(
                "stream `{}` has no layer slots",
                self.stream_id
            )));
        }
        if self.kind == StreamKind::Gnn && self.slots.iter().filter(|s| s.role() == SlotRole::Readout).count() > 1 {
            return Err(Error::Contract("a GNN stream takes at most one readout slot".into()));
        }
        Ok(())
    }

    /// Number of layer slots.
    pub fn depth(&self) -> usize {
        self.slots
            .iter()
            .filter(|s| matches!(s.role(), SlotRole::CnnLayer | SlotRole::GnnLayer))
            .count()
    }

    pub fn size(&self) -> Option<u128> {
        size_of(&self.slots)
    }

    pub fn arities(&self) -> Vec<usize> {
        self.slots.iter().map(DecisionSlot::arity).collect()
    }

    /// Resolves tokens into per-layer operators.
    pub fn decode(&self, tokens: &[usize]) -> Result<DecodedStream> {
        check_tokens(&self.slots, tokens, &self.stream_id)?;
        let chosen: Vec<Choice> = self.slots.iter().zip(tokens).map(|(s, &t)| s.choices[t]).collect();
        match self.kind {
            StreamKind::Cnn => {
                let ops: Vec<CnnOp> = chosen
                    .iter()
                    .filter_map(|c| if let Choice::Cnn(op) = c { Some(*op) } else { None })
                    .collect();
                let widths: Vec<usize> = chosen
                    .iter()
                    .filter_map(|c| if let Choice::Width(w) = c { Some(*w) } else { None })
                    .collect();
                let n = ops.len();
                let layers = ops
                    .into_iter()
                    .enumerate()
                    .map(|(i, op)| {
                        let width = if widths.is_empty() {
                            DEFAULT_CNN_WIDTH
                        } else {
                            widths[i * widths.len() / n]
                        };
                        (op, width)
                    })
                    .collect();
                Ok(DecodedStream::Cnn { layers })
            }
            StreamKind::Gnn => {
                let mut layers = Vec::new();
                let mut readout = Readout::Mean;
                for c in chosen {
                    match c {
                        Choice::Gnn { agg, width } => layers.push((agg, width)),
                        Choice::Readout(r) => readout = r,
                        _ => {}
                    }
                }
                Ok(DecodedStream::Gnn { layers, readout })
            }
        }
    }
}

/// Concrete operator list for one stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DecodedStream {
    /// `(operator, conv width)` per layer.
    Cnn { layers: Vec<(CnnOp, usize)> },
    Gnn {
        layers: Vec<(Aggregator, usize)>,
        readout: Readout,
    },
}

/// Fusion space: one tap slot per stream (in stream order) followed by
/// fusion-block slots.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionSearchSpace {
    pub tap_streams: Vec<String>,
    pub slots: Vec<DecisionSlot>,
}

/// Decoded fusion tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecodedFusion {
    /// 1-based tap layer per stream.
    pub taps: Vec<usize>,
    pub blocks: Vec<(FusionOp, usize)>,
}

impl FusionSearchSpace {
    /// Builds a fusion space whose tap slots cover every layer of each stream.
    pub fn new(streams: &[StreamSearchSpace], blocks: Vec<DecisionSlot>) -> Self {
        let mut slots: Vec<DecisionSlot> = streams
            .iter()
            .map(|s| {
                DecisionSlot::new(
                    format!("tap_{}", s.stream_id),
                    (1..=s.depth()).map(Choice::Tap).collect(),
                )
            })
            .collect();
        slots.extend(blocks);
        FusionSearchSpace {
            tap_streams: streams.iter().map(|s| s.stream_id.clone()).collect(),
            slots,
        }
    }

    pub fn validate(&self, streams: &[StreamSearchSpace]) -> Result<()> {
        let ids: Vec<&str> = streams.iter().map(|s| s.stream_id.as_str()).collect();
        let taps: Vec<&str> = self.tap_streams.iter().map(String::as_str).collect();
        if ids != taps {
            return Err(Error::Contract(format!(
                "fusion taps {taps:?} do not match streams {ids:?} one-to-one"
            )));
        }
        for (i, s) in self.slots.iter().enumerate() {
            s.validate()?;
            let is_tap = s.role() == SlotRole::Tap;
            if is_tap != (i < taps.len()) || !(is_tap || s.role() == SlotRole::Fusion) {
                return Err(Error::Contract(format!("fusion slot `{}` is misplaced", s.name)));
            }
        }
        if self.slots.len() == taps.len() {
            return Err(Error::Contract("fusion space needs at least one block slot".into()));
        }
        Ok(())
    }

    pub fn size(&self) -> Option<u128> {
        size_of(&self.slots)
    }

    pub fn arities(&self) -> Vec<usize> {
        self.slots.iter().map(DecisionSlot::arity).collect()
    }

    pub fn decode(&self, tokens: &[usize], streams: &[StreamSearchSpace]) -> Result<DecodedFusion> {
        check_tokens(&self.slots, tokens, "fusion")?;
        let mut taps = Vec::new();
        let mut blocks = Vec::new();
        for (s, &t) in self.slots.iter().zip(tokens) {
            match s.choices[t] {
                Choice::Tap(l) => taps.push(l),
                Choice::Fusion { op, width } => blocks.push((op, width)),
                _ => {}
            }
        }
        for ((stream, &tap), id) in streams.iter().zip(&taps).zip(&self.tap_streams) {
            if tap == 0 || tap > stream.depth() {
                return Err(Error::Token(format!(
                    "tap layer {tap} for stream `{id}` exceeds its depth {}",
                    stream.depth()
                )));
            }
        }
        Ok(DecodedFusion { taps, blocks })
    }
}

/// All streams plus fusion.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JointSpace {
    pub streams: Vec<StreamSearchSpace>,
    pub fusion: FusionSearchSpace,
}

impl JointSpace {
    pub fn validate(&self) -> Result<()> {
        for (i, s) in self.streams.iter().enumerate() {
            s.validate()?;
            if self.streams[..i].iter().any(|o| o.stream_id == s.stream_id) {
                return Err(Error::Contract(format!("duplicate stream id `{}`", s.stream_id)));
            }
        }
        self.fusion.validate(&self.streams)
    }

    pub fn stream(&self, id: &str) -> Option<&StreamSearchSpace> {
        self.streams.iter().find(|s| s.stream_id == id)
    }

    /// Total joint size `T_f * prod T_m`.
    pub fn size(&self) -> BigUint {
        let sizes: Vec<BigUint> = self.streams.iter().map(|s| size_big(&s.slots)).collect();
        sizes.iter().fold(size_big(&self.fusion.slots), |acc, s| acc * s)
    }
}

fn check_tokens(slots: &[DecisionSlot], tokens: &[usize], what: &str) -> Result<()> {
    if tokens.len() != slots.len() {
        return Err(Error::Token(format!(
            "{what}: {} tokens for {} slots",
            tokens.len(),
            slots.len()
        )));
    }
    for (s, &t) in slots.iter().zip(tokens) {
        if t >= s.arity() {
            return Err(Error::Token(format!(
                "{what}: token {t} out of range for slot `{}` (arity {})",
                s.name,
                s.arity()
            )));
        }
    }
    Ok(())
}

fn size_of(slots: &[DecisionSlot]) -> Option<u128> {
    slots
        .iter()
        .try_fold(1u128, |acc, s| acc.checked_mul(s.arity() as u128))
}

fn size_big(slots: &[DecisionSlot]) -> BigUint {
    slots
        .iter()
        .fold(BigUint::from(1u32), |acc, s| acc * BigUint::from(s.arity()))
}

/// A sampled child: token sequences per stream (in stream order) and for fusion.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Architecture {
    pub streams: Vec<(String, Vec<usize>)>,
    pub fusion: Vec<usize>,
}

/// Key for a single stream fragment: `id=label.label...`.
pub fn stream_key(space: &StreamSearchSpace, tokens: &[usize]) -> Result<String> {
    check_tokens(&space.slots, tokens, &space.stream_id)?;
    Ok(format!("{}={}", space.stream_id, join_labels(&space.slots, tokens)))
}

fn join_labels(slots: &[DecisionSlot], tokens: &[usize]) -> String {
    let labels: Vec<String> = slots
        .iter()
        .zip(tokens)
        .map(|(s, &t)| s.choices[t].to_string())
        .collect();
    labels.join(".")
}

fn parse_labels(slots: &[DecisionSlot], body: &str, what: &str) -> Result<Vec<usize>> {
    let labels: Vec<&str> = if body.is_empty() {
        Vec::new()
    } else {
        body.split('.').collect()
    };
    if labels.len() != slots.len() {
        return Err(Error::Token(format!(
            "{what}: {} labels for {} slots",
            labels.len(),
            slots.len()
        )));
    }
    slots
        .iter()
        .zip(labels)
        .map(|(s, l)| {
            s.index_of(l)
                .ok_or_else(|| Error::Token(format!("{what}: `{l}` is not a choice of slot `{}`", s.name)))
        })
        .collect()
}

/// Parses a stream fragment key back into tokens.
pub fn parse_stream_key(space: &StreamSearchSpace, key: &str) -> Result<Vec<usize>> {
    let (id, body) = key
        .split_once('=')
        .ok_or_else(|| Error::Token(format!("malformed key `{key}`")))?;
    if id != space.stream_id {
        return Err(Error::Token(format!(
            "key is for stream `{id}`, not `{}`",
            space.stream_id
        )));
    }
    parse_labels(&space.slots, body, id)
}

impl Architecture {
    pub fn validate(&self, space: &JointSpace) -> Result<()> {
        if self.streams.len() != space.streams.len() {
            return Err(Error::Token(format!(
                "{} stream fragments for {} streams",
                self.streams.len(),
                space.streams.len()
            )));
        }
        for ((id, tokens), s) in self.streams.iter().zip(&space.streams) {
            if *id != s.stream_id {
                return Err(Error::Token(format!(
                    "fragment `{id}` where `{}` expected",
                    s.stream_id
                )));
            }
            check_tokens(&s.slots, tokens, id)?;
        }
        space.fusion.decode(&self.fusion, &space.streams).map(|_| ())
    }

    /// Stable text form: `aus=conv_k3.w16|pose=...|fusion=tap1.tap2.fuse_add_w32`.
    /// Labels (not indices) are used, so keys agree between a full space and
    /// any reduced subspace of it.
    pub fn canonical_key(&self, space: &JointSpace) -> Result<String> {
        self.validate(space)?;
        let mut parts: Vec<String> = self
            .streams
            .iter()
            .zip(&space.streams)
            .map(|((_, tokens), s)| format!("{}={}", s.stream_id, join_labels(&s.slots, tokens)))
            .collect();
        parts.push(format!("fusion={}", join_labels(&space.fusion.slots, &self.fusion)));
        Ok(parts.join("|"))
    }

    pub fn parse(key: &str, space: &JointSpace) -> Result<Architecture> {
        let parts: Vec<&str> = key.split('|').collect();
        if parts.len() != space.streams.len() + 1 {
            return Err(Error::Token(format!("key `{key}` has {} parts", parts.len())));
        }
        let mut streams = Vec::new();
        for (part, s) in parts.iter().zip(&space.streams) {
            streams.push((s.stream_id.clone(), parse_stream_key(s, part)?));
        }
        let fusion_part = parts.last().unwrap();
        let body = fusion_part
            .strip_prefix("fusion=")
            .ok_or_else(|| Error::Token(format!("missing fusion fragment in `{key}`")))?;
        let fusion = parse_labels(&space.fusion.slots, body, "fusion")?;
        let arch = Architecture { streams, fusion };
        arch.validate(space)?;
        Ok(arch)
    }
}

/// Every token assignment in lexicographic order. Fails with a budget error
/// when the space holds more than `limit` assignments.
pub fn enumerate(arities: &[usize], limit: u128) -> Result<Vec<Vec<usize>>> {
    let size = arities
        .iter()
        .try_fold(1u128, |acc, &a| acc.checked_mul(a as u128))
        .unwrap_or(u128::MAX);
    if size > limit {
        return Err(Error::Budget { size, limit });
    }
    if arities.contains(&0) {
        return Ok(Vec::new());
    }
    let mut out = Vec::with_capacity(size as usize);
    let mut cur = vec![0usize; arities.len()];
    loop {
        out.push(cur.clone());
        let mut i = arities.len();
        loop {
            if i == 0 {
                return Ok(out);
            }
            i -= 1;
            cur[i] += 1;
            if cur[i] < arities[i] {
                break;
            }
            cur[i] = 0;
        }
    }
}

/// All joint architectures of an enumerable space.
pub fn enumerate_joint(space: &JointSpace, limit: u128) -> Result<Vec<Architecture>> {
    let mut arities: Vec<usize> = Vec::new();
    for s in &space.streams {
        arities.extend(s.arities());
    }
    arities.extend(space.fusion.arities());
    let all = enumerate(&arities, limit)?;
    Ok(all
        .into_iter()
        .map(|flat| {
            let mut offset = 0;
            let streams = space
                .streams
                .iter()
                .map(|s| {
                    let n = s.slots.len();
                    let t = flat[offset..offset + n].to_vec();
                    offset += n;
                    (s.stream_id.clone(), t)
                })
                .collect();
            Architecture {
                streams,
                fusion: flat[offset..].to_vec(),
            }
        })
        .collect())
}

fn product(sizes: &[u64]) -> BigUint {
    let mut fast: Option<u128> = Some(1);
    for &s in sizes {
        fast = fast.and_then(|acc| acc.checked_mul(s as u128));
    }
    match fast {
        Some(v) => BigUint::from(v),
        None => sizes.iter().fold(BigUint::from(1u32), |acc, &s| acc * BigUint::from(s)),
    }
}

/// Size of the unreduced joint search: `T_f * prod_m T_m`.
pub fn naive_complexity(stream_sizes: &[u64], fusion_size: u64) -> Result<BigUint> {
    if stream_sizes.contains(&0) || fusion_size == 0 {
        return Err(Error::Contract("search-space sizes must be at least 1".into()));
    }
    let mut all = stream_sizes.to_vec();
    all.push(fusion_size);
    Ok(product(&all))
}

/// Cost of warm-up plus reduced joint search:
/// `sum_m T_m + T_f * prod_m reduced_m`.
pub fn warmup_complexity(stream_sizes: &[u64], reduced_sizes: &[u64], fusion_size: u64) -> Result<BigUint> {
    if stream_sizes.len() != reduced_sizes.len() {
        return Err(Error::Contract("one reduced size per stream is required".into()));
    }
    if let Some((t, r)) = stream_sizes.iter().zip(reduced_sizes).find(|(t, r)| r > t || **r == 0) {
        return Err(Error::Contract(format!("reduced size {r} is not within 1..={t}")));
    }
    let warm: BigUint = stream_sizes.iter().map(|&t| BigUint::from(t)).sum();
    Ok(warm + naive_complexity(reduced_sizes, fusion_size)?)
}

/// A stream space restricted to a subset of choices per slot.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReducedSpace {
    pub space: StreamSearchSpace,
    /// For each slot, the original choice indices that were kept.
    pub kept: Vec<Vec<usize>>,
    /// Description of the policy snapshot the reduction came from.
    pub provenance: String,
}

impl ReducedSpace {
    pub fn size(&self) -> Option<u128> {
        self.space.size()
    }
}

/// Keeps the `keep_per_slot` choices with the highest marginal probability in
/// every slot (clamped to the arity). Ties go to the earlier label. Kept
/// choices stay in their original order.
pub fn reduce_with_marginals(
    space: &StreamSearchSpace,
    marginals: &[Vec<f64>],
    keep_per_slot: usize,
    provenance: impl Into<String>,
) -> Result<ReducedSpace> {
    if marginals.len() != space.slots.len() {
        return Err(Error::Contract(format!(
            "{} marginal vectors for {} slots",
            marginals.len(),
            space.slots.len()
        )));
    }
    let mut slots = Vec::with_capacity(space.slots.len());
    let mut kept = Vec::with_capacity(space.slots.len());
    for (slot, probs) in space.slots.iter().zip(marginals) {
        if probs.len() != slot.arity() {
            return Err(Error::Contract(format!(
                "marginal width mismatch for slot `{}`",
                slot.name
            )));
        }
        let keep = keep_per_slot.clamp(1, slot.arity());
        let mut order: Vec<usize> = (0..slot.arity()).collect();
        // stable sort keeps the original label order among equal probabilities
        order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]));
        let mut chosen: Vec<usize> = order[..keep].to_vec();
        chosen.sort_unstable();
        slots.push(DecisionSlot::new(
            slot.name.clone(),
            chosen.iter().map(|&i| slot.choices[i]).collect(),
        ));
        kept.push(chosen);
    }
    Ok(ReducedSpace {
        space: StreamSearchSpace {
            stream_id: space.stream_id.clone(),
            attribute: space.attribute,
            kind: space.kind,
            slots,
        },
        kept,
        provenance: provenance.into(),
    })
}

// ---- default operator sets -------------------------------------------------

pub fn default_cnn_ops() -> Vec<Choice> {
    vec![
        Choice::Cnn(CnnOp::Conv { k: 3, dilation: 1 }),
        Choice::Cnn(CnnOp::Conv { k: 5, dilation: 1 }),
        Choice::Cnn(CnnOp::Conv { k: 7, dilation: 1 }),
        Choice::Cnn(CnnOp::Conv { k: 3, dilation: 2 }),
        Choice::Cnn(CnnOp::MaxPool { k: 3 }),
        Choice::Cnn(CnnOp::AvgPool { k: 3 }),
        Choice::Cnn(CnnOp::Identity),
    ]
}

/// Four operator slots and two width slots (7^4 * 3^2 = 21609 architectures).
pub fn default_cnn_space(stream_id: &str, attribute: AttributeKind) -> StreamSearchSpace {
    let mut slots: Vec<DecisionSlot> = (0..4)
        .map(|i| DecisionSlot::new(format!("layer{i}"), default_cnn_ops()))
        .collect();
    for i in 0..2 {
        slots.push(DecisionSlot::new(
            format!("width{i}"),
            [16, 32, 64].into_iter().map(Choice::Width).collect(),
        ));
    }
    StreamSearchSpace {
        stream_id: stream_id.to_owned(),
        attribute,
        kind: StreamKind::Cnn,
        slots,
    }
}

/// Three (aggregator x width) layers and a readout slot (12^3 * 3 = 5184).
pub fn default_gnn_space(stream_id: &str, attribute: AttributeKind) -> StreamSearchSpace {
    let layer = || {
        let mut c = Vec::new();
        for agg in [
            Aggregator::Mean,
            Aggregator::Sum,
            Aggregator::Max,
            Aggregator::Attention,
        ] {
            for width in [16, 32, 64] {
                c.push(Choice::Gnn { agg, width });
            }
        }
        c
    };
    let mut slots: Vec<DecisionSlot> = (0..3)
        .map(|i| DecisionSlot::new(format!("layer{i}"), layer()))
        .collect();
    slots.push(DecisionSlot::new(
        "readout",
        vec![
            Choice::Readout(Readout::Mean),
            Choice::Readout(Readout::Max),
            Choice::Readout(Readout::Sum),
        ],
    ));
    StreamSearchSpace {
        stream_id: stream_id.to_owned(),
        attribute,
        kind: StreamKind::Gnn,
        slots,
    }
}

/// Per-stream taps plus two (operator x width) fusion blocks.
pub fn default_fusion_space(streams: &[StreamSearchSpace]) -> FusionSearchSpace {
    let block = |i: usize| {
        let mut c = Vec::new();
        for op in [
            FusionOp::ConcatLinear,
            FusionOp::Add,
            FusionOp::Mul,
            FusionOp::GatedSum,
            FusionOp::AttentionSum,
        ] {
            for width in [32, 64, 128] {
                c.push(Choice::Fusion { op, width });
            }
        }
        DecisionSlot::new(format!("block{i}"), c)
    };
    FusionSearchSpace::new(streams, vec![block(0), block(1)])
}

/// The four-attribute default: CNN streams for AUs, gaze and pose, a GNN
/// stream for landmarks.
pub fn default_joint_space() -> JointSpace {
    let streams = vec![
        default_cnn_space("aus", AttributeKind::Aus),
        default_cnn_space("gaze", AttributeKind::Gaze),
        default_cnn_space("pose", AttributeKind::Pose),
        default_gnn_space("landmarks", AttributeKind::Landmarks),
    ];
    let fusion = default_fusion_space(&streams);
    JointSpace { streams, fusion }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn naive_complexity_examples() {
        assert_eq!(naive_complexity(&[10, 20], 5).unwrap(), BigUint::from(1000u32));
        assert_eq!(naive_complexity(&[1], 1).unwrap(), BigUint::from(1u32));
        assert_eq!(naive_complexity(&[7], 3).unwrap(), BigUint::from(21u32));
    }

    #[test]
    fn warmup_complexity_examples() {
        assert_eq!(warmup_complexity(&[10, 20], &[2, 3], 5).unwrap(), BigUint::from(60u32));
        assert_eq!(warmup_complexity(&[8], &[2], 4).unwrap(), BigUint::from(16u32));
        let t = [10u64, 20];
        let no_reduction = warmup_complexity(&t, &t, 5).unwrap();
        assert_eq!(no_reduction, BigUint::from(30u32) + naive_complexity(&t, 5).unwrap());
    }

    #[test]
    fn complexity_overflows_into_big_integers() {
        let sizes = [u64::MAX; 4];
        let c = naive_complexity(&sizes, u64::MAX).unwrap();
        let expected = (0..5).fold(BigUint::from(1u32), |acc, _| acc * BigUint::from(u64::MAX));
        assert_eq!(c, expected);
    }

    #[test]
    fn default_space_sizes() {
        let j = default_joint_space();
        j.validate().unwrap();
        assert_eq!(j.streams[0].size(), Some(21609));
        assert_eq!(j.streams[3].size(), Some(5184));
        // taps 4*4*4*3, blocks 15*15
        assert_eq!(j.fusion.size(), Some(4 * 4 * 4 * 3 * 225));
    }

    #[test]
    fn enumerate_small_products() {
        assert_eq!(enumerate(&[2, 3], 100).unwrap().len(), 6);
        assert_eq!(enumerate(&[1, 1, 1], 100).unwrap(), vec![vec![0, 0, 0]]);
        assert_eq!(enumerate(&[2, 3], 100).unwrap()[1], vec![0, 1]);
        assert_eq!(
            enumerate(&[10, 10], 50).unwrap_err(),
            Error::Budget { size: 100, limit: 50 }
        );
    }

    #[test]
    fn labels_round_trip() {
        let j = default_joint_space();
        for s in j
            .streams
            .iter()
            .map(|s| &s.slots)
            .chain(core::iter::once(&j.fusion.slots))
        {
            for slot in s {
                for c in &slot.choices {
                    assert_eq!(c.to_string().parse::<Choice>().unwrap(), *c);
                }
            }
        }
    }

    #[test]
    fn canonical_key_round_trips() {
        let j = default_joint_space();
        let arch = Architecture {
            streams: j
                .streams
                .iter()
                .map(|s| (s.stream_id.clone(), s.arities().iter().map(|a| a - 1).collect()))
                .collect(),
            fusion: j.fusion.arities().iter().map(|a| a / 2).collect(),
        };
        let key = arch.canonical_key(&j).unwrap();
        assert!(
            key.starts_with("aus=identity.identity.identity.identity.w64.w64|"),
            "{key}"
        );
        assert_eq!(Architecture::parse(&key, &j).unwrap(), arch);
    }

    #[test]
    fn bad_tokens_are_rejected() {
        let j = default_joint_space();
        let s = &j.streams[0];
        assert!(matches!(stream_key(s, &[9, 0, 0, 0, 0, 0]), Err(Error::Token(_))));
        assert!(matches!(parse_stream_key(s, "aus=conv_k3"), Err(Error::Token(_))));
    }

    #[test]
    fn cnn_width_slots_cover_layer_groups() {
        let s = default_cnn_space("aus", AttributeKind::Aus);
        let d = s.decode(&[0, 4, 6, 1, 0, 2]).unwrap();
        let DecodedStream::Cnn { layers } = d else { panic!() };
        let widths: Vec<usize> = layers.iter().map(|l| l.1).collect();
        assert_eq!(widths, vec![16, 16, 64, 64]);
    }

    #[test]
    fn reduction_keeps_top_marginals_with_label_tiebreak() {
        let s = StreamSearchSpace {
            stream_id: "x".into(),
            attribute: AttributeKind::Aus,
            kind: StreamKind::Cnn,
            slots: vec![
                DecisionSlot::new("a", default_cnn_ops()[..4].to_vec()),
                DecisionSlot::new("b", default_cnn_ops()[..4].to_vec()),
            ],
        };
        let m = vec![vec![0.1, 0.4, 0.1, 0.4], vec![0.25; 4]];
        let r = reduce_with_marginals(&s, &m, 2, "test").unwrap();
        assert_eq!(r.kept, vec![vec![1, 3], vec![0, 1]]);
        assert_eq!(r.size(), Some(4));
        let full = reduce_with_marginals(&s, &m, 10, "test").unwrap();
        assert_eq!(full.space, s);
    }

    #[test]
    fn tap_beyond_depth_is_a_token_error() {
        let j = default_joint_space();
        let mut fusion = j.fusion.clone();
        fusion.slots[0].choices.push(Choice::Tap(9));
        let mut tokens = vec![0; fusion.slots.len()];
        tokens[0] = 4;
        assert!(matches!(fusion.decode(&tokens, &j.streams), Err(Error::Token(_))));
    }
}
