//! Small random encoded datasets and spaces for checks that need a working
//! model but no meaningful signal.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::data::{EncodedAttribute, EncodedClip};
use crate::landmarks::{build_landmark_graph, LandmarkLayout, Region};
use crate::rng::Rng;
use crate::space::{
    Aggregator, Architecture, Choice, CnnOp, DecisionSlot, FusionOp, FusionSearchSpace, JointSpace, Readout,
    StreamKind, StreamSearchSpace,
};
use crate::spectral::{to_heatmap, AttributeKind, SpectralRepresentation};

#[derive(Debug, Clone, PartialEq)]
pub struct FixtureShape {
    pub aus_channels: usize,
    pub pose_channels: usize,
    pub k: usize,
    pub layout: LandmarkLayout,
    pub landmark_k: usize,
}

/// Eight 2-D landmarks in two regions around a hub.
pub fn small_layout() -> LandmarkLayout {
    LandmarkLayout {
        num_landmarks: 8,
        coord_arity: 2,
        regions: vec![
            Region {
                name: "left".into(),
                nodes: vec![0, 1, 2],
            },
            Region {
                name: "center".into(),
                nodes: vec![3],
            },
            Region {
                name: "right".into(),
                nodes: vec![4, 5, 6, 7],
            },
        ],
        hub: 3,
    }
}

impl Default for FixtureShape {
    fn default() -> Self {
        FixtureShape {
            aus_channels: 3,
            pose_channels: 2,
            k: 8,
            layout: LandmarkLayout::ibug68(2),
            landmark_k: 4,
        }
    }
}

impl FixtureShape {
    /// Even smaller inputs for finite-difference work.
    pub fn tiny() -> Self {
        FixtureShape {
            aus_channels: 2,
            pose_channels: 1,
            k: 5,
            layout: small_layout(),
            landmark_k: 2,
        }
    }
}

fn random_rep(kind: AttributeKind, channels: usize, k: usize, rng: &mut Rng) -> SpectralRepresentation {
    SpectralRepresentation {
        kind,
        channels,
        k,
        amplitude: (0..channels * k).map(|_| rng.uniform_range(0.0, 2.0)).collect(),
        phase: (0..channels * k).map(|_| rng.uniform_range(-3.0, 3.0)).collect(),
    }
}

/// `n` clips with random spectra and labels uniform on [0, 24].
pub fn random_clips(n: usize, shape: &FixtureShape, rng: &mut Rng) -> Vec<EncodedClip> {
    (0..n)
        .map(|i| {
            let mut attributes = BTreeMap::new();
            for (kind, c) in [
                (AttributeKind::Aus, shape.aus_channels),
                (AttributeKind::Pose, shape.pose_channels),
            ] {
                let rep = random_rep(kind, c, shape.k, rng);
                attributes.insert(
                    kind,
                    EncodedAttribute {
                        heatmap: to_heatmap(&rep),
                        graph: None,
                    },
                );
            }
            let rep = random_rep(AttributeKind::Landmarks, shape.layout.channels(), shape.landmark_k, rng);
            let graph = build_landmark_graph(&rep, &shape.layout).expect("fixture layout is consistent");
            attributes.insert(
                AttributeKind::Landmarks,
                EncodedAttribute {
                    heatmap: to_heatmap(&rep),
                    graph: Some(graph),
                },
            );
            EncodedClip {
                clip_id: format!("clip{i:03}"),
                label: rng.uniform_range(0.0, 24.0),
                attributes,
            }
        })
        .collect()
}

/// A two-stream joint space (CNN on AUs, GNN on landmarks) touching every
/// fusion operator, plus one architecture in it.
pub fn small_joint_space() -> (JointSpace, Architecture) {
    let aus = StreamSearchSpace {
        stream_id: "aus".into(),
        attribute: AttributeKind::Aus,
        kind: StreamKind::Cnn,
        slots: vec![
            DecisionSlot::new(
                "layer0",
                vec![
                    Choice::Cnn(CnnOp::Conv { k: 3, dilation: 1 }),
                    Choice::Cnn(CnnOp::Identity),
                ],
            ),
            DecisionSlot::new(
                "layer1",
                vec![
                    Choice::Cnn(CnnOp::AvgPool { k: 3 }),
                    Choice::Cnn(CnnOp::Conv { k: 3, dilation: 2 }),
                ],
            ),
            DecisionSlot::new("width", vec![Choice::Width(4)]),
        ],
    };
    let lm = StreamSearchSpace {
        stream_id: "lm".into(),
        attribute: AttributeKind::Landmarks,
        kind: StreamKind::Gnn,
        slots: vec![
            DecisionSlot::new(
                "layer0",
                vec![
                    Choice::Gnn {
                        agg: Aggregator::Mean,
                        width: 4,
                    },
                    Choice::Gnn {
                        agg: Aggregator::Attention,
                        width: 4,
                    },
                ],
            ),
            DecisionSlot::new(
                "readout",
                vec![Choice::Readout(Readout::Max), Choice::Readout(Readout::Sum)],
            ),
        ],
    };
    let streams = vec![aus, lm];
    let block = |name: &str, ops: &[FusionOp], width: usize| {
        DecisionSlot::new(name, ops.iter().map(|&op| Choice::Fusion { op, width }).collect())
    };
    let fusion = FusionSearchSpace::new(
        &streams,
        vec![
            block(
                "block0",
                &[FusionOp::GatedSum, FusionOp::AttentionSum, FusionOp::Add],
                8,
            ),
            block("block1", &[FusionOp::ConcatLinear, FusionOp::Mul], 4),
        ],
    );
    let space = JointSpace { streams, fusion };
    let arch = Architecture {
        streams: vec![("aus".into(), vec![0, 1, 0]), ("lm".into(), vec![1, 0])],
        fusion: vec![1, 0, 0, 0],
    };
    (space, arch)
}
