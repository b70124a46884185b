//! Child networks: per-stream CNN/GNN extractors, fusion blocks and the
//! regression head, trained from scratch for every trial.

pub mod data;
pub mod fixture;
pub mod model;
pub mod train;

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

pub use data::{encode_clip, input_shapes, split_indices, ClipRecord, EncodedAttribute, EncodedClip, InputShapes};
pub use model::{instantiate_joint, instantiate_stream, ChildModel, Mode};
pub use train::{evaluate, train_epochs, train_from_scratch, TrainConfig, TrialResult};

use crate::error::Result;
use crate::gradcheck::{check, run_cases, GradCheck};
use crate::rng::Rng;
use crate::space::{
    Aggregator, Architecture, Choice, CnnOp, DecisionSlot, FusionOp, FusionSearchSpace, JointSpace, Readout,
    StreamKind, StreamSearchSpace,
};
use crate::spectral::AttributeKind;
use crate::tensor::Tensor;
use fixture::{random_clips, FixtureShape};

enum LayerCase {
    Cnn(CnnOp),
    Gnn(Aggregator, Readout),
    Fusion(FusionOp),
}

fn conv3() -> Choice {
    Choice::Cnn(CnnOp::Conv { k: 3, dilation: 1 })
}

fn case_model(case: &LayerCase, shapes: &InputShapes, seed: u64) -> Result<ChildModel> {
    const DROPOUT: f64 = 0.2;
    match *case {
        LayerCase::Cnn(op) => {
            let space = StreamSearchSpace {
                stream_id: "s".into(),
                attribute: AttributeKind::Aus,
                kind: StreamKind::Cnn,
                slots: vec![
                    DecisionSlot::new("l0", vec![conv3()]),
                    DecisionSlot::new("l1", vec![Choice::Cnn(op)]),
                    DecisionSlot::new("w", vec![Choice::Width(3)]),
                ],
            };
            instantiate_stream(&space, &[0, 0, 0], shapes, DROPOUT, seed)
        }
        LayerCase::Gnn(agg, readout) => {
            let space = StreamSearchSpace {
                stream_id: "g".into(),
                attribute: AttributeKind::Landmarks,
                kind: StreamKind::Gnn,
                slots: vec![
                    DecisionSlot::new("l0", vec![Choice::Gnn { agg, width: 3 }]),
                    DecisionSlot::new("r", vec![Choice::Readout(readout)]),
                ],
            };
            instantiate_stream(&space, &[0, 0], shapes, DROPOUT, seed)
        }
        LayerCase::Fusion(op) => {
            let streams = vec![
                StreamSearchSpace {
                    stream_id: "s".into(),
                    attribute: AttributeKind::Aus,
                    kind: StreamKind::Cnn,
                    slots: vec![
                        DecisionSlot::new("l0", vec![conv3()]),
                        DecisionSlot::new("w", vec![Choice::Width(2)]),
                    ],
                },
                StreamSearchSpace {
                    stream_id: "g".into(),
                    attribute: AttributeKind::Landmarks,
                    kind: StreamKind::Gnn,
                    slots: vec![DecisionSlot::new(
                        "l0",
                        vec![Choice::Gnn {
                            agg: Aggregator::Mean,
                            width: 2,
                        }],
                    )],
                },
            ];
            let blocks = vec![
                DecisionSlot::new("b0", vec![Choice::Fusion { op, width: 3 }]),
                DecisionSlot::new("b1", vec![Choice::Fusion { op, width: 2 }]),
            ];
            let fusion = FusionSearchSpace::new(&streams, blocks);
            let space = JointSpace { streams, fusion };
            let arch = Architecture {
                streams: vec![("s".into(), vec![0, 0]), ("g".into(), vec![0])],
                fusion: vec![0; 4],
            };
            instantiate_joint(&space, &arch, shapes, DROPOUT, seed)
        }
    }
}

fn layer_check(case: &LayerCase, rng: &mut Rng, seed: u64) -> Result<GradCheck> {
    let clips = random_clips(3, &FixtureShape::tiny(), rng);
    let refs: Vec<&EncodedClip> = clips.iter().collect();
    let shapes = input_shapes(&refs)?;
    let mut model = case_model(case, &shapes, rng.next_u64())?;
    model.fit_normalizers(&refs)?;
    let batch = model.make_batch(&refs)?;
    let params: Vec<Tensor> = model.params().iter().map(|p| p.value.clone()).collect();
    let mask_seed = rng.next_u64();
    check(&params, seed, |g, vars| {
        model.forward_with(g, vars, &batch, &mut Rng::new(mask_seed))
    })
}

/// Finite-difference checks of the full child forward pass with respect to
/// every parameter, once per layer type of the default spaces.
pub fn layer_gradient_suite(cases: usize, seed: u64) -> Result<Vec<(String, f64)>> {
    let mut list: Vec<(&str, LayerCase)> = vec![
        ("cnn_conv", LayerCase::Cnn(CnnOp::Conv { k: 5, dilation: 1 })),
        ("cnn_dilated_conv", LayerCase::Cnn(CnnOp::Conv { k: 3, dilation: 2 })),
        ("cnn_max_pool", LayerCase::Cnn(CnnOp::MaxPool { k: 3 })),
        ("cnn_avg_pool", LayerCase::Cnn(CnnOp::AvgPool { k: 3 })),
        ("cnn_identity", LayerCase::Cnn(CnnOp::Identity)),
        ("gnn_mean", LayerCase::Gnn(Aggregator::Mean, Readout::Mean)),
        ("gnn_sum", LayerCase::Gnn(Aggregator::Sum, Readout::Sum)),
        ("gnn_max", LayerCase::Gnn(Aggregator::Max, Readout::Max)),
        ("gnn_attention", LayerCase::Gnn(Aggregator::Attention, Readout::Mean)),
    ];
    for (name, op) in [
        ("fuse_concat", FusionOp::ConcatLinear),
        ("fuse_add", FusionOp::Add),
        ("fuse_mul", FusionOp::Mul),
        ("fuse_gated", FusionOp::GatedSum),
        ("fuse_attn_sum", FusionOp::AttentionSum),
    ] {
        list.push((name, LayerCase::Fusion(op)));
    }
    let mut rng = Rng::new(seed);
    let mut out = Vec::with_capacity(list.len());
    for (name, case) in &list {
        let r = run_cases(cases, &mut rng, seed, |r, s| layer_check(case, r, s))?;
        out.push((String::from(*name), r.worst));
    }
    Ok(out)
}
