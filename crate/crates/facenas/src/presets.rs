//! Named search spaces and space files.

use std::fs;
use std::path::Path;

use anyhow::Context;
use facenas_core::child::TrainConfig;
use facenas_core::rl::PpoConfig;
use facenas_core::search::{FinalizeConfig, SearchBudget, SearchConfig};
use facenas_core::space::{
    default_cnn_space, default_joint_space, Aggregator, Choice, CnnOp, DecisionSlot, FusionOp, FusionSearchSpace,
    JointSpace, Readout, StreamKind, StreamSearchSpace,
};
use facenas_core::spectral::{AttributeKind, PipelineConfig};
use facenas_core::synth::SyntheticSpec;

use crate::config::{DataSource, RunConfig};

/// Bins kept per channel on the toy benchmark.
pub const TOY_K: usize = 8;

/// Child training on the toy benchmark: short, with a larger step than the
/// default so every trial reaches its plateau.
pub fn toy_train() -> TrainConfig {
    TrainConfig {
        epochs: 15,
        lr: 0.01,
        ..TrainConfig::default()
    }
}

/// Joint search straight over the 64-architecture toy space.
pub fn toy_search(seed: u64) -> SearchConfig {
    SearchConfig {
        warmup: SearchBudget {
            timesteps: 4,
            samples_per_step: 4,
            ..SearchBudget::default()
        },
        joint: SearchBudget {
            timesteps: 12,
            samples_per_step: 8,
            ..SearchBudget::default()
        },
        skip_warmup: true,
        hidden: 32,
        ppo: PpoConfig {
            lr: 0.02,
            ..PpoConfig::default()
        },
        train: toy_train(),
        seed,
        ..SearchConfig::default()
    }
}

/// The planted synthetic benchmark with the toy space, ready to run.
pub fn toy_run_config() -> RunConfig {
    RunConfig {
        space: "toy".into(),
        data: DataSource::Synthetic(SyntheticSpec::default()),
        pipeline: PipelineConfig {
            k: TOY_K,
            ..PipelineConfig::default()
        },
        search: toy_search(0),
        finalize: FinalizeConfig {
            train: toy_train(),
            ..FinalizeConfig::default()
        },
        ..RunConfig::default()
    }
}

/// AU CNN stream and landmark GNN stream with four architectures each, and
/// four fusion architectures: 64 in total.
pub fn toy_joint_space() -> JointSpace {
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
                    Choice::Cnn(CnnOp::MaxPool { k: 3 }),
                ],
            ),
            DecisionSlot::new("width", vec![Choice::Width(8)]),
        ],
    };
    let landmarks = toy_gnn_stream("landmarks");
    let streams = vec![aus, landmarks];
    let block = DecisionSlot::new(
        "block0",
        vec![
            Choice::Fusion {
                op: FusionOp::ConcatLinear,
                width: 16,
            },
            Choice::Fusion {
                op: FusionOp::Add,
                width: 16,
            },
        ],
    );
    let fusion = FusionSearchSpace::new(&streams, vec![block]);
    JointSpace { streams, fusion }
}

fn toy_gnn_stream(id: &str) -> StreamSearchSpace {
    StreamSearchSpace {
        stream_id: id.into(),
        attribute: AttributeKind::Landmarks,
        kind: StreamKind::Gnn,
        slots: vec![
            DecisionSlot::new(
                "layer0",
                vec![
                    Choice::Gnn {
                        agg: Aggregator::Mean,
                        width: 8,
                    },
                    Choice::Gnn {
                        agg: Aggregator::Attention,
                        width: 8,
                    },
                ],
            ),
            DecisionSlot::new(
                "readout",
                vec![Choice::Readout(Readout::Mean), Choice::Readout(Readout::Max)],
            ),
        ],
    }
}

/// A small CNN and a small GNN stream over the landmark attribute, for
/// comparing the two stream kinds.
pub fn landmark_ablation_streams() -> (StreamSearchSpace, StreamSearchSpace) {
    let mut cnn = default_cnn_space("landmarks_cnn", AttributeKind::Landmarks);
    cnn.slots = vec![
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
                Choice::Cnn(CnnOp::MaxPool { k: 3 }),
            ],
        ),
        DecisionSlot::new("width", vec![Choice::Width(8)]),
    ];
    (cnn, toy_gnn_stream("landmarks_gnn"))
}

/// `default`, `toy`, or the path of a TOML space file (relative paths are
/// resolved against `base`).
pub fn resolve_space(name: &str, base: &Path) -> anyhow::Result<JointSpace> {
    let space = match name {
        "default" => default_joint_space(),
        "toy" => toy_joint_space(),
        path => {
            let p = base.join(path);
            let text = fs::read_to_string(&p).with_context(|| format!("reading space file {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing space file {}", p.display()))?
        }
    };
    space.validate()?;
    Ok(space)
}

#[cfg(test)]
mod tests {
    use super::*;
    use facenas_core::space::enumerate_joint;

    #[test]
    fn toy_space_has_64_architectures() {
        let s = toy_joint_space();
        s.validate().unwrap();
        assert_eq!(enumerate_joint(&s, 1000).unwrap().len(), 64);
    }

    #[test]
    fn spaces_round_trip_through_toml() {
        for s in [toy_joint_space(), default_joint_space()] {
            let text = toml::to_string(&s).unwrap();
            let back: JointSpace = toml::from_str(&text).unwrap();
            assert_eq!(back, s);
        }
    }

    #[test]
    fn ablation_streams_share_the_landmark_attribute() {
        let (c, g) = landmark_ablation_streams();
        c.validate().unwrap();
        g.validate().unwrap();
        assert_eq!(c.attribute, g.attribute);
        assert_eq!((c.kind, g.kind), (StreamKind::Cnn, StreamKind::Gnn));
    }

    #[test]
    fn shipped_toy_config_matches_the_preset() {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.toml");
        let (cfg, _) = RunConfig::load(&path).unwrap();
        assert_eq!(cfg, toy_run_config());
    }
}
