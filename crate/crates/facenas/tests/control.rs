//! Shuffled-label control on the toy benchmark: the planted signal is
//! learnable, and nothing is learnable once labels are permuted.

use facenas::cache::encode_dataset;
use facenas::config::DataSource;
use facenas::pipeline::split;
use facenas::presets::{toy_joint_space, toy_run_config, toy_train};
use facenas_core::child::EncodedClip;
use facenas_core::rng::Rng;
use facenas_core::search::{Stage, TrialContext, TrialJob, TrialSpec};
use facenas_core::space::Architecture;
use facenas_core::synth::generate;

const KEY: &str = "aus=identity.avg_pool_k3.w8|landmarks=gnn_mean_w8.readout_mean|fusion=tap2.tap1.fuse_concat_w16";

fn e_val(clips: &[EncodedClip]) -> (f64, f64) {
    let space = toy_joint_space();
    let arch = Architecture::parse(KEY, &space).unwrap();
    let sp = split(clips, 0);
    let y: Vec<f64> = sp.val.iter().map(|c| c.label).collect();
    let m = y.iter().sum::<f64>() / y.len() as f64;
    let sd = (y.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / y.len() as f64).sqrt();
    let ctx = TrialContext::new(sp.train, sp.val, toy_train()).unwrap();
    let job = TrialJob {
        stage: Stage::Joint,
        timestep: 0,
        index: 0,
        key: KEY.into(),
        seed: 1,
        spec: TrialSpec::Joint(arch),
    };
    (ctx.run(&space, &job).unwrap().e_val, sd)
}

#[test]
fn shuffled_labels_are_not_learnable() {
    let cfg = toy_run_config();
    let DataSource::Synthetic(spec) = &cfg.data else {
        unreachable!()
    };
    let (clips, _) = encode_dataset(&generate(spec).unwrap(), &cfg.pipeline, &spec.layout);
    let (real, sd) = e_val(&clips);

    let mut labels: Vec<f64> = clips.iter().map(|c| c.label).collect();
    Rng::new(17).shuffle(&mut labels);
    let shuffled: Vec<EncodedClip> = clips
        .iter()
        .zip(labels)
        .map(|(c, y)| EncodedClip { label: y, ..c.clone() })
        .collect();
    let (control, sd_shuffled) = e_val(&shuffled);

    assert!(real < 0.4 * sd, "planted data: E_val {real} against label sd {sd}");
    assert!(
        control > 0.85 * sd_shuffled,
        "shuffled data: E_val {control} against label sd {sd_shuffled}"
    );
}
