use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use serde::{Deserialize, Serialize};

use super::data::EncodedClip;
use super::model::ChildModel;
use crate::error::{Error, Result};
use crate::metrics::rmse_of;
use crate::rng::Rng;
use crate::tensor::{Adam, AdamConfig, Graph, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub dropout: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 16,
            lr: 1e-3,
            dropout: 0.1,
            weight_decay: 0.0,
            seed: 0,
            patience: 8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.patience == 0 || !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Contract(format!(
                "batch size, patience and learning rate must be positive: {self:?}"
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Contract(format!("dropout {} is outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Outcome of training one child.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub key: String,
    /// Best-epoch validation RMSE.
    pub e_val: f64,
    /// Training RMSE at the best epoch.
    pub train_error: f64,
    /// Filled in by executors that have a clock.
    pub wall_time_ms: f64,
    pub seed: u64,
    pub best_epoch: usize,
    pub epochs_run: usize,
}

/// RMSE of `model` on `clips` in label units.
pub fn evaluate(model: &ChildModel, clips: &[&EncodedClip]) -> Result<f64> {
    let preds = model.predict_many(clips)?;
    let labels: Vec<f64> = clips.iter().map(|c| c.label).collect();
    rmse_of(&preds, &labels)
}

#[allow(clippy::too_many_arguments)]
fn run_epoch(
    model: &mut ChildModel,
    train: &[&EncodedClip],
    opt: &mut Adam,
    order: &mut [usize],
    order_rng: &mut Rng,
    drop_rng: &mut Rng,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<()> {
    order_rng.shuffle(order);
    for chunk in order.chunks(cfg.batch_size) {
        let clips: Vec<&EncodedClip> = chunk.iter().map(|&i| train[i]).collect();
        let batch = model.make_batch(&clips)?;
        let mut g = Graph::new();
        let pred = model.forward(&mut g, &batch, drop_rng)?;
        let target = g.constant(Tensor::vector(batch.targets.clone()));
        let diff = g.sub(pred, target)?;
        let sq = g.mul(diff, diff)?;
        let loss = g.mean(sq);
        if !g.value(loss).item()?.is_finite() {
            return Err(Error::Diverged { epoch });
        }
        model.params_mut().zero_grad();
        g.backward(loss, model.params_mut())?;
        opt.step(model.params_mut())?;
    }
    Ok(())
}

fn optimizer(cfg: &TrainConfig) -> Adam {
    Adam::new(AdamConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..AdamConfig::default()
    })
}

/// Trains for exactly `cfg.epochs` epochs with no model selection and
/// returns the final training RMSE.
pub fn train_epochs(model: &mut ChildModel, train: &[&EncodedClip], cfg: &TrainConfig) -> Result<f64> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Contract("training set must be non-empty".into()));
    }
    model.fit_normalizers(train)?;
    let mut opt = optimizer(cfg);
    let root = Rng::new(cfg.seed);
    let mut order_rng = root.split(1);
    let mut drop_rng = root.split(2);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        run_epoch(
            model,
            train,
            &mut opt,
            &mut order,
            &mut order_rng,
            &mut drop_rng,
            cfg,
            epoch,
        )?;
    }
    let err = evaluate(model, train)?;
    if !err.is_finite() {
        return Err(Error::Diverged { epoch: cfg.epochs });
    }
    Ok(err)
}

/// Trains with Adam on mean squared error, keeping the weights of the epoch
/// with the lowest validation RMSE (the untrained weights count as epoch 0).
pub fn train_from_scratch(
    model: &mut ChildModel,
    train: &[&EncodedClip],
    val: &[&EncodedClip],
    cfg: &TrainConfig,
) -> Result<TrialResult> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Contract("training and validation sets must be non-empty".into()));
    }
    let train_ids: BTreeSet<&str> = train.iter().map(|c| c.clip_id.as_str()).collect();
    if let Some(c) = val.iter().find(|c| train_ids.contains(c.clip_id.as_str())) {
        return Err(Error::Contract(format!(
            "clip `{}` is in both training and validation",
            c.clip_id
        )));
    }
    model.fit_normalizers(train)?;
    let mut opt = optimizer(cfg);
    let root = Rng::new(cfg.seed);
    let mut order_rng = root.split(1);
    let mut drop_rng = root.split(2);

    let mut best_err = evaluate(model, val)?;
    let mut best_params = model.params().clone();
    let mut best_epoch = 0;
    let mut stale = 0;
    let mut epochs_run = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        epochs_run = epoch;
        run_epoch(
            model,
            train,
            &mut opt,
            &mut order,
            &mut order_rng,
            &mut drop_rng,
            cfg,
            epoch,
        )?;
        let err = evaluate(model, val)?;
        if !err.is_finite() {
            return Err(Error::Diverged { epoch });
        }
        if err < best_err {
            best_err = err;
            best_params = model.params().clone();
            best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    model.params_mut().load_values_from(&best_params);
    let train_error = evaluate(model, train)?;
    Ok(TrialResult {
        key: model.key.clone(),
        e_val: best_err,
        train_error,
        wall_time_ms: 0.0,
        seed: cfg.seed,
        best_epoch,
        epochs_run,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::child::data::input_shapes;
    use crate::child::model::{instantiate_joint, instantiate_stream};
    use crate::child::testing::{toy_clips, toy_joint_space};
    use crate::space::default_cnn_space;
    use crate::spectral::AttributeKind;

    fn split(clips: &[EncodedClip], n_train: usize) -> (Vec<&EncodedClip>, Vec<&EncodedClip>) {
        let refs: Vec<&EncodedClip> = clips.iter().collect();
        (refs[..n_train].to_vec(), refs[n_train..].to_vec())
    }

    #[test]
    fn constant_labels_are_fit() {
        let mut clips = toy_clips(30, 1);
        for c in &mut clips {
            c.label = 7.0;
        }
        let (train, val) = split(&clips, 24);
        let shapes = input_shapes(&train).unwrap();
        let space = default_cnn_space("aus", AttributeKind::Aus);
        let cfg = TrainConfig {
            epochs: 60,
            lr: 1e-2,
            weight_decay: 0.1,
            patience: 60,
            dropout: 0.0,
            ..TrainConfig::default()
        };
        let mut m = instantiate_stream(&space, &[0, 6, 6, 6, 0, 0], &shapes, cfg.dropout, 2).unwrap();
        let r = train_from_scratch(&mut m, &train, &val, &cfg).unwrap();
        assert!(r.e_val < 0.1, "{r:?}");
        for c in &val {
            assert!((m.predict(c).unwrap() - 7.0).abs() < 0.1);
        }
    }

    #[test]
    fn zero_epochs_reports_untrained_error() {
        let clips = toy_clips(20, 2);
        let (train, val) = split(&clips, 15);
        let shapes = input_shapes(&train).unwrap();
        let (space, arch) = toy_joint_space();
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let mut m = instantiate_joint(&space, &arch, &shapes, cfg.dropout, 3).unwrap();
        let init = m.params().flat_values();
        let r = train_from_scratch(&mut m, &train, &val, &cfg).unwrap();
        assert_eq!(m.params().flat_values(), init);
        assert_eq!(r.e_val, evaluate(&m, &val).unwrap());
        assert_eq!((r.best_epoch, r.epochs_run), (0, 0));
    }

    #[test]
    fn training_is_deterministic() {
        let clips = toy_clips(20, 3);
        let (train, val) = split(&clips, 15);
        let shapes = input_shapes(&train).unwrap();
        let (space, arch) = toy_joint_space();
        let cfg = TrainConfig {
            epochs: 3,
            seed: 5,
            ..TrainConfig::default()
        };
        let run = || {
            let mut m = instantiate_joint(&space, &arch, &shapes, cfg.dropout, 3).unwrap();
            train_from_scratch(&mut m, &train, &val, &cfg).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn fixed_epochs_match_selection_when_validation_always_improves() {
        let clips = toy_clips(20, 7);
        let (train, val) = split(&clips, 15);
        let shapes = input_shapes(&train).unwrap();
        let (space, arch) = toy_joint_space();
        let cfg = TrainConfig {
            epochs: 2,
            seed: 1,
            ..TrainConfig::default()
        };
        let mut a = instantiate_joint(&space, &arch, &shapes, cfg.dropout, 3).unwrap();
        let mut b = a.clone();
        train_epochs(&mut a, &train, &cfg).unwrap();
        let r = train_from_scratch(&mut b, &train, &val, &cfg).unwrap();
        if r.best_epoch == 2 {
            assert_eq!(a.params().flat_values(), b.params().flat_values());
        } else {
            assert_ne!(a.params().flat_values(), b.params().flat_values());
        }
    }

    #[test]
    fn overlapping_splits_are_rejected() {
        let clips = toy_clips(6, 4);
        let refs: Vec<&EncodedClip> = clips.iter().collect();
        let shapes = input_shapes(&refs).unwrap();
        let space = default_cnn_space("aus", AttributeKind::Aus);
        let mut m = instantiate_stream(&space, &[0; 6], &shapes, 0.0, 1).unwrap();
        let err = train_from_scratch(&mut m, &refs[..4], &refs[3..], &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn exploding_learning_rate_reports_the_epoch() {
        let mut clips = toy_clips(20, 5);
        for (i, c) in clips.iter_mut().enumerate() {
            c.label = i as f64;
        }
        let (train, val) = split(&clips, 15);
        let shapes = input_shapes(&train).unwrap();
        let (space, arch) = toy_joint_space();
        let cfg = TrainConfig {
            epochs: 50,
            lr: 1e300,
            patience: 50,
            ..TrainConfig::default()
        };
        let mut m = instantiate_joint(&space, &arch, &shapes, 0.0, 3).unwrap();
        match train_from_scratch(&mut m, &train, &val, &cfg) {
            Err(Error::Diverged { epoch }) => assert!(epoch >= 1),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn full_batch_loss_does_not_increase_on_a_linear_task() {
        // label is a linear function of one heatmap entry
        let mut clips = toy_clips(24, 6);
        for c in &mut clips {
            c.label = 3.0 * c.attributes[&AttributeKind::Aus].heatmap.matrix[0] + 1.0;
        }
        let refs: Vec<&EncodedClip> = clips.iter().collect();
        let shapes = input_shapes(&refs).unwrap();
        let space = default_cnn_space("aus", AttributeKind::Aus);
        let mut m = instantiate_stream(&space, &[6, 6, 6, 6, 0, 0], &shapes, 0.0, 1).unwrap();
        m.fit_normalizers(&refs).unwrap();
        let mut opt = Adam::new(AdamConfig {
            lr: 1e-3,
            ..AdamConfig::default()
        });
        let batch = m.make_batch(&refs).unwrap();
        let mut rng = Rng::new(0);
        let mut last = f64::INFINITY;
        for _ in 0..40 {
            let mut g = Graph::new();
            let pred = m.forward(&mut g, &batch, &mut rng).unwrap();
            let t = g.constant(Tensor::vector(batch.targets.clone()));
            let d = g.sub(pred, t).unwrap();
            let sq = g.mul(d, d).unwrap();
            let loss = g.mean(sq);
            let l = g.value(loss).item().unwrap();
            assert!(l <= last + 1e-12, "{l} > {last}");
            last = l;
            m.params_mut().zero_grad();
            g.backward(loss, m.params_mut()).unwrap();
            opt.step(m.params_mut()).unwrap();
        }
    }
}
