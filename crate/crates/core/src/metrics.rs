//! Regression metrics over paired predictions.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub clip_id: String,
    pub predicted: f64,
    pub actual: f64,
}

/// Predictions with unique clip ids and finite values.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    items: Vec<Prediction>,
}

impl PredictionSet {
    pub fn new(items: Vec<Prediction>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for p in &items {
            if !seen.insert(p.clip_id.as_str()) {
                return Err(Error::Contract(format!("duplicate clip id `{}`", p.clip_id)));
            }
            if !p.predicted.is_finite() || !p.actual.is_finite() {
                return Err(Error::Contract(format!("non-finite value for clip `{}`", p.clip_id)));
            }
        }
        Ok(PredictionSet { items })
    }

    pub fn items(&self) -> &[Prediction] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn rmse(&self) -> Result<f64> {
        let (p, a) = self.columns();
        rmse_of(&p, &a)
    }

    pub fn mae(&self) -> Result<f64> {
        let (p, a) = self.columns();
        mae_of(&p, &a)
    }

    fn columns(&self) -> (Vec<f64>, Vec<f64>) {
        self.items.iter().map(|p| (p.predicted, p.actual)).unzip()
    }
}

fn check_pairs(pred: &[f64], actual: &[f64]) -> Result<()> {
    if pred.is_empty() {
        return Err(Error::Contract("metrics of an empty prediction set".into()));
    }
    if pred.len() != actual.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} labels",
            pred.len(),
            actual.len()
        )));
    }
    Ok(())
}

/// `sqrt(mean((p - a)^2))`.
pub fn rmse_of(pred: &[f64], actual: &[f64]) -> Result<f64> {
    check_pairs(pred, actual)?;
    let ss: f64 = pred.iter().zip(actual).map(|(p, a)| (p - a) * (p - a)).sum();
    Ok((ss / pred.len() as f64).sqrt())
}

/// `mean(|p - a|)`.
pub fn mae_of(pred: &[f64], actual: &[f64]) -> Result<f64> {
    check_pairs(pred, actual)?;
    let s: f64 = pred.iter().zip(actual).map(|(p, a)| (p - a).abs()).sum();
    Ok(s / pred.len() as f64)
}
