//! Synthetic clips with a planted, label-driven signal.
//!
//! The label drives the amplitude of one tone in two AU channels, a coherent
//! oscillation of every coordinate in one landmark region, and a copy of the
//! AU tone in one pose channel. Unplanted channels carry distractor tones of
//! random amplitude. Tones use a whole number of cycles per clip, so they land
//! in a fixed spectral bin whatever the clip length.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

#[allow(unused_imports)]
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::child::ClipRecord;
use crate::error::{Error, Result};
use crate::landmarks::LandmarkLayout;
use crate::rng::Rng;
use crate::spectral::{AttributeKind, AttributeTimeSeries};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlantedSignal {
    pub au_channels: Vec<usize>,
    /// Cycles per clip of the AU tone.
    pub au_cycles: usize,
    pub landmark_region: String,
    pub landmark_cycles: usize,
    pub pose_channel: usize,
    /// Tone amplitude at the top of the label range.
    pub gain: f64,
    /// Distractor tones per unplanted channel.
    pub distractors: usize,
}

impl Default for PlantedSignal {
    fn default() -> Self {
        PlantedSignal {
            au_channels: vec![0, 1],
            au_cycles: 3,
            landmark_region: "mouth".into(),
            landmark_cycles: 5,
            pose_channel: 0,
            gain: 2.0,
            distractors: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub num_clips: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    pub aus_channels: usize,
    pub gaze_channels: usize,
    pub pose_channels: usize,
    pub layout: LandmarkLayout,
    pub planted: PlantedSignal,
    /// Standard deviation of the white noise added to every channel.
    pub noise: f64,
    pub label_min: f64,
    pub label_max: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_clips: 153,
            min_frames: 200,
            max_frames: 1200,
            aus_channels: 20,
            gaze_channels: 4,
            pose_channels: 3,
            layout: LandmarkLayout::ibug68(2),
            planted: PlantedSignal::default(),
            noise: 0.1,
            label_min: 0.0,
            label_max: 24.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let p = &self.planted;
        let bad = |m: String| Err(Error::Contract(m));
        if self.min_frames < 2 || self.min_frames > self.max_frames {
            return bad(format!(
                "frame range {}..={} is empty",
                self.min_frames, self.max_frames
            ));
        }
        if !(self.label_min < self.label_max) || !self.label_min.is_finite() || !self.label_max.is_finite() {
            return bad(format!("label range [{}, {}] is empty", self.label_min, self.label_max));
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() || !(p.gain >= 0.0) {
            return bad("noise and gain must be finite and non-negative".into());
        }
        if let Some(c) = p.au_channels.iter().find(|&&c| c >= self.aus_channels) {
            return bad(format!("planted AU channel {c} out of {}", self.aus_channels));
        }
        if p.pose_channel >= self.pose_channels {
            return bad(format!(
                "planted pose channel {} out of {}",
                p.pose_channel, self.pose_channels
            ));
        }
        if self.gaze_channels == 0 {
            return bad("gaze needs at least one channel".into());
        }
        self.layout.validate()?;
        if !self.layout.regions.iter().any(|r| r.name == p.landmark_region) {
            return bad(format!("layout has no region `{}`", p.landmark_region));
        }
        // two samples per cycle at the shortest length
        let top = p.au_cycles.max(p.landmark_cycles);
        if p.au_cycles == 0 || p.landmark_cycles == 0 || 2 * top >= self.min_frames {
            return bad(format!("tone cycles must be in 1..{}", self.min_frames / 2));
        }
        Ok(())
    }
}

fn tone(len: usize, cycles: f64, amp: f64, phase: f64) -> Vec<f64> {
    (0..len)
        .map(|t| amp * (2.0 * PI * cycles * t as f64 / len as f64 + phase).cos())
        .collect()
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

struct ClipGen<'a> {
    spec: &'a SyntheticSpec,
    rng: Rng,
    len: usize,
}

impl ClipGen<'_> {
    fn noise(&mut self) -> Vec<f64> {
        let s = self.spec.noise;
        (0..self.len).map(|_| s * self.rng.normal()).collect()
    }

    /// Noise plus distractor tones away from the planted frequencies.
    fn background(&mut self) -> Vec<f64> {
        let p = &self.spec.planted;
        let mut x = self.noise();
        let top = (self.spec.min_frames / 2 - 1).min(12);
        let free: Vec<usize> = (1..=top)
            .filter(|&c| c != p.au_cycles && c != p.landmark_cycles)
            .collect();
        if free.is_empty() {
            return x;
        }
        for _ in 0..p.distractors {
            let cycles = free[self.rng.below(free.len())];
            let amp = self.rng.uniform_range(0.0, p.gain);
            let phase = self.rng.uniform_range(-PI, PI);
            add_into(&mut x, &tone(self.len, cycles as f64, amp, phase));
        }
        x
    }
}

/// Generates `spec.num_clips` clips; labels are uniform on the label range.
pub fn generate(spec: &SyntheticSpec) -> Result<Vec<ClipRecord>> {
    spec.validate()?;
    let root = Rng::new(spec.seed);
    let p = &spec.planted;
    let region: Vec<usize> = spec
        .layout
        .regions
        .iter()
        .find(|r| r.name == p.landmark_region)
        .map(|r| r.nodes.clone())
        .unwrap_or_default();
    (0..spec.num_clips)
        .map(|i| {
            let mut rng = root.split(i as u64);
            let label = rng.uniform_range(spec.label_min, spec.label_max);
            let len = spec.min_frames + rng.below(spec.max_frames - spec.min_frames + 1);
            let amp = p.gain * (label - spec.label_min) / (spec.label_max - spec.label_min);
            let au_tone = tone(len, p.au_cycles as f64, amp, rng.uniform_range(-PI, PI));
            let lm_tone = tone(len, p.landmark_cycles as f64, amp, rng.uniform_range(-PI, PI));
            let mut gen = ClipGen { spec, rng, len };

            let aus: Vec<Vec<f64>> = (0..spec.aus_channels)
                .map(|c| {
                    if p.au_channels.contains(&c) {
                        let mut x = gen.noise();
                        add_into(&mut x, &au_tone);
                        x
                    } else {
                        gen.background()
                    }
                })
                .collect();
            let gaze: Vec<Vec<f64>> = (0..spec.gaze_channels).map(|_| gen.background()).collect();
            let pose: Vec<Vec<f64>> = (0..spec.pose_channels)
                .map(|c| {
                    if c == p.pose_channel {
                        let mut x = gen.noise();
                        add_into(&mut x, &au_tone);
                        x
                    } else {
                        gen.background()
                    }
                })
                .collect();
            let d = spec.layout.coord_arity;
            let landmarks: Vec<Vec<f64>> = (0..spec.layout.channels())
                .map(|ch| {
                    // a fixed resting position per coordinate; landmarks keep
                    // absolute values, so it only shows up in the DC bin
                    let rest = (ch as f64 * 0.37).sin() * 50.0;
                    let mut x = if region.contains(&(ch / d)) {
                        let mut x = gen.noise();
                        add_into(&mut x, &lm_tone);
                        x
                    } else {
                        gen.background()
                    };
                    x.iter_mut().for_each(|v| *v += rest);
                    x
                })
                .collect();

            let mut series = BTreeMap::new();
            for (kind, chans) in [
                (AttributeKind::Aus, aus),
                (AttributeKind::Gaze, gaze),
                (AttributeKind::Pose, pose),
                (AttributeKind::Landmarks, landmarks),
            ] {
                series.insert(kind, AttributeTimeSeries::from_channels(kind, &chans)?);
            }
            Ok(ClipRecord {
                clip_id: format!("clip{i:04}"),
                label,
                series,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::{encode_clip_attribute, PipelineConfig};

    fn small(noise: f64, seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            num_clips: 60,
            aus_channels: 4,
            noise,
            seed,
            ..SyntheticSpec::default()
        }
    }

    /// Least-squares fit of the label on the encoded amplitude of the planted
    /// AU bin; returns the in-sample RMSE.
    fn planted_fit_rmse(spec: &SyntheticSpec) -> f64 {
        let clips = generate(spec).unwrap();
        let cfg = PipelineConfig {
            k: 16,
            ..PipelineConfig::default()
        };
        let xs: Vec<f64> = clips
            .iter()
            .map(|c| {
                let rep = encode_clip_attribute(&c.series[&AttributeKind::Aus], &cfg).unwrap();
                rep.amplitude_row(spec.planted.au_channels[0])[spec.planted.au_cycles]
            })
            .collect();
        let ys: Vec<f64> = clips.iter().map(|c| c.label).collect();
        let n = xs.len() as f64;
        let mx = xs.iter().sum::<f64>() / n;
        let my = ys.iter().sum::<f64>() / n;
        let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
        let b = sxy / sxx;
        let a = my - b * mx;
        let sse: f64 = xs.iter().zip(&ys).map(|(x, y)| (a + b * x - y).powi(2)).sum();
        (sse / n).sqrt()
    }

    #[test]
    fn noiseless_planted_band_recovers_the_label() {
        let r = planted_fit_rmse(&small(0.0, 1));
        assert!(r < 0.05, "{r}");
    }

    #[test]
    fn planted_fit_degrades_with_noise() {
        let errs: Vec<f64> = [0.0, 0.5, 2.0]
            .iter()
            .map(|&s| planted_fit_rmse(&small(s, 2)))
            .collect();
        assert!(errs[0] < errs[1] && errs[1] < errs[2], "{errs:?}");
    }

    #[test]
    fn generation_is_deterministic_and_in_range() {
        let s = small(0.1, 3);
        let a = generate(&s).unwrap();
        assert_eq!(a, generate(&s).unwrap());
        for c in &a {
            assert!((0.0..=24.0).contains(&c.label));
            assert_eq!(c.series.len(), 4);
            let len = c.series[&AttributeKind::Aus].len();
            assert!((s.min_frames..=s.max_frames).contains(&len));
            assert_eq!(c.series[&AttributeKind::Landmarks].channels, 136);
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut s = SyntheticSpec::default();
        s.planted.au_channels = vec![25];
        assert!(s.validate().is_err());
        let mut s = SyntheticSpec::default();
        s.planted.landmark_region = "ear".into();
        assert!(s.validate().is_err());
        let s = SyntheticSpec {
            min_frames: 10,
            max_frames: 5,
            ..SyntheticSpec::default()
        };
        assert!(s.validate().is_err());
    }
}
