//! Per-clip attribute time-series, preprocessing and the fixed-size spectral
//! encoding.
//!
//! Every channel is resampled (periodic linear interpolation) to a canonical
//! length of `2 * (K - 1)` samples before a real DFT, so any clip length maps
//! onto exactly `K` one-sided frequency bins that line up across clips.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;
use core::fmt;
use core::str::FromStr;

#[allow(unused_imports)]
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Retained components used throughout the original experiments.
pub const DEFAULT_K: usize = 120;
/// Minimum clip length after frame filtering.
pub const DEFAULT_MIN_FRAMES: usize = 16;
/// Amplitudes below this get phase 0.
pub const PHASE_AMPLITUDE_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttributeKind {
    Aus,
    Gaze,
    Pose,
    Landmarks,
}

impl AttributeKind {
    pub const ALL: [AttributeKind; 4] = [
        AttributeKind::Aus,
        AttributeKind::Gaze,
        AttributeKind::Pose,
        AttributeKind::Landmarks,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttributeKind::Aus => "aus",
            AttributeKind::Gaze => "gaze",
            AttributeKind::Pose => "pose",
            AttributeKind::Landmarks => "landmarks",
        }
    }
}

impl fmt::Display for AttributeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AttributeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AttributeKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Parse(format!("unknown attribute `{s}`")))
    }
}

/// A variable-length multi-channel signal for one attribute of one clip.
/// `frames` is row-major, `len() x channels`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeTimeSeries {
    pub kind: AttributeKind,
    pub channels: usize,
    pub frames: Vec<f64>,
    pub confidence: Vec<f64>,
    pub success: Vec<bool>,
}

impl AttributeTimeSeries {
    /// Builds a series from per-frame rows; every row must have `channels`
    /// entries.
    pub fn from_rows(
        kind: AttributeKind,
        channels: usize,
        rows: &[Vec<f64>],
        confidence: Vec<f64>,
        success: Vec<bool>,
    ) -> Result<Self> {
        if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != channels) {
            return Err(Error::Contract(format!(
                "frame {i} has {} channels, expected {channels}",
                r.len()
            )));
        }
        if confidence.len() != rows.len() || success.len() != rows.len() {
            return Err(Error::Contract(
                "confidence/success length differs from frame count".into(),
            ));
        }
        Ok(AttributeTimeSeries {
            kind,
            channels,
            frames: rows.concat(),
            confidence,
            success,
        })
    }

    /// A fully-confident series from a column-major channel list.
    pub fn from_channels(kind: AttributeKind, channels: &[Vec<f64>]) -> Result<Self> {
        let c = channels.len();
        let len = channels.first().map_or(0, Vec::len);
        if channels.iter().any(|ch| ch.len() != len) {
            return Err(Error::Contract("channels differ in length".into()));
        }
        let mut frames = Vec::with_capacity(c * len);
        for t in 0..len {
            frames.extend(channels.iter().map(|ch| ch[t]));
        }
        Ok(AttributeTimeSeries {
            kind,
            channels: c,
            frames,
            confidence: vec![1.0; len],
            success: vec![true; len],
        })
    }

    pub fn len(&self) -> usize {
        self.confidence.len()
    }

    pub fn is_empty(&self) -> bool {
        self.confidence.is_empty()
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.frames[t * self.channels..(t + 1) * self.channels]
    }

    pub fn channel(&self, c: usize) -> Vec<f64> {
        (0..self.len()).map(|t| self.frames[t * self.channels + c]).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames.len() != self.len() * self.channels || self.success.len() != self.len() {
            return Err(Error::Contract(format!(
                "{} series has inconsistent buffers ({} values, {} frames, {} channels)",
                self.kind,
                self.frames.len(),
                self.len(),
                self.channels
            )));
        }
        Ok(())
    }
}

/// Drops failed or low-confidence frames, then subtracts each channel's
/// median for every attribute except landmarks, which keep their absolute
/// coordinates.
pub fn preprocess(raw: &AttributeTimeSeries, conf_threshold: f64, min_frames: usize) -> Result<AttributeTimeSeries> {
    if !(0.0..=1.0).contains(&conf_threshold) {
        return Err(Error::Contract(format!(
            "confidence threshold {conf_threshold} not in [0, 1]"
        )));
    }
    raw.validate()?;
    let keep: Vec<usize> = (0..raw.len())
        .filter(|&t| raw.success[t] && raw.confidence[t] >= conf_threshold)
        .collect();
    if keep.len() < min_frames {
        return Err(Error::ClipRejected {
            remaining: keep.len(),
            min: min_frames,
        });
    }
    let c = raw.channels;
    let mut frames = Vec::with_capacity(keep.len() * c);
    for &t in &keep {
        frames.extend_from_slice(raw.row(t));
    }
    if raw.kind != AttributeKind::Landmarks {
        for ch in 0..c {
            let mut column: Vec<f64> = (0..keep.len()).map(|t| frames[t * c + ch]).collect();
            let med = median(&mut column);
            for t in 0..keep.len() {
                frames[t * c + ch] -= med;
            }
        }
    }
    Ok(AttributeTimeSeries {
        kind: raw.kind,
        channels: c,
        frames,
        confidence: keep.iter().map(|&t| raw.confidence[t]).collect(),
        success: vec![true; keep.len()],
    })
}

/// Median; averages the two middle values for even lengths. Sorts in place.
pub fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Amplitude and phase spectra, each `channels x k`, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralRepresentation {
    pub kind: AttributeKind,
    pub channels: usize,
    pub k: usize,
    pub amplitude: Vec<f64>,
    pub phase: Vec<f64>,
}

impl SpectralRepresentation {
    pub fn amplitude_row(&self, c: usize) -> &[f64] {
        &self.amplitude[c * self.k..(c + 1) * self.k]
    }

    pub fn phase_row(&self, c: usize) -> &[f64] {
        &self.phase[c * self.k..(c + 1) * self.k]
    }
}

/// Resamples one channel to `n` points, treating the clip as periodic.
fn resample_periodic(x: &[f64], n: usize) -> Vec<f64> {
    let len = x.len();
    (0..n)
        .map(|i| {
            let t = i as f64 * len as f64 / n as f64;
            let j = (t.floor() as usize).min(len - 1);
            let frac = t - j as f64;
            let next = x[(j + 1) % len];
            (1.0 - frac) * x[j] + frac * next
        })
        .collect()
}

/// Encodes every channel into `k` one-sided frequency bins.
pub fn encode_spectral(series: &AttributeTimeSeries, k: usize) -> Result<SpectralRepresentation> {
    series.validate()?;
    let frames = series.len();
    if k < 2 || frames < 2 || k > frames {
        return Err(Error::Resolution { frames, k });
    }
    let n = 2 * (k - 1);
    let (cos_t, sin_t): (Vec<f64>, Vec<f64>) = (0..n)
        .map(|m| {
            let a = 2.0 * PI * m as f64 / n as f64;
            (a.cos(), a.sin())
        })
        .unzip();
    let c = series.channels;
    let mut amplitude = vec![0.0; c * k];
    let mut phase = vec![0.0; c * k];
    for ch in 0..c {
        let x = resample_periodic(&series.channel(ch), n);
        for bin in 0..k {
            let (mut re, mut im) = (0.0, 0.0);
            for (t, &v) in x.iter().enumerate() {
                let m = (bin * t) % n;
                re += v * cos_t[m];
                im -= v * sin_t[m];
            }
            let scale = if bin == 0 || bin == k - 1 { 1.0 } else { 2.0 };
            let amp = scale * (re * re + im * im).sqrt() / n as f64;
            amplitude[ch * k + bin] = amp;
            phase[ch * k + bin] = if amp < PHASE_AMPLITUDE_FLOOR {
                0.0
            } else {
                let p = im.atan2(re);
                if p <= -PI {
                    PI
                } else {
                    p
                }
            };
        }
    }
    Ok(SpectralRepresentation {
        kind: series.kind,
        channels: c,
        k,
        amplitude,
        phase,
    })
}

/// `[amplitude; phase]` stacked row-wise: `2 * channels` rows of `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapRepresentation {
    pub rows: usize,
    pub k: usize,
    pub matrix: Vec<f64>,
}

pub fn to_heatmap(rep: &SpectralRepresentation) -> HeatmapRepresentation {
    let mut matrix = Vec::with_capacity(2 * rep.amplitude.len());
    matrix.extend_from_slice(&rep.amplitude);
    matrix.extend_from_slice(&rep.phase);
    HeatmapRepresentation {
        rows: 2 * rep.channels,
        k: rep.k,
        matrix,
    }
}

impl HeatmapRepresentation {
    /// Splits back into (amplitude, phase).
    pub fn split(&self) -> (Vec<f64>, Vec<f64>) {
        let half = self.matrix.len() / 2;
        (self.matrix[..half].to_vec(), self.matrix[half..].to_vec())
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.matrix[r * self.k..(r + 1) * self.k]
    }
}

/// Canonical resampled length for `k` retained bins.
pub fn canonical_length(k: usize) -> usize {
    2 * k.saturating_sub(1)
}

/// Preprocessing and encoding options.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub k: usize,
    pub min_frames: usize,
    pub conf_threshold: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            k: DEFAULT_K,
            min_frames: DEFAULT_MIN_FRAMES,
            conf_threshold: 0.5,
        }
    }
}

/// Preprocess then encode.
pub fn encode_clip_attribute(raw: &AttributeTimeSeries, cfg: &PipelineConfig) -> Result<SpectralRepresentation> {
    let clean = preprocess(raw, cfg.conf_threshold, cfg.min_frames)?;
    encode_spectral(&clean, cfg.k)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series(kind: AttributeKind, chans: &[Vec<f64>]) -> AttributeTimeSeries {
        AttributeTimeSeries::from_channels(kind, chans).unwrap()
    }

    fn cosine(len: usize, cycles: f64, phase: f64) -> Vec<f64> {
        (0..len)
            .map(|t| (2.0 * PI * cycles * t as f64 / len as f64 + phase).cos())
            .collect()
    }

    #[test]
    fn constant_non_landmark_channel_becomes_zero() {
        let s = series(AttributeKind::Aus, &[vec![5.0; 40]]);
        let p = preprocess(&s, 0.5, 16).unwrap();
        assert!(p.frames.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn landmark_values_are_kept() {
        let s = series(AttributeKind::Landmarks, &[vec![5.0; 40]]);
        let p = preprocess(&s, 0.5, 16).unwrap();
        assert!(p.frames.iter().all(|&v| v == 5.0));
    }

    #[test]
    fn failed_frames_are_removed() {
        let mut s = series(AttributeKind::Gaze, &[(0..10).map(f64::from).collect()]);
        for t in [1, 4, 7] {
            s.success[t] = false;
        }
        let p = preprocess(&s, 0.5, 5).unwrap();
        assert_eq!(p.len(), 7);
    }

    #[test]
    fn low_confidence_frames_are_removed_and_short_clips_rejected() {
        let mut s = series(AttributeKind::Pose, &[vec![1.0; 20]]);
        for t in 0..10 {
            s.confidence[t] = 0.1;
        }
        let err = preprocess(&s, 0.5, 16).unwrap_err();
        assert_eq!(err, Error::ClipRejected { remaining: 10, min: 16 });
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn single_tone_peaks_at_its_bin() {
        let k = 120;
        for &(len, bin) in &[(300usize, 7usize), (1000, 31), (4000, 100)] {
            let s = series(AttributeKind::Aus, &[cosine(len, bin as f64, 0.0)]);
            let rep = encode_spectral(&s, k).unwrap();
            let row = rep.amplitude_row(0);
            let (argmax, peak) = row
                .iter()
                .enumerate()
                .fold((0, f64::MIN), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
            assert_eq!(argmax, bin);
            assert!(row.iter().enumerate().all(|(i, &v)| i == bin || v < peak));
            assert!((peak - 1.0).abs() < 0.01, "unit cosine amplitude {peak}");
            assert!(rep.phase_row(0)[bin].abs() < 0.05);
        }
    }

    #[test]
    fn dc_input_puts_all_energy_in_bin_zero() {
        let s = series(AttributeKind::Landmarks, &[vec![3.0; 500]]);
        let rep = encode_spectral(&s, 120).unwrap();
        assert!((rep.amplitude[0] - 3.0).abs() < 1e-12);
        assert!(rep.amplitude[1..].iter().all(|&a| a < 1e-9));
        assert!(rep.phase[1..].iter().all(|&p| p == 0.0));
    }

    #[test]
    fn output_shape_is_independent_of_length() {
        for len in [150, 700, 4000] {
            let s = series(AttributeKind::Gaze, &[cosine(len, 5.0, 0.3), cosine(len, 2.0, 1.0)]);
            let rep = encode_spectral(&s, 120).unwrap();
            assert_eq!((rep.channels, rep.k), (2, 120));
            assert_eq!(rep.amplitude.len(), 240);
        }
    }

    #[test]
    fn phase_lies_in_half_open_interval() {
        let s = series(AttributeKind::Aus, &[cosine(400, 3.0, PI), cosine(400, 9.0, -2.0)]);
        let rep = encode_spectral(&s, 60).unwrap();
        assert!(rep.phase.iter().all(|&p| p > -PI && p <= PI));
        assert!(rep.amplitude.iter().all(|&a| a >= 0.0));
    }

    #[test]
    fn too_many_components_is_a_resolution_error() {
        let s = series(AttributeKind::Aus, &[cosine(50, 1.0, 0.0)]);
        assert_eq!(
            encode_spectral(&s, 120).unwrap_err(),
            Error::Resolution { frames: 50, k: 120 }
        );
        assert!(matches!(encode_spectral(&s, 1), Err(Error::Resolution { .. })));
    }

    #[test]
    fn heatmap_stacks_amplitude_over_phase() {
        let chans: Vec<Vec<f64>> = (0..4).map(|c| cosine(300, c as f64 + 1.0, 0.5)).collect();
        let rep = encode_spectral(&series(AttributeKind::Aus, &chans), 120).unwrap();
        let hm = to_heatmap(&rep);
        assert_eq!((hm.rows, hm.k), (8, 120));
        assert_eq!(hm.row(4), rep.phase_row(0));
        assert_eq!(hm.row(0), rep.amplitude_row(0));
        let (a, p) = hm.split();
        assert_eq!(a, rep.amplitude);
        assert_eq!(p, rep.phase);
    }
}
