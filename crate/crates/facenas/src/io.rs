//! Per-clip attribute CSVs and the label table.
//!
//! A dataset directory holds `labels.csv` (`clip_id,score`) and one file per
//! clip and attribute named `<clip_id>.<attribute>.csv`, with the columns
//! `frame,timestamp,confidence,success` followed by one column per channel.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use facenas_core::child::ClipRecord;
use facenas_core::landmarks::LandmarkLayout;
use facenas_core::spectral::{preprocess, AttributeKind, AttributeTimeSeries, PipelineConfig};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub const LABELS_FILE: &str = "labels.csv";
const FIXED_COLUMNS: [&str; 4] = ["frame", "timestamp", "confidence", "success"];
/// Frame rate used for the timestamp column of written files.
pub const WRITE_FPS: f64 = 30.0;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum IngestIssue {
    MissingLabels,
    MissingLabel {
        clip_id: String,
    },
    DuplicateClip {
        clip_id: String,
    },
    LabelOutOfRange {
        clip_id: String,
        value: String,
    },
    MissingAttribute {
        clip_id: String,
        attribute: String,
    },
    Malformed {
        file: String,
        line: Option<u64>,
        message: String,
    },
    UnknownFile {
        file: String,
    },
}

impl fmt::Display for IngestIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            IngestIssue::MissingLabels => write!(f, "{LABELS_FILE} is missing"),
            IngestIssue::MissingLabel { clip_id } => write!(f, "clip `{clip_id}` has no label"),
            IngestIssue::DuplicateClip { clip_id } => write!(f, "clip `{clip_id}` is labelled more than once"),
            IngestIssue::LabelOutOfRange { clip_id, value } => {
                write!(f, "clip `{clip_id}` has label {value} outside the label range")
            }
            IngestIssue::MissingAttribute { clip_id, attribute } => {
                write!(f, "clip `{clip_id}` has no `{attribute}` file")
            }
            IngestIssue::Malformed { file, line, message } => match line {
                Some(l) => write!(f, "{file}:{l}: {message}"),
                None => write!(f, "{file}: {message}"),
            },
            IngestIssue::UnknownFile { file } => write!(f, "unrecognised file {file}"),
        }
    }
}

/// Every problem found in a dataset directory.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub struct IngestError {
    pub issues: Vec<IngestIssue>,
}

impl fmt::Display for IngestError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ingestion issue(s)", self.issues.len())?;
        for i in &self.issues {
            write!(f, "\n  - {i}")?;
        }
        Ok(())
    }
}

/// A clip that parsed but failed preprocessing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rejection {
    pub clip_id: String,
    pub attribute: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestConfig {
    pub pipeline: PipelineConfig,
    pub layout: LandmarkLayout,
    pub label_min: f64,
    pub label_max: f64,
}

impl Default for IngestConfig {
    fn default() -> Self {
        IngestConfig {
            pipeline: PipelineConfig::default(),
            layout: LandmarkLayout::ibug68(2),
            label_min: 0.0,
            label_max: 24.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Ingested {
    /// Sorted by clip id.
    pub records: Vec<ClipRecord>,
    pub rejected: Vec<Rejection>,
}

pub fn attribute_file(clip_id: &str, kind: AttributeKind) -> String {
    format!("{clip_id}.{kind}.csv")
}

fn fmt_f64(v: f64) -> String {
    // Display is the shortest representation that parses back to the same bits
    format!("{v}")
}

/// Writes one attribute series as CSV text.
pub fn series_to_csv(series: &AttributeTimeSeries) -> anyhow::Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = FIXED_COLUMNS.iter().map(|s| s.to_string()).collect();
    header.extend((0..series.channels).map(|c| format!("c{c}")));
    w.write_record(&header)?;
    for t in 0..series.len() {
        let mut row = vec![
            t.to_string(),
            fmt_f64(t as f64 / WRITE_FPS),
            fmt_f64(series.confidence[t]),
            u8::from(series.success[t]).to_string(),
        ];
        row.extend(series.row(t).iter().map(|&v| fmt_f64(v)));
        w.write_record(&row)?;
    }
    Ok(w.into_inner()?)
}

/// Writes `labels.csv` and every attribute file of `clips` into `dir`.
pub fn write_dataset(dir: &Path, clips: &[ClipRecord]) -> anyhow::Result<()> {
    fs::create_dir_all(dir)?;
    let mut labels = csv::Writer::from_path(dir.join(LABELS_FILE))?;
    labels.write_record(["clip_id", "score"])?;
    for c in clips {
        labels.write_record([c.clip_id.as_str(), &fmt_f64(c.label)])?;
    }
    labels.flush()?;
    clips.par_iter().try_for_each(|c| -> anyhow::Result<()> {
        for (kind, s) in &c.series {
            fs::write(dir.join(attribute_file(&c.clip_id, *kind)), series_to_csv(s)?)?;
        }
        Ok(())
    })
}

fn malformed(file: &str, line: Option<u64>, message: impl Into<String>) -> IngestIssue {
    IngestIssue::Malformed {
        file: file.into(),
        line,
        message: message.into(),
    }
}

/// Valid labels, plus every id that had a row at all.
fn read_labels(
    path: &Path,
    cfg: &IngestConfig,
    issues: &mut Vec<IngestIssue>,
) -> (BTreeMap<String, f64>, BTreeSet<String>) {
    let mut seen = BTreeSet::new();
    let mut out = BTreeMap::new();
    let mut r = match csv::Reader::from_path(path) {
        Ok(r) => r,
        Err(e) => {
            issues.push(malformed(LABELS_FILE, None, e.to_string()));
            return (out, seen);
        }
    };
    match r.headers() {
        Ok(h) if h.iter().map(str::trim).eq(["clip_id", "score"]) => {}
        Ok(h) => {
            issues.push(malformed(
                LABELS_FILE,
                Some(1),
                format!("expected header clip_id,score, found {h:?}"),
            ));
            return (out, seen);
        }
        Err(e) => {
            issues.push(malformed(LABELS_FILE, Some(1), e.to_string()));
            return (out, seen);
        }
    }
    for rec in r.records() {
        let rec = match rec {
            Ok(rec) => rec,
            Err(e) => {
                let line = e.position().map(|p| p.line());
                issues.push(malformed(LABELS_FILE, line, e.to_string()));
                continue;
            }
        };
        let line = rec.position().map(|p| p.line());
        let id = rec[0].trim().to_string();
        let raw = rec[1].trim();
        if id.is_empty() {
            issues.push(malformed(LABELS_FILE, line, "empty clip_id"));
            continue;
        }
        if !seen.insert(id.clone()) {
            issues.push(IngestIssue::DuplicateClip { clip_id: id });
            continue;
        }
        match raw.parse::<f64>() {
            Ok(v) if v.is_finite() && v >= cfg.label_min && v <= cfg.label_max => {
                out.insert(id, v);
            }
            Ok(_) => issues.push(IngestIssue::LabelOutOfRange {
                clip_id: id,
                value: raw.into(),
            }),
            Err(_) => issues.push(malformed(LABELS_FILE, line, format!("score `{raw}` is not a number"))),
        }
    }
    (out, seen)
}

/// Parses one attribute file.
pub fn parse_series(text: &[u8], kind: AttributeKind, file: &str) -> Result<AttributeTimeSeries, IngestIssue> {
    let mut r = csv::Reader::from_reader(text);
    let header = r
        .headers()
        .map_err(|e| malformed(file, Some(1), e.to_string()))?
        .clone();
    if header.len() < FIXED_COLUMNS.len() || !header.iter().take(4).map(str::trim).eq(FIXED_COLUMNS) {
        return Err(malformed(
            file,
            Some(1),
            "header must start with frame,timestamp,confidence,success",
        ));
    }
    let channels = header.len() - FIXED_COLUMNS.len();
    if channels == 0 {
        return Err(malformed(file, Some(1), "no channel columns"));
    }
    let mut rows = Vec::new();
    let mut confidence = Vec::new();
    let mut success = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| malformed(file, e.position().map(|p| p.line()), e.to_string()))?;
        let line = rec.position().map(|p| p.line());
        let num = |i: usize| -> Result<f64, IngestIssue> {
            let s = rec[i].trim();
            s.parse::<f64>().map_err(|_| {
                malformed(
                    file,
                    line,
                    format!("column `{}` value `{s}` is not a number", &header[i]),
                )
            })
        };
        num(0)?;
        num(1)?;
        confidence.push(num(2)?);
        success.push(match rec[3].trim() {
            "1" | "true" | "True" => true,
            "0" | "false" | "False" => false,
            s => return Err(malformed(file, line, format!("success value `{s}` is not 0/1"))),
        });
        rows.push((4..rec.len()).map(num).collect::<Result<Vec<_>, _>>()?);
    }
    AttributeTimeSeries::from_rows(kind, channels, &rows, confidence, success)
        .map_err(|e| malformed(file, None, e.to_string()))
}

fn file_name(p: &Path) -> String {
    p.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Reads and validates a dataset directory. Structural problems are all
/// collected and returned together; clips that parse but fail preprocessing
/// go to the rejection list.
pub fn ingest(dir: &Path, cfg: &IngestConfig) -> Result<Ingested, IngestError> {
    let mut issues = Vec::new();
    let mut files: BTreeMap<String, BTreeMap<AttributeKind, PathBuf>> = BTreeMap::new();
    let entries = match fs::read_dir(dir) {
        Ok(e) => e,
        Err(e) => {
            return Err(IngestError {
                issues: vec![malformed(&dir.display().to_string(), None, e.to_string())],
            })
        }
    };
    let mut has_labels = false;
    let mut paths: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).collect();
    paths.sort();
    for p in paths {
        let name = file_name(&p);
        if name == LABELS_FILE {
            has_labels = true;
            continue;
        }
        if p.is_dir() || name.starts_with('.') {
            continue;
        }
        let parsed = name
            .strip_suffix(".csv")
            .and_then(|stem| stem.rsplit_once('.'))
            .and_then(|(id, attr)| Some((id.to_string(), attr.parse::<AttributeKind>().ok()?)));
        match parsed {
            Some((id, kind)) if !id.is_empty() => {
                files.entry(id).or_default().insert(kind, p);
            }
            _ => issues.push(IngestIssue::UnknownFile { file: name }),
        }
    }
    if !has_labels {
        if files.is_empty() && issues.is_empty() {
            return Ok(Ingested::default());
        }
        issues.push(IngestIssue::MissingLabels);
        return Err(IngestError { issues });
    }
    let (labels, labelled) = read_labels(&dir.join(LABELS_FILE), cfg, &mut issues);

    let ids: BTreeSet<&String> = labelled.iter().chain(files.keys()).collect();
    let mut complete = Vec::new();
    for id in ids {
        let have = files.get(id);
        let mut ok = true;
        if !labelled.contains(id) && have.is_some() {
            issues.push(IngestIssue::MissingLabel { clip_id: id.clone() });
            ok = false;
        }
        for kind in AttributeKind::ALL {
            if !have.is_some_and(|m| m.contains_key(&kind)) {
                issues.push(IngestIssue::MissingAttribute {
                    clip_id: id.clone(),
                    attribute: kind.to_string(),
                });
                ok = false;
            }
        }
        if ok {
            if let (Some(&label), Some(map)) = (labels.get(id), have) {
                complete.push((id.clone(), label, map.clone()));
            }
        }
    }

    let expected_lm = cfg.layout.channels();
    let parsed: Vec<Result<ClipRecord, Vec<IngestIssue>>> = complete
        .into_par_iter()
        .map(|(clip_id, label, map)| {
            let mut series = BTreeMap::new();
            let mut errs = Vec::new();
            for (kind, path) in map {
                let name = file_name(&path);
                let parsed = fs::read(&path)
                    .map_err(|e| malformed(&name, None, e.to_string()))
                    .and_then(|b| parse_series(&b, kind, &name));
                match parsed {
                    Ok(s) if kind == AttributeKind::Landmarks && s.channels != expected_lm => errs.push(malformed(
                        &name,
                        Some(1),
                        format!("{} landmark channels, the layout needs {expected_lm}", s.channels),
                    )),
                    Ok(s) => {
                        series.insert(kind, s);
                    }
                    Err(e) => errs.push(e),
                }
            }
            if errs.is_empty() {
                Ok(ClipRecord { clip_id, label, series })
            } else {
                Err(errs)
            }
        })
        .collect();
    let mut records = Vec::new();
    for p in parsed {
        match p {
            Ok(r) => records.push(r),
            Err(e) => issues.extend(e),
        }
    }
    if !issues.is_empty() {
        return Err(IngestError { issues });
    }
    let (records, rejected) = screen(records, &cfg.pipeline);
    Ok(Ingested { records, rejected })
}

/// Splits clips into those that pass preprocessing for every attribute and
/// rejections.
pub fn screen(records: Vec<ClipRecord>, cfg: &PipelineConfig) -> (Vec<ClipRecord>, Vec<Rejection>) {
    let mut kept = Vec::new();
    let mut rejected = Vec::new();
    for r in records {
        let bad: Vec<Rejection> = r
            .series
            .iter()
            .filter_map(|(kind, s)| match preprocess(s, cfg.conf_threshold, cfg.min_frames) {
                Ok(_) => None,
                Err(e) => Some(Rejection {
                    clip_id: r.clip_id.clone(),
                    attribute: kind.to_string(),
                    reason: e.to_string(),
                }),
            })
            .collect();
        if bad.is_empty() {
            kept.push(r);
        } else {
            rejected.extend(bad);
        }
    }
    (kept, rejected)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn series_csv_round_trips_exactly() {
        let s = AttributeTimeSeries::from_rows(
            AttributeKind::Gaze,
            2,
            &[vec![0.1, -1e-300], vec![std::f64::consts::PI, 12345.678901234567]],
            vec![0.97, 0.25],
            vec![true, false],
        )
        .unwrap();
        let text = series_to_csv(&s).unwrap();
        let head = String::from_utf8(text.clone()).unwrap();
        assert!(head.starts_with("frame,timestamp,confidence,success,c0,c1\n"));
        assert_eq!(parse_series(&text, AttributeKind::Gaze, "x").unwrap(), s);
    }

    #[test]
    fn bad_rows_name_the_line() {
        let text = b"frame,timestamp,confidence,success,c0\n0,0,1,1,0.5\n1,0.1,1,1,oops\n";
        match parse_series(text, AttributeKind::Pose, "p.csv") {
            Err(IngestIssue::Malformed {
                line: Some(3), file, ..
            }) => assert_eq!(file, "p.csv"),
            other => panic!("{other:?}"),
        }
        let text = b"frame,time,confidence,success,c0\n";
        assert!(parse_series(text, AttributeKind::Pose, "p.csv").is_err());
        let text = b"frame,timestamp,confidence,success,c0\n0,0,1,maybe,0.5\n";
        assert!(parse_series(text, AttributeKind::Pose, "p.csv").is_err());
    }
}
