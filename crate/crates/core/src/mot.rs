//! MOTChallenge text files in normalized panoramic coordinates, plus the
//! embedding sidecar.
//!
//! A record line is
//!
//! ```text
//! frame,id,bb_left,bb_top,bb_width,bb_height,conf,-1,-1,-1
//! ```
//!
//! with `id = -1` for detections without identity. Coordinates are fractions
//! of the panorama; `bb_left` is canonicalized to `[0, 1)`, so a box crossing
//! the seam has `bb_left + bb_width > 1`. Reals are written in the shortest
//! form that parses back to the same `f64`.
//!
//! The sidecar holds one line per record, in record order: the embedding as
//! comma-separated reals (an empty line for an empty embedding).

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::detection::Detection;
use crate::error::{Error, Result};
use crate::geometry::{wrap_unit, PanoBox};
use crate::metrics::{Labeled, Sequence};
use crate::tracker::FrameResult;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotRecord {
    pub frame: u64,
    pub id: i64,
    pub left: f64,
    pub top: f64,
    pub width: f64,
    pub height: f64,
    pub conf: f64,
}

fn parse_error(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

impl MotRecord {
    pub fn from_box(frame: u64, id: i64, b: &PanoBox, conf: f64) -> Self {
        Self {
            frame,
            id,
            left: wrap_unit(b.cu() - b.w() / 2.0),
            top: b.cv() - b.h() / 2.0,
            width: b.w(),
            height: b.h(),
            conf,
        }
    }

    pub fn to_box(&self) -> Result<PanoBox> {
        PanoBox::new(
            self.left + self.width / 2.0,
            self.top + self.height / 2.0,
            self.width,
            self.height,
        )
    }

    /// Parses one line; `line` is the 1-based line number used in errors.
    pub fn parse(text: &str, line: usize) -> Result<Self> {
        let fields: Vec<&str> = text.split(',').map(str::trim).collect();
        if fields.len() != 10 {
            return Err(parse_error(line, format!("expected 10 fields, found {}", fields.len())));
        }
        let real = |k: usize, name: &str| -> Result<f64> {
            let v: f64 = fields[k]
                .parse()
                .map_err(|_| parse_error(line, format!("{name} `{}` is not a number", fields[k])))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(parse_error(line, format!("{name} is not finite")))
            }
        };
        let frame: u64 = fields[0]
            .parse()
            .map_err(|_| parse_error(line, format!("frame `{}` is not a positive integer", fields[0])))?;
        if frame == 0 {
            return Err(parse_error(line, "frame numbers start at 1"));
        }
        let id: i64 = fields[1]
            .parse()
            .map_err(|_| parse_error(line, format!("id `{}` is not an integer", fields[1])))?;
        let rec = Self {
            frame,
            id,
            left: real(2, "bb_left")?,
            top: real(3, "bb_top")?,
            width: real(4, "bb_width")?,
            height: real(5, "bb_height")?,
            conf: real(6, "conf")?,
        };
        for k in 7..10 {
            real(k, "trailing field")?;
        }
        if !(rec.width > 0.0 && rec.height > 0.0) {
            return Err(parse_error(line, "box width and height must be positive"));
        }
        if !(0.0..=1.0).contains(&rec.conf) {
            return Err(parse_error(line, format!("conf {} outside [0, 1]", rec.conf)));
        }
        Ok(rec)
    }

    pub fn to_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},-1,-1,-1",
            self.frame, self.id, self.left, self.top, self.width, self.height, self.conf
        )
    }
}

pub fn parse_mot(text: &str) -> Result<Vec<MotRecord>> {
    text.lines()
        .enumerate()
        .map(|(k, l)| MotRecord::parse(l, k + 1))
        .collect()
}

pub fn format_mot(records: &[MotRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&r.to_line());
        out.push('\n');
    }
    out
}

pub fn parse_sidecar(text: &str) -> Result<Vec<Vec<f64>>> {
    text.lines()
        .enumerate()
        .map(|(k, l)| {
            if l.trim().is_empty() {
                return Ok(Vec::new());
            }
            l.split(',')
                .map(|f| {
                    f.trim()
                        .parse::<f64>()
                        .ok()
                        .filter(|v| v.is_finite())
                        .ok_or_else(|| parse_error(k + 1, format!("embedding value `{f}` is not a finite number")))
                })
                .collect()
        })
        .collect()
}

pub fn format_sidecar(embeddings: &[&[f64]]) -> String {
    let mut out = String::new();
    for e in embeddings {
        for (k, v) in e.iter().enumerate() {
            if k > 0 {
                out.push(',');
            }
            let _ = write!(out, "{v}");
        }
        out.push('\n');
    }
    out
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Input(format!("cannot read {}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Input(format!("cannot write {}: {e}", path.display())))
}

pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<MotRecord>> {
    parse_mot(&read_text(path.as_ref())?)
}

pub fn write_records(path: impl AsRef<Path>, records: &[MotRecord]) -> Result<()> {
    write_text(path.as_ref(), &format_mot(records))
}

/// Per-frame detections; index `k` holds frame `k + 1`.
pub type DetectionFrames = Vec<Vec<Detection>>;

/// Groups records by frame, joining embeddings line by line.
///
/// The result covers frames `1..=max(frame, n_frames)`; frames without
/// records are empty. Within a frame, file order is kept.
pub fn detections_from_records(
    records: &[MotRecord],
    embeddings: Option<Vec<Vec<f64>>>,
    n_frames: usize,
) -> Result<DetectionFrames> {
    if let Some(e) = &embeddings {
        if e.len() != records.len() {
            return Err(Error::Input(format!(
                "sidecar has {} lines for {} records",
                e.len(),
                records.len()
            )));
        }
    }
    let last = records.iter().map(|r| r.frame as usize).max().unwrap_or(0).max(n_frames);
    let mut frames: DetectionFrames = vec![Vec::new(); last];
    let mut embeddings = embeddings.map(Vec::into_iter);
    for (k, r) in records.iter().enumerate() {
        let bbox = r.to_box().map_err(|e| parse_error(k + 1, e.to_string()))?;
        let embedding = embeddings.as_mut().and_then(Iterator::next).unwrap_or_default();
        frames[r.frame as usize - 1].push(Detection::new(bbox, r.conf, embedding));
    }
    Ok(frames)
}

pub fn read_detections(path: impl AsRef<Path>, sidecar: Option<&Path>) -> Result<DetectionFrames> {
    let records = read_records(path)?;
    let embeddings = sidecar.map(|p| read_text(p).and_then(|t| parse_sidecar(&t))).transpose()?;
    detections_from_records(&records, embeddings, 0)
}

/// Detection records with `id = -1`, frame by frame.
pub fn detection_records(frames: &[Vec<Detection>]) -> Vec<MotRecord> {
    frames
        .iter()
        .enumerate()
        .flat_map(|(k, ds)| ds.iter().map(move |d| MotRecord::from_box(k as u64 + 1, -1, &d.bbox, d.score)))
        .collect()
}

pub fn write_detections(path: impl AsRef<Path>, sidecar: Option<&Path>, frames: &[Vec<Detection>]) -> Result<()> {
    write_records(path, &detection_records(frames))?;
    if let Some(p) = sidecar {
        let embeddings: Vec<&[f64]> = frames.iter().flatten().map(|d| d.embedding.as_slice()).collect();
        write_text(p, &format_sidecar(&embeddings))?;
    }
    Ok(())
}

/// Builds a labelled sequence; records with negative ids are rejected.
pub fn sequence_from_records(records: &[MotRecord], n_frames: usize) -> Result<Sequence> {
    let mut labelled = Vec::with_capacity(records.len());
    for (k, r) in records.iter().enumerate() {
        if r.id < 0 {
            return Err(parse_error(k + 1, "labelled records need a non-negative id"));
        }
        let bbox = r.to_box().map_err(|e| parse_error(k + 1, e.to_string()))?;
        labelled.push((r.frame, Labeled::new(r.id as u64, bbox)));
    }
    let last = records.iter().map(|r| r.frame as usize).max().unwrap_or(0).max(n_frames);
    Sequence::from_records(labelled, last)
}

pub fn read_sequence(path: impl AsRef<Path>) -> Result<Sequence> {
    sequence_from_records(&read_records(path)?, 0)
}

/// Ground-truth style records with confidence 1.
pub fn sequence_records(seq: &Sequence) -> Vec<MotRecord> {
    seq.frames()
        .iter()
        .enumerate()
        .flat_map(|(k, fr)| fr.iter().map(move |l| MotRecord::from_box(k as u64 + 1, l.id as i64, &l.bbox, 1.0)))
        .collect()
}

pub fn track_records(results: &[FrameResult]) -> Vec<MotRecord> {
    results
        .iter()
        .flat_map(|r| {
            r.outputs
                .iter()
                .map(move |o| MotRecord::from_box(r.frame, o.id.0 as i64, &o.bbox, o.score.clamp(0.0, 1.0)))
        })
        .collect()
}
