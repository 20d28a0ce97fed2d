//! JSONL annotation and detection files.
//!
//! Annotations: one image per line,
//! `{"image": "images/000000.png", "boxes": [{"x1":..,"y1":..,"x2":..,"y2":..,"class":0}]}`.
//! Detections: one box per line,
//! `{"image": ..., "x1":..,"y1":..,"x2":..,"y2":..,"class":0,"score":0.93}`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::decode::Detection;
use crate::grid::{BBox, GeometryError};

#[derive(Debug, Error)]
pub enum AnnotationError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("line {line}: invalid JSON: {message}")]
    Json { line: usize, message: String },
    #[error("line {line}: field `{field}`: {message}")]
    Field { line: usize, field: String, message: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    /// Image path relative to the annotation file.
    pub image: String,
    pub boxes: Vec<BBox>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image: String,
    pub detection: Detection,
}

fn field_err(line: usize, field: impl Into<String>, message: impl Into<String>) -> AnnotationError {
    AnnotationError::Field { line, field: field.into(), message: message.into() }
}

fn number(obj: &Map<String, Value>, key: &str, line: usize, prefix: &str) -> Result<f64, AnnotationError> {
    match obj.get(key) {
        None => Err(field_err(line, format!("{prefix}{key}"), "missing")),
        Some(v) => v.as_f64().ok_or_else(|| field_err(line, format!("{prefix}{key}"), format!("expected a number, got {v}"))),
    }
}

fn class_id(obj: &Map<String, Value>, line: usize, prefix: &str) -> Result<usize, AnnotationError> {
    let field = format!("{prefix}class");
    let v = obj.get("class").ok_or_else(|| field_err(line, &field, "missing"))?;
    v.as_u64().map(|c| c as usize).ok_or_else(|| field_err(line, &field, format!("expected a class id, got {v}")))
}

fn parse_box(obj: &Map<String, Value>, line: usize, prefix: &str) -> Result<BBox, AnnotationError> {
    let x1 = number(obj, "x1", line, prefix)?;
    let y1 = number(obj, "y1", line, prefix)?;
    let x2 = number(obj, "x2", line, prefix)?;
    let y2 = number(obj, "y2", line, prefix)?;
    let class = class_id(obj, line, prefix)?;
    BBox::new(x1, y1, x2, y2, class).map_err(|e| match e {
        GeometryError::InvalidClass(_) => field_err(line, format!("{prefix}class"), e.to_string()),
        _ => field_err(line, prefix.trim_end_matches('.'), e.to_string()),
    })
}

fn parse_object(text: &str, line: usize) -> Result<Map<String, Value>, AnnotationError> {
    match serde_json::from_str::<Value>(text) {
        Ok(Value::Object(m)) => Ok(m),
        Ok(_) => Err(AnnotationError::Json { line, message: "expected an object".into() }),
        Err(e) => Err(AnnotationError::Json { line, message: e.to_string() }),
    }
}

fn image_field(obj: &Map<String, Value>, line: usize) -> Result<String, AnnotationError> {
    match obj.get("image") {
        Some(Value::String(s)) => Ok(s.clone()),
        Some(v) => Err(field_err(line, "image", format!("expected a string, got {v}"))),
        None => Err(field_err(line, "image", "missing")),
    }
}

/// Parse annotation JSONL text. Blank lines are ignored; line numbers in
/// errors are 1-based.
pub fn parse_annotations(text: &str) -> Result<Vec<AnnotationRecord>, AnnotationError> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = n + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let obj = parse_object(raw, line)?;
        let image = image_field(&obj, line)?;
        let boxes = match obj.get("boxes") {
            Some(Value::Array(items)) => items
                .iter()
                .enumerate()
                .map(|(b, item)| {
                    let prefix = format!("boxes[{b}].");
                    match item {
                        Value::Object(m) => parse_box(m, line, &prefix),
                        _ => Err(field_err(line, format!("boxes[{b}]"), "expected an object")),
                    }
                })
                .collect::<Result<Vec<_>, _>>()?,
            Some(_) => return Err(field_err(line, "boxes", "expected an array")),
            None => return Err(field_err(line, "boxes", "missing")),
        };
        out.push(AnnotationRecord { image, boxes });
    }
    Ok(out)
}

fn box_json(b: &BBox) -> Map<String, Value> {
    let mut m = Map::new();
    m.insert("x1".into(), json!(b.x1));
    m.insert("y1".into(), json!(b.y1));
    m.insert("x2".into(), json!(b.x2));
    m.insert("y2".into(), json!(b.y2));
    m.insert("class".into(), json!(b.class_id));
    m
}

pub fn format_annotations(records: &[AnnotationRecord]) -> String {
    let mut s = String::new();
    for r in records {
        let boxes: Vec<Value> = r.boxes.iter().map(|b| Value::Object(box_json(b))).collect();
        s.push_str(&json!({ "image": r.image, "boxes": boxes }).to_string());
        s.push('\n');
    }
    s
}

fn read_text(path: &Path) -> Result<String, AnnotationError> {
    fs::read_to_string(path).map_err(|source| AnnotationError::Io { path: path.to_path_buf(), source })
}

fn write_text(path: &Path, text: &str) -> Result<(), AnnotationError> {
    let io = |source| AnnotationError::Io { path: path.to_path_buf(), source };
    let mut f = fs::File::create(path).map_err(io)?;
    f.write_all(text.as_bytes()).map_err(io)
}

pub fn read_annotations(path: impl AsRef<Path>) -> Result<Vec<AnnotationRecord>, AnnotationError> {
    parse_annotations(&read_text(path.as_ref())?)
}

pub fn write_annotations(path: impl AsRef<Path>, records: &[AnnotationRecord]) -> Result<(), AnnotationError> {
    write_text(path.as_ref(), &format_annotations(records))
}

pub fn format_detections(records: &[DetectionRecord]) -> String {
    let mut s = String::new();
    for r in records {
        let mut m = Map::new();
        m.insert("image".into(), json!(r.image));
        m.extend(box_json(&r.detection.bbox));
        m.insert("score".into(), json!(r.detection.score));
        s.push_str(&Value::Object(m).to_string());
        s.push('\n');
    }
    s
}

pub fn parse_detections(text: &str) -> Result<Vec<DetectionRecord>, AnnotationError> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = n + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let obj = parse_object(raw, line)?;
        let image = image_field(&obj, line)?;
        let bbox = parse_box(&obj, line, "")?;
        let score = number(&obj, "score", line, "")?;
        out.push(DetectionRecord { image, detection: Detection { bbox, score } });
    }
    Ok(out)
}

pub fn read_detections(path: impl AsRef<Path>) -> Result<Vec<DetectionRecord>, AnnotationError> {
    parse_detections(&read_text(path.as_ref())?)
}

pub fn write_detections(path: impl AsRef<Path>, records: &[DetectionRecord]) -> Result<(), AnnotationError> {
    write_text(path.as_ref(), &format_detections(records))
}
