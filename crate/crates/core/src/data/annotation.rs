//! Annotation records (one JSON object per line) with schema validation that
//! names the offending field.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::mask::{rle_decode, rle_encode, InstanceMask, MaskSet, Rle};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceAnnotation {
    pub index: usize,
    pub text: String,
    pub mask: Rle,
    /// `[x, y, w, h]` of the tight bounding box.
    pub bbox: [usize; 4],
}

impl InstanceAnnotation {
    pub fn new(index: usize, text: impl Into<String>, mask: &InstanceMask) -> Self {
        let bbox = mask.bbox().unwrap_or([0, 0, 0, 0]);
        Self { index, text: text.into(), mask: rle_encode(mask), bbox }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedImage {
    pub image_id: String,
    pub width: usize,
    pub height: usize,
    pub global_text: String,
    pub instances: Vec<InstanceAnnotation>,
}

impl AnnotatedImage {
    pub fn mask_set(&self) -> Result<MaskSet> {
        let masks = self.instances.iter().map(|i| i.mask.decode()).collect::<Result<Vec<_>>>()?;
        MaskSet::new(self.width, self.height, masks)
    }

    pub fn texts(&self) -> Vec<String> {
        self.instances.iter().map(|i| i.text.clone()).collect()
    }
}

fn schema(record: usize, field: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Schema { record, field: field.into(), message: message.into() }
}

fn field<'a>(obj: &'a Value, key: &str, path: &str, record: usize) -> Result<&'a Value> {
    obj.get(key).ok_or_else(|| schema(record, join(path, key), "missing"))
}

fn join(path: &str, key: &str) -> String {
    if path.is_empty() {
        key.to_string()
    } else {
        format!("{path}.{key}")
    }
}

fn as_usize(v: &Value, path: &str, record: usize) -> Result<usize> {
    v.as_u64().map(|u| u as usize).ok_or_else(|| schema(record, path, "expected a non-negative integer"))
}

fn as_str<'a>(v: &'a Value, path: &str, record: usize) -> Result<&'a str> {
    v.as_str().ok_or_else(|| schema(record, path, "expected a string"))
}

/// Parses `{h, w, runs}` and checks it decodes to an `h × w` mask.
pub fn parse_rle(v: &Value, path: &str, record: usize) -> Result<Rle> {
    let h = as_usize(field(v, "h", path, record)?, &join(path, "h"), record)?;
    let w = as_usize(field(v, "w", path, record)?, &join(path, "w"), record)?;
    let runs_path = join(path, "runs");
    let runs_v = field(v, "runs", path, record)?;
    let arr = runs_v.as_array().ok_or_else(|| schema(record, &runs_path, "expected an array"))?;
    let runs = arr
        .iter()
        .map(|r| {
            r.as_u64()
                .and_then(|u| u32::try_from(u).ok())
                .ok_or_else(|| schema(record, &runs_path, "expected 32-bit run lengths"))
        })
        .collect::<Result<Vec<u32>>>()?;
    rle_decode(&runs, h, w).map_err(|e| schema(record, &runs_path, e.to_string()))?;
    Ok(Rle { h, w, runs })
}

/// Parses one instance object. `full` requires the stored-record fields
/// `index` and `bbox`; requests from clients may omit them.
pub fn parse_instance(
    v: &Value,
    path: &str,
    record: usize,
    position: usize,
    dims: (usize, usize),
    full: bool,
) -> Result<InstanceAnnotation> {
    if !v.is_object() {
        return Err(schema(record, path, "expected an object"));
    }
    let text = as_str(field(v, "text", path, record)?, &join(path, "text"), record)?.to_string();
    let mask_path = join(path, "mask");
    let mask = parse_rle(field(v, "mask", path, record)?, &mask_path, record)?;
    if (mask.h, mask.w) != dims {
        return Err(schema(
            record,
            mask_path,
            format!("mask is {}×{}, image is {}×{}", mask.h, mask.w, dims.0, dims.1),
        ));
    }
    let decoded = mask.decode()?;
    let index = match (v.get("index"), full) {
        (Some(i), _) => as_usize(i, &join(path, "index"), record)?,
        (None, true) => return Err(schema(record, join(path, "index"), "missing")),
        (None, false) => position,
    };
    let bbox = match (v.get("bbox"), full) {
        (Some(b), _) => {
            let bp = join(path, "bbox");
            let arr = b.as_array().filter(|a| a.len() == 4).ok_or_else(|| schema(record, &bp, "expected [x, y, w, h]"))?;
            let mut out = [0usize; 4];
            for (o, x) in out.iter_mut().zip(arr) {
                *o = as_usize(x, &bp, record)?;
            }
            out
        }
        (None, true) => return Err(schema(record, join(path, "bbox"), "missing")),
        (None, false) => decoded.bbox().unwrap_or([0, 0, 0, 0]),
    };
    Ok(InstanceAnnotation { index, text, mask, bbox })
}

/// Validates and converts one JSON record.
pub fn parse_record(v: &Value, record: usize) -> Result<AnnotatedImage> {
    if !v.is_object() {
        return Err(schema(record, "", "expected an object"));
    }
    let image_id = as_str(field(v, "image_id", "", record)?, "image_id", record)?.to_string();
    let width = as_usize(field(v, "width", "", record)?, "width", record)?;
    let height = as_usize(field(v, "height", "", record)?, "height", record)?;
    let global_text = as_str(field(v, "global_text", "", record)?, "global_text", record)?.to_string();
    let arr = field(v, "instances", "", record)?
        .as_array()
        .ok_or_else(|| schema(record, "instances", "expected an array"))?;
    let instances = arr
        .iter()
        .enumerate()
        .map(|(k, inst)| parse_instance(inst, &format!("instances[{k}]"), record, k, (height, width), true))
        .collect::<Result<Vec<_>>>()?;
    Ok(AnnotatedImage { image_id, width, height, global_text, instances })
}

pub fn to_jsonl(records: &[AnnotatedImage]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn from_jsonl(text: &str) -> Result<Vec<AnnotatedImage>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            let v: Value = serde_json::from_str(line).map_err(|e| schema(i, "", format!("malformed JSON: {e}")))?;
            parse_record(&v, i)
        })
        .collect()
}

pub fn write_annotations(records: &[AnnotatedImage], path: &Path) -> Result<()> {
    crate::io::write_atomic(path, to_jsonl(records)?.as_bytes())
}

pub fn read_annotations(path: &Path) -> Result<Vec<AnnotatedImage>> {
    from_jsonl(&std::fs::read_to_string(path)?)
}
