//! On-disk datasets.
//!
//! ```text
//! <root>/<split>/images/<id>.png      (or image_2/, the KITTI folder name)
//! <root>/<split>/annotations.json     one JSON array, one box per row
//! <root>/<split>/disparity/<id>.png   optional ground truth (synthetic corpora)
//! ```
//!
//! Image ids are file stems, iterated in sorted order.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use depthpatch_core::detect::detect;
use depthpatch_core::{BBox, DetectionSet, DetectorConfig, DisparityMap, ImageTensor, OracleDetector};

use crate::error::{AppError, AppResult};
use crate::io::{decode_image, read_disparity, write_atomic};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(format!("unknown split {s:?} (expected train or test)")),
        }
    }
}

/// One annotated box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawRow")]
pub struct AnnotationRow {
    pub image_id: String,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub score: f64,
    pub class_id: u32,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRow {
    image_id: String,
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
    #[serde(default = "one")]
    score: f64,
    class_id: u32,
}

fn one() -> f64 {
    1.0
}

impl TryFrom<RawRow> for AnnotationRow {
    type Error = String;

    fn try_from(r: RawRow) -> Result<Self, String> {
        if !(r.w > 0.0 && r.h > 0.0) {
            return Err(format!("box for {:?} has non-positive size {}x{}", r.image_id, r.w, r.h));
        }
        if !(r.cx.is_finite() && r.cy.is_finite() && r.w.is_finite() && r.h.is_finite()) {
            return Err(format!("box for {:?} has non-finite coordinates", r.image_id));
        }
        if !(0.0..=1.0).contains(&r.score) {
            return Err(format!("box for {:?} has score {} outside [0, 1]", r.image_id, r.score));
        }
        Ok(Self {
            image_id: r.image_id,
            cx: r.cx,
            cy: r.cy,
            w: r.w,
            h: r.h,
            score: r.score,
            class_id: r.class_id,
        })
    }
}

impl AnnotationRow {
    pub fn from_box(image_id: &str, b: &BBox) -> Self {
        Self {
            image_id: image_id.into(),
            cx: b.cx,
            cy: b.cy,
            w: b.w,
            h: b.h,
            score: b.score,
            class_id: b.class_id,
        }
    }

    pub fn bbox(&self) -> BBox {
        BBox::new(self.cx, self.cy, self.w, self.h, self.score, self.class_id)
    }
}

/// Parse an annotation file; errors carry the line of the offending row.
pub fn parse_annotations(path: &Path, text: &str) -> AppResult<Vec<AnnotationRow>> {
    let fail = |e: serde_json::Error, first_line: usize| {
        let msg = e.to_string();
        let bare = msg.rsplit_once(" at line ").map_or(msg.as_str(), |(m, _)| m);
        AppError::Data(format!(
            "{}: {bare} at line {}",
            path.display(),
            first_line + e.line().saturating_sub(1)
        ))
    };
    let raw: Vec<&serde_json::value::RawValue> = serde_json::from_str(text).map_err(|e| fail(e, 1))?;
    raw.iter()
        .map(|r| {
            // Each raw element borrows from `text`, so its offset gives its line.
            let offset = r.get().as_ptr() as usize - text.as_ptr() as usize;
            let line = 1 + text[..offset].matches('\n').count();
            serde_json::from_str(r.get()).map_err(|e| fail(e, line))
        })
        .collect()
}

/// Write rows as a JSON array with one row per line.
pub fn write_annotations(path: &Path, rows: &[AnnotationRow]) -> AppResult<()> {
    let mut s = String::from("[\n");
    for (i, r) in rows.iter().enumerate() {
        s.push_str("  ");
        s.push_str(&serde_json::to_string(r).map_err(|e| AppError::io(path, e))?);
        s.push_str(if i + 1 < rows.len() { ",\n" } else { "\n" });
    }
    s.push_str("]\n");
    write_atomic(path, s.as_bytes())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub split: Split,
    pub image_ids: Vec<String>,
    pub annotations: PathBuf,
    /// SHA-256 over ids, annotation bytes and image bytes.
    pub content_hash: String,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub items: Vec<(ImageTensor, DetectionSet)>,
}

pub fn split_dir(root: &Path, split: Split) -> PathBuf {
    root.join(split.as_str())
}

fn image_dir(dir: &Path) -> AppResult<PathBuf> {
    for name in ["images", "image_2"] {
        let p = dir.join(name);
        if p.is_dir() {
            return Ok(p);
        }
    }
    Err(AppError::Data(format!(
        "{}: no images/ or image_2/ directory",
        dir.display()
    )))
}

fn sorted_pngs(dir: &Path) -> AppResult<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| AppError::io(dir, e))? {
        let path = entry.map_err(|e| AppError::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("png") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.push((stem.to_string(), path.clone()));
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Load a split with oracle detections post-processed by `det`.
pub fn load_dataset(root: &Path, split: Split, det: &DetectorConfig) -> AppResult<Dataset> {
    det.validate()?;
    let dir = split_dir(root, split);
    let images = sorted_pngs(&image_dir(&dir)?)?;
    let ann_path = dir.join("annotations.json");
    let ann_bytes = fs::read(&ann_path).map_err(|e| AppError::io(&ann_path, e))?;
    let text = String::from_utf8(ann_bytes.clone()).map_err(|e| AppError::io(&ann_path, e))?;
    let rows = parse_annotations(&ann_path, &text)?;

    let ids: BTreeSet<&str> = images.iter().map(|(id, _)| id.as_str()).collect();
    let mut oracle = OracleDetector::default();
    for r in &rows {
        if !ids.contains(r.image_id.as_str()) {
            log::warn!("{}: annotation for unknown image {:?}", ann_path.display(), r.image_id);
        }
        oracle.insert(r.image_id.clone(), r.bbox());
    }

    let mut hasher = Sha256::new();
    let mut items = Vec::with_capacity(images.len());
    for (id, path) in &images {
        let bytes = fs::read(path).map_err(|e| AppError::io(path, e))?;
        hasher.update((id.len() as u64).to_le_bytes());
        hasher.update(id.as_bytes());
        hasher.update((bytes.len() as u64).to_le_bytes());
        hasher.update(&bytes);
        let image = decode_image(path, &bytes)?;
        let dets = detect(&oracle, id, &image, det)?;
        items.push((image, dets));
    }
    hasher.update(&ann_bytes);
    Ok(Dataset {
        manifest: DatasetManifest {
            root: root.to_path_buf(),
            split,
            image_ids: images.into_iter().map(|(id, _)| id).collect(),
            annotations: ann_path,
            content_hash: hex::encode(hasher.finalize()),
        },
        items,
    })
}

/// Ground-truth disparity for every image of a split, in manifest order.
pub fn load_disparities(manifest: &DatasetManifest) -> AppResult<Vec<DisparityMap>> {
    let dir = split_dir(&manifest.root, manifest.split).join("disparity");
    manifest
        .image_ids
        .iter()
        .map(|id| read_disparity(&dir.join(format!("{id}.png"))))
        .collect()
}
