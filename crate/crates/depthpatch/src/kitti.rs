//! KITTI `label_2` text files to the JSON annotation format.
//!
//! Each label line is `type truncated occluded alpha x1 y1 x2 y2 h w l x y z ry [score]`;
//! only the type, the 2-D box and the optional score are used.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use depthpatch_core::BBox;

use crate::dataset::AnnotationRow;
use crate::error::{AppError, AppResult};

pub fn default_class_map() -> BTreeMap<String, u32> {
    [("Car", 0), ("Pedestrian", 1), ("Cyclist", 2)]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
}

/// Parse `NAME=ID` pairs.
pub fn parse_class_map(pairs: &[String]) -> AppResult<BTreeMap<String, u32>> {
    pairs
        .iter()
        .map(|p| {
            let (name, id) = p
                .split_once('=')
                .ok_or_else(|| AppError::Config(format!("class mapping {p:?} is not NAME=ID")))?;
            let id = id
                .trim()
                .parse()
                .map_err(|_| AppError::Config(format!("class mapping {p:?}: bad id")))?;
            Ok((name.trim().to_string(), id))
        })
        .collect()
}

#[derive(Debug, Default, Clone, PartialEq)]
pub struct Conversion {
    pub rows: Vec<AnnotationRow>,
    pub files: usize,
    /// Objects whose type has no class id, by type.
    pub skipped: BTreeMap<String, usize>,
}

/// Parse one label file's contents.
pub fn parse_label_file(
    image_id: &str,
    path: &Path,
    text: &str,
    classes: &BTreeMap<String, u32>,
    out: &mut Conversion,
) -> AppResult<()> {
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let bad = |what: &str| AppError::Data(format!("{}:{}: {what}", path.display(), n + 1));
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 15 && f.len() != 16 {
            return Err(bad(&format!("expected 15 or 16 fields, found {}", f.len())));
        }
        let Some(&class_id) = classes.get(f[0]) else {
            *out.skipped.entry(f[0].to_string()).or_default() += 1;
            continue;
        };
        let num = |i: usize| -> AppResult<f64> {
            f[i].parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| bad(&format!("field {} ({:?}) is not a number", i + 1, f[i])))
        };
        let (x1, y1, x2, y2) = (num(4)?, num(5)?, num(6)?, num(7)?);
        if !(x2 > x1 && y2 > y1) {
            return Err(bad("degenerate 2-D box"));
        }
        let score = if f.len() == 16 { num(15)?.clamp(0.0, 1.0) } else { 1.0 };
        // KITTI corners are inclusive pixel indices.
        let b = BBox::from_corners(x1, y1, x2 + 1.0, y2 + 1.0, score, class_id);
        out.rows.push(AnnotationRow::from_box(image_id, &b));
    }
    Ok(())
}

/// Convert every `*.txt` in `label_dir`, in sorted order.
pub fn convert_label_dir(label_dir: &Path, classes: &BTreeMap<String, u32>) -> AppResult<Conversion> {
    let mut files: Vec<_> = fs::read_dir(label_dir)
        .map_err(|e| AppError::io(label_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().and_then(|e| e.to_str()) == Some("txt"))
        .collect();
    files.sort();
    let mut out = Conversion::default();
    for path in files {
        let id = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| AppError::Data(format!("{}: bad file name", path.display())))?
            .to_string();
        let text = fs::read_to_string(&path).map_err(|e| AppError::io(&path, e))?;
        parse_label_file(&id, &path, &text, classes, &mut out)?;
        out.files += 1;
    }
    Ok(out)
}
