//! Detection post-processing and the detector backends that seed mask placement.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::bbox::{iou, BBox};
use crate::error::{Error, Result};
use crate::image::ImageTensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    pub objectness_threshold: f64,
    pub nms_iou_threshold: f64,
    pub max_detections: usize,
    /// `None` keeps every class.
    pub target_class: Option<u32>,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            objectness_threshold: 0.5,
            nms_iou_threshold: 0.4,
            max_detections: 14,
            target_class: None,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        let open_unit = |v: f64| v > 0.0 && v < 1.0;
        if !open_unit(self.objectness_threshold) {
            return Err(Error::Config(format!(
                "objectness_threshold must be in (0, 1), got {}",
                self.objectness_threshold
            )));
        }
        if !open_unit(self.nms_iou_threshold) {
            return Err(Error::Config(format!(
                "nms_iou_threshold must be in (0, 1), got {}",
                self.nms_iou_threshold
            )));
        }
        if self.max_detections == 0 {
            return Err(Error::Config("max_detections must be at least 1".into()));
        }
        Ok(())
    }
}

/// Post-processed detections for one image, sorted by descending score.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DetectionSet {
    pub image_id: String,
    pub boxes: Vec<BBox>,
}

impl DetectionSet {
    pub fn empty(image_id: impl Into<String>) -> Self {
        Self {
            image_id: image_id.into(),
            boxes: Vec::new(),
        }
    }

    pub fn of_class(&self, class_id: u32) -> impl Iterator<Item = &BBox> {
        self.boxes.iter().filter(move |b| b.class_id == class_id)
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

/// Greedy non-maximum suppression within each class.
///
/// Boxes are visited in descending score order (ties keep input order); a box
/// survives when its IoU with every kept box of the same class is at most
/// `iou_threshold`.
pub fn nms(boxes: &[BBox], iou_threshold: f64) -> Vec<BBox> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| {
        boxes[b]
            .score
            .partial_cmp(&boxes[a].score)
            .unwrap_or(core::cmp::Ordering::Equal)
    });
    let mut kept: Vec<BBox> = Vec::new();
    for i in order {
        let cand = &boxes[i];
        let suppressed = kept
            .iter()
            .any(|k| k.class_id == cand.class_id && iou(k, cand) > iou_threshold);
        if !suppressed {
            kept.push(*cand);
        }
    }
    kept
}

/// Threshold, class filter, NMS and cap, in that order.
pub fn postprocess(image_id: &str, raw: &[BBox], cfg: &DetectorConfig) -> DetectionSet {
    let candidates: Vec<BBox> = raw
        .iter()
        .filter(|b| b.is_valid() && b.score.is_finite())
        .filter(|b| b.score >= cfg.objectness_threshold)
        .filter(|b| cfg.target_class.map_or(true, |c| b.class_id == c))
        .copied()
        .collect();
    let mut boxes = nms(&candidates, cfg.nms_iou_threshold);
    boxes.truncate(cfg.max_detections);
    DetectionSet {
        image_id: image_id.into(),
        boxes,
    }
}

/// A source of raw (pre-NMS) boxes.
///
/// Neural adapters implement this over their network output; the oracle
/// implementation replays annotation files.
pub trait Detector: Send + Sync {
    fn name(&self) -> &str;
    fn raw_detections(&self, image_id: &str, image: &ImageTensor) -> Result<Vec<BBox>>;
}

/// Run a detector and post-process its output.
pub fn detect(
    detector: &dyn Detector,
    image_id: &str,
    image: &ImageTensor,
    cfg: &DetectorConfig,
) -> Result<DetectionSet> {
    cfg.validate()?;
    let raw = detector.raw_detections(image_id, image)?;
    Ok(postprocess(image_id, &raw, cfg))
}

/// Replays ground-truth boxes keyed by image id.
#[derive(Debug, Clone, Default)]
pub struct OracleDetector {
    boxes: BTreeMap<String, Vec<BBox>>,
}

impl OracleDetector {
    pub fn new(boxes: BTreeMap<String, Vec<BBox>>) -> Self {
        Self { boxes }
    }

    pub fn insert(&mut self, image_id: impl Into<String>, b: BBox) {
        self.boxes.entry(image_id.into()).or_default().push(b);
    }

    pub fn contains(&self, image_id: &str) -> bool {
        self.boxes.contains_key(image_id)
    }
}

impl Detector for OracleDetector {
    fn name(&self) -> &str {
        "oracle"
    }

    fn raw_detections(&self, image_id: &str, _image: &ImageTensor) -> Result<Vec<BBox>> {
        match self.boxes.get(image_id) {
            Some(b) => Ok(b.clone()),
            None => {
                log::warn!("no annotations for image {image_id}; using an empty detection set");
                Ok(Vec::new())
            }
        }
    }
}
