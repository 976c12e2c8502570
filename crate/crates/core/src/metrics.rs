//! Attack evaluation: mean depth error, ratio of affected pixels and MSE.
//!
//! The reference disparity is always the victim's prediction on the clean
//! image, and the evaluation region is the union of focus masks of the clean
//! detections, so a patch cannot move the goalposts.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{masked_mean_abs_diff, BinaryMask, Denominator, DisparityMap, Patch};
use crate::model::{forward_with, DepthModel};
use crate::pipeline::{apply_patch, sample_transform, TransformRanges, TransformSample};
use crate::attack::SceneSample;

/// A pixel counts as affected when its disparity moves by strictly more than this.
pub const AFFECTED_THRESHOLD: f64 = 0.1;

fn check_shapes(d: &DisparityMap, d_adv: &DisparityMap) -> Result<()> {
    if d.shape() != d_adv.shape() {
        return Err(Error::ShapeMismatch {
            expected: d.shape(),
            found: d_adv.shape(),
        });
    }
    Ok(())
}

/// Mean absolute disparity change over the focus mask.
pub fn mean_depth_error(d: &DisparityMap, d_adv: &DisparityMap, m_f: &BinaryMask) -> Result<f64> {
    masked_mean_abs_diff(d, d_adv, m_f, Denominator::MaskArea)
}

/// Fraction of focus pixels whose disparity moved by more than `threshold`.
pub fn affected_ratio(
    d: &DisparityMap,
    d_adv: &DisparityMap,
    m_f: &BinaryMask,
    threshold: f64,
) -> Result<f64> {
    check_shapes(d, d_adv)?;
    if m_f.shape() != d.shape() {
        return Err(Error::ShapeMismatch {
            expected: d.shape(),
            found: m_f.shape(),
        });
    }
    let area = m_f.count();
    if area == 0 {
        return Err(Error::EmptyMask);
    }
    let hit = d
        .data()
        .iter()
        .zip(d_adv.data())
        .zip(m_f.data())
        .filter(|((a, b), &on)| on && libm::fabs(*a - *b) > threshold)
        .count();
    Ok(hit as f64 / area as f64)
}

/// Full-image mean squared disparity difference.
pub fn mse(d: &DisparityMap, d_adv: &DisparityMap) -> Result<f64> {
    check_shapes(d, d_adv)?;
    let n = d.data().len() as f64;
    Ok(d.data()
        .iter()
        .zip(d_adv.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

/// How patches are placed at evaluation time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum EvalTransforms {
    /// Centered, unrotated, no photometric change.
    Identity,
    /// Scene `i` draws its transforms from stream `i` of `seed`.
    Sampled { seed: u64, ranges: TransformRanges },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub patch_scale_factor: f64,
    pub transforms: EvalTransforms,
    pub threshold: f64,
    /// Evaluate without pasting anything; every metric must come out zero.
    pub suppress_patch: bool,
    pub resize: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            patch_scale_factor: 0.2,
            transforms: EvalTransforms::Identity,
            threshold: AFFECTED_THRESHOLD,
            suppress_patch: false,
            resize: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub image_id: String,
    pub e_d: f64,
    pub r_a: f64,
    pub mse: f64,
    /// Focus-mask pixels the metrics were computed over.
    pub mask_area: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalAggregate {
    pub e_d: f64,
    pub r_a: f64,
    pub mse: f64,
    pub scenes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub records: Vec<EvalRecord>,
    pub aggregate: EvalAggregate,
    /// Scenes without any target detection.
    pub skipped: Vec<String>,
}

/// Evaluate one scene; `None` when it has no detection to attack.
///
/// `index` selects the transform stream in sampled mode.
pub fn evaluate_scene(
    patch: &Patch,
    sample: &SceneSample,
    index: usize,
    model: &dyn DepthModel,
    cfg: &EvalConfig,
) -> Result<Option<EvalRecord>> {
    let focus = sample.focus_union();
    if focus.is_empty() {
        return Ok(None);
    }
    let adv = if cfg.suppress_patch {
        sample.clean.clone()
    } else {
        let samples = match &cfg.transforms {
            EvalTransforms::Identity => {
                sample.boxes.iter().map(|_| TransformSample::identity()).collect()
            }
            EvalTransforms::Sampled { seed, ranges } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                rng.set_stream(index as u64);
                sample
                    .boxes
                    .iter()
                    .map(|_| sample_transform(&mut rng, ranges, patch.side()))
                    .collect::<Result<Vec<_>>>()?
            }
        };
        let ex = apply_patch(&sample.image, patch, &sample.boxes, &samples, cfg.patch_scale_factor)?;
        forward_with(model, &ex.image, cfg.resize)?
    };
    Ok(Some(EvalRecord {
        image_id: sample.image_id.clone(),
        e_d: mean_depth_error(&sample.clean, &adv, &focus)?,
        r_a: affected_ratio(&sample.clean, &adv, &focus, cfg.threshold)?,
        mse: mse(&sample.clean, &adv)?,
        mask_area: focus.count(),
    }))
}

/// Unweighted mean over scenes.
pub fn aggregate(records: &[EvalRecord]) -> Result<EvalAggregate> {
    if records.is_empty() {
        return Err(Error::NothingToEvaluate(
            "no scene contains a target detection".into(),
        ));
    }
    let n = records.len() as f64;
    let mean = |f: fn(&EvalRecord) -> f64| records.iter().map(f).sum::<f64>() / n;
    Ok(EvalAggregate {
        e_d: mean(|r| r.e_d),
        r_a: mean(|r| r.r_a),
        mse: mean(|r| r.mse),
        scenes: records.len(),
    })
}

/// Evaluate `patch` on every scene that has a target detection.
pub fn evaluate_run(
    patch: &Patch,
    samples: &[SceneSample],
    model: &dyn DepthModel,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    if !(cfg.patch_scale_factor > 0.0 && cfg.patch_scale_factor < 1.0) {
        return Err(Error::Config(format!(
            "patch_scale_factor must be in (0, 1), got {}",
            cfg.patch_scale_factor
        )));
    }
    if let EvalTransforms::Sampled { ranges, .. } = &cfg.transforms {
        ranges.validate()?;
    }
    let mut records = Vec::new();
    let mut skipped = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        match evaluate_scene(patch, s, i, model, cfg)? {
            Some(r) => records.push(r),
            None => skipped.push(s.image_id.clone()),
        }
    }
    let aggregate = aggregate(&records)?;
    Ok(EvalReport {
        records,
        aggregate,
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bbox::BBox;
    use crate::image::ImageTensor;
    use crate::model::{ToyConfig, ToyModel};
    use alloc::vec;
    use proptest::prelude::*;

    fn shifted(d: &DisparityMap, delta: f64) -> DisparityMap {
        DisparityMap::from_fn(d.height(), d.width(), |y, x| d.get(y, x) + delta).unwrap()
    }

    #[test]
    fn uniform_offset_gives_offset() {
        let d = DisparityMap::filled(8, 8, 0.2).unwrap();
        let m = BinaryMask::from_fn(8, 8, |y, _| y < 4);
        let e = mean_depth_error(&d, &shifted(&d, 0.55), &m).unwrap();
        assert!((e - 0.55).abs() < 1e-12);
        assert_eq!(mean_depth_error(&d, &d, &m).unwrap(), 0.0);
    }

    #[test]
    fn uniform_mse() {
        let d = DisparityMap::filled(8, 8, 0.1).unwrap();
        assert!((mse(&d, &shifted(&d, 0.7)).unwrap() - 0.49).abs() < 1e-12);
        assert_eq!(mse(&d, &d).unwrap(), 0.0);
    }

    #[test]
    fn affected_ratio_counts() {
        let d = DisparityMap::filled(4, 4, 0.0).unwrap();
        let all = BinaryMask::ones(4, 4);
        assert_eq!(affected_ratio(&d, &d, &all, 0.1).unwrap(), 0.0);
        let moved = DisparityMap::filled(4, 4, 0.2).unwrap();
        assert_eq!(affected_ratio(&d, &moved, &all, 0.1).unwrap(), 1.0);
        let half = DisparityMap::from_fn(4, 4, |y, _| if y < 2 { 0.05 } else { 0.5 }).unwrap();
        assert_eq!(affected_ratio(&d, &half, &all, 0.1).unwrap(), 0.5);
    }

    #[test]
    fn threshold_is_strict() {
        let d = DisparityMap::filled(2, 2, 0.0).unwrap();
        let at = DisparityMap::filled(2, 2, 0.25).unwrap();
        assert_eq!(affected_ratio(&d, &at, &BinaryMask::ones(2, 2), 0.25).unwrap(), 0.0);
    }

    #[test]
    fn empty_mask_rejected() {
        let d = DisparityMap::filled(2, 2, 0.0).unwrap();
        let z = BinaryMask::zeros(2, 2);
        assert!(matches!(mean_depth_error(&d, &d, &z), Err(Error::EmptyMask)));
        assert!(matches!(affected_ratio(&d, &d, &z, 0.1), Err(Error::EmptyMask)));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let a = DisparityMap::filled(2, 2, 0.0).unwrap();
        let b = DisparityMap::filled(2, 3, 0.0).unwrap();
        assert!(mse(&a, &b).is_err());
        assert!(affected_ratio(&a, &b, &BinaryMask::ones(2, 2), 0.1).is_err());
    }

    fn toy() -> ToyModel {
        let mut m = ToyModel::new(ToyConfig {
            input_shape: (16, 32),
            widths: vec![4, 8],
            seed: 3,
            ..Default::default()
        })
        .unwrap();
        m.freeze();
        m
    }

    fn sample(model: &ToyModel, id: &str, boxes: Vec<BBox>) -> SceneSample {
        let image = ImageTensor::from_fn(16, 32, |c, y, x| ((c + y * 3 + x * 7) % 11) as f64 / 10.0).unwrap();
        let clean = crate::model::forward(model, &image).unwrap();
        SceneSample {
            image_id: id.into(),
            image,
            boxes,
            target: clean.clone(),
            clean,
        }
    }

    fn car(cx: f64) -> BBox {
        BBox::new(cx, 8.0, 12.0, 10.0, 0.9, 0)
    }

    #[test]
    fn suppressed_patch_scores_zero() {
        let m = toy();
        let samples = vec![sample(&m, "a", vec![car(8.0)]), sample(&m, "b", vec![car(20.0)])];
        let cfg = EvalConfig {
            suppress_patch: true,
            ..Default::default()
        };
        let r = evaluate_run(&Patch::filled(4, 1.0).unwrap(), &samples, &m, &cfg).unwrap();
        assert_eq!(r.records.len(), 2);
        for rec in &r.records {
            assert_eq!((rec.e_d, rec.r_a, rec.mse), (0.0, 0.0, 0.0));
        }
    }

    #[test]
    fn aggregate_is_unweighted_and_skips_empty_scenes() {
        let m = toy();
        let samples = vec![
            sample(&m, "a", vec![car(8.0)]),
            sample(&m, "empty", vec![]),
            sample(&m, "b", vec![BBox::new(20.0, 8.0, 20.0, 14.0, 0.9, 0)]),
        ];
        let r = evaluate_run(&Patch::filled(4, 1.0).unwrap(), &samples, &m, &EvalConfig::default()).unwrap();
        assert_eq!(r.skipped, vec![String::from("empty")]);
        assert_eq!(r.aggregate.scenes, 2);
        let mean = (r.records[0].e_d + r.records[1].e_d) / 2.0;
        assert!((r.aggregate.e_d - mean).abs() < 1e-15);
        assert_ne!(r.records[0].mask_area, r.records[1].mask_area);
    }

    #[test]
    fn nothing_to_evaluate() {
        let m = toy();
        let samples = vec![sample(&m, "empty", vec![])];
        let r = evaluate_run(&Patch::filled(4, 1.0).unwrap(), &samples, &m, &EvalConfig::default());
        assert!(matches!(r, Err(Error::NothingToEvaluate(_))));
    }

    #[test]
    fn sampled_mode_is_seeded() {
        let m = toy();
        let samples = vec![sample(&m, "a", vec![car(8.0)])];
        let patch = Patch::from_clamped(4, (0..48).map(|i| (i % 5) as f64 / 4.0).collect()).unwrap();
        let cfg = |seed| EvalConfig {
            transforms: EvalTransforms::Sampled {
                seed,
                ranges: TransformRanges::default(),
            },
            ..Default::default()
        };
        let a = evaluate_run(&patch, &samples, &m, &cfg(1)).unwrap();
        let b = evaluate_run(&patch, &samples, &m, &cfg(1)).unwrap();
        assert_eq!(a, b);
    }

    fn maps() -> impl Strategy<Value = (DisparityMap, DisparityMap, BinaryMask)> {
        (
            proptest::collection::vec(0.0..=1.0f64, 64),
            proptest::collection::vec(0.0..=1.0f64, 64),
            proptest::collection::vec(any::<bool>(), 64),
        )
            .prop_filter("non-empty mask", |(_, _, m)| m.iter().any(|&b| b))
            .prop_map(|(a, b, m)| {
                (
                    DisparityMap::new(8, 8, a).unwrap(),
                    DisparityMap::new(8, 8, b).unwrap(),
                    BinaryMask::new(8, 8, m).unwrap(),
                )
            })
    }

    proptest! {
        #[test]
        fn metrics_symmetric_and_bounded((a, b, m) in maps()) {
            let e = mean_depth_error(&a, &b, &m).unwrap();
            prop_assert_eq!(e, mean_depth_error(&b, &a, &m).unwrap());
            prop_assert!((0.0..=1.0).contains(&e));
            let r = affected_ratio(&a, &b, &m, 0.1).unwrap();
            prop_assert!((0.0..=1.0).contains(&r));
            prop_assert_eq!(r, affected_ratio(&b, &a, &m, 0.1).unwrap());
            let s = mse(&a, &b).unwrap();
            prop_assert_eq!(s, mse(&b, &a).unwrap());
            prop_assert!(s >= 0.0);
        }

        #[test]
        fn affected_ratio_invariant_under_monotone_rescale(
            base in proptest::collection::vec(0.35..0.65f64, 64),
            delta in proptest::collection::vec(-0.25..0.25f64, 64),
            k in 1.0..1.4f64,
        ) {
            // Stretch errors above the cut, shrink the ones below it.
            let rescale = |d: f64| {
                let a = d.abs();
                let na = if a > 0.1 { 0.1 + (a - 0.1) * k } else { a / k };
                na.copysign(d)
            };
            let m = BinaryMask::ones(8, 8);
            let d = DisparityMap::new(8, 8, base.clone()).unwrap();
            let moved = DisparityMap::new(8, 8, base.iter().zip(&delta).map(|(b, e)| b + e).collect()).unwrap();
            let stretched =
                DisparityMap::new(8, 8, base.iter().zip(&delta).map(|(b, e)| b + rescale(*e)).collect()).unwrap();
            prop_assert_eq!(
                affected_ratio(&d, &moved, &m, 0.1).unwrap(),
                affected_ratio(&d, &stretched, &m, 0.1).unwrap()
            );
        }
    }
}
