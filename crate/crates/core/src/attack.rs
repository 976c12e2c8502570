//! Patch optimization: EOT sampling, composition, victim forward pass,
//! penalized depth loss plus TV, and Adam on the patch pixels.
//!
//! Randomness is a pure function of `(seed, counter)`: step `k` draws its
//! transforms from stream `k` of the run seed, the shuffle of epoch `e` from
//! stream `u64::MAX - 1 - e`, and the initial patch from stream `u64::MAX`.
//! A run therefore resumes bit-exactly from `(patch, optimizer, epoch, step)`.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bbox::BBox;
use crate::detect::DetectionSet;
use crate::error::{Error, Result};
use crate::image::{BinaryMask, DisparityMap, ImageTensor, Patch, CHANNELS};
use crate::loss::{
    depth_loss_with_grad, make_target_disparity, total_loss, tv_loss_with_grad, LossReport,
    LossWeights, TargetMode,
};
use crate::model::{forward_differentiable, forward_with, DepthModel};
use crate::optim::{Adam, AdamConfig};
use crate::pipeline::{apply_patch, build_focus_mask, sample_transform, TransformRanges, TransformSample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Patch side on the image relative to the larger box dimension.
    pub patch_scale_factor: f64,
    /// Side of the optimized patch raster.
    pub patch_side: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub target_class: u32,
    pub loss_weights: LossWeights,
    pub target_mode: TargetMode,
    pub transforms: TransformRanges,
    pub adam: AdamConfig,
    /// Resample images whose shape differs from the model input.
    pub resize: bool,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            learning_rate: 0.01,
            patch_scale_factor: 0.2,
            patch_side: 16,
            batch_size: 8,
            seed: 0,
            target_class: 0,
            loss_weights: LossWeights::default(),
            target_mode: TargetMode::ConstantFar,
            transforms: TransformRanges::default(),
            adam: AdamConfig::default(),
            resize: false,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.patch_scale_factor > 0.0 && self.patch_scale_factor < 1.0) {
            return Err(Error::Config(format!(
                "patch_scale_factor must be in (0, 1), got {}",
                self.patch_scale_factor
            )));
        }
        if self.patch_side < 2 {
            return Err(Error::Config("patch_side must be at least 2".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        self.loss_weights.validate()?;
        self.transforms.validate()
    }

    /// Hex SHA-256 of the configuration's debug rendering, ignoring
    /// `epochs`: the trajectory does not depend on where it stops, so a
    /// finished run can be extended from its last checkpoint.
    pub fn fingerprint(&self) -> String {
        let trajectory = Self { epochs: 0, ..self.clone() };
        hex_digest(format!("{trajectory:?}").as_bytes())
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    use core::fmt::Write;
    let digest = Sha256::digest(bytes);
    let mut s = String::with_capacity(64);
    for b in digest.iter() {
        let _ = write!(s, "{b:02x}");
    }
    s
}

/// The patch being optimized together with its optimizer state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchState {
    pub patch: Patch,
    pub optimizer: Adam,
    /// Completed epochs.
    pub epoch: usize,
    /// Attack steps taken so far (including skipped ones).
    pub step: u64,
    pub seed: u64,
    pub config_hash: String,
}

/// Uniform random patch in `[0, 1]` with a fresh optimizer.
pub fn init_patch<R: RngCore>(side: usize, rng: &mut R) -> Result<PatchState> {
    if side < 2 {
        return Err(Error::Config(format!("patch side must be at least 2, got {side}")));
    }
    let data: Vec<f64> = (0..CHANNELS * side * side).map(|_| rng.gen::<f64>()).collect();
    Ok(PatchState {
        patch: Patch::new(side, data)?,
        optimizer: Adam::new(CHANNELS * side * side, AdamConfig::default()),
        epoch: 0,
        step: 0,
        seed: 0,
        config_hash: String::new(),
    })
}

/// Initial state of a run: the patch comes from the run seed.
pub fn initial_state(cfg: &AttackConfig) -> Result<PatchState> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(u64::MAX);
    let mut state = init_patch(cfg.patch_side, &mut rng)?;
    state.optimizer = Adam::new(state.patch.data().len(), cfg.adam);
    state.seed = cfg.seed;
    state.config_hash = cfg.fingerprint();
    Ok(state)
}

/// Per-step log entry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: u64,
    /// Images in the batch that received at least one patch.
    pub images: usize,
    /// Patches pasted over the batch.
    pub detections: usize,
    #[serde(flatten)]
    pub losses: LossReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub patch: PatchState,
    /// Lowest epoch-mean total loss so far.
    pub best_metric: f64,
    pub history: Vec<StepRecord>,
}

impl RunState {
    pub fn new(patch: PatchState) -> Self {
        Self {
            patch,
            best_metric: f64::INFINITY,
            history: Vec::new(),
        }
    }
}

/// An image with its cached detections, clean prediction and attack target.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    pub image_id: String,
    pub image: ImageTensor,
    /// Target-class detections, highest score first.
    pub boxes: Vec<BBox>,
    pub clean: DisparityMap,
    pub target: DisparityMap,
}

impl SceneSample {
    /// Union of the focus masks of every box that touches the image.
    pub fn focus_union(&self) -> BinaryMask {
        let (h, w) = self.image.shape();
        let mut m = BinaryMask::zeros(h, w);
        for b in &self.boxes {
            if let Ok(f) = build_focus_mask(b, (h, w)) {
                m = m.union(&f).expect("same shape");
            }
        }
        m
    }
}

/// Cache the clean prediction and target for each image.
pub fn prepare_samples(
    model: &dyn DepthModel,
    items: Vec<(ImageTensor, DetectionSet)>,
    target_class: u32,
    target_mode: TargetMode,
    resize: bool,
) -> Result<Vec<SceneSample>> {
    items
        .into_iter()
        .map(|(image, dets)| {
            let boxes: Vec<BBox> = dets.of_class(target_class).copied().collect();
            let clean = forward_with(model, &image, resize)?;
            let mut sample = SceneSample {
                image_id: dets.image_id,
                image,
                boxes,
                target: clean.clone(),
                clean,
            };
            let focus = sample.focus_union();
            if !focus.is_empty() {
                sample.target = make_target_disparity(&sample.clean, &focus, target_mode)?;
            }
            Ok(sample)
        })
        .collect()
}

struct DepthTerm {
    l_d1: f64,
    l_d2: f64,
    l_depth: f64,
    /// d L_depth / d patch.
    grad: Vec<f64>,
    applied: usize,
}

/// Depth loss of one image with the given per-detection transforms and its
/// gradient with respect to the patch; `None` when nothing was pasted.
fn depth_term(
    patch: &Patch,
    sample: &SceneSample,
    transforms: &[TransformSample],
    model: &dyn DepthModel,
    cfg: &AttackConfig,
) -> Result<Option<DepthTerm>> {
    let ex = apply_patch(&sample.image, patch, &sample.boxes, transforms, cfg.patch_scale_factor)?;
    if ex.applied() == 0 {
        return Ok(None);
    }
    let fwd = forward_differentiable(model, &ex.image, cfg.resize)?;
    let d = depth_loss_with_grad(
        &sample.target,
        &fwd.disparity,
        &ex.focus_union,
        &ex.patch_union,
        &cfg.loss_weights,
    )?;
    let g_img = fwd.backward(&d.grad);
    Ok(Some(DepthTerm {
        l_d1: d.l_d1,
        l_d2: d.l_d2,
        l_depth: d.l_depth,
        grad: ex.backward(&g_img, patch.side()),
        applied: ex.applied(),
    }))
}

/// Total loss of `patch` on a single image with fixed transforms, and its
/// gradient with respect to every patch value. This is exactly the quantity
/// an optimizer step on a one-image batch descends.
pub fn patch_objective(
    patch: &Patch,
    sample: &SceneSample,
    transforms: &[TransformSample],
    model: &dyn DepthModel,
    cfg: &AttackConfig,
) -> Result<(LossReport, Vec<f64>)> {
    let w = &cfg.loss_weights;
    let (l_tv, g_tv) = tv_loss_with_grad(patch)?;
    let t = depth_term(patch, sample, transforms, model, cfg)?.unwrap_or(DepthTerm {
        l_d1: 0.0,
        l_d2: 0.0,
        l_depth: 0.0,
        grad: vec![0.0; patch.data().len()],
        applied: 0,
    });
    let grad = t.grad.iter().zip(&g_tv).map(|(d, v)| w.alpha * d + w.gamma * v).collect();
    Ok((total_loss(t.l_d1, t.l_d2, t.l_depth, l_tv, w), grad))
}

/// One optimizer step over `batch`.
///
/// Every detection receives its own transform sample. Losses and depth
/// gradients are averaged over the images that received a patch. Returns
/// `None` (after advancing the step counter) when nothing in the batch could
/// be patched.
pub fn attack_step(
    state: &mut RunState,
    batch: &[&SceneSample],
    model: &dyn DepthModel,
    cfg: &AttackConfig,
) -> Result<Option<StepRecord>> {
    let ps = &mut state.patch;
    let side = ps.patch.side();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(ps.step);
    ps.step += 1;

    let w = &cfg.loss_weights;
    let mut grad = vec![0.0; ps.patch.data().len()];
    let (mut sum_d1, mut sum_d2, mut sum_depth) = (0.0, 0.0, 0.0);
    let mut images = 0;
    let mut detections = 0;
    for sample in batch {
        if sample.boxes.is_empty() {
            continue;
        }
        let samples = sample
            .boxes
            .iter()
            .map(|_| sample_transform(&mut rng, &cfg.transforms, side))
            .collect::<Result<Vec<_>>>()?;
        let Some(t) = depth_term(&ps.patch, sample, &samples, model, cfg)? else {
            continue;
        };
        for (a, b) in grad.iter_mut().zip(&t.grad) {
            *a += b;
        }
        sum_d1 += t.l_d1;
        sum_d2 += t.l_d2;
        sum_depth += t.l_depth;
        images += 1;
        detections += t.applied;
    }
    if images == 0 {
        log::warn!("step {}: no patchable detections in batch, skipping", ps.step - 1);
        return Ok(None);
    }

    let n = images as f64;
    let (l_tv, g_tv) = tv_loss_with_grad(&ps.patch)?;
    for (a, t) in grad.iter_mut().zip(&g_tv) {
        *a = w.alpha * *a / n + w.gamma * t;
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Diverged {
            seed: cfg.seed,
            detail: format!("non-finite patch gradient at step {}", ps.step - 1),
        });
    }
    let losses = total_loss(sum_d1 / n, sum_d2 / n, sum_depth / n, l_tv, w);
    let mut data = ps.patch.data().to_vec();
    ps.optimizer.step(&mut data, &grad, cfg.learning_rate);
    ps.patch = Patch::from_clamped(side, data)?;

    let record = StepRecord {
        epoch: ps.epoch,
        step: ps.step - 1,
        images,
        detections,
        losses,
    };
    state.history.push(record);
    Ok(Some(record))
}

/// Hooks into a running attack.
pub trait AttackObserver {
    fn on_step(&mut self, _record: &StepRecord) {}

    /// Called after every completed epoch; return `false` to stop early.
    fn on_epoch(&mut self, _state: &RunState) -> Result<bool> {
        Ok(true)
    }
}

impl AttackObserver for () {}

/// Batches of sample indices for `epoch`.
pub fn epoch_order(seed: u64, epoch: usize, len: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX - 1 - epoch as u64);
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng);
    order
}

/// Optimize a patch over `samples` for `cfg.epochs` epochs, optionally
/// continuing from `resume`.
pub fn run_attack(
    samples: &[SceneSample],
    model: &dyn DepthModel,
    cfg: &AttackConfig,
    resume: Option<RunState>,
    observer: &mut dyn AttackObserver,
) -> Result<RunState> {
    cfg.validate()?;
    if !model.handle().frozen {
        return Err(Error::Config("the victim model must be frozen".into()));
    }
    if !samples.iter().any(|s| !s.boxes.is_empty()) {
        return Err(Error::NoTargets {
            class_id: cfg.target_class,
        });
    }
    let mut state = match resume {
        Some(s) => {
            if s.patch.config_hash != cfg.fingerprint() {
                return Err(Error::Config(
                    "checkpoint was written by a different configuration".into(),
                ));
            }
            if s.patch.patch.side() != cfg.patch_side {
                return Err(Error::Config("checkpoint patch side differs from config".into()));
            }
            s
        }
        None => RunState::new(initial_state(cfg)?),
    };
    let checksum = model.parameter_checksum();

    while state.patch.epoch < cfg.epochs {
        let epoch = state.patch.epoch;
        let order = epoch_order(cfg.seed, epoch, samples.len());
        let first = state.history.len();
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&SceneSample> = chunk.iter().map(|&i| &samples[i]).collect();
            if let Some(rec) = attack_step(&mut state, &batch, model, cfg)? {
                observer.on_step(&rec);
            }
        }
        let recent = &state.history[first..];
        if !recent.is_empty() {
            let mean = recent.iter().map(|r| r.losses.l_total).sum::<f64>() / recent.len() as f64;
            state.best_metric = state.best_metric.min(mean);
            log::info!("epoch {}/{}: mean l_total {mean:.6}", epoch + 1, cfg.epochs);
        }
        state.patch.epoch += 1;
        if !observer.on_epoch(&state)? {
            break;
        }
    }

    if model.parameter_checksum() != checksum {
        return Err(Error::Config("victim parameters changed during the attack".into()));
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detect::DetectionSet;
    use crate::model::{generate_corpus, SceneParams, ToyConfig, ToyModel};

    fn toy() -> ToyModel {
        let mut m = ToyModel::new(ToyConfig {
            input_shape: (32, 64),
            widths: vec![4, 8, 8],
            seed: 2,
            ..Default::default()
        })
        .unwrap();
        m.freeze();
        m
    }

    fn scenes(model: &ToyModel, n: usize) -> Vec<SceneSample> {
        let params = SceneParams {
            height: 32,
            width: 64,
            car_height: 14.0,
            pedestrian_height: 18.0,
            car_probability: 1.0,
            ..Default::default()
        };
        let items = generate_corpus(5, n, &params)
            .unwrap()
            .into_iter()
            .enumerate()
            .map(|(i, s)| {
                let boxes = s.boxes();
                (
                    s.image,
                    DetectionSet {
                        image_id: format!("s{i}"),
                        boxes,
                    },
                )
            })
            .collect();
        prepare_samples(model, items, 0, TargetMode::ConstantFar, false).unwrap()
    }

    fn cfg() -> AttackConfig {
        AttackConfig {
            epochs: 1,
            patch_side: 8,
            batch_size: 2,
            patch_scale_factor: 0.5,
            ..Default::default()
        }
    }

    #[test]
    fn init_patch_is_seeded_and_in_range() {
        let a = init_patch(4, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = init_patch(4, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a, b);
        assert!(a.patch.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let two = init_patch(2, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(two.patch.data().len(), 12);
        assert!(init_patch(1, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn zero_learning_rate_keeps_patch() {
        let m = toy();
        let s = scenes(&m, 2);
        let c = cfg();
        let mut state = RunState::new(initial_state(&c).unwrap());
        let before = state.patch.patch.clone();
        let batch: Vec<&SceneSample> = s.iter().collect();
        let zero = AttackConfig {
            learning_rate: 0.0,
            ..c
        };
        let rec = attack_step(&mut state, &batch, &m, &zero).unwrap().unwrap();
        assert_eq!(state.patch.patch, before);
        assert!(rec.losses.l_total > 0.0);
        assert_eq!(state.history.len(), 1);
    }

    #[test]
    fn step_count_matches_batches() {
        let m = toy();
        let s = scenes(&m, 2);
        for batch_size in [1, 2, 8] {
            let c = AttackConfig { batch_size, ..cfg() };
            let st = run_attack(&s, &m, &c, None, &mut ()).unwrap();
            assert_eq!(st.history.len(), 2usize.div_ceil(batch_size));
            assert_eq!(st.patch.epoch, 1);
        }
    }

    #[test]
    fn empty_batch_is_skipped() {
        let m = toy();
        let mut s = scenes(&m, 1);
        s[0].boxes.clear();
        let c = cfg();
        let mut state = RunState::new(initial_state(&c).unwrap());
        let before = state.patch.patch.clone();
        assert!(attack_step(&mut state, &[&s[0]], &m, &c).unwrap().is_none());
        assert_eq!(state.patch.patch, before);
        assert_eq!(state.patch.step, 1);
        assert!(matches!(
            run_attack(&s, &m, &c, None, &mut ()),
            Err(Error::NoTargets { class_id: 0 })
        ));
    }

    #[test]
    fn unfrozen_victim_rejected() {
        let mut m = ToyModel::new(ToyConfig {
            input_shape: (32, 64),
            widths: vec![4, 8, 8],
            ..Default::default()
        })
        .unwrap();
        let s = scenes(&{
            let mut f = m.clone();
            f.freeze();
            f
        }, 1);
        assert!(run_attack(&s, &m, &cfg(), None, &mut ()).is_err());
        m.freeze();
        assert!(run_attack(&s, &m, &cfg(), None, &mut ()).is_ok());
    }

    #[test]
    fn resume_matches_uninterrupted() {
        let m = toy();
        let s = scenes(&m, 3);
        let c = AttackConfig { epochs: 4, ..cfg() };
        let full = run_attack(&s, &m, &c, None, &mut ()).unwrap();

        struct StopAt(usize);
        impl AttackObserver for StopAt {
            fn on_epoch(&mut self, state: &RunState) -> Result<bool> {
                Ok(state.patch.epoch < self.0)
            }
        }
        let half = run_attack(&s, &m, &c, None, &mut StopAt(2)).unwrap();
        assert_eq!(half.patch.epoch, 2);
        let resumed = run_attack(&s, &m, &c, Some(half), &mut ()).unwrap();
        assert_eq!(resumed.patch.patch, full.patch.patch);
        assert_eq!(resumed.history, full.history);
    }

    #[test]
    fn resume_rejects_other_config() {
        let m = toy();
        let s = scenes(&m, 2);
        let st = run_attack(&s, &m, &cfg(), None, &mut ()).unwrap();
        let other = AttackConfig { epochs: 3, seed: 9, ..cfg() };
        assert!(run_attack(&s, &m, &other, Some(st), &mut ()).is_err());
    }

    fn tv_only_ratio(steps: usize, learning_rate: f64) -> f64 {
        let m = toy();
        let s = scenes(&m, 2);
        let c = AttackConfig {
            epochs: steps,
            batch_size: 2,
            learning_rate,
            loss_weights: LossWeights {
                alpha: 0.0,
                gamma: 50.0,
                ..Default::default()
            },
            ..cfg()
        };
        let tv0 = crate::loss::tv_loss(&initial_state(&c).unwrap().patch).unwrap();
        let st = run_attack(&s, &m, &c, None, &mut ()).unwrap();
        assert_eq!(st.history.len(), steps);
        crate::loss::tv_loss(&st.patch.patch).unwrap() / tv0
    }

    #[test]
    fn tv_only_flattens_patch() {
        // Adam's sign-like steps chatter around the flat optimum at an
        // amplitude proportional to the step size, so 200 steps bottom out
        // near 2e-3 of the initial TV; a smaller step gets below 1e-3.
        assert!(tv_only_ratio(200, 0.005) < 1e-2);
        assert!(tv_only_ratio(1000, 0.001) < 1e-3);
    }

    #[test]
    fn fingerprint_changes_with_config() {
        let a = cfg();
        let b = AttackConfig { seed: 1, ..cfg() };
        assert_eq!(a.fingerprint(), cfg().fingerprint());
        assert_ne!(a.fingerprint(), b.fingerprint());
        let longer = AttackConfig { epochs: a.epochs + 10, ..cfg() };
        assert_eq!(a.fingerprint(), longer.fingerprint());
    }
}
