//! Patch transformer and patch applier.
//!
//! Every stage between the patch pixels and the composited adversarial image
//! is linear in the patch (bilinear warp, masked selection) or piecewise
//! linear (photometric clamp), so each stage carries an exact adjoint used
//! by the attack loop.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::image::{same_shape, BinaryMask, ImageTensor, MaskPair, Patch, CHANNELS};

/// Closed interval `[lo, hi]`, serialized as a two-element array.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval(pub f64, pub f64);

impl Interval {
    pub fn point(v: f64) -> Self {
        Self(v, v)
    }

    pub fn lo(&self) -> f64 {
        self.0
    }

    pub fn hi(&self) -> f64 {
        self.1
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.0 && v <= self.1
    }

    fn check(&self, name: &str) -> Result<()> {
        if !(self.0.is_finite() && self.1.is_finite()) || self.0 > self.1 {
            return Err(Error::Config(format!(
                "{name} range [{}, {}] is inverted or non-finite",
                self.0, self.1
            )));
        }
        Ok(())
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        if self.0 == self.1 {
            self.0
        } else {
            rng.gen_range(self.0..=self.1)
        }
    }
}

/// Ranges the patch transformer samples from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransformRanges {
    /// Multiplicative jitter on the box-anchored patch side.
    pub scale: Interval,
    pub rotation_deg: Interval,
    /// Per-pixel additive noise.
    pub noise: Interval,
    pub contrast: Interval,
    pub brightness: Interval,
}

impl Default for TransformRanges {
    fn default() -> Self {
        Self {
            scale: Interval(0.9, 1.1),
            rotation_deg: Interval(-20.0, 20.0),
            noise: Interval(-0.1, 0.1),
            contrast: Interval(0.8, 1.2),
            brightness: Interval(-0.1, 0.1),
        }
    }
}

impl TransformRanges {
    /// Every range collapsed onto the identity transform.
    pub fn identity() -> Self {
        Self {
            scale: Interval::point(1.0),
            rotation_deg: Interval::point(0.0),
            noise: Interval::point(0.0),
            contrast: Interval::point(1.0),
            brightness: Interval::point(0.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.scale.check("scale")?;
        self.rotation_deg.check("rotation_deg")?;
        self.noise.check("noise")?;
        self.contrast.check("contrast")?;
        self.brightness.check("brightness")?;
        if self.scale.lo() <= 0.0 {
            return Err(Error::Config("scale range must be positive".into()));
        }
        Ok(())
    }
}

/// One realization of the patch transformer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformSample {
    pub scale: f64,
    pub rotation_deg: f64,
    /// Per-element offsets, planar like the patch; empty means zero noise.
    pub noise: Vec<f64>,
    pub contrast: f64,
    pub brightness: f64,
    pub rng_seed: u64,
}

impl TransformSample {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation_deg: 0.0,
            noise: Vec::new(),
            contrast: 1.0,
            brightness: 0.0,
            rng_seed: 0,
        }
    }

    /// Deterministic sample for `seed`.
    pub fn from_seed(seed: u64, ranges: &TransformRanges, patch_side: usize) -> Result<Self> {
        ranges.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = ranges.scale.sample(&mut rng);
        let rotation_deg = ranges.rotation_deg.sample(&mut rng);
        let contrast = ranges.contrast.sample(&mut rng);
        let brightness = ranges.brightness.sample(&mut rng);
        let noise = if ranges.noise == Interval::point(0.0) {
            Vec::new()
        } else {
            (0..CHANNELS * patch_side * patch_side)
                .map(|_| ranges.noise.sample(&mut rng))
                .collect()
        };
        Ok(Self {
            scale,
            rotation_deg,
            noise,
            contrast,
            brightness,
            rng_seed: seed,
        })
    }

    pub fn is_within(&self, ranges: &TransformRanges) -> bool {
        ranges.scale.contains(self.scale)
            && ranges.rotation_deg.contains(self.rotation_deg)
            && ranges.contrast.contains(self.contrast)
            && ranges.brightness.contains(self.brightness)
            && self.noise.iter().all(|&n| ranges.noise.contains(n))
    }
}

/// Draw a transform from `rng`; the sample records the seed it was built from.
pub fn sample_transform<R: RngCore>(
    rng: &mut R,
    ranges: &TransformRanges,
    patch_side: usize,
) -> Result<TransformSample> {
    let seed = rng.next_u64();
    TransformSample::from_seed(seed, ranges, patch_side)
}

/// Photometric stage output plus the pass-through pattern of the clamp.
#[derive(Debug, Clone)]
pub struct Photometric {
    pub patch: Patch,
    contrast: f64,
    pass: Vec<bool>,
}

impl Photometric {
    /// Pull `grad_out` back to the input patch, accumulating into `grad_in`.
    pub fn backward(&self, grad_out: &[f64], grad_in: &mut [f64]) {
        for ((g, &go), &p) in grad_in.iter_mut().zip(grad_out).zip(&self.pass) {
            if p {
                *g += self.contrast * go;
            }
        }
    }
}

/// `clamp(contrast · patch + brightness + noise)`.
pub fn apply_photometric(patch: &Patch, t: &TransformSample) -> Result<Photometric> {
    if !t.noise.is_empty() && t.noise.len() != patch.data().len() {
        return Err(Error::ShapeMismatch {
            expected: (patch.side(), patch.side()),
            found: (t.noise.len(), 1),
        });
    }
    let mut out = Vec::with_capacity(patch.data().len());
    let mut pass = Vec::with_capacity(patch.data().len());
    for (i, &p) in patch.data().iter().enumerate() {
        let n = t.noise.get(i).copied().unwrap_or(0.0);
        let v = t.contrast * p + t.brightness + n;
        pass.push(v > 0.0 && v < 1.0);
        out.push(v);
    }
    Ok(Photometric {
        patch: Patch::from_clamped(patch.side(), out)?,
        contrast: t.contrast,
        pass,
    })
}

#[derive(Debug, Clone, Copy)]
struct Tap {
    pixel: u32,
    idx: [u32; 4],
    w: [f64; 4],
}

/// A warped patch footprint on the image grid.
///
/// Canvas pixel `p` inside the footprint reads the patch at
/// `R(-θ)(p − c) · S / side + S / 2` with bilinear, edge-clamped sampling.
#[derive(Debug, Clone)]
pub struct Placement {
    height: usize,
    width: usize,
    patch_side: usize,
    /// Rendered footprint side in image pixels.
    pub side_px: usize,
    pub mask: BinaryMask,
    taps: Vec<Tap>,
}

impl Placement {
    /// Geometry of a patch pasted on `b`, or `None` when the clipped
    /// footprint is smaller than 2×2 pixels.
    ///
    /// The footprint is clipped to the image and to the box itself so that
    /// the patch mask stays inside the focus mask.
    pub fn new(
        patch_side: usize,
        b: &BBox,
        t: &TransformSample,
        scale_factor: f64,
        image_shape: (usize, usize),
    ) -> Result<Option<Self>> {
        let (height, width) = image_shape;
        let Some((r0, r1, c0, c1)) = b.pixel_span(height, width) else {
            return Err(Error::EmptyIntersection);
        };
        let raw_side = scale_factor * b.w.max(b.h) * t.scale;
        let side_px = libm::round(raw_side);
        if !(side_px >= 2.0) {
            log::warn!(
                "patch footprint for box at ({:.1}, {:.1}) is {raw_side:.2} px; skipping detection",
                b.cx,
                b.cy
            );
            return Ok(None);
        }
        let side = side_px;
        let theta = t.rotation_deg.to_radians();
        let (sin, cos) = (libm::sin(theta), libm::cos(theta));
        let s = patch_side as f64;
        let k = s / side;
        let last = s - 1.0;

        let mut mask_data = vec![false; height * width];
        let mut taps = Vec::new();
        for r in r0..r1 {
            let oy = r as f64 + 0.5 - b.cy;
            for c in c0..c1 {
                let ox = c as f64 + 0.5 - b.cx;
                let pu = (cos * ox + sin * oy) * k + 0.5 * s;
                let pv = (-sin * ox + cos * oy) * k + 0.5 * s;
                if !(pu >= 0.0 && pu < s && pv >= 0.0 && pv < s) {
                    continue;
                }
                let x = (pu - 0.5).clamp(0.0, last);
                let y = (pv - 0.5).clamp(0.0, last);
                let (x0, y0) = (libm::floor(x), libm::floor(y));
                let (fx, fy) = (x - x0, y - y0);
                let (x0, y0) = (x0 as usize, y0 as usize);
                let x1 = (x0 + 1).min(patch_side - 1);
                let y1 = (y0 + 1).min(patch_side - 1);
                let at = |i: usize, j: usize| (i * patch_side + j) as u32;
                let pixel = r * width + c;
                mask_data[pixel] = true;
                taps.push(Tap {
                    pixel: pixel as u32,
                    idx: [at(y0, x0), at(y0, x1), at(y1, x0), at(y1, x1)],
                    w: [
                        (1.0 - fy) * (1.0 - fx),
                        (1.0 - fy) * fx,
                        fy * (1.0 - fx),
                        fy * fx,
                    ],
                });
            }
        }
        if taps.len() < 4 {
            log::warn!(
                "clipped patch footprint for box at ({:.1}, {:.1}) covers {} px; skipping detection",
                b.cx,
                b.cy,
                taps.len()
            );
            return Ok(None);
        }
        let mask = BinaryMask::new(height, width, mask_data)?;
        Ok(Some(Self {
            height,
            width,
            patch_side,
            side_px: side as usize,
            mask,
            taps,
        }))
    }

    /// Warp `patch` onto an image-sized canvas that is zero off the footprint.
    pub fn render(&self, patch: &Patch) -> Result<ImageTensor> {
        if patch.side() != self.patch_side {
            return Err(Error::ShapeMismatch {
                expected: (self.patch_side, self.patch_side),
                found: (patch.side(), patch.side()),
            });
        }
        let n = self.height * self.width;
        let ps = self.patch_side * self.patch_side;
        let src = patch.data();
        let mut canvas = vec![0.0; CHANNELS * n];
        for c in 0..CHANNELS {
            let plane = &src[c * ps..(c + 1) * ps];
            let out = &mut canvas[c * n..(c + 1) * n];
            for t in &self.taps {
                out[t.pixel as usize] = t.w[0] * plane[t.idx[0] as usize]
                    + t.w[1] * plane[t.idx[1] as usize]
                    + t.w[2] * plane[t.idx[2] as usize]
                    + t.w[3] * plane[t.idx[3] as usize];
            }
        }
        ImageTensor::from_clamped(self.height, self.width, canvas)
    }

    /// Adjoint of [`Placement::render`]: accumulate the patch gradient
    /// implied by `grad_canvas` (planar, image sized) into `grad_patch`.
    pub fn backward(&self, grad_canvas: &[f64], grad_patch: &mut [f64]) {
        let n = self.height * self.width;
        let ps = self.patch_side * self.patch_side;
        for c in 0..CHANNELS {
            let g = &grad_canvas[c * n..(c + 1) * n];
            let out = &mut grad_patch[c * ps..(c + 1) * ps];
            for t in &self.taps {
                let go = g[t.pixel as usize];
                if go == 0.0 {
                    continue;
                }
                for k in 0..4 {
                    out[t.idx[k] as usize] += t.w[k] * go;
                }
            }
        }
    }
}

/// Warp a patch onto `b` and return `(canvas, patch_mask)`.
pub fn place_patch(
    patch: &Patch,
    b: &BBox,
    t: &TransformSample,
    scale_factor: f64,
    image_shape: (usize, usize),
) -> Result<Option<(ImageTensor, BinaryMask)>> {
    match Placement::new(patch.side(), b, t, scale_factor, image_shape)? {
        Some(p) => Ok(Some((p.render(patch)?, p.mask))),
        None => Ok(None),
    }
}

/// Ones on the box rectangle clipped to the image.
pub fn build_focus_mask(b: &BBox, image_shape: (usize, usize)) -> Result<BinaryMask> {
    let (h, w) = image_shape;
    if !b.intersects_image(h, w) {
        return Err(Error::EmptyIntersection);
    }
    Ok(BinaryMask::from_box(h, w, b))
}

/// `(1 − M) ⊙ image + M ⊙ canvas`, evaluated as a per-pixel selection so
/// pixels outside the mask are bit-identical to `image`.
pub fn compose(image: &ImageTensor, canvas: &ImageTensor, mask: &BinaryMask) -> Result<ImageTensor> {
    same_shape(image.shape(), canvas.shape())?;
    same_shape(image.shape(), mask.shape())?;
    let n = image.height() * image.width();
    let m = mask.data();
    let out = image
        .data()
        .iter()
        .zip(canvas.data())
        .enumerate()
        .map(|(i, (&a, &b))| if m[i % n] { b } else { a })
        .collect();
    ImageTensor::new(image.height(), image.width(), out)
}

/// The adversarial image together with what produced it.
#[derive(Debug, Clone)]
pub struct AdversarialExample {
    pub image: ImageTensor,
    pub masks: Vec<MaskPair>,
    pub provenance: Vec<TransformSample>,
    /// Union of all patch masks.
    pub patch_union: BinaryMask,
    /// Union of all focus masks.
    pub focus_union: BinaryMask,
    stages: Vec<(Photometric, Placement)>,
}

impl AdversarialExample {
    /// Pull the gradient w.r.t. the composed image back to the patch.
    ///
    /// Pastes are undone last-to-first: each paste receives `M_k ⊙ g` and
    /// passes `(1 − M_k) ⊙ g` to the layers beneath it.
    pub fn backward(&self, grad_image: &[f64], patch_side: usize) -> Vec<f64> {
        let mut g = grad_image.to_vec();
        let mut grad_patch = vec![0.0; CHANNELS * patch_side * patch_side];
        let n = self.image.height() * self.image.width();
        let mut grad_canvas = vec![0.0; g.len()];
        let mut grad_photo = vec![0.0; grad_patch.len()];
        for (photo, placement) in self.stages.iter().rev() {
            let m = placement.mask.data();
            for i in 0..g.len() {
                if m[i % n] {
                    grad_canvas[i] = g[i];
                    g[i] = 0.0;
                } else {
                    grad_canvas[i] = 0.0;
                }
            }
            grad_photo.iter_mut().for_each(|v| *v = 0.0);
            placement.backward(&grad_canvas, &mut grad_photo);
            photo.backward(&grad_photo, &mut grad_patch);
        }
        grad_patch
    }

    pub fn applied(&self) -> usize {
        self.stages.len()
    }
}

/// Paste `patch` on every box with its own transform sample.
///
/// Pastes happen in ascending score order so the highest-scoring detection
/// ends on top. Boxes whose footprint degenerates are skipped.
pub fn apply_patch(
    image: &ImageTensor,
    patch: &Patch,
    boxes: &[BBox],
    samples: &[TransformSample],
    scale_factor: f64,
) -> Result<AdversarialExample> {
    if boxes.len() != samples.len() {
        return Err(Error::Config(format!(
            "{} boxes but {} transform samples",
            boxes.len(),
            samples.len()
        )));
    }
    let shape = image.shape();
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| {
        boxes[a]
            .score
            .partial_cmp(&boxes[b].score)
            .unwrap_or(core::cmp::Ordering::Equal)
    });

    let mut current = image.clone();
    let mut masks = Vec::new();
    let mut provenance = Vec::new();
    let mut stages = Vec::new();
    let mut patch_union = BinaryMask::zeros(shape.0, shape.1);
    let mut focus_union = BinaryMask::zeros(shape.0, shape.1);
    for i in order {
        let b = &boxes[i];
        let t = &samples[i];
        let focus = build_focus_mask(b, shape)?;
        let Some(placement) = Placement::new(patch.side(), b, t, scale_factor, shape)? else {
            continue;
        };
        let photo = apply_photometric(patch, t)?;
        let canvas = placement.render(&photo.patch)?;
        current = compose(&current, &canvas, &placement.mask)?;
        patch_union = patch_union.union(&placement.mask)?;
        focus_union = focus_union.union(&focus)?;
        masks.push(MaskPair::new(placement.mask.clone(), focus, *b)?);
        provenance.push(t.clone());
        stages.push((photo, placement));
    }
    Ok(AdversarialExample {
        image: current,
        masks,
        provenance,
        patch_union,
        focus_union,
        stages,
    })
}
