//! Raster value types shared by the whole pipeline.
//!
//! All pixel data is `f64` in `[0, 1]`. Multi-channel rasters are stored
//! planar (channel-major): element `(c, y, x)` lives at `c * h * w + y * w + x`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::error::{Error, Result};

pub const CHANNELS: usize = 3;

fn check_unit(data: &[f64], what: &str) -> Result<()> {
    match data.iter().position(|v| !(0.0..=1.0).contains(v)) {
        None => Ok(()),
        Some(i) => Err(Error::OutOfRange(format!(
            "{what} element {i} = {} is outside [0, 1]",
            data[i]
        ))),
    }
}

fn check_dims(height: usize, width: usize) -> Result<()> {
    if height == 0 || width == 0 {
        return Err(Error::OutOfRange(format!(
            "raster dimensions must be positive, got {height}x{width}"
        )));
    }
    Ok(())
}

/// Clamp every element to `[0, 1]`. NaN maps to 0.
#[inline]
pub fn clamp_unit(v: f64) -> f64 {
    if v > 1.0 {
        1.0
    } else if v >= 0.0 {
        v
    } else {
        0.0
    }
}

/// H×W×3 RGB image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ImageTensor {
    /// Planar data of length `3 * height * width`; every value must lie in `[0, 1]`.
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        check_dims(height, width)?;
        if data.len() != CHANNELS * height * width {
            return Err(Error::OutOfRange(format!(
                "expected {} values for a {height}x{width} image, got {}",
                CHANNELS * height * width,
                data.len()
            )));
        }
        check_unit(&data, "image")?;
        Ok(Self {
            height,
            width,
            data,
        })
    }

    /// Like [`ImageTensor::new`] but clamps instead of rejecting.
    pub fn from_clamped(height: usize, width: usize, mut data: Vec<f64>) -> Result<Self> {
        data.iter_mut().for_each(|v| *v = clamp_unit(*v));
        Self::new(height, width, data)
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(height, width, vec![value; CHANNELS * height * width])
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(CHANNELS * height * width);
        for c in 0..CHANNELS {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self::from_clamped(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }
}

/// Single-channel disparity map. Normalized maps use 1 for the closest point
/// and 0 for the farthest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisparityMap {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl DisparityMap {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        check_dims(height, width)?;
        if data.len() != height * width {
            return Err(Error::OutOfRange(format!(
                "expected {} values for a {height}x{width} map, got {}",
                height * width,
                data.len()
            )));
        }
        check_unit(&data, "disparity")?;
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(clamp_unit(f(y, x)));
            }
        }
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }
}

/// Strictly binary H×W mask.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        check_dims(height, width)?;
        if data.len() != height * width {
            return Err(Error::OutOfRange(format!(
                "expected {} values for a {height}x{width} mask, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![true; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    /// Ones on every pixel whose center lies inside `b` (clipped to bounds).
    pub fn from_box(height: usize, width: usize, b: &BBox) -> Self {
        let mut m = Self::zeros(height, width);
        if let Some((r0, r1, c0, c1)) = b.pixel_span(height, width) {
            for y in r0..r1 {
                m.data[y * width + c0..y * width + c1].fill(true);
            }
        }
        m
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    /// Mask value as `0.0` / `1.0`.
    #[inline]
    pub fn value(&self, i: usize) -> f64 {
        if self.data[i] {
            1.0
        } else {
            0.0
        }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.shape() == other.shape() && self.data.iter().zip(&other.data).all(|(&a, &b)| !a || b)
    }

    pub fn union(&self, other: &BinaryMask) -> Result<BinaryMask> {
        same_shape(self.shape(), other.shape())?;
        Ok(Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| a || b).collect(),
        })
    }

    pub fn intersection(&self, other: &BinaryMask) -> Result<BinaryMask> {
        same_shape(self.shape(), other.shape())?;
        Ok(Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| a && b).collect(),
        })
    }
}

pub(crate) fn same_shape(expected: (usize, usize), found: (usize, usize)) -> Result<()> {
    if expected != found {
        return Err(Error::ShapeMismatch { expected, found });
    }
    Ok(())
}

/// Patch mask and focus mask for one detection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskPair {
    pub patch_mask: BinaryMask,
    pub focus_mask: BinaryMask,
    pub source_box: BBox,
}

impl MaskPair {
    pub fn new(patch_mask: BinaryMask, focus_mask: BinaryMask, source_box: BBox) -> Result<Self> {
        // validates containment and shape
        mask_difference(&focus_mask, &patch_mask)?;
        Ok(Self {
            patch_mask,
            focus_mask,
            source_box,
        })
    }
}

/// Square S×S RGB patch, planar, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Patch {
    side: usize,
    data: Vec<f64>,
}

impl Patch {
    pub fn new(side: usize, data: Vec<f64>) -> Result<Self> {
        if side == 0 {
            return Err(Error::OutOfRange("patch side must be positive".into()));
        }
        if data.len() != CHANNELS * side * side {
            return Err(Error::OutOfRange(format!(
                "expected {} values for a {side}x{side} patch, got {}",
                CHANNELS * side * side,
                data.len()
            )));
        }
        check_unit(&data, "patch")?;
        Ok(Self { side, data })
    }

    pub fn from_clamped(side: usize, mut data: Vec<f64>) -> Result<Self> {
        data.iter_mut().for_each(|v| *v = clamp_unit(*v));
        Self::new(side, data)
    }

    pub fn filled(side: usize, value: f64) -> Result<Self> {
        Self::new(side, vec![value; CHANNELS * side * side])
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, c: usize, i: usize, j: usize) -> f64 {
        self.data[(c * self.side + i) * self.side + j]
    }
}

/// `f - p` for `p ⊆ f`.
pub fn mask_difference(f: &BinaryMask, p: &BinaryMask) -> Result<BinaryMask> {
    same_shape(f.shape(), p.shape())?;
    let mut data = Vec::with_capacity(f.data.len());
    for (i, (&a, &b)) in f.data.iter().zip(&p.data).enumerate() {
        if b && !a {
            return Err(Error::MaskNotSubset {
                row: i / f.width,
                col: i % f.width,
            });
        }
        data.push(a && !b);
    }
    Ok(BinaryMask {
        height: f.height,
        width: f.width,
        data,
    })
}

/// Which denominator [`masked_mean_abs_diff`] divides by.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Denominator {
    /// Number of ones in the mask.
    MaskArea,
    /// Full `height * width` grid.
    FullArea,
}

/// `Σ |a − b| ⊙ m / D`.
pub fn masked_mean_abs_diff(
    a: &DisparityMap,
    b: &DisparityMap,
    m: &BinaryMask,
    denom: Denominator,
) -> Result<f64> {
    same_shape(a.shape(), b.shape())?;
    same_shape(a.shape(), m.shape())?;
    let mut sum = 0.0;
    let mut area = 0usize;
    for ((&x, &y), &on) in a.data.iter().zip(&b.data).zip(&m.data) {
        if on {
            sum += libm::fabs(x - y);
            area += 1;
        }
    }
    let d = match denom {
        Denominator::MaskArea => {
            if area == 0 {
                return Err(Error::EmptyMask);
            }
            area as f64
        }
        Denominator::FullArea => (a.height * a.width) as f64,
    };
    if sum == 0.0 {
        return Ok(0.0);
    }
    Ok(sum / d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn centered(h: usize, w: usize, bh: usize, bw: usize) -> BinaryMask {
        let (r0, c0) = ((h - bh) / 2, (w - bw) / 2);
        BinaryMask::from_fn(h, w, |y, x| y >= r0 && y < r0 + bh && x >= c0 && x < c0 + bw)
    }

    #[test]
    fn difference_ring() {
        let f = BinaryMask::ones(4, 4);
        let p = centered(4, 4, 2, 2);
        let d = mask_difference(&f, &p).unwrap();
        assert_eq!(d.count(), 12);
        assert!(!d.get(1, 1) && !d.get(2, 2) && d.get(0, 0));
    }

    #[test]
    fn difference_of_equal_masks_is_empty() {
        let p = centered(6, 6, 3, 2);
        assert!(mask_difference(&p, &p).unwrap().is_empty());
    }

    #[test]
    fn difference_box_minus_patch() {
        let b = BBox::new(32.0, 32.0, 20.0, 10.0, 1.0, 0);
        let f = BinaryMask::from_box(64, 64, &b);
        let p = BinaryMask::from_box(64, 64, &BBox::new(32.0, 32.0, 4.0, 4.0, 1.0, 0));
        assert_eq!(f.count(), 200);
        assert_eq!(mask_difference(&f, &p).unwrap().count(), 10 * 20 - 16);
    }

    #[test]
    fn difference_errors() {
        let f = centered(4, 4, 2, 2);
        let p = BinaryMask::ones(4, 4);
        assert_eq!(
            mask_difference(&f, &p),
            Err(Error::MaskNotSubset { row: 0, col: 0 })
        );
        assert!(matches!(
            mask_difference(&f, &BinaryMask::ones(4, 5)),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn mean_abs_diff_basics() {
        let a = DisparityMap::filled(3, 5, 1.0).unwrap();
        let b = DisparityMap::filled(3, 5, 0.0).unwrap();
        let m = BinaryMask::ones(3, 5);
        for d in [Denominator::MaskArea, Denominator::FullArea] {
            assert_eq!(masked_mean_abs_diff(&a, &b, &m, d).unwrap(), 1.0);
            assert_eq!(masked_mean_abs_diff(&a, &a, &m, d).unwrap(), 0.0);
        }
        let empty = BinaryMask::zeros(3, 5);
        assert_eq!(
            masked_mean_abs_diff(&a, &b, &empty, Denominator::MaskArea),
            Err(Error::EmptyMask)
        );
        assert_eq!(
            masked_mean_abs_diff(&a, &b, &empty, Denominator::FullArea).unwrap(),
            0.0
        );
    }

    #[test]
    fn constructors_reject_out_of_range() {
        assert!(ImageTensor::new(1, 1, vec![0.0, 0.5, 1.5]).is_err());
        assert!(ImageTensor::new(0, 1, vec![]).is_err());
        assert!(DisparityMap::new(1, 2, vec![0.2, f64::NAN]).is_err());
        assert!(Patch::new(1, vec![0.1, 0.2, -0.1]).is_err());
        let img = ImageTensor::from_clamped(1, 1, vec![-1.0, 0.5, 2.0]).unwrap();
        assert_eq!(img.data(), &[0.0, 0.5, 1.0]);
    }

    fn maps(n: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<bool>)> {
        (
            proptest::collection::vec(0.0..=1.0f64, n),
            proptest::collection::vec(0.0..=1.0f64, n),
            proptest::collection::vec(any::<bool>(), n),
        )
    }

    proptest! {
        #[test]
        fn clamp_is_idempotent(v in proptest::num::f64::ANY) {
            let once = clamp_unit(v);
            prop_assert!((0.0..=1.0).contains(&once));
            prop_assert_eq!(clamp_unit(once).to_bits(), once.to_bits());
        }

        #[test]
        fn difference_plus_patch_restores_focus(f in proptest::collection::vec(any::<bool>(), 48),
                                                 keep in proptest::collection::vec(any::<bool>(), 48)) {
            let fm = BinaryMask::new(6, 8, f.clone()).unwrap();
            let pm = BinaryMask::new(6, 8, f.iter().zip(&keep).map(|(&a, &b)| a && b).collect()).unwrap();
            let d = mask_difference(&fm, &pm).unwrap();
            for i in 0..48 {
                prop_assert_eq!(d.value(i) + pm.value(i), fm.value(i));
                prop_assert!(!(d.data()[i] && pm.data()[i]));
            }
        }

        #[test]
        fn mean_abs_diff_matches_loop((a, b, m) in maps(64)) {
            let am = DisparityMap::new(8, 8, a.clone()).unwrap();
            let bm = DisparityMap::new(8, 8, b.clone()).unwrap();
            let mm = BinaryMask::new(8, 8, m.clone()).unwrap();
            let mut num = 0.0;
            let mut area = 0.0;
            for y in 0..8 {
                for x in 0..8 {
                    let i = y * 8 + x;
                    if m[i] {
                        num += (a[i] - b[i]).abs();
                        area += 1.0;
                    }
                }
            }
            let full = masked_mean_abs_diff(&am, &bm, &mm, Denominator::FullArea).unwrap();
            prop_assert!((full - num / 64.0).abs() < 1e-12);
            let rev = masked_mean_abs_diff(&bm, &am, &mm, Denominator::FullArea).unwrap();
            prop_assert_eq!(full, rev);
            prop_assert!(full >= 0.0);
            if area > 0.0 {
                let local = masked_mean_abs_diff(&am, &bm, &mm, Denominator::MaskArea).unwrap();
                prop_assert!((local - num / area).abs() < 1e-12);
            }
        }
    }
}
