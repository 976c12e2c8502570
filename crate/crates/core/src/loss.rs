//! Penalized depth loss, total variation and the weighted objective.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{
    mask_difference, masked_mean_abs_diff, same_shape, BinaryMask, Denominator, DisparityMap,
    Patch, CHANNELS,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Weight on the depth term.
    pub alpha: f64,
    /// Weight on total variation.
    pub gamma: f64,
    pub use_d1: bool,
    pub use_d2: bool,
    /// Square the aggregated overlap term before adding the ring term.
    pub square_d1: bool,
    /// Normalization of both depth terms.
    pub denominator: Denominator,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            gamma: 2.0,
            use_d1: true,
            use_d2: true,
            square_d1: true,
            denominator: Denominator::FullArea,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.gamma >= 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be non-negative (alpha {}, gamma {})",
                self.alpha, self.gamma
            )));
        }
        if !self.use_d1 && !self.use_d2 {
            return Err(Error::Config(
                "at least one of use_d1 / use_d2 must be enabled".into(),
            ));
        }
        Ok(())
    }

    /// `L_depth` from its two aggregated components.
    pub fn combine(&self, l_d1: f64, l_d2: f64) -> f64 {
        let d1 = if self.square_d1 { l_d1 * l_d1 } else { l_d1 };
        let mut out = 0.0;
        if self.use_d1 {
            out += d1;
        }
        if self.use_d2 {
            out += l_d2;
        }
        out
    }

    /// `(∂L_depth/∂L_d1, ∂L_depth/∂L_d2)`.
    fn combine_grad(&self, l_d1: f64) -> (f64, f64) {
        let g1 = match (self.use_d1, self.square_d1) {
            (false, _) => 0.0,
            (true, true) => 2.0 * l_d1,
            (true, false) => 1.0,
        };
        (g1, if self.use_d2 { 1.0 } else { 0.0 })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub l_d1: f64,
    pub l_d2: f64,
    pub l_depth: f64,
    pub l_tv: f64,
    pub l_total: f64,
}

fn region_loss(
    d_t: &DisparityMap,
    d_adv: &DisparityMap,
    m: &BinaryMask,
    denom: Denominator,
) -> Result<f64> {
    match masked_mean_abs_diff(d_t, d_adv, m, denom) {
        // An empty region contributes nothing.
        Err(Error::EmptyMask) => Ok(0.0),
        other => other,
    }
}

/// Overlap term: `|d_t − d_adv|` averaged over the region under the patch.
pub fn depth_loss_d1(
    d_t: &DisparityMap,
    d_adv: &DisparityMap,
    m_p: &BinaryMask,
    denom: Denominator,
) -> Result<f64> {
    region_loss(d_t, d_adv, m_p, denom)
}

/// Ring term over `M_f − M_p`, the object pixels the patch does not cover.
pub fn depth_loss_d2(
    d_t: &DisparityMap,
    d_adv: &DisparityMap,
    m_f: &BinaryMask,
    m_p: &BinaryMask,
    denom: Denominator,
) -> Result<f64> {
    let ring = mask_difference(m_f, m_p)?;
    region_loss(d_t, d_adv, &ring, denom)
}

pub fn depth_loss(
    d_t: &DisparityMap,
    d_adv: &DisparityMap,
    m_f: &BinaryMask,
    m_p: &BinaryMask,
    w: &LossWeights,
) -> Result<f64> {
    w.validate()?;
    let d1 = depth_loss_d1(d_t, d_adv, m_p, w.denominator)?;
    let d2 = depth_loss_d2(d_t, d_adv, m_f, m_p, w.denominator)?;
    Ok(w.combine(d1, d2))
}

/// Depth loss components for one image and the gradient of `L_depth`
/// with respect to every pixel of `d_adv`.
#[derive(Debug, Clone)]
pub struct DepthLossGrad {
    pub l_d1: f64,
    pub l_d2: f64,
    pub l_depth: f64,
    pub grad: Vec<f64>,
}

pub fn depth_loss_with_grad(
    d_t: &DisparityMap,
    d_adv: &DisparityMap,
    m_f: &BinaryMask,
    m_p: &BinaryMask,
    w: &LossWeights,
) -> Result<DepthLossGrad> {
    w.validate()?;
    same_shape(d_t.shape(), d_adv.shape())?;
    let ring = mask_difference(m_f, m_p)?;
    let l_d1 = depth_loss_d1(d_t, d_adv, m_p, w.denominator)?;
    let l_d2 = region_loss(d_t, d_adv, &ring, w.denominator)?;
    let l_depth = w.combine(l_d1, l_d2);
    let (g1, g2) = w.combine_grad(l_d1);
    let n = d_t.data().len() as f64;
    let norm = |area: usize| match w.denominator {
        Denominator::FullArea => 1.0 / n,
        Denominator::MaskArea if area == 0 => 0.0,
        Denominator::MaskArea => 1.0 / area as f64,
    };
    let s1 = g1 * norm(m_p.count());
    let s2 = g2 * norm(ring.count());
    let grad = d_t
        .data()
        .iter()
        .zip(d_adv.data())
        .enumerate()
        .map(|(i, (&t, &a))| {
            let scale = if m_p.data()[i] {
                s1
            } else if ring.data()[i] {
                s2
            } else {
                return 0.0;
            };
            // d|a − t|/da, with subgradient 0 at ties
            let diff = a - t;
            if diff > 0.0 {
                scale
            } else if diff < 0.0 {
                -scale
            } else {
                0.0
            }
        })
        .collect();
    Ok(DepthLossGrad {
        l_d1,
        l_d2,
        l_depth,
        grad,
    })
}

/// Total variation over interior neighbors (no padding, no wraparound),
/// summed over channels: `Σ √((P[i+1,j] − P[i,j])² + (P[i,j+1] − P[i,j])²)`.
pub fn tv_loss(patch: &Patch) -> Result<f64> {
    tv_loss_with_grad(patch).map(|(v, _)| v)
}

pub fn tv_loss_with_grad(patch: &Patch) -> Result<(f64, Vec<f64>)> {
    let s = patch.side();
    if s < 2 {
        return Err(Error::OutOfRange(format!(
            "total variation needs a patch side of at least 2, got {s}"
        )));
    }
    let p = patch.data();
    let mut grad = vec![0.0; p.len()];
    let mut total = 0.0;
    for c in 0..CHANNELS {
        let base = c * s * s;
        for i in 0..s - 1 {
            for j in 0..s - 1 {
                let at = base + i * s + j;
                let down = p[at + s] - p[at];
                let right = p[at + 1] - p[at];
                let norm = libm::sqrt(down * down + right * right);
                total += norm;
                if norm > 0.0 {
                    let (gd, gr) = (down / norm, right / norm);
                    grad[at + s] += gd;
                    grad[at + 1] += gr;
                    grad[at] -= gd + gr;
                }
            }
        }
    }
    Ok((total, grad))
}

/// Assemble a [`LossReport`] with `l_total = alpha · l_depth + gamma · l_tv`.
pub fn total_loss(l_d1: f64, l_d2: f64, l_depth: f64, l_tv: f64, w: &LossWeights) -> LossReport {
    LossReport {
        l_d1,
        l_d2,
        l_depth,
        l_tv,
        l_total: w.alpha * l_depth + w.gamma * l_tv,
    }
}

/// How the target disparity fills the focus region.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetMode {
    /// Target disparity 0 (farthest) inside the focus mask.
    #[default]
    ConstantFar,
    /// Each focus pixel copies the clean disparity of the nearest pixel
    /// outside the mask (Euclidean distance, ties to the first in raster order).
    BorderFill,
}

pub fn make_target_disparity(
    d_clean: &DisparityMap,
    m_f: &BinaryMask,
    mode: TargetMode,
) -> Result<DisparityMap> {
    same_shape(d_clean.shape(), m_f.shape())?;
    let (h, w) = d_clean.shape();
    let mut out = d_clean.data().to_vec();
    match mode {
        TargetMode::ConstantFar => {
            for (v, &on) in out.iter_mut().zip(m_f.data()) {
                if on {
                    *v = 0.0;
                }
            }
        }
        TargetMode::BorderFill => {
            if m_f.count() == h * w {
                return Err(Error::Config(
                    "border fill needs at least one pixel outside the focus mask".into(),
                ));
            }
            for y in 0..h {
                for x in 0..w {
                    if m_f.get(y, x) {
                        let (ny, nx) = nearest_outside(m_f, y, x);
                        out[y * w + x] = d_clean.get(ny, nx);
                    }
                }
            }
        }
    }
    DisparityMap::new(h, w, out)
}

// Search square rings of growing Chebyshev radius; a ring at radius r holds
// points at Euclidean distance >= r, so stop once the best is within r.
fn nearest_outside(m: &BinaryMask, y: usize, x: usize) -> (usize, usize) {
    let (h, w) = m.shape();
    let (yi, xi) = (y as isize, x as isize);
    let mut best: Option<(isize, usize, usize)> = None;
    let max_r = h.max(w) as isize;
    for r in 1..=max_r {
        if let Some((d2, _, _)) = best {
            if d2 <= r * r {
                break;
            }
        }
        for dy in -r..=r {
            let yy = yi + dy;
            if yy < 0 || yy >= h as isize {
                continue;
            }
            let edge = dy == -r || dy == r;
            let mut dx = -r;
            while dx <= r {
                let xx = xi + dx;
                if xx >= 0 && xx < w as isize && !m.get(yy as usize, xx as usize) {
                    let d2 = dy * dy + dx * dx;
                    let cand = (d2, yy as usize, xx as usize);
                    let better = match best {
                        None => true,
                        Some(b) => (cand.0, cand.1, cand.2) < b,
                    };
                    if better {
                        best = Some(cand);
                    }
                }
                dx += if edge { 1 } else { 2 * r };
            }
        }
    }
    let (_, by, bx) = best.expect("mask has an outside pixel");
    (by, bx)
}
