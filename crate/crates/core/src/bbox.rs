use serde::{Deserialize, Serialize};

/// Axis-aligned detection box in center format, pixel units.
///
/// A pixel `(row, col)` belongs to the box when its center
/// `(col + 0.5, row + 0.5)` lies in `[x0, x1) × [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub score: f64,
    pub class_id: u32,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64, score: f64, class_id: u32) -> Self {
        Self {
            cx,
            cy,
            w,
            h,
            score,
            class_id,
        }
    }

    /// Build from corner coordinates `(left, top, right, bottom)`.
    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64, score: f64, class_id: u32) -> Self {
        Self::new(
            0.5 * (x0 + x1),
            0.5 * (y0 + y1),
            x1 - x0,
            y1 - y0,
            score,
            class_id,
        )
    }

    pub fn x0(&self) -> f64 {
        self.cx - 0.5 * self.w
    }

    pub fn x1(&self) -> f64 {
        self.cx + 0.5 * self.w
    }

    pub fn y0(&self) -> f64 {
        self.cy - 0.5 * self.h
    }

    pub fn y1(&self) -> f64 {
        self.cy + 0.5 * self.h
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn is_valid(&self) -> bool {
        self.w > 0.0 && self.h > 0.0 && self.cx.is_finite() && self.cy.is_finite()
    }

    /// Half-open pixel ranges `(row0, row1, col0, col1)` covered by the box,
    /// clipped to the image, or `None` when no pixel center falls inside.
    pub fn pixel_span(&self, height: usize, width: usize) -> Option<(usize, usize, usize, usize)> {
        if !self.is_valid() {
            return None;
        }
        let (r0, r1) = span(self.y0(), self.y1(), height)?;
        let (c0, c1) = span(self.x0(), self.x1(), width)?;
        Some((r0, r1, c0, c1))
    }

    pub fn intersects_image(&self, height: usize, width: usize) -> bool {
        self.pixel_span(height, width).is_some()
    }
}

// Indices k with k + 0.5 in [lo, hi), clipped to [0, n).
fn span(lo: f64, hi: f64, n: usize) -> Option<(usize, usize)> {
    let a = libm::ceil(lo - 0.5).max(0.0);
    let b = libm::ceil(hi - 0.5).min(n as f64);
    if b > a {
        Some((a as usize, b as usize))
    } else {
        None
    }
}

/// Intersection over union of two boxes, in `[0, 1]`.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x1().min(b.x1()) - a.x0().max(b.x0())).max(0.0);
    let ih = (a.y1().min(b.y1()) - a.y0().max(b.y0())).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}
