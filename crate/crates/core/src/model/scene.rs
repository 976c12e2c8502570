//! Procedural street scenes with exact disparity and boxes.
//!
//! A sky band sits above a jittered horizon; the ground plane's disparity
//! grows linearly from 0 at the horizon to 1 at the bottom edge. Each object
//! stands on the ground at a depth layer and gets the ground disparity of its
//! contact row, so it is strictly closer than anything it occludes.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bbox::{iou, BBox};
use crate::error::{Error, Result};
use crate::image::{DisparityMap, ImageTensor, CHANNELS};
use crate::pipeline::Interval;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectClass {
    Car,
    Pedestrian,
}

impl ObjectClass {
    pub fn class_id(self) -> u32 {
        match self {
            ObjectClass::Car => 0,
            ObjectClass::Pedestrian => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneParams {
    pub height: usize,
    pub width: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Probability that an object is a car rather than a pedestrian.
    pub car_probability: f64,
    /// Number of discrete depth layers; layer 0 is the nearest.
    pub depth_layers: usize,
    /// Apparent-size factor of the nearest and the farthest layer.
    pub nearest_scale: f64,
    pub farthest_scale: f64,
    /// Box heights in pixels at scale 1.
    pub car_height: f64,
    pub pedestrian_height: f64,
    /// Width / height.
    pub car_aspect: f64,
    pub pedestrian_aspect: f64,
    /// Horizon row as a fraction of the height.
    pub horizon: Interval,
    /// Placements overlapping an earlier object above this IoU are redrawn.
    pub max_overlap_iou: f64,
    pub max_attempts: usize,
    /// Force every object onto this layer.
    pub fixed_layer: Option<usize>,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            height: 64,
            width: 128,
            min_objects: 1,
            max_objects: 3,
            car_probability: 0.7,
            depth_layers: 5,
            nearest_scale: 1.0,
            farthest_scale: 0.45,
            car_height: 26.0,
            pedestrian_height: 34.0,
            car_aspect: 2.0,
            pedestrian_aspect: 0.4,
            horizon: Interval(0.35, 0.5),
            max_overlap_iou: 0.3,
            max_attempts: 100,
            fixed_layer: None,
        }
    }
}

impl SceneParams {
    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.height < 4 || self.width < 4 {
            return cfg(format!("scene size {}x{} is too small", self.height, self.width));
        }
        if self.min_objects > self.max_objects {
            return cfg(format!(
                "min_objects {} exceeds max_objects {}",
                self.min_objects, self.max_objects
            ));
        }
        if !(0.0..=1.0).contains(&self.car_probability) {
            return cfg("car_probability must be in [0, 1]".into());
        }
        if self.depth_layers == 0 {
            return cfg("depth_layers must be at least 1".into());
        }
        if let Some(l) = self.fixed_layer {
            if l >= self.depth_layers {
                return cfg(format!("fixed_layer {l} >= depth_layers {}", self.depth_layers));
            }
        }
        let hz = self.horizon;
        if !(hz.lo() > 0.0 && hz.hi() < 1.0 && hz.lo() <= hz.hi()) {
            return cfg("horizon must lie inside (0, 1)".into());
        }
        if !(self.farthest_scale > 0.0 && self.farthest_scale <= self.nearest_scale && self.nearest_scale <= 1.0)
        {
            return cfg("need 0 < farthest_scale <= nearest_scale <= 1".into());
        }
        if self.max_objects > 0 {
            // The largest object at the nearest layer must fit under the highest horizon.
            for class in [ObjectClass::Car, ObjectClass::Pedestrian] {
                let (bh, bw) = self.box_size(class, self.nearest_scale);
                if bh > self.height || bw > self.width {
                    return cfg(format!(
                        "{class:?} box {bw}x{bh} does not fit in a {}x{} frame",
                        self.width, self.height
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn layer_scale(&self, layer: usize) -> f64 {
        if self.depth_layers == 1 {
            return self.nearest_scale;
        }
        let t = layer as f64 / (self.depth_layers - 1) as f64;
        self.nearest_scale + (self.farthest_scale - self.nearest_scale) * t
    }

    /// `(height, width)` of an object box at apparent scale `f`.
    fn box_size(&self, class: ObjectClass, f: f64) -> (usize, usize) {
        let (base, aspect) = match class {
            ObjectClass::Car => (self.car_height, self.car_aspect),
            ObjectClass::Pedestrian => (self.pedestrian_height, self.pedestrian_aspect),
        };
        let bh = libm::round(base * f).max(2.0);
        let bw = libm::round(bh * aspect).max(2.0);
        (bh as usize, bw as usize)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub bbox: BBox,
    pub class: ObjectClass,
    pub layer: usize,
    /// Ground-plane disparity assigned to the object (before normalization).
    pub disparity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub image: ImageTensor,
    pub true_disparity: DisparityMap,
    pub objects: Vec<SceneObject>,
    /// Horizon position in rows from the top edge.
    pub horizon: f64,
}

impl SyntheticScene {
    /// Unnormalized ground-plane disparity at a vertical position (0 above
    /// the horizon).
    pub fn ground_disparity(&self, row: f64) -> f64 {
        let h = self.true_disparity.height() as f64;
        ((row - self.horizon) / (h - self.horizon)).clamp(0.0, 1.0)
    }

    pub fn boxes(&self) -> Vec<BBox> {
        self.objects.iter().map(|o| o.bbox).collect()
    }
}

fn rgb<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> [f64; CHANNELS] {
    [rng.gen_range(lo..hi), rng.gen_range(lo..hi), rng.gen_range(lo..hi)]
}

fn inside_ellipse(b: &BBox, r: usize, c: usize) -> bool {
    let dx = (c as f64 + 0.5 - b.cx) / (0.5 * b.w);
    let dy = (r as f64 + 0.5 - b.cy) / (0.5 * b.h);
    dx * dx + dy * dy <= 1.0
}

/// Render one scene.
pub fn generate_scene<R: RngCore>(rng: &mut R, params: &SceneParams) -> Result<SyntheticScene> {
    params.validate()?;
    let (h, w) = (params.height, params.width);
    let n = h * w;
    let horizon = rng.gen_range(params.horizon.lo()..=params.horizon.hi()) * h as f64;
    let ground_disp = |row_edge: f64| ((row_edge - horizon) / (h as f64 - horizon)).clamp(0.0, 1.0);

    // Objects, far to near.
    let count = rng.gen_range(params.min_objects..=params.max_objects);
    let mut objects: Vec<SceneObject> = Vec::with_capacity(count);
    for k in 0..count {
        let class = if rng.gen_bool(params.car_probability) {
            ObjectClass::Car
        } else {
            ObjectClass::Pedestrian
        };
        let mut placed = None;
        for _ in 0..params.max_attempts {
            let layer = match params.fixed_layer {
                Some(l) => l,
                None => rng.gen_range(0..params.depth_layers),
            };
            let f = params.layer_scale(layer);
            let (bh, bw) = params.box_size(class, f);
            let contact = libm::round(horizon + f * (h as f64 - horizon)).min(h as f64) as usize;
            if contact < bh || bw > w || contact as f64 <= horizon {
                continue;
            }
            let x0 = rng.gen_range(0..=w - bw);
            let bbox = BBox::from_corners(
                x0 as f64,
                (contact - bh) as f64,
                (x0 + bw) as f64,
                contact as f64,
                1.0,
                class.class_id(),
            );
            if objects.iter().any(|o| iou(&o.bbox, &bbox) > params.max_overlap_iou) {
                continue;
            }
            placed = Some(SceneObject {
                bbox,
                class,
                layer,
                disparity: ground_disp(contact as f64),
            });
            break;
        }
        match placed {
            Some(o) => objects.push(o),
            None => {
                return Err(Error::Config(format!(
                    "could not place object {} of {count} after {} attempts",
                    k + 1,
                    params.max_attempts
                )))
            }
        }
    }
    objects.sort_by(|a, b| a.disparity.total_cmp(&b.disparity));

    // Background.
    let mut img = vec![0.0; CHANNELS * n];
    let mut disp = vec![0.0; n];
    let sky_top = [rng.gen_range(0.25..0.45), rng.gen_range(0.45..0.6), rng.gen_range(0.75..0.95)];
    let sky_low = [rng.gen_range(0.7..0.85), rng.gen_range(0.8..0.9), rng.gen_range(0.9..1.0)];
    let ground_base = rng.gen_range(0.3..0.45);
    let tint = rgb(rng, -0.04, 0.04);
    for r in 0..h {
        let center = r as f64 + 0.5;
        for c in 0..w {
            let i = r * w + c;
            if center <= horizon {
                let t = center / horizon;
                for ch in 0..CHANNELS {
                    img[ch * n + i] = sky_top[ch] + (sky_low[ch] - sky_top[ch]) * t;
                }
            } else {
                let g = ground_disp(center);
                disp[i] = g;
                // Far ground is hazier; stripes get denser towards the horizon.
                let stripe = if libm::floor(8.0 / (g + 0.05)) as i64 % 2 == 0 { 0.04 } else { -0.04 };
                let noise = rng.gen_range(-0.03..0.03);
                for ch in 0..CHANNELS {
                    img[ch * n + i] = ground_base + tint[ch] + 0.15 * (1.0 - g) + stripe + noise;
                }
            }
        }
    }

    // Painter's order: far objects first.
    for o in &objects {
        let (r0, r1, c0, c1) = o.bbox.pixel_span(h, w).expect("object box inside frame");
        let (bh, bw) = ((r1 - r0) as f64, (c1 - c0) as f64);
        match o.class {
            ObjectClass::Car => {
                let body = rgb(rng, 0.1, 0.9);
                let glass = [rng.gen_range(0.1..0.2), rng.gen_range(0.15..0.25), rng.gen_range(0.25..0.35)];
                for r in r0..r1 {
                    let v = (r - r0) as f64 / bh;
                    for c in c0..c1 {
                        let u = (c - c0) as f64 / bw;
                        let i = r * w + c;
                        let color = if v < 0.35 && (0.15..0.85).contains(&u) {
                            glass
                        } else if v >= 0.8 && ((0.1..0.3).contains(&u) || (0.7..0.9).contains(&u)) {
                            [0.05; CHANNELS]
                        } else {
                            let shade = 1.0 - 0.25 * v;
                            [body[0] * shade, body[1] * shade, body[2] * shade]
                        };
                        let noise = rng.gen_range(-0.02..0.02);
                        for ch in 0..CHANNELS {
                            img[ch * n + i] = color[ch] + noise;
                        }
                        disp[i] = o.disparity;
                    }
                }
            }
            ObjectClass::Pedestrian => {
                let top = rgb(rng, 0.2, 0.95);
                let legs = rgb(rng, 0.05, 0.5);
                for r in r0..r1 {
                    let v = (r - r0) as f64 / bh;
                    for c in c0..c1 {
                        if !inside_ellipse(&o.bbox, r, c) {
                            continue;
                        }
                        let i = r * w + c;
                        let color = if v < 0.55 { top } else { legs };
                        let noise = rng.gen_range(-0.02..0.02);
                        for ch in 0..CHANNELS {
                            img[ch * n + i] = color[ch] + noise;
                        }
                        disp[i] = o.disparity;
                    }
                }
            }
        }
    }

    let (lo, hi) = disp
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if hi > lo {
        for v in &mut disp {
            *v = (*v - lo) / (hi - lo);
        }
    }
    Ok(SyntheticScene {
        image: ImageTensor::from_clamped(h, w, img)?,
        true_disparity: DisparityMap::new(h, w, disp)?,
        objects,
        horizon,
    })
}

/// `count` scenes; scene `i` draws from stream `i` of `seed`, so any prefix of
/// a corpus is itself reproducible.
pub fn generate_corpus(seed: u64, count: usize, params: &SceneParams) -> Result<Vec<SyntheticScene>> {
    (0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            generate_scene(&mut rng, params)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    
    #[test]
    fn nearest_object_has_max_disparity() {
        let params = SceneParams {
            min_objects: 1,
            max_objects: 1,
            fixed_layer: Some(0),
            ..Default::default()
        };
        for seed in 0..10 {
            let s = generate_scene(&mut ChaCha8Rng::seed_from_u64(seed), &params).unwrap();
            let b = s.objects[0].bbox;
            let (r0, r1, c0, c1) = b.pixel_span(64, 128).unwrap();
            let d = &s.true_disparity;
            let max = d.data().iter().cloned().fold(0.0, f64::max);
            // the bottom-centre pixel belongs to the object for both shapes
            assert_eq!(d.get(r1 - 1, (c0 + c1) / 2), max);
            assert!(r0 < r1);
        }
    }

    #[test]
    fn background_only_scene() {
        let params = SceneParams {
            min_objects: 0,
            max_objects: 0,
            ..Default::default()
        };
        let s = generate_scene(&mut ChaCha8Rng::seed_from_u64(1), &params).unwrap();
        assert!(s.objects.is_empty());
        assert!(s.boxes().is_empty());
    }

    #[test]
    fn corpus_is_reproducible() {
        let p = SceneParams::default();
        let a = generate_corpus(7, 100, &p).unwrap();
        let b = generate_corpus(7, 100, &p).unwrap();
        assert_eq!(a, b);
        let c = generate_corpus(8, 3, &p).unwrap();
        assert_ne!(a[0], c[0]);
    }

    #[test]
    fn objects_are_closer_than_what_they_cover() {
        let p = SceneParams::default();
        for s in generate_corpus(3, 40, &p).unwrap() {
            for o in &s.objects {
                let (r0, r1, _, _) = o.bbox.pixel_span(64, 128).unwrap();
                for r in r0..r1 {
                    assert!(s.ground_disparity(r as f64 + 0.5) < o.disparity);
                }
            }
        }
    }

    #[test]
    fn overconstrained_spec_errors() {
        let too_big = SceneParams {
            car_height: 80.0,
            ..Default::default()
        };
        assert!(matches!(
            generate_scene(&mut ChaCha8Rng::seed_from_u64(0), &too_big),
            Err(Error::Config(_))
        ));
        let crowded = SceneParams {
            min_objects: 30,
            max_objects: 30,
            max_attempts: 20,
            ..Default::default()
        };
        assert!(generate_scene(&mut ChaCha8Rng::seed_from_u64(0), &crowded).is_err());
    }

    #[test]
    fn boxes_exact_and_unit_range() {
        let s = generate_scene(&mut ChaCha8Rng::seed_from_u64(5), &SceneParams::default()).unwrap();
        for o in &s.objects {
            let b = o.bbox;
            assert_eq!(b.x0().fract(), 0.0);
            assert_eq!(b.y1().fract(), 0.0);
            assert_eq!(b.score, 1.0);
        }
        assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
