//! Victim depth models: the differentiable image → disparity contract, the
//! built-in toy network, and the synthetic scenes it is trained on.

pub mod layers;
pub mod scene;
pub mod toy;
pub mod train;

use alloc::boxed::Box;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{DisparityMap, ImageTensor, CHANNELS};

pub use scene::{generate_scene, generate_corpus, ObjectClass, SceneObject, SceneParams, SyntheticScene};
pub use toy::{ToyConfig, ToyModel};
pub use train::{train_toy_model, ToyTrainConfig, TrainReport};

/// Identity and input contract of a victim model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelHandle {
    pub name: String,
    /// `(height, width)` the network consumes.
    pub input_shape: (usize, usize),
    pub mean: [f64; CHANNELS],
    pub std: [f64; CHANNELS],
    pub frozen: bool,
}

/// Backward pass of one recorded forward call.
pub trait InputPullback {
    /// Map a gradient w.r.t. the raw disparity to a gradient w.r.t. the
    /// `[0, 1]` input image (planar, input-shape sized).
    fn pullback(&self, grad_raw: &[f64]) -> Vec<f64>;
}

/// A differentiable monocular depth network.
///
/// Implementations take `[0, 1]` RGB at `handle().input_shape` and return raw
/// (unnormalized) disparity at the same resolution, larger meaning closer.
/// Min/max normalization is applied by [`forward`] so every backend is treated
/// the same way.
pub trait DepthModel: Send + Sync {
    fn handle(&self) -> &ModelHandle;

    fn forward_raw(&self, image: &ImageTensor) -> Result<Vec<f64>>;

    fn forward_raw_with_pullback<'a>(
        &'a self,
        image: &ImageTensor,
    ) -> Result<(Vec<f64>, Box<dyn InputPullback + 'a>)>;

    /// Hex SHA-256 of the parameters; constant while the model is frozen.
    fn parameter_checksum(&self) -> String;
}

/// Per-image min/max normalization record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MinMax {
    pub min: f64,
    pub max: f64,
    argmin: usize,
    argmax: usize,
}

impl MinMax {
    pub fn range(&self) -> f64 {
        self.max - self.min
    }

    /// Undo the normalization of one value.
    pub fn denormalize(&self, v: f64) -> f64 {
        self.min + v * self.range()
    }
}

/// Rescale `raw` to `[0, 1]`. A constant map normalizes to all zeros.
pub fn normalize_minmax(raw: &[f64]) -> (Vec<f64>, MinMax) {
    let mut argmin = 0;
    let mut argmax = 0;
    for (i, &v) in raw.iter().enumerate() {
        if v < raw[argmin] {
            argmin = i;
        }
        if v > raw[argmax] {
            argmax = i;
        }
    }
    let mm = MinMax {
        min: raw[argmin],
        max: raw[argmax],
        argmin,
        argmax,
    };
    let s = mm.range();
    let out = if s > 0.0 {
        raw.iter().map(|&v| ((v - mm.min) / s).clamp(0.0, 1.0)).collect()
    } else {
        vec![0.0; raw.len()]
    };
    (out, mm)
}

/// Adjoint of [`normalize_minmax`] at the recorded extrema.
pub fn normalize_minmax_backward(norm: &[f64], mm: &MinMax, grad: &[f64]) -> Vec<f64> {
    let s = mm.range();
    if s <= 0.0 {
        return vec![0.0; grad.len()];
    }
    let sum_g: f64 = grad.iter().sum();
    let sum_gn: f64 = grad.iter().zip(norm).map(|(g, n)| g * n).sum();
    let mut out: Vec<f64> = grad.iter().map(|g| g / s).collect();
    out[mm.argmin] += (sum_gn - sum_g) / s;
    out[mm.argmax] -= sum_gn / s;
    out
}

fn shape_error(model: &dyn DepthModel, image: &ImageTensor) -> Error {
    Error::ShapeMismatch {
        expected: model.handle().input_shape,
        found: image.shape(),
    }
}

fn resized_input(model: &dyn DepthModel, image: &ImageTensor) -> Result<ImageTensor> {
    let (mh, mw) = model.handle().input_shape;
    let (h, w) = image.shape();
    let data = layers::resize_bilinear(image.data(), CHANNELS, h, w, mh, mw);
    ImageTensor::from_clamped(mh, mw, data)
}

/// Normalized disparity prediction. With `resize` the image is bilinearly
/// resampled to the model's input shape and the result back to the image's.
pub fn forward_with(model: &dyn DepthModel, image: &ImageTensor, resize: bool) -> Result<DisparityMap> {
    let (h, w) = image.shape();
    let raw = if image.shape() == model.handle().input_shape {
        model.forward_raw(image)?
    } else if resize {
        let (mh, mw) = model.handle().input_shape;
        let raw = model.forward_raw(&resized_input(model, image)?)?;
        layers::resize_bilinear(&raw, 1, mh, mw, h, w)
    } else {
        return Err(shape_error(model, image));
    };
    let (norm, _) = normalize_minmax(&raw);
    DisparityMap::new(h, w, norm)
}

/// Normalized disparity prediction at the model's input shape.
pub fn forward(model: &dyn DepthModel, image: &ImageTensor) -> Result<DisparityMap> {
    forward_with(model, image, false)
}

/// Prediction plus the means to pull a disparity gradient back to the image.
pub struct DifferentiableForward<'a> {
    pub disparity: DisparityMap,
    minmax: MinMax,
    pullback: Box<dyn InputPullback + 'a>,
    resize_from: Option<(usize, usize)>,
    model_shape: (usize, usize),
}

impl DifferentiableForward<'_> {
    pub fn minmax(&self) -> MinMax {
        self.minmax
    }

    /// Gradient w.r.t. the input image given a gradient w.r.t. the
    /// normalized disparity.
    pub fn backward(&self, grad_disparity: &[f64]) -> Vec<f64> {
        let g_raw = normalize_minmax_backward(self.disparity.data(), &self.minmax, grad_disparity);
        match self.resize_from {
            None => self.pullback.pullback(&g_raw),
            Some((h, w)) => {
                let (mh, mw) = self.model_shape;
                let mut g_model = vec![0.0; mh * mw];
                layers::resize_bilinear_backward(&g_raw, 1, mh, mw, h, w, &mut g_model);
                let g_in = self.pullback.pullback(&g_model);
                let mut g_img = vec![0.0; CHANNELS * h * w];
                layers::resize_bilinear_backward(&g_in, CHANNELS, h, w, mh, mw, &mut g_img);
                g_img
            }
        }
    }
}

pub fn forward_differentiable<'a>(
    model: &'a dyn DepthModel,
    image: &ImageTensor,
    resize: bool,
) -> Result<DifferentiableForward<'a>> {
    let model_shape = model.handle().input_shape;
    let (h, w) = image.shape();
    let (raw, pullback, resize_from) = if image.shape() == model_shape {
        let (raw, pb) = model.forward_raw_with_pullback(image)?;
        (raw, pb, None)
    } else if resize {
        let (raw, pb) = model.forward_raw_with_pullback(&resized_input(model, image)?)?;
        let raw = layers::resize_bilinear(&raw, 1, model_shape.0, model_shape.1, h, w);
        (raw, pb, Some((h, w)))
    } else {
        return Err(shape_error(model, image));
    };
    let (norm, minmax) = normalize_minmax(&raw);
    Ok(DifferentiableForward {
        disparity: DisparityMap::new(h, w, norm)?,
        minmax,
        pullback,
        resize_from,
        model_shape,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn normalize_constant_is_zero() {
        let (n, mm) = normalize_minmax(&[0.3; 5]);
        assert_eq!(n, vec![0.0; 5]);
        assert_eq!(normalize_minmax_backward(&n, &mm, &[1.0; 5]), vec![0.0; 5]);
    }

    #[test]
    fn normalize_round_trip_keeps_extrema() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let raw: Vec<f64> = (0..50).map(|_| rng.gen::<f64>() * 3.0 - 1.0).collect();
        let (n, mm) = normalize_minmax(&raw);
        let back: Vec<f64> = n.iter().map(|&v| mm.denormalize(v)).collect();
        for (a, b) in raw.iter().zip(&back) {
            assert!((a - b).abs() < 1e-12);
        }
        let argmax = |v: &[f64]| (0..v.len()).max_by(|&a, &b| v[a].total_cmp(&v[b])).unwrap();
        let argmin = |v: &[f64]| (0..v.len()).min_by(|&a, &b| v[a].total_cmp(&v[b])).unwrap();
        assert_eq!(argmax(&raw), argmax(&n));
        assert_eq!(argmin(&raw), argmin(&n));
    }

    #[test]
    fn normalize_backward_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let raw: Vec<f64> = (0..20).map(|_| rng.gen::<f64>()).collect();
        let g: Vec<f64> = (0..20).map(|_| rng.gen::<f64>() - 0.5).collect();
        let f = |r: &[f64]| -> f64 {
            normalize_minmax(r).0.iter().zip(&g).map(|(a, b)| a * b).sum()
        };
        let (n, mm) = normalize_minmax(&raw);
        let an = normalize_minmax_backward(&n, &mm, &g);
        for j in 0..20 {
            let h = 1e-7;
            let mut up = raw.clone();
            up[j] += h;
            let mut dn = raw.clone();
            dn[j] -= h;
            let fd = (f(&up) - f(&dn)) / (2.0 * h);
            assert!((fd - an[j]).abs() < 1e-6, "{j}: {fd} vs {}", an[j]);
        }
    }
}
