//! A small encoder-decoder depth network with skip connections.
//!
//! Layout for `widths = [w0, .., wL-1]` on an `H × W` input:
//! 2×2 mean-pool stem, then per level a 3×3 conv + SiLU (levels after the
//! first are preceded by another 2×2 pool). The decoder walks back up with
//! bilinear 2× upsampling, concatenation with the encoder feature of that
//! level and a 3×3 conv + SiLU. A 1×1 conv + sigmoid head runs at half
//! resolution and is bilinearly upsampled to `H × W`.

use alloc::boxed::Box;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::layers::{
    avg_pool2, avg_pool2_backward, resize_bilinear, resize_bilinear_backward, sigmoid, silu,
    silu_backward, ConvSpec,
};
use super::{DepthModel, InputPullback, ModelHandle};
use crate::error::{Error, Result};
use crate::image::{ImageTensor, CHANNELS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyConfig {
    pub input_shape: (usize, usize),
    /// Channel count per encoder level, finest first.
    pub widths: Vec<usize>,
    pub mean: [f64; CHANNELS],
    pub std: [f64; CHANNELS],
    /// Seed of the weight initialization.
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            input_shape: (64, 128),
            widths: vec![8, 16, 32, 64],
            mean: [0.5; CHANNELS],
            std: [0.25; CHANNELS],
            seed: 0,
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        let levels = self.widths.len();
        if levels == 0 || self.widths.contains(&0) {
            return Err(Error::Config("widths must be non-empty and positive".into()));
        }
        let div = 1usize << levels;
        let (h, w) = self.input_shape;
        if h == 0 || w == 0 || h % div != 0 || w % div != 0 {
            return Err(Error::Config(format!(
                "input shape {h}x{w} must be divisible by {div} for {levels} levels"
            )));
        }
        if self.std.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Config("normalization std must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Architecture {
    enc: Vec<ConvSpec>,
    /// Decoder convs indexed by the level they produce (0..levels-1).
    dec: Vec<ConvSpec>,
    head: ConvSpec,
    n_params: usize,
}

impl Architecture {
    fn new(widths: &[usize]) -> Self {
        let levels = widths.len();
        let mut off = 0;
        let mut conv = |cin: usize, cout: usize, k: usize| {
            let w_off = off;
            let b_off = w_off + cout * cin * k * k;
            off = b_off + cout;
            ConvSpec {
                cin,
                cout,
                k,
                w_off,
                b_off,
            }
        };
        let mut enc = Vec::with_capacity(levels);
        for (i, &w) in widths.iter().enumerate() {
            let cin = if i == 0 { CHANNELS } else { widths[i - 1] };
            enc.push(conv(cin, w, 3));
        }
        let mut dec_rev = Vec::new();
        let mut carried = widths[levels - 1];
        for i in (0..levels.saturating_sub(1)).rev() {
            dec_rev.push(conv(carried + widths[i], widths[i], 3));
            carried = widths[i];
        }
        dec_rev.reverse();
        let head = conv(widths[0], 1, 1);
        Self {
            enc,
            dec: dec_rev,
            head,
            n_params: off,
        }
    }

    fn levels(&self) -> usize {
        self.enc.len()
    }
}

/// Activations recorded by one forward pass.
struct Tape {
    /// Level sizes `(h, w)`, level 0 at half input resolution.
    sizes: Vec<(usize, usize)>,
    enc_in: Vec<Vec<f64>>,
    enc_pre: Vec<Vec<f64>>,
    enc_sig: Vec<Vec<f64>>,
    dec_in: Vec<Vec<f64>>,
    dec_pre: Vec<Vec<f64>>,
    dec_sig: Vec<Vec<f64>>,
    head_in: Vec<f64>,
    head_out: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    handle: ModelHandle,
    config: ToyConfig,
    arch_params: usize,
    params: Vec<f64>,
}

impl ToyModel {
    /// Randomly initialized, unfrozen network.
    pub fn new(config: ToyConfig) -> Result<Self> {
        config.validate()?;
        let arch = Architecture::new(&config.widths);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = vec![0.0; arch.n_params];
        for spec in arch.enc.iter().chain(&arch.dec).chain(core::iter::once(&arch.head)) {
            let fan_in = (spec.cin * spec.k * spec.k) as f64;
            let bound = libm::sqrt(6.0 / fan_in);
            for v in &mut params[spec.w_off..spec.w_off + spec.weight_len()] {
                *v = rng.gen_range(-bound..bound);
            }
        }
        Self::from_parts(config, params, false)
    }

    /// Rebuild from stored parameters.
    pub fn from_parts(config: ToyConfig, params: Vec<f64>, frozen: bool) -> Result<Self> {
        config.validate()?;
        let arch = Architecture::new(&config.widths);
        if params.len() != arch.n_params {
            return Err(Error::Config(format!(
                "expected {} parameters, got {}",
                arch.n_params,
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::OutOfRange("non-finite model parameter".into()));
        }
        Ok(Self {
            handle: ModelHandle {
                name: "toy".to_string(),
                input_shape: config.input_shape,
                mean: config.mean,
                std: config.std,
                frozen,
            },
            config,
            arch_params: arch.n_params,
            params,
        })
    }

    pub fn config(&self) -> &ToyConfig {
        &self.config
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn param_count(&self) -> usize {
        self.arch_params
    }

    pub fn is_frozen(&self) -> bool {
        self.handle.frozen
    }

    pub fn freeze(&mut self) {
        self.handle.frozen = true;
    }

    /// Mutable parameters; refused once frozen.
    pub fn params_mut(&mut self) -> Result<&mut [f64]> {
        if self.handle.frozen {
            return Err(Error::Config("model is frozen".into()));
        }
        Ok(&mut self.params)
    }

    fn arch(&self) -> Architecture {
        Architecture::new(&self.config.widths)
    }

    fn check(&self, image: &ImageTensor) -> Result<()> {
        if image.shape() != self.config.input_shape {
            return Err(Error::ShapeMismatch {
                expected: self.config.input_shape,
                found: image.shape(),
            });
        }
        Ok(())
    }

    fn run(&self, arch: &Architecture, image: &ImageTensor) -> (Vec<f64>, Tape) {
        let (h, w) = self.config.input_shape;
        let n = h * w;
        let p = &self.params;
        let mut x = image.data().to_vec();
        for c in 0..CHANNELS {
            let (m, s) = (self.config.mean[c], self.config.std[c]);
            for v in &mut x[c * n..(c + 1) * n] {
                *v = (*v - m) / s;
            }
        }
        let levels = arch.levels();
        let mut sizes = Vec::with_capacity(levels);
        let mut enc_in = Vec::with_capacity(levels);
        let mut enc_pre = Vec::with_capacity(levels);
        let mut enc_sig = Vec::with_capacity(levels);
        let mut acts: Vec<Vec<f64>> = Vec::with_capacity(levels);

        let (mut lh, mut lw) = (h / 2, w / 2);
        let mut input = avg_pool2(&x, CHANNELS, h, w);
        for (i, spec) in arch.enc.iter().enumerate() {
            if i > 0 {
                input = avg_pool2(&acts[i - 1], spec.cin, lh, lw);
                lh /= 2;
                lw /= 2;
            }
            let pre = spec.forward(p, &input, lh, lw);
            let (act, sig) = silu(&pre);
            acts.push(act);
            enc_sig.push(sig);
            sizes.push((lh, lw));
            enc_in.push(core::mem::take(&mut input));
            enc_pre.push(pre);
        }

        let mut dec_in = vec![Vec::new(); levels - 1];
        let mut dec_pre = vec![Vec::new(); levels - 1];
        let mut dec_sig = vec![Vec::new(); levels - 1];
        let mut cur = acts[levels - 1].clone();
        let mut cur_c = arch.enc[levels - 1].cout;
        for i in (0..levels - 1).rev() {
            let (ch, cw) = sizes[i + 1];
            let (fh, fw) = sizes[i];
            let mut cat = resize_bilinear(&cur, cur_c, ch, cw, fh, fw);
            cat.extend_from_slice(&acts[i]);
            let spec = &arch.dec[i];
            let pre = spec.forward(p, &cat, fh, fw);
            let (act, sig) = silu(&pre);
            cur = act;
            cur_c = spec.cout;
            dec_sig[i] = sig;
            dec_in[i] = cat;
            dec_pre[i] = pre;
        }

        let (h0, w0) = sizes[0];
        let z = arch.head.forward(p, &cur, h0, w0);
        let s: Vec<f64> = z.iter().map(|&v| sigmoid(v)).collect();
        let out = resize_bilinear(&s, 1, h0, w0, h, w);
        let tape = Tape {
            sizes,
            enc_in,
            enc_pre,
            enc_sig,
            dec_in,
            dec_pre,
            dec_sig,
            head_in: cur,
            head_out: s,
        };
        (out, tape)
    }

    /// Backward through a recorded pass. Returns the input-image gradient
    /// when `want_input`, and accumulates parameter gradients into `gparams`.
    fn backprop(
        &self,
        arch: &Architecture,
        tape: &Tape,
        grad_out: &[f64],
        want_input: bool,
        mut gparams: Option<&mut [f64]>,
    ) -> Vec<f64> {
        let (h, w) = self.config.input_shape;
        let p = &self.params;
        let levels = arch.levels();
        let (h0, w0) = tape.sizes[0];

        let mut g_s = vec![0.0; h0 * w0];
        resize_bilinear_backward(grad_out, 1, h0, w0, h, w, &mut g_s);
        for (g, &s) in g_s.iter_mut().zip(&tape.head_out) {
            *g *= s * (1.0 - s);
        }
        let mut g_cur = vec![0.0; tape.head_in.len()];
        arch.head.backward(
            p,
            &tape.head_in,
            &g_s,
            h0,
            w0,
            Some(&mut g_cur),
            gparams.as_deref_mut(),
        );

        let mut g_act: Vec<Vec<f64>> = arch
            .enc
            .iter()
            .zip(&tape.sizes)
            .map(|(s, &(lh, lw))| vec![0.0; s.cout * lh * lw])
            .collect();
        for i in 0..levels - 1 {
            let spec = &arch.dec[i];
            let (fh, fw) = tape.sizes[i];
            let (ch, cw) = tape.sizes[i + 1];
            silu_backward(&tape.dec_pre[i], &tape.dec_sig[i], &mut g_cur);
            let mut g_cat = vec![0.0; tape.dec_in[i].len()];
            spec.backward(
                p,
                &tape.dec_in[i],
                &g_cur,
                fh,
                fw,
                Some(&mut g_cat),
                gparams.as_deref_mut(),
            );
            let up_c = spec.cin - arch.enc[i].cout;
            let (g_up, g_skip) = g_cat.split_at(up_c * fh * fw);
            for (a, b) in g_act[i].iter_mut().zip(g_skip) {
                *a += b;
            }
            let mut g_coarse = vec![0.0; up_c * ch * cw];
            resize_bilinear_backward(g_up, up_c, ch, cw, fh, fw, &mut g_coarse);
            g_cur = g_coarse;
        }
        for (a, b) in g_act[levels - 1].iter_mut().zip(&g_cur) {
            *a += b;
        }

        let mut g_image = Vec::new();
        for i in (0..levels).rev() {
            let spec = &arch.enc[i];
            let (lh, lw) = tape.sizes[i];
            let mut g_pre = core::mem::take(&mut g_act[i]);
            silu_backward(&tape.enc_pre[i], &tape.enc_sig[i], &mut g_pre);
            let need_in = i > 0 || want_input;
            let mut g_in = if need_in {
                vec![0.0; tape.enc_in[i].len()]
            } else {
                Vec::new()
            };
            spec.backward(
                p,
                &tape.enc_in[i],
                &g_pre,
                lh,
                lw,
                if need_in { Some(&mut g_in) } else { None },
                gparams.as_deref_mut(),
            );
            if i > 0 {
                let (ph, pw) = tape.sizes[i - 1];
                avg_pool2_backward(&g_in, spec.cin, ph, pw, &mut g_act[i - 1]);
            } else if want_input {
                g_image = vec![0.0; CHANNELS * h * w];
                avg_pool2_backward(&g_in, CHANNELS, h, w, &mut g_image);
                let n = h * w;
                for c in 0..CHANNELS {
                    let s = self.config.std[c];
                    for v in &mut g_image[c * n..(c + 1) * n] {
                        *v /= s;
                    }
                }
            }
        }
        g_image
    }

    /// Raw output and the parameter gradient of `<output, grad_fn(output)>`
    /// style losses: `grad_fn` maps the raw output to its loss gradient.
    pub fn param_gradient(
        &self,
        image: &ImageTensor,
        grad_fn: impl FnOnce(&[f64]) -> Vec<f64>,
        gparams: &mut [f64],
    ) -> Result<Vec<f64>> {
        self.check(image)?;
        let arch = self.arch();
        let (out, tape) = self.run(&arch, image);
        let g = grad_fn(&out);
        self.backprop(&arch, &tape, &g, false, Some(gparams));
        Ok(out)
    }
}

struct ToyPullback<'a> {
    model: &'a ToyModel,
    arch: Architecture,
    tape: Tape,
}

impl InputPullback for ToyPullback<'_> {
    fn pullback(&self, grad_raw: &[f64]) -> Vec<f64> {
        self.model.backprop(&self.arch, &self.tape, grad_raw, true, None)
    }
}

impl DepthModel for ToyModel {
    fn handle(&self) -> &ModelHandle {
        &self.handle
    }

    fn forward_raw(&self, image: &ImageTensor) -> Result<Vec<f64>> {
        self.check(image)?;
        Ok(self.run(&self.arch(), image).0)
    }

    fn forward_raw_with_pullback<'a>(
        &'a self,
        image: &ImageTensor,
    ) -> Result<(Vec<f64>, Box<dyn InputPullback + 'a>)> {
        self.check(image)?;
        let arch = self.arch();
        let (out, tape) = self.run(&arch, image);
        Ok((
            out,
            Box::new(ToyPullback {
                model: self,
                arch,
                tape,
            }),
        ))
    }

    fn parameter_checksum(&self) -> String {
        params_checksum(&self.params)
    }
}

/// Hex SHA-256 over the little-endian bytes of `params`.
pub fn params_checksum(params: &[f64]) -> String {
    let mut hasher = Sha256::new();
    for v in params {
        hasher.update(v.to_le_bytes());
    }
    let digest = hasher.finalize();
    let mut s = String::with_capacity(64);
    for b in digest.iter() {
        let _ = write!(s, "{b:02x}");
    }
    s
}
