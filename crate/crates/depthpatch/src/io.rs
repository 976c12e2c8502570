//! PNG and JSON persistence. Every write goes through a temp file in the
//! target directory followed by a rename, so readers never see partial files.

use std::fs;
use std::io::{Cursor, Write};
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, ImageFormat, Luma, Rgb};
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use sha2::{Digest, Sha256};

use depthpatch_core::image::CHANNELS;
use depthpatch_core::{DisparityMap, ImageTensor, Patch};

use crate::error::{AppError, AppResult};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> AppResult<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(|e| AppError::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| AppError::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| AppError::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| AppError::io(path, e))?;
    tmp.persist(path).map_err(|e| AppError::io(path, e.error))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> AppResult<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| AppError::io(path, e))?;
    s.push('\n');
    write_atomic(path, s.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> AppResult<T> {
    let s = fs::read_to_string(path).map_err(|e| AppError::io(path, e))?;
    serde_json::from_str(&s).map_err(|e| AppError::io(path, e))
}

fn encode_png(img: DynamicImage, path: &Path) -> AppResult<Vec<u8>> {
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)
        .map_err(|e| AppError::io(path, e))?;
    Ok(out.into_inner())
}

fn decode_png(path: &Path, bytes: &[u8]) -> AppResult<DynamicImage> {
    image::load_from_memory_with_format(bytes, ImageFormat::Png).map_err(|e| AppError::io(path, e))
}

fn quantize(v: f64, max: f64) -> f64 {
    (v.clamp(0.0, 1.0) * max).round()
}

fn has_16_bits(img: &DynamicImage) -> bool {
    let c = img.color();
    c.bits_per_pixel() / c.channel_count() as u16 > 8
}

/// Planar `[0, 1]` values from an 8- or 16-bit PNG (grey is replicated).
fn planar_rgb(img: &DynamicImage) -> (usize, usize, Vec<f64>) {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let n = w * h;
    let mut data = vec![0.0; CHANNELS * n];
    if has_16_bits(img) {
        for (i, p) in img.to_rgb16().pixels().enumerate() {
            for c in 0..CHANNELS {
                data[c * n + i] = p.0[c] as f64 / 65535.0;
            }
        }
    } else {
        for (i, p) in img.to_rgb8().pixels().enumerate() {
            for c in 0..CHANNELS {
                data[c * n + i] = p.0[c] as f64 / 255.0;
            }
        }
    }
    (h, w, data)
}

fn rgb_image(height: usize, width: usize, data: &[f64], sixteen: bool) -> DynamicImage {
    let n = height * width;
    let (w, h) = (width as u32, height as u32);
    if sixteen {
        DynamicImage::ImageRgb16(ImageBuffer::from_fn(w, h, |x, y| {
            let i = y as usize * width + x as usize;
            Rgb(std::array::from_fn(|c| quantize(data[c * n + i], 65535.0) as u16))
        }))
    } else {
        DynamicImage::ImageRgb8(ImageBuffer::from_fn(w, h, |x, y| {
            let i = y as usize * width + x as usize;
            Rgb(std::array::from_fn(|c| quantize(data[c * n + i], 255.0) as u8))
        }))
    }
}

pub fn read_image(path: &Path) -> AppResult<ImageTensor> {
    let bytes = fs::read(path).map_err(|e| AppError::io(path, e))?;
    decode_image(path, &bytes)
}

/// Decode PNG bytes already read from `path`.
pub fn decode_image(path: &Path, bytes: &[u8]) -> AppResult<ImageTensor> {
    let (h, w, data) = planar_rgb(&decode_png(path, bytes)?);
    ImageTensor::new(h, w, data).map_err(|e| AppError::io(path, e))
}

/// 8-bit RGB PNG.
pub fn write_image(path: &Path, img: &ImageTensor) -> AppResult<()> {
    let png = encode_png(rgb_image(img.height(), img.width(), img.data(), false), path)?;
    write_atomic(path, &png)
}

/// How a stored disparity map relates to the model's raw output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisparitySidecar {
    pub normalization: String,
    pub raw_min: f64,
    pub raw_max: f64,
    pub height: usize,
    pub width: usize,
}

pub fn sidecar_path(png: &Path) -> PathBuf {
    png.with_extension("json")
}

/// 16-bit grey PNG plus a JSON sidecar next to it. `raw` is the model's
/// output range before per-image normalization, when known.
pub fn write_disparity(path: &Path, d: &DisparityMap, raw: Option<(f64, f64)>) -> AppResult<()> {
    let (h, w) = d.shape();
    let img = DynamicImage::ImageLuma16(ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        Luma([quantize(d.get(y as usize, x as usize), 65535.0) as u16])
    }));
    write_atomic(path, &encode_png(img, path)?)?;
    let (raw_min, raw_max) = raw.unwrap_or((0.0, 1.0));
    write_json(
        &sidecar_path(path),
        &DisparitySidecar {
            normalization: "per_image_min_max".into(),
            raw_min,
            raw_max,
            height: h,
            width: w,
        },
    )
}

pub fn read_disparity(path: &Path) -> AppResult<DisparityMap> {
    let bytes = fs::read(path).map_err(|e| AppError::io(path, e))?;
    let img = decode_png(path, &bytes)?.to_luma16();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.pixels().map(|p| p.0[0] as f64 / 65535.0).collect();
    DisparityMap::new(h, w, data).map_err(|e| AppError::io(path, e))
}

/// Everything needed to trust a stored patch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchManifest {
    pub side: usize,
    pub seed: u64,
    pub config_hash: String,
    pub epoch: usize,
    pub step: u64,
    /// SHA-256 of the PNG bytes.
    pub png_sha256: String,
}

pub fn manifest_path(png: &Path) -> PathBuf {
    png.with_extension("json")
}

/// Write `patch` as a lossless 16-bit PNG with its manifest next to it.
pub fn save_patch(path: &Path, patch: &Patch, mut manifest: PatchManifest) -> AppResult<PatchManifest> {
    let s = patch.side();
    let png = encode_png(rgb_image(s, s, patch.data(), true), path)?;
    manifest.side = s;
    manifest.png_sha256 = sha256_hex(&png);
    write_atomic(path, &png)?;
    write_json(&manifest_path(path), &manifest)?;
    Ok(manifest)
}

fn decode_patch(path: &Path, bytes: &[u8]) -> AppResult<Patch> {
    let (h, w, data) = planar_rgb(&decode_png(path, bytes)?);
    if h != w {
        return Err(AppError::Data(format!(
            "{}: patch must be square, got {w}x{h}",
            path.display()
        )));
    }
    Patch::new(h, data).map_err(|e| AppError::io(path, e))
}

/// Load a patch and check it against its manifest.
pub fn load_patch(path: &Path) -> AppResult<(Patch, PatchManifest)> {
    let bytes = fs::read(path).map_err(|e| AppError::io(path, e))?;
    let manifest: PatchManifest = read_json(&manifest_path(path))?;
    let digest = sha256_hex(&bytes);
    if digest != manifest.png_sha256 {
        return Err(AppError::Data(format!(
            "{}: PNG hash {digest} does not match manifest {}",
            path.display(),
            manifest.png_sha256
        )));
    }
    let patch = decode_patch(path, &bytes)?;
    if patch.side() != manifest.side {
        return Err(AppError::Data(format!(
            "{}: manifest says side {}, PNG has {}",
            path.display(),
            manifest.side,
            patch.side()
        )));
    }
    Ok((patch, manifest))
}

/// Load a patch that may come without a manifest (e.g. produced elsewhere).
/// A manifest that is present is still enforced.
pub fn load_patch_lenient(path: &Path) -> AppResult<Patch> {
    if manifest_path(path).exists() {
        return load_patch(path).map(|(p, _)| p);
    }
    log::warn!("{}: no manifest, loading the PNG unchecked", path.display());
    let bytes = fs::read(path).map_err(|e| AppError::io(path, e))?;
    decode_patch(path, &bytes)
}
