//! RGB images, PNG I/O, bicubic resampling, normalization and aligned crops.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::error::{Error, Result};
use crate::models::SCALE;
use crate::tensor::Tensor;

/// 8-bit RGB image, row-major, interleaved channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Param(format!("image dims must be positive, got {width}×{height}")));
        }
        if data.len() != width * height * 3 {
            return Err(Error::Param(format!(
                "image data length {} does not match {width}×{height}×3",
                data.len()
            )));
        }
        Ok(Image { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Result<Self> {
        Image::new(width, height, rgb.repeat(width * height))
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [u8; 3]) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        Image::new(width, height, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn crop(&self, x: usize, y: usize, width: usize, height: usize) -> Result<Image> {
        if width == 0 || height == 0 || x + width > self.width || y + height > self.height {
            return Err(Error::Param(format!(
                "crop {width}×{height} at ({x}, {y}) outside {}×{} image",
                self.width, self.height
            )));
        }
        let mut data = Vec::with_capacity(width * height * 3);
        for row in y..y + height {
            let start = (row * self.width + x) * 3;
            data.extend_from_slice(&self.data[start..start + width * 3]);
        }
        Image::new(width, height, data)
    }
}

pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let decoded = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let rgb = match decoded {
        image::DynamicImage::ImageRgb8(rgb) => rgb,
        other => {
            return Err(Error::Decode {
                path: path.to_path_buf(),
                reason: format!("expected 8-bit RGB, found {:?}", other.color()),
            })
        }
    };
    let (w, h) = rgb.dimensions();
    Image::new(w as usize, h as usize, rgb.into_raw())
}

pub fn save_image(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let buf = image::RgbImage::from_raw(img.width as u32, img.height as u32, img.data.clone())
        .ok_or_else(|| Error::Param("image buffer size mismatch".into()))?;
    buf.save_with_format(path, image::ImageFormat::Png).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Data(format!("{}: {other}", path.display())),
    })
}

/// Catmull-Rom cubic convolution kernel (`a = −0.5`).
pub fn cubic_kernel(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

/// Per-output-index source taps `(index, weight)` along one axis.
///
/// Sample positions are pixel-center aligned. When shrinking, the kernel is
/// widened by the inverse scale so every source pixel contributes
/// (antialiasing). Out-of-range taps clamp to the edge.
pub fn resample_taps(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = dst as f64 / src as f64;
    let stretch = if scale < 1.0 { 1.0 / scale } else { 1.0 };
    let support = 2.0 * stretch;
    (0..dst)
        .map(|o| {
            let center = (o as f64 + 0.5) / scale - 0.5;
            let lo = (center - support).floor() as i64;
            let hi = (center + support).ceil() as i64;
            let mut taps: Vec<(usize, f64)> = Vec::new();
            let mut total = 0.0;
            for i in lo..=hi {
                let w = cubic_kernel((center - i as f64) / stretch);
                if w == 0.0 {
                    continue;
                }
                total += w;
                let idx = i.clamp(0, src as i64 - 1) as usize;
                match taps.iter_mut().find(|(j, _)| *j == idx) {
                    Some(t) => t.1 += w,
                    None => taps.push((idx, w)),
                }
            }
            taps.iter_mut().for_each(|t| t.1 /= total);
            taps
        })
        .collect()
}

/// Separable bicubic resampling to `width × height`.
pub fn bicubic_resample(img: &Image, width: usize, height: usize) -> Result<Image> {
    if width == 0 || height == 0 {
        return Err(Error::Param(format!("target dims must be positive, got {width}×{height}")));
    }
    let xt = resample_taps(img.width, width);
    let yt = resample_taps(img.height, height);
    // Horizontal pass into f64 rows, then vertical pass.
    let mut rows = vec![0.0; img.height * width * 3];
    for y in 0..img.height {
        for (x, taps) in xt.iter().enumerate() {
            for c in 0..3 {
                let v: f64 = taps
                    .iter()
                    .map(|&(i, w)| w * img.data[(y * img.width + i) * 3 + c] as f64)
                    .sum();
                rows[(y * width + x) * 3 + c] = v;
            }
        }
    }
    let mut data = vec![0u8; width * height * 3];
    for (y, taps) in yt.iter().enumerate() {
        for x in 0..width {
            for c in 0..3 {
                let v: f64 = taps.iter().map(|&(i, w)| w * rows[(i * width + x) * 3 + c]).sum();
                data[(y * width + x) * 3 + c] = quantize(v);
            }
        }
    }
    Image::new(width, height, data)
}

/// Rounds half up and clamps to `[0, 255]`.
fn quantize(v: f64) -> u8 {
    (v + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Bicubic LR induction at the model scale.
pub fn downscale(hr: &Image) -> Result<Image> {
    if !hr.width.is_multiple_of(SCALE) || !hr.height.is_multiple_of(SCALE) {
        return Err(Error::Data(format!(
            "HR image {}×{} is not divisible by the scale {SCALE}",
            hr.width, hr.height
        )));
    }
    bicubic_resample(hr, hr.width / SCALE, hr.height / SCALE)
}

pub fn upscale_bicubic(lr: &Image) -> Result<Image> {
    bicubic_resample(lr, lr.width * SCALE, lr.height * SCALE)
}

fn to_tensor(img: &Image, f: impl Fn(u8) -> f64) -> Tensor {
    let (w, h) = (img.width, img.height);
    Tensor::from_fn(&[1, 3, h, w], |i| {
        let (c, rest) = (i / (h * w), i % (h * w));
        f(img.data[rest * 3 + c])
    })
}

/// LR pixels to `[0, 1]` as `[1, 3, H, W]`.
pub fn normalize_lr(img: &Image) -> Tensor {
    to_tensor(img, |v| v as f64 / 255.0)
}

/// HR pixels to `[-1, 1]` as `[1, 3, H, W]`.
pub fn normalize_hr(img: &Image) -> Tensor {
    to_tensor(img, |v| v as f64 / 127.5 - 1.0)
}

/// Inverse of [`normalize_hr`] for one batch element, clamped and rounded half up.
pub fn denormalize_sr(t: &Tensor) -> Result<Image> {
    let (n, c, h, w) = t.dims4()?;
    if n != 1 || c != 3 {
        return Err(Error::shape(format!("expected [1, 3, H, W], got {:?}", t.shape())));
    }
    let d = t.data();
    let mut data = vec![0u8; h * w * 3];
    for ch in 0..3 {
        for p in 0..h * w {
            data[p * 3 + ch] = quantize((d[ch * h * w + p] + 1.0) * 127.5);
        }
    }
    Image::new(w, h, data)
}

/// Stacks equally sized images into one `[N, 3, H, W]` batch.
pub fn batch(images: &[&Image], normalize: fn(&Image) -> Tensor) -> Result<Tensor> {
    let parts: Vec<Tensor> = images.iter().map(|i| normalize(i)).collect();
    Tensor::concat_batch(&parts)
}

/// LR image with its 4× HR counterpart.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePair {
    pub id: String,
    pub lr: Image,
    pub hr: Image,
}

impl ImagePair {
    pub fn new(id: impl Into<String>, lr: Image, hr: Image) -> Result<Self> {
        if hr.width != SCALE * lr.width || hr.height != SCALE * lr.height {
            return Err(Error::Data(format!(
                "HR {}×{} is not {SCALE}× LR {}×{}",
                hr.width, hr.height, lr.width, lr.height
            )));
        }
        Ok(ImagePair { id: id.into(), lr, hr })
    }

    /// Pair with a bicubically induced LR image.
    pub fn from_hr(id: impl Into<String>, hr: Image) -> Result<Self> {
        let lr = downscale(&hr)?;
        ImagePair::new(id, lr, hr)
    }
}

/// Aligned LR/HR crops and their origins.
#[derive(Clone, Debug, PartialEq)]
pub struct CropPair {
    pub lr: Image,
    pub hr: Image,
    pub lr_origin: (usize, usize),
    pub hr_origin: (usize, usize),
}

/// Draws an `lr_crop`-sized LR window uniformly and the aligned HR window.
pub fn random_crop_pair<R: Rng + ?Sized>(pair: &ImagePair, lr_crop: usize, rng: &mut R) -> Result<CropPair> {
    let (lw, lh) = (pair.lr.width, pair.lr.height);
    if lr_crop == 0 || lr_crop > lw || lr_crop > lh {
        return Err(Error::Param(format!("crop size {lr_crop} does not fit LR image {lw}×{lh}")));
    }
    let x = rng.random_range(0..=lw - lr_crop);
    let y = rng.random_range(0..=lh - lr_crop);
    let hr_crop = SCALE * lr_crop;
    Ok(CropPair {
        lr: pair.lr.crop(x, y, lr_crop, lr_crop)?,
        hr: pair.hr.crop(SCALE * x, SCALE * y, hr_crop, hr_crop)?,
        lr_origin: (x, y),
        hr_origin: (SCALE * x, SCALE * y),
    })
}

/// One manifest line: HR path and optional LR path.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub hr: PathBuf,
    pub lr: Option<PathBuf>,
}

impl ManifestEntry {
    pub fn id(&self) -> String {
        self.hr
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| self.hr.display().to_string())
    }

    pub fn load(&self) -> Result<ImagePair> {
        let hr = load_image(&self.hr)?;
        match &self.lr {
            Some(lr) => ImagePair::new(self.id(), load_image(lr)?, hr),
            None => ImagePair::from_hr(self.id(), hr),
        }
    }
}

/// Parses a `hr_path<TAB>lr_path` manifest. Paths are relative to the
/// manifest's directory; `#` starts a comment line.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut entries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        let mut cols = line.split('\t');
        let hr = cols.next().unwrap_or("").trim();
        let lr = cols.next().map(str::trim).filter(|s| !s.is_empty());
        if hr.is_empty() || cols.next().is_some() {
            return Err(Error::Data(format!(
                "{}:{}: expected `hr_path<TAB>lr_path`",
                path.display(),
                lineno + 1
            )));
        }
        entries.push(ManifestEntry {
            hr: base.join(hr),
            lr: lr.map(|l| base.join(l)),
        });
    }
    Ok(entries)
}

pub fn write_manifest(path: impl AsRef<Path>, entries: &[(String, Option<String>)]) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::new();
    for (hr, lr) in entries {
        text.push_str(hr);
        if let Some(lr) = lr {
            text.push('\t');
            text.push_str(lr);
        }
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Loads every pair of a manifest, failing on the first unreadable entry.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<ImagePair>> {
    let pairs = read_manifest(path.as_ref())?
        .iter()
        .map(ManifestEntry::load)
        .collect::<Result<Vec<_>>>()?;
    if pairs.is_empty() {
        return Err(Error::Data(format!("{}: dataset is empty", path.as_ref().display())));
    }
    Ok(pairs)
}
