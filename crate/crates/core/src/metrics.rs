//! PSNR and SSIM, plus dataset evaluation.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::attention::FsaConfig;
use crate::error::{Error, Result};
use crate::imaging::{self, Image, ImagePair, ManifestEntry};
use crate::layers::ParamStore;
use crate::models::Generator;

/// SSIM window side and Gaussian width.
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = (0.01 * 255.0) * (0.01 * 255.0);
pub const SSIM_C2: f64 = (0.03 * 255.0) * (0.03 * 255.0);

/// Quality targets the evaluation report flags.
pub const PSNR_TARGET: f64 = 25.0;
pub const SSIM_TARGET: f64 = 0.75;

fn same_dims(a: &Image, b: &Image) -> Result<()> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(Error::shape(format!(
            "image dims differ: {}×{} vs {}×{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    Ok(())
}

/// PSNR over the joint RGB MSE; `f64::INFINITY` for identical images.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    same_dims(a, b)?;
    let sse: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum();
    let mse = sse / a.data().len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (255.0f64 * 255.0 / mse).log10())
}

/// BT.601 luminance plane.
pub fn luminance(img: &Image) -> Vec<f64> {
    img.data()
        .chunks_exact(3)
        .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
        .collect()
}

/// Normalized 1-D Gaussian taps of the SSIM window.
pub fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut w = [0.0; SSIM_WINDOW];
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// "Valid" separable Gaussian filter of a `w × h` plane.
fn filter_valid(plane: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ow, oh) = (w - SSIM_WINDOW + 1, h - SSIM_WINDOW + 1);
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * tmp[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM of the luminance channels over all valid 11×11 windows.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    same_dims(a, b)?;
    let (w, h) = (a.width(), a.height());
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::shape(format!(
            "SSIM needs images of at least {SSIM_WINDOW}×{SSIM_WINDOW}, got {w}×{h}"
        )));
    }
    if a == b {
        return Ok(1.0);
    }
    let (x, y) = (luminance(a), luminance(b));
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
    let k = gaussian_window();
    let [mx, my, sxx, syy, sxy] = [&x, &y, &xx, &yy, &xy].map(|p| filter_valid(p, w, h, &k));
    let total: f64 = (0..mx.len())
        .map(|i| {
            let (m1, m2) = (mx[i], my[i]);
            let v1 = sxx[i] - m1 * m1;
            let v2 = syy[i] - m2 * m2;
            let cov = sxy[i] - m1 * m2;
            ((2.0 * m1 * m2 + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((m1 * m1 + m2 * m2 + SSIM_C1) * (v1 + v2 + SSIM_C2))
        })
        .sum();
    Ok(total / mx.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub id: String,
    pub psnr: f64,
    pub ssim: f64,
}

impl MetricsRecord {
    pub fn compute(id: impl Into<String>, sr: &Image, hr: &Image) -> Result<Self> {
        Ok(MetricsRecord {
            id: id.into(),
            psnr: psnr(sr, hr)?,
            ssim: ssim(sr, hr)?,
        })
    }
}

/// Anything that maps an LR image to a 4× SR image.
pub trait SuperResolver: Sync {
    fn name(&self) -> String;
    fn super_resolve(&self, lr: &Image) -> Result<Image>;
}

/// Bicubic upsampling baseline.
pub struct Bicubic;

impl SuperResolver for Bicubic {
    fn name(&self) -> String {
        "bicubic".into()
    }

    fn super_resolve(&self, lr: &Image) -> Result<Image> {
        imaging::upscale_bicubic(lr)
    }
}

/// A trained generator with its parameters.
pub struct GeneratorResolver<'a> {
    pub generator: &'a Generator,
    pub store: &'a ParamStore,
    pub attention: FsaConfig,
}

impl SuperResolver for GeneratorResolver<'_> {
    fn name(&self) -> String {
        "model".into()
    }

    fn super_resolve(&self, lr: &Image) -> Result<Image> {
        let x = imaging::normalize_lr(lr);
        let y = self.generator.super_resolve(self.store, &x, self.attention)?;
        imaging::denormalize_sr(&y)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum RowOutcome {
    Scored(MetricsRecord),
    Failed { id: String, reason: String },
}

#[derive(Clone, Debug, PartialEq)]
pub struct SetSummary {
    pub name: String,
    /// Mean PSNR over finite values.
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub scored: usize,
    pub failed: usize,
    /// Rows with identical SR and HR (infinite PSNR), excluded from the PSNR mean.
    pub infinite_psnr: usize,
}

impl SetSummary {
    pub fn meets_targets(&self) -> (bool, bool) {
        (self.mean_psnr > PSNR_TARGET, self.mean_ssim > SSIM_TARGET)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub rows: Vec<RowOutcome>,
    pub summary: SetSummary,
}

/// Summarizes rows in their given order.
pub fn summarize(name: &str, rows: &[RowOutcome]) -> SetSummary {
    let scored: Vec<&MetricsRecord> = rows
        .iter()
        .filter_map(|r| match r {
            RowOutcome::Scored(m) => Some(m),
            RowOutcome::Failed { .. } => None,
        })
        .collect();
    let finite: Vec<f64> = scored.iter().map(|m| m.psnr).filter(|p| p.is_finite()).collect();
    let mean = |v: &[f64]| {
        if v.is_empty() {
            f64::NAN
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    let ssims: Vec<f64> = scored.iter().map(|m| m.ssim).collect();
    SetSummary {
        name: name.to_string(),
        mean_psnr: if finite.is_empty() && !scored.is_empty() {
            f64::INFINITY
        } else {
            mean(&finite)
        },
        mean_ssim: mean(&ssims),
        scored: scored.len(),
        failed: rows.len() - scored.len(),
        infinite_psnr: scored.len() - finite.len(),
    }
}

fn score_pair(resolver: &dyn SuperResolver, pair: &ImagePair) -> Result<MetricsRecord> {
    let sr = resolver.super_resolve(&pair.lr)?;
    MetricsRecord::compute(pair.id.clone(), &sr, &pair.hr)
}

/// Scores in-memory pairs; per-image work runs in parallel, the summary
/// is reduced in input order.
pub fn evaluate_pairs(resolver: &dyn SuperResolver, pairs: &[ImagePair]) -> Evaluation {
    let rows: Vec<RowOutcome> = pairs
        .par_iter()
        .map(|p| match score_pair(resolver, p) {
            Ok(m) => RowOutcome::Scored(m),
            Err(e) => RowOutcome::Failed {
                id: p.id.clone(),
                reason: e.to_string(),
            },
        })
        .collect();
    let summary = summarize(&resolver.name(), &rows);
    Evaluation { rows, summary }
}

/// Scores every manifest entry; unreadable images become failed rows.
pub fn evaluate_set(resolver: &dyn SuperResolver, manifest: impl AsRef<Path>) -> Result<Evaluation> {
    let entries = imaging::read_manifest(manifest)?;
    let rows: Vec<RowOutcome> = entries
        .par_iter()
        .map(|e: &ManifestEntry| match e.load().and_then(|p| score_pair(resolver, &p)) {
            Ok(m) => RowOutcome::Scored(m),
            Err(err) => RowOutcome::Failed {
                id: e.id(),
                reason: err.to_string(),
            },
        })
        .collect();
    let summary = summarize(&resolver.name(), &rows);
    Ok(Evaluation { rows, summary })
}

fn fmt_psnr(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v:.4}")
    }
}

/// Tab-separated report: one row per image, then one mean row per summary.
pub fn tsv_report(eval: &Evaluation, extra: &[&SetSummary]) -> String {
    let mut out = String::from("id\tpsnr\tssim\tstatus\n");
    for r in &eval.rows {
        match r {
            RowOutcome::Scored(m) => {
                let _ = writeln!(out, "{}\t{}\t{:.6}\tok", m.id, fmt_psnr(m.psnr), m.ssim);
            }
            RowOutcome::Failed { id, reason } => {
                let _ = writeln!(out, "{id}\t-\t-\tfailed: {}", reason.replace(['\t', '\n'], " "));
            }
        }
    }
    for s in extra.iter().copied().chain(std::iter::once(&eval.summary)) {
        let mut status = format!("scored={} failed={}", s.scored, s.failed);
        if s.infinite_psnr > 0 {
            let _ = write!(status, " infinite_psnr_excluded={}", s.infinite_psnr);
        }
        let _ = writeln!(out, "mean:{}\t{}\t{:.6}\t{status}", s.name, fmt_psnr(s.mean_psnr), s.mean_ssim);
    }
    out
}

/// `key=value` summary lines.
pub fn summary_kv(model: &SetSummary, baseline: Option<&SetSummary>) -> String {
    let mut out = String::new();
    let mut put = |prefix: &str, s: &SetSummary| {
        let _ = writeln!(out, "{prefix}.mean_psnr={}", fmt_psnr(s.mean_psnr));
        let _ = writeln!(out, "{prefix}.mean_ssim={:.6}", s.mean_ssim);
        let _ = writeln!(out, "{prefix}.scored={}", s.scored);
        let _ = writeln!(out, "{prefix}.failed={}", s.failed);
        let _ = writeln!(out, "{prefix}.infinite_psnr={}", s.infinite_psnr);
    };
    put(&model.name, model);
    if let Some(b) = baseline {
        put(&b.name, b);
    }
    let (p, s) = model.meets_targets();
    let _ = writeln!(out, "target.psnr_gt_{PSNR_TARGET}={p}");
    let _ = writeln!(out, "target.ssim_gt_{SSIM_TARGET}={s}");
    out
}
