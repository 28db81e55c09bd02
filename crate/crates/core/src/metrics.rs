//! Y-channel PSNR / SSIM and directory-level evaluation.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::degrade::list_pngs;
use crate::error::{Error, Result};
use crate::imaging::{crop_to_multiple, load_image, rgb_to_y, shave, Image};

/// Value reported for identical images.
pub const PSNR_CAP: f64 = 100.0;

fn same_shape(a: &Image, b: &Image) -> Result<()> {
    if (a.height(), a.width(), a.channels()) != (b.height(), b.width(), b.channels()) {
        return Err(Error::Shape(format!(
            "image shapes differ: {}x{}x{} vs {}x{}x{}",
            a.height(),
            a.width(),
            a.channels(),
            b.height(),
            b.width(),
            b.channels()
        )));
    }
    Ok(())
}

/// `10 log10(1 / MSE)` for values in `[0, 1]`, capped at [`PSNR_CAP`].
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    same_shape(a, b)?;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.data().len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn gaussian_1d(k: usize, sigma: f64) -> Vec<f64> {
    let r = (k / 2) as f64;
    let w: Vec<f64> = (0..k)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Valid-region separable filtering of a single-channel plane.
fn filter_valid(src: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = g.iter().enumerate().map(|(i, gi)| gi * src[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = g.iter().enumerate().map(|(i, gi)| gi * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM over the valid region with an 11x11 Gaussian window
/// (sigma 1.5) and dynamic range 1. Multi-channel images are averaged over
/// channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    same_shape(a, b)?;
    let (h, w, ch) = (a.height(), a.width(), a.channels());
    if h.min(w) < SSIM_WINDOW {
        return Err(Error::Shape(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        )));
    }
    let g = gaussian_1d(SSIM_WINDOW, SSIM_SIGMA);
    let (c1, c2) = (K1 * K1, K2 * K2);
    let mut total = 0.0;
    for c in 0..ch {
        let plane = |img: &Image| -> Vec<f64> { img.data().iter().skip(c).step_by(ch).copied().collect() };
        let (x, y) = (plane(a), plane(b));
        let prod = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(u, v)| u * v).collect() };
        let mx = filter_valid(&x, h, w, &g);
        let my = filter_valid(&y, h, w, &g);
        let sxx = filter_valid(&prod(&x, &x), h, w, &g);
        let syy = filter_valid(&prod(&y, &y), h, w, &g);
        let sxy = filter_valid(&prod(&x, &y), h, w, &g);
        let n = mx.len();
        let sum: f64 = (0..n)
            .map(|i| {
                let (ux, uy) = (mx[i], my[i]);
                let vx = sxx[i] - ux * ux;
                let vy = syy[i] - uy * uy;
                let cov = sxy[i] - ux * uy;
                ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
            })
            .sum();
        total += sum / n as f64;
    }
    Ok(total / ch as f64)
}

/// PSNR and SSIM of two RGB images on the shaved Y channel.
pub fn y_metrics(sr: &Image, hr: &Image, border: usize) -> Result<(f64, f64)> {
    let a = shave(&rgb_to_y(sr)?, border)?;
    let b = shave(&rgb_to_y(hr)?, border)?;
    Ok((psnr(&a, &b)?, ssim(&a, &b)?))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// Sorted by file name.
    pub rows: Vec<EvalRow>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub scale: usize,
    pub border: usize,
    /// Free-text description of how the inputs were produced, if known.
    pub degradation: Option<String>,
    /// Files present on only one side, excluded from the means.
    pub missing: Vec<String>,
}

impl EvalReport {
    pub fn from_rows(mut rows: Vec<EvalRow>, scale: usize, border: usize, missing: Vec<String>) -> Self {
        rows.sort_by(|a, b| a.name.cmp(&b.name));
        let n = rows.len().max(1) as f64;
        EvalReport {
            mean_psnr: rows.iter().map(|r| r.psnr).sum::<f64>() / n,
            mean_ssim: rows.iter().map(|r| r.ssim).sum::<f64>() / n,
            rows,
            scale,
            border,
            degradation: None,
            missing,
        }
    }

    /// `name,psnr,ssim` rows followed by a `MEAN` row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("name,psnr,ssim\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{:.4},{:.6}", r.name, r.psnr, r.ssim);
        }
        let _ = writeln!(s, "MEAN,{:.4},{:.6}", self.mean_psnr, self.mean_ssim);
        s
    }

    pub fn table(&self) -> String {
        let mut s = format!("scale x{}, shave {} px", self.scale, self.border);
        if let Some(d) = &self.degradation {
            let _ = write!(s, ", {d}");
        }
        s.push('\n');
        let _ = writeln!(s, "{:<32} {:>9} {:>8}", "image", "PSNR", "SSIM");
        for r in &self.rows {
            let _ = writeln!(s, "{:<32} {:>9.4} {:>8.4}", r.name, r.psnr, r.ssim);
        }
        let _ = writeln!(s, "{:<32} {:>9.4} {:>8.4}", "MEAN", self.mean_psnr, self.mean_ssim);
        for m in &self.missing {
            let _ = writeln!(s, "missing pair: {m}");
        }
        s
    }
}

/// Evaluate every PNG of `sr_dir` against the same-named file of `hr_dir`.
/// An HR image larger than its SR counterpart is center-cropped to a
/// multiple of `scale` first (the crop applied before degradation).
pub fn evaluate(sr_dir: &Path, hr_dir: &Path, scale: usize, border: usize) -> Result<EvalReport> {
    let names = |dir: &Path| -> Result<BTreeSet<String>> {
        Ok(list_pngs(dir)?
            .iter()
            .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
            .collect())
    };
    let (sr, hr) = (names(sr_dir)?, names(hr_dir)?);
    let paired: Vec<&String> = sr.intersection(&hr).collect();
    let missing: Vec<String> = sr.symmetric_difference(&hr).cloned().collect();
    if paired.is_empty() {
        return Err(Error::Data(format!(
            "no paired PNG files between {} and {}",
            sr_dir.display(),
            hr_dir.display()
        )));
    }
    let rows = paired
        .par_iter()
        .map(|name| {
            let s = load_image(sr_dir.join(name))?;
            let mut h = load_image(hr_dir.join(name))?;
            if (h.height(), h.width()) != (s.height(), s.width()) {
                h = crop_to_multiple(&h, scale)?;
            }
            if (h.height(), h.width()) != (s.height(), s.width()) {
                return Err(Error::Data(format!(
                    "{name}: SR is {}x{} but HR is {}x{}",
                    s.height(),
                    s.width(),
                    h.height(),
                    h.width()
                )));
            }
            let (psnr, ssim) = y_metrics(&s, &h, border)?;
            Ok(EvalRow {
                name: (*name).clone(),
                psnr,
                ssim,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_rows(rows, scale, border, missing))
}
