//! Bicubic resampling and the BI / BD / DN degradation models.

use std::fmt;
use std::path::{Path, PathBuf};

use rand_core::SeedableRng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::imaging::{crop_to_multiple, load_image, save_image, Image};
use crate::rng::{fnv1a, Xoshiro256StarStar};

/// Keys cubic convolution kernel with `a = -0.5`.
pub fn bicubic_kernel(t: f64) -> f64 {
    let a = -0.5;
    let x = t.abs();
    if x <= 1.0 {
        (a + 2.0) * x * x * x - (a + 3.0) * x * x + 1.0
    } else if x < 2.0 {
        a * x * x * x - 5.0 * a * x * x + 8.0 * a * x - 4.0 * a
    } else {
        0.0
    }
}

/// Per-output-sample source indices and weights along one axis.
struct Contributions {
    taps: usize,
    index: Vec<usize>,
    weight: Vec<f64>,
}

/// Sample positions follow the imresize convention: output pixel `i`
/// (1-based) maps to `u = i / scale + 0.5 (1 - 1 / scale)`. With
/// antialiasing on a downscale the kernel is stretched by `1 / scale`.
fn contributions(in_len: usize, out_len: usize, antialias: bool) -> Contributions {
    let scale = out_len as f64 / in_len as f64;
    let stretch = antialias && scale < 1.0;
    let width = if stretch { 4.0 / scale } else { 4.0 };
    let taps = width.ceil() as usize + 2;
    let mut index = Vec::with_capacity(out_len * taps);
    let mut weight = Vec::with_capacity(out_len * taps);
    for i in 1..=out_len {
        let u = i as f64 / scale + 0.5 * (1.0 - 1.0 / scale);
        let left = (u - width / 2.0).floor() as i64;
        let mut row = Vec::with_capacity(taps);
        for j in 0..taps as i64 {
            let src = left + j;
            let d = u - src as f64;
            let w = if stretch {
                scale * bicubic_kernel(scale * d)
            } else {
                bicubic_kernel(d)
            };
            row.push((src, w));
        }
        let total: f64 = row.iter().map(|r| r.1).sum();
        for (src, w) in row {
            // 1-based source position, clamped to the edge.
            index.push((src - 1).clamp(0, in_len as i64 - 1) as usize);
            weight.push(w / total);
        }
    }
    Contributions { taps, index, weight }
}

/// Separable bicubic resize to `out_h x out_w` (height first), clamp-to-edge,
/// output clipped to `[0, 1]`.
pub fn resize_bicubic(img: &Image, out_h: usize, out_w: usize, antialias: bool) -> Result<Image> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::Shape(format!("resize target {out_h}x{out_w} is empty")));
    }
    let (h, w, ch) = (img.height(), img.width(), img.channels());
    let cy = contributions(h, out_h, antialias);
    let cx = contributions(w, out_w, antialias);

    let mut mid = vec![0.0; out_h * w * ch];
    mid.par_chunks_mut(w * ch).enumerate().for_each(|(oy, row)| {
        for t in 0..cy.taps {
            let k = oy * cy.taps + t;
            let (src, wt) = (cy.index[k], cy.weight[k]);
            if wt == 0.0 {
                continue;
            }
            let line = &img.data()[src * w * ch..(src + 1) * w * ch];
            for (o, &v) in row.iter_mut().zip(line) {
                *o += wt * v;
            }
        }
    });

    let mut out = vec![0.0; out_h * out_w * ch];
    out.par_chunks_mut(out_w * ch).enumerate().for_each(|(oy, row)| {
        let line = &mid[oy * w * ch..(oy + 1) * w * ch];
        for ox in 0..out_w {
            for c in 0..ch {
                let mut acc = 0.0;
                for t in 0..cx.taps {
                    let k = ox * cx.taps + t;
                    acc += cx.weight[k] * line[cx.index[k] * ch + c];
                }
                row[ox * ch + c] = acc.clamp(0.0, 1.0);
            }
        }
    });
    Image::new(out_h, out_w, ch, out)
}

/// Normalized `k x k` Gaussian, row-major.
pub fn gaussian_kernel2d(k: usize, sigma: f64) -> Result<Vec<f64>> {
    if k.is_multiple_of(2) {
        return Err(Error::Config(format!("Gaussian kernel size must be odd, got {k}")));
    }
    if sigma.is_nan() || sigma <= 0.0 {
        return Err(Error::Config(format!("Gaussian sigma must be positive, got {sigma}")));
    }
    let r = (k / 2) as f64;
    let mut w: Vec<f64> = (0..k * k)
        .map(|i| {
            let (y, x) = ((i / k) as f64 - r, (i % k) as f64 - r);
            (-(x * x + y * y) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    Ok(w)
}

/// Filter with a square kernel, replicating edge pixels.
pub fn blur(img: &Image, kernel: &[f64], k: usize) -> Result<Image> {
    if kernel.len() != k * k || k.is_multiple_of(2) {
        return Err(Error::Config(format!("kernel must be {k}x{k} with odd k")));
    }
    let (h, w, ch) = (img.height() as i64, img.width() as i64, img.channels());
    let r = (k / 2) as i64;
    let mut out = vec![0.0; img.data().len()];
    out.par_chunks_mut(w as usize * ch).enumerate().for_each(|(y, row)| {
        for x in 0..w {
            for c in 0..ch {
                let mut acc = 0.0;
                for dy in -r..=r {
                    let sy = (y as i64 + dy).clamp(0, h - 1) as usize;
                    for dx in -r..=r {
                        let sx = (x + dx).clamp(0, w - 1) as usize;
                        acc += kernel[((dy + r) as usize) * k + (dx + r) as usize] * img.at(sy, sx, c);
                    }
                }
                row[x as usize * ch + c] = acc;
            }
        }
    });
    Image::new(img.height(), img.width(), ch, out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DegradationModel {
    /// Bicubic downsampling.
    Bi,
    /// Gaussian blur, then bicubic downsampling.
    Bd,
    /// Bicubic downsampling, then additive Gaussian noise.
    Dn,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DegradationSpec {
    pub model: DegradationModel,
    pub scale: usize,
    pub blur_sigma: f64,
    pub blur_kernel: usize,
    /// Noise standard deviation on the 0-255 scale.
    pub noise_level: f64,
    pub seed: u64,
}

impl DegradationSpec {
    pub fn bi(scale: usize) -> Self {
        DegradationSpec {
            model: DegradationModel::Bi,
            scale,
            blur_sigma: 1.6,
            blur_kernel: 7,
            noise_level: 30.0,
            seed: 0,
        }
    }

    pub fn bd() -> Self {
        DegradationSpec {
            model: DegradationModel::Bd,
            ..Self::bi(3)
        }
    }

    pub fn dn(seed: u64) -> Self {
        DegradationSpec {
            model: DegradationModel::Dn,
            seed,
            ..Self::bi(3)
        }
    }

    /// `bi`, `bd` or `dn` (case-insensitive) at `scale`, validated.
    pub fn parse(model: &str, scale: usize, seed: u64) -> Result<Self> {
        let spec = match model.to_ascii_lowercase().as_str() {
            "bi" => Self::bi(scale),
            "bd" => DegradationSpec { scale, ..Self::bd() },
            "dn" => DegradationSpec {
                scale,
                ..Self::dn(seed)
            },
            other => {
                return Err(Error::Config(format!(
                    "unknown degradation model `{other}` (expected bi, bd or dn)"
                )))
            }
        };
        let spec = DegradationSpec { seed, ..spec };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        match self.model {
            DegradationModel::Bi if !(2..=4).contains(&self.scale) => {
                Err(Error::Config(format!("BI scale must be 2, 3 or 4, got {}", self.scale)))
            }
            DegradationModel::Bd | DegradationModel::Dn if self.scale != 3 => Err(Error::Config(format!(
                "{} degradation is defined for x3 only, got x{}",
                self.dir_name(),
                self.scale
            ))),
            _ if self.blur_kernel.is_multiple_of(2) => Err(Error::Config(format!(
                "blur kernel must be odd, got {}",
                self.blur_kernel
            ))),
            _ if self.noise_level.is_nan() || self.noise_level < 0.0 => Err(Error::Config(format!(
                "noise level must be non-negative, got {}",
                self.noise_level
            ))),
            _ => Ok(()),
        }
    }

    /// Output directory name in batch mode: `X2`, `X3`, `X4`, `BD` or `DN`.
    pub fn dir_name(&self) -> String {
        match self.model {
            DegradationModel::Bi => format!("X{}", self.scale),
            DegradationModel::Bd => "BD".into(),
            DegradationModel::Dn => "DN".into(),
        }
    }
}

impl fmt::Display for DegradationSpec {
    fn fmt(&self, f: &mut fmt::Formatter) -> fmt::Result {
        match self.model {
            DegradationModel::Bi => write!(f, "BI x{}", self.scale),
            DegradationModel::Bd => write!(
                f,
                "BD x{} (gaussian {}x{}, sigma {})",
                self.scale, self.blur_kernel, self.blur_kernel, self.blur_sigma
            ),
            DegradationModel::Dn => write!(
                f,
                "DN x{} (noise {}/255, seed {})",
                self.scale, self.noise_level, self.seed
            ),
        }
    }
}

/// Apply `spec` to an HR image, center-cropping it first so both extents
/// divide by the scale. Returns the LR image in continuous `[0, 1]` values.
pub fn degrade(hr: &Image, spec: &DegradationSpec) -> Result<Image> {
    spec.validate()?;
    let hr = crop_to_multiple(hr, spec.scale)?;
    let (h, w) = (hr.height() / spec.scale, hr.width() / spec.scale);
    match spec.model {
        DegradationModel::Bi => resize_bicubic(&hr, h, w, true),
        DegradationModel::Bd => {
            let k = gaussian_kernel2d(spec.blur_kernel, spec.blur_sigma)?;
            resize_bicubic(&blur(&hr, &k, spec.blur_kernel)?, h, w, true)
        }
        DegradationModel::Dn => {
            let mut lr = resize_bicubic(&hr, h, w, true)?;
            if spec.noise_level > 0.0 {
                let normal = Normal::new(0.0, spec.noise_level / 255.0).map_err(|e| Error::Config(e.to_string()))?;
                let mut rng = Xoshiro256StarStar::seed_from_u64(spec.seed);
                for v in lr.data_mut() {
                    *v = (*v + normal.sample(&mut rng)).clamp(0.0, 1.0);
                }
            }
            Ok(lr)
        }
    }
}

/// Upscale by an integer factor with bicubic interpolation.
pub fn upscale_bicubic(img: &Image, scale: usize) -> Result<Image> {
    resize_bicubic(img, img.height() * scale, img.width() * scale, true)
}

/// Sorted PNG files in `dir`.
pub fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for e in entries {
        let p = e.map_err(|e| Error::io(dir, e))?.path();
        if p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")) {
            files.push(p);
        }
    }
    files.sort();
    Ok(files)
}

/// Degrade every PNG in `input` into `output/<X2|X3|X4|BD|DN>/` under the
/// same file name. Noise is seeded per file from `spec.seed` and the file
/// name, so results do not depend on processing order.
pub fn degrade_dir(input: &Path, output: &Path, spec: &DegradationSpec) -> Result<Vec<PathBuf>> {
    spec.validate()?;
    let files = list_pngs(input)?;
    if files.is_empty() {
        return Err(Error::Data(format!("no PNG files in {}", input.display())));
    }
    let dest = output.join(spec.dir_name());
    std::fs::create_dir_all(&dest).map_err(|e| Error::io(&dest, e))?;
    files
        .par_iter()
        .map(|src| {
            let name = src.file_name().expect("listed files have names");
            let per_file = DegradationSpec {
                seed: spec.seed ^ fnv1a(name.as_encoded_bytes()),
                ..spec.clone()
            };
            let lr = degrade(&load_image(src)?, &per_file)?;
            let out = dest.join(name);
            save_image(&lr, &out)?;
            Ok(out)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_values() {
        assert_eq!(bicubic_kernel(0.0), 1.0);
        assert_eq!(bicubic_kernel(1.0), 0.0);
        assert_eq!(bicubic_kernel(2.0), 0.0);
        assert_eq!(bicubic_kernel(-2.5), 0.0);
        for i in 0..1000 {
            let phi = i as f64 / 1000.0;
            let s: f64 = (-1..=2).map(|t| bicubic_kernel(phi - t as f64)).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_and_constant_resizes() {
        let img = Image::from_fn(9, 13, 3, |y, x, c| ((y * 7 + x * 3 + c) % 11) as f64 / 10.0).unwrap();
        let same = resize_bicubic(&img, 9, 13, true).unwrap();
        for (a, b) in same.data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-6);
        }
        let flat = Image::filled(12, 18, 3, 0.37).unwrap();
        for (h, w) in [(4, 6), (24, 36), (7, 5)] {
            let r = resize_bicubic(&flat, h, w, true).unwrap();
            assert!(r.data().iter().all(|v| (v - 0.37).abs() < 1e-12));
        }
    }

    #[test]
    fn ramp_survives_downscale() {
        let img = Image::from_fn(30, 60, 1, |_, x, _| 0.1 + 0.01 * x as f64).unwrap();
        let r = resize_bicubic(&img, 10, 20, true).unwrap();
        // Output column j samples input position 3j + 1 (0-based).
        for y in 0..10 {
            for x in 2..18 {
                let expect = 0.1 + 0.01 * (3 * x + 1) as f64;
                assert!((r.at(y, x, 0) - expect).abs() < 1e-4, "{x}");
            }
        }
    }

    #[test]
    fn gaussian_properties() {
        let k = gaussian_kernel2d(7, 1.6).unwrap();
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for i in 0..7 {
            for j in 0..7 {
                assert_eq!(k[i * 7 + j], k[j * 7 + i]);
                assert_eq!(k[i * 7 + j], k[(6 - i) * 7 + j]);
            }
        }
        let ratio = k[3 * 7 + 3] / k[0];
        assert!((ratio / (18.0 / (2.0 * 1.6 * 1.6f64)).exp() - 1.0).abs() < 1e-12);
        assert!(gaussian_kernel2d(6, 1.0).is_err());
    }

    #[test]
    fn spec_invariants() {
        assert!(DegradationSpec::parse("bd", 2, 0)
            .unwrap_err()
            .to_string()
            .contains("x3 only"));
        assert!(DegradationSpec::parse("dn", 4, 0).is_err());
        assert!(DegradationSpec::parse("bi", 5, 0).is_err());
        assert!(DegradationSpec::parse("xx", 3, 0).is_err());
        assert_eq!(DegradationSpec::parse("BI", 4, 0).unwrap().dir_name(), "X4");
    }

    #[test]
    fn degraded_extents_divide_the_cropped_hr() {
        let img = Image::filled(20, 31, 3, 0.25).unwrap();
        for spec in [
            DegradationSpec::bi(2),
            DegradationSpec::bi(4),
            DegradationSpec::bd(),
            DegradationSpec::dn(1),
        ] {
            let lr = degrade(&img, &spec).unwrap();
            assert_eq!((lr.height(), lr.width()), (20 / spec.scale, 31 / spec.scale));
        }
        let bi = degrade(&img, &DegradationSpec::bi(3)).unwrap();
        assert!(bi.data().iter().all(|v| (v - 0.25).abs() < 1e-12));
    }

    #[test]
    fn noiseless_dn_is_bi() {
        let img = Image::from_fn(18, 21, 3, |y, x, c| ((y * x + c) % 17) as f64 / 16.0).unwrap();
        let dn = DegradationSpec {
            noise_level: 0.0,
            ..DegradationSpec::dn(5)
        };
        assert_eq!(
            degrade(&img, &dn).unwrap(),
            degrade(&img, &DegradationSpec::bi(3)).unwrap()
        );
    }
}
