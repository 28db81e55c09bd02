#![allow(dead_code)]

use mprnet::imaging::Image;
use mprnet::{Result, Shape, Tape, Tensor, Var};

/// splitmix64, mirrored by the Python scripts that produced frozen values.
pub struct SplitMix(u64);

impl SplitMix {
    pub fn new(seed: u64) -> Self {
        SplitMix(seed)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in `[0, 1)` with 53 bits.
    pub fn unit(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.unit()
    }

    pub fn below(&mut self, n: usize) -> usize {
        (self.next_u64() % n as u64) as usize
    }
}

pub fn seeded(shape: Shape, seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    let mut r = SplitMix::new(seed);
    Tensor::from_fn(shape, |_, _, _, _| r.range(lo, hi))
}

/// Values bounded away from zero: magnitude in `[0.05, 1]`, random sign.
pub fn seeded_away_from_zero(shape: Shape, seed: u64) -> Tensor<f64> {
    let mut r = SplitMix::new(seed);
    Tensor::from_fn(shape, |_, _, _, _| {
        let m = r.range(0.05, 1.0);
        if r.unit() < 0.5 {
            -m
        } else {
            m
        }
    })
}

/// A random permutation of evenly spaced values, so no two entries are
/// within `1e-3` of each other (keeps max pooling away from ties).
pub fn seeded_distinct(shape: Shape, seed: u64) -> Tensor<f64> {
    let n = shape.numel();
    let mut r = SplitMix::new(seed);
    let mut vals: Vec<f64> = (0..n).map(|i| -1.0 + 2.0 * i as f64 / n as f64).collect();
    for i in (1..n).rev() {
        vals.swap(i, r.below(i + 1));
    }
    Tensor::from_vec(shape, vals).unwrap()
}

/// Nested-loop convolution with zero padding.
pub fn naive_conv(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    b: Option<&Tensor<f64>>,
    stride: usize,
    pad: usize,
    groups: usize,
) -> Tensor<f64> {
    let xs = x.shape();
    let ws = w.shape();
    let (cout, cin_g, k) = (ws.n, ws.c, ws.h);
    let cout_g = cout / groups;
    let oh = (xs.h + 2 * pad - k) / stride + 1;
    let ow = (xs.w + 2 * pad - k) / stride + 1;
    Tensor::from_fn(Shape::new(xs.n, cout, oh, ow), |n, o, y, xo| {
        let g = o / cout_g;
        let mut acc = b.map_or(0.0, |b| b.at(0, o, 0, 0));
        for ci in 0..cin_g {
            for ky in 0..k {
                for kx in 0..k {
                    let iy = (y * stride + ky) as i64 - pad as i64;
                    let ix = (xo * stride + kx) as i64 - pad as i64;
                    if iy < 0 || ix < 0 || iy >= xs.h as i64 || ix >= xs.w as i64 {
                        continue;
                    }
                    acc += w.at(o, ci, ky, kx) * x.at(n, g * cin_g + ci, iy as usize, ix as usize);
                }
            }
        }
        acc
    })
}

pub fn max_abs_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Outcome of a finite-difference comparison.
#[derive(Debug, Default)]
pub struct GradCheck {
    pub checked: usize,
    /// Largest relative error among partials of magnitude above 1e-3.
    pub worst: f64,
    pub failures: Vec<String>,
}

impl GradCheck {
    pub fn ok(&self) -> bool {
        self.failures.is_empty() && self.checked > 0
    }

    pub fn merge(&mut self, other: GradCheck) {
        self.checked += other.checked;
        self.worst = self.worst.max(other.worst);
        self.failures.extend(other.failures);
    }
}

pub const REL_TOL: f64 = 1e-4;
pub const ABS_TOL: f64 = 1e-6;

/// `|a - n| <= max(REL_TOL * max(|a|, |n|), ABS_TOL)`: relative error below
/// 1e-4, or absolute below 1e-6 where both values are near zero.
pub fn grads_agree(a: f64, n: f64) -> (bool, f64) {
    let diff = (a - n).abs();
    let scale = a.abs().max(n.abs());
    let rel = if scale > 0.0 { diff / scale } else { 0.0 };
    (diff <= (REL_TOL * scale).max(ABS_TOL), rel)
}

/// Compare reverse-mode gradients of `L = sum(f(inputs) * R)` (R a fixed
/// random tensor) against central differences with step `h`. At most
/// `per_input` coordinates of each input are probed (all when `None`).
pub fn check_grads(
    name: &str,
    inputs: &[Tensor<f64>],
    f: impl Fn(&Tape<f64>, &[Var]) -> Result<Var>,
    h: f64,
    per_input: Option<usize>,
    seed: u64,
) -> GradCheck {
    let eval = |vals: &[Tensor<f64>], weights: Option<&Tensor<f64>>| -> (Tensor<f64>, f64) {
        let tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let out = tape.value(f(&tape, &vars).expect("forward succeeds"));
        let loss = weights.map_or(0.0, |w| out.data().iter().zip(w.data()).map(|(a, b)| a * b).sum());
        (out, loss)
    };
    let (out, _) = eval(inputs, None);
    let weights = seeded(out.shape(), seed, -1.0, 1.0);

    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&tape, &vars).expect("forward succeeds");
    let wv = tape.leaf(weights.clone(), false);
    let prod = mprnet::Graph::mul(&tape, &out, &wv).unwrap();
    let loss = tape.sum(prod);
    let grads = tape.backward(loss).unwrap();

    let mut report = GradCheck::default();
    let mut pick = SplitMix::new(seed ^ 0x5555);
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]).expect("leaf gradient").clone();
        let n = input.numel();
        let coords: Vec<usize> = match per_input {
            Some(k) if k < n => (0..k).map(|_| pick.below(n)).collect(),
            _ => (0..n).collect(),
        };
        for j in coords {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            let numeric = (eval(&plus, Some(&weights)).1 - eval(&minus, Some(&weights)).1) / (2.0 * h);
            let a = analytic.data()[j];
            let (ok, rel) = grads_agree(a, numeric);
            report.checked += 1;
            if a.abs().max(numeric.abs()) > 1e-3 {
                report.worst = report.worst.max(rel);
            }
            if !ok {
                report
                    .failures
                    .push(format!("{name}: input {i}[{j}] analytic {a:e} numeric {numeric:e}"));
            }
        }
    }
    report
}

/// Five synthetic RGB images with hard edges and stripes for overfitting.
pub fn synthetic_images(n: usize, side: usize) -> Vec<(String, Image)> {
    (0..n)
        .map(|k| {
            let img = Image::from_fn(side, side, 3, |y, x, c| {
                let cy = 20.0 + 5.0 * k as f64;
                let d = ((y as f64 - cy).powi(2) + (x as f64 - 30.0).powi(2)).sqrt();
                let disk = if d < 14.0 + k as f64 { 0.8 } else { 0.2 };
                let stripes = if (x + 2 * y + 3 * k) % 9 < 4 { 0.15 } else { 0.0 };
                ((disk + stripes) * (0.6 + 0.2 * c as f64)).min(1.0)
            })
            .unwrap();
            (format!("{k}.png"), img)
        })
        .collect()
}

/// Natural-looking RGB test image: smooth gradients plus texture.
pub fn textured_image(h: usize, w: usize, seed: u64) -> Image {
    let mut r = SplitMix::new(seed);
    let phases: Vec<f64> = (0..6).map(|_| r.range(0.0, std::f64::consts::TAU)).collect();
    Image::from_fn(h, w, 3, |y, x, c| {
        let (yf, xf) = (y as f64, x as f64);
        let v = 0.5
            + 0.2 * (xf * 0.11 + phases[c]).sin()
            + 0.15 * (yf * 0.07 + xf * 0.05 + phases[c + 3]).cos()
            + 0.1 * ((xf * 0.9).sin() * (yf * 1.3).cos());
        v.clamp(0.0, 1.0)
    })
    .unwrap()
}

/// Frozen SSIM values from scikit-image `structural_similarity` with a
/// Gaussian window (sigma 1.5), population covariance and data range 1, on
/// the pairs produced by [`ssim_pair`]: `(h, w, noise amplitude, ssim)`.
pub const SSIM_REFERENCE: [(usize, usize, f64, f64); 10] = [
    (16, 40, 0.05, 0.995729368016),
    (19, 38, 0.10, 0.983675181745),
    (22, 36, 0.15, 0.962961400416),
    (25, 34, 0.20, 0.930982347250),
    (28, 32, 0.25, 0.891780544481),
    (31, 30, 0.30, 0.877773911170),
    (34, 28, 0.35, 0.829685300302),
    (37, 26, 0.40, 0.788254598104),
    (40, 24, 0.45, 0.744722704376),
    (43, 22, 0.50, 0.685268083373),
];

/// Pair `k` of the SSIM reference set: a lightly smoothed random image
/// (3-tap wrap-around average) and a noisy, clipped copy.
pub fn ssim_pair(k: usize) -> (Image, Image) {
    let (h, w, amp, _) = SSIM_REFERENCE[k];
    let mut r = SplitMix::new(1000 + k as u64);
    let raw: Vec<f64> = (0..h * w).map(|_| r.unit()).collect();
    let at = |y: usize, x: usize| raw[y * w + x];
    let a: Vec<f64> = (0..h * w)
        .map(|i| {
            let (y, x) = (i / w, i % w);
            (at(y, x) + at((y + h - 1) % h, x) + at(y, (x + w - 1) % w)) / 3.0
        })
        .collect();
    let b: Vec<f64> = a.iter().map(|v| (v + amp * (r.unit() - 0.5)).clamp(0.0, 1.0)).collect();
    (Image::new(h, w, 1, a).unwrap(), Image::new(h, w, 1, b).unwrap())
}
