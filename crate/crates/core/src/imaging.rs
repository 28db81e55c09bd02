//! In-memory images, 8-bit PNG I/O and the Y-channel conversion used for
//! evaluation.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Row-major interleaved image with values nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || !(channels == 1 || channels == 3) {
            return Err(Error::Shape(format!(
                "image must be non-empty with 1 or 3 channels, got {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "{height}x{width}x{channels} image needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(Image {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, v: f64) -> Result<Self> {
        Image::new(height, width, channels, vec![v; height * width * channels])
    }

    /// Build from `f(y, x, c)`.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Image::new(height, width, channels, data)
    }

    /// From 8-bit samples; each level `v` maps to `v / 255`.
    pub fn from_u8(height: usize, width: usize, channels: usize, bytes: &[u8]) -> Result<Self> {
        Image::new(
            height,
            width,
            channels,
            bytes.iter().map(|&b| b as f64 / 255.0).collect(),
        )
    }

    /// To 8-bit samples: clamp to `[0, 1]`, scale by 255, round half up.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| to_level(v)).collect()
    }

    /// Snap every value to the nearest 8-bit level, as a save/load would.
    pub fn quantize(&self) -> Image {
        Image {
            data: self.data.iter().map(|&v| to_level(v) as f64 / 255.0).collect(),
            ..self.clone()
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn at(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..self.clone()
        }
    }

    pub fn clamp01(&self) -> Image {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    /// The `h x w` window starting at `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Image> {
        if h == 0 || w == 0 || top + h > self.height || left + w > self.width {
            return Err(Error::Shape(format!(
                "crop {h}x{w} at ({top}, {left}) exceeds {}x{} image",
                self.height, self.width
            )));
        }
        Image::from_fn(h, w, self.channels, |y, x, c| self.at(top + y, left + x, c))
    }

    /// Mirror left-right.
    pub fn flip_h(&self) -> Image {
        Image::from_fn(self.height, self.width, self.channels, |y, x, c| {
            self.at(y, self.width - 1 - x, c)
        })
        .expect("same extents")
    }

    /// Rotate 90 degrees counter-clockwise.
    pub fn rot90(&self) -> Image {
        Image::from_fn(self.width, self.height, self.channels, |y, x, c| {
            self.at(x, self.width - 1 - y, c)
        })
        .expect("same extents")
    }

    /// `(1, C, H, W)` tensor.
    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::from_fn(Shape::new(1, self.channels, self.height, self.width), |_, c, y, x| {
            self.at(y, x, c) as f32
        })
    }

    /// Stack equally sized images into `(N, C, H, W)`.
    pub fn batch_to_tensor(images: &[Image]) -> Result<Tensor<f32>> {
        let first = images
            .first()
            .ok_or_else(|| Error::Shape("cannot batch zero images".into()))?;
        let (h, w, c) = (first.height, first.width, first.channels);
        if let Some(bad) = images.iter().position(|i| (i.height, i.width, i.channels) != (h, w, c)) {
            return Err(Error::Shape(format!("image {bad} differs in size from image 0")));
        }
        Ok(Tensor::from_fn(Shape::new(images.len(), c, h, w), |n, c, y, x| {
            images[n].at(y, x, c) as f32
        }))
    }

    /// Sample `n` of an `(N, C, H, W)` tensor, values kept as-is.
    pub fn from_tensor(t: &Tensor<f32>, n: usize) -> Result<Image> {
        let s = t.shape();
        if n >= s.n {
            return Err(Error::Shape(format!("sample {n} out of range for {s}")));
        }
        Image::from_fn(s.h, s.w, s.c, |y, x, c| t.at(n, c, y, x) as f64)
    }
}

fn to_level(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

fn unsupported(path: &Path, reason: impl Into<String>) -> Error {
    Error::UnsupportedImage {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Read an 8-bit PNG as RGB. Grayscale is replicated and alpha dropped;
/// palette and 16-bit files are rejected.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder
        .read_info()
        .map_err(|e| unsupported(path, format!("not a readable PNG: {e}")))?;
    let (color, depth) = reader.output_color_type();
    if depth != png::BitDepth::Eight {
        return Err(unsupported(
            path,
            format!("bit depth {depth:?}; only 8-bit is supported"),
        ));
    }
    let per_pixel = match color {
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Indexed => return Err(unsupported(path, "palette images are not supported")),
    };
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| unsupported(path, "image too large"))?;
    let mut buf = vec![0; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| unsupported(path, format!("corrupt PNG data: {e}")))?;
    let (h, w) = (info.height as usize, info.width as usize);
    let mut rgb = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        let row = &buf[y * info.line_size..y * info.line_size + w * per_pixel];
        for px in row.chunks_exact(per_pixel) {
            if per_pixel >= 3 {
                rgb.extend_from_slice(&px[..3]);
            } else {
                rgb.extend_from_slice(&[px[0]; 3]);
            }
        }
    }
    Image::from_u8(h, w, 3, &rgb)
}

/// Write an 8-bit PNG (RGB or grayscale), rounding to the nearest level.
pub fn save_image(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), img.width as u32, img.height as u32);
    enc.set_color(if img.channels == 3 {
        png::ColorType::Rgb
    } else {
        png::ColorType::Grayscale
    });
    enc.set_depth(png::BitDepth::Eight);
    let io_err = |e: png::EncodingError| Error::io(path, std::io::Error::other(e));
    let mut writer = enc.write_header().map_err(io_err)?;
    writer.write_image_data(&img.to_u8()).map_err(io_err)?;
    writer.finish().map_err(io_err)
}

/// BT.601 studio-swing luma, returned in `[0, 1]` as `Y_255 / 255`.
pub fn rgb_to_y(img: &Image) -> Result<Image> {
    if img.channels != 3 {
        return Err(Error::Shape(format!("rgb_to_y needs 3 channels, got {}", img.channels)));
    }
    let data = img
        .data
        .chunks_exact(3)
        .map(|p| (16.0 + 65.481 * p[0] + 128.553 * p[1] + 24.966 * p[2]) / 255.0)
        .collect();
    Image::new(img.height, img.width, 1, data)
}

/// Remove `border` pixels from every side.
pub fn shave(img: &Image, border: usize) -> Result<Image> {
    if 2 * border >= img.height.min(img.width) {
        return Err(Error::Shape(format!(
            "cannot shave {border} pixels from a {}x{} image",
            img.height, img.width
        )));
    }
    img.crop(border, border, img.height - 2 * border, img.width - 2 * border)
}

/// Center-crop so both extents are multiples of `m`.
pub fn crop_to_multiple(img: &Image, m: usize) -> Result<Image> {
    let (h, w) = (img.height / m * m, img.width / m * m);
    if h == 0 || w == 0 {
        return Err(Error::Shape(format!(
            "{}x{} image is smaller than the scale {m}",
            img.height, img.width
        )));
    }
    img.crop((img.height - h) / 2, (img.width - w) / 2, h, w)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn red_pixel_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("red.png");
        let img = Image::from_u8(1, 1, 3, &[255, 0, 0]).unwrap();
        save_image(&img, &p).unwrap();
        assert_eq!(load_image(&p).unwrap(), img);
    }

    #[test]
    fn half_rounds_up() {
        let img = Image::filled(1, 1, 1, 0.5).unwrap();
        assert_eq!(img.to_u8(), vec![128]);
        assert_eq!(Image::filled(1, 1, 1, 1.7).unwrap().to_u8(), vec![255]);
    }

    #[test]
    fn load_save_load_is_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::from_fn(5, 7, 3, |y, x, c| ((y * 31 + x * 7 + c * 13) % 97) as f64 / 96.3).unwrap();
        let (a, b) = (dir.path().join("a.png"), dir.path().join("b.png"));
        save_image(&img, &a).unwrap();
        let first = load_image(&a).unwrap();
        save_image(&first, &b).unwrap();
        assert_eq!(load_image(&b).unwrap(), first);
        assert_eq!(first, img.quantize());
    }

    #[test]
    fn rejects_palette_sixteen_bit_and_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let write = |name: &str, color, depth, data: &[u8], palette: bool| {
            let p = dir.path().join(name);
            let mut enc = png::Encoder::new(File::create(&p).unwrap(), 1, 1);
            enc.set_color(color);
            enc.set_depth(depth);
            if palette {
                enc.set_palette(vec![0, 0, 0]);
            }
            let mut w = enc.write_header().unwrap();
            w.write_image_data(data).unwrap();
            p
        };
        let pal = write("pal.png", png::ColorType::Indexed, png::BitDepth::Eight, &[0], true);
        let deep = write("deep.png", png::ColorType::Rgb, png::BitDepth::Sixteen, &[0; 6], false);
        let junk = dir.path().join("junk.png");
        std::fs::write(&junk, b"not a png").unwrap();
        for p in [pal, deep, junk] {
            assert!(matches!(load_image(&p), Err(Error::UnsupportedImage { .. })), "{p:?}");
        }
    }

    #[test]
    fn luma_of_black_white_green_blue() {
        let img = Image::from_u8(1, 4, 3, &[0, 0, 0, 255, 255, 255, 0, 255, 0, 0, 0, 255]).unwrap();
        let y = rgb_to_y(&img).unwrap();
        assert!((y.data()[0] - 16.0 / 255.0).abs() < 1e-12);
        assert!((y.data()[1] - 235.0 / 255.0).abs() < 1e-12);
        assert!(y.data()[2] > y.data()[3]);
        assert!(rgb_to_y(&y).is_err());
    }

    #[test]
    fn shave_rules() {
        let img = Image::from_fn(10, 10, 1, |y, x, _| (y * 10 + x) as f64).unwrap();
        assert_eq!(shave(&img, 0).unwrap(), img);
        let s2 = shave(&img, 2).unwrap();
        assert_eq!((s2.height(), s2.width()), (6, 6));
        assert_eq!(shave(&shave(&img, 1).unwrap(), 1).unwrap(), s2);
        assert!(shave(&img, 5).is_err());
    }

    #[test]
    fn flips_and_rotations_cycle() {
        let img = Image::from_fn(3, 5, 3, |y, x, c| (y * 100 + x * 10 + c) as f64).unwrap();
        assert_eq!(img.flip_h().flip_h(), img);
        assert_eq!(img.rot90().rot90().rot90().rot90(), img);
        assert_eq!(img.rot90().height(), 5);
    }

    #[test]
    fn crop_to_multiple_centers() {
        let img = Image::from_fn(10, 11, 1, |y, x, _| (y * 11 + x) as f64).unwrap();
        let c = crop_to_multiple(&img, 3).unwrap();
        assert_eq!((c.height(), c.width()), (9, 9));
        assert_eq!(c.at(0, 0, 0), img.at(0, 1, 0));
    }
}
