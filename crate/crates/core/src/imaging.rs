//! Floating-point images, PNG I/O, random cropping, and PSNR.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::Rng;

/// A planar image with real-valued pixels, nominally in `[0, 1]`.
///
/// Values are never clamped by arithmetic in this crate; clamping happens only
/// when quantizing for [`save_png`] and inside [`psnr`].
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        assert!(height >= 1 && width >= 1 && channels >= 1, "empty image");
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    /// Build from planar data (`channels` consecutive `height * width` planes).
    pub fn from_planar(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::Shape(format!("empty image {height}x{width}x{channels}")));
        }
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "{} values for a {height}x{width}x{channels} image",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut img = Self::zeros(height, width, channels);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    img.data[(c * height + y) * width + x] = f(y, x, c);
                }
            }
        }
        img
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

    /// `(height, width, channels)`
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copy out a rectangle. The rectangle must lie inside the image.
    pub fn crop(&self, at: PatchCoords) -> Result<Image> {
        if at.top + at.height > self.height || at.left + at.width > self.width || at.height == 0 || at.width == 0 {
            return Err(Error::Shape(format!(
                "crop {at:?} outside {}x{} image",
                self.height, self.width
            )));
        }
        let mut out = Image::zeros(at.height, at.width, self.channels);
        for c in 0..self.channels {
            for y in 0..at.height {
                let src = ((c * self.height) + at.top + y) * self.width + at.left;
                let dst = (c * at.height + y) * at.width;
                out.data[dst..dst + at.width].copy_from_slice(&self.data[src..src + at.width]);
            }
        }
        Ok(out)
    }

    /// Reflect-pad (mirror without repeating the edge) at the bottom and
    /// right so that the result is at least `min_h x min_w`.
    pub fn reflect_pad_to(&self, min_h: usize, min_w: usize) -> Image {
        let h = self.height.max(min_h);
        let w = self.width.max(min_w);
        if h == self.height && w == self.width {
            return self.clone();
        }
        Image::from_fn(h, w, self.channels, |y, x, c| {
            self.get(
                reflect_index(y as isize, self.height),
                reflect_index(x as isize, self.width),
                c,
            )
        })
    }

    /// Crop to the largest top-left sub-image whose sides are multiples of `m`.
    pub fn crop_to_multiple(&self, m: usize) -> Result<Image> {
        let h = self.height / m * m;
        let w = self.width / m * m;
        if h == 0 || w == 0 {
            return Err(Error::Shape(format!(
                "{}x{} image is smaller than the factor {m}",
                self.height, self.width
            )));
        }
        self.crop(PatchCoords {
            top: 0,
            left: 0,
            height: h,
            width: w,
        })
    }

    pub fn clamped(&self) -> Image {
        let mut out = self.clone();
        out.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        out
    }
}

/// Map an arbitrary integer index onto `0..n` by mirror reflection without
/// repeating the edge sample (`-1 -> 1`, `n -> n-2`).
pub(crate) fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m >= n as isize {
        (period - m) as usize
    } else {
        m as usize
    }
}

/// Rectangle inside an image, in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PatchCoords {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

/// Load an 8-bit PNG. Gray images give one channel, RGB and RGBA give three
/// (alpha is dropped). Pixels are scaled by `1/255`.
pub fn load_png(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let decode_err = |reason: String| Error::Decode {
        path: path.to_path_buf(),
        reason,
    };
    let mut reader = png::Decoder::new(BufReader::new(file))
        .read_info()
        .map_err(|e| decode_err(e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| decode_err("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| decode_err(e.to_string()))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(decode_err(format!("unsupported bit depth {:?}", info.bit_depth)));
    }
    let (src_channels, out_channels) = match info.color_type {
        png::ColorType::Grayscale => (1, 1),
        png::ColorType::GrayscaleAlpha => (2, 1),
        png::ColorType::Rgb => (3, 3),
        png::ColorType::Rgba => (4, 3),
        other => return Err(decode_err(format!("unsupported color type {other:?}"))),
    };
    let (h, w) = (info.height as usize, info.width as usize);
    let bytes = &buf[..info.line_size * h];
    let mut img = Image::zeros(h, w, out_channels);
    for y in 0..h {
        let row = &bytes[y * info.line_size..];
        for x in 0..w {
            for c in 0..out_channels {
                img.set(y, x, c, row[x * src_channels + c] as f64 / 255.0);
            }
        }
    }
    Ok(img)
}

/// Quantize to 8 bits (clamp, round) and write a PNG.
pub fn save_png(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let color = match img.channels {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        c => {
            return Err(Error::Encode {
                path: path.to_path_buf(),
                reason: format!("{c}-channel images are not supported"),
            })
        }
    };
    let mut bytes = Vec::with_capacity(img.data.len());
    for y in 0..img.height {
        for x in 0..img.width {
            for c in 0..img.channels {
                bytes.push((img.get(y, x, c).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), img.width as u32, img.height as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let encode_err = |e: png::EncodingError| Error::Encode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    };
    let mut writer = enc.write_header().map_err(encode_err)?;
    writer.write_image_data(&bytes).map_err(encode_err)?;
    writer.finish().map_err(encode_err)
}

/// Draw `n` uniformly placed `h x w` crops, overlap allowed. Images smaller
/// than the patch are reflect-padded first.
pub fn random_crops(img: &Image, n: usize, h: usize, w: usize, rng: &mut Rng) -> Result<Vec<(Image, PatchCoords)>> {
    if n == 0 || h == 0 || w == 0 {
        return Err(Error::InvalidArgument(format!("random_crops(n={n}, h={h}, w={w})")));
    }
    let padded;
    let src = if img.height < h || img.width < w {
        padded = img.reflect_pad_to(h, w);
        &padded
    } else {
        img
    };
    (0..n)
        .map(|_| {
            let at = PatchCoords {
                top: rng.random_range(0..=src.height - h),
                left: rng.random_range(0..=src.width - w),
                height: h,
                width: w,
            };
            Ok((src.crop(at)?, at))
        })
        .collect()
}

/// Which pixels PSNR compares.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelMode {
    Rgb,
    Y,
}

impl std::str::FromStr for ChannelMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rgb" => Ok(ChannelMode::Rgb),
            "y" => Ok(ChannelMode::Y),
            other => Err(Error::Unknown {
                kind: "channel mode",
                name: other.to_string(),
            }),
        }
    }
}

/// BT.601 luma: `Y = (65.481 R + 128.553 G + 24.966 B + 16) / 255`.
pub fn to_y_channel(img: &Image) -> Result<Image> {
    if img.channels != 3 {
        return Err(Error::Shape(format!(
            "luma conversion needs 3 channels, got {}",
            img.channels
        )));
    }
    let (r, g, b) = (img.plane(0), img.plane(1), img.plane(2));
    let data = r
        .iter()
        .zip(g)
        .zip(b)
        .map(|((r, g), b)| (65.481 * r + 128.553 * g + 24.966 * b + 16.0) / 255.0)
        .collect();
    Image::from_planar(img.height, img.width, 1, data)
}

/// Peak signal-to-noise ratio in dB on `[0,1]`-clamped pixels after cropping
/// `border` pixels from every side. Returns `f64::INFINITY` when the images
/// agree exactly. In `Y` mode a 3-channel input is converted to luma and a
/// 1-channel input is compared as is.
pub fn psnr(a: &Image, b: &Image, border: usize, mode: ChannelMode) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "psnr of {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if 2 * border >= a.height || 2 * border >= a.width {
        return Err(Error::Shape(format!(
            "border {border} leaves nothing of a {}x{} image",
            a.height, a.width
        )));
    }
    let (a, b) = (a.clamped(), b.clamped());
    let (a, b) = match (mode, a.channels) {
        (ChannelMode::Y, 3) => (to_y_channel(&a)?, to_y_channel(&b)?),
        _ => (a, b),
    };
    let mut sum = 0.0;
    let mut count = 0usize;
    for c in 0..a.channels {
        for y in border..a.height - border {
            for x in border..a.width - border {
                let d = a.get(y, x, c) - b.get(y, x, c);
                sum += d * d;
                count += 1;
            }
        }
    }
    let mse = sum / count as f64;
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    fn ramp(h: usize, w: usize) -> Image {
        Image::from_fn(h, w, 3, |y, x, c| ((y * 7 + x * 3 + c * 11) % 50) as f64 / 100.0 + 0.2)
    }

    fn write_png(path: &Path, w: u32, h: u32, color: png::ColorType, depth: png::BitDepth, data: &[u8]) {
        let file = File::create(path).unwrap();
        let mut enc = png::Encoder::new(BufWriter::new(file), w, h);
        enc.set_color(color);
        enc.set_depth(depth);
        let mut wr = enc.write_header().unwrap();
        wr.write_image_data(data).unwrap();
    }

    #[test]
    fn load_scales_bytes() {
        let dir = tempfile::tempdir().unwrap();
        for (byte, expected) in [(255u8, 1.0), (0, 0.0), (128, 128.0 / 255.0)] {
            let p = dir.path().join(format!("{byte}.png"));
            write_png(&p, 2, 2, png::ColorType::Rgb, png::BitDepth::Eight, &[byte; 12]);
            let img = load_png(&p).unwrap();
            assert_eq!(img.shape(), (2, 2, 3));
            assert!(img.as_slice().iter().all(|&v| v == expected));
        }
        assert!((128.0f64 / 255.0 - 0.50196).abs() < 1e-5);
    }

    #[test]
    fn load_rejects_sixteen_bit_and_missing() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("deep.png");
        write_png(&p, 1, 1, png::ColorType::Rgb, png::BitDepth::Sixteen, &[0u8; 6]);
        assert!(matches!(load_png(&p), Err(Error::Decode { .. })));
        assert!(matches!(load_png(dir.path().join("nope.png")), Err(Error::Io { .. })));
    }

    #[test]
    fn save_then_load_quantizes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.png");
        let img = Image::from_fn(3, 4, 3, |y, x, c| ((y + x + c) as f64 * 35.0 + 0.3) / 255.0);
        save_png(&img, &p).unwrap();
        let back = load_png(&p).unwrap();
        for (a, b) in img.as_slice().iter().zip(back.as_slice()) {
            assert!((a - b).abs() < 0.5 / 255.0);
        }
    }

    #[test]
    fn crops_have_requested_shape() {
        let img = ramp(100, 100);
        let crops = random_crops(&img, 20, 48, 48, &mut seed::rng(1)).unwrap();
        assert_eq!(crops.len(), 20);
        for (p, at) in &crops {
            assert_eq!(p.shape(), (48, 48, 3));
            assert!(at.top + 48 <= 100 && at.left + 48 <= 100);
            assert_eq!(p.get(5, 7, 1), img.get(at.top + 5, at.left + 7, 1));
        }
    }

    #[test]
    fn single_valid_crop_is_the_image() {
        let img = ramp(48, 48);
        let crops = random_crops(&img, 1, 48, 48, &mut seed::rng(3)).unwrap();
        assert_eq!(crops[0].0, img);
    }

    #[test]
    fn crops_are_deterministic() {
        let img = ramp(80, 90);
        let a: Vec<_> = random_crops(&img, 10, 16, 16, &mut seed::rng(9)).unwrap().into_iter().map(|c| c.1).collect();
        let b: Vec<_> = random_crops(&img, 10, 16, 16, &mut seed::rng(9)).unwrap().into_iter().map(|c| c.1).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn small_images_are_reflect_padded() {
        let img = ramp(5, 7);
        let crops = random_crops(&img, 3, 12, 12, &mut seed::rng(0)).unwrap();
        let padded = img.reflect_pad_to(12, 12);
        assert_eq!(crops[0].0, padded.crop(crops[0].1).unwrap());
        assert_eq!(padded.get(5, 0, 0), img.get(3, 0, 0));
        assert_eq!(padded.get(0, 8, 2), img.get(0, 4, 2));
    }

    #[test]
    fn reflect_index_far_out() {
        let got: Vec<usize> = (-4..9).map(|i| reflect_index(i, 3)).collect();
        assert_eq!(got, vec![0, 1, 2, 1, 0, 1, 2, 1, 0, 1, 2, 1, 0]);
    }

    #[test]
    fn psnr_identical_is_infinite() {
        let a = ramp(10, 10);
        assert_eq!(psnr(&a, &a, 0, ChannelMode::Rgb).unwrap(), f64::INFINITY);
    }

    #[test]
    fn psnr_constant_offset() {
        let a = Image::from_fn(16, 16, 3, |y, x, c| ((y + x + c) % 9) as f64 / 20.0);
        let mut b = a.clone();
        b.as_mut_slice().iter_mut().for_each(|v| *v += 10.0 / 255.0);
        let got = psnr(&a, &b, 0, ChannelMode::Rgb).unwrap();
        let oracle = cmdsr_testkit::psnr_from_mse(cmdsr_testkit::mse(a.as_slice(), b.as_slice()));
        assert!((got - oracle).abs() < 1e-9);
        assert!((got - 28.1308).abs() < 1e-4);
    }

    #[test]
    fn psnr_border_ignores_frame() {
        let a = ramp(20, 20);
        let mut b = a.clone();
        for c in 0..3 {
            for y in 0..20 {
                for x in 0..20 {
                    if y < 4 || x < 4 || y >= 16 || x >= 16 {
                        b.set(y, x, c, 1.0 - a.get(y, x, c));
                    }
                }
            }
        }
        assert_eq!(psnr(&a, &b, 4, ChannelMode::Rgb).unwrap(), f64::INFINITY);
        assert!(psnr(&a, &b, 3, ChannelMode::Rgb).unwrap().is_finite());
    }

    #[test]
    fn psnr_shape_mismatch() {
        assert!(matches!(
            psnr(&ramp(4, 4), &ramp(4, 5), 0, ChannelMode::Rgb),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn luma_of_white_and_black() {
        let white = Image::filled(1, 1, 3, 1.0);
        let black = Image::zeros(1, 1, 3);
        let yw = to_y_channel(&white).unwrap().get(0, 0, 0);
        let yb = to_y_channel(&black).unwrap().get(0, 0, 0);
        assert!((yw - cmdsr_testkit::bt601_luma(1.0, 1.0, 1.0)).abs() < 1e-15);
        assert!((yw - 0.92157).abs() < 1e-5);
        assert!((yb - 16.0 / 255.0).abs() < 1e-15);
        assert!(to_y_channel(&Image::zeros(2, 2, 1)).is_err());
    }
}
