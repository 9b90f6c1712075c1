//! Image and video containers plus the pixel-level operations shared by the
//! rest of the engine: PNG I/O, grayscale conversion, HSV saturation, PSNR,
//! and luminance replacement.
//!
//! All pixel data is stored as `f32` in `[0,1]`, row-major with channels
//! interleaved per pixel. Videos are directories of zero-padded numbered
//! PNG frames (`000000.png`, `000001.png`, ...).

use std::path::{Path, PathBuf};

use crate::{Error, Result};

/// Rec.601 luma weights for (r, g, b).
pub const LUMA_WEIGHTS: [f32; 3] = [0.299, 0.587, 0.114];

/// PSNR cap returned when the mean squared error is effectively zero.
pub const PSNR_CAP_DB: f64 = 99.0;

/// A dense grayscale or RGB image with values in `[0,1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Image {
    /// Builds an image from raw data, validating the container invariants.
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidImage(format!(
                "zero-sized image {height}x{width}"
            )));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidImage(format!(
                "unsupported channel count {channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::InvalidImage(format!(
                "data length {} does not match {height}x{width}x{channels}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(Error::InvalidImage(
                "pixel values must be finite and in [0,1]".into(),
            ));
        }
        Ok(Image {
            height,
            width,
            channels,
            data,
        })
    }

    /// Constant-valued image.
    pub fn constant(height: usize, width: usize, channels: usize, value: f32) -> Result<Self> {
        Image::new(height, width, channels, vec![value; height * width * channels])
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

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Value at (row, col, channel).
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    /// Replicates a single-channel image into 3 identical channels.
    pub fn replicate_to_rgb(&self) -> Result<Image> {
        if self.channels != 1 {
            return Err(Error::InvalidImage("replicate_to_rgb needs 1 channel".into()));
        }
        let mut data = Vec::with_capacity(self.data.len() * 3);
        for &v in &self.data {
            data.extend_from_slice(&[v, v, v]);
        }
        Image::new(self.height, self.width, 3, data)
    }
}

/// An ordered sequence of equally sized frames.
#[derive(Debug, Clone)]
pub struct VideoClip {
    frames: Vec<Image>,
    /// Frames per second, metadata only.
    pub frame_rate: Option<f32>,
}

impl VideoClip {
    pub fn new(frames: Vec<Image>) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::InvalidImage("clip needs at least one frame".into()))?;
        let (h, w, c) = (first.height, first.width, first.channels);
        if !frames.iter().all(|f| f.height == h && f.width == w && f.channels == c) {
            return Err(Error::ShapeMismatch("clip frames differ in shape".into()));
        }
        Ok(VideoClip {
            frames,
            frame_rate: None,
        })
    }

    pub fn frames(&self) -> &[Image] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Loads a clip from a directory of numbered PNG frames, in name order.
    pub fn load_dir(dir: &Path) -> Result<VideoClip> {
        let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().map(|e| e == "png").unwrap_or(false))
            .collect();
        paths.sort();
        if paths.is_empty() {
            return Err(Error::InvalidImage(format!(
                "no PNG frames in {}",
                dir.display()
            )));
        }
        let frames = paths.iter().map(|p| load_png(p)).collect::<Result<Vec<_>>>()?;
        VideoClip::new(frames)
    }

    /// Writes the clip as `000000.png`, `000001.png`, ... under `dir`.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (i, frame) in self.frames.iter().enumerate() {
            save_png(frame, &dir.join(format!("{i:06}.png")))?;
        }
        Ok(())
    }
}

/// Loads an 8-bit grayscale or RGB PNG, mapping bytes to `[0,1]`.
pub fn load_png(path: &Path) -> Result<Image> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = image::codecs::png::PngDecoder::new(std::io::BufReader::new(file))
        .map_err(|e| Error::Codec(format!("{}: {e}", path.display())))?;
    let dynimg = image::DynamicImage::from_decoder(decoder)
        .map_err(|e| Error::Codec(format!("{}: {e}", path.display())))?;
    let (w, h) = (dynimg.width() as usize, dynimg.height() as usize);
    let (bytes, channels) = match dynimg {
        image::DynamicImage::ImageLuma8(img) => (img.into_raw(), 1),
        image::DynamicImage::ImageRgb8(img) => (img.into_raw(), 3),
        image::DynamicImage::ImageLumaA8(_) | image::DynamicImage::ImageRgba8(_) => {
            return Err(Error::InvalidImage(format!(
                "{}: alpha channel not supported",
                path.display()
            )))
        }
        other => {
            return Err(Error::InvalidImage(format!(
                "{}: unsupported pixel format {:?}",
                path.display(),
                other.color()
            )))
        }
    };
    Image::new(h, w, channels, bytes.iter().map(|&b| b as f32 / 255.0).collect())
}

/// Saves an image as an 8-bit PNG (grayscale or RGB) with nearest-byte
/// quantization.
pub fn save_png(img: &Image, path: &Path) -> Result<()> {
    let bytes: Vec<u8> = img
        .data
        .iter()
        .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    let color = match img.channels {
        1 => image::ColorType::L8,
        3 => image::ColorType::Rgb8,
        _ => unreachable!("Image invariant holds channels in {{1,3}}"),
    };
    image::save_buffer(
        path,
        &bytes,
        img.width as u32,
        img.height as u32,
        color,
    )
    .map_err(|e| Error::Codec(format!("{}: {e}", path.display())))
}

/// Rec.601 luma of an RGB image.
pub fn to_grayscale(img: &Image) -> Result<Image> {
    if img.channels != 3 {
        return Err(Error::InvalidImage("to_grayscale needs 3 channels".into()));
    }
    let mut data = Vec::with_capacity(img.height * img.width);
    for px in img.data.chunks_exact(3) {
        let y = LUMA_WEIGHTS[0] * px[0] + LUMA_WEIGHTS[1] * px[1] + LUMA_WEIGHTS[2] * px[2];
        data.push(y.clamp(0.0, 1.0));
    }
    Image::new(img.height, img.width, 1, data)
}

/// HSV saturation channel: `(max - min) / max`, zero where `max == 0`.
pub fn saturation_map(img: &Image) -> Result<Image> {
    if img.channels != 3 {
        return Err(Error::InvalidImage("saturation_map needs 3 channels".into()));
    }
    let mut data = Vec::with_capacity(img.height * img.width);
    for px in img.data.chunks_exact(3) {
        let max = px[0].max(px[1]).max(px[2]);
        let min = px[0].min(px[1]).min(px[2]);
        data.push(if max > 0.0 { ((max - min) / max).clamp(0.0, 1.0) } else { 0.0 });
    }
    Image::new(img.height, img.width, 1, data)
}

/// PSNR in decibels with peak 1.0, capped at 99 dB for near-zero MSE.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::ShapeMismatch("psnr inputs differ in shape".into()));
    }
    let mse: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| {
            let d = (x - y) as f64;
            d * d
        })
        .sum::<f64>()
        / a.data.len() as f64;
    if mse < 1e-10 {
        Ok(PSNR_CAP_DB)
    } else {
        Ok(10.0 * (1.0 / mse).log10())
    }
}

/// Rewrites the luminance of `colorized` to match `gray` while keeping the
/// chroma offsets, clamping back into `[0,1]`.
///
/// A constant shift across channels moves luma one-for-one (the Rec.601
/// weights sum to 1); clamping can eat part of the shift, so the shift is
/// re-applied until the residual luma error is below 1e-4 per pixel.
pub fn replace_luminance(colorized: &Image, gray: &Image) -> Result<Image> {
    if colorized.channels != 3 || gray.channels != 1 {
        return Err(Error::InvalidImage(
            "replace_luminance takes (rgb, gray)".into(),
        ));
    }
    if colorized.height != gray.height || colorized.width != gray.width {
        return Err(Error::ShapeMismatch(
            "replace_luminance spatial size mismatch".into(),
        ));
    }
    let mut data = colorized.data.clone();
    for (px, &target) in data.chunks_exact_mut(3).zip(gray.data.iter()) {
        for _ in 0..50 {
            let luma =
                LUMA_WEIGHTS[0] * px[0] + LUMA_WEIGHTS[1] * px[1] + LUMA_WEIGHTS[2] * px[2];
            let delta = target - luma;
            if delta.abs() < 1e-4 {
                break;
            }
            for v in px.iter_mut() {
                *v = (*v + delta).clamp(0.0, 1.0);
            }
        }
    }
    Image::new(colorized.height, colorized.width, 3, data)
}

/// Mean absolute difference between two same-shaped images.
pub fn mean_l1(a: &Image, b: &Image) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::ShapeMismatch("mean_l1 inputs differ in shape".into()));
    }
    Ok(a.data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| (x - y).abs() as f64)
        .sum::<f64>()
        / a.data.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn img3(pixels: &[[f32; 3]]) -> Image {
        let data: Vec<f32> = pixels.iter().flatten().copied().collect();
        Image::new(1, pixels.len(), 3, data).unwrap()
    }

    #[test]
    fn png_single_pixel_values() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("x.png");

        save_png(&Image::new(1, 1, 1, vec![1.0]).unwrap(), &p).unwrap();
        assert_eq!(load_png(&p).unwrap().data(), &[1.0]);

        save_png(&Image::new(1, 1, 1, vec![0.0]).unwrap(), &p).unwrap();
        assert_eq!(load_png(&p).unwrap().data(), &[0.0]);

        // bytes (51,102,204) -> (0.2, 0.4, 0.8) within 1/510
        image::save_buffer(&p, &[51, 102, 204], 1, 1, image::ColorType::Rgb8).unwrap();
        let img = load_png(&p).unwrap();
        for (got, want) in img.data().iter().zip([0.2, 0.4, 0.8]) {
            assert!((got - want).abs() <= 1.0 / 510.0);
        }
    }

    #[test]
    fn png_round_trip_quantization_bound() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("x.png");
        let data: Vec<f32> = (0..4 * 5 * 3).map(|i| (i as f32 * 0.371).fract()).collect();
        let img = Image::new(4, 5, 3, data).unwrap();
        save_png(&img, &p).unwrap();
        let back = load_png(&p).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 1.0 / 510.0);
        }
    }

    #[test]
    fn png_half_gray_rounds_to_127_or_128() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("x.png");
        save_png(&Image::constant(2, 2, 1, 0.5).unwrap(), &p).unwrap();
        let raw = image::open(&p).unwrap().into_luma8().into_raw();
        assert!(raw.iter().all(|&b| b == 127 || b == 128));
    }

    #[test]
    fn png_rejects_alpha_and_invalid() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("a.png");
        image::save_buffer(&p, &[1, 2, 3, 4], 1, 1, image::ColorType::Rgba8).unwrap();
        assert!(load_png(&p).is_err());
        assert!(Image::new(0, 3, 1, vec![]).is_err());
        assert!(load_png(Path::new("/nonexistent/x.png")).is_err());
    }

    #[test]
    fn grayscale_luma() {
        let img = img3(&[[1.0, 1.0, 1.0], [0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
        let g = to_grayscale(&img).unwrap();
        assert!((g.data()[0] - 1.0).abs() < 1e-6);
        assert_eq!(g.data()[1], 0.0);
        assert!((g.data()[2] - 0.299).abs() < 1e-6);
        assert!(to_grayscale(&g).is_err());
    }

    #[test]
    fn saturation_values() {
        let img = img3(&[[0.4, 0.4, 0.4], [1.0, 0.0, 0.0], [0.5, 0.25, 0.25]]);
        let s = saturation_map(&img).unwrap();
        assert_eq!(s.data()[0], 0.0);
        assert_eq!(s.data()[1], 1.0);
        assert!((s.data()[2] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn saturation_of_replicated_gray_is_zero() {
        let g = Image::new(1, 3, 1, vec![0.1, 0.5, 0.9]).unwrap();
        let rgb = g.replicate_to_rgb().unwrap();
        assert!(saturation_map(&rgb).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn psnr_values_and_symmetry() {
        let a = Image::constant(2, 2, 1, 0.5).unwrap();
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP_DB);

        // MSE 0.01 -> 20 dB
        let b = Image::constant(2, 2, 1, 0.6).unwrap();
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-4);
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());

        // MSE 1 -> 0 dB
        let z = Image::constant(2, 2, 1, 0.0).unwrap();
        let o = Image::constant(2, 2, 1, 1.0).unwrap();
        assert!(psnr(&z, &o).unwrap().abs() < 1e-9);

        let wrong = Image::constant(2, 3, 1, 0.5).unwrap();
        assert!(psnr(&a, &wrong).is_err());
    }

    #[test]
    fn replace_luminance_contracts() {
        // fixed point: luma already matches
        let red = img3(&[[1.0, 0.0, 0.0]]);
        let target = Image::new(1, 1, 1, vec![0.299]).unwrap();
        let out = replace_luminance(&red, &target).unwrap();
        for (a, b) in out.data().iter().zip(red.data()) {
            assert!((a - b).abs() < 1e-3);
        }

        // constant gray input moves to the target gray
        let gray_img = img3(&[[0.2, 0.2, 0.2]]);
        let t = Image::new(1, 1, 1, vec![0.7]).unwrap();
        let out = replace_luminance(&gray_img, &t).unwrap();
        for &v in out.data() {
            assert!((v - 0.7).abs() < 1e-3);
        }

        // clamped case still converges to the target luma
        let c = img3(&[[0.9, 0.1, 0.2]]);
        let t = Image::new(1, 1, 1, vec![0.95]).unwrap();
        let out = replace_luminance(&c, &t).unwrap();
        let luma = to_grayscale(&out).unwrap();
        assert!((luma.data()[0] - 0.95).abs() < 1e-3);
    }

    #[test]
    fn clip_dir_round_trip() {
        let dir = tempdir().unwrap();
        let frames = vec![
            Image::constant(3, 4, 3, 0.25).unwrap(),
            Image::constant(3, 4, 3, 0.75).unwrap(),
        ];
        let clip = VideoClip::new(frames).unwrap();
        clip.save_dir(dir.path()).unwrap();
        let back = VideoClip::load_dir(dir.path()).unwrap();
        assert_eq!(back.len(), 2);
        assert!((back.frames()[0].data()[0] - 0.25).abs() <= 1.0 / 510.0);
    }
}
