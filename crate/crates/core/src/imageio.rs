//! Image and disparity-map I/O.
//!
//! Pixel values are held as reals in `[0, 1]`, row-major with channels
//! interleaved (`data[(y * width + x) * channels + c]`). PNG (8/16-bit) and
//! binary PGM/PPM are supported for images; disparity maps use the KITTI
//! 16-bit PNG convention (`value / 256`, `0` = invalid).

use std::path::Path;

use image::{DynamicImage, ImageBuffer, ImageFormat, ImageReader, Luma, Rgb};

use crate::error::{ensure, Error, Result};
use crate::grid::Plane;
use crate::scalar::{cast_slice, Real};

pub const BT601: [f64; 3] = [0.299, 0.587, 0.114];

/// KITTI disparity quantization step.
pub const DISPARITY_SCALE: f32 = 256.0;

#[derive(Clone, Debug, PartialEq)]
pub struct Image<T> {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<T>,
}

impl<T: Real> Image<T> {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        ensure!(
            channels == 1 || channels == 3,
            "image must have 1 or 3 channels, got {channels}"
        );
        ensure!(
            data.len() == width * height * channels,
            "image data length {} != {}x{}x{}",
            data.len(),
            width,
            height,
            channels
        );
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn from_plane(plane: &Plane<T>) -> Self {
        Self {
            width: plane.width(),
            height: plane.height(),
            channels: 1,
            data: plane.as_slice().to_vec(),
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> T {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[T] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn cast<U: Real>(&self) -> Image<U> {
        Image {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data: cast_slice(&self.data),
        }
    }

    /// Single-channel image as a plane. Errors for colour images.
    pub fn to_plane(&self) -> Result<Plane<T>> {
        ensure!(self.channels == 1, "expected a single-channel image");
        Plane::new(self.width, self.height, self.data.clone())
    }

    /// Channel `c` as a plane.
    pub fn channel(&self, c: usize) -> Plane<T> {
        Plane::from_fn(self.width, self.height, |x, y| self.get(x, y, c))
    }

    /// Replicates a grey image into three channels; colour images are cloned.
    pub fn to_rgb(&self) -> Image<T> {
        if self.channels == 3 {
            return self.clone();
        }
        let data = self.data.iter().flat_map(|&v| [v, v, v]).collect();
        Image {
            width: self.width,
            height: self.height,
            channels: 3,
            data,
        }
    }

    /// Mirrors the image left to right.
    pub fn flip_horizontal(&self) -> Image<T> {
        let mut data = Vec::with_capacity(self.data.len());
        for y in 0..self.height {
            for x in (0..self.width).rev() {
                data.extend_from_slice(self.pixel(x, y));
            }
        }
        Image {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data,
        }
    }
}

/// Converts an RGB image to luma with BT.601 weights.
pub fn to_grayscale<T: Real>(img: &Image<T>) -> Result<Image<T>> {
    ensure!(
        img.channels == 3,
        "grayscale conversion needs 3 channels, got {}",
        img.channels
    );
    let [wr, wg, wb] = BT601.map(T::lit);
    let data = img
        .data
        .chunks_exact(3)
        .map(|p| wr * p[0] + wg * p[1] + wb * p[2])
        .collect();
    Ok(Image {
        width: img.width,
        height: img.height,
        channels: 1,
        data,
    })
}

fn gray_plane<T: Real>(img: &Image<T>) -> Result<Plane<T>> {
    match img.channels {
        1 => img.to_plane(),
        _ => to_grayscale(img)?.to_plane(),
    }
}

fn open_checked(path: &Path) -> Result<(ImageFormat, DynamicImage)> {
    let reader = ImageReader::open(path)?.with_guessed_format()?;
    let format = match reader.format() {
        Some(f @ (ImageFormat::Png | ImageFormat::Pnm)) => f,
        Some(other) => {
            return Err(Error::Format(format!(
                "{}: unsupported image format {other:?}",
                path.display()
            )))
        }
        None => {
            return Err(Error::Format(format!(
                "{}: unrecognised image format",
                path.display()
            )))
        }
    };
    Ok((format, reader.decode()?))
}

/// Loads a PNG, PGM or PPM file. 8-bit samples are scaled by `1/255`,
/// 16-bit samples by `1/65535`. Alpha channels are dropped.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image<f32>> {
    let path = path.as_ref();
    let (_, img) = open_checked(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let scale8 = |v: &u8| *v as f32 / 255.0;
    let scale16 = |v: &u16| *v as f32 / 65535.0;
    let (channels, data): (usize, Vec<f32>) = match img {
        DynamicImage::ImageLuma8(buf) => (1, buf.as_raw().iter().map(scale8).collect()),
        DynamicImage::ImageLuma16(buf) => (1, buf.as_raw().iter().map(scale16).collect()),
        DynamicImage::ImageLumaA8(buf) => (1, buf.pixels().map(|p| scale8(&p.0[0])).collect()),
        DynamicImage::ImageLumaA16(buf) => {
            (1, buf.pixels().map(|p| scale16(&p.0[0])).collect())
        }
        DynamicImage::ImageRgb8(buf) => (3, buf.as_raw().iter().map(scale8).collect()),
        DynamicImage::ImageRgb16(buf) => (3, buf.as_raw().iter().map(scale16).collect()),
        DynamicImage::ImageRgba8(buf) => (
            3,
            buf.pixels().flat_map(|p| [0, 1, 2].map(|c| scale8(&p.0[c]))).collect(),
        ),
        DynamicImage::ImageRgba16(buf) => (
            3,
            buf.pixels().flat_map(|p| [0, 1, 2].map(|c| scale16(&p.0[c]))).collect(),
        ),
        other => {
            return Err(Error::Format(format!(
                "{}: unsupported pixel layout {:?}",
                path.display(),
                other.color()
            )))
        }
    };
    Image::new(w, h, channels, data)
}

fn quantize<T: Real>(v: T, max: f64) -> f64 {
    (v.to_f64_lossy().clamp(0.0, 1.0) * max).round()
}

/// Writes an 8-bit image; format follows the extension (`.png`, `.pgm`, `.ppm`).
pub fn save_image<T: Real>(img: &Image<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes: Vec<u8> = img.data.iter().map(|&v| quantize(v, 255.0) as u8).collect();
    let (w, h) = (img.width as u32, img.height as u32);
    match img.channels {
        1 => ImageBuffer::<Luma<u8>, _>::from_raw(w, h, bytes)
            .expect("buffer sized from image")
            .save(path)?,
        _ => ImageBuffer::<Rgb<u8>, _>::from_raw(w, h, bytes)
            .expect("buffer sized from image")
            .save(path)?,
    }
    Ok(())
}

/// Writes a 16-bit image (PNG or PNM by extension).
pub fn save_image_16<T: Real>(img: &Image<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let words: Vec<u16> = img.data.iter().map(|&v| quantize(v, 65535.0) as u16).collect();
    let (w, h) = (img.width as u32, img.height as u32);
    match img.channels {
        1 => ImageBuffer::<Luma<u16>, _>::from_raw(w, h, words)
            .expect("buffer sized from image")
            .save(path)?,
        _ => ImageBuffer::<Rgb<u16>, _>::from_raw(w, h, words)
            .expect("buffer sized from image")
            .save(path)?,
    }
    Ok(())
}

/// Per-pixel state of a disparity estimate or ground-truth sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PixelStatus {
    Valid,
    /// No measurement (sparse ground truth, unencodable value).
    Invalid,
    /// Failed the left-right check and no other disparity explains the pixel.
    Occluded,
    /// Failed the left-right check but some other disparity would be consistent.
    Mismatch,
}

/// Disparity labels with a per-pixel status mask. Non-valid pixels hold `0.0`.
#[derive(Clone, Debug, PartialEq)]
pub struct DisparityMap {
    width: usize,
    height: usize,
    values: Vec<f32>,
    status: Vec<PixelStatus>,
}

impl DisparityMap {
    /// All-valid map.
    pub fn from_values(width: usize, height: usize, values: Vec<f32>) -> Result<Self> {
        ensure!(
            values.len() == width * height,
            "disparity length {} != {}x{}",
            values.len(),
            width,
            height
        );
        ensure!(
            values.iter().all(|v| v.is_finite() && *v >= 0.0),
            "disparities must be finite and non-negative"
        );
        Ok(Self {
            width,
            height,
            status: vec![PixelStatus::Valid; values.len()],
            values,
        })
    }

    pub fn with_status(
        width: usize,
        height: usize,
        values: Vec<f32>,
        status: Vec<PixelStatus>,
    ) -> Result<Self> {
        let mut map = Self::from_values(width, height, values)?;
        ensure!(status.len() == width * height, "status mask has wrong length");
        for (v, s) in map.values.iter_mut().zip(&status) {
            if *s != PixelStatus::Valid {
                *v = 0.0;
            }
        }
        map.status = status;
        Ok(map)
    }

    pub fn invalid(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            values: vec![0.0; width * height],
            status: vec![PixelStatus::Invalid; width * height],
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.values[y * self.width + x]
    }

    #[inline]
    pub fn status(&self, x: usize, y: usize) -> PixelStatus {
        self.status[y * self.width + x]
    }

    #[inline]
    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        self.status(x, y) == PixelStatus::Valid
    }

    pub fn set(&mut self, x: usize, y: usize, value: f32) {
        let i = y * self.width + x;
        self.values[i] = value;
        self.status[i] = PixelStatus::Valid;
    }

    pub fn set_status(&mut self, x: usize, y: usize, status: PixelStatus) {
        let i = y * self.width + x;
        self.status[i] = status;
        if status != PixelStatus::Valid {
            self.values[i] = 0.0;
        }
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn statuses(&self) -> &[PixelStatus] {
        &self.status
    }

    pub fn valid_count(&self) -> usize {
        self.status.iter().filter(|s| **s == PixelStatus::Valid).count()
    }

    pub fn same_shape(&self, other: &DisparityMap) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn flip_horizontal(&self) -> DisparityMap {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                let src = y * self.width + (self.width - 1 - x);
                out.values[y * self.width + x] = self.values[src];
                out.status[y * self.width + x] = self.status[src];
            }
        }
        out
    }
}

/// Loads a KITTI disparity PNG: 16-bit single channel, `0` = invalid, else `v / 256`.
pub fn load_disparity_kitti(path: impl AsRef<Path>) -> Result<DisparityMap> {
    let path = path.as_ref();
    let (format, img) = open_checked(path)?;
    if format != ImageFormat::Png {
        return Err(Error::Format(format!(
            "{}: disparity maps must be PNG",
            path.display()
        )));
    }
    let buf = match img {
        DynamicImage::ImageLuma16(buf) => buf,
        other => {
            return Err(Error::Format(format!(
                "{}: disparity PNG must be 16-bit single channel, got {:?}",
                path.display(),
                other.color()
            )))
        }
    };
    let (w, h) = (buf.width() as usize, buf.height() as usize);
    let mut values = Vec::with_capacity(w * h);
    let mut status = Vec::with_capacity(w * h);
    for &raw in buf.as_raw() {
        if raw == 0 {
            values.push(0.0);
            status.push(PixelStatus::Invalid);
        } else {
            values.push(raw as f32 / DISPARITY_SCALE);
            status.push(PixelStatus::Valid);
        }
    }
    DisparityMap::with_status(w, h, values, status)
}

/// Encodes a disparity value as a KITTI 16-bit sample. A valid disparity that
/// rounds to zero is indistinguishable from "invalid" in this format.
pub fn encode_disparity(value: f32, valid: bool) -> u16 {
    if !valid {
        return 0;
    }
    (value as f64 * DISPARITY_SCALE as f64).round().clamp(0.0, 65535.0) as u16
}

/// Writes a KITTI disparity PNG.
pub fn save_disparity(map: &DisparityMap, path: impl AsRef<Path>) -> Result<()> {
    let words: Vec<u16> = map
        .values
        .iter()
        .zip(&map.status)
        .map(|(&v, &s)| encode_disparity(v, s == PixelStatus::Valid))
        .collect();
    let buf = ImageBuffer::<Luma<u16>, _>::from_raw(map.width as u32, map.height as u32, words)
        .expect("buffer sized from map");
    buf.save_with_format(path, ImageFormat::Png)?;
    Ok(())
}

/// Rectified stereo pair together with its grey planes (used by census).
#[derive(Clone, Debug)]
pub struct StereoPair<T> {
    pub left: Image<T>,
    pub right: Image<T>,
    pub left_gray: Plane<T>,
    pub right_gray: Plane<T>,
}

impl<T: Real> StereoPair<T> {
    pub fn new(left: Image<T>, right: Image<T>) -> Result<Self> {
        ensure!(
            left.width == right.width
                && left.height == right.height
                && left.channels == right.channels,
            "stereo views differ in shape: {}x{}x{} vs {}x{}x{}",
            left.width,
            left.height,
            left.channels,
            right.width,
            right.height,
            right.channels
        );
        let left_gray = gray_plane(&left)?;
        let right_gray = gray_plane(&right)?;
        Ok(Self {
            left,
            right,
            left_gray,
            right_gray,
        })
    }

    pub fn load(left: impl AsRef<Path>, right: impl AsRef<Path>) -> Result<StereoPair<f32>> {
        StereoPair::new(load_image(left)?, load_image(right)?)
    }

    pub fn width(&self) -> usize {
        self.left.width
    }

    pub fn height(&self) -> usize {
        self.left.height
    }

    pub fn cast<U: Real>(&self) -> StereoPair<U> {
        StereoPair {
            left: self.left.cast(),
            right: self.right.cast(),
            left_gray: self.left_gray.cast(),
            right_gray: self.right_gray.cast(),
        }
    }

    /// Mirror pair: both views flipped and swapped, so the right view becomes
    /// the reference of a left-referenced problem.
    pub fn mirrored(&self) -> StereoPair<T> {
        StereoPair {
            left: self.right.flip_horizontal(),
            right: self.left.flip_horizontal(),
            left_gray: flip_plane(&self.right_gray),
            right_gray: flip_plane(&self.left_gray),
        }
    }
}

pub(crate) fn flip_plane<T: Real>(p: &Plane<T>) -> Plane<T> {
    Plane::from_fn(p.width(), p.height(), |x, y| p.get(p.width() - 1 - x, y))
}
