//! Raw matching costs: per-pixel SAD, census/hamming, and their blend.
//!
//! Both terms are normalised into `[0, 1]` before blending (SAD divided by the
//! channel count, hamming distance divided by the descriptor length), so the
//! blended cost also lies in `[0, 1]`. Disparities that fall outside the
//! matching view cost `1.0`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::error::{ensure, Error, Result};
use crate::grid::Plane;
use crate::imageio::{Image, StereoPair};
use crate::scalar::{cast_slice, Real};

pub const DEFAULT_ALPHA: f64 = 0.43;
pub const DEFAULT_CENSUS_PATCH: usize = 7;
pub const DEFAULT_DMAX: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CostParams {
    /// Weight of the SAD term; the census term gets `1 - alpha`.
    pub alpha: f64,
    /// Side of the census patch (odd, >= 3).
    pub census_patch: usize,
    /// Largest disparity label; the volume has `d_max + 1` slices.
    pub d_max: usize,
}

impl Default for CostParams {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            census_patch: DEFAULT_CENSUS_PATCH,
            d_max: DEFAULT_DMAX,
        }
    }
}

impl CostParams {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.alpha > 0.0 && self.alpha < 1.0,
            "alpha must lie in (0, 1), got {}",
            self.alpha
        );
        check_patch(self.census_patch)?;
        ensure!(self.d_max >= 1, "d_max must be at least 1");
        Ok(())
    }
}

fn check_patch(n: usize) -> Result<()> {
    ensure!(n >= 3 && n % 2 == 1, "census patch must be odd and >= 3, got {n}");
    Ok(())
}

/// Matching costs `E(x, y, d)` stored in `(y, x, d)` order.
#[derive(Clone, Debug, PartialEq)]
pub struct CostVolume<T> {
    width: usize,
    height: usize,
    labels: usize,
    data: Vec<T>,
}

impl<T: Real> CostVolume<T> {
    pub fn new(width: usize, height: usize, labels: usize, data: Vec<T>) -> Result<Self> {
        ensure!(labels >= 1, "cost volume needs at least one label");
        ensure!(
            data.len() == width * height * labels,
            "cost volume data length {} != {}x{}x{}",
            data.len(),
            width,
            height,
            labels
        );
        Ok(Self {
            width,
            height,
            labels,
            data,
        })
    }

    pub fn zeros(width: usize, height: usize, labels: usize) -> Self {
        Self {
            width,
            height,
            labels,
            data: vec![T::zero(); width * height * labels],
        }
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        labels: usize,
        mut f: impl FnMut(usize, usize, usize) -> T,
    ) -> Self {
        let mut data = Vec::with_capacity(width * height * labels);
        for y in 0..height {
            for x in 0..width {
                for d in 0..labels {
                    data.push(f(x, y, d));
                }
            }
        }
        Self {
            width,
            height,
            labels,
            data,
        }
    }

    /// Stacks equally sized planes as slices `d = 0, 1, ...`.
    pub fn from_slices(slices: &[Plane<T>]) -> Result<Self> {
        ensure!(!slices.is_empty(), "no slices given");
        let (w, h) = (slices[0].width(), slices[0].height());
        ensure!(
            slices.iter().all(|s| s.width() == w && s.height() == h),
            "slices differ in shape"
        );
        Ok(Self::from_fn(w, h, slices.len(), |x, y, d| slices[d].get(x, y)))
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    /// Number of disparity labels (`d_max + 1`).
    #[inline]
    pub fn labels(&self) -> usize {
        self.labels
    }

    #[inline]
    pub fn d_max(&self) -> usize {
        self.labels - 1
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, d: usize) -> T {
        self.data[(y * self.width + x) * self.labels + d]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, d: usize, v: T) {
        self.data[(y * self.width + x) * self.labels + d] = v;
    }

    /// The cost vector of one pixel.
    #[inline]
    pub fn costs(&self, x: usize, y: usize) -> &[T] {
        let i = (y * self.width + x) * self.labels;
        &self.data[i..i + self.labels]
    }

    pub fn slice(&self, d: usize) -> Plane<T> {
        Plane::from_fn(self.width, self.height, |x, y| self.get(x, y, d))
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn same_shape(&self, other: &CostVolume<T>) -> bool {
        self.width == other.width && self.height == other.height && self.labels == other.labels
    }

    pub fn cast<U: Real>(&self) -> CostVolume<U> {
        CostVolume {
            width: self.width,
            height: self.height,
            labels: self.labels,
            data: cast_slice(&self.data),
        }
    }

    pub fn flip_horizontal(&self) -> CostVolume<T> {
        Self::from_fn(self.width, self.height, self.labels, |x, y, d| {
            self.get(self.width - 1 - x, y, d)
        })
    }

    /// Debug dump: `h, w, labels` as little-endian `u32`, then little-endian
    /// `f32` costs in `(y, x, d)` order.
    pub fn write_raw(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        for dim in [self.height, self.width, self.labels] {
            out.write_all(&(dim as u32).to_le_bytes())?;
        }
        for v in &self.data {
            out.write_all(&(v.to_f64_lossy() as f32).to_le_bytes())?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_raw(path: impl AsRef<Path>) -> Result<Self> {
        let mut input = BufReader::new(File::open(path)?);
        let mut word = [0u8; 4];
        let mut dims = [0usize; 3];
        for dim in &mut dims {
            input.read_exact(&mut word)?;
            *dim = u32::from_le_bytes(word) as usize;
        }
        let [h, w, labels] = dims;
        let count = h
            .checked_mul(w)
            .and_then(|n| n.checked_mul(labels))
            .ok_or_else(|| Error::Format("cost volume header overflows".into()))?;
        let mut bytes = Vec::new();
        input.read_to_end(&mut bytes)?;
        if bytes.len() != count * 4 {
            return Err(Error::Format(format!(
                "cost volume payload has {} bytes, header implies {}",
                bytes.len(),
                count * 4
            )));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| T::lit(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        Self::new(w, h, labels, data)
    }
}

/// Fixed-length bit string, bit `k` stored in word `k / 64` at position `k % 64`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BitString {
    len: usize,
    words: Vec<u64>,
}

impl BitString {
    pub fn from_bits(bits: &[bool]) -> Self {
        let mut words = vec![0u64; bits.len().div_ceil(64)];
        for (k, &b) in bits.iter().enumerate() {
            if b {
                words[k / 64] |= 1 << (k % 64);
            }
        }
        Self {
            len: bits.len(),
            words,
        }
    }

    pub fn from_words(len: usize, words: &[u64]) -> Self {
        Self {
            len,
            words: words.to_vec(),
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn bit(&self, k: usize) -> bool {
        self.words[k / 64] >> (k % 64) & 1 == 1
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    /// Bitwise complement over the `len` meaningful bits.
    pub fn complement(&self) -> Self {
        let bits: Vec<bool> = (0..self.len).map(|k| !self.bit(k)).collect();
        Self::from_bits(&bits)
    }
}

/// Number of differing bit positions.
pub fn hamming(a: &BitString, b: &BitString) -> Result<u32> {
    ensure!(
        a.len == b.len,
        "hamming distance of bit strings with lengths {} and {}",
        a.len,
        b.len
    );
    Ok(hamming_words(&a.words, &b.words))
}

#[inline]
fn hamming_words(a: &[u64], b: &[u64]) -> u32 {
    a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones()).sum()
}

/// Census descriptors of a grey image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CensusImage {
    width: usize,
    height: usize,
    bits: usize,
    words_per_pixel: usize,
    data: Vec<u64>,
}

impl CensusImage {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Descriptor length, `n^2 - 1`.
    pub fn bits(&self) -> usize {
        self.bits
    }

    #[inline]
    fn words(&self, x: usize, y: usize) -> &[u64] {
        let i = (y * self.width + x) * self.words_per_pixel;
        &self.data[i..i + self.words_per_pixel]
    }

    pub fn descriptor(&self, x: usize, y: usize) -> BitString {
        BitString::from_words(self.bits, self.words(x, y))
    }

    #[inline]
    fn distance(&self, x: usize, y: usize, other: &CensusImage, ox: usize) -> u32 {
        hamming_words(self.words(x, y), other.words(ox, y))
    }
}

/// Census transform over an `n x n` patch.
///
/// Bit `k` is set iff the `k`-th neighbour (row-major over the patch, centre
/// skipped) is strictly darker than the centre. Neighbours outside the image
/// are taken from the nearest edge pixel.
pub fn census_transform<T: Real>(gray: &Plane<T>, n: usize) -> Result<CensusImage> {
    check_patch(n)?;
    let (w, h) = (gray.width(), gray.height());
    let bits = n * n - 1;
    let wpp = bits.div_ceil(64);
    let r = (n / 2) as isize;
    let mut data = vec![0u64; w * h * wpp];
    if w == 0 || h == 0 {
        return Ok(CensusImage {
            width: w,
            height: h,
            bits,
            words_per_pixel: wpp,
            data,
        });
    }
    let clamp = |v: isize, hi: usize| v.clamp(0, hi as isize - 1) as usize;
    data.par_chunks_mut(w * wpp).enumerate().for_each(|(y, row)| {
        for x in 0..w {
            let center = gray.get(x, y);
            let desc = &mut row[x * wpp..(x + 1) * wpp];
            let mut k = 0;
            for dy in -r..=r {
                let sy = clamp(y as isize + dy, h);
                for dx in -r..=r {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let sx = clamp(x as isize + dx, w);
                    if gray.get(sx, sy) < center {
                        desc[k / 64] |= 1 << (k % 64);
                    }
                    k += 1;
                }
            }
        }
    });
    Ok(CensusImage {
        width: w,
        height: h,
        bits,
        words_per_pixel: wpp,
        data,
    })
}

/// Normalised SAD between left `(x, y)` and right `(x - d, y)`; `1.0` when
/// `x - d` falls outside the right view.
pub fn sad_cost<T: Real>(left: &Image<T>, right: &Image<T>, x: usize, y: usize, d: usize) -> T {
    if d > x {
        return T::one();
    }
    pixel_sad(left.pixel(x, y), right.pixel(x - d, y))
}

#[inline]
fn pixel_sad<T: Real>(a: &[T], b: &[T]) -> T {
    let sum: T = a.iter().zip(b).map(|(&p, &q)| (p - q).abs()).sum();
    sum / T::lit(a.len() as f64)
}

#[derive(Clone, Copy)]
enum Reference {
    Left,
    Right,
}

fn build<T: Real>(pair: &StereoPair<T>, params: &CostParams, reference: Reference) -> Result<CostVolume<T>> {
    params.validate()?;
    ensure!(
        pair.left.width() == pair.right.width() && pair.left.height() == pair.right.height(),
        "stereo views differ in size"
    );
    let (w, h) = (pair.width(), pair.height());
    let labels = params.d_max + 1;
    let census_l = census_transform(&pair.left_gray, params.census_patch)?;
    let census_r = census_transform(&pair.right_gray, params.census_patch)?;
    let (ref_img, match_img, ref_census, match_census) = match reference {
        Reference::Left => (&pair.left, &pair.right, &census_l, &census_r),
        Reference::Right => (&pair.right, &pair.left, &census_r, &census_l),
    };
    let alpha = T::lit(params.alpha);
    let beta = T::one() - alpha;
    let inv_bits = T::lit(1.0 / census_l.bits() as f64);

    let mut data = vec![T::one(); w * h * labels];
    if w > 0 {
        data.par_chunks_mut(w * labels).enumerate().for_each(|(y, row)| {
            for x in 0..w {
                let costs = &mut row[x * labels..(x + 1) * labels];
                for (d, c) in costs.iter_mut().enumerate() {
                    let mx = match reference {
                        Reference::Left if d <= x => x - d,
                        Reference::Right if x + d < w => x + d,
                        _ => continue,
                    };
                    let sad = pixel_sad(ref_img.pixel(x, y), match_img.pixel(mx, y));
                    let ham = T::lit(ref_census.distance(x, y, match_census, mx) as f64) * inv_bits;
                    *c = alpha * sad + beta * ham;
                }
            }
        });
    }
    CostVolume::new(w, h, labels, data)
}

/// Left-referenced cost volume: `E(x, y, d)` compares left `(x, y)` with right `(x - d, y)`.
pub fn build_cost_volume<T: Real>(pair: &StereoPair<T>, params: &CostParams) -> Result<CostVolume<T>> {
    build(pair, params, Reference::Left)
}

/// Right-referenced cost volume: compares right `(x, y)` with left `(x + d, y)`.
pub fn build_cost_volume_right<T: Real>(
    pair: &StereoPair<T>,
    params: &CostParams,
) -> Result<CostVolume<T>> {
    build(pair, params, Reference::Right)
}
