//! Weight-energy predictor: a small convolutional network over the reference
//! image that emits two energy channels (horizontal, vertical) at half
//! resolution, bilinearly upsampled to the input size.
//!
//! Default topology:
//!
//! | layer | kernel | stride | channels | activation |
//! |-------|--------|--------|----------|------------|
//! | 1     | 3x3    | 1      | 3 -> 16  | ReLU       |
//! | 2     | 3x3    | 2      | 16 -> 16 | ReLU       |
//! | 3     | 3x3    | 1      | 16 -> 16 | ReLU       |
//! | 4     | 3x3    | 1      | 16 -> 8  | ReLU       |
//! | 5     | 1x1    | 1      | 8 -> 2   | linear     |
//!
//! All convolutions zero-pad by `kernel / 2`, so a stride-2 layer maps `n`
//! to `ceil(n / 2)`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{ensure, Error, Result};
use crate::grid::Plane;
use crate::imageio::Image;
use crate::scalar::{cast_slice, Real};

pub const MIN_INPUT_SIZE: usize = 8;
pub const INPUT_CHANNELS: usize = 3;
pub const OUTPUT_CHANNELS: usize = 2;

const CHECKPOINT_MAGIC: &[u8; 8] = b"DTSPRED1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub relu: bool,
}

impl ConvSpec {
    const fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, relu: bool) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            relu,
        }
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn weight_len(&self) -> usize {
        self.out_channels * self.fan_in()
    }

    fn pad(&self) -> usize {
        self.kernel / 2
    }

    fn out_size(&self, n: usize) -> usize {
        (n + 2 * self.pad() - self.kernel) / self.stride + 1
    }
}

pub const DEFAULT_ARCHITECTURE: [ConvSpec; 5] = [
    ConvSpec::new(3, 16, 3, 1, true),
    ConvSpec::new(16, 16, 3, 2, true),
    ConvSpec::new(16, 16, 3, 1, true),
    ConvSpec::new(16, 8, 3, 1, true),
    ConvSpec::new(8, 2, 1, 1, false),
];

/// Kernel (`[out][in][ky][kx]`) and bias of one convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer<T> {
    pub spec: ConvSpec,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> ConvLayer<T> {
    #[inline]
    fn w(&self, oc: usize, ic: usize, ky: usize, kx: usize) -> T {
        let k = self.spec.kernel;
        self.weight[((oc * self.spec.in_channels + ic) * k + ky) * k + kx]
    }
}

/// All trainable tensors of the predictor. Gradients use the same type.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictorParams<T> {
    layers: Vec<ConvLayer<T>>,
}

fn validate_architecture(arch: &[ConvSpec]) -> Result<()> {
    ensure!(!arch.is_empty(), "architecture has no layers");
    ensure!(
        arch[0].in_channels == INPUT_CHANNELS,
        "first layer must take {INPUT_CHANNELS} channels"
    );
    ensure!(
        arch[arch.len() - 1].out_channels == OUTPUT_CHANNELS,
        "last layer must emit exactly {OUTPUT_CHANNELS} channels"
    );
    for pair in arch.windows(2) {
        ensure!(
            pair[0].out_channels == pair[1].in_channels,
            "layer channel counts do not chain"
        );
    }
    for s in arch {
        ensure!(s.kernel % 2 == 1 && s.stride >= 1, "kernels must be odd, strides >= 1");
    }
    Ok(())
}

impl<T: Real> PredictorParams<T> {
    pub fn zeros(arch: &[ConvSpec]) -> Result<Self> {
        validate_architecture(arch)?;
        Ok(Self {
            layers: arch
                .iter()
                .map(|&spec| ConvLayer {
                    spec,
                    weight: vec![T::zero(); spec.weight_len()],
                    bias: vec![T::zero(); spec.out_channels],
                })
                .collect(),
        })
    }

    /// Zero tensors with the same shapes as `self`.
    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.architecture()).expect("architecture already validated")
    }

    pub fn layers(&self) -> &[ConvLayer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [ConvLayer<T>] {
        &mut self.layers
    }

    pub fn architecture(&self) -> Vec<ConvSpec> {
        self.layers.iter().map(|l| l.spec).collect()
    }

    /// Parameter tensors in a fixed order (weight, bias per layer).
    pub fn tensors(&self) -> impl Iterator<Item = &[T]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Vec<T>> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    pub fn param_count(&self) -> usize {
        self.tensors().map(<[T]>::len).sum()
    }

    /// Flat view of every parameter, in [`Self::tensors`] order.
    pub fn flatten(&self) -> Vec<T> {
        self.tensors().flatten().copied().collect()
    }

    pub fn get_flat(&self, mut index: usize) -> T {
        for t in self.tensors() {
            if index < t.len() {
                return t[index];
            }
            index -= t.len();
        }
        panic!("parameter index out of range");
    }

    pub fn set_flat(&mut self, mut index: usize, value: T) {
        for t in self.tensors_mut() {
            if index < t.len() {
                t[index] = value;
                return;
            }
            index -= t.len();
        }
        panic!("parameter index out of range");
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.architecture() == other.architecture()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().flatten().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> PredictorParams<U> {
        PredictorParams {
            layers: self
                .layers
                .iter()
                .map(|l| ConvLayer {
                    spec: l.spec,
                    weight: cast_slice(&l.weight),
                    bias: cast_slice(&l.bias),
                })
                .collect(),
        }
    }

    /// Binary checkpoint: magic, layer count, per-layer shape header
    /// (`in, out, kernel, stride, relu` as little-endian `u32`), then the
    /// little-endian `f32` payload (weights then bias, layer by layer).
    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        out.write_all(CHECKPOINT_MAGIC)?;
        out.write_all(&(self.layers.len() as u32).to_le_bytes())?;
        for l in &self.layers {
            let s = l.spec;
            for v in [s.in_channels, s.out_channels, s.kernel, s.stride, s.relu as usize] {
                out.write_all(&(v as u32).to_le_bytes())?;
            }
        }
        for v in self.tensors().flatten() {
            out.write_all(&(v.to_f64_lossy() as f32).to_le_bytes())?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
        let mut words = bytes.get(CHECKPOINT_MAGIC.len()..).unwrap_or_default().chunks_exact(4);
        if !bytes.starts_with(CHECKPOINT_MAGIC) {
            return Err(Error::Format("not a predictor checkpoint".into()));
        }
        let truncated = || Error::Format("truncated predictor checkpoint".into());
        let mut next = || -> Result<[u8; 4]> {
            let c = words.next().ok_or_else(truncated)?;
            Ok([c[0], c[1], c[2], c[3]])
        };
        let count = u32::from_le_bytes(next()?) as usize;
        if count == 0 || count > 1024 {
            return Err(Error::Format(format!("implausible layer count {count}")));
        }
        let mut arch = Vec::with_capacity(count);
        for _ in 0..count {
            let mut f = [0usize; 5];
            for v in &mut f {
                *v = u32::from_le_bytes(next()?) as usize;
            }
            arch.push(ConvSpec::new(f[0], f[1], f[2], f[3], f[4] != 0));
        }
        let mut params = Self::zeros(&arch).map_err(|e| Error::Format(e.to_string()))?;
        for t in params.tensors_mut() {
            for v in t.iter_mut() {
                *v = T::lit(f32::from_le_bytes(next()?) as f64);
            }
        }
        if next().is_ok() {
            return Err(Error::Format("trailing bytes in predictor checkpoint".into()));
        }
        if !params.is_finite() {
            return Err(Error::Format("checkpoint holds non-finite parameters".into()));
        }
        Ok(params)
    }
}

/// He-initialised default predictor. Kernels are `N(0, 2 / fan_in)`, biases
/// zero, and the final layer is all zero so the first forward pass emits zero
/// energy (every weight equal to one).
pub fn init_params<T: Real>(seed: u64) -> PredictorParams<T> {
    let mut params = PredictorParams::zeros(&DEFAULT_ARCHITECTURE).expect("default architecture");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let last = params.layers.len() - 1;
    for layer in &mut params.layers[..last] {
        let std = (2.0 / layer.spec.fan_in() as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        for w in &mut layer.weight {
            *w = T::lit(normal.sample(&mut rng));
        }
    }
    params
}

/// Planar feature tensor `[channel][y][x]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T> {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Real> FeatureMap<T> {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![T::zero(); channels * height * width],
        }
    }

    pub fn from_image(img: &Image<T>) -> Self {
        let (w, h, c) = (img.width(), img.height(), img.channels());
        let mut data = Vec::with_capacity(w * h * c);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    data.push(img.get(x, y, ch));
                }
            }
        }
        Self {
            channels: c,
            height: h,
            width: w,
            data,
        }
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> T {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn channel_plane(&self, c: usize) -> Plane<T> {
        let n = self.height * self.width;
        Plane::new(self.width, self.height, self.data[c * n..(c + 1) * n].to_vec())
            .expect("channel sized from map")
    }
}

/// Convolution (plus optional ReLU) of one layer.
pub fn conv_forward<T: Real>(input: &FeatureMap<T>, layer: &ConvLayer<T>) -> FeatureMap<T> {
    let s = layer.spec;
    let (oh, ow) = (s.out_size(input.height), s.out_size(input.width));
    let (ih, iw) = (input.height as isize, input.width as isize);
    let pad = s.pad() as isize;
    let mut out = FeatureMap::zeros(s.out_channels, oh, ow);
    let plane = oh * ow;
    if plane == 0 {
        return out;
    }
    out.data.par_chunks_mut(plane).enumerate().for_each(|(oc, dst)| {
        dst.fill(layer.bias[oc]);
        for ic in 0..s.in_channels {
            let src = &input.data[ic * input.height * input.width..(ic + 1) * input.height * input.width];
            for ky in 0..s.kernel {
                for kx in 0..s.kernel {
                    let wv = layer.w(oc, ic, ky, kx);
                    for oy in 0..oh {
                        let iy = (oy * s.stride) as isize + ky as isize - pad;
                        if iy < 0 || iy >= ih {
                            continue;
                        }
                        let srow = &src[iy as usize * input.width..(iy as usize + 1) * input.width];
                        let drow = &mut dst[oy * ow..(oy + 1) * ow];
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * s.stride) as isize + kx as isize - pad;
                            if ix >= 0 && ix < iw {
                                *d += wv * srow[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        if s.relu {
            for v in dst.iter_mut() {
                *v = v.max(T::zero());
            }
        }
    });
    out
}

/// Backward of [`conv_forward`]. `dl_dout` is the gradient w.r.t. the
/// post-activation output and is turned into the pre-activation gradient in
/// place. Returns the input gradient when `want_input` is set.
fn conv_backward<T: Real>(
    input: &FeatureMap<T>,
    output: &FeatureMap<T>,
    layer: &ConvLayer<T>,
    dl_dout: &mut FeatureMap<T>,
    grad: &mut ConvLayer<T>,
    want_input: bool,
) -> Option<FeatureMap<T>> {
    let s = layer.spec;
    let (oh, ow) = (output.height, output.width);
    let (ih, iw) = (input.height, input.width);
    let pad = s.pad() as isize;
    let k = s.kernel;
    if s.relu {
        for (g, &o) in dl_dout.data.iter_mut().zip(&output.data) {
            if o <= T::zero() {
                *g = T::zero();
            }
        }
    }
    let dz = &dl_dout.data;
    let oplane = oh * ow;
    let iplane = ih * iw;

    // Valid output rows/columns for a kernel tap: those whose input index lies inside.
    let taps = |n_out: usize, n_in: usize, kk: usize| -> Vec<(usize, usize)> {
        (0..n_out)
            .filter_map(|o| {
                let i = (o * s.stride) as isize + kk as isize - pad;
                (i >= 0 && (i as usize) < n_in).then_some((o, i as usize))
            })
            .collect()
    };
    let row_taps: Vec<_> = (0..k).map(|ky| taps(oh, ih, ky)).collect();
    let col_taps: Vec<_> = (0..k).map(|kx| taps(ow, iw, kx)).collect();

    let fan = s.in_channels * k * k;
    grad.weight
        .par_chunks_mut(fan)
        .zip(grad.bias.par_iter_mut())
        .enumerate()
        .for_each(|(oc, (gw, gb))| {
            let dzc = &dz[oc * oplane..(oc + 1) * oplane];
            *gb += dzc.iter().copied().sum::<T>();
            for ic in 0..s.in_channels {
                let src = &input.data[ic * iplane..(ic + 1) * iplane];
                for ky in 0..k {
                    for kx in 0..k {
                        let mut acc = T::zero();
                        for &(oy, iy) in &row_taps[ky] {
                            let drow = &dzc[oy * ow..(oy + 1) * ow];
                            let srow = &src[iy * iw..(iy + 1) * iw];
                            for &(ox, ix) in &col_taps[kx] {
                                acc += drow[ox] * srow[ix];
                            }
                        }
                        gw[(ic * k + ky) * k + kx] += acc;
                    }
                }
            }
        });

    if !want_input {
        return None;
    }
    let mut din = FeatureMap::zeros(s.in_channels, ih, iw);
    din.data.par_chunks_mut(iplane).enumerate().for_each(|(ic, dst)| {
        for oc in 0..s.out_channels {
            let dzc = &dz[oc * oplane..(oc + 1) * oplane];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = layer.w(oc, ic, ky, kx);
                    for &(oy, iy) in &row_taps[ky] {
                        for &(ox, ix) in &col_taps[kx] {
                            dst[iy * iw + ix] += wv * dzc[oy * ow + ox];
                        }
                    }
                }
            }
        }
    });
    Some(din)
}

/// Interpolation taps along one axis for align-corners resampling.
fn axis_taps<T: Real>(src: usize, dst: usize) -> Vec<(usize, usize, T)> {
    (0..dst)
        .map(|i| {
            if src == 1 || dst == 1 {
                return (0, 0, T::zero());
            }
            let pos = i as f64 * (src - 1) as f64 / (dst - 1) as f64;
            let i0 = (pos.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, T::lit(pos - i0 as f64))
        })
        .collect()
}

fn check_upsample(src_w: usize, src_h: usize, width: usize, height: usize) -> Result<()> {
    ensure!(
        src_w >= 1 && src_h >= 1 && src_w <= width && src_h <= height,
        "cannot upsample {src_w}x{src_h} to {width}x{height}"
    );
    Ok(())
}

/// Align-corners bilinear upsampling to `width x height`.
pub fn bilinear_upsample<T: Real>(src: &Plane<T>, width: usize, height: usize) -> Result<Plane<T>> {
    check_upsample(src.width(), src.height(), width, height)?;
    let rows = axis_taps::<T>(src.height(), height);
    let cols = axis_taps::<T>(src.width(), width);
    let one = T::one();
    Ok(Plane::from_fn(width, height, |x, y| {
        let (y0, y1, fy) = rows[y];
        let (x0, x1, fx) = cols[x];
        let top = (one - fx) * src.get(x0, y0) + fx * src.get(x1, y0);
        let bottom = (one - fx) * src.get(x0, y1) + fx * src.get(x1, y1);
        (one - fy) * top + fy * bottom
    }))
}

/// Transpose of [`bilinear_upsample`]: scatters `seed` back onto the source grid.
pub fn bilinear_upsample_backward<T: Real>(seed: &Plane<T>, src_width: usize, src_height: usize) -> Result<Plane<T>> {
    check_upsample(src_width, src_height, seed.width(), seed.height())?;
    let rows = axis_taps::<T>(src_height, seed.height());
    let cols = axis_taps::<T>(src_width, seed.width());
    let one = T::one();
    let mut out = Plane::zeros(src_width, src_height);
    let buf = out.as_mut_slice();
    for (y, &(y0, y1, fy)) in rows.iter().enumerate() {
        for (x, &(x0, x1, fx)) in cols.iter().enumerate() {
            let g = seed.get(x, y);
            buf[y0 * src_width + x0] += (one - fy) * (one - fx) * g;
            buf[y0 * src_width + x1] += (one - fy) * fx * g;
            buf[y1 * src_width + x0] += fy * (one - fx) * g;
            buf[y1 * src_width + x1] += fy * fx * g;
        }
    }
    Ok(out)
}

/// Activations recorded by [`predictor_forward`].
#[derive(Clone, Debug)]
pub struct PredictorTape<T> {
    params: PredictorParams<T>,
    /// `activations[0]` is the input, `activations[l + 1]` the output of layer `l`.
    activations: Vec<FeatureMap<T>>,
    width: usize,
    height: usize,
}

impl<T: Real> PredictorTape<T> {
    /// Low-resolution network output (before upsampling).
    pub fn raw_output(&self) -> &FeatureMap<T> {
        self.activations.last().expect("tape has the input at least")
    }

    pub fn activations(&self) -> &[FeatureMap<T>] {
        &self.activations
    }

    /// Recomputes every layer from its recorded input and compares bit-for-bit.
    pub fn replays_exactly(&self) -> bool {
        self.params
            .layers
            .iter()
            .enumerate()
            .all(|(l, layer)| conv_forward(&self.activations[l], layer) == self.activations[l + 1])
    }
}

/// Runs the network and upsamples its two channels to the image size.
/// Returns `(e_hor, e_vert, tape)`.
pub fn predictor_forward<T: Real>(
    img: &Image<T>,
    params: &PredictorParams<T>,
) -> Result<(Plane<T>, Plane<T>, PredictorTape<T>)> {
    ensure!(
        img.width() >= MIN_INPUT_SIZE && img.height() >= MIN_INPUT_SIZE,
        "predictor needs at least {MIN_INPUT_SIZE}x{MIN_INPUT_SIZE} pixels, got {}x{}",
        img.width(),
        img.height()
    );
    ensure!(
        img.channels() == INPUT_CHANNELS,
        "predictor takes {INPUT_CHANNELS}-channel images"
    );
    let mut activations = Vec::with_capacity(params.layers.len() + 1);
    activations.push(FeatureMap::from_image(img));
    for layer in &params.layers {
        let next = conv_forward(activations.last().expect("non-empty"), layer);
        activations.push(next);
    }
    let raw = activations.last().expect("non-empty");
    let (w, h) = (img.width(), img.height());
    let e_hor = bilinear_upsample(&raw.channel_plane(0), w, h)?;
    let e_vert = bilinear_upsample(&raw.channel_plane(1), w, h)?;
    ensure!(
        e_hor.as_slice().iter().chain(e_vert.as_slice()).all(|v| v.is_finite()),
        "predictor produced non-finite energies"
    );
    let tape = PredictorTape {
        params: params.clone(),
        activations,
        width: w,
        height: h,
    };
    Ok((e_hor, e_vert, tape))
}

/// Parameter gradients given the gradients of both full-resolution energy maps.
pub fn predictor_backward<T: Real>(
    tape: &PredictorTape<T>,
    dl_de_hor: &Plane<T>,
    dl_de_vert: &Plane<T>,
) -> Result<PredictorParams<T>> {
    for g in [dl_de_hor, dl_de_vert] {
        ensure!(
            g.width() == tape.width && g.height() == tape.height,
            "energy gradient is {}x{}, forward ran at {}x{}",
            g.width(),
            g.height(),
            tape.width,
            tape.height
        );
    }
    let raw = tape.raw_output();
    let gh = bilinear_upsample_backward(dl_de_hor, raw.width, raw.height)?;
    let gv = bilinear_upsample_backward(dl_de_vert, raw.width, raw.height)?;
    let mut seed = FeatureMap {
        channels: 2,
        height: raw.height,
        width: raw.width,
        data: [gh.into_vec(), gv.into_vec()].concat(),
    };
    let mut grads = tape.params.zeros_like();
    for l in (0..tape.params.layers.len()).rev() {
        let din = conv_backward(
            &tape.activations[l],
            &tape.activations[l + 1],
            &tape.params.layers[l],
            &mut seed,
            &mut grads.layers[l],
            l > 0,
        );
        if let Some(din) = din {
            seed = din;
        }
    }
    Ok(grads)
}
