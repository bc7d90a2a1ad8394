//! Recursive domain-transform filtering.
//!
//! The 1-D filter is the gated recurrence `y[0] = x[0]`,
//! `y[i] = (1 - w[i]) x[i] + w[i] y[i-1]`. A 2-D image is filtered by four
//! cascaded passes (left->right, right->left, top->bottom, bottom->top), the
//! horizontal ones gated by `w_hor` and the vertical ones by `w_vert`. Cost
//! volumes are filtered slice by slice with the same pair of weight maps.
//!
//! Buffers are laid out `(y, x, c)` with `c` the innermost index, which lets
//! one pass update every disparity slice of a pixel in a single inner loop.

use rayon::prelude::*;

use crate::costvol::CostVolume;
use crate::dtgrad::{Dt1dTape, DtTape};
use crate::error::{ensure, Result};
use crate::grid::Plane;
use crate::imageio::Image;
use crate::scalar::Real;

pub const DEFAULT_SIGMA: f64 = 4.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DtParams {
    /// Scale of the energy-to-weight mapping `w = exp(-sigma * e)`.
    pub sigma: f64,
}

impl Default for DtParams {
    fn default() -> Self {
        Self {
            sigma: DEFAULT_SIGMA,
        }
    }
}

impl DtParams {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.sigma > 0.0 && self.sigma.is_finite(),
            "sigma must be positive, got {}",
            self.sigma
        );
        Ok(())
    }
}

/// Per-pixel gates for the horizontal and vertical passes, each in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightMaps<T> {
    hor: Plane<T>,
    vert: Plane<T>,
}

impl<T: Real> WeightMaps<T> {
    pub fn new(hor: Plane<T>, vert: Plane<T>) -> Result<Self> {
        ensure!(hor.same_shape(&vert), "weight maps differ in shape");
        let in_range = |p: &Plane<T>| {
            p.as_slice()
                .iter()
                .all(|&v| v >= T::zero() && v <= T::one())
        };
        ensure!(
            in_range(&hor) && in_range(&vert),
            "weights must lie in [0, 1]"
        );
        Ok(Self { hor, vert })
    }

    pub fn uniform(width: usize, height: usize, value: T) -> Result<Self> {
        Self::new(
            Plane::filled(width, height, value),
            Plane::filled(width, height, value),
        )
    }

    pub fn hor(&self) -> &Plane<T> {
        &self.hor
    }

    pub fn vert(&self) -> &Plane<T> {
        &self.vert
    }

    pub fn width(&self) -> usize {
        self.hor.width()
    }

    pub fn height(&self) -> usize {
        self.hor.height()
    }

    /// Both maps as grey images (a weight of 1 renders white).
    pub fn to_images(&self) -> (Image<T>, Image<T>) {
        (Image::from_plane(&self.hor), Image::from_plane(&self.vert))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Pass {
    LeftRight,
    RightLeft,
    TopBottom,
    BottomTop,
}

impl Pass {
    pub(crate) const CASCADE: [Pass; 4] = [
        Pass::LeftRight,
        Pass::RightLeft,
        Pass::TopBottom,
        Pass::BottomTop,
    ];

    pub(crate) fn is_horizontal(self) -> bool {
        matches!(self, Pass::LeftRight | Pass::RightLeft)
    }
}

#[inline]
fn blend<T: Real>(cur: &mut [T], prev: &[T], wt: T) {
    let keep = T::one() - wt;
    for (c, &p) in cur.iter_mut().zip(prev) {
        *c = keep * *c + wt * p;
    }
}

/// Runs one directional pass in place over an `(h, w, c)` buffer.
pub(crate) fn forward_pass<T: Real>(
    buf: &mut [T],
    width: usize,
    channels: usize,
    weights: &Plane<T>,
    pass: Pass,
) {
    let stride = width * channels;
    if stride == 0 {
        return;
    }
    match pass {
        Pass::LeftRight | Pass::RightLeft => {
            buf.par_chunks_mut(stride).enumerate().for_each(|(y, row)| {
                let wrow = &weights.as_slice()[y * width..(y + 1) * width];
                if pass == Pass::LeftRight {
                    for x in 1..width {
                        let (prev, cur) = row.split_at_mut(x * channels);
                        blend(&mut cur[..channels], &prev[(x - 1) * channels..], wrow[x]);
                    }
                } else {
                    for x in (0..width.saturating_sub(1)).rev() {
                        let (cur, next) = row.split_at_mut((x + 1) * channels);
                        blend(&mut cur[x * channels..], &next[..channels], wrow[x]);
                    }
                }
            });
        }
        Pass::TopBottom | Pass::BottomTop => {
            let height = buf.len() / stride;
            let mut step = |y: usize, from: usize| {
                let wrow = &weights.as_slice()[y * width..(y + 1) * width];
                let (cur, prev) = if from < y {
                    let (a, b) = buf.split_at_mut(y * stride);
                    (&mut b[..stride], &a[from * stride..])
                } else {
                    let (a, b) = buf.split_at_mut(from * stride);
                    (&mut a[y * stride..], &b[..stride])
                };
                for x in 0..width {
                    let px = x * channels..(x + 1) * channels;
                    blend(&mut cur[px.clone()], &prev[px], wrow[x]);
                }
            };
            if pass == Pass::TopBottom {
                for y in 1..height {
                    step(y, y - 1);
                }
            } else {
                for y in (0..height.saturating_sub(1)).rev() {
                    step(y, y + 1);
                }
            }
        }
    }
}

fn cascade<T: Real>(
    buf: &mut [T],
    width: usize,
    channels: usize,
    maps: &WeightMaps<T>,
    mut record: impl FnMut(usize, &[T]),
) {
    for (k, pass) in Pass::CASCADE.into_iter().enumerate() {
        record(k, buf);
        let weights = if pass.is_horizontal() {
            &maps.hor
        } else {
            &maps.vert
        };
        forward_pass(buf, width, channels, weights, pass);
    }
    record(4, buf);
}

/// 1-D recurrence. `w[0]` is ignored.
pub fn dt_1d<T: Real>(x: &[T], w: &[T]) -> Result<Vec<T>> {
    ensure!(
        x.len() == w.len(),
        "signal length {} != weight length {}",
        x.len(),
        w.len()
    );
    let mut y = x.to_vec();
    for i in 1..y.len() {
        y[i] = (T::one() - w[i]) * x[i] + w[i] * y[i - 1];
    }
    Ok(y)
}

/// [`dt_1d`] that also records what the backward pass needs.
pub fn dt_1d_taped<T: Real>(x: &[T], w: &[T]) -> Result<(Vec<T>, Dt1dTape<T>)> {
    let y = dt_1d(x, w)?;
    let tape = Dt1dTape {
        x: x.to_vec(),
        w: w.to_vec(),
        y: y.clone(),
    };
    Ok((y, tape))
}

fn check_maps<T: Real>(width: usize, height: usize, maps: &WeightMaps<T>) -> Result<()> {
    ensure!(
        maps.width() == width && maps.height() == height,
        "weight maps are {}x{}, input is {}x{}",
        maps.width(),
        maps.height(),
        width,
        height
    );
    Ok(())
}

/// Four-pass 2-D domain transform of a single plane.
pub fn dt_2d<T: Real>(img: &Plane<T>, maps: &WeightMaps<T>) -> Result<Plane<T>> {
    check_maps(img.width(), img.height(), maps)?;
    let mut buf = img.as_slice().to_vec();
    cascade(&mut buf, img.width(), 1, maps, |_, _| {});
    Plane::new(img.width(), img.height(), buf)
}

/// [`dt_2d`] plus the tape for [`crate::dtgrad::dt_2d_backward`].
pub fn dt_2d_taped<T: Real>(img: &Plane<T>, maps: &WeightMaps<T>) -> Result<(Plane<T>, DtTape<T>)> {
    check_maps(img.width(), img.height(), maps)?;
    let (buf, tape) = taped(img.as_slice(), img.width(), img.height(), 1, maps);
    Ok((Plane::new(img.width(), img.height(), buf)?, tape))
}

fn taped<T: Real>(
    input: &[T],
    width: usize,
    height: usize,
    channels: usize,
    maps: &WeightMaps<T>,
) -> (Vec<T>, DtTape<T>) {
    let mut buf = input.to_vec();
    let mut states: Vec<Vec<T>> = Vec::with_capacity(5);
    cascade(&mut buf, width, channels, maps, |_, s| states.push(s.to_vec()));
    let tape = DtTape {
        width,
        height,
        channels,
        maps: maps.clone(),
        states,
    };
    (buf, tape)
}

/// Filters every disparity slice with the same weight maps.
pub fn filter_cost_volume<T: Real>(vol: &CostVolume<T>, maps: &WeightMaps<T>) -> Result<CostVolume<T>> {
    check_maps(vol.width(), vol.height(), maps)?;
    let mut buf = vol.as_slice().to_vec();
    cascade(&mut buf, vol.width(), vol.labels(), maps, |_, _| {});
    CostVolume::new(vol.width(), vol.height(), vol.labels(), buf)
}

/// [`filter_cost_volume`] plus the tape for [`crate::dtgrad::filter_volume_backward`].
pub fn filter_cost_volume_taped<T: Real>(
    vol: &CostVolume<T>,
    maps: &WeightMaps<T>,
) -> Result<(CostVolume<T>, DtTape<T>)> {
    check_maps(vol.width(), vol.height(), maps)?;
    let (buf, tape) = taped(vol.as_slice(), vol.width(), vol.height(), vol.labels(), maps);
    Ok((CostVolume::new(vol.width(), vol.height(), vol.labels(), buf)?, tape))
}

/// `w = exp(-sigma * e)`, clamped into `[0, 1]` (the clamp binds for `e < 0`).
pub fn energy_to_weight<T: Real>(e: &Plane<T>, sigma: f64) -> Result<Plane<T>> {
    ensure!(sigma > 0.0, "sigma must be positive, got {sigma}");
    ensure!(
        e.as_slice().iter().all(|v| v.is_finite()),
        "energy map contains non-finite values"
    );
    let s = T::lit(sigma);
    Ok(e.map(|v| (-s * v).exp().min(T::one())))
}

pub fn energy_to_weights<T: Real>(e_hor: &Plane<T>, e_vert: &Plane<T>, sigma: f64) -> Result<WeightMaps<T>> {
    WeightMaps::new(energy_to_weight(e_hor, sigma)?, energy_to_weight(e_vert, sigma)?)
}
