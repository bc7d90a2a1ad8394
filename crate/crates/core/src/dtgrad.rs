//! Reverse-mode gradients of the domain transform.
//!
//! For one pass, walking the recurrence backwards (`i = N-1 .. 1`) with `g`
//! the running output gradient:
//!
//! ```text
//! dL/dx[i]   = (1 - w[i]) g[i]
//! dL/dw[i]  += (y[i-1] - x[i]) g[i]
//! g[i-1]    += w[i] g[i]
//! ```
//!
//! and finally `dL/dx[0] = g[0]`. The 2-D transform runs the four passes in
//! reverse order; weight gradients are summed over every scanline, both passes
//! sharing a map, and every slice of a cost volume.

use rayon::prelude::*;

use crate::costvol::CostVolume;
use crate::dtfilter::{forward_pass, Pass, WeightMaps};
use crate::error::{ensure, Result};
use crate::grid::Plane;
use crate::scalar::Real;

/// Forward record of a 1-D recurrence.
#[derive(Clone, Debug, PartialEq)]
pub struct Dt1dTape<T> {
    pub x: Vec<T>,
    pub w: Vec<T>,
    pub y: Vec<T>,
}

/// Forward record of a four-pass transform over an `(h, w, c)` buffer.
///
/// `states[k]` is the input of pass `k` (in cascade order) and `states[4]`
/// the final output, so pass `k` maps `states[k]` to `states[k + 1]`.
#[derive(Clone, Debug)]
pub struct DtTape<T> {
    pub(crate) width: usize,
    pub(crate) height: usize,
    pub(crate) channels: usize,
    pub(crate) maps: WeightMaps<T>,
    pub(crate) states: Vec<Vec<T>>,
}

impl<T: Real> DtTape<T> {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn maps(&self) -> &WeightMaps<T> {
        &self.maps
    }

    /// Recorded input of the cascade.
    pub fn input(&self) -> &[T] {
        &self.states[0]
    }

    /// Recorded output of the cascade.
    pub fn output(&self) -> &[T] {
        &self.states[4]
    }

    /// Re-runs every pass from its recorded input and checks the recorded output.
    pub fn replays_exactly(&self) -> bool {
        Pass::CASCADE.into_iter().enumerate().all(|(k, pass)| {
            let mut buf = self.states[k].clone();
            forward_pass(&mut buf, self.width, self.channels, self.weights(pass), pass);
            buf == self.states[k + 1]
        })
    }

    fn weights(&self, pass: Pass) -> &Plane<T> {
        if pass.is_horizontal() {
            self.maps.hor()
        } else {
            self.maps.vert()
        }
    }
}

pub fn dt_1d_backward<T: Real>(tape: &Dt1dTape<T>, dl_dy: &[T]) -> Result<(Vec<T>, Vec<T>)> {
    let n = tape.x.len();
    ensure!(
        tape.w.len() == n && tape.y.len() == n && dl_dy.len() == n,
        "tape and gradient lengths disagree"
    );
    let mut g = dl_dy.to_vec();
    let mut dw = vec![T::zero(); n];
    for i in (1..n).rev() {
        let gi = g[i];
        let wi = tape.w[i];
        dw[i] += (tape.y[i - 1] - tape.x[i]) * gi;
        g[i - 1] += wi * gi;
        g[i] = (T::one() - wi) * gi;
    }
    Ok((g, dw))
}

#[inline]
fn unblend<T: Real>(g_cur: &mut [T], g_prev: &mut [T], x_cur: &[T], y_prev: &[T], wt: T) -> T {
    let keep = T::one() - wt;
    let mut dw = T::zero();
    for k in 0..g_cur.len() {
        let gi = g_cur[k];
        dw += (y_prev[k] - x_cur[k]) * gi;
        g_prev[k] += wt * gi;
        g_cur[k] = keep * gi;
    }
    dw
}

/// Backpropagates one pass in place: `g` holds dL/d(output) on entry and
/// dL/d(input) on exit. `dw` accumulates the weight gradient.
fn backward_pass<T: Real>(
    g: &mut [T],
    dw: &mut [T],
    input: &[T],
    output: &[T],
    width: usize,
    channels: usize,
    weights: &Plane<T>,
    pass: Pass,
) {
    let stride = width * channels;
    if stride == 0 {
        return;
    }
    let c = channels;
    match pass {
        Pass::LeftRight | Pass::RightLeft => {
            g.par_chunks_mut(stride)
                .zip(dw.par_chunks_mut(width))
                .enumerate()
                .for_each(|(y, (grow, dwrow))| {
                    let xin = &input[y * stride..(y + 1) * stride];
                    let yout = &output[y * stride..(y + 1) * stride];
                    let wrow = &weights.as_slice()[y * width..(y + 1) * width];
                    if pass == Pass::LeftRight {
                        for x in (1..width).rev() {
                            let (prev, cur) = grow.split_at_mut(x * c);
                            dwrow[x] += unblend(
                                &mut cur[..c],
                                &mut prev[(x - 1) * c..],
                                &xin[x * c..(x + 1) * c],
                                &yout[(x - 1) * c..x * c],
                                wrow[x],
                            );
                        }
                    } else {
                        for x in 0..width.saturating_sub(1) {
                            let (cur, next) = grow.split_at_mut((x + 1) * c);
                            dwrow[x] += unblend(
                                &mut cur[x * c..],
                                &mut next[..c],
                                &xin[x * c..(x + 1) * c],
                                &yout[(x + 1) * c..(x + 2) * c],
                                wrow[x],
                            );
                        }
                    }
                });
        }
        Pass::TopBottom | Pass::BottomTop => {
            let height = g.len() / stride;
            let mut step = |y: usize, from: usize| {
                let (gcur, gprev) = if from < y {
                    let (a, b) = g.split_at_mut(y * stride);
                    (&mut b[..stride], &mut a[from * stride..])
                } else {
                    let (a, b) = g.split_at_mut(from * stride);
                    (&mut a[y * stride..], &mut b[..stride])
                };
                for x in 0..width {
                    let px = x * c..(x + 1) * c;
                    dw[y * width + x] += unblend(
                        &mut gcur[px.clone()],
                        &mut gprev[px.clone()],
                        &input[y * stride + x * c..y * stride + (x + 1) * c],
                        &output[from * stride + x * c..from * stride + (x + 1) * c],
                        weights.get(x, y),
                    );
                }
            };
            if pass == Pass::TopBottom {
                for y in (1..height).rev() {
                    step(y, y - 1);
                }
            } else {
                for y in 0..height.saturating_sub(1) {
                    step(y, y + 1);
                }
            }
        }
    }
}

fn cascade_backward<T: Real>(tape: &DtTape<T>, seed: &[T]) -> (Vec<T>, Plane<T>, Plane<T>) {
    let (w, h, c) = (tape.width, tape.height, tape.channels);
    let mut g = seed.to_vec();
    let mut dw_hor = Plane::zeros(w, h);
    let mut dw_vert = Plane::zeros(w, h);
    for (k, pass) in Pass::CASCADE.into_iter().enumerate().rev() {
        let dw = if pass.is_horizontal() {
            dw_hor.as_mut_slice()
        } else {
            dw_vert.as_mut_slice()
        };
        backward_pass(
            &mut g,
            dw,
            &tape.states[k],
            &tape.states[k + 1],
            w,
            c,
            tape.weights(pass),
            pass,
        );
    }
    (g, dw_hor, dw_vert)
}

/// Gradients of a [`crate::dtfilter::dt_2d`] call: `(dL/din, dL/dw_hor, dL/dw_vert)`.
pub fn dt_2d_backward<T: Real>(tape: &DtTape<T>, dl_dout: &Plane<T>) -> Result<(Plane<T>, Plane<T>, Plane<T>)> {
    ensure!(tape.channels == 1, "tape records a {}-slice volume, not a plane", tape.channels);
    ensure!(
        dl_dout.width() == tape.width && dl_dout.height() == tape.height,
        "gradient is {}x{}, tape is {}x{}",
        dl_dout.width(),
        dl_dout.height(),
        tape.width,
        tape.height
    );
    let (g, dh, dv) = cascade_backward(tape, dl_dout.as_slice());
    Ok((Plane::new(tape.width, tape.height, g)?, dh, dv))
}

/// Gradients of a [`crate::dtfilter::filter_cost_volume`] call. Weight
/// gradients are summed over all slices.
pub fn filter_volume_backward<T: Real>(
    tape: &DtTape<T>,
    dl_dvol: &CostVolume<T>,
) -> Result<(CostVolume<T>, Plane<T>, Plane<T>)> {
    ensure!(
        dl_dvol.width() == tape.width
            && dl_dvol.height() == tape.height
            && dl_dvol.labels() == tape.channels,
        "gradient volume {}x{}x{} does not match tape {}x{}x{}",
        dl_dvol.width(),
        dl_dvol.height(),
        dl_dvol.labels(),
        tape.width,
        tape.height,
        tape.channels
    );
    let (g, dh, dv) = cascade_backward(tape, dl_dvol.as_slice());
    Ok((CostVolume::new(tape.width, tape.height, tape.channels, g)?, dh, dv))
}

/// Gradient of `w = min(1, exp(-sigma e))`; zero where the clamp is active.
pub fn energy_to_weights_backward<T: Real>(e: &Plane<T>, sigma: f64, dl_dw: &Plane<T>) -> Result<Plane<T>> {
    ensure!(e.same_shape(dl_dw), "energy and gradient shapes differ");
    let s = T::lit(sigma);
    let data = e
        .as_slice()
        .iter()
        .zip(dl_dw.as_slice())
        .map(|(&ev, &g)| {
            if ev < T::zero() {
                T::zero()
            } else {
                -s * (-s * ev).exp() * g
            }
        })
        .collect();
    Plane::new(e.width(), e.height(), data)
}
