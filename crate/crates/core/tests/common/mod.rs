//! Reference implementations and finite-difference helpers shared by the
//! integration tests. Everything here is written from the definitions, with
//! plain loops, and never calls the code paths it is used to check.

#![allow(dead_code)]

use dtstereo::costvol::{CostParams, CostVolume};
use dtstereo::dtfilter::{
    dt_1d_taped, dt_2d_taped, energy_to_weights, filter_cost_volume_taped, WeightMaps,
};
use dtstereo::dtgrad::{dt_1d_backward, dt_2d_backward, energy_to_weights_backward, filter_volume_backward};
use dtstereo::grid::Plane;
use dtstereo::imageio::{DisparityMap, Image, StereoPair};
use dtstereo::matcher::{softmax_xent_loss, PipelineConfig};
use dtstereo::predictor::{
    bilinear_upsample, bilinear_upsample_backward, init_params, predictor_backward, predictor_forward,
    PredictorParams,
};
use dtstereo::trainer::{loss_and_gradient, sample_loss, TrainSample};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_vec(rng: &mut impl Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

pub fn random_plane(rng: &mut impl Rng, w: usize, h: usize, lo: f64, hi: f64) -> Plane<f64> {
    Plane::new(w, h, uniform_vec(rng, w * h, lo, hi)).unwrap()
}

pub fn random_image(rng: &mut impl Rng, w: usize, h: usize, c: usize) -> Image<f64> {
    Image::new(w, h, c, uniform_vec(rng, w * h * c, 0.0, 1.0)).unwrap()
}

/// Image with few grey levels, so census ties and equal costs actually occur.
pub fn quantized_image(rng: &mut impl Rng, w: usize, h: usize, c: usize, levels: u32) -> Image<f64> {
    let data = (0..w * h * c)
        .map(|_| rng.random_range(0..levels) as f64 / (levels - 1) as f64)
        .collect();
    Image::new(w, h, c, data).unwrap()
}

pub fn random_maps(rng: &mut impl Rng, w: usize, h: usize) -> WeightMaps<f64> {
    WeightMaps::new(random_plane(rng, w, h, 0.0, 1.0), random_plane(rng, w, h, 0.0, 1.0)).unwrap()
}

pub fn random_volume(rng: &mut impl Rng, w: usize, h: usize, labels: usize) -> CostVolume<f64> {
    CostVolume::new(w, h, labels, uniform_vec(rng, w * h * labels, 0.0, 1.0)).unwrap()
}

// ---------------------------------------------------------------- oracles

/// Census bits of pixel `(x, y)` as a bool vector, row-major, centre skipped.
pub fn census_bits(gray: &Plane<f64>, x: usize, y: usize, n: usize) -> Vec<bool> {
    let r = (n / 2) as i64;
    let (w, h) = (gray.width() as i64, gray.height() as i64);
    let c = gray.get(x, y);
    let mut bits = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dx == 0 && dy == 0 {
                continue;
            }
            let sx = (x as i64 + dx).max(0).min(w - 1) as usize;
            let sy = (y as i64 + dy).max(0).min(h - 1) as usize;
            bits.push(gray.get(sx, sy) < c);
        }
    }
    bits
}

pub fn gray_of(img: &Image<f64>) -> Plane<f64> {
    Plane::from_fn(img.width(), img.height(), |x, y| {
        if img.channels() == 1 {
            img.get(x, y, 0)
        } else {
            0.299 * img.get(x, y, 0) + 0.587 * img.get(x, y, 1) + 0.114 * img.get(x, y, 2)
        }
    })
}

/// Direct evaluation of the blended matching cost for every `(x, y, d)`.
pub fn brute_cost_volume(left: &Image<f64>, right: &Image<f64>, p: &CostParams) -> CostVolume<f64> {
    let (w, h, ch) = (left.width(), left.height(), left.channels());
    let (gl, gr) = (gray_of(left), gray_of(right));
    let nbits = (p.census_patch * p.census_patch - 1) as f64;
    CostVolume::from_fn(w, h, p.d_max + 1, |x, y, d| {
        if d > x {
            return 1.0;
        }
        let sad: f64 = (0..ch)
            .map(|c| (left.get(x, y, c) - right.get(x - d, y, c)).abs())
            .sum::<f64>()
            / ch as f64;
        let a = census_bits(&gl, x, y, p.census_patch);
        let b = census_bits(&gr, x - d, y, p.census_patch);
        let ham = a.iter().zip(&b).filter(|(u, v)| u != v).count() as f64;
        p.alpha * sad + (1.0 - p.alpha) * ham / nbits
    })
}

pub fn brute_wta(vol: &CostVolume<f64>) -> Vec<f32> {
    let mut out = Vec::new();
    for y in 0..vol.height() {
        for x in 0..vol.width() {
            let mut best = 0;
            for d in 1..vol.labels() {
                if vol.get(x, y, d) < vol.get(x, y, best) {
                    best = d;
                }
            }
            out.push(best as f32);
        }
    }
    out
}

/// The scalar recurrence along one sequence.
pub fn recur(x: &[f64], w: &[f64]) -> Vec<f64> {
    let mut y = x.to_vec();
    for i in 1..x.len() {
        y[i] = (1.0 - w[i]) * x[i] + w[i] * y[i - 1];
    }
    y
}

/// Four-pass cascade built from explicit row and column sequences.
pub fn brute_dt_2d(img: &Plane<f64>, maps: &WeightMaps<f64>) -> Plane<f64> {
    let (w, h) = (img.width(), img.height());
    let mut cur: Vec<Vec<f64>> = (0..h).map(|y| (0..w).map(|x| img.get(x, y)).collect()).collect();
    // left to right, right to left
    for reverse in [false, true] {
        for y in 0..h {
            let mut idx: Vec<usize> = (0..w).collect();
            if reverse {
                idx.reverse();
            }
            let xs: Vec<f64> = idx.iter().map(|&x| cur[y][x]).collect();
            let ws: Vec<f64> = idx.iter().map(|&x| maps.hor().get(x, y)).collect();
            for (k, v) in recur(&xs, &ws).into_iter().enumerate() {
                cur[y][idx[k]] = v;
            }
        }
    }
    // top to bottom, bottom to top
    for reverse in [false, true] {
        for x in 0..w {
            let mut idx: Vec<usize> = (0..h).collect();
            if reverse {
                idx.reverse();
            }
            let xs: Vec<f64> = idx.iter().map(|&y| cur[y][x]).collect();
            let ws: Vec<f64> = idx.iter().map(|&y| maps.vert().get(x, y)).collect();
            for (k, v) in recur(&xs, &ws).into_iter().enumerate() {
                cur[idx[k]][x] = v;
            }
        }
    }
    Plane::from_fn(w, h, |x, y| cur[y][x])
}

/// Zero-padded strided convolution, one explicit loop per index.
/// Input and output are planar `[c][y][x]`; weights `[oc][ic][ky][kx]`.
#[allow(clippy::too_many_arguments)]
pub fn direct_conv(
    input: &[f64],
    in_c: usize,
    in_h: usize,
    in_w: usize,
    weight: &[f64],
    bias: &[f64],
    out_c: usize,
    k: usize,
    stride: usize,
    relu: bool,
) -> (Vec<f64>, usize, usize) {
    let pad = (k / 2) as i64;
    let out_h = in_h.div_ceil(stride);
    let out_w = in_w.div_ceil(stride);
    let mut out = vec![0.0; out_c * out_h * out_w];
    for oc in 0..out_c {
        for oy in 0..out_h {
            for ox in 0..out_w {
                let mut acc = bias[oc];
                for ic in 0..in_c {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride) as i64 + ky as i64 - pad;
                            let ix = (ox * stride) as i64 + kx as i64 - pad;
                            if iy < 0 || ix < 0 || iy >= in_h as i64 || ix >= in_w as i64 {
                                continue;
                            }
                            acc += weight[((oc * in_c + ic) * k + ky) * k + kx]
                                * input[(ic * in_h + iy as usize) * in_w + ix as usize];
                        }
                    }
                }
                out[(oc * out_h + oy) * out_w + ox] = if relu { acc.max(0.0) } else { acc };
            }
        }
    }
    (out, out_h, out_w)
}

/// Align-corners bilinear sample of a `sw x sh` grid at target `(x, y)` of `w x h`.
pub fn bilinear_at(src: &[f64], sw: usize, sh: usize, w: usize, h: usize, x: usize, y: usize) -> f64 {
    let coord = |i: usize, s: usize, n: usize| -> (usize, usize, f64) {
        if s == 1 || n == 1 {
            return (0, 0, 0.0);
        }
        let p = i as f64 * (s - 1) as f64 / (n - 1) as f64;
        let i0 = (p.floor() as usize).min(s - 1);
        (i0, (i0 + 1).min(s - 1), p - i0 as f64)
    };
    let (x0, x1, fx) = coord(x, sw, w);
    let (y0, y1, fy) = coord(y, sh, h);
    let g = |xx: usize, yy: usize| src[yy * sw + xx];
    (1.0 - fy) * ((1.0 - fx) * g(x0, y0) + fx * g(x1, y0)) + fy * ((1.0 - fx) * g(x0, y1) + fx * g(x1, y1))
}

/// Whole predictor from the direct convolution: returns `(e_hor, e_vert)`.
pub fn brute_predictor(img: &Image<f64>, params: &PredictorParams<f64>) -> (Vec<f64>, Vec<f64>) {
    let (w, h) = (img.width(), img.height());
    let mut cur: Vec<f64> = (0..3)
        .flat_map(|c| (0..h).flat_map(move |y| (0..w).map(move |x| (c, x, y))))
        .map(|(c, x, y)| img.get(x, y, c))
        .collect();
    let (mut ch, mut ih, mut iw) = (3, h, w);
    for layer in params.layers() {
        let s = layer.spec;
        let (out, oh, ow) = direct_conv(
            &cur,
            ch,
            ih,
            iw,
            &layer.weight,
            &layer.bias,
            s.out_channels,
            s.kernel,
            s.stride,
            s.relu,
        );
        cur = out;
        ch = s.out_channels;
        ih = oh;
        iw = ow;
    }
    let up = |c: usize| -> Vec<f64> {
        let plane = &cur[c * ih * iw..(c + 1) * ih * iw];
        (0..h)
            .flat_map(|y| (0..w).map(move |x| (x, y)))
            .map(|(x, y)| bilinear_at(plane, iw, ih, w, h, x, y))
            .collect()
    };
    (up(0), up(1))
}

/// Smallest |pre-activation| over every ReLU unit, and the smallest |energy|
/// of the two full-resolution outputs. Central differences are only a valid
/// oracle when no perturbation can push one of these across zero.
pub fn kink_margins(img: &Image<f64>, params: &PredictorParams<f64>) -> (f64, f64) {
    let (w, h) = (img.width(), img.height());
    let mut cur: Vec<f64> = (0..3)
        .flat_map(|c| (0..h).flat_map(move |y| (0..w).map(move |x| (c, x, y))))
        .map(|(c, x, y)| img.get(x, y, c))
        .collect();
    let (mut ch, mut ih, mut iw) = (3, h, w);
    let mut relu_margin = f64::INFINITY;
    for layer in params.layers() {
        let s = layer.spec;
        let (pre, oh, ow) = direct_conv(&cur, ch, ih, iw, &layer.weight, &layer.bias, s.out_channels, s.kernel, s.stride, false);
        if s.relu {
            relu_margin = pre.iter().fold(relu_margin, |m, v| m.min(v.abs()));
            cur = pre.iter().map(|v| v.max(0.0)).collect();
        } else {
            cur = pre;
        }
        ch = s.out_channels;
        ih = oh;
        iw = ow;
    }
    let (eh, ev) = brute_predictor(img, params);
    let energy_margin = eh.iter().chain(&ev).fold(f64::INFINITY, |m, v| m.min(v.abs()));
    (relu_margin, energy_margin)
}

pub const KINK_MARGIN: f64 = 1e-4;

/// Random predictor parameters with every tensor (final layer included) non-zero.
pub fn random_params(seed: u64) -> PredictorParams<f64> {
    let mut p: PredictorParams<f64> = init_params(seed);
    let mut r = rng(seed ^ 0x5eed);
    for t in p.tensors_mut() {
        for v in t.iter_mut() {
            if *v == 0.0 {
                *v = r.random_range(-0.3..0.3);
            }
        }
    }
    p
}

// ------------------------------------------------------- finite differences

pub const FD_STEP: f64 = 1e-5;

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Central difference of `sum_j c_j f_j(x)` in coordinate `i`.
///
/// The outputs are differenced term by term before weighting, which keeps
/// the cancellation error to that of the entries that actually move.
pub fn central_diff(x: &[f64], i: usize, c: &[f64], f: &dyn Fn(&[f64]) -> Vec<f64>) -> f64 {
    let mut xp = x.to_vec();
    let mut xm = x.to_vec();
    xp[i] += FD_STEP;
    xm[i] -= FD_STEP;
    let (fp, fm) = (f(&xp), f(&xm));
    assert_eq!(fp.len(), c.len());
    fp.iter().zip(&fm).zip(c).map(|((a, b), w)| w * (a - b)).sum::<f64>() / (2.0 * FD_STEP)
}

/// Max relative error between `analytic` and finite differences over `coords`.
pub fn max_fd_error(
    x: &[f64],
    analytic: &[f64],
    coords: impl IntoIterator<Item = usize>,
    c: &[f64],
    f: &dyn Fn(&[f64]) -> Vec<f64>,
) -> f64 {
    coords
        .into_iter()
        .map(|i| rel_err(analytic[i], central_diff(x, i, c, f)))
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub name: &'static str,
    pub instances: usize,
    pub max_rel_err: f64,
    pub threshold: f64,
    /// Draws rejected because a unit sat within [`KINK_MARGIN`] of a kink.
    pub skipped: usize,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.threshold
    }
}

pub const INSTANCES: usize = 20;

fn split(v: &[f64], at: &[usize]) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    let mut start = 0;
    for &n in at {
        out.push(v[start..start + n].to_vec());
        start += n;
    }
    out
}

pub fn check_dt_1d() -> GradCheck {
    let mut worst = 0.0f64;
    for inst in 0..INSTANCES {
        let mut r = rng(100 + inst as u64);
        let n = 16;
        let x = uniform_vec(&mut r, n, -1.0, 1.0);
        let w = uniform_vec(&mut r, n, 0.0, 1.0);
        let c = uniform_vec(&mut r, n, -1.0, 1.0);
        let (_, tape) = dt_1d_taped(&x, &w).unwrap();
        let (dx, dw) = dt_1d_backward(&tape, &c).unwrap();
        let z = [x.clone(), w.clone()].concat();
        let analytic = [dx, dw].concat();
        let f = |z: &[f64]| dtstereo::dtfilter::dt_1d(&z[..n], &z[n..]).unwrap();
        worst = worst.max(max_fd_error(&z, &analytic, 0..2 * n, &c, &f));
    }
    GradCheck {
        name: "dt_1d",
        instances: INSTANCES,
        max_rel_err: worst,
        threshold: 1e-6,
        skipped: 0,
    }
}

pub fn check_dt_2d() -> GradCheck {
    let mut worst = 0.0f64;
    for inst in 0..INSTANCES {
        let mut r = rng(200 + inst as u64);
        let (w, h) = (5 + inst % 3, 4 + inst % 2);
        let n = w * h;
        let img = random_plane(&mut r, w, h, -1.0, 1.0);
        let maps = random_maps(&mut r, w, h);
        let c = uniform_vec(&mut r, n, -1.0, 1.0);
        let (_, tape) = dt_2d_taped(&img, &maps).unwrap();
        let (din, dh, dv) = dt_2d_backward(&tape, &Plane::new(w, h, c.clone()).unwrap()).unwrap();
        let z = [img.as_slice(), maps.hor().as_slice(), maps.vert().as_slice()].concat();
        let analytic = [din.as_slice(), dh.as_slice(), dv.as_slice()].concat();
        let f = |z: &[f64]| {
            let p = split(z, &[n, n, n]);
            let m = WeightMaps::new(Plane::new(w, h, p[1].clone()).unwrap(), Plane::new(w, h, p[2].clone()).unwrap())
                .unwrap();
            dtstereo::dtfilter::dt_2d(&Plane::new(w, h, p[0].clone()).unwrap(), &m)
                .unwrap()
                .into_vec()
        };
        worst = worst.max(max_fd_error(&z, &analytic, 0..3 * n, &c, &f));
    }
    GradCheck {
        name: "dt_2d",
        instances: INSTANCES,
        max_rel_err: worst,
        threshold: 1e-5,
        skipped: 0,
    }
}

pub fn check_filter_volume() -> GradCheck {
    let mut worst = 0.0f64;
    for inst in 0..INSTANCES {
        let mut r = rng(300 + inst as u64);
        let (w, h, l) = (5, 5, 3);
        let n = w * h;
        let vol = random_volume(&mut r, w, h, l);
        let maps = random_maps(&mut r, w, h);
        let c = uniform_vec(&mut r, n * l, -1.0, 1.0);
        let (_, tape) = filter_cost_volume_taped(&vol, &maps).unwrap();
        let seed = CostVolume::new(w, h, l, c.clone()).unwrap();
        let (dvol, dh, dv) = filter_volume_backward(&tape, &seed).unwrap();
        let z = [vol.as_slice(), maps.hor().as_slice(), maps.vert().as_slice()].concat();
        let analytic = [dvol.as_slice(), dh.as_slice(), dv.as_slice()].concat();
        let f = |z: &[f64]| {
            let p = split(z, &[n * l, n, n]);
            let m = WeightMaps::new(Plane::new(w, h, p[1].clone()).unwrap(), Plane::new(w, h, p[2].clone()).unwrap())
                .unwrap();
            let v = CostVolume::new(w, h, l, p[0].clone()).unwrap();
            dtstereo::dtfilter::filter_cost_volume(&v, &m).unwrap().as_slice().to_vec()
        };
        worst = worst.max(max_fd_error(&z, &analytic, 0..n * l + 2 * n, &c, &f));
    }
    GradCheck {
        name: "filter_volume",
        instances: INSTANCES,
        max_rel_err: worst,
        threshold: 1e-5,
        skipped: 0,
    }
}

pub fn check_energy_to_weights() -> GradCheck {
    let sigma = dtstereo::dtfilter::DEFAULT_SIGMA;
    let mut worst = 0.0f64;
    for inst in 0..INSTANCES {
        let mut r = rng(400 + inst as u64);
        let (w, h) = (7, 5);
        let n = w * h;
        // Keep clear of the clamp kink at e = 0 so central differences are valid.
        let mut draw = || {
            let v: f64 = r.random_range(0.002..1.0);
            if r.random_bool(0.2) {
                -v
            } else {
                v
            }
        };
        let eh: Vec<f64> = (0..n).map(|_| draw()).collect();
        let ev: Vec<f64> = (0..n).map(|_| draw()).collect();
        let c = uniform_vec(&mut r, 2 * n, -1.0, 1.0);
        let ph = Plane::new(w, h, eh.clone()).unwrap();
        let pv = Plane::new(w, h, ev.clone()).unwrap();
        let gh = energy_to_weights_backward(&ph, sigma, &Plane::new(w, h, c[..n].to_vec()).unwrap()).unwrap();
        let gv = energy_to_weights_backward(&pv, sigma, &Plane::new(w, h, c[n..].to_vec()).unwrap()).unwrap();
        let z = [eh, ev].concat();
        let analytic = [gh.as_slice(), gv.as_slice()].concat();
        let f = |z: &[f64]| {
            let m = energy_to_weights(
                &Plane::new(w, h, z[..n].to_vec()).unwrap(),
                &Plane::new(w, h, z[n..].to_vec()).unwrap(),
                sigma,
            )
            .unwrap();
            [m.hor().as_slice(), m.vert().as_slice()].concat()
        };
        worst = worst.max(max_fd_error(&z, &analytic, 0..2 * n, &c, &f));
    }
    GradCheck {
        name: "energy_to_weights",
        instances: INSTANCES,
        max_rel_err: worst,
        threshold: 1e-7,
        skipped: 0,
    }
}

pub fn check_upsample() -> GradCheck {
    let mut worst = 0.0f64;
    for inst in 0..INSTANCES {
        let mut r = rng(500 + inst as u64);
        let (sw, sh) = (2 + inst % 4, 2 + inst % 3);
        let (w, h) = (2 * sw + inst % 2, 2 * sh);
        let src = uniform_vec(&mut r, sw * sh, -1.0, 1.0);
        let c = uniform_vec(&mut r, w * h, -1.0, 1.0);
        let g = bilinear_upsample_backward(&Plane::new(w, h, c.clone()).unwrap(), sw, sh).unwrap();
        let f = |z: &[f64]| {
            bilinear_upsample(&Plane::new(sw, sh, z.to_vec()).unwrap(), w, h)
                .unwrap()
                .into_vec()
        };
        worst = worst.max(max_fd_error(&src, g.as_slice(), 0..sw * sh, &c, &f));
    }
    GradCheck {
        name: "bilinear_upsample",
        instances: INSTANCES,
        max_rel_err: worst,
        threshold: 1e-7,
        skipped: 0,
    }
}

pub const PREDICTOR_SAMPLED_WEIGHTS: usize = 150;

/// Coordinates checked on instance `inst`: everything on the first one; on
/// the rest every bias, the whole final layer and a random sample of the
/// remaining kernel weights.
fn predictor_coords(params: &PredictorParams<f64>, inst: usize, r: &mut impl Rng) -> Vec<usize> {
    let n = params.param_count();
    if inst == 0 {
        return (0..n).collect();
    }
    let tensors: Vec<usize> = params.tensors().map(|t| t.len()).collect();
    let last = tensors.len() - 2;
    let mut coords = Vec::new();
    let mut pool = Vec::new();
    let mut offset = 0;
    for (k, &len) in tensors.iter().enumerate() {
        let range = offset..offset + len;
        if k % 2 == 1 || k >= last {
            coords.extend(range);
        } else {
            pool.extend(range);
        }
        offset += len;
    }
    coords.extend((0..PREDICTOR_SAMPLED_WEIGHTS).map(|_| pool[r.random_range(0..pool.len())]));
    coords
}

pub fn check_predictor() -> GradCheck {
    let mut worst = 0.0f64;
    let mut skipped = 0;
    let mut seed = 600;
    for inst in 0..INSTANCES {
        let (w, h) = (8 + inst % 2, 8 + (inst / 2) % 2);
        let (mut r, img, params) = loop {
            seed += 1;
            let mut r = rng(seed);
            let img = random_image(&mut r, w, h, 3);
            let params = random_params(seed);
            if kink_margins(&img, &params).0 > KINK_MARGIN {
                break (r, img, params);
            }
            skipped += 1;
        };
        let c = uniform_vec(&mut r, 2 * w * h, -1.0, 1.0);
        let (_, _, tape) = predictor_forward(&img, &params).unwrap();
        let grads = predictor_backward(
            &tape,
            &Plane::new(w, h, c[..w * h].to_vec()).unwrap(),
            &Plane::new(w, h, c[w * h..].to_vec()).unwrap(),
        )
        .unwrap();
        let z = params.flatten();
        let analytic = grads.flatten();
        // Only the perturbed coordinate differs from `z`; patch just that one.
        let f = |zz: &[f64]| {
            let mut p = params.clone();
            if let Some(i) = zz.iter().zip(&z).position(|(a, b)| a != b) {
                p.set_flat(i, zz[i]);
            }
            let (eh, ev, _) = predictor_forward(&img, &p).unwrap();
            [eh.into_vec(), ev.into_vec()].concat()
        };
        worst = worst.max(max_fd_error(&z, &analytic, predictor_coords(&params, inst, &mut r), &c, &f));
    }
    GradCheck {
        name: "predictor params",
        instances: INSTANCES,
        max_rel_err: worst,
        threshold: 1e-4,
        skipped,
    }
}

pub fn check_softmax_loss() -> GradCheck {
    let mut worst = 0.0f64;
    for inst in 0..INSTANCES {
        let mut r = rng(700 + inst as u64);
        let (w, h, l) = (4, 3, 5);
        let vol = random_volume(&mut r, w, h, l);
        let mut gt = DisparityMap::from_values(
            w,
            h,
            (0..w * h).map(|_| r.random_range(0.0..(l - 1) as f32)).collect(),
        )
        .unwrap();
        gt.set_status(1, 1, dtstereo::imageio::PixelStatus::Invalid);
        let scale = [1.0, 4.0][inst % 2];
        let report = softmax_xent_loss(&vol, &gt, scale).unwrap();
        let f = |z: &[f64]| {
            let v = CostVolume::new(w, h, l, z.to_vec()).unwrap();
            vec![softmax_xent_loss(&v, &gt, scale).unwrap().loss]
        };
        worst = worst.max(max_fd_error(vol.as_slice(), report.grad.as_slice(), 0..w * h * l, &[1.0], &f));
    }
    GradCheck {
        name: "softmax loss",
        instances: INSTANCES,
        max_rel_err: worst,
        threshold: 1e-6,
        skipped: 0,
    }
}

/// A small training sample with a random pair and a random integer ground truth.
pub fn chain_sample(seed: u64, size: usize, d_max: usize) -> TrainSample<f64> {
    let mut r = rng(seed);
    let pair = StereoPair::new(random_image(&mut r, size, size, 3), random_image(&mut r, size, size, 3)).unwrap();
    let gt = DisparityMap::from_values(
        size,
        size,
        (0..size * size).map(|_| r.random_range(0..=d_max) as f32).collect(),
    )
    .unwrap();
    let cost = CostParams {
        d_max,
        ..CostParams::default()
    };
    TrainSample::new(pair, gt, &cost).unwrap()
}

pub const CHAIN_COORDS: usize = 160;

pub fn check_full_chain() -> GradCheck {
    let mut worst = 0.0f64;
    let mut cfg = PipelineConfig::default();
    cfg.cost.d_max = 4;
    let mut skipped = 0;
    let mut seed = 800;
    for inst in 0..INSTANCES {
        let (sample, params) = loop {
            seed += 1;
            let sample = chain_sample(seed, 12, 4);
            let mut params = random_params(seed);
            // Positive final bias keeps most energies on the differentiable side.
            for b in params.layers_mut().last_mut().unwrap().bias.iter_mut() {
                *b = 0.15;
            }
            let (relu, energy) = kink_margins(&sample.pair.left, &params);
            if relu > KINK_MARGIN && energy > KINK_MARGIN {
                break (sample, params);
            }
            skipped += 1;
        };
        let (_, grads) = loss_and_gradient(&sample, &params, &cfg).unwrap();
        let z = params.flatten();
        let analytic = grads.flatten();
        let f = |zz: &[f64]| {
            let mut p = params.clone();
            if let Some(i) = zz.iter().zip(&z).position(|(a, b)| a != b) {
                p.set_flat(i, zz[i]);
            }
            vec![sample_loss(&sample, &p, &cfg).unwrap()]
        };
        let mut r = rng(900 + inst as u64);
        let n = z.len();
        // Every parameter of the last layer plus a random sample of the rest.
        let last = params.layers().last().unwrap();
        let tail = last.weight.len() + last.bias.len();
        let mut coords: Vec<usize> = (n - tail..n).collect();
        coords.extend((0..CHAIN_COORDS).map(|_| r.random_range(0..n - tail)));
        worst = worst.max(max_fd_error(&z, &analytic, coords, &[1.0], &f));
    }
    GradCheck {
        name: "full chain",
        instances: INSTANCES,
        max_rel_err: worst,
        threshold: 1e-3,
        skipped,
    }
}

pub fn all_gradient_checks() -> Vec<GradCheck> {
    vec![
        check_dt_1d(),
        check_dt_2d(),
        check_filter_volume(),
        check_energy_to_weights(),
        check_upsample(),
        check_predictor(),
        check_softmax_loss(),
        check_full_chain(),
    ]
}

// ------------------------------------------------------- oracle agreement

#[derive(Debug, Clone)]
pub struct OracleCheck {
    pub name: &'static str,
    pub instances: usize,
    /// Largest deviation seen (count of differing entries for exact checks).
    pub max_err: f64,
    pub tolerance: f64,
}

impl OracleCheck {
    pub fn passed(&self) -> bool {
        self.max_err <= self.tolerance
    }
}

pub const ORACLE_INSTANCES: usize = 50;

fn small_dims(r: &mut impl Rng) -> (usize, usize) {
    (r.random_range(1..=16), r.random_range(1..=16))
}

pub fn oracle_census() -> OracleCheck {
    let mut differing = 0usize;
    for inst in 0..ORACLE_INSTANCES {
        let mut r = rng(1000 + inst as u64);
        let (w, h) = small_dims(&mut r);
        let n = [3, 5, 7][inst % 3];
        let gray = gray_of(&quantized_image(&mut r, w, h, 1, 4));
        let census = dtstereo::costvol::census_transform(&gray, n).unwrap();
        for y in 0..h {
            for x in 0..w {
                let d = census.descriptor(x, y);
                let expect = census_bits(&gray, x, y, n);
                differing += (0..expect.len()).filter(|&k| d.bit(k) != expect[k]).count();
            }
        }
    }
    OracleCheck {
        name: "census transform",
        instances: ORACLE_INSTANCES,
        max_err: differing as f64,
        tolerance: 0.0,
    }
}

pub fn oracle_cost_volume() -> OracleCheck {
    let mut worst = 0.0f64;
    for inst in 0..ORACLE_INSTANCES {
        let mut r = rng(2000 + inst as u64);
        let (w, h) = small_dims(&mut r);
        let ch = [1, 3][inst % 2];
        let left = quantized_image(&mut r, w, h, ch, 6);
        let right = quantized_image(&mut r, w, h, ch, 6);
        let p = CostParams {
            alpha: r.random_range(0.0..1.0),
            census_patch: [3, 5, 7][inst % 3],
            d_max: r.random_range(1..=8),
        };
        let pair = StereoPair::new(left.clone(), right.clone()).unwrap();
        let got = dtstereo::costvol::build_cost_volume(&pair, &p).unwrap();
        let want = brute_cost_volume(&left, &right, &p);
        for (a, b) in got.as_slice().iter().zip(want.as_slice()) {
            worst = worst.max((a - b).abs());
        }
    }
    OracleCheck {
        name: "cost volume",
        instances: ORACLE_INSTANCES,
        max_err: worst,
        tolerance: 1e-6,
    }
}

pub fn oracle_wta() -> OracleCheck {
    let mut differing = 0usize;
    for inst in 0..ORACLE_INSTANCES {
        let mut r = rng(3000 + inst as u64);
        let (w, h) = small_dims(&mut r);
        let labels = r.random_range(1..=9);
        // Coarse values so ties are common.
        let data = (0..w * h * labels).map(|_| r.random_range(0..5) as f64 / 4.0).collect();
        let vol = CostVolume::new(w, h, labels, data).unwrap();
        let got = dtstereo::matcher::wta(&vol);
        differing += got.values().iter().zip(brute_wta(&vol)).filter(|(a, b)| **a != *b).count();
        differing += w * h - got.valid_count();
    }
    OracleCheck {
        name: "WTA",
        instances: ORACLE_INSTANCES,
        max_err: differing as f64,
        tolerance: 0.0,
    }
}

pub fn oracle_dt_2d() -> OracleCheck {
    let mut worst = 0.0f64;
    for inst in 0..ORACLE_INSTANCES {
        let mut r = rng(4000 + inst as u64);
        let (w, h) = small_dims(&mut r);
        let img = random_plane(&mut r, w, h, -1.0, 1.0);
        let maps = random_maps(&mut r, w, h);
        let got = dtstereo::dtfilter::dt_2d(&img, &maps).unwrap();
        let want = brute_dt_2d(&img, &maps);
        for (a, b) in got.as_slice().iter().zip(want.as_slice()) {
            worst = worst.max((a - b).abs());
        }
    }
    OracleCheck {
        name: "dt_2d",
        instances: ORACLE_INSTANCES,
        max_err: worst,
        tolerance: 1e-6,
    }
}

pub fn all_oracle_checks() -> Vec<OracleCheck> {
    vec![oracle_census(), oracle_cost_volume(), oracle_wta(), oracle_dt_2d()]
}

// ------------------------------------------------------ DT limit behaviour

#[derive(Debug, Clone)]
pub struct DtLimits {
    pub instances: usize,
    /// max |out - in| with w == 0.
    pub identity_err: f64,
    /// max |out - in(0, 0)| with w == 1.
    pub constant_err: f64,
    /// Outputs outside [min, max] of the pass input, over every pass.
    pub bound_violations: usize,
}

pub const DT_LIMIT_INSTANCES: usize = 100;

fn outside(v: &[f64], lo: f64, hi: f64) -> usize {
    v.iter().filter(|&&x| x < lo || x > hi).count()
}

fn min_max(v: &[f64]) -> (f64, f64) {
    v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)))
}

pub fn dt_limits() -> DtLimits {
    use dtstereo::dtfilter::{dt_1d, dt_2d};
    let mut out = DtLimits {
        instances: DT_LIMIT_INSTANCES,
        identity_err: 0.0,
        constant_err: 0.0,
        bound_violations: 0,
    };
    for inst in 0..DT_LIMIT_INSTANCES {
        let mut r = rng(6000 + inst as u64);
        let (w, h) = small_dims(&mut r);
        let scale = 10f64.powi(r.random_range(-3..4));
        let img = random_plane(&mut r, w, h, -scale, scale);

        let zero = dt_2d(&img, &WeightMaps::uniform(w, h, 0.0).unwrap()).unwrap();
        for (a, b) in zero.as_slice().iter().zip(img.as_slice()) {
            out.identity_err = out.identity_err.max((a - b).abs());
        }
        let one = dt_2d(&img, &WeightMaps::uniform(w, h, 1.0).unwrap()).unwrap();
        let corner = img.get(0, 0);
        for a in one.as_slice() {
            out.constant_err = out.constant_err.max((a - corner).abs());
        }

        // Single pass: every 1-D recurrence stays inside its input range.
        let n = r.random_range(1..=32);
        let x = uniform_vec(&mut r, n, -scale, scale);
        let wv = uniform_vec(&mut r, n, 0.0, 1.0);
        let (lo, hi) = min_max(&x);
        out.bound_violations += outside(&dt_1d(&x, &wv).unwrap(), lo, hi);

        // Horizontal passes only, then all four.
        let maps = random_maps(&mut r, w, h);
        let (lo, hi) = min_max(img.as_slice());
        let hor_only = WeightMaps::new(maps.hor().clone(), Plane::zeros(w, h)).unwrap();
        out.bound_violations += outside(dt_2d(&img, &hor_only).unwrap().as_slice(), lo, hi);
        out.bound_violations += outside(dt_2d(&img, &maps).unwrap().as_slice(), lo, hi);
    }
    out
}
