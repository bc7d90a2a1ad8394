//! Disparity selection, the training loss, the left-right consistency check,
//! and the composed matching pipeline.

use std::time::{Duration, Instant};

use crate::costvol::{build_cost_volume, build_cost_volume_right, CostParams, CostVolume};
use crate::dtfilter::{energy_to_weights, filter_cost_volume, DtParams, WeightMaps};
use crate::error::{ensure, Result};
use crate::imageio::{DisparityMap, Image, PixelStatus, StereoPair};
use crate::predictor::{predictor_forward, PredictorParams};
use crate::scalar::Real;

pub const DEFAULT_LR_TOLERANCE: f64 = 1.0;

/// Multiplier applied to the negated costs before the softmax.
///
/// Costs live in `[0, 1]`, so unscaled logits differ by at most one and the
/// softmax can never become confident; the scale restores the dynamic range
/// of an un-normalised census term (hamming distance over a 7x7 patch).
pub const DEFAULT_LOGIT_SCALE: f64 = 48.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PipelineConfig {
    pub cost: CostParams,
    pub dt: DtParams,
    pub enable_lr_check: bool,
    pub enable_aggregation: bool,
    /// Largest disparity difference (pixels) still counted as consistent.
    pub lr_tolerance: f64,
    pub logit_scale: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            cost: CostParams::default(),
            dt: DtParams::default(),
            enable_lr_check: true,
            enable_aggregation: true,
            lr_tolerance: DEFAULT_LR_TOLERANCE,
            logit_scale: DEFAULT_LOGIT_SCALE,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.cost.validate()?;
        self.dt.validate()?;
        ensure!(self.lr_tolerance >= 0.0, "negative left-right tolerance");
        ensure!(self.logit_scale > 0.0, "logit scale must be positive");
        Ok(())
    }
}

/// Winner-takes-all: per-pixel argmin over `d`, ties to the smallest `d`.
pub fn wta<T: Real>(vol: &CostVolume<T>) -> DisparityMap {
    let (w, h) = (vol.width(), vol.height());
    let mut values = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let costs = vol.costs(x, y);
            let mut best = 0;
            for d in 1..costs.len() {
                if costs[d] < costs[best] {
                    best = d;
                }
            }
            values.push(best as f32);
        }
    }
    DisparityMap::from_values(w, h, values).expect("labels are finite and non-negative")
}

/// Ground-truth label of a pixel, if it is valid and inside `[0, d_max]`.
pub fn gt_label(gt: &DisparityMap, x: usize, y: usize, d_max: usize) -> Option<usize> {
    if !gt.is_valid(x, y) {
        return None;
    }
    let label = gt.get(x, y).round();
    (label >= 0.0 && label <= d_max as f32).then_some(label as usize)
}

#[derive(Clone, Debug)]
pub struct LossReport<T> {
    /// Mean cross-entropy over valid pixels.
    pub loss: T,
    pub valid_count: usize,
    /// Gradient of `loss` w.r.t. each cost entry; zero at invalid pixels.
    pub grad: CostVolume<T>,
}

/// Softmax cross-entropy against one-hot ground truth.
///
/// Per valid pixel, `p = softmax(-scale * cost)` and the loss is
/// `-ln p[gt]`, averaged over valid pixels. Ground truth is rounded to the
/// nearest label; pixels rounding outside `[0, d_max]` are ignored.
pub fn softmax_xent_loss<T: Real>(vol: &CostVolume<T>, gt: &DisparityMap, logit_scale: f64) -> Result<LossReport<T>> {
    ensure!(
        gt.width() == vol.width() && gt.height() == vol.height(),
        "ground truth is {}x{}, volume is {}x{}",
        gt.width(),
        gt.height(),
        vol.width(),
        vol.height()
    );
    let (w, h, labels) = (vol.width(), vol.height(), vol.labels());
    let targets: Vec<Option<usize>> = (0..h)
        .flat_map(|y| (0..w).map(move |x| (x, y)))
        .map(|(x, y)| gt_label(gt, x, y, vol.d_max()))
        .collect();
    let valid = targets.iter().filter(|t| t.is_some()).count();
    ensure!(valid > 0, "ground truth has no valid pixel inside [0, d_max]");

    let scale = T::lit(logit_scale);
    let inv_n = T::lit(1.0 / valid as f64);
    let mut grad = CostVolume::zeros(w, h, labels);
    let mut total = T::zero();
    let mut probs = vec![T::zero(); labels];
    for (i, target) in targets.iter().enumerate() {
        let Some(t) = *target else { continue };
        let costs = &vol.as_slice()[i * labels..(i + 1) * labels];
        let max_logit = costs
            .iter()
            .map(|&c| -scale * c)
            .fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for (p, &c) in probs.iter_mut().zip(costs) {
            *p = (-scale * c - max_logit).exp();
            z += *p;
        }
        total += z.ln() + max_logit + scale * costs[t];
        let g = &mut grad.as_mut_slice()[i * labels..(i + 1) * labels];
        for d in 0..labels {
            let p = probs[d] / z;
            let one_hot = if d == t { T::one() } else { T::zero() };
            g[d] = scale * (one_hot - p) * inv_n;
        }
    }
    Ok(LossReport {
        loss: total * inv_n,
        valid_count: valid,
        grad,
    })
}

/// Softmax probabilities of one pixel (same convention as the loss).
pub fn label_probabilities<T: Real>(costs: &[T], logit_scale: f64) -> Vec<T> {
    let scale = T::lit(logit_scale);
    let m = costs.iter().map(|&c| -scale * c).fold(T::neg_infinity(), T::max);
    let e: Vec<T> = costs.iter().map(|&c| (-scale * c - m).exp()).collect();
    let z: T = e.iter().copied().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Cross-checks a left-referenced disparity map against a right-referenced one.
///
/// A left pixel with disparity `d` is consistent when the right map at
/// `x - d` agrees within `tol`. Otherwise it is a mismatch if some other
/// disparity `d'` would be consistent, and occluded if none is.
pub fn lr_check(left: &DisparityMap, right: &DisparityMap, tol: f64) -> Result<DisparityMap> {
    ensure!(left.same_shape(right), "left and right disparity maps differ in size");
    ensure!(tol >= 0.0, "negative tolerance");
    let (w, h) = (left.width(), left.height());
    let max_right = right.values().iter().fold(0.0f32, |a, &b| a.max(b)) as f64;
    let scan_limit = (max_right + tol).ceil() as usize;
    let agrees = |x: usize, y: usize, d: f64| -> bool {
        let xr = x as f64 - d.round();
        xr >= 0.0
            && right.is_valid(xr as usize, y)
            && (d - right.get(xr as usize, y) as f64).abs() <= tol
    };
    let mut out = left.clone();
    for y in 0..h {
        for x in 0..w {
            if !left.is_valid(x, y) {
                continue;
            }
            if agrees(x, y, left.get(x, y) as f64) {
                continue;
            }
            let other = (0..=scan_limit.min(x)).any(|dp| agrees(x, y, dp as f64));
            let status = if other {
                PixelStatus::Mismatch
            } else {
                PixelStatus::Occluded
            };
            out.set_status(x, y, status);
        }
    }
    Ok(out)
}

const DIRECTIONS: [(isize, isize); 8] = [
    (-1, 0),
    (1, 0),
    (0, -1),
    (0, 1),
    (-1, -1),
    (1, -1),
    (-1, 1),
    (1, 1),
];

/// Fills every non-valid pixel from valid ones.
///
/// Occluded pixels take the nearest valid value to their left (to their right
/// if the row has none on the left). Mismatched and invalid pixels take the
/// median of the nearest valid values along eight directions. Valid pixels
/// are never changed.
pub fn fill_invalid(disp: &DisparityMap) -> Result<DisparityMap> {
    ensure!(
        disp.valid_count() > 0,
        "no consistent pixel to interpolate from"
    );
    let (w, h) = (disp.width() as isize, disp.height() as isize);
    let walk = |x: isize, y: isize, (dx, dy): (isize, isize)| -> Option<f32> {
        let (mut cx, mut cy) = (x + dx, y + dy);
        while cx >= 0 && cy >= 0 && cx < w && cy < h {
            if disp.is_valid(cx as usize, cy as usize) {
                return Some(disp.get(cx as usize, cy as usize));
            }
            cx += dx;
            cy += dy;
        }
        None
    };
    let along_row = |x: isize, y: isize| walk(x, y, (-1, 0)).or_else(|| walk(x, y, (1, 0)));
    let nearest_anywhere = |x: isize, y: isize| -> f32 {
        let mut best: Option<(isize, f32)> = None;
        for cy in 0..h {
            for cx in 0..w {
                if disp.is_valid(cx as usize, cy as usize) {
                    let dist = (cx - x).abs() + (cy - y).abs();
                    if best.is_none_or(|(bd, _)| dist < bd) {
                        best = Some((dist, disp.get(cx as usize, cy as usize)));
                    }
                }
            }
        }
        best.expect("at least one valid pixel").1
    };

    let mut out = disp.clone();
    for y in 0..h {
        for x in 0..w {
            let value = match disp.status(x as usize, y as usize) {
                PixelStatus::Valid => continue,
                PixelStatus::Occluded => along_row(x, y),
                PixelStatus::Mismatch | PixelStatus::Invalid => {
                    let mut found: Vec<f32> =
                        DIRECTIONS.iter().filter_map(|&d| walk(x, y, d)).collect();
                    if found.is_empty() {
                        along_row(x, y)
                    } else {
                        found.sort_by(f32::total_cmp);
                        Some(found[(found.len() - 1) / 2])
                    }
                }
            };
            let value = value.unwrap_or_else(|| nearest_anywhere(x, y));
            out.set(x as usize, y as usize, value);
        }
    }
    Ok(out)
}

/// Pipeline stages, in the order they run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stage {
    DataTerm,
    Predictor,
    DomainTransform,
    Wta,
    LeftRightCheck,
}

impl Stage {
    pub const ALL: [Stage; 5] = [
        Stage::DataTerm,
        Stage::Predictor,
        Stage::DomainTransform,
        Stage::Wta,
        Stage::LeftRightCheck,
    ];
}

/// Predicted weight maps for one view.
pub fn predict_weights<T: Real>(img: &Image<T>, params: &PredictorParams<T>, sigma: f64) -> Result<WeightMaps<T>> {
    let (e_hor, e_vert, _) = predictor_forward(&img.to_rgb(), params)?;
    energy_to_weights(&e_hor, &e_vert, sigma)
}

fn timed<R>(stage: Stage, sink: &mut impl FnMut(Stage, Duration), f: impl FnOnce() -> R) -> R {
    let start = Instant::now();
    let r = f();
    sink(stage, start.elapsed());
    r
}

/// Full matcher: cost volume, predicted weights, aggregation, WTA, and
/// (optionally) the left-right check with occlusion filling. If no pixel
/// survives the check, the left WTA map is returned as is.
pub fn match_stereo<T: Real>(pair: &StereoPair<T>, params: &PredictorParams<T>, cfg: &PipelineConfig) -> Result<DisparityMap> {
    match_stereo_profiled(pair, params, cfg, &mut |_, _| {})
}

/// [`match_stereo`] reporting the wall-clock time of every stage invocation.
pub fn match_stereo_profiled<T: Real>(
    pair: &StereoPair<T>,
    params: &PredictorParams<T>,
    cfg: &PipelineConfig,
    sink: &mut impl FnMut(Stage, Duration),
) -> Result<DisparityMap> {
    cfg.validate()?;
    let mut volumes = vec![timed(Stage::DataTerm, sink, || build_cost_volume(pair, &cfg.cost))?];
    if cfg.enable_lr_check {
        volumes.push(timed(Stage::DataTerm, sink, || {
            build_cost_volume_right(pair, &cfg.cost)
        })?);
    }

    if cfg.enable_aggregation {
        // One predictor invocation covers both views.
        let maps = timed(Stage::Predictor, sink, || -> Result<Vec<WeightMaps<T>>> {
            let mut maps = vec![predict_weights(&pair.left, params, cfg.dt.sigma)?];
            if cfg.enable_lr_check {
                maps.push(predict_weights(&pair.right, params, cfg.dt.sigma)?);
            }
            Ok(maps)
        })?;
        for (vol, m) in volumes.iter_mut().zip(&maps) {
            *vol = timed(Stage::DomainTransform, sink, || filter_cost_volume(vol, m))?;
        }
    }

    let mut maps: Vec<DisparityMap> = volumes
        .iter()
        .map(|v| timed(Stage::Wta, sink, || wta(v)))
        .collect();
    if !cfg.enable_lr_check {
        return Ok(maps.swap_remove(0));
    }
    timed(Stage::LeftRightCheck, sink, || {
        let checked = lr_check(&maps[0], &maps[1], cfg.lr_tolerance)?;
        if checked.valid_count() == 0 {
            // Nothing to interpolate from: keep the unchecked left map.
            return Ok(maps.swap_remove(0));
        }
        fill_invalid(&checked)
    })
}
