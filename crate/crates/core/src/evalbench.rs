//! Bad-pixel evaluation and per-stage timing.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use crate::error::{ensure, Result};
use crate::imageio::{DisparityMap, StereoPair};
use crate::matcher::{match_stereo_profiled, PipelineConfig, Stage};
use crate::predictor::PredictorParams;
use crate::scalar::Real;

/// A pixel is bad when its error exceeds this many pixels...
pub const BAD_PIXEL_ABS: f64 = 3.0;
/// ...and this fraction of the true disparity.
pub const BAD_PIXEL_REL: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalReport {
    pub bad_pixel_rate: f64,
    pub mean_abs_error: f64,
    pub bad_count: usize,
    pub valid_count: usize,
}

/// Fraction of valid ground-truth pixels whose error is both above
/// [`BAD_PIXEL_ABS`] and above [`BAD_PIXEL_REL`] of the true value.
pub fn bad_pixel_rate(pred: &DisparityMap, gt: &DisparityMap) -> Result<EvalReport> {
    ensure!(pred.same_shape(gt), "prediction and ground truth differ in size");
    let mut bad = 0usize;
    let mut valid = 0usize;
    let mut abs_sum = 0.0f64;
    for (i, (&g, &s)) in gt.values().iter().zip(gt.statuses()).enumerate() {
        if s != crate::imageio::PixelStatus::Valid {
            continue;
        }
        let err = (pred.values()[i] as f64 - g as f64).abs();
        valid += 1;
        abs_sum += err;
        if err > BAD_PIXEL_ABS && err > BAD_PIXEL_REL * g as f64 {
            bad += 1;
        }
    }
    ensure!(valid > 0, "ground truth has no valid pixel");
    Ok(EvalReport {
        bad_pixel_rate: bad as f64 / valid as f64,
        mean_abs_error: abs_sum / valid as f64,
        bad_count: bad,
        valid_count: valid,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageTiming {
    pub name: &'static str,
    pub calls: usize,
    pub millis: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TimingReport {
    /// Data term, CNN, domain transform, WTA, left-right check, total.
    pub rows: Vec<StageTiming>,
    pub repeats: usize,
    pub threads: usize,
}

pub const STAGE_ROWS: [&str; 6] = [
    "data term",
    "CNN",
    "domain transform",
    "WTA",
    "left-right check",
    "total",
];

fn row_index(stage: Stage) -> usize {
    match stage {
        Stage::DataTerm => 0,
        Stage::Predictor => 1,
        Stage::DomainTransform => 2,
        Stage::Wta => 3,
        Stage::LeftRightCheck => 4,
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

impl TimingReport {
    pub fn row(&self, name: &str) -> Option<&StageTiming> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<18} | {:>10} | {:>14}", "stage", "# of calls", "runtime, msec");
        let _ = writeln!(s, "{}", "-".repeat(48));
        for r in &self.rows {
            let calls = if r.name == "total" {
                String::new()
            } else {
                r.calls.to_string()
            };
            let _ = writeln!(s, "{:<18} | {:>10} | {:>14.3}", r.name, calls, r.millis);
        }
        let _ = writeln!(s, "(median of {} runs, {} thread(s))", self.repeats, self.threads);
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("stage,calls,millis\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{}", r.name, r.calls, r.millis);
        }
        s
    }
}

/// Times the matcher stage by stage: one warm-up run, then the median over
/// `repeats` runs. Runs on the current rayon pool; its size is recorded.
pub fn benchmark<T: Real>(
    pair: &StereoPair<T>,
    params: &PredictorParams<T>,
    cfg: &PipelineConfig,
    repeats: usize,
) -> Result<TimingReport> {
    ensure!(repeats >= 1, "need at least one timed repeat");
    match_stereo_profiled(pair, params, cfg, &mut |_, _| {})?;

    let mut per_run: Vec<[f64; 6]> = Vec::with_capacity(repeats);
    let mut calls = [0usize; 6];
    for _ in 0..repeats {
        let mut ms = [0.0f64; 6];
        let mut run_calls = [0usize; 6];
        let start = Instant::now();
        match_stereo_profiled(pair, params, cfg, &mut |stage: Stage, d: Duration| {
            let i = row_index(stage);
            ms[i] += d.as_secs_f64() * 1e3;
            run_calls[i] += 1;
        })?;
        ms[5] = start.elapsed().as_secs_f64() * 1e3;
        per_run.push(ms);
        calls = run_calls;
    }
    let rows = STAGE_ROWS
        .iter()
        .enumerate()
        .map(|(i, &name)| {
            let mut samples: Vec<f64> = per_run.iter().map(|r| r[i]).collect();
            StageTiming {
                name,
                calls: if i == 5 { 1 } else { calls[i] },
                millis: median(&mut samples),
            }
        })
        .collect();
    Ok(TimingReport {
        rows,
        repeats,
        threads: rayon::current_num_threads(),
    })
}
