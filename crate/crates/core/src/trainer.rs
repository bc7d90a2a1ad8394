//! End-to-end training of the weight predictor.
//!
//! The loss is computed on the left view: raw cost volume -> predicted
//! weights -> domain-transform aggregation -> softmax cross-entropy. The
//! gradient flows back through the filter, the exponential weight mapping,
//! the upsampling and the convolutions. The cost volume itself has no
//! trainable parameters, so it is built once per training pair.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::costvol::{build_cost_volume, CostParams, CostVolume};
use crate::dtfilter::{energy_to_weights, filter_cost_volume_taped};
use crate::dtgrad::{energy_to_weights_backward, filter_volume_backward};
use crate::error::{ensure, Error, Result};
use crate::imageio::{load_disparity_kitti, DisparityMap, StereoPair};
use crate::matcher::{softmax_xent_loss, wta, PipelineConfig};
use crate::predictor::{init_params, predictor_backward, predictor_forward, PredictorParams};
use crate::scalar::Real;

pub const DEFAULT_LEARNING_RATE: f64 = 2.5e-5;

/// ADAM optimiser state for one parameter set.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Real> AdamState<T> {
    /// Zero moments shaped like `params`, with the usual defaults
    /// (`beta1 = 0.9`, `beta2 = 0.999`, `epsilon = 1e-8`).
    pub fn new(params: &PredictorParams<T>, lr: f64) -> Self {
        let zeros: Vec<Vec<T>> = params.tensors().map(|t| vec![T::zero(); t.len()]).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Vec<T>] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Vec<T>] {
        &self.second
    }
}

/// One bias-corrected ADAM update.
pub fn adam_step<T: Real>(
    params: &mut PredictorParams<T>,
    grads: &PredictorParams<T>,
    state: &mut AdamState<T>,
) -> Result<()> {
    ensure!(params.same_shape(grads), "gradient shapes do not match parameters");
    ensure!(
        state.first.len() == params.tensors().count()
            && state
                .first
                .iter()
                .zip(params.tensors())
                .all(|(m, p)| m.len() == p.len()),
        "optimiser state does not match parameters"
    );
    ensure!(state.lr > 0.0, "learning rate must be positive");
    state.step += 1;
    let t = state.step as i32;
    let b1 = T::lit(state.beta1);
    let b2 = T::lit(state.beta2);
    let c1 = T::lit(1.0 - state.beta1.powi(t));
    let c2 = T::lit(1.0 - state.beta2.powi(t));
    let lr = T::lit(state.lr);
    let eps = T::lit(state.epsilon);
    let one = T::one();
    for (((p, g), m), v) in params
        .tensors_mut()
        .zip(grads.tensors())
        .zip(&mut state.first)
        .zip(&mut state.second)
    {
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (one - b1) * g[i];
            v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// A training pair with ground truth and its precomputed raw cost volume.
#[derive(Clone, Debug)]
pub struct TrainSample<T> {
    pub pair: StereoPair<T>,
    pub gt: DisparityMap,
    pub cost: CostVolume<T>,
}

impl<T: Real> TrainSample<T> {
    pub fn new(pair: StereoPair<T>, gt: DisparityMap, cost: &CostParams) -> Result<Self> {
        ensure!(
            gt.width() == pair.width() && gt.height() == pair.height(),
            "ground truth size differs from the images"
        );
        ensure!(gt.valid_count() > 0, "ground truth has no valid pixel");
        let cost = build_cost_volume(&pair, cost)?;
        let pair = StereoPair {
            left: pair.left.to_rgb(),
            ..pair
        };
        Ok(Self { pair, gt, cost })
    }

    pub fn cast<U: Real>(&self) -> TrainSample<U> {
        TrainSample {
            pair: self.pair.cast(),
            gt: self.gt.clone(),
            cost: self.cost.cast(),
        }
    }
}

/// Forward pass of the differentiable path, returning the aggregated volume.
pub fn aggregate<T: Real>(sample: &TrainSample<T>, params: &PredictorParams<T>, cfg: &PipelineConfig) -> Result<CostVolume<T>> {
    let (e_hor, e_vert, _) = predictor_forward(&sample.pair.left, params)?;
    let maps = energy_to_weights(&e_hor, &e_vert, cfg.dt.sigma)?;
    crate::dtfilter::filter_cost_volume(&sample.cost, &maps)
}

/// Training loss of one sample under `params`.
pub fn sample_loss<T: Real>(sample: &TrainSample<T>, params: &PredictorParams<T>, cfg: &PipelineConfig) -> Result<T> {
    let filtered = aggregate(sample, params, cfg)?;
    Ok(softmax_xent_loss(&filtered, &sample.gt, cfg.logit_scale)?.loss)
}

/// Loss and its exact gradient w.r.t. every predictor parameter.
pub fn loss_and_gradient<T: Real>(
    sample: &TrainSample<T>,
    params: &PredictorParams<T>,
    cfg: &PipelineConfig,
) -> Result<(T, PredictorParams<T>)> {
    let (e_hor, e_vert, ptape) = predictor_forward(&sample.pair.left, params)?;
    let maps = energy_to_weights(&e_hor, &e_vert, cfg.dt.sigma)?;
    let (filtered, dtape) = filter_cost_volume_taped(&sample.cost, &maps)?;
    let report = softmax_xent_loss(&filtered, &sample.gt, cfg.logit_scale)?;
    let (_, dw_hor, dw_vert) = filter_volume_backward(&dtape, &report.grad)?;
    let de_hor = energy_to_weights_backward(&e_hor, cfg.dt.sigma, &dw_hor)?;
    let de_vert = energy_to_weights_backward(&e_vert, cfg.dt.sigma, &dw_vert)?;
    let grads = predictor_backward(&ptape, &de_hor, &de_vert)?;
    Ok((report.loss, grads))
}

/// Forward, backward and one ADAM update. Returns the loss before the update.
pub fn train_step<T: Real>(
    sample: &TrainSample<T>,
    params: &mut PredictorParams<T>,
    state: &mut AdamState<T>,
    cfg: &PipelineConfig,
) -> Result<T> {
    let (loss, grads) = loss_and_gradient(sample, params, cfg)?;
    adam_step(params, &grads, state)?;
    Ok(loss)
}

/// Training pairs on disk: `left/NNN.png`, `right/NNN.png`, `disp/NNN.png`.
#[derive(Clone, Debug)]
pub struct Dataset<T> {
    pub samples: Vec<TrainSample<T>>,
}

impl<T: Real> Dataset<T> {
    pub fn new(samples: Vec<TrainSample<T>>) -> Self {
        Self { samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// First `n_train` samples for training, the rest held out.
    pub fn split(mut self, n_train: usize) -> Result<(Dataset<T>, Dataset<T>)> {
        ensure!(
            n_train <= self.samples.len(),
            "cannot take {n_train} training pairs from {}",
            self.samples.len()
        );
        let held = self.samples.split_off(n_train);
        Ok((self, Dataset::new(held)))
    }
}

/// Stems of the pairs present in a dataset directory, sorted.
pub fn dataset_stems(dir: impl AsRef<Path>) -> Result<Vec<String>> {
    let dir = dir.as_ref();
    let mut stems = Vec::new();
    for entry in fs::read_dir(dir.join("left"))? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "png") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                stems.push(stem.to_owned());
            }
        }
    }
    stems.sort();
    Ok(stems)
}

pub fn load_dataset(dir: impl AsRef<Path>, cost: &CostParams) -> Result<Dataset<f32>> {
    let dir = dir.as_ref();
    let mut samples = Vec::new();
    for stem in dataset_stems(dir)? {
        let file = format!("{stem}.png");
        let pair = StereoPair::<f32>::load(dir.join("left").join(&file), dir.join("right").join(&file))?;
        let gt = load_disparity_kitti(dir.join("disp").join(&file))?;
        samples.push(TrainSample::new(pair, gt, cost)?);
    }
    Ok(Dataset::new(samples))
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub iterations: usize,
    pub lr: f64,
    pub seed: u64,
    pub pipeline: PipelineConfig,
    /// Write a checkpoint every this many steps (and at the end).
    pub checkpoint_every: Option<usize>,
    pub checkpoint_path: Option<PathBuf>,
    /// Loss curve CSV (`step,loss`).
    pub loss_curve_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 1000,
            lr: DEFAULT_LEARNING_RATE,
            seed: 0,
            pipeline: PipelineConfig::default(),
            checkpoint_every: None,
            checkpoint_path: None,
            loss_curve_path: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub params: PredictorParams<T>,
    /// Loss of step `i + 1` (measured before that step's update).
    pub losses: Vec<T>,
}

/// Trains a freshly initialised predictor (seeded by `cfg.seed`).
pub fn train<T: Real>(dataset: &Dataset<T>, cfg: &TrainConfig) -> Result<TrainOutcome<T>> {
    train_from(dataset, init_params(cfg.seed), cfg)
}

/// Trains starting from `params`. Pairs are visited in a seeded shuffled
/// order, reshuffled every epoch.
pub fn train_from<T: Real>(
    dataset: &Dataset<T>,
    mut params: PredictorParams<T>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    ensure!(!dataset.is_empty(), "training set is empty");
    ensure!(cfg.iterations >= 1, "need at least one iteration");
    ensure!(cfg.lr > 0.0, "learning rate must be positive");
    cfg.pipeline.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = AdamState::new(&params, cfg.lr);
    let mut order: Vec<usize> = Vec::new();
    let mut losses = Vec::with_capacity(cfg.iterations);
    let mut curve = match &cfg.loss_curve_path {
        Some(p) => {
            let mut f = BufWriter::new(File::create(p)?);
            writeln!(f, "step,loss")?;
            Some(f)
        }
        None => None,
    };
    for step in 1..=cfg.iterations {
        if order.is_empty() {
            order = (0..dataset.len()).collect();
            order.shuffle(&mut rng);
            order.reverse();
        }
        let idx = order.pop().expect("refilled above");
        let loss = train_step(&dataset.samples[idx], &mut params, &mut state, &cfg.pipeline)?;
        if !loss.is_finite() || !params.is_finite() {
            return Err(Error::Contract(format!("training diverged at step {step}")));
        }
        losses.push(loss);
        if let Some(f) = curve.as_mut() {
            writeln!(f, "{step},{}", loss.to_f64_lossy())?;
        }
        if let (Some(every), Some(path)) = (cfg.checkpoint_every, &cfg.checkpoint_path) {
            if every > 0 && step % every == 0 {
                params.save_checkpoint(path)?;
            }
        }
    }
    if let Some(mut f) = curve {
        f.flush()?;
    }
    if let Some(path) = &cfg.checkpoint_path {
        params.save_checkpoint(path)?;
    }
    Ok(TrainOutcome { params, losses })
}

/// Mean training loss over a dataset.
pub fn mean_loss<T: Real>(dataset: &Dataset<T>, params: &PredictorParams<T>, cfg: &PipelineConfig) -> Result<f64> {
    ensure!(!dataset.is_empty(), "dataset is empty");
    let mut total = 0.0;
    for s in &dataset.samples {
        total += sample_loss(s, params, cfg)?.to_f64_lossy();
    }
    Ok(total / dataset.len() as f64)
}

/// Left-view WTA disparity of the aggregated training volume.
pub fn predict_disparity<T: Real>(sample: &TrainSample<T>, params: &PredictorParams<T>, cfg: &PipelineConfig) -> Result<DisparityMap> {
    Ok(wta(&aggregate(sample, params, cfg)?))
}
