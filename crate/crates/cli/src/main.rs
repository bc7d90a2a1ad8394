use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use dtstereo::evalbench::{bad_pixel_rate, benchmark};
use dtstereo::imageio::{load_disparity_kitti, save_disparity, save_image, StereoPair};
use dtstereo::matcher::{match_stereo, predict_weights, PipelineConfig};
use dtstereo::predictor::{init_params, PredictorParams};
use dtstereo::synth::{generate, write_dataset, SynthKind};
use dtstereo::trainer::{load_dataset, train, TrainConfig, DEFAULT_LEARNING_RATE};
use dtstereo::{costvol, dtfilter};

#[derive(Parser, Debug)]
#[command(name = "dtstereo", version, about = "Stereo matching with learned domain-transform aggregation")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug)]
struct MatchOpts {
    /// Maximum disparity searched.
    #[arg(long, default_value_t = costvol::DEFAULT_DMAX)]
    dmax: usize,
    /// Colour/census blend of the data term.
    #[arg(long, default_value_t = costvol::DEFAULT_ALPHA)]
    alpha: f64,
    /// Energy-to-weight slope of the domain transform.
    #[arg(long, default_value_t = dtfilter::DEFAULT_SIGMA)]
    sigma: f64,
}

impl MatchOpts {
    fn pipeline(&self) -> PipelineConfig {
        let mut cfg = PipelineConfig::default();
        cfg.cost.d_max = self.dmax;
        cfg.cost.alpha = self.alpha;
        cfg.dt.sigma = self.sigma;
        cfg
    }
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Kind {
    Rds,
    Planes,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Compute a left-view disparity map.
    Match {
        #[arg(long)]
        left: PathBuf,
        #[arg(long)]
        right: PathBuf,
        /// Output disparity PNG (KITTI encoding).
        #[arg(long)]
        out: PathBuf,
        /// Predictor checkpoint; a freshly initialised one if absent.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[command(flatten)]
        opts: MatchOpts,
        #[arg(long)]
        no_aggregation: bool,
        #[arg(long)]
        no_lr_check: bool,
    },
    /// Train the weight predictor on a `left/ right/ disp/` dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint written at the end (and every `--checkpoint-every` steps).
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        iters: usize,
        #[arg(long, default_value_t = DEFAULT_LEARNING_RATE)]
        lr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = costvol::DEFAULT_DMAX)]
        dmax: usize,
        #[arg(long)]
        checkpoint_every: Option<usize>,
        /// Loss curve CSV; defaults to `<out>.loss.csv`.
        #[arg(long)]
        loss_csv: Option<PathBuf>,
    },
    /// Bad-pixel rate of a predicted disparity PNG against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
    },
    /// Per-stage timing of the matcher.
    Bench {
        #[arg(long)]
        left: PathBuf,
        #[arg(long)]
        right: PathBuf,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[command(flatten)]
        opts: MatchOpts,
        /// Also write the table as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Write the predicted horizontal and vertical weight maps as images.
    VizWeights {
        #[arg(long)]
        left: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Outputs go to `<prefix>w_hor.png` and `<prefix>w_vert.png`.
        #[arg(long)]
        out_prefix: String,
        #[arg(long, default_value_t = dtfilter::DEFAULT_SIGMA)]
        sigma: f64,
    },
    /// Generate synthetic pairs with dense ground truth.
    MakeSynth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        kind: Kind,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, default_value_t = 96)]
        width: usize,
        #[arg(long, default_value_t = 64)]
        height: usize,
        #[arg(long, default_value_t = 16)]
        dmax: usize,
    },
}

fn load_params(ckpt: Option<&Path>) -> Result<PredictorParams<f32>> {
    match ckpt {
        Some(p) => PredictorParams::load_checkpoint(p).with_context(|| format!("loading {}", p.display())),
        None => Ok(init_params(0)),
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!("--threads must be at least 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    match cli.command {
        Command::Match {
            left,
            right,
            out,
            ckpt,
            opts,
            no_aggregation,
            no_lr_check,
        } => {
            let pair = StereoPair::<f32>::load(&left, &right)?;
            let params = load_params(ckpt.as_deref())?;
            let mut cfg = opts.pipeline();
            cfg.enable_aggregation = !no_aggregation;
            cfg.enable_lr_check = !no_lr_check;
            let disp = match_stereo(&pair, &params, &cfg)?;
            save_disparity(&disp, &out)?;
        }
        Command::Train {
            data,
            out,
            iters,
            lr,
            seed,
            dmax,
            checkpoint_every,
            loss_csv,
        } => {
            let mut cfg = TrainConfig {
                iterations: iters,
                lr,
                seed,
                checkpoint_every,
                loss_curve_path: Some(loss_csv.unwrap_or_else(|| with_suffix(&out, ".loss.csv"))),
                checkpoint_path: Some(out),
                ..TrainConfig::default()
            };
            cfg.pipeline.cost.d_max = dmax;
            let dataset = load_dataset(&data, &cfg.pipeline.cost)?;
            let outcome = train(&dataset, &cfg)?;
            let first = outcome.losses.first().copied().unwrap_or(0.0);
            let last = outcome.losses.last().copied().unwrap_or(0.0);
            println!("trained {iters} steps on {} pairs: loss {first:.4} -> {last:.4}", dataset.len());
        }
        Command::Eval { pred, gt } => {
            let pred = load_disparity_kitti(&pred)?;
            let gt = load_disparity_kitti(&gt)?;
            let r = bad_pixel_rate(&pred, &gt)?;
            println!("bad pixel rate: {:.3}", r.bad_pixel_rate);
            println!("mean abs error: {:.3}", r.mean_abs_error);
            println!("valid pixels: {}", r.valid_count);
        }
        Command::Bench {
            left,
            right,
            repeats,
            ckpt,
            opts,
            csv,
        } => {
            let pair = StereoPair::<f32>::load(&left, &right)?;
            let params = load_params(ckpt.as_deref())?;
            let report = benchmark(&pair, &params, &opts.pipeline(), repeats)?;
            print!("{}", report.to_table());
            if let Some(path) = csv {
                fs::write(path, report.to_csv())?;
            }
        }
        Command::VizWeights {
            left,
            ckpt,
            out_prefix,
            sigma,
        } => {
            let img = dtstereo::imageio::load_image(&left)?;
            let params = load_params(Some(&ckpt))?;
            let (hor, vert) = predict_weights(&img, &params, sigma)?.to_images();
            save_image(&hor, format!("{out_prefix}w_hor.png"))?;
            save_image(&vert, format!("{out_prefix}w_vert.png"))?;
        }
        Command::MakeSynth {
            out,
            kind,
            seed,
            count,
            width,
            height,
            dmax,
        } => {
            let kind = match kind {
                Kind::Rds => SynthKind::Rds,
                Kind::Planes => SynthKind::Planes,
            };
            let scenes = (0..count as u64)
                .map(|i| generate(kind, width, height, dmax, seed.wrapping_mul(1000).wrapping_add(i)))
                .collect::<dtstereo::Result<Vec<_>>>()?;
            write_dataset(&out, &scenes)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
