//! Synthetic stereo scenes with dense ground truth.
//!
//! Scenes are defined by an integer left-view disparity field and a surface
//! id per pixel. The left view gets a random-dot texture (drawn from the
//! surface's palette); the right view is rendered by forward-warping every
//! left pixel to `x - d` and keeping the nearest surface (largest disparity).
//! Right-view pixels nothing maps onto get fresh background dots.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{ensure, Result};
use crate::imageio::{save_disparity, save_image, DisparityMap, Image, PixelStatus, StereoPair};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Palette {
    pub base: [f32; 3],
    pub spread: f32,
}

impl Palette {
    pub const FULL: Palette = Palette {
        base: [0.5; 3],
        spread: 0.5,
    };
    pub const COOL: Palette = Palette {
        base: [0.25, 0.3, 0.6],
        spread: 0.22,
    };
    pub const WARM: Palette = Palette {
        base: [0.78, 0.58, 0.3],
        spread: 0.22,
    };

    fn sample(&self, rng: &mut impl Rng) -> [f32; 3] {
        self.base
            .map(|b| (b + self.spread * rng.random_range(-1.0f32..=1.0)).clamp(0.0, 1.0))
    }
}

#[derive(Clone, Debug)]
pub struct SynthScene {
    pub pair: StereoPair<f32>,
    /// Dense left-view ground truth.
    pub disparity: DisparityMap,
    /// Right-view disparity; invalid where the right pixel has no left partner.
    pub right_disparity: DisparityMap,
    /// Left pixels not visible in the right view.
    pub occluded: Vec<bool>,
}

/// Renders a scene from a left-view disparity field and surface ids.
pub fn render_scene(
    width: usize,
    height: usize,
    disparity: &[usize],
    surface: &[usize],
    palettes: &[Palette],
    rng: &mut impl Rng,
) -> Result<SynthScene> {
    let n = width * height;
    ensure!(
        disparity.len() == n && surface.len() == n,
        "scene fields must have {n} entries"
    );
    ensure!(
        surface.iter().all(|&s| s < palettes.len()),
        "surface id without a palette"
    );
    let mut left = Vec::with_capacity(n * 3);
    for &s in surface {
        left.extend_from_slice(&palettes[s].sample(rng));
    }
    let mut right = vec![0.0f32; n * 3];
    let mut right_disp = vec![0.0f32; n];
    let mut right_status = vec![PixelStatus::Invalid; n];
    let mut occluded = vec![false; n];
    for y in 0..height {
        // For every right column, the left column that is visible there.
        let mut owner: Vec<Option<usize>> = vec![None; width];
        for x in 0..width {
            let d = disparity[y * width + x];
            if d > x {
                continue;
            }
            let xr = x - d;
            let closer = match owner[xr] {
                None => true,
                Some(prev) => d > disparity[y * width + prev],
            };
            if closer {
                owner[xr] = Some(x);
            }
        }
        for x in 0..width {
            let d = disparity[y * width + x];
            occluded[y * width + x] = d > x || owner[x - d] != Some(x);
        }
        for (xr, o) in owner.iter().enumerate() {
            let i = y * width + xr;
            let color = match o {
                Some(xl) => {
                    let j = y * width + xl;
                    right_disp[i] = disparity[j] as f32;
                    right_status[i] = PixelStatus::Valid;
                    [left[j * 3], left[j * 3 + 1], left[j * 3 + 2]]
                }
                None => palettes[0].sample(rng),
            };
            right[i * 3..i * 3 + 3].copy_from_slice(&color);
        }
    }
    let pair = StereoPair::new(
        Image::new(width, height, 3, left)?,
        Image::new(width, height, 3, right)?,
    )?;
    Ok(SynthScene {
        pair,
        disparity: DisparityMap::from_values(
            width,
            height,
            disparity.iter().map(|&d| d as f32).collect(),
        )?,
        right_disparity: DisparityMap::with_status(width, height, right_disp, right_status)?,
        occluded,
    })
}

/// Random-dot stereogram with one uniform shift.
pub fn uniform_rds(width: usize, height: usize, shift: usize, seed: u64) -> Result<SynthScene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    render_scene(
        width,
        height,
        &vec![shift; width * height],
        &vec![0; width * height],
        &[Palette::FULL],
        &mut rng,
    )
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

impl Rect {
    fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x && x < self.x + self.width && y >= self.y && y < self.y + self.height
    }
}

fn random_rect(width: usize, height: usize, rng: &mut impl Rng) -> Rect {
    let rw = rng.random_range(width / 4..=width / 2).max(1);
    let rh = rng.random_range(height / 4..=height / 2).max(1);
    Rect {
        x: rng.random_range(width / 6..=width - rw - width / 8),
        y: rng.random_range(0..=height - rh),
        width: rw,
        height: rh,
    }
}

/// Fronto-parallel background at `bg` with a rectangle at `fg`, each with
/// its own palette. The occlusion band sits just left of the rectangle.
pub fn two_plane_fixture(width: usize, height: usize, bg: usize, fg: usize, rect: Rect, seed: u64) -> Result<SynthScene> {
    let mut disparity = vec![bg; width * height];
    let mut surface = vec![0; width * height];
    for y in 0..height {
        for x in 0..width {
            if rect.contains(x, y) {
                disparity[y * width + x] = fg;
                surface[y * width + x] = 1;
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    render_scene(width, height, &disparity, &surface, &[Palette::COOL, Palette::WARM], &mut rng)
}

/// Random-dot stereogram: a background shift plus two rectangles with larger
/// shifts, all sharing one texture distribution.
pub fn rds_scene(width: usize, height: usize, max_disparity: usize, seed: u64) -> Result<SynthScene> {
    ensure!(max_disparity >= 4, "need max_disparity >= 4");
    ensure!(width >= 16 && height >= 8, "scene too small");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bg = rng.random_range(1..=max_disparity / 4);
    let mut disparity = vec![bg; width * height];
    for _ in 0..2 {
        let rect = random_rect(width, height, &mut rng);
        let d = rng.random_range(max_disparity / 2..=max_disparity);
        for y in 0..height {
            for x in 0..width {
                if rect.contains(x, y) {
                    disparity[y * width + x] = d;
                }
            }
        }
    }
    render_scene(width, height, &disparity, &vec![0; width * height], &[Palette::FULL], &mut rng)
}

/// Two slanted planes: a background whose disparity grows down the image and
/// a foreground rectangle, textured with distinct palettes.
pub fn planes_scene(width: usize, height: usize, max_disparity: usize, seed: u64) -> Result<SynthScene> {
    ensure!(max_disparity >= 8, "need max_disparity >= 8");
    ensure!(width >= 16 && height >= 8, "scene too small");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half = max_disparity / 2;
    let top = rng.random_range(1..=half / 2) as f64;
    let bottom = rng.random_range(half / 2..=half) as f64;
    let rect = random_rect(width, height, &mut rng);
    let fg_near = rng.random_range(half + 2..=max_disparity) as f64;
    let fg_slope = rng.random_range(-1.0..=1.0);
    let mut disparity = vec![0; width * height];
    let mut surface = vec![0; width * height];
    for y in 0..height {
        let t = y as f64 / (height - 1) as f64;
        for x in 0..width {
            let i = y * width + x;
            if rect.contains(x, y) {
                let u = (x - rect.x) as f64 / rect.width.max(2) as f64;
                disparity[i] = (fg_near + fg_slope * 2.0 * (u - 0.5)).round().clamp(1.0, max_disparity as f64) as usize;
                surface[i] = 1;
            } else {
                disparity[i] = (top + (bottom - top) * t).round() as usize;
            }
        }
    }
    render_scene(width, height, &disparity, &surface, &[Palette::COOL, Palette::WARM], &mut rng)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SynthKind {
    Rds,
    Planes,
}

pub fn generate(kind: SynthKind, width: usize, height: usize, max_disparity: usize, seed: u64) -> Result<SynthScene> {
    match kind {
        SynthKind::Rds => rds_scene(width, height, max_disparity, seed),
        SynthKind::Planes => planes_scene(width, height, max_disparity, seed),
    }
}

/// Adds clamped Gaussian noise to every sample.
pub fn add_noise(img: &Image<f32>, sigma: f64, seed: u64) -> Image<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma).expect("non-negative sigma");
    let mut out = img.clone();
    for v in out.as_mut_slice() {
        *v = (*v as f64 + normal.sample(&mut rng)).clamp(0.0, 1.0) as f32;
    }
    out
}

/// Writes scenes as `left/NNN.png`, `right/NNN.png`, `disp/NNN.png`.
pub fn write_dataset(dir: impl AsRef<Path>, scenes: &[SynthScene]) -> Result<()> {
    let dir = dir.as_ref();
    for sub in ["left", "right", "disp"] {
        fs::create_dir_all(dir.join(sub))?;
    }
    for (i, scene) in scenes.iter().enumerate() {
        let name = format!("{i:03}.png");
        save_image(&scene.pair.left, dir.join("left").join(&name))?;
        save_image(&scene.pair.right, dir.join("right").join(&name))?;
        save_disparity(&scene.disparity, dir.join("disp").join(&name))?;
    }
    Ok(())
}
