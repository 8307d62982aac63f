//! Synthetic crowd scenes with known head positions.

use std::collections::HashSet;
use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid2D;
use crate::pseudo::{render_pseudo_density, CountAnnotation, Point, PointSet};

pub const MIN_SCENE_SIZE: usize = 32;
pub const HEAD_VALUE: f32 = 0.9;
const NOISE: f32 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub size: usize,
    pub count_min: usize,
    pub count_max: usize,
    pub cluster_count: usize,
    pub cluster_spread: f64,
    pub head_radius: usize,
    /// Peak of the smooth background, which spans `[0, background]`.
    pub background: f32,
    pub render_sigma: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            size: 64,
            count_min: 5,
            count_max: 50,
            cluster_count: 3,
            cluster_spread: 8.0,
            head_radius: 1,
            background: 0.3,
            render_sigma: 0.5,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size < MIN_SCENE_SIZE {
            return Err(Error::param("size", format!("must be at least {MIN_SCENE_SIZE}, got {}", self.size)));
        }
        if self.count_min > self.count_max {
            return Err(Error::param(
                "counts",
                format!("empty range {}:{}", self.count_min, self.count_max),
            ));
        }
        if self.count_max > self.size * self.size {
            return Err(Error::param("counts", "more heads than pixels"));
        }
        if self.cluster_count == 0 {
            return Err(Error::param("cluster_count", "need at least one cluster"));
        }
        if !(self.cluster_spread > 0.0 && self.cluster_spread.is_finite()) {
            return Err(Error::param("cluster_spread", "must be > 0"));
        }
        if !(0.0..=HEAD_VALUE).contains(&self.background) {
            return Err(Error::param("background", format!("must lie in [0, {HEAD_VALUE}]")));
        }
        if !(self.render_sigma > 0.0 && self.render_sigma.is_finite()) {
            return Err(Error::param("render_sigma", "must be > 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub image: Grid2D,
    pub gt_points: PointSet,
    pub gt_density: Grid2D,
    pub count: CountAnnotation,
}

impl SyntheticScene {
    /// Fraction of pixels covered by a head disk.
    pub fn occupancy(&self) -> f64 {
        let heads = self.image.values().iter().filter(|&&x| x >= HEAD_VALUE).count();
        heads as f64 / self.image.len() as f64
    }
}

pub fn gen_scene<R: Rng + ?Sized>(rng: &mut R, cfg: &SceneConfig) -> Result<SyntheticScene> {
    cfg.validate()?;
    let n = cfg.size;
    let count = rng.gen_range(cfg.count_min..=cfg.count_max);

    let centres: Vec<(f64, f64)> = (0..cfg.cluster_count)
        .map(|_| (rng.gen_range(0.0..n as f64), rng.gen_range(0.0..n as f64)))
        .collect();
    let spread = Normal::new(0.0, cfg.cluster_spread).expect("validated spread");
    let clip = |x: f64| x.round().clamp(0.0, (n - 1) as f64) as usize;

    let mut seen = HashSet::with_capacity(count);
    let mut points = Vec::with_capacity(count);
    let mut attempts = 0usize;
    while points.len() < count {
        if attempts >= 100 * count {
            return Err(Error::Generation(format!(
                "placed only {} of {count} distinct heads after {attempts} attempts",
                points.len()
            )));
        }
        attempts += 1;
        let (cu, cv) = centres[rng.gen_range(0..centres.len())];
        let p = Point {
            u: clip(cu + spread.sample(rng)),
            v: clip(cv + spread.sample(rng)),
        };
        if seen.insert(p) {
            points.push(p);
        }
    }

    let waves: Vec<[f64; 4]> = (0..3)
        .map(|_| {
            [
                rng.gen_range(0.5..1.0),
                rng.gen_range(0.25..2.0),
                rng.gen_range(0.25..2.0),
                rng.gen_range(0.0..2.0 * PI),
            ]
        })
        .collect();
    let raw: Vec<f64> = (0..n * n)
        .map(|i| {
            let (u, v) = ((i % n) as f64 / n as f64, (i / n) as f64 / n as f64);
            waves
                .iter()
                .map(|[a, fu, fv, ph]| a * (2.0 * PI * (fu * u + fv * v) + ph).sin())
                .sum()
        })
        .collect();
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut img: Vec<f32> = raw
        .iter()
        .map(|&x| {
            if hi > lo {
                ((x - lo) / (hi - lo)) as f32 * cfg.background
            } else {
                0.0
            }
        })
        .collect();

    let r = cfg.head_radius as isize;
    for p in &points {
        for dv in -r..=r {
            for du in -r..=r {
                if du * du + dv * dv > r * r {
                    continue;
                }
                let (u, v) = (p.u as isize + du, p.v as isize + dv);
                if u >= 0 && v >= 0 && (u as usize) < n && (v as usize) < n {
                    img[v as usize * n + u as usize] = HEAD_VALUE;
                }
            }
        }
    }
    for x in &mut img {
        *x = (*x + rng.gen_range(0.0..NOISE)).clamp(0.0, 1.0);
    }

    let gt_points = PointSet::new(points)?;
    let gt_density = render_pseudo_density(&gt_points, cfg.render_sigma, n, n)?;
    Ok(SyntheticScene {
        image: Grid2D::from_vec(n, n, img)?,
        gt_points,
        gt_density,
        count: CountAnnotation(count),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneEntry {
    pub index: usize,
    pub split: Split,
    pub name: String,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub seed: u64,
    pub n: usize,
    pub split: [f64; 3],
    pub config: SceneConfig,
    pub scenes: Vec<SceneEntry>,
}

pub struct GeneratedDataset {
    pub manifest: DatasetManifest,
    pub train: Vec<SyntheticScene>,
    pub val: Vec<SyntheticScene>,
    pub test: Vec<SyntheticScene>,
}

impl GeneratedDataset {
    pub fn split(&self, s: Split) -> &[SyntheticScene] {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

pub fn scene_name(index: usize) -> String {
    format!("scene_{index:06}")
}

/// Scene `index` of a dataset with this seed; independent of `n`.
pub fn scene_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

/// Split sizes: train and val are rounded, test takes the rest.
pub fn split_sizes(n: usize, split: [f64; 3]) -> Result<[usize; 3]> {
    if split.iter().any(|f| !(0.0..=1.0).contains(f)) || (split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::param("split", format!("fractions must be in [0, 1] and sum to 1, got {split:?}")));
    }
    let train = (n as f64 * split[0]).round() as usize;
    let val = ((n as f64 * split[1]).round() as usize).min(n - train);
    Ok([train, val, n - train - val])
}

pub fn gen_dataset(seed: u64, n: usize, cfg: &SceneConfig, split: [f64; 3]) -> Result<GeneratedDataset> {
    cfg.validate()?;
    let sizes = split_sizes(n, split)?;
    let mut order: Vec<usize> = (0..n).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut shuffle_rng);

    let mut out = GeneratedDataset {
        manifest: DatasetManifest {
            format_version: 1,
            seed,
            n,
            split,
            config: cfg.clone(),
            scenes: Vec::with_capacity(n),
        },
        train: Vec::with_capacity(sizes[0]),
        val: Vec::with_capacity(sizes[1]),
        test: Vec::with_capacity(sizes[2]),
    };
    for (pos, &index) in order.iter().enumerate() {
        let which = if pos < sizes[0] {
            Split::Train
        } else if pos < sizes[0] + sizes[1] {
            Split::Val
        } else {
            Split::Test
        };
        let scene = gen_scene(&mut scene_rng(seed, index), cfg)?;
        out.manifest.scenes.push(SceneEntry {
            index,
            split: which,
            name: scene_name(index),
            count: scene.count.0,
        });
        match which {
            Split::Train => out.train.push(scene),
            Split::Val => out.val.push(scene),
            Split::Test => out.test.push(scene),
        }
    }
    Ok(out)
}
