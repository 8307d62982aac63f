//! Unsupervised spatial prior for the map bank.
//!
//! [`spectral_residual_saliency`] is the built-in estimator; maps produced
//! offline by any other estimator can be ingested with
//! [`load_external_saliency`].

use std::path::Path;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::codec;
use crate::error::{Error, Result};
use crate::grid::Grid2D;

pub const MIN_SIDE: usize = 8;
const SMOOTH_SIGMA: f64 = 2.5;
const FLOOR_FRACTION: f64 = 0.05;

/// Saliency in `[0, 1]`, same shape as its source image.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap(Grid2D);

impl SaliencyMap {
    pub fn new(map: Grid2D) -> Result<Self> {
        if map.values().iter().any(|&x| !(0.0..=1.0).contains(&x)) {
            return Err(Error::param("saliency", "values must lie in [0, 1]"));
        }
        Ok(SaliencyMap(map))
    }

    pub fn map(&self) -> &Grid2D {
        &self.0
    }

    pub fn into_grid(self) -> Grid2D {
        self.0
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        codec::save_grid(&self.0, path)
    }
}

/// Collapses colour planes to grayscale by channel mean.
pub fn channel_mean(planes: &[Grid2D]) -> Result<Grid2D> {
    let first = planes
        .first()
        .ok_or_else(|| Error::param("planes", "need at least one channel"))?;
    for p in &planes[1..] {
        first.check_same_shape(p)?;
    }
    let n = planes.len() as f32;
    let values = (0..first.len())
        .map(|i| planes.iter().map(|p| p.values()[i]).sum::<f32>() / n)
        .collect();
    Grid2D::from_vec(first.width(), first.height(), values)
}

/// Spectral-residual saliency: the log-amplitude spectrum minus its local
/// 3x3 average is recombined with the original phase, inverted, squared,
/// smoothed with a Gaussian of sigma 2.5 and max-normalized.
pub fn spectral_residual_saliency(image: &Grid2D) -> Result<SaliencyMap> {
    let (w, h) = (image.width(), image.height());
    if w < MIN_SIDE || h < MIN_SIDE {
        return Err(Error::param(
            "image",
            format!("saliency needs at least {MIN_SIDE}x{MIN_SIDE}, got {w}x{h}"),
        ));
    }

    let mean = image.integrate() / image.len() as f64;
    let mut spec: Vec<Complex64> = image
        .values()
        .iter()
        .map(|&x| Complex64::new(x as f64 - mean, 0.0))
        .collect();
    if spec.iter().all(|c| c.re == 0.0) {
        return Ok(SaliencyMap(Grid2D::zeros(w, h)?));
    }

    let mut planner = FftPlanner::<f64>::new();
    fft2(&mut planner, &mut spec, w, h, false);

    let amp: Vec<f64> = spec.iter().map(|c| c.norm()).collect();
    let amp_mean = amp.iter().sum::<f64>() / amp.len() as f64;
    // near-zero bins would dominate the log spectrum; clamp them
    let floor = amp_mean * FLOOR_FRACTION;
    let log_amp: Vec<f64> = amp.iter().map(|&a| a.max(floor).ln()).collect();

    for v in 0..h {
        for u in 0..w {
            let i = v * w + u;
            if amp[i] <= floor {
                spec[i] = Complex64::new(0.0, 0.0);
                continue;
            }
            let mut avg = 0.0;
            for dv in [h - 1, 0, 1] {
                for du in [w - 1, 0, 1] {
                    avg += log_amp[((v + dv) % h) * w + (u + du) % w];
                }
            }
            let residual = log_amp[i] - avg / 9.0;
            spec[i] = spec[i] / amp[i] * residual.exp();
        }
    }

    fft2(&mut planner, &mut spec, w, h, true);

    let energy: Vec<f32> = spec.iter().map(|c| c.norm_sqr() as f32).collect();
    let peak = energy.iter().copied().fold(0.0f32, f32::max);
    // rescale before blurring so tiny energies stay representable
    let energy = if peak > 0.0 {
        energy.into_iter().map(|e| e / peak).collect()
    } else {
        energy
    };
    let smooth = Grid2D::from_vec(w, h, energy)?.gaussian_blur(SMOOTH_SIGMA)?;
    Ok(SaliencyMap(smooth.normalize_max()))
}

fn fft2(planner: &mut FftPlanner<f64>, data: &mut [Complex64], w: usize, h: usize, inverse: bool) {
    let row_fft = if inverse {
        planner.plan_fft_inverse(w)
    } else {
        planner.plan_fft_forward(w)
    };
    for row in data.chunks_exact_mut(w) {
        row_fft.process(row);
    }
    let col_fft = if inverse {
        planner.plan_fft_inverse(h)
    } else {
        planner.plan_fft_forward(h)
    };
    let mut col = vec![Complex64::new(0.0, 0.0); h];
    for u in 0..w {
        for v in 0..h {
            col[v] = data[v * w + u];
        }
        col_fft.process(&mut col);
        for v in 0..h {
            data[v * w + u] = col[v];
        }
    }
}

/// Loads a saliency map computed elsewhere (`.c2dg` or 8/16-bit PGM) and
/// rescales it to `[0, 1]` by its maximum.
pub fn load_external_saliency(path: &Path) -> Result<SaliencyMap> {
    let raw = codec::load_raster(path)?;
    if raw.min() < 0.0 {
        return Err(Error::format("saliency", "values", "negative saliency value"));
    }
    Ok(SaliencyMap(raw.normalize_max()))
}
