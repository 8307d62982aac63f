//! Counting, map-quality, subregion and localization metrics.
//!
//! Note that `mse` throughout is the root of the mean squared counting
//! error, the convention used by crowd-counting benchmarks.

use std::fmt::Write as _;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::grid::{gaussian_kernel_1d, Grid2D, Rect};
use crate::pseudo::{Point, PointSet};

const SSIM_SIGMA: f64 = 1.5;
const SSIM_RADIUS: usize = 5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// `(mae, rmse)` between predicted and true counts.
pub fn counting_errors(pred: &[f64], gt: &[f64]) -> Result<(f64, f64)> {
    if pred.is_empty() {
        return Err(Error::param("counts", "need at least one count pair"));
    }
    if pred.len() != gt.len() {
        return Err(Error::Shape {
            expected: format!("{} counts", gt.len()),
            actual: format!("{} counts", pred.len()),
        });
    }
    let n = pred.len() as f64;
    let (mut abs, mut sq) = (0.0, 0.0);
    for (p, g) in pred.iter().zip(gt) {
        let d = p - g;
        abs += d.abs();
        sq += d * d;
    }
    Ok((abs / n, (sq / n).sqrt()))
}

/// Both maps divided by their shared maximum, as f64.
fn shared_rescale(a: &Grid2D, b: &Grid2D) -> Result<(Vec<f64>, Vec<f64>)> {
    a.check_same_shape(b)?;
    let m = a.max().max(b.max()) as f64;
    let s = if m > 0.0 { 1.0 / m } else { 1.0 };
    Ok((
        a.values().iter().map(|&x| x as f64 * s).collect(),
        b.values().iter().map(|&x| x as f64 * s).collect(),
    ))
}

/// Separable Gaussian smoothing with the window clipped at the borders and
/// renormalized, so maps smaller than the window are still handled.
fn window_mean(x: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let r = k.len() / 2;
    let pass = |src: &[f64], len: usize, stride: usize, count: usize, step: usize| {
        let mut out = vec![0.0; src.len()];
        for line in 0..count {
            let base = line * step;
            for i in 0..len {
                let lo = i.saturating_sub(r);
                let hi = (i + r).min(len - 1);
                let (mut acc, mut norm) = (0.0, 0.0);
                for j in lo..=hi {
                    let wt = k[j + r - i];
                    acc += wt * src[base + j * stride];
                    norm += wt;
                }
                out[base + i * stride] = acc / norm;
            }
        }
        out
    };
    let rows = pass(x, w, 1, h, w);
    pass(&rows, h, w, w, 1)
}

/// Mean local SSIM with an 11x11 Gaussian window (sigma 1.5).
pub fn ssim(a: &Grid2D, b: &Grid2D) -> Result<f64> {
    let (x, y) = shared_rescale(a, b)?;
    let (w, h) = (a.width(), a.height());
    let k = gaussian_kernel_1d(SSIM_SIGMA)?;
    let k = &k[k.len() / 2 - SSIM_RADIUS..=k.len() / 2 + SSIM_RADIUS];
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
    let (mx, my) = (window_mean(&x, w, h, k), window_mean(&y, w, h, k));
    let (exx, eyy, exy) = (window_mean(&xx, w, h, k), window_mean(&yy, w, h, k), window_mean(&xy, w, h, k));
    let mut total = 0.0;
    for i in 0..x.len() {
        let vx = exx[i] - mx[i] * mx[i];
        let vy = eyy[i] - my[i] * my[i];
        let cxy = exy[i] - mx[i] * my[i];
        let num = (2.0 * mx[i] * my[i] + SSIM_C1) * (2.0 * cxy + SSIM_C2);
        let den = (mx[i] * mx[i] + my[i] * my[i] + SSIM_C1) * (vx + vy + SSIM_C2);
        total += num / den;
    }
    Ok(total / x.len() as f64)
}

/// PSNR in dB on the shared-max scale; infinite for identical maps.
pub fn psnr(a: &Grid2D, b: &Grid2D) -> Result<f64> {
    let (x, y) = shared_rescale(a, b)?;
    let mse = x.iter().zip(&y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / x.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

/// Tiles of side `tile` in row-major order; edge tiles may be smaller.
pub fn tiles(width: usize, height: usize, tile: usize) -> Result<Vec<Rect>> {
    if tile == 0 {
        return Err(Error::param("tile", "must be at least 1"));
    }
    let mut out = Vec::new();
    for v0 in (0..height).step_by(tile) {
        for u0 in (0..width).step_by(tile) {
            out.push(Rect::new(u0, v0, tile.min(width - u0), tile.min(height - v0)));
        }
    }
    Ok(out)
}

/// Per-tile counts of both maps, in tile order.
pub fn tile_counts(pred: &Grid2D, gt: &Grid2D, tile: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    pred.check_same_shape(gt)?;
    let rects = tiles(pred.width(), pred.height(), tile)?;
    let mut p = Vec::with_capacity(rects.len());
    let mut g = Vec::with_capacity(rects.len());
    for r in rects {
        p.push(pred.subregion_count(r)?);
        g.push(gt.subregion_count(r)?);
    }
    Ok((p, g))
}

pub fn subregion_eval(pred: &Grid2D, gt: &Grid2D, tile: usize) -> Result<(f64, f64)> {
    let (p, g) = tile_counts(pred, gt, tile)?;
    counting_errors(&p, &g)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub point: Point,
    pub score: f32,
}

/// Order used for greedy matching: higher score first, then row-major.
fn detection_order(a: &Detection, b: &Detection) -> std::cmp::Ordering {
    b.score
        .total_cmp(&a.score)
        .then((a.point.v, a.point.u).cmp(&(b.point.v, b.point.u)))
}

/// Density peaks: pixels above `min_density` that are strict maxima of the
/// square neighbourhood of radius `nms_radius`, then greedily thinned so no
/// two kept peaks are within `nms_radius` of each other.
pub fn detect_peaks(pred: &Grid2D, min_density: f32, nms_radius: usize) -> Vec<Detection> {
    let (w, h) = (pred.width(), pred.height());
    let r = nms_radius.max(1);
    let mut cands = Vec::new();
    for v in 0..h {
        for u in 0..w {
            let x = pred.get(u, v);
            if x <= min_density {
                continue;
            }
            let mut strict = true;
            'scan: for nv in v.saturating_sub(r)..=(v + r).min(h - 1) {
                for nu in u.saturating_sub(r)..=(u + r).min(w - 1) {
                    if (nu, nv) != (u, v) && pred.get(nu, nv) >= x {
                        strict = false;
                        break 'scan;
                    }
                }
            }
            if strict {
                cands.push(Detection {
                    point: Point { u, v },
                    score: x,
                });
            }
        }
    }
    cands.sort_by(detection_order);
    let r2 = (nms_radius * nms_radius) as f64;
    let mut kept: Vec<Detection> = Vec::new();
    for c in cands {
        if kept.iter().all(|k| dist2(k.point, c.point) > r2) {
            kept.push(c);
        }
    }
    kept
}

pub fn localize(pred: &Grid2D, min_density: f32, nms_radius: usize) -> PointSet {
    let points = detect_peaks(pred, min_density, nms_radius).into_iter().map(|d| d.point).collect();
    PointSet::new(points).expect("peaks are distinct pixels")
}

fn dist2(a: Point, b: Point) -> f64 {
    let du = a.u as f64 - b.u as f64;
    let dv = a.v as f64 - b.v as f64;
    du * du + dv * dv
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub matches: usize,
    pub detected: usize,
    pub ground_truth: usize,
}

impl Prf {
    pub fn precision(&self) -> f64 {
        match (self.detected, self.ground_truth) {
            (0, 0) => 1.0,
            (0, _) => 0.0,
            (d, _) => self.matches as f64 / d as f64,
        }
    }

    pub fn recall(&self) -> f64 {
        match (self.detected, self.ground_truth) {
            (0, 0) => 1.0,
            (_, 0) => 0.0,
            (_, g) => self.matches as f64 / g as f64,
        }
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }

    /// Pools matches and set sizes, for micro-averaging across images.
    pub fn merge(self, other: Prf) -> Prf {
        Prf {
            matches: self.matches + other.matches,
            detected: self.detected + other.detected,
            ground_truth: self.ground_truth + other.ground_truth,
        }
    }
}

/// Greedy one-to-one matching: detections, strongest first, each claim the
/// nearest unclaimed ground-truth point within `match_radius`.
pub fn localization_prf(detected: &[Detection], gt: &PointSet, match_radius: f64) -> Prf {
    let mut order: Vec<Detection> = detected.to_vec();
    order.sort_by(detection_order);
    let r2 = match_radius * match_radius;
    let mut claimed = vec![false; gt.len()];
    let mut matches = 0;
    for d in &order {
        let best = gt
            .iter()
            .enumerate()
            .filter(|(j, g)| !claimed[*j] && dist2(d.point, **g) <= r2)
            .min_by(|(_, a), (_, b)| {
                dist2(d.point, **a)
                    .total_cmp(&dist2(d.point, **b))
                    .then((a.v, a.u).cmp(&(b.v, b.u)))
            });
        if let Some((j, _)) = best {
            claimed[j] = true;
            matches += 1;
        }
    }
    Prf {
        matches,
        detected: detected.len(),
        ground_truth: gt.len(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub tile: Option<usize>,
    pub match_radius: f64,
    /// Detection threshold as a fraction of each map's maximum.
    pub min_density: f32,
    pub nms_radius: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            tile: None,
            match_radius: 4.0,
            min_density: 0.2,
            nms_radius: 2,
        }
    }
}

/// One image to evaluate. `gt_points` enables the localization metrics.
pub struct EvalItem<'a> {
    pub pred: &'a Grid2D,
    pub gt_density: &'a Grid2D,
    pub gt_count: f64,
    pub gt_points: Option<&'a PointSet>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_images: usize,
    pub mae: f64,
    pub mse: f64,
    pub ssim: f64,
    #[serde(serialize_with = "ser_db", deserialize_with = "de_db")]
    pub psnr: f64,
    pub subregion_mae: Option<f64>,
    pub subregion_mse: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
}

fn ser_db<S: Serializer>(x: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if x.is_infinite() && *x > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*x)
    }
}

fn de_db<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Db {
        Num(f64),
        Text(String),
    }
    match Db::deserialize(d)? {
        Db::Num(x) => Ok(x),
        Db::Text(t) if t == "inf" => Ok(f64::INFINITY),
        Db::Text(t) => Err(serde::de::Error::custom(format!("bad psnr value {t:?}"))),
    }
}

/// Averages SSIM and PSNR over images. Subregion errors pool all tiles of
/// all images; localization pools matches across images.
pub fn evaluate(items: &[EvalItem<'_>], cfg: &EvalConfig) -> Result<EvalReport> {
    if items.is_empty() {
        return Err(Error::param("images", "nothing to evaluate"));
    }
    let pred_counts: Vec<f64> = items.iter().map(|it| it.pred.integrate()).collect();
    let gt_counts: Vec<f64> = items.iter().map(|it| it.gt_count).collect();
    let (mae, mse) = counting_errors(&pred_counts, &gt_counts)?;

    let (mut ssim_sum, mut psnr_sum) = (0.0, 0.0);
    let (mut tp, mut tg) = (Vec::new(), Vec::new());
    let mut prf: Option<Prf> = None;
    let with_points = items.iter().all(|it| it.gt_points.is_some());
    for it in items {
        ssim_sum += ssim(it.pred, it.gt_density)?;
        psnr_sum += psnr(it.pred, it.gt_density)?;
        if let Some(t) = cfg.tile {
            let (p, g) = tile_counts(it.pred, it.gt_density, t)?;
            tp.extend(p);
            tg.extend(g);
        }
        if let (true, Some(gt)) = (with_points, it.gt_points) {
            let thr = cfg.min_density * it.pred.max();
            let det = detect_peaks(it.pred, thr, cfg.nms_radius);
            let one = localization_prf(&det, gt, cfg.match_radius);
            prf = Some(prf.map_or(one, |acc| acc.merge(one)));
        }
    }
    let n = items.len() as f64;
    let sub = if cfg.tile.is_some() {
        Some(counting_errors(&tp, &tg)?)
    } else {
        None
    };
    Ok(EvalReport {
        n_images: items.len(),
        mae,
        mse,
        ssim: ssim_sum / n,
        psnr: psnr_sum / n,
        subregion_mae: sub.map(|s| s.0),
        subregion_mse: sub.map(|s| s.1),
        precision: prf.map(|p| p.precision()),
        recall: prf.map(|p| p.recall()),
        f1: prf.map(|p| p.f1()),
    })
}

impl EvalReport {
    pub fn to_table(&self) -> String {
        let fmt = |x: Option<f64>| match x {
            Some(v) if v.is_infinite() => "inf".to_string(),
            Some(v) => format!("{v:.4}"),
            None => "-".to_string(),
        };
        let rows = [
            ("images", self.n_images.to_string()),
            ("mae", fmt(Some(self.mae))),
            ("mse", fmt(Some(self.mse))),
            ("ssim", fmt(Some(self.ssim))),
            ("psnr", fmt(Some(self.psnr))),
            ("subregion_mae", fmt(self.subregion_mae)),
            ("subregion_mse", fmt(self.subregion_mse)),
            ("precision", fmt(self.precision)),
            ("recall", fmt(self.recall)),
            ("f1", fmt(self.f1)),
        ];
        let width = rows.iter().map(|r| r.1.len()).max().unwrap_or(0);
        let mut out = String::new();
        for (k, v) in rows {
            writeln!(out, "{k:<14} {v:>width$}").unwrap();
        }
        out
    }
}
