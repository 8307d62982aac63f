//! Contrastive spatial regularizer.
//!
//! Crowd and background patches are picked from the thresholded predicted
//! density, embedded as L2-normalized mean feature vectors, and scored with
//!
//! ```text
//! L = -log( exp(a.p / tau) / sum_k exp(a.n_k / tau) )
//! ```
//!
//! where the denominator runs over the negatives only unless
//! `include_positive_in_denominator` is set.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid2D, Rect};
use crate::model::FeatureGrid;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveConfig {
    pub threshold: f32,
    pub patch: usize,
    pub negatives: usize,
    pub max_batches: usize,
    pub include_positive_in_denominator: bool,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig {
            threshold: 0.2,
            patch: 8,
            negatives: 8,
            max_batches: 16,
            include_positive_in_denominator: false,
        }
    }
}

/// Mean feature vector over a cell, and its unit-length version.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchEmbedding {
    pub cell: Rect,
    pub mean: Vec<f64>,
    pub unit: Vec<f64>,
}

impl PatchEmbedding {
    /// `None` when the mean feature vector is zero.
    pub fn from_cell(features: &FeatureGrid, cell: Rect) -> Option<Self> {
        let area = cell.area() as f64;
        let mean: Vec<f64> = (0..features.channels)
            .map(|c| {
                let mut acc = 0.0f64;
                for v in cell.v0..cell.v0 + cell.height {
                    for u in cell.u0..cell.u0 + cell.width {
                        acc += features.get(c, u, v) as f64;
                    }
                }
                acc / area
            })
            .collect();
        let norm = dot(&mean, &mean).sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return None;
        }
        let unit = mean.iter().map(|x| x / norm).collect();
        Some(PatchEmbedding { cell, mean, unit })
    }

    fn norm(&self) -> f64 {
        dot(&self.mean, &self.mean).sqrt()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairBatch {
    pub anchor: PatchEmbedding,
    pub positive: PatchEmbedding,
    pub negatives: Vec<PatchEmbedding>,
}

impl PairBatch {
    /// Re-embeds the same cells from another feature grid.
    pub fn reembed(&self, features: &FeatureGrid) -> Option<PairBatch> {
        Some(PairBatch {
            anchor: PatchEmbedding::from_cell(features, self.anchor.cell)?,
            positive: PatchEmbedding::from_cell(features, self.positive.cell)?,
            negatives: self
                .negatives
                .iter()
                .map(|n| PatchEmbedding::from_cell(features, n.cell))
                .collect::<Option<_>>()?,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CellClass {
    Crowd,
    Background,
    Ambiguous,
}

/// Tiles the grid into full `patch x patch` cells (a partial strip at the
/// right or bottom edge is left out) and classifies each by the fraction of
/// binarized crowd pixels: above 50% crowd, below 10% background.
pub fn classify_cells(binary: &Grid2D, patch: usize) -> Vec<(Rect, CellClass)> {
    let mut out = Vec::new();
    if patch == 0 {
        return out;
    }
    for cv in 0..binary.height() / patch {
        for cu in 0..binary.width() / patch {
            let cell = Rect::new(cu * patch, cv * patch, patch, patch);
            let ones = binary.subregion_count(cell).expect("cell inside grid");
            let frac = ones / cell.area() as f64;
            let class = if frac > 0.5 {
                CellClass::Crowd
            } else if frac < 0.1 {
                CellClass::Background
            } else {
                CellClass::Ambiguous
            };
            out.push((cell, class));
        }
    }
    out
}

/// Draws up to `min(#crowd - 1, max_batches)` batches. Returns an empty list
/// when there are fewer than two usable crowd cells or fewer than
/// `negatives` usable background cells.
pub fn select_pairs<R: Rng + ?Sized>(
    density: &Grid2D,
    features: &FeatureGrid,
    cfg: &ContrastiveConfig,
    rng: &mut R,
) -> Result<Vec<PairBatch>> {
    if features.width != density.width() || features.height != density.height() {
        return Err(Error::Shape {
            expected: format!("{}x{} features", density.width(), density.height()),
            actual: format!("{}x{}", features.width, features.height),
        });
    }
    if !(0.0..=1.0).contains(&cfg.threshold) {
        return Err(Error::param("threshold", format!("must lie in [0, 1], got {}", cfg.threshold)));
    }
    if cfg.patch == 0 {
        return Err(Error::param("patch", "must be at least 1"));
    }
    if cfg.negatives == 0 {
        return Err(Error::param("negatives", "need at least one negative"));
    }

    let binary = density.normalize_max().threshold_binarize(cfg.threshold);
    let mut crowd = Vec::new();
    let mut background = Vec::new();
    for (cell, class) in classify_cells(&binary, cfg.patch) {
        let bucket = match class {
            CellClass::Crowd => &mut crowd,
            CellClass::Background => &mut background,
            CellClass::Ambiguous => continue,
        };
        if let Some(e) = PatchEmbedding::from_cell(features, cell) {
            bucket.push(e);
        }
    }
    if crowd.len() < 2 || background.len() < cfg.negatives {
        log::debug!(
            "contrastive term skipped: {} crowd / {} background cells",
            crowd.len(),
            background.len()
        );
        return Ok(Vec::new());
    }

    let n_batches = (crowd.len() - 1).min(cfg.max_batches);
    let mut batches = Vec::with_capacity(n_batches);
    for _ in 0..n_batches {
        let pair = index::sample(rng, crowd.len(), 2);
        let negs = index::sample(rng, background.len(), cfg.negatives);
        batches.push(PairBatch {
            anchor: crowd[pair.index(0)].clone(),
            positive: crowd[pair.index(1)].clone(),
            negatives: negs.iter().map(|k| background[k].clone()).collect(),
        });
    }
    Ok(batches)
}

/// Loss and its gradients with respect to the (unit) embedding vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct InfoNce {
    pub loss: f64,
    pub d_anchor: Vec<f64>,
    pub d_positive: Vec<f64>,
    pub d_negatives: Vec<Vec<f64>>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn info_nce_vectors(
    anchor: &[f64],
    positive: &[f64],
    negatives: &[Vec<f64>],
    tau: f64,
    include_positive_in_denominator: bool,
) -> Result<InfoNce> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::param("tau", format!("must be > 0, got {tau}")));
    }
    if negatives.is_empty() {
        return Err(Error::param("negatives", "need at least one negative"));
    }
    let pos_logit = dot(anchor, positive) / tau;
    let mut logits: Vec<f64> = negatives.iter().map(|n| dot(anchor, n) / tau).collect();
    if include_positive_in_denominator {
        logits.push(pos_logit);
    }
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    let loss = -pos_logit + m + z.ln();
    let weights: Vec<f64> = exps.iter().map(|e| e / z).collect();

    let dim = anchor.len();
    let mut d_anchor: Vec<f64> = positive.iter().map(|p| -p / tau).collect();
    let mut d_positive: Vec<f64> = anchor.iter().map(|a| -a / tau).collect();
    let mut d_negatives = Vec::with_capacity(negatives.len());
    for (n, &wk) in negatives.iter().zip(&weights) {
        for c in 0..dim {
            d_anchor[c] += wk * n[c] / tau;
        }
        d_negatives.push(anchor.iter().map(|a| wk * a / tau).collect());
    }
    if include_positive_in_denominator {
        let wp = weights[negatives.len()];
        for c in 0..dim {
            d_anchor[c] += wp * positive[c] / tau;
            d_positive[c] += wp * anchor[c] / tau;
        }
    }
    Ok(InfoNce {
        loss,
        d_anchor,
        d_positive,
        d_negatives,
    })
}

pub fn info_nce(batch: &PairBatch, tau: f64, include_positive_in_denominator: bool) -> Result<InfoNce> {
    let negs: Vec<Vec<f64>> = batch.negatives.iter().map(|n| n.unit.clone()).collect();
    info_nce_vectors(
        &batch.anchor.unit,
        &batch.positive.unit,
        &negs,
        tau,
        include_positive_in_denominator,
    )
}

/// Gradient with respect to the raw mean vector, given the gradient with
/// respect to its normalized version. Always orthogonal to the mean.
pub fn normalization_backward(embedding: &PatchEmbedding, d_unit: &[f64]) -> Vec<f64> {
    let norm = embedding.norm();
    let radial = dot(d_unit, &embedding.unit);
    d_unit
        .iter()
        .zip(&embedding.unit)
        .map(|(g, u)| (g - radial * u) / norm)
        .collect()
}

#[derive(Clone, Debug)]
pub struct ContrastiveOutput {
    pub loss: f64,
    pub feature_grad: FeatureGrid,
    pub batches: usize,
}

/// Mean loss over `batches`, with the gradient routed back through the L2
/// normalization and the patch average onto the feature grid.
pub fn contrastive_loss(
    batches: &[PairBatch],
    tau: f64,
    include_positive_in_denominator: bool,
    channels: usize,
    width: usize,
    height: usize,
) -> Result<ContrastiveOutput> {
    let mut grad = FeatureGrid::zeros(channels, width, height);
    if batches.is_empty() {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::param("tau", format!("must be > 0, got {tau}")));
        }
        return Ok(ContrastiveOutput {
            loss: 0.0,
            feature_grad: grad,
            batches: 0,
        });
    }
    let scale = 1.0 / batches.len() as f64;
    let mut total = 0.0;
    let mut d_cells = vec![0.0f64; channels * width * height];
    for b in batches {
        let out = info_nce(b, tau, include_positive_in_denominator)?;
        total += out.loss;
        let items = std::iter::once((&b.anchor, &out.d_anchor))
            .chain(std::iter::once((&b.positive, &out.d_positive)))
            .chain(b.negatives.iter().zip(&out.d_negatives));
        for (emb, d_unit) in items {
            let d_mean = normalization_backward(emb, d_unit);
            let cell = emb.cell;
            let per_pixel = scale / cell.area() as f64;
            for (c, g) in d_mean.iter().enumerate() {
                let g = g * per_pixel;
                for v in cell.v0..cell.v0 + cell.height {
                    let row = (c * height + v) * width;
                    for x in &mut d_cells[row + cell.u0..row + cell.u0 + cell.width] {
                        *x += g;
                    }
                }
            }
        }
    }
    grad.data = d_cells.into_iter().map(|x| x as f32).collect();
    Ok(ContrastiveOutput {
        loss: total * scale,
        feature_grad: grad,
        batches: batches.len(),
    })
}
