//! Training loop: pseudo-map supervision from the map bank, the contrastive
//! feature regularizer, and once-per-epoch bank updates.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bank::{HistoricalMapBank, ProbabilityPrior};
use crate::contrastive::{contrastive_loss, select_pairs, ContrastiveConfig};
use crate::dataset::ImageRecord;
use crate::error::{Error, Result};
use crate::grid::Grid2D;
use crate::metrics::counting_errors;
use crate::model::{Adam, ModelParams, Predictor, FEATURE_CHANNELS};
use crate::pseudo::{render_pseudo_density, sample_locations, top_k_locations};
use crate::saliency::{load_external_saliency, spectral_residual_saliency};

pub const CHECKPOINT_FILE: &str = "checkpoint.c2dp";
pub const NORM_FILE: &str = "input_norm.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum BankInit {
    Saliency,
    Blob,
    None,
    External,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    Weighted,
    Topk,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Where pseudo-map locations are drawn from. `Prediction` rebuilds the
/// prior from the current forward pass alone, bypassing the bank.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum PriorSource {
    Bank,
    Prediction,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub optimizer: OptimizerKind,
    pub learning_rate: f32,
    pub weight_decay: f32,
    pub alpha: f64,
    pub tau: f64,
    pub render_sigma: f64,
    pub prior_blur_sigma: f64,
    /// The map loss compares `density_scale * density` maps, so it is on a
    /// scale comparable to the contrastive term. 1 compares raw densities.
    pub density_scale: f64,
    pub contrastive: ContrastiveConfig,
    pub contrastive_enabled: bool,
    pub seed: u64,
    pub labeled_fraction: f64,
    pub bank_init: BankInit,
    /// Directory of per-image saliency maps named `<image>.c2dg` or
    /// `<image>.pgm`, used with [`BankInit::External`].
    pub external_saliency: Option<std::path::PathBuf>,
    pub sampler: SamplerKind,
    pub prior_source: PriorSource,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-3,
            weight_decay: 0.0,
            alpha: 0.7,
            tau: 0.07,
            render_sigma: 0.5,
            prior_blur_sigma: 0.5,
            density_scale: 1000.0,
            contrastive: ContrastiveConfig::default(),
            contrastive_enabled: true,
            seed: 0,
            labeled_fraction: 0.0,
            bank_init: BankInit::Saliency,
            external_saliency: None,
            sampler: SamplerKind::Weighted,
            prior_source: PriorSource::Bank,
        }
    }
}

fn positive(name: &'static str, x: f64) -> Result<()> {
    if x > 0.0 && x.is_finite() {
        Ok(())
    } else {
        Err(Error::param(name, format!("must be > 0, got {x}")))
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        positive("learning_rate", self.learning_rate as f64)?;
        positive("tau", self.tau)?;
        positive("render_sigma", self.render_sigma)?;
        positive("prior_blur_sigma", self.prior_blur_sigma)?;
        positive("density_scale", self.density_scale)?;
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::param("weight_decay", "must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::param("alpha", format!("must lie in [0, 1], got {}", self.alpha)));
        }
        if !(0.0..=1.0).contains(&self.labeled_fraction) {
            return Err(Error::param(
                "labeled_fraction",
                format!("must lie in [0, 1], got {}", self.labeled_fraction),
            ));
        }
        if self.bank_init == BankInit::External && self.external_saliency.is_none() {
            return Err(Error::param("external_saliency", "required with external bank init"));
        }
        Ok(())
    }
}

/// Per-dataset input standardization.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputNorm {
    pub mean: f32,
    pub std: f32,
}

impl InputNorm {
    pub fn fit<'a>(images: impl IntoIterator<Item = &'a Grid2D>) -> Self {
        let (mut n, mut s, mut s2) = (0usize, 0.0f64, 0.0f64);
        for img in images {
            for &x in img.values() {
                n += 1;
                s += x as f64;
                s2 += x as f64 * x as f64;
            }
        }
        if n == 0 {
            return InputNorm { mean: 0.0, std: 1.0 };
        }
        let mean = s / n as f64;
        let var = (s2 / n as f64 - mean * mean).max(0.0);
        let std = if var > 1e-12 { var.sqrt() } else { 1.0 };
        InputNorm {
            mean: mean as f32,
            std: std as f32,
        }
    }

    pub fn apply(&self, image: &Grid2D) -> Result<Grid2D> {
        image.map(|x| (x - self.mean) / self.std)
    }
}

/// Trained parameters together with the input normalization they expect.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityModel {
    pub params: ModelParams,
    pub norm: InputNorm,
}

impl DensityModel {
    pub fn predict(&self, image: &Grid2D) -> Result<Grid2D> {
        Predictor::new(self.params.clone()).predict(&self.norm.apply(image)?)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(Error::io(dir))?;
        self.params.save(&dir.join(CHECKPOINT_FILE))?;
        let path = dir.join(NORM_FILE);
        let text = serde_json::to_string_pretty(&self.norm).map_err(Error::json(&path))?;
        fs::write(&path, text).map_err(Error::io(&path))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let params = ModelParams::load(&dir.join(CHECKPOINT_FILE))?;
        let path = dir.join(NORM_FILE);
        let text = fs::read_to_string(&path).map_err(Error::io(&path))?;
        let norm: InputNorm = serde_json::from_str(&text).map_err(Error::json(&path))?;
        if !(norm.mean.is_finite() && norm.std > 0.0 && norm.std.is_finite()) {
            return Err(Error::integrity(&path, "normalization must be finite with std > 0"));
        }
        Ok(DensityModel { params, norm })
    }
}

/// Starts the head at the training set's mean pixel density instead of
/// `softplus(0)`. From ln 2 per pixel the first updates drive every feature
/// unit negative and the ReLUs never recover.
pub fn set_output_bias(params: &mut ModelParams, mean_density: f64) {
    let d = mean_density.max(1e-12);
    let logit = if d > 30.0 { d } else { d.exp_m1().ln() };
    let head = params
        .tensors_mut()
        .iter_mut()
        .find(|t| t.name == "head.bias")
        .expect("architecture has a head bias");
    head.data[0] = logit as f32;
}

/// Mean squared pixel error and its gradient `2 (pred - target) / (H W)`.
pub fn map_loss(pred: &Grid2D, target: &Grid2D) -> Result<(f64, Grid2D)> {
    pred.check_same_shape(target)?;
    let n = pred.len() as f64;
    let mut loss = 0.0f64;
    let grad: Vec<f32> = pred
        .values()
        .iter()
        .zip(target.values())
        .map(|(&p, &t)| {
            let d = p as f64 - t as f64;
            loss += d * d;
            (2.0 * d / n) as f32
        })
        .collect();
    Ok((loss / n, Grid2D::from_vec(pred.width(), pred.height(), grad)?))
}

const TAG_SHUFFLE: u64 = 1;
const TAG_STEP: u64 = 2;
const TAG_LABELED: u64 = 3;

/// Independent reproducible stream for `(seed, tag, a, b)`.
pub fn stream_rng(seed: u64, tag: u64, a: u64, b: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    rng.set_stream((a << 32) ^ b);
    rng
}

/// The `round(fraction * n)` images that carry location labels: a seeded
/// shuffle of `0..n`, truncated.
pub fn labeled_subset(n: usize, fraction: f64, seed: u64) -> Vec<usize> {
    let k = ((n as f64 * fraction).round() as usize).min(n);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream_rng(seed, TAG_LABELED, 0, 0));
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepStats {
    pub map_loss: f64,
    pub contrastive_loss: f64,
    pub contrastive_batches: usize,
    pub predicted_count: f64,
    pub labeled: bool,
    pub support_exhausted: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub epoch: usize,
    pub steps: usize,
    pub map_loss: f64,
    pub contrastive_loss: f64,
    pub contrastive_batches: f64,
    pub train_mae: f64,
    pub val_mae: Option<f64>,
    pub val_mse: Option<f64>,
    pub clamped_updates: u64,
    pub bank_snapshot: Option<String>,
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub predictor: Predictor,
    adam: Adam,
    pub bank: HistoricalMapBank,
    pub norm: InputNorm,
    inputs: Vec<Grid2D>,
    labeled: Vec<bool>,
    staged: Vec<Option<Grid2D>>,
    epoch: usize,
}

fn initial_bank(cfg: &TrainConfig, data: &[ImageRecord]) -> Result<HistoricalMapBank> {
    let Some(first) = data.first() else {
        return HistoricalMapBank::from_entries(Vec::new(), cfg.alpha);
    };
    let (w, h) = (first.image.width(), first.image.height());
    match cfg.bank_init {
        BankInit::Saliency => {
            let maps = data.iter().map(|r| spectral_residual_saliency(&r.image)).collect::<Result<_>>()?;
            HistoricalMapBank::from_saliency(maps, cfg.alpha)
        }
        BankInit::Blob => HistoricalMapBank::centred_blob(data.len(), w, h, (w.min(h) - 1) / 4, cfg.alpha),
        BankInit::None => HistoricalMapBank::zeros(data.len(), w, h, cfg.alpha),
        BankInit::External => {
            let dir = cfg.external_saliency.as_ref().expect("validated");
            let maps = data
                .iter()
                .map(|r| {
                    let c2dg = dir.join(format!("{}.c2dg", r.name));
                    let path = if c2dg.is_file() { c2dg } else { dir.join(format!("{}.pgm", r.name)) };
                    let s = load_external_saliency(&path)?;
                    r.image
                        .check_same_shape(s.map())
                        .map_err(|e| Error::integrity(&path, e.to_string()))?;
                    Ok(s)
                })
                .collect::<Result<_>>()?;
            HistoricalMapBank::from_saliency(maps, cfg.alpha)
        }
    }
}

impl Trainer {
    pub fn new(cfg: TrainConfig, data: &[ImageRecord]) -> Result<Self> {
        cfg.validate()?;
        if let Some(first) = data.first() {
            for r in data {
                first.image.check_same_shape(&r.image)?;
            }
        }
        let norm = InputNorm::fit(data.iter().map(|r| &r.image));
        let inputs = data.iter().map(|r| norm.apply(&r.image)).collect::<Result<_>>()?;
        let mut labeled = vec![false; data.len()];
        for i in labeled_subset(data.len(), cfg.labeled_fraction, cfg.seed) {
            if data[i].points.is_none() {
                return Err(Error::param(
                    "labeled_fraction",
                    format!("image {} was picked for location labels but has no points", data[i].name),
                ));
            }
            labeled[i] = true;
        }
        let mut params = ModelParams::init(cfg.seed);
        if let Some(first) = data.first() {
            let total: usize = data.iter().map(|r| r.count.0).sum();
            let mean_density = total as f64 / (data.len() * first.image.len()) as f64;
            set_output_bias(&mut params, mean_density);
        }
        Ok(Trainer {
            bank: initial_bank(&cfg, data)?,
            adam: Adam::new(&params),
            predictor: Predictor::new(params),
            norm,
            inputs,
            labeled,
            staged: vec![None; data.len()],
            epoch: 0,
            cfg,
        })
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn is_labeled(&self, index: usize) -> bool {
        self.labeled[index]
    }

    pub fn model(&self) -> DensityModel {
        DensityModel {
            params: self.predictor.params.clone(),
            norm: self.norm,
        }
    }

    /// One optimization step on image `index`; the prediction is staged
    /// for the bank update at the end of the epoch.
    pub fn train_step(&mut self, data: &[ImageRecord], index: usize, rng: &mut ChaCha8Rng) -> Result<StepStats> {
        let cfg = &self.cfg;
        let record = &data[index];
        let cache = self.predictor.forward(&self.inputs[index])?;
        let pred = cache.density().clone();
        let (w, h) = (pred.width(), pred.height());

        let mut exhausted = false;
        let target = if self.labeled[index] {
            let pts = record.points.as_ref().expect("checked at construction");
            render_pseudo_density(pts, cfg.render_sigma, w, h)?
        } else {
            let prior = match cfg.prior_source {
                PriorSource::Bank => self.bank.make_prior(index, cfg.prior_blur_sigma)?,
                PriorSource::Prediction => ProbabilityPrior::from_density(&pred, cfg.prior_blur_sigma)?,
            };
            let sample = match cfg.sampler {
                SamplerKind::Weighted => sample_locations(&prior, record.count, rng),
                SamplerKind::Topk => top_k_locations(&prior, record.count),
            };
            exhausted = sample.support_exhausted;
            render_pseudo_density(&sample.points, cfg.render_sigma, w, h)?
        };

        let (m_loss, d_density) = map_loss(&pred, &target)?;
        let s2 = cfg.density_scale * cfg.density_scale;
        let (m_loss, d_density) = if s2 == 1.0 {
            (m_loss, d_density)
        } else {
            (m_loss * s2, d_density.map(|g| (g as f64 * s2) as f32)?)
        };
        let (c_loss, batches, d_features) = if cfg.contrastive_enabled {
            let batches = select_pairs(&pred, cache.features(), &cfg.contrastive, rng)?;
            let out = contrastive_loss(
                &batches,
                cfg.tau,
                cfg.contrastive.include_positive_in_denominator,
                FEATURE_CHANNELS,
                w,
                h,
            )?;
            let grad = (out.batches > 0).then_some(out.feature_grad);
            (out.loss, out.batches, grad)
        } else {
            (0.0, 0, None)
        };
        if !(m_loss + c_loss).is_finite() {
            return Err(Error::NonFinite {
                tensor: format!("loss (epoch {}, image {})", self.epoch, record.name),
            });
        }

        self.predictor.backward(&d_density, d_features.as_ref())?;
        let lr = cfg.learning_rate;
        let stepped = match cfg.optimizer {
            OptimizerKind::Sgd => self.predictor.sgd_step(lr, cfg.weight_decay),
            OptimizerKind::Adam => self.adam.step(&mut self.predictor.params, lr, cfg.weight_decay),
        };
        stepped.map_err(|e| match e {
                Error::NonFinite { tensor } => Error::NonFinite {
                    tensor: format!("{tensor} (epoch {}, image {})", self.epoch, record.name),
                },
                other => other,
            })?;

        let predicted_count = pred.integrate();
        self.staged[index] = Some(pred);
        Ok(StepStats {
            map_loss: m_loss,
            contrastive_loss: c_loss,
            contrastive_batches: batches,
            predicted_count,
            labeled: self.labeled[index],
            support_exhausted: exhausted,
        })
    }

    /// Folds every staged prediction into its own bank entry and clears
    /// the staging area.
    pub fn commit_bank(&mut self) -> Result<()> {
        if self.staged.iter().all(Option::is_none) {
            return Err(Error::State("no staged predictions to commit".into()));
        }
        for (i, slot) in self.staged.iter_mut().enumerate() {
            if let Some(pred) = slot.take() {
                self.bank.ema_update(i, &pred)?;
            }
        }
        self.bank.advance_epoch();
        Ok(())
    }

    /// One pass over `data` in a seeded order, then the bank update.
    pub fn train_epoch(&mut self, data: &[ImageRecord], val: &[ImageRecord]) -> Result<TrainRecord> {
        if data.len() != self.inputs.len() {
            return Err(Error::Shape {
                expected: format!("{} training images", self.inputs.len()),
                actual: format!("{}", data.len()),
            });
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut stream_rng(self.cfg.seed, TAG_SHUFFLE, self.epoch as u64, 0));

        let (mut m, mut c, mut b, mut abs) = (0.0, 0.0, 0usize, 0.0);
        for &i in &order {
            let mut rng = stream_rng(self.cfg.seed, TAG_STEP, self.epoch as u64, i as u64);
            let s = self.train_step(data, i, &mut rng)?;
            m += s.map_loss;
            c += s.contrastive_loss;
            b += s.contrastive_batches;
            abs += (s.predicted_count - data[i].count.0 as f64).abs();
        }
        if !data.is_empty() {
            self.commit_bank()?;
        }
        let n = data.len().max(1) as f64;
        let (val_mae, val_mse) = if val.is_empty() {
            (None, None)
        } else {
            let (a, s) = evaluate_counts(&self.model(), val)?;
            (Some(a), Some(s))
        };
        let rec = TrainRecord {
            epoch: self.epoch,
            steps: data.len(),
            map_loss: m / n,
            contrastive_loss: c / n,
            contrastive_batches: b as f64 / n,
            train_mae: abs / n,
            val_mae,
            val_mse,
            clamped_updates: self.bank.clamped_updates(),
            bank_snapshot: None,
        };
        self.epoch += 1;
        Ok(rec)
    }
}

/// Counting `(mae, rmse)` of a model over labelled images.
pub fn evaluate_counts(model: &DensityModel, data: &[ImageRecord]) -> Result<(f64, f64)> {
    let mut pred = Vec::with_capacity(data.len());
    for r in data {
        pred.push(model.predict(&r.image)?.integrate());
    }
    let gt: Vec<f64> = data.iter().map(|r| r.count.0 as f64).collect();
    counting_errors(&pred, &gt)
}

/// Trains for `cfg.epochs`, calling `on_epoch` after each epoch.
pub fn train(
    cfg: TrainConfig,
    data: &[ImageRecord],
    val: &[ImageRecord],
    mut on_epoch: impl FnMut(&Trainer, &mut TrainRecord) -> Result<()>,
) -> Result<Trainer> {
    let epochs = cfg.epochs;
    let mut t = Trainer::new(cfg, data)?;
    for _ in 0..epochs {
        let mut rec = t.train_epoch(data, val)?;
        log::info!(
            "epoch {} map {:.3e} contrastive {:.4} train mae {:.3}",
            rec.epoch,
            rec.map_loss,
            rec.contrastive_loss,
            rec.train_mae
        );
        on_epoch(&t, &mut rec)?;
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::records;
    use crate::pseudo::{CountAnnotation, PointSet};
    use crate::synth::{gen_dataset, SceneConfig, Split};
    use sha2::{Digest, Sha256};

    fn tiny(n: usize, seed: u64) -> Vec<ImageRecord> {
        let cfg = SceneConfig {
            size: 32,
            count_min: 0,
            count_max: 8,
            cluster_spread: 3.0,
            ..Default::default()
        };
        let data = gen_dataset(seed, n, &cfg, [1.0, 0.0, 0.0]).unwrap();
        records(&data, Split::Train)
    }

    fn quick() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            seed: 5,
            contrastive: ContrastiveConfig {
                patch: 4,
                negatives: 2,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    fn run_hash(cfg: &TrainConfig, data: &[ImageRecord]) -> String {
        let mut h = Sha256::new();
        let t = train(cfg.clone(), data, &data[..2], |_, r| {
            h.update(serde_json::to_vec(r).unwrap());
            Ok(())
        })
        .unwrap();
        h.update(t.predictor.params.encode());
        for e in t.bank.entries() {
            for v in e.values() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    #[test]
    fn map_loss_examples() {
        let z = Grid2D::zeros(2, 2).unwrap();
        let one = Grid2D::filled(2, 2, 1.0).unwrap();
        assert_eq!(map_loss(&one, &one).unwrap().0, 0.0);
        let (l, g) = map_loss(&one, &z).unwrap();
        assert_eq!(l, 1.0);
        assert!(g.values().iter().all(|&x| x == 0.5));
        assert!(map_loss(&one, &Grid2D::zeros(2, 3).unwrap()).is_err());
    }

    #[test]
    fn map_loss_gradient_matches_finite_differences() {
        let pred = Grid2D::from_vec(3, 2, vec![0.3, -1.2, 0.8, 2.0, 0.1, -0.4]).unwrap();
        let target = Grid2D::from_vec(3, 2, vec![0.5, 0.5, -0.25, 1.0, 0.0, 0.7]).unwrap();
        let (_, g) = map_loss(&pred, &target).unwrap();
        let loss64 = |p: &[f64]| {
            p.iter().zip(target.values()).map(|(a, &b)| (a - b as f64).powi(2)).sum::<f64>() / p.len() as f64
        };
        let base: Vec<f64> = pred.values().iter().map(|&x| x as f64).collect();
        for i in 0..base.len() {
            let h = 1e-6;
            let (mut up, mut dn) = (base.clone(), base.clone());
            up[i] += h;
            dn[i] -= h;
            let fd = (loss64(&up) - loss64(&dn)) / (2.0 * h);
            let an = g.values()[i] as f64;
            assert!((fd - an).abs() <= 1e-5 * fd.abs().max(1e-3), "{i}: {fd} vs {an}");
        }
    }

    #[test]
    fn empty_scene_target_is_zero_and_loss_is_mean_square() {
        let mut data = tiny(3, 1);
        data[0].count = CountAnnotation(0);
        data[0].points = Some(PointSet::default());
        let cfg = TrainConfig {
            density_scale: 1.0,
            contrastive_enabled: false,
            ..quick()
        };
        let mut t = Trainer::new(cfg, &data).unwrap();
        let pred = t.predictor.predict(&t.inputs[0]).unwrap();
        let mean_sq = pred.values().iter().map(|&x| (x as f64).powi(2)).sum::<f64>() / pred.len() as f64;
        let s = t.train_step(&data, 0, &mut stream_rng(0, 9, 0, 0)).unwrap();
        assert!((s.map_loss - mean_sq).abs() <= 1e-12 * mean_sq.max(1.0), "{} vs {mean_sq}", s.map_loss);
        let after = t.predictor.predict(&t.inputs[0]).unwrap().integrate();
        assert!(after < pred.integrate());
    }

    #[test]
    fn total_loss_is_map_loss_without_pairs() {
        let data = tiny(2, 2);
        let off = TrainConfig {
            contrastive_enabled: false,
            ..quick()
        };
        let no_pairs = TrainConfig {
            contrastive: ContrastiveConfig {
                threshold: 1.0,
                ..quick().contrastive
            },
            ..quick()
        };
        let a = Trainer::new(off, &data).unwrap().train_step(&data, 1, &mut stream_rng(1, 9, 0, 0)).unwrap();
        let mut t = Trainer::new(no_pairs, &data).unwrap();
        let b = t.train_step(&data, 1, &mut stream_rng(1, 9, 0, 0)).unwrap();
        assert_eq!(b.contrastive_batches, 0);
        assert_eq!(b.contrastive_loss, 0.0);
        assert_eq!(a.map_loss, b.map_loss);
    }

    #[test]
    fn identical_config_reproduces_bitwise() {
        let data = tiny(6, 3);
        let a = run_hash(&quick(), &data);
        assert_eq!(a, run_hash(&quick(), &data));
        let other = TrainConfig { seed: 6, ..quick() };
        assert_ne!(a, run_hash(&other, &data));
    }

    #[test]
    fn alpha_zero_keeps_bank_bit_identical() {
        let data = tiny(4, 4);
        let cfg = TrainConfig { alpha: 0.0, ..quick() };
        let before = Trainer::new(cfg.clone(), &data).unwrap().bank.entries().to_vec();
        let t = train(cfg, &data, &[], |_, _| Ok(())).unwrap();
        assert_eq!(t.bank.entries(), &before[..]);
        assert_eq!(t.bank.epoch(), 2);
    }

    #[test]
    fn empty_epoch_is_a_no_op_record() {
        let mut t = Trainer::new(quick(), &[]).unwrap();
        let r = t.train_epoch(&[], &[]).unwrap();
        assert_eq!((r.steps, r.map_loss, r.train_mae), (0, 0.0, 0.0));
        assert_eq!(r.val_mae, None);
        assert!(t.bank.is_empty());
    }

    #[test]
    fn second_commit_is_a_state_error() {
        let data = tiny(3, 5);
        let mut t = Trainer::new(quick(), &data).unwrap();
        t.train_step(&data, 2, &mut stream_rng(0, 9, 0, 0)).unwrap();
        let before = t.bank.entries().to_vec();
        t.commit_bank().unwrap();
        assert_eq!(t.bank.entries()[0], before[0]);
        assert_ne!(t.bank.entries()[2], before[2]);
        assert!(matches!(t.commit_bank(), Err(Error::State(_))));
    }

    #[test]
    fn labeled_subset_is_exact_and_seeded() {
        let a = labeled_subset(200, 0.05, 11);
        assert_eq!(a.len(), 10);
        assert_eq!(a, labeled_subset(200, 0.05, 11));
        assert_ne!(a, labeled_subset(200, 0.05, 12));
        assert!(a.windows(2).all(|w| w[0] < w[1]) && a[9] < 200);

        // the same subset recomputed: first ten of a seeded shuffle
        let mut idx: Vec<usize> = (0..200).collect();
        idx.shuffle(&mut stream_rng(11, TAG_LABELED, 0, 0));
        let mut want = idx[..10].to_vec();
        want.sort_unstable();
        assert_eq!(a, want);
        assert!(labeled_subset(200, 0.0, 11).is_empty());
        assert_eq!(labeled_subset(200, 1.0, 11).len(), 200);
    }

    #[test]
    fn fully_labeled_ignores_the_bank() {
        let data = tiny(4, 6);
        let base = TrainConfig {
            labeled_fraction: 1.0,
            ..quick()
        };
        let blob = TrainConfig {
            bank_init: BankInit::Blob,
            ..base.clone()
        };
        assert_eq!(run_hash_params(&base, &data), run_hash_params(&blob, &data));
        let partial = TrainConfig {
            labeled_fraction: 0.5,
            ..base.clone()
        };
        assert_ne!(run_hash_params(&partial, &data), run_hash_params(
            &TrainConfig { bank_init: BankInit::Blob, ..partial.clone() },
            &data
        ));
    }

    fn run_hash_params(cfg: &TrainConfig, data: &[ImageRecord]) -> String {
        train(cfg.clone(), data, &[], |_, _| Ok(())).unwrap().predictor.params.checksum()
    }

    #[test]
    fn labeled_images_need_points() {
        let mut data = tiny(2, 7);
        data[0].points = None;
        data[1].points = None;
        let cfg = TrainConfig {
            labeled_fraction: 0.5,
            ..quick()
        };
        assert!(matches!(Trainer::new(cfg, &data), Err(Error::Param { .. })));
    }

    #[test]
    fn rejects_bad_config() {
        for cfg in [
            TrainConfig { learning_rate: 0.0, ..quick() },
            TrainConfig { tau: -1.0, ..quick() },
            TrainConfig { alpha: 1.5, ..quick() },
            TrainConfig { labeled_fraction: -0.1, ..quick() },
            TrainConfig { bank_init: BankInit::External, ..quick() },
        ] {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
    }

    #[test]
    fn model_save_load_roundtrip() {
        let data = tiny(2, 8);
        let m = Trainer::new(quick(), &data).unwrap().model();
        let dir = tempfile::tempdir().unwrap();
        m.save(dir.path()).unwrap();
        assert_eq!(DensityModel::load(dir.path()).unwrap(), m);
    }

    #[test]
    fn output_bias_starts_at_mean_density() {
        let mut p = ModelParams::init(0);
        set_output_bias(&mut p, 0.004);
        let b = p.tensor("head.bias").unwrap().data[0] as f64;
        assert!(((1.0 + b.exp()).ln() - 0.004).abs() < 1e-6);
    }
}
