//! Historical map bank: one exponentially averaged density map per training
//! image, used as the sampling prior for that image's pseudo-labels.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::codec;
use crate::error::{Error, Result};
use crate::grid::Grid2D;
use crate::saliency::SaliencyMap;

pub const BANK_FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

pub fn entry_file_name(i: usize) -> String {
    format!("entry_{i:06}.c2dg")
}

#[derive(Clone, Debug, PartialEq)]
pub struct HistoricalMapBank {
    entries: Vec<Grid2D>,
    alpha: f64,
    epoch: u64,
    clamped_updates: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BankManifest {
    pub format_version: u32,
    pub n: usize,
    pub alpha: f64,
    pub epoch: u64,
    pub height: usize,
    pub width: usize,
}

impl BankManifest {
    pub fn from_json(text: &str) -> std::result::Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

/// Per-pixel sampling mass: nonnegative, sums to one.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityPrior {
    map: Grid2D,
    degenerate: bool,
}

fn check_alpha(alpha: f64) -> Result<()> {
    if (0.0..=1.0).contains(&alpha) {
        Ok(())
    } else {
        Err(Error::param("alpha", format!("must lie in [0, 1], got {alpha}")))
    }
}

impl HistoricalMapBank {
    /// Entry `i` starts as saliency map `i`; epoch 0.
    pub fn from_saliency(maps: Vec<SaliencyMap>, alpha: f64) -> Result<Self> {
        Self::from_entries(maps.into_iter().map(SaliencyMap::into_grid).collect(), alpha)
    }

    pub fn from_entries(entries: Vec<Grid2D>, alpha: f64) -> Result<Self> {
        check_alpha(alpha)?;
        if let Some(first) = entries.first() {
            for (i, e) in entries.iter().enumerate() {
                if !first.same_shape(e) {
                    return Err(Error::param(
                        "entries",
                        format!(
                            "entry {i} is {}x{}, expected {}x{}",
                            e.width(),
                            e.height(),
                            first.width(),
                            first.height()
                        ),
                    ));
                }
                if e.min() < 0.0 {
                    return Err(Error::param("entries", format!("entry {i} has negative values")));
                }
            }
        }
        Ok(HistoricalMapBank {
            entries,
            alpha,
            epoch: 0,
            clamped_updates: 0,
        })
    }

    /// Every entry is the same centred disk of ones (`du^2 + dv^2 <= r^2`).
    pub fn centred_blob(n: usize, width: usize, height: usize, radius: usize, alpha: f64) -> Result<Self> {
        if 2 * radius >= width.min(height) {
            return Err(Error::param(
                "radius",
                format!("{radius} must be below half of min({width}, {height})"),
            ));
        }
        let (cu, cv) = (width / 2, height / 2);
        let r2 = radius * radius;
        let disk = Grid2D::from_fn(width, height, |u, v| {
            let (du, dv) = (u.abs_diff(cu), v.abs_diff(cv));
            if du * du + dv * dv <= r2 {
                1.0
            } else {
                0.0
            }
        })?;
        Self::from_entries(vec![disk; n], alpha)
    }

    /// All-zero entries: priors fall back to uniform until the first update.
    pub fn zeros(n: usize, width: usize, height: usize, alpha: f64) -> Result<Self> {
        Self::from_entries(vec![Grid2D::zeros(width, height)?; n], alpha)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn advance_epoch(&mut self) {
        self.epoch += 1;
    }

    /// Number of updates in which negative predictions were clamped to zero.
    pub fn clamped_updates(&self) -> u64 {
        self.clamped_updates
    }

    pub fn entries(&self) -> &[Grid2D] {
        &self.entries
    }

    pub fn entry(&self, i: usize) -> Result<&Grid2D> {
        self.entries.get(i).ok_or_else(|| {
            Error::param("index", format!("entry {i} out of range for bank of {}", self.len()))
        })
    }

    /// `entry_i <- alpha * predicted + (1 - alpha) * entry_i`.
    pub fn ema_update(&mut self, i: usize, predicted: &Grid2D) -> Result<()> {
        let alpha = self.alpha;
        let entry = self.entry(i)?;
        entry.check_same_shape(predicted)?;
        let mut clamped = false;
        let values = entry
            .values()
            .iter()
            .zip(predicted.values())
            .map(|(&old, &new)| {
                let new = if new < 0.0 {
                    clamped = true;
                    0.0
                } else {
                    new
                };
                (alpha * new as f64 + (1.0 - alpha) * old as f64) as f32
            })
            .collect();
        if clamped {
            self.clamped_updates += 1;
            log::warn!("negative prediction values clamped before updating bank entry {i}");
        }
        let (w, h) = (predicted.width(), predicted.height());
        self.entries[i] = Grid2D::from_vec(w, h, values)?;
        Ok(())
    }

    pub fn make_prior(&self, i: usize, blur_sigma: f64) -> Result<ProbabilityPrior> {
        ProbabilityPrior::from_density(self.entry(i)?, blur_sigma)
    }

    pub fn manifest(&self) -> BankManifest {
        let (height, width) = self.entries.first().map_or((0, 0), Grid2D::shape);
        BankManifest {
            format_version: BANK_FORMAT_VERSION,
            n: self.len(),
            alpha: self.alpha,
            epoch: self.epoch,
            height,
            width,
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(Error::io(dir))?;
        for (i, e) in self.entries.iter().enumerate() {
            codec::save_grid(e, &dir.join(entry_file_name(i)))?;
        }
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&self.manifest()).map_err(Error::json(&path))?;
        fs::write(&path, text).map_err(Error::io(&path))
    }

    /// Loads a bank directory, strictly: the set of entry files must be
    /// exactly `entry_000000 .. entry_{n-1}`.
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&manifest_path).map_err(Error::io(&manifest_path))?;
        let m = BankManifest::from_json(&text)
            .map_err(|e| Error::integrity(&manifest_path, e.to_string()))?;
        if m.format_version != BANK_FORMAT_VERSION {
            return Err(Error::integrity(
                &manifest_path,
                format!("unsupported format version {}", m.format_version),
            ));
        }
        check_alpha(m.alpha).map_err(|e| Error::integrity(&manifest_path, e.to_string()))?;

        let expected: BTreeSet<String> = (0..m.n).map(entry_file_name).collect();
        let mut found = BTreeSet::new();
        for item in fs::read_dir(dir).map_err(Error::io(dir))? {
            let name = item.map_err(Error::io(dir))?.file_name();
            let name = name.to_string_lossy();
            if name.starts_with("entry_") && name.ends_with(".c2dg") {
                found.insert(name.into_owned());
            }
        }
        if let Some(missing) = expected.difference(&found).next() {
            return Err(Error::integrity(
                dir.join(missing),
                format!("entry listed by manifest (n = {}) is missing", m.n),
            ));
        }
        if let Some(extra) = found.difference(&expected).next() {
            return Err(Error::integrity(
                dir.join(extra),
                format!("entry not covered by manifest (n = {})", m.n),
            ));
        }

        let mut entries = Vec::with_capacity(m.n);
        for i in 0..m.n {
            let path: PathBuf = dir.join(entry_file_name(i));
            let grid = codec::load_grid(&path).map_err(|e| Error::integrity(&path, e.to_string()))?;
            if grid.shape() != (m.height, m.width) {
                return Err(Error::integrity(
                    &path,
                    format!(
                        "shape {}x{} differs from manifest {}x{}",
                        grid.width(),
                        grid.height(),
                        m.width,
                        m.height
                    ),
                ));
            }
            if grid.min() < 0.0 {
                return Err(Error::integrity(&path, "negative bank values"));
            }
            entries.push(grid);
        }
        Ok(HistoricalMapBank {
            entries,
            alpha: m.alpha,
            epoch: m.epoch,
            clamped_updates: 0,
        })
    }
}

impl ProbabilityPrior {
    /// Max-normalize, Gaussian-smooth, clamp, then divide by the total.
    /// An all-zero map yields the uniform prior, flagged as degenerate.
    pub fn from_density(map: &Grid2D, blur_sigma: f64) -> Result<Self> {
        let normalized = map.normalize_max();
        let smooth = normalized.gaussian_blur(blur_sigma)?;
        let total: f64 = smooth.values().iter().map(|&x| x.max(0.0) as f64).sum();
        let (w, h) = (map.width(), map.height());
        if normalized.max() <= 0.0 || total <= 0.0 {
            let p = 1.0 / (w * h) as f32;
            return Ok(ProbabilityPrior {
                map: Grid2D::filled(w, h, p)?,
                degenerate: true,
            });
        }
        let values = smooth
            .values()
            .iter()
            .map(|&x| (x.max(0.0) as f64 / total) as f32)
            .collect();
        Ok(ProbabilityPrior {
            map: Grid2D::from_vec(w, h, values)?,
            degenerate: false,
        })
    }

    /// Wraps an explicit mass function. Values must be nonnegative and sum
    /// to one within 1e-6.
    pub fn from_masses(map: Grid2D) -> Result<Self> {
        if map.min() < 0.0 {
            return Err(Error::param("prior", "negative mass"));
        }
        let total = map.integrate();
        if (total - 1.0).abs() > 1e-6 {
            return Err(Error::param("prior", format!("masses sum to {total}, not 1")));
        }
        Ok(ProbabilityPrior {
            map,
            degenerate: false,
        })
    }

    pub fn map(&self) -> &Grid2D {
        &self.map
    }

    pub fn is_degenerate(&self) -> bool {
        self.degenerate
    }

    pub fn width(&self) -> usize {
        self.map.width()
    }

    pub fn height(&self) -> usize {
        self.map.height()
    }

    /// Number of pixels with positive mass.
    pub fn support(&self) -> usize {
        self.map.values().iter().filter(|&&x| x > 0.0).count()
    }
}
