//! Dataset directories.
//!
//! ```text
//! <root>/manifest.json              generator manifest (synthetic data only)
//! <root>/<split>/counts.csv         name,count
//! <root>/<split>/images/<name>.c2dg
//! <root>/<split>/images/<name>.pgm  optional preview
//! <root>/<split>/points/<name>.csv  optional head positions
//! <root>/<split>/density/<name>.c2dg optional ground-truth density
//! ```
//!
//! Externally converted real data only needs `counts.csv` and `images/`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::codec;
use crate::error::{Error, Result};
use crate::grid::Grid2D;
use crate::pseudo::{CountAnnotation, PointSet};
use crate::synth::{DatasetManifest, GeneratedDataset, Split, SyntheticScene};

pub const DATASET_MANIFEST: &str = "manifest.json";
pub const COUNTS_FILE: &str = "counts.csv";

#[derive(Clone, Debug, PartialEq)]
pub struct ImageRecord {
    pub name: String,
    pub image: Grid2D,
    pub count: CountAnnotation,
    pub points: Option<PointSet>,
    pub density: Option<Grid2D>,
}

impl ImageRecord {
    pub fn from_scene(name: String, s: &SyntheticScene) -> Self {
        ImageRecord {
            name,
            image: s.image.clone(),
            count: s.count,
            points: Some(s.gt_points.clone()),
            density: Some(s.gt_density.clone()),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CountRow {
    name: String,
    count: usize,
}

pub fn split_dir(root: &Path, split: Split) -> PathBuf {
    root.join(split.name())
}

/// Records of one split of a generated dataset, named as on disk.
pub fn records(data: &GeneratedDataset, split: Split) -> Vec<ImageRecord> {
    let names = data.manifest.scenes.iter().filter(|e| e.split == split).map(|e| e.name.clone());
    names.zip(data.split(split)).map(|(n, s)| ImageRecord::from_scene(n, s)).collect()
}

pub fn write_dataset(root: &Path, data: &GeneratedDataset, previews: bool) -> Result<()> {
    for split in Split::ALL {
        write_split(&split_dir(root, split), &records(data, split), previews)?;
    }
    let json = serde_json::to_string_pretty(&data.manifest).expect("manifest serializes");
    let path = root.join(DATASET_MANIFEST);
    fs::write(&path, json).map_err(Error::io(&path))
}

pub fn write_split(dir: &Path, items: &[ImageRecord], previews: bool) -> Result<()> {
    for sub in ["images", "points", "density"] {
        let d = dir.join(sub);
        fs::create_dir_all(&d).map_err(Error::io(&d))?;
    }
    let counts_path = dir.join(COUNTS_FILE);
    let mut w = csv::Writer::from_path(&counts_path).map_err(|e| csv_err(&counts_path, e))?;
    for it in items {
        codec::save_grid(&it.image, &dir.join("images").join(format!("{}.c2dg", it.name)))?;
        if previews {
            codec::save_pgm16(&it.image, &dir.join("images").join(format!("{}.pgm", it.name)))?;
        }
        if let Some(p) = &it.points {
            p.save_csv(&dir.join("points").join(format!("{}.csv", it.name)))?;
        }
        if let Some(d) = &it.density {
            codec::save_grid(d, &dir.join("density").join(format!("{}.c2dg", it.name)))?;
        }
        w.serialize(CountRow {
            name: it.name.clone(),
            count: it.count.0,
        })
        .map_err(|e| csv_err(&counts_path, e))?;
    }
    w.flush().map_err(Error::io(&counts_path))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Integrity {
        path: path.to_path_buf(),
        reason: e.to_string(),
    }
}

pub fn load_manifest(root: &Path) -> Result<DatasetManifest> {
    let path = root.join(DATASET_MANIFEST);
    let text = fs::read_to_string(&path).map_err(Error::io(&path))?;
    serde_json::from_str(&text).map_err(Error::json(&path))
}

/// Loads a split. Points and density files are picked up when present.
pub fn load_split(root: &Path, split: Split) -> Result<Vec<ImageRecord>> {
    load_split_dir(&split_dir(root, split))
}

pub fn load_split_dir(dir: &Path) -> Result<Vec<ImageRecord>> {
    let counts_path = dir.join(COUNTS_FILE);
    if !counts_path.is_file() {
        return Err(Error::integrity(&counts_path, "missing counts file"));
    }
    let mut rdr = csv::Reader::from_path(&counts_path).map_err(|e| csv_err(&counts_path, e))?;
    let mut out = Vec::new();
    for row in rdr.deserialize::<CountRow>() {
        let row = row.map_err(|e| csv_err(&counts_path, e))?;
        let image = codec::load_raster(&dir.join("images").join(format!("{}.c2dg", row.name)))?;
        let pts_path = dir.join("points").join(format!("{}.csv", row.name));
        let points = if pts_path.is_file() {
            let p = PointSet::load_csv(&pts_path)?;
            p.check_inside(image.width(), image.height())?;
            if p.len() != row.count {
                return Err(Error::integrity(
                    &pts_path,
                    format!("{} points but counts.csv says {}", p.len(), row.count),
                ));
            }
            Some(p)
        } else {
            None
        };
        let den_path = dir.join("density").join(format!("{}.c2dg", row.name));
        let density = if den_path.is_file() {
            let d = codec::load_grid(&den_path)?;
            image.check_same_shape(&d).map_err(|e| Error::integrity(&den_path, e.to_string()))?;
            Some(d)
        } else {
            None
        };
        out.push(ImageRecord {
            name: row.name,
            image,
            count: CountAnnotation(row.count),
            points,
            density,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{gen_dataset, SceneConfig};

    #[test]
    fn roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SceneConfig {
            size: 32,
            ..Default::default()
        };
        let data = gen_dataset(3, 6, &cfg, [0.5, 0.0, 0.5]).unwrap();
        write_dataset(dir.path(), &data, true).unwrap();
        assert_eq!(load_manifest(dir.path()).unwrap(), data.manifest);
        for split in Split::ALL {
            assert_eq!(load_split(dir.path(), split).unwrap(), records(&data, split));
        }

        let img = dir.path().join("train/images").join(format!("{}.c2dg", records(&data, Split::Train)[0].name));
        fs::remove_file(&img).unwrap();
        let err = load_split(dir.path(), Split::Train).unwrap_err();
        assert!(err.to_string().contains(img.file_name().unwrap().to_str().unwrap()), "{err}");
    }
}
