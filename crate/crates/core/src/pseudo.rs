//! Pseudo-density maps from a prior and a count.
//!
//! A count `y` is turned into `y` distinct pixel locations drawn from the
//! prior without replacement, then each location is rendered as a Gaussian
//! kernel of unit mass, so the rendered map integrates to the count.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bank::ProbabilityPrior;
use crate::error::{Error, Result};
use crate::grid::Grid2D;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Point {
    pub u: usize,
    pub v: usize,
}

impl fmt::Display for Point {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.u, self.v)
    }
}

/// Distinct pixel locations.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PointSet(Vec<Point>);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CountAnnotation(pub usize);

impl PointSet {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(points.len());
        for p in &points {
            if !seen.insert(*p) {
                return Err(Error::param("points", format!("duplicate point {p}")));
            }
        }
        Ok(PointSet(points))
    }

    pub fn empty() -> Self {
        PointSet(Vec::new())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn points(&self) -> &[Point] {
        &self.0
    }

    pub fn iter(&self) -> impl Iterator<Item = &Point> {
        self.0.iter()
    }

    pub fn check_inside(&self, width: usize, height: usize) -> Result<()> {
        match self.0.iter().find(|p| p.u >= width || p.v >= height) {
            Some(p) => Err(Error::Bounds {
                region: format!("point {p}"),
                width,
                height,
            }),
            None => Ok(()),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("u,v\n");
        for p in &self.0 {
            out.push_str(&format!("{},{}\n", p.u, p.v));
        }
        out
    }

    /// Parses `u,v` CSV with that exact header.
    pub fn from_csv(text: &str) -> Result<Self> {
        const FMT: &str = "points csv";
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let headers = reader
            .headers()
            .map_err(|e| Error::format(FMT, "header", e.to_string()))?;
        if headers.len() != 2 || &headers[0] != "u" || &headers[1] != "v" {
            return Err(Error::format(FMT, "header", "expected \"u,v\""));
        }
        let mut points = Vec::new();
        for (row, rec) in reader.records().enumerate() {
            let rec = rec.map_err(|e| Error::format(FMT, format!("row {}", row + 1), e.to_string()))?;
            if rec.len() != 2 {
                return Err(Error::format(FMT, format!("row {}", row + 1), "expected two fields"));
            }
            let parse = |s: &str, name: &str| {
                s.parse::<usize>()
                    .map_err(|e| Error::format(FMT, format!("row {} {name}", row + 1), e.to_string()))
            };
            points.push(Point {
                u: parse(&rec[0], "u")?,
                v: parse(&rec[1], "v")?,
            });
        }
        PointSet::new(points).map_err(|e| Error::format(FMT, "points", e.to_string()))
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(Error::io(path))
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
        Self::from_csv(&text)
    }
}

/// Points drawn by one of the samplers, with how they were obtained.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub points: PointSet,
    /// Points drawn according to prior mass.
    pub weighted: usize,
    /// Set when the count exceeded the prior's support (or the grid) and the
    /// remainder had to be filled without regard to the prior.
    pub support_exhausted: bool,
}

/// Complete binary tree of partial sums over pixel masses. Parents are
/// recomputed from their children on every update, so removals leave no
/// rounding residue behind.
struct SumTree {
    leaves: usize,
    nodes: Vec<f64>,
}

impl SumTree {
    fn new(weights: impl ExactSizeIterator<Item = f64>) -> Self {
        let leaves = weights.len().next_power_of_two().max(1);
        let mut nodes = vec![0.0; 2 * leaves];
        for (i, w) in weights.enumerate() {
            nodes[leaves + i] = w;
        }
        for i in (1..leaves).rev() {
            nodes[i] = nodes[2 * i] + nodes[2 * i + 1];
        }
        SumTree { leaves, nodes }
    }

    fn total(&self) -> f64 {
        self.nodes[1]
    }

    fn clear(&mut self, index: usize) {
        let mut i = self.leaves + index;
        self.nodes[i] = 0.0;
        while i > 1 {
            i /= 2;
            self.nodes[i] = self.nodes[2 * i] + self.nodes[2 * i + 1];
        }
    }

    /// Leaf whose cumulative interval contains `target`; never lands on a
    /// zero-weight leaf while the total is positive.
    fn find(&self, mut target: f64) -> usize {
        let mut i = 1;
        while i < self.leaves {
            let (l, r) = (self.nodes[2 * i], self.nodes[2 * i + 1]);
            if (target < l && l > 0.0) || r <= 0.0 {
                i *= 2;
            } else {
                target -= l;
                i = 2 * i + 1;
            }
        }
        i - self.leaves
    }
}

/// Sequential weighted sampling without replacement: each draw picks an
/// unchosen pixel with probability proportional to its mass among the
/// pixels still available.
///
/// When `y` exceeds the number of positive-mass pixels, the whole support
/// is taken and the rest is drawn uniformly from the remaining pixels, with
/// `support_exhausted` set. At most `width * height` points are returned.
pub fn sample_locations<R: Rng + ?Sized>(prior: &ProbabilityPrior, y: CountAnnotation, rng: &mut R) -> Sample {
    let map = prior.map();
    let w = map.width();
    let n = map.len();
    let mut tree = SumTree::new(map.values().iter().map(|&m| m.max(0.0) as f64));
    let to_point = |i: usize| Point { u: i % w, v: i / w };

    let support = prior.support();
    let weighted = y.0.min(support);
    let mut chosen = Vec::with_capacity(y.0.min(n));
    let mut taken = vec![false; n];
    for _ in 0..weighted {
        let target = rng.gen::<f64>() * tree.total();
        let i = tree.find(target);
        debug_assert!(!taken[i]);
        taken[i] = true;
        tree.clear(i);
        chosen.push(i);
    }

    let exhausted = y.0 > support;
    if exhausted {
        let mut rest: Vec<usize> = (0..n).filter(|&i| !taken[i]).collect();
        let extra = (y.0 - weighted).min(rest.len());
        // partial Fisher-Yates over the unchosen pixels
        for k in 0..extra {
            let j = rng.gen_range(k..rest.len());
            rest.swap(k, j);
            chosen.push(rest[k]);
        }
    }

    Sample {
        points: PointSet(chosen.into_iter().map(to_point).collect()),
        weighted,
        support_exhausted: exhausted,
    }
}

/// The `y` pixels of largest mass, ties broken by row-major index.
pub fn top_k_locations(prior: &ProbabilityPrior, y: CountAnnotation) -> Sample {
    let map = prior.map();
    let w = map.width();
    let mut order: Vec<usize> = (0..map.len()).collect();
    let m = map.values();
    order.sort_by(|&a, &b| m[b].total_cmp(&m[a]).then(a.cmp(&b)));
    let k = y.0.min(order.len());
    let support = prior.support();
    Sample {
        points: PointSet(order[..k].iter().map(|&i| Point { u: i % w, v: i / w }).collect()),
        weighted: k.min(support),
        support_exhausted: y.0 > order.len(),
    }
}

/// Renders each point as a Gaussian of radius `ceil(3 sigma)`, clipped to
/// the grid and renormalized so every point contributes exactly unit mass.
pub fn render_pseudo_density(points: &PointSet, sigma: f64, width: usize, height: usize) -> Result<Grid2D> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::param("sigma", format!("must be > 0, got {sigma}")));
    }
    let mut out = vec![0.0f64; Grid2D::zeros(width, height)?.len()];
    points.check_inside(width, height)?;

    let r = (3.0 * sigma).ceil() as usize;
    let kernel: Vec<f64> = (0..=2 * r)
        .map(|i| {
            let d = i as f64 - r as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();

    for p in points.iter() {
        let u_lo = p.u.saturating_sub(r);
        let u_hi = (p.u + r).min(width - 1);
        let v_lo = p.v.saturating_sub(r);
        let v_hi = (p.v + r).min(height - 1);
        let ku = &kernel[u_lo + r - p.u..=u_hi + r - p.u];
        let kv = &kernel[v_lo + r - p.v..=v_hi + r - p.v];
        let norm = ku.iter().sum::<f64>() * kv.iter().sum::<f64>();
        for (dv, &wv) in kv.iter().enumerate() {
            let row = (v_lo + dv) * width;
            for (du, &wu) in ku.iter().enumerate() {
                out[row + u_lo + du] += wu * wv / norm;
            }
        }
    }
    Grid2D::from_vec(width, height, out.into_iter().map(|x| x as f32).collect())
}
