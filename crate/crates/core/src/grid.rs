//! Single-channel rasters and the density-map arithmetic built on them.
//!
//! Values are `f32`, stored row-major and indexed `(u, v)` with `u` the
//! column and `v` the row. Every sum is accumulated in `f64` in row-major
//! order, so integrating a map and summing the counts of an exact tiling
//! visit pixels in the same order.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Grid2D {
    width: usize,
    height: usize,
    values: Vec<f32>,
}

impl fmt::Debug for Grid2D {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Grid2D")
            .field("width", &self.width)
            .field("height", &self.height)
            .field("sum", &self.integrate())
            .finish()
    }
}

/// Axis-aligned pixel rectangle; `(u0, v0)` is the inclusive top-left corner.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Rect {
    pub u0: usize,
    pub v0: usize,
    pub width: usize,
    pub height: usize,
}

impl Rect {
    pub fn new(u0: usize, v0: usize, width: usize, height: usize) -> Self {
        Rect {
            u0,
            v0,
            width,
            height,
        }
    }

    pub fn area(&self) -> usize {
        self.width * self.height
    }

    pub fn fits(&self, width: usize, height: usize) -> bool {
        self.width >= 1
            && self.height >= 1
            && self.u0.checked_add(self.width).is_some_and(|e| e <= width)
            && self.v0.checked_add(self.height).is_some_and(|e| e <= height)
    }
}

impl fmt::Display for Rect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[u={}..{}, v={}..{}]",
            self.u0,
            self.u0.saturating_add(self.width),
            self.v0,
            self.v0.saturating_add(self.height)
        )
    }
}

impl Grid2D {
    pub fn zeros(width: usize, height: usize) -> Result<Self> {
        Self::filled(width, height, 0.0)
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Result<Self> {
        check_dims(width, height)?;
        if !value.is_finite() {
            return Err(Error::NonFinite {
                tensor: "fill value".into(),
            });
        }
        Ok(Grid2D {
            width,
            height,
            values: vec![value; width * height],
        })
    }

    /// Builds a grid from row-major values. Rejects empty shapes, length
    /// mismatches, and non-finite values.
    pub fn from_vec(width: usize, height: usize, values: Vec<f32>) -> Result<Self> {
        check_dims(width, height)?;
        if values.len() != width * height {
            return Err(Error::Shape {
                expected: format!("{} values for {width}x{height}", width * height),
                actual: format!("{} values", values.len()),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                tensor: "grid values".into(),
            });
        }
        Ok(Grid2D {
            width,
            height,
            values,
        })
    }

    /// Builds a grid from nested rows, `rows[v][u]`.
    pub fn from_rows(rows: &[&[f32]]) -> Result<Self> {
        let height = rows.len();
        let width = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::param("rows", "ragged rows"));
        }
        Self::from_vec(width, height, rows.concat())
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> f32,
    ) -> Result<Self> {
        check_dims(width, height)?;
        let mut values = Vec::with_capacity(width * height);
        for v in 0..height {
            for u in 0..width {
                values.push(f(u, v));
            }
        }
        Self::from_vec(width, height, values)
    }

    /// Internal constructor for values produced by arithmetic on finite
    /// inputs. Non-finite results are still rejected in debug builds.
    pub(crate) fn from_raw(width: usize, height: usize, values: Vec<f32>) -> Self {
        debug_assert_eq!(values.len(), width * height);
        debug_assert!(values.iter().all(|v| v.is_finite()));
        Grid2D {
            width,
            height,
            values,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn get(&self, u: usize, v: usize) -> f32 {
        self.values[v * self.width + u]
    }

    pub fn same_shape(&self, other: &Grid2D) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub(crate) fn check_same_shape(&self, other: &Grid2D) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Shape {
                expected: format!("{}x{}", self.width, self.height),
                actual: format!("{}x{}", other.width, other.height),
            })
        }
    }

    pub fn max(&self) -> f32 {
        self.values.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn min(&self) -> f32 {
        self.values.iter().copied().fold(f32::INFINITY, f32::min)
    }

    /// Row-major index and value of the largest pixel; first occurrence wins.
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, &x) in self.values.iter().enumerate() {
            if x > self.values[best] {
                best = i;
            }
        }
        (best % self.width, best / self.width)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Result<Grid2D> {
        Grid2D::from_vec(
            self.width,
            self.height,
            self.values.iter().map(|&x| f(x)).collect(),
        )
    }

    /// `a * self + other`, elementwise.
    pub fn axpy(&self, a: f32, other: &Grid2D) -> Result<Grid2D> {
        self.check_same_shape(other)?;
        Grid2D::from_vec(
            self.width,
            self.height,
            self.values
                .iter()
                .zip(&other.values)
                .map(|(&x, &y)| a * x + y)
                .collect(),
        )
    }

    /// Total mass of the map: the predicted count of a density map.
    pub fn integrate(&self) -> f64 {
        self.values.iter().fold(0.0f64, |acc, &x| acc + x as f64)
    }

    /// Mass inside `region`, accumulated row by row.
    pub fn subregion_count(&self, region: Rect) -> Result<f64> {
        if !region.fits(self.width, self.height) {
            return Err(Error::Bounds {
                region: region.to_string(),
                width: self.width,
                height: self.height,
            });
        }
        let mut acc = 0.0f64;
        for v in region.v0..region.v0 + region.height {
            let row = v * self.width;
            for &x in &self.values[row + region.u0..row + region.u0 + region.width] {
                acc += x as f64;
            }
        }
        Ok(acc)
    }

    /// Divides every pixel by the map maximum. An all-zero (or non-positive)
    /// map is returned unchanged as zeros.
    pub fn normalize_max(&self) -> Grid2D {
        let max = self.max();
        if max <= 0.0 {
            return Grid2D::from_raw(self.width, self.height, vec![0.0; self.len()]);
        }
        let values = self
            .values
            .iter()
            .map(|&x| (x.max(0.0) / max).min(1.0))
            .collect();
        Grid2D::from_raw(self.width, self.height, values)
    }

    /// Separable Gaussian convolution, kernel radius `ceil(3 sigma)`,
    /// reflect border (edge sample repeated, `c b a | a b c`).
    pub fn gaussian_blur(&self, sigma: f64) -> Result<Grid2D> {
        let kernel = gaussian_kernel_1d(sigma)?;
        let r = (kernel.len() / 2) as isize;
        let (w, h) = (self.width, self.height);

        let mut tmp = vec![0.0f64; w * h];
        for v in 0..h {
            let row = &self.values[v * w..(v + 1) * w];
            for u in 0..w {
                let mut acc = 0.0f64;
                for (k, &kw) in kernel.iter().enumerate() {
                    let src = reflect(u as isize + k as isize - r, w);
                    acc += kw * row[src] as f64;
                }
                tmp[v * w + u] = acc;
            }
        }

        let mut out = vec![0.0f32; w * h];
        for v in 0..h {
            for u in 0..w {
                let mut acc = 0.0f64;
                for (k, &kw) in kernel.iter().enumerate() {
                    let src = reflect(v as isize + k as isize - r, h);
                    acc += kw * tmp[src * w + u];
                }
                out[v * w + u] = acc as f32;
            }
        }
        Ok(Grid2D::from_raw(w, h, out))
    }

    /// 1 where the pixel is strictly above `t`, else 0.
    pub fn threshold_binarize(&self, t: f32) -> Grid2D {
        let values = self
            .values
            .iter()
            .map(|&x| if x > t { 1.0 } else { 0.0 })
            .collect();
        Grid2D::from_raw(self.width, self.height, values)
    }
}

fn check_dims(width: usize, height: usize) -> Result<()> {
    if width == 0 || height == 0 {
        return Err(Error::param(
            "shape",
            format!("grid must be at least 1x1, got {width}x{height}"),
        ));
    }
    if width.checked_mul(height).is_none() {
        return Err(Error::param("shape", "grid too large"));
    }
    Ok(())
}

/// Folds an out-of-range index back into `[0, n)` by half-sample symmetric
/// reflection, for any offset.
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

/// Normalized 1-D Gaussian weights for offsets `-r..=r`, `r = ceil(3 sigma)`.
pub fn gaussian_kernel_1d(sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::param("sigma", format!("must be > 0, got {sigma}")));
    }
    let r = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-r..=r)
        .map(|d| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|x| *x /= total);
    Ok(k)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Grid2D {
        Grid2D::from_rows(&[&[0.5, 1.5], &[2.0, 0.0]]).unwrap()
    }

    #[test]
    fn integrate_examples() {
        assert_eq!(Grid2D::zeros(4, 4).unwrap().integrate(), 0.0);
        assert_eq!(Grid2D::filled(2, 3, 1.0).unwrap().integrate(), 6.0);
        let oracle: f64 = [0.5f64, 1.5, 2.0, 0.0].iter().sum();
        assert_eq!(sample().integrate(), oracle);
        assert_eq!(oracle, 4.0);
    }

    #[test]
    fn subregion_examples() {
        let m = sample();
        assert_eq!(m.subregion_count(Rect::new(0, 0, 2, 2)).unwrap(), m.integrate());
        assert_eq!(m.subregion_count(Rect::new(0, 0, 1, 1)).unwrap(), 0.5);
        let tiles: f64 = [(0, 0), (1, 0), (0, 1), (1, 1)]
            .iter()
            .map(|&(u, v)| m.subregion_count(Rect::new(u, v, 1, 1)).unwrap())
            .sum();
        assert_eq!(tiles, 4.0);
        assert_eq!(tiles, m.integrate());
    }

    #[test]
    fn subregion_out_of_bounds() {
        let m = sample();
        assert!(matches!(
            m.subregion_count(Rect::new(1, 1, 2, 1)),
            Err(Error::Bounds { .. })
        ));
        assert!(m.subregion_count(Rect::new(0, 0, 0, 1)).is_err());
        assert!(m.subregion_count(Rect::new(usize::MAX, 0, 2, 1)).is_err());
    }

    #[test]
    fn normalize_max_examples() {
        let m = Grid2D::from_rows(&[&[2.0, 4.0], &[0.0, 1.0]]).unwrap();
        assert_eq!(m.normalize_max().values(), &[0.5, 1.0, 0.0, 0.25]);
        let z = Grid2D::zeros(3, 3).unwrap();
        assert_eq!(z.normalize_max(), z);
        let n = Grid2D::from_rows(&[&[0.25, 1.0], &[0.0, 0.5]]).unwrap();
        assert_eq!(n.normalize_max(), n);
    }

    #[test]
    fn blur_constant_map_is_fixed() {
        let m = Grid2D::filled(7, 5, 0.3).unwrap();
        let b = m.gaussian_blur(1.5).unwrap();
        for &x in b.values() {
            assert!((x - 0.3).abs() < 1e-6);
        }
    }

    /// Dense 2-D convolution with the outer-product kernel, zero outside.
    fn dense_blur(m: &Grid2D, sigma: f64) -> Vec<f64> {
        let k = gaussian_kernel_1d(sigma).unwrap();
        let r = (k.len() / 2) as isize;
        let (w, h) = (m.width() as isize, m.height() as isize);
        let mut out = vec![0.0; (w * h) as usize];
        for v in 0..h {
            for u in 0..w {
                let mut acc = 0.0;
                for dv in -r..=r {
                    for du in -r..=r {
                        let (su, sv) = (u - du, v - dv);
                        if su >= 0 && su < w && sv >= 0 && sv < h {
                            acc += k[(du + r) as usize]
                                * k[(dv + r) as usize]
                                * m.get(su as usize, sv as usize) as f64;
                        }
                    }
                }
                out[(v * w + u) as usize] = acc;
            }
        }
        out
    }

    #[test]
    fn blur_impulse_matches_dense_oracle() {
        let m = Grid2D::from_fn(11, 11, |u, v| if (u, v) == (5, 5) { 1.0 } else { 0.0 }).unwrap();
        let b = m.gaussian_blur(1.0).unwrap();
        let oracle = dense_blur(&m, 1.0);
        let oracle_mass: f64 = oracle.iter().sum();
        assert!((b.integrate() - oracle_mass).abs() / oracle_mass < 1e-4);
        assert!((b.integrate() - m.integrate()).abs() < 1e-4);
        for (x, y) in b.values().iter().zip(&oracle) {
            assert!((*x as f64 - y).abs() < 1e-6);
        }
        let k = gaussian_kernel_1d(1.0).unwrap();
        assert!((b.get(5, 5) as f64 - k[3] * k[3]).abs() < 1e-7);
        for d in 1..=5 {
            assert_eq!(b.get(5 - d, 5), b.get(5 + d, 5));
            assert_eq!(b.get(5, 5 - d), b.get(5, 5 + d));
        }
    }

    #[test]
    fn blur_rejects_bad_sigma() {
        let m = sample();
        assert!(m.gaussian_blur(0.0).is_err());
        assert!(m.gaussian_blur(-1.0).is_err());
        assert!(m.gaussian_blur(f64::NAN).is_err());
    }

    #[test]
    fn blur_preserves_mass_at_borders() {
        let m = Grid2D::from_fn(6, 4, |u, v| if (u, v) == (0, 0) { 2.0 } else { 0.0 }).unwrap();
        let b = m.gaussian_blur(3.0).unwrap();
        assert!((b.integrate() - 2.0).abs() < 1e-5);
    }

    #[test]
    fn reflect_folds() {
        assert_eq!(reflect(-1, 4), 0);
        assert_eq!(reflect(-2, 4), 1);
        assert_eq!(reflect(4, 4), 3);
        assert_eq!(reflect(5, 4), 2);
        assert_eq!(reflect(9, 4), 1);
        assert_eq!(reflect(0, 1), 0);
        assert_eq!(reflect(-7, 1), 0);
    }

    #[test]
    fn threshold_examples() {
        let m = Grid2D::from_rows(&[&[0.1, 0.9], &[0.5, 0.2]]).unwrap();
        assert_eq!(m.threshold_binarize(0.2).values(), &[0.0, 1.0, 1.0, 0.0]);
        let pos = Grid2D::filled(3, 3, 0.4).unwrap();
        assert!(pos.threshold_binarize(0.0).values().iter().all(|&x| x == 1.0));
        assert!(m.threshold_binarize(1.0).values().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn constructors_validate() {
        assert!(Grid2D::zeros(0, 3).is_err());
        assert!(Grid2D::from_vec(2, 2, vec![0.0; 3]).is_err());
        assert!(Grid2D::from_vec(1, 1, vec![f32::NAN]).is_err());
        assert!(Grid2D::from_rows(&[&[1.0], &[1.0, 2.0]]).is_err());
    }
}
