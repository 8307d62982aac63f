//! The density predictor: a two-layer convolutional feature extractor
//! followed by a 1x1 density head.
//!
//! ```text
//! image -> conv3x3(1->8) -> relu -> conv3x3(8->16) -> relu = features
//! features -> conv1x1(16->1) -> softplus = density
//! ```
//!
//! Convolutions use zero "same" padding, so features and density keep the
//! input resolution. Planes are stored channel-major, row-major within a
//! channel.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::codec::LeReader;
use crate::error::{Error, Result};
use crate::grid::Grid2D;

pub const HIDDEN_CHANNELS: usize = 8;
pub const FEATURE_CHANNELS: usize = 16;
pub const MIN_INPUT_SIDE: usize = 8;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"C2DP";
pub const CHECKPOINT_VERSION: u32 = 1;

const CONV1_W: usize = 0;
const CONV1_B: usize = 1;
const CONV2_W: usize = 2;
const CONV2_B: usize = 3;
const HEAD_W: usize = 4;
const HEAD_B: usize = 5;

/// A named parameter tensor with its gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
    pub grad: Vec<f32>,
}

impl Tensor {
    fn zeros(name: &str, shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            name: name.to_string(),
            shape: shape.to_vec(),
            data: vec![0.0; n],
            grad: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    tensors: Vec<Tensor>,
}

fn architecture() -> Vec<(&'static str, Vec<usize>)> {
    vec![
        ("conv1.weight", vec![HIDDEN_CHANNELS, 1, 3, 3]),
        ("conv1.bias", vec![HIDDEN_CHANNELS]),
        ("conv2.weight", vec![FEATURE_CHANNELS, HIDDEN_CHANNELS, 3, 3]),
        ("conv2.bias", vec![FEATURE_CHANNELS]),
        ("head.weight", vec![1, FEATURE_CHANNELS, 1, 1]),
        ("head.bias", vec![1]),
    ]
}

impl ModelParams {
    pub fn zeros() -> Self {
        ModelParams {
            tensors: architecture()
                .iter()
                .map(|(n, s)| Tensor::zeros(n, s))
                .collect(),
        }
    }

    /// Glorot-uniform kernels, `a = sqrt(6 / (fan_in + fan_out))`, zero biases.
    pub fn init(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::zeros();
        for t in p.tensors.iter_mut().filter(|t| t.shape.len() == 4) {
            let a = glorot_bound(&t.shape);
            for x in &mut t.data {
                *x = rng.gen_range(-a..=a);
            }
        }
        p
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Flat view used by gradient checks: `(tensor index, element index)`.
    pub fn locate(&self, mut flat: usize) -> (usize, usize) {
        for (ti, t) in self.tensors.iter().enumerate() {
            if flat < t.len() {
                return (ti, flat);
            }
            flat -= t.len();
        }
        panic!("parameter index out of range");
    }

    pub fn zero_grad(&mut self) {
        for t in &mut self.tensors {
            t.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    fn check_grads(&self) -> Result<()> {
        match self.tensors.iter().find(|t| t.grad.iter().any(|g| !g.is_finite())) {
            Some(t) => Err(Error::NonFinite {
                tensor: format!("{}.grad", t.name),
            }),
            None => Ok(()),
        }
    }

    fn check_values(&self) -> Result<()> {
        match self.tensors.iter().find(|t| t.data.iter().any(|p| !p.is_finite())) {
            Some(t) => Err(Error::NonFinite {
                tensor: t.name.clone(),
            }),
            None => Ok(()),
        }
    }

    /// `p <- p - lr * (grad + wd * p)`, then zero the gradients. Refused
    /// without touching anything if a gradient is non-finite.
    pub fn sgd_step(&mut self, learning_rate: f32, weight_decay: f32) -> Result<()> {
        self.check_grads()?;
        for t in &mut self.tensors {
            for (p, g) in t.data.iter_mut().zip(&mut t.grad) {
                *p -= learning_rate * (*g + weight_decay * *p);
                *g = 0.0;
            }
        }
        self.check_values()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &x in &t.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    /// Parses a checkpoint and checks it against the fixed architecture.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        const FMT: &str = "checkpoint";
        if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::format(FMT, "magic", "expected \"C2DP\""));
        }
        let mut r = LeReader::new(&bytes[4..], FMT);
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(FMT, "version", format!("unsupported version {version}")));
        }
        let arch = architecture();
        let count = r.u32("tensor count")? as usize;
        if count != arch.len() {
            return Err(Error::format(
                FMT,
                "tensor count",
                format!("expected {}, found {count}", arch.len()),
            ));
        }
        let mut params = Self::zeros();
        for (i, (want_name, want_shape)) in arch.iter().enumerate() {
            let name_len = r.u32(&format!("tensor[{i}].name length"))? as usize;
            let name = r.take(name_len, &format!("tensor[{i}].name"))?;
            if name != want_name.as_bytes() {
                return Err(Error::format(
                    FMT,
                    format!("tensor[{i}].name"),
                    format!("expected {want_name}, found {:?}", String::from_utf8_lossy(name)),
                ));
            }
            let rank = r.u32(&format!("{want_name}.rank"))? as usize;
            if rank != want_shape.len() {
                return Err(Error::format(
                    FMT,
                    format!("{want_name}.rank"),
                    format!("expected {}, found {rank}", want_shape.len()),
                ));
            }
            for (k, &want) in want_shape.iter().enumerate() {
                let d = r.u32(&format!("{want_name}.shape[{k}]"))? as usize;
                if d != want {
                    return Err(Error::format(
                        FMT,
                        format!("{want_name}.shape[{k}]"),
                        format!("expected {want}, found {d}"),
                    ));
                }
            }
            let t = &mut params.tensors[i];
            for (k, x) in t.data.iter_mut().enumerate() {
                let raw = r.take(4, &format!("{want_name}.data"))?;
                let v = f32::from_le_bytes(raw.try_into().unwrap());
                if !v.is_finite() {
                    return Err(Error::format(FMT, format!("{want_name}.data[{k}]"), "non-finite value"));
                }
                *x = v;
            }
        }
        if r.remaining() != 0 {
            return Err(Error::format(FMT, "trailer", format!("{} unexpected trailing bytes", r.remaining())));
        }
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(Error::io(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(Error::io(path))?;
        Self::decode(&bytes)
    }

    /// Hex SHA-256 of the encoded checkpoint.
    pub fn checksum(&self) -> String {
        hex::encode(Sha256::digest(self.encode()))
    }
}

/// Adam moment buffers for one [`ModelParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    steps: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(params: &ModelParams) -> Self {
        let zeros = || params.tensors.iter().map(|t| vec![0.0; t.len()]).collect();
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Bias-corrected Adam update with `grad + wd * p` as the gradient,
    /// then zero the gradients. Refused if a gradient is non-finite.
    pub fn step(&mut self, params: &mut ModelParams, learning_rate: f32, weight_decay: f32) -> Result<()> {
        params.check_grads()?;
        self.steps += 1;
        let k = self.steps as i32;
        let c1 = 1.0 - self.beta1.powi(k);
        let c2 = 1.0 - self.beta2.powi(k);
        let lr = learning_rate as f64;
        for (ti, t) in params.tensors.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[ti], &mut self.v[ti]);
            for (j, (p, g)) in t.data.iter_mut().zip(&mut t.grad).enumerate() {
                let g64 = *g as f64 + weight_decay as f64 * *p as f64;
                let mj = self.beta1 * m[j] as f64 + (1.0 - self.beta1) * g64;
                let vj = self.beta2 * v[j] as f64 + (1.0 - self.beta2) * g64 * g64;
                m[j] = mj as f32;
                v[j] = vj as f32;
                *p -= (lr * (mj / c1) / ((vj / c2).sqrt() + self.eps)) as f32;
                *g = 0.0;
            }
        }
        params.check_values()
    }
}

pub fn glorot_bound(shape: &[usize]) -> f32 {
    let receptive: usize = shape[2..].iter().product();
    let fan_in = shape[1] * receptive;
    let fan_out = shape[0] * receptive;
    (6.0 / (fan_in + fan_out) as f32).sqrt()
}

/// Per-pixel feature vectors, `channels` planes of `width * height`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid {
    pub channels: usize,
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl FeatureGrid {
    pub fn zeros(channels: usize, width: usize, height: usize) -> Self {
        FeatureGrid {
            channels,
            width,
            height,
            data: vec![0.0; channels * width * height],
        }
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, u: usize, v: usize) -> f32 {
        self.data[(c * self.height + v) * self.width + u]
    }
}

/// Intermediates of one forward pass, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    width: usize,
    height: usize,
    input: Vec<f32>,
    pre1: Vec<f32>,
    act1: Vec<f32>,
    pre2: Vec<f32>,
    features: FeatureGrid,
    logits: Vec<f32>,
    density: Grid2D,
}

impl ForwardCache {
    pub fn features(&self) -> &FeatureGrid {
        &self.features
    }

    pub fn density(&self) -> &Grid2D {
        &self.density
    }

    /// Which ReLU units are active; changes when a perturbation crosses a kink.
    pub fn activation_pattern(&self) -> Vec<bool> {
        self.pre1.iter().chain(&self.pre2).map(|&x| x > 0.0).collect()
    }
}

/// `dst[v][u] += weight * src[v + dy][u + dx]` wherever the source exists.
#[inline]
fn shifted_axpy(dst: &mut [f32], src: &[f32], w: usize, h: usize, dy: isize, dx: isize, weight: f32) {
    let v_lo = (-dy).max(0) as usize;
    let v_hi = (h as isize - dy).min(h as isize) as usize;
    let u_lo = (-dx).max(0) as usize;
    let u_hi = (w as isize - dx).min(w as isize) as usize;
    if u_lo >= u_hi {
        return;
    }
    for v in v_lo..v_hi {
        let sv = (v as isize + dy) as usize;
        let d = &mut dst[v * w + u_lo..v * w + u_hi];
        let s0 = (sv * w) as isize + u_lo as isize + dx;
        let s = &src[s0 as usize..s0 as usize + (u_hi - u_lo)];
        for (a, b) in d.iter_mut().zip(s) {
            *a += weight * b;
        }
    }
}

/// `sum a[v][u] * b[v + dy][u + dx]` over the overlap.
#[inline]
fn shifted_dot(a: &[f32], b: &[f32], w: usize, h: usize, dy: isize, dx: isize) -> f64 {
    let v_lo = (-dy).max(0) as usize;
    let v_hi = (h as isize - dy).min(h as isize) as usize;
    let u_lo = (-dx).max(0) as usize;
    let u_hi = (w as isize - dx).min(w as isize) as usize;
    if u_lo >= u_hi {
        return 0.0;
    }
    let mut total = 0.0f64;
    for v in v_lo..v_hi {
        let sv = (v as isize + dy) as usize;
        let x = &a[v * w + u_lo..v * w + u_hi];
        let s0 = (sv * w) as isize + u_lo as isize + dx;
        let y = &b[s0 as usize..s0 as usize + (u_hi - u_lo)];
        let mut row = 0.0f32;
        for (p, q) in x.iter().zip(y) {
            row += p * q;
        }
        total += row as f64;
    }
    total
}

fn conv3x3_forward(input: &[f32], cin: usize, weight: &[f32], bias: &[f32], cout: usize, w: usize, h: usize) -> Vec<f32> {
    let n = w * h;
    let mut out = vec![0.0f32; cout * n];
    for o in 0..cout {
        let dst = &mut out[o * n..(o + 1) * n];
        dst.iter_mut().for_each(|x| *x = bias[o]);
        for i in 0..cin {
            let src = &input[i * n..(i + 1) * n];
            for ky in 0..3 {
                for kx in 0..3 {
                    let k = weight[((o * cin + i) * 3 + ky) * 3 + kx];
                    shifted_axpy(dst, src, w, h, ky as isize - 1, kx as isize - 1, k);
                }
            }
        }
    }
    out
}

/// Accumulates weight and bias gradients; returns the input gradient when asked.
#[allow(clippy::too_many_arguments)]
fn conv3x3_backward(
    input: &[f32],
    cin: usize,
    weight: &[f32],
    dout: &[f32],
    cout: usize,
    w: usize,
    h: usize,
    dweight: &mut [f32],
    dbias: &mut [f32],
    want_input_grad: bool,
) -> Option<Vec<f32>> {
    let n = w * h;
    let mut din = want_input_grad.then(|| vec![0.0f32; cin * n]);
    for o in 0..cout {
        let g = &dout[o * n..(o + 1) * n];
        dbias[o] += g.iter().map(|&x| x as f64).sum::<f64>() as f32;
        for i in 0..cin {
            let src = &input[i * n..(i + 1) * n];
            for ky in 0..3 {
                for kx in 0..3 {
                    let (dy, dx) = (ky as isize - 1, kx as isize - 1);
                    let idx = ((o * cin + i) * 3 + ky) * 3 + kx;
                    dweight[idx] += shifted_dot(g, src, w, h, dy, dx) as f32;
                    if let Some(din) = din.as_mut() {
                        shifted_axpy(&mut din[i * n..(i + 1) * n], g, w, h, -dy, -dx, weight[idx]);
                    }
                }
            }
        }
    }
    din
}

fn softplus(z: f32) -> f32 {
    let z = z as f64;
    let y = if z > 30.0 { z } else { z.exp().ln_1p() };
    (y as f32).max(f32::MIN_POSITIVE)
}

fn sigmoid(z: f32) -> f32 {
    let z = z as f64;
    (1.0 / (1.0 + (-z).exp())) as f32
}

fn check_input(image: &Grid2D) -> Result<()> {
    if image.width() < MIN_INPUT_SIDE || image.height() < MIN_INPUT_SIDE {
        return Err(Error::param(
            "image",
            format!(
                "model input must be at least {MIN_INPUT_SIDE}x{MIN_INPUT_SIDE}, got {}x{}",
                image.width(),
                image.height()
            ),
        ));
    }
    Ok(())
}

/// Runs the network without touching any state.
pub fn run_forward(params: &ModelParams, image: &Grid2D) -> Result<ForwardCache> {
    check_input(image)?;
    let (w, h) = (image.width(), image.height());
    let n = w * h;
    let t = &params.tensors;
    let input = image.values().to_vec();

    let pre1 = conv3x3_forward(&input, 1, &t[CONV1_W].data, &t[CONV1_B].data, HIDDEN_CHANNELS, w, h);
    let act1: Vec<f32> = pre1.iter().map(|&x| x.max(0.0)).collect();
    let pre2 = conv3x3_forward(&act1, HIDDEN_CHANNELS, &t[CONV2_W].data, &t[CONV2_B].data, FEATURE_CHANNELS, w, h);
    let feat: Vec<f32> = pre2.iter().map(|&x| x.max(0.0)).collect();

    let mut logits = vec![t[HEAD_B].data[0]; n];
    for c in 0..FEATURE_CHANNELS {
        let k = t[HEAD_W].data[c];
        for (z, &f) in logits.iter_mut().zip(&feat[c * n..(c + 1) * n]) {
            *z += k * f;
        }
    }
    let density = Grid2D::from_vec(w, h, logits.iter().map(|&z| softplus(z)).collect())
        .map_err(|_| Error::NonFinite {
            tensor: "density".into(),
        })?;

    Ok(ForwardCache {
        width: w,
        height: h,
        input,
        pre1,
        act1,
        pre2,
        features: FeatureGrid {
            channels: FEATURE_CHANNELS,
            width: w,
            height: h,
            data: feat,
        },
        logits,
        density,
    })
}

/// Accumulates parameter gradients for upstream gradients on the density map
/// and, optionally, on the feature grid.
pub fn run_backward(
    params: &mut ModelParams,
    cache: &ForwardCache,
    d_density: &Grid2D,
    d_features: Option<&FeatureGrid>,
) -> Result<()> {
    let (w, h) = (cache.width, cache.height);
    let n = w * h;
    if d_density.width() != w || d_density.height() != h {
        return Err(Error::Shape {
            expected: format!("{w}x{h} density gradient"),
            actual: format!("{}x{}", d_density.width(), d_density.height()),
        });
    }
    if let Some(df) = d_features {
        if df.width != w || df.height != h || df.channels != FEATURE_CHANNELS {
            return Err(Error::Shape {
                expected: format!("{FEATURE_CHANNELS}x{w}x{h} feature gradient"),
                actual: format!("{}x{}x{}", df.channels, df.width, df.height),
            });
        }
    }

    let dz: Vec<f32> = d_density
        .values()
        .iter()
        .zip(&cache.logits)
        .map(|(&g, &z)| g * sigmoid(z))
        .collect();

    let t = &mut params.tensors;
    t[HEAD_B].grad[0] += dz.iter().map(|&x| x as f64).sum::<f64>() as f32;
    let feat = &cache.features.data;
    let mut dpre2 = vec![0.0f32; FEATURE_CHANNELS * n];
    for c in 0..FEATURE_CHANNELS {
        let plane = &feat[c * n..(c + 1) * n];
        let hw = t[HEAD_W].data[c];
        let dot: f64 = plane.iter().zip(&dz).map(|(&f, &g)| (f * g) as f64).sum();
        t[HEAD_W].grad[c] += dot as f32;
        let dst = &mut dpre2[c * n..(c + 1) * n];
        let pre = &cache.pre2[c * n..(c + 1) * n];
        match d_features {
            Some(df) => {
                let up = df.plane(c);
                for k in 0..n {
                    dst[k] = if pre[k] > 0.0 { hw * dz[k] + up[k] } else { 0.0 };
                }
            }
            None => {
                for k in 0..n {
                    dst[k] = if pre[k] > 0.0 { hw * dz[k] } else { 0.0 };
                }
            }
        }
    }

    let (w2, rest) = t.split_at_mut(CONV2_W + 1);
    let mut dact1 = conv3x3_backward(
        &cache.act1,
        HIDDEN_CHANNELS,
        &w2[CONV2_W].data,
        &dpre2,
        FEATURE_CHANNELS,
        w,
        h,
        &mut w2[CONV2_W].grad,
        &mut rest[0].grad,
        true,
    )
    .expect("input gradient requested");
    for (g, &p) in dact1.iter_mut().zip(&cache.pre1) {
        if p <= 0.0 {
            *g = 0.0;
        }
    }
    let (w1, rest) = t.split_at_mut(CONV1_W + 1);
    conv3x3_backward(
        &cache.input,
        1,
        &w1[CONV1_W].data,
        &dact1,
        HIDDEN_CHANNELS,
        w,
        h,
        &mut w1[CONV1_W].grad,
        &mut rest[0].grad,
        false,
    );
    Ok(())
}

/// Parameters plus the cached forward pass the next backward call uses.
#[derive(Clone, Debug)]
pub struct Predictor {
    pub params: ModelParams,
    cache: Option<ForwardCache>,
}

impl Predictor {
    pub fn new(params: ModelParams) -> Self {
        Predictor { params, cache: None }
    }

    /// Forward pass whose intermediates are kept for [`Predictor::backward`].
    pub fn forward(&mut self, image: &Grid2D) -> Result<&ForwardCache> {
        let cache = run_forward(&self.params, image)?;
        Ok(self.cache.insert(cache))
    }

    /// Density only; leaves the cache alone.
    pub fn predict(&self, image: &Grid2D) -> Result<Grid2D> {
        Ok(run_forward(&self.params, image)?.density)
    }

    pub fn cache(&self) -> Option<&ForwardCache> {
        self.cache.as_ref()
    }

    pub fn backward(&mut self, d_density: &Grid2D, d_features: Option<&FeatureGrid>) -> Result<()> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::State("backward called before forward".into()))?;
        run_backward(&mut self.params, cache, d_density, d_features)
    }

    pub fn sgd_step(&mut self, learning_rate: f32, weight_decay: f32) -> Result<()> {
        self.params.sgd_step(learning_rate, weight_decay)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_image(w: usize, h: usize, seed: u64) -> Grid2D {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Grid2D::from_fn(w, h, |_, _| rng.gen_range(-1.5f32..1.5)).unwrap()
    }

    #[test]
    fn zero_params_give_ln2() {
        let p = Predictor::new(ModelParams::zeros());
        let d = p.predict(&test_image(9, 11, 1)).unwrap();
        assert_eq!((d.width(), d.height()), (9, 11));
        for &x in d.values() {
            assert!((x - std::f32::consts::LN_2).abs() < 1e-7);
        }
    }

    #[test]
    fn density_positive_and_deterministic() {
        let p = Predictor::new(ModelParams::init(3));
        let img = test_image(16, 12, 2);
        let a = p.predict(&img).unwrap();
        let b = Predictor::new(ModelParams::init(3)).predict(&img).unwrap();
        assert_eq!(a, b);
        assert!(a.values().iter().all(|&x| x > 0.0));

        let mut big = ModelParams::init(3);
        big.tensors[HEAD_B].data[0] = -500.0;
        let d = Predictor::new(big).predict(&img).unwrap();
        assert!(d.values().iter().all(|&x| x > 0.0));
    }

    #[test]
    fn small_input_rejected() {
        let p = Predictor::new(ModelParams::init(0));
        assert!(matches!(p.predict(&Grid2D::zeros(7, 9).unwrap()), Err(Error::Param { .. })));
    }

    #[test]
    fn init_is_seeded_glorot() {
        let a = ModelParams::init(42);
        assert_eq!(a, ModelParams::init(42));
        assert_ne!(a, ModelParams::init(43));
        for t in a.tensors().iter().filter(|t| t.shape.len() == 1) {
            assert!(t.data.iter().all(|&x| x == 0.0), "{}", t.name);
        }
        // conv1: fan_in = 1*9, fan_out = 8*9
        let bound = (6.0f32 / (9.0 + 72.0)).sqrt();
        assert_eq!(glorot_bound(&[8, 1, 3, 3]), bound);
        let c1 = a.tensor("conv1.weight").unwrap();
        assert!(c1.data.iter().all(|x| x.abs() <= bound));
        assert!(c1.data.iter().any(|x| x.abs() > bound / 2.0));
    }

    #[test]
    fn backward_requires_forward() {
        let mut p = Predictor::new(ModelParams::init(1));
        let g = Grid2D::zeros(8, 8).unwrap();
        assert!(matches!(p.backward(&g, None), Err(Error::State(_))));
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let mut p = Predictor::new(ModelParams::init(1));
        let img = test_image(10, 10, 5);
        p.forward(&img).unwrap();
        p.backward(&Grid2D::zeros(10, 10).unwrap(), Some(&FeatureGrid::zeros(16, 10, 10)))
            .unwrap();
        assert!(p.params.tensors().iter().all(|t| t.grad.iter().all(|&g| g == 0.0)));
    }

    #[test]
    fn gradients_accumulate() {
        let mut p = Predictor::new(ModelParams::init(9));
        let img = test_image(10, 10, 6);
        p.forward(&img).unwrap();
        let up = Grid2D::from_fn(10, 10, |u, v| (u as f32 - v as f32) * 0.01).unwrap();
        p.backward(&up, None).unwrap();
        let once: Vec<Vec<f32>> = p.params.tensors().iter().map(|t| t.grad.clone()).collect();
        p.backward(&up, None).unwrap();
        for (t, g1) in p.params.tensors().iter().zip(&once) {
            for (a, b) in t.grad.iter().zip(g1) {
                assert!((a - 2.0 * b).abs() <= 1e-6 * b.abs().max(1.0));
            }
        }
    }

    /// Central differences of `L = sum(gd * density) + sum(gf * features)`,
    /// a linear probe whose gradient is exactly what backward receives.
    #[test]
    fn finite_difference_check() {
        let (w, h) = (12, 12);
        let img = test_image(w, h, 77);
        let gd = Grid2D::from_fn(w, h, |u, v| ((u * 3 + v * 5) % 7) as f32 / 7.0 - 0.4).unwrap();
        let mut gf = FeatureGrid::zeros(FEATURE_CHANNELS, w, h);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        gf.data.iter_mut().for_each(|x| *x = rng.gen_range(-0.1..0.1));

        let probe = |params: &ModelParams| -> (f64, Vec<bool>) {
            let c = run_forward(params, &img).unwrap();
            let a: f64 = c.density().values().iter().zip(gd.values()).map(|(&x, &g)| x as f64 * g as f64).sum();
            let b: f64 = c.features().data.iter().zip(&gf.data).map(|(&x, &g)| x as f64 * g as f64).sum();
            (a + b, c.activation_pattern())
        };

        let mut model = Predictor::new(ModelParams::init(21));
        model.forward(&img).unwrap();
        model.backward(&gd, Some(&gf)).unwrap();
        let base_pattern = probe(&model.params).1;

        let step = 1e-3f32;
        let total = model.params.num_params();
        let mut checked = 0;
        while checked < 25 {
            let (ti, k) = model.params.locate(rng.gen_range(0..total));
            let analytic = model.params.tensors()[ti].grad[k] as f64;
            let mut plus = model.params.clone();
            plus.tensors_mut()[ti].data[k] += step;
            let mut minus = model.params.clone();
            minus.tensors_mut()[ti].data[k] -= step;
            let (lp, pp) = probe(&plus);
            let (lm, pm) = probe(&minus);
            if pp != base_pattern || pm != base_pattern {
                continue;
            }
            let plus_step = plus.tensors()[ti].data[k] as f64 - model.params.tensors()[ti].data[k] as f64;
            let minus_step = model.params.tensors()[ti].data[k] as f64 - minus.tensors()[ti].data[k] as f64;
            let numeric = (lp - lm) / (plus_step + minus_step);
            let err = (analytic - numeric).abs() / analytic.abs().max(1.0);
            assert!(err <= 1e-3, "{}[{k}] analytic {analytic} numeric {numeric}", model.params.tensors()[ti].name);
            checked += 1;
        }
    }

    #[test]
    fn sgd_hand_values() {
        let mut p = ModelParams::zeros();
        p.tensors[HEAD_B].data[0] = 1.0;
        p.tensors[HEAD_B].grad[0] = 2.0;
        let before = p.clone();
        p.sgd_step(0.0, 0.0).unwrap();
        for (a, b) in p.tensors().iter().zip(before.tensors()) {
            assert_eq!(a.data, b.data);
        }
        p.tensors[HEAD_B].grad[0] = 2.0;
        p.sgd_step(0.1, 0.0).unwrap();
        assert!((p.tensors[HEAD_B].data[0] - 0.8).abs() < 1e-7);
        assert!(p.tensors().iter().all(|t| t.grad.iter().all(|&g| g == 0.0)));
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = ModelParams::init(3);
        let before = p.clone();
        for t in p.tensors_mut() {
            for (k, g) in t.grad.iter_mut().enumerate() {
                *g = if k % 2 == 0 { 0.25 } else { -4.0 };
            }
        }
        let mut opt = Adam::new(&p);
        opt.step(&mut p, 0.01, 0.0).unwrap();
        // first bias-corrected step is lr * g / (|g| + eps)
        for (a, b) in p.tensors().iter().zip(before.tensors()) {
            for (k, (x, y)) in a.data.iter().zip(&b.data).enumerate() {
                let want = if k % 2 == 0 { -0.01 } else { 0.01 };
                assert!(((x - y) - want).abs() < 1e-6, "{} {k}: {}", a.name, x - y);
            }
            assert!(a.grad.iter().all(|&g| g == 0.0));
        }
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn adam_matches_scalar_recurrence() {
        let mut p = ModelParams::zeros();
        let mut opt = Adam::new(&p);
        let (mut m, mut v, mut x) = (0.0f64, 0.0f64, 0.0f64);
        for k in 1..=5 {
            let g = 1.0 / k as f64;
            p.tensors_mut()[HEAD_B].grad[0] = g as f32;
            opt.step(&mut p, 0.1, 0.0).unwrap();
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(k));
            let vh = v / (1.0 - 0.999f64.powi(k));
            x -= 0.1 * mh / (vh.sqrt() + 1e-8);
            assert!((p.tensors()[HEAD_B].data[0] as f64 - x).abs() < 1e-6);
        }
    }

    #[test]
    fn adam_refuses_non_finite() {
        let mut p = ModelParams::init(1);
        p.tensors_mut()[CONV2_W].grad[3] = f32::INFINITY;
        let mut opt = Adam::new(&p);
        let err = opt.step(&mut p, 0.1, 0.0).unwrap_err();
        assert!(matches!(err, Error::NonFinite { ref tensor } if tensor == "conv2.weight.grad"));
        assert_eq!(opt.steps(), 0);
    }

    #[test]
    fn sgd_refuses_non_finite() {
        let mut p = ModelParams::init(2);
        p.tensors[CONV2_W].grad[3] = f32::NAN;
        let before = p.clone();
        match p.sgd_step(0.1, 0.0) {
            Err(Error::NonFinite { tensor }) => assert_eq!(tensor, "conv2.weight.grad"),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(p.encode(), before.encode());
        assert!(p.tensors[CONV2_W].grad[3].is_nan());
    }

    #[test]
    fn checkpoint_roundtrip_and_errors() {
        let p = ModelParams::init(5);
        let bytes = p.encode();
        let back = ModelParams::decode(&bytes).unwrap();
        assert_eq!(back.encode(), bytes);
        assert_eq!(back.checksum(), p.checksum());

        assert!(ModelParams::decode(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(ModelParams::decode(&extra).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(ModelParams::decode(&bad).is_err());
        // first name byte: "conv1.weight" -> "xonv1.weight"
        let mut bad = bytes;
        bad[16] = b'x';
        match ModelParams::decode(&bad) {
            Err(Error::Format { field, .. }) => assert_eq!(field, "tensor[0].name"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
