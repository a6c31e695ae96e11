//! Dense `f64` tensors and the handful of differentiable primitives the
//! decoder is built from: linear maps, layer normalization, ReLU, row softmax
//! and sinusoidal embeddings.
//!
//! Every primitive comes as a forward function plus an explicit backward that
//! maps an upstream gradient to gradients of all inputs. There is no tape.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

/// Layer-norm variance floor.
pub const LN_EPS: f64 = 1e-5;

/// Sinusoidal embedding temperature.
pub const DEFAULT_TEMPERATURE: f64 = 10000.0;

/// Row-major dense tensor of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return shape_err(format!("shape {:?} needs {} values, got {}", shape, n, data.len()));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return shape_err("ragged rows");
        }
        let data = rows.iter().flatten().copied().collect();
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Row count of a matrix.
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    /// Column count of a matrix (product of trailing dimensions).
    pub fn cols(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn get2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return shape_err(format!("cannot reshape {:?} to {:?}", self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn transpose(&self) -> Self {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self {
            shape: vec![c, r],
            data: out,
        }
    }

    /// Matrix product `self · other`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (n, k) = (self.rows(), self.cols());
        let (k2, m) = (other.rows(), other.cols());
        if k != k2 {
            return shape_err(format!("matmul inner dims {:?} x {:?}", self.shape, other.shape));
        }
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let orow = &mut out[i * m..(i + 1) * m];
            for (p, &a) in self.data[i * k..(i + 1) * k].iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in orow.iter_mut().zip(&other.data[p * m..(p + 1) * m]) {
                    *o += a * b;
                }
            }
        }
        Tensor::new(vec![n, m], out)
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.data.len() != other.data.len() {
            return shape_err(format!("add {:?} += {:?}", self.shape, other.shape));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::Value(format!("{what} contains non-finite values")))
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Seeded deterministic generator (ChaCha8 stream keyed by a 64-bit seed).
#[derive(Debug, Clone)]
pub struct RngState {
    seed: u64,
    rng: ChaCha8Rng,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent child stream; depends only on `(seed, stream)`.
    pub fn fork(&self, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream.wrapping_add(1));
        Self { seed: self.seed, rng }
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.rng.gen::<f64>()
    }

    /// Uniform integer in `[lo, hi]`.
    pub fn int_range(&mut self, lo: usize, hi: usize) -> usize {
        self.rng.gen_range(lo..=hi)
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        let u1: f64 = 1.0 - self.rng.gen::<f64>();
        let u2: f64 = self.rng.gen();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    pub fn uniform_tensor(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        let mut t = Tensor::zeros(shape);
        for v in t.data_mut() {
            *v = self.uniform(lo, hi);
        }
        t
    }
}

/// Weight `[out × in]` and bias `[out]` of an affine map.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LinearParams {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[out_dim, in_dim]),
            bias: Tensor::zeros(&[out_dim]),
        }
    }

    /// Fan-in scaled uniform init, `U(-1/sqrt(in), 1/sqrt(in))` for weight and bias.
    pub fn init_default(in_dim: usize, out_dim: usize, rng: &mut RngState) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Self {
            weight: rng.uniform_tensor(&[out_dim, in_dim], -bound, bound),
            bias: rng.uniform_tensor(&[out_dim], -bound, bound),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.in_dim(), self.out_dim())
    }

    /// `W·x + b` for a single vector.
    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.in_dim() {
            return shape_err(format!("linear expects input {}, got {}", self.in_dim(), x.len()));
        }
        let cols = self.in_dim();
        Ok(self
            .bias
            .data()
            .iter()
            .enumerate()
            .map(|(o, b)| {
                let w = &self.weight.data()[o * cols..(o + 1) * cols];
                b + w.iter().zip(x).map(|(a, c)| a * c).sum::<f64>()
            })
            .collect())
    }

    /// Backward of [`LinearParams::apply`]; accumulates parameter gradients
    /// into `grads` and returns the input gradient.
    pub fn apply_backward(&self, x: &[f64], gy: &[f64], grads: &mut LinearParams) -> Vec<f64> {
        let cols = self.in_dim();
        let mut gx = vec![0.0; cols];
        for (o, &g) in gy.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grads.bias.data_mut()[o] += g;
            let w = &self.weight.data()[o * cols..(o + 1) * cols];
            let gw = &mut grads.weight.data_mut()[o * cols..(o + 1) * cols];
            for i in 0..cols {
                gw[i] += g * x[i];
                gx[i] += g * w[i];
            }
        }
        gx
    }
}

/// Gradients of a linear map with respect to its input and parameters.
#[derive(Debug, Clone)]
pub struct LinearGrads {
    pub x: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
}

/// `y = x·Wᵀ + b` for `x: [n × in]`.
pub fn linear_forward(x: &Tensor, p: &LinearParams) -> Result<Tensor> {
    if x.cols() != p.in_dim() || p.bias.len() != p.out_dim() {
        return shape_err(format!(
            "linear: input {:?}, weight {:?}, bias {:?}",
            x.shape(),
            p.weight.shape(),
            p.bias.shape()
        ));
    }
    let n = x.rows();
    let mut out = Vec::with_capacity(n * p.out_dim());
    for i in 0..n {
        out.extend(p.apply(x.row(i))?);
    }
    Tensor::new(vec![n, p.out_dim()], out)
}

pub fn linear_backward(x: &Tensor, p: &LinearParams, grad_out: &Tensor) -> Result<LinearGrads> {
    if grad_out.rows() != x.rows() || grad_out.cols() != p.out_dim() {
        return shape_err("linear backward: upstream gradient shape");
    }
    let mut grads = p.zeros_like();
    let mut gx = Vec::with_capacity(x.len());
    for i in 0..x.rows() {
        gx.extend(p.apply_backward(x.row(i), grad_out.row(i), &mut grads));
    }
    Ok(LinearGrads {
        x: Tensor::new(x.shape().to_vec(), gx)?,
        weight: grads.weight,
        bias: grads.bias,
    })
}

/// How the bias of a dynamic-weight generator is initialized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BiasInit {
    /// Sampling-offset layout: `groups × points` triples `(Δx, Δy, Δz)` with
    /// Δx, Δy uniform in `[-0.5, 0.5]` (drawn interleaved, group-major then
    /// point-major) and Δz = -1.
    Offset { groups: usize, points: usize },
    /// Uniform in `±1/sqrt(fan_in)`.
    Default,
    /// All zeros.
    Zero,
}

/// Zeroes the weight and reinitializes the bias according to `bias_init`.
pub fn init_dynamic_layer(p: &LinearParams, bias_init: BiasInit, rng: &mut RngState) -> Result<LinearParams> {
    let (in_dim, out_dim) = (p.in_dim(), p.out_dim());
    let mut bias = Tensor::zeros(&[out_dim]);
    match bias_init {
        BiasInit::Offset { groups, points } => {
            if groups * points * 3 != out_dim {
                return shape_err(format!(
                    "offset init needs {} outputs, layer has {}",
                    groups * points * 3,
                    out_dim
                ));
            }
            for triple in bias.data_mut().chunks_exact_mut(3) {
                triple[0] = rng.uniform(-0.5, 0.5);
                triple[1] = rng.uniform(-0.5, 0.5);
                triple[2] = -1.0;
            }
        }
        BiasInit::Default => {
            let bound = 1.0 / (in_dim as f64).sqrt();
            for v in bias.data_mut() {
                *v = rng.uniform(-bound, bound);
            }
        }
        BiasInit::Zero => {}
    }
    Ok(LinearParams {
        weight: Tensor::zeros(&[out_dim, in_dim]),
        bias,
    })
}

/// Saved statistics of a layer-norm forward pass.
#[derive(Debug, Clone)]
pub struct LayerNormCache {
    xhat: Tensor,
    inv_std: f64,
}

/// Layer norm with statistics taken jointly over all `P·C` entries and an
/// affine transform per last-dimension position.
pub fn layernorm_forward(x: &Tensor, gain: &Tensor, shift: &Tensor) -> Result<Tensor> {
    layernorm_forward_cached(x, gain, shift).map(|(y, _)| y)
}

pub fn layernorm_forward_cached(x: &Tensor, gain: &Tensor, shift: &Tensor) -> Result<(Tensor, LayerNormCache)> {
    let c = x.shape().last().copied().unwrap_or(0);
    if x.is_empty() || gain.len() != c || shift.len() != c {
        return shape_err(format!(
            "layernorm: input {:?}, gain {:?}, shift {:?}",
            x.shape(),
            gain.shape(),
            shift.shape()
        ));
    }
    let n = x.len() as f64;
    let mean = x.data().iter().sum::<f64>() / n;
    let var = x.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv_std = 1.0 / (var + LN_EPS).sqrt();
    let xhat: Vec<f64> = x.data().iter().map(|v| (v - mean) * inv_std).collect();
    let y = xhat
        .iter()
        .enumerate()
        .map(|(i, h)| h * gain.data()[i % c] + shift.data()[i % c])
        .collect();
    Ok((
        Tensor::new(x.shape().to_vec(), y)?,
        LayerNormCache {
            xhat: Tensor::new(x.shape().to_vec(), xhat)?,
            inv_std,
        },
    ))
}

/// Returns `(dx, dgain, dshift)`.
pub fn layernorm_backward(
    cache: &LayerNormCache,
    gain: &Tensor,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    if grad_out.len() != cache.xhat.len() {
        return shape_err("layernorm backward: upstream gradient shape");
    }
    let c = gain.len();
    let n = grad_out.len() as f64;
    let mut dgain = vec![0.0; c];
    let mut dshift = vec![0.0; c];
    let mut dxhat = vec![0.0; grad_out.len()];
    for (i, (&g, &h)) in grad_out.data().iter().zip(cache.xhat.data()).enumerate() {
        dgain[i % c] += g * h;
        dshift[i % c] += g;
        dxhat[i] = g * gain.data()[i % c];
    }
    let sum_d: f64 = dxhat.iter().sum();
    let sum_dh: f64 = dxhat.iter().zip(cache.xhat.data()).map(|(d, h)| d * h).sum();
    let dx = dxhat
        .iter()
        .zip(cache.xhat.data())
        .map(|(d, h)| cache.inv_std / n * (n * d - sum_d - h * sum_dh))
        .collect();
    Ok((
        Tensor::new(grad_out.shape().to_vec(), dx)?,
        Tensor::vector(dgain),
        Tensor::vector(dshift),
    ))
}

pub fn relu(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|v| v.max(0.0)).collect();
    Tensor {
        shape: x.shape().to_vec(),
        data,
    }
}

/// Masks `grad_out` by `x > 0`; the subgradient at 0 is 0.
pub fn relu_backward(x: &Tensor, grad_out: &Tensor) -> Tensor {
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
        .collect();
    Tensor {
        shape: x.shape().to_vec(),
        data,
    }
}

/// Numerically stable softmax over each row.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    if x.is_empty() {
        return out;
    }
    for i in 0..x.rows() {
        softmax_in_place(out.row_mut(i));
    }
    out
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

/// Softmax Jacobian-vector product given the forward output `y`.
pub fn softmax_rows_backward(y: &Tensor, grad_out: &Tensor) -> Tensor {
    let mut dx = Tensor::zeros(y.shape());
    for i in 0..y.rows() {
        let (yr, gr) = (y.row(i), grad_out.row(i));
        let dotp: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for (d, (a, b)) in dx.row_mut(i).iter_mut().zip(yr.iter().zip(gr)) {
            *d = a * (b - dotp);
        }
    }
    dx
}

/// Interleaved `[sin(v·f₀), cos(v·f₀), sin(v·f₁), …]` with
/// `fᵢ = temperature^(-2i/dims)`.
pub fn sinusoidal_embed(v: f64, dims: usize, temperature: f64) -> Result<Vec<f64>> {
    if !dims.is_multiple_of(2) {
        return Err(Error::Config(format!("sinusoidal dims must be even, got {dims}")));
    }
    let mut out = Vec::with_capacity(dims);
    for i in 0..dims / 2 {
        let a = v * sinusoidal_freq(i, dims, temperature);
        out.push(a.sin());
        out.push(a.cos());
    }
    Ok(out)
}

/// Derivative of `<grad_out, sinusoidal_embed(v)>` with respect to `v`.
pub fn sinusoidal_embed_backward(v: f64, dims: usize, temperature: f64, grad_out: &[f64]) -> f64 {
    (0..dims / 2)
        .map(|i| {
            let f = sinusoidal_freq(i, dims, temperature);
            let a = v * f;
            f * (grad_out[2 * i] * a.cos() - grad_out[2 * i + 1] * a.sin())
        })
        .sum()
}

fn sinusoidal_freq(i: usize, dims: usize, temperature: f64) -> f64 {
    temperature.powf(-(2.0 * i as f64) / dims as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn linear_examples() {
        let x = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let p = LinearParams {
            weight: Tensor::zeros(&[1, 2]),
            bias: Tensor::vector(vec![3.0]),
        };
        assert_eq!(linear_forward(&x, &p).unwrap().data(), &[3.0]);

        let p = LinearParams {
            weight: Tensor::identity(2),
            bias: Tensor::zeros(&[2]),
        };
        let eye = Tensor::identity(2);
        assert_eq!(linear_forward(&eye, &p).unwrap(), eye);

        let p = LinearParams {
            weight: Tensor::from_rows(&[vec![1.0, 1.0], vec![0.0, 1.0]]).unwrap(),
            bias: Tensor::zeros(&[2]),
        };
        assert_eq!(linear_forward(&x, &p).unwrap().data(), &[3.0, 2.0]);
    }

    #[test]
    fn linear_shape_mismatch() {
        let x = Tensor::zeros(&[2, 3]);
        let p = LinearParams::zeros(2, 4);
        assert!(matches!(linear_forward(&x, &p), Err(Error::Shape(_))));
    }

    #[test]
    fn layernorm_examples() {
        let one = Tensor::filled(&[2], 1.0);
        let zero = Tensor::zeros(&[2]);
        let x = Tensor::from_rows(&[vec![1.0, -1.0], vec![-1.0, 1.0]]).unwrap();
        let y = layernorm_forward(&x, &one, &zero).unwrap();
        assert!(close(y.data(), &[1.0, -1.0, -1.0, 1.0], 1e-5));

        let c = Tensor::filled(&[3, 2], 7.5);
        let y = layernorm_forward(&c, &one, &zero).unwrap();
        assert!(y.data().iter().all(|v| *v == 0.0));

        let x = Tensor::from_rows(&[vec![0.0, 2.0]]).unwrap();
        let y = layernorm_forward(&x, &one, &zero).unwrap();
        assert!(close(y.data(), &[-1.0, 1.0], 1e-5));
    }

    #[test]
    fn layernorm_moments() {
        let mut rng = RngState::new(3);
        let x = rng.uniform_tensor(&[5, 7], -4.0, 9.0);
        let y = layernorm_forward(&x, &Tensor::filled(&[7], 1.0), &Tensor::zeros(&[7])).unwrap();
        let n = y.len() as f64;
        let mean = y.data().iter().sum::<f64>() / n;
        let var = y.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() <= 1e-10);
        assert!((var - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn relu_examples() {
        assert_eq!(relu(&Tensor::vector(vec![-1.0, 0.0, 2.0])).data(), &[0.0, 0.0, 2.0]);
        assert_eq!(relu(&Tensor::vector(vec![-1.0, -3.0])).data(), &[0.0, 0.0]);
        assert_eq!(relu(&Tensor::vector(vec![0.5])).data(), &[0.5]);
        let g = relu_backward(&Tensor::vector(vec![-1.0, 0.0, 2.0]), &Tensor::vector(vec![1.0; 3]));
        assert_eq!(g.data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn softmax_examples() {
        let y = softmax_rows(&Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap());
        assert_eq!(y.data(), &[0.5, 0.5]);
        let y = softmax_rows(&Tensor::from_rows(&[vec![100.0, 0.0]]).unwrap());
        assert!(close(y.data(), &[1.0, 0.0], 1e-40));
        let y = softmax_rows(&Tensor::from_rows(&[vec![1f64.ln(), 2f64.ln(), 3f64.ln()]]).unwrap());
        assert!(close(y.data(), &[1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0], 1e-15));
    }

    #[test]
    fn sinusoidal_examples() {
        let e = sinusoidal_embed(0.0, 8, DEFAULT_TEMPERATURE).unwrap();
        assert_eq!(e, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        let e = sinusoidal_embed(std::f64::consts::FRAC_PI_2, 4, DEFAULT_TEMPERATURE).unwrap();
        assert!((e[0] - 1.0).abs() < 1e-15);
        // v=1, dims=4, T=1e4: frequencies 1 and 1e-2
        let e = sinusoidal_embed(1.0, 4, 10000.0).unwrap();
        let want = [1f64.sin(), 1f64.cos(), 0.01f64.sin(), 0.01f64.cos()];
        assert!(close(&e, &want, 1e-15));
        assert!(matches!(sinusoidal_embed(1.0, 3, 1e4), Err(Error::Config(_))));
    }

    #[test]
    fn dynamic_init() {
        let p = LinearParams::init_default(4, 2 * 3 * 3, &mut RngState::new(1));
        let spec = BiasInit::Offset { groups: 2, points: 3 };
        let a = init_dynamic_layer(&p, spec, &mut RngState::new(9)).unwrap();
        let b = init_dynamic_layer(&p, spec, &mut RngState::new(9)).unwrap();
        assert_eq!(a, b);
        assert!(a.weight.data().iter().all(|v| *v == 0.0));
        for t in a.bias.data().chunks(3) {
            assert!((-0.5..=0.5).contains(&t[0]) && (-0.5..=0.5).contains(&t[1]));
            assert_eq!(t[2], -1.0);
        }
        let d = init_dynamic_layer(&p, BiasInit::Default, &mut RngState::new(2)).unwrap();
        assert!(d.weight.data().iter().all(|v| *v == 0.0));
        assert!(d.bias.data().iter().all(|v| v.abs() <= 0.5));
        let bad = init_dynamic_layer(&LinearParams::zeros(4, 5), spec, &mut RngState::new(0));
        assert!(bad.is_err());
    }

    #[test]
    fn rng_fork_is_stable() {
        let r = RngState::new(5);
        let a: Vec<f64> = {
            let mut f = r.fork(2);
            (0..4).map(|_| f.uniform(0.0, 1.0)).collect()
        };
        let mut f2 = RngState::new(5).fork(2);
        let b: Vec<f64> = (0..4).map(|_| f2.uniform(0.0, 1.0)).collect();
        assert_eq!(a, b);
        let mut f3 = r.fork(3);
        assert_ne!(a[0], f3.uniform(0.0, 1.0));
    }
}
