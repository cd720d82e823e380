//! Dense tensor kernel: linear algebra, 2D convolution, max-pooling,
//! activations, and the within-layer adjoint used by layer-local updates.
//!
//! Everything is plain row-major `Vec` storage with fixed summation order so
//! repeated runs are bit-identical.

use crate::error::{ClappError, Result};
use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::distributions::uniform::SampleUniform;
use std::fmt::{Debug, Display};
use std::ops::{Index, IndexMut};

/// Floating-point element type. Training defaults to `f32`; oracles run `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + SampleUniform
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    fn of(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("literal representable in scalar type")
    }

    fn as_f64(self) -> f64 {
        <Self as ToPrimitive>::to_f64(&self).expect("scalar convertible to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Dense N-dimensional array, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(ClappError::dimension(format!(
                "shape {:?} expects {} elements, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(ClappError::dimension(format!(
                "zero extent in shape {:?}",
                shape
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); n],
        }
    }

    pub fn filled(shape: &[usize], v: T) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    /// 1-D tensor from a plain vector.
    pub fn from_vec(data: Vec<T>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// 2-D tensor from rows; rows must have equal length.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            return Err(ClappError::dimension("ragged rows".to_string()));
        }
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            data.extend_from_slice(row);
        }
        Tensor::new(vec![r, c], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(ClappError::dimension(format!(
                "cannot reshape {} elements to {:?}",
                self.data.len(),
                shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(ClappError::dimension(format!(
                "expected matrix, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(ClappError::dimension(format!(
                "elementwise op on {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    /// self += other * s, shapes must match.
    pub fn add_scaled(&mut self, other: &Self, s: T) -> Result<()> {
        if self.shape != other.shape {
            return Err(ClappError::dimension(format!(
                "add_scaled on {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b * s;
        }
        Ok(())
    }

    pub fn l2_norm(&self) -> f64 {
        self.data
            .iter()
            .map(|v| {
                let x = v.as_f64();
                x * x
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data
            .iter()
            .map(|v| v.as_f64().abs())
            .fold(0.0, f64::max)
    }

    /// Convert element type (used when moving between the f32 training path
    /// and f64 oracles).
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    /// Matrix transpose.
    pub fn transposed(&self) -> Result<Self> {
        let (r, c) = self.dims2()?;
        let mut out = Self::zeros(&[c, r]);
        for i in 0..r {
            for j in 0..c {
                out.data[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(out)
    }
}

impl<T: Scalar> Index<(usize, usize)> for Tensor<T> {
    type Output = T;
    fn index(&self, (i, j): (usize, usize)) -> &T {
        let (_, c) = (self.shape[0], self.shape[1]);
        &self.data[i * c + j]
    }
}

impl<T: Scalar> IndexMut<(usize, usize)> for Tensor<T> {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        let c = self.shape[1];
        &mut self.data[i * c + j]
    }
}

/// C[i][j] = sum_l A[i][l] * B[l][j], accumulated in row-major order.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(ClappError::dimension(format!(
            "matmul inner dims {} vs {}",
            k, k2
        )));
    }
    let mut out = Tensor::zeros(&[m, n]);
    for i in 0..m {
        for j in 0..n {
            let mut acc = T::zero();
            for l in 0..k {
                acc = acc + a.data[i * k + l] * b.data[l * n + j];
            }
            out.data[i * n + j] = acc;
        }
    }
    Ok(out)
}

/// y = M x for a matrix and a vector.
pub fn matvec<T: Scalar>(m: &Tensor<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let (r, c) = m.dims2()?;
    if x.rank() != 1 || x.len() != c {
        return Err(ClappError::dimension(format!(
            "matvec {:?} by {:?}",
            m.shape, x.shape
        )));
    }
    let mut out = Tensor::zeros(&[r]);
    for i in 0..r {
        let mut acc = T::zero();
        for j in 0..c {
            acc = acc + m.data[i * c + j] * x.data[j];
        }
        out.data[i] = acc;
    }
    Ok(out)
}

/// y = M^T x without materializing the transpose.
pub fn matvec_transposed<T: Scalar>(m: &Tensor<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let (r, c) = m.dims2()?;
    if x.rank() != 1 || x.len() != r {
        return Err(ClappError::dimension(format!(
            "matvec_transposed {:?} by {:?}",
            m.shape, x.shape
        )));
    }
    let mut out = Tensor::zeros(&[c]);
    for j in 0..c {
        let mut acc = T::zero();
        for i in 0..r {
            acc = acc + m.data[i * c + j] * x.data[i];
        }
        out.data[j] = acc;
    }
    Ok(out)
}

pub fn dot<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<T> {
    if a.shape() != b.shape() {
        return Err(ClappError::dimension(format!(
            "dot on {:?} vs {:?}",
            a.shape, b.shape
        )));
    }
    let mut acc = T::zero();
    for (&x, &y) in a.data.iter().zip(&b.data) {
        acc = acc + x * y;
    }
    Ok(acc)
}

/// Outer product u v^T.
pub fn outer<T: Scalar>(u: &Tensor<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
    if u.rank() != 1 || v.rank() != 1 {
        return Err(ClappError::dimension("outer product needs vectors".into()));
    }
    let (r, c) = (u.len(), v.len());
    let mut out = Tensor::zeros(&[r, c]);
    for i in 0..r {
        for j in 0..c {
            out.data[i * c + j] = u.data[i] * v.data[j];
        }
    }
    Ok(out)
}

/// Cross-correlation of x [Cin,H,W] with w [Cout,Cin,kh,kw]. The output
/// extent must divide exactly; bias is folded in by the caller.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let (cin, h, wd) = match x.shape()[..] {
        [c, h, w] => (c, h, w),
        _ => {
            return Err(ClappError::dimension(format!(
                "conv2d input must be [C,H,W], got {:?}",
                x.shape
            )))
        }
    };
    let (cout, cin_w, kh, kw) = match w.shape()[..] {
        [o, i, a, b] => (o, i, a, b),
        _ => {
            return Err(ClappError::dimension(format!(
                "conv2d kernel must be [Cout,Cin,kh,kw], got {:?}",
                w.shape
            )))
        }
    };
    if cin != cin_w {
        return Err(ClappError::dimension(format!(
            "conv2d channels: input {} vs kernel {}",
            cin, cin_w
        )));
    }
    if stride == 0 {
        return Err(ClappError::dimension("conv2d stride must be >= 1".into()));
    }
    let oh = conv_extent(h, kh, stride, pad)?;
    let ow = conv_extent(wd, kw, stride, pad)?;
    let mut out = Tensor::zeros(&[cout, oh, ow]);
    for o in 0..cout {
        for r in 0..oh {
            for c in 0..ow {
                let mut acc = T::zero();
                for ci in 0..cin {
                    for dr in 0..kh {
                        let ih = (r * stride + dr) as isize - pad as isize;
                        if ih < 0 || ih as usize >= h {
                            continue;
                        }
                        for dc in 0..kw {
                            let iw = (c * stride + dc) as isize - pad as isize;
                            if iw < 0 || iw as usize >= wd {
                                continue;
                            }
                            acc = acc
                                + x.data[(ci * h + ih as usize) * wd + iw as usize]
                                    * w.data[((o * cin + ci) * kh + dr) * kw + dc];
                        }
                    }
                }
                out.data[(o * oh + r) * ow + c] = acc;
            }
        }
    }
    Ok(out)
}

fn conv_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = input + 2 * pad;
    if padded < kernel {
        return Err(ClappError::dimension(format!(
            "kernel {} larger than padded input {}",
            kernel, padded
        )));
    }
    let span = padded - kernel;
    if span % stride != 0 {
        return Err(ClappError::dimension(format!(
            "non-integral output extent: ({} - {}) not divisible by stride {}",
            padded, kernel, stride
        )));
    }
    Ok(span / stride + 1)
}

/// Add a per-channel bias to a [C,H,W] map in place.
pub fn add_channel_bias<T: Scalar>(a: &mut Tensor<T>, b: &Tensor<T>) -> Result<()> {
    let (c, h, w) = match a.shape()[..] {
        [c, h, w] => (c, h, w),
        _ => return Err(ClappError::dimension("bias add needs [C,H,W]".into())),
    };
    if b.rank() != 1 || b.len() != c {
        return Err(ClappError::dimension(format!(
            "bias length {} vs {} channels",
            b.len(),
            c
        )));
    }
    for ch in 0..c {
        for i in 0..h * w {
            a.data[ch * h * w + i] = a.data[ch * h * w + i] + b.data[ch];
        }
    }
    Ok(())
}

/// Winning input index per pooled output cell. Ties resolve to the first
/// index in row-major order so adjoint routing is deterministic.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PoolRecord {
    /// Flat index into the pooled input, one entry per output cell.
    pub argmax: Vec<usize>,
    pub out_shape: Vec<usize>,
}

/// Per-window maximum over a [C,H,W] map.
pub fn maxpool2d<T: Scalar>(
    x: &Tensor<T>,
    window: usize,
    stride: usize,
) -> Result<(Tensor<T>, PoolRecord)> {
    let (c, h, w) = match x.shape()[..] {
        [c, h, w] => (c, h, w),
        _ => return Err(ClappError::dimension("maxpool2d needs [C,H,W]".into())),
    };
    if window == 0 || stride == 0 {
        return Err(ClappError::dimension("pool window/stride must be >= 1".into()));
    }
    if window > h || window > w {
        return Err(ClappError::dimension(format!(
            "pool window {} larger than input {}x{}",
            window, h, w
        )));
    }
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    let mut out = Tensor::zeros(&[c, oh, ow]);
    let mut argmax = vec![0usize; c * oh * ow];
    for ch in 0..c {
        for r in 0..oh {
            for cl in 0..ow {
                let mut best = T::neg_infinity();
                let mut best_idx = 0usize;
                for dr in 0..window {
                    for dc in 0..window {
                        let idx = (ch * h + r * stride + dr) * w + cl * stride + dc;
                        let v = x.data[idx];
                        if v > best {
                            best = v;
                            best_idx = idx;
                        }
                    }
                }
                let o = (ch * oh + r) * ow + cl;
                out.data[o] = best;
                argmax[o] = best_idx;
            }
        }
    }
    Ok((
        out,
        PoolRecord {
            argmax,
            out_shape: vec![c, oh, ow],
        },
    ))
}

/// Pointwise non-linearity of a layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Linear,
}

impl Activation {
    pub fn apply<T: Scalar>(self, a: &Tensor<T>) -> Tensor<T> {
        match self {
            Activation::Relu => relu(a),
            Activation::Linear => a.clone(),
        }
    }

    pub fn derivative<T: Scalar>(self, a: &Tensor<T>) -> Tensor<T> {
        match self {
            Activation::Relu => relu_prime(a),
            Activation::Linear => Tensor::filled(a.shape(), T::one()),
        }
    }
}

pub fn relu<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    a.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Derivative of ReLU; the subgradient at zero is taken as 0.
pub fn relu_prime<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    a.map(|v| if v > T::zero() { T::one() } else { T::zero() })
}

/// How a trainable layer is wired. Kernel extents ride along so the adjoint
/// can be computed from the record alone.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LayerWiring {
    Dense,
    Conv2d {
        stride: usize,
        pad: usize,
        kh: usize,
        kw: usize,
    },
}

/// Captured max-pool stage inside a layer.
#[derive(Clone, Debug)]
pub struct PoolCapture {
    pub record: PoolRecord,
    pub window: usize,
    pub stride: usize,
    /// Shape of the pre-pool activation map.
    pub pre_shape: Vec<usize>,
}

/// Everything the forward pass of one trainable layer saw, enough to run the
/// within-layer adjoint later.
#[derive(Clone, Debug)]
pub struct LayerRecord<T = f32> {
    pub wiring: LayerWiring,
    pub activation: Activation,
    /// Layer input x (for dense layers this includes the appended bias 1).
    pub input: Tensor<T>,
    /// Summed input a.
    pub pre_activation: Tensor<T>,
    /// z = rho(a), before pooling.
    pub post_activation: Tensor<T>,
    pub pool: Option<PoolCapture>,
    /// Final layer output (post-pool; equals post_activation without pooling).
    pub output: Tensor<T>,
}

/// Gradients of one layer's parameters.
#[derive(Clone, Debug)]
pub struct LayerGrads<T = f32> {
    pub weights: Tensor<T>,
    /// Conv layers carry a separate bias; dense layers absorb it.
    pub bias: Option<Tensor<T>>,
}

/// Within-layer adjoint: given dL/d(layer output), route back through the
/// optional max-pool and the activation, then accumulate parameter gradients.
///
/// For a dense layer this is `upstream_j * rho'(a_j) * x_i`; for conv the
/// pooled upstream is scattered through the recorded argmax indices and
/// summed over every spatial position sharing a kernel weight.
pub fn layer_adjoint<T: Scalar>(
    upstream: &Tensor<T>,
    record: &LayerRecord<T>,
) -> Result<LayerGrads<T>> {
    if upstream.shape() != record.output.shape() {
        return Err(ClappError::dimension(format!(
            "upstream shape {:?} vs layer output {:?}",
            upstream.shape(),
            record.output.shape()
        )));
    }
    // Route through the pooling stage.
    let d_post = match &record.pool {
        Some(capture) => {
            let mut d = Tensor::zeros(&capture.pre_shape);
            for (cell, &src) in capture.record.argmax.iter().enumerate() {
                d.data_mut()[src] = d.data()[src] + upstream.data()[cell];
            }
            d
        }
        None => upstream.clone(),
    };
    // dL/da = dL/dz * rho'(a).
    let rho_prime = record.activation.derivative(&record.pre_activation);
    let d_pre = d_post.zip_map(&rho_prime, |g, dp| g * dp)?;

    match record.wiring {
        LayerWiring::Dense => {
            let grads = outer(&d_pre, &record.input)?;
            Ok(LayerGrads {
                weights: grads,
                bias: None,
            })
        }
        LayerWiring::Conv2d {
            stride,
            pad,
            kh,
            kw,
        } => {
            let (cin, h, w) = match record.input.shape()[..] {
                [c, h, w] => (c, h, w),
                _ => return Err(ClappError::dimension("conv record input not [C,H,W]".into())),
            };
            let (cout, oh, ow) = match d_pre.shape()[..] {
                [c, h, w] => (c, h, w),
                _ => return Err(ClappError::dimension("conv pre-activation not [C,H,W]".into())),
            };
            let mut grad_w = Tensor::zeros(&[cout, cin, kh, kw]);
            let mut grad_b = Tensor::zeros(&[cout]);
            for o in 0..cout {
                let mut bias_acc = T::zero();
                for r in 0..oh {
                    for c in 0..ow {
                        let g = d_pre.data()[(o * oh + r) * ow + c];
                        bias_acc = bias_acc + g;
                        if g == T::zero() {
                            continue;
                        }
                        for ci in 0..cin {
                            for dr in 0..kh {
                                let ih = (r * stride + dr) as isize - pad as isize;
                                if ih < 0 || ih as usize >= h {
                                    continue;
                                }
                                for dc in 0..kw {
                                    let iw = (c * stride + dc) as isize - pad as isize;
                                    if iw < 0 || iw as usize >= w {
                                        continue;
                                    }
                                    let wi = ((o * cin + ci) * kh + dr) * kw + dc;
                                    grad_w.data_mut()[wi] = grad_w.data()[wi]
                                        + g * record.input.data()
                                            [(ci * h + ih as usize) * w + iw as usize];
                                }
                            }
                        }
                    }
                }
                grad_b.data_mut()[o] = bias_acc;
            }
            Ok(LayerGrads {
                weights: grad_w,
                bias: Some(grad_b),
            })
        }
    }
}
