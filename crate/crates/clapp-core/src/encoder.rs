//! Feedforward encoder stack with per-layer state capture and a trace ring
//! retaining the last few steps for delayed context lookups.

use crate::error::{ClappError, Result};
use crate::tensor::{
    add_channel_bias, conv2d, matvec, maxpool2d, Activation, LayerRecord, LayerWiring,
    PoolCapture, Scalar, Tensor,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;

/// Max-pool stage attached to a conv layer. Layers carry at most one.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct PoolSpec {
    pub window: usize,
    pub stride: usize,
}

/// One trainable layer of the encoder.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerSpec {
    Dense {
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
    },
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        activation: Activation,
        #[serde(skip_serializing_if = "Option::is_none")]
        pool: Option<PoolSpec>,
    },
}

impl LayerSpec {
    /// Dimension of the layer's pooled score-space vector.
    pub fn pooled_dim(&self) -> usize {
        match self {
            LayerSpec::Dense { out_dim, .. } => *out_dim,
            LayerSpec::Conv { out_channels, .. } => *out_channels,
        }
    }

    pub fn activation(&self) -> Activation {
        match self {
            LayerSpec::Dense { activation, .. } => *activation,
            LayerSpec::Conv { activation, .. } => *activation,
        }
    }

    /// Output shape given an input shape; checks wiring.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match self {
            LayerSpec::Dense { in_dim, out_dim, .. } => {
                let flat: usize = input.iter().product();
                if flat != *in_dim {
                    return Err(ClappError::dimension(format!(
                        "dense layer expects {} inputs, got shape {:?}",
                        in_dim, input
                    )));
                }
                Ok(vec![*out_dim])
            }
            LayerSpec::Conv {
                in_channels,
                out_channels,
                kernel,
                stride,
                pad,
                pool,
                ..
            } => {
                let (c, h, w) = match input {
                    [c, h, w] => (*c, *h, *w),
                    _ => {
                        return Err(ClappError::dimension(format!(
                            "conv layer expects [C,H,W], got {:?}",
                            input
                        )))
                    }
                };
                if c != *in_channels {
                    return Err(ClappError::dimension(format!(
                        "conv layer expects {} channels, got {}",
                        in_channels, c
                    )));
                }
                let ext = |extent: usize| -> Result<usize> {
                    let padded = extent + 2 * pad;
                    if padded < *kernel {
                        return Err(ClappError::dimension("kernel larger than input".into()));
                    }
                    let span = padded - kernel;
                    if span % stride != 0 {
                        return Err(ClappError::dimension(
                            "non-integral conv output extent".into(),
                        ));
                    }
                    Ok(span / stride + 1)
                };
                let mut oh = ext(h)?;
                let mut ow = ext(w)?;
                if let Some(p) = pool {
                    if p.window > oh || p.window > ow {
                        return Err(ClappError::dimension(format!(
                            "pool window {} larger than map {}x{}",
                            p.window, oh, ow
                        )));
                    }
                    oh = (oh - p.window) / p.stride + 1;
                    ow = (ow - p.window) / p.stride + 1;
                }
                Ok(vec![*out_channels, oh, ow])
            }
        }
    }
}

/// A layer with its parameters. Dense layers absorb the bias as an extra
/// weight column fed by a constant 1; conv layers carry a separate bias.
#[derive(Clone, Debug)]
pub struct Layer<T = f32> {
    pub spec: LayerSpec,
    pub weights: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

/// The feedforward encoder. Weights are immutable during a forward pass;
/// updates are applied only at batch boundaries by the training loop.
#[derive(Clone, Debug)]
pub struct Encoder<T = f32> {
    layers: Vec<Layer<T>>,
}

impl<T: Scalar> Encoder<T> {
    /// Initialize with uniform weights in [-1/sqrt(fan_in), +1/sqrt(fan_in)].
    pub fn init(specs: &[LayerSpec], seed: u64) -> Result<Self> {
        if specs.is_empty() {
            return Err(ClappError::input("encoder needs at least one layer"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(specs.len());
        for spec in specs {
            let layer = match spec {
                LayerSpec::Dense { in_dim, out_dim, .. } => {
                    let fan_in = in_dim + 1;
                    let weights = uniform_tensor(&[*out_dim, fan_in], fan_in, &mut rng);
                    Layer {
                        spec: spec.clone(),
                        weights,
                        bias: None,
                    }
                }
                LayerSpec::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    ..
                } => {
                    let fan_in = in_channels * kernel * kernel;
                    let weights = uniform_tensor(
                        &[*out_channels, *in_channels, *kernel, *kernel],
                        fan_in,
                        &mut rng,
                    );
                    Layer {
                        spec: spec.clone(),
                        weights,
                        bias: Some(Tensor::zeros(&[*out_channels])),
                    }
                }
            };
            layers.push(layer);
        }
        Ok(Self { layers })
    }

    pub fn from_layers(layers: Vec<Layer<T>>) -> Result<Self> {
        if layers.is_empty() {
            return Err(ClappError::input("encoder needs at least one layer"));
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec.clone()).collect()
    }

    /// Run the stack, capturing per-layer records and pooled vectors.
    pub fn forward(&self, x: &Tensor<T>) -> Result<EncoderState<T>> {
        let mut records = Vec::with_capacity(self.layers.len());
        let mut pooled = Vec::with_capacity(self.layers.len());
        let mut current = x.clone();
        for layer in &self.layers {
            let record = layer_forward(layer, &current)?;
            current = record.output.clone();
            pooled.push(pool_to_vector(&record.output)?);
            records.push(record);
        }
        Ok(EncoderState {
            layers: records,
            pooled,
        })
    }

    pub fn cast<U: Scalar>(&self) -> Encoder<U> {
        Encoder {
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    spec: l.spec.clone(),
                    weights: l.weights.cast(),
                    bias: l.bias.as_ref().map(|b| b.cast()),
                })
                .collect(),
        }
    }
}

fn uniform_tensor<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<T> = (0..n)
        .map(|_| T::of(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape/data consistent by construction")
}

/// Forward one layer, producing the record the adjoint needs later.
pub fn layer_forward<T: Scalar>(layer: &Layer<T>, input: &Tensor<T>) -> Result<LayerRecord<T>> {
    match &layer.spec {
        LayerSpec::Dense { in_dim, .. } => {
            let flat: usize = input.shape().iter().product();
            if flat != *in_dim {
                return Err(ClappError::dimension(format!(
                    "dense layer expects {} inputs, got {:?}",
                    in_dim,
                    input.shape()
                )));
            }
            // Append the constant bias input.
            let mut aug = input.data().to_vec();
            aug.push(T::one());
            let x = Tensor::from_vec(aug);
            let a = matvec(&layer.weights, &x)?;
            let activation = layer.spec.activation();
            let z = activation.apply(&a);
            Ok(LayerRecord {
                wiring: LayerWiring::Dense,
                activation,
                input: x,
                pre_activation: a,
                post_activation: z.clone(),
                pool: None,
                output: z,
            })
        }
        LayerSpec::Conv {
            kernel,
            stride,
            pad,
            pool,
            ..
        } => {
            let mut a = conv2d(input, &layer.weights, *stride, *pad)?;
            if let Some(b) = &layer.bias {
                add_channel_bias(&mut a, b)?;
            }
            let activation = layer.spec.activation();
            let z = activation.apply(&a);
            let (output, capture) = match pool {
                Some(p) => {
                    let (out, rec) = maxpool2d(&z, p.window, p.stride)?;
                    (
                        out,
                        Some(PoolCapture {
                            record: rec,
                            window: p.window,
                            stride: p.stride,
                            pre_shape: z.shape().to_vec(),
                        }),
                    )
                }
                None => (z.clone(), None),
            };
            Ok(LayerRecord {
                wiring: LayerWiring::Conv2d {
                    stride: *stride,
                    pad: *pad,
                    kh: *kernel,
                    kw: *kernel,
                },
                activation,
                input: input.clone(),
                pre_activation: a,
                post_activation: z,
                pool: capture,
                output,
            })
        }
    }
}

/// Spatial mean per channel for conv maps; identity for vectors.
pub fn pool_to_vector<T: Scalar>(z: &Tensor<T>) -> Result<Tensor<T>> {
    match z.shape()[..] {
        [_] => Ok(z.clone()),
        [c, h, w] => {
            let inv = T::of(1.0 / (h * w) as f64);
            let mut out = Tensor::zeros(&[c]);
            for ch in 0..c {
                let mut acc = T::zero();
                for i in 0..h * w {
                    acc = acc + z.data()[ch * h * w + i];
                }
                out.data_mut()[ch] = acc * inv;
            }
            Ok(out)
        }
        _ => Err(ClappError::dimension(format!(
            "pool_to_vector expects [C,H,W] or [N], got {:?}",
            z.shape()
        ))),
    }
}

/// Activations and records of one forward pass through every layer.
#[derive(Clone, Debug)]
pub struct EncoderState<T = f32> {
    pub layers: Vec<LayerRecord<T>>,
    /// Score-space vector per layer (spatial mean for conv, output for dense).
    pub pooled: Vec<Tensor<T>>,
}

/// One remembered step: the full encoder state plus the source that fed it.
#[derive(Clone, Debug)]
pub struct TraceEntry<T = f32> {
    pub state: EncoderState<T>,
    pub source_id: u32,
}

/// Ring buffer of the last `depth` recorded states, oldest evicted first.
#[derive(Clone, Debug)]
pub struct TraceBuffer<T = f32> {
    depth: usize,
    entries: VecDeque<TraceEntry<T>>,
    recorded: usize,
}

impl<T: Scalar> TraceBuffer<T> {
    /// `depth` must cover the largest lookback used (max delta + 1 states).
    pub fn new(depth: usize) -> Self {
        Self {
            depth: depth.max(1),
            entries: VecDeque::with_capacity(depth.max(1)),
            recorded: 0,
        }
    }

    pub fn record(&mut self, state: EncoderState<T>, source_id: u32) {
        if self.entries.len() == self.depth {
            self.entries.pop_front();
        }
        self.entries.push_back(TraceEntry { state, source_id });
        self.recorded += 1;
    }

    /// State recorded `delta` steps ago; `delta = 0` is the current state.
    pub fn at(&self, delta: usize) -> Result<&TraceEntry<T>> {
        if delta >= self.entries.len() {
            return Err(ClappError::History {
                needed: delta + 1,
                available: self.entries.len(),
            });
        }
        Ok(&self.entries[self.entries.len() - 1 - delta])
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total states ever recorded (not capped by depth).
    pub fn recorded(&self) -> usize {
        self.recorded
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }
}

/// The six-conv-layer preset, widths divided by `width_divisor` for desk
/// scale (divisor 1 restores the full widths).
pub fn vgg6_preset(in_channels: usize, width_divisor: usize) -> Vec<LayerSpec> {
    let div = width_divisor.max(1);
    let widths = [128, 256, 256, 512, 1024, 1024].map(|w: usize| (w / div).max(1));
    let pool_after = [false, true, false, true, true, true];
    let mut specs = Vec::with_capacity(6);
    let mut in_ch = in_channels;
    for (w, pooled) in widths.iter().zip(pool_after) {
        specs.push(LayerSpec::Conv {
            in_channels: in_ch,
            out_channels: *w,
            kernel: 3,
            stride: 1,
            pad: 1,
            activation: Activation::Relu,
            pool: pooled.then_some(PoolSpec {
                window: 2,
                stride: 2,
            }),
        });
        in_ch = *w;
    }
    specs
}

/// Shapes produced by a stack on a given input; validates the wiring.
pub fn stack_shapes(specs: &[LayerSpec], input_shape: &[usize]) -> Result<Vec<Vec<usize>>> {
    let mut shapes = Vec::with_capacity(specs.len());
    let mut current = input_shape.to_vec();
    for (i, spec) in specs.iter().enumerate() {
        current = spec
            .output_shape(&current)
            .map_err(|e| ClappError::dimension(format!("layer {}: {}", i, e)))?;
        shapes.push(current.clone());
    }
    Ok(shapes)
}
