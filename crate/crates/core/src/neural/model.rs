use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{sigmoid, Conv2d, ConvGeom, Dense};
use super::tensor::Tensor;
use super::NeuralError;
use crate::params::LABEL_DIM;

/// One entry of a declarative architecture.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    /// `C(F, K1, K2, S1, S2)` without its activation. A 1D convolution is
    /// this with `k1 = s1 = 1`.
    Conv2d { filters: usize, k1: usize, k2: usize, s1: usize, s2: usize },
    Fc { out_dim: usize },
    Relu,
    Sigmoid,
    Dropout { p: f64 },
    Flatten,
    /// `[C, 1, W]` to `[1, W, C]`: turns a bank of 1D filter outputs into a
    /// time x frequency image.
    ChannelsToImage,
}

impl LayerSpec {
    pub fn conv(filters: usize, k1: usize, k2: usize, s1: usize, s2: usize) -> Self {
        LayerSpec::Conv2d { filters, k1, k2, s1, s2 }
    }

    pub fn conv1d(filters: usize, k: usize, s: usize) -> Self {
        LayerSpec::Conv2d { filters, k1: 1, k2: k, s1: 1, s2: s }
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            LayerSpec::Conv2d { filters, k1, k2, s1, s2 } => write!(f, "C({filters},{k1},{k2},{s1},{s2})"),
            LayerSpec::Fc { out_dim } => write!(f, "FC-{out_dim}"),
            LayerSpec::Relu => f.write_str("ReLU"),
            LayerSpec::Sigmoid => f.write_str("Sigmoid"),
            LayerSpec::Dropout { p } => write!(f, "Drop-{p}"),
            LayerSpec::Flatten => f.write_str("Flatten"),
            LayerSpec::ChannelsToImage => f.write_str("ChannelsToImage"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputKind {
    Spectrogram,
    RawAudio,
    Bow,
}

impl InputKind {
    pub fn default_shape(self) -> Vec<usize> {
        match self {
            InputKind::Spectrogram => vec![1, 64, 257],
            InputKind::RawAudio => vec![1, 1, 16384],
            InputKind::Bow => vec![1000],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelName {
    FCLinear,
    FC1,
    FC2,
    FC3,
    Conv1,
    Conv2,
    Conv3,
    Conv4,
    Conv5,
    Conv6,
    Conv6XL,
    ConvE2E,
}

impl ModelName {
    pub const ALL: [ModelName; 12] = [
        ModelName::FCLinear,
        ModelName::FC1,
        ModelName::FC2,
        ModelName::FC3,
        ModelName::Conv1,
        ModelName::Conv2,
        ModelName::Conv3,
        ModelName::Conv4,
        ModelName::Conv5,
        ModelName::Conv6,
        ModelName::Conv6XL,
        ModelName::ConvE2E,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelName::FCLinear => "FCLinear",
            ModelName::FC1 => "FC1",
            ModelName::FC2 => "FC2",
            ModelName::FC3 => "FC3",
            ModelName::Conv1 => "Conv1",
            ModelName::Conv2 => "Conv2",
            ModelName::Conv3 => "Conv3",
            ModelName::Conv4 => "Conv4",
            ModelName::Conv5 => "Conv5",
            ModelName::Conv6 => "Conv6",
            ModelName::Conv6XL => "Conv6XL",
            ModelName::ConvE2E => "ConvE2E",
        }
    }

    pub fn input_kind(self) -> InputKind {
        match self {
            ModelName::FCLinear | ModelName::FC1 | ModelName::FC2 | ModelName::FC3 => InputKind::Bow,
            ModelName::ConvE2E => InputKind::RawAudio,
            _ => InputKind::Spectrogram,
        }
    }
}

impl fmt::Display for ModelName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelName {
    type Err = NeuralError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key: String = s.chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>().to_ascii_lowercase();
        ModelName::ALL
            .into_iter()
            .find(|m| m.as_str().to_ascii_lowercase() == key)
            .ok_or_else(|| NeuralError::UnknownModel(s.to_string()))
    }
}

/// Declarative architecture plus the input it expects (per sample, no
/// batch axis).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub input_kind: InputKind,
    pub input_shape: Vec<usize>,
    pub width_scale: f64,
    pub layers: Vec<LayerSpec>,
}

impl ModelSpec {
    /// Checks the output head is `FC-368` followed by a sigmoid.
    pub fn has_label_head(&self) -> bool {
        matches!(self.layers[..], [.., LayerSpec::Fc { out_dim: LABEL_DIM }, LayerSpec::Sigmoid])
    }

    /// Output shapes per layer and the trainable-weight count of each.
    pub fn shape_trace(&self) -> Result<Vec<(LayerSpec, Vec<usize>, usize)>, NeuralError> {
        let mut shape = self.input_shape.clone();
        let mut out = Vec::with_capacity(self.layers.len());
        for &l in &self.layers {
            let (next, params) = next_shape(&shape, l)?;
            out.push((l, next.clone(), params));
            shape = next;
        }
        Ok(out)
    }

    pub fn param_count(&self) -> Result<usize, NeuralError> {
        Ok(self.shape_trace()?.iter().map(|(_, _, p)| p).sum())
    }
}

fn next_shape(shape: &[usize], l: LayerSpec) -> Result<(Vec<usize>, usize), NeuralError> {
    let err = |msg: String| NeuralError::Shape(msg);
    match l {
        LayerSpec::Conv2d { filters, k1, k2, s1, s2 } => {
            let &[c, h, w] = shape else { return Err(err(format!("{l} needs a [C,H,W] input, got {shape:?}"))) };
            if s1 == 0 || s2 == 0 || k1 == 0 || k2 == 0 || filters == 0 {
                return Err(err(format!("{l}: kernels, strides and filters must be positive")));
            }
            let g = ConvGeom::new([c, h, w], filters, (k1, k2), (s1, s2));
            Ok((vec![filters, g.out_h, g.out_w], filters * g.patch_len() + filters))
        }
        LayerSpec::Fc { out_dim } => {
            let &[n] = shape else { return Err(err(format!("{l} needs a flat input, got {shape:?}"))) };
            Ok((vec![out_dim], n * out_dim + out_dim))
        }
        LayerSpec::Dropout { p } if !(0.0..1.0).contains(&p) => Err(err(format!("dropout p={p} outside [0,1)"))),
        LayerSpec::Relu | LayerSpec::Sigmoid | LayerSpec::Dropout { .. } => Ok((shape.to_vec(), 0)),
        LayerSpec::Flatten => Ok((vec![shape.iter().product()], 0)),
        LayerSpec::ChannelsToImage => {
            let &[c, 1, w] = shape else { return Err(err(format!("{l} needs a [C,1,W] input, got {shape:?}"))) };
            Ok((vec![1, w, c], 0))
        }
    }
}

fn scaled(n: usize, width_scale: f64) -> usize {
    ((n as f64 * width_scale).ceil() as usize).max(1)
}

/// Architecture from the reference tables, channel and unit counts
/// multiplied by `width_scale` (kernels and strides untouched).
pub fn build_model(name: ModelName, width_scale: f64) -> Result<ModelSpec, NeuralError> {
    if !(width_scale > 0.0 && width_scale.is_finite()) {
        return Err(NeuralError::Shape(format!("width_scale must be positive, got {width_scale}")));
    }
    let s = |n: usize| scaled(n, width_scale);
    let c = |f: usize, k1, k2, s1, s2| LayerSpec::conv(s(f), k1, k2, s1, s2);
    let fc = |n: usize| LayerSpec::Fc { out_dim: s(n) };
    let drop = |p: f64| LayerSpec::Dropout { p };
    use LayerSpec::Relu;

    let conv6 = || {
        vec![
            c(32, 3, 3, 2, 2),
            c(71, 3, 3, 2, 2),
            c(128, 3, 4, 2, 3),
            c(128, 3, 3, 2, 2),
            c(128, 3, 3, 2, 2),
            c(128, 3, 3, 1, 2),
        ]
    };
    let convs: Vec<LayerSpec> = match name {
        ModelName::Conv1 => vec![c(38, 13, 26, 13, 26)],
        ModelName::Conv2 => vec![c(35, 6, 7, 5, 6), c(87, 6, 9, 5, 8)],
        ModelName::Conv3 => vec![c(32, 4, 5, 3, 4), c(98, 4, 6, 3, 5), c(128, 4, 6, 3, 5)],
        ModelName::Conv4 => vec![c(32, 3, 4, 2, 3), c(65, 3, 4, 2, 3), c(105, 3, 4, 2, 3), c(128, 4, 5, 3, 4)],
        ModelName::Conv5 => vec![
            c(32, 3, 3, 2, 2),
            c(98, 3, 3, 2, 2),
            c(128, 3, 4, 2, 3),
            c(128, 3, 5, 2, 4),
            c(128, 3, 3, 2, 2),
        ],
        ModelName::Conv6 => conv6(),
        ModelName::Conv6XL => vec![
            c(64, 3, 3, 2, 2),
            c(128, 3, 3, 2, 2),
            c(128, 3, 4, 2, 3),
            c(128, 3, 3, 2, 2),
            c(256, 3, 3, 2, 2),
            c(256, 3, 3, 1, 2),
        ],
        ModelName::ConvE2E => {
            // the 257-filter layer fixes the frequency axis of the learned
            // spectrogram and is never scaled
            let mut v = vec![
                LayerSpec::conv1d(s(96), 64, 4),
                LayerSpec::conv1d(s(96), 32, 4),
                LayerSpec::conv1d(s(128), 16, 4),
                LayerSpec::conv1d(257, 8, 4),
            ];
            v.extend(conv6());
            v
        }
        _ => Vec::new(),
    };

    let mut layers = Vec::new();
    match name {
        ModelName::FCLinear => layers.extend([fc(869), drop(0.2)]),
        ModelName::FC1 => layers.extend([fc(868), Relu, drop(0.3)]),
        ModelName::FC2 => layers.extend([fc(603), Relu, drop(0.1), fc(602), Relu, drop(0.3)]),
        ModelName::FC3 => layers.extend([fc(560), Relu, fc(500), Relu, drop(0.2), fc(400), Relu, drop(0.4)]),
        ModelName::ConvE2E => {
            for (i, l) in convs.into_iter().enumerate() {
                layers.extend([l, Relu]);
                if i == 3 {
                    layers.push(LayerSpec::ChannelsToImage);
                }
            }
            layers.extend([LayerSpec::Flatten, fc(512), Relu]);
        }
        _ => {
            for l in convs {
                layers.extend([l, Relu]);
            }
            layers.extend([LayerSpec::Flatten, fc(512), Relu]);
        }
    }
    layers.extend([LayerSpec::Fc { out_dim: LABEL_DIM }, LayerSpec::Sigmoid]);

    let input_kind = name.input_kind();
    Ok(ModelSpec { name: name.to_string(), input_kind, input_shape: input_kind.default_shape(), width_scale, layers })
}

#[derive(Debug, Clone, PartialEq)]
enum Layer {
    Conv(Conv2d),
    Dense(Dense),
    Relu,
    Sigmoid,
    Dropout(f64),
    /// Pure reshape.
    Flatten,
    ChannelsToImage { c: usize, w: usize },
}

pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

/// Activations recorded by a forward pass, consumed by [`Model::backward`].
pub struct Trace {
    batch: usize,
    /// `acts[i]` is the input of layer `i`; the last entry is the output.
    acts: Vec<Vec<f64>>,
    masks: Vec<Option<Vec<f64>>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("trace holds at least the input")
    }

    /// Sign pattern of every ReLU input, used to spot finite-difference
    /// probes that straddle a kink.
    pub(crate) fn relu_pattern(&self, layers: &[LayerSpec]) -> Vec<bool> {
        layers
            .iter()
            .zip(&self.acts)
            .filter(|(l, _)| **l == LayerSpec::Relu)
            .flat_map(|(_, a)| a.iter().map(|&v| v > 0.0))
            .collect()
    }
}

/// Gradients in [`Model::params`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<Vec<f64>>);

impl Gradients {
    pub fn max_abs(&self) -> f64 {
        self.0.iter().flatten().fold(0.0, |m, g| m.max(g.abs()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamShape {
    pub name: String,
    pub shape: Vec<usize>,
}

/// An instantiated network.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    output_dim: usize,
    layers: Vec<Layer>,
}

impl Model {
    pub fn new<R: Rng + ?Sized>(spec: ModelSpec, rng: &mut R) -> Result<Self, NeuralError> {
        let mut shape = spec.input_shape.clone();
        let mut layers = Vec::with_capacity(spec.layers.len());
        for &l in &spec.layers {
            let (next, _) = next_shape(&shape, l)?;
            layers.push(match l {
                LayerSpec::Conv2d { filters, k1, k2, s1, s2 } => {
                    let g = ConvGeom::new([shape[0], shape[1], shape[2]], filters, (k1, k2), (s1, s2));
                    Layer::Conv(Conv2d::new(g, rng))
                }
                LayerSpec::Fc { out_dim } => Layer::Dense(Dense::new(shape[0], out_dim, rng)),
                LayerSpec::Relu => Layer::Relu,
                LayerSpec::Sigmoid => Layer::Sigmoid,
                LayerSpec::Dropout { p } => Layer::Dropout(p),
                LayerSpec::Flatten => Layer::Flatten,
                LayerSpec::ChannelsToImage => Layer::ChannelsToImage { c: shape[0], w: shape[2] },
            });
            shape = next;
        }
        let output_dim = shape.iter().product();
        Ok(Model { spec, output_dim, layers })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn input_len(&self) -> usize {
        self.spec.input_shape.iter().product()
    }

    pub fn params(&self) -> Vec<&Vec<f64>> {
        self.layers
            .iter()
            .flat_map(|l| match l {
                Layer::Conv(c) => vec![&c.weight, &c.bias],
                Layer::Dense(d) => vec![&d.weight, &d.bias],
                _ => vec![],
            })
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Vec<f64>> {
        self.layers
            .iter_mut()
            .flat_map(|l| match l {
                Layer::Conv(c) => vec![&mut c.weight, &mut c.bias],
                Layer::Dense(d) => vec![&mut d.weight, &mut d.bias],
                _ => vec![],
            })
            .collect()
    }

    pub fn param_shapes(&self) -> Vec<ParamShape> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            match l {
                Layer::Conv(c) => {
                    let g = &c.geom;
                    out.push(ParamShape { name: format!("layer{i}.weight"), shape: vec![g.out_c, g.in_c, g.k1, g.k2] });
                    out.push(ParamShape { name: format!("layer{i}.bias"), shape: vec![g.out_c] });
                }
                Layer::Dense(d) => {
                    out.push(ParamShape { name: format!("layer{i}.weight"), shape: vec![d.out_dim, d.in_dim] });
                    out.push(ParamShape { name: format!("layer{i}.bias"), shape: vec![d.out_dim] });
                }
                _ => {}
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Replaces all weights; lengths must match [`Model::param_shapes`].
    pub fn set_params(&mut self, values: Vec<Vec<f64>>) -> Result<(), NeuralError> {
        let mut slots = self.params_mut();
        if slots.len() != values.len() {
            return Err(NeuralError::Shape(format!("expected {} weight tensors, got {}", slots.len(), values.len())));
        }
        for (slot, v) in slots.iter().zip(&values) {
            if slot.len() != v.len() {
                return Err(NeuralError::Shape(format!("weight tensor of {} values, got {}", slot.len(), v.len())));
            }
        }
        for (slot, v) in slots.iter_mut().zip(values) {
            **slot = v;
        }
        Ok(())
    }

    fn check_input(&self, x: &Tensor) -> Result<usize, NeuralError> {
        let batch = x.batch();
        if x.shape().len() != self.spec.input_shape.len() + 1 || x.shape()[1..] != self.spec.input_shape[..] {
            return Err(NeuralError::Shape(format!(
                "{} expects [B, {:?}], got {:?}",
                self.spec.name,
                self.spec.input_shape,
                x.shape()
            )));
        }
        Ok(batch)
    }

    pub fn forward(&self, x: &Tensor, mut mode: Mode<'_>) -> Result<Trace, NeuralError> {
        let batch = self.check_input(x)?;
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        let mut masks = Vec::with_capacity(self.layers.len());
        acts.push(x.data().to_vec());
        for layer in &self.layers {
            let input = acts.last().expect("non-empty");
            let mut mask = None;
            let out = match layer {
                Layer::Conv(c) => c.forward(input, batch),
                Layer::Dense(d) => d.forward(input, batch),
                Layer::Relu => input.iter().map(|&v| v.max(0.0)).collect(),
                Layer::Sigmoid => input.iter().map(|&v| sigmoid(v)).collect(),
                Layer::Dropout(p) => match &mut mode {
                    Mode::Eval => input.clone(),
                    Mode::Train(rng) => {
                        let keep = 1.0 - p;
                        let m: Vec<f64> =
                            input.iter().map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect();
                        let out = input.iter().zip(&m).map(|(v, k)| v * k).collect();
                        mask = Some(m);
                        out
                    }
                },
                Layer::Flatten => input.clone(),
                Layer::ChannelsToImage { c, w } => {
                    let mut out = vec![0.0; input.len()];
                    for b in 0..batch {
                        let src = &input[b * c * w..(b + 1) * c * w];
                        let dst = &mut out[b * c * w..(b + 1) * c * w];
                        for ch in 0..*c {
                            for t in 0..*w {
                                dst[t * c + ch] = src[ch * w + t];
                            }
                        }
                    }
                    out
                }
            };
            if cfg!(debug_assertions) && !out.iter().all(|v| v.is_finite()) {
                return Err(NeuralError::NonFinite(format!("non-finite activation after {layer:?}")));
            }
            masks.push(mask);
            acts.push(out);
        }
        Ok(Trace { batch, acts, masks })
    }

    /// Eval-mode scores, shape `[B, output_dim]`.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor, NeuralError> {
        let batch = x.batch();
        let trace = self.forward(x, Mode::Eval)?;
        let out = trace.acts.into_iter().next_back().expect("non-empty");
        Tensor::new(vec![batch, self.output_dim], out)
    }

    /// Reverse pass given `d_out = dL/d(output)` for the whole batch.
    pub fn backward(&self, trace: &Trace, d_out: &[f64]) -> Gradients {
        assert_eq!(d_out.len(), trace.output().len());
        let mut grads: Vec<Vec<f64>> = self.params().iter().map(|p| vec![0.0; p.len()]).collect();
        let mut slot = grads.len();
        let mut delta = d_out.to_vec();
        let first_trainable = self.layers.iter().position(|l| matches!(l, Layer::Conv(_) | Layer::Dense(_)));
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let input = &trace.acts[i];
            let output = &trace.acts[i + 1];
            let need_dx = first_trainable.is_some_and(|f| i > f);
            delta = match layer {
                Layer::Conv(c) => {
                    slot -= 2;
                    let (dw, db) = grads[slot..].split_at_mut(1);
                    match c.backward(input, &delta, &mut dw[0], &mut db[0], need_dx) {
                        Some(dx) => dx,
                        None => break,
                    }
                }
                Layer::Dense(d) => {
                    slot -= 2;
                    let (dw, db) = grads[slot..].split_at_mut(1);
                    match d.backward(input, &delta, &mut dw[0], &mut db[0], need_dx) {
                        Some(dx) => dx,
                        None => break,
                    }
                }
                Layer::Relu => delta.iter().zip(output).map(|(g, &y)| if y > 0.0 { *g } else { 0.0 }).collect(),
                Layer::Sigmoid => delta.iter().zip(output).map(|(g, &s)| g * s * (1.0 - s)).collect(),
                Layer::Dropout(_) => match &trace.masks[i] {
                    Some(m) => delta.iter().zip(m).map(|(g, k)| g * k).collect(),
                    None => delta,
                },
                Layer::Flatten => delta,
                Layer::ChannelsToImage { c, w } => {
                    let mut out = vec![0.0; delta.len()];
                    for b in 0..trace.batch {
                        let src = &delta[b * c * w..(b + 1) * c * w];
                        let dst = &mut out[b * c * w..(b + 1) * c * w];
                        for ch in 0..*c {
                            for t in 0..*w {
                                dst[ch * w + t] = src[t * c + ch];
                            }
                        }
                    }
                    out
                }
            };
        }
        Gradients(grads)
    }
}
