//! Reference architectures: a configurable MLP and a small conv-relu-pool CNN.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::bitloss::GroupCostFacts;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::quantizer::{BitMode, QuantPlan, Role};
use crate::tensor::Tensor;

fn default_kernel() -> usize {
    3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ModelSpec {
    /// `widths` runs from the input dimension to the class count.
    Mlp {
        widths: Vec<usize>,
        #[serde(default)]
        seed: u64,
    },
    /// One `conv(kernel, pad kernel/2) -> relu -> maxpool 2` stage per
    /// entry of `channels`, then a linear head through `hidden`.
    Cnn {
        input: [usize; 3],
        channels: Vec<usize>,
        #[serde(default)]
        hidden: Vec<usize>,
        classes: usize,
        #[serde(default = "default_kernel")]
        kernel: usize,
        #[serde(default)]
        seed: u64,
    },
}

impl ModelSpec {
    pub fn seed(&self) -> u64 {
        match self {
            ModelSpec::Mlp { seed, .. } | ModelSpec::Cnn { seed, .. } => *seed,
        }
    }

    pub fn set_seed(&mut self, s: u64) {
        match self {
            ModelSpec::Mlp { seed, .. } | ModelSpec::Cnn { seed, .. } => *seed = s,
        }
    }

    /// Per-sample input shape.
    pub fn input_shape(&self) -> Vec<usize> {
        match self {
            ModelSpec::Mlp { widths, .. } => vec![widths.first().copied().unwrap_or(0)],
            ModelSpec::Cnn { input, .. } => input.to_vec(),
        }
    }

    pub fn classes(&self) -> usize {
        match self {
            ModelSpec::Mlp { widths, .. } => widths.last().copied().unwrap_or(0),
            ModelSpec::Cnn { classes, .. } => *classes,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    /// `y = x W + b` with `W` stored `[in, out]`.
    Linear {
        name: String,
        weight: ParamId,
        bias: ParamId,
        in_features: usize,
        out_features: usize,
    },
    /// Weights stored `[out, in, k, k]`.
    Conv2d {
        name: String,
        weight: ParamId,
        bias: ParamId,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    MaxPool2d {
        kernel: usize,
    },
    Flatten,
}

/// Static per-layer shape facts for linear and conv layers.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerFacts {
    pub layer: usize,
    pub name: String,
    pub weight_elements: u64,
    pub out_channels: u64,
    /// Elements of the layer input for one sample.
    pub input_elements: u64,
    /// Multiply-accumulates for one sample.
    pub macs: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    layers: Vec<Layer>,
    params: ParamStore,
    quantized: bool,
}

fn kaiming_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

fn invalid(layer: impl Into<String>, reason: impl Into<String>) -> Error {
    Error::InvalidModel {
        layer: layer.into(),
        reason: reason.into(),
    }
}

impl Model {
    /// Builds the model with Kaiming-uniform weights drawn from the spec seed
    /// and zero biases.
    pub fn build(spec: &ModelSpec) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed());
        let mut params = ParamStore::new();
        let mut layers = Vec::new();
        let linear = |params: &mut ParamStore,
                      layers: &mut Vec<Layer>,
                      rng: &mut ChaCha8Rng,
                      idx: usize,
                      i: usize,
                      o: usize|
         -> Result<()> {
            let name = format!("fc{idx}");
            if i == 0 || o == 0 {
                return Err(invalid(&name, "widths must be positive"));
            }
            let weight = params.add(
                format!("{name}.weight"),
                kaiming_uniform(rng, &[i, o], i),
                ParamKind::Weight,
            )?;
            let bias = params.add(format!("{name}.bias"), Tensor::zeros(&[o]), ParamKind::Bias)?;
            layers.push(Layer::Linear {
                name,
                weight,
                bias,
                in_features: i,
                out_features: o,
            });
            Ok(())
        };

        match spec {
            ModelSpec::Mlp { widths, .. } => {
                if widths.len() < 2 {
                    return Err(invalid(
                        "fc0",
                        "an MLP needs at least input and output widths",
                    ));
                }
                for (idx, w) in widths.windows(2).enumerate() {
                    if idx > 0 {
                        layers.push(Layer::Relu);
                    }
                    linear(&mut params, &mut layers, &mut rng, idx, w[0], w[1])?;
                }
            }
            ModelSpec::Cnn {
                input,
                channels,
                hidden,
                classes,
                kernel,
                ..
            } => {
                let [mut c, mut h, mut w] = *input;
                if c == 0 || h == 0 || w == 0 {
                    return Err(invalid(
                        "input",
                        format!("extents must be positive, got {input:?}"),
                    ));
                }
                if *kernel == 0 {
                    return Err(invalid("conv0", "kernel must be positive"));
                }
                let pad = kernel / 2;
                for (idx, &oc) in channels.iter().enumerate() {
                    let name = format!("conv{idx}");
                    if oc == 0 {
                        return Err(invalid(&name, "channel count must be positive"));
                    }
                    if h + 2 * pad < *kernel || w + 2 * pad < *kernel {
                        return Err(invalid(
                            &name,
                            format!("kernel {kernel} larger than padded {h}x{w} input"),
                        ));
                    }
                    let (oh, ow) = (h + 2 * pad - kernel + 1, w + 2 * pad - kernel + 1);
                    if oh < 2 || ow < 2 {
                        return Err(invalid(
                            format!("pool{idx}"),
                            format!("{oh}x{ow} feature map too small for 2x2 pooling"),
                        ));
                    }
                    let fan_in = c * kernel * kernel;
                    let weight = params.add(
                        format!("{name}.weight"),
                        kaiming_uniform(&mut rng, &[oc, c, *kernel, *kernel], fan_in),
                        ParamKind::Weight,
                    )?;
                    let bias = params.add(
                        format!("{name}.bias"),
                        Tensor::zeros(&[oc]),
                        ParamKind::Bias,
                    )?;
                    layers.push(Layer::Conv2d {
                        name,
                        weight,
                        bias,
                        in_channels: c,
                        out_channels: oc,
                        kernel: *kernel,
                        stride: 1,
                        padding: pad,
                    });
                    layers.push(Layer::Relu);
                    layers.push(Layer::MaxPool2d { kernel: 2 });
                    c = oc;
                    h = oh / 2;
                    w = ow / 2;
                }
                layers.push(Layer::Flatten);
                let mut widths = vec![c * h * w];
                widths.extend(hidden);
                widths.push(*classes);
                for (idx, win) in widths.windows(2).enumerate() {
                    if idx > 0 {
                        layers.push(Layer::Relu);
                    }
                    linear(&mut params, &mut layers, &mut rng, idx, win[0], win[1])?;
                }
            }
        }
        Ok(Self {
            spec: spec.clone(),
            layers,
            params,
            quantized: false,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn is_quantized(&self) -> bool {
        self.quantized
    }

    pub(crate) fn mark_quantized(&mut self) {
        self.quantized = true;
    }

    /// Weight tensors of every linear/conv layer, in layer order.
    pub fn weight_params(&self) -> Vec<ParamId> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                Layer::Linear { weight, .. } | Layer::Conv2d { weight, .. } => Some(*weight),
                _ => None,
            })
            .collect()
    }

    /// Maps a batch `[B, ...]` to logits `[B, classes]`. With a plan, the
    /// input of every linear/conv layer and its weights pass through
    /// fake quantization first.
    pub fn forward(
        &self,
        tape: &mut Tape,
        x: Var,
        quant: Option<(&QuantPlan, BitMode)>,
    ) -> Result<Var> {
        let mut h = x;
        if let ModelSpec::Cnn { input, .. } = &self.spec {
            let batch = tape.value(x).shape()[0];
            let per_sample: usize = input.iter().product();
            if tape.value(x).len() != batch * per_sample {
                return Err(Error::Shape {
                    op: "forward",
                    lhs: tape.value(x).shape().to_vec(),
                    rhs: input.to_vec(),
                });
            }
            if tape.value(x).shape() != [batch, input[0], input[1], input[2]] {
                h = tape.reshape(x, vec![batch, input[0], input[1], input[2]])?;
            }
        }
        for (i, layer) in self.layers.iter().enumerate() {
            h = match layer {
                Layer::Linear { weight, bias, .. } => {
                    let mut w = tape.param(&self.params, *weight);
                    if let Some((plan, mode)) = quant {
                        h = plan.quantize_activation(tape, &self.params, i, h, mode)?;
                        w = plan.quantize_weight(tape, &self.params, i, w, 1, mode)?;
                    }
                    let b = tape.param(&self.params, *bias);
                    let y = tape.matmul(h, w)?;
                    tape.add(y, b)?
                }
                Layer::Conv2d {
                    weight,
                    bias,
                    stride,
                    padding,
                    ..
                } => {
                    let mut w = tape.param(&self.params, *weight);
                    if let Some((plan, mode)) = quant {
                        h = plan.quantize_activation(tape, &self.params, i, h, mode)?;
                        w = plan.quantize_weight(tape, &self.params, i, w, 0, mode)?;
                    }
                    let b = tape.param(&self.params, *bias);
                    tape.conv2d(h, w, Some(b), *stride, *padding)?
                }
                Layer::Relu => tape.relu(h),
                Layer::MaxPool2d { kernel } => tape.maxpool2d(h, *kernel)?,
                Layer::Flatten => tape.flatten(h)?,
            };
        }
        Ok(h)
    }

    /// Element and MAC counts of every linear/conv layer for one sample.
    pub fn layer_facts(&self) -> Vec<LayerFacts> {
        let mut shape = self.spec.input_shape();
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let input_elements: usize = shape.iter().product();
            match layer {
                Layer::Linear {
                    name,
                    in_features,
                    out_features,
                    ..
                } => {
                    out.push(LayerFacts {
                        layer: i,
                        name: name.clone(),
                        weight_elements: (in_features * out_features) as u64,
                        out_channels: *out_features as u64,
                        input_elements: input_elements as u64,
                        macs: (in_features * out_features) as u64,
                    });
                    shape = vec![*out_features];
                }
                Layer::Conv2d {
                    name,
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                    ..
                } => {
                    let oh = (shape[1] + 2 * padding - kernel) / stride + 1;
                    let ow = (shape[2] + 2 * padding - kernel) / stride + 1;
                    out.push(LayerFacts {
                        layer: i,
                        name: name.clone(),
                        weight_elements: (out_channels * in_channels * kernel * kernel) as u64,
                        out_channels: *out_channels as u64,
                        input_elements: input_elements as u64,
                        macs: (oh * ow * out_channels * in_channels * kernel * kernel) as u64,
                    });
                    shape = vec![*out_channels, oh, ow];
                }
                Layer::Relu => {}
                Layer::MaxPool2d { kernel } => {
                    shape = vec![shape[0], shape[1] / kernel, shape[2] / kernel];
                }
                Layer::Flatten => shape = vec![input_elements],
            }
        }
        out
    }
}

/// Element and MAC counts per quantization group. Activation element
/// counts include the batch dimension at `batch_size`; weights are counted
/// once. A layer's MACs are attributed in full to its activation group and
/// to its weight group (split evenly across per-channel weight cells).
pub fn model_facts(model: &Model, plan: &QuantPlan, batch_size: usize) -> Vec<GroupCostFacts> {
    let layers = model.layer_facts();
    plan.groups
        .iter()
        .map(|g| {
            let lf = layers
                .iter()
                .find(|l| l.layer == g.layer)
                .expect("quant groups reference linear/conv layers");
            let (per_sample, elements, macs) = match (g.role, g.cell) {
                (Role::Weights, None) => (lf.weight_elements, lf.weight_elements, lf.macs),
                (Role::Weights, Some(_)) => (
                    lf.weight_elements / lf.out_channels,
                    lf.weight_elements / lf.out_channels,
                    lf.macs / lf.out_channels,
                ),
                (Role::Activations, _) => (
                    lf.input_elements,
                    lf.input_elements * batch_size as u64,
                    lf.macs,
                ),
            };
            GroupCostFacts {
                group_id: g.id.clone(),
                role: g.role,
                layer: g.layer,
                per_sample_elements: per_sample,
                element_count: elements,
                mac_count: macs,
                batch_size,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantizer::{attach_quantization, Granularity, RoleSelection};

    #[test]
    fn mlp_weight_shapes() {
        let m = Model::build(&ModelSpec::Mlp {
            widths: vec![784, 64, 32, 10],
            seed: 1,
        })
        .unwrap();
        let shapes: Vec<Vec<usize>> = m
            .weight_params()
            .iter()
            .map(|&id| m.params().get(id).tensor.shape().to_vec())
            .collect();
        assert_eq!(shapes, vec![vec![784, 64], vec![64, 32], vec![32, 10]]);
    }

    #[test]
    fn cnn_head_input() {
        let m = Model::build(&ModelSpec::Cnn {
            input: [1, 28, 28],
            channels: vec![8, 16],
            hidden: vec![],
            classes: 10,
            kernel: 3,
            seed: 0,
        })
        .unwrap();
        let head = m
            .layers()
            .iter()
            .find_map(|l| match l {
                Layer::Linear { in_features, .. } => Some(*in_features),
                _ => None,
            })
            .unwrap();
        assert_eq!(head, 16 * 7 * 7);
    }

    #[test]
    fn same_seed_same_weights() {
        let spec = ModelSpec::Mlp {
            widths: vec![5, 7, 3],
            seed: 42,
        };
        let a = Model::build(&spec).unwrap();
        let b = Model::build(&spec).unwrap();
        for ((_, pa), (_, pb)) in a.params().iter().zip(b.params().iter()) {
            let bits_a: Vec<u64> = pa.tensor.data().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u64> = pb.tensor.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
    }

    #[test]
    fn invalid_chain_names_layer() {
        let err = Model::build(&ModelSpec::Cnn {
            input: [1, 6, 6],
            channels: vec![4, 4, 4],
            hidden: vec![],
            classes: 2,
            kernel: 3,
            seed: 0,
        })
        .unwrap_err();
        assert!(err.to_string().contains("pool2"), "{err}");
        let err = Model::build(&ModelSpec::Mlp {
            widths: vec![4, 0, 2],
            seed: 0,
        })
        .unwrap_err();
        assert!(err.to_string().contains("fc0"), "{err}");
    }

    #[test]
    fn linear_facts() {
        let mut m = Model::build(&ModelSpec::Mlp {
            widths: vec![16, 64, 32],
            seed: 0,
        })
        .unwrap();
        let plan = attach_quantization(&mut m, Granularity::Tensor, RoleSelection::Both).unwrap();
        let facts = model_facts(&m, &plan, 1);
        let w = facts.iter().find(|f| f.group_id == "fc1.w").unwrap();
        assert_eq!((w.element_count, w.mac_count), (2048, 2048));
        let big = model_facts(&m, &plan, 128);
        let a1 = facts.iter().find(|f| f.group_id == "fc1.a").unwrap();
        let a128 = big.iter().find(|f| f.group_id == "fc1.a").unwrap();
        assert_eq!(a128.element_count, 128 * a1.element_count);
        let w128 = big.iter().find(|f| f.group_id == "fc1.w").unwrap();
        assert_eq!(w128.element_count, 2048);
    }

    #[test]
    fn conv_macs() {
        // 28x28 input, 3x3 kernel, padding 1 -> 28x28 output
        let m = Model::build(&ModelSpec::Cnn {
            input: [1, 28, 28],
            channels: vec![8],
            hidden: vec![],
            classes: 10,
            kernel: 3,
            seed: 0,
        })
        .unwrap();
        assert_eq!(m.layer_facts()[0].macs, 28 * 28 * 8 * 9);
        // 26x26 output: 26*26*8*1*3*3
        let m = Model::build(&ModelSpec::Cnn {
            input: [1, 26, 26],
            channels: vec![8],
            hidden: vec![],
            classes: 10,
            kernel: 3,
            seed: 0,
        })
        .unwrap();
        assert_eq!(m.layer_facts()[0].macs, 48_672);
    }

    #[test]
    fn forward_shapes() {
        let m = Model::build(&ModelSpec::Cnn {
            input: [1, 8, 8],
            channels: vec![4],
            hidden: vec![5],
            classes: 3,
            kernel: 3,
            seed: 0,
        })
        .unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[2, 64], 0.5));
        let y = m.forward(&mut tape, x, None).unwrap();
        assert_eq!(tape.value(y).shape(), &[2, 3]);
    }
}
