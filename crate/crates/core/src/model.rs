//! The CBAM convolutional classifier: four attention blocks, global average
//! pooling and a dense head.

use std::collections::BTreeMap;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cbam::Cbam;
use crate::error::{Error, Result};
use crate::nn::{
    global_avg_pool, init, max_pool2d, BatchNorm2d, Conv2d, Dense, Dropout, Mode, Padding,
};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub filters: usize,
    pub kernel: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_channels: usize,
    /// Square input extent; must survive one 2x2 pooling per block.
    pub input_size: usize,
    pub blocks: Vec<BlockSpec>,
    /// Hidden dense widths, each followed by ReLU.
    pub head: Vec<usize>,
    /// Whether dropout follows each hidden dense layer.
    pub head_dropout: Vec<bool>,
    pub num_classes: usize,
    pub reduction_ratio: usize,
    pub dropout_rate: f64,
    /// Biases on the channel-attention MLP.
    pub mlp_bias: bool,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            input_channels: 3,
            input_size: 224,
            blocks: vec![
                BlockSpec {
                    filters: 32,
                    kernel: 7,
                },
                BlockSpec {
                    filters: 64,
                    kernel: 5,
                },
                BlockSpec {
                    filters: 128,
                    kernel: 3,
                },
                BlockSpec {
                    filters: 256,
                    kernel: 3,
                },
            ],
            head: vec![1024, 512],
            head_dropout: vec![true, true],
            num_classes: 3,
            reduction_ratio: 8,
            dropout_rate: 0.5,
            mlp_bias: true,
        }
    }
}

pub const NUM_BLOCKS: usize = 4;

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidSpec(msg));
        if self.blocks.len() != NUM_BLOCKS {
            return bad(format!(
                "expected exactly {NUM_BLOCKS} blocks, got {}",
                self.blocks.len()
            ));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            if b.kernel % 2 == 0 || b.kernel == 0 {
                return bad(format!("block{} kernel {} must be odd", i + 1, b.kernel));
            }
            if b.filters == 0 || self.reduction_ratio == 0 || b.filters % self.reduction_ratio != 0
            {
                return bad(format!(
                    "block{} filters {} must be a positive multiple of the reduction ratio {}",
                    i + 1,
                    b.filters,
                    self.reduction_ratio
                ));
            }
        }
        if self.num_classes < 2 {
            return bad(format!(
                "num_classes must be at least 2, got {}",
                self.num_classes
            ));
        }
        if self.input_channels == 0 {
            return bad("input_channels must be positive".into());
        }
        let step = 1 << self.blocks.len();
        if self.input_size == 0 || !self.input_size.is_multiple_of(step) {
            return bad(format!(
                "input_size {} must be a positive multiple of {step}",
                self.input_size
            ));
        }
        if self.head.contains(&0) {
            return bad("dense widths must be positive".into());
        }
        if self.head_dropout.len() != self.head.len() {
            return bad(format!(
                "head_dropout has {} entries for {} dense layers",
                self.head_dropout.len(),
                self.head.len()
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!(
                "dropout_rate {} must lie in [0, 1)",
                self.dropout_rate
            ));
        }
        Ok(())
    }

    pub fn input_shape(&self, n: usize) -> Shape {
        Shape::new(n, self.input_channels, self.input_size, self.input_size)
    }

    pub fn layer_names(&self) -> Vec<String> {
        (1..=self.blocks.len())
            .map(|i| format!("block{i}"))
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct Block {
    pub name: String,
    pub conv1: Conv2d,
    pub bn1: BatchNorm2d,
    pub conv2: Conv2d,
    pub bn2: BatchNorm2d,
    pub cbam: Cbam,
}

impl Block {
    fn new(
        name: String,
        cin: usize,
        spec: &BlockSpec,
        model: &ModelSpec,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let conv = |layer: &str, cin: usize, rng: &mut ChaCha8Rng| -> Result<Conv2d> {
            let k = spec.kernel;
            let fan_in = cin * k * k;
            let w = Tensor::parameter(
                format!("{name}.{layer}.weight"),
                [spec.filters, cin, k, k],
                init::he_normal(rng, fan_in, spec.filters * fan_in),
            )?;
            Conv2d::new(w, None, 1, Padding::Same)
        };
        let conv1 = conv("conv1", cin, rng)?;
        let conv2 = conv("conv2", spec.filters, rng)?;
        let cbam = Cbam::init(
            &format!("{name}.cbam"),
            spec.filters,
            model.reduction_ratio,
            model.mlp_bias,
            rng,
        )?;
        Ok(Self {
            bn1: BatchNorm2d::new(format!("{name}.bn1"), spec.filters),
            bn2: BatchNorm2d::new(format!("{name}.bn2"), spec.filters),
            conv1,
            conv2,
            cbam,
            name,
        })
    }

    /// Output after attention, before pooling.
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let h = self.bn1.forward(&self.conv1.forward(x)?, mode)?.relu();
        let h = self.bn2.forward(&self.conv2.forward(&h)?, mode)?.relu();
        self.cbam.forward(&h)
    }

    fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.bn1.forward_infer(&self.conv1.forward(x)?)?.relu();
        let h = self.bn2.forward_infer(&self.conv2.forward(&h)?)?.relu();
        self.cbam.forward(&h)
    }

    fn parameters(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.conv1.weight, &self.bn1.gamma, &self.bn1.beta];
        out.extend([&self.conv2.weight, &self.bn2.gamma, &self.bn2.beta]);
        out.extend(self.cbam.parameters());
        out
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![
            &mut self.conv1.weight,
            &mut self.bn1.gamma,
            &mut self.bn1.beta,
        ];
        out.extend([
            &mut self.conv2.weight,
            &mut self.bn2.gamma,
            &mut self.bn2.beta,
        ]);
        out.extend(self.cbam.parameters_mut());
        out
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub spec: ModelSpec,
    pub seed: u64,
    pub blocks: Vec<Block>,
    pub hidden: Vec<Dense>,
    pub dropouts: Vec<Option<Dropout>>,
    pub classifier: Dense,
}

fn dense(name: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Result<Dense> {
    Dense::new(
        Tensor::parameter(
            format!("{name}.weight"),
            [fan_out, fan_in, 1, 1],
            init::he_normal(rng, fan_in, fan_out * fan_in),
        )?,
        Tensor::parameter(
            format!("{name}.bias"),
            [1, fan_out, 1, 1],
            vec![0.0; fan_out],
        )?,
    )
}

/// Builds the network with deterministic He-normal weights drawn from `seed`.
pub fn build_model(spec: &ModelSpec, seed: u64) -> Result<Model> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut blocks = Vec::with_capacity(spec.blocks.len());
    let mut cin = spec.input_channels;
    for (i, b) in spec.blocks.iter().enumerate() {
        blocks.push(Block::new(
            format!("block{}", i + 1),
            cin,
            b,
            spec,
            &mut rng,
        )?);
        cin = b.filters;
    }
    let mut hidden = Vec::new();
    let mut dropouts = Vec::new();
    for (i, (&width, &drop)) in spec.head.iter().zip(&spec.head_dropout).enumerate() {
        hidden.push(dense(&format!("dense{}", i + 1), cin, width, &mut rng)?);
        dropouts.push(
            drop.then(|| Dropout::new(spec.dropout_rate, seed.wrapping_add(0x0d0f + i as u64)))
                .transpose()?,
        );
        cin = width;
    }
    let classifier = dense("classifier", cin, spec.num_classes, &mut rng)?;
    Ok(Model {
        spec: spec.clone(),
        seed,
        blocks,
        hidden,
        dropouts,
        classifier,
    })
}

/// One entry of the executable layer sequence.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
    },
    BatchNorm {
        channels: usize,
    },
    Relu,
    Cbam {
        channels: usize,
        reduction: usize,
    },
    MaxPool,
    GlobalAvgPool,
    Dense {
        in_features: usize,
        out_features: usize,
    },
    Dropout {
        rate: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Layer {
    pub name: String,
    pub kind: LayerKind,
    pub trainable: usize,
    pub buffers: usize,
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
            } => write!(f, "Conv2d {kernel}x{kernel} {in_channels}->{out_channels}"),
            LayerKind::BatchNorm { channels } => write!(f, "BatchNorm {channels}"),
            LayerKind::Relu => write!(f, "ReLU"),
            LayerKind::Cbam {
                channels,
                reduction,
            } => write!(f, "CBAM {channels} r={reduction}"),
            LayerKind::MaxPool => write!(f, "MaxPool 2x2"),
            LayerKind::GlobalAvgPool => write!(f, "GlobalAvgPool"),
            LayerKind::Dense {
                in_features,
                out_features,
            } => write!(f, "Dense {in_features}->{out_features}"),
            LayerKind::Dropout { rate } => write!(f, "Dropout {rate}"),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ParameterReport {
    pub layers: Vec<Layer>,
    pub trainable: usize,
    pub buffers: usize,
    pub total: usize,
    /// 4 bytes per value.
    pub bytes: usize,
}

impl ParameterReport {
    pub fn mebibytes(&self) -> f64 {
        self.bytes as f64 / (1024.0 * 1024.0)
    }
}

/// A named tensor snapshot, as stored in checkpoints.
#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Shape,
    pub data: Vec<f32>,
}

impl Model {
    fn check_input(&self, x: &Tensor) -> Result<()> {
        let s = x.shape();
        let want = self.spec.input_shape(s.n());
        if s != want || s.n() == 0 {
            return Err(Error::shape("model input", s, want));
        }
        Ok(())
    }

    /// Logits `(N, K)`. Train mode uses batch statistics, updates running
    /// statistics and applies dropout.
    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        if mode == Mode::Infer {
            return self.infer(x);
        }
        self.check_input(x)?;
        let mut h = x.clone();
        for block in &mut self.blocks {
            h = max_pool2d(&block.forward(&h, mode)?)?;
        }
        h = global_avg_pool(&h)?;
        for (layer, drop) in self.hidden.iter().zip(&mut self.dropouts) {
            h = layer.forward(&h)?.relu();
            if let Some(d) = drop {
                h = d.forward(&h, mode)?;
            }
        }
        self.classifier.forward(&h)
    }

    /// Infer-mode logits; never mutates the model.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut h = x.clone();
        for block in &self.blocks {
            h = max_pool2d(&block.infer(&h)?)?;
        }
        self.head(&h)
    }

    fn head(&self, pooled: &Tensor) -> Result<Tensor> {
        let mut h = global_avg_pool(pooled)?;
        for layer in &self.hidden {
            h = layer.forward(&h)?.relu();
        }
        self.classifier.forward(&h)
    }

    /// Index of a block by name (`block1` ...).
    pub fn block_index(&self, name: &str) -> Result<usize> {
        let names = self.spec.layer_names();
        names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::UnknownLayer {
                name: name.to_string(),
                valid: names.clone(),
            })
    }

    /// Infer-mode feature map of `block` after attention and before pooling.
    pub fn block_output(&self, x: &Tensor, block: usize) -> Result<Tensor> {
        self.check_input(x)?;
        let mut h = x.clone();
        for (i, b) in self.blocks.iter().enumerate() {
            let a = b.infer(&h)?;
            if i == block {
                return Ok(a);
            }
            h = max_pool2d(&a)?;
        }
        Err(Error::InvalidArgument(format!(
            "block index {block} out of range"
        )))
    }

    /// Infer-mode logits from the output of `block` (as returned by [`Model::block_output`]).
    pub fn logits_from_block(&self, a: &Tensor, block: usize) -> Result<Tensor> {
        if block >= self.blocks.len() {
            return Err(Error::InvalidArgument(format!(
                "block index {block} out of range"
            )));
        }
        let mut h = max_pool2d(a)?;
        for b in &self.blocks[block + 1..] {
            h = max_pool2d(&b.infer(&h)?)?;
        }
        self.head(&h)
    }

    /// Trainable tensors in registry order.
    pub fn parameters(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = self.blocks.iter().flat_map(Block::parameters).collect();
        for d in self.hidden.iter().chain([&self.classifier]) {
            out.extend([&d.weight, &d.bias]);
        }
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = self
            .blocks
            .iter_mut()
            .flat_map(Block::parameters_mut)
            .collect();
        for d in self.hidden.iter_mut().chain([&mut self.classifier]) {
            out.extend([&mut d.weight, &mut d.bias]);
        }
        out
    }

    pub fn zero_grad(&self) {
        self.parameters().iter().for_each(|p| p.zero_grad());
    }

    fn batch_norms(&self) -> impl Iterator<Item = &BatchNorm2d> {
        self.blocks.iter().flat_map(|b| [&b.bn1, &b.bn2])
    }

    fn batch_norms_mut(&mut self) -> impl Iterator<Item = &mut BatchNorm2d> {
        self.blocks
            .iter_mut()
            .flat_map(|b| [&mut b.bn1, &mut b.bn2])
    }

    /// The executable layer sequence with per-layer parameter counts.
    pub fn layers(&self) -> Vec<Layer> {
        let mut out = Vec::new();
        let mut push = |name: String, kind: LayerKind, trainable: usize, buffers: usize| {
            out.push(Layer {
                name,
                kind,
                trainable,
                buffers,
            })
        };
        for b in &self.blocks {
            for (i, (conv, bn)) in [(&b.conv1, &b.bn1), (&b.conv2, &b.bn2)]
                .into_iter()
                .enumerate()
            {
                push(
                    format!("{}.conv{}", b.name, i + 1),
                    LayerKind::Conv2d {
                        in_channels: conv.in_channels(),
                        out_channels: conv.out_channels(),
                        kernel: conv.kernel(),
                    },
                    conv.weight.numel() + conv.bias.as_ref().map_or(0, Tensor::numel),
                    0,
                );
                push(
                    format!("{}.bn{}", b.name, i + 1),
                    LayerKind::BatchNorm {
                        channels: bn.channels(),
                    },
                    2 * bn.channels(),
                    2 * bn.channels(),
                );
                push(format!("{}.relu{}", b.name, i + 1), LayerKind::Relu, 0, 0);
            }
            push(
                format!("{}.cbam", b.name),
                LayerKind::Cbam {
                    channels: b.cbam.channel.channels(),
                    reduction: b.cbam.channel.reduction,
                },
                b.cbam.parameters().iter().map(|p| p.numel()).sum(),
                0,
            );
            push(format!("{}.pool", b.name), LayerKind::MaxPool, 0, 0);
        }
        push("gap".into(), LayerKind::GlobalAvgPool, 0, 0);
        for (i, (d, drop)) in self.hidden.iter().zip(&self.dropouts).enumerate() {
            let name = format!("dense{}", i + 1);
            push(
                name.clone(),
                LayerKind::Dense {
                    in_features: d.in_features(),
                    out_features: d.out_features(),
                },
                d.weight.numel() + d.bias.numel(),
                0,
            );
            push(format!("{name}.relu"), LayerKind::Relu, 0, 0);
            if let Some(drop) = drop {
                push(
                    format!("{name}.dropout"),
                    LayerKind::Dropout { rate: drop.rate },
                    0,
                    0,
                );
            }
        }
        push(
            "classifier".into(),
            LayerKind::Dense {
                in_features: self.classifier.in_features(),
                out_features: self.classifier.out_features(),
            },
            self.classifier.weight.numel() + self.classifier.bias.numel(),
            0,
        );
        out
    }

    pub fn count_parameters(&self) -> ParameterReport {
        let layers = self.layers();
        let trainable = layers.iter().map(|l| l.trainable).sum();
        let buffers = layers.iter().map(|l| l.buffers).sum();
        ParameterReport {
            layers,
            trainable,
            buffers,
            total: trainable + buffers,
            bytes: 4 * (trainable + buffers),
        }
    }

    /// Every stored tensor, parameters and running statistics, in checkpoint order.
    pub fn state(&self) -> Vec<NamedTensor> {
        let mut out: Vec<NamedTensor> = self
            .parameters()
            .into_iter()
            .map(|p| NamedTensor {
                name: p.name().expect("model parameters are named").to_string(),
                shape: p.shape(),
                data: p.to_vec(),
            })
            .collect();
        for bn in self.batch_norms() {
            let c = bn.channels();
            for (suffix, data) in [
                ("running_mean", &bn.running_mean),
                ("running_var", &bn.running_var),
            ] {
                out.push(NamedTensor {
                    name: format!("{}.{suffix}", bn.name),
                    shape: Shape::new(1, c, 1, 1),
                    data: data.clone(),
                });
            }
        }
        out
    }

    /// Replaces every tensor from `state`; names and shapes must match exactly.
    pub fn load_state(&mut self, state: Vec<NamedTensor>) -> Result<()> {
        let mut by_name: BTreeMap<String, NamedTensor> = BTreeMap::new();
        for t in state {
            if by_name.contains_key(&t.name) {
                return Err(Error::TensorMismatch {
                    name: t.name,
                    detail: "appears more than once".into(),
                });
            }
            by_name.insert(t.name.clone(), t);
        }
        let mut take = |name: &str, shape: Shape| -> Result<Vec<f32>> {
            let t = by_name.remove(name).ok_or_else(|| Error::TensorMismatch {
                name: name.to_string(),
                detail: "missing from checkpoint".into(),
            })?;
            if t.shape != shape {
                return Err(Error::TensorMismatch {
                    name: name.to_string(),
                    detail: format!("checkpoint shape {} but model expects {shape}", t.shape),
                });
            }
            Ok(t.data)
        };
        for p in self.parameters_mut() {
            let name = p.name().expect("model parameters are named").to_string();
            let data = take(&name, p.shape())?;
            *p = Tensor::parameter(name, p.shape(), data)?;
        }
        let bn_names: Vec<(String, usize)> = self
            .batch_norms()
            .map(|b| (b.name.clone(), b.channels()))
            .collect();
        let mut stats = Vec::new();
        for (name, c) in bn_names {
            let shape = Shape::new(1, c, 1, 1);
            stats.push((
                take(&format!("{name}.running_mean"), shape)?,
                take(&format!("{name}.running_var"), shape)?,
            ));
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(Error::TensorMismatch {
                name: extra.clone(),
                detail: "not part of the model".into(),
            });
        }
        for (bn, (mean, var)) in self.batch_norms_mut().zip(stats) {
            bn.set_running_stats(mean, var)?;
        }
        Ok(())
    }
}
