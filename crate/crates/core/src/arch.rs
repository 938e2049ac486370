//! Architecture descriptors: the ordered layer list that fixes the tokenization
//! layout, plus the forward topology needed to run the network.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Linear,
    Conv2d,
    Batchnorm,
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    /// Output neurons (linear) or channels (conv, batchnorm).
    pub out_dim: usize,
    /// Flattened input connections per output neuron, bias excluded.
    pub fan_in: usize,
    pub has_bias: bool,
    pub layer_index: usize,
}

impl LayerSpec {
    /// Shape of the learned tensor. Batch-norm layers store `[gamma; beta]`
    /// as two rows of width `out_dim`.
    pub fn tensor_shape(&self) -> [usize; 2] {
        match self.kind {
            LayerKind::Batchnorm => [2, self.out_dim],
            _ => [self.out_dim, self.fan_in + usize::from(self.has_bias)],
        }
    }

    pub fn numel(&self) -> usize {
        let [r, c] = self.tensor_shape();
        r * c
    }
}

/// One step of the forward graph. Layer references index into
/// [`ArchitectureDescriptor::layers`].
#[derive(Serialize, Deserialize, Clone, Debug, PartialEq, Eq)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Op {
    Conv {
        layer: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    BatchNorm {
        layer: usize,
    },
    Relu,
    MaxPool {
        size: usize,
    },
    GlobalAvgPool,
    Flatten,
    Linear {
        layer: usize,
    },
    /// `body(x) + shortcut(x)`; an empty shortcut is the identity.
    Residual { body: Vec<Op>, shortcut: Vec<Op> },
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq, Eq)]
pub struct ArchitectureDescriptor {
    pub arch_id: String,
    /// `[channels, height, width]`; flat inputs use `[features, 1, 1]`.
    pub input_shape: [usize; 3],
    pub layers: Vec<LayerSpec>,
    pub topology: Vec<Op>,
}

/// Activation shape flowing through the topology.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FlowShape {
    Map { c: usize, h: usize, w: usize },
    Flat(usize),
}

impl FlowShape {
    pub fn channels(&self) -> usize {
        match *self {
            FlowShape::Map { c, .. } => c,
            FlowShape::Flat(n) => n,
        }
    }
}

impl ArchitectureDescriptor {
    /// Builds a descriptor and derives its id from the layer list, input shape
    /// and topology.
    pub fn new(input_shape: [usize; 3], layers: Vec<LayerSpec>, topology: Vec<Op>) -> Result<Self> {
        let arch_id = derive_arch_id(&input_shape, &layers, &topology);
        let desc = ArchitectureDescriptor {
            arch_id,
            input_shape,
            layers,
            topology,
        };
        desc.validate()?;
        Ok(desc)
    }

    /// Descriptor with layers only and no runnable topology (tokenization-only use).
    pub fn layers_only(layers: Vec<LayerSpec>) -> Result<Self> {
        let desc = ArchitectureDescriptor {
            arch_id: derive_arch_id(&[0, 0, 0], &layers, &[]),
            input_shape: [0, 0, 0],
            layers,
            topology: Vec::new(),
        };
        desc.validate_layers()?;
        Ok(desc)
    }

    pub fn layer(&self, name: &str) -> Option<&LayerSpec> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(LayerSpec::numel).sum()
    }

    pub fn is_runnable(&self) -> bool {
        !self.topology.is_empty()
    }

    pub fn has_batchnorm(&self) -> bool {
        self.layers.iter().any(|l| l.kind == LayerKind::Batchnorm)
    }

    /// Output width of the network (classes).
    pub fn output_dim(&self) -> Option<usize> {
        self.output_shape().ok().map(|s| s.channels())
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_layers()?;
        if self.arch_id != derive_arch_id(&self.input_shape, &self.layers, &self.topology) {
            return Err(Error::Validation(format!(
                "arch_id {} does not match the layer list",
                self.arch_id
            )));
        }
        if self.topology.is_empty() {
            return Ok(());
        }
        let mut used = vec![0usize; self.layers.len()];
        self.check_ops(&self.topology, self.input_flow()?, &mut used)?;
        if let Some((i, _)) = used.iter().enumerate().find(|(_, &n)| n != 1) {
            return Err(Error::Validation(format!(
                "layer {} must appear exactly once in the topology",
                self.layers[i].name
            )));
        }
        Ok(())
    }

    fn validate_layers(&self) -> Result<()> {
        for (i, l) in self.layers.iter().enumerate() {
            if l.layer_index != i {
                return Err(Error::Validation(format!(
                    "layer {} has layer_index {}, expected {i}",
                    l.name, l.layer_index
                )));
            }
            if l.out_dim == 0 {
                return Err(Error::Validation(format!("layer {} has out_dim 0", l.name)));
            }
            if l.kind == LayerKind::Batchnorm && (l.fan_in != 0 || !l.has_bias) {
                return Err(Error::Validation(format!(
                    "batchnorm layer {} must have fan_in 0 and has_bias",
                    l.name
                )));
            }
            if self.layers[..i].iter().any(|o| o.name == l.name) {
                return Err(Error::Validation(format!("duplicate layer name {}", l.name)));
            }
        }
        Ok(())
    }

    fn input_flow(&self) -> Result<FlowShape> {
        let [c, h, w] = self.input_shape;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::Validation("input shape has a zero dimension".into()));
        }
        Ok(if h == 1 && w == 1 {
            FlowShape::Flat(c)
        } else {
            FlowShape::Map { c, h, w }
        })
    }

    pub fn output_shape(&self) -> Result<FlowShape> {
        let mut used = vec![0usize; self.layers.len()];
        self.check_ops(&self.topology, self.input_flow()?, &mut used)
    }

    fn check_ops(&self, ops: &[Op], mut shape: FlowShape, used: &mut [usize]) -> Result<FlowShape> {
        for op in ops {
            shape = self.check_op(op, shape, used)?;
        }
        Ok(shape)
    }

    fn get_layer(&self, idx: usize, kind: LayerKind, used: &mut [usize]) -> Result<&LayerSpec> {
        let l = self
            .layers
            .get(idx)
            .ok_or_else(|| Error::Validation(format!("topology references missing layer {idx}")))?;
        if l.kind != kind {
            return Err(Error::Validation(format!(
                "layer {} is {:?}, topology expects {:?}",
                l.name, l.kind, kind
            )));
        }
        used[idx] += 1;
        Ok(l)
    }

    fn check_op(&self, op: &Op, shape: FlowShape, used: &mut [usize]) -> Result<FlowShape> {
        let bad = |msg: String| Err(Error::Validation(msg));
        match *op {
            Op::Conv {
                layer,
                kernel,
                stride,
                padding,
            } => {
                let l = self.get_layer(layer, LayerKind::Conv2d, used)?;
                let FlowShape::Map { c, h, w } = shape else {
                    return bad(format!("conv {} applied to flat input", l.name));
                };
                if kernel == 0 || stride == 0 {
                    return bad(format!("conv {} has zero kernel or stride", l.name));
                }
                if l.fan_in != c * kernel * kernel {
                    return bad(format!(
                        "conv {} fan_in {} != {}x{}x{}",
                        l.name, l.fan_in, c, kernel, kernel
                    ));
                }
                if h + 2 * padding < kernel || w + 2 * padding < kernel {
                    return bad(format!("conv {} kernel larger than input", l.name));
                }
                Ok(FlowShape::Map {
                    c: l.out_dim,
                    h: (h + 2 * padding - kernel) / stride + 1,
                    w: (w + 2 * padding - kernel) / stride + 1,
                })
            }
            Op::BatchNorm { layer } => {
                let l = self.get_layer(layer, LayerKind::Batchnorm, used)?;
                if l.out_dim != shape.channels() {
                    return bad(format!(
                        "batchnorm {} width {} != {} channels",
                        l.name,
                        l.out_dim,
                        shape.channels()
                    ));
                }
                Ok(shape)
            }
            Op::Relu => Ok(shape),
            Op::MaxPool { size } => match shape {
                FlowShape::Map { c, h, w } if size > 0 && h >= size && w >= size => Ok(FlowShape::Map {
                    c,
                    h: h / size,
                    w: w / size,
                }),
                _ => bad(format!("maxpool {size} not applicable to {shape:?}")),
            },
            Op::GlobalAvgPool => match shape {
                FlowShape::Map { c, .. } => Ok(FlowShape::Flat(c)),
                FlowShape::Flat(_) => bad("global pool on flat input".into()),
            },
            Op::Flatten => match shape {
                FlowShape::Map { c, h, w } => Ok(FlowShape::Flat(c * h * w)),
                flat => Ok(flat),
            },
            Op::Linear { layer } => {
                let l = self.get_layer(layer, LayerKind::Linear, used)?;
                let FlowShape::Flat(n) = shape else {
                    return bad(format!("linear {} applied to spatial input", l.name));
                };
                if n != l.fan_in {
                    return bad(format!("linear {} fan_in {} != input {n}", l.name, l.fan_in));
                }
                Ok(FlowShape::Flat(l.out_dim))
            }
            Op::Residual {
                ref body,
                ref shortcut,
            } => {
                let a = self.check_ops(body, shape, used)?;
                let b = self.check_ops(shortcut, shape, used)?;
                if a != b {
                    return bad(format!("residual branches disagree: {a:?} vs {b:?}"));
                }
                Ok(a)
            }
        }
    }
}

fn derive_arch_id(input_shape: &[usize; 3], layers: &[LayerSpec], topology: &[Op]) -> String {
    let canon = serde_json::to_string(&(input_shape, layers, topology)).expect("plain data serializes");
    let digest = Sha256::digest(canon.as_bytes());
    let hex: String = digest[..8].iter().map(|b| format!("{b:02x}")).collect();
    format!("arch-{hex}")
}

/// Incremental builder for reference architectures.
#[derive(Default)]
pub struct ArchBuilder {
    layers: Vec<LayerSpec>,
}

impl ArchBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, name: &str, kind: LayerKind, out_dim: usize, fan_in: usize, has_bias: bool) -> usize {
        let idx = self.layers.len();
        self.layers.push(LayerSpec {
            name: name.to_string(),
            kind,
            out_dim,
            fan_in,
            has_bias,
            layer_index: idx,
        });
        idx
    }

    pub fn conv(&mut self, name: &str, in_ch: usize, out_ch: usize, kernel: usize, stride: usize, padding: usize, bias: bool) -> Op {
        let layer = self.push(name, LayerKind::Conv2d, out_ch, in_ch * kernel * kernel, bias);
        Op::Conv {
            layer,
            kernel,
            stride,
            padding,
        }
    }

    pub fn batchnorm(&mut self, name: &str, channels: usize) -> Op {
        let layer = self.push(name, LayerKind::Batchnorm, channels, 0, true);
        Op::BatchNorm { layer }
    }

    pub fn linear(&mut self, name: &str, fan_in: usize, out: usize) -> Op {
        let layer = self.push(name, LayerKind::Linear, out, fan_in, true);
        Op::Linear { layer }
    }

    pub fn finish(self, input_shape: [usize; 3], topology: Vec<Op>) -> Result<ArchitectureDescriptor> {
        ArchitectureDescriptor::new(input_shape, self.layers, topology)
    }
}

/// The small CNN reference (~2.5k parameters on 1x28x28 inputs): three conv
/// layers and two linear layers.
pub fn small_cnn(input_shape: [usize; 3], classes: usize) -> Result<ArchitectureDescriptor> {
    let [c, h, w] = input_shape;
    let mut b = ArchBuilder::new();
    let conv1 = b.conv("conv1", c, 8, 5, 1, 0, true);
    let conv2 = b.conv("conv2", 8, 6, 5, 1, 0, true);
    let conv3 = b.conv("conv3", 6, 4, 2, 1, 0, true);
    let side = |s: usize| ((s - 4) / 2 - 4) / 2 - 1;
    if h < 20 || w < 20 {
        return Err(Error::Validation("small_cnn needs inputs of at least 20x20".into()));
    }
    let flat = 4 * side(h) * side(w);
    let fc1 = b.linear("fc1", flat, 20);
    let fc2 = b.linear("fc2", 20, classes);
    let topology = vec![
        conv1,
        Op::Relu,
        Op::MaxPool { size: 2 },
        conv2,
        Op::Relu,
        Op::MaxPool { size: 2 },
        conv3,
        Op::Relu,
        Op::Flatten,
        fc1,
        Op::Relu,
        fc2,
    ];
    b.finish(input_shape, topology)
}

/// Two-stage residual network with batch-norm, standing in for ResNet-18.
pub fn mini_resnet(input_shape: [usize; 3], widths: [usize; 2], classes: usize) -> Result<ArchitectureDescriptor> {
    let [c, _, _] = input_shape;
    let [w1, w2] = widths;
    let mut b = ArchBuilder::new();
    let stem = b.conv("stem.conv", c, w1, 3, 1, 1, true);
    let stem_bn = b.batchnorm("stem.bn", w1);

    let b1c1 = b.conv("block1.conv1", w1, w1, 3, 1, 1, true);
    let b1n1 = b.batchnorm("block1.bn1", w1);
    let b1c2 = b.conv("block1.conv2", w1, w1, 3, 1, 1, true);
    let b1n2 = b.batchnorm("block1.bn2", w1);

    let b2c1 = b.conv("block2.conv1", w1, w2, 3, 2, 1, true);
    let b2n1 = b.batchnorm("block2.bn1", w2);
    let b2c2 = b.conv("block2.conv2", w2, w2, 3, 1, 1, true);
    let b2n2 = b.batchnorm("block2.bn2", w2);
    let b2sc = b.conv("block2.shortcut", w1, w2, 1, 2, 0, true);
    let b2sn = b.batchnorm("block2.shortcut_bn", w2);

    let fc = b.linear("fc", w2, classes);
    let topology = vec![
        stem,
        stem_bn,
        Op::Relu,
        Op::Residual {
            body: vec![b1c1, b1n1, Op::Relu, b1c2, b1n2],
            shortcut: vec![],
        },
        Op::Relu,
        Op::Residual {
            body: vec![b2c1, b2n1, Op::Relu, b2c2, b2n2],
            shortcut: vec![b2sc, b2sn],
        },
        Op::Relu,
        Op::GlobalAvgPool,
        fc,
    ];
    b.finish(input_shape, topology)
}

/// Plain ReLU MLP over flat inputs; `dims = [input, hidden..., output]`.
pub fn mlp(dims: &[usize]) -> Result<ArchitectureDescriptor> {
    if dims.len() < 2 {
        return Err(Error::Validation("mlp needs at least input and output dims".into()));
    }
    let mut b = ArchBuilder::new();
    let mut topology = Vec::new();
    for i in 0..dims.len() - 1 {
        if i > 0 {
            topology.push(Op::Relu);
        }
        topology.push(b.linear(&format!("fc{}", i + 1), dims[i], dims[i + 1]));
    }
    b.finish([dims[0], 1, 1], topology)
}

/// MLP with a batch-norm after every hidden linear layer.
pub fn mlp_bn(dims: &[usize]) -> Result<ArchitectureDescriptor> {
    if dims.len() < 2 {
        return Err(Error::Validation("mlp needs at least input and output dims".into()));
    }
    let mut b = ArchBuilder::new();
    let mut topology = Vec::new();
    for i in 0..dims.len() - 1 {
        topology.push(b.linear(&format!("fc{}", i + 1), dims[i], dims[i + 1]));
        if i + 2 < dims.len() {
            topology.push(b.batchnorm(&format!("bn{}", i + 1), dims[i + 1]));
            topology.push(Op::Relu);
        }
    }
    b.finish([dims[0], 1, 1], topology)
}

/// Reference architecture by name, as used in config files.
pub fn by_name(name: &str, input_shape: [usize; 3], classes: usize) -> Result<ArchitectureDescriptor> {
    match name {
        "small_cnn" => small_cnn(input_shape, classes),
        "mini_resnet" => mini_resnet(input_shape, [8, 16], classes),
        other => Err(Error::Config(format!("unknown architecture {other}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_cnn_has_about_2_5k_params() {
        let a = small_cnn([1, 28, 28], 10).unwrap();
        assert_eq!(a.num_params(), 2464);
        assert_eq!(a.output_dim(), Some(10));
    }

    #[test]
    fn mini_resnet_validates() {
        let a = mini_resnet([1, 28, 28], [8, 16], 10).unwrap();
        assert!(a.has_batchnorm());
        assert_eq!(a.output_dim(), Some(10));
        assert!(a.num_params() > 1000);
    }

    #[test]
    fn arch_id_depends_only_on_structure() {
        let a = small_cnn([1, 28, 28], 10).unwrap();
        let b = small_cnn([1, 28, 28], 10).unwrap();
        let c = small_cnn([1, 28, 28], 5).unwrap();
        assert_eq!(a.arch_id, b.arch_id);
        assert_ne!(a.arch_id, c.arch_id);
    }

    #[test]
    fn rejects_bad_fan_in() {
        let mut b = ArchBuilder::new();
        let l = b.linear("fc", 3, 2);
        assert!(b.finish([4, 1, 1], vec![l]).is_err());
    }

    #[test]
    fn rejects_batchnorm_with_fan_in() {
        let layers = vec![LayerSpec {
            name: "bn".into(),
            kind: LayerKind::Batchnorm,
            out_dim: 3,
            fan_in: 2,
            has_bias: true,
            layer_index: 0,
        }];
        assert!(ArchitectureDescriptor::layers_only(layers).is_err());
    }

    #[test]
    fn topology_serializes() {
        let a = mini_resnet([1, 16, 16], [4, 8], 3).unwrap();
        let s = serde_json::to_string(&a).unwrap();
        let back: ArchitectureDescriptor = serde_json::from_str(&s).unwrap();
        assert_eq!(a, back);
        back.validate().unwrap();
    }
}
