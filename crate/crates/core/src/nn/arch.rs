use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{BatchNorm, FullyConnected, MaxPool, StandardConv};
use super::network::{LayerNode, Network};
use super::regularizer::RegularizerSpec;
use crate::error::{Error, Result};
use crate::im2col::ConvGeometry;
use crate::ops::{DecoupledConvLayer, OperatorSpec};
use crate::tensor::Real;

/// Which similarity a convolution slot uses.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum ConvOperator {
    /// Inner product plus bias.
    Standard,
    Decoupled(OperatorSpec),
}

impl ConvOperator {
    pub fn validate(&self) -> Result<()> {
        match self {
            ConvOperator::Standard => Ok(()),
            ConvOperator::Decoupled(spec) => spec.validate(),
        }
    }
}

/// One entry of a layer list: `conv<N>`, `pool` or `fc<N>`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum ArchItem {
    /// 3×3 convolution, padding 1, with `N` kernels.
    Conv(usize),
    /// 2×2 max pooling, stride 2.
    Pool,
    /// Hidden fully connected layer with `N` outputs.
    Fc(usize),
}

impl fmt::Display for ArchItem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ArchItem::Conv(n) => write!(f, "conv{n}"),
            ArchItem::Pool => f.write_str("pool"),
            ArchItem::Fc(n) => write!(f, "fc{n}"),
        }
    }
}

impl FromStr for ArchItem {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("bad layer `{s}`; expected conv<N>, pool or fc<N>"));
        let width = |digits: &str| -> Result<usize> {
            match digits.parse::<usize>() {
                Ok(n) if n > 0 => Ok(n),
                _ => Err(bad()),
            }
        };
        if s == "pool" {
            Ok(ArchItem::Pool)
        } else if let Some(n) = s.strip_prefix("conv") {
            Ok(ArchItem::Conv(width(n)?))
        } else if let Some(n) = s.strip_prefix("fc") {
            Ok(ArchItem::Fc(width(n)?))
        } else {
            Err(bad())
        }
    }
}

impl From<ArchItem> for String {
    fn from(item: ArchItem) -> String {
        item.to_string()
    }
}

impl TryFrom<String> for ArchItem {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArchPreset {
    /// Six 3×3 convolutions in pairs of 32/64/128, pooling after each pair, FC256.
    MnistCnn6,
    /// Nine 3×3 convolutions in triples of 64/128/256, pooling after each, FC512.
    CifarCnn9,
    /// Nine 3×3 convolutions in triples of 32/64/128, pooling after each, FC256.
    CifarCnn9Attack,
    /// The explicit `layers` list.
    Custom,
}

impl ArchPreset {
    pub const ALL: [ArchPreset; 4] = [
        ArchPreset::MnistCnn6,
        ArchPreset::CifarCnn9,
        ArchPreset::CifarCnn9Attack,
        ArchPreset::Custom,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ArchPreset::MnistCnn6 => "mnist-cnn6",
            ArchPreset::CifarCnn9 => "cifar-cnn9",
            ArchPreset::CifarCnn9Attack => "cifar-cnn9-attack",
            ArchPreset::Custom => "custom",
        }
    }

    /// Layer list of a named preset; `None` for `Custom`.
    pub fn items(self) -> Option<Vec<ArchItem>> {
        use ArchItem::{Conv, Fc, Pool};
        let groups: &[(usize, usize)] = match self {
            ArchPreset::MnistCnn6 => &[(32, 2), (64, 2), (128, 2)],
            ArchPreset::CifarCnn9 => &[(64, 3), (128, 3), (256, 3)],
            ArchPreset::CifarCnn9Attack => &[(32, 3), (64, 3), (128, 3)],
            ArchPreset::Custom => return None,
        };
        let mut items = Vec::new();
        for &(width, count) in groups {
            items.extend(std::iter::repeat_n(Conv(width), count));
            items.push(Pool);
        }
        items.push(Fc(match self {
            ArchPreset::CifarCnn9 => 512,
            _ => 256,
        }));
        Some(items)
    }
}

impl fmt::Display for ArchPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ArchPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ArchPreset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown architecture preset `{s}`")))
    }
}

/// Everything needed to instantiate a network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub preset: ArchPreset,
    /// Used only by [`ArchPreset::Custom`].
    pub layers: Vec<ArchItem>,
    /// Operator for every convolution.
    pub conv: ConvOperator,
    /// Per-group overrides; group `i` is the run of convolutions before the
    /// `i`-th pooling layer.
    pub group_ops: Vec<ConvOperator>,
    /// Hidden FC layers use the decoupled operator when `conv` is decoupled.
    pub decoupled_fc: bool,
    pub bn: bool,
    pub relu: bool,
    /// Every layer width is divided by this (at least 1 channel remains).
    pub width_divisor: usize,
    pub in_channels: usize,
    pub input_size: usize,
    pub num_classes: usize,
    pub regularizer: RegularizerSpec,
}

impl ArchSpec {
    pub fn preset(preset: ArchPreset, conv: ConvOperator) -> Self {
        let (in_channels, input_size) = match preset {
            ArchPreset::MnistCnn6 => (1, 28),
            _ => (3, 32),
        };
        Self {
            preset,
            layers: Vec::new(),
            conv,
            group_ops: Vec::new(),
            decoupled_fc: false,
            bn: false,
            relu: true,
            width_divisor: 1,
            in_channels,
            input_size,
            num_classes: 10,
            regularizer: RegularizerSpec::None,
        }
    }

    pub fn items(&self) -> Result<Vec<ArchItem>> {
        let items = match self.preset.items() {
            Some(items) => items,
            None => self.layers.clone(),
        };
        if items.is_empty() {
            return Err(Error::Config("custom architecture has no layers".into()));
        }
        Ok(items)
    }

    pub fn validate(&self) -> Result<()> {
        self.conv.validate()?;
        for op in &self.group_ops {
            op.validate()?;
        }
        self.regularizer.validate()?;
        if self.width_divisor == 0
            || self.in_channels == 0
            || self.input_size == 0
            || self.num_classes == 0
        {
            return Err(Error::Config(
                "width divisor, channels, input size and class count must be positive".into(),
            ));
        }
        self.items().map(|_| ())
    }

    pub fn build<T: Real>(&self, rng: &mut impl Rng) -> Result<Network<T>> {
        self.validate()?;
        let geometry = ConvGeometry::square(3, 1)?;
        let mut nodes = Vec::new();
        let (mut c, mut h, mut w) = (self.in_channels, self.input_size, self.input_size);
        let mut flat: Option<usize> = None;
        let mut group = 0;
        for item in self.items()? {
            match item {
                ArchItem::Conv(width) => {
                    if flat.is_some() {
                        return Err(Error::Config(
                            "convolution after a fully connected layer".into(),
                        ));
                    }
                    let k = (width / self.width_divisor).max(1);
                    let op = self.group_ops.get(group).copied().unwrap_or(self.conv);
                    nodes.push(match op {
                        ConvOperator::Standard => {
                            LayerNode::StandardConv(StandardConv::new(c, k, geometry, rng)?)
                        }
                        ConvOperator::Decoupled(spec) => LayerNode::DecoupledConv(
                            DecoupledConvLayer::new(c, k, geometry, spec, rng)?,
                        ),
                    });
                    if self.bn {
                        nodes.push(LayerNode::BatchNorm(BatchNorm::new(k)?));
                    }
                    if self.relu {
                        nodes.push(LayerNode::Relu);
                    }
                    c = k;
                }
                ArchItem::Pool => {
                    if flat.is_some() {
                        return Err(Error::Config(
                            "pooling after a fully connected layer".into(),
                        ));
                    }
                    if h < 2 || w < 2 {
                        return Err(Error::Config(format!("pooling a {h}x{w} map")));
                    }
                    nodes.push(LayerNode::MaxPool(MaxPool { size: 2, stride: 2 }));
                    h /= 2;
                    w /= 2;
                    group += 1;
                }
                ArchItem::Fc(width) => {
                    let inputs = match flat {
                        Some(n) => n,
                        None => {
                            nodes.push(LayerNode::Flatten);
                            c * h * w
                        }
                    };
                    let n = (width / self.width_divisor).max(1);
                    nodes.push(self.fc_node(inputs, n, rng)?);
                    if self.relu {
                        nodes.push(LayerNode::Relu);
                    }
                    flat = Some(n);
                }
            }
        }
        let inputs = match flat {
            Some(n) => n,
            None => {
                nodes.push(LayerNode::Flatten);
                c * h * w
            }
        };
        nodes.push(LayerNode::FullyConnected(FullyConnected::new(
            inputs,
            self.num_classes,
            rng,
        )?));
        Network::new(nodes, self.regularizer)
    }

    fn fc_node<T: Real>(
        &self,
        inputs: usize,
        outputs: usize,
        rng: &mut impl Rng,
    ) -> Result<LayerNode<T>> {
        match self.conv {
            ConvOperator::Decoupled(spec) if self.decoupled_fc => Ok(LayerNode::DecoupledFc(
                DecoupledConvLayer::new(inputs, outputs, ConvGeometry::square(1, 0)?, spec, rng)?,
            )),
            _ => Ok(LayerNode::FullyConnected(FullyConnected::new(
                inputs, outputs, rng,
            )?)),
        }
    }
}
