//! Declarative network descriptions and the reference specs.
//!
//! A network is a real-valued stem (conv + batch norm, optional pooling), a
//! sequence of blocks, and a real-valued head (global average pool + fully
//! connected layer). Blocks come in four topologies:
//!
//! * `BiRealShallow`: `x + BN(conv(sign(x)))`, one shortcut per conv layer.
//! * `ResNet2Layer`: `x + BN(conv(sign(BN(conv(sign(x))))))`, one shortcut per
//!   two conv layers (ReLU-only pre-activation ordering).
//! * `Plain`: `BN(conv(sign(x)))` with no shortcut.
//! * `BiRealBottleneck`: 1x1 reduce, 3x3, 1x1 expand, with an extra inner
//!   shortcut adding the 3x3 layer's real input to its batch-norm output, in
//!   series with the block-level shortcut.
//!
//! Whenever the shortcut changes resolution or width it goes through a
//! real-valued downsample path: 2x2 average pooling (if strided), a 1x1
//! convolution and batch norm.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::binarize::{BinarizeOptions, ScaleNorm, WeightMode};
use crate::error::{Error, Result};
use crate::layers::pool_out_dim;
use crate::surrogate::SurrogateKind;
use crate::tensor::conv_out_dim;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    BiRealShallow,
    BiRealBottleneck,
    ResNet2Layer,
    Plain,
}

impl std::str::FromStr for BlockKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bi_real_shallow" => Ok(BlockKind::BiRealShallow),
            "bi_real_bottleneck" => Ok(BlockKind::BiRealBottleneck),
            "res_net2_layer" | "resnet" => Ok(BlockKind::ResNet2Layer),
            "plain" => Ok(BlockKind::Plain),
            other => Err(Error::Config(format!("unknown block kind `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Downsample {
    None,
    /// 2x2 average pooling (when strided), then a real 1x1 conv and batch norm.
    AvgPoolConv,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BlockSpec {
    pub kind: BlockKind,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Bottleneck width; ignored by the other kinds.
    #[serde(default)]
    pub mid_channels: usize,
    pub stride: usize,
    pub downsample: Downsample,
}

impl BlockSpec {
    pub fn needs_downsample(&self) -> bool {
        self.kind != BlockKind::Plain && (self.stride != 1 || self.in_channels != self.out_channels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 || self.stride == 0 {
            return Err(Error::Spec(format!("block {self:?} has a zero dimension")));
        }
        if self.kind == BlockKind::BiRealBottleneck && self.mid_channels == 0 {
            return Err(Error::Spec("bottleneck block needs mid_channels".into()));
        }
        match (self.needs_downsample(), self.downsample) {
            (true, Downsample::None) => Err(Error::Spec(format!(
                "block {}->{} stride {} changes shape but has no downsample path",
                self.in_channels, self.out_channels, self.stride
            ))),
            (false, Downsample::AvgPoolConv) if self.kind == BlockKind::Plain => {
                Err(Error::Spec("plain blocks have no shortcut to downsample".into()))
            }
            _ => Ok(()),
        }
    }

    /// Conv layers on the main path as `(kernel, in, out, stride)`.
    pub fn convs(&self) -> Vec<(usize, usize, usize, usize)> {
        let (i, o, s) = (self.in_channels, self.out_channels, self.stride);
        match self.kind {
            BlockKind::BiRealShallow | BlockKind::Plain => vec![(3, i, o, s)],
            BlockKind::ResNet2Layer => vec![(3, i, o, s), (3, o, o, 1)],
            BlockKind::BiRealBottleneck => {
                let m = self.mid_channels;
                vec![(1, i, m, 1), (3, m, m, s), (1, m, o, 1)]
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StemSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    /// Average pooling `(kernel, stride)` after the stem batch norm.
    #[serde(default)]
    pub pool: Option<(usize, usize)>,
}

/// Training-time binarization settings carried with the network.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinarizationSpec {
    pub surrogate: SurrogateKind,
    pub weight_mode: WeightMode,
    #[serde(default)]
    pub scale_norm: ScaleNorm,
    #[serde(default = "default_true")]
    pub scale_grad: bool,
}

fn default_true() -> bool {
    true
}

impl Default for BinarizationSpec {
    fn default() -> Self {
        BinarizationSpec {
            surrogate: SurrogateKind::ApproxSign2,
            weight_mode: WeightMode::MagnitudeAware,
            scale_norm: ScaleNorm::Mean,
            scale_grad: true,
        }
    }
}

impl BinarizationSpec {
    pub fn options(&self) -> BinarizeOptions {
        BinarizeOptions { norm: self.scale_norm, scale_grad: self.scale_grad, smooth: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub name: String,
    /// Input `[channels, height, width]`.
    pub input: [usize; 3],
    pub stem: StemSpec,
    pub blocks: Vec<BlockSpec>,
    pub classes: usize,
    /// `false` describes the full-precision counterpart (nothing binarized).
    pub binary: bool,
    pub binarization: BinarizationSpec,
}

/// One stage of a channel plan: `layers` binarizable 3x3 conv layers of width
/// `channels`, the first one strided by `stride`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Stage {
    pub channels: usize,
    pub layers: usize,
    pub stride: usize,
}

impl NetworkSpec {
    /// Expands a 3x3-layer channel plan into blocks of the given kind.
    /// `ResNet2Layer` pairs consecutive layers, so every stage needs an even
    /// layer count.
    pub fn from_plan(
        name: &str,
        kind: BlockKind,
        input: [usize; 3],
        stem: StemSpec,
        plan: &[Stage],
        classes: usize,
    ) -> Result<Self> {
        if kind == BlockKind::BiRealBottleneck {
            return Err(Error::Spec("use from_bottleneck_plan for bottleneck nets".into()));
        }
        let mut blocks = Vec::new();
        let mut ch = stem.out_channels;
        for st in plan {
            let per_block = if kind == BlockKind::ResNet2Layer { 2 } else { 1 };
            if st.layers % per_block != 0 || st.layers == 0 {
                return Err(Error::Spec(format!("stage of {} layers cannot be split into {kind:?} blocks", st.layers)));
            }
            for b in 0..st.layers / per_block {
                let stride = if b == 0 { st.stride } else { 1 };
                let mut block = BlockSpec {
                    kind,
                    in_channels: ch,
                    out_channels: st.channels,
                    mid_channels: 0,
                    stride,
                    downsample: Downsample::None,
                };
                if block.needs_downsample() {
                    block.downsample = Downsample::AvgPoolConv;
                }
                blocks.push(block);
                ch = st.channels;
            }
        }
        let spec = NetworkSpec {
            name: name.into(),
            input,
            stem,
            blocks,
            classes,
            binary: true,
            binarization: BinarizationSpec::default(),
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Bottleneck stages `(mid_channels, blocks, stride)`; output width is `4 * mid`.
    pub fn from_bottleneck_plan(
        name: &str,
        input: [usize; 3],
        stem: StemSpec,
        plan: &[(usize, usize, usize)],
        classes: usize,
    ) -> Result<Self> {
        let mut blocks = Vec::new();
        let mut ch = stem.out_channels;
        for &(mid, count, stride) in plan {
            for b in 0..count {
                let mut block = BlockSpec {
                    kind: BlockKind::BiRealBottleneck,
                    in_channels: ch,
                    out_channels: 4 * mid,
                    mid_channels: mid,
                    stride: if b == 0 { stride } else { 1 },
                    downsample: Downsample::None,
                };
                if block.needs_downsample() {
                    block.downsample = Downsample::AvgPoolConv;
                }
                blocks.push(block);
                ch = 4 * mid;
            }
        }
        let spec = NetworkSpec {
            name: name.into(),
            input,
            stem,
            blocks,
            classes,
            binary: true,
            binarization: BinarizationSpec::default(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_kind(&self, kind: BlockKind) -> Result<Self> {
        let plan = self.layer_plan()?;
        let mut spec = NetworkSpec::from_plan(&self.name, kind, self.input, self.stem.clone(), &plan, self.classes)?;
        spec.binary = self.binary;
        spec.binarization = self.binarization;
        Ok(spec)
    }

    /// Recovers the 3x3-layer channel plan of a non-bottleneck spec.
    pub fn layer_plan(&self) -> Result<Vec<Stage>> {
        let mut plan: Vec<Stage> = Vec::new();
        for b in &self.blocks {
            for (k, _, o, s) in b.convs() {
                if k != 3 || b.kind == BlockKind::BiRealBottleneck {
                    return Err(Error::Spec("bottleneck nets have no 3x3 layer plan".into()));
                }
                match plan.last_mut() {
                    Some(st) if st.channels == o && s == 1 => st.layers += 1,
                    _ => plan.push(Stage { channels: o, layers: 1, stride: s }),
                }
            }
        }
        Ok(plan)
    }

    /// Every channel count multiplied by `k`; `k = 1` returns the spec unchanged.
    pub fn widened(&self, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::Spec("width multiplier must be positive".into()));
        }
        if k == 1 {
            return Ok(self.clone());
        }
        let mut spec = self.clone();
        spec.name = format!("{}_x{k}", self.name);
        spec.stem.out_channels *= k;
        for b in &mut spec.blocks {
            b.in_channels *= k;
            b.out_channels *= k;
            b.mid_channels *= k;
        }
        Ok(spec)
    }

    pub fn full_precision(&self) -> Self {
        NetworkSpec { binary: false, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(Error::Spec("network has no blocks".into()));
        }
        if self.classes == 0 || self.input.contains(&0) {
            return Err(Error::Spec("zero-sized input or class count".into()));
        }
        let mut ch = self.stem.out_channels;
        for (i, b) in self.blocks.iter().enumerate() {
            b.validate()?;
            if b.in_channels != ch {
                return Err(Error::Spec(format!(
                    "block {i} expects {} input channels but receives {ch}",
                    b.in_channels
                )));
            }
            ch = b.out_channels;
        }
        self.feature_sizes().map(|_| ())
    }

    /// Spatial size after the stem, then after each block.
    pub fn feature_sizes(&self) -> Result<Vec<(usize, usize)>> {
        let bad = || Error::Spec(format!("network `{}` collapses the spatial size to zero", self.name));
        let [_, h, w] = self.input;
        let st = &self.stem;
        let mut hw = (
            conv_out_dim(h, st.kernel, st.stride, st.pad).ok_or_else(bad)?,
            conv_out_dim(w, st.kernel, st.stride, st.pad).ok_or_else(bad)?,
        );
        if let Some((k, s)) = st.pool {
            hw = (pool_out_dim(hw.0, k, s), pool_out_dim(hw.1, k, s));
        }
        let mut sizes = vec![hw];
        for b in &self.blocks {
            let s = b.stride;
            hw = (conv_out_dim(hw.0, 3, s, 1).ok_or_else(bad)?, conv_out_dim(hw.1, 3, s, 1).ok_or_else(bad)?);
            sizes.push(hw);
        }
        Ok(sizes)
    }

    pub fn final_channels(&self) -> usize {
        self.blocks.last().map_or(self.stem.out_channels, |b| b.out_channels)
    }

    /// Weights of the binarizable (main-path) conv layers.
    pub fn main_path_weight_count(&self) -> usize {
        self.blocks
            .iter()
            .flat_map(|b| b.convs())
            .map(|(k, i, o, _)| k * k * i * o)
            .sum()
    }

    /// SHA-256 over the canonical JSON encoding.
    pub fn digest(&self) -> [u8; 32] {
        let json = serde_json::to_vec(self).expect("spec serializes");
        Sha256::digest(&json).into()
    }

    pub fn weight_mode(&self) -> WeightMode {
        if self.binary {
            self.binarization.weight_mode
        } else {
            WeightMode::Real
        }
    }
}

/// Reference specs, addressable by name from the command line.
pub mod reference {
    use super::*;

    pub const NAMES: &[&str] = &[
        "bireal10_mnist",
        "resnet10_mnist",
        "plain10_mnist",
        "bireal10_cifar",
        "bottleneck_mnist",
        "bireal18_imagenet",
        "bireal34_imagenet",
        "resnet18_imagenet",
        "resnet34_imagenet",
        "bireal50_imagenet",
    ];

    /// Ten binarizable 3x3 layers: 4 at width 16, 4 at 32 (strided), 2 at 64 (strided).
    pub const DESK_PLAN: [Stage; 3] = [
        Stage { channels: 16, layers: 4, stride: 1 },
        Stage { channels: 32, layers: 4, stride: 2 },
        Stage { channels: 64, layers: 2, stride: 2 },
    ];

    fn desk_stem() -> StemSpec {
        StemSpec { out_channels: 16, kernel: 3, stride: 2, pad: 1, pool: None }
    }

    pub fn desk(kind: BlockKind, name: &str, input: [usize; 3]) -> NetworkSpec {
        NetworkSpec::from_plan(name, kind, input, desk_stem(), &DESK_PLAN, 10).expect("desk plan is valid")
    }

    pub fn mnist(kind: BlockKind) -> NetworkSpec {
        let name = match kind {
            BlockKind::BiRealShallow => "bireal10_mnist",
            BlockKind::ResNet2Layer => "resnet10_mnist",
            BlockKind::Plain => "plain10_mnist",
            BlockKind::BiRealBottleneck => return bottleneck_mnist(),
        };
        desk(kind, name, [1, 28, 28])
    }

    /// Three bottleneck stages of two blocks, widths 8/16/32 (outputs 32/64/128).
    pub fn bottleneck_mnist() -> NetworkSpec {
        let stem = StemSpec { out_channels: 32, kernel: 3, stride: 2, pad: 1, pool: None };
        NetworkSpec::from_bottleneck_plan("bottleneck_mnist", [1, 28, 28], stem, &[(8, 2, 1), (16, 2, 2), (32, 2, 2)], 10)
            .expect("bottleneck plan is valid")
    }

    fn imagenet_stem() -> StemSpec {
        StemSpec { out_channels: 64, kernel: 7, stride: 2, pad: 3, pool: Some((3, 2)) }
    }

    fn imagenet_plan(layers: [usize; 4]) -> Vec<Stage> {
        [64, 128, 256, 512]
            .iter()
            .zip(layers)
            .enumerate()
            .map(|(i, (&channels, layers))| Stage { channels, layers, stride: if i == 0 { 1 } else { 2 } })
            .collect()
    }

    pub fn imagenet(kind: BlockKind, depth: usize) -> Result<NetworkSpec> {
        let layers = match depth {
            18 => [4, 4, 4, 4],
            34 => [6, 8, 12, 6],
            other => return Err(Error::Spec(format!("no {other}-layer basic-block plan"))),
        };
        let prefix = if kind == BlockKind::BiRealShallow { "bireal" } else { "resnet" };
        NetworkSpec::from_plan(
            &format!("{prefix}{depth}_imagenet"),
            kind,
            [3, 224, 224],
            imagenet_stem(),
            &imagenet_plan(layers),
            1000,
        )
    }

    pub fn by_name(name: &str) -> Result<NetworkSpec> {
        let spec = match name {
            "bireal10_mnist" => mnist(BlockKind::BiRealShallow),
            "resnet10_mnist" => mnist(BlockKind::ResNet2Layer),
            "plain10_mnist" => mnist(BlockKind::Plain),
            "bireal10_cifar" => desk(BlockKind::BiRealShallow, "bireal10_cifar", [3, 32, 32]),
            "bottleneck_mnist" => bottleneck_mnist(),
            "bireal18_imagenet" => imagenet(BlockKind::BiRealShallow, 18)?,
            "bireal34_imagenet" => imagenet(BlockKind::BiRealShallow, 34)?,
            "resnet18_imagenet" => imagenet(BlockKind::ResNet2Layer, 18)?.full_precision(),
            "resnet34_imagenet" => imagenet(BlockKind::ResNet2Layer, 34)?.full_precision(),
            "bireal50_imagenet" => NetworkSpec::from_bottleneck_plan(
                "bireal50_imagenet",
                [3, 224, 224],
                imagenet_stem(),
                &[(64, 3, 1), (128, 4, 2), (256, 6, 2), (512, 3, 2)],
                1000,
            )?,
            other => {
                return Err(Error::Spec(format!(
                    "unknown reference spec `{other}` (known: {})",
                    NAMES.join(", ")
                )))
            }
        };
        Ok(spec)
    }
}
