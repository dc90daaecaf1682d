//! Concrete networks: parameters for a [`NetworkSpec`] and the forward pass
//! that wires them into a [`Graph`].
//!
//! Master parameters are kept in `f64`; a forward pass casts them to the
//! graph's scalar type.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::binarize::{BinarizeOptions, WeightMode};
use crate::error::{dim_err, Error, Result};
use crate::graph::{Graph, NodeId};
use crate::layers::{Activation, BatchNormState};
use crate::netspec::{BlockKind, NetworkSpec};
use crate::scalar::Scalar;
use crate::surrogate::SurrogateKind;
use crate::tensor::Tensor;

/// What a parameter is, which decides how the optimizer treats it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    /// Weights of a main-path convolution (binarizable).
    MainConv,
    /// Stem, downsample or fully connected weights and biases.
    Real,
    BnGamma,
    BnBeta,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor<f64>,
}

/// A convolution and the batch norm that follows it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvRef {
    pub param: usize,
    pub bn: usize,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockRefs {
    pub kind: BlockKind,
    pub convs: Vec<ConvRef>,
    pub downsample: Option<ConvRef>,
    pub stride: usize,
}

/// Per main-path conv: which of its weights and input activations are binary.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerMask {
    pub binary_weights: bool,
    pub binary_acts: bool,
}

impl LayerMask {
    pub const BINARY: LayerMask = LayerMask { binary_weights: true, binary_acts: true };
    pub const REAL: LayerMask = LayerMask { binary_weights: false, binary_acts: false };
}

/// How one forward pass treats activations, weights and batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardConfig {
    /// Non-linearity ahead of real-activation layers.
    pub real_act: Activation,
    /// Non-linearity ahead of binary-activation layers.
    pub binary_act: Activation,
    pub weight_mode: WeightMode,
    pub weight_opts: BinarizeOptions,
    pub masks: Vec<LayerMask>,
    /// Batch statistics when true, running statistics otherwise.
    pub train: bool,
}

impl ForwardConfig {
    /// Everything real-valued with the given non-linearity.
    pub fn real(net: &Network, act: Activation) -> Self {
        ForwardConfig {
            real_act: act,
            binary_act: act,
            weight_mode: WeightMode::Real,
            weight_opts: BinarizeOptions::default(),
            masks: vec![LayerMask::REAL; net.main_conv_count()],
            train: false,
        }
    }

    /// Fully binarized main path as described by the spec's binarization settings.
    pub fn binary(net: &Network) -> Self {
        let b = net.spec.binarization;
        ForwardConfig {
            real_act: Activation::Clip,
            binary_act: Activation::Sign(b.surrogate),
            weight_mode: b.weight_mode,
            weight_opts: b.options(),
            masks: vec![LayerMask::BINARY; net.main_conv_count()],
            train: false,
        }
    }

    /// What the network is meant to run as: binary if the spec is, real
    /// (with clip) otherwise.
    pub fn deployed(net: &Network) -> Self {
        if net.spec.binary {
            Self::binary(net)
        } else {
            Self::real(net, Activation::Relu)
        }
    }

    /// Every sign replaced by the smooth surrogate in both directions.
    pub fn smooth(net: &Network, kind: SurrogateKind) -> Self {
        let mut cfg = Self::binary(net);
        cfg.binary_act = Activation::Smooth(kind);
        cfg.weight_opts.smooth = Some(kind);
        cfg
    }

    pub fn training(mut self, train: bool) -> Self {
        self.train = train;
        self
    }
}

/// Node ids produced by [`Network::forward`].
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub logits: NodeId,
    /// One leaf per entry of [`Network::param_kinds`], in the same order.
    pub params: Vec<NodeId>,
    /// Batch-norm output nodes, aligned with [`Network::bns`].
    pub bns: Vec<NodeId>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub spec: NetworkSpec,
    pub params: Vec<Param>,
    pub bns: Vec<BatchNormState>,
    pub stem: ConvRef,
    pub blocks: Vec<BlockRefs>,
    pub fc_weight: usize,
    pub fc_bias: usize,
    /// Main conv weights constrained to ±1 and no longer trained.
    pub frozen: bool,
}

struct Builder {
    rng: ChaCha8Rng,
    params: Vec<Param>,
    bns: Vec<BatchNormState>,
}

impl Builder {
    fn conv(&mut self, name: String, kind: ParamKind, k: usize, cin: usize, cout: usize, stride: usize) -> ConvRef {
        // He-normal, fan-in
        let std = (2.0 / (k * k * cin) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        let value = Tensor::from_fn(vec![cout, cin, k, k], |_| normal.sample(&mut self.rng));
        self.params.push(Param { name, kind, value });
        self.bns.push(BatchNormState::new(cout));
        ConvRef { param: self.params.len() - 1, bn: self.bns.len() - 1, stride, pad: k / 2 }
    }
}

impl Network {
    /// Fresh parameters for `spec`, deterministic in `seed`.
    pub fn init(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut b = Builder { rng: ChaCha8Rng::seed_from_u64(seed), params: Vec::new(), bns: Vec::new() };
        let st = &spec.stem;
        let mut stem = b.conv("stem".into(), ParamKind::Real, st.kernel, spec.input[0], st.out_channels, st.stride);
        stem.pad = st.pad;
        let mut blocks = Vec::with_capacity(spec.blocks.len());
        for (i, blk) in spec.blocks.iter().enumerate() {
            let convs = blk
                .convs()
                .into_iter()
                .enumerate()
                .map(|(j, (k, cin, cout, s))| b.conv(format!("block{i}.conv{j}"), ParamKind::MainConv, k, cin, cout, s))
                .collect();
            let downsample = blk.needs_downsample().then(|| {
                b.conv(format!("block{i}.downsample"), ParamKind::Real, 1, blk.in_channels, blk.out_channels, 1)
            });
            blocks.push(BlockRefs { kind: blk.kind, convs, downsample, stride: blk.stride });
        }
        let fan_in = spec.final_channels();
        let bound = 1.0 / (fan_in as f64).sqrt();
        let uniform = Uniform::new(-bound, bound);
        let fc_w = Tensor::from_fn(vec![spec.classes, fan_in], |_| uniform.sample(&mut b.rng));
        let fc_b = Tensor::from_fn(vec![spec.classes], |_| uniform.sample(&mut b.rng));
        b.params.push(Param { name: "fc.weight".into(), kind: ParamKind::Real, value: fc_w });
        b.params.push(Param { name: "fc.bias".into(), kind: ParamKind::Real, value: fc_b });
        let n = b.params.len();
        Ok(Network {
            spec: spec.clone(),
            params: b.params,
            bns: b.bns,
            stem,
            blocks,
            fc_weight: n - 2,
            fc_bias: n - 1,
            frozen: false,
        })
    }

    pub fn main_conv_count(&self) -> usize {
        self.blocks.iter().map(|b| b.convs.len()).sum()
    }

    /// Main-path convolutions in forward order.
    pub fn main_convs(&self) -> impl Iterator<Item = &ConvRef> {
        self.blocks.iter().flat_map(|b| b.convs.iter())
    }

    /// Kinds of every trainable tensor: the parameters, then each batch
    /// norm's gamma and beta.
    pub fn param_kinds(&self) -> Vec<ParamKind> {
        self.params
            .iter()
            .map(|p| p.kind)
            .chain(self.bns.iter().flat_map(|_| [ParamKind::BnGamma, ParamKind::BnBeta]))
            .collect()
    }

    /// Mutable views of every trainable tensor in [`Network::param_kinds`] order.
    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = self.params.iter_mut().map(|p| p.value.data_mut()).collect();
        for bn in &mut self.bns {
            out.push(&mut bn.gamma);
            out.push(&mut bn.beta);
        }
        out
    }

    pub fn param_slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = self.params.iter().map(|p| p.value.data()).collect();
        for bn in &self.bns {
            out.push(&bn.gamma);
            out.push(&bn.beta);
        }
        out
    }

    /// Total scalar count over [`Network::param_slices`].
    pub fn trainable_len(&self) -> usize {
        self.param_slices().iter().map(|s| s.len()).sum()
    }

    /// `(real, binary)` parameter counts when deployed; batch-norm gamma and
    /// beta count as real.
    pub fn parameter_counts(&self) -> (usize, usize) {
        let binary = if self.spec.binary {
            self.params.iter().filter(|p| p.kind == ParamKind::MainConv).map(|p| p.value.len()).sum()
        } else {
            0
        };
        (self.trainable_len() - binary, binary)
    }

    /// Constrains every main conv to `sign(W_r)`; the scales are dropped.
    pub fn freeze(&mut self) {
        for p in self.params.iter_mut().filter(|p| p.kind == ParamKind::MainConv) {
            p.value = p.value.map(crate::surrogate::sign);
        }
        self.frozen = true;
    }

    fn check_input<T: Scalar>(&self, x: &Tensor<T>) -> Result<()> {
        let [_, c, h, w] = x.dims4()?;
        if [c, h, w] != self.spec.input {
            return Err(dim_err!("network `{}` expects input {:?}, got {:?}", self.spec.name, self.spec.input, [c, h, w]));
        }
        Ok(())
    }

    /// Builds the forward graph for a batch and returns the node ids needed
    /// for the loss and the parameter update.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: &Tensor<T>, cfg: &ForwardConfig) -> Result<ForwardTrace> {
        self.check_input(x)?;
        if cfg.masks.len() != self.main_conv_count() {
            return Err(Error::Config(format!(
                "{} layer masks for {} main convolutions",
                cfg.masks.len(),
                self.main_conv_count()
            )));
        }
        let input = g.leaf(x.clone());
        let params: Vec<NodeId> = self.param_slices().iter().zip(self.param_shapes()).map(|(s, shape)| {
            g.leaf(Tensor::new(shape, s.iter().map(|&v| T::from_f64(v)).collect()).expect("shape matches"))
        }).collect();
        let mut fw = Forward { net: self, cfg, params: &params, bn_nodes: vec![None; self.bns.len()], layer: 0 };

        let mut h = fw.conv_bn(g, input, self.stem, WeightMode::Real)?;
        if let Some((k, s)) = self.spec.stem.pool {
            h = g.avg_pool(h, k, s)?;
        }
        for blk in &self.blocks {
            h = fw.block(g, h, blk)?;
        }
        let pooled = g.global_avg_pool(h)?;
        let logits = g.linear(pooled, params[self.fc_weight], params[self.fc_bias])?;
        let bns = fw
            .bn_nodes
            .into_iter()
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| Error::Spec("network has batch norms that are never used".into()))?;
        Ok(ForwardTrace { logits, params, bns })
    }

    fn param_shapes(&self) -> Vec<Vec<usize>> {
        self.params
            .iter()
            .map(|p| p.value.shape().to_vec())
            .chain(self.bns.iter().flat_map(|bn| [vec![bn.channels()], vec![bn.channels()]]))
            .collect()
    }

    /// Index in [`Network::param_kinds`] order of a batch norm's gamma.
    pub fn bn_gamma_index(&self, bn: usize) -> usize {
        self.params.len() + 2 * bn
    }

    /// Logits for a batch in inference mode.
    pub fn predict<T: Scalar>(&self, x: &Tensor<T>, cfg: &ForwardConfig) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let cfg = ForwardConfig { train: false, ..cfg.clone() };
        let trace = self.forward(&mut g, x, &cfg)?;
        Ok(g.value(trace.logits).clone())
    }
}

struct Forward<'a> {
    net: &'a Network,
    cfg: &'a ForwardConfig,
    params: &'a [NodeId],
    bn_nodes: Vec<Option<NodeId>>,
    layer: usize,
}

impl Forward<'_> {
    fn conv_bn<T: Scalar>(&mut self, g: &mut Graph<T>, x: NodeId, c: ConvRef, mode: WeightMode) -> Result<NodeId> {
        let w = g.binarize(self.params[c.param], mode, self.cfg.weight_opts)?;
        let y = g.conv2d(x, w, c.stride, c.pad)?;
        let bn = &self.net.bns[c.bn];
        let gi = self.net.bn_gamma_index(c.bn);
        let (gamma, beta) = (self.params[gi], self.params[gi + 1]);
        let eps = T::from_f64(bn.eps);
        let z = if self.cfg.train {
            g.batch_norm(y, gamma, beta, eps, None)?
        } else {
            let mean: Vec<T> = bn.running_mean.iter().map(|&v| T::from_f64(v)).collect();
            let var: Vec<T> = bn.running_var.iter().map(|&v| T::from_f64(v)).collect();
            g.batch_norm(y, gamma, beta, eps, Some((&mean, &var)))?
        };
        self.bn_nodes[c.bn] = Some(z);
        Ok(z)
    }

    /// Activation, convolution and batch norm of the next main-path layer.
    fn main_layer<T: Scalar>(&mut self, g: &mut Graph<T>, x: NodeId, c: ConvRef) -> Result<NodeId> {
        let mask = self.cfg.masks[self.layer];
        self.layer += 1;
        let act = if mask.binary_acts { self.cfg.binary_act } else { self.cfg.real_act };
        let mode = if mask.binary_weights { self.cfg.weight_mode } else { WeightMode::Real };
        let a = g.activation(x, act);
        self.conv_bn(g, a, c, mode)
    }

    fn shortcut<T: Scalar>(&mut self, g: &mut Graph<T>, x: NodeId, blk: &BlockRefs) -> Result<NodeId> {
        let Some(ds) = blk.downsample else { return Ok(x) };
        let pooled = if blk.stride > 1 { g.avg_pool(x, 2, blk.stride)? } else { x };
        self.conv_bn(g, pooled, ds, WeightMode::Real)
    }

    fn block<T: Scalar>(&mut self, g: &mut Graph<T>, x: NodeId, blk: &BlockRefs) -> Result<NodeId> {
        match blk.kind {
            BlockKind::Plain => self.main_layer(g, x, blk.convs[0]),
            BlockKind::BiRealShallow => {
                let y = self.main_layer(g, x, blk.convs[0])?;
                let s = self.shortcut(g, x, blk)?;
                g.add(y, s)
            }
            BlockKind::ResNet2Layer => {
                let y = self.main_layer(g, x, blk.convs[0])?;
                let y = self.main_layer(g, y, blk.convs[1])?;
                let s = self.shortcut(g, x, blk)?;
                g.add(y, s)
            }
            BlockKind::BiRealBottleneck => {
                let a1 = self.main_layer(g, x, blk.convs[0])?;
                let a2 = self.main_layer(g, a1, blk.convs[1])?;
                let inner = if blk.stride > 1 { g.avg_pool(a1, 2, blk.stride)? } else { a1 };
                let a2 = g.add(a2, inner)?;
                let a3 = self.main_layer(g, a2, blk.convs[2])?;
                let s = self.shortcut(g, x, blk)?;
                g.add(a3, s)
            }
        }
    }
}
