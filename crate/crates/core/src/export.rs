//! Deployable networks: packed ±1 main-path weights with their scales folded
//! into batch norm, run entirely through the XNOR-popcount kernels.

use crate::binarize::{absorb_scale_into_bn, filter_scales, ExportedLayer, WeightMode};
use crate::bits::sign_pack;
use crate::error::{dim_err, Error, Result};
use crate::layers::{avg_pool2d_forward, conv2d_forward, global_avg_pool_forward, linear_forward, BatchNormState};
use crate::model::{ConvRef, Network};
use crate::netspec::{BlockKind, NetworkSpec};
use crate::tensor::Tensor;

/// A real-valued convolution followed by inference-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct RealConv {
    pub weight: Tensor<f64>,
    pub stride: usize,
    pub pad: usize,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

impl RealConv {
    fn from_network(net: &Network, c: ConvRef) -> Self {
        let bn = &net.bns[c.bn];
        RealConv {
            weight: net.params[c.param].value.clone(),
            stride: c.stride,
            pad: c.pad,
            mean: bn.running_mean.clone(),
            std: folded_std(bn, 1.0),
            gamma: bn.gamma.clone(),
            beta: bn.beta.clone(),
        }
    }

    pub fn forward(&self, x: &Tensor<f64>) -> Result<Tensor<f64>> {
        let y = conv2d_forward(x, &self.weight, self.stride, self.pad)?;
        normalize(y, &self.mean, &self.std, &self.gamma, &self.beta)
    }
}

fn folded_std(bn: &BatchNormState, scale: f64) -> Vec<f64> {
    bn.running_var.iter().map(|v| (v + bn.eps).sqrt() / scale).collect()
}

fn normalize(mut y: Tensor<f64>, mean: &[f64], std: &[f64], gamma: &[f64], beta: &[f64]) -> Result<Tensor<f64>> {
    let [_, c, h, w] = y.dims4()?;
    if [mean.len(), std.len(), gamma.len(), beta.len()] != [c; 4] {
        return Err(dim_err!("batch norm over {} channels applied to {c}", mean.len()));
    }
    for (i, v) in y.data_mut().iter_mut().enumerate() {
        let ch = (i / (h * w)) % c;
        *v = gamma[ch] * (*v - mean[ch]) / std[ch] + beta[ch];
    }
    Ok(y)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExportedBlock {
    pub kind: BlockKind,
    pub stride: usize,
    pub layers: Vec<ExportedLayer>,
    pub downsample: Option<RealConv>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExportedModel {
    pub spec: NetworkSpec,
    pub stem: RealConv,
    pub blocks: Vec<ExportedBlock>,
    pub fc_weight: Tensor<f64>,
    pub fc_bias: Tensor<f64>,
}

impl ExportedModel {
    /// Packs `sign(W_r)` for every main conv and folds its per-filter scale
    /// into the following batch norm. A frozen network has unit scales.
    pub fn from_network(net: &Network) -> Result<Self> {
        let mode = net.spec.weight_mode();
        if mode == WeightMode::Real {
            return Err(Error::Spec(format!("network `{}` is not binarized and cannot be exported", net.spec.name)));
        }
        let layer = |c: &ConvRef| -> Result<ExportedLayer> {
            let w = &net.params[c.param].value;
            let scales = match mode {
                WeightMode::MagnitudeAware => filter_scales(w, net.spec.binarization.scale_norm)?,
                _ => vec![1.0; w.shape()[0]],
            };
            absorb_scale_into_bn(w, &scales, &net.bns[c.bn], c.stride, c.pad)
        };
        let blocks = net
            .blocks
            .iter()
            .map(|b| {
                Ok(ExportedBlock {
                    kind: b.kind,
                    stride: b.stride,
                    layers: b.convs.iter().map(layer).collect::<Result<_>>()?,
                    downsample: b.downsample.map(|d| RealConv::from_network(net, d)),
                })
            })
            .collect::<Result<_>>()?;
        Ok(ExportedModel {
            spec: net.spec.clone(),
            stem: RealConv::from_network(net, net.stem),
            blocks,
            fc_weight: net.params[net.fc_weight].value.clone(),
            fc_bias: net.params[net.fc_bias].value.clone(),
        })
    }

    /// Logits for a batch `[n, c, h, w]`.
    pub fn forward(&self, x: &Tensor<f64>) -> Result<Tensor<f64>> {
        let [_, c, h, w] = x.dims4()?;
        if [c, h, w] != self.spec.input {
            return Err(dim_err!("model expects input {:?}, got {:?}", self.spec.input, [c, h, w]));
        }
        let mut h = self.stem.forward(x)?;
        if let Some((k, s)) = self.spec.stem.pool {
            h = avg_pool2d_forward(&h, k, s)?;
        }
        for b in &self.blocks {
            h = self.block(&h, b)?;
        }
        let pooled = global_avg_pool_forward(&h)?;
        linear_forward(&pooled, &self.fc_weight, &self.fc_bias)
    }

    fn block(&self, x: &Tensor<f64>, b: &ExportedBlock) -> Result<Tensor<f64>> {
        let main = |l: &ExportedLayer, x: &Tensor<f64>| l.forward(&sign_pack(x));
        let shortcut = || -> Result<Tensor<f64>> {
            match &b.downsample {
                None => Ok(x.clone()),
                Some(d) if b.stride > 1 => d.forward(&avg_pool2d_forward(x, 2, b.stride)?),
                Some(d) => d.forward(x),
            }
        };
        let pooled = |t: &Tensor<f64>| if b.stride > 1 { avg_pool2d_forward(t, 2, b.stride) } else { Ok(t.clone()) };
        let out = match b.kind {
            BlockKind::Plain => return main(&b.layers[0], x),
            BlockKind::BiRealShallow => main(&b.layers[0], x)?,
            BlockKind::ResNet2Layer => main(&b.layers[1], &main(&b.layers[0], x)?)?,
            BlockKind::BiRealBottleneck => {
                let a1 = main(&b.layers[0], x)?;
                let a2 = main(&b.layers[1], &a1)?.add(&pooled(&a1)?)?;
                main(&b.layers[2], &a2)?
            }
        };
        out.add(&shortcut()?)
    }
}
