//! Whole-network gradient check against central finite differences.
//!
//! Every sign (activations and weights) is replaced by a smooth surrogate so
//! the loss is differentiable; parameters are sampled away from the
//! surrogate's knots at -1, 0 and 1.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{ForwardConfig, Network, ParamKind};
use crate::netspec::{BlockKind, NetworkSpec, Stage, StemSpec};
use crate::surrogate::SurrogateKind;
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-4;
pub const KNOT_RADIUS: f64 = 1e-3;
/// Denominator floor for the relative error of vanishing gradients.
pub const REL_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradEntry {
    pub tensor: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub entries: Vec<GradEntry>,
    pub max_rel_error: f64,
}

/// Two shallow blocks, the second strided with a downsample shortcut.
pub fn toy_spec() -> NetworkSpec {
    let stem = StemSpec { out_channels: 4, kernel: 3, stride: 1, pad: 1, pool: None };
    let plan = [Stage { channels: 4, layers: 1, stride: 1 }, Stage { channels: 6, layers: 1, stride: 2 }];
    NetworkSpec::from_plan("gradcheck_toy", BlockKind::BiRealShallow, [2, 6, 6], stem, &plan, 3)
        .expect("toy plan is valid")
}

fn near_knot(v: f64) -> bool {
    [-1.0, 0.0, 1.0].iter().any(|k| (v - k).abs() <= KNOT_RADIUS)
}

fn loss(net: &Network, cfg: &ForwardConfig, x: &Tensor<f64>, labels: &[usize]) -> Result<f64> {
    let mut g = Graph::new();
    let trace = net.forward(&mut g, x, cfg)?;
    let l = g.softmax_cross_entropy(trace.logits, labels)?;
    Ok(g.value(l).data()[0])
}

/// Compares analytic and central-difference gradients at `samples`
/// parameters of a freshly initialized `spec`, with batch statistics on.
pub fn gradcheck(spec: &NetworkSpec, kind: SurrogateKind, samples: usize, seed: u64) -> Result<GradcheckReport> {
    let mut net = Network::init(spec, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9c4d);
    for bn in &mut net.bns {
        bn.gamma.iter_mut().for_each(|v| *v = rng.gen_range(0.5..1.5));
        bn.beta.iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5));
    }
    let [c, h, w] = spec.input;
    let n = 4;
    let x = Tensor::from_fn(vec![n, c, h, w], |_| rng.gen_range(-1.0..1.0));
    let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..spec.classes)).collect();
    let cfg = ForwardConfig::smooth(&net, kind).training(true);

    let mut g = Graph::new();
    let trace = net.forward(&mut g, &x, &cfg)?;
    let root = g.softmax_cross_entropy(trace.logits, &labels)?;
    let grads = g.backward(root)?;
    let analytic: Vec<Tensor<f64>> = trace.params.iter().map(|&id| grads.get_or_zeros(id, &g)).collect();

    let kinds = net.param_kinds();
    let mut candidates: Vec<(usize, usize)> = net
        .param_slices()
        .iter()
        .enumerate()
        .flat_map(|(t, s)| {
            let knotted = kinds[t] == ParamKind::MainConv;
            s.iter().enumerate().filter(move |(_, &v)| !(knotted && near_knot(v))).map(move |(i, _)| (t, i))
        })
        .collect();
    if candidates.len() < samples {
        return Err(Error::Config(format!("only {} parameters are away from the knots", candidates.len())));
    }
    candidates.shuffle(&mut rng);

    let mut entries = Vec::with_capacity(samples);
    for &(t, i) in candidates.iter().take(samples) {
        let orig = net.param_slices()[t][i];
        let mut at = |v: f64| -> Result<f64> {
            net.param_slices_mut()[t][i] = v;
            loss(&net, &cfg, &x, &labels)
        };
        let numeric = (at(orig + STEP)? - at(orig - STEP)?) / (2.0 * STEP);
        net.param_slices_mut()[t][i] = orig;
        let a = analytic[t].data()[i];
        let rel_error = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
        entries.push(GradEntry { tensor: t, index: i, analytic: a, numeric, rel_error });
    }
    let max_rel_error = entries.iter().map(|e| e.rel_error).fold(0.0, f64::max);
    Ok(GradcheckReport { entries, max_rel_error })
}
