//! The training recipe: real-valued pretraining (ReLU, leaky clip, clip),
//! binarized training, the two-step schedule for bottleneck nets, and the
//! final batch-norm retraining with frozen sign weights.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::binarize::{sgd_update, WeightMode};
use crate::data::{Augment, Dataset};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::layers::Activation;
use crate::model::{ForwardConfig, LayerMask, Network, ParamKind};
use crate::netspec::BlockKind;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// What a phase trains and with which non-linearity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseMode {
    Relu,
    LeakyClip,
    Clip,
    /// Sign activations and binarized weights per the layer masks.
    Binary,
    /// Weights frozen to ±1; only batch norm is trained.
    BnRetrain,
}

impl PhaseMode {
    pub fn is_real(self) -> bool {
        matches!(self, PhaseMode::Relu | PhaseMode::LeakyClip | PhaseMode::Clip)
    }
}

/// Which main-path layers a binary phase binarizes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskPattern {
    #[default]
    All,
    /// Bottleneck first step: 1x1 weights and all activations binary, 3x3
    /// weights still real.
    OneByOneWeights,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseConfig {
    pub name: String,
    pub mode: PhaseMode,
    #[serde(default)]
    pub masks: MaskPattern,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Epochs (0-based, within the phase) at which the rate is multiplied by
    /// `decay_factor`.
    #[serde(default)]
    pub decay_epochs: Vec<usize>,
    #[serde(default = "default_decay")]
    pub decay_factor: f64,
    #[serde(default)]
    pub weight_decay: f64,
}

fn default_decay() -> f64 {
    0.1
}

impl PhaseConfig {
    pub fn new(name: &str, mode: PhaseMode, epochs: usize, lr: f64) -> Self {
        PhaseConfig {
            name: name.into(),
            mode,
            masks: MaskPattern::All,
            epochs,
            batch_size: 128,
            lr,
            decay_epochs: Vec::new(),
            decay_factor: 0.1,
            weight_decay: 0.0,
        }
    }

    /// Rate in effect during `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let decays = self.decay_epochs.iter().filter(|&&d| d <= epoch).count();
        self.lr * self.decay_factor.powi(decays as i32)
    }

    fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("phase `{}`: {msg}", self.name)));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate {} must be finite and non-negative", self.lr));
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if !self.mode.is_real() && self.weight_decay != 0.0 {
            return bad("binarized phases train without weight decay".into());
        }
        if self.masks != MaskPattern::All && self.mode != PhaseMode::Binary {
            return bad("layer masks only apply to binary phases".into());
        }
        if self.decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return bad("decay epochs must be strictly increasing".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    /// Maximum random shift in pixels; 0 disables augmentation.
    #[serde(default)]
    pub augment_pad: usize,
    /// Random horizontal flips alongside the shifts.
    #[serde(default)]
    pub augment_flip: bool,
    #[serde(default = "default_eval_batch")]
    pub eval_batch: usize,
    pub phases: Vec<PhaseConfig>,
}

fn default_momentum() -> f64 {
    0.9
}

fn default_eval_batch() -> usize {
    500
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.phases.is_empty() {
            return Err(Error::Config("no training phases".into()));
        }
        if self.eval_batch == 0 {
            return Err(Error::Config("eval batch must be positive".into()));
        }
        for p in &self.phases {
            p.validate()?;
        }
        let mut seen_binary = false;
        for p in &self.phases {
            if p.mode.is_real() && seen_binary {
                return Err(Error::Config(format!("real-valued phase `{}` follows a binarized one", p.name)));
            }
            seen_binary |= !p.mode.is_real();
        }
        Ok(())
    }
}

/// ReLU -> leaky clip -> clip, each warm-starting from the previous. With
/// `skip` only the ReLU phase remains (all of the budget goes to it).
pub fn init_chain(epochs: [usize; 3], lr: f64, weight_decay: f64, skip: bool) -> Vec<PhaseConfig> {
    let mk = |name, mode, e| PhaseConfig { weight_decay, ..PhaseConfig::new(name, mode, e, lr) };
    if skip {
        return vec![mk("relu", PhaseMode::Relu, epochs[0])];
    }
    vec![
        mk("relu", PhaseMode::Relu, epochs[0]),
        mk("leaky_clip", PhaseMode::LeakyClip, epochs[1]),
        mk("clip", PhaseMode::Clip, epochs[2]),
    ]
}

/// Two main binary phases for a bottleneck net, splitting `main`'s epochs
/// equally, followed by the batch-norm retraining phase.
pub fn two_step_schedule(spec: &crate::netspec::NetworkSpec, main: &PhaseConfig) -> Result<Vec<PhaseConfig>> {
    if !spec.blocks.iter().any(|b| b.kind == BlockKind::BiRealBottleneck) {
        return Err(Error::Config(format!("`{}` has no bottleneck blocks; use a single main phase", spec.name)));
    }
    let first = main.epochs.div_ceil(2);
    let split = |name: &str, masks, epochs, offset: usize| PhaseConfig {
        name: name.into(),
        mode: PhaseMode::Binary,
        masks,
        epochs,
        decay_epochs: main.decay_epochs.iter().filter_map(|&d| d.checked_sub(offset)).filter(|&d| d > 0 && d < epochs).collect(),
        lr: main.lr_at(offset),
        ..main.clone()
    };
    Ok(vec![
        split("binary_step1", MaskPattern::OneByOneWeights, first, 0),
        split("binary_step2", MaskPattern::All, main.epochs - first, first),
        bn_retrain_phase(main.lr_at(main.epochs.saturating_sub(1)), main.batch_size),
    ])
}

pub fn bn_retrain_phase(lr: f64, batch_size: usize) -> PhaseConfig {
    PhaseConfig { batch_size, ..PhaseConfig::new("bn_retrain", PhaseMode::BnRetrain, 1, lr) }
}

/// Per-layer masks for a binary phase.
pub fn layer_masks(net: &Network, pattern: MaskPattern) -> Vec<LayerMask> {
    net.blocks
        .iter()
        .flat_map(|b| {
            let bottleneck = b.kind == BlockKind::BiRealBottleneck;
            b.convs.iter().enumerate().map(move |(j, _)| match pattern {
                MaskPattern::OneByOneWeights if bottleneck && j == 1 => {
                    LayerMask { binary_weights: false, binary_acts: true }
                }
                _ => LayerMask::BINARY,
            })
        })
        .collect()
}

/// Forward configuration used while training in `mode`.
pub fn phase_forward(net: &Network, phase: &PhaseConfig) -> ForwardConfig {
    let cfg = match phase.mode {
        PhaseMode::Relu => ForwardConfig::real(net, Activation::Relu),
        PhaseMode::LeakyClip => ForwardConfig::real(net, Activation::leaky_clip()),
        PhaseMode::Clip => ForwardConfig::real(net, Activation::Clip),
        PhaseMode::Binary => ForwardConfig { masks: layer_masks(net, phase.masks), ..ForwardConfig::binary(net) },
        PhaseMode::BnRetrain => ForwardConfig { weight_mode: WeightMode::Sign, ..ForwardConfig::binary(net) },
    };
    cfg.training(true)
}

/// Where a run is, and the optimizer's momentum buffers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseState {
    pub phase: usize,
    /// Next epoch to run within `phase`.
    pub epoch: usize,
    pub step: u64,
    /// One buffer per entry of [`Network::param_kinds`]; empty between phases.
    pub velocity: Vec<Vec<f64>>,
}

impl PhaseState {
    pub fn start() -> Self {
        PhaseState { phase: 0, epoch: 0, step: 0, velocity: Vec::new() }
    }

    pub fn is_done(&self, cfg: &TrainConfig) -> bool {
        self.phase >= cfg.phases.len()
    }
}

/// Shuffle/augmentation stream for one epoch of one phase.
pub fn epoch_rng(seed: u64, phase: usize, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((phase as u64) << 32) | epoch as u64);
    rng
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub top1: f64,
    pub top5: f64,
    pub loss: f64,
    pub count: usize,
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: String,
    pub phase_index: usize,
    pub epoch: usize,
    pub split: String,
    pub lr: f64,
    pub top1: f64,
    pub top5: f64,
    pub loss: f64,
}

impl EpochRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }
}

/// Rank of `label` among `logits`: classes with a larger logit, or an equal
/// logit and a lower index, come first.
fn rank<T: PartialOrd>(logits: &[T], label: usize) -> usize {
    let l = &logits[label];
    logits.iter().enumerate().filter(|(j, v)| *v > l || (*v == l && *j < label)).count()
}

/// Accumulates top-1/top-5 hits and summed loss over batches.
#[derive(Clone, Copy, Debug, Default)]
struct Tally {
    top1: usize,
    top5: usize,
    loss: f64,
    count: usize,
}

impl Tally {
    fn add<T: Scalar>(&mut self, logits: &Tensor<T>, labels: &[usize], mean_loss: f64) -> Result<()> {
        let [n, c] = logits.dims2()?;
        for (row, &label) in logits.data().chunks_exact(c).zip(labels) {
            let r = rank(row, label);
            self.top1 += usize::from(r < 1);
            self.top5 += usize::from(r < 5);
        }
        self.loss += mean_loss * n as f64;
        self.count += n;
        Ok(())
    }

    fn metrics(&self) -> Metrics {
        let n = self.count.max(1) as f64;
        Metrics {
            top1: 100.0 * self.top1 as f64 / n,
            top5: 100.0 * self.top5 as f64 / n,
            loss: self.loss / n,
            count: self.count,
        }
    }
}

/// Top-1/top-5 (percent) and mean cross-entropy with running batch-norm
/// statistics.
pub fn evaluate<T: Scalar>(net: &Network, cfg: &ForwardConfig, data: &Dataset, batch: usize) -> Result<Metrics> {
    if data.is_empty() {
        return Err(Error::Dataset("cannot evaluate on an empty dataset".into()));
    }
    let cfg = ForwardConfig { train: false, ..cfg.clone() };
    let mut tally = Tally::default();
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let (x, labels) = data.batch::<ChaCha8Rng>(chunk, None)?;
        let logits = net.predict(&x.cast::<T>(), &cfg)?;
        let (loss, _) = crate::layers::softmax_cross_entropy(&logits, &labels)?;
        tally.add(&logits, &labels, loss.to_f64())?;
    }
    Ok(tally.metrics())
}

/// Metrics computed from a saved logit dump.
pub fn metrics_from_logits<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<Metrics> {
    let (loss, _) = crate::layers::softmax_cross_entropy(logits, labels)?;
    let mut tally = Tally::default();
    tally.add(logits, labels, loss.to_f64())?;
    Ok(tally.metrics())
}

/// Whether a parameter of this kind is updated during a phase.
fn trains(kind: ParamKind, mode: PhaseMode, frozen: bool) -> bool {
    match (mode, kind) {
        (PhaseMode::BnRetrain, k) => matches!(k, ParamKind::BnGamma | ParamKind::BnBeta),
        (_, ParamKind::MainConv) => !frozen,
        _ => true,
    }
}

/// One SGD step on a batch. Returns the batch's logits and mean loss.
pub fn train_step<T: Scalar>(
    net: &mut Network,
    velocity: &mut [Vec<f64>],
    x: &Tensor<T>,
    labels: &[usize],
    phase: &PhaseConfig,
    fcfg: &ForwardConfig,
    lr: f64,
    momentum: f64,
) -> Result<(Tensor<T>, f64)> {
    let mut g = Graph::<T>::new();
    let trace = net.forward(&mut g, x, fcfg)?;
    let loss = g.softmax_cross_entropy(trace.logits, labels)?;
    let value = g.value(loss).data()[0].to_f64();
    if !value.is_finite() {
        return Err(Error::Training { phase: phase.name.clone(), detail: format!("loss became {value}") });
    }
    let grads = g.backward(loss)?;
    for (bn, &node) in net.bns.iter_mut().zip(&trace.bns) {
        let (m, v) = g.batch_stats(node).expect("training-mode batch norm");
        let m: Vec<f64> = m.iter().map(|&v| v.to_f64()).collect();
        let v: Vec<f64> = v.iter().map(|&v| v.to_f64()).collect();
        bn.update_running(&m, &v);
    }
    let kinds = net.param_kinds();
    let frozen = net.frozen;
    let binary_phase = !phase.mode.is_real();
    for (i, slice) in net.param_slices_mut().into_iter().enumerate() {
        if !trains(kinds[i], phase.mode, frozen) {
            continue;
        }
        let decay = if binary_phase { 0.0 } else { phase.weight_decay };
        assert!(!(binary_phase && kinds[i] == ParamKind::MainConv && decay != 0.0), "binarized layers train without decay");
        let grad: Vec<f64> = match grads.get(trace.params[i]) {
            Some(t) => t.data().iter().map(|&v| v.to_f64()).collect(),
            None => vec![0.0; slice.len()],
        };
        sgd_update(slice, &grad, &mut velocity[i], lr, momentum, decay)?;
    }
    Ok((g.value(trace.logits).clone(), value))
}

/// Receives metric records as they are produced.
pub trait MetricSink {
    fn record(&mut self, rec: &EpochRecord) -> Result<()>;
}

impl MetricSink for Vec<EpochRecord> {
    fn record(&mut self, rec: &EpochRecord) -> Result<()> {
        self.push(rec.clone());
        Ok(())
    }
}

/// Runs one epoch of the current phase and advances `state`.
pub fn train_epoch<T: Scalar>(
    net: &mut Network,
    state: &mut PhaseState,
    cfg: &TrainConfig,
    train: &Dataset,
    test: Option<&Dataset>,
    sink: &mut dyn MetricSink,
) -> Result<()> {
    let phase = cfg.phases.get(state.phase).ok_or_else(|| Error::Config("training already complete".into()))?;
    if train.is_empty() {
        return Err(Error::Dataset("training set is empty".into()));
    }
    if state.velocity.is_empty() {
        state.velocity = net.param_slices().iter().map(|s| vec![0.0; s.len()]).collect();
        if phase.mode == PhaseMode::BnRetrain && !net.frozen {
            net.freeze();
        }
    }
    let fcfg = phase_forward(net, phase);
    let lr = phase.lr_at(state.epoch);
    let mut rng = epoch_rng(cfg.seed, state.phase, state.epoch);
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut rng);
    let mut tally = Tally::default();
    for chunk in order.chunks(phase.batch_size) {
        let augment = (cfg.augment_pad > 0).then_some((&mut rng, Augment { pad: cfg.augment_pad, flip: cfg.augment_flip }));
        let (x, labels) = train.batch(chunk, augment)?;
        let (logits, loss) =
            train_step(net, &mut state.velocity, &x.cast::<T>(), &labels, phase, &fcfg, lr, cfg.momentum)?;
        tally.add(&logits, &labels, loss)?;
        state.step += 1;
    }
    let record = |split: &str, m: Metrics| EpochRecord {
        phase: phase.name.clone(),
        phase_index: state.phase,
        epoch: state.epoch,
        split: split.into(),
        lr,
        top1: m.top1,
        top5: m.top5,
        loss: m.loss,
    };
    sink.record(&record("train", tally.metrics()))?;
    if let Some(test) = test {
        let m = evaluate::<T>(net, &fcfg, test, cfg.eval_batch)?;
        sink.record(&record("test", m))?;
    }
    state.epoch += 1;
    if state.epoch >= phase.epochs {
        state.phase += 1;
        state.epoch = 0;
        state.velocity.clear();
    }
    Ok(())
}

/// Runs every remaining phase from `state` (zero-epoch phases are skipped).
/// `on_epoch` sees the network after each epoch, e.g. to write checkpoints.
pub fn run_phases<T: Scalar>(
    net: &mut Network,
    state: &mut PhaseState,
    cfg: &TrainConfig,
    train: &Dataset,
    test: Option<&Dataset>,
    sink: &mut dyn MetricSink,
    on_epoch: &mut dyn FnMut(&Network, &PhaseState) -> Result<()>,
) -> Result<()> {
    cfg.validate()?;
    while !state.is_done(cfg) {
        if cfg.phases[state.phase].epochs == 0 {
            state.phase += 1;
            state.epoch = 0;
            continue;
        }
        train_epoch::<T>(net, state, cfg, train, test, sink)?;
        on_epoch(net, state)?;
    }
    Ok(())
}

/// Forward configuration for evaluating after the last phase that ran.
pub fn final_forward(net: &Network, cfg: &TrainConfig, state: &PhaseState) -> ForwardConfig {
    let last = state.phase.min(cfg.phases.len()).saturating_sub(1);
    phase_forward(net, &cfg.phases[last]).training(false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netspec::{reference, NetworkSpec, Stage, StemSpec};

    fn toy_spec(kind: BlockKind) -> NetworkSpec {
        let stem = StemSpec { out_channels: 4, kernel: 3, stride: 1, pad: 1, pool: None };
        let plan = [Stage { channels: 4, layers: 2, stride: 1 }, Stage { channels: 8, layers: 2, stride: 2 }];
        NetworkSpec::from_plan("toy", kind, [1, 6, 6], stem, &plan, 3).unwrap()
    }

    /// Three classes told apart by which third of the image is bright.
    fn toy_data(n: usize, seed: u64) -> Dataset {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let label = i % 3;
            for y in 0..6 {
                for _x in 0..6 {
                    let on = y / 2 == label;
                    images.push(if on { 1.5 } else { -0.5 } + rng.gen_range(-0.3..0.3));
                }
            }
            labels.push(label);
        }
        Dataset::from_parts(images, labels, [1, 6, 6], 3).unwrap()
    }

    fn cfg(phases: Vec<PhaseConfig>) -> TrainConfig {
        TrainConfig { seed: 5, momentum: 0.9, augment_pad: 0, augment_flip: false, eval_batch: 64, phases }
    }

    fn small(mut p: PhaseConfig) -> PhaseConfig {
        p.batch_size = 16;
        p
    }

    #[test]
    fn lr_schedule_matches_decay_points() {
        let p = PhaseConfig { decay_epochs: vec![10, 15], ..PhaseConfig::new("main", PhaseMode::Binary, 20, 0.01) };
        let lrs: Vec<f64> = (0..20).map(|e| p.lr_at(e)).collect();
        assert!(lrs[..10].iter().all(|&l| l == 0.01));
        assert!(lrs[10..15].iter().all(|&l| (l - 0.001).abs() < 1e-15));
        assert!(lrs[15..].iter().all(|&l| (l - 0.0001).abs() < 1e-15));
    }

    #[test]
    fn binarized_phases_reject_weight_decay() {
        let p = PhaseConfig { weight_decay: 1e-4, ..PhaseConfig::new("b", PhaseMode::Binary, 1, 0.1) };
        assert!(matches!(cfg(vec![p]).validate(), Err(Error::Config(_))));
        let p = PhaseConfig { weight_decay: 1e-4, ..PhaseConfig::new("r", PhaseMode::Relu, 1, 0.1) };
        assert!(cfg(vec![p]).validate().is_ok());
        assert!(cfg(vec![PhaseConfig::new("n", PhaseMode::Relu, 1, -1.0)]).validate().is_err());
    }

    #[test]
    fn top_k_ties_favor_lower_index() {
        let logits = Tensor::<f64>::new(vec![3, 3], vec![0.0; 9]).unwrap();
        let m = metrics_from_logits(&logits, &[0, 1, 2]).unwrap();
        assert!((m.top1 - 100.0 / 3.0).abs() < 1e-12);
        assert_eq!(m.top5, 100.0);
        let perfect = Tensor::<f64>::from_fn(vec![10, 10], |i| if i / 10 == i % 10 { 5.0 } else { 0.0 });
        let labels: Vec<usize> = (0..10).collect();
        assert_eq!(metrics_from_logits(&perfect, &labels).unwrap().top1, 100.0);
        // label 7 is ranked sixth: five larger logits ahead of it
        let row = Tensor::<f64>::new(vec![1, 8], vec![9.0, 8.0, 7.0, 6.0, 5.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(metrics_from_logits(&row, &[7]).unwrap().top5, 0.0);
        assert_eq!(metrics_from_logits(&row, &[4]).unwrap().top5, 100.0);
    }

    #[test]
    fn evaluate_rejects_empty_data() {
        let net = Network::init(&toy_spec(BlockKind::BiRealShallow), 0).unwrap();
        let empty = Dataset::from_parts(vec![], vec![], [1, 6, 6], 3).unwrap();
        assert!(evaluate::<f64>(&net, &ForwardConfig::binary(&net), &empty, 8).is_err());
    }

    #[test]
    fn zero_lr_leaves_weights_and_logs_metrics() {
        let mut net = Network::init(&toy_spec(BlockKind::BiRealShallow), 1).unwrap();
        let before = net.params.clone();
        let data = toy_data(30, 0);
        let c = cfg(vec![small(PhaseConfig::new("b", PhaseMode::Binary, 2, 0.0))]);
        let mut log = Vec::new();
        run_phases::<f64>(&mut net, &mut PhaseState::start(), &c, &data, Some(&data), &mut log, &mut |_, _| Ok(())).unwrap();
        assert_eq!(net.params, before);
        assert_eq!(log.len(), 4);
        assert_eq!(log.iter().filter(|r| r.split == "test").count(), 2);
    }

    #[test]
    fn zero_epoch_phases_pass_weights_through() {
        let mut net = Network::init(&toy_spec(BlockKind::BiRealShallow), 1).unwrap();
        let before = net.clone();
        let c = cfg(init_chain([0, 0, 0], 0.1, 1e-4, false));
        let mut log = Vec::new();
        run_phases::<f64>(&mut net, &mut PhaseState::start(), &c, &toy_data(9, 0), None, &mut log, &mut |_, _| Ok(()))
            .unwrap();
        assert_eq!(net, before);
        assert!(log.is_empty());
    }

    #[test]
    fn single_step_matches_hand_wired_update() {
        let spec = toy_spec(BlockKind::BiRealShallow);
        let mut net = Network::init(&spec, 2).unwrap();
        let data = toy_data(1, 3);
        let (x, labels) = data.batch::<ChaCha8Rng>(&[0], None).unwrap();
        let x = x.cast::<f64>();
        let phase = PhaseConfig::new("b", PhaseMode::Binary, 1, 0.05);
        let fcfg = phase_forward(&net, &phase);

        // reference: gradients from an independent graph, plain SGD by hand
        let mut g = Graph::<f64>::new();
        let trace = net.forward(&mut g, &x, &fcfg).unwrap();
        let loss = g.softmax_cross_entropy(trace.logits, &labels).unwrap();
        let grads = g.backward(loss).unwrap();
        let want: Vec<Vec<f64>> = net
            .param_slices()
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let gr = grads.get_or_zeros(trace.params[i], &g);
                s.iter().zip(gr.data()).map(|(w, d)| w - 0.05 * d).collect()
            })
            .collect();

        let mut vel: Vec<Vec<f64>> = net.param_slices().iter().map(|s| vec![0.0; s.len()]).collect();
        train_step(&mut net, &mut vel, &x, &labels, &phase, &fcfg, 0.05, 0.9).unwrap();
        for (got, want) in net.param_slices().iter().zip(&want) {
            assert_eq!(*got, &want[..]);
        }
    }

    #[test]
    fn replay_is_deterministic() {
        let spec = toy_spec(BlockKind::BiRealShallow);
        let data = toy_data(40, 1);
        let c = cfg(vec![small(PhaseConfig::new("b", PhaseMode::Binary, 2, 0.05))]);
        let run = || {
            let mut net = Network::init(&spec, 4).unwrap();
            let mut log = Vec::new();
            run_phases::<f32>(&mut net, &mut PhaseState::start(), &c, &data, None, &mut log, &mut |_, _| Ok(())).unwrap();
            (net, log)
        };
        let (a, la) = run();
        let (b, lb) = run();
        assert_eq!(a, b);
        assert_eq!(la, lb);
    }

    #[test]
    fn resuming_reproduces_the_trajectory() {
        let spec = toy_spec(BlockKind::BiRealShallow);
        let data = toy_data(40, 1);
        let c = cfg(vec![
            small(PhaseConfig::new("relu", PhaseMode::Relu, 1, 0.05)),
            small(PhaseConfig::new("b", PhaseMode::Binary, 2, 0.05)),
        ]);
        let mut full = Network::init(&spec, 4).unwrap();
        let mut full_log = Vec::new();
        run_phases::<f64>(&mut full, &mut PhaseState::start(), &c, &data, None, &mut full_log, &mut |_, _| Ok(())).unwrap();

        let mut net = Network::init(&spec, 4).unwrap();
        let mut state = PhaseState::start();
        let mut log = Vec::new();
        train_epoch::<f64>(&mut net, &mut state, &c, &data, None, &mut log).unwrap();
        train_epoch::<f64>(&mut net, &mut state, &c, &data, None, &mut log).unwrap();
        let (mut net2, mut state2) = (net.clone(), state.clone());
        run_phases::<f64>(&mut net2, &mut state2, &c, &data, None, &mut log, &mut |_, _| Ok(())).unwrap();
        assert_eq!(net2, full);
        assert_eq!(log, full_log);
    }

    #[test]
    fn bn_retrain_freezes_weights_and_moves_statistics() {
        let spec = toy_spec(BlockKind::BiRealShallow);
        let data = toy_data(60, 2);
        let mut net = Network::init(&spec, 6).unwrap();
        let c = cfg(vec![
            small(PhaseConfig::new("b", PhaseMode::Binary, 3, 0.05)),
            small(bn_retrain_phase(0.01, 16)),
        ]);
        let mut state = PhaseState::start();
        let mut log = Vec::new();
        for _ in 0..3 {
            train_epoch::<f64>(&mut net, &mut state, &c, &data, None, &mut log).unwrap();
        }
        let bns_before = net.bns.clone();
        let stem_before = net.params[net.stem.param].clone();
        train_epoch::<f64>(&mut net, &mut state, &c, &data, None, &mut log).unwrap();
        assert!(net.frozen);
        for conv in net.main_convs() {
            assert!(net.params[conv.param].value.data().iter().all(|&v| v == 1.0 || v == -1.0));
        }
        assert_ne!(net.bns, bns_before);
        assert_eq!(net.params[net.stem.param], stem_before);
    }

    #[test]
    fn bn_retrain_keeps_accuracy() {
        let spec = toy_spec(BlockKind::BiRealShallow);
        let data = toy_data(90, 3);
        let mut net = Network::init(&spec, 7).unwrap();
        let c = cfg(vec![
            small(PhaseConfig::new("b", PhaseMode::Binary, 4, 0.05)),
            small(bn_retrain_phase(0.001, 16)),
        ]);
        let mut state = PhaseState::start();
        let mut log = Vec::new();
        for _ in 0..4 {
            train_epoch::<f64>(&mut net, &mut state, &c, &data, None, &mut log).unwrap();
        }
        let before = evaluate::<f64>(&net, &ForwardConfig::binary(&net), &data, 64).unwrap();
        train_epoch::<f64>(&mut net, &mut state, &c, &data, None, &mut log).unwrap();
        let after = evaluate::<f64>(&net, &final_forward(&net, &c, &state), &data, 64).unwrap();
        assert!(before.top1 > 90.0, "{before:?}");
        assert!(after.top1 >= before.top1 - 2.0, "{before:?} -> {after:?}");
    }

    #[test]
    fn two_step_masks() {
        let spec = reference::bottleneck_mnist();
        let main = PhaseConfig { decay_epochs: vec![10, 15], ..PhaseConfig::new("main", PhaseMode::Binary, 20, 0.01) };
        let phases = two_step_schedule(&spec, &main).unwrap();
        assert_eq!(phases.len(), 3);
        assert_eq!(phases[0].epochs + phases[1].epochs, 20);
        assert_eq!(phases[2].mode, PhaseMode::BnRetrain);
        let net = Network::init(&spec, 0).unwrap();
        let m1 = layer_masks(&net, phases[0].masks);
        let m2 = layer_masks(&net, phases[1].masks);
        for (b, blk) in net.blocks.iter().enumerate() {
            for j in 0..blk.convs.len() {
                let i = 3 * b + j;
                assert!(m1[i].binary_acts);
                assert_eq!(m1[i].binary_weights, j != 1, "block {b} conv {j}");
                assert_eq!(m2[i], LayerMask::BINARY);
                // each layer's weights become binary in exactly one step
                assert!(m1[i].binary_weights ^ (m2[i].binary_weights && !m1[i].binary_weights));
            }
        }
        // schedule continues where the first step left off
        assert_eq!(phases[1].lr, main.lr_at(10));
        assert_eq!(phases[1].decay_epochs, vec![5]);
        assert!(two_step_schedule(&reference::mnist(BlockKind::BiRealShallow), &main).is_err());
    }

    #[test]
    fn two_step_phase_one_keeps_three_by_three_weights_real() {
        let spec = reference::bottleneck_mnist();
        let mut net = Network::init(&spec, 0).unwrap();
        let (reduce, mid) = (net.blocks[0].convs[0], net.blocks[0].convs[1]);
        // saturated weights: the clipped estimator zeroes their gradient
        net.params[reduce.param].value.data_mut()[0] = 1.5;
        net.params[mid.param].value.data_mut()[0] = 1.5;
        let p = PhaseConfig { masks: MaskPattern::OneByOneWeights, ..PhaseConfig::new("s1", PhaseMode::Binary, 1, 0.1) };
        let f = phase_forward(&net, &p);
        let x = Tensor::<f64>::from_fn(vec![2, 1, 28, 28], |i| ((i * 13) % 7) as f64 - 3.0);
        let mut g = Graph::new();
        let trace = net.forward(&mut g, &x, &f).unwrap();
        let loss = g.softmax_cross_entropy(trace.logits, &[1, 2]).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(trace.params[reduce.param]).unwrap().data()[0], 0.0);
        assert_ne!(grads.get(trace.params[mid.param]).unwrap().data()[0], 0.0);
    }
}
