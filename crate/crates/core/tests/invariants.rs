//! Property tests over the public API.

use bireal_core::accounting::{cost_report, layer_costs};
use bireal_core::binarize::{
    absorb_scale_into_bn, binarize_weights, filter_scales, BinarizeOptions, LatentWeight, ScaleNorm, WeightMode,
};
use bireal_core::bits::{binary_conv2d, sign_pack, unpack, xnor_popcount_dot, BitTensor};
use bireal_core::capacity::{capacity_per_entry, CapacityCount};
use bireal_core::format::Checkpoint;
use bireal_core::graph::Graph;
use bireal_core::layers::{Activation, BatchNormState};
use bireal_core::model::Network;
use bireal_core::netspec::{reference, BlockKind, NetworkSpec, Stage, StemSpec};
use bireal_core::surrogate::{sign, SurrogateKind};
use bireal_core::tensor::real_conv2d;
use bireal_core::train::{PhaseConfig, PhaseMode, PhaseState};
use bireal_core::Tensor;
use proptest::prelude::*;

fn kind() -> impl Strategy<Value = SurrogateKind> {
    prop_oneof![Just(SurrogateKind::ClipSte), Just(SurrogateKind::ApproxSign2), Just(SurrogateKind::ApproxSign3)]
}

fn pm_tensor(shape: Vec<usize>, bits: &[bool]) -> Tensor<f64> {
    Tensor::from_fn(shape, |i| if bits[i] { 1.0 } else { -1.0 })
}

/// `(input shape, kernel shape, stride, pad)` with a non-empty output.
fn conv_case() -> impl Strategy<Value = ([usize; 4], [usize; 4], usize, usize)> {
    (1usize..3, 1usize..10, 1usize..7, 1usize..7, 1usize..4, 1usize..4, 1usize..3, 0usize..2).prop_filter_map(
        "empty output",
        |(n, c, h, w, o, k, s, p)| (h + 2 * p >= k && w + 2 * p >= k).then_some(([n, c, h, w], [o, c, k, k], s, p)),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn xnor_dot_is_the_signed_dot_product(pairs in proptest::collection::vec(any::<(bool, bool)>(), 1..300)) {
        let (a, w): (Vec<bool>, Vec<bool>) = pairs.into_iter().unzip();
        let (ba, bw) = (BitTensor::from_bools(vec![a.len()], &a).unwrap(), BitTensor::from_bools(vec![w.len()], &w).unwrap());
        let expected: f64 = unpack::<f64>(&ba).data().iter().zip(unpack::<f64>(&bw).data()).map(|(x, y)| x * y).sum();
        prop_assert_eq!(xnor_popcount_dot(&ba, &bw).unwrap(), expected as i64);
    }

    #[test]
    fn pack_of_unpack_is_identity_and_canonical(bits in proptest::collection::vec(any::<bool>(), 0..200)) {
        let b = BitTensor::from_bools(vec![bits.len()], &bits).unwrap();
        prop_assert!(b.is_canonical());
        prop_assert_eq!(b.words().len(), bits.len().div_ceil(64));
        prop_assert_eq!(sign_pack(&unpack::<f64>(&b)), b);
    }

    #[test]
    fn unpack_of_pack_is_sign(xs in proptest::collection::vec(prop_oneof![Just(0.0), -2.0..2.0f64], 1..100)) {
        let t = Tensor::new(vec![xs.len()], xs.clone()).unwrap();
        let back = unpack::<f64>(&sign_pack(&t));
        for (x, y) in xs.iter().zip(back.data()) {
            prop_assert_eq!(*y, sign(*x));
        }
    }

    #[test]
    fn binary_conv_matches_real_conv_with_parity(
        (xs, ws, stride, pad) in conv_case(),
        seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let xb: Vec<bool> = (0..xs.iter().product::<usize>()).map(|_| rng.gen()).collect();
        let wb: Vec<bool> = (0..ws.iter().product::<usize>()).map(|_| rng.gen()).collect();
        let (x, w) = (pm_tensor(xs.to_vec(), &xb), pm_tensor(ws.to_vec(), &wb));
        let y = binary_conv2d(&sign_pack(&x), &sign_pack(&w), stride, pad).unwrap();
        prop_assert_eq!(y.to_real::<f64>(), real_conv2d(&x, &w, stride, pad).unwrap());
        // contributing taps per entry: the same conv over all-ones operands
        let taps = real_conv2d(&x.map(|_| 1.0), &w.map(|_| 1.0), stride, pad).unwrap();
        for (&v, &n) in y.data().iter().zip(taps.data()) {
            let n = n as i32;
            prop_assert!(v.abs() <= n && (v - n) % 2 == 0, "value {} with {} taps", v, n);
        }
    }

    #[test]
    fn sign_activation_forward_is_exact_sign(k in kind(), xs in proptest::collection::vec(prop_oneof![Just(0.0), -3.0..3.0f64], 1..64)) {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::new(vec![xs.len()], xs.clone()).unwrap());
        let y = g.activation(x, Activation::Sign(k));
        for (a, b) in xs.iter().zip(g.value(y).data()) {
            prop_assert_eq!(*b, sign(*a));
        }
    }

    #[test]
    fn surrogate_slopes_are_nonnegative_and_local(k in kind(), x in -3.0..3.0f64) {
        let d = k.derivative(x);
        prop_assert!(d >= 0.0);
        if !(-1.0..1.0).contains(&x) {
            prop_assert_eq!(d, 0.0);
        }
    }

    #[test]
    fn backward_is_deterministic(k in kind(), xs in proptest::collection::vec(-2.0..2.0f64, 8)) {
        let run = || {
            let mut g = Graph::<f64>::new();
            let x = g.leaf(Tensor::new(vec![2, 1, 2, 2], xs.clone()).unwrap());
            let s = g.activation(x, Activation::Sign(k));
            let w = g.leaf(Tensor::new(vec![1, 1, 1, 1], vec![0.7]).unwrap());
            let y = g.conv2d(s, w, 1, 0).unwrap();
            let z = g.add(y, x).unwrap();
            let grads = g.backward_with(z, Tensor::full(vec![2, 1, 2, 2], 1.0)).unwrap();
            grads.get_or_zeros(x, &g)
        };
        prop_assert_eq!(run(), run());
    }

    /// With an identity shortcut on the real input, inputs sharing a sign
    /// pattern stay distinguishable; a shortcut taken after the sign merges them.
    #[test]
    fn real_shortcut_keeps_inputs_apart(w in -2.0..2.0f64, a in 0.01..1.0f64, b in 0.01..1.0f64) {
        prop_assume!((a - b).abs() > 1e-3);
        let kernel = Tensor::new(vec![1, 1, 1, 1], vec![w]).unwrap();
        let x1 = Tensor::new(vec![1, 1, 1, 1], vec![a]).unwrap();
        let x2 = Tensor::new(vec![1, 1, 1, 1], vec![b]).unwrap();
        let real_shortcut = |x: &Tensor<f64>| real_conv2d(&x.map(sign), &kernel, 1, 0).unwrap().add(x).unwrap();
        let sign_shortcut = |x: &Tensor<f64>| {
            let s = x.map(sign);
            real_conv2d(&s, &kernel, 1, 0).unwrap().add(&s).unwrap()
        };
        prop_assert_eq!(x1.map(sign), x2.map(sign));
        prop_assert_ne!(real_shortcut(&x1), real_shortcut(&x2));
        prop_assert_eq!(sign_shortcut(&x1), sign_shortcut(&x2));
    }

    #[test]
    fn magnitude_aware_keeps_signs_and_l1(
        (o, n) in (1usize..6, 1usize..20),
        seed in any::<u64>(),
        alpha in 0.01..100.0f64,
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let w = Tensor::from_fn(vec![o, n, 1, 1], |_| rng.gen_range(-1.5..1.5f64));
        let (wb, s) = binarize_weights(&w, WeightMode::MagnitudeAware, &BinarizeOptions::default()).unwrap();
        let (wb2, _) = binarize_weights(&w.scale(alpha), WeightMode::MagnitudeAware, &BinarizeOptions::default()).unwrap();
        for f in 0..o {
            let r = f * n..(f + 1) * n;
            let l1 = |t: &Tensor<f64>| t.data()[r.clone()].iter().map(|v| v.abs()).sum::<f64>();
            prop_assert!((l1(&wb) - l1(&w)).abs() <= 1e-12 * l1(&w).max(1.0));
            prop_assert!((s[f] - l1(&w) / n as f64).abs() <= 1e-12);
        }
        for ((a, b), c) in w.data().iter().zip(wb.data()).zip(wb2.data()) {
            prop_assert_eq!(sign(*a), sign(*b));
            prop_assert_eq!(sign(*a), sign(*c));
        }
    }

    #[test]
    fn latent_scales_never_go_stale(seed in any::<u64>(), steps in 1usize..5) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut draw = || Tensor::from_fn(vec![3, 2, 3, 3], |_| rng.gen_range(-1.0..1.0f64));
        let mut lw = LatentWeight::new(draw(), ScaleNorm::Mean).unwrap();
        for _ in 0..steps {
            lw.set(draw()).unwrap();
            let fresh = filter_scales(lw.weights(), ScaleNorm::Mean).unwrap();
            prop_assert_eq!(lw.scales(), fresh.as_slice());
        }
        lw.freeze();
        prop_assert!(lw.weights().data().iter().all(|&v| v == 1.0 || v == -1.0));
    }

    #[test]
    fn folded_layer_matches_scaled_conv_and_bn(
        (xs, ws, stride, pad) in conv_case(),
        seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::from_fn(xs.to_vec(), |_| rng.gen_range(-1.0..1.0f64));
        let w = Tensor::from_fn(ws.to_vec(), |_| rng.gen_range(-1.0..1.0f64));
        let o = ws[0];
        let mut bn = BatchNormState::new(o);
        for c in 0..o {
            bn.gamma[c] = rng.gen_range(0.5..1.5);
            bn.beta[c] = rng.gen_range(-0.5..0.5);
            bn.running_mean[c] = rng.gen_range(-0.3..0.3);
            bn.running_var[c] = rng.gen_range(0.1..2.0);
        }
        let (wb, s) = binarize_weights(&w, WeightMode::MagnitudeAware, &BinarizeOptions::default()).unwrap();
        let y = real_conv2d(&x.map(sign), &wb, stride, pad).unwrap();
        let hw = y.shape()[2] * y.shape()[3];
        let reference = Tensor::from_fn(y.shape().to_vec(), |i| {
            let c = (i / hw) % o;
            bn.gamma[c] * (y.data()[i] - bn.running_mean[c]) / (bn.running_var[c] + bn.eps).sqrt() + bn.beta[c]
        });
        let exported = absorb_scale_into_bn(&w, &s, &bn, stride, pad).unwrap();
        let z = exported.forward(&sign_pack(&x)).unwrap();
        prop_assert!(z.max_abs_diff(&reference).unwrap() <= 1e-9 * reference.max_abs().max(1.0));
    }

    #[test]
    fn absorbing_unit_scales_is_identity(o in 1usize..5, seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let w = Tensor::from_fn(vec![o, 2, 3, 3], |_| if rng.gen::<bool>() { 1.0 } else { -1.0 });
        let mut bn = BatchNormState::new(o);
        bn.running_mean.iter_mut().for_each(|m| *m = rng.gen_range(-1.0..1.0));
        let l = absorb_scale_into_bn(&w, &vec![1.0; o], &bn, 1, 1).unwrap();
        prop_assert_eq!(&l.mean, &bn.running_mean);
        for c in 0..o {
            prop_assert_eq!(l.std[c], (bn.running_var[c] + bn.eps).sqrt());
        }
        prop_assert_eq!(unpack::<f64>(&l.weights), w);
    }

    #[test]
    fn block_kinds_share_weight_counts(c1 in 1usize..5, c2 in 1usize..5, l1 in 1usize..3, l2 in 1usize..3) {
        let stem = StemSpec { out_channels: 4, kernel: 3, stride: 1, pad: 1, pool: None };
        let plan = [Stage { channels: 2 * c1, layers: 2 * l1, stride: 1 }, Stage { channels: 2 * c2, layers: 2 * l2, stride: 2 }];
        let shallow = NetworkSpec::from_plan("p", BlockKind::BiRealShallow, [1, 8, 8], stem, &plan, 3).unwrap();
        let counts: Vec<usize> = [BlockKind::BiRealShallow, BlockKind::ResNet2Layer, BlockKind::Plain]
            .into_iter()
            .map(|k| shallow.with_kind(k).unwrap().main_path_weight_count())
            .collect();
        prop_assert!(counts.windows(2).all(|p| p[0] == p[1]), "{:?}", counts);
        for b in &shallow.with_kind(BlockKind::Plain).unwrap().blocks {
            prop_assert!(!b.needs_downsample());
        }
    }

    #[test]
    fn report_totals_are_row_sums(width in 1usize..4, kind in prop_oneof![Just(BlockKind::BiRealShallow), Just(BlockKind::ResNet2Layer), Just(BlockKind::Plain)]) {
        let spec = reference::mnist(kind).widened(width).unwrap();
        let r = cost_report(&spec).unwrap();
        prop_assert_eq!(r.memory_bits, r.rows.iter().map(|x| x.memory_bits).sum::<u64>());
        prop_assert_eq!(r.bops, r.rows.iter().map(|x| x.bops).sum::<u64>());
        let binary_ops: Vec<u64> = layer_costs(&spec).unwrap().iter().map(|x| x.ops).collect();
        let real_ops: Vec<u64> = layer_costs(&spec.full_precision()).unwrap().iter().map(|x| x.ops).collect();
        prop_assert_eq!(binary_ops, real_ops);
    }

    #[test]
    fn capacity_is_kernel_size_plus_one(kh in 1usize..8, kw in 1usize..8, c in 1usize..600) {
        let n = capacity_per_entry(kh, kw, c);
        prop_assert_eq!(n.value(), Some((kh * kw * c) as u128 + 1));
        prop_assert!(n.log2() >= 0.0);
        let entries = 1000u64;
        prop_assert!((n.map_log2(entries) - entries as f64 * n.log2()).abs() < 1e-6 * n.map_log2(entries).max(1.0));
        prop_assert!(n.product(&CapacityCount::one()) == n);
    }

    #[test]
    fn lr_schedule_follows_decay_points(lr in 1e-4..1.0f64, d1 in 1usize..10, gap in 1usize..10) {
        let phase = PhaseConfig { decay_epochs: vec![d1, d1 + gap], ..PhaseConfig::new("binary", PhaseMode::Binary, 30, lr) };
        for e in 0..30 {
            let k = (e >= d1) as i32 + (e >= d1 + gap) as i32;
            prop_assert_eq!(phase.lr_at(e), lr * 0.1f64.powi(k));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn checkpoint_round_trip_is_bit_exact(seed in any::<u64>(), frozen in any::<bool>(), step in any::<u64>()) {
        let spec = reference::mnist(BlockKind::BiRealShallow);
        let mut network = Network::init(&spec, seed).unwrap();
        if frozen {
            network.freeze();
        }
        let ck = Checkpoint { network, state: PhaseState { phase: 1, epoch: 2, step, velocity: Vec::new() }, seed };
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes, Some(&spec)).unwrap();
        prop_assert_eq!(back.to_bytes(), bytes);
        prop_assert_eq!(back, ck);
    }
}
