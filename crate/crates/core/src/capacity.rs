//! Counting how many distinct values an activation entry can take.
//!
//! A binary dot product over `n` inputs takes the `n + 1` values `-n, -n+2,
//! .., n`. Batch norm is a bijection and keeps a count. Adding two entries
//! multiplies their counts; a sign collapses any count back to 2. Counts
//! explode quickly, so they are kept as factor lists
//! `base^exponent` alongside their base-2 logarithm.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::netspec::{BlockKind, BlockSpec, NetworkSpec};

/// A per-entry value count, `Π base^exponent`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CapacityCount {
    factors: BTreeMap<u64, u64>,
}

impl CapacityCount {
    /// A single-valued entry.
    pub fn one() -> Self {
        CapacityCount { factors: BTreeMap::new() }
    }

    pub fn from_base(base: u64) -> Self {
        CapacityCount::one().times_pow(base, 1)
    }

    /// The two values of a sign output.
    pub fn binary() -> Self {
        CapacityCount::from_base(2)
    }

    fn times_pow(mut self, base: u64, exp: u64) -> Self {
        if base > 1 && exp > 0 {
            *self.factors.entry(base).or_default() += exp;
        }
        self
    }

    /// Count of the sum of two independent entries.
    pub fn product(&self, other: &CapacityCount) -> Self {
        other.factors.iter().fold(self.clone(), |acc, (&b, &e)| acc.times_pow(b, e))
    }

    /// Count of a sum of `k` independent entries that each have this count.
    pub fn pow(&self, k: u64) -> Self {
        CapacityCount { factors: self.factors.iter().map(|(&b, &e)| (b, e * k)).filter(|_| k > 0).collect() }
    }

    /// `(base, exponent)` pairs in increasing base order.
    pub fn factors(&self) -> Vec<(u64, u64)> {
        self.factors.iter().map(|(&b, &e)| (b, e)).collect()
    }

    pub fn log2(&self) -> f64 {
        self.factors.iter().map(|(&b, &e)| e as f64 * (b as f64).log2()).sum()
    }

    /// `log2` of the count for a whole map of `entries` independent entries.
    pub fn map_log2(&self, entries: u64) -> f64 {
        entries as f64 * self.log2()
    }

    /// The count as an integer, when it fits.
    pub fn value(&self) -> Option<u128> {
        self.factors.iter().try_fold(1u128, |acc, (&b, &e)| {
            let e = u32::try_from(e).ok()?;
            acc.checked_mul((b as u128).checked_pow(e)?)
        })
    }
}

impl fmt::Display for CapacityCount {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.factors.is_empty() {
            return write!(f, "1");
        }
        let parts: Vec<String> = self
            .factors
            .iter()
            .map(|(b, e)| if *e == 1 { b.to_string() } else { format!("{b}^{e}") })
            .collect();
        write!(f, "{}", parts.join(" x "))
    }
}

/// Distinct outputs of one binary conv entry: `kh * kw * c + 1`.
pub fn capacity_per_entry(kernel_h: usize, kernel_w: usize, in_channels: usize) -> CapacityCount {
    CapacityCount::from_base((kernel_h * kernel_w * in_channels) as u64 + 1)
}

/// Count carried by a downsample shortcut: a sum over a 2x2 window (when
/// strided) followed by a real 1x1 conv summing over every input channel.
fn downsample_capacity(block: &BlockSpec, upstream: &CapacityCount) -> CapacityCount {
    let window = if block.stride > 1 { 4 } else { 1 };
    upstream.pow(window * block.in_channels as u64)
}

fn shortcut_capacity(block: &BlockSpec, upstream: &CapacityCount) -> CapacityCount {
    if block.needs_downsample() {
        downsample_capacity(block, upstream)
    } else {
        upstream.clone()
    }
}

/// Per-entry count at the 3x3 layer's output of a bottleneck block, after the
/// inner shortcut adds the reduce layer's output back in.
pub fn bottleneck_inner_capacity(block: &BlockSpec) -> CapacityCount {
    let reduce = capacity_per_entry(1, 1, block.in_channels);
    capacity_per_entry(3, 3, block.mid_channels).product(&reduce)
}

/// Per-entry count at a block's output given the count of its real input.
pub fn capacity_block(block: &BlockSpec, upstream: &CapacityCount) -> CapacityCount {
    let (k, c) = match block.kind {
        BlockKind::BiRealBottleneck => (1, block.mid_channels),
        // Inputs to the last conv are signs, so only its fan-in matters.
        _ => (3, block.convs().last().map_or(block.in_channels, |&(_, i, _, _)| i)),
    };
    let main = capacity_per_entry(k, k, c);
    match block.kind {
        BlockKind::Plain => main,
        _ => main.product(&shortcut_capacity(block, upstream)),
    }
}

/// Per-entry counts after each block, starting from `stem` at the stem output.
pub fn capacity_network(spec: &NetworkSpec, stem: &CapacityCount) -> Vec<CapacityCount> {
    spec.blocks
        .iter()
        .scan(stem.clone(), |cur, b| {
            *cur = capacity_block(b, cur);
            Some(cur.clone())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use super::*;
    use crate::netspec::Downsample;

    /// Distinct values of Σ a_i w_i over every pair of ±1 vectors of length n.
    fn brute_force(n: usize) -> usize {
        let pm = |bits: u32, i: usize| if bits >> i & 1 == 1 { 1i32 } else { -1 };
        let mut seen = BTreeSet::new();
        for a in 0..1u32 << n {
            for w in 0..1u32 << n {
                seen.insert((0..n).map(|i| pm(a, i) * pm(w, i)).sum::<i32>());
            }
        }
        seen.len()
    }

    #[test]
    fn stated_per_entry_counts() {
        assert_eq!(capacity_per_entry(3, 3, 32).value(), Some(289));
        assert_eq!(capacity_per_entry(1, 1, 64).value(), Some(65));
        assert_eq!(capacity_per_entry(3, 3, 64).value(), Some(577));
        assert_eq!(capacity_per_entry(1, 1, 256).value(), Some(257));
    }

    #[test]
    fn small_kernels_match_enumeration() {
        for (kh, kw, c) in [(1, 1, 1), (2, 1, 1), (1, 1, 3), (2, 2, 1), (1, 1, 5), (3, 2, 1), (3, 3, 1), (2, 2, 2), (1, 1, 11), (3, 2, 2), (2, 2, 3)] {
            let n = kh * kw * c;
            assert!(n <= 12);
            assert_eq!(capacity_per_entry(kh, kw, c).value(), Some(brute_force(n) as u128), "{kh}x{kw}x{c}");
        }
    }

    #[test]
    fn shallow_block_squares_the_count() {
        let block = BlockSpec {
            kind: BlockKind::BiRealShallow,
            in_channels: 32,
            out_channels: 32,
            mid_channels: 0,
            stride: 1,
            downsample: Downsample::None,
        };
        let up = capacity_per_entry(3, 3, 32);
        let out = capacity_block(&block, &up);
        assert_eq!(out.factors(), vec![(289, 2)]);
        let expected = 6272.0 * 2.0 * 289f64.log2();
        assert!((out.map_log2(14 * 14 * 32) - expected).abs() < 1e-9);
        assert_eq!(out.to_string(), "289^2");
    }

    #[test]
    fn plain_and_resnet_counts() {
        let mut block = BlockSpec {
            kind: BlockKind::Plain,
            in_channels: 32,
            out_channels: 32,
            mid_channels: 0,
            stride: 1,
            downsample: Downsample::None,
        };
        let up = CapacityCount::from_base(1000);
        assert_eq!(capacity_block(&block, &up).value(), Some(289));
        block.kind = BlockKind::ResNet2Layer;
        assert_eq!(capacity_block(&block, &up).value(), Some(289_000));
    }

    #[test]
    fn bottleneck_paths() {
        let block = BlockSpec {
            kind: BlockKind::BiRealBottleneck,
            in_channels: 256,
            out_channels: 256,
            mid_channels: 64,
            stride: 1,
            downsample: Downsample::None,
        };
        assert_eq!(bottleneck_inner_capacity(&block).value(), Some(257 * 577));
        let up = capacity_per_entry(1, 1, 64);
        assert_eq!(capacity_block(&block, &up).factors(), vec![(65, 2)]);
    }

    #[test]
    fn sign_resets_and_huge_counts_stay_finite() {
        let big = CapacityCount::from_base(289).pow(1 << 40);
        assert_eq!(big.value(), None);
        assert!(big.log2().is_finite());
        assert_eq!(CapacityCount::binary().value(), Some(2));
        assert_eq!(CapacityCount::one().product(&CapacityCount::one()).value(), Some(1));
    }

    #[test]
    fn network_counts_grow_with_depth() {
        let spec = crate::netspec::reference::mnist(BlockKind::BiRealShallow);
        let counts = capacity_network(&spec, &CapacityCount::binary());
        assert_eq!(counts.len(), spec.blocks.len());
        assert!(counts.windows(2).all(|w| w[1].log2() > w[0].log2()));
        let plain = crate::netspec::reference::mnist(BlockKind::Plain);
        let last = capacity_network(&plain, &CapacityCount::binary()).pop().unwrap();
        assert_eq!(last.value(), Some(577));
    }
}
