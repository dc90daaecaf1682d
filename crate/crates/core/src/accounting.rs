//! Static cost analysis of a network spec: memory footprint and bit operations.
//!
//! Memory is 1 bit per binarized weight plus 32 bits per real parameter (stem,
//! head, downsample convs and every batch norm's gamma and beta). Operations
//! are multiply-accumulates for convs and the head, plus one op per element for
//! each shortcut addition. A binary MAC costs one bit operation and a real op
//! costs [`REAL_OP_BITS`] of them. Batch norm and pooling carry no ops.

use std::fmt::{self, Write as _};

use serde::Serialize;

use crate::error::Result;
use crate::netspec::{BlockKind, NetworkSpec};

/// Bit operations charged for one real-valued operation.
pub const REAL_OP_BITS: u64 = 64;

/// Bits stored per real-valued parameter.
pub const REAL_PARAM_BITS: u64 = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv,
    BatchNorm,
    Linear,
    Add,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerCost {
    pub name: String,
    pub kind: LayerKind,
    pub binary: bool,
    pub params: u64,
    /// MACs for convs and the head, element additions for shortcuts.
    pub ops: u64,
    pub memory_bits: u64,
    pub bops: u64,
}

impl LayerCost {
    fn new(name: String, kind: LayerKind, binary: bool, params: u64, ops: u64) -> Self {
        let (bits, weight) = if binary { (1, 1) } else { (REAL_PARAM_BITS, REAL_OP_BITS) };
        LayerCost { name, kind, binary, params, ops, memory_bits: params * bits, bops: ops * weight }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostReport {
    pub network: String,
    pub memory_bits: u64,
    pub bops: u64,
    /// `bops / 64`: the cost in real-op units.
    pub flops_equivalent: f64,
    pub memory_saving_ratio: f64,
    pub speedup_ratio: f64,
    pub rows: Vec<LayerCost>,
}

pub fn conv_macs(kernel: usize, in_channels: usize, out_channels: usize, out_hw: (usize, usize)) -> u64 {
    (kernel * kernel * in_channels * out_channels * out_hw.0 * out_hw.1) as u64
}

/// Per-layer rows in forward order.
pub fn layer_costs(spec: &NetworkSpec) -> Result<Vec<LayerCost>> {
    spec.validate()?;
    let sizes = spec.feature_sizes()?;
    let mut rows = Vec::new();
    let conv = |rows: &mut Vec<LayerCost>, name: String, k, i, o, hw, binary| {
        rows.push(LayerCost::new(format!("{name}.conv"), LayerKind::Conv, binary, (k * k * i * o) as u64, conv_macs(k, i, o, hw)));
        rows.push(LayerCost::new(format!("{name}.bn"), LayerKind::BatchNorm, false, 2 * o as u64, 0));
    };
    let add = |rows: &mut Vec<LayerCost>, name: String, c: usize, hw: (usize, usize)| {
        rows.push(LayerCost::new(name, LayerKind::Add, false, 0, (c * hw.0 * hw.1) as u64));
    };

    let st = &spec.stem;
    let [_, h, w] = spec.input;
    let stem_hw = (
        crate::tensor::conv_out_dim(h, st.kernel, st.stride, st.pad).unwrap_or(0),
        crate::tensor::conv_out_dim(w, st.kernel, st.stride, st.pad).unwrap_or(0),
    );
    conv(&mut rows, "stem".into(), st.kernel, spec.input[0], st.out_channels, stem_hw, false);

    for (bi, (b, win)) in spec.blocks.iter().zip(sizes.windows(2)).enumerate() {
        let (hw_in, hw_out) = (win[0], win[1]);
        for (ci, &(k, i, o, s)) in b.convs().iter().enumerate() {
            // Only the strided conv changes resolution; a bottleneck's reduce
            // layer still runs at the input size.
            let hw = if s == 1 && b.kind == BlockKind::BiRealBottleneck && ci == 0 { hw_in } else { hw_out };
            conv(&mut rows, format!("block{bi}.{}", ci + 1), k, i, o, hw, spec.binary);
        }
        if b.needs_downsample() {
            conv(&mut rows, format!("block{bi}.down"), 1, b.in_channels, b.out_channels, hw_out, false);
        }
        if b.kind == BlockKind::BiRealBottleneck {
            add(&mut rows, format!("block{bi}.inner_add"), b.mid_channels, hw_out);
        }
        if b.kind != BlockKind::Plain {
            add(&mut rows, format!("block{bi}.add"), b.out_channels, hw_out);
        }
    }

    let fin = spec.final_channels();
    rows.push(LayerCost::new(
        "fc".into(),
        LayerKind::Linear,
        false,
        (fin * spec.classes + spec.classes) as u64,
        (fin * spec.classes) as u64,
    ));
    Ok(rows)
}

pub fn count_memory(spec: &NetworkSpec) -> Result<u64> {
    Ok(layer_costs(spec)?.iter().map(|r| r.memory_bits).sum())
}

/// Total bit operations and the speedup over the full-precision counterpart.
pub fn count_bops(spec: &NetworkSpec) -> Result<(u64, f64)> {
    let r = cost_report(spec)?;
    Ok((r.bops, r.speedup_ratio))
}

pub fn cost_report(spec: &NetworkSpec) -> Result<CostReport> {
    let rows = layer_costs(spec)?;
    let fp = layer_costs(&spec.full_precision())?;
    let total = |rows: &[LayerCost], f: fn(&LayerCost) -> u64| rows.iter().map(f).sum::<u64>();
    let memory_bits = total(&rows, |r| r.memory_bits);
    let bops = total(&rows, |r| r.bops);
    Ok(CostReport {
        network: spec.name.clone(),
        memory_bits,
        bops,
        flops_equivalent: bops as f64 / REAL_OP_BITS as f64,
        memory_saving_ratio: total(&fp, |r| r.memory_bits) as f64 / memory_bits as f64,
        speedup_ratio: total(&fp, |r| r.bops) as f64 / bops as f64,
        rows,
    })
}

impl CostReport {
    pub fn memory_mbit(&self) -> f64 {
        self.memory_bits as f64 / 1e6
    }

    /// One JSON object per layer followed by a totals line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.rows {
            out.push_str(&serde_json::to_string(r).expect("row serializes"));
            out.push('\n');
        }
        let totals = serde_json::json!({
            "network": self.network,
            "memory_bits": self.memory_bits,
            "bops": self.bops,
            "flops_equivalent": self.flops_equivalent,
            "memory_saving_ratio": self.memory_saving_ratio,
            "speedup_ratio": self.speedup_ratio,
        });
        out.push_str(&totals.to_string());
        out.push('\n');
        out
    }
}

impl fmt::Display for CostReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = String::new();
        writeln!(s, "{:<22} {:<10} {:>6} {:>12} {:>14} {:>14} {:>16}", "layer", "kind", "binary", "params", "ops", "memory_bits", "bops")?;
        for r in &self.rows {
            let kind = format!("{:?}", r.kind).to_lowercase();
            writeln!(
                s,
                "{:<22} {:<10} {:>6} {:>12} {:>14} {:>14} {:>16}",
                r.name,
                kind,
                if r.binary { "yes" } else { "no" },
                r.params,
                r.ops,
                r.memory_bits,
                r.bops
            )?;
        }
        writeln!(s, "network            {}", self.network)?;
        writeln!(s, "memory             {:.2} Mbit", self.memory_mbit())?;
        writeln!(s, "memory saving      {:.2}x", self.memory_saving_ratio)?;
        writeln!(s, "bops               {:.3e}", self.bops as f64)?;
        writeln!(s, "flops equivalent   {:.3e}", self.flops_equivalent)?;
        write!(s, "speedup            {:.2}x", self.speedup_ratio)?;
        f.write_str(&s)
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::netspec::{reference, BlockSpec, Downsample, StemSpec};

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs()
    }

    fn toy(binary: bool) -> NetworkSpec {
        NetworkSpec {
            name: "toy".into(),
            input: [1, 4, 4],
            stem: StemSpec { out_channels: 2, kernel: 3, stride: 1, pad: 1, pool: None },
            blocks: vec![BlockSpec {
                kind: BlockKind::BiRealShallow,
                in_channels: 2,
                out_channels: 2,
                mid_channels: 0,
                stride: 1,
                downsample: Downsample::None,
            }],
            classes: 3,
            binary,
            binarization: Default::default(),
        }
    }

    #[test]
    fn single_conv_macs() {
        assert_eq!(conv_macs(3, 1, 1, (4, 4)), 9 * 16);
    }

    #[test]
    fn toy_spec_by_hand() {
        // stem 18 weights + bn 4, block conv 36 binary + bn 4, fc 6 + 3.
        let bits = count_memory(&toy(true)).unwrap();
        assert_eq!(bits, 32 * (18 + 4 + 4 + 9) + 36);
        let all_real = count_memory(&toy(false)).unwrap();
        assert_eq!(all_real, 32 * (18 + 4 + 36 + 4 + 9));
        // stem 18*16 MACs, block 36*16 binary MACs, add 32 elements, fc 6.
        let (bops, _) = count_bops(&toy(true)).unwrap();
        assert_eq!(bops, 64 * (18 * 16 + 32 + 6) + 36 * 16);
    }

    #[test]
    fn totals_are_row_sums() {
        let r = cost_report(&reference::mnist(BlockKind::BiRealShallow)).unwrap();
        assert_eq!(r.memory_bits, r.rows.iter().map(|x| x.memory_bits).sum::<u64>());
        assert_eq!(r.bops, r.rows.iter().map(|x| x.bops).sum::<u64>());
        assert_eq!(r.to_jsonl().lines().count(), r.rows.len() + 1);
        assert!(r.to_string().contains("speedup"));
    }

    #[test]
    fn bireal18_table() {
        let r = cost_report(&reference::by_name("bireal18_imagenet").unwrap()).unwrap();
        assert!(rel(r.memory_mbit(), 33.6) < 0.05, "{}", r.memory_mbit());
        assert!(rel(r.memory_saving_ratio, 11.14) < 0.05, "{}", r.memory_saving_ratio);
        assert!(rel(r.bops as f64, 1.04e10) < 0.10, "{}", r.bops);
        assert!(rel(r.speedup_ratio, 11.06) < 0.10, "{}", r.speedup_ratio);
    }

    #[test]
    fn bireal34_memory() {
        let r = cost_report(&reference::by_name("bireal34_imagenet").unwrap()).unwrap();
        assert!(rel(r.memory_mbit(), 43.7) < 0.05, "{}", r.memory_mbit());
        assert!(rel(r.memory_saving_ratio, 15.97) < 0.05, "{}", r.memory_saving_ratio);
    }

    #[test]
    fn full_precision_resnet18() {
        let r = cost_report(&reference::by_name("resnet18_imagenet").unwrap()).unwrap();
        assert!(rel(r.bops as f64, 1.16e11) < 0.10, "{}", r.bops);
        assert!(rel(r.memory_mbit(), 374.1) < 0.05, "{}", r.memory_mbit());
        assert_eq!(r.speedup_ratio, 1.0);
    }

    #[test]
    fn binarizing_keeps_op_counts() {
        let spec = reference::by_name("bireal18_imagenet").unwrap();
        let a = layer_costs(&spec).unwrap();
        let b = layer_costs(&spec.full_precision()).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| x.ops == y.ops && x.params == y.params));
        assert!(a.iter().zip(&b).any(|(x, y)| x.bops < y.bops));
    }

    #[test]
    fn bottleneck_rows() {
        let spec = reference::bottleneck_mnist();
        let rows = layer_costs(&spec).unwrap();
        assert_eq!(rows.iter().filter(|r| r.name.ends_with("inner_add")).count(), spec.blocks.len());
        assert_eq!(rows.iter().filter(|r| r.binary).count(), 3 * spec.blocks.len());
    }

    fn totals_without_shortcuts(spec: &NetworkSpec) -> (u64, u64) {
        let rows = layer_costs(spec).unwrap();
        let keep: Vec<_> = rows.iter().filter(|r| r.kind != LayerKind::Add && !r.name.contains(".down.")).collect();
        (keep.iter().map(|r| r.memory_bits).sum(), keep.iter().map(|r| r.bops).sum())
    }

    #[test]
    fn block_kind_only_changes_shortcut_terms() {
        let shallow = totals_without_shortcuts(&reference::mnist(BlockKind::BiRealShallow));
        for kind in [BlockKind::ResNet2Layer, BlockKind::Plain] {
            assert_eq!(totals_without_shortcuts(&reference::mnist(kind)), shallow, "{kind:?}");
        }
    }

    proptest! {
        #[test]
        fn conv_ops_scale_with_area(h in 1usize..6, w in 1usize..6) {
            let spec = |h: usize, w: usize| reference::desk(BlockKind::BiRealShallow, "p", [1, 8 * h, 8 * w]);
            let small = layer_costs(&spec(h, w)).unwrap();
            let big = layer_costs(&spec(2 * h, w)).unwrap();
            for (a, b) in small.iter().zip(&big) {
                match a.kind {
                    LayerKind::Conv | LayerKind::Add => prop_assert_eq!(2 * a.ops, b.ops, "{}", a.name),
                    _ => prop_assert_eq!(a.ops, b.ops),
                }
            }
        }
    }
}
