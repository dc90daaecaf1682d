//! Sign-packed binary tensors and the XNOR-popcount kernels.
//!
//! Encoding: bit 1 is +1, bit 0 is -1. Elements are packed row-major into
//! 64-bit words, least significant bit first. Slack bits past the last element
//! are always zero, so two tensors are logically equal iff their words are.
//!
//! For two canonical vectors of length `n` the slack bits agree, so
//! `popcount(XNOR)` over the logical range equals `n - popcount(a ^ w)` and the
//! dot product `2 * popcount(XNOR) - n` becomes `n - 2 * popcount(a ^ w)`.
//! No masking is needed at the use site.

use crate::error::{dim_err, Result};
use crate::scalar::Scalar;
use crate::tensor::{conv_geometry, numel, Tensor};

pub const WORD_BITS: usize = 64;

#[inline]
fn words_for(bits: usize) -> usize {
    bits.div_ceil(WORD_BITS)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BitTensor {
    shape: Vec<usize>,
    words: Vec<u64>,
}

impl BitTensor {
    /// Builds a tensor from raw words, rejecting non-canonical input.
    pub fn from_words(shape: impl Into<Vec<usize>>, words: Vec<u64>) -> Result<Self> {
        let shape = shape.into();
        let len = numel(&shape);
        if words.len() != words_for(len) {
            return Err(dim_err!(
                "{} elements need {} words, got {}",
                len,
                words_for(len),
                words.len()
            ));
        }
        let t = BitTensor { shape, words };
        if !t.is_canonical() {
            return Err(crate::Error::Format("non-zero slack bits in packed tensor".into()));
        }
        Ok(t)
    }

    pub fn from_bools(shape: impl Into<Vec<usize>>, bits: &[bool]) -> Result<Self> {
        let shape = shape.into();
        if numel(&shape) != bits.len() {
            return Err(dim_err!("shape {:?} does not hold {} bits", shape, bits.len()));
        }
        let mut words = vec![0u64; words_for(bits.len())];
        for (i, _) in bits.iter().enumerate().filter(|(_, &b)| b) {
            words[i / WORD_BITS] |= 1 << (i % WORD_BITS);
        }
        Ok(BitTensor { shape, words })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn len(&self) -> usize {
        numel(&self.shape)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn get(&self, i: usize) -> bool {
        (self.words[i / WORD_BITS] >> (i % WORD_BITS)) & 1 == 1
    }

    pub fn is_canonical(&self) -> bool {
        let len = self.len();
        let rem = len % WORD_BITS;
        rem == 0 || self.words.last().map_or(true, |&w| w >> rem == 0)
    }

    pub fn count_ones(&self) -> u64 {
        self.words.iter().map(|w| w.count_ones() as u64).sum()
    }
}

/// Integer accumulator outputs of a binary convolution.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IntTensor {
    shape: Vec<usize>,
    data: Vec<i32>,
}

impl IntTensor {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[i32] {
        &self.data
    }

    pub fn to_real<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_fn(self.shape.clone(), |i| T::from_f64(self.data[i] as f64))
    }
}

/// Packs the signs of `x`; zero maps to +1.
pub fn sign_pack<T: Scalar>(x: &Tensor<T>) -> BitTensor {
    let data = x.data();
    let mut words = vec![0u64; words_for(data.len())];
    for (wi, chunk) in data.chunks(WORD_BITS).enumerate() {
        let mut word = 0u64;
        for (bi, &v) in chunk.iter().enumerate() {
            word |= ((v >= T::zero()) as u64) << bi;
        }
        words[wi] = word;
    }
    BitTensor { shape: x.shape().to_vec(), words }
}

pub fn unpack<T: Scalar>(b: &BitTensor) -> Tensor<T> {
    Tensor::from_fn(b.shape.clone(), |i| if b.get(i) { T::one() } else { -T::one() })
}

/// Dot product of two ±1 vectors: `2 * popcount(XNOR(a, w)) - n`.
pub fn xnor_popcount_dot(a: &BitTensor, w: &BitTensor) -> Result<i64> {
    if a.shape.len() != 1 || w.shape.len() != 1 {
        return Err(dim_err!("xnor dot expects 1-D operands, got {:?} and {:?}", a.shape, w.shape));
    }
    if a.len() != w.len() {
        return Err(dim_err!("xnor dot length mismatch: {} vs {}", a.len(), w.len()));
    }
    let diff: u64 = a.words.iter().zip(&w.words).map(|(x, y)| (x ^ y).count_ones() as u64).sum();
    Ok(a.len() as i64 - 2 * diff as i64)
}

/// Re-packs an NCHW bit tensor so each spatial position holds its channel
/// vector in `cw` consecutive words (channels-last, canonical per position).
fn pack_channels_last(t: &BitTensor) -> (Vec<u64>, usize) {
    let [n, c, h, w] = match t.shape.as_slice() {
        &[n, c, h, w] => [n, c, h, w],
        _ => unreachable!("caller validated rank"),
    };
    let cw = words_for(c);
    let mut out = vec![0u64; n * h * w * cw];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * h * w;
            for p in 0..h * w {
                if t.get(base + p) {
                    out[((b * h * w) + p) * cw + ch / WORD_BITS] |= 1 << (ch % WORD_BITS);
                }
            }
        }
    }
    (out, cw)
}

/// Binary convolution via XNOR-popcount.
///
/// Out-of-bounds taps are skipped, so each output equals the zero-padded real
/// convolution of the unpacked ±1 tensors exactly.
pub fn binary_conv2d(
    input: &BitTensor,
    weight: &BitTensor,
    stride: usize,
    pad: usize,
) -> Result<IntTensor> {
    let [n, o, ho, wo] = conv_geometry(&input.shape, &weight.shape, stride, pad)?;
    let (c, h, w) = (input.shape[1], input.shape[2], input.shape[3]);
    let (kh, kw) = (weight.shape[2], weight.shape[3]);

    let (xs, cw) = pack_channels_last(input);
    // weights as [o][ky][kx][cw]
    let (ks, _) = pack_channels_last(weight);

    // valid-tap count per output position, times channel count
    let mut valid = vec![0i32; ho * wo];
    for oy in 0..ho {
        for ox in 0..wo {
            let mut taps = 0;
            for ky in 0..kh {
                let iy = (oy * stride + ky) as isize - pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if ix >= 0 && ix < w as isize {
                        taps += 1;
                    }
                }
            }
            valid[oy * wo + ox] = taps * c as i32;
        }
    }

    let mut data = vec![0i32; n * o * ho * wo];
    for b in 0..n {
        for oc in 0..o {
            let kbase = oc * kh * kw * cw;
            let out = &mut data[(b * o + oc) * ho * wo..(b * o + oc + 1) * ho * wo];
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut mismatches = 0u32;
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let xo = ((b * h + iy as usize) * w + ix as usize) * cw;
                            let ko = kbase + (ky * kw + kx) * cw;
                            for j in 0..cw {
                                mismatches += (xs[xo + j] ^ ks[ko + j]).count_ones();
                            }
                        }
                    }
                    let p = oy * wo + ox;
                    out[p] = valid[p] - 2 * mismatches as i32;
                }
            }
        }
    }
    Ok(IntTensor { shape: vec![n, o, ho, wo], data })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{real_conv2d, RealTensor};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(v: &[f64]) -> RealTensor {
        RealTensor::new(vec![v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn sign_of_zero_is_positive() {
        let b = sign_pack(&t(&[-0.3, 0.5, 0.0]));
        assert_eq!((b.get(0), b.get(1), b.get(2)), (false, true, true));
        assert_eq!(b.words(), &[0b110]);
    }

    #[test]
    fn all_negative_packs_to_zero_words() {
        let b = sign_pack(&RealTensor::full(vec![130], -1.5));
        assert_eq!(b.words().len(), 3);
        assert!(b.words().iter().all(|&w| w == 0));
    }

    #[test]
    fn all_positive_keeps_slack_zero() {
        let b = sign_pack(&RealTensor::full(vec![70], 2.0));
        assert_eq!(b.words(), &[u64::MAX, 0b111111]);
        assert!(b.is_canonical());
    }

    #[test]
    fn random_values_pack_elementwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = RealTensor::from_fn(vec![1000], |_| rng.gen_range(-1.0..1.0));
        let b = sign_pack(&x);
        for (i, &v) in x.data().iter().enumerate() {
            assert_eq!(b.get(i), v >= 0.0);
        }
    }

    #[test]
    fn unpack_known_bits_and_empty() {
        let b = BitTensor::from_bools(vec![3], &[false, true, true]).unwrap();
        assert_eq!(unpack::<f64>(&b).data(), &[-1.0, 1.0, 1.0]);
        let e = BitTensor::from_bools(vec![0], &[]).unwrap();
        assert!(unpack::<f64>(&e).is_empty());
    }

    #[test]
    fn non_canonical_words_rejected() {
        assert!(BitTensor::from_words(vec![3], vec![0b1000]).is_err());
        assert!(BitTensor::from_words(vec![3], vec![0b101]).is_ok());
        assert!(BitTensor::from_words(vec![65], vec![0]).is_err());
    }

    #[test]
    fn xnor_dot_examples() {
        let a = sign_pack(&t(&[1.0; 9]));
        assert_eq!(xnor_popcount_dot(&a, &a).unwrap(), 9);
        let a = sign_pack(&t(&[1.0, -1.0, 1.0]));
        let w = sign_pack(&t(&[-1.0, -1.0, 1.0]));
        assert_eq!(xnor_popcount_dot(&a, &w).unwrap(), 1);
        let short = sign_pack(&t(&[1.0, 1.0]));
        assert!(matches!(xnor_popcount_dot(&a, &short), Err(crate::Error::Dimension(_))));
    }

    fn ones(shape: Vec<usize>) -> BitTensor {
        sign_pack(&RealTensor::full(shape, 1.0))
    }

    #[test]
    fn all_ones_3x3_conv() {
        let y = binary_conv2d(&ones(vec![1, 1, 3, 3]), &ones(vec![1, 1, 3, 3]), 1, 0).unwrap();
        assert_eq!(y.data(), &[9]);
        let y = binary_conv2d(&ones(vec![1, 1, 3, 3]), &ones(vec![1, 1, 3, 3]), 1, 1).unwrap();
        assert_eq!(y.data(), &[4, 6, 4, 6, 9, 6, 4, 6, 4]);
    }

    #[test]
    fn conv_32_channels_matches_oracle_and_parity() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = RealTensor::from_fn(vec![2, 32, 14, 14], |_| rng.gen_range(-1.0..1.0));
        let k = RealTensor::from_fn(vec![32, 32, 3, 3], |_| rng.gen_range(-1.0..1.0));
        let (xb, kb) = (sign_pack(&x), sign_pack(&k));
        let y = binary_conv2d(&xb, &kb, 1, 1).unwrap();
        let want = real_conv2d(&unpack::<f64>(&xb), &unpack::<f64>(&kb), 1, 1).unwrap();
        assert_eq!(y.to_real::<f64>(), want);
        // interior entries see all 288 taps: even values in [-288, 288]
        let [_, _, ho, wo] = [2, 32, 14, 14];
        for (i, &v) in y.data().iter().enumerate() {
            let (oy, ox) = ((i / wo) % ho, i % wo);
            if (1..ho - 1).contains(&oy) && (1..wo - 1).contains(&ox) {
                assert!(v.abs() <= 288 && v % 2 == 0, "entry {v}");
            }
        }
    }

    proptest! {
        #[test]
        fn pack_unpack_round_trip(bits in proptest::collection::vec(any::<bool>(), 0..300)) {
            let b = BitTensor::from_bools(vec![bits.len()], &bits).unwrap();
            prop_assert_eq!(sign_pack(&unpack::<f64>(&b)), b);
        }

        #[test]
        fn unpack_of_pack_is_sign(v in proptest::collection::vec(-5.0f64..5.0, 0..200)) {
            let x = t(&v);
            let back = unpack::<f64>(&sign_pack(&x));
            for (a, b) in v.iter().zip(back.data()) {
                prop_assert_eq!(*b, if *a >= 0.0 { 1.0 } else { -1.0 });
            }
        }

        #[test]
        fn conv_entries_respect_parity_and_range(
            seed in any::<u64>(), c in 1usize..5, hw in 3usize..7, stride in 1usize..3, pad in 0usize..2,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = RealTensor::from_fn(vec![1, c, hw, hw], |_| rng.gen_range(-1.0..1.0));
            let k = RealTensor::from_fn(vec![2, c, 3, 3], |_| rng.gen_range(-1.0..1.0));
            let y = binary_conv2d(&sign_pack(&x), &sign_pack(&k), stride, pad).unwrap();
            let ones = RealTensor::full(vec![1, c, hw, hw], 1.0);
            let counts = real_conv2d(&ones, &RealTensor::full(vec![2, c, 3, 3], 1.0), stride, pad).unwrap();
            for (&v, &n) in y.data().iter().zip(counts.data()) {
                let n = n as i32;
                prop_assert!(v.abs() <= n && (v - n) % 2 == 0);
            }
        }
    }
}
