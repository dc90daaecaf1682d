//! Binary file formats: training checkpoints (`BRNC`) and exported models
//! (`BRNX`).
//!
//! Both are little-endian and fixed-width: a 4-byte magic, a `u16` version,
//! the SHA-256 digest of the network spec, the spec itself as JSON (so a file
//! can be loaded on its own), the payload, and a trailing CRC32 over every
//! preceding byte. Tensor shapes are not stored; they follow from the spec and
//! every array carries its length, which is checked on load.

use std::fs;
use std::path::Path;

use crate::bits::{BitTensor, WORD_BITS};
use crate::binarize::ExportedLayer;
use crate::error::{Error, Result};
use crate::export::{ExportedBlock, ExportedModel, RealConv};
use crate::layers::BatchNormState;
use crate::model::Network;
use crate::netspec::NetworkSpec;
use crate::tensor::Tensor;
use crate::train::PhaseState;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"BRNC";
pub const EXPORT_MAGIC: &[u8; 4] = b"BRNX";
pub const VERSION: u16 = 1;

const FLAG_FROZEN: u8 = 1;

/// Everything needed to resume training bit-exactly. Shuffling streams are
/// derived from `seed` and the position in `state`, so they need no storage.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub network: Network,
    pub state: PhaseState,
    pub seed: u64,
}

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u16(&mut self, v: u16) {
        self.bytes(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }

    fn len(&mut self, n: usize) {
        self.u64(n as u64);
    }

    fn f64s(&mut self, v: &[f64]) {
        self.len(v.len());
        v.iter().for_each(|&x| self.f64(x));
    }

    fn u64s(&mut self, v: &[u64]) {
        self.len(v.len());
        v.iter().for_each(|&x| self.u64(x));
    }

    fn header(&mut self, magic: &[u8; 4], spec: &NetworkSpec) {
        self.bytes(magic);
        self.u16(VERSION);
        self.bytes(&spec.digest());
        let json = serde_json::to_vec(spec).expect("spec serializes");
        self.len(json.len());
        self.bytes(&json);
    }

    fn finish(mut self) -> Vec<u8> {
        let crc = crc32fast::hash(&self.buf);
        self.bytes(&crc.to_le_bytes());
        self.buf
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

fn truncated() -> Error {
    Error::Format("file is truncated".into())
}

impl<'a> Reader<'a> {
    /// Checks the trailing CRC and returns a reader over the body.
    fn new(file: &'a [u8]) -> Result<Self> {
        let split = file.len().checked_sub(4).ok_or_else(truncated)?;
        let (body, tail) = file.split_at(split);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(Error::Crc { stored, computed });
        }
        Ok(Reader { buf: body, pos: 0 })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(truncated)?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("exact length"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    /// A length prefix, bounded by the bytes left so a corrupt value cannot
    /// trigger a huge allocation.
    fn len(&mut self, elem: usize) -> Result<usize> {
        let n = usize::try_from(self.u64()?).map_err(|_| truncated())?;
        if n.checked_mul(elem).is_none_or(|b| b > self.buf.len() - self.pos) {
            return Err(truncated());
        }
        Ok(n)
    }

    fn f64s(&mut self, expected: Option<usize>, what: &str) -> Result<Vec<f64>> {
        let n = self.len(8)?;
        if let Some(e) = expected.filter(|&e| e != n) {
            return Err(Error::Format(format!("{what}: expected {e} values, found {n}")));
        }
        (0..n).map(|_| self.f64()).collect()
    }

    fn u64s(&mut self, expected: usize, what: &str) -> Result<Vec<u64>> {
        let n = self.len(8)?;
        if n != expected {
            return Err(Error::Format(format!("{what}: expected {expected} words, found {n}")));
        }
        (0..n).map(|_| self.u64()).collect()
    }

    fn header(&mut self, magic: &[u8; 4], expected: Option<&NetworkSpec>) -> Result<NetworkSpec> {
        let found: [u8; 4] = self.array()?;
        if &found != magic {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&found),
                String::from_utf8_lossy(magic)
            )));
        }
        let version = u16::from_le_bytes(self.array()?);
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let digest: [u8; 32] = self.array()?;
        let n = self.len(1)?;
        let spec: NetworkSpec =
            serde_json::from_slice(self.take(n)?).map_err(|e| Error::Format(format!("embedded spec: {e}")))?;
        if spec.digest() != digest {
            return Err(Error::Format("embedded spec does not match its digest".into()));
        }
        if expected.is_some_and(|e| e.digest() != digest) {
            return Err(Error::DigestMismatch);
        }
        spec.validate()?;
        Ok(spec)
    }

    fn end(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

fn write_bn(w: &mut Writer, bn: &BatchNormState) {
    for v in [&bn.gamma, &bn.beta, &bn.running_mean, &bn.running_var] {
        w.f64s(v);
    }
    w.f64(bn.momentum);
    w.f64(bn.eps);
}

fn read_bn(r: &mut Reader, channels: usize) -> Result<BatchNormState> {
    let mut v = (0..4).map(|_| r.f64s(Some(channels), "batch norm")).collect::<Result<Vec<_>>>()?;
    let running_var = v.pop().expect("4");
    let running_mean = v.pop().expect("3");
    let beta = v.pop().expect("2");
    let gamma = v.pop().expect("1");
    Ok(BatchNormState { gamma, beta, running_mean, running_var, momentum: r.f64()?, eps: r.f64()? })
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let net = &self.network;
        let mut w = Writer::default();
        w.header(CHECKPOINT_MAGIC, &net.spec);
        w.u8(if net.frozen { FLAG_FROZEN } else { 0 });
        w.u64(self.seed);
        w.u64(self.state.phase as u64);
        w.u64(self.state.epoch as u64);
        w.u64(self.state.step);
        for p in &net.params {
            w.f64s(p.value.data());
        }
        for bn in &net.bns {
            write_bn(&mut w, bn);
        }
        w.len(self.state.velocity.len());
        for v in &self.state.velocity {
            w.f64s(v);
        }
        w.finish()
    }

    /// Parses a checkpoint; with `expected`, refuses files written for a
    /// different spec.
    pub fn from_bytes(bytes: &[u8], expected: Option<&NetworkSpec>) -> Result<Self> {
        let mut r = Reader::new(bytes)?;
        let spec = r.header(CHECKPOINT_MAGIC, expected)?;
        // the skeleton fixes every shape; its values are overwritten below
        let mut network = Network::init(&spec, 0)?;
        let flags = r.u8()?;
        if flags & !FLAG_FROZEN != 0 {
            return Err(Error::Format(format!("unknown flags {flags:#04x}")));
        }
        network.frozen = flags & FLAG_FROZEN != 0;
        let seed = r.u64()?;
        let usize_of = |v: u64| usize::try_from(v).map_err(|_| Error::Format("position out of range".into()));
        let (phase, epoch, step) = (usize_of(r.u64()?)?, usize_of(r.u64()?)?, r.u64()?);
        for p in &mut network.params {
            let data = r.f64s(Some(p.value.len()), &p.name)?;
            p.value.data_mut().copy_from_slice(&data);
        }
        for bn in &mut network.bns {
            *bn = read_bn(&mut r, bn.channels())?;
        }
        let lens: Vec<usize> = network.param_slices().iter().map(|s| s.len()).collect();
        let buffers = r.len(8)?;
        if buffers != 0 && buffers != lens.len() {
            return Err(Error::Format(format!("{buffers} optimizer buffers for {} tensors", lens.len())));
        }
        let velocity = lens.iter().take(buffers).map(|&n| r.f64s(Some(n), "optimizer buffer")).collect::<Result<_>>()?;
        r.end()?;
        Ok(Checkpoint { network, state: PhaseState { phase, epoch, step, velocity }, seed })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(fs::write(path, self.to_bytes())?)
    }

    pub fn load(path: &Path, expected: Option<&NetworkSpec>) -> Result<Self> {
        Self::from_bytes(&read(path)?, expected)
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::Format(format!("cannot read {}: {e}", path.display())))
}

fn write_real(w: &mut Writer, c: &RealConv) {
    w.f64s(c.weight.data());
    for v in [&c.mean, &c.std, &c.gamma, &c.beta] {
        w.f64s(v);
    }
}

fn read_real(r: &mut Reader, shape: [usize; 4], stride: usize, pad: usize) -> Result<RealConv> {
    let n = shape.iter().product();
    let weight = Tensor::new(shape.to_vec(), r.f64s(Some(n), "real conv")?)?;
    let mut v = (0..4).map(|_| r.f64s(Some(shape[0]), "folded batch norm")).collect::<Result<Vec<_>>>()?;
    let (beta, gamma, std, mean) = (v.pop().expect("4"), v.pop().expect("3"), v.pop().expect("2"), v.pop().expect("1"));
    Ok(RealConv { weight, stride, pad, mean, std, gamma, beta })
}

impl ExportedModel {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.header(EXPORT_MAGIC, &self.spec);
        write_real(&mut w, &self.stem);
        for b in &self.blocks {
            for l in &b.layers {
                w.u64s(l.weights.words());
                for v in [&l.mean, &l.std, &l.gamma, &l.beta] {
                    w.f64s(v);
                }
            }
            if let Some(d) = &b.downsample {
                write_real(&mut w, d);
            }
        }
        w.f64s(self.fc_weight.data());
        w.f64s(self.fc_bias.data());
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8], expected: Option<&NetworkSpec>) -> Result<Self> {
        let mut r = Reader::new(bytes)?;
        let spec = r.header(EXPORT_MAGIC, expected)?;
        let st = &spec.stem;
        let stem = read_real(&mut r, [st.out_channels, spec.input[0], st.kernel, st.kernel], st.stride, st.pad)?;
        let mut blocks = Vec::with_capacity(spec.blocks.len());
        for b in &spec.blocks {
            let mut layers = Vec::new();
            for (k, i, o, s) in b.convs() {
                let shape = vec![o, i, k, k];
                let words = r.u64s((o * i * k * k).div_ceil(WORD_BITS), "packed weights")?;
                let weights = BitTensor::from_words(shape, words)?;
                let mut v = (0..4).map(|_| r.f64s(Some(o), "folded batch norm")).collect::<Result<Vec<_>>>()?;
                let (beta, gamma, std, mean) = (v.pop().expect("4"), v.pop().expect("3"), v.pop().expect("2"), v.pop().expect("1"));
                layers.push(ExportedLayer { weights, stride: s, pad: k / 2, mean, std, gamma, beta });
            }
            let downsample = if b.needs_downsample() {
                Some(read_real(&mut r, [b.out_channels, b.in_channels, 1, 1], 1, 0)?)
            } else {
                None
            };
            blocks.push(ExportedBlock { kind: b.kind, stride: b.stride, layers, downsample });
        }
        let fin = spec.final_channels();
        let fc_weight = Tensor::new(vec![spec.classes, fin], r.f64s(Some(spec.classes * fin), "fc weight")?)?;
        let fc_bias = Tensor::new(vec![spec.classes], r.f64s(Some(spec.classes), "fc bias")?)?;
        r.end()?;
        Ok(ExportedModel { spec, stem, blocks, fc_weight, fc_bias })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(fs::write(path, self.to_bytes())?)
    }

    pub fn load(path: &Path, expected: Option<&NetworkSpec>) -> Result<Self> {
        Self::from_bytes(&read(path)?, expected)
    }
}
