//! Binary containers for tensors, pyramids and head weights.
//!
//! Every container is an 8-byte magic, a little-endian `u32` length, that
//! many bytes of UTF-8 JSON manifest, then raw little-endian `f32` payload
//! blocks in manifest order. Decoders reject trailing bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{level_dims, FeaturePyramid, HeadWeights};
use crate::tensor::{ConvWeights, DenseTensor};

pub const TENSOR_MAGIC: &[u8; 8] = b"QDTENS1\n";
pub const PYRAMID_MAGIC: &[u8; 8] = b"QDPYR1\n\0";
pub const WEIGHTS_MAGIC: &[u8; 8] = b"QDWTS1\n\0";

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::format(format!(
                "truncated {what}: need {n} bytes, {} left",
                self.remaining()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn magic(&mut self, magic: &[u8; 8], what: &str) -> Result<()> {
        let got = self.take(8, what)?;
        if got != magic {
            return Err(Error::format(format!(
                "bad {what} magic {:?}",
                String::from_utf8_lossy(got)
            )));
        }
        Ok(())
    }

    fn manifest<T: for<'de> Deserialize<'de>>(&mut self, what: &str) -> Result<T> {
        let len = u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")) as usize;
        let raw = self.take(len, what)?;
        serde_json::from_slice(raw).map_err(|e| Error::format(format!("{what} manifest: {e}")))
    }

    fn floats(&mut self, count: usize, what: &str) -> Result<Vec<f32>> {
        let bytes = count
            .checked_mul(4)
            .ok_or_else(|| Error::format(format!("{what} size overflows")))?;
        let raw = self.take(bytes, what)?;
        Ok(raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect())
    }

    fn finish(&self, what: &str) -> Result<()> {
        if self.remaining() != 0 {
            return Err(Error::format(format!(
                "{} trailing bytes after {what}",
                self.remaining()
            )));
        }
        Ok(())
    }
}

fn write_header(out: &mut Vec<u8>, magic: &[u8; 8], manifest: &impl Serialize) {
    let json = serde_json::to_vec(manifest).expect("manifest serializes");
    out.extend_from_slice(magic);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
}

fn write_floats(out: &mut Vec<u8>, values: &[f32]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn checked_volume(dims: &[usize], what: &str) -> Result<usize> {
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::format(format!("{what} shape overflows")))
}

fn tensor_from(shape: [usize; 3], data: Vec<f32>, what: &str) -> Result<DenseTensor> {
    DenseTensor::new(shape[0], shape[1], shape[2], data).map_err(|e| Error::format(format!("{what}: {e}")))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorHeader {
    dtype: String,
    shape: [usize; 3],
}

pub fn encode_tensor(t: &DenseTensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + t.data().len() * 4);
    write_header(
        &mut out,
        TENSOR_MAGIC,
        &TensorHeader {
            dtype: "f32".into(),
            shape: t.shape(),
        },
    );
    write_floats(&mut out, t.data());
    out
}

pub fn decode_tensor(bytes: &[u8]) -> Result<DenseTensor> {
    let mut r = Reader::new(bytes);
    r.magic(TENSOR_MAGIC, "tensor")?;
    let header: TensorHeader = r.manifest("tensor")?;
    if header.dtype != "f32" {
        return Err(Error::format(format!("unsupported dtype {:?}", header.dtype)));
    }
    let n = checked_volume(&header.shape, "tensor")?;
    let data = r.floats(n, "tensor payload")?;
    r.finish("tensor")?;
    tensor_from(header.shape, data, "tensor")
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PyramidManifest {
    image: [usize; 2],
    channels: usize,
    levels: Vec<LevelEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LevelEntry {
    l: u8,
    shape: [usize; 3],
}

pub fn encode_pyramid(p: &FeaturePyramid) -> Vec<u8> {
    let manifest = PyramidManifest {
        image: [p.image_height(), p.image_width()],
        channels: p.channels(),
        levels: p
            .levels()
            .iter()
            .map(|(&l, t)| LevelEntry { l, shape: t.shape() })
            .collect(),
    };
    let mut out = Vec::new();
    write_header(&mut out, PYRAMID_MAGIC, &manifest);
    for t in p.levels().values() {
        write_floats(&mut out, t.data());
    }
    out
}

pub fn decode_pyramid(bytes: &[u8]) -> Result<FeaturePyramid> {
    let mut r = Reader::new(bytes);
    r.magic(PYRAMID_MAGIC, "pyramid")?;
    let m: PyramidManifest = r.manifest("pyramid")?;
    let [ih, iw] = m.image;
    let mut levels = BTreeMap::new();
    for entry in &m.levels {
        let l = entry.l;
        if l > 31 {
            return Err(Error::format(format!("level P{l} out of range")));
        }
        let (h, w) = level_dims(ih, iw, l);
        if entry.shape != [m.channels, h, w] {
            return Err(Error::format(format!(
                "level P{l} shape {:?} disagrees with image {ih}x{iw} and {} channels",
                entry.shape, m.channels
            )));
        }
        let n = checked_volume(&entry.shape, "level")?;
        if n.checked_mul(4).is_none_or(|b| b > r.remaining()) {
            return Err(Error::format(format!("payload for level P{l} missing or truncated")));
        }
        let data = r.floats(n, "level payload")?;
        let t = tensor_from(entry.shape, data, &format!("level P{l}"))?;
        if levels.insert(l, t).is_some() {
            return Err(Error::format(format!("level P{l} listed twice")));
        }
    }
    r.finish("pyramid")?;
    FeaturePyramid::new(ih, iw, m.channels, levels).map_err(|e| Error::format(e.to_string()))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WeightsManifest {
    channels: usize,
    num_anchors: usize,
    num_classes: usize,
    convs: Vec<ConvEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConvEntry {
    role: String,
    shape: [usize; 4],
}

pub fn encode_weights(w: &HeadWeights) -> Vec<u8> {
    let convs = w.convs();
    let manifest = WeightsManifest {
        channels: w.channels(),
        num_anchors: w.num_anchors(),
        num_classes: w.num_classes(),
        convs: convs
            .iter()
            .map(|(role, c)| ConvEntry {
                role: role.clone(),
                shape: [c.out_channels(), c.in_channels(), c.kernel(), c.kernel()],
            })
            .collect(),
    };
    let mut out = Vec::new();
    write_header(&mut out, WEIGHTS_MAGIC, &manifest);
    for (_, c) in &convs {
        write_floats(&mut out, c.weights());
        write_floats(&mut out, c.bias());
    }
    out
}

pub fn decode_weights(bytes: &[u8]) -> Result<HeadWeights> {
    let mut r = Reader::new(bytes);
    r.magic(WEIGHTS_MAGIC, "weights")?;
    let m: WeightsManifest = r.manifest("weights")?;
    let roles = HeadWeights::role_names();
    if m.convs.len() != roles.len() {
        return Err(Error::format(format!(
            "weights list {} convolutions, expected {}",
            m.convs.len(),
            roles.len()
        )));
    }
    let mut convs = Vec::with_capacity(roles.len());
    for (entry, role) in m.convs.iter().zip(&roles) {
        if &entry.role != role {
            return Err(Error::format(format!("expected conv {role}, found {}", entry.role)));
        }
        let [o, i, kh, kw] = entry.shape;
        if kh != kw {
            return Err(Error::format(format!("{role} kernel {kh}x{kw} is not square")));
        }
        let n = checked_volume(&entry.shape, role)?;
        let weights = r.floats(n, role)?;
        let bias = r.floats(o, role)?;
        let conv = ConvWeights::new(o, i, kh, weights, bias).map_err(|e| Error::format(format!("{role}: {e}")))?;
        if !conv.is_finite() {
            return Err(Error::format(format!("{role} has non-finite values")));
        }
        convs.push(conv);
    }
    r.finish("weights")?;
    HeadWeights::from_convs(m.channels, m.num_anchors, m.num_classes, convs).map_err(|e| Error::format(e.to_string()))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn save_tensor(t: &DenseTensor, path: &Path) -> Result<()> {
    write_file(path, &encode_tensor(t))
}

pub fn load_tensor(path: &Path) -> Result<DenseTensor> {
    decode_tensor(&read_file(path)?)
}

pub fn save_pyramid(p: &FeaturePyramid, path: &Path) -> Result<()> {
    write_file(path, &encode_pyramid(p))
}

pub fn load_pyramid(path: &Path) -> Result<FeaturePyramid> {
    decode_pyramid(&read_file(path)?)
}

pub fn save_weights(w: &HeadWeights, path: &Path) -> Result<()> {
    write_file(path, &encode_weights(w))
}

pub fn load_weights(path: &Path) -> Result<HeadWeights> {
    decode_weights(&read_file(path)?)
}
