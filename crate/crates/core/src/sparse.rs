//! Sparse spatial features and submanifold 3×3 convolution.
//!
//! A [`KeySet`] names the active grid positions of one pyramid level. Values
//! live only at those positions; a [`Rulebook`] lists, for every active output,
//! which active neighbors feed which kernel tap. Inactive neighbors contribute
//! nothing, and outputs are produced only at active positions, so the active
//! set is the same at every layer of a tower.

use rayon::prelude::*;
use serde::de::{self, Deserializer, SeqAccess, Visitor};
use serde::ser::{SerializeTuple, Serializer};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ConvWeights, DenseTensor};

/// A grid coordinate. Orders by row, then column.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct GridPos {
    pub y: u32,
    pub x: u32,
}

impl GridPos {
    pub fn new(x: u32, y: u32) -> Self {
        Self { y, x }
    }
}

impl Serialize for GridPos {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut t = s.serialize_tuple(2)?;
        t.serialize_element(&self.x)?;
        t.serialize_element(&self.y)?;
        t.end()
    }
}

impl<'de> Deserialize<'de> for GridPos {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct PairVisitor;
        impl<'de> Visitor<'de> for PairVisitor {
            type Value = GridPos;
            fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
                f.write_str("an [x, y] pair")
            }
            fn visit_seq<A: SeqAccess<'de>>(self, mut seq: A) -> std::result::Result<GridPos, A::Error> {
                let x = seq.next_element()?.ok_or_else(|| de::Error::invalid_length(0, &self))?;
                let y = seq.next_element()?.ok_or_else(|| de::Error::invalid_length(1, &self))?;
                if seq.next_element::<de::IgnoredAny>()?.is_some() {
                    return Err(de::Error::invalid_length(3, &self));
                }
                Ok(GridPos::new(x, y))
            }
        }
        d.deserialize_tuple(2, PairVisitor)
    }
}

/// Active positions on one level, deduplicated and in canonical row-major order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KeySet {
    level: u8,
    height: usize,
    width: usize,
    positions: Vec<GridPos>,
}

impl KeySet {
    /// Sorts and deduplicates `positions`; fails if any lies outside `height × width`.
    pub fn new(level: u8, height: usize, width: usize, positions: impl IntoIterator<Item = GridPos>) -> Result<Self> {
        let mut positions: Vec<GridPos> = positions.into_iter().collect();
        if let Some(p) = positions
            .iter()
            .find(|p| p.x as usize >= width || p.y as usize >= height)
        {
            return Err(Error::validation(format!(
                "key ({}, {}) outside {height}x{width} level P{level}",
                p.x, p.y
            )));
        }
        positions.sort_unstable();
        positions.dedup();
        Ok(Self {
            level,
            height,
            width,
            positions,
        })
    }

    pub fn empty(level: u8, height: usize, width: usize) -> Self {
        Self {
            level,
            height,
            width,
            positions: Vec::new(),
        }
    }

    /// Every position of the level.
    pub fn full(level: u8, height: usize, width: usize) -> Self {
        let positions = (0..height as u32)
            .flat_map(|y| (0..width as u32).map(move |x| GridPos::new(x, y)))
            .collect();
        Self {
            level,
            height,
            width,
            positions,
        }
    }

    pub fn level(&self) -> u8 {
        self.level
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn positions(&self) -> &[GridPos] {
        &self.positions
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn contains(&self, p: GridPos) -> bool {
        self.positions.binary_search(&p).is_ok()
    }

    pub fn index_of(&self, p: GridPos) -> Option<usize> {
        self.positions.binary_search(&p).ok()
    }

    pub fn is_subset_of(&self, other: &KeySet) -> bool {
        self.positions.iter().all(|&p| other.contains(p))
    }

    pub fn covers_level(&self) -> bool {
        self.positions.len() == self.height * self.width
    }

    fn fingerprint(&self) -> u64 {
        // FNV-1a over dims and positions.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |v: u64| {
            for b in v.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        feed(self.level as u64);
        feed(self.height as u64);
        feed(self.width as u64);
        for p in &self.positions {
            feed(((p.y as u64) << 32) | p.x as u64);
        }
        h
    }
}

/// Per-key feature rows over a [`KeySet`].
#[derive(Clone, Debug, PartialEq)]
pub struct SparseFeature {
    keys: KeySet,
    channels: usize,
    data: Vec<f32>,
}

impl SparseFeature {
    pub fn new(keys: KeySet, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != keys.len() * channels {
            return Err(Error::validation(format!(
                "{} keys x {channels} channels needs {} values, got {}",
                keys.len(),
                keys.len() * channels,
                data.len()
            )));
        }
        Ok(Self { keys, channels, data })
    }

    pub fn keys(&self) -> &KeySet {
        &self.keys
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn rows(&self) -> usize {
        self.keys.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.channels..(i + 1) * self.channels]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.channels..(i + 1) * self.channels]
    }

    /// Row for position `p`, if active.
    pub fn row_at(&self, p: GridPos) -> Option<&[f32]> {
        self.keys.index_of(p).map(|i| self.row(i))
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> SparseFeature {
        SparseFeature {
            keys: self.keys.clone(),
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Kernel tap index `(dy + 1) * 3 + (dx + 1)` for `dy, dx ∈ {-1, 0, 1}`.
pub const CENTER_OFFSET: u8 = 4;

pub fn offset_delta(offset: u8) -> (i64, i64) {
    ((offset / 3) as i64 - 1, (offset % 3) as i64 - 1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RuleEntry {
    pub output: u32,
    pub input: u32,
    pub offset: u8,
}

/// Neighbor lists for submanifold convolution, grouped by output key with
/// ascending kernel offsets.
#[derive(Clone, Debug, PartialEq)]
pub struct Rulebook {
    num_keys: usize,
    fingerprint: u64,
    entries: Vec<RuleEntry>,
    starts: Vec<usize>,
}

impl Rulebook {
    pub fn entries(&self) -> &[RuleEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_keys(&self) -> usize {
        self.num_keys
    }

    pub fn for_output(&self, o: usize) -> &[RuleEntry] {
        &self.entries[self.starts[o]..self.starts[o + 1]]
    }

    /// Whether this rulebook was built from exactly `keys`.
    pub fn matches(&self, keys: &KeySet) -> bool {
        self.num_keys == keys.len() && self.fingerprint == keys.fingerprint()
    }
}

pub fn build_rulebook(keys: &KeySet) -> Rulebook {
    let (h, w) = (keys.height as i64, keys.width as i64);
    let mut grid = vec![u32::MAX; keys.height * keys.width];
    for (i, p) in keys.positions.iter().enumerate() {
        grid[p.y as usize * keys.width + p.x as usize] = i as u32;
    }
    let mut entries = Vec::with_capacity(keys.len() * 3);
    let mut starts = Vec::with_capacity(keys.len() + 1);
    for (o, p) in keys.positions.iter().enumerate() {
        starts.push(entries.len());
        for offset in 0..9u8 {
            let (dy, dx) = offset_delta(offset);
            let (ny, nx) = (p.y as i64 + dy, p.x as i64 + dx);
            if ny < 0 || ny >= h || nx < 0 || nx >= w {
                continue;
            }
            let input = grid[(ny * w + nx) as usize];
            if input != u32::MAX {
                entries.push(RuleEntry {
                    output: o as u32,
                    input,
                    offset,
                });
            }
        }
    }
    starts.push(entries.len());
    Rulebook {
        num_keys: keys.len(),
        fingerprint: keys.fingerprint(),
        entries,
        starts,
    }
}

/// Reads the `C`-vector of `dense` at each key.
pub fn gather(dense: &DenseTensor, keys: &KeySet) -> Result<SparseFeature> {
    if let Some(p) = keys
        .positions
        .iter()
        .find(|p| p.x as usize >= dense.width() || p.y as usize >= dense.height())
    {
        return Err(Error::validation(format!(
            "gather key ({}, {}) outside {}x{} tensor",
            p.x,
            p.y,
            dense.height(),
            dense.width()
        )));
    }
    let c = dense.channels();
    let mut data = Vec::with_capacity(keys.len() * c);
    for p in &keys.positions {
        for ch in 0..c {
            data.push(dense.get(ch, p.y as usize, p.x as usize));
        }
    }
    SparseFeature::new(keys.clone(), c, data)
}

/// Places rows at their keys in an otherwise zero tensor.
pub fn scatter(sparse: &SparseFeature, height: usize, width: usize) -> Result<DenseTensor> {
    if let Some(p) = sparse
        .keys
        .positions
        .iter()
        .find(|p| p.x as usize >= width || p.y as usize >= height)
    {
        return Err(Error::validation(format!(
            "scatter key ({}, {}) outside {height}x{width}",
            p.x, p.y
        )));
    }
    let mut out = DenseTensor::zeros(sparse.channels, height, width);
    for (i, p) in sparse.keys.positions.iter().enumerate() {
        for (ch, &v) in sparse.row(i).iter().enumerate() {
            out.set(ch, p.y as usize, p.x as usize, v);
        }
    }
    Ok(out)
}

/// Submanifold convolution over the rulebook built from `input`'s keys.
///
/// Each output row starts from the bias and accumulates kernel offsets in
/// ascending order, input channels within each offset.
pub fn sparse_conv(input: &SparseFeature, w: &ConvWeights, rb: &Rulebook) -> Result<SparseFeature> {
    sparse_conv_inner(input, w, rb, true)
}

pub(crate) fn sparse_conv_inner(
    input: &SparseFeature,
    w: &ConvWeights,
    rb: &Rulebook,
    with_bias: bool,
) -> Result<SparseFeature> {
    if input.channels != w.in_channels() {
        return Err(Error::config(format!(
            "sparse conv expects {} input channels, features have {}",
            w.in_channels(),
            input.channels
        )));
    }
    if !rb.matches(&input.keys) {
        return Err(Error::validation("rulebook was not built from the input's key set"));
    }
    let (c_in, c_out) = (w.in_channels(), w.out_channels());
    // Per-tap weights transposed to [tap][in][out] so the inner loop runs over outputs.
    let taps: Vec<Option<usize>> = (0..9u8)
        .map(|off| match w.kernel() {
            3 => Some(off as usize),
            _ if off == CENTER_OFFSET => Some(0),
            _ => None,
        })
        .collect();
    let k2 = w.kernel() * w.kernel();
    let mut wt = vec![0.0f32; k2 * c_in * c_out];
    for o in 0..c_out {
        for c in 0..c_in {
            for t in 0..k2 {
                let (ky, kx) = (t / w.kernel(), t % w.kernel());
                wt[(t * c_in + c) * c_out + o] = w.get(o, c, ky, kx);
            }
        }
    }
    let mut data = vec![0.0f32; input.rows() * c_out];
    if c_out > 0 {
        data.par_chunks_mut(c_out).enumerate().for_each(|(o, row)| {
            if with_bias {
                row.copy_from_slice(w.bias());
            }
            for e in rb.for_output(o) {
                let Some(t) = taps[e.offset as usize] else {
                    continue;
                };
                let src = input.row(e.input as usize);
                for (c, &v) in src.iter().enumerate() {
                    let wrow = &wt[(t * c_in + c) * c_out..(t * c_in + c + 1) * c_out];
                    for (acc, &wv) in row.iter_mut().zip(wrow) {
                        *acc += wv * v;
                    }
                }
            }
        });
    }
    SparseFeature::new(input.keys.clone(), c_out, data)
}
