//! `SMSG` feature files: per-image patch features with optional pixel label maps.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic "SMSG" | version u32 = 1 | n_records u32 | channels u32 |
//! per record: grid_h u32 | grid_w u32 | has_label u8 | features f32[C*N] channel-major |
//!             if has_label: label_h u32 | label_w u32 | labels i32[label_h*label_w] row-major
//! ```

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

pub const MAGIC: [u8; 4] = *b"SMSG";
pub const VERSION: u32 = 1;

/// Label value excluded from scoring.
pub const IGNORE_LABEL: i32 = -1;

/// Pixel-level ground truth, row-major. `-1` marks ignored pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<i32>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, values: Vec<i32>) -> Result<Self> {
        let map = Self { height, width, values };
        map.validate()?;
        Ok(map)
    }

    pub fn get(&self, row: usize, col: usize) -> i32 {
        self.values[row * self.width + col]
    }

    /// Largest non-ignore label, if any.
    pub fn max_label(&self) -> Option<i32> {
        self.values.iter().copied().filter(|&v| v >= 0).max()
    }

    fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::invalid("label map has a zero dimension"));
        }
        if self.values.len() != self.height * self.width {
            return Err(Error::shape(format!(
                "label map {}x{} holds {} values",
                self.height,
                self.width,
                self.values.len()
            )));
        }
        if let Some(bad) = self.values.iter().find(|&&v| v < IGNORE_LABEL) {
            return Err(Error::invalid(format!("label value {bad} below ignore label")));
        }
        Ok(())
    }
}

/// Frozen backbone features for one image: `channels x (grid_h * grid_w)`, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    pub channels: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub features: Vec<f32>,
    pub label: Option<LabelMap>,
}

impl FeatureRecord {
    pub fn new(
        channels: usize,
        grid_h: usize,
        grid_w: usize,
        features: Vec<f32>,
        label: Option<LabelMap>,
    ) -> Result<Self> {
        let rec = Self { channels, grid_h, grid_w, features, label };
        rec.validate()?;
        Ok(rec)
    }

    pub fn num_patches(&self) -> usize {
        self.grid_h * self.grid_w
    }

    /// Features as a `C x N` matrix in double precision.
    pub fn features_f64(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.channels, self.num_patches()), |(c, n)| {
            self.features[c * self.num_patches() + n] as f64
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.grid_h == 0 || self.grid_w == 0 {
            return Err(Error::invalid("record needs C >= 1 and N >= 1"));
        }
        if self.features.len() != self.channels * self.num_patches() {
            return Err(Error::shape(format!(
                "record declares {}x{} but holds {} values",
                self.channels,
                self.num_patches(),
                self.features.len()
            )));
        }
        if self.features.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("record features".into()));
        }
        if let Some(label) = &self.label {
            label.validate()?;
            if label.height < self.grid_h || label.width < self.grid_w {
                return Err(Error::invalid(format!(
                    "label map {}x{} is coarser than patch grid {}x{}",
                    label.height, label.width, self.grid_h, self.grid_w
                )));
            }
        }
        Ok(())
    }
}

/// An ordered collection of records sharing one channel count.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDataset {
    pub channels: usize,
    pub records: Vec<FeatureRecord>,
}

impl FeatureDataset {
    pub fn new(channels: usize, records: Vec<FeatureRecord>) -> Result<Self> {
        let ds = Self { channels, records };
        ds.validate()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Ground-truth class count implied by the labels (`max label + 1`), or `None`
    /// when no record carries a non-ignore label.
    pub fn k_gt(&self) -> Option<usize> {
        self.records
            .iter()
            .filter_map(|r| r.label.as_ref().and_then(LabelMap::max_label))
            .max()
            .map(|m| m as usize + 1)
    }

    pub fn has_labels(&self) -> bool {
        !self.records.is_empty() && self.records.iter().all(|r| r.label.is_some())
    }

    /// Subset by index, preserving order.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            channels: self.channels,
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::invalid("dataset needs C >= 1"));
        }
        for (i, rec) in self.records.iter().enumerate() {
            if rec.channels != self.channels {
                return Err(Error::shape(format!(
                    "record {i} has {} channels, dataset has {}",
                    rec.channels, self.channels
                )));
            }
            rec.validate()?;
        }
        Ok(())
    }
}

pub fn write_dataset(path: impl AsRef<Path>, ds: &FeatureDataset) -> Result<()> {
    ds.validate()?;
    let mut out = BufWriter::new(File::create(path)?);
    encode(&mut out, ds)?;
    out.flush()?;
    Ok(())
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<FeatureDataset> {
    let mut input = BufReader::new(File::open(path)?);
    decode(&mut input)
}

/// Serializes without touching the filesystem. Invariants are checked first.
pub fn encode<W: Write>(out: &mut W, ds: &FeatureDataset) -> Result<()> {
    ds.validate()?;
    out.write_all(&MAGIC)?;
    put_u32(out, VERSION)?;
    put_u32(out, len_u32(ds.records.len(), "record count")?)?;
    put_u32(out, len_u32(ds.channels, "channel count")?)?;
    for rec in &ds.records {
        put_u32(out, len_u32(rec.grid_h, "grid_h")?)?;
        put_u32(out, len_u32(rec.grid_w, "grid_w")?)?;
        out.write_all(&[rec.label.is_some() as u8])?;
        let mut buf = Vec::with_capacity(rec.features.len() * 4);
        for v in &rec.features {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf)?;
        if let Some(label) = &rec.label {
            put_u32(out, len_u32(label.height, "label_h")?)?;
            put_u32(out, len_u32(label.width, "label_w")?)?;
            let mut buf = Vec::with_capacity(label.values.len() * 4);
            for v in &label.values {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            out.write_all(&buf)?;
        }
    }
    Ok(())
}

pub fn decode<R: Read>(input: &mut R) -> Result<FeatureDataset> {
    let mut magic = [0u8; 4];
    read_exact(input, &mut magic, "magic")?;
    if magic != MAGIC {
        return Err(Error::BadMagic { expected: MAGIC, found: magic });
    }
    let version = get_u32(input, "version")?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let n_records = get_u32(input, "record count")? as usize;
    let channels = get_u32(input, "channel count")? as usize;
    if channels == 0 {
        return Err(Error::invalid("channel count is zero"));
    }

    // Capacity is capped so a corrupt count cannot trigger a huge allocation.
    let mut records = Vec::with_capacity(n_records.min(1 << 16));
    for _ in 0..n_records {
        let grid_h = get_u32(input, "grid_h")? as usize;
        let grid_w = get_u32(input, "grid_w")? as usize;
        let mut flag = [0u8; 1];
        read_exact(input, &mut flag, "label flag")?;
        let n = grid_h
            .checked_mul(grid_w)
            .and_then(|n| n.checked_mul(channels))
            .ok_or_else(|| Error::invalid("record size overflows"))?;
        let features = get_f32s(input, n, "features")?;
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("features of record {}", records.len())));
        }
        let label = match flag[0] {
            0 => None,
            1 => {
                let h = get_u32(input, "label_h")? as usize;
                let w = get_u32(input, "label_w")? as usize;
                let n = h.checked_mul(w).ok_or_else(|| Error::invalid("label size overflows"))?;
                let values = get_i32s(input, n, "labels")?;
                Some(LabelMap { height: h, width: w, values })
            }
            other => return Err(Error::invalid(format!("label flag {other} is not 0 or 1"))),
        };
        let rec = FeatureRecord { channels, grid_h, grid_w, features, label };
        rec.validate()?;
        records.push(rec);
    }

    let mut probe = [0u8; 1];
    if input.read(&mut probe)? != 0 {
        return Err(Error::invalid("trailing bytes after last record"));
    }
    Ok(FeatureDataset { channels, records })
}

/// Deterministic shuffled partition of `0..len` into batches of `batch_size`.
///
/// The final batch is kept when it has at least two images and dropped otherwise.
pub fn make_batches(len: usize, batch_size: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size < 2 {
        return Err(Error::config(format!("batch_size must be >= 2, got {batch_size}")));
    }
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(order
        .chunks(batch_size)
        .filter(|chunk| chunk.len() >= 2)
        .map(<[usize]>::to_vec)
        .collect())
}

fn len_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::invalid(format!("{what} {v} exceeds u32")))
}

fn put_u32<W: Write>(out: &mut W, v: u32) -> io::Result<()> {
    out.write_all(&v.to_le_bytes())
}

fn read_exact<R: Read>(input: &mut R, buf: &mut [u8], what: &'static str) -> Result<()> {
    input.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => Error::Truncated(what),
        _ => Error::Io(e),
    })
}

fn get_u32<R: Read>(input: &mut R, what: &'static str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(input, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn get_bytes<R: Read>(input: &mut R, n: usize, what: &'static str) -> Result<Vec<u8>> {
    let len = n.checked_mul(4).ok_or_else(|| Error::invalid("payload size overflows"))?;
    let mut buf = Vec::new();
    let got = input.take(len as u64).read_to_end(&mut buf)?;
    if got != len {
        return Err(Error::Truncated(what));
    }
    Ok(buf)
}

fn get_f32s<R: Read>(input: &mut R, n: usize, what: &'static str) -> Result<Vec<f32>> {
    Ok(get_bytes(input, n, what)?
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn get_i32s<R: Read>(input: &mut R, n: usize, what: &'static str) -> Result<Vec<i32>> {
    Ok(get_bytes(input, n, what)?
        .chunks_exact(4)
        .map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}
