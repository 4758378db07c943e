//! IDX container files (the MNIST distribution format).

use std::fs;
use std::path::Path;

use bittrace_core::precision::{self, Tracked};
use bittrace_core::{PTensor, Precision};

use crate::error::{CliError, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

pub fn parse_idx(bytes: &[u8], expected_magic: u32) -> std::result::Result<IdxArray, String> {
    let word = |at: usize| -> std::result::Result<u32, String> {
        bytes
            .get(at..at + 4)
            .map(|b| u32::from_be_bytes(b.try_into().expect("four bytes")))
            .ok_or_else(|| format!("truncated header at byte {at}"))
    };
    let magic = word(0)?;
    if magic != expected_magic {
        return Err(format!("bad magic: expected 0x{expected_magic:08x}, got 0x{magic:08x}"));
    }
    let ndim = (magic & 0xff) as usize;
    let dims = (0..ndim)
        .map(|i| word(4 + 4 * i).map(|d| d as usize))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let start = 4 + 4 * ndim;
    let len: usize = dims.iter().product();
    let body = &bytes[start.min(bytes.len())..];
    if body.len() < len {
        return Err(format!("truncated data: expected {len} bytes, found {}", body.len()));
    }
    if body.len() > len {
        return Err(format!("{} trailing bytes after data", body.len() - len));
    }
    Ok(IdxArray {
        dims,
        data: body.to_vec(),
    })
}

pub fn encode_idx(magic: u32, arr: &IdxArray) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 4 * arr.dims.len() + arr.data.len());
    out.extend_from_slice(&magic.to_be_bytes());
    for &d in &arr.dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(&arr.data);
    out
}

pub fn read_idx(path: &Path, expected_magic: u32) -> Result<IdxArray> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    parse_idx(&bytes, expected_magic).map_err(|m| CliError::format(path, m))
}

pub fn write_idx(path: &Path, magic: u32, arr: &IdxArray) -> Result<()> {
    fs::write(path, encode_idx(magic, arr)).map_err(|e| CliError::io(path, e))
}

/// Images as `[n, 1, rows, cols]` with labels as class indices.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub images: IdxArray,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(images: IdxArray, labels: IdxArray, classes: usize) -> std::result::Result<Self, String> {
        if images.dims.len() != 3 {
            return Err(format!("images must be 3-D, got {:?}", images.dims));
        }
        if labels.dims.len() != 1 || labels.dims[0] != images.dims[0] {
            return Err(format!(
                "{} labels for {} images",
                labels.dims.first().copied().unwrap_or(0),
                images.dims[0]
            ));
        }
        if let Some(bad) = labels.data.iter().find(|&&l| usize::from(l) >= classes) {
            return Err(format!("label {bad} outside {classes} classes"));
        }
        Ok(Dataset {
            labels: labels.data.iter().map(|&l| usize::from(l)).collect(),
            images,
            classes,
        })
    }

    pub fn load(images: &Path, labels: &Path) -> Result<Self> {
        let img = read_idx(images, IMAGES_MAGIC)?;
        let lab = read_idx(labels, LABELS_MAGIC)?;
        Dataset::new(img, lab, 10).map_err(|m| CliError::format(labels, m))
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn side(&self) -> (usize, usize) {
        (self.images.dims[1], self.images.dims[2])
    }

    pub fn truncate(&mut self, n: usize) {
        let n = n.min(self.len());
        let (r, c) = self.side();
        self.images.dims[0] = n;
        self.images.data.truncate(n * r * c);
        self.labels.truncate(n);
    }

    /// Pixels of samples `range` scaled to [0, 1] by a tracked division by 255.
    pub fn batch(&self, range: std::ops::Range<usize>, p: Precision) -> Result<(PTensor, PTensor)> {
        let (r, c) = self.side();
        let n = range.len();
        let bytes = &self.images.data[range.start * r * c..range.end * r * c];
        let scale = Tracked::exact(255.0, p);
        let (mut values, mut bits) = (Vec::with_capacity(bytes.len()), Vec::with_capacity(bytes.len()));
        for &b in bytes {
            let t = precision::div(p, Tracked::exact(f64::from(b), p), scale);
            values.push(t.value);
            bits.push(t.bits);
        }
        let x = PTensor::from_parts(&[n, 1, r, c], values, bits, p)?;
        let labels = self.labels[range].iter().map(|&l| l as f64).collect();
        let y = PTensor::exact_literal(labels, &[n], p)?;
        Ok((x, y))
    }
}
