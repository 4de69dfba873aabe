// SPDX-License-Identifier: MIT OR Apache-2.0

//! ACTREC1: a flat little-endian container for labeled hidden-state records.
//!
//! ```text
//! header  : magic "ACTREC1" (7 bytes) | version u32 | endian marker u32 (0x01020304)
//!           | tag_len u16 | model tag (utf-8) | dim u32
//! record  : layer u16 | site u8 | label i8 | position u32 | dim u32 | dim × f32
//! ```
//! Records run to end of file; there is no record count. Every length field
//! is checked against the bytes actually remaining before anything is
//! allocated.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Vector;
use crate::probe::ContrastiveDataset;
use crate::site::{Site, SiteKey};

pub const MAGIC: &[u8; 7] = b"ACTREC1";
pub const VERSION: u32 = 1;
pub const ENDIAN_MARKER: u32 = 0x0102_0304;
const RECORD_PREFIX: usize = 2 + 1 + 1 + 4 + 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Label {
    Unlabeled,
    Negative,
    Positive,
}

impl Label {
    pub fn code(self) -> i8 {
        match self {
            Label::Unlabeled => -1,
            Label::Negative => 0,
            Label::Positive => 1,
        }
    }

    pub fn from_code(code: i8) -> Option<Self> {
        match code {
            -1 => Some(Label::Unlabeled),
            0 => Some(Label::Negative),
            1 => Some(Label::Positive),
            _ => None,
        }
    }

    pub fn binary(self) -> Option<u8> {
        match self {
            Label::Unlabeled => None,
            Label::Negative => Some(0),
            Label::Positive => Some(1),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationRecord {
    pub layer: u16,
    pub site: Site,
    pub label: Label,
    pub position: u32,
    pub values: Vec<f32>,
}

impl ActivationRecord {
    pub fn vector(&self) -> Result<Vector> {
        Vector::from_f32(&self.values)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationFile {
    pub model_tag: String,
    pub dim: u32,
    pub records: Vec<ActivationRecord>,
}

/// Serializes records. The header dim is taken from the first record
/// (0 for an empty file). Fails on mixed dims without producing output.
pub fn encode(model_tag: &str, records: &[ActivationRecord]) -> Result<Vec<u8>> {
    let dim = records.first().map_or(0, |r| r.values.len());
    if let Some(bad) = records.iter().find(|r| r.values.len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: bad.values.len(),
        });
    }
    let tag = model_tag.as_bytes();
    let tag_len = u16::try_from(tag.len())
        .map_err(|_| Error::InvalidArgument("model tag longer than 65535 bytes".into()))?;
    let dim32 = u32::try_from(dim).map_err(|_| Error::InvalidArgument("dim exceeds u32".into()))?;
    let mut out = Vec::with_capacity(21 + tag.len() + records.len() * (RECORD_PREFIX + 4 * dim));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&ENDIAN_MARKER.to_le_bytes());
    out.extend_from_slice(&tag_len.to_le_bytes());
    out.extend_from_slice(tag);
    out.extend_from_slice(&dim32.to_le_bytes());
    for r in records {
        out.extend_from_slice(&r.layer.to_le_bytes());
        out.push(r.site.code());
        out.extend_from_slice(&r.label.code().to_le_bytes());
        out.extend_from_slice(&r.position.to_le_bytes());
        out.extend_from_slice(&dim32.to_le_bytes());
        for x in &r.values {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.buf.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

fn le_u16(b: &[u8]) -> u16 {
    u16::from_le_bytes([b[0], b[1]])
}

fn le_u32(b: &[u8]) -> u32 {
    u32::from_le_bytes([b[0], b[1], b[2], b[3]])
}

pub fn decode(bytes: &[u8]) -> Result<ActivationFile> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    let magic = c.take(MAGIC.len()).ok_or(Error::TruncatedHeader)?;
    if magic != MAGIC {
        return Err(Error::BadMagic { expected: "ACTREC1" });
    }
    let version = le_u32(c.take(4).ok_or(Error::TruncatedHeader)?);
    if version != VERSION {
        return Err(Error::VersionMismatch {
            expected: VERSION,
            found: version,
        });
    }
    let marker = le_u32(c.take(4).ok_or(Error::TruncatedHeader)?);
    if marker != ENDIAN_MARKER {
        return Err(Error::InvalidEnum {
            field: "endian marker",
            value: i64::from(marker),
            record: 0,
        });
    }
    let tag_len = le_u16(c.take(2).ok_or(Error::TruncatedHeader)?) as usize;
    let tag = c.take(tag_len).ok_or(Error::TruncatedHeader)?;
    let model_tag = String::from_utf8(tag.to_vec())
        .map_err(|_| Error::InvalidArgument("model tag is not utf-8".into()))?;
    let dim = le_u32(c.take(4).ok_or(Error::TruncatedHeader)?);

    let mut records = Vec::new();
    let mut index = 0usize;
    while c.remaining() > 0 {
        let prefix = c.take(RECORD_PREFIX).ok_or(Error::TruncatedRecord(index))?;
        let layer = le_u16(&prefix[0..2]);
        let site = Site::from_code(prefix[2]).ok_or(Error::InvalidEnum {
            field: "site",
            value: i64::from(prefix[2]),
            record: index,
        })?;
        let label_code = prefix[3] as i8;
        let label = Label::from_code(label_code).ok_or(Error::InvalidEnum {
            field: "label",
            value: i64::from(label_code),
            record: index,
        })?;
        let position = le_u32(&prefix[4..8]);
        let rdim = le_u32(&prefix[8..12]);
        if rdim != dim {
            return Err(Error::DimensionMismatch {
                expected: dim as usize,
                got: rdim as usize,
            });
        }
        let payload_len = (rdim as usize)
            .checked_mul(4)
            .filter(|&n| n <= c.remaining())
            .ok_or(Error::TruncatedRecord(index))?;
        let payload = c.take(payload_len).expect("length checked");
        let values = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        records.push(ActivationRecord {
            layer,
            site,
            label,
            position,
            values,
        });
        index += 1;
    }
    Ok(ActivationFile {
        model_tag,
        dim,
        records,
    })
}

/// Writes atomically (temp file + rename). Returns the record count.
pub fn write_records(path: &Path, model_tag: &str, records: &[ActivationRecord]) -> Result<usize> {
    let bytes = encode(model_tag, records)?;
    let tmp = path.with_extension("actrec.tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(records.len())
}

pub fn read_records(path: &Path) -> Result<ActivationFile> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    decode(&std::fs::read(path)?)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub model_tag: String,
    pub record_count: usize,
    pub dim: u32,
    pub label_histogram: BTreeMap<i8, usize>,
    pub site_counts: BTreeMap<String, usize>,
    pub layer_counts: BTreeMap<u16, usize>,
}

pub fn summarize(file: &ActivationFile) -> ValidationReport {
    let mut label_histogram = BTreeMap::new();
    let mut site_counts = BTreeMap::new();
    let mut layer_counts = BTreeMap::new();
    for r in &file.records {
        *label_histogram.entry(r.label.code()).or_insert(0) += 1;
        *site_counts.entry(r.site.name().to_string()).or_insert(0) += 1;
        *layer_counts.entry(r.layer).or_insert(0) += 1;
    }
    ValidationReport {
        model_tag: file.model_tag.clone(),
        record_count: file.records.len(),
        dim: file.dim,
        label_histogram,
        site_counts,
        layer_counts,
    }
}

pub fn validate(path: &Path) -> Result<ValidationReport> {
    Ok(summarize(&read_records(path)?))
}

/// Labeled records at one (layer, site) as a probe training set.
/// Unlabeled records are skipped.
pub fn to_dataset(records: &[ActivationRecord], layer: usize, site: Site) -> Result<ContrastiveDataset> {
    let mut out = Vec::new();
    for r in records {
        if usize::from(r.layer) != layer || r.site != site {
            continue;
        }
        if let Some(label) = r.label.binary() {
            out.push((r.vector()?, label));
        }
    }
    ContrastiveDataset::new(layer, site, out)
}

/// One dataset per (layer, site) that has labeled records of both classes.
pub fn datasets_from_records(records: &[ActivationRecord]) -> Result<BTreeMap<SiteKey, ContrastiveDataset>> {
    let keys: BTreeSet<SiteKey> = records
        .iter()
        .filter(|r| r.label.binary().is_some())
        .map(|r| (usize::from(r.layer), r.site))
        .collect();
    let mut out = BTreeMap::new();
    for (layer, site) in keys {
        let d = to_dataset(records, layer, site)?;
        if d.require_both_classes().is_ok() {
            out.insert((layer, site), d);
        }
    }
    Ok(out)
}

/// Inverse of [`to_dataset`]; positions are record indices within the dataset.
pub fn from_dataset(data: &ContrastiveDataset) -> Result<Vec<ActivationRecord>> {
    let layer = u16::try_from(data.layer).map_err(|_| Error::InvalidArgument("layer exceeds u16".into()))?;
    Ok(data
        .records
        .iter()
        .enumerate()
        .map(|(i, (v, l))| ActivationRecord {
            layer,
            site: data.site,
            label: if *l == 1 { Label::Positive } else { Label::Negative },
            position: i as u32,
            values: v.to_f32(),
        })
        .collect())
}
