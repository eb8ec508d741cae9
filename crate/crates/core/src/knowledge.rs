//! Per-sample group knowledge: for each of `M` groups, one probability row
//! per training sample, aggregated by an exponential moving average over the
//! outputs of that group's subnets.
//!
//! On-disk layout (little-endian):
//!
//! ```text
//! "GKTK" | version u32 | groups u32 | samples u64 | classes u32
//!        | per group: ceil(samples/8) init-bitmask bytes (LSB-first),
//!                     samples × classes f32 rows, row-major
//! ```
//!
//! Rows are held as `f64` in memory and written as `f32`. Uninitialized rows
//! are written as zeros.

use std::path::Path;

use crate::codec::{read_file, write_atomic, ByteReader};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const KNOWLEDGE_MAGIC: &[u8; 4] = b"GKTK";
pub const KNOWLEDGE_VERSION: u32 = 1;
const HEADER_BYTES: usize = 4 + 4 + 4 + 8 + 4;
const SIMPLEX_TOLERANCE: f64 = 1e-6;
const WHAT: &str = "knowledge store";

#[derive(Clone, Debug, PartialEq)]
pub struct GroupKnowledgeStore {
    groups: usize,
    samples: usize,
    classes: usize,
    rows: Vec<f64>,
    init: Vec<bool>,
}

impl GroupKnowledgeStore {
    pub fn new(groups: usize, samples: usize, classes: usize) -> Result<Self> {
        if groups == 0 || samples == 0 || classes == 0 {
            return Err(Error::InvalidArgument(format!(
                "knowledge store needs positive sizes (groups {groups}, samples {samples}, classes {classes})"
            )));
        }
        Ok(GroupKnowledgeStore {
            groups,
            samples,
            classes,
            rows: vec![0.0; groups * samples * classes],
            init: vec![false; groups * samples],
        })
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    fn check_group(&self, group: usize) -> Result<()> {
        if group == 0 || group > self.groups {
            return Err(Error::InvalidArgument(format!(
                "group {group} outside 1..={}",
                self.groups
            )));
        }
        Ok(())
    }

    fn check_index(&self, index: usize) -> Result<()> {
        if index >= self.samples {
            return Err(Error::OutOfRange {
                index,
                len: self.samples,
            });
        }
        Ok(())
    }

    fn slot(&self, group: usize, index: usize) -> usize {
        (group - 1) * self.samples + index
    }

    pub fn is_initialized(&self, group: usize, index: usize) -> bool {
        group >= 1
            && group <= self.groups
            && index < self.samples
            && self.init[self.slot(group, index)]
    }

    /// The stored row, or `None` if the sample has no knowledge in `group` yet.
    pub fn row(&self, group: usize, index: usize) -> Option<&[f64]> {
        if !self.is_initialized(group, index) {
            return None;
        }
        let start = self.slot(group, index) * self.classes;
        Some(&self.rows[start..start + self.classes])
    }

    /// Rows of `group` for the batch `indices`, plus per-sample initialization
    /// flags. Rows of uninitialized samples are zero.
    pub fn query(&self, group: usize, indices: &[usize]) -> Result<(Tensor, Vec<bool>)> {
        self.check_group(group)?;
        if indices.is_empty() {
            return Err(Error::InvalidArgument("empty index batch".into()));
        }
        let mut data = Vec::with_capacity(indices.len() * self.classes);
        let mut flags = Vec::with_capacity(indices.len());
        for &i in indices {
            self.check_index(i)?;
            match self.row(group, i) {
                Some(r) => {
                    data.extend_from_slice(r);
                    flags.push(true);
                }
                None => {
                    data.extend(std::iter::repeat_n(0.0, self.classes));
                    flags.push(false);
                }
            }
        }
        Ok((Tensor::new(vec![indices.len(), self.classes], data)?, flags))
    }

    /// EMA update `K := α·p + (1-α)·K` per sample; first touch stores `p`.
    /// Inputs are validated before anything is written.
    pub fn update(
        &mut self,
        group: usize,
        indices: &[usize],
        p: &Tensor,
        alpha: f64,
    ) -> Result<()> {
        self.check_group(group)?;
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "EMA coefficient must lie in (0, 1], got {alpha}"
            )));
        }
        let (rows, cols) = p.expect_matrix("knowledge update")?;
        if rows != indices.len() || cols != self.classes {
            return Err(Error::shape(
                "knowledge update",
                format!(
                    "{rows}×{cols} rows for {} indices and {} classes",
                    indices.len(),
                    self.classes
                ),
            ));
        }
        for (r, &i) in indices.iter().enumerate() {
            self.check_index(i)?;
            let row = p.row(r);
            let sum: f64 = row.iter().sum();
            if !row.iter().all(|v| v.is_finite() && *v >= 0.0)
                || (sum - 1.0).abs() > SIMPLEX_TOLERANCE
            {
                return Err(Error::NotSimplex { row: r, sum });
            }
        }
        for (r, &i) in indices.iter().enumerate() {
            let slot = self.slot(group, i);
            let stored = &mut self.rows[slot * self.classes..(slot + 1) * self.classes];
            if self.init[slot] {
                for (k, &v) in stored.iter_mut().zip(p.row(r)) {
                    *k = alpha * v + (1.0 - alpha) * *k;
                }
            } else {
                stored.copy_from_slice(p.row(r));
                self.init[slot] = true;
            }
        }
        Ok(())
    }

    /// Size in bytes of the persisted form.
    pub fn encoded_len(&self) -> usize {
        HEADER_BYTES + self.groups * (self.samples.div_ceil(8) + self.samples * self.classes * 4)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let groups = u32::try_from(self.groups).map_err(|_| format_err("too many groups"))?;
        let classes = u32::try_from(self.classes).map_err(|_| format_err("too many classes"))?;
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(KNOWLEDGE_MAGIC);
        out.extend_from_slice(&KNOWLEDGE_VERSION.to_le_bytes());
        out.extend_from_slice(&groups.to_le_bytes());
        out.extend_from_slice(&(self.samples as u64).to_le_bytes());
        out.extend_from_slice(&classes.to_le_bytes());
        for g in 0..self.groups {
            let init = &self.init[g * self.samples..(g + 1) * self.samples];
            let mut mask = vec![0u8; self.samples.div_ceil(8)];
            for (i, _) in init.iter().enumerate().filter(|(_, &f)| f) {
                mask[i / 8] |= 1 << (i % 8);
            }
            out.extend_from_slice(&mask);
            let rows =
                &self.rows[g * self.samples * self.classes..(g + 1) * self.samples * self.classes];
            for v in rows {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes, WHAT);
        r.expect_magic(KNOWLEDGE_MAGIC)?;
        let version = r.u32()?;
        if version != KNOWLEDGE_VERSION {
            return Err(r.error(format!("unsupported version {version}")));
        }
        let groups = r.u32()? as usize;
        let samples =
            usize::try_from(r.u64()?).map_err(|_| r.error("sample count overflows".into()))?;
        let classes = r.u32()? as usize;
        if groups == 0 || samples == 0 || classes == 0 {
            return Err(r.error(format!(
                "zero dimension (groups {groups}, samples {samples}, classes {classes})"
            )));
        }
        let expected = samples
            .checked_mul(classes)
            .and_then(|n| n.checked_mul(4))
            .and_then(|n| n.checked_add(samples.div_ceil(8)))
            .and_then(|n| n.checked_mul(groups))
            .and_then(|n| n.checked_add(HEADER_BYTES));
        if expected != Some(bytes.len()) {
            return Err(r.error(format!(
                "file is {} bytes, header implies {}",
                bytes.len(),
                expected.map_or_else(|| "an overflowing size".to_string(), |n| n.to_string())
            )));
        }
        let mut store = GroupKnowledgeStore::new(groups, samples, classes)?;
        for g in 0..groups {
            let mask = r.take(samples.div_ceil(8))?;
            for i in 0..samples {
                store.init[g * samples + i] = mask[i / 8] & (1 << (i % 8)) != 0;
            }
            if samples % 8 != 0 && mask[mask.len() - 1] >> (samples % 8) != 0 {
                return Err(r.error(format!("group {}: padding bits set in bitmask", g + 1)));
            }
            for v in &mut store.rows[g * samples * classes..(g + 1) * samples * classes] {
                *v = r.f32()? as f64;
            }
            for i in 0..samples {
                if let Some(row) = store.row(g + 1, i) {
                    let sum: f64 = row.iter().sum();
                    if !row.iter().all(|v| v.is_finite() && *v >= 0.0)
                        || (sum - 1.0).abs() > SIMPLEX_TOLERANCE
                    {
                        return Err(
                            r.error(format!("group {} sample {i}: row sums to {sum}", g + 1))
                        );
                    }
                }
            }
        }
        r.finish()?;
        Ok(store)
    }

    /// Writes the store atomically (temp file, then rename).
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&read_file(path)?)
    }
}

fn format_err(detail: &str) -> Error {
    Error::Format {
        what: WHAT,
        detail: detail.into(),
    }
}
