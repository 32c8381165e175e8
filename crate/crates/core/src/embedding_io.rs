//! Embedding pools: the binary interchange format, CSV import, and seeded
//! Gaussian fixture pools.
//!
//! Binary layout (little-endian):
//!
//! ```text
//! "IDST" | version u16 = 1 | reserved u16 = 0 | count u32 | dim u32 | num_classes u32
//! count × ( label u32 | dim × f32 )
//! ```
//!
//! Item ids are the 0-based record index. Vectors are held as `f64` in memory;
//! they are narrowed to `f32` on write.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"IDST";
pub const FORMAT_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 20;

const MAX_PLACEMENT_ATTEMPTS: usize = 10_000;

#[derive(Debug, Clone, PartialEq)]
pub struct Item {
    pub id: usize,
    pub label: usize,
    pub vector: Vec<f64>,
}

/// A labeled pool of `dim`-dimensional vectors.
///
/// Fields are public so callers can assemble sets by hand; [`EmbeddingSet::validate`]
/// checks the invariants and runs at every I/O boundary and pipeline stage.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub items: Vec<Item>,
    pub dim: usize,
    pub num_classes: usize,
}

impl EmbeddingSet {
    /// Builds a set from `(label, vector)` records, assigning ids by position.
    pub fn from_records(
        dim: usize,
        num_classes: usize,
        records: impl IntoIterator<Item = (usize, Vec<f64>)>,
    ) -> Result<Self> {
        let items = records
            .into_iter()
            .enumerate()
            .map(|(id, (label, vector))| Item { id, label, vector })
            .collect();
        let set = EmbeddingSet {
            items,
            dim,
            num_classes,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::InvalidSet("dim must be at least 1".into()));
        }
        if self.num_classes == 0 {
            return Err(Error::InvalidSet("num_classes must be at least 1".into()));
        }
        if self.items.len() > u32::MAX as usize {
            return Err(Error::InvalidSet("too many items for a u32 count".into()));
        }
        for (record, item) in self.items.iter().enumerate() {
            if item.id != record {
                return Err(Error::InvalidSet(format!(
                    "item at position {record} has id {}",
                    item.id
                )));
            }
            if item.label >= self.num_classes {
                return Err(Error::LabelOutOfRange {
                    record,
                    label: item.label,
                    num_classes: self.num_classes,
                });
            }
            if item.vector.len() != self.dim {
                return Err(Error::DimensionMismatch {
                    record,
                    expected: self.dim,
                    found: item.vector.len(),
                });
            }
            if let Some(component) = item.vector.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite { record, component });
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn vector(&self, id: usize) -> &[f64] {
        &self.items[id].vector
    }

    pub fn label(&self, id: usize) -> usize {
        self.items[id].label
    }

    pub fn labels(&self) -> Vec<usize> {
        self.items.iter().map(|item| item.label).collect()
    }

    /// Ids of every item with the given label, ascending.
    pub fn class_ids(&self, label: usize) -> Vec<usize> {
        self.items
            .iter()
            .filter(|item| item.label == label)
            .map(|item| item.id)
            .collect()
    }

    pub fn class_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.num_classes];
        for item in &self.items {
            sizes[item.label] += 1;
        }
        sizes
    }

    /// Errors unless every class in `[0, C)` has at least `min` items.
    pub fn require_class_sizes(&self, min: usize) -> Result<()> {
        for (class, &found) in self.class_sizes().iter().enumerate() {
            if found < min {
                return Err(Error::ClassTooSmall {
                    class,
                    found,
                    required: min,
                });
            }
        }
        Ok(())
    }

    /// New set made of the given items in the given order, with fresh ids.
    pub fn subset(&self, ids: &[usize]) -> EmbeddingSet {
        let items = ids
            .iter()
            .enumerate()
            .map(|(id, &src)| Item {
                id,
                label: self.items[src].label,
                vector: self.items[src].vector.clone(),
            })
            .collect();
        EmbeddingSet {
            items,
            dim: self.dim,
            num_classes: self.num_classes,
        }
    }

    /// Copy with every vector scaled to unit Euclidean norm (zero vectors are
    /// left untouched).
    pub fn l2_normalized(&self) -> EmbeddingSet {
        let mut out = self.clone();
        for item in &mut out.items {
            let norm = item.vector.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                item.vector.iter_mut().for_each(|v| *v /= norm);
            }
        }
        out
    }
}

pub fn encode(set: &EmbeddingSet) -> Result<Vec<u8>> {
    set.validate()?;
    let mut buf = Vec::with_capacity(HEADER_LEN + set.len() * (4 + 4 * set.dim));
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&0u16.to_le_bytes());
    buf.extend_from_slice(&(set.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(set.dim as u32).to_le_bytes());
    buf.extend_from_slice(&(set.num_classes as u32).to_le_bytes());
    for item in &set.items {
        buf.extend_from_slice(&(item.label as u32).to_le_bytes());
        for &v in &item.vector {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(buf)
}

fn u16_at(bytes: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([bytes[at], bytes[at + 1]])
}

fn u32_at(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]])
}

pub fn decode(bytes: &[u8]) -> Result<EmbeddingSet> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::MalformedHeader(format!(
            "file is {} bytes, header needs {HEADER_LEN}",
            bytes.len()
        )));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::MalformedHeader("bad magic bytes".into()));
    }
    let version = u16_at(bytes, 4);
    if version != FORMAT_VERSION {
        return Err(Error::MalformedHeader(format!(
            "unsupported version {version}"
        )));
    }
    if u16_at(bytes, 6) != 0 {
        return Err(Error::MalformedHeader("reserved field is non-zero".into()));
    }
    let count = u32_at(bytes, 8) as usize;
    let dim = u32_at(bytes, 12) as usize;
    let num_classes = u32_at(bytes, 16) as usize;
    if dim == 0 {
        return Err(Error::MalformedHeader("dim is zero".into()));
    }
    if num_classes == 0 {
        return Err(Error::MalformedHeader("num_classes is zero".into()));
    }

    let payload = bytes.len() - HEADER_LEN;
    let record_len = 4 + 4 * dim;
    let expected = count
        .checked_mul(record_len)
        .ok_or_else(|| Error::MalformedHeader("count × dim overflows".into()))?;
    if payload != expected {
        // A payload that splits evenly into `count` well-formed records of a
        // different width means the header's dim disagrees with the records.
        if count > 0 && payload.is_multiple_of(count) {
            let per_record = payload / count;
            if per_record >= 4 && per_record.is_multiple_of(4) {
                return Err(Error::DimensionMismatch {
                    record: 0,
                    expected: dim,
                    found: (per_record - 4) / 4,
                });
            }
        }
        if payload < expected {
            return Err(Error::Truncated {
                record: payload / record_len,
            });
        }
        return Err(Error::MalformedHeader(format!(
            "{} trailing bytes after {count} records",
            payload - expected
        )));
    }

    let mut items = Vec::with_capacity(count);
    let mut at = HEADER_LEN;
    for record in 0..count {
        let label = u32_at(bytes, at) as usize;
        at += 4;
        if label >= num_classes {
            return Err(Error::LabelOutOfRange {
                record,
                label,
                num_classes,
            });
        }
        let mut vector = Vec::with_capacity(dim);
        for component in 0..dim {
            let v = f32::from_le_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]]);
            at += 4;
            if !v.is_finite() {
                return Err(Error::NonFinite { record, component });
            }
            vector.push(v as f64);
        }
        items.push(Item {
            id: record,
            label,
            vector,
        });
    }
    Ok(EmbeddingSet {
        items,
        dim,
        num_classes,
    })
}

pub fn read_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingSet> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Writes the binary format. The set is validated before anything touches disk.
pub fn write_embeddings(set: &EmbeddingSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(set)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Parses the CSV import format: header `label,f0,...,f{d-1}` then one row
/// per item. Values are narrowed to `f32` precision so that a subsequent
/// binary write is lossless. `num_classes` defaults to `max(label) + 1`.
pub fn parse_csv(text: &str, num_classes: Option<usize>) -> Result<EmbeddingSet> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines
        .next()
        .ok_or_else(|| Error::MalformedHeader("empty csv".into()))?;
    let columns: Vec<&str> = header.split(',').map(str::trim).collect();
    if columns.first() != Some(&"label") || columns.len() < 2 {
        return Err(Error::MalformedHeader(
            "csv header must be `label,f0,...`".into(),
        ));
    }
    for (k, col) in columns[1..].iter().enumerate() {
        if *col != format!("f{k}") {
            return Err(Error::MalformedHeader(format!(
                "csv column {} should be `f{k}`, found `{col}`",
                k + 1
            )));
        }
    }
    let dim = columns.len() - 1;

    let mut records = Vec::new();
    for (record, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != dim + 1 {
            return Err(Error::DimensionMismatch {
                record,
                expected: dim,
                found: fields.len().saturating_sub(1),
            });
        }
        let label: usize = fields[0].parse().map_err(|_| Error::Csv {
            record,
            message: format!("bad label `{}`", fields[0]),
        })?;
        let mut vector = Vec::with_capacity(dim);
        for (component, field) in fields[1..].iter().enumerate() {
            let v: f64 = field.parse().map_err(|_| Error::Csv {
                record,
                message: format!("bad value `{field}`"),
            })?;
            let v = v as f32;
            if !v.is_finite() {
                return Err(Error::NonFinite { record, component });
            }
            vector.push(v as f64);
        }
        records.push((label, vector));
    }

    let num_classes = match num_classes {
        Some(c) => c,
        None => records.iter().map(|(l, _)| l + 1).max().unwrap_or(1),
    };
    EmbeddingSet::from_records(dim, num_classes, records)
}

pub fn read_csv(path: impl AsRef<Path>, num_classes: Option<usize>) -> Result<EmbeddingSet> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_csv(&text, num_classes)
}

/// Parameters of a planted-cluster Gaussian pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureSpec {
    pub seed: u64,
    pub num_classes: usize,
    pub clusters_per_class: usize,
    pub dim: usize,
    pub count_per_class: usize,
    /// Minimum distance between any two cluster means, in units of `noise_sigma`.
    pub separation: f64,
    pub noise_sigma: f64,
}

/// A generated pool together with its planted structure.
#[derive(Debug, Clone)]
pub struct Fixture {
    pub set: EmbeddingSet,
    /// Global cluster index (`class * clusters_per_class + k`) of every item.
    pub cluster_of: Vec<usize>,
    pub means: Vec<Vec<f64>>,
}

fn validate_fixture_spec(spec: &FixtureSpec) -> Result<()> {
    let positive_ints = [
        ("num_classes", spec.num_classes),
        ("clusters_per_class", spec.clusters_per_class),
        ("dim", spec.dim),
        ("count_per_class", spec.count_per_class),
    ];
    for (name, v) in positive_ints {
        if v == 0 {
            return Err(Error::InvalidArgument(format!("{name} must be positive")));
        }
    }
    for (name, v) in [
        ("separation", spec.separation),
        ("noise_sigma", spec.noise_sigma),
    ] {
        if !(v.is_finite() && v > 0.0) {
            return Err(Error::InvalidArgument(format!("{name} must be positive")));
        }
    }
    Ok(())
}

/// Places `count` unit-scale means with pairwise distance ≥ 1.
///
/// Candidates are drawn from an isotropic Gaussian whose spread starts where
/// typical pairwise distances are ≈ 1 and widens by 2% after each rejection.
fn place_unit_means(rng: &mut ChaCha8Rng, count: usize, dim: usize) -> Result<Vec<Vec<f64>>> {
    let mut spread = 1.0 / (2.0 * dim as f64).sqrt();
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(count);
    let mut attempts = 0;
    while means.len() < count {
        attempts += 1;
        if attempts > MAX_PLACEMENT_ATTEMPTS {
            return Err(Error::FixturePlacement(MAX_PLACEMENT_ATTEMPTS));
        }
        let candidate: Vec<f64> = (0..dim)
            .map(|_| spread * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let clear = means.iter().all(|m| {
            m.iter()
                .zip(&candidate)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                >= 1.0
        });
        if clear {
            means.push(candidate);
        } else {
            spread *= 1.02;
        }
    }
    Ok(means)
}

/// Generates the pool and its planted clusters.
///
/// Items are ordered class-major, then cluster, then draw order. Every value
/// is rounded to `f32` precision so the pool survives a binary round-trip.
pub fn generate_fixture_with_truth(spec: &FixtureSpec) -> Result<Fixture> {
    validate_fixture_spec(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let total_clusters = spec.num_classes * spec.clusters_per_class;
    let scale = spec.separation * spec.noise_sigma;
    let means: Vec<Vec<f64>> = place_unit_means(&mut rng, total_clusters, spec.dim)?
        .into_iter()
        .map(|m| m.into_iter().map(|v| v * scale).collect())
        .collect();
    let noise = Normal::new(0.0, spec.noise_sigma)
        .map_err(|e| Error::InvalidArgument(format!("noise_sigma: {e}")))?;

    let mut records = Vec::with_capacity(spec.num_classes * spec.count_per_class);
    let mut cluster_of = Vec::with_capacity(records.capacity());
    let base = spec.count_per_class / spec.clusters_per_class;
    let extra = spec.count_per_class % spec.clusters_per_class;
    for class in 0..spec.num_classes {
        for k in 0..spec.clusters_per_class {
            let cluster = class * spec.clusters_per_class + k;
            let count = base + usize::from(k < extra);
            for _ in 0..count {
                let vector = means[cluster]
                    .iter()
                    .map(|&mu| ((mu + noise.sample(&mut rng)) as f32) as f64)
                    .collect();
                records.push((class, vector));
                cluster_of.push(cluster);
            }
        }
    }
    let set = EmbeddingSet::from_records(spec.dim, spec.num_classes, records)?;
    Ok(Fixture {
        set,
        cluster_of,
        means,
    })
}

pub fn generate_fixture(spec: &FixtureSpec) -> Result<EmbeddingSet> {
    generate_fixture_with_truth(spec).map(|f| f.set)
}
