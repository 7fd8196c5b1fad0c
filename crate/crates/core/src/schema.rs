//! Stream schemas and element encoding.
//!
//! A [`StreamSchema`] declares the fixed layout of every element on a stream
//! as an ordered list of named scalar fields. Producers and consumers must
//! agree on the layout; agreement is checked by comparing [`schema_digest`]
//! values, which depend only on the ordered `(kind, count)` list — field
//! names are documentation.

use crate::error::{Error, Result};

/// Largest element accepted at attach time. The model targets fine-grained
/// elements; anything bigger belongs in a file, not a stream.
pub const MAX_ELEMENT_SIZE: usize = 1 << 20;

/// Scalar base types available to stream schemas.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScalarKind {
    Int32,
    Int64,
    Float32,
    Float64,
    Uint8,
}

impl ScalarKind {
    /// Fixed byte width of one scalar of this kind.
    pub fn width(self) -> usize {
        match self {
            ScalarKind::Int32 => 4,
            ScalarKind::Int64 => 8,
            ScalarKind::Float32 => 4,
            ScalarKind::Float64 => 8,
            ScalarKind::Uint8 => 1,
        }
    }

    fn tag(self) -> u8 {
        match self {
            ScalarKind::Int32 => 0,
            ScalarKind::Int64 => 1,
            ScalarKind::Float32 => 2,
            ScalarKind::Float64 => 3,
            ScalarKind::Uint8 => 4,
        }
    }
}

/// One named field: `count` scalars of `kind`, laid out contiguously.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldSpec {
    pub name: String,
    pub kind: ScalarKind,
    pub count: usize,
}

impl FieldSpec {
    pub fn new(name: impl Into<String>, kind: ScalarKind, count: usize) -> Self {
        FieldSpec {
            name: name.into(),
            kind,
            count,
        }
    }

    fn byte_len(&self) -> usize {
        self.kind.width() * self.count
    }
}

/// Declared element layout: the unit of producer/consumer agreement.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StreamSchema {
    fields: Vec<FieldSpec>,
    element_size: usize,
}

impl StreamSchema {
    /// Validates and builds a schema. Requires at least one field, distinct
    /// names, and positive counts.
    pub fn new(fields: Vec<FieldSpec>) -> Result<Self> {
        if fields.is_empty() {
            return Err(Error::Schema("schema must declare at least one field".into()));
        }
        for (i, f) in fields.iter().enumerate() {
            if f.name.is_empty() {
                return Err(Error::Schema(format!("field {i} has an empty name")));
            }
            if f.count == 0 {
                return Err(Error::Schema(format!("field '{}' has zero count", f.name)));
            }
            if fields[..i].iter().any(|g| g.name == f.name) {
                return Err(Error::Schema(format!("duplicate field name '{}'", f.name)));
            }
        }
        let element_size = fields.iter().map(FieldSpec::byte_len).sum();
        Ok(StreamSchema {
            fields,
            element_size,
        })
    }

    /// Single-field schema of `count` contiguous scalars, mirroring the
    /// classic contiguous derived datatype.
    pub fn contiguous(count: usize, kind: ScalarKind) -> Result<Self> {
        Self::new(vec![FieldSpec::new("data", kind, count)])
    }

    pub fn fields(&self) -> &[FieldSpec] {
        &self.fields
    }

    /// Total payload bytes of one element.
    pub fn element_size(&self) -> usize {
        self.element_size
    }

    /// Two schemas are compatible iff their ordered `(kind, count)` lists are
    /// identical. Names do not participate.
    pub fn compatible(&self, other: &StreamSchema) -> bool {
        self.fields.len() == other.fields.len()
            && self
                .fields
                .iter()
                .zip(&other.fields)
                .all(|(a, b)| a.kind == b.kind && a.count == b.count)
    }
}

/// 64-bit digest of the ordered `(kind, count)` list. Pure function of the
/// layout, stable across process restarts; equal digests for compatible
/// schemas by construction (FNV-1a over the tagged list).
pub fn schema_digest(schema: &StreamSchema) -> u64 {
    const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = FNV_OFFSET;
    let mut eat = |b: u8| {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    };
    for f in &schema.fields {
        eat(f.kind.tag());
        for b in (f.count as u32).to_le_bytes() {
            eat(b);
        }
    }
    h
}

/// Scalar array for one field of a decoded element.
#[derive(Debug, Clone, PartialEq)]
pub enum FieldValues {
    Int32(Vec<i32>),
    Int64(Vec<i64>),
    Float32(Vec<f32>),
    Float64(Vec<f64>),
    Uint8(Vec<u8>),
}

impl FieldValues {
    fn kind(&self) -> ScalarKind {
        match self {
            FieldValues::Int32(_) => ScalarKind::Int32,
            FieldValues::Int64(_) => ScalarKind::Int64,
            FieldValues::Float32(_) => ScalarKind::Float32,
            FieldValues::Float64(_) => ScalarKind::Float64,
            FieldValues::Uint8(_) => ScalarKind::Uint8,
        }
    }

    fn len(&self) -> usize {
        match self {
            FieldValues::Int32(v) => v.len(),
            FieldValues::Int64(v) => v.len(),
            FieldValues::Float32(v) => v.len(),
            FieldValues::Float64(v) => v.len(),
            FieldValues::Uint8(v) => v.len(),
        }
    }
}

/// Decoded view of one element: per-field scalar arrays in schema order.
#[derive(Debug, Clone, PartialEq)]
pub struct Values(pub Vec<FieldValues>);

impl Values {
    pub fn int32s(&self, field: usize) -> Option<&[i32]> {
        match self.0.get(field)? {
            FieldValues::Int32(v) => Some(v),
            _ => None,
        }
    }

    pub fn int64s(&self, field: usize) -> Option<&[i64]> {
        match self.0.get(field)? {
            FieldValues::Int64(v) => Some(v),
            _ => None,
        }
    }

    pub fn float64s(&self, field: usize) -> Option<&[f64]> {
        match self.0.get(field)? {
            FieldValues::Float64(v) => Some(v),
            _ => None,
        }
    }

    pub fn uint8s(&self, field: usize) -> Option<&[u8]> {
        match self.0.get(field)? {
            FieldValues::Uint8(v) => Some(v),
            _ => None,
        }
    }

    /// First scalar of an `Int64` field, the common one-value case.
    pub fn int64(&self, field: usize) -> Option<i64> {
        self.int64s(field).and_then(|v| v.first().copied())
    }

    /// First scalar of a `Float64` field.
    pub fn float64(&self, field: usize) -> Option<f64> {
        self.float64s(field).and_then(|v| v.first().copied())
    }
}

/// Encodes per-field scalar arrays into one fixed-size payload:
/// little-endian scalars, fields in schema order.
pub fn encode_element(schema: &StreamSchema, values: &Values) -> Result<Vec<u8>> {
    if values.0.len() != schema.fields.len() {
        return Err(Error::Schema(format!(
            "expected {} fields, got {}",
            schema.fields.len(),
            values.0.len()
        )));
    }
    let mut out = Vec::with_capacity(schema.element_size);
    for (spec, vals) in schema.fields.iter().zip(&values.0) {
        if vals.kind() != spec.kind {
            return Err(Error::Schema(format!(
                "field '{}' expects {:?}, got {:?}",
                spec.name,
                spec.kind,
                vals.kind()
            )));
        }
        if vals.len() != spec.count {
            return Err(Error::Schema(format!(
                "field '{}' expects {} scalars, got {}",
                spec.name,
                spec.count,
                vals.len()
            )));
        }
        match vals {
            FieldValues::Int32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            FieldValues::Int64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            FieldValues::Float32(v) => {
                v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()))
            }
            FieldValues::Float64(v) => {
                v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()))
            }
            FieldValues::Uint8(v) => out.extend_from_slice(v),
        }
    }
    debug_assert_eq!(out.len(), schema.element_size);
    Ok(out)
}

/// Inverse of [`encode_element`]. The payload must be exactly
/// `schema.element_size()` bytes.
pub fn decode_element(schema: &StreamSchema, payload: &[u8]) -> Result<Values> {
    if payload.len() != schema.element_size {
        return Err(Error::Framing(format!(
            "payload is {} bytes, schema expects {}",
            payload.len(),
            schema.element_size
        )));
    }
    let mut fields = Vec::with_capacity(schema.fields.len());
    let mut off = 0usize;
    for spec in &schema.fields {
        let w = spec.kind.width();
        let mut take = |n: usize| {
            let s = &payload[off..off + n];
            off += n;
            s
        };
        let vals = match spec.kind {
            ScalarKind::Int32 => FieldValues::Int32(
                (0..spec.count)
                    .map(|_| i32::from_le_bytes(take(w).try_into().unwrap()))
                    .collect(),
            ),
            ScalarKind::Int64 => FieldValues::Int64(
                (0..spec.count)
                    .map(|_| i64::from_le_bytes(take(w).try_into().unwrap()))
                    .collect(),
            ),
            ScalarKind::Float32 => FieldValues::Float32(
                (0..spec.count)
                    .map(|_| f32::from_le_bytes(take(w).try_into().unwrap()))
                    .collect(),
            ),
            ScalarKind::Float64 => FieldValues::Float64(
                (0..spec.count)
                    .map(|_| f64::from_le_bytes(take(w).try_into().unwrap()))
                    .collect(),
            ),
            ScalarKind::Uint8 => FieldValues::Uint8(take(spec.count).to_vec()),
        };
        fields.push(vals);
    }
    Ok(Values(fields))
}
