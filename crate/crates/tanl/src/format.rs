//! `.tanlemb` container: 8-byte magic, little-endian u64 header length,
//! UTF-8 JSON header, then the section payloads back to back.
//!
//! Section offsets in the header are relative to the first payload byte.
//! Floats are stored as little-endian f32, so writing and reading a matrix
//! round-trips bit-exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use tanl_core::embedding::Domain;
use tanl_core::{Bundle, EmbeddingMatrix, LabelBank, TestStream};

pub const MAGIC: &[u8; 8] = b"TANLEMB1";
pub const VERSION: u32 = 1;

/// Refuse headers larger than this before allocating for them.
const MAX_HEADER_BYTES: u64 = 1 << 30;

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("bad magic: expected TANLEMB1")]
    BadMagic,
    #[error("unsupported format version {0}")]
    Version(u32),
    #[error("malformed header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("header length {0} exceeds the limit")]
    HeaderTooLarge(u64),
    #[error("section {name}: {reason}")]
    Section { name: String, reason: String },
    #[error("missing required section {0}")]
    MissingSection(&'static str),
    #[error("gt_domain: row {row} holds {value}, expected 0 or 1")]
    BadDomain { row: usize, value: u8 },
    #[error("gt_class: row {row} is {value} but gt_domain marks it {domain}")]
    ClassDomainConflict { row: usize, value: i32, domain: &'static str },
    #[error(transparent)]
    Core(#[from] tanl_core::Error),
}

pub type Result<T, E = FormatError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    U8,
    I32,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F32 | Dtype::I32 => 4,
            Dtype::U8 => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SectionHeader {
    pub name: String,
    pub dtype: Dtype,
    pub rows: usize,
    pub cols: usize,
    pub offset: u64,
    pub length: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub version: u32,
    pub dim: usize,
    pub id_names: Vec<String>,
    pub corpus_names: Vec<String>,
    pub sections: Vec<SectionHeader>,
}

/// File contents exactly as stored, before normalization or dedup.
#[derive(Debug, Clone, PartialEq)]
pub struct RawBundle {
    pub dim: usize,
    pub id_names: Vec<String>,
    pub id_labels: Vec<f32>,
    pub corpus_names: Vec<String>,
    pub corpus_labels: Vec<f32>,
    pub test_features: Vec<f32>,
    pub noise_features: Option<Vec<f32>>,
    pub gt_domain: Option<Vec<u8>>,
    pub gt_class: Option<Vec<i32>>,
}

impl RawBundle {
    pub fn num_test(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.test_features.len() / self.dim
        }
    }

    /// Raw form of an already-loaded bundle. Corpus order is the
    /// deduplicated order.
    pub fn from_bundle(b: &Bundle) -> Self {
        Self {
            dim: b.bank.dim(),
            id_names: b.bank.id_names().to_vec(),
            id_labels: b.bank.id_embeds().as_slice().to_vec(),
            corpus_names: b.bank.corpus_names().to_vec(),
            corpus_labels: b.bank.corpus_embeds().as_slice().to_vec(),
            test_features: b.stream.features.as_slice().to_vec(),
            noise_features: b.noise.as_ref().map(|n| n.as_slice().to_vec()),
            gt_domain: b
                .stream
                .gt_domain
                .as_ref()
                .map(|g| g.iter().map(|d| d.as_u8()).collect()),
            gt_class: b.stream.gt_class.clone(),
        }
    }
}

fn f32_bytes(xs: &[f32]) -> Vec<u8> {
    xs.iter().flat_map(|x| x.to_le_bytes()).collect()
}

fn i32_bytes(xs: &[i32]) -> Vec<u8> {
    xs.iter().flat_map(|x| x.to_le_bytes()).collect()
}

pub fn write_raw(path: &Path, raw: &RawBundle) -> Result<()> {
    let dim = raw.dim;
    let rows_of = |len: usize| if dim == 0 { 0 } else { len / dim };
    let mut parts: Vec<(&str, Dtype, usize, usize, Vec<u8>)> = vec![
        ("id_labels", Dtype::F32, rows_of(raw.id_labels.len()), dim, f32_bytes(&raw.id_labels)),
        (
            "corpus_labels",
            Dtype::F32,
            rows_of(raw.corpus_labels.len()),
            dim,
            f32_bytes(&raw.corpus_labels),
        ),
        (
            "test_features",
            Dtype::F32,
            rows_of(raw.test_features.len()),
            dim,
            f32_bytes(&raw.test_features),
        ),
    ];
    if let Some(n) = &raw.noise_features {
        parts.push(("noise_features", Dtype::F32, rows_of(n.len()), dim, f32_bytes(n)));
    }
    if let Some(g) = &raw.gt_domain {
        parts.push(("gt_domain", Dtype::U8, g.len(), 1, g.clone()));
    }
    if let Some(g) = &raw.gt_class {
        parts.push(("gt_class", Dtype::I32, g.len(), 1, i32_bytes(g)));
    }

    let mut offset = 0u64;
    let sections = parts
        .iter()
        .map(|(name, dtype, rows, cols, bytes)| {
            let s = SectionHeader {
                name: name.to_string(),
                dtype: *dtype,
                rows: *rows,
                cols: *cols,
                offset,
                length: bytes.len() as u64,
            };
            offset += bytes.len() as u64;
            s
        })
        .collect();
    let header = Header {
        version: VERSION,
        dim,
        id_names: raw.id_names.clone(),
        corpus_names: raw.corpus_names.clone(),
        sections,
    };
    let json = serde_json::to_vec(&header)?;

    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for (_, _, _, _, bytes) in &parts {
        w.write_all(bytes)?;
    }
    w.flush()?;
    Ok(())
}

fn section_err(name: &str, reason: impl Into<String>) -> FormatError {
    FormatError::Section {
        name: name.to_string(),
        reason: reason.into(),
    }
}

pub fn read_header(r: &mut impl Read) -> Result<Header> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => FormatError::BadMagic,
        _ => e.into(),
    })?;
    if &magic != MAGIC {
        return Err(FormatError::BadMagic);
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len);
    if len > MAX_HEADER_BYTES {
        return Err(FormatError::HeaderTooLarge(len));
    }
    let mut json = vec![0u8; len as usize];
    r.read_exact(&mut json)?;
    let header: Header = serde_json::from_slice(&json)?;
    if header.version != VERSION {
        return Err(FormatError::Version(header.version));
    }
    Ok(header)
}

const KNOWN_SECTIONS: [&str; 6] = [
    "id_labels",
    "corpus_labels",
    "test_features",
    "noise_features",
    "gt_domain",
    "gt_class",
];

fn section<'a>(
    header: &'a Header,
    payload: &'a [u8],
    name: &'static str,
    dtype: Dtype,
) -> Result<Option<(&'a SectionHeader, &'a [u8])>> {
    let mut found = header.sections.iter().filter(|s| s.name == name);
    let Some(s) = found.next() else {
        return Ok(None);
    };
    if found.next().is_some() {
        return Err(section_err(name, "declared twice"));
    }
    if s.dtype != dtype {
        return Err(section_err(name, format!("expected dtype {dtype:?}, found {:?}", s.dtype)));
    }
    let expected = s
        .rows
        .checked_mul(s.cols)
        .and_then(|n| n.checked_mul(dtype.width()))
        .ok_or_else(|| section_err(name, "declared size overflows"))?;
    if s.length != expected as u64 {
        return Err(section_err(
            name,
            format!("{} x {} entries need {expected} bytes, header says {}", s.rows, s.cols, s.length),
        ));
    }
    match s.offset.checked_add(s.length) {
        Some(end) if end <= payload.len() as u64 => Ok(Some((s, &payload[s.offset as usize..end as usize]))),
        _ => Err(section_err(
            name,
            format!(
                "bytes {}..{} run past the {}-byte payload",
                s.offset,
                s.offset.saturating_add(s.length),
                payload.len()
            ),
        )),
    }
}

fn matrix_section(header: &Header, payload: &[u8], name: &'static str) -> Result<Option<Vec<f32>>> {
    let Some((s, bytes)) = section(header, payload, name, Dtype::F32)? else {
        return Ok(None);
    };
    if s.cols != header.dim {
        return Err(section_err(name, format!("has {} columns, header dim is {}", s.cols, header.dim)));
    }
    Ok(Some(
        bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect(),
    ))
}

pub fn read_raw(path: &Path) -> Result<RawBundle> {
    let mut r = BufReader::new(File::open(path)?);
    let header = read_header(&mut r)?;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;

    if let Some(s) = header.sections.iter().find(|s| !KNOWN_SECTIONS.contains(&s.name.as_str())) {
        return Err(section_err(&s.name, "unknown section"));
    }
    let required = |name: &'static str| -> Result<Vec<f32>> {
        matrix_section(&header, &payload, name)?.ok_or(FormatError::MissingSection(name))
    };
    let id_labels = required("id_labels")?;
    let corpus_labels = required("corpus_labels")?;
    let test_features = required("test_features")?;
    let noise_features = matrix_section(&header, &payload, "noise_features")?;
    let gt_domain = section(&header, &payload, "gt_domain", Dtype::U8)?.map(|(_, b)| b.to_vec());
    let gt_class = section(&header, &payload, "gt_class", Dtype::I32)?.map(|(_, b)| {
        b.chunks_exact(4)
            .map(|b| i32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect::<Vec<i32>>()
    });
    let used: u64 = header.sections.iter().map(|s| s.length).sum();
    if used != payload.len() as u64 {
        return Err(section_err(
            "payload",
            format!("{} bytes present, sections cover {used}", payload.len()),
        ));
    }

    Ok(RawBundle {
        dim: header.dim,
        id_names: header.id_names,
        id_labels,
        corpus_names: header.corpus_names,
        corpus_labels,
        test_features,
        noise_features,
        gt_domain,
        gt_class,
    })
}

/// Validates, normalizes and deduplicates a raw bundle.
pub fn into_bundle(raw: RawBundle, batch_size: usize) -> Result<Bundle> {
    let dim = raw.dim;
    let rows = |v: &[f32]| if dim == 0 { 0 } else { v.len() / dim };
    let id = EmbeddingMatrix::normalized("id_labels", rows(&raw.id_labels), dim, raw.id_labels)?;
    let corpus = EmbeddingMatrix::normalized("corpus_labels", rows(&raw.corpus_labels), dim, raw.corpus_labels)?;
    let t = rows(&raw.test_features);
    let features = EmbeddingMatrix::normalized("test_features", t, dim, raw.test_features)?;
    let noise = match raw.noise_features {
        Some(n) => Some(EmbeddingMatrix::normalized("noise_features", rows(&n), dim, n)?),
        None => None,
    };
    let gt_domain = match raw.gt_domain {
        Some(g) => Some(
            g.iter()
                .enumerate()
                .map(|(row, &value)| Domain::from_u8(value).ok_or(FormatError::BadDomain { row, value }))
                .collect::<Result<Vec<Domain>>>()?,
        ),
        None => None,
    };
    if let (Some(d), Some(c)) = (&gt_domain, &raw.gt_class) {
        for (row, (&d, &value)) in d.iter().zip(c).enumerate() {
            let conflict = match d {
                Domain::Id => value < 0 || value as usize >= id.rows(),
                Domain::Ood => value != -1,
            };
            if conflict {
                let domain = if d == Domain::Id { "ID" } else { "OOD" };
                return Err(FormatError::ClassDomainConflict { row, value, domain });
            }
        }
    }
    let (bank, removed) = LabelBank::new(raw.id_names, id, raw.corpus_names, corpus)?;
    let stream = TestStream::new(features, gt_domain, raw.gt_class, batch_size)?;
    Ok(Bundle {
        bank,
        stream,
        noise,
        removed,
    })
}

/// Reads, validates, re-normalizes and deduplicates a bundle file.
pub fn load_bundle(path: &Path, batch_size: usize) -> Result<Bundle> {
    into_bundle(read_raw(path)?, batch_size)
}

pub fn save_bundle(path: &Path, bundle: &Bundle) -> Result<()> {
    write_raw(path, &RawBundle::from_bundle(bundle))
}
