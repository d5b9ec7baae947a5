//! PHGT on-disk tensor format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset  size  field
//! 0       4     magic "PHGT"
//! 4       2     format version (currently 1)
//! 6       1     dtype: 0 = f32, 1 = u8
//! 7       1     rank
//! 8       4*r   dims, one u32 per axis
//! 8+4r    ...   payload, row-major, dtype-sized little-endian elements
//! ```
//!
//! f32 payloads are rejected at load time if they contain NaN/Inf. Writes go
//! through a temp file in the same directory followed by a rename, so a
//! crashed run never leaves a truncated tensor behind.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{PhgError, Result};
use crate::tensor::{ClassMap, Tensor};

pub const PHGT_MAGIC: &[u8; 4] = b"PHGT";
pub const PHGT_VERSION: u16 = 1;

const DTYPE_F32: u8 = 0;
const DTYPE_U8: u8 = 1;

/// Payload of a PHGT file: either a float tensor or a u8 class map.
#[derive(Debug, Clone, PartialEq)]
pub enum PhgtData {
    F32(Tensor),
    /// Class maps are always rank-2 `[H, W]`.
    U8(ClassMap),
}

/// Serialize to the PHGT byte layout.
pub fn to_bytes(data: &PhgtData) -> Vec<u8> {
    let (dtype, dims): (u8, Vec<usize>) = match data {
        PhgtData::F32(t) => (DTYPE_F32, t.dims().to_vec()),
        PhgtData::U8(m) => (DTYPE_U8, vec![m.height(), m.width()]),
    };
    let payload_len = match data {
        PhgtData::F32(t) => t.len() * 4,
        PhgtData::U8(m) => m.data().len(),
    };
    let mut out = Vec::with_capacity(8 + 4 * dims.len() + payload_len);
    out.extend_from_slice(PHGT_MAGIC);
    out.extend_from_slice(&PHGT_VERSION.to_le_bytes());
    out.push(dtype);
    out.push(dims.len() as u8);
    for &d in &dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    match data {
        PhgtData::F32(t) => {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        PhgtData::U8(m) => out.extend_from_slice(m.data()),
    }
    out
}

/// Parse the PHGT byte layout. `origin` is used in error messages only.
pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<PhgtData> {
    let fail = |reason: String| PhgError::Format { path: origin.to_path_buf(), reason };
    if bytes.len() < 8 {
        return Err(fail(format!("file too short ({} bytes)", bytes.len())));
    }
    if &bytes[0..4] != PHGT_MAGIC {
        return Err(fail(format!("bad magic {:?}", &bytes[0..4])));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != PHGT_VERSION {
        return Err(fail(format!("unsupported version {version}")));
    }
    let dtype = bytes[6];
    let rank = bytes[7] as usize;
    let header_len = 8 + 4 * rank;
    if bytes.len() < header_len {
        return Err(fail("truncated dim table".into()));
    }
    let mut dims = Vec::with_capacity(rank);
    for i in 0..rank {
        let off = 8 + 4 * i;
        dims.push(u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize);
    }
    let count: usize = dims.iter().product();
    let payload = &bytes[header_len..];
    match dtype {
        DTYPE_F32 => {
            if payload.len() != count * 4 {
                return Err(fail(format!(
                    "payload {} bytes, dims {:?} need {}",
                    payload.len(),
                    dims,
                    count * 4
                )));
            }
            let mut data = Vec::with_capacity(count);
            for chunk in payload.chunks_exact(4) {
                data.push(f32::from_le_bytes(chunk.try_into().unwrap()));
            }
            let t = Tensor::new(dims, data)?;
            t.check_finite(&origin.display().to_string())?;
            Ok(PhgtData::F32(t))
        }
        DTYPE_U8 => {
            if rank != 2 {
                return Err(fail(format!("u8 payloads must be rank-2 maps, got rank {rank}")));
            }
            if payload.len() != count {
                return Err(fail(format!(
                    "payload {} bytes, dims {:?} need {}",
                    payload.len(),
                    dims,
                    count
                )));
            }
            Ok(PhgtData::U8(ClassMap::new(dims[0], dims[1], payload.to_vec())?))
        }
        other => Err(fail(format!("unknown dtype {other}"))),
    }
}

/// Write any bytes via temp-file-then-rename in the destination directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp-write");
    {
        let mut f = fs::File::create(&tmp).map_err(|e| PhgError::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| PhgError::io(&tmp, e))?;
        f.sync_all().map_err(|e| PhgError::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| PhgError::io(path, e))?;
    Ok(())
}

/// Write a tensor or class map as a PHGT file.
pub fn write_phgt(path: &Path, data: &PhgtData) -> Result<()> {
    if let PhgtData::F32(t) = data {
        t.check_finite(&path.display().to_string())?;
    }
    write_atomic(path, &to_bytes(data))
}

/// Read any PHGT file.
pub fn read_phgt(path: &Path) -> Result<PhgtData> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| PhgError::io(path, e))?;
    from_bytes(&bytes, path)
}

/// Read a PHGT file that must contain an f32 tensor.
pub fn read_tensor(path: &Path) -> Result<Tensor> {
    match read_phgt(path)? {
        PhgtData::F32(t) => Ok(t),
        PhgtData::U8(_) => Err(PhgError::Format {
            path: path.to_path_buf(),
            reason: "expected f32 tensor, found u8 class map".into(),
        }),
    }
}

/// Read a PHGT file that must contain a u8 class map.
pub fn read_class_map(path: &Path) -> Result<ClassMap> {
    match read_phgt(path)? {
        PhgtData::U8(m) => Ok(m),
        PhgtData::F32(_) => Err(PhgError::Format {
            path: path.to_path_buf(),
            reason: "expected u8 class map, found f32 tensor".into(),
        }),
    }
}

// ── PHGC containers ─────────────────────────────────────────────────────────
//
// A container is a named bag of PHGT payloads plus free-form text entries
// (config echoes, manifests). Checkpoints and persisted candidate sets use
// it. Layout, little-endian throughout:
//
//   0   4   magic "PHGC"
//   4   2   version (currently 1)
//   6   4   entry count
//   ...     entries sorted by name:
//             u16 name length + name bytes (utf-8)
//             u8 kind: 0 = PHGT payload, 1 = utf-8 text
//             u64 payload length + payload bytes
//
// Entries are sorted so the same contents always serialize byte-identically.

pub const PHGC_MAGIC: &[u8; 4] = b"PHGC";
pub const PHGC_VERSION: u16 = 1;

const ENTRY_TENSOR: u8 = 0;
const ENTRY_TEXT: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum ContainerEntry {
    Tensor(PhgtData),
    Text(String),
}

/// Named bag of tensors and text blobs with deterministic serialization.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Container {
    entries: std::collections::BTreeMap<String, ContainerEntry>,
}

impl Container {
    pub fn new() -> Container {
        Container::default()
    }

    pub fn insert_tensor(&mut self, name: &str, data: PhgtData) {
        self.entries.insert(name.to_string(), ContainerEntry::Tensor(data));
    }

    pub fn insert_text(&mut self, name: &str, text: &str) {
        self.entries.insert(name.to_string(), ContainerEntry::Text(text.to_string()));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn get(&self, name: &str) -> Option<&ContainerEntry> {
        self.entries.get(name)
    }

    pub fn tensor(&self, name: &str) -> Option<&PhgtData> {
        match self.entries.get(name) {
            Some(ContainerEntry::Tensor(d)) => Some(d),
            _ => None,
        }
    }

    pub fn text(&self, name: &str) -> Option<&str> {
        match self.entries.get(name) {
            Some(ContainerEntry::Text(t)) => Some(t.as_str()),
            _ => None,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(PHGC_MAGIC);
        out.extend_from_slice(&PHGC_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, entry) in &self.entries {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let (kind, payload) = match entry {
                ContainerEntry::Tensor(d) => (ENTRY_TENSOR, to_bytes(d)),
                ContainerEntry::Text(t) => (ENTRY_TEXT, t.as_bytes().to_vec()),
            };
            out.push(kind);
            out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
            out.extend_from_slice(&payload);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Container> {
        let bad = |reason: String| PhgError::Format { path: origin.to_path_buf(), reason };
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            let slice = bytes
                .get(*pos..*pos + n)
                .ok_or_else(|| bad(format!("truncated at byte {}", *pos)))?;
            *pos += n;
            Ok(slice)
        };
        let mut pos = 0usize;
        if take(&mut pos, 4)? != PHGC_MAGIC {
            return Err(bad("bad magic, not a PHGC container".into()));
        }
        let version = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap());
        if version != PHGC_VERSION {
            return Err(bad(format!("unsupported container version {version}")));
        }
        let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let mut entries = std::collections::BTreeMap::new();
        for _ in 0..count {
            let name_len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(take(&mut pos, name_len)?)
                .map_err(|_| bad("entry name is not utf-8".into()))?
                .to_string();
            let kind = take(&mut pos, 1)?[0];
            let payload_len = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
            let payload = take(&mut pos, payload_len)?;
            let entry = match kind {
                ENTRY_TENSOR => ContainerEntry::Tensor(from_bytes(payload, origin)?),
                ENTRY_TEXT => ContainerEntry::Text(
                    std::str::from_utf8(payload)
                        .map_err(|_| bad(format!("text entry '{name}' is not utf-8")))?
                        .to_string(),
                ),
                other => return Err(bad(format!("unknown entry kind {other}"))),
            };
            if entries.insert(name.clone(), entry).is_some() {
                return Err(bad(format!("duplicate entry '{name}'")));
            }
        }
        if pos != bytes.len() {
            return Err(bad(format!("{} trailing bytes after entries", bytes.len() - pos)));
        }
        Ok(entries.into_iter().collect::<std::collections::BTreeMap<_, _>>().into())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn read(path: &Path) -> Result<Container> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| PhgError::io(path, e))?;
        Container::from_bytes(&bytes, path)
    }
}

impl From<std::collections::BTreeMap<String, ContainerEntry>> for Container {
    fn from(entries: std::collections::BTreeMap<String, ContainerEntry>) -> Container {
        Container { entries }
    }
}
