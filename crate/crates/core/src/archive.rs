//! Length-prefixed JSON manifest followed by concatenated tensor blobs.
//!
//! Layout: `"IENA"`, version (u32 LE), manifest length (u64 LE), manifest
//! JSON, then the blobs. Entry offsets are relative to the first blob byte
//! and must tile the blob section exactly. Each entry carries the SHA-256
//! of its blob.

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{ByteReader, Element, Tensor, BLOB_MAGIC};

const ARCHIVE_MAGIC: &[u8; 4] = b"IENA";
const ARCHIVE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlobEntry {
    pub name: String,
    pub offset: u64,
    pub len: u64,
    pub sha256: String,
}

fn digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Serialize, Deserialize)]
struct Manifest<H> {
    kind: String,
    header: H,
    entries: Vec<BlobEntry>,
}

/// Blobs in write order, keyed by name.
#[derive(Default)]
pub struct BlobWriter {
    entries: Vec<BlobEntry>,
    payload: Vec<u8>,
}

impl BlobWriter {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a tensor and returns its offset within the blob section.
    pub fn push<T: Element>(&mut self, name: impl Into<String>, tensor: &Tensor<T>) -> u64 {
        let blob = tensor.to_blob();
        let offset = self.payload.len() as u64;
        self.entries.push(BlobEntry {
            name: name.into(),
            offset,
            len: blob.len() as u64,
            sha256: digest(&blob),
        });
        self.payload.extend_from_slice(&blob);
        offset
    }

    pub fn finish<H: Serialize>(self, kind: &str, header: &H) -> Result<Vec<u8>> {
        let manifest = Manifest { kind: kind.to_string(), header, entries: self.entries };
        let json = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(16 + json.len() + self.payload.len());
        out.extend_from_slice(ARCHIVE_MAGIC);
        out.extend_from_slice(&ARCHIVE_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&self.payload);
        Ok(out)
    }
}

/// A parsed archive whose blob section has been validated against the manifest.
pub struct ArchiveReader<'a, H> {
    pub header: H,
    entries: Vec<BlobEntry>,
    payload: &'a [u8],
}

impl<'a, H: DeserializeOwned> ArchiveReader<'a, H> {
    pub fn parse(bytes: &'a [u8], kind: &str) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(4)? != ARCHIVE_MAGIC {
            return Err(Error::CorruptArchive("bad archive magic".into()));
        }
        let version = r.u32()?;
        if version != ARCHIVE_VERSION {
            return Err(Error::CorruptArchive(format!("unsupported archive version {version}")));
        }
        let len = usize::try_from(r.u64()?)
            .map_err(|_| Error::CorruptArchive("manifest length overflow".into()))?;
        let json = r.take(len)?;
        let manifest: Manifest<H> = serde_json::from_slice(json)
            .map_err(|e| Error::CorruptArchive(format!("manifest: {e}")))?;
        if manifest.kind != kind {
            return Err(Error::CorruptArchive(format!(
                "archive holds a {}, expected a {kind}",
                manifest.kind
            )));
        }
        let payload = r.rest();
        let mut expected = 0u64;
        for e in &manifest.entries {
            if e.offset != expected {
                return Err(Error::CorruptArchive(format!(
                    "blob {} at offset {}, expected {expected}",
                    e.name, e.offset
                )));
            }
            expected = e
                .offset
                .checked_add(e.len)
                .ok_or_else(|| Error::CorruptArchive("blob length overflow".into()))?;
            if expected > payload.len() as u64 {
                return Err(Error::CorruptArchive(format!("blob {} truncated", e.name)));
            }
            let blob = &payload[e.offset as usize..expected as usize];
            if blob.get(..4) != Some(BLOB_MAGIC) {
                return Err(Error::CorruptArchive(format!("blob {} has bad magic", e.name)));
            }
            if digest(blob) != e.sha256 {
                return Err(Error::CorruptArchive(format!("blob {} fails its checksum", e.name)));
            }
        }
        if expected != payload.len() as u64 {
            return Err(Error::CorruptArchive(format!(
                "{} trailing bytes after last blob",
                payload.len() as u64 - expected
            )));
        }
        Ok(ArchiveReader { header: manifest.header, entries: manifest.entries, payload })
    }

    pub fn entries(&self) -> &[BlobEntry] {
        &self.entries
    }

    pub fn tensor<T: Element>(&self, index: usize) -> Result<Tensor<T>> {
        let e = self
            .entries
            .get(index)
            .ok_or_else(|| Error::CorruptArchive(format!("missing blob {index}")))?;
        Tensor::from_blob(&self.payload[e.offset as usize..(e.offset + e.len) as usize])
    }
}
