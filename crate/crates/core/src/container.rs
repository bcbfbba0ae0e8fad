//! Versioned binary container used for checkpoints and dataset caches.
//!
//! Layout (little endian):
//!
//! ```text
//! magic "SEMCOMC\0" | u32 format version | u32 kind len | kind utf-8
//! | u64 header len | header json | u64 body len | body | sha256 of all preceding bytes
//! ```

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"SEMCOMC\0";

#[derive(Debug, Clone)]
pub struct Container<H> {
    pub kind: String,
    pub version: u32,
    pub header: H,
    pub body: Vec<u8>,
}

fn put_len(out: &mut Vec<u8>, n: u64) {
    out.extend_from_slice(&n.to_le_bytes());
}

pub fn encode<H: Serialize>(kind: &str, version: u32, header: &H, body: &[u8]) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(header)?;
    let mut out = Vec::with_capacity(64 + header.len() + body.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&version.to_le_bytes());
    out.extend_from_slice(&(kind.len() as u32).to_le_bytes());
    out.extend_from_slice(kind.as_bytes());
    put_len(&mut out, header.len() as u64);
    out.extend_from_slice(&header);
    put_len(&mut out, body.len() as u64);
    out.extend_from_slice(body);
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format("truncated container".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode<H: DeserializeOwned>(bytes: &[u8], expected_kind: &str, max_version: u32) -> Result<Container<H>> {
    if bytes.len() < MAGIC.len() + 32 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Format("not a semcom container".into()));
    }
    let (payload, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(payload).as_slice() != digest {
        return Err(Error::Format("container checksum mismatch".into()));
    }
    let mut r = Reader {
        buf: payload,
        pos: MAGIC.len(),
    };
    let version = r.u32()?;
    if version > max_version {
        return Err(Error::Format(format!(
            "container version {version} is newer than supported {max_version}"
        )));
    }
    let kind_len = r.u32()? as usize;
    let kind = String::from_utf8(r.take(kind_len)?.to_vec())
        .map_err(|_| Error::Format("kind is not utf-8".into()))?;
    if kind != expected_kind {
        return Err(Error::Format(format!(
            "expected a {expected_kind} container, found {kind}"
        )));
    }
    let header_len = r.u64()? as usize;
    let header = serde_json::from_slice(r.take(header_len)?)?;
    let body_len = r.u64()? as usize;
    let body = r.take(body_len)?.to_vec();
    Ok(Container {
        kind,
        version,
        header,
        body,
    })
}

pub fn write<H: Serialize>(path: &Path, kind: &str, version: u32, header: &H, body: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(path, encode(kind, version, header, body)?)?;
    Ok(())
}

pub fn read<H: DeserializeOwned>(path: &Path, expected_kind: &str, max_version: u32) -> Result<Container<H>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    decode(&fs::read(path)?, expected_kind, max_version)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_corruption() {
        let bytes = encode("demo", 3, &serde_json::json!({"a": 1}), &[1, 2, 3]).unwrap();
        let c: Container<serde_json::Value> = decode(&bytes, "demo", 3).unwrap();
        assert_eq!(c.header["a"], 1);
        assert_eq!(c.body, vec![1, 2, 3]);
        assert!(decode::<serde_json::Value>(&bytes, "other", 3).is_err());
        assert!(decode::<serde_json::Value>(&bytes, "demo", 2).is_err());
        let mut bad = bytes.clone();
        bad[20] ^= 1;
        assert!(decode::<serde_json::Value>(&bad, "demo", 3).is_err());
        assert!(decode::<serde_json::Value>(&bytes[..bytes.len() - 5], "demo", 3).is_err());
    }
}
