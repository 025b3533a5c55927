//! Binary envelope shared by checkpoints and indexes.
//!
//! Layout, all integers little-endian:
//! magic (8 bytes) | version u32 | endianness tag u32 | header length u64 |
//! header JSON | payload length u64 | payload | SHA-256 of everything before it.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const ENDIAN_TAG: u32 = 0x0102_0304;
const DIGEST_LEN: usize = 32;

pub(crate) struct Envelope {
    pub header: Vec<u8>,
    pub payload: Vec<u8>,
}

pub(crate) fn encode(magic: &[u8; 8], version: u32, header: &[u8], payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 + 4 + 8 + header.len() + 8 + payload.len() + DIGEST_LEN);
    out.extend_from_slice(magic);
    out.extend_from_slice(&version.to_le_bytes());
    out.extend_from_slice(&ENDIAN_TAG.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(header);
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(payload);
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

pub(crate) fn decode(bytes: &[u8], magic: &[u8; 8], version: u32, what: &'static str) -> Result<Envelope> {
    if bytes.len() < 8 || &bytes[..8] != magic {
        return Err(Error::Corrupt(format!("{what}: bad magic number")));
    }
    if bytes.len() < 8 + 4 + 4 + 8 + 8 + DIGEST_LEN {
        return Err(Error::Checksum(format!("{what} is truncated ({} bytes)", bytes.len())));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Checksum(format!("{what} checksum mismatch")));
    }
    let mut cur = Cursor { buf: body, pos: 8 };
    let found = cur.u32()?;
    if found != version {
        return Err(Error::Version {
            what,
            found,
            expected: version,
        });
    }
    if cur.u32()? != ENDIAN_TAG {
        return Err(Error::Corrupt(format!("{what}: unexpected byte order")));
    }
    let header_len = cur.u64()? as usize;
    let header = cur.take(header_len)?.to_vec();
    let payload_len = cur.u64()? as usize;
    let payload = cur.take(payload_len)?.to_vec();
    if cur.pos != body.len() {
        return Err(Error::Corrupt(format!("{what}: trailing bytes")));
    }
    Ok(Envelope { header, payload })
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Corrupt("length field runs past the end".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub(crate) fn f32_bytes(values: impl IntoIterator<Item = f32>, out: &mut Vec<u8>) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub(crate) fn read_f32s(payload: &[u8], offset: usize, count: usize) -> Result<Vec<f32>> {
    let start = offset * 4;
    let end = start + count * 4;
    if end > payload.len() {
        return Err(Error::Corrupt(format!("tensor range {offset}+{count} outside payload")));
    }
    Ok(payload[start..end]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect())
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("partial");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    const MAGIC: &[u8; 8] = b"TESTENV\0";

    #[test]
    fn round_trip_and_failures() {
        let bytes = encode(MAGIC, 3, b"{\"a\":1}", &[1, 2, 3]);
        let env = decode(&bytes, MAGIC, 3, "test").unwrap();
        assert_eq!(env.header, b"{\"a\":1}");
        assert_eq!(env.payload, vec![1, 2, 3]);

        assert!(matches!(
            decode(&bytes[..bytes.len() - 5], MAGIC, 3, "test"),
            Err(Error::Checksum(_))
        ));
        assert!(matches!(
            decode(&bytes[..20], MAGIC, 3, "test"),
            Err(Error::Checksum(_))
        ));
        assert!(matches!(
            decode(&bytes, MAGIC, 4, "test"),
            Err(Error::Version { found: 3, .. })
        ));
        assert!(matches!(decode(&bytes, b"OTHERENV", 3, "test"), Err(Error::Corrupt(_))));
        let mut flipped = bytes.clone();
        flipped[30] ^= 1;
        assert!(matches!(decode(&flipped, MAGIC, 3, "test"), Err(Error::Checksum(_))));
    }

    #[test]
    fn f32_round_trip() {
        let mut buf = Vec::new();
        f32_bytes([1.5f32, -0.25, f32::MIN_POSITIVE], &mut buf);
        assert_eq!(read_f32s(&buf, 1, 2).unwrap(), vec![-0.25, f32::MIN_POSITIVE]);
        assert!(read_f32s(&buf, 2, 2).is_err());
    }
}
