//! Little-endian encoding helpers and the checksum trailer shared by the binary formats.
//!
//! Sealed files end with a trailer that lets a reader locate a corrupted byte:
//!
//! ```text
//! body
//! n_chunks x 8 bytes   truncated SHA-256 of each CHUNK_SIZE slice of the body
//! 32 bytes             SHA-256 of the whole body
//! u32                  chunk size
//! u32                  n_chunks
//! 8 bytes              "BKNNSUM\0"
//! ```

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const CHUNK_SIZE: usize = 4096;
pub const TRAILER_MAGIC: &[u8; 8] = b"BKNNSUM\0";
const TRAILER_FIXED: usize = 32 + 4 + 4 + 8;

#[derive(Debug, Default)]
pub(crate) struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u16(&mut self, v: u16) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn f32(&mut self, v: f32) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn f32s(&mut self, vs: &[f32]) {
        self.buf.reserve(vs.len() * 4);
        for v in vs {
            self.f32(*v);
        }
    }

    pub fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.bytes(s.as_bytes());
    }

    pub fn into_inner(self) -> Vec<u8> {
        self.buf
    }
}

/// Cursor over a byte slice whose errors carry the absolute offset of the failure.
pub(crate) struct ByteReader<'a> {
    what: &'a str,
    data: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(what: &'a str, data: &'a [u8]) -> Self {
        Self { what, data, pos: 0 }
    }

    pub fn pos(&self) -> u64 {
        self.pos as u64
    }

    pub fn remaining(&self) -> usize {
        self.data.len() - self.pos
    }

    pub fn error(&self, detail: impl Into<String>) -> Error {
        Error::format(self.what, self.pos as u64, detail)
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(self.error(format!(
                "truncated: need {n} bytes, {} left",
                self.remaining()
            )));
        }
        let out = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("slice length checked"))
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    /// Length-checked count used to size an allocation: `count * elem_size` must fit.
    pub fn count(&mut self, elem_size: usize) -> Result<usize> {
        let at = self.pos;
        let n = self.u64()? as usize;
        if n.saturating_mul(elem_size.max(1)) > self.remaining() {
            return Err(Error::format(
                self.what,
                at as u64,
                format!("count {n} exceeds remaining {} bytes", self.remaining()),
            ));
        }
        Ok(n)
    }

    pub fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n * 4)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn str(&mut self) -> Result<String> {
        let at = self.pos;
        let len = self.u32()? as usize;
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec())
            .map_err(|_| Error::format(self.what, at as u64, "invalid utf-8 string"))
    }

    pub fn expect(&mut self, magic: &[u8]) -> Result<()> {
        let at = self.pos;
        let got = self.take(magic.len())?;
        if got != magic {
            return Err(Error::format(self.what, at as u64, "bad magic"));
        }
        Ok(())
    }

    pub fn finish(&self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(self.error(format!("{} trailing bytes", self.remaining())));
        }
        Ok(())
    }
}

pub fn sha256(data: &[u8]) -> [u8; 32] {
    Sha256::digest(data).into()
}

pub fn sha256_hex(data: &[u8]) -> String {
    hex::encode(sha256(data))
}

pub(crate) fn chunk_digest(chunk: &[u8]) -> [u8; 8] {
    sha256(chunk)[..8].try_into().unwrap()
}

/// Append the checksum trailer to `body`.
pub fn seal(mut body: Vec<u8>) -> Vec<u8> {
    let digests: Vec<[u8; 8]> = body.chunks(CHUNK_SIZE).map(chunk_digest).collect();
    let whole = sha256(&body);
    for d in &digests {
        body.extend_from_slice(d);
    }
    body.extend_from_slice(&whole);
    body.extend_from_slice(&(CHUNK_SIZE as u32).to_le_bytes());
    body.extend_from_slice(&(digests.len() as u32).to_le_bytes());
    body.extend_from_slice(TRAILER_MAGIC);
    body
}

/// Verify a sealed buffer and return its body.
///
/// Any single corrupted byte is reported with the byte range that failed to verify.
pub fn unseal<'a>(what: &str, data: &'a [u8]) -> Result<&'a [u8]> {
    let len = data.len();
    if len < TRAILER_FIXED {
        return Err(Error::format(
            what,
            len as u64,
            "truncated checksum trailer",
        ));
    }
    if &data[len - 8..] != TRAILER_MAGIC {
        return Err(Error::format(
            what,
            (len - 8) as u64,
            "bad checksum trailer magic",
        ));
    }
    let chunk_size = u32::from_le_bytes(data[len - 16..len - 12].try_into().unwrap()) as usize;
    let n_chunks = u32::from_le_bytes(data[len - 12..len - 8].try_into().unwrap()) as usize;
    let digests_len = n_chunks.saturating_mul(8);
    let body_len = len
        .checked_sub(TRAILER_FIXED)
        .and_then(|l| l.checked_sub(digests_len));
    let consistent =
        chunk_size == CHUNK_SIZE && body_len.is_some_and(|b| b.div_ceil(chunk_size) == n_chunks);
    let Some(body_len) = body_len.filter(|_| consistent) else {
        return Err(Error::format(
            what,
            (len - 16) as u64,
            "checksum trailer header is inconsistent with file length",
        ));
    };
    let body = &data[..body_len];
    let digests = &data[body_len..body_len + digests_len];
    let whole_at = body_len + digests_len;
    let whole_ok = sha256(body)[..] == data[whole_at..whole_at + 32];

    for (i, chunk) in body.chunks(chunk_size).enumerate() {
        if chunk_digest(chunk)[..] != digests[i * 8..i * 8 + 8] {
            let (start, end) = if whole_ok {
                // Body intact: the stored digest itself was damaged.
                (body_len + i * 8, body_len + i * 8 + 8)
            } else {
                (i * chunk_size, i * chunk_size + chunk.len())
            };
            return Err(Error::Checksum {
                what: what.to_string(),
                start: start as u64,
                end: end as u64,
            });
        }
    }
    if !whole_ok {
        return Err(Error::Checksum {
            what: what.to_string(),
            start: whole_at as u64,
            end: (whole_at + 32) as u64,
        });
    }
    Ok(body)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn seal_round_trip() {
        let body: Vec<u8> = (0..10_000u32).map(|i| (i * 7 % 251) as u8).collect();
        let sealed = seal(body.clone());
        assert_eq!(unseal("t", &sealed).unwrap(), &body[..]);
        assert_eq!(unseal("t", &seal(Vec::new())).unwrap(), &[] as &[u8]);
    }

    #[test]
    fn reader_reports_offsets() {
        let mut w = ByteWriter::new();
        w.u32(7);
        w.str("abc");
        let data = w.into_inner();
        let mut r = ByteReader::new("t", &data);
        assert_eq!(r.u32().unwrap(), 7);
        assert_eq!(r.str().unwrap(), "abc");
        match r.u8() {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 11),
            other => panic!("unexpected {other:?}"),
        }
    }

    proptest! {
        #[test]
        fn any_flipped_byte_is_located(len in 0usize..20_000, seed in any::<u64>(), flip in 1u8..=255) {
            let body: Vec<u8> = (0..len).map(|i| (i as u64 ^ seed).wrapping_mul(31) as u8).collect();
            let mut sealed = seal(body);
            let at = (seed % sealed.len() as u64) as usize;
            sealed[at] ^= flip;
            match unseal("t", &sealed) {
                Err(Error::Checksum { start, end, .. }) => {
                    prop_assert!(start as usize <= at && at < end as usize);
                }
                Err(Error::Format { .. }) => prop_assert!(at >= sealed.len() - 16),
                other => prop_assert!(false, "corruption at {} undetected: {:?}", at, other.map(|b| b.len())),
            }
        }
    }
}
