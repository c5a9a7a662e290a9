//! Little-endian binary tensor container shared by every checkpoint and
//! activation dump.
//!
//! ```text
//! magic    b"XMPT"
//! version  u32                      (currently 1)
//! kind     u32 length + UTF-8       e.g. "lm", "vit", "sae", "adapter", "acts"
//! config   u32 length + UTF-8 JSON
//! count    u32
//! tensor*  u32 name length + UTF-8 name
//!          u32 rank, rank × u32 dims
//!          prod(dims) × f32
//! trailer  32-byte SHA-256 of every preceding byte
//! ```
//!
//! The trailer doubles as the content checksum of the file.

use std::fs;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::params::ParamStore;
use crate::NnError;

pub const MAGIC: &[u8; 4] = b"XMPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorFile {
    pub kind: String,
    pub config: String,
    pub tensors: Vec<NamedTensor>,
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    put_u32(buf, s.len() as u32);
    buf.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NnError> {
        if self.pos + n > self.buf.len() {
            return Err(NnError::Format("unexpected end of file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, NnError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String, NnError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| NnError::Format("invalid UTF-8".into()))
    }
}

/// Hex SHA-256 of arbitrary bytes.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl TensorFile {
    pub fn new(kind: impl Into<String>, config: impl Into<String>) -> Self {
        Self { kind: kind.into(), config: config.into(), tensors: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<f32>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.tensors.push(NamedTensor { name: name.into(), shape: shape.to_vec(), data });
    }

    pub fn from_store(kind: &str, config: &str, store: &ParamStore<f32>) -> Self {
        let mut f = Self::new(kind, config);
        for (name, shape, data) in store.tensors() {
            f.push(name, shape, data.to_vec());
        }
        f
    }

    /// Copies every tensor into `store`; the name sets must match exactly.
    pub fn load_into(&self, store: &mut ParamStore<f32>) -> Result<(), NnError> {
        if self.tensors.len() != store.num_tensors() {
            return Err(NnError::Format(format!(
                "expected {} tensors, found {}",
                store.num_tensors(),
                self.tensors.len()
            )));
        }
        for t in &self.tensors {
            store.load(&t.name, &t.shape, &t.data)?;
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Serialised body without the trailing hash.
    fn body(&self) -> Vec<u8> {
        let payload: usize = self.tensors.iter().map(|t| t.data.len() * 4 + t.name.len() + 8 + 4 * t.shape.len()).sum();
        let mut buf = Vec::with_capacity(64 + self.config.len() + payload);
        buf.extend_from_slice(MAGIC);
        put_u32(&mut buf, VERSION);
        put_str(&mut buf, &self.kind);
        put_str(&mut buf, &self.config);
        put_u32(&mut buf, self.tensors.len() as u32);
        for t in &self.tensors {
            put_str(&mut buf, &t.name);
            put_u32(&mut buf, t.shape.len() as u32);
            for d in &t.shape {
                put_u32(&mut buf, *d as u32);
            }
            for v in &t.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = self.body();
        let digest = Sha256::digest(&buf);
        buf.extend_from_slice(&digest);
        buf
    }

    /// Hex SHA-256 content hash, identical to the file trailer.
    pub fn checksum(&self) -> String {
        sha256_hex(&self.body())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NnError> {
        if bytes.len() < 4 + 4 + 32 {
            return Err(NnError::Format("file too short".into()));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 32);
        let digest = Sha256::digest(body);
        if digest.as_slice() != trailer {
            return Err(NnError::Checksum { expected: hex::encode(trailer), found: hex::encode(digest) });
        }
        let mut r = Reader { buf: body, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(NnError::Format("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(NnError::Format(format!("unsupported version {version}")));
        }
        let kind = r.string()?;
        let config = r.string()?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n * 4)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            tensors.push(NamedTensor { name, shape, data });
        }
        if r.pos != body.len() {
            return Err(NnError::Format("trailing bytes before hash".into()));
        }
        Ok(Self { kind, config, tensors })
    }

    pub fn write(&self, path: &Path) -> Result<String, NnError> {
        let bytes = self.to_bytes();
        let mut f = fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(hex::encode(&bytes[bytes.len() - 32..]))
    }

    pub fn read(path: &Path) -> Result<Self, NnError> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Reads a file and checks its kind tag.
    pub fn read_kind(path: &Path, kind: &str) -> Result<Self, NnError> {
        let f = Self::read(path)?;
        if f.kind != kind {
            return Err(NnError::Format(format!("{}: expected `{kind}` file, found `{}`", path.display(), f.kind)));
        }
        Ok(f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> TensorFile {
        let mut f = TensorFile::new("test", r#"{"a":1}"#);
        f.push("w", &[2, 3], vec![1.0, -2.0, 3.5, 0.0, f32::MIN_POSITIVE, 7.25]);
        f.push("b", &[3], vec![0.5, 0.25, 0.125]);
        f
    }

    #[test]
    fn layout_is_little_endian_with_trailer() {
        let bytes = sample().to_bytes();
        assert_eq!(&bytes[..4], b"XMPT");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 4);
        assert_eq!(&bytes[12..16], b"test");
        let body = &bytes[..bytes.len() - 32];
        assert_eq!(&bytes[bytes.len() - 32..], Sha256::digest(body).as_slice());
        assert_eq!(sample().checksum(), hex::encode(&bytes[bytes.len() - 32..]));
    }

    #[test]
    fn corruption_detected() {
        let mut bytes = sample().to_bytes();
        bytes[30] ^= 1;
        assert!(matches!(TensorFile::from_bytes(&bytes), Err(NnError::Checksum { .. })));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.bin");
        let sum = sample().write(&p).unwrap();
        let back = TensorFile::read_kind(&p, "test").unwrap();
        assert_eq!(back, sample());
        assert_eq!(back.checksum(), sum);
        assert!(TensorFile::read_kind(&p, "lm").is_err());
    }

    proptest! {
        #[test]
        fn round_trip(data in proptest::collection::vec(-1e6f32..1e6, 0..64), cfg in "[a-z{}:\"0-9]{0,20}") {
            let mut f = TensorFile::new("k", cfg);
            let n = data.len();
            f.push("t", &[n], data);
            let back = TensorFile::from_bytes(&f.to_bytes()).unwrap();
            prop_assert_eq!(back, f);
        }
    }
}
