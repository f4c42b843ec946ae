//! "BWCK" tensor archive shared by the tokenizer and the world model.
//!
//! Layout (little-endian): magic, u32 version, u32 tensor count, then per
//! tensor u16 name length, UTF-8 name, u8 dtype (0 = f32), u8 rank, rank × u32
//! dims and the row-major payload; a CRC32 of everything before it closes the file.

use std::collections::BTreeMap;
use std::path::Path;

use thiserror::Error;

use crate::numerics::{ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"BWCK";
pub const CHECKPOINT_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("not a checkpoint (magic {0:?})")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint truncated: {0}")]
    Truncated(String),
    #[error("checkpoint checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("unsupported dtype code {0}")]
    Dtype(u8),
    #[error("tensor name is not valid UTF-8")]
    Name,
    #[error("tensor name `{0}` longer than 65535 bytes")]
    NameTooLong(String),
    #[error("missing tensor `{0}`")]
    Missing(String),
    #[error("tensor `{name}` has shape {found:?}, expected {expected:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
}

/// Named f32 tensors, ordered by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: BTreeMap<String, Tensor<f32>>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        if self.buf.len() - self.pos < n {
            return Err(CheckpointError::Truncated(format!(
                "{what} at byte {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8, CheckpointError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, t: Tensor<f32>) {
        self.tensors.insert(name.to_string(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<f32>, CheckpointError> {
        self.tensors
            .get(name)
            .ok_or_else(|| CheckpointError::Missing(name.to_string()))
    }

    /// All values of `store`, names prefixed.
    pub fn add_store(&mut self, prefix: &str, store: &ParamStore<f32>) {
        for (k, v) in store.iter() {
            self.tensors.insert(format!("{prefix}{k}"), v.clone());
        }
    }

    /// Overwrite every parameter of `store` from `{prefix}{name}`; shapes must match.
    pub fn load_into(
        &self,
        prefix: &str,
        store: &mut ParamStore<f32>,
    ) -> Result<(), CheckpointError> {
        let names: Vec<String> = store.names().cloned().collect();
        for name in names {
            let full = format!("{prefix}{name}");
            let t = self.get(&full)?;
            let dst = store.value_mut(&name).unwrap();
            if dst.shape() != t.shape() {
                return Err(CheckpointError::Shape {
                    name: full,
                    expected: dst.shape().to_vec(),
                    found: t.shape().to_vec(),
                });
            }
            *dst = t.clone();
        }
        Ok(())
    }

    pub fn encode(&self) -> Result<Vec<u8>, CheckpointError> {
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            let nb = name.as_bytes();
            if nb.len() > u16::MAX as usize {
                return Err(CheckpointError::NameTooLong(name.clone()));
            }
            out.extend_from_slice(&(nb.len() as u16).to_le_bytes());
            out.extend_from_slice(nb);
            out.push(DTYPE_F32);
            out.push(t.rank() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 4 {
            return Err(CheckpointError::Truncated("magic".into()));
        }
        let magic: [u8; 4] = bytes[..4].try_into().unwrap();
        if magic != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic(magic));
        }
        if bytes.len() < 16 {
            return Err(CheckpointError::Truncated("header".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version(version));
        }
        let body = &bytes[..bytes.len() - 4];
        let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(CheckpointError::Checksum { stored, computed });
        }
        let mut r = Reader { buf: body, pos: 8 };
        let count = r.u32("tensor count")?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let len = r.u16("name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| CheckpointError::Name)?
                .to_string();
            let dtype = r.u8("dtype")?;
            if dtype != DTYPE_F32 {
                return Err(CheckpointError::Dtype(dtype));
            }
            let rank = r.u8("rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32("dims")? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = r.take(
                n.checked_mul(4)
                    .ok_or_else(|| CheckpointError::Truncated(name.clone()))?,
                "payload",
            )?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.insert(name, Tensor::from_vec(&shape, data));
        }
        if r.pos != body.len() {
            return Err(CheckpointError::Truncated(format!(
                "{} trailing bytes",
                body.len() - r.pos
            )));
        }
        Ok(Checkpoint { tensors })
    }

    /// Written to a temporary sibling and renamed, so readers never see a partial file.
    pub fn write(&self, path: &Path) -> Result<(), CheckpointError> {
        let bytes = self.encode()?;
        write_atomic(path, &bytes).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn read(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::decode(&bytes)
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new();
        c.insert(
            "a.w",
            Tensor::from_vec(
                &[2, 3],
                vec![1.0, -2.5, 3.25, f32::MIN_POSITIVE, -0.0, 7e30],
            ),
        );
        c.insert("scalar", Tensor::scalar(0.1));
        c.insert("empty", Tensor::from_vec(&[0, 4], vec![]));
        c
    }

    #[test]
    fn round_trip_bitwise() {
        let c = sample();
        let bytes = c.encode().unwrap();
        let d = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(d.tensors.len(), 3);
        for (k, t) in &c.tensors {
            let u = &d.tensors[k];
            assert_eq!(t.shape(), u.shape());
            assert!(t
                .data()
                .iter()
                .zip(u.data())
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(d.encode().unwrap(), bytes);
    }

    #[test]
    fn header_layout() {
        let mut c = Checkpoint::new();
        c.insert("x", Tensor::from_vec(&[2], vec![1.0, 2.0]));
        let b = c.encode().unwrap();
        assert_eq!(&b[..4], b"BWCK");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 1);
        assert_eq!(u16::from_le_bytes(b[12..14].try_into().unwrap()), 1);
        assert_eq!(b[14], b'x');
        assert_eq!(&b[15..17], &[0, 1]);
        assert_eq!(u32::from_le_bytes(b[17..21].try_into().unwrap()), 2);
        assert_eq!(f32::from_le_bytes(b[21..25].try_into().unwrap()), 1.0);
        assert_eq!(b.len(), 29 + 4);
    }

    #[test]
    fn corruption_detected() {
        let bytes = sample().encode().unwrap();
        for i in [9, 20, bytes.len() / 2, bytes.len() - 5, bytes.len() - 1] {
            let mut b = bytes.clone();
            b[i] ^= 0x10;
            assert!(
                matches!(
                    Checkpoint::decode(&b),
                    Err(CheckpointError::Checksum { .. })
                ),
                "byte {i}"
            );
        }
        let mut b = bytes.clone();
        b[0] = b'X';
        assert!(matches!(
            Checkpoint::decode(&b),
            Err(CheckpointError::BadMagic(_))
        ));
        assert!(Checkpoint::decode(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn store_round_trip() {
        let mut s = ParamStore::<f32>::new();
        s.init(3, "l.w", &[4, 5], crate::numerics::Init::TruncNormal(0.02));
        s.init(3, "l.b", &[5], crate::numerics::Init::Zeros);
        let mut c = Checkpoint::new();
        c.add_store("m.", &s);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.bwck");
        c.write(&p).unwrap();
        let mut t = ParamStore::<f32>::new();
        t.init(9, "l.w", &[4, 5], crate::numerics::Init::Zeros);
        t.init(9, "l.b", &[5], crate::numerics::Init::Ones);
        Checkpoint::read(&p)
            .unwrap()
            .load_into("m.", &mut t)
            .unwrap();
        assert!(s.values_equal(&t));
        let mut bad = ParamStore::<f32>::new();
        bad.init(0, "l.w", &[5, 4], crate::numerics::Init::Zeros);
        assert!(matches!(
            c.load_into("m.", &mut bad),
            Err(CheckpointError::Shape { .. })
        ));
    }
}
