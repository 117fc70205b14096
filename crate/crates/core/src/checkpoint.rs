//! Versioned binary parameter files.
//!
//! Layout (little-endian):
//!
//! ```text
//! b"DIFFPOCK" | u32 version | u32 header_len | u32 header_crc | header JSON
//! u64 value_count | f64 * value_count | u32 payload_crc
//! ```
//!
//! The header is `{"meta": <caller JSON>, "shapes": [[..], ..]}`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::numcore::Tensor;

const MAGIC: &[u8; 8] = b"DIFFPOCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    meta: Value,
    shapes: Vec<Vec<usize>>,
}

/// Metadata plus an ordered list of parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: Value,
    pub tensors: Vec<Tensor>,
}

impl Checkpoint {
    pub fn new(meta: Value, tensors: Vec<Tensor>) -> Self {
        Self { meta, tensors }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            meta: self.meta.clone(),
            shapes: self.tensors.iter().map(|t| t.shape().to_vec()).collect(),
        };
        let header = serde_json::to_vec(&header).map_err(|e| Error::Serialization(e.to_string()))?;
        let count: usize = self.tensors.iter().map(Tensor::len).sum();

        let mut out = Vec::with_capacity(32 + header.len() + 8 * count);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&crc32fast::hash(&header).to_le_bytes());
        out.extend_from_slice(&header);

        let payload_start = out.len();
        out.extend_from_slice(&(count as u64).to_le_bytes());
        for t in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out[payload_start..]);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Integrity("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Integrity(format!("unsupported checkpoint version {version}")));
        }
        let header_len = r.u32()? as usize;
        let header_crc = r.u32()?;
        let header_bytes = r.take(header_len)?;
        if crc32fast::hash(header_bytes) != header_crc {
            return Err(Error::Integrity("header checksum mismatch".into()));
        }
        let header: Header = serde_json::from_slice(header_bytes)
            .map_err(|e| Error::Integrity(format!("header is not valid JSON: {e}")))?;

        let payload_start = r.pos;
        let count = r.u64()? as usize;
        let expected: usize = header.shapes.iter().map(|s| s.iter().product::<usize>()).sum();
        if count != expected {
            return Err(Error::Integrity(format!(
                "payload holds {count} values, header shapes need {expected}"
            )));
        }
        let raw = r.take(
            count
                .checked_mul(8)
                .ok_or_else(|| Error::Integrity("payload length overflows".into()))?,
        )?;
        let payload_end = r.pos;
        let crc = r.u32()?;
        if crc32fast::hash(&bytes[payload_start..payload_end]) != crc {
            return Err(Error::Integrity("payload checksum mismatch".into()));
        }
        if r.pos != bytes.len() {
            return Err(Error::Integrity("trailing bytes after payload".into()));
        }

        let mut values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
        let mut tensors = Vec::with_capacity(header.shapes.len());
        for shape in header.shapes {
            let n = shape.iter().product();
            let data: Vec<f64> = values.by_ref().take(n).collect();
            tensors.push(Tensor::new(shape, data).map_err(|e| Error::Integrity(e.to_string()))?);
        }
        Ok(Self {
            meta: header.meta,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Integrity("checkpoint truncated".into()))?;
        let s = &self.bytes[self.pos..end];
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

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn sample() -> Checkpoint {
        Checkpoint::new(
            json!({"kind": "test", "steps": 3}),
            vec![
                Tensor::matrix(2, 2, vec![1.0, -2.0, 3.5, 0.25]).unwrap(),
                Tensor::vector(vec![f64::MIN_POSITIVE, 1e300]).unwrap(),
            ],
        )
    }

    #[test]
    fn round_trip_is_exact() {
        let c = sample();
        assert_eq!(Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap(), c);
    }

    #[test]
    fn header_corruption_detected() {
        let mut b = sample().to_bytes().unwrap();
        b[22] ^= 0x01;
        let err = Checkpoint::from_bytes(&b).unwrap_err();
        assert!(matches!(err, Error::Integrity(ref m) if m.contains("header")), "{err}");
    }

    #[test]
    fn payload_corruption_detected() {
        let mut b = sample().to_bytes().unwrap();
        let n = b.len();
        b[n - 10] ^= 0x80;
        assert!(matches!(Checkpoint::from_bytes(&b), Err(Error::Integrity(_))));
    }

    #[test]
    fn truncation_detected() {
        let b = sample().to_bytes().unwrap();
        for cut in [0, 7, 15, 30, b.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&b[..cut]), Err(Error::Integrity(_))));
        }
    }
}
