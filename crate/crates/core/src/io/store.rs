//! Binary embedding store.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "XMRV"  u16 version  u32 dim  u64 count
//! count × ( u32 id_len  id_len bytes UTF-8  dim × f32 )
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{read_bytes, write_atomic, Reader};
use crate::math::Vec64;

pub const STORE_MAGIC: &[u8; 4] = b"XMRV";
pub const STORE_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    dim: usize,
    records: Vec<(String, Vec<f32>)>,
}

impl EmbeddingStore {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 || dim > u32::MAX as usize {
            return Err(Error::InvalidInput(format!("embedding dim {dim} out of range")));
        }
        Ok(EmbeddingStore {
            dim,
            records: Vec::new(),
        })
    }

    /// Narrows each vector to f32.
    pub fn from_f64(dim: usize, embeddings: &[(String, Vec64)]) -> Result<Self> {
        let mut store = EmbeddingStore::new(dim)?;
        for (id, v) in embeddings {
            store.push(id.clone(), v.as_slice().iter().map(|&x| x as f32).collect())?;
        }
        Ok(store)
    }

    pub fn push(&mut self, id: String, vector: Vec<f32>) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::dim(self.dim, vector.len(), "embedding store record"));
        }
        if id.len() > u32::MAX as usize {
            return Err(Error::InvalidInput("embedding id longer than u32::MAX bytes".into()));
        }
        self.records.push((id, vector));
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[(String, Vec<f32>)] {
        &self.records
    }

    /// Widens back to f64. Fails on non-finite values.
    pub fn to_f64(&self) -> Result<Vec<(String, Vec64)>> {
        self.records
            .iter()
            .map(|(id, v)| Ok((id.clone(), Vec64::new(v.iter().map(|&x| x as f64).collect())?)))
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let body: usize = self.records.iter().map(|(id, _)| 4 + id.len() + 4 * self.dim).sum();
        let mut out = Vec::with_capacity(18 + body);
        out.extend_from_slice(STORE_MAGIC);
        out.extend_from_slice(&STORE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u64).to_le_bytes());
        for (id, v) in &self.records {
            out.extend_from_slice(&(id.len() as u32).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    /// Parses a store; `path` is only used in error messages.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader::new(bytes, path);
        if bytes.len() < 4 || &bytes[..4] != STORE_MAGIC {
            return Err(Error::BadMagic {
                path: path.to_path_buf(),
                expected: "XMRV",
            });
        }
        r.take(4)?;
        let version = r.u16()?;
        if version != STORE_VERSION {
            return Err(Error::BadVersion {
                path: path.to_path_buf(),
                found: version,
                expected: STORE_VERSION,
            });
        }
        let dim = r.u32()? as usize;
        let count = r.u64()?;
        if dim == 0 {
            return Err(r.malformed("embedding dim is 0".into()));
        }
        // Each record needs at least its length prefix and vector.
        let min_record = 4 + 4 * dim as u64;
        if count.saturating_mul(min_record) > r.remaining() as u64 {
            return Err(r.malformed(format!(
                "header declares {count} records but only {} body bytes follow",
                r.remaining()
            )));
        }
        let mut store = EmbeddingStore::new(dim)?;
        for i in 0..count {
            let len = r.u32()? as usize;
            let id = std::str::from_utf8(r.take(len)?)
                .map_err(|e| r.malformed(format!("record {i}: id is not UTF-8: {e}")))?
                .to_string();
            let vector = r
                .take(4 * dim)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            store.records.push((id, vector));
        }
        r.finish()?;
        Ok(store)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        EmbeddingStore::from_bytes(&read_bytes(path)?, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn bits(s: &EmbeddingStore) -> Vec<(String, Vec<u32>)> {
        s.records()
            .iter()
            .map(|(id, v)| (id.clone(), v.iter().map(|x| x.to_bits()).collect()))
            .collect()
    }

    #[test]
    fn byte_layout() {
        let mut s = EmbeddingStore::new(2).unwrap();
        s.push("ab".into(), vec![1.0, -2.0]).unwrap();
        let mut want = b"XMRV".to_vec();
        want.extend([1, 0]);
        want.extend([2, 0, 0, 0]);
        want.extend([1, 0, 0, 0, 0, 0, 0, 0]);
        want.extend([2, 0, 0, 0, b'a', b'b']);
        want.extend(1.0f32.to_le_bytes());
        want.extend((-2.0f32).to_le_bytes());
        assert_eq!(s.to_bytes(), want);
    }

    #[test]
    fn file_round_trip_is_bit_exact() {
        let mut rng = Rng::new(3);
        let mut s = EmbeddingStore::new(16).unwrap();
        for i in 0..500 {
            s.push(format!("study-{i}"), (0..16).map(|_| rng.normal() as f32).collect())
                .unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.xmrv");
        s.write(&path).unwrap();
        let back = EmbeddingStore::read(&path).unwrap();
        assert_eq!(bits(&back), bits(&s));
        assert_eq!(back.dim(), 16);
    }

    #[test]
    fn f64_conversion_matches_f32_rounding() {
        let v = Vec64::new(vec![0.1, 1.0 / 3.0, -7.25]).unwrap();
        let s = EmbeddingStore::from_f64(3, &[("a".into(), v.clone())]).unwrap();
        let back = s.to_f64().unwrap();
        for (x, y) in v.as_slice().iter().zip(back[0].1.as_slice()) {
            assert_eq!(*y, *x as f32 as f64);
        }
        assert!(EmbeddingStore::from_f64(2, &[("a".into(), v)]).is_err());
    }

    #[test]
    fn rejects_bad_magic_and_version() {
        let mut s = EmbeddingStore::new(1).unwrap();
        s.push("x".into(), vec![0.5]).unwrap();
        let good = s.to_bytes();
        let p = Path::new("e.xmrv");

        let mut bad = good.clone();
        bad[0] = b'Y';
        assert!(matches!(EmbeddingStore::from_bytes(&bad, p), Err(Error::BadMagic { .. })));
        assert!(matches!(EmbeddingStore::from_bytes(b"XM", p), Err(Error::BadMagic { .. })));

        let mut bad = good.clone();
        bad[4] = 2;
        assert!(matches!(
            EmbeddingStore::from_bytes(&bad, p),
            Err(Error::BadVersion { found: 2, .. })
        ));
    }

    #[test]
    fn rejects_inconsistent_bodies() {
        let mut s = EmbeddingStore::new(2).unwrap();
        s.push("x".into(), vec![0.5, 1.5]).unwrap();
        let good = s.to_bytes();
        let p = Path::new("e.xmrv");
        let is_format = |b: &[u8]| matches!(EmbeddingStore::from_bytes(b, p), Err(Error::Format { .. }));

        assert!(is_format(&good[..good.len() - 1]));
        let mut longer = good.clone();
        longer.push(0);
        assert!(is_format(&longer));
        let mut more = good.clone();
        more[10] = 2;
        assert!(is_format(&more));
        let mut huge = good.clone();
        huge[10..18].copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(is_format(&huge));
        let mut bad_utf8 = good.clone();
        bad_utf8[22] = 0xFF;
        assert!(is_format(&bad_utf8));
    }

    #[test]
    fn empty_store_round_trips() {
        let s = EmbeddingStore::new(8).unwrap();
        let back = EmbeddingStore::from_bytes(&s.to_bytes(), Path::new("e")).unwrap();
        assert_eq!(back, s);
        assert!(EmbeddingStore::new(0).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_any_bits(
            dim in 1usize..6,
            rows in prop::collection::vec(("\\PC{0,12}", prop::collection::vec(any::<u32>(), 6)), 0..20),
        ) {
            let mut s = EmbeddingStore::new(dim).unwrap();
            for (id, raw) in rows {
                s.push(id, raw[..dim].iter().map(|&b| f32::from_bits(b)).collect()).unwrap();
            }
            let back = EmbeddingStore::from_bytes(&s.to_bytes(), Path::new("e")).unwrap();
            prop_assert_eq!(bits(&back), bits(&s));
        }
    }
}
