//! Versioned binary container of named tensors.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "SEMADAPT"
//! version    u32
//! fingerprint 32 bytes (SHA-256 of the model config)
//! meta_len   u32, then meta_len bytes of JSON metadata
//! count      u32
//! count x { name_len u32, name utf-8, dtype u8 (0 = f32, 1 = f64),
//!           ndim u32, ndim x u64 dims, row-major payload }
//! ```

use std::fs;
use std::path::Path;

use super::Parameterized;
use crate::diffcore::{DType, Real, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SEMADAPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
struct Entry {
    name: String,
    dtype: DType,
    shape: Vec<usize>,
    payload: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub fingerprint: [u8; 32],
    pub meta: serde_json::Value,
    entries: Vec<Entry>,
}

impl Checkpoint {
    pub fn new(fingerprint: [u8; 32]) -> Self {
        Checkpoint { fingerprint, meta: serde_json::Value::Null, entries: Vec::new() }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn insert<T: Real>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        let name = name.into();
        self.entries.retain(|e| e.name != name);
        self.entries.push(Entry {
            name,
            dtype: T::DTYPE,
            shape: t.shape().to_vec(),
            payload: T::to_le_bytes_vec(t.data()),
        });
    }

    pub fn get<T: Real>(&self, name: &str) -> Result<Tensor<T>> {
        let e = self
            .entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name:?}")))?;
        if e.dtype != T::DTYPE {
            return Err(Error::Checkpoint(format!("tensor {name:?} is {:?}, expected {:?}", e.dtype, T::DTYPE)));
        }
        Tensor::new(e.shape.clone(), T::from_le_bytes_slice(&e.payload))
    }

    /// Stores every parameter of `module` under its own name.
    pub fn insert_module<T: Real, M: Parameterized<T>>(&mut self, module: &M) {
        for (name, t) in module.params() {
            self.insert(name, t);
        }
    }

    /// Overwrites the parameters of `module`; shapes must match exactly.
    pub fn load_module<T: Real, M: Parameterized<T>>(&self, module: &mut M) -> Result<()> {
        let names: Vec<String> = module.params().into_iter().map(|(n, _)| n).collect();
        let loaded: Vec<Tensor<T>> = names.iter().map(|n| self.get(n)).collect::<Result<_>>()?;
        for ((name, dst), src) in names.iter().zip(module.params_mut()).zip(loaded) {
            if dst.shape() != src.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name:?} has shape {:?}, model expects {:?}",
                    src.shape(),
                    dst.shape()
                )));
            }
            *dst = src;
        }
        Ok(())
    }

    pub fn check_fingerprint(&self, expected: &[u8; 32]) -> Result<()> {
        if &self.fingerprint != expected {
            return Err(Error::Checkpoint("config fingerprint mismatch".into()));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.fingerprint);
        let meta = serde_json::to_vec(&self.meta).expect("json value serializes");
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(e.dtype.tag());
            out.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
            for &d in &e.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&e.payload);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let fingerprint: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let meta_len = r.u32()? as usize;
        let meta = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| Error::Checkpoint(format!("bad metadata: {e}")))?;
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Checkpoint("tensor name is not utf-8".into()))?;
            let tag = r.take(1)?[0];
            let dtype = DType::from_tag(tag).ok_or_else(|| Error::Checkpoint(format!("unknown dtype tag {tag}")))?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .and_then(|n| n.checked_mul(dtype.size()))
                .ok_or_else(|| Error::Checkpoint(format!("tensor {name:?} is too large")))?;
            let payload = r.take(numel)?.to_vec();
            entries.push(Entry { name, dtype, shape, payload });
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint { fingerprint, meta, entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes())?;
        fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
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
    use crate::models::{GeneratorG, ModelConfig};
    use proptest::prelude::*;

    #[test]
    fn module_round_trip() {
        let cfg = ModelConfig { feature_channels: 8, generator_widths: [4, 4, 4], ..Default::default() };
        let g = GeneratorG::<f32>::new(&cfg, 3);
        let mut ck = Checkpoint::new(cfg.fingerprint());
        ck.meta = serde_json::json!({"iteration": 7});
        ck.insert_module(&g);
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
        let mut other = GeneratorG::<f32>::new(&cfg, 4);
        assert_ne!(other, g);
        back.load_module(&mut other).unwrap();
        assert_eq!(other, g);
        back.check_fingerprint(&cfg.fingerprint()).unwrap();
    }

    #[test]
    fn rejects_shape_and_fingerprint_mismatch() {
        let cfg = ModelConfig { feature_channels: 8, generator_widths: [4, 4, 4], ..Default::default() };
        let mut ck = Checkpoint::new(cfg.fingerprint());
        ck.insert_module(&GeneratorG::<f32>::new(&cfg, 1));
        let wider = ModelConfig { feature_channels: 16, ..cfg.clone() };
        let mut g = GeneratorG::<f32>::new(&wider, 1);
        assert!(matches!(ck.load_module(&mut g), Err(Error::Checkpoint(_))));
        assert!(ck.check_fingerprint(&wider.fingerprint()).is_err());
        let mut g64 = GeneratorG::<f64>::new(&cfg, 1);
        assert!(ck.load_module(&mut g64).is_err());
    }

    #[test]
    fn malformed_bytes_are_rejected() {
        assert!(Checkpoint::from_bytes(b"").is_err());
        assert!(Checkpoint::from_bytes(b"NOTACKPT\x01\0\0\0").is_err());
        let mut ck = Checkpoint::new([7; 32]);
        ck.insert("x", &Tensor::<f64>::zeros(vec![3]));
        let bytes = ck.to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }

    proptest! {
        #[test]
        fn arbitrary_tensors_round_trip(vals in prop::collection::vec(-1e6f64..1e6, 1..40), split in 1usize..5) {
            let n = vals.len();
            let rows = split.min(n);
            let shape = if n % rows == 0 { vec![rows, n / rows] } else { vec![n] };
            let t = Tensor::new(shape, vals).unwrap();
            let mut ck = Checkpoint::new([1; 32]);
            ck.insert("t", &t);
            ck.insert("t32", &t.cast::<f32>());
            let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
            prop_assert_eq!(back.get::<f64>("t").unwrap(), t.clone());
            prop_assert_eq!(back.get::<f32>("t32").unwrap(), t.cast::<f32>());
        }

        #[test]
        fn random_garbage_never_panics(bytes in prop::collection::vec(any::<u8>(), 0..200)) {
            let _ = Checkpoint::from_bytes(&bytes);
        }
    }
}
