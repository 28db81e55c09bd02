//! Binary weight files.
//!
//! Layout (all integers little-endian):
//! `"MPRW"`, version `u32`, config length `u32` + UTF-8 JSON config, then per
//! tensor: path length `u16` + UTF-8 path, rank `u8` (= 4), four `u32` dims,
//! raw `f32` values; the file ends with a CRC32 of every preceding byte.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use super::config::ModelConfig;
use super::store::WeightStore;
use crate::error::{Error, LoadError, Result};
use crate::tensor::{Shape, Tensor};

pub const MAGIC: [u8; 4] = *b"MPRW";
pub const VERSION: u32 = 1;

pub(crate) fn put_u16(buf: &mut Vec<u8>, v: u16) {
    buf.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

/// Append one tensor record.
pub(crate) fn put_tensor(buf: &mut Vec<u8>, path: &str, t: &Tensor<f32>) {
    put_u16(buf, path.len() as u16);
    buf.extend_from_slice(path.as_bytes());
    buf.push(4);
    for d in t.shape().dims() {
        put_u32(buf, d as u32);
    }
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

/// Append the CRC32 of everything in `buf`.
pub(crate) fn seal(buf: &mut Vec<u8>) {
    let crc = crc32fast::hash(buf);
    put_u32(buf, crc);
}

/// Split `bytes` into body and trailing CRC, verifying the checksum.
pub(crate) fn unseal(bytes: &[u8]) -> Result<&[u8], LoadError> {
    if bytes.len() < 4 {
        return Err(LoadError::Corrupt(format!("file is only {} bytes", bytes.len())));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let actual = crc32fast::hash(body);
    if stored != actual {
        return Err(LoadError::Corrupt(format!(
            "checksum mismatch (stored {stored:08x}, computed {actual:08x}); file truncated or damaged"
        )));
    }
    Ok(body)
}

/// Bounds-checked cursor over a byte slice.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub(crate) fn pos(&self) -> usize {
        self.pos
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub(crate) fn bytes(&mut self, n: usize) -> Result<&'a [u8], LoadError> {
        if self.remaining() < n {
            return Err(LoadError::Corrupt(format!(
                "need {n} bytes at offset {}, only {} remain",
                self.pos,
                self.remaining()
            )));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub(crate) fn u8(&mut self) -> Result<u8, LoadError> {
        Ok(self.bytes(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16, LoadError> {
        Ok(u16::from_le_bytes(self.bytes(2)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self) -> Result<u32, LoadError> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64, LoadError> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    /// Read one tensor record's header: `(path, dims)`.
    pub(crate) fn tensor_header(&mut self) -> Result<(String, [usize; 4]), LoadError> {
        let len = self.u16()? as usize;
        let path = std::str::from_utf8(self.bytes(len)?)
            .map_err(|_| LoadError::Corrupt("tensor path is not UTF-8".into()))?
            .to_string();
        let rank = self.u8()?;
        if rank != 4 {
            return Err(LoadError::Corrupt(format!(
                "tensor `{path}` has rank {rank}, expected 4"
            )));
        }
        let mut dims = [0; 4];
        for d in dims.iter_mut() {
            *d = self.u32()? as usize;
        }
        Ok((path, dims))
    }

    pub(crate) fn tensor_data(&mut self, path: &str, dims: [usize; 4]) -> Result<Tensor<f32>, LoadError> {
        let shape = Shape::from_dims(dims);
        let n = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| LoadError::Corrupt(format!("tensor `{path}` size overflows")))?;
        let raw = self.bytes(n)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Tensor::from_vec(shape, data).expect("length matches shape"))
    }

    /// Read a tensor record and check it against an expected layout,
    /// rejecting unknown names, duplicates and wrong shapes.
    pub(crate) fn checked_tensor(
        &mut self,
        layout: &BTreeMap<String, [usize; 4]>,
        seen: &mut BTreeSet<String>,
    ) -> Result<(String, Tensor<f32>), LoadError> {
        let (path, dims) = self.tensor_header()?;
        let expected = *layout
            .get(&path)
            .ok_or_else(|| LoadError::UnexpectedTensor(path.clone()))?;
        if dims != expected {
            return Err(LoadError::ShapeMismatch {
                path,
                expected,
                found: dims,
            });
        }
        if !seen.insert(path.clone()) {
            return Err(LoadError::Corrupt(format!("tensor `{path}` appears twice")));
        }
        let t = self.tensor_data(&path, dims)?;
        Ok((path, t))
    }
}

/// Serialize `store` with `cfg`, without checking that they agree.
pub fn encode_weights(store: &WeightStore<f32>, cfg: &ModelConfig) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&MAGIC);
    put_u32(&mut buf, VERSION);
    let json = cfg.to_json();
    put_u32(&mut buf, json.len() as u32);
    buf.extend_from_slice(json.as_bytes());
    for (path, t) in store.iter() {
        put_tensor(&mut buf, path, t);
    }
    seal(&mut buf);
    buf
}

/// Parse the header and exactly as many tensors as `cfg` defines from the
/// front of `body` (which must already be CRC-checked by the caller when it
/// is a whole file). Returns the store, config and bytes consumed.
pub(crate) fn decode_weight_records(body: &[u8]) -> Result<(WeightStore<f32>, ModelConfig, usize), LoadError> {
    let mut r = Reader::new(body);
    let cfg = read_header(&mut r)?;
    let layout = WeightStore::<f32>::expected_layout(&cfg);
    let mut seen = BTreeSet::new();
    let mut store = WeightStore::new();
    for _ in 0..layout.len() {
        let (path, t) = r.checked_tensor(&layout, &mut seen)?;
        store.insert(path, t);
    }
    Ok((store, cfg, r.pos()))
}

fn read_header(r: &mut Reader) -> Result<ModelConfig, LoadError> {
    let magic: [u8; 4] = r.bytes(4)?.try_into().unwrap();
    if magic != MAGIC {
        return Err(LoadError::BadMagic(magic));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(LoadError::UnknownVersion(version));
    }
    let len = r.u32()? as usize;
    let json = std::str::from_utf8(r.bytes(len)?).map_err(|_| LoadError::BadConfig("config is not UTF-8".into()))?;
    ModelConfig::from_json(json).map_err(|e| LoadError::BadConfig(e.to_string()))
}

/// Check magic and version before the checksum so a foreign or newer file is
/// reported as such rather than as damage.
pub(crate) fn check_preamble(bytes: &[u8]) -> Result<(), LoadError> {
    let mut r = Reader::new(bytes);
    let magic: [u8; 4] = r.bytes(4)?.try_into().unwrap();
    if magic != MAGIC {
        return Err(LoadError::BadMagic(magic));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(LoadError::UnknownVersion(version));
    }
    Ok(())
}

/// Decode a complete weight file. Nothing is returned unless the whole file
/// is valid.
pub fn decode_weights(bytes: &[u8]) -> Result<(WeightStore<f32>, ModelConfig), LoadError> {
    check_preamble(bytes)?;
    let body = unseal(bytes)?;
    let mut r = Reader::new(body);
    let cfg = read_header(&mut r)?;
    let layout = WeightStore::<f32>::expected_layout(&cfg);
    let mut seen = BTreeSet::new();
    let mut store = WeightStore::new();
    while r.remaining() > 0 {
        let (path, t) = r.checked_tensor(&layout, &mut seen)?;
        store.insert(path, t);
    }
    if let Some(missing) = layout.keys().find(|k| !seen.contains(*k)) {
        return Err(LoadError::MissingTensor(missing.clone()));
    }
    Ok((store, cfg))
}

/// Check that `store` has exactly the tensors `cfg` defines.
pub fn check_layout(store: &WeightStore<f32>, cfg: &ModelConfig) -> Result<(), LoadError> {
    let layout = WeightStore::<f32>::expected_layout(cfg);
    for (path, t) in store.iter() {
        let expected = *layout
            .get(path)
            .ok_or_else(|| LoadError::UnexpectedTensor(path.clone()))?;
        if t.shape().dims() != expected {
            return Err(LoadError::ShapeMismatch {
                path: path.clone(),
                expected,
                found: t.shape().dims(),
            });
        }
    }
    if let Some(missing) = layout.keys().find(|k| store.get(k).is_none()) {
        return Err(LoadError::MissingTensor(missing.clone()));
    }
    Ok(())
}

pub fn save_weights(store: &WeightStore<f32>, cfg: &ModelConfig, path: impl AsRef<Path>) -> Result<()> {
    check_layout(store, cfg)?;
    let path = path.as_ref();
    std::fs::write(path, encode_weights(store, cfg)).map_err(|e| Error::io(path, e))
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<(WeightStore<f32>, ModelConfig)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode_weights(&bytes)?)
}
