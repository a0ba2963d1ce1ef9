//! The `FRNC` named-tensor container.
//!
//! Layout: magic, u32 version, u32 tensor count, then per tensor a u16 name
//! length, the UTF-8 name, u8 rank, rank × u32 extents and a little-endian
//! f32 payload; a trailing CRC-32 covers every preceding byte.

use std::fs;
use std::path::Path;

use super::network::{Network, NetworkSpec};
use super::tensor::Tensor;
use crate::error::{format_err, Result};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 4] = b"FRNC";
pub const VERSION: u32 = 1;

pub fn encode_tensors<T: Scalar>(tensors: &[(&str, &Tensor<T>)]) -> Vec<u8> {
    let payload: usize = tensors.iter().map(|(n, t)| 3 + n.len() + 4 * t.dims().len() + 4 * t.len()).sum();
    let mut out = Vec::with_capacity(16 + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.dims().len() as u8);
        for &d in t.dims() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.as_f32().to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return format_err(format!("checkpoint truncated while reading {what}"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

pub fn decode_tensors(bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return format_err("not a checkpoint: bad magic");
    }
    if bytes.len() < 16 {
        return format_err("checkpoint truncated");
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let mut r = Reader { bytes: body, pos: 4 };
    let version = r.u32("version")?;
    if version != VERSION {
        return format_err(format!("unsupported checkpoint version {version}"));
    }
    let count = r.u32("tensor count")?;
    let mut tensors = Vec::new();
    for _ in 0..count {
        let name_len = u16::from_le_bytes(r.take(2, "name length")?.try_into().expect("2 bytes")) as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| crate::Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let ndim = r.take(1, "rank")?[0] as usize;
        if ndim > 4 {
            return format_err(format!("tensor {name} has rank {ndim} > 4"));
        }
        let mut dims = Vec::with_capacity(ndim);
        let mut len: usize = 1;
        for _ in 0..ndim {
            let d = r.u32("extent")? as usize;
            len = len
                .checked_mul(d)
                .filter(|&l| l <= (body.len() - r.pos) / 4 + 1)
                .ok_or_else(|| crate::Error::Format(format!("tensor {name} extents exceed the file size")))?;
            dims.push(d);
        }
        let raw = r.take(len.saturating_mul(4), "payload")?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        tensors.push((name, Tensor::from_vec(&dims, data)?));
    }
    if r.pos != body.len() {
        return format_err("checkpoint has trailing bytes before the checksum");
    }
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    if stored != crc32fast::hash(body) {
        return format_err("checkpoint checksum mismatch");
    }
    Ok(tensors)
}

pub fn write_tensors<T: Scalar>(path: impl AsRef<Path>, tensors: &[(&str, &Tensor<T>)]) -> Result<()> {
    fs::write(path, encode_tensors(tensors))?;
    Ok(())
}

pub fn read_tensors(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor<f32>)>> {
    decode_tensors(&fs::read(path)?)
}

pub fn encode_network<T: Scalar>(net: &Network<T>) -> Vec<u8> {
    let named: Vec<(&str, &Tensor<T>)> = net.param_names().iter().map(String::as_str).zip(net.params()).collect();
    encode_tensors(&named)
}

/// Rebuilds a network from checkpoint bytes, inferring the architecture from
/// tensor names and shapes. `dropout` sets the head's rate for detectors.
pub fn decode_network<T: Scalar>(bytes: &[u8], dropout: f64) -> Result<Network<T>> {
    let tensors = decode_tensors(bytes)?;
    let shapes: Vec<(String, Vec<usize>)> = tensors.iter().map(|(n, t)| (n.clone(), t.dims().to_vec())).collect();
    let spec = NetworkSpec::infer(&shapes, dropout)?;
    let params = spec
        .param_shapes()?
        .iter()
        .map(|(name, _)| {
            let (_, t) = tensors.iter().find(|(n, _)| n == name).expect("validated by infer");
            t.cast()
        })
        .collect();
    Network::from_params(spec, params)
}

pub fn save_network<T: Scalar>(net: &Network<T>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_network(net))?;
    Ok(())
}

pub fn load_network<T: Scalar>(path: impl AsRef<Path>, dropout: f64) -> Result<Network<T>> {
    decode_network(&fs::read(path)?, dropout)
}
