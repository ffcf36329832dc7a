//! `R2PW` parameter files.
//!
//! Layout (little-endian): magic `R2PW`, u8 version, u64 FNV-1a hash of the
//! architecture block, the architecture block (six u32 and one u8), u32
//! tensor count, then per tensor: u16 name length, name, u8 rank, u32 dims,
//! f32 payload. A CRC32 of everything after the magic closes the file.

use std::fs;
use std::path::Path;

use crate::backbone::{ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const R2PW_MAGIC: &[u8; 4] = b"R2PW";
pub const R2PW_VERSION: u8 = 1;
const ARCH_BYTES: usize = 6 * 4 + 1;
/// Bytes before the first tensor record.
pub const R2PW_HEADER_BYTES: usize = 4 + 1 + 8 + ARCH_BYTES + 4;

fn arch_block(c: &ModelConfig) -> Vec<u8> {
    let mut b = Vec::with_capacity(ARCH_BYTES);
    for v in [c.n_items, c.d_model, c.n_layers, c.n_heads, c.slots, c.max_positions] {
        b.extend_from_slice(&(v as u32).to_le_bytes());
    }
    b.push(c.with_memory as u8);
    b
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn config_hash(c: &ModelConfig) -> u64 {
    fnv1a64(&arch_block(c))
}

/// Record size of one named tensor.
pub fn tensor_record_bytes(name: &str, shape: &[usize]) -> usize {
    2 + name.len() + 1 + 4 * shape.len() + 4 * shape.iter().product::<usize>()
}

/// Exact size of the file [`encode_params`] produces.
pub fn params_file_bytes(params: &ModelParams) -> usize {
    R2PW_HEADER_BYTES
        + params
            .named()
            .iter()
            .map(|(n, t)| tensor_record_bytes(n, t.shape()))
            .sum::<usize>()
        + 4
}

pub fn encode_params(params: &ModelParams) -> Vec<u8> {
    let mut buf = Vec::with_capacity(params_file_bytes(params));
    buf.extend_from_slice(R2PW_MAGIC);
    buf.push(R2PW_VERSION);
    buf.extend_from_slice(&config_hash(&params.config).to_le_bytes());
    buf.extend_from_slice(&arch_block(&params.config));
    let named = params.named();
    buf.extend_from_slice(&(named.len() as u32).to_le_bytes());
    for (name, t) in named {
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(t.shape().len() as u8);
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for x in t.data() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf[4..]);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::Malformed(format!(
                "parameter file ends at byte {} but {end} are needed",
                self.bytes.len()
            )));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Parameters read from a file, with the stored architecture hash.
#[derive(Clone, Debug)]
pub struct LoadedParams {
    pub params: ModelParams,
    pub stored_hash: u64,
}

pub fn decode_params(bytes: &[u8]) -> Result<LoadedParams> {
    if bytes.len() < 4 || &bytes[..4] != R2PW_MAGIC {
        return Err(Error::BadMagic("R2PW parameter file".into()));
    }
    if bytes.len() < R2PW_HEADER_BYTES + 4 {
        return Err(Error::Malformed("parameter file shorter than its header".into()));
    }
    if bytes[4] != R2PW_VERSION {
        return Err(Error::BadVersion {
            found: bytes[4],
            expected: R2PW_VERSION,
        });
    }
    let body = &bytes[..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    let computed = crc32fast::hash(&body[4..]);
    if stored != computed {
        return Err(Error::Crc { stored, computed });
    }
    let mut r = Reader { bytes: body, pos: 5 };
    let stored_hash = r.u64()?;
    let mut dims = [0usize; 6];
    for d in dims.iter_mut() {
        *d = r.u32()? as usize;
    }
    let config = ModelConfig {
        n_items: dims[0],
        d_model: dims[1],
        n_layers: dims[2],
        n_heads: dims[3],
        slots: dims[4],
        max_positions: dims[5],
        with_memory: r.u8()? != 0,
    };
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let n = r.u16()? as usize;
        let name = String::from_utf8(r.take(n)?.to_vec())
            .map_err(|_| Error::Malformed("tensor name is not UTF-8".into()))?;
        let rank = r.u8()? as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        let data = r
            .take(4 * len)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != body.len() {
        return Err(Error::Malformed(format!(
            "{} trailing bytes after the last tensor",
            body.len() - r.pos
        )));
    }
    let params = assemble(config, tensors)?;
    Ok(LoadedParams {
        params,
        stored_hash,
    })
}

/// Fills a model of `config` from named tensors, reporting every mismatch.
fn assemble(config: ModelConfig, tensors: Vec<(String, Tensor<f32>)>) -> Result<ModelParams> {
    let mut params = ModelParams::<f32>::init(config, 0)?;
    let expected: Vec<(String, Vec<usize>)> = params
        .named()
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect();
    let mut problems = Vec::new();
    if expected.len() != tensors.len() {
        problems.push(format!(
            "expected {} tensors, file has {}",
            expected.len(),
            tensors.len()
        ));
    }
    for ((en, es), (gn, gt)) in expected.iter().zip(&tensors) {
        if en != gn {
            problems.push(format!("expected tensor `{en}`, found `{gn}`"));
        } else if es.as_slice() != gt.shape() {
            problems.push(format!("`{en}`: expected {es:?}, found {:?}", gt.shape()));
        }
    }
    if !problems.is_empty() {
        return Err(Error::ParamShape(problems.join("; ")));
    }
    for (slot, (_, t)) in params.tensors_mut().into_iter().zip(tensors) {
        *slot = t;
    }
    Ok(params)
}

pub fn save_params(params: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_params(params))?;
    Ok(())
}

pub fn load_params(path: impl AsRef<Path>) -> Result<LoadedParams> {
    decode_params(&fs::read(path)?)
}

/// Loads `path` for a run that expects `expected`. Shape differences are
/// errors; a different architecture hash with identical shapes (for example
/// another head count) is returned as a warning.
pub fn load_params_for(
    path: impl AsRef<Path>,
    expected: &ModelConfig,
) -> Result<(ModelParams, Option<String>)> {
    let loaded = load_params(path)?;
    let want = ModelParams::<f32>::init(*expected, 0)?;
    let diffs: Vec<String> = want
        .named()
        .iter()
        .zip(loaded.params.named())
        .filter(|((_, a), (_, b))| a.shape() != b.shape())
        .map(|((n, a), (_, b))| format!("`{n}`: expected {:?}, found {:?}", a.shape(), b.shape()))
        .collect();
    if !diffs.is_empty() || want.named().len() != loaded.params.named().len() {
        return Err(Error::ParamShape(if diffs.is_empty() {
            format!(
                "expected {} tensors, file has {}",
                want.named().len(),
                loaded.params.named().len()
            )
        } else {
            diffs.join("; ")
        }));
    }
    let warning = (loaded.stored_hash != config_hash(expected)).then(|| {
        format!(
            "architecture hash {:#018x} differs from the configured {:#018x}; using the stored architecture",
            loaded.stored_hash,
            config_hash(expected)
        )
    });
    Ok((loaded.params, warning))
}
