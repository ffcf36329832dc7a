//! Per-user preference memory: extraction, overwrite/append updates and the
//! `R2PM` on-disk format.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{gather_rows, run_layout, MaskKind, ModelParams, SequenceLayout};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpdateMode {
    Overwrite,
    Append,
}

impl std::str::FromStr for UpdateMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        crate::error::parse_variant("update mode", s)
    }
}

impl UpdateMode {
    fn code(self) -> u8 {
        match self {
            UpdateMode::Overwrite => 0,
            UpdateMode::Append => 1,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(UpdateMode::Overwrite),
            1 => Ok(UpdateMode::Append),
            _ => Err(Error::Malformed(format!("unknown update mode {c}"))),
        }
    }
}

/// Compressed history of one user.
///
/// `content` holds `C` rows under overwrite and `segments_absorbed · C` rows
/// under append. `user_id` is not persisted.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryState {
    pub mode: UpdateMode,
    pub slots: usize,
    pub dim: usize,
    pub content: Tensor<f32>,
    pub segments_absorbed: usize,
    pub user_id: Option<String>,
}

impl MemoryState {
    pub fn rows(&self) -> usize {
        self.content.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let expected = match self.mode {
            UpdateMode::Overwrite => self.slots,
            UpdateMode::Append => self.segments_absorbed * self.slots,
        };
        if self.content.shape() != [expected, self.dim] {
            return Err(Error::Memory(format!(
                "{:?} memory with {} segments must be {}x{}, found {:?}",
                self.mode,
                self.segments_absorbed,
                expected,
                self.dim,
                self.content.shape()
            )));
        }
        if !self.content.is_finite() {
            return Err(Error::NonFinite { op: "memory" });
        }
        Ok(())
    }

    /// Size of the float payload in bytes.
    pub fn payload_bytes(&self) -> usize {
        self.content.len() * 4
    }

    /// Size of the persisted file in bytes.
    pub fn file_bytes(&self) -> usize {
        R2PM_HEADER_BYTES + self.payload_bytes() + 4
    }
}

/// Runs `layout` (ending in a QUERY block of `C` slots) causally and returns
/// the hidden rows at that block.
pub fn encode_memory(
    params: &ModelParams,
    layout: &SequenceLayout,
    memory: Option<&Tensor<f32>>,
) -> Result<Tensor<f32>> {
    let c = params.config.slots;
    let start = layout.trailing_query_block(c)?;
    let mut g = Graph::inference();
    let bp = params.bind(&mut g);
    let mem = memory.map(|m| g.constant(m.clone()));
    let fwd = run_layout(&mut g, &bp, layout, mem, MaskKind::Causal)?;
    let rows: Vec<usize> = (start..start + c).collect();
    let m = gather_rows(&mut g, fwd.hidden, &rows)?;
    Ok(g.value(m).clone())
}

/// `M_0 = m_0 = encode([S_0; Q_mem])` for either mode.
pub fn init_memory(params: &ModelParams, segment: &[u32], mode: UpdateMode) -> Result<MemoryState> {
    if segment.is_empty() {
        return Err(Error::Memory("cannot initialise memory from an empty segment".into()));
    }
    let layout = SequenceLayout::unified(0, segment, params.config.slots);
    let content = encode_memory(params, &layout, None)?;
    Ok(MemoryState {
        mode,
        slots: params.config.slots,
        dim: params.config.d_model,
        content,
        segments_absorbed: 1,
        user_id: None,
    })
}

/// Absorbs one full segment: `m_k = encode([M_{k-1}; S_k; Q_mem])`, then
/// overwrite (`M_k = m_k`) or append (`M_k = [M_{k-1}; m_k]`).
///
/// The segment length is the model's position-table size.
pub fn update_memory(params: &ModelParams, state: &MemoryState, segment: &[u32]) -> Result<MemoryState> {
    let l_seg = params.config.max_positions;
    if segment.len() != l_seg {
        return Err(Error::Memory(format!(
            "update needs a full segment of {l_seg} items, got {}",
            segment.len()
        )));
    }
    state.validate()?;
    let layout = SequenceLayout::unified(state.rows(), segment, params.config.slots);
    let m = encode_memory(params, &layout, Some(&state.content))?;
    let content = match state.mode {
        UpdateMode::Overwrite => m,
        UpdateMode::Append => Tensor::concat_rows(&[&state.content, &m])?,
    };
    Ok(MemoryState {
        content,
        segments_absorbed: state.segments_absorbed + 1,
        ..state.clone()
    })
}

pub const R2PM_MAGIC: &[u8; 4] = b"R2PM";
pub const R2PM_VERSION: u8 = 1;
/// magic + version + mode + C + d + segments + rows.
pub const R2PM_HEADER_BYTES: usize = 4 + 1 + 1 + 2 + 2 + 4 + 4;

pub fn encode_memory_file(state: &MemoryState) -> Result<Vec<u8>> {
    state.validate()?;
    let narrow = |v: usize, what: &str| -> Result<u16> {
        u16::try_from(v).map_err(|_| Error::Memory(format!("{what} {v} does not fit in u16")))
    };
    let mut buf = Vec::with_capacity(state.file_bytes());
    buf.extend_from_slice(R2PM_MAGIC);
    buf.push(R2PM_VERSION);
    buf.push(state.mode.code());
    buf.extend_from_slice(&narrow(state.slots, "slots")?.to_le_bytes());
    buf.extend_from_slice(&narrow(state.dim, "dim")?.to_le_bytes());
    buf.extend_from_slice(&(state.segments_absorbed as u32).to_le_bytes());
    buf.extend_from_slice(&(state.rows() as u32).to_le_bytes());
    let payload_start = buf.len();
    for x in state.content.data() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    let crc = crc32fast::hash(&buf[payload_start..]);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

pub fn decode_memory_file(bytes: &[u8]) -> Result<MemoryState> {
    if bytes.len() < 4 || &bytes[..4] != R2PM_MAGIC {
        return Err(Error::BadMagic("R2PM memory file".into()));
    }
    if bytes.len() < R2PM_HEADER_BYTES + 4 {
        return Err(Error::Malformed("memory file shorter than its header".into()));
    }
    if bytes[4] != R2PM_VERSION {
        return Err(Error::BadVersion {
            found: bytes[4],
            expected: R2PM_VERSION,
        });
    }
    let mode = UpdateMode::from_code(bytes[5])?;
    let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]) as usize;
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let slots = u16_at(6);
    let dim = u16_at(8);
    let segments_absorbed = u32_at(10);
    let rows = u32_at(14);
    let payload_len = rows * dim * 4;
    if bytes.len() != R2PM_HEADER_BYTES + payload_len + 4 {
        return Err(Error::Malformed(format!(
            "expected {} bytes for {rows}x{dim} memory, found {}",
            R2PM_HEADER_BYTES + payload_len + 4,
            bytes.len()
        )));
    }
    let payload = &bytes[R2PM_HEADER_BYTES..R2PM_HEADER_BYTES + payload_len];
    let stored = u32_at(R2PM_HEADER_BYTES + payload_len) as u32;
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return Err(Error::Crc { stored, computed });
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let state = MemoryState {
        mode,
        slots,
        dim,
        content: Tensor::new(vec![rows, dim], data)?,
        segments_absorbed,
        user_id: None,
    };
    state.validate()?;
    Ok(state)
}

pub fn save_memory(state: &MemoryState, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_memory_file(state)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load_memory(path: impl AsRef<Path>) -> Result<MemoryState> {
    decode_memory_file(&fs::read(path)?)
}

/// Float payload of a token memory: `C · d · 4` bytes, times the segment
/// count under append.
pub fn token_footprint(slots: usize, dim: usize, segments: usize, mode: UpdateMode) -> u64 {
    let per = (slots * dim * 4) as u64;
    match mode {
        UpdateMode::Overwrite => per,
        UpdateMode::Append => per * segments as u64,
    }
}

/// Bytes needed to persist per-layer key/value caches for the same memory
/// positions instead of the token embeddings.
pub fn kv_footprint_model(
    slots: usize,
    dim: usize,
    n_layers: usize,
    segments: usize,
    mode: UpdateMode,
) -> u64 {
    2 * n_layers as u64 * token_footprint(slots, dim, segments, mode)
}
