//! Binary checkpoint: `b"SROSCKPT"`, `u32` version, run metadata, then every
//! tensor as `u64` rows, `u64` cols and row-major little-endian `f64` values
//! in declaration order (see [`ModelParams::tensors`]).
//!
//! Metadata block: `u64` epochs, `u64` seed, `f64` tau, `u32` flags
//! (bit 0: joint features carry attributes, bit 1: binary head trained),
//! `u32` tensor count.

use std::path::Path;

use ndarray::Array1;

use super::{Dense, ModelParams, TwoLayer};
use crate::dataio::write_atomic;
use crate::error::{Error, Result};
use crate::numkernel::Matrix;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SROSCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
const TENSOR_COUNT: u32 = 16;

const FLAG_FUSION: u32 = 1;
const FLAG_BINARY_HEAD: u32 = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    pub epochs: u64,
    pub seed: u64,
    /// Separation threshold of the last pseudo-label refresh.
    pub tau: f64,
    /// Joint features carry attribute vectors (false: `z ⊕ 0`).
    pub fusion: bool,
    /// The seen/unseen head was trained; otherwise routing falls back to the
    /// classifier's unknown column.
    pub binary_head: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub meta: CheckpointMeta,
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    if !ckpt.params.all_finite() {
        return Err(Error::Data("refusing to checkpoint non-finite weights".into()));
    }
    let mut out = Vec::with_capacity(64 + 8 * ckpt.params.num_params());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let m = &ckpt.meta;
    out.extend_from_slice(&m.epochs.to_le_bytes());
    out.extend_from_slice(&m.seed.to_le_bytes());
    out.extend_from_slice(&m.tau.to_le_bytes());
    let flags = if m.fusion { FLAG_FUSION } else { 0 } | if m.binary_head { FLAG_BINARY_HEAD } else { 0 };
    out.extend_from_slice(&flags.to_le_bytes());
    out.extend_from_slice(&TENSOR_COUNT.to_le_bytes());
    for ((rows, cols), values) in ckpt.params.tensor_shapes().into_iter().zip(ckpt.params.tensors()) {
        out.extend_from_slice(&(rows as u64).to_le_bytes());
        out.extend_from_slice(&(cols as u64).to_le_bytes());
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(self.path, format!("byte {}", self.pos), "unexpected end of checkpoint"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn tensor(&mut self) -> Result<Matrix> {
        let at = self.pos;
        let rows = self.u64()? as usize;
        let cols = self.u64()? as usize;
        let len = rows
            .checked_mul(cols)
            .filter(|n| n.checked_mul(8).is_some_and(|b| b <= self.bytes.len()))
            .ok_or_else(|| Error::format(self.path, format!("byte {at}"), format!("implausible tensor shape {rows}x{cols}")))?;
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            let pos = self.pos;
            let v = self.f64()?;
            if !v.is_finite() {
                return Err(Error::format(self.path, format!("byte {pos}"), format!("non-finite weight {v}")));
            }
            data.push(v);
        }
        Ok(Matrix::from_shape_vec((rows, cols), data).expect("length computed from shape"))
    }

    fn dense(&mut self) -> Result<Dense> {
        let weight = self.tensor()?;
        let at = self.pos;
        let bias = self.tensor()?;
        if bias.nrows() != 1 || bias.ncols() != weight.ncols() {
            return Err(Error::format(
                self.path,
                format!("byte {at}"),
                format!("bias shape {:?} does not match weight {:?}", bias.dim(), weight.dim()),
            ));
        }
        Ok(Dense {
            weight,
            bias: Array1::from_iter(bias),
        })
    }

    fn two_layer(&mut self) -> Result<TwoLayer> {
        let at = self.pos;
        let hidden = self.dense()?;
        let output = self.dense()?;
        if hidden.out_dim() != output.in_dim() {
            return Err(Error::format(self.path, format!("byte {at}"), "layer widths do not chain"));
        }
        Ok(TwoLayer { hidden, output })
    }
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::format(path, "byte 0", "missing SROSCKPT magic"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(path, "byte 8", format!("unsupported checkpoint version {version}")));
    }
    let epochs = r.u64()?;
    let seed = r.u64()?;
    let tau = r.f64()?;
    let flags = r.u32()?;
    let count = r.u32()?;
    if count != TENSOR_COUNT {
        return Err(Error::format(path, "byte 40", format!("expected {TENSOR_COUNT} tensors, found {count}")));
    }
    let params = ModelParams {
        gz: r.two_layer()?,
        ga: r.two_layer()?,
        c: r.two_layer()?,
        d: r.two_layer()?,
    };
    if r.pos != bytes.len() {
        return Err(Error::format(path, format!("byte {}", r.pos), "trailing bytes after last tensor"));
    }
    let embed = params.gz.out_dim();
    let joint = embed + params.ga.out_dim();
    if params.ga.in_dim() != embed || params.c.in_dim() != joint || params.d.in_dim() != joint || params.d.out_dim() != 2 || params.c.out_dim() < 2 {
        return Err(Error::format(path, "tensor table", "network shapes are inconsistent"));
    }
    Ok(Checkpoint {
        params,
        meta: CheckpointMeta {
            epochs,
            seed,
            tau,
            fusion: flags & FLAG_FUSION != 0,
            binary_head: flags & FLAG_BINARY_HEAD != 0,
        },
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    write_atomic(path, &encode_checkpoint(ckpt)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}
