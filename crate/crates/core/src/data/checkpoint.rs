//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "XPRCKPT\0"
//! version  u32
//! hlen     u32      header length
//! header   hlen     UTF-8 JSON (stage, config, shapes, prune state, metadata)
//! plen     u64      payload length in bytes
//! payload  plen     f64 values of every tensor, in header order
//! crc      u32      CRC-32 of header and payload
//! ```
//!
//! Writing the same checkpoint twice yields identical bytes.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{BlockMask, MaskSet};
use crate::model::{build_model, BlockKeep, Model, ModelConfig};
use crate::prune::{FoldReport, PruneState};
use crate::tensor::Tensor;
use crate::train::EpochLog;

pub const MAGIC: &[u8; 8] = b"XPRCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Baseline,
    Masked,
    Pruned,
    Finetuned,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Baseline => "baseline",
            Stage::Masked => "masked",
            Stage::Pruned => "pruned",
            Stage::Finetuned => "finetuned",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub seed: u64,
    /// Per-epoch metrics of the phase that produced the checkpoint.
    pub history: Vec<EpochLog>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    pub model: Model,
    pub masks: Option<MaskSet>,
    pub prune_state: Option<PruneState>,
    pub fold_report: Option<FoldReport>,
    pub metadata: Metadata,
}

#[derive(Serialize, Deserialize)]
struct BlockShape {
    heads: usize,
    hidden: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    stage: Stage,
    config: ModelConfig,
    blocks: Vec<BlockShape>,
    frozen: bool,
    model_tensors: Vec<Vec<usize>>,
    mask_tensors: Option<Vec<Vec<usize>>>,
    prune_state: Option<PruneState>,
    fold_report: Option<FoldReport>,
    metadata: Metadata,
}

impl Checkpoint {
    pub fn new(stage: Stage, model: Model) -> Self {
        Self {
            stage,
            model,
            masks: None,
            prune_state: None,
            fold_report: None,
            metadata: Metadata::default(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let model_params = self.model.params();
        let mask_params = self.masks.as_ref().map(MaskSet::tensors);
        let header = Header {
            stage: self.stage,
            config: self.model.config.clone(),
            blocks: self
                .model
                .blocks
                .iter()
                .map(|b| BlockShape {
                    heads: b.heads,
                    hidden: b.hidden,
                })
                .collect(),
            frozen: self.model.frozen,
            model_tensors: model_params.iter().map(|t| t.shape().to_vec()).collect(),
            mask_tensors: mask_params.as_ref().map(|v| v.iter().map(|t| t.shape().to_vec()).collect()),
            prune_state: self.prune_state.clone(),
            fold_report: self.fold_report.clone(),
            metadata: self.metadata.clone(),
        };
        let header = serde_json::to_vec(&header)?;
        let mut payload = Vec::new();
        for t in model_params.iter().chain(mask_params.iter().flatten()) {
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut crc = crc32fast::Hasher::new();
        crc.update(&header);
        crc.update(&payload);
        let mut out = Vec::with_capacity(32 + header.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&payload);
        out.extend_from_slice(&crc.finalize().to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        let magic = r.take(8)?;
        if magic != MAGIC {
            return Err(Error::BadMagic {
                path: path.to_path_buf(),
                found: u32::from_le_bytes([magic[0], magic[1], magic[2], magic[3]]),
                expected: u32::from_le_bytes([MAGIC[0], MAGIC[1], MAGIC[2], MAGIC[3]]),
            });
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Version {
                path: path.to_path_buf(),
                found: version,
                expected: VERSION,
            });
        }
        let hlen = r.u32()? as usize;
        let header_bytes = r.take(hlen)?;
        let plen = r.u64()? as usize;
        let payload = r.take(plen)?;
        let stored = r.u32()?;
        if r.pos != bytes.len() {
            return Err(r.format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let mut crc = crc32fast::Hasher::new();
        crc.update(header_bytes);
        crc.update(payload);
        let computed = crc.finalize();
        if computed != stored {
            return Err(Error::Checksum {
                path: path.to_path_buf(),
                stored,
                computed,
            });
        }
        let header: Header = serde_json::from_slice(header_bytes).map_err(|e| r.format(format!("bad header: {e}")))?;

        let mut values = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunks of 8")));
        if payload.len() % 8 != 0 {
            return Err(r.format("payload length is not a multiple of 8".into()));
        }
        let mut next = |shape: &[usize]| -> Result<Tensor> {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = values.by_ref().take(n).collect();
            if data.len() != n {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    msg: "payload shorter than the header's tensor list".into(),
                });
            }
            Tensor::new(shape.to_vec(), data)
        };

        let mut model = skeleton(&header, path)?;
        let slots = model.params_mut();
        if slots.len() != header.model_tensors.len() {
            return Err(r.format("model tensor count does not match the architecture".into()));
        }
        for (slot, shape) in slots.into_iter().zip(&header.model_tensors) {
            if slot.shape() != shape.as_slice() {
                return Err(r.format(format!("tensor shape {shape:?} does not match {:?}", slot.shape())));
            }
            *slot = next(shape)?;
        }
        model.frozen = header.frozen;

        let masks = match &header.mask_tensors {
            None => None,
            Some(shapes) => {
                if shapes.len() != 4 * model.blocks.len() {
                    return Err(r.format("mask tensor count does not match the depth".into()));
                }
                let mut blocks = Vec::with_capacity(model.blocks.len());
                for s in shapes.chunks(4) {
                    blocks.push(BlockMask {
                        head: next(&s[0])?,
                        out_proj: next(&s[1])?,
                        fc1: next(&s[2])?,
                        fc2: next(&s[3])?,
                    });
                }
                let masks = MaskSet {
                    num_classes: model.config.num_classes,
                    blocks,
                };
                masks.check_matches(&model).map_err(|e| r.format(e.to_string()))?;
                Some(masks)
            }
        };
        if values.next().is_some() {
            return Err(r.format("payload longer than the header's tensor list".into()));
        }
        Ok(Self {
            stage: header.stage,
            model,
            masks,
            prune_state: header.prune_state,
            fold_report: header.fold_report,
            metadata: header.metadata,
        })
    }
}

/// A model with the header's architecture; weights are overwritten later.
fn skeleton(header: &Header, path: &Path) -> Result<Model> {
    let bad = |msg: String| Error::Format {
        path: path.to_path_buf(),
        msg,
    };
    let full = build_model(&header.config).map_err(|e| bad(e.to_string()))?;
    if header.blocks.len() != full.blocks.len() {
        return Err(bad("block count differs from config depth".into()));
    }
    let keep: Vec<BlockKeep> = header
        .blocks
        .iter()
        .map(|b| BlockKeep {
            heads: (0..b.heads).collect(),
            neurons: (0..b.hidden).collect(),
        })
        .collect();
    full.apply_structural_prune(&keep).map_err(|e| bad(e.to_string()))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(Error::Truncated {
            path: self.path.to_path_buf(),
            offset: self.bytes.len(),
            needed: self.pos.saturating_add(n),
        })?;
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

    fn format(&self, msg: String) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            msg,
        }
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes = ckpt.to_bytes()?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes, path)
}
