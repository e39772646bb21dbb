//! Teacher prefill over packs: top-k raw logits at every supervised
//! position, stored in the `NPDLOGK1` sidecar.

use std::path::Path;

use rayon::prelude::*;

use crate::error::{NpdError, Result};
use crate::io::{self, LeReader, LeWriter};
use crate::model::{Evaluator, TinyLmParams};
use crate::packing::{Pack, PackFile};

const SIDECAR_MAGIC: &[u8; 8] = b"NPDLOGK1";

/// Top-k teacher logits at one supervised position.
#[derive(Debug, Clone, PartialEq)]
pub struct TopKAnnotation {
    pub position: u32,
    /// Descending logit order, ascending token id among equal logits.
    pub indices: Vec<u32>,
    pub logits: Vec<f32>,
}

impl TopKAnnotation {
    pub fn k(&self) -> usize {
        self.indices.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationBlock {
    pub pack_index: u32,
    pub entries: Vec<TopKAnnotation>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sidecar {
    pub k: usize,
    pub pack_file_crc: u32,
    pub blocks: Vec<AnnotationBlock>,
}

/// Indices of the `k` largest entries, ties broken by ascending index.
pub fn top_k_indices(row: &[f64], k: usize) -> Vec<u32> {
    let mut idx: Vec<u32> = (0..row.len() as u32).collect();
    idx.sort_by(|&a, &b| row[b as usize].total_cmp(&row[a as usize]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

fn annotate_pack(eval: &Evaluator<'_>, pack_index: usize, pack: &Pack, k: usize) -> Result<AnnotationBlock> {
    let rows = eval.logits_where(&pack.tokens, &pack.segment_ids, |t| pack.loss_mask[t])?;
    let positions = pack.loss_mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i as u32);
    let entries = rows
        .rows()
        .zip(positions)
        .map(|(row, position)| {
            let indices = top_k_indices(row, k);
            let logits = indices.iter().map(|&i| row[i as usize] as f32).collect();
            TopKAnnotation {
                position,
                indices,
                logits,
            }
        })
        .collect();
    Ok(AnnotationBlock {
        pack_index: pack_index as u32,
        entries,
    })
}

/// One prefill per pack, annotating only loss-masked positions.
pub fn annotate(teacher: &TinyLmParams, packs: &PackFile, k: usize) -> Result<Sidecar> {
    let v = teacher.dims().vocab_size;
    if packs.vocab_size != v {
        return Err(NpdError::Config(format!(
            "teacher vocab {v} does not match pack vocab {}",
            packs.vocab_size
        )));
    }
    if k == 0 || k > v {
        return Err(NpdError::Config(format!("top-k {k} must be in 1..={v}")));
    }
    let eval = Evaluator::new(teacher);
    let blocks = packs
        .packs
        .par_iter()
        .enumerate()
        .map(|(i, p)| annotate_pack(&eval, i, p, k))
        .collect::<Result<Vec<_>>>()?;
    Ok(Sidecar {
        k,
        pack_file_crc: packs.crc,
        blocks,
    })
}

impl Sidecar {
    pub fn position_count(&self) -> usize {
        self.blocks.iter().map(|b| b.entries.len()).sum()
    }

    /// Fails unless this sidecar was produced from `packs` and lines up with
    /// every pack's loss mask.
    pub fn check_against(&self, packs: &PackFile) -> Result<()> {
        if self.pack_file_crc != packs.crc {
            return Err(NpdError::Staleness(format!(
                "sidecar references pack file CRC {:08x}, pack file has {:08x}",
                self.pack_file_crc, packs.crc
            )));
        }
        if self.blocks.len() != packs.packs.len() {
            return Err(NpdError::Staleness("sidecar block count differs from pack count".into()));
        }
        for (b, p) in self.blocks.iter().zip(&packs.packs) {
            if b.entries.len() != p.masked_positions()
                || b.entries.iter().any(|e| !p.loss_mask.get(e.position as usize).copied().unwrap_or(false))
            {
                return Err(NpdError::Staleness(format!(
                    "annotations of pack {} do not match its loss mask",
                    b.pack_index
                )));
            }
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = LeWriter::with_magic(SIDECAR_MAGIC);
        w.u32(self.k as u32);
        w.u32(self.position_count() as u32);
        w.u32(self.pack_file_crc);
        for b in &self.blocks {
            for e in &b.entries {
                w.u32(b.pack_index);
                w.u32(e.position);
                for (&i, &l) in e.indices.iter().zip(&e.logits) {
                    w.u32(i);
                    w.f32(l);
                }
            }
        }
        w.finish()
    }

    /// Reconstructs blocks by grouping consecutive positions of the same
    /// pack; packs with no supervised position reappear as empty blocks
    /// once checked against the pack file via [`Sidecar::decode_for`].
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = LeReader::open(bytes, SIDECAR_MAGIC, "sidecar")?;
        let k = r.u32()? as usize;
        let count = r.u32()? as usize;
        let pack_file_crc = r.u32()?;
        if r.remaining() != count * (8 + 8 * k) {
            return Err(NpdError::Format("sidecar: body size does not match header".into()));
        }
        let mut blocks: Vec<AnnotationBlock> = Vec::new();
        for _ in 0..count {
            let pack_index = r.u32()?;
            let position = r.u32()?;
            let mut indices = Vec::with_capacity(k);
            let mut logits = Vec::with_capacity(k);
            for _ in 0..k {
                indices.push(r.u32()?);
                logits.push(r.f32()?);
            }
            let entry = TopKAnnotation {
                position,
                indices,
                logits,
            };
            match blocks.last_mut() {
                Some(b) if b.pack_index == pack_index => b.entries.push(entry),
                Some(b) if b.pack_index > pack_index => {
                    return Err(NpdError::Format("sidecar: pack indices out of order".into()))
                }
                _ => blocks.push(AnnotationBlock {
                    pack_index,
                    entries: vec![entry],
                }),
            }
        }
        r.expect_end()?;
        Ok(Sidecar {
            k,
            pack_file_crc,
            blocks,
        })
    }

    /// Decodes and re-expands to one block per pack, then checks alignment.
    pub fn decode_for(bytes: &[u8], packs: &PackFile) -> Result<Self> {
        let raw = Self::decode(bytes)?;
        if raw.pack_file_crc != packs.crc {
            return Err(NpdError::Staleness(format!(
                "sidecar references pack file CRC {:08x}, pack file has {:08x}",
                raw.pack_file_crc, packs.crc
            )));
        }
        let mut blocks: Vec<AnnotationBlock> = (0..packs.packs.len() as u32)
            .map(|pack_index| AnnotationBlock {
                pack_index,
                entries: Vec::new(),
            })
            .collect();
        for b in raw.blocks {
            let slot = blocks
                .get_mut(b.pack_index as usize)
                .ok_or_else(|| NpdError::Staleness(format!("sidecar names missing pack {}", b.pack_index)))?;
            slot.entries = b.entries;
        }
        let sidecar = Sidecar {
            k: raw.k,
            pack_file_crc: raw.pack_file_crc,
            blocks,
        };
        sidecar.check_against(packs)?;
        Ok(sidecar)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::atomic_write(path, &self.encode())
    }

    pub fn load_for(path: &Path, packs: &PackFile) -> Result<Self> {
        Self::decode_for(&io::read_file(path)?, packs)
    }
}
