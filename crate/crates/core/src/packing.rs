//! Fixed-length sequence packing with segment ids and response-only loss
//! masks, plus the `NPDPACK1` binary pack file.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{PAD, SEP};
use crate::error::{NpdError, Result};
use crate::io::{self, LeReader, LeWriter};
use crate::model::SeqView;
use crate::sampling::Trajectory;

const PACK_MAGIC: &[u8; 8] = b"NPDPACK1";
pub const PAD_SEGMENT: u16 = 0xFFFF;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pack {
    pub tokens: Vec<u32>,
    pub segment_ids: Vec<u16>,
    pub loss_mask: Vec<bool>,
    pub source_ids: Vec<u64>,
}

impl Pack {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn occupied(&self) -> usize {
        self.segment_ids.iter().filter(|&&s| s != PAD_SEGMENT).count()
    }

    pub fn masked_positions(&self) -> usize {
        self.loss_mask.iter().filter(|&&m| m).count()
    }

    pub fn view(&self) -> SeqView<'_> {
        SeqView {
            tokens: &self.tokens,
            segment_ids: &self.segment_ids,
            loss_mask: &self.loss_mask,
        }
    }

    /// `(prompt, response)` of each segment in placement order, split at the
    /// loss-mask boundary.
    pub fn unpack(&self) -> Vec<(Vec<u32>, Vec<u32>)> {
        let mut out: Vec<(Vec<u32>, Vec<u32>)> = Vec::new();
        for i in 0..self.len() {
            let seg = self.segment_ids[i];
            if seg == PAD_SEGMENT {
                break;
            }
            if i == 0 || self.segment_ids[i - 1] != seg {
                out.push((Vec::new(), Vec::new()));
            }
            let cur = out.last_mut().unwrap();
            if self.loss_mask[i] {
                cur.1.push(self.tokens[i]);
            } else {
                cur.0.push(self.tokens[i]);
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PackStrategy {
    FirstFitDecreasing,
    Sequential,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PackConfig {
    pub pack_len: usize,
    pub strategy: PackStrategy,
}

impl Default for PackConfig {
    fn default() -> Self {
        PackConfig {
            pack_len: 256,
            strategy: PackStrategy::FirstFitDecreasing,
        }
    }
}

/// Bin assignment over bare lengths; each bin lists item indices in
/// placement order.
pub fn assign_bins(lengths: &[usize], ids: &[u64], pack_len: usize, strategy: PackStrategy) -> Vec<Vec<usize>> {
    let mut bins: Vec<Vec<usize>> = Vec::new();
    let mut fill: Vec<usize> = Vec::new();
    match strategy {
        PackStrategy::Sequential => {
            for (i, &len) in lengths.iter().enumerate() {
                match fill.last_mut() {
                    Some(f) if *f + len <= pack_len => {
                        *f += len;
                        bins.last_mut().unwrap().push(i);
                    }
                    _ => {
                        fill.push(len);
                        bins.push(vec![i]);
                    }
                }
            }
        }
        PackStrategy::FirstFitDecreasing => {
            let mut order: Vec<usize> = (0..lengths.len()).collect();
            order.sort_by(|&a, &b| lengths[b].cmp(&lengths[a]).then(ids[a].cmp(&ids[b])));
            for i in order {
                let len = lengths[i];
                match fill.iter().position(|&f| f + len <= pack_len) {
                    Some(b) => {
                        fill[b] += len;
                        bins[b].push(i);
                    }
                    None => {
                        fill.push(len);
                        bins.push(vec![i]);
                    }
                }
            }
        }
    }
    bins
}

pub fn pack(trajectories: &[Trajectory], cfg: &PackConfig) -> Result<Vec<Pack>> {
    let l = cfg.pack_len;
    if l == 0 || l > u32::MAX as usize {
        return Err(NpdError::Config(format!("invalid pack length {l}")));
    }
    let lengths: Vec<usize> = trajectories.iter().map(|t| t.prompt.len() + t.response.len()).collect();
    for (t, &len) in trajectories.iter().zip(&lengths) {
        if len > l {
            return Err(NpdError::OversizeSequence {
                id: t.id,
                len,
                pack_len: l,
            });
        }
    }
    let ids: Vec<u64> = trajectories.iter().map(|t| t.id).collect();
    assign_bins(&lengths, &ids, l, cfg.strategy)
        .into_iter()
        .map(|bin| {
            if bin.len() >= PAD_SEGMENT as usize {
                return Err(NpdError::Config("too many segments for one pack".into()));
            }
            let mut p = Pack {
                tokens: Vec::with_capacity(l),
                segment_ids: Vec::with_capacity(l),
                loss_mask: Vec::with_capacity(l),
                source_ids: Vec::with_capacity(bin.len()),
            };
            for (seg, &i) in bin.iter().enumerate() {
                let t = &trajectories[i];
                p.tokens.extend(&t.prompt);
                p.tokens.extend(&t.response);
                p.segment_ids.extend(std::iter::repeat_n(seg as u16, lengths[i]));
                p.loss_mask.extend(std::iter::repeat_n(false, t.prompt.len()));
                p.loss_mask.extend(std::iter::repeat_n(true, t.response.len()));
                p.source_ids.push(t.id);
            }
            let pad = l - p.tokens.len();
            p.tokens.extend(std::iter::repeat_n(PAD, pad));
            p.segment_ids.extend(std::iter::repeat_n(PAD_SEGMENT, pad));
            p.loss_mask.extend(std::iter::repeat_n(false, pad));
            Ok(p)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    LengthMismatch { expected: usize, tokens: usize, segment_ids: usize, loss_mask: usize },
    SegmentDecreasing { position: usize },
    PadTokenMismatch { position: usize },
    LossOnPad { position: usize },
    LossOnPrompt { position: usize },
    ResponseUnmasked { position: usize },
    MissingSeparator { segment: u16 },
    TokenOutOfVocab { position: usize, token: u32 },
}

/// Checks every pack invariant. A segment's prompt runs through its first
/// SEP; everything after is response and must be supervised.
pub fn validate_pack(pack: &Pack, pack_len: usize, vocab_size: usize) -> Vec<Violation> {
    let mut out = Vec::new();
    let n = pack.tokens.len();
    if n != pack_len || pack.segment_ids.len() != n || pack.loss_mask.len() != n {
        out.push(Violation::LengthMismatch {
            expected: pack_len,
            tokens: n,
            segment_ids: pack.segment_ids.len(),
            loss_mask: pack.loss_mask.len(),
        });
        return out;
    }
    let mut seen_sep = false;
    for i in 0..n {
        let seg = pack.segment_ids[i];
        let tok = pack.tokens[i];
        if tok as usize >= vocab_size {
            out.push(Violation::TokenOutOfVocab { position: i, token: tok });
        }
        let new_segment = i == 0 || pack.segment_ids[i - 1] != seg;
        if i > 0 && seg < pack.segment_ids[i - 1] {
            out.push(Violation::SegmentDecreasing { position: i });
        }
        if new_segment && i > 0 && !seen_sep && pack.segment_ids[i - 1] != PAD_SEGMENT {
            out.push(Violation::MissingSeparator {
                segment: pack.segment_ids[i - 1],
            });
        }
        if new_segment {
            seen_sep = false;
        }
        if seg == PAD_SEGMENT {
            if tok != PAD {
                out.push(Violation::PadTokenMismatch { position: i });
            }
            if pack.loss_mask[i] {
                out.push(Violation::LossOnPad { position: i });
            }
            continue;
        }
        let in_prompt = !seen_sep;
        if tok == SEP && !seen_sep {
            seen_sep = true;
        }
        match (in_prompt, pack.loss_mask[i]) {
            (true, true) => out.push(Violation::LossOnPrompt { position: i }),
            (false, false) => out.push(Violation::ResponseUnmasked { position: i }),
            _ => {}
        }
    }
    if n > 0 && pack.segment_ids[n - 1] != PAD_SEGMENT && !seen_sep {
        out.push(Violation::MissingSeparator {
            segment: pack.segment_ids[n - 1],
        });
    }
    out
}

pub fn encode_packs(packs: &[Pack], pack_len: usize, vocab_size: usize) -> Result<Vec<u8>> {
    let mut w = LeWriter::with_magic(PACK_MAGIC);
    w.u32(pack_len as u32);
    w.u32(packs.len() as u32);
    w.u32(vocab_size as u32);
    for p in packs {
        if p.len() != pack_len {
            return Err(NpdError::Input(format!("pack of length {} in a file of length {pack_len}", p.len())));
        }
        p.tokens.iter().for_each(|&t| w.u32(t));
        p.segment_ids.iter().for_each(|&s| w.u16(s));
        p.loss_mask.iter().for_each(|&m| w.u8(m as u8));
    }
    Ok(w.finish())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackFile {
    pub pack_len: usize,
    pub vocab_size: usize,
    pub packs: Vec<Pack>,
    /// Trailing CRC32 of the file; sidecars reference packs by this value.
    pub crc: u32,
}

impl PackFile {
    pub fn new(packs: Vec<Pack>, pack_len: usize, vocab_size: usize) -> Result<Self> {
        let crc = LeReader::stored_crc(&encode_packs(&packs, pack_len, vocab_size)?);
        Ok(PackFile {
            pack_len,
            vocab_size,
            packs,
            crc,
        })
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        encode_packs(&self.packs, self.pack_len, self.vocab_size)
    }

    /// Source ids are not part of the binary format and decode empty.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = LeReader::open(bytes, PACK_MAGIC, "pack file")?;
        let pack_len = r.u32()? as usize;
        let count = r.u32()? as usize;
        let vocab_size = r.u32()? as usize;
        if r.remaining() != count * pack_len * 7 {
            return Err(NpdError::Format("pack file: body size does not match header".into()));
        }
        let mut packs = Vec::with_capacity(count);
        for _ in 0..count {
            let tokens = (0..pack_len).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            let segment_ids = (0..pack_len).map(|_| r.u16()).collect::<Result<Vec<_>>>()?;
            let loss_mask = (0..pack_len)
                .map(|_| match r.u8()? {
                    0 => Ok(false),
                    1 => Ok(true),
                    b => Err(NpdError::Format(format!("pack file: loss mask byte {b}"))),
                })
                .collect::<Result<Vec<_>>>()?;
            packs.push(Pack {
                tokens,
                segment_ids,
                loss_mask,
                source_ids: Vec::new(),
            });
        }
        r.expect_end()?;
        Ok(PackFile {
            pack_len,
            vocab_size,
            packs,
            crc: LeReader::stored_crc(bytes),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::atomic_write(path, &self.encode()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&io::read_file(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, p) in self.packs.iter().enumerate() {
            let v = validate_pack(p, self.pack_len, self.vocab_size);
            if !v.is_empty() {
                return Err(NpdError::Format(format!("pack {i} invalid: {v:?}")));
            }
        }
        Ok(())
    }
}
