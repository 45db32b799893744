//! Binary dataset dumps.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"CPCDATA1"
//! u64            header length in bytes
//! header         UTF-8 JSON (`DatasetHeader`)
//! f64 × F·D      observations, frame-major (frame 0 channels, frame 1 channels, ...)
//! u32 × F        hidden-state label per frame
//! u32 × F        source id per frame
//! u32 × F        sequence id per frame
//! ```
//!
//! Frames of one sequence are contiguous and in time order; sequence
//! boundaries are recorded in the header.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{LabeledSequence, LatentMarkovSequenceTask};
use crate::autodiff::Tensor;
use crate::error::{CpcError, Result};

pub const MAGIC: &[u8; 8] = b"CPCDATA1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceEntry {
    pub id: usize,
    pub source: usize,
    pub frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub format: String,
    pub version: u32,
    pub split: String,
    pub task: LatentMarkovSequenceTask,
    pub frames: usize,
    pub dim: usize,
    pub sequences: Vec<SequenceEntry>,
}

pub fn write_dataset<W: Write>(
    mut w: W,
    split: &str,
    task: &LatentMarkovSequenceTask,
    seqs: &[LabeledSequence],
) -> Result<()> {
    let dim = task.dim;
    let header = DatasetHeader {
        format: "cpc-lab-dataset".into(),
        version: 1,
        split: split.into(),
        task: task.clone(),
        frames: seqs.iter().map(|s| s.states.len()).sum(),
        dim,
        sequences: seqs
            .iter()
            .map(|s| SequenceEntry {
                id: s.id,
                source: s.source,
                frames: s.states.len(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    w.write_all(MAGIC)?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for s in seqs {
        let len = s.states.len();
        for t in 0..len {
            for ch in 0..dim {
                w.write_all(&s.observations.values()[ch * len + t].to_le_bytes())?;
            }
        }
    }
    for s in seqs {
        for &st in &s.states {
            w.write_all(&(st as u32).to_le_bytes())?;
        }
    }
    for s in seqs {
        for _ in 0..s.states.len() {
            w.write_all(&(s.source as u32).to_le_bytes())?;
        }
    }
    for s in seqs {
        for _ in 0..s.states.len() {
            w.write_all(&(s.id as u32).to_le_bytes())?;
        }
    }
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(CpcError::Dataset(format!(
                "truncated at byte offset {} while reading {what}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn read_dataset<R: Read>(mut r: R) -> Result<(DatasetHeader, Vec<LabeledSequence>)> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let mut cur = Cursor { buf: &buf, pos: 0 };
    if cur.take(8, "magic")? != MAGIC {
        return Err(CpcError::Dataset("bad magic at byte offset 0".into()));
    }
    let hlen = u64::from_le_bytes(cur.take(8, "header length")?.try_into().unwrap()) as usize;
    let header: DatasetHeader = serde_json::from_slice(cur.take(hlen, "header")?)
        .map_err(|e| CpcError::Dataset(format!("header at byte offset 16: {e}")))?;
    let dim = header.dim;
    let total: usize = header.sequences.iter().map(|s| s.frames).sum();
    if total != header.frames {
        return Err(CpcError::Dataset(format!(
            "header field `frames` is {} but sequences hold {total}",
            header.frames
        )));
    }
    let mut obs_all = Vec::with_capacity(total * dim);
    for _ in 0..total * dim {
        obs_all.push(f64::from_le_bytes(cur.take(8, "observations")?.try_into().unwrap()));
    }
    let mut labels = Vec::with_capacity(total);
    for _ in 0..total {
        labels.push(cur.u32("state labels")? as usize);
    }
    for _ in 0..2 * total {
        cur.u32("source/sequence ids")?;
    }
    if cur.pos != buf.len() {
        return Err(CpcError::Dataset(format!(
            "{} trailing bytes at offset {}",
            buf.len() - cur.pos,
            cur.pos
        )));
    }
    let mut seqs = Vec::with_capacity(header.sequences.len());
    let mut off = 0;
    for e in &header.sequences {
        let len = e.frames;
        let mut obs = vec![0.0; dim * len];
        for t in 0..len {
            for ch in 0..dim {
                obs[ch * len + t] = obs_all[(off + t) * dim + ch];
            }
        }
        seqs.push(LabeledSequence {
            id: e.id,
            source: e.source,
            observations: Tensor::new(vec![dim, len], obs)?,
            states: labels[off..off + len].to_vec(),
        });
        off += len;
    }
    Ok((header, seqs))
}
