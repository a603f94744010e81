//! Model checkpoint: a single binary file with a `FEPN` magic header and a
//! version byte, then the full parameter state as little-endian f64.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset size  field
//! 0      4     magic "FEPN"
//! 4      1     version (currently 1)
//! 5      4     flow dimension D (u32)
//! 9      4     coupling block count B (u32)
//! 13     4     coupling hidden width H (u32)
//! 17     ...   inlier flow:  B·D mask bytes (1 = conditioning dim),
//!              then its parameter vector (f64 × param_count)
//! ...    ...   outlier flow: same layout
//! ...    8     prior_in (f64)
//! ...    ...   residual head parameters (f64 × (2·D + 2))
//! ```
//!
//! Parameter vectors are in canonical order: per block scale net
//! (w1, b1, w2, b2) then shift net, then head (mu, log_diag, lower).

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::flow::{ClassConditionalFlows, FlowModel};
use crate::train::ResidualHead;

pub const MAGIC: [u8; 4] = *b"FEPN";
pub const VERSION: u8 = 1;

fn push_f64s(buf: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn write_flow(buf: &mut Vec<u8>, flow: &FlowModel) {
    for block in flow.blocks() {
        buf.extend(block.mask().iter().map(|&m| m as u8));
    }
    push_f64s(buf, &flow.params());
}

pub fn to_bytes(flows: &ClassConditionalFlows, head: &ResidualHead) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&MAGIC);
    buf.push(VERSION);
    buf.extend_from_slice(&(flows.dim() as u32).to_le_bytes());
    buf.extend_from_slice(&(flows.flow_in.blocks().len() as u32).to_le_bytes());
    buf.extend_from_slice(&(flows.flow_in.hidden() as u32).to_le_bytes());
    write_flow(&mut buf, &flows.flow_in);
    write_flow(&mut buf, &flows.flow_out);
    push_f64s(&mut buf, &[flows.prior_in()]);
    push_f64s(&mut buf, &head.params());
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("file truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

fn read_flow(r: &mut Reader, dim: usize, blocks: usize, hidden: usize) -> Result<FlowModel> {
    let mut masks = Vec::with_capacity(blocks);
    for _ in 0..blocks {
        let raw = r.take(dim)?;
        if raw.iter().any(|&b| b > 1) {
            return Err(Error::Checkpoint("mask bytes must be 0 or 1".into()));
        }
        masks.push(raw.iter().map(|&b| b == 1).collect());
    }
    let count = flow_param_count(dim, hidden, &masks);
    let params = r.f64s(count)?;
    FlowModel::from_parts(dim, hidden, masks, &params)
}

fn flow_param_count(dim: usize, hidden: usize, masks: &[Vec<bool>]) -> usize {
    let mut count = 0;
    for mask in masks {
        let cond = mask.iter().filter(|&&m| m).count();
        let trans = dim - cond;
        // two nets, each: w1 (hidden·cond) + b1 (hidden) + w2 (trans·hidden) + b2 (trans)
        count += 2 * (hidden * cond + hidden + trans * hidden + trans);
    }
    count + dim + dim + dim * (dim - 1) / 2
}

pub fn from_bytes(bytes: &[u8]) -> Result<(ClassConditionalFlows, ResidualHead)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint(
            "bad magic; not a model checkpoint".into(),
        ));
    }
    let version = r.take(1)?[0];
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let dim = r.u32()? as usize;
    let blocks = r.u32()? as usize;
    let hidden = r.u32()? as usize;
    if dim < 2 || blocks == 0 || hidden == 0 {
        return Err(Error::Checkpoint("implausible model shape".into()));
    }
    let flow_in = read_flow(&mut r, dim, blocks, hidden)?;
    let flow_out = read_flow(&mut r, dim, blocks, hidden)?;
    let prior_in = r.f64s(1)?[0];
    let mut head = ResidualHead::new(dim)?;
    let head_params = r.f64s(head.param_count())?;
    head.set_params(&head_params)?;
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok((
        ClassConditionalFlows::new(flow_in, flow_out, prior_in)?,
        head,
    ))
}

pub fn save<P: AsRef<Path>>(
    path: P,
    flows: &ClassConditionalFlows,
    head: &ResidualHead,
) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&to_bytes(flows, head))?;
    Ok(())
}

pub fn load<P: AsRef<Path>>(path: P) -> Result<(ClassConditionalFlows, ResidualHead)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    from_bytes(&bytes)
}
