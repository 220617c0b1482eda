//! Versioned binary checkpoints with exact byte round-trips.
//!
//! Layout (all integers little-endian): a magic tag and version, the JSON
//! config echo, the flat parameter array as raw f64 bits, the running
//! batch-norm statistics, the step counter, and a trailing FNV-1a checksum
//! of everything before it.

use super::mlp::Mlp;
use super::MlpConfig;
use crate::error::{DfpError, Result};
use std::io::{Read, Write};

const NET_MAGIC: &[u8; 4] = b"DFPN";
const CONTAINER_MAGIC: &[u8; 4] = b"DFPC";
const VERSION: u32 = 1;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01B3);
    }
    hash
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Writer { buf: Vec::new() }
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64_slice(&mut self, v: &[f64]) {
        self.u64(v.len() as u64);
        for x in v {
            self.buf.extend_from_slice(&x.to_bits().to_le_bytes());
        }
    }

    fn bytes(&mut self, v: &[u8]) {
        self.u64(v.len() as u64);
        self.buf.extend_from_slice(v);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(DfpError::Checkpoint("truncated checkpoint".into()));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64_vec(&mut self) -> Result<Vec<f64>> {
        let n = self.u64()? as usize;
        if n > self.buf.len() {
            return Err(DfpError::Checkpoint("corrupt length field".into()));
        }
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let bits = u64::from_le_bytes(self.take(8)?.try_into().unwrap());
            out.push(f64::from_bits(bits));
        }
        Ok(out)
    }

    fn byte_vec(&mut self) -> Result<Vec<u8>> {
        let n = self.u64()? as usize;
        if n > self.buf.len() {
            return Err(DfpError::Checkpoint("corrupt length field".into()));
        }
        Ok(self.take(n)?.to_vec())
    }
}

fn encode_mlp(w: &mut Writer, net: &Mlp) -> Result<()> {
    w.buf.extend_from_slice(NET_MAGIC);
    w.u32(VERSION);
    let config = serde_json::to_vec(&net.config)
        .map_err(|e| DfpError::Checkpoint(format!("config encode: {e}")))?;
    w.bytes(&config);
    w.f64_slice(net.params());
    let (mean, var) = net.running_stats();
    w.u64(mean.len() as u64);
    for m in mean {
        w.f64_slice(m);
    }
    for v in var {
        w.f64_slice(v);
    }
    w.u64(net.train_steps);
    Ok(())
}

fn decode_mlp(r: &mut Reader) -> Result<Mlp> {
    if r.take(4)? != NET_MAGIC {
        return Err(DfpError::Checkpoint("bad network magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(DfpError::Checkpoint(format!("unsupported version {version}")));
    }
    let config_bytes = r.byte_vec()?;
    let config: MlpConfig = serde_json::from_slice(&config_bytes)
        .map_err(|e| DfpError::Checkpoint(format!("config decode: {e}")))?;
    let params = r.f64_vec()?;
    let n_bn = r.u64()? as usize;
    let mut mean = Vec::with_capacity(n_bn);
    for _ in 0..n_bn {
        mean.push(r.f64_vec()?);
    }
    let mut var = Vec::with_capacity(n_bn);
    for _ in 0..n_bn {
        var.push(r.f64_vec()?);
    }
    let train_steps = r.u64()?;
    let mut net = Mlp::new(config);
    net.set_params(&params)
        .map_err(|_| DfpError::Checkpoint("parameter count does not match config".into()))?;
    net.set_running_stats(mean, var)
        .map_err(|_| DfpError::Checkpoint("running-stat layout does not match config".into()))?;
    net.train_steps = train_steps;
    Ok(net)
}

pub fn write_mlp<W: Write>(out: &mut W, net: &Mlp) -> Result<()> {
    let mut w = Writer::new();
    encode_mlp(&mut w, net)?;
    let checksum = fnv1a(&w.buf);
    w.u64(checksum);
    out.write_all(&w.buf)?;
    Ok(())
}

pub fn read_mlp<R: Read>(input: &mut R) -> Result<Mlp> {
    let mut buf = Vec::new();
    input.read_to_end(&mut buf)?;
    if buf.len() < 12 {
        return Err(DfpError::Checkpoint("file too short".into()));
    }
    let (body, tail) = buf.split_at(buf.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().unwrap());
    if fnv1a(body) != stored {
        return Err(DfpError::Checkpoint("checksum mismatch (corrupted file)".into()));
    }
    decode_mlp(&mut Reader { buf: body, pos: 0 })
}

/// A named network inside an experiment checkpoint.
#[derive(Debug, Clone)]
pub struct CheckpointEntry {
    pub name: String,
    pub net: Mlp,
}

/// Write a multi-network container with a JSON metadata echo.
pub fn write_container<W: Write>(out: &mut W, meta_json: &str, entries: &[CheckpointEntry]) -> Result<()> {
    let mut w = Writer::new();
    w.buf.extend_from_slice(CONTAINER_MAGIC);
    w.u32(VERSION);
    w.bytes(meta_json.as_bytes());
    w.u64(entries.len() as u64);
    for entry in entries {
        w.bytes(entry.name.as_bytes());
        encode_mlp(&mut w, &entry.net)?;
    }
    let checksum = fnv1a(&w.buf);
    w.u64(checksum);
    out.write_all(&w.buf)?;
    Ok(())
}

pub fn read_container<R: Read>(input: &mut R) -> Result<(String, Vec<CheckpointEntry>)> {
    let mut buf = Vec::new();
    input.read_to_end(&mut buf)?;
    if buf.len() < 12 {
        return Err(DfpError::Checkpoint("file too short".into()));
    }
    let (body, tail) = buf.split_at(buf.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().unwrap());
    if fnv1a(body) != stored {
        return Err(DfpError::Checkpoint("checksum mismatch (corrupted file)".into()));
    }
    let mut r = Reader { buf: body, pos: 0 };
    if r.take(4)? != CONTAINER_MAGIC {
        return Err(DfpError::Checkpoint("bad container magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(DfpError::Checkpoint(format!("unsupported version {version}")));
    }
    let meta = String::from_utf8(r.byte_vec()?)
        .map_err(|_| DfpError::Checkpoint("metadata is not UTF-8".into()))?;
    let n = r.u64()? as usize;
    let mut entries = Vec::with_capacity(n);
    for _ in 0..n {
        let name = String::from_utf8(r.byte_vec()?)
            .map_err(|_| DfpError::Checkpoint("entry name is not UTF-8".into()))?;
        let net = decode_mlp(&mut r)?;
        entries.push(CheckpointEntry { name, net });
    }
    Ok((meta, entries))
}
