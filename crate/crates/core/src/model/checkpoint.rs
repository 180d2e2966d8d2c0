//! Binary checkpoint container (little-endian):
//!
//! ```text
//! magic "GRLCKPT\0" | u32 version | u32 vocab | u32 d_embed | u32 d_hidden
//! | u64 vocab fingerprint | u32 n_tokens | (u32 len, utf-8 bytes)*
//! | u64 n_params | f64* | u64 checksum of everything before it
//! ```

use std::path::Path;

use super::{NetShape, PolicyValueNet};
use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::io::write_atomic;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"GRLCKPT\0";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub net: PolicyValueNet,
    pub vocab: Vocabulary,
}

fn checksum(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

pub fn encode_checkpoint(net: &PolicyValueNet, vocab: &Vocabulary) -> Result<Vec<u8>> {
    let shape = net.shape();
    if shape.vocab != vocab.len() {
        return Err(Error::Checkpoint(format!(
            "network vocabulary {} does not match vocabulary of {} tokens",
            shape.vocab,
            vocab.len()
        )));
    }
    let mut buf = Vec::with_capacity(64 + net.params().len() * 8);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for d in [shape.vocab, shape.d_embed, shape.d_hidden] {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    buf.extend_from_slice(&vocab.fingerprint().to_le_bytes());
    buf.extend_from_slice(&(vocab.len() as u32).to_le_bytes());
    for t in vocab.tokens() {
        buf.extend_from_slice(&(t.len() as u32).to_le_bytes());
        buf.extend_from_slice(t.as_bytes());
    }
    buf.extend_from_slice(&(net.params().len() as u64).to_le_bytes());
    for p in net.params() {
        buf.extend_from_slice(&p.to_le_bytes());
    }
    let sum = checksum(&buf);
    buf.extend_from_slice(&sum.to_le_bytes());
    Ok(buf)
}

pub fn save_checkpoint(net: &PolicyValueNet, vocab: &Vocabulary, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path, &encode_checkpoint(net, vocab)?)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint("file is truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(buf: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let shape = NetShape::with_dims(r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    let fingerprint = r.u64()?;
    let n_tokens = r.u32()? as usize;
    if n_tokens != shape.vocab {
        return Err(Error::Checkpoint("token list length disagrees with header".into()));
    }
    let mut tokens = Vec::with_capacity(n_tokens);
    for _ in 0..n_tokens {
        let len = r.u32()? as usize;
        let bytes = r.take(len)?;
        tokens.push(
            String::from_utf8(bytes.to_vec()).map_err(|_| Error::Checkpoint("token is not UTF-8".into()))?,
        );
    }
    let n_params = r.u64()? as usize;
    if n_params != shape.n_params() {
        return Err(Error::Checkpoint(format!(
            "expected {} parameters for {shape:?}, header says {n_params}",
            shape.n_params()
        )));
    }
    let raw = r.take(n_params.checked_mul(8).ok_or_else(|| Error::Checkpoint("parameter count overflow".into()))?)?;
    let params: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    let body_end = r.pos;
    let stored = r.u64()?;
    if r.pos != buf.len() {
        return Err(Error::Checkpoint("trailing bytes after checksum".into()));
    }
    if stored != checksum(&buf[..body_end]) {
        return Err(Error::Checkpoint("checksum mismatch".into()));
    }
    let vocab = Vocabulary::from_full_list(tokens).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if vocab.fingerprint() != fingerprint {
        return Err(Error::Checkpoint("vocabulary fingerprint mismatch".into()));
    }
    Ok(Checkpoint {
        net: PolicyValueNet::from_params(shape, params)?,
        vocab,
    })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    decode_checkpoint(&std::fs::read(path)?)
}

/// Loads a checkpoint and checks that it was trained with `vocab`.
pub fn load_checkpoint_for(path: impl AsRef<Path>, vocab: &Vocabulary) -> Result<PolicyValueNet> {
    let ck = load_checkpoint(path)?;
    if ck.net.shape().vocab != vocab.len() {
        return Err(Error::Checkpoint(format!(
            "shape mismatch: checkpoint vocabulary has {} tokens, expected {}",
            ck.net.shape().vocab,
            vocab.len()
        )));
    }
    if ck.vocab.fingerprint() != vocab.fingerprint() {
        return Err(Error::Checkpoint("checkpoint was trained with a different vocabulary".into()));
    }
    Ok(ck.net)
}
