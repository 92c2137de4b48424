//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic  "PROMPTCL" (8 bytes)
//! version u8 = 1
//! header  u32 length + UTF-8 JSON {config, backbone_hash, meta}
//! vocab   u32 length + one token per line (length 0 when absent)
//! count   u32
//! tensor* u16 name length, name, u8 dtype (1 = f64), u8 ndim, u64 dims, values
//! ```
//!
//! Backbone tensors are optional. Without them the backbone is regenerated
//! from the config seed and must reproduce the recorded hash.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EncoderConfig, EncoderState};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::text::Vocab;

const MAGIC: &[u8; 8] = b"PROMPTCL";
const VERSION: u8 = 1;
const DTYPE_F64: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub state: EncoderState,
    pub vocab: Option<Vocab>,
    /// Free-form string metadata, e.g. whether evaluation uses the head.
    pub meta: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: EncoderConfig,
    backbone_hash: String,
    meta: BTreeMap<String, String>,
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    out.extend((name.len() as u16).to_le_bytes());
    out.extend(name.as_bytes());
    out.push(DTYPE_F64);
    out.push(t.shape().len() as u8);
    for &d in t.shape() {
        out.extend((d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend(v.to_le_bytes());
    }
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint, include_backbone: bool) -> Result<()> {
    let header = Header {
        config: ck.state.config.clone(),
        backbone_hash: ck.state.backbone_hash().to_string(),
        meta: ck.meta.clone(),
    };
    let header = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let vocab = ck.vocab.as_ref().map(Vocab::to_text).unwrap_or_default();

    let mut tensors = ck.state.trainable();
    if include_backbone {
        tensors.extend(ck.state.backbone.named());
    }
    let mut out = Vec::new();
    out.extend(MAGIC);
    out.push(VERSION);
    out.extend((header.len() as u32).to_le_bytes());
    out.extend(&header);
    out.extend((vocab.len() as u32).to_le_bytes());
    out.extend(vocab.as_bytes());
    out.extend((tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        put_tensor(&mut out, &name, t);
    }
    Ok(std::fs::write(path, out)?)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
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

    fn str(&mut self, n: usize) -> Result<&'a str> {
        std::str::from_utf8(self.take(n)?).map_err(|e| Error::Checkpoint(e.to_string()))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let buf = std::fs::read(path)?;
    let mut r = Reader { buf: &buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a checkpoint file",
            path.display()
        )));
    }
    let version = r.u8()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let n = r.u32()? as usize;
    let header: Header =
        serde_json::from_str(r.str(n)?).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let n = r.u32()? as usize;
    let vocab_text = r.str(n)?;
    let vocab = if vocab_text.is_empty() {
        None
    } else {
        Some(Vocab::from_text(vocab_text)?)
    };

    let count = r.u32()?;
    let mut tensors: HashMap<String, Tensor> = HashMap::new();
    for _ in 0..count {
        let n = r.u16()? as usize;
        let name = r.str(n)?.to_string();
        if r.u8()? != DTYPE_F64 {
            return Err(Error::Checkpoint(format!(
                "tensor {name}: unsupported dtype"
            )));
        }
        let ndim = r.u8()? as usize;
        let shape = (0..ndim)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(shape, data)
            .map_err(|e| Error::Checkpoint(format!("tensor {name}: {e}")))?;
        tensors.insert(name, t);
    }
    if r.pos != buf.len() {
        return Err(Error::Checkpoint("trailing bytes after last tensor".into()));
    }

    let mut state = EncoderState::init(header.config)?;
    let has_backbone = state
        .backbone
        .named()
        .iter()
        .any(|(n, _)| tensors.contains_key(n));
    if has_backbone {
        let mut bb = state.backbone.clone();
        fill(bb.named_mut(), &mut tensors)?;
        state.set_backbone(bb)?;
    }
    if state.backbone_hash() != header.backbone_hash {
        return Err(Error::Checkpoint(format!(
            "backbone hash mismatch: recorded {}, reconstructed {}",
            header.backbone_hash,
            state.backbone_hash()
        )));
    }
    let names: Vec<String> = state.trainable().into_iter().map(|(n, _)| n).collect();
    fill(
        names.into_iter().zip(state.trainable_mut()).collect(),
        &mut tensors,
    )?;
    if let Some(extra) = tensors.keys().next() {
        return Err(Error::Checkpoint(format!("unexpected tensor {extra}")));
    }
    Ok(Checkpoint {
        state,
        vocab,
        meta: header.meta,
    })
}

fn fill(slots: Vec<(String, &mut Tensor)>, tensors: &mut HashMap<String, Tensor>) -> Result<()> {
    for (name, slot) in slots {
        let t = tensors
            .remove(&name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
        if t.shape() != slot.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor {name}: shape {:?}, expected {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        *slot = t;
    }
    Ok(())
}

/// Writes every backbone value as raw little-endian f64, in the fixed
/// tensor order of [`super::Backbone::named`].
pub fn export_backbone_blob(state: &EncoderState, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    for (_, t) in state.backbone.named() {
        for v in t.data() {
            out.extend(v.to_le_bytes());
        }
    }
    Ok(std::fs::write(path, out)?)
}

/// Replaces the backbone with a raw little-endian f64 blob whose length must
/// match the configuration exactly.
pub fn import_backbone_blob(state: &mut EncoderState, path: &Path) -> Result<()> {
    let raw = std::fs::read(path)?;
    let mut bb = state.backbone.clone();
    let expected: usize = bb.named().iter().map(|(_, t)| t.numel()).sum::<usize>() * 8;
    if raw.len() != expected {
        return Err(Error::Validation(format!(
            "backbone blob has {} bytes, configuration needs {expected}",
            raw.len()
        )));
    }
    let mut vals = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    for (_, t) in bb.named_mut() {
        for x in t.data_mut() {
            *x = vals.next().expect("length checked");
        }
    }
    state.set_backbone(bb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::PromptType;

    fn state() -> EncoderState {
        let mut c = EncoderConfig::desk(12);
        c.prompt_type = PromptType::Shared;
        let mut s = EncoderState::init(c).unwrap();
        s.prompts[0].data_mut()[0] = 0.75;
        s
    }

    #[test]
    fn round_trip_with_and_without_backbone() {
        let dir = tempfile::tempdir().unwrap();
        let vocab = Vocab::from_sentences(&["x y"], 12).unwrap();
        let ck = Checkpoint {
            state: state(),
            vocab: Some(vocab),
            meta: BTreeMap::from([("eval_use_head".into(), "false".into())]),
        };
        for include in [true, false] {
            let p = dir.path().join(format!("ck{include}"));
            save_checkpoint(&p, &ck, include).unwrap();
            assert_eq!(load_checkpoint(&p).unwrap(), ck);
        }
    }

    #[test]
    fn imported_backbone_requires_embedding_it() {
        let dir = tempfile::tempdir().unwrap();
        let blob = dir.path().join("bb.bin");
        let mut s = state();
        export_backbone_blob(&s, &blob).unwrap();
        let mut raw = std::fs::read(&blob).unwrap();
        raw[..8].copy_from_slice(&1.5f64.to_le_bytes());
        std::fs::write(&blob, &raw).unwrap();
        import_backbone_blob(&mut s, &blob).unwrap();
        assert_eq!(s.backbone.tok_emb.data()[0], 1.5);

        let ck = Checkpoint {
            state: s,
            vocab: None,
            meta: BTreeMap::new(),
        };
        let p = dir.path().join("ck");
        save_checkpoint(&p, &ck, false).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::Checkpoint(_))));
        save_checkpoint(&p, &ck, true).unwrap();
        assert_eq!(load_checkpoint(&p).unwrap(), ck);

        std::fs::write(&blob, &raw[..raw.len() - 8]).unwrap();
        let mut s2 = state();
        assert!(import_backbone_blob(&mut s2, &blob).is_err());
    }

    #[test]
    fn rejects_foreign_and_truncated_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x");
        std::fs::write(&p, b"NOTACKPTxxxx").unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::Checkpoint(_))));
        let ck = Checkpoint {
            state: state(),
            vocab: None,
            meta: BTreeMap::new(),
        };
        save_checkpoint(&p, &ck, false).unwrap();
        let raw = std::fs::read(&p).unwrap();
        std::fs::write(&p, &raw[..raw.len() - 3]).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::Checkpoint(_))));
    }
}
