//! Single-file binary checkpoint holding every expert's parameters.
//!
//! Layout (little endian): `V2CK`, version `u32`, SHA-256 of the model config
//! text (32 bytes), backend seed `u64`, config text (`u32` length + UTF-8),
//! expert count `u32`, then per expert: kind `u8`, steps `u64`, store count
//! `u8` and per store a tensor count `u32` followed by named f32 tensors
//! (`u16` name length, name, `u8` rank, `u32` dims, raw f32 data).

use std::fs;
use std::path::Path;

use candle_core::DType;
use sha2::{Digest, Sha256};

use crate::config::KeyValue;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::nn::ParamStore;
use crate::pipeline::{Expert, ExpertKind};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"V2CK";
pub const CHECKPOINT_VERSION: u32 = 1;

pub struct Checkpoint {
    pub model: ModelConfig,
    pub experts: Vec<Expert>,
}

impl Checkpoint {
    pub fn expert(&self, kind: ExpertKind) -> Option<&Expert> {
        self.experts.iter().find(|e| e.kind == kind)
    }

    pub fn expert_mut(&mut self, kind: ExpertKind) -> Option<&mut Expert> {
        self.experts.iter_mut().find(|e| e.kind == kind)
    }
}

pub fn config_hash(model: &ModelConfig) -> [u8; 32] {
    Sha256::digest(model.to_text().as_bytes()).into()
}

fn put_store(out: &mut Vec<u8>, store: &ParamStore) -> Result<()> {
    let tensors = store.export_f32()?;
    out.extend((tensors.len() as u32).to_le_bytes());
    for (name, dims, data) in tensors {
        out.extend((name.len() as u16).to_le_bytes());
        out.extend(name.as_bytes());
        out.push(dims.len() as u8);
        for d in dims {
            out.extend((d as u32).to_le_bytes());
        }
        for v in data {
            out.extend(v.to_le_bytes());
        }
    }
    Ok(())
}

pub fn encode_checkpoint(model: &ModelConfig, experts: &[Expert]) -> Result<Vec<u8>> {
    let text = model.to_text();
    let mut out = Vec::new();
    out.extend(CHECKPOINT_MAGIC);
    out.extend(CHECKPOINT_VERSION.to_le_bytes());
    out.extend(config_hash(model));
    out.extend(model.backend_seed.to_le_bytes());
    out.extend((text.len() as u32).to_le_bytes());
    out.extend(text.as_bytes());
    out.extend((experts.len() as u32).to_le_bytes());
    for e in experts {
        out.push(e.kind.tag());
        out.extend((e.steps as u64).to_le_bytes());
        out.push(if e.matcher.is_some() { 2 } else { 1 });
        put_store(&mut out, &e.decoder.store)?;
        if let Some(m) = &e.matcher {
            put_store(&mut out, &m.store)?;
        }
    }
    Ok(out)
}

pub fn save_checkpoint(path: impl AsRef<Path>, model: &ModelConfig, experts: &[Expert]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(model, experts)?).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    section: String,
}

impl<'a> Reader<'a> {
    fn corrupt(&self, message: impl Into<String>) -> Error {
        Error::CorruptCheckpoint {
            section: self.section.clone(),
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.corrupt(format!(
                "truncated at byte {}: need {n} more bytes, have {}",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
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
}

fn read_store(r: &mut Reader, store: &ParamStore) -> Result<()> {
    let n = r.u32()? as usize;
    if n != store.len() {
        return Err(r.corrupt(format!("expected {} tensors, found {n}", store.len())));
    }
    for _ in 0..n {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| r.corrupt("tensor name is not UTF-8"))?
            .to_string();
        let rank = r.u8()? as usize;
        let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let count: usize = dims.iter().product();
        let raw = r.take(count * 4)?;
        let data: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        store
            .import_f32(&name, &dims, &data)
            .map_err(|e| r.corrupt(format!("tensor {name}: {e}")))?;
    }
    Ok(())
}

/// Decodes a checkpoint. When `expected` is given and its hash differs from the
/// stored one, a warning is logged and returned; the stored config is used.
pub fn decode_checkpoint(bytes: &[u8], expected: Option<&ModelConfig>) -> Result<(Checkpoint, Vec<String>)> {
    let mut r = Reader {
        bytes,
        pos: 0,
        section: "header".into(),
    };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(r.corrupt("bad magic"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let hash: [u8; 32] = r.take(32)?.try_into().unwrap();
    let backend_seed = r.u64()?;
    r.section = "config".into();
    let len = r.u32()? as usize;
    let text = std::str::from_utf8(r.take(len)?).map_err(|_| r.corrupt("config is not UTF-8"))?;
    let mut model = ModelConfig::default();
    model.apply_text(text).map_err(|e| r.corrupt(e.to_string()))?;
    if model.backend_seed != backend_seed {
        return Err(r.corrupt("backend seed disagrees with the config text"));
    }
    if config_hash(&model) != hash {
        return Err(r.corrupt("config hash does not match the stored config"));
    }
    let mut warnings = Vec::new();
    if let Some(exp) = expected {
        if config_hash(exp) != hash {
            let w = "checkpoint was written with a different model configuration; using the stored one".to_string();
            log::warn!("{w}");
            warnings.push(w);
        }
    }
    r.section = "experts".into();
    let n = r.u32()? as usize;
    let mut experts = Vec::with_capacity(n);
    for i in 0..n {
        r.section = format!("expert[{i}]");
        let tag = r.u8()?;
        let kind = ExpertKind::from_tag(tag).ok_or_else(|| r.corrupt(format!("unknown expert tag {tag}")))?;
        let steps = r.u64()? as usize;
        let stores = r.u8()?;
        let mut e = Expert::new(kind, &model, 0, DType::F32)?;
        let want = if e.matcher.is_some() { 2 } else { 1 };
        if stores != want {
            return Err(r.corrupt(format!("expected {want} parameter groups, found {stores}")));
        }
        r.section = format!("expert[{i}].decoder");
        read_store(&mut r, &e.decoder.store)?;
        if let Some(m) = &e.matcher {
            r.section = format!("expert[{i}].matcher");
            read_store(&mut r, &m.store)?;
        }
        e.steps = steps;
        experts.push(e);
    }
    if r.pos != bytes.len() {
        r.section = "trailer".into();
        return Err(r.corrupt(format!("{} unexpected trailing bytes", bytes.len() - r.pos)));
    }
    Ok((Checkpoint { model, experts }, warnings))
}

pub fn load_checkpoint(path: impl AsRef<Path>, expected: Option<&ModelConfig>) -> Result<(Checkpoint, Vec<String>)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, expected)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn experts(model: &ModelConfig) -> Vec<Expert> {
        ExpertKind::ALL
            .iter()
            .map(|&k| Expert::new(k, model, 11 + k.tag() as u64, DType::F32).unwrap())
            .collect()
    }

    #[test]
    fn byte_exact_round_trip() {
        let model = ModelConfig::tiny();
        let mut ex = experts(&model);
        ex[1].steps = 17;
        let bytes = encode_checkpoint(&model, &ex).unwrap();
        let (ck, warnings) = decode_checkpoint(&bytes, Some(&model)).unwrap();
        assert!(warnings.is_empty());
        assert_eq!(ck.model, model);
        assert_eq!(ck.experts[1].steps, 17);
        assert_eq!(encode_checkpoint(&ck.model, &ck.experts).unwrap(), bytes);
    }

    #[test]
    fn truncation_names_the_section() {
        let model = ModelConfig::tiny();
        let bytes = encode_checkpoint(&model, &experts(&model)).unwrap();
        let err = decode_checkpoint(&bytes[..bytes.len() - 10], None).err().unwrap();
        match err {
            Error::CorruptCheckpoint { section, .. } => assert!(section.starts_with("expert[2]"), "{section}"),
            e => panic!("unexpected {e}"),
        }
        let err = decode_checkpoint(&bytes[..20], None).err().unwrap();
        assert!(matches!(err, Error::CorruptCheckpoint { ref section, .. } if section == "header"));
    }

    #[test]
    fn version_and_config_mismatch() {
        let model = ModelConfig::tiny();
        let mut bytes = encode_checkpoint(&model, &experts(&model)).unwrap();
        let other = ModelConfig {
            pe_sigma: 2.0,
            ..model.clone()
        };
        let (_, warnings) = decode_checkpoint(&bytes, Some(&other)).unwrap();
        assert_eq!(warnings.len(), 1);
        bytes[4] = 9;
        assert!(matches!(decode_checkpoint(&bytes, None), Err(Error::Version { found: 9, .. })));
    }
}
