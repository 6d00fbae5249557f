//! Binary checkpoint format, all integers little-endian:
//!
//! ```text
//! "NTSCKPT1" | u32 version
//! u32 n_meta   { u32 key_len | key | u32 value_len | value }*
//! u32 n_tensor { u32 name_len | name | u32 rank | u64 dim* | u64 offset }*
//! u64 payload_len | f32 payload (row-major, offsets relative to its start)
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::seq2seq::{ModelConfig, ModelParams};
use crate::textpipe::{VocabFingerprint, Vocabulary};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"NTSCKPT1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingMeta {
    pub epoch: usize,
    pub final_loss: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub src_vocab: VocabFingerprint,
    pub tgt_vocab: VocabFingerprint,
    pub params: ModelParams,
    pub meta: TrainingMeta,
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    put_u32(buf, s.len() as u32);
    buf.extend_from_slice(s.as_bytes());
}

struct Reader<'b> {
    buf: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize) -> Result<&'b [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| {
                Error::CorruptCheckpoint(format!(
                    "truncated: need {n} bytes at offset {}, file has {}",
                    self.pos,
                    self.buf.len()
                ))
            })?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?)
            .map_err(|_| Error::CorruptCheckpoint("length overflows usize".into()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::CorruptCheckpoint("invalid UTF-8 in header".into()))
    }
}

impl Checkpoint {
    fn metadata(&self) -> Vec<(&'static str, String)> {
        let c = &self.model_config;
        vec![
            ("model.src_vocab_size", c.src_vocab_size.to_string()),
            ("model.tgt_vocab_size", c.tgt_vocab_size.to_string()),
            ("model.embed_dim", c.embed_dim.to_string()),
            ("model.hidden_dim", c.hidden_dim.to_string()),
            ("model.attention_dim", c.attention_dim.to_string()),
            ("model.dropout_rate", format!("{:?}", c.dropout_rate)),
            ("vocab.src.size", self.src_vocab.size.to_string()),
            ("vocab.src.hash", self.src_vocab.hash.clone()),
            ("vocab.tgt.size", self.tgt_vocab.size.to_string()),
            ("vocab.tgt.hash", self.tgt_vocab.hash.clone()),
            ("train.epoch", self.meta.epoch.to_string()),
            ("train.final_loss", format!("{:?}", self.meta.final_loss)),
            ("train.seed", self.meta.seed.to_string()),
        ]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut buf, CHECKPOINT_VERSION);

        let meta = self.metadata();
        put_u32(&mut buf, meta.len() as u32);
        for (k, v) in &meta {
            put_str(&mut buf, k);
            put_str(&mut buf, v);
        }

        let tensors = self.params.named();
        put_u32(&mut buf, tensors.len() as u32);
        let mut offset = 0u64;
        for (name, t) in &tensors {
            put_str(&mut buf, name);
            put_u32(&mut buf, t.shape().len() as u32);
            for &d in t.shape() {
                put_u64(&mut buf, d as u64);
            }
            put_u64(&mut buf, offset);
            offset += 4 * t.numel() as u64;
        }

        put_u64(&mut buf, offset);
        for (_, t) in &tensors {
            for &v in t.data() {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(8).ok() != Some(CHECKPOINT_MAGIC.as_slice()) {
            return Err(Error::CorruptCheckpoint("bad magic bytes".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }

        let n_meta = r.u32()?;
        let mut meta = BTreeMap::new();
        for _ in 0..n_meta {
            let k = r.string()?;
            let v = r.string()?;
            meta.insert(k, v);
        }
        let get = |key: &str| -> Result<&String> {
            meta.get(key)
                .ok_or_else(|| Error::CorruptCheckpoint(format!("missing metadata key {key}")))
        };
        fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::CorruptCheckpoint(format!("bad value {v:?} for {key}")))
        }
        let num = |key: &str| -> Result<usize> { parse(key, get(key)?) };

        let model_config = ModelConfig {
            src_vocab_size: num("model.src_vocab_size")?,
            tgt_vocab_size: num("model.tgt_vocab_size")?,
            embed_dim: num("model.embed_dim")?,
            hidden_dim: num("model.hidden_dim")?,
            attention_dim: num("model.attention_dim")?,
            dropout_rate: parse("model.dropout_rate", get("model.dropout_rate")?)?,
        };
        model_config
            .validate()
            .map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
        let src_vocab = VocabFingerprint {
            size: num("vocab.src.size")?,
            hash: get("vocab.src.hash")?.clone(),
        };
        let tgt_vocab = VocabFingerprint {
            size: num("vocab.tgt.size")?,
            hash: get("vocab.tgt.hash")?.clone(),
        };
        let meta_block = TrainingMeta {
            epoch: num("train.epoch")?,
            final_loss: parse("train.final_loss", get("train.final_loss")?)?,
            seed: parse("train.seed", get("train.seed")?)?,
        };

        let n_tensors = r.u32()? as usize;
        let mut directory = Vec::with_capacity(n_tensors.min(1024));
        for _ in 0..n_tensors {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let dims = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
            let offset = r.len()?;
            directory.push((name, dims, offset));
        }
        let payload_len = r.len()?;
        let payload = r.take(payload_len)?;
        if r.pos != bytes.len() {
            return Err(Error::CorruptCheckpoint(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }

        let mut params = ModelParams::zeros(&model_config);
        let mut expected = params.named_mut();
        if directory.len() != expected.len() {
            return Err(Error::CorruptCheckpoint(format!(
                "{} tensors stored, model needs {}",
                directory.len(),
                expected.len()
            )));
        }
        for ((name, dims, offset), (want_name, tensor)) in
            directory.into_iter().zip(expected.iter_mut())
        {
            if &name != want_name || dims != tensor.shape() {
                return Err(Error::CorruptCheckpoint(format!(
                    "tensor {name} {dims:?} does not match {want_name} {:?}",
                    tensor.shape()
                )));
            }
            let n = tensor.numel();
            let bytes = offset
                .checked_add(4 * n)
                .and_then(|end| payload.get(offset..end))
                .ok_or_else(|| {
                    Error::CorruptCheckpoint(format!("payload of {name} out of range"))
                })?;
            for (v, chunk) in tensor.data_mut().iter_mut().zip(bytes.chunks_exact(4)) {
                *v = f64::from(f32::from_le_bytes(chunk.try_into().unwrap()));
            }
            if !tensor.is_finite() {
                return Err(Error::CorruptCheckpoint(format!(
                    "{name} holds non-finite values"
                )));
            }
        }
        drop(expected);

        Ok(Checkpoint {
            model_config,
            src_vocab,
            tgt_vocab,
            params,
            meta: meta_block,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Hex SHA-256 of the serialized checkpoint.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }

    /// Fails with a vocabulary mismatch unless both vocabularies are the
    /// ones this checkpoint was trained with.
    pub fn check_vocabs(&self, src: &Vocabulary, tgt: &Vocabulary) -> Result<()> {
        for (side, have, want) in [
            ("source", src.fingerprint(), &self.src_vocab),
            ("target", tgt.fingerprint(), &self.tgt_vocab),
        ] {
            if &have != want {
                return Err(Error::VocabMismatch(format!(
                    "{side} vocabulary (size {}, hash {}) differs from checkpoint (size {}, hash {})",
                    have.size, have.hash, want.size, want.hash
                )));
            }
        }
        Ok(())
    }

    /// Parameters as they would read back from disk.
    pub fn quantized(&self) -> Checkpoint {
        let mut out = self.clone();
        for (_, t) in out.params.named_mut() {
            quantize(t);
        }
        out
    }
}

fn quantize(t: &mut Tensor) {
    for v in t.data_mut() {
        *v = f64::from(*v as f32);
    }
}
