//! Versioned binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "LMOECKPT" | u32 version | u64 header length | header JSON
//! u64 tensor count | per tensor: u32 name length, name, u32 rank, u64 dims…, f64 data…
//! 32-byte SHA-256 of everything above
//! ```
//!
//! The header carries the configs, their digest, the phase marker, epoch
//! counter, RNG state, optimizer hyper-parameters and step counts, and the
//! epoch log. Tensors are parameters (`p:`), first moments (`m:`) and second
//! moments (`v:`).

use std::collections::BTreeMap;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{DecoderConfig, EncoderConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::model::Recognizer;
use crate::optim::{Adam, AdamConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::training::{EpochStats, Phase};

pub const MAGIC: &[u8; 8] = b"LMOECKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Recognizer,
    pub train: TrainConfig,
    pub phase: Phase,
    /// Epochs completed within `phase`.
    pub epoch: usize,
    pub rng: ChaCha8Rng,
    pub optimizer: Adam,
    pub log: Vec<EpochStats>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    encoder: EncoderConfig,
    decoder: DecoderConfig,
    train: TrainConfig,
    config_digest: String,
    phase: Phase,
    epoch: usize,
    rng: ChaCha8Rng,
    adam: AdamConfig,
    adam_steps: BTreeMap<String, u64>,
    log: Vec<EpochStats>,
}

/// Hex SHA-256 of the canonical JSON of the three configs.
pub fn config_digest(encoder: &EncoderConfig, decoder: &DecoderConfig, train: &TrainConfig) -> String {
    let json = serde_json::to_vec(&(encoder, decoder, train)).expect("configs serialize");
    hex(&Sha256::digest(json))
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn put_tensor(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f64]) {
    out.extend((name.len() as u32).to_le_bytes());
    out.extend(name.as_bytes());
    out.extend((shape.len() as u32).to_le_bytes());
    for &d in shape {
        out.extend((d as u64).to_le_bytes());
    }
    for &v in data {
        out.extend(v.to_le_bytes());
    }
}

pub fn encode(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let m = &ckpt.model;
    let header = Header {
        encoder: m.encoder.clone(),
        decoder: m.decoder.clone(),
        train: ckpt.train.clone(),
        config_digest: config_digest(&m.encoder, &m.decoder, &ckpt.train),
        phase: ckpt.phase,
        epoch: ckpt.epoch,
        rng: ckpt.rng.clone(),
        adam: ckpt.optimizer.cfg,
        adam_steps: ckpt.optimizer.steps.clone(),
        log: ckpt.log.clone(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Internal(e.to_string()))?;
    let mut out = Vec::new();
    out.extend(MAGIC);
    out.extend(VERSION.to_le_bytes());
    out.extend((json.len() as u64).to_le_bytes());
    out.extend(&json);
    let count = m.params.len() + ckpt.optimizer.m.len() + ckpt.optimizer.v.len();
    out.extend((count as u64).to_le_bytes());
    for (name, t) in m.params.iter() {
        put_tensor(&mut out, &format!("p:{name}"), t.shape(), t.data());
    }
    for (prefix, moments) in [("m", &ckpt.optimizer.m), ("v", &ckpt.optimizer.v)] {
        for (name, data) in moments {
            put_tensor(&mut out, &format!("{prefix}:{name}"), &[data.len()], data);
        }
    }
    let digest = Sha256::digest(&out);
    out.extend(digest);
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format("checkpoint truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v)
            .ok()
            .filter(|&n| n <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("{what} {v} exceeds file size")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < MAGIC.len() + 32 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    let mut r = Reader { buf: body, pos: MAGIC.len() };
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("checkpoint version {version}, expected {VERSION}")));
    }
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Format("checkpoint checksum mismatch (truncated or corrupt)".into()));
    }
    let hlen = r.len("header length")?;
    let header: Header = serde_json::from_slice(r.take(hlen)?)
        .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    if header.config_digest != config_digest(&header.encoder, &header.decoder, &header.train) {
        return Err(Error::Format("checkpoint config digest does not match its configs".into()));
    }
    let count = r.len("tensor count")?;
    let mut params = ParamStore::new();
    let mut moments: [BTreeMap<String, Vec<f64>>; 2] = Default::default();
    for _ in 0..count {
        let nlen = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(nlen)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.len("dimension")?);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&n| n.saturating_mul(8) <= body.len())
            .ok_or_else(|| Error::Format(format!("tensor {name} is larger than the file")))?;
        let data: Vec<f64> = r
            .take(n * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        match name.split_once(':') {
            Some(("p", key)) => params.insert(key, Tensor::new(shape, data)?),
            Some(("m", key)) => {
                moments[0].insert(key.to_string(), data);
            }
            Some(("v", key)) => {
                moments[1].insert(key.to_string(), data);
            }
            _ => return Err(Error::Format(format!("unknown tensor entry {name}"))),
        }
    }
    if r.pos != body.len() {
        return Err(Error::Format("trailing bytes after tensor table".into()));
    }
    header.encoder.validate()?;
    header.decoder.validate(header.encoder.embed_dim)?;
    header.train.validate()?;
    let [m, v] = moments;
    Ok(Checkpoint {
        model: Recognizer {
            encoder: header.encoder,
            decoder: header.decoder,
            params,
        },
        train: header.train,
        phase: header.phase,
        epoch: header.epoch,
        rng: header.rng,
        optimizer: Adam {
            cfg: header.adam,
            m,
            v,
            steps: header.adam_steps,
        },
        log: header.log,
    })
}

/// Writes through a temporary sibling file and renames it into place.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = encode(ckpt)?;
    let tmp = path.with_extension("partial");
    std::fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeds;

    fn sample() -> Checkpoint {
        let enc = EncoderConfig {
            image_size: 8,
            patch_size: 4,
            embed_dim: 8,
            depth: 2,
            heads: 2,
            mlp_ratio: 2,
            adapter_layers: vec![0, 1],
            num_experts: 4,
            top_k: 2,
            expert_bottleneck: 3,
        };
        let dec = DecoderConfig {
            num_categories: 3,
            max_label_len: 2,
            ..Default::default()
        };
        let train = TrainConfig::default();
        let mut optimizer = Adam::new(AdamConfig {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        });
        optimizer.m.insert("dec.head.b".into(), vec![0.1, -0.25, 1e-300, 3.0, 4.0, 5.0]);
        optimizer.v.insert("dec.head.b".into(), vec![0.5; 6]);
        optimizer.steps.insert("dec.head.b".into(), 7);
        Checkpoint {
            model: Recognizer::new(enc, dec, 3).unwrap(),
            train,
            phase: Phase::Plm,
            epoch: 2,
            rng: seeds::stream(1, "x"),
            optimizer,
            log: vec![EpochStats {
                phase: Phase::Plm,
                epoch: 1,
                mean_loss: 0.123456789,
                samples: 10,
            }],
        }
    }

    #[test]
    fn round_trip_is_exact_and_idempotent() {
        let c = sample();
        let bytes = encode(&c).unwrap();
        let back = decode(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(encode(&back).unwrap(), bytes);
    }

    #[test]
    fn rng_state_survives() {
        use rand::RngCore;
        let mut c = sample();
        c.rng.next_u64();
        let mut back = decode(&encode(&c).unwrap()).unwrap();
        assert_eq!(back.rng.next_u64(), c.rng.next_u64());
    }

    #[test]
    fn truncation_and_corruption_rejected() {
        let bytes = encode(&sample()).unwrap();
        for cut in [0, 7, 12, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(decode(&bytes[..cut]), Err(Error::Format(_))), "cut {cut}");
        }
        let mut flipped = bytes.clone();
        flipped[100] ^= 1;
        assert!(matches!(decode(&flipped), Err(Error::Format(_))));
        let mut version = bytes.clone();
        version[8] = 9;
        assert!(matches!(decode(&version), Err(Error::Format(_))));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let c = sample();
        save_checkpoint(&c, &path).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), c);
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 40]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format(_))));
        assert!(matches!(load_checkpoint(&dir.path().join("missing")), Err(Error::Io { .. })));
    }
}
