//! Versioned binary checkpoint container.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic      8 bytes  "QATNCKPT"
//! version    u32
//! cfg_len    u32, followed by cfg_len bytes of UTF-8 JSON (ModelConfig)
//! n_params   u32
//! per parameter:
//!   name_len u16, name bytes
//!   kind     u8   (ParamKind code)
//!   rank     u8, followed by rank × u64 dims
//!   data     numel × f64
//! checksum   u64  FNV-1a over every preceding byte
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::params::{ParamKind, ParamTree};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"QATNCKPT";
pub const VERSION: u32 = 1;

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

pub fn encode(cfg: &ModelConfig, params: &ModelParams<Tensor>) -> Result<Vec<u8>> {
    let cfg_json = serde_json::to_vec(cfg)?;
    let flat = params.flatten();
    let mut buf = Vec::with_capacity(64 + 8 * params.num_params());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(cfg_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&cfg_json);
    buf.extend_from_slice(&(flat.len() as u32).to_le_bytes());
    for p in &flat {
        let name = p.name.as_bytes();
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name);
        buf.push(p.kind.code());
        buf.push(p.leaf.rank() as u8);
        for &d in p.leaf.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in p.leaf.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let sum = fnv1a(&buf);
    buf.extend_from_slice(&sum.to_le_bytes());
    Ok(buf)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.array::<1>()?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }
}

pub fn decode(bytes: &[u8]) -> Result<(ModelConfig, ModelParams<Tensor>)> {
    if bytes.len() < MAGIC.len() + 12 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
    if fnv1a(body) != stored {
        return Err(Error::Checkpoint("checksum mismatch".into()));
    }
    let mut r = Reader { buf: body, pos: 8 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version} (expected {VERSION})")));
    }
    let cfg_len = r.u32()? as usize;
    let cfg: ModelConfig = serde_json::from_slice(r.take(cfg_len)?)
        .map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
    cfg.validate()
        .map_err(|e| Error::Checkpoint(format!("stored config is invalid: {e}")))?;

    // A zero-filled template fixes the expected names, kinds and shapes.
    let mut params = template(&cfg)?;
    let n = r.u32()? as usize;
    let mut slots = params.flatten_mut();
    if n != slots.len() {
        return Err(Error::Checkpoint(format!("{n} parameters stored, config implies {}", slots.len())));
    }
    for slot in slots.iter_mut() {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
        if name != slot.name {
            return Err(Error::Checkpoint(format!("expected parameter {}, found {name}", slot.name)));
        }
        let kind = ParamKind::from_code(r.u8()?);
        if kind != Some(slot.kind) {
            return Err(Error::Checkpoint(format!("{name}: kind mismatch")));
        }
        let rank = r.u8()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        if shape != slot.leaf.shape() {
            return Err(Error::Checkpoint(format!(
                "{name}: stored shape {shape:?}, expected {:?}",
                slot.leaf.shape()
            )));
        }
        for v in slot.leaf.data_mut() {
            *v = f64::from_le_bytes(r.array()?);
        }
    }
    drop(slots);
    if r.pos != body.len() {
        return Err(Error::Checkpoint("trailing bytes after parameters".into()));
    }
    if !params.all_finite() {
        return Err(Error::Checkpoint("non-finite parameter values".into()));
    }
    Ok((cfg, params))
}

fn template(cfg: &ModelConfig) -> Result<ModelParams<Tensor>> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    Ok(ModelParams::init(cfg, &mut rng)?.zeros_like())
}

pub fn save(path: &Path, cfg: &ModelConfig, params: &ModelParams<Tensor>) -> Result<()> {
    let bytes = encode(cfg, params)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(ModelConfig, ModelParams<Tensor>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{AttentionVariant, GateDesign, GatingConfig};
    use crate::model::{LnPlacement, MeasurePoint, Objective};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> (ModelConfig, ModelParams<Tensor>) {
        let cfg = ModelConfig {
            vocab_size: 9,
            max_seq_len: 5,
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            d_ffn: 12,
            attention: AttentionVariant::Gated(GatingConfig::new(GateDesign::Mlp { n_hid: 3 }, -1.0)),
            ln_placement: LnPlacement::PostLn,
            dropout_p: 0.1,
            objective: Objective::Mlm { mask_prob: 0.15 },
            init_std: 0.02,
            measure_point: MeasurePoint::PostResidual,
        };
        let p = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        (cfg, p)
    }

    #[test]
    fn round_trip_is_exact() {
        let (cfg, p) = sample();
        let bytes = encode(&cfg, &p).unwrap();
        let (cfg2, p2) = decode(&bytes).unwrap();
        assert_eq!(cfg, cfg2);
        assert_eq!(p, p2);
        assert_eq!(encode(&cfg2, &p2).unwrap(), bytes);
    }

    #[test]
    fn corruption_is_detected() {
        let (cfg, p) = sample();
        let bytes = encode(&cfg, &p).unwrap();
        let mut flipped = bytes.clone();
        let mid = flipped.len() / 2;
        flipped[mid] ^= 0x10;
        assert!(matches!(decode(&flipped), Err(Error::Checkpoint(_))));
        assert!(matches!(decode(&bytes[..bytes.len() - 9]), Err(Error::Checkpoint(_))));
        assert!(matches!(decode(b"garbage bytes here"), Err(Error::Checkpoint(_))));
        let mut bad_version = bytes[..bytes.len() - 8].to_vec();
        bad_version[8] = 9;
        let sum = fnv1a(&bad_version);
        bad_version.extend_from_slice(&sum.to_le_bytes());
        match decode(&bad_version) {
            Err(Error::Checkpoint(m)) => assert!(m.contains("version")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn file_round_trip() {
        let (cfg, p) = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save(&path, &cfg, &p).unwrap();
        assert_eq!(load(&path).unwrap().1, p);
        assert!(matches!(load(&dir.path().join("missing")), Err(Error::Io { .. })));
    }
}
