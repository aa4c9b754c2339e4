//! Versioned little-endian binary container for named tensors.
//!
//! Layout:
//!
//! ```text
//! magic      8 bytes   "SOLOCKPT"
//! version    u32
//! kind       u8        0 = base model, 1 = solo adapter, 2 = LoRA adapter, 3 = empty
//! config     u32 length + UTF-8 JSON echo of the configuration
//! count      u32
//! records    count × { name: u32 length + UTF-8, dtype: u8 (1 = f64),
//!                      ndim: u8, dims: ndim × u64, payload: f64 × numel }
//! checksum   32 bytes  SHA-256 of everything above
//! ```
//!
//! Sparsity masks are stored as extra records named `<param>#mask`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::error::{CheckpointError, Error, Result};
use crate::gpt::{MiniGpt, ModelConfig};
use crate::lora::{LoraAdapterSet, LoraConfig};
use crate::param::Parameterized;
use crate::solo::{SoloAdapterSet, SoloConfig};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"SOLOCKPT";
pub const VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;
const MASK_SUFFIX: &str = "#mask";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Base,
    Solo,
    Lora,
    Empty,
}

impl CheckpointKind {
    fn tag(self) -> u8 {
        match self {
            CheckpointKind::Base => 0,
            CheckpointKind::Solo => 1,
            CheckpointKind::Lora => 2,
            CheckpointKind::Empty => 3,
        }
    }

    fn from_tag(tag: u8) -> Result<Self, CheckpointError> {
        Ok(match tag {
            0 => CheckpointKind::Base,
            1 => CheckpointKind::Solo,
            2 => CheckpointKind::Lora,
            3 => CheckpointKind::Empty,
            t => return Err(CheckpointError::Malformed(format!("unknown kind tag {t}"))),
        })
    }
}

impl std::fmt::Display for CheckpointKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub config: serde_json::Value,
    pub records: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.kind.tag());
        let cfg = self.config.to_string();
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(cfg.as_bytes());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for (name, t) in &self.records {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F64);
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let mut r = Reader {
            buf: bytes,
            pos: MAGIC.len(),
        };
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::Version {
                found: version,
                expected: VERSION,
            });
        }
        if bytes.len() < MAGIC.len() + 4 + 32 {
            return Err(CheckpointError::Malformed("file too short".into()));
        }
        let (body, sum) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != sum {
            return Err(CheckpointError::Checksum);
        }
        let mut r = Reader {
            buf: body,
            pos: r.pos,
        };
        let kind = CheckpointKind::from_tag(r.u8()?)?;
        let cfg_len = r.u32()? as usize;
        let cfg = std::str::from_utf8(r.take(cfg_len)?)
            .map_err(|e| CheckpointError::Malformed(format!("config is not UTF-8: {e}")))?;
        let config = serde_json::from_str(cfg)
            .map_err(|e| CheckpointError::Malformed(format!("config is not JSON: {e}")))?;
        let count = r.u32()? as usize;
        let mut records = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|e| CheckpointError::Malformed(format!("record name is not UTF-8: {e}")))?
                .to_string();
            let dtype = r.u8()?;
            if dtype != DTYPE_F64 {
                return Err(CheckpointError::Malformed(format!(
                    "{name}: unsupported dtype tag {dtype}"
                )));
            }
            let ndim = r.u8()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>, _>>()?;
            let numel: usize = shape.iter().product();
            let raw = r.take(
                numel
                    .checked_mul(8)
                    .ok_or_else(|| CheckpointError::Malformed("size overflow".into()))?,
            )?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(shape, data)
                .map_err(|e| CheckpointError::Malformed(format!("{name}: {e}")))?;
            records.push((name, t));
        }
        if r.pos != body.len() {
            return Err(CheckpointError::Malformed(
                "trailing bytes before checksum".into(),
            ));
        }
        Ok(Self {
            kind,
            config,
            records,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::from_bytes(&bytes)?)
    }

    /// Hex SHA-256 of the serialized container.
    pub fn checksum_hex(&self) -> String {
        Sha256::digest(self.to_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    fn expect_kind(&self, kind: CheckpointKind) -> Result<(), CheckpointError> {
        if self.kind != kind {
            return Err(CheckpointError::Kind {
                expected: kind.to_string(),
                found: self.kind.to_string(),
            });
        }
        Ok(())
    }

    fn config_field<T: for<'de> Deserialize<'de>>(&self, key: &str) -> Result<T, CheckpointError> {
        let v = self
            .config
            .get(key)
            .ok_or_else(|| CheckpointError::Malformed(format!("config echo lacks {key:?}")))?;
        serde_json::from_value(v.clone())
            .map_err(|e| CheckpointError::Malformed(format!("config {key}: {e}")))
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| CheckpointError::Malformed("unexpected end of data".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

fn collect_records(module: &dyn Parameterized) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    module.visit_params(&mut |p| {
        out.push((p.name.clone(), p.value.clone()));
        if let Some(m) = &p.mask {
            out.push((format!("{}{MASK_SUFFIX}", p.name), m.clone()));
        }
    });
    out
}

/// Overwrites every parameter (and mask) of `module` from `records`.
fn restore(
    module: &mut dyn Parameterized,
    records: &[(String, Tensor)],
) -> Result<(), CheckpointError> {
    let lookup = |name: &str| records.iter().find(|(n, _)| n == name).map(|(_, t)| t);
    let mut err = None;
    let mut used = 0;
    module.visit_params_mut(&mut |p| {
        if err.is_some() {
            return;
        }
        let Some(t) = lookup(&p.name) else {
            err = Some(CheckpointError::Malformed(format!(
                "missing record {}",
                p.name
            )));
            return;
        };
        if t.shape() != p.value.shape() {
            err = Some(CheckpointError::Geometry(format!(
                "{}: stored shape {:?}, expected {:?}",
                p.name,
                t.shape(),
                p.value.shape()
            )));
            return;
        }
        p.value = t.clone();
        used += 1;
        if p.mask.is_some() {
            match lookup(&format!("{}{MASK_SUFFIX}", p.name)) {
                Some(m) if m.shape() == p.value.shape() => {
                    p.mask = Some(m.clone());
                    used += 1;
                }
                _ => {
                    err = Some(CheckpointError::Malformed(format!(
                        "missing or misshapen mask for {}",
                        p.name
                    )))
                }
            }
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    if used != records.len() {
        return Err(CheckpointError::Malformed(format!(
            "{} records do not belong to this module",
            records.len() - used
        )));
    }
    Ok(())
}

pub fn save_base(model: &MiniGpt) -> Checkpoint {
    Checkpoint {
        kind: CheckpointKind::Base,
        config: json!({ "model": model.config() }),
        records: collect_records(model),
    }
}

pub fn load_base(ckpt: &Checkpoint) -> Result<MiniGpt> {
    ckpt.expect_kind(CheckpointKind::Base)?;
    let cfg: ModelConfig = ckpt.config_field("model")?;
    let mut model = MiniGpt::new(cfg, 0)?;
    restore(&mut model, &ckpt.records)?;
    Ok(model)
}

pub fn save_solo(set: &SoloAdapterSet) -> Checkpoint {
    Checkpoint {
        kind: CheckpointKind::Solo,
        config: json!({
            "solo": set.config,
            "d_model": set.d_model(),
            "n_layers": set.n_layers(),
        }),
        records: collect_records(set),
    }
}

fn check_echo_geometry(ckpt: &Checkpoint, model_cfg: &ModelConfig) -> Result<(), CheckpointError> {
    let d: usize = ckpt.config_field("d_model")?;
    let l: usize = ckpt.config_field("n_layers")?;
    if d != model_cfg.d_model || l != model_cfg.n_layers {
        return Err(CheckpointError::Geometry(format!(
            "adapter is for d_model={d}, n_layers={l}; base has d_model={}, n_layers={}",
            model_cfg.d_model, model_cfg.n_layers
        )));
    }
    Ok(())
}

/// Rebuilds a solo adapter for a base with geometry `model_cfg`.
pub fn load_solo(ckpt: &Checkpoint, model_cfg: &ModelConfig) -> Result<SoloAdapterSet> {
    ckpt.expect_kind(CheckpointKind::Solo)?;
    check_echo_geometry(ckpt, model_cfg)?;
    let cfg: SoloConfig = ckpt.config_field("solo")?;
    let mut set = SoloAdapterSet::build(model_cfg, &cfg, 0)?;
    restore(&mut set, &ckpt.records)?;
    Ok(set)
}

pub fn save_lora(set: &LoraAdapterSet) -> Checkpoint {
    Checkpoint {
        kind: CheckpointKind::Lora,
        config: json!({
            "lora": set.config,
            "d_model": set.d_model(),
            "n_layers": set.blocks.len(),
        }),
        records: collect_records(set),
    }
}

pub fn load_lora(ckpt: &Checkpoint, model_cfg: &ModelConfig) -> Result<LoraAdapterSet> {
    ckpt.expect_kind(CheckpointKind::Lora)?;
    check_echo_geometry(ckpt, model_cfg)?;
    let cfg: LoraConfig = ckpt.config_field("lora")?;
    let mut set = LoraAdapterSet::build(model_cfg, &cfg, 0)?;
    restore(&mut set, &ckpt.records)?;
    Ok(set)
}

pub fn empty_adapter() -> Checkpoint {
    Checkpoint {
        kind: CheckpointKind::Empty,
        config: json!({}),
        records: Vec::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            kind: CheckpointKind::Solo,
            config: json!({"x": 1}),
            records: vec![
                (
                    "a".into(),
                    Tensor::vector(vec![1.5, -0.0, f64::MIN_POSITIVE]),
                ),
                ("b".into(), Tensor::new(vec![2, 1], vec![3.0, 4.0]).unwrap()),
            ],
        }
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back.kind, c.kind);
        for ((n1, t1), (n2, t2)) in c.records.iter().zip(&back.records) {
            assert_eq!(n1, n2);
            assert!(t1.bit_eq(t2));
        }
    }

    #[test]
    fn distinct_errors() {
        let bytes = sample().to_bytes();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&bad),
            Err(CheckpointError::BadMagic)
        ));

        let mut bad = bytes.clone();
        bad[8..12].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(
            Checkpoint::from_bytes(&bad),
            Err(CheckpointError::Version { found: 7, .. })
        ));

        let mut bad = bytes.clone();
        let mid = bytes.len() / 2;
        bad[mid] ^= 0x10;
        assert!(matches!(
            Checkpoint::from_bytes(&bad),
            Err(CheckpointError::Checksum)
        ));

        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}
