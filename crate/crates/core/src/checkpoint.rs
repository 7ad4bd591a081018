//! Versioned binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes  "DPSECKPT"
//! version      u32      currently 1
//! config_len   u32
//! config       config_len bytes of JSON (model, train and loss settings)
//! seed         u64
//! epoch        u64      epochs completed
//! step         u64      optimizer steps taken
//! val_loss     f64      validation loss after `epoch` (NaN if never measured)
//! adam         4 × f64  beta1, beta2, eps, weight_decay
//! n_arrays     u32
//! n_arrays ×
//!   name_len   u32
//!   name       name_len bytes UTF-8
//!   role       u8       0 parameter, 1 first moment, 2 second moment
//!   trainable  u8
//!   rank       u32
//!   dims       rank × u64
//!   data       prod(dims) × f64
//!   crc        u32      CRC-32 of the data bytes
//! file_crc     u32      CRC-32 of every preceding byte
//! ```
//!
//! Moments follow their parameter, in store order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::LossConfig;
use crate::model::ModelConfig;
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::training::{AdamConfig, AdamW, TrainConfig};

pub const MAGIC: &[u8; 8] = b"DPSECKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSettings {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub settings: RunSettings,
    pub seed: u64,
    pub epoch: u64,
    pub val_loss: f64,
    pub params: ParamStore,
    pub optimizer: AdamW,
}

const ROLE_PARAM: u8 = 0;
const ROLE_M: u8 = 1;
const ROLE_V: u8 = 2;

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u32(b.len() as u32);
        self.0.extend_from_slice(b);
    }
    fn array(&mut self, name: &str, role: u8, trainable: bool, t: &Tensor) {
        self.bytes(name.as_bytes());
        self.u8(role);
        self.u8(trainable as u8);
        self.u32(t.rank() as u32);
        for &d in t.shape() {
            self.u64(d as u64);
        }
        let start = self.0.len();
        for &v in t.data() {
            self.f64(v);
        }
        let crc = crc32fast::hash(&self.0[start..]);
        self.u32(crc);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

fn corrupt(what: &str) -> Error {
    Error::Checkpoint(format!("truncated or corrupt while reading {what}"))
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.buf.len()).ok_or_else(|| corrupt(what))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
    fn bytes(&mut self, what: &str) -> Result<&'a [u8]> {
        let n = self.u32(what)? as usize;
        self.take(n, what)
    }
}

struct RawArray {
    name: String,
    role: u8,
    trainable: bool,
    tensor: Tensor,
}

fn read_array(r: &mut Reader<'_>) -> Result<RawArray> {
    let name = String::from_utf8(r.bytes("array name")?.to_vec())
        .map_err(|_| Error::Checkpoint("array name is not UTF-8".into()))?;
    let role = r.u8("array role")?;
    if role > ROLE_V {
        return Err(Error::Checkpoint(format!("`{name}` has unknown role {role}")));
    }
    let trainable = r.u8("trainable flag")? != 0;
    let rank = r.u32("rank")? as usize;
    let shape = (0..rank).map(|_| r.u64("dims").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    let n = shape
        .iter()
        .try_fold(1usize, |a, d| a.checked_mul(*d))
        .ok_or_else(|| corrupt("dims"))?;
    let raw = r.take(n.checked_mul(8).ok_or_else(|| corrupt("data"))?, "array data")?;
    let crc = r.u32("array checksum")?;
    if crc32fast::hash(raw) != crc {
        return Err(Error::Checkpoint(format!("checksum mismatch in array `{name}`")));
    }
    let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    Ok(RawArray {
        name,
        role,
        trainable,
        tensor: Tensor::new(shape, data)?,
    })
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.optimizer.check_matches(&self.params)?;
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION);
        let config = serde_json::to_vec(&self.settings).map_err(|e| Error::Checkpoint(e.to_string()))?;
        w.bytes(&config);
        w.u64(self.seed);
        w.u64(self.epoch);
        w.u64(self.optimizer.step);
        w.f64(self.val_loss);
        let a = self.optimizer.config;
        for v in [a.beta1, a.beta2, a.eps, a.weight_decay] {
            w.f64(v);
        }
        w.u32((self.params.len() * 3) as u32);
        for (i, (_, p)) in self.params.iter().enumerate() {
            w.array(&p.name, ROLE_PARAM, p.trainable, &p.value);
            w.array(&p.name, ROLE_M, p.trainable, &self.optimizer.m[i]);
            w.array(&p.name, ROLE_V, p.trainable, &self.optimizer.v[i]);
        }
        let crc = crc32fast::hash(&w.0);
        w.u32(crc);
        Ok(w.0)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        if buf.len() < MAGIC.len() + 8 || &buf[..MAGIC.len()] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let (body, tail) = buf.split_at(buf.len() - 4);
        let file_crc = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let mut r = Reader {
            buf: body,
            pos: MAGIC.len(),
        };
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version} (this build reads {VERSION})"
            )));
        }
        if crc32fast::hash(body) != file_crc {
            return Err(Error::Checkpoint("file checksum mismatch".into()));
        }
        let settings: RunSettings = serde_json::from_slice(r.bytes("config")?)
            .map_err(|e| Error::Checkpoint(format!("config echo: {e}")))?;
        let seed = r.u64("seed")?;
        let epoch = r.u64("epoch")?;
        let step = r.u64("step")?;
        let val_loss = r.f64("val_loss")?;
        let adam = AdamConfig {
            beta1: r.f64("adam")?,
            beta2: r.f64("adam")?,
            eps: r.f64("adam")?,
            weight_decay: r.f64("adam")?,
        };
        let n = r.u32("array count")? as usize;
        if n % 3 != 0 {
            return Err(Error::Checkpoint(format!("array count {n} is not a multiple of 3")));
        }
        let mut params = ParamStore::new();
        let (mut m, mut v) = (Vec::new(), Vec::new());
        for _ in 0..n / 3 {
            let p = read_array(&mut r)?;
            let pm = read_array(&mut r)?;
            let pv = read_array(&mut r)?;
            if p.role != ROLE_PARAM || pm.role != ROLE_M || pv.role != ROLE_V || pm.name != p.name || pv.name != p.name {
                return Err(Error::Checkpoint(format!("arrays for `{}` are out of order", p.name)));
            }
            params.insert(p.name, p.tensor, p.trainable)?;
            m.push(pm.tensor);
            v.push(pv.tensor);
        }
        if r.pos != body.len() {
            return Err(Error::Checkpoint("trailing bytes after the last array".into()));
        }
        let optimizer = AdamW {
            config: adam,
            step,
            m,
            v,
        };
        optimizer.check_matches(&params)?;
        Ok(Self {
            settings,
            seed,
            epoch,
            val_loss,
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }

    /// Copies stored parameter values into `store`, which must hold exactly
    /// the same names and shapes (as built from the echoed config).
    pub fn restore_into(&self, store: &mut ParamStore) -> Result<()> {
        if store.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} arrays, model has {}",
                self.params.len(),
                store.len()
            )));
        }
        let ids: Vec<_> = store.ids().collect();
        for (id, (_, p)) in ids.into_iter().zip(self.params.iter()) {
            let dst = store.get(id);
            if dst.name != p.name || dst.value.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "array `{}` {:?} does not match model array `{}` {:?}",
                    p.name,
                    p.value.shape(),
                    dst.name,
                    dst.value.shape()
                )));
            }
            *store.value_mut(id) = p.value.clone();
            store.set_trainable(id, p.trainable);
        }
        Ok(())
    }
}

/// Names of top-level model settings that differ between two configs.
pub fn config_differences(a: &ModelConfig, b: &ModelConfig) -> Vec<String> {
    let (va, vb) = (
        serde_json::to_value(a).unwrap_or_default(),
        serde_json::to_value(b).unwrap_or_default(),
    );
    match (va, vb) {
        (serde_json::Value::Object(ma), serde_json::Value::Object(mb)) => ma
            .iter()
            .filter(|(k, v)| mb.get(*k) != Some(*v))
            .map(|(k, _)| k.clone())
            .collect(),
        _ => Vec::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Model;

    fn sample() -> Checkpoint {
        let model = ModelConfig::micro();
        let mut params = ParamStore::new();
        Model::new(&model, &mut params, 4).unwrap();
        let first = params.ids().next().unwrap();
        params.set_trainable(first, false);
        let mut optimizer = AdamW::new(&params, AdamConfig::default());
        optimizer.step = 17;
        optimizer.m[1].data_mut()[0] = 0.25;
        optimizer.v[1].data_mut()[0] = f64::MIN_POSITIVE;
        Checkpoint {
            settings: RunSettings {
                model,
                train: TrainConfig::default(),
                loss: LossConfig::default(),
            },
            seed: 9,
            epoch: 3,
            val_loss: 0.125,
            params,
            optimizer,
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let ck = sample();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ckpt");
        ck.save(&p).unwrap();
        let back = Checkpoint::load(&p).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), std::fs::read(&p).unwrap());
    }

    #[test]
    fn header_layout() {
        let b = sample().to_bytes().unwrap();
        assert_eq!(&b[..8], b"DPSECKPT");
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 1);
        let n = u32::from_le_bytes(b[12..16].try_into().unwrap()) as usize;
        let cfg: RunSettings = serde_json::from_slice(&b[16..16 + n]).unwrap();
        assert_eq!(cfg, sample().settings);
        let seed = u64::from_le_bytes(b[16 + n..24 + n].try_into().unwrap());
        assert_eq!(seed, 9);
    }

    #[test]
    fn never_measured_validation_survives() {
        let mut ck = sample();
        ck.val_loss = f64::NAN;
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert!(back.val_loss.is_nan());
    }

    #[test]
    fn corruption_is_detected() {
        let b = sample().to_bytes().unwrap();
        for pos in [20, b.len() / 2, b.len() - 5, b.len() - 1] {
            let mut c = b.clone();
            c[pos] ^= 0x40;
            assert!(Checkpoint::from_bytes(&c).is_err(), "flip at {pos}");
        }
        assert!(Checkpoint::from_bytes(&b[..b.len() - 9]).is_err());
        assert!(Checkpoint::from_bytes(b"DPSE").is_err());
        let mut magic = b.clone();
        magic[0] = b'X';
        assert!(Checkpoint::from_bytes(&magic).unwrap_err().to_string().contains("magic"));
    }

    #[test]
    fn array_checksum_is_checked_even_with_a_fixed_file_crc() {
        let mut b = sample().to_bytes().unwrap();
        let pos = b.len() - 40;
        b[pos] ^= 1;
        let body = b.len() - 4;
        let crc = crc32fast::hash(&b[..body]);
        b[body..].copy_from_slice(&crc.to_le_bytes());
        let e = Checkpoint::from_bytes(&b).unwrap_err().to_string();
        assert!(e.contains("checksum") || e.contains("crc"), "{e}");
    }

    #[test]
    fn unknown_version_is_rejected() {
        let mut b = sample().to_bytes().unwrap();
        b[8..12].copy_from_slice(&2u32.to_le_bytes());
        let e = Checkpoint::from_bytes(&b).unwrap_err().to_string();
        assert!(e.contains("version 2"), "{e}");
    }

    #[test]
    fn restore_checks_names_and_shapes() {
        let ck = sample();
        let mut store = ParamStore::new();
        Model::new(&ck.settings.model, &mut store, 0).unwrap();
        ck.restore_into(&mut store).unwrap();
        assert_eq!(store, ck.params);

        let mut other = ParamStore::new();
        let mut cfg = ModelConfig::micro();
        cfg.dpcf_channels *= 2;
        cfg.enc_channels *= 2;
        Model::new(&cfg, &mut other, 0).unwrap();
        assert!(ck.restore_into(&mut other).is_err());
        assert_eq!(config_differences(&ck.settings.model, &cfg), vec!["dpcf_channels", "enc_channels"]);
        assert!(config_differences(&cfg, &cfg).is_empty());
    }
}
