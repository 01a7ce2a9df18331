//! Checkpoint container: a self-describing binary file holding the config,
//! history, every parameter matrix (current and best), and the optimizer
//! state. Matrices round-trip bit-exactly; the payload is protected by a
//! SHA-256 checksum.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "GDCP" | version u32 | meta_len u64 | meta JSON
//! | 4 matrix sections (params, best_params, adam.m, adam.v)
//! | sha256 of everything above
//! ```
//!
//! A matrix section is `count u64` then per matrix:
//! `name_len u64 | name | rows u64 | cols u64 | rows*cols f64`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::numerics::{AdamConfig, AdamState, Mat};
use crate::train::{Checkpoint, TrainConfig, TrainHistory};

use super::IoError;

const MAGIC: &[u8; 4] = b"GDCP";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Meta {
    cfg: TrainConfig,
    node_width: usize,
    edge_width: usize,
    tasks: usize,
    epoch: usize,
    history: TrainHistory,
    adam_cfg: AdamConfig,
    adam_step: u64,
}

fn push_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn push_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn push_mat(out: &mut Vec<u8>, name: &str, m: &Mat) {
    push_u64(out, name.len() as u64);
    out.extend_from_slice(name.as_bytes());
    push_u64(out, m.rows() as u64);
    push_u64(out, m.cols() as u64);
    for v in m.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn push_section(out: &mut Vec<u8>, mats: &[(String, Mat)]) {
    push_u64(out, mats.len() as u64);
    for (name, m) in mats {
        push_mat(out, name, m);
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], IoError> {
        if self.at + n > self.bytes.len() {
            return Err(IoError::Corrupt);
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, IoError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, IoError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn mat(&mut self) -> Result<(String, Mat), IoError> {
        let name_len = self.u64()? as usize;
        let name = String::from_utf8(self.take(name_len)?.to_vec()).map_err(|_| IoError::Corrupt)?;
        let rows = self.u64()? as usize;
        let cols = self.u64()? as usize;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(f64::from_le_bytes(self.take(8)?.try_into().unwrap()));
        }
        let m = Mat::from_vec(rows, cols, data).map_err(|_| IoError::Corrupt)?;
        Ok((name, m))
    }

    fn section(&mut self) -> Result<Vec<(String, Mat)>, IoError> {
        let count = self.u64()? as usize;
        (0..count).map(|_| self.mat()).collect()
    }
}

/// Serialize a checkpoint; byte output is a pure function of the
/// checkpoint, so save -> load -> save reproduces identical bytes.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), IoError> {
    let meta = Meta {
        cfg: ckpt.cfg.clone(),
        node_width: ckpt.node_width,
        edge_width: ckpt.edge_width,
        tasks: ckpt.tasks,
        epoch: ckpt.epoch,
        history: ckpt.history.clone(),
        adam_cfg: ckpt.adam.cfg,
        adam_step: ckpt.adam.step,
    };
    let meta_json = serde_json::to_vec(&meta).expect("meta serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    push_u32(&mut out, VERSION);
    push_u64(&mut out, meta_json.len() as u64);
    out.extend_from_slice(&meta_json);
    push_section(&mut out, &ckpt.params);
    push_section(&mut out, &ckpt.best_params);
    let unnamed = |mats: &[Mat]| -> Vec<(String, Mat)> {
        mats.iter().map(|m| (String::new(), m.clone())).collect()
    };
    push_section(&mut out, &unnamed(&ckpt.adam.m));
    push_section(&mut out, &unnamed(&ckpt.adam.v));
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    super::write_atomic(path, &out)
}

/// Load and verify a checkpoint.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, IoError> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 32 + 8 {
        return Err(IoError::Corrupt);
    }
    let (payload, checksum) = bytes.split_at(bytes.len() - 32);
    let digest = Sha256::digest(payload);
    if digest.as_slice() != checksum {
        return Err(IoError::Corrupt);
    }
    let mut r = Reader {
        bytes: payload,
        at: 0,
    };
    if r.take(4)? != MAGIC {
        return Err(IoError::Corrupt);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(IoError::VersionMismatch {
            found: version,
            expected: VERSION,
        });
    }
    let meta_len = r.u64()? as usize;
    let meta: Meta =
        serde_json::from_slice(r.take(meta_len)?).map_err(|_| IoError::Corrupt)?;
    let params = r.section()?;
    let best_params = r.section()?;
    let m: Vec<Mat> = r.section()?.into_iter().map(|(_, m)| m).collect();
    let v: Vec<Mat> = r.section()?.into_iter().map(|(_, m)| m).collect();
    if r.at != payload.len() {
        return Err(IoError::Corrupt);
    }
    Ok(Checkpoint {
        cfg: meta.cfg,
        node_width: meta.node_width,
        edge_width: meta.edge_width,
        tasks: meta.tasks,
        epoch: meta.epoch,
        history: meta.history,
        params,
        best_params,
        adam: AdamState {
            cfg: meta.adam_cfg,
            step: meta.adam_step,
            m,
            v,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::synth::{synth_generate, SynthSpec};
    use crate::train::{train, Variant};

    fn small_checkpoint() -> Checkpoint {
        let ds = synth_generate(&SynthSpec {
            n: 24,
            positive_ratio: 0.25,
            seed: 5,
            ..SynthSpec::default()
        })
        .unwrap();
        let cfg = TrainConfig {
            variant: Variant::Post,
            experts: 2,
            hidden: 5,
            layers: 2,
            epochs: 2,
            batch_size: 8,
            seed: 1,
            ..TrainConfig::default()
        };
        train(&cfg, &ds).unwrap()
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        let ckpt = small_checkpoint();
        save_checkpoint(&ckpt, &p1).unwrap();
        let loaded = load_checkpoint(&p1).unwrap();
        save_checkpoint(&loaded, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        assert_eq!(ckpt.params, loaded.params);
        assert_eq!(ckpt.adam.m, loaded.adam.m);
    }

    #[test]
    fn flipped_byte_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        save_checkpoint(&small_checkpoint(), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(IoError::Corrupt)));
    }

    #[test]
    fn truncated_file_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.ckpt");
        save_checkpoint(&small_checkpoint(), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 3]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(IoError::Corrupt)));
    }
}
