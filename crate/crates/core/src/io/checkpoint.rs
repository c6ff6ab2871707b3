//! Training checkpoint container.
//!
//! ```text
//! "BAGS"  u32 version  "CKPT"  u64 payload length  payload  sha256
//! ```
//!
//! Integers are little-endian; the payload is bincode; the digest covers
//! every byte before it.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{read_file, write_atomic, MAGIC};
use crate::error::{Error, Result};
use crate::trainer::{Model, TrainConfig, TrainState, Trainer};

pub const CHECKPOINT_VERSION: u32 = 1;
const KIND: [u8; 4] = *b"CKPT";
const HEADER: usize = 4 + 4 + 4 + 8;
const DIGEST: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub model: Model,
    pub state: TrainState,
}

impl Checkpoint {
    pub fn from_trainer(trainer: &Trainer) -> Self {
        Self {
            config: trainer.config.clone(),
            model: trainer.model.clone(),
            state: trainer.state.clone(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let payload = bincode::serialize(self).map_err(|e| Error::Format(e.to_string()))?;
        let mut out = Vec::with_capacity(HEADER + payload.len() + DIGEST);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&KIND);
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&payload);
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || bytes[..4] != MAGIC {
            return Err(Error::Format("not a BAGS file".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version > CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: version,
                supported: CHECKPOINT_VERSION,
            });
        }
        if bytes.len() < HEADER + DIGEST {
            return Err(Error::Checksum);
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Checksum);
        }
        if bytes[8..12] != KIND {
            return Err(Error::Format("BAGS file is not a checkpoint".into()));
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
        if len != (body.len() - HEADER) as u64 {
            return Err(Error::Format(format!("payload length {len} does not match file size")));
        }
        let ck: Checkpoint = bincode::deserialize(&body[HEADER..]).map_err(|e| Error::Format(e.to_string()))?;
        ck.config.validate()?;
        ck.model.check_finite()?;
        Ok(ck)
    }
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: &Path) -> Result<()> {
    write_atomic(path, &checkpoint.to_bytes()?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&read_file(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::ZeroProvider;
    use crate::synthetic::{ArmConfig, ArmScene};
    use crate::trainer::evaluate;

    fn setup(dir: &Path) -> (crate::io::Dataset, TrainConfig) {
        let scene = ArmScene::new(ArmConfig {
            splats: 200,
            frames: 4,
            size: 32,
            ..ArmConfig::default()
        })
        .unwrap();
        let dataset = crate::io::load_dataset(&scene.write_dataset(dir).unwrap()).unwrap();
        let mut config = TrainConfig {
            warmup_iterations: 3,
            joint_iterations: 3,
            ..TrainConfig::default()
        };
        config.init.splats = 100;
        config.rig.bones = 3;
        config.rig.hidden_width = 8;
        (dataset, config)
    }

    fn small_checkpoint(dir: &Path) -> (Checkpoint, crate::io::Dataset) {
        let (dataset, config) = setup(dir);
        let ck = {
            let mut trainer = Trainer::new(config, &dataset, &ZeroProvider).unwrap();
            for _ in 0..4 {
                trainer.step().unwrap();
            }
            Checkpoint::from_trainer(&trainer)
        };
        (ck, dataset)
    }

    #[test]
    fn round_trip_is_byte_identical_and_evaluates_the_same() {
        let dir = tempfile::tempdir().unwrap();
        let (ck, dataset) = small_checkpoint(dir.path());
        let a = dir.path().join("a.ckpt");
        let b = dir.path().join("b.ckpt");
        save_checkpoint(&ck, &a).unwrap();
        let loaded = load_checkpoint(&a).unwrap();
        assert_eq!(loaded, ck);
        save_checkpoint(&loaded, &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        assert_eq!(evaluate(&loaded.model, &dataset).unwrap(), evaluate(&ck.model, &dataset).unwrap());
        // no temporary files left behind
        let names: Vec<_> = std::fs::read_dir(dir.path())
            .unwrap()
            .filter_map(|e| e.ok()?.file_name().into_string().ok())
            .filter(|n| n.contains(".tmp"))
            .collect();
        assert!(names.is_empty(), "{names:?}");
    }

    #[test]
    fn corruption_truncation_and_versions() {
        let dir = tempfile::tempdir().unwrap();
        let (ck, _) = small_checkpoint(dir.path());
        let bytes = ck.to_bytes().unwrap();
        for cut in [bytes.len() - 1, bytes.len() / 2, 30, 10] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Checksum)), "cut {cut}");
        }
        let mut flipped = bytes.clone();
        flipped[HEADER + 5] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&flipped), Err(Error::Checksum)));
        let mut future = bytes.clone();
        future[4..8].copy_from_slice(&(CHECKPOINT_VERSION + 1).to_le_bytes());
        assert!(matches!(
            Checkpoint::from_bytes(&future),
            Err(Error::Version { found, .. }) if found == CHECKPOINT_VERSION + 1
        ));
        assert!(matches!(Checkpoint::from_bytes(b"PNG\0abcd"), Err(Error::Format(_))));
        let missing = dir.path().join("missing.ckpt");
        match load_checkpoint(&missing) {
            Err(Error::Io { path, .. }) => assert_eq!(path, missing),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn resumed_training_matches_uninterrupted() {
        let dir = tempfile::tempdir().unwrap();
        let (dataset, config) = setup(dir.path());
        let mut straight = Trainer::new(config.clone(), &dataset, &ZeroProvider).unwrap();
        while !straight.is_done() {
            straight.step().unwrap();
        }
        let mut first = Trainer::new(config, &dataset, &ZeroProvider).unwrap();
        for _ in 0..4 {
            first.step().unwrap();
        }
        let path = dir.path().join("mid.ckpt");
        save_checkpoint(&Checkpoint::from_trainer(&first), &path).unwrap();
        drop(first);
        let loaded = load_checkpoint(&path).unwrap();
        let mut resumed =
            Trainer::resume(loaded.config, &dataset, &ZeroProvider, loaded.model, loaded.state).unwrap();
        while !resumed.is_done() {
            resumed.step().unwrap();
        }
        assert_eq!(straight.model, resumed.model);
        assert_eq!(straight.state, resumed.state);
    }
}
