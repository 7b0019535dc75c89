//! Versioned checkpoint container: named parameter tensors, optimizer
//! velocity, stage tag, epoch and a config fingerprint. Loading verifies the
//! fingerprint so a checkpoint can only be applied to the configuration that
//! produced it.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Day2DarkError, Result};
use crate::nn::{ParamStore, SgdMomentum};
use crate::tensor::Mat;

const MAGIC: &[u8; 4] = b"D2DK";
const VERSION: u32 = 1;

/// FNV-1a hash of a canonical config serialization.
pub fn fingerprint_str(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// A point-in-time snapshot of training.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub stage: String,
    pub epoch: u64,
    pub config_fingerprint: u64,
    pub params: Vec<(String, Mat)>,
    pub velocity: Vec<(u64, Mat)>,
}

impl Checkpoint {
    pub fn capture(
        stage: &str,
        epoch: u64,
        config_fingerprint: u64,
        store: &ParamStore,
        optimizer: &SgdMomentum,
    ) -> Checkpoint {
        Checkpoint {
            stage: stage.to_string(),
            epoch,
            config_fingerprint,
            params: store
                .iter()
                .map(|(_, n, m)| (n.to_string(), m.clone()))
                .collect(),
            velocity: optimizer
                .velocity_tensors()
                .map(|(i, m)| (i as u64, m.clone()))
                .collect(),
        }
    }

    /// Copy tensors back into a freshly constructed store/optimizer pair.
    /// Names and shapes must line up exactly.
    pub fn apply(&self, store: &mut ParamStore, optimizer: &mut SgdMomentum) -> Result<()> {
        if self.params.len() != store.len() {
            return Err(Day2DarkError::config(format!(
                "checkpoint holds {} tensors, model has {}",
                self.params.len(),
                store.len()
            )));
        }
        for (name, mat) in &self.params {
            let id = store.id_of(name).ok_or_else(|| {
                Day2DarkError::config(format!("checkpoint tensor {name} unknown to this model"))
            })?;
            if !store.get(id).same_shape(mat) {
                return Err(Day2DarkError::shape(format!(
                    "checkpoint tensor {name} is {}, model expects {}",
                    mat.shape_str(),
                    store.get(id).shape_str()
                )));
            }
            *store.get_mut(id) = mat.clone();
        }
        for (idx, mat) in &self.velocity {
            optimizer.set_velocity(*idx as usize, mat.clone());
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&self.config_fingerprint.to_le_bytes())?;
        let stage = self.stage.as_bytes();
        w.write_all(&(stage.len() as u32).to_le_bytes())?;
        w.write_all(stage)?;
        w.write_all(&self.epoch.to_le_bytes())?;
        w.write_all(&(self.params.len() as u64).to_le_bytes())?;
        for (name, mat) in &self.params {
            write_named_mat(&mut w, name, mat)?;
        }
        w.write_all(&(self.velocity.len() as u64).to_le_bytes())?;
        for (idx, mat) in &self.velocity {
            w.write_all(&idx.to_le_bytes())?;
            write_named_mat(&mut w, "", mat)?;
        }
        Ok(())
    }

    /// Load and verify against the expected config fingerprint.
    pub fn load(path: &Path, expected_fingerprint: u64) -> Result<Checkpoint> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Day2DarkError::Malformed {
                path: path.display().to_string(),
                reason: "bad checkpoint magic".into(),
            });
        }
        let mut u32buf = [0u8; 4];
        r.read_exact(&mut u32buf)?;
        if u32::from_le_bytes(u32buf) != VERSION {
            return Err(Day2DarkError::Malformed {
                path: path.display().to_string(),
                reason: "unknown checkpoint version".into(),
            });
        }
        let mut u64buf = [0u8; 8];
        r.read_exact(&mut u64buf)?;
        let found = u64::from_le_bytes(u64buf);
        if found != expected_fingerprint {
            return Err(Day2DarkError::Fingerprint {
                expected: expected_fingerprint,
                found,
            });
        }
        r.read_exact(&mut u32buf)?;
        let stage_len = u32::from_le_bytes(u32buf) as usize;
        let mut stage_bytes = vec![0u8; stage_len];
        r.read_exact(&mut stage_bytes)?;
        let stage = String::from_utf8(stage_bytes).map_err(|_| Day2DarkError::Malformed {
            path: path.display().to_string(),
            reason: "bad stage tag".into(),
        })?;
        r.read_exact(&mut u64buf)?;
        let epoch = u64::from_le_bytes(u64buf);
        r.read_exact(&mut u64buf)?;
        let n_params = u64::from_le_bytes(u64buf) as usize;
        let mut params = Vec::with_capacity(n_params);
        for _ in 0..n_params {
            params.push(read_named_mat(&mut r, path)?);
        }
        r.read_exact(&mut u64buf)?;
        let n_vel = u64::from_le_bytes(u64buf) as usize;
        let mut velocity = Vec::with_capacity(n_vel);
        for _ in 0..n_vel {
            r.read_exact(&mut u64buf)?;
            let idx = u64::from_le_bytes(u64buf);
            let (_, mat) = read_named_mat(&mut r, path)?;
            velocity.push((idx, mat));
        }
        Ok(Checkpoint {
            stage,
            epoch,
            config_fingerprint: found,
            params,
            velocity,
        })
    }
}

fn write_named_mat(w: &mut impl Write, name: &str, mat: &Mat) -> Result<()> {
    let bytes = name.as_bytes();
    w.write_all(&(bytes.len() as u32).to_le_bytes())?;
    w.write_all(bytes)?;
    w.write_all(&(mat.rows as u64).to_le_bytes())?;
    w.write_all(&(mat.cols as u64).to_le_bytes())?;
    for v in &mat.data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_named_mat(r: &mut impl Read, path: &Path) -> Result<(String, Mat)> {
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf)?;
    let name_len = u32::from_le_bytes(u32buf) as usize;
    let mut name_bytes = vec![0u8; name_len];
    r.read_exact(&mut name_bytes)?;
    let name = String::from_utf8(name_bytes).map_err(|_| Day2DarkError::Malformed {
        path: path.display().to_string(),
        reason: "bad tensor name".into(),
    })?;
    let mut u64buf = [0u8; 8];
    r.read_exact(&mut u64buf)?;
    let rows = u64::from_le_bytes(u64buf) as usize;
    r.read_exact(&mut u64buf)?;
    let cols = u64::from_le_bytes(u64buf) as usize;
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        r.read_exact(&mut u64buf)?;
        data.push(f64::from_le_bytes(u64buf));
    }
    Ok((name, Mat::from_vec(rows, cols, data)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Linear;
    use crate::rng::rng_from_seed;

    fn toy_store() -> (ParamStore, SgdMomentum) {
        let mut store = ParamStore::new();
        let mut rng = rng_from_seed(4);
        let _ = Linear::new(&mut store, "a", 3, 2, &mut rng);
        let _ = Linear::new(&mut store, "b", 2, 2, &mut rng);
        let opt = SgdMomentum::new(0.9, store.len());
        (store, opt)
    }

    #[test]
    fn round_trip_is_bitwise() {
        let (store, opt) = toy_store();
        let ckpt = Checkpoint::capture("stage1", 3, 42, &store, &opt);
        let path = std::env::temp_dir().join(format!("d2d_ckpt_{}.bin", std::process::id()));
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load(&path, 42).unwrap();
        assert_eq!(loaded.stage, "stage1");
        assert_eq!(loaded.epoch, 3);
        for ((n1, m1), (n2, m2)) in ckpt.params.iter().zip(&loaded.params) {
            assert_eq!(n1, n2);
            assert_eq!(m1.bit_hash(), m2.bit_hash());
        }
        let (mut store2, mut opt2) = toy_store();
        for (_, _, m) in store2.clone().iter() {
            let _ = m;
        }
        loaded.apply(&mut store2, &mut opt2).unwrap();
        assert_eq!(
            store.subset_hash(|_| true),
            store2.subset_hash(|_| true),
            "applied params must be bitwise identical"
        );
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn fingerprint_mismatch_is_rejected() {
        let (store, opt) = toy_store();
        let ckpt = Checkpoint::capture("stage1", 0, 7, &store, &opt);
        let path = std::env::temp_dir().join(format!("d2d_ckpt_fp_{}.bin", std::process::id()));
        ckpt.save(&path).unwrap();
        match Checkpoint::load(&path, 8) {
            Err(Day2DarkError::Fingerprint {
                expected: 8,
                found: 7,
            }) => {}
            other => panic!("expected fingerprint mismatch, got {other:?}"),
        }
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn fingerprint_str_is_stable_and_sensitive() {
        assert_eq!(fingerprint_str("abc"), fingerprint_str("abc"));
        assert_ne!(fingerprint_str("abc"), fingerprint_str("abd"));
    }
}
