//! Checkpoint file format: magic "CMPK", a fixed little-endian metadata
//! block (stage code, global step, run seed, generator stream position),
//! then name-sorted tensor records. Parameters are stored as f32; the
//! corpus prior rides along as a single f64 record named "align.prior".
//! The layout is platform-independent byte for byte: identical inputs
//! produce identical files everywhere.

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;
use crate::trainer::Stage;
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"CMPK";
pub const VERSION: u32 = 1;
/// Record name for the corpus word-frequency prior.
pub const PRIOR_RECORD: &str = "align.prior";

const DTYPE_F32: u8 = 0;
const DTYPE_F64: u8 = 1;
const MAX_RANK: u8 = 8;
const MAX_ELEMENTS: u64 = 1 << 30;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Last completed stage.
    pub stage: Stage,
    /// Global optimizer step count at the end of that stage.
    pub step: u64,
    pub seed: u64,
    /// Stream position of the run's seeded generator.
    pub word_pos: u128,
    pub params: BTreeMap<String, Tensor<f32>>,
    pub prior: Vec<f64>,
}

impl Checkpoint {
    pub fn from_params(stage: Stage, step: u64, seed: u64, word_pos: u128, params: &ParamSet<f32>, prior: &[f64]) -> Checkpoint {
        Checkpoint {
            stage,
            step,
            seed,
            word_pos,
            params: params
                .iter()
                .map(|(name, p)| (name.clone(), p.value.clone()))
                .collect(),
            prior: prior.to_vec(),
        }
    }

    /// Load the stored values into a freshly initialized parameter set of
    /// the same architecture; name or shape disagreements mean the
    /// checkpoint belongs to a different model.
    pub fn apply_to(&self, params: &mut ParamSet<f32>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} tensors, model expects {}",
                self.params.len(),
                params.len()
            )));
        }
        for (name, value) in &self.params {
            params
                .set_value(name, value.clone())
                .map_err(|e| Error::Checkpoint(format!("record {name:?} does not fit the model: {e}")))?;
        }
        Ok(())
    }
}

fn put_u32(w: &mut impl Write, v: u32) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

fn put_u64(w: &mut impl Write, v: u64) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

fn put_u128(w: &mut impl Write, v: u128) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

fn write_record(w: &mut impl Write, name: &str, dtype: u8, shape: &[usize], payload: &[u8]) -> Result<()> {
    put_u32(w, name.len() as u32)?;
    w.write_all(name.as_bytes())?;
    w.write_all(&[dtype, shape.len() as u8])?;
    for &e in shape {
        put_u32(w, e as u32)?;
    }
    w.write_all(payload)?;
    Ok(())
}

pub fn write_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    if ck.params.contains_key(PRIOR_RECORD) {
        return Err(Error::Checkpoint(format!("parameter name {PRIOR_RECORD:?} is reserved")));
    }
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    w.write_all(MAGIC)?;
    put_u32(&mut w, VERSION)?;
    put_u32(&mut w, ck.stage.code())?;
    put_u64(&mut w, ck.step)?;
    put_u64(&mut w, ck.seed)?;
    put_u128(&mut w, ck.word_pos)?;
    put_u32(&mut w, (ck.params.len() + 1) as u32)?;

    // one merged name-sorted stream: parameters plus the prior record
    let prior_bytes: Vec<u8> = ck.prior.iter().flat_map(|v| v.to_le_bytes()).collect();
    let mut names: Vec<&str> = ck.params.keys().map(|s| s.as_str()).collect();
    names.push(PRIOR_RECORD);
    names.sort_unstable();
    for name in names {
        if name == PRIOR_RECORD {
            write_record(&mut w, name, DTYPE_F64, &[ck.prior.len()], &prior_bytes)?;
        } else {
            let t = &ck.params[name];
            let payload: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
            write_record(&mut w, name, DTYPE_F32, t.shape(), &payload)?;
        }
    }
    w.flush()?;
    Ok(())
}

struct Cursor<R> {
    inner: R,
}

impl<R: Read> Cursor<R> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner
            .read_exact(&mut buf)
            .map_err(|_| Error::Checkpoint("file is truncated".into()))?;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.bytes(16)?.try_into().unwrap()))
    }
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = std::fs::File::open(path)?;
    let mut r = Cursor {
        inner: std::io::BufReader::new(file),
    };
    if r.bytes(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic: not a checkpoint file".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version} (expected {VERSION})")));
    }
    let stage = Stage::from_code(r.u32()?)?;
    let step = r.u64()?;
    let seed = r.u64()?;
    let word_pos = r.u128()?;
    let n_records = r.u32()? as usize;

    let mut params = BTreeMap::new();
    let mut prior: Option<Vec<f64>> = None;
    let mut prev_name: Option<String> = None;
    for _ in 0..n_records {
        let name_len = r.u32()? as usize;
        if name_len == 0 || name_len > 4096 {
            return Err(Error::Checkpoint(format!("implausible record name length {name_len}")));
        }
        let name = String::from_utf8(r.bytes(name_len)?)
            .map_err(|_| Error::Checkpoint("record name is not valid UTF-8".into()))?;
        if let Some(prev) = &prev_name {
            if *prev >= name {
                return Err(Error::Checkpoint(format!(
                    "records out of order: {prev:?} precedes {name:?}"
                )));
            }
        }
        prev_name = Some(name.clone());
        let header = r.bytes(2)?;
        let (dtype, rank) = (header[0], header[1]);
        if rank > MAX_RANK {
            return Err(Error::Checkpoint(format!("record {name:?} has implausible rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        let mut elements: u64 = 1;
        for _ in 0..rank {
            let e = r.u32()? as u64;
            elements = elements.saturating_mul(e);
            shape.push(e as usize);
        }
        if elements > MAX_ELEMENTS {
            return Err(Error::Checkpoint(format!("record {name:?} claims {elements} elements")));
        }
        let elements = elements as usize;
        match dtype {
            DTYPE_F32 => {
                let raw = r.bytes(elements * 4)?;
                let data: Vec<f32> = raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                let tensor = Tensor::new(shape, data)
                    .map_err(|e| Error::Checkpoint(format!("record {name:?}: {e}")))?;
                params.insert(name, tensor);
            }
            DTYPE_F64 => {
                if name != PRIOR_RECORD {
                    return Err(Error::Checkpoint(format!("unexpected f64 record {name:?}")));
                }
                let raw = r.bytes(elements * 8)?;
                prior = Some(
                    raw.chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                );
            }
            other => {
                return Err(Error::Checkpoint(format!("record {name:?} has unknown dtype {other}")));
            }
        }
    }
    let mut trailing = [0u8; 1];
    if r.inner.read(&mut trailing)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after the last record".into()));
    }
    let prior = prior.ok_or_else(|| Error::Checkpoint(format!("record {PRIOR_RECORD:?} missing")))?;
    Ok(Checkpoint {
        stage,
        step,
        seed,
        word_pos,
        params,
        prior,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::toy_config;

    fn tempfile(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("nanomm_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    fn sample_checkpoint() -> Checkpoint {
        let model = toy_config(39);
        let params: ParamSet<f32> = model.init_params(5).unwrap();
        let prior: Vec<f64> = (1..=39).map(|i| i as f64 / 780.0).collect();
        Checkpoint::from_params(Stage::IIFixed, 123, 42, 77, &params, &prior)
    }

    #[test]
    fn round_trip_preserves_everything() {
        let ck = sample_checkpoint();
        let path = tempfile("round_trip.cmpk");
        write_checkpoint(&path, &ck).unwrap();
        let back = read_checkpoint(&path).unwrap();
        assert_eq!(back.stage, Stage::IIFixed);
        assert_eq!(back.step, 123);
        assert_eq!(back.seed, 42);
        assert_eq!(back.word_pos, 77);
        assert_eq!(back.params.len(), ck.params.len());
        for (name, t) in &ck.params {
            let b = &back.params[name];
            assert_eq!(b.shape(), t.shape());
            assert_eq!(b.data(), t.data(), "{name} changed across the round trip");
        }
        // f64 bits of the prior survive exactly
        assert_eq!(back.prior, ck.prior);
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn writes_are_byte_deterministic() {
        let ck = sample_checkpoint();
        let p1 = tempfile("det_a.cmpk");
        let p2 = tempfile("det_b.cmpk");
        write_checkpoint(&p1, &ck).unwrap();
        write_checkpoint(&p2, &ck).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        std::fs::remove_file(&p1).unwrap();
        std::fs::remove_file(&p2).unwrap();
    }

    #[test]
    fn malformed_files_are_rejected() {
        let ck = sample_checkpoint();
        let path = tempfile("valid.cmpk");
        write_checkpoint(&path, &ck).unwrap();
        let good = std::fs::read(&path).unwrap();

        // bad magic
        let mut bad = good.clone();
        bad[0] = b'X';
        let bad_path = tempfile("bad_magic.cmpk");
        std::fs::write(&bad_path, &bad).unwrap();
        assert!(matches!(read_checkpoint(&bad_path), Err(Error::Checkpoint(_))));

        // wrong version
        let mut bad = good.clone();
        bad[4] = 9;
        std::fs::write(&bad_path, &bad).unwrap();
        assert!(matches!(read_checkpoint(&bad_path), Err(Error::Checkpoint(_))));

        // unknown stage code
        let mut bad = good.clone();
        bad[8] = 9;
        std::fs::write(&bad_path, &bad).unwrap();
        assert!(matches!(read_checkpoint(&bad_path), Err(Error::Checkpoint(_))));

        // truncation
        std::fs::write(&bad_path, &good[..good.len() / 2]).unwrap();
        assert!(matches!(read_checkpoint(&bad_path), Err(Error::Checkpoint(_))));

        // trailing garbage
        let mut bad = good.clone();
        bad.push(0);
        std::fs::write(&bad_path, &bad).unwrap();
        assert!(matches!(read_checkpoint(&bad_path), Err(Error::Checkpoint(_))));

        // exit code contract for corrupt checkpoints
        assert_eq!(read_checkpoint(&bad_path).unwrap_err().exit_code(), 4);

        std::fs::remove_file(&path).unwrap();
        std::fs::remove_file(&bad_path).unwrap();
    }

    #[test]
    fn apply_to_matches_architecture() {
        let model = toy_config(39);
        let src: ParamSet<f32> = model.init_params(5).unwrap();
        let prior = vec![1.0 / 39.0; 39];
        let ck = Checkpoint::from_params(Stage::I, 1, 2, 3, &src, &prior);

        let mut dst: ParamSet<f32> = model.init_params(99).unwrap();
        ck.apply_to(&mut dst).unwrap();
        for (name, p) in src.iter() {
            assert_eq!(dst.tensor(name).unwrap().data(), p.value.data(), "{name} not restored");
        }

        // different architecture → rejected
        let other = toy_config(11);
        let mut wrong: ParamSet<f32> = other.init_params(1).unwrap();
        assert!(matches!(ck.apply_to(&mut wrong), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn unsorted_records_are_rejected() {
        // hand-built file with two records out of lexicographic order
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&VERSION.to_le_bytes());
        bytes.extend_from_slice(&0u32.to_le_bytes()); // stage I
        bytes.extend_from_slice(&0u64.to_le_bytes());
        bytes.extend_from_slice(&0u64.to_le_bytes());
        bytes.extend_from_slice(&0u128.to_le_bytes());
        bytes.extend_from_slice(&2u32.to_le_bytes());
        for name in ["b.w", "a.w"] {
            bytes.extend_from_slice(&(name.len() as u32).to_le_bytes());
            bytes.extend_from_slice(name.as_bytes());
            bytes.push(DTYPE_F32);
            bytes.push(1);
            bytes.extend_from_slice(&1u32.to_le_bytes());
            bytes.extend_from_slice(&1.0f32.to_le_bytes());
        }
        let path = tempfile("unsorted.cmpk");
        std::fs::write(&path, &bytes).unwrap();
        let err = read_checkpoint(&path).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(_)), "got {err:?}");
        assert!(err.to_string().contains("out of order"));
        std::fs::remove_file(&path).unwrap();
    }
}
