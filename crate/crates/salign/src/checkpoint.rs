//! Checkpoint container: canonical parameter names mapped to little-endian
//! f32 arrays, guarded by the architecture fingerprint.

use crate::error::{Error, Result};
use crate::network::ParamSet;
use ndarray::Array2;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"SALNCKP1";

#[derive(Debug, Clone)]
pub struct CheckpointMeta {
    pub fingerprint: String,
    pub step: u64,
    pub val_metric: f64,
}

pub fn save(path: &Path, params: &ParamSet, step: u64, val_metric: f64) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    let fp = params.fingerprint().as_bytes();
    buf.extend_from_slice(&(fp.len() as u16).to_le_bytes());
    buf.extend_from_slice(fp);
    buf.extend_from_slice(&step.to_le_bytes());
    buf.extend_from_slice(&val_metric.to_le_bytes());
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for e in params.entries() {
        let name = e.name.as_bytes();
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name);
        buf.extend_from_slice(&(e.value.nrows() as u32).to_le_bytes());
        buf.extend_from_slice(&(e.value.ncols() as u32).to_le_bytes());
        for v in e.value.iter() {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    f.write_all(&buf).map_err(|e| Error::io(path.display().to_string(), e))
}

struct Reader {
    bytes: Vec<u8>,
    pos: usize,
    path: String,
}

impl Reader {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Incompatible(format!(
                "{}: truncated checkpoint",
                self.path
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
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
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn open_reader(path: &Path) -> Result<Reader> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut r = Reader {
        bytes,
        pos: 0,
        path: path.display().to_string(),
    };
    if r.take(8)? != MAGIC {
        return Err(Error::Incompatible(format!(
            "{}: not a checkpoint file",
            path.display()
        )));
    }
    Ok(r)
}

/// Reads step / metric / fingerprint without touching parameter data.
pub fn read_meta(path: &Path) -> Result<CheckpointMeta> {
    let mut r = open_reader(path)?;
    let fp_len = r.u16()? as usize;
    let fingerprint = String::from_utf8_lossy(r.take(fp_len)?).into_owned();
    let step = r.u64()?;
    let val_metric = r.f64()?;
    Ok(CheckpointMeta {
        fingerprint,
        step,
        val_metric,
    })
}

/// Loads parameter values into an existing (layout-defining) set. Rejects
/// fingerprint, name, or shape mismatches.
pub fn load_into(path: &Path, params: &mut ParamSet) -> Result<CheckpointMeta> {
    let mut r = open_reader(path)?;
    let fp_len = r.u16()? as usize;
    let fingerprint = String::from_utf8_lossy(r.take(fp_len)?).into_owned();
    if fingerprint != params.fingerprint() {
        return Err(Error::Incompatible(format!(
            "{}: fingerprint {} does not match model {}",
            path.display(),
            &fingerprint[..12.min(fingerprint.len())],
            &params.fingerprint()[..12]
        )));
    }
    let step = r.u64()?;
    let val_metric = r.f64()?;
    let n = r.u32()? as usize;
    if n != params.len() {
        return Err(Error::Incompatible(format!(
            "{}: {} parameters stored, model has {}",
            path.display(),
            n,
            params.len()
        )));
    }
    for i in 0..n {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8_lossy(r.take(name_len)?).into_owned();
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let entry = params.entry(i);
        if entry.name != name || entry.value.dim() != (rows, cols) {
            return Err(Error::Incompatible(format!(
                "{}: entry {i} is {name} [{rows}x{cols}], model expects {} [{}x{}]",
                path.display(),
                entry.name,
                entry.value.nrows(),
                entry.value.ncols()
            )));
        }
        let raw = r.take(rows * cols * 4)?;
        let mut data = Vec::with_capacity(rows * cols);
        for chunk in raw.chunks_exact(4) {
            data.push(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
        }
        params.entry_mut(i).value =
            Array2::from_shape_vec((rows, cols), data).expect("checkpoint shape");
    }
    Ok(CheckpointMeta {
        fingerprint,
        step,
        val_metric,
    })
}

/// Parameter-wise arithmetic mean of the `k` checkpoints with the best
/// (lowest) validation metric. All checkpoints must share the model
/// fingerprint.
pub fn average_best(paths: &[std::path::PathBuf], k: usize, skeleton: &ParamSet) -> Result<ParamSet> {
    if k == 0 || k > paths.len() {
        return Err(Error::config(format!(
            "cannot average best {k} of {} checkpoints",
            paths.len()
        )));
    }
    let mut ranked: Vec<(f64, &std::path::PathBuf)> = Vec::with_capacity(paths.len());
    for p in paths {
        let meta = read_meta(p)?;
        if meta.fingerprint != skeleton.fingerprint() {
            return Err(Error::Incompatible(format!(
                "{}: fingerprint differs from model",
                p.display()
            )));
        }
        ranked.push((meta.val_metric, p));
    }
    ranked.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then_with(|| a.1.cmp(b.1)));
    let chosen = &ranked[..k];

    let mut acc = skeleton.clone();
    for i in 0..acc.len() {
        acc.entry_mut(i).value.fill(0.0);
    }
    let mut scratch = skeleton.clone();
    for (_, p) in chosen {
        load_into(p, &mut scratch)?;
        for i in 0..acc.len() {
            let add = scratch.entry(i).value.clone();
            acc.entry_mut(i).value += &add;
        }
    }
    let inv = 1.0 / k as f64;
    for i in 0..acc.len() {
        acc.entry_mut(i).value.mapv_inplace(|v| v * inv);
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{init_params, ModelConfig};

    fn toy_params(seed: u64) -> ParamSet {
        init_params(&ModelConfig::toy(12, 8), seed).unwrap()
    }

    #[test]
    fn save_load_roundtrip_through_f32() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let params = toy_params(3);
        save(&path, &params, 42, 1.25).unwrap();
        let meta = read_meta(&path).unwrap();
        assert_eq!(meta.step, 42);
        assert_eq!(meta.val_metric, 1.25);

        let mut loaded = toy_params(99);
        load_into(&path, &mut loaded).unwrap();
        for (a, b) in params.entries().iter().zip(loaded.entries()) {
            for (x, y) in a.value.iter().zip(b.value.iter()) {
                assert_eq!(*x as f32, *y as f32);
                assert_eq!(*y, *y as f32 as f64); // stored precision exactly
            }
        }
        // loading twice is stable bitwise
        let mut again = toy_params(100);
        load_into(&path, &mut again).unwrap();
        for (a, b) in loaded.entries().iter().zip(again.entries()) {
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn fingerprint_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        save(&path, &toy_params(1), 0, 0.0).unwrap();
        let mut other = init_params(&ModelConfig::toy(13, 8), 1).unwrap();
        assert!(matches!(
            load_into(&path, &mut other),
            Err(Error::Incompatible(_))
        ));
    }

    #[test]
    fn averaging_identical_and_opposite() {
        let dir = tempfile::tempdir().unwrap();
        let params = toy_params(7);
        let mut neg = params.clone();
        for i in 0..neg.len() {
            neg.entry_mut(i).value.mapv_inplace(|v| -v);
        }
        let p1 = dir.path().join("1.ckpt");
        let p2 = dir.path().join("2.ckpt");
        let p3 = dir.path().join("3.ckpt");
        save(&p1, &params, 1, 0.5).unwrap();
        save(&p2, &params, 2, 0.4).unwrap();
        save(&p3, &neg, 3, 0.3).unwrap();

        // k copies of one checkpoint -> identical parameters
        let avg = average_best(&[p1.clone(), p2.clone()], 2, &params).unwrap();
        for (a, b) in avg.entries().iter().zip(params.entries()) {
            for (x, y) in a.value.iter().zip(b.value.iter()) {
                assert_eq!(*x, *y as f32 as f64);
            }
        }
        // theta and -theta -> zero
        let avg = average_best(&[p2.clone(), p3.clone()], 2, &params).unwrap();
        assert!(avg.entries().iter().all(|e| e.value.iter().all(|v| *v == 0.0)));
        // best-k selection takes lowest metric first (p3 = 0.3, p2 = 0.4)
        let avg = average_best(&[p1, p2, p3], 2, &params).unwrap();
        assert!(avg.entries().iter().all(|e| e.value.iter().all(|v| *v == 0.0)));
    }
}
