//! Model checkpoints.
//!
//! Single-file binary container, little-endian throughout:
//!
//! ```text
//! magic   "ACDN"
//! version u32 (= 1)
//! config  u32 length + UTF-8 TOML echo of the resolved run config
//! step    u64, epochs completed u32
//! params  u32 count, then per tensor:
//!         u32 name length + name bytes,
//!         4 x u32 shape (batch, channels, height, width),
//!         numel x f64 values
//! opt     u8 flag; when 1, per tensor in the same order:
//!         numel x f64 Adam first moment, numel x f64 second moment
//! digest  32-byte SHA-256 of everything above
//! ```

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::net::Model;
use crate::tensor::{Shape, Tensor};

const MAGIC: &[u8; 4] = b"ACDN";
const VERSION: u32 = 1;

/// Adam moments aligned with the parameter list.
#[derive(Clone, Debug, Default)]
pub struct OptState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config_toml: String,
    pub step: u64,
    pub epochs_done: u32,
    pub params: Vec<(String, Tensor)>,
    pub opt: Option<OptState>,
}

impl Checkpoint {
    /// Snapshot a model (and optionally optimizer moments) for saving.
    pub fn from_model(
        config_toml: &str,
        model: &Model,
        step: u64,
        epochs_done: u32,
        opt: Option<OptState>,
    ) -> Self {
        Checkpoint {
            config_toml: config_toml.to_string(),
            step,
            epochs_done,
            params: model
                .params()
                .into_iter()
                .map(|(name, t)| (name, t.clone()))
                .collect(),
            opt,
        }
    }

    /// Copy stored parameter values into a freshly built model. Names and
    /// shapes must match exactly.
    pub fn apply_to(&self, model: &mut Model) -> Result<()> {
        let mut targets = model.params_mut();
        if targets.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "parameter count mismatch: model has {}, checkpoint has {}",
                targets.len(),
                self.params.len()
            )));
        }
        for ((tn, target), (cn, stored)) in targets.iter_mut().zip(&self.params) {
            if tn != cn {
                return Err(Error::Checkpoint(format!("parameter order mismatch: {tn} vs {cn}")));
            }
            if target.shape() != stored.shape() {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch for {tn}: {} vs {}",
                    target.shape(),
                    stored.shape()
                )));
            }
            target.data_mut().copy_from_slice(stored.data());
        }
        Ok(())
    }
}

struct HashingWriter<W: Write> {
    inner: W,
    hasher: Sha256,
}

impl<W: Write> Write for HashingWriter<W> {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        let n = self.inner.write(buf)?;
        self.hasher.update(&buf[..n]);
        Ok(n)
    }

    fn flush(&mut self) -> std::io::Result<()> {
        self.inner.flush()
    }
}

fn write_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_f64s<W: Write>(w: &mut W, values: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(values.len() * 8);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn save(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    if let Some(parent) = path.as_ref().parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let file = std::fs::File::create(path.as_ref())?;
    let mut w = HashingWriter { inner: BufWriter::new(file), hasher: Sha256::new() };

    w.write_all(MAGIC)?;
    write_u32(&mut w, VERSION)?;
    write_u32(&mut w, ckpt.config_toml.len() as u32)?;
    w.write_all(ckpt.config_toml.as_bytes())?;
    w.write_all(&ckpt.step.to_le_bytes())?;
    write_u32(&mut w, ckpt.epochs_done)?;

    write_u32(&mut w, ckpt.params.len() as u32)?;
    for (name, t) in &ckpt.params {
        write_u32(&mut w, name.len() as u32)?;
        w.write_all(name.as_bytes())?;
        let sh = t.shape();
        for d in [sh.batch, sh.channels, sh.height, sh.width] {
            write_u32(&mut w, d as u32)?;
        }
        write_f64s(&mut w, t.data())?;
    }
    match &ckpt.opt {
        None => w.write_all(&[0u8])?,
        Some(opt) => {
            if opt.m.len() != ckpt.params.len() || opt.v.len() != ckpt.params.len() {
                return Err(Error::Checkpoint("optimizer state misaligned with params".into()));
            }
            w.write_all(&[1u8])?;
            for ((m, v), (_, t)) in opt.m.iter().zip(&opt.v).zip(&ckpt.params) {
                if m.len() != t.numel() || v.len() != t.numel() {
                    return Err(Error::Checkpoint("optimizer moment size mismatch".into()));
                }
                write_f64s(&mut w, m)?;
                write_f64s(&mut w, v)?;
            }
        }
    }

    let digest = w.hasher.clone().finalize();
    w.inner.write_all(&digest)?;
    w.inner.flush()?;
    Ok(())
}

struct HashingReader<R: Read> {
    inner: R,
    hasher: Sha256,
}

impl<R: Read> HashingReader<R> {
    fn read_exact_hashed(&mut self, buf: &mut [u8]) -> Result<()> {
        self.inner
            .read_exact(buf)
            .map_err(|e| Error::Checkpoint(format!("truncated checkpoint: {e}")))?;
        self.hasher.update(&buf[..]);
        Ok(())
    }

    fn read_u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.read_exact_hashed(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    fn read_u64(&mut self) -> Result<u64> {
        let mut b = [0u8; 8];
        self.read_exact_hashed(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }

    fn read_f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let mut bytes = vec![0u8; n * 8];
        self.read_exact_hashed(&mut bytes)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect())
    }

    fn read_string(&mut self) -> Result<String> {
        let len = self.read_u32()? as usize;
        let mut bytes = vec![0u8; len];
        self.read_exact_hashed(&mut bytes)?;
        String::from_utf8(bytes).map_err(|_| Error::Checkpoint("non-UTF-8 string".into()))
    }
}

pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let file = std::fs::File::open(path.as_ref())?;
    let mut r = HashingReader { inner: BufReader::new(file), hasher: Sha256::new() };

    let mut magic = [0u8; 4];
    r.read_exact_hashed(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = r.read_u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let config_toml = r.read_string()?;
    let step = r.read_u64()?;
    let epochs_done = r.read_u32()?;

    let count = r.read_u32()? as usize;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let name = r.read_string()?;
        let dims: Vec<usize> = (0..4).map(|_| r.read_u32().map(|v| v as usize)).collect::<Result<_>>()?;
        let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
        let data = r.read_f64s(shape.numel())?;
        params.push((name, Tensor::from_vec(shape, data)?.with_grad()));
    }
    let mut flag = [0u8; 1];
    r.read_exact_hashed(&mut flag)?;
    let opt = if flag[0] == 1 {
        let mut m = Vec::with_capacity(count);
        let mut v = Vec::with_capacity(count);
        for (_, t) in &params {
            m.push(r.read_f64s(t.numel())?);
            v.push(r.read_f64s(t.numel())?);
        }
        Some(OptState { m, v })
    } else {
        None
    };

    let expected = r.hasher.clone().finalize();
    let mut stored = [0u8; 32];
    r.inner
        .read_exact(&mut stored)
        .map_err(|e| Error::Checkpoint(format!("missing checksum: {e}")))?;
    if stored != expected[..] {
        return Err(Error::Checkpoint("checksum mismatch, file corrupt".into()));
    }

    Ok(Checkpoint { config_toml, step, epochs_done, params, opt })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::net::{Model, NetConfig};

    fn tiny_config() -> NetConfig {
        NetConfig {
            blocks: vec![1, 1, 1, 1],
            stem_width: 4,
            stage_widths: vec![4, 6, 8, 10],
            ..Default::default()
        }
    }

    #[test]
    fn roundtrip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.acdn");
        let model = Model::build(&tiny_config(), 5).unwrap();
        let opt = OptState {
            m: model.params().iter().map(|(_, t)| vec![0.25; t.numel()]).collect(),
            v: model.params().iter().map(|(_, t)| vec![0.5; t.numel()]).collect(),
        };
        let cfg = RunConfig::default().to_toml();
        let ckpt = Checkpoint::from_model(&cfg, &model, 42, 3, Some(opt));
        save(&path, &ckpt).unwrap();

        let back = load(&path).unwrap();
        assert_eq!(back.config_toml, cfg);
        assert_eq!(back.step, 42);
        assert_eq!(back.epochs_done, 3);
        assert_eq!(back.params.len(), ckpt.params.len());
        for ((na, ta), (nb, tb)) in back.params.iter().zip(&ckpt.params) {
            assert_eq!(na, nb);
            assert_eq!(ta.shape(), tb.shape());
            assert_eq!(ta.data(), tb.data());
        }
        let opt = back.opt.unwrap();
        assert!(opt.m.iter().flatten().all(|&x| x == 0.25));
        assert!(opt.v.iter().flatten().all(|&x| x == 0.5));
    }

    #[test]
    fn apply_restores_model() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.acdn");
        let model = Model::build(&tiny_config(), 6).unwrap();
        let ckpt = Checkpoint::from_model("", &model, 0, 0, None);
        save(&path, &ckpt).unwrap();

        let mut other = Model::build(&tiny_config(), 7).unwrap();
        load(&path).unwrap().apply_to(&mut other).unwrap();
        for ((_, a), (_, b)) in other.params().iter().zip(model.params().iter()) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn corruption_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.acdn");
        let model = Model::build(&tiny_config(), 8).unwrap();
        save(&path, &Checkpoint::from_model("cfg", &model, 1, 1, None)).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xff;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load(&path), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn saved_bytes_are_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.acdn");
        let b = dir.path().join("b.acdn");
        let model = Model::build(&tiny_config(), 9).unwrap();
        let ckpt = Checkpoint::from_model("cfg", &model, 10, 2, None);
        save(&a, &ckpt).unwrap();
        save(&b, &ckpt).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn mismatched_model_rejected() {
        let model = Model::build(&tiny_config(), 10).unwrap();
        let ckpt = Checkpoint::from_model("", &model, 0, 0, None);
        let mut other = Model::build(
            &NetConfig { stem_width: 6, ..tiny_config() },
            10,
        )
        .unwrap();
        assert!(ckpt.apply_to(&mut other).is_err());
    }
}
