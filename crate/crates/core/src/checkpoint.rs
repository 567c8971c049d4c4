//! Binary checkpoint format.
//!
//! All integers are little-endian `u32`, floats little-endian `f64`:
//!
//! ```text
//! magic      8 bytes  "SDMVAECK"
//! version    u32      1
//! config_len u32      byte length of the config text
//! config     UTF-8    TOML echo of the experiment config
//! n_tensors  u32
//! per tensor:
//!   name_len u32, name (UTF-8), rows u32, cols u32, rows*cols f64 row-major
//! ```

use std::path::Path;

use ndarray::Array2;

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::model::{ModelParams, Vae, INPUT_NORM_NAMES};

pub const MAGIC: &[u8; 8] = b"SDMVAECK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_text: String,
    pub tensors: Vec<(String, Array2<f64>)>,
}

fn put_u32(buf: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("length {v} exceeds u32")))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated while reading {what}")))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    fn string(&mut self, len: usize, what: &str) -> Result<String> {
        String::from_utf8(self.take(len, what)?.to_vec())
            .map_err(|_| Error::Checkpoint(format!("{what} is not valid UTF-8")))
    }
}

impl Checkpoint {
    pub fn new(config: &ExperimentConfig, params: &ModelParams) -> Self {
        Self {
            config_text: config.to_toml(),
            tensors: params
                .named()
                .map(|(n, t)| (n.to_string(), t.data().clone()))
                .chain(params.input_norm().into_iter().flat_map(|norm| {
                    INPUT_NORM_NAMES
                        .iter()
                        .map(|n| n.to_string())
                        .zip([norm.mean.clone(), norm.inv_std.clone()])
                }))
                .collect(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        put_u32(&mut buf, VERSION as usize)?;
        put_u32(&mut buf, self.config_text.len())?;
        buf.extend_from_slice(self.config_text.as_bytes());
        put_u32(&mut buf, self.tensors.len())?;
        for (name, a) in &self.tensors {
            put_u32(&mut buf, name.len())?;
            buf.extend_from_slice(name.as_bytes());
            put_u32(&mut buf, a.nrows())?;
            put_u32(&mut buf, a.ncols())?;
            for v in a.iter() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8, "magic")? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32("version")?;
        if version != VERSION as usize {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let len = r.u32("config length")?;
        let config_text = r.string(len, "config")?;
        let n = r.u32("tensor count")?;
        let mut tensors = Vec::with_capacity(n.min(64));
        for _ in 0..n {
            let len = r.u32("tensor name length")?;
            let name = r.string(len, "tensor name")?;
            let rows = r.u32("rows")?;
            let cols = r.u32("cols")?;
            let count = rows
                .checked_mul(cols)
                .and_then(|c| c.checked_mul(8))
                .ok_or_else(|| Error::Checkpoint(format!("{name}: shape overflows")))?;
            let data = r
                .take(count, &name)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let a = Array2::from_shape_vec((rows, cols), data).expect("length matches shape");
            tensors.push((name, a));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after the last tensor",
                bytes.len() - r.pos
            )));
        }
        Ok(Self { config_text, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::file(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::file(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| Error::file(path, e))
    }

    pub fn config(&self) -> Result<ExperimentConfig> {
        ExperimentConfig::from_toml(&self.config_text)
    }

    /// Rebuilds the model described by the config echo, checking every
    /// tensor's shape against it.
    pub fn model(&self) -> Result<(ExperimentConfig, Vae)> {
        let cfg = self.config()?;
        let spec = cfg.model_spec();
        let params = ModelParams::from_named(spec.architecture(), self.tensors.clone())?;
        let vae = Vae::new(params, spec.prior()?)?;
        Ok((cfg, vae))
    }
}

pub fn save_model(path: impl AsRef<Path>, config: &ExperimentConfig, vae: &Vae) -> Result<()> {
    Checkpoint::new(config, &vae.params).save(path)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<(ExperimentConfig, Vae)> {
    let path = path.as_ref();
    Checkpoint::load(path)?.model()
}
