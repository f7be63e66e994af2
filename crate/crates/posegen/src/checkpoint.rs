//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic  "PGCK"            4 bytes
//! version u32              currently 1
//! config  len-prefixed     TOML snapshot of the producing RunConfig
//! config_hash  len-prefixed hex sha-256 of the snapshot
//! geometry_hash len-prefixed
//! stage   len-prefixed     "stage1" | "stage2" | "one-stage"
//! iteration u64
//! seed      u64
//! section count u32, then per section:
//!   name len-prefixed      "g1" | "g2" | "d"
//!   has_optimizer u8       1 when Adam moments follow
//!   adam_steps u64
//!   tensor-map params      (count u32, then name, ndim u32, dims u64...,
//!                           f64 data)
//!   tensor-map m, v        only when has_optimizer
//! ```
//!
//! Tensors serialize their exact f64 bits, so save/load round-trips are
//! bit-identical.

use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::nets::ParamStore;
use crate::optim::Adam;

const MAGIC: &[u8; 4] = b"PGCK";
const VERSION: u32 = 1;

/// One network's persisted state: parameters plus optional Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct NetSection {
    pub params: ParamStore,
    pub adam: Option<AdamState>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: ParamStore,
    pub v: ParamStore,
    pub steps: u64,
}

impl AdamState {
    pub fn from_adam(a: &Adam) -> Self {
        Self { m: a.m.clone(), v: a.v.clone(), steps: a.steps }
    }

    pub fn into_adam(self, learning_rate: f64, beta1: f64, beta2: f64) -> Adam {
        Adam { learning_rate, beta1, beta2, m: self.m, v: self.v, steps: self.steps }
    }
}

/// A complete checkpoint: config snapshot, counters, and named sections.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub stage: String,
    pub iteration: u64,
    pub seed: u64,
    pub sections: BTreeMap<String, NetSection>,
}

impl Checkpoint {
    pub fn new(config: &RunConfig, stage: &str, iteration: u64, seed: u64) -> Self {
        Self {
            config: config.clone(),
            stage: stage.to_string(),
            iteration,
            seed,
            sections: BTreeMap::new(),
        }
    }

    pub fn section(&self, name: &str) -> Result<&NetSection> {
        self.sections
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("checkpoint has no `{name}` section")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let tmp = path.with_extension("tmp");
        {
            let mut w = BufWriter::new(std::fs::File::create(&tmp)?);
            w.write_all(MAGIC)?;
            w.write_all(&VERSION.to_le_bytes())?;
            let toml = self
                .config
                .to_toml_string()
                .map_err(|e| Error::Checkpoint(format!("config serialize: {e}")))?;
            write_str(&mut w, &toml)?;
            write_str(&mut w, &self.config.config_hash())?;
            write_str(&mut w, &self.config.geometry_hash())?;
            write_str(&mut w, &self.stage)?;
            w.write_all(&self.iteration.to_le_bytes())?;
            w.write_all(&self.seed.to_le_bytes())?;
            w.write_all(&(self.sections.len() as u32).to_le_bytes())?;
            for (name, sec) in &self.sections {
                write_str(&mut w, name)?;
                w.write_all(&[u8::from(sec.adam.is_some())])?;
                let steps = sec.adam.as_ref().map_or(0, |a| a.steps);
                w.write_all(&steps.to_le_bytes())?;
                write_store(&mut w, &sec.params)?;
                if let Some(adam) = &sec.adam {
                    write_store(&mut w, &adam.m)?;
                    write_store(&mut w, &adam.v)?;
                }
            }
            w.flush()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(std::fs::File::open(path).map_err(|e| Error::DataFile {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint(format!("{}: not a checkpoint file", path.display())));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version} (supported: {VERSION})"
            )));
        }
        let toml = read_str(&mut r)?;
        let config = RunConfig::from_toml_str(&toml)
            .map_err(|e| Error::Checkpoint(format!("embedded config: {e}")))?;
        let stored_hash = read_str(&mut r)?;
        if stored_hash != config.config_hash() {
            return Err(Error::Checkpoint(
                "embedded config hash does not match the embedded config".into(),
            ));
        }
        let _geometry = read_str(&mut r)?;
        let stage = read_str(&mut r)?;
        let iteration = read_u64(&mut r)?;
        let seed = read_u64(&mut r)?;
        let nsections = read_u32(&mut r)? as usize;
        let mut sections = BTreeMap::new();
        for _ in 0..nsections {
            let name = read_str(&mut r)?;
            let mut flag = [0u8; 1];
            r.read_exact(&mut flag)?;
            let steps = read_u64(&mut r)?;
            let params = read_store(&mut r)?;
            let adam = if flag[0] == 1 {
                let m = read_store(&mut r)?;
                let v = read_store(&mut r)?;
                Some(AdamState { m, v, steps })
            } else {
                None
            };
            sections.insert(name, NetSection { params, adam });
        }
        Ok(Self { config, stage, iteration, seed, sections })
    }

    /// Error unless the checkpoint was produced under exactly this config.
    pub fn check_resume_compatible(&self, cfg: &RunConfig) -> Result<()> {
        if self.config.config_hash() != cfg.config_hash() {
            return Err(Error::Incompatible(format!(
                "config hash mismatch: checkpoint {} vs requested {}",
                &self.config.config_hash()[..12],
                &cfg.config_hash()[..12]
            )));
        }
        Ok(())
    }

    /// Error unless the checkpoint shares the geometry of this config
    /// (network layouts + image size); schedules and lambda may differ.
    pub fn check_geometry_compatible(&self, cfg: &RunConfig) -> Result<()> {
        if self.config.geometry_hash() != cfg.geometry_hash() {
            return Err(Error::Incompatible(format!(
                "geometry hash mismatch: checkpoint {} vs requested {}",
                &self.config.geometry_hash()[..12],
                &cfg.geometry_hash()[..12]
            )));
        }
        Ok(())
    }
}

fn write_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_str<R: Read>(r: &mut R) -> Result<String> {
    let len = read_u32(r)? as usize;
    if len > 64 * 1024 * 1024 {
        return Err(Error::Checkpoint("unreasonable string length".into()));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Checkpoint(format!("bad utf-8: {e}")))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn write_store<W: Write>(w: &mut W, store: &ParamStore) -> Result<()> {
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for (name, tensor) in store {
        write_str(w, name)?;
        w.write_all(&(tensor.ndim() as u32).to_le_bytes())?;
        for d in tensor.shape() {
            w.write_all(&(*d as u64).to_le_bytes())?;
        }
        // standard layout guaranteed at construction
        for v in tensor.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_store<R: Read>(r: &mut R) -> Result<ParamStore> {
    let count = read_u32(r)? as usize;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name = read_str(r)?;
        let ndim = read_u32(r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u64(r)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut buf = [0u8; 8];
        for _ in 0..n {
            r.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        let tensor = ArrayD::from_shape_vec(IxDyn(&shape), data)
            .map_err(|e| Error::Checkpoint(format!("tensor {name}: {e}")))?;
        store.insert(name, tensor);
    }
    Ok(store)
}
