//! Binary checkpoint: header, config snapshot, named parameters and the
//! optimizer moments.
//!
//! Layout (little endian): magic `LNPRCKPT`, format version `u32`, seed
//! `u64`, step `u64`, config TOML as `u32` length + bytes, parameter tensor
//! list, Adam step `u64`, first-moment list, second-moment list.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use lanepred_autodiff::{read_tensor_list, write_tensor_list, Adam, ParamStore};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::model::{JalMtp, ModelConfig};
use crate::train::Trainer;

pub const MAGIC: &[u8; 8] = b"LNPRCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ExperimentConfig,
    pub step: usize,
    pub params: ParamStore,
    pub adam: Adam,
}

fn read_array<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)
        .map_err(|e| Error::Checkpoint(format!("truncated header: {e}")))?;
    Ok(b)
}

impl Checkpoint {
    pub fn from_trainer(tr: &Trainer) -> Self {
        Checkpoint {
            config: tr.cfg.clone(),
            step: tr.step,
            params: tr.params.clone(),
            adam: tr.adam.clone(),
        }
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let cfg = self.config.to_toml();
        let mut head = Vec::new();
        head.extend_from_slice(MAGIC);
        head.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        head.extend_from_slice(&self.config.seed.to_le_bytes());
        head.extend_from_slice(&(self.step as u64).to_le_bytes());
        head.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        head.extend_from_slice(cfg.as_bytes());
        w.write_all(&head)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        self.params.write_to(w)?;
        w.write_all(&self.adam.step.to_le_bytes())
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let names: Vec<&str> = self.params.iter().map(|(_, n, _)| n).collect();
        write_tensor_list(w, names.iter().copied().zip(&self.adam.m))?;
        write_tensor_list(w, names.iter().copied().zip(&self.adam.v))?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        if &read_array::<8>(r)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = u32::from_le_bytes(read_array(r)?);
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version}"
            )));
        }
        let seed = u64::from_le_bytes(read_array(r)?);
        let step = u64::from_le_bytes(read_array(r)?) as usize;
        let len = u32::from_le_bytes(read_array(r)?) as usize;
        let mut buf = vec![0u8; len];
        r.read_exact(&mut buf)
            .map_err(|e| Error::Checkpoint(format!("truncated config: {e}")))?;
        let text = String::from_utf8(buf).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let config = ExperimentConfig::from_toml(&text)?;
        if config.seed != seed {
            return Err(Error::Checkpoint(
                "header seed disagrees with config".into(),
            ));
        }
        let params = ParamStore::read_from(r)?;
        let adam_step = u64::from_le_bytes(read_array(r)?);
        let m: Vec<_> = read_tensor_list(r)?.into_iter().map(|(_, t)| t).collect();
        let v: Vec<_> = read_tensor_list(r)?.into_iter().map(|(_, t)| t).collect();
        if m.len() != params.len() || v.len() != params.len() {
            return Err(Error::Checkpoint(
                "optimizer state does not match parameters".into(),
            ));
        }
        let mut adam = Adam::new(&params, config.learning_rate);
        adam.step = adam_step;
        adam.m = m;
        adam.v = v;
        Ok(Checkpoint {
            config,
            step,
            params,
            adam,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut BufReader::new(f))
    }

    /// Rebuilds the network described by the config and fills in the stored
    /// weights.
    pub fn model(&self) -> Result<(JalMtp, ParamStore)> {
        let (m, mut ps) = JalMtp::new(ModelConfig::from(&self.config), self.config.seed);
        if ps.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                ps.len(),
                self.params.len()
            )));
        }
        ps.load_values(&self.params)?;
        Ok((m, ps))
    }

    /// Restores a trainer that continues exactly where this one stopped,
    /// apart from the batch order, which restarts its epoch.
    pub fn trainer(&self) -> Result<Trainer> {
        let mut tr = Trainer::new(self.config.clone())?;
        let (_, ps) = self.model()?;
        tr.params = ps;
        tr.adam = self.adam.clone();
        tr.step = self.step;
        Ok(tr)
    }
}
