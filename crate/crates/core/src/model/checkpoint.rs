use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Adam, NamedTensor, ParamStore};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to resume training or to sample: the echoed run
/// configuration, named parameters, optimizer moments and the iteration counter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: serde_json::Value,
    pub iteration: u64,
    pub params: Vec<NamedTensor>,
    pub optimizer: Adam,
}

impl Checkpoint {
    pub fn new(config: serde_json::Value, iteration: u64, ps: &ParamStore, optimizer: &Adam) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            config,
            iteration,
            params: ps.to_named(),
            optimizer: optimizer.clone(),
        }
    }

    /// Writes to a sibling temporary file first, then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        let bytes = serde_json::to_vec(self)?;
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        let value: serde_json::Value = serde_json::from_slice(&bytes)?;
        match value.get("version").and_then(|v| v.as_u64()) {
            Some(v) if v == CHECKPOINT_VERSION as u64 => {}
            Some(v) => {
                return Err(Error::Checkpoint(format!(
                    "unsupported checkpoint version {v} (expected {CHECKPOINT_VERSION})"
                )))
            }
            None => return Err(Error::Checkpoint("missing version field".into())),
        }
        Ok(serde_json::from_value(value)?)
    }

    /// Copies parameters and optimizer state into a freshly built model.
    pub fn restore(&self, ps: &mut ParamStore) -> Result<Adam> {
        ps.load_named(&self.params)?;
        self.optimizer.check_matches(ps)?;
        Ok(self.optimizer.clone())
    }
}
