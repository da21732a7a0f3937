//! Checkpoint serialization: model configuration, parameters, batch-norm
//! buffers, and (optionally) optimizer state in one JSON file.
//!
//! JSON numbers are printed with shortest-round-trip formatting, so every
//! finite `f64` survives a save/load cycle bit-exactly.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::{Model, ModelConfig, Tensor};
use crate::nn::AdamState;
use crate::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub model: ModelConfig,
    /// Epoch this snapshot was taken at (1-based; 0 = untrained).
    pub epoch: usize,
    pub best_val_loss: Option<f64>,
    pub params: BTreeMap<String, Tensor>,
    pub buffers: BTreeMap<String, Tensor>,
    pub optimizer: Option<AdamState>,
}

impl Checkpoint {
    /// Snapshots the model's current parameters and buffers.
    pub fn capture(
        model: &mut Model,
        epoch: usize,
        best_val_loss: Option<f64>,
        optimizer: Option<AdamState>,
    ) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            model: model.config().clone(),
            epoch,
            best_val_loss,
            params: model.export_params(),
            buffers: model.export_buffers(),
            optimizer,
        }
    }

    /// Builds a fresh model from the stored configuration and loads the
    /// stored tensors into it.
    pub fn restore(&self) -> Result<Model> {
        // The initializer RNG is irrelevant: every parameter is overwritten.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = Model::new(&self.model, &mut rng)?;
        self.restore_into(&mut model)?;
        Ok(model)
    }

    /// Loads the stored tensors into an existing, identically-shaped model.
    pub fn restore_into(&self, model: &mut Model) -> Result<()> {
        model.import_params(&self.params)?;
        model.import_buffers(&self.buffers)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json =
            serde_json::to_string(self).map_err(|e| Error::Data(format!("checkpoint: {e}")))?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let json = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint =
            serde_json::from_str(&json).map_err(|e| Error::Data(format!("checkpoint: {e}")))?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Data(format!(
                "checkpoint version {} unsupported (expected {CHECKPOINT_VERSION})",
                ckpt.version
            )));
        }
        Ok(ckpt)
    }
}
