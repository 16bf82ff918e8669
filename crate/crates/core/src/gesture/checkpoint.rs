//! Versioned JSON checkpoints.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelParams, ModelShape, Standardizer, TensorInfo};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "ciac-gesture-transformer";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    shape: ModelShape,
    seed: u64,
    standardizer: Standardizer,
    tensors: Vec<TensorInfo>,
    values: Vec<f64>,
}

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    let file = CheckpointFile {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        shape: *params.shape(),
        seed: params.seed(),
        standardizer: params.standardizer().clone(),
        tensors: params.tensors(),
        values: params.values().to_vec(),
    };
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, &file)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let file: CheckpointFile = serde_json::from_reader(BufReader::new(File::open(path)?))?;
    if file.format != CHECKPOINT_FORMAT {
        return Err(Error::Checkpoint(format!("unknown format {:?}", file.format)));
    }
    if file.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {} (expected {CHECKPOINT_VERSION})",
            file.version
        )));
    }
    let params = ModelParams::from_parts(file.shape, file.values, file.standardizer, file.seed)
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    if params.tensors() != file.tensors {
        return Err(Error::Checkpoint("tensor layout does not match shape".into()));
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gesture::NUM_CLASSES;

    fn small() -> ModelShape {
        ModelShape {
            window_len: 6,
            features: 4,
            d_model: 8,
            heads: 2,
            ff_dim: 8,
            blocks: 1,
            dense_units: 5,
            classes: NUM_CLASSES,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let p = ModelParams::init(small(), 9).unwrap();
        save_checkpoint(&p, &path).unwrap();
        let q = load_checkpoint(&path).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn version_and_shape_are_checked() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        save_checkpoint(&ModelParams::init(small(), 9).unwrap(), &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();

        let bumped = text.replace("\"version\":1", "\"version\":99");
        std::fs::write(&path, bumped).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));

        let reshaped = text.replace("\"d_model\":8", "\"d_model\":16");
        std::fs::write(&path, reshaped).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
    }
}
