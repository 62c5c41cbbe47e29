//! Checkpoint file: versioned header (architecture, head size, normalization)
//! followed by the raw f64 little-endian parameter vector.

use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

use crate::datamodel::NormalizationStats;
use crate::error::{Error, Result};
use crate::modelharness::{build_model, ClassifierModel};

const MAGIC: &[u8; 4] = b"PLCK";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    architecture_id: String,
    num_classes: usize,
    normalization: NormalizationStats,
    param_count: usize,
}

pub fn save_checkpoint(model: &ClassifierModel, path: &Path) -> Result<()> {
    let header = Header {
        architecture_id: model.architecture_id().to_string(),
        num_classes: model.num_classes(),
        normalization: model.normalization.clone(),
        param_count: model.param_count(),
    };
    let header_json = serde_json::to_vec(&header).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path.to_path_buf(), e))?;
    let io = |e| Error::io(path.to_path_buf(), e);
    f.write_all(MAGIC).map_err(io)?;
    f.write_all(&VERSION.to_le_bytes())
        .map_err(|e| Error::io(path.to_path_buf(), e))?;
    f.write_all(&(header_json.len() as u32).to_le_bytes())
        .map_err(|e| Error::io(path.to_path_buf(), e))?;
    f.write_all(&header_json)
        .map_err(|e| Error::io(path.to_path_buf(), e))?;
    let params = model.params_flat();
    let mut bytes = Vec::with_capacity(params.len() * 8);
    for p in &params {
        bytes.extend_from_slice(&p.to_le_bytes());
    }
    f.write_all(&bytes)
        .map_err(|e| Error::io(path.to_path_buf(), e))
}

pub fn load_checkpoint(path: &Path) -> Result<ClassifierModel> {
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path.to_path_buf(), e))?;
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic)
        .map_err(|e| Error::io(path.to_path_buf(), e))?;
    if &magic != MAGIC {
        return Err(Error::precondition(format!(
            "{} is not a checkpoint file",
            path.display()
        )));
    }
    let mut word = [0u8; 4];
    f.read_exact(&mut word)
        .map_err(|e| Error::io(path.to_path_buf(), e))?;
    let version = u32::from_le_bytes(word);
    if version != VERSION {
        return Err(Error::precondition(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    f.read_exact(&mut word)
        .map_err(|e| Error::io(path.to_path_buf(), e))?;
    let header_len = u32::from_le_bytes(word) as usize;
    let mut header_bytes = vec![0u8; header_len];
    f.read_exact(&mut header_bytes)
        .map_err(|e| Error::io(path.to_path_buf(), e))?;
    let header: Header = serde_json::from_slice(&header_bytes).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;

    let mut model = build_model(
        &header.architecture_id,
        header.num_classes,
        header.normalization,
        0,
        None,
    )?;
    if model.param_count() != header.param_count {
        return Err(Error::precondition(format!(
            "checkpoint param_count {} does not match architecture {}",
            header.param_count,
            header.architecture_id
        )));
    }
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes)
        .map_err(|e| Error::io(path.to_path_buf(), e))?;
    if bytes.len() != header.param_count * 8 {
        return Err(Error::precondition(format!(
            "checkpoint payload is {} bytes, expected {}",
            bytes.len(),
            header.param_count * 8
        )));
    }
    let mut params = Vec::with_capacity(header.param_count);
    for chunk in bytes.chunks_exact(8) {
        params.push(f64::from_le_bytes(chunk.try_into().expect("8-byte chunk")));
    }
    model.set_params_flat(&params)?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::NormalizationStats;

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ck");
        let norm = NormalizationStats {
            mean: vec![0.3, 0.4, 0.5],
            std: vec![0.1, 0.2, 0.3],
        };
        let model = build_model("tiny_cnn", 4, norm, 77, None).unwrap();
        save_checkpoint(&model, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.architecture_id(), "tiny_cnn");
        assert_eq!(loaded.num_classes(), 4);
        assert_eq!(loaded.params_flat(), model.params_flat());
        assert_eq!(loaded.normalization, model.normalization);
    }

    #[test]
    fn pretrained_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ck");
        let model = build_model("tiny_cnn", 4, NormalizationStats::identity(3), 1, None).unwrap();
        save_checkpoint(&model, &path).unwrap();
        // head size mismatch
        assert!(build_model("tiny_cnn", 5, NormalizationStats::identity(3), 1, Some(&path)).is_err());
        // architecture mismatch
        assert!(build_model("small_cnn", 4, NormalizationStats::identity(3), 1, Some(&path)).is_err());
        // matching load succeeds and copies parameters
        let ok = build_model("tiny_cnn", 4, NormalizationStats::identity(3), 9, Some(&path)).unwrap();
        assert_eq!(ok.params_flat(), model.params_flat());
    }

    #[test]
    fn garbage_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk");
        std::fs::write(&path, b"not a checkpoint").unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
