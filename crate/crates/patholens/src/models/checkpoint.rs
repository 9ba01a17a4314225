//! Single-archive checkpoint format: JSON header (backbone, class order,
//! input size, tensor manifest) + raw little-endian f64 weights + SHA-256
//! digest trailer. The digest doubles as the model's identity.

use super::{build_model, BackboneId, BuildOptions, TrainedModel};
use crate::dataset::ClassLabel;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

const MAGIC: &[u8; 4] = b"PLCK";
const SCHEMA_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    schema_version: u32,
    backbone: String,
    num_classes: usize,
    input_size: (usize, usize),
    target_layer: String,
    class_order: Vec<ClassLabel>,
    params: Vec<(String, Vec<usize>)>,
    buffers: Vec<(String, Vec<usize>)>,
}

/// Serialized checkpoint including the digest trailer.
pub(crate) fn checkpoint_bytes(model: &TrainedModel) -> Vec<u8> {
    let header = Header {
        schema_version: SCHEMA_VERSION,
        backbone: model.backbone.name().to_string(),
        num_classes: model.num_classes(),
        input_size: model.input_size,
        target_layer: model.target_layer.clone(),
        class_order: model.class_order.clone(),
        params: model.graph.param_specs(),
        buffers: model.graph.buffer_specs(),
    };
    let header_json = serde_json::to_vec(&header).expect("header serializes");

    let mut bytes = Vec::new();
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&SCHEMA_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header_json);
    model.graph.for_each_param(&mut |_, values| {
        for v in values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    });
    model.graph.for_each_buffer(&mut |_, values| {
        for v in values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    });
    let digest = Sha256::digest(&bytes);
    bytes.extend_from_slice(&digest);
    bytes
}

pub(crate) fn digest_hex(model: &TrainedModel) -> String {
    let bytes = checkpoint_bytes(model);
    let digest = &bytes[bytes.len() - 32..];
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

impl TrainedModel {
    /// Content hash of the checkpoint this model would serialize to.
    pub fn checkpoint_digest(&self) -> String {
        digest_hex(self)
    }
}

pub fn save_checkpoint(model: &TrainedModel, path: &Path) -> Result<String> {
    let bytes = checkpoint_bytes(model);
    let digest = bytes[bytes.len() - 32..].iter().map(|b| format!("{b:02x}")).collect();
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(digest)
}

/// Load and verify a checkpoint. With `expected` set, a backbone mismatch
/// between file and configuration is an error.
pub fn load_checkpoint(path: &Path, expected: Option<BackboneId>) -> Result<TrainedModel> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let corrupt = |msg: &str| Error::Checkpoint { path: path.to_path_buf(), msg: msg.to_string() };

    if bytes.len() < 4 + 4 + 8 + 32 || &bytes[..4] != MAGIC {
        return Err(corrupt("not a patholens checkpoint (bad magic or truncated)"));
    }
    let body = &bytes[..bytes.len() - 32];
    let stored_digest = &bytes[bytes.len() - 32..];
    let digest = Sha256::digest(body);
    if digest.as_slice() != stored_digest {
        return Err(corrupt("digest mismatch: file is corrupt or truncated"));
    }

    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != SCHEMA_VERSION {
        return Err(corrupt(&format!(
            "schema version mismatch: file is v{version}, this build reads v{SCHEMA_VERSION}"
        )));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if 16 + header_len > body.len() {
        return Err(corrupt("header length exceeds file size"));
    }
    let header: Header = serde_json::from_slice(&bytes[16..16 + header_len])
        .map_err(|e| corrupt(&format!("bad header: {e}")))?;

    let backbone: BackboneId = header.backbone.parse()?;
    if let Some(expected) = expected {
        if backbone != expected {
            return Err(corrupt(&format!(
                "backbone mismatch: checkpoint holds {backbone}, configuration expects {expected}"
            )));
        }
    }

    let mut model = build_model(
        backbone,
        header.num_classes,
        &BuildOptions { input_size: Some(header.input_size), ..Default::default() },
    )?;
    if model.graph.param_specs() != header.params || model.graph.buffer_specs() != header.buffers {
        return Err(corrupt("tensor manifest does not match this build's architecture"));
    }

    let data = &body[16 + header_len..];
    let expected_values: usize = header
        .params
        .iter()
        .chain(&header.buffers)
        .map(|(_, shape)| shape.iter().product::<usize>())
        .sum();
    if data.len() != expected_values * 8 {
        return Err(corrupt(&format!(
            "weight payload holds {} bytes, manifest needs {}",
            data.len(),
            expected_values * 8
        )));
    }

    let mut cursor = 0usize;
    let mut take = |values: &mut [f64]| {
        for v in values.iter_mut() {
            *v = f64::from_le_bytes(data[cursor..cursor + 8].try_into().unwrap());
            cursor += 8;
        }
    };
    model.graph.for_each_param_mut(&mut |_, values| take(values));
    model.graph.for_each_buffer_mut(&mut |_, values| take(values));

    model.target_layer = header.target_layer;
    model.class_order = header.class_order;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture_model() -> TrainedModel {
        build_model(BackboneId::TinyTestNet, 5, &BuildOptions { seed: 11, ..Default::default() })
            .unwrap()
    }

    #[test]
    fn round_trip_preserves_probe_logits_exactly() {
        let model = fixture_model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let digest = save_checkpoint(&model, &path).unwrap();
        assert_eq!(digest, model.checkpoint_digest());

        let loaded = load_checkpoint(&path, Some(BackboneId::TinyTestNet)).unwrap();
        let probe: Vec<_> =
            (0..4).map(|s| super::super::tests::random_input_image(model.input_size, s)).collect();
        let refs: Vec<_> = probe.iter().collect();
        let before = model.predict_proba(&refs).unwrap();
        let after = loaded.predict_proba(&refs).unwrap();
        let max_delta = before
            .iter()
            .zip(after.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert_eq!(max_delta, 0.0);
        assert_eq!(loaded.checkpoint_digest(), digest);
    }

    #[test]
    fn truncated_file_is_a_corruption_error() {
        let model = fixture_model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&model, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 100]).unwrap();
        let err = load_checkpoint(&path, None).unwrap_err().to_string();
        assert!(err.contains("corrupt") || err.contains("truncated"), "{err}");
    }

    #[test]
    fn flipped_bit_is_a_corruption_error() {
        let model = fixture_model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&model, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        std::fs::write(&path, &bytes).unwrap();
        assert!(load_checkpoint(&path, None).is_err());
    }

    #[test]
    fn backbone_mismatch_is_rejected() {
        let model = fixture_model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&model, &path).unwrap();
        let err = load_checkpoint(&path, Some(BackboneId::Xception)).unwrap_err().to_string();
        assert!(err.contains("TinyTestNet") && err.contains("Xception"), "{err}");
    }
}
