//! Checkpoints: a JSON header plus one little-endian f64 blob holding every
//! parameter in layer order.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conv::Conv1d;
use crate::error::{NnError, Result};
use crate::model::{ArchSpec, EncoderDecoder};
use crate::tensor::Tensor3;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub channels: usize,
    pub arch: ArchSpec,
    pub config_hash: String,
    pub param_shapes: Vec<[usize; 3]>,
    pub has_calibration: bool,
    pub blob: String,
}

pub fn save_checkpoint(
    dir: &Path,
    name: &str,
    backbone: &EncoderDecoder,
    calibration: Option<&Conv1d>,
    config_hash: &str,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| NnError::io(dir, e))?;
    let mut tensors: Vec<&Tensor3> = backbone.params();
    if let Some(c) = calibration {
        tensors.extend(c.params());
    }
    let header = CheckpointHeader {
        format_version: CHECKPOINT_VERSION,
        channels: backbone.channels,
        arch: backbone.arch.clone(),
        config_hash: config_hash.to_string(),
        param_shapes: tensors.iter().map(|t| t.shape()).collect(),
        has_calibration: calibration.is_some(),
        blob: format!("{name}.f64"),
    };
    let bytes: Vec<u8> = tensors.iter().flat_map(|t| t.data.iter().flat_map(|v| v.to_le_bytes())).collect();
    let blob = dir.join(&header.blob);
    fs::write(&blob, bytes).map_err(|e| NnError::io(&blob, e))?;
    let path = dir.join(format!("{name}.json"));
    let mut text = serde_json::to_string_pretty(&header).expect("header serializes");
    text.push('\n');
    fs::write(&path, text).map_err(|e| NnError::io(&path, e))
}

pub fn load_checkpoint(dir: &Path, name: &str) -> Result<(EncoderDecoder, Option<Conv1d>, CheckpointHeader)> {
    let path = dir.join(format!("{name}.json"));
    let text = fs::read_to_string(&path).map_err(|e| NnError::io(&path, e))?;
    let header: CheckpointHeader = serde_json::from_str(&text).map_err(|source| NnError::Checkpoint { path, source })?;
    if header.format_version != CHECKPOINT_VERSION {
        return Err(NnError::Invalid(format!("unsupported checkpoint version {}", header.format_version)));
    }
    let blob = dir.join(&header.blob);
    let bytes = fs::read(&blob).map_err(|e| NnError::io(&blob, e))?;
    let total: usize = header.param_shapes.iter().map(|s| s.iter().product::<usize>()).sum();
    if bytes.len() != total * 8 {
        return Err(NnError::Shape(format!("{}: {} bytes for {total} parameters", blob.display(), bytes.len())));
    }
    let mut values = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let mut tensors: Vec<Vec<f64>> = header
        .param_shapes
        .iter()
        .map(|s| values.by_ref().take(s.iter().product()).collect())
        .collect();

    // parameters are overwritten, so the init seed is irrelevant
    let mut model = EncoderDecoder::new(header.channels, &header.arch, &mut ChaCha8Rng::seed_from_u64(0))?;
    let n_backbone = model.params().len();
    let expected = n_backbone + if header.has_calibration { 2 } else { 0 };
    if tensors.len() != expected {
        return Err(NnError::Shape(format!("checkpoint holds {} tensors, expected {expected}", tensors.len())));
    }
    let calibration = if header.has_calibration {
        let b = tensors.pop().expect("bias");
        let w = tensors.pop().expect("weight");
        let shapes = &header.param_shapes[n_backbone..];
        Some(Conv1d::from_parts(Tensor3::from_vec(shapes[0], w)?, Tensor3::from_vec(shapes[1], b)?)?)
    } else {
        None
    };
    if model.params().iter().zip(&header.param_shapes).any(|(p, s)| p.shape() != *s) {
        return Err(NnError::Shape("checkpoint shapes do not match its architecture".into()));
    }
    model.restore(&tensors)?;
    Ok((model, calibration, header))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let arch = ArchSpec {
            widths: vec![4, 2],
            ..ArchSpec::default()
        };
        let model = EncoderDecoder::new(3, &arch, &mut rng).unwrap();
        let mut cal = Conv1d::identity(3);
        cal.weight.data[1] = 0.25;
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), "fold01", &model, Some(&cal), "abc").unwrap();
        let (m2, c2, h) = load_checkpoint(dir.path(), "fold01").unwrap();
        assert_eq!(m2.snapshot(), model.snapshot());
        assert_eq!(c2.unwrap().weight.data, cal.weight.data);
        assert_eq!(h.config_hash, "abc");

        save_checkpoint(dir.path(), "bare", &model, None, "").unwrap();
        assert!(load_checkpoint(dir.path(), "bare").unwrap().1.is_none());
        fs::write(dir.path().join("bare.f64"), [0u8; 16]).unwrap();
        assert!(load_checkpoint(dir.path(), "bare").is_err());
    }
}
