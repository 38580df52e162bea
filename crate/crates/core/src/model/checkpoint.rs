//! Checkpoint file: `u64` LE header length, JSON header, then every
//! parameter as a little-endian `f32` in layout order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ClassifierModel, ModelConfig};
use crate::error::{PulseError, Result};
use crate::scalar::Scalar;

const FORMAT: &str = "pulse-checkpoint";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset within the data section.
    pub offset: usize,
    pub n_bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub version: u32,
    pub dtype: String,
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
}

pub fn to_bytes<T: Scalar>(model: &ClassifierModel<T>) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        format: FORMAT.into(),
        version: VERSION,
        dtype: "f32le".into(),
        config: model.config().clone(),
        tensors: model
            .layout()
            .iter()
            .map(|s| TensorEntry {
                name: s.name.clone(),
                shape: s.shape.clone(),
                offset: s.offset * 4,
                n_bytes: s.len() * 4,
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(8 + json.len() + model.n_params() * 4);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for p in model.params() {
        out.extend_from_slice(&p.to_f32_lossy().to_le_bytes());
    }
    Ok(out)
}

pub fn from_bytes<T: Scalar>(bytes: &[u8]) -> Result<ClassifierModel<T>> {
    let bad = |m: &str| PulseError::Data(format!("checkpoint: {m}"));
    if bytes.len() < 8 {
        return Err(bad("truncated header"));
    }
    let hlen = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(8..8 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(body)?;
    if header.format != FORMAT || header.version != VERSION || header.dtype != "f32le" {
        return Err(bad("unsupported format"));
    }
    let data = &bytes[8 + hlen..];
    if !data.len().is_multiple_of(4) {
        return Err(bad("data section is not a whole number of f32"));
    }
    let params: Vec<T> = data
        .chunks_exact(4)
        .map(|c| T::of(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
        .collect();
    let model = ClassifierModel::from_params(header.config, params)?;
    for (entry, spec) in header.tensors.iter().zip(model.layout()) {
        if entry.name != spec.name || entry.shape != spec.shape || entry.offset != spec.offset * 4 {
            return Err(bad(&format!("tensor {} does not match config layout", entry.name)));
        }
    }
    if header.tensors.len() != model.layout().len() {
        return Err(bad("tensor manifest length mismatch"));
    }
    Ok(model)
}

pub fn save<T: Scalar>(model: &ClassifierModel<T>, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(model)?).map_err(|e| PulseError::io(path, e))
}

pub fn load<T: Scalar>(path: &Path) -> Result<ClassifierModel<T>> {
    let bytes = fs::read(path).map_err(|e| PulseError::io(path, e))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Model, ModelConfig};
    use crate::tokenizer::TokenSequence;

    #[test]
    fn save_load_forward_is_bit_stable() {
        let m = Model::new(ModelConfig {
            max_len: 8,
            hidden: 16,
            ffn: 32,
            ..ModelConfig::tiny(10)
        })
        .unwrap();
        let bytes = to_bytes(&m).unwrap();
        let back: Model = from_bytes(&bytes).unwrap();
        assert_eq!(back.params(), m.params());
        assert_eq!(to_bytes(&back).unwrap(), bytes);
        let s = TokenSequence {
            ids: vec![2, 5, 6, 3, 0, 0, 0, 0],
            attention_mask: vec![1, 1, 1, 1, 0, 0, 0, 0],
            n_real: 4,
        };
        let a = m.forward(std::slice::from_ref(&s)).unwrap()[0];
        let b = back.forward(&[s]).unwrap()[0];
        assert_eq!(a.logits[0].to_bits(), b.logits[0].to_bits());
        assert_eq!(a.logits[1].to_bits(), b.logits[1].to_bits());
    }

    #[test]
    fn header_lists_tensor_offsets() {
        let m = Model::new(ModelConfig::tiny(10)).unwrap();
        let bytes = to_bytes(&m).unwrap();
        let hlen = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let h: CheckpointHeader = serde_json::from_slice(&bytes[8..8 + hlen]).unwrap();
        assert_eq!(h.tensors[0].name, "embed.token");
        assert_eq!(h.tensors[1].offset, 10 * 64 * 4);
        assert_eq!(bytes.len(), 8 + hlen + m.n_params() * 4);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let m = Model::new(ModelConfig::tiny(10)).unwrap();
        let bytes = to_bytes(&m).unwrap();
        assert!(from_bytes::<f32>(&bytes[..bytes.len() - 4]).is_err());
        assert!(from_bytes::<f32>(&bytes[..4]).is_err());
    }
}
