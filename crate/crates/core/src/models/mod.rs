//! Backbones, the two-stream fusion head, and checkpoint i/o.

pub mod checkpoint;
mod cnn;
pub mod gradcheck;
mod twostream;
mod vit;

use std::path::Path;

use thiserror::Error;

pub use checkpoint::{CheckpointError, RawTensor};
pub use cnn::{cnn_forward, pad_input, CnnConfig, CnnParams};
pub use twostream::{decode_meta, BackboneConfig, TwoStreamConfig, TwoStreamModel};
pub use vit::{patchify, vit_forward, ViTConfig, VitOutput, VitParams};

use crate::nncore::NnError;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    BadConfig(String),
    #[error("bad input shape: expected {expected:?}, got {got:?}")]
    BadInputShape {
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("channel order violation: got tags ({got1}, {got2}), expected (1, 2)")]
    ChannelOrder { got1: u8, got2: u8 },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// Save a model's parameters (including its architecture descriptor).
pub fn save_model<E: crate::nncore::Element>(
    model: &TwoStreamModel<E>,
    path: impl AsRef<Path>,
) -> Result<(), ModelError> {
    checkpoint::save(model.store(), path)?;
    Ok(())
}

/// Rebuild a model from a checkpoint: the `meta/arch` tensor carries the
/// architecture, then every parameter is loaded by name.
pub fn load_model(path: impl AsRef<Path>) -> Result<TwoStreamModel<f32>, ModelError> {
    let raw = checkpoint::read_raw(&path)?;
    let meta = raw
        .iter()
        .find(|t| t.name == "meta/arch")
        .ok_or_else(|| CheckpointError::MissingTensor {
            name: "meta/arch".into(),
        })?;
    let cfg = decode_meta(&meta.data)?;
    let mut model = TwoStreamModel::<f32>::new(cfg, 0)?;
    checkpoint::load_into(model.store_mut(), path)?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::SpectralSegment;
    use ndarray::Array2;

    #[test]
    fn model_checkpoint_round_trip_preserves_predictions() {
        let cfg = TwoStreamConfig {
            backbone: BackboneConfig::Vit(ViTConfig {
                input_h: 17,
                input_w: 16,
                patch: 8,
                dim: 32,
                blocks: 1,
                heads: 2,
                ffn: 64,
            }),
            stream_proj: 8,
            n_classes: crate::taxonomy::TargetLabel::COUNT,
        };
        let model = TwoStreamModel::<f32>::new(cfg, 77).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.mvtx");
        save_model(&model, &path).unwrap();
        let loaded = load_model(&path).unwrap();
        assert_eq!(loaded.config(), model.config());

        let s1 = SpectralSegment {
            values: Array2::from_shape_fn((17, 16), |(i, j)| ((i * 3 + j) % 8) as f32 / 8.0),
            origin_s: 0.0,
            channel: 1,
        };
        let s2 = SpectralSegment {
            values: Array2::from_shape_fn((17, 16), |(i, j)| ((i + 5 * j) % 6) as f32 / 6.0),
            origin_s: 0.0,
            channel: 2,
        };
        let a = model.infer_logits(&s1, &s2).unwrap();
        let b = loaded.infer_logits(&s1, &s2).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn parameter_count_matches_analytic_formula() {
        // Counting oracle for the full-size two-stream ViT: embeddings,
        // 6 blocks of attention + feedforward with layernorms, final norm,
        // per-stream projections, and the shared output layer.
        let model = TwoStreamModel::<f32>::new(TwoStreamConfig::paper_vit(), 1).unwrap();
        let d = 384usize;
        let ffn = 1536usize;
        let tokens = 256usize;
        let patch_dim = 256usize;
        let per_block = 2 * d // ln1
            + 3 * (d * d + d) // q, k, v
            + (d * d + d) // attn out
            + 2 * d // ln2
            + (d * ffn + ffn) + (ffn * d + d); // mlp
        let per_stream = (patch_dim * d + d) // patch embedding
            + d // class token
            + (tokens + 1) * d // positional table
            + 6 * per_block
            + 2 * d; // final layernorm
        let head = 2 * (d * 512 + 512) + (1024 * 17 + 17);
        let expected = 2 * per_stream + head;
        assert_eq!(model.store().trainable_scalars(), expected);
    }
}
