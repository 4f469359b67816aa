//! Joint segmentation, classification, and caller identification of marmoset
//! vocalizations from dual-channel recordings.
//!
//! The pipeline maps paired spectral windows through a two-stream model (a
//! Vision-Transformer backbone or a CNN baseline) onto 17 target classes —
//! 8 call kinds × 2 callers plus noise — then reconstructs per-animal call
//! segment files from streaming window predictions and scores them with
//! count-based accuracy/precision/recall/F metrics.
//!
//! | Module | Purpose |
//! |--------|---------|
//! | [`taxonomy`] | Label universe, annotation/prediction segment files |
//! | [`dsp`] | WAV ingestion, STFT spectral segments, augmentation |
//! | [`nncore`] | Tensor autodiff engine and the Adam optimizer |
//! | [`models`] | ViT / CNN backbones, two-stream head, checkpoints |
//! | [`train`] | Dataset assembly and the training loop |
//! | [`infer`] | Streaming long-recording prediction |
//! | [`evalkit`] | Noise filling, 50 ms discretization, metrics |
//! | [`synth`] | Synthetic dual-channel corpora for tests and demos |

pub mod dsp;
pub mod evalkit;
pub mod infer;
pub mod models;
pub mod nncore;
pub mod synth;
pub mod taxonomy;
pub mod train;
