//! Two-stream fusion: one backbone per recorder channel, per-stream linear
//! projections, concatenation, and a shared linear layer onto the 17 target
//! logits.

use ndarray::{Array2, ArrayView2, ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::cnn::{cnn_forward, pad_input, CnnConfig, CnnParams};
use super::vit::{patchify, vit_forward, ViTConfig, VitParams};
use super::ModelError;
use crate::dsp::SpectralSegment;
use crate::nncore::{kernels, Element, ParamId, ParamStore, Tape, Var};
use crate::taxonomy::TargetLabel;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackboneConfig {
    Vit(ViTConfig),
    Cnn(CnnConfig),
}

impl BackboneConfig {
    pub fn embed_dim(&self) -> usize {
        match self {
            BackboneConfig::Vit(c) => c.dim,
            BackboneConfig::Cnn(c) => c.embed_dim,
        }
    }

    pub fn input_shape(&self) -> (usize, usize) {
        match self {
            BackboneConfig::Vit(c) => (c.input_h, c.input_w),
            BackboneConfig::Cnn(c) => (c.input_h, c.input_w),
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            BackboneConfig::Vit(_) => "transformer",
            BackboneConfig::Cnn(_) => "cnn",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TwoStreamConfig {
    pub backbone: BackboneConfig,
    /// Per-stream projection width; the fused vector is twice this.
    pub stream_proj: usize,
    pub n_classes: usize,
}

impl TwoStreamConfig {
    /// Full-size transformer system: 384-dim ViT streams projected to 512,
    /// fused through the shared 1024-wide linear layer onto 17 logits.
    pub fn paper_vit() -> Self {
        TwoStreamConfig {
            backbone: BackboneConfig::Vit(ViTConfig::default()),
            stream_proj: 512,
            n_classes: TargetLabel::COUNT,
        }
    }

    /// Full-size CNN system.
    pub fn paper_cnn() -> Self {
        TwoStreamConfig {
            backbone: BackboneConfig::Cnn(CnnConfig::default()),
            stream_proj: 512,
            n_classes: TargetLabel::COUNT,
        }
    }

    pub fn fused_dim(&self) -> usize {
        2 * self.stream_proj
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.stream_proj == 0 || self.n_classes == 0 {
            return Err(ModelError::BadConfig("zero-sized head field".into()));
        }
        match &self.backbone {
            BackboneConfig::Vit(c) => c.validate(),
            BackboneConfig::Cnn(c) => c.validate(),
        }
    }
}

enum BackboneParams {
    Vit(VitParams),
    Cnn(CnnParams),
}

/// The complete two-stream model: independent backbone weights per stream
/// plus the fusion head, all living in one named [`ParamStore`].
pub struct TwoStreamModel<E: Element> {
    cfg: TwoStreamConfig,
    store: ParamStore<E>,
    stream1: BackboneParams,
    stream2: BackboneParams,
    proj1_w: ParamId,
    proj1_b: ParamId,
    proj2_w: ParamId,
    proj2_b: ParamId,
    out_w: ParamId,
    out_b: ParamId,
}

/// Width of the architecture descriptor stored as the `meta/arch` tensor.
const META_LEN: usize = 11;
const META_FORMAT: f32 = 1.0;

fn encode_meta<E: Element>(cfg: &TwoStreamConfig) -> ArrayD<E> {
    let mut m = [0f32; META_LEN];
    m[0] = META_FORMAT;
    m[2] = cfg.n_classes as f32;
    m[3] = cfg.stream_proj as f32;
    match &cfg.backbone {
        BackboneConfig::Vit(c) => {
            m[1] = 1.0;
            m[4] = c.input_h as f32;
            m[5] = c.input_w as f32;
            m[6] = c.patch as f32;
            m[7] = c.dim as f32;
            m[8] = c.blocks as f32;
            m[9] = c.heads as f32;
            m[10] = c.ffn as f32;
        }
        BackboneConfig::Cnn(c) => {
            m[1] = 0.0;
            m[4] = c.input_h as f32;
            m[5] = c.input_w as f32;
            m[6] = c.pad_to_h as f32;
            m[7] = c.stages as f32;
            m[8] = c.base_channels as f32;
            m[9] = c.embed_dim as f32;
        }
    }
    ArrayD::from_shape_vec(
        IxDyn(&[META_LEN]),
        m.iter().map(|&v| E::from_f64(v as f64)).collect(),
    )
    .unwrap()
}

/// Reconstruct the configuration from a `meta/arch` tensor.
pub fn decode_meta(data: &[f32]) -> Result<TwoStreamConfig, ModelError> {
    if data.len() != META_LEN || data[0] != META_FORMAT {
        return Err(ModelError::BadConfig(format!(
            "unrecognized meta/arch descriptor (len {}, format {:?})",
            data.len(),
            data.first()
        )));
    }
    let u = |i: usize| data[i] as usize;
    let backbone = if data[1] == 1.0 {
        BackboneConfig::Vit(ViTConfig {
            input_h: u(4),
            input_w: u(5),
            patch: u(6),
            dim: u(7),
            blocks: u(8),
            heads: u(9),
            ffn: u(10),
        })
    } else {
        BackboneConfig::Cnn(CnnConfig {
            input_h: u(4),
            input_w: u(5),
            pad_to_h: u(6),
            stages: u(7),
            base_channels: u(8),
            embed_dim: u(9),
        })
    };
    let cfg = TwoStreamConfig {
        backbone,
        stream_proj: u(3),
        n_classes: u(2),
    };
    cfg.validate()?;
    Ok(cfg)
}

impl<E: Element> TwoStreamModel<E> {
    pub fn new(cfg: TwoStreamConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::<E>::new();
        store.add("meta/arch", encode_meta(&cfg), false);
        let register = |store: &mut ParamStore<E>, prefix: &str, rng: &mut ChaCha8Rng| {
            match &cfg.backbone {
                BackboneConfig::Vit(c) => {
                    BackboneParams::Vit(VitParams::register(store, prefix, c, rng))
                }
                BackboneConfig::Cnn(c) => {
                    BackboneParams::Cnn(CnnParams::register(store, prefix, c, rng))
                }
            }
        };
        let stream1 = register(&mut store, "stream1", &mut rng);
        let stream2 = register(&mut store, "stream2", &mut rng);
        let d = cfg.backbone.embed_dim();
        let proj1_w = store.add_trunc_normal("head/proj1/w", &[d, cfg.stream_proj], 0.02, &mut rng);
        let proj1_b = store.add_zeros("head/proj1/b", &[cfg.stream_proj]);
        let proj2_w = store.add_trunc_normal("head/proj2/w", &[d, cfg.stream_proj], 0.02, &mut rng);
        let proj2_b = store.add_zeros("head/proj2/b", &[cfg.stream_proj]);
        let out_w =
            store.add_trunc_normal("head/out/w", &[cfg.fused_dim(), cfg.n_classes], 0.02, &mut rng);
        let out_b = store.add_zeros("head/out/b", &[cfg.n_classes]);
        Ok(TwoStreamModel {
            cfg,
            store,
            stream1,
            stream2,
            proj1_w,
            proj1_b,
            proj2_w,
            proj2_b,
            out_w,
            out_b,
        })
    }

    pub fn config(&self) -> &TwoStreamConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore<E> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<E> {
        &mut self.store
    }

    pub fn bind(&self, tape: &mut Tape<E>) -> Vec<Var> {
        self.store.bind(tape)
    }

    fn stream_forward(
        &self,
        tape: &mut Tape<E>,
        bound: &[Var],
        params: &BackboneParams,
        seg: ArrayView2<E>,
        attention_sink: Option<&mut Vec<Var>>,
    ) -> Result<Var, ModelError> {
        match (params, &self.cfg.backbone) {
            (BackboneParams::Vit(p), BackboneConfig::Vit(c)) => {
                let tokens = patchify(seg, c)?;
                let tokens = tape.leaf(tokens.into_dyn(), false);
                let out = vit_forward(tape, bound, p, c, tokens)?;
                if let Some(sink) = attention_sink {
                    sink.extend(out.attention);
                }
                Ok(out.class_token)
            }
            (BackboneParams::Cnn(p), BackboneConfig::Cnn(c)) => {
                let image = pad_input(seg, c)?;
                let image = tape.leaf(image.into_dyn(), false);
                cnn_forward(tape, bound, p, c, image)
            }
            _ => unreachable!("backbone params always match config"),
        }
    }

    /// Forward both streams to the `[1, n_classes]` logit node. `bound` must
    /// come from [`Self::bind`] (or leaves laid out in store order).
    pub fn forward_arrays(
        &self,
        tape: &mut Tape<E>,
        bound: &[Var],
        seg1: ArrayView2<E>,
        seg2: ArrayView2<E>,
    ) -> Result<Var, ModelError> {
        self.forward_impl(tape, bound, seg1, seg2, None)
    }

    /// Same as [`Self::forward_arrays`] but also collects the attention
    /// softmax nodes of both streams (ViT backbone only).
    pub fn forward_with_attention(
        &self,
        tape: &mut Tape<E>,
        bound: &[Var],
        seg1: ArrayView2<E>,
        seg2: ArrayView2<E>,
    ) -> Result<(Var, Vec<Var>), ModelError> {
        let mut attn = Vec::new();
        let logits = self.forward_impl(tape, bound, seg1, seg2, Some(&mut attn))?;
        Ok((logits, attn))
    }

    fn forward_impl(
        &self,
        tape: &mut Tape<E>,
        bound: &[Var],
        seg1: ArrayView2<E>,
        seg2: ArrayView2<E>,
        mut attention_sink: Option<&mut Vec<Var>>,
    ) -> Result<Var, ModelError> {
        let e1 = self.stream_forward(tape, bound, &self.stream1, seg1, attention_sink.as_deref_mut())?;
        let e2 = self.stream_forward(tape, bound, &self.stream2, seg2, attention_sink.as_deref_mut())?;
        let v = |id: ParamId| bound[id.0];
        let p1 = tape.linear(e1, v(self.proj1_w), v(self.proj1_b))?;
        let p2 = tape.linear(e2, v(self.proj2_w), v(self.proj2_b))?;
        let fused = tape.concat_cols(&[p1, p2])?;
        Ok(tape.linear(fused, v(self.out_w), v(self.out_b))?)
    }

    /// Forward a channel-tagged segment pair; the tags must be (1, 2).
    pub fn forward_segments(
        &self,
        tape: &mut Tape<E>,
        bound: &[Var],
        seg1: &SpectralSegment,
        seg2: &SpectralSegment,
    ) -> Result<Var, ModelError> {
        if seg1.channel != 1 || seg2.channel != 2 {
            return Err(ModelError::ChannelOrder {
                got1: seg1.channel,
                got2: seg2.channel,
            });
        }
        let a1 = convert_values::<E>(&seg1.values);
        let a2 = convert_values::<E>(&seg2.values);
        self.forward_arrays(tape, bound, a1.view(), a2.view())
    }

    /// Inference convenience: logits for one segment pair on a throwaway tape.
    pub fn infer_logits(
        &self,
        seg1: &SpectralSegment,
        seg2: &SpectralSegment,
    ) -> Result<Vec<E>, ModelError> {
        let mut tape = Tape::<E>::new();
        let bound = self.bind(&mut tape);
        let logits = self.forward_segments(&mut tape, &bound, seg1, seg2)?;
        Ok(tape.value(logits).iter().copied().collect())
    }

    /// Argmax class and its softmax probability for one segment pair.
    pub fn predict_one(
        &self,
        seg1: &SpectralSegment,
        seg2: &SpectralSegment,
    ) -> Result<(usize, f64), ModelError> {
        let logits = self.infer_logits(seg1, seg2)?;
        let probs = kernels::softmax_vec(&logits);
        let (best, p) = probs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.as_f64().total_cmp(&b.1.as_f64()))
            .expect("non-empty logits");
        Ok((best, p.as_f64()))
    }
}

pub(crate) fn convert_values<E: Element>(values: &Array2<f32>) -> Array2<E> {
    values.mapv(|v| E::from_f64(v as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nncore::all_finite;

    pub(crate) fn tiny_vit_cfg() -> TwoStreamConfig {
        TwoStreamConfig {
            backbone: BackboneConfig::Vit(ViTConfig {
                input_h: 17,
                input_w: 16,
                patch: 8,
                dim: 32,
                blocks: 2,
                heads: 2,
                ffn: 64,
            }),
            stream_proj: 16,
            n_classes: TargetLabel::COUNT,
        }
    }

    fn seg(values: Array2<f32>, channel: u8) -> SpectralSegment {
        SpectralSegment {
            values,
            origin_s: 0.0,
            channel,
        }
    }

    #[test]
    fn logits_have_17_classes_and_are_finite_for_zero_input() {
        let model = TwoStreamModel::<f32>::new(tiny_vit_cfg(), 9).unwrap();
        let z1 = seg(Array2::zeros((17, 16)), 1);
        let z2 = seg(Array2::zeros((17, 16)), 2);
        let logits = model.infer_logits(&z1, &z2).unwrap();
        assert_eq!(logits.len(), TargetLabel::COUNT);
        let arr = ArrayD::from_shape_vec(IxDyn(&[17]), logits).unwrap();
        assert!(all_finite(&arr.view()));
    }

    #[test]
    fn forward_is_deterministic() {
        let model = TwoStreamModel::<f32>::new(tiny_vit_cfg(), 10).unwrap();
        let v1 = seg(
            Array2::from_shape_fn((17, 16), |(i, j)| ((i + 2 * j) % 7) as f32 / 7.0),
            1,
        );
        let v2 = seg(
            Array2::from_shape_fn((17, 16), |(i, j)| ((3 * i + j) % 5) as f32 / 5.0),
            2,
        );
        assert_eq!(
            model.infer_logits(&v1, &v2).unwrap(),
            model.infer_logits(&v1, &v2).unwrap()
        );
    }

    #[test]
    fn channel_order_is_enforced() {
        let model = TwoStreamModel::<f32>::new(tiny_vit_cfg(), 9).unwrap();
        let s1 = seg(Array2::zeros((17, 16)), 2);
        let s2 = seg(Array2::zeros((17, 16)), 1);
        let err = model.infer_logits(&s1, &s2).unwrap_err();
        assert!(matches!(err, ModelError::ChannelOrder { .. }), "{err}");
    }

    #[test]
    fn meta_descriptor_round_trips() {
        for cfg in [
            tiny_vit_cfg(),
            TwoStreamConfig::paper_vit(),
            TwoStreamConfig::paper_cnn(),
        ] {
            let meta = encode_meta::<f32>(&cfg);
            let data: Vec<f32> = meta.iter().copied().collect();
            assert_eq!(decode_meta(&data).unwrap(), cfg);
        }
    }

    #[test]
    fn permuting_patch_tokens_is_invariant_with_zero_positional_embedding() {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let cfg = tiny_vit_cfg();
        let BackboneConfig::Vit(vit_cfg) = cfg.backbone else {
            unreachable!()
        };
        let mut model = TwoStreamModel::<f64>::new(cfg, 21).unwrap();
        for stream in ["stream1", "stream2"] {
            let id = model.store().index_of(&format!("{stream}/pos")).unwrap();
            model.store_mut().value_mut(id).fill(0.0);
        }

        let base = Array2::<f64>::from_shape_fn((17, 16), |(i, j)| {
            ((i * 5 + j * 11) % 17) as f64 / 17.0
        });
        let tokens = patchify(base.view(), &vit_cfg).unwrap();
        let mut order: Vec<usize> = (0..tokens.nrows()).collect();
        order.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(2));
        let permuted = {
            let mut t = tokens.clone();
            for (dst, &src) in order.iter().enumerate() {
                t.row_mut(dst).assign(&tokens.row(src));
            }
            t
        };

        let class_out = |toks: &Array2<f64>| {
            let mut tape = Tape::<f64>::new();
            let bound = model.bind(&mut tape);
            let leaf = tape.leaf(toks.clone().into_dyn(), false);
            let BackboneParams::Vit(p) = &model.stream1 else {
                unreachable!()
            };
            let out = vit_forward(&mut tape, &bound, p, &vit_cfg, leaf).unwrap();
            tape.value(out.class_token).clone()
        };
        let a = class_out(&tokens);
        let b = class_out(&permuted);
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-5, "{x} vs {y}");
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let model = TwoStreamModel::<f64>::new(tiny_vit_cfg(), 33).unwrap();
        let s1 = seg(
            Array2::from_shape_fn((17, 16), |(i, j)| ((i * j) % 11) as f32 / 11.0),
            1,
        );
        let s2 = seg(
            Array2::from_shape_fn((17, 16), |(i, j)| ((i + j) % 9) as f32 / 9.0),
            2,
        );
        let mut tape = Tape::<f64>::new();
        let bound = model.bind(&mut tape);
        let a1 = convert_values::<f64>(&s1.values);
        let a2 = convert_values::<f64>(&s2.values);
        let (_, attn) = model
            .forward_with_attention(&mut tape, &bound, a1.view(), a2.view())
            .unwrap();
        // 2 streams × 2 blocks × 2 heads
        assert_eq!(attn.len(), 8);
        for var in attn {
            let m = tape.value(var);
            let m2 = m.view().into_dimensionality::<ndarray::Ix2>().unwrap();
            for row in m2.rows() {
                let s: f64 = row.iter().sum();
                assert!((s - 1.0).abs() < 1e-6, "row sum {s}");
            }
        }
    }
}
