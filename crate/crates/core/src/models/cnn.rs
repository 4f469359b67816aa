//! CNN baseline backbone: stacked modules of two identical 3×3
//! convolutions and a 2×2 max-pool, channel count doubling per module, then
//! a linear projection of the flattened feature map.

use ndarray::{Array3, ArrayView2};
use rand::Rng;

use super::ModelError;
use crate::nncore::{Element, ParamId, ParamStore, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CnnConfig {
    pub input_h: usize,
    pub input_w: usize,
    /// Input rows after zero-padding the high-frequency side, so that every
    /// pooling stage halves cleanly.
    pub pad_to_h: usize,
    pub stages: usize,
    pub base_channels: usize,
    pub embed_dim: usize,
}

impl Default for CnnConfig {
    fn default() -> Self {
        CnnConfig {
            input_h: 257,
            input_w: 256,
            pad_to_h: 272,
            stages: 4,
            base_channels: 16,
            embed_dim: 384,
        }
    }
}

impl CnnConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.stages == 0 || self.base_channels == 0 || self.embed_dim == 0 {
            return Err(ModelError::BadConfig("zero-sized cnn field".into()));
        }
        if self.pad_to_h < self.input_h {
            return Err(ModelError::BadConfig(format!(
                "pad_to_h {} smaller than input_h {}",
                self.pad_to_h, self.input_h
            )));
        }
        let div = 1usize << self.stages;
        if self.pad_to_h % div != 0 || self.input_w % div != 0 {
            return Err(ModelError::BadConfig(format!(
                "{}x{} input not divisible by 2^{} pooling",
                self.pad_to_h, self.input_w, self.stages
            )));
        }
        Ok(())
    }

    /// Channel count of stage `i`; doubles at every stage.
    pub fn channels(&self, stage: usize) -> usize {
        self.base_channels << stage
    }

    pub fn final_spatial(&self) -> (usize, usize) {
        (self.pad_to_h >> self.stages, self.input_w >> self.stages)
    }

    pub fn flat_dim(&self) -> usize {
        let (h, w) = self.final_spatial();
        self.channels(self.stages - 1) * h * w
    }
}

/// Zero-pad the high-frequency rows to `pad_to_h` and add the channel axis.
pub fn pad_input<E: Element>(
    values: ArrayView2<E>,
    cfg: &CnnConfig,
) -> Result<Array3<E>, ModelError> {
    let (h, w) = values.dim();
    if h != cfg.input_h || w != cfg.input_w {
        return Err(ModelError::BadInputShape {
            expected: vec![cfg.input_h, cfg.input_w],
            got: vec![h, w],
        });
    }
    let mut out = Array3::<E>::zeros((1, cfg.pad_to_h, cfg.input_w));
    out.slice_mut(ndarray::s![0, ..h, ..]).assign(&values);
    Ok(out)
}

pub struct CnnStageParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

pub struct CnnParams {
    pub stages: Vec<CnnStageParams>,
    pub proj_w: ParamId,
    pub proj_b: ParamId,
}

impl CnnParams {
    pub fn register<E: Element, R: Rng>(
        store: &mut ParamStore<E>,
        prefix: &str,
        cfg: &CnnConfig,
        rng: &mut R,
    ) -> Self {
        let mut stages = Vec::with_capacity(cfg.stages);
        let mut c_in = 1usize;
        for i in 0..cfg.stages {
            let c_out = cfg.channels(i);
            let p = format!("{prefix}/stage{i}");
            // He-style std for relu conv stacks.
            let std1 = (2.0 / (c_in * 9) as f64).sqrt();
            let std2 = (2.0 / (c_out * 9) as f64).sqrt();
            stages.push(CnnStageParams {
                w1: store.add_trunc_normal(format!("{p}/conv1/w"), &[c_out, c_in, 3, 3], std1, rng),
                b1: store.add_zeros(format!("{p}/conv1/b"), &[c_out]),
                w2: store.add_trunc_normal(format!("{p}/conv2/w"), &[c_out, c_out, 3, 3], std2, rng),
                b2: store.add_zeros(format!("{p}/conv2/b"), &[c_out]),
            });
            c_in = c_out;
        }
        let proj_w = store.add_trunc_normal(
            format!("{prefix}/proj/w"),
            &[cfg.flat_dim(), cfg.embed_dim],
            0.02,
            rng,
        );
        let proj_b = store.add_zeros(format!("{prefix}/proj/b"), &[cfg.embed_dim]);
        CnnParams {
            stages,
            proj_w,
            proj_b,
        }
    }
}

/// Run the backbone on a `[1, pad_to_h, input_w]` node; returns the
/// `[1, embed_dim]` embedding.
pub fn cnn_forward<E: Element>(
    tape: &mut Tape<E>,
    bound: &[Var],
    p: &CnnParams,
    cfg: &CnnConfig,
    image: Var,
) -> Result<Var, ModelError> {
    let v = |id: ParamId| bound[id.0];
    let got = tape.shape(image).to_vec();
    if got != [1, cfg.pad_to_h, cfg.input_w] {
        return Err(ModelError::BadInputShape {
            expected: vec![1, cfg.pad_to_h, cfg.input_w],
            got,
        });
    }
    let mut x = image;
    for stage in &p.stages {
        let c1 = tape.conv2d(x, v(stage.w1), v(stage.b1), 1)?;
        let r1 = tape.relu(c1);
        let c2 = tape.conv2d(r1, v(stage.w2), v(stage.b2), 1)?;
        let r2 = tape.relu(c2);
        x = tape.maxpool2x2(r2)?;
    }
    let flat = tape.reshape(x, &[1, cfg.flat_dim()])?;
    Ok(tape.linear(flat, v(p.proj_w), v(p.proj_b))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn paper_config_channel_and_spatial_arithmetic() {
        let cfg = CnnConfig::default();
        cfg.validate().unwrap();
        assert_eq!(
            (0..4).map(|i| cfg.channels(i)).collect::<Vec<_>>(),
            vec![16, 32, 64, 128]
        );
        assert_eq!(cfg.final_spatial(), (17, 16));
        assert_eq!(cfg.flat_dim(), 128 * 17 * 16);
    }

    #[test]
    fn pad_keeps_all_bins_and_zeroes_the_extension() {
        let cfg = CnnConfig::default();
        let values = Array2::<f64>::from_elem((257, 256), 0.25);
        let padded = pad_input(values.view(), &cfg).unwrap();
        assert_eq!(padded.dim(), (1, 272, 256));
        assert_eq!(padded[[0, 256, 0]], 0.25);
        assert!(padded
            .slice(ndarray::s![0, 257.., ..])
            .iter()
            .all(|&v| v == 0.0));
    }

    fn tiny_cfg() -> CnnConfig {
        CnnConfig {
            input_h: 17,
            input_w: 16,
            pad_to_h: 32,
            stages: 4,
            base_channels: 2,
            embed_dim: 8,
        }
    }

    #[test]
    fn forward_shapes_and_determinism() {
        let cfg = tiny_cfg();
        cfg.validate().unwrap();
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = CnnParams::register(&mut store, "s", &cfg, &mut rng);
        let input = Array2::<f64>::from_shape_fn((17, 16), |(i, j)| {
            ((i * 7 + j * 3) % 13) as f64 / 13.0
        });
        let run = || {
            let mut tape = Tape::<f64>::new();
            let bound = store.bind(&mut tape);
            let img = tape.leaf(pad_input(input.view(), &cfg).unwrap().into_dyn(), false);
            let out = cnn_forward(&mut tape, &bound, &params, &cfg, img).unwrap();
            tape.value(out).clone()
        };
        let a = run();
        assert_eq!(a.shape(), &[1, 8]);
        assert_eq!(a, run());
    }

    #[test]
    fn zero_input_ignores_first_layer_weights() {
        // With a zero image the first conv sees only its bias, so scrambling
        // the first-layer weights cannot change the embedding.
        let cfg = tiny_cfg();
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = CnnParams::register(&mut store, "s", &cfg, &mut rng);
        let zero = Array2::<f64>::zeros((17, 16));
        let forward = |store: &ParamStore<f64>| {
            let mut tape = Tape::<f64>::new();
            let bound = store.bind(&mut tape);
            let img = tape.leaf(pad_input(zero.view(), &cfg).unwrap().into_dyn(), false);
            let out = cnn_forward(&mut tape, &bound, &params, &cfg, img).unwrap();
            tape.value(out).clone()
        };
        let before = forward(&store);
        store.value_mut(params.stages[0].w1).mapv_inplace(|v| v * -3.5 + 0.1);
        let after = forward(&store);
        assert_eq!(before, after);
    }
}
