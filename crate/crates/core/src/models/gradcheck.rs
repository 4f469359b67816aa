//! Whole-model gradient validation against the finite-difference oracle,
//! run on the double-precision build of the engine.

use ndarray::{Array2, ArrayD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ModelError, TwoStreamConfig, TwoStreamModel};
use crate::nncore::fdcheck::{max_rel_error, numeric_gradients};
use crate::nncore::{Tape, Var};

/// Compare analytic parameter gradients of a two-stream model against
/// central finite differences on one fixed random input pair. Returns the
/// worst relative error over every trainable parameter element.
pub fn finite_difference_check(
    cfg: TwoStreamConfig,
    seed: u64,
    h: f64,
) -> Result<f64, ModelError> {
    let mut model = TwoStreamModel::<f64>::new(cfg, seed)?;
    let (ih, iw) = cfg.backbone.input_shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xF00D_F00D);
    // Freshly-initialized nets sit exactly on relu/max-pool kinks (zero
    // biases over zero-padded regions), where finite differences are
    // meaningless. Jitter every parameter off those measure-zero states.
    for i in 0..model.store().len() {
        let id = crate::nncore::ParamId(i);
        if !model.store().entries()[i].trainable {
            continue;
        }
        let offsets: Vec<f64> = model.store().value(id)
            .iter()
            .map(|_| {
                let mag = rng.gen_range(0.02..0.06);
                if rng.gen::<bool>() {
                    mag
                } else {
                    -mag
                }
            })
            .collect();
        let mut k = 0;
        model.store_mut().value_mut(id).mapv_inplace(|v| {
            let out = v + offsets[k];
            k += 1;
            out
        });
    }
    let seg1 = Array2::<f64>::from_shape_fn((ih, iw), |_| rng.gen_range(0.0..1.0));
    let seg2 = Array2::<f64>::from_shape_fn((ih, iw), |_| rng.gen_range(0.0..1.0));
    let target = 3usize;

    let entries = model.store().entries();
    let trainable_idx: Vec<usize> = entries
        .iter()
        .enumerate()
        .filter(|(_, e)| e.trainable)
        .map(|(i, _)| i)
        .collect();
    let trainable_arrays: Vec<ArrayD<f64>> = trainable_idx
        .iter()
        .map(|&i| (*entries[i].value).clone())
        .collect();

    // Forward-only loss as a pure function of the trainable parameters.
    let loss_fn = |arrays: &[ArrayD<f64>]| -> f64 {
        let mut tape = Tape::<f64>::new();
        let mut next_trainable = 0usize;
        let bound: Vec<Var> = entries
            .iter()
            .map(|e| {
                if e.trainable {
                    let v = tape.leaf(arrays[next_trainable].clone(), true);
                    next_trainable += 1;
                    v
                } else {
                    tape.leaf((*e.value).clone(), false)
                }
            })
            .collect();
        let logits = model
            .forward_arrays(&mut tape, &bound, seg1.view(), seg2.view())
            .expect("forward on validated config");
        let loss = tape.cross_entropy(logits, target).expect("target in range");
        tape.scalar_value(loss)
    };

    // Analytic gradients from the reverse pass on the same construction.
    let mut tape = Tape::<f64>::new();
    let mut next_trainable = 0usize;
    let bound: Vec<Var> = entries
        .iter()
        .map(|e| {
            if e.trainable {
                let v = tape.leaf(trainable_arrays[next_trainable].clone(), true);
                next_trainable += 1;
                v
            } else {
                tape.leaf((*e.value).clone(), false)
            }
        })
        .collect();
    let logits = model.forward_arrays(&mut tape, &bound, seg1.view(), seg2.view())?;
    let loss = tape.cross_entropy(logits, target)?;
    let grads = tape.backward(loss)?;

    let numeric = numeric_gradients(&trainable_arrays, loss_fn, h);
    let mut worst = 0.0f64;
    for (k, &i) in trainable_idx.iter().enumerate() {
        let analytic = grads
            .get(bound[i])
            .cloned()
            .unwrap_or_else(|| ArrayD::zeros(numeric[k].raw_dim()));
        let err = max_rel_error(&analytic, &numeric[k]);
        worst = worst.max(err);
    }
    Ok(worst)
}

/// After one backward pass on random input, report any trainable parameter
/// whose gradient is missing or identically zero.
pub fn dead_parameters(cfg: TwoStreamConfig, seed: u64) -> Result<Vec<String>, ModelError> {
    let model = TwoStreamModel::<f64>::new(cfg, seed)?;
    let (ih, iw) = cfg.backbone.input_shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xDEAD_BEEF);
    let seg1 = Array2::<f64>::from_shape_fn((ih, iw), |_| rng.gen_range(0.1..1.0));
    let seg2 = Array2::<f64>::from_shape_fn((ih, iw), |_| rng.gen_range(0.1..1.0));

    let mut tape = Tape::<f64>::new();
    let bound = model.bind(&mut tape);
    let logits = model.forward_arrays(&mut tape, &bound, seg1.view(), seg2.view())?;
    let loss = tape.cross_entropy(logits, 0)?;
    let grads = tape.backward(loss)?;

    let mut dead = Vec::new();
    for (i, e) in model.store().entries().iter().enumerate() {
        if !e.trainable {
            continue;
        }
        let alive = grads
            .get(bound[i])
            .map(|g| g.iter().any(|v| *v != 0.0))
            .unwrap_or(false);
        if !alive {
            dead.push(e.name.clone());
        }
    }
    Ok(dead)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{BackboneConfig, CnnConfig, ViTConfig};
    use crate::taxonomy::TargetLabel;

    fn tiny_vit() -> TwoStreamConfig {
        TwoStreamConfig {
            backbone: BackboneConfig::Vit(ViTConfig {
                input_h: 17,
                input_w: 16,
                patch: 8,
                dim: 16,
                blocks: 1,
                heads: 2,
                ffn: 32,
            }),
            stream_proj: 8,
            n_classes: TargetLabel::COUNT,
        }
    }

    fn tiny_cnn() -> TwoStreamConfig {
        TwoStreamConfig {
            backbone: BackboneConfig::Cnn(CnnConfig {
                input_h: 13,
                input_w: 12,
                pad_to_h: 16,
                stages: 2,
                base_channels: 2,
                embed_dim: 8,
            }),
            stream_proj: 8,
            n_classes: TargetLabel::COUNT,
        }
    }

    #[test]
    fn tiny_vit_two_stream_matches_finite_differences() {
        let err = finite_difference_check(tiny_vit(), 11, 1e-4).unwrap();
        assert!(err < 1e-4, "max relative error {err:.3e}");
    }

    #[test]
    fn tiny_cnn_two_stream_matches_finite_differences() {
        // Smaller step than the smooth transformer check: shrinks the window
        // in which an interior relu/pool kink can sit between ±h.
        let err = finite_difference_check(tiny_cnn(), 13, 1e-5).unwrap();
        assert!(err < 1e-4, "max relative error {err:.3e}");
    }

    #[test]
    fn gradient_reaches_every_parameter() {
        for cfg in [tiny_vit(), tiny_cnn()] {
            let dead = dead_parameters(cfg, 5).unwrap();
            assert!(dead.is_empty(), "dead parameters: {dead:?}");
        }
    }
}

