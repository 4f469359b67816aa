//! Vision-Transformer backbone: patch tokens + class token + learnable
//! positional embeddings through pre-norm attention/feedforward blocks.

use ndarray::{Array2, ArrayView2};
use rand::Rng;

use super::ModelError;
use crate::nncore::{Element, ParamId, ParamStore, Tape, Var};

/// Backbone geometry. The default is the full-size configuration: 257×256
/// input, 16×16 patches, model dim 384, 6 blocks of 6-head attention with a
/// 1536-wide feedforward.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ViTConfig {
    pub input_h: usize,
    pub input_w: usize,
    pub patch: usize,
    pub dim: usize,
    pub blocks: usize,
    pub heads: usize,
    pub ffn: usize,
}

impl Default for ViTConfig {
    fn default() -> Self {
        ViTConfig {
            input_h: 257,
            input_w: 256,
            patch: 16,
            dim: 384,
            blocks: 6,
            heads: 6,
            ffn: 1536,
        }
    }
}

impl ViTConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.dim == 0 || self.blocks == 0 || self.heads == 0 || self.patch == 0 {
            return Err(ModelError::BadConfig("zero-sized transformer field".into()));
        }
        if self.dim % self.heads != 0 {
            return Err(ModelError::BadConfig(format!(
                "model dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.effective_h() % self.patch != 0 || self.input_w % self.patch != 0 {
            return Err(ModelError::BadConfig(format!(
                "patch {} does not tile {}x{} input",
                self.patch, self.input_h, self.input_w
            )));
        }
        Ok(())
    }

    /// Rows actually patchified: an input one row taller than a multiple of
    /// the patch size drops its top bin (the Nyquist row of a 257-bin
    /// spectrum).
    pub fn effective_h(&self) -> usize {
        if self.input_h % self.patch == 1 {
            self.input_h - 1
        } else {
            self.input_h
        }
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.effective_h() / self.patch, self.input_w / self.patch)
    }

    pub fn tokens(&self) -> usize {
        let (gh, gw) = self.grid();
        gh * gw
    }

    pub fn token_dim(&self) -> usize {
        self.patch * self.patch
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

/// Cut a segment into flattened patch tokens, frequency-major: token index
/// is `patch_row * grid_w + patch_col`, element index is
/// `row_in_patch * patch + col_in_patch`.
pub fn patchify<E: Element>(
    values: ArrayView2<E>,
    cfg: &ViTConfig,
) -> Result<Array2<E>, ModelError> {
    let (h, w) = values.dim();
    if h != cfg.input_h || w != cfg.input_w {
        return Err(ModelError::BadInputShape {
            expected: vec![cfg.input_h, cfg.input_w],
            got: vec![h, w],
        });
    }
    let (gh, gw) = cfg.grid();
    let p = cfg.patch;
    let mut tokens = Array2::<E>::zeros((gh * gw, p * p));
    for pr in 0..gh {
        for pc in 0..gw {
            let t = pr * gw + pc;
            for r in 0..p {
                for c in 0..p {
                    tokens[[t, r * p + c]] = values[[pr * p + r, pc * p + c]];
                }
            }
        }
    }
    Ok(tokens)
}

pub struct VitBlockParams {
    pub ln1_gamma: ParamId,
    pub ln1_beta: ParamId,
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln2_gamma: ParamId,
    pub ln2_beta: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

pub struct VitParams {
    pub embed_w: ParamId,
    pub embed_b: ParamId,
    pub cls: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<VitBlockParams>,
    pub lnf_gamma: ParamId,
    pub lnf_beta: ParamId,
}

const INIT_STD: f64 = 0.02;
const LN_EPS: f64 = 1e-6;

impl VitParams {
    pub fn register<E: Element, R: Rng>(
        store: &mut ParamStore<E>,
        prefix: &str,
        cfg: &ViTConfig,
        rng: &mut R,
    ) -> Self {
        let d = cfg.dim;
        let embed_w =
            store.add_trunc_normal(format!("{prefix}/embed/w"), &[cfg.token_dim(), d], INIT_STD, rng);
        let embed_b = store.add_zeros(format!("{prefix}/embed/b"), &[d]);
        let cls = store.add_trunc_normal(format!("{prefix}/cls"), &[1, d], INIT_STD, rng);
        let pos =
            store.add_trunc_normal(format!("{prefix}/pos"), &[cfg.tokens() + 1, d], INIT_STD, rng);
        let mut blocks = Vec::with_capacity(cfg.blocks);
        for i in 0..cfg.blocks {
            let p = format!("{prefix}/block{i}");
            blocks.push(VitBlockParams {
                ln1_gamma: store.add_ones(format!("{p}/ln1/gamma"), &[d]),
                ln1_beta: store.add_zeros(format!("{p}/ln1/beta"), &[d]),
                wq: store.add_trunc_normal(format!("{p}/attn/wq"), &[d, d], INIT_STD, rng),
                bq: store.add_zeros(format!("{p}/attn/bq"), &[d]),
                wk: store.add_trunc_normal(format!("{p}/attn/wk"), &[d, d], INIT_STD, rng),
                bk: store.add_zeros(format!("{p}/attn/bk"), &[d]),
                wv: store.add_trunc_normal(format!("{p}/attn/wv"), &[d, d], INIT_STD, rng),
                bv: store.add_zeros(format!("{p}/attn/bv"), &[d]),
                wo: store.add_trunc_normal(format!("{p}/attn/wo"), &[d, d], INIT_STD, rng),
                bo: store.add_zeros(format!("{p}/attn/bo"), &[d]),
                ln2_gamma: store.add_ones(format!("{p}/ln2/gamma"), &[d]),
                ln2_beta: store.add_zeros(format!("{p}/ln2/beta"), &[d]),
                w1: store.add_trunc_normal(format!("{p}/mlp/w1"), &[d, cfg.ffn], INIT_STD, rng),
                b1: store.add_zeros(format!("{p}/mlp/b1"), &[cfg.ffn]),
                w2: store.add_trunc_normal(format!("{p}/mlp/w2"), &[cfg.ffn, d], INIT_STD, rng),
                b2: store.add_zeros(format!("{p}/mlp/b2"), &[d]),
            });
        }
        let lnf_gamma = store.add_ones(format!("{prefix}/ln_f/gamma"), &[d]);
        let lnf_beta = store.add_zeros(format!("{prefix}/ln_f/beta"), &[d]);
        VitParams {
            embed_w,
            embed_b,
            cls,
            pos,
            blocks,
            lnf_gamma,
            lnf_beta,
        }
    }
}

/// Forward output: the class-token embedding plus the attention maps
/// (softmax nodes, one per block × head) for inspection.
pub struct VitOutput {
    pub class_token: Var,
    pub attention: Vec<Var>,
}

/// Run the backbone on a `[tokens, token_dim]` node.
pub fn vit_forward<E: Element>(
    tape: &mut Tape<E>,
    bound: &[Var],
    p: &VitParams,
    cfg: &ViTConfig,
    tokens: Var,
) -> Result<VitOutput, ModelError> {
    let v = |id: ParamId| bound[id.0];
    let got = tape.shape(tokens).to_vec();
    if got != [cfg.tokens(), cfg.token_dim()] {
        return Err(ModelError::BadInputShape {
            expected: vec![cfg.tokens(), cfg.token_dim()],
            got,
        });
    }
    let embedded = tape.linear(tokens, v(p.embed_w), v(p.embed_b))?;
    let with_cls = tape.concat_rows(&[v(p.cls), embedded])?;
    let mut x = tape.add(with_cls, v(p.pos))?;

    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut attention = Vec::with_capacity(cfg.blocks * cfg.heads);
    for blk in &p.blocks {
        let h = tape.layernorm(x, v(blk.ln1_gamma), v(blk.ln1_beta), LN_EPS)?;
        let q = tape.linear(h, v(blk.wq), v(blk.bq))?;
        let k = tape.linear(h, v(blk.wk), v(blk.bk))?;
        let val = tape.linear(h, v(blk.wv), v(blk.bv))?;
        let mut head_outs = Vec::with_capacity(cfg.heads);
        for j in 0..cfg.heads {
            let qj = tape.slice_cols(q, j * dh, dh)?;
            let kj = tape.slice_cols(k, j * dh, dh)?;
            let vj = tape.slice_cols(val, j * dh, dh)?;
            let scores = tape.matmul_t(qj, false, kj, true)?;
            let scaled = tape.scale(scores, scale);
            let attn = tape.softmax_rows(scaled)?;
            attention.push(attn);
            head_outs.push(tape.matmul(attn, vj)?);
        }
        let merged = tape.concat_cols(&head_outs)?;
        let projected = tape.linear(merged, v(blk.wo), v(blk.bo))?;
        x = tape.add(x, projected)?;

        let h2 = tape.layernorm(x, v(blk.ln2_gamma), v(blk.ln2_beta), LN_EPS)?;
        let ff1 = tape.linear(h2, v(blk.w1), v(blk.b1))?;
        let act = tape.gelu(ff1);
        let ff2 = tape.linear(act, v(blk.w2), v(blk.b2))?;
        x = tape.add(x, ff2)?;
    }
    let normed = tape.layernorm(x, v(p.lnf_gamma), v(p.lnf_beta), LN_EPS)?;
    let class_token = tape.row(normed, 0)?;
    Ok(VitOutput {
        class_token,
        attention,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn paper_config_geometry() {
        let cfg = ViTConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.tokens(), 256);
        assert_eq!(cfg.token_dim(), 256);
        assert_eq!(cfg.grid(), (16, 16));
        assert!(cfg.effective_h() == 256);
    }

    #[test]
    fn patchify_one_hot_lands_in_expected_token() {
        let cfg = ViTConfig::default();
        let mut values = Array2::<f64>::zeros((257, 256));
        values[[17, 3]] = 1.0;
        let tokens = patchify(values.view(), &cfg).unwrap();
        assert_eq!(tokens.dim(), (256, 256));
        for t in 0..256 {
            for e in 0..256 {
                let expect = if t == 16 && e == 19 { 1.0 } else { 0.0 };
                assert_eq!(tokens[[t, e]], expect, "token {t} element {e}");
            }
        }
    }

    #[test]
    fn patchify_constant_input_gives_identical_tokens() {
        let cfg = ViTConfig::default();
        let values = Array2::<f64>::from_elem((257, 256), 0.5);
        let tokens = patchify(values.view(), &cfg).unwrap();
        let first = tokens.row(0).to_owned();
        for t in 1..tokens.nrows() {
            assert_eq!(tokens.row(t), first.view());
        }
    }

    #[test]
    fn patchify_rejects_wrong_shape() {
        let cfg = ViTConfig::default();
        let values = Array2::<f64>::zeros((256, 256));
        assert!(patchify(values.view(), &cfg).is_err());
    }

    #[test]
    fn nyquist_row_is_dropped() {
        let cfg = ViTConfig::default();
        let mut values = Array2::<f64>::zeros((257, 256));
        values[[256, 0]] = 7.0; // top bin only
        let tokens = patchify(values.view(), &cfg).unwrap();
        assert!(tokens.iter().all(|&v| v == 0.0));
    }
}
