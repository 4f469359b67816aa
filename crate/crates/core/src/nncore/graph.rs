//! Define-by-run tape with reverse-mode differentiation.
//!
//! A [`Tape`] owns the forward graph as a flat arena; every op pushes one
//! node, so arena order is already topological. [`Tape::backward`] walks the
//! arena in reverse, accumulates parent gradients, then releases the stored
//! activations — a second backward on the same tape is an error.

use std::sync::Arc;

use ndarray::{ArrayD, ArrayViewD, Axis, Ix2, Ix3, IxDyn};
use thiserror::Error;

use super::element::Element;
use super::kernels;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected {expected}, got shape {got:?}")]
    BadRank {
        op: &'static str,
        expected: &'static str,
        got: Vec<usize>,
    },
    #[error("backward target must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward called on a released graph; re-run the forward pass first")]
    GraphReleased,
    #[error("cross_entropy target {target} out of range for {classes} classes")]
    BadTarget { target: usize, classes: usize },
    #[error("parameter/gradient mismatch for {name:?}: {param:?} vs {grad:?}")]
    ParamGradMismatch {
        name: String,
        param: Vec<usize>,
        grad: Vec<usize>,
    },
}

enum Op<E: Element> {
    Leaf { trainable: bool },
    Add,
    Mul,
    AddBias,
    Scale(f64),
    Sum,
    MatMul { ta: bool, tb: bool },
    Relu,
    Gelu,
    SoftmaxRows,
    LayerNorm { eps: f64 },
    Conv2d { pad: usize },
    MaxPool2x2 { argmax: Vec<u32> },
    CrossEntropy { probs: Vec<E>, target: usize },
    ConcatRows { heights: Vec<usize> },
    ConcatCols { widths: Vec<usize> },
    SliceCols { start: usize },
    Row { index: usize },
    Reshape,
}

struct Node<E: Element> {
    value: Arc<ArrayD<E>>,
    parents: Vec<Var>,
    op: Op<E>,
}

pub struct Tape<E: Element> {
    nodes: Vec<Node<E>>,
    released: bool,
}

/// Gradients keyed by the [`Var`]s of the tape that produced them.
#[derive(Debug)]
pub struct Gradients<E: Element> {
    slots: Vec<Option<ArrayD<E>>>,
}

impl<E: Element> Gradients<E> {
    pub fn get(&self, v: Var) -> Option<&ArrayD<E>> {
        self.slots.get(v.0).and_then(|s| s.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<ArrayD<E>> {
        self.slots.get_mut(v.0).and_then(|s| s.take())
    }
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            released: false,
        }
    }

    fn push(&mut self, value: ArrayD<E>, parents: Vec<Var>, op: Op<E>) -> Var {
        self.nodes.push(Node {
            value: Arc::new(value),
            parents,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: ArrayD<E>, trainable: bool) -> Var {
        self.push(value, vec![], Op::Leaf { trainable })
    }

    /// Zero-copy leaf over shared storage (model parameters).
    pub fn shared(&mut self, value: Arc<ArrayD<E>>, trainable: bool) -> Var {
        self.nodes.push(Node {
            value,
            parents: vec![],
            op: Op::Leaf { trainable },
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &ArrayD<E> {
        assert!(!self.released, "tape already released by backward");
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        let val = self.value(v);
        debug_assert_eq!(val.len(), 1);
        val.iter().next().unwrap().as_f64()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn view2(&self, v: Var, op: &'static str) -> Result<ndarray::ArrayView2<'_, E>, NnError> {
        self.nodes[v.0]
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .map_err(|_| NnError::BadRank {
                op,
                expected: "2-d array",
                got: self.shape(v).to_vec(),
            })
    }

    fn view3(&self, v: Var, op: &'static str) -> Result<ndarray::ArrayView3<'_, E>, NnError> {
        self.nodes[v.0]
            .value
            .view()
            .into_dimensionality::<Ix3>()
            .map_err(|_| NnError::BadRank {
                op,
                expected: "3-d array",
                got: self.shape(v).to_vec(),
            })
    }

    // ---- elementwise and structural ops ----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        if self.shape(a) != self.shape(b) {
            return Err(NnError::ShapeMismatch {
                op: "add",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let value = &*self.nodes[a.0].value + &*self.nodes[b.0].value;
        Ok(self.push(value, vec![a, b], Op::Add))
    }

    /// Elementwise (Hadamard) product of same-shape nodes.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        if self.shape(a) != self.shape(b) {
            return Err(NnError::ShapeMismatch {
                op: "mul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let value = &*self.nodes[a.0].value * &*self.nodes[b.0].value;
        Ok(self.push(value, vec![a, b], Op::Mul))
    }

    /// `[m, n] + [n]` broadcast add (bias rows).
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var, NnError> {
        let av = self.view2(a, "add_bias")?;
        let bshape = self.shape(bias).to_vec();
        if bshape.len() != 1 || bshape[0] != av.ncols() {
            return Err(NnError::ShapeMismatch {
                op: "add_bias",
                lhs: self.shape(a).to_vec(),
                rhs: bshape,
            });
        }
        let bv = self.nodes[bias.0].value.view();
        let mut value = av.to_owned();
        for mut row in value.rows_mut() {
            for (x, b) in row.iter_mut().zip(bv.iter()) {
                *x = *x + *b;
            }
        }
        Ok(self.push(value.into_dyn(), vec![a, bias], Op::AddBias))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.nodes[a.0].value.mapv(|v| v * E::from_f64(factor));
        self.push(value, vec![a], Op::Scale(factor))
    }

    /// Sum of all elements, as a 0-d scalar node.
    pub fn sum(&mut self, a: Var) -> Var {
        let total = kernels::sum_all(&self.nodes[a.0].value.view());
        let value = ArrayD::from_elem(IxDyn(&[]), E::from_f64(total));
        self.push(value, vec![a], Op::Sum)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.matmul_t(a, false, b, false)
    }

    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var, NnError> {
        let av = self.view2(a, "matmul")?;
        let bv = self.view2(b, "matmul")?;
        let inner_a = if ta { av.nrows() } else { av.ncols() };
        let inner_b = if tb { bv.ncols() } else { bv.nrows() };
        if inner_a != inner_b {
            return Err(NnError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let value = kernels::matmul(av, ta, bv, tb).into_dyn();
        Ok(self.push(value, vec![a, b], Op::MatMul { ta, tb }))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(|v| v.max(E::zero()));
        self.push(value, vec![a], Op::Relu)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(kernels::gelu_value);
        self.push(value, vec![a], Op::Gelu)
    }

    /// Softmax over the last axis of a 2-d node.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var, NnError> {
        let av = self.view2(a, "softmax")?;
        let value = kernels::softmax_rows(av).into_dyn();
        Ok(self.push(value, vec![a], Op::SoftmaxRows))
    }

    /// Layer normalization over the last axis with learnable scale/offset.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var, NnError> {
        let xv = self.view2(x, "layernorm")?;
        let n = xv.ncols();
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            let s = self.shape(v);
            if s != [n] {
                let _ = name;
                return Err(NnError::ShapeMismatch {
                    op: "layernorm",
                    lhs: self.shape(x).to_vec(),
                    rhs: s.to_vec(),
                });
            }
        }
        let (means, inv_stds) = kernels::layernorm_stats(xv, eps);
        let gv = self.nodes[gamma.0].value.clone();
        let bv = self.nodes[beta.0].value.clone();
        let mut value = xv.to_owned();
        for (i, mut row) in value.rows_mut().into_iter().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                let xhat = (v.as_f64() - means[i]) * inv_stds[i];
                *v = E::from_f64(xhat) * gv[[j]] + bv[[j]];
            }
        }
        Ok(self.push(value.into_dyn(), vec![x, gamma, beta], Op::LayerNorm { eps }))
    }

    /// Stride-1 2-d convolution: `x [ci,h,w]`, `w [co,ci,kh,kw]`, `b [co]`,
    /// symmetric zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, pad: usize) -> Result<Var, NnError> {
        let xv = self.view3(x, "conv2d")?;
        let wshape = self.shape(w).to_vec();
        if wshape.len() != 4 || wshape[1] != xv.dim().0 {
            return Err(NnError::ShapeMismatch {
                op: "conv2d",
                lhs: self.shape(x).to_vec(),
                rhs: wshape,
            });
        }
        let (co, _ci, kh, kw) = (wshape[0], wshape[1], wshape[2], wshape[3]);
        if kh != 2 * pad + 1 || kw != 2 * pad + 1 {
            // Same-size output is assumed throughout the pooling arithmetic.
            return Err(NnError::BadRank {
                op: "conv2d",
                expected: "kernel size 2*pad+1 (same-size output)",
                got: wshape,
            });
        }
        if self.shape(b) != [co] {
            return Err(NnError::ShapeMismatch {
                op: "conv2d",
                lhs: wshape,
                rhs: self.shape(b).to_vec(),
            });
        }
        let (_, h, wd) = xv.dim();
        let cols = kernels::im2col(xv, kh, kw, pad);
        let wmat = self.nodes[w.0]
            .value
            .view()
            .into_shape_with_order(IxDyn(&[co, wshape[1] * kh * kw]))
            .expect("conv weight is contiguous")
            .into_dimensionality::<Ix2>()
            .unwrap()
            .to_owned();
        // [hw, co] -> [co, hw] -> [co, h, w]
        let out_mat = kernels::matmul(cols.view(), false, wmat.view(), true);
        let mut out = out_mat
            .reversed_axes()
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(&[co, h, wd]))
            .unwrap();
        let bv = self.nodes[b.0].value.clone();
        for (c, mut plane) in out.axis_iter_mut(Axis(0)).enumerate() {
            let bias = bv[[c]];
            plane.mapv_inplace(|v| v + bias);
        }
        Ok(self.push(out, vec![x, w, b], Op::Conv2d { pad }))
    }

    pub fn maxpool2x2(&mut self, x: Var) -> Result<Var, NnError> {
        let xv = self.view3(x, "maxpool2x2")?;
        let (_, h, w) = xv.dim();
        if h % 2 != 0 || w % 2 != 0 {
            return Err(NnError::BadRank {
                op: "maxpool2x2",
                expected: "even spatial dims",
                got: self.shape(x).to_vec(),
            });
        }
        let (out, argmax) = kernels::maxpool2x2(xv);
        Ok(self.push(out.into_dyn(), vec![x], Op::MaxPool2x2 { argmax }))
    }

    /// Softmax cross-entropy of a logit vector against an integer class id;
    /// returns a 0-d scalar node.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var, NnError> {
        let flat: Vec<E> = self.nodes[logits.0].value.iter().copied().collect();
        if target >= flat.len() {
            return Err(NnError::BadTarget {
                target,
                classes: flat.len(),
            });
        }
        let lse = kernels::log_sum_exp(&flat);
        let loss = lse - flat[target].as_f64();
        let probs: Vec<E> = flat
            .iter()
            .map(|v| E::from_f64((v.as_f64() - lse).exp()))
            .collect();
        let value = ArrayD::from_elem(IxDyn(&[]), E::from_f64(loss));
        Ok(self.push(value, vec![logits], Op::CrossEntropy { probs, target }))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NnError> {
        assert!(!parts.is_empty());
        let ncols = self.view2(parts[0], "concat_rows")?.ncols();
        let mut heights = Vec::with_capacity(parts.len());
        let mut total = 0;
        for &p in parts {
            let v = self.view2(p, "concat_rows")?;
            if v.ncols() != ncols {
                return Err(NnError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            heights.push(v.nrows());
            total += v.nrows();
        }
        let mut value = ndarray::Array2::<E>::zeros((total, ncols));
        let mut r = 0;
        for &p in parts {
            let v = self.view2(p, "concat_rows")?;
            value.slice_mut(ndarray::s![r..r + v.nrows(), ..]).assign(&v);
            r += v.nrows();
        }
        Ok(self.push(value.into_dyn(), parts.to_vec(), Op::ConcatRows { heights }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NnError> {
        assert!(!parts.is_empty());
        let nrows = self.view2(parts[0], "concat_cols")?.nrows();
        let mut widths = Vec::with_capacity(parts.len());
        let mut total = 0;
        for &p in parts {
            let v = self.view2(p, "concat_cols")?;
            if v.nrows() != nrows {
                return Err(NnError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            widths.push(v.ncols());
            total += v.ncols();
        }
        let mut value = ndarray::Array2::<E>::zeros((nrows, total));
        let mut c = 0;
        for &p in parts {
            let v = self.view2(p, "concat_cols")?;
            value.slice_mut(ndarray::s![.., c..c + v.ncols()]).assign(&v);
            c += v.ncols();
        }
        Ok(self.push(value.into_dyn(), parts.to_vec(), Op::ConcatCols { widths }))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var, NnError> {
        let av = self.view2(a, "slice_cols")?;
        if start + len > av.ncols() {
            return Err(NnError::BadRank {
                op: "slice_cols",
                expected: "column range within bounds",
                got: self.shape(a).to_vec(),
            });
        }
        let value = av.slice(ndarray::s![.., start..start + len]).to_owned();
        Ok(self.push(value.into_dyn(), vec![a], Op::SliceCols { start }))
    }

    /// Select one row of a 2-d node as a `[1, n]` node.
    pub fn row(&mut self, a: Var, index: usize) -> Result<Var, NnError> {
        let av = self.view2(a, "row")?;
        if index >= av.nrows() {
            return Err(NnError::BadRank {
                op: "row",
                expected: "row index within bounds",
                got: self.shape(a).to_vec(),
            });
        }
        let value = av.slice(ndarray::s![index..index + 1, ..]).to_owned();
        Ok(self.push(value.into_dyn(), vec![a], Op::Row { index }))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, NnError> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[a.0].value.len() {
            return Err(NnError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(a).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let value = self.nodes[a.0]
            .value
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(shape))
            .unwrap();
        Ok(self.push(value, vec![a], Op::Reshape))
    }

    /// `x·w + b` for `x [m,in]`, `w [in,out]`, `b [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, NnError> {
        let xw = self.matmul(x, w)?;
        self.add_bias(xw, b)
    }

    // ---- reverse pass ----

    /// Backpropagate from a scalar loss; releases the graph.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<E>, NnError> {
        if self.released {
            return Err(NnError::GraphReleased);
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(NnError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut slots: Vec<Option<ArrayD<E>>> = (0..self.nodes.len()).map(|_| None).collect();
        slots[loss.0] = Some(ArrayD::from_elem(
            self.nodes[loss.0].value.raw_dim(),
            E::one(),
        ));

        for id in (0..=loss.0).rev() {
            let Some(grad) = slots[id].take() else {
                continue;
            };
            self.step_back(id, &grad, &mut slots);
            // Leaf gradients go back into their slot; interior ones are dropped.
            if matches!(self.nodes[id].op, Op::Leaf { .. }) {
                slots[id] = Some(grad);
            }
        }

        self.released = true;
        self.nodes.clear();
        Ok(Gradients { slots })
    }

    fn accumulate(&self, slots: &mut [Option<ArrayD<E>>], v: Var, delta: ArrayD<E>) {
        if let Op::Leaf { trainable: false } = self.nodes[v.0].op {
            return;
        }
        match &mut slots[v.0] {
            Some(g) => *g += &delta,
            slot @ None => *slot = Some(delta),
        }
    }

    fn step_back(&self, id: usize, grad: &ArrayD<E>, slots: &mut [Option<ArrayD<E>>]) {
        let node = &self.nodes[id];
        let parents = &node.parents;
        match &node.op {
            Op::Leaf { .. } => {}
            Op::Add => {
                self.accumulate(slots, parents[0], grad.clone());
                self.accumulate(slots, parents[1], grad.clone());
            }
            Op::Mul => {
                let a = &self.nodes[parents[0].0].value;
                let b = &self.nodes[parents[1].0].value;
                self.accumulate(slots, parents[0], grad * &**b);
                self.accumulate(slots, parents[1], grad * &**a);
            }
            Op::AddBias => {
                let g2 = grad.view().into_dimensionality::<Ix2>().unwrap();
                let mut db = vec![0.0f64; g2.ncols()];
                for row in g2.rows() {
                    for (j, v) in row.iter().enumerate() {
                        db[j] += v.as_f64();
                    }
                }
                let db = ArrayD::from_shape_vec(
                    IxDyn(&[g2.ncols()]),
                    db.into_iter().map(E::from_f64).collect(),
                )
                .unwrap();
                self.accumulate(slots, parents[0], grad.clone());
                self.accumulate(slots, parents[1], db);
            }
            Op::Scale(factor) => {
                let f = E::from_f64(*factor);
                self.accumulate(slots, parents[0], grad.mapv(|v| v * f));
            }
            Op::Sum => {
                let g = grad.iter().next().copied().unwrap();
                let shape = self.nodes[parents[0].0].value.raw_dim();
                self.accumulate(slots, parents[0], ArrayD::from_elem(shape, g));
            }
            Op::MatMul { ta, tb } => {
                let g2 = grad.view().into_dimensionality::<Ix2>().unwrap();
                let av = self.nodes[parents[0].0]
                    .value
                    .view()
                    .into_dimensionality::<Ix2>()
                    .unwrap();
                let bv = self.nodes[parents[1].0]
                    .value
                    .view()
                    .into_dimensionality::<Ix2>()
                    .unwrap();
                let da_eff = kernels::matmul(g2.view(), false, bv, !tb);
                let db_eff = kernels::matmul(av, !ta, g2.view(), false);
                let da = if *ta { da_eff.reversed_axes() } else { da_eff };
                let db = if *tb { db_eff.reversed_axes() } else { db_eff };
                self.accumulate(slots, parents[0], da.into_dyn());
                self.accumulate(slots, parents[1], db.into_dyn());
            }
            Op::Relu => {
                let x = &self.nodes[parents[0].0].value;
                let mut dx = grad.clone();
                ndarray::Zip::from(&mut dx).and(&**x).for_each(|g, &xv| {
                    if xv <= E::zero() {
                        *g = E::zero();
                    }
                });
                self.accumulate(slots, parents[0], dx);
            }
            Op::Gelu => {
                let x = &self.nodes[parents[0].0].value;
                let mut dx = grad.clone();
                ndarray::Zip::from(&mut dx).and(&**x).for_each(|g, &xv| {
                    *g = *g * kernels::gelu_derivative(xv);
                });
                self.accumulate(slots, parents[0], dx);
            }
            Op::SoftmaxRows => {
                let y = node.value.view().into_dimensionality::<Ix2>().unwrap();
                let g2 = grad.view().into_dimensionality::<Ix2>().unwrap();
                let mut dx = ndarray::Array2::<E>::zeros(y.raw_dim());
                for ((yrow, grow), mut drow) in
                    y.rows().into_iter().zip(g2.rows()).zip(dx.rows_mut())
                {
                    let dot: f64 = yrow
                        .iter()
                        .zip(grow.iter())
                        .map(|(a, b)| a.as_f64() * b.as_f64())
                        .sum();
                    for ((d, &yv), &gv) in drow.iter_mut().zip(yrow.iter()).zip(grow.iter()) {
                        *d = E::from_f64(yv.as_f64() * (gv.as_f64() - dot));
                    }
                }
                self.accumulate(slots, parents[0], dx.into_dyn());
            }
            Op::LayerNorm { eps } => {
                let xv = self.nodes[parents[0].0]
                    .value
                    .view()
                    .into_dimensionality::<Ix2>()
                    .unwrap();
                let gammav = &self.nodes[parents[1].0].value;
                let g2 = grad.view().into_dimensionality::<Ix2>().unwrap();
                let (means, inv_stds) = kernels::layernorm_stats(xv, *eps);
                let n = xv.ncols();
                let mut dx = ndarray::Array2::<E>::zeros(xv.raw_dim());
                let mut dgamma = vec![0.0f64; n];
                let mut dbeta = vec![0.0f64; n];
                for i in 0..xv.nrows() {
                    let mut mean_gy = 0.0f64;
                    let mut mean_gyx = 0.0f64;
                    for j in 0..n {
                        let xhat = (xv[[i, j]].as_f64() - means[i]) * inv_stds[i];
                        let g = g2[[i, j]].as_f64();
                        let gy = g * gammav[[j]].as_f64();
                        mean_gy += gy;
                        mean_gyx += gy * xhat;
                        dgamma[j] += g * xhat;
                        dbeta[j] += g;
                    }
                    mean_gy /= n as f64;
                    mean_gyx /= n as f64;
                    for j in 0..n {
                        let xhat = (xv[[i, j]].as_f64() - means[i]) * inv_stds[i];
                        let gy = g2[[i, j]].as_f64() * gammav[[j]].as_f64();
                        dx[[i, j]] =
                            E::from_f64((gy - mean_gy - xhat * mean_gyx) * inv_stds[i]);
                    }
                }
                let to_arr = |v: Vec<f64>| {
                    ArrayD::from_shape_vec(IxDyn(&[n]), v.into_iter().map(E::from_f64).collect())
                        .unwrap()
                };
                self.accumulate(slots, parents[0], dx.into_dyn());
                self.accumulate(slots, parents[1], to_arr(dgamma));
                self.accumulate(slots, parents[2], to_arr(dbeta));
            }
            Op::Conv2d { pad } => {
                let xv = self.nodes[parents[0].0]
                    .value
                    .view()
                    .into_dimensionality::<Ix3>()
                    .unwrap();
                let wshape = self.nodes[parents[1].0].value.shape().to_vec();
                let (co, ci, kh, kw) = (wshape[0], wshape[1], wshape[2], wshape[3]);
                let (_, h, w) = xv.dim();
                let g3 = grad.view().into_dimensionality::<Ix3>().unwrap();
                // [co, h, w] -> [co, hw] -> transpose [hw, co]
                let gmat = g3
                    .into_shape_with_order((co, h * w))
                    .unwrap()
                    .reversed_axes()
                    .as_standard_layout()
                    .into_owned();
                let cols = kernels::im2col(xv, kh, kw, *pad);
                let dwmat = kernels::matmul(cols.view(), true, gmat.view(), false); // [ckk, co]
                let dw = dwmat
                    .reversed_axes()
                    .as_standard_layout()
                    .into_owned()
                    .into_shape_with_order(IxDyn(&[co, ci, kh, kw]))
                    .unwrap();
                let mut db = vec![0.0f64; co];
                let g3v = grad.view().into_dimensionality::<Ix3>().unwrap();
                for (c, plane) in g3v.axis_iter(Axis(0)).enumerate() {
                    db[c] = plane.iter().map(|v| v.as_f64()).sum();
                }
                let db = ArrayD::from_shape_vec(
                    IxDyn(&[co]),
                    db.into_iter().map(E::from_f64).collect(),
                )
                .unwrap();
                let wmat = self.nodes[parents[1].0]
                    .value
                    .view()
                    .into_shape_with_order(IxDyn(&[co, ci * kh * kw]))
                    .unwrap()
                    .into_dimensionality::<Ix2>()
                    .unwrap()
                    .to_owned();
                let dcols = kernels::matmul(gmat.view(), false, wmat.view(), false); // [hw, ckk]
                let dx = kernels::col2im(dcols.view(), ci, h, w, kh, kw, *pad);
                self.accumulate(slots, parents[0], dx.into_dyn());
                self.accumulate(slots, parents[1], dw);
                self.accumulate(slots, parents[2], db);
            }
            Op::MaxPool2x2 { argmax } => {
                let xshape = self.nodes[parents[0].0].value.raw_dim();
                let mut dx = ArrayD::<E>::zeros(xshape);
                let dx_flat = dx.as_slice_mut().unwrap();
                for (g, &src) in grad.iter().zip(argmax.iter()) {
                    dx_flat[src as usize] = dx_flat[src as usize] + *g;
                }
                self.accumulate(slots, parents[0], dx);
            }
            Op::CrossEntropy { probs, target } => {
                let g = grad.iter().next().unwrap().as_f64();
                let shape = self.nodes[parents[0].0].value.raw_dim();
                let mut dl: Vec<E> = probs
                    .iter()
                    .map(|p| E::from_f64(p.as_f64() * g))
                    .collect();
                dl[*target] = E::from_f64((probs[*target].as_f64() - 1.0) * g);
                self.accumulate(
                    slots,
                    parents[0],
                    ArrayD::from_shape_vec(shape, dl).unwrap(),
                );
            }
            Op::ConcatRows { heights } => {
                let g2 = grad.view().into_dimensionality::<Ix2>().unwrap();
                let mut r = 0;
                for (k, &h) in heights.iter().enumerate() {
                    let piece = g2.slice(ndarray::s![r..r + h, ..]).to_owned();
                    self.accumulate(slots, parents[k], piece.into_dyn());
                    r += h;
                }
            }
            Op::ConcatCols { widths } => {
                let g2 = grad.view().into_dimensionality::<Ix2>().unwrap();
                let mut c = 0;
                for (k, &w) in widths.iter().enumerate() {
                    let piece = g2.slice(ndarray::s![.., c..c + w]).to_owned();
                    self.accumulate(slots, parents[k], piece.into_dyn());
                    c += w;
                }
            }
            Op::SliceCols { start } => {
                let g2 = grad.view().into_dimensionality::<Ix2>().unwrap();
                let pshape = self.nodes[parents[0].0].value.shape().to_vec();
                let mut dx = ndarray::Array2::<E>::zeros((pshape[0], pshape[1]));
                dx.slice_mut(ndarray::s![.., *start..*start + g2.ncols()])
                    .assign(&g2);
                self.accumulate(slots, parents[0], dx.into_dyn());
            }
            Op::Row { index } => {
                let g2 = grad.view().into_dimensionality::<Ix2>().unwrap();
                let pshape = self.nodes[parents[0].0].value.shape().to_vec();
                let mut dx = ndarray::Array2::<E>::zeros((pshape[0], pshape[1]));
                dx.slice_mut(ndarray::s![*index..*index + 1, ..]).assign(&g2);
                self.accumulate(slots, parents[0], dx.into_dyn());
            }
            Op::Reshape => {
                let pshape = self.nodes[parents[0].0].value.shape().to_vec();
                let dg = grad
                    .as_standard_layout()
                    .into_owned()
                    .into_shape_with_order(IxDyn(&pshape))
                    .unwrap();
                self.accumulate(slots, parents[0], dg);
            }
        }
    }
}

/// Convenience: a finite check used by tests and debug paths.
pub fn all_finite<E: Element>(x: &ArrayViewD<E>) -> bool {
    x.iter().all(|v| v.is_finite())
}
