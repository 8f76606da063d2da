//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records one forward pass as a flat tape of nodes; node ids are
//! already a topological order, so the backward sweep is a single reverse
//! walk. Each op pushes a closure computing the gradients of its parents from
//! the gradient of its output. Only nodes reachable from a gradient-requiring
//! leaf participate in the sweep, so a forward pass over a frozen backbone
//! with a trainable head backpropagates through the head alone.

use std::cell::{Ref, RefCell};

use crate::diffconv::{self, DiffConvKind};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{matmul_nn_acc, matmul_nt_acc, matmul_tn_acc, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Context handed to a backward closure.
pub struct BackCtx<'a, T: Scalar> {
    pub grad_out: &'a Tensor<T>,
    pub out: &'a Tensor<T>,
    pub parents: &'a [&'a Tensor<T>],
    /// Which parent gradients are actually needed.
    pub needs: &'a [bool],
}

type BackwardFn<T> = Box<dyn Fn(&BackCtx<'_, T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T: Scalar> {
    value: Tensor<T>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    needs_grad: bool,
}

/// One recorded forward pass.
pub struct Graph<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
        }
    }

    fn push(
        &self,
        value: Tensor<T>,
        parents: Vec<usize>,
        backward: Option<BackwardFn<T>>,
    ) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let needs_grad = parents.iter().any(|&p| nodes[p].needs_grad);
        nodes.push(Node {
            value,
            parents,
            backward: if needs_grad { backward } else { None },
            needs_grad,
        });
        Var(nodes.len() - 1)
    }

    /// Insert a leaf. `requires_grad` marks it as a gradient sink.
    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            needs_grad: requires_grad,
        });
        Var(nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn value_clone(&self, v: Var) -> Tensor<T> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn scalar_value(&self, v: Var) -> T {
        self.nodes.borrow()[v.0].value.data()[0]
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    // ── elementwise and linear ops ───────────────────────────────────

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            nodes[a.0].value.add(&nodes[b.0].value)?
        };
        Ok(self.push(
            value,
            vec![a.0, b.0],
            Some(Box::new(|ctx: &BackCtx<'_, T>| {
                vec![
                    ctx.needs[0].then(|| ctx.grad_out.clone()),
                    ctx.needs[1].then(|| ctx.grad_out.clone()),
                ]
            })),
        ))
    }

    pub fn scale_const(&self, x: Var, c: f64) -> Var {
        let cc = T::from_f64(c);
        let value = self.nodes.borrow()[x.0].value.scale(cc);
        self.push(
            value,
            vec![x.0],
            Some(Box::new(move |ctx: &BackCtx<'_, T>| {
                vec![ctx.needs[0].then(|| ctx.grad_out.scale(cc))]
            })),
        )
    }

    /// Elementwise product with a constant tensor (no gradient to the constant).
    pub fn mul_const(&self, x: Var, c: Tensor<T>) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            if xv.shape() != c.shape() {
                return Err(Error::dim(format!(
                    "mul_const: {:?} vs {:?}",
                    xv.shape(),
                    c.shape()
                )));
            }
            let data = xv.data().iter().zip(c.data()).map(|(&a, &b)| a * b).collect();
            Tensor::new(xv.shape().to_vec(), data)?
        };
        Ok(self.push(
            value,
            vec![x.0],
            Some(Box::new(move |ctx: &BackCtx<'_, T>| {
                vec![ctx.needs[0].then(|| {
                    let data = ctx
                        .grad_out
                        .data()
                        .iter()
                        .zip(c.data())
                        .map(|(&g, &cv)| g * cv)
                        .collect();
                    Tensor::new(ctx.grad_out.shape().to_vec(), data).unwrap()
                })]
            })),
        ))
    }

    /// Multiply a tensor by a length-1 scalar variable (gate weight scaling).
    pub fn scale_by(&self, x: Var, s: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let sv = &nodes[s.0].value;
            if sv.len() != 1 {
                return Err(Error::dim(format!(
                    "scale_by expects a length-1 scalar, got {:?}",
                    sv.shape()
                )));
            }
            nodes[x.0].value.scale(sv.data()[0])
        };
        Ok(self.push(
            value,
            vec![x.0, s.0],
            Some(Box::new(|ctx: &BackCtx<'_, T>| {
                let s = ctx.parents[1].data()[0];
                let x = ctx.parents[0];
                vec![
                    ctx.needs[0].then(|| ctx.grad_out.scale(s)),
                    ctx.needs[1].then(|| {
                        let dot = ctx
                            .grad_out
                            .data()
                            .iter()
                            .zip(x.data())
                            .fold(T::zero(), |acc, (&g, &xv)| acc + g * xv);
                        Tensor::scalar(dot)
                    }),
                ]
            })),
        ))
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (value, dims) = {
            let nodes = self.nodes.borrow();
            let av = &nodes[a.0].value;
            let bv = &nodes[b.0].value;
            (crate::tensor::matmul(av, bv)?, (av.rows(), av.cols(), bv.cols()))
        };
        let (m, k, n) = dims;
        Ok(self.push(
            value,
            vec![a.0, b.0],
            Some(Box::new(move |ctx: &BackCtx<'_, T>| {
                let g = ctx.grad_out.data();
                let av = ctx.parents[0].data();
                let bv = ctx.parents[1].data();
                let da = ctx.needs[0].then(|| {
                    let mut d = vec![T::zero(); m * k];
                    matmul_nt_acc(g, bv, &mut d, m, n, k);
                    Tensor::new(vec![m, k], d).unwrap()
                });
                let db = ctx.needs[1].then(|| {
                    let mut d = vec![T::zero(); k * n];
                    matmul_tn_acc(av, g, &mut d, m, k, n);
                    Tensor::new(vec![k, n], d).unwrap()
                });
                vec![da, db]
            })),
        ))
    }

    pub fn transpose(&self, x: Var) -> Result<Var> {
        let value = self.nodes.borrow()[x.0].value.transpose2()?;
        Ok(self.push(
            value,
            vec![x.0],
            Some(Box::new(|ctx: &BackCtx<'_, T>| {
                vec![ctx.needs[0].then(|| ctx.grad_out.transpose2().unwrap())]
            })),
        ))
    }

    pub fn reshape(&self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let old_shape = self.nodes.borrow()[x.0].value.shape().to_vec();
        let value = self.nodes.borrow()[x.0].value.clone().reshaped(shape)?;
        Ok(self.push(
            value,
            vec![x.0],
            Some(Box::new(move |ctx: &BackCtx<'_, T>| {
                vec![ctx.needs[0]
                    .then(|| ctx.grad_out.clone().reshaped(old_shape.clone()).unwrap())]
            })),
        ))
    }

    // ── row/column structure ─────────────────────────────────────────

    pub fn slice_rows(&self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (value, rows, cols) = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            let (r, c) = (xv.rows(), xv.cols());
            if start + len > r {
                return Err(Error::dim(format!(
                    "slice_rows {start}..{} out of {r}",
                    start + len
                )));
            }
            let data = xv.data()[start * c..(start + len) * c].to_vec();
            (Tensor::new(vec![len, c], data)?, r, c)
        };
        Ok(self.push(
            value,
            vec![x.0],
            Some(Box::new(move |ctx: &BackCtx<'_, T>| {
                vec![ctx.needs[0].then(|| {
                    let mut d = vec![T::zero(); rows * cols];
                    d[start * cols..(start + len) * cols].copy_from_slice(ctx.grad_out.data());
                    Tensor::new(vec![rows, cols], d).unwrap()
                })]
            })),
        ))
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::arg("concat_rows of nothing".to_string()));
        }
        let (value, row_counts, cols) = {
            let nodes = self.nodes.borrow();
            let cols = nodes[parts[0].0].value.cols();
            let mut data = Vec::new();
            let mut row_counts = Vec::with_capacity(parts.len());
            for p in parts {
                let v = &nodes[p.0].value;
                if v.cols() != cols {
                    return Err(Error::dim("concat_rows: column mismatch".to_string()));
                }
                row_counts.push(v.rows());
                data.extend_from_slice(v.data());
            }
            let total: usize = row_counts.iter().sum();
            (Tensor::new(vec![total, cols], data)?, row_counts, cols)
        };
        Ok(self.push(
            value,
            parts.iter().map(|v| v.0).collect(),
            Some(Box::new(move |ctx: &BackCtx<'_, T>| {
                let g = ctx.grad_out.data();
                let mut offset = 0;
                row_counts
                    .iter()
                    .enumerate()
                    .map(|(i, &r)| {
                        let part = ctx.needs[i].then(|| {
                            Tensor::new(
                                vec![r, cols],
                                g[offset..offset + r * cols].to_vec(),
                            )
                            .unwrap()
                        });
                        offset += r * cols;
                        part
                    })
                    .collect()
            })),
        ))
    }

    pub fn slice_cols(&self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (value, rows, cols) = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            let (r, c) = (xv.rows(), xv.cols());
            if start + len > c {
                return Err(Error::dim(format!(
                    "slice_cols {start}..{} out of {c}",
                    start + len
                )));
            }
            let mut data = Vec::with_capacity(r * len);
            for i in 0..r {
                data.extend_from_slice(&xv.data()[i * c + start..i * c + start + len]);
            }
            (Tensor::new(vec![r, len], data)?, r, c)
        };
        Ok(self.push(
            value,
            vec![x.0],
            Some(Box::new(move |ctx: &BackCtx<'_, T>| {
                vec![ctx.needs[0].then(|| {
                    let mut d = vec![T::zero(); rows * cols];
                    let g = ctx.grad_out.data();
                    for i in 0..rows {
                        d[i * cols + start..i * cols + start + len]
                            .copy_from_slice(&g[i * len..(i + 1) * len]);
                    }
                    Tensor::new(vec![rows, cols], d).unwrap()
                })]
            })),
        ))
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::arg("concat_cols of nothing".to_string()));
        }
        let (value, widths, rows) = {
            let nodes = self.nodes.borrow();
            let rows = nodes[parts[0].0].value.rows();
            let mut widths = Vec::with_capacity(parts.len());
            for p in parts {
                let v = &nodes[p.0].value;
                if v.rows() != rows {
                    return Err(Error::dim("concat_cols: row mismatch".to_string()));
                }
                widths.push(v.cols());
            }
            let total: usize = widths.iter().sum();
            let mut data = vec![T::zero(); rows * total];
            let mut offset = 0;
            for (p, &w) in parts.iter().zip(&widths) {
                let v = &nodes[p.0].value;
                for i in 0..rows {
                    data[i * total + offset..i * total + offset + w]
                        .copy_from_slice(&v.data()[i * w..(i + 1) * w]);
                }
                offset += w;
            }
            (Tensor::new(vec![rows, total], data)?, widths, rows)
        };
        Ok(self.push(
            value,
            parts.iter().map(|v| v.0).collect(),
            Some(Box::new(move |ctx: &BackCtx<'_, T>| {
                let total: usize = widths.iter().sum();
                let g = ctx.grad_out.data();
                let mut offset = 0;
                widths
                    .iter()
                    .enumerate()
                    .map(|(i, &w)| {
                        let part = ctx.needs[i].then(|| {
                            let mut d = vec![T::zero(); rows * w];
                            for r in 0..rows {
                                d[r * w..(r + 1) * w].copy_from_slice(
                                    &g[r * total + offset..r * total + offset + w],
                                );
                            }
                            Tensor::new(vec![rows, w], d).unwrap()
                        });
                        offset += w;
                        part
                    })
                    .collect()
            })),
        ))
    }

    /// Select columns of a single-row tensor by index.
    pub fn gather_cols(&self, x: Var, indices: Vec<usize>) -> Result<Var> {
        let (value, n) = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            if xv.rows() != 1 {
                return Err(Error::dim("gather_cols expects a single row".to_string()));
            }
            let n = xv.cols();
            if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
                return Err(Error::arg(format!("gather index {bad} out of {n}")));
            }
            let data: Vec<T> = indices.iter().map(|&i| xv.data()[i]).collect();
            (Tensor::new(vec![1, indices.len()], data)?, n)
        };
        Ok(self.push(
            value,
            vec![x.0],
            Some(Box::new(move |ctx: &BackCtx<'_, T>| {
                vec![ctx.needs[0].then(|| {
                    let mut d = vec![T::zero(); n];
                    for (slot, &i) in indices.iter().enumerate() {
                        d[i] = d[i] + ctx.grad_out.data()[slot];
                    }
                    Tensor::new(vec![1, n], d).unwrap()
                })]
            })),
        ))
    }

    /// Spread a single-row tensor into a wider zero row at the given indices.
    pub fn scatter_cols(&self, x: Var, indices: Vec<usize>, width: usize) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            if xv.rows() != 1 || xv.cols() != indices.len() {
                return Err(Error::dim(format!(
                    "scatter_cols: value {:?} vs {} indices",
                    xv.shape(),
                    indices.len()
                )));
            }
            if let Some(&bad) = indices.iter().find(|&&i| i >= width) {
                return Err(Error::arg(format!("scatter index {bad} out of {width}")));
            }
            let mut d = vec![T::zero(); width];
            for (slot, &i) in indices.iter().enumerate() {
                d[i] = xv.data()[slot];
            }
            Tensor::new(vec![1, width], d)?
        };
        Ok(self.push(
            value,
            vec![x.0],
            Some(Box::new(move |ctx: &BackCtx<'_, T>| {
                vec![ctx.needs[0].then(|| {
                    let data: Vec<T> =
                        indices.iter().map(|&i| ctx.grad_out.data()[i]).collect();
                    Tensor::new(vec![1, indices.len()], data).unwrap()
                })]
            })),
        ))
    }

    // ── nonlinearities ───────────────────────────────────────────────

    /// Softmax along `axis`, numerically stabilized by max subtraction.
    pub fn softmax(&self, x: Var, axis: usize) -> Result<Var> {
        let (value, lanes) = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            let lanes = Lanes::new(xv.shape(), axis)?;
            let mut out = xv.data().to_vec();
            lanes.for_each(|idx| {
                let mx = idx
                    .iter()
                    .map(|&i| out[i])
                    .fold(T::neg_infinity(), |a, b| if b > a { b } else { a });
                let mut sum = T::zero();
                for &i in idx {
                    let e = (out[i] - mx).exp();
                    out[i] = e;
                    sum = sum + e;
                }
                for &i in idx {
                    out[i] = out[i] / sum;
                }
            });
            (Tensor::new(xv.shape().to_vec(), out)?, lanes)
        };
        Ok(self.push(
            value,
            vec![x.0],
            Some(Box::new(move |ctx: &BackCtx<'_, T>| {
                vec![ctx.needs[0].then(|| {
                    let y = ctx.out.data();
                    let g = ctx.grad_out.data();
                    let mut d = vec![T::zero(); y.len()];
                    lanes.for_each(|idx| {
                        let dot = idx
                            .iter()
                            .fold(T::zero(), |acc, &i| acc + g[i] * y[i]);
                        for &i in idx {
                            d[i] = y[i] * (g[i] - dot);
                        }
                    });
                    Tensor::new(ctx.out.shape().to_vec(), d).unwrap()
                })]
            })),
        ))
    }

    /// Per-row layer normalization over the last axis with affine params.
    pub fn layer_norm(&self, x: Var, scale: Var, shift: Var, eps: f64) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            let sv = &nodes[scale.0].value;
            let bv = &nodes[shift.0].value;
            let d = xv.cols();
            if sv.len() != d || bv.len() != d {
                return Err(Error::dim(format!(
                    "layer_norm: x cols {} vs scale {} / shift {}",
                    d,
                    sv.len(),
                    bv.len()
                )));
            }
            let mut out = vec![T::zero(); xv.len()];
            let epst = T::from_f64(eps);
            for r in 0..xv.len() / d {
                let row = &xv.data()[r * d..(r + 1) * d];
                let (mu, var) = row_stats(row);
                let inv = T::one() / (var + epst).sqrt();
                for j in 0..d {
                    out[r * d + j] = sv.data()[j] * ((row[j] - mu) * inv) + bv.data()[j];
                }
            }
            Tensor::new(xv.shape().to_vec(), out)?
        };
        let epst = T::from_f64(eps);
        Ok(self.push(
            value,
            vec![x.0, scale.0, shift.0],
            Some(Box::new(move |ctx: &BackCtx<'_, T>| {
                let xv = ctx.parents[0];
                let sv = ctx.parents[1].data();
                let d = xv.cols();
                let rows = xv.len() / d;
                let g = ctx.grad_out.data();
                let mut dx = ctx.needs[0].then(|| vec![T::zero(); xv.len()]);
                let mut ds = ctx.needs[1].then(|| vec![T::zero(); d]);
                let mut db = ctx.needs[2].then(|| vec![T::zero(); d]);
                let inv_d = T::one() / T::from_f64(d as f64);
                for r in 0..rows {
                    let row = &xv.data()[r * d..(r + 1) * d];
                    let grow = &g[r * d..(r + 1) * d];
                    let (mu, var) = row_stats(row);
                    let inv = T::one() / (var + epst).sqrt();
                    // xhat and the two reduction terms of the standard backward
                    let mut mean_h = T::zero();
                    let mut mean_hx = T::zero();
                    for j in 0..d {
                        let xhat = (row[j] - mu) * inv;
                        let h = grow[j] * sv[j];
                        mean_h = mean_h + h;
                        mean_hx = mean_hx + h * xhat;
                        if let Some(ds) = ds.as_mut() {
                            ds[j] = ds[j] + grow[j] * xhat;
                        }
                        if let Some(db) = db.as_mut() {
                            db[j] = db[j] + grow[j];
                        }
                    }
                    mean_h = mean_h * inv_d;
                    mean_hx = mean_hx * inv_d;
                    if let Some(dx) = dx.as_mut() {
                        for j in 0..d {
                            let xhat = (row[j] - mu) * inv;
                            let h = grow[j] * sv[j];
                            dx[r * d + j] = inv * (h - mean_h - xhat * mean_hx);
                        }
                    }
                }
                let s_shape = ctx.parents[1].shape().to_vec();
                let b_shape = ctx.parents[2].shape().to_vec();
                vec![
                    dx.map(|v| Tensor::new(xv.shape().to_vec(), v).unwrap()),
                    ds.map(|v| Tensor::new(s_shape, v).unwrap()),
                    db.map(|v| Tensor::new(b_shape, v).unwrap()),
                ]
            })),
        ))
    }

    /// Tanh-approximation GELU:
    /// `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
    pub fn gelu(&self, x: Var) -> Var {
        let value = self.nodes.borrow()[x.0].value.map(gelu_scalar);
        self.push(
            value,
            vec![x.0],
            Some(Box::new(|ctx: &BackCtx<'_, T>| {
                vec![ctx.needs[0].then(|| {
                    let data = ctx
                        .parents[0]
                        .data()
                        .iter()
                        .zip(ctx.grad_out.data())
                        .map(|(&x, &g)| g * gelu_deriv(x))
                        .collect();
                    Tensor::new(ctx.parents[0].shape().to_vec(), data).unwrap()
                })]
            })),
        )
    }

    pub fn softplus(&self, x: Var) -> Var {
        let value = self.nodes.borrow()[x.0].value.map(softplus_scalar);
        self.push(
            value,
            vec![x.0],
            Some(Box::new(|ctx: &BackCtx<'_, T>| {
                vec![ctx.needs[0].then(|| {
                    let data = ctx
                        .parents[0]
                        .data()
                        .iter()
                        .zip(ctx.grad_out.data())
                        .map(|(&x, &g)| g * sigmoid_scalar(x))
                        .collect();
                    Tensor::new(ctx.parents[0].shape().to_vec(), data).unwrap()
                })]
            })),
        )
    }

    // ── reductions ───────────────────────────────────────────────────

    /// Column means of a 2-D tensor: [N×D] → [1×D].
    pub fn mean_rows(&self, x: Var) -> Result<Var> {
        let (value, rows, cols) = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            if xv.shape().len() != 2 {
                return Err(Error::dim(format!("mean_rows needs rank 2: {:?}", xv.shape())));
            }
            let (r, c) = (xv.rows(), xv.cols());
            let inv = T::one() / T::from_f64(r as f64);
            let mut out = vec![T::zero(); c];
            for i in 0..r {
                for (o, &v) in out.iter_mut().zip(xv.row(i)) {
                    *o = *o + v;
                }
            }
            for o in &mut out {
                *o = *o * inv;
            }
            (Tensor::new(vec![1, c], out)?, r, c)
        };
        Ok(self.push(
            value,
            vec![x.0],
            Some(Box::new(move |ctx: &BackCtx<'_, T>| {
                vec![ctx.needs[0].then(|| {
                    let inv = T::one() / T::from_f64(rows as f64);
                    let g = ctx.grad_out.data();
                    let mut d = vec![T::zero(); rows * cols];
                    for i in 0..rows {
                        for j in 0..cols {
                            d[i * cols + j] = g[j] * inv;
                        }
                    }
                    Tensor::new(vec![rows, cols], d).unwrap()
                })]
            })),
        ))
    }

    pub fn sum_all(&self, x: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let s = nodes[x.0]
                .value
                .data()
                .iter()
                .fold(T::zero(), |a, &b| a + b);
            Tensor::scalar(s)
        };
        self.push(
            value,
            vec![x.0],
            Some(Box::new(|ctx: &BackCtx<'_, T>| {
                let g = ctx.grad_out.data()[0];
                vec![ctx.needs[0].then(|| Tensor::full(ctx.parents[0].shape(), g))]
            })),
        )
    }

    /// Cross-entropy of a single-row logit vector against a class index.
    pub fn cross_entropy(&self, logits: Var, label: usize) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let z = &nodes[logits.0].value;
            if z.rows() != 1 {
                return Err(Error::dim("cross_entropy expects one row".to_string()));
            }
            if label >= z.cols() {
                return Err(Error::arg(format!(
                    "label {label} out of {} classes",
                    z.cols()
                )));
            }
            Tensor::scalar(log_sum_exp(z.data()) - z.data()[label])
        };
        Ok(self.push(
            value,
            vec![logits.0],
            Some(Box::new(move |ctx: &BackCtx<'_, T>| {
                vec![ctx.needs[0].then(|| {
                    let z = ctx.parents[0].data();
                    let g = ctx.grad_out.data()[0];
                    let lse = log_sum_exp(z);
                    let data: Vec<T> = z
                        .iter()
                        .enumerate()
                        .map(|(j, &zj)| {
                            let p = (zj - lse).exp();
                            let ind = if j == label { T::one() } else { T::zero() };
                            g * (p - ind)
                        })
                        .collect();
                    Tensor::new(ctx.parents[0].shape().to_vec(), data).unwrap()
                })]
            })),
        ))
    }

    // ── convolution ops ──────────────────────────────────────────────

    /// Per-pixel channel map: x [C_in,H,W], w [C_out,C_in] → [C_out,H,W].
    pub fn conv1x1(&self, x: Var, w: Var) -> Result<Var> {
        let (value, dims) = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            let wv = &nodes[w.0].value;
            if xv.shape().len() != 3 || wv.shape().len() != 2 {
                return Err(Error::dim(format!(
                    "conv1x1: x {:?}, w {:?}",
                    xv.shape(),
                    wv.shape()
                )));
            }
            let (cin, h, wid) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
            let (cout, cin2) = (wv.shape()[0], wv.shape()[1]);
            if cin != cin2 {
                return Err(Error::dim(format!(
                    "conv1x1 channel mismatch: x has {cin}, w expects {cin2}"
                )));
            }
            let hw = h * wid;
            let mut out = vec![T::zero(); cout * hw];
            matmul_nn_acc(wv.data(), xv.data(), &mut out, cout, cin, hw);
            (Tensor::new(vec![cout, h, wid], out)?, (cin, cout, h, wid))
        };
        let (cin, cout, h, wid) = dims;
        Ok(self.push(
            value,
            vec![x.0, w.0],
            Some(Box::new(move |ctx: &BackCtx<'_, T>| {
                let hw = h * wid;
                let g = ctx.grad_out.data();
                let xv = ctx.parents[0].data();
                let wv = ctx.parents[1].data();
                let dx = ctx.needs[0].then(|| {
                    let mut d = vec![T::zero(); cin * hw];
                    matmul_tn_acc(wv, g, &mut d, cout, cin, hw);
                    Tensor::new(vec![cin, h, wid], d).unwrap()
                });
                let dw = ctx.needs[1].then(|| {
                    let mut d = vec![T::zero(); cout * cin];
                    matmul_nt_acc(g, xv, &mut d, cout, hw, cin);
                    Tensor::new(vec![cout, cin], d).unwrap()
                });
                vec![dx, dw]
            })),
        ))
    }

    /// Difference convolution of the given kind; see the `diffconv` module.
    pub fn diff_conv(&self, x: Var, w: Var, kind: DiffConvKind) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            diffconv::forward(&nodes[x.0].value, &nodes[w.0].value, kind)?
        };
        Ok(self.push(
            value,
            vec![x.0, w.0],
            Some(Box::new(move |ctx: &BackCtx<'_, T>| {
                let (dx, dw) = diffconv::backward(
                    ctx.parents[0],
                    ctx.parents[1],
                    ctx.grad_out,
                    kind,
                    ctx.needs[0],
                    ctx.needs[1],
                );
                vec![dx, dw]
            })),
        ))
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse sweep from the given seed gradients.
    pub fn backward(&self, seeds: Vec<(Var, Tensor<T>)>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        for (v, seed) in seeds {
            if nodes[v.0].value.shape() != seed.shape() {
                return Err(Error::dim(format!(
                    "seed shape {:?} vs node shape {:?}",
                    seed.shape(),
                    nodes[v.0].value.shape()
                )));
            }
            match &mut grads[v.0] {
                Some(g) => g.add_assign(&seed),
                slot => *slot = Some(seed),
            }
        }
        for id in (0..nodes.len()).rev() {
            let node = &nodes[id];
            let (Some(backward), Some(grad_out)) = (&node.backward, grads[id].as_ref()) else {
                continue;
            };
            let parent_values: Vec<&Tensor<T>> =
                node.parents.iter().map(|&p| &nodes[p].value).collect();
            let needs: Vec<bool> = node.parents.iter().map(|&p| nodes[p].needs_grad).collect();
            let ctx = BackCtx {
                grad_out,
                out: &node.value,
                parents: &parent_values,
                needs: &needs,
            };
            let parent_grads = (backward)(&ctx);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                if let Some(pg) = pg {
                    match &mut grads[p] {
                        Some(g) => g.add_assign(&pg),
                        slot => *slot = Some(pg),
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}

// ── lane iteration for axis-wise ops ─────────────────────────────────

#[derive(Clone)]
struct Lanes {
    axis_len: usize,
    axis_stride: usize,
    outer: usize,
    inner: usize,
}

impl Lanes {
    fn new(shape: &[usize], axis: usize) -> Result<Self> {
        if axis >= shape.len() {
            return Err(Error::arg(format!(
                "axis {axis} invalid for shape {:?}",
                shape
            )));
        }
        let axis_len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        Ok(Lanes {
            axis_len,
            axis_stride: inner,
            outer,
            inner,
        })
    }

    fn for_each(&self, mut f: impl FnMut(&[usize])) {
        let mut idx = vec![0usize; self.axis_len];
        for o in 0..self.outer {
            for i in 0..self.inner {
                let base = o * self.axis_len * self.inner + i;
                for (a, slot) in idx.iter_mut().enumerate() {
                    *slot = base + a * self.axis_stride;
                }
                f(&idx);
            }
        }
    }
}

// ── scalar helpers ───────────────────────────────────────────────────

fn row_stats<T: Scalar>(row: &[T]) -> (T, T) {
    let inv = T::one() / T::from_f64(row.len() as f64);
    let mut mu = T::zero();
    for &v in row {
        mu = mu + v;
    }
    mu = mu * inv;
    let mut var = T::zero();
    for &v in row {
        let d = v - mu;
        var = var + d * d;
    }
    (mu, var * inv)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

pub fn gelu_scalar<T: Scalar>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (T::one() + u.tanh())
}

fn gelu_deriv<T: Scalar>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let du = c * (T::one() + three * a * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

pub fn softplus_scalar<T: Scalar>(x: T) -> T {
    // max(x,0) + ln(1 + exp(-|x|)), stable for large |x|
    let m = if x > T::zero() { x } else { T::zero() };
    m + (T::one() + (-x.abs()).exp()).ln()
}

fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn log_sum_exp<T: Scalar>(z: &[T]) -> T {
    let mx = z.iter().fold(T::neg_infinity(), |a, &b| if b > a { b } else { a });
    let mut s = T::zero();
    for &v in z {
        s = s + (v - mx).exp();
    }
    mx + s.ln()
}
