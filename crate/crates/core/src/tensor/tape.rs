//! Define-by-run reverse-mode autodiff.
//!
//! A [`Tape`] records every kernel applied during one forward pass. Values
//! live on the tape (parameters are borrowed, intermediates owned). A single
//! call to [`Tape::backward`] walks the record in reverse, visits each node
//! exactly once and returns the gradients of all participating leaves; the
//! tape is cleared afterwards.

use std::borrow::Cow;

use crate::error::{Error, Result};

use super::kernels::{self, MatMut, MatRef};
use super::{Scalar, Tensor};

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A differentiable operation defined outside the tape.
///
/// Implementors own any non-differentiable context they need (e.g. detached
/// targets).
pub trait Function<T: Scalar>: Send + Sync {
    fn name(&self) -> &'static str;

    /// Computes `(shape, values)` of the output.
    fn forward(&self, inputs: &[(&[usize], &[T])]) -> Result<(Vec<usize>, Vec<T>)>;

    /// Vector-Jacobian products for each input, given the output gradient.
    fn backward(&self, inputs: &[(&[usize], &[T])], output: &[T], grad_output: &[T]) -> Vec<Option<Vec<T>>>;
}

enum Op<T: Scalar> {
    Leaf,
    MatMul { a: Var, b: Var },
    Add { a: Var, b: Var },
    AddRow { a: Var, row: Var },
    Mul { a: Var, b: Var },
    MulRow { a: Var, row: Var },
    Scale { a: Var, factor: T },
    ScaleRows { a: Var, factors: Vec<T> },
    Transpose { a: Var },
    Reshape { a: Var },
    Softmax { a: Var },
    LayerNorm { x: Var, affine: Option<(Var, Var)>, xhat: Vec<T>, rstd: Vec<T> },
    Gelu { a: Var },
    SliceCols { a: Var, start: usize },
    ConcatRows { parts: Vec<Var> },
    GatherRows { a: Var, index: Vec<usize> },
    Sum { a: Var },
    Mean { a: Var },
    Attention { qkv: Var, segments: Vec<usize>, heads: usize, probs: Vec<T> },
    Custom { inputs: Vec<Var>, func: Box<dyn Function<T>> },
}

struct Node<'a, T: Scalar> {
    shape: Vec<usize>,
    value: Cow<'a, [T]>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by one backward pass, indexed by leaf [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

pub struct Tape<'a, T: Scalar> {
    nodes: Vec<Node<'a, T>>,
    recording: bool,
    consumed: bool,
}

impl<'a, T: Scalar> Default for Tape<'a, T> {
    fn default() -> Self {
        Self::new()
    }
}

fn add_into<T: Scalar>(slot: &mut Option<Vec<T>>, g: Vec<T>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
        None => *slot = Some(g),
    }
}

impl<'a, T: Scalar> Tape<'a, T> {
    /// A recording tape.
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), recording: true, consumed: false }
    }

    /// A tape that evaluates kernels without saving anything for backward.
    /// Nothing computed on it can receive gradients.
    pub fn no_grad() -> Self {
        Tape { nodes: Vec::new(), recording: false, consumed: false }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Cow<'a, [T]>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let requires_grad = requires_grad && self.recording;
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node { shape, value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Borrows a tensor as a leaf. It participates in backward iff
    /// `t.requires_grad` and the tape is recording.
    pub fn leaf(&mut self, t: &'a Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), Cow::Borrowed(t.data()), Op::Leaf, t.requires_grad)
    }

    /// An owned value that never receives gradients.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, Cow::Owned(t.into_data()), Op::Leaf, false)
    }

    /// An owned leaf that may receive gradients.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        let shape = t.shape().to_vec();
        let rg = t.requires_grad;
        self.push(shape, Cow::Owned(t.into_data()), Op::Leaf, rg)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Copies a recorded value out as a standalone tensor.
    pub fn tensor(&self, v: Var) -> Tensor<T> {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("recorded shapes are valid")
    }

    fn matrix_dims(&self, kernel: &'static str, v: Var) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            ref s => Err(Error::shape(kernel, format!("expected a matrix, got shape {s:?}"))),
        }
    }

    fn last_axis(&self, v: Var) -> usize {
        *self.shape(v).last().expect("rank >= 1")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{m}, {k}] x [{k2}, {n}]")));
        }
        let out = kernels::matmul(self.value(a), self.value(b), m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![m, n], Cow::Owned(out), Op::MatMul { a, b }, rg))
    }

    fn same_shape(&self, kernel: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(kernel, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn row_broadcast(&self, kernel: &'static str, a: Var, row: Var) -> Result<usize> {
        let n = self.last_axis(a);
        if self.nodes[row.0].value.len() != n {
            return Err(Error::shape(
                kernel,
                format!("row of {} elements against last axis {n} of {:?}", self.value(row).len(), self.shape(a)),
            ));
        }
        Ok(n)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), Cow::Owned(out), Op::Add { a, b }, rg))
    }

    /// Adds a vector to every row (bias broadcast over the last axis).
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let n = self.row_broadcast("add_row", a, row)?;
        let r = self.value(row);
        let out = self.value(a).iter().enumerate().map(|(i, &x)| x + r[i % n]).collect();
        let rg = self.rg(&[a, row]);
        Ok(self.push(self.shape(a).to_vec(), Cow::Owned(out), Op::AddRow { a, row }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), Cow::Owned(out), Op::Mul { a, b }, rg))
    }

    /// Multiplies every row elementwise by a vector.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let n = self.row_broadcast("mul_row", a, row)?;
        let r = self.value(row);
        let out = self.value(a).iter().enumerate().map(|(i, &x)| x * r[i % n]).collect();
        let rg = self.rg(&[a, row]);
        Ok(self.push(self.shape(a).to_vec(), Cow::Owned(out), Op::MulRow { a, row }, rg))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let out = self.value(a).iter().map(|&x| x * factor).collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), Cow::Owned(out), Op::Scale { a, factor }, rg)
    }

    /// Multiplies row `i` by the constant `factors[i]`.
    pub fn scale_rows(&mut self, a: Var, factors: Vec<T>) -> Result<Var> {
        let rows = self.shape(a)[0];
        if factors.len() != rows {
            return Err(Error::shape("scale_rows", format!("{} factors for {rows} rows", factors.len())));
        }
        let cols = self.value(a).len() / rows;
        let out = self.value(a).iter().enumerate().map(|(i, &x)| x * factors[i / cols]).collect();
        let rg = self.rg(&[a]);
        Ok(self.push(self.shape(a).to_vec(), Cow::Owned(out), Op::ScaleRows { a, factors }, rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims("transpose", a)?;
        let out = kernels::transpose(self.value(a), r, c);
        let rg = self.rg(&[a]);
        Ok(self.push(vec![c, r], Cow::Owned(out), Op::Transpose { a }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().any(|&d| d == 0) || shape.iter().product::<usize>() != self.value(a).len() {
            return Err(Error::shape("reshape", format!("{:?} -> {shape:?}", self.shape(a))));
        }
        let out = self.value(a).to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(shape, Cow::Owned(out), Op::Reshape { a }, rg))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let n = self.last_axis(a);
        let mut out = self.value(a).to_vec();
        kernels::softmax_rows(&mut out, n);
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), Cow::Owned(out), Op::Softmax { a }, rg)
    }

    /// Layer normalization over the last axis with an optional `(gain, bias)`.
    pub fn layer_norm(&mut self, x: Var, affine: Option<(Var, Var)>) -> Result<Var> {
        let n = self.last_axis(x);
        if let Some((g, b)) = affine {
            self.row_broadcast("layer_norm", x, g)?;
            self.row_broadcast("layer_norm", x, b)?;
        }
        let (xhat, rstd) = kernels::layer_norm_rows(self.value(x), n, T::lit(kernels::LAYER_NORM_EPS));
        let out = match affine {
            Some((g, b)) => {
                let (g, b) = (self.value(g), self.value(b));
                xhat.iter().enumerate().map(|(i, &v)| v * g[i % n] + b[i % n]).collect()
            }
            None => xhat.clone(),
        };
        let mut inputs = vec![x];
        if let Some((g, b)) = affine {
            inputs.extend([g, b]);
        }
        let rg = self.rg(&inputs);
        let (xhat, rstd) = if rg && self.recording { (xhat, rstd) } else { (Vec::new(), Vec::new()) };
        Ok(self.push(self.shape(x).to_vec(), Cow::Owned(out), Op::LayerNorm { x, affine, xhat, rstd }, rg))
    }

    /// Exact-erf GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| kernels::gelu(x)).collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), Cow::Owned(out), Op::Gelu { a }, rg)
    }

    /// Columns `[start, start + width)` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var> {
        let (r, c) = self.matrix_dims("slice_cols", a)?;
        if width == 0 || start + width > c {
            return Err(Error::shape("slice_cols", format!("columns {start}..{} of {c}", start + width)));
        }
        let src = self.value(a);
        let mut out = Vec::with_capacity(r * width);
        for row in src.chunks_exact(c) {
            out.extend_from_slice(&row[start..start + width]);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(vec![r, width], Cow::Owned(out), Op::SliceCols { a, start }, rg))
    }

    /// Stacks matrices of equal width vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat_rows", "no inputs"));
        }
        let (_, c) = self.matrix_dims("concat_rows", parts[0])?;
        let mut rows = 0;
        for &p in parts {
            let (r, c2) = self.matrix_dims("concat_rows", p)?;
            if c2 != c {
                return Err(Error::shape("concat_rows", format!("widths {c} and {c2}")));
            }
            rows += r;
        }
        let mut out = Vec::with_capacity(rows * c);
        for &p in parts {
            out.extend_from_slice(self.value(p));
        }
        let rg = self.rg(parts);
        Ok(self.push(vec![rows, c], Cow::Owned(out), Op::ConcatRows { parts: parts.to_vec() }, rg))
    }

    /// Output row `i` is input row `index[i]`; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, index: Vec<usize>) -> Result<Var> {
        let (r, c) = self.matrix_dims("gather_rows", a)?;
        if index.is_empty() {
            return Err(Error::shape("gather_rows", "empty index"));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= r) {
            return Err(Error::shape("gather_rows", format!("row {bad} out of {r}")));
        }
        let src = self.value(a);
        let mut out = Vec::with_capacity(index.len() * c);
        for &i in &index {
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(vec![index.len(), c], Cow::Owned(out), Op::GatherRows { a, index }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().copied().sum();
        let rg = self.rg(&[a]);
        self.push(vec![1], Cow::Owned(vec![s]), Op::Sum { a }, rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.iter().copied().sum::<T>() / T::from_usize(v.len()).unwrap();
        let rg = self.rg(&[a]);
        self.push(vec![1], Cow::Owned(vec![s]), Op::Mean { a }, rg)
    }

    /// Multi-head scaled dot-product self-attention over independent
    /// sequences stacked row-wise.
    ///
    /// `qkv` is `[R, 3D]` with query, key and value column blocks; head `h`
    /// owns columns `h*D/heads..(h+1)*D/heads` of each block. `segments`
    /// lists the sequence lengths (summing to `R`); tokens only attend within
    /// their own segment. Output is `[R, D]`.
    pub fn attention(&mut self, qkv: Var, segments: &[usize], heads: usize) -> Result<Var> {
        let (rows, w) = self.matrix_dims("attention", qkv)?;
        if heads == 0 || w % (3 * heads) != 0 {
            return Err(Error::shape("attention", format!("width {w} is not 3 x heads({heads}) x head_dim")));
        }
        if segments.iter().sum::<usize>() != rows || segments.contains(&0) {
            return Err(Error::shape("attention", format!("segments {segments:?} do not tile {rows} rows")));
        }
        let d = w / 3;
        let rg = self.rg(&[qkv]);
        let keep = rg && self.recording;
        let prob_lens: Vec<usize> = segments.iter().map(|&l| heads * l * l).collect();
        let mut probs = if keep { vec![T::zero(); prob_lens.iter().sum()] } else { Vec::new() };
        let mut out = vec![T::zero(); rows * d];
        {
            let q_parts = kernels::split_rows(self.value(qkv), segments, w);
            let o_parts = kernels::split_rows_mut(&mut out, segments, d);
            let p_parts: Vec<Option<&mut [T]>> = if keep {
                kernels::split_rows_mut(&mut probs, &prob_lens, 1).into_iter().map(Some).collect()
            } else {
                segments.iter().map(|_| None).collect()
            };
            let jobs: Vec<_> = segments.iter().zip(q_parts).zip(o_parts).zip(p_parts).collect();
            for_each_job(jobs, |(((&len, q), o), p)| attention_segment_forward(q, o, p, len, d, heads));
        }
        Ok(self.push(
            vec![rows, d],
            Cow::Owned(out),
            Op::Attention { qkv, segments: segments.to_vec(), heads, probs },
            rg,
        ))
    }

    /// Applies a user-defined differentiable function.
    pub fn custom(&mut self, inputs: &[Var], func: Box<dyn Function<T>>) -> Result<Var> {
        let args: Vec<(&[usize], &[T])> = inputs.iter().map(|&v| (self.shape(v), self.value(v))).collect();
        let (shape, out) = func.forward(&args)?;
        let rg = self.rg(inputs);
        Ok(self.push(shape, Cow::Owned(out), Op::Custom { inputs: inputs.to_vec(), func }, rg))
    }

    /// Reverse pass from a scalar `loss`. Consumes the recording.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::Tape("backward called on a tape that was already consumed".into()));
        }
        if !self.recording {
            return Err(Error::Tape("backward called on a no-grad tape".into()));
        }
        if self.nodes.is_empty() {
            return Err(Error::Tape("backward called on an empty tape".into()));
        }
        if loss.0 >= self.nodes.len() {
            return Err(Error::Tape(format!("loss var {} is not on this tape", loss.0)));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Tape(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
        }
        self.nodes.clear();
        self.consumed = true;
        Ok(Gradients { grads })
    }

    fn backward_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| -> &[T] { &self.nodes[v.0].value };
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let mut send = |v: Var, contrib: Vec<T>| {
            if self.nodes[v.0].requires_grad {
                add_into(&mut grads[v.0], contrib);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if wants(*a) {
                    let mut da = vec![T::zero(); m * k];
                    kernels::gemm(
                        T::one(),
                        MatRef::dense(g, m, n),
                        MatRef::dense(val(*b), k, n).t(),
                        T::zero(),
                        MatMut::dense(&mut da, m, k),
                    );
                    send(*a, da);
                }
                if wants(*b) {
                    let mut db = vec![T::zero(); k * n];
                    kernels::gemm(
                        T::one(),
                        MatRef::dense(val(*a), m, k).t(),
                        MatRef::dense(g, m, n),
                        T::zero(),
                        MatMut::dense(&mut db, k, n),
                    );
                    send(*b, db);
                }
            }
            Op::Add { a, b } => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::AddRow { a, row } => {
                send(*a, g.to_vec());
                if wants(*row) {
                    send(*row, kernels::col_sums(g, self.last_axis(*a)));
                }
            }
            Op::Mul { a, b } => {
                if wants(*a) {
                    send(*a, g.iter().zip(val(*b)).map(|(&x, &y)| x * y).collect());
                }
                if wants(*b) {
                    send(*b, g.iter().zip(val(*a)).map(|(&x, &y)| x * y).collect());
                }
            }
            Op::MulRow { a, row } => {
                let n = self.last_axis(*a);
                if wants(*a) {
                    let r = val(*row);
                    send(*a, g.iter().enumerate().map(|(i, &x)| x * r[i % n]).collect());
                }
                if wants(*row) {
                    let prod: Vec<T> = g.iter().zip(val(*a)).map(|(&x, &y)| x * y).collect();
                    send(*row, kernels::col_sums(&prod, n));
                }
            }
            Op::Scale { a, factor } => send(*a, g.iter().map(|&x| x * *factor).collect()),
            Op::ScaleRows { a, factors } => {
                let cols = g.len() / factors.len();
                send(*a, g.iter().enumerate().map(|(i, &x)| x * factors[i / cols]).collect());
            }
            Op::Transpose { a } => {
                let (r, c) = (self.shape(*a)[0], self.shape(*a)[1]);
                send(*a, kernels::transpose(g, c, r));
            }
            Op::Reshape { a } => send(*a, g.to_vec()),
            Op::Softmax { a } => {
                send(*a, kernels::softmax_rows_backward(&node.value, g, self.last_axis(*a)));
            }
            Op::LayerNorm { x, affine, xhat, rstd } => {
                let n = self.last_axis(*x);
                let nf = T::from_usize(n).unwrap();
                let dxhat: Vec<T> = match affine {
                    Some((gain, _)) => {
                        let gv = val(*gain);
                        g.iter().enumerate().map(|(i, &v)| v * gv[i % n]).collect()
                    }
                    None => g.to_vec(),
                };
                if wants(*x) {
                    let mut dx = Vec::with_capacity(g.len());
                    for ((dh, xh), &r) in dxhat.chunks_exact(n).zip(xhat.chunks_exact(n)).zip(rstd) {
                        let mean_dh = dh.iter().copied().sum::<T>() / nf;
                        let mean_dhx = dh.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>() / nf;
                        dx.extend(dh.iter().zip(xh).map(|(&a, &b)| r * (a - mean_dh - b * mean_dhx)));
                    }
                    send(*x, dx);
                }
                if let Some((gain, bias)) = affine {
                    if wants(*gain) {
                        let prod: Vec<T> = g.iter().zip(xhat).map(|(&a, &b)| a * b).collect();
                        send(*gain, kernels::col_sums(&prod, n));
                    }
                    if wants(*bias) {
                        send(*bias, kernels::col_sums(g, n));
                    }
                }
            }
            Op::Gelu { a } => {
                send(*a, g.iter().zip(val(*a)).map(|(&d, &x)| d * kernels::gelu_grad(x)).collect());
            }
            Op::SliceCols { a, start } => {
                let c = self.shape(*a)[1];
                let w = node.shape[1];
                let mut da = vec![T::zero(); val(*a).len()];
                for (dst, src) in da.chunks_exact_mut(c).zip(g.chunks_exact(w)) {
                    dst[*start..*start + w].copy_from_slice(src);
                }
                send(*a, da);
            }
            Op::ConcatRows { parts } => {
                let mut off = 0;
                for &p in parts {
                    let len = val(p).len();
                    if wants(p) {
                        send(p, g[off..off + len].to_vec());
                    }
                    off += len;
                }
            }
            Op::GatherRows { a, index } => {
                let c = node.shape[1];
                let mut da = vec![T::zero(); val(*a).len()];
                for (r, &src) in index.iter().enumerate() {
                    for (d, &s) in da[src * c..(src + 1) * c].iter_mut().zip(&g[r * c..(r + 1) * c]) {
                        *d += s;
                    }
                }
                send(*a, da);
            }
            Op::Sum { a } => send(*a, vec![g[0]; val(*a).len()]),
            Op::Mean { a } => {
                let n = val(*a).len();
                send(*a, vec![g[0] / T::from_usize(n).unwrap(); n]);
            }
            Op::Attention { qkv, segments, heads, probs } => {
                let w = self.shape(*qkv)[1];
                let d = w / 3;
                let mut dqkv = vec![T::zero(); val(*qkv).len()];
                {
                    let prob_lens: Vec<usize> = segments.iter().map(|&l| heads * l * l).collect();
                    let q_parts = kernels::split_rows(val(*qkv), segments, w);
                    let p_parts = kernels::split_rows(probs, &prob_lens, 1);
                    let g_parts = kernels::split_rows(g, segments, d);
                    let d_parts = kernels::split_rows_mut(&mut dqkv, segments, w);
                    let jobs: Vec<_> = segments
                        .iter()
                        .zip(q_parts)
                        .zip(p_parts)
                        .zip(g_parts)
                        .zip(d_parts)
                        .collect();
                    for_each_job(jobs, |((((&len, q), p), go), dq)| {
                        attention_segment_backward(q, p, go, dq, len, d, *heads)
                    });
                }
                send(*qkv, dqkv);
            }
            Op::Custom { inputs, func } => {
                let args: Vec<(&[usize], &[T])> = inputs.iter().map(|&v| (self.shape(v), val(v))).collect();
                let dins = func.backward(&args, &node.value, g);
                for (&v, d) in inputs.iter().zip(dins) {
                    if let Some(d) = d {
                        debug_assert_eq!(d.len(), val(v).len(), "{} returned a misshapen gradient", func.name());
                        send(v, d);
                    }
                }
            }
        }
    }
}

#[cfg(feature = "parallel")]
fn for_each_job<J: Send>(jobs: Vec<J>, f: impl Fn(J) + Sync + Send) {
    use rayon::prelude::*;
    jobs.into_par_iter().for_each(f);
}

#[cfg(not(feature = "parallel"))]
fn for_each_job<J>(jobs: Vec<J>, f: impl Fn(J)) {
    jobs.into_iter().for_each(f);
}

/// One sequence of `len` tokens: `q` is its `[len, 3d]` slab of qkv.
fn attention_segment_forward<T: Scalar>(
    qkv: &[T],
    out: &mut [T],
    mut probs: Option<&mut [T]>,
    len: usize,
    d: usize,
    heads: usize,
) {
    let dh = d / heads;
    let w = 3 * d;
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
    let mut scores = vec![T::zero(); len * len];
    for h in 0..heads {
        let q = MatRef::block(qkv, 0, len, h * dh, dh, w);
        let k = MatRef::block(qkv, 0, len, d + h * dh, dh, w);
        let v = MatRef::block(qkv, 0, len, 2 * d + h * dh, dh, w);
        kernels::gemm(scale, q, k.t(), T::zero(), MatMut::dense(&mut scores, len, len));
        kernels::softmax_rows(&mut scores, len);
        kernels::gemm(T::one(), MatRef::dense(&scores, len, len), v, T::zero(), MatMut::block(out, 0, len, h * dh, dh, d));
        if let Some(p) = probs.as_deref_mut() {
            p[h * len * len..(h + 1) * len * len].copy_from_slice(&scores);
        }
    }
}

fn attention_segment_backward<T: Scalar>(
    qkv: &[T],
    probs: &[T],
    grad_out: &[T],
    dqkv: &mut [T],
    len: usize,
    d: usize,
    heads: usize,
) {
    let dh = d / heads;
    let w = 3 * d;
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
    let mut dp = vec![T::zero(); len * len];
    for h in 0..heads {
        let p = &probs[h * len * len..(h + 1) * len * len];
        let pm = MatRef::dense(p, len, len);
        let go = MatRef::block(grad_out, 0, len, h * dh, dh, d);
        let q = MatRef::block(qkv, 0, len, h * dh, dh, w);
        let k = MatRef::block(qkv, 0, len, d + h * dh, dh, w);
        let v = MatRef::block(qkv, 0, len, 2 * d + h * dh, dh, w);
        // dV = P^T dO
        kernels::gemm(T::one(), pm.t(), go, T::zero(), MatMut::block(dqkv, 0, len, 2 * d + h * dh, dh, w));
        // dP = dO V^T, then softmax backward to dS
        kernels::gemm(T::one(), go, v.t(), T::zero(), MatMut::dense(&mut dp, len, len));
        let ds = kernels::softmax_rows_backward(p, &dp, len);
        let dsm = MatRef::dense(&ds, len, len);
        kernels::gemm(scale, dsm, k, T::zero(), MatMut::block(dqkv, 0, len, h * dh, dh, w));
        kernels::gemm(scale, dsm.t(), q, T::zero(), MatMut::block(dqkv, 0, len, d + h * dh, dh, w));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn square_sum_gradient() {
        let x = t(&[3], &[1.0, 2.0, 3.0]).with_grad();
        let mut tape = Tape::new();
        let xv = tape.leaf(&x);
        let sq = tape.mul(xv, xv).unwrap();
        let loss = tape.sum(sq);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(xv).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn fan_out_accumulates_once_per_path() {
        let x = t(&[2], &[0.5, -1.5]).with_grad();
        let mut tape = Tape::new();
        let xv = tape.leaf(&x);
        let y = tape.add(xv, xv).unwrap();
        let loss = tape.sum(y);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(xv).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn identity_matmul() {
        let i3 = Tensor::<f64>::identity(3);
        let a = t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let mut tape = Tape::new();
        let (iv, av) = (tape.leaf(&i3), tape.leaf(&a));
        let out = tape.matmul(iv, av).unwrap();
        assert_eq!(tape.value(out), a.data());
    }

    #[test]
    fn matmul_shape_error_names_kernel() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        let mut tape = Tape::new();
        let av = tape.leaf(&a);
        let err = tape.matmul(av, av).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3] x [2, 3]"), "{err}");
    }

    #[test]
    fn uniform_softmax_and_constant_layernorm() {
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(Tensor::zeros(&[1, 4]));
        let s = tape.softmax(z);
        assert_eq!(tape.value(s), &[0.25; 4]);
        let c = tape.constant(Tensor::full(&[1, 4], 5.0));
        let ln = tape.layer_norm(c, None).unwrap();
        assert_eq!(tape.value(ln), &[0.0; 4]);
    }

    #[test]
    fn gelu_derivative_at_zero() {
        let x = t(&[1], &[0.0]).with_grad();
        let mut tape = Tape::new();
        let xv = tape.leaf(&x);
        let y = tape.gelu(xv);
        let loss = tape.sum(y);
        let grads = tape.backward(loss).unwrap();
        assert!((grads.get(xv).unwrap()[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn backward_contract_errors() {
        let x = t(&[2], &[1.0, 2.0]).with_grad();
        let mut tape = Tape::new();
        let xv = tape.leaf(&x);
        let y = tape.scale(xv, 3.0);
        assert!(matches!(tape.backward(y), Err(Error::Tape(_))), "non-scalar loss");
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        let err = tape.backward(loss).unwrap_err();
        assert!(err.to_string().contains("already consumed"));

        let mut empty = Tape::<f64>::new();
        assert!(empty.backward(Var(0)).is_err());
    }

    #[test]
    fn non_participating_leaves_get_nothing() {
        let x = t(&[2], &[1.0, 2.0]).with_grad();
        let c = t(&[2], &[3.0, 4.0]);
        let mut tape = Tape::new();
        let (xv, cv) = (tape.leaf(&x), tape.leaf(&c));
        let unused = tape.leaf(&x);
        let p = tape.mul(xv, cv).unwrap();
        let loss = tape.sum(p);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(xv).unwrap(), &[3.0, 4.0]);
        assert!(grads.get(cv).is_none());
        assert!(grads.get(unused).is_none());
    }

    #[test]
    fn no_grad_tape_matches_recording_values() {
        let a = Tensor::<f64>::from_fn(&[4, 6], |i| (i as f64 * 0.37).sin());
        fn run<'a>(a: &'a Tensor<f64>, mut tape: Tape<'a, f64>) -> Vec<f64> {
            let v = tape.leaf(a);
            let o = tape.attention(v, &[1, 3], 2).unwrap();
            tape.value(o).to_vec()
        }
        assert_eq!(run(&a, Tape::new()), run(&a, Tape::no_grad()));
        let mut nt = Tape::no_grad();
        let v = nt.leaf(&a);
        let s = nt.sum(v);
        assert!(nt.backward(s).is_err());
    }

    #[test]
    fn attention_rows_stay_in_their_segment() {
        // Changing the second segment must not move the first segment's output.
        let mut a = Tensor::<f64>::from_fn(&[5, 12], |i| ((i * 7 % 13) as f64 - 6.0) * 0.1);
        let first = |a: &Tensor<f64>| {
            let mut tape = Tape::new();
            let v = tape.leaf(a);
            let o = tape.attention(v, &[2, 3], 2).unwrap();
            tape.value(o)[..2 * 4].to_vec()
        };
        let before = first(&a);
        for x in &mut a.data_mut()[2 * 12..] {
            *x += 1.0;
        }
        assert_eq!(before, first(&a));
    }
}
