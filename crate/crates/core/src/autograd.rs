//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation in execution order, so the tape is
//! topologically sorted by construction and [`Graph::backward`] is a single
//! reverse sweep. Leaves created with [`Graph::param`] keep their gradients
//! (accumulating across calls); intermediate gradients are released as soon
//! as they have been propagated.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const BN_EPS: f64 = 1e-5;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Max,
    Mean,
    Sum,
}

/// Elementwise binary operator; the right operand may broadcast along
/// leading axes (its shape must be a suffix of the left shape).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
}

/// Which moments batch normalization divides by.
#[derive(Clone, Copy, Debug)]
pub enum NormStats<'a, T> {
    /// Moments of the current batch (training).
    Batch,
    /// Stored running moments (evaluation).
    Running { mean: &'a [T], var: &'a [T] },
}

/// Per-feature moments of a training batch; the variance is unbiased.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchMoments<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        dims: [usize; 4],
    },
    TransposeLast {
        a: Var,
    },
    Binary {
        op: Binary,
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        k: T,
    },
    Relu {
        a: Var,
    },
    Reshape {
        a: Var,
    },
    SliceLast {
        a: Var,
        start: usize,
    },
    ConcatLast {
        a: Var,
        b: Var,
    },
    Reduce {
        a: Var,
        kind: Reduction,
        outer: usize,
        len: usize,
        inner: usize,
        argmax: Vec<u32>,
    },
    SumAll {
        a: Var,
    },
    BatchNorm {
        a: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
        relu: bool,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        probs: Vec<T>,
        labels: Vec<usize>,
    },
    Dropout {
        a: Var,
        mask: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Ordered record of executed differentiable operations.
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn dim_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Dimension {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<T>, inputs: &[Var], op: Op<T>) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, shaped like its value.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape(), g.clone()).expect("grad shape"))
    }

    /// Per-slice argmax positions of a max reduction node.
    pub fn argmax(&self, v: Var) -> Option<&[u32]> {
        match &self.nodes[v.0].op {
            Op::Reduce {
                kind: Reduction::Max,
                argmax,
                ..
            } => Some(argmax),
            _ => None,
        }
    }

    /// Clears every stored gradient.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    // ---- forward operations -------------------------------------------------

    /// `[m×k] · [k×n] → [m×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(dim_err("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            false,
        );
        let value = Tensor::new(&[m, n], out)?;
        Ok(self.push(value, &[a, b], Op::MatMul { a, b }))
    }

    /// `[B×m×k] · [B×k×n] → [B×m×n]`.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(dim_err("batch_matmul", sa, sb));
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![T::zero(); bs * m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for i in 0..bs {
            T::gemm(
                m,
                k,
                n,
                &da[i * m * k..(i + 1) * m * k],
                false,
                &db[i * k * n..(i + 1) * k * n],
                false,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let value = Tensor::new(&[bs, m, n], out)?;
        Ok(self.push(
            value,
            &[a, b],
            Op::BatchMatMul {
                a,
                b,
                dims: [bs, m, k, n],
            },
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() < 2 {
            return Err(dim_err("transpose_last", &s, &[]));
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let mut shape = s.clone();
        let rank = shape.len();
        shape.swap(rank - 2, rank - 1);
        let src = self.value(a).data();
        let mut out = vec![T::zero(); src.len()];
        for (blk_in, blk_out) in src.chunks(r * c).zip(out.chunks_mut(r * c)) {
            transpose_into(blk_in, r, c, blk_out);
        }
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, &[a], Op::TransposeLast { a }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn binary(&mut self, op: Binary, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(dim_err("elementwise", sa, sb));
        }
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let period = vb.len().max(1);
        let mut out = Vec::with_capacity(va.len());
        for chunk in va.chunks(period) {
            match op {
                Binary::Add => out.extend(chunk.iter().zip(vb).map(|(&x, &y)| x + y)),
                Binary::Sub => out.extend(chunk.iter().zip(vb).map(|(&x, &y)| x - y)),
                Binary::Mul => out.extend(chunk.iter().zip(vb).map(|(&x, &y)| x * y)),
            }
        }
        let value = Tensor::new(sa, out)?;
        Ok(self.push(value, &[a, b], Op::Binary { op, a, b }))
    }

    pub fn scale(&mut self, a: Var, k: T) -> Var {
        let src = self.value(a);
        let value = Tensor::new(src.shape(), src.data().iter().map(|&x| x * k).collect())
            .expect("same shape");
        self.push(value, &[a], Op::Scale { a, k })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let value = Tensor::new(
            src.shape(),
            src.data()
                .iter()
                .map(|&x| if x > T::zero() { x } else { T::zero() })
                .collect(),
        )
        .expect("same shape");
        self.push(value, &[a], Op::Relu { a })
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        Ok(self.push(value, &[a], Op::Reshape { a }))
    }

    /// Columns `start..end` of the last axis.
    pub fn slice_last(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let w = *s.last().unwrap_or(&0);
        if s.is_empty() || start >= end || end > w {
            return Err(dim_err("slice_last", &s, &[start, end]));
        }
        let width = end - start;
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(src.len() / w * width);
        for row in src.chunks(w) {
            out.extend_from_slice(&row[start..end]);
        }
        let mut shape = s;
        *shape.last_mut().unwrap() = width;
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, &[a], Op::SliceLast { a, start }))
    }

    /// Concatenates along the last axis; leading axes must agree.
    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.is_empty() || sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(dim_err("concat_last", &sa, &sb));
        }
        let (wa, wb) = (sa[sa.len() - 1], sb[sb.len() - 1]);
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(va.len() + vb.len());
        for (ra, rb) in va.chunks(wa).zip(vb.chunks(wb)) {
            out.extend_from_slice(ra);
            out.extend_from_slice(rb);
        }
        let mut shape = sa;
        *shape.last_mut().unwrap() = wa + wb;
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, &[a, b], Op::ConcatLast { a, b }))
    }

    /// Reduces one axis away. Max routes its gradient to the first maximal
    /// position of each reduced slice.
    pub fn reduce(&mut self, a: Var, kind: Reduction, axis: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() {
            return Err(dim_err("reduce", &s, &[axis]));
        }
        let len = s[axis];
        if len == 0 {
            return Err(Error::Domain("reduction over an empty axis".into()));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let src = self.value(a).data();
        let mut out = vec![T::zero(); outer * inner];
        let mut argmax = Vec::new();
        match kind {
            Reduction::Max => {
                argmax = vec![0u32; outer * inner];
                for o in 0..outer {
                    let base = o * len * inner;
                    let acc = &mut out[o * inner..(o + 1) * inner];
                    let idx = &mut argmax[o * inner..(o + 1) * inner];
                    acc.copy_from_slice(&src[base..base + inner]);
                    for l in 1..len {
                        let row = &src[base + l * inner..base + (l + 1) * inner];
                        for ((m, ix), &x) in acc.iter_mut().zip(idx.iter_mut()).zip(row) {
                            if x > *m {
                                *m = x;
                                *ix = l as u32;
                            }
                        }
                    }
                }
            }
            Reduction::Sum | Reduction::Mean => {
                for o in 0..outer {
                    let base = o * len * inner;
                    let acc = &mut out[o * inner..(o + 1) * inner];
                    for l in 0..len {
                        let row = &src[base + l * inner..base + (l + 1) * inner];
                        for (m, &x) in acc.iter_mut().zip(row) {
                            *m += x;
                        }
                    }
                }
                if kind == Reduction::Mean {
                    let inv = T::one() / T::lit(len as f64);
                    out.iter_mut().for_each(|v| *v *= inv);
                }
            }
        }
        let mut shape = s;
        shape.remove(axis);
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(
            value,
            &[a],
            Op::Reduce {
                a,
                kind,
                outer,
                len,
                inner,
                argmax,
            },
        ))
    }

    /// Sum of every element, as a rank-0 tensor.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let total = self.value(a).data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(total), &[a], Op::SumAll { a })
    }

    /// Batch normalization of `[N×F]` rows with per-feature `gamma`/`beta`.
    ///
    /// With [`NormStats::Batch`] the batch moments are used (and returned so
    /// the caller can update running moments); the output is differentiable
    /// through them.
    pub fn batch_norm(
        &mut self,
        a: Var,
        gamma: Var,
        beta: Var,
        stats: NormStats<'_, T>,
    ) -> Result<(Var, Option<BatchMoments<T>>)> {
        self.batch_norm_impl(a, gamma, beta, stats, false)
    }

    /// `relu(batch_norm(..))` as one node, saving a pass and a buffer.
    pub fn batch_norm_relu(
        &mut self,
        a: Var,
        gamma: Var,
        beta: Var,
        stats: NormStats<'_, T>,
    ) -> Result<(Var, Option<BatchMoments<T>>)> {
        self.batch_norm_impl(a, gamma, beta, stats, true)
    }

    fn batch_norm_impl(
        &mut self,
        a: Var,
        gamma: Var,
        beta: Var,
        stats: NormStats<'_, T>,
        relu: bool,
    ) -> Result<(Var, Option<BatchMoments<T>>)> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(dim_err("batch_norm", &s, &[]));
        }
        let (n, f) = (s[0], s[1]);
        if self.shape(gamma) != [f] || self.shape(beta) != [f] {
            return Err(dim_err("batch_norm", &s, self.shape(gamma)));
        }
        let eps = T::lit(BN_EPS);
        let x = self.value(a).data();
        let (mean, inv_std, moments) = match stats {
            NormStats::Batch => {
                if n < 2 {
                    return Err(Error::Domain(format!(
                        "batch norm in train mode needs at least 2 rows, got {n}"
                    )));
                }
                // shifted single pass: offsetting by the first row keeps
                // Σd² − (Σd)²/n well conditioned
                let shift: Vec<f64> = x[..f].iter().map(|v| v.as_f64()).collect();
                let mut sum = vec![0.0f64; f];
                let mut sum_sq = vec![0.0f64; f];
                for row in x.chunks(f) {
                    for (((acc, acc2), &v), &c) in
                        sum.iter_mut().zip(sum_sq.iter_mut()).zip(row).zip(&shift)
                    {
                        let d = v.as_f64() - c;
                        *acc += d;
                        *acc2 += d * d;
                    }
                }
                let nf = n as f64;
                let mean: Vec<f64> = sum.iter().zip(&shift).map(|(s, c)| c + s / nf).collect();
                let sq: Vec<f64> = sum
                    .iter()
                    .zip(&sum_sq)
                    .map(|(s, q)| (q - s * s / nf).max(0.0))
                    .collect();
                let inv_std = sq
                    .iter()
                    .map(|q| T::lit(1.0 / num_traits::Float::sqrt(q / n as f64 + BN_EPS)))
                    .collect();
                let moments = BatchMoments {
                    mean: mean.iter().map(|&m| T::lit(m)).collect(),
                    var: sq.iter().map(|&q| T::lit(q / (n - 1) as f64)).collect(),
                };
                (
                    mean.into_iter().map(T::lit).collect::<Vec<T>>(),
                    inv_std,
                    Some(moments),
                )
            }
            NormStats::Running { mean, var } => {
                if mean.len() != f || var.len() != f {
                    return Err(dim_err("batch_norm", &s, &[mean.len(), var.len()]));
                }
                let inv_std = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
                (mean.to_vec(), inv_std, None)
            }
        };
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let scale: Vec<T> = g.iter().zip(&inv_std).map(|(&g, &s)| g * s).collect();
        let mut out = Vec::with_capacity(x.len());
        for row in x.chunks(f) {
            out.extend(
                row.iter()
                    .zip(&mean)
                    .zip(&scale)
                    .zip(bt)
                    .map(|(((&v, &m), &k), &b)| {
                        let y = (v - m) * k + b;
                        if relu && y < T::zero() {
                            T::zero()
                        } else {
                            y
                        }
                    }),
            );
        }
        let value = Tensor::new(&s, out)?;
        let batch_stats = moments.is_some();
        let v = self.push(
            value,
            &[a, gamma, beta],
            Op::BatchNorm {
                a,
                gamma,
                beta,
                mean,
                inv_std,
                batch_stats,
                relu,
            },
        );
        Ok((v, moments))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(dim_err("softmax_cross_entropy", &s, &[labels.len()]));
        }
        let (b, c) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Index(format!("label {bad} out of range for {c} classes")));
        }
        if b == 0 {
            return Err(Error::Domain("cross entropy of an empty batch".into()));
        }
        let z = self.value(logits).data();
        let mut probs = Vec::with_capacity(z.len());
        let mut total = T::zero();
        for (row, &label) in z.chunks(c).zip(labels) {
            let (p, nll) = log_softmax_row(row, label);
            probs.extend(p);
            total += nll;
        }
        let loss = total / T::lit(b as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            &[logits],
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                labels: labels.to_vec(),
            },
        ))
    }

    /// Inverted dropout: zeroes each element with probability `rate` and
    /// rescales survivors by `1/(1-rate)`.
    pub fn dropout(&mut self, a: Var, rate: f64, seed: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Spec(format!("dropout rate {rate} outside [0,1)")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep = T::lit(1.0 / (1.0 - rate));
        let src = self.value(a);
        let mask: Vec<T> = (0..src.numel())
            .map(|_| {
                if rng.random::<f64>() < rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let value = Tensor::new(
            src.shape(),
            src.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect(),
        )?;
        Ok(self.push(value, &[a], Op::Dropout { a, mask }))
    }

    // ---- backward -----------------------------------------------------------

    /// Propagates `d loss / d node` to every node that requires a gradient.
    ///
    /// Leaf gradients accumulate across calls; call [`Graph::zero_grad`] to
    /// reset them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        if !lv.all_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        for node in &mut self.nodes {
            if !matches!(node.op, Op::Leaf) {
                node.grad = None;
            }
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) || !self.nodes[i].requires_grad {
                continue;
            }
            let Some(mut g) = self.nodes[i].grad.take() else {
                continue;
            };
            if let Op::BatchNorm { relu: true, .. } = self.nodes[i].op {
                for (gv, &y) in g.iter_mut().zip(self.nodes[i].value.data()) {
                    if y <= T::zero() {
                        *gv = T::zero();
                    }
                }
            }
            self.propagate(i, &g)?;
        }
        for node in &self.nodes {
            if let (Op::Leaf, Some(g)) = (&node.op, &node.grad) {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite("parameter gradient".into()));
                }
            }
        }
        Ok(())
    }

    /// Takes (or allocates) the gradient buffer of `v`. Returns `None` when
    /// `v` needs no gradient.
    fn take_grad(&mut self, v: Var) -> Option<Vec<T>> {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        Some(
            node.grad
                .take()
                .unwrap_or_else(|| vec![T::zero(); node.value.numel()]),
        )
    }

    fn put_grad(&mut self, v: Var, g: Vec<T>) {
        self.nodes[v.0].grad = Some(g);
    }

    fn propagate(&mut self, i: usize, g: &[T]) -> Result<()> {
        // Temporarily move the op out so the value buffers stay borrowable.
        let op = core::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            &Op::MatMul { a, b } => {
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                if let Some(mut ga) = self.take_grad(a) {
                    // dA = dC · Bᵀ
                    T::gemm(m, n, k, g, false, self.value(b).data(), true, &mut ga, true);
                    self.put_grad(a, ga);
                }
                if let Some(mut gb) = self.take_grad(b) {
                    // dB = Aᵀ · dC
                    T::gemm(k, m, n, self.value(a).data(), true, g, false, &mut gb, true);
                    self.put_grad(b, gb);
                }
            }
            &Op::BatchMatMul { a, b, dims } => {
                let [bs, m, k, n] = dims;
                if let Some(mut ga) = self.take_grad(a) {
                    let vb = self.value(b).data();
                    for t in 0..bs {
                        T::gemm(
                            m,
                            n,
                            k,
                            &g[t * m * n..(t + 1) * m * n],
                            false,
                            &vb[t * k * n..(t + 1) * k * n],
                            true,
                            &mut ga[t * m * k..(t + 1) * m * k],
                            true,
                        );
                    }
                    self.put_grad(a, ga);
                }
                if let Some(mut gb) = self.take_grad(b) {
                    let va = self.value(a).data();
                    for t in 0..bs {
                        T::gemm(
                            k,
                            m,
                            n,
                            &va[t * m * k..(t + 1) * m * k],
                            true,
                            &g[t * m * n..(t + 1) * m * n],
                            false,
                            &mut gb[t * k * n..(t + 1) * k * n],
                            true,
                        );
                    }
                    self.put_grad(b, gb);
                }
            }
            &Op::TransposeLast { a } => {
                let s = self.shape(a);
                let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
                if let Some(mut ga) = self.take_grad(a) {
                    let mut tmp = vec![T::zero(); r * c];
                    for (gi, go) in g.chunks(r * c).zip(ga.chunks_mut(r * c)) {
                        // upstream block is c×r
                        transpose_into(gi, c, r, &mut tmp);
                        go.iter_mut().zip(&tmp).for_each(|(o, &t)| *o += t);
                    }
                    self.put_grad(a, ga);
                }
            }
            &Op::Binary { op, a, b } => {
                let period = self.value(b).numel().max(1);
                if let Some(mut ga) = self.take_grad(a) {
                    match op {
                        Binary::Add | Binary::Sub => {
                            ga.iter_mut().zip(g).for_each(|(o, &x)| *o += x);
                        }
                        Binary::Mul => {
                            let vb = self.value(b).data();
                            for (go, gi) in ga.chunks_mut(period).zip(g.chunks(period)) {
                                for ((o, &x), &y) in go.iter_mut().zip(gi).zip(vb) {
                                    *o += x * y;
                                }
                            }
                        }
                    }
                    self.put_grad(a, ga);
                }
                if let Some(mut gb) = self.take_grad(b) {
                    let va = self.value(a).data();
                    for (gi, ai) in g.chunks(period).zip(va.chunks(period)) {
                        match op {
                            Binary::Add => gb.iter_mut().zip(gi).for_each(|(o, &x)| *o += x),
                            Binary::Sub => gb.iter_mut().zip(gi).for_each(|(o, &x)| *o -= x),
                            Binary::Mul => gb
                                .iter_mut()
                                .zip(gi)
                                .zip(ai)
                                .for_each(|((o, &x), &y)| *o += x * y),
                        }
                    }
                    self.put_grad(b, gb);
                }
            }
            &Op::Scale { a, k } => {
                if let Some(mut ga) = self.take_grad(a) {
                    ga.iter_mut().zip(g).for_each(|(o, &x)| *o += x * k);
                    self.put_grad(a, ga);
                }
            }
            &Op::Relu { a } => {
                if let Some(mut ga) = self.take_grad(a) {
                    let va = self.value(a).data();
                    for ((o, &x), &v) in ga.iter_mut().zip(g).zip(va) {
                        if v > T::zero() {
                            *o += x;
                        }
                    }
                    self.put_grad(a, ga);
                }
            }
            &Op::Reshape { a } => {
                if let Some(mut ga) = self.take_grad(a) {
                    ga.iter_mut().zip(g).for_each(|(o, &x)| *o += x);
                    self.put_grad(a, ga);
                }
            }
            &Op::SliceLast { a, start } => {
                let w = *self.shape(a).last().unwrap();
                let width = *self.shape(Var(i)).last().unwrap();
                if let Some(mut ga) = self.take_grad(a) {
                    for (go, gi) in ga.chunks_mut(w).zip(g.chunks(width)) {
                        go[start..start + width]
                            .iter_mut()
                            .zip(gi)
                            .for_each(|(o, &x)| *o += x);
                    }
                    self.put_grad(a, ga);
                }
            }
            &Op::ConcatLast { a, b } => {
                let wa = *self.shape(a).last().unwrap();
                let wb = *self.shape(b).last().unwrap();
                if let Some(mut ga) = self.take_grad(a) {
                    for (go, gi) in ga.chunks_mut(wa).zip(g.chunks(wa + wb)) {
                        go.iter_mut().zip(&gi[..wa]).for_each(|(o, &x)| *o += x);
                    }
                    self.put_grad(a, ga);
                }
                if let Some(mut gb) = self.take_grad(b) {
                    for (go, gi) in gb.chunks_mut(wb).zip(g.chunks(wa + wb)) {
                        go.iter_mut().zip(&gi[wa..]).for_each(|(o, &x)| *o += x);
                    }
                    self.put_grad(b, gb);
                }
            }
            Op::Reduce {
                a,
                kind,
                outer,
                len,
                inner,
                argmax,
            } => {
                let (a, outer, len, inner) = (*a, *outer, *len, *inner);
                if let Some(mut ga) = self.take_grad(a) {
                    for o in 0..outer {
                        let base = o * len * inner;
                        let gi = &g[o * inner..(o + 1) * inner];
                        match kind {
                            Reduction::Max => {
                                let idx = &argmax[o * inner..(o + 1) * inner];
                                for (j, (&x, &l)) in gi.iter().zip(idx).enumerate() {
                                    ga[base + l as usize * inner + j] += x;
                                }
                            }
                            Reduction::Sum | Reduction::Mean => {
                                let k = if *kind == Reduction::Mean {
                                    T::one() / T::lit(len as f64)
                                } else {
                                    T::one()
                                };
                                for l in 0..len {
                                    let row = &mut ga[base + l * inner..base + (l + 1) * inner];
                                    row.iter_mut().zip(gi).for_each(|(o, &x)| *o += x * k);
                                }
                            }
                        }
                    }
                    self.put_grad(a, ga);
                }
            }
            &Op::SumAll { a } => {
                if let Some(mut ga) = self.take_grad(a) {
                    ga.iter_mut().for_each(|o| *o += g[0]);
                    self.put_grad(a, ga);
                }
            }
            Op::BatchNorm {
                a,
                gamma,
                beta,
                mean,
                inv_std,
                batch_stats,
                ..
            } => {
                let (a, gamma, beta) = (*a, *gamma, *beta);
                let f = mean.len();
                let n = self.shape(a)[0];
                let x = self.value(a).data();
                // per-feature sums of g and g·x̂
                let mut sum_g = vec![0.0f64; f];
                let mut sum_gx = vec![0.0f64; f];
                let mut xh = vec![T::zero(); f];
                for (row, grow) in x.chunks(f).zip(g.chunks(f)) {
                    for (((h, &v), &m), &k) in xh.iter_mut().zip(row).zip(mean).zip(inv_std) {
                        *h = (v - m) * k;
                    }
                    for (((sg, sgx), &gv), &h) in
                        sum_g.iter_mut().zip(sum_gx.iter_mut()).zip(grow).zip(&xh)
                    {
                        *sg += gv.as_f64();
                        *sgx += (gv * h).as_f64();
                    }
                }
                if let Some(mut ga) = self.take_grad(a) {
                    let x = self.value(a).data();
                    let gm = self.value(gamma).data();
                    if *batch_stats {
                        // dx = γ·σ⁻¹/N · (N·g − Σg − x̂·Σ(g·x̂))
                        let nt = T::lit(n as f64);
                        let k: Vec<T> = gm.iter().zip(inv_std).map(|(&g, &s)| g * s / nt).collect();
                        let mg: Vec<T> = sum_g.iter().map(|&s| T::lit(s)).collect();
                        let mgx: Vec<T> = sum_gx.iter().map(|&s| T::lit(s)).collect();
                        for ((orow, row), grow) in ga.chunks_mut(f).zip(x.chunks(f)).zip(g.chunks(f)) {
                            for (((h, &v), &m), &s) in xh.iter_mut().zip(row).zip(mean).zip(inv_std) {
                                *h = (v - m) * s;
                            }
                            for (((((o, &gv), &h), &k), &sg), &sgx) in orow
                                .iter_mut()
                                .zip(grow)
                                .zip(&xh)
                                .zip(&k)
                                .zip(&mg)
                                .zip(&mgx)
                            {
                                *o += k * (nt * gv - sg - h * sgx);
                            }
                        }
                    } else {
                        let k: Vec<T> = gm.iter().zip(inv_std).map(|(&g, &s)| g * s).collect();
                        for (orow, grow) in ga.chunks_mut(f).zip(g.chunks(f)) {
                            for ((o, &gv), &k) in orow.iter_mut().zip(grow).zip(&k) {
                                *o += k * gv;
                            }
                        }
                    }
                    self.put_grad(a, ga);
                }
                if let Some(mut gg) = self.take_grad(gamma) {
                    gg.iter_mut().zip(&sum_gx).for_each(|(o, &s)| *o += T::lit(s));
                    self.put_grad(gamma, gg);
                }
                if let Some(mut gb) = self.take_grad(beta) {
                    gb.iter_mut().zip(&sum_g).for_each(|(o, &s)| *o += T::lit(s));
                    self.put_grad(beta, gb);
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                labels,
            } => {
                let logits = *logits;
                let c = self.shape(logits)[1];
                let scale = g[0] / T::lit(labels.len() as f64);
                if let Some(mut gl) = self.take_grad(logits) {
                    for (r, (&label, prow)) in labels.iter().zip(probs.chunks(c)).enumerate() {
                        for j in 0..c {
                            let target = if j == label { T::one() } else { T::zero() };
                            gl[r * c + j] += (prow[j] - target) * scale;
                        }
                    }
                    self.put_grad(logits, gl);
                }
            }
            Op::Dropout { a, mask } => {
                let a = *a;
                if let Some(mut ga) = self.take_grad(a) {
                    for ((o, &x), &m) in ga.iter_mut().zip(g).zip(mask) {
                        *o += x * m;
                    }
                    self.put_grad(a, ga);
                }
            }
        }
        self.nodes[i].op = op;
        Ok(())
    }
}

/// Softmax of one row plus `-log p[label]`, with max subtraction.
pub(crate) fn log_softmax_row<T: Real>(row: &[T], label: usize) -> (Vec<T>, T) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = row.iter().map(|&z| (z - max).exp()).collect();
    let sum: T = exps.iter().copied().sum();
    let nll = sum.ln() - (row[label] - max);
    (exps.into_iter().map(|e| e / sum).collect(), nll)
}

fn transpose_into<T: Copy>(src: &[T], rows: usize, cols: usize, dst: &mut [T]) {
    for r in 0..rows {
        for c in 0..cols {
            dst[c * rows + r] = src[r * cols + c];
        }
    }
}
