//! Tape-based reverse-mode automatic differentiation.
//!
//! Every op appends a node holding its forward value and, when any input
//! tracks gradients, the data its adjoint needs. `backward` walks the tape
//! once in reverse. Nodes whose inputs are all constants are stored as plain
//! constants, so inference on untracked parameters keeps no adjoint state.

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::{gemm, gemm_view, Scalar, View};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, tb: bool },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, factor: T },
    Relu { a: Var },
    Gelu { a: Var },
    Softmax { a: Var },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        scale: T,
        /// Attention weights `[batch, heads, queries, keys]`.
        probs: Vec<T>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Embedding { table: Var, ids: Vec<usize> },
    Dropout { a: Var, mask: Vec<T> },
    Reshape { a: Var },
    Permute { a: Var, perm: Vec<usize> },
    WhereRows { cond: Vec<bool>, a: Var, b: Var },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        smoothing: T,
        probs: Vec<T>,
        count: usize,
    },
    Sum { a: Var },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Record of executed operations, replayed in reverse by [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    backward_done: bool,
}

/// Which keys a query may attend to in [`Tape::masked_softmax`].
#[derive(Clone, Copy, Debug)]
pub struct AttentionMask<'a> {
    /// `[batch, keys]`, `true` marks padding.
    pub key_padding: Option<&'a [bool]>,
    pub causal: bool,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Constant copy of `v`; no gradient flows back through it.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
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

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Drops every node at index `len` and beyond.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    /// Clears all gradients so `backward` may run again.
    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.backward_done = false;
    }

    fn push(&mut self, value: Tensor<T>, inputs: &[Var], op: Op<T>) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: if requires_grad { op } else { Op::Leaf },
        });
        Var(self.nodes.len() - 1)
    }

    /// Matrix product over the last two axes. `b` is either a shared 2-D
    /// matrix or has the same leading (batch) axes as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` over the last two axes.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, tb: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let err = || Error::Shape {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(err());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = if tb {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        if k != kb {
            return Err(err());
        }
        let lead = &sa[..sa.len() - 2];
        let batch: usize = lead.iter().product();
        let shared = sb.len() == 2;
        if !shared && (sb.len() != sa.len() || &sb[..sb.len() - 2] != lead) {
            return Err(err());
        }
        let mut out = vec![T::zero(); batch * m * n];
        {
            let av = self.nodes[a.0].value.data();
            let bv = self.nodes[b.0].value.data();
            if shared {
                gemm(batch * m, k, n, av, false, bv, tb, &mut out, false);
            } else {
                for i in 0..batch {
                    gemm(
                        m,
                        k,
                        n,
                        &av[i * m * k..],
                        false,
                        &bv[i * k * n..],
                        tb,
                        &mut out[i * m * n..],
                        false,
                    );
                }
            }
        }
        let mut shape = lead.to_vec();
        shape.extend([m, n]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            &[a, b],
            Op::MatMul { a, b, tb },
        ))
    }

    /// Element-wise sum; `b` may broadcast over leading axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::Shape {
                op: "add",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let av = self.nodes[a.0].value.data();
        let bv = self.nodes[b.0].value.data();
        let mut out = av.to_vec();
        for chunk in out.chunks_exact_mut(bv.len()) {
            for (o, &y) in chunk.iter_mut().zip(bv) {
                *o += y;
            }
        }
        let shape = sa.to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), &[a, b], Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa != sb {
            return Err(Error::Shape {
                op: "mul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let av = self.nodes[a.0].value.data();
        let bv = self.nodes[b.0].value.data();
        let out = av.iter().zip(bv).map(|(&x, &y)| x * y).collect();
        let shape = sa.to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), &[a, b], Op::Mul { a, b }))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let v = &self.nodes[a.0].value;
        let out = v.data().iter().map(|&x| x * factor).collect();
        let t = Tensor::from_parts(v.shape().to_vec(), out);
        self.push(t, &[a], Op::Scale { a, factor })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.0].value;
        let out = v
            .data()
            .iter()
            .map(|&x| if x > T::zero() { x } else { T::zero() })
            .collect();
        let t = Tensor::from_parts(v.shape().to_vec(), out);
        self.push(t, &[a], Op::Relu { a })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.0].value;
        let out = v.data().iter().map(|&x| gelu_parts(x).0).collect();
        let t = Tensor::from_parts(v.shape().to_vec(), out);
        self.push(t, &[a], Op::Gelu { a })
    }

    /// Max-stabilized softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let rank = self.shape(a).len();
        if axis >= rank {
            return Err(Error::Input(format!("softmax axis {axis} for rank {rank}")));
        }
        if axis == rank - 1 {
            return self.masked_softmax(a, AttentionMask::none());
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(axis, rank - 1);
        let moved = self.permute(a, &perm)?;
        let s = self.masked_softmax(moved, AttentionMask::none())?;
        self.permute(s, &perm)
    }

    /// Softmax over the last axis of `[batch, heads, queries, keys]` (or any
    /// rank when no mask is given). Masked keys receive probability zero.
    pub fn masked_softmax(&mut self, a: Var, mask: AttentionMask<'_>) -> Result<Var> {
        let v = &self.nodes[a.0].value;
        let shape = v.shape().to_vec();
        let cols = v.last_dim();
        let masked = mask.key_padding.is_some() || mask.causal;
        let (batch, per_batch, queries) = if masked {
            if shape.len() != 4 {
                return Err(Error::contract(format!(
                    "masked softmax expects [batch, heads, queries, keys], got {shape:?}"
                )));
            }
            if let Some(p) = mask.key_padding {
                if p.len() != shape[0] * cols {
                    return Err(Error::Shape {
                        op: "masked_softmax",
                        lhs: shape,
                        rhs: vec![p.len()],
                    });
                }
            }
            (shape[0], shape[1] * shape[2], shape[2])
        } else {
            (1, v.len() / cols, 1)
        };
        let src = v.data();
        let mut out = vec![T::zero(); src.len()];
        for (r, (row, dst)) in src
            .chunks_exact(cols)
            .zip(out.chunks_exact_mut(cols))
            .enumerate()
        {
            let b = (r / per_batch).min(batch - 1);
            let q = r % queries;
            let allowed = |j: usize| {
                !(mask.causal && j > q)
                    && !mask.key_padding.is_some_and(|p| p[b * cols + j])
            };
            let mut max = T::neg_infinity();
            for (j, &x) in row.iter().enumerate() {
                if allowed(j) && x > max {
                    max = x;
                }
            }
            if max == T::neg_infinity() {
                continue;
            }
            let mut total = T::zero();
            for (j, (&x, d)) in row.iter().zip(dst.iter_mut()).enumerate() {
                if allowed(j) {
                    let e = (x - max).exp();
                    *d = e;
                    total += e;
                }
            }
            let inv = T::one() / total;
            for d in dst.iter_mut() {
                *d *= inv;
            }
        }
        Ok(self.push(Tensor::from_parts(shape, out), &[a], Op::Softmax { a }))
    }

    /// Scaled dot-product attention over `heads` equal slices of the model
    /// dimension. `q` is `[batch, queries, d]`, `k` and `v` are
    /// `[batch, keys, d]`; the result is `[batch, queries, d]` with heads
    /// concatenated. Masked keys get weight zero.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, mask: AttentionMask<'_>) -> Result<Var> {
        let sq = self.shape(q).to_vec();
        let sk = self.shape(k).to_vec();
        let sv = self.shape(v).to_vec();
        if sq.len() != 3 || sk != sv || sk.len() != 3 || sq[0] != sk[0] || sq[2] != sk[2] || heads == 0 || !sq[2].is_multiple_of(heads) {
            return Err(Error::Shape {
                op: "attention",
                lhs: sq,
                rhs: sk,
            });
        }
        let (batch, tq, d) = (sq[0], sq[1], sq[2]);
        let tk = sk[1];
        if mask.key_padding.is_some_and(|p| p.len() != batch * tk) {
            return Err(Error::Shape {
                op: "attention",
                lhs: vec![batch, tk],
                rhs: vec![mask.key_padding.unwrap().len()],
            });
        }
        let dh = d / heads;
        let scale = T::lit(1.0 / (dh as f64).sqrt());
        let (qv, kv, vv) = (
            self.nodes[q.0].value.data(),
            self.nodes[k.0].value.data(),
            self.nodes[v.0].value.data(),
        );
        let mut probs = vec![T::zero(); batch * heads * tq * tk];
        let mut out = vec![T::zero(); batch * tq * d];
        for b in 0..batch {
            for h in 0..heads {
                let pbase = (b * heads + h) * tq * tk;
                gemm_view(
                    tq,
                    dh,
                    tk,
                    scale,
                    qv,
                    View::new(b * tq * d + h * dh, d, 1),
                    kv,
                    View::new(b * tk * d + h * dh, 1, d),
                    T::zero(),
                    &mut probs,
                    View::new(pbase, tk, 1),
                );
                for i in 0..tq {
                    let row = &mut probs[pbase + i * tk..pbase + (i + 1) * tk];
                    let allowed =
                        |j: usize| !(mask.causal && j > i) && !mask.key_padding.is_some_and(|p| p[b * tk + j]);
                    let mut max = T::neg_infinity();
                    for (j, &x) in row.iter().enumerate() {
                        if allowed(j) && x > max {
                            max = x;
                        }
                    }
                    let mut total = T::zero();
                    for (j, x) in row.iter_mut().enumerate() {
                        if allowed(j) {
                            *x = (*x - max).exp();
                            total += *x;
                        } else {
                            *x = T::zero();
                        }
                    }
                    if total > T::zero() {
                        let inv = T::one() / total;
                        for x in row.iter_mut() {
                            *x *= inv;
                        }
                    }
                }
                gemm_view(
                    tq,
                    tk,
                    dh,
                    T::one(),
                    &probs,
                    View::new(pbase, tk, 1),
                    vv,
                    View::new(b * tk * d + h * dh, d, 1),
                    T::zero(),
                    &mut out,
                    View::new(b * tq * d + h * dh, d, 1),
                );
            }
        }
        Ok(self.push(
            Tensor::from_parts(sq, out),
            &[q, k, v],
            Op::Attention {
                q,
                k,
                v,
                heads,
                scale,
                probs,
            },
        ))
    }

    /// Layer normalization over the last axis with affine `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let d = xv.last_dim();
        let gv = self.nodes[gain.0].value.data();
        let bv = self.nodes[bias.0].value.data();
        if gv.len() != d || bv.len() != d {
            return Err(Error::Shape {
                op: "layer_norm",
                lhs: xv.shape().to_vec(),
                rhs: self.nodes[gain.0].value.shape().to_vec(),
            });
        }
        let eps = T::lit(eps);
        let dn = T::from_usize(d).unwrap();
        let rows = xv.len() / d;
        let mut xhat = vec![T::zero(); xv.len()];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.len()];
        for (r, row) in xv.data().chunks_exact(d).enumerate() {
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv[j] + bv[j];
            }
        }
        let shape = xv.shape().to_vec();
        Ok(self.push(
            Tensor::from_parts(shape, out),
            &[x, gain, bias],
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    /// Gathers rows of `table` (`[vocab, dim]`); output shape is
    /// `prefix ++ [dim]` with `product(prefix) == ids.len()`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], prefix: &[usize]) -> Result<Var> {
        let tv = &self.nodes[table.0].value;
        if tv.rank() != 2 || prefix.iter().product::<usize>() != ids.len() {
            return Err(Error::Shape {
                op: "embedding",
                lhs: tv.shape().to_vec(),
                rhs: prefix.to_vec(),
            });
        }
        let (vocab, dim) = (tv.shape()[0], tv.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Bounds {
                    index: id,
                    size: vocab,
                });
            }
            out.extend_from_slice(&tv.data()[id * dim..(id + 1) * dim]);
        }
        let mut shape = prefix.to_vec();
        shape.push(dim);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            &[table],
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Inverted dropout. A rate of zero returns `a` unchanged and draws
    /// nothing from `rng`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, rate: f64, rng: &mut R) -> Result<Var> {
        check_dropout_rate(rate)?;
        if rate == 0.0 {
            return Ok(a);
        }
        let keep_scale = T::lit(1.0 / (1.0 - rate));
        let v = &self.nodes[a.0].value;
        let mask: Vec<T> = (0..v.len())
            .map(|_| {
                if rng.gen::<f64>() < rate {
                    T::zero()
                } else {
                    keep_scale
                }
            })
            .collect();
        let out = v.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let t = Tensor::from_parts(v.shape().to_vec(), out);
        Ok(self.push(t, &[a], Op::Dropout { a, mask }))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = &self.nodes[a.0].value;
        if shape.iter().product::<usize>() != v.len() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: v.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let t = Tensor::from_parts(shape.to_vec(), v.data().to_vec());
        Ok(self.push(t, &[a], Op::Reshape { a }))
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let v = &self.nodes[a.0].value;
        let rank = v.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Input(format!("invalid permutation {perm:?} for rank {rank}")));
        }
        let shape: Vec<usize> = perm.iter().map(|&p| v.shape()[p]).collect();
        let mut out = vec![T::zero(); v.len()];
        for_each_permuted(v.shape(), perm, |o, i| out[o] = v.data()[i]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            &[a],
            Op::Permute {
                a,
                perm: perm.to_vec(),
            },
        ))
    }

    /// Row-wise select over the last axis: row `r` comes from `a` when
    /// `cond[r]`, otherwise from `b`.
    pub fn where_rows(&mut self, cond: &[bool], a: Var, b: Var) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        if av.shape() != bv.shape() || cond.len() * av.last_dim() != av.len() {
            return Err(Error::Shape {
                op: "where_rows",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let d = av.last_dim();
        let mut out = Vec::with_capacity(av.len());
        for (r, &c) in cond.iter().enumerate() {
            let src = if c { av.data() } else { bv.data() };
            out.extend_from_slice(&src[r * d..(r + 1) * d]);
        }
        let shape = av.shape().to_vec();
        Ok(self.push(
            Tensor::from_parts(shape, out),
            &[a, b],
            Op::WhereRows {
                cond: cond.to_vec(),
                a,
                b,
            },
        ))
    }

    /// Mean label-smoothed negative log-likelihood over rows with `mask[r]`.
    ///
    /// With smoothing `s` the target distribution is `(1 - s)` on the gold
    /// index plus `s / V` spread uniformly.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        mask: &[bool],
        smoothing: f64,
    ) -> Result<Var> {
        let lv = &self.nodes[logits.0].value;
        let vocab = lv.last_dim();
        let rows = lv.len() / vocab;
        if targets.len() != rows || mask.len() != rows {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: lv.shape().to_vec(),
                rhs: vec![targets.len(), mask.len()],
            });
        }
        if !(0.0..1.0).contains(&smoothing) {
            return Err(Error::config(format!("label smoothing {smoothing} outside [0, 1)")));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
            return Err(Error::Bounds {
                index: bad,
                size: vocab,
            });
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::contract("cross entropy over an empty mask"));
        }
        let s = T::lit(smoothing);
        let uniform = s / T::from_usize(vocab).unwrap();
        let mut probs = vec![T::zero(); lv.len()];
        let mut total = T::zero();
        for (r, row) in lv.data().chunks_exact(vocab).enumerate() {
            if !mask[r] {
                continue;
            }
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z = row.iter().map(|&x| (x - max).exp()).sum::<T>();
            let log_z = z.ln() + max;
            let p = &mut probs[r * vocab..(r + 1) * vocab];
            for (pj, &x) in p.iter_mut().zip(row) {
                *pj = (x - log_z).exp();
            }
            let mut row_loss = -(row[targets[r]] - log_z);
            if smoothing > 0.0 {
                let sum_logp = row.iter().map(|&x| x - log_z).sum::<T>();
                row_loss = (T::one() - s) * row_loss - uniform * sum_logp;
            }
            total += row_loss;
        }
        let loss = total / T::from_usize(count).unwrap();
        Ok(self.push(
            Tensor::scalar(loss),
            &[logits],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                smoothing: s,
                probs,
                count,
            },
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.nodes[a.0].value.data().iter().copied().sum();
        self.push(Tensor::scalar(total), &[a], Op::Sum { a })
    }

    /// Populates gradients of every tracked node reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::contract(
                "backward already ran on this tape; call zero_grads first",
            ));
        }
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::contract("loss does not depend on any tracked tensor"));
        }
        self.backward_done = true;
        self.nodes[loss.0].grad = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = node.grad.as_deref() else {
                continue;
            };
            propagate(before, &node.op, &node.value, g);
        }
        Ok(())
    }
}

pub(crate) fn check_dropout_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::config(format!("dropout rate {rate} outside [0, 1)")));
    }
    Ok(())
}

impl AttentionMask<'_> {
    pub fn none() -> Self {
        AttentionMask {
            key_padding: None,
            causal: false,
        }
    }
}

fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let a = T::lit(0.044715);
    let half = T::lit(0.5);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let y = half * x * (T::one() + t);
    let dy = half * (T::one() + t)
        + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * a * x * x);
    (y, dy)
}

/// Calls `f(out_index, in_index)` for every element of a permuted copy.
fn for_each_permuted(shape: &[usize], perm: &[usize], mut f: impl FnMut(usize, usize)) {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total: usize = shape.iter().product();
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for o in 0..total {
        f(o, src);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            src += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            src -= strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
}

fn take_grad<T: Scalar>(nodes: &mut [Node<T>], v: Var) -> Option<Vec<T>> {
    let n = &mut nodes[v.0];
    if !n.requires_grad {
        return None;
    }
    Some(n.grad.take().unwrap_or_else(|| vec![T::zero(); n.value.len()]))
}

fn with_grad<T: Scalar>(nodes: &mut [Node<T>], v: Var, f: impl FnOnce(&[Node<T>], &mut [T])) {
    if let Some(mut g) = take_grad(nodes, v) {
        f(nodes, &mut g);
        nodes[v.0].grad = Some(g);
    }
}

fn propagate<T: Scalar>(nodes: &mut [Node<T>], op: &Op<T>, out: &Tensor<T>, g: &[T]) {
    match op {
        Op::Leaf => {}
        Op::MatMul { a, b, tb } => {
            let tb = *tb;
            let sa = nodes[a.0].value.shape().to_vec();
            let sb = nodes[b.0].value.shape().to_vec();
            let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
            let n = out.last_dim();
            let batch: usize = sa[..sa.len() - 2].iter().product();
            let shared = sb.len() == 2;
            with_grad(nodes, *a, |nodes, ga| {
                let bv = nodes[b.0].value.data();
                // dA = g · op(B)ᵀ
                if shared {
                    gemm(batch * m, n, k, g, false, bv, !tb, ga, true);
                } else {
                    for i in 0..batch {
                        gemm(
                            m,
                            n,
                            k,
                            &g[i * m * n..],
                            false,
                            &bv[i * k * n..],
                            !tb,
                            &mut ga[i * m * k..],
                            true,
                        );
                    }
                }
            });
            with_grad(nodes, *b, |nodes, gb| {
                let av = nodes[a.0].value.data();
                let rows = if shared { batch * m } else { m };
                let reps = if shared { 1 } else { batch };
                for i in 0..reps {
                    let (gi, ai) = (&g[i * rows * n..], &av[i * rows * k..]);
                    let dst = &mut gb[i * k * n..];
                    if tb {
                        // dB[n,k] = gᵀ · A
                        gemm(n, rows, k, gi, true, ai, false, dst, true);
                    } else {
                        // dB[k,n] = Aᵀ · g
                        gemm(k, rows, n, ai, true, gi, false, dst, true);
                    }
                }
            });
        }
        Op::Add { a, b } => {
            with_grad(nodes, *a, |_, ga| {
                for (x, &y) in ga.iter_mut().zip(g) {
                    *x += y;
                }
            });
            with_grad(nodes, *b, |_, gb| {
                for chunk in g.chunks_exact(gb.len()) {
                    for (x, &y) in gb.iter_mut().zip(chunk) {
                        *x += y;
                    }
                }
            });
        }
        Op::Mul { a, b } => {
            with_grad(nodes, *a, |nodes, ga| {
                let bv = nodes[b.0].value.data();
                for ((x, &y), &w) in ga.iter_mut().zip(g).zip(bv) {
                    *x += y * w;
                }
            });
            with_grad(nodes, *b, |nodes, gb| {
                let av = nodes[a.0].value.data();
                for ((x, &y), &w) in gb.iter_mut().zip(g).zip(av) {
                    *x += y * w;
                }
            });
        }
        Op::Scale { a, factor } => with_grad(nodes, *a, |_, ga| {
            for (x, &y) in ga.iter_mut().zip(g) {
                *x += y * *factor;
            }
        }),
        Op::Relu { a } => with_grad(nodes, *a, |_, ga| {
            for ((x, &y), &o) in ga.iter_mut().zip(g).zip(out.data()) {
                if o > T::zero() {
                    *x += y;
                }
            }
        }),
        Op::Gelu { a } => with_grad(nodes, *a, |nodes, ga| {
            let av = nodes[a.0].value.data();
            for ((x, &y), &v) in ga.iter_mut().zip(g).zip(av) {
                *x += y * gelu_parts(v).1;
            }
        }),
        Op::Softmax { a } => with_grad(nodes, *a, |_, ga| {
            let cols = out.last_dim();
            for ((gx, gy), y) in ga
                .chunks_exact_mut(cols)
                .zip(g.chunks_exact(cols))
                .zip(out.data().chunks_exact(cols))
            {
                let dot: T = gy.iter().zip(y).map(|(&a, &b)| a * b).sum();
                for j in 0..cols {
                    gx[j] += y[j] * (gy[j] - dot);
                }
            }
        }),
        Op::Attention {
            q,
            k,
            v,
            heads,
            scale,
            probs,
        } => {
            let heads = *heads;
            let sq = nodes[q.0].value.shape();
            let (batch, tq, d) = (sq[0], sq[1], sq[2]);
            let tk = nodes[k.0].value.shape()[1];
            let dh = d / heads;
            let (one, zero) = (T::one(), T::zero());
            // dS = P ⊙ (dP - rowsum(dP ⊙ P)) · scale, with dP = G·Vᵀ
            let mut ds = vec![zero; probs.len()];
            {
                let vv = nodes[v.0].value.data();
                for b in 0..batch {
                    for h in 0..heads {
                        let pbase = (b * heads + h) * tq * tk;
                        gemm_view(
                            tq,
                            dh,
                            tk,
                            one,
                            g,
                            View::new(b * tq * d + h * dh, d, 1),
                            vv,
                            View::new(b * tk * d + h * dh, 1, d),
                            zero,
                            &mut ds,
                            View::new(pbase, tk, 1),
                        );
                        for i in 0..tq {
                            let r = pbase + i * tk..pbase + (i + 1) * tk;
                            let (dp, p) = (&mut ds[r.clone()], &probs[r]);
                            let dot: T = dp.iter().zip(p).map(|(&x, &y)| x * y).sum();
                            for (x, &y) in dp.iter_mut().zip(p) {
                                *x = y * (*x - dot) * *scale;
                            }
                        }
                    }
                }
            }
            with_grad(nodes, *v, |_, gv| {
                for b in 0..batch {
                    for h in 0..heads {
                        let pbase = (b * heads + h) * tq * tk;
                        gemm_view(
                            tk,
                            tq,
                            dh,
                            one,
                            probs,
                            View::new(pbase, 1, tk),
                            g,
                            View::new(b * tq * d + h * dh, d, 1),
                            one,
                            gv,
                            View::new(b * tk * d + h * dh, d, 1),
                        );
                    }
                }
            });
            with_grad(nodes, *q, |nodes, gq| {
                let kv = nodes[k.0].value.data();
                for b in 0..batch {
                    for h in 0..heads {
                        let pbase = (b * heads + h) * tq * tk;
                        gemm_view(
                            tq,
                            tk,
                            dh,
                            one,
                            &ds,
                            View::new(pbase, tk, 1),
                            kv,
                            View::new(b * tk * d + h * dh, d, 1),
                            one,
                            gq,
                            View::new(b * tq * d + h * dh, d, 1),
                        );
                    }
                }
            });
            with_grad(nodes, *k, |nodes, gk| {
                let qv = nodes[q.0].value.data();
                for b in 0..batch {
                    for h in 0..heads {
                        let pbase = (b * heads + h) * tq * tk;
                        gemm_view(
                            tk,
                            tq,
                            dh,
                            one,
                            &ds,
                            View::new(pbase, 1, tk),
                            qv,
                            View::new(b * tq * d + h * dh, d, 1),
                            one,
                            gk,
                            View::new(b * tk * d + h * dh, d, 1),
                        );
                    }
                }
            });
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        } => {
            let d = out.last_dim();
            with_grad(nodes, *x, |nodes, gx| {
                let gv = nodes[gain.0].value.data();
                let dn = T::from_usize(d).unwrap();
                let mut dxhat = vec![T::zero(); d];
                for (r, &is) in inv_std.iter().enumerate() {
                    let gy = &g[r * d..(r + 1) * d];
                    let xh = &xhat[r * d..(r + 1) * d];
                    let mut sum = T::zero();
                    let mut dot = T::zero();
                    for j in 0..d {
                        dxhat[j] = gy[j] * gv[j];
                        sum += dxhat[j];
                        dot += dxhat[j] * xh[j];
                    }
                    let dst = &mut gx[r * d..(r + 1) * d];
                    for j in 0..d {
                        dst[j] += is / dn * (dn * dxhat[j] - sum - xh[j] * dot);
                    }
                }
            });
            with_grad(nodes, *gain, |_, gg| {
                for (gy, xh) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                    for j in 0..d {
                        gg[j] += gy[j] * xh[j];
                    }
                }
            });
            with_grad(nodes, *bias, |_, gb| {
                for gy in g.chunks_exact(d) {
                    for (x, &y) in gb.iter_mut().zip(gy) {
                        *x += y;
                    }
                }
            });
        }
        Op::Embedding { table, ids } => with_grad(nodes, *table, |_, gt| {
            let d = out.last_dim();
            for (r, &id) in ids.iter().enumerate() {
                for (x, &y) in gt[id * d..(id + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]) {
                    *x += y;
                }
            }
        }),
        Op::Dropout { a, mask } => with_grad(nodes, *a, |_, ga| {
            for ((x, &y), &m) in ga.iter_mut().zip(g).zip(mask) {
                *x += y * m;
            }
        }),
        Op::Reshape { a } => with_grad(nodes, *a, |_, ga| {
            for (x, &y) in ga.iter_mut().zip(g) {
                *x += y;
            }
        }),
        Op::Permute { a, perm } => with_grad(nodes, *a, |nodes, ga| {
            let shape = nodes[a.0].value.shape().to_vec();
            for_each_permuted(&shape, perm, |o, i| ga[i] += g[o]);
        }),
        Op::WhereRows { cond, a, b } => {
            let d = out.last_dim();
            for (v, pick) in [(*a, true), (*b, false)] {
                with_grad(nodes, v, |_, gv| {
                    for (r, &c) in cond.iter().enumerate() {
                        if c == pick {
                            for (x, &y) in gv[r * d..(r + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]) {
                                *x += y;
                            }
                        }
                    }
                });
            }
        }
        Op::CrossEntropy {
            logits,
            targets,
            mask,
            smoothing,
            probs,
            count,
        } => with_grad(nodes, *logits, |_, gl| {
            let vocab = probs.len() / targets.len();
            let scale = g[0] / T::from_usize(*count).unwrap();
            let uniform = *smoothing / T::from_usize(vocab).unwrap();
            let gold = T::one() - *smoothing;
            for (r, (&t, &m)) in targets.iter().zip(mask).enumerate() {
                if !m {
                    continue;
                }
                let p = &probs[r * vocab..(r + 1) * vocab];
                let dst = &mut gl[r * vocab..(r + 1) * vocab];
                for j in 0..vocab {
                    let q = if j == t { gold + uniform } else { uniform };
                    dst[j] += scale * (p[j] - q);
                }
            }
        }),
        Op::Sum { a } => with_grad(nodes, *a, |_, ga| {
            for x in ga.iter_mut() {
                *x += g[0];
            }
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    /// Central-difference check of `build` (which must return a scalar)
    /// with respect to every element of every input.
    fn check_grads(inputs: Vec<Tensor<f64>>, build: impl Fn(&mut Tape<f64>, &[Var]) -> Var) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
        let loss = build(&mut tape, &vars);
        tape.backward(loss).unwrap();
        let h = 1e-5;
        for (i, x) in inputs.iter().enumerate() {
            let analytic = tape.grad(vars[i]).map(|g| g.to_vec()).unwrap_or(vec![0.0; x.len()]);
            for j in 0..x.len() {
                let eval = |delta: f64| {
                    let mut t2 = Tape::new();
                    let vs: Vec<Var> = inputs
                        .iter()
                        .enumerate()
                        .map(|(k, y)| {
                            let mut y = y.clone();
                            if k == i {
                                y.data_mut()[j] += delta;
                            }
                            t2.param(y)
                        })
                        .collect();
                    let l = build(&mut t2, &vs);
                    t2.value(l).item()
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                let denom = numeric.abs().max(analytic[j].abs()).max(1e-8);
                let rel = (numeric - analytic[j]).abs() / denom;
                assert!(
                    rel < 1e-6 || (numeric - analytic[j]).abs() < 1e-9,
                    "input {i} elem {j}: analytic {} numeric {numeric}",
                    analytic[j]
                );
            }
        }
    }

    /// Weighted sum so every output element gets a distinct adjoint.
    fn weighted_sum(tape: &mut Tape<f64>, v: Var) -> Var {
        let shape = tape.shape(v).to_vec();
        let w = tape.constant(Tensor::from_fn(&shape, |i| ((i * 7 % 11) as f64 - 5.0) / 3.0));
        let p = tape.mul(v, w).unwrap();
        tape.sum(p)
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut tape = Tape::new();
        let eye = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = tape.constant(t(&[2, 2], &[3.0, -1.0, 2.5, 7.0]));
        let p = tape.matmul(eye, m).unwrap();
        assert_eq!(tape.value(p).data(), &[3.0, -1.0, 2.5, 7.0]);

        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let ones = tape.constant(t(&[2, 1], &[1.0, 1.0]));
        let p = tape.matmul(a, ones).unwrap();
        assert_eq!(tape.value(p).shape(), &[2, 1]);
        assert_eq!(tape.value(p).data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let msg = tape.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn matmul_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        check_grads(vec![random(&[3, 4], &mut rng), random(&[4, 2], &mut rng)], |tp, v| {
            let p = tp.matmul(v[0], v[1]).unwrap();
            tp.sum(p)
        });
        // batched lhs with shared rhs, transposed rhs, and fully batched
        check_grads(vec![random(&[2, 3, 4], &mut rng), random(&[4, 5], &mut rng)], |tp, v| {
            let p = tp.matmul(v[0], v[1]).unwrap();
            weighted_sum(tp, p)
        });
        check_grads(vec![random(&[2, 3, 4], &mut rng), random(&[5, 4], &mut rng)], |tp, v| {
            let p = tp.matmul_nt(v[0], v[1]).unwrap();
            weighted_sum(tp, p)
        });
        check_grads(
            vec![random(&[2, 2, 3, 4], &mut rng), random(&[2, 2, 5, 4], &mut rng)],
            |tp, v| {
                let p = tp.matmul_nt(v[0], v[1]).unwrap();
                weighted_sum(tp, p)
            },
        );
        check_grads(
            vec![random(&[2, 3, 4], &mut rng), random(&[2, 4, 2], &mut rng)],
            |tp, v| {
                let p = tp.matmul(v[0], v[1]).unwrap();
                weighted_sum(tp, p)
            },
        );
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[0.0, 0.0]));
        let s = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(s).data(), &[0.5, 0.5]);

        let x = tape.constant(t(&[2], &[1000.0, 0.0]));
        let s = tape.softmax(x, 0).unwrap();
        let v = tape.value(s).data();
        assert!(v.iter().all(|p| p.is_finite()));
        assert!((v[0] - 1.0).abs() < 1e-12 && v[1] < 1e-300);

        let x = tape.constant(t(&[3], &[1f64.ln(), 2f64.ln(), 3f64.ln()]));
        let s = tape.softmax(x, 0).unwrap();
        for (p, e) in tape.value(s).data().iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!((p - e).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_along_leading_axis() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 2], &[0.0, 1.0, 0.0, 1.0]));
        let s = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(s).data(), &[0.5, 0.5, 0.5, 0.5]);
        assert!(tape.softmax(x, 2).is_err());
    }

    #[test]
    fn masked_softmax_zeroes_masked_keys() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[1, 1, 3, 3], |i| i as f64 * 0.1));
        let pad = [false, false, true];
        let s = tape
            .masked_softmax(
                x,
                AttentionMask {
                    key_padding: Some(&pad),
                    causal: true,
                },
            )
            .unwrap();
        let v = tape.value(s).data();
        assert_eq!(v[0], 1.0);
        assert_eq!(&v[1..3], &[0.0, 0.0]);
        assert_eq!(v[5], 0.0);
        assert_eq!(v[8], 0.0);
        assert!((v[6] + v[7] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn elementwise_and_structural_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        check_grads(vec![random(&[2, 3, 4], &mut rng), random(&[4], &mut rng)], |tp, v| {
            let s = tp.add(v[0], v[1]).unwrap();
            weighted_sum(tp, s)
        });
        check_grads(vec![random(&[3, 4], &mut rng), random(&[3, 4], &mut rng)], |tp, v| {
            let s = tp.mul(v[0], v[1]).unwrap();
            weighted_sum(tp, s)
        });
        check_grads(vec![random(&[3, 4], &mut rng)], |tp, v| {
            let s = tp.mul(v[0], v[0]).unwrap();
            let s = tp.scale(s, -0.7);
            weighted_sum(tp, s)
        });
        check_grads(vec![random(&[3, 5], &mut rng)], |tp, v| {
            let s = tp.gelu(v[0]);
            weighted_sum(tp, s)
        });
        check_grads(vec![random(&[3, 5], &mut rng)], |tp, v| {
            let s = tp.relu(v[0]);
            weighted_sum(tp, s)
        });
        check_grads(vec![random(&[2, 3, 5], &mut rng)], |tp, v| {
            let s = tp.softmax(v[0], 2).unwrap();
            weighted_sum(tp, s)
        });
        check_grads(vec![random(&[2, 3, 4, 5], &mut rng)], |tp, v| {
            let p = tp.permute(v[0], &[0, 2, 1, 3]).unwrap();
            let r = tp.reshape(p, &[6, 20]).unwrap();
            weighted_sum(tp, r)
        });
        check_grads(
            vec![random(&[3, 6], &mut rng), random(&[6], &mut rng), random(&[6], &mut rng)],
            |tp, v| {
                let s = tp.layer_norm(v[0], v[1], v[2], 1e-5).unwrap();
                weighted_sum(tp, s)
            },
        );
        check_grads(vec![random(&[5, 3], &mut rng)], |tp, v| {
            let e = tp.embedding(v[0], &[4, 1, 4, 0], &[2, 2]).unwrap();
            weighted_sum(tp, e)
        });
        check_grads(vec![random(&[3, 4], &mut rng), random(&[3, 4], &mut rng)], |tp, v| {
            let w = tp.where_rows(&[true, false, true], v[0], v[1]).unwrap();
            weighted_sum(tp, w)
        });
        check_grads(vec![random(&[1, 2, 3, 3], &mut rng)], |tp, v| {
            let pad = [false, false, true];
            let s = tp
                .masked_softmax(
                    v[0],
                    AttentionMask {
                        key_padding: Some(&pad),
                        causal: true,
                    },
                )
                .unwrap();
            weighted_sum(tp, s)
        });
        check_grads(vec![random(&[4, 8], &mut rng)], |tp, v| {
            tp.cross_entropy(v[0], &[1, 7, 0, 3], &[true, true, false, true], 0.1).unwrap()
        });
    }

    /// Attention assembled from reshape, permute, matmul and masked softmax.
    fn composed_attention(tp: &mut Tape<f64>, q: Var, k: Var, v: Var, heads: usize, mask: AttentionMask<'_>) -> Var {
        let (b, tq, d) = {
            let s = tp.shape(q);
            (s[0], s[1], s[2])
        };
        let tk = tp.shape(k)[1];
        let dh = d / heads;
        let mut split = |x: Var, t: usize| {
            let r = tp.reshape(x, &[b, t, heads, dh]).unwrap();
            tp.permute(r, &[0, 2, 1, 3]).unwrap()
        };
        let (q, k, v) = (split(q, tq), split(k, tk), split(v, tk));
        let s = tp.matmul_nt(q, k).unwrap();
        let s = tp.scale(s, 1.0 / (dh as f64).sqrt());
        let p = tp.masked_softmax(s, mask).unwrap();
        let o = tp.matmul(p, v).unwrap();
        let o = tp.permute(o, &[0, 2, 1, 3]).unwrap();
        tp.reshape(o, &[b, tq, d]).unwrap()
    }

    #[test]
    fn fused_attention_matches_composition_and_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pad = [false, false, true, false, false, false];
        let masks = [
            AttentionMask::none(),
            AttentionMask {
                key_padding: Some(&pad),
                causal: false,
            },
            AttentionMask {
                key_padding: None,
                causal: true,
            },
        ];
        for mask in masks {
            let q = random(&[2, 3, 4], &mut rng);
            let k = random(&[2, 3, 4], &mut rng);
            let v = random(&[2, 3, 4], &mut rng);
            let mut tape = Tape::new();
            let (qv, kv, vv) = (tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()));
            let fused = tape.attention(qv, kv, vv, 2, mask).unwrap();
            let reference = composed_attention(&mut tape, qv, kv, vv, 2, mask);
            for (a, b) in tape.value(fused).data().iter().zip(tape.value(reference).data()) {
                assert!((a - b).abs() < 1e-12);
            }
            check_grads(vec![q, k, v], |tp, x| {
                let o = tp.attention(x[0], x[1], x[2], 2, mask).unwrap();
                weighted_sum(tp, o)
            });
        }
        // cross attention with a different key length, shared q/k/v input
        let x = random(&[2, 4, 6], &mut rng);
        let m = random(&[2, 5, 6], &mut rng);
        check_grads(vec![x, m], |tp, v| {
            let o = tp.attention(v[0], v[1], v[1], 3, AttentionMask::none()).unwrap();
            weighted_sum(tp, o)
        });
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[1, 2, 6]));
        assert!(tape.attention(a, a, a, 4, AttentionMask::none()).is_err());
    }

    #[test]
    fn cross_entropy_limits() {
        let mut tape = Tape::new();
        let logits = tape.constant(t(&[1, 3], &[0.0, 800.0, 0.0]));
        let l = tape.cross_entropy(logits, &[1], &[true], 0.0).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);

        let v = 8;
        let logits = tape.constant(Tensor::zeros(&[3, v]));
        let l = tape.cross_entropy(logits, &[0, 5, 7], &[true; 3], 0.1).unwrap();
        assert!((tape.value(l).item() - (v as f64).ln()).abs() < 1e-12);

        assert!(matches!(
            tape.cross_entropy(logits, &[0, 8, 1], &[true; 3], 0.0),
            Err(Error::Bounds { index: 8, size: 8 })
        ));
    }

    #[test]
    fn cross_entropy_matches_brute_force_log_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let logits = random(&[4, 8], &mut rng);
        let targets = [2, 0, 7, 5];
        let mut tape = Tape::new();
        let lv = tape.constant(logits.clone());
        let l = tape.cross_entropy(lv, &targets, &[true; 4], 0.0).unwrap();
        let mut expected = 0.0;
        for (r, &y) in targets.iter().enumerate() {
            let row = &logits.data()[r * 8..(r + 1) * 8];
            let z: f64 = row.iter().map(|x| x.exp()).sum();
            expected -= (row[y].exp() / z).ln();
        }
        expected /= 4.0;
        assert!((tape.value(l).item() - expected).abs() < 1e-9);
    }

    #[test]
    fn dropout_identity_and_rate_validation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut tape = Tape::new();
        let x = tape.param(random(&[4, 4], &mut rng));
        let before = rng.clone();
        let y = tape.dropout(x, 0.0, &mut rng).unwrap();
        assert_eq!(x, y);
        assert_eq!(rng, before);
        assert!(matches!(tape.dropout(x, 1.0, &mut rng), Err(Error::Config(_))));
        assert!(matches!(tape.dropout(x, -0.1, &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn dropout_preserves_expectation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 10_000;
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[n], 1.0));
        let y = tape.dropout(x, 0.5, &mut rng).unwrap();
        let mean = tape.value(y).data().iter().sum::<f64>() / n as f64;
        // each element is 0 or 2 with equal probability: sd 1 per element
        let sigma = 1.0 / (n as f64).sqrt();
        assert!((mean - 1.0).abs() < 3.0 * sigma, "mean {mean}");
    }

    #[test]
    fn layer_norm_of_constant_is_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[2, 5], 3.25));
        let g = tape.constant(Tensor::full(&[5], 1.0));
        let b = tape.constant(Tensor::zeros(&[5]));
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_contract() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[3], &[1.0, -2.0, 0.5]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
        assert!(matches!(tape.backward(s), Err(Error::Contract(_))));
        tape.zero_grads();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);

        let mut tape = Tape::new();
        let x = tape.param(t(&[3], &[1.0, -2.0, 0.5]));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn constant_subgraphs_keep_no_adjoint_state() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::full(&[2, 2], 1.0));
        let b = tape.matmul(a, a).unwrap();
        assert!(!tape.requires_grad(b));
        let s = tape.sum(b);
        assert!(tape.backward(s).is_err());
    }
}
