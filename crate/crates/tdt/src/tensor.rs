//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! Every operation records its inputs in an op graph; calling
//! [`Tensor::backward`] on a scalar replays the graph in reverse
//! topological order and accumulates gradients into every
//! gradient-requiring tensor exactly once. Tensors are immutable after
//! creation; a fresh graph is built per optimization step and freed when
//! the loss tensor is dropped.

use std::cell::RefCell;
use std::collections::HashSet;
use std::rc::Rc;
use std::sync::atomic::{AtomicUsize, Ordering};

use thiserror::Error;

/// Floor applied to probabilities inside logarithms.
pub const PROB_EPS: f64 = 1e-12;

static NEXT_ID: AtomicUsize = AtomicUsize::new(0);

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("non-finite value encountered in {0}")]
    NonFinite(String),
}

#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

struct Inner {
    id: usize,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
    parents: Vec<Tensor>,
    op: Op,
}

enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    AddScalar,
    Scale(f64),
    AddBias,
    MulBias,
    MatMul { batch: usize, m: usize, k: usize, n: usize },
    Permute { perm: Vec<usize> },
    Reshape,
    Gather { ids: Vec<usize> },
    Broadcast { reps: usize },
    SumAxis { axis: usize },
    MeanAxis { axis: usize },
    MeanAll,
    Log,
    Exp,
    Tanh,
    Relu,
    Sigmoid,
    SoftmaxLast,
    LogSoftmaxLast,
    LayerNorm { eps: f64 },
    ConcatLast,
    L2NormLast,
    CrossEntropyProbs { labels: Vec<usize> },
    KlLast,
    ScaleRows,
    SelectAxis1 { index: usize },
    StraightThrough,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn node(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, parents: Vec<Tensor>, op: Op) -> Tensor {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor {
            inner: Rc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data,
                requires_grad,
                grad: RefCell::new(None),
                parents,
                op,
            }),
        }
    }

    /// A leaf that does not require gradients.
    pub fn constant(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        assert_eq!(numel(&shape), data.len(), "constant: shape {:?} vs {} elems", shape, data.len());
        Tensor::node(shape, data, false, vec![], Op::Leaf)
    }

    /// A leaf that participates in gradient computation.
    pub fn param(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        assert_eq!(numel(&shape), data.len(), "param: shape {:?} vs {} elems", shape, data.len());
        Tensor::node(shape, data, true, vec![], Op::Leaf)
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::constant(vec![], vec![v])
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let n = numel(&shape);
        Tensor::constant(shape, vec![0.0; n])
    }

    pub fn ones(shape: Vec<usize>) -> Tensor {
        let n = numel(&shape);
        Tensor::constant(shape, vec![1.0; n])
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.inner.data
    }

    pub fn len(&self) -> usize {
        self.inner.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inner.data.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.len(), 1, "item() on tensor of shape {:?}", self.shape());
        self.inner.data[0]
    }

    /// Gradient populated by the last backward pass, if any.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn is_finite(&self) -> bool {
        self.inner.data.iter().all(|v| v.is_finite())
    }

    fn out_grad(parents: &[Tensor]) -> bool {
        parents.iter().any(|p| p.inner.requires_grad)
    }

    fn unary(&self, op: Op, data: Vec<f64>) -> Tensor {
        let parents = vec![self.clone()];
        let rg = Tensor::out_grad(&parents);
        Tensor::node(self.shape().to_vec(), data, rg, parents, op)
    }

    // ---- elementwise binary ----

    fn same_shape(&self, other: &Tensor, what: &str) {
        assert_eq!(self.shape(), other.shape(), "{what}: shape {:?} vs {:?}", self.shape(), other.shape());
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        self.same_shape(other, "add");
        let data = self.data().iter().zip(other.data()).map(|(a, b)| a + b).collect();
        let parents = vec![self.clone(), other.clone()];
        let rg = Tensor::out_grad(&parents);
        Tensor::node(self.shape().to_vec(), data, rg, parents, Op::Add)
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        self.same_shape(other, "sub");
        let data = self.data().iter().zip(other.data()).map(|(a, b)| a - b).collect();
        let parents = vec![self.clone(), other.clone()];
        let rg = Tensor::out_grad(&parents);
        Tensor::node(self.shape().to_vec(), data, rg, parents, Op::Sub)
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Tensor) -> Tensor {
        self.same_shape(other, "mul");
        let data = self.data().iter().zip(other.data()).map(|(a, b)| a * b).collect();
        let parents = vec![self.clone(), other.clone()];
        let rg = Tensor::out_grad(&parents);
        Tensor::node(self.shape().to_vec(), data, rg, parents, Op::Mul)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        let data = self.data().iter().map(|a| a + c).collect();
        self.unary(Op::AddScalar, data)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let data = self.data().iter().map(|a| a * c).collect();
        self.unary(Op::Scale(c), data)
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    /// `[.., d] + [d]`, the bias vector broadcast over leading axes.
    pub fn add_bias(&self, bias: &Tensor) -> Tensor {
        let d = *self.shape().last().expect("add_bias: scalar lhs");
        assert_eq!(bias.shape(), [d], "add_bias: bias shape {:?}, lhs {:?}", bias.shape(), self.shape());
        let b = bias.data();
        let data = self.data().iter().enumerate().map(|(i, a)| a + b[i % d]).collect();
        let parents = vec![self.clone(), bias.clone()];
        let rg = Tensor::out_grad(&parents);
        Tensor::node(self.shape().to_vec(), data, rg, parents, Op::AddBias)
    }

    /// `[.., d] * [d]`, the row vector broadcast over leading axes.
    pub fn mul_bias(&self, vec: &Tensor) -> Tensor {
        let d = *self.shape().last().expect("mul_bias: scalar lhs");
        assert_eq!(vec.shape(), [d], "mul_bias: vec shape {:?}, lhs {:?}", vec.shape(), self.shape());
        let b = vec.data();
        let data = self.data().iter().enumerate().map(|(i, a)| a * b[i % d]).collect();
        let parents = vec![self.clone(), vec.clone()];
        let rg = Tensor::out_grad(&parents);
        Tensor::node(self.shape().to_vec(), data, rg, parents, Op::MulBias)
    }

    /// `[.., d] * [..]`, a per-row scalar broadcast over the last axis.
    pub fn scale_rows(&self, scales: &Tensor) -> Tensor {
        let d = *self.shape().last().expect("scale_rows: scalar lhs");
        assert_eq!(
            &self.shape()[..self.shape().len() - 1],
            scales.shape(),
            "scale_rows: scales shape {:?}, lhs {:?}",
            scales.shape(),
            self.shape()
        );
        let s = scales.data();
        let data = self.data().iter().enumerate().map(|(i, a)| a * s[i / d]).collect();
        let parents = vec![self.clone(), scales.clone()];
        let rg = Tensor::out_grad(&parents);
        Tensor::node(self.shape().to_vec(), data, rg, parents, Op::ScaleRows)
    }

    // ---- linear algebra ----

    /// Batched matrix product: `[.., m, k] x [.., k, n] -> [.., m, n]`
    /// with identical leading dims.
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        let (sa, sb) = (self.shape(), other.shape());
        assert!(sa.len() >= 2 && sb.len() >= 2, "matmul: shapes {:?} x {:?}", sa, sb);
        assert_eq!(
            &sa[..sa.len() - 2],
            &sb[..sb.len() - 2],
            "matmul: leading dims differ: {:?} vs {:?}",
            sa,
            sb
        );
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        assert_eq!(k, k2, "matmul: inner dims differ: {:?} x {:?}", sa, sb);
        let batch = numel(&sa[..sa.len() - 2]);
        let mut out = vec![0.0; batch * m * n];
        for g in 0..batch {
            let a = &self.data()[g * m * k..(g + 1) * m * k];
            let b = &other.data()[g * k * n..(g + 1) * k * n];
            let c = &mut out[g * m * n..(g + 1) * m * n];
            mat_mul_acc(a, b, c, m, k, n);
        }
        let mut shape = sa[..sa.len() - 2].to_vec();
        shape.push(m);
        shape.push(n);
        let parents = vec![self.clone(), other.clone()];
        let rg = Tensor::out_grad(&parents);
        Tensor::node(shape, out, rg, parents, Op::MatMul { batch, m, k, n })
    }

    pub fn permute(&self, perm: &[usize]) -> Tensor {
        let nd = self.shape().len();
        assert_eq!(perm.len(), nd, "permute: perm {:?} for shape {:?}", perm, self.shape());
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape()[p]).collect();
        let data = permute_data(self.data(), self.shape(), perm);
        let parents = vec![self.clone()];
        let rg = Tensor::out_grad(&parents);
        Tensor::node(out_shape, data, rg, parents, Op::Permute { perm: perm.to_vec() })
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Tensor {
        assert_eq!(numel(&shape), self.len(), "reshape: {:?} -> {:?}", self.shape(), shape);
        let parents = vec![self.clone()];
        let rg = Tensor::out_grad(&parents);
        Tensor::node(shape, self.data().to_vec(), rg, parents, Op::Reshape)
    }

    /// Row gather from a `[rows, d]` table; backward scatter-adds.
    pub fn gather(&self, ids: &[usize]) -> Tensor {
        assert_eq!(self.shape().len(), 2, "gather: table must be 2-d, got {:?}", self.shape());
        let (rows, d) = (self.shape()[0], self.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            assert!(id < rows, "gather: id {} out of range {}", id, rows);
            data.extend_from_slice(&self.data()[id * d..(id + 1) * d]);
        }
        let parents = vec![self.clone()];
        let rg = Tensor::out_grad(&parents);
        Tensor::node(vec![ids.len(), d], data, rg, parents, Op::Gather { ids: ids.to_vec() })
    }

    /// Tile the whole tensor `reps` times along a new leading axis.
    pub fn broadcast(&self, reps: usize) -> Tensor {
        let mut shape = vec![reps];
        shape.extend_from_slice(self.shape());
        let mut data = Vec::with_capacity(reps * self.len());
        for _ in 0..reps {
            data.extend_from_slice(self.data());
        }
        let parents = vec![self.clone()];
        let rg = Tensor::out_grad(&parents);
        Tensor::node(shape, data, rg, parents, Op::Broadcast { reps })
    }

    // ---- reductions ----

    pub fn sum_axis(&self, axis: usize) -> Tensor {
        let (out_shape, data) = reduce_axis(self.data(), self.shape(), axis, false);
        let parents = vec![self.clone()];
        let rg = Tensor::out_grad(&parents);
        Tensor::node(out_shape, data, rg, parents, Op::SumAxis { axis })
    }

    pub fn mean_axis(&self, axis: usize) -> Tensor {
        let (out_shape, data) = reduce_axis(self.data(), self.shape(), axis, true);
        let parents = vec![self.clone()];
        let rg = Tensor::out_grad(&parents);
        Tensor::node(out_shape, data, rg, parents, Op::MeanAxis { axis })
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.len().max(1);
        let v = self.data().iter().sum::<f64>() / n as f64;
        let parents = vec![self.clone()];
        let rg = Tensor::out_grad(&parents);
        Tensor::node(vec![], vec![v], rg, parents, Op::MeanAll)
    }

    // ---- elementwise nonlinearities ----

    pub fn log(&self) -> Tensor {
        let data = self.data().iter().map(|a| a.ln()).collect();
        self.unary(Op::Log, data)
    }

    pub fn exp(&self) -> Tensor {
        let data = self.data().iter().map(|a| a.exp()).collect();
        self.unary(Op::Exp, data)
    }

    pub fn tanh(&self) -> Tensor {
        let data = self.data().iter().map(|a| a.tanh()).collect();
        self.unary(Op::Tanh, data)
    }

    /// max(x, 0); subgradient at the kink is 0.
    pub fn relu(&self) -> Tensor {
        let data = self.data().iter().map(|a| a.max(0.0)).collect();
        self.unary(Op::Relu, data)
    }

    /// Alias for [`Tensor::relu`] in hinge-loss contexts.
    pub fn hinge(&self) -> Tensor {
        self.relu()
    }

    /// Numerically stable logistic function; saturates without overflow.
    pub fn sigmoid(&self) -> Tensor {
        let data = self.data().iter().map(|&a| stable_sigmoid(a)).collect();
        self.unary(Op::Sigmoid, data)
    }

    /// Softmax over the last axis, computed with max subtraction.
    pub fn softmax_last(&self) -> Tensor {
        let k = *self.shape().last().expect("softmax_last: scalar input");
        assert!(k >= 1);
        let mut data = vec![0.0; self.len()];
        for (row_out, row_in) in data.chunks_mut(k).zip(self.data().chunks(k)) {
            let mx = row_in.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (o, &v) in row_out.iter_mut().zip(row_in) {
                *o = (v - mx).exp();
                sum += *o;
            }
            for o in row_out.iter_mut() {
                *o /= sum;
            }
        }
        self.unary(Op::SoftmaxLast, data)
    }

    pub fn log_softmax_last(&self) -> Tensor {
        let k = *self.shape().last().expect("log_softmax_last: scalar input");
        assert!(k >= 1);
        let mut data = vec![0.0; self.len()];
        for (row_out, row_in) in data.chunks_mut(k).zip(self.data().chunks(k)) {
            let mx = row_in.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row_in.iter().map(|&v| (v - mx).exp()).sum::<f64>().ln() + mx;
            for (o, &v) in row_out.iter_mut().zip(row_in) {
                *o = v - lse;
            }
        }
        self.unary(Op::LogSoftmaxLast, data)
    }

    /// Normalize over the last axis to zero mean and unit variance.
    /// Affine gain/bias are applied separately via mul_bias/add_bias.
    pub fn layer_norm(&self, eps: f64) -> Tensor {
        let d = *self.shape().last().expect("layer_norm: scalar input");
        let mut data = vec![0.0; self.len()];
        for (row_out, row_in) in data.chunks_mut(d).zip(self.data().chunks(d)) {
            let mean = row_in.iter().sum::<f64>() / d as f64;
            let var = row_in.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for (o, &v) in row_out.iter_mut().zip(row_in) {
                *o = (v - mean) * inv;
            }
        }
        self.unary(Op::LayerNorm { eps }, data)
    }

    /// Concatenate along the last axis.
    pub fn concat_last(&self, other: &Tensor) -> Tensor {
        let (sa, sb) = (self.shape(), other.shape());
        assert!(!sa.is_empty() && sa.len() == sb.len(), "concat_last: {:?} vs {:?}", sa, sb);
        assert_eq!(&sa[..sa.len() - 1], &sb[..sb.len() - 1], "concat_last: {:?} vs {:?}", sa, sb);
        let (da, db) = (sa[sa.len() - 1], sb[sb.len() - 1]);
        let rows = numel(&sa[..sa.len() - 1]);
        let mut data = Vec::with_capacity(rows * (da + db));
        for r in 0..rows {
            data.extend_from_slice(&self.data()[r * da..(r + 1) * da]);
            data.extend_from_slice(&other.data()[r * db..(r + 1) * db]);
        }
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(da + db);
        let parents = vec![self.clone(), other.clone()];
        let rg = Tensor::out_grad(&parents);
        Tensor::node(shape, data, rg, parents, Op::ConcatLast)
    }

    /// Euclidean norm over the last axis; the zero-vector subgradient is 0.
    pub fn l2_norm_last(&self) -> Tensor {
        let d = *self.shape().last().expect("l2_norm_last: scalar input");
        let rows = self.len() / d.max(1);
        let data: Vec<f64> = (0..rows)
            .map(|r| self.data()[r * d..(r + 1) * d].iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let out_shape = self.shape()[..self.shape().len() - 1].to_vec();
        let parents = vec![self.clone()];
        let rg = Tensor::out_grad(&parents);
        Tensor::node(out_shape, data, rg, parents, Op::L2NormLast)
    }

    /// Euclidean norm of the whole tensor as a scalar.
    pub fn l2_norm(&self) -> Tensor {
        self.reshape(vec![1, self.len()]).l2_norm_last().reshape(vec![])
    }

    /// Mean over the batch of `-log P[y]`, with the selected probability
    /// clamped at [`PROB_EPS`] before the log.
    pub fn cross_entropy_probs(&self, labels: &[usize]) -> Tensor {
        assert_eq!(self.shape().len(), 2, "cross_entropy_probs: expected [batch, classes], got {:?}", self.shape());
        let (b, k) = (self.shape()[0], self.shape()[1]);
        assert_eq!(labels.len(), b, "cross_entropy_probs: {} labels for batch {}", labels.len(), b);
        let mut sum = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            assert!(y < k, "cross_entropy_probs: label {} out of range {}", y, k);
            sum += -self.data()[r * k + y].max(PROB_EPS).ln();
        }
        let parents = vec![self.clone()];
        let rg = Tensor::out_grad(&parents);
        Tensor::node(vec![], vec![sum / b as f64], rg, parents, Op::CrossEntropyProbs { labels: labels.to_vec() })
    }

    /// Row-wise KL divergence over the last axis: `[.., k] x [.., k] -> [..]`.
    ///
    /// Uses the convention 0*log(0/q) = 0 and clamps both arguments at
    /// [`PROB_EPS`] inside the logarithm.
    pub fn kl_last(&self, q: &Tensor) -> Result<Tensor, TensorError> {
        if self.shape() != q.shape() {
            return Err(TensorError::Dimension(format!(
                "kl_last: p shape {:?} vs q shape {:?}",
                self.shape(),
                q.shape()
            )));
        }
        let k = *self.shape().last().ok_or_else(|| TensorError::Dimension("kl_last: scalar input".into()))?;
        let rows = self.len() / k;
        let mut data = vec![0.0; rows];
        for r in 0..rows {
            let mut acc = 0.0;
            for i in 0..k {
                let p = self.data()[r * k + i];
                if p > 0.0 {
                    let qc = q.data()[r * k + i].max(PROB_EPS);
                    acc += p * (p.max(PROB_EPS).ln() - qc.ln());
                }
            }
            data[r] = acc;
        }
        let out_shape = self.shape()[..self.shape().len() - 1].to_vec();
        let parents = vec![self.clone(), q.clone()];
        let rg = Tensor::out_grad(&parents);
        Ok(Tensor::node(out_shape, data, rg, parents, Op::KlLast))
    }

    /// Select one index along axis 1 of a `[b, s, d]` tensor -> `[b, d]`.
    pub fn select_axis1(&self, index: usize) -> Tensor {
        assert_eq!(self.shape().len(), 3, "select_axis1: expected 3-d, got {:?}", self.shape());
        let (b, s, d) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        assert!(index < s, "select_axis1: index {} out of range {}", index, s);
        let mut data = Vec::with_capacity(b * d);
        for r in 0..b {
            let off = (r * s + index) * d;
            data.extend_from_slice(&self.data()[off..off + d]);
        }
        let parents = vec![self.clone()];
        let rg = Tensor::out_grad(&parents);
        Tensor::node(vec![b, d], data, rg, parents, Op::SelectAxis1 { index })
    }

    /// Forward takes the given hard values; backward passes gradients to
    /// `self` unchanged (straight-through estimator).
    pub fn straight_through(&self, hard: Vec<f64>) -> Tensor {
        assert_eq!(hard.len(), self.len(), "straight_through: {} hard values for {} elems", hard.len(), self.len());
        let parents = vec![self.clone()];
        let rg = Tensor::out_grad(&parents);
        Tensor::node(self.shape().to_vec(), hard, rg, parents, Op::StraightThrough)
    }

    // ---- backward ----

    /// Reverse-mode gradient pass from a scalar output.
    pub fn backward(&self) {
        assert_eq!(self.len(), 1, "backward: output must be scalar, got shape {:?}", self.shape());
        let order = topo_order(self);
        *self.inner.grad.borrow_mut() = Some(vec![1.0]);
        for t in order.iter().rev() {
            let go = match t.inner.grad.borrow().clone() {
                Some(g) => g,
                None => continue,
            };
            backprop(&t.inner, &go);
        }
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `c += a (m x k) * b (k x n)`.
fn mat_mul_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c += a^T (was m x k) * b (m x n)` giving `k x n`.
fn mat_tmul_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c += a (m x k) * b^T (was n x k)` giving `m x n`.
fn mat_mult_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (j, cv) in crow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            *cv += acc;
        }
    }
}

fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let nd = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides(shape);
    let out_strides = strides(&out_shape);
    let mut out = vec![0.0; data.len()];
    let mut idx = vec![0usize; nd];
    for (lin, &v) in data.iter().enumerate() {
        // multi-index of lin in input shape
        let mut rem = lin;
        for (d, s) in in_strides.iter().enumerate() {
            idx[d] = rem / s;
            rem %= s;
        }
        let mut out_lin = 0;
        for (o, &p) in perm.iter().enumerate() {
            out_lin += idx[p] * out_strides[o];
        }
        out[out_lin] = v;
    }
    out
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        s[d] = s[d + 1] * shape[d + 1];
    }
    s
}

fn reduce_axis(data: &[f64], shape: &[usize], axis: usize, mean: bool) -> (Vec<usize>, Vec<f64>) {
    assert!(axis < shape.len(), "reduce: axis {} for shape {:?}", axis, shape);
    let outer: usize = shape[..axis].iter().product();
    let mid = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        for j in 0..mid {
            let base = (o * mid + j) * inner;
            let obase = o * inner;
            for i in 0..inner {
                out[obase + i] += data[base + i];
            }
        }
    }
    if mean {
        let inv = 1.0 / mid as f64;
        for v in &mut out {
            *v *= inv;
        }
    }
    let mut out_shape = shape[..axis].to_vec();
    out_shape.extend_from_slice(&shape[axis + 1..]);
    (out_shape, out)
}

fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    let mut visited: HashSet<usize> = HashSet::new();
    // iterative post-order DFS over gradient-requiring nodes
    let mut stack: Vec<(Tensor, usize)> = vec![(root.clone(), 0)];
    visited.insert(root.inner.id);
    while let Some((node, child)) = stack.pop() {
        let parents = &node.inner.parents;
        let mut next = child;
        while next < parents.len() {
            let p = &parents[next];
            if p.inner.requires_grad && !visited.contains(&p.inner.id) {
                visited.insert(p.inner.id);
                stack.push((node.clone(), next + 1));
                stack.push((p.clone(), 0));
                next = usize::MAX;
                break;
            }
            next += 1;
        }
        if next != usize::MAX {
            order.push(node);
        }
    }
    order
}

fn accumulate(t: &Tensor, contrib: &[f64]) {
    if !t.inner.requires_grad {
        return;
    }
    let mut slot = t.inner.grad.borrow_mut();
    match slot.as_mut() {
        Some(g) => {
            for (gv, &c) in g.iter_mut().zip(contrib) {
                *gv += c;
            }
        }
        None => *slot = Some(contrib.to_vec()),
    }
}

fn backprop(node: &Inner, go: &[f64]) {
    let parents = &node.parents;
    match &node.op {
        Op::Leaf => {}
        Op::Add => {
            accumulate(&parents[0], go);
            accumulate(&parents[1], go);
        }
        Op::Sub => {
            accumulate(&parents[0], go);
            if parents[1].inner.requires_grad {
                let neg: Vec<f64> = go.iter().map(|v| -v).collect();
                accumulate(&parents[1], &neg);
            }
        }
        Op::Mul => {
            if parents[0].inner.requires_grad {
                let c: Vec<f64> = go.iter().zip(parents[1].data()).map(|(g, b)| g * b).collect();
                accumulate(&parents[0], &c);
            }
            if parents[1].inner.requires_grad {
                let c: Vec<f64> = go.iter().zip(parents[0].data()).map(|(g, a)| g * a).collect();
                accumulate(&parents[1], &c);
            }
        }
        Op::AddScalar => accumulate(&parents[0], go),
        Op::Scale(c) => {
            if parents[0].inner.requires_grad {
                let v: Vec<f64> = go.iter().map(|g| g * c).collect();
                accumulate(&parents[0], &v);
            }
        }
        Op::AddBias => {
            accumulate(&parents[0], go);
            if parents[1].inner.requires_grad {
                let d = parents[1].len();
                let mut c = vec![0.0; d];
                for (i, g) in go.iter().enumerate() {
                    c[i % d] += g;
                }
                accumulate(&parents[1], &c);
            }
        }
        Op::MulBias => {
            let d = parents[1].len();
            if parents[0].inner.requires_grad {
                let b = parents[1].data();
                let c: Vec<f64> = go.iter().enumerate().map(|(i, g)| g * b[i % d]).collect();
                accumulate(&parents[0], &c);
            }
            if parents[1].inner.requires_grad {
                let a = parents[0].data();
                let mut c = vec![0.0; d];
                for (i, g) in go.iter().enumerate() {
                    c[i % d] += g * a[i];
                }
                accumulate(&parents[1], &c);
            }
        }
        Op::ScaleRows => {
            let d = *parents[0].shape().last().unwrap();
            if parents[0].inner.requires_grad {
                let s = parents[1].data();
                let c: Vec<f64> = go.iter().enumerate().map(|(i, g)| g * s[i / d]).collect();
                accumulate(&parents[0], &c);
            }
            if parents[1].inner.requires_grad {
                let a = parents[0].data();
                let mut c = vec![0.0; parents[1].len()];
                for (i, g) in go.iter().enumerate() {
                    c[i / d] += g * a[i];
                }
                accumulate(&parents[1], &c);
            }
        }
        Op::MatMul { batch, m, k, n } => {
            let (batch, m, k, n) = (*batch, *m, *k, *n);
            let a_all = parents[0].data();
            let b_all = parents[1].data();
            if parents[0].inner.requires_grad {
                let mut da = vec![0.0; a_all.len()];
                for g in 0..batch {
                    mat_mult_acc(
                        &go[g * m * n..(g + 1) * m * n],
                        &b_all[g * k * n..(g + 1) * k * n],
                        &mut da[g * m * k..(g + 1) * m * k],
                        m,
                        n,
                        k,
                    );
                }
                accumulate(&parents[0], &da);
            }
            if parents[1].inner.requires_grad {
                let mut db = vec![0.0; b_all.len()];
                for g in 0..batch {
                    mat_tmul_acc(
                        &a_all[g * m * k..(g + 1) * m * k],
                        &go[g * m * n..(g + 1) * m * n],
                        &mut db[g * k * n..(g + 1) * k * n],
                        m,
                        k,
                        n,
                    );
                }
                accumulate(&parents[1], &db);
            }
        }
        Op::Permute { perm } => {
            if parents[0].inner.requires_grad {
                let mut inv = vec![0usize; perm.len()];
                for (o, &p) in perm.iter().enumerate() {
                    inv[p] = o;
                }
                let c = permute_data(go, &node.shape, &inv);
                accumulate(&parents[0], &c);
            }
        }
        Op::Reshape | Op::StraightThrough => accumulate(&parents[0], go),
        Op::Gather { ids } => {
            if parents[0].inner.requires_grad {
                let d = parents[0].shape()[1];
                let mut c = vec![0.0; parents[0].len()];
                for (r, &id) in ids.iter().enumerate() {
                    for i in 0..d {
                        c[id * d + i] += go[r * d + i];
                    }
                }
                accumulate(&parents[0], &c);
            }
        }
        Op::Broadcast { reps } => {
            if parents[0].inner.requires_grad {
                let n = parents[0].len();
                let mut c = vec![0.0; n];
                for r in 0..*reps {
                    for i in 0..n {
                        c[i] += go[r * n + i];
                    }
                }
                accumulate(&parents[0], &c);
            }
        }
        Op::SumAxis { axis } | Op::MeanAxis { axis } => {
            if parents[0].inner.requires_grad {
                let shape = parents[0].shape();
                let outer: usize = shape[..*axis].iter().product();
                let mid = shape[*axis];
                let inner: usize = shape[*axis + 1..].iter().product();
                let scale = if matches!(node.op, Op::MeanAxis { .. }) { 1.0 / mid as f64 } else { 1.0 };
                let mut c = vec![0.0; parents[0].len()];
                for o in 0..outer {
                    for j in 0..mid {
                        let base = (o * mid + j) * inner;
                        let obase = o * inner;
                        for i in 0..inner {
                            c[base + i] = go[obase + i] * scale;
                        }
                    }
                }
                accumulate(&parents[0], &c);
            }
        }
        Op::MeanAll => {
            if parents[0].inner.requires_grad {
                let v = go[0] / parents[0].len().max(1) as f64;
                let c = vec![v; parents[0].len()];
                accumulate(&parents[0], &c);
            }
        }
        Op::Log => {
            if parents[0].inner.requires_grad {
                let c: Vec<f64> = go.iter().zip(parents[0].data()).map(|(g, x)| g / x).collect();
                accumulate(&parents[0], &c);
            }
        }
        Op::Exp => {
            if parents[0].inner.requires_grad {
                let c: Vec<f64> = go.iter().zip(&node.data).map(|(g, y)| g * y).collect();
                accumulate(&parents[0], &c);
            }
        }
        Op::Tanh => {
            if parents[0].inner.requires_grad {
                let c: Vec<f64> = go.iter().zip(&node.data).map(|(g, y)| g * (1.0 - y * y)).collect();
                accumulate(&parents[0], &c);
            }
        }
        Op::Relu => {
            if parents[0].inner.requires_grad {
                let c: Vec<f64> = go
                    .iter()
                    .zip(parents[0].data())
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect();
                accumulate(&parents[0], &c);
            }
        }
        Op::Sigmoid => {
            if parents[0].inner.requires_grad {
                let c: Vec<f64> = go.iter().zip(&node.data).map(|(g, y)| g * y * (1.0 - y)).collect();
                accumulate(&parents[0], &c);
            }
        }
        Op::SoftmaxLast => {
            if parents[0].inner.requires_grad {
                let k = *node.shape.last().unwrap();
                let mut c = vec![0.0; node.data.len()];
                for r in 0..node.data.len() / k {
                    let y = &node.data[r * k..(r + 1) * k];
                    let g = &go[r * k..(r + 1) * k];
                    let s: f64 = y.iter().zip(g).map(|(yv, gv)| yv * gv).sum();
                    for i in 0..k {
                        c[r * k + i] = y[i] * (g[i] - s);
                    }
                }
                accumulate(&parents[0], &c);
            }
        }
        Op::LogSoftmaxLast => {
            if parents[0].inner.requires_grad {
                let k = *node.shape.last().unwrap();
                let mut c = vec![0.0; node.data.len()];
                for r in 0..node.data.len() / k {
                    let y = &node.data[r * k..(r + 1) * k];
                    let g = &go[r * k..(r + 1) * k];
                    let s: f64 = g.iter().sum();
                    for i in 0..k {
                        c[r * k + i] = g[i] - y[i].exp() * s;
                    }
                }
                accumulate(&parents[0], &c);
            }
        }
        Op::LayerNorm { eps } => {
            if parents[0].inner.requires_grad {
                let d = *node.shape.last().unwrap();
                let x = parents[0].data();
                let mut c = vec![0.0; x.len()];
                for r in 0..x.len() / d {
                    let xr = &x[r * d..(r + 1) * d];
                    let yr = &node.data[r * d..(r + 1) * d];
                    let gr = &go[r * d..(r + 1) * d];
                    let mean = xr.iter().sum::<f64>() / d as f64;
                    let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let g_mean = gr.iter().sum::<f64>() / d as f64;
                    let gx_mean = gr.iter().zip(yr).map(|(g, y)| g * y).sum::<f64>() / d as f64;
                    for i in 0..d {
                        c[r * d + i] = inv * (gr[i] - g_mean - yr[i] * gx_mean);
                    }
                }
                accumulate(&parents[0], &c);
            }
        }
        Op::ConcatLast => {
            let da = *parents[0].shape().last().unwrap();
            let db = *parents[1].shape().last().unwrap();
            let rows = node.data.len() / (da + db);
            if parents[0].inner.requires_grad {
                let mut c = vec![0.0; parents[0].len()];
                for r in 0..rows {
                    c[r * da..(r + 1) * da].copy_from_slice(&go[r * (da + db)..r * (da + db) + da]);
                }
                accumulate(&parents[0], &c);
            }
            if parents[1].inner.requires_grad {
                let mut c = vec![0.0; parents[1].len()];
                for r in 0..rows {
                    c[r * db..(r + 1) * db].copy_from_slice(&go[r * (da + db) + da..(r + 1) * (da + db)]);
                }
                accumulate(&parents[1], &c);
            }
        }
        Op::L2NormLast => {
            if parents[0].inner.requires_grad {
                let d = *parents[0].shape().last().unwrap();
                let x = parents[0].data();
                let mut c = vec![0.0; x.len()];
                for (r, &norm) in node.data.iter().enumerate() {
                    if norm > 0.0 {
                        let s = go[r] / norm;
                        for i in 0..d {
                            c[r * d + i] = s * x[r * d + i];
                        }
                    }
                }
                accumulate(&parents[0], &c);
            }
        }
        Op::CrossEntropyProbs { labels } => {
            if parents[0].inner.requires_grad {
                let k = parents[0].shape()[1];
                let b = labels.len() as f64;
                let mut c = vec![0.0; parents[0].len()];
                for (r, &y) in labels.iter().enumerate() {
                    let p = parents[0].data()[r * k + y];
                    if p >= PROB_EPS {
                        c[r * k + y] = -go[0] / (b * p);
                    }
                }
                accumulate(&parents[0], &c);
            }
        }
        Op::KlLast => {
            let k = *parents[0].shape().last().unwrap();
            let p_all = parents[0].data();
            let q_all = parents[1].data();
            if parents[0].inner.requires_grad {
                let mut c = vec![0.0; p_all.len()];
                for (r, &g) in go.iter().enumerate() {
                    for i in 0..k {
                        let p = p_all[r * k + i];
                        if p > 0.0 {
                            let qc = q_all[r * k + i].max(PROB_EPS);
                            c[r * k + i] = g * (p.max(PROB_EPS).ln() - qc.ln() + 1.0);
                        }
                    }
                }
                accumulate(&parents[0], &c);
            }
            if parents[1].inner.requires_grad {
                let mut c = vec![0.0; q_all.len()];
                for (r, &g) in go.iter().enumerate() {
                    for i in 0..k {
                        let p = p_all[r * k + i];
                        if p > 0.0 {
                            let qc = q_all[r * k + i].max(PROB_EPS);
                            c[r * k + i] = -g * p / qc;
                        }
                    }
                }
                accumulate(&parents[1], &c);
            }
        }
        Op::SelectAxis1 { index } => {
            if parents[0].inner.requires_grad {
                let (b, s, d) = (parents[0].shape()[0], parents[0].shape()[1], parents[0].shape()[2]);
                let mut c = vec![0.0; b * s * d];
                for r in 0..b {
                    let off = (r * s + index) * d;
                    c[off..off + d].copy_from_slice(&go[r * d..(r + 1) * d]);
                }
                accumulate(&parents[0], &c);
            }
        }
    }
}
