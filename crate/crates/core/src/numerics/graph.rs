//! Reverse-mode automatic differentiation over whole tensors.
//!
//! A [`Graph`] is a tape of eagerly evaluated nodes. Forward methods
//! validate shapes, compute the result immediately, and record the
//! operation; [`Graph::backward`] walks the tape once in reverse and
//! accumulates gradients for every node that (transitively) depends on a
//! gradient-tracked leaf.
//!
//! Log-space operations (`log_add_exp`, `log_sum_exp`, `shift_right`,
//! `gather`, `row`) tolerate `-inf` as "probability zero" and guard their
//! backward passes so no NaN can be produced from masked-out mass. Dense
//! operations reject non-finite results outright.

use alloc::format;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use super::rng::Stream;
use super::{log_add_exp, log_softmax_rows, logsumexp, real, softmax_rows, Real, Tensor};
use crate::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

const LAYER_NORM_EPS: f64 = 1e-5;

enum Op<F: Real> {
    Leaf,
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    AddConst(Var),
    MulConst(Var, Tensor<F>),
    Matmul(Var, Var),
    MatmulNT(Var, Var),
    Relu(Var),
    LayerNorm { x: Var, gain: Var, bias: Var },
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    EmbedRows { table: Var, ids: Vec<usize> },
    SliceCols { x: Var, start: usize, len: usize },
    ConcatCols(Vec<Var>),
    Row { x: Var, r: usize },
    Gather { x: Var, idx: Vec<usize> },
    PairRows { x: Var, in_rows: usize },
    ShiftRight { x: Var, by: usize },
    LogAddExp(Var, Var),
    LogSumExp(Var),
    WeightedNegSum { x: Var, weights: Tensor<F> },
    Affine { xs: Vec<Var>, coeffs: Vec<F> },
}

struct Node<F: Real> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Gradients produced by one backward pass, addressed by [`Var`].
pub struct Gradients<F: Real> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Real> Gradients<F> {
    /// Gradient of the loss w.r.t. `v`, if any path reached it.
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

/// Eagerly evaluated autodiff tape.
pub struct Graph<F: Real> {
    nodes: Vec<Node<F>>,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Value of a node.
    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn val(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    fn check_dense(&self, t: &Tensor<F>, what: &str) -> Result<()> {
        if !t.all_finite() {
            return Err(Error::NonFinite(format!("{what} produced a non-finite value")));
        }
        Ok(())
    }

    fn check_no_nan(&self, t: &Tensor<F>, what: &str) -> Result<()> {
        if t.has_nan() {
            return Err(Error::NonFinite(format!("{what} produced NaN")));
        }
        Ok(())
    }

    /// Registers a leaf; its `requires_grad` flag decides tracking.
    pub fn leaf(&mut self, t: Tensor<F>) -> Var {
        let needs = t.requires_grad();
        self.push(t, Op::Leaf, needs)
    }

    /// Registers an untracked constant.
    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn constant_scalar(&mut self, v: F) -> Var {
        self.constant(Tensor::scalar(v))
    }

    /// Element-wise sum of two same-shape tensors. Log-space friendly:
    /// infinities pass through, NaN is rejected.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.val(a), self.val(b));
        if ta.shape() != tb.shape() {
            return Err(Error::ShapeMismatch(format!(
                "add {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data: Vec<F> = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(ta.shape(), data)?;
        self.check_no_nan(&out, "add")?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), needs))
    }

    /// `[T,D] + [D]`: adds a bias row to every row (dense).
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.val(x), self.val(bias));
        if tb.rank() != 1 || tb.cols() != tx.cols() {
            return Err(Error::ShapeMismatch(format!(
                "add_row {:?} + {:?}",
                tx.shape(),
                tb.shape()
            )));
        }
        let cols = tx.cols();
        let mut data = Vec::with_capacity(tx.len());
        for r in 0..tx.rows() {
            for (c, &v) in tx.row(r).iter().enumerate() {
                data.push(v + tb.data()[c % cols]);
            }
        }
        let out = Tensor::new(tx.shape(), data)?;
        self.check_dense(&out, "add_row")?;
        let needs = self.needs(x) || self.needs(bias);
        Ok(self.push(out, Op::AddRow(x, bias), needs))
    }

    /// Element-wise product (dense).
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.val(a), self.val(b));
        if ta.shape() != tb.shape() {
            return Err(Error::ShapeMismatch(format!(
                "mul {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data: Vec<F> = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(ta.shape(), data)?;
        self.check_dense(&out, "mul")?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul(a, b), needs))
    }

    /// Multiplies by a compile-time-known scalar; infinities pass through.
    pub fn scale(&mut self, x: Var, c: F) -> Result<Var> {
        let tx = self.val(x);
        let data: Vec<F> = tx.data().iter().map(|&v| v * c).collect();
        let out = Tensor::new(tx.shape(), data)?;
        self.check_no_nan(&out, "scale")?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::Scale(x, c), needs))
    }

    /// Adds a constant tensor (attention masks use `-inf`, positional
    /// encodings are finite). Gradient passes through unchanged.
    pub fn add_const(&mut self, x: Var, c: &Tensor<F>) -> Result<Var> {
        let tx = self.val(x);
        if tx.shape() != c.shape() {
            return Err(Error::ShapeMismatch(format!(
                "add_const {:?} + {:?}",
                tx.shape(),
                c.shape()
            )));
        }
        let data: Vec<F> = tx.data().iter().zip(c.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(tx.shape(), data)?;
        self.check_no_nan(&out, "add_const")?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::AddConst(x), needs))
    }

    /// Multiplies by a constant tensor (dropout masks).
    pub fn mul_const(&mut self, x: Var, c: Tensor<F>) -> Result<Var> {
        let tx = self.val(x);
        if tx.shape() != c.shape() {
            return Err(Error::ShapeMismatch(format!(
                "mul_const {:?} * {:?}",
                tx.shape(),
                c.shape()
            )));
        }
        let data: Vec<F> = tx.data().iter().zip(c.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(tx.shape(), data)?;
        self.check_dense(&out, "mul_const")?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::MulConst(x, c), needs))
    }

    /// Inverted dropout: keeps each element with probability `1 - rate`
    /// and rescales by `1/(1-rate)`. `rate == 0` is the identity.
    pub fn dropout(&mut self, x: Var, rate: f64, stream: &mut Stream) -> Result<Var> {
        if rate == 0.0 {
            return Ok(x);
        }
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidConfig(format!("dropout rate {rate} outside [0,1)")));
        }
        let keep = 1.0 - rate;
        let scale = real::<F>(1.0 / keep);
        let tx = self.val(x);
        let mask: Vec<F> = (0..tx.len())
            .map(|_| if stream.next_f64() < keep { scale } else { F::zero() })
            .collect();
        let mask = Tensor::new(tx.shape(), mask)?;
        self.mul_const(x, mask)
    }

    /// `[m,k] @ [k,n]` (dense).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = super::matmul(self.val(a), self.val(b))?;
        self.check_dense(&out, "matmul")?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Matmul(a, b), needs))
    }

    /// `[m,k] @ [n,k]'` (dense); used for attention scores.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = super::matmul_nt(self.val(a), self.val(b))?;
        self.check_dense(&out, "matmul_nt")?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::MatmulNT(a, b), needs))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let tx = self.val(x);
        let data: Vec<F> = tx.data().iter().map(|&v| v.max(F::zero())).collect();
        let out = Tensor::new(tx.shape(), data)?;
        self.check_dense(&out, "relu")?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::Relu(x), needs))
    }

    /// Row-wise layer normalization with affine gain/bias.
    ///
    /// Each row is shifted to mean zero and scaled to unit (population)
    /// variance with epsilon 1e-5, then `gain` and `bias` are applied.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (tx, tg, tb) = (self.val(x), self.val(gain), self.val(bias));
        let d = tx.cols();
        if tg.rank() != 1 || tb.rank() != 1 || tg.cols() != d || tb.cols() != d {
            return Err(Error::ShapeMismatch(format!(
                "layer_norm x {:?}, gain {:?}, bias {:?}",
                tx.shape(),
                tg.shape(),
                tb.shape()
            )));
        }
        let eps = real::<F>(LAYER_NORM_EPS);
        let dn = real::<F>(d as f64);
        let mut data = Vec::with_capacity(tx.len());
        for r in 0..tx.rows() {
            let row = tx.row(r);
            let mut mean = F::zero();
            for &v in row {
                mean = mean + v;
            }
            mean = mean / dn;
            let mut var = F::zero();
            for &v in row {
                let dlt = v - mean;
                var = var + dlt * dlt;
            }
            var = var / dn;
            let rstd = F::one() / (var + eps).sqrt();
            for (c, &v) in row.iter().enumerate() {
                data.push((v - mean) * rstd * tg.data()[c] + tb.data()[c]);
            }
        }
        let out = Tensor::new(tx.shape(), data)?;
        self.check_dense(&out, "layer_norm")?;
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(out, Op::LayerNorm { x, gain, bias }, needs))
    }

    /// Row-wise softmax; `-inf` entries get weight zero, a fully masked
    /// row is an error.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let out = softmax_rows(self.val(x))?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::SoftmaxRows(x), needs))
    }

    /// Row-wise log-softmax (log-space output, may contain `-inf`).
    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let out = log_softmax_rows(self.val(x))?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::LogSoftmaxRows(x), needs))
    }

    /// Looks up `ids` as rows of `table: [V,D]`, producing `[len(ids),D]`.
    pub fn embed_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.val(table);
        if tt.rank() != 2 {
            return Err(Error::ShapeMismatch("embedding table must be rank 2".to_string()));
        }
        if ids.is_empty() {
            return Err(Error::InvalidInput("embed_rows with no ids".to_string()));
        }
        let (v, d) = (tt.rows(), tt.cols());
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::InvalidInput(format!("embedding id {id} out of range {v}")));
            }
            data.extend_from_slice(tt.row(id));
        }
        let out = Tensor::new(&[ids.len(), d], data)?;
        self.check_dense(&out, "embed_rows")?;
        let needs = self.needs(table);
        Ok(self.push(out, Op::EmbedRows { table, ids: ids.to_vec() }, needs))
    }

    /// Column block `[T, start..start+len]`; used to split attention heads.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.val(x);
        if tx.rank() != 2 || start + len > tx.cols() || len == 0 {
            return Err(Error::ShapeMismatch(format!(
                "slice_cols [{start}..{}] of {:?}",
                start + len,
                tx.shape()
            )));
        }
        let mut data = Vec::with_capacity(tx.rows() * len);
        for r in 0..tx.rows() {
            data.extend_from_slice(&tx.row(r)[start..start + len]);
        }
        let out = Tensor::new(&[tx.rows(), len], data)?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::SliceCols { x, start, len }, needs))
    }

    /// Concatenates same-height blocks along columns; joins heads back.
    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::InvalidInput("concat_cols of nothing".to_string()));
        }
        let rows = self.val(xs[0]).rows();
        if xs.iter().any(|&v| self.val(v).rank() != 2 || self.val(v).rows() != rows) {
            return Err(Error::ShapeMismatch("concat_cols with mismatched heights".to_string()));
        }
        let total: usize = xs.iter().map(|&v| self.val(v).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &v in xs {
                data.extend_from_slice(self.val(v).row(r));
            }
        }
        let out = Tensor::new(&[rows, total], data)?;
        let needs = xs.iter().any(|&v| self.needs(v));
        Ok(self.push(out, Op::ConcatCols(xs.to_vec()), needs))
    }

    /// Extracts row `r` of a matrix as a rank-1 tensor (log-space safe).
    pub fn row(&mut self, x: Var, r: usize) -> Result<Var> {
        let tx = self.val(x);
        if tx.rank() != 2 || r >= tx.rows() {
            return Err(Error::ShapeMismatch(format!("row {r} of {:?}", tx.shape())));
        }
        let out = Tensor::new(&[tx.cols()], tx.row(r).to_vec())?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::Row { x, r }, needs))
    }

    /// `out[i] = x[idx[i]]` for rank-1 `x` (log-space safe). Repeated
    /// indices are allowed; their gradients accumulate.
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let tx = self.val(x);
        if tx.rank() != 1 {
            return Err(Error::ShapeMismatch("gather expects a rank-1 input".to_string()));
        }
        if idx.is_empty() {
            return Err(Error::InvalidInput("gather with no indices".to_string()));
        }
        let n = tx.cols();
        let mut data = Vec::with_capacity(idx.len());
        for &i in idx {
            if i >= n {
                return Err(Error::InvalidInput(format!("gather index {i} out of range {n}")));
            }
            data.push(tx.data()[i]);
        }
        let out = Tensor::new(&[idx.len()], data)?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::Gather { x, idx: idx.to_vec() }, needs))
    }

    /// `[T,D] -> [ceil(T/2), 2D]`: concatenates consecutive row pairs,
    /// zero-padding a trailing odd row. First stage of subsampling.
    pub fn pair_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.val(x);
        if tx.rank() != 2 {
            return Err(Error::ShapeMismatch("pair_rows expects rank 2".to_string()));
        }
        let (t, d) = (tx.rows(), tx.cols());
        let p = t.div_ceil(2);
        let mut data = Vec::with_capacity(p * 2 * d);
        for i in 0..p {
            data.extend_from_slice(tx.row(2 * i));
            if 2 * i + 1 < t {
                data.extend_from_slice(tx.row(2 * i + 1));
            } else {
                data.extend(core::iter::repeat_n(F::zero(), d));
            }
        }
        let out = Tensor::new(&[p, 2 * d], data)?;
        self.check_dense(&out, "pair_rows")?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::PairRows { x, in_rows: t }, needs))
    }

    /// Shifts a rank-1 tensor right by `by`, filling with `fill`
    /// (typically `-inf` for log-space DP cells).
    pub fn shift_right(&mut self, x: Var, by: usize, fill: F) -> Result<Var> {
        let tx = self.val(x);
        if tx.rank() != 1 {
            return Err(Error::ShapeMismatch("shift_right expects rank 1".to_string()));
        }
        let n = tx.cols();
        let mut data = vec![fill; n];
        if by < n {
            data[by..].copy_from_slice(&tx.data()[..n - by]);
        }
        let out = Tensor::new(&[n], data)?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::ShiftRight { x, by }, needs))
    }

    /// Element-wise stable `log(exp(a) + exp(b))`; `-inf` is the identity.
    pub fn log_add_exp(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.val(a), self.val(b));
        if ta.shape() != tb.shape() {
            return Err(Error::ShapeMismatch(format!(
                "log_add_exp {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data: Vec<F> =
            ta.data().iter().zip(tb.data()).map(|(&x, &y)| log_add_exp(x, y)).collect();
        let out = Tensor::new(ta.shape(), data)?;
        self.check_no_nan(&out, "log_add_exp")?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::LogAddExp(a, b), needs))
    }

    /// Stable `log(sum(exp(x)))` over a rank-1 tensor, as a scalar node.
    pub fn log_sum_exp(&mut self, x: Var) -> Result<Var> {
        let tx = self.val(x);
        if tx.rank() != 1 {
            return Err(Error::ShapeMismatch("log_sum_exp expects rank 1".to_string()));
        }
        let v = logsumexp(tx.data())?;
        let out = Tensor::scalar(v);
        let needs = self.needs(x);
        Ok(self.push(out, Op::LogSumExp(x), needs))
    }

    /// Scalar `-sum(weights * x)`. Entries with weight exactly zero are
    /// skipped, so `-inf` log-probabilities outside the support do not
    /// poison the loss. This is the cross-entropy reduction.
    pub fn weighted_neg_sum(&mut self, x: Var, weights: Tensor<F>) -> Result<Var> {
        let tx = self.val(x);
        if tx.shape() != weights.shape() {
            return Err(Error::ShapeMismatch(format!(
                "weighted_neg_sum {:?} vs {:?}",
                tx.shape(),
                weights.shape()
            )));
        }
        let mut s = F::zero();
        for (&v, &w) in tx.data().iter().zip(weights.data()) {
            if w != F::zero() {
                s = s + w * v;
            }
        }
        let out = Tensor::scalar(-s);
        self.check_no_nan(&out, "weighted_neg_sum")?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::WeightedNegSum { x, weights }, needs))
    }

    /// `sum_i coeffs[i] * xs[i]` over same-shape tensors, accumulated in
    /// index order from zero — the same fold as
    /// [`super::affine_fold`], so composite losses logged from their
    /// components reproduce exactly.
    pub fn affine(&mut self, xs: &[Var], coeffs: &[F]) -> Result<Var> {
        if xs.is_empty() || xs.len() != coeffs.len() {
            return Err(Error::InvalidInput("affine needs matching vars and coeffs".to_string()));
        }
        let shape = self.val(xs[0]).shape().to_vec();
        if xs.iter().any(|&v| self.val(v).shape() != shape.as_slice()) {
            return Err(Error::ShapeMismatch("affine over mismatched shapes".to_string()));
        }
        let n = self.val(xs[0]).len();
        let mut data = vec![F::zero(); n];
        for (&v, &c) in xs.iter().zip(coeffs) {
            for (o, &x) in data.iter_mut().zip(self.val(v).data()) {
                *o = *o + c * x;
            }
        }
        let out = Tensor::new(&shape, data)?;
        self.check_no_nan(&out, "affine")?;
        let needs = xs.iter().any(|&v| self.needs(v));
        Ok(self.push(out, Op::Affine { xs: xs.to_vec(), coeffs: coeffs.to_vec() }, needs))
    }

    /// Reverse pass from a scalar loss node. Returns a gradient per
    /// reachable gradient-tracked node. The loss must be finite.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        let lt = self.val(loss);
        if lt.len() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "backward needs a scalar loss, got {:?}",
                lt.shape()
            )));
        }
        if !lt.all_finite() {
            return Err(Error::NonFinite("backward from a non-finite loss".to_string()));
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(F::one()));

        for i in (0..=loss.0).rev() {
            if grads[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let g = grads[i].take().expect("checked above");
            self.step_backward(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Adds `delta` into the gradient slot of `v` (when tracked).
    fn accumulate(
        &self,
        grads: &mut [Option<Tensor<F>>],
        v: Var,
        shape: &[usize],
        apply: impl FnOnce(&mut [F]),
    ) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(shape));
        apply(slot.data_mut());
    }

    fn step_backward(
        &self,
        i: usize,
        g: &Tensor<F>,
        grads: &mut [Option<Tensor<F>>],
    ) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for &v in &[*a, *b] {
                    let shape = self.val(v).shape().to_vec();
                    self.accumulate(grads, v, &shape, |d| {
                        for (o, &x) in d.iter_mut().zip(g.data()) {
                            *o = *o + x;
                        }
                    });
                }
            }
            Op::AddRow(x, bias) => {
                let xs = self.val(*x).shape().to_vec();
                self.accumulate(grads, *x, &xs, |d| {
                    for (o, &v) in d.iter_mut().zip(g.data()) {
                        *o = *o + v;
                    }
                });
                let bs = self.val(*bias).shape().to_vec();
                let cols = bs[0];
                self.accumulate(grads, *bias, &bs, |d| {
                    for (j, &v) in g.data().iter().enumerate() {
                        d[j % cols] = d[j % cols] + v;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.val(*a).clone(), self.val(*b).clone());
                self.accumulate(grads, *a, ta.shape(), |d| {
                    for ((o, &gv), &bv) in d.iter_mut().zip(g.data()).zip(tb.data()) {
                        *o = *o + gv * bv;
                    }
                });
                self.accumulate(grads, *b, tb.shape(), |d| {
                    for ((o, &gv), &av) in d.iter_mut().zip(g.data()).zip(ta.data()) {
                        *o = *o + gv * av;
                    }
                });
            }
            Op::Scale(x, c) => {
                let shape = self.val(*x).shape().to_vec();
                let c = *c;
                self.accumulate(grads, *x, &shape, |d| {
                    for (o, &v) in d.iter_mut().zip(g.data()) {
                        *o = *o + c * v;
                    }
                });
            }
            Op::AddConst(x) => {
                let shape = self.val(*x).shape().to_vec();
                self.accumulate(grads, *x, &shape, |d| {
                    for (o, &v) in d.iter_mut().zip(g.data()) {
                        *o = *o + v;
                    }
                });
            }
            Op::MulConst(x, mask) => {
                let shape = self.val(*x).shape().to_vec();
                self.accumulate(grads, *x, &shape, |d| {
                    for ((o, &gv), &m) in d.iter_mut().zip(g.data()).zip(mask.data()) {
                        *o = *o + gv * m;
                    }
                });
            }
            Op::Matmul(a, b) => {
                // c = a @ b  =>  da += g @ b', db += a' @ g
                let (ta, tb) = (self.val(*a), self.val(*b));
                let da = super::matmul_nt(g, tb)?;
                let db = super::matmul_tn(ta, g)?;
                self.accumulate(grads, *a, ta.shape(), |d| {
                    for (o, &v) in d.iter_mut().zip(da.data()) {
                        *o = *o + v;
                    }
                });
                self.accumulate(grads, *b, tb.shape(), |d| {
                    for (o, &v) in d.iter_mut().zip(db.data()) {
                        *o = *o + v;
                    }
                });
            }
            Op::MatmulNT(a, b) => {
                // c = a @ b'  =>  da += g @ b, db += g' @ a
                let (ta, tb) = (self.val(*a), self.val(*b));
                let da = super::matmul(g, tb)?;
                let db = super::matmul_tn(g, ta)?;
                self.accumulate(grads, *a, ta.shape(), |d| {
                    for (o, &v) in d.iter_mut().zip(da.data()) {
                        *o = *o + v;
                    }
                });
                self.accumulate(grads, *b, tb.shape(), |d| {
                    for (o, &v) in d.iter_mut().zip(db.data()) {
                        *o = *o + v;
                    }
                });
            }
            Op::Relu(x) => {
                let tx = self.val(*x).clone();
                self.accumulate(grads, *x, tx.shape(), |d| {
                    for ((o, &gv), &xv) in d.iter_mut().zip(g.data()).zip(tx.data()) {
                        if xv > F::zero() {
                            *o = *o + gv;
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias } => {
                self.layer_norm_backward(*x, *gain, *bias, g, grads)?;
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let (r, c) = (y.rows(), y.cols());
                let mut dx = vec![F::zero(); r * c];
                for rr in 0..r {
                    let yr = y.row(rr);
                    let gr = &g.data()[rr * c..(rr + 1) * c];
                    let mut dot = F::zero();
                    for (&gv, &yv) in gr.iter().zip(yr) {
                        dot = dot + gv * yv;
                    }
                    for j in 0..c {
                        dx[rr * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                let shape = self.val(*x).shape().to_vec();
                self.accumulate(grads, *x, &shape, |d| {
                    for (o, &v) in d.iter_mut().zip(&dx) {
                        *o = *o + v;
                    }
                });
            }
            Op::LogSoftmaxRows(x) => {
                let y = &node.value;
                let (r, c) = (y.rows(), y.cols());
                let mut dx = vec![F::zero(); r * c];
                for rr in 0..r {
                    let yr = y.row(rr);
                    let gr = &g.data()[rr * c..(rr + 1) * c];
                    let mut gsum = F::zero();
                    for &gv in gr {
                        gsum = gsum + gv;
                    }
                    for j in 0..c {
                        // exp(-inf) = 0: masked classes get no gradient.
                        let p = yr[j].exp();
                        dx[rr * c + j] = gr[j] - p * gsum;
                    }
                }
                let shape = self.val(*x).shape().to_vec();
                self.accumulate(grads, *x, &shape, |d| {
                    for (o, &v) in d.iter_mut().zip(&dx) {
                        *o = *o + v;
                    }
                });
            }
            Op::EmbedRows { table, ids } => {
                let shape = self.val(*table).shape().to_vec();
                let d = shape[1];
                self.accumulate(grads, *table, &shape, |dst| {
                    for (i, &id) in ids.iter().enumerate() {
                        let grow = &g.data()[i * d..(i + 1) * d];
                        let trow = &mut dst[id * d..(id + 1) * d];
                        for (o, &v) in trow.iter_mut().zip(grow) {
                            *o = *o + v;
                        }
                    }
                });
            }
            Op::SliceCols { x, start, len } => {
                let shape = self.val(*x).shape().to_vec();
                let cols = shape[1];
                let (start, len) = (*start, *len);
                self.accumulate(grads, *x, &shape, |d| {
                    for r in 0..g.rows() {
                        for j in 0..len {
                            let di = r * cols + start + j;
                            d[di] = d[di] + g.at(r, j);
                        }
                    }
                });
            }
            Op::ConcatCols(xs) => {
                let mut offset = 0;
                for &v in xs {
                    let shape = self.val(v).shape().to_vec();
                    let c = shape[1];
                    let base = offset;
                    self.accumulate(grads, v, &shape, |d| {
                        for r in 0..g.rows() {
                            for j in 0..c {
                                d[r * c + j] = d[r * c + j] + g.at(r, base + j);
                            }
                        }
                    });
                    offset += c;
                }
            }
            Op::Row { x, r } => {
                let shape = self.val(*x).shape().to_vec();
                let c = shape[1];
                let r = *r;
                self.accumulate(grads, *x, &shape, |d| {
                    for (j, &v) in g.data().iter().enumerate() {
                        d[r * c + j] = d[r * c + j] + v;
                    }
                });
            }
            Op::Gather { x, idx } => {
                let shape = self.val(*x).shape().to_vec();
                self.accumulate(grads, *x, &shape, |d| {
                    for (&i, &v) in idx.iter().zip(g.data()) {
                        d[i] = d[i] + v;
                    }
                });
            }
            Op::PairRows { x, in_rows } => {
                let shape = self.val(*x).shape().to_vec();
                let d = shape[1];
                let t = *in_rows;
                self.accumulate(grads, *x, &shape, |dst| {
                    for p in 0..g.rows() {
                        let grow = g.row(p);
                        for j in 0..d {
                            dst[2 * p * d + j] = dst[2 * p * d + j] + grow[j];
                        }
                        if 2 * p + 1 < t {
                            for j in 0..d {
                                dst[(2 * p + 1) * d + j] = dst[(2 * p + 1) * d + j] + grow[d + j];
                            }
                        }
                    }
                });
            }
            Op::ShiftRight { x, by } => {
                let shape = self.val(*x).shape().to_vec();
                let by = *by;
                self.accumulate(grads, *x, &shape, |d| {
                    for (j, &v) in g.data().iter().enumerate().skip(by) {
                        d[j - by] = d[j - by] + v;
                    }
                });
            }
            Op::LogAddExp(a, b) => {
                let out = &node.value;
                for &v in &[*a, *b] {
                    let tv = self.val(v).clone();
                    let shape = tv.shape().to_vec();
                    self.accumulate(grads, v, &shape, |d| {
                        for ((o, &gv), (&xv, &ov)) in
                            d.iter_mut().zip(g.data()).zip(tv.data().iter().zip(out.data()))
                        {
                            // exp(x - out) is the soft routing weight; when the
                            // output is -inf both inputs were, so no gradient.
                            if ov > F::neg_infinity() && xv > F::neg_infinity() {
                                *o = *o + gv * (xv - ov).exp();
                            }
                        }
                    });
                }
            }
            Op::LogSumExp(x) => {
                let s = node.value.item();
                let tx = self.val(*x).clone();
                let gv = g.item();
                self.accumulate(grads, *x, tx.shape(), |d| {
                    if s > F::neg_infinity() {
                        for (o, &xv) in d.iter_mut().zip(tx.data()) {
                            if xv > F::neg_infinity() {
                                *o = *o + gv * (xv - s).exp();
                            }
                        }
                    }
                });
            }
            Op::WeightedNegSum { x, weights } => {
                let shape = self.val(*x).shape().to_vec();
                let gv = g.item();
                self.accumulate(grads, *x, &shape, |d| {
                    for (o, &w) in d.iter_mut().zip(weights.data()) {
                        *o = *o - gv * w;
                    }
                });
            }
            Op::Affine { xs, coeffs } => {
                for (&v, &c) in xs.iter().zip(coeffs) {
                    let shape = self.val(v).shape().to_vec();
                    self.accumulate(grads, v, &shape, |d| {
                        for (o, &gv) in d.iter_mut().zip(g.data()) {
                            *o = *o + c * gv;
                        }
                    });
                }
            }
        }
        Ok(())
    }

    fn layer_norm_backward(
        &self,
        x: Var,
        gain: Var,
        bias: Var,
        g: &Tensor<F>,
        grads: &mut [Option<Tensor<F>>],
    ) -> Result<()> {
        let tx = self.val(x).clone();
        let tg = self.val(gain).clone();
        let (r, c) = (tx.rows(), tx.cols());
        let eps = real::<F>(LAYER_NORM_EPS);
        let dn = real::<F>(c as f64);

        let mut dx = vec![F::zero(); r * c];
        let mut dgain = vec![F::zero(); c];
        let mut dbias = vec![F::zero(); c];
        for rr in 0..r {
            let row = tx.row(rr);
            let grow = &g.data()[rr * c..(rr + 1) * c];
            let mut mean = F::zero();
            for &v in row {
                mean = mean + v;
            }
            mean = mean / dn;
            let mut var = F::zero();
            for &v in row {
                let dlt = v - mean;
                var = var + dlt * dlt;
            }
            var = var / dn;
            let rstd = F::one() / (var + eps).sqrt();

            // xhat, d xhat, and the two row means needed for dx.
            let mut sum_dxhat = F::zero();
            let mut sum_dxhat_xhat = F::zero();
            let mut xhat = Vec::with_capacity(c);
            let mut dxhat = Vec::with_capacity(c);
            for (j, &v) in row.iter().enumerate() {
                let xh = (v - mean) * rstd;
                let dxh = grow[j] * tg.data()[j];
                sum_dxhat = sum_dxhat + dxh;
                sum_dxhat_xhat = sum_dxhat_xhat + dxh * xh;
                dgain[j] = dgain[j] + grow[j] * xh;
                dbias[j] = dbias[j] + grow[j];
                xhat.push(xh);
                dxhat.push(dxh);
            }
            let m1 = sum_dxhat / dn;
            let m2 = sum_dxhat_xhat / dn;
            for j in 0..c {
                dx[rr * c + j] = (dxhat[j] - m1 - xhat[j] * m2) * rstd;
            }
        }

        self.accumulate(grads, x, tx.shape(), |d| {
            for (o, &v) in d.iter_mut().zip(&dx) {
                *o = *o + v;
            }
        });
        self.accumulate(grads, gain, &[c], |d| {
            for (o, &v) in d.iter_mut().zip(&dgain) {
                *o = *o + v;
            }
        });
        self.accumulate(grads, bias, &[c], |d| {
            for (o, &v) in d.iter_mut().zip(&dbias) {
                *o = *o + v;
            }
        });
        Ok(())
    }
}
