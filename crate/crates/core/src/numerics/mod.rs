//! Dense tensors, scalar numerics, and named parameter collections.
//!
//! Precision policy: training runs in `f32`, all oracle and gradient tests
//! run in `f64`. Everything is generic over [`Real`] so both paths share
//! one implementation.
//!
//! Finite-value policy: NaN is a hard error everywhere. Infinities are
//! permitted only in log-space quantities (lattices, forward-DP cells,
//! masked attention scores) where `-inf` encodes probability zero; dense
//! activations and parameters must stay finite. Operations document which
//! regime they are in.

mod gradcheck;
mod graph;
mod rng;

pub use gradcheck::{grad_check, GradReport};
pub use graph::{Gradients, Graph, Var};
pub use rng::Stream;

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::{Debug, Display};
use num_traits::Float;

use crate::{Error, Result};

/// Scalar type used throughout the crate: `f32` for training, `f64` for
/// oracles and gradient checks.
pub trait Real:
    Float + num_traits::FromPrimitive + Debug + Display + Send + Sync + 'static
{
}

impl<T> Real for T where
    T: Float + num_traits::FromPrimitive + Debug + Display + Send + Sync + 'static
{
}

/// Converts an `f64` constant into the working precision.
///
/// Panics if the value is not representable, which cannot happen for the
/// finite literals this crate uses.
pub fn real<F: Real>(x: f64) -> F {
    F::from(x).expect("constant must be representable in the working precision")
}

/// Converts a working-precision value to `f64` for reporting.
pub fn to_f64<F: Real>(x: F) -> f64 {
    x.to_f64().expect("real values always convert to f64")
}

/// Dense row-major tensor of rank 1 or 2.
///
/// Tensors are immutable after construction (the autodiff graph never
/// mutates a stored value). `requires_grad` marks leaves whose gradient
/// should be tracked when the tensor is registered on a [`Graph`].
#[derive(Clone, PartialEq)]
pub struct Tensor<F: Real> {
    shape: Vec<usize>,
    data: Vec<F>,
    requires_grad: bool,
}

impl<F: Real> Debug for Tensor<F> {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 8 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl<F: Real> Tensor<F> {
    /// Builds a tensor, rejecting NaN payloads and shape/data disagreement.
    /// Infinities are accepted here because leaves may hold log-space
    /// values; dense operations check finiteness at their own boundaries.
    pub fn new(shape: &[usize], data: Vec<F>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 2 {
            return Err(Error::ShapeMismatch(alloc::format!(
                "tensors are rank 1 or 2, got rank {}",
                shape.len()
            )));
        }
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(Error::ShapeMismatch(alloc::format!(
                "shape {:?} wants {} values, got {}",
                shape,
                expect,
                data.len()
            )));
        }
        if data.iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite("NaN in tensor payload".to_string()));
        }
        Ok(Tensor { shape: shape.to_vec(), data, requires_grad: false })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![F::zero(); n], requires_grad: false }
    }

    pub fn full(shape: &[usize], value: F) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; n], requires_grad: false }
    }

    /// Rank-1 tensor with a single element, used for losses.
    pub fn scalar(value: F) -> Self {
        Tensor { shape: vec![1], data: vec![value], requires_grad: false }
    }

    pub fn from_rows(rows: &[Vec<F>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::ShapeMismatch("from_rows needs at least one row".to_string()));
        }
        let cols = rows[0].len();
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::ShapeMismatch("ragged rows".to_string()));
        }
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            data.extend_from_slice(r);
        }
        Tensor::new(&[rows.len(), cols], data)
    }

    /// Marks this tensor as a trainable leaf.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Row count; rank-1 tensors are treated as a single row.
    pub fn rows(&self) -> usize {
        if self.shape.len() == 2 {
            self.shape[0]
        } else {
            1
        }
    }

    /// Column count (rank-1 length for vectors).
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("tensors have at least rank 1")
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn at(&self, r: usize, c: usize) -> F {
        debug_assert!(r < self.rows() && c < self.cols());
        self.data[r * self.cols() + c]
    }

    pub fn row(&self, r: usize) -> &[F] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    /// Extracts the single element of a loss-shaped tensor.
    pub fn item(&self) -> F {
        assert_eq!(self.data.len(), 1, "item() requires a single-element tensor");
        self.data[0]
    }

    pub fn has_nan(&self) -> bool {
        self.data.iter().any(|v| v.is_nan())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Casts element-wise through `f64`, preserving shape and grad flag.
    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| real(to_f64(*v))).collect(),
            requires_grad: self.requires_grad,
        }
    }
}

/// `log(sum(exp(xs)))` computed stably via the running maximum.
///
/// `-inf` entries contribute zero mass; an all-`-inf` input yields `-inf`.
/// Empty input and NaN are errors. Exact for singleton inputs.
pub fn logsumexp<F: Real>(xs: &[F]) -> Result<F> {
    if xs.is_empty() {
        return Err(Error::InvalidInput("empty logsumexp".to_string()));
    }
    if xs.iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite("NaN in logsumexp input".to_string()));
    }
    if xs.len() == 1 {
        return Ok(xs[0]);
    }
    let mut m = F::neg_infinity();
    for &v in xs {
        if v > m {
            m = v;
        }
    }
    if m == F::neg_infinity() {
        return Ok(F::neg_infinity());
    }
    let mut s = F::zero();
    for &v in xs {
        if v > F::neg_infinity() {
            s = s + (v - m).exp();
        }
    }
    Ok(m + s.ln())
}

/// Two-argument stable log-add-exp; `-inf` acts as the identity.
pub fn log_add_exp<F: Real>(a: F, b: F) -> F {
    if a == F::neg_infinity() {
        return b;
    }
    if b == F::neg_infinity() {
        return a;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (F::one() + (lo - hi).exp()).ln()
}

/// Row-wise softmax. Rows may contain `-inf` (masked entries get weight
/// zero); a row that is entirely `-inf` is a "fully masked" error.
pub fn softmax_rows<F: Real>(t: &Tensor<F>) -> Result<Tensor<F>> {
    let (r, c) = (t.rows(), t.cols());
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        let row = t.row(i);
        let m = row.iter().cloned().fold(F::neg_infinity(), F::max);
        if m == F::neg_infinity() {
            return Err(Error::Decode(alloc::format!("fully masked query row {i}")));
        }
        let mut sum = F::zero();
        let base = out.len();
        for &v in row {
            let e = if v == F::neg_infinity() { F::zero() } else { (v - m).exp() };
            out.push(e);
            sum = sum + e;
        }
        for v in &mut out[base..] {
            *v = *v / sum;
        }
    }
    Tensor::new(t.shape(), out)
}

/// Row-wise log-softmax; masked (`-inf`) entries stay `-inf`.
pub fn log_softmax_rows<F: Real>(t: &Tensor<F>) -> Result<Tensor<F>> {
    let (r, c) = (t.rows(), t.cols());
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        let row = t.row(i);
        let lse = logsumexp(row)?;
        if lse == F::neg_infinity() {
            return Err(Error::Decode(alloc::format!("fully masked query row {i}")));
        }
        for &v in row {
            out.push(v - lse);
        }
    }
    Tensor::new(t.shape(), out)
}

/// `a @ b` for `a: [m,k]`, `b: [k,n]`.
pub fn matmul<F: Real>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    let (m, k) = (a.rows(), a.cols());
    let (kb, n) = (b.rows(), b.cols());
    if k != kb {
        return Err(Error::ShapeMismatch(alloc::format!(
            "matmul [{m},{k}] x [{kb},{n}]"
        )));
    }
    let mut out = vec![F::zero(); m * n];
    for i in 0..m {
        let arow = a.row(i);
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            if aik == F::zero() {
                continue;
            }
            let brow = &b.data[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + aik * bv;
            }
        }
    }
    Tensor::new(&[m, n], out)
}

/// `a @ b'` for `a: [m,k]`, `b: [n,k]` (row-by-row dot products).
pub fn matmul_nt<F: Real>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    let (m, k) = (a.rows(), a.cols());
    let (n, kb) = (b.rows(), b.cols());
    if k != kb {
        return Err(Error::ShapeMismatch(alloc::format!(
            "matmul_nt [{m},{k}] x [{n},{kb}]'"
        )));
    }
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        let arow = a.row(i);
        for j in 0..n {
            let brow = b.row(j);
            let mut s = F::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                s = s + x * y;
            }
            out.push(s);
        }
    }
    Tensor::new(&[m, n], out)
}

/// `a' @ b` for `a: [k,m]`, `b: [k,n]`.
pub fn matmul_tn<F: Real>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    let (k, m) = (a.rows(), a.cols());
    let (kb, n) = (b.rows(), b.cols());
    if k != kb {
        return Err(Error::ShapeMismatch(alloc::format!(
            "matmul_tn [{k},{m}]' x [{kb},{n}]"
        )));
    }
    let mut out = vec![F::zero(); m * n];
    for kk in 0..k {
        let arow = a.row(kk);
        let brow = b.row(kk);
        for (i, &aki) in arow.iter().enumerate() {
            if aki == F::zero() {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + aki * bv;
            }
        }
    }
    Tensor::new(&[m, n], out)
}

/// Left fold `sum_i coeff_i * x_i` starting from zero, in index order.
///
/// This exact accumulation order is shared by the autodiff combine node
/// and the loss-identity checks, so logged composite losses reproduce
/// bit-for-bit from their components.
pub fn affine_fold<F: Real>(terms: &[(F, F)]) -> F {
    let mut acc = F::zero();
    for &(c, x) in terms {
        acc = acc + c * x;
    }
    acc
}

/// Ordered, name-addressable collection of parameter tensors.
///
/// Iteration order is insertion order and is part of the checkpoint and
/// optimizer-state contracts.
#[derive(Clone, Debug, Default)]
pub struct Parameters<F: Real> {
    entries: Vec<(String, Tensor<F>)>,
    index: BTreeMap<String, usize>,
}

impl<F: Real> Parameters<F> {
    pub fn new() -> Self {
        Parameters { entries: Vec::new(), index: BTreeMap::new() }
    }

    /// Registers a trainable tensor under a unique name.
    pub fn insert(&mut self, name: &str, tensor: Tensor<F>) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(Error::InvalidConfig(alloc::format!(
                "duplicate parameter name {name}"
            )));
        }
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push((name.to_string(), tensor.with_grad()));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<F>> {
        let i = *self.index.get(name)?;
        Some(&mut self.entries[i].1)
    }

    pub fn name(&self, i: usize) -> &str {
        &self.entries[i].0
    }

    pub fn tensor(&self, i: usize) -> &Tensor<F> {
        &self.entries[i].1
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor<F> {
        &mut self.entries[i].1
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Registers every tensor as a leaf on `g`, in insertion order.
    pub fn bind(&self, g: &mut Graph<F>) -> Vec<Var> {
        self.entries.iter().map(|(_, t)| g.leaf(t.clone())).collect()
    }

    /// Binds all tensors and returns a name-addressable view of the
    /// resulting graph leaves.
    pub fn bind_all<'a>(&'a self, g: &mut Graph<F>) -> Bound<'a, F> {
        let vars = self.bind(g);
        Bound { params: self, vars }
    }

    /// Casts every tensor through `f64` into another precision.
    pub fn cast<G: Real>(&self) -> Parameters<G> {
        let mut out = Parameters::new();
        for (name, t) in &self.entries {
            out.insert(name, t.cast()).expect("names stay unique under cast");
        }
        out
    }
}

/// Name-addressable view of parameters bound as graph leaves.
pub struct Bound<'a, F: Real> {
    params: &'a Parameters<F>,
    vars: Vec<Var>,
}

impl<'a, F: Real> Bound<'a, F> {
    /// The graph leaf holding the named parameter.
    pub fn var(&self, name: &str) -> Result<Var> {
        self.params
            .index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::InvalidConfig(alloc::format!("unknown parameter {name}")))
    }

    pub fn params(&self) -> &'a Parameters<F> {
        self.params
    }

    /// Leaf vars in parameter (insertion) order.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Rebuilds the view from pre-bound vars (used by the gradient
    /// checker, which binds parameters itself).
    pub fn from_vars(params: &'a Parameters<F>, vars: &[Var]) -> Self {
        assert_eq!(params.len(), vars.len(), "var count must match parameter count");
        Bound { params, vars: vars.to_vec() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "expected {b}, got {a} (tol {tol})");
    }

    #[test]
    fn logsumexp_singleton_is_exact() {
        assert_eq!(logsumexp(&[0.0f64]).unwrap(), 0.0);
        assert_eq!(logsumexp(&[-3.25f64]).unwrap(), -3.25);
    }

    #[test]
    fn logsumexp_matches_direct_sums() {
        assert_close(logsumexp(&[0.0f64, 0.0]).unwrap(), 2.0f64.ln(), 1e-15);
        let direct = (1.0f64.exp() * 0.0 + (0.0f64).exp() + (-1.0f64).exp() + (-2.0f64).exp()).ln();
        assert_close(logsumexp(&[0.0f64, -1.0, -2.0]).unwrap(), direct, 1e-14);
    }

    #[test]
    fn logsumexp_empty_is_an_error() {
        let err = logsumexp::<f64>(&[]).unwrap_err();
        assert!(matches!(err, Error::InvalidInput(_)));
    }

    #[test]
    fn logsumexp_ignores_neg_inf_mass() {
        let v = logsumexp(&[f64::NEG_INFINITY, 0.0, f64::NEG_INFINITY]).unwrap();
        assert_eq!(v, 0.0);
        assert_eq!(
            logsumexp(&[f64::NEG_INFINITY, f64::NEG_INFINITY]).unwrap(),
            f64::NEG_INFINITY
        );
    }

    #[test]
    fn logsumexp_dominates_max() {
        // lse(xs) >= max(xs), equality iff all other entries are -inf.
        let xs = [0.3f64, -1.0, 2.5, 2.5];
        let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(logsumexp(&xs).unwrap() > m);
        let ys = [f64::NEG_INFINITY, 1.25, f64::NEG_INFINITY];
        assert_eq!(logsumexp(&ys).unwrap(), 1.25);
    }

    #[test]
    fn logsumexp_is_shift_invariant() {
        let xs = [0.1f64, -0.7, 1.3, 0.0];
        let c = 5.75;
        let shifted: alloc::vec::Vec<f64> = xs.iter().map(|v| v + c).collect();
        let a = logsumexp(&xs).unwrap() + c;
        let b = logsumexp(&shifted).unwrap();
        assert_close(a, b, 1e-12);
    }

    #[test]
    fn softmax_rows_normalizes_and_keeps_symmetry() {
        let t = Tensor::from_rows(&[vec![1.0f64, 1.0, 1.0], vec![0.0, 50.0, 0.0]]).unwrap();
        let s = softmax_rows(&t).unwrap();
        for r in 0..2 {
            let sum: f64 = s.row(r).iter().sum();
            assert_close(sum, 1.0, 1e-12);
        }
        // Equal inputs give exactly equal outputs.
        assert_eq!(s.at(0, 0), s.at(0, 1));
        assert_eq!(s.at(0, 1), s.at(0, 2));
    }

    #[test]
    fn softmax_rows_is_shift_invariant() {
        let t = Tensor::from_rows(&[vec![0.2f64, -1.0, 3.0]]).unwrap();
        let shifted = Tensor::from_rows(&[vec![100.2f64, 99.0, 103.0]]).unwrap();
        let a = softmax_rows(&t).unwrap();
        let b = softmax_rows(&shifted).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_close(*x, *y, 1e-12);
        }
    }

    #[test]
    fn softmax_rows_rejects_fully_masked_rows() {
        let t =
            Tensor::from_rows(&[vec![f64::NEG_INFINITY, f64::NEG_INFINITY]]).unwrap();
        assert!(matches!(softmax_rows(&t), Err(Error::Decode(_))));
    }

    #[test]
    fn matmul_agrees_with_hand_example() {
        let a = Tensor::from_rows(&[vec![1.0f64, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![5.0f64, 6.0], vec![7.0, 8.0]]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[19.0, 22.0, 43.0, 50.0]);
        let cnt = matmul_nt(&a, &b).unwrap();
        // a @ b' : [1*5+2*6, 1*7+2*8; 3*5+4*6, 3*7+4*8]
        assert_eq!(cnt.data(), &[17.0, 23.0, 39.0, 53.0]);
        let ctn = matmul_tn(&a, &b).unwrap();
        // a' @ b : [1*5+3*7, 1*6+3*8; 2*5+4*7, 2*6+4*8]
        assert_eq!(ctn.data(), &[26.0, 30.0, 38.0, 44.0]);
    }

    #[test]
    fn matmul_rejects_inner_dim_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        assert!(matches!(matmul::<f64>(&a, &b), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn tensor_new_rejects_nan_and_bad_shapes() {
        assert!(Tensor::new(&[2], vec![1.0f64, f64::NAN]).is_err());
        assert!(Tensor::new(&[3], vec![1.0f64]).is_err());
        assert!(Tensor::new(&[], Vec::<f64>::new()).is_err());
        // Infinities are representable (log-space payloads).
        assert!(Tensor::new(&[1], vec![f64::NEG_INFINITY]).is_ok());
    }

    #[test]
    fn parameters_reject_duplicates_and_keep_order() {
        let mut p: Parameters<f64> = Parameters::new();
        p.insert("b.w", Tensor::zeros(&[2, 2])).unwrap();
        p.insert("a.w", Tensor::zeros(&[2])).unwrap();
        assert!(p.insert("b.w", Tensor::zeros(&[1])).is_err());
        assert_eq!(p.name(0), "b.w");
        assert_eq!(p.name(1), "a.w");
        assert_eq!(p.scalar_count(), 6);
        assert!(p.get("a.w").unwrap().requires_grad());
    }

    #[test]
    fn affine_fold_matches_manual_order() {
        let terms = [(0.3f32, 3.0f32), (0.7, 1.0)];
        let manual = 0.0f32 + 0.3 * 3.0 + 0.7 * 1.0;
        assert_eq!(affine_fold(&terms), manual);
    }
}
