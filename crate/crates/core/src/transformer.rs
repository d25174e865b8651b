//! Transformer building blocks: layer norm, multi-head attention,
//! position-wise feed-forward nets, encoder/decoder blocks, and the
//! stride-4 subsampling front end with sinusoidal positions.
//!
//! All functions build onto an autodiff [`Graph`] and address their
//! weights by name through a [`Bound`] parameter view, so the same code
//! serves training, decoding, and gradient checks.
//!
//! Block structure (residuals included):
//!
//! ```text
//! encoder:  a = x + Drop(MHSA(LN(x)))          out = LN(a + Drop(FFN(a)))
//! decoder:  a = y + Drop(Self(LN(y)))
//!           b = a + Drop(Cross(LN(a), memory)) out = LN(b + Drop(FFN(b)))
//! ```

use alloc::format;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use crate::numerics::{real, Bound, Graph, Parameters, Real, Stream, Tensor, Var};
use crate::{Error, Result};

/// Dimensions shared by every block in a stack.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlockConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    /// Dropout rate applied to sub-layer outputs and attention weights
    /// during training.
    pub dropout: f64,
}

impl BlockConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 {
            return Err(Error::InvalidConfig("block dims must be positive".to_string()));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::InvalidConfig(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !self.d_model.is_multiple_of(2) {
            return Err(Error::InvalidConfig(
                "d_model must be even for sinusoidal positions".to_string(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidConfig(format!("dropout {} outside [0,1)", self.dropout)));
        }
        Ok(())
    }
}

/// Dropout state threaded through a training forward pass; absent during
/// inference and gradient checks.
pub struct DropoutCtx<'a> {
    pub rate: f64,
    pub stream: &'a mut Stream,
}

fn maybe_dropout<F: Real>(
    g: &mut Graph<F>,
    x: Var,
    drop: &mut Option<&mut DropoutCtx<'_>>,
) -> Result<Var> {
    match drop {
        Some(ctx) => g.dropout(x, ctx.rate, ctx.stream),
        None => Ok(x),
    }
}

/// Boolean attention mask over query/key positions: `true` = may attend.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    tq: usize,
    tk: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    /// Everything may attend to everything.
    pub fn none(tq: usize, tk: usize) -> Self {
        AttentionMask { tq, tk, allowed: vec![true; tq * tk] }
    }

    /// Position `i` may attend to keys `0..=i`.
    pub fn causal(t: usize) -> Self {
        let mut allowed = vec![false; t * t];
        for i in 0..t {
            for j in 0..=i {
                allowed[i * t + j] = true;
            }
        }
        AttentionMask { tq: t, tk: t, allowed }
    }

    /// Marks keys at and beyond `from` as padding (never attended).
    pub fn with_padded_keys(mut self, from: usize) -> Self {
        for i in 0..self.tq {
            for j in from..self.tk {
                self.allowed[i * self.tk + j] = false;
            }
        }
        self
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.tq, self.tk)
    }

    /// Every query must keep at least one visible key.
    pub fn validate(&self) -> Result<()> {
        for i in 0..self.tq {
            if !self.allowed[i * self.tk..(i + 1) * self.tk].iter().any(|&a| a) {
                return Err(Error::Decode(format!("fully masked query row {i}")));
            }
        }
        Ok(())
    }

    /// Additive form: 0 where allowed, `-inf` where masked.
    pub fn additive<F: Real>(&self) -> Tensor<F> {
        let data: Vec<F> = self
            .allowed
            .iter()
            .map(|&a| if a { F::zero() } else { F::neg_infinity() })
            .collect();
        Tensor::new(&[self.tq, self.tk], data).expect("mask payload is never NaN")
    }
}

/// `x @ w + b` with parameters `{prefix}.w` / `{prefix}.b`.
pub fn linear<F: Real>(
    g: &mut Graph<F>,
    bp: &Bound<'_, F>,
    prefix: &str,
    x: Var,
) -> Result<Var> {
    let w = bp.var(&format!("{prefix}.w"))?;
    let b = bp.var(&format!("{prefix}.b"))?;
    let xw = g.matmul(x, w)?;
    g.add_row(xw, b)
}

/// Layer norm with parameters `{prefix}.gain` / `{prefix}.bias`.
pub fn layer_norm<F: Real>(
    g: &mut Graph<F>,
    bp: &Bound<'_, F>,
    prefix: &str,
    x: Var,
) -> Result<Var> {
    let gain = bp.var(&format!("{prefix}.gain"))?;
    let bias = bp.var(&format!("{prefix}.bias"))?;
    g.layer_norm(x, gain, bias)
}

/// Two-layer ReLU MLP: `w2 @ relu(w1 @ x + b1) + b2`, with dropout on the
/// hidden activation during training.
pub fn ffn<F: Real>(
    g: &mut Graph<F>,
    bp: &Bound<'_, F>,
    prefix: &str,
    x: Var,
    mut drop: Option<&mut DropoutCtx<'_>>,
) -> Result<Var> {
    let w1 = bp.var(&format!("{prefix}.w1"))?;
    let b1 = bp.var(&format!("{prefix}.b1"))?;
    let w2 = bp.var(&format!("{prefix}.w2"))?;
    let b2 = bp.var(&format!("{prefix}.b2"))?;
    let h = g.matmul(x, w1)?;
    let h = g.add_row(h, b1)?;
    let h = g.relu(h)?;
    let h = maybe_dropout(g, h, &mut drop)?;
    let out = g.matmul(h, w2)?;
    g.add_row(out, b2)
}

/// Multi-head scaled dot-product attention.
///
/// `q_in` has `Tq` rows, `kv_in` has `Tk` rows (self-attention passes the
/// same var twice). Weights live under `{prefix}.{wq,bq,wk,bk,wv,bv,wo,bo}`.
/// The mask must cover `[Tq, Tk]` and leave every query at least one key.
#[allow(clippy::too_many_arguments)] // explicit-tape style: the graph, bindings, and streams are all arguments
pub fn mhsa<F: Real>(
    g: &mut Graph<F>,
    bp: &Bound<'_, F>,
    prefix: &str,
    n_heads: usize,
    q_in: Var,
    kv_in: Var,
    mask: &AttentionMask,
    mut drop: Option<&mut DropoutCtx<'_>>,
) -> Result<Var> {
    let d_model = g.value(q_in).cols();
    if !d_model.is_multiple_of(n_heads) {
        return Err(Error::InvalidConfig(format!(
            "d_model {d_model} not divisible by n_heads {n_heads}"
        )));
    }
    let (tq, tk) = (g.value(q_in).rows(), g.value(kv_in).rows());
    if mask.shape() != (tq, tk) {
        return Err(Error::ShapeMismatch(format!(
            "mask {:?} does not cover attention [{tq},{tk}]",
            mask.shape()
        )));
    }
    mask.validate()?;

    let proj = |g: &mut Graph<F>, name: &str, x: Var| -> Result<Var> {
        let w = bp.var(&format!("{prefix}.w{name}"))?;
        let b = bp.var(&format!("{prefix}.b{name}"))?;
        let xw = g.matmul(x, w)?;
        g.add_row(xw, b)
    };
    let q = proj(g, "q", q_in)?;
    // The key projection carries no bias: a shared key offset shifts every
    // score for a query by the same amount, which softmax cancels exactly,
    // so such a bias would be a dead parameter.
    let wk = bp.var(&format!("{prefix}.wk"))?;
    let k = g.matmul(kv_in, wk)?;
    let v = proj(g, "v", kv_in)?;

    let dh = d_model / n_heads;
    let inv_sqrt = real::<F>(1.0 / (dh as f64).sqrt());
    let additive = mask.additive::<F>();
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = g.slice_cols(q, h * dh, dh)?;
        let kh = g.slice_cols(k, h * dh, dh)?;
        let vh = g.slice_cols(v, h * dh, dh)?;
        let scores = g.matmul_nt(qh, kh)?;
        let scores = g.scale(scores, inv_sqrt)?;
        let scores = g.add_const(scores, &additive)?;
        let weights = g.softmax_rows(scores)?;
        let weights = maybe_dropout(g, weights, &mut drop)?;
        heads.push(g.matmul(weights, vh)?);
    }
    let joined = g.concat_cols(&heads)?;
    let wo = bp.var(&format!("{prefix}.wo"))?;
    let bo = bp.var(&format!("{prefix}.bo"))?;
    let out = g.matmul(joined, wo)?;
    g.add_row(out, bo)
}

/// Encoder block: `a = x + Drop(MHSA(LN(x)))`, `out = LN(a + Drop(FFN(a)))`.
pub fn encoder_block<F: Real>(
    g: &mut Graph<F>,
    bp: &Bound<'_, F>,
    prefix: &str,
    cfg: &BlockConfig,
    x: Var,
    mask: &AttentionMask,
    mut drop: Option<&mut DropoutCtx<'_>>,
) -> Result<Var> {
    let ln_in = layer_norm(g, bp, &format!("{prefix}.ln1"), x)?;
    let att = mhsa(
        g,
        bp,
        &format!("{prefix}.attn"),
        cfg.n_heads,
        ln_in,
        ln_in,
        mask,
        drop.as_deref_mut(),
    )?;
    let att = maybe_dropout(g, att, &mut drop)?;
    let a = g.add(x, att)?;
    let f = ffn(g, bp, &format!("{prefix}.ffn"), a, drop.as_deref_mut())?;
    let f = maybe_dropout(g, f, &mut drop)?;
    let sum = g.add(a, f)?;
    layer_norm(g, bp, &format!("{prefix}.ln2"), sum)
}

/// Decoder block: causal self-attention, cross-attention over `memory`,
/// then FFN, with the same residual/norm pattern as the encoder.
pub fn decoder_block<F: Real>(
    g: &mut Graph<F>,
    bp: &Bound<'_, F>,
    prefix: &str,
    cfg: &BlockConfig,
    y: Var,
    memory: Var,
    mut drop: Option<&mut DropoutCtx<'_>>,
) -> Result<Var> {
    let t = g.value(y).rows();
    let causal = AttentionMask::causal(t);
    let ln1 = layer_norm(g, bp, &format!("{prefix}.ln1"), y)?;
    let self_att = mhsa(
        g,
        bp,
        &format!("{prefix}.self_attn"),
        cfg.n_heads,
        ln1,
        ln1,
        &causal,
        drop.as_deref_mut(),
    )?;
    let self_att = maybe_dropout(g, self_att, &mut drop)?;
    let a = g.add(y, self_att)?;

    let mem_mask = AttentionMask::none(t, g.value(memory).rows());
    let ln2 = layer_norm(g, bp, &format!("{prefix}.ln2"), a)?;
    let cross = mhsa(
        g,
        bp,
        &format!("{prefix}.cross_attn"),
        cfg.n_heads,
        ln2,
        memory,
        &mem_mask,
        drop.as_deref_mut(),
    )?;
    let cross = maybe_dropout(g, cross, &mut drop)?;
    let b = g.add(a, cross)?;

    let f = ffn(g, bp, &format!("{prefix}.ffn"), b, drop.as_deref_mut())?;
    let f = maybe_dropout(g, f, &mut drop)?;
    let sum = g.add(b, f)?;
    layer_norm(g, bp, &format!("{prefix}.ln3"), sum)
}

/// Sinusoidal position table: row `t`, column `2i` is
/// `sin(t / 10000^(2i/d))`, column `2i+1` the matching cosine.
pub fn sinusoid_table<F: Real>(max_t: usize, d: usize) -> Tensor<F> {
    assert!(d.is_multiple_of(2), "sinusoidal positions need an even width");
    let mut data = Vec::with_capacity(max_t * d);
    for t in 0..max_t {
        for i in 0..d / 2 {
            let rate = libm::pow(10000.0, -(2.0 * i as f64) / d as f64);
            let angle = t as f64 * rate;
            data.push(real::<F>(libm::sin(angle)));
            data.push(real::<F>(libm::cos(angle)));
        }
    }
    Tensor::new(&[max_t, d], data).expect("sinusoids are finite")
}

/// Length after two stride-2 stages: `ceil(ceil(T/2)/2) == ceil(T/4)`.
pub fn subsampled_len(t: usize) -> usize {
    t.div_ceil(2).div_ceil(2)
}

/// Stride-4 subsampling front end: two stages of (pair consecutive rows,
/// linear, ReLU), then additive sinusoidal positions.
///
/// Input `[T, feat]` becomes `[ceil(T/4), d_model]`; `T >= 4` required so
/// at least one output frame carries real (non-padding) content.
pub fn subsample<F: Real>(
    g: &mut Graph<F>,
    bp: &Bound<'_, F>,
    prefix: &str,
    x: Var,
) -> Result<Var> {
    let t = g.value(x).rows();
    if t < 4 {
        return Err(Error::InvalidInput(format!(
            "subsample needs at least 4 frames, got {t}"
        )));
    }
    let p1 = g.pair_rows(x)?;
    let h1 = linear(g, bp, &format!("{prefix}.stage1"), p1)?;
    let h1 = g.relu(h1)?;
    let p2 = g.pair_rows(h1)?;
    let h2 = linear(g, bp, &format!("{prefix}.stage2"), p2)?;
    let h2 = g.relu(h2)?;
    let out_t = g.value(h2).rows();
    let d = g.value(h2).cols();
    let pos = sinusoid_table::<F>(out_t, d);
    g.add_const(h2, &pos)
}

// ---------------------------------------------------------------------------
// Initialization. Every tensor is drawn from a stream named after the
// parameter itself, so two builds with the same seed are bitwise identical
// regardless of insertion order.
// ---------------------------------------------------------------------------

/// Xavier-uniform matrix `[fan_in, fan_out]`.
pub fn xavier<F: Real>(seed: u64, name: &str, fan_in: usize, fan_out: usize) -> Tensor<F> {
    let limit = libm::sqrt(6.0 / (fan_in + fan_out) as f64);
    let mut stream = Stream::new(seed, name);
    let data: Vec<F> =
        (0..fan_in * fan_out).map(|_| real(stream.uniform(-limit, limit))).collect();
    Tensor::new(&[fan_in, fan_out], data).expect("xavier draws are finite")
}

/// Registers `{prefix}.w: [fan_in, fan_out]` (Xavier) and `{prefix}.b`
/// (zeros).
pub fn init_linear<F: Real>(
    params: &mut Parameters<F>,
    seed: u64,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
) -> Result<()> {
    let wname = format!("{prefix}.w");
    params.insert(&wname, xavier(seed, &wname, fan_in, fan_out))?;
    params.insert(&format!("{prefix}.b"), Tensor::zeros(&[fan_out]))
}

/// Registers `{prefix}.gain` (ones) and `{prefix}.bias` (zeros).
pub fn init_layer_norm<F: Real>(
    params: &mut Parameters<F>,
    prefix: &str,
    d: usize,
) -> Result<()> {
    params.insert(&format!("{prefix}.gain"), Tensor::full(&[d], F::one()))?;
    params.insert(&format!("{prefix}.bias"), Tensor::zeros(&[d]))
}

/// Registers the four attention projections under `prefix`. The key
/// projection is bias-free (see [`mhsa`]).
pub fn init_attention<F: Real>(
    params: &mut Parameters<F>,
    seed: u64,
    prefix: &str,
    d_model: usize,
) -> Result<()> {
    for name in ["q", "k", "v", "o"] {
        let wname = format!("{prefix}.w{name}");
        params.insert(&wname, xavier(seed, &wname, d_model, d_model))?;
        if name != "k" {
            params.insert(&format!("{prefix}.b{name}"), Tensor::zeros(&[d_model]))?;
        }
    }
    Ok(())
}

/// Registers `{prefix}.{w1,b1,w2,b2}` for a feed-forward net.
pub fn init_ffn<F: Real>(
    params: &mut Parameters<F>,
    seed: u64,
    prefix: &str,
    d_model: usize,
    d_ff: usize,
) -> Result<()> {
    let w1 = format!("{prefix}.w1");
    params.insert(&w1, xavier(seed, &w1, d_model, d_ff))?;
    params.insert(&format!("{prefix}.b1"), Tensor::zeros(&[d_ff]))?;
    let w2 = format!("{prefix}.w2");
    params.insert(&w2, xavier(seed, &w2, d_ff, d_model))?;
    params.insert(&format!("{prefix}.b2"), Tensor::zeros(&[d_model]))
}

pub fn init_encoder_block<F: Real>(
    params: &mut Parameters<F>,
    seed: u64,
    prefix: &str,
    cfg: &BlockConfig,
) -> Result<()> {
    init_layer_norm(params, &format!("{prefix}.ln1"), cfg.d_model)?;
    init_attention(params, seed, &format!("{prefix}.attn"), cfg.d_model)?;
    init_ffn(params, seed, &format!("{prefix}.ffn"), cfg.d_model, cfg.d_ff)?;
    init_layer_norm(params, &format!("{prefix}.ln2"), cfg.d_model)
}

pub fn init_decoder_block<F: Real>(
    params: &mut Parameters<F>,
    seed: u64,
    prefix: &str,
    cfg: &BlockConfig,
) -> Result<()> {
    init_layer_norm(params, &format!("{prefix}.ln1"), cfg.d_model)?;
    init_attention(params, seed, &format!("{prefix}.self_attn"), cfg.d_model)?;
    init_layer_norm(params, &format!("{prefix}.ln2"), cfg.d_model)?;
    init_attention(params, seed, &format!("{prefix}.cross_attn"), cfg.d_model)?;
    init_ffn(params, seed, &format!("{prefix}.ffn"), cfg.d_model, cfg.d_ff)?;
    init_layer_norm(params, &format!("{prefix}.ln3"), cfg.d_model)
}

pub fn init_subsample<F: Real>(
    params: &mut Parameters<F>,
    seed: u64,
    prefix: &str,
    feat_dim: usize,
    d_model: usize,
) -> Result<()> {
    init_linear(params, seed, &format!("{prefix}.stage1"), 2 * feat_dim, d_model)?;
    init_linear(params, seed, &format!("{prefix}.stage2"), 2 * d_model, d_model)
}

/// Registers an embedding table `[vocab, d]` under `name`.
pub fn init_embedding<F: Real>(
    params: &mut Parameters<F>,
    seed: u64,
    name: &str,
    vocab: usize,
    d: usize,
) -> Result<()> {
    params.insert(name, xavier(seed, name, vocab, d))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;

    fn test_cfg() -> BlockConfig {
        BlockConfig { d_model: 8, n_heads: 2, d_ff: 12, dropout: 0.0 }
    }

    fn rand_rows(stream: &mut Stream, t: usize, d: usize) -> Tensor<f64> {
        let data: Vec<f64> = (0..t * d).map(|_| stream.uniform(-1.0, 1.0)).collect();
        Tensor::new(&[t, d], data).unwrap()
    }

    /// Plain dense helpers independent of the graph implementation.
    mod dense {
        pub fn matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
            let (m, k, n) = (a.len(), b.len(), b[0].len());
            let mut out = vec![vec![0.0; n]; m];
            for i in 0..m {
                for kk in 0..k {
                    for j in 0..n {
                        out[i][j] += a[i][kk] * b[kk][j];
                    }
                }
            }
            out
        }

        pub fn softmax(row: &[f64]) -> Vec<f64> {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = exps.iter().sum();
            exps.iter().map(|v| v / s).collect()
        }
    }

    fn tensor_rows(t: &Tensor<f64>) -> Vec<Vec<f64>> {
        (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
    }

    #[test]
    fn layer_norm_rows_have_zero_mean_unit_variance() {
        let mut params: Parameters<f64> = Parameters::new();
        init_layer_norm(&mut params, "ln", 6).unwrap();
        let mut s = Stream::new(3, "ln-test");
        let x = rand_rows(&mut s, 4, 6);
        let mut g = Graph::new();
        let bp = params.bind_all(&mut g);
        let xv = g.leaf(x);
        let out = layer_norm(&mut g, &bp, "ln", xv).unwrap();
        for r in 0..4 {
            let row = g.value(out).row(r);
            let mean: f64 = row.iter().sum::<f64>() / 6.0;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 6.0;
            assert!(mean.abs() < 1e-6, "row {r} mean {mean}");
            assert!((var - 1.0).abs() < 1e-4, "row {r} var {var}");
        }
    }

    #[test]
    fn layer_norm_constant_row_maps_to_zeros() {
        let mut params: Parameters<f64> = Parameters::new();
        init_layer_norm(&mut params, "ln", 4).unwrap();
        let mut g = Graph::new();
        let bp = params.bind_all(&mut g);
        let xv = g.leaf(Tensor::full(&[1, 4], 3.7));
        let out = layer_norm(&mut g, &bp, "ln", xv).unwrap();
        for &v in g.value(out).data() {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn layer_norm_two_point_row() {
        // [1,-1] has mean 0 and variance 1 already, so it maps to itself
        // up to the epsilon shrinkage.
        let mut params: Parameters<f64> = Parameters::new();
        init_layer_norm(&mut params, "ln", 2).unwrap();
        let mut g = Graph::new();
        let bp = params.bind_all(&mut g);
        let xv = g.leaf(Tensor::from_rows(&[vec![1.0, -1.0]]).unwrap());
        let out = layer_norm(&mut g, &bp, "ln", xv).unwrap();
        assert!((g.value(out).at(0, 0) - 1.0).abs() < 1e-4);
        assert!((g.value(out).at(0, 1) + 1.0).abs() < 1e-4);
    }

    #[test]
    fn single_position_attention_returns_projected_value() {
        // With one key, softmax weights are exactly 1, so the output is
        // wo @ (wv @ x + bv) + bo.
        let mut params: Parameters<f64> = Parameters::new();
        init_attention(&mut params, 5, "attn", 8).unwrap();
        let mut s = Stream::new(9, "x");
        let x = rand_rows(&mut s, 1, 8);

        let mut g = Graph::new();
        let bp = params.bind_all(&mut g);
        let xv = g.leaf(x.clone());
        let mask = AttentionMask::none(1, 1);
        let out = mhsa(&mut g, &bp, "attn", 2, xv, xv, &mask, None).unwrap();

        let wv = tensor_rows(params.get("attn.wv").unwrap());
        let wo = tensor_rows(params.get("attn.wo").unwrap());
        let v = dense::matmul(&tensor_rows(&x), &wv);
        let expect = dense::matmul(&v, &wo);
        for (a, b) in g.value(out).data().iter().zip(expect[0].iter()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn attention_matches_dense_oracle() {
        // Single-head case on a 2-row input against a from-scratch dense
        // softmax(QK'/sqrt(d))V computation.
        let d = 6;
        let mut params: Parameters<f64> = Parameters::new();
        init_attention(&mut params, 11, "attn", d).unwrap();
        let mut s = Stream::new(13, "x");
        let x = rand_rows(&mut s, 2, d);

        let mut g = Graph::new();
        let bp = params.bind_all(&mut g);
        let xv = g.leaf(x.clone());
        let mask = AttentionMask::none(2, 2);
        let out = mhsa(&mut g, &bp, "attn", 1, xv, xv, &mask, None).unwrap();

        let xr = tensor_rows(&x);
        let q = dense::matmul(&xr, &tensor_rows(params.get("attn.wq").unwrap()));
        let k = dense::matmul(&xr, &tensor_rows(params.get("attn.wk").unwrap()));
        let v = dense::matmul(&xr, &tensor_rows(params.get("attn.wv").unwrap()));
        let scale = 1.0 / (d as f64).sqrt();
        let mut ctx = vec![vec![0.0; d]; 2];
        for i in 0..2 {
            let scores: Vec<f64> = (0..2)
                .map(|j| (0..d).map(|c| q[i][c] * k[j][c]).sum::<f64>() * scale)
                .collect();
            let w = dense::softmax(&scores);
            for j in 0..2 {
                for c in 0..d {
                    ctx[i][c] += w[j] * v[j][c];
                }
            }
        }
        let expect = dense::matmul(&ctx, &tensor_rows(params.get("attn.wo").unwrap()));
        for (r, row) in expect.iter().enumerate() {
            for (c, &want) in row.iter().enumerate() {
                let got = g.value(out).at(r, c);
                assert!((got - want).abs() < 1e-10, "at ({r},{c})");
            }
        }
    }

    #[test]
    fn causal_mask_makes_prefix_outputs_independent_of_future() {
        let cfg = test_cfg();
        let mut params: Parameters<f64> = Parameters::new();
        init_encoder_block(&mut params, 21, "blk", &cfg).unwrap();
        let mut s = Stream::new(1, "seq");
        let x = rand_rows(&mut s, 5, cfg.d_model);
        // Same sequence with positions 3.. replaced by different content.
        let mut other = x.clone();
        for r in 3..5 {
            for c in 0..cfg.d_model {
                other.data_mut()[r * cfg.d_model + c] = s.uniform(-1.0, 1.0);
            }
        }
        let mask = AttentionMask::causal(5);
        let run = |input: Tensor<f64>| {
            let mut g = Graph::new();
            let bp = params.bind_all(&mut g);
            let xv = g.leaf(input);
            let out = encoder_block(&mut g, &bp, "blk", &cfg, xv, &mask, None).unwrap();
            g.value(out).clone()
        };
        let a = run(x);
        let b = run(other);
        for r in 0..3 {
            assert_eq!(a.row(r), b.row(r), "prefix row {r} must be bitwise identical");
        }
        assert_ne!(a.row(4), b.row(4));
    }

    #[test]
    fn padding_mask_matches_truncated_computation() {
        let cfg = test_cfg();
        let mut params: Parameters<f64> = Parameters::new();
        init_attention(&mut params, 31, "attn", cfg.d_model).unwrap();
        let mut s = Stream::new(2, "seq");
        let x = rand_rows(&mut s, 4, cfg.d_model);
        let x3 = Tensor::from_rows(&[x.row(0).to_vec(), x.row(1).to_vec(), x.row(2).to_vec()])
            .unwrap();

        // Queries from the first 3 positions, keys padded after 3.
        let mut g = Graph::new();
        let bp = params.bind_all(&mut g);
        let xq = g.leaf(x3.clone());
        let xkv = g.leaf(x.clone());
        let mask = AttentionMask::none(3, 4).with_padded_keys(3);
        let masked = mhsa(&mut g, &bp, "attn", 2, xq, xkv, &mask, None).unwrap();

        let mut g2 = Graph::new();
        let bp2 = params.bind_all(&mut g2);
        let xv3 = g2.leaf(x3);
        let full = AttentionMask::none(3, 3);
        let trunc = mhsa(&mut g2, &bp2, "attn", 2, xv3, xv3, &full, None).unwrap();

        for (a, b) in g.value(masked).data().iter().zip(g2.value(trunc).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn fully_masked_query_is_reported() {
        let mut params: Parameters<f64> = Parameters::new();
        init_attention(&mut params, 3, "attn", 4).unwrap();
        let mut g = Graph::new();
        let bp = params.bind_all(&mut g);
        let x = g.leaf(Tensor::full(&[2, 4], 0.5));
        let mask = AttentionMask::none(2, 2).with_padded_keys(0);
        let err = mhsa(&mut g, &bp, "attn", 2, x, x, &mask, None).unwrap_err();
        assert!(matches!(err, Error::Decode(_)), "{err}");
    }

    #[test]
    fn encoder_block_composes_its_published_sub_ops() {
        // The block must equal the documented composition, bitwise.
        let cfg = test_cfg();
        let mut params: Parameters<f64> = Parameters::new();
        init_encoder_block(&mut params, 17, "blk", &cfg).unwrap();
        let mut s = Stream::new(4, "x");
        let x = rand_rows(&mut s, 3, cfg.d_model);
        let mask = AttentionMask::none(3, 3);

        let mut g = Graph::new();
        let bp = params.bind_all(&mut g);
        let xv = g.leaf(x.clone());
        let block = encoder_block(&mut g, &bp, "blk", &cfg, xv, &mask, None).unwrap();

        let mut g2 = Graph::new();
        let bp2 = params.bind_all(&mut g2);
        let xv2 = g2.leaf(x);
        let ln_in = layer_norm(&mut g2, &bp2, "blk.ln1", xv2).unwrap();
        let att = mhsa(&mut g2, &bp2, "blk.attn", cfg.n_heads, ln_in, ln_in, &mask, None)
            .unwrap();
        let a = g2.add(xv2, att).unwrap();
        let f = ffn(&mut g2, &bp2, "blk.ffn", a, None).unwrap();
        let sum = g2.add(a, f).unwrap();
        let manual = layer_norm(&mut g2, &bp2, "blk.ln2", sum).unwrap();

        assert_eq!(g.value(block).data(), g2.value(manual).data());
    }

    #[test]
    fn subsample_lengths_follow_ceil_t_over_4() {
        assert_eq!(subsampled_len(4), 1);
        assert_eq!(subsampled_len(5), 2);
        assert_eq!(subsampled_len(60), 15);
        for t in 4..200 {
            assert_eq!(subsampled_len(t), t.div_ceil(4), "t={t}");
        }
    }

    #[test]
    fn subsample_output_shape_and_positions() {
        let (feat, d) = (5, 8);
        let mut params: Parameters<f64> = Parameters::new();
        init_subsample(&mut params, 23, "sub", feat, d).unwrap();
        let mut s = Stream::new(6, "frames");
        let x = rand_rows(&mut s, 13, feat);
        let mut g = Graph::new();
        let bp = params.bind_all(&mut g);
        let xv = g.leaf(x);
        let out = subsample(&mut g, &bp, "sub", xv).unwrap();
        assert_eq!(g.value(out).shape(), &[4, d]);

        // Independent sinusoid oracle.
        for t in 0..4 {
            for i in 0..d / 2 {
                let angle = t as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
                let table = sinusoid_table::<f64>(4, d);
                assert!((table.at(t, 2 * i) - angle.sin()).abs() < 1e-12);
                assert!((table.at(t, 2 * i + 1) - angle.cos()).abs() < 1e-12);
            }
        }
        // Too-short input is rejected.
        let mut g2 = Graph::new();
        let bp2 = params.bind_all(&mut g2);
        let short = g2.leaf(Tensor::zeros(&[3, feat]));
        assert!(subsample(&mut g2, &bp2, "sub", short).is_err());
    }

    #[test]
    fn blocks_pass_grad_check() {
        let cfg = test_cfg();
        let mut s = Stream::new(8, "gc");
        let x = rand_rows(&mut s, 3, cfg.d_model);
        let mem = rand_rows(&mut s, 4, cfg.d_model);
        let frames = rand_rows(&mut s, 6, 5);
        let w_enc = rand_rows(&mut s, 3, cfg.d_model);
        let w_dec = rand_rows(&mut s, 3, cfg.d_model);
        let w_sub = rand_rows(&mut s, 2, cfg.d_model);

        let mut params: Parameters<f64> = Parameters::new();
        init_encoder_block(&mut params, 77, "enc", &cfg).unwrap();
        init_decoder_block(&mut params, 78, "dec", &cfg).unwrap();
        init_subsample(&mut params, 79, "sub", 5, cfg.d_model).unwrap();

        let report = grad_check(&params, 1e-6, 1e-4, |g, vars| {
            let bp = Bound::from_vars(&params, vars);
            let xv = g.leaf(x.clone());
            let memv = g.leaf(mem.clone());
            let fv = g.leaf(frames.clone());
            let mask = AttentionMask::none(3, 3);
            let e = encoder_block(g, &bp, "enc", &cfg, xv, &mask, None)?;
            let d = decoder_block(g, &bp, "dec", &cfg, xv, memv, None)?;
            let sub = subsample(g, &bp, "sub", fv)?;
            let le = g.weighted_neg_sum(e, w_enc.clone())?;
            let ld = g.weighted_neg_sum(d, w_dec.clone())?;
            let ls = g.weighted_neg_sum(sub, w_sub.clone())?;
            g.affine(&[le, ld, ls], &[1.0, 1.0, 1.0])
        })
        .unwrap();
        assert!(report.pass, "{}", report.summary());
    }

    #[test]
    fn init_is_bitwise_reproducible_and_order_free() {
        let cfg = test_cfg();
        let mut a: Parameters<f64> = Parameters::new();
        init_encoder_block(&mut a, 55, "blk", &cfg).unwrap();
        init_ffn(&mut a, 55, "other", cfg.d_model, cfg.d_ff).unwrap();
        // Same seed, different insertion order.
        let mut b: Parameters<f64> = Parameters::new();
        init_ffn(&mut b, 55, "other", cfg.d_model, cfg.d_ff).unwrap();
        init_encoder_block(&mut b, 55, "blk", &cfg).unwrap();
        for (name, t) in a.iter() {
            assert_eq!(t.data(), b.get(name).unwrap().data(), "{name}");
        }
    }

    #[test]
    fn block_config_validation_catches_bad_dims() {
        assert!(BlockConfig { d_model: 9, n_heads: 2, d_ff: 4, dropout: 0.1 }
            .validate()
            .is_err());
        assert!(BlockConfig { d_model: 8, n_heads: 3, d_ff: 4, dropout: 0.1 }
            .validate()
            .is_err());
        assert!(BlockConfig { d_model: 8, n_heads: 2, d_ff: 4, dropout: 1.0 }
            .validate()
            .is_err());
        assert!(BlockConfig { d_model: 8, n_heads: 2, d_ff: 4, dropout: 0.1 }
            .validate()
            .is_ok());
    }
}
