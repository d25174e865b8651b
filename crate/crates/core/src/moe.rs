//! Task-routed mixture-of-experts encoder blocks.
//!
//! An MoE block computes its attention stream **once** and then branches
//! into two feed-forward experts — one serving recognition (asr), one
//! serving translation (st):
//!
//! ```text
//! a     = x + Drop(MHSA(LN(x)))
//! h_asr = LN_out(a + Drop(FFN_asr(a)))
//! h_st  = LN_out(a + Drop(FFN_st(a)))
//! ```
//!
//! Routing is deterministic by task, not learned, and the output norm
//! parameters are shared by both streams. Zeroing one expert therefore
//! cannot perturb the other stream's forward value — the isolation the
//! architecture relies on to keep translation gradients out of the
//! recognition path at inference.
//!
//! In a stack the recognition stream chains block to block; only the
//! final block's translation stream is consumed downstream, so
//! intermediate blocks skip the st expert entirely.

use alloc::format;

use crate::numerics::{Bound, Graph, Parameters, Real, Var};
use crate::transformer::{
    ffn, init_attention, init_ffn, init_layer_norm, layer_norm, mhsa, AttentionMask,
    BlockConfig, DropoutCtx,
};
use crate::Result;

/// How the two task streams draw on feed-forward experts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExpertWiring {
    /// Separate experts: `{prefix}.ffn_asr` and `{prefix}.ffn_st`.
    Split,
    /// One shared feed-forward net `{prefix}.ffn` feeds both streams
    /// (the "without MoE" ablation); the streams are then identical.
    Tied,
}

/// Per-task outputs of an MoE block or stack: the shared post-attention
/// stream, the recognition stream, and (when requested) the translation
/// stream.
#[derive(Clone, Copy, Debug)]
pub struct MoeStreams {
    pub attn: Var,
    pub asr: Var,
    pub st: Option<Var>,
}

/// Single MoE block; see the module docs for the exact wiring.
///
/// With `emit_st = false` the translation expert is not evaluated at
/// all (no tape nodes, no dropout draws), so runs that never consume
/// the translation stream are bit-identical to models without one.
#[allow(clippy::too_many_arguments)] // explicit-tape style: the graph, bindings, and streams are all arguments
pub fn moe_block_forward<F: Real>(
    g: &mut Graph<F>,
    bp: &Bound<'_, F>,
    prefix: &str,
    cfg: &BlockConfig,
    x: Var,
    mask: &AttentionMask,
    wiring: ExpertWiring,
    emit_st: bool,
    mut drop: Option<&mut DropoutCtx<'_>>,
) -> Result<MoeStreams> {
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
    let att = maybe(g, att, &mut drop)?;
    let a = g.add(x, att)?;

    let through = |g: &mut Graph<F>,
                       ffn_name: &str,
                       drop: &mut Option<&mut DropoutCtx<'_>>|
     -> Result<Var> {
        let f = ffn(g, bp, &format!("{prefix}.{ffn_name}"), a, drop.as_deref_mut())?;
        let f = maybe(g, f, drop)?;
        let sum = g.add(a, f)?;
        layer_norm(g, bp, &format!("{prefix}.ln2"), sum)
    };

    match wiring {
        ExpertWiring::Split => {
            let asr = through(g, "ffn_asr", &mut drop)?;
            let st = if emit_st { Some(through(g, "ffn_st", &mut drop)?) } else { None };
            Ok(MoeStreams { attn: a, asr, st })
        }
        ExpertWiring::Tied => {
            let h = through(g, "ffn", &mut drop)?;
            Ok(MoeStreams { attn: a, asr: h, st: emit_st.then_some(h) })
        }
    }
}

fn maybe<F: Real>(
    g: &mut Graph<F>,
    x: Var,
    drop: &mut Option<&mut DropoutCtx<'_>>,
) -> Result<Var> {
    match drop {
        Some(ctx) => g.dropout(x, ctx.rate, ctx.stream),
        None => Ok(x),
    }
}

/// Runs `n_blocks` MoE blocks named `{prefix}.{i}`.
///
/// The recognition stream chains through every block; the translation
/// stream is tapped from the final block only, so earlier blocks run as
/// plain encoder blocks over their asr expert.
#[allow(clippy::too_many_arguments)] // explicit-tape style: the graph, bindings, and streams are all arguments
pub fn stack_moe_blocks<F: Real>(
    g: &mut Graph<F>,
    bp: &Bound<'_, F>,
    prefix: &str,
    cfg: &BlockConfig,
    n_blocks: usize,
    h_share: Var,
    mask: &AttentionMask,
    wiring: ExpertWiring,
    emit_st: bool,
    mut drop: Option<&mut DropoutCtx<'_>>,
) -> Result<MoeStreams> {
    assert!(n_blocks >= 1, "an MoE stack needs at least one block");
    let mut h = h_share;
    for i in 0..n_blocks - 1 {
        let asr_only = match wiring {
            ExpertWiring::Split => "ffn_asr",
            ExpertWiring::Tied => "ffn",
        };
        // Plain encoder-block pass over the asr expert.
        let p = format!("{prefix}.{i}");
        let ln_in = layer_norm(g, bp, &format!("{p}.ln1"), h)?;
        let att = mhsa(
            g,
            bp,
            &format!("{p}.attn"),
            cfg.n_heads,
            ln_in,
            ln_in,
            mask,
            drop.as_deref_mut(),
        )?;
        let att = maybe(g, att, &mut drop)?;
        let a = g.add(h, att)?;
        let f = ffn(g, bp, &format!("{p}.{asr_only}"), a, drop.as_deref_mut())?;
        let f = maybe(g, f, &mut drop)?;
        let sum = g.add(a, f)?;
        h = layer_norm(g, bp, &format!("{p}.ln2"), sum)?;
    }
    moe_block_forward(
        g,
        bp,
        &format!("{prefix}.{}", n_blocks - 1),
        cfg,
        h,
        mask,
        wiring,
        emit_st,
        drop,
    )
}

/// Registers one MoE block's parameters under `prefix`.
pub fn init_moe_block<F: Real>(
    params: &mut Parameters<F>,
    seed: u64,
    prefix: &str,
    cfg: &BlockConfig,
    wiring: ExpertWiring,
) -> Result<()> {
    init_layer_norm(params, &format!("{prefix}.ln1"), cfg.d_model)?;
    init_attention(params, seed, &format!("{prefix}.attn"), cfg.d_model)?;
    match wiring {
        ExpertWiring::Split => {
            init_ffn(params, seed, &format!("{prefix}.ffn_asr"), cfg.d_model, cfg.d_ff)?;
            init_ffn(params, seed, &format!("{prefix}.ffn_st"), cfg.d_model, cfg.d_ff)?;
        }
        ExpertWiring::Tied => {
            init_ffn(params, seed, &format!("{prefix}.ffn"), cfg.d_model, cfg.d_ff)?;
        }
    }
    init_layer_norm(params, &format!("{prefix}.ln2"), cfg.d_model)
}

/// Registers a stack of `n_blocks` MoE blocks named `{prefix}.{i}`.
pub fn init_moe_stack<F: Real>(
    params: &mut Parameters<F>,
    seed: u64,
    prefix: &str,
    cfg: &BlockConfig,
    n_blocks: usize,
    wiring: ExpertWiring,
) -> Result<()> {
    for i in 0..n_blocks {
        init_moe_block(params, seed, &format!("{prefix}.{i}"), cfg, wiring)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, Stream, Tensor};
    use crate::transformer::{encoder_block, init_encoder_block};
    use alloc::vec::Vec;

    fn cfg() -> BlockConfig {
        BlockConfig { d_model: 8, n_heads: 2, d_ff: 12, dropout: 0.0 }
    }

    fn rand_rows(stream: &mut Stream, t: usize, d: usize) -> Tensor<f64> {
        let data: Vec<f64> = (0..t * d).map(|_| stream.uniform(-1.0, 1.0)).collect();
        Tensor::new(&[t, d], data).unwrap()
    }

    fn forward_split(
        params: &Parameters<f64>,
        x: &Tensor<f64>,
    ) -> (Tensor<f64>, Tensor<f64>) {
        let mut g = Graph::new();
        let bp = params.bind_all(&mut g);
        let xv = g.leaf(x.clone());
        let mask = AttentionMask::none(x.rows(), x.rows());
        let streams = moe_block_forward(
            &mut g,
            &bp,
            "moe",
            &cfg(),
            xv,
            &mask,
            ExpertWiring::Split,
            true,
            None,
        )
        .unwrap();
        (g.value(streams.asr).clone(), g.value(streams.st.unwrap()).clone())
    }

    #[test]
    fn zeroed_st_expert_cannot_touch_the_asr_stream() {
        let c = cfg();
        let mut params: Parameters<f64> = Parameters::new();
        init_moe_block(&mut params, 3, "moe", &c, ExpertWiring::Split).unwrap();
        let mut s = Stream::new(1, "x");
        let x = rand_rows(&mut s, 3, c.d_model);

        let (asr_before, _) = forward_split(&params, &x);
        for name in ["moe.ffn_st.w1", "moe.ffn_st.b1", "moe.ffn_st.w2", "moe.ffn_st.b2"] {
            let t = params.get_mut(name).unwrap();
            *t = Tensor::zeros(t.shape()).with_grad();
        }
        let (asr_after, st_after) = forward_split(&params, &x);
        assert_eq!(asr_before.data(), asr_after.data(), "asr stream must be bitwise stable");

        // With a zero expert, h_st collapses to LN(a): recompute it.
        let mut g = Graph::new();
        let bp = params.bind_all(&mut g);
        let xv = g.leaf(x.clone());
        let mask = AttentionMask::none(3, 3);
        let ln_in = layer_norm(&mut g, &bp, "moe.ln1", xv).unwrap();
        let att = mhsa(&mut g, &bp, "moe.attn", c.n_heads, ln_in, ln_in, &mask, None).unwrap();
        let a = g.add(xv, att).unwrap();
        let zeros = g.constant(Tensor::zeros(&[3, c.d_model]));
        let sum = g.add(a, zeros).unwrap();
        let expect = layer_norm(&mut g, &bp, "moe.ln2", sum).unwrap();
        assert_eq!(st_after.data(), g.value(expect).data());
    }

    #[test]
    fn swapping_experts_swaps_the_streams_bitwise() {
        let c = cfg();
        let mut params: Parameters<f64> = Parameters::new();
        init_moe_block(&mut params, 5, "moe", &c, ExpertWiring::Split).unwrap();
        let mut s = Stream::new(2, "x");
        let x = rand_rows(&mut s, 4, c.d_model);

        let (asr, st) = forward_split(&params, &x);
        for part in ["w1", "b1", "w2", "b2"] {
            let a = params.get(&format!("moe.ffn_asr.{part}")).unwrap().clone();
            let b = params.get(&format!("moe.ffn_st.{part}")).unwrap().clone();
            *params.get_mut(&format!("moe.ffn_asr.{part}")).unwrap() = b;
            *params.get_mut(&format!("moe.ffn_st.{part}")).unwrap() = a;
        }
        let (asr2, st2) = forward_split(&params, &x);
        assert_eq!(asr.data(), st2.data());
        assert_eq!(st.data(), asr2.data());
    }

    #[test]
    fn asr_stream_equals_a_plain_encoder_block_with_the_same_weights() {
        // Copying ln1/attn/ffn_asr/ln2 into an encoder block must give the
        // asr stream bitwise: the MoE block *is* that block plus a tap.
        let c = cfg();
        let mut params: Parameters<f64> = Parameters::new();
        init_moe_block(&mut params, 7, "moe", &c, ExpertWiring::Split).unwrap();
        let mut enc: Parameters<f64> = Parameters::new();
        init_encoder_block(&mut enc, 7, "blk", &c).unwrap();
        for (name, t) in params.iter() {
            if let Some(rest) = name.strip_prefix("moe.") {
                let target = match rest {
                    r if r.starts_with("ffn_asr.") => {
                        format!("blk.ffn.{}", &r["ffn_asr.".len()..])
                    }
                    r if r.starts_with("ffn_st.") => continue,
                    r => format!("blk.{r}"),
                };
                *enc.get_mut(&target).unwrap() = t.clone();
            }
        }
        let mut s = Stream::new(3, "x");
        let x = rand_rows(&mut s, 3, c.d_model);
        let (asr, _) = forward_split(&params, &x);

        let mut g = Graph::new();
        let bp = enc.bind_all(&mut g);
        let xv = g.leaf(x);
        let mask = AttentionMask::none(3, 3);
        let out = encoder_block(&mut g, &bp, "blk", &c, xv, &mask, None).unwrap();
        assert_eq!(asr.data(), g.value(out).data());
    }

    #[test]
    fn tied_wiring_makes_both_streams_identical() {
        let c = cfg();
        let mut params: Parameters<f64> = Parameters::new();
        init_moe_block(&mut params, 9, "moe", &c, ExpertWiring::Tied).unwrap();
        let mut s = Stream::new(4, "x");
        let x = rand_rows(&mut s, 3, c.d_model);
        let mut g = Graph::new();
        let bp = params.bind_all(&mut g);
        let xv = g.leaf(x);
        let mask = AttentionMask::none(3, 3);
        let streams =
            moe_block_forward(&mut g, &bp, "moe", &c, xv, &mask, ExpertWiring::Tied, true, None)
                .unwrap();
        assert_eq!(streams.asr, streams.st.unwrap(), "tied wiring shares one output node");
    }

    #[test]
    fn skipping_the_st_expert_leaves_the_other_streams_bitwise_intact() {
        let c = cfg();
        let mut params: Parameters<f64> = Parameters::new();
        init_moe_block(&mut params, 10, "moe", &c, ExpertWiring::Split).unwrap();
        let mut s = Stream::new(21, "x");
        let x = rand_rows(&mut s, 3, c.d_model);

        let run = |emit_st: bool| {
            let mut g = Graph::new();
            let bp = params.bind_all(&mut g);
            let xv = g.leaf(x.clone());
            let mask = AttentionMask::none(3, 3);
            let streams = moe_block_forward(
                &mut g,
                &bp,
                "moe",
                &c,
                xv,
                &mask,
                ExpertWiring::Split,
                emit_st,
                None,
            )
            .unwrap();
            (
                g.value(streams.attn).clone(),
                g.value(streams.asr).clone(),
                streams.st.map(|v| g.value(v).clone()),
            )
        };
        let (attn_on, asr_on, st_on) = run(true);
        let (attn_off, asr_off, st_off) = run(false);
        assert!(st_on.is_some());
        assert!(st_off.is_none());
        assert_eq!(attn_on.data(), attn_off.data());
        assert_eq!(asr_on.data(), asr_off.data());
    }

    #[test]
    fn tied_equals_split_with_identical_expert_params() {
        let c = cfg();
        let mut tied: Parameters<f64> = Parameters::new();
        init_moe_block(&mut tied, 11, "moe", &c, ExpertWiring::Tied).unwrap();
        // Split block whose two experts both carry the tied block's FFN.
        let mut split: Parameters<f64> = Parameters::new();
        init_moe_block(&mut split, 11, "moe", &c, ExpertWiring::Split).unwrap();
        for (name, t) in tied.iter() {
            if let Some(rest) = name.strip_prefix("moe.ffn.") {
                *split.get_mut(&format!("moe.ffn_asr.{rest}")).unwrap() = t.clone();
                *split.get_mut(&format!("moe.ffn_st.{rest}")).unwrap() = t.clone();
            } else {
                *split.get_mut(name).unwrap() = t.clone();
            }
        }
        let mut s = Stream::new(5, "x");
        let x = rand_rows(&mut s, 4, c.d_model);

        let mut g = Graph::new();
        let bp = tied.bind_all(&mut g);
        let xv = g.leaf(x.clone());
        let mask = AttentionMask::none(4, 4);
        let t_streams =
            moe_block_forward(&mut g, &bp, "moe", &c, xv, &mask, ExpertWiring::Tied, true, None)
                .unwrap();
        let (s_asr, s_st) = forward_split(&split, &x);
        assert_eq!(g.value(t_streams.asr).data(), s_asr.data());
        assert_eq!(g.value(t_streams.st.unwrap()).data(), s_st.data());
    }

    #[test]
    fn stack_taps_translation_from_the_final_block_only() {
        let c = cfg();
        let mut params: Parameters<f64> = Parameters::new();
        init_moe_stack(&mut params, 13, "stk", &c, 2, ExpertWiring::Split).unwrap();
        let mut s = Stream::new(6, "x");
        let x = rand_rows(&mut s, 3, c.d_model);

        let run = |params: &Parameters<f64>| {
            let mut g = Graph::new();
            let bp = params.bind_all(&mut g);
            let xv = g.leaf(x.clone());
            let mask = AttentionMask::none(3, 3);
            let st = stack_moe_blocks(
                &mut g,
                &bp,
                "stk",
                &c,
                2,
                xv,
                &mask,
                ExpertWiring::Split,
                true,
                None,
            )
            .unwrap();
            (g.value(st.asr).clone(), g.value(st.st.unwrap()).clone())
        };
        let (asr, st) = run(&params);
        // Perturb the *intermediate* block's st expert: nothing may change.
        params
            .get_mut("stk.0.ffn_st.w1")
            .unwrap()
            .data_mut()
            .iter_mut()
            .for_each(|v| *v += 10.0);
        let (asr2, st2) = run(&params);
        assert_eq!(asr.data(), asr2.data());
        assert_eq!(st.data(), st2.data());

        // Perturbing the final block's st expert moves st but not asr.
        params
            .get_mut("stk.1.ffn_st.w1")
            .unwrap()
            .data_mut()
            .iter_mut()
            .for_each(|v| *v += 1.0);
        let (asr3, st3) = run(&params);
        assert_eq!(asr.data(), asr3.data());
        assert_ne!(st.data(), st3.data());
    }

    #[test]
    fn one_block_stack_equals_the_single_block() {
        let c = cfg();
        let mut params: Parameters<f64> = Parameters::new();
        init_moe_stack(&mut params, 15, "stk", &c, 1, ExpertWiring::Split).unwrap();
        let mut s = Stream::new(7, "x");
        let x = rand_rows(&mut s, 3, c.d_model);

        let mut g = Graph::new();
        let bp = params.bind_all(&mut g);
        let xv = g.leaf(x.clone());
        let mask = AttentionMask::none(3, 3);
        let stacked = stack_moe_blocks(
            &mut g,
            &bp,
            "stk",
            &c,
            1,
            xv,
            &mask,
            ExpertWiring::Split,
            true,
            None,
        )
        .unwrap();
        let single =
            moe_block_forward(&mut g, &bp, "stk.0", &c, xv, &mask, ExpertWiring::Split, true, None)
                .unwrap();
        assert_eq!(g.value(stacked.asr).data(), g.value(single.asr).data());
        assert_eq!(g.value(stacked.st.unwrap()).data(), g.value(single.st.unwrap()).data());
    }

    #[test]
    fn moe_block_passes_grad_check() {
        let c = cfg();
        let mut params: Parameters<f64> = Parameters::new();
        init_moe_block(&mut params, 19, "moe", &c, ExpertWiring::Split).unwrap();
        let mut s = Stream::new(8, "gc");
        let x = rand_rows(&mut s, 2, c.d_model);
        let wa = rand_rows(&mut s, 2, c.d_model);
        let ws = rand_rows(&mut s, 2, c.d_model);
        let report = grad_check(&params, 1e-6, 1e-4, |g, vars| {
            let bp = Bound::from_vars(&params, vars);
            let xv = g.leaf(x.clone());
            let mask = AttentionMask::none(2, 2);
            let streams =
                moe_block_forward(g, &bp, "moe", &c, xv, &mask, ExpertWiring::Split, true, None)?;
            let la = g.weighted_neg_sum(streams.asr, wa.clone())?;
            let ls = g.weighted_neg_sum(streams.st.unwrap(), ws.clone())?;
            g.affine(&[la, ls], &[1.0, 1.0])
        })
        .unwrap();
        assert!(report.pass, "{}", report.summary());
    }
}
