//! Model assembly, the joint recognition + translation objective, and
//! the training step.
//!
//! Seven variants share one code path. The full architecture is
//!
//! ```text
//! features ─ subsample ─ shared blocks ─┬─ man MoE ─ man mono ─┐
//!                                       │     └── h_st ──────── en2man decoder
//!                                       └─ en  MoE ─ en  mono ─┤
//!                                             └── h_st ──────── man2en decoder
//!                            h_global_asr = h_man_asr + h_en_asr (elementwise)
//! ```
//!
//! with per-branch CTC heads over masked monolingual labels, a global
//! CTC head (plus an attention decoder in AED variants) over the
//! code-switched label, and translation decoders fed by the MoE
//! translation streams. Vanilla variants keep only the shared stack and
//! the global head; LAE variants add the branches but no translation;
//! tied-expert variants reuse one feed-forward net for both streams.
//!
//! Losses compose by fixed left-to-right affine folds (see
//! [`crate::numerics::affine_fold`]), so every logged composite is
//! bit-reproducible from its logged components:
//!
//! ```text
//! l_spec           = (l_man_ctc + l_en_ctc) / 2
//! l_global_decoder = λ_ctc·l_global_ctc + (1−λ_ctc)·l_global_att   (AED)
//!                  = l_global_ctc                                  (CTC)
//! l_asr            = λ_spec·l_spec + (1−λ_spec)·l_global_decoder
//! l_st             = (l_st_man2en + l_st_en2man) / 2
//! l_final          = l_asr + β·l_st
//! ```
//!
//! When a component does not exist for a variant (no branches, no
//! translation), the composite *aliases* its remaining operand instead
//! of mixing in a zero, so endpoint identities (β=0, λ_spec=0) hold
//! bitwise.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::corpus::{Utterance, VocabSpec};
use crate::ctc::{ctc_loss, CtcLoss, LogProbLattice};
use crate::moe::{init_moe_stack, stack_moe_blocks, ExpertWiring};
use crate::numerics::{
    affine_fold, real, to_f64, Bound, Graph, Parameters, Real, Stream, Tensor, Var,
};
use crate::transformer::{
    decoder_block, encoder_block, init_decoder_block, init_embedding, init_encoder_block,
    init_linear, init_subsample, linear, sinusoid_table, subsample, subsampled_len,
    AttentionMask, BlockConfig, DropoutCtx,
};
use crate::{Error, Result};

// ---------------------------------------------------------------------------
// Variants and configuration.
// ---------------------------------------------------------------------------

/// Architecture/objective variants, from the plain encoder to the full
/// two-branch, expert-routed, jointly translated model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Variant {
    VanillaCtc,
    LaeCtc,
    LaeStCtc,
    LaeStMoeCtc,
    VanillaAed,
    LaeAed,
    LaeStMoeAed,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::VanillaCtc,
        Variant::LaeCtc,
        Variant::LaeStCtc,
        Variant::LaeStMoeCtc,
        Variant::VanillaAed,
        Variant::LaeAed,
        Variant::LaeStMoeAed,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::VanillaCtc => "vanilla_ctc",
            Variant::LaeCtc => "lae_ctc",
            Variant::LaeStCtc => "lae_st_ctc",
            Variant::LaeStMoeCtc => "lae_st_moe_ctc",
            Variant::VanillaAed => "vanilla_aed",
            Variant::LaeAed => "lae_aed",
            Variant::LaeStMoeAed => "lae_st_moe_aed",
        }
    }

    /// Case-insensitive; accepts `-` for `_`.
    pub fn parse(s: &str) -> Result<Variant> {
        let norm: String = s
            .chars()
            .map(|c| if c == '-' { '_' } else { c.to_ascii_lowercase() })
            .collect();
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == norm)
            .ok_or_else(|| {
                Error::InvalidConfig(format!(
                    "unknown variant {s:?}; expected one of: vanilla_ctc, lae_ctc, lae_st_ctc, \
                     lae_st_moe_ctc, vanilla_aed, lae_aed, lae_st_moe_aed"
                ))
            })
    }

    /// Does the encoder fork into per-language branches?
    pub fn has_branches(self) -> bool {
        !matches!(self, Variant::VanillaCtc | Variant::VanillaAed)
    }

    /// Does the model carry translation streams and decoders?
    pub fn has_st(self) -> bool {
        matches!(self, Variant::LaeStCtc | Variant::LaeStMoeCtc | Variant::LaeStMoeAed)
    }

    /// Does the global recognition objective include an attention decoder?
    pub fn has_aed(self) -> bool {
        matches!(self, Variant::VanillaAed | Variant::LaeAed | Variant::LaeStMoeAed)
    }

    /// Expert wiring of the branch blocks that emit the translation
    /// stream; `None` for variants without one.
    pub fn wiring(self) -> Option<ExpertWiring> {
        match self {
            Variant::LaeStCtc => Some(ExpertWiring::Tied),
            Variant::LaeStMoeCtc | Variant::LaeStMoeAed => Some(ExpertWiring::Split),
            _ => None,
        }
    }
}

/// Everything needed to build and train one model.
///
/// Encoder depth splits as `n_encoder = n_share + n_moe + n_mono` where
/// `n_moe` is implied; vanilla variants use the whole budget as shared
/// blocks, branch variants without translation use shared + mono only.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Input feature width (columns of the utterance feature matrix).
    pub feat_dim: usize,
    pub n_encoder: usize,
    pub n_share: usize,
    pub n_mono: usize,
    pub block: BlockConfig,
    pub n_asr_dec_blocks: usize,
    pub n_st_dec_blocks: usize,
    /// Weight of the branch CTC mean inside the recognition loss.
    pub lambda_spec: f64,
    /// Weight of the global CTC term inside the AED recognition loss.
    pub lambda_ctc: f64,
    /// Weight of the translation loss inside the final loss.
    pub beta: f64,
    /// Uniform label smoothing on decoder cross-entropies.
    pub label_smoothing: f64,
    pub vocab: VocabSpec,
}

impl Default for ModelConfig {
    /// The CPU-trainable default: 6 encoder blocks split 4/1/1, width 32.
    fn default() -> Self {
        ModelConfig {
            variant: Variant::LaeStMoeAed,
            feat_dim: 8,
            n_encoder: 6,
            n_share: 4,
            n_mono: 1,
            block: BlockConfig { d_model: 32, n_heads: 4, d_ff: 64, dropout: 0.1 },
            n_asr_dec_blocks: 2,
            n_st_dec_blocks: 2,
            lambda_spec: 0.3,
            lambda_ctc: 0.3,
            beta: 0.6,
            label_smoothing: 0.1,
            vocab: VocabSpec::toy(20, 20).expect("default vocabulary is valid"),
        }
    }
}

impl ModelConfig {
    /// Branch blocks that carry the expert split (or its tied stand-in).
    pub fn n_moe(&self) -> usize {
        self.n_encoder.saturating_sub(self.n_share + self.n_mono)
    }

    /// Should training evaluate the translation decoders at all? False
    /// when the variant has none or β silences them; skipping the
    /// computation keeps a β=0 run bit-identical to a recognition-only
    /// run.
    pub fn want_st(&self) -> bool {
        self.variant.has_st() && self.beta > 0.0
    }

    /// Checks every constraint and reports *all* violations at once.
    pub fn validate(&self) -> Result<()> {
        let mut issues: Vec<String> = Vec::new();
        if let Err(e) = self.block.validate() {
            issues.push(format!("block: {e}"));
        }
        if self.feat_dim == 0 {
            issues.push("feat_dim must be at least 1".to_string());
        }
        if self.n_share + self.n_mono > self.n_encoder {
            issues.push(format!(
                "n_share + n_mono = {} exceeds n_encoder = {}",
                self.n_share + self.n_mono,
                self.n_encoder
            ));
        }
        let n_moe = self.n_moe();
        match self.variant {
            Variant::VanillaCtc | Variant::VanillaAed => {
                if self.n_share != self.n_encoder || self.n_mono != 0 {
                    issues.push(format!(
                        "vanilla variants use one undivided encoder: set n_share = n_encoder \
                         ({}) and n_mono = 0 (got n_share={}, n_mono={})",
                        self.n_encoder, self.n_share, self.n_mono
                    ));
                }
            }
            Variant::LaeCtc | Variant::LaeAed => {
                if n_moe != 0 {
                    issues.push(format!(
                        "plain branch variants have no expert blocks: n_encoder must equal \
                         n_share + n_mono (implied expert depth is {n_moe})"
                    ));
                }
                if self.n_mono == 0 {
                    issues.push("branch variants need n_mono >= 1".to_string());
                }
            }
            Variant::LaeStCtc | Variant::LaeStMoeCtc | Variant::LaeStMoeAed => {
                if n_moe == 0 {
                    issues.push(
                        "translation variants need at least one expert block: \
                         n_encoder - n_share - n_mono >= 1"
                            .to_string(),
                    );
                }
            }
        }
        if self.n_share == 0 {
            issues.push("n_share must be at least 1".to_string());
        }
        if !(0.0..=1.0).contains(&self.lambda_spec) {
            issues.push(format!("lambda_spec = {} outside [0, 1]", self.lambda_spec));
        }
        if !(0.0..=1.0).contains(&self.lambda_ctc) {
            issues.push(format!("lambda_ctc = {} outside [0, 1]", self.lambda_ctc));
        }
        if !self.beta.is_finite() || self.beta < 0.0 {
            issues.push(format!("beta = {} must be finite and >= 0", self.beta));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            issues.push(format!("label_smoothing = {} outside [0, 1)", self.label_smoothing));
        }
        if self.n_asr_dec_blocks == 0 {
            issues.push("n_asr_dec_blocks must be positive".to_string());
        }
        if self.n_st_dec_blocks == 0 {
            issues.push("n_st_dec_blocks must be positive".to_string());
        }
        if issues.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(issues.join("; ")))
        }
    }
}

// ---------------------------------------------------------------------------
// Construction.
// ---------------------------------------------------------------------------

/// A configuration plus its parameter tree.
#[derive(Clone, Debug)]
pub struct Model<F: Real> {
    pub cfg: ModelConfig,
    pub params: Parameters<F>,
}

fn init_decoder<F: Real>(
    params: &mut Parameters<F>,
    seed: u64,
    prefix: &str,
    block: &BlockConfig,
    n_blocks: usize,
    vocab_size: usize,
) -> Result<()> {
    init_embedding(params, seed, &format!("{prefix}.embed"), vocab_size, block.d_model)?;
    for i in 0..n_blocks {
        init_decoder_block(params, seed, &format!("{prefix}.blk.{i}"), block)?;
    }
    init_linear(params, seed, &format!("{prefix}.out"), block.d_model, vocab_size)
}

/// Creates the full parameter tree for `cfg`. Initialization draws from
/// streams keyed by parameter name, so two builds with one seed are
/// bitwise identical and independent of registration order.
pub fn build_model<F: Real>(cfg: &ModelConfig, seed: u64) -> Result<Model<F>> {
    cfg.validate()?;
    let v = cfg.vocab.size();
    let d = cfg.block.d_model;
    let mut params: Parameters<F> = Parameters::new();
    init_subsample(&mut params, seed, "sub", cfg.feat_dim, d)?;
    for i in 0..cfg.n_share {
        init_encoder_block(&mut params, seed, &format!("enc.{i}"), &cfg.block)?;
    }
    if cfg.variant.has_branches() {
        for lang in ["man", "en"] {
            if let Some(wiring) = cfg.variant.wiring() {
                init_moe_stack(
                    &mut params,
                    seed,
                    &format!("{lang}.moe"),
                    &cfg.block,
                    cfg.n_moe(),
                    wiring,
                )?;
            }
            for i in 0..cfg.n_mono {
                init_encoder_block(&mut params, seed, &format!("{lang}.mono.{i}"), &cfg.block)?;
            }
        }
        init_linear(&mut params, seed, "head.man", d, v)?;
        init_linear(&mut params, seed, "head.en", d, v)?;
    }
    init_linear(&mut params, seed, "head.global", d, v)?;
    if cfg.variant.has_aed() {
        init_decoder(&mut params, seed, "dec.asr", &cfg.block, cfg.n_asr_dec_blocks, v)?;
    }
    if cfg.variant.has_st() {
        init_decoder(&mut params, seed, "dec.man2en", &cfg.block, cfg.n_st_dec_blocks, v)?;
        init_decoder(&mut params, seed, "dec.en2man", &cfg.block, cfg.n_st_dec_blocks, v)?;
    }
    Ok(Model { cfg: cfg.clone(), params })
}

// ---------------------------------------------------------------------------
// Forward pass.
// ---------------------------------------------------------------------------

/// One language branch's streams.
#[derive(Clone, Copy, Debug)]
pub struct LangBranch {
    /// The branch's shared post-attention stream inside the final expert
    /// block (`None` for plain branch variants, which have no experts).
    pub h_asr_st: Option<Var>,
    /// Recognition stream entering the branch's mono blocks.
    pub h0_asr: Var,
    /// Translation stream (`None` unless requested on an expert variant).
    pub h_st: Option<Var>,
    /// Branch output after the mono blocks.
    pub h_asr: Var,
}

/// Every intermediate stream of one utterance's encoder pass.
#[derive(Clone, Debug)]
pub struct ForwardState {
    /// Frames after subsampling.
    pub frames: usize,
    pub h_share: Var,
    pub man: Option<LangBranch>,
    pub en: Option<LangBranch>,
    /// Elementwise sum of the branch outputs (the shared stack output
    /// itself for vanilla variants).
    pub h_global_asr: Var,
}

#[allow(clippy::too_many_arguments)] // explicit-tape style: the graph, bindings, and streams are all arguments
fn run_branch<F: Real>(
    g: &mut Graph<F>,
    bp: &Bound<'_, F>,
    cfg: &ModelConfig,
    lang: &str,
    h_share: Var,
    mask: &AttentionMask,
    want_st: bool,
    mut drop: Option<&mut DropoutCtx<'_>>,
) -> Result<LangBranch> {
    let (h_asr_st, h0_asr, h_st) = match cfg.variant.wiring() {
        Some(wiring) => {
            let streams = stack_moe_blocks(
                g,
                bp,
                &format!("{lang}.moe"),
                &cfg.block,
                cfg.n_moe(),
                h_share,
                mask,
                wiring,
                want_st,
                drop.as_deref_mut(),
            )?;
            (Some(streams.attn), streams.asr, streams.st)
        }
        None => (None, h_share, None),
    };
    let mut h = h0_asr;
    for i in 0..cfg.n_mono {
        h = encoder_block(
            g,
            bp,
            &format!("{lang}.mono.{i}"),
            &cfg.block,
            h,
            mask,
            drop.as_deref_mut(),
        )?;
    }
    Ok(LangBranch { h_asr_st, h0_asr, h_st, h_asr: h })
}

/// Runs the encoder side on features `x` (`[T, feat_dim]`, `T >= 4`).
///
/// `want_st = true` additionally materializes the translation streams;
/// it requires a translation-bearing variant.
pub fn forward<F: Real>(
    g: &mut Graph<F>,
    bp: &Bound<'_, F>,
    cfg: &ModelConfig,
    x: Var,
    want_st: bool,
    mut drop: Option<&mut DropoutCtx<'_>>,
) -> Result<ForwardState> {
    if want_st && !cfg.variant.has_st() {
        return Err(Error::InvalidConfig(format!(
            "variant {} has no translation streams",
            cfg.variant.name()
        )));
    }
    let mut h = subsample(g, bp, "sub", x)?;
    let frames = g.value(h).rows();
    let mask = AttentionMask::none(frames, frames);
    for i in 0..cfg.n_share {
        h = encoder_block(g, bp, &format!("enc.{i}"), &cfg.block, h, &mask, drop.as_deref_mut())?;
    }
    if !cfg.variant.has_branches() {
        return Ok(ForwardState { frames, h_share: h, man: None, en: None, h_global_asr: h });
    }
    let man = run_branch(g, bp, cfg, "man", h, &mask, want_st, drop.as_deref_mut())?;
    let en = run_branch(g, bp, cfg, "en", h, &mask, want_st, drop)?;
    let h_global_asr = g.add(man.h_asr, en.h_asr)?;
    Ok(ForwardState { frames, h_share: h, man: Some(man), en: Some(en), h_global_asr })
}

/// Frame classifier: linear head + row-wise log-softmax over the vocabulary.
pub fn ctc_head<F: Real>(
    g: &mut Graph<F>,
    bp: &Bound<'_, F>,
    name: &str,
    h: Var,
) -> Result<Var> {
    let z = linear(g, bp, name, h)?;
    g.log_softmax_rows(z)
}

// ---------------------------------------------------------------------------
// Decoders: teacher forcing and scoring.
// ---------------------------------------------------------------------------

/// Runs decoder `prefix` over an already-`sos`-prefixed token sequence
/// against `memory`, returning the `[len, V]` next-token log-probability
/// rows on the tape.
#[allow(clippy::too_many_arguments)] // explicit-tape style: the graph, bindings, and streams are all arguments
pub fn decoder_states<F: Real>(
    g: &mut Graph<F>,
    bp: &Bound<'_, F>,
    prefix: &str,
    block: &BlockConfig,
    n_blocks: usize,
    input: &[usize],
    memory: Var,
    mut drop: Option<&mut DropoutCtx<'_>>,
) -> Result<Var> {
    if input.is_empty() {
        return Err(Error::InvalidInput("decoder input must start with sos".to_string()));
    }
    let table = bp.var(&format!("{prefix}.embed"))?;
    let e = g.embed_rows(table, input)?;
    let e = g.scale(e, real::<F>(libm::sqrt(block.d_model as f64)))?;
    let pos = sinusoid_table::<F>(input.len(), block.d_model);
    let mut h = g.add_const(e, &pos)?;
    if let Some(ctx) = drop.as_deref_mut() {
        h = g.dropout(h, ctx.rate, ctx.stream)?;
    }
    for i in 0..n_blocks {
        h = decoder_block(
            g,
            bp,
            &format!("{prefix}.blk.{i}"),
            block,
            h,
            memory,
            drop.as_deref_mut(),
        )?;
    }
    let z = linear(g, bp, &format!("{prefix}.out"), h)?;
    g.log_softmax_rows(z)
}

/// Convenience for decoding/rescoring outside a training graph: fresh
/// graph, constant memory, no dropout.
pub fn decoder_logprobs<F: Real>(
    params: &Parameters<F>,
    block: &BlockConfig,
    n_blocks: usize,
    prefix: &str,
    memory: &Tensor<F>,
    input: &[usize],
) -> Result<Tensor<F>> {
    let mut g = Graph::new();
    let bp = params.bind_all(&mut g);
    let mem = g.constant(memory.clone());
    let lp = decoder_states(&mut g, &bp, prefix, block, n_blocks, input, mem, None)?;
    Ok(g.value(lp).clone())
}

/// `sum_j q_j ln q_j` of the smoothed one-hot target distribution —
/// the additive constant that turns smoothed cross-entropy into a KL
/// divergence with minimum exactly zero.
fn smoothing_offset(vocab: usize, eps: f64) -> f64 {
    let off = eps / vocab as f64;
    let on = 1.0 - eps + off;
    let mut s = if on > 0.0 { on * libm::log(on) } else { 0.0 };
    if off > 0.0 {
        s += (vocab - 1) as f64 * off * libm::log(off);
    }
    s
}

/// Teacher-forced decoder loss: mean per-token KL between the smoothed
/// one-hot targets and the decoder's predictive distributions.
///
/// Input is `<sos> y…`, scored positions are `y… <eos>`; the `sos`
/// position is never a target. Minimum 0 (attained only by matching the
/// smoothed distribution exactly), so near-zero values mean the decoder
/// has genuinely nailed the sequence.
#[allow(clippy::too_many_arguments)] // explicit-tape style: the graph, bindings, and streams are all arguments
pub fn decoder_nll<F: Real>(
    g: &mut Graph<F>,
    bp: &Bound<'_, F>,
    prefix: &str,
    block: &BlockConfig,
    n_blocks: usize,
    memory: Var,
    target: &[usize],
    vocab: &VocabSpec,
    smoothing: f64,
    drop: Option<&mut DropoutCtx<'_>>,
) -> Result<Var> {
    let v = vocab.size();
    for &tok in target {
        if tok >= v || tok == vocab.sos || tok == vocab.eos || tok == vocab.blank {
            return Err(Error::InvalidInput(format!(
                "decoder target token {tok} is reserved or out of range"
            )));
        }
    }
    let mut input = vec![vocab.sos];
    input.extend_from_slice(target);
    let mut scored: Vec<usize> = target.to_vec();
    scored.push(vocab.eos);

    let lp = decoder_states(g, bp, prefix, block, n_blocks, &input, memory, drop)?;
    let rows = scored.len();
    let off = real::<F>(smoothing / v as f64 / rows as f64);
    let on = real::<F>((1.0 - smoothing + smoothing / v as f64) / rows as f64);
    let mut w = vec![off; rows * v];
    for (r, &tok) in scored.iter().enumerate() {
        w[r * v + tok] = on;
    }
    let nll = g.weighted_neg_sum(lp, Tensor::new(&[rows, v], w)?)?;
    g.add_const(nll, &Tensor::scalar(real::<F>(smoothing_offset(v, smoothing))))
}

// ---------------------------------------------------------------------------
// Loss composition.
// ---------------------------------------------------------------------------

/// Every loss of one step, as reported. Fields a variant does not
/// compute are `None`; composites alias their remaining operand rather
/// than mixing in zeros (see the module docs).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub l_man_ctc: Option<f64>,
    pub l_en_ctc: Option<f64>,
    pub l_spec: Option<f64>,
    pub l_global_ctc: Option<f64>,
    pub l_global_att: Option<f64>,
    pub l_global_decoder: Option<f64>,
    pub l_asr: Option<f64>,
    pub l_st_man2en: Option<f64>,
    pub l_st_en2man: Option<f64>,
    pub l_st: Option<f64>,
    pub l_final: Option<f64>,
}

impl LossBreakdown {
    /// Recomputes every composite from its logged components with the
    /// same folds (in working precision `F`) and demands bitwise
    /// equality. Identities over absent components are skipped.
    pub fn verify_identities<F: Real>(
        &self,
        lambda_spec: f64,
        lambda_ctc: f64,
        beta: f64,
    ) -> Result<()> {
        fn expect(name: &str, got: Option<f64>, want: f64) -> Result<()> {
            match got {
                Some(g) if g == want => Ok(()),
                Some(g) => Err(Error::InvalidInput(format!(
                    "loss identity violated: {name} logged {g:e} but recomposes to {want:e}"
                ))),
                None => Err(Error::InvalidInput(format!(
                    "loss identity violated: {name} missing though its components are present"
                ))),
            }
        }
        let f = |x: f64| real::<F>(x);
        if let (Some(m), Some(e)) = (self.l_man_ctc, self.l_en_ctc) {
            let want = affine_fold(&[(f(0.5), f(m)), (f(0.5), f(e))]);
            expect("l_spec", self.l_spec, to_f64(want))?;
        }
        if let Some(c) = self.l_global_ctc {
            let want = match self.l_global_att {
                Some(a) => to_f64(affine_fold(&[
                    (f(lambda_ctc), f(c)),
                    (f(1.0 - lambda_ctc), f(a)),
                ])),
                None => c,
            };
            expect("l_global_decoder", self.l_global_decoder, want)?;
        }
        if let Some(gd) = self.l_global_decoder {
            let want = match self.l_spec {
                Some(s) => to_f64(affine_fold(&[
                    (f(lambda_spec), f(s)),
                    (f(1.0 - lambda_spec), f(gd)),
                ])),
                None => gd,
            };
            expect("l_asr", self.l_asr, want)?;
        }
        if let (Some(m2e), Some(e2m)) = (self.l_st_man2en, self.l_st_en2man) {
            let want = affine_fold(&[(f(0.5), f(m2e)), (f(0.5), f(e2m))]);
            expect("l_st", self.l_st, to_f64(want))?;
        }
        if let Some(asr) = self.l_asr {
            if self.l_final.is_some() {
                let want = match self.l_st {
                    Some(st) => to_f64(affine_fold(&[(f(1.0), f(asr)), (f(beta), f(st))])),
                    None => asr,
                };
                expect("l_final", self.l_final, want)?;
            }
        }
        Ok(())
    }
}

/// Atomic per-step loss nodes before composition.
#[derive(Clone, Copy, Debug, Default)]
struct Atoms {
    man_ctc: Option<Var>,
    en_ctc: Option<Var>,
    global_ctc: Option<Var>,
    global_att: Option<Var>,
    man2en: Option<Var>,
    en2man: Option<Var>,
}

/// Composite loss nodes; same aliasing rules as [`LossBreakdown`].
#[derive(Clone, Copy, Debug, Default)]
struct Composed {
    l_spec: Option<Var>,
    l_global_decoder: Option<Var>,
    l_asr: Option<Var>,
    l_st: Option<Var>,
    l_final: Option<Var>,
}

fn compose<F: Real>(
    g: &mut Graph<F>,
    lambda_spec: f64,
    lambda_ctc: f64,
    beta: f64,
    a: &Atoms,
) -> Result<Composed> {
    let half = real::<F>(0.5);
    let l_spec = match (a.man_ctc, a.en_ctc) {
        (Some(m), Some(e)) => Some(g.affine(&[m, e], &[half, half])?),
        _ => None,
    };
    let l_global_decoder = match (a.global_ctc, a.global_att) {
        (Some(c), Some(att)) => Some(g.affine(
            &[c, att],
            &[real::<F>(lambda_ctc), real::<F>(1.0 - lambda_ctc)],
        )?),
        (Some(c), None) => Some(c),
        (None, _) => None,
    };
    let l_asr = match (l_spec, l_global_decoder) {
        (Some(s), Some(gd)) => Some(g.affine(
            &[s, gd],
            &[real::<F>(lambda_spec), real::<F>(1.0 - lambda_spec)],
        )?),
        (None, Some(gd)) => Some(gd),
        _ => None,
    };
    let l_st = match (a.man2en, a.en2man) {
        (Some(x), Some(y)) => Some(g.affine(&[x, y], &[half, half])?),
        _ => None,
    };
    let l_final = match (l_asr, l_st) {
        (Some(asr), Some(st)) => Some(g.affine(&[asr, st], &[real::<F>(1.0), real::<F>(beta)])?),
        (Some(asr), None) => Some(asr),
        (None, _) => None,
    };
    Ok(Composed { l_spec, l_global_decoder, l_asr, l_st, l_final })
}

fn breakdown<F: Real>(g: &Graph<F>, a: &Atoms, c: &Composed) -> LossBreakdown {
    let val = |v: Option<Var>| v.map(|v| to_f64(g.value(v).item()));
    LossBreakdown {
        l_man_ctc: val(a.man_ctc),
        l_en_ctc: val(a.en_ctc),
        l_spec: val(c.l_spec),
        l_global_ctc: val(a.global_ctc),
        l_global_att: val(a.global_att),
        l_global_decoder: val(c.l_global_decoder),
        l_asr: val(c.l_asr),
        l_st_man2en: val(a.man2en),
        l_st_en2man: val(a.en2man),
        l_st: val(c.l_st),
        l_final: val(c.l_final),
    }
}

/// One utterance's atomic losses, or the reason it cannot contribute.
enum AtomOutcome {
    Built(Atoms),
    /// Some CTC target cannot be aligned within the frame budget.
    Unreachable(String),
}

/// Builds the requested atomic losses for one utterance on the tape.
/// `want_asr` gates the CTC heads and attention decoder, `want_st` the
/// translation decoders; dropout draws happen in a fixed order (encoder,
/// heads, recognition decoder, man2en, en2man).
fn utterance_atoms<F: Real>(
    g: &mut Graph<F>,
    bp: &Bound<'_, F>,
    cfg: &ModelConfig,
    utt: &Utterance,
    want_asr: bool,
    want_st: bool,
    mut drop: Option<&mut DropoutCtx<'_>>,
) -> Result<AtomOutcome> {
    if want_asr {
        // Cheap reachability precheck before paying for the forward pass.
        let frames = subsampled_len(utt.features.rows());
        let mut views: Vec<(&str, &[usize])> = vec![("code-switched", &utt.y_cs)];
        if cfg.variant.has_branches() {
            views.push(("mandarin-masked", &utt.y_man_spec));
            views.push(("english-masked", &utt.y_en_spec));
        }
        for (name, target) in views {
            let need = crate::ctc::min_frames(target);
            if frames < need {
                return Ok(AtomOutcome::Unreachable(format!(
                    "{}: {name} target needs {need} frames but only {frames} remain after \
                     subsampling",
                    utt.id
                )));
            }
        }
    }

    let x = g.constant(utt.features.cast::<F>());
    let state = forward(g, bp, cfg, x, want_st, drop.as_deref_mut())?;
    let mut atoms = Atoms::default();

    if want_asr {
        let lat = ctc_head(g, bp, "head.global", state.h_global_asr)?;
        match ctc_loss(g, lat, cfg.vocab.blank, &utt.y_cs)? {
            CtcLoss::Loss(v) => atoms.global_ctc = Some(v),
            CtcLoss::Unreachable => {
                return Ok(AtomOutcome::Unreachable(format!(
                    "{}: code-switched target unreachable",
                    utt.id
                )))
            }
        }
        if let (Some(man), Some(en)) = (&state.man, &state.en) {
            let man_lat = ctc_head(g, bp, "head.man", man.h_asr)?;
            let en_lat = ctc_head(g, bp, "head.en", en.h_asr)?;
            match ctc_loss(g, man_lat, cfg.vocab.blank, &utt.y_man_spec)? {
                CtcLoss::Loss(v) => atoms.man_ctc = Some(v),
                CtcLoss::Unreachable => {
                    return Ok(AtomOutcome::Unreachable(format!(
                        "{}: mandarin-masked target unreachable",
                        utt.id
                    )))
                }
            }
            match ctc_loss(g, en_lat, cfg.vocab.blank, &utt.y_en_spec)? {
                CtcLoss::Loss(v) => atoms.en_ctc = Some(v),
                CtcLoss::Unreachable => {
                    return Ok(AtomOutcome::Unreachable(format!(
                        "{}: english-masked target unreachable",
                        utt.id
                    )))
                }
            }
        }
        if cfg.variant.has_aed() {
            atoms.global_att = Some(decoder_nll(
                g,
                bp,
                "dec.asr",
                &cfg.block,
                cfg.n_asr_dec_blocks,
                state.h_global_asr,
                &utt.y_cs,
                &cfg.vocab,
                cfg.label_smoothing,
                drop.as_deref_mut(),
            )?);
        }
    }

    if want_st {
        let man = state.man.as_ref().expect("forward checked the variant");
        let en = state.en.as_ref().expect("forward checked the variant");
        let mem_man2en = en.h_st.expect("want_st materializes the stream");
        let mem_en2man = man.h_st.expect("want_st materializes the stream");
        atoms.man2en = Some(decoder_nll(
            g,
            bp,
            "dec.man2en",
            &cfg.block,
            cfg.n_st_dec_blocks,
            mem_man2en,
            &utt.y_en,
            &cfg.vocab,
            cfg.label_smoothing,
            drop.as_deref_mut(),
        )?);
        atoms.en2man = Some(decoder_nll(
            g,
            bp,
            "dec.en2man",
            &cfg.block,
            cfg.n_st_dec_blocks,
            mem_en2man,
            &utt.y_man,
            &cfg.vocab,
            cfg.label_smoothing,
            drop,
        )?);
    }

    Ok(AtomOutcome::Built(atoms))
}

/// Per-utterance loss evaluation outcome.
#[derive(Clone, Debug, PartialEq)]
pub enum LossOutcome {
    /// The utterance was skipped; the string names it and explains why.
    Skipped(String),
    Breakdown(LossBreakdown),
}

fn eval_single<F: Real>(
    model: &Model<F>,
    utt: &Utterance,
    want_asr: bool,
    want_st: bool,
    beta: f64,
) -> Result<LossOutcome> {
    let mut g: Graph<F> = Graph::new();
    let bp = model.params.bind_all(&mut g);
    let atoms = match utterance_atoms(&mut g, &bp, &model.cfg, utt, want_asr, want_st, None)? {
        AtomOutcome::Built(a) => a,
        AtomOutcome::Unreachable(why) => return Ok(LossOutcome::Skipped(why)),
    };
    let composed = compose(&mut g, model.cfg.lambda_spec, model.cfg.lambda_ctc, beta, &atoms)?;
    Ok(LossOutcome::Breakdown(breakdown(&g, &atoms, &composed)))
}

/// Recognition losses of one utterance (branch CTCs, global CTC, the
/// attention term for AED variants, and their compositions up to
/// `l_asr`). Translation fields stay `None`.
pub fn asr_loss<F: Real>(model: &Model<F>, utt: &Utterance) -> Result<LossOutcome> {
    eval_single(model, utt, true, false, model.cfg.beta)
}

/// Translation losses of one utterance (both decoder directions and
/// their mean). Errors on variants without translation decoders.
pub fn st_loss<F: Real>(model: &Model<F>, utt: &Utterance) -> Result<LossBreakdown> {
    if !model.cfg.variant.has_st() {
        return Err(Error::InvalidConfig(format!(
            "variant {} has no translation decoders",
            model.cfg.variant.name()
        )));
    }
    match eval_single(model, utt, false, true, model.cfg.beta)? {
        LossOutcome::Breakdown(b) => Ok(b),
        LossOutcome::Skipped(why) => Err(Error::InvalidInput(format!(
            "translation losses cannot be skipped, yet: {why}"
        ))),
    }
}

/// The complete objective for one utterance at the given translation
/// weight: every applicable field of [`LossBreakdown`] filled in.
pub fn final_loss<F: Real>(model: &Model<F>, utt: &Utterance, beta: f64) -> Result<LossOutcome> {
    let want_st = model.cfg.variant.has_st() && beta > 0.0;
    eval_single(model, utt, true, want_st, beta)
}

/// Builds the complete objective of one utterance in a caller-owned graph,
/// binding parameters from `vars` (as produced by [`Parameters::bind`] on
/// the same parameter set, in the same order). Deterministic: dropout is
/// off, so repeated builds at the same parameters agree bitwise. Returns
/// `None` when the utterance cannot be scored (a target view longer than
/// the frame budget). Intended for gradient checking and for embedding
/// the objective in larger graphs.
pub fn objective_var<F: Real>(
    g: &mut Graph<F>,
    params: &Parameters<F>,
    vars: &[Var],
    cfg: &ModelConfig,
    utt: &Utterance,
    beta: f64,
) -> Result<Option<Var>> {
    let bp = Bound::from_vars(params, vars);
    let want_st = cfg.variant.has_st() && beta > 0.0;
    let atoms = match utterance_atoms(g, &bp, cfg, utt, true, want_st, None)? {
        AtomOutcome::Built(a) => a,
        AtomOutcome::Unreachable(_) => return Ok(None),
    };
    let composed = compose(g, cfg.lambda_spec, cfg.lambda_ctc, beta, &atoms)?;
    Ok(composed.l_final)
}

// ---------------------------------------------------------------------------
// Inference-side extraction.
// ---------------------------------------------------------------------------

/// Forward outputs of one utterance as plain tensors, ready for search:
/// validated log-probability lattices for every CTC head plus the
/// decoder memories.
#[derive(Clone, Debug)]
pub struct Inference<F: Real> {
    /// Frames after subsampling.
    pub frames: usize,
    pub global: LogProbLattice<F>,
    pub man: Option<LogProbLattice<F>>,
    pub en: Option<LogProbLattice<F>>,
    /// Memory for the recognition attention decoder (`dec.asr`).
    pub h_global: Tensor<F>,
    /// Memory for `dec.man2en` (the English branch's translation stream).
    pub mem_man2en: Option<Tensor<F>>,
    /// Memory for `dec.en2man` (the Mandarin branch's translation stream).
    pub mem_en2man: Option<Tensor<F>>,
}

/// Evaluation-mode forward pass (no dropout) returning plain tensors.
pub fn infer<F: Real>(
    model: &Model<F>,
    features: &Tensor<f64>,
    want_st: bool,
) -> Result<Inference<F>> {
    let cfg = &model.cfg;
    let mut g: Graph<F> = Graph::new();
    let bp = model.params.bind_all(&mut g);
    let x = g.constant(features.cast::<F>());
    let state = forward(&mut g, &bp, cfg, x, want_st, None)?;
    let blank = cfg.vocab.blank;

    let global_lat = ctc_head(&mut g, &bp, "head.global", state.h_global_asr)?;
    let global = LogProbLattice::new(g.value(global_lat).clone(), blank)?;
    let (man, en) = match (&state.man, &state.en) {
        (Some(m), Some(e)) => {
            let man_lat = ctc_head(&mut g, &bp, "head.man", m.h_asr)?;
            let en_lat = ctc_head(&mut g, &bp, "head.en", e.h_asr)?;
            (
                Some(LogProbLattice::new(g.value(man_lat).clone(), blank)?),
                Some(LogProbLattice::new(g.value(en_lat).clone(), blank)?),
            )
        }
        _ => (None, None),
    };
    Ok(Inference {
        frames: state.frames,
        global,
        man,
        en,
        h_global: g.value(state.h_global_asr).clone(),
        mem_man2en: state.en.as_ref().and_then(|b| b.h_st).map(|v| g.value(v).clone()),
        mem_en2man: state.man.as_ref().and_then(|b| b.h_st).map(|v| g.value(v).clone()),
    })
}

// ---------------------------------------------------------------------------
// Optimization.
// ---------------------------------------------------------------------------

/// Adam hyperparameters and schedule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimConfig {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm ceiling; gradients are rescaled above it.
    pub clip_norm: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            peak_lr: 1e-3,
            warmup_steps: 200,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            clip_norm: 5.0,
        }
    }
}

/// Learning rate at 1-based step `s`: linear warmup to the peak, then
/// inverse-square-root decay (`peak · min(s/w, sqrt(w/s))`).
pub fn lr_at(cfg: &OptimConfig, step: u64) -> f64 {
    let s = step.max(1) as f64;
    let w = cfg.warmup_steps.max(1) as f64;
    cfg.peak_lr * (s / w).min(libm::sqrt(w / s))
}

/// First/second-moment accumulators, index-aligned with the parameter
/// tree's registration order.
#[derive(Clone, Debug)]
pub struct AdamState<F: Real> {
    pub step: u64,
    pub m: Vec<Tensor<F>>,
    pub v: Vec<Tensor<F>>,
}

impl<F: Real> AdamState<F> {
    pub fn new(params: &Parameters<F>) -> Self {
        let zeros: Vec<Tensor<F>> =
            (0..params.len()).map(|i| Tensor::zeros(params.tensor(i).shape())).collect();
        AdamState { step: 0, m: zeros.clone(), v: zeros }
    }

    /// Shape-compatibility check used when resuming from a checkpoint.
    pub fn matches(&self, params: &Parameters<F>) -> bool {
        self.m.len() == params.len()
            && self.v.len() == params.len()
            && (0..params.len())
                .all(|i| self.m[i].shape() == params.tensor(i).shape()
                    && self.v[i].shape() == params.tensor(i).shape())
    }
}

/// What one training step did.
#[derive(Clone, Debug)]
pub struct StepReport {
    /// 1-based step index after the update.
    pub step: u64,
    pub lr: f64,
    /// Pre-clip global gradient norm.
    pub grad_norm: f64,
    pub clipped: bool,
    /// Utterances that contributed.
    pub kept: usize,
    /// Skip reasons (unreachable CTC targets), one per dropped utterance.
    pub skipped: Vec<String>,
    /// Batch-mean losses; composites are composed from the logged means,
    /// so the composition identities hold on these exact values.
    pub losses: LossBreakdown,
}

fn mean_of<F: Real>(g: &mut Graph<F>, vars: &[Var]) -> Result<Option<Var>> {
    if vars.is_empty() {
        return Ok(None);
    }
    let w = real::<F>(1.0 / vars.len() as f64);
    Ok(Some(g.affine(vars, &vec![w; vars.len()])?))
}

/// One optimization step over `batch`.
///
/// Builds every utterance's losses on one tape, averages each atomic
/// loss over the batch, composes the objective from those means, then
/// backpropagates and applies Adam with warmup/inverse-sqrt schedule and
/// global-norm clipping. Utterances with unreachable CTC targets are
/// skipped and reported; a batch whose every utterance is skipped is an
/// error, as is a non-finite loss (named by utterance).
///
/// `want_st` normally comes from [`ModelConfig::want_st`]; passing
/// `false` on a translation variant trains recognition only.
pub fn train_step<F: Real>(
    model: &mut Model<F>,
    ocfg: &OptimConfig,
    opt: &mut AdamState<F>,
    batch: &[&Utterance],
    dropout_stream: &mut Stream,
    want_st: bool,
) -> Result<StepReport> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty batch".to_string()));
    }
    if !opt.matches(&model.params) {
        return Err(Error::InvalidInput(
            "optimizer state does not match the parameter tree".to_string(),
        ));
    }
    let cfg = model.cfg.clone();
    let rate = cfg.block.dropout;

    let mut g: Graph<F> = Graph::new();
    let mut skipped: Vec<String> = Vec::new();
    let (vars, atoms_mean, composed) = {
        let bp = model.params.bind_all(&mut g);
        let mut per_kind: [Vec<Var>; 6] = Default::default();
        for utt in batch {
            let mut ctx = DropoutCtx { rate, stream: dropout_stream };
            let drop = if rate > 0.0 { Some(&mut ctx) } else { None };
            let atoms = match utterance_atoms(&mut g, &bp, &cfg, utt, true, want_st, drop)? {
                AtomOutcome::Built(a) => a,
                AtomOutcome::Unreachable(why) => {
                    skipped.push(why);
                    continue;
                }
            };
            let parts = [
                ("branch CTC (man)", atoms.man_ctc),
                ("branch CTC (en)", atoms.en_ctc),
                ("global CTC", atoms.global_ctc),
                ("attention", atoms.global_att),
                ("man2en", atoms.man2en),
                ("en2man", atoms.en2man),
            ];
            for (i, (what, var)) in parts.into_iter().enumerate() {
                if let Some(v) = var {
                    if !to_f64(g.value(v).item()).is_finite() {
                        return Err(Error::NonFinite(format!(
                            "utterance {}: {what} loss is not finite",
                            utt.id
                        )));
                    }
                    per_kind[i].push(v);
                }
            }
        }
        if per_kind[2].is_empty() {
            return Err(Error::InvalidInput(format!(
                "every utterance in the batch was skipped: {}",
                skipped.join("; ")
            )));
        }
        let atoms_mean = Atoms {
            man_ctc: mean_of(&mut g, &per_kind[0])?,
            en_ctc: mean_of(&mut g, &per_kind[1])?,
            global_ctc: mean_of(&mut g, &per_kind[2])?,
            global_att: mean_of(&mut g, &per_kind[3])?,
            man2en: mean_of(&mut g, &per_kind[4])?,
            en2man: mean_of(&mut g, &per_kind[5])?,
        };
        let composed = compose(&mut g, cfg.lambda_spec, cfg.lambda_ctc, cfg.beta, &atoms_mean)?;
        (bp.vars().to_vec(), atoms_mean, composed)
    };
    let kept = batch.len() - skipped.len();
    let losses = breakdown(&g, &atoms_mean, &composed);
    let l_final = composed.l_final.expect("global CTC always present");

    let grads = g.backward(l_final)?;
    let mut sq_sum = 0.0f64;
    for &v in &vars {
        if let Some(t) = grads.get(v) {
            for &x in t.data() {
                let xf = to_f64(x);
                sq_sum += xf * xf;
            }
        }
    }
    let grad_norm = libm::sqrt(sq_sum);
    if !grad_norm.is_finite() {
        return Err(Error::NonFinite(format!("gradient norm is {grad_norm}")));
    }
    let clipped = grad_norm > ocfg.clip_norm;
    let gscale = real::<F>(if clipped { ocfg.clip_norm / grad_norm } else { 1.0 });

    let step = opt.step + 1;
    let lr = lr_at(ocfg, step);
    let lr_f = real::<F>(lr);
    let b1 = real::<F>(ocfg.beta1);
    let b2 = real::<F>(ocfg.beta2);
    let one_m_b1 = real::<F>(1.0 - ocfg.beta1);
    let one_m_b2 = real::<F>(1.0 - ocfg.beta2);
    let bc1 = real::<F>(1.0 - libm::pow(ocfg.beta1, step as f64));
    let bc2 = real::<F>(1.0 - libm::pow(ocfg.beta2, step as f64));
    let eps = real::<F>(ocfg.eps);

    for (i, &var) in vars.iter().enumerate() {
        let grad = grads.get(var).cloned();
        let n = model.params.tensor(i).len();
        for e in 0..n {
            let ge = match &grad {
                Some(t) => t.data()[e] * gscale,
                None => F::zero(),
            };
            let m = b1 * opt.m[i].data()[e] + one_m_b1 * ge;
            let v = b2 * opt.v[i].data()[e] + one_m_b2 * ge * ge;
            opt.m[i].data_mut()[e] = m;
            opt.v[i].data_mut()[e] = v;
            let update = lr_f * (m / bc1) / ((v / bc2).sqrt() + eps);
            let theta = model.params.tensor_mut(i).data_mut();
            theta[e] = theta[e] - update;
        }
    }
    opt.step = step;

    Ok(StepReport { step, lr, grad_norm, clipped, kept, skipped, losses })
}
