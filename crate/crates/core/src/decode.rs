//! Search-time inference on top of a trained model.
//!
//! Four pieces live here:
//!
//! * [`NGramLM`] — a count-based n-gram language model (add-k smoothing,
//!   stupid backoff) over token ids, usable as a shallow-fusion hook in
//!   any beam search via [`FusionScorer`].
//! * [`decode_asr`] — recognition decoding of the global stream. CTC
//!   variants run prefix beam search over the global lattice with
//!   optional LM fusion; attention variants run a label-synchronous
//!   beam over the recognition decoder with the lattice's prefix score
//!   fused in (one-pass fusion, weighted by the model's CTC mixing
//!   weight).
//! * [`decode_st`] — autoregressive beam search over one of the two
//!   translation decoders, with length-normalized final selection and a
//!   hard length cap so it terminates on any model.
//! * [`rescore_with_st`] — second-pass rescoring of a recognition n-best
//!   list under a translation decoder: each hypothesis is teacher-forced
//!   and its summed token log-probability enters the hypothesis total
//!   with a tunable weight.
//!
//! Every routine is a pure function of the model snapshot and its
//! arguments: identical inputs give identical outputs across runs.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::corpus::Lang;
use crate::ctc::{
    ctc_prefix_beam, CtcPrefixScorer, CtcPrefixState, FusionHook, FusionScorer, NBestEntry,
};
use crate::model::{decoder_logprobs, infer, Inference, Model};
use crate::numerics::{affine_fold, real, Real, Tensor};
use crate::{Error, Result};

// ---------------------------------------------------------------------------
// N-gram language model.
// ---------------------------------------------------------------------------

/// Additive-smoothing constant for n-gram estimates.
const ADD_K: f64 = 0.1;

/// Score multiplier applied once per context-shortening step when an
/// n-gram context was never observed (stupid backoff).
const BACKOFF: f64 = 0.4;

/// A count-based n-gram language model over token ids.
///
/// Conditional estimates use add-k smoothing with `k = 0.1` over the
/// full id space `[0, vocab_size)`, so for every observed context the
/// scores form an exact probability distribution. Contexts that were
/// never followed by anything in training back off to the next shorter
/// context with a fixed multiplicative discount of `0.4` (stupid
/// backoff); backed-off scores are deliberately not renormalized.
/// Token ids outside the id space are treated as the unknown token,
/// both as prediction targets and inside contexts.
#[derive(Clone, Debug)]
pub struct NGramLM {
    order: usize,
    vocab_size: usize,
    unk: usize,
    /// Counts of every 1..=order-gram seen in training.
    counts: BTreeMap<Vec<usize>, u64>,
    /// For each 0..order-1-gram context, the number of tokens that
    /// followed it in training (the sum of its continuation counts).
    context_totals: BTreeMap<Vec<usize>, u64>,
}

/// Trains an [`NGramLM`] of the given order on token sequences.
///
/// `vocab_size` fixes the id space the model normalizes over; ids at or
/// above it are counted as `unk`. Sequences are used as-is — no
/// boundary symbols are added, so the first token of a sequence is
/// scored with an empty context.
pub fn ngram_train(
    seqs: &[Vec<usize>],
    order: usize,
    vocab_size: usize,
    unk: usize,
) -> Result<NGramLM> {
    if order == 0 {
        return Err(Error::InvalidConfig("n-gram order must be at least 1".to_string()));
    }
    if vocab_size == 0 {
        return Err(Error::InvalidConfig("n-gram vocabulary must be non-empty".to_string()));
    }
    if unk >= vocab_size {
        return Err(Error::InvalidConfig(format!(
            "unknown-token id {unk} must lie below the vocabulary size {vocab_size}"
        )));
    }
    let mut lm = NGramLM {
        order,
        vocab_size,
        unk,
        counts: BTreeMap::new(),
        context_totals: BTreeMap::new(),
    };
    // The empty context always exists so unigram estimates are defined
    // even for an empty training set (they degrade to uniform).
    lm.context_totals.insert(Vec::new(), 0);
    for seq in seqs {
        let seq: Vec<usize> = seq.iter().map(|&t| lm.clamp(t)).collect();
        for i in 0..seq.len() {
            for n in 1..=order.min(i + 1) {
                let gram = &seq[i + 1 - n..=i];
                *lm.counts.entry(gram.to_vec()).or_insert(0) += 1;
                *lm.context_totals.entry(gram[..n - 1].to_vec()).or_insert(0) += 1;
            }
        }
    }
    Ok(lm)
}

/// Free-function form of [`NGramLM::score`].
pub fn ngram_score(lm: &NGramLM, context: &[usize], token: usize) -> f64 {
    lm.score(context, token)
}

impl NGramLM {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn clamp(&self, token: usize) -> usize {
        if token < self.vocab_size {
            token
        } else {
            self.unk
        }
    }

    /// `log p(token | context)`, using at most the trailing `order - 1`
    /// context tokens. For a context observed in training this is the
    /// add-k estimate and sums to one over the id space; otherwise the
    /// context is shortened one token at a time, multiplying in the
    /// backoff discount per step.
    pub fn score(&self, context: &[usize], token: usize) -> f64 {
        let token = self.clamp(token);
        let start = context.len().saturating_sub(self.order - 1);
        let mut ctx: Vec<usize> = context[start..].iter().map(|&t| self.clamp(t)).collect();
        let v = self.vocab_size as f64;
        let mut discount = 0.0;
        loop {
            if let Some(&total) = self.context_totals.get(&ctx) {
                let mut gram = ctx;
                gram.push(token);
                let c = self.counts.get(&gram).copied().unwrap_or(0) as f64;
                return discount + libm::log((c + ADD_K) / (total as f64 + ADD_K * v));
            }
            if ctx.is_empty() {
                // Unreachable after `ngram_train` (the empty context is
                // always present); kept so `score` is total.
                return discount - libm::log(v);
            }
            discount += libm::log(BACKOFF);
            ctx.remove(0);
        }
    }

    /// Sum of per-token conditional log-probabilities of `seq`, each
    /// token conditioned on everything before it.
    pub fn sequence_logp(&self, seq: &[usize]) -> f64 {
        seq.iter().enumerate().map(|(i, &t)| self.score(&seq[..i], t)).sum()
    }

    /// Per-token perplexity over a set of sequences: `exp` of the
    /// negated mean token log-probability. An empty set scores 1.
    pub fn perplexity(&self, seqs: &[Vec<usize>]) -> f64 {
        let tokens: usize = seqs.iter().map(Vec::len).sum();
        if tokens == 0 {
            return 1.0;
        }
        let logp: f64 = seqs.iter().map(|s| self.sequence_logp(s)).sum();
        libm::exp(-logp / tokens as f64)
    }
}

impl<F: Real> FusionScorer<F> for NGramLM {
    fn extension_bonus(&self, prefix: &[usize], token: usize) -> F {
        real(self.score(prefix, token))
    }
}

// ---------------------------------------------------------------------------
// Decode parameters.
// ---------------------------------------------------------------------------

/// A translation direction, naming which translation decoder to use.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StDirection {
    /// Mandarin speech content rendered as English tokens.
    Man2En,
    /// English speech content rendered as Mandarin tokens.
    En2Man,
}

impl StDirection {
    pub const ALL: [StDirection; 2] = [StDirection::Man2En, StDirection::En2Man];

    pub fn name(self) -> &'static str {
        match self {
            StDirection::Man2En => "man2en",
            StDirection::En2Man => "en2man",
        }
    }

    /// Case-insensitive inverse of [`name`](Self::name).
    pub fn parse(s: &str) -> Option<StDirection> {
        Self::ALL.into_iter().find(|d| d.name().eq_ignore_ascii_case(s))
    }

    /// The language the direction translates out of.
    pub fn source(self) -> Lang {
        match self {
            StDirection::Man2En => Lang::Man,
            StDirection::En2Man => Lang::En,
        }
    }

    /// The language of the tokens the direction emits.
    pub fn target(self) -> Lang {
        self.source().other()
    }

    /// Parameter-name prefix of the decoder serving this direction.
    fn decoder(self) -> &'static str {
        match self {
            StDirection::Man2En => "dec.man2en",
            StDirection::En2Man => "dec.en2man",
        }
    }
}

/// Knobs shared by the decoding and rescoring entry points.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecodeParams {
    /// Beam width for every search in this module.
    pub beam: usize,
    /// Weight of the n-gram language model in hypothesis totals.
    pub gamma_lm: f64,
    /// Weight of the translation-decoder score added by rescoring.
    pub gamma_st: f64,
    /// Rescoring direction, if the pipeline should rescore at all.
    pub st_direction: Option<StDirection>,
}

impl Default for DecodeParams {
    fn default() -> Self {
        DecodeParams { beam: 10, gamma_lm: 0.3, gamma_st: 0.3, st_direction: None }
    }
}

impl DecodeParams {
    /// Checks every field and reports all violations at once.
    pub fn validate(&self) -> Result<()> {
        let mut problems: Vec<String> = Vec::new();
        if self.beam == 0 {
            problems.push("beam width must be at least 1".to_string());
        }
        if !(self.gamma_lm >= 0.0 && self.gamma_lm.is_finite()) {
            problems.push(format!("gamma_lm must be finite and non-negative, got {}", self.gamma_lm));
        }
        if !(self.gamma_st >= 0.0 && self.gamma_st.is_finite()) {
            problems.push(format!("gamma_st must be finite and non-negative, got {}", self.gamma_st));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(problems.join("; ")))
        }
    }
}

// ---------------------------------------------------------------------------
// Recognition decoding.
// ---------------------------------------------------------------------------

/// Decodes the global recognition stream into an n-best list.
///
/// CTC variants run prefix beam search over the global lattice; when a
/// language model is supplied it joins as a shallow-fusion hook with
/// weight `gamma_lm` (the unweighted accumulated LM score is reported
/// in each entry's `lm_logp`). Attention variants run a
/// label-synchronous beam over the recognition decoder in which the
/// acoustic score of a hypothesis is the model's CTC mixing weight
/// `λ` times the lattice prefix score plus `1 − λ` times the attention
/// log-probability; that fused acoustic score fills the entry's
/// `ctc_logp` slot. Only real (single-language) tokens may be emitted.
///
/// Deterministic: ties rank lexicographically smaller token sequences
/// first.
pub fn decode_asr<F: Real>(
    model: &Model<F>,
    features: &Tensor<f64>,
    lm: Option<&NGramLM>,
    params: &DecodeParams,
) -> Result<Vec<NBestEntry<F>>> {
    params.validate()?;
    let inference = infer(model, features, false)?;
    let allowed = model.cfg.vocab.real_tokens();
    if model.cfg.variant.has_aed() {
        aed_beam(model, &inference, lm, params, &allowed)
    } else {
        let mut hooks: Vec<FusionHook<'_, F>> = Vec::new();
        if let Some(lm) = lm {
            hooks.push(FusionHook { weight: real(params.gamma_lm), scorer: lm });
        }
        ctc_prefix_beam(&inference.global, params.beam, &hooks, Some(&allowed))
    }
}

/// One live hypothesis of the attention-decoder beam.
struct AedHyp<F: Real> {
    tokens: Vec<usize>,
    /// Cumulative attention log-probability of `tokens`.
    att: F,
    /// Cumulative unweighted language-model score of `tokens`.
    lm: F,
    /// Lattice prefix state for `tokens`.
    state: CtcPrefixState<F>,
}

fn aed_beam<F: Real>(
    model: &Model<F>,
    inference: &Inference<F>,
    lm: Option<&NGramLM>,
    params: &DecodeParams,
    allowed: &[usize],
) -> Result<Vec<NBestEntry<F>>> {
    let cfg = &model.cfg;
    let eos = cfg.vocab.eos;
    let scorer = CtcPrefixScorer::new(&inference.global);
    let lambda = real::<F>(cfg.lambda_ctc);
    let complement = real::<F>(1.0 - cfg.lambda_ctc);
    let w_lm = real::<F>(params.gamma_lm);
    let max_len = 2 * inference.frames + 5;

    let mut live = vec![AedHyp {
        tokens: Vec::new(),
        att: F::zero(),
        lm: F::zero(),
        state: scorer.initial(),
    }];
    let mut finished: Vec<NBestEntry<F>> = Vec::new();
    for step in 0..=max_len {
        let mut next: Vec<AedHyp<F>> = Vec::new();
        for hyp in &live {
            let lp =
                next_token_logprobs(model, "dec.asr", cfg.n_asr_dec_blocks, &inference.h_global, &hyp.tokens)?;
            // Closing the hypothesis is always on the table: pair the
            // attention end-symbol step with the lattice mass of
            // exactly this label sequence.
            let acoustic = affine_fold(&[
                (lambda, scorer.complete(&hyp.state)),
                (complement, hyp.att + lp[eos]),
            ]);
            finished.push(NBestEntry {
                tokens: hyp.tokens.clone(),
                ctc_logp: acoustic,
                lm_logp: hyp.lm,
                rescore_logp: F::zero(),
                total: NBestEntry::fold_total(acoustic, w_lm, hyp.lm, F::zero(), F::zero()),
            });
            if step == max_len {
                continue;
            }
            for &c in allowed {
                let (state, _) = scorer.extend(&hyp.state, hyp.tokens.last().copied(), c)?;
                let lm_gain = match lm {
                    Some(m) => real::<F>(m.score(&hyp.tokens, c)),
                    None => F::zero(),
                };
                let mut tokens = hyp.tokens.clone();
                tokens.push(c);
                next.push(AedHyp { tokens, att: hyp.att + lp[c], lm: hyp.lm + lm_gain, state });
            }
        }
        if next.is_empty() {
            break;
        }
        next.sort_by(|a, b| {
            let sa = fused_live_score(a, lambda, complement, w_lm);
            let sb = fused_live_score(b, lambda, complement, w_lm);
            sb.partial_cmp(&sa).unwrap_or(Ordering::Equal).then_with(|| a.tokens.cmp(&b.tokens))
        });
        next.truncate(params.beam);
        live = next;
    }
    finished.sort_by(|a, b| {
        b.total.partial_cmp(&a.total).unwrap_or(Ordering::Equal).then_with(|| a.tokens.cmp(&b.tokens))
    });
    finished.truncate(params.beam);
    Ok(finished)
}

/// Pruning score of a live hypothesis: the same fused acoustic score a
/// finished entry would get, before the end-symbol step, plus the
/// weighted LM contribution.
fn fused_live_score<F: Real>(hyp: &AedHyp<F>, lambda: F, complement: F, w_lm: F) -> F {
    affine_fold(&[(lambda, hyp.state.score()), (complement, hyp.att), (w_lm, hyp.lm)])
}

/// Runs the decoder on start-symbol + `emitted` and returns the
/// next-token log-probability row.
fn next_token_logprobs<F: Real>(
    model: &Model<F>,
    decoder: &str,
    n_blocks: usize,
    memory: &Tensor<F>,
    emitted: &[usize],
) -> Result<Vec<F>> {
    let cfg = &model.cfg;
    let mut input = Vec::with_capacity(emitted.len() + 1);
    input.push(cfg.vocab.sos);
    input.extend_from_slice(emitted);
    let lp = decoder_logprobs(&model.params, &cfg.block, n_blocks, decoder, memory, &input)?;
    Ok(lp.row(input.len() - 1).to_vec())
}

// ---------------------------------------------------------------------------
// Translation decoding.
// ---------------------------------------------------------------------------

/// Beam-searches one translation decoder and returns the best token
/// sequence.
///
/// Hypotheses start from the start symbol and may emit real
/// (single-language) tokens; emitting the end symbol retires a
/// hypothesis. Emission is capped at `2·frames + 5` tokens, after which
/// every live hypothesis is closed with its end-symbol log-probability,
/// so the search terminates on any model. The winner maximizes the
/// length-normalized score `logp / (len + 1)` (the `+ 1` counts the end
/// symbol); ties prefer the lexicographically smaller sequence. On
/// tied extension scores the end symbol ranks after every real token,
/// so a content-free (uniform) decoder runs to the cap rather than
/// stopping immediately.
///
/// `beam == 1` reduces to greedy argmax decoding. The output never
/// contains start, end, blank, or mask symbols.
pub fn decode_st<F: Real>(
    model: &Model<F>,
    features: &Tensor<f64>,
    direction: StDirection,
    beam: usize,
) -> Result<Vec<usize>> {
    if !model.cfg.variant.has_st() {
        return Err(Error::Decode(format!(
            "variant {} has no translation decoders; cannot decode {}",
            model.cfg.variant.name(),
            direction.name()
        )));
    }
    if beam == 0 {
        return Err(Error::InvalidInput("beam width must be at least 1".to_string()));
    }
    let inference = infer(model, features, true)?;
    let frames = inference.frames;
    let memory = translation_memory(inference, direction)?;
    let cfg = &model.cfg;
    let allowed = cfg.vocab.real_tokens();
    let eos = cfg.vocab.eos;
    let max_len = 2 * frames + 5;

    struct Hyp<F> {
        tokens: Vec<usize>,
        logp: F,
    }
    /// A proposed beam move: extend `tokens` by `ext`, or close the
    /// hypothesis when `ext` is `None`.
    struct Cand<F> {
        tokens: Vec<usize>,
        ext: Option<usize>,
        score: F,
    }
    // The end symbol loses ties against every real extension.
    let ext_key = |e: Option<usize>| e.unwrap_or(usize::MAX);

    let mut live = vec![Hyp { tokens: Vec::new(), logp: F::zero() }];
    let mut finished: Vec<(Vec<usize>, F)> = Vec::new();
    for step in 0..=max_len {
        let mut cands: Vec<Cand<F>> = Vec::new();
        for hyp in &live {
            let lp =
                next_token_logprobs(model, direction.decoder(), cfg.n_st_dec_blocks, &memory, &hyp.tokens)?;
            if step == max_len {
                finished.push((hyp.tokens.clone(), hyp.logp + lp[eos]));
                continue;
            }
            cands.push(Cand { tokens: hyp.tokens.clone(), ext: None, score: hyp.logp + lp[eos] });
            for &c in &allowed {
                cands.push(Cand { tokens: hyp.tokens.clone(), ext: Some(c), score: hyp.logp + lp[c] });
            }
        }
        if cands.is_empty() {
            break;
        }
        // All live hypotheses have the same length, so (tokens, ext)
        // compares exactly like the extended sequences.
        cands.sort_by(|a, b| {
            b.score
                .partial_cmp(&a.score)
                .unwrap_or(Ordering::Equal)
                .then_with(|| a.tokens.cmp(&b.tokens))
                .then_with(|| ext_key(a.ext).cmp(&ext_key(b.ext)))
        });
        cands.truncate(beam);
        let mut next: Vec<Hyp<F>> = Vec::new();
        for cand in cands {
            match cand.ext {
                Some(c) => {
                    let mut tokens = cand.tokens;
                    tokens.push(c);
                    next.push(Hyp { tokens, logp: cand.score });
                }
                None => finished.push((cand.tokens, cand.score)),
            }
        }
        live = next;
    }
    let norm = |entry: &(Vec<usize>, F)| entry.1 / real::<F>((entry.0.len() + 1) as f64);
    finished.sort_by(|a, b| {
        norm(b).partial_cmp(&norm(a)).unwrap_or(Ordering::Equal).then_with(|| a.0.cmp(&b.0))
    });
    Ok(finished.into_iter().next().map(|(tokens, _)| tokens).unwrap_or_default())
}

/// Pulls the encoder memory serving `direction`'s decoder out of a
/// forward pass.
fn translation_memory<F: Real>(
    inference: Inference<F>,
    direction: StDirection,
) -> Result<Tensor<F>> {
    match direction {
        StDirection::Man2En => inference.mem_man2en,
        StDirection::En2Man => inference.mem_en2man,
    }
    .ok_or_else(|| {
        Error::Decode("the forward pass produced no translation memory".to_string())
    })
}

// ---------------------------------------------------------------------------
// Rescoring.
// ---------------------------------------------------------------------------

/// A rescored hypothesis plus a data-hygiene flag.
#[derive(Clone, Debug)]
pub struct RescoredEntry<F: Real> {
    pub entry: NBestEntry<F>,
    /// True when the hypothesis contains tokens of the rescoring
    /// direction's source language. Such tokens are scored like any
    /// others, but the translation decoder never saw them as targets
    /// in training, so callers may want to treat these entries with
    /// suspicion.
    pub has_source_tokens: bool,
}

/// Rescores an n-best list under one translation decoder.
///
/// Each hypothesis is teacher-forced through the decoder; the sum of
/// its per-token log-probabilities (end symbol included) becomes the
/// entry's `rescore_logp`, and totals are refolded as
/// `ctc + gamma_lm·lm + gamma_st·rescore`. The list is re-sorted by
/// total, descending, with a stable sort — so with `gamma_st = 0` the
/// incoming order is preserved exactly.
pub fn rescore_with_st<F: Real>(
    model: &Model<F>,
    features: &Tensor<f64>,
    nbest: &[NBestEntry<F>],
    direction: StDirection,
    params: &DecodeParams,
) -> Result<Vec<RescoredEntry<F>>> {
    params.validate()?;
    if !model.cfg.variant.has_st() {
        return Err(Error::Decode(format!(
            "variant {} has no translation decoders; cannot rescore {}",
            model.cfg.variant.name(),
            direction.name()
        )));
    }
    let inference = infer(model, features, true)?;
    let memory = translation_memory(inference, direction)?;
    let cfg = &model.cfg;
    let vocab = &cfg.vocab;
    let eos = vocab.eos;
    let source = direction.source();
    let w_lm = real::<F>(params.gamma_lm);
    let w_st = real::<F>(params.gamma_st);

    let mut out: Vec<RescoredEntry<F>> = Vec::with_capacity(nbest.len());
    for entry in nbest {
        let mut input = Vec::with_capacity(entry.tokens.len() + 1);
        input.push(vocab.sos);
        input.extend_from_slice(&entry.tokens);
        let lp = decoder_logprobs(
            &model.params,
            &cfg.block,
            cfg.n_st_dec_blocks,
            direction.decoder(),
            &memory,
            &input,
        )?;
        let mut rescore = F::zero();
        for (i, &t) in entry.tokens.iter().enumerate() {
            rescore = rescore + lp.row(i)[t];
        }
        rescore = rescore + lp.row(entry.tokens.len())[eos];
        let total = NBestEntry::fold_total(entry.ctc_logp, w_lm, entry.lm_logp, w_st, rescore);
        let has_source_tokens = entry.tokens.iter().any(|&t| vocab.lang_of(t) == Some(source));
        out.push(RescoredEntry {
            entry: NBestEntry {
                tokens: entry.tokens.clone(),
                ctc_logp: entry.ctc_logp,
                lm_logp: entry.lm_logp,
                rescore_logp: rescore,
                total,
            },
            has_source_tokens,
        });
    }
    // Stable by construction: entries with equal totals keep their
    // incoming rank, so zero-weight rescoring cannot reorder anything.
    out.sort_by(|a, b| b.entry.total.partial_cmp(&a.entry.total).unwrap_or(Ordering::Equal));
    Ok(out)
}

// ---------------------------------------------------------------------------
