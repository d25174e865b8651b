//! Alignment-marginalizing sequence loss and decoding.
//!
//! A frame classifier emits a distribution over tokens plus a `blank`
//! symbol at every frame. A frame-level path maps to a label sequence by
//! collapsing repeats and then dropping blanks; the loss marginalizes
//! over every path that collapses to the target via the standard forward
//! recursion over the blank-interleaved state graph. The recursion is
//! built on the autodiff tape, so gradients come from the tape rather
//! than a hand-coded backward pass.
//!
//! Alongside the loss live its consumers and validators:
//! - [`ctc_brute_force`]: exhaustive path enumeration, the oracle the
//!   DP is tested against;
//! - [`ctc_greedy`]: best-path decoding;
//! - [`ctc_prefix_beam`]: prefix beam search with optional shallow-fusion
//!   hooks, tracking (blank, non-blank) mass per prefix;
//! - [`CtcPrefixScorer`]: incremental prefix scoring for fusing this
//!   loss's evidence into an attention decoder's beam;
//! - [`factorization_check`]: an enumeration check of the conditional
//!   factorization that justifies combining per-language posteriors.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use crate::numerics::{
    affine_fold, log_add_exp, real, to_f64, Graph, Real, Stream, Tensor, Var,
};
use crate::{Error, Result};

/// Removes consecutive repeats, then drops blanks: the path-to-labels map.
pub fn collapse(path: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev: Option<usize> = None;
    for &s in path {
        if prev != Some(s) && s != blank {
            out.push(s);
        }
        prev = Some(s);
    }
    out
}

/// Minimum number of frames any path collapsing to `target` needs:
/// one per label plus one separating blank per adjacent repeated pair.
pub fn min_frames(target: &[usize]) -> usize {
    let repeats = target.windows(2).filter(|w| w[0] == w[1]).count();
    target.len() + repeats
}

/// Per-frame log-distributions over the token inventory plus blank.
///
/// Rows must be normalized log-distributions; `-inf` entries are legal
/// (zero-probability tokens), `NaN` is not.
#[derive(Clone, Debug)]
pub struct LogProbLattice<F: Real> {
    values: Tensor<F>,
    blank: usize,
}

impl<F: Real> LogProbLattice<F> {
    /// Wraps a `[T, V]` tensor, checking every row sums to one in
    /// probability space (log-sum-exp within 1e-6 of zero).
    pub fn new(values: Tensor<F>, blank: usize) -> Result<Self> {
        if values.rank() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "lattice must be rank 2, got {:?}",
                values.shape()
            )));
        }
        if blank >= values.cols() {
            return Err(Error::InvalidInput(format!(
                "blank id {blank} outside vocabulary of {}",
                values.cols()
            )));
        }
        for t in 0..values.rows() {
            let lse = crate::numerics::logsumexp(values.row(t))?;
            if to_f64(lse).abs() > 1e-6 {
                return Err(Error::InvalidInput(format!(
                    "lattice row {t} is not normalized (logsumexp = {lse})"
                )));
            }
        }
        Ok(Self { values, blank })
    }

    pub fn frames(&self) -> usize {
        self.values.rows()
    }

    /// Vocabulary size including the blank symbol.
    pub fn vocab(&self) -> usize {
        self.values.cols()
    }

    pub fn blank(&self) -> usize {
        self.blank
    }

    pub fn values(&self) -> &Tensor<F> {
        &self.values
    }

    pub fn log_prob(&self, t: usize, v: usize) -> F {
        self.values.at(t, v)
    }

    pub fn cast<G: Real>(&self) -> LogProbLattice<G> {
        LogProbLattice { values: self.values.cast(), blank: self.blank }
    }
}

/// Outcome of building the loss on the tape: either a differentiable
/// scalar node, or a flag that no path of the given length can produce
/// the target (the caller skips such utterances instead of aborting).
#[derive(Clone, Copy, Debug)]
pub enum CtcLoss {
    Loss(Var),
    Unreachable,
}

impl CtcLoss {
    pub fn var(&self) -> Option<Var> {
        match self {
            CtcLoss::Loss(v) => Some(*v),
            CtcLoss::Unreachable => None,
        }
    }
}

fn validate_target(target: &[usize], vocab: usize, blank: usize) -> Result<()> {
    for &y in target {
        if y == blank {
            return Err(Error::InvalidInput(
                "target must not contain the blank symbol".to_string(),
            ));
        }
        if y >= vocab {
            return Err(Error::InvalidInput(format!(
                "target token {y} outside vocabulary of {vocab}"
            )));
        }
    }
    Ok(())
}

/// Negative log-likelihood of `target` under the frame-level
/// log-distributions at `log_probs` (a `[T, V]` tape node), summed over
/// every path that collapses to `target`.
///
/// The forward recursion runs over the blank-interleaved state sequence
/// `[∅, y1, ∅, y2, …, ∅]`; each step shifts the previous row by one and
/// two states (the two-step skip masked off at blanks and repeated
/// labels) and folds in the frame's log-probabilities.
pub fn ctc_loss<F: Real>(
    g: &mut Graph<F>,
    log_probs: Var,
    blank: usize,
    target: &[usize],
) -> Result<CtcLoss> {
    let lp = g.value(log_probs).clone();
    if lp.rank() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "log-prob lattice must be rank 2, got {:?}",
            lp.shape()
        )));
    }
    let (t_max, vocab) = (lp.rows(), lp.cols());
    if blank >= vocab {
        return Err(Error::InvalidInput(format!(
            "blank id {blank} outside vocabulary of {vocab}"
        )));
    }
    validate_target(target, vocab, blank)?;
    if t_max < min_frames(target) {
        return Ok(CtcLoss::Unreachable);
    }

    // Blank-interleaved states and the two masks of the recursion.
    let s = 2 * target.len() + 1;
    let mut ext = Vec::with_capacity(s);
    for &y in target {
        ext.push(blank);
        ext.push(y);
    }
    ext.push(blank);

    let neg_inf = F::neg_infinity();
    let mut init = vec![neg_inf; s];
    init[0] = F::zero();
    if s > 1 {
        init[1] = F::zero();
    }
    let init_mask = Tensor::new(&[s], init)?;
    let mut skip = vec![neg_inf; s];
    for (i, m) in skip.iter_mut().enumerate() {
        if i >= 2 && ext[i] != blank && ext[i] != ext[i - 2] {
            *m = F::zero();
        }
    }
    let skip_mask = Tensor::new(&[s], skip)?;

    let frame = |g: &mut Graph<F>, t: usize| -> Result<Var> {
        let row = g.row(log_probs, t)?;
        g.gather(row, &ext)
    };

    let f0 = frame(g, 0)?;
    let mut alpha = g.add_const(f0, &init_mask)?;
    for t in 1..t_max {
        let one = g.shift_right(alpha, 1, neg_inf)?;
        let two = g.shift_right(alpha, 2, neg_inf)?;
        let two = g.add_const(two, &skip_mask)?;
        let m = g.log_add_exp(alpha, one)?;
        let m = g.log_add_exp(m, two)?;
        let f = frame(g, t)?;
        alpha = g.add(m, f)?;
    }
    let last_two: Vec<usize> = if s == 1 { vec![0] } else { vec![s - 2, s - 1] };
    let tail = g.gather(alpha, &last_two)?;
    let total = g.log_sum_exp(tail)?;
    let loss = g.scale(total, real(-1.0))?;
    Ok(CtcLoss::Loss(loss))
}

/// Scalar loss without a caller-managed tape; `+inf` marks an
/// unreachable target.
pub fn ctc_loss_value<F: Real>(lattice: &LogProbLattice<F>, target: &[usize]) -> Result<F> {
    let mut g = Graph::new();
    let lp = g.constant(lattice.values.clone());
    match ctc_loss(&mut g, lp, lattice.blank, target)? {
        CtcLoss::Loss(v) => Ok(g.value(v).item()),
        CtcLoss::Unreachable => Ok(F::infinity()),
    }
}

/// Exhaustive-path oracle: enumerates all `V^T` frame paths, sums the
/// probabilities of those collapsing to `target`, returns `-log`.
pub fn ctc_brute_force<F: Real>(lattice: &LogProbLattice<F>, target: &[usize]) -> Result<F> {
    let (t, v) = (lattice.frames(), lattice.vocab());
    validate_target(target, v, lattice.blank)?;
    let mut count: usize = 1;
    for _ in 0..t {
        count = count
            .checked_mul(v)
            .filter(|&c| c <= 10_000_000)
            .ok_or_else(|| Error::InvalidInput("brute-force instance too large".to_string()))?;
    }
    let mut acc = F::neg_infinity();
    let mut path = vec![0usize; t];
    for mut ix in 0..count {
        for slot in path.iter_mut() {
            *slot = ix % v;
            ix /= v;
        }
        if collapse(&path, lattice.blank) == target {
            let mut lp = F::zero();
            for (tt, &sym) in path.iter().enumerate() {
                lp = lp + lattice.log_prob(tt, sym);
            }
            acc = log_add_exp(acc, lp);
        }
    }
    Ok(-acc)
}

/// Best-path decoding: per-frame argmax (ties toward the lowest token
/// id), collapsed to a label sequence.
pub fn ctc_greedy<F: Real>(lattice: &LogProbLattice<F>) -> Vec<usize> {
    let mut path = Vec::with_capacity(lattice.frames());
    for t in 0..lattice.frames() {
        let row = lattice.values.row(t);
        let mut best = 0usize;
        for (i, &p) in row.iter().enumerate() {
            if p > row[best] {
                best = i;
            }
        }
        path.push(best);
    }
    collapse(&path, lattice.blank)
}

/// A shallow-fusion hook: an additive log-space score for extending a
/// prefix by one token, accumulated along the beam.
pub trait FusionScorer<F: Real> {
    fn extension_bonus(&self, prefix: &[usize], token: usize) -> F;
}

/// A fusion scorer together with its interpolation weight.
pub struct FusionHook<'a, F: Real> {
    pub weight: F,
    pub scorer: &'a dyn FusionScorer<F>,
}

/// One decoded hypothesis. `total` is always the fold
/// `ctc_logp + w_lm·lm_logp + w_st·rescore_logp` for the weights in
/// force (zero slots for stages that have not run).
#[derive(Clone, Debug)]
pub struct NBestEntry<F: Real> {
    pub tokens: Vec<usize>,
    pub ctc_logp: F,
    pub lm_logp: F,
    pub rescore_logp: F,
    pub total: F,
}

impl<F: Real> NBestEntry<F> {
    /// The canonical score fold used everywhere an entry's `total` is
    /// (re)computed, so recomputations are bitwise comparable.
    pub fn fold_total(ctc_logp: F, w_lm: F, lm_logp: F, w_st: F, rescore_logp: F) -> F {
        affine_fold(&[
            (F::one(), ctc_logp),
            (w_lm, lm_logp),
            (w_st, rescore_logp),
        ])
    }
}

#[derive(Clone, Copy)]
struct Mass<F: Real> {
    blank: F,
    label: F,
}

impl<F: Real> Mass<F> {
    fn empty() -> Self {
        Mass { blank: F::neg_infinity(), label: F::neg_infinity() }
    }
    fn total(&self) -> F {
        log_add_exp(self.blank, self.label)
    }
}

/// Prefix beam search over a lattice, maintaining (ending-in-blank,
/// ending-in-label) log-mass per prefix.
///
/// `hooks` add weighted incremental scores on each prefix extension; the
/// first hook's accumulated (unweighted) score is reported as
/// `lm_logp`. `allowed` restricts which tokens may extend a prefix
/// (`None` = every non-blank token). Entries are sorted by `total`
/// descending, ties broken lexicographically by token ids.
pub fn ctc_prefix_beam<F: Real>(
    lattice: &LogProbLattice<F>,
    beam: usize,
    hooks: &[FusionHook<'_, F>],
    allowed: Option<&[usize]>,
) -> Result<Vec<NBestEntry<F>>> {
    if beam == 0 {
        return Err(Error::InvalidInput("beam width must be at least 1".to_string()));
    }
    let blank = lattice.blank;
    let extensions: Vec<usize> = match allowed {
        Some(set) => {
            for &c in set {
                if c >= lattice.vocab() || c == blank {
                    return Err(Error::InvalidInput(format!(
                        "extension token {c} is not a decodable symbol"
                    )));
                }
            }
            let mut set = set.to_vec();
            set.sort_unstable();
            set.dedup();
            set
        }
        None => (0..lattice.vocab()).filter(|&c| c != blank).collect(),
    };
    // Hooks with weight zero cannot change any total; drop them so a
    // scorer returning -inf off-support cannot manufacture 0·inf.
    let hooks: Vec<&FusionHook<'_, F>> =
        hooks.iter().filter(|h| h.weight != F::zero()).collect();

    let mut beams: BTreeMap<Vec<usize>, Mass<F>> = BTreeMap::new();
    beams.insert(Vec::new(), Mass { blank: F::zero(), label: F::neg_infinity() });
    // Unweighted per-hook accumulations, a pure function of the prefix.
    let mut bonus: BTreeMap<Vec<usize>, Vec<F>> = BTreeMap::new();
    bonus.insert(Vec::new(), vec![F::zero(); hooks.len()]);

    let fused = |mass: &Mass<F>, bonus: &[F], hooks: &[&FusionHook<'_, F>]| -> F {
        let mut s = mass.total();
        for (h, &b) in hooks.iter().zip(bonus) {
            s = s + h.weight * b;
        }
        s
    };

    for t in 0..lattice.frames() {
        let mut next: BTreeMap<Vec<usize>, Mass<F>> = BTreeMap::new();
        for (prefix, mass) in &beams {
            let row = lattice.values.row(t);
            // Stay on this prefix via a blank frame.
            {
                let cell = next.entry(prefix.clone()).or_insert_with(Mass::empty);
                cell.blank = log_add_exp(cell.blank, mass.total() + row[blank]);
            }
            for &c in &extensions {
                let p_c = row[c];
                if prefix.last() == Some(&c) {
                    // Repeat frame of the trailing label: same prefix.
                    let cell = next.entry(prefix.clone()).or_insert_with(Mass::empty);
                    cell.label = log_add_exp(cell.label, mass.label + p_c);
                    // A genuinely new label needs a blank in between.
                    let mut child = prefix.clone();
                    child.push(c);
                    let cell = next.entry(child.clone()).or_insert_with(Mass::empty);
                    cell.label = log_add_exp(cell.label, mass.blank + p_c);
                    ensure_bonus(&mut bonus, &hooks, prefix, c, child);
                } else {
                    let mut child = prefix.clone();
                    child.push(c);
                    let cell = next.entry(child.clone()).or_insert_with(Mass::empty);
                    cell.label = log_add_exp(cell.label, mass.total() + p_c);
                    ensure_bonus(&mut bonus, &hooks, prefix, c, child);
                }
            }
        }
        // Prune to the beam on fused score, ties lexicographic.
        let mut ranked: Vec<(Vec<usize>, Mass<F>)> = next.into_iter().collect();
        ranked.sort_by(|a, b| {
            let sa = fused(&a.1, &bonus[&a.0], &hooks);
            let sb = fused(&b.1, &bonus[&b.0], &hooks);
            sb.partial_cmp(&sa).expect("beam scores are never NaN").then(a.0.cmp(&b.0))
        });
        ranked.truncate(beam);
        beams = ranked.into_iter().collect();
    }

    // Zero-mass prefixes (created, say, by a repeat extension of a
    // never-closed prefix) carry no hypothesis; drop them unless they
    // are all we have.
    let any_finite = beams.values().any(|m| m.total() > F::neg_infinity());
    let mut entries: Vec<NBestEntry<F>> = beams
        .into_iter()
        .filter(|(_, mass)| !any_finite || mass.total() > F::neg_infinity())
        .map(|(tokens, mass)| {
            let b = &bonus[&tokens];
            let ctc_logp = mass.total();
            let lm_logp = b.first().copied().unwrap_or_else(F::zero);
            let w_lm = hooks.first().map(|h| h.weight).unwrap_or_else(F::zero);
            let total = NBestEntry::fold_total(ctc_logp, w_lm, lm_logp, F::zero(), F::zero());
            NBestEntry { tokens, ctc_logp, lm_logp, rescore_logp: F::zero(), total }
        })
        .collect();
    entries.sort_by(|a, b| {
        b.total
            .partial_cmp(&a.total)
            .expect("entry totals are never NaN")
            .then(a.tokens.cmp(&b.tokens))
    });
    Ok(entries)
}

fn ensure_bonus<F: Real>(
    bonus: &mut BTreeMap<Vec<usize>, Vec<F>>,
    hooks: &[&FusionHook<'_, F>],
    parent: &[usize],
    token: usize,
    child: Vec<usize>,
) {
    if bonus.contains_key(&child) {
        return;
    }
    let base = bonus[parent].clone();
    let vals: Vec<F> = hooks
        .iter()
        .zip(base)
        .map(|(h, b)| b + h.scorer.extension_bonus(parent, token))
        .collect();
    bonus.insert(child, vals);
}

/// Incremental prefix scoring against a fixed lattice, for fusing this
/// evidence into an external (attention) beam search.
///
/// For a prefix `h`, the running score is `log P(the emitted labeling
/// starts with h)`; [`CtcPrefixScorer::complete`] gives `log P(labeling
/// == h)` for end-of-sequence scoring. Each extension costs `O(T)`.
pub struct CtcPrefixScorer<'a, F: Real> {
    lattice: &'a LogProbLattice<F>,
}

/// Per-prefix DP state: at each frame, the log-mass of paths emitting
/// exactly the prefix and ending in blank / in the prefix's last label.
#[derive(Clone, Debug)]
pub struct CtcPrefixState<F: Real> {
    r_blank: Vec<F>,
    r_label: Vec<F>,
    empty: bool,
    score: F,
}

impl<F: Real> CtcPrefixState<F> {
    /// `log P(labeling starts with this prefix)`.
    pub fn score(&self) -> F {
        self.score
    }
}

impl<'a, F: Real> CtcPrefixScorer<'a, F> {
    pub fn new(lattice: &'a LogProbLattice<F>) -> Self {
        Self { lattice }
    }

    /// State of the empty prefix (score `log 1 = 0`).
    pub fn initial(&self) -> CtcPrefixState<F> {
        let t_max = self.lattice.frames();
        let mut r_blank = Vec::with_capacity(t_max);
        let mut acc = F::zero();
        for t in 0..t_max {
            acc = acc + self.lattice.log_prob(t, self.lattice.blank);
            r_blank.push(acc);
        }
        CtcPrefixState {
            r_blank,
            r_label: vec![F::neg_infinity(); t_max],
            empty: true,
            score: F::zero(),
        }
    }

    /// Extends a prefix (whose trailing token is `last`) by `c`,
    /// returning the new state and the incremental score
    /// `score(new) - score(old)`.
    pub fn extend(
        &self,
        state: &CtcPrefixState<F>,
        last: Option<usize>,
        c: usize,
    ) -> Result<(CtcPrefixState<F>, F)> {
        let blank = self.lattice.blank;
        if c == blank || c >= self.lattice.vocab() {
            return Err(Error::InvalidInput(format!("cannot extend a prefix with token {c}")));
        }
        let t_max = self.lattice.frames();
        let neg_inf = F::neg_infinity();
        let mut r_blank = vec![neg_inf; t_max];
        let mut r_label = vec![neg_inf; t_max];
        let mut psi = neg_inf;
        for t in 0..t_max {
            let (pb_prev, pl_prev) = if t == 0 {
                // Virtual frame -1: only the empty prefix has mass.
                (if state.empty { F::zero() } else { neg_inf }, neg_inf)
            } else {
                (state.r_blank[t - 1], state.r_label[t - 1])
            };
            // Paths on which frame t may start the new label's run.
            let phi = if last == Some(c) { pb_prev } else { log_add_exp(pb_prev, pl_prev) };
            let p_c = self.lattice.log_prob(t, c);
            let (nl_prev, nb_prev) = if t == 0 {
                (neg_inf, neg_inf)
            } else {
                (r_label[t - 1], r_blank[t - 1])
            };
            r_label[t] = log_add_exp(nl_prev, phi) + p_c;
            r_blank[t] = log_add_exp(nb_prev, nl_prev) + self.lattice.log_prob(t, blank);
            psi = log_add_exp(psi, phi + p_c);
        }
        let delta = psi - state.score;
        Ok((CtcPrefixState { r_blank, r_label, empty: false, score: psi }, delta))
    }

    /// `log P(labeling == prefix)`: mass of paths that have emitted the
    /// whole prefix and nothing more by the final frame.
    pub fn complete(&self, state: &CtcPrefixState<F>) -> F {
        let t_max = self.lattice.frames();
        if t_max == 0 {
            return if state.empty { F::zero() } else { F::neg_infinity() };
        }
        log_add_exp(state.r_blank[t_max - 1], state.r_label[t_max - 1])
    }
}

/// An alignment triple: the code-switched frame path and the two
/// monolingual-channel frame paths it corresponds to.
pub type AlignmentTriple = (Vec<usize>, Vec<usize>, Vec<usize>);

/// A fully enumerated joint distribution over alignment triples,
/// conditioned on one fixed observation, together with the label
/// sequences whose alignment sets the factorization is evaluated on.
///
/// Symbol `0` is the blank in every channel. In the Mandarin channel,
/// ids `1..=n_man` are Mandarin tokens and `n_man + 1` is the
/// placeholder covering English spans; the English channel mirrors
/// that. The code-switched channel uses `1..=n_man` for Mandarin and
/// `n_man + 1 ..= n_man + n_en` for English tokens.
#[derive(Clone, Debug)]
pub struct FactorizationInstance {
    pub frames: usize,
    pub joint: Vec<(AlignmentTriple, f64)>,
    pub y_cs: Vec<usize>,
    pub y_man: Vec<usize>,
    pub y_en: Vec<usize>,
}

/// Both sides of the factorization and whether they agree to 1e-12.
#[derive(Clone, Copy, Debug)]
pub struct FactorizationReport {
    pub lhs: f64,
    pub rhs: f64,
    pub gap: f64,
    pub exact: bool,
}

/// Compares the label-sequence posterior computed two ways:
///
/// - directly, by summing the joint over all triples whose three
///   alignments collapse to the three label sequences;
/// - through the factorized form, which extracts `P(z | z_man, z_en)`
///   and the two per-channel marginals from the joint by enumeration
///   and sums their product over the same alignment sets — exactly the
///   quantity the two modeling assumptions (alignment-determined
///   combination, per-channel conditional independence) claim equals
///   the direct sum.
///
/// Product-form joints agree to 1e-12; channel-correlated joints show a
/// reported gap.
pub fn factorization_check(inst: &FactorizationInstance) -> Result<FactorizationReport> {
    if inst.joint.is_empty() {
        return Err(Error::InvalidInput("empty joint distribution".to_string()));
    }
    let mut total = 0.0;
    let mut seen: BTreeMap<&AlignmentTriple, ()> = BTreeMap::new();
    for (triple, p) in &inst.joint {
        let (z, zm, ze) = triple;
        if z.len() != inst.frames || zm.len() != inst.frames || ze.len() != inst.frames {
            return Err(Error::InvalidInput(format!(
                "alignment length mismatch: expected {} frames",
                inst.frames
            )));
        }
        if !p.is_finite() || *p <= 0.0 {
            return Err(Error::InvalidInput(format!("joint probability {p} out of range")));
        }
        if seen.insert(triple, ()).is_some() {
            return Err(Error::InvalidInput("duplicate triple in joint".to_string()));
        }
        total += p;
    }
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidInput(format!(
            "unnormalized joint distribution (mass {total})"
        )));
    }

    let matches = |z: &[usize], y: &[usize]| collapse(z, 0) == y;

    // Marginals and pair masses by enumeration.
    let mut marg_m: BTreeMap<&Vec<usize>, f64> = BTreeMap::new();
    let mut marg_e: BTreeMap<&Vec<usize>, f64> = BTreeMap::new();
    let mut pair: BTreeMap<(&Vec<usize>, &Vec<usize>), f64> = BTreeMap::new();
    for ((_, zm, ze), p) in &inst.joint {
        *marg_m.entry(zm).or_insert(0.0) += p;
        *marg_e.entry(ze).or_insert(0.0) += p;
        *pair.entry((zm, ze)).or_insert(0.0) += p;
    }

    let mut lhs = 0.0;
    let mut rhs = 0.0;
    for ((z, zm, ze), p) in &inst.joint {
        if !(matches(z, &inst.y_cs) && matches(zm, &inst.y_man) && matches(ze, &inst.y_en)) {
            continue;
        }
        lhs += p;
        let cond = p / pair[&(zm, ze)];
        rhs += cond * marg_m[zm] * marg_e[ze];
    }
    let gap = (lhs - rhs).abs();
    Ok(FactorizationReport { lhs, rhs, gap, exact: gap < 1e-12 })
}

/// All length-`frames` sequences over `0..alphabet` collapsing to `y`.
fn alignments_of(y: &[usize], frames: usize, alphabet: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let count = alphabet.pow(frames as u32);
    let mut path = vec![0usize; frames];
    for mut ix in 0..count {
        for slot in path.iter_mut() {
            *slot = ix % alphabet;
            ix /= alphabet;
        }
        if collapse(&path, 0) == y {
            out.push(path.clone());
        }
    }
    out
}

/// Frame-wise deterministic combination of the two channel alignments
/// into a code-switched alignment: a real Mandarin token wins, else a
/// real English token (relabeled into the joint alphabet), else blank.
fn merge_channels(zm: &[usize], ze: &[usize], n_man: usize, n_en: usize) -> Vec<usize> {
    zm.iter()
        .zip(ze)
        .map(|(&m, &e)| {
            if (1..=n_man).contains(&m) {
                m
            } else if (1..=n_en).contains(&e) {
                n_man + e
            } else {
                0
            }
        })
        .collect()
}

/// Draws a code-switched label sequence and its per-channel masked
/// versions over the toy alphabets, leaving at least `slack` spare
/// frames beyond each channel's minimum (masking can create adjacent
/// repeats, which cost an extra separator frame).
fn draw_targets(
    stream: &mut Stream,
    frames: usize,
    slack: usize,
    n_man: usize,
    n_en: usize,
) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    loop {
        let len = 1 + stream.pick(2); // 1 or 2 labels
        let mut y_cs = Vec::with_capacity(len);
        for _ in 0..len {
            let tok = if stream.coin(0.5) {
                1 + stream.pick(n_man)
            } else {
                n_man + 1 + stream.pick(n_en)
            };
            if y_cs.last() == Some(&tok) {
                continue; // avoid adjacent repeats so short lattices stay reachable
            }
            y_cs.push(tok);
        }
        let man_mask = n_man + 1;
        let en_mask = n_en + 1;
        let y_man: Vec<usize> =
            y_cs.iter().map(|&t| if t <= n_man { t } else { man_mask }).collect();
        let y_en: Vec<usize> =
            y_cs.iter().map(|&t| if t > n_man { t - n_man } else { en_mask }).collect();
        if min_frames(&y_man) + slack <= frames && min_frames(&y_en) + slack <= frames {
            return (y_cs, y_man, y_en);
        }
    }
}

impl FactorizationInstance {
    /// A joint satisfying both factorization assumptions by
    /// construction: the channels are drawn independently and the
    /// code-switched alignment is a (possibly stochastic) function of
    /// the channel pair alone.
    pub fn product_form(stream: &mut Stream, frames: usize, n_man: usize, n_en: usize) -> Self {
        assert!((2..=4).contains(&frames) && n_man >= 1 && n_en >= 1);
        let (_, y_man, y_en) = draw_targets(stream, frames, 0, n_man, n_en);
        let m_support = weighted_support(stream, &y_man, frames, n_man + 2);
        let e_support = weighted_support(stream, &y_en, frames, n_en + 2);
        // A target the merged alignments can actually produce.
        let y_cs = collapse(&merge_channels(&m_support[0].0, &e_support[0].0, n_man, n_en), 0);

        let split_cond = stream.coin(0.5);
        let mut joint = Vec::new();
        for (zm, pm) in &m_support {
            for (ze, pe) in &e_support {
                let z = merge_channels(zm, ze, n_man, n_en);
                let p = pm * pe;
                if split_cond {
                    // Stochastic but channel-determined combination: the
                    // same two z values with the same conditional split
                    // for every channel pair.
                    let mut alt = z.clone();
                    alt[0] = if alt[0] == 0 { 1 } else { 0 };
                    joint.push(((z, zm.clone(), ze.clone()), p * 0.7));
                    joint.push(((alt, zm.clone(), ze.clone()), p * 0.3));
                } else {
                    joint.push(((z, zm.clone(), ze.clone()), p));
                }
            }
        }
        FactorizationInstance { frames, joint, y_cs, y_man, y_en }
    }

    /// A joint violating channel independence: all mass sits on two
    /// perfectly correlated channel-alignment pairs.
    pub fn correlated(stream: &mut Stream, frames: usize, n_man: usize, n_en: usize) -> Self {
        assert!((3..=4).contains(&frames) && n_man >= 1 && n_en >= 1);
        // One spare frame per channel guarantees at least two distinct
        // alignments to correlate.
        let (_, y_man, y_en) = draw_targets(stream, frames, 1, n_man, n_en);
        let m_aligns = alignments_of(&y_man, frames, n_man + 2);
        let e_aligns = alignments_of(&y_en, frames, n_en + 2);
        assert!(m_aligns.len() >= 2 && e_aligns.len() >= 2, "need two distinct alignments");
        let mi = stream.pick(m_aligns.len());
        let mj = (mi + 1 + stream.pick(m_aligns.len() - 1)) % m_aligns.len();
        let ei = stream.pick(e_aligns.len());
        let ej = (ei + 1 + stream.pick(e_aligns.len() - 1)) % e_aligns.len();
        let w = stream.uniform(0.3, 0.7);
        let z0 = merge_channels(&m_aligns[mi], &e_aligns[ei], n_man, n_en);
        let z1 = merge_channels(&m_aligns[mj], &e_aligns[ej], n_man, n_en);
        let y_cs = collapse(&z0, 0);
        let joint = vec![
            ((z0, m_aligns[mi].clone(), e_aligns[ei].clone()), w),
            ((z1, m_aligns[mj].clone(), e_aligns[ej].clone()), 1.0 - w),
        ];
        FactorizationInstance { frames, joint, y_cs, y_man, y_en }
    }

    /// A single-alignment universe: one triple carrying all the mass.
    pub fn degenerate(frames: usize) -> Self {
        assert!(frames >= 1);
        let mut zm = vec![0usize; frames];
        zm[0] = 1; // one Mandarin token, then blanks
        let mut ze = vec![0usize; frames];
        ze[0] = 2; // the Mandarin span placeholder in the English channel
        let z = merge_channels(&zm, &ze, 1, 1);
        let y_cs = collapse(&z, 0);
        let y_man = collapse(&zm, 0);
        let y_en = collapse(&ze, 0);
        FactorizationInstance {
            frames,
            joint: vec![((z, zm, ze), 1.0)],
            y_cs,
            y_man,
            y_en,
        }
    }
}

/// Enumerated alignments of `y` plus a couple of off-target sequences,
/// with random positive weights, normalized into a distribution.
fn weighted_support(
    stream: &mut Stream,
    y: &[usize],
    frames: usize,
    alphabet: usize,
) -> Vec<(Vec<usize>, f64)> {
    let mut seqs = alignments_of(y, frames, alphabet);
    assert!(!seqs.is_empty(), "target must be reachable in the given frames");
    for _ in 0..2 {
        let cand: Vec<usize> = (0..frames).map(|_| stream.pick(alphabet)).collect();
        if collapse(&cand, 0) != y && !seqs.contains(&cand) {
            seqs.push(cand);
        }
    }
    let weights: Vec<f64> = seqs.iter().map(|_| stream.uniform(0.2, 1.0)).collect();
    let total: f64 = weights.iter().sum();
    seqs.into_iter().zip(weights).map(|(s, w)| (s, w / total)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, log_softmax_rows, Parameters};

    fn uniform_lattice(t: usize, v: usize) -> LogProbLattice<f64> {
        let p = -libm::log(v as f64);
        LogProbLattice::new(Tensor::full(&[t, v], p), 0).unwrap()
    }

    fn random_lattice(stream: &mut Stream, t: usize, v: usize) -> LogProbLattice<f64> {
        let logits: Vec<f64> = (0..t * v).map(|_| stream.uniform(-2.0, 2.0)).collect();
        let lp = log_softmax_rows(&Tensor::new(&[t, v], logits).unwrap()).unwrap();
        LogProbLattice::new(lp, 0).unwrap()
    }

    #[test]
    fn uniform_three_frame_lattice_matches_the_hand_count() {
        // Three frames, two labels + blank, uniform 1/3 rows: exactly
        // five paths collapse to [a, b], so the loss is -ln(5/27).
        let lat = uniform_lattice(3, 3);
        let loss = ctc_loss_value(&lat, &[1, 2]).unwrap();
        let expect = -libm::log(5.0 / 27.0);
        assert!((loss - expect).abs() < 1e-12, "{loss} vs {expect}");
        let brute = ctc_brute_force(&lat, &[1, 2]).unwrap();
        assert!((loss - brute).abs() < 1e-12);
    }

    #[test]
    fn empty_target_prices_the_all_blank_path() {
        let mut s = Stream::new(11, "lat");
        let lat = random_lattice(&mut s, 5, 4);
        let loss = ctc_loss_value(&lat, &[]).unwrap();
        let direct: f64 = -(0..5).map(|t| lat.log_prob(t, 0)).sum::<f64>();
        assert!((loss - direct).abs() < 1e-12);
        let brute = ctc_brute_force(&lat, &[]).unwrap();
        assert!((loss - brute).abs() < 1e-12);
    }

    #[test]
    fn single_frame_single_label_is_one_path() {
        let mut s = Stream::new(12, "lat");
        let lat = random_lattice(&mut s, 1, 3);
        let loss = ctc_loss_value(&lat, &[2]).unwrap();
        assert!((loss + lat.log_prob(0, 2)).abs() < 1e-12);
    }

    #[test]
    fn unreachable_targets_are_flagged_not_raised() {
        let lat = uniform_lattice(2, 3);
        assert!(ctc_loss_value(&lat, &[1, 2, 1]).unwrap().is_infinite());
        // Adjacent repeats need a separating blank frame.
        assert!(ctc_loss_value(&lat, &[1, 1]).unwrap().is_infinite());
        assert!(ctc_brute_force(&lat, &[1, 2, 1]).unwrap().is_infinite());
        let mut g: Graph<f64> = Graph::new();
        let lp = g.constant(lat.values().clone());
        assert!(matches!(ctc_loss(&mut g, lp, 0, &[1, 1]).unwrap(), CtcLoss::Unreachable));
    }

    #[test]
    fn targets_containing_blank_are_rejected() {
        let lat = uniform_lattice(3, 3);
        assert!(ctc_loss_value(&lat, &[0, 1]).is_err());
        assert!(ctc_brute_force(&lat, &[9]).is_err());
    }

    #[test]
    fn loss_agrees_with_brute_force_on_random_instances() {
        let mut s = Stream::new(13, "agree");
        for trial in 0..30 {
            let t = 1 + s.pick(6);
            let v = 2 + s.pick(2); // vocab 2..=3 incl. blank
            let lat = random_lattice(&mut s, t, v);
            let len = s.pick(4).min(t);
            let target: Vec<usize> = (0..len).map(|_| 1 + s.pick(v - 1)).collect();
            let dp = ctc_loss_value(&lat, &target).unwrap();
            let brute = ctc_brute_force(&lat, &target).unwrap();
            if dp.is_infinite() || brute.is_infinite() {
                assert_eq!(dp.is_infinite(), brute.is_infinite(), "trial {trial}");
            } else {
                assert!((dp - brute).abs() < 1e-9, "trial {trial}: {dp} vs {brute}");
            }
        }
    }

    #[test]
    fn appending_a_pure_blank_frame_leaves_the_loss_unchanged() {
        // A certain-blank frame at either end cannot split a token run,
        // so the path set maps one-to-one with mass unchanged. (An
        // *interior* certain blank does change the loss: it splits runs,
        // so e.g. path `aa` maps to `a∅a`, which collapses differently.)
        let mut s = Stream::new(14, "blank");
        for _ in 0..10 {
            let t = 2 + s.pick(4);
            let lat = random_lattice(&mut s, t, 3);
            let target = [1, 2];
            let base = ctc_loss_value(&lat, &target).unwrap();
            if base.is_infinite() {
                continue;
            }
            let at = if s.coin(0.5) { 0 } else { t };
            let mut rows: Vec<Vec<f64>> = (0..t).map(|r| lat.values().row(r).to_vec()).collect();
            rows.insert(at, vec![0.0, f64::NEG_INFINITY, f64::NEG_INFINITY]);
            let grown =
                LogProbLattice::new(Tensor::from_rows(&rows).unwrap(), 0).unwrap();
            let with_blank = ctc_loss_value(&grown, &target).unwrap();
            assert!((base - with_blank).abs() < 1e-9, "{base} vs {with_blank}");
        }
    }

    #[test]
    fn loss_gradient_passes_grad_check() {
        let mut s = Stream::new(15, "grad");
        let logits: Vec<f64> = (0..5 * 4).map(|_| s.uniform(-1.0, 1.0)).collect();
        let mut params: Parameters<f64> = Parameters::new();
        params.insert("logits", Tensor::new(&[5, 4], logits).unwrap()).unwrap();
        let report = grad_check(&params, 1e-6, 1e-4, |g, vars| {
            let lp = g.log_softmax_rows(vars[0])?;
            match ctc_loss(g, lp, 0, &[1, 2, 1])? {
                CtcLoss::Loss(v) => Ok(v),
                CtcLoss::Unreachable => unreachable!("target fits in five frames"),
            }
        })
        .unwrap();
        assert!(report.pass, "{}", report.summary());
    }

    #[test]
    fn greedy_follows_the_argmax_path() {
        // All-blank argmax decodes to the empty sequence.
        let mut rows = vec![vec![0.0, -3.0, -4.0]; 4];
        for r in &mut rows {
            let lse = crate::numerics::logsumexp(r.as_slice()).unwrap();
            r.iter_mut().for_each(|x| *x -= lse);
        }
        let lat = LogProbLattice::new(Tensor::from_rows(&rows).unwrap(), 0).unwrap();
        assert!(ctc_greedy(&lat).is_empty());

        // Argmax frames [a, a, blank, a] decode to [a, a].
        let a = [-0.2f64, -3.0];
        let b = [-3.0f64, -0.2];
        let mk = |hot: &[f64; 2]| {
            let row = vec![hot[1], hot[0], -9.0];
            let lse = crate::numerics::logsumexp(row.as_slice()).unwrap();
            row.iter().map(|x| x - lse).collect::<Vec<_>>()
        };
        let rows = vec![mk(&a), mk(&a), mk(&b), mk(&a)];
        let lat = LogProbLattice::new(Tensor::from_rows(&rows).unwrap(), 0).unwrap();
        assert_eq!(ctc_greedy(&lat), vec![1, 1]);

        // Random lattice: equals collapse of the per-frame argmax.
        let mut s = Stream::new(16, "greedy");
        let lat = random_lattice(&mut s, 6, 4);
        let path: Vec<usize> = (0..6)
            .map(|t| {
                let row = lat.values().row(t);
                (0..4).fold(0, |best, i| if row[i] > row[best] { i } else { best })
            })
            .collect();
        assert_eq!(ctc_greedy(&lat), collapse(&path, 0));
    }

    #[test]
    fn unbounded_beam_recovers_exact_label_probabilities_in_order() {
        let mut s = Stream::new(17, "beam");
        for trial in 0..12 {
            let t = 2 + s.pick(4); // 2..=5 frames
            let lat = random_lattice(&mut s, t, 3); // blank + 2 tokens
            let entries = ctc_prefix_beam(&lat, 4096, &[], None).unwrap();
            // Compare each reported mass against the enumeration oracle.
            for e in &entries {
                let oracle = -ctc_brute_force(&lat, &e.tokens).unwrap();
                assert!(
                    oracle.is_finite(),
                    "trial {trial}: zero-mass prefix {:?} survived",
                    e.tokens
                );
                assert!(
                    (e.ctc_logp - oracle).abs() < 1e-9,
                    "trial {trial}: {:?} got {} want {oracle}",
                    e.tokens,
                    e.ctc_logp
                );
            }
            // Oracle probabilities arrive in non-increasing order.
            for w in entries.windows(2) {
                let a = -ctc_brute_force(&lat, &w[0].tokens).unwrap();
                let b = -ctc_brute_force(&lat, &w[1].tokens).unwrap();
                assert!(a >= b - 1e-12, "trial {trial}: {a} then {b}");
            }
            // Top-1 is the exact argmax over every distinct labeling.
            let best = entries.first().unwrap();
            for e in &entries[1..] {
                assert!(best.ctc_logp >= e.ctc_logp - 1e-12);
            }
        }
    }

    #[test]
    fn beam_one_on_a_dominant_path_lattice_matches_greedy() {
        // One overwhelming path: token 2 at frame 0, token 1 at frame 1.
        let rows = [[-12.0f64, -12.0, 0.0], [-12.0f64, 0.0, -12.0]];
        let rows: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| {
                let lse = crate::numerics::logsumexp(r.as_slice()).unwrap();
                r.iter().map(|x| x - lse).collect()
            })
            .collect();
        let lat = LogProbLattice::new(Tensor::from_rows(&rows).unwrap(), 0).unwrap();
        let entries = ctc_prefix_beam(&lat, 1, &[], None).unwrap();
        assert_eq!(ctc_greedy(&lat), vec![2, 1]);
        assert_eq!(entries[0].tokens, vec![2, 1]);
    }

    #[test]
    fn equal_mass_labels_tie_break_lexicographically() {
        let lat = uniform_lattice(2, 3);
        let entries = ctc_prefix_beam(&lat, 16, &[], None).unwrap();
        let pos1 = entries.iter().position(|e| e.tokens == vec![1]).unwrap();
        let pos2 = entries.iter().position(|e| e.tokens == vec![2]).unwrap();
        assert_eq!(entries[pos1].ctc_logp, entries[pos2].ctc_logp);
        assert!(pos1 < pos2, "lower token ids sort first on ties");
    }

    struct FavorToken(usize);
    impl FusionScorer<f64> for FavorToken {
        fn extension_bonus(&self, _prefix: &[usize], token: usize) -> f64 {
            if token == self.0 {
                0.0
            } else {
                -2.0
            }
        }
    }

    #[test]
    fn fusion_hooks_shift_totals_and_keep_the_fold_invariant() {
        let mut s = Stream::new(18, "fuse");
        let lat = random_lattice(&mut s, 4, 3);
        let scorer = FavorToken(2);
        let hooks = [FusionHook { weight: 0.5, scorer: &scorer }];
        let entries = ctc_prefix_beam(&lat, 8, &hooks, None).unwrap();
        for e in &entries {
            let refold = NBestEntry::fold_total(e.ctc_logp, 0.5, e.lm_logp, 0.0, 0.0);
            assert_eq!(e.total, refold);
            // The accumulated hook score is determined by the tokens.
            let direct: f64 =
                e.tokens.iter().map(|&t| if t == 2 { 0.0 } else { -2.0 }).sum();
            assert_eq!(e.lm_logp, direct);
        }
        // Weight-zero hooks change nothing at all.
        let zeroed = [FusionHook { weight: 0.0, scorer: &scorer }];
        let plain = ctc_prefix_beam(&lat, 8, &[], None).unwrap();
        let with_zero = ctc_prefix_beam(&lat, 8, &zeroed, None).unwrap();
        for (a, b) in plain.iter().zip(&with_zero) {
            assert_eq!(a.tokens, b.tokens);
            assert_eq!(a.total, b.total);
        }
    }

    #[test]
    fn restricted_extension_set_never_emits_excluded_tokens() {
        let mut s = Stream::new(19, "restrict");
        let lat = random_lattice(&mut s, 5, 4);
        let entries = ctc_prefix_beam(&lat, 8, &[], Some(&[1, 3])).unwrap();
        assert!(!entries.is_empty());
        for e in &entries {
            assert!(e.tokens.iter().all(|&t| t == 1 || t == 3));
        }
        assert!(ctc_prefix_beam(&lat, 8, &[], Some(&[0])).is_err(), "blank is not extendable");
    }

    #[test]
    fn prefix_scorer_chain_reproduces_the_full_sequence_loss() {
        let mut s = Stream::new(20, "chain");
        for trial in 0..10 {
            let t = 3 + s.pick(4);
            let lat = random_lattice(&mut s, t, 4);
            let target: Vec<usize> = (0..1 + s.pick(3.min(t))).map(|_| 1 + s.pick(3)).collect();
            let scorer = CtcPrefixScorer::new(&lat);
            let mut state = scorer.initial();
            let mut last = None;
            for &c in &target {
                let (next, _delta) = scorer.extend(&state, last, c).unwrap();
                state = next;
                last = Some(c);
            }
            let complete = scorer.complete(&state);
            let loss = ctc_loss_value(&lat, &target).unwrap();
            if loss.is_infinite() {
                assert!(complete.is_infinite() && complete < 0.0, "trial {trial}");
            } else {
                assert!((complete + loss).abs() < 1e-9, "trial {trial}: {complete} vs {loss}");
            }
        }
    }

    #[test]
    fn prefix_scores_match_the_prefix_start_enumeration() {
        let mut s = Stream::new(21, "prefix");
        let t = 4;
        let lat = random_lattice(&mut s, t, 3);
        let scorer = CtcPrefixScorer::new(&lat);
        let state0 = scorer.initial();
        let (state1, d1) = scorer.extend(&state0, None, 1).unwrap();
        let (state2, d2) = scorer.extend(&state1, Some(1), 2).unwrap();
        assert!((state1.score() - d1).abs() < 1e-12);
        assert!((state2.score() - (d1 + d2)).abs() < 1e-12);
        // Oracle: total probability of all paths whose labeling starts
        // with the prefix.
        let starts_with = |prefix: &[usize]| -> f64 {
            let mut acc = f64::NEG_INFINITY;
            for ix in 0..3usize.pow(t as u32) {
                let mut path = vec![0usize; t];
                let mut k = ix;
                for slot in path.iter_mut() {
                    *slot = k % 3;
                    k /= 3;
                }
                let lab = collapse(&path, 0);
                if lab.len() >= prefix.len() && lab[..prefix.len()] == *prefix {
                    let lp: f64 = path.iter().enumerate().map(|(tt, &v)| lat.log_prob(tt, v)).sum();
                    acc = log_add_exp(acc, lp);
                }
            }
            acc
        };
        assert!((state1.score() - starts_with(&[1])).abs() < 1e-9);
        assert!((state2.score() - starts_with(&[1, 2])).abs() < 1e-9);
        // Completing the empty prefix prices the all-blank path.
        let empty_complete = scorer.complete(&state0);
        let empty_loss = ctc_loss_value(&lat, &[]).unwrap();
        assert!((empty_complete + empty_loss).abs() < 1e-12);
    }

    #[test]
    fn product_form_joints_factorize_exactly() {
        let mut s = Stream::new(22, "factor");
        for trial in 0..10 {
            let frames = 3 + s.pick(2);
            let inst = FactorizationInstance::product_form(&mut s, frames, 2, 2);
            let report = factorization_check(&inst).unwrap();
            assert!(
                report.exact,
                "trial {trial}: lhs {} rhs {} gap {}",
                report.lhs, report.rhs, report.gap
            );
            assert!(report.lhs > 0.0, "trial {trial}: the drawn target has support");
        }
    }

    #[test]
    fn correlated_joints_show_a_gap() {
        let mut s = Stream::new(23, "corr");
        for trial in 0..10 {
            let frames = 3 + s.pick(2);
            let inst = FactorizationInstance::correlated(&mut s, frames, 2, 2);
            let report = factorization_check(&inst).unwrap();
            assert!(!report.exact, "trial {trial}");
            assert!(report.gap > 1e-3, "trial {trial}: gap {}", report.gap);
        }
    }

    #[test]
    fn degenerate_universe_is_exact_with_unit_mass() {
        let inst = FactorizationInstance::degenerate(3);
        let report = factorization_check(&inst).unwrap();
        assert_eq!(report.lhs, 1.0);
        assert_eq!(report.rhs, 1.0);
        assert!(report.exact);
    }

    #[test]
    fn malformed_joints_are_rejected() {
        let mut inst = FactorizationInstance::degenerate(2);
        inst.joint[0].1 = 0.5;
        assert!(factorization_check(&inst).is_err(), "unnormalized mass");
        let mut dup = FactorizationInstance::degenerate(2);
        dup.joint[0].1 = 0.5;
        let copy = dup.joint[0].clone();
        dup.joint.push(copy);
        assert!(factorization_check(&dup).is_err(), "duplicate triple");
    }

    #[test]
    fn collapse_and_min_frames_follow_the_path_rules() {
        assert_eq!(collapse(&[1, 1, 0, 1, 2, 2], 0), vec![1, 1, 2]);
        assert_eq!(collapse(&[0, 0, 0], 0), Vec::<usize>::new());
        assert_eq!(min_frames(&[1, 2, 3]), 3);
        assert_eq!(min_frames(&[1, 1, 2, 2]), 6);
        assert_eq!(min_frames(&[]), 0);
    }
}
