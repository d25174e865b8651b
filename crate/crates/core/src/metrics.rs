//! Scoring: token error rates for recognition and BLEU/TER for
//! translation.
//!
//! Recognition scores are built on a Levenshtein alignment
//! ([`edit_distance`]) whose tie-breaking is fixed: among minimal-cost
//! alignments, the one with the most substitutions wins (a substitution
//! is never reported as a deletion-insertion pair when the totals tie).
//! [`mix_error_rate`] attributes each alignment error to a language —
//! substitutions and deletions to the reference token's language,
//! insertions to the hypothesis token's — so the per-language error
//! counts always sum to the overall count.
//!
//! Translation scores are corpus [`bleu`] (clipped n-gram precisions,
//! add-1 smoothing for orders ≥ 2, brevity penalty) and [`ter`]
//! (edit-distance errors per reference token, without block shifts).

use alloc::format;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use crate::corpus::{Lang, VocabSpec};
use crate::{Error, Result};

// ---------------------------------------------------------------------------
// Edit distance.
// ---------------------------------------------------------------------------

/// Error tallies of one alignment (or a sum of alignments).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ErrorCounts {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    /// Total reference length the errors are measured against.
    pub ref_len: usize,
}

impl ErrorCounts {
    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    /// Errors per reference token. An empty reference scores 0 against
    /// an empty hypothesis; against a non-empty hypothesis the
    /// insertions are counted over a denominator of 1 (see
    /// [`is_degenerate`](Self::is_degenerate)).
    pub fn rate(&self) -> f64 {
        if self.ref_len == 0 {
            if self.errors() == 0 {
                0.0
            } else {
                self.errors() as f64
            }
        } else {
            self.errors() as f64 / self.ref_len as f64
        }
    }

    /// True when [`rate`](Self::rate) had to fall back to a denominator
    /// of 1 because errors were charged against an empty reference.
    pub fn is_degenerate(&self) -> bool {
        self.ref_len == 0 && self.errors() > 0
    }
}

impl core::ops::AddAssign for ErrorCounts {
    fn add_assign(&mut self, rhs: ErrorCounts) {
        self.substitutions += rhs.substitutions;
        self.deletions += rhs.deletions;
        self.insertions += rhs.insertions;
        self.ref_len += rhs.ref_len;
    }
}

/// One step of an alignment between a reference and a hypothesis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Op {
    Match,
    Substitute,
    Delete,
    Insert,
}

/// An alignment step together with the positions it consumes.
#[derive(Clone, Copy, Debug)]
struct AlignStep {
    op: Op,
    /// Reference position consumed (absent for insertions).
    ref_idx: Option<usize>,
    /// Hypothesis position consumed (absent for deletions).
    hyp_idx: Option<usize>,
}

/// Computes the minimal-cost alignment under unit substitution,
/// deletion, and insertion costs, maximizing the substitution count
/// among ties, and returns its steps in left-to-right order.
fn alignment(reference: &[usize], hypothesis: &[usize]) -> Vec<AlignStep> {
    let n = reference.len();
    let m = hypothesis.len();
    // Per cell: minimal total errors, maximal substitutions among
    // minima, and the move that achieved them.
    #[derive(Clone, Copy)]
    struct Cell {
        errors: usize,
        subs: usize,
        op: Op,
    }
    let mut dp = vec![Cell { errors: 0, subs: 0, op: Op::Match }; (n + 1) * (m + 1)];
    let idx = |i: usize, j: usize| i * (m + 1) + j;
    for i in 1..=n {
        dp[idx(i, 0)] = Cell { errors: i, subs: 0, op: Op::Delete };
    }
    for j in 1..=m {
        dp[idx(0, j)] = Cell { errors: j, subs: 0, op: Op::Insert };
    }
    for i in 1..=n {
        for j in 1..=m {
            let diag = dp[idx(i - 1, j - 1)];
            let same = reference[i - 1] == hypothesis[j - 1];
            let mut best = Cell {
                errors: diag.errors + usize::from(!same),
                subs: diag.subs + usize::from(!same),
                op: if same { Op::Match } else { Op::Substitute },
            };
            let up = dp[idx(i - 1, j)];
            let del = Cell { errors: up.errors + 1, subs: up.subs, op: Op::Delete };
            let left = dp[idx(i, j - 1)];
            let ins = Cell { errors: left.errors + 1, subs: left.subs, op: Op::Insert };
            for cand in [del, ins] {
                if cand.errors < best.errors
                    || (cand.errors == best.errors && cand.subs > best.subs)
                {
                    best = cand;
                }
            }
            dp[idx(i, j)] = best;
        }
    }
    let mut steps = Vec::with_capacity(n.max(m));
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let cell = dp[idx(i, j)];
        match cell.op {
            Op::Match | Op::Substitute => {
                i -= 1;
                j -= 1;
                steps.push(AlignStep { op: cell.op, ref_idx: Some(i), hyp_idx: Some(j) });
            }
            Op::Delete => {
                i -= 1;
                steps.push(AlignStep { op: Op::Delete, ref_idx: Some(i), hyp_idx: None });
            }
            Op::Insert => {
                j -= 1;
                steps.push(AlignStep { op: Op::Insert, ref_idx: None, hyp_idx: Some(j) });
            }
        }
    }
    steps.reverse();
    steps
}

/// Minimal substitution + deletion + insertion counts aligning
/// `hypothesis` to `reference`; ties prefer substitutions over
/// deletion-insertion pairs.
pub fn edit_distance(reference: &[usize], hypothesis: &[usize]) -> ErrorCounts {
    let mut counts = ErrorCounts { ref_len: reference.len(), ..ErrorCounts::default() };
    for step in alignment(reference, hypothesis) {
        match step.op {
            Op::Match => {}
            Op::Substitute => counts.substitutions += 1,
            Op::Delete => counts.deletions += 1,
            Op::Insert => counts.insertions += 1,
        }
    }
    counts
}

// ---------------------------------------------------------------------------
// Mixed (per-language) error rate.
// ---------------------------------------------------------------------------

/// Error counts of one alignment, split by language attribution.
///
/// `all` covers the full mixed sequence; `cn` and `en` cover the
/// positions attributed to Mandarin and English. Every error lands in
/// exactly one language bucket, so
/// `all.errors() == cn.errors() + en.errors()` always holds.
#[derive(Clone, Copy, Debug, Default)]
pub struct MixedErrorBreakdown {
    pub all: ErrorCounts,
    pub cn: ErrorCounts,
    pub en: ErrorCounts,
}

impl core::ops::AddAssign for MixedErrorBreakdown {
    fn add_assign(&mut self, rhs: MixedErrorBreakdown) {
        self.all += rhs.all;
        self.cn += rhs.cn;
        self.en += rhs.en;
    }
}

/// Aligns a code-switched hypothesis to its reference and splits the
/// errors by language: substitutions and deletions go to the reference
/// token's language, insertions to the hypothesis token's language.
/// Per-language reference lengths count the reference tokens of that
/// language.
///
/// Every token must carry a language (per `vocab`); a special or
/// out-of-range token anywhere is an error.
pub fn mix_error_rate(
    vocab: &VocabSpec,
    reference: &[usize],
    hypothesis: &[usize],
) -> Result<MixedErrorBreakdown> {
    let tag = |tokens: &[usize], side: &str| -> Result<Vec<Lang>> {
        tokens
            .iter()
            .map(|&t| {
                vocab.lang_of(t).ok_or_else(|| {
                    Error::InvalidInput(format!(
                        "{side} token {t} carries no language; error rates need fully tagged text"
                    ))
                })
            })
            .collect()
    };
    let ref_langs = tag(reference, "reference")?;
    let hyp_langs = tag(hypothesis, "hypothesis")?;

    let mut out = MixedErrorBreakdown::default();
    out.all.ref_len = reference.len();
    for &lang in &ref_langs {
        match lang {
            Lang::Man => out.cn.ref_len += 1,
            Lang::En => out.en.ref_len += 1,
        }
    }
    for step in alignment(reference, hypothesis) {
        let (bucket_lang, field): (Lang, fn(&mut ErrorCounts) -> &mut usize) = match step.op {
            Op::Match => continue,
            Op::Substitute => (ref_langs[step.ref_idx.expect("substitutions consume a reference token")], |c| {
                &mut c.substitutions
            }),
            Op::Delete => (ref_langs[step.ref_idx.expect("deletions consume a reference token")], |c| {
                &mut c.deletions
            }),
            Op::Insert => (hyp_langs[step.hyp_idx.expect("insertions consume a hypothesis token")], |c| {
                &mut c.insertions
            }),
        };
        *field(&mut out.all) += 1;
        let bucket = match bucket_lang {
            Lang::Man => &mut out.cn,
            Lang::En => &mut out.en,
        };
        *field(bucket) += 1;
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// BLEU.
// ---------------------------------------------------------------------------

/// Corpus-level BLEU in `[0, 100]` over parallel reference/hypothesis
/// lists (one reference per hypothesis).
///
/// Clipped n-gram matches and totals are pooled over the corpus per
/// order, then combined as the geometric mean of the per-order
/// precisions times the brevity penalty
/// `min(1, exp(1 − ref_len/hyp_len))`. Order-1 precision is unsmoothed;
/// orders ≥ 2 use add-1 smoothing on both numerator and denominator
/// (so an order with no possible n-grams contributes a factor of 1).
/// A corpus with no hypothesis tokens, or no unigram matches at all,
/// scores 0.
pub fn bleu(references: &[Vec<usize>], hypotheses: &[Vec<usize>], max_order: usize) -> Result<f64> {
    if max_order == 0 {
        return Err(Error::InvalidConfig("BLEU needs at least order 1".to_string()));
    }
    if references.len() != hypotheses.len() {
        return Err(Error::InvalidInput(format!(
            "BLEU needs parallel corpora, got {} references and {} hypotheses",
            references.len(),
            hypotheses.len()
        )));
    }
    let mut matched = vec![0usize; max_order];
    let mut total = vec![0usize; max_order];
    let mut ref_len = 0usize;
    let mut hyp_len = 0usize;
    for (r, h) in references.iter().zip(hypotheses) {
        ref_len += r.len();
        hyp_len += h.len();
        for n in 1..=max_order {
            let ref_counts = ngram_counts(r, n);
            let hyp_counts = ngram_counts(h, n);
            for (gram, &c) in &hyp_counts {
                total[n - 1] += c;
                matched[n - 1] += c.min(ref_counts.get(gram).copied().unwrap_or(0));
            }
        }
    }
    if hyp_len == 0 || matched[0] == 0 {
        return Ok(0.0);
    }
    let mut log_precisions = 0.0;
    for n in 1..=max_order {
        let smoothing = if n >= 2 { 1.0 } else { 0.0 };
        let p = (matched[n - 1] as f64 + smoothing) / (total[n - 1] as f64 + smoothing);
        log_precisions += libm::log(p);
    }
    let bp = if hyp_len >= ref_len {
        1.0
    } else {
        libm::exp(1.0 - ref_len as f64 / hyp_len as f64)
    };
    Ok(100.0 * bp * libm::exp(log_precisions / max_order as f64))
}

fn ngram_counts(seq: &[usize], n: usize) -> alloc::collections::BTreeMap<&[usize], usize> {
    let mut counts = alloc::collections::BTreeMap::new();
    if seq.len() >= n {
        for i in 0..=seq.len() - n {
            *counts.entry(&seq[i..i + n]).or_insert(0) += 1;
        }
    }
    counts
}

// ---------------------------------------------------------------------------
// TER.
// ---------------------------------------------------------------------------

/// Translation error rate: edit-distance errors per reference token,
/// times 100. Block shifts are not modeled, so this is the pure
/// Levenshtein variant of the metric.
pub fn ter(reference: &[usize], hypothesis: &[usize]) -> f64 {
    edit_distance(reference, hypothesis).rate() * 100.0
}

// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Stream;

    /// Exhaustive alignment search: tries every interleaving of moves
    /// and keeps the best (fewest errors, then most substitutions).
    fn oracle(reference: &[usize], hypothesis: &[usize]) -> ErrorCounts {
        fn go(
            r: &[usize],
            h: &[usize],
            acc: ErrorCounts,
            best: &mut Option<ErrorCounts>,
        ) {
            match (r.first(), h.first()) {
                (None, None) => {
                    let better = match best {
                        None => true,
                        Some(b) => {
                            acc.errors() < b.errors()
                                || (acc.errors() == b.errors()
                                    && acc.substitutions > b.substitutions)
                        }
                    };
                    if better {
                        *best = Some(acc);
                    }
                }
                (Some(&a), Some(&b)) => {
                    let mut diag = acc;
                    if a != b {
                        diag.substitutions += 1;
                    }
                    go(&r[1..], &h[1..], diag, best);
                    let mut del = acc;
                    del.deletions += 1;
                    go(&r[1..], h, del, best);
                    let mut ins = acc;
                    ins.insertions += 1;
                    go(r, &h[1..], ins, best);
                }
                (Some(_), None) => {
                    let mut del = acc;
                    del.deletions += 1;
                    go(&r[1..], h, del, best);
                }
                (None, Some(_)) => {
                    let mut ins = acc;
                    ins.insertions += 1;
                    go(r, &h[1..], ins, best);
                }
            }
        }
        let mut best = None;
        let acc = ErrorCounts { ref_len: reference.len(), ..ErrorCounts::default() };
        go(reference, hypothesis, acc, &mut best);
        best.expect("every pair has at least one alignment")
    }

    fn random_seq(s: &mut Stream, max_len: usize, vocab: usize) -> Vec<usize> {
        let len = s.uniform(0.0, (max_len + 1) as f64) as usize;
        (0..len).map(|_| s.uniform(0.0, vocab as f64) as usize).collect()
    }

    // --- Edit distance ------------------------------------------------------

    #[test]
    fn identical_sequences_are_error_free() {
        for seq in [vec![], vec![3], vec![1, 2, 3, 4, 5]] {
            let c = edit_distance(&seq, &seq);
            assert_eq!(
                c,
                ErrorCounts { substitutions: 0, deletions: 0, insertions: 0, ref_len: seq.len() }
            );
            assert_eq!(c.rate(), 0.0);
        }
    }

    #[test]
    fn a_single_substitution_counts_once() {
        let c = edit_distance(&[1, 2, 3], &[1, 9, 3]);
        assert_eq!(
            c,
            ErrorCounts { substitutions: 1, deletions: 0, insertions: 0, ref_len: 3 }
        );
        assert!((c.rate() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn swapped_tokens_report_substitutions_not_a_deletion_insertion_pair() {
        // Both readings cost 2; the substitution reading must win.
        let c = edit_distance(&[1, 2], &[2, 1]);
        assert_eq!(
            c,
            ErrorCounts { substitutions: 2, deletions: 0, insertions: 0, ref_len: 2 }
        );
    }

    #[test]
    fn empty_reference_rates_are_flagged() {
        let c = edit_distance(&[], &[]);
        assert_eq!(c.rate(), 0.0);
        assert!(!c.is_degenerate());
        let c = edit_distance(&[], &[7, 8]);
        assert_eq!(c.insertions, 2);
        assert_eq!(c.rate(), 2.0);
        assert!(c.is_degenerate());
    }

    #[test]
    fn counts_accumulate() {
        let mut total = ErrorCounts::default();
        total += edit_distance(&[1, 2, 3], &[1, 9, 3]);
        total += edit_distance(&[4, 5], &[4, 5, 6]);
        assert_eq!(
            total,
            ErrorCounts { substitutions: 1, deletions: 0, insertions: 1, ref_len: 5 }
        );
        assert!((total.rate() - 0.4).abs() < 1e-15);
    }

    #[test]
    fn random_pairs_match_the_exhaustive_oracle() {
        let mut s = Stream::new(7, "edit-distance-oracle");
        for _ in 0..100 {
            let r = random_seq(&mut s, 6, 4);
            let h = random_seq(&mut s, 6, 4);
            let got = edit_distance(&r, &h);
            let want = oracle(&r, &h);
            assert_eq!(got, want, "ref {r:?} hyp {h:?}");
        }
    }

    // --- Mixed error rate ---------------------------------------------------

    fn toy() -> VocabSpec {
        // 8 Mandarin + 8 English real tokens.
        VocabSpec::toy(8, 8).unwrap()
    }

    #[test]
    fn errors_are_attributed_by_language() {
        let v = toy();
        let m = &v.man_tokens;
        let e = &v.en_tokens;
        // 8 Mandarin + 2 English reference tokens, one Mandarin token
        // substituted in the hypothesis.
        let reference: Vec<usize> =
            m.iter().take(8).copied().chain(e.iter().take(2).copied()).collect();
        let mut hypothesis = reference.clone();
        hypothesis[3] = m[7];
        let out = mix_error_rate(&v, &reference, &hypothesis).unwrap();
        assert!((out.all.rate() - 0.10).abs() < 1e-15);
        assert!((out.cn.rate() - 0.125).abs() < 1e-15);
        assert_eq!(out.en.rate(), 0.0);
        assert_eq!(out.cn.ref_len, 8);
        assert_eq!(out.en.ref_len, 2);
    }

    #[test]
    fn a_perfect_hypothesis_scores_zero_everywhere() {
        let v = toy();
        let reference = vec![v.man_tokens[0], v.en_tokens[1], v.man_tokens[2]];
        let out = mix_error_rate(&v, &reference, &reference).unwrap();
        assert_eq!(out.all.rate(), 0.0);
        assert_eq!(out.cn.rate(), 0.0);
        assert_eq!(out.en.rate(), 0.0);
    }

    #[test]
    fn an_empty_hypothesis_is_all_deletions() {
        let v = toy();
        let reference = vec![v.man_tokens[0], v.man_tokens[1], v.en_tokens[0]];
        let out = mix_error_rate(&v, &reference, &[]).unwrap();
        assert_eq!(out.all.deletions, 3);
        assert_eq!(out.all.rate(), 1.0);
    }

    #[test]
    fn insertions_follow_the_hypothesis_token_language() {
        let v = toy();
        // All-Mandarin reference; the hypothesis adds an English token.
        let reference = vec![v.man_tokens[0], v.man_tokens[1]];
        let hypothesis = vec![v.man_tokens[0], v.man_tokens[1], v.en_tokens[0]];
        let out = mix_error_rate(&v, &reference, &hypothesis).unwrap();
        assert_eq!(out.en.insertions, 1);
        assert_eq!(out.en.ref_len, 0);
        assert!(out.en.is_degenerate());
        assert_eq!(out.cn.errors(), 0);
    }

    #[test]
    fn untagged_tokens_are_rejected() {
        let v = toy();
        let err = mix_error_rate(&v, &[v.sos, v.man_tokens[0]], &[v.man_tokens[0]]).unwrap_err();
        assert!(matches!(err, Error::InvalidInput(ref m) if m.contains("reference")));
        let err = mix_error_rate(&v, &[v.man_tokens[0]], &[v.blank]).unwrap_err();
        assert!(matches!(err, Error::InvalidInput(ref m) if m.contains("hypothesis")));
    }

    #[test]
    fn language_buckets_conserve_the_total_error_count() {
        let v = toy();
        let real: Vec<usize> =
            v.man_tokens.iter().chain(v.en_tokens.iter()).copied().collect();
        let mut s = Stream::new(13, "mixed-rate-conservation");
        for _ in 0..50 {
            let pick = |s: &mut Stream, n: usize| -> Vec<usize> {
                (0..n).map(|_| real[s.uniform(0.0, real.len() as f64) as usize]).collect()
            };
            let r_len = s.uniform(0.0, 9.0) as usize;
            let h_len = s.uniform(0.0, 9.0) as usize;
            let reference = pick(&mut s, r_len);
            let hypothesis = pick(&mut s, h_len);
            let out = mix_error_rate(&v, &reference, &hypothesis).unwrap();
            assert_eq!(out.all.errors(), out.cn.errors() + out.en.errors());
            assert_eq!(out.all.ref_len, out.cn.ref_len + out.en.ref_len);
            assert_eq!(out.all, edit_distance(&reference, &hypothesis));
        }
    }

    // --- BLEU ----------------------------------------------------------------

    #[test]
    fn a_perfect_corpus_scores_one_hundred() {
        let refs = vec![vec![1, 2, 3, 4, 5], vec![6, 7, 8]];
        assert!((bleu(&refs, &refs, 4).unwrap() - 100.0).abs() < 1e-12);
    }

    #[test]
    fn disjoint_unigrams_score_zero() {
        let refs = vec![vec![1, 2, 3]];
        let hyps = vec![vec![4, 5, 6]];
        assert_eq!(bleu(&refs, &hyps, 4).unwrap(), 0.0);
    }

    #[test]
    fn a_two_sentence_corpus_matches_the_hand_computed_value() {
        // Sentence 1 is perfect; sentence 2 swaps one token.
        let refs = vec![vec![1, 2, 3, 4], vec![1, 2, 3, 4, 5]];
        let hyps = vec![vec![1, 2, 3, 4], vec![1, 2, 9, 4, 5]];
        // By hand: unigram 8/9; bigram (3+2+1)/(3+4+1); trigram
        // (2+0+1)/(2+3+1); 4-gram (1+0+1)/(1+2+1); lengths equal, BP 1.
        let want = 100.0
            * (8.0_f64 / 9.0 * (6.0 / 8.0) * (3.0 / 6.0) * (2.0 / 4.0)).powf(0.25);
        let got = bleu(&refs, &hyps, 4).unwrap();
        assert!((got - want).abs() < 1e-9, "got {got}, want {want}");
    }

    #[test]
    fn short_hypotheses_pay_the_brevity_penalty() {
        // All emitted n-grams are correct; only the length differs.
        let refs = vec![vec![1, 2, 3, 4]];
        let hyps = vec![vec![1, 2, 3]];
        let want = 100.0 * (1.0f64 - 4.0 / 3.0).exp();
        let got = bleu(&refs, &hyps, 4).unwrap();
        assert!((got - want).abs() < 1e-9, "got {got}, want {want}");
        // Long hypotheses pay through precision, not an extra penalty.
        let hyps = vec![vec![1, 2, 3, 4, 4]];
        assert!(bleu(&refs, &hyps, 4).unwrap() < 100.0);
    }

    #[test]
    fn degenerate_corpora_are_rejected_or_zero() {
        assert!(bleu(&[vec![1]], &[], 4).is_err());
        assert!(bleu(&[vec![1]], &[vec![1]], 0).is_err());
        assert_eq!(bleu(&[], &[], 4).unwrap(), 0.0);
        assert_eq!(bleu(&[vec![1, 2]], &[vec![]], 4).unwrap(), 0.0);
    }

    // --- TER -----------------------------------------------------------------

    #[test]
    fn ter_matches_hand_values() {
        assert_eq!(ter(&[1, 2, 3], &[1, 2, 3]), 0.0);
        assert_eq!(ter(&[1, 2, 3, 4], &[1, 9, 3, 4]), 25.0);
        assert_eq!(ter(&[1, 2], &[]), 100.0);
    }

    #[test]
    fn ter_is_the_edit_rate_on_random_pairs() {
        let mut s = Stream::new(29, "ter-delegation");
        for _ in 0..100 {
            let r = random_seq(&mut s, 6, 4);
            let h = random_seq(&mut s, 6, 4);
            let want = oracle(&r, &h).rate() * 100.0;
            assert_eq!(ter(&r, &h), want);
        }
    }

    // --- Shared properties -----------------------------------------------------

    #[test]
    fn scores_are_invariant_under_consistent_relabeling() {
        let v = toy();
        let mut s = Stream::new(31, "metric-relabeling");
        // A permutation of real ids that maps each language onto itself.
        let permute = |t: usize| -> usize {
            if let Some(i) = v.man_tokens.iter().position(|&x| x == t) {
                v.man_tokens[(i + 3) % v.man_tokens.len()]
            } else if let Some(i) = v.en_tokens.iter().position(|&x| x == t) {
                v.en_tokens[(i + 5) % v.en_tokens.len()]
            } else {
                t
            }
        };
        let real: Vec<usize> =
            v.man_tokens.iter().chain(v.en_tokens.iter()).copied().collect();
        for _ in 0..20 {
            let pick = |s: &mut Stream, n: usize| -> Vec<usize> {
                (0..n).map(|_| real[s.uniform(0.0, real.len() as f64) as usize]).collect()
            };
            let r_len = 1 + s.uniform(0.0, 7.0) as usize;
            let reference = pick(&mut s, r_len);
            let h_len = 1 + s.uniform(0.0, 7.0) as usize;
            let hypothesis = pick(&mut s, h_len);
            let ref_p: Vec<usize> = reference.iter().map(|&t| permute(t)).collect();
            let hyp_p: Vec<usize> = hypothesis.iter().map(|&t| permute(t)).collect();

            assert_eq!(edit_distance(&reference, &hypothesis), edit_distance(&ref_p, &hyp_p));
            assert_eq!(ter(&reference, &hypothesis), ter(&ref_p, &hyp_p));
            let a = bleu(
                std::slice::from_ref(&reference),
                std::slice::from_ref(&hypothesis),
                4,
            )
            .unwrap();
            let b = bleu(std::slice::from_ref(&ref_p), std::slice::from_ref(&hyp_p), 4).unwrap();
            assert_eq!(a, b);
            let ma = mix_error_rate(&v, &reference, &hypothesis).unwrap();
            let mb = mix_error_rate(&v, &ref_p, &hyp_p).unwrap();
            assert_eq!(ma.all, mb.all);
            assert_eq!(ma.cn, mb.cn);
            assert_eq!(ma.en, mb.en);
        }
    }
}
