//! Synthetic bilingual code-switching data.
//!
//! Two disjoint toy token inventories stand in for Mandarin and English.
//! Each utterance is a token sequence; its "audio" is a deterministic
//! per-token embedding repeated for a fixed number of frames plus
//! seeded Gaussian noise, so any manifest line can be regenerated
//! bit-for-bit from (corpus seed, utterance seed) without storing
//! feature files.
//!
//! From a code-switched transcript the generator derives four label
//! views: the two masked transcripts (other-language tokens replaced by
//! a placeholder, one placeholder per token) used by the per-language
//! recognition losses, and the two full translations under a fixed
//! index-aligned dictionary used by the translation decoders.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::numerics::{Stream, Tensor};
use crate::{Error, Result};

/// Which language a real token belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Lang {
    Man,
    En,
}

impl Lang {
    pub fn other(self) -> Lang {
        match self {
            Lang::Man => Lang::En,
            Lang::En => Lang::Man,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Lang::Man => "man",
            Lang::En => "en",
        }
    }
}

/// Token-id layout shared by every component: six specials followed by
/// the two language inventories.
///
/// `blank` is the frame classifier's no-emission symbol and never
/// appears in transcripts. `eng_mask` / `man_mask` are the placeholders
/// covering the *other* language in masked transcripts. The index-
/// aligned pairing `man_tokens[i] ↔ en_tokens[i]` is the toy
/// translation dictionary.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VocabSpec {
    pub blank: usize,
    pub eng_mask: usize,
    pub man_mask: usize,
    pub sos: usize,
    pub eos: usize,
    pub unk: usize,
    pub man_tokens: Vec<usize>,
    pub en_tokens: Vec<usize>,
    surfaces: BTreeMap<usize, String>,
}

impl VocabSpec {
    /// The standard toy layout: ids 0..6 are
    /// `<blank> <eng> <man> <sos> <eos> <unk>`, then `n_man` Mandarin
    /// ids surfaced `m1..`, then `n_en` English ids surfaced `e1..`.
    pub fn toy(n_man: usize, n_en: usize) -> Result<Self> {
        if n_man == 0 || n_man != n_en {
            return Err(Error::InvalidConfig(
                "the translation dictionary pairs tokens by index; the two inventories must be equal-sized and non-empty"
                    .to_string(),
            ));
        }
        let mut surfaces = BTreeMap::new();
        for (id, s) in ["<blank>", "<eng>", "<man>", "<sos>", "<eos>", "<unk>"]
            .iter()
            .enumerate()
        {
            surfaces.insert(id, s.to_string());
        }
        let man_tokens: Vec<usize> = (0..n_man).map(|i| 6 + i).collect();
        let en_tokens: Vec<usize> = (0..n_en).map(|i| 6 + n_man + i).collect();
        for (i, &id) in man_tokens.iter().enumerate() {
            surfaces.insert(id, format!("m{}", i + 1));
        }
        for (i, &id) in en_tokens.iter().enumerate() {
            surfaces.insert(id, format!("e{}", i + 1));
        }
        Ok(Self {
            blank: 0,
            eng_mask: 1,
            man_mask: 2,
            sos: 3,
            eos: 4,
            unk: 5,
            man_tokens,
            en_tokens,
            surfaces,
        })
    }

    /// Total number of ids (the classifier output width).
    pub fn size(&self) -> usize {
        6 + self.man_tokens.len() + self.en_tokens.len()
    }

    pub fn is_special(&self, tok: usize) -> bool {
        tok < 6
    }

    /// Language of a real token; `None` for specials and out-of-range.
    pub fn lang_of(&self, tok: usize) -> Option<Lang> {
        if self.man_tokens.contains(&tok) {
            Some(Lang::Man)
        } else if self.en_tokens.contains(&tok) {
            Some(Lang::En)
        } else {
            None
        }
    }

    /// The placeholder covering `lang` spans in the other language's
    /// masked transcript.
    pub fn mask_for(&self, lang: Lang) -> usize {
        match lang {
            Lang::Man => self.man_mask,
            Lang::En => self.eng_mask,
        }
    }

    pub fn surface(&self, tok: usize) -> &str {
        self.surfaces.get(&tok).map(|s| s.as_str()).unwrap_or("<bad>")
    }

    pub fn surfaces(&self) -> impl Iterator<Item = (usize, &str)> {
        self.surfaces.iter().map(|(&id, s)| (id, s.as_str()))
    }

    /// Tokens a recognizer may emit (everything except blank and sos/eos).
    pub fn emittable(&self) -> Vec<usize> {
        let mut out = alloc::vec![self.eng_mask, self.man_mask];
        out.extend(&self.man_tokens);
        out.extend(&self.en_tokens);
        out
    }

    /// Real (single-language) tokens only — the translation decoders'
    /// output inventory.
    pub fn real_tokens(&self) -> Vec<usize> {
        let mut out = self.man_tokens.clone();
        out.extend(&self.en_tokens);
        out
    }
}

/// Maps every token of the non-target language through the fixed
/// index-aligned dictionary; target-language tokens pass through.
/// Length-preserving and deterministic.
pub fn toy_translate(y: &[usize], to: Lang, vocab: &VocabSpec) -> Result<Vec<usize>> {
    y.iter()
        .map(|&tok| {
            let lang = vocab.lang_of(tok).ok_or_else(|| {
                Error::InvalidInput(format!("token {tok} is not translatable vocabulary"))
            })?;
            if lang == to {
                return Ok(tok);
            }
            let (src, dst) = match to {
                Lang::Man => (&vocab.en_tokens, &vocab.man_tokens),
                Lang::En => (&vocab.man_tokens, &vocab.en_tokens),
            };
            let i = src.iter().position(|&t| t == tok).expect("lang_of said so");
            Ok(dst[i])
        })
        .collect()
}

/// Replaces every token that is not in the kept language with that
/// language's placeholder for foreign spans, one placeholder per token.
pub fn mask_monolingual(y: &[usize], keep: Lang, vocab: &VocabSpec) -> Result<Vec<usize>> {
    y.iter()
        .map(|&tok| {
            if tok == vocab.mask_for(keep.other()) {
                // Already-masked foreign spans stay masked (idempotence).
                return Ok(tok);
            }
            match vocab.lang_of(tok) {
                Some(l) if l == keep => Ok(tok),
                Some(_) => Ok(vocab.mask_for(keep.other())),
                None => Err(Error::InvalidInput(format!(
                    "special token {tok} cannot appear in a transcript"
                ))),
            }
        })
        .collect()
}

/// Generation parameters for a synthetic corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSpec {
    pub n_train: usize,
    pub n_eval: usize,
    /// Fraction of *training* utterances that code-switch.
    pub cs_fraction: f64,
    pub l_min: usize,
    pub l_max: usize,
    /// Probability the language flips between consecutive tokens of a
    /// code-switched utterance.
    pub switch_prob: f64,
    pub frames_per_token: usize,
    pub feat_dim: usize,
    pub noise_sigma: f64,
    pub seed: u64,
    pub n_man: usize,
    pub n_en: usize,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            n_train: 50,
            n_eval: 20,
            cs_fraction: 0.6,
            l_min: 3,
            l_max: 8,
            switch_prob: 0.4,
            frames_per_token: 8,
            feat_dim: 8,
            noise_sigma: 0.1,
            seed: 0x5eed,
            n_man: 20,
            n_en: 20,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.l_min < 1 || self.l_max < self.l_min {
            return Err(Error::InvalidConfig(format!(
                "bad utterance length range [{}, {}]",
                self.l_min, self.l_max
            )));
        }
        if !(0.0..=1.0).contains(&self.cs_fraction) || !(0.0..=1.0).contains(&self.switch_prob)
        {
            return Err(Error::InvalidConfig(
                "cs_fraction and switch_prob must lie in [0, 1]".to_string(),
            ));
        }
        if self.l_min * self.frames_per_token < 4 {
            return Err(Error::InvalidConfig(
                "shortest utterance must yield at least 4 frames for the subsampler".to_string(),
            ));
        }
        if self.feat_dim == 0 || self.frames_per_token == 0 {
            return Err(Error::InvalidConfig("feature dims must be positive".to_string()));
        }
        if !self.noise_sigma.is_finite() || self.noise_sigma < 0.0 {
            return Err(Error::InvalidConfig("noise_sigma must be finite and >= 0".to_string()));
        }
        if self.n_train == 0 {
            return Err(Error::InvalidConfig("n_train must be positive".to_string()));
        }
        Ok(())
    }

    pub fn vocab(&self) -> Result<VocabSpec> {
        VocabSpec::toy(self.n_man, self.n_en)
    }
}

/// One utterance with all label views. Features are always `f64`;
/// training casts them to its working precision.
#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    /// Seed of the utterance's noise stream; with the corpus seed this
    /// regenerates `features` exactly.
    pub utt_seed: u64,
    pub features: Tensor<f64>,
    pub y_cs: Vec<usize>,
    pub y_man_spec: Vec<usize>,
    pub y_en_spec: Vec<usize>,
    pub y_man: Vec<usize>,
    pub y_en: Vec<usize>,
    pub tags: Vec<Lang>,
}

/// Deterministic synthetic "audio": each token contributes
/// `frames_per_token` copies of its fixed embedding (a pure function of
/// the corpus seed and token id) plus Gaussian noise from the
/// utterance's own stream. `T = |y| · frames_per_token` always.
pub fn featurize(y: &[usize], spec: &CorpusSpec, utt_seed: u64) -> Result<Tensor<f64>> {
    let t = y.len() * spec.frames_per_token;
    let d = spec.feat_dim;
    let mut data = Vec::with_capacity(t * d);
    let mut noise = Stream::indexed(spec.seed, "feat-noise", utt_seed);
    for &tok in y {
        let mut emb_stream = Stream::indexed(spec.seed, "token-embed", tok as u64);
        let emb: Vec<f64> = (0..d).map(|_| emb_stream.normal()).collect();
        for _ in 0..spec.frames_per_token {
            for &e in &emb {
                data.push(e + spec.noise_sigma * noise.normal());
            }
        }
    }
    Tensor::new(&[t, d], data)
}

/// The generated corpus: one training set and three evaluation sets
/// (code-switched, Mandarin-only, English-only), all disjoint from the
/// training set by id and by transcript content.
#[derive(Clone, Debug)]
pub struct GeneratedCorpus {
    pub vocab: VocabSpec,
    pub train: Vec<Utterance>,
    pub eval_cs: Vec<Utterance>,
    pub eval_man: Vec<Utterance>,
    pub eval_en: Vec<Utterance>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum UttKind {
    Cs,
    Mono(Lang),
}

fn draw_transcript(
    stream: &mut Stream,
    spec: &CorpusSpec,
    vocab: &VocabSpec,
    kind: UttKind,
) -> (Vec<usize>, Vec<Lang>) {
    let len = spec.l_min + stream.pick(spec.l_max - spec.l_min + 1);
    loop {
        let mut tokens = Vec::with_capacity(len);
        let mut tags = Vec::with_capacity(len);
        let mut lang = match kind {
            UttKind::Mono(l) => l,
            UttKind::Cs => {
                if stream.coin(0.5) {
                    Lang::Man
                } else {
                    Lang::En
                }
            }
        };
        for i in 0..len {
            if kind == UttKind::Cs && i > 0 && stream.coin(spec.switch_prob) {
                lang = lang.other();
            }
            let inv = match lang {
                Lang::Man => &vocab.man_tokens,
                Lang::En => &vocab.en_tokens,
            };
            tokens.push(inv[stream.pick(inv.len())]);
            tags.push(lang);
        }
        // A code-switched utterance must actually contain both languages.
        if kind == UttKind::Cs && len >= 2 && tags.iter().all(|&t| t == tags[0]) {
            continue;
        }
        return (tokens, tags);
    }
}

fn build_utterance(
    id: String,
    utt_seed: u64,
    y_cs: Vec<usize>,
    tags: Vec<Lang>,
    spec: &CorpusSpec,
    vocab: &VocabSpec,
) -> Result<Utterance> {
    let y_man_spec = mask_monolingual(&y_cs, Lang::Man, vocab)?;
    let y_en_spec = mask_monolingual(&y_cs, Lang::En, vocab)?;
    let y_man = toy_translate(&y_cs, Lang::Man, vocab)?;
    let y_en = toy_translate(&y_cs, Lang::En, vocab)?;
    let features = featurize(&y_cs, spec, utt_seed)?;
    Ok(Utterance { id, utt_seed, features, y_cs, y_man_spec, y_en_spec, y_man, y_en, tags })
}

/// Generates the full corpus for `spec`, deterministically.
pub fn gen_corpus(spec: &CorpusSpec) -> Result<GeneratedCorpus> {
    spec.validate()?;
    let vocab = spec.vocab()?;
    let mut seen: BTreeSet<Vec<usize>> = BTreeSet::new();

    let mut label_stream = Stream::new(spec.seed, "labels");
    let mut seed_stream = Stream::new(spec.seed, "utt-seeds");
    let mut train = Vec::with_capacity(spec.n_train);
    for i in 0..spec.n_train {
        let kind = if label_stream.coin(spec.cs_fraction) {
            UttKind::Cs
        } else if label_stream.coin(0.5) {
            UttKind::Mono(Lang::Man)
        } else {
            UttKind::Mono(Lang::En)
        };
        let (y_cs, tags) = draw_transcript(&mut label_stream, spec, &vocab, kind);
        seen.insert(y_cs.clone());
        train.push(build_utterance(
            format!("train-{i:05}"),
            seed_stream.next_u64(),
            y_cs,
            tags,
            spec,
            &vocab,
        )?);
    }

    let mut eval_set = |name: &str, kind: UttKind| -> Result<Vec<Utterance>> {
        let mut stream = Stream::new(spec.seed, &format!("eval-{name}"));
        let mut seeds = Stream::new(spec.seed, &format!("eval-{name}-seeds"));
        let mut out = Vec::with_capacity(spec.n_eval);
        for i in 0..spec.n_eval {
            // Held-out sets are disjoint from training data (and from
            // each other) by transcript content, not just by id.
            let (y_cs, tags) = loop {
                let cand = draw_transcript(&mut stream, spec, &vocab, kind);
                if !seen.contains(&cand.0) {
                    break cand;
                }
            };
            seen.insert(y_cs.clone());
            out.push(build_utterance(
                format!("{name}-{i:05}"),
                seeds.next_u64(),
                y_cs,
                tags,
                spec,
                &vocab,
            )?);
        }
        Ok(out)
    };

    let eval_cs = eval_set("evalcs", UttKind::Cs)?;
    let eval_man = eval_set("evalman", UttKind::Mono(Lang::Man))?;
    let eval_en = eval_set("evalen", UttKind::Mono(Lang::En))?;
    Ok(GeneratedCorpus { vocab, train, eval_cs, eval_man, eval_en })
}
