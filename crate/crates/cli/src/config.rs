//! Run configuration: a single TOML document that fully determines a run.
//!
//! Every knob has a default except the training seed, which must be given
//! (in the file or via `--seed`) so no run is accidentally unseeded. The
//! resolved configuration can be echoed back to canonical TOML; parsing
//! the echo reproduces the resolved configuration exactly, which is what
//! makes reports and checkpoints self-describing.

use anyhow::{bail, Context, Result};
use laest_core::corpus::CorpusSpec;
use laest_core::decode::{DecodeParams, StDirection};
use laest_core::model::{ModelConfig, OptimConfig, Variant};
use laest_core::transformer::BlockConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

// ---------------------------------------------------------------------------
// TOML schema.
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RawConfig {
    /// Output directory; manifests, checkpoints, logs and reports land here.
    pub out_dir: Option<String>,
    pub corpus: CorpusSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub decode: DecodeSection,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSection {
    pub n_train: usize,
    pub n_eval: usize,
    pub cs_fraction: f64,
    pub l_min: usize,
    pub l_max: usize,
    pub switch_prob: f64,
    pub frames_per_token: usize,
    pub feat_dim: usize,
    pub noise_sigma: f64,
    pub seed: u64,
    pub n_man: usize,
    pub n_en: usize,
}

impl Default for CorpusSection {
    fn default() -> Self {
        let s = CorpusSpec::default();
        CorpusSection {
            n_train: s.n_train,
            n_eval: s.n_eval,
            cs_fraction: s.cs_fraction,
            l_min: s.l_min,
            l_max: s.l_max,
            switch_prob: s.switch_prob,
            frames_per_token: s.frames_per_token,
            feat_dim: s.feat_dim,
            noise_sigma: s.noise_sigma,
            seed: s.seed,
            n_man: s.n_man,
            n_en: s.n_en,
        }
    }
}

impl CorpusSection {
    pub fn to_spec(&self) -> CorpusSpec {
        CorpusSpec {
            n_train: self.n_train,
            n_eval: self.n_eval,
            cs_fraction: self.cs_fraction,
            l_min: self.l_min,
            l_max: self.l_max,
            switch_prob: self.switch_prob,
            frames_per_token: self.frames_per_token,
            feat_dim: self.feat_dim,
            noise_sigma: self.noise_sigma,
            seed: self.seed,
            n_man: self.n_man,
            n_en: self.n_en,
        }
    }

    pub fn from_spec(s: &CorpusSpec) -> Self {
        CorpusSection {
            n_train: s.n_train,
            n_eval: s.n_eval,
            cs_fraction: s.cs_fraction,
            l_min: s.l_min,
            l_max: s.l_max,
            switch_prob: s.switch_prob,
            frames_per_token: s.frames_per_token,
            feat_dim: s.feat_dim,
            noise_sigma: s.noise_sigma,
            seed: s.seed,
            n_man: s.n_man,
            n_en: s.n_en,
        }
    }
}

/// Model architecture. Feature width and vocabulary are taken from the
/// corpus section so the two can never disagree.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub variant: String,
    pub n_encoder: usize,
    pub n_share: usize,
    pub n_mono: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub n_asr_dec_blocks: usize,
    pub n_st_dec_blocks: usize,
    pub lambda_spec: f64,
    pub lambda_ctc: f64,
    pub beta: f64,
    pub label_smoothing: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        ModelSection {
            variant: m.variant.name().to_string(),
            n_encoder: m.n_encoder,
            n_share: m.n_share,
            n_mono: m.n_mono,
            d_model: m.block.d_model,
            n_heads: m.block.n_heads,
            d_ff: m.block.d_ff,
            dropout: m.block.dropout,
            n_asr_dec_blocks: m.n_asr_dec_blocks,
            n_st_dec_blocks: m.n_st_dec_blocks,
            lambda_spec: m.lambda_spec,
            lambda_ctc: m.lambda_ctc,
            beta: m.beta,
            label_smoothing: m.label_smoothing,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    /// Mandatory: a run must be explicitly seeded, here or via `--seed`.
    pub seed: Option<u64>,
    pub steps: u64,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
    /// A checkpoint is written every this-many steps (and at the end).
    pub checkpoint_every: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let o = OptimConfig::default();
        TrainSection {
            seed: None,
            steps: 200,
            batch_size: 8,
            peak_lr: o.peak_lr,
            warmup_steps: o.warmup_steps,
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
            clip_norm: o.clip_norm,
            checkpoint_every: 100,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeSection {
    pub beam: usize,
    pub gamma_lm: f64,
    pub gamma_st: f64,
    /// `"man2en"`, `"en2man"`, or absent for no rescoring preference.
    pub st_direction: Option<String>,
    /// Order of the n-gram language model trained on the training
    /// transcripts for shallow fusion. `use_lm = false` disables fusion
    /// regardless of `gamma_lm`.
    pub lm_order: usize,
    pub use_lm: bool,
}

impl Default for DecodeSection {
    fn default() -> Self {
        let d = DecodeParams::default();
        DecodeSection {
            beam: d.beam,
            gamma_lm: d.gamma_lm,
            gamma_st: d.gamma_st,
            st_direction: None,
            lm_order: 4,
            use_lm: true,
        }
    }
}

// ---------------------------------------------------------------------------
// Command-line overrides.
// ---------------------------------------------------------------------------

/// Flag values that override the corresponding config keys.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub beam: Option<usize>,
    pub beta: Option<f64>,
    pub variant: Option<String>,
    pub out: Option<String>,
    pub steps: Option<u64>,
}

// ---------------------------------------------------------------------------
// Resolution.
// ---------------------------------------------------------------------------

/// A fully resolved run configuration: validated, all defaults applied,
/// seed known. Everything a command needs, in core types.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub out_dir: PathBuf,
    pub corpus: CorpusSpec,
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub seed: u64,
    pub steps: u64,
    pub batch_size: usize,
    pub checkpoint_every: u64,
    pub decode: DecodeParams,
    pub lm_order: usize,
    pub use_lm: bool,
}

impl RawConfig {
    pub fn parse_str(text: &str) -> Result<RawConfig> {
        toml::from_str(text).context("config is not valid TOML for this schema")
    }

    pub fn load(path: &Path) -> Result<RawConfig> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        Self::parse_str(&text).with_context(|| format!("in config {}", path.display()))
    }

    pub fn apply(&mut self, ov: &Overrides) {
        if let Some(seed) = ov.seed {
            self.train.seed = Some(seed);
        }
        if let Some(beam) = ov.beam {
            self.decode.beam = beam;
        }
        if let Some(beta) = ov.beta {
            self.model.beta = beta;
        }
        if let Some(ref v) = ov.variant {
            self.model.variant = v.clone();
        }
        if let Some(ref out) = ov.out {
            self.out_dir = Some(out.clone());
        }
        if let Some(steps) = ov.steps {
            self.train.steps = steps;
        }
    }

    /// Validates everything and produces the resolved configuration.
    pub fn resolve(&self) -> Result<RunConfig> {
        let out_dir = PathBuf::from(
            self.out_dir
                .clone()
                .ok_or_else(|| anyhow::anyhow!("no output directory: set out_dir or pass --out"))?,
        );
        let seed = self
            .train
            .seed
            .ok_or_else(|| anyhow::anyhow!("no seed: set [train].seed or pass --seed"))?;

        let corpus = self.corpus.to_spec();
        corpus.validate().map_err(|e| anyhow::anyhow!("corpus: {e}"))?;

        let variant = Variant::parse(&self.model.variant).map_err(|e| anyhow::anyhow!("{e}"))?;
        let vocab = laest_core::corpus::VocabSpec::toy(corpus.n_man, corpus.n_en)
            .map_err(|e| anyhow::anyhow!("vocabulary: {e}"))?;
        let model = ModelConfig {
            variant,
            feat_dim: corpus.feat_dim,
            n_encoder: self.model.n_encoder,
            n_share: self.model.n_share,
            n_mono: self.model.n_mono,
            block: BlockConfig {
                d_model: self.model.d_model,
                n_heads: self.model.n_heads,
                d_ff: self.model.d_ff,
                dropout: self.model.dropout,
            },
            n_asr_dec_blocks: self.model.n_asr_dec_blocks,
            n_st_dec_blocks: self.model.n_st_dec_blocks,
            lambda_spec: self.model.lambda_spec,
            lambda_ctc: self.model.lambda_ctc,
            beta: self.model.beta,
            label_smoothing: self.model.label_smoothing,
            vocab,
        };
        model.validate().map_err(|e| anyhow::anyhow!("model: {e}"))?;

        if self.train.steps == 0 {
            bail!("train.steps must be at least 1");
        }
        if self.train.batch_size == 0 {
            bail!("train.batch_size must be at least 1");
        }
        if self.train.checkpoint_every == 0 {
            bail!("train.checkpoint_every must be at least 1");
        }
        let optim = OptimConfig {
            peak_lr: self.train.peak_lr,
            warmup_steps: self.train.warmup_steps,
            beta1: self.train.beta1,
            beta2: self.train.beta2,
            eps: self.train.eps,
            clip_norm: self.train.clip_norm,
        };

        let st_direction = match self.decode.st_direction.as_deref() {
            None => None,
            Some(s) => Some(StDirection::parse(s).ok_or_else(|| {
                anyhow::anyhow!("unknown translation direction {s:?}; expected man2en or en2man")
            })?),
        };
        let decode = DecodeParams {
            beam: self.decode.beam,
            gamma_lm: self.decode.gamma_lm,
            gamma_st: self.decode.gamma_st,
            st_direction,
        };
        decode.validate().map_err(|e| anyhow::anyhow!("decode: {e}"))?;
        if self.decode.lm_order == 0 {
            bail!("decode.lm_order must be at least 1");
        }

        Ok(RunConfig {
            out_dir,
            corpus,
            model,
            optim,
            seed,
            steps: self.train.steps,
            batch_size: self.train.batch_size,
            checkpoint_every: self.train.checkpoint_every,
            decode,
            lm_order: self.decode.lm_order,
            use_lm: self.decode.use_lm,
        })
    }
}

impl RunConfig {
    /// The canonical TOML echo: every resolved value made explicit,
    /// except the output directory, which is environmental rather than
    /// semantic — leaving it out keeps echoes (and thus checkpoints and
    /// reports) byte-identical across run directories. Re-running from
    /// an echo therefore takes `--out`.
    pub fn to_raw(&self) -> RawConfig {
        RawConfig {
            out_dir: None,
            corpus: CorpusSection::from_spec(&self.corpus),
            model: ModelSection {
                variant: self.model.variant.name().to_string(),
                n_encoder: self.model.n_encoder,
                n_share: self.model.n_share,
                n_mono: self.model.n_mono,
                d_model: self.model.block.d_model,
                n_heads: self.model.block.n_heads,
                d_ff: self.model.block.d_ff,
                dropout: self.model.block.dropout,
                n_asr_dec_blocks: self.model.n_asr_dec_blocks,
                n_st_dec_blocks: self.model.n_st_dec_blocks,
                lambda_spec: self.model.lambda_spec,
                lambda_ctc: self.model.lambda_ctc,
                beta: self.model.beta,
                label_smoothing: self.model.label_smoothing,
            },
            train: TrainSection {
                seed: Some(self.seed),
                steps: self.steps,
                batch_size: self.batch_size,
                peak_lr: self.optim.peak_lr,
                warmup_steps: self.optim.warmup_steps,
                beta1: self.optim.beta1,
                beta2: self.optim.beta2,
                eps: self.optim.eps,
                clip_norm: self.optim.clip_norm,
                checkpoint_every: self.checkpoint_every,
            },
            decode: DecodeSection {
                beam: self.decode.beam,
                gamma_lm: self.decode.gamma_lm,
                gamma_st: self.decode.gamma_st,
                st_direction: self.decode.st_direction.map(|d| d.name().to_string()),
                lm_order: self.lm_order,
                use_lm: self.use_lm,
            },
        }
    }

    pub fn echo_toml(&self) -> Result<String> {
        toml::to_string_pretty(&self.to_raw()).context("serializing config echo")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seeded(raw: &mut RawConfig) {
        raw.train.seed = Some(7);
        raw.out_dir = Some("runs/x".to_string());
    }

    #[test]
    fn defaults_resolve_once_seeded() {
        let mut raw = RawConfig::default();
        assert!(raw.resolve().is_err(), "missing out_dir and seed must fail");
        seeded(&mut raw);
        let rc = raw.resolve().unwrap();
        assert_eq!(rc.seed, 7);
        assert_eq!(rc.model.variant, Variant::LaeStMoeAed);
        assert_eq!(rc.model.feat_dim, rc.corpus.feat_dim);
        assert_eq!(rc.model.vocab.size(), 6 + rc.corpus.n_man + rc.corpus.n_en);
    }

    #[test]
    fn echo_round_trips_exactly() {
        let mut raw = RawConfig::parse_str(
            "out_dir = \"runs/demo\"\n\
             [corpus]\nn_train = 12\nnoise_sigma = 0.05\n\
             [model]\nvariant = \"lae_st_moe_ctc\"\nbeta = 0.8\n\
             [train]\nseed = 99\nsteps = 17\n\
             [decode]\nbeam = 4\nst_direction = \"man2en\"\n",
        )
        .unwrap();
        seeded(&mut raw);
        raw.train.seed = Some(99);
        raw.out_dir = Some("runs/demo".to_string());
        let rc = raw.resolve().unwrap();
        let echo = rc.echo_toml().unwrap();
        // The echo is directory-agnostic, so resolving it needs an out dir.
        let mut raw2 = RawConfig::parse_str(&echo).unwrap();
        assert!(raw2.out_dir.is_none(), "echo must not pin a directory");
        raw2.out_dir = Some("runs/elsewhere".to_string());
        let rc2 = raw2.resolve().unwrap();
        assert_eq!(rc2.to_raw(), rc.to_raw());
        // A second echo is byte-identical: the canonical form is a fixpoint.
        assert_eq!(rc2.echo_toml().unwrap(), echo);
    }

    #[test]
    fn overrides_take_precedence() {
        let mut raw = RawConfig::default();
        seeded(&mut raw);
        raw.apply(&Overrides {
            seed: Some(123),
            beam: Some(3),
            beta: Some(0.0),
            variant: Some("vanilla_ctc".to_string()),
            out: Some("elsewhere".to_string()),
            steps: Some(5),
        });
        let mut rc = raw.resolve();
        // vanilla needs an undivided encoder; fix the depths and retry.
        if rc.is_err() {
            raw.model.n_share = raw.model.n_encoder;
            raw.model.n_mono = 0;
            rc = raw.resolve();
        }
        let rc = rc.unwrap();
        assert_eq!(rc.seed, 123);
        assert_eq!(rc.decode.beam, 3);
        assert_eq!(rc.model.beta, 0.0);
        assert_eq!(rc.model.variant, Variant::VanillaCtc);
        assert_eq!(rc.out_dir, PathBuf::from("elsewhere"));
        assert_eq!(rc.steps, 5);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RawConfig::parse_str("[train]\nsteps = 3\nspeed = 9\n");
        assert!(err.is_err());
    }

    #[test]
    fn bad_values_name_the_offender() {
        let mut raw = RawConfig::default();
        seeded(&mut raw);
        raw.model.variant = "warp_drive".to_string();
        let msg = format!("{:#}", raw.resolve().unwrap_err());
        assert!(msg.contains("warp_drive"), "{msg}");

        let mut raw = RawConfig::default();
        seeded(&mut raw);
        raw.train.batch_size = 0;
        let msg = format!("{:#}", raw.resolve().unwrap_err());
        assert!(msg.contains("batch_size"), "{msg}");
    }
}
