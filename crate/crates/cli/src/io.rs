//! File formats: corpus manifests, vocabulary listings, binary
//! checkpoints, and training loss logs.
//!
//! All formats are deterministic byte-for-byte: writing the same data
//! twice yields identical files, floats are printed with the shortest
//! representation that parses back to the same bits, and binary payloads
//! are little-endian with fixed field order. `docs/formats.md` specifies
//! every format byte-exactly.

use anyhow::{anyhow, bail, Context, Result};
use laest_core::corpus::{featurize, CorpusSpec, Lang, Utterance, VocabSpec};
use laest_core::model::{AdamState, LossBreakdown, Model, ModelConfig, StepReport};
use laest_core::numerics::{Parameters, Tensor};
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::config::RawConfig;

// ---------------------------------------------------------------------------
// Well-known file names inside a run directory.
// ---------------------------------------------------------------------------

/// Conventional locations of the generated data inside an output
/// directory.
#[derive(Clone, Debug)]
pub struct DataPaths {
    pub vocab: PathBuf,
    pub train: PathBuf,
    pub eval_cs: PathBuf,
    pub eval_man: PathBuf,
    pub eval_en: PathBuf,
}

impl DataPaths {
    pub fn new(dir: &Path) -> Self {
        DataPaths {
            vocab: dir.join("vocab.tsv"),
            train: dir.join("train.manifest"),
            eval_cs: dir.join("eval_cs.manifest"),
            eval_man: dir.join("eval_man.manifest"),
            eval_en: dir.join("eval_en.manifest"),
        }
    }

    pub fn all(&self) -> [(&'static str, &Path); 5] {
        [
            ("vocab", &self.vocab),
            ("train", &self.train),
            ("eval_cs", &self.eval_cs),
            ("eval_man", &self.eval_man),
            ("eval_en", &self.eval_en),
        ]
    }

    /// The three held-out sets, in reporting order.
    pub fn eval_sets(&self) -> [(&'static str, &Path); 3] {
        [
            ("eval_cs", &self.eval_cs),
            ("eval_man", &self.eval_man),
            ("eval_en", &self.eval_en),
        ]
    }
}

/// Formats a float with the shortest decimal form that parses back to
/// the same bits (Rust's default float `Display`).
pub fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

// ---------------------------------------------------------------------------
// Manifests.
// ---------------------------------------------------------------------------

const MANIFEST_HEADER: &str = "#laest-manifest v1";

fn fmt_tokens(tokens: &[usize]) -> String {
    tokens.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" ")
}

fn parse_tokens(field: &str) -> Result<Vec<usize>> {
    if field.is_empty() {
        return Ok(Vec::new());
    }
    field
        .split(' ')
        .map(|t| t.parse::<usize>().map_err(|_| anyhow!("bad token id {t:?}")))
        .collect()
}

/// Writes a manifest: a header naming the corpus spec (so features can be
/// regenerated) followed by one tab-separated record per utterance.
pub fn write_manifest(path: &Path, spec: &CorpusSpec, utts: &[Utterance]) -> Result<()> {
    let mut w = BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    );
    writeln!(w, "{MANIFEST_HEADER}")?;
    writeln!(
        w,
        "#corpus n_train={} n_eval={} cs_fraction={} l_min={} l_max={} switch_prob={} \
         frames_per_token={} feat_dim={} noise_sigma={} seed={} n_man={} n_en={}",
        spec.n_train,
        spec.n_eval,
        fmt_f64(spec.cs_fraction),
        spec.l_min,
        spec.l_max,
        fmt_f64(spec.switch_prob),
        spec.frames_per_token,
        spec.feat_dim,
        fmt_f64(spec.noise_sigma),
        spec.seed,
        spec.n_man,
        spec.n_en,
    )?;
    for u in utts {
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            u.id,
            u.features.rows(),
            u.utt_seed,
            fmt_tokens(&u.y_cs),
            fmt_tokens(&u.y_man_spec),
            fmt_tokens(&u.y_en_spec),
            fmt_tokens(&u.y_man),
            fmt_tokens(&u.y_en),
        )?;
    }
    w.flush()?;
    Ok(())
}

fn parse_corpus_line(line: &str) -> Result<CorpusSpec> {
    let body = line
        .strip_prefix("#corpus ")
        .ok_or_else(|| anyhow!("second manifest line must start with \"#corpus \""))?;
    let mut spec = CorpusSpec::default();
    let mut seen: Vec<&str> = Vec::new();
    for kv in body.split(' ') {
        let (k, v) = kv.split_once('=').ok_or_else(|| anyhow!("bad corpus field {kv:?}"))?;
        let bad = || anyhow!("bad value for corpus field {k}: {v:?}");
        match k {
            "n_train" => spec.n_train = v.parse().map_err(|_| bad())?,
            "n_eval" => spec.n_eval = v.parse().map_err(|_| bad())?,
            "cs_fraction" => spec.cs_fraction = v.parse().map_err(|_| bad())?,
            "l_min" => spec.l_min = v.parse().map_err(|_| bad())?,
            "l_max" => spec.l_max = v.parse().map_err(|_| bad())?,
            "switch_prob" => spec.switch_prob = v.parse().map_err(|_| bad())?,
            "frames_per_token" => spec.frames_per_token = v.parse().map_err(|_| bad())?,
            "feat_dim" => spec.feat_dim = v.parse().map_err(|_| bad())?,
            "noise_sigma" => spec.noise_sigma = v.parse().map_err(|_| bad())?,
            "seed" => spec.seed = v.parse().map_err(|_| bad())?,
            "n_man" => spec.n_man = v.parse().map_err(|_| bad())?,
            "n_en" => spec.n_en = v.parse().map_err(|_| bad())?,
            other => bail!("unknown corpus field {other:?}"),
        }
        seen.push(k);
    }
    if seen.len() != 12 {
        bail!("corpus line must carry exactly the 12 spec fields, found {}", seen.len());
    }
    Ok(spec)
}

/// Reads a manifest back. Features are regenerated from the corpus spec
/// in the header and each record's seed, then checked against the
/// recorded frame count; transcripts come from the record itself.
pub fn read_manifest(path: &Path) -> Result<(CorpusSpec, Vec<Utterance>)> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read manifest {}", path.display()))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(l) if l == MANIFEST_HEADER => {}
        other => bail!(
            "{} is not a manifest: first line is {:?}, expected {:?}",
            path.display(),
            other.unwrap_or(""),
            MANIFEST_HEADER
        ),
    }
    let spec = parse_corpus_line(
        lines.next().ok_or_else(|| anyhow!("{}: missing corpus line", path.display()))?,
    )
    .with_context(|| format!("in {}", path.display()))?;
    let vocab = spec.vocab().map_err(|e| anyhow!("{}: {e}", path.display()))?;

    let mut utts = Vec::new();
    for (ln, line) in lines.enumerate() {
        let n = ln + 3; // 1-based, after the two header lines
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 8 {
            bail!("{} line {n}: expected 8 tab-separated fields, found {}", path.display(), f.len());
        }
        let parse_err = |what: &str| format!("{} line {n}: {what}", path.display());
        let n_frames: usize = f[1].parse().with_context(|| parse_err("bad frame count"))?;
        let utt_seed: u64 = f[2].parse().with_context(|| parse_err("bad utterance seed"))?;
        let y_cs = parse_tokens(f[3]).with_context(|| parse_err("in transcript"))?;
        let y_man_spec = parse_tokens(f[4]).with_context(|| parse_err("in Mandarin view"))?;
        let y_en_spec = parse_tokens(f[5]).with_context(|| parse_err("in English view"))?;
        let y_man = parse_tokens(f[6]).with_context(|| parse_err("in Mandarin translation"))?;
        let y_en = parse_tokens(f[7]).with_context(|| parse_err("in English translation"))?;
        let tags = y_cs
            .iter()
            .map(|&t| {
                vocab.lang_of(t).ok_or_else(|| {
                    anyhow!("{} line {n}: transcript token {t} has no language", path.display())
                })
            })
            .collect::<Result<Vec<Lang>>>()?;
        let features = featurize(&y_cs, &spec, utt_seed)
            .map_err(|e| anyhow!("{} line {n}: {e}", path.display()))?;
        if features.rows() != n_frames {
            bail!(
                "{} line {n}: recorded {n_frames} frames but the spec regenerates {}",
                path.display(),
                features.rows()
            );
        }
        utts.push(Utterance {
            id: f[0].to_string(),
            utt_seed,
            features,
            y_cs,
            y_man_spec,
            y_en_spec,
            y_man,
            y_en,
            tags,
        });
    }
    Ok((spec, utts))
}

// ---------------------------------------------------------------------------
// Vocabulary listings.
// ---------------------------------------------------------------------------

const VOCAB_HEADER_PREFIX: &str = "#laest-vocab v1";

pub fn write_vocab(path: &Path, vocab: &VocabSpec) -> Result<()> {
    let mut w = BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    );
    writeln!(
        w,
        "{VOCAB_HEADER_PREFIX} n_man={} n_en={}",
        vocab.man_tokens.len(),
        vocab.en_tokens.len()
    )?;
    for (id, surface) in vocab.surfaces() {
        writeln!(w, "{id}\t{surface}")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a vocabulary listing and checks it is exactly the standard
/// layout for its advertised sizes (the listing is a human-readable
/// mirror, not an independent source of truth).
pub fn read_vocab(path: &Path) -> Result<VocabSpec> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read vocabulary {}", path.display()))?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or("");
    let rest = header
        .strip_prefix(VOCAB_HEADER_PREFIX)
        .ok_or_else(|| anyhow!("{} is not a vocabulary listing", path.display()))?;
    let mut n_man = None;
    let mut n_en = None;
    for kv in rest.split_whitespace() {
        match kv.split_once('=') {
            Some(("n_man", v)) => n_man = Some(v.parse::<usize>()?),
            Some(("n_en", v)) => n_en = Some(v.parse::<usize>()?),
            _ => bail!("{}: bad vocabulary header field {kv:?}", path.display()),
        }
    }
    let (n_man, n_en) = (
        n_man.ok_or_else(|| anyhow!("{}: header lacks n_man", path.display()))?,
        n_en.ok_or_else(|| anyhow!("{}: header lacks n_en", path.display()))?,
    );
    let vocab = VocabSpec::toy(n_man, n_en).map_err(|e| anyhow!("{}: {e}", path.display()))?;
    let mut listed = 0usize;
    for line in lines {
        if line.is_empty() {
            continue;
        }
        let (id, surface) =
            line.split_once('\t').ok_or_else(|| anyhow!("{}: bad line {line:?}", path.display()))?;
        let id: usize = id.parse().with_context(|| format!("{}: bad id in {line:?}", path.display()))?;
        if vocab.surface(id) != surface {
            bail!(
                "{}: id {id} is listed as {surface:?} but the standard layout says {:?}",
                path.display(),
                vocab.surface(id)
            );
        }
        listed += 1;
    }
    if listed != vocab.size() {
        bail!("{}: listed {listed} ids, expected {}", path.display(), vocab.size());
    }
    Ok(vocab)
}

// ---------------------------------------------------------------------------
// Checkpoints.
// ---------------------------------------------------------------------------

const CKPT_MAGIC: &[u8; 8] = b"LAESTCK1";
const CKPT_VERSION: u32 = 1;

fn w_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}
fn w_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}
fn r_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
fn r_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn w_f32s(w: &mut impl Write, vals: &[f32]) -> Result<()> {
    let mut buf = Vec::with_capacity(vals.len() * 4);
    for v in vals {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn r_f32s(r: &mut impl Read, n: usize) -> Result<Vec<f32>> {
    let mut buf = vec![0u8; n * 4];
    r.read_exact(&mut buf)?;
    Ok(buf.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

fn w_str(w: &mut impl Write, s: &str) -> Result<()> {
    w_u64(w, s.len() as u64)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn r_str(r: &mut impl Read, what: &str) -> Result<String> {
    let len = r_u64(r)? as usize;
    if len > 1 << 30 {
        bail!("implausible {what} length {len}");
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).with_context(|| format!("{what} is not UTF-8"))
}

fn w_tensor(w: &mut impl Write, t: &Tensor<f32>) -> Result<()> {
    let shape = t.shape();
    if shape.len() > u8::MAX as usize {
        bail!("tensor rank {} too large for the format", shape.len());
    }
    w.write_all(&[shape.len() as u8])?;
    for &d in shape {
        w_u64(w, d as u64)?;
    }
    w_f32s(w, t.data())
}

fn r_shape(r: &mut impl Read) -> Result<Vec<usize>> {
    let mut rank = [0u8; 1];
    r.read_exact(&mut rank)?;
    let mut shape = Vec::with_capacity(rank[0] as usize);
    for _ in 0..rank[0] {
        let d = r_u64(r)? as usize;
        if d > 1 << 30 {
            bail!("implausible tensor dimension {d}");
        }
        shape.push(d);
    }
    Ok(shape)
}

/// Writes a versioned checkpoint: magic, version, the full run-config
/// echo, the optimizer step, every named parameter (name, shape,
/// little-endian 32-bit values, in model order), then optionally the
/// optimizer's two moment arrays per parameter in the same order.
pub fn write_checkpoint(
    path: &Path,
    config_echo: &str,
    model: &Model<f32>,
    opt: Option<&AdamState<f32>>,
) -> Result<()> {
    let mut w = BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    );
    w.write_all(CKPT_MAGIC)?;
    w_u32(&mut w, CKPT_VERSION)?;
    w_str(&mut w, config_echo)?;
    w_u64(&mut w, opt.map_or(0, |o| o.step))?;
    let params: &Parameters<f32> = &model.params;
    w_u64(&mut w, params.len() as u64)?;
    for i in 0..params.len() {
        w_str(&mut w, params.name(i))?;
        w_tensor(&mut w, params.tensor(i))?;
    }
    match opt {
        None => w.write_all(&[0u8])?,
        Some(o) => {
            w.write_all(&[1u8])?;
            if o.m.len() != params.len() || o.v.len() != params.len() {
                bail!("optimizer state does not match the parameter tree");
            }
            for i in 0..params.len() {
                w_f32s(&mut w, o.m[i].data())?;
                w_f32s(&mut w, o.v[i].data())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Everything a checkpoint holds.
#[derive(Debug)]
pub struct Checkpoint {
    /// The run-config echo embedded at save time (canonical TOML).
    pub config_echo: String,
    pub model: Model<f32>,
    pub opt: Option<AdamState<f32>>,
    pub step: u64,
}

/// Reads a checkpoint, rebuilding the model from the embedded config and
/// overwriting its parameters with the stored arrays. Parameter names
/// and shapes must match the architecture exactly.
pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut r = std::io::BufReader::new(
        File::open(path).with_context(|| format!("cannot open checkpoint {}", path.display()))?,
    );
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).with_context(|| format!("{} is truncated", path.display()))?;
    if &magic != CKPT_MAGIC {
        bail!("{} is not a checkpoint (bad magic)", path.display());
    }
    let version = r_u32(&mut r)?;
    if version != CKPT_VERSION {
        bail!("{}: unsupported checkpoint version {version}", path.display());
    }
    let config_echo = r_str(&mut r, "config echo")?;
    let step = r_u64(&mut r)?;
    // The echo is directory-agnostic; resolving it only to recover the
    // model section needs a placeholder output directory.
    let cfg: ModelConfig = RawConfig::parse_str(&config_echo)
        .and_then(|mut raw| {
            raw.out_dir.get_or_insert_with(|| ".".to_string());
            raw.resolve()
        })
        .with_context(|| format!("{}: embedded config does not resolve", path.display()))?
        .model;

    let mut model: Model<f32> = laest_core::model::build_model(&cfg, 0)
        .map_err(|e| anyhow!("{}: rebuilding the architecture: {e}", path.display()))?;
    let n = r_u64(&mut r)? as usize;
    if n != model.params.len() {
        bail!(
            "{}: stores {n} parameters but the architecture has {}",
            path.display(),
            model.params.len()
        );
    }
    for i in 0..n {
        let name = r_str(&mut r, "parameter name")?;
        if name != model.params.name(i) {
            bail!(
                "{}: parameter {i} is {name:?}, expected {:?}",
                path.display(),
                model.params.name(i)
            );
        }
        let shape = r_shape(&mut r)?;
        if shape != model.params.tensor(i).shape() {
            bail!(
                "{}: parameter {name:?} has shape {shape:?}, expected {:?}",
                path.display(),
                model.params.tensor(i).shape()
            );
        }
        let vals = r_f32s(&mut r, shape.iter().product())
            .with_context(|| format!("{}: values of {name:?}", path.display()))?;
        model.params.tensor_mut(i).data_mut().copy_from_slice(&vals);
    }
    let mut flag = [0u8; 1];
    r.read_exact(&mut flag)?;
    let opt = match flag[0] {
        0 => None,
        1 => {
            let mut o = AdamState::new(&model.params);
            o.step = step;
            for i in 0..n {
                let len = model.params.tensor(i).len();
                o.m[i].data_mut().copy_from_slice(&r_f32s(&mut r, len)?);
                o.v[i].data_mut().copy_from_slice(&r_f32s(&mut r, len)?);
            }
            Some(o)
        }
        other => bail!("{}: bad optimizer flag {other}", path.display()),
    };
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        bail!("{}: trailing bytes after the checkpoint payload", path.display());
    }
    Ok(Checkpoint { config_echo, model, opt, step })
}

// ---------------------------------------------------------------------------
// Loss logs.
// ---------------------------------------------------------------------------

/// Column order of the loss log. One row per optimizer step; absent loss
/// components print as `-`; skip reasons come last (semicolon-joined) so
/// the numeric columns stay aligned.
pub const LOSS_LOG_HEADER: &str = "step\tlr\tgrad_norm\tclipped\tkept\tl_man_ctc\tl_en_ctc\t\
                                   l_spec\tl_global_ctc\tl_global_att\tl_global_decoder\tl_asr\t\
                                   l_st_man2en\tl_st_en2man\tl_st\tl_final\tskipped";

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_else(|| "-".to_string())
}

/// Incremental writer for the per-step training log.
pub struct LossLog {
    w: BufWriter<File>,
}

impl LossLog {
    pub fn create(path: &Path) -> Result<LossLog> {
        let mut w = BufWriter::new(
            File::create(path).with_context(|| format!("creating {}", path.display()))?,
        );
        writeln!(w, "{LOSS_LOG_HEADER}")?;
        Ok(LossLog { w })
    }

    pub fn log(&mut self, r: &StepReport) -> Result<()> {
        let l = &r.losses;
        let skipped = r.skipped.join("; ").replace(['\t', '\n'], " ");
        writeln!(
            self.w,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.step,
            fmt_f64(r.lr),
            fmt_f64(r.grad_norm),
            r.clipped,
            r.kept,
            fmt_opt(l.l_man_ctc),
            fmt_opt(l.l_en_ctc),
            fmt_opt(l.l_spec),
            fmt_opt(l.l_global_ctc),
            fmt_opt(l.l_global_att),
            fmt_opt(l.l_global_decoder),
            fmt_opt(l.l_asr),
            fmt_opt(l.l_st_man2en),
            fmt_opt(l.l_st_en2man),
            fmt_opt(l.l_st),
            fmt_opt(l.l_final),
            skipped,
        )?;
        // Keep the file current so an aborted run still shows its last step.
        self.w.flush()?;
        Ok(())
    }
}

/// A parsed loss-log row.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub lr: f64,
    pub grad_norm: f64,
    pub clipped: bool,
    pub kept: usize,
    pub losses: LossBreakdown,
    pub skipped: String,
}

/// Parses a loss log written by [`LossLog`]. Floats round-trip bitwise.
pub fn parse_loss_log(text: &str) -> Result<Vec<LogRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == LOSS_LOG_HEADER => {}
        other => bail!("not a loss log: header is {:?}", other.unwrap_or("")),
    }
    let opt = |s: &str| -> Result<Option<f64>> {
        if s == "-" {
            Ok(None)
        } else {
            Ok(Some(s.parse::<f64>().map_err(|_| anyhow!("bad float {s:?}"))?))
        }
    };
    let mut rows = Vec::new();
    for (ln, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 17 {
            bail!("loss log line {}: expected 17 fields, found {}", ln + 2, f.len());
        }
        rows.push(LogRow {
            step: f[0].parse()?,
            lr: f[1].parse()?,
            grad_norm: f[2].parse()?,
            clipped: f[3].parse()?,
            kept: f[4].parse()?,
            losses: LossBreakdown {
                l_man_ctc: opt(f[5])?,
                l_en_ctc: opt(f[6])?,
                l_spec: opt(f[7])?,
                l_global_ctc: opt(f[8])?,
                l_global_att: opt(f[9])?,
                l_global_decoder: opt(f[10])?,
                l_asr: opt(f[11])?,
                l_st_man2en: opt(f[12])?,
                l_st_en2man: opt(f[13])?,
                l_st: opt(f[14])?,
                l_final: opt(f[15])?,
            },
            skipped: f[16].to_string(),
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use laest_core::corpus::gen_corpus;
    use laest_core::model::build_model;

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().expect("temp dir")
    }

    #[test]
    fn manifest_round_trips_bitwise() {
        let dir = tmp();
        let spec = CorpusSpec { n_train: 6, n_eval: 3, ..CorpusSpec::default() };
        let corpus = gen_corpus(&spec).unwrap();
        let path = dir.path().join("train.manifest");
        write_manifest(&path, &spec, &corpus.train).unwrap();
        let (spec2, utts) = read_manifest(&path).unwrap();
        assert_eq!(spec2, spec);
        assert_eq!(utts, corpus.train);

        // Writing what was read reproduces the file byte for byte.
        let path2 = dir.path().join("again.manifest");
        write_manifest(&path2, &spec2, &utts).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn manifest_rejects_tampered_frame_counts() {
        let dir = tmp();
        let spec = CorpusSpec { n_train: 2, n_eval: 2, ..CorpusSpec::default() };
        let corpus = gen_corpus(&spec).unwrap();
        let path = dir.path().join("m");
        write_manifest(&path, &spec, &corpus.train).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let utt = &corpus.train[0];
        let from = format!("{}\t{}", utt.id, utt.features.rows());
        let tampered = text.replace(&from, &format!("{}\t{}", utt.id, utt.features.rows() + 1));
        assert_ne!(text, tampered);
        std::fs::write(&path, tampered).unwrap();
        let err = read_manifest(&path).unwrap_err().to_string();
        assert!(err.contains("frames"), "{err}");
    }

    #[test]
    fn empty_manifest_is_valid() {
        let dir = tmp();
        let spec = CorpusSpec::default();
        let path = dir.path().join("empty.manifest");
        write_manifest(&path, &spec, &[]).unwrap();
        let (spec2, utts) = read_manifest(&path).unwrap();
        assert_eq!(spec2, spec);
        assert!(utts.is_empty());
    }

    #[test]
    fn vocab_round_trips_and_rejects_mismatches() {
        let dir = tmp();
        let vocab = VocabSpec::toy(5, 5).unwrap();
        let path = dir.path().join("vocab.tsv");
        write_vocab(&path, &vocab).unwrap();
        let back = read_vocab(&path).unwrap();
        assert_eq!(back, vocab);

        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, text.replace("m3", "zz")).unwrap();
        assert!(read_vocab(&path).is_err());
    }

    #[test]
    fn checkpoint_round_trips_bitwise() {
        let dir = tmp();
        let mut raw = RawConfig {
            out_dir: Some(dir.path().to_string_lossy().into_owned()),
            ..RawConfig::default()
        };
        raw.train.seed = Some(3);
        raw.corpus.n_man = 4;
        raw.corpus.n_en = 4;
        raw.model.d_model = 8;
        raw.model.n_heads = 2;
        raw.model.d_ff = 12;
        raw.model.n_encoder = 3;
        raw.model.n_share = 1;
        raw.model.n_mono = 1;
        raw.model.n_asr_dec_blocks = 1;
        raw.model.n_st_dec_blocks = 1;
        let rc = raw.resolve().unwrap();
        let echo = rc.echo_toml().unwrap();
        let model: Model<f32> = build_model(&rc.model, 11).unwrap();
        let mut opt = AdamState::new(&model.params);
        opt.step = 42;
        for t in opt.m.iter_mut().chain(opt.v.iter_mut()) {
            for (i, x) in t.data_mut().iter_mut().enumerate() {
                *x = (i as f32) * 0.25 + 1.0;
            }
        }

        let path = dir.path().join("model.ckpt");
        write_checkpoint(&path, &echo, &model, Some(&opt)).unwrap();
        let back = read_checkpoint(&path).unwrap();
        assert_eq!(back.config_echo, echo);
        assert_eq!(back.step, 42);
        assert_eq!(back.model.cfg, rc.model);
        for i in 0..model.params.len() {
            assert_eq!(back.model.params.name(i), model.params.name(i));
            assert_eq!(back.model.params.tensor(i), model.params.tensor(i));
        }
        let bopt = back.opt.expect("optimizer stored");
        assert_eq!(bopt.step, 42);
        assert_eq!(bopt.m, opt.m);
        assert_eq!(bopt.v, opt.v);

        // Without optimizer state.
        let slim = dir.path().join("slim.ckpt");
        write_checkpoint(&slim, &echo, &model, None).unwrap();
        assert!(read_checkpoint(&slim).unwrap().opt.is_none());
    }

    #[test]
    fn checkpoint_rejects_corruption() {
        let dir = tmp();
        let mut raw = RawConfig { out_dir: Some("x".to_string()), ..RawConfig::default() };
        raw.train.seed = Some(3);
        raw.corpus.n_man = 3;
        raw.corpus.n_en = 3;
        raw.model.variant = "vanilla_ctc".to_string();
        raw.model.d_model = 8;
        raw.model.n_heads = 2;
        raw.model.d_ff = 12;
        raw.model.n_encoder = 2;
        raw.model.n_share = 2;
        raw.model.n_mono = 0;
        let rc = raw.resolve().unwrap();
        let model: Model<f32> = build_model(&rc.model, 1).unwrap();
        let path = dir.path().join("c");
        write_checkpoint(&path, &rc.echo_toml().unwrap(), &model, None).unwrap();

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] ^= 0xff;
        std::fs::write(&path, &bytes).unwrap();
        assert!(read_checkpoint(&path).unwrap_err().to_string().contains("magic"));

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] ^= 0xff; // restore magic
        bytes.push(0); // trailing garbage
        std::fs::write(&path, &bytes).unwrap();
        assert!(read_checkpoint(&path).unwrap_err().to_string().contains("trailing"));

        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
        assert!(read_checkpoint(&path).is_err());
    }

    #[test]
    fn loss_log_round_trips() {
        let dir = tmp();
        let path = dir.path().join("loss.tsv");
        let rows = vec![
            StepReport {
                step: 1,
                lr: 1e-3 / 3.0,
                grad_norm: 17.25,
                clipped: true,
                kept: 8,
                skipped: vec![],
                losses: LossBreakdown {
                    l_man_ctc: Some(3.5),
                    l_en_ctc: Some(2.25),
                    l_spec: Some(2.875),
                    l_global_ctc: Some(4.0),
                    l_global_att: None,
                    l_global_decoder: Some(4.0),
                    l_asr: Some(4.0 + 0.3 * 2.875),
                    l_st_man2en: None,
                    l_st_en2man: None,
                    l_st: None,
                    l_final: Some(4.0 + 0.3 * 2.875),
                },
            },
            StepReport {
                step: 2,
                lr: 0.1 + 0.2, // deliberately not representable exactly
                grad_norm: f64::from_bits(0x3ff5_5555_5555_5555),
                clipped: false,
                kept: 7,
                skipped: vec!["utt x: view longer than frames".to_string()],
                losses: LossBreakdown::default(),
            },
        ];
        let mut log = LossLog::create(&path).unwrap();
        for r in &rows {
            log.log(r).unwrap();
        }
        let parsed = parse_loss_log(&std::fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(parsed.len(), 2);
        for (p, r) in parsed.iter().zip(&rows) {
            assert_eq!(p.step, r.step);
            assert_eq!(p.lr.to_bits(), r.lr.to_bits(), "lr must round-trip bitwise");
            assert_eq!(p.grad_norm.to_bits(), r.grad_norm.to_bits());
            assert_eq!(p.clipped, r.clipped);
            assert_eq!(p.kept, r.kept);
            assert_eq!(p.losses, r.losses);
        }
        assert_eq!(parsed[1].skipped, "utt x: view longer than frames");
    }
}
