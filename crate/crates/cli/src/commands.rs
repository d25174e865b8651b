//! The five subcommands. Everything here is deterministic given the
//! resolved configuration: corpus generation, batching, dropout, and
//! decoding all draw from named counter-based streams, so re-running a
//! command with the same configuration reproduces every output file
//! byte for byte.

use anyhow::{anyhow, bail, Context, Result};
use laest_core::corpus::{gen_corpus, CorpusSpec, Utterance, VocabSpec};
use laest_core::ctc::NBestEntry;
use laest_core::decode::{
    decode_asr, decode_st, ngram_train, rescore_with_st, DecodeParams, NGramLM, StDirection,
};
use laest_core::metrics::{bleu, edit_distance, mix_error_rate, ErrorCounts, MixedErrorBreakdown};
use laest_core::model::{build_model, train_step, AdamState, Model, Variant};
use laest_core::numerics::Stream;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::config::RunConfig;
use crate::io::{
    read_checkpoint, read_manifest, read_vocab, write_checkpoint, write_manifest, write_vocab,
    Checkpoint, DataPaths, LossLog,
};
use crate::report::{nbest_line, version_stamp, EvalReport, RecognitionRow, Table, TranslationRow};

// ---------------------------------------------------------------------------
// gen
// ---------------------------------------------------------------------------

/// Generates the corpus and writes the vocabulary and the four manifests
/// into the output directory. Refuses to overwrite existing files unless
/// `force` is set.
pub fn cmd_gen(rc: &RunConfig, force: bool) -> Result<()> {
    fs::create_dir_all(&rc.out_dir)
        .with_context(|| format!("creating {}", rc.out_dir.display()))?;
    let paths = DataPaths::new(&rc.out_dir);
    if !force {
        let existing: Vec<String> = paths
            .all()
            .iter()
            .filter(|(_, p)| p.exists())
            .map(|(_, p)| p.display().to_string())
            .collect();
        if !existing.is_empty() {
            bail!(
                "refusing to overwrite existing files (pass --force): {}",
                existing.join(", ")
            );
        }
    }

    let corpus = gen_corpus(&rc.corpus).map_err(|e| anyhow!("{e}"))?;
    write_vocab(&paths.vocab, &corpus.vocab)?;
    println!("wrote {} ({} entries)", paths.vocab.display(), corpus.vocab.size());

    let eval_cs: &[Utterance] = if rc.corpus.cs_fraction == 0.0 {
        eprintln!(
            "warning: cs_fraction = 0, so no training utterance code-switches; \
             writing an empty code-switched eval manifest"
        );
        &[]
    } else {
        &corpus.eval_cs
    };
    let sets: [(&Path, &[Utterance]); 4] = [
        (&paths.train, &corpus.train),
        (&paths.eval_cs, eval_cs),
        (&paths.eval_man, &corpus.eval_man),
        (&paths.eval_en, &corpus.eval_en),
    ];
    for (path, utts) in sets {
        write_manifest(path, &rc.corpus, utts)?;
        println!("wrote {} ({} utterances)", path.display(), utts.len());
    }
    fs::write(rc.out_dir.join("run_config.toml"), rc.echo_toml()?)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

fn shuffled(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut s = Stream::indexed(seed, "batch-order", epoch);
    for i in (1..n).rev() {
        let j = s.uniform(0.0, (i + 1) as f64) as usize;
        order.swap(i, j.min(i));
    }
    order
}

/// Checks that a manifest's corpus spec is the one the run was configured
/// with, so a run directory can never silently mix provenances.
fn check_spec(path: &Path, found: &CorpusSpec, expected: &CorpusSpec) -> Result<()> {
    if found != expected {
        bail!(
            "{} was generated with a different corpus spec than the configuration; \
             re-run gen or fix the config",
            path.display()
        );
    }
    Ok(())
}

/// Trains a model on `data`, writing the loss log, periodic checkpoints,
/// and the final checkpoint into `run_dir`. Returns the trained model.
fn train_run(
    rc: &RunConfig,
    data: &DataPaths,
    run_dir: &Path,
    asr_only: bool,
    quiet: bool,
) -> Result<Model<f32>> {
    fs::create_dir_all(run_dir).with_context(|| format!("creating {}", run_dir.display()))?;
    let (mspec, utts) = read_manifest(&data.train)?;
    check_spec(&data.train, &mspec, &rc.corpus)?;
    if utts.is_empty() {
        bail!("{} holds no utterances; nothing to train on", data.train.display());
    }

    let echo = rc.echo_toml()?;
    fs::write(run_dir.join("run_config.toml"), &echo)?;

    let mut model: Model<f32> =
        build_model(&rc.model, rc.seed).map_err(|e| anyhow!("building the model: {e}"))?;
    let mut opt = AdamState::new(&model.params);
    let mut dropout = Stream::new(rc.seed, "dropout");
    let want_st = rc.model.want_st() && !asr_only;

    let mut log = LossLog::create(&run_dir.join("loss_log.tsv"))?;
    let mut epoch = 0u64;
    let mut order = shuffled(utts.len(), rc.seed, epoch);
    let mut pos = 0usize;
    let progress_every = (rc.steps / 10).max(1);

    for step in 1..=rc.steps {
        if pos >= order.len() {
            epoch += 1;
            order = shuffled(utts.len(), rc.seed, epoch);
            pos = 0;
        }
        let end = (pos + rc.batch_size).min(order.len());
        let batch: Vec<&Utterance> = order[pos..end].iter().map(|&i| &utts[i]).collect();
        pos = end;

        let report = train_step(&mut model, &rc.optim, &mut opt, &batch, &mut dropout, want_st)
            .map_err(|e| anyhow!("step {step}: {e}"))?;
        log.log(&report)?;
        if !quiet && (step == 1 || step == rc.steps || step % progress_every == 0) {
            println!(
                "step {step}/{} loss {}",
                rc.steps,
                report.losses.l_final.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into())
            );
        }
        if step % rc.checkpoint_every == 0 && step != rc.steps {
            let path = run_dir.join(format!("ckpt-{step:06}.bin"));
            write_checkpoint(&path, &echo, &model, Some(&opt))?;
        }
    }
    let final_path = run_dir.join("final.ckpt");
    write_checkpoint(&final_path, &echo, &model, Some(&opt))?;
    if !quiet {
        println!("wrote {}", final_path.display());
    }
    Ok(model)
}

/// Trains per the configuration. `asr_only` silences the translation
/// decoders regardless of β, which must leave the loss log bitwise
/// identical to a β=0 run of the same model.
pub fn cmd_train(rc: &RunConfig, asr_only: bool) -> Result<()> {
    let data = DataPaths::new(&rc.out_dir);
    train_run(rc, &data, &rc.out_dir, asr_only, false)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

fn vocab_compatible(model_vocab: &VocabSpec, spec: &CorpusSpec, what: &str) -> Result<()> {
    if model_vocab.man_tokens.len() != spec.n_man || model_vocab.en_tokens.len() != spec.n_en {
        bail!(
            "vocabulary mismatch: the checkpoint was trained with {}+{} tokens but {what} \
             uses {}+{}",
            model_vocab.man_tokens.len(),
            model_vocab.en_tokens.len(),
            spec.n_man,
            spec.n_en
        );
    }
    Ok(())
}

fn feat_compatible(model: &Model<f32>, spec: &CorpusSpec, what: &str) -> Result<()> {
    if model.cfg.feat_dim != spec.feat_dim {
        bail!(
            "feature mismatch: the checkpoint expects {}-dimensional features but {what} \
             provides {}",
            model.cfg.feat_dim,
            spec.feat_dim
        );
    }
    Ok(())
}

fn train_lm(rc: &RunConfig, data: &DataPaths, vocab: &VocabSpec) -> Result<Option<NGramLM>> {
    if !rc.use_lm || rc.decode.gamma_lm == 0.0 {
        return Ok(None);
    }
    let (mspec, utts) = read_manifest(&data.train)?;
    vocab_compatible(vocab, &mspec, &data.train.display().to_string())?;
    let seqs: Vec<Vec<usize>> = utts.iter().map(|u| u.y_cs.clone()).collect();
    let lm = ngram_train(&seqs, rc.lm_order, vocab.size(), vocab.unk)
        .map_err(|e| anyhow!("training the language model: {e}"))?;
    Ok(Some(lm))
}

struct SetDecode {
    /// Aggregated recognition errors without rescoring.
    base: MixedErrorBreakdown,
    /// Aggregated errors after rescoring, one per direction in
    /// `StDirection::ALL` order (translation variants only).
    rescored: Option<[MixedErrorBreakdown; 2]>,
    n_utts: usize,
    nbest_lines: Vec<String>,
}

fn decode_set(
    model: &Model<f32>,
    utts: &[Utterance],
    lm: Option<&NGramLM>,
    params: &DecodeParams,
) -> Result<SetDecode> {
    let vocab = &model.cfg.vocab;
    let mut base = MixedErrorBreakdown::default();
    let mut rescored =
        if model.cfg.variant.has_st() { Some([MixedErrorBreakdown::default(), MixedErrorBreakdown::default()]) } else { None };
    let mut nbest_lines = Vec::new();

    for utt in utts {
        let nbest: Vec<NBestEntry<f32>> = decode_asr(model, &utt.features, lm, params)
            .map_err(|e| anyhow!("decoding {}: {e}", utt.id))?;
        if nbest.is_empty() {
            bail!("decoding {} produced no hypotheses", utt.id);
        }
        for (rank, entry) in nbest.iter().enumerate() {
            nbest_lines.push(nbest_line(&utt.id, rank + 1, entry));
        }
        base += mix_error_rate(vocab, &utt.y_cs, &nbest[0].tokens).map_err(|e| anyhow!("{e}"))?;

        if let Some(acc) = rescored.as_mut() {
            for (d, direction) in StDirection::ALL.into_iter().enumerate() {
                let r = rescore_with_st(model, &utt.features, &nbest, direction, params)
                    .map_err(|e| anyhow!("rescoring {}: {e}", utt.id))?;
                acc[d] +=
                    mix_error_rate(vocab, &utt.y_cs, &r[0].entry.tokens).map_err(|e| anyhow!("{e}"))?;
            }
        }
    }
    Ok(SetDecode { base, rescored, n_utts: utts.len(), nbest_lines })
}

/// Corpus-level translation scores, both on the usual 0–100 scales.
struct StScore {
    bleu: f64,
    ter: f64,
}

fn translate_set(
    model: &Model<f32>,
    utts: &[Utterance],
    direction: StDirection,
    beam: usize,
) -> Result<StScore> {
    let mut refs: Vec<Vec<usize>> = Vec::with_capacity(utts.len());
    let mut hyps: Vec<Vec<usize>> = Vec::with_capacity(utts.len());
    let mut edits = ErrorCounts::default();
    for utt in utts {
        let hyp = decode_st(model, &utt.features, direction, beam)
            .map_err(|e| anyhow!("translating {}: {e}", utt.id))?;
        let reference = match direction {
            StDirection::Man2En => &utt.y_en,
            StDirection::En2Man => &utt.y_man,
        };
        edits += edit_distance(reference, &hyp);
        refs.push(reference.clone());
        hyps.push(hyp);
    }
    let bleu_score = bleu(&refs, &hyps, 4).map_err(|e| anyhow!("{e}"))?;
    Ok(StScore { bleu: bleu_score, ter: edits.rate() * 100.0 })
}

/// Decodes every held-out manifest with and without translation
/// rescoring, scores translation on the code-switched set, and writes
/// the report (plus n-best dumps) into the output directory. Reads the
/// checkpoint and manifests, never modifies them.
pub fn cmd_eval(rc: &RunConfig, checkpoint: &Path) -> Result<()> {
    let data = DataPaths::new(&rc.out_dir);
    // Every referenced file must exist before any work starts.
    let mut required: Vec<&Path> = vec![checkpoint, &data.vocab];
    required.extend(data.eval_sets().iter().map(|(_, p)| *p));
    if rc.use_lm && rc.decode.gamma_lm > 0.0 {
        required.push(&data.train);
    }
    let missing: Vec<String> =
        required.iter().filter(|p| !p.exists()).map(|p| p.display().to_string()).collect();
    if !missing.is_empty() {
        bail!("missing inputs: {}", missing.join(", "));
    }

    let Checkpoint { config_echo, model, step, .. } = read_checkpoint(checkpoint)?;
    let listed = read_vocab(&data.vocab)?;
    if listed != model.cfg.vocab {
        bail!(
            "vocabulary mismatch: {} does not list the vocabulary the checkpoint was \
             trained with",
            data.vocab.display()
        );
    }
    let lm = train_lm(rc, &data, &model.cfg.vocab)?;

    let mut report = EvalReport {
        version: version_stamp(),
        checkpoint: checkpoint
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| checkpoint.display().to_string()),
        checkpoint_step: step,
        manifests: Vec::new(),
        recognition: Vec::new(),
        translation: Vec::new(),
        config_echo,
    };
    let params = DecodeParams { st_direction: None, ..rc.decode };

    for (set_name, path) in data.eval_sets() {
        let (mspec, utts) = read_manifest(path)?;
        vocab_compatible(&model.cfg.vocab, &mspec, &path.display().to_string())?;
        feat_compatible(&model, &mspec, &path.display().to_string())?;
        report.manifests.push(
            path.file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| path.display().to_string()),
        );

        let decoded = decode_set(&model, &utts, lm.as_ref(), &params)?;
        fs::write(
            rc.out_dir.join(format!("nbest_{set_name}.txt")),
            decoded.nbest_lines.join("\n") + "\n",
        )?;
        report.recognition.push(RecognitionRow {
            set: set_name.to_string(),
            rescore: "none".to_string(),
            utts: decoded.n_utts,
            counts: decoded.base,
        });
        if let Some(acc) = decoded.rescored {
            for (d, direction) in StDirection::ALL.into_iter().enumerate() {
                report.recognition.push(RecognitionRow {
                    set: set_name.to_string(),
                    rescore: direction.name().to_string(),
                    utts: decoded.n_utts,
                    counts: acc[d],
                });
            }
        }

        if set_name == "eval_cs" && model.cfg.variant.has_st() {
            for direction in StDirection::ALL {
                let score = translate_set(&model, &utts, direction, rc.decode.beam)?;
                report.translation.push(TranslationRow {
                    set: set_name.to_string(),
                    direction: direction.name().to_string(),
                    utts: utts.len(),
                    bleu: score.bleu,
                    ter: score.ter,
                });
            }
        }
    }

    report.write(&rc.out_dir.join("report.txt"), &rc.out_dir.join("report.tsv"))?;
    print!("{}", report.render_text());
    Ok(())
}

// ---------------------------------------------------------------------------
// translate
// ---------------------------------------------------------------------------

/// Translates every utterance of a manifest in one direction and writes
/// `id`, token ids, and surface forms to a tab-separated file; prints
/// corpus BLEU/TER against the manifest's reference translations.
pub fn cmd_translate(
    rc: &RunConfig,
    checkpoint: &Path,
    manifest: &Path,
    direction: StDirection,
) -> Result<()> {
    for p in [checkpoint, manifest] {
        if !p.exists() {
            bail!("missing input: {}", p.display());
        }
    }
    let Checkpoint { model, .. } = read_checkpoint(checkpoint)?;
    let (mspec, utts) = read_manifest(manifest)?;
    vocab_compatible(&model.cfg.vocab, &mspec, &manifest.display().to_string())?;
    feat_compatible(&model, &mspec, &manifest.display().to_string())?;

    fs::create_dir_all(&rc.out_dir)?;
    let out_path = rc.out_dir.join(format!("translations_{}.tsv", direction.name()));
    let mut out = std::io::BufWriter::new(fs::File::create(&out_path)?);
    let vocab = &model.cfg.vocab;
    let mut refs = Vec::new();
    let mut hyps = Vec::new();
    let mut edits = ErrorCounts::default();
    for utt in &utts {
        let hyp = decode_st(&model, &utt.features, direction, rc.decode.beam)
            .map_err(|e| anyhow!("translating {}: {e}", utt.id))?;
        let ids = hyp.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" ");
        let surfaces = hyp.iter().map(|&t| vocab.surface(t)).collect::<Vec<_>>().join(" ");
        writeln!(out, "{}\t{}\t{}", utt.id, ids, surfaces)?;
        let reference = match direction {
            StDirection::Man2En => &utt.y_en,
            StDirection::En2Man => &utt.y_man,
        };
        edits += edit_distance(reference, &hyp);
        refs.push(reference.clone());
        hyps.push(hyp);
    }
    out.flush()?;
    let bleu_score = bleu(&refs, &hyps, 4).map_err(|e| anyhow!("{e}"))?;
    println!(
        "translated {} utterances ({}); BLEU {:.2} TER {:.2}; wrote {}",
        utts.len(),
        direction.name(),
        bleu_score,
        edits.rate() * 100.0,
        out_path.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// ablate
// ---------------------------------------------------------------------------

/// The architecture comparison grid, in reporting order.
const GRID: [Variant; 4] =
    [Variant::VanillaCtc, Variant::LaeCtc, Variant::LaeStCtc, Variant::LaeStMoeCtc];

/// Adapts the configured depths to a grid variant, holding the total
/// encoder depth fixed.
fn grid_model(rc: &RunConfig, variant: Variant) -> Result<RunConfig> {
    let mut out = rc.clone();
    out.model.variant = variant;
    let e = rc.model.n_encoder;
    let m = rc.model.n_mono.max(1);
    match variant {
        Variant::VanillaCtc | Variant::VanillaAed => {
            out.model.n_share = e;
            out.model.n_mono = 0;
        }
        Variant::LaeCtc | Variant::LaeAed => {
            out.model.n_share = e - m;
            out.model.n_mono = m;
        }
        _ => {} // translation variants use the configured split
    }
    out.model.validate().map_err(|e| anyhow!("grid cell {}: {e}", variant.name()))?;
    Ok(out)
}

fn mer_pct(counts: &MixedErrorBreakdown) -> f64 {
    counts.all.rate() * 100.0
}

/// Trains the four-variant grid over several seeds, evaluates each cell
/// on the held-out code-switched set, and reports per-seed error rates
/// with win counts; then sweeps the translation weight β (including a
/// β=0 vs recognition-only log comparison) and the per-language encoder
/// depth.
pub fn cmd_ablate(rc: &RunConfig, n_seeds: u64, skip_sweeps: bool, force: bool) -> Result<()> {
    if rc.model.n_moe() == 0 || rc.model.n_mono == 0 {
        bail!(
            "the ablation grid derives every variant from the configured split; give the \
             base model at least one expert block and one per-language block"
        );
    }
    let data_dir = rc.out_dir.join("data");
    let mut data_rc = rc.clone();
    data_rc.out_dir = data_dir.clone();
    cmd_gen(&data_rc, force)?;
    let data = DataPaths::new(&data_dir);

    let (eval_spec, eval_utts) = read_manifest(&data.eval_cs)?;
    check_spec(&data.eval_cs, &eval_spec, &rc.corpus)?;
    if eval_utts.is_empty() {
        bail!("the code-switched eval manifest is empty; the grid has nothing to score");
    }
    let vocab = rc.model.vocab.clone();
    let lm = train_lm(rc, &data, &vocab)?;
    let params = DecodeParams { st_direction: None, ..rc.decode };

    let mut records: Vec<String> = Vec::new();
    let mut text = String::new();
    use std::fmt::Write as _;

    // -- variant grid ------------------------------------------------------
    let seeds: Vec<u64> = (0..n_seeds).map(|i| rc.seed + i).collect();
    let mut mer: Vec<Vec<f64>> = Vec::new(); // [variant][seed]
    for &variant in &GRID {
        let cell_rc = grid_model(rc, variant)?;
        let mut row = Vec::new();
        for &seed in &seeds {
            let mut run_rc = cell_rc.clone();
            run_rc.seed = seed;
            let run_dir = rc.out_dir.join("runs").join(format!("{}-s{}", variant.name(), seed));
            let model = train_run(&run_rc, &data, &run_dir, false, true)?;
            let decoded = decode_set(&model, &eval_utts, lm.as_ref(), &params)?;
            let pct = mer_pct(&decoded.base);
            println!("{} seed {seed}: MER {pct:.2}%", variant.name());
            records.push(format!(
                "cell\t{}\t{}\t{}",
                variant.name(),
                seed,
                crate::io::fmt_f64(pct)
            ));
            row.push(pct);
        }
        mer.push(row);
    }

    let mut t = Table::new(
        std::iter::once("variant".to_string())
            .chain(seeds.iter().map(|s| format!("seed {s}")))
            .chain(std::iter::once("mean".to_string()))
            .collect::<Vec<_>>(),
    );
    for (v, row) in GRID.iter().zip(&mer) {
        let mean = row.iter().sum::<f64>() / row.len() as f64;
        t.row(
            std::iter::once(v.name().to_string())
                .chain(row.iter().map(|m| format!("{m:.2}")))
                .chain(std::iter::once(format!("{mean:.2}")))
                .collect::<Vec<_>>(),
        );
    }
    let _ = writeln!(text, "== variant grid (MER %, lower is better) ==");
    text.push_str(&t.render());

    // Win counts for the claimed orderings, per seed.
    let idx = |v: Variant| GRID.iter().position(|&g| g == v).expect("in grid");
    let (van, lae, tied, moe) =
        (idx(Variant::VanillaCtc), idx(Variant::LaeCtc), idx(Variant::LaeStCtc), idx(Variant::LaeStMoeCtc));
    let orderings = [
        (
            "moe<=lae<=vanilla",
            (0..seeds.len())
                .filter(|&s| mer[moe][s] <= mer[lae][s] && mer[lae][s] <= mer[van][s])
                .count(),
        ),
        ("moe<=tied-experts", (0..seeds.len()).filter(|&s| mer[moe][s] <= mer[tied][s]).count()),
    ];
    let _ = writeln!(text);
    for (name, wins) in orderings {
        let _ = writeln!(text, "ordering {name}: holds in {wins}/{} seeds", seeds.len());
        records.push(format!("ordering\t{name}\t{wins}\t{}", seeds.len()));
    }

    // -- sweeps -------------------------------------------------------------
    if !skip_sweeps {
        let seed = seeds[0];

        // β sweep on the full architecture, plus the β=0 consistency probe:
        // silencing translation via β must reproduce a recognition-only
        // run's loss log bit for bit.
        let _ = writeln!(text);
        let _ = writeln!(text, "== translation-weight sweep (variant {}, seed {seed}) ==", Variant::LaeStMoeCtc.name());
        let mut t = Table::new(vec!["beta", "MER", "BLEU man2en", "BLEU en2man"]);
        for beta in [0.0, 0.4, 0.6, 0.8, 1.0] {
            let mut run_rc = grid_model(rc, Variant::LaeStMoeCtc)?;
            run_rc.seed = seed;
            run_rc.model.beta = beta;
            let run_dir = rc.out_dir.join("runs").join(format!("beta-{beta}"));
            let model = train_run(&run_rc, &data, &run_dir, false, true)?;
            let decoded = decode_set(&model, &eval_utts, lm.as_ref(), &params)?;
            let pct = mer_pct(&decoded.base);
            let (b_m2e, b_e2m) = if beta > 0.0 {
                (
                    translate_set(&model, &eval_utts, StDirection::Man2En, rc.decode.beam)?.bleu,
                    translate_set(&model, &eval_utts, StDirection::En2Man, rc.decode.beam)?.bleu,
                )
            } else {
                (f64::NAN, f64::NAN)
            };
            let fmt_bleu =
                |b: f64| if b.is_nan() { "-".to_string() } else { format!("{b:.2}") };
            t.row(vec![
                format!("{beta}"),
                format!("{pct:.2}"),
                fmt_bleu(b_m2e),
                fmt_bleu(b_e2m),
            ]);
            records.push(format!(
                "beta\t{}\t{}\t{}\t{}",
                crate::io::fmt_f64(beta),
                crate::io::fmt_f64(pct),
                crate::io::fmt_f64(b_m2e),
                crate::io::fmt_f64(b_e2m)
            ));
            println!("beta {beta}: MER {pct:.2}%");
        }
        text.push_str(&t.render());

        let mut ref_rc = grid_model(rc, Variant::LaeStMoeCtc)?;
        ref_rc.seed = seed;
        let ref_dir = rc.out_dir.join("runs").join("asr-only");
        train_run(&ref_rc, &data, &ref_dir, true, true)?;
        let beta0_log = fs::read(rc.out_dir.join("runs").join("beta-0").join("loss_log.tsv"))?;
        let ref_log = fs::read(ref_dir.join("loss_log.tsv"))?;
        let same = beta0_log == ref_log;
        let _ = writeln!(
            text,
            "beta=0 loss log identical to the recognition-only run: {same}"
        );
        records.push(format!("beta0_matches_asr_only\t{same}"));
        if !same {
            eprintln!("warning: the beta=0 loss log differs from the recognition-only run");
        }

        // Per-language depth sweep: trade shared blocks for per-language
        // blocks at fixed total depth.
        let base = grid_model(rc, Variant::LaeStMoeCtc)?;
        let k = base.model.n_moe();
        let _ = writeln!(text);
        let _ = writeln!(text, "== per-language depth sweep (variant {}, seed {seed}) ==", Variant::LaeStMoeCtc.name());
        let mut t = Table::new(vec!["n_mono", "n_share", "MER"]);
        for n_mono in [0usize, 1, 2] {
            let Some(n_share) = base.model.n_encoder.checked_sub(k + n_mono).filter(|&s| s >= 1)
            else {
                t.row(vec![n_mono.to_string(), "-".to_string(), "-".to_string()]);
                continue;
            };
            let mut run_rc = base.clone();
            run_rc.seed = seed;
            run_rc.model.n_mono = n_mono;
            run_rc.model.n_share = n_share;
            run_rc.model.validate().map_err(|e| anyhow!("depth sweep n_mono={n_mono}: {e}"))?;
            let run_dir = rc.out_dir.join("runs").join(format!("mono-{n_mono}"));
            let model = train_run(&run_rc, &data, &run_dir, false, true)?;
            let decoded = decode_set(&model, &eval_utts, lm.as_ref(), &params)?;
            let pct = mer_pct(&decoded.base);
            t.row(vec![n_mono.to_string(), n_share.to_string(), format!("{pct:.2}")]);
            records.push(format!("n_mono\t{n_mono}\t{n_share}\t{}", crate::io::fmt_f64(pct)));
            println!("n_mono {n_mono}: MER {pct:.2}%");
        }
        text.push_str(&t.render());
    }

    let text_path = rc.out_dir.join("ablation.txt");
    let records_path = rc.out_dir.join("ablation.tsv");
    fs::write(&text_path, &text)?;
    fs::write(&records_path, records.join("\n") + "\n")?;
    print!("{text}");
    println!("wrote {} and {}", text_path.display(), records_path.display());
    Ok(())
}
