//! Evaluation reports: a human-readable aligned table plus a
//! machine-readable record file, both deterministic so identical runs
//! produce identical bytes.

use anyhow::{Context, Result};
use laest_core::ctc::NBestEntry;
use laest_core::metrics::{ErrorCounts, MixedErrorBreakdown};
use laest_core::numerics::{to_f64, Real};
use std::fmt::Write as _;
use std::path::Path;

use crate::io::fmt_f64;

/// The version stamp embedded in every report.
pub fn version_stamp() -> String {
    format!("laest {}", env!("CARGO_PKG_VERSION"))
}

// ---------------------------------------------------------------------------
// Aligned text tables.
// ---------------------------------------------------------------------------

/// Minimal fixed-width table renderer: first column left-aligned, the
/// rest right-aligned, two spaces between columns.
pub struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<S: Into<String>>(header: Vec<S>) -> Self {
        Table { header: header.into_iter().map(Into::into).collect(), rows: Vec::new() }
    }

    pub fn row<S: Into<String>>(&mut self, cells: Vec<S>) {
        let cells: Vec<String> = cells.into_iter().map(Into::into).collect();
        assert_eq!(cells.len(), self.header.len(), "row width must match the header");
        self.rows.push(cells);
    }

    pub fn render(&self) -> String {
        let cols = self.header.len();
        let mut width = vec![0usize; cols];
        for (c, h) in self.header.iter().enumerate() {
            width[c] = h.chars().count();
        }
        for row in &self.rows {
            for (c, cell) in row.iter().enumerate() {
                width[c] = width[c].max(cell.chars().count());
            }
        }
        let mut out = String::new();
        let line = |cells: &[String], out: &mut String| {
            for (c, cell) in cells.iter().enumerate() {
                if c > 0 {
                    out.push_str("  ");
                }
                let pad = width[c] - cell.chars().count();
                if c == 0 {
                    out.push_str(cell);
                    if c + 1 < cols {
                        out.push_str(&" ".repeat(pad));
                    }
                } else {
                    out.push_str(&" ".repeat(pad));
                    out.push_str(cell);
                }
            }
            out.push('\n');
        };
        line(&self.header, &mut out);
        let rule: usize = width.iter().sum::<usize>() + 2 * (cols - 1);
        out.push_str(&"-".repeat(rule));
        out.push('\n');
        for row in &self.rows {
            line(row, &mut out);
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Evaluation report.
// ---------------------------------------------------------------------------

/// One recognition row: a test set decoded under one rescoring setting.
pub struct RecognitionRow {
    pub set: String,
    /// `"none"`, `"man2en"`, or `"en2man"`.
    pub rescore: String,
    pub utts: usize,
    pub counts: MixedErrorBreakdown,
}

/// One translation row: a direction evaluated on one test set.
pub struct TranslationRow {
    pub set: String,
    pub direction: String,
    pub utts: usize,
    /// Corpus BLEU on the 0–100 scale.
    pub bleu: f64,
    /// Corpus TER: total edits over total reference length, times 100.
    pub ter: f64,
}

pub struct EvalReport {
    pub version: String,
    pub checkpoint: String,
    pub checkpoint_step: u64,
    pub manifests: Vec<String>,
    pub recognition: Vec<RecognitionRow>,
    pub translation: Vec<TranslationRow>,
    /// Canonical TOML echo of the run configuration.
    pub config_echo: String,
}

fn pct(x: f64) -> String {
    format!("{:.2}", x * 100.0)
}

fn rate_cell(c: &ErrorCounts) -> String {
    if c.ref_len == 0 && c.errors() == 0 {
        "-".to_string()
    } else {
        pct(c.rate())
    }
}

impl EvalReport {
    /// The human-readable report.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "evaluation report ({})", self.version);
        let _ = writeln!(out, "checkpoint: {} (step {})", self.checkpoint, self.checkpoint_step);
        let _ = writeln!(out, "manifests: {}", self.manifests.join(", "));
        let _ = writeln!(out);

        let _ = writeln!(out, "== recognition (mixed error rate, %) ==");
        let mut t = Table::new(vec![
            "set", "rescore", "utts", "MER", "sub", "del", "ins", "CN", "EN",
        ]);
        for r in &self.recognition {
            let a = &r.counts.all;
            t.row(vec![
                r.set.clone(),
                r.rescore.clone(),
                r.utts.to_string(),
                rate_cell(a),
                a.substitutions.to_string(),
                a.deletions.to_string(),
                a.insertions.to_string(),
                rate_cell(&r.counts.cn),
                rate_cell(&r.counts.en),
            ]);
        }
        out.push_str(&t.render());
        let _ = writeln!(out);

        let _ = writeln!(out, "== translation ==");
        let mut t = Table::new(vec!["set", "direction", "utts", "BLEU", "TER"]);
        for r in &self.translation {
            t.row(vec![
                r.set.clone(),
                r.direction.clone(),
                r.utts.to_string(),
                format!("{:.2}", r.bleu),
                format!("{:.2}", r.ter),
            ]);
        }
        out.push_str(&t.render());
        let _ = writeln!(out);

        let _ = writeln!(out, "== configuration ==");
        for line in self.config_echo.lines() {
            let _ = writeln!(out, "  {line}");
        }
        out
    }

    /// The machine-readable record file: one tab-separated record per
    /// line, full-precision floats, first field names the record kind.
    pub fn render_records(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "version\t{}", self.version);
        let _ = writeln!(out, "checkpoint\t{}\t{}", self.checkpoint, self.checkpoint_step);
        for m in &self.manifests {
            let _ = writeln!(out, "manifest\t{m}");
        }
        for r in &self.recognition {
            let a = &r.counts.all;
            let _ = writeln!(
                out,
                "recognition\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                r.set,
                r.rescore,
                r.utts,
                fmt_f64(a.rate()),
                a.substitutions,
                a.deletions,
                a.insertions,
                a.ref_len,
                fmt_f64(r.counts.cn.rate()),
                r.counts.cn.ref_len,
                fmt_f64(r.counts.en.rate()),
                r.counts.en.ref_len,
            );
        }
        for r in &self.translation {
            let _ = writeln!(
                out,
                "translation\t{}\t{}\t{}\t{}\t{}",
                r.set,
                r.direction,
                r.utts,
                fmt_f64(r.bleu),
                fmt_f64(r.ter),
            );
        }
        for line in self.config_echo.lines() {
            let _ = writeln!(out, "config\t{line}");
        }
        out
    }

    pub fn write(&self, text_path: &Path, records_path: &Path) -> Result<()> {
        std::fs::write(text_path, self.render_text())
            .with_context(|| format!("writing {}", text_path.display()))?;
        std::fs::write(records_path, self.render_records())
            .with_context(|| format!("writing {}", records_path.display()))?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// N-best dumps.
// ---------------------------------------------------------------------------

/// One n-best line: `utt_id rank total ctc lm st tokens...`, ranks
/// 1-based, scores in full precision.
pub fn nbest_line<F: Real>(utt_id: &str, rank: usize, e: &NBestEntry<F>) -> String {
    let mut s = format!(
        "{utt_id} {rank} {} {} {} {}",
        fmt_f64(to_f64(e.total)),
        fmt_f64(to_f64(e.ctc_logp)),
        fmt_f64(to_f64(e.lm_logp)),
        fmt_f64(to_f64(e.rescore_logp)),
    );
    for t in &e.tokens {
        let _ = write!(s, " {t}");
    }
    s
}
