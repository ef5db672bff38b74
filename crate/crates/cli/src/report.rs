//! Renders a results directory as a Markdown summary (`report.md`) and
//! writes plot-ready data files for the figure analogs.
//!
//! Every known result file present in the directory gets a section:
//! head tables become layer × head grids (Table 1, `*` marks p < 0.01),
//! all-but-one results become Table 2, traces become Fig. 3/5 tables,
//! the dynamics surface becomes a Fig. 6 grid, and speed results become
//! Table 3. Numbers are shown at display precision only; the source files
//! keep full precision.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use prunelab::attention::{AttentionKind, HeadId};
use prunelab::importance::HeadTable;
use prunelab::model::EpochLog;
use prunelab::pruning::{layer_grid, DynamicsCell, PruningTrace};
use prunelab::stats::SIGNIFICANCE_LEVEL;

use crate::experiments::{
    ABLATE_LAYER, ABLATE_ONE, CORRELATION, DELTAS_A, DELTAS_B, DYNAMICS, HISTOGRAM, SPEED, SURFACE, TRAIN_LOG,
};
use crate::manifest::{Manifest, MANIFEST_FILE};
use crate::{CliError, Result};

pub const REPORT_FILE: &str = "report.md";
pub const PLOT_TRACES: &str = "plot_traces.tsv";
pub const PLOT_SURFACE: &str = "plot_surface.tsv";
pub const NOTHING_TO_REPORT: &str = "nothing to report";

/// Outcome of [`emit_report`].
#[derive(Clone, Debug, PartialEq)]
pub enum ReportStatus {
    /// The directory holds no result files; nothing was written.
    Empty,
    /// `report.md` (and any plot files) were written; holds the Markdown.
    Written(String),
}

fn corrupt(path: &Path, msg: impl std::fmt::Display) -> CliError {
    CliError::Runtime(format!("corrupt result file {}: {msg}", path.display()))
}

/// Tab-separated table with `# key=value` metadata lines.
struct Tsv {
    meta: BTreeMap<String, String>,
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Tsv {
    fn read(path: &Path) -> Result<Tsv> {
        let text = std::fs::read_to_string(path).map_err(|e| corrupt(path, e))?;
        let mut meta = BTreeMap::new();
        let mut header: Option<Vec<String>> = None;
        let mut rows = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if let Some(m) = line.strip_prefix("# ") {
                let (k, v) = m
                    .split_once('=')
                    .ok_or_else(|| corrupt(path, format!("line {}: bad metadata", i + 1)))?;
                meta.insert(k.to_string(), v.to_string());
                continue;
            }
            let cells: Vec<String> = line.split('\t').map(str::to_string).collect();
            match &header {
                None => header = Some(cells),
                Some(h) if h.len() != cells.len() => {
                    return Err(corrupt(
                        path,
                        format!("line {}: {} columns, expected {}", i + 1, cells.len(), h.len()),
                    ))
                }
                Some(_) => rows.push(cells),
            }
        }
        let header = header.ok_or_else(|| corrupt(path, "no header row"))?;
        Ok(Tsv { meta, header, rows })
    }

    fn col(&self, path: &Path, name: &str) -> Result<usize> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| corrupt(path, format!("missing column {name:?}")))
    }

    fn num(&self, path: &Path, row: &[String], name: &str) -> Result<f64> {
        let s = &row[self.col(path, name)?];
        s.parse()
            .map_err(|_| corrupt(path, format!("bad number {s:?} in column {name:?}")))
    }
}

fn fmt2(v: f64) -> String {
    format!("{v:.2}")
}

fn kind_layers(grid: &BTreeMap<(AttentionKind, usize), Vec<Option<f64>>>) -> BTreeMap<AttentionKind, Vec<usize>> {
    let mut out: BTreeMap<AttentionKind, Vec<usize>> = BTreeMap::new();
    for (kind, layer) in grid.keys() {
        out.entry(*kind).or_default().push(*layer);
    }
    out
}

/// Layer × head grid, one block per attention kind; `mark` decorates a cell.
fn render_grid(md: &mut String, values: &BTreeMap<HeadId, f64>, mark: impl Fn(HeadId) -> &'static str) {
    let grid = layer_grid(values);
    let width = grid.values().map(Vec::len).max().unwrap_or(0);
    for (kind, layers) in kind_layers(&grid) {
        let _ = writeln!(md, "\n**{kind}**\n");
        let heads: Vec<String> = (0..width).map(|h| format!("h{h}")).collect();
        let _ = writeln!(md, "| layer | {} |", heads.join(" | "));
        let _ = writeln!(md, "|---|{}", "---|".repeat(width));
        for layer in layers {
            let row = &grid[&(kind, layer)];
            let cells: Vec<String> = (0..width)
                .map(|h| match row.get(h).copied().flatten() {
                    Some(v) => format!("{}{}", fmt2(v), mark(HeadId::new(kind, layer, h))),
                    None => String::new(),
                })
                .collect();
            let _ = writeln!(md, "| {layer} | {} |", cells.join(" | "));
        }
    }
}

fn render_head_table(md: &mut String, path: &Path, title: &str) -> Result<()> {
    let text = std::fs::read_to_string(path).map_err(|e| corrupt(path, e))?;
    let table = HeadTable::parse(&text).map_err(|e| corrupt(path, e))?;
    let _ = writeln!(md, "\n## {title}\n");
    let meta: Vec<String> = table.meta.iter().map(|(k, v)| format!("{k}={v}")).collect();
    let _ = writeln!(
        md,
        "Source: `{}` ({})",
        path.file_name().unwrap_or_default().to_string_lossy(),
        meta.join(", ")
    );
    let deltas: BTreeMap<HeadId, f64> = table.rows.iter().filter_map(|r| r.delta.map(|d| (r.id, d))).collect();
    if !deltas.is_empty() {
        let significant: BTreeMap<HeadId, bool> = table
            .rows
            .iter()
            .map(|r| (r.id, r.p_value.is_some_and(|p| p < SIGNIFICANCE_LEVEL)))
            .collect();
        let n_sig = significant.values().filter(|s| **s).count();
        let _ = writeln!(
            md,
            "\nMetric change when masking each head alone (`*`: p < {SIGNIFICANCE_LEVEL}; {n_sig} of {} significant).",
            deltas.len()
        );
        render_grid(
            md,
            &deltas,
            |id| if significant.get(&id) == Some(&true) { "*" } else { "" },
        );
    }
    let normalized: BTreeMap<HeadId, f64> = table
        .rows
        .iter()
        .filter_map(|r| r.normalized.map(|v| (r.id, v)))
        .collect();
    if !normalized.is_empty() {
        let _ = writeln!(md, "\nLayer-normalized importance scores.");
        render_grid(md, &normalized, |_| "");
    }
    Ok(())
}

fn render_histogram(md: &mut String, path: &Path) -> Result<()> {
    let t = Tsv::read(path)?;
    let _ = writeln!(md, "\n## Fig. 1 analog: heads by masked-model score\n");
    let _ = writeln!(md, "| score bin | heads |\n|---|---|");
    for row in &t.rows {
        let (lo, hi) = (t.num(path, row, "lo")?, t.num(path, row, "hi")?);
        let _ = writeln!(md, "| [{}, {}) | {} |", fmt2(lo), fmt2(hi), row[t.col(path, "count")?]);
    }
    Ok(())
}

fn render_ablate_layer(md: &mut String, path: &Path) -> Result<()> {
    let t = Tsv::read(path)?;
    let _ = writeln!(md, "\n## Table 2 analog: best delta keeping one head per layer\n");
    let base = t.meta.get("base_score").cloned().unwrap_or_else(|| "NA".into());
    let _ = writeln!(
        md,
        "Unpruned score: {base} ({}).\n",
        t.meta.get("metric").map_or("", String::as_str)
    );
    let _ = writeln!(
        md,
        "| kind | layer | best head | score | best delta |\n|---|---|---|---|---|"
    );
    for row in &t.rows {
        if row[t.col(path, "best")?] == "1" {
            let _ = writeln!(
                md,
                "| {} | {} | {} | {} | {} |",
                row[t.col(path, "kind")?],
                row[t.col(path, "layer")?],
                row[t.col(path, "kept_head")?],
                fmt2(t.num(path, row, "score")?),
                fmt2(t.num(path, row, "delta")?)
            );
        }
    }
    Ok(())
}

fn render_traces(md: &mut String, dir: &Path, names: &[String], plot: &mut String) -> Result<()> {
    let mut traces = Vec::new();
    for name in names {
        let path = dir.join(name);
        let text = std::fs::read_to_string(&path).map_err(|e| corrupt(&path, e))?;
        let trace = PruningTrace::from_jsonl(&text).map_err(|e| corrupt(&path, e))?;
        let label = name.trim_start_matches("trace_").trim_end_matches(".jsonl").to_string();
        traces.push((label, trace));
    }
    let _ = writeln!(md, "\n## Fig. 3 / Fig. 5 analog: pruning traces\n");
    for (label, t) in &traces {
        let scope = t.scope.map_or("all heads".to_string(), |k| format!("{k} heads"));
        let _ = writeln!(
            md,
            "\n**{label}** ({}, {scope}, ordering {}, re-estimation {}, {} heads in scope)\n",
            t.metric,
            t.ordering,
            if t.reestimate { "on" } else { "off" },
            t.total_heads
        );
        let _ = writeln!(
            md,
            "| fraction pruned | heads pruned | score | relative |\n|---|---|---|---|"
        );
        let base = t.base_score();
        for s in &t.steps {
            let rel = if base != 0.0 { fmt2(s.score / base) } else { "NA".into() };
            let _ = writeln!(
                md,
                "| {} | {} | {} | {rel} |",
                fmt2(s.fraction),
                s.n_pruned,
                fmt2(s.score)
            );
            let _ = writeln!(plot, "{label}\t{:?}\t{}\t{:?}", s.fraction, s.n_pruned, s.score);
        }
    }
    Ok(())
}

fn render_dynamics(md: &mut String, dir: &Path, plot: &mut String) -> Result<()> {
    let path = dir.join(SURFACE);
    let text = std::fs::read_to_string(&path).map_err(|e| corrupt(&path, e))?;
    let cells = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str::<DynamicsCell>(l).map_err(|e| corrupt(&path, e)))
        .collect::<Result<Vec<_>>>()?;
    let mut grid: BTreeMap<usize, Vec<&DynamicsCell>> = BTreeMap::new();
    for c in &cells {
        grid.entry(c.epoch).or_default().push(c);
        let rel = c.relative.map_or("NA".into(), |r| format!("{r:?}"));
        let _ = writeln!(plot, "{}\t{:?}\t{:?}\t{rel}", c.epoch, c.fraction, c.score);
    }
    let r2: BTreeMap<String, String> = if dir.join(DYNAMICS).exists() {
        let p = dir.join(DYNAMICS);
        let t = Tsv::read(&p)?;
        let (e, r) = (t.col(&p, "epoch")?, t.col(&p, "linear_r2")?);
        t.rows.iter().map(|row| (row[e].clone(), row[r].clone())).collect()
    } else {
        BTreeMap::new()
    };
    let _ = writeln!(md, "\n## Fig. 6 analog: relative score by epoch and fraction pruned\n");
    let width = grid.values().map(Vec::len).max().unwrap_or(0);
    let fractions: Vec<String> = grid
        .values()
        .find(|v| v.len() == width)
        .map(|v| v.iter().map(|c| fmt2(c.fraction)).collect())
        .unwrap_or_default();
    let _ = writeln!(md, "| epoch | linear R² | {} |", fractions.join(" | "));
    let _ = writeln!(md, "|---|---|{}", "---|".repeat(width));
    for (epoch, row) in &grid {
        let vals: Vec<String> = row.iter().map(|c| c.relative.map_or("NA".into(), fmt2)).collect();
        let fit = r2
            .get(&epoch.to_string())
            .and_then(|s| s.parse::<f64>().ok())
            .map_or("NA".into(), |v| format!("{v:.3}"));
        let _ = writeln!(md, "| {epoch} | {fit} | {} |", vals.join(" | "));
    }
    Ok(())
}

fn render_correlation(md: &mut String, path: &Path) -> Result<()> {
    let t = Tsv::read(path)?;
    let row = t.rows.first().ok_or_else(|| corrupt(path, "no data row"))?;
    let _ = writeln!(md, "\n## Fig. 2 analog: cross-dataset correlation of ablation deltas\n");
    let _ = writeln!(
        md,
        "Pearson r = {:.3}, p = {:.3e}, n = {} heads (a: {}, b: {}).",
        t.num(path, row, "r")?,
        t.num(path, row, "p_value")?,
        row[t.col(path, "n")?],
        t.meta.get("a").map_or("?", String::as_str),
        t.meta.get("b").map_or("?", String::as_str)
    );
    Ok(())
}

fn render_speed(md: &mut String, path: &Path) -> Result<()> {
    let t = Tsv::read(path)?;
    let _ = writeln!(
        md,
        "\n## Table 3 analog: inference speed (examples/second, mean ± sd)\n"
    );
    let meta = |k: &str| t.meta.get(k).map_or("?", String::as_str);
    let _ = writeln!(
        md,
        "Heads {} → {}, parameters {} → {}, {} examples per timed pass.\n",
        meta("original_heads"),
        meta("pruned_heads"),
        meta("original_params"),
        meta("pruned_params"),
        meta("n_examples")
    );
    let _ = writeln!(
        md,
        "| batch size | original | pruned | speedup % | noise band % | repeats |\n|---|---|---|---|---|---|"
    );
    for row in &t.rows {
        let _ = writeln!(
            md,
            "| {} | {:.1} ± {:.1} | {:.1} ± {:.1} | {:+.1} | {:.1} | {} |",
            row[t.col(path, "batch_size")?],
            t.num(path, row, "original_mean")?,
            t.num(path, row, "original_sd")?,
            t.num(path, row, "pruned_mean")?,
            t.num(path, row, "pruned_sd")?,
            t.num(path, row, "speedup_pct")?,
            t.num(path, row, "noise_band_pct")?,
            row[t.col(path, "repeats")?]
        );
    }
    Ok(())
}

fn render_train_log(md: &mut String, path: &Path) -> Result<()> {
    let text = std::fs::read_to_string(path).map_err(|e| corrupt(path, e))?;
    let _ = writeln!(md, "\n## Training log\n");
    let _ = writeln!(md, "| epoch | train loss | eval score |\n|---|---|---|");
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let row: EpochLog = serde_json::from_str(line).map_err(|e| corrupt(path, e))?;
        let loss = row.train_loss.map_or("—".into(), |l| format!("{l:.4}"));
        let _ = writeln!(
            md,
            "| {} | {loss} | {} ({}) |",
            row.epoch,
            fmt2(row.eval_score),
            row.metric
        );
    }
    Ok(())
}

/// Renders every recognised result file in `dir`. A missing directory is a
/// missing-input error; unreadable or malformed files are runtime errors.
pub fn emit_report(dir: &Path) -> Result<ReportStatus> {
    if !dir.is_dir() {
        return Err(CliError::MissingInput(format!("results directory {}", dir.display())));
    }
    let mut names: Vec<String> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_file())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    let has = |n: &str| names.iter().any(|x| x == n);
    let traces: Vec<String> = names
        .iter()
        .filter(|n| n.starts_with("trace_") && n.ends_with(".jsonl"))
        .cloned()
        .collect();
    let known = [
        TRAIN_LOG,
        ABLATE_ONE,
        HISTOGRAM,
        ABLATE_LAYER,
        SURFACE,
        CORRELATION,
        SPEED,
    ];
    if !known.iter().any(|n| has(n)) && traces.is_empty() {
        return Ok(ReportStatus::Empty);
    }

    let mut md = String::from("# prunelab report\n");
    if has(MANIFEST_FILE) {
        let m = Manifest::load(dir).map_err(|e| corrupt(&dir.join(MANIFEST_FILE), e))?;
        let _ = writeln!(
            md,
            "\nExperiment `{}`, seed {}, prunelab {}, config sha256 `{}`.",
            m.experiment, m.seed, m.version, m.config_sha256
        );
        let stale = m.stale_files(dir);
        if !stale.is_empty() {
            let _ = writeln!(md, "\n**Warning:** files changed since the run: {}.", stale.join(", "));
        }
    }
    if has(TRAIN_LOG) {
        render_train_log(&mut md, &dir.join(TRAIN_LOG))?;
    }
    if has(ABLATE_ONE) {
        render_head_table(&mut md, &dir.join(ABLATE_ONE), "Table 1 analog: ablate-one deltas")?;
    }
    if has(HISTOGRAM) {
        render_histogram(&mut md, &dir.join(HISTOGRAM))?;
    }
    if has(ABLATE_LAYER) {
        render_ablate_layer(&mut md, &dir.join(ABLATE_LAYER))?;
    }
    if has(CORRELATION) {
        render_correlation(&mut md, &dir.join(CORRELATION))?;
        for (name, title) in [(DELTAS_A, "Deltas on split a"), (DELTAS_B, "Deltas on split b")] {
            if has(name) {
                render_head_table(&mut md, &dir.join(name), title)?;
            }
        }
    }
    if !traces.is_empty() {
        let mut plot = String::from("trace\tfraction\tn_pruned\tscore\n");
        render_traces(&mut md, dir, &traces, &mut plot)?;
        std::fs::write(dir.join(PLOT_TRACES), plot)?;
    }
    if has(SURFACE) {
        let mut plot = String::from("epoch\tfraction\tscore\trelative\n");
        render_dynamics(&mut md, dir, &mut plot)?;
        std::fs::write(dir.join(PLOT_SURFACE), plot)?;
    }
    if has(SPEED) {
        render_speed(&mut md, &dir.join(SPEED))?;
    }
    std::fs::write(dir.join(REPORT_FILE), &md)?;
    Ok(ReportStatus::Written(md))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_and_missing_directories() {
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(emit_report(dir.path()).unwrap(), ReportStatus::Empty);
        assert!(!dir.path().join(REPORT_FILE).exists());
        assert!(matches!(
            emit_report(&dir.path().join("absent")),
            Err(CliError::MissingInput(_))
        ));
    }

    #[test]
    fn corrupt_tables_are_runtime_errors() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join(SPEED), "batch_size\toriginal_mean\n1\n").unwrap();
        assert!(matches!(emit_report(dir.path()), Err(CliError::Runtime(_))));
        std::fs::write(dir.path().join(SPEED), "").unwrap();
        assert!(matches!(emit_report(dir.path()), Err(CliError::Runtime(_))));
    }

    #[test]
    fn head_table_renders_grid_with_significance() {
        let dir = tempfile::tempdir().unwrap();
        let tsv = "# metric=bleu\n# base_score=90.0\n# n_examples=10\n\
                   kind\tlayer\thead\traw\tnormalized\tdelta\tp_value\n\
                   enc-enc\t0\t0\tNA\tNA\t-1.25\t0.001\n\
                   enc-enc\t0\t1\tNA\tNA\t0.5\t0.5\n";
        std::fs::write(dir.path().join(ABLATE_ONE), tsv).unwrap();
        let ReportStatus::Written(md) = emit_report(dir.path()).unwrap() else {
            panic!("expected a report");
        };
        assert!(md.contains("| 0 | -1.25* | 0.50 |"), "{md}");
        assert!(md.contains("1 of 2 significant"));
        assert_eq!(std::fs::read_to_string(dir.path().join(REPORT_FILE)).unwrap(), md);
    }
}
