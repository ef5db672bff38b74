//! One runner per experiment kind. Each writes its result files into the
//! output directory and finishes with the manifest.
//!
//! | experiment      | outputs                                                    |
//! |-----------------|------------------------------------------------------------|
//! | `train`         | `checkpoints/epoch_NNNN.ckpt`, `train_log.jsonl`           |
//! | `ablate-one`    | `ablate_one.tsv` (head table), `histogram.tsv`             |
//! | `ablate-layer`  | `ablate_layer.tsv`                                         |
//! | `prune`         | `trace_<ordering>.jsonl` per ordering                      |
//! | `prune-by-type` | `trace_<kind>.jsonl` per attention kind                    |
//! | `dynamics`      | `surface.jsonl`, `dynamics.tsv`                            |
//! | `correlate`     | `correlation.tsv`, `points.tsv`, `deltas_a.tsv`, `deltas_b.tsv` |
//! | `speed-bench`   | `speed.tsv`                                                |
//!
//! Result tables are tab-separated with `# key=value` metadata lines before a
//! header row; traces and surfaces are JSON lines. Everything except timings
//! is a deterministic function of the configuration.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use prunelab::attention::{AttentionKind, HeadId, HeadMask};
use prunelab::importance::{estimate_importance, oracle_delta_scores, DeltaTable, HeadTable};
use prunelab::model::{build_model, synth_corpus, train, Checkpoint, Corpus, Example, Split, TransformerModel};
use prunelab::pruning::{
    ablate_all_but_one, ablate_one_sweep, cross_dataset_correlation, iterative_prune, prune_by_type, structural_slice,
    training_dynamics, PruneOptions,
};
use prunelab::stats::Metric;

use crate::config::{ExperimentConfig, ExperimentKind};
use crate::manifest::Manifest;
use crate::speed::speed_benchmark;
use crate::{CliError, Result};

pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const ABLATE_ONE: &str = "ablate_one.tsv";
pub const HISTOGRAM: &str = "histogram.tsv";
pub const ABLATE_LAYER: &str = "ablate_layer.tsv";
pub const SURFACE: &str = "surface.jsonl";
pub const DYNAMICS: &str = "dynamics.tsv";
pub const CORRELATION: &str = "correlation.tsv";
pub const POINTS: &str = "points.tsv";
pub const DELTAS_A: &str = "deltas_a.tsv";
pub const DELTAS_B: &str = "deltas_b.tsv";
pub const SPEED: &str = "speed.tsv";

pub fn trace_file(label: &str) -> String {
    format!("trace_{label}.jsonl")
}

/// Runs one experiment, writing into `out` (created if needed). `workers`
/// above 1 evaluates independent traces concurrently; results do not depend
/// on it. The speed benchmark always runs single-stream.
pub fn run(kind: ExperimentKind, config: &ExperimentConfig, out: &Path, workers: usize) -> Result<Manifest> {
    config.validate(kind)?;
    std::fs::create_dir_all(out)?;
    let ctx = Context::new(config, out, workers.max(1))?;
    let files = match kind {
        ExperimentKind::Train => ctx.train()?,
        ExperimentKind::AblateOne => ctx.ablate_one()?,
        ExperimentKind::AblateLayer => ctx.ablate_layer()?,
        ExperimentKind::Prune => ctx.prune()?,
        ExperimentKind::PruneByType => ctx.prune_by_type()?,
        ExperimentKind::Dynamics => ctx.dynamics()?,
        ExperimentKind::Correlate => ctx.correlate()?,
        ExperimentKind::SpeedBench => ctx.speed()?,
    };
    Manifest::write(out, kind, config, &files)
}

struct Context<'a> {
    config: &'a ExperimentConfig,
    out: &'a Path,
    workers: usize,
    corpus: Corpus,
}

impl<'a> Context<'a> {
    fn new(config: &'a ExperimentConfig, out: &'a Path, workers: usize) -> Result<Self> {
        let corpus = synth_corpus(&config.corpus, config.corpus_seed())?;
        Ok(Context {
            config,
            out,
            workers,
            corpus,
        })
    }

    fn metric(&self) -> Metric {
        self.config.metric.unwrap_or(self.corpus.task().default_metric())
    }

    fn eval(&self) -> &[Example] {
        self.leading(self.config.eval.split, self.config.eval.n_examples)
    }

    fn leading(&self, split: Split, n: usize) -> &[Example] {
        let all = self.corpus.split(split);
        if n == 0 {
            all
        } else {
            &all[..n.min(all.len())]
        }
    }

    fn estimation(&self) -> Vec<Example> {
        let e = &self.config.estimation;
        match e.split {
            Split::Train => self.corpus.train_subset(e.n_samples, self.config.seed),
            split => self.leading(split, e.n_samples).to_vec(),
        }
    }

    fn checkpoint(&self) -> Result<Checkpoint> {
        let path = self
            .config
            .checkpoint
            .as_ref()
            .ok_or_else(|| CliError::Config("`checkpoint` is required for this experiment".into()))?;
        let ckpt = Checkpoint::load(path)?;
        if ckpt.model.task() != self.corpus.task() {
            return Err(CliError::Config(format!(
                "checkpoint {} is a {:?} model but the corpus is {:?}",
                path.display(),
                ckpt.model.task(),
                self.corpus.task()
            )));
        }
        Ok(ckpt)
    }

    fn model(&self) -> Result<TransformerModel> {
        Ok(self.checkpoint()?.model)
    }

    fn write(&self, name: &str, contents: &str) -> Result<String> {
        let path = self.out.join(name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(&path, contents)?;
        Ok(name.to_string())
    }

    fn train(&self) -> Result<Vec<String>> {
        let c = self.config;
        let model = build_model(&c.model.model_config(&c.corpus), c.seed)?;
        let spec = c.train.optimizer(c.seed, c.metric);
        let dir = self.out.join(CHECKPOINT_DIR);
        let ckpts = train(&model, &self.corpus, c.train.epochs, &spec, Some(&dir))?;
        let mut files: Vec<String> = ckpts
            .iter()
            .map(|ck| format!("{CHECKPOINT_DIR}/epoch_{:04}.ckpt", ck.epoch))
            .collect();
        let last = ckpts.last().expect("train returns the initial checkpoint");
        let mut log = String::new();
        for row in &last.log {
            log.push_str(&serde_json::to_string(row).map_err(|e| CliError::Runtime(e.to_string()))?);
            log.push('\n');
        }
        files.push(self.write(TRAIN_LOG, &log)?);
        Ok(files)
    }

    fn ablate_one(&self) -> Result<Vec<String>> {
        let model = self.model()?;
        let test = self.config.ablate.stat_test(self.config.seed);
        let deltas = ablate_one_sweep(&model, self.eval(), self.metric(), test)?;
        let importance = if self.config.ablate.with_importance {
            Some(estimate_importance(&model, &self.estimation())?)
        } else {
            None
        };
        let mut table = HeadTable::new(importance.as_ref(), Some(&deltas));
        table
            .meta
            .insert("split".into(), self.config.eval.split.as_str().into());
        let mut hist = format!(
            "# metric={}\n# bin_width={:?}\nlo\thi\tcount\n",
            deltas.metric, self.config.ablate.histogram_bin
        );
        for bin in deltas.histogram(self.config.ablate.histogram_bin) {
            let _ = writeln!(hist, "{:?}\t{:?}\t{}", bin.lo, bin.hi, bin.count);
        }
        Ok(vec![
            self.write(ABLATE_ONE, &table.to_tsv())?,
            self.write(HISTOGRAM, &hist)?,
        ])
    }

    fn ablate_layer(&self) -> Result<Vec<String>> {
        let model = self.model()?;
        let kinds = selected_kinds(&model, &self.config.ablate.kinds)?;
        let layers: Vec<(AttentionKind, usize)> = model
            .head_counts()
            .into_keys()
            .filter(|(k, _)| kinds.contains(k))
            .collect();
        let eval = self.eval();
        let metric = self.metric();
        let results = par_map(&layers, self.workers, |&(kind, layer)| {
            Ok(ablate_all_but_one(&model, kind, layer, eval, metric)?)
        })?;
        let base = results.first().map_or(f64::NAN, |r| r.base_score);
        let mut tsv = format!(
            "# metric={metric}\n# base_score={base:?}\n# n_examples={}\n",
            eval.len()
        );
        tsv.push_str("kind\tlayer\tkept_head\tscore\tdelta\tbest\n");
        for r in &results {
            for k in &r.per_head {
                let _ = writeln!(
                    tsv,
                    "{}\t{}\t{}\t{:?}\t{:?}\t{}",
                    r.kind,
                    r.layer,
                    k.head.head,
                    k.score,
                    k.delta,
                    u8::from(k.head == r.best_head)
                );
            }
        }
        Ok(vec![self.write(ABLATE_LAYER, &tsv)?])
    }

    fn prune(&self) -> Result<Vec<String>> {
        let model = self.model()?;
        let est = self.estimation();
        let (eval, metric, seed) = (self.eval(), self.metric(), self.config.seed);
        let traces = par_map(&self.config.prune.orderings, self.workers, |&ordering| {
            Ok(iterative_prune(
                &model,
                &est,
                eval,
                metric,
                &self.config.prune.options(ordering, seed),
            )?)
        })?;
        traces
            .iter()
            .map(|t| self.write(&trace_file(t.ordering.as_str()), &t.to_jsonl()))
            .collect()
    }

    fn prune_by_type(&self) -> Result<Vec<String>> {
        let model = self.model()?;
        let kinds: Vec<AttentionKind> = selected_kinds(&model, &self.config.prune.kinds)?.into_iter().collect();
        let est = self.estimation();
        let (eval, metric) = (self.eval(), self.metric());
        let opts = self
            .config
            .prune
            .options(self.config.prune.orderings[0], self.config.seed);
        let traces = par_map(&kinds, self.workers, |&kind| {
            Ok(prune_by_type(&model, kind, &est, eval, metric, &opts)?)
        })?;
        kinds
            .iter()
            .zip(&traces)
            .map(|(kind, t)| self.write(&trace_file(kind.as_str()), &t.to_jsonl()))
            .collect()
    }

    fn dynamics_checkpoints(&self) -> Result<Vec<Checkpoint>> {
        let d = &self.config.dynamics;
        let paths: Vec<PathBuf> = match &d.checkpoint_dir {
            Some(dir) => {
                let entries = std::fs::read_dir(dir)
                    .map_err(|_| CliError::MissingInput(format!("checkpoint directory {}", dir.display())))?;
                let mut paths: Vec<PathBuf> = entries
                    .filter_map(|e| e.ok().map(|e| e.path()))
                    .filter(|p| p.extension().is_some_and(|x| x == "ckpt"))
                    .collect();
                paths.sort();
                paths
            }
            None => d.checkpoints.clone(),
        };
        let mut ckpts = Vec::with_capacity(paths.len());
        for p in &paths {
            let ck = Checkpoint::load(p)?;
            if d.epochs.is_empty() || d.epochs.contains(&ck.epoch) {
                ckpts.push(ck);
            }
        }
        ckpts.sort_by_key(|c| c.epoch);
        if ckpts.len() < 2 {
            return Err(CliError::MissingInput(format!(
                "dynamics needs at least 2 checkpoints, found {}",
                ckpts.len()
            )));
        }
        Ok(ckpts)
    }

    fn dynamics(&self) -> Result<Vec<String>> {
        let ckpts = self.dynamics_checkpoints()?;
        let opts = self
            .config
            .prune
            .options(self.config.prune.orderings[0], self.config.seed);
        let surface = training_dynamics(&ckpts, &self.estimation(), self.eval(), self.metric(), &opts)?;
        let mut tsv = format!("# metric={}\n# ordering={}\n", surface.metric, opts.ordering);
        tsv.push_str("epoch\tbase_score\tlinear_r2\tflagged\n");
        for epoch in surface.epochs() {
            let base = surface
                .cells
                .iter()
                .find(|c| c.epoch == epoch && c.step == 0)
                .map_or(f64::NAN, |c| c.score);
            let r2 = surface
                .linear_fit_r2(epoch)
                .map_or("NA".to_string(), |r| format!("{r:?}"));
            let flagged = u8::from(surface.flagged.contains(&epoch));
            let _ = writeln!(tsv, "{epoch}\t{base:?}\t{r2}\t{flagged}");
        }
        Ok(vec![
            self.write(SURFACE, &surface.to_jsonl())?,
            self.write(DYNAMICS, &tsv)?,
        ])
    }

    fn correlate(&self) -> Result<Vec<String>> {
        let c = &self.config.correlate;
        let mut files = Vec::new();
        let (a, b, label_a, label_b) = match (&c.table_a, &c.table_b) {
            (Some(pa), Some(pb)) => (
                read_delta_table(pa)?,
                read_delta_table(pb)?,
                pa.display().to_string(),
                pb.display().to_string(),
            ),
            (None, None) => {
                let model = self.model()?;
                let n = self.config.eval.n_examples;
                let metric = self.metric();
                let splits = [c.split_a, c.split_b];
                let mut tables = par_map(&splits, self.workers, |&split| {
                    Ok(oracle_delta_scores(&model, self.leading(split, n), metric)?)
                })?;
                let b = tables.pop().expect("two splits");
                let a = tables.pop().expect("two splits");
                for (name, table, split) in [(DELTAS_A, &a, c.split_a), (DELTAS_B, &b, c.split_b)] {
                    let mut t = HeadTable::new(None, Some(table));
                    t.meta.insert("split".into(), split.as_str().into());
                    files.push(self.write(name, &t.to_tsv())?);
                }
                (a, b, c.split_a.as_str().to_string(), c.split_b.as_str().to_string())
            }
            _ => {
                return Err(CliError::Config(
                    "correlate needs both table_a and table_b, or neither".into(),
                ))
            }
        };
        let corr = cross_dataset_correlation(&a, &b)?;
        let mut summary = format!("# a={label_a}\n# b={label_b}\n# metric={}\n", a.metric);
        summary.push_str("r\tp_value\tn\n");
        let _ = writeln!(summary, "{:?}\t{:?}\t{}", corr.r, corr.p_value, corr.n);
        let mut points = String::from("kind\tlayer\thead\tdelta_a\tdelta_b\n");
        for (id, x, y) in &corr.points {
            let _ = writeln!(points, "{}\t{}\t{}\t{x:?}\t{y:?}", id.kind, id.layer, id.head);
        }
        files.push(self.write(CORRELATION, &summary)?);
        files.push(self.write(POINTS, &points)?);
        Ok(files)
    }

    fn speed(&self) -> Result<Vec<String>> {
        let c = self.config;
        let original = match &c.checkpoint {
            Some(_) => self.model()?,
            None => build_model(&c.model.model_config(&c.corpus), c.seed)?,
        };
        let removed = heads_to_remove(&original, self, c.speed.prune_fraction)?;
        let pruned = structural_slice(
            &original.with_mask(HeadMask::closing(removed.iter().copied())),
            &removed,
        )?;
        let s = &c.speed;
        let report = speed_benchmark(
            &original,
            &pruned,
            &s.batch_sizes,
            s.repeats,
            s.warmup,
            self.eval(),
            s.n_examples,
        )?;
        Ok(vec![self.write(SPEED, &report.to_tsv())?])
    }
}

/// Picks `round(fraction × heads)` heads with a one-shot ranking under the
/// configured speed ordering.
fn heads_to_remove(model: &TransformerModel, ctx: &Context<'_>, fraction: f64) -> Result<BTreeSet<HeadId>> {
    if fraction == 0.0 {
        return Ok(BTreeSet::new());
    }
    let opts = PruneOptions {
        increment: fraction,
        ordering: ctx.config.speed.ordering,
        reestimate: false,
        seed: ctx.config.seed,
    };
    let trace = iterative_prune(model, &ctx.estimation(), ctx.eval(), ctx.metric(), &opts)?;
    Ok(trace.pruned_through(1))
}

fn selected_kinds(model: &TransformerModel, wanted: &[AttentionKind]) -> Result<BTreeSet<AttentionKind>> {
    if wanted.is_empty() {
        return Ok(model.kinds().iter().copied().collect());
    }
    for k in wanted {
        if !model.kinds().contains(k) {
            return Err(CliError::Config(format!("the model has no {k} attention")));
        }
    }
    Ok(wanted.iter().copied().collect())
}

fn read_delta_table(path: &Path) -> Result<DeltaTable> {
    let text =
        std::fs::read_to_string(path).map_err(|_| CliError::MissingInput(format!("delta table {}", path.display())))?;
    let table = HeadTable::parse(&text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    table
        .delta_table()
        .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

/// Order-preserving map over `items` using up to `workers` scoped threads.
fn par_map<T: Sync, R: Send>(items: &[T], workers: usize, f: impl Fn(&T) -> Result<R> + Sync) -> Result<Vec<R>> {
    if workers <= 1 || items.len() <= 1 {
        return items.iter().map(&f).collect();
    }
    let n_threads = workers.min(items.len());
    let f = &f;
    let mut slots: Vec<Option<Result<R>>> = (0..items.len()).map(|_| None).collect();
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..n_threads)
            .map(|t| {
                s.spawn(move || {
                    items
                        .iter()
                        .enumerate()
                        .skip(t)
                        .step_by(n_threads)
                        .map(|(i, item)| (i, f(item)))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("worker thread panicked") {
                slots[i] = Some(r);
            }
        }
    });
    slots
        .into_iter()
        .map(|r| r.expect("every item was processed"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn par_map_preserves_order_and_errors() {
        let items: Vec<usize> = (0..7).collect();
        for workers in [1, 3] {
            assert_eq!(
                par_map(&items, workers, |&i| Ok(i * 2)).unwrap(),
                vec![0, 2, 4, 6, 8, 10, 12]
            );
            let err = par_map(&items, workers, |&i| {
                if i == 4 {
                    Err(CliError::Runtime("x".into()))
                } else {
                    Ok(i)
                }
            });
            assert!(err.is_err());
        }
    }
}
