//! Pilot for the desk-scale pruning reproductions: trains a toy translator
//! per seed (reversal unless `task` names another, e.g. `remapped-copy`),
//! then prints the ordering comparison, per-type traces,
//! dynamics and cross-split correlation.
//!
//! `cargo run --release -p prunelab --example pilot_pruning -- [seeds] [epochs] [metric] [d] [heads] [dropout] [layers] [skip_extra] [task] [reestimate]`

use std::time::Instant;

use prunelab::attention::AttentionKind;
use prunelab::importance::{oracle_delta_scores, DEFAULT_ESTIMATION_SAMPLES};
use prunelab::model::{build_model, synth_corpus, train, CorpusSpec, OptimizerSpec, TaskSpec};
use prunelab::pruning::{
    cross_dataset_correlation, iterative_prune, prune_by_type, training_dynamics, Ordering, PruneOptions,
};
use prunelab::stats::Metric;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize, default: &str| args.get(i).cloned().unwrap_or_else(|| default.to_string());
    let seeds: u64 = arg(0, "3").parse()?;
    let epochs: usize = arg(1, "10").parse()?;
    let metric: Metric = arg(2, "sequence-accuracy").parse()?;
    let d: usize = arg(3, "32").parse()?;
    let heads: usize = arg(4, "4").parse()?;
    let dropout: f64 = arg(5, "0.0").parse()?;
    let layers: usize = arg(6, "2").parse()?;
    let skip_extra = arg(7, "0") == "1";
    let task: TaskSpec = serde_json::from_str(&format!("\"{}\"", arg(8, "reversal")))?;
    let reestimate = arg(9, "1") == "1";
    for seed in 0..seeds {
        let start = Instant::now();
        let spec = CorpusSpec::new(task);
        let corpus = synth_corpus(&spec, seed)?;
        let mut config = spec.model_config(layers, heads, d, 4 * d);
        config.dropout = dropout;
        let model = build_model(&config, seed)?;
        let opt = OptimizerSpec {
            seed,
            ..OptimizerSpec::default()
        };
        let ckpts = train(&model, &corpus, epochs, &opt, None)?;
        let trained = &ckpts.last().unwrap().model;
        let est = corpus.train_subset(DEFAULT_ESTIMATION_SAMPLES, seed);
        let eval = &corpus.eval_in_domain;
        let accs: Vec<String> = ckpts
            .last()
            .unwrap()
            .log
            .iter()
            .map(|l| format!("{:.0}", l.eval_score))
            .collect();
        println!(
            "seed {seed}: trained in {:.1}s; seq acc {}",
            start.elapsed().as_secs_f64(),
            accs.join(" ")
        );
        for ordering in [
            Ordering::Importance,
            Ordering::Random,
            Ordering::ReverseImportance,
            Ordering::OracleDelta,
        ] {
            let t = iterative_prune(
                trained,
                &est,
                eval,
                metric,
                &PruneOptions {
                    ordering,
                    seed,
                    reestimate,
                    ..PruneOptions::default()
                },
            )?;
            let scores: Vec<String> = t.steps.iter().map(|s| format!("{:.1}", s.score)).collect();
            println!("  {ordering:<20} {}", scores.join(" "));
        }
        if skip_extra {
            continue;
        }
        for kind in AttentionKind::TRANSLATOR {
            let t = prune_by_type(trained, kind, &est, eval, metric, &PruneOptions::default())?;
            let scores: Vec<String> = t.steps.iter().map(|s| format!("{:.1}", s.score)).collect();
            println!("  type {kind:<15} {}", scores.join(" "));
        }
        let picks: Vec<_> = [1usize, 2, epochs].iter().map(|&e| ckpts[e].clone()).collect();
        let surf = training_dynamics(&picks, &est, eval, metric, &PruneOptions::default())?;
        for e in surf.epochs() {
            let rel: Vec<String> = surf.curve(e).iter().map(|p| format!("{:.2}", p.1)).collect();
            println!(
                "  epoch {e:>3} R2 {:?} rel {}",
                surf.linear_fit_r2(e).map(|r| (r * 1000.0).round() / 1000.0),
                rel.join(" ")
            );
        }
        let a = oracle_delta_scores(trained, eval, metric)?;
        let b = oracle_delta_scores(trained, &corpus.eval_out_domain, metric)?;
        match cross_dataset_correlation(&a, &b) {
            Ok(c) => println!("  correlation r {:.3} p {:.2e}", c.r, c.p_value),
            Err(e) => println!("  correlation failed: {e}"),
        }
        println!("  seed total {:.1}s", start.elapsed().as_secs_f64());
    }
    Ok(())
}
