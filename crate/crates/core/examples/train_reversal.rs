//! Trains a toy reversal translator and prints the per-epoch log.
//!
//! `cargo run --release -p prunelab --example train_reversal -- [d_model] [epochs] [lr] [seed]`

use std::time::Instant;

use prunelab::model::{build_model, synth_corpus, train, CorpusSpec, OptimizerSpec, TaskSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize, default: &str| args.get(i).cloned().unwrap_or_else(|| default.to_string());
    let d: usize = arg(0, "32").parse()?;
    let epochs: usize = arg(1, "10").parse()?;
    let lr: f64 = arg(2, "0.1").parse()?;
    let seed: u64 = arg(3, "0").parse()?;

    let spec = CorpusSpec::new(TaskSpec::Reversal);
    let corpus = synth_corpus(&spec, seed)?;
    let model = build_model(&spec.model_config(2, 4, d, 4 * d), seed)?;
    println!(
        "params {} (attention share {:.3})",
        model.param_count(),
        model.attention_share()
    );
    let opt = OptimizerSpec {
        learning_rate: lr,
        seed,
        ..OptimizerSpec::default()
    };
    let start = Instant::now();
    let ckpts = train(&model, &corpus, epochs, &opt, None)?;
    for row in &ckpts.last().expect("initial checkpoint").log {
        println!(
            "epoch {:>3}  loss {:>8.4}  {} {:6.2}",
            row.epoch,
            row.train_loss.unwrap_or(f64::NAN),
            row.metric,
            row.eval_score
        );
    }
    println!("elapsed {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}
