//! Synthesizes a corpus, trains on it and scores the test split.
//!
//! ```text
//! cargo run --release --example synth_and_train -- <out_dir> [preset] [key=value ...]
//! ```
//!
//! The defaults are the desk preset on 64 training and 16 test utterances.

use std::path::PathBuf;

use dualpath_se::config::{parse_overrides, Preset, RunConfig};
use dualpath_se::data::{synth_corpus, Split, SynthConfig};
use dualpath_se::pipeline::{evaluate_manifest, Estimator};
use dualpath_se::training::train_run;
use dualpath_se::{Model, ParamStore};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let out = PathBuf::from(args.first().ok_or("usage: synth_and_train <out_dir> [preset] [key=value ...]")?);
    let preset = args.get(1).map(|p| Preset::parse(p)).transpose()?.unwrap_or(Preset::Desk);
    let overrides = parse_overrides(args.get(2..).unwrap_or(&[]))?;
    let cfg = RunConfig::resolve(Some(preset), None, &overrides)?;

    let t0 = std::time::Instant::now();
    let corpus = synth_corpus(&SynthConfig::default(), 7, out.join("corpus"))?;
    println!("corpus: {} utterances", corpus.records.len());

    let outcome = train_run(&cfg.settings(), &corpus, &out.join("run"), None, |e| {
        println!(
            "epoch {:3}  lr {:.2e}  train {:.5}  val {:.5}  ({:.0?})",
            e.epoch,
            e.lr,
            e.train_loss,
            e.val_loss,
            t0.elapsed()
        )
    })?;
    println!("best epoch {} (val {:.5})", outcome.best_epoch, outcome.best_val_loss);

    let mut store = ParamStore::new();
    let model = Model::new(&cfg.model, &mut store, cfg.train.seed)?;
    store = outcome.store;
    let report = evaluate_manifest(Estimator::Model(&model, &store), &corpus, Some(Split::Test))?;
    report.write(out.join("report.jsonl"))?;
    let s = report.summary();
    println!(
        "test: si-sdr {:.2} -> {:.2} dB (+{:.2}), stoi {:.3} -> {:.3} (+{:.3})  [{:.0?}]",
        s.si_sdr_in.unwrap_or(f64::NAN),
        s.si_sdr_out.unwrap_or(f64::NAN),
        report.si_sdr_improvement().unwrap_or(f64::NAN),
        s.stoi_in.unwrap_or(f64::NAN),
        s.stoi_out.unwrap_or(f64::NAN),
        report.stoi_improvement().unwrap_or(f64::NAN),
        t0.elapsed()
    );
    Ok(())
}
