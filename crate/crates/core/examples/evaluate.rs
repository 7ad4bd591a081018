//! Scores a checkpoint (or the clean reference with `oracle`) on a manifest
//! and prints per-utterance rows.
//!
//! ```text
//! cargo run --release --example evaluate -- <manifest.jsonl> <ckpt|oracle>
//! ```

use dualpath_se::checkpoint::Checkpoint;
use dualpath_se::data::Manifest;
use dualpath_se::pipeline::{evaluate_manifest, Estimator};
use dualpath_se::{Model, ParamStore};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let usage = "usage: evaluate <manifest.jsonl> <ckpt|oracle>";
    let manifest = Manifest::load(args.next().ok_or(usage)?)?;
    let which = args.next().ok_or(usage)?;

    let report = if which == "oracle" {
        evaluate_manifest(Estimator::Oracle, &manifest, None)?
    } else {
        let ck = Checkpoint::load(&which)?;
        let mut store = ParamStore::new();
        let model = Model::new(&ck.settings.model, &mut store, ck.seed)?;
        ck.restore_into(&mut store)?;
        evaluate_manifest(Estimator::Model(&model, &store), &manifest, None)?
    };
    for r in &report.rows {
        println!(
            "{:<16} si-sdr {} -> {}  stoi {:.3} -> {:.3}",
            r.id, r.si_sdr_in, r.si_sdr_out, r.stoi_in, r.stoi_out
        );
    }
    let show = |v: Option<f64>, unit: &str| v.map_or("n/a (perfect rows are excluded)".into(), |v| format!("{v:+.4}{unit}"));
    println!(
        "mean improvement: si-sdr {}, stoi {}",
        show(report.si_sdr_improvement(), " dB"),
        show(report.stoi_improvement(), "")
    );
    Ok(())
}
