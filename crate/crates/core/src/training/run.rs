//! The epoch loop: per-epoch crops, stepped learning rate, validation,
//! checkpoints and a JSON-lines training log.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{evaluate_loss, lr_at, train_step, AdamW, Example};
use crate::checkpoint::{Checkpoint, RunSettings};
use crate::data::{append_line, crop_example, crop_seed, Manifest, Split};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::ParamStore;

pub const LOG_FILE: &str = "train_log.jsonl";
pub const BEST_FILE: &str = "best.ckpt";

pub fn epoch_file(epoch: u64) -> String {
    format!("epoch_{epoch:03}.ckpt")
}

/// One line of the training log.
#[derive(Clone, Debug, Serialize)]
pub struct LogLine {
    pub kind: &'static str,
    pub epoch: u64,
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_loss: Option<f64>,
    pub wall_time: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochSummary {
    pub epoch: u64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub epochs: Vec<EpochSummary>,
    pub best_epoch: u64,
    pub best_val_loss: f64,
    pub checkpoints: Vec<PathBuf>,
    pub store: ParamStore,
}

impl TrainOutcome {
    pub fn final_val_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.val_loss)
    }
}

fn epoch_rng(seed: u64, epoch: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Validation examples: the test split at fixed crops of the training length.
pub fn validation_set(manifest: &Manifest, seg_len: usize) -> Result<Vec<Example>> {
    manifest
        .split(Split::Test)
        .map(|r| {
            let ex = manifest.load_example(r, None)?;
            let mut rng = ChaCha8Rng::seed_from_u64(crop_seed(&r.utterance_id, None));
            Ok(crop_example(&ex, seg_len, &mut rng))
        })
        .collect()
}

fn segment_len(manifest: &Manifest, secs: f64) -> Result<usize> {
    let r = manifest
        .split(Split::Train)
        .next()
        .ok_or_else(|| Error::Manifest("no training utterances".into()))?;
    let w = crate::data::load_wav(manifest.resolve(&r.clean_path))?;
    Ok(((secs * w.sample_rate as f64).round() as usize).max(1))
}

/// Trains on the manifest's train split, validating on its test split after
/// every epoch. Writes `epoch_NNN.ckpt`, `best.ckpt` and the log into
/// `out_dir`. With `resume`, continues from that checkpoint's epoch count up
/// to `settings.train.epochs`.
pub fn train_run(
    settings: &RunSettings,
    manifest: &Manifest,
    out_dir: &Path,
    resume: Option<Checkpoint>,
    mut on_epoch: impl FnMut(&EpochSummary),
) -> Result<TrainOutcome> {
    let tc = settings.train;
    tc.validate()?;
    settings.model.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut store = ParamStore::new();
    let model = Model::new(&settings.model, &mut store, tc.seed)?;
    let (mut opt, start, mut best) = match resume {
        Some(ck) => {
            let diffs = crate::checkpoint::config_differences(&ck.settings.model, &settings.model);
            if !diffs.is_empty() {
                return Err(Error::Config(format!("resume checkpoint differs in {}", diffs.join(", "))));
            }
            ck.restore_into(&mut store)?;
            let best_path = out_dir.join(BEST_FILE);
            let best = match Checkpoint::load(&best_path) {
                Ok(b) => (b.epoch, b.val_loss),
                Err(_) => (ck.epoch, ck.val_loss),
            };
            (ck.optimizer, ck.epoch, best)
        }
        None => (AdamW::new(&store, tc.adam()), 0, (0, f64::INFINITY)),
    };

    let seg_len = segment_len(manifest, tc.segment_secs)?;
    let val = validation_set(manifest, seg_len)?;
    if val.is_empty() {
        return Err(Error::Manifest("no test utterances for validation".into()));
    }
    let train: Vec<_> = manifest.split(Split::Train).collect();
    let log_path = out_dir.join(LOG_FILE);
    let clock = Instant::now();
    let mut summaries = Vec::new();
    let mut written = Vec::new();

    for epoch in start..tc.epochs as u64 {
        let lr = lr_at(epoch as usize, &tc);
        let mut rng = epoch_rng(tc.seed, epoch);
        let mut order = train.clone();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut n_batches = 0usize;
        for chunk in order.chunks(tc.batch_size) {
            let batch = chunk
                .iter()
                .map(|r| Ok(crop_example(&manifest.load_example(r, Some(epoch as usize))?, seg_len, &mut rng)))
                .collect::<Result<Vec<_>>>()?;
            let loss = train_step(&model, &mut store, &mut opt, &batch, &settings.loss, lr, tc.grad_clip)?;
            loss_sum += loss;
            n_batches += 1;
            write_log(
                &log_path,
                &LogLine {
                    kind: "step",
                    epoch: epoch + 1,
                    step: opt.step,
                    lr,
                    loss,
                    val_loss: None,
                    wall_time: clock.elapsed().as_secs_f64(),
                },
            )?;
        }
        let val_loss = evaluate_loss(&model, &store, &val, &settings.loss)?;
        if !val_loss.is_finite() {
            return Err(Error::NonFiniteTraining {
                what: "validation loss",
                param: "<loss>".into(),
            });
        }
        let summary = EpochSummary {
            epoch: epoch + 1,
            train_loss: loss_sum / n_batches.max(1) as f64,
            val_loss,
            lr,
        };
        write_log(
            &log_path,
            &LogLine {
                kind: "epoch",
                epoch: epoch + 1,
                step: opt.step,
                lr,
                loss: summary.train_loss,
                val_loss: Some(val_loss),
                wall_time: clock.elapsed().as_secs_f64(),
            },
        )?;

        let ck = Checkpoint {
            settings: settings.clone(),
            seed: tc.seed,
            epoch: epoch + 1,
            val_loss,
            params: store.clone(),
            optimizer: opt.clone(),
        };
        let path = out_dir.join(epoch_file(epoch + 1));
        ck.save(&path)?;
        written.push(path);
        if val_loss < best.1 {
            best = (epoch + 1, val_loss);
            let path = out_dir.join(BEST_FILE);
            ck.save(&path)?;
            written.push(path);
        }
        on_epoch(&summary);
        summaries.push(summary);
    }

    Ok(TrainOutcome {
        epochs: summaries,
        best_epoch: best.0,
        best_val_loss: best.1,
        checkpoints: written,
        store,
    })
}

fn write_log(path: &Path, line: &LogLine) -> Result<()> {
    let text = serde_json::to_string(line).map_err(|e| Error::Config(e.to_string()))?;
    append_line(path, &text)
}
