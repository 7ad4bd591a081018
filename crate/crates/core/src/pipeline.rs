//! Whole-corpus enhancement and scoring on top of a trained model.

use std::path::{Path, PathBuf};

use crate::data::{save_wav, Manifest, Record, Split};
use crate::error::{Error, Result};
use crate::metrics::{MetricReport, UtteranceScores};
use crate::model::Model;
use crate::params::ParamStore;
use crate::signal::Waveform;

/// What produces the enhanced signal being scored.
#[derive(Clone, Copy)]
pub enum Estimator<'a> {
    Model(&'a Model, &'a ParamStore),
    /// The clean reference itself; scores the metric pipeline, not a model.
    Oracle,
}

fn records<'m>(manifest: &'m Manifest, split: Option<Split>) -> Vec<&'m Record> {
    manifest.records.iter().filter(|r| split.map_or(true, |s| r.split == s)).collect()
}

fn sample_rate(manifest: &Manifest, r: &Record) -> Result<u32> {
    let reader = hound::WavReader::open(manifest.resolve(&r.clean_path)).map_err(|source| Error::Wav {
        path: manifest.resolve(&r.clean_path),
        source,
    })?;
    Ok(reader.spec().sample_rate)
}

/// Scores every record of `split` (all records for `None`) in manifest order,
/// using the fixed evaluation mix of each utterance.
pub fn evaluate_manifest(est: Estimator<'_>, manifest: &Manifest, split: Option<Split>) -> Result<MetricReport> {
    let mut rows = Vec::new();
    for r in records(manifest, split) {
        let ex = manifest.load_example(r, None)?;
        let sr = sample_rate(manifest, r)?;
        let noisy = ex.mixture();
        let enhanced = match est {
            Estimator::Model(model, store) => model.enhance(store, &Waveform::new(noisy.clone(), sr)?)?.speech.samples,
            Estimator::Oracle => ex.speech.clone(),
        };
        rows.push(UtteranceScores::compute(&r.utterance_id, &ex.speech, &noisy, &enhanced, sr)?);
    }
    Ok(MetricReport { rows })
}

/// Paths written for one enhanced input.
#[derive(Clone, Debug, PartialEq)]
pub struct EnhancedFiles {
    pub speech: PathBuf,
    pub noise: Option<PathBuf>,
}

/// Enhances one waveform and writes `<stem>_enhanced.wav` (and
/// `<stem>_noise.wav` when `with_noise`) into `out_dir`.
pub fn enhance_to_dir(
    model: &Model,
    store: &ParamStore,
    input: &Waveform,
    stem: &str,
    out_dir: &Path,
    with_noise: bool,
) -> Result<EnhancedFiles> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let out = model.enhance(store, input)?;
    let speech = out_dir.join(format!("{stem}_enhanced.wav"));
    save_wav(&speech, &out.speech)?;
    let noise = if with_noise {
        let p = out_dir.join(format!("{stem}_noise.wav"));
        save_wav(&p, &out.noise)?;
        Some(p)
    } else {
        None
    };
    Ok(EnhancedFiles { speech, noise })
}

/// Enhances the noisy mixture of every record, named by utterance id.
pub fn enhance_manifest(
    model: &Model,
    store: &ParamStore,
    manifest: &Manifest,
    out_dir: &Path,
    with_noise: bool,
) -> Result<Vec<EnhancedFiles>> {
    manifest
        .records
        .iter()
        .map(|r| {
            let ex = manifest.load_example(r, None)?;
            let sr = sample_rate(manifest, r)?;
            let noisy = Waveform::new(ex.mixture(), sr)?;
            enhance_to_dir(model, store, &noisy, &r.utterance_id, out_dir, with_noise)
        })
        .collect()
}
