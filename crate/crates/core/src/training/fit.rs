use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::{derived_seed, save_checkpoint, train_step, ModelBundle, TrainError};
use crate::dataset::LoadedDataset;
use crate::losses::{append_report, LossReport};

/// Seed of the batch drawn at `step`; a resumed run draws the same batches.
pub fn batch_seed(seed: u64, step: u64) -> u64 {
    derived_seed(seed, step, 0)
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    /// Full bundle after the last step; inference reads its EMA shadows.
    pub final_checkpoint: PathBuf,
    pub checkpoints: Vec<PathBuf>,
    pub reports: Vec<LossReport>,
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Train from `bundle.step` up to `config.total_steps`, appending one JSON
/// line per step to `out_dir/losses.jsonl` and checkpointing every
/// `checkpoint_every` steps plus once at the end as `final.ckpt`.
pub fn fit(
    mut bundle: ModelBundle,
    data: &LoadedDataset,
    out_dir: &Path,
    mut on_step: impl FnMut(&LossReport),
) -> Result<(ModelBundle, FitOutcome), TrainError> {
    bundle.config.validate()?;
    if data.resolution != bundle.config.model.resolution {
        return Err(TrainError::BatchMismatch(format!(
            "dataset at {}², model at {}²",
            data.resolution, bundle.config.model.resolution
        )));
    }
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let log_path = out_dir.join("losses.jsonl");
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(io_err(&log_path))?;
    let mut checkpoints = Vec::new();
    let mut reports = Vec::new();
    let cfg = bundle.config.clone();
    while bundle.step < cfg.total_steps {
        let batch = data.sample_training_batch(batch_seed(cfg.seed, bundle.step), cfg.batch_size)?;
        let report = match train_step(&mut bundle, &batch) {
            Ok(r) => r,
            Err(e) => {
                let diag = out_dir.join("diagnostics.txt");
                let text = format!(
                    "step {}\nerror: {e}\nsources: {:?}\nreferences: {:?}\nlast report: {:?}\n",
                    bundle.step,
                    batch.source_ids,
                    batch.reference_ids,
                    reports.last()
                );
                let _ = fs::write(&diag, text);
                log::error!("training aborted at step {}: {e}", bundle.step);
                return Err(e);
            }
        };
        append_report(&mut log, &report)?;
        on_step(&report);
        reports.push(report);
        if cfg.checkpoint_every > 0 && bundle.step % cfg.checkpoint_every == 0 && bundle.step < cfg.total_steps {
            let p = out_dir.join(format!("step_{:06}.ckpt", bundle.step));
            save_checkpoint(&bundle, &p)?;
            checkpoints.push(p);
        }
    }
    log.flush().map_err(io_err(&log_path))?;
    let final_checkpoint = out_dir.join("final.ckpt");
    save_checkpoint(&bundle, &final_checkpoint)?;
    checkpoints.push(final_checkpoint.clone());
    Ok((
        bundle,
        FitOutcome {
            final_checkpoint,
            checkpoints,
            reports,
        },
    ))
}
