//! On-disk layout of a training run.
//!
//! ```text
//! <run>/config.snapshot
//! <run>/round_<k>/checkpoint.bin
//! <run>/round_<k>/weights.csv (+ weights.csv.meta)
//! <run>/round_<k>/record.toml
//! <run>/round_<k>/metrics.csv
//! <run>/ensemble.manifest
//! ```
//!
//! `metrics.csv` is written last, so its presence marks a finished round.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{continue_boost, BoostOutcome, CompletedRound, EpochMetrics, RoundRecord, TrainConfig};
use crate::boost::{WeightMeta, WeightTable};
use crate::codec::{read_file, sha256_hex, write_file};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::Ensemble;
use crate::numeric::Checkpoint;

pub const MANIFEST_VERSION: u32 = 1;
pub const SNAPSHOT_FILE: &str = "config.snapshot";
pub const MANIFEST_FILE: &str = "ensemble.manifest";
pub const METRICS_HEADER: &str = "epoch,loss,lr";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Snapshot {
    pub dataset_sha256: String,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StoredRecord {
    round: u32,
    final_loss: f64,
    trained_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoundEntry {
    pub round: u32,
    pub checkpoint: String,
    pub checkpoint_sha256: String,
    pub weights: String,
    pub final_loss: f64,
    pub trained_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleManifest {
    pub format_version: u32,
    pub variant: String,
    pub betas: Vec<f64>,
    pub rounds: Vec<RoundEntry>,
}

impl EnsembleManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: Self = parse_toml(path, &text)?;
        if manifest.format_version != MANIFEST_VERSION {
            return Err(Error::UnsupportedVersion {
                found: manifest.format_version,
                expected: MANIFEST_VERSION,
            });
        }
        if manifest.rounds.len() != manifest.betas.len() {
            return Err(Error::Schema(format!(
                "{}: {} rounds but {} betas",
                path.display(),
                manifest.rounds.len(),
                manifest.betas.len()
            )));
        }
        Ok(manifest)
    }

    /// Loads every checkpoint (verifying the recorded digests) into an ensemble.
    pub fn load_ensemble(&self, run: &Path, betas: Option<Vec<f64>>) -> Result<Ensemble> {
        let mut models = Vec::with_capacity(self.rounds.len());
        for r in &self.rounds {
            let path = run.join(&r.checkpoint);
            let bytes = read_file(&path)?;
            if sha256_hex(&bytes) != r.checkpoint_sha256 {
                return Err(Error::Corruption {
                    path,
                    message: "checkpoint digest differs from the manifest".into(),
                });
            }
            models.push(Checkpoint::from_bytes(&bytes, &path)?.model);
        }
        Ensemble::new(models, betas.unwrap_or_else(|| self.betas.clone()))
    }
}

pub fn round_dir(run: &Path, round: u32) -> PathBuf {
    run.join(format!("round_{round}"))
}

fn parse_toml<T: serde::de::DeserializeOwned>(path: &Path, text: &str) -> Result<T> {
    toml::from_str(text).map_err(|e| Error::Format {
        offset: e.span().map_or(0, |s| s.start as u64),
        message: format!("{}: {}", path.display(), e.message()),
    })
}

pub fn metrics_csv(metrics: &[EpochMetrics]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for m in metrics {
        let _ = writeln!(out, "{},{:.16e},{:.16e}", m.epoch, m.loss, m.lr);
    }
    out
}

pub fn parse_metrics_csv(path: &Path, text: &str) -> Result<Vec<EpochMetrics>> {
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::Schema(format!("{}: expected header {METRICS_HEADER}", path.display())));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let bad = || Error::Schema(format!("{}: malformed line {}", path.display(), i + 2));
            let mut f = line.split(',');
            let (Some(e), Some(l), Some(r), None) = (f.next(), f.next(), f.next(), f.next()) else {
                return Err(bad());
            };
            Ok(EpochMetrics {
                epoch: e.parse().map_err(|_| bad())?,
                loss: l.parse().map_err(|_| bad())?,
                lr: r.parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

/// Persists one finished round.
pub fn save_round(run: &Path, round: &CompletedRound, config: &TrainConfig) -> Result<RoundEntry> {
    let k = round.record.round;
    let dir = round_dir(run, k);
    let ckpt = Checkpoint {
        model: round.model.clone(),
        optimizer: Some(round.optimizer.clone()),
    }
    .to_bytes();
    write_file(&dir.join("checkpoint.bin"), &ckpt)?;
    round.table.save(
        &dir.join("weights.csv"),
        &WeightMeta {
            round: round.table.round(),
            alpha: round.table.alpha(),
            lambda: config.lambda,
            ema_momentum: config.ema_momentum,
        },
    )?;
    let stored = StoredRecord {
        round: k,
        final_loss: round.record.final_loss,
        trained_samples: round.record.trained_samples,
    };
    let text = toml::to_string(&stored).expect("record serializes");
    write_file(&dir.join("record.toml"), text.as_bytes())?;
    write_file(&dir.join("metrics.csv"), metrics_csv(&round.record.metrics).as_bytes())?;
    Ok(entry_for(k, &ckpt, &round.record))
}

fn entry_for(k: u32, ckpt: &[u8], record: &RoundRecord) -> RoundEntry {
    RoundEntry {
        round: k,
        checkpoint: format!("round_{k}/checkpoint.bin"),
        checkpoint_sha256: sha256_hex(ckpt),
        weights: format!("round_{k}/weights.csv"),
        final_loss: record.final_loss,
        trained_samples: record.trained_samples,
    }
}

/// Restores a finished round; `None` if it has not been completed.
pub fn load_round(run: &Path, k: u32) -> Result<Option<CompletedRound>> {
    let dir = round_dir(run, k);
    let metrics_path = dir.join("metrics.csv");
    if !metrics_path.exists() {
        return Ok(None);
    }
    let ckpt_path = dir.join("checkpoint.bin");
    let ckpt = Checkpoint::load(&ckpt_path)?;
    let optimizer = ckpt.optimizer.ok_or_else(|| Error::Corruption {
        path: ckpt_path.clone(),
        message: "round checkpoint lacks optimizer state".into(),
    })?;
    let (table, meta) = WeightTable::load(&dir.join("weights.csv"))?;
    if meta.round != k {
        return Err(Error::Corruption {
            path: dir.join("weights.csv"),
            message: format!("weight table is for round {}, expected {k}", meta.round),
        });
    }
    let text = std::fs::read_to_string(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    let metrics = parse_metrics_csv(&metrics_path, &text)?;
    let record_path = dir.join("record.toml");
    let text = std::fs::read_to_string(&record_path).map_err(|e| Error::io(&record_path, e))?;
    let stored: StoredRecord = parse_toml(&record_path, &text)?;
    if stored.round != k {
        return Err(Error::Corruption {
            path: record_path,
            message: format!("record is for round {}, expected {k}", stored.round),
        });
    }
    Ok(Some(CompletedRound {
        model: ckpt.model,
        optimizer,
        table,
        record: RoundRecord {
            round: k,
            final_loss: stored.final_loss,
            metrics,
            trained_samples: stored.trained_samples,
            wall_clock: Duration::ZERO,
        },
    }))
}

fn snapshot_text(snapshot: &Snapshot) -> String {
    toml::to_string(snapshot).expect("snapshot serializes")
}

/// Trains into `run`, optionally resuming from rounds already on disk.
///
/// Resuming requires the stored snapshot to match `config` and the dataset.
pub fn train_to_dir(
    dataset: &Dataset,
    dataset_sha256: &str,
    config: &TrainConfig,
    run: &Path,
    resume: bool,
) -> Result<BoostOutcome> {
    config.validate()?;
    let snapshot = Snapshot {
        dataset_sha256: dataset_sha256.to_string(),
        train: config.clone(),
    };
    let snapshot_path = run.join(SNAPSHOT_FILE);
    let mut completed = Vec::new();
    let mut entries = Vec::new();
    if resume {
        let text = std::fs::read_to_string(&snapshot_path).map_err(|e| Error::io(&snapshot_path, e))?;
        let stored: Snapshot = parse_toml(&snapshot_path, &text)?;
        if stored.dataset_sha256 != snapshot.dataset_sha256 {
            return Err(Error::Contract(format!(
                "{}: run was trained on a different dataset",
                snapshot_path.display()
            )));
        }
        if stored.train != snapshot.train {
            return Err(Error::config(
                "train",
                format!("{} differs from the requested config", snapshot_path.display()),
            ));
        }
        let mut k = 1;
        while k as usize <= config.effective_rounds() {
            let Some(round) = load_round(run, k)? else { break };
            let bytes = read_file(&round_dir(run, k).join("checkpoint.bin"))?;
            entries.push(entry_for(k, &bytes, &round.record));
            completed.push(round);
            k += 1;
        }
    } else {
        if run.join(MANIFEST_FILE).exists() || round_dir(run, 1).exists() {
            return Err(Error::Contract(format!(
                "{} already holds a run; pass --resume to continue it",
                run.display()
            )));
        }
        write_file(&snapshot_path, snapshot_text(&snapshot).as_bytes())?;
    }
    let outcome = continue_boost(
        &dataset.train,
        dataset.num_train_classes(),
        config,
        completed,
        |round| {
            entries.push(save_round(run, round, config)?);
            Ok(())
        },
    )?;
    let manifest = EnsembleManifest {
        format_version: MANIFEST_VERSION,
        variant: config.variant.name().to_string(),
        betas: config.betas_used(),
        rounds: entries,
    };
    let text = toml::to_string(&manifest).expect("manifest serializes");
    write_file(&run.join(MANIFEST_FILE), text.as_bytes())?;
    Ok(outcome)
}
