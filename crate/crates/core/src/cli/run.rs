//! One training run on disk: `manifest.json`, `metrics.csv` and the
//! best-model checkpoint.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::retrieval_eval::RetrievalReport;
use crate::synthgen::{self, PairedDataset, Split};
use crate::trainer::{
    evaluate_split, train_with_sink, EpochRecord, MetricsSink, SolverStats, TrainConfig,
};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "best.ckpt";
pub const METRICS_HEADER: &str = "epoch,loss_contrastive,loss_swamp,val_r1_pair,is_best,seconds";

/// A dataset file read into memory together with its content hash.
#[derive(Debug, Clone)]
pub struct LoadedData {
    pub path: PathBuf,
    pub sha256: String,
    pub dataset: PairedDataset,
}

impl LoadedData {
    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(LoadedData {
            path: path.to_path_buf(),
            sha256: git_blob_sha256(&bytes),
            dataset: synthgen::from_bytes(&bytes)?,
        })
    }
}

/// SHA-256 over a git blob object (`"blob <len>\0"` followed by the content).
pub fn git_blob_sha256(content: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", content.len()).as_bytes());
    h.update(content);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Completed,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRef {
    pub path: PathBuf,
    pub seed: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Outputs {
    pub metrics: String,
    pub checkpoint: Option<String>,
}

/// Identifies a run inside an ablation sweep.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SweepTag {
    pub param: String,
    pub value: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub status: RunStatus,
    pub config: TrainConfig,
    pub dataset: DatasetRef,
    pub outputs: Outputs,
    pub sweep: Option<SweepTag>,
    /// The metrics row of the returned model.
    pub best: Option<EpochRecord>,
    /// Test-split reports of the reloaded checkpoint.
    pub test: Vec<RetrievalReport>,
    pub solver: Option<SolverStats>,
    pub error: Option<String>,
    pub wall_seconds: f64,
    pub epoch_seconds: Vec<f64>,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Input(format!("{}: {e}", path.display())))
    }

    fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn test_report(&self, direction: &str, error_type: &str) -> Option<&RetrievalReport> {
        self.test.iter().find(|r| {
            r.direction.to_string() == direction && r.error_type.to_string() == error_type
        })
    }
}

/// One CSV line per epoch, flushed as it arrives so a crashed run keeps its
/// history. Wall time is only written when requested.
struct CsvSink {
    out: BufWriter<File>,
    path: PathBuf,
    timings: bool,
    seconds: Vec<f64>,
}

impl CsvSink {
    fn create(path: &Path, timings: bool) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut sink = CsvSink {
            out: BufWriter::new(file),
            path: path.to_path_buf(),
            timings,
            seconds: Vec::new(),
        };
        sink.line(METRICS_HEADER)?;
        Ok(sink)
    }

    fn line(&mut self, text: &str) -> Result<()> {
        writeln!(self.out, "{text}")
            .and_then(|_| self.out.flush())
            .map_err(|e| Error::io(&self.path, e))
    }
}

pub fn metrics_row(r: &EpochRecord, seconds: Option<f64>) -> String {
    format!(
        "{},{},{},{},{},{}",
        r.epoch,
        r.loss_contrastive,
        r.loss_swamp.map(|v| v.to_string()).unwrap_or_default(),
        r.val_r1_pair,
        r.is_best,
        seconds.map(|s| format!("{s:.3}")).unwrap_or_default(),
    )
}

impl MetricsSink for CsvSink {
    fn record(&mut self, record: &EpochRecord, seconds: f64) -> Result<()> {
        self.seconds.push(seconds);
        let row = metrics_row(record, self.timings.then_some(seconds));
        self.line(&row)
    }
}

#[derive(Debug, Clone)]
pub struct RunRequest<'a> {
    pub data: &'a LoadedData,
    pub config: TrainConfig,
    pub out_dir: PathBuf,
    pub timings: bool,
    pub sweep: Option<SweepTag>,
}

/// Trains, writes the run directory and returns its manifest. A failed run
/// still leaves a manifest marked failed before the error is returned.
pub fn run_train(req: &RunRequest<'_>) -> Result<RunManifest> {
    let start = Instant::now();
    std::fs::create_dir_all(&req.out_dir).map_err(|e| Error::io(&req.out_dir, e))?;
    let mut manifest = RunManifest {
        status: RunStatus::Failed,
        config: req.config.clone(),
        dataset: DatasetRef {
            path: req.data.path.clone(),
            seed: req.data.dataset.seed(),
            sha256: req.data.sha256.clone(),
        },
        outputs: Outputs {
            metrics: METRICS_FILE.into(),
            checkpoint: None,
        },
        sweep: req.sweep.clone(),
        best: None,
        test: Vec::new(),
        solver: None,
        error: None,
        wall_seconds: 0.0,
        epoch_seconds: Vec::new(),
    };
    let manifest_path = req.out_dir.join(MANIFEST_FILE);

    let mut sink = CsvSink::create(&req.out_dir.join(METRICS_FILE), req.timings)?;
    let outcome =
        train_with_sink(&req.data.dataset, &req.config, &mut sink).and_then(|(model, history)| {
            let ck_path = req.out_dir.join(CHECKPOINT_FILE);
            Checkpoint::new(model, req.config.clone()).save(&ck_path)?;
            let reloaded = Checkpoint::load(&ck_path)?;
            let test = evaluate_split(&reloaded.model, &req.data.dataset, Split::Test)?;
            Ok((history, test))
        });
    manifest.epoch_seconds = sink.seconds;

    match outcome {
        Ok((history, test)) => {
            manifest.status = RunStatus::Completed;
            manifest.outputs.checkpoint = Some(CHECKPOINT_FILE.into());
            manifest.best = history
                .records
                .iter()
                .find(|r| r.epoch == history.best_epoch)
                .cloned();
            manifest.test = test;
            manifest.solver = Some(history.solver);
            manifest.wall_seconds = start.elapsed().as_secs_f64();
            manifest.save(&manifest_path)?;
            Ok(manifest)
        }
        Err(e) => {
            manifest.error = Some(e.to_string());
            manifest.wall_seconds = start.elapsed().as_secs_f64();
            manifest.save(&manifest_path)?;
            Err(e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_hash_matches_git() {
        // `printf 'hello\n' | git hash-object --object-format=sha256 --stdin`
        assert_eq!(
            git_blob_sha256(b"hello\n"),
            "2cf8d83d9ee29543b34a87727421fdecb7e3f3a183d337639025de576db9ebb4"
        );
    }

    #[test]
    fn metrics_row_leaves_absent_fields_empty() {
        let r = EpochRecord {
            phase: crate::trainer::Phase::Main,
            epoch: 3,
            loss_contrastive: 0.25,
            loss_swamp: None,
            val_r1_pair: 12.5,
            is_best: true,
        };
        assert_eq!(metrics_row(&r, None), "3,0.25,,12.5,true,");
        assert_eq!(metrics_row(&r, Some(1.23456)), "3,0.25,,12.5,true,1.235");
    }
}
