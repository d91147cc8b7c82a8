//! Run directories: `metrics.csv`, one checkpoint per model, `manifest.json`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::write_checkpoint;
use crate::error::Result;
use crate::trilearning::{EpochLog, TrainConfig, TrainOutcome};

pub const METRICS_HEADER: &str = "epoch,rsum_val,i2t_r1,i2t_r5,i2t_r10,t2i_r1,t2i_r5,t2i_r10,\
partition_precision,partition_recall,partition_f1,mean_loss";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool_version: String,
    pub config: TrainConfig,
    pub dataset_path: String,
    pub dataset_sha256: String,
    pub artifacts: Vec<String>,
    pub duration_secs: f64,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn metrics_csv(logs: &[EpochLog]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for l in logs {
        let r = l.r_at_k;
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}\n",
            l.epoch,
            l.rsum_val,
            r[0],
            r[1],
            r[2],
            r[3],
            r[4],
            r[5],
            l.partition_precision,
            l.partition_recall,
            l.partition_f1,
            l.mean_loss
        ));
    }
    out
}

/// Writes the run directory and returns the paths written, manifest last.
pub fn write_run(
    dir: impl AsRef<Path>,
    outcome: &TrainOutcome,
    cfg: &TrainConfig,
    dataset_path: &str,
    dataset_sha256: &str,
    duration: Duration,
) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();

    let metrics = dir.join("metrics.csv");
    fs::write(&metrics, metrics_csv(&outcome.logs))?;
    written.push(metrics);

    for (name, params) in outcome.models.named() {
        let p = dir.join(format!("{name}.tsvm"));
        write_checkpoint(params, &p)?;
        written.push(p);
    }

    let manifest = Manifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        config: *cfg,
        dataset_path: dataset_path.to_string(),
        dataset_sha256: dataset_sha256.to_string(),
        artifacts: written
            .iter()
            .filter_map(|p| p.file_name().map(|f| f.to_string_lossy().into_owned()))
            .collect(),
        duration_secs: duration.as_secs_f64(),
    };
    let path = dir.join("manifest.json");
    let mut f = fs::File::create(&path)?;
    serde_json::to_writer_pretty(&mut f, &manifest).map_err(std::io::Error::other)?;
    f.write_all(b"\n")?;
    written.push(path);
    Ok(written)
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| crate::TsvcError::Format { offset: 0, message: e.to_string() })
}
