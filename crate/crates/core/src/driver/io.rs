use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::train::{Checkpoint, RunRecord};
use crate::error::Result;
use crate::params::{MetaParams, ModulePartition};

/// Paths of the artifacts in a run directory.
#[derive(Debug, Clone, PartialEq)]
pub struct RunFiles {
    pub metrics: PathBuf,
    pub meta_params: PathBuf,
    pub report: PathBuf,
    pub config: PathBuf,
    pub checkpoint: PathBuf,
    pub diagnostics: PathBuf,
}

impl RunFiles {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            metrics: dir.join("metrics.csv"),
            meta_params: dir.join("meta_params.json"),
            report: dir.join("report.json"),
            config: dir.join("config.json"),
            checkpoint: dir.join("checkpoint.json"),
            diagnostics: dir.join("diagnostics.jsonl"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaParamsFile {
    pub meta: MetaParams,
    pub partition: ModulePartition,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alphas: Option<Vec<f64>>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn write_metrics_csv(record: &RunRecord, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["step".to_string(), "mean_train_loss".into(), "mean_val_loss".into()];
    header.extend(record.partition.names().map(|n| format!("sigma2_{n}")));
    header.extend(["grad_norm_phi".into(), "grad_norm_logsigma2".into()]);
    w.write_record(&header)?;
    for m in &record.metrics {
        let mut row = vec![
            m.step.to_string(),
            m.mean_train_loss.to_string(),
            m.mean_val_loss.to_string(),
        ];
        row.extend(m.sigma2.iter().map(f64::to_string));
        row.push(m.grad_norm_phi.to_string());
        row.push(m.grad_norm_log_sigma2.to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes every artifact of a run into `dir`, creating it if needed.
pub fn write_run(record: &RunRecord, dir: &Path) -> Result<RunFiles> {
    fs::create_dir_all(dir)?;
    let files = RunFiles::in_dir(dir);
    write_metrics_csv(record, &files.metrics)?;
    write_json(
        &files.meta_params,
        &MetaParamsFile {
            meta: record.meta.clone(),
            partition: record.partition.clone(),
            alphas: record.alphas.clone(),
        },
    )?;
    write_json(&files.report, record)?;
    write_json(&files.config, &record.config)?;
    write_json(&files.checkpoint, &record.checkpoint)?;
    let mut diag = BufWriter::new(File::create(&files.diagnostics)?);
    for m in &record.metrics {
        serde_json::to_writer(&mut diag, &(m.step, &m.diagnostics))?;
        diag.write_all(b"\n")?;
    }
    diag.flush()?;
    Ok(files)
}

/// Loads the full record written by [`write_run`].
pub fn read_run(dir: &Path) -> Result<RunRecord> {
    let text = fs::read_to_string(RunFiles::in_dir(dir).report)?;
    Ok(serde_json::from_str(&text)?)
}

/// Loads only the checkpoint of a run directory.
pub fn read_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(RunFiles::in_dir(dir).checkpoint)?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::super::tests::small_config;
    use super::super::{meta_train, Algorithm};
    use super::*;

    #[test]
    fn round_trip_through_directory() {
        let mut cfg = small_config(Algorithm::SigmaImaml);
        cfg.meta.steps = 4;
        let rec = meta_train(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let files = write_run(&rec, dir.path()).unwrap();
        assert_eq!(read_run(dir.path()).unwrap(), rec);
        assert_eq!(read_checkpoint(dir.path()).unwrap(), rec.checkpoint);
        let csv = fs::read_to_string(&files.metrics).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(
            lines[0],
            "step,mean_train_loss,mean_val_loss,sigma2_d0,grad_norm_phi,grad_norm_logsigma2"
        );
        assert_eq!(lines.len(), 5);
        let diag = fs::read_to_string(&files.diagnostics).unwrap();
        assert_eq!(diag.lines().count(), 4);
        let mp: MetaParamsFile = serde_json::from_str(&fs::read_to_string(&files.meta_params).unwrap()).unwrap();
        assert_eq!(mp.meta, rec.meta);
    }
}
