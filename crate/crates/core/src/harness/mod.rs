//! Configuration, metrics, ASR and the command line.

pub mod asr;
pub mod cli;
pub mod config;
pub mod metrics;

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::swarm::{run_experiment_with, RunOptions, SwarmError};
use config::ExperimentConfig;
use metrics::{Decode, MetricsError, MetricsHeader, MetricsRecord, MetricsWriter};

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Swarm(#[from] SwarmError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

pub fn header_for(cfg: &ExperimentConfig) -> MetricsHeader {
    let decode = if cfg.validation.greedy {
        Decode::Greedy
    } else {
        Decode::TopK
    };
    MetricsHeader::new(
        decode,
        cfg.training.seed,
        cfg.validation.prompts,
        cfg.validation.samples,
    )
}

/// Runs one experiment into `out`: `config.toml`, `metrics.jsonl` (flushed
/// every round) and `checkpoints/node_<k>.ckpt`.
pub fn run_to_dir(
    cfg: &ExperimentConfig,
    out: &Path,
    options: RunOptions,
) -> Result<Vec<MetricsRecord>, RunError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| RunError::Io { path, source }
    };
    std::fs::create_dir_all(out).map_err(io(out))?;
    let cfg_path = out.join("config.toml");
    std::fs::write(&cfg_path, cfg.to_toml()).map_err(io(&cfg_path))?;
    let mut writer = MetricsWriter::create(&out.join("metrics.jsonl"), &header_for(cfg))?;
    let mut all = Vec::new();
    let swarm = run_experiment_with(cfg.clone(), options, |record| {
        writer.append(&record.metrics).map_err(|e| e.to_string())?;
        all.extend(record.metrics.iter().cloned());
        Ok(())
    })?;
    let ckpt = out.join("checkpoints");
    std::fs::create_dir_all(&ckpt).map_err(io(&ckpt))?;
    for (k, state) in swarm.states.iter().enumerate() {
        let path = ckpt.join(format!("node_{k}.ckpt"));
        state.params.save(&path).map_err(|e| RunError::Io {
            path: path.clone(),
            source: std::io::Error::other(e.to_string()),
        })?;
    }
    Ok(all)
}
