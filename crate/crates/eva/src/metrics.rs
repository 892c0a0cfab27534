//! CSV metrics: one header line, then one row per logging point. The file is
//! append-only and `env_step` must be strictly increasing, so a one-pass
//! reader can consume it while a run is still writing.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

pub const CSV_HEADER: &str =
    "env_step,episode_return,loss,planning_count,value_buffer_hit_rate,lambda";

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("env_step must increase: wrote {prev} then {next}")]
    NonMonotonicStep { prev: u64, next: u64 },
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

/// One logging point. `episode_return` is the mean over the last (up to) 100
/// completed episodes, empty until the first episode finishes; `loss` is the
/// most recent training loss, empty before training starts.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub env_step: u64,
    pub episode_return: Option<f64>,
    pub loss: Option<f32>,
    pub planning_count: u64,
    pub value_buffer_hit_rate: f64,
    pub lambda: f32,
}

impl MetricsRow {
    fn to_csv(&self) -> String {
        let ret = self
            .episode_return
            .map(|r| r.to_string())
            .unwrap_or_default();
        let loss = self.loss.map(|l| l.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{}",
            self.env_step, ret, loss, self.planning_count, self.value_buffer_hit_rate, self.lambda
        )
    }
}

/// Streaming writer that enforces the header-first, monotone-step contract.
pub struct MetricsWriter {
    out: BufWriter<File>,
    path: PathBuf,
    last_step: Option<u64>,
}

impl MetricsWriter {
    pub fn create(path: impl AsRef<Path>) -> Result<Self, MetricsError> {
        let path = path.as_ref().to_path_buf();
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        let mut out = BufWriter::new(File::create(&path)?);
        writeln!(out, "{CSV_HEADER}")?;
        Ok(MetricsWriter {
            out,
            path,
            last_step: None,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn write(&mut self, row: &MetricsRow) -> Result<(), MetricsError> {
        if let Some(prev) = self.last_step {
            if row.env_step <= prev {
                return Err(MetricsError::NonMonotonicStep {
                    prev,
                    next: row.env_step,
                });
            }
        }
        writeln!(self.out, "{}", row.to_csv())?;
        self.last_step = Some(row.env_step);
        Ok(())
    }

    pub fn flush(&mut self) -> Result<(), MetricsError> {
        self.out.flush()?;
        Ok(())
    }
}

/// One-pass parse of a whole metrics file.
pub fn parse_metrics(text: &str) -> Result<Vec<MetricsRow>, MetricsError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header == CSV_HEADER => {}
        other => {
            return Err(MetricsError::Parse {
                line: 1,
                reason: format!(
                    "expected header {CSV_HEADER:?}, got {:?}",
                    other.map(|(_, l)| l).unwrap_or("")
                ),
            })
        }
    }
    let mut rows: Vec<MetricsRow> = Vec::new();
    for (idx, line) in lines {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(MetricsError::Parse {
                line: idx + 1,
                reason: format!("expected 6 fields, got {}", fields.len()),
            });
        }
        let bad = |what: &str| MetricsError::Parse {
            line: idx + 1,
            reason: format!("bad {what} field {:?}", fields),
        };
        let row = MetricsRow {
            env_step: fields[0].parse().map_err(|_| bad("env_step"))?,
            episode_return: if fields[1].is_empty() {
                None
            } else {
                Some(fields[1].parse().map_err(|_| bad("episode_return"))?)
            },
            loss: if fields[2].is_empty() {
                None
            } else {
                Some(fields[2].parse().map_err(|_| bad("loss"))?)
            },
            planning_count: fields[3].parse().map_err(|_| bad("planning_count"))?,
            value_buffer_hit_rate: fields[4]
                .parse()
                .map_err(|_| bad("value_buffer_hit_rate"))?,
            lambda: fields[5].parse().map_err(|_| bad("lambda"))?,
        };
        if let Some(prev) = rows.last() {
            if row.env_step <= prev.env_step {
                return Err(MetricsError::Parse {
                    line: idx + 1,
                    reason: format!(
                        "env_step not increasing: {} then {}",
                        prev.env_step, row.env_step
                    ),
                });
            }
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Read and parse a metrics file from disk.
pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricsRow>, MetricsError> {
    parse_metrics(&std::fs::read_to_string(path)?)
}
