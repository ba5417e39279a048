//! Run directory layout and artifact helpers.
//!
//! ```text
//! <run>/
//!   config.txt                 effective configuration snapshot
//!   vocab.txt                  vocabulary (one token per line)
//!   checkpoints/               base, m_ift, rp{s}_iter{i}
//!   pairs/                     preference pairs per stage, JSONL
//!   reports/                   metrics JSONL, evaluation.csv, summary.csv
//! ```

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new<P: Into<PathBuf>>(root: P) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn create_layout(&self) -> std::io::Result<()> {
        std::fs::create_dir_all(self.checkpoints_dir())?;
        std::fs::create_dir_all(self.pairs_dir())?;
        std::fs::create_dir_all(self.reports_dir())?;
        Ok(())
    }

    pub fn config_path(&self) -> PathBuf {
        self.root.join("config.txt")
    }

    pub fn vocab_path(&self) -> PathBuf {
        self.root.join("vocab.txt")
    }

    pub fn checkpoints_dir(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn pairs_dir(&self) -> PathBuf {
        self.root.join("pairs")
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn base_checkpoint(&self) -> PathBuf {
        self.checkpoints_dir().join("base.ckpt")
    }

    pub fn m_ift_checkpoint(&self) -> PathBuf {
        self.checkpoints_dir().join("m_ift.ckpt")
    }

    pub fn provider_checkpoint(&self, provider: usize, iteration: u32) -> PathBuf {
        self.checkpoints_dir()
            .join(format!("rp{provider}_iter{iteration}.ckpt"))
    }

    pub fn stage1_pairs_path(&self, provider: usize) -> PathBuf {
        self.pairs_dir().join(format!("stage1_rp{provider}.jsonl"))
    }

    pub fn task_pairs_path(&self, iteration: u32, provider: usize) -> PathBuf {
        self.pairs_dir()
            .join(format!("task_iter{iteration}_rp{provider}.jsonl"))
    }

    pub fn ift_metrics_path(&self) -> PathBuf {
        self.reports_dir().join("ift_metrics.jsonl")
    }

    pub fn stage1_report_path(&self) -> PathBuf {
        self.reports_dir().join("stage1.jsonl")
    }

    pub fn task_reports_path(&self) -> PathBuf {
        self.reports_dir().join("task_iterations.jsonl")
    }

    pub fn selection_path(&self) -> PathBuf {
        self.reports_dir().join("selection.json")
    }

    pub fn evaluation_csv_path(&self) -> PathBuf {
        self.reports_dir().join("evaluation.csv")
    }

    pub fn summary_csv_path(&self) -> PathBuf {
        self.reports_dir().join("summary.csv")
    }
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> std::io::Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> std::io::Result<Vec<T>> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut items = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        items.push(serde_json::from_str(&line)?);
    }
    Ok(items)
}

/// One row of the evaluation CSV (`method,accuracy,perplexity`).
#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationRow {
    pub method: String,
    pub accuracy: f64,
    pub perplexity: f64,
}

impl EvaluationRow {
    /// Iteration index parsed from methods of the form `...-iter<k>`.
    pub fn iteration(&self) -> Option<u32> {
        self.method
            .rsplit_once("iter")
            .and_then(|(_, k)| k.parse().ok())
    }
}

pub fn write_evaluation_csv(path: &Path, rows: &[EvaluationRow]) -> std::io::Result<()> {
    let mut body = String::from("method,accuracy,perplexity\n");
    for row in rows {
        body.push_str(&format!(
            "{},{},{}\n",
            row.method, row.accuracy, row.perplexity
        ));
    }
    std::fs::write(path, body)
}

pub fn read_evaluation_csv(path: &Path) -> std::io::Result<Vec<EvaluationRow>> {
    let body = std::fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (i, line) in body.lines().enumerate() {
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                format!("evaluation.csv line {}: expected 3 fields", i + 1),
            ));
        }
        let parse = |s: &str| {
            s.parse::<f64>().map_err(|e| {
                std::io::Error::new(
                    std::io::ErrorKind::InvalidData,
                    format!("evaluation.csv line {}: {e}", i + 1),
                )
            })
        };
        rows.push(EvaluationRow {
            method: fields[0].to_string(),
            accuracy: parse(fields[1])?,
            perplexity: parse(fields[2])?,
        });
    }
    Ok(rows)
}
