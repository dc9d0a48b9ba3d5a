//! Line-oriented output records: the training log and prediction files.
//!
//! Prediction files hold one line per predicted point,
//! `window_id agent_id candidate_id step x y`, where `step` counts future
//! steps from 0. Lines starting with `#` are comments.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossReport;

pub const PREDICTION_HEADER: &str = "# window_id agent_id candidate_id step x y";

/// One training-log line.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub pos: f64,
    pub va: f64,
    pub cons1: f64,
    pub cons2: f64,
    pub total: f64,
}

impl LogRecord {
    pub fn new(step: usize, r: &LossReport) -> Self {
        LogRecord {
            step,
            pos: r.pos,
            va: r.va,
            cons1: r.cons1,
            cons2: r.cons2,
            total: r.total,
        }
    }
}

/// Appends JSON lines to a file.
pub struct JsonlWriter {
    file: fs::File,
    path: std::path::PathBuf,
}

impl JsonlWriter {
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(JsonlWriter {
            file,
            path: path.to_path_buf(),
        })
    }

    pub fn write<T: Serialize>(&mut self, record: &T) -> Result<()> {
        let line = serde_json::to_string(record).map_err(|e| Error::invalid(e.to_string()))?;
        writeln!(self.file, "{line}").map_err(|e| Error::io(&self.path, e))
    }
}

pub fn parse_log(text: &str, source: &str) -> Result<Vec<LogRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: source.to_string(),
                line: i + 1,
                msg: format!("not a training-log record: {e}"),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictionRecord {
    pub window_id: usize,
    pub agent_id: i64,
    pub candidate_id: usize,
    pub step: usize,
    pub x: f64,
    pub y: f64,
}

pub fn format_predictions(records: &[PredictionRecord]) -> String {
    let mut out = String::with_capacity(records.len() * 40 + PREDICTION_HEADER.len() + 1);
    out.push_str(PREDICTION_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{} {} {} {} {} {}\n",
            r.window_id, r.agent_id, r.candidate_id, r.step, r.x, r.y
        ));
    }
    out
}

pub fn parse_predictions(text: &str, source: &str) -> Result<Vec<PredictionRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: source.to_string(),
            line: i + 1,
            msg,
        };
        let f: Vec<&str> = t.split_whitespace().collect();
        if f.len() != 6 {
            return Err(err(format!("expected 6 prediction fields, got {}", f.len())));
        }
        let int = |s: &str, what: &str| s.parse::<usize>().map_err(|_| err(format!("bad {what} {s:?}")));
        let real = |s: &str, what: &str| {
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| err(format!("bad {what} {s:?}")))
        };
        out.push(PredictionRecord {
            window_id: int(f[0], "window id")?,
            agent_id: f[1].parse().map_err(|_| err(format!("bad agent id {:?}", f[1])))?,
            candidate_id: int(f[2], "candidate id")?,
            step: int(f[3], "step")?,
            x: real(f[4], "x")?,
            y: real(f[5], "y")?,
        });
    }
    Ok(out)
}
