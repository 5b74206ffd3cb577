//! The metrics.csv format: one row per executed round, LF line endings,
//! floats printed in shortest round-trip form so equal runs produce equal
//! bytes.

use std::path::Path;

use fedsession::server::RoundMetrics;
use fedsession::{Error, Result};

pub const METRICS_HEADER: &str = "session,round_in_session,global_round,phase,variant,\
train_loss,test_accuracy,grad_norm_sq,eta,comm_up,comm_down,epochs_this_round,wall_ms";

pub fn render_metrics(rows: &[RoundMetrics]) -> String {
    let mut out = String::with_capacity(64 * (rows.len() + 1));
    out.push_str(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.session,
            r.round_in_session,
            r.global_round,
            r.phase.as_str(),
            r.variant.name(),
            r.train_loss,
            r.test_accuracy,
            r.grad_norm_sq,
            r.eta,
            r.comm_up,
            r.comm_down,
            r.epochs_this_round,
            r.wall_ms,
        ));
    }
    out
}

pub fn write_metrics(path: impl AsRef<Path>, rows: &[RoundMetrics]) -> Result<()> {
    std::fs::write(path, render_metrics(rows))?;
    Ok(())
}

/// One parsed metrics row; `phase` and `variant` stay as strings so files
/// from future variants still read.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub session: usize,
    pub round_in_session: usize,
    pub global_round: usize,
    pub phase: String,
    pub variant: String,
    pub train_loss: f64,
    pub test_accuracy: f64,
    pub grad_norm_sq: f64,
    pub eta: f64,
    pub comm_up: usize,
    pub comm_down: usize,
    pub epochs_this_round: usize,
    pub wall_ms: u64,
}

impl MetricsRow {
    pub fn is_train(&self) -> bool {
        self.phase == "train"
    }
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricsRow>> {
    parse_metrics(&std::fs::read_to_string(path)?)
}

pub fn parse_metrics(content: &str) -> Result<Vec<MetricsRow>> {
    let mut lines = content.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header == METRICS_HEADER => {}
        Some((_, header)) => {
            return Err(Error::CsvParse {
                line: 1,
                reason: format!("unexpected metrics header `{header}`"),
            })
        }
        None => {
            return Err(Error::CsvParse {
                line: 1,
                reason: "empty metrics file".into(),
            })
        }
    }
    let mut rows = Vec::new();
    for (idx, line) in lines {
        if line.is_empty() {
            continue;
        }
        let lineno = idx + 1;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 13 {
            return Err(Error::CsvParse {
                line: lineno,
                reason: format!("expected 13 fields, found {}", fields.len()),
            });
        }
        fn num<T: std::str::FromStr>(line: usize, name: &str, text: &str) -> Result<T>
        where
            T::Err: std::fmt::Display,
        {
            text.parse::<T>().map_err(|e| Error::CsvParse {
                line,
                reason: format!("{name} `{text}`: {e}"),
            })
        }
        rows.push(MetricsRow {
            session: num(lineno, "session", fields[0])?,
            round_in_session: num(lineno, "round_in_session", fields[1])?,
            global_round: num(lineno, "global_round", fields[2])?,
            phase: fields[3].to_string(),
            variant: fields[4].to_string(),
            train_loss: num(lineno, "train_loss", fields[5])?,
            test_accuracy: num(lineno, "test_accuracy", fields[6])?,
            grad_norm_sq: num(lineno, "grad_norm_sq", fields[7])?,
            eta: num(lineno, "eta", fields[8])?,
            comm_up: num(lineno, "comm_up", fields[9])?,
            comm_down: num(lineno, "comm_down", fields[10])?,
            epochs_this_round: num(lineno, "epochs_this_round", fields[11])?,
            wall_ms: num(lineno, "wall_ms", fields[12])?,
        });
    }
    Ok(rows)
}
