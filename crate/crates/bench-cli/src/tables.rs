//! Post-run reporting: transition-recovery tables and plot-ready exports.

use std::collections::BTreeMap;

use fedsession::{Error, Result};

use crate::metrics::MetricsRow;

/// Mean test accuracy per variant over the first `window` training rounds of
/// every session after the first. Row order follows `sessions`; column order
/// follows `variants` (sorted by name).
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionTable {
    pub window: usize,
    pub sessions: Vec<usize>,
    pub variants: Vec<String>,
    /// cells[row][col] for sessions × variants.
    pub cells: Vec<Vec<f64>>,
}

pub fn transition_table(rows: &[MetricsRow], window: usize) -> Result<TransitionTable> {
    if window < 1 {
        return Err(Error::InvalidConfig("transition window must be at least 1".into()));
    }
    let train: Vec<&MetricsRow> = rows.iter().filter(|r| r.is_train()).collect();
    if train.is_empty() {
        return Err(Error::EmptyInput("metrics hold no training rounds"));
    }

    let mut by_variant: BTreeMap<&str, Vec<&MetricsRow>> = BTreeMap::new();
    for row in &train {
        by_variant.entry(&row.variant).or_default().push(row);
    }

    // All variants must have run the same schedule, or the per-session means
    // would not be comparable.
    let shape = |rows: &[&MetricsRow]| -> Vec<(usize, usize)> {
        let mut pairs: Vec<(usize, usize)> = rows
            .iter()
            .map(|r| (r.session, r.round_in_session))
            .collect();
        pairs.sort_unstable();
        pairs
    };
    let reference = shape(by_variant.values().next().expect("nonempty"));
    for (variant, rows) in &by_variant {
        if shape(rows) != reference {
            return Err(Error::InvalidConfig(format!(
                "metrics for `{variant}` cover a different schedule than the other variants"
            )));
        }
    }

    let first_session = reference.iter().map(|(s, _)| *s).min().expect("nonempty");
    let mut sessions: Vec<usize> = reference.iter().map(|(s, _)| *s).collect();
    sessions.sort_unstable();
    sessions.dedup();
    sessions.retain(|&s| s != first_session);

    let variants: Vec<String> = by_variant.keys().map(|v| v.to_string()).collect();
    let mut cells = Vec::with_capacity(sessions.len());
    for &session in &sessions {
        let mut row = Vec::with_capacity(variants.len());
        for variant in &variants {
            let values: Vec<f64> = by_variant[variant.as_str()]
                .iter()
                .filter(|r| r.session == session && r.round_in_session < window)
                .map(|r| r.test_accuracy)
                .collect();
            row.push(values.iter().sum::<f64>() / values.len() as f64);
        }
        cells.push(row);
    }

    Ok(TransitionTable {
        window,
        sessions,
        variants,
        cells,
    })
}

pub fn render_transition_csv(table: &TransitionTable) -> String {
    let mut out = String::from("session");
    for variant in &table.variants {
        out.push(',');
        out.push_str(variant);
    }
    out.push('\n');
    for (session, row) in table.sessions.iter().zip(&table.cells) {
        out.push_str(&format!("{session}"));
        for value in row {
            out.push_str(&format!(",{value}"));
        }
        out.push('\n');
    }
    out
}

pub fn render_transition_text(table: &TransitionTable) -> String {
    let widths: Vec<usize> = table.variants.iter().map(|v| v.len().max(8)).collect();
    let session_width = "session".len();
    let mut out = format!("{:>session_width$}", "session");
    for (variant, width) in table.variants.iter().zip(&widths) {
        out.push_str(&format!("  {variant:>width$}"));
    }
    out.push('\n');
    for (session, row) in table.sessions.iter().zip(&table.cells) {
        out.push_str(&format!("{session:>session_width$}"));
        for (value, width) in row.iter().zip(&widths) {
            out.push_str(&format!("  {value:>width$.4}"));
        }
        out.push('\n');
    }
    out
}

pub const PLOTDATA_HEADER: &str = "variant,global_round,test_accuracy";

/// Long-format accuracy curves: training rounds only, ordered by global
/// round (ties keep input order, so interleaved variants stay grouped).
pub fn render_plotdata(rows: &[MetricsRow]) -> String {
    let mut train: Vec<&MetricsRow> = rows.iter().filter(|r| r.is_train()).collect();
    train.sort_by_key(|r| r.global_round);
    let mut out = String::from(PLOTDATA_HEADER);
    out.push('\n');
    for row in train {
        out.push_str(&format!("{},{},{}\n", row.variant, row.global_round, row.test_accuracy));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(session: usize, round: usize, variant: &str, accuracy: f64) -> MetricsRow {
        MetricsRow {
            session,
            round_in_session: round,
            global_round: session * 3 + round,
            phase: "train".into(),
            variant: variant.into(),
            train_loss: 1.0,
            test_accuracy: accuracy,
            grad_norm_sq: 0.1,
            eta: 0.1,
            comm_up: 2,
            comm_down: 1,
            epochs_this_round: 10,
            wall_ms: 0,
        }
    }

    fn grad_row(session: usize, variant: &str) -> MetricsRow {
        let mut r = row(session, 0, variant, 0.0);
        r.phase = "grad_compute".into();
        r
    }

    #[test]
    fn window_of_one_takes_the_first_round() {
        let rows = vec![
            row(0, 0, "proposed", 0.2),
            row(0, 1, "proposed", 0.3),
            row(1, 0, "proposed", 0.6),
            row(1, 1, "proposed", 0.8),
        ];
        let table = transition_table(&rows, 1).unwrap();
        assert_eq!(table.sessions, vec![1]);
        assert_eq!(table.cells, vec![vec![0.6]]);
    }

    #[test]
    fn constant_accuracy_fills_every_cell() {
        let mut rows = Vec::new();
        for variant in ["proposed", "previous"] {
            for session in 0..3 {
                for round in 0..3 {
                    rows.push(row(session, round, variant, 0.75));
                }
            }
        }
        let table = transition_table(&rows, 10).unwrap();
        assert_eq!(table.sessions, vec![1, 2]);
        assert_eq!(table.variants, vec!["previous", "proposed"]);
        assert!(table.cells.iter().flatten().all(|v| (v - 0.75).abs() < 1e-15));

        let csv = render_transition_csv(&table);
        assert!(csv.starts_with("session,previous,proposed\n"));
        assert!(csv.contains("1,0.75,0.75\n"));

        let text = render_transition_text(&table);
        assert!(text.contains("0.7500"));
    }

    #[test]
    fn grad_rounds_are_ignored_and_schedules_must_match() {
        let rows = vec![
            row(0, 0, "proposed", 0.2),
            grad_row(1, "proposed"),
            row(1, 0, "proposed", 0.9),
        ];
        let table = transition_table(&rows, 5).unwrap();
        assert_eq!(table.cells, vec![vec![0.9]]);

        let mismatched = vec![
            row(0, 0, "proposed", 0.2),
            row(1, 0, "proposed", 0.9),
            row(0, 0, "previous", 0.2),
        ];
        let err = transition_table(&mismatched, 5).unwrap_err();
        assert!(err.to_string().contains("schedule"), "{err}");
    }

    #[test]
    fn plotdata_filters_sorts_and_round_trips() {
        let rows = vec![
            row(1, 0, "proposed", 0.6),
            grad_row(1, "proposed"),
            row(0, 0, "proposed", 0.2),
        ];
        let text = render_plotdata(&rows);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], PLOTDATA_HEADER);
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[1], "proposed,0,0.2");
        assert_eq!(lines[2], "proposed,3,0.6");

        assert_eq!(render_plotdata(&[]), format!("{PLOTDATA_HEADER}\n"));
    }
}
