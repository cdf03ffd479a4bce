//! Per-condition tables from a run's summary or from supplied counts.

use std::fmt::Write as _;
use std::path::Path;

use citeprobe_core::experiment::{ConditionCounts, ExperimentSummary, SUMMARY_SCHEMA_VERSION};

use crate::error::DataError;
use crate::io;

pub const SUMMARY_FILE: &str = "summary.json";

pub fn load_summary(run_dir: &Path) -> Result<ExperimentSummary, DataError> {
    let path = run_dir.join(SUMMARY_FILE);
    if !path.exists() {
        return Err(DataError::Invalid(format!("{}: no summary; has the run finished?", run_dir.display())));
    }
    let summary: ExperimentSummary = io::read_json(&path)?;
    if summary.schema_version > SUMMARY_SCHEMA_VERSION {
        return Err(DataError::SchemaVersion {
            path,
            found: summary.schema_version,
            supported: SUMMARY_SCHEMA_VERSION,
        });
    }
    Ok(summary)
}

/// A JSON array of per-condition counts.
pub fn load_counts(path: &Path) -> Result<ExperimentSummary, DataError> {
    let counts: Vec<ConditionCounts> = io::read_json(path)?;
    ExperimentSummary::from_counts(&counts)
        .map_err(|e| DataError::Schema { path: path.into(), message: e.to_string() })
}

fn percent(rate: f64, decimals: usize) -> String {
    format!("{:.*}%", decimals, rate * 100.0)
}

pub fn markdown(summary: &ExperimentSummary) -> String {
    let mut out = String::new();
    out.push_str("| Condition | #Total | #Original statement found | #Adversarial doc cited | Rate |\n");
    out.push_str("|---|---:|---:|---:|---:|\n");
    for r in &summary.conditions {
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} | {} |",
            r.condition.label(),
            r.n_total,
            r.n_recovered,
            r.n_adversarial_cited,
            percent(r.rate, 1)
        );
    }
    let failed: u64 = summary.conditions.iter().map(|r| r.n_failed).sum();
    if failed > 0 {
        let _ = writeln!(out, "\n{failed} trial(s) failed and are counted in #Total only.");
    }
    out
}

/// One `label: NN% (cited/recovered)` entry per condition.
pub fn percentage_line(summary: &ExperimentSummary) -> String {
    summary
        .conditions
        .iter()
        .map(|r| format!("{}: {} ({}/{})", r.condition.label(), percent(r.rate, 0), r.n_adversarial_cited, r.n_recovered))
        .collect::<Vec<_>>()
        .join("; ")
}

pub fn csv(summary: &ExperimentSummary) -> String {
    let mut out = String::from("condition,n_total,n_recovered,n_adversarial_cited,n_failed,rate\n");
    for r in &summary.conditions {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{:.6}",
            r.condition.as_str(),
            r.n_total,
            r.n_recovered,
            r.n_adversarial_cited,
            r.n_failed,
            r.rate
        );
    }
    out
}

/// Markdown table, percentage line and CSV, separated by blank lines.
pub fn render(summary: &ExperimentSummary) -> String {
    format!("{}\n{}\n\n{}", markdown(summary), percentage_line(summary), csv(summary))
}

#[cfg(test)]
mod tests {
    use super::*;
    use citeprobe_core::ForgeCondition;

    fn reported() -> ExperimentSummary {
        let c = |condition, n_total, n_recovered, n_adversarial_cited| ConditionCounts {
            condition,
            n_total,
            n_recovered,
            n_adversarial_cited,
            n_failed: 0,
        };
        ExperimentSummary::from_counts(&[
            c(ForgeCondition::Random, 1344, 936, 116),
            c(ForgeCondition::RelevantNotCited, 702, 476, 273),
            c(ForgeCondition::CitedOther, 829, 525, 290),
        ])
        .unwrap()
    }

    #[test]
    fn table_rows() {
        let md = markdown(&reported());
        assert!(md.contains("| Random | 1344 | 936 | 116 | 12.4% |"), "{md}");
        assert!(md.contains("| Relevant but not cited | 702 | 476 | 273 | 57.4% |"), "{md}");
        assert!(md.contains("| Cited for other reason | 829 | 525 | 290 | 55.2% |"), "{md}");
    }

    #[test]
    fn rounded_percentages() {
        assert_eq!(
            percentage_line(&reported()),
            "Random: 12% (116/936); Relevant but not cited: 57% (273/476); Cited for other reason: 55% (290/525)"
        );
    }

    #[test]
    fn csv_rows() {
        let csv = csv(&reported());
        assert_eq!(csv.lines().nth(1), Some("random,1344,936,116,0,0.123932"));
        assert_eq!(csv.lines().count(), 4);
    }

    #[test]
    fn empty_run_is_all_zero() {
        let md = markdown(&citeprobe_core::experiment::summarize(&[]));
        assert!(md.contains("| Random | 0 | 0 | 0 | 0.0% |"), "{md}");
        assert_eq!(md.lines().count(), 5);
    }
}
