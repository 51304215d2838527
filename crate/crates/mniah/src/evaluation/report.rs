//! Accuracy aggregation and report emission.

use serde::{Deserialize, Serialize};

use super::ItemOutcome;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionAxis {
    ContextLength,
    Depth,
    Gap,
    Round,
}

impl std::fmt::Display for ConditionAxis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ConditionAxis::ContextLength => "context_length",
            ConditionAxis::Depth => "depth",
            ConditionAxis::Gap => "gap",
            ConditionAxis::Round => "round",
        };
        f.write_str(s)
    }
}

/// Accuracy at one condition value. Items whose verdict failed to parse
/// are counted in `n_failed` and excluded from the accuracy fraction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConditionRow {
    pub condition: f64,
    pub n_judged: usize,
    pub n_correct: usize,
    pub n_failed: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub axis: ConditionAxis,
    pub rows: Vec<ConditionRow>,
}

/// Provenance stamped into every emitted report file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportMeta {
    pub config_hash: String,
    pub seed: u64,
    pub tokenizer_profile: String,
}

/// Difference of two accuracy values, rounded to microunit precision so
/// report deltas are stable decimals.
pub fn delta(from: f64, to: f64) -> f64 {
    round_to(from - to, 6)
}

pub fn round_to(x: f64, places: u32) -> f64 {
    let factor = 10f64.powi(places as i32);
    (x * factor).round() / factor
}

/// Conditions are bucketed at millicondition resolution so float values
/// like 2.5 group exactly.
pub(crate) fn condition_key(condition: f64) -> i64 {
    (condition * 1000.0).round() as i64
}

/// Folds per-item outcomes into per-condition accuracy rows, ascending by
/// condition.
pub fn report_from_outcomes(axis: ConditionAxis, outcomes: &[ItemOutcome]) -> RunReport {
    let mut grouped: std::collections::BTreeMap<i64, (usize, usize, usize)> =
        std::collections::BTreeMap::new();
    for o in outcomes {
        let entry = grouped.entry(condition_key(o.condition)).or_default();
        match o.correct {
            Some(true) => {
                entry.0 += 1;
                entry.1 += 1;
            }
            Some(false) => {
                entry.0 += 1;
            }
            None => {
                entry.2 += 1;
            }
        }
    }
    let rows = grouped
        .into_iter()
        .map(|(key, (n_judged, n_correct, n_failed))| ConditionRow {
            condition: key as f64 / 1000.0,
            n_judged,
            n_correct,
            n_failed,
            accuracy: if n_judged == 0 {
                0.0
            } else {
                n_correct as f64 / n_judged as f64
            },
        })
        .collect();
    RunReport { axis, rows }
}

impl RunReport {
    pub fn row_at(&self, condition: f64) -> Option<&ConditionRow> {
        let key = condition_key(condition);
        self.rows.iter().find(|r| condition_key(r.condition) == key)
    }

    /// Accuracy drop from one condition to another.
    pub fn delta_between(&self, from: f64, to: f64) -> Option<f64> {
        Some(delta(self.row_at(from)?.accuracy, self.row_at(to)?.accuracy))
    }

    /// Flat CSV with provenance comment lines; the delta column is the drop
    /// from the first condition's accuracy.
    pub fn to_csv(&self, meta: &ReportMeta) -> String {
        let mut out = String::new();
        out.push_str(&format!("# config_hash={}\n", meta.config_hash));
        out.push_str(&format!("# seed={}\n", meta.seed));
        out.push_str(&format!("# tokenizer_profile={}\n", meta.tokenizer_profile));
        out.push_str(&format!("# axis={}\n", self.axis));
        out.push_str("condition,n,correct,failed,accuracy,delta_vs_first\n");
        let first = self.rows.first().map(|r| r.accuracy).unwrap_or(0.0);
        for row in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{:.6},{:.6}\n",
                fmt_condition(row.condition),
                row.n_judged,
                row.n_correct,
                row.n_failed,
                row.accuracy,
                delta(first, row.accuracy),
            ));
        }
        out
    }
}

fn fmt_condition(c: f64) -> String {
    if (c - c.round()).abs() < 1e-9 {
        format!("{}", c.round() as i64)
    } else {
        format!("{c}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn outcome(condition: f64, correct: Option<bool>) -> ItemOutcome {
        ItemOutcome {
            record_type: "item_outcome".into(),
            run: "t".into(),
            axis: ConditionAxis::ContextLength,
            condition,
            item_id: "x".into(),
            correct,
            answer: String::new(),
            thinking_tokens: None,
            thinking_extracted: None,
        }
    }

    #[test]
    fn delta_reproduces_clean_decimals() {
        assert_eq!(delta(85.7, 59.9), 25.8);
        assert_eq!(delta(89.3, 84.7), 4.6);
        assert_eq!(delta(0.857, 0.599), 0.258);
    }

    #[test]
    fn failed_verdicts_are_excluded_from_accuracy() {
        let outcomes = vec![
            outcome(1000.0, Some(true)),
            outcome(1000.0, Some(false)),
            outcome(1000.0, None),
        ];
        let report = report_from_outcomes(ConditionAxis::ContextLength, &outcomes);
        let row = &report.rows[0];
        assert_eq!(row.n_judged, 2);
        assert_eq!(row.n_failed, 1);
        assert_eq!(row.accuracy, 0.5);
    }

    #[test]
    fn rows_sort_by_condition_and_group_floats() {
        let outcomes = vec![
            outcome(12.5, Some(true)),
            outcome(2.5, Some(true)),
            outcome(2.5, Some(false)),
        ];
        let report = report_from_outcomes(ConditionAxis::Depth, &outcomes);
        assert_eq!(report.rows.len(), 2);
        assert_eq!(report.rows[0].condition, 2.5);
        assert_eq!(report.rows[0].n_judged, 2);
        assert_eq!(report.rows[1].condition, 12.5);
    }

    #[test]
    fn csv_embeds_provenance_and_delta() {
        let outcomes = vec![outcome(1000.0, Some(true)), outcome(10_000.0, Some(false))];
        let report = report_from_outcomes(ConditionAxis::ContextLength, &outcomes);
        let csv = report.to_csv(&ReportMeta {
            config_hash: "abc123".into(),
            seed: 7,
            tokenizer_profile: "builtin-ws".into(),
        });
        assert!(csv.contains("# config_hash=abc123"));
        assert!(csv.contains("# seed=7"));
        assert!(csv.starts_with("#"));
        assert!(csv.contains("1000,1,1,0,1.000000,0.000000"));
        assert!(csv.contains("10000,1,0,0,0.000000,1.000000"));
    }
}
