//! Plot-ready tab-separated report tables.

use crate::metrics::{EvalReport, ExpertUsage};
use crate::train::SweepTable;

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |x| format!("{x:.6}"))
}

/// One row per task plus an aggregate row.
pub fn render_eval_report(report: &EvalReport) -> String {
    let mut out = String::from(
        "task\tauc\taccuracy\tmajority_accuracy\tminority_accuracy\tcross_entropy\n",
    );
    for t in &report.tasks {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\n",
            t.task,
            fmt_opt(t.auc),
            fmt_opt(t.accuracy),
            fmt_opt(t.majority_accuracy),
            fmt_opt(t.minority_accuracy),
            fmt_opt(t.cross_entropy),
        ));
    }
    out.push_str(&format!(
        "aggregate\t{}\t-\t-\t-\t-\n",
        fmt_opt(report.mean_auc)
    ));
    out
}

/// Pie-chart-ready rows: mean gate weight per (class, expert), then one
/// dominant-class row per expert.
pub fn render_expert_usage(usage: &ExpertUsage) -> String {
    let mut out = String::from("class\texpert\tmean_gate_weight\n");
    for class in 0..2 {
        for (z, w) in usage.class_weights[class].iter().enumerate() {
            out.push_str(&format!("{class}\t{z}\t{w:.6}\n"));
        }
    }
    out.push_str("expert\tdominant_class\n");
    for (z, c) in usage.dominant_class.iter().enumerate() {
        out.push_str(&format!("{z}\t{c}\n"));
    }
    out
}

/// Full grid with per-seed validation AUCs; the best row is flagged.
pub fn render_sweep_table(table: &SweepTable) -> String {
    let mut out = String::from("experts\tlambda\tmean_val_auc\tmean_test_auc\tper_seed_val_auc\tbest\n");
    for (i, row) in table.rows.iter().enumerate() {
        let seeds = row
            .val_auc
            .iter()
            .map(|v| fmt_opt(*v))
            .collect::<Vec<_>>()
            .join(",");
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\n",
            row.experts,
            row.lambda,
            fmt_opt(row.mean_val_auc),
            fmt_opt(row.mean_test_auc),
            seeds,
            if i == table.best { "*" } else { "" },
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::TaskReport;
    use crate::train::SweepRow;

    #[test]
    fn eval_report_has_task_rows_plus_aggregate() {
        let report = EvalReport {
            split: "test".to_string(),
            tasks: vec![TaskReport {
                task: 0,
                auc: Some(0.875),
                accuracy: Some(0.9),
                majority_accuracy: Some(0.95),
                minority_accuracy: Some(0.5),
                cross_entropy: Some(0.3),
            }],
            mean_auc: Some(0.875),
        };
        let text = render_eval_report(&report);
        assert_eq!(text.lines().count(), 3);
        assert!(text.contains("0\t0.875000"));
        assert!(text.lines().last().unwrap().starts_with("aggregate"));
    }

    #[test]
    fn sweep_table_marks_best() {
        let table = SweepTable {
            rows: vec![
                SweepRow {
                    experts: 2,
                    lambda: 0.1,
                    val_auc: vec![Some(0.6)],
                    mean_val_auc: Some(0.6),
                    mean_test_auc: Some(0.55),
                },
                SweepRow {
                    experts: 3,
                    lambda: 0.1,
                    val_auc: vec![Some(0.7)],
                    mean_val_auc: Some(0.7),
                    mean_test_auc: Some(0.68),
                },
            ],
            best: 1,
        };
        let text = render_sweep_table(&table);
        let best_line = text.lines().find(|l| l.starts_with('3')).unwrap();
        assert!(best_line.ends_with('*'));
    }
}
