//! Plain-text tables: scores ×100 with two decimals, `*` for p < 0.05,
//! `mean(std)` cells for repeated runs.

use std::fmt::Write as _;

use super::{GridSearchReport, LimitedDataReport};
use crate::evaluation::{format_mean_std, format_percent, format_score, AggregateStats};

#[derive(Debug, Clone, PartialEq)]
pub struct Table2Row {
    pub dataset: String,
    pub source: f64,
    pub merged: f64,
    pub significant: bool,
    pub alpha_lower: f64,
    pub alpha_upper: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table3Row {
    pub dataset: String,
    pub source: f64,
    pub limited: AggregateStats,
    pub significant: bool,
}

pub fn render_table2(rows: &[Table2Row]) -> String {
    let mut out = format!("{:<12}{:>8}{:>9}{:>9}{:>9}\n", "Dataset", "Source", "Merged", "α_lower", "α_upper");
    for r in rows {
        writeln!(
            out,
            "{:<12}{:>8}{:>9}{:>9.2}{:>9.2}",
            r.dataset,
            format_percent(r.source),
            format_score(r.merged, r.significant),
            r.alpha_lower,
            r.alpha_upper
        )
        .unwrap();
    }
    out
}

pub fn render_table3(rows: &[Table3Row]) -> String {
    let mut out = format!("{:<12}{:>8}{:>18}{:>8}\n", "Dataset", "Source", "Merged (limited)", "Δ");
    for r in rows {
        writeln!(
            out,
            "{:<12}{:>8}{:>18}{:>+8.2}",
            r.dataset,
            format_percent(r.source),
            format_mean_std(&r.limited, r.significant),
            (r.limited.mean - r.source) * 100.0
        )
        .unwrap();
    }
    out
}

pub fn render_grid_table(report: &GridSearchReport) -> String {
    let mut out = format!("{:>8}{:>9}{:>14}\n", "α_lower", "α_upper", "dev nDCG");
    for c in &report.per_config {
        let mark = if c.alpha_lower == report.selected.alpha_lower && c.alpha_upper == report.selected.alpha_upper {
            "  <- selected"
        } else {
            ""
        };
        writeln!(
            out,
            "{:>8.2}{:>9.2}{:>14}{mark}",
            c.alpha_lower,
            c.alpha_upper,
            format_percent(c.dev_ndcg)
        )
        .unwrap();
    }
    if let Some(row) = report.table2_row("test") {
        out.push('\n');
        out.push_str(&render_table2(&[row]));
    }
    out
}

pub fn render_limited_table(report: &LimitedDataReport) -> String {
    let mut out = format!("{:>4}{:>14}{:>9}{:>9}{:>11}\n", "run", "sample seed", "α_lower", "α_upper", "test");
    for r in &report.runs {
        writeln!(
            out,
            "{:>4}{:>14}{:>9.2}{:>9.2}{:>11}",
            r.run,
            r.sample_seed,
            r.selected.alpha_lower,
            r.selected.alpha_upper,
            format_percent(r.test_ndcg)
        )
        .unwrap();
    }
    out.push('\n');
    out.push_str(&render_table3(&[Table3Row {
        dataset: "test".into(),
        source: report.source_test_ndcg,
        limited: report.stats.clone(),
        significant: false,
    }]));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table2_fixture_row() {
        let t = render_table2(&[Table2Row {
            dataset: "NFCorpus".into(),
            source: 0.3902,
            merged: 0.4059,
            significant: true,
            alpha_lower: 0.75,
            alpha_upper: 1.0,
        }]);
        let row = t.lines().nth(1).unwrap();
        let cells: Vec<&str> = row.split_whitespace().collect();
        assert_eq!(cells, ["NFCorpus", "39.02", "40.59*", "0.75", "1.00"]);
    }

    #[test]
    fn table3_fixture_row() {
        let t = render_table3(&[Table3Row {
            dataset: "NFCorpus".into(),
            source: 0.4162,
            limited: AggregateStats { mean: 0.4036, std: 0.0072, n: 10 },
            significant: true,
        }]);
        let cells: Vec<&str> = t.lines().nth(1).unwrap().split_whitespace().collect();
        assert_eq!(cells, ["NFCorpus", "41.62", "40.36*(0.72)", "-1.26"]);
    }
}
