//! Plain-text rendering of evaluation reports. Tables are aligned with
//! spaces and percentages carry one decimal, so runs can be compared by
//! diffing the files.

use std::collections::BTreeMap;

use super::retrieval::RetrievalReport;
use super::units::UnitConsistencyReport;
use super::zeroshot::ZeroShotAccuracy;
use crate::synthdata::ModalityId;

fn pct(v: f64) -> String {
    format!("{:.1}", 100.0 * v)
}

/// Right-align every column except the first, which is left-aligned.
pub(crate) fn align(rows: &[Vec<String>]) -> String {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let mut widths = vec![0usize; cols];
    for row in rows {
        for (c, cell) in row.iter().enumerate() {
            widths[c] = widths[c].max(cell.len());
        }
    }
    let mut out = String::new();
    for row in rows {
        let mut line = String::new();
        for (c, cell) in row.iter().enumerate() {
            if c == 0 {
                line.push_str(&format!("{:<width$}", cell, width = widths[0]));
            } else {
                line.push_str(&format!("  {:>width$}", cell, width = widths[c]));
            }
        }
        out.push_str(line.trim_end());
        out.push('\n');
    }
    out
}

fn modality_axis(report: &RetrievalReport) -> Vec<(ModalityId, String)> {
    let mut names: BTreeMap<ModalityId, String> = BTreeMap::new();
    for p in &report.pairs {
        names.entry(p.query).or_insert_with(|| p.query_name.clone());
        names.entry(p.target).or_insert_with(|| p.target_name.clone());
    }
    names.into_iter().collect()
}

fn matrix(
    report: &RetrievalReport,
    axis: &[(ModalityId, String)],
    cell: impl Fn(ModalityId, ModalityId) -> Option<f64>,
    with_means: bool,
) -> String {
    let mut rows = Vec::new();
    let mut header: Vec<String> = vec!["query \\ target".into()];
    header.extend(axis.iter().map(|(_, n)| n.clone()));
    if with_means {
        header.push("mean".into());
    }
    rows.push(header);
    for &(q, ref qname) in axis {
        let mut row = vec![qname.clone()];
        for &(t, _) in axis {
            row.push(match cell(q, t) {
                Some(v) => pct(v),
                None => "--".into(),
            });
        }
        if with_means {
            row.push(report.row_means.get(&q).map(|&v| pct(v)).unwrap_or_else(|| "--".into()));
        }
        rows.push(row);
    }
    align(&rows)
}

/// Render both retrieval matrices (mAP and precision at depth 10).
pub fn render_retrieval_table(report: &RetrievalReport) -> String {
    let axis = modality_axis(report);
    let mut out = format!(
        "cross-modal retrieval  layer={}  strategy={}\n",
        report.layer, report.strategy
    );
    out.push_str("\nmAP (%)\n");
    out.push_str(&matrix(report, &axis, |q, t| report.pair(q, t).map(|p| p.map), true));
    out.push_str("\nprecision@10 (%)\n");
    out.push_str(&matrix(report, &axis, |q, t| report.pair(q, t).map(|p| p.pr_at_10), false));
    out.push_str(&format!(
        "\ngrand mean: mAP {}  precision@10 {}\n",
        pct(report.grand_mean_map),
        pct(report.grand_mean_pr)
    ));
    if report.zero_norm_items > 0 {
        out.push_str(&format!(
            "warning: {} zero-norm feature vectors ranked last\n",
            report.zero_norm_items
        ));
    }
    out
}

/// Render per-modality accuracy on classes never seen by those modalities.
pub fn render_zero_shot(results: &[ZeroShotAccuracy]) -> String {
    let mut rows = vec![vec![
        "modality".to_string(),
        "held-out examples".to_string(),
        "accuracy (%)".to_string(),
    ]];
    for r in results {
        rows.push(vec![r.name.clone(), r.examples.to_string(), pct(r.accuracy)]);
    }
    let mut out = String::from("zero-shot recognition on held-out classes\n");
    out.push_str(&align(&rows));
    out
}

/// Render the per-unit majority-class table plus the aggregate rate.
pub fn render_unit_report(report: &UnitConsistencyReport) -> String {
    let mut out = format!(
        "unit consistency  layer={}  top_k={}  consistent {} of {} ({})\n",
        report.layer,
        report.top_k,
        report.units.iter().filter(|u| u.consistent).count(),
        report.units.len(),
        pct(report.consistency_rate),
    );
    let mut rows = Vec::new();
    if let Some(first) = report.units.first() {
        let mut header = vec!["unit".to_string()];
        header.extend(first.per_modality.iter().map(|t| t.name.clone()));
        header.push("agree".into());
        rows.push(header);
    }
    for u in &report.units {
        let mut row = vec![u.unit.to_string()];
        row.extend(u.per_modality.iter().map(|t| t.majority_class.to_string()));
        row.push(if u.consistent { "yes" } else { "." }.into());
        rows.push(row);
    }
    out.push_str(&align(&rows));
    out
}
