use std::fmt::Write as _;

use super::MetricsReport;
use crate::error::{Error, Result};

pub fn higher_is_better(metric: &str) -> bool {
    matches!(metric, "delta1" | "within_11.25" | "iou" | "pa" | "dice")
}

/// Ranks of `values` (1 = best), ties sharing the mean of the ranks they occupy.
fn ranks(values: &[f64], higher: bool) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| {
        let c = values[a].total_cmp(&values[b]);
        if higher {
            c.reverse()
        } else {
            c
        }
    });
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // Positions i..=j hold ranks i+1..=j+1.
        let shared = (i + j + 2) as f64 / 2.0;
        for &k in &order[i..=j] {
            out[k] = shared;
        }
        i = j + 1;
    }
    out
}

/// Direction-aware average rank of each report over the shared metric set.
pub fn average_ranks(reports: &[&MetricsReport]) -> Result<Vec<f64>> {
    let first = reports
        .first()
        .ok_or_else(|| Error::Input("a ranking needs at least one report".into()))?;
    let names: Vec<&str> = first.metrics.iter().map(|(n, _)| n.as_str()).collect();
    for r in reports {
        let these: Vec<&str> = r.metrics.iter().map(|(n, _)| n.as_str()).collect();
        if these != names {
            return Err(Error::Input(format!(
                "inconsistent metric sets: {names:?} vs {these:?}"
            )));
        }
    }
    let mut totals = vec![0.0; reports.len()];
    for (m, name) in names.iter().enumerate() {
        let values: Vec<f64> = reports.iter().map(|r| r.metrics[m].1).collect();
        for (t, r) in totals.iter_mut().zip(ranks(&values, higher_is_better(name))) {
            *t += r;
        }
    }
    Ok(totals.into_iter().map(|t| t / names.len() as f64).collect())
}

/// Text table with one row per method plus the average rank column.
pub fn render_table(rows: &[(String, MetricsReport)]) -> Result<String> {
    let reports: Vec<&MetricsReport> = rows.iter().map(|(_, r)| r).collect();
    let avg = average_ranks(&reports)?;
    let name_w = rows.iter().map(|(n, _)| n.chars().count()).max().unwrap_or(0).max(6);
    let mut out = format!("{:<name_w$}", "Method");
    let _ = write!(out, " {:>5}", "NFE");
    for (name, _) in &reports[0].metrics {
        let arrow = if higher_is_better(name) { "↑" } else { "↓" };
        let _ = write!(out, " {:>13}", format!("{name}{arrow}"));
    }
    out.push_str(" Average Rank↓\n");
    for ((name, report), rank) in rows.iter().zip(avg) {
        let _ = write!(out, "{name:<name_w$} {:>5}", report.nfe);
        for (_, v) in &report.metrics {
            let _ = write!(out, " {v:>13.3}");
        }
        let _ = writeln!(out, " {rank:>13.2}");
    }
    Ok(out)
}
