//! Per-loss training-curve series and a small SVG chart of the
//! generalization gap.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use lipstab::stats::median;
use serde::Serialize;

use crate::experiments::CurveRow;
use crate::output::{csv_bytes, RunOutput};
use crate::{CliError, Result};

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct SeriesRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// `|train_loss − val_loss|`
    pub gen_error: f64,
}

/// Train and validation risks across seeds.
type EpochCell = (Vec<f64>, Vec<f64>);

/// Seed medians of the train and validation risk per epoch, per loss.
pub fn aggregate(rows: &[CurveRow]) -> Result<BTreeMap<String, Vec<SeriesRow>>> {
    let mut grouped: BTreeMap<&str, BTreeMap<usize, EpochCell>> = BTreeMap::new();
    for r in rows {
        let cell = grouped.entry(&r.loss).or_default().entry(r.epoch).or_default();
        cell.0.push(r.train_loss);
        cell.1.push(r.val_loss);
    }
    if grouped.is_empty() {
        return Err(CliError::Missing("no curve series found".into()));
    }
    let mut out = BTreeMap::new();
    for (loss, epochs) in grouped {
        let series: Vec<SeriesRow> = epochs
            .into_iter()
            .map(|(epoch, (tr, va))| {
                let train_loss = median(&tr).unwrap_or(f64::NAN);
                let val_loss = median(&va).unwrap_or(f64::NAN);
                SeriesRow { epoch, train_loss, val_loss, gen_error: (train_loss - val_loss).abs() }
            })
            .collect();
        out.insert(loss.to_string(), series);
    }
    let grids: Vec<Vec<usize>> = out.values().map(|s| s.iter().map(|r| r.epoch).collect()).collect();
    if grids.windows(2).any(|w| w[0] != w[1]) {
        return Err(CliError::Missing("loss series cover different epochs".into()));
    }
    Ok(out)
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

/// Line chart of the generalization gap per loss.
pub fn gap_chart(series: &BTreeMap<String, Vec<SeriesRow>>) -> String {
    let (w, h, m) = (640.0, 400.0, 56.0);
    let max_epoch = series.values().flatten().map(|r| r.epoch).max().unwrap_or(1).max(1) as f64;
    let max_gap = series.values().flatten().map(|r| r.gen_error).filter(|v| v.is_finite()).fold(0.0, f64::max);
    let top = if max_gap > 0.0 { max_gap * 1.05 } else { 1.0 };
    let x = |e: usize| m + (w - 2.0 * m) * e as f64 / max_epoch;
    let y = |v: f64| h - m - (h - 2.0 * m) * v / top;

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<line x1="{m}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#, h - m, w - m, h - m);
    let _ = writeln!(s, r#"<line x1="{m}" y1="{m}" x2="{m}" y2="{}" stroke="black"/>"#, h - m);
    let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">epoch</text>"#, w / 2.0, h - 16.0);
    let _ = writeln!(s, r#"<text x="16" y="{}" font-size="12" transform="rotate(-90 16 {})" text-anchor="middle">|train - val|</text>"#, h / 2.0, h / 2.0);
    let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="10" text-anchor="end">{:.3e}</text>"#, m - 4.0, m + 4.0, top);
    let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="10" text-anchor="end">{}</text>"#, w - m, h - m + 14.0, max_epoch);
    for (i, (loss, rows)) in series.iter().enumerate() {
        let colour = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = rows.iter().filter(|r| r.gen_error.is_finite()).map(|r| format!("{:.2},{:.2}", x(r.epoch), y(r.gen_error))).collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{colour}" stroke-width="2" points="{}"/>"#, pts.join(" "));
        let ly = m + 16.0 * i as f64;
        let _ = writeln!(s, r#"<text x="{}" y="{ly}" font-size="12" fill="{colour}">{loss}</text>"#, w - m - 60.0);
    }
    s.push_str("</svg>\n");
    s
}

/// `series_<loss>.csv` files and `curves.svg` from the bytes of a `curves.csv`.
pub fn emit_series(curves_csv: &[u8]) -> Result<RunOutput> {
    let mut rdr = csv::Reader::from_reader(curves_csv);
    let rows = rdr.deserialize().collect::<std::result::Result<Vec<CurveRow>, _>>()?;
    let series = aggregate(&rows)?;
    let mut out = RunOutput::default();
    for (loss, rows) in &series {
        out.add(format!("series_{loss}.csv"), csv_bytes(rows)?);
    }
    out.add("curves.svg", gap_chart(&series).into_bytes());
    Ok(out)
}

/// Re-emits the series for an existing results directory.
pub fn genplot_dir(dir: &Path) -> Result<RunOutput> {
    let path = dir.join("curves.csv");
    let bytes = std::fs::read(&path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => CliError::Missing(format!("{}: no curve series (run a genplot experiment first)", path.display())),
        _ => CliError::io(&path, e),
    })?;
    emit_series(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(loss: &str, seed: usize, epoch: usize, tr: f64, va: f64) -> CurveRow {
        CurveRow { loss: loss.into(), seed, epoch, train_loss: tr, val_loss: va, gen_error: (tr - va).abs() }
    }

    #[test]
    fn medians_and_gap() {
        let rows = vec![
            row("kl", 0, 0, 1.0, 1.5),
            row("kl", 1, 0, 3.0, 2.5),
            row("kl", 2, 0, 2.0, 2.0),
            row("gjm", 0, 0, 0.5, 0.25),
        ];
        let s = aggregate(&rows).unwrap();
        assert_eq!(s["kl"], vec![SeriesRow { epoch: 0, train_loss: 2.0, val_loss: 2.0, gen_error: 0.0 }]);
        assert_eq!(s["gjm"][0].gen_error, 0.25);
    }

    #[test]
    fn mismatched_grids_or_empty_fail() {
        assert!(aggregate(&[]).is_err());
        let rows = vec![row("kl", 0, 0, 1.0, 1.0), row("gjm", 0, 1, 1.0, 1.0)];
        assert!(aggregate(&rows).is_err());
    }

    #[test]
    fn missing_dir_is_runtime_error() {
        let dir = tempfile::tempdir().unwrap();
        let err = genplot_dir(dir.path()).unwrap_err();
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn chart_is_well_formed() {
        let rows = vec![row("kl", 0, 0, 1.0, 1.2), row("kl", 0, 1, 0.5, 0.9)];
        let svg = gap_chart(&aggregate(&rows).unwrap());
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert!(svg.contains("<polyline"));
    }
}
