//! CSV outputs: per-iteration training metrics, validation curves,
//! evaluation tables and per-case plot data.

use std::fs::{File, OpenOptions};
use std::path::Path;

use magicnet_core::eval::{CaseMetrics, MetricsTable};
use magicnet_core::trainer::StepReport;

use crate::error::{CliError, IoContext, Result};

fn csv_err(path: &Path, e: csv::Error) -> CliError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => CliError::io(path, io),
        other => CliError::parse(path, format!("{other:?}")),
    }
}

/// Metrics CSV columns for `num_classes` organs.
pub fn step_header(num_classes: usize) -> Vec<String> {
    let mut h: Vec<String> = [
        "iteration",
        "lr",
        "alpha",
        "l_cross_sup",
        "l_in_sup",
        "l_cross_in_unsup",
        "l_cls_sup",
        "l_cls_unsup",
        "total",
        "mean_omega",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    h.extend((1..=num_classes).map(|c| format!("v_{c}")));
    h
}

pub fn step_row(r: &StepReport) -> Vec<String> {
    let l = &r.losses;
    let mut row = vec![
        r.iteration.to_string(),
        r.lr.to_string(),
        r.alpha.to_string(),
        l.l_cross_sup.to_string(),
        l.l_in_sup.to_string(),
        l.l_cross_in_unsup.to_string(),
        l.l_cls_sup.to_string(),
        l.l_cls_unsup.to_string(),
        l.total.to_string(),
        r.mean_omega.map(|v| v.to_string()).unwrap_or_default(),
    ];
    row.extend(r.counts.iter().map(u64::to_string));
    row
}

/// Append-only CSV stream.
pub struct CsvLog {
    path: std::path::PathBuf,
    writer: csv::Writer<File>,
}

impl CsvLog {
    /// Creates `path` with `header`, or, when `keep_rows` is given, keeps
    /// that many existing data rows and appends after them.
    pub fn open(path: &Path, header: &[String], keep_rows: Option<usize>) -> Result<Self> {
        let kept: Vec<csv::StringRecord> = match keep_rows {
            Some(n) if path.exists() => {
                let mut rd = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
                if rd.headers().map_err(|e| csv_err(path, e))?.iter().ne(header.iter().map(String::as_str)) {
                    return Err(CliError::parse(path, "existing CSV has a different header"));
                }
                let rows: Vec<_> =
                    rd.records().take(n).collect::<std::result::Result<_, _>>().map_err(|e| csv_err(path, e))?;
                if rows.len() < n {
                    return Err(CliError::parse(path, format!("expected at least {n} rows, found {}", rows.len())));
                }
                rows
            }
            Some(0) | None => Vec::new(),
            Some(n) => return Err(CliError::parse(path, format!("missing CSV to resume ({n} rows expected)"))),
        };
        let file = OpenOptions::new().create(true).write(true).truncate(true).open(path).at(path)?;
        let mut writer = csv::Writer::from_writer(file);
        writer.write_record(header).map_err(|e| csv_err(path, e))?;
        for r in &kept {
            writer.write_record(r).map_err(|e| csv_err(path, e))?;
        }
        let mut log = Self { path: path.to_path_buf(), writer };
        log.flush()?;
        Ok(log)
    }

    pub fn write(&mut self, row: &[String]) -> Result<()> {
        self.writer.write_record(row).map_err(|e| csv_err(&self.path, e))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.writer.flush().at(&self.path)
    }
}

pub fn validation_header(num_classes: usize) -> Vec<String> {
    let mut h = vec!["iteration".to_string(), "model".to_string(), "avg_dsc".to_string(), "avg_nsd".to_string()];
    h.extend((1..=num_classes).map(|c| format!("dsc_{c}")));
    h
}

pub fn validation_row(iteration: u64, model: &str, t: &MetricsTable) -> Vec<String> {
    let mut row = vec![iteration.to_string(), model.to_string(), t.mean_dsc().to_string(), t.mean_nsd().to_string()];
    row.extend((1..=t.num_classes).map(|c| t.class_dsc(c).0.to_string()));
    row
}

/// Summary table: one row per model with per-organ DSC mean and std,
/// average DSC and average NSD.
pub fn write_summary(path: &Path, tables: &[MetricsTable]) -> Result<()> {
    let c = tables.iter().map(|t| t.num_classes).max().unwrap_or(0);
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut header = vec!["model".to_string()];
    for k in 1..=c {
        header.push(format!("dsc_{k}"));
        header.push(format!("dsc_{k}_std"));
    }
    header.extend(["avg_dsc", "avg_dsc_std", "avg_nsd"].map(String::from));
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for t in tables {
        let mut row = vec![t.label.clone()];
        for k in 1..=c {
            let (m, s) = if k <= t.num_classes { t.class_dsc(k) } else { (f64::NAN, f64::NAN) };
            row.push(format!("{m:.4}"));
            row.push(format!("{s:.4}"));
        }
        row.push(format!("{:.4}", t.mean_dsc()));
        row.push(format!("{:.4}", t.mean_dsc_std()));
        row.push(format!("{:.4}", t.mean_nsd()));
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().at(path)
}

/// One row per (model, case, organ) for box plots.
pub fn emit_plot_data(tables: &[MetricsTable], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["model", "case", "class", "dsc", "nsd"]).map_err(|e| csv_err(path, e))?;
    for t in tables {
        for case in &t.cases {
            for c in 0..t.num_classes {
                w.write_record([
                    t.label.clone(),
                    case.case.clone(),
                    (c + 1).to_string(),
                    case.dsc[c].to_string(),
                    case.nsd[c].to_string(),
                ])
                .map_err(|e| csv_err(path, e))?;
            }
        }
    }
    w.flush().at(path)
}

/// Inverse of [`emit_plot_data`].
pub fn read_plot_data(path: &Path) -> Result<Vec<MetricsTable>> {
    let mut rd = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut tables: Vec<MetricsTable> = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let field = |i: usize| rec.get(i).ok_or_else(|| CliError::parse(path, "short row"));
        let num = |i: usize| -> Result<f64> { field(i)?.parse().map_err(|_| CliError::parse(path, "bad number")) };
        let (label, case, class) = (field(0)?, field(1)?, num(2)? as usize);
        if tables.last().is_none_or(|t| t.label != label) {
            tables.push(MetricsTable { label: label.to_string(), num_classes: 0, cases: Vec::new() });
        }
        let t = tables.last_mut().expect("table");
        if class == 1 {
            t.cases.push(CaseMetrics { case: case.to_string(), dsc: Vec::new(), nsd: Vec::new() });
        }
        let cm = t.cases.last_mut().ok_or_else(|| CliError::parse(path, "row before class 1"))?;
        cm.dsc.push(num(3)?);
        cm.nsd.push(num(4)?);
        t.num_classes = t.num_classes.max(class);
    }
    Ok(tables)
}

/// Pooled bottleneck features, one row per case.
pub fn write_features(path: &Path, rows: &[(String, Vec<f32>)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let d = rows.first().map_or(0, |r| r.1.len());
    let mut header = vec!["case".to_string()];
    header.extend((0..d).map(|i| format!("f{i}")));
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for (name, f) in rows {
        let mut row = vec![name.clone()];
        row.extend(f.iter().map(f32::to_string));
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().at(path)
}
