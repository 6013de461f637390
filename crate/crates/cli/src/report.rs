//! Summary tables and plots from metrics and curve CSVs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use meshinvert_core::inverse::{parse_metrics_csv, MetricsRow};
use meshinvert_core::io;

use crate::config::ExperimentConfig;
use crate::svg::Plot;
use crate::HarnessError;

pub const REL_ERROR_FILE: &str = "rel_error.csv";
pub const OBJECTIVE_FILE: &str = "objective.csv";
pub const REL_ERROR_HEADER: &str = "sample_id,task,with_prior,step,rel_error";
pub const OBJECTIVE_HEADER: &str = "sample_id,task,with_prior,iter,active_steps,loss";

/// One row of the summary table: a forward model and prior setting.
#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub task: String,
    pub with_prior: bool,
    pub samples: usize,
    pub field_mse_mean: f64,
    pub field_mse_median: f64,
    pub traj_mse_mean: f64,
    pub seconds_per_iter: f64,
}

fn group_label(task: &str, with_prior: bool) -> String {
    format!("{task} {}", if with_prior { "prior" } else { "direct" })
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Groups rows by task and prior usage, in order of first appearance.
pub fn summarize(rows: &[MetricsRow]) -> Vec<SummaryRow> {
    let mut order: Vec<(String, bool)> = Vec::new();
    for r in rows {
        let key = (r.task.clone(), r.with_prior);
        if !order.contains(&key) {
            order.push(key);
        }
    }
    order
        .into_iter()
        .map(|(task, with_prior)| {
            let group: Vec<&MetricsRow> = rows.iter().filter(|r| r.task == task && r.with_prior == with_prior).collect();
            let n = group.len() as f64;
            let field: Vec<f64> = group.iter().map(|r| r.field_mse).collect();
            SummaryRow {
                samples: group.len(),
                field_mse_mean: field.iter().sum::<f64>() / n,
                field_mse_median: median(&field),
                traj_mse_mean: group.iter().map(|r| r.traj_mse).sum::<f64>() / n,
                seconds_per_iter: group.iter().map(|r| r.seconds_per_iter).sum::<f64>() / n,
                task,
                with_prior,
            }
        })
        .collect()
}

pub fn summary_table(rows: &[SummaryRow]) -> String {
    let mut s = String::new();
    writeln!(
        s,
        "{:<28} {:>6} {:>8} {:>14} {:>14} {:>14} {:>12}",
        "task", "prior", "samples", "field MSE", "median", "traj MSE", "s / iter"
    )
    .unwrap();
    for r in rows {
        writeln!(
            s,
            "{:<28} {:>6} {:>8} {:>14.4e} {:>14.4e} {:>14.4e} {:>12.4e}",
            r.task,
            if r.with_prior { "yes" } else { "no" },
            r.samples,
            r.field_mse_mean,
            r.field_mse_median,
            r.traj_mse_mean,
            r.seconds_per_iter
        )
        .unwrap();
    }
    s
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut s = String::from("task,with_prior,samples,field_mse_mean,field_mse_median,traj_mse_mean,seconds_per_iter\n");
    for r in rows {
        writeln!(
            s,
            "{},{},{},{:.9e},{:.9e},{:.9e},{:.6e}",
            r.task, r.with_prior, r.samples, r.field_mse_mean, r.field_mse_median, r.traj_mse_mean, r.seconds_per_iter
        )
        .unwrap();
    }
    s
}

/// A point of a per-sample curve.
#[derive(Clone, Debug, PartialEq)]
pub struct CurvePoint {
    pub group: String,
    pub x: f64,
    pub y: f64,
}

/// Reads a curve CSV whose first three columns are sample, task and prior
/// flag; `x_col` and `y_col` index the plotted columns.
pub fn parse_curves(text: &str, path: &Path, header: &str, x_col: usize, y_col: usize) -> Result<Vec<CurvePoint>, HarnessError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == header => {}
        _ => return Err(HarnessError::Config(format!("{}: line 1: expected header `{header}`", path.display()))),
    }
    let width = header.split(',').count();
    let mut out = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |what: &str| HarnessError::Config(format!("{}: line {}: {what}", path.display(), i + 1));
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != width {
            return Err(bad(&format!("expected {width} fields, found {}", f.len())));
        }
        let with_prior: bool = f[2].parse().map_err(|_| bad(&format!("invalid with_prior `{}`", f[2])))?;
        let num = |k: usize| f[k].parse::<f64>().map_err(|_| bad(&format!("invalid number `{}`", f[k])));
        out.push(CurvePoint {
            group: group_label(f[1], with_prior),
            x: num(x_col)?,
            y: num(y_col)?,
        });
    }
    Ok(out)
}

/// Mean over samples of each group's curve, by x value.
pub fn mean_curves(points: &[CurvePoint]) -> Vec<(String, Vec<(f64, f64)>)> {
    let mut groups: Vec<(String, BTreeMap<u64, (f64, f64, usize)>)> = Vec::new();
    for p in points {
        let idx = match groups.iter().position(|(g, _)| *g == p.group) {
            Some(i) => i,
            None => {
                groups.push((p.group.clone(), BTreeMap::new()));
                groups.len() - 1
            }
        };
        let e = groups[idx].1.entry(p.x.to_bits()).or_insert((p.x, 0.0, 0));
        e.1 += p.y;
        e.2 += 1;
    }
    groups
        .into_iter()
        .map(|(g, m)| {
            let mut pts: Vec<(f64, f64)> = m.into_values().map(|(x, sum, n)| (x, sum / n as f64)).collect();
            pts.sort_by(|a, b| a.0.total_cmp(&b.0));
            (g, pts)
        })
        .collect()
}

fn curves_csv(curves: &[(String, Vec<(f64, f64)>)], x_name: &str, y_name: &str) -> String {
    let mut s = format!("group,{x_name},{y_name}\n");
    for (g, pts) in curves {
        for (x, y) in pts {
            writeln!(s, "{g},{x},{y:.9e}").unwrap();
        }
    }
    s
}

fn read_text(path: &Path, key: &str) -> Result<String, HarnessError> {
    if !path.exists() {
        return Err(HarnessError::Config(format!("{key}: {} does not exist", path.display())));
    }
    String::from_utf8(io::read_file(path)?).map_err(|_| HarnessError::Config(format!("{}: not UTF-8 text", path.display())))
}

pub fn report_task(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>, HarnessError> {
    let mut rows = Vec::new();
    let mut rel = Vec::new();
    let mut obj = Vec::new();
    for path in &cfg.report.metrics {
        let text = read_text(path, "report.metrics")?;
        rows.extend(parse_metrics_csv(&text, path).map_err(|e| HarnessError::Config(e.to_string()))?);
        let dir = path.parent().unwrap_or(Path::new("."));
        let rp = dir.join(REL_ERROR_FILE);
        if rp.exists() {
            rel.extend(parse_curves(&read_text(&rp, "report.metrics")?, &rp, REL_ERROR_HEADER, 3, 4)?);
        }
        let op = dir.join(OBJECTIVE_FILE);
        if op.exists() {
            obj.extend(parse_curves(&read_text(&op, "report.metrics")?, &op, OBJECTIVE_HEADER, 3, 5)?);
        }
    }
    let summary = summarize(&rows);
    let d = &cfg.report.dir;
    let mut out = Vec::new();
    let mut write = |name: &str, body: String| -> Result<(), HarnessError> {
        let p = d.join(name);
        io::atomic_write(&p, body.as_bytes())?;
        out.push(p);
        Ok(())
    };
    write("summary.txt", summary_table(&summary))?;
    write("summary.csv", summary_csv(&summary))?;

    let rel_curves = mean_curves(&rel);
    write("rel_error_curves.csv", curves_csv(&rel_curves, "step", "rel_error"))?;
    write(
        "rel_error.svg",
        Plot {
            title: "Accumulated relative error".into(),
            x_label: "simulator step".into(),
            y_label: "relative error".into(),
            log_y: false,
            series: rel_curves,
            band: None,
        }
        .render(),
    )?;
    let obj_curves = mean_curves(&obj);
    write("objective_curves.csv", curves_csv(&obj_curves, "iter", "loss"))?;
    write(
        "objective.svg",
        Plot {
            title: "Observation objective".into(),
            x_label: "iteration".into(),
            y_label: "objective".into(),
            log_y: true,
            series: obj_curves,
            band: cfg.report.fine_tune.map(|(a, b)| (a as f64, b as f64, "fine-tune".to_string())),
        }
        .render(),
    )?;
    print!("{}", summary_table(&summary));
    Ok(out)
}
