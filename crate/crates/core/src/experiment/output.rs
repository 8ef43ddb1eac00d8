use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::{CellReport, ExperimentOutput, ExperimentSpec};
use crate::data::DatasetManifest;
use crate::error::{Error, Result};

fn csv_text(header: &[&str], rows: Vec<Vec<String>>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let fail = |e: csv::Error| Error::Contract(format!("writing CSV: {e}"));
    w.write_record(header).map_err(fail)?;
    for r in rows {
        w.write_record(&r).map_err(fail)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Contract(format!("writing CSV: {e}")))?;
    Ok(String::from_utf8(bytes).expect("CSV fields are UTF-8"))
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// Every report of the experiment, the initial model first.
fn all_cells(out: &ExperimentOutput) -> Vec<CellReport> {
    let mut cells = vec![CellReport {
        arm: out.initial.arm.clone(),
        cell: "s0".into(),
        report: out.initial.clone(),
    }];
    cells.extend(out.cells.iter().cloned());
    cells
}

/// One row per arm × cell × group × K, sorted by (arm, group, K) and then
/// by cell in plan order. Timing is left out, so the table is
/// reproducible bit for bit.
pub fn summary_csv(out: &ExperimentOutput) -> Result<String> {
    let mut rows: Vec<(String, usize, usize, usize, Vec<String>)> = Vec::new();
    for (order, c) in all_cells(out).iter().enumerate() {
        for g in &c.report.groups {
            for r in &g.recall {
                rows.push((
                    c.arm.clone(),
                    g.group,
                    r.k,
                    order,
                    vec![
                        c.arm.clone(),
                        c.cell.clone(),
                        g.group.to_string(),
                        r.k.to_string(),
                        r.value.to_string(),
                        g.map.to_string(),
                    ],
                ));
            }
        }
    }
    rows.sort_by(|a, b| (&a.0, a.1, a.2, a.3).cmp(&(&b.0, b.1, b.2, b.3)));
    csv_text(
        &["arm", "cell", "group", "k", "recall", "map"],
        rows.into_iter().map(|r| r.4).collect(),
    )
}

/// Precision-recall points of every cell and group of one arm; `rank` is
/// the retrieval cutoff.
pub fn pr_csv(cells: &[&CellReport]) -> Result<String> {
    let mut rows = Vec::new();
    for c in cells {
        for g in &c.report.groups {
            for (i, p) in g.pr.iter().enumerate() {
                rows.push(vec![
                    c.cell.clone(),
                    g.group.to_string(),
                    (i + 1).to_string(),
                    p.recall.to_string(),
                    p.precision.to_string(),
                ]);
            }
        }
    }
    csv_text(&["cell", "group", "rank", "recall", "precision"], rows)
}

/// Per-epoch loss terms and original-class mAP of one arm. Empty fields
/// mark values not computed at that epoch.
pub fn trace_csv(cells: &[&CellReport]) -> Result<String> {
    let mut rows = Vec::new();
    for c in cells {
        for t in &c.report.trace {
            let l = t.loss;
            rows.push(vec![
                c.cell.clone(),
                t.epoch.to_string(),
                opt(l.map(|l| l.total)),
                opt(l.map(|l| l.ce)),
                opt(l.map(|l| l.triplet)),
                opt(l.map(|l| l.dist)),
                opt(l.map(|l| l.mmd)),
                opt(l.map(|l| l.regularizer)),
                opt(t.original_map),
            ]);
        }
    }
    csv_text(
        &[
            "cell",
            "epoch",
            "total",
            "ce",
            "triplet",
            "dist",
            "mmd",
            "regularizer",
            "original_map",
        ],
        rows,
    )
}

#[derive(Serialize)]
struct Manifest<'a> {
    dataset: &'a DatasetManifest,
    spec: &'a ExperimentSpec,
    arms: Vec<&'a str>,
}

fn write(path: PathBuf, text: &str, written: &mut Vec<PathBuf>) -> Result<()> {
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    written.push(path);
    Ok(())
}

/// Writes `manifest.json`, `report-{arm}-{cell}.json`, `pr-{arm}.csv`,
/// `trace-{arm}.csv` and `summary.csv` into `dir`. A non-empty `dir` is
/// refused unless `force` is set. Returns the written paths.
pub fn write_outputs(out: &ExperimentOutput, dir: &Path, force: bool) -> Result<Vec<PathBuf>> {
    if !force {
        if let Ok(mut entries) = fs::read_dir(dir) {
            if entries.next().is_some() {
                return Err(Error::config(
                    "output_dir",
                    format!(
                        "{} already exists and is not empty; pass --force to overwrite",
                        dir.display()
                    ),
                ));
            }
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let cells = all_cells(out);
    let mut arms: Vec<&str> = Vec::new();
    for c in &cells {
        if !arms.contains(&c.arm.as_str()) {
            arms.push(&c.arm);
        }
    }

    let mut written = Vec::new();
    let manifest = Manifest {
        dataset: &out.manifest,
        spec: &out.spec,
        arms: arms.clone(),
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|source| Error::Json {
        context: "serializing the manifest".into(),
        source,
    })?;
    write(dir.join("manifest.json"), &text, &mut written)?;
    for c in &cells {
        write(
            dir.join(format!("report-{}-{}.json", c.arm, c.cell)),
            &c.report.to_json()?,
            &mut written,
        )?;
    }
    for arm in &arms {
        let mine: Vec<&CellReport> = cells.iter().filter(|c| c.arm == *arm).collect();
        write(dir.join(format!("pr-{arm}.csv")), &pr_csv(&mine)?, &mut written)?;
        write(dir.join(format!("trace-{arm}.csv")), &trace_csv(&mine)?, &mut written)?;
    }
    write(dir.join("summary.csv"), &summary_csv(out)?, &mut written)?;
    Ok(written)
}
