use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::LabeledFeatures;
use crate::error::{Error, Result};

/// Layout of a feature CSV: a header row, an integer label column and a
/// fixed number of real feature columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureSchema {
    pub label_column: String,
    /// Rejects rows whose label is not listed.
    pub known_labels: Option<Vec<i64>>,
}

impl Default for FeatureSchema {
    fn default() -> Self {
        FeatureSchema {
            label_column: "label".into(),
            known_labels: None,
        }
    }
}

/// [`load_feature_csv_with`] using the default schema.
pub fn load_feature_csv(path: &Path) -> Result<LabeledFeatures> {
    load_feature_csv_with(path, &FeatureSchema::default())
}

/// Reads labeled features, keeping row order. Source labels are mapped to
/// dense ids in increasing label order.
pub fn load_feature_csv_with(path: &Path, schema: &FeatureSchema) -> Result<LabeledFeatures> {
    let parse_err = |line: u64, message: String| Error::Parse {
        path: path.to_path_buf(),
        line: line as usize,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => parse_err(1, format!("{other:?}")),
        })?;
    let header = reader.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    let label_at = header
        .iter()
        .position(|h| h.trim() == schema.label_column)
        .ok_or_else(|| parse_err(1, format!("no `{}` column in the header", schema.label_column)))?;
    let dim = header.len() - 1;
    if dim == 0 {
        return Err(parse_err(1, "the file has no feature columns".into()));
    }

    let mut features = Vec::new();
    let mut raw_labels = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != header.len() {
            return Err(parse_err(
                line,
                format!("expected {} fields, found {}", header.len(), record.len()),
            ));
        }
        for (j, cell) in record.iter().enumerate() {
            let cell = cell.trim();
            if j == label_at {
                let label: i64 = cell
                    .parse()
                    .map_err(|_| parse_err(line, format!("label `{cell}` is not an integer")))?;
                if let Some(known) = &schema.known_labels {
                    if !known.contains(&label) {
                        return Err(parse_err(line, format!("unknown label {label}")));
                    }
                }
                raw_labels.push(label);
            } else {
                let v: f64 = cell.parse().map_err(|_| {
                    parse_err(
                        line,
                        format!("column {} value `{cell}` is not a number", header[j].trim()),
                    )
                })?;
                if !v.is_finite() {
                    return Err(parse_err(
                        line,
                        format!("column {} value `{cell}` is not finite", header[j].trim()),
                    ));
                }
                features.push(v);
            }
        }
    }
    if raw_labels.is_empty() {
        return Err(parse_err(1, "the file has no data rows".into()));
    }
    let dense: BTreeMap<i64, usize> = {
        let mut ids: Vec<i64> = raw_labels.clone();
        ids.sort_unstable();
        ids.dedup();
        ids.into_iter().enumerate().map(|(i, l)| (l, i)).collect()
    };
    Ok(LabeledFeatures {
        dim,
        features,
        labels: raw_labels.iter().map(|l| dense[l]).collect(),
        class_ids: dense.keys().copied().collect(),
    })
}
