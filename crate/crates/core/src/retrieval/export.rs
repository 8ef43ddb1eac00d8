use std::path::Path;

use crate::autodiff::Tensor;
use crate::data::LabeledFeatures;
use crate::error::{Error, Result};
use crate::net::EmbeddingNet;

/// Writes `label,f0,...` rows. Values use 17 significant digits, which
/// round-trips every f64 exactly.
pub fn write_embeddings_csv(path: &Path, features: &Tensor, labels: &[usize]) -> Result<()> {
    let [n, d] = *features.shape() else {
        return Err(Error::Contract(format!(
            "embeddings must be N×d, got {:?}",
            features.shape()
        )));
    };
    if labels.len() != n {
        return Err(Error::Contract(format!("{} labels for {n} embeddings", labels.len())));
    }
    let csv_err = |e: csv::Error| Error::io(path, std::io::Error::other(e));
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let header: Vec<String> = std::iter::once("label".to_string())
        .chain((0..d).map(|j| format!("f{j}")))
        .collect();
    w.write_record(&header).map_err(csv_err)?;
    for (row, label) in features.data().chunks(d).zip(labels) {
        let record: Vec<String> = std::iter::once(label.to_string())
            .chain(row.iter().map(|v| format!("{v:.16e}")))
            .collect();
        w.write_record(&record).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Embeds `data` with `net` and writes the features as CSV.
pub fn export_embeddings(net: &EmbeddingNet, data: &LabeledFeatures, path: &Path) -> Result<()> {
    let (features, _) = net.forward(&data.to_tensor()?)?;
    write_embeddings_csv(path, &features, &data.labels)
}
