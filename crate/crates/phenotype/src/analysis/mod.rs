//! Evaluation of the learned feature space: 2-D t-SNE embedding for
//! visualization and logistic-regression AUC for class separability.

mod logistic;
mod tsne;

pub use logistic::{
    aggregate_scores_by_admission, auc, auc_from_scores, fit_logistic, LogisticFit, LogisticModel,
};
pub use tsne::{tsne, Embedding, TsneParams};

use std::path::Path;

use crate::error::{Error, Result};

/// Embedding CSV `patch_id,label,x,y`.
pub fn write_embedding_csv(path: &Path, embedding: &Embedding, labels: &[u8]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    w.write_record(["patch_id", "label", "x", "y"])
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    for (i, (coord, label)) in embedding.coords.iter().zip(labels).enumerate() {
        w.write_record(&[
            i.to_string(),
            label.to_string(),
            coord[0].to_string(),
            coord[1].to_string(),
        ])
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Read back (labels, coords) from an embedding CSV.
pub fn read_embedding_csv(path: &Path) -> Result<(Vec<u8>, Vec<[f64; 2]>)> {
    let mut r = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Data(format!("{}: {other:?}", path.display())),
    })?;
    let mut labels = Vec::new();
    let mut coords = Vec::new();
    for record in r.records() {
        let record = record.map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let parse_f = |i: usize| -> Result<f64> {
            record
                .get(i)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Data(format!("{}: bad embedding row", path.display())))
        };
        let label: u8 = record
            .get(1)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Data(format!("{}: bad label", path.display())))?;
        labels.push(label);
        coords.push([parse_f(2)?, parse_f(3)?]);
    }
    Ok((labels, coords))
}
