//! Dataset manifest and label file ingestion.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::embedding;
use crate::error::{DoktError, Result};
use crate::pool::{Label, SampleId};

/// JSON manifest describing one dataset.
///
/// Relative paths are resolved against the manifest's directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub n_samples: usize,
    pub n_classes: usize,
    pub tokens_per_sample: usize,
    pub pretext_dim: usize,
    pub embeddings_path: PathBuf,
    pub labels_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub assets_dir: Option<PathBuf>,
    #[serde(skip)]
    base_dir: PathBuf,
}

impl Manifest {
    pub fn new(
        n_samples: usize,
        n_classes: usize,
        tokens_per_sample: usize,
        pretext_dim: usize,
        embeddings_path: impl Into<PathBuf>,
        labels_path: impl Into<PathBuf>,
    ) -> Self {
        Self {
            n_samples,
            n_classes,
            tokens_per_sample,
            pretext_dim,
            embeddings_path: embeddings_path.into(),
            labels_path: labels_path.into(),
            assets_dir: None,
            base_dir: PathBuf::new(),
        }
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn embeddings_file(&self) -> PathBuf {
        self.resolve(&self.embeddings_path)
    }

    pub fn labels_file(&self) -> PathBuf {
        self.resolve(&self.labels_path)
    }

    pub fn assets(&self) -> Option<PathBuf> {
        self.assets_dir.as_deref().map(|p| self.resolve(p))
    }

    pub fn base_dir(&self) -> &Path {
        &self.base_dir
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, json + "\n").map_err(|e| DoktError::io(path, e))
    }
}

/// Parses a manifest and checks it against the embedding header and the
/// label file. Fails rather than truncating on any mismatch.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path).map_err(|e| DoktError::io(path, e))?;
    let mut manifest: Manifest = serde_json::from_str(&text).map_err(|e| DoktError::Manifest {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    manifest.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();

    if manifest.n_classes < 2 {
        return Err(DoktError::Manifest {
            path: path.to_path_buf(),
            message: format!("n_classes must be >= 2, got {}", manifest.n_classes),
        });
    }
    let (n, tokens, dim) = embedding::read_header(&manifest.embeddings_file())?;
    check_dim("n_samples", manifest.n_samples, n)?;
    check_dim("tokens_per_sample", manifest.tokens_per_sample, tokens)?;
    check_dim("pretext_dim", manifest.pretext_dim, dim)?;
    // Validates coverage and range; the table itself is loaded again by
    // `Dataset::open`.
    load_labels(&manifest.labels_file(), manifest.n_samples, manifest.n_classes)?;
    Ok(manifest)
}

fn check_dim(field: &'static str, declared: usize, found: usize) -> Result<()> {
    if declared != found {
        return Err(DoktError::DimensionMismatch {
            field,
            declared: declared as u64,
            found: found as u64,
        });
    }
    Ok(())
}

#[derive(Debug, Deserialize, Serialize)]
struct LabelRow {
    id: usize,
    class: usize,
}

/// Reads an `id,class` CSV covering exactly the ids `[0, n_samples)`.
pub fn load_labels(path: &Path, n_samples: usize, n_classes: usize) -> Result<Vec<Label>> {
    let rows = read_label_rows(path, n_classes)?;
    if rows.len() != n_samples {
        return Err(DoktError::Labels(format!(
            "{} rows for {n_samples} samples",
            rows.len()
        )));
    }
    let mut table: Vec<Option<Label>> = vec![None; n_samples];
    for (id, label) in rows {
        let slot = table.get_mut(id.0).ok_or(DoktError::UnknownSample(id.0))?;
        if slot.replace(label).is_some() {
            return Err(DoktError::Labels(format!("id {id} appears twice")));
        }
    }
    Ok(table.into_iter().map(|l| l.expect("every id filled")).collect())
}

/// Reads an `id,class` CSV without requiring full coverage (e.g. a partial
/// labeled pool).
pub fn read_label_rows(path: &Path, n_classes: usize) -> Result<Vec<(SampleId, Label)>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => DoktError::io(path, io),
        other => DoktError::Labels(format!("{other:?}")),
    })?;
    let headers = reader
        .headers()
        .map_err(|e| DoktError::Labels(e.to_string()))?
        .clone();
    if headers.iter().collect::<Vec<_>>() != ["id", "class"] {
        return Err(DoktError::Labels(format!(
            "{}: expected header `id,class`",
            path.display()
        )));
    }
    let mut out = Vec::new();
    for row in reader.deserialize::<LabelRow>() {
        let row = row.map_err(|e| DoktError::Labels(format!("{}: {e}", path.display())))?;
        if row.class >= n_classes {
            return Err(DoktError::LabelRange {
                class: row.class,
                n_classes,
            });
        }
        out.push((SampleId(row.id), Label(row.class)));
    }
    Ok(out)
}

pub fn write_label_rows(path: &Path, rows: impl IntoIterator<Item = (SampleId, Label)>) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| DoktError::Labels(e.to_string()))?;
    for (id, label) in rows {
        writer
            .serialize(LabelRow {
                id: id.0,
                class: label.0,
            })
            .map_err(|e| DoktError::Labels(e.to_string()))?;
    }
    writer.flush().map_err(|e| DoktError::io(path, e))
}
