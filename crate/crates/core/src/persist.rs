//! On-disk ensemble format.
//!
//! ```json
//! {"format_version": 1, "embedding_model_id": "...",
//!  "classes": [{"id": 0, "name": "False"}, ...],
//!  "experts": [{"cluster_id": 0, "centroid": [...],
//!               "constitution": {"task_description": "...",
//!                                "principles": [{"class_id": 1, "text": "..."}]},
//!               "provenance": {...}}],
//!  "config_digest": "..."}
//! ```
//!
//! Floats are written with shortest round-trip representation, so
//! `load(save(x)) == x` exactly.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::domain::{
    ClassLabel, Constitution, DomainError, Expert, ExpertEnsemble, Principle, Provenance, FORMAT_VERSION,
};
use crate::rng::digest_parts;

#[derive(Debug, Error)]
pub enum PersistError {
    #[error("cannot access {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: format_version {found} is not supported (expected {expected})")]
    SchemaVersionMismatch { path: String, found: i64, expected: u32 },
    #[error("{path}: corrupt ensemble file: {message}")]
    CorruptFile { path: String, message: String },
    #[error(transparent)]
    Domain(#[from] DomainError),
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConstitutionFile {
    task_description: String,
    principles: Vec<Principle>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExpertFile {
    cluster_id: usize,
    centroid: Vec<f64>,
    constitution: ConstitutionFile,
    provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EnsembleFile {
    format_version: u32,
    embedding_model_id: String,
    classes: Vec<ClassLabel>,
    experts: Vec<ExpertFile>,
    config_digest: String,
}

fn to_file(ens: &ExpertEnsemble) -> EnsembleFile {
    EnsembleFile {
        format_version: ens.format_version,
        embedding_model_id: ens.embedding_model_id.clone(),
        classes: ens.classes.clone(),
        experts: ens
            .experts
            .iter()
            .map(|e| ExpertFile {
                cluster_id: e.cluster_id,
                centroid: e.centroid.clone(),
                constitution: ConstitutionFile {
                    task_description: e.constitution.task_description.clone(),
                    principles: e.constitution.to_flat(),
                },
                provenance: e.provenance.clone(),
            })
            .collect(),
        config_digest: ens.config_digest.clone(),
    }
}

fn from_file(f: EnsembleFile) -> Result<ExpertEnsemble, DomainError> {
    let experts = f
        .experts
        .into_iter()
        .map(|e| Expert {
            cluster_id: e.cluster_id,
            centroid: e.centroid,
            constitution: Constitution::from_flat(e.constitution.task_description, &e.constitution.principles, &f.classes),
            provenance: e.provenance,
        })
        .collect();
    let ens = ExpertEnsemble {
        format_version: f.format_version,
        embedding_model_id: f.embedding_model_id,
        classes: f.classes,
        experts,
        config_digest: f.config_digest,
    };
    ens.validate()?;
    Ok(ens)
}

/// Canonical JSON text of an ensemble.
pub fn ensemble_to_string(ens: &ExpertEnsemble) -> String {
    serde_json::to_string_pretty(&to_file(ens)).expect("ensemble serializes") + "\n"
}

/// SHA-256 of the canonical JSON text.
pub fn ensemble_digest(ens: &ExpertEnsemble) -> String {
    digest_parts([ensemble_to_string(ens)])
}

/// Parses ensemble JSON. The version gate runs before the schema check.
pub fn ensemble_from_str(text: &str, origin: &str) -> Result<ExpertEnsemble, PersistError> {
    let corrupt = |message: String| PersistError::CorruptFile {
        path: origin.to_string(),
        message,
    };
    let value: Value = serde_json::from_str(text).map_err(|e| corrupt(e.to_string()))?;
    let version = value
        .get("format_version")
        .and_then(Value::as_i64)
        .ok_or_else(|| corrupt("missing integer format_version".into()))?;
    if version != i64::from(FORMAT_VERSION) {
        return Err(PersistError::SchemaVersionMismatch {
            path: origin.to_string(),
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let file: EnsembleFile = serde_json::from_value(value).map_err(|e| corrupt(e.to_string()))?;
    from_file(file).map_err(|e| corrupt(e.to_string()))
}

pub fn save_ensemble(path: &Path, ens: &ExpertEnsemble) -> Result<(), PersistError> {
    ens.validate()?;
    let io = |source| PersistError::Io {
        path: path.display().to_string(),
        source,
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(io)?;
    }
    std::fs::write(path, ensemble_to_string(ens)).map_err(io)
}

pub fn load_ensemble(path: &Path) -> Result<ExpertEnsemble, PersistError> {
    let text = std::fs::read_to_string(path).map_err(|source| PersistError::Io {
        path: path.display().to_string(),
        source,
    })?;
    ensemble_from_str(&text, &path.display().to_string())
}
