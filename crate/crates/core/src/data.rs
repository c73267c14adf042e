//! Dataset loading, deterministic splitting and per-cluster partitioning.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clustering::ClusterModel;
use crate::domain::{ClassLabel, DomainError, Example, SplitTag};
use crate::rng;
use crate::vector::{self, VectorError};

const RESERVED_COLUMNS: [&str; 3] = ["id", "label", "split"];

#[derive(Debug, Error)]
pub enum DataError {
    #[error("I/O error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: u64,
        message: String,
    },
    #[error("{path}: line {line}: unknown label {label:?}")]
    UnknownLabel {
        path: PathBuf,
        line: u64,
        label: String,
    },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("duplicate example id {0:?}")]
    DuplicateId(String),
    #[error("split would leave the {0} set empty")]
    TooSmall(&'static str),
    #[error("invalid split specification: {0}")]
    InvalidSplit(String),
    #[error("no embedding for example {0:?}")]
    MissingEmbedding(String),
    #[error("invalid vector for example {id:?}")]
    Vector {
        id: String,
        #[source]
        source: VectorError,
    },
    #[error(transparent)]
    Domain(#[from] DomainError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataFormat {
    Jsonl,
    Csv,
}

impl DataFormat {
    /// Guesses the format from a file extension, defaulting to JSONL.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("csv") => DataFormat::Csv,
            _ => DataFormat::Jsonl,
        }
    }
}

/// What a dataset is about: its name, class list and seed question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub name: String,
    pub classes: Vec<ClassLabel>,
    pub initial_prompt: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub examples: Vec<Example>,
    pub classes: Vec<ClassLabel>,
    pub initial_prompt: String,
}

impl Dataset {
    pub fn new(task: &Task, examples: Vec<Example>) -> Self {
        Self {
            name: task.name.clone(),
            examples,
            classes: task.classes.clone(),
            initial_prompt: task.initial_prompt.clone(),
        }
    }

    pub fn task(&self) -> Task {
        Task {
            name: self.name.clone(),
            classes: self.classes.clone(),
            initial_prompt: self.initial_prompt.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn ids(&self) -> Vec<String> {
        self.examples.iter().map(|e| e.id.clone()).collect()
    }

    /// A dataset with the same task and the given examples.
    pub fn with_examples(&self, examples: Vec<Example>) -> Self {
        Self {
            examples,
            ..self.clone()
        }
    }

    /// Checks label membership and id uniqueness.
    pub fn validate(&self) -> Result<(), DataError> {
        let mut seen = HashSet::new();
        for e in &self.examples {
            e.validate()?;
            if let Some(l) = e.label {
                if l >= self.classes.len() {
                    return Err(DomainError::InvalidExample(e.id.clone(), format!("label {l} out of range")).into());
                }
            }
            if !seen.insert(e.id.as_str()) {
                return Err(DataError::DuplicateId(e.id.clone()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Deserialize)]
struct JsonRecord {
    id: Option<String>,
    text: Option<String>,
    features: Option<IndexMap<String, String>>,
    label: Option<String>,
    split: Option<SplitTag>,
}

#[derive(Debug, Serialize)]
struct JsonRecordOut<'a> {
    id: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    text: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    features: Option<&'a IndexMap<String, String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    label: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    split: Option<SplitTag>,
}

fn open(path: &Path) -> Result<File, DataError> {
    File::open(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn resolve_label(
    path: &Path,
    line: u64,
    label: Option<&str>,
    classes: &[ClassLabel],
    require_label: bool,
) -> Result<Option<usize>, DataError> {
    match label {
        None if require_label => Err(DataError::Parse {
            path: path.to_path_buf(),
            line,
            message: "missing label".into(),
        }),
        None => Ok(None),
        Some(l) => classes
            .iter()
            .find(|c| c.name == l)
            .map(|c| Some(c.id))
            .ok_or_else(|| DataError::UnknownLabel {
                path: path.to_path_buf(),
                line,
                label: l.to_string(),
            }),
    }
}

fn read_jsonl(path: &Path, classes: &[ClassLabel], require_label: bool) -> Result<Vec<Example>, DataError> {
    let reader = BufReader::new(open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i as u64 + 1;
        let line = line.map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| DataError::Parse {
            path: path.to_path_buf(),
            line: lineno,
            message,
        };
        let rec: JsonRecord = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let features = match (rec.text, rec.features) {
            (Some(t), None) => crate::domain::features([("text", t)]),
            (None, Some(f)) if !f.is_empty() => f,
            (None, Some(_)) => return Err(parse_err("\"features\" is empty".into())),
            (Some(_), Some(_)) => return Err(parse_err("both \"text\" and \"features\" given".into())),
            (None, None) => return Err(parse_err("one of \"text\" or \"features\" is required".into())),
        };
        let label = resolve_label(path, lineno, rec.label.as_deref(), classes, require_label)?;
        let ex = Example {
            id: rec.id.unwrap_or_else(|| format!("row-{lineno}")),
            features,
            label,
            split: rec.split,
        };
        ex.validate().map_err(|e| parse_err(e.to_string()))?;
        out.push(ex);
    }
    Ok(out)
}

fn read_csv(path: &Path, classes: &[ClassLabel], require_label: bool) -> Result<Vec<Example>, DataError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(open(path)?);
    let parse_err = |line: u64, message: String| DataError::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let headers = reader.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let (id_col, label_col, split_col) = (col("id"), col("label"), col("split"));
    if require_label && label_col.is_none() {
        return Err(parse_err(1, "header has no \"label\" column".into()));
    }
    let feature_cols: Vec<(usize, String)> = headers
        .iter()
        .enumerate()
        .filter(|(_, h)| !RESERVED_COLUMNS.contains(h))
        .map(|(i, h)| (i, h.to_string()))
        .collect();
    if feature_cols.is_empty() {
        return Err(parse_err(1, "header has no feature columns".into()));
    }
    let mut out = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            parse_err(line, e.to_string())
        })?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let features = feature_cols
            .iter()
            .map(|(i, name)| (name.clone(), rec.get(*i).unwrap_or_default().to_string()))
            .collect();
        let label = resolve_label(path, line, label_col.and_then(|c| rec.get(c)), classes, require_label)?;
        let split = match split_col.and_then(|c| rec.get(c)).filter(|s| !s.is_empty()) {
            None => None,
            Some(s) => Some(
                serde_json::from_value(serde_json::Value::String(s.to_string()))
                    .map_err(|_| parse_err(line, format!("invalid split {s:?}")))?,
            ),
        };
        out.push(Example {
            id: id_col
                .and_then(|c| rec.get(c))
                .filter(|s| !s.is_empty())
                .map(str::to_string)
                .unwrap_or_else(|| format!("row-{line}")),
            features,
            label,
            split,
        });
    }
    Ok(out)
}

fn load_examples(
    path: &Path,
    format: DataFormat,
    classes: &[ClassLabel],
    require_label: bool,
) -> Result<Vec<Example>, DataError> {
    let examples = match format {
        DataFormat::Jsonl => read_jsonl(path, classes, require_label)?,
        DataFormat::Csv => read_csv(path, classes, require_label)?,
    };
    let mut seen = HashSet::new();
    for e in &examples {
        if !seen.insert(e.id.as_str()) {
            return Err(DataError::DuplicateId(e.id.clone()));
        }
    }
    Ok(examples)
}

/// Loads a labelled dataset, keeping records in file order.
pub fn load_dataset(path: &Path, format: DataFormat, task: &Task) -> Result<Dataset, DataError> {
    let examples = load_examples(path, format, &task.classes, true)?;
    if examples.is_empty() {
        return Err(DataError::EmptyDataset);
    }
    Ok(Dataset::new(task, examples))
}

/// Loads inference inputs; labels are optional and the file may be empty.
pub fn load_inputs(path: &Path, format: DataFormat, classes: &[ClassLabel]) -> Result<Vec<Example>, DataError> {
    load_examples(path, format, classes, false)
}

/// Writes examples as JSONL records, labels by class name. Split tags are
/// kept when present.
pub fn write_jsonl(path: &Path, examples: &[Example], classes: &[ClassLabel]) -> Result<(), DataError> {
    let io_err = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(io_err)?;
    }
    let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
    for e in examples {
        let single_text = e.features.len() == 1 && e.features.contains_key("text");
        let rec = JsonRecordOut {
            id: &e.id,
            text: single_text.then(|| e.features["text"].as_str()),
            features: (!single_text).then_some(&e.features),
            label: e.label.and_then(|l| classes.get(l)).map(|c| c.name.as_str()),
            split: e.split,
        };
        let line = serde_json::to_string(&rec).expect("records serialize");
        writeln!(w, "{line}").map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
    /// Use the file-provided split column when the records carry one.
    pub canonical: bool,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_fraction: 0.6,
            val_fraction: 0.2,
            test_fraction: 0.2,
            seed: 0,
            canonical: true,
        }
    }
}

impl SplitSpec {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<(), DataError> {
        let fr = [self.train_fraction, self.val_fraction, self.test_fraction];
        if fr.iter().any(|f| !(*f > 0.0 && *f < 1.0)) {
            return Err(DataError::InvalidSplit("fractions must lie in (0, 1)".into()));
        }
        if (fr.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(DataError::InvalidSplit("fractions must sum to 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

fn split_size(fraction: f64, n: usize) -> usize {
    (fraction * n as f64 + 1e-9).floor() as usize
}

/// Partitions `d` into train/val/test.
///
/// Validation and test sizes are `floor(fraction * n)`; the remainder goes to
/// train. Membership comes from a seeded shuffle of the sorted example ids,
/// and each split keeps the original record order.
pub fn split(d: &Dataset, spec: &SplitSpec) -> Result<Splits, DataError> {
    if d.is_empty() {
        return Err(DataError::EmptyDataset);
    }
    let tagged = d.examples.iter().filter(|e| e.split.is_some()).count();
    let membership: HashMap<&str, SplitTag> = if spec.canonical && tagged > 0 {
        if tagged != d.len() {
            return Err(DataError::InvalidSplit(format!(
                "{tagged} of {} records carry a split column; expected all or none",
                d.len()
            )));
        }
        d.examples
            .iter()
            .map(|e| (e.id.as_str(), e.split.expect("checked")))
            .collect()
    } else {
        spec.validate()?;
        let n = d.len();
        let n_val = split_size(spec.val_fraction, n);
        let n_test = split_size(spec.test_fraction, n);
        let mut ids: Vec<&str> = d.examples.iter().map(|e| e.id.as_str()).collect();
        ids.sort_unstable();
        rng::shuffle(&mut rng::seeded(spec.seed), &mut ids);
        ids.iter()
            .enumerate()
            .map(|(i, id)| {
                let tag = if i < n_test {
                    SplitTag::Test
                } else if i < n_test + n_val {
                    SplitTag::Val
                } else {
                    SplitTag::Train
                };
                (*id, tag)
            })
            .collect()
    };
    let pick = |tag: SplitTag| -> Vec<Example> {
        d.examples
            .iter()
            .filter(|e| membership[e.id.as_str()] == tag)
            .cloned()
            .collect()
    };
    let (train, val, test) = (pick(SplitTag::Train), pick(SplitTag::Val), pick(SplitTag::Test));
    for (name, part) in [("train", &train), ("validation", &val), ("test", &test)] {
        if part.is_empty() {
            return Err(DataError::TooSmall(name));
        }
    }
    Ok(Splits {
        train: d.with_examples(train),
        val: d.with_examples(val),
        test: d.with_examples(test),
    })
}

/// Assigns each example to the cluster whose centroid has the highest cosine
/// similarity with its embedding (ties to the lowest index).
pub fn partition_by_cluster(
    d: &Dataset,
    model: &ClusterModel,
    embeddings: &HashMap<String, Vec<f64>>,
) -> Result<Vec<Dataset>, DataError> {
    let mut parts: Vec<Vec<Example>> = vec![Vec::new(); model.k];
    for e in &d.examples {
        let v = embeddings
            .get(&e.id)
            .ok_or_else(|| DataError::MissingEmbedding(e.id.clone()))?;
        let (idx, _) = vector::nearest_centroid(v, &model.centroids).map_err(|source| DataError::Vector {
            id: e.id.clone(),
            source,
        })?;
        parts[idx].push(e.clone());
    }
    Ok(parts.into_iter().map(|p| d.with_examples(p)).collect())
}

/// Sorted id set, handy for partition checks.
pub fn id_set(d: &Dataset) -> BTreeSet<String> {
    d.examples.iter().map(|e| e.id.clone()).collect()
}
