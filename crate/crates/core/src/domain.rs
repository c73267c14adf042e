//! Core value types shared across the crate.
//!
//! A [`Constitution`] is the learned prompt: ordered principle lists grouped
//! under class labels plus a task description. An [`Expert`] binds a
//! constitution to a cluster centroid; an [`ExpertEnsemble`] is the routed
//! mixture of experts.

use std::collections::BTreeMap;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Maximum length, in characters, of a single principle.
pub const MAX_PRINCIPLE_CHARS: usize = 1000;

/// Current on-disk ensemble format.
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DomainError {
    #[error("constitution has no entry for class {0}")]
    MissingClassEntry(usize),
    #[error("constitution has an entry for unknown class {0}")]
    UnknownClass(usize),
    #[error("principle {index} of class {class_id} is empty")]
    EmptyPrincipleText { class_id: usize, index: usize },
    #[error("principle {index} of class {class_id} has {len} characters (max {MAX_PRINCIPLE_CHARS})")]
    OversizedPrinciple {
        class_id: usize,
        index: usize,
        len: usize,
    },
    #[error("principle {index} of class {class_id} has surrounding whitespace")]
    UntrimmedPrinciple { class_id: usize, index: usize },
    #[error("class list is invalid: {0}")]
    InvalidClasses(String),
    #[error("example {0:?} is invalid: {1}")]
    InvalidExample(String, String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("ensemble is invalid: {0}")]
    InvalidEnsemble(String),
}

/// A class the task can answer with. `id` is the position in the task's class list.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ClassLabel {
    pub id: usize,
    pub name: String,
}

impl ClassLabel {
    pub fn new(id: usize, name: impl Into<String>) -> Self {
        Self {
            id,
            name: name.into(),
        }
    }
}

/// Builds a class list from names, assigning contiguous ids in order.
pub fn class_list<S: AsRef<str>>(names: &[S]) -> Result<Vec<ClassLabel>, DomainError> {
    let classes: Vec<ClassLabel> = names
        .iter()
        .enumerate()
        .map(|(i, n)| ClassLabel::new(i, n.as_ref()))
        .collect();
    validate_classes(&classes)?;
    Ok(classes)
}

/// Checks that ids are contiguous from zero and names are unique and non-empty.
pub fn validate_classes(classes: &[ClassLabel]) -> Result<(), DomainError> {
    if classes.is_empty() {
        return Err(DomainError::InvalidClasses("no classes".into()));
    }
    for (i, c) in classes.iter().enumerate() {
        if c.id != i {
            return Err(DomainError::InvalidClasses(format!(
                "class {:?} has id {} at position {i}",
                c.name, c.id
            )));
        }
        if c.name.trim().is_empty() {
            return Err(DomainError::InvalidClasses(format!("class {i} has an empty name")));
        }
        if classes[..i].iter().any(|o| o.name == c.name) {
            return Err(DomainError::InvalidClasses(format!("duplicate class name {:?}", c.name)));
        }
    }
    Ok(())
}

/// A single rule arguing for one class. This is the flat form used in
/// ensemble files; inside a [`Constitution`] principles are grouped by class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Principle {
    pub class_id: usize,
    pub text: String,
}

/// Checks a principle text against the length and whitespace rules.
pub fn check_principle_text(class_id: usize, index: usize, text: &str) -> Result<(), DomainError> {
    if text.trim().is_empty() {
        return Err(DomainError::EmptyPrincipleText { class_id, index });
    }
    if text.trim() != text {
        return Err(DomainError::UntrimmedPrinciple { class_id, index });
    }
    let len = text.chars().count();
    if len > MAX_PRINCIPLE_CHARS {
        return Err(DomainError::OversizedPrinciple {
            class_id,
            index,
            len,
        });
    }
    Ok(())
}

/// The learned prompt: principles grouped by class id, in render order.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Constitution {
    pub task_description: String,
    pub principles: BTreeMap<usize, Vec<String>>,
}

impl Constitution {
    /// An empty constitution with one (empty) entry per class.
    pub fn empty(task_description: impl Into<String>, classes: &[ClassLabel]) -> Self {
        Self {
            task_description: task_description.into(),
            principles: classes.iter().map(|c| (c.id, Vec::new())).collect(),
        }
    }

    /// Appends `text` to `class_id`'s list, creating the entry when missing.
    pub fn with_principle(mut self, class_id: usize, text: impl Into<String>) -> Self {
        self.principles.entry(class_id).or_default().push(text.into());
        self
    }

    pub fn principles_for(&self, class_id: usize) -> &[String] {
        self.principles
            .get(&class_id)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    pub fn num_principles(&self) -> usize {
        self.principles.values().map(Vec::len).sum()
    }

    /// All principles in render order (class order, then list order).
    pub fn iter(&self) -> impl Iterator<Item = Principle> + '_ {
        self.principles.iter().flat_map(|(&class_id, list)| {
            list.iter().map(move |t| Principle {
                class_id,
                text: t.clone(),
            })
        })
    }

    /// Flat principle list, as stored in ensemble files.
    pub fn to_flat(&self) -> Vec<Principle> {
        self.iter().collect()
    }

    /// Rebuilds a constitution from its flat form, giving every class in
    /// `classes` an entry even if it has no principles.
    pub fn from_flat(
        task_description: impl Into<String>,
        principles: &[Principle],
        classes: &[ClassLabel],
    ) -> Self {
        let mut c = Self::empty(task_description, classes);
        for p in principles {
            c.principles.entry(p.class_id).or_default().push(p.text.clone());
        }
        c
    }
}

/// Returns `c` when every class has an entry and every principle is well formed.
pub fn validate_constitution(
    c: Constitution,
    classes: &[ClassLabel],
) -> Result<Constitution, DomainError> {
    for class in classes {
        if !c.principles.contains_key(&class.id) {
            return Err(DomainError::MissingClassEntry(class.id));
        }
    }
    for (&class_id, list) in &c.principles {
        if class_id >= classes.len() {
            return Err(DomainError::UnknownClass(class_id));
        }
        for (index, text) in list.iter().enumerate() {
            check_principle_text(class_id, index, text)?;
        }
    }
    Ok(c)
}

/// One structured edit to a constitution.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MutationOp {
    Add { class_id: usize, new_text: String },
    Edit {
        class_id: usize,
        index: usize,
        new_text: String,
    },
    Delete { class_id: usize, index: usize },
}

impl MutationOp {
    pub fn class_id(&self) -> usize {
        match self {
            MutationOp::Add { class_id, .. }
            | MutationOp::Edit { class_id, .. }
            | MutationOp::Delete { class_id, .. } => *class_id,
        }
    }
}

/// One input record. `label` is absent for pure inference inputs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub features: IndexMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<SplitTag>,
}

impl Example {
    /// A single-feature example with the feature named `text`.
    pub fn text(id: impl Into<String>, text: impl Into<String>, label: Option<usize>) -> Self {
        let mut features = IndexMap::new();
        features.insert("text".to_string(), text.into());
        Self {
            id: id.into(),
            features,
            label,
            split: None,
        }
    }

    pub fn validate(&self) -> Result<(), DomainError> {
        if self.features.is_empty() {
            return Err(DomainError::InvalidExample(self.id.clone(), "no features".into()));
        }
        if self.features.keys().any(|k| k.trim().is_empty()) {
            return Err(DomainError::InvalidExample(
                self.id.clone(),
                "empty feature name".into(),
            ));
        }
        Ok(())
    }

    /// Feature values joined by newlines; this is the text that gets embedded.
    pub fn joined_text(&self) -> String {
        self.features
            .values()
            .map(String::as_str)
            .collect::<Vec<_>>()
            .join("\n")
    }
}

/// A scorer output: a class id, or an abstention when the completion could
/// not be parsed. Abstentions always count as wrong.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Prediction {
    Label(usize),
    Abstain,
}

impl Prediction {
    pub fn label(self) -> Option<usize> {
        match self {
            Prediction::Label(l) => Some(l),
            Prediction::Abstain => None,
        }
    }

    pub fn is_correct(self, gold: usize) -> bool {
        self == Prediction::Label(gold)
    }
}

/// Canonical split membership carried by a source file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Val,
    Test,
}

/// Parameters of the UCB survivor selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BanditConfig {
    /// Total pull budget. `None` means 20 pulls per candidate.
    pub rounds: Option<usize>,
    /// Validation examples scored per pull.
    pub minibatch_size: usize,
    /// Exploration constant `c` of the UCB bonus.
    pub exploration: f64,
}

impl Default for BanditConfig {
    fn default() -> Self {
        Self {
            rounds: None,
            minibatch_size: 16,
            exploration: 2.0,
        }
    }
}

impl BanditConfig {
    /// Every arm is pulled once on the whole validation set, so the
    /// ranking equals exhaustive validation accuracy.
    pub fn exhaustive() -> Self {
        Self {
            rounds: Some(1),
            minibatch_size: usize::MAX,
            exploration: 2.0,
        }
    }

    /// Pull budget for a pool of `n_candidates`; never fewer than one pull per arm.
    pub fn budget(&self, n_candidates: usize) -> usize {
        self.rounds.unwrap_or(20 * n_candidates).max(n_candidates)
    }

    pub fn validate(&self) -> Result<(), DomainError> {
        if self.rounds == Some(0) {
            return Err(DomainError::InvalidConfig("bandit rounds must be >= 1".into()));
        }
        if self.minibatch_size == 0 {
            return Err(DomainError::InvalidConfig("bandit minibatch_size must be >= 1".into()));
        }
        if !(self.exploration >= 0.0 && self.exploration.is_finite()) {
            return Err(DomainError::InvalidConfig(
                "bandit exploration must be finite and >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Errors sampled per beam member per iteration (N).
    pub n_errors: usize,
    /// Mutations requested per error (M).
    pub m_mutations: usize,
    /// Beam width and number of initial constitutions (B).
    pub beam: usize,
    /// Optimisation iterations (J).
    pub iterations: usize,
    /// Cluster counts tried by silhouette selection.
    pub k_candidates: Vec<usize>,
    pub seed: u64,
    /// Training examples scanned per error-sampling call.
    pub scan_budget: usize,
    /// Class whose F1 drives expert choice and evaluation.
    pub positive_class: usize,
    pub bandit: BanditConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n_errors: 3,
            m_mutations: 2,
            beam: 3,
            iterations: 5,
            k_candidates: vec![2, 3],
            seed: 0,
            scan_budget: 64,
            positive_class: 1,
            bandit: BanditConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), DomainError> {
        let counts = [
            ("n_errors", self.n_errors),
            ("m_mutations", self.m_mutations),
            ("beam", self.beam),
            ("scan_budget", self.scan_budget),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(DomainError::InvalidConfig(format!("{name} must be >= 1")));
            }
        }
        if self.k_candidates.is_empty() || self.k_candidates.contains(&0) {
            return Err(DomainError::InvalidConfig(
                "k_candidates must be a non-empty set of positive integers".into(),
            ));
        }
        self.bandit.validate()
    }
}

/// Training metadata kept alongside each expert.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Provenance {
    pub iterations_run: usize,
    /// Best full-validation F1 among the initial beam, then after each iteration.
    pub val_f1_trajectory: Vec<f64>,
    /// Index of the initial beam slot the final constitution descends from.
    pub initial_slot: usize,
    /// Mutations applied to that initial constitution, in order.
    pub lineage: Vec<MutationOp>,
    pub train_ids: Vec<String>,
    pub val_size: usize,
    /// True when the cluster had no validation examples and the global set was used.
    pub used_global_validation: bool,
}

/// A constitution bound to a cluster centroid.
#[derive(Debug, Clone, PartialEq)]
pub struct Expert {
    pub cluster_id: usize,
    pub centroid: Vec<f64>,
    pub constitution: Constitution,
    pub provenance: Provenance,
}

/// The mixture of experts plus everything needed to route to them.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertEnsemble {
    pub format_version: u32,
    pub embedding_model_id: String,
    pub classes: Vec<ClassLabel>,
    pub experts: Vec<Expert>,
    pub config_digest: String,
}

impl ExpertEnsemble {
    pub fn validate(&self) -> Result<(), DomainError> {
        validate_classes(&self.classes)?;
        let Some(first) = self.experts.first() else {
            return Err(DomainError::InvalidEnsemble("no experts".into()));
        };
        let dim = first.centroid.len();
        for (i, e) in self.experts.iter().enumerate() {
            if e.cluster_id != i {
                return Err(DomainError::InvalidEnsemble(format!(
                    "expert at position {i} has cluster_id {}",
                    e.cluster_id
                )));
            }
            if e.centroid.len() != dim || dim == 0 {
                return Err(DomainError::InvalidEnsemble(format!(
                    "expert {i} centroid has dimension {} (expected {dim})",
                    e.centroid.len()
                )));
            }
            if e.centroid.iter().any(|x| !x.is_finite()) || e.centroid.iter().all(|&x| x == 0.0) {
                return Err(DomainError::InvalidEnsemble(format!(
                    "expert {i} centroid is zero or non-finite"
                )));
            }
            validate_constitution(e.constitution.clone(), &self.classes)?;
        }
        Ok(())
    }

    pub fn centroids(&self) -> Vec<&[f64]> {
        self.experts.iter().map(|e| e.centroid.as_slice()).collect()
    }
}

/// Ordered feature map helper for tests and loaders.
pub fn features<I, K, V>(pairs: I) -> IndexMap<String, String>
where
    I: IntoIterator<Item = (K, V)>,
    K: Into<String>,
    V: Into<String>,
{
    pairs.into_iter().map(|(k, v)| (k.into(), v.into())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn classes() -> Vec<ClassLabel> {
        class_list(&["False", "True"]).unwrap()
    }

    #[test]
    fn well_formed_constitution_validates() {
        let c = Constitution::empty("Is it hateful?", &classes())
            .with_principle(0, "The comment is not hateful.")
            .with_principle(1, "The comment is hateful.");
        assert_eq!(validate_constitution(c.clone(), &classes()).unwrap(), c);
    }

    #[test]
    fn missing_class_entry() {
        let mut c = Constitution::empty("q", &classes()).with_principle(1, "The comment is hateful.");
        c.principles.remove(&0);
        assert_eq!(
            validate_constitution(c, &classes()),
            Err(DomainError::MissingClassEntry(0))
        );
    }

    #[test]
    fn oversized_principle() {
        let c = Constitution::empty("q", &classes()).with_principle(0, "x".repeat(2000));
        assert!(matches!(
            validate_constitution(c, &classes()),
            Err(DomainError::OversizedPrinciple { len: 2000, .. })
        ));
    }

    #[test]
    fn empty_principle_text() {
        let c = Constitution::empty("q", &classes()).with_principle(1, "   ");
        assert!(matches!(
            validate_constitution(c, &classes()),
            Err(DomainError::EmptyPrincipleText { class_id: 1, index: 0 })
        ));
    }

    #[test]
    fn class_list_rejects_duplicates() {
        assert!(class_list(&["a", "a"]).is_err());
        assert!(class_list::<&str>(&[]).is_err());
        assert!(class_list(&["a", ""]).is_err());
    }

    #[test]
    fn flat_form_keeps_empty_classes() {
        let c = Constitution::empty("q", &classes()).with_principle(1, "b");
        let back = Constitution::from_flat("q", &c.to_flat(), &classes());
        assert_eq!(back, c);
    }

    fn arb_constitution() -> impl Strategy<Value = Constitution> {
        (
            "[a-z ?]{0,20}",
            prop::collection::vec(prop::collection::vec("[A-Za-z][a-z .]{0,30}[a-z.]", 0..4), 1..4),
        )
            .prop_map(|(task, lists)| Constitution {
                task_description: task,
                principles: lists.into_iter().enumerate().collect(),
            })
    }

    proptest! {
        #[test]
        fn constitution_serde_round_trip(c in arb_constitution()) {
            let json = serde_json::to_string(&c).unwrap();
            let back: Constitution = serde_json::from_str(&json).unwrap();
            prop_assert_eq!(back, c);
        }

        #[test]
        fn validation_is_idempotent(c in arb_constitution()) {
            let names: Vec<String> = (0..c.principles.len()).map(|i| format!("c{i}")).collect();
            let cls = class_list(&names).unwrap();
            if let Ok(once) = validate_constitution(c, &cls) {
                let twice = validate_constitution(once.clone(), &cls).unwrap();
                prop_assert_eq!(twice, once);
            }
        }

        #[test]
        fn mutation_op_serde_round_trip(class_id in 0usize..3, index in 0usize..5, text in "[a-z ]{1,20}") {
            for op in [
                MutationOp::Add { class_id, new_text: text.clone() },
                MutationOp::Edit { class_id, index, new_text: text.clone() },
                MutationOp::Delete { class_id, index },
            ] {
                let json = serde_json::to_string(&op).unwrap();
                prop_assert_eq!(serde_json::from_str::<MutationOp>(&json).unwrap(), op);
            }
        }
    }
}
