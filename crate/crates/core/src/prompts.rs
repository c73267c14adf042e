//! Prompt rendering and completion parsing.
//!
//! Templates are versioned text assets in Jinja syntax. The scoring template
//! follows the classification layout: tagged input features, the task
//! description, one `answer_<id>:` block per class holding that class's
//! principles, and a trailing `answer_` cue. A template's id is its file name
//! plus a prefix of the SHA-256 of its contents, so any wording change shows
//! up in transcripts and cache keys.

use std::sync::OnceLock;

use minijinja::{context, Environment};
use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::domain::{check_principle_text, ClassLabel, Constitution, DomainError, Example, MutationOp, Prediction};

pub const SCORING_TEMPLATE: &str = "scoring.txt";
pub const FEEDBACK_TEMPLATE: &str = "feedback.txt";
pub const MUTATION_TEMPLATE: &str = "mutation.txt";
pub const PARAPHRASE_TEMPLATE: &str = "paraphrase.txt";

const TEMPLATES: [(&str, &str); 4] = [
    (SCORING_TEMPLATE, include_str!("../assets/templates/scoring.txt")),
    (FEEDBACK_TEMPLATE, include_str!("../assets/templates/feedback.txt")),
    (MUTATION_TEMPLATE, include_str!("../assets/templates/mutation.txt")),
    (PARAPHRASE_TEMPLATE, include_str!("../assets/templates/paraphrase.txt")),
];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PromptError {
    #[error("could not parse completion: {0}")]
    ParseFailure(String),
    #[error("option {option} is out of range (menu has {len} options)")]
    OutOfRangeOption { option: usize, len: usize },
    #[error("principle index {index} out of range for class {class_id} ({len} principles)")]
    IndexOutOfRange { class_id: usize, index: usize, len: usize },
    #[error("class {0} is not part of the constitution")]
    UnknownClass(usize),
    #[error("feedback requested for a correct prediction")]
    PredictionMatchesGold,
    #[error("example {0:?} has no gold label")]
    MissingGold(String),
    #[error("template error: {0}")]
    Template(String),
    #[error(transparent)]
    Domain(#[from] DomainError),
}

fn env() -> &'static Environment<'static> {
    static ENV: OnceLock<Environment<'static>> = OnceLock::new();
    ENV.get_or_init(|| {
        let mut env = Environment::new();
        env.set_trim_blocks(true);
        env.set_lstrip_blocks(true);
        for (name, body) in TEMPLATES {
            env.add_template(name, body).expect("bundled templates compile");
        }
        env
    })
}

/// `<file name>@<first 12 hex chars of the content digest>`.
pub fn template_id(name: &str) -> String {
    let body = TEMPLATES
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, b)| *b)
        .unwrap_or_default();
    let digest = hex::encode(Sha256::digest(body.as_bytes()));
    format!("{name}@{}", &digest[..12])
}

/// Raw text of a bundled template.
pub fn template_source(name: &str) -> Option<&'static str> {
    TEMPLATES.iter().find(|(n, _)| *n == name).map(|(_, b)| *b)
}

fn render(name: &str, ctx: minijinja::Value) -> Result<String, PromptError> {
    env()
        .get_template(name)
        .and_then(|t| t.render(ctx))
        .map_err(|e| PromptError::Template(e.to_string()))
}

#[derive(Serialize)]
struct FeatureCtx<'a> {
    name: &'a str,
    value: &'a str,
}

#[derive(Serialize)]
struct ClassCtx<'a> {
    id: usize,
    name: &'a str,
    attributes: &'a [String],
}

fn feature_ctx(e: &Example) -> Vec<FeatureCtx<'_>> {
    e.features
        .iter()
        .map(|(name, value)| FeatureCtx { name, value })
        .collect()
}

fn class_ctx<'a>(c: &'a Constitution, classes: &'a [ClassLabel]) -> Vec<ClassCtx<'a>> {
    classes
        .iter()
        .map(|cl| ClassCtx {
            id: cl.id,
            name: &cl.name,
            attributes: c.principles_for(cl.id),
        })
        .collect()
}

fn answer_token(id: usize) -> String {
    format!("answer_{id}")
}

/// Describes a prediction for metaprompts.
fn describe_prediction(p: Prediction, classes: &[ClassLabel]) -> String {
    match p {
        Prediction::Label(id) => match classes.get(id) {
            Some(c) => format!("{} ({})", answer_token(id), c.name),
            None => answer_token(id),
        },
        Prediction::Abstain => "no recognisable answer".to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub text: String,
    pub class_order: Vec<ClassLabel>,
    pub template_id: String,
}

/// Renders the classification prompt for `e` under constitution `c`.
/// Classes are always rendered in task order.
pub fn render_scoring_prompt(c: &Constitution, e: &Example, classes: &[ClassLabel]) -> RenderedPrompt {
    let text = render(
        SCORING_TEMPLATE,
        context! {
            input_features => feature_ctx(e),
            task_description => &c.task_description,
            classes => class_ctx(c, classes),
        },
    )
    .expect("scoring template renders validated inputs");
    RenderedPrompt {
        text,
        class_order: classes.to_vec(),
        template_id: template_id(SCORING_TEMPLATE),
    }
}

fn answer_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)answer_(\d+)").expect("valid regex"))
}

fn leading_id_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^(\d+)\b").expect("valid regex"))
}

/// Maps a scorer completion to a class id.
///
/// A bare leading id (the completion continues the trailing `answer_` cue)
/// wins; otherwise the first `answer_<id>` token naming a known class is used.
pub fn parse_answer(completion: &str, classes: &[ClassLabel]) -> Result<usize, PromptError> {
    let known = |s: &str| s.parse::<usize>().ok().filter(|&id| id < classes.len());
    let trimmed = completion.trim();
    if let Some(id) = leading_id_re()
        .captures(trimmed)
        .and_then(|c| known(&c[1]))
    {
        return Ok(id);
    }
    answer_re()
        .captures_iter(trimmed)
        .find_map(|c| known(&c[1]))
        .ok_or_else(|| PromptError::ParseFailure(format!("no answer token in {trimmed:?}")))
}

/// Optimizer feedback on one misclassified example.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Feedback {
    pub example_id: String,
    pub predicted: Prediction,
    pub gold: usize,
    pub explanation: String,
}

/// Metaprompt asking the optimizer to explain why `predicted` is wrong for `e`.
pub fn render_feedback_prompt(
    c: &Constitution,
    e: &Example,
    predicted: Prediction,
    classes: &[ClassLabel],
) -> Result<String, PromptError> {
    let gold = e.label.ok_or_else(|| PromptError::MissingGold(e.id.clone()))?;
    if predicted == Prediction::Label(gold) {
        return Err(PromptError::PredictionMatchesGold);
    }
    let gold_class = classes.get(gold).ok_or(PromptError::UnknownClass(gold))?;
    render(
        FEEDBACK_TEMPLATE,
        context! {
            task_description => &c.task_description,
            classes => class_ctx(c, classes),
            input_features => feature_ctx(e),
            predicted => describe_prediction(predicted, classes),
            gold => gold_class,
        },
    )
}

/// One entry of the mutation menu. Its handle is its position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MenuOption {
    Edit { class_id: usize, index: usize },
    Delete { class_id: usize, index: usize },
    Add { class_id: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MutationMenu {
    pub options: Vec<MenuOption>,
}

impl MutationMenu {
    /// Per class in task order: an edit and a delete for every principle,
    /// then an add.
    pub fn for_constitution(c: &Constitution, classes: &[ClassLabel]) -> Self {
        let mut options = Vec::new();
        for cl in classes {
            for index in 0..c.principles_for(cl.id).len() {
                options.push(MenuOption::Edit { class_id: cl.id, index });
                options.push(MenuOption::Delete { class_id: cl.id, index });
            }
            options.push(MenuOption::Add { class_id: cl.id });
        }
        Self { options }
    }

    pub fn len(&self) -> usize {
        self.options.len()
    }

    pub fn is_empty(&self) -> bool {
        self.options.is_empty()
    }

    fn describe(&self, c: &Constitution, classes: &[ClassLabel]) -> Vec<minijinja::Value> {
        let label = |id: usize| match classes.get(id) {
            Some(cl) => format!("{} ({})", answer_token(id), cl.name),
            None => answer_token(id),
        };
        self.options
            .iter()
            .enumerate()
            .map(|(handle, opt)| {
                let description = match *opt {
                    MenuOption::Edit { class_id, index } => format!(
                        "edit principle {index} of {}: \"{}\"",
                        label(class_id),
                        c.principles_for(class_id).get(index).map_or("", String::as_str)
                    ),
                    MenuOption::Delete { class_id, index } => format!(
                        "delete principle {index} of {}: \"{}\"",
                        label(class_id),
                        c.principles_for(class_id).get(index).map_or("", String::as_str)
                    ),
                    MenuOption::Add { class_id } => format!("add a new principle for {}", label(class_id)),
                };
                context! { handle, description }
            })
            .collect()
    }
}

/// Metaprompt asking the optimizer for `count` mutations chosen from `menu`.
pub fn render_mutation_prompt(
    c: &Constitution,
    f: &Feedback,
    menu: &MutationMenu,
    count: usize,
    classes: &[ClassLabel],
) -> Result<String, PromptError> {
    render(
        MUTATION_TEMPLATE,
        context! {
            task_description => &c.task_description,
            classes => class_ctx(c, classes),
            explanation => &f.explanation,
            options => menu.describe(c, classes),
            count,
        },
    )
}

fn option_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)\bOPTION\s*#?\s*(\d+)\s*[:.)\-]?[ \t]*([^\r\n]*)").expect("valid regex"))
}

fn clean_text(s: &str) -> String {
    s.trim()
        .trim_matches(|c| c == '"' || c == '\'' || c == '`')
        .trim()
        .to_string()
}

fn op_from_option(option: usize, text: &str, menu: &MutationMenu) -> Result<MutationOp, PromptError> {
    let opt = menu.options.get(option).ok_or(PromptError::OutOfRangeOption {
        option,
        len: menu.len(),
    })?;
    let new_text = clean_text(text);
    let need_text = || {
        if new_text.is_empty() {
            Err(PromptError::ParseFailure(format!("option {option} needs principle text")))
        } else {
            Ok(new_text.clone())
        }
    };
    Ok(match *opt {
        MenuOption::Add { class_id } => MutationOp::Add {
            class_id,
            new_text: need_text()?,
        },
        MenuOption::Edit { class_id, index } => MutationOp::Edit {
            class_id,
            index,
            new_text: need_text()?,
        },
        MenuOption::Delete { class_id, index } => MutationOp::Delete { class_id, index },
    })
}

/// Parses the first `OPTION <n>[: text]` in `completion` against `menu`.
pub fn parse_mutation(completion: &str, menu: &MutationMenu) -> Result<MutationOp, PromptError> {
    let caps = option_re()
        .captures(completion)
        .ok_or_else(|| PromptError::ParseFailure("no OPTION token".into()))?;
    let option: usize = caps[1]
        .parse()
        .map_err(|_| PromptError::OutOfRangeOption { option: usize::MAX, len: menu.len() })?;
    op_from_option(option, &caps[2], menu)
}

/// Parses every `OPTION` line of a multi-line completion.
pub fn parse_mutations(completion: &str, menu: &MutationMenu) -> Vec<Result<MutationOp, PromptError>> {
    let parsed: Vec<_> = completion
        .lines()
        .filter(|l| option_re().is_match(l))
        .map(|l| parse_mutation(l, menu))
        .collect();
    if parsed.is_empty() {
        vec![Err(PromptError::ParseFailure("no OPTION token".into()))]
    } else {
        parsed
    }
}

/// Returns a new constitution with `op` applied; `c` is untouched.
pub fn apply_mutation(c: &Constitution, op: &MutationOp) -> Result<Constitution, PromptError> {
    let mut next = c.clone();
    let class_id = op.class_id();
    let list = next
        .principles
        .get_mut(&class_id)
        .ok_or(PromptError::UnknownClass(class_id))?;
    let len = list.len();
    let out_of_range = |index| PromptError::IndexOutOfRange { class_id, index, len };
    match op {
        MutationOp::Add { new_text, .. } => {
            check_principle_text(class_id, len, new_text)?;
            list.push(new_text.clone());
        }
        MutationOp::Edit { index, new_text, .. } => {
            check_principle_text(class_id, *index, new_text)?;
            let slot = list.get_mut(*index).ok_or_else(|| out_of_range(*index))?;
            *slot = new_text.clone();
        }
        MutationOp::Delete { index, .. } => {
            if *index >= len {
                return Err(out_of_range(*index));
            }
            list.remove(*index);
        }
    }
    Ok(next)
}

/// Metaprompt asking the optimizer for a reworded copy of `c`.
pub fn render_paraphrase_prompt(
    c: &Constitution,
    variant: usize,
    classes: &[ClassLabel],
) -> Result<String, PromptError> {
    render(
        PARAPHRASE_TEMPLATE,
        context! {
            task_description => &c.task_description,
            classes => class_ctx(c, classes),
            variant,
        },
    )
}

fn paraphrase_line_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?im)^\s*answer_(\d+)\s*:\s*(.+?)\s*$").expect("valid regex"))
}

/// Builds a constitution from `answer_<id>: text` lines. Every class keeps an
/// entry; unknown ids are a parse failure.
pub fn parse_paraphrase(
    completion: &str,
    task_description: &str,
    classes: &[ClassLabel],
) -> Result<Constitution, PromptError> {
    let mut c = Constitution::empty(task_description, classes);
    let mut any = false;
    for caps in paraphrase_line_re().captures_iter(completion) {
        let id: usize = caps[1]
            .parse()
            .map_err(|_| PromptError::ParseFailure("bad class id".into()))?;
        if id >= classes.len() {
            return Err(PromptError::UnknownClass(id));
        }
        let text = clean_text(&caps[2]);
        if text.is_empty() {
            continue;
        }
        c = c.with_principle(id, text);
        any = true;
    }
    if !any {
        return Err(PromptError::ParseFailure("no answer_<id> lines".into()));
    }
    Ok(crate::domain::validate_constitution(c, classes)?)
}
