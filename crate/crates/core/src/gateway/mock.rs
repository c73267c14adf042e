//! Deterministic offline stand-in for all three model roles.
//!
//! The oracle is driven by a hidden keyword table (`keyword -> class`) and
//! reads the prompts this crate renders:
//!
//! * **Scorer.** Walks the rendered principles in order (class order, then
//!   list order). The first principle that contains a table keyword which
//!   also occurs in the example decides the answer: `answer_<class of that
//!   principle>`. With no match the answer is `answer_0`.
//! * **Optimizer, feedback.** Names the first table keyword of the gold
//!   class present in the example, and the principle that misled the scorer
//!   if there was one.
//! * **Optimizer, mutations.** Proposes, in order: add a principle
//!   mentioning the gold keyword to the gold class; delete the misleading
//!   principle; edit a gold-class principle to mention the keyword; add an
//!   alternative phrasing. The first `count` applicable proposals are
//!   returned as `OPTION <n>: <text>` lines.
//! * **Optimizer, paraphrase.** Returns every principle with a
//!   ` (variant <n>)` suffix.
//! * **Embedder.** Hashes lower-cased alphanumeric tokens into a
//!   fixed-dimension signed count vector and normalises it. Text without
//!   tokens maps to a fixed one-hot vector.
//!
//! Keyword matching is on whole tokens: a keyword matches when its tokens
//! occur contiguously in the text's tokens.
//!
//! Every response is a pure function of `(spec, request)`, so runs are
//! reproducible and resumable.

use std::sync::{Arc, OnceLock};

use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Backend, Gateway, GatewayBuilder, GatewayError, LlmRequest, RateLimit, RetryPolicy, Role, RoleBinding};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeywordRule {
    pub keyword: String,
    pub class_id: usize,
}

fn default_dim() -> usize {
    256
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockSpec {
    pub keywords: Vec<KeywordRule>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_dim")]
    pub dim: usize,
}

impl MockSpec {
    pub fn new<S: Into<String>>(keywords: impl IntoIterator<Item = (S, usize)>, seed: u64) -> Self {
        Self {
            keywords: keywords
                .into_iter()
                .map(|(k, c)| KeywordRule {
                    keyword: k.into(),
                    class_id: c,
                })
                .collect(),
            seed,
            dim: default_dim(),
        }
    }
}

const PHRASINGS: [&str; 3] = [
    "The example mentions {kw}.",
    "The text refers to {kw}.",
    "The example talks about {kw}.",
];

pub fn tokens(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// True when the tokens of `phrase` occur contiguously in `text`.
pub fn contains_phrase(text: &str, phrase: &str) -> bool {
    let hay = tokens(text);
    let needle = tokens(phrase);
    !needle.is_empty() && hay.windows(needle.len()).any(|w| w == needle.as_slice())
}

fn hash64(seed: u64, parts: &[&str]) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

fn re(cell: &'static OnceLock<Regex>, pattern: &str) -> &'static Regex {
    cell.get_or_init(|| Regex::new(pattern).expect("valid regex"))
}

fn is_tag_line(line: &str) -> bool {
    let t = line.trim();
    t.starts_with('<') && t.ends_with('>')
}

/// Example text and principles parsed from a rendered scoring prompt.
fn parse_scoring(prompt: &str) -> (String, Vec<(usize, String)>) {
    static HEADER: OnceLock<Regex> = OnceLock::new();
    let header = re(&HEADER, r"^answer_(\d+):");
    let mut lines = prompt.lines();
    let mut example = Vec::new();
    lines.next();
    for line in lines.by_ref() {
        if line.ends_with("Let's think step-by-step.") {
            break;
        }
        if !is_tag_line(line) {
            example.push(line.trim());
        }
    }
    let mut principles = Vec::new();
    let mut current = None;
    for line in lines {
        if let Some(c) = header.captures(line) {
            current = c[1].parse().ok();
        } else if line.is_empty() {
            if current.is_some() {
                break;
            }
        } else if let (Some(class), Some(text)) = (current, line.strip_prefix("    ")) {
            principles.push((class, text.trim().to_string()));
        }
    }
    (example.join("\n"), principles)
}

/// Principles listed under "Current principles:" in a metaprompt.
fn parse_listed_principles(prompt: &str) -> Vec<(usize, String)> {
    static HEADER: OnceLock<Regex> = OnceLock::new();
    let header = re(&HEADER, r"^answer_(\d+) \(.*\):$");
    let mut out = Vec::new();
    let mut current = None;
    let mut inside = false;
    for line in prompt.lines() {
        if line == "Current principles:" {
            inside = true;
            continue;
        }
        if !inside {
            continue;
        }
        if line.is_empty() {
            break;
        }
        if let Some(c) = header.captures(line) {
            current = c[1].parse().ok();
        } else if let (Some(class), Some(text)) = (current, line.trim_start().strip_prefix("- ")) {
            out.push((class, text.trim().to_string()));
        }
    }
    out
}

fn section<'a>(prompt: &'a str, start: &str, end: &str) -> Vec<&'a str> {
    prompt
        .lines()
        .skip_while(|l| *l != start)
        .skip(1)
        .take_while(|l| !l.starts_with(end))
        .collect()
}

pub struct MockOracle {
    spec: MockSpec,
    name: String,
}

impl MockOracle {
    /// The backend name carries a digest of `spec`, so cached responses
    /// never leak between different oracles.
    pub fn new(spec: MockSpec) -> Self {
        let digest = crate::rng::digest_parts([serde_json::to_string(&spec).expect("spec serializes")]);
        Self {
            name: format!("mock-{}", &digest[..12]),
            spec,
        }
    }

    pub fn spec(&self) -> &MockSpec {
        &self.spec
    }

    /// First (principle, keyword) pair that fires on `example`.
    fn first_match<'a>(&'a self, example: &str, principles: &'a [(usize, String)]) -> Option<(&'a (usize, String), &'a str)> {
        principles.iter().find_map(|p| {
            self.spec
                .keywords
                .iter()
                .find(|r| contains_phrase(&p.1, &r.keyword) && contains_phrase(example, &r.keyword))
                .map(|r| (p, r.keyword.as_str()))
        })
    }

    /// The scorer's rule applied to an example and a principle list.
    pub fn classify(&self, example: &str, principles: &[(usize, String)]) -> usize {
        self.first_match(example, principles).map_or(0, |((c, _), _)| *c)
    }

    fn score(&self, prompt: &str) -> String {
        let (example, principles) = parse_scoring(prompt);
        format!("answer_{}", self.classify(&example, &principles))
    }

    fn feedback(&self, prompt: &str) -> String {
        static GOLD: OnceLock<Regex> = OnceLock::new();
        let Some(gold) = re(&GOLD, r"(?m)^The correct answer is: answer_(\d+)")
            .captures(prompt)
            .and_then(|c| c[1].parse::<usize>().ok())
        else {
            return "I cannot tell what the correct answer is.".into();
        };
        let example: Vec<&str> = section(prompt, "Example:", "The classifier answered:")
            .into_iter()
            .filter(|l| !is_tag_line(l))
            .collect();
        let example = example.join("\n");
        let principles = parse_listed_principles(prompt);
        let gold_kw = self
            .spec
            .keywords
            .iter()
            .find(|r| r.class_id == gold && contains_phrase(&example, &r.keyword));
        let mut out = match gold_kw {
            Some(r) => format!("The example contains \"{}\", which indicates answer_{gold}.", r.keyword),
            None => format!("Nothing in the example clearly indicates answer_{gold}."),
        };
        match self.first_match(&example, &principles) {
            Some(((class, text), kw)) if *class != gold => {
                out.push_str(&format!(" The principle \"{text}\" matched \"{kw}\" and misled the classifier."));
            }
            _ => out.push_str(&format!(" No principle for answer_{gold} applies to this example.")),
        }
        out
    }

    fn mutations(&self, prompt: &str) -> String {
        static COUNT: OnceLock<Regex> = OnceLock::new();
        static GOLD: OnceLock<Regex> = OnceLock::new();
        static CULPRIT: OnceLock<Regex> = OnceLock::new();
        static OPTION: OnceLock<Regex> = OnceLock::new();
        let count = re(&COUNT, r"Choose (\d+) distinct changes")
            .captures(prompt)
            .and_then(|c| c[1].parse::<usize>().ok())
            .unwrap_or(1);
        let feedback = section(prompt, "A recent prediction was wrong. Feedback on the error:", "Choose ").join("\n");
        let gold = re(&GOLD, r#"contains "([^"]+)", which indicates answer_(\d+)"#)
            .captures(&feedback)
            .map(|c| (c[1].to_string(), c[2].parse::<usize>().unwrap_or(0)));
        let culprit = re(&CULPRIT, r#"The principle "(.+)" matched ""#)
            .captures(&feedback)
            .map(|c| c[1].to_string());

        let option_re = re(
            &OPTION,
            r#"(?m)^OPTION (\d+): (add a new principle for|edit principle \d+ of|delete principle \d+ of) answer_(\d+) \([^)]*\)(?:: "(.*)")?$"#,
        );
        struct Opt {
            handle: usize,
            action: &'static str,
            class: usize,
            text: Option<String>,
        }
        let options: Vec<Opt> = option_re
            .captures_iter(prompt)
            .map(|c| Opt {
                handle: c[1].parse().unwrap_or(usize::MAX),
                action: if c[2].starts_with("add") {
                    "add"
                } else if c[2].starts_with("edit") {
                    "edit"
                } else {
                    "delete"
                },
                class: c[3].parse().unwrap_or(usize::MAX),
                text: c.get(4).map(|m| m.as_str().to_string()),
            })
            .collect();

        let mut proposals: Vec<String> = Vec::new();
        let phrase = |kw: &str, shift: u64| {
            let i = (hash64(self.spec.seed, &["phrasing", kw]) + shift) % PHRASINGS.len() as u64;
            PHRASINGS[i as usize].replace("{kw}", kw)
        };
        if let Some((kw, class)) = &gold {
            if let Some(o) = options.iter().find(|o| o.action == "add" && o.class == *class) {
                proposals.push(format!("OPTION {}: {}", o.handle, phrase(kw, 0)));
            }
        }
        if let Some(text) = &culprit {
            if let Some(o) = options
                .iter()
                .find(|o| o.action == "delete" && o.text.as_deref() == Some(text.as_str()))
            {
                proposals.push(format!("OPTION {}", o.handle));
            }
        }
        if let Some((kw, class)) = &gold {
            let edits: Vec<&Opt> = options.iter().filter(|o| o.action == "edit" && o.class == *class).collect();
            if !edits.is_empty() {
                let pick = hash64(self.spec.seed, &["edit", prompt]) as usize % edits.len();
                proposals.push(format!("OPTION {}: {}", edits[pick].handle, phrase(kw, 0)));
            }
            if let Some(o) = options.iter().find(|o| o.action == "add" && o.class == *class) {
                proposals.push(format!("OPTION {}: {}", o.handle, phrase(kw, 1)));
            }
        }
        proposals.dedup();
        if proposals.is_empty() {
            return "No change is needed.".into();
        }
        proposals.truncate(count);
        proposals.join("\n")
    }

    fn paraphrase(&self, prompt: &str) -> String {
        static VARIANT: OnceLock<Regex> = OnceLock::new();
        let variant = re(&VARIANT, r"rewrite number (\d+)")
            .captures(prompt)
            .map_or(0, |c| c[1].parse().unwrap_or(0));
        section(prompt, "Principles:", "Answer with")
            .into_iter()
            .filter(|l| l.starts_with("answer_"))
            .map(|l| format!("{l} (variant {variant})"))
            .collect::<Vec<_>>()
            .join("\n")
    }

    fn optimize(&self, prompt: &str) -> String {
        if prompt.starts_with("You are reviewing a classifier") {
            self.feedback(prompt)
        } else if prompt.starts_with("You are revising the principles") {
            self.mutations(prompt)
        } else if prompt.starts_with("Rewrite each principle") {
            self.paraphrase(prompt)
        } else {
            "I cannot help with that request.".into()
        }
    }

    /// Hashed bag-of-tokens embedding, unit length.
    pub fn embed_text(&self, text: &str) -> Vec<f64> {
        let dim = self.spec.dim.max(1);
        let mut v = vec![0.0; dim];
        for t in tokens(text) {
            let h = hash64(self.spec.seed, &["token", &t]);
            let sign = if (h >> 63) & 1 == 1 { -1.0 } else { 1.0 };
            v[(h % dim as u64) as usize] += sign;
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n == 0.0 {
            let mut e = vec![0.0; dim];
            e[(hash64(self.spec.seed, &["empty"]) % dim as u64) as usize] = 1.0;
            return e;
        }
        v.iter().map(|x| x / n).collect()
    }
}

impl Backend for MockOracle {
    fn name(&self) -> &str {
        &self.name
    }

    fn complete(&self, req: &LlmRequest) -> Result<String, GatewayError> {
        Ok(match req.role {
            Role::Score => self.score(&req.prompt),
            Role::Optimize => self.optimize(&req.prompt),
            Role::Embed => return Err(GatewayError::Config("completion requested from the embed role".into())),
        })
    }

    fn embed(&self, _model_id: &str, texts: &[String]) -> Result<Vec<Vec<f64>>, GatewayError> {
        if texts.is_empty() {
            return Err(GatewayError::EmptyInput);
        }
        Ok(texts.iter().map(|t| self.embed_text(t)).collect())
    }
}

/// Gateway builder with every role served by the oracle for `spec`. Calls
/// are issued one at a time so transcripts are reproducible.
pub fn mock_builder(spec: MockSpec) -> GatewayBuilder {
    let backend: Arc<dyn Backend> = Arc::new(MockOracle::new(spec));
    let bind = |role: Role| {
        RoleBinding::new(backend.clone(), format!("mock-{}", role.as_str())).with_retry(RetryPolicy::no_wait(1))
    };
    Gateway::builder(bind(Role::Score), bind(Role::Optimize), bind(Role::Embed)).rate_limit(RateLimit {
        max_in_flight: 1,
        requests_per_minute: None,
    })
}

pub fn mock_oracle(spec: MockSpec) -> Gateway {
    mock_builder(spec).build()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{class_list, ClassLabel, Constitution, Example, Prediction};
    use crate::prompts::{self, Feedback, MutationMenu};

    fn classes() -> Vec<ClassLabel> {
        class_list(&["False", "True"]).unwrap()
    }

    fn oracle() -> MockOracle {
        MockOracle::new(MockSpec::new([("attack", 1), ("scam", 1), ("hello", 0)], 3))
    }

    fn score(o: &MockOracle, c: &Constitution, text: &str) -> String {
        let p = prompts::render_scoring_prompt(c, &Example::text("e", text, None), &classes());
        o.complete(&LlmRequest::new(Role::Score, "m", p.text)).unwrap()
    }

    #[test]
    fn scorer_matches_keyword_in_principle_and_example() {
        let o = oracle();
        let c = Constitution::empty("q", &classes()).with_principle(1, "mentions attack");
        assert_eq!(score(&o, &c, "they attack us"), "answer_1");
        assert_eq!(score(&o, &c, "they attacked us"), "answer_0");
        assert_eq!(score(&o, &Constitution::empty("q", &classes()), "they attack us"), "answer_0");
    }

    #[test]
    fn scorer_uses_first_matching_principle() {
        let o = oracle();
        // class 0's principle comes first in render order
        let c = Constitution::empty("q", &classes())
            .with_principle(0, "an attack is fine")
            .with_principle(1, "mentions attack");
        assert_eq!(score(&o, &c, "an attack"), "answer_0");
    }

    #[test]
    fn scorer_ignores_feature_tags() {
        let o = MockOracle::new(MockSpec::new([("text", 1)], 0));
        let c = Constitution::empty("q", &classes()).with_principle(1, "has text");
        assert_eq!(score(&o, &c, "nothing here"), "answer_0");
    }

    fn feedback(o: &MockOracle, c: &Constitution, text: &str, gold: usize, predicted: usize) -> String {
        let e = Example::text("e", text, Some(gold));
        let p = prompts::render_feedback_prompt(c, &e, Prediction::Label(predicted), &classes()).unwrap();
        o.complete(&LlmRequest::new(Role::Optimize, "m", p)).unwrap()
    }

    #[test]
    fn optimizer_proposes_gold_keyword() {
        let o = oracle();
        let c = Constitution::empty("q", &classes()).with_principle(1, "The comment is hateful.");
        let explanation = feedback(&o, &c, "this is a scam", 1, 0);
        assert!(explanation.contains("\"scam\""), "{explanation}");
        let f = Feedback {
            example_id: "e".into(),
            predicted: Prediction::Label(0),
            gold: 1,
            explanation,
        };
        let menu = MutationMenu::for_constitution(&c, &classes());
        let prompt = prompts::render_mutation_prompt(&c, &f, &menu, 2, &classes()).unwrap();
        let out = o.complete(&LlmRequest::new(Role::Optimize, "m", prompt)).unwrap();
        let ops: Vec<_> = prompts::parse_mutations(&out, &menu).into_iter().map(Result::unwrap).collect();
        assert_eq!(ops.len(), 2);
        match &ops[0] {
            crate::domain::MutationOp::Add { class_id: 1, new_text } => assert!(new_text.contains("scam")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn optimizer_deletes_misleading_principle() {
        let o = oracle();
        let c = Constitution::empty("q", &classes()).with_principle(1, "says hello");
        // "hello" belongs to class 0 but sits under class 1
        let explanation = feedback(&o, &c, "hello there", 0, 1);
        assert!(explanation.contains("The principle \"says hello\" matched"), "{explanation}");
        let f = Feedback {
            example_id: "e".into(),
            predicted: Prediction::Label(1),
            gold: 0,
            explanation,
        };
        let menu = MutationMenu::for_constitution(&c, &classes());
        let prompt = prompts::render_mutation_prompt(&c, &f, &menu, 2, &classes()).unwrap();
        let out = o.complete(&LlmRequest::new(Role::Optimize, "m", prompt)).unwrap();
        let ops: Vec<_> = prompts::parse_mutations(&out, &menu).into_iter().map(Result::unwrap).collect();
        assert!(ops.contains(&crate::domain::MutationOp::Delete { class_id: 1, index: 0 }), "{ops:?}");
    }

    #[test]
    fn paraphrase_tags_variants() {
        let o = oracle();
        let c = Constitution::empty("q", &classes()).with_principle(0, "A.").with_principle(1, "B.");
        let p = prompts::render_paraphrase_prompt(&c, 2, &classes()).unwrap();
        let out = o.complete(&LlmRequest::new(Role::Optimize, "m", p)).unwrap();
        assert_eq!(out, "answer_0: A. (variant 2)\nanswer_1: B. (variant 2)");
    }

    #[test]
    fn embeddings_follow_hash_rule() {
        let o = oracle();
        let a = o.embed_text("aaa");
        let b = o.embed_text("bbb");
        assert_ne!(a, b);
        // one token, so a signed one-hot at the hashed index
        let h = hash64(3, &["token", "aaa"]);
        let mut expected = vec![0.0; 256];
        expected[(h % 256) as usize] = if h >> 63 == 1 { -1.0 } else { 1.0 };
        assert_eq!(a, expected);
        let empty = o.embed_text("");
        assert_eq!(empty.iter().filter(|&&x| x == 1.0).count(), 1);
        assert_eq!(o.embed_text("Hello, world"), o.embed_text("hello world"));
    }
}
