//! A small synthetic task for offline runs under the mock oracle.
//!
//! Two topics with disjoint vocabularies, each with one hidden keyword that
//! makes an example positive. Splits are fixed at 40 train, 20 validation
//! and 20 test, half of each from either topic.

use rand::Rng;

use crate::data::{Dataset, Task};
use crate::domain::{class_list, Example, SplitTag};
use crate::gateway::mock::MockSpec;
use crate::rng;

pub struct Topic {
    pub name: &'static str,
    pub keyword: &'static str,
    pub vocabulary: [&'static str; 12],
}

pub const TOPICS: [Topic; 2] = [
    Topic {
        name: "finance",
        keyword: "scam",
        vocabulary: [
            "bank", "account", "payment", "invoice", "loan", "credit", "transfer", "balance", "deposit", "refund",
            "savings", "mortgage",
        ],
    },
    Topic {
        name: "travel",
        keyword: "cancelled",
        vocabulary: [
            "flight", "hotel", "airport", "luggage", "ticket", "beach", "train", "passport", "booking", "tour",
            "museum", "cruise",
        ],
    },
];

pub const TOY_SEED: u64 = 7;
pub const TOY_PROMPT: &str = "Does this message need urgent attention?";

/// Per topic: (split, examples, positives).
const LAYOUT: [(SplitTag, usize, usize); 3] = [(SplitTag::Train, 20, 8), (SplitTag::Val, 10, 4), (SplitTag::Test, 10, 4)];

const WORDS_PER_EXAMPLE: usize = 6;

pub fn toy_task() -> Task {
    Task {
        name: "toy".into(),
        classes: class_list(&["False", "True"]).expect("valid classes"),
        initial_prompt: TOY_PROMPT.into(),
    }
}

/// The oracle rules that generated the labels.
pub fn toy_mock_spec(seed: u64) -> MockSpec {
    MockSpec::new(TOPICS.iter().map(|t| (t.keyword, 1)), seed)
}

/// The 80 labelled, split-tagged toy examples for `seed`.
pub fn toy_examples(seed: u64) -> Vec<Example> {
    let mut r = rng::seeded(seed);
    let mut out = Vec::new();
    for (split, n, positives) in LAYOUT {
        for topic in &TOPICS {
            for i in 0..n {
                let mut words: Vec<&str> = rng::sample_indices(&mut r, topic.vocabulary.len(), WORDS_PER_EXAMPLE)
                    .into_iter()
                    .map(|w| topic.vocabulary[w])
                    .collect();
                let positive = i < positives;
                if positive {
                    let at = r.random_range(0..=words.len() as u64) as usize;
                    words.insert(at, topic.keyword);
                }
                let tag = match split {
                    SplitTag::Train => "train",
                    SplitTag::Val => "val",
                    SplitTag::Test => "test",
                };
                let mut e = Example::text(
                    format!("{tag}-{}-{i:02}", topic.name),
                    words.join(" "),
                    Some(usize::from(positive)),
                );
                e.split = Some(split);
                out.push(e);
            }
        }
    }
    out
}

pub fn toy_dataset(seed: u64) -> Dataset {
    Dataset::new(&toy_task(), toy_examples(seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{split, SplitSpec};
    use crate::gateway::mock::contains_phrase;

    #[test]
    fn layout_and_labels() {
        let d = toy_dataset(TOY_SEED);
        d.validate().unwrap();
        let s = split(&d, &SplitSpec::default()).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (40, 20, 20));
        for e in &d.examples {
            let hit = TOPICS.iter().any(|t| contains_phrase(&e.joined_text(), t.keyword));
            assert_eq!(e.label, Some(usize::from(hit)));
        }
        assert_eq!(toy_examples(TOY_SEED), toy_examples(TOY_SEED));
    }
}
