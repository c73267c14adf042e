use std::collections::BTreeMap;

use tenet_core::data::{split, Dataset, SplitSpec, Splits, Task};
use tenet_core::domain::{class_list, Constitution, Example, MutationOp, TrainConfig};
use tenet_core::gateway::mock::{mock_oracle, MockSpec};
use tenet_core::gateway::Gateway;
use tenet_core::optimizer::{
    checkpoint_path, classify, predict_all, train_ensemble, train_expert, Checkpoint, EnsembleRun, TrainControl,
};
use tenet_core::prompts::apply_mutation;
use tenet_core::toy::{toy_dataset, toy_mock_spec, TOPICS, TOY_SEED};

fn ticket_task(n_train: usize, n_val: usize) -> (Dataset, Dataset, MockSpec) {
    let task = Task {
        name: "tickets".into(),
        classes: class_list(&["routine", "urgent"]).unwrap(),
        initial_prompt: "Does this ticket need a reply today?".into(),
    };
    let filler = ["printer", "login", "invoice", "laptop", "badge", "parking", "wifi", "desk"];
    let keywords = ["outage", "breach", "deadline"];
    let make = |prefix: &str, n: usize, offset: usize| -> Vec<Example> {
        (0..n)
            .map(|i| {
                let j = i + offset;
                let mut words = vec![filler[j % 8], filler[(j * 3 + 1) % 8], filler[(j * 5 + 2) % 8]];
                let positive = !j.is_multiple_of(3);
                if positive {
                    words.insert(j % 3, keywords[j % keywords.len()]);
                }
                Example::text(format!("{prefix}{i}"), words.join(" "), Some(usize::from(positive)))
            })
            .collect()
    };
    let train = Dataset::new(&task, make("t", n_train, 0));
    let val = Dataset::new(&task, make("v", n_val, 101));
    (train, val, MockSpec::new(keywords.iter().map(|k| (*k, 1)), 5))
}

fn read_checkpoint(dir: &std::path::Path) -> Checkpoint {
    serde_json::from_str(&std::fs::read_to_string(checkpoint_path(dir, 0)).unwrap()).unwrap()
}

fn train_with_iterations(j: usize) -> (Checkpoint, TrainConfig) {
    let (train, val, spec) = ticket_task(24, 12);
    let gw = mock_oracle(spec);
    let cfg = TrainConfig {
        iterations: j,
        seed: 3,
        ..TrainConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let ctl = TrainControl {
        checkpoint_dir: Some(dir.path().to_path_buf()),
        resume: false,
    };
    train_expert(&train, &val, &cfg, &gw, &ctl, 0).unwrap();
    (read_checkpoint(dir.path()), cfg)
}

#[test]
fn beam_width_is_b_after_every_iteration_count() {
    for j in 0..=3 {
        let (ck, cfg) = train_with_iterations(j);
        assert_eq!(ck.beam.iteration, j);
        assert_eq!(ck.beam.members.len(), cfg.beam, "after {j} iterations");
        assert_eq!(ck.beam.val_f1_trajectory.len(), j + 1);
    }
}

/// Multiset of (class, text) pairs differs by exactly the op's footprint.
fn assert_single_slot(before: &Constitution, after: &Constitution, op: &MutationOp) {
    let bag = |c: &Constitution| {
        let mut m: BTreeMap<(usize, String), i64> = BTreeMap::new();
        for p in c.iter() {
            *m.entry((p.class_id, p.text)).or_default() += 1;
        }
        m
    };
    let (a, b) = (bag(before), bag(after));
    let mut delta: BTreeMap<&(usize, String), i64> = BTreeMap::new();
    for (k, v) in &a {
        *delta.entry(k).or_default() -= v;
    }
    for (k, v) in &b {
        *delta.entry(k).or_default() += v;
    }
    delta.retain(|_, v| *v != 0);
    let moved: i64 = delta.values().map(|v| v.abs()).sum();
    let expected = match op {
        MutationOp::Edit { .. } => 2,
        _ => 1,
    };
    assert_eq!(moved, expected, "{op:?}");
    assert!(delta.keys().all(|(class, _)| *class == op.class_id()));
}

#[test]
fn lineage_replays_from_the_initial_slot_to_the_final_constitution() {
    let (initial, _) = train_with_iterations(0);
    let (last, _) = train_with_iterations(3);
    let done = last.finished.expect("training finished");
    let mut c = initial.beam.members[done.provenance.initial_slot].constitution.clone();
    for op in &done.provenance.lineage {
        let next = apply_mutation(&c, op).unwrap();
        assert_single_slot(&c, &next, op);
        c = next;
    }
    assert_eq!(c, done.constitution);
}

fn toy_run(k_candidates: Vec<usize>) -> (EnsembleRun, Gateway, Splits) {
    let s = split(&toy_dataset(TOY_SEED), &SplitSpec::default()).unwrap();
    let gw = mock_oracle(toy_mock_spec(TOY_SEED));
    let cfg = TrainConfig {
        seed: TOY_SEED,
        k_candidates,
        ..TrainConfig::default()
    };
    let run = train_ensemble(&s.train, &s.val, &cfg, &gw, &TrainControl::default()).unwrap();
    (run, gw, s)
}

fn topic_of(id: &str) -> &'static str {
    TOPICS.iter().find(|t| id.contains(t.name)).unwrap().name
}

#[test]
fn toy_experts_specialise_by_topic() {
    let (run, _, _) = toy_run(vec![2, 3]);
    let ens = &run.ensemble;
    assert_eq!(ens.experts.len(), 2);
    let mut seen = Vec::new();
    for e in &ens.experts {
        let topic = topic_of(&e.provenance.train_ids[0]);
        assert!(e.provenance.train_ids.iter().all(|id| topic_of(id) == topic), "mixed cluster {}", e.cluster_id);
        let keyword = TOPICS.iter().find(|t| t.name == topic).unwrap().keyword;
        let text: Vec<String> = e.constitution.iter().map(|p| p.text.to_lowercase()).collect();
        assert!(text.iter().any(|t| t.contains(keyword)), "expert {} lacks {keyword}: {text:?}", e.cluster_id);
        seen.push(topic);
    }
    seen.sort();
    assert_eq!(seen, ["finance", "travel"]);
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let n = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (n(a) * n(b))
}

#[test]
fn routed_predictions_match_route_then_classify() {
    let (run, gw, s) = toy_run(vec![2, 3]);
    let ens = &run.ensemble;
    let inputs: Vec<Example> = s.test.examples.iter().chain(s.val.examples.iter().take(10)).cloned().collect();
    assert_eq!(inputs.len(), 30);
    let routed = predict_all(ens, &inputs, &gw).unwrap();
    let texts: Vec<String> = inputs.iter().map(Example::joined_text).collect();
    let vectors = gw.embed(&texts).unwrap();
    for ((e, r), v) in inputs.iter().zip(&routed).zip(&vectors) {
        let sims: Vec<f64> = ens.experts.iter().map(|x| cosine(v, &x.centroid)).collect();
        let best = (0..sims.len()).fold(0, |b, i| if sims[i] > sims[b] { i } else { b });
        assert_eq!(r.expert_id, best, "{}", e.id);
        assert!((r.similarity - sims[best]).abs() < 1e-12);
        let direct = classify(&ens.experts[best].constitution, e, &ens.classes, &gw).unwrap();
        assert_eq!(r.prediction, direct, "{}", e.id);
    }
}

#[test]
fn similarity_of_the_most_central_example_is_its_cosine() {
    let (run, gw, s) = toy_run(vec![2, 3]);
    let ens = &run.ensemble;
    let texts: Vec<String> = s.test.examples.iter().map(Example::joined_text).collect();
    let vectors = gw.embed(&texts).unwrap();
    for expert in &ens.experts {
        let (idx, sim) = vectors
            .iter()
            .map(|v| cosine(v, &expert.centroid))
            .enumerate()
            .fold((0, f64::MIN), |b, (i, c)| if c > b.1 { (i, c) } else { b });
        let r = predict_all(ens, std::slice::from_ref(&s.test.examples[idx]), &gw).unwrap()[0];
        assert_eq!(r.expert_id, expert.cluster_id);
        assert!((r.similarity - sim).abs() < 1e-12, "{} vs {sim}", r.similarity);
    }
}

#[test]
fn a_single_expert_takes_every_input() {
    let (run, gw, s) = toy_run(vec![1]);
    assert_eq!(run.ensemble.experts.len(), 1);
    let routed = predict_all(&run.ensemble, &s.test.examples, &gw).unwrap();
    assert!(routed.iter().all(|r| r.expert_id == 0));
}
