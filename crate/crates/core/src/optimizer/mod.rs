//! Expert training: error sampling, structured mutation and UCB survivor
//! selection, plus ensemble assembly and routed prediction.

mod train;

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clustering::ClusterError;
use crate::data::DataError;
use crate::domain::{BanditConfig, ClassLabel, Constitution, DomainError, Example, MutationOp, Prediction};
use crate::gateway::{Gateway, GatewayError, Role};
use crate::prompts::{self, Feedback, MutationMenu, PromptError};
use crate::rng::{self, RunRng};
use crate::vector::VectorError;

pub use train::{
    checkpoint_path, config_digest, initial_constitution, predict, predict_all, predict_rows, train_ensemble, train_expert,
    BeamMember, BeamState, Checkpoint, EnsembleRun, Routed, TrainControl, TrainedExpert, CHECKPOINT_VERSION,
};

#[derive(Debug, Error)]
pub enum OptimizerError {
    #[error("no candidates to select from")]
    EmptyCandidates,
    #[error("validation set is empty")]
    EmptyValidation,
    #[error("training set is empty")]
    EmptyTraining,
    #[error("example {0} has no gold label")]
    Unlabeled(String),
    #[error("positive class {0} is outside the class list")]
    PositiveClass(usize),
    #[error("ensemble was trained with embedding model {ensemble} but the gateway embeds with {gateway}")]
    EmbeddingModel { ensemble: String, gateway: String },
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: String, message: String },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Vector(#[from] VectorError),
}

/// Scores `e` under `c`. Unparseable completions become [`Prediction::Abstain`].
pub fn classify(c: &Constitution, e: &Example, classes: &[ClassLabel], gw: &Gateway) -> Result<Prediction, GatewayError> {
    let prompt = prompts::render_scoring_prompt(c, e, classes);
    let completion = gw.complete(&gw.request(Role::Score, prompt.text))?;
    Ok(match prompts::parse_answer(&completion, classes) {
        Ok(id) => Prediction::Label(id),
        Err(err) => {
            log::debug!("example {}: {err}", e.id);
            Prediction::Abstain
        }
    })
}

/// Scores every example, fanning out up to the gateway's concurrency.
/// Results are in input order.
pub fn classify_all(
    c: &Constitution,
    examples: &[&Example],
    classes: &[ClassLabel],
    gw: &Gateway,
) -> Result<Vec<Prediction>, GatewayError> {
    let workers = gw.concurrency().min(examples.len());
    if workers <= 1 {
        return examples.iter().map(|e| classify(c, e, classes, gw)).collect();
    }
    let chunk = examples.len().div_ceil(workers);
    std::thread::scope(|s| {
        let handles: Vec<_> = examples
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().map(|e| classify(c, e, classes, gw)).collect::<Result<Vec<_>, _>>()))
            .collect();
        let mut out = Vec::with_capacity(examples.len());
        for h in handles {
            out.extend(h.join().expect("scoring thread panicked")?);
        }
        Ok(out)
    })
}

fn gold(e: &Example) -> Result<usize, OptimizerError> {
    e.label.ok_or_else(|| OptimizerError::Unlabeled(e.id.clone()))
}

/// A misclassified training example.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledError {
    pub example: Example,
    pub predicted: Prediction,
}

/// Scans a seeded permutation of `train` until `n` misclassifications are
/// found or `scan_budget` examples have been scored. Errors come back in
/// scan order; abstentions count as errors.
pub fn sample_errors(
    c: &Constitution,
    train: &[Example],
    classes: &[ClassLabel],
    n: usize,
    scan_budget: usize,
    rng: &mut RunRng,
    gw: &Gateway,
) -> Result<Vec<SampledError>, OptimizerError> {
    if train.is_empty() {
        return Err(OptimizerError::EmptyTraining);
    }
    let mut order: Vec<usize> = (0..train.len()).collect();
    rng::shuffle(rng, &mut order);
    order.truncate(scan_budget.min(train.len()));
    let mut found = Vec::new();
    for block in order.chunks(gw.concurrency()) {
        let examples: Vec<&Example> = block.iter().map(|&i| &train[i]).collect();
        let preds = classify_all(c, &examples, classes, gw)?;
        for (e, p) in examples.into_iter().zip(preds) {
            if !p.is_correct(gold(e)?) {
                found.push(SampledError {
                    example: e.clone(),
                    predicted: p,
                });
                if found.len() == n {
                    return Ok(found);
                }
            }
        }
    }
    Ok(found)
}

/// A child constitution and the single mutation that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub constitution: Constitution,
    pub op: MutationOp,
    pub example_id: String,
}

/// For each error: ask for feedback, then for `m` distinct mutations, and
/// apply each to `c`. Unparseable, invalid and no-op mutations are skipped,
/// as are children equal to an earlier one.
pub fn propose_candidates(
    c: &Constitution,
    errors: &[SampledError],
    m: usize,
    classes: &[ClassLabel],
    gw: &Gateway,
) -> Result<Vec<Candidate>, OptimizerError> {
    let menu = MutationMenu::for_constitution(c, classes);
    let mut out: Vec<Candidate> = Vec::new();
    for err in errors {
        let gold = gold(&err.example)?;
        let feedback_prompt = prompts::render_feedback_prompt(c, &err.example, err.predicted, classes)?;
        let explanation = gw.complete(&gw.request(Role::Optimize, feedback_prompt))?;
        let feedback = Feedback {
            example_id: err.example.id.clone(),
            predicted: err.predicted,
            gold,
            explanation: explanation.trim().to_string(),
        };
        let mutation_prompt = prompts::render_mutation_prompt(c, &feedback, &menu, m, classes)?;
        let completion = gw.complete(&gw.request(Role::Optimize, mutation_prompt))?;
        let mut ops: Vec<MutationOp> = Vec::new();
        for parsed in prompts::parse_mutations(&completion, &menu) {
            match parsed {
                Ok(op) if !ops.contains(&op) => ops.push(op),
                Ok(_) => {}
                Err(e) => log::debug!("example {}: skipping mutation: {e}", err.example.id),
            }
        }
        ops.truncate(m);
        for op in ops {
            match prompts::apply_mutation(c, &op) {
                Ok(child) if child != *c && !out.iter().any(|o| o.constitution == child) => out.push(Candidate {
                    constitution: child,
                    op,
                    example_id: err.example.id.clone(),
                }),
                Ok(_) => {}
                Err(e) => log::debug!("example {}: skipping mutation: {e}", err.example.id),
            }
        }
    }
    Ok(out)
}

/// Bandit statistics of one arm. `pulls` counts minibatches; `scored` and
/// `correct` count examples.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArmStats {
    pub pulls: u64,
    pub scored: u64,
    pub correct: u64,
}

impl ArmStats {
    pub fn mean(&self) -> f64 {
        if self.scored == 0 {
            0.0
        } else {
            self.correct as f64 / self.scored as f64
        }
    }

    /// Exact comparison of empirical means.
    pub fn cmp_mean(&self, other: &Self) -> Ordering {
        (self.correct as u128 * other.scored as u128).cmp(&(other.correct as u128 * self.scored as u128))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    /// Arm indices, best first.
    pub ranking: Vec<usize>,
    pub stats: Vec<ArmStats>,
}

impl Selection {
    pub fn top(&self, b: usize) -> &[usize] {
        &self.ranking[..b.min(self.ranking.len())]
    }
}

/// UCB1 over `n_arms`, each pull scoring a seeded minibatch of validation
/// indices. Unpulled arms go first in index order; afterwards the arm
/// maximising `mean + c * sqrt(ln(total pulls) / arm pulls)` is pulled
/// (lowest index on ties). The ranking orders arms by empirical mean, then
/// by `tie_keys`, then by index.
pub fn ucb_rank<F>(
    n_arms: usize,
    n_val: usize,
    cfg: &BanditConfig,
    tie_keys: &[usize],
    rng: &mut RunRng,
    mut pull: F,
) -> Result<Selection, OptimizerError>
where
    F: FnMut(usize, &[usize]) -> Result<Vec<bool>, OptimizerError>,
{
    if n_arms == 0 {
        return Err(OptimizerError::EmptyCandidates);
    }
    if n_val == 0 {
        return Err(OptimizerError::EmptyValidation);
    }
    let batch_size = cfg.minibatch_size.min(n_val);
    let mut stats = vec![ArmStats::default(); n_arms];
    for total in 0..cfg.budget(n_arms) {
        let arm = match stats.iter().position(|s| s.pulls == 0) {
            Some(a) => a,
            None => {
                let ln_total = (total as f64).ln();
                let score = |s: &ArmStats| s.mean() + cfg.exploration * (ln_total / s.pulls as f64).sqrt();
                let mut best = 0;
                for a in 1..n_arms {
                    if score(&stats[a]) > score(&stats[best]) {
                        best = a;
                    }
                }
                best
            }
        };
        let batch = rng::sample_indices(rng, n_val, batch_size);
        let outcome = pull(arm, &batch)?;
        let s = &mut stats[arm];
        s.pulls += 1;
        s.scored += outcome.len() as u64;
        s.correct += outcome.iter().filter(|&&ok| ok).count() as u64;
    }
    let mut ranking: Vec<usize> = (0..n_arms).collect();
    ranking.sort_by(|&a, &b| {
        stats[b]
            .cmp_mean(&stats[a])
            .then(tie_keys.get(a).cmp(&tie_keys.get(b)))
            .then(a.cmp(&b))
    });
    Ok(Selection { ranking, stats })
}

/// Runs [`ucb_rank`] with constitutions as arms and per-example accuracy on
/// `val` as reward. Each (arm, example) pair is scored at most once.
pub fn ucb_select(
    candidates: &[Constitution],
    val: &[Example],
    classes: &[ClassLabel],
    cfg: &BanditConfig,
    rng: &mut RunRng,
    gw: &Gateway,
) -> Result<Selection, OptimizerError> {
    let golds = val.iter().map(gold).collect::<Result<Vec<_>, _>>()?;
    let tie_keys: Vec<usize> = candidates.iter().map(Constitution::num_principles).collect();
    let mut memo: Vec<Vec<Option<bool>>> = vec![vec![None; val.len()]; candidates.len()];
    ucb_rank(candidates.len(), val.len(), cfg, &tie_keys, rng, |arm, batch| {
        let missing: Vec<usize> = batch.iter().copied().filter(|&i| memo[arm][i].is_none()).collect();
        let examples: Vec<&Example> = missing.iter().map(|&i| &val[i]).collect();
        let preds = classify_all(&candidates[arm], &examples, classes, gw)?;
        for (&i, p) in missing.iter().zip(preds) {
            memo[arm][i] = Some(p.is_correct(golds[i]));
        }
        Ok(batch.iter().map(|&i| memo[arm][i].expect("scored")).collect())
    })
}
