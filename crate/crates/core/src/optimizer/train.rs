use std::collections::HashMap;
use std::path::{Path, PathBuf};

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use super::{
    classify_all, gold, propose_candidates, sample_errors, ucb_select, ArmStats, OptimizerError,
};
use crate::clustering::{self, ClusterModel};
use crate::data::{self, Dataset, Task};
use crate::domain::{
    validate_constitution, ClassLabel, Constitution, DomainError, Example, Expert, ExpertEnsemble, MutationOp,
    Prediction, Provenance, TrainConfig, FORMAT_VERSION,
};
use crate::gateway::{Gateway, Role};
use crate::metrics;
use crate::prompts;
use crate::rng::{self, digest_parts, RunRng};
use crate::vector;

pub const CHECKPOINT_VERSION: u32 = 1;

/// One constitution in the beam and how it was derived.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeamMember {
    pub constitution: Constitution,
    pub initial_slot: usize,
    pub lineage: Vec<MutationOp>,
}

/// Survivors after `iteration` completed iterations, with the bandit
/// statistics each earned in the selection that kept it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeamState {
    pub iteration: usize,
    pub members: Vec<BeamMember>,
    pub stats: Vec<ArmStats>,
    pub val_f1_trajectory: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedExpert {
    pub constitution: Constitution,
    pub provenance: Provenance,
}

/// Training state of one expert, rewritten after every iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config_digest: String,
    pub data_digest: String,
    pub cluster_id: usize,
    pub beam: BeamState,
    pub rng: RunRng,
    pub rng_digest: String,
    pub finished: Option<TrainedExpert>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainControl {
    pub checkpoint_dir: Option<PathBuf>,
    /// Continue from existing checkpoints instead of overwriting them.
    pub resume: bool,
}

pub fn checkpoint_path(dir: &Path, cluster_id: usize) -> PathBuf {
    dir.join(format!("expert-{cluster_id}.json"))
}

fn rng_digest(rng: &RunRng) -> String {
    digest_parts([serde_json::to_string(rng).expect("rng state serializes")])
}

fn checkpoint_error(path: &Path, message: impl Into<String>) -> OptimizerError {
    OptimizerError::Checkpoint {
        path: path.display().to_string(),
        message: message.into(),
    }
}

fn write_checkpoint(path: &Path, ck: &Checkpoint) -> Result<(), OptimizerError> {
    let err = |e: std::io::Error| checkpoint_error(path, e.to_string());
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(err)?;
    }
    let tmp = path.with_extension("json.tmp");
    let body = serde_json::to_string(ck).map_err(|e| checkpoint_error(path, e.to_string()))?;
    std::fs::write(&tmp, body).map_err(err)?;
    std::fs::rename(&tmp, path).map_err(err)
}

fn read_checkpoint(path: &Path, config_digest: &str, data_digest: &str, cluster_id: usize) -> Result<Checkpoint, OptimizerError> {
    let body = std::fs::read_to_string(path).map_err(|e| checkpoint_error(path, e.to_string()))?;
    let ck: Checkpoint = serde_json::from_str(&body).map_err(|e| checkpoint_error(path, e.to_string()))?;
    if ck.version != CHECKPOINT_VERSION {
        return Err(checkpoint_error(path, format!("unsupported version {}", ck.version)));
    }
    if ck.config_digest != config_digest {
        return Err(checkpoint_error(path, "written under a different configuration"));
    }
    if ck.data_digest != data_digest || ck.cluster_id != cluster_id {
        return Err(checkpoint_error(path, "written for different training data"));
    }
    if ck.rng_digest != rng_digest(&ck.rng) {
        return Err(checkpoint_error(path, "RNG state does not match its digest"));
    }
    Ok(ck)
}

/// Digest of everything that determines a training run's output.
pub fn config_digest(cfg: &TrainConfig, task: &Task, gw: &Gateway) -> String {
    digest_parts([
        FORMAT_VERSION.to_string(),
        serde_json::to_string(cfg).expect("config serializes"),
        serde_json::to_string(&task.classes).expect("classes serialize"),
        task.initial_prompt.clone(),
        gw.model_id(Role::Score).to_string(),
        gw.model_id(Role::Optimize).to_string(),
        gw.embedding_model_id().to_string(),
    ])
}

/// Beam slot 0: the task's initial prompt as one principle per class.
pub fn initial_constitution(initial_prompt: &str, classes: &[ClassLabel]) -> Result<Constitution, DomainError> {
    let prompt = initial_prompt.trim();
    let mut c = Constitution::empty(prompt, classes);
    for cl in classes {
        c = c.with_principle(cl.id, format!("Choose {} if that is the right answer to: {prompt}", cl.name));
    }
    validate_constitution(c, classes)
}

/// Full-validation F1 per constitution, computed once each.
struct F1Memo<'a> {
    val: Vec<&'a Example>,
    golds: Vec<usize>,
    classes: &'a [ClassLabel],
    positive: usize,
    gw: &'a Gateway,
    seen: HashMap<Constitution, Ratio<u64>>,
}

impl<'a> F1Memo<'a> {
    fn new(val: &'a Dataset, positive: usize, gw: &'a Gateway) -> Result<Self, OptimizerError> {
        Ok(Self {
            val: val.examples.iter().collect(),
            golds: val.examples.iter().map(gold).collect::<Result<_, _>>()?,
            classes: &val.classes,
            positive,
            gw,
            seen: HashMap::new(),
        })
    }

    fn f1(&mut self, c: &Constitution) -> Result<Ratio<u64>, OptimizerError> {
        if let Some(f) = self.seen.get(c) {
            return Ok(*f);
        }
        let preds = classify_all(c, &self.val, self.classes, self.gw)?;
        let conf = metrics::confusion(&preds, &self.golds, self.classes.len()).expect("labels validated");
        let f = metrics::f1_exact(&conf, self.positive);
        self.seen.insert(c.clone(), f);
        Ok(f)
    }

    /// Highest F1; ties to fewer principles, then lower index.
    fn best(&mut self, members: &[BeamMember]) -> Result<(usize, Ratio<u64>), OptimizerError> {
        let mut best: Option<(usize, Ratio<u64>)> = None;
        for (i, m) in members.iter().enumerate() {
            let f = self.f1(&m.constitution)?;
            let better = match best {
                None => true,
                Some((b, bf)) => {
                    f > bf || (f == bf && m.constitution.num_principles() < members[b].constitution.num_principles())
                }
            };
            if better {
                best = Some((i, f));
            }
        }
        best.ok_or(OptimizerError::EmptyCandidates)
    }
}

fn initial_beam(
    train: &Dataset,
    cfg: &TrainConfig,
    gw: &Gateway,
    memo: &mut F1Memo<'_>,
) -> Result<BeamState, OptimizerError> {
    let classes = &train.classes;
    let c0 = initial_constitution(&train.initial_prompt, classes)?;
    let mut members = vec![BeamMember {
        constitution: c0.clone(),
        initial_slot: 0,
        lineage: Vec::new(),
    }];
    for variant in 1..cfg.beam {
        let prompt = prompts::render_paraphrase_prompt(&c0, variant, classes)?;
        let completion = gw.complete(&gw.request(Role::Optimize, prompt))?;
        match prompts::parse_paraphrase(&completion, &c0.task_description, classes) {
            Ok(c) if members.iter().all(|m| m.constitution != c) => members.push(BeamMember {
                constitution: c,
                initial_slot: variant,
                lineage: Vec::new(),
            }),
            Ok(_) => log::debug!("paraphrase {variant} duplicates an earlier slot"),
            Err(e) => log::warn!("paraphrase {variant} unusable: {e}"),
        }
    }
    let (_, best) = memo.best(&members)?;
    Ok(BeamState {
        iteration: 0,
        stats: vec![ArmStats::default(); members.len()],
        members,
        val_f1_trajectory: vec![metrics::to_f64(best)],
    })
}

/// Trains one expert by beam search.
///
/// Each iteration expands every beam member by sampled errors and proposed
/// mutations, then keeps `beam` survivors of parents and children by UCB
/// selection. The previous iteration's F1-best member always survives, so
/// the recorded best F1 never decreases. The returned constitution is the
/// final beam's F1-best.
pub fn train_expert(
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    gw: &Gateway,
    ctl: &TrainControl,
    cluster_id: usize,
) -> Result<TrainedExpert, OptimizerError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(OptimizerError::EmptyTraining);
    }
    if val.is_empty() {
        return Err(OptimizerError::EmptyValidation);
    }
    let classes = &train.classes;
    if cfg.positive_class >= classes.len() {
        return Err(OptimizerError::PositiveClass(cfg.positive_class));
    }
    let cfg_digest = config_digest(cfg, &train.task(), gw);
    let data_digest = digest_parts(train.ids().iter().chain(std::iter::once(&"|".to_string())).chain(val.ids().iter()));
    let path = ctl.checkpoint_dir.as_deref().map(|d| checkpoint_path(d, cluster_id));
    let mut memo = F1Memo::new(val, cfg.positive_class, gw)?;

    let resumed = match &path {
        Some(p) if ctl.resume && p.exists() => Some(read_checkpoint(p, &cfg_digest, &data_digest, cluster_id)?),
        _ => None,
    };
    if let Some(done) = resumed.as_ref().and_then(|ck| ck.finished.clone()) {
        log::info!("expert {cluster_id}: already trained, loaded from checkpoint");
        return Ok(done);
    }
    let save = |beam: &BeamState, rng: &RunRng, finished: Option<TrainedExpert>| -> Result<(), OptimizerError> {
        match &path {
            Some(p) => write_checkpoint(
                p,
                &Checkpoint {
                    version: CHECKPOINT_VERSION,
                    config_digest: cfg_digest.clone(),
                    data_digest: data_digest.clone(),
                    cluster_id,
                    beam: beam.clone(),
                    rng: rng.clone(),
                    rng_digest: rng_digest(rng),
                    finished,
                },
            ),
            None => Ok(()),
        }
    };
    let (mut beam, mut rng) = match resumed {
        Some(ck) => {
            log::info!("expert {cluster_id}: resuming after iteration {}", ck.beam.iteration);
            (ck.beam, ck.rng)
        }
        None => {
            let rng = rng::seeded(rng::derive_seed(cfg.seed, "expert", cluster_id as u64));
            let beam = initial_beam(train, cfg, gw, &mut memo)?;
            save(&beam, &rng, None)?;
            (beam, rng)
        }
    };

    while beam.iteration < cfg.iterations {
        let (incumbent, _) = memo.best(&beam.members)?;
        let mut pool = beam.members.clone();
        for parent in &beam.members {
            let errors = sample_errors(
                &parent.constitution,
                &train.examples,
                classes,
                cfg.n_errors,
                cfg.scan_budget,
                &mut rng,
                gw,
            )?;
            if errors.is_empty() {
                continue;
            }
            for cand in propose_candidates(&parent.constitution, &errors, cfg.m_mutations, classes, gw)? {
                if pool.iter().all(|m| m.constitution != cand.constitution) {
                    let mut lineage = parent.lineage.clone();
                    lineage.push(cand.op);
                    pool.push(BeamMember {
                        constitution: cand.constitution,
                        initial_slot: parent.initial_slot,
                        lineage,
                    });
                }
            }
        }
        let (survivors, stats) = if pool.len() <= cfg.beam {
            ((0..pool.len()).collect::<Vec<_>>(), vec![ArmStats::default(); pool.len()])
        } else {
            let arms: Vec<Constitution> = pool.iter().map(|m| m.constitution.clone()).collect();
            let sel = ucb_select(&arms, &val.examples, classes, &cfg.bandit, &mut rng, gw)?;
            let mut top = sel.top(cfg.beam).to_vec();
            if !top.contains(&incumbent) {
                *top.last_mut().expect("beam >= 1") = incumbent;
            }
            let stats = top.iter().map(|&i| sel.stats[i]).collect();
            (top, stats)
        };
        beam.members = survivors.iter().map(|&i| pool[i].clone()).collect();
        beam.stats = stats;
        beam.iteration += 1;
        let (_, best) = memo.best(&beam.members)?;
        beam.val_f1_trajectory.push(metrics::to_f64(best));
        log::info!(
            "expert {cluster_id}: iteration {}/{}: pool {}, best validation F1 {:.4}",
            beam.iteration,
            cfg.iterations,
            pool.len(),
            metrics::to_f64(best)
        );
        save(&beam, &rng, None)?;
    }

    let (best, _) = memo.best(&beam.members)?;
    let winner = &beam.members[best];
    let done = TrainedExpert {
        constitution: winner.constitution.clone(),
        provenance: Provenance {
            iterations_run: beam.iteration,
            val_f1_trajectory: beam.val_f1_trajectory.clone(),
            initial_slot: winner.initial_slot,
            lineage: winner.lineage.clone(),
            train_ids: train.ids(),
            val_size: val.len(),
            used_global_validation: false,
        },
    };
    save(&beam, &rng, Some(done.clone()))?;
    Ok(done)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleRun {
    pub ensemble: ExpertEnsemble,
    pub clusters: ClusterModel,
}

/// Clusters the training set, trains one expert per cluster and assembles
/// the ensemble. Validation examples go to the nearest centroid; a cluster
/// that receives none is validated on the whole validation set.
pub fn train_ensemble(
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    gw: &Gateway,
    ctl: &TrainControl,
) -> Result<EnsembleRun, OptimizerError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(OptimizerError::EmptyTraining);
    }
    if val.is_empty() {
        return Err(OptimizerError::EmptyValidation);
    }
    let m = clustering::embed_examples(&train.examples, gw)?;
    let model = clustering::select_k(&m, &cfg.k_candidates, cfg.seed)?;
    log::info!("clustering: k = {} (silhouette {:.4})", model.k, model.silhouette);
    let val_m = clustering::embed_examples(&val.examples, gw)?;
    let val_parts = data::partition_by_cluster(val, &model, &val_m.as_map())?;

    let mut experts = Vec::with_capacity(model.k);
    for (i, val_part) in val_parts.into_iter().enumerate() {
        let train_part = train.with_examples(
            train
                .examples
                .iter()
                .filter(|e| model.assignments.get(&e.id) == Some(&i))
                .cloned()
                .collect(),
        );
        let global = val_part.is_empty();
        if global {
            log::warn!("cluster {i} has no validation examples; using the full validation set");
        }
        let val_used = if global { val } else { &val_part };
        let mut trained = train_expert(&train_part, val_used, cfg, gw, ctl, i)?;
        trained.provenance.used_global_validation = global;
        experts.push(Expert {
            cluster_id: i,
            centroid: vector::normalized(&model.centroids[i])?,
            constitution: trained.constitution,
            provenance: trained.provenance,
        });
    }
    let ensemble = ExpertEnsemble {
        format_version: FORMAT_VERSION,
        embedding_model_id: gw.embedding_model_id().to_string(),
        classes: train.classes.clone(),
        experts,
        config_digest: config_digest(cfg, &train.task(), gw),
    };
    ensemble.validate()?;
    Ok(EnsembleRun {
        ensemble,
        clusters: model,
    })
}

/// A routed prediction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Routed {
    pub prediction: Prediction,
    pub expert_id: usize,
    pub similarity: f64,
}

fn check_embedding_model(ens: &ExpertEnsemble, gw: &Gateway) -> Result<(), OptimizerError> {
    if ens.embedding_model_id != gw.embedding_model_id() {
        return Err(OptimizerError::EmbeddingModel {
            ensemble: ens.embedding_model_id.clone(),
            gateway: gw.embedding_model_id().to_string(),
        });
    }
    Ok(())
}

/// Embeds `e`, routes it to the nearest expert and classifies it there.
pub fn predict(ens: &ExpertEnsemble, e: &Example, gw: &Gateway) -> Result<Routed, OptimizerError> {
    Ok(predict_all(ens, std::slice::from_ref(e), gw)?.remove(0))
}

/// [`predict`] for many examples with a single embedding call.
pub fn predict_all(ens: &ExpertEnsemble, examples: &[Example], gw: &Gateway) -> Result<Vec<Routed>, OptimizerError> {
    if examples.is_empty() {
        return Ok(Vec::new());
    }
    check_embedding_model(ens, gw)?;
    let texts: Vec<String> = examples.iter().map(Example::joined_text).collect();
    let vectors = gw.embed(&texts)?;
    let routes = vectors
        .iter()
        .map(|v| clustering::route_with_similarity(v, ens))
        .collect::<Result<Vec<_>, _>>()?;
    let slots: Vec<Option<(usize, f64)>> = routes.iter().copied().map(Some).collect();
    let preds = classify_routed(ens, examples, &slots, gw)?;
    Ok(routes
        .into_iter()
        .zip(preds)
        .map(|((expert_id, similarity), prediction)| Routed {
            prediction,
            expert_id,
            similarity,
        })
        .collect())
}

/// Like [`predict_all`], but a row whose embedding fails (or cannot be
/// routed) yields `Err(message)` instead of failing the batch. A failed batch
/// embedding call is retried one row at a time. Scoring errors still propagate.
pub fn predict_rows(
    ens: &ExpertEnsemble,
    examples: &[Example],
    gw: &Gateway,
) -> Result<Vec<Result<Routed, String>>, OptimizerError> {
    if examples.is_empty() {
        return Ok(Vec::new());
    }
    check_embedding_model(ens, gw)?;
    let texts: Vec<String> = examples.iter().map(Example::joined_text).collect();
    let vectors: Vec<Result<Vec<f64>, String>> = match gw.embed(&texts) {
        Ok(vs) => vs.into_iter().map(Ok).collect(),
        Err(err) => {
            log::warn!("batch embedding failed ({err}); embedding rows individually");
            texts
                .iter()
                .map(|t| {
                    gw.embed(std::slice::from_ref(t))
                        .map(|mut v| v.remove(0))
                        .map_err(|e| e.to_string())
                })
                .collect()
        }
    };
    let routes: Vec<Result<(usize, f64), String>> = vectors
        .into_iter()
        .map(|v| v.and_then(|v| clustering::route_with_similarity(&v, ens).map_err(|e| e.to_string())))
        .collect();
    let slots: Vec<Option<(usize, f64)>> = routes.iter().map(|r| r.as_ref().ok().copied()).collect();
    let preds = classify_routed(ens, examples, &slots, gw)?;
    Ok(routes
        .into_iter()
        .zip(preds)
        .map(|(route, prediction)| {
            route.map(|(expert_id, similarity)| Routed {
                prediction,
                expert_id,
                similarity,
            })
        })
        .collect())
}

/// Classifies each routed example with its expert; unrouted slots stay `Abstain`.
fn classify_routed(
    ens: &ExpertEnsemble,
    examples: &[Example],
    routes: &[Option<(usize, f64)>],
    gw: &Gateway,
) -> Result<Vec<Prediction>, OptimizerError> {
    let mut preds = vec![Prediction::Abstain; examples.len()];
    for (x, expert) in ens.experts.iter().enumerate() {
        let idx: Vec<usize> = (0..examples.len()).filter(|&i| routes[i].map(|r| r.0) == Some(x)).collect();
        let batch: Vec<&Example> = idx.iter().map(|&i| &examples[i]).collect();
        for (&i, p) in idx.iter().zip(classify_all(&expert.constitution, &batch, &ens.classes, gw)?) {
            preds[i] = p;
        }
    }
    Ok(preds)
}
