use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;
use tenet_core::clustering::{self, ClusterModel};
use tenet_core::data::{self, DataFormat, Dataset};
use tenet_core::domain::ExpertEnsemble;
use tenet_core::gateway::{Gateway, GatewayStats};
use tenet_core::metrics::{render_table, EvalReport, ResultRow};
use tenet_core::optimizer::{self, TrainControl};
use tenet_core::persist::{load_ensemble, save_ensemble};

use crate::config::{build_gateway, GatewayMode, Resolved};

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load_split(r: &Resolved, name: &str) -> Result<Dataset> {
    let path = r.split_path(name);
    if !path.exists() {
        bail!("{} not found; run `tenet split` first", path.display());
    }
    Ok(data::load_dataset(&path, DataFormat::Jsonl, &r.task())?)
}

fn log_usage(gw: &Gateway) {
    let s = gw.stats();
    log::info!(
        "gateway: {} completions ({} from cache), {} texts embedded ({} from cache)",
        GatewayStats::get(&s.completions),
        GatewayStats::get(&s.completion_cache_hits),
        GatewayStats::get(&s.embedded_texts),
        GatewayStats::get(&s.embedding_cache_hits),
    );
}

pub fn split(r: &Resolved) -> Result<()> {
    let task = r.task();
    let d = data::load_dataset(&r.dataset_path, r.dataset_format(), &task)?;
    d.validate()?;
    let s = data::split(&d, &r.split_spec())?;
    for (name, part) in [("train", &s.train), ("val", &s.val), ("test", &s.test)] {
        data::write_jsonl(&r.split_path(name), &part.examples, &task.classes)?;
    }
    println!(
        "split {}: train={} val={} test={} -> {}",
        d.name,
        s.train.len(),
        s.val.len(),
        s.test.len(),
        r.out_dir.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct CandidateSummary {
    k: usize,
    silhouette: f64,
    inertia: f64,
}

#[derive(Serialize)]
struct ClusterReport<'a> {
    chosen_k: usize,
    embedding_model_id: &'a str,
    candidates: Vec<CandidateSummary>,
    model: &'a ClusterModel,
}

pub fn cluster(r: &Resolved, mode: &GatewayMode) -> Result<()> {
    let train = load_split(r, "train")?;
    let gw = build_gateway(r, mode, Some(&r.out_dir.join("transcript-cluster.jsonl")))?;
    let m = clustering::embed_examples(&train.examples, &gw)?;
    let models = clustering::fit_candidates(&m, &r.cfg.train.k_candidates, r.seed)?;
    let scores: Vec<(usize, f64)> = models.iter().map(|c| (c.k, c.silhouette)).collect();
    let best = clustering::choose_by_silhouette(&scores).context("no candidate k")?;
    let report = ClusterReport {
        chosen_k: models[best].k,
        embedding_model_id: gw.embedding_model_id(),
        candidates: models
            .iter()
            .map(|c| CandidateSummary {
                k: c.k,
                silhouette: c.silhouette,
                inertia: c.inertia,
            })
            .collect(),
        model: &models[best],
    };
    write_json(&r.out_dir.join("clusters.json"), &report)?;
    println!("{:>3}  {:>10}  {:>10}", "k", "silhouette", "inertia");
    for (i, c) in models.iter().enumerate() {
        let mark = if i == best { "  <- chosen" } else { "" };
        println!("{:>3}  {:>10.4}  {:>10.4}{mark}", c.k, c.silhouette, c.inertia);
    }
    for c in 0..models[best].k {
        println!("cluster {c}: {} examples", models[best].members(c).len());
    }
    log_usage(&gw);
    Ok(())
}

pub fn train(r: &Resolved, mode: &GatewayMode, resume: bool) -> Result<()> {
    let train = load_split(r, "train")?;
    let val = load_split(r, "val")?;
    let mode = GatewayMode {
        append_transcript: resume,
        ..mode.clone()
    };
    let gw = build_gateway(r, &mode, Some(&r.out_dir.join("transcript-train.jsonl")))?;
    let ctl = TrainControl {
        checkpoint_dir: Some(r.out_dir.join("checkpoints")),
        resume,
    };
    let run = optimizer::train_ensemble(&train, &val, &r.cfg.train, &gw, &ctl)?;
    let path = r.out_dir.join("ensemble.json");
    save_ensemble(&path, &run.ensemble)?;
    println!("k = {} (silhouette {:.4})", run.clusters.k, run.clusters.silhouette);
    for e in &run.ensemble.experts {
        let traj: Vec<String> = e.provenance.val_f1_trajectory.iter().map(|f| format!("{f:.3}")).collect();
        println!(
            "expert {}: {} train examples, val F1 trajectory [{}]",
            e.cluster_id,
            e.provenance.train_ids.len(),
            traj.join(", ")
        );
    }
    let report = evaluate(&run.ensemble, &val, r.cfg.train.positive_class, &gw)?;
    println!("validation F1 = {:.4}", report.f1);
    println!("ensemble written to {}", path.display());
    log_usage(&gw);
    Ok(())
}

fn evaluate(ens: &ExpertEnsemble, d: &Dataset, positive: usize, gw: &Gateway) -> Result<EvalReport> {
    let golds = d
        .examples
        .iter()
        .map(|e| e.label.with_context(|| format!("example {} has no label", e.id)))
        .collect::<Result<Vec<_>>>()?;
    let routed = optimizer::predict_all(ens, &d.examples, gw)?;
    let preds: Vec<_> = routed.iter().map(|r| r.prediction).collect();
    Ok(EvalReport::new(&preds, &golds, &ens.classes, positive)?)
}

fn ensemble_path(r: &Resolved, given: Option<&Path>) -> PathBuf {
    given.map_or_else(|| r.out_dir.join("ensemble.json"), Path::to_path_buf)
}

fn check_classes(r: &Resolved, ens: &ExpertEnsemble) -> Result<()> {
    if r.task().classes != ens.classes {
        bail!("the ensemble's classes do not match dataset.classes in the config");
    }
    Ok(())
}

pub fn eval(r: &Resolved, mode: &GatewayMode, ensemble: Option<&Path>, data_path: Option<&Path>) -> Result<()> {
    let ens = load_ensemble(&ensemble_path(r, ensemble))?;
    check_classes(r, &ens)?;
    let test = match data_path {
        Some(p) => data::load_dataset(p, DataFormat::from_path(p), &r.task())?,
        None => load_split(r, "test")?,
    };
    let gw = build_gateway(r, mode, Some(&r.out_dir.join("transcript-eval.jsonl")))?;
    let report = evaluate(&ens, &test, r.cfg.train.positive_class, &gw)?;
    write_json(&r.out_dir.join("eval.json"), &report)?;
    print!("{}", report.render());
    println!();
    print!(
        "{}",
        render_table(&[ResultRow {
            method: format!("ensemble (k={})", ens.experts.len()),
            dataset: test.name.clone(),
            f1: report.f1,
        }])
    );
    log_usage(&gw);
    Ok(())
}

#[derive(Serialize)]
struct PredictionRow<'a> {
    id: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    label: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    expert_id: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    similarity: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

pub fn predict(
    r: &Resolved,
    mode: &GatewayMode,
    ensemble: Option<&Path>,
    input: &Path,
    output: Option<&Path>,
) -> Result<()> {
    let ens = load_ensemble(&ensemble_path(r, ensemble))?;
    let inputs = data::load_inputs(input, DataFormat::from_path(input), &ens.classes)?;
    if inputs.is_empty() {
        eprintln!("warning: {} has no rows", input.display());
    }
    let gw = build_gateway(r, mode, Some(&r.out_dir.join("transcript-predict.jsonl")))?;
    let rows = optimizer::predict_rows(&ens, &inputs, &gw)?;
    let fallback = &ens.classes[r.cfg.fallback_class].name;
    let (mut errors, mut abstained) = (0usize, 0usize);
    let mut text = String::new();
    for (e, row) in inputs.iter().zip(&rows) {
        let out = match row {
            Ok(routed) => {
                let label = match routed.prediction.label() {
                    Some(l) => &ens.classes[l].name,
                    None => {
                        abstained += 1;
                        fallback
                    }
                };
                PredictionRow {
                    id: &e.id,
                    label: Some(label),
                    expert_id: Some(routed.expert_id),
                    similarity: Some(routed.similarity),
                    error: None,
                }
            }
            Err(message) => {
                errors += 1;
                PredictionRow {
                    id: &e.id,
                    label: None,
                    expert_id: None,
                    similarity: None,
                    error: Some(message.clone()),
                }
            }
        };
        writeln!(text, "{}", serde_json::to_string(&out)?)?;
    }
    match output {
        Some(p) => {
            if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(parent)?;
            }
            fs::write(p, &text).with_context(|| format!("writing {}", p.display()))?;
        }
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    eprintln!(
        "predicted {} rows: {} errors, {} unparseable answers mapped to {fallback:?}",
        inputs.len(),
        errors,
        abstained
    );
    log_usage(&gw);
    Ok(())
}

/// One block per expert: header with validation F1, then principles by class.
pub fn render_ensemble(ens: &ExpertEnsemble) -> String {
    let mut out = String::new();
    if let Some(first) = ens.experts.first() {
        let _ = writeln!(out, "Task: {}", first.constitution.task_description);
    }
    let _ = writeln!(out, "Embedding model: {}", ens.embedding_model_id);
    for e in &ens.experts {
        out.push('\n');
        let f1 = e.provenance.val_f1_trajectory.last().copied().unwrap_or(0.0);
        let _ = writeln!(
            out,
            "[Cluster {}] ({f1:.2} F1, {} train examples)",
            e.cluster_id,
            e.provenance.train_ids.len()
        );
        for c in &ens.classes {
            let ps = e.constitution.principles_for(c.id);
            if ps.is_empty() {
                let _ = writeln!(out, "  {}: (no principles)", c.name);
            } else {
                let _ = writeln!(out, "  {}:", c.name);
                for p in ps {
                    let _ = writeln!(out, "    - {p}");
                }
            }
        }
    }
    out
}

pub fn inspect(path: &Path) -> Result<()> {
    let ens = load_ensemble(path)?;
    print!("{}", render_ensemble(&ens));
    Ok(())
}
