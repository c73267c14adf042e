//! Run configuration: one TOML file, with command-line overrides.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use tenet_core::data::{DataFormat, SplitSpec, Task};
use tenet_core::domain::{class_list, TrainConfig};
use tenet_core::gateway::cache::{EmbeddingCache, ResponseCache};
use tenet_core::gateway::http::{HttpBackend, ProviderAdapter};
use tenet_core::gateway::mock::{MockOracle, MockSpec};
use tenet_core::gateway::transcript::{Clock, ReplayBackend, Transcript};
use tenet_core::gateway::{Backend, Gateway, RateLimit, RetryPolicy, Role, RoleBinding};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    #[serde(default)]
    pub name: Option<String>,
    pub path: PathBuf,
    /// Inferred from the file extension when absent.
    #[serde(default)]
    pub format: Option<DataFormat>,
    pub classes: Vec<String>,
    pub initial_prompt: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
    /// Honour a `split` column when every record has one.
    pub canonical: bool,
}

impl Default for SplitConfig {
    fn default() -> Self {
        let s = SplitSpec::default();
        Self {
            train_fraction: s.train_fraction,
            val_fraction: s.val_fraction,
            test_fraction: s.test_fraction,
            canonical: s.canonical,
        }
    }
}

/// A provider adapter plus the model it serves for one role.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoleConfig {
    pub model: String,
    #[serde(flatten)]
    pub adapter: ProviderAdapter,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Providers {
    pub score: RoleConfig,
    pub optimize: RoleConfig,
    pub embed: RoleConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Required here or via `--seed`.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
    /// Label emitted by `predict` when the scorer's answer cannot be parsed.
    #[serde(default)]
    pub fallback_class: usize,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub rate_limit: RateLimit,
    /// Oracle rules used with `--mock`.
    #[serde(default)]
    pub mock: Option<MockSpec>,
    #[serde(default)]
    pub providers: Option<Providers>,
}

#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub cache_dir: Option<PathBuf>,
}

/// A loaded configuration with overrides applied and paths made absolute
/// (relative paths in the file are relative to the file).
#[derive(Debug, Clone)]
pub struct Resolved {
    pub cfg: RunConfig,
    pub seed: u64,
    pub dataset_path: PathBuf,
    pub out_dir: PathBuf,
    pub cache_dir: PathBuf,
}

fn relative_to(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl Resolved {
    pub fn load(path: &Path, o: &Overrides) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: RunConfig = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let Some(seed) = o.seed.or(cfg.seed) else {
            bail!("{}: no seed given; set `seed` or pass --seed", path.display());
        };
        cfg.seed = Some(seed);
        cfg.train.seed = seed;
        cfg.train.validate().context("invalid [train] section")?;
        let classes = class_list(&cfg.dataset.classes).context("invalid dataset.classes")?;
        if cfg.fallback_class >= classes.len() {
            bail!("fallback_class {} is outside the class list", cfg.fallback_class);
        }
        if cfg.train.positive_class >= classes.len() {
            bail!("train.positive_class {} is outside the class list", cfg.train.positive_class);
        }
        let out_dir = o
            .out_dir
            .clone()
            .unwrap_or_else(|| relative_to(base, cfg.out_dir.as_deref().unwrap_or(Path::new("out"))));
        let cache_dir = o.cache_dir.clone().unwrap_or_else(|| match &cfg.cache_dir {
            Some(c) => relative_to(base, c),
            None => out_dir.join("cache"),
        });
        Ok(Self {
            dataset_path: relative_to(base, &cfg.dataset.path),
            cfg,
            seed,
            out_dir,
            cache_dir,
        })
    }

    pub fn task(&self) -> Task {
        Task {
            name: self.cfg.dataset.name.clone().unwrap_or_else(|| {
                self.dataset_path
                    .file_stem()
                    .map_or_else(|| "dataset".into(), |s| s.to_string_lossy().into_owned())
            }),
            classes: class_list(&self.cfg.dataset.classes).expect("validated on load"),
            initial_prompt: self.cfg.dataset.initial_prompt.clone(),
        }
    }

    pub fn dataset_format(&self) -> DataFormat {
        self.cfg
            .dataset
            .format
            .unwrap_or_else(|| DataFormat::from_path(&self.dataset_path))
    }

    pub fn split_spec(&self) -> SplitSpec {
        SplitSpec {
            train_fraction: self.cfg.split.train_fraction,
            val_fraction: self.cfg.split.val_fraction,
            test_fraction: self.cfg.split.test_fraction,
            seed: self.seed,
            canonical: self.cfg.split.canonical,
        }
    }

    pub fn split_path(&self, name: &str) -> PathBuf {
        self.out_dir.join(format!("{name}.jsonl"))
    }
}

/// How the gateway reaches its models.
#[derive(Debug, Clone, Default)]
pub struct GatewayMode {
    pub mock: bool,
    pub replay: Option<PathBuf>,
    /// Append to an existing transcript instead of replacing it.
    pub append_transcript: bool,
}

pub fn build_gateway(r: &Resolved, mode: &GatewayMode, transcript: Option<&Path>) -> Result<Gateway> {
    let mut bindings: Vec<RoleBinding> = Vec::new();
    let mut rate_limit = r.cfg.rate_limit.clone();
    if mode.mock {
        let spec = r
            .cfg
            .mock
            .clone()
            .context("--mock needs a [mock] section with the oracle's keyword rules")?;
        let backend: Arc<dyn Backend> = Arc::new(MockOracle::new(spec));
        for role in [Role::Score, Role::Optimize, Role::Embed] {
            bindings.push(RoleBinding::new(backend.clone(), format!("mock-{}", role.as_str())).with_retry(RetryPolicy::no_wait(1)));
        }
        rate_limit.max_in_flight = 1;
    } else {
        let providers = r
            .cfg
            .providers
            .as_ref()
            .context("no [providers] configured; add them or pass --mock")?;
        for rc in [&providers.score, &providers.optimize, &providers.embed] {
            let retry = rc.adapter.retry.clone();
            let backend: Arc<dyn Backend> = Arc::new(HttpBackend::new(rc.adapter.clone())?);
            bindings.push(RoleBinding::new(backend, rc.model.clone()).with_retry(retry));
        }
    }
    let mut builder;
    if let Some(path) = &mode.replay {
        let replay: Arc<dyn Backend> =
            Arc::new(ReplayBackend::open(path).with_context(|| format!("loading transcript {}", path.display()))?);
        for b in &mut bindings {
            b.backend = replay.clone();
            b.retry = RetryPolicy::no_wait(1);
        }
        let mut it = bindings.into_iter();
        builder = Gateway::builder(it.next().expect("score"), it.next().expect("optimize"), it.next().expect("embed"));
    } else {
        let mut it = bindings.into_iter();
        builder = Gateway::builder(it.next().expect("score"), it.next().expect("optimize"), it.next().expect("embed"))
            .response_cache(ResponseCache::open(&r.cache_dir.join("responses.jsonl"))?)
            .embedding_cache(EmbeddingCache::open(&r.cache_dir.join("embeddings.jsonl"))?);
    }
    builder = builder.rate_limit(rate_limit);
    if let Some(path) = transcript {
        let clock = if mode.mock { Clock::Logical } else { Clock::System };
        let t = if mode.append_transcript {
            Transcript::append(path, clock)?
        } else {
            Transcript::create(path, clock)?
        };
        builder = builder.transcript(t);
    }
    Ok(builder.build())
}
