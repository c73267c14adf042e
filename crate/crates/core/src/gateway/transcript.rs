//! JSONL journal of every gateway response, and a backend that replays one.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::{Backend, GatewayError, LlmRequest, Role};

/// Source of the `timestamp` field. `Logical` numbers records 1, 2, 3, ...
/// so that transcripts of deterministic runs are byte-identical.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Clock {
    System,
    Logical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptRecord {
    pub request_digest: String,
    pub role: Role,
    pub model_id: String,
    pub prompt: String,
    pub response: String,
    pub cached: bool,
    pub timestamp: u64,
}

pub struct Transcript {
    out: Mutex<BufWriter<File>>,
    clock: Clock,
    seq: AtomicU64,
}

impl Transcript {
    pub fn create(path: &Path, clock: Clock) -> Result<Self, GatewayError> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| GatewayError::Io(e.to_string()))?;
        }
        let f = File::create(path).map_err(|e| GatewayError::Io(format!("{}: {e}", path.display())))?;
        Ok(Self {
            out: Mutex::new(BufWriter::new(f)),
            clock,
            seq: AtomicU64::new(0),
        })
    }

    /// Continues an existing transcript; the logical clock carries on from
    /// its last record.
    pub fn append(path: &Path, clock: Clock) -> Result<Self, GatewayError> {
        let seen = if path.exists() { read_transcript(path)?.len() as u64 } else { 0 };
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| GatewayError::Io(e.to_string()))?;
        }
        let f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| GatewayError::Io(format!("{}: {e}", path.display())))?;
        Ok(Self {
            out: Mutex::new(BufWriter::new(f)),
            clock,
            seq: AtomicU64::new(seen),
        })
    }

    pub fn record(&self, req: &LlmRequest, response: &str, cached: bool) -> Result<(), GatewayError> {
        let n = self.seq.fetch_add(1, Ordering::SeqCst) + 1;
        let timestamp = match self.clock {
            Clock::Logical => n,
            Clock::System => SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_millis() as u64)
                .unwrap_or_default(),
        };
        let rec = TranscriptRecord {
            request_digest: req.digest(),
            role: req.role,
            model_id: req.model_id.clone(),
            prompt: req.prompt.clone(),
            response: response.to_string(),
            cached,
            timestamp,
        };
        let line = serde_json::to_string(&rec).map_err(|e| GatewayError::Io(e.to_string()))?;
        let mut out = self.out.lock().expect("transcript lock");
        writeln!(out, "{line}")
            .and_then(|_| out.flush())
            .map_err(|e| GatewayError::Io(e.to_string()))
    }
}

pub fn read_transcript(path: &Path) -> Result<Vec<TranscriptRecord>, GatewayError> {
    let f = File::open(path).map_err(|e| GatewayError::Io(format!("{}: {e}", path.display())))?;
    BufReader::new(f)
        .lines()
        .filter(|l| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
        .map(|l| {
            let l = l.map_err(|e| GatewayError::Io(e.to_string()))?;
            serde_json::from_str(&l).map_err(|e| GatewayError::Malformed(e.to_string()))
        })
        .collect()
}

/// Serves responses recorded in a transcript; unseen requests fail with
/// [`GatewayError::NotRecorded`].
pub struct ReplayBackend {
    completions: HashMap<String, String>,
    embeddings: HashMap<(String, String), Vec<f64>>,
}

impl ReplayBackend {
    pub fn from_records(records: &[TranscriptRecord]) -> Result<Self, GatewayError> {
        let mut completions = HashMap::new();
        let mut embeddings = HashMap::new();
        for r in records {
            if r.role == Role::Embed {
                let v: Vec<f64> =
                    serde_json::from_str(&r.response).map_err(|e| GatewayError::Malformed(e.to_string()))?;
                embeddings.insert((r.model_id.clone(), r.prompt.clone()), v);
            } else {
                completions.entry(r.request_digest.clone()).or_insert_with(|| r.response.clone());
            }
        }
        Ok(Self {
            completions,
            embeddings,
        })
    }

    pub fn open(path: &Path) -> Result<Self, GatewayError> {
        Self::from_records(&read_transcript(path)?)
    }
}

impl Backend for ReplayBackend {
    fn name(&self) -> &str {
        "replay"
    }

    fn complete(&self, req: &LlmRequest) -> Result<String, GatewayError> {
        let d = req.digest();
        self.completions.get(&d).cloned().ok_or(GatewayError::NotRecorded(d))
    }

    fn embed(&self, model_id: &str, texts: &[String]) -> Result<Vec<Vec<f64>>, GatewayError> {
        texts
            .iter()
            .map(|t| {
                self.embeddings
                    .get(&(model_id.to_string(), t.clone()))
                    .cloned()
                    .ok_or_else(|| GatewayError::NotRecorded(format!("embedding of {t:?}")))
            })
            .collect()
    }
}
