use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::model::{InteractionRecord, Payload, SupportKind, TaskDataset};
use crate::policy::{EngineParams, Objective, PolicyError, PolicyKind, PolicySnapshot, ThreadSession};
use crate::rng::{self, Stream};
use crate::synth::permutation;

use super::ServiceError;

/// Body of `POST /sessions`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CreateSession {
    pub dataset_id: String,
    pub policy_kind: String,
    /// Trade-off weight; loss only when absent.
    pub lambda: Option<f64>,
    pub alpha: f64,
    pub k: usize,
    pub warmup: usize,
    pub gamma: f64,
    #[serde(rename = "T", alias = "horizon")]
    pub horizon: usize,
    /// Drawn at random when absent.
    pub seed: Option<u64>,
    /// Opaque value stored with the session.
    pub metadata: Option<serde_json::Value>,
}

impl Default for CreateSession {
    fn default() -> Self {
        let p = EngineParams::default();
        Self {
            dataset_id: String::new(),
            policy_kind: "thread-knn".into(),
            lambda: None,
            alpha: p.alpha,
            k: p.k,
            warmup: p.warmup,
            gamma: p.gamma,
            horizon: 100,
            seed: None,
            metadata: None,
        }
    }
}

/// What is persisted in `session.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionHeader {
    pub session_id: String,
    pub dataset_id: String,
    pub policy_kind: String,
    pub lambda: Option<f64>,
    pub params: EngineParams,
    #[serde(rename = "T")]
    pub horizon: usize,
    pub seed: u64,
    pub created_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metadata: Option<serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Created {
    pub session_id: String,
    #[serde(rename = "T")]
    pub horizon: usize,
    pub seed: u64,
}

/// A trial as shown to the decision-maker. Context vectors and true labels
/// are never included.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub session_id: String,
    pub t: usize,
    #[serde(rename = "T")]
    pub horizon: usize,
    pub item_id: String,
    pub stimulus: Option<String>,
    pub label_names: Vec<String>,
    pub action_id: String,
    pub support_kind: SupportKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub support: Option<Payload>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub min_display_ms: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Answered {
    pub t: usize,
    pub loss: u8,
    pub correct: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub support_was_correct: Option<bool>,
    /// Index of the next trial, absent once the session is complete.
    pub t_next: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSnapshot {
    pub session_id: String,
    pub t: usize,
    #[serde(rename = "T")]
    pub horizon: usize,
    pub policy: PolicySnapshot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub dataset_id: String,
    pub name: String,
    pub items: usize,
    pub label_names: Vec<String>,
    pub actions: Vec<crate::model::SupportAction>,
    pub min_display_ms: Option<u64>,
}

struct LiveSession {
    header: SessionHeader,
    dataset: Arc<TaskDataset>,
    engine: ThreadSession,
    order: Vec<usize>,
    pending: Option<Trial>,
    log_path: PathBuf,
}

/// Sessions and datasets under one data directory.
///
/// Layout: `datasets/<id>.json`, `sessions/<id>/session.json` and
/// `sessions/<id>/records.jsonl` (one record per accepted answer).
pub struct SessionStore {
    root: PathBuf,
    datasets: BTreeMap<String, Arc<TaskDataset>>,
    sessions: Mutex<HashMap<String, Arc<Mutex<LiveSession>>>>,
}

fn storage(path: &Path) -> impl FnOnce(std::io::Error) -> ServiceError + '_ {
    move |e| ServiceError::Storage(format!("{}: {e}", path.display()))
}

fn build_engine(header: &SessionHeader, dataset: &Arc<TaskDataset>) -> Result<ThreadSession, ServiceError> {
    let kind = match header.policy_kind.as_str() {
        "population" | "oracle" => {
            return Err(ServiceError::InvalidParams(format!("{} is not available for live sessions", header.policy_kind)))
        }
        other => PolicyKind::parse(other).map_err(|e| ServiceError::InvalidParams(e.to_string()))?,
    };
    let objective = match header.lambda {
        None => Objective::LossOnly,
        Some(l) => Objective::scalarized(l).map_err(|e| ServiceError::InvalidParams(e.to_string()))?,
    };
    ThreadSession::new(dataset.clone(), kind, objective, header.params, header.horizon, header.seed)
        .map_err(|e| ServiceError::InvalidParams(e.to_string()))
}

fn item_order(dataset: &TaskDataset, header: &SessionHeader) -> Vec<usize> {
    let mut rng = rng::stream(header.seed, Stream::Shuffle);
    let mut order = permutation(dataset.items.len(), &mut rng);
    order.truncate(header.horizon);
    order
}

impl LiveSession {
    fn trial(&mut self) -> Result<Trial, ServiceError> {
        if let Some(p) = &self.pending {
            return Ok(p.clone());
        }
        if self.engine.is_exhausted() {
            return Err(ServiceError::SessionExhausted);
        }
        let t = self.engine.t();
        let item = &self.dataset.items[self.order[t - 1]];
        let index = self.engine.select_index(item.context.as_slice(), None).map_err(policy_error)?;
        let action = &self.dataset.actions[index];
        let support = match action.kind {
            SupportKind::NoSupport => None,
            _ => item.payloads.get(&action.action_id).cloned(),
        };
        let trial = Trial {
            session_id: self.header.session_id.clone(),
            t,
            horizon: self.header.horizon,
            item_id: item.item_id.clone(),
            stimulus: item.stimulus.clone(),
            label_names: self.dataset.label_names.clone(),
            action_id: action.action_id.clone(),
            support_kind: action.kind,
            support,
            min_display_ms: self.dataset.min_display_ms,
        };
        self.pending = Some(trial.clone());
        Ok(trial)
    }

    fn answer(&mut self, item_id: &str, human_label: usize) -> Result<Answered, ServiceError> {
        let pending = self.pending.clone().ok_or(ServiceError::NoPendingTrial)?;
        if pending.item_id != item_id {
            return Err(ServiceError::ItemMismatch { expected: pending.item_id, got: item_id.to_owned() });
        }
        if human_label >= self.dataset.label_count {
            return Err(ServiceError::LabelOutOfRange { label: human_label, label_count: self.dataset.label_count });
        }
        let item = &self.dataset.items[self.order[pending.t - 1]];
        let before = self.engine.clone();
        let record = self.engine.record_outcome(item, &pending.action_id, human_label).map_err(policy_error)?.clone();
        if let Err(e) = append_record(&self.log_path, &record) {
            self.engine = before;
            return Err(e);
        }
        self.pending = None;
        Ok(Answered {
            t: record.t,
            loss: record.loss,
            correct: record.loss == 0,
            support_was_correct: record.support_was_correct,
            t_next: (!self.engine.is_exhausted()).then(|| self.engine.t()),
        })
    }

    fn replay(&mut self, records: &[InteractionRecord]) -> Result<(), ServiceError> {
        for logged in records {
            let trial = self.trial()?;
            if trial.item_id != logged.item_id || trial.action_id != logged.action_id || trial.t != logged.t {
                return Err(ServiceError::Corrupt(format!(
                    "session {}: trial {} replays as ({}, {}) but the log has ({}, {})",
                    self.header.session_id, logged.t, trial.item_id, trial.action_id, logged.item_id, logged.action_id
                )));
            }
            let item = &self.dataset.items[self.order[trial.t - 1]];
            let record = self.engine.record_outcome(item, &trial.action_id, logged.human_label).map_err(policy_error)?.clone();
            if &record != logged {
                return Err(ServiceError::Corrupt(format!("session {}: record {} differs on replay", self.header.session_id, logged.t)));
            }
            self.pending = None;
        }
        Ok(())
    }
}

fn policy_error(e: PolicyError) -> ServiceError {
    match e {
        PolicyError::SessionExhausted { .. } => ServiceError::SessionExhausted,
        other => ServiceError::InvalidParams(other.to_string()),
    }
}

fn append_record(path: &Path, record: &InteractionRecord) -> Result<(), ServiceError> {
    let mut line = serde_json::to_vec(record).expect("records serialize");
    line.push(b'\n');
    let mut f = OpenOptions::new().append(true).create(true).open(path).map_err(storage(path))?;
    f.write_all(&line).map_err(storage(path))?;
    f.sync_data().map_err(storage(path))
}

fn write_synced(path: &Path, bytes: &[u8]) -> Result<(), ServiceError> {
    let mut f = File::create(path).map_err(storage(path))?;
    f.write_all(bytes).map_err(storage(path))?;
    f.sync_all().map_err(storage(path))
}

fn read_records(path: &Path) -> Result<Vec<InteractionRecord>, ServiceError> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let f = File::open(path).map_err(storage(path))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(storage(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line)
            .map_err(|e| ServiceError::Corrupt(format!("{} line {}: {e}", path.display(), n + 1)))?;
        out.push(record);
    }
    Ok(out)
}

fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

impl SessionStore {
    /// Loads every dataset and replays every persisted session.
    pub fn open(root: &Path) -> Result<Self, ServiceError> {
        let data_dir = root.join("datasets");
        let session_dir = root.join("sessions");
        fs::create_dir_all(&data_dir).map_err(storage(&data_dir))?;
        fs::create_dir_all(&session_dir).map_err(storage(&session_dir))?;

        let mut datasets = BTreeMap::new();
        let mut entries: Vec<PathBuf> = fs::read_dir(&data_dir)
            .map_err(storage(&data_dir))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        entries.sort();
        for path in entries {
            let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_owned();
            let raw = fs::read_to_string(&path).map_err(storage(&path))?;
            let ds = TaskDataset::from_json(&raw).map_err(|e| ServiceError::Corrupt(format!("{}: {e}", path.display())))?;
            datasets.insert(id, Arc::new(ds));
        }

        let store = Self { root: root.to_path_buf(), datasets, sessions: Mutex::new(HashMap::new()) };
        let mut dirs: Vec<PathBuf> = fs::read_dir(&session_dir)
            .map_err(storage(&session_dir))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join("session.json").is_file())
            .collect();
        dirs.sort();
        for dir in dirs {
            let header_path = dir.join("session.json");
            let raw = fs::read_to_string(&header_path).map_err(storage(&header_path))?;
            let header: SessionHeader =
                serde_json::from_str(&raw).map_err(|e| ServiceError::Corrupt(format!("{}: {e}", header_path.display())))?;
            let records = read_records(&dir.join("records.jsonl"))?;
            let mut live = store.instantiate(header)?;
            live.replay(&records)?;
            store.insert(live);
        }
        Ok(store)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn datasets(&self) -> Vec<DatasetInfo> {
        self.datasets
            .iter()
            .map(|(id, ds)| DatasetInfo {
                dataset_id: id.clone(),
                name: ds.name.clone(),
                items: ds.items.len(),
                label_names: ds.label_names.clone(),
                actions: ds.actions.clone(),
                min_display_ms: ds.min_display_ms,
            })
            .collect()
    }

    fn instantiate(&self, header: SessionHeader) -> Result<LiveSession, ServiceError> {
        let dataset = self
            .datasets
            .get(&header.dataset_id)
            .cloned()
            .ok_or_else(|| ServiceError::UnknownDataset(header.dataset_id.clone()))?;
        if header.horizon == 0 || header.horizon > dataset.items.len() {
            return Err(ServiceError::InvalidParams(format!(
                "T must lie in [1, {}] for dataset {}",
                dataset.items.len(),
                header.dataset_id
            )));
        }
        let engine = build_engine(&header, &dataset)?;
        let order = item_order(&dataset, &header);
        let log_path = self.root.join("sessions").join(&header.session_id).join("records.jsonl");
        Ok(LiveSession { header, dataset, engine, order, pending: None, log_path })
    }

    fn insert(&self, live: LiveSession) {
        let id = live.header.session_id.clone();
        self.sessions.lock().expect("session map lock").insert(id, Arc::new(Mutex::new(live)));
    }

    fn get(&self, id: &str) -> Result<Arc<Mutex<LiveSession>>, ServiceError> {
        self.sessions
            .lock()
            .expect("session map lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::SessionNotFound(id.to_owned()))
    }

    pub fn create(&self, req: CreateSession) -> Result<Created, ServiceError> {
        let id = uuid::Uuid::new_v4().simple().to_string();
        let seed = req.seed.unwrap_or_else(|| uuid::Uuid::new_v4().as_u64_pair().0);
        let header = SessionHeader {
            session_id: id.clone(),
            dataset_id: req.dataset_id,
            policy_kind: req.policy_kind,
            lambda: req.lambda,
            params: EngineParams { alpha: req.alpha, k: req.k, warmup: req.warmup, gamma: req.gamma },
            horizon: req.horizon,
            seed,
            created_ms: now_ms(),
            metadata: req.metadata,
        };
        let live = self.instantiate(header.clone())?;
        let dir = self.root.join("sessions").join(&id);
        fs::create_dir_all(&dir).map_err(storage(&dir))?;
        write_synced(&dir.join("records.jsonl"), b"")?;
        let body = serde_json::to_vec_pretty(&header).expect("header serializes");
        write_synced(&dir.join("session.json"), &body)?;
        self.insert(live);
        Ok(Created { session_id: id, horizon: header.horizon, seed })
    }

    pub fn next_trial(&self, id: &str) -> Result<Trial, ServiceError> {
        let session = self.get(id)?;
        let mut live = session.lock().expect("session lock");
        live.trial()
    }

    pub fn submit_answer(&self, id: &str, item_id: &str, human_label: usize) -> Result<Answered, ServiceError> {
        let session = self.get(id)?;
        let mut live = session.lock().expect("session lock");
        live.answer(item_id, human_label)
    }

    pub fn snapshot(&self, id: &str) -> Result<SessionSnapshot, ServiceError> {
        let session = self.get(id)?;
        let live = session.lock().expect("session lock");
        Ok(SessionSnapshot {
            session_id: id.to_owned(),
            t: live.engine.log().len(),
            horizon: live.header.horizon,
            policy: live.engine.freeze(),
        })
    }

    /// The session's records, one JSON object per line.
    pub fn log_jsonl(&self, id: &str) -> Result<String, ServiceError> {
        let session = self.get(id)?;
        let live = session.lock().expect("session lock");
        let mut out = String::new();
        for r in live.engine.log() {
            out.push_str(&serde_json::to_string(r).expect("records serialize"));
            out.push('\n');
        }
        Ok(out)
    }

    pub fn header(&self, id: &str) -> Result<SessionHeader, ServiceError> {
        let session = self.get(id)?;
        let live = session.lock().expect("session lock");
        Ok(live.header.clone())
    }
}
