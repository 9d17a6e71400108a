//! Survey service: sessions, timed-response and elicitation ingestion,
//! on-demand inference and index reports over an append-only event log.
//!
//! Every mutation is appended (and fsynced) to `events.jsonl` before it is
//! applied to memory and acknowledged. Inference outcomes are events too, so
//! a restart replays the log into the same beliefs, network and reports.
//! Snapshot files under `snapshots/` are a convenience copy of the latest
//! outputs; the log stays the source of truth.

pub mod events;
pub mod http;
pub mod state;

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Arc, Mutex, RwLock, TryLockError};

use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::AppConfig;
use crate::hierarchy::{HierarchyConfig, IndexReport, IndicatorVector};
use crate::inference::{self, BeliefState, LikertElicitation};
use crate::phenotyping::{self, TimedLikertResponse};
use crate::pipeline::{self, PipelineError};

use events::{Event, EventRecord, EventStore, HistoryRow, StoreError};
use state::ServiceState;

pub const EVENTS_FILE: &str = "events.jsonl";
pub const SNAPSHOT_DIR: &str = "snapshots";
pub const DEFAULT_QUESTIONNAIRE_ID: &str = "micg-default";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Mother,
    Child,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SessionStatus {
    Open,
    Submitted,
    Expired,
}

impl fmt::Display for SessionStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SessionStatus::Open => "open",
            SessionStatus::Submitted => "submitted",
            SessionStatus::Expired => "expired",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: String,
    pub respondent_id: String,
    pub role: Role,
    pub questionnaire_id: String,
    pub started_at: DateTime<Utc>,
    pub status: SessionStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionItem {
    pub indicator_id: String,
    pub prompt: String,
    pub scale_labels: [String; 5],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Questionnaire {
    pub id: String,
    pub title: String,
    pub items: Vec<QuestionItem>,
}

impl Questionnaire {
    /// One importance question per indicator of the hierarchy.
    pub fn from_hierarchy(id: &str, hierarchy: &HierarchyConfig) -> Self {
        let labels = ["Not important", "Slightly important", "Moderately important", "Important", "Very important"].map(String::from);
        Questionnaire {
            id: id.to_string(),
            title: "Child growth indicators".into(),
            items: hierarchy
                .indicators
                .iter()
                .map(|i| QuestionItem {
                    indicator_id: i.id.clone(),
                    prompt: format!("How important is \"{}\" for the child's growth?", i.label),
                    scale_labels: labels.clone(),
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    PosteriorUpdate,
    TrainFitness,
    ComputeIndex,
}

impl Stage {
    fn slot(self) -> usize {
        self as usize
    }
}

impl FromStr for Stage {
    type Err = ServiceError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "posterior-update" => Ok(Stage::PosteriorUpdate),
            "train-fitness" => Ok(Stage::TrainFitness),
            "compute-index" => Ok(Stage::ComputeIndex),
            other => Err(ServiceError::NotFound(format!("inference stage {other}"))),
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::PosteriorUpdate => "posterior-update",
            Stage::TrainFitness => "train-fitness",
            Stage::ComputeIndex => "compute-index",
        })
    }
}

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("{0} not found")]
    NotFound(String),
    #[error("{0}")]
    Invalid(String),
    #[error("duplicate: {0}")]
    Duplicate(String),
    #[error("session {session_id} is {status}")]
    SessionState { session_id: String, status: SessionStatus },
    #[error("missing upstream data: {0}")]
    Precondition(String),
    #[error("a {0} job is already running")]
    JobRunning(Stage),
    #[error("unauthorized")]
    Unauthorized,
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("I/O: {0}")]
    Io(#[from] std::io::Error),
}

impl ServiceError {
    pub fn code(&self) -> &'static str {
        match self {
            ServiceError::NotFound(_) => "not_found",
            ServiceError::Invalid(_) => "invalid",
            ServiceError::Duplicate(_) => "duplicate",
            ServiceError::SessionState { .. } => "session_state",
            ServiceError::Precondition(_) => "precondition",
            ServiceError::JobRunning(_) => "job_running",
            ServiceError::Unauthorized => "unauthorized",
            ServiceError::Store(_) | ServiceError::Io(_) => "storage",
            ServiceError::Pipeline(_) => "pipeline",
        }
    }
}

pub type Result<T> = std::result::Result<T, ServiceError>;

pub type Clock = Arc<dyn Fn() -> DateTime<Utc> + Send + Sync>;

pub fn system_clock() -> Clock {
    Arc::new(Utc::now)
}

/// Body of `POST /sessions/{id}/responses`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseSubmission {
    pub indicator_id: String,
    pub rating: u8,
    pub response_time_ms: u64,
    #[serde(default)]
    pub captured_at: Option<DateTime<Utc>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ack {
    pub sequence: u64,
    pub session_id: String,
    pub indicator_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobResult {
    pub stage: Stage,
    pub sequence: u64,
    pub summary: serde_json::Value,
}

pub struct Service {
    app: AppConfig,
    hierarchy: HierarchyConfig,
    questionnaires: BTreeMap<String, Questionnaire>,
    data_dir: PathBuf,
    store: EventStore,
    state: RwLock<ServiceState>,
    /// Serializes check-then-append for mutations.
    write_gate: Mutex<()>,
    jobs: [Mutex<()>; 3],
    clock: Clock,
}

impl Service {
    /// Opens the data directory from the config and replays its event log.
    pub fn open(app: AppConfig, clock: Clock) -> std::result::Result<Self, Box<dyn std::error::Error + Send + Sync>> {
        let hierarchy = app.load_hierarchy()?;
        let mut questionnaires = BTreeMap::new();
        questionnaires.insert(DEFAULT_QUESTIONNAIRE_ID.to_string(), Questionnaire::from_hierarchy(DEFAULT_QUESTIONNAIRE_ID, &hierarchy));
        for p in &app.server.questionnaires {
            let q: Questionnaire = serde_json::from_str(&std::fs::read_to_string(p)?)?;
            questionnaires.insert(q.id.clone(), q);
        }
        let data_dir = app.server.data_dir.clone();
        std::fs::create_dir_all(&data_dir)?;
        let (store, records) = EventStore::open(&data_dir.join(EVENTS_FILE))?;
        let state = ServiceState::replay(&records);
        log::info!("replayed {} events from {}", records.len(), store.path().display());
        Ok(Service {
            app,
            hierarchy,
            questionnaires,
            data_dir,
            store,
            state: RwLock::new(state),
            write_gate: Mutex::new(()),
            jobs: [Mutex::new(()), Mutex::new(()), Mutex::new(())],
            clock,
        })
    }

    pub fn hierarchy(&self) -> &HierarchyConfig {
        &self.hierarchy
    }

    pub fn config(&self) -> &AppConfig {
        &self.app
    }

    pub fn data_dir(&self) -> &Path {
        &self.data_dir
    }

    /// A copy of the current projection.
    pub fn snapshot(&self) -> ServiceState {
        self.state.read().expect("state poisoned").clone()
    }

    fn commit(&self, event: Event) -> Result<EventRecord> {
        let rec = self.store.append(event, (self.clock)())?;
        self.state.write().expect("state poisoned").apply(&rec);
        Ok(rec)
    }

    fn gate(&self) -> std::sync::MutexGuard<'_, ()> {
        self.write_gate.lock().expect("write gate poisoned")
    }

    pub fn questionnaire(&self, id: &str) -> Result<&Questionnaire> {
        self.questionnaires.get(id).ok_or_else(|| ServiceError::NotFound(format!("questionnaire {id}")))
    }

    pub fn create_session(&self, respondent_id: &str, role: Role, questionnaire_id: &str, idempotency_key: Option<&str>) -> Result<Session> {
        self.questionnaire(questionnaire_id)?;
        if respondent_id.is_empty() {
            return Err(ServiceError::Invalid("respondent_id is empty".into()));
        }
        let _g = self.gate();
        {
            let st = self.state.read().expect("state poisoned");
            if let Some(k) = idempotency_key {
                if let Some(id) = st.session_keys.get(k) {
                    return Ok(st.sessions[id].clone());
                }
            }
        }
        let seq = self.state.read().expect("state poisoned").last_seq + 1;
        let session = Session {
            session_id: format!("sess-{seq:06}"),
            respondent_id: respondent_id.to_string(),
            role,
            questionnaire_id: questionnaire_id.to_string(),
            started_at: (self.clock)(),
            status: SessionStatus::Open,
        };
        self.commit(Event::SessionCreated { session: session.clone(), idempotency_key: idempotency_key.map(String::from) })?;
        Ok(session)
    }

    pub fn session(&self, session_id: &str) -> Result<Session> {
        self.state
            .read()
            .expect("state poisoned")
            .sessions
            .get(session_id)
            .cloned()
            .ok_or_else(|| ServiceError::NotFound(format!("session {session_id}")))
    }

    /// Expires the session first if its TTL has elapsed; returns the current
    /// status. Caller must hold the write gate.
    fn refresh_session(&self, session_id: &str) -> Result<Session> {
        let s = self.session(session_id)?;
        if s.status == SessionStatus::Open && (self.clock)() - s.started_at > Duration::seconds(self.app.server.session_ttl_secs) {
            self.commit(Event::SessionExpired { session_id: session_id.to_string() })?;
            return self.session(session_id);
        }
        Ok(s)
    }

    pub fn record_timed_response(&self, session_id: &str, sub: &ResponseSubmission, idempotency_key: Option<&str>) -> Result<Ack> {
        let _g = self.gate();
        if let Some(k) = idempotency_key {
            let st = self.state.read().expect("state poisoned");
            if let Some(&(i, seq)) = st.response_keys.get(k) {
                let r = &st.responses[i];
                if r.session_id == session_id && r.indicator_id == sub.indicator_id {
                    return Ok(Ack { sequence: seq, session_id: r.session_id.clone(), indicator_id: r.indicator_id.clone() });
                }
                return Err(ServiceError::Duplicate(format!("idempotency key {k} already used")));
            }
        }
        let session = self.refresh_session(session_id)?;
        if session.status != SessionStatus::Open {
            return Err(ServiceError::SessionState { session_id: session_id.to_string(), status: session.status });
        }
        let q = self.questionnaire(&session.questionnaire_id)?;
        if !q.items.iter().any(|i| i.indicator_id == sub.indicator_id) {
            return Err(ServiceError::Invalid(format!("indicator {} is not in questionnaire {}", sub.indicator_id, q.id)));
        }
        let response = TimedLikertResponse {
            respondent_id: session.respondent_id.clone(),
            indicator_id: sub.indicator_id.clone(),
            rating: sub.rating,
            response_time: sub.response_time_ms as f64 / 1000.0,
            captured_at: sub.captured_at.unwrap_or_else(|| (self.clock)()),
            session_id: session_id.to_string(),
        };
        response.validate().map_err(|e| ServiceError::Invalid(e.to_string()))?;
        if self.state.read().expect("state poisoned").answered.contains(&(session_id.to_string(), sub.indicator_id.clone())) {
            return Err(ServiceError::Duplicate(format!("indicator {} already answered in session {session_id}", sub.indicator_id)));
        }
        let rec = self.commit(Event::ResponseRecorded { response, idempotency_key: idempotency_key.map(String::from) })?;
        Ok(Ack { sequence: rec.seq, session_id: session_id.to_string(), indicator_id: sub.indicator_id.clone() })
    }

    pub fn submit_session(&self, session_id: &str) -> Result<Session> {
        let _g = self.gate();
        let s = self.refresh_session(session_id)?;
        match s.status {
            SessionStatus::Open => {
                self.commit(Event::SessionSubmitted { session_id: session_id.to_string() })?;
                self.session(session_id)
            }
            SessionStatus::Submitted => Ok(s),
            SessionStatus::Expired => Err(ServiceError::SessionState { session_id: session_id.to_string(), status: s.status }),
        }
    }

    pub fn record_elicitations(&self, elicitations: &[LikertElicitation]) -> Result<u64> {
        let known = self.hierarchy.indicator_ids();
        for e in elicitations {
            e.validate().map_err(|err| ServiceError::Invalid(err.to_string()))?;
            if !known.contains(&e.indicator_id) {
                return Err(ServiceError::Invalid(format!("unknown indicator {}", e.indicator_id)));
            }
        }
        let _g = self.gate();
        let mut last = 0;
        for e in elicitations {
            last = self.commit(Event::ElicitationRecorded { elicitation: e.clone() })?.seq;
        }
        Ok(last)
    }

    pub fn record_observation(&self, observation: IndicatorVector) -> Result<u64> {
        observation.check(&self.hierarchy, self.app.missing_policy).map_err(|e| ServiceError::Invalid(e.to_string()))?;
        let _g = self.gate();
        Ok(self.commit(Event::ObservationRecorded { observation })?.seq)
    }

    pub fn get_index_report(&self, child_id: &str) -> Result<IndexReport> {
        self.state
            .read()
            .expect("state poisoned")
            .reports
            .get(child_id)
            .cloned()
            .ok_or_else(|| ServiceError::NotFound(format!("report for child {child_id}")))
    }

    /// Runs one stage synchronously on a snapshot of the state, then appends
    /// its outcome. Ingestion continues while the stage computes; a second
    /// job of the same stage is refused.
    pub fn run_inference(&self, stage: Stage) -> Result<JobResult> {
        let _job = match self.jobs[stage.slot()].try_lock() {
            Ok(g) => g,
            Err(TryLockError::WouldBlock) => return Err(ServiceError::JobRunning(stage)),
            Err(TryLockError::Poisoned(p)) => p.into_inner(),
        };
        let snap = self.snapshot();
        let (event, summary) = match stage {
            Stage::PosteriorUpdate => self.posterior_job(&snap)?,
            Stage::TrainFitness => self.training_job(&snap)?,
            Stage::ComputeIndex => self.index_job(&snap)?,
        };
        let rec = {
            let _g = self.gate();
            self.commit(event)?
        };
        self.write_snapshots(&rec)?;
        Ok(JobResult { stage, sequence: rec.seq, summary })
    }

    fn posterior_job(&self, snap: &ServiceState) -> Result<(Event, serde_json::Value)> {
        let prior = match &snap.beliefs {
            Some(b) => b.clone(),
            None => {
                if snap.elicitations.is_empty() {
                    return Err(ServiceError::Precondition("no elicitations recorded; cannot build priors".into()));
                }
                let p = inference::elicit_prior(&snap.elicitations, &self.hierarchy.indicator_ids(), &self.app.prior)
                    .map_err(|e| ServiceError::Precondition(e.to_string()))?;
                BeliefState::from_prior(p)
            }
        };
        let fresh = &snap.observations[snap.observations_consumed..];
        let (beliefs, diagnostics) = pipeline::update_posterior(&prior, fresh)?;
        let max_div = diagnostics.iter().map(|d| d.mean_divergence).fold(0.0, f64::max);
        let summary = serde_json::json!({
            "wave": beliefs.wave,
            "new_observations": fresh.len(),
            "indicators": beliefs.beliefs.len(),
            "unchanged": beliefs == prior,
            "max_mean_divergence": max_div,
        });
        Ok((Event::PosteriorUpdated { beliefs, observations_consumed: snap.observations.len(), diagnostics }, summary))
    }

    fn training_job(&self, snap: &ServiceState) -> Result<(Event, serde_json::Value)> {
        let beliefs = snap.beliefs.as_ref().ok_or_else(|| ServiceError::Precondition("posterior-update has not run".into()))?;
        if snap.responses.is_empty() {
            return Err(ServiceError::Precondition("no timed responses recorded".into()));
        }
        let adjusted = phenotyping::adjust_batch(&snap.responses, &self.app.certainty).map_err(|e| ServiceError::Invalid(e.to_string()))?;
        let out = pipeline::train_fitness(beliefs, &adjusted, &self.hierarchy, &self.app)?;
        let history: Vec<HistoryRow> = out
            .result
            .history
            .iter()
            .map(|s| HistoryRow { generation: s.generation, best_fitness: s.best_fitness, mean_fitness: s.mean_fitness })
            .collect();
        let summary = serde_json::json!({
            "training": out.summary,
            "history": format!("{SNAPSHOT_DIR}/history.csv"),
        });
        Ok((Event::TrainingCompleted { params: out.result.best, summary: out.summary, history }, summary))
    }

    fn index_job(&self, snap: &ServiceState) -> Result<(Event, serde_json::Value)> {
        let beliefs = snap.beliefs.as_ref().ok_or_else(|| ServiceError::Precondition("posterior-update has not run".into()))?;
        let latest = snap.latest_observations();
        if latest.is_empty() {
            return Err(ServiceError::Precondition("no indicator observations recorded".into()));
        }
        let reports = pipeline::compute_index(beliefs, &latest, &self.hierarchy, &self.app, (self.clock)())?;
        let summary = serde_json::json!({
            "children": reports.len(),
            "mean_overall": reports.iter().map(|r| r.overall).sum::<f64>() / reports.len() as f64,
        });
        Ok((Event::IndexComputed { reports }, summary))
    }

    fn write_snapshots(&self, rec: &EventRecord) -> Result<()> {
        let dir = self.data_dir.join(SNAPSHOT_DIR);
        std::fs::create_dir_all(&dir)?;
        let write = |name: &str, bytes: Vec<u8>| -> Result<()> {
            let tmp = dir.join(format!(".{name}.tmp"));
            std::fs::write(&tmp, bytes)?;
            std::fs::rename(&tmp, dir.join(name))?;
            Ok(())
        };
        match &rec.event {
            Event::PosteriorUpdated { beliefs, .. } => write("beliefs.json", pretty(beliefs))?,
            Event::TrainingCompleted { params, history, .. } => {
                write("params.json", pretty(params))?;
                let mut csv = String::from("generation,best_fitness,mean_fitness\n");
                for h in history {
                    csv.push_str(&format!("{},{},{}\n", h.generation, h.best_fitness, h.mean_fitness));
                }
                write("history.csv", csv.into_bytes())?;
            }
            Event::IndexComputed { .. } => {
                let st = self.state.read().expect("state poisoned");
                let reports: Vec<&IndexReport> = st.reports.values().collect();
                write("reports.json", pretty(&reports))?;
            }
            _ => {}
        }
        Ok(())
    }
}

fn pretty<T: Serialize>(v: &T) -> Vec<u8> {
    serde_json::to_vec_pretty(v).expect("snapshot serializes")
}
