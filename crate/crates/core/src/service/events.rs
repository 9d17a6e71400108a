//! Append-only JSON-lines event log with a single writer.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fitness::NetParams;
use crate::hierarchy::{IndexReport, IndicatorVector};
use crate::inference::{BeliefState, LikertElicitation, PosteriorDiagnostic};
use crate::phenotyping::TimedLikertResponse;
use crate::pipeline::TrainingSummary;

use super::Session;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("event log I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("event log line {line}: {source}")]
    Corrupt { line: usize, source: serde_json::Error },
    #[error("event log line {line}: sequence {found} follows {previous}")]
    Sequence { line: usize, previous: u64, found: u64 },
    #[error("event encoding: {0}")]
    Encode(serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub generation: usize,
    pub best_fitness: f64,
    pub mean_fitness: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "payload", rename_all = "kebab-case")]
pub enum Event {
    SessionCreated { session: Session, idempotency_key: Option<String> },
    SessionSubmitted { session_id: String },
    SessionExpired { session_id: String },
    ResponseRecorded { response: TimedLikertResponse, idempotency_key: Option<String> },
    ElicitationRecorded { elicitation: LikertElicitation },
    ObservationRecorded { observation: IndicatorVector },
    PosteriorUpdated { beliefs: BeliefState, observations_consumed: usize, diagnostics: Vec<PosteriorDiagnostic> },
    TrainingCompleted { params: NetParams, summary: TrainingSummary, history: Vec<HistoryRow> },
    IndexComputed { reports: Vec<IndexReport> },
}

impl Event {
    pub fn kind(&self) -> &'static str {
        match self {
            Event::SessionCreated { .. } => "session-created",
            Event::SessionSubmitted { .. } => "session-submitted",
            Event::SessionExpired { .. } => "session-expired",
            Event::ResponseRecorded { .. } => "response-recorded",
            Event::ElicitationRecorded { .. } => "elicitation-recorded",
            Event::ObservationRecorded { .. } => "observation-recorded",
            Event::PosteriorUpdated { .. } => "posterior-updated",
            Event::TrainingCompleted { .. } => "training-completed",
            Event::IndexComputed { .. } => "index-computed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub seq: u64,
    pub recorded_at: DateTime<Utc>,
    pub event: Event,
}

struct Writer {
    file: File,
    next_seq: u64,
}

pub struct EventStore {
    path: PathBuf,
    writer: Mutex<Writer>,
}

impl EventStore {
    /// Opens (creating if needed) the log at `path` and returns every stored
    /// record. A torn final line without a trailing newline is dropped and
    /// truncated away; any other malformed line is an error.
    pub fn open(path: &Path) -> Result<(Self, Vec<EventRecord>), StoreError> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut file = OpenOptions::new().read(true).append(true).create(true).open(path)?;
        let mut records = Vec::new();
        let mut valid_len = 0u64;
        {
            let mut reader = BufReader::new(&mut file);
            reader.seek(SeekFrom::Start(0))?;
            let mut line = String::new();
            let mut line_no = 0;
            loop {
                line.clear();
                let n = reader.read_line(&mut line)?;
                if n == 0 {
                    break;
                }
                line_no += 1;
                let complete = line.ends_with('\n');
                if line.trim().is_empty() {
                    valid_len += n as u64;
                    continue;
                }
                match serde_json::from_str::<EventRecord>(line.trim_end()) {
                    Ok(rec) => {
                        let previous = records.last().map(|r: &EventRecord| r.seq).unwrap_or(0);
                        if rec.seq != previous + 1 {
                            return Err(StoreError::Sequence { line: line_no, previous, found: rec.seq });
                        }
                        records.push(rec);
                        valid_len += n as u64;
                    }
                    Err(_) if !complete => {
                        log::warn!("dropping torn final event line {line_no} in {}", path.display());
                        break;
                    }
                    Err(source) => return Err(StoreError::Corrupt { line: line_no, source }),
                }
            }
        }
        if file.metadata()?.len() != valid_len {
            file.set_len(valid_len)?;
        }
        let next_seq = records.last().map(|r| r.seq + 1).unwrap_or(1);
        Ok((EventStore { path: path.to_path_buf(), writer: Mutex::new(Writer { file, next_seq }) }, records))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Appends and fsyncs before returning the stored record.
    pub fn append(&self, event: Event, recorded_at: DateTime<Utc>) -> Result<EventRecord, StoreError> {
        let mut w = self.writer.lock().expect("event writer poisoned");
        let record = EventRecord { seq: w.next_seq, recorded_at, event };
        let mut line = serde_json::to_vec(&record).map_err(StoreError::Encode)?;
        line.push(b'\n');
        w.file.write_all(&line)?;
        w.file.sync_data()?;
        w.next_seq += 1;
        Ok(record)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    fn at() -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2024, 5, 1, 8, 0, 0).unwrap()
    }

    fn submitted(id: &str) -> Event {
        Event::SessionSubmitted { session_id: id.into() }
    }

    #[test]
    fn append_and_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("events.jsonl");
        let (store, recs) = EventStore::open(&path).unwrap();
        assert!(recs.is_empty());
        assert_eq!(store.append(submitted("a"), at()).unwrap().seq, 1);
        assert_eq!(store.append(submitted("b"), at()).unwrap().seq, 2);
        drop(store);
        let (store, recs) = EventStore::open(&path).unwrap();
        assert_eq!(recs.iter().map(|r| r.seq).collect::<Vec<_>>(), vec![1, 2]);
        assert_eq!(recs[1].event, submitted("b"));
        assert_eq!(store.append(submitted("c"), at()).unwrap().seq, 3);
    }

    #[test]
    fn torn_tail_is_dropped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("events.jsonl");
        let (store, _) = EventStore::open(&path).unwrap();
        store.append(submitted("a"), at()).unwrap();
        drop(store);
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(br#"{"seq":2,"recorded_at":"2024-05"#).unwrap();
        drop(f);
        let (store, recs) = EventStore::open(&path).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(store.append(submitted("b"), at()).unwrap().seq, 2);
        drop(store);
        assert_eq!(EventStore::open(&path).unwrap().1.len(), 2);
    }

    #[test]
    fn gaps_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("events.jsonl");
        let rec = |seq| serde_json::to_string(&EventRecord { seq, recorded_at: at(), event: submitted("x") }).unwrap();
        std::fs::write(&path, format!("{}\n{}\n", rec(1), rec(3))).unwrap();
        assert!(matches!(EventStore::open(&path), Err(StoreError::Sequence { previous: 1, found: 3, .. })));
    }

    #[test]
    fn wire_shape() {
        let rec = EventRecord { seq: 7, recorded_at: at(), event: submitted("s1") };
        assert_eq!(
            serde_json::to_string(&rec).unwrap(),
            r#"{"seq":7,"recorded_at":"2024-05-01T08:00:00Z","event":{"type":"session-submitted","payload":{"session_id":"s1"}}}"#
        );
    }
}
