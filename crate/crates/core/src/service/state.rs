//! In-memory projection of the event log. `apply` is the only way state
//! changes, so replaying the log reproduces the live state exactly.

use std::collections::{BTreeMap, BTreeSet};

use crate::fitness::NetParams;
use crate::hierarchy::{IndexReport, IndicatorVector};
use crate::inference::{BeliefState, LikertElicitation};
use crate::phenotyping::TimedLikertResponse;
use crate::pipeline::TrainingSummary;

use super::events::{Event, EventRecord, HistoryRow};
use super::{Session, SessionStatus};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ServiceState {
    pub last_seq: u64,
    pub sessions: BTreeMap<String, Session>,
    pub session_keys: BTreeMap<String, String>,
    pub responses: Vec<TimedLikertResponse>,
    /// Idempotency key → (index into `responses`, sequence number).
    pub response_keys: BTreeMap<String, (usize, u64)>,
    pub answered: BTreeSet<(String, String)>,
    pub elicitations: Vec<LikertElicitation>,
    pub observations: Vec<IndicatorVector>,
    pub beliefs: Option<BeliefState>,
    pub observations_consumed: usize,
    pub network: Option<NetParams>,
    pub training_summary: Option<TrainingSummary>,
    pub history: Vec<HistoryRow>,
    pub reports: BTreeMap<String, IndexReport>,
}

impl ServiceState {
    pub fn replay<'a>(records: impl IntoIterator<Item = &'a EventRecord>) -> Self {
        let mut s = ServiceState::default();
        for r in records {
            s.apply(r);
        }
        s
    }

    pub fn apply(&mut self, record: &EventRecord) {
        self.last_seq = record.seq;
        match &record.event {
            Event::SessionCreated { session, idempotency_key } => {
                if let Some(k) = idempotency_key {
                    self.session_keys.insert(k.clone(), session.session_id.clone());
                }
                self.sessions.insert(session.session_id.clone(), session.clone());
            }
            Event::SessionSubmitted { session_id } => self.set_status(session_id, SessionStatus::Submitted),
            Event::SessionExpired { session_id } => self.set_status(session_id, SessionStatus::Expired),
            Event::ResponseRecorded { response, idempotency_key } => {
                if let Some(k) = idempotency_key {
                    self.response_keys.insert(k.clone(), (self.responses.len(), record.seq));
                }
                self.answered.insert((response.session_id.clone(), response.indicator_id.clone()));
                self.responses.push(response.clone());
            }
            Event::ElicitationRecorded { elicitation } => self.elicitations.push(elicitation.clone()),
            Event::ObservationRecorded { observation } => self.observations.push(observation.clone()),
            Event::PosteriorUpdated { beliefs, observations_consumed, .. } => {
                self.beliefs = Some(beliefs.clone());
                self.observations_consumed = *observations_consumed;
            }
            Event::TrainingCompleted { params, summary, history } => {
                self.network = Some(params.clone());
                self.training_summary = Some(summary.clone());
                self.history = history.clone();
            }
            Event::IndexComputed { reports } => {
                for r in reports {
                    self.reports.insert(r.child_id.clone(), r.clone());
                }
            }
        }
    }

    fn set_status(&mut self, session_id: &str, status: SessionStatus) {
        if let Some(s) = self.sessions.get_mut(session_id) {
            if s.status == SessionStatus::Open {
                s.status = status;
            }
        }
    }

    /// The most recent observation per child (by `observed_at`, later
    /// records winning ties), ordered by child id.
    pub fn latest_observations(&self) -> Vec<IndicatorVector> {
        let mut latest: BTreeMap<&str, &IndicatorVector> = BTreeMap::new();
        for x in &self.observations {
            match latest.get(x.child_id.as_str()) {
                Some(prev) if prev.observed_at > x.observed_at => {}
                _ => {
                    latest.insert(x.child_id.as_str(), x);
                }
            }
        }
        latest.into_values().cloned().collect()
    }
}
