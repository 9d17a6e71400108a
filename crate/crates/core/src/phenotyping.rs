//! Response-time certainty scores and certainty-adjusted Likert responses.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PhenotypingError {
    #[error("invalid response time {0} s")]
    InvalidTiming(f64),
    #[error("rating {rating} outside 1..=5 (respondent {respondent_id}, indicator {indicator_id})")]
    RatingOutOfRange { rating: u8, respondent_id: String, indicator_id: String },
    #[error("duplicate response for respondent {respondent_id}, indicator {indicator_id} in session {session_id}")]
    DuplicateResponse { respondent_id: String, indicator_id: String, session_id: String },
    #[error("invalid certainty config: {0}")]
    InvalidConfig(String),
    #[error("adjusted matrix has indicator {0} outside the requested column set")]
    UnknownIndicator(String),
    #[error("line {line}: {source}")]
    Line { line: usize, source: serde_json::Error },
    #[error("I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("CSV: {0}")]
    Csv(#[from] csv::Error),
    #[error("adjusted CSV: {0}")]
    Matrix(String),
}

pub type Result<T> = std::result::Result<T, PhenotypingError>;

/// One timed Likert answer. `response_time` is in seconds; on the wire it is
/// carried as integer milliseconds (`response_time_ms`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "TimedResponseRecord", try_from = "TimedResponseRecord")]
pub struct TimedLikertResponse {
    pub respondent_id: String,
    pub indicator_id: String,
    pub rating: u8,
    pub response_time: f64,
    pub captured_at: DateTime<Utc>,
    pub session_id: String,
}

/// Wire form of [`TimedLikertResponse`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimedResponseRecord {
    pub respondent_id: String,
    pub indicator_id: String,
    pub rating: u8,
    pub response_time_ms: u64,
    pub session_id: String,
    pub captured_at: DateTime<Utc>,
}

impl From<TimedLikertResponse> for TimedResponseRecord {
    fn from(r: TimedLikertResponse) -> Self {
        TimedResponseRecord {
            respondent_id: r.respondent_id,
            indicator_id: r.indicator_id,
            rating: r.rating,
            response_time_ms: (r.response_time * 1000.0).round() as u64,
            session_id: r.session_id,
            captured_at: r.captured_at,
        }
    }
}

impl TryFrom<TimedResponseRecord> for TimedLikertResponse {
    type Error = PhenotypingError;

    fn try_from(r: TimedResponseRecord) -> Result<Self> {
        let out = TimedLikertResponse {
            respondent_id: r.respondent_id,
            indicator_id: r.indicator_id,
            rating: r.rating,
            response_time: r.response_time_ms as f64 / 1000.0,
            captured_at: r.captured_at,
            session_id: r.session_id,
        };
        out.validate()?;
        Ok(out)
    }
}

impl TimedLikertResponse {
    pub fn validate(&self) -> Result<()> {
        if !(1..=5).contains(&self.rating) {
            return Err(PhenotypingError::RatingOutOfRange {
                rating: self.rating,
                respondent_id: self.respondent_id.clone(),
                indicator_id: self.indicator_id.clone(),
            });
        }
        if !self.response_time.is_finite() || self.response_time < 0.0 {
            return Err(PhenotypingError::InvalidTiming(self.response_time));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CertaintyConfig {
    /// Sensitivity of certainty to response time, in 1/s.
    pub alpha_certainty: f64,
    /// Times above this are clamped (seconds).
    pub t_cap: f64,
    /// Times below this are clamped (seconds).
    pub t_floor: f64,
}

impl Default for CertaintyConfig {
    fn default() -> Self {
        CertaintyConfig { alpha_certainty: 0.25, t_cap: 120.0, t_floor: 0.0 }
    }
}

impl CertaintyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_certainty.is_finite() && self.alpha_certainty > 0.0) {
            return Err(PhenotypingError::InvalidConfig(format!("alpha_certainty = {}", self.alpha_certainty)));
        }
        if !(self.t_floor >= 0.0 && self.t_floor < self.t_cap && self.t_cap.is_finite()) {
            return Err(PhenotypingError::InvalidConfig(format!("t_floor = {}, t_cap = {}", self.t_floor, self.t_cap)));
        }
        Ok(())
    }
}

/// `1 / (1 + α·clamp(t, t_floor, t_cap))`.
pub fn certainty_score(t: f64, cfg: &CertaintyConfig) -> Result<f64> {
    if !t.is_finite() || t < 0.0 {
        return Err(PhenotypingError::InvalidTiming(t));
    }
    let t = t.clamp(cfg.t_floor, cfg.t_cap);
    Ok(1.0 / (1.0 + cfg.alpha_certainty * t))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdjustedResponse {
    pub respondent_id: String,
    pub indicator_id: String,
    pub certainty: f64,
    pub adjusted_value: f64,
}

pub fn adjust_response(r: &TimedLikertResponse, cfg: &CertaintyConfig) -> Result<AdjustedResponse> {
    r.validate()?;
    let certainty = certainty_score(r.response_time, cfg)?;
    Ok(AdjustedResponse {
        respondent_id: r.respondent_id.clone(),
        indicator_id: r.indicator_id.clone(),
        certainty,
        adjusted_value: r.rating as f64 * certainty,
    })
}

/// Dense respondent × indicator matrix of adjusted values; `None` marks an
/// unanswered cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdjustedMatrix {
    pub respondents: Vec<String>,
    pub indicators: Vec<String>,
    pub values: Vec<Vec<Option<f64>>>,
}

impl AdjustedMatrix {
    pub fn empty() -> Self {
        AdjustedMatrix { respondents: vec![], indicators: vec![], values: vec![] }
    }

    pub fn n_rows(&self) -> usize {
        self.respondents.len()
    }

    pub fn n_cols(&self) -> usize {
        self.indicators.len()
    }

    pub fn observed_count(&self) -> usize {
        self.values.iter().flatten().filter(|v| v.is_some()).count()
    }

    /// Same rows, columns reordered to `indicators`; columns with no
    /// responses become all-missing.
    pub fn aligned_to(&self, indicators: &[String]) -> Result<AdjustedMatrix> {
        let wanted: BTreeSet<&str> = indicators.iter().map(String::as_str).collect();
        if let Some(extra) = self.indicators.iter().find(|i| !wanted.contains(i.as_str())) {
            return Err(PhenotypingError::UnknownIndicator(extra.clone()));
        }
        let pos: BTreeMap<&str, usize> = self.indicators.iter().enumerate().map(|(j, id)| (id.as_str(), j)).collect();
        let values = self
            .values
            .iter()
            .map(|row| indicators.iter().map(|id| pos.get(id.as_str()).and_then(|&j| row[j])).collect())
            .collect();
        Ok(AdjustedMatrix { respondents: self.respondents.clone(), indicators: indicators.to_vec(), values })
    }
}

/// Builds `Y^(c)`. Rows and columns are sorted lexicographically. When one
/// (respondent, indicator) pair is answered in several sessions the latest
/// `captured_at` wins, ties going to the greater session id.
pub fn adjust_batch(responses: &[TimedLikertResponse], cfg: &CertaintyConfig) -> Result<AdjustedMatrix> {
    cfg.validate()?;
    let mut seen = BTreeSet::new();
    let mut cells: BTreeMap<(&str, &str), (&TimedLikertResponse, f64)> = BTreeMap::new();
    for r in responses {
        if !seen.insert((r.respondent_id.as_str(), r.indicator_id.as_str(), r.session_id.as_str())) {
            return Err(PhenotypingError::DuplicateResponse {
                respondent_id: r.respondent_id.clone(),
                indicator_id: r.indicator_id.clone(),
                session_id: r.session_id.clone(),
            });
        }
        let adj = adjust_response(r, cfg)?;
        let key = (r.respondent_id.as_str(), r.indicator_id.as_str());
        let replace = match cells.get(&key) {
            None => true,
            Some((prev, _)) => (r.captured_at, &r.session_id) > (prev.captured_at, &prev.session_id),
        };
        if replace {
            cells.insert(key, (r, adj.adjusted_value));
        }
    }
    let respondents: Vec<String> = cells.keys().map(|k| k.0).collect::<BTreeSet<_>>().into_iter().map(String::from).collect();
    let indicators: Vec<String> = cells.keys().map(|k| k.1).collect::<BTreeSet<_>>().into_iter().map(String::from).collect();
    let values = respondents
        .iter()
        .map(|r| indicators.iter().map(|i| cells.get(&(r.as_str(), i.as_str())).map(|c| c.1)).collect())
        .collect();
    Ok(AdjustedMatrix { respondents, indicators, values })
}

/// JSON-lines: one [`TimedResponseRecord`] per line; blank lines are skipped.
pub fn read_responses_jsonl<R: BufRead>(r: R) -> Result<Vec<TimedLikertResponse>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TimedResponseRecord = serde_json::from_str(&line).map_err(|source| PhenotypingError::Line { line: i + 1, source })?;
        out.push(TimedLikertResponse::try_from(rec)?);
    }
    Ok(out)
}

pub fn write_responses_jsonl<W: Write>(mut w: W, responses: &[TimedLikertResponse]) -> Result<()> {
    for r in responses {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// CSV with a `respondent_id` column followed by one column per indicator;
/// empty cells are unanswered.
pub fn write_adjusted_csv<W: Write>(w: W, m: &AdjustedMatrix) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(std::iter::once("respondent_id").chain(m.indicators.iter().map(String::as_str)))?;
    for (r, row) in m.respondents.iter().zip(&m.values) {
        let cells = row.iter().map(|v| v.map(|x| x.to_string()).unwrap_or_default());
        out.write_record(std::iter::once(r.clone()).chain(cells))?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_adjusted_csv<R: std::io::Read>(r: R) -> Result<AdjustedMatrix> {
    let mut rd = csv::Reader::from_reader(r);
    let header = rd.headers()?.clone();
    if header.get(0) != Some("respondent_id") {
        return Err(PhenotypingError::Matrix("first column must be respondent_id".into()));
    }
    let indicators: Vec<String> = header.iter().skip(1).map(String::from).collect();
    let mut m = AdjustedMatrix { respondents: vec![], indicators, values: vec![] };
    for rec in rd.records() {
        let rec = rec?;
        m.respondents.push(rec[0].to_string());
        let row = rec
            .iter()
            .skip(1)
            .map(|c| match c.trim() {
                "" => Ok(None),
                v => v.parse::<f64>().map(Some).map_err(|_| PhenotypingError::Matrix(format!("bad cell {v:?}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        m.values.push(row);
    }
    Ok(m)
}
