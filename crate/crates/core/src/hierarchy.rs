//! Indicator / capability / dimension data model and the hierarchical
//! weighted aggregation indicator → construct → broad → overarching → overall.
//!
//! Scores are deprivation intensities: `1.0` is fully deprived, `0.0` is not
//! deprived at all. Every group score is the weighted mean of its members,
//! `Σ ω·x / Σ ω`. With normalized weights this is the plain weighted sum, and
//! the division keeps the boundary identities (all deprived → 1, none → 0)
//! exact under floating-point rounding of the weights.

use std::borrow::Cow;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance for the per-group `Σ ω = 1` constraint.
pub const WEIGHT_TOLERANCE: f64 = 1e-9;

const DEFAULT_CONFIG_JSON: &str = include_str!("../data/hierarchy_default_v1.json");

/// Identifier of the single top-level group that combines the overarching
/// dimensions into the overall index.
pub const OVERALL_GROUP_ID: &str = "overall";

#[derive(Debug, Error)]
pub enum HierarchyError {
    #[error("child {child_id}: no value for indicator {indicator_id}")]
    IncompleteObservation { child_id: String, indicator_id: String },
    #[error("child {child_id}: unknown indicator {indicator_id}")]
    UnknownIndicator { child_id: String, indicator_id: String },
    #[error("child {child_id}: indicator {indicator_id} has non-binary value {value}")]
    NonBinary { child_id: String, indicator_id: String, value: u8 },
    #[error("weight set for level {found} supplied where level {expected} is required")]
    LevelMismatch { expected: Level, found: Level },
    #[error("no weight for {id}")]
    MissingWeight { id: String },
    #[error("weight for {id} is not a finite non-negative number: {value}")]
    InvalidWeight { id: String, value: f64 },
    #[error("weight set has entry {id} that is not a member of any group at this level")]
    UnexpectedWeight { id: String },
    #[error("weights in group {group} sum to {sum}, expected 1")]
    UnnormalizedGroup { group: String, sum: f64 },
    #[error("all raw weights in group {group} are zero")]
    DegenerateGroup { group: String },
    #[error("no lower-level score for {id}")]
    MissingScore { id: String },
    #[error("score for {id} is outside [0, 1]: {value}")]
    ScoreOutOfRange { id: String, value: f64 },
    #[error("invalid hierarchy: {}", format_violations(.0))]
    InvalidConfig(Vec<Violation>),
    #[error("hierarchy JSON: {0}")]
    Json(#[from] serde_json::Error),
}

fn format_violations(v: &[Violation]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; ")
}

pub type Result<T> = std::result::Result<T, HierarchyError>;

/// Aggregation level. A [`WeightSet`] tagged with a level holds the weights of
/// the elements *at* that level inside their parent groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Indicator,
    Construct,
    Broad,
    Overarching,
}

impl Level {
    pub const ALL: [Level; 4] = [Level::Indicator, Level::Construct, Level::Broad, Level::Overarching];
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Level::Indicator => "indicator",
            Level::Construct => "construct",
            Level::Broad => "broad",
            Level::Overarching => "overarching",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndicatorDef {
    pub id: String,
    pub label: String,
    pub capability_id: String,
    pub deprivation_description: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Capability {
    pub id: String,
    pub label: String,
}

/// A named group of lower-level element ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Group {
    pub id: String,
    pub label: String,
    pub members: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HierarchyConfig {
    #[serde(default)]
    pub version: String,
    pub capabilities: Vec<Capability>,
    pub indicators: Vec<IndicatorDef>,
    /// The six construct groups over indicators.
    pub constructs: Vec<Group>,
    /// The four broad dimensions over constructs.
    pub broad_dimensions: Vec<Group>,
    /// The three overarching dimensions over broad dimensions.
    pub overarching: Vec<Group>,
    pub overall_weights: BTreeMap<String, f64>,
}

/// Members at `level` partitioned into their parent groups.
#[derive(Debug, Clone)]
pub struct Grouping<'a> {
    pub level: Level,
    pub groups: Cow<'a, [Group]>,
}

impl HierarchyConfig {
    /// The shipped default hierarchy (29 indicators, 6 / 4 / 3 groups).
    pub fn default_config() -> Self {
        serde_json::from_str(DEFAULT_CONFIG_JSON).expect("shipped hierarchy config parses")
    }

    pub fn default_config_json() -> &'static str {
        DEFAULT_CONFIG_JSON
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// Parses and validates.
    pub fn from_json_validated(s: &str) -> Result<Self> {
        let cfg = Self::from_json(s)?;
        let violations = validate_hierarchy(&cfg);
        if violations.is_empty() {
            Ok(cfg)
        } else {
            Err(HierarchyError::InvalidConfig(violations))
        }
    }

    pub fn indicator_ids(&self) -> Vec<String> {
        self.indicators.iter().map(|i| i.id.clone()).collect()
    }

    pub fn construct_ids(&self) -> Vec<String> {
        self.constructs.iter().map(|g| g.id.clone()).collect()
    }

    pub fn broad_ids(&self) -> Vec<String> {
        self.broad_dimensions.iter().map(|g| g.id.clone()).collect()
    }

    pub fn overarching_ids(&self) -> Vec<String> {
        self.overarching.iter().map(|g| g.id.clone()).collect()
    }

    /// Groups that partition the elements of `level`.
    pub fn grouping(&self, level: Level) -> Grouping<'_> {
        let groups = match level {
            Level::Indicator => Cow::Borrowed(self.constructs.as_slice()),
            Level::Construct => Cow::Borrowed(self.broad_dimensions.as_slice()),
            Level::Broad => Cow::Borrowed(self.overarching.as_slice()),
            Level::Overarching => Cow::Owned(vec![Group {
                id: OVERALL_GROUP_ID.to_string(),
                label: "Overall".to_string(),
                members: self.overarching_ids(),
                note: None,
            }]),
        };
        Grouping { level, groups }
    }
}

/// A single problem found by [`validate_hierarchy`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    DuplicateId { scope: String, id: String },
    UnknownCapability { indicator_id: String, capability_id: String },
    UnknownMember { level: Level, group_id: String, member_id: String },
    MultipleGroups { level: Level, member_id: String, group_ids: Vec<String> },
    Unassigned { level: Level, member_id: String },
    EmptyGroup { level: Level, group_id: String },
    OverallWeight { message: String },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::DuplicateId { scope, id } => write!(f, "duplicate {scope} id {id}"),
            Violation::UnknownCapability { indicator_id, capability_id } => {
                write!(f, "indicator {indicator_id} references unknown capability {capability_id}")
            }
            Violation::UnknownMember { level, group_id, member_id } => {
                write!(f, "group {group_id} lists unknown {level} {member_id}")
            }
            Violation::MultipleGroups { level, member_id, group_ids } => write!(
                f,
                "{level} in multiple groups: {member_id} in {}",
                group_ids.join(", ")
            ),
            Violation::Unassigned { level, member_id } => {
                write!(f, "{level} {member_id} belongs to no group")
            }
            Violation::EmptyGroup { level, group_id } => {
                write!(f, "empty group {group_id} over level {level}")
            }
            Violation::OverallWeight { message } => write!(f, "overall weights: {message}"),
        }
    }
}

/// Returns every partition, emptiness and reference violation. An empty
/// vector means the config is valid.
pub fn validate_hierarchy(config: &HierarchyConfig) -> Vec<Violation> {
    let mut out = Vec::new();

    let capability_ids = unique_ids(config.capabilities.iter().map(|c| c.id.as_str()), "capability", &mut out);
    let indicator_ids = unique_ids(config.indicators.iter().map(|i| i.id.as_str()), "indicator", &mut out);
    for ind in &config.indicators {
        if !capability_ids.contains(ind.capability_id.as_str()) {
            out.push(Violation::UnknownCapability {
                indicator_id: ind.id.clone(),
                capability_id: ind.capability_id.clone(),
            });
        }
    }
    let construct_ids = unique_ids(config.constructs.iter().map(|g| g.id.as_str()), "construct", &mut out);
    let broad_ids = unique_ids(config.broad_dimensions.iter().map(|g| g.id.as_str()), "broad dimension", &mut out);
    let overarching_ids = unique_ids(config.overarching.iter().map(|g| g.id.as_str()), "overarching dimension", &mut out);

    check_partition(Level::Indicator, &indicator_ids, &config.constructs, &config.indicators.iter().map(|i| i.id.as_str()).collect::<Vec<_>>(), &mut out);
    check_partition(Level::Construct, &construct_ids, &config.broad_dimensions, &config.constructs.iter().map(|g| g.id.as_str()).collect::<Vec<_>>(), &mut out);
    check_partition(Level::Broad, &broad_ids, &config.overarching, &config.broad_dimensions.iter().map(|g| g.id.as_str()).collect::<Vec<_>>(), &mut out);

    if config.overarching.is_empty() {
        out.push(Violation::EmptyGroup { level: Level::Overarching, group_id: OVERALL_GROUP_ID.into() });
    }
    let mut sum = 0.0;
    for (id, w) in &config.overall_weights {
        if !overarching_ids.contains(id.as_str()) {
            out.push(Violation::OverallWeight { message: format!("unknown overarching dimension {id}") });
        }
        if !w.is_finite() || *w < 0.0 {
            out.push(Violation::OverallWeight { message: format!("weight for {id} is {w}") });
        }
        sum += w;
    }
    for g in &config.overarching {
        if !config.overall_weights.contains_key(&g.id) {
            out.push(Violation::OverallWeight { message: format!("missing weight for {}", g.id) });
        }
    }
    if (sum - 1.0).abs() > WEIGHT_TOLERANCE {
        out.push(Violation::OverallWeight { message: format!("weights sum to {sum}") });
    }
    out
}

fn unique_ids<'a>(ids: impl Iterator<Item = &'a str>, scope: &str, out: &mut Vec<Violation>) -> BTreeSet<&'a str> {
    let mut seen = BTreeSet::new();
    for id in ids {
        if !seen.insert(id) {
            out.push(Violation::DuplicateId { scope: scope.to_string(), id: id.to_string() });
        }
    }
    seen
}

fn check_partition(level: Level, known: &BTreeSet<&str>, groups: &[Group], ordered: &[&str], out: &mut Vec<Violation>) {
    let mut owners: BTreeMap<&str, Vec<String>> = BTreeMap::new();
    for g in groups {
        if g.members.is_empty() {
            out.push(Violation::EmptyGroup { level, group_id: g.id.clone() });
        }
        for m in &g.members {
            if !known.contains(m.as_str()) {
                out.push(Violation::UnknownMember { level, group_id: g.id.clone(), member_id: m.clone() });
                continue;
            }
            owners.entry(m.as_str()).or_default().push(g.id.clone());
        }
    }
    for id in ordered {
        match owners.get(id) {
            None => out.push(Violation::Unassigned { level, member_id: id.to_string() }),
            Some(gs) if gs.len() > 1 => out.push(Violation::MultipleGroups {
                level,
                member_id: id.to_string(),
                group_ids: gs.clone(),
            }),
            Some(_) => {}
        }
    }
}

/// Weights of the elements at one level, normalized within each parent group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightSet {
    pub level: Level,
    pub weights: BTreeMap<String, f64>,
}

impl WeightSet {
    pub fn get(&self, id: &str) -> Option<f64> {
        self.weights.get(id).copied()
    }

    /// Equal weights within each group.
    pub fn equal(grouping: &Grouping<'_>) -> Self {
        let mut weights = BTreeMap::new();
        for g in grouping.groups.iter() {
            let w = 1.0 / g.members.len() as f64;
            for m in &g.members {
                weights.insert(m.clone(), w);
            }
        }
        WeightSet { level: grouping.level, weights }
    }

    /// Checks level, coverage, sign and per-group normalization.
    pub fn validate(&self, grouping: &Grouping<'_>) -> Result<()> {
        if self.level != grouping.level {
            return Err(HierarchyError::LevelMismatch { expected: grouping.level, found: self.level });
        }
        let mut covered = 0usize;
        for g in grouping.groups.iter() {
            let mut sum = 0.0;
            for m in &g.members {
                let w = self.get(m).ok_or_else(|| HierarchyError::MissingWeight { id: m.clone() })?;
                if !w.is_finite() || w < 0.0 {
                    return Err(HierarchyError::InvalidWeight { id: m.clone(), value: w });
                }
                sum += w;
                covered += 1;
            }
            if (sum - 1.0).abs() > WEIGHT_TOLERANCE {
                return Err(HierarchyError::UnnormalizedGroup { group: g.id.clone(), sum });
            }
        }
        if covered != self.weights.len() {
            let members: BTreeSet<&str> = grouping.groups.iter().flat_map(|g| g.members.iter().map(String::as_str)).collect();
            if let Some(extra) = self.weights.keys().find(|k| !members.contains(k.as_str())) {
                return Err(HierarchyError::UnexpectedWeight { id: extra.clone() });
            }
        }
        Ok(())
    }
}

/// Divides each raw weight by its group sum.
pub fn normalize_weights(raw: &BTreeMap<String, f64>, grouping: &Grouping<'_>) -> Result<WeightSet> {
    let mut weights = BTreeMap::new();
    for g in grouping.groups.iter() {
        let sum = group_raw_sum(raw, g)?;
        if sum <= 0.0 {
            return Err(HierarchyError::DegenerateGroup { group: g.id.clone() });
        }
        for m in &g.members {
            weights.insert(m.clone(), raw[m] / sum);
        }
    }
    Ok(WeightSet { level: grouping.level, weights })
}

/// Like [`normalize_weights`], but an all-zero group falls back to equal
/// weights. Returns the ids of the groups that fell back.
pub fn normalize_weights_or_equal(raw: &BTreeMap<String, f64>, grouping: &Grouping<'_>) -> Result<(WeightSet, Vec<String>)> {
    let mut weights = BTreeMap::new();
    let mut fallbacks = Vec::new();
    for g in grouping.groups.iter() {
        let sum = group_raw_sum(raw, g)?;
        if sum <= 0.0 {
            log::warn!("weight group {} is all zero; using equal weights", g.id);
            fallbacks.push(g.id.clone());
            let w = 1.0 / g.members.len() as f64;
            for m in &g.members {
                weights.insert(m.clone(), w);
            }
        } else {
            for m in &g.members {
                weights.insert(m.clone(), raw[m] / sum);
            }
        }
    }
    Ok((WeightSet { level: grouping.level, weights }, fallbacks))
}

fn group_raw_sum(raw: &BTreeMap<String, f64>, g: &Group) -> Result<f64> {
    let mut sum = 0.0;
    for m in &g.members {
        let w = *raw.get(m).ok_or_else(|| HierarchyError::MissingWeight { id: m.clone() })?;
        if !w.is_finite() || w < 0.0 {
            return Err(HierarchyError::InvalidWeight { id: m.clone(), value: w });
        }
        sum += w;
    }
    Ok(sum)
}

/// One child's binary deprivation observations (`1` = deprived).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndicatorVector {
    pub child_id: String,
    pub values: BTreeMap<String, u8>,
    pub observed_at: DateTime<Utc>,
}

/// How indicator values missing from an [`IndicatorVector`] are handled.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissingPolicy {
    /// Any missing value is an error.
    #[default]
    Error,
    /// Weights are renormalized over the observed indicators of each
    /// construct. A construct with no observed indicator is still an error.
    Renormalize,
}

impl IndicatorVector {
    /// Rejects unknown ids and non-binary values; with [`MissingPolicy::Error`]
    /// also rejects incomplete vectors.
    pub fn check(&self, config: &HierarchyConfig, policy: MissingPolicy) -> Result<()> {
        let known: BTreeSet<&str> = config.indicators.iter().map(|i| i.id.as_str()).collect();
        for (id, v) in &self.values {
            if !known.contains(id.as_str()) {
                return Err(HierarchyError::UnknownIndicator { child_id: self.child_id.clone(), indicator_id: id.clone() });
            }
            if *v > 1 {
                return Err(HierarchyError::NonBinary { child_id: self.child_id.clone(), indicator_id: id.clone(), value: *v });
            }
        }
        if policy == MissingPolicy::Error {
            if let Some(missing) = config.indicators.iter().find(|i| !self.values.contains_key(&i.id)) {
                return Err(HierarchyError::IncompleteObservation {
                    child_id: self.child_id.clone(),
                    indicator_id: missing.id.clone(),
                });
            }
        }
        Ok(())
    }
}

/// `D_i` for every construct.
pub fn aggregate_constructs(
    x: &IndicatorVector,
    w: &WeightSet,
    config: &HierarchyConfig,
    policy: MissingPolicy,
) -> Result<BTreeMap<String, f64>> {
    let grouping = config.grouping(Level::Indicator);
    w.validate(&grouping)?;
    x.check(config, policy)?;
    let mut out = BTreeMap::new();
    for g in grouping.groups.iter() {
        let mut num = 0.0;
        let mut den = 0.0;
        let mut first_missing = None;
        for m in &g.members {
            match x.values.get(m) {
                Some(&v) => {
                    let wm = w.weights[m];
                    if v == 1 {
                        num += wm;
                    }
                    den += wm;
                }
                None => {
                    first_missing.get_or_insert(m);
                }
            }
        }
        if let Some(m) = first_missing {
            if policy == MissingPolicy::Error || den <= 0.0 {
                return Err(HierarchyError::IncompleteObservation {
                    child_id: x.child_id.clone(),
                    indicator_id: m.clone(),
                });
            }
        }
        out.insert(g.id.clone(), if den > 0.0 { num / den } else { 0.0 });
    }
    Ok(out)
}

/// Weighted group means of `lower_scores`; used for D→G, G→H and H→overall.
pub fn aggregate_level(
    lower_scores: &BTreeMap<String, f64>,
    w: &WeightSet,
    grouping: &Grouping<'_>,
) -> Result<BTreeMap<String, f64>> {
    w.validate(grouping)?;
    let mut out = BTreeMap::new();
    for g in grouping.groups.iter() {
        let mut num = 0.0;
        let mut den = 0.0;
        for m in &g.members {
            let s = *lower_scores.get(m).ok_or_else(|| HierarchyError::MissingScore { id: m.clone() })?;
            if !(0.0..=1.0).contains(&s) {
                return Err(HierarchyError::ScoreOutOfRange { id: m.clone(), value: s });
            }
            let wm = w.weights[m];
            num += wm * s;
            den += wm;
        }
        out.insert(g.id.clone(), if den > 0.0 { num / den } else { 0.0 });
    }
    Ok(out)
}

/// Weight sets for all four levels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllWeights {
    pub indicator: WeightSet,
    pub construct: WeightSet,
    pub broad: WeightSet,
    pub overarching: WeightSet,
}

impl AllWeights {
    /// Equal weights at every level, with the overarching level taken from
    /// the config's `overall_weights`.
    pub fn defaults(config: &HierarchyConfig) -> Self {
        Self::with_indicator_weights(config, WeightSet::equal(&config.grouping(Level::Indicator)))
    }

    pub fn with_indicator_weights(config: &HierarchyConfig, indicator: WeightSet) -> Self {
        AllWeights {
            indicator,
            construct: WeightSet::equal(&config.grouping(Level::Construct)),
            broad: WeightSet::equal(&config.grouping(Level::Broad)),
            overarching: WeightSet { level: Level::Overarching, weights: config.overall_weights.clone() },
        }
    }

    pub fn validate(&self, config: &HierarchyConfig) -> Result<()> {
        self.indicator.validate(&config.grouping(Level::Indicator))?;
        self.construct.validate(&config.grouping(Level::Construct))?;
        self.broad.validate(&config.grouping(Level::Broad))?;
        self.overarching.validate(&config.grouping(Level::Overarching))
    }
}

/// Attainment view of a report: `1 − deprivation` at every level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attainment {
    pub construct_scores: BTreeMap<String, f64>,
    pub broad_scores: BTreeMap<String, f64>,
    pub overarching_scores: BTreeMap<String, f64>,
    pub overall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexReport {
    pub child_id: String,
    pub construct_scores: BTreeMap<String, f64>,
    pub broad_scores: BTreeMap<String, f64>,
    pub overarching_scores: BTreeMap<String, f64>,
    pub overall: f64,
    pub attainment: Attainment,
    pub weights_used: AllWeights,
    pub computed_at: DateTime<Utc>,
}

fn complement(m: &BTreeMap<String, f64>) -> BTreeMap<String, f64> {
    m.iter().map(|(k, v)| (k.clone(), 1.0 - v)).collect()
}

/// Full pipeline x → D → G → H → overall for one child.
pub fn compute_micg(
    x: &IndicatorVector,
    weights: &AllWeights,
    config: &HierarchyConfig,
    policy: MissingPolicy,
    computed_at: DateTime<Utc>,
) -> Result<IndexReport> {
    let construct_scores = aggregate_constructs(x, &weights.indicator, config, policy)?;
    let broad_scores = aggregate_level(&construct_scores, &weights.construct, &config.grouping(Level::Construct))?;
    let overarching_scores = aggregate_level(&broad_scores, &weights.broad, &config.grouping(Level::Broad))?;
    let overall_map = aggregate_level(&overarching_scores, &weights.overarching, &config.grouping(Level::Overarching))?;
    let overall = overall_map[OVERALL_GROUP_ID];
    let attainment = Attainment {
        construct_scores: complement(&construct_scores),
        broad_scores: complement(&broad_scores),
        overarching_scores: complement(&overarching_scores),
        overall: 1.0 - overall,
    };
    Ok(IndexReport {
        child_id: x.child_id.clone(),
        construct_scores,
        broad_scores,
        overarching_scores,
        overall,
        attainment,
        weights_used: weights.clone(),
        computed_at,
    })
}

/// Flat CSV: one row per child, deprivation score columns in config order.
pub fn write_reports_csv<W: std::io::Write>(w: W, config: &HierarchyConfig, reports: &[IndexReport]) -> csv::Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    let mut header = vec!["child_id".to_string(), "computed_at".to_string(), "overall".to_string()];
    header.extend(config.overarching_ids());
    header.extend(config.broad_ids());
    header.extend(config.construct_ids());
    wtr.write_record(&header)?;
    for r in reports {
        let mut row = vec![r.child_id.clone(), r.computed_at.to_rfc3339_opts(chrono::SecondsFormat::Secs, true), r.overall.to_string()];
        for (ids, scores) in [
            (config.overarching_ids(), &r.overarching_scores),
            (config.broad_ids(), &r.broad_scores),
            (config.construct_ids(), &r.construct_scores),
        ] {
            for id in ids {
                row.push(scores.get(&id).map(|v| v.to_string()).unwrap_or_default());
            }
        }
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}
