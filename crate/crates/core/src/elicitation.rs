//! Workshop sessions: expert roster, two survey rounds separated by a group
//! discussion, per-arm submissions and deidentified boxplot summaries.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Utc};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distfit::{fit_beta_from_triplet, BetaParams, CiLevel, DistFitError, ElicitedTriplet};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SessionError {
    #[error("session '{0}' already exists")]
    IdExists(String),
    #[error("unknown session '{0}'")]
    UnknownSession(String),
    #[error("expert '{0}' is already registered")]
    DuplicateExpert(String),
    #[error("session is closed")]
    SessionClosed,
    #[error("registration is closed once the discussion starts (state {0})")]
    RegistrationClosed(SessionState),
    #[error("round {round} submissions are not accepted in state {state}")]
    WrongRoundState { round: Round, state: SessionState },
    #[error("expert '{0}' is not registered")]
    UnknownExpert(String),
    #[error("invalid triplet: {0}")]
    InvalidTriplet(#[from] DistFitError),
    #[error("session is already closed")]
    AlreadyClosed,
    #[error("expected state {expected} but session is in {actual}")]
    StateMismatch { expected: SessionState, actual: SessionState },
    #[error("round {round} boxplots are not available in state {state}")]
    BoxplotsUnavailable { round: Round, state: SessionState },
    #[error("no round {round} submissions for {arm}")]
    NoSubmissions { round: Round, arm: Arm },
    #[error("expert '{expert_id}' has no submission for {arm} in either round")]
    MissingSubmission { expert_id: String, arm: Arm },
    #[error("session document error: {0}")]
    Schema(String),
}

/// Treatment arm. `HighDose` carries p1, `LowDose` carries p2.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Arm {
    HighDose,
    LowDose,
}

impl Arm {
    pub const ALL: [Arm; 2] = [Arm::HighDose, Arm::LowDose];
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arm::HighDose => "HIGH_DOSE",
            Arm::LowDose => "LOW_DOSE",
        })
    }
}

impl FromStr for Arm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "HIGH_DOSE" | "HIGH" => Ok(Arm::HighDose),
            "LOW_DOSE" | "LOW" => Ok(Arm::LowDose),
            other => Err(format!("unknown arm '{other}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Round {
    One,
    Two,
}

impl TryFrom<u8> for Round {
    type Error = String;

    fn try_from(v: u8) -> Result<Self, Self::Error> {
        match v {
            1 => Ok(Round::One),
            2 => Ok(Round::Two),
            other => Err(format!("round must be 1 or 2, got {other}")),
        }
    }
}

impl From<Round> for u8 {
    fn from(r: Round) -> u8 {
        match r {
            Round::One => 1,
            Round::Two => 2,
        }
    }
}

impl fmt::Display for Round {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", u8::from(*self))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SessionState {
    Created,
    Round1Open,
    Discussion,
    Round2Open,
    Closed,
}

impl SessionState {
    pub fn next(self) -> Option<SessionState> {
        use SessionState::*;
        match self {
            Created => Some(Round1Open),
            Round1Open => Some(Discussion),
            Discussion => Some(Round2Open),
            Round2Open => Some(Closed),
            Closed => None,
        }
    }

    fn accepts(self, round: Round) -> bool {
        matches!(
            (self, round),
            (SessionState::Round1Open, Round::One) | (SessionState::Round2Open, Round::Two)
        )
    }
}

impl fmt::Display for SessionState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).expect("unit variant");
        f.write_str(s.as_str().unwrap_or("?"))
    }
}

/// Years-in-practice band such as "11-15"; any `low-high` pair is accepted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct YearsBand {
    low: u32,
    high: u32,
}

impl YearsBand {
    pub fn new(low: u32, high: u32) -> Result<Self, String> {
        if low > high {
            return Err(format!("band {low}-{high} is reversed"));
        }
        Ok(Self { low, high })
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.low + self.high) as f64
    }
}

impl FromStr for YearsBand {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (lo, hi) = s.split_once('-').ok_or_else(|| format!("band '{s}' must look like 11-15"))?;
        let lo = lo.trim().parse().map_err(|_| format!("bad band '{s}'"))?;
        let hi = hi.trim().parse().map_err(|_| format!("bad band '{s}'"))?;
        YearsBand::new(lo, hi)
    }
}

impl TryFrom<String> for YearsBand {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<YearsBand> for String {
    fn from(b: YearsBand) -> String {
        format!("{}-{}", b.low, b.high)
    }
}

/// Professional-experience survey answers. Survey items are optional at
/// registration (experts often fill the questionnaire during the break) and
/// must be complete before covariates are encoded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertProfile {
    pub expert_id: String,
    #[serde(default)]
    pub country: Option<String>,
    #[serde(default)]
    pub years_practice_band: Option<YearsBand>,
    #[serde(default)]
    pub prescribed_060_last_year: Option<bool>,
    #[serde(default)]
    pub prescribed_015_last_year: Option<bool>,
    #[serde(default)]
    pub max_dose_mg: Option<f64>,
    #[serde(default)]
    pub trained_trials: Option<bool>,
    #[serde(default)]
    pub trained_stats: Option<bool>,
}

impl ExpertProfile {
    pub fn bare(expert_id: impl Into<String>) -> Self {
        Self {
            expert_id: expert_id.into(),
            country: None,
            years_practice_band: None,
            prescribed_060_last_year: None,
            prescribed_015_last_year: None,
            max_dose_mg: None,
            trained_trials: None,
            trained_stats: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertRecord {
    #[serde(flatten)]
    pub profile: ExpertProfile,
    /// Deidentified label, assigned when the discussion opens.
    #[serde(default)]
    pub alias: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Submission {
    pub expert_id: String,
    pub round: Round,
    pub arm: Arm,
    pub triplet: ElicitedTriplet,
    pub fitted: BetaParams,
    pub submitted_at: DateTime<Utc>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxplotSummary {
    pub label: AliasLabel,
    pub whisker_low: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub whisker_high: f64,
}

/// Boxplot labels are short uppercase strings; stored inline to keep the
/// summary `Copy`.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct AliasLabel([u8; 4]);

impl AliasLabel {
    fn parse(s: &str) -> Option<Self> {
        if s.is_empty() || s.len() > 4 || !s.bytes().all(|b| b.is_ascii_uppercase()) {
            return None;
        }
        let mut buf = [0u8; 4];
        buf[4 - s.len()..].copy_from_slice(s.as_bytes());
        Some(Self(buf))
    }

    pub fn as_str(&self) -> &str {
        let start = self.0.iter().position(|&b| b != 0).unwrap_or(4);
        std::str::from_utf8(&self.0[start..]).expect("ascii")
    }
}

impl fmt::Debug for AliasLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.as_str())
    }
}

impl fmt::Display for AliasLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Serialize for AliasLabel {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for AliasLabel {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        AliasLabel::parse(&s).ok_or_else(|| serde::de::Error::custom(format!("bad alias '{s}'")))
    }
}

/// Spreadsheet-style labels: A..Z, AA, AB, ...
fn alias_for_index(mut i: usize) -> String {
    let mut out = Vec::new();
    loop {
        out.push(b'A' + (i % 26) as u8);
        if i < 26 {
            break;
        }
        i = i / 26 - 1;
    }
    out.reverse();
    String::from_utf8(out).expect("ascii")
}

/// Each expert's final marginals: round 2 where submitted, else round 1.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertMarginals {
    pub profile: ExpertProfile,
    pub high_dose: BetaParams,
    pub low_dose: BetaParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SessionDocument")]
pub struct WorkshopSession {
    schema_version: u32,
    session_id: String,
    state: SessionState,
    experts: Vec<ExpertRecord>,
    submissions: Vec<Submission>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SessionDocument {
    schema_version: u32,
    session_id: String,
    state: SessionState,
    experts: Vec<ExpertRecord>,
    submissions: Vec<Submission>,
}

impl TryFrom<SessionDocument> for WorkshopSession {
    type Error = SessionError;

    fn try_from(doc: SessionDocument) -> Result<Self, Self::Error> {
        if doc.schema_version != SCHEMA_VERSION {
            return Err(SessionError::Schema(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                doc.schema_version
            )));
        }
        let session = WorkshopSession {
            schema_version: doc.schema_version,
            session_id: doc.session_id,
            state: doc.state,
            experts: doc.experts,
            submissions: doc.submissions,
        };
        session.validate()?;
        Ok(session)
    }
}

impl WorkshopSession {
    pub fn new(session_id: impl Into<String>) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            session_id: session_id.into(),
            state: SessionState::Created,
            experts: Vec::new(),
            submissions: Vec::new(),
        }
    }

    pub fn session_id(&self) -> &str {
        &self.session_id
    }

    pub fn state(&self) -> SessionState {
        self.state
    }

    pub fn experts(&self) -> &[ExpertRecord] {
        &self.experts
    }

    pub fn submissions(&self) -> &[Submission] {
        &self.submissions
    }

    pub fn expert(&self, expert_id: &str) -> Option<&ExpertRecord> {
        self.experts.iter().find(|e| e.profile.expert_id == expert_id)
    }

    pub fn register_expert(&mut self, profile: ExpertProfile) -> Result<(), SessionError> {
        match self.state {
            SessionState::Closed => return Err(SessionError::SessionClosed),
            SessionState::Created | SessionState::Round1Open => {}
            other => return Err(SessionError::RegistrationClosed(other)),
        }
        if self.expert(&profile.expert_id).is_some() {
            return Err(SessionError::DuplicateExpert(profile.expert_id));
        }
        self.experts.push(ExpertRecord { profile, alias: None });
        Ok(())
    }

    /// Stores a judgment with its fitted beta. A resubmission for the same
    /// (expert, round, arm) replaces the earlier one.
    pub fn submit(
        &mut self,
        expert_id: &str,
        round: Round,
        arm: Arm,
        triplet: ElicitedTriplet,
        submitted_at: DateTime<Utc>,
    ) -> Result<&Submission, SessionError> {
        if !self.state.accepts(round) {
            return Err(SessionError::WrongRoundState { round, state: self.state });
        }
        if self.expert(expert_id).is_none() {
            return Err(SessionError::UnknownExpert(expert_id.to_owned()));
        }
        let fitted = fit_beta_from_triplet(&triplet, CiLevel::default())?.params;
        let record = Submission {
            expert_id: expert_id.to_owned(),
            round,
            arm,
            triplet,
            fitted,
            submitted_at,
        };
        let slot = match self
            .submissions
            .iter()
            .position(|s| s.expert_id == expert_id && s.round == round && s.arm == arm)
        {
            Some(i) => {
                self.submissions[i] = record;
                i
            }
            None => {
                self.submissions.push(record);
                self.submissions.len() - 1
            }
        };
        Ok(&self.submissions[slot])
    }

    pub fn advance(&mut self) -> Result<SessionState, SessionError> {
        self.advance_with_rng(&mut rand::rng())
    }

    /// Moves to the next state. Entering the discussion fixes the random
    /// alias permutation used by every later boxplot.
    pub fn advance_with_rng<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<SessionState, SessionError> {
        let next = self.state.next().ok_or(SessionError::AlreadyClosed)?;
        if next == SessionState::Discussion {
            self.assign_aliases(rng);
        }
        self.state = next;
        Ok(next)
    }

    fn assign_aliases<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        if self.experts.iter().all(|e| e.alias.is_some()) {
            return;
        }
        let mut order: Vec<usize> = (0..self.experts.len()).collect();
        order.shuffle(rng);
        for (label, &i) in order.iter().enumerate() {
            self.experts[i].alias = Some(alias_for_index(label));
        }
    }

    pub fn boxplots(&self, round: Round, arm: Arm) -> Result<Vec<BoxplotSummary>, SessionError> {
        let available = match round {
            Round::One => self.state >= SessionState::Discussion,
            Round::Two => self.state == SessionState::Closed,
        };
        if !available {
            return Err(SessionError::BoxplotsUnavailable { round, state: self.state });
        }
        let aliases: HashMap<&str, &str> = self
            .experts
            .iter()
            .filter_map(|e| e.alias.as_deref().map(|a| (e.profile.expert_id.as_str(), a)))
            .collect();
        let mut out: Vec<BoxplotSummary> = self
            .submissions
            .iter()
            .filter(|s| s.round == round && s.arm == arm)
            .map(|s| {
                let label = aliases
                    .get(s.expert_id.as_str())
                    .and_then(|a| AliasLabel::parse(a))
                    .ok_or_else(|| SessionError::Schema(format!("expert '{}' has no alias", s.expert_id)))?;
                let p = &s.fitted;
                Ok(BoxplotSummary {
                    label,
                    whisker_low: p.quantile(0.025),
                    q25: p.quantile(0.25),
                    median: p.quantile(0.5),
                    q75: p.quantile(0.75),
                    whisker_high: p.quantile(0.975),
                })
            })
            .collect::<Result<_, SessionError>>()?;
        if out.is_empty() {
            return Err(SessionError::NoSubmissions { round, arm });
        }
        out.sort_by(|a, b| a.label.as_str().len().cmp(&b.label.as_str().len()).then(a.label.cmp(&b.label)));
        Ok(out)
    }

    /// Per-expert marginals for aggregation, in roster order. Round 2 wins;
    /// an arm missing in round 2 falls back to the expert's round-1 entry.
    /// Experts without any submission are left out.
    pub fn final_marginals(&self) -> Result<Vec<ExpertMarginals>, SessionError> {
        let lookup = |id: &str, round: Round, arm: Arm| {
            self.submissions
                .iter()
                .find(|s| s.expert_id == id && s.round == round && s.arm == arm)
                .map(|s| s.fitted)
        };
        let mut out = Vec::new();
        for e in &self.experts {
            let id = e.profile.expert_id.as_str();
            if !self.submissions.iter().any(|s| s.expert_id == id) {
                continue;
            }
            let pick = |arm: Arm| {
                lookup(id, Round::Two, arm)
                    .or_else(|| lookup(id, Round::One, arm))
                    .ok_or_else(|| SessionError::MissingSubmission {
                        expert_id: id.to_owned(),
                        arm,
                    })
            };
            out.push(ExpertMarginals {
                profile: e.profile.clone(),
                high_dose: pick(Arm::HighDose)?,
                low_dose: pick(Arm::LowDose)?,
            });
        }
        Ok(out)
    }

    pub fn export_session(&self) -> String {
        serde_json::to_string_pretty(self).expect("session is always serializable")
    }

    pub fn import_session(document: &str) -> Result<Self, SessionError> {
        serde_json::from_str(document).map_err(|e| SessionError::Schema(e.to_string()))
    }

    fn validate(&self) -> Result<(), SessionError> {
        let mut ids = HashSet::new();
        for e in &self.experts {
            if !ids.insert(e.profile.expert_id.as_str()) {
                return Err(SessionError::Schema(format!("duplicate expert '{}'", e.profile.expert_id)));
            }
        }
        let mut aliases = HashSet::new();
        for a in self.experts.iter().filter_map(|e| e.alias.as_deref()) {
            if AliasLabel::parse(a).is_none() || !aliases.insert(a) {
                return Err(SessionError::Schema(format!("bad or duplicate alias '{a}'")));
            }
        }
        let mut keys = HashSet::new();
        for s in &self.submissions {
            if !ids.contains(s.expert_id.as_str()) {
                return Err(SessionError::Schema(format!("submission from unknown expert '{}'", s.expert_id)));
            }
            if !keys.insert((s.expert_id.as_str(), s.round, s.arm)) {
                return Err(SessionError::Schema(format!(
                    "more than one round {} {} submission for '{}'",
                    s.round, s.arm, s.expert_id
                )));
            }
        }
        Ok(())
    }
}

/// Owns the sessions of one deployment and enforces unique ids.
#[derive(Debug, Default, Clone)]
pub struct SessionRegistry {
    sessions: HashMap<String, WorkshopSession>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionConfig {
    pub session_id: String,
}

impl SessionRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn create_session(&mut self, config: SessionConfig) -> Result<&mut WorkshopSession, SessionError> {
        if self.sessions.contains_key(&config.session_id) {
            return Err(SessionError::IdExists(config.session_id));
        }
        let id = config.session_id.clone();
        Ok(self
            .sessions
            .entry(id)
            .or_insert_with(|| WorkshopSession::new(config.session_id)))
    }

    pub fn insert(&mut self, session: WorkshopSession) -> Result<(), SessionError> {
        if self.sessions.contains_key(session.session_id()) {
            return Err(SessionError::IdExists(session.session_id().to_owned()));
        }
        self.sessions.insert(session.session_id().to_owned(), session);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&WorkshopSession> {
        self.sessions.get(id)
    }

    pub fn get_mut(&mut self, id: &str) -> Option<&mut WorkshopSession> {
        self.sessions.get_mut(id)
    }

    pub fn len(&self) -> usize {
        self.sessions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sessions.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn at() -> DateTime<Utc> {
        "2024-04-16T16:00:00Z".parse().unwrap()
    }

    fn triplet(l: f64, m: f64, u: f64) -> ElicitedTriplet {
        ElicitedTriplet::from_counts(l, m, u).unwrap()
    }

    fn open_session(n_experts: usize) -> WorkshopSession {
        let mut s = WorkshopSession::new("w1");
        for i in 0..n_experts {
            s.register_expert(ExpertProfile::bare(format!("e{i}"))).unwrap();
        }
        s.advance().unwrap();
        s
    }

    #[test]
    fn create_and_duplicate() {
        let mut reg = SessionRegistry::new();
        let s = reg.create_session(SessionConfig { session_id: "w1".into() }).unwrap();
        assert_eq!(s.state(), SessionState::Created);
        assert!(s.experts().is_empty() && s.submissions().is_empty());
        assert_eq!(
            reg.create_session(SessionConfig { session_id: "w1".into() }).unwrap_err(),
            SessionError::IdExists("w1".into())
        );
    }

    #[test]
    fn state_order() {
        let mut s = WorkshopSession::new("w");
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let seen: Vec<_> = (0..4).map(|_| s.advance_with_rng(&mut rng).unwrap()).collect();
        assert_eq!(
            seen,
            [
                SessionState::Round1Open,
                SessionState::Discussion,
                SessionState::Round2Open,
                SessionState::Closed
            ]
        );
        assert_eq!(s.advance_with_rng(&mut rng), Err(SessionError::AlreadyClosed));
    }

    #[test]
    fn registration_rules() {
        let mut s = WorkshopSession::new("w");
        for i in 0..12 {
            s.register_expert(ExpertProfile::bare(format!("e{i}"))).unwrap();
        }
        assert_eq!(s.experts().len(), 12);
        assert_eq!(
            s.register_expert(ExpertProfile::bare("e3")),
            Err(SessionError::DuplicateExpert("e3".into()))
        );
        s.advance().unwrap();
        s.register_expert(ExpertProfile::bare("late")).unwrap();
        s.advance().unwrap();
        assert!(matches!(
            s.register_expert(ExpertProfile::bare("later")),
            Err(SessionError::RegistrationClosed(SessionState::Discussion))
        ));
        s.advance().unwrap();
        s.advance().unwrap();
        assert_eq!(s.register_expert(ExpertProfile::bare("x")), Err(SessionError::SessionClosed));
    }

    #[test]
    fn submission_rules() {
        let mut s = open_session(2);
        assert!(matches!(
            s.submit("e0", Round::Two, Arm::HighDose, triplet(1.0, 7.0, 40.0), at()),
            Err(SessionError::WrongRoundState { .. })
        ));
        assert!(matches!(
            s.submit("nobody", Round::One, Arm::HighDose, triplet(1.0, 7.0, 40.0), at()),
            Err(SessionError::UnknownExpert(_))
        ));
        let stored = s
            .submit("e0", Round::One, Arm::HighDose, triplet(1.0, 7.0, 40.0), at())
            .unwrap()
            .clone();
        let expected = fit_beta_from_triplet(&triplet(1.0, 7.0, 40.0), CiLevel::default()).unwrap();
        assert_eq!(stored.fitted, expected.params);

        s.submit("e0", Round::One, Arm::HighDose, triplet(2.0, 8.0, 30.0), at()).unwrap();
        assert_eq!(s.submissions().len(), 1);
        assert_eq!(s.submissions()[0].triplet.mode(), 0.08);

        // an unfittable triplet surfaces as InvalidTriplet
        let wide = ElicitedTriplet::new(0.0, 0.5, 1.0).unwrap();
        assert!(matches!(
            s.submit("e1", Round::One, Arm::LowDose, wide, at()),
            Err(SessionError::InvalidTriplet(_))
        ));
    }

    #[test]
    fn boxplots_need_discussion_and_use_aliases() {
        let mut s = open_session(3);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        s.submit("e0", Round::One, Arm::HighDose, triplet(20.0, 50.0, 80.0), at()).unwrap();
        s.submit("e2", Round::One, Arm::HighDose, triplet(1.0, 7.0, 40.0), at()).unwrap();
        assert!(matches!(
            s.boxplots(Round::One, Arm::HighDose),
            Err(SessionError::BoxplotsUnavailable { .. })
        ));
        s.advance_with_rng(&mut rng).unwrap();
        let boxes = s.boxplots(Round::One, Arm::HighDose).unwrap();
        assert_eq!(boxes.len(), 2);
        assert!(boxes.windows(2).all(|w| w[0].label < w[1].label));
        let json = serde_json::to_string(&boxes).unwrap();
        assert!(!json.contains("e0") && !json.contains("e2"));
        assert!(matches!(
            s.boxplots(Round::One, Arm::LowDose),
            Err(SessionError::NoSubmissions { .. })
        ));

        let alias_before = s.expert("e2").unwrap().alias.clone();
        s.advance_with_rng(&mut rng).unwrap();
        s.submit("e2", Round::Two, Arm::HighDose, triplet(2.0, 6.0, 20.0), at()).unwrap();
        assert!(s.boxplots(Round::Two, Arm::HighDose).is_err());
        s.advance_with_rng(&mut rng).unwrap();
        let r2 = s.boxplots(Round::Two, Arm::HighDose).unwrap();
        assert_eq!(r2.len(), 1);
        assert_eq!(Some(r2[0].label.to_string()), alias_before);
    }

    #[test]
    fn uniform_boxplot() {
        // build a session by hand so the stored fit is exactly Beta(1, 1)
        let mut s = open_session(1);
        s.submit("e0", Round::One, Arm::HighDose, triplet(20.0, 50.0, 80.0), at()).unwrap();
        s.submissions[0].fitted = BetaParams::new(1.0, 1.0).unwrap();
        s.advance().unwrap();
        let b = s.boxplots(Round::One, Arm::HighDose).unwrap()[0];
        assert_eq!(b.label.as_str(), "A");
        for (got, want) in [
            (b.whisker_low, 0.025),
            (b.q25, 0.25),
            (b.median, 0.5),
            (b.q75, 0.75),
            (b.whisker_high, 0.975),
        ] {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn alias_labels() {
        assert_eq!(alias_for_index(0), "A");
        assert_eq!(alias_for_index(11), "L");
        assert_eq!(alias_for_index(25), "Z");
        assert_eq!(alias_for_index(26), "AA");
        assert_eq!(alias_for_index(27), "AB");
        assert_eq!(alias_for_index(26 + 26 * 26), "AAA");
    }

    #[test]
    fn round_two_falls_back_to_round_one() {
        let mut s = open_session(2);
        for id in ["e0", "e1"] {
            s.submit(id, Round::One, Arm::HighDose, triplet(2.0, 6.0, 20.0), at()).unwrap();
            s.submit(id, Round::One, Arm::LowDose, triplet(3.0, 9.0, 25.0), at()).unwrap();
        }
        s.advance().unwrap();
        s.advance().unwrap();
        s.submit("e0", Round::Two, Arm::LowDose, triplet(4.0, 10.0, 22.0), at()).unwrap();
        let m = s.final_marginals().unwrap();
        assert_eq!(m.len(), 2);
        let r1_high = s.submissions()[0].fitted;
        assert_eq!(m[0].high_dose, r1_high);
        assert_eq!(m[0].low_dose, s.submissions().last().unwrap().fitted);
    }

    #[test]
    fn document_round_trip_and_schema_errors() {
        let empty = WorkshopSession::new("empty");
        assert_eq!(WorkshopSession::import_session(&empty.export_session()).unwrap(), empty);

        let mut s = open_session(3);
        s.submit("e1", Round::One, Arm::LowDose, triplet(1.0, 7.0, 40.0), at()).unwrap();
        s.advance().unwrap();
        let doc = s.export_session();
        let value: serde_json::Value = serde_json::from_str(&doc).unwrap();
        let keys: Vec<_> = value.as_object().unwrap().keys().cloned().collect();
        assert_eq!(keys.len(), 5);
        for k in ["schema_version", "session_id", "state", "experts", "submissions"] {
            assert!(keys.iter().any(|x| x == k));
        }
        assert_eq!(WorkshopSession::import_session(&doc).unwrap(), s);

        assert!(matches!(WorkshopSession::import_session("{"), Err(SessionError::Schema(_))));
        let wrong_version = doc.replace("\"schema_version\": 1", "\"schema_version\": 99");
        assert!(matches!(WorkshopSession::import_session(&wrong_version), Err(SessionError::Schema(_))));
        let bad_state = doc.replace("\"DISCUSSION\"", "\"LUNCH\"");
        assert!(matches!(WorkshopSession::import_session(&bad_state), Err(SessionError::Schema(_))));
    }
}
