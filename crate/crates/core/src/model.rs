//! Shared domain types: interview transcripts, trait profiles, roster
//! participants, game specifications and trial records.
//!
//! Every type here is immutable once built and serializes to one JSON object
//! per line, with field names matching the struct fields.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance on the sum of a categorical distribution.
pub const NORMALIZATION_TOLERANCE: f64 = 1e-9;

/// Name of the trait that carries political affiliation.
pub const PARTY_TRAIT: &str = "party";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("game spec violates {0}")]
    SpecViolation(&'static str),
    #[error("empty {0} in question/answer pair")]
    EmptyQaField(&'static str),
    #[error("trait `{trait_name}`: {reason}")]
    InvalidDistribution { trait_name: String, reason: String },
    #[error("participant `{id}`: {reason}")]
    InvalidParticipant { id: String, reason: String },
    #[error("unknown {kind} `{value}`")]
    UnknownLabel { kind: &'static str, value: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Party {
    Democrat,
    Republican,
}

impl Party {
    pub const BOTH: [Party; 2] = [Party::Democrat, Party::Republican];

    pub fn label(self) -> &'static str {
        match self {
            Party::Democrat => "Democrat",
            Party::Republican => "Republican",
        }
    }

    pub fn other(self) -> Party {
        match self {
            Party::Democrat => Party::Republican,
            Party::Republican => Party::Democrat,
        }
    }
}

impl fmt::Display for Party {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Party {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "democrat" | "democratic" | "dem" | "d" => Ok(Party::Democrat),
            "republican" | "rep" | "r" => Ok(Party::Republican),
            _ => Err(ModelError::UnknownLabel {
                kind: "party",
                value: s.to_string(),
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Game {
    #[serde(alias = "dictator")]
    Dictator,
    #[serde(alias = "trust")]
    Trust,
}

impl FromStr for Game {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "dictator" => Ok(Game::Dictator),
            "trust" => Ok(Game::Trust),
            _ => Err(ModelError::UnknownLabel {
                kind: "game",
                value: s.to_string(),
            }),
        }
    }
}

/// Instruction wording of one of the four source studies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Framing {
    /// Dictator game, pairs-of-individuals wording (2014 study).
    ID,
    /// Dictator game, "in this task you have $10" wording (2019 study).
    WD,
    /// Trust game with raffle tickets (2015 study).
    CT,
    /// Trust game in dollars (2019 study).
    WT,
}

impl Framing {
    pub const ALL: [Framing; 4] = [Framing::ID, Framing::WD, Framing::CT, Framing::WT];

    pub fn game(self) -> Game {
        match self {
            Framing::ID | Framing::WD => Game::Dictator,
            Framing::CT | Framing::WT => Game::Trust,
        }
    }

    /// Calendar year in which the source study ran.
    pub fn study_year(self) -> i32 {
        match self {
            Framing::ID => 2014,
            Framing::CT => 2015,
            Framing::WD | Framing::WT => 2019,
        }
    }

    pub fn unit(self) -> Unit {
        match self {
            Framing::CT => Unit::RaffleTickets,
            _ => Unit::Dollars,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Framing::ID => "ID",
            Framing::WD => "WD",
            Framing::CT => "CT",
            Framing::WT => "WT",
        }
    }
}

impl fmt::Display for Framing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Framing {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "ID" => Ok(Framing::ID),
            "WD" => Ok(Framing::WD),
            "CT" => Ok(Framing::CT),
            "WT" => Ok(Framing::WT),
            _ => Err(ModelError::UnknownLabel {
                kind: "framing",
                value: s.to_string(),
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Unit {
    Dollars,
    RaffleTickets,
}

/// How a persona is presented to the model before the study instructions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    QA,
    Bio,
    Portray,
    DeepBind,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::QA, Method::Bio, Method::Portray, Method::DeepBind];
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Method::QA => "QA",
            Method::Bio => "Bio",
            Method::Portray => "Portray",
            Method::DeepBind => "DeepBind",
        };
        f.write_str(s)
    }
}

impl FromStr for Method {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "qa" => Ok(Method::QA),
            "bio" => Ok(Method::Bio),
            "portray" => Ok(Method::Portray),
            "deepbind" | "deep_bind" | "deep-bind" => Ok(Method::DeepBind),
            _ => Err(ModelError::UnknownLabel {
                kind: "method",
                value: s.to_string(),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawQaPair")]
pub struct QAPair {
    pub question: String,
    pub answer: String,
}

#[derive(Deserialize)]
struct RawQaPair {
    question: String,
    answer: String,
}

impl TryFrom<RawQaPair> for QAPair {
    type Error = ModelError;

    fn try_from(raw: RawQaPair) -> Result<Self, Self::Error> {
        QAPair::new(raw.question, raw.answer)
    }
}

impl QAPair {
    pub fn new(question: impl Into<String>, answer: impl Into<String>) -> Result<Self, ModelError> {
        let question = question.into();
        let answer = answer.into();
        if question.trim().is_empty() {
            return Err(ModelError::EmptyQaField("question"));
        }
        if answer.trim().is_empty() {
            return Err(ModelError::EmptyQaField("answer"));
        }
        Ok(Self { question, answer })
    }
}

/// An interview transcript that constitutes one persona.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Backstory {
    pub persona_id: String,
    pub qa_pairs: Vec<QAPair>,
    pub generator_tag: String,
    /// Sampling attempts spent on each question, in question order.
    pub attempts_used: Vec<u32>,
}

/// A categorical distribution over one trait's labels.
pub type Distribution = Vec<(String, f64)>;

/// Per-trait categorical distributions for one persona.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTraitProfile")]
pub struct TraitProfile {
    pub persona_id: String,
    pub traits: BTreeMap<String, Distribution>,
}

#[derive(Deserialize)]
struct RawTraitProfile {
    persona_id: String,
    traits: BTreeMap<String, Distribution>,
}

impl TryFrom<RawTraitProfile> for TraitProfile {
    type Error = ModelError;

    fn try_from(raw: RawTraitProfile) -> Result<Self, Self::Error> {
        TraitProfile::new(raw.persona_id, raw.traits)
    }
}

pub fn validate_distribution(trait_name: &str, dist: &Distribution) -> Result<(), ModelError> {
    let bad = |reason: String| ModelError::InvalidDistribution {
        trait_name: trait_name.to_string(),
        reason,
    };
    if dist.is_empty() {
        return Err(bad("no categories".into()));
    }
    let mut seen = BTreeSet::new();
    let mut total = 0.0;
    for (label, p) in dist {
        if !seen.insert(label.as_str()) {
            return Err(bad(format!("duplicate label `{label}`")));
        }
        if !p.is_finite() || *p < 0.0 || *p > 1.0 {
            return Err(bad(format!("probability {p} for `{label}` outside [0,1]")));
        }
        total += p;
    }
    if (total - 1.0).abs() > NORMALIZATION_TOLERANCE {
        return Err(bad(format!("probabilities sum to {total}")));
    }
    Ok(())
}

impl TraitProfile {
    pub fn new(
        persona_id: impl Into<String>,
        traits: BTreeMap<String, Distribution>,
    ) -> Result<Self, ModelError> {
        for (name, dist) in &traits {
            validate_distribution(name, dist)?;
        }
        Ok(Self {
            persona_id: persona_id.into(),
            traits,
        })
    }

    /// Probability mass the persona places on `label` for `trait_name`.
    /// `None` when the trait is absent; zero when the label is absent.
    pub fn mass(&self, trait_name: &str, label: &str) -> Option<f64> {
        let dist = self.traits.get(trait_name)?;
        Some(
            dist.iter()
                .find(|(l, _)| l == label)
                .map(|(_, p)| *p)
                .unwrap_or(0.0),
        )
    }

    /// Most probable label; ties go to the earliest listed label.
    pub fn top_label(&self, trait_name: &str) -> Option<&str> {
        let dist = self.traits.get(trait_name)?;
        let mut best: Option<&(String, f64)> = None;
        for entry in dist {
            if best.is_none_or(|b| entry.1 > b.1) {
                best = Some(entry);
            }
        }
        best.map(|(l, _)| l.as_str())
    }
}

/// One human study participant from a roster.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HumanParticipant {
    pub id: String,
    pub traits: BTreeMap<String, String>,
    pub party: Party,
    pub pool: String,
}

impl HumanParticipant {
    /// Checks trait names against `schema_traits` and the party field
    /// against the party trait.
    pub fn validate<'a>(
        &self,
        schema_traits: impl IntoIterator<Item = &'a str>,
    ) -> Result<(), ModelError> {
        let known: BTreeSet<&str> = schema_traits.into_iter().collect();
        for name in self.traits.keys() {
            if !known.contains(name.as_str()) {
                return Err(ModelError::InvalidParticipant {
                    id: self.id.clone(),
                    reason: format!("trait `{name}` not in schema"),
                });
            }
        }
        if let Some(label) = self.traits.get(PARTY_TRAIT) {
            if label != self.party.label() {
                return Err(ModelError::InvalidParticipant {
                    id: self.id.clone(),
                    reason: format!("party trait `{label}` disagrees with party {}", self.party),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GameSpec {
    pub game: Game,
    pub framing: Framing,
    pub year: Option<i32>,
    pub endowment: u32,
    pub multiplier: u32,
    pub unit: Unit,
}

impl GameSpec {
    /// Spec reproducing one source study's design: its framing, year, and
    /// the 10-unit endowment.
    pub fn for_study(framing: Framing) -> Self {
        Self::with_year(framing, Some(framing.study_year()))
    }

    pub fn with_year(framing: Framing, year: Option<i32>) -> Self {
        let game = framing.game();
        Self {
            game,
            framing,
            year,
            endowment: 10,
            multiplier: if game == Game::Trust { 3 } else { 1 },
            unit: framing.unit(),
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        validate_game_spec(self)
    }
}

pub fn validate_game_spec(spec: &GameSpec) -> Result<(), ModelError> {
    if spec.framing.game() != spec.game {
        return Err(ModelError::SpecViolation("framing"));
    }
    if (spec.multiplier == 3) != (spec.game == Game::Trust) {
        return Err(ModelError::SpecViolation("multiplier"));
    }
    if spec.game == Game::Dictator && spec.multiplier != 1 {
        return Err(ModelError::SpecViolation("multiplier"));
    }
    if (spec.unit == Unit::RaffleTickets) != (spec.framing == Framing::CT) {
        return Err(ModelError::SpecViolation("unit"));
    }
    if spec.endowment == 0 {
        return Err(ModelError::SpecViolation("endowment"));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub attempt: u32,
    pub accept: bool,
    pub reason: String,
}

/// One persona's decision under one condition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial_id: String,
    pub persona_id: String,
    /// Roster id of the human the persona stands in for, when matched.
    #[serde(default)]
    pub participant_id: Option<String>,
    pub method: Method,
    pub game_spec: GameSpec,
    pub self_party: Party,
    pub partner_party: Party,
    pub pool: String,
    pub raw_text: String,
    pub amount: u32,
    pub filter_audit: Vec<AuditEntry>,
    pub seed: u64,
}

impl TrialRecord {
    pub fn is_copartisan(&self) -> bool {
        self.self_party == self.partner_party
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub temperature: f64,
    pub max_tokens: u32,
    pub stop_sequences: Vec<String>,
    pub seed: u64,
}

impl GenerationParams {
    pub const GENERATION_TEMPERATURE: f64 = 1.0;
    pub const CRITIC_TEMPERATURE: f64 = 0.0;

    /// Sampling settings for persona and game text.
    pub fn generation(seed: u64) -> Self {
        Self {
            temperature: Self::GENERATION_TEMPERATURE,
            max_tokens: 512,
            stop_sequences: Vec::new(),
            seed,
        }
    }

    /// Deterministic decoding for critics and extractors.
    pub fn critic(seed: u64) -> Self {
        Self {
            temperature: Self::CRITIC_TEMPERATURE,
            max_tokens: 128,
            stop_sequences: Vec::new(),
            seed,
        }
    }

    pub fn with_stops<I, S>(mut self, stops: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.stop_sequences = stops.into_iter().map(Into::into).collect();
        self
    }

    pub fn with_max_tokens(mut self, max_tokens: u32) -> Self {
        self.max_tokens = max_tokens;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn is_valid(&self) -> bool {
        self.temperature.is_finite() && self.temperature >= 0.0 && self.max_tokens > 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn whitt_dictator_spec_is_valid() {
        let spec = GameSpec {
            game: Game::Dictator,
            framing: Framing::WD,
            year: Some(2019),
            endowment: 10,
            multiplier: 1,
            unit: Unit::Dollars,
        };
        assert_eq!(validate_game_spec(&spec), Ok(()));
        assert_eq!(spec, GameSpec::for_study(Framing::WD));
    }

    #[test]
    fn dictator_with_tripling_is_rejected() {
        let spec = GameSpec {
            multiplier: 3,
            ..GameSpec::for_study(Framing::WD)
        };
        assert_eq!(
            validate_game_spec(&spec),
            Err(ModelError::SpecViolation("multiplier"))
        );
    }

    #[test]
    fn raffle_ticket_trust_spec_is_valid() {
        let spec = GameSpec {
            game: Game::Trust,
            framing: Framing::CT,
            year: Some(2015),
            endowment: 10,
            multiplier: 3,
            unit: Unit::RaffleTickets,
        };
        assert_eq!(validate_game_spec(&spec), Ok(()));
    }

    #[test]
    fn framing_game_and_unit_mismatches() {
        let mut spec = GameSpec::for_study(Framing::CT);
        spec.framing = Framing::ID;
        assert_eq!(validate_game_spec(&spec), Err(ModelError::SpecViolation("framing")));

        let mut spec = GameSpec::for_study(Framing::WT);
        spec.unit = Unit::RaffleTickets;
        assert_eq!(validate_game_spec(&spec), Err(ModelError::SpecViolation("unit")));

        let mut spec = GameSpec::for_study(Framing::CT);
        spec.unit = Unit::Dollars;
        assert_eq!(validate_game_spec(&spec), Err(ModelError::SpecViolation("unit")));

        let mut spec = GameSpec::for_study(Framing::WT);
        spec.multiplier = 1;
        assert_eq!(
            validate_game_spec(&spec),
            Err(ModelError::SpecViolation("multiplier"))
        );
    }

    #[test]
    fn qa_pair_rejects_blank_fields() {
        assert!(QAPair::new("", "x").is_err());
        assert!(QAPair::new("q", "  ").is_err());
        let err = serde_json::from_str::<QAPair>(r#"{"question":"q","answer":""}"#);
        assert!(err.is_err());
    }

    #[test]
    fn profile_rejects_unnormalized_input_on_decode() {
        let json = r#"{"persona_id":"p","traits":{"party":[["Democrat",0.6],["Republican",0.6]]}}"#;
        assert!(serde_json::from_str::<TraitProfile>(json).is_err());
        let json = r#"{"persona_id":"p","traits":{"party":[["Democrat",0.5],["Democrat",0.5]]}}"#;
        assert!(serde_json::from_str::<TraitProfile>(json).is_err());
    }

    #[test]
    fn top_label_prefers_first_on_ties() {
        let mut traits = BTreeMap::new();
        traits.insert(
            "party".to_string(),
            vec![("Democrat".into(), 0.5), ("Republican".into(), 0.5)],
        );
        let p = TraitProfile::new("p", traits).unwrap();
        assert_eq!(p.top_label("party"), Some("Democrat"));
        assert_eq!(p.mass("party", "Independent/Other"), Some(0.0));
        assert_eq!(p.mass("gender", "Female"), None);
    }

    #[test]
    fn participant_party_must_agree() {
        let mut traits = BTreeMap::new();
        traits.insert("party".to_string(), "Republican".to_string());
        let h = HumanParticipant {
            id: "h1".into(),
            traits,
            party: Party::Democrat,
            pool: "MTurk".into(),
        };
        assert!(h.validate(["party"]).is_err());
        assert!(HumanParticipant { party: Party::Republican, ..h.clone() }
            .validate(["party"])
            .is_ok());
        assert!(h.validate(["gender"]).is_err());
    }

    fn arb_distribution() -> impl Strategy<Value = Distribution> {
        prop::collection::vec(0u32..20, 1..6).prop_filter_map("all zero", |weights| {
            let total: u32 = weights.iter().sum();
            (total > 0).then(|| {
                weights
                    .iter()
                    .enumerate()
                    .map(|(i, w)| (format!("c{i}"), f64::from(*w) / f64::from(total)))
                    .collect()
            })
        })
    }

    fn arb_spec() -> impl Strategy<Value = GameSpec> {
        (0usize..4, prop::option::of(1990i32..2030))
            .prop_map(|(f, year)| GameSpec::with_year(Framing::ALL[f], year))
    }

    proptest! {
        #[test]
        fn profile_round_trips(dists in prop::collection::btree_map("[a-z]{1,8}", arb_distribution(), 0..6)) {
            let profile = TraitProfile::new("persona", dists).unwrap();
            let line = serde_json::to_string(&profile).unwrap();
            let back: TraitProfile = serde_json::from_str(&line).unwrap();
            prop_assert_eq!(back, profile);
        }

        #[test]
        fn trial_record_round_trips(spec in arb_spec(), amount in 0u32..=10, seed in any::<u64>(), dem in any::<bool>(), co in any::<bool>()) {
            let self_party = if dem { Party::Democrat } else { Party::Republican };
            let rec = TrialRecord {
                trial_id: "01H0000000000000000000000".into(),
                persona_id: "p".into(),
                participant_id: Some("h".into()),
                method: Method::DeepBind,
                game_spec: spec,
                self_party,
                partner_party: if co { self_party } else { self_party.other() },
                pool: "WD".into(),
                raw_text: format!(" I would send ${amount}."),
                amount,
                filter_audit: vec![AuditEntry { attempt: 0, accept: true, reason: "ok".into() }],
                seed,
            };
            prop_assert!(spec.validate().is_ok());
            let back: TrialRecord = serde_json::from_str(&serde_json::to_string(&rec).unwrap()).unwrap();
            prop_assert_eq!(back, rec);
        }
    }
}
