//! Two-stage trait survey over persona backstories.
//!
//! Stage one asks an extractor whether the transcript states a trait
//! outright; a hit becomes a one-hot distribution. Otherwise stage two elicits
//! a 0–10 rating per category and normalizes the ratings into a distribution.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{self, Backend, GatewayError};
use crate::model::{Backstory, Distribution, GenerationParams, TraitProfile, PARTY_TRAIT};
use crate::persona::{render_transcript, DEFAULT_PREAMBLE};

pub const EXTRACTOR_HEADER: &str = "Read the interview transcript below and answer a survey item about the person interviewed.";
pub const EXPLICIT_CUE: &str = "Explicit answer:";
pub const RATING_CUE: &str = "Ratings:";
pub const NO_EVIDENCE: &str = "NONE";
pub const MAX_RATING: u32 = 10;

pub const PARTY_LABELS: [&str; 3] = ["Democrat", "Republican", "Independent/Other"];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SurveyError {
    #[error("trait `{0}` is not in the schema")]
    UnknownTrait(String),
    #[error("trait `{trait_name}`: unparseable extractor output {output:?}")]
    UnparseableVerdict { trait_name: String, output: String },
    #[error("trait `{0}`: every category was rated 0")]
    DegenerateDistribution(String),
    #[error("trait `{trait_name}`: {source}")]
    Gateway {
        trait_name: String,
        #[source]
        source: GatewayError,
    },
    #[error("invalid schema: {0}")]
    InvalidSchema(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraitDef {
    pub name: String,
    pub labels: Vec<String>,
    /// Survey wording; derived from the name when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question: Option<String>,
}

impl TraitDef {
    pub fn new(name: &str, labels: &[&str]) -> Self {
        Self {
            name: name.to_string(),
            labels: labels.iter().map(|l| l.to_string()).collect(),
            question: None,
        }
    }

    pub fn survey_question(&self) -> String {
        if let Some(q) = &self.question {
            return q.clone();
        }
        match self.name.as_str() {
            "age_bracket" | "age" => "How old is this person?".into(),
            "gender" => "What is this person's gender?".into(),
            "race" => "What is this person's race or ethnicity?".into(),
            "education" => "What is the highest level of education this person has completed?".into(),
            "income_bracket" | "income" => "What is this person's annual household income?".into(),
            PARTY_TRAIT => "Which political party does this person identify with?".into(),
            other => format!("What is this person's {}?", other.replace('_', " ")),
        }
    }

    /// Schema label equal to `raw` ignoring case and surrounding punctuation.
    pub fn canonical_label(&self, raw: &str) -> Option<&str> {
        let cleaned = raw
            .trim()
            .trim_matches(|c: char| matches!(c, '.' | '"' | '\'' | '*' | '`'))
            .trim();
        self.labels
            .iter()
            .find(|l| l.eq_ignore_ascii_case(cleaned))
            .map(String::as_str)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraitSchema {
    pub traits: Vec<TraitDef>,
}

impl TraitSchema {
    pub fn new(traits: Vec<TraitDef>) -> Result<Self, SurveyError> {
        let schema = Self { traits };
        schema.validate()?;
        Ok(schema)
    }

    pub fn validate(&self) -> Result<(), SurveyError> {
        let mut names = BTreeSet::new();
        for def in &self.traits {
            if !names.insert(def.name.as_str()) {
                return Err(SurveyError::InvalidSchema(format!("duplicate trait `{}`", def.name)));
            }
            if def.labels.is_empty() {
                return Err(SurveyError::InvalidSchema(format!("trait `{}` has no categories", def.name)));
            }
            let mut seen = BTreeSet::new();
            for label in &def.labels {
                if label.trim().is_empty() || !seen.insert(label.to_ascii_lowercase()) {
                    return Err(SurveyError::InvalidSchema(format!(
                        "trait `{}` has a blank or duplicate label `{label}`",
                        def.name
                    )));
                }
            }
            if def.name == PARTY_TRAIT && def.labels != PARTY_LABELS {
                return Err(SurveyError::InvalidSchema(format!(
                    "party trait must have labels {PARTY_LABELS:?}"
                )));
            }
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&TraitDef> {
        self.traits.iter().find(|t| t.name == name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.traits.iter().map(|t| t.name.as_str())
    }

    pub fn len(&self) -> usize {
        self.traits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.traits.is_empty()
    }

    /// Reads a TOML schema with one `[[traits]]` table per trait.
    pub fn load(path: &Path) -> Result<Self, SurveyError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SurveyError::InvalidSchema(format!("{}: {e}", path.display())))?;
        let schema: TraitSchema = toml::from_str(&text)
            .map_err(|e| SurveyError::InvalidSchema(format!("{}: {e}", path.display())))?;
        schema.validate()?;
        Ok(schema)
    }
}

impl Default for TraitSchema {
    /// Age, gender, race, education, income and party.
    fn default() -> Self {
        Self {
            traits: vec![
                TraitDef::new("age_bracket", &["18-29", "30-44", "45-64", "65+"]),
                TraitDef::new("gender", &["Male", "Female"]),
                TraitDef::new("race", &["White", "Black", "Hispanic", "Asian", "Other"]),
                TraitDef::new(
                    "education",
                    &["High school or less", "Some college", "Bachelor's degree", "Graduate degree"],
                ),
                TraitDef::new(
                    "income_bracket",
                    &["Under $30k", "$30k-$60k", "$60k-$100k", "$100k-$150k", "Over $150k"],
                ),
                TraitDef::new(PARTY_TRAIT, &PARTY_LABELS),
            ],
        }
    }
}

/// Maps an age in years to its bracket label.
pub fn age_bracket(age: u32) -> &'static str {
    match age {
        0..=29 => "18-29",
        30..=44 => "30-44",
        45..=64 => "45-64",
        _ => "65+",
    }
}

fn options_line(def: &TraitDef) -> String {
    def.labels.join("; ")
}

pub fn explicit_prompt(transcript: &str, def: &TraitDef) -> String {
    format!(
        "{EXTRACTOR_HEADER}\n\n{transcript}\nSurvey item: {}\nOptions: {}\n\
         If the person clearly states the answer in their own words, reply with exactly one option. \
         If there is no clear verbal evidence, reply {NO_EVIDENCE}.\n{EXPLICIT_CUE}",
        def.survey_question(),
        options_line(def)
    )
}

pub fn rating_prompt(transcript: &str, def: &TraitDef) -> String {
    format!(
        "{EXTRACTOR_HEADER}\n\n{transcript}\nSurvey item: {}\nOptions: {}\n\
         For each option, rate from 0 to {MAX_RATING} how likely it describes the person. \
         Reply with one \"option: rating\" line per option.\n{RATING_CUE}",
        def.survey_question(),
        options_line(def)
    )
}

pub fn parse_explicit(def: &TraitDef, output: &str) -> Result<Option<String>, SurveyError> {
    let line = output.lines().map(str::trim).find(|l| !l.is_empty()).unwrap_or("");
    let bare = line.trim_end_matches('.').trim();
    if bare.eq_ignore_ascii_case(NO_EVIDENCE) {
        return Ok(None);
    }
    def.canonical_label(line)
        .map(|l| Some(l.to_string()))
        .ok_or_else(|| SurveyError::UnparseableVerdict {
            trait_name: def.name.clone(),
            output: output.to_string(),
        })
}

/// Parses `label: rating` lines; every label must appear exactly once.
pub fn parse_ratings(def: &TraitDef, output: &str) -> Result<Vec<u32>, SurveyError> {
    let unparseable = || SurveyError::UnparseableVerdict {
        trait_name: def.name.clone(),
        output: output.to_string(),
    };
    let mut ratings: Vec<Option<u32>> = vec![None; def.labels.len()];
    for line in output.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let (label, value) = line.rsplit_once(':').ok_or_else(unparseable)?;
        let label = def.canonical_label(label).ok_or_else(unparseable)?;
        let idx = def.labels.iter().position(|l| l == label).expect("canonical label is in schema");
        let value: u32 = value.trim().parse().map_err(|_| unparseable())?;
        if value > MAX_RATING || ratings[idx].is_some() {
            return Err(unparseable());
        }
        ratings[idx] = Some(value);
    }
    ratings.into_iter().collect::<Option<Vec<_>>>().ok_or_else(unparseable)
}

fn lookup<'a>(schema: &'a TraitSchema, trait_name: &str) -> Result<&'a TraitDef, SurveyError> {
    schema
        .get(trait_name)
        .ok_or_else(|| SurveyError::UnknownTrait(trait_name.to_string()))
}

fn extractor_params() -> GenerationParams {
    GenerationParams::critic(0).with_max_tokens(64)
}

fn ask(extractor: &dyn Backend, prompt: &str, trait_name: &str) -> Result<String, SurveyError> {
    gateway::complete(extractor, prompt, &extractor_params())
        .map(|c| c.text)
        .map_err(|source| SurveyError::Gateway {
            trait_name: trait_name.to_string(),
            source,
        })
}

pub fn transcript_of(backstory: &Backstory) -> String {
    render_transcript(DEFAULT_PREAMBLE, &backstory.qa_pairs)
}

/// Stage one: a label when the transcript states the trait outright.
pub fn extract_explicit_trait(
    backstory: &Backstory,
    trait_name: &str,
    schema: &TraitSchema,
    extractor: &dyn Backend,
) -> Result<Option<String>, SurveyError> {
    let def = lookup(schema, trait_name)?;
    let output = ask(extractor, &explicit_prompt(&transcript_of(backstory), def), trait_name)?;
    parse_explicit(def, &output)
}

/// Stage two: normalized ratings over the trait's labels.
pub fn infer_trait_distribution(
    backstory: &Backstory,
    trait_name: &str,
    schema: &TraitSchema,
    extractor: &dyn Backend,
) -> Result<Distribution, SurveyError> {
    let def = lookup(schema, trait_name)?;
    if def.labels.len() == 1 {
        return Ok(vec![(def.labels[0].clone(), 1.0)]);
    }
    let output = ask(extractor, &rating_prompt(&transcript_of(backstory), def), trait_name)?;
    let ratings = parse_ratings(def, &output)?;
    normalize_ratings(def, &ratings)
}

pub fn normalize_ratings(def: &TraitDef, ratings: &[u32]) -> Result<Distribution, SurveyError> {
    let total: u32 = ratings.iter().sum();
    if total == 0 {
        return Err(SurveyError::DegenerateDistribution(def.name.clone()));
    }
    Ok(def
        .labels
        .iter()
        .zip(ratings)
        .map(|(l, &r)| (l.clone(), f64::from(r) / f64::from(total)))
        .collect())
}

pub fn one_hot(def: &TraitDef, label: &str) -> Distribution {
    def.labels
        .iter()
        .map(|l| (l.clone(), if l == label { 1.0 } else { 0.0 }))
        .collect()
}

/// Surveys every schema trait: explicit one-hot where stated, inferred otherwise.
pub fn survey_persona(
    backstory: &Backstory,
    schema: &TraitSchema,
    extractor: &dyn Backend,
) -> Result<TraitProfile, SurveyError> {
    let mut traits = BTreeMap::new();
    for def in &schema.traits {
        let dist = if def.labels.len() == 1 {
            one_hot(def, &def.labels[0])
        } else {
            match extract_explicit_trait(backstory, &def.name, schema, extractor)? {
                Some(label) => one_hot(def, &label),
                None => infer_trait_distribution(backstory, &def.name, schema, extractor)?,
            }
        };
        traits.insert(def.name.clone(), dist);
    }
    TraitProfile::new(backstory.persona_id.clone(), traits).map_err(|e| {
        SurveyError::InvalidSchema(e.to_string())
    })
}

pub fn survey_population(
    backstories: &[Backstory],
    schema: &TraitSchema,
    extractor: &dyn Backend,
) -> Result<Vec<TraitProfile>, (String, SurveyError)> {
    backstories
        .par_iter()
        .map(|b| survey_persona(b, schema, extractor).map_err(|e| (b.persona_id.clone(), e)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{CountingBackend, ScriptedBackend};
    use crate::model::{QAPair, NORMALIZATION_TOLERANCE};
    use proptest::prelude::*;

    fn backstory(answer: &str) -> Backstory {
        Backstory {
            persona_id: "p1".into(),
            qa_pairs: vec![QAPair::new("How would you describe your political views?", answer).unwrap()],
            generator_tag: "test".into(),
            attempts_used: vec![1],
        }
    }

    fn party_only() -> TraitSchema {
        TraitSchema::new(vec![TraitDef::new(PARTY_TRAIT, &PARTY_LABELS)]).unwrap()
    }

    /// Extractor that answers stage one by keyword and stage two with fixed ratings.
    fn keyword_extractor(ratings: &'static str) -> impl Fn(&str, &GenerationParams) -> String + Send + Sync {
        move |prompt: &str, _: &GenerationParams| {
            if prompt.ends_with(EXPLICIT_CUE) {
                let item = prompt.rsplit("Survey item:").next().unwrap();
                let body = prompt.split("Survey item:").next().unwrap();
                if item.contains("political party") && body.contains("proud Democrat") {
                    "Democrat".into()
                } else {
                    NO_EVIDENCE.into()
                }
            } else {
                ratings.to_string()
            }
        }
    }

    #[test]
    fn default_schema_is_valid() {
        let s = TraitSchema::default();
        s.validate().unwrap();
        assert_eq!(s.len(), 6);
        assert_eq!(
            s.names().collect::<Vec<_>>(),
            ["age_bracket", "gender", "race", "education", "income_bracket", "party"]
        );
    }

    #[test]
    fn schema_rejects_bad_party_labels() {
        assert!(TraitSchema::new(vec![TraitDef::new(PARTY_TRAIT, &["Democrat", "Republican"])]).is_err());
        assert!(TraitSchema::new(vec![TraitDef::new("x", &[])]).is_err());
        assert!(TraitSchema::new(vec![TraitDef::new("x", &["a", "A"])]).is_err());
    }

    #[test]
    fn schema_toml_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("schema.toml");
        std::fs::write(&path, toml::to_string(&TraitSchema::default()).unwrap()).unwrap();
        assert_eq!(TraitSchema::load(&path).unwrap(), TraitSchema::default());
    }

    #[test]
    fn age_brackets() {
        assert_eq!(age_bracket(18), "18-29");
        assert_eq!(age_bracket(30), "30-44");
        assert_eq!(age_bracket(64), "45-64");
        assert_eq!(age_bracket(65), "65+");
    }

    #[test]
    fn explicit_party_statement_is_found() {
        let b = backstory("I'm a proud Democrat and always have been.");
        let ex = ScriptedBackend::new("ex", keyword_extractor(""));
        assert_eq!(
            extract_explicit_trait(&b, PARTY_TRAIT, &party_only(), &ex).unwrap(),
            Some("Democrat".to_string())
        );
    }

    #[test]
    fn missing_gender_evidence_is_absent() {
        let b = backstory("I mostly vote on local issues.");
        let schema = TraitSchema::default();
        let ex = ScriptedBackend::new("ex", keyword_extractor(""));
        assert_eq!(extract_explicit_trait(&b, "gender", &schema, &ex).unwrap(), None);
    }

    #[test]
    fn out_of_schema_label_is_unparseable() {
        let b = backstory("whatever");
        let ex = ScriptedBackend::new("ex", |_: &str, _: &GenerationParams| "Green Party".to_string());
        assert!(matches!(
            extract_explicit_trait(&b, PARTY_TRAIT, &party_only(), &ex),
            Err(SurveyError::UnparseableVerdict { .. })
        ));
        assert!(matches!(
            extract_explicit_trait(&b, "height", &party_only(), &ex),
            Err(SurveyError::UnknownTrait(_))
        ));
    }

    #[test]
    fn ratings_normalize() {
        let schema = TraitSchema::new(vec![TraitDef::new("lean", &["Democrat", "Republican"])]).unwrap();
        let ex = ScriptedBackend::new("ex", |_: &str, _: &GenerationParams| {
            "Democrat: 3\nRepublican: 1".to_string()
        });
        let d = infer_trait_distribution(&backstory("x"), "lean", &schema, &ex).unwrap();
        assert_eq!(d, vec![("Democrat".to_string(), 0.75), ("Republican".to_string(), 0.25)]);
    }

    #[test]
    fn single_category_is_forced() {
        let schema = TraitSchema::new(vec![TraitDef::new("species", &["Human"])]).unwrap();
        let ex = CountingBackend::new(ScriptedBackend::new("ex", |_: &str, _: &GenerationParams| String::new()));
        let d = infer_trait_distribution(&backstory("x"), "species", &schema, &ex).unwrap();
        assert_eq!(d, vec![("Human".to_string(), 1.0)]);
        assert_eq!(ex.calls(), 0);
    }

    #[test]
    fn all_zero_ratings_are_degenerate() {
        let schema = TraitSchema::new(vec![TraitDef::new("lean", &["A", "B"])]).unwrap();
        let ex = ScriptedBackend::new("ex", |_: &str, _: &GenerationParams| "A: 0\nB: 0".to_string());
        assert_eq!(
            infer_trait_distribution(&backstory("x"), "lean", &schema, &ex),
            Err(SurveyError::DegenerateDistribution("lean".into()))
        );
    }

    #[test]
    fn rating_parser_is_strict() {
        let def = TraitDef::new("lean", &["A", "B"]);
        assert_eq!(parse_ratings(&def, "a: 2\n\nB: 10\n").unwrap(), vec![2, 10]);
        assert!(parse_ratings(&def, "A: 2").is_err());
        assert!(parse_ratings(&def, "A: 2\nB: 11").is_err());
        assert!(parse_ratings(&def, "A: 2\nA: 3\nB: 1").is_err());
        assert!(parse_ratings(&def, "A: two\nB: 1").is_err());
        assert!(parse_ratings(&def, "A: 2\nC: 1\nB: 1").is_err());
    }

    #[test]
    fn explicit_party_inferred_gender() {
        let schema = TraitSchema::new(vec![
            TraitDef::new("gender", &["Male", "Female"]),
            TraitDef::new(PARTY_TRAIT, &PARTY_LABELS),
        ])
        .unwrap();
        let ex = ScriptedBackend::new("ex", |prompt: &str, p: &GenerationParams| {
            if prompt.contains("political party") {
                keyword_extractor("")(prompt, p)
            } else if prompt.ends_with(EXPLICIT_CUE) {
                NO_EVIDENCE.into()
            } else {
                "Male: 4\nFemale: 6".into()
            }
        });
        let profile = survey_persona(&backstory("I'm a proud Democrat."), &schema, &ex).unwrap();
        assert_eq!(profile.traits.len(), 2);
        assert_eq!(profile.mass(PARTY_TRAIT, "Democrat"), Some(1.0));
        assert_eq!(profile.mass(PARTY_TRAIT, "Republican"), Some(0.0));
        assert_eq!(profile.mass("gender", "Female"), Some(0.6));
        assert_eq!(profile.mass("gender", "Male"), Some(0.4));
    }

    #[test]
    fn stage_two_skipped_when_stage_one_resolves() {
        let schema = TraitSchema::default();
        let ex = CountingBackend::new(ScriptedBackend::new("ex", |prompt: &str, _: &GenerationParams| {
            let item = prompt.rsplit("Survey item:").next().unwrap();
            let options = item.lines().find_map(|l| l.strip_prefix("Options: ")).unwrap();
            options.split("; ").next().unwrap().to_string()
        }));
        let profile = survey_persona(&backstory("x"), &schema, &ex).unwrap();
        assert_eq!(profile.traits.len(), 6);
        assert_eq!(ex.calls(), 6);
        assert!(ex.prompts().iter().all(|p| p.ends_with(EXPLICIT_CUE)));
        for dist in profile.traits.values() {
            assert_eq!(dist.iter().filter(|(_, p)| *p == 1.0).count(), 1);
        }
    }

    proptest! {
        #[test]
        fn random_extractors_yield_normalized_profiles(
            explicit in prop::collection::vec(any::<bool>(), 6),
            ratings in prop::collection::vec(prop::collection::vec(0u32..=10, 5), 6),
        ) {
            let sizes: Vec<usize> = TraitSchema::default().traits.iter().map(|d| d.labels.len()).collect();
            prop_assume!(ratings.iter().zip(&sizes).all(|(r, &n)| r[..n].iter().any(|&x| x > 0)));
            let schema = TraitSchema::default();
            let ex = ScriptedBackend::new("ex", move |prompt: &str, _: &GenerationParams| {
                let idx = schema_index(prompt);
                let def = &TraitSchema::default().traits[idx];
                if prompt.ends_with(EXPLICIT_CUE) {
                    if explicit[idx] { def.labels[def.labels.len() - 1].clone() } else { NO_EVIDENCE.into() }
                } else {
                    def.labels.iter().enumerate()
                        .map(|(i, l)| format!("{l}: {}", ratings[idx][i]))
                        .collect::<Vec<_>>().join("\n")
                }
            });
            let profile = survey_persona(&backstory("x"), &schema, &ex).unwrap();
            prop_assert_eq!(profile.traits.len(), 6);
            for (name, dist) in &profile.traits {
                let total: f64 = dist.iter().map(|(_, p)| p).sum();
                prop_assert!((total - 1.0).abs() <= NORMALIZATION_TOLERANCE, "{} sums to {}", name, total);
            }
        }
    }

    fn schema_index(prompt: &str) -> usize {
        let item = prompt.rsplit("Survey item:").next().unwrap();
        let question = item.lines().next().unwrap().trim();
        TraitSchema::default()
            .traits
            .iter()
            .position(|d| d.survey_question() == question)
            .unwrap()
    }
}
