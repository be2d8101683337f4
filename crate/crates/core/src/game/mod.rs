//! Dictator and Trust trials: conditioning contexts, temporal grounding,
//! study instructions, consistency filtering and allocation parsing.

mod templates;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{self, Backend, Completion, GatewayError, JudgeVerdict};
use crate::model::{
    AuditEntry, Backstory, GameSpec, GenerationParams, Method, ModelError, Party, TraitProfile, TrialRecord,
    PARTY_TRAIT,
};
use crate::persona::{render_transcript, DEFAULT_PREAMBLE};
use crate::seed::ulid_from_seed;
use crate::survey::TraitSchema;

/// Forced interviewer line used for temporal grounding.
pub const GROUNDING_QUESTION: &str = "Interviewer: What Year is it?";
/// Speaker label for the persona's forced answer.
pub const GROUNDING_SPEAKER: &str = "Me:";
/// Separator between the context, grounding pair and study prompt.
pub const SECTION_BREAK: &str = "\n\n";
/// Cue appended after the study prompt to elicit the persona's answer.
pub const ANSWER_CUE: &str = "\nAnswer:";
/// Trial answers are short; the amount comes first in practice.
pub const TRIAL_MAX_TOKENS: u32 = 64;
pub const TRIAL_STOPS: [&str; 2] = ["Question:", "Interviewer:"];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AllocationError {
    #[error("no number found in response")]
    NoNumberFound,
    #[error("amount {0} is outside the endowment")]
    OutOfRange(u64),
}

#[derive(Debug, Error)]
pub enum GameError {
    #[error("profile `{persona_id}` has no distribution for trait `{trait_name}`")]
    MissingTrait { persona_id: String, trait_name: String },
    #[error(transparent)]
    InvalidSpec(#[from] ModelError),
    #[error("unparseable allocation in {raw:?}: {source}")]
    Allocation {
        raw: String,
        #[source]
        source: AllocationError,
    },
    #[error("no consistent response after {} attempt(s)", audit.len())]
    ExhaustedAttempts { audit: Vec<AuditEntry> },
    #[error(transparent)]
    Gateway(GatewayError),
}

/// Rendered persona conditioning text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConditioningContext {
    pub method: Method,
    pub text: String,
    pub persona_id: String,
}

/// Rules the consistency critic applies to a trial response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterRubric {
    pub checks: Vec<String>,
}

impl Default for FilterRubric {
    fn default() -> Self {
        Self {
            checks: [
                "The response must fit the persona's identity as established in the context (age, background, life story).",
                "The response must not contradict the persona's bound party affiliation, e.g. by claiming membership of the other party.",
                "The response must not contradict the bound study year.",
                "The response must read as a plausible spoken answer within the dialog: no code blocks, markup, \
                 option lists, or narration outside the conversation.",
                "The response must state a whole-number amount to send.",
                "Real people hedge, joke, and are sometimes inconsistent; do not reject a response for hedging, \
                 informality, or ordinary human inconsistency.",
            ]
            .map(String::from)
            .to_vec(),
        }
    }
}

impl FilterRubric {
    pub fn new(checks: Vec<String>) -> Result<Self, GameError> {
        if checks.iter().all(|c| c.trim().is_empty()) {
            return Err(GameError::InvalidSpec(ModelError::SpecViolation("rubric")));
        }
        Ok(Self { checks })
    }

    pub fn text(&self) -> String {
        self.checks
            .iter()
            .enumerate()
            .map(|(i, c)| format!("{}. {c}", i + 1))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

/// Where the forced year pair goes relative to the persona context.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroundingPlacement {
    #[default]
    AfterContext,
    BeforeContext,
}

fn first_person_question(trait_name: &str) -> String {
    match trait_name {
        PARTY_TRAIT => "What is your political affiliation?".into(),
        "age_bracket" | "age" => "What is your age?".into(),
        "gender" => "What is your gender?".into(),
        "race" => "What is your race or ethnicity?".into(),
        "education" => "What is the highest level of education you have completed?".into(),
        "income_bracket" | "income" => "What is your annual household income?".into(),
        other => format!("What is your {}?", other.replace('_', " ")),
    }
}

/// One biography sentence; `second` switches "I am" to "You are".
fn bio_sentence(trait_name: &str, label: &str, second: bool) -> String {
    let (be, my) = if second { ("You are", "Your") } else { ("I am", "My") };
    match trait_name {
        PARTY_TRAIT => match label {
            "Democrat" | "Republican" => format!("{be} a {label}."),
            _ => format!("{be} not a member of either major party."),
        },
        "age_bracket" | "age" => format!("{be} {label} years old."),
        "gender" => format!("{be} {}.", label.to_lowercase()),
        "race" => format!("{be} {label}."),
        "education" => format!("{my} highest level of education is {}.", lowercase_first(label)),
        "income_bracket" | "income" => format!("{my} annual household income is {label}."),
        other => format!("{my} {} is {label}.", other.replace('_', " ")),
    }
}

fn lowercase_first(s: &str) -> String {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) => c.to_lowercase().chain(chars).collect(),
        None => String::new(),
    }
}

/// Presents a persona to the model in the style of `method`.
///
/// The trait-summary styles use each trait's most probable category;
/// DeepBind uses the interview transcript itself.
pub fn build_persona_context(
    backstory: &Backstory,
    profile: &TraitProfile,
    schema: &TraitSchema,
    method: Method,
    preamble: &str,
) -> Result<ConditioningContext, GameError> {
    let top = |name: &str| {
        profile.top_label(name).ok_or_else(|| GameError::MissingTrait {
            persona_id: profile.persona_id.clone(),
            trait_name: name.to_string(),
        })
    };
    let text = match method {
        Method::DeepBind => render_transcript(preamble, &backstory.qa_pairs).trim_end().to_string(),
        Method::QA => schema
            .names()
            .map(|name| Ok(format!("Q: {}\nA: {}", first_person_question(name), top(name)?)))
            .collect::<Result<Vec<_>, GameError>>()?
            .join("\n"),
        Method::Bio | Method::Portray => schema
            .names()
            .map(|name| Ok(bio_sentence(name, top(name)?, method == Method::Portray)))
            .collect::<Result<Vec<_>, GameError>>()?
            .join(" "),
    };
    Ok(ConditioningContext {
        method,
        text,
        persona_id: profile.persona_id.clone(),
    })
}

/// The forced year question and the persona's answer.
pub fn grounding_pair(year: i32) -> String {
    format!("{GROUNDING_QUESTION}\n{GROUNDING_SPEAKER} {year}")
}

/// Appends the forced year pair after `context`; identity without a year.
pub fn apply_temporal_grounding(context: &str, year: Option<i32>) -> String {
    match year {
        Some(y) => format!("{context}{SECTION_BREAK}{}", grounding_pair(y)),
        None => context.to_string(),
    }
}

/// Study instructions for `spec`, addressed about `partner`.
pub fn render_study_prompt(spec: &GameSpec, partner: Party) -> Result<String, GameError> {
    spec.validate()?;
    Ok(templates::render(spec, partner))
}

/// Full trial prompt: context, optional year pair, instructions, answer cue.
pub fn assemble_prompt(context: &str, year: Option<i32>, placement: GroundingPlacement, study: &str) -> String {
    let grounded = match (year, placement) {
        (None, _) => context.to_string(),
        (Some(_), GroundingPlacement::AfterContext) => apply_temporal_grounding(context, year),
        (Some(y), GroundingPlacement::BeforeContext) => format!("{}{SECTION_BREAK}{context}", grounding_pair(y)),
    };
    format!("{grounded}{SECTION_BREAK}{study}{ANSWER_CUE}")
}

/// First integer in `raw`, optionally written after a `$`, bounded by the endowment.
pub fn parse_allocation(raw: &str, spec: &GameSpec) -> Result<u32, AllocationError> {
    let start = raw.find(|c: char| c.is_ascii_digit()).ok_or(AllocationError::NoNumberFound)?;
    let digits: &str = raw[start..]
        .split(|c: char| !c.is_ascii_digit())
        .next()
        .unwrap_or_default();
    let value = digits.parse::<u64>().unwrap_or(u64::MAX);
    if value > u64::from(spec.endowment) {
        return Err(AllocationError::OutOfRange(value));
    }
    Ok(value as u32)
}

/// Text the consistency critic sees: the binding, the question and the reply.
pub fn consistency_candidate(context: &str, party: Party, year: Option<i32>, study: &str, response: &str) -> String {
    let year = year.map_or_else(|| "unspecified".to_string(), |y| y.to_string());
    format!(
        "Persona context:\n{context}\n\nBound party: {party}\nBound year: {year}\n\n\
         Study question:\n{study}\n\nResponse:\n{}",
        response.trim()
    )
}

/// Asks the critic whether `response` is in character and well formed.
pub fn consistency_check(
    critic: &dyn Backend,
    candidate: &str,
    rubric: &FilterRubric,
    seed: u64,
) -> Result<JudgeVerdict, GatewayError> {
    gateway::judge(critic, candidate, &rubric.text(), &GenerationParams::critic(seed))
}

/// Who plays a trial.
#[derive(Debug, Clone, Copy)]
pub struct TrialSubject<'a> {
    pub backstory: &'a Backstory,
    pub profile: &'a TraitProfile,
    pub participant_id: Option<&'a str>,
    pub self_party: Party,
    pub pool: &'a str,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialOptions {
    pub grounding: bool,
    pub filtering: bool,
    pub max_attempts: u32,
    pub seed: u64,
    #[serde(default)]
    pub placement: GroundingPlacement,
    #[serde(default)]
    pub rubric: FilterRubric,
    #[serde(default = "default_preamble")]
    pub preamble: String,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
}

fn default_preamble() -> String {
    DEFAULT_PREAMBLE.to_string()
}

fn default_temperature() -> f64 {
    GenerationParams::GENERATION_TEMPERATURE
}

impl TrialOptions {
    pub fn new(seed: u64) -> Self {
        Self {
            grounding: true,
            filtering: true,
            max_attempts: gateway::DEFAULT_MAX_ATTEMPTS,
            seed,
            placement: GroundingPlacement::default(),
            rubric: FilterRubric::default(),
            preamble: default_preamble(),
            temperature: default_temperature(),
        }
    }

    pub fn ablation(mut self, grounding: bool, filtering: bool) -> Self {
        self.grounding = grounding;
        self.filtering = filtering;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

/// Generation parameters for a trial answer.
pub fn trial_params(seed: u64, temperature: f64) -> GenerationParams {
    let mut params = GenerationParams::generation(seed)
        .with_max_tokens(TRIAL_MAX_TOKENS)
        .with_stops(TRIAL_STOPS);
    params.temperature = temperature;
    params
}

fn audit_entries(verdicts: &[JudgeVerdict]) -> Vec<AuditEntry> {
    verdicts
        .iter()
        .enumerate()
        .map(|(i, v)| AuditEntry {
            attempt: i as u32 + 1,
            accept: v.accept,
            reason: v.reason.clone(),
        })
        .collect()
}

/// The prompt a trial would send, without contacting any backend.
pub fn trial_prompt(
    subject: &TrialSubject<'_>,
    schema: &TraitSchema,
    method: Method,
    spec: &GameSpec,
    partner: Party,
    options: &TrialOptions,
) -> Result<(ConditioningContext, String, String), GameError> {
    let context = build_persona_context(subject.backstory, subject.profile, schema, method, &options.preamble)?;
    let study = render_study_prompt(spec, partner)?;
    let year = if options.grounding { spec.year } else { None };
    let prompt = assemble_prompt(&context.text, year, options.placement, &study);
    Ok((context, study, prompt))
}

/// Plays one decision and records how it was obtained.
#[allow(clippy::too_many_arguments)]
pub fn run_trial(
    generator: &dyn Backend,
    critic: &dyn Backend,
    schema: &TraitSchema,
    subject: &TrialSubject<'_>,
    method: Method,
    spec: &GameSpec,
    partner: Party,
    options: &TrialOptions,
) -> Result<TrialRecord, GameError> {
    let (context, study, prompt) = trial_prompt(subject, schema, method, spec, partner, options)?;
    let params = trial_params(options.seed, options.temperature);

    let (completion, amount, audit): (Completion, u32, Vec<AuditEntry>) = if options.filtering {
        let outcome = gateway::sample_until(generator, &prompt, &params, options.max_attempts, |c| {
            let amount = match parse_allocation(&c.text, spec) {
                Ok(amount) => amount,
                Err(e) => return Ok((JudgeVerdict::reject(format!("parse: {e}")), None)),
            };
            let candidate = consistency_candidate(&context.text, subject.self_party, spec.year, &study, &c.text);
            let verdict = consistency_check(critic, &candidate, &options.rubric, options.seed)?;
            Ok((verdict, Some(amount)))
        });
        match outcome {
            Ok(accepted) => (accepted.completion, accepted.value, audit_entries(&accepted.audit)),
            Err(GatewayError::ExhaustedAttempts { audit }) => {
                return Err(GameError::ExhaustedAttempts {
                    audit: audit_entries(&audit),
                })
            }
            Err(e) => return Err(GameError::Gateway(e)),
        }
    } else {
        let completion = gateway::complete(generator, &prompt, &params).map_err(GameError::Gateway)?;
        let amount = parse_allocation(&completion.text, spec).map_err(|source| GameError::Allocation {
            raw: completion.text.clone(),
            source,
        })?;
        let audit = vec![AuditEntry {
            attempt: 1,
            accept: true,
            reason: "filtering disabled".into(),
        }];
        (completion, amount, audit)
    };

    Ok(TrialRecord {
        trial_id: ulid_from_seed(options.seed),
        persona_id: subject.profile.persona_id.clone(),
        participant_id: subject.participant_id.map(str::to_string),
        method,
        game_spec: *spec,
        self_party: subject.self_party,
        partner_party: partner,
        pool: subject.pool.to_string(),
        raw_text: completion.text,
        amount,
        filter_audit: audit,
        seed: options.seed,
    })
}

/// A fully specified trial, ready to schedule.
#[derive(Debug, Clone, Copy)]
pub struct TrialJob<'a> {
    pub subject: TrialSubject<'a>,
    pub method: Method,
    pub spec: GameSpec,
    pub partner: Party,
    pub seed: u64,
}

/// Runs `jobs` concurrently and returns the records sorted by trial id.
pub fn run_trials(
    generator: &dyn Backend,
    critic: &dyn Backend,
    schema: &TraitSchema,
    jobs: &[TrialJob<'_>],
    options: &TrialOptions,
) -> Result<Vec<TrialRecord>, (usize, GameError)> {
    let mut records = jobs
        .par_iter()
        .enumerate()
        .map(|(i, job)| {
            let opts = options.clone().with_seed(job.seed);
            run_trial(generator, critic, schema, &job.subject, job.method, &job.spec, job.partner, &opts)
                .map_err(|e| (i, e))
        })
        .collect::<Result<Vec<_>, _>>()?;
    records.sort_by(|a, b| a.trial_id.cmp(&b.trial_id));
    Ok(records)
}
