//! Interview-style backstory generation.
//!
//! A base model is interviewed one question at a time. The prompt for each
//! question carries every previously accepted answer, so the transcript grows
//! strictly by appending. Each answer is screened by a critic before it is
//! kept.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{self, Backend, GatewayError, JudgeVerdict};
use crate::model::{Backstory, GenerationParams, QAPair};
use crate::seed::{derive_seed, ulid_from_seed};

pub const DEFAULT_PREAMBLE: &str = "The following is an interview transcript.";

/// Answer length cap, in tokens.
pub const ANSWER_MAX_TOKENS: u32 = 512;

pub const QUESTION_LABEL: &str = "Question:";
pub const ANSWER_LABEL: &str = "Answer:";

pub const BACKSTORY_RUBRIC: &str = "\
The candidate is one answer from a spoken interview with a member of the public.
REJECT it if any of the following hold:
- it contains code blocks or program source;
- it contains markup such as HTML tags, markdown headings, or tables;
- it contradicts facts stated earlier in the same interview (factual inconsistency);
- it is not natural first-person dialog (lists of links, forum boilerplate, narration about the interview).
Otherwise ACCEPT it. Ordinary human rambling, hedging, or strong opinions are acceptable.";

const QUESTIONS: [&str; 10] = [
    "To start, I would like to begin with a big question: tell me the story of your life. Start from the beginning--from your childhood, to education, to family and relationships, and to any major life events you may have had.",
    "Some people tell us that they've reached a crossroads at some points in their life where multiple paths were available, and their choice then made a significant difference in defining who they are. What about you? Was there a moment like that for you, and if so, could you tell me the whole story about that from start to finish?",
    "Tell me about anyone else in your life we haven't discussed (like friends or romantic partners). Are there people outside of your family who are important to you?",
    "Now let's talk about your current neighborhood. Tell me all about the neighborhood and area in which you are living now.",
    "Tell me about any recent changes to your daily routine.",
    "How would you describe your political views?",
    "How have you been thinking about race in the U.S. recently?",
    "For you, what makes it easy or hard to stay healthy?",
    "Some people are excited about medical vaccination, and others, not so much. How about you?",
    "Some people say they struggle with depression, anxiety, or something else like that. How about for you?",
];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PersonaError {
    #[error("question {question} exhausted its attempts")]
    Exhausted {
        /// 1-based position of the failing question.
        question: usize,
        audit: Vec<JudgeVerdict>,
    },
    #[error("question {question}: {source}")]
    Gateway {
        question: usize,
        #[source]
        source: GatewayError,
    },
    #[error("interview script has no questions")]
    EmptyScript,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InterviewScript {
    pub questions: Vec<String>,
    pub preamble: String,
}

impl Default for InterviewScript {
    fn default() -> Self {
        default_interview_questions()
    }
}

/// The ten life-history interview questions, in order.
pub fn default_interview_questions() -> InterviewScript {
    InterviewScript {
        questions: QUESTIONS.iter().map(|q| q.to_string()).collect(),
        preamble: DEFAULT_PREAMBLE.to_string(),
    }
}

/// Renders the preamble and accepted pairs as `Question:/Answer:` blocks.
pub fn render_transcript(preamble: &str, pairs: &[QAPair]) -> String {
    let mut out = String::with_capacity(preamble.len() + pairs.len() * 256);
    out.push_str(preamble);
    out.push_str("\n\n");
    for pair in pairs {
        out.push_str(QUESTION_LABEL);
        out.push(' ');
        out.push_str(&pair.question);
        out.push('\n');
        out.push_str(ANSWER_LABEL);
        out.push(' ');
        out.push_str(&pair.answer);
        out.push_str("\n\n");
    }
    out
}

/// Prompt asking the next question after the accepted pairs.
pub fn question_prompt(preamble: &str, pairs: &[QAPair], question: &str) -> String {
    let mut out = render_transcript(preamble, pairs);
    out.push_str(QUESTION_LABEL);
    out.push(' ');
    out.push_str(question);
    out.push('\n');
    out.push_str(ANSWER_LABEL);
    out
}

pub fn backstory_transcript(backstory: &Backstory, preamble: &str) -> String {
    render_transcript(preamble, &backstory.qa_pairs)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Interview {
    pub backstory: Backstory,
    /// Critic verdicts per question, in order; the last of each is the acceptance.
    pub audits: Vec<Vec<JudgeVerdict>>,
    /// Prompt sent for each question.
    pub prompts: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InterviewSettings<'a> {
    pub script: &'a InterviewScript,
    pub gen: GenerationParams,
    pub rubric: &'a str,
    pub max_attempts: u32,
}

impl<'a> InterviewSettings<'a> {
    pub fn new(script: &'a InterviewScript, seed: u64) -> Self {
        Self {
            script,
            gen: GenerationParams::generation(seed),
            rubric: BACKSTORY_RUBRIC,
            max_attempts: gateway::DEFAULT_MAX_ATTEMPTS,
        }
    }
}

/// Interviews `generator`, screening each answer with `critic`.
pub fn interview(
    generator: &dyn Backend,
    critic: &dyn Backend,
    persona_id: &str,
    settings: &InterviewSettings<'_>,
) -> Result<Interview, PersonaError> {
    let script = settings.script;
    if script.questions.is_empty() {
        return Err(PersonaError::EmptyScript);
    }
    let base = settings
        .gen
        .clone()
        .with_max_tokens(ANSWER_MAX_TOKENS)
        .with_stops([QUESTION_LABEL]);
    let critic_params = GenerationParams::critic(settings.gen.seed);

    let mut pairs: Vec<QAPair> = Vec::with_capacity(script.questions.len());
    let mut attempts_used = Vec::with_capacity(script.questions.len());
    let mut audits = Vec::with_capacity(script.questions.len());
    let mut prompts = Vec::with_capacity(script.questions.len());

    for (i, question) in script.questions.iter().enumerate() {
        let number = i + 1;
        let prompt = question_prompt(&script.preamble, &pairs, question);
        let earlier = render_transcript(&script.preamble, &pairs);
        let params = base
            .clone()
            .with_seed(derive_seed(settings.gen.seed, "question", &number.to_string()));
        let outcome = gateway::sample_until(generator, &prompt, &params, settings.max_attempts, |c| {
            let answer = c.text.trim();
            if answer.is_empty() {
                return Ok((JudgeVerdict::reject("empty answer"), None));
            }
            let candidate = format!("{earlier}{QUESTION_LABEL} {question}\n{ANSWER_LABEL} {answer}");
            let verdict = gateway::judge(critic, &candidate, settings.rubric, &critic_params)?;
            Ok((verdict, Some(answer.to_string())))
        });
        let accepted = match outcome {
            Ok(accepted) => accepted,
            Err(GatewayError::ExhaustedAttempts { audit }) => {
                return Err(PersonaError::Exhausted {
                    question: number,
                    audit,
                })
            }
            Err(source) => {
                return Err(PersonaError::Gateway {
                    question: number,
                    source,
                })
            }
        };
        let pair = QAPair::new(question.clone(), accepted.value)
            .expect("question and accepted answer are non-empty");
        pairs.push(pair);
        attempts_used.push(accepted.attempts);
        audits.push(accepted.audit);
        prompts.push(prompt);
    }

    Ok(Interview {
        backstory: Backstory {
            persona_id: persona_id.to_string(),
            qa_pairs: pairs,
            generator_tag: format!("{}; preamble={:?}", generator.tag(), script.preamble),
            attempts_used,
        },
        audits,
        prompts,
    })
}

pub fn generate_backstory(
    generator: &dyn Backend,
    critic: &dyn Backend,
    persona_id: &str,
    settings: &InterviewSettings<'_>,
) -> Result<Backstory, PersonaError> {
    interview(generator, critic, persona_id, settings).map(|i| i.backstory)
}

pub fn persona_id_for(root_seed: u64, index: usize) -> String {
    ulid_from_seed(derive_seed(root_seed, "persona-id", &index.to_string()))
}

/// Generates `count` personas concurrently. Every persona draws from its own
/// seed substream, so the result does not depend on scheduling.
pub fn generate_population(
    generator: &dyn Backend,
    critic: &dyn Backend,
    script: &InterviewScript,
    count: usize,
    root_seed: u64,
    max_attempts: u32,
) -> Result<Vec<Backstory>, (usize, PersonaError)> {
    (0..count)
        .into_par_iter()
        .map(|i| {
            let mut settings =
                InterviewSettings::new(script, derive_seed(root_seed, "persona", &i.to_string()));
            settings.max_attempts = max_attempts;
            generate_backstory(generator, critic, &persona_id_for(root_seed, i), &settings)
                .map_err(|e| (i, e))
        })
        .collect()
}
