//! A deterministic, rule-based stand-in for the language model.
//!
//! It recognizes the four kinds of prompt the pipeline sends (interview
//! questions, critic reviews, survey extraction and game trials) and answers
//! each from a seeded random stream, so whole runs are reproducible offline.
//! Behaviour is tunable: partisan bias, a bias that only appears when the
//! year is grounded, and a rate of malformed answers for the filters to catch.

use rand::Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use std::sync::OnceLock;

use crate::game::GROUNDING_QUESTION;
use crate::gateway::{Backend, Completion, GatewayError, CRITIC_HEADER};
use crate::model::{GenerationParams, Party, PARTY_TRAIT};
use crate::persona::{ANSWER_LABEL, QUESTION_LABEL};
use crate::seed::rng_for;
use crate::survey::{age_bracket, EXPLICIT_CUE, EXTRACTOR_HEADER, MAX_RATING, NO_EVIDENCE, RATING_CUE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulatorConfig {
    /// Added to transfers toward co-partisans.
    pub copartisan_bonus: u32,
    /// Subtracted from transfers toward rival partisans.
    pub rival_penalty: u32,
    /// Extra co-partisan bonus when the prompt carries the forced year pair.
    pub grounded_bonus: u32,
    /// Probability that a generated answer is malformed or out of character.
    pub glitch_rate: f64,
}

impl Default for SimulatorConfig {
    fn default() -> Self {
        Self {
            copartisan_bonus: 1,
            rival_penalty: 1,
            grounded_bonus: 1,
            glitch_rate: 0.1,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Simulator {
    config: SimulatorConfig,
}

impl Simulator {
    pub fn new(config: SimulatorConfig) -> Self {
        Self { config }
    }

    pub fn config(&self) -> &SimulatorConfig {
        &self.config
    }

    fn respond(&self, prompt: &str, params: &GenerationParams) -> String {
        if prompt.starts_with(CRITIC_HEADER) {
            critic_reply(prompt)
        } else if prompt.starts_with(EXTRACTOR_HEADER) {
            extractor_reply(prompt)
        } else if is_trial(prompt) {
            self.trial_reply(prompt, params.seed)
        } else {
            self.interview_reply(prompt, params.seed)
        }
    }

    fn glitch(&self, seed: u64, kind: &str) -> bool {
        self.config.glitch_rate > 0.0 && rng_for(seed, "simulator-glitch", kind).gen_bool(self.config.glitch_rate.min(1.0))
    }

    fn interview_reply(&self, prompt: &str, seed: u64) -> String {
        if self.glitch(seed, "interview") {
            return "```python\nprint(\"hello world\")\n```".to_string();
        }
        let question = last_question(prompt);
        let persona = match Persona::parse(prompt) {
            Some(p) => p,
            None => return Persona::draw(seed).introduction(),
        };
        let mut rng = rng_for(seed, "simulator", "answer");
        let q = question.to_ascii_lowercase();
        if q.contains("political views") {
            return persona.politics();
        }
        let pick = |rng: &mut rand_chacha::ChaCha8Rng, options: &[&str]| options[rng.gen_range(0..options.len())].to_string();
        if q.contains("crossroads") {
            pick(&mut rng, &[
                "Moving away from home in my twenties was the big one. I almost stayed, but leaving taught me to stand on my own.",
                "When my father got sick I had to choose between a job offer and staying close. I stayed, and I don't regret it.",
                "Switching careers was scary, but it made me who I am today.",
            ])
        } else if q.contains("neighborhood") {
            format!("I live outside {} now. It's quiet, people mostly keep to themselves, and there's a diner everyone goes to on Sundays.", persona.city)
        } else if q.contains("daily routine") {
            pick(&mut rng, &[
                "I've been getting up earlier to walk before work.",
                "Not much has changed, honestly. Work, dinner, a little TV.",
                "I started cooking at home more to save money.",
            ])
        } else if q.contains("vaccination") {
            pick(&mut rng, &[
                "I get my shots every year; it just seems sensible to me.",
                "I'm a little wary of some of it, but I got the important ones.",
                "Honestly, I'd rather wait and see before getting anything new.",
            ])
        } else if q.contains("healthy") {
            pick(&mut rng, &[
                "Work makes it hard. Long days leave little time to exercise.",
                "Having a dog helps. I walk every morning whether I like it or not.",
                "Eating well is expensive, so that's the hard part.",
            ])
        } else {
            pick(&mut rng, &[
                "I'd say I'm doing all right. Some days are harder than others.",
                "My friends from church mean a lot to me. We look out for each other.",
                "I think about that more than I used to. It's complicated.",
            ])
        }
    }

    fn trial_reply(&self, prompt: &str, seed: u64) -> String {
        let split = prompt.rfind(QUESTION_LABEL).unwrap_or(0);
        let (context, study) = prompt.split_at(split);
        let me = declared_party(context);
        let partner = partner_party(study);
        let endowment = endowment(study);
        let raffle = study.contains("raffle tickets");
        if self.glitch(seed, "trial") {
            let other = me.map_or(Party::Democrat, Party::other);
            return format!("As a lifelong {other}, I'd send ${}.", endowment.saturating_sub(1));
        }
        let mut rng = rng_for(seed, "simulator", "trial");
        let base = endowment * 3 / 10 + rng.gen_range(0..=endowment / 5);
        let amount = match (me, partner) {
            (Some(me), Some(partner)) if me == partner => {
                let grounded = if prompt.contains(GROUNDING_QUESTION) { self.config.grounded_bonus } else { 0 };
                base + self.config.copartisan_bonus + grounded
            }
            (Some(_), Some(_)) => base.saturating_sub(self.config.rival_penalty),
            _ => base,
        }
        .min(endowment);
        if raffle {
            format!("I'll send {amount} tickets.")
        } else {
            format!("I will send ${amount}.")
        }
    }
}

impl Backend for Simulator {
    fn tag(&self) -> &str {
        "simulator"
    }

    fn complete(&self, prompt: &str, params: &GenerationParams) -> Result<Completion, GatewayError> {
        Ok(Completion::from_raw(&self.respond(prompt, params), params, self.tag()))
    }
}

fn is_trial(prompt: &str) -> bool {
    let tail = &prompt[prompt.rfind(QUESTION_LABEL).unwrap_or(0)..];
    ["This game is played by pairs", "In this task you have", "In this game, there are two players"]
        .iter()
        .any(|m| tail.contains(m))
}

fn last_question(prompt: &str) -> &str {
    let at = prompt.rfind(QUESTION_LABEL).map_or(0, |i| i + QUESTION_LABEL.len());
    let tail = &prompt[at..];
    tail.split(ANSWER_LABEL).next().unwrap_or(tail).trim()
}

fn regex(cell: &'static OnceLock<Regex>, pattern: &str) -> &'static Regex {
    cell.get_or_init(|| Regex::new(pattern).expect("static pattern compiles"))
}

/// Party a context attributes to the persona, if any.
fn declared_party(context: &str) -> Option<Party> {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = regex(&RE, r"(?:I'm a|I am a|You are a|A:|lifelong) (Democrat|Republican)\b");
    re.captures_iter(context).last().and_then(|c| c[1].parse().ok())
}

fn partner_party(study: &str) -> Option<Party> {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = regex(
        &RE,
        r"(?:Political party: |identifies politically as a |identifies politically with the )(Democrat|Republican)",
    );
    re.captures(study).and_then(|c| c[1].parse().ok())
}

fn endowment(study: &str) -> u32 {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = regex(&RE, r"(?:you have \$|You have \$|none of )(\d+)");
    re.captures(study)
        .and_then(|c| c[1].parse().ok())
        .unwrap_or(10)
}

const CITIES: [&str; 8] = [
    "Columbus, Ohio",
    "Tulsa, Oklahoma",
    "Fresno, California",
    "Raleigh, North Carolina",
    "Spokane, Washington",
    "Macon, Georgia",
    "Erie, Pennsylvania",
    "El Paso, Texas",
];
const JOBS: [&str; 8] = [
    "a nurse", "an electrician", "a teacher", "a truck driver", "an accountant", "a cashier", "a software tester",
    "a mechanic",
];
const RACES: [&str; 5] = ["White", "Black", "Hispanic", "Asian", "mixed"];
const EDUCATION: [&str; 4] = [
    "I finished high school and went straight to work.",
    "I did a couple of years of community college but never finished.",
    "I graduated from college with a bachelor's degree.",
    "I went on to graduate school after college.",
];
const INCOME: [&str; 5] = [
    "under thirty thousand",
    "about forty-five thousand",
    "around eighty thousand",
    "about a hundred and twenty thousand",
    "well over a hundred and fifty thousand",
];

/// Hidden attributes the simulator keeps consistent within one interview.
#[derive(Debug, Clone, PartialEq)]
struct Persona {
    age: u32,
    female: bool,
    race: usize,
    education: usize,
    income: usize,
    party: Option<Party>,
    city: String,
}

impl Persona {
    fn draw(seed: u64) -> Self {
        let mut rng = rng_for(seed, "simulator", "persona");
        let party = match rng.gen_range(0..20) {
            0..=8 => Some(Party::Democrat),
            9..=17 => Some(Party::Republican),
            _ => None,
        };
        Self {
            age: rng.gen_range(18..=85),
            female: rng.gen_bool(0.5),
            race: rng.gen_range(0..RACES.len()),
            education: rng.gen_range(0..EDUCATION.len()),
            income: rng.gen_range(0..INCOME.len()),
            party,
            city: CITIES[rng.gen_range(0..CITIES.len())].to_string(),
        }
    }

    fn introduction(&self) -> String {
        let job = JOBS[(self.age as usize + self.income) % JOBS.len()];
        let politics = match self.party {
            Some(p) => format!("Politically, I'm a {p}."),
            None => "Politically, I'm an independent and don't belong to either party.".to_string(),
        };
        format!(
            "I grew up in {}. I'm a {}-year-old {}, and my family is {}. {} These days I work as {job}, and our \
             household brings in {} a year. {politics}",
            self.city,
            self.age,
            if self.female { "woman" } else { "man" },
            RACES[self.race],
            EDUCATION[self.education],
            INCOME[self.income],
        )
    }

    /// Recovers the persona from the first answer of a transcript.
    fn parse(prompt: &str) -> Option<Self> {
        static RE: OnceLock<Regex> = OnceLock::new();
        let re = regex(
            &RE,
            r"I grew up in ([^.]+)\. I'm a (\d+)-year-old (woman|man), and my family is (\w+)\. ([^.]+\.) These days I work as [^,]+, and our household brings in ([^.]+) a year\. Politically, I'm (?:a (Democrat|Republican)|an independent)",
        );
        let c = re.captures(prompt)?;
        Some(Self {
            city: c[1].to_string(),
            age: c[2].parse().ok()?,
            female: &c[3] == "woman",
            race: RACES.iter().position(|r| *r == &c[4])?,
            education: EDUCATION.iter().position(|e| *e == &c[5])?,
            income: INCOME.iter().position(|i| i.trim() == c[6].trim())?,
            party: c.get(7).and_then(|m| m.as_str().parse().ok()),
        })
    }

    fn politics(&self) -> String {
        match self.party {
            Some(Party::Democrat) => "I'm a Democrat, always have been. I care about health care and workers getting a fair shake.".into(),
            Some(Party::Republican) => "I'm a Republican. Lower taxes, less government telling me what to do.".into(),
            None => "I don't really belong to either party. I'd call myself an independent and vote for the person.".into(),
        }
    }
}

fn critic_reply(prompt: &str) -> String {
    let candidate = prompt
        .split_once("<<<\n")
        .and_then(|(_, rest)| rest.rsplit_once("\n>>>"))
        .map_or(prompt, |(c, _)| c);
    if candidate.contains("```") || candidate.contains("</") {
        return "REJECT non-dialog form (code or markup)".into();
    }
    if let Some((head, response)) = candidate.split_once("\nResponse:\n") {
        static RE: OnceLock<Regex> = OnceLock::new();
        let bound = regex(&RE, r"Bound party: (Democrat|Republican)")
            .captures(head)
            .and_then(|c| c[1].parse::<Party>().ok());
        if let Some(bound) = bound {
            if declared_party(response) == Some(bound.other()) {
                return "REJECT party inconsistency".into();
            }
        }
        if !response.chars().any(|c| c.is_ascii_digit()) {
            return "REJECT no amount stated".into();
        }
    }
    "ACCEPT consistent".into()
}

fn extractor_reply(prompt: &str) -> String {
    let transcript = prompt.split("\nSurvey item:").next().unwrap_or(prompt);
    let options: Vec<&str> = prompt
        .lines()
        .find_map(|l| l.strip_prefix("Options: "))
        .map(|l| l.split("; ").collect())
        .unwrap_or_default();
    let persona = Persona::parse(transcript);
    let is = |set: &[&str]| !options.is_empty() && options.iter().all(|o| set.contains(o));
    let kind = if options.contains(&"Democrat") {
        PARTY_TRAIT
    } else if is(&["Male", "Female"]) {
        "gender"
    } else if options.contains(&"18-29") {
        "age_bracket"
    } else if options.contains(&"White") {
        "race"
    } else if options.contains(&"Some college") {
        "education"
    } else if options.contains(&"Under $30k") {
        "income_bracket"
    } else {
        "other"
    };

    // index of the option the transcript supports, and whether it is stated outright
    let evidence: Option<(usize, bool)> = persona.as_ref().and_then(|p| match kind {
        PARTY_TRAIT => Some(match p.party {
            Some(Party::Democrat) => (0, true),
            Some(Party::Republican) => (1, true),
            None => (2, true),
        }),
        "gender" => Some((usize::from(p.female), true)),
        "age_bracket" => options.iter().position(|o| *o == age_bracket(p.age)).map(|i| (i, true)),
        "race" => Some((p.race, p.race < 4)),
        "education" => Some((p.education, p.education >= 2)),
        "income_bracket" => Some((p.income, false)),
        _ => None,
    });
    let evidence = evidence.filter(|(i, _)| *i < options.len()).or_else(|| {
        options
            .iter()
            .position(|o| transcript.to_lowercase().contains(&o.to_lowercase()))
            .map(|i| (i, false))
    });

    if prompt.ends_with(EXPLICIT_CUE) {
        return match evidence {
            Some((i, true)) => options[i].to_string(),
            _ => NO_EVIDENCE.to_string(),
        };
    }
    if prompt.ends_with(RATING_CUE) {
        return options
            .iter()
            .enumerate()
            .map(|(i, o)| {
                let rating = match evidence {
                    Some((hit, _)) if hit == i => 8,
                    Some((hit, _)) if hit.abs_diff(i) == 1 => 3,
                    Some(_) => 1,
                    None => 5,
                }
                .min(MAX_RATING);
                format!("{o}: {rating}")
            })
            .collect::<Vec<_>>()
            .join("\n");
    }
    NO_EVIDENCE.to_string()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::game::{render_study_prompt, assemble_prompt, GroundingPlacement};
    use crate::gateway::{critic_prompt, parse_verdict};
    use crate::model::{Framing, GameSpec};
    use crate::persona::{default_interview_questions, question_prompt, DEFAULT_PREAMBLE};
    use crate::model::QAPair;

    fn ask(sim: &Simulator, prompt: &str, seed: u64) -> String {
        sim.complete(prompt, &GenerationParams::generation(seed)).unwrap().text
    }

    #[test]
    fn introduction_round_trips() {
        for seed in 0..200 {
            let p = Persona::draw(seed);
            assert_eq!(Persona::parse(&p.introduction()), Some(p.clone()), "{}", p.introduction());
        }
    }

    #[test]
    fn interview_keeps_party_consistent() {
        let sim = Simulator::new(SimulatorConfig { glitch_rate: 0.0, ..Default::default() });
        let script = default_interview_questions();
        let mut pairs = Vec::new();
        for (i, q) in script.questions.iter().enumerate() {
            let answer = ask(&sim, &question_prompt(DEFAULT_PREAMBLE, &pairs, q), 40 + i as u64);
            pairs.push(QAPair::new(q.clone(), answer).unwrap());
        }
        let intro = Persona::parse(&pairs[0].answer).unwrap();
        let politics = &pairs[5].answer;
        match intro.party {
            Some(p) => assert!(politics.contains(p.label())),
            None => assert!(politics.contains("independent")),
        }
    }

    #[test]
    fn trial_bias_and_grounding() {
        let sim = Simulator::new(SimulatorConfig {
            copartisan_bonus: 0,
            rival_penalty: 0,
            grounded_bonus: 1,
            glitch_rate: 0.0,
        });
        let spec = GameSpec::for_study(Framing::WD);
        let amount = |partner: Party, year: Option<i32>| {
            let study = render_study_prompt(&spec, partner).unwrap();
            let prompt = assemble_prompt("I am a Democrat.", year, GroundingPlacement::AfterContext, &study);
            let reply = ask(&sim, &prompt, 9);
            crate::game::parse_allocation(&reply, &spec).unwrap()
        };
        assert_eq!(amount(Party::Democrat, None), amount(Party::Republican, None));
        assert_eq!(amount(Party::Democrat, Some(2019)), amount(Party::Democrat, None) + 1);
        assert_eq!(amount(Party::Republican, Some(2019)), amount(Party::Republican, None));
    }

    #[test]
    fn critic_rules() {
        let verdict = |candidate: &str| parse_verdict(&critic_reply(&critic_prompt(candidate, "rules"))).unwrap();
        assert!(!verdict("```\ncode\n```").accept);
        let trial = |response: &str| {
            format!("Persona context:\nI am a Republican.\n\nBound party: Republican\nBound year: 2019\n\nStudy question:\nQ\n\nResponse:\n{response}")
        };
        assert!(!verdict(&trial("As a lifelong Democrat, I'd send $9")).accept);
        assert!(verdict(&trial("I will send $3.")).accept);
        assert!(!verdict(&trial("No idea.")).accept);
        assert!(verdict("I grew up on a farm.").accept);
    }

    #[test]
    fn extractor_answers_parse() {
        use crate::survey::{explicit_prompt, parse_explicit, parse_ratings, rating_prompt, TraitSchema};
        let p = Persona::draw(3);
        let transcript = format!("{DEFAULT_PREAMBLE}\n\nQuestion: Tell me about yourself.\nAnswer: {}\n\n", p.introduction());
        for def in &TraitSchema::default().traits {
            let explicit = extractor_reply(&explicit_prompt(&transcript, def));
            parse_explicit(def, &explicit).unwrap();
            let ratings = extractor_reply(&rating_prompt(&transcript, def));
            assert_eq!(parse_ratings(def, &ratings).unwrap().len(), def.labels.len());
        }
    }
}
