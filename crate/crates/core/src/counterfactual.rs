//! The 2×2×2 counterfactual design: every virtual participant plays under
//! both study years and both instruction framings, against both parties,
//! while keeping their own party and participant pool.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{self, delta_table, factorial_main_effect, AnalysisError, Factor, FactorialCell};
use crate::game::{run_trials, GameError, TrialJob, TrialOptions, TrialSubject};
use crate::gateway::Backend;
use crate::model::{Framing, Game, GameSpec, Method, Party, TrialRecord};
use crate::seed::derive_seed;
use crate::survey::TraitSchema;

#[derive(Debug, Error)]
pub enum CounterfactualError {
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
    #[error("participant `{participant}` belongs to pool `{pool}`, which the plan does not contain")]
    UnknownPool { participant: String, pool: String },
    #[error("cell {cell}: participant `{participant}`: {source}")]
    Trial {
        cell: String,
        participant: String,
        #[source]
        source: GameError,
    },
    #[error("cell {cell}: {source}")]
    Cell {
        cell: String,
        #[source]
        source: AnalysisError,
    },
}

/// Two levels for each of pool, framing and year.
///
/// Index 0 is the earlier study and index 1 the later one, which is also the
/// level coded 1 in the analysis.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactorialPlan {
    pub game: Game,
    pub pools: [String; 2],
    pub framings: [Framing; 2],
    pub years: [i32; 2],
}

impl FactorialPlan {
    /// The design crossing the two published studies of `game`.
    pub fn for_game(game: Game) -> Self {
        let framings = match game {
            Game::Dictator => [Framing::ID, Framing::WD],
            Game::Trust => [Framing::CT, Framing::WT],
        };
        Self {
            game,
            pools: framings.map(|f| f.as_str().to_string()),
            framings,
            years: framings.map(Framing::study_year),
        }
    }

    pub fn validate(&self) -> Result<(), CounterfactualError> {
        if let Some(f) = self.framings.iter().find(|f| f.game() != self.game) {
            return Err(CounterfactualError::InvalidPlan(format!("framing {f} does not belong to {:?}", self.game)));
        }
        if self.framings[0] == self.framings[1] {
            return Err(CounterfactualError::InvalidPlan("framings must differ".into()));
        }
        if self.years[0] == self.years[1] {
            return Err(CounterfactualError::InvalidPlan("years must differ".into()));
        }
        if self.pools[0] == self.pools[1] {
            return Err(CounterfactualError::InvalidPlan("pools must differ".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CounterfactualError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CounterfactualError::InvalidPlan(format!("{}: {e}", path.display())))?;
        let plan: Self = toml::from_str(&text).map_err(|e| CounterfactualError::InvalidPlan(e.to_string()))?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn pool_index(&self, pool: &str) -> Option<u8> {
        self.pools.iter().position(|p| p == pool).map(|i| i as u8)
    }

    pub fn grouping(&self) -> analysis::Grouping {
        analysis::Grouping::Counterfactual {
            treated_pool: self.pools[1].clone(),
            treated_year: self.years[1],
        }
    }
}

/// Coordinates of one (pool, framing, year) cell.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellDescriptor {
    pub pool: u8,
    pub framing: u8,
    pub year: u8,
    pub pool_id: String,
    pub framing_id: Framing,
    pub year_value: i32,
    /// The combination a published study actually ran.
    pub original_design: bool,
}

impl CellDescriptor {
    pub fn label(&self) -> String {
        format!("{}/{}/{}", self.pool_id, self.framing_id, self.year_value)
    }

    pub fn spec(&self) -> GameSpec {
        GameSpec::with_year(self.framing_id, Some(self.year_value))
    }
}

/// The eight cells, pool outermost and year innermost.
pub fn enumerate_conditions(plan: &FactorialPlan) -> Vec<CellDescriptor> {
    let mut cells = Vec::with_capacity(8);
    for pool in 0..2u8 {
        for framing in 0..2u8 {
            for year in 0..2u8 {
                cells.push(CellDescriptor {
                    pool,
                    framing,
                    year,
                    pool_id: plan.pools[usize::from(pool)].clone(),
                    framing_id: plan.framings[usize::from(framing)],
                    year_value: plan.years[usize::from(year)],
                    original_design: pool == framing && framing == year,
                });
            }
        }
    }
    cells
}

/// Within-participant conditions in play order: SameP, then year, then framing.
pub fn participant_schedule(plan: &FactorialPlan, self_party: Party) -> Vec<(Party, Framing, i32)> {
    let mut schedule = Vec::with_capacity(8);
    for partner in [self_party, self_party.other()] {
        for year in plan.years {
            for framing in plan.framings {
                schedule.push((partner, framing, year));
            }
        }
    }
    schedule
}

/// A matched virtual participant taking part in the design.
#[derive(Debug, Clone, Copy)]
pub struct FactorialParticipant<'a> {
    pub subject: TrialSubject<'a>,
    pub id: &'a str,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorialRow {
    pub cell: CellDescriptor,
    pub result: FactorialCell,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorialRun {
    pub trials: Vec<TrialRecord>,
    pub rows: Vec<FactorialRow>,
}

/// Builds the cell table from trial records.
pub fn cells_from_trials(plan: &FactorialPlan, trials: &[TrialRecord]) -> Result<Vec<FactorialRow>, CounterfactualError> {
    enumerate_conditions(plan)
        .into_iter()
        .map(|cell| {
            let members: Vec<TrialRecord> = trials
                .iter()
                .filter(|t| {
                    t.pool == cell.pool_id
                        && t.game_spec.framing == cell.framing_id
                        && t.game_spec.year == Some(cell.year_value)
                })
                .cloned()
                .collect();
            let summary = delta_table(&members).map_err(|source| CounterfactualError::Cell {
                cell: cell.label(),
                source,
            })?;
            let result = FactorialCell::from_summary(cell.pool, cell.framing, cell.year, summary);
            Ok(FactorialRow { cell, result })
        })
        .collect()
}

/// Plays every participant through all eight within-participant conditions
/// and tabulates the cells.
pub fn run_factorial(
    generator: &dyn Backend,
    critic: &dyn Backend,
    schema: &TraitSchema,
    plan: &FactorialPlan,
    participants: &[FactorialParticipant<'_>],
    method: Method,
    options: &TrialOptions,
) -> Result<FactorialRun, CounterfactualError> {
    plan.validate()?;
    let mut jobs = Vec::with_capacity(participants.len() * 8);
    for p in participants {
        if plan.pool_index(p.subject.pool).is_none() {
            return Err(CounterfactualError::UnknownPool {
                participant: p.id.to_string(),
                pool: p.subject.pool.to_string(),
            });
        }
        for (partner, framing, year) in participant_schedule(plan, p.subject.self_party) {
            let item = format!("{}/{}/{framing}/{year}", p.id, partner.label());
            jobs.push(TrialJob {
                subject: p.subject,
                method,
                spec: GameSpec::with_year(framing, Some(year)),
                partner,
                seed: derive_seed(options.seed, "counterfactual", &item),
            });
        }
    }
    let trials = run_trials(generator, critic, schema, &jobs, options).map_err(|(i, source)| {
        let job = &jobs[i];
        let pool = job.subject.pool;
        CounterfactualError::Trial {
            cell: format!("{pool}/{}/{}", job.spec.framing, job.spec.year.unwrap_or_default()),
            participant: participants[i / 8].id.to_string(),
            source,
        }
    })?;
    let rows = cells_from_trials(plan, &trials)?;
    Ok(FactorialRun { trials, rows })
}

pub fn main_effects(rows: &[FactorialRow]) -> Result<Vec<(Factor, f64)>, AnalysisError> {
    let cells: Vec<FactorialCell> = rows.iter().map(|r| r.result).collect();
    Factor::ALL
        .iter()
        .map(|&f| factorial_main_effect(&cells, f).map(|e| (f, e)))
        .collect()
}

const CELL_HEADERS: [&str; 13] = [
    "pool", "framing", "year", "original_design", "dd", "dr", "dem_delta", "rr", "rd", "rep_delta", "avg_delta",
    "n_dem", "n_rep",
];

fn cell_fields(row: &FactorialRow) -> Vec<String> {
    let f = |x: f64| format!("{x:.2}");
    let s = row.result.summary;
    let get = |pick: fn(&analysis::DeltaSummary) -> f64| s.as_ref().map(pick).map_or_else(String::new, f);
    vec![
        row.cell.pool_id.clone(),
        row.cell.framing_id.to_string(),
        row.cell.year_value.to_string(),
        row.cell.original_design.to_string(),
        get(|s| s.dd),
        get(|s| s.dr),
        get(|s| s.dem_delta),
        get(|s| s.rr),
        get(|s| s.rd),
        get(|s| s.rep_delta),
        f(row.result.avg_delta),
        s.map_or_else(String::new, |s| (s.n_dd + s.n_dr).to_string()),
        s.map_or_else(String::new, |s| (s.n_rr + s.n_rd).to_string()),
    ]
}

pub fn cells_csv(rows: &[FactorialRow]) -> Result<String, AnalysisError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| AnalysisError::Csv(e.to_string());
    w.write_record(CELL_HEADERS).map_err(err)?;
    for row in rows {
        w.write_record(cell_fields(row)).map_err(err)?;
    }
    let bytes = w.into_inner().map_err(|e| AnalysisError::Csv(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Markdown table in the style of the published factorial table, original
/// designs marked, followed by the main effects.
pub fn report_markdown(plan: &FactorialPlan, rows: &[FactorialRow]) -> String {
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|row| {
            let f = cell_fields(row);
            let mark = if row.cell.original_design { "◆" } else { "" };
            vec![
                f[0].clone(),
                f[1].clone(),
                f[2].clone(),
                f[4].clone(),
                f[5].clone(),
                f[6].clone(),
                f[7].clone(),
                f[8].clone(),
                f[9].clone(),
                f[10].clone(),
                mark.to_string(),
            ]
        })
        .collect();
    let mut out = format!("## {:?} game: pool × framing × year\n\n", plan.game);
    out.push_str(&analysis::markdown_table(
        &["Pool", "Framing", "Year", "D→D", "D→R", "Dem Δ", "R→R", "R→D", "Rep Δ", "Avg Δ", "Original"],
        &body,
    ));
    out.push_str("\n◆ reproduces the design of a published study.\n");
    if let Ok(effects) = main_effects(rows) {
        out.push_str("\nMain effects on Avg Δ (level 1 minus level 0):\n\n");
        for (factor, effect) in effects {
            let _ = writeln!(out, "- {}: {effect:+.2}", factor.name());
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::ScriptedBackend;
    use crate::model::{Backstory, GenerationParams, QAPair, TraitProfile, PARTY_TRAIT};
    use std::collections::BTreeMap;

    #[test]
    fn dictator_plan_cells() {
        let plan = FactorialPlan::for_game(Game::Dictator);
        plan.validate().unwrap();
        let cells = enumerate_conditions(&plan);
        assert_eq!(cells.len(), 8);
        let originals: Vec<String> = cells.iter().filter(|c| c.original_design).map(|c| c.label()).collect();
        assert_eq!(originals, vec!["ID/ID/2014", "WD/WD/2019"]);
        let trust = FactorialPlan::for_game(Game::Trust);
        assert_eq!(trust.years, [2015, 2019]);
        let originals: Vec<String> =
            enumerate_conditions(&trust).iter().filter(|c| c.original_design).map(|c| c.label()).collect();
        assert_eq!(originals, vec!["CT/CT/2015", "WT/WT/2019"]);
    }

    #[test]
    fn invalid_plans() {
        let mut plan = FactorialPlan::for_game(Game::Dictator);
        plan.framings[1] = Framing::WT;
        assert!(plan.validate().is_err());
        let mut plan = FactorialPlan::for_game(Game::Dictator);
        plan.years = [2019, 2019];
        assert!(plan.validate().is_err());
    }

    #[test]
    fn plan_toml() {
        let plan: FactorialPlan = toml::from_str(
            "game = \"dictator\"\npools = [\"ID\", \"WD\"]\nframings = [\"ID\", \"WD\"]\nyears = [2014, 2019]\n",
        )
        .unwrap();
        assert_eq!(plan, FactorialPlan::for_game(Game::Dictator));
    }

    #[test]
    fn schedule_has_eight_conditions() {
        let plan = FactorialPlan::for_game(Game::Trust);
        let s = participant_schedule(&plan, Party::Democrat);
        assert_eq!(s.len(), 8);
        assert_eq!(s[0], (Party::Democrat, Framing::CT, 2015));
        assert_eq!(s[1], (Party::Democrat, Framing::WT, 2015));
        assert_eq!(s[7], (Party::Republican, Framing::WT, 2019));
    }

    fn persona(party: &str, id: &str) -> (Backstory, TraitProfile) {
        let backstory = Backstory {
            persona_id: id.into(),
            qa_pairs: vec![QAPair::new("Who are you?", format!("A {party}.")).unwrap()],
            generator_tag: "t".into(),
            attempts_used: vec![1],
        };
        let mut traits = BTreeMap::new();
        traits.insert(
            PARTY_TRAIT.to_string(),
            vec![
                ("Democrat".to_string(), if party == "Democrat" { 1.0 } else { 0.0 }),
                ("Republican".to_string(), if party == "Republican" { 1.0 } else { 0.0 }),
                ("Independent/Other".to_string(), 0.0),
            ],
        );
        (backstory, TraitProfile::new(id, traits).unwrap())
    }

    fn run_with(bonus: u32) -> FactorialRun {
        let schema = TraitSchema::new(vec![crate::survey::TraitDef::new(PARTY_TRAIT, &crate::survey::PARTY_LABELS)]).unwrap();
        let plan = FactorialPlan::for_game(Game::Dictator);
        let people: Vec<(Backstory, TraitProfile, Party, &str, String)> = (0..8)
            .map(|i| {
                let party = Party::BOTH[i % 2];
                let (b, p) = persona(party.label(), &format!("p{i}"));
                (b, p, party, plan.pools[(i / 2) % 2].as_str(), format!("h{i}"))
            })
            .collect();
        let participants: Vec<FactorialParticipant<'_>> = people
            .iter()
            .map(|(b, p, party, pool, id)| FactorialParticipant {
                subject: TrialSubject {
                    backstory: b,
                    profile: p,
                    participant_id: Some(id),
                    self_party: *party,
                    pool,
                },
                id,
            })
            .collect();
        // co-partisan iff the persona's party name matches the partner line
        let generator = ScriptedBackend::new("gen", move |prompt: &str, _: &GenerationParams| {
            let me_dem = prompt.contains("A Democrat.");
            let partner_dem = prompt.contains("Democrat\n\nSo put")
                || prompt.contains("as a Democrat.")
                || prompt.contains("send to DEMOCRAT?");
            let amount = 5 - bonus + if me_dem == partner_dem { bonus } else { 0 };
            format!("I will send ${amount}.")
        });
        let critic = ScriptedBackend::new("critic", |_: &str, _: &GenerationParams| "ACCEPT".to_string());
        run_factorial(&generator, &critic, &schema, &plan, &participants, Method::DeepBind, &TrialOptions::new(3)).unwrap()
    }

    #[test]
    fn constant_answers_give_zero_deltas() {
        let run = run_with(0);
        assert_eq!(run.trials.len(), 64);
        assert!(run.rows.iter().all(|r| r.result.avg_delta == 0.0));
    }

    #[test]
    fn copartisan_bonus_sets_every_delta() {
        let run = run_with(2);
        assert!(run.rows.iter().all(|r| r.result.avg_delta == 2.0), "{:?}", run.rows);
        // replaying the records reproduces the table
        assert_eq!(cells_from_trials(&FactorialPlan::for_game(Game::Dictator), &run.trials).unwrap(), run.rows);
        // no participant changes pool or party
        for t in &run.trials {
            let i: usize = t.participant_id.as_ref().unwrap()[1..].parse().unwrap();
            assert_eq!(t.self_party, Party::BOTH[i % 2]);
            assert_eq!(t.pool, ["ID", "WD"][(i / 2) % 2]);
        }
        let md = report_markdown(&FactorialPlan::for_game(Game::Dictator), &run.rows);
        assert_eq!(md.matches('◆').count(), 3);
        assert!(md.contains("- framing: +0.00"));
        let csv = cells_csv(&run.rows).unwrap();
        assert_eq!(csv.lines().count(), 9);
    }

    #[test]
    fn missing_pool_fails_loudly() {
        let plan = FactorialPlan::for_game(Game::Dictator);
        let trials: Vec<TrialRecord> = Vec::new();
        assert!(matches!(cells_from_trials(&plan, &trials), Err(CounterfactualError::Cell { .. })));
    }
}
