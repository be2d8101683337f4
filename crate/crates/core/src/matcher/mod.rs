//! Demographic matching of human participants to virtual personas.
//!
//! The weight between human `i` and persona `j` is the probability that the
//! persona's trait distributions produce exactly the human's trait tuple,
//! i.e. the product over traits of the mass on the human's category. An
//! exact maximum-weight injective assignment is then solved with the
//! Hungarian method.

mod hungarian;

use std::collections::BTreeSet;
use std::io::Read;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{HumanParticipant, Party, TraitProfile, PARTY_TRAIT};
use crate::survey::TraitSchema;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MatchError {
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("need at least as many personas as humans (n = {humans}, m = {personas})")]
    DimensionError { humans: usize, personas: usize },
    #[error("roster is empty")]
    EmptyRoster,
    #[error("duplicate {kind} id `{id}`")]
    DuplicateId { kind: &'static str, id: String },
    #[error("invalid weight matrix: {0}")]
    InvalidMatrix(String),
    #[error("roster: {0}")]
    Roster(String),
}

/// Likelihood that a persona reproduces every one of the human's traits.
pub fn match_weight(
    human: &HumanParticipant,
    profile: &TraitProfile,
    schema: &TraitSchema,
) -> Result<f64, MatchError> {
    let mut weight = 1.0;
    for name in schema.names() {
        let label = human.traits.get(name).ok_or_else(|| {
            MatchError::SchemaMismatch(format!("human `{}` lacks trait `{name}`", human.id))
        })?;
        let mass = profile.mass(name, label).ok_or_else(|| {
            MatchError::SchemaMismatch(format!(
                "persona `{}` lacks trait `{name}`",
                profile.persona_id
            ))
        })?;
        weight *= mass;
    }
    Ok(weight)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightMatrix {
    weights: Vec<Vec<f64>>,
    human_ids: Vec<String>,
    persona_ids: Vec<String>,
}

impl WeightMatrix {
    pub fn new(
        weights: Vec<Vec<f64>>,
        human_ids: Vec<String>,
        persona_ids: Vec<String>,
    ) -> Result<Self, MatchError> {
        let n = weights.len();
        if n == 0 {
            return Err(MatchError::EmptyRoster);
        }
        let m = weights[0].len();
        if m < n {
            return Err(MatchError::DimensionError { humans: n, personas: m });
        }
        if human_ids.len() != n || persona_ids.len() != m {
            return Err(MatchError::InvalidMatrix(format!(
                "{n}×{m} weights with {} row ids and {} column ids",
                human_ids.len(),
                persona_ids.len()
            )));
        }
        for (i, row) in weights.iter().enumerate() {
            if row.len() != m {
                return Err(MatchError::InvalidMatrix(format!("row {i} has {} entries, expected {m}", row.len())));
            }
            if let Some(w) = row.iter().find(|w| !(0.0..=1.0).contains(*w)) {
                return Err(MatchError::InvalidMatrix(format!("row {i} has weight {w} outside [0,1]")));
            }
        }
        Ok(Self {
            weights,
            human_ids,
            persona_ids,
        })
    }

    /// Matrix with positional ids `h0..`, `p0..`.
    pub fn from_weights(weights: Vec<Vec<f64>>) -> Result<Self, MatchError> {
        let n = weights.len();
        let m = weights.first().map_or(0, Vec::len);
        Self::new(
            weights,
            (0..n).map(|i| format!("h{i}")).collect(),
            (0..m).map(|j| format!("p{j}")).collect(),
        )
    }

    pub fn humans(&self) -> usize {
        self.weights.len()
    }

    pub fn personas(&self) -> usize {
        self.persona_ids.len()
    }

    pub fn get(&self, human: usize, persona: usize) -> f64 {
        self.weights[human][persona]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.weights
    }

    pub fn human_ids(&self) -> &[String] {
        &self.human_ids
    }

    pub fn persona_ids(&self) -> &[String] {
        &self.persona_ids
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    /// Persona column assigned to each human row.
    pub mapping: Vec<usize>,
    pub total_weight: f64,
}

impl Assignment {
    pub fn is_injective(&self) -> bool {
        let distinct: BTreeSet<_> = self.mapping.iter().collect();
        distinct.len() == self.mapping.len()
    }

    /// Humans whose matched persona has zero likelihood.
    pub fn zero_weight_rows(&self, w: &WeightMatrix) -> Vec<usize> {
        self.mapping
            .iter()
            .enumerate()
            .filter(|&(i, &j)| w.get(i, j) == 0.0)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Sum of the chosen weights, accumulated in row order.
pub fn assignment_weight(w: &WeightMatrix, mapping: &[usize]) -> f64 {
    mapping.iter().enumerate().map(|(i, &j)| w.get(i, j)).sum()
}

/// Exact maximum-weight injective assignment of humans to personas.
pub fn optimal_assignment(w: &WeightMatrix) -> Result<Assignment, MatchError> {
    let (n, m) = (w.humans(), w.personas());
    if m < n {
        return Err(MatchError::DimensionError { humans: n, personas: m });
    }
    let cost: Vec<Vec<f64>> = w
        .rows()
        .iter()
        .map(|row| row.iter().map(|x| -x).collect())
        .collect();
    let mapping = hungarian::min_cost_assignment(&cost);
    let assignment = Assignment {
        total_weight: assignment_weight(w, &mapping),
        mapping,
    };
    assert!(
        assignment.is_injective() && assignment.mapping.iter().all(|&j| j < m),
        "Hungarian solver returned a non-injective mapping"
    );
    let zero = assignment.zero_weight_rows(w);
    if !zero.is_empty() {
        let ids: Vec<&str> = zero.iter().map(|&i| w.human_ids()[i].as_str()).collect();
        tracing::warn!(count = zero.len(), humans = ?ids, "humans matched to personas with zero likelihood");
    }
    Ok(assignment)
}

pub fn build_weight_matrix(
    humans: &[HumanParticipant],
    profiles: &[TraitProfile],
    schema: &TraitSchema,
) -> Result<WeightMatrix, MatchError> {
    if humans.is_empty() {
        return Err(MatchError::EmptyRoster);
    }
    check_unique("persona", profiles.iter().map(|p| p.persona_id.as_str()))?;
    check_unique("human", humans.iter().map(|h| h.id.as_str()))?;
    if profiles.len() < humans.len() {
        return Err(MatchError::DimensionError {
            humans: humans.len(),
            personas: profiles.len(),
        });
    }
    let weights = humans
        .par_iter()
        .map(|h| {
            profiles
                .iter()
                .map(|p| match_weight(h, p, schema))
                .collect::<Result<Vec<_>, _>>()
        })
        .collect::<Result<Vec<_>, _>>()?;
    WeightMatrix::new(
        weights,
        humans.iter().map(|h| h.id.clone()).collect(),
        profiles.iter().map(|p| p.persona_id.clone()).collect(),
    )
}

fn check_unique<'a>(kind: &'static str, ids: impl Iterator<Item = &'a str>) -> Result<(), MatchError> {
    let mut seen = BTreeSet::new();
    for id in ids {
        if !seen.insert(id) {
            return Err(MatchError::DuplicateId {
                kind,
                id: id.to_string(),
            });
        }
    }
    Ok(())
}

/// One line of the assignment store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssignmentRow {
    pub human_id: String,
    pub persona_id: String,
    pub weight: f64,
}

pub fn assignment_rows(w: &WeightMatrix, assignment: &Assignment) -> Vec<AssignmentRow> {
    assignment
        .mapping
        .iter()
        .enumerate()
        .map(|(i, &j)| AssignmentRow {
            human_id: w.human_ids()[i].clone(),
            persona_id: w.persona_ids()[j].clone(),
            weight: w.get(i, j),
        })
        .collect()
}

/// Parses a roster CSV: columns `id`, `party`, `pool`, plus one column per
/// schema trait. The party column doubles as the party trait.
pub fn read_roster<R: Read>(reader: R, schema: &TraitSchema) -> Result<Vec<HumanParticipant>, MatchError> {
    let mut csv = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = csv
        .headers()
        .map_err(|e| MatchError::Roster(e.to_string()))?
        .clone();
    let column = |name: &str| headers.iter().position(|h| h == name);
    let id_col = column("id").ok_or_else(|| MatchError::Roster("missing `id` column".into()))?;
    let party_col = column("party").ok_or_else(|| MatchError::Roster("missing `party` column".into()))?;
    let pool_col = column("pool").ok_or_else(|| MatchError::Roster("missing `pool` column".into()))?;
    let mut trait_cols = Vec::new();
    for def in &schema.traits {
        let col = column(&def.name)
            .ok_or_else(|| MatchError::Roster(format!("missing trait column `{}`", def.name)))?;
        trait_cols.push((def, col));
    }

    let mut humans = Vec::new();
    for (line, record) in csv.records().enumerate() {
        let record = record.map_err(|e| MatchError::Roster(e.to_string()))?;
        let row = line + 2;
        let field = |col: usize| record.get(col).unwrap_or("").to_string();
        let party: Party = field(party_col)
            .parse()
            .map_err(|e| MatchError::Roster(format!("row {row}: {e}")))?;
        let mut traits = std::collections::BTreeMap::new();
        for (def, col) in &trait_cols {
            let raw = if def.name == PARTY_TRAIT {
                party.label().to_string()
            } else {
                field(*col)
            };
            let label = def.canonical_label(&raw).ok_or_else(|| {
                MatchError::SchemaMismatch(format!(
                    "row {row}: `{raw}` is not a category of `{}`",
                    def.name
                ))
            })?;
            traits.insert(def.name.clone(), label.to_string());
        }
        let human = HumanParticipant {
            id: field(id_col),
            traits,
            party,
            pool: field(pool_col),
        };
        human
            .validate(schema.names())
            .map_err(|e| MatchError::Roster(e.to_string()))?;
        humans.push(human);
    }
    check_unique("human", humans.iter().map(|h| h.id.as_str()))?;
    Ok(humans)
}

pub fn load_roster(path: &Path, schema: &TraitSchema) -> Result<Vec<HumanParticipant>, MatchError> {
    let file = std::fs::File::open(path).map_err(|e| MatchError::Roster(format!("{}: {e}", path.display())))?;
    read_roster(file, schema)
}
