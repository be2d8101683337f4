//! Partisan Δ summaries, factorial main effects and the interaction OLS
//! models with t-tests.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::model::{Framing, Party, TrialRecord};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error("no trials in the {0} cell")]
    EmptyCell(&'static str),
    #[error("factorial design is incomplete: {0}")]
    IncompleteDesign(String),
    #[error("design matrix is rank deficient (column `{0}`)")]
    RankDeficient(String),
    #[error("need more observations than terms (n = {n}, terms = {terms})")]
    InsufficientData { n: usize, terms: usize },
    #[error("design row does not fit the {0:?} formula")]
    WrongFamily(Formula),
    #[error("unknown term `{0}`")]
    UnknownTerm(String),
    #[error("csv: {0}")]
    Csv(String),
}

/// Mean amounts per (sender, partner) cell and the partisan gaps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeltaSummary {
    pub dd: f64,
    pub dr: f64,
    pub rr: f64,
    pub rd: f64,
    pub dem_delta: f64,
    pub rep_delta: f64,
    pub mean_delta: f64,
    pub n_dd: usize,
    pub n_dr: usize,
    pub n_rr: usize,
    pub n_rd: usize,
}

impl DeltaSummary {
    pub fn from_means(dd: f64, dr: f64, rr: f64, rd: f64) -> Self {
        Self::with_counts(dd, dr, rr, rd, [1; 4])
    }

    fn with_counts(dd: f64, dr: f64, rr: f64, rd: f64, [n_dd, n_dr, n_rr, n_rd]: [usize; 4]) -> Self {
        let dem_delta = dd - dr;
        let rep_delta = rr - rd;
        Self {
            dd,
            dr,
            rr,
            rd,
            dem_delta,
            rep_delta,
            mean_delta: (dem_delta + rep_delta) / 2.0,
            n_dd,
            n_dr,
            n_rr,
            n_rd,
        }
    }
}

/// Δ summary from `(sender, partner, amount)` observations.
pub fn delta_summary<I>(observations: I) -> Result<DeltaSummary, AnalysisError>
where
    I: IntoIterator<Item = (Party, Party, f64)>,
{
    let mut sums = [0.0f64; 4];
    let mut counts = [0usize; 4];
    for (sender, partner, amount) in observations {
        let k = match (sender, partner) {
            (Party::Democrat, Party::Democrat) => 0,
            (Party::Democrat, Party::Republican) => 1,
            (Party::Republican, Party::Republican) => 2,
            (Party::Republican, Party::Democrat) => 3,
        };
        sums[k] += amount;
        counts[k] += 1;
    }
    const NAMES: [&str; 4] = ["Dem→Dem", "Dem→Rep", "Rep→Rep", "Rep→Dem"];
    if let Some(k) = counts.iter().position(|&c| c == 0) {
        return Err(AnalysisError::EmptyCell(NAMES[k]));
    }
    let mean = |k: usize| sums[k] / counts[k] as f64;
    Ok(DeltaSummary::with_counts(mean(0), mean(1), mean(2), mean(3), counts))
}

pub fn delta_table(trials: &[TrialRecord]) -> Result<DeltaSummary, AnalysisError> {
    delta_summary(
        trials
            .iter()
            .map(|t| (t.self_party, t.partner_party, f64::from(t.amount))),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Factor {
    Year,
    Framing,
    Pool,
}

impl Factor {
    pub const ALL: [Factor; 3] = [Factor::Year, Factor::Framing, Factor::Pool];

    pub fn name(self) -> &'static str {
        match self {
            Factor::Year => "year",
            Factor::Framing => "framing",
            Factor::Pool => "pool",
        }
    }
}

/// One (pool, framing, year) combination of the counterfactual design.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FactorialCell {
    pub pool: u8,
    pub framing: u8,
    pub year: u8,
    pub avg_delta: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary: Option<DeltaSummary>,
}

impl FactorialCell {
    pub fn new(pool: u8, framing: u8, year: u8, avg_delta: f64) -> Self {
        Self {
            pool,
            framing,
            year,
            avg_delta,
            summary: None,
        }
    }

    pub fn from_summary(pool: u8, framing: u8, year: u8, summary: DeltaSummary) -> Self {
        Self {
            pool,
            framing,
            year,
            avg_delta: summary.mean_delta,
            summary: Some(summary),
        }
    }

    pub fn level(&self, factor: Factor) -> u8 {
        match factor {
            Factor::Year => self.year,
            Factor::Framing => self.framing,
            Factor::Pool => self.pool,
        }
    }
}

/// Mean avg Δ at `factor` = 1 minus the mean at `factor` = 0.
pub fn factorial_main_effect(cells: &[FactorialCell], factor: Factor) -> Result<f64, AnalysisError> {
    if cells.len() != 8 {
        return Err(AnalysisError::IncompleteDesign(format!("{} cells, expected 8", cells.len())));
    }
    let mut seen = [false; 8];
    for c in cells {
        if c.pool > 1 || c.framing > 1 || c.year > 1 {
            return Err(AnalysisError::IncompleteDesign(format!(
                "non-binary indicators ({}, {}, {})",
                c.pool, c.framing, c.year
            )));
        }
        let k = usize::from(c.pool) * 4 + usize::from(c.framing) * 2 + usize::from(c.year);
        if std::mem::replace(&mut seen[k], true) {
            return Err(AnalysisError::IncompleteDesign(format!(
                "combination ({}, {}, {}) appears twice",
                c.pool, c.framing, c.year
            )));
        }
    }
    let (mut high, mut low) = (0.0, 0.0);
    for c in cells {
        if c.level(factor) == 1 {
            high += c.avg_delta;
        } else {
            low += c.avg_delta;
        }
    }
    Ok(high / 4.0 - low / 4.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Formula {
    /// Two studies with a single study indicator.
    Human,
    /// Year, framing and pool varied independently.
    Counterfactual,
}

pub const HUMAN_TERMS: [&str; 6] = ["Intercept", "SameP", "SelfP", "Study", "SameP×SelfP", "SameP×Study"];
pub const COUNTERFACTUAL_TERMS: [&str; 10] = [
    "Intercept",
    "SameP",
    "SelfP",
    "Year",
    "Framing",
    "Pool",
    "SameP×SelfP",
    "SameP×Year",
    "SameP×Framing",
    "SameP×Pool",
];

impl Formula {
    pub fn terms(self) -> &'static [&'static str] {
        match self {
            Formula::Human => &HUMAN_TERMS,
            Formula::Counterfactual => &COUNTERFACTUAL_TERMS,
        }
    }
}

/// One aggregated observation for the regression models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignRow {
    pub participant_id: String,
    pub response: f64,
    pub same_p: u8,
    /// 1 for Democratic senders.
    pub self_p: u8,
    #[serde(default)]
    pub study: Option<u8>,
    #[serde(default)]
    pub year: Option<u8>,
    #[serde(default)]
    pub framing: Option<u8>,
    #[serde(default)]
    pub pool: Option<u8>,
}

impl DesignRow {
    pub fn formula(&self) -> Option<Formula> {
        let cf = [self.year, self.framing, self.pool];
        match (self.study, cf.iter().all(Option::is_some), cf.iter().all(Option::is_none)) {
            (Some(_), _, true) => Some(Formula::Human),
            (None, true, _) => Some(Formula::Counterfactual),
            _ => None,
        }
    }

    fn regressors(&self, formula: Formula) -> Result<Vec<f64>, AnalysisError> {
        if self.formula() != Some(formula) {
            return Err(AnalysisError::WrongFamily(formula));
        }
        let s = f64::from(self.same_p);
        let d = f64::from(self.self_p);
        let v = |x: Option<u8>| f64::from(x.unwrap_or(0));
        Ok(match formula {
            Formula::Human => {
                let k = v(self.study);
                vec![1.0, s, d, k, s * d, s * k]
            }
            Formula::Counterfactual => {
                let (y, f, p) = (v(self.year), v(self.framing), v(self.pool));
                vec![1.0, s, d, y, f, p, s * d, s * y, s * f, s * p]
            }
        })
    }
}

pub fn design_matrix(rows: &[DesignRow], formula: Formula) -> Result<DMatrix<f64>, AnalysisError> {
    let p = formula.terms().len();
    let mut data = Vec::with_capacity(rows.len() * p);
    for row in rows {
        data.extend(row.regressors(formula)?);
    }
    Ok(DMatrix::from_row_slice(rows.len(), p, &data))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionFit {
    pub terms: Vec<String>,
    pub coefficients: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub t_stats: Vec<f64>,
    /// Two-sided p values.
    pub p_values: Vec<f64>,
    pub n: usize,
    pub dof: usize,
    pub residual_variance: f64,
    pub residuals: Vec<f64>,
}

impl RegressionFit {
    pub fn index(&self, term: &str) -> Result<usize, AnalysisError> {
        self.terms
            .iter()
            .position(|t| t == term)
            .ok_or_else(|| AnalysisError::UnknownTerm(term.to_string()))
    }

    pub fn coefficient(&self, term: &str) -> Result<f64, AnalysisError> {
        Ok(self.coefficients[self.index(term)?])
    }
}

/// Least squares via Householder QR, with classical standard errors.
pub fn fit_matrix(x: &DMatrix<f64>, y: &[f64], terms: &[&str]) -> Result<RegressionFit, AnalysisError> {
    let (n, p) = x.shape();
    assert_eq!(p, terms.len(), "one name per design column");
    assert_eq!(n, y.len(), "one response per design row");
    if n <= p {
        return Err(AnalysisError::InsufficientData { n, terms: p });
    }
    let qr = x.clone().qr();
    let r = qr.r();
    let scale = (0..p).map(|j| r[(j, j)].abs()).fold(0.0, f64::max);
    if let Some(j) = (0..p).find(|&j| r[(j, j)].abs() <= scale * 1e-10 || scale == 0.0) {
        return Err(AnalysisError::RankDeficient(terms[j].to_string()));
    }
    let y = DVector::from_column_slice(y);
    let mut qty = y.clone();
    qr.q_tr_mul(&mut qty);
    let beta = r
        .solve_upper_triangular(&qty.rows(0, p).into_owned())
        .ok_or_else(|| AnalysisError::RankDeficient(terms[p - 1].to_string()))?;
    let residuals = &y - x * &beta;
    let dof = n - p;
    let sigma2 = residuals.norm_squared() / dof as f64;
    let r_inv = r
        .solve_upper_triangular(&DMatrix::identity(p, p))
        .ok_or_else(|| AnalysisError::RankDeficient(terms[p - 1].to_string()))?;
    // (XᵀX)⁻¹ = R⁻¹ R⁻ᵀ, so its diagonal is the squared row norms of R⁻¹.
    let std_errors: Vec<f64> = (0..p)
        .map(|j| (sigma2 * r_inv.row(j).norm_squared()).sqrt())
        .collect();
    let coefficients: Vec<f64> = beta.iter().copied().collect();
    let t_stats: Vec<f64> = coefficients
        .iter()
        .zip(&std_errors)
        .map(|(b, se)| if *se > 0.0 { b / se } else { f64::INFINITY * b.signum() })
        .collect();
    let p_values = t_stats.iter().map(|&t| p_value(t, dof, Sidedness::TwoSided)).collect();
    Ok(RegressionFit {
        terms: terms.iter().map(|t| t.to_string()).collect(),
        coefficients,
        std_errors,
        t_stats,
        p_values,
        n,
        dof,
        residual_variance: sigma2,
        residuals: residuals.iter().copied().collect(),
    })
}

pub fn fit_ols(rows: &[DesignRow], formula: Formula) -> Result<RegressionFit, AnalysisError> {
    let x = design_matrix(rows, formula)?;
    let y: Vec<f64> = rows.iter().map(|r| r.response).collect();
    fit_matrix(&x, &y, formula.terms())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sidedness {
    /// P(T ≥ t): the hypothesized effect is positive.
    OneSided,
    TwoSided,
}

/// Within-participant terms get a one-sided test, everything else two-sided.
pub fn default_sidedness(formula: Formula, term: &str) -> Sidedness {
    const WITHIN: [&str; 5] = ["SameP", "Year", "Framing", "SameP×Year", "SameP×Framing"];
    if formula == Formula::Counterfactual && WITHIN.contains(&term) {
        Sidedness::OneSided
    } else {
        Sidedness::TwoSided
    }
}

pub fn p_value(t: f64, dof: usize, sidedness: Sidedness) -> f64 {
    if t.is_nan() {
        return f64::NAN;
    }
    let dist = StudentsT::new(0.0, 1.0, dof as f64).expect("dof is positive");
    match sidedness {
        Sidedness::OneSided => dist.sf(t),
        Sidedness::TwoSided => (2.0 * dist.sf(t.abs())).min(1.0),
    }
}

pub fn significance(fit: &RegressionFit, term: &str, sidedness: Sidedness) -> Result<f64, AnalysisError> {
    let i = fit.index(term)?;
    Ok(p_value(fit.t_stats[i], fit.dof, sidedness))
}

pub fn stars(p: f64) -> &'static str {
    if p < 0.001 {
        "***"
    } else if p < 0.01 {
        "**"
    } else if p < 0.05 {
        "*"
    } else {
        ""
    }
}

/// How trials map onto design indicators.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "formula", rename_all = "snake_case")]
pub enum Grouping {
    /// Study = 1 for the later (Whitt) framings.
    Human,
    /// Year = 1 at `treated_year`, Pool = 1 for `treated_pool`, Framing = 1
    /// for the later (Whitt) framings.
    Counterfactual { treated_pool: String, treated_year: i32 },
}

fn is_later_framing(f: Framing) -> bool {
    matches!(f, Framing::WD | Framing::WT)
}

/// Averages each participant's trials within each condition combination.
///
/// Trials without a participant id are grouped by persona.
pub fn aggregate_participants(trials: &[TrialRecord], grouping: &Grouping) -> Vec<DesignRow> {
    let mut groups: BTreeMap<(String, [u8; 6]), (f64, usize)> = BTreeMap::new();
    for t in trials {
        let id = t.participant_id.clone().unwrap_or_else(|| t.persona_id.clone());
        let same = u8::from(t.is_copartisan());
        let dem = u8::from(t.self_party == Party::Democrat);
        let later = u8::from(is_later_framing(t.game_spec.framing));
        // [same, self, study, year, framing, pool]; 2 marks an absent field
        let key = match grouping {
            Grouping::Human => [same, dem, later, 2, 2, 2],
            Grouping::Counterfactual {
                treated_pool,
                treated_year,
            } => [
                same,
                dem,
                2,
                u8::from(t.game_spec.year == Some(*treated_year)),
                later,
                u8::from(&t.pool == treated_pool),
            ],
        };
        let slot = groups.entry((id, key)).or_insert((0.0, 0));
        slot.0 += f64::from(t.amount);
        slot.1 += 1;
    }
    let opt = |x: u8| (x != 2).then_some(x);
    groups
        .into_iter()
        .map(|((participant_id, k), (sum, n))| DesignRow {
            participant_id,
            response: sum / n as f64,
            same_p: k[0],
            self_p: k[1],
            study: opt(k[2]),
            year: opt(k[3]),
            framing: opt(k[4]),
            pool: opt(k[5]),
        })
        .collect()
}

/// Pads cells so every column lines up.
pub fn markdown_table(headers: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = headers.iter().map(|h| h.chars().count()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |cells: Vec<&str>| {
        let padded: Vec<String> = cells
            .iter()
            .zip(&widths)
            .map(|(c, &w)| format!("{c}{}", " ".repeat(w - c.chars().count())))
            .collect();
        format!("| {} |\n", padded.join(" | "))
    };
    let mut out = line(headers.to_vec());
    out.push_str(&format!(
        "|{}|\n",
        widths.iter().map(|&w| "-".repeat(w + 2)).collect::<Vec<_>>().join("|")
    ));
    for row in rows {
        out.push_str(&line(row.iter().map(String::as_str).collect()));
    }
    out
}

fn csv_string(headers: &[&str], rows: &[Vec<String>]) -> Result<String, AnalysisError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(headers).map_err(|e| AnalysisError::Csv(e.to_string()))?;
    for row in rows {
        w.write_record(row).map_err(|e| AnalysisError::Csv(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| AnalysisError::Csv(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

const DELTA_HEADERS: [&str; 12] = [
    "condition", "dd", "dr", "dem_delta", "rr", "rd", "rep_delta", "mean_delta", "n_dd", "n_dr", "n_rr", "n_rd",
];

fn delta_cells(label: &str, s: &DeltaSummary) -> Vec<String> {
    let f = |x: f64| format!("{x:.2}");
    vec![
        label.to_string(),
        f(s.dd),
        f(s.dr),
        f(s.dem_delta),
        f(s.rr),
        f(s.rd),
        f(s.rep_delta),
        f(s.mean_delta),
        s.n_dd.to_string(),
        s.n_dr.to_string(),
        s.n_rr.to_string(),
        s.n_rd.to_string(),
    ]
}

/// Labelled Δ summaries in the layout of the ablation tables.
pub fn delta_csv(rows: &[(String, DeltaSummary)]) -> Result<String, AnalysisError> {
    let cells: Vec<_> = rows.iter().map(|(l, s)| delta_cells(l, s)).collect();
    csv_string(&DELTA_HEADERS, &cells)
}

pub fn delta_markdown(rows: &[(String, DeltaSummary)]) -> String {
    let cells: Vec<_> = rows
        .iter()
        .map(|(l, s)| delta_cells(l, s)[..8].to_vec())
        .collect();
    markdown_table(
        &["Condition", "D→D", "D→R", "Dem Δ", "R→R", "R→D", "Rep Δ", "Mean Δ"],
        &cells,
    )
}

fn regression_cells(fit: &RegressionFit, formula: Formula) -> Vec<Vec<String>> {
    fit.terms
        .iter()
        .enumerate()
        .map(|(i, term)| {
            let side = default_sidedness(formula, term);
            let p = p_value(fit.t_stats[i], fit.dof, side);
            vec![
                term.clone(),
                format!("{:.4}", fit.coefficients[i]),
                format!("{:.4}", fit.std_errors[i]),
                format!("{:.3}", fit.t_stats[i]),
                format!("{p:.4}"),
                match side {
                    Sidedness::OneSided => "one".into(),
                    Sidedness::TwoSided => "two".into(),
                },
                stars(p).to_string(),
            ]
        })
        .collect()
}

const REGRESSION_HEADERS: [&str; 7] = ["term", "coef", "se", "t", "p", "sided", "stars"];

pub fn regression_csv(fit: &RegressionFit, formula: Formula) -> Result<String, AnalysisError> {
    csv_string(&REGRESSION_HEADERS, &regression_cells(fit, formula))
}

pub fn regression_markdown(fit: &RegressionFit, formula: Formula) -> String {
    let mut out = markdown_table(&REGRESSION_HEADERS, &regression_cells(fit, formula));
    let _ = write!(
        out,
        "\nn = {}, dof = {}, residual variance = {:.4}; classical OLS standard errors. \
         ***p<0.001, **p<0.01, *p<0.05\n",
        fit.n, fit.dof, fit.residual_variance
    );
    out
}
