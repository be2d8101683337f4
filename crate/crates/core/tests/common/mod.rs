#![allow(dead_code)]

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const AGES: [&str; 4] = ["18-29", "30-44", "45-64", "65+"];
const GENDERS: [&str; 2] = ["Male", "Female"];
const RACES: [&str; 5] = ["White", "Black", "Hispanic", "Asian", "Other"];
const EDUCATION: [&str; 4] = ["High school or less", "Some college", "Bachelor's degree", "Graduate degree"];
const INCOME: [&str; 5] = ["Under $30k", "$30k-$60k", "$60k-$100k", "$100k-$150k", "Over $150k"];

/// A roster of `n` humans split across `pools`, alternating party.
pub fn roster_csv(n: usize, pools: [&str; 2], seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::from("id,party,pool,age_bracket,gender,race,education,income_bracket\n");
    for i in 0..n {
        let party = if i % 2 == 0 { "Democrat" } else { "Republican" };
        let pool = pools[(i / 2) % 2];
        let pick = |xs: &[&'static str], rng: &mut ChaCha8Rng| *xs.choose(rng).unwrap();
        out.push_str(&format!(
            "h{i:02},{party},{pool},{},{},{},\"{}\",{}\n",
            pick(&AGES, &mut rng),
            pick(&GENDERS, &mut rng),
            pick(&RACES, &mut rng),
            pick(&EDUCATION, &mut rng),
            pick(&INCOME, &mut rng),
        ));
    }
    out
}

/// Writes a roster and a simulator-backed config into `dir`; returns the config path.
pub fn write_study(dir: &Path, personas: usize, extra: &str) -> PathBuf {
    std::fs::write(dir.join("roster.csv"), roster_csv(personas, ["ID", "WD"], 11)).unwrap();
    let config = format!(
        "[study]\ngame = \"dictator\"\nroster = \"roster.csv\"\npersonas = {personas}\nseed = 2024\n\n\
         [output]\ndir = \"out\"\n\n{extra}"
    );
    let path = dir.join("study.toml");
    std::fs::write(&path, config).unwrap();
    path
}

/// Best total weight over every injective row → column mapping, summed in row order.
pub fn brute_force_assignment(w: &[Vec<f64>]) -> (f64, Vec<usize>) {
    fn rec(w: &[Vec<f64>], row: usize, used: &mut Vec<bool>, cur: &mut Vec<usize>, best: &mut Option<(f64, Vec<usize>)>) {
        if row == w.len() {
            let total = cur.iter().enumerate().map(|(i, &j)| w[i][j]).sum::<f64>();
            if best.as_ref().is_none_or(|(b, _)| total > *b) {
                *best = Some((total, cur.clone()));
            }
            return;
        }
        for j in 0..w[row].len() {
            if !used[j] {
                used[j] = true;
                cur.push(j);
                rec(w, row + 1, used, cur, best);
                cur.pop();
                used[j] = false;
            }
        }
    }
    let mut best = None;
    rec(w, 0, &mut vec![false; w[0].len()], &mut Vec::new(), &mut best);
    best.expect("n ≤ m admits a mapping")
}

/// Weights on a 1/64 grid, so every sum is exact; about a fifth are zero.
pub fn random_weights(rng: &mut ChaCha8Rng, n: usize, m: usize) -> Vec<Vec<f64>> {
    use rand::Rng;
    (0..n)
        .map(|_| {
            (0..m)
                .map(|_| if rng.gen_bool(0.2) { 0.0 } else { f64::from(rng.gen_range(0..=64u32)) / 64.0 })
                .collect()
        })
        .collect()
}

/// Solves (XᵀX)β = Xᵀy by Gauss–Jordan elimination with partial pivoting.
pub fn normal_equations(x: &[Vec<f64>], y: &[f64]) -> Vec<f64> {
    let p = x[0].len();
    let mut a = vec![vec![0.0; p + 1]; p];
    for (row, &yi) in x.iter().zip(y) {
        for i in 0..p {
            for j in 0..p {
                a[i][j] += row[i] * row[j];
            }
            a[i][p] += row[i] * yi;
        }
    }
    for col in 0..p {
        let pivot = (col..p).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, pivot);
        let d = a[col][col];
        for v in a[col].iter_mut() {
            *v /= d;
        }
        for r in 0..p {
            if r != col {
                let f = a[r][col];
                let pivot_row = a[col].clone();
                for (v, pv) in a[r].iter_mut().zip(pivot_row) {
                    *v -= f * pv;
                }
            }
        }
    }
    a.iter().map(|r| r[p]).collect()
}

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

/// `n` integer allocations whose mean is `mean` to the cent:
/// floor(mean) everywhere, one more on the first round(n·mean) mod n trials.
pub fn amounts_with_mean(mean: f64, n: u32) -> Vec<u32> {
    let total = (mean * f64::from(n)).round() as u32;
    let (base, extra) = (total / n, total % n);
    (0..n).map(|i| base + u32::from(i < extra)).collect()
}

use persona_games::analysis::{design_matrix, fit_ols, significance, DesignRow, Formula, Sidedness};

/// Random 0/1 design with a uniform response on [0, 10).
pub fn random_design(rng: &mut ChaCha8Rng, formula: Formula, n: usize) -> Vec<DesignRow> {
    use rand::Rng;
    (0..n)
        .map(|i| {
            let bit = |rng: &mut ChaCha8Rng| rng.gen_range(0..=1u8);
            let (same_p, self_p) = (bit(rng), bit(rng));
            let mut row = DesignRow {
                participant_id: format!("h{i}"),
                response: 0.0,
                same_p,
                self_p,
                study: None,
                year: None,
                framing: None,
                pool: None,
            };
            match formula {
                Formula::Human => row.study = Some(bit(rng)),
                Formula::Counterfactual => {
                    row.year = Some(bit(rng));
                    row.framing = Some(bit(rng));
                    row.pool = Some(bit(rng));
                }
            }
            row.response = rng.gen_range(0.0..10.0);
            row
        })
        .collect()
}

/// Fits `count` random full-rank designs and checks each against the normal-equations oracle.
pub fn ols_oracle_check(formula: Formula, n: usize, count: usize, seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checked = 0;
    while checked < count {
        let rows = random_design(&mut rng, formula, n);
        let Ok(fit) = fit_ols(&rows, formula) else { continue };
        let x = design_matrix(&rows, formula).map_err(|e| e.to_string())?;
        let y: Vec<f64> = rows.iter().map(|r| r.response).collect();
        let xr: Vec<Vec<f64>> = (0..x.nrows()).map(|i| x.row(i).iter().copied().collect()).collect();
        let oracle = normal_equations(&xr, &y);
        for (term, (b, o)) in fit.terms.iter().zip(fit.coefficients.iter().zip(&oracle)) {
            if (b - o).abs() >= 1e-8 {
                return Err(format!("{formula:?} {term}: {b} vs oracle {o}"));
            }
        }
        let r = nalgebra::DVector::from_vec(fit.residuals.clone());
        let xtr = (x.transpose() * r).amax();
        if xtr >= 1e-8 {
            return Err(format!("{formula:?}: ‖Xᵀr‖∞ = {xtr:e}"));
        }
        for (term, &t) in fit.terms.iter().zip(&fit.t_stats) {
            if t > 0.0 {
                let one = significance(&fit, term, Sidedness::OneSided).map_err(|e| e.to_string())?;
                let two = significance(&fit, term, Sidedness::TwoSided).map_err(|e| e.to_string())?;
                if (one - two / 2.0).abs() >= 1e-12 {
                    return Err(format!("{formula:?} {term}: one-sided {one} vs two-sided {two}"));
                }
            }
        }
        checked += 1;
    }
    Ok(())
}
