//! Two-level factorial regression of makespan on the fragment placement bits.
//!
//! Each fragment is a factor coded -1 (database) / +1 (product). The model
//! holds an intercept, all main effects, and interactions up to a chosen
//! order. Coefficients are in seconds per unit of coded factor, so the
//! classical effect (high minus low) is twice the coefficient.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::sweep::SweepRecord;

pub const DEFAULT_ALPHA: f64 = 0.05;
pub const DEFAULT_MAX_ORDER: usize = 3;

/// A product of factors; the empty product is the intercept.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Term {
    pub factors: Vec<usize>,
}

impl Term {
    pub fn order(&self) -> usize {
        self.factors.len()
    }

    pub fn name(&self, factor_names: &[String]) -> String {
        if self.factors.is_empty() {
            return "intercept".into();
        }
        let parts: Vec<&str> = self
            .factors
            .iter()
            .map(|&i| factor_names[i].as_str())
            .collect();
        parts.join("*")
    }

    /// Value of the term's column for a placement given as bits.
    pub fn coded(&self, bits: &[bool]) -> f64 {
        if self.factors.iter().filter(|&&i| !bits[i]).count() % 2 == 0 {
            1.0
        } else {
            -1.0
        }
    }
}

/// Intercept, then each order in lexicographic factor order.
pub fn model_terms(k: usize, max_order: usize) -> Vec<Term> {
    let mut out = vec![Term { factors: vec![] }];
    for order in 1..=max_order.min(k) {
        let mut combo: Vec<usize> = (0..order).collect();
        loop {
            out.push(Term {
                factors: combo.clone(),
            });
            // advance to the next combination in lexicographic order
            let mut i = order;
            while i > 0 && combo[i - 1] == k - order + i - 1 {
                i -= 1;
            }
            if i == 0 {
                break;
            }
            combo[i - 1] += 1;
            for j in i..order {
                combo[j] = combo[j - 1] + 1;
            }
        }
    }
    out
}

pub fn default_factor_names(k: usize) -> Vec<String> {
    (1..=k).map(|i| format!("F{i}")).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FitMethod {
    /// Complete balanced design: coefficients from orthogonal contrasts.
    Contrast,
    /// Anything else: ordinary least squares on the individual runs.
    LeastSquares,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TermEstimate {
    pub term: Term,
    pub name: String,
    pub coefficient: f64,
    pub std_err: f64,
    pub t: f64,
    pub p: f64,
    pub significant: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactorialFit {
    pub throughput_bps: f64,
    pub k: usize,
    pub estimates: Vec<TermEstimate>,
    /// Error variance used for the standard errors.
    pub sigma2: f64,
    pub error_dof: f64,
    pub method: FitMethod,
    pub alpha: f64,
    pub warnings: Vec<String>,
}

impl FactorialFit {
    /// Significant non-intercept terms, mains first, then by order and name.
    pub fn significant_terms(&self) -> Vec<&TermEstimate> {
        self.estimates
            .iter()
            .filter(|e| e.term.order() > 0 && e.significant)
            .collect()
    }

    pub fn estimate(&self, name: &str) -> Option<&TermEstimate> {
        self.estimates.iter().find(|e| e.name == name)
    }

    /// Predicted makespan for a placement.
    pub fn predict(&self, bits: &[bool]) -> f64 {
        self.estimates
            .iter()
            .map(|e| e.coefficient * e.term.coded(bits))
            .sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(ANALYSIS_CSV_HEADER);
        out.push('\n');
        for e in &self.estimates {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                e.name, e.coefficient, e.std_err, e.t, e.p, e.significant
            );
        }
        out
    }
}

pub const ANALYSIS_CSV_HEADER: &str = "term,coefficient_s,std_err,t,p,significant";

#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    pub max_order: usize,
    pub alpha: f64,
    /// Defaults to `F1..Fk`.
    pub factor_names: Option<Vec<String>>,
    /// Use least squares even when the contrast shortcut applies.
    pub force_least_squares: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_order: DEFAULT_MAX_ORDER,
            alpha: DEFAULT_ALPHA,
            factor_names: None,
            force_least_squares: false,
        }
    }
}

/// Fits the factorial model to the runs of a single throughput.
pub fn fit_factorial(records: &[SweepRecord], options: &FitOptions) -> Result<FactorialFit> {
    let first = records
        .first()
        .ok_or_else(|| Error::validation("no runs to analyze"))?;
    let throughput_bps = first.throughput_bps;
    if records.iter().any(|r| r.throughput_bps != throughput_bps) {
        return Err(Error::validation(
            "runs mix several throughputs; fit each separately",
        ));
    }
    if !(options.alpha > 0.0 && options.alpha < 1.0) {
        return Err(Error::validation(format!(
            "alpha {} is outside (0, 1)",
            options.alpha
        )));
    }
    let k = first.pattern_bits.len();
    let mut cells: BTreeMap<u64, (Vec<bool>, Vec<f64>)> = BTreeMap::new();
    for r in records {
        let p = r.pattern()?;
        if p.len() != k {
            return Err(Error::validation(format!(
                "pattern {} does not have {k} bits",
                r.pattern_bits
            )));
        }
        if !r.makespan_s.is_finite() {
            return Err(Error::validation(format!(
                "non-finite makespan for pattern {}",
                r.pattern_bits
            )));
        }
        cells
            .entry(p.index())
            .or_insert_with(|| (p.bits().to_vec(), Vec::new()))
            .1
            .push(r.makespan_s);
    }
    let names = match &options.factor_names {
        Some(n) if n.len() == k => n.clone(),
        Some(n) => {
            return Err(Error::validation(format!(
                "{} factor names for {k} factors",
                n.len()
            )));
        }
        None => default_factor_names(k),
    };
    let terms = model_terms(k, options.max_order);

    let reps = cells.values().next().map_or(0, |c| c.1.len());
    let complete = k < 64 && cells.len() as u128 == 1u128 << k;
    let balanced = cells.values().all(|c| c.1.len() == reps);

    let (pure_ss, pure_dof) = cells.values().fold((0.0, 0usize), |(ss, dof), (_, ys)| {
        let m = mean(ys);
        (
            ss + ys.iter().map(|y| (y - m).powi(2)).sum::<f64>(),
            dof + ys.len() - 1,
        )
    });

    let mut warnings = Vec::new();
    let (coefficients, unscaled_var, rss, method) =
        if complete && balanced && !options.force_least_squares {
            let n = cells.len() as f64;
            let ybar: Vec<(&Vec<bool>, f64)> =
                cells.values().map(|(b, ys)| (b, mean(ys))).collect();
            let beta: Vec<f64> = terms
                .iter()
                .map(|t| ybar.iter().map(|(b, y)| t.coded(b) * y).sum::<f64>() / n)
                .collect();
            let lack_of_fit: f64 = ybar
                .iter()
                .map(|(b, y)| {
                    let fit: f64 = terms.iter().zip(&beta).map(|(t, c)| c * t.coded(b)).sum();
                    (y - fit).powi(2)
                })
                .sum();
            let var = vec![1.0 / (n * reps as f64); terms.len()];
            (
                beta,
                var,
                lack_of_fit * reps as f64 + pure_ss,
                FitMethod::Contrast,
            )
        } else {
            if !options.force_least_squares {
                warnings.push(format!(
                    "design is {} ({} of 2^{k} patterns); using least squares",
                    if complete { "unbalanced" } else { "incomplete" },
                    cells.len()
                ));
            }
            let (beta, var, rss) = least_squares(&cells, &terms, &names)?;
            (beta, var, rss, FitMethod::LeastSquares)
        };

    let n_runs = records.len();
    let (sigma2, error_dof) = if pure_dof > 0 {
        (pure_ss / pure_dof as f64, pure_dof as f64)
    } else if n_runs > terms.len() {
        let dof = n_runs - terms.len();
        (rss / dof as f64, dof as f64)
    } else {
        warnings.push("no residual degrees of freedom; standard errors are zero".into());
        (0.0, 0.0)
    };

    let scale = cells
        .values()
        .flat_map(|c| c.1.iter())
        .fold(1.0f64, |m, y| m.max(y.abs()));
    let tol = 1e-9 * scale;
    let tdist =
        (error_dof > 0.0).then(|| StudentsT::new(0.0, 1.0, error_dof).expect("positive dof"));
    let estimates = terms
        .iter()
        .zip(coefficients.iter().zip(&unscaled_var))
        .map(|(term, (&coefficient, &v))| {
            let std_err = (sigma2 * v).sqrt();
            let (t, p) = if std_err > 0.0 {
                let t = coefficient / std_err;
                let dist = tdist.as_ref().expect("dof > 0 whenever sigma2 > 0");
                (t, (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0))
            } else if coefficient.abs() > tol {
                (f64::INFINITY.copysign(coefficient), 0.0)
            } else {
                (0.0, 1.0)
            };
            TermEstimate {
                term: term.clone(),
                name: term.name(&names),
                coefficient,
                std_err,
                t,
                p,
                significant: p < options.alpha,
            }
        })
        .collect();

    Ok(FactorialFit {
        throughput_bps,
        k,
        estimates,
        sigma2,
        error_dof,
        method,
        alpha: options.alpha,
        warnings,
    })
}

/// One fit per throughput, in order of first appearance.
pub fn fit_by_throughput(
    records: &[SweepRecord],
    options: &FitOptions,
) -> Result<Vec<FactorialFit>> {
    let mut order: Vec<f64> = Vec::new();
    for r in records {
        if !order.contains(&r.throughput_bps) {
            order.push(r.throughput_bps);
        }
    }
    order
        .into_iter()
        .map(|bps| {
            let at: Vec<SweepRecord> = records
                .iter()
                .filter(|r| r.throughput_bps == bps)
                .cloned()
                .collect();
            fit_factorial(&at, options)
        })
        .collect()
}

fn mean(ys: &[f64]) -> f64 {
    ys.iter().sum::<f64>() / ys.len() as f64
}

type LsFit = (Vec<f64>, Vec<f64>, f64);

fn least_squares(
    cells: &BTreeMap<u64, (Vec<bool>, Vec<f64>)>,
    terms: &[Term],
    names: &[String],
) -> Result<LsFit> {
    let rows: Vec<(&Vec<bool>, f64)> = cells
        .values()
        .flat_map(|(b, ys)| ys.iter().map(move |&y| (b, y)))
        .collect();
    let x = DMatrix::from_fn(rows.len(), terms.len(), |i, j| terms[j].coded(rows[i].0));
    let y = DVector::from_iterator(rows.len(), rows.iter().map(|r| r.1));

    // Gram-Schmidt over the columns in model order; a column that adds no
    // new direction is aliased with earlier terms.
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut aliased = Vec::new();
    for (j, term) in terms.iter().enumerate() {
        let mut v = x.column(j).into_owned();
        let norm0 = v.norm();
        for _ in 0..2 {
            for q in &basis {
                let d = q.dot(&v);
                v.axpy(-d, q, 1.0);
            }
        }
        let norm = v.norm();
        if norm <= 1e-9 * norm0.max(1.0) {
            aliased.push(term.name(names));
        } else {
            basis.push(v / norm);
        }
    }
    if !aliased.is_empty() {
        return Err(Error::RankDeficient(aliased));
    }

    let xtx = x.transpose() * &x;
    let chol = xtx.cholesky().ok_or_else(|| {
        Error::RankDeficient(vec!["design matrix is numerically singular".into()])
    })?;
    let beta = chol.solve(&(x.transpose() * &y));
    let inv = chol.inverse();
    let resid = &y - &x * &beta;
    Ok((
        beta.iter().copied().collect(),
        inv.diagonal().iter().copied().collect(),
        resid.norm_squared(),
    ))
}
