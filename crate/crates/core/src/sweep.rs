//! Exhaustive experiment campaign: every placement pattern at every product
//! throughput, replicated with independent seeds.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::scenario::{DistributionPattern, Scenario};
use crate::workflow::{SimOptions, Simulator};

pub const DEFAULT_PATTERN_CAP: usize = 20;

/// All `2^k` patterns in binary counting order, fragment 1 least significant.
pub fn enumerate_patterns(k: usize) -> Result<Vec<DistributionPattern>> {
    enumerate_patterns_capped(k, DEFAULT_PATTERN_CAP)
}

pub fn enumerate_patterns_capped(k: usize, cap: usize) -> Result<Vec<DistributionPattern>> {
    if k > cap || k >= 64 {
        return Err(Error::validation(format!(
            "{k} fragments give 2^{k} patterns, above the cap of 2^{cap}; \
             restrict the pattern set or raise the cap"
        )));
    }
    Ok((0..1u64 << k)
        .map(|i| DistributionPattern::from_index(k, i))
        .collect())
}

/// Parses `1M`, `54M`, `500k`, `1G` or a plain number of bits per second.
pub fn parse_throughput(text: &str) -> Result<f64> {
    let t = text.trim();
    let t = t
        .strip_suffix("bps")
        .or_else(|| t.strip_suffix(['b', 'B']))
        .unwrap_or(t);
    let (num, scale) = match t.char_indices().last() {
        Some((i, 'k' | 'K')) => (&t[..i], 1e3),
        Some((i, 'm' | 'M')) => (&t[..i], 1e6),
        Some((i, 'g' | 'G')) => (&t[..i], 1e9),
        _ => (t, 1.0),
    };
    let v: f64 = num
        .trim()
        .parse()
        .map_err(|_| Error::parse(format!("invalid throughput {text:?}")))?;
    let v = v * scale;
    if !(v > 0.0 && v.is_finite()) {
        return Err(Error::parse(format!(
            "throughput must be positive: {text:?}"
        )));
    }
    Ok(v)
}

/// Short label for a throughput: `100M`, `54M`, `1M`, `500k`.
pub fn format_throughput(bps: f64) -> String {
    for (scale, suffix) in [(1e9, "G"), (1e6, "M"), (1e3, "k")] {
        if bps >= scale {
            return format!("{}{suffix}", bps / scale);
        }
    }
    format!("{bps}")
}

/// Seed for one run, mixed from the campaign seed and the run coordinates.
pub fn run_seed(base_seed: u64, pattern_id: u64, throughput_bps: f64, replicate: u32) -> u64 {
    [pattern_id, throughput_bps.to_bits(), u64::from(replicate)]
        .into_iter()
        .fold(splitmix64(base_seed), |acc, x| {
            splitmix64(acc ^ splitmix64(x))
        })
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPlan {
    pub throughputs: Vec<f64>,
    pub replicates: u32,
    pub base_seed: u64,
    /// `None` runs all `2^k` patterns.
    pub patterns: Option<Vec<DistributionPattern>>,
    pub jitter: bool,
}

impl Default for SweepPlan {
    fn default() -> Self {
        Self {
            throughputs: vec![100e6, 54e6, 11e6, 1e6],
            replicates: 10,
            base_seed: 0,
            patterns: None,
            jitter: true,
        }
    }
}

impl SweepPlan {
    pub fn validate(&self) -> Result<()> {
        if self.replicates == 0 {
            return Err(Error::validation("replicates must be >= 1"));
        }
        if self.throughputs.is_empty() {
            return Err(Error::validation("at least one throughput is required"));
        }
        if let Some(t) = self
            .throughputs
            .iter()
            .find(|t| !(**t > 0.0 && t.is_finite()))
        {
            return Err(Error::validation(format!("throughput {t} is not positive")));
        }
        Ok(())
    }

    pub fn pattern_set(&self, k: usize) -> Result<Vec<DistributionPattern>> {
        match &self.patterns {
            Some(p) => {
                if let Some(bad) = p.iter().find(|p| p.len() != k) {
                    return Err(Error::validation(format!(
                        "pattern {} does not have {k} bits",
                        bad.bit_string()
                    )));
                }
                Ok(p.clone())
            }
            None => enumerate_patterns(k),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRecord {
    pub pattern_id: u64,
    pub pattern_bits: String,
    pub throughput_bps: f64,
    pub replicate: u32,
    pub seed: u64,
    pub makespan_s: f64,
}

impl SweepRecord {
    pub fn pattern(&self) -> Result<DistributionPattern> {
        DistributionPattern::parse_bit_string(&self.pattern_bits)
    }
}

pub const SWEEP_CSV_HEADER: &str =
    "pattern_id,pattern_bits,throughput_bps,replicate,seed,makespan_s";

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub records: Vec<SweepRecord>,
}

impl SweepResult {
    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(64 * (self.records.len() + 1));
        out.push_str(SWEEP_CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.pattern_id, r.pattern_bits, r.throughput_bps, r.replicate, r.seed, r.makespan_s
            );
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty());
        match lines.next() {
            Some((_, h)) if h.trim() == SWEEP_CSV_HEADER => {}
            Some((_, h)) => return Err(Error::parse(format!("unexpected sweep CSV header {h:?}"))),
            None => return Err(Error::parse("sweep CSV is empty")),
        }
        let mut records = Vec::new();
        for (n, line) in lines {
            let bad =
                |what: &str| Error::parse(format!("line {}: invalid {what}: {line:?}", n + 1));
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if f.len() != 6 {
                return Err(bad("field count"));
            }
            let rec = SweepRecord {
                pattern_id: f[0].parse().map_err(|_| bad("pattern_id"))?,
                pattern_bits: f[1].to_owned(),
                throughput_bps: f[2].parse().map_err(|_| bad("throughput_bps"))?,
                replicate: f[3].parse().map_err(|_| bad("replicate"))?,
                seed: f[4].parse().map_err(|_| bad("seed"))?,
                makespan_s: f[5].parse().map_err(|_| bad("makespan_s"))?,
            };
            if rec.pattern()?.index() != rec.pattern_id {
                return Err(bad("pattern_id/pattern_bits pair"));
            }
            records.push(rec);
        }
        if records.is_empty() {
            return Err(Error::parse("sweep CSV has no records"));
        }
        Ok(Self { records })
    }

    pub fn throughputs(&self) -> Vec<f64> {
        let mut out: Vec<f64> = Vec::new();
        for r in &self.records {
            if !out.contains(&r.throughput_bps) {
                out.push(r.throughput_bps);
            }
        }
        out
    }

    pub fn at_throughput(&self, bps: f64) -> Vec<SweepRecord> {
        self.records
            .iter()
            .filter(|r| r.throughput_bps == bps)
            .cloned()
            .collect()
    }
}

/// Runs every (pattern, throughput, replicate) on up to `jobs` threads.
/// Records come back sorted by throughput (plan order), pattern id and
/// replicate, so the result does not depend on scheduling.
pub fn run_sweep(scenario: &Scenario, plan: &SweepPlan, jobs: usize) -> Result<SweepResult> {
    plan.validate()?;
    let patterns = plan.pattern_set(scenario.k())?;
    let sim = Simulator::new(scenario)?;
    let options = SimOptions {
        jitter: plan.jitter,
        ..SimOptions::default()
    };

    let mut tasks =
        Vec::with_capacity(patterns.len() * plan.throughputs.len() * plan.replicates as usize);
    for (ti, &bps) in plan.throughputs.iter().enumerate() {
        for p in &patterns {
            for rep in 0..plan.replicates {
                tasks.push((ti, bps, p, rep));
            }
        }
    }
    let run_one = |&(ti, bps, p, rep): &(usize, f64, &DistributionPattern, u32)| {
        let pattern_id = p.index();
        let seed = run_seed(plan.base_seed, pattern_id, bps, rep);
        let wrap = |e: Error| Error::Sweep {
            pattern_id,
            pattern_bits: p.bit_string(),
            throughput_bps: bps,
            replicate: rep,
            source: Box::new(e),
        };
        let r = sim.run(p, bps, seed, options).map_err(wrap)?;
        Ok((
            ti,
            SweepRecord {
                pattern_id,
                pattern_bits: p.bit_string(),
                throughput_bps: bps,
                replicate: rep,
                seed,
                makespan_s: r.makespan_s,
            },
        ))
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::config(format!("thread pool: {e}")))?;
    let mut out: Vec<(usize, SweepRecord)> =
        pool.install(|| tasks.par_iter().map(run_one).collect::<Result<Vec<_>>>())?;
    out.sort_by(|(ta, a), (tb, b)| {
        ta.cmp(tb)
            .then(a.pattern_id.cmp(&b.pattern_id))
            .then(a.replicate.cmp(&b.replicate))
    });
    Ok(SweepResult {
        records: out.into_iter().map(|(_, r)| r).collect(),
    })
}

/// Statistics of one (pattern, throughput) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CellSummary {
    pub pattern_id: u64,
    pub pattern_bits: String,
    pub throughput_bps: f64,
    pub n: usize,
    pub mean: f64,
    /// Unbiased sample variance; 0 when `n == 1` (see `variance_defined`).
    pub variance: f64,
    /// Half-width of the Student-t 95% confidence interval.
    pub ci95: f64,
    pub variance_defined: bool,
}

/// Groups records by (throughput, pattern) and summarizes each cell. Cells
/// are ordered by first appearance of the throughput, then pattern id.
pub fn summarize(records: &[SweepRecord]) -> Vec<CellSummary> {
    let mut order: Vec<u64> = Vec::new();
    let mut cells: BTreeMap<(usize, u64), (String, f64, Vec<f64>)> = BTreeMap::new();
    for r in records {
        let bits = r.throughput_bps.to_bits();
        let ti = order.iter().position(|b| *b == bits).unwrap_or_else(|| {
            order.push(bits);
            order.len() - 1
        });
        cells
            .entry((ti, r.pattern_id))
            .or_insert_with(|| (r.pattern_bits.clone(), r.throughput_bps, Vec::new()))
            .2
            .push(r.makespan_s);
    }
    cells
        .into_iter()
        .map(|((_, pattern_id), (pattern_bits, throughput_bps, ys))| {
            let n = ys.len();
            let mean = ys.iter().sum::<f64>() / n as f64;
            let (variance, ci95) = if n > 1 {
                let var = ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
                (
                    var,
                    t_quantile(0.975, (n - 1) as f64) * (var / n as f64).sqrt(),
                )
            } else {
                (0.0, 0.0)
            };
            CellSummary {
                pattern_id,
                pattern_bits,
                throughput_bps,
                n,
                mean,
                variance,
                ci95,
                variance_defined: n > 1,
            }
        })
        .collect()
}

pub(crate) fn t_quantile(p: f64, dof: f64) -> f64 {
    StudentsT::new(0.0, 1.0, dof)
        .expect("positive degrees of freedom")
        .inverse_cdf(p)
}

/// Pooled within-cell variance and its degrees of freedom.
pub fn pooled_variance(records: &[SweepRecord]) -> (f64, f64) {
    let cells = summarize(records);
    let dof: usize = cells.iter().map(|c| c.n - 1).sum();
    if dof == 0 {
        return (0.0, 0.0);
    }
    let ss: f64 = cells.iter().map(|c| c.variance * (c.n - 1) as f64).sum();
    (ss / dof as f64, dof as f64)
}

/// ODA, full placement on the product, and the best pattern for one throughput.
#[derive(Debug, Clone, PartialEq)]
pub struct ThroughputSummary {
    pub throughput_bps: f64,
    pub oda: Option<CellSummary>,
    pub full_odap: Option<CellSummary>,
    /// Minimum mean over all cells; ties go to the lower pattern id.
    pub best: CellSummary,
    pub worst: CellSummary,
}

pub fn throughput_summaries(records: &[SweepRecord]) -> Vec<ThroughputSummary> {
    let cells = summarize(records);
    let mut order: Vec<f64> = Vec::new();
    for c in &cells {
        if !order.contains(&c.throughput_bps) {
            order.push(c.throughput_bps);
        }
    }
    order
        .into_iter()
        .map(|bps| {
            let at: Vec<&CellSummary> = cells.iter().filter(|c| c.throughput_bps == bps).collect();
            let pick = |better: fn(f64, f64) -> bool| -> CellSummary {
                let mut best = at[0];
                for c in &at[1..] {
                    if better(c.mean, best.mean) {
                        best = c;
                    }
                }
                best.clone()
            };
            ThroughputSummary {
                throughput_bps: bps,
                oda: at
                    .iter()
                    .find(|c| !c.pattern_bits.contains('1'))
                    .map(|c| (*c).clone()),
                full_odap: at
                    .iter()
                    .find(|c| !c.pattern_bits.contains('0'))
                    .map(|c| (*c).clone()),
                best: pick(|a, b| a < b),
                worst: pick(|a, b| a > b),
            }
        })
        .collect()
}

/// `2'27''` style rendering of a duration in seconds.
pub fn format_minutes(seconds: f64) -> String {
    let total = seconds.round() as u64;
    format!("{}'{:02}''", total / 60, total % 60)
}
