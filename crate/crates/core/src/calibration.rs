//! Scenario calibration against measured RTTs and reference makespans.

use std::fmt;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::network::{self, CalibrationReport, Param, RttTarget};
use crate::scenario::{DistributionPattern, Scenario, TransferMode};
use crate::workflow::{SimOptions, Simulator};

/// Contents of a calibration targets file.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationTargets {
    #[serde(default)]
    pub rtt: Vec<RttTarget>,
    pub free_parameters: Option<Vec<Param>>,
    pub makespan: Option<MakespanTargets>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MakespanTargets {
    /// Reference makespan with every fragment on the databases.
    pub oda_s: f64,
    /// Machine whose operation time is solved for; defaults to the join stage's.
    pub machine: Option<String>,
    /// Full-product over all-database makespan ratio. When present, the
    /// scenario switches to whole-fragment transfers and a uniform fragment
    /// payload is solved for.
    pub odap_ratio: Option<f64>,
    #[serde(default = "default_odap_throughput")]
    pub odap_throughput_bps: f64,
}

fn default_odap_throughput() -> f64 {
    1e6
}

impl CalibrationTargets {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::parse(format!("targets file: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MakespanFit {
    pub label: String,
    pub target: f64,
    pub achieved: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationOutcome {
    pub rtt: Option<CalibrationReport>,
    pub oper_time: Option<(String, f64)>,
    pub payload_bytes: Option<u64>,
    pub makespan: Vec<MakespanFit>,
}

impl fmt::Display for CalibrationOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(r) = &self.rtt {
            write!(f, "{r}")?;
        } else {
            writeln!(f, "no RTT targets; network parameters unchanged")?;
        }
        if let Some((m, t)) = &self.oper_time {
            writeln!(f, "\noper_time_s[{m}] = {t:.6}")?;
        }
        if let Some(p) = self.payload_bytes {
            writeln!(f, "payload_bytes = {p} (whole-fragment transfers)")?;
        }
        for m in &self.makespan {
            writeln!(
                f,
                "{:<28} target {:>10.4}  achieved {:>10.4}",
                m.label, m.target, m.achieved
            )?;
        }
        Ok(())
    }
}

/// Applies every target in order: network parameters, then the operation
/// time that sets the all-database makespan, then the payload that sets the
/// product/database ratio. An empty targets file returns the scenario as is.
pub fn calibrate_scenario(
    scenario: &Scenario,
    targets: &CalibrationTargets,
) -> Result<(Scenario, CalibrationOutcome)> {
    let mut out = scenario.clone();
    let mut outcome = CalibrationOutcome {
        rtt: None,
        oper_time: None,
        payload_bytes: None,
        makespan: vec![],
    };
    if !targets.rtt.is_empty() {
        let free = targets
            .free_parameters
            .clone()
            .unwrap_or_else(|| Param::DEFAULT_FREE.to_vec());
        let (topology, report) = network::calibrate(&out, &targets.rtt, &free)?;
        out.topology = topology;
        outcome.rtt = Some(report);
    }
    if let Some(m) = &targets.makespan {
        let machine = match &m.machine {
            Some(id) => id.clone(),
            None => {
                let join = &out.workflow.join.stage;
                out.stage(join)
                    .ok_or_else(|| Error::config(format!("join stage {join} not found")))?
                    .machine
                    .clone()
            }
        };
        let t = calibrate_oda_makespan(&mut out, &machine, m.oda_s)?;
        outcome.oper_time = Some((machine, t));
        let oda = oda_makespan(&out)?;
        outcome.makespan.push(MakespanFit {
            label: "oda_makespan_s".into(),
            target: m.oda_s,
            achieved: oda,
        });
        if let Some(ratio) = m.odap_ratio {
            let p = calibrate_odap_payload(&mut out, ratio, m.odap_throughput_bps)?;
            outcome.payload_bytes = Some(p);
            let full = full_odap_makespan(&out, m.odap_throughput_bps)?;
            outcome.makespan.push(MakespanFit {
                label: "full_odap_over_oda".into(),
                target: ratio,
                achieved: full / oda_makespan(&out)?,
            });
        }
    }
    out.validate()?;
    Ok((out, outcome))
}

/// Jitter-free makespan with every fragment on the databases.
pub fn oda_makespan(scenario: &Scenario) -> Result<f64> {
    let sim = Simulator::new(scenario)?;
    let r = sim.run(
        &DistributionPattern::oda(scenario.k()),
        scenario.product.throughput_bps,
        0,
        no_jitter(),
    )?;
    Ok(r.makespan_s)
}

/// Jitter-free makespan with every fragment on the product.
pub fn full_odap_makespan(scenario: &Scenario, throughput_bps: f64) -> Result<f64> {
    let sim = Simulator::new(scenario)?;
    let r = sim.run(
        &DistributionPattern::full_odap(scenario.k()),
        throughput_bps,
        0,
        no_jitter(),
    )?;
    Ok(r.makespan_s)
}

fn no_jitter() -> SimOptions {
    SimOptions {
        jitter: false,
        ..SimOptions::default()
    }
}

/// Solves for `machine`'s operation time so the jitter-free all-database
/// makespan equals `target_s`.
pub fn calibrate_oda_makespan(
    scenario: &mut Scenario,
    machine: &str,
    target_s: f64,
) -> Result<f64> {
    let idx = scenario
        .machines
        .iter()
        .position(|m| m.id == machine)
        .ok_or_else(|| Error::config(format!("unknown machine {machine}")))?;
    let mut trial = scenario.clone();
    let mut eval = |t: f64| {
        trial.machines[idx].oper_time_s = t;
        oda_makespan(&trial)
    };
    let floor = eval(0.0)?;
    if target_s < floor {
        return Err(Error::Calibration {
            message: format!("all-database makespan {target_s} s is below the {floor:.4} s reachable with zero operation time"),
            residuals: format!("oda_makespan_s target {target_s} achieved_min {floor}"),
        });
    }
    let mut hi = target_s.max(1.0);
    while eval(hi)? < target_s {
        hi *= 2.0;
    }
    let t = bisect(&mut eval, 0.0, hi, target_s, 1e-12)?;
    scenario.machines[idx].oper_time_s = t;
    Ok(t)
}

/// Switches to whole-fragment transfers and solves for the uniform payload
/// that makes the full-product makespan `ratio` times the all-database one.
pub fn calibrate_odap_payload(
    scenario: &mut Scenario,
    ratio: f64,
    throughput_bps: f64,
) -> Result<u64> {
    if !(ratio > 0.0 && throughput_bps > 0.0) {
        return Err(Error::config("ratio and throughput must be positive"));
    }
    let oda = oda_makespan(scenario)?;
    let target = ratio * oda;
    let mut trial = scenario.clone();
    trial.product.transfer_mode = TransferMode::WholeFragment;
    let mut eval = |bytes: u64| {
        for f in &mut trial.fragments {
            f.payload_bytes = bytes;
        }
        full_odap_makespan(&trial, throughput_bps)
    };
    let floor = eval(0)?;
    if target < floor {
        return Err(Error::Calibration {
            message: format!(
                "ratio {ratio} is below the {:.4} reachable with empty payloads",
                floor / oda
            ),
            residuals: format!(
                "full_odap_over_oda target {ratio} achieved_min {}",
                floor / oda
            ),
        });
    }
    let mut hi: u64 = 1024;
    while eval(hi)? < target {
        hi = hi
            .checked_mul(2)
            .ok_or_else(|| Error::config("payload search overflowed"))?;
    }
    let mut lo = 0u64;
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if eval(mid)? < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let best = if (eval(lo)? - target).abs() <= (eval(hi)? - target).abs() {
        lo
    } else {
        hi
    };
    scenario.product.transfer_mode = TransferMode::WholeFragment;
    for f in &mut scenario.fragments {
        f.payload_bytes = best;
    }
    Ok(best)
}

/// Smallest `x` in `[lo, hi]` with `f(x) >= target` for nondecreasing `f`.
fn bisect(
    f: &mut impl FnMut(f64) -> Result<f64>,
    mut lo: f64,
    mut hi: f64,
    target: f64,
    tol: f64,
) -> Result<f64> {
    for _ in 0..200 {
        if hi - lo <= tol * hi.max(1.0) {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if f(mid)? < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(hi)
}
