//! Analytic round-trip-time model for database queries and product accesses.
//!
//! A query crosses `links` store-and-forward links in each direction. Every
//! link adds `per_hop_latency_s` plus the serialization time of the packet at
//! `link_rate_bps`. The server adds `server_processing_s`, and each operation
//! kind adds its own fixed cost. Reads carry `request_overhead_bytes` out and
//! the queried bytes plus overhead back; writes the reverse.
//!
//! Every deterministic RTT is affine in the four timing parameters, which is
//! what [`calibrate`] exploits.

use std::collections::HashMap;
use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scenario::{ReplicationMode, Scenario, Topology};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Op {
    Read,
    Write,
}

impl fmt::Display for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Op::Read => "R",
            Op::Write => "W",
        })
    }
}

/// Timing parameters that calibration may solve for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Param {
    PerHopLatencyS,
    ServerProcessingS,
    ReadFixedS,
    WriteFixedS,
}

impl Param {
    pub const ALL: [Param; 4] = [
        Param::PerHopLatencyS,
        Param::ServerProcessingS,
        Param::ReadFixedS,
        Param::WriteFixedS,
    ];

    /// Free set used when a target file does not name one. Read and write
    /// fixed costs are collinear with server processing, so one is pinned.
    pub const DEFAULT_FREE: [Param; 3] = [
        Param::PerHopLatencyS,
        Param::ServerProcessingS,
        Param::WriteFixedS,
    ];

    fn slot(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Param::PerHopLatencyS => "per_hop_latency_s",
            Param::ServerProcessingS => "server_processing_s",
            Param::ReadFixedS => "read_fixed_s",
            Param::WriteFixedS => "write_fixed_s",
        }
    }

    fn get(self, t: &Topology) -> f64 {
        match self {
            Param::PerHopLatencyS => t.per_hop_latency_s,
            Param::ServerProcessingS => t.server_processing_s,
            Param::ReadFixedS => t.read_fixed_s,
            Param::WriteFixedS => t.write_fixed_s,
        }
    }

    fn set(self, t: &mut Topology, v: f64) {
        match self {
            Param::PerHopLatencyS => t.per_hop_latency_s = v,
            Param::ServerProcessingS => t.server_processing_s = v,
            Param::ReadFixedS => t.read_fixed_s = v,
            Param::WriteFixedS => t.write_fixed_s = v,
        }
    }
}

/// `coef . theta + constant`, with theta ordered as [`Param::ALL`].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
struct Affine {
    coef: [f64; 4],
    constant: f64,
}

impl Affine {
    fn eval(&self, theta: &[f64; 4]) -> f64 {
        self.coef.iter().zip(theta).map(|(c, t)| c * t).sum::<f64>() + self.constant
    }

    fn plus(mut self, other: Affine) -> Affine {
        for (a, b) in self.coef.iter_mut().zip(other.coef) {
            *a += b;
        }
        self.constant += other.constant;
        self
    }
}

/// Summary of repeated draws.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RttSample {
    pub mean_s: f64,
    pub variance: f64,
}

impl RttSample {
    pub fn from_draws(draws: &[f64]) -> Self {
        let n = draws.len() as f64;
        let mean_s = draws.iter().sum::<f64>() / n;
        let variance = if draws.len() > 1 {
            draws.iter().map(|x| (x - mean_s).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Self { mean_s, variance }
    }
}

/// Duration of a database write as seen by the writer, plus background
/// replica updates for asynchronous replication.
#[derive(Debug, Clone, PartialEq)]
pub struct WriteTiming {
    pub primary: usize,
    pub duration_s: f64,
    /// `(replica db index, propagation duration)`; empty under `pc-s`.
    pub propagations: Vec<(usize, f64)>,
}

/// Calibrated network model bound to one scenario. Indices refer to the
/// scenario's `machines`, `databases` and `fragments` vectors.
#[derive(Debug, Clone)]
pub struct RttModel {
    theta: [f64; 4],
    link_rate_bps: f64,
    overhead_bytes: f64,
    intra_links: u32,
    uplinks: u32,
    mode: ReplicationMode,
    machine_cluster: Vec<usize>,
    db_cluster: Vec<usize>,
    /// Hosting databases per fragment, primary first.
    hosts: Vec<Vec<usize>>,
    reads: Vec<Vec<Option<u64>>>,
    updates: Vec<Vec<Option<u64>>>,
    /// Jitter sigma per (machine, db).
    sigma: Vec<Vec<f64>>,
    default_sigma: f64,
    machine_ids: HashMap<String, usize>,
    fragment_ids: HashMap<String, usize>,
    db_ids: HashMap<String, usize>,
}

impl RttModel {
    pub fn new(scenario: &Scenario) -> Result<Self> {
        let t = &scenario.topology;
        let cluster = |c: &str| {
            t.cluster_index(c)
                .ok_or_else(|| Error::config(format!("unknown cluster {c}")))
        };
        let db_ids: HashMap<String, usize> = scenario
            .databases
            .iter()
            .enumerate()
            .map(|(i, d)| (d.id.clone(), i))
            .collect();
        let db_cluster = scenario
            .databases
            .iter()
            .map(|d| cluster(&d.cluster))
            .collect::<Result<Vec<_>>>()?;
        let machine_cluster = scenario
            .machines
            .iter()
            .map(|m| cluster(&m.cluster))
            .collect::<Result<Vec<_>>>()?;
        let mut hosts = Vec::with_capacity(scenario.k());
        for f in &scenario.fragments {
            let mut h = Vec::with_capacity(f.hosts.len());
            if !f.hosts.is_empty() {
                h.push(lookup(&db_ids, f.primary_db(), "database")?);
                for r in f.replica_dbs() {
                    h.push(lookup(&db_ids, r, "database")?);
                }
            }
            hosts.push(h);
        }
        let profile = |map: &std::collections::BTreeMap<String, u64>| -> Vec<Option<u64>> {
            scenario
                .fragments
                .iter()
                .map(|f| map.get(&f.id).copied())
                .collect()
        };
        let mut sigma =
            vec![vec![t.jitter_sigma_s; scenario.databases.len()]; scenario.machines.len()];
        let machine_ids: HashMap<String, usize> = scenario
            .machines
            .iter()
            .enumerate()
            .map(|(i, m)| (m.id.clone(), i))
            .collect();
        for o in &t.jitter_overrides {
            let m = lookup(&machine_ids, &o.machine, "machine")?;
            let d = lookup(&db_ids, &o.db, "database")?;
            sigma[m][d] = o.sigma_s;
        }
        Ok(Self {
            theta: Param::ALL.map(|p| p.get(t)),
            link_rate_bps: t.link_rate_bps,
            overhead_bytes: t.request_overhead_bytes as f64,
            intra_links: t.intra_cluster_links,
            uplinks: t.uplink_links,
            mode: scenario.replication.mode,
            machine_cluster,
            db_cluster,
            hosts,
            reads: scenario
                .machines
                .iter()
                .map(|m| profile(&m.reads))
                .collect(),
            updates: scenario
                .machines
                .iter()
                .map(|m| profile(&m.updates))
                .collect(),
            sigma,
            default_sigma: t.jitter_sigma_s,
            machine_ids,
            fragment_ids: scenario
                .fragments
                .iter()
                .enumerate()
                .map(|(i, f)| (f.id.clone(), i))
                .collect(),
            db_ids,
        })
    }

    pub fn machine_index(&self, id: &str) -> Result<usize> {
        lookup(&self.machine_ids, id, "machine")
    }

    pub fn fragment_index(&self, id: &str) -> Result<usize> {
        lookup(&self.fragment_ids, id, "fragment")
    }

    pub fn db_index(&self, id: &str) -> Result<usize> {
        lookup(&self.db_ids, id, "database")
    }

    pub fn mode(&self) -> ReplicationMode {
        self.mode
    }

    pub fn hosts(&self, fragment: usize) -> &[usize] {
        &self.hosts[fragment]
    }

    fn links(&self, a: usize, b: usize) -> u32 {
        if a == b {
            self.intra_links
        } else {
            2 * self.uplinks + a.abs_diff(b) as u32
        }
    }

    /// One request/response exchange over `links` links.
    fn exchange(&self, links: u32, out_bytes: f64, back_bytes: f64) -> Affine {
        let links = f64::from(links);
        let mut a = Affine::default();
        a.coef[Param::PerHopLatencyS.slot()] = 2.0 * links;
        a.coef[Param::ServerProcessingS.slot()] = 1.0;
        a.constant = links * (out_bytes + back_bytes) * 8.0 / self.link_rate_bps;
        a
    }

    fn read_affine(&self, machine: usize, db: usize, bytes: u64) -> Affine {
        let links = self.links(self.machine_cluster[machine], self.db_cluster[db]);
        let mut a = self.exchange(
            links,
            self.overhead_bytes,
            self.overhead_bytes + bytes as f64,
        );
        a.coef[Param::ReadFixedS.slot()] = 1.0;
        a
    }

    fn primary_write_affine(&self, machine: usize, db: usize, bytes: u64) -> Affine {
        let links = self.links(self.machine_cluster[machine], self.db_cluster[db]);
        let mut a = self.exchange(
            links,
            self.overhead_bytes + bytes as f64,
            self.overhead_bytes,
        );
        a.coef[Param::WriteFixedS.slot()] = 1.0;
        a
    }

    fn propagation_affine(&self, primary: usize, replica: usize, bytes: u64) -> Affine {
        let links = self.links(self.db_cluster[primary], self.db_cluster[replica]);
        self.exchange(
            links,
            self.overhead_bytes + bytes as f64,
            self.overhead_bytes,
        )
    }

    /// Synchronous write: primary leg plus the slowest replica propagation.
    fn sync_write_affine(
        &self,
        machine: usize,
        fragment: usize,
        bytes: u64,
        theta: &[f64; 4],
    ) -> Affine {
        let hosts = &self.hosts[fragment];
        let leg = self.primary_write_affine(machine, hosts[0], bytes);
        let slowest = hosts[1..]
            .iter()
            .map(|&r| self.propagation_affine(hosts[0], r, bytes))
            .max_by(|a, b| a.eval(theta).total_cmp(&b.eval(theta)));
        match slowest {
            Some(p) => leg.plus(p),
            None => leg,
        }
    }

    fn bytes(
        &self,
        table: &[Vec<Option<u64>>],
        machine: usize,
        fragment: usize,
        op: Op,
    ) -> Result<u64> {
        table
            .get(machine)
            .and_then(|row| row.get(fragment))
            .copied()
            .flatten()
            .ok_or_else(|| {
                Error::config(format!(
                    "machine #{machine} has no {op:?} query on fragment #{fragment}"
                ))
            })
    }

    fn hosted(&self, fragment: usize) -> Result<&[usize]> {
        match self.hosts.get(fragment) {
            Some(h) if !h.is_empty() => Ok(h),
            _ => Err(Error::config(format!(
                "fragment #{fragment} is not allocated to any database"
            ))),
        }
    }

    /// Deterministic RTT of reading `fragment` from one specific database.
    pub fn read_rtt_via(&self, machine: usize, fragment: usize, db: usize) -> Result<f64> {
        let bytes = self.bytes(&self.reads, machine, fragment, Op::Read)?;
        Ok(self.read_affine(machine, db, bytes).eval(&self.theta))
    }

    /// Nearest hosting replica and the deterministic read RTT to it. Ties go
    /// to the primary, then to declaration order.
    pub fn read_base(&self, machine: usize, fragment: usize) -> Result<(usize, f64)> {
        let hosts = self.hosted(fragment)?;
        let bytes = self.bytes(&self.reads, machine, fragment, Op::Read)?;
        let mut best = (hosts[0], f64::INFINITY);
        for &db in hosts {
            let t = self.read_affine(machine, db, bytes).eval(&self.theta);
            if t < best.1 {
                best = (db, t);
            }
        }
        Ok(best)
    }

    /// Deterministic write duration as seen by the writer, and the
    /// background propagation durations under `pc-as`.
    pub fn write_base(&self, machine: usize, fragment: usize) -> Result<WriteTiming> {
        let hosts = self.hosted(fragment)?;
        let bytes = self.bytes(&self.updates, machine, fragment, Op::Write)?;
        Ok(match self.mode {
            ReplicationMode::PrimarySync => WriteTiming {
                primary: hosts[0],
                duration_s: self
                    .sync_write_affine(machine, fragment, bytes, &self.theta)
                    .eval(&self.theta),
                propagations: Vec::new(),
            },
            ReplicationMode::PrimaryAsync => WriteTiming {
                primary: hosts[0],
                duration_s: self
                    .primary_write_affine(machine, hosts[0], bytes)
                    .eval(&self.theta),
                propagations: hosts[1..]
                    .iter()
                    .map(|&r| {
                        (
                            r,
                            self.propagation_affine(hosts[0], r, bytes)
                                .eval(&self.theta),
                        )
                    })
                    .collect(),
            },
        })
    }

    /// Read RTT with jitter; `None` for the rng gives the deterministic value.
    pub fn db_read_rtt<R: Rng + ?Sized>(
        &self,
        machine: usize,
        fragment: usize,
        rng: Option<&mut R>,
    ) -> Result<(usize, f64)> {
        let (db, base) = self.read_base(machine, fragment)?;
        Ok((db, self.jitter(base, self.sigma[machine][db], rng)))
    }

    pub fn db_write_rtt<R: Rng + ?Sized>(
        &self,
        machine: usize,
        fragment: usize,
        mut rng: Option<&mut R>,
    ) -> Result<WriteTiming> {
        let mut w = self.write_base(machine, fragment)?;
        w.duration_s = self.jitter(
            w.duration_s,
            self.sigma[machine][w.primary],
            rng.as_deref_mut(),
        );
        for (_, d) in &mut w.propagations {
            *d = self.jitter(*d, self.default_sigma, rng.as_deref_mut());
        }
        Ok(w)
    }

    /// Normal draw around `mean`, truncated below at half the mean.
    pub fn jitter<R: Rng + ?Sized>(&self, mean: f64, sigma: f64, rng: Option<&mut R>) -> f64 {
        let Some(rng) = rng else { return mean };
        if sigma <= 0.0 || mean <= 0.0 {
            return mean;
        }
        let floor = 0.5 * mean;
        let normal = Normal::new(mean, sigma).expect("sigma is positive and finite");
        for _ in 0..16 {
            let x = normal.sample(rng);
            if x >= floor {
                return x;
            }
        }
        floor
    }

    fn target_affine(&self, t: &ResolvedTarget, theta: &[f64; 4]) -> Result<Affine> {
        let hosts = self.hosted(t.fragment)?;
        match t.op {
            Op::Read => {
                if !hosts.contains(&t.db) {
                    return Err(Error::validation(format!(
                        "calibration target reads {} from a database that does not host it",
                        t.label
                    )));
                }
                let bytes = self.bytes(&self.reads, t.machine, t.fragment, Op::Read)?;
                Ok(self.read_affine(t.machine, t.db, bytes))
            }
            Op::Write => {
                if hosts[0] != t.db {
                    return Err(Error::validation(format!(
                        "calibration target writes {} through a database that is not its primary",
                        t.label
                    )));
                }
                let bytes = self.bytes(&self.updates, t.machine, t.fragment, Op::Write)?;
                Ok(match self.mode {
                    ReplicationMode::PrimarySync => {
                        self.sync_write_affine(t.machine, t.fragment, bytes, theta)
                    }
                    ReplicationMode::PrimaryAsync => {
                        self.primary_write_affine(t.machine, t.db, bytes)
                    }
                })
            }
        }
    }

    /// Deterministic RTT for a calibration target.
    pub fn predict(&self, target: &RttTarget) -> Result<f64> {
        let r = self.resolve(target)?;
        Ok(self.target_affine(&r, &self.theta)?.eval(&self.theta))
    }

    fn resolve(&self, t: &RttTarget) -> Result<ResolvedTarget> {
        Ok(ResolvedTarget {
            machine: self.machine_index(&t.machine)?,
            db: self.db_index(&t.db)?,
            fragment: self.fragment_index(&t.fragment)?,
            op: t.op,
            label: format!("{}/{}/{}/{}", t.machine, t.db, t.fragment, t.op),
        })
    }
}

fn lookup(map: &HashMap<String, usize>, id: &str, what: &str) -> Result<usize> {
    map.get(id)
        .copied()
        .ok_or_else(|| Error::config(format!("unknown {what} {id}")))
}

/// Time for a product to exchange `bytes` at `throughput_bps`.
pub fn product_access_time(bytes: u64, throughput_bps: f64, overhead_s: f64) -> Result<f64> {
    if throughput_bps.is_nan() || throughput_bps <= 0.0 {
        return Err(Error::config(format!(
            "product throughput must be > 0 (got {throughput_bps})"
        )));
    }
    Ok(bytes as f64 * 8.0 / throughput_bps + overhead_s)
}

/// Measured mean RTT for one (machine, database, fragment, operation).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RttTarget {
    pub machine: String,
    pub db: String,
    pub fragment: String,
    pub op: Op,
    pub mean_s: f64,
}

struct ResolvedTarget {
    machine: usize,
    db: usize,
    fragment: usize,
    op: Op,
    label: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetFit {
    pub label: String,
    pub target_s: f64,
    pub predicted_s: f64,
}

impl TargetFit {
    pub fn relative_error(&self) -> f64 {
        (self.predicted_s - self.target_s).abs() / self.target_s.abs()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationReport {
    pub parameters: Vec<(Param, f64, bool)>,
    pub fits: Vec<TargetFit>,
}

impl CalibrationReport {
    pub fn max_relative_error(&self) -> f64 {
        self.fits
            .iter()
            .map(TargetFit::relative_error)
            .fold(0.0, f64::max)
    }
}

impl fmt::Display for CalibrationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<22} {:>14}  free", "parameter", "value")?;
        for (p, v, free) in &self.parameters {
            writeln!(
                f,
                "{:<22} {:>14.9}  {}",
                p.name(),
                v,
                if *free { "yes" } else { "no" }
            )?;
        }
        writeln!(f)?;
        writeln!(
            f,
            "{:<20} {:>12} {:>12} {:>9}",
            "target", "target_ms", "predicted_ms", "rel_err"
        )?;
        for fit in &self.fits {
            writeln!(
                f,
                "{:<20} {:>12.4} {:>12.4} {:>8.2}%",
                fit.label,
                fit.target_s * 1e3,
                fit.predicted_s * 1e3,
                fit.relative_error() * 100.0
            )?;
        }
        Ok(())
    }
}

/// Least-squares fit of the `free` timing parameters to measured mean RTTs.
/// Returns the updated topology and a report. Parameters not in `free` keep
/// their scenario values.
///
/// Synchronous writes to replicated fragments take a max over replicas, so
/// the fit is repeated until the slowest replica stops changing.
pub fn calibrate(
    scenario: &Scenario,
    targets: &[RttTarget],
    free: &[Param],
) -> Result<(Topology, CalibrationReport)> {
    let model = RttModel::new(scenario)?;
    let resolved = targets
        .iter()
        .map(|t| model.resolve(t))
        .collect::<Result<Vec<_>>>()?;
    let mut topology = scenario.topology.clone();
    let mut theta = model.theta;

    if !targets.is_empty() && !free.is_empty() {
        for _ in 0..8 {
            let rows = resolved
                .iter()
                .map(|t| model.target_affine(t, &theta))
                .collect::<Result<Vec<_>>>()?;
            let a = DMatrix::from_fn(rows.len(), free.len(), |i, j| rows[i].coef[free[j].slot()]);
            let b = DVector::from_fn(rows.len(), |i, _| {
                let fixed: f64 = Param::ALL
                    .iter()
                    .filter(|p| !free.contains(p))
                    .map(|p| rows[i].coef[p.slot()] * theta[p.slot()])
                    .sum();
                targets[i].mean_s - rows[i].constant - fixed
            });
            let solution = a
                .svd(true, true)
                .solve(&b, 1e-12)
                .map_err(|e| Error::config(format!("least squares failed: {e}")))?;
            let mut next = theta;
            for (j, p) in free.iter().enumerate() {
                next[p.slot()] = solution[j];
            }
            let converged = next == theta;
            theta = next;
            if converged {
                break;
            }
        }
    }

    let fits = resolved
        .iter()
        .zip(targets)
        .map(|(r, t)| {
            Ok(TargetFit {
                label: r.label.clone(),
                target_s: t.mean_s,
                predicted_s: model.target_affine(r, &theta)?.eval(&theta),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let report = CalibrationReport {
        parameters: Param::ALL
            .iter()
            .map(|p| (*p, theta[p.slot()], free.contains(p)))
            .collect(),
        fits,
    };
    if let Some((p, v, _)) = report.parameters.iter().find(|(_, v, _)| *v < 0.0) {
        return Err(Error::Calibration {
            message: format!("targets are infeasible: {} solved to {v:.6e} s", p.name()),
            residuals: report.to_string(),
        });
    }
    for p in Param::ALL {
        p.set(&mut topology, theta[p.slot()]);
    }
    Ok((topology, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{load_scenario, CASE_STUDY};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    type NoRng = ChaCha8Rng;

    fn case() -> Scenario {
        load_scenario(CASE_STUDY).unwrap()
    }

    fn model_with(f: impl FnOnce(&mut Topology)) -> RttModel {
        let mut s = case();
        f(&mut s.topology);
        RttModel::new(&s).unwrap()
    }

    fn table1() -> Vec<RttTarget> {
        let t = |machine: &str, op, mean_s| RttTarget {
            machine: machine.into(),
            db: "DB1".into(),
            fragment: "F1".into(),
            op,
            mean_s,
        };
        vec![
            t("M1", Op::Read, 3.6e-3),
            t("M1", Op::Write, 7.6e-3),
            t("M3", Op::Read, 7.8e-3),
            t("M3", Op::Write, 11.3e-3),
        ]
    }

    #[test]
    fn product_access_examples() {
        assert!((product_access_time(1350, 1e6, 0.0).unwrap() - 10.8e-3).abs() < 1e-15);
        assert_eq!(product_access_time(0, 54e6, 2e-3).unwrap(), 2e-3);
        assert!((product_access_time(540, 100e6, 1e-3).unwrap() - 1.0432e-3).abs() < 1e-15);
        assert!(matches!(
            product_access_time(10, 0.0, 0.0),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            product_access_time(10, -1.0, 0.0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn read_rtt_by_hand() {
        // M1 -> DB1 is intra-cluster (2 links); 540 B response + 40 B overhead each way.
        let m = model_with(|t| {
            t.per_hop_latency_s = 1e-4;
            t.server_processing_s = 2e-4;
            t.read_fixed_s = 3e-4;
            t.request_overhead_bytes = 40;
        });
        let expected = 4.0 * 1e-4 + 2.0 * (40.0 + 580.0) * 8.0 / 10e6 + 2e-4 + 3e-4;
        let (db, t) = m.read_base(0, 0).unwrap();
        assert_eq!(db, 0);
        assert!((t - expected).abs() < 1e-15);
        // M3 -> DB1: 2 uplinks on each side + 2 router hops = 6 links.
        let expected = 12.0 * 1e-4 + 6.0 * (40.0 + 355.0) * 8.0 / 10e6 + 2e-4 + 3e-4;
        assert!((m.read_base(2, 0).unwrap().1 - expected).abs() < 1e-15);
    }

    #[test]
    fn degenerate_network_gives_zero() {
        let m = model_with(|t| {
            t.per_hop_latency_s = 0.0;
            t.server_processing_s = 0.0;
            t.read_fixed_s = 0.0;
            t.write_fixed_s = 0.0;
            t.request_overhead_bytes = 0;
            t.link_rate_bps = f64::MAX;
            t.jitter_sigma_s = 0.0;
        });
        let (_, t) = m.db_read_rtt::<NoRng>(0, 0, None).unwrap();
        assert!((0.0..1e-300).contains(&t));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (_, t) = m.db_read_rtt(0, 0, Some(&mut rng)).unwrap();
        assert!((0.0..1e-300).contains(&t));
    }

    #[test]
    fn unallocated_fragment_is_a_config_error() {
        let mut s = case();
        s.fragments[0].hosts.clear();
        s.fragments[0].primary = None;
        let m = RttModel::new(&s).unwrap();
        assert!(matches!(m.read_base(0, 0), Err(Error::Config(_))));
        assert!(matches!(m.write_base(0, 0), Err(Error::Config(_))));
    }

    #[test]
    fn nearest_replica_is_min_over_hosts() {
        let m = RttModel::new(&case()).unwrap();
        let s = case();
        for (mi, mach) in s.machines.iter().enumerate() {
            for (fi, frag) in s.fragments.iter().enumerate() {
                if !mach.reads.contains_key(&frag.id) {
                    continue;
                }
                let brute = m
                    .hosts(fi)
                    .iter()
                    .map(|&db| m.read_rtt_via(mi, fi, db).unwrap())
                    .fold(f64::INFINITY, f64::min);
                assert_eq!(
                    m.read_base(mi, fi).unwrap().1,
                    brute,
                    "{} {}",
                    mach.id,
                    frag.id
                );
            }
        }
        // M3 reads F5 from its local DB3 replica rather than the DB1 primary.
        let (db, _) = m.read_base(2, 4).unwrap();
        assert_eq!(db, 2);
    }

    #[test]
    fn unreplicated_write_same_under_both_modes() {
        let mut s = case();
        let sync = RttModel::new(&s).unwrap();
        s.replication.mode = ReplicationMode::PrimaryAsync;
        let asy = RttModel::new(&s).unwrap();
        let a = sync.write_base(0, 0).unwrap();
        let b = asy.write_base(0, 0).unwrap();
        assert_eq!(a.duration_s, b.duration_s);
        assert!(b.propagations.is_empty());
    }

    #[test]
    fn sync_write_dominates_async_write() {
        let mut s = case();
        let sync = RttModel::new(&s).unwrap();
        s.replication.mode = ReplicationMode::PrimaryAsync;
        let asy = RttModel::new(&s).unwrap();
        for (mi, mach) in s.machines.iter().enumerate() {
            for (fi, frag) in s.fragments.iter().enumerate() {
                if !mach.updates.contains_key(&frag.id) {
                    continue;
                }
                let mut r1 = ChaCha8Rng::seed_from_u64(9);
                let mut r2 = ChaCha8Rng::seed_from_u64(9);
                let a = sync.db_write_rtt(mi, fi, Some(&mut r1)).unwrap();
                let b = asy.db_write_rtt(mi, fi, Some(&mut r2)).unwrap();
                assert!(a.duration_s >= b.duration_s, "{} {}", mach.id, frag.id);
                assert_eq!(b.propagations.len(), frag.hosts.len() - 1);
            }
        }
    }

    #[test]
    fn jitter_is_truncated_and_centered() {
        let m = RttModel::new(&case()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let draws: Vec<f64> = (0..2000)
            .map(|_| m.jitter(1.0, 2.0, Some(&mut rng)))
            .collect();
        assert!(draws.iter().all(|d| *d >= 0.5));
        let (_, base) = m.read_base(0, 0).unwrap();
        let sigma = case().topology.jitter_sigma_s;
        let draws: Vec<f64> = (0..50)
            .map(|_| m.db_read_rtt(0, 0, Some(&mut rng)).unwrap().1)
            .collect();
        let s = RttSample::from_draws(&draws);
        assert!((s.mean_s - base).abs() < 3.0 * sigma, "{s:?} vs {base}");
        assert!(s.variance >= 0.0);
    }

    #[test]
    fn deterministic_without_rng() {
        let m = RttModel::new(&case()).unwrap();
        let a = m.db_write_rtt::<NoRng>(2, 7, None).unwrap();
        let b = m.db_write_rtt::<NoRng>(2, 7, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn table_targets_reproduced_within_ten_percent() {
        let s = case();
        let (topology, report) = calibrate(&s, &table1(), &Param::DEFAULT_FREE).unwrap();
        assert!(report.max_relative_error() < 0.10, "{report}");
        let mut s2 = s.clone();
        s2.topology = topology;
        let m = RttModel::new(&s2).unwrap();
        for t in table1() {
            let p = m.predict(&t).unwrap();
            assert!((p - t.mean_s).abs() / t.mean_s < 0.10, "{t:?} -> {p}");
        }
    }

    #[test]
    fn single_target_single_parameter_exact() {
        let s = case();
        let target = vec![table1()[0].clone()];
        let (_, report) = calibrate(&s, &target, &[Param::ServerProcessingS]).unwrap();
        assert!(report.fits[0].relative_error() < 1e-12, "{report}");
    }

    #[test]
    fn contradictory_targets_match_hand_solved_least_squares() {
        // Unknowns: per-hop latency L and server processing S. Rows are
        // (2*links, 1) with the serialization constant moved to the rhs.
        let mut s = case();
        s.topology.read_fixed_s = 0.0;
        let mut targets = table1();
        targets.retain(|t| t.op == Op::Read);
        let mut extra = targets[0].clone();
        extra.mean_s = 5.0e-3;
        targets.push(extra);
        let (_, report) = calibrate(
            &s,
            &targets,
            &[Param::PerHopLatencyS, Param::ServerProcessingS],
        )
        .unwrap();

        let ser = |links: f64, bytes: f64| links * (40.0 + 40.0 + bytes) * 8.0 / 10e6;
        let rows = [
            (4.0, 3.6e-3 - ser(2.0, 540.0)),
            (12.0, 7.8e-3 - ser(6.0, 315.0)),
            (4.0, 5.0e-3 - ser(2.0, 540.0)),
        ];
        // Normal equations [sum a^2, sum a; sum a, n] [L; S] = [sum a y; sum y].
        let (saa, sa, n) = rows.iter().fold((0.0, 0.0, 0.0), |(x, y, z), (a, _)| {
            (x + a * a, y + a, z + 1.0)
        });
        let (say, sy) = rows
            .iter()
            .fold((0.0, 0.0), |(x, y), (a, b)| (x + a * b, y + b));
        let det = saa * n - sa * sa;
        let l = (say * n - sa * sy) / det;
        let sp = (saa * sy - sa * say) / det;

        let got = |p: Param| {
            report
                .parameters
                .iter()
                .find(|(q, _, _)| *q == p)
                .unwrap()
                .1
        };
        assert!((got(Param::PerHopLatencyS) - l).abs() < 1e-12);
        assert!((got(Param::ServerProcessingS) - sp).abs() < 1e-12);
        assert!(report.fits[0].relative_error() > 0.0);
    }

    #[test]
    fn infeasible_targets_report_residuals() {
        let s = case();
        let mut targets = table1();
        for t in &mut targets {
            if t.op == Op::Write {
                t.mean_s = 1e-4;
            }
        }
        let err = calibrate(&s, &targets, &Param::DEFAULT_FREE).unwrap_err();
        match err {
            Error::Calibration { residuals, .. } => assert!(residuals.contains("rel_err")),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn empty_targets_leave_topology_unchanged() {
        let s = case();
        let (t, report) = calibrate(&s, &[], &Param::DEFAULT_FREE).unwrap();
        assert_eq!(t, s.topology);
        assert!(report.fits.is_empty());
    }
}
