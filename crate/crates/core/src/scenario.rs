//! Static case data: fragments and their database allocation, per-machine
//! query profiles, network topology, workflow and product parameters.
//!
//! A [`Scenario`] is loaded from TOML with [`load_scenario`], which rejects
//! unknown keys and checks every cross-reference before returning. Once
//! loaded it is immutable and can be shared across threads.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reference scenario: eight fragments over three clusters, product accesses
/// carry the per-query byte counts.
pub const CASE_STUDY: &str = include_str!("../scenarios/case_study_fig2.toml");

/// Reference scenario with whole-fragment product transfers, calibrated so
/// that full on-product placement at 1 Mbit/s is ~7.1x slower than the
/// all-database placement.
pub const CASE_STUDY_ODAP: &str = include_str!("../scenarios/case_study_fig2_odap.toml");

/// Looks up a bundled scenario by name.
pub fn builtin_scenario(name: &str) -> Option<&'static str> {
    match name {
        "case_study_fig2" | "case_study" => Some(CASE_STUDY),
        "case_study_fig2_odap" | "case_study_odap" => Some(CASE_STUDY_ODAP),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Fragment {
    pub id: String,
    /// Size of the whole fragment body, used by [`TransferMode::WholeFragment`].
    pub payload_bytes: u64,
    /// Every database holding a copy, primary included.
    pub hosts: Vec<String>,
    /// Primary copy. Defaults to the first host in database declaration order.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub primary: Option<String>,
}

impl Fragment {
    pub fn primary_db(&self) -> &str {
        self.primary
            .as_deref()
            .or_else(|| self.hosts.first().map(String::as_str))
            .unwrap_or("")
    }

    pub fn replica_dbs(&self) -> impl Iterator<Item = &str> {
        let primary = self.primary_db().to_owned();
        self.hosts
            .iter()
            .map(String::as_str)
            .filter(move |h| *h != primary)
    }

    pub fn is_replicated(&self) -> bool {
        self.hosts.len() > 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Database {
    pub id: String,
    pub cluster: String,
}

/// A machine together with its query profile: bytes read and bytes updated
/// per fragment for each processed token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Machine {
    pub id: String,
    pub cluster: String,
    pub oper_time_s: f64,
    #[serde(default)]
    pub reads: BTreeMap<String, u64>,
    #[serde(default)]
    pub updates: BTreeMap<String, u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JitterOverride {
    pub machine: String,
    pub db: String,
    pub sigma_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Topology {
    /// Clusters in backbone order; adjacent entries are one router hop apart.
    pub clusters: Vec<String>,
    pub link_rate_bps: f64,
    pub per_hop_latency_s: f64,
    pub server_processing_s: f64,
    #[serde(default)]
    pub read_fixed_s: f64,
    #[serde(default)]
    pub write_fixed_s: f64,
    #[serde(default)]
    pub request_overhead_bytes: u64,
    /// Links between two hosts of the same cluster (host-switch-host).
    #[serde(default = "default_two")]
    pub intra_cluster_links: u32,
    /// Links from a host to its cluster router (host-switch-router).
    #[serde(default = "default_two")]
    pub uplink_links: u32,
    #[serde(default)]
    pub jitter_sigma_s: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub jitter_overrides: Vec<JitterOverride>,
}

fn default_two() -> u32 {
    2
}

impl Topology {
    pub fn cluster_index(&self, cluster: &str) -> Option<usize> {
        self.clusters.iter().position(|c| c == cluster)
    }

    /// Number of links a packet crosses between two clusters.
    pub fn links_between(&self, a: usize, b: usize) -> u32 {
        if a == b {
            self.intra_cluster_links
        } else {
            2 * self.uplink_links + a.abs_diff(b) as u32
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputLot {
    pub class: String,
    pub count: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage {
    pub id: String,
    pub machine: String,
    /// One token of each class is consumed per firing.
    pub inputs: Vec<String>,
    pub output: String,
    #[serde(default = "default_one")]
    pub multiplicity: u32,
}

fn default_one() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Join {
    /// Final stage; its outputs count toward `target_count`.
    pub stage: String,
    /// Input class whose token carries product-resident fragments.
    pub carrier: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WriteGranularity {
    /// One write phase per stage firing (per lot).
    #[default]
    PerFiring,
    /// One write phase per output piece.
    PerPiece,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Workflow {
    pub inputs: Vec<InputLot>,
    pub stages: Vec<Stage>,
    pub join: Join,
    pub target_count: u32,
    #[serde(default)]
    pub write_granularity: WriteGranularity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferMode {
    /// A product access moves the query's byte count.
    #[default]
    QueryBytes,
    /// A product access moves the fragment's `payload_bytes`.
    WholeFragment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Product {
    pub throughput_bps: f64,
    #[serde(default)]
    pub access_overhead_s: f64,
    #[serde(default)]
    pub transfer_mode: TransferMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ReplicationMode {
    /// Primary copy, synchronous: a write completes after every replica applied it.
    #[default]
    #[serde(rename = "pc-s")]
    PrimarySync,
    /// Primary copy, asynchronous: replicas are updated in the background.
    #[serde(rename = "pc-as")]
    PrimaryAsync,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Replication {
    pub mode: ReplicationMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub fragments: Vec<Fragment>,
    pub databases: Vec<Database>,
    pub machines: Vec<Machine>,
    pub topology: Topology,
    pub workflow: Workflow,
    pub product: Product,
    #[serde(default)]
    pub replication: Replication,
}

/// Parses and validates a scenario. Primary copies left implicit in the
/// file are resolved, so serializing the result and loading it again
/// yields an equal value.
pub fn load_scenario(config_text: &str) -> Result<Scenario> {
    let mut scenario: Scenario =
        toml::from_str(config_text).map_err(|e| Error::parse(e.to_string()))?;
    scenario.resolve_primaries();
    scenario.validate()?;
    Ok(scenario)
}

impl Scenario {
    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::parse(e.to_string()))
    }

    /// Number of fragments.
    pub fn k(&self) -> usize {
        self.fragments.len()
    }

    pub fn fragment_index(&self, id: &str) -> Option<usize> {
        self.fragments.iter().position(|f| f.id == id)
    }

    pub fn fragment(&self, id: &str) -> Option<&Fragment> {
        self.fragments.iter().find(|f| f.id == id)
    }

    pub fn database(&self, id: &str) -> Option<&Database> {
        self.databases.iter().find(|d| d.id == id)
    }

    pub fn machine(&self, id: &str) -> Option<&Machine> {
        self.machines.iter().find(|m| m.id == id)
    }

    pub fn stage(&self, id: &str) -> Option<&Stage> {
        self.workflow.stages.iter().find(|s| s.id == id)
    }

    fn resolve_primaries(&mut self) {
        let order: HashMap<&str, usize> = self
            .databases
            .iter()
            .enumerate()
            .map(|(i, d)| (d.id.as_str(), i))
            .collect();
        for f in &mut self.fragments {
            if f.primary.is_none() {
                f.primary = f
                    .hosts
                    .iter()
                    .min_by_key(|h| order.get(h.as_str()).copied().unwrap_or(usize::MAX))
                    .cloned();
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_network()?;
        self.validate_fragments()?;
        self.validate_machines()?;
        self.validate_workflow()?;
        let p = &self.product;
        if !(p.throughput_bps > 0.0 && p.throughput_bps.is_finite()) {
            return Err(Error::validation("product.throughput_bps must be > 0"));
        }
        if p.access_overhead_s.is_nan() || p.access_overhead_s < 0.0 {
            return Err(Error::validation("product.access_overhead_s must be >= 0"));
        }
        Ok(())
    }

    fn validate_network(&self) -> Result<()> {
        let t = &self.topology;
        unique("topology.clusters", t.clusters.iter().map(String::as_str))?;
        if !(t.link_rate_bps > 0.0 && t.link_rate_bps.is_finite()) {
            return Err(Error::validation("topology.link_rate_bps must be > 0"));
        }
        for (name, v) in [
            ("per_hop_latency_s", t.per_hop_latency_s),
            ("server_processing_s", t.server_processing_s),
            ("read_fixed_s", t.read_fixed_s),
            ("write_fixed_s", t.write_fixed_s),
            ("jitter_sigma_s", t.jitter_sigma_s),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::validation(format!(
                    "topology.{name} must be a finite value >= 0 (got {v})"
                )));
            }
        }
        unique("databases", self.databases.iter().map(|d| d.id.as_str()))?;
        for db in &self.databases {
            if t.cluster_index(&db.cluster).is_none() {
                return Err(Error::validation(format!(
                    "database {} is in unknown cluster {}",
                    db.id, db.cluster
                )));
            }
        }
        for o in &t.jitter_overrides {
            if self.machine(&o.machine).is_none() || self.database(&o.db).is_none() {
                return Err(Error::validation(format!(
                    "jitter override references unknown pair ({}, {})",
                    o.machine, o.db
                )));
            }
            if o.sigma_s.is_nan() || o.sigma_s < 0.0 {
                return Err(Error::validation("jitter override sigma_s must be >= 0"));
            }
        }
        Ok(())
    }

    fn validate_fragments(&self) -> Result<()> {
        unique("fragments", self.fragments.iter().map(|f| f.id.as_str()))?;
        for f in &self.fragments {
            if f.payload_bytes == 0 {
                return Err(Error::validation(format!(
                    "fragment {} has payload_bytes = 0",
                    f.id
                )));
            }
            if f.hosts.is_empty() {
                return Err(Error::validation(format!(
                    "fragment {} is not allocated to any database",
                    f.id
                )));
            }
            unique(
                &format!("hosts of {}", f.id),
                f.hosts.iter().map(String::as_str),
            )?;
            for h in &f.hosts {
                if self.database(h).is_none() {
                    return Err(Error::validation(format!(
                        "fragment {} is hosted on unknown database {h}",
                        f.id
                    )));
                }
            }
            if !f.hosts.iter().any(|h| h == f.primary_db()) {
                return Err(Error::validation(format!(
                    "primary {} of fragment {} is not one of its hosts",
                    f.primary_db(),
                    f.id
                )));
            }
        }
        Ok(())
    }

    fn validate_machines(&self) -> Result<()> {
        unique("machines", self.machines.iter().map(|m| m.id.as_str()))?;
        for m in &self.machines {
            if self.topology.cluster_index(&m.cluster).is_none() {
                return Err(Error::validation(format!(
                    "machine {} is in unknown cluster {}",
                    m.id, m.cluster
                )));
            }
            if !(m.oper_time_s >= 0.0 && m.oper_time_s.is_finite()) {
                return Err(Error::validation(format!(
                    "machine {} oper_time_s must be >= 0",
                    m.id
                )));
            }
            for (kind, map) in [("reads", &m.reads), ("updates", &m.updates)] {
                for (frag, &bytes) in map {
                    if self.fragment(frag).is_none() {
                        return Err(Error::validation(format!(
                            "machine {} {kind} unknown fragment {frag}",
                            m.id
                        )));
                    }
                    if bytes == 0 {
                        return Err(Error::validation(format!(
                            "machine {} {kind} {frag} with 0 bytes",
                            m.id
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    fn validate_workflow(&self) -> Result<()> {
        let wf = &self.workflow;
        unique("workflow.stages", wf.stages.iter().map(|s| s.id.as_str()))?;
        unique(
            "workflow.inputs",
            wf.inputs.iter().map(|i| i.class.as_str()),
        )?;
        let mut consumers: HashMap<&str, &str> = HashMap::new();
        for s in &wf.stages {
            if self.machine(&s.machine).is_none() {
                return Err(Error::validation(format!(
                    "stage {} uses unknown machine {}",
                    s.id, s.machine
                )));
            }
            if s.inputs.is_empty() {
                return Err(Error::validation(format!("stage {} has no inputs", s.id)));
            }
            if s.multiplicity == 0 {
                return Err(Error::validation(format!(
                    "stage {} has output multiplicity 0",
                    s.id
                )));
            }
            unique(
                &format!("inputs of stage {}", s.id),
                s.inputs.iter().map(String::as_str),
            )?;
            for class in &s.inputs {
                if let Some(prev) = consumers.insert(class, &s.id) {
                    return Err(Error::validation(format!(
                        "class {class} is consumed by both {prev} and {}",
                        s.id
                    )));
                }
            }
        }
        let join = self
            .stage(&wf.join.stage)
            .ok_or_else(|| Error::validation(format!("join stage {} not found", wf.join.stage)))?;
        if !join.inputs.contains(&wf.join.carrier) {
            return Err(Error::validation(format!(
                "carrier class {} is not an input of join stage {}",
                wf.join.carrier, join.id
            )));
        }
        let producible = self.producible_counts()?;
        let available = producible.get(join.output.as_str()).copied().unwrap_or(0);
        if u64::from(wf.target_count) > available {
            return Err(Error::validation(format!(
                "target_count {} is infeasible: at most {available} {} can be produced",
                wf.target_count, join.output
            )));
        }
        Ok(())
    }

    /// Upper bound on tokens of each class obtainable from the inputs.
    pub fn producible_counts(&self) -> Result<HashMap<&str, u64>> {
        let wf = &self.workflow;
        let mut counts: HashMap<&str, u64> = wf
            .inputs
            .iter()
            .map(|i| (i.class.as_str(), u64::from(i.count)))
            .collect();
        let mut done = vec![false; wf.stages.len()];
        loop {
            let mut progressed = false;
            for (i, s) in wf.stages.iter().enumerate() {
                if done[i] {
                    continue;
                }
                let ready = s.inputs.iter().all(|c| {
                    counts.contains_key(c.as_str()) || !wf.stages.iter().any(|o| &o.output == c)
                });
                if !ready {
                    continue;
                }
                let fires = s
                    .inputs
                    .iter()
                    .map(|c| counts.get(c.as_str()).copied().unwrap_or(0))
                    .min()
                    .unwrap_or(0);
                *counts.entry(s.output.as_str()).or_insert(0) += fires * u64::from(s.multiplicity);
                done[i] = true;
                progressed = true;
            }
            if done.iter().all(|d| *d) {
                return Ok(counts);
            }
            if !progressed {
                return Err(Error::validation("workflow stages form a cycle"));
            }
        }
    }
}

fn unique<'a>(what: &str, ids: impl Iterator<Item = &'a str>) -> Result<()> {
    let mut seen = BTreeSet::new();
    for id in ids {
        if !seen.insert(id) {
            return Err(Error::validation(format!("duplicate id {id} in {what}")));
        }
    }
    Ok(())
}

/// Placement of every fragment: `true` means on the product, `false` means
/// on its database allocation. Bit `i` corresponds to catalog position `i`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct DistributionPattern {
    bits: Vec<bool>,
}

impl DistributionPattern {
    pub fn new(bits: Vec<bool>) -> Self {
        Self { bits }
    }

    /// All fragments on databases.
    pub fn oda(k: usize) -> Self {
        Self {
            bits: vec![false; k],
        }
    }

    /// All fragments on the product.
    pub fn full_odap(k: usize) -> Self {
        Self {
            bits: vec![true; k],
        }
    }

    /// Pattern whose binary index (fragment 1 = least significant bit) is `index`.
    pub fn from_index(k: usize, index: u64) -> Self {
        Self {
            bits: (0..k).map(|i| (index >> i) & 1 == 1).collect(),
        }
    }

    pub fn index(&self) -> u64 {
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, b)| **b)
            .map(|(i, _)| 1u64 << i)
            .sum()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn on_product(&self, fragment_index: usize) -> bool {
        self.bits.get(fragment_index).copied().unwrap_or(false)
    }

    pub fn is_oda(&self) -> bool {
        self.bits.iter().all(|b| !b)
    }

    pub fn is_full_odap(&self) -> bool {
        self.bits.iter().all(|b| *b)
    }

    /// `"00000101"`: one character per fragment, fragment 1 first.
    pub fn bit_string(&self) -> String {
        self.bits
            .iter()
            .map(|b| if *b { '1' } else { '0' })
            .collect()
    }

    pub fn parse_bit_string(s: &str) -> Result<Self> {
        s.chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(Error::parse(format!(
                    "invalid pattern bit '{other}' in {s:?}"
                ))),
            })
            .collect::<Result<Vec<_>>>()
            .map(Self::new)
    }

    /// Fragment ids placed on the product.
    pub fn product_fragments<'a>(&self, scenario: &'a Scenario) -> Vec<&'a str> {
        scenario
            .fragments
            .iter()
            .zip(&self.bits)
            .filter(|(_, b)| **b)
            .map(|(f, _)| f.id.as_str())
            .collect()
    }

    /// `"!F1 !F2 F3"` rendering, the inverse of [`pattern_from_spec`].
    pub fn to_spec(&self, scenario: &Scenario) -> String {
        scenario
            .fragments
            .iter()
            .zip(&self.bits)
            .map(|(f, b)| {
                if *b {
                    f.id.clone()
                } else {
                    format!("!{}", f.id)
                }
            })
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Parses a pattern that lists every fragment exactly once, either as `Fi`
/// (on the product) or `!Fi` (on its databases). Brackets and commas are
/// ignored.
pub fn pattern_from_spec(spec: &str, scenario: &Scenario) -> Result<DistributionPattern> {
    let mut bits: Vec<Option<bool>> = vec![None; scenario.k()];
    for token in tokens(spec) {
        let (negated, id) = match token.strip_prefix(['!', '~']) {
            Some(rest) => (true, rest),
            None => (false, token),
        };
        let idx = scenario
            .fragment_index(id)
            .ok_or_else(|| Error::parse(format!("unknown fragment {id:?} in pattern")))?;
        if bits[idx].replace(!negated).is_some() {
            return Err(Error::parse(format!(
                "fragment {id} listed twice in pattern"
            )));
        }
    }
    let missing: Vec<&str> = bits
        .iter()
        .zip(&scenario.fragments)
        .filter(|(b, _)| b.is_none())
        .map(|(_, f)| f.id.as_str())
        .collect();
    if !missing.is_empty() {
        return Err(Error::parse(format!(
            "pattern does not place fragment(s) {}",
            missing.join(", ")
        )));
    }
    Ok(DistributionPattern::new(
        bits.into_iter().map(|b| b == Some(true)).collect(),
    ))
}

/// Lenient pattern syntax for command-line use:
///
/// * `ODA` - everything on databases; `ODAP` or `FULL` - everything on the product
/// * a bit string such as `00000101` (fragment 1 first)
/// * a complete `Fi` / `!Fi` listing (see [`pattern_from_spec`])
/// * a list of plain ids such as `F6 F8`, naming the fragments on the product
pub fn parse_pattern(text: &str, scenario: &Scenario) -> Result<DistributionPattern> {
    let trimmed = text.trim();
    let k = scenario.k();
    match trimmed.to_ascii_uppercase().as_str() {
        "ODA" => return Ok(DistributionPattern::oda(k)),
        "ODAP" | "FULL" | "FULL_ODAP" | "FULL-ODAP" => {
            return Ok(DistributionPattern::full_odap(k))
        }
        _ => {}
    }
    if k > 0 && trimmed.len() == k && trimmed.chars().all(|c| c == '0' || c == '1') {
        return DistributionPattern::parse_bit_string(trimmed);
    }
    let toks: Vec<&str> = tokens(trimmed).collect();
    if toks.is_empty() {
        return Err(Error::parse("empty pattern"));
    }
    if toks.iter().any(|t| t.starts_with(['!', '~'])) {
        return pattern_from_spec(trimmed, scenario);
    }
    let mut bits = vec![false; k];
    for id in toks {
        let idx = scenario
            .fragment_index(id)
            .ok_or_else(|| Error::parse(format!("unknown fragment {id:?} in pattern")))?;
        if std::mem::replace(&mut bits[idx], true) {
            return Err(Error::parse(format!(
                "fragment {id} listed twice in pattern"
            )));
        }
    }
    Ok(DistributionPattern::new(bits))
}

fn tokens(spec: &str) -> impl Iterator<Item = &str> {
    spec.split(|c: char| c.is_whitespace() || matches!(c, ',' | '[' | ']'))
        .filter(|t| !t.is_empty())
}
