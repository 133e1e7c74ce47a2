//! Production workflow simulation.
//!
//! Every stage firing holds its machine for a full cycle: a read phase over
//! the fragments the machine reads, the operation itself, then a write phase
//! over the fragments it updates. Database-side accesses queue on the
//! database servers for the round-trip time given by [`RttModel`];
//! product-side accesses only cost the product transfer time. Accesses
//! within a phase run one after another in catalog order.
//!
//! Cutting-style stages turn one input token into `multiplicity` outputs; the
//! join stage consumes one token of each input class, and its outputs count
//! toward the target. The makespan is the completion time of the target-th
//! output.

use std::collections::{BTreeMap, VecDeque};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::des::{Engine, EventLabel, Hold, ResourceId, RunStats, TraceRecord};
use crate::error::{Error, Result};
use crate::network::{product_access_time, RttModel};
use crate::scenario::{
    DistributionPattern, Machine, ReplicationMode, Scenario, TransferMode, WriteGranularity,
};

/// Per-fragment access lists of one machine under one pattern, split by
/// where the fragment lives. Each list is in catalog order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AccessLists {
    pub db_reads: Vec<(String, u64)>,
    pub product_reads: Vec<(String, u64)>,
    pub db_writes: Vec<(String, u64)>,
    pub product_writes: Vec<(String, u64)>,
}

pub fn split_access_lists(
    machine: &Machine,
    pattern: &DistributionPattern,
    scenario: &Scenario,
) -> AccessLists {
    let mut out = AccessLists::default();
    for (i, f) in scenario.fragments.iter().enumerate() {
        let on_product = pattern.on_product(i);
        if let Some(&b) = machine.reads.get(&f.id) {
            let list = if on_product {
                &mut out.product_reads
            } else {
                &mut out.db_reads
            };
            list.push((f.id.clone(), b));
        }
        if let Some(&b) = machine.updates.get(&f.id) {
            let list = if on_product {
                &mut out.product_writes
            } else {
                &mut out.db_writes
            };
            list.push((f.id.clone(), b));
        }
    }
    out
}

fn check_writer(writer: &Machine, fragment: &str) -> Result<()> {
    if writer.updates.contains_key(fragment) {
        Ok(())
    } else {
        Err(Error::validation(format!(
            "machine {} does not update fragment {fragment}",
            writer.id
        )))
    }
}

/// Version counters of every hosted copy of every fragment.
#[derive(Debug, Clone, PartialEq)]
pub struct DbState {
    fragment_ids: Vec<String>,
    db_ids: Vec<String>,
    /// Hosting databases per fragment, primary first.
    hosts: Vec<Vec<usize>>,
    /// Version per fragment per host position.
    versions: Vec<Vec<u64>>,
    committed: Vec<u64>,
}

impl DbState {
    pub fn new(scenario: &Scenario) -> Result<Self> {
        let model = RttModel::new(scenario)?;
        let hosts: Vec<Vec<usize>> = (0..scenario.k()).map(|f| model.hosts(f).to_vec()).collect();
        Ok(Self {
            fragment_ids: scenario.fragments.iter().map(|f| f.id.clone()).collect(),
            db_ids: scenario.databases.iter().map(|d| d.id.clone()).collect(),
            versions: hosts.iter().map(|h| vec![0; h.len()]).collect(),
            committed: vec![0; hosts.len()],
            hosts,
        })
    }

    fn fragment_ix(&self, id: &str) -> Result<usize> {
        self.fragment_ids
            .iter()
            .position(|f| f == id)
            .ok_or_else(|| Error::config(format!("unknown fragment {id}")))
    }

    pub fn version(&self, db: &str, fragment: &str) -> Option<u64> {
        let f = self.fragment_ids.iter().position(|x| x == fragment)?;
        let d = self.db_ids.iter().position(|x| x == db)?;
        let pos = self.hosts[f].iter().position(|h| *h == d)?;
        Some(self.versions[f][pos])
    }

    pub fn committed(&self, fragment: usize) -> u64 {
        self.committed[fragment]
    }

    /// Synchronous primary-copy commit: primary and every replica move to
    /// the new version together.
    pub fn commit_write(&mut self, fragment: &str, writer: &Machine) -> Result<u64> {
        check_writer(writer, fragment)?;
        let f = self.fragment_ix(fragment)?;
        Ok(self.commit_sync(f))
    }

    pub(crate) fn commit_sync(&mut self, f: usize) -> u64 {
        self.committed[f] += 1;
        let v = self.committed[f];
        self.versions[f].iter_mut().for_each(|x| *x = v);
        v
    }

    /// Asynchronous commit: only the primary advances now.
    pub(crate) fn commit_primary(&mut self, f: usize) -> u64 {
        self.committed[f] += 1;
        let v = self.committed[f];
        self.versions[f][0] = v;
        v
    }

    pub(crate) fn apply_replica(&mut self, f: usize, db: usize, version: u64) {
        if let Some(pos) = self.hosts[f].iter().position(|h| *h == db) {
            let slot = &mut self.versions[f][pos];
            *slot = (*slot).max(version);
        }
    }

    /// All hosting copies of `fragment` carry the same version.
    pub fn is_consistent(&self, f: usize) -> bool {
        self.versions[f].windows(2).all(|w| w[0] == w[1])
    }
}

/// A product moving through the line with the versions of the fragments it
/// carries (exactly the pattern's product-resident fragments).
#[derive(Debug, Clone, PartialEq)]
pub struct ProductToken {
    pub class: String,
    pub id: u64,
    /// Fragment id -> version.
    pub carried: BTreeMap<String, u64>,
}

impl ProductToken {
    pub fn new(
        class: impl Into<String>,
        id: u64,
        pattern: &DistributionPattern,
        scenario: &Scenario,
    ) -> Self {
        Self {
            class: class.into(),
            id,
            carried: pattern
                .product_fragments(scenario)
                .into_iter()
                .map(|f| (f.to_owned(), 0))
                .collect(),
        }
    }

    /// Local write on the product: only this token's copy advances.
    pub fn commit_write(&mut self, fragment: &str, writer: &Machine) -> Result<u64> {
        check_writer(writer, fragment)?;
        let v = self.carried.get_mut(fragment).ok_or_else(|| {
            Error::validation(format!(
                "token {} does not carry fragment {fragment}",
                self.id
            ))
        })?;
        *v += 1;
        Ok(*v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimOptions {
    pub jitter: bool,
    pub trace: bool,
    pub max_events: u64,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self {
            jitter: true,
            trace: false,
            max_events: Engine::<Ev>::DEFAULT_MAX_EVENTS,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageStats {
    pub stage: String,
    pub machine: String,
    pub firings: u64,
    pub outputs: u64,
    pub machine_utilization: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ConsistencyStats {
    /// Quiescent instants at which replica versions were compared.
    pub checks: u64,
    pub violations: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimResult {
    pub makespan_s: f64,
    /// Tokens produced per output class.
    pub produced: BTreeMap<String, u64>,
    pub completed: u64,
    pub stages: Vec<StageStats>,
    pub engine: RunStats,
    pub consistency: ConsistencyStats,
    pub trace: Option<Vec<TraceRecord>>,
}

#[derive(Debug, Clone, Copy)]
struct Access {
    fragment: usize,
    bytes: u64,
    payload: u64,
}

#[derive(Debug)]
struct CompiledStage {
    machine: usize,
    inputs: Vec<usize>,
    carrier: usize,
    output: usize,
    multiplicity: u32,
    oper_time: f64,
    is_join: bool,
}

/// Scenario compiled once for repeated runs. Cheap to share across threads.
#[derive(Debug)]
pub struct Simulator<'a> {
    scenario: &'a Scenario,
    model: RttModel,
    stages: Vec<CompiledStage>,
    class_names: Vec<String>,
    consumer: Vec<Option<usize>>,
    inputs: Vec<(usize, u32)>,
    join_limit: u64,
}

impl<'a> Simulator<'a> {
    pub fn new(scenario: &'a Scenario) -> Result<Self> {
        let model = RttModel::new(scenario)?;
        let wf = &scenario.workflow;
        let mut class_names: Vec<String> = Vec::new();
        let mut class = |name: &str| -> usize {
            match class_names.iter().position(|c| c == name) {
                Some(i) => i,
                None => {
                    class_names.push(name.to_owned());
                    class_names.len() - 1
                }
            }
        };
        let inputs: Vec<(usize, u32)> = wf
            .inputs
            .iter()
            .map(|i| (class(&i.class), i.count))
            .collect();
        let mut stages = Vec::with_capacity(wf.stages.len());
        for s in &wf.stages {
            let machine = model.machine_index(&s.machine)?;
            let is_join = s.id == wf.join.stage;
            let carrier = if is_join {
                s.inputs
                    .iter()
                    .position(|c| *c == wf.join.carrier)
                    .ok_or_else(|| Error::validation("join carrier is not a join input"))?
            } else {
                0
            };
            stages.push(CompiledStage {
                machine,
                inputs: s.inputs.iter().map(|c| class(c)).collect(),
                carrier,
                output: class(&s.output),
                multiplicity: s.multiplicity,
                oper_time: scenario.machines[machine].oper_time_s,
                is_join,
            });
        }
        let join = stages
            .iter()
            .position(|s| s.is_join)
            .ok_or_else(|| Error::validation(format!("join stage {} not found", wf.join.stage)))?;
        let mut consumer = vec![None; class_names.len()];
        for (i, s) in stages.iter().enumerate() {
            for &c in &s.inputs {
                consumer[c] = Some(i);
            }
        }
        let mult = u64::from(stages[join].multiplicity);
        let join_limit = u64::from(wf.target_count).div_ceil(mult);
        Ok(Self {
            scenario,
            model,
            stages,
            class_names,
            consumer,
            inputs,
            join_limit,
        })
    }

    pub fn scenario(&self) -> &Scenario {
        self.scenario
    }

    pub fn model(&self) -> &RttModel {
        &self.model
    }

    /// Runs the workflow until the calendar drains and reports the time at
    /// which the target count was reached.
    pub fn run(
        &self,
        pattern: &DistributionPattern,
        throughput_bps: f64,
        seed: u64,
        options: SimOptions,
    ) -> Result<SimResult> {
        if pattern.len() != self.scenario.k() {
            return Err(Error::validation(format!(
                "pattern has {} bits but the scenario has {} fragments",
                pattern.len(),
                self.scenario.k()
            )));
        }
        product_access_time(0, throughput_bps, 0.0)?;
        let target = u64::from(self.scenario.workflow.target_count);
        if target == 0 {
            return Ok(SimResult {
                makespan_s: 0.0,
                produced: BTreeMap::new(),
                completed: 0,
                stages: self.stage_stats(&[], &[], None),
                engine: RunStats {
                    final_time: 0.0,
                    events_processed: 0,
                    resources: Vec::new(),
                },
                consistency: ConsistencyStats::default(),
                trace: options.trace.then(Vec::new),
            });
        }
        let mut engine = Engine::new().with_max_events(options.max_events);
        if options.trace {
            engine = engine.with_trace();
        }
        let machines = self
            .scenario
            .machines
            .iter()
            .map(|m| engine.add_resource(m.id.clone(), 1))
            .collect();
        let dbs = self
            .scenario
            .databases
            .iter()
            .map(|d| engine.add_resource(d.id.clone(), 1))
            .collect();
        let mut run = Run::new(
            self,
            pattern,
            throughput_bps,
            seed,
            options.jitter,
            machines,
            dbs,
        )?;
        run.seed_inputs(&mut engine)?;
        let stats = engine.run_until(|e, ev| run.handle(e, ev), |_| false)?;
        if run.completed < target {
            return Err(Error::validation(format!(
                "workflow stalled after {} of {target} outputs",
                run.completed
            )));
        }
        let trace = options.trace.then(|| engine.take_trace());
        Ok(SimResult {
            makespan_s: run.makespan,
            produced: self
                .class_names
                .iter()
                .zip(&run.produced)
                .filter(|(c, _)| !self.inputs.iter().any(|(i, _)| self.class_names[*i] == **c))
                .map(|(c, n)| (c.clone(), *n))
                .collect(),
            completed: run.completed,
            stages: self.stage_stats(&run.firings, &run.outputs, Some(&stats)),
            engine: stats,
            consistency: run.consistency,
            trace,
        })
    }

    fn stage_stats(
        &self,
        firings: &[u64],
        outputs: &[u64],
        engine: Option<&RunStats>,
    ) -> Vec<StageStats> {
        self.scenario
            .workflow
            .stages
            .iter()
            .enumerate()
            .map(|(i, s)| StageStats {
                stage: s.id.clone(),
                machine: s.machine.clone(),
                firings: firings.get(i).copied().unwrap_or(0),
                outputs: outputs.get(i).copied().unwrap_or(0),
                machine_utilization: engine
                    .and_then(|e| e.resources.get(self.stages[i].machine))
                    .map_or(0.0, |r| r.utilization),
            })
            .collect()
    }
}

/// Convenience wrapper: compile the scenario and run once with jitter on.
pub fn run_simulation(
    scenario: &Scenario,
    pattern: &DistributionPattern,
    throughput_bps: f64,
    seed: u64,
) -> Result<SimResult> {
    Simulator::new(scenario)?.run(pattern, throughput_bps, seed, SimOptions::default())
}

#[derive(Debug, Clone)]
struct Token {
    id: u64,
    /// Version per carried fragment, indexed by fragment; `None` when the
    /// fragment is on the databases.
    carried: Vec<Option<u64>>,
}

#[derive(Debug)]
pub struct Ev {
    step: Step,
    entity: u64,
}

#[derive(Debug)]
enum Step {
    Fire {
        job: usize,
        join: bool,
    },
    Start {
        job: usize,
    },
    ReadDone {
        job: usize,
        product: bool,
    },
    Operated {
        job: usize,
    },
    Locked {
        job: usize,
    },
    WriteDone {
        job: usize,
        product: bool,
    },
    Propagated {
        fragment: usize,
        db: usize,
        version: u64,
    },
}

impl EventLabel for Ev {
    fn kind(&self) -> &'static str {
        match self.step {
            Step::Fire { join: true, .. } => "join",
            Step::Fire { join: false, .. } => "dispatch",
            Step::Start { .. } => "start",
            Step::ReadDone { product: true, .. } => "read_product",
            Step::ReadDone { product: false, .. } => "read_db",
            Step::Operated { .. } => "operate",
            Step::Locked { .. } => "lock",
            Step::WriteDone { product: true, .. } => "write_product",
            Step::WriteDone { product: false, .. } => "write_db",
            Step::Propagated { .. } => "propagate",
        }
    }

    fn entity(&self) -> u64 {
        self.entity
    }
}

#[derive(Debug)]
struct Job {
    stage: usize,
    tokens: Vec<Token>,
    entity: u64,
    cursor: usize,
    round: u32,
    locks_wanted: Vec<usize>,
    locks_held: Vec<usize>,
    write_duration: f64,
    propagations: Vec<(usize, f64)>,
}

struct Run<'s, 'a> {
    sim: &'s Simulator<'a>,
    on_product: Vec<bool>,
    throughput: f64,
    overhead: f64,
    whole_fragment: bool,
    rng: Option<ChaCha8Rng>,
    machines: Vec<ResourceId>,
    dbs: Vec<ResourceId>,
    reads: Vec<Vec<(Access, bool)>>,
    writes: Vec<Vec<(Access, bool)>>,
    write_rounds: Vec<u32>,
    buffers: Vec<VecDeque<Token>>,
    jobs: Vec<Option<Job>>,
    free_jobs: Vec<usize>,
    next_token: u64,
    next_background: u64,
    join_fired: u64,
    completed: u64,
    target: u64,
    makespan: f64,
    produced: Vec<u64>,
    firings: Vec<u64>,
    outputs: Vec<u64>,
    db_state: DbState,
    in_flight: Vec<u32>,
    consistency: ConsistencyStats,
}

const BACKGROUND_OWNER: u64 = 1 << 63;

impl<'s, 'a> Run<'s, 'a> {
    fn new(
        sim: &'s Simulator<'a>,
        pattern: &DistributionPattern,
        throughput: f64,
        seed: u64,
        jitter: bool,
        machines: Vec<ResourceId>,
        dbs: Vec<ResourceId>,
    ) -> Result<Self> {
        let sc = sim.scenario;
        let on_product = pattern.bits().to_vec();
        let lists = |m: &Machine, reads: bool| -> Vec<(Access, bool)> {
            let map = if reads { &m.reads } else { &m.updates };
            sc.fragments
                .iter()
                .enumerate()
                .filter_map(|(i, f)| {
                    map.get(&f.id).map(|&bytes| {
                        (
                            Access {
                                fragment: i,
                                bytes,
                                payload: f.payload_bytes,
                            },
                            on_product[i],
                        )
                    })
                })
                .collect()
        };
        let reads = sim
            .stages
            .iter()
            .map(|s| lists(&sc.machines[s.machine], true))
            .collect();
        let writes = sim
            .stages
            .iter()
            .map(|s| lists(&sc.machines[s.machine], false))
            .collect();
        let write_rounds = sim
            .stages
            .iter()
            .map(|s| match sc.workflow.write_granularity {
                WriteGranularity::PerFiring => 1,
                WriteGranularity::PerPiece => s.multiplicity,
            })
            .collect();
        Ok(Self {
            sim,
            on_product,
            throughput,
            overhead: sc.product.access_overhead_s,
            whole_fragment: sc.product.transfer_mode == TransferMode::WholeFragment,
            rng: jitter.then(|| ChaCha8Rng::seed_from_u64(seed)),
            machines,
            dbs,
            reads,
            writes,
            write_rounds,
            buffers: vec![VecDeque::new(); sim.class_names.len()],
            jobs: Vec::new(),
            free_jobs: Vec::new(),
            next_token: 0,
            next_background: 0,
            join_fired: 0,
            completed: 0,
            target: u64::from(sc.workflow.target_count),
            makespan: 0.0,
            produced: vec![0; sim.class_names.len()],
            firings: vec![0; sim.stages.len()],
            outputs: vec![0; sim.stages.len()],
            db_state: DbState::new(sc)?,
            in_flight: vec![0; sc.k()],
            consistency: ConsistencyStats::default(),
        })
    }

    fn new_token(&mut self, carried: Vec<Option<u64>>) -> Token {
        let id = self.next_token;
        self.next_token += 1;
        Token { id, carried }
    }

    fn seed_inputs(&mut self, engine: &mut Engine<Ev>) -> Result<()> {
        let blank: Vec<Option<u64>> = self.on_product.iter().map(|p| p.then_some(0)).collect();
        for &(class, count) in &self.sim.inputs {
            for _ in 0..count {
                let t = self.new_token(blank.clone());
                self.buffers[class].push_back(t);
            }
        }
        for stage in 0..self.sim.stages.len() {
            self.try_fire(engine, stage)?;
        }
        Ok(())
    }

    fn try_fire(&mut self, engine: &mut Engine<Ev>, stage: usize) -> Result<()> {
        let s = &self.sim.stages[stage];
        loop {
            if s.is_join && self.join_fired >= self.sim.join_limit {
                return Ok(());
            }
            if !s.inputs.iter().all(|&c| !self.buffers[c].is_empty()) {
                return Ok(());
            }
            let tokens: Vec<Token> = s
                .inputs
                .iter()
                .map(|&c| self.buffers[c].pop_front().expect("checked non-empty"))
                .collect();
            if s.is_join {
                self.join_fired += 1;
            }
            let entity = tokens[s.carrier].id;
            let job = Job {
                stage,
                tokens,
                entity,
                cursor: 0,
                round: 0,
                locks_wanted: Vec::new(),
                locks_held: Vec::new(),
                write_duration: 0.0,
                propagations: Vec::new(),
            };
            let id = match self.free_jobs.pop() {
                Some(i) => {
                    self.jobs[i] = Some(job);
                    i
                }
                None => {
                    self.jobs.push(Some(job));
                    self.jobs.len() - 1
                }
            };
            engine.schedule_in(
                0.0,
                Ev {
                    step: Step::Fire {
                        job: id,
                        join: s.is_join,
                    },
                    entity,
                },
            )?;
        }
    }

    fn job(&mut self, id: usize) -> &mut Job {
        self.jobs[id].as_mut().expect("live job")
    }

    fn product_time(&self, a: &Access) -> Result<f64> {
        let bytes = if self.whole_fragment {
            a.payload
        } else {
            a.bytes
        };
        product_access_time(bytes, self.throughput, self.overhead)
    }

    fn handle(&mut self, engine: &mut Engine<Ev>, ev: Ev) -> Result<()> {
        let entity = ev.entity;
        match ev.step {
            Step::Fire { job, .. } => {
                let stage = self.job(job).stage;
                let machine = self.machines[self.sim.stages[stage].machine];
                engine.acquire(
                    machine,
                    entity,
                    Hold::UntilRelease,
                    Ev {
                        step: Step::Start { job },
                        entity,
                    },
                )
            }
            Step::Start { job } => {
                let stage = self.job(job).stage;
                self.firings[stage] += 1;
                self.next_read(engine, job)
            }
            Step::ReadDone { job, .. } => {
                self.job(job).cursor += 1;
                self.next_read(engine, job)
            }
            Step::Operated { job } => {
                self.job(job).cursor = 0;
                self.next_write(engine, job)
            }
            Step::Locked { job } => self.lock_next(engine, job),
            Step::WriteDone { job, product } => {
                self.finish_write(engine, job, product)?;
                self.job(job).cursor += 1;
                self.next_write(engine, job)
            }
            Step::Propagated {
                fragment,
                db,
                version,
            } => {
                self.db_state.apply_replica(fragment, db, version);
                self.in_flight[fragment] -= 1;
                self.check_consistency(fragment);
                Ok(())
            }
        }
    }

    fn next_read(&mut self, engine: &mut Engine<Ev>, job: usize) -> Result<()> {
        let (stage, cursor, entity) = {
            let j = self.job(job);
            (j.stage, j.cursor, j.entity)
        };
        let Some(&(access, on_product)) = self.reads[stage].get(cursor) else {
            let oper = self.sim.stages[stage].oper_time;
            engine.schedule_in(
                oper,
                Ev {
                    step: Step::Operated { job },
                    entity,
                },
            )?;
            return Ok(());
        };
        let ev = Ev {
            step: Step::ReadDone {
                job,
                product: on_product,
            },
            entity,
        };
        if on_product {
            engine.schedule_in(self.product_time(&access)?, ev)?;
        } else {
            let machine = self.sim.stages[stage].machine;
            let (db, d) =
                self.sim
                    .model
                    .db_read_rtt(machine, access.fragment, self.rng.as_mut())?;
            engine.acquire(self.dbs[db], entity, Hold::For(d), ev)?;
        }
        Ok(())
    }

    fn next_write(&mut self, engine: &mut Engine<Ev>, job: usize) -> Result<()> {
        let (stage, cursor, entity) = {
            let j = self.job(job);
            (j.stage, j.cursor, j.entity)
        };
        let Some(&(access, on_product)) = self.writes[stage].get(cursor) else {
            let round = {
                let j = self.job(job);
                j.round += 1;
                j.cursor = 0;
                j.round
            };
            if round < self.write_rounds[stage] && !self.writes[stage].is_empty() {
                return self.next_write(engine, job);
            }
            return self.complete(engine, job);
        };
        if on_product {
            let d = self.product_time(&access)?;
            engine.schedule_in(
                d,
                Ev {
                    step: Step::WriteDone { job, product: true },
                    entity,
                },
            )?;
            return Ok(());
        }
        let machine = self.sim.stages[stage].machine;
        let timing = self
            .sim
            .model
            .db_write_rtt(machine, access.fragment, self.rng.as_mut())?;
        match self.sim.model.mode() {
            ReplicationMode::PrimarySync => {
                // Lock every copy in database order, then hold for the fan-out.
                let mut wanted = self.sim.model.hosts(access.fragment).to_vec();
                wanted.sort_unstable();
                wanted.reverse();
                let j = self.job(job);
                j.locks_wanted = wanted;
                j.locks_held.clear();
                j.write_duration = timing.duration_s;
                self.lock_next(engine, job)
            }
            ReplicationMode::PrimaryAsync => {
                let j = self.job(job);
                j.write_duration = timing.duration_s;
                j.propagations = timing.propagations;
                engine.acquire(
                    self.dbs[timing.primary],
                    entity,
                    Hold::For(timing.duration_s),
                    Ev {
                        step: Step::WriteDone {
                            job,
                            product: false,
                        },
                        entity,
                    },
                )
            }
        }
    }

    fn lock_next(&mut self, engine: &mut Engine<Ev>, job: usize) -> Result<()> {
        let j = self.job(job);
        let entity = j.entity;
        match j.locks_wanted.pop() {
            Some(db) => {
                j.locks_held.push(db);
                engine.acquire(
                    self.dbs[db],
                    entity,
                    Hold::UntilRelease,
                    Ev {
                        step: Step::Locked { job },
                        entity,
                    },
                )
            }
            None => {
                let d = j.write_duration;
                engine.schedule_in(
                    d,
                    Ev {
                        step: Step::WriteDone {
                            job,
                            product: false,
                        },
                        entity,
                    },
                )?;
                Ok(())
            }
        }
    }

    fn finish_write(&mut self, engine: &mut Engine<Ev>, job: usize, product: bool) -> Result<()> {
        let stage = self.job(job).stage;
        let cursor = self.job(job).cursor;
        let (access, _) = self.writes[stage][cursor];
        let f = access.fragment;
        if product {
            let carrier = self.sim.stages[stage].carrier;
            let j = self.job(job);
            let slot = j.tokens[carrier].carried[f].as_mut().ok_or_else(|| {
                Error::Invariant(format!("token {} does not carry fragment #{f}", j.entity))
            })?;
            *slot += 1;
            return Ok(());
        }
        match self.sim.model.mode() {
            ReplicationMode::PrimarySync => {
                let (entity, held) = {
                    let j = self.job(job);
                    (j.entity, std::mem::take(&mut j.locks_held))
                };
                self.db_state.commit_sync(f);
                for db in held {
                    engine.release(self.dbs[db], entity)?;
                }
                self.check_consistency(f);
            }
            ReplicationMode::PrimaryAsync => {
                let version = self.db_state.commit_primary(f);
                let propagations = std::mem::take(&mut self.job(job).propagations);
                for (replica, d) in propagations {
                    self.in_flight[f] += 1;
                    let owner = BACKGROUND_OWNER | self.next_background;
                    self.next_background += 1;
                    engine.acquire(
                        self.dbs[replica],
                        owner,
                        Hold::For(d),
                        Ev {
                            step: Step::Propagated {
                                fragment: f,
                                db: replica,
                                version,
                            },
                            entity: owner,
                        },
                    )?;
                }
                self.check_consistency(f);
            }
        }
        Ok(())
    }

    fn check_consistency(&mut self, f: usize) {
        if self.in_flight[f] == 0 {
            self.consistency.checks += 1;
            if !self.db_state.is_consistent(f) {
                self.consistency.violations += 1;
            }
        }
    }

    fn complete(&mut self, engine: &mut Engine<Ev>, job: usize) -> Result<()> {
        let j = self.jobs[job].take().expect("live job");
        self.free_jobs.push(job);
        let s = &self.sim.stages[j.stage];
        engine.release(self.machines[s.machine], j.entity)?;
        let carried = j.tokens[s.carrier].carried.clone();
        for _ in 0..s.multiplicity {
            let t = self.new_token(carried.clone());
            self.buffers[s.output].push_back(t);
        }
        let n = u64::from(s.multiplicity);
        self.produced[s.output] += n;
        self.outputs[j.stage] += n;
        if s.is_join {
            let before = self.completed;
            self.completed += n;
            if before < self.target && self.completed >= self.target {
                self.makespan = engine.now();
            }
        }
        if let Some(next) = self.sim.consumer[s.output] {
            self.try_fire(engine, next)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{load_scenario, parse_pattern, CASE_STUDY};

    fn case() -> Scenario {
        load_scenario(CASE_STUDY).unwrap()
    }

    fn pairs(v: &[(&str, u64)]) -> Vec<(String, u64)> {
        v.iter().map(|(f, b)| (f.to_string(), *b)).collect()
    }

    #[test]
    fn split_oda_is_all_database() {
        let s = case();
        let m1 = s.machine("M1").unwrap();
        let l = split_access_lists(m1, &DistributionPattern::oda(8), &s);
        assert_eq!(
            l.db_reads,
            pairs(&[("F1", 540), ("F4", 90), ("F5", 54), ("F8", 720)])
        );
        assert_eq!(l.db_writes.len(), 5);
        assert!(l.product_reads.is_empty() && l.product_writes.is_empty());
    }

    #[test]
    fn split_mixed_pattern() {
        let s = case();
        let m1 = s.machine("M1").unwrap();
        let p = parse_pattern("F1 F5", &s).unwrap();
        let l = split_access_lists(m1, &p, &s);
        assert_eq!(l.product_reads, pairs(&[("F1", 540), ("F5", 54)]));
        assert_eq!(l.db_reads, pairs(&[("F4", 90), ("F8", 720)]));
        assert_eq!(l.product_writes, pairs(&[("F1", 286), ("F5", 110)]));
        assert_eq!(l.db_writes, pairs(&[("F3", 110), ("F4", 220), ("F8", 220)]));
    }

    #[test]
    fn split_full_odap_is_all_product() {
        let s = case();
        let m3 = s.machine("M3").unwrap();
        let l = split_access_lists(m3, &DistributionPattern::full_odap(8), &s);
        assert!(l.db_reads.is_empty() && l.db_writes.is_empty());
        assert_eq!(l.product_reads.len(), 6);
        assert_eq!(l.product_writes.len(), 6);
    }

    #[test]
    fn replicated_commit_keeps_copies_equal() {
        let s = case();
        let mut db = DbState::new(&s).unwrap();
        let m3 = s.machine("M3").unwrap();
        let v = db.commit_write("F8", m3).unwrap();
        assert_eq!(v, 1);
        assert_eq!(db.version("DB1", "F8"), Some(1));
        assert_eq!(db.version("DB2", "F8"), Some(1));
        assert_eq!(db.version("DB3", "F8"), None);
    }

    #[test]
    fn unreplicated_commit_bumps_once() {
        let s = case();
        let mut db = DbState::new(&s).unwrap();
        let m1 = s.machine("M1").unwrap();
        assert_eq!(db.commit_write("F1", m1).unwrap(), 1);
        assert_eq!(db.commit_write("F1", m1).unwrap(), 2);
        assert_eq!(db.version("DB1", "F1"), Some(2));
    }

    #[test]
    fn product_commit_is_local() {
        let s = case();
        let p = parse_pattern("F3", &s).unwrap();
        let mut a = ProductToken::new("pt1", 1, &p, &s);
        let b = ProductToken::new("pt1", 2, &p, &s);
        let db = DbState::new(&s).unwrap();
        let m3 = s.machine("M3").unwrap();
        assert_eq!(a.commit_write("F3", m3).unwrap(), 1);
        assert_eq!(b.carried["F3"], 0);
        assert_eq!(db.version("DB3", "F3"), Some(0));
        assert_eq!(a.carried.keys().collect::<Vec<_>>(), ["F3"]);
    }

    #[test]
    fn write_outside_profile_is_rejected() {
        let s = case();
        let mut db = DbState::new(&s).unwrap();
        let m1 = s.machine("M1").unwrap();
        assert!(matches!(
            db.commit_write("F2", m1),
            Err(Error::Validation(_))
        ));
        let p = DistributionPattern::full_odap(8);
        let mut t = ProductToken::new("bob1", 0, &p, &s);
        assert!(matches!(
            t.commit_write("F6", m1),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn zero_target_has_zero_makespan() {
        let mut s = case();
        s.workflow.target_count = 0;
        let sim = Simulator::new(&s).unwrap();
        let opts = SimOptions {
            trace: true,
            ..SimOptions::default()
        };
        let r = sim.run(&DistributionPattern::oda(8), 1e6, 1, opts).unwrap();
        assert_eq!(r.makespan_s, 0.0);
        assert_eq!(r.engine.events_processed, 0);
        assert_eq!(r.trace.unwrap().len(), 0);
    }

    #[test]
    fn pattern_length_mismatch_is_rejected() {
        let s = case();
        let err = run_simulation(&s, &DistributionPattern::oda(3), 1e6, 0).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn conservation_of_tokens() {
        let s = case();
        let r = run_simulation(&s, &DistributionPattern::oda(8), 1e6, 3).unwrap();
        assert_eq!(r.completed, 85);
        assert_eq!(r.produced["pt1"], 152);
        assert_eq!(r.produced["pt2"], 95);
        assert_eq!(r.produced["headdress"], 85);
        let sewing = r.stages.iter().find(|s| s.stage == "sewing").unwrap();
        assert_eq!(sewing.firings, 85);
    }

    #[test]
    fn hand_computed_two_stage_line() {
        // One machine reading one fragment from its local database and
        // writing nothing: makespan = 3 * (read + oper) for three joins.
        let text = r#"
[[fragments]]
id = "A"
payload_bytes = 10
hosts = ["D"]

[[databases]]
id = "D"
cluster = "C"

[[machines]]
id = "M"
cluster = "C"
oper_time_s = 2.0
reads = { A = 100 }

[[machines]]
id = "N"
cluster = "C"
oper_time_s = 1.0

[topology]
clusters = ["C"]
link_rate_bps = 8e6
per_hop_latency_s = 0.0
server_processing_s = 0.5

[workflow]
target_count = 3
join = { stage = "assemble", carrier = "x" }

[[workflow.inputs]]
class = "raw"
count = 1

[[workflow.stages]]
id = "split"
machine = "N"
inputs = ["raw"]
output = "x"
multiplicity = 3

[[workflow.stages]]
id = "assemble"
machine = "M"
inputs = ["x"]
output = "done"

[product]
throughput_bps = 800.0
"#;
        let s = load_scenario(text).unwrap();
        let sim = Simulator::new(&s).unwrap();
        let opts = SimOptions {
            jitter: false,
            ..SimOptions::default()
        };
        // read = 0.5 s processing + 2 links * 100 B * 8 / 8e6 = 0.5002 s
        let r = sim
            .run(&DistributionPattern::oda(1), 800.0, 0, opts)
            .unwrap();
        let expected = 1.0 + 3.0 * (0.5002 + 2.0);
        assert!((r.makespan_s - expected).abs() < 1e-9, "{}", r.makespan_s);
        // On the product: 100 B at 800 bit/s = 1 s per read.
        let r = sim
            .run(&DistributionPattern::full_odap(1), 800.0, 0, opts)
            .unwrap();
        assert!(
            (r.makespan_s - (1.0 + 3.0 * 3.0)).abs() < 1e-9,
            "{}",
            r.makespan_s
        );
    }
}
