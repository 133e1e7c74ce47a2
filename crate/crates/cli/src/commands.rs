use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use serde_json::json;

use odap_core::analysis::{fit_by_throughput, FitOptions};
use odap_core::calibration::{calibrate_scenario, CalibrationTargets};
use odap_core::des::format_trace;
use odap_core::sweep::{
    format_minutes, format_throughput, parse_throughput, summarize, throughput_summaries,
    CellSummary,
};
use odap_core::{
    builtin_scenario, load_scenario, parse_pattern, run_sweep, Error, Scenario, SimOptions,
    Simulator, SweepPlan, SweepResult,
};

use crate::manifest::{recorded_scenario_hash, sha256_hex, Manifest};
use crate::{AnalyzeArgs, CalibrateArgs, PlotDataArgs, SimulateArgs, SweepArgs, UsageError};

struct Loaded {
    scenario: Scenario,
    source: String,
    hash: String,
}

fn load(spec: &str) -> Result<Loaded> {
    let text = match builtin_scenario(spec) {
        Some(t) => t.to_owned(),
        None => {
            std::fs::read_to_string(spec).with_context(|| format!("reading scenario {spec}"))?
        }
    };
    let scenario = load_scenario(&text).with_context(|| format!("loading scenario {spec}"))?;
    Ok(Loaded {
        scenario,
        source: spec.to_owned(),
        hash: sha256_hex(text.as_bytes()),
    })
}

fn ensure_writable(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(UsageError(format!(
            "{} exists; pass --force to overwrite",
            path.display()
        ))
        .into());
    }
    Ok(())
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn jobs(requested: Option<usize>) -> usize {
    requested
        .filter(|j| *j > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn read_sweep(path: &Path) -> Result<SweepResult> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    SweepResult::from_csv(&text).with_context(|| format!("reading {}", path.display()))
}

pub fn simulate(a: SimulateArgs) -> Result<()> {
    let loaded = load(a.common.scenario())?;
    let s = &loaded.scenario;
    let pattern = parse_pattern(&a.pattern, s)?;
    let throughput = parse_throughput(&a.throughput)?;
    for p in a.common.out.iter().chain(&a.trace) {
        ensure_writable(p, a.common.force)?;
    }
    let options = SimOptions {
        jitter: !a.no_jitter,
        trace: a.trace.is_some(),
        ..SimOptions::default()
    };
    let r = Simulator::new(s)?.run(&pattern, throughput, a.common.seed, options)?;

    println!("scenario     {}", loaded.source);
    println!(
        "pattern      {} ({})",
        pattern.bit_string(),
        pattern.to_spec(s)
    );
    println!("throughput   {} bps", format_throughput(throughput));
    println!("seed         {}", a.common.seed);
    println!("completed    {}", r.completed);
    println!("makespan_s   {}", r.makespan_s);
    println!("makespan     {}", format_minutes(r.makespan_s));
    for st in &r.stages {
        println!(
            "stage        {:<10} {:<4} firings {:>4} utilization {:.3}",
            st.stage, st.machine, st.firings, st.machine_utilization
        );
    }
    if r.consistency.violations > 0 {
        println!(
            "replica consistency violations: {}",
            r.consistency.violations
        );
    }

    let plan = json!({
        "pattern": pattern.bit_string(),
        "throughput_bps": throughput,
        "seed": a.common.seed,
        "jitter": !a.no_jitter,
    });
    let mut manifest = Manifest::new("simulate", plan);
    manifest.scenario = Some((loaded.source.clone(), loaded.hash.clone()));
    if let Some(out) = &a.common.out {
        let body = json!({
            "pattern_bits": pattern.bit_string(),
            "pattern_id": pattern.index(),
            "throughput_bps": throughput,
            "seed": a.common.seed,
            "makespan_s": r.makespan_s,
            "completed": r.completed,
            "events": r.engine.events_processed,
            "stages": r.stages.iter().map(|st| json!({
                "stage": st.stage,
                "machine": st.machine,
                "firings": st.firings,
                "outputs": st.outputs,
                "machine_utilization": st.machine_utilization,
            })).collect::<Vec<_>>(),
            "consistency": {"checks": r.consistency.checks, "violations": r.consistency.violations},
        });
        write(out, &(serde_json::to_string_pretty(&body)? + "\n"))?;
        manifest.outputs.push(out.clone());
    }
    if let (Some(path), Some(trace)) = (&a.trace, &r.trace) {
        write(path, &format_trace(trace))?;
        manifest.outputs.push(path.clone());
    }
    if !manifest.outputs.is_empty() {
        manifest.write()?;
    }
    Ok(())
}

pub fn sweep(a: SweepArgs) -> Result<()> {
    let loaded = load(a.common.scenario())?;
    let out = a
        .common
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("sweep.csv"));
    ensure_writable(&out, a.common.force)?;
    let throughputs = a
        .throughputs
        .iter()
        .map(|t| parse_throughput(t))
        .collect::<Result<Vec<_>, _>>()?;
    let patterns = if a.patterns.is_empty() {
        None
    } else {
        Some(
            a.patterns
                .iter()
                .map(|p| parse_pattern(p, &loaded.scenario))
                .collect::<Result<Vec<_>, _>>()?,
        )
    };
    let plan = SweepPlan {
        throughputs,
        replicates: a.replicates,
        base_seed: a.common.seed,
        patterns,
        jitter: !a.no_jitter,
    };
    let jobs = jobs(a.common.jobs);
    let mut manifest = Manifest::new(
        "sweep",
        json!({
            "throughputs_bps": plan.throughputs,
            "replicates": plan.replicates,
            "base_seed": plan.base_seed,
            "jitter": plan.jitter,
            "patterns": plan.patterns.as_ref().map(|p| p.iter().map(|p| p.bit_string()).collect::<Vec<_>>()),
        }),
    );
    manifest.scenario = Some((loaded.source.clone(), loaded.hash.clone()));

    let started = Instant::now();
    let result = run_sweep(&loaded.scenario, &plan, jobs)?;
    write(&out, &result.to_csv())?;
    manifest.outputs.push(out.clone());
    manifest.write()?;
    println!(
        "{} runs on {jobs} threads in {:.1} s -> {}",
        result.records.len(),
        started.elapsed().as_secs_f64(),
        out.display()
    );
    Ok(())
}

fn select_throughput(result: &SweepResult, flag: Option<&str>) -> Result<Option<f64>> {
    let Some(text) = flag else { return Ok(None) };
    let t = parse_throughput(text)?;
    if !result.throughputs().contains(&t) {
        return Err(Error::Validation(format!(
            "the sweep has no runs at {}",
            format_throughput(t)
        ))
        .into());
    }
    Ok(Some(t))
}

fn cell_label(c: &CellSummary) -> String {
    format!(
        "{} ({:.1} s, {})",
        format_minutes(c.mean),
        c.mean,
        c.pattern_bits
    )
}

pub fn analyze(a: AnalyzeArgs) -> Result<()> {
    let result = read_sweep(&a.input)?;
    let mut factor_names = None;
    let mut scenario_entry = None;
    if a.common.scenario.is_some() {
        let loaded = load(a.common.scenario())?;
        match recorded_scenario_hash(&a.input)? {
            Some(h) if h != loaded.hash && !a.unsafe_hash => {
                return Err(Error::Validation(format!(
                    "{} was produced from a different scenario (sha256 {h}, given {}); pass --unsafe to analyze anyway",
                    a.input.display(),
                    loaded.hash
                ))
                .into());
            }
            _ => {}
        }
        if loaded.scenario.k() == result.records[0].pattern_bits.len() {
            factor_names = Some(
                loaded
                    .scenario
                    .fragments
                    .iter()
                    .map(|f| f.id.clone())
                    .collect(),
            );
        }
        scenario_entry = Some((loaded.source, loaded.hash));
    }
    let only = select_throughput(&result, a.throughput.as_deref())?;
    let records: Vec<_> = result
        .records
        .iter()
        .filter(|r| only.is_none_or(|t| r.throughput_bps == t))
        .cloned()
        .collect();
    let options = FitOptions {
        max_order: a.max_order,
        alpha: a.alpha,
        factor_names,
        ..FitOptions::default()
    };
    let fits = fit_by_throughput(&records, &options)?;

    for fit in &fits {
        println!("== throughput {} ==", format_throughput(fit.throughput_bps));
        for w in &fit.warnings {
            println!("warning: {w}");
        }
        println!(
            "error variance {:.6e} s^2 on {} dof; alpha {}",
            fit.sigma2, fit.error_dof, fit.alpha
        );
        let sig = fit.significant_terms();
        println!("{} significant terms", sig.len());
        println!(
            "{:<14} {:>14} {:>12} {:>10}",
            "term", "coefficient_s", "std_err", "p"
        );
        for e in sig {
            println!(
                "{:<14} {:>14.6} {:>12.4e} {:>10.3e}",
                e.name, e.coefficient, e.std_err, e.p
            );
        }
        println!();
    }

    println!(
        "{:<10} {:<28} {:<28} {:<28}",
        "throughput", "ODA", "full ODAP", "best"
    );
    for t in throughput_summaries(&records) {
        let show = |c: &Option<CellSummary>| c.as_ref().map_or("-".to_owned(), cell_label);
        println!(
            "{:<10} {:<28} {:<28} {:<28}",
            format_throughput(t.throughput_bps),
            show(&t.oda),
            show(&t.full_odap),
            cell_label(&t.best)
        );
    }

    if let Some(out) = &a.common.out {
        let paths: Vec<PathBuf> = if fits.len() == 1 {
            vec![out.clone()]
        } else {
            fits.iter()
                .map(|f| suffixed(out, &format_throughput(f.throughput_bps)))
                .collect()
        };
        for p in &paths {
            ensure_writable(p, a.common.force)?;
        }
        let mut manifest = Manifest::new(
            "analyze",
            json!({
                "throughputs_bps": fits.iter().map(|f| f.throughput_bps).collect::<Vec<_>>(),
                "alpha": a.alpha,
                "max_order": a.max_order,
            }),
        );
        manifest.scenario = scenario_entry;
        manifest
            .inputs
            .push((a.input.clone(), sha256_hex(&std::fs::read(&a.input)?)));
        for (fit, p) in fits.iter().zip(&paths) {
            write(p, &fit.to_csv())?;
            manifest.outputs.push(p.clone());
        }
        manifest.write()?;
    }
    Ok(())
}

/// `analysis.csv` + `1M` -> `analysis_1M.csv`.
fn suffixed(path: &Path, tag: &str) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let name = match path.extension() {
        Some(ext) => format!("{stem}_{tag}.{}", ext.to_string_lossy()),
        None => format!("{stem}_{tag}"),
    };
    path.with_file_name(name)
}

pub fn plot_data(a: PlotDataArgs) -> Result<()> {
    let result = read_sweep(&a.input)?;
    let throughput = match select_throughput(&result, a.throughput.as_deref())? {
        Some(t) => t,
        None => match result.throughputs().as_slice() {
            [t] => *t,
            _ => bail!(UsageError(
                "the sweep has several throughputs; choose one with --throughput".into()
            )),
        },
    };
    let out = a
        .common
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("curve.dat"));
    let oda_path = out.with_extension("oda.dat");
    ensure_writable(&out, a.common.force)?;
    ensure_writable(&oda_path, a.common.force)?;

    let mut cells = summarize(&result.at_throughput(throughput));
    let oda = cells
        .iter()
        .find(|c| !c.pattern_bits.contains('1'))
        .map(|c| c.mean)
        .ok_or_else(|| {
            Error::Validation("the sweep has no all-database run at this throughput".into())
        })?;
    let x_label = if a.sorted {
        cells.sort_by(|x, y| {
            x.mean
                .total_cmp(&y.mean)
                .then(x.pattern_id.cmp(&y.pattern_id))
        });
        "rank"
    } else {
        "pattern_id"
    };
    let mut curve = format!(
        "# {x_label} makespan_s (throughput {} bps)\n",
        format_throughput(throughput)
    );
    for (i, c) in cells.iter().enumerate() {
        let x = if a.sorted { i as u64 } else { c.pattern_id };
        curve.push_str(&format!("{x} {}\n", c.mean));
    }
    let x_max = if a.sorted {
        cells.len() as u64 - 1
    } else {
        cells.iter().map(|c| c.pattern_id).max().unwrap_or(0)
    };
    let oda_line = format!("# {x_label} oda_makespan_s\n0 {oda}\n{x_max} {oda}\n");
    write(&out, &curve)?;
    write(&oda_path, &oda_line)?;

    let mut manifest = Manifest::new(
        "plot-data",
        json!({"throughput_bps": throughput, "sorted": a.sorted}),
    );
    manifest
        .inputs
        .push((a.input.clone(), sha256_hex(&std::fs::read(&a.input)?)));
    manifest.outputs = vec![out.clone(), oda_path.clone()];
    manifest.write()?;
    let (min, max) = cells
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), c| {
            (lo.min(c.mean), hi.max(c.mean))
        });
    println!(
        "{} points, makespan {} to {}, ODA {} -> {}, {}",
        cells.len(),
        format_minutes(min),
        format_minutes(max),
        format_minutes(oda),
        out.display(),
        oda_path.display()
    );
    Ok(())
}

pub fn calibrate(a: CalibrateArgs) -> Result<()> {
    let loaded = load(a.common.scenario())?;
    let text = std::fs::read_to_string(&a.targets)
        .with_context(|| format!("reading {}", a.targets.display()))?;
    let targets = CalibrationTargets::from_toml(&text)?;
    if let Some(out) = &a.common.out {
        ensure_writable(out, a.common.force)?;
    }
    let (scenario, outcome) = calibrate_scenario(&loaded.scenario, &targets)?;
    let toml = format!(
        "# Calibrated from {} against {}\n\n{}",
        loaded.source,
        a.targets.display(),
        scenario.to_toml_string()?
    );
    match &a.common.out {
        Some(out) => {
            print!("{outcome}");
            write(out, &toml)?;
            let mut manifest = Manifest::new("calibrate", json!({"targets": a.targets}));
            manifest.scenario = Some((loaded.source, loaded.hash));
            manifest
                .inputs
                .push((a.targets.clone(), sha256_hex(text.as_bytes())));
            manifest.outputs.push(out.clone());
            manifest.write()?;
        }
        None => {
            eprint!("{outcome}");
            print!("{toml}");
        }
    }
    Ok(())
}
