use std::path::Path;

use anyhow::{bail, Context};
use crsim_core::device::{build_system, diagonalize_transmon, DeviceFile, SystemOperators};
use crsim_core::metrics::{
    evaluate_gate, ideal_cnot, ideal_identity, success_probabilities, transition_grid, write_grid_csv,
    FidelityReport, VzGate,
};
use crsim_core::optimize::{
    optimize_gate, sweep_parameter, sweet_spot_search, write_sweep_csv, GatePipeline, NmConfig, OptimizeConfig,
    ParamSpace, SweepAxis,
};
use crsim_core::propagate::{self, bloch_trajectory, EvolutionConfig, InitialState, Propagator, TrajectoryRecord};
use crsim_core::pulse::{load_pulse_file, parse_pulse_file, find_record, AsymRecord, PulseRecord};
use serde::Serialize;
use serde_json::json;

use crate::run::{manifest, RunDir};
use crate::{IdealKind, MetricArgs, Outcome, SimArgs};

pub struct Inputs {
    pub ops: SystemOperators,
    pub record: PulseRecord,
}

pub fn load_device(path: &Path) -> anyhow::Result<SystemOperators> {
    let spec = DeviceFile::load(path)
        .and_then(|f| f.to_spec())
        .with_context(|| format!("device file {}", path.display()))?;
    Ok(build_system(&spec)?)
}

pub fn load_inputs(sim: &SimArgs) -> anyhow::Result<Inputs> {
    let ops = load_device(&sim.device)?;
    let records = load_pulse_file(&sim.pulse).with_context(|| format!("pulse file {}", sim.pulse.display()))?;
    let mut record = find_record(&records, sim.gate.as_deref())?.clone();
    if let Some(layout) = sim.layout {
        record.set_layout(layout);
    }
    Ok(Inputs { ops, record })
}

pub fn evolution(sim: &SimArgs, tau_ps: f64) -> anyhow::Result<EvolutionConfig> {
    if !(tau_ps > 0.0) {
        bail!("--tau-ps must be positive");
    }
    Ok(EvolutionConfig::default()
        .with_tau(tau_ps * 1e-3)
        .with_method(sim.method)
        .with_frame(sim.frame))
}

pub fn simulate(inputs: &Inputs, cfg: &EvolutionConfig) -> anyhow::Result<(Propagator, Vec<f64>)> {
    let program = inputs.record.build(&inputs.ops.device)?;
    let prop = propagate::evolve(&program, &inputs.ops, cfg)?;
    Ok((prop, program.vz_angles))
}

pub fn evaluate_record(
    inputs: &Inputs,
    cfg: &EvolutionConfig,
    metric: MetricArgs,
    ideal: IdealKind,
) -> anyhow::Result<FidelityReport> {
    let (prop, theta) = simulate(inputs, cfg)?;
    let n = inputs.ops.n_transmons();
    let ideal = match ideal {
        IdealKind::Cnot => {
            let (c, t) = inputs.record.control_target();
            ideal_cnot(c, t, n)?
        }
        IdealKind::Identity => ideal_identity(n),
    };
    Ok(evaluate_gate(&prop, &VzGate::new(theta), &ideal, &inputs.ops, metric.m, metric.seed)?)
}

fn sim_config(sim: &SimArgs) -> serde_json::Value {
    serde_json::to_value(sim).unwrap_or_default()
}

#[derive(Serialize)]
struct TransmonLine {
    index: usize,
    omega01_ghz: f64,
    anharmonicity_ghz: f64,
    ec_ghz: f64,
    resonator_detuning_ghz: f64,
}

pub fn spectrum(out: &Path, device: &Path) -> anyhow::Result<Outcome> {
    let spec = DeviceFile::load(device)
        .and_then(|f| f.to_spec())
        .with_context(|| format!("device file {}", device.display()))?;
    let run = RunDir::create(out, "spectrum")?;
    run.write_manifest(&manifest("spectrum", Some(device), None, json!({}), vec![], &["spectrum.json"])?)?;
    let mut lines = Vec::new();
    for (i, t) in spec.transmons.iter().enumerate() {
        let sol = diagonalize_transmon(t)?;
        let w = sol.qubit_frequency();
        lines.push(TransmonLine {
            index: i,
            omega01_ghz: w,
            anharmonicity_ghz: sol.anharmonicity()?,
            ec_ghz: t.charging_energy,
            resonator_detuning_ghz: spec.resonator.frequency - w,
        });
    }
    println!("{:>3} {:>12} {:>12} {:>10} {:>14}", "T", "w01[GHz]", "alpha[GHz]", "EC[GHz]", "wr-w01[GHz]");
    for l in &lines {
        println!(
            "{:>3} {:>12.6} {:>12.6} {:>10.4} {:>14.6}",
            l.index, l.omega01_ghz, l.anharmonicity_ghz, l.ec_ghz, l.resonator_detuning_ghz
        );
    }
    let mut detunings = Vec::new();
    for i in 0..lines.len() {
        for j in i + 1..lines.len() {
            let d = lines[i].omega01_ghz - lines[j].omega01_ghz;
            println!("detuning T{i}-T{j}: {d:+.6} GHz");
            detunings.push(json!({ "pair": [i, j], "detuning_ghz": d }));
        }
    }
    run.write_json(
        "spectrum.json",
        &json!({
            "transmons": lines,
            "detunings": detunings,
            "resonator_ghz": spec.resonator.frequency,
        }),
    )?;
    eprintln!("run directory: {}", run.path.display());
    Ok(Outcome::Ok)
}

pub fn fidelity(
    out: &Path,
    sim: &SimArgs,
    metric: MetricArgs,
    min_f: Option<f64>,
    ideal: IdealKind,
) -> anyhow::Result<Outcome> {
    let inputs = load_inputs(sim)?;
    let cfg = evolution(sim, sim.tau_ps)?;
    let run = RunDir::create(out, "fidelity")?;
    let config = json!({ "sim": sim_config(sim), "metric": metric, "min_f": min_f, "ideal": ideal });
    run.write_manifest(&manifest("fidelity", Some(&sim.device), Some(&sim.pulse), config, vec![metric.seed], &["report.json"])?)?;
    let report = evaluate_record(&inputs, &cfg, metric, ideal)?;
    report.write_json(&run.file("report.json"))?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    eprintln!("run directory: {}", run.path.display());
    Ok(threshold(report.f, min_f))
}

fn threshold(f: f64, min_f: Option<f64>) -> Outcome {
    match min_f {
        Some(min) if !(f >= min) => Outcome::BelowThreshold(format!("F = {f:.6} < {min}")),
        _ => Outcome::Ok,
    }
}

pub fn success(out: &Path, sim: &SimArgs) -> anyhow::Result<Outcome> {
    let inputs = load_inputs(sim)?;
    let cfg = evolution(sim, sim.tau_ps)?;
    let run = RunDir::create(out, "success")?;
    run.write_manifest(&manifest("success", Some(&sim.device), Some(&sim.pulse), sim_config(sim), vec![], &["success.json", "grid.csv"])?)?;
    let (prop, _) = simulate(&inputs, &cfg)?;
    let (c, t) = inputs.record.control_target();
    let n = inputs.ops.n_transmons();
    let ideal = ideal_cnot(c, t, n)?;
    let probs = success_probabilities(&prop, &ideal, &inputs.ops)?;
    let grid = transition_grid(&prop, &inputs.ops)?;
    let file = std::fs::File::create(run.file("grid.csv"))?;
    write_grid_csv(&grid, n, file)?;
    let mean = probs.iter().sum::<f64>() / probs.len() as f64;
    for (b, p) in probs.iter().enumerate() {
        println!("{} {:.6}", crsim_core::metrics::bitstring(b, n), p);
    }
    println!("mean {mean:.6}");
    run.write_json("success.json", &json!({ "gate": ideal.label, "success_probs": probs, "mean": mean }))?;
    eprintln!("run directory: {}", run.path.display());
    Ok(Outcome::Ok)
}

fn write_long_csv(rec: &TrajectoryRecord, path: &Path) -> anyhow::Result<()> {
    use std::io::Write;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "t_ns,series,value")?;
    for ((t, row), res) in rec.times.iter().zip(&rec.samples).zip(&rec.resonator_excitation) {
        for (q, s) in row.iter().enumerate() {
            for (axis, v) in ["x", "y", "z"].iter().zip(s.bloch) {
                writeln!(w, "{t:.6},q{q}_{axis},{v:.9}")?;
            }
            writeln!(w, "{t:.6},q{q}_leak,{:.9}", s.leakage)?;
        }
        writeln!(w, "{t:.6},resonator,{res:.9}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn bloch(out: &Path, sim: &SimArgs, initial: &str, stride: usize) -> anyhow::Result<Outcome> {
    let inputs = load_inputs(sim)?;
    let mut cfg = evolution(sim, sim.tau_ps)?;
    cfg.record_stride = stride.max(1);
    let index = inputs.ops.indexer.parse_label(initial)?;
    let run = RunDir::create(out, "bloch")?;
    let config = json!({ "sim": sim_config(sim), "initial": initial, "stride": stride });
    run.write_manifest(&manifest("bloch", Some(&sim.device), Some(&sim.pulse), config, vec![], &["trajectory.csv", "trajectory_long.csv"])?)?;
    let program = inputs.record.build(&inputs.ops.device)?;
    let rec = bloch_trajectory(&program, &inputs.ops, &cfg, &InitialState::Basis(index))?;
    rec.write_csv(std::fs::File::create(run.file("trajectory.csv"))?)?;
    write_long_csv(&rec, &run.file("trajectory_long.csv"))?;
    if let (Some(last), Some(res)) = (rec.samples.last(), rec.resonator_excitation.last()) {
        for (q, s) in last.iter().enumerate() {
            println!("q{q} final bloch ({:+.4}, {:+.4}, {:+.4})", s.bloch[0], s.bloch[1], s.bloch[2]);
        }
        println!("resonator excitation {res:.6}");
    }
    eprintln!("run directory: {}", run.path.display());
    Ok(Outcome::Ok)
}

pub fn evolve(out: &Path, sim: &SimArgs, full: bool) -> anyhow::Result<Outcome> {
    let inputs = load_inputs(sim)?;
    let mut cfg = evolution(sim, sim.tau_ps)?;
    if full {
        cfg = cfg.with_columns((0..inputs.ops.dim()).collect());
    }
    let run = RunDir::create(out, "evolve")?;
    let config = json!({ "sim": sim_config(sim), "full": full });
    run.write_manifest(&manifest("evolve", Some(&sim.device), Some(&sim.pulse), config, vec![], &["propagator.json"])?)?;
    let (prop, _) = simulate(&inputs, &cfg)?;
    prop.write_dump(&run.file("propagator.json"))?;
    let drift = prop.column_norms().iter().map(|n| (n - 1.0).abs()).fold(0.0, f64::max);
    println!(
        "dim {} columns {} steps {} total {:.3} ns max norm drift {drift:.3e}",
        prop.dim(),
        prop.columns.len(),
        prop.steps,
        prop.total_time
    );
    eprintln!("run directory: {}", run.path.display());
    Ok(Outcome::Ok)
}

pub fn asym_record(record: &PulseRecord) -> anyhow::Result<&AsymRecord> {
    match record {
        PulseRecord::Asym(r) => Ok(r),
        PulseRecord::Ecr(r) => bail!("{} is an echoed-CR record; only asymmetric CNOT records are optimized", r.gate),
    }
}

#[allow(clippy::too_many_arguments)]
pub fn optimize(
    out: &Path,
    sim: &SimArgs,
    metric: MetricArgs,
    free: &[String],
    max_evals: usize,
    inner_m: usize,
    inner_tau_ps: Option<f64>,
    min_f: Option<f64>,
) -> anyhow::Result<Outcome> {
    let inputs = load_inputs(sim)?;
    let record = asym_record(&inputs.record)?.clone();
    let names: Vec<&str> = free.iter().map(String::as_str).filter(|s| !s.is_empty()).collect();
    let space = ParamSpace::asym_cnot().with_free(&names)?;
    let inner_tau = inner_tau_ps.unwrap_or(sim.tau_ps);
    let cfg = OptimizeConfig {
        evolution: evolution(sim, inner_tau)?,
        inner_m,
        final_m: metric.m,
        seed: metric.seed,
        nm: NmConfig { max_evals, ..NmConfig::default() },
    };
    let run = RunDir::create(out, "optimize")?;
    let config = json!({
        "sim": sim_config(sim), "metric": metric, "free": names, "max_evals": max_evals,
        "inner_m": inner_m, "inner_tau_ps": inner_tau, "min_f": min_f, "nm": cfg.nm,
    });
    run.write_manifest(&manifest(
        "optimize",
        Some(&sim.device),
        Some(&sim.pulse),
        config,
        vec![metric.seed],
        &["params_in.json", "params_out.json", "trace.csv", "report.json", "summary.json"],
    )?)?;
    run.write_json("params_in.json", &vec![PulseRecord::Asym(record.clone())])?;
    let result = optimize_gate(&inputs.ops, &record.params(), &space, &cfg)?;
    let tuned = PulseRecord::Asym(record.with_params(&result.params));
    run.write_json("params_out.json", &vec![tuned.clone()])?;
    result.result.trace.write_csv(&run.file("trace.csv"))?;
    let report = if inner_tau == sim.tau_ps {
        result.report.clone()
    } else {
        let final_inputs = Inputs { ops: inputs.ops, record: tuned };
        evaluate_record(&final_inputs, &evolution(sim, sim.tau_ps)?, metric, IdealKind::Cnot)?
    };
    report.write_json(&run.file("report.json"))?;
    let summary = json!({
        "F": report.f,
        "stderr": report.stderr,
        "mean_success": report.mean_success(),
        "inner_F": 1.0 - result.inner_infidelity,
        "evaluations": result.result.evals,
        "converged": result.result.converged,
        "exhausted": result.result.exhausted,
    });
    run.write_json("summary.json", &summary)?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    if result.result.exhausted {
        eprintln!("evaluation budget exhausted; best point so far written to params_out.json");
    }
    eprintln!("run directory: {}", run.path.display());
    Ok(threshold(report.f, min_f))
}

pub fn sweep(out: &Path, sim: &SimArgs, metric: MetricArgs, param: &str, values: &[f64]) -> anyhow::Result<Outcome> {
    let inputs = load_inputs(sim)?;
    let record = asym_record(&inputs.record)?;
    let cfg = evolution(sim, sim.tau_ps)?;
    let run = RunDir::create(out, "sweep")?;
    let config = json!({ "sim": sim_config(sim), "metric": metric, "param": param, "values": values });
    run.write_manifest(&manifest("sweep", Some(&sim.device), Some(&sim.pulse), config, vec![metric.seed], &["sweep.csv"])?)?;
    let base = record.params();
    let mut pipe = GatePipeline::new(&inputs.ops, base, cfg)?;
    let rows = sweep_parameter(&mut pipe, &base, param, values, metric.m, metric.seed)?;
    write_sweep_csv(&rows, param, &run.file("sweep.csv"))?;
    for r in &rows {
        println!("{param}={} F={:.6} mean_p={:.6}", r.value, r.f, r.mean_success);
    }
    eprintln!("run directory: {}", run.path.display());
    Ok(Outcome::Ok)
}

pub fn parse_axis(text: &str) -> anyhow::Result<SweepAxis> {
    let (name, values) = text.split_once('=').context("axis must look like name=v1,v2")?;
    let values = values
        .split(',')
        .map(|v| v.trim().parse::<f64>().with_context(|| format!("bad value {v:?} in axis {name}")))
        .collect::<anyhow::Result<Vec<_>>>()?;
    if values.is_empty() {
        bail!("axis {name} has no values");
    }
    Ok(SweepAxis { name: name.trim().to_string(), values })
}

pub fn seed_search(out: &Path, sim: &SimArgs, axes: &[String]) -> anyhow::Result<Outcome> {
    let inputs = load_inputs(sim)?;
    let record = asym_record(&inputs.record)?;
    let axes = axes.iter().map(|a| parse_axis(a)).collect::<anyhow::Result<Vec<_>>>()?;
    let cfg = evolution(sim, sim.tau_ps)?;
    let run = RunDir::create(out, "seed-search")?;
    let config = json!({ "sim": sim_config(sim), "axes": axes });
    run.write_manifest(&manifest("seed-search", Some(&sim.device), Some(&sim.pulse), config, vec![], &["sweep.csv"])?)?;
    let report = sweet_spot_search(&inputs.ops, &record.params(), &axes, &cfg)?;
    report.write_csv(&run.file("sweep.csv"))?;
    for (rank, &i) in report.ranking.iter().take(5).enumerate() {
        let p = &report.points[i];
        println!("#{rank} {:?} score {:.6} var {:.6} orth {:.6}", p.values, p.score, p.variance, p.orthogonality);
    }
    eprintln!("run directory: {}", run.path.display());
    Ok(Outcome::Ok)
}

pub fn validate(device: Option<&Path>, pulse: Option<&Path>) -> anyhow::Result<Outcome> {
    if device.is_none() && pulse.is_none() {
        bail!("nothing to validate; pass --device and/or --pulse");
    }
    let mut spec = None;
    if let Some(path) = device {
        let file = DeviceFile::load(path).with_context(|| format!("device file {}", path.display()))?;
        let again = DeviceFile::from_json(&serde_json::to_string(&file)?)?;
        if again != file {
            bail!("device file {} does not round-trip", path.display());
        }
        let s = file.to_spec()?;
        let ops = build_system(&s)?;
        println!("device {}: {} transmons, dimension {}", path.display(), s.n_transmons(), ops.dim());
        spec = Some(s);
    }
    if let Some(path) = pulse {
        let records = load_pulse_file(path).with_context(|| format!("pulse file {}", path.display()))?;
        let again = parse_pulse_file(&serde_json::to_string(&records)?)?;
        if again != records {
            bail!("pulse file {} does not round-trip", path.display());
        }
        for r in &records {
            if let Some(s) = &spec {
                let program = r.build(s).with_context(|| format!("record {}", r.gate()))?;
                println!("{}: {:.3} ns", r.gate(), program.total_time);
            } else {
                println!("{}", r.gate());
            }
        }
    }
    println!("ok");
    Ok(Outcome::Ok)
}
