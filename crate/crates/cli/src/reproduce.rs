//! Re-optimization of shipped table rows from their reference parameters.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context};
use clap::Args;
use crsim_core::metrics::{computational_block, ideal_cnot};
use crsim_core::optimize::{fit_vz, optimize_gate, NmConfig, OptimizeConfig, ParamSpace};
use crsim_core::pulse::{load_pulse_file, CrLayout, PulseRecord, ASYM_PARAM_NAMES};
use serde::Serialize;
use serde_json::json;

use crate::commands::{evaluate_record, evolution, load_device, simulate, Inputs};
use crate::run::{manifest, RunDir};
use crate::{IdealKind, MetricArgs, Outcome, SimArgs};

pub const FIXTURES_ENV: &str = "CRSIM_FIXTURES";

#[derive(Args, Debug, Clone, Serialize)]
pub struct ReproduceArgs {
    #[arg(long, value_parser = clap::value_parser!(u8).range(3..=5))]
    pub table: u8,
    /// Comma-separated gate labels; all rows when omitted.
    #[arg(long, value_delimiter = ',')]
    pub rows: Vec<String>,
    /// Nelder-Mead evaluations per row.
    #[arg(long, default_value_t = 300)]
    pub budget: usize,
    /// Parameters freed for asymmetric rows.
    #[arg(long, value_delimiter = ',', default_value = "gamma2,theta0,theta1,theta2")]
    pub free: Vec<String>,
    /// Free all twelve asymmetric-CNOT parameters.
    #[arg(long)]
    pub full: bool,
    /// Directory holding `devices/` and `pulses/`.
    #[arg(long, env = FIXTURES_ENV)]
    pub fixtures: Option<PathBuf>,
    #[arg(long)]
    pub layout: Option<CrLayout>,
    #[arg(long, default_value_t = 1.0)]
    pub tau_ps: f64,
    #[arg(long, default_value_t = 2.0)]
    pub inner_tau_ps: f64,
    #[arg(long, default_value_t = 512)]
    pub inner_m: usize,
    #[command(flatten)]
    pub metric: MetricArgs,
    /// Allowed shortfall against the reference F.
    #[arg(long, default_value_t = 0.015)]
    pub tolerance: f64,
    /// Absolute floor on the achieved F.
    #[arg(long, default_value_t = 0.95)]
    pub min_f: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RowSummary {
    pub gate: String,
    pub f_ref: Option<f64>,
    pub f_achieved: Option<f64>,
    pub delta: Option<f64>,
    pub stderr: Option<f64>,
    pub mean_success: Option<f64>,
    pub success_ref: Option<f64>,
    pub evaluations: usize,
    pub seconds: f64,
    pub passed: bool,
    pub error: Option<String>,
}

fn fixtures_dir(args: &ReproduceArgs) -> PathBuf {
    args.fixtures
        .clone()
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures"))
}

fn table_files(fixtures: &Path, table: u8) -> (PathBuf, PathBuf) {
    let device = if table == 3 { "three_transmon.json" } else { "two_transmon.json" };
    (
        fixtures.join("devices").join(device),
        fixtures.join("pulses").join(format!("table{table}.json")),
    )
}

pub fn run(out: &Path, args: &ReproduceArgs) -> anyhow::Result<Outcome> {
    let fixtures = fixtures_dir(args);
    let (device, pulse) = table_files(&fixtures, args.table);
    let ops = load_device(&device)?;
    let mut records = load_pulse_file(&pulse).with_context(|| format!("pulse file {}", pulse.display()))?;
    if !args.rows.is_empty() {
        if let Some(missing) = args.rows.iter().find(|g| !records.iter().any(|r| r.gate() == g.as_str())) {
            bail!("table {} has no row {missing:?}", args.table);
        }
        records.retain(|r| args.rows.iter().any(|g| g == r.gate()));
    }
    let free: Vec<String> = if args.full {
        ASYM_PARAM_NAMES.iter().map(|s| s.to_string()).collect()
    } else {
        args.free.clone()
    };
    ParamSpace::asym_cnot().with_free(&free.iter().map(String::as_str).collect::<Vec<_>>())?;

    let run = RunDir::create(out, "reproduce")?;
    run.write_manifest(&manifest(
        "reproduce",
        Some(&device),
        Some(&pulse),
        json!({ "args": args, "free": free }),
        vec![args.metric.seed],
        &["summary.md", "summary.csv", "calibrated.json", "reports/"],
    )?)?;
    std::fs::create_dir_all(run.file("reports"))?;

    let mut rows = Vec::new();
    let mut calibrated = Vec::new();
    let mut inputs = Inputs { ops, record: records[0].clone() };
    for record in &records {
        let mut record = record.clone();
        if let Some(layout) = args.layout {
            record.set_layout(layout);
        }
        let start = Instant::now();
        inputs.record = record.clone();
        let outcome = reproduce_row(&mut inputs, args, &free);
        let f_ref = record.f_reference();
        let success_ref = match &record {
            PulseRecord::Asym(r) => r.success_reference,
            PulseRecord::Ecr(_) => None,
        };
        let row = match outcome {
            Ok((evals, report)) => {
                report.write_json(&run.file(&format!("reports/{}.json", record.gate())))?;
                calibrated.push(inputs.record.clone());
                let floor = f_ref.map_or(args.min_f, |fp| (fp - args.tolerance).max(args.min_f));
                RowSummary {
                    gate: record.gate().to_string(),
                    f_ref,
                    f_achieved: Some(report.f),
                    delta: f_ref.map(|fp| report.f - fp),
                    stderr: Some(report.stderr),
                    mean_success: Some(report.mean_success()),
                    success_ref,
                    evaluations: evals,
                    seconds: start.elapsed().as_secs_f64(),
                    passed: report.f >= floor,
                    error: None,
                }
            }
            Err(e) => RowSummary {
                gate: record.gate().to_string(),
                f_ref,
                f_achieved: None,
                delta: None,
                stderr: None,
                mean_success: None,
                success_ref,
                evaluations: 0,
                seconds: start.elapsed().as_secs_f64(),
                passed: false,
                error: Some(format!("{e:#}")),
            },
        };
        eprintln!(
            "{}: F = {} ({:.1} s){}",
            row.gate,
            row.f_achieved.map_or("-".into(), |f| format!("{f:.4}")),
            row.seconds,
            row.error.as_deref().map_or(String::new(), |e| format!(" error: {e}"))
        );
        rows.push(row);
    }

    run.write_json("calibrated.json", &calibrated)?;
    write_summary_csv(&rows, &run.file("summary.csv"))?;
    let md = summary_markdown(args.table, &rows);
    std::fs::write(run.file("summary.md"), &md)?;
    print!("{md}");
    eprintln!("run directory: {}", run.path.display());
    if rows.iter().any(|r| r.passed) {
        Ok(Outcome::Ok)
    } else {
        Ok(Outcome::BelowThreshold("no row met its threshold".into()))
    }
}

/// Re-optimizes one row in place and returns (evaluations, final report).
fn reproduce_row(
    inputs: &mut Inputs,
    args: &ReproduceArgs,
    free: &[String],
) -> anyhow::Result<(usize, crsim_core::metrics::FidelityReport)> {
    let sim = SimArgs {
        device: PathBuf::new(),
        pulse: PathBuf::new(),
        gate: None,
        tau_ps: args.tau_ps,
        method: Default::default(),
        frame: Default::default(),
        layout: None,
    };
    let final_cfg = evolution(&sim, args.tau_ps)?;
    let evals = match &mut inputs.record {
        PulseRecord::Asym(r) => {
            let space = ParamSpace::asym_cnot().with_free(&free.iter().map(String::as_str).collect::<Vec<_>>())?;
            let cfg = OptimizeConfig {
                evolution: evolution(&sim, args.inner_tau_ps)?,
                inner_m: args.inner_m,
                final_m: args.inner_m,
                seed: args.metric.seed,
                nm: NmConfig { max_evals: args.budget, ..NmConfig::default() },
            };
            let result = optimize_gate(&inputs.ops, &r.params(), &space, &cfg)?;
            *r = r.with_params(&result.params);
            result.result.evals
        }
        PulseRecord::Ecr(_) => {
            let (prop, _) = simulate(inputs, &final_cfg)?;
            let (c, t) = inputs.record.control_target();
            let ideal = ideal_cnot(c, t, inputs.ops.n_transmons())?;
            let block = computational_block(&prop, &inputs.ops)?;
            let (theta, _) = fit_vz(&block, &ideal, args.inner_m, args.metric.seed)?;
            if let PulseRecord::Ecr(r) = &mut inputs.record {
                r.theta0 = theta[0];
                r.theta1 = theta[1];
            }
            0
        }
    };
    let report = evaluate_record(inputs, &final_cfg, args.metric, IdealKind::Cnot)?;
    Ok((evals, report))
}

fn fmt_opt(v: Option<f64>, digits: usize) -> String {
    v.map_or("-".into(), |x| format!("{x:.digits$}"))
}

fn write_summary_csv(rows: &[RowSummary], path: &Path) -> anyhow::Result<()> {
    let mut text = String::from("gate,F_reference,F_achieved,delta,stderr,mean_success,success_reference,evaluations,seconds,passed,error\n");
    for r in rows {
        writeln!(
            text,
            "{},{},{},{},{},{},{},{},{:.1},{},{}",
            r.gate,
            fmt_opt(r.f_ref, 4),
            fmt_opt(r.f_achieved, 6),
            fmt_opt(r.delta, 6),
            fmt_opt(r.stderr, 6),
            fmt_opt(r.mean_success, 6),
            fmt_opt(r.success_ref, 4),
            r.evaluations,
            r.seconds,
            r.passed,
            r.error.as_deref().unwrap_or("").replace(',', ";")
        )?;
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn summary_markdown(table: u8, rows: &[RowSummary]) -> String {
    let mut md = format!("# Table {table} reproduction\n\n");
    md.push_str("| gate | F reference | F achieved | Δ | mean p_b | p_b reference | evals | s | pass |\n");
    md.push_str("|---|---|---|---|---|---|---|---|---|\n");
    for r in rows {
        let _ = writeln!(
            md,
            "| {} | {} | {} | {} | {} | {} | {} | {:.0} | {} |",
            r.gate,
            fmt_opt(r.f_ref, 4),
            fmt_opt(r.f_achieved, 4),
            fmt_opt(r.delta, 4),
            fmt_opt(r.mean_success, 4),
            fmt_opt(r.success_ref, 4),
            r.evaluations,
            r.seconds,
            if r.passed { "yes" } else { "no" }
        );
    }
    md
}
