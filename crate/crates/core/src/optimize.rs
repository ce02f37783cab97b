//! Nelder-Mead calibration of CNOT pulse parameters and the seed-search workflow.

use std::path::Path;
use std::time::Instant;

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::device::SystemOperators;
use crate::error::{Error, Result};
use crate::metrics::{
    average_fidelity, computational_block, evaluate_gate, ideal_cnot, FidelityReport, IdealGate, VzGate,
};
use crate::propagate::{ColumnState, EvolutionConfig, Evolver, Propagator};
use crate::pulse::{build_asym_cnot, CnotAsymParams, ASYM_PARAM_NAMES};

/// Coordinates of a search: names, frozen mask, soft bounds and scales.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpace {
    pub names: Vec<String>,
    pub fixed: Vec<bool>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub scales: Vec<f64>,
}

impl ParamSpace {
    /// Unbounded space with every coordinate free.
    pub fn free(names: &[&str], scales: &[f64]) -> Self {
        let n = names.len();
        ParamSpace {
            names: names.iter().map(|s| s.to_string()).collect(),
            fixed: vec![false; n],
            lower: vec![f64::NEG_INFINITY; n],
            upper: vec![f64::INFINITY; n],
            scales: scales.to_vec(),
        }
    }

    /// The asymmetric CNOT's 12 coordinates, all frozen.
    pub fn asym_cnot() -> Self {
        let inf = f64::INFINITY;
        let (lower, upper, scales): (Vec<f64>, Vec<f64>, Vec<f64>) = [
            (3.0, 7.0, 0.02),
            (3.0, 7.0, 0.02),
            (2.0, 100.0, 20.0),
            (10.0, 600.0, 20.0),
            (0.0, 0.5, 0.02),
            (0.0, 0.5, 0.02),
            (0.02, 0.49, 0.2),
            (-inf, inf, 1.0),
            (-inf, inf, 1.0),
            (-inf, inf, 1.0),
            (-inf, inf, 1.0),
            (-inf, inf, 1.0),
        ]
        .into_iter()
        .fold((vec![], vec![], vec![]), |(mut l, mut u, mut s), (a, b, c)| {
            l.push(a);
            u.push(b);
            s.push(c);
            (l, u, s)
        });
        ParamSpace {
            names: ASYM_PARAM_NAMES.iter().map(|s| s.to_string()).collect(),
            fixed: vec![true; 12],
            lower,
            upper,
            scales,
        }
    }

    pub fn dim(&self) -> usize {
        self.names.len()
    }

    pub fn with_free(mut self, names: &[&str]) -> Result<Self> {
        for name in names {
            let i = self
                .names
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| Error::invalid(format!("unknown parameter {name:?}")))?;
            self.fixed[i] = false;
        }
        Ok(self)
    }

    pub fn free_indices(&self) -> Vec<usize> {
        (0..self.dim()).filter(|&i| !self.fixed[i]).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.dim();
        if [self.fixed.len(), self.lower.len(), self.upper.len(), self.scales.len()]
            .iter()
            .any(|&l| l != n)
        {
            return Err(Error::invalid("parameter space vectors differ in length"));
        }
        if self.scales.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::invalid("parameter scales must be positive"));
        }
        if self.lower.iter().zip(&self.upper).any(|(l, u)| l > u) {
            return Err(Error::invalid("lower bound above upper bound"));
        }
        Ok(())
    }

    fn clamp(&self, x: &[f64]) -> (Vec<f64>, f64) {
        let mut penalty = 0.0;
        let clamped = x
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let c = v.clamp(self.lower[i], self.upper[i]);
                penalty += ((v - c) / self.scales[i]).powi(2);
                c
            })
            .collect();
        (clamped, penalty)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NmConfig {
    pub reflection: f64,
    pub expansion: f64,
    pub contraction: f64,
    pub shrink: f64,
    /// Simplex diameter tolerance in scaled units.
    pub x_tol: f64,
    /// Tolerance on the spread of vertex values.
    pub f_tol: f64,
    pub max_evals: usize,
    /// Initial displacement as a fraction of each coordinate's scale.
    pub initial_step: f64,
}

impl Default for NmConfig {
    fn default() -> Self {
        NmConfig {
            reflection: 1.0,
            expansion: 2.0,
            contraction: 0.5,
            shrink: 0.5,
            x_tol: 1e-6,
            f_tol: 1e-7,
            max_evals: 2000,
            initial_step: 0.05,
        }
    }
}

impl NmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.reflection > 0.0
            && self.expansion > 1.0
            && self.expansion > self.reflection
            && self.contraction > 0.0
            && self.contraction < 1.0
            && self.shrink > 0.0
            && self.shrink < 1.0
            && self.initial_step > 0.0)
        {
            return Err(Error::invalid("Nelder-Mead coefficients out of order"));
        }
        if self.max_evals == 0 {
            return Err(Error::invalid("max_evals must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub best_f: f64,
    pub diameter: f64,
    pub evals: usize,
    pub wall_s: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct OptimizationTrace {
    pub rows: Vec<TraceRow>,
    pub final_params: Vec<f64>,
}

impl OptimizationTrace {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["iteration", "best_f", "diameter", "evals", "wall_s"])?;
        for r in &self.rows {
            w.write_record([
                r.iteration.to_string(),
                format!("{:.12e}", r.best_f),
                format!("{:.6e}", r.diameter),
                r.evals.to_string(),
                format!("{:.3}", r.wall_s),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NmResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub evals: usize,
    pub converged: bool,
    /// Stopped on the evaluation budget; `x` is the best point seen.
    pub exhausted: bool,
    pub trace: OptimizationTrace,
}

/// Nelder-Mead over the free coordinates of `space`, in units of `space.scales`.
///
/// Points outside the soft bounds are evaluated at the clamped point plus a quadratic penalty.
/// NaN values count as `+∞`.
pub fn nelder_mead(
    objective: &mut dyn FnMut(&[f64]) -> f64,
    x0: &[f64],
    space: &ParamSpace,
    cfg: &NmConfig,
) -> Result<NmResult> {
    space.validate()?;
    cfg.validate()?;
    if x0.len() != space.dim() {
        return Err(Error::DimensionMismatch { expected: space.dim(), got: x0.len() });
    }
    let start = Instant::now();
    let free = space.free_indices();
    let mut evals = 0usize;
    let to_x = |y: &[f64]| -> Vec<f64> {
        let mut x = x0.to_vec();
        for (k, &i) in free.iter().enumerate() {
            x[i] = x0[i] + y[k] * space.scales[i];
        }
        x
    };
    let mut eval = |y: &[f64], evals: &mut usize| -> f64 {
        *evals += 1;
        let (clamped, penalty) = space.clamp(&to_x(y));
        let v = objective(&clamped) + penalty;
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };
    let n = free.len();
    if cfg.max_evals < n + 1 {
        return Err(Error::invalid(format!("max_evals {} cannot seed a simplex over {n} free parameters", cfg.max_evals)));
    }
    let f0 = eval(&vec![0.0; n], &mut evals);
    if !f0.is_finite() {
        return Err(Error::invalid("objective is not finite at the starting point"));
    }
    let mut trace = OptimizationTrace::default();
    if n == 0 {
        trace.rows.push(TraceRow { iteration: 0, best_f: f0, diameter: 0.0, evals, wall_s: 0.0 });
        trace.final_params = x0.to_vec();
        return Ok(NmResult { x: x0.to_vec(), f: f0, evals, converged: true, exhausted: false, trace });
    }

    let mut simplex: Vec<(Vec<f64>, f64)> = vec![(vec![0.0; n], f0)];
    for k in 0..n {
        let mut y = vec![0.0; n];
        y[k] = cfg.initial_step;
        let f = eval(&y, &mut evals);
        simplex.push((y, f));
    }

    let diameter = |s: &[(Vec<f64>, f64)]| -> f64 {
        s[1..]
            .iter()
            .map(|(y, _)| y.iter().zip(&s[0].0).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    };
    let combine = |a: &[f64], b: &[f64], t: f64| -> Vec<f64> {
        a.iter().zip(b).map(|(x, y)| x + t * (y - x)).collect()
    };

    let mut iteration = 0;
    let mut converged = false;
    // The budget is checked before every evaluation, so `evals` never exceeds it.
    'search: loop {
        // Stable sort keeps the ordering deterministic under ties.
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let diam = diameter(&simplex);
        trace.rows.push(TraceRow {
            iteration,
            best_f: simplex[0].1,
            diameter: diam,
            evals,
            wall_s: start.elapsed().as_secs_f64(),
        });
        let spread = simplex[n].1 - simplex[0].1;
        if diam < cfg.x_tol || spread.abs() < cfg.f_tol {
            converged = true;
            break;
        }
        if evals >= cfg.max_evals {
            break;
        }
        iteration += 1;

        let mut centroid = vec![0.0; n];
        for (y, _) in &simplex[..n] {
            for (c, v) in centroid.iter_mut().zip(y) {
                *c += v / n as f64;
            }
        }
        let worst = simplex[n].clone();
        let reflected = combine(&centroid, &worst.0, -cfg.reflection);
        let f_r = eval(&reflected, &mut evals);
        if f_r < simplex[0].1 {
            if evals >= cfg.max_evals {
                simplex[n] = (reflected, f_r);
                continue;
            }
            let expanded = combine(&centroid, &worst.0, -cfg.expansion);
            let f_e = eval(&expanded, &mut evals);
            simplex[n] = if f_e < f_r { (expanded, f_e) } else { (reflected, f_r) };
            continue;
        }
        if f_r < simplex[n - 1].1 {
            simplex[n] = (reflected, f_r);
            continue;
        }
        if evals >= cfg.max_evals {
            if f_r < worst.1 {
                simplex[n] = (reflected, f_r);
            }
            continue;
        }
        let (contracted, f_c, accept) = if f_r < worst.1 {
            let c = combine(&centroid, &reflected, cfg.contraction);
            let f = eval(&c, &mut evals);
            (c, f, f <= f_r)
        } else {
            let c = combine(&centroid, &worst.0, cfg.contraction);
            let f = eval(&c, &mut evals);
            (c, f, f < worst.1)
        };
        if accept {
            simplex[n] = (contracted, f_c);
            continue;
        }
        let best = simplex[0].0.clone();
        for v in simplex.iter_mut().skip(1) {
            if evals >= cfg.max_evals {
                continue 'search;
            }
            let y = combine(&best, &v.0, cfg.shrink);
            let f = eval(&y, &mut evals);
            *v = (y, f);
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    let x = space.clamp(&to_x(&simplex[0].0)).0;
    trace.final_params = x.clone();
    Ok(NmResult {
        x,
        f: simplex[0].1,
        evals,
        converged,
        exhausted: !converged,
        trace,
    })
}

/// Settings shared by gate optimizations.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizeConfig {
    pub evolution: EvolutionConfig,
    /// Samples per inner-loop fidelity estimate.
    pub inner_m: usize,
    /// Samples for the final report.
    pub final_m: usize,
    pub seed: u64,
    pub nm: NmConfig,
}

impl Default for OptimizeConfig {
    fn default() -> Self {
        OptimizeConfig {
            evolution: EvolutionConfig::default(),
            inner_m: 512,
            final_m: 10_000,
            seed: 2024,
            nm: NmConfig::default(),
        }
    }
}

fn cr_key(p: &CnotAsymParams) -> [f64; 6] {
    [p.f1, p.ts, p.omega_s, p.rho, p.gamma1, p.q as f64]
}

fn pulse_key(p: &CnotAsymParams) -> [f64; 10] {
    let v = p.to_vector();
    let mut k = [0.0; 10];
    k[..9].copy_from_slice(&v[..9]);
    k[9] = p.q as f64;
    k
}

/// Asymmetric-CNOT simulation with reuse of the CR-segment state and of the last pulse
/// propagator when only later parameters change.
pub struct GatePipeline<'a> {
    ops: &'a SystemOperators,
    evolver: Evolver<'a>,
    pub ideal: IdealGate,
    template: CnotAsymParams,
    cr_cache: Option<([f64; 6], ColumnState)>,
    pulse_cache: Option<([f64; 10], Propagator)>,
    pub simulations: usize,
}

impl<'a> GatePipeline<'a> {
    pub fn new(ops: &'a SystemOperators, template: CnotAsymParams, evolution: EvolutionConfig) -> Result<Self> {
        template.validate(ops.n_transmons())?;
        let ideal = ideal_cnot(template.control, template.target, ops.n_transmons())?;
        let evolution = EvolutionConfig { columns: None, ..evolution };
        Ok(GatePipeline {
            ops,
            evolver: Evolver::new(ops, evolution)?,
            ideal,
            template,
            cr_cache: None,
            pulse_cache: None,
            simulations: 0,
        })
    }

    pub fn ops(&self) -> &SystemOperators {
        self.ops
    }

    pub fn template(&self) -> &CnotAsymParams {
        &self.template
    }

    pub fn params(&self, x: &[f64]) -> CnotAsymParams {
        self.template.with_vector(x)
    }

    pub fn propagate(&mut self, p: &CnotAsymParams) -> Result<Propagator> {
        let key = pulse_key(p);
        if let Some((k, prop)) = &self.pulse_cache {
            if *k == key {
                return Ok(prop.clone());
            }
        }
        let program = build_asym_cnot(p, &self.ops.device)?;
        let cr_end = p.cr_end();
        let ck = cr_key(p);
        let mut state = match &self.cr_cache {
            Some((k, s)) if *k == ck => s.clone(),
            _ => {
                let mut s = self.evolver.initial_state();
                self.evolver.advance(&mut s, &program, cr_end)?;
                self.cr_cache = Some((ck, s.clone()));
                s
            }
        };
        self.evolver.advance(&mut state, &program, program.total_time)?;
        self.simulations += 1;
        let prop = self.evolver.finish(&state);
        self.pulse_cache = Some((key, prop.clone()));
        Ok(prop)
    }

    pub fn infidelity(&mut self, p: &CnotAsymParams, m: usize, seed: u64) -> Result<f64> {
        let prop = self.propagate(p)?;
        let block = computational_block(&prop, self.ops)?;
        let u = vz_compose(&block, &p.theta[..self.ops.n_transmons()]);
        Ok(1.0 - average_fidelity(&u, &self.ideal, m, seed)?.f)
    }

    pub fn report(&mut self, p: &CnotAsymParams, m: usize, seed: u64) -> Result<FidelityReport> {
        let prop = self.propagate(p)?;
        evaluate_gate(&prop, &VzGate::new(p.theta[..self.ops.n_transmons()].to_vec()), &self.ideal, self.ops, m, seed)
    }

    pub fn mean_success(&mut self, p: &CnotAsymParams) -> Result<f64> {
        let prop = self.propagate(p)?;
        let probs = crate::metrics::success_probabilities(&prop, &self.ideal, self.ops)?;
        Ok(probs.iter().sum::<f64>() / probs.len() as f64)
    }
}

fn vz_compose(block: &DMatrix<Complex64>, theta: &[f64]) -> DMatrix<Complex64> {
    let vz = VzGate::new(theta.to_vec());
    let mut u = block.clone();
    for (r, mut row) in u.row_iter_mut().enumerate() {
        let ph = vz.phase(r);
        row.iter_mut().for_each(|z| *z *= ph);
    }
    u
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateOptimization {
    pub params: CnotAsymParams,
    pub report: FidelityReport,
    /// Inner-loop infidelity at the returned point.
    pub inner_infidelity: f64,
    pub result: NmResult,
}

/// Minimizes `1 − F` over the free coordinates of `space`, then re-evaluates at `final_m`.
pub fn optimize_gate(
    ops: &SystemOperators,
    seed_params: &CnotAsymParams,
    space: &ParamSpace,
    cfg: &OptimizeConfig,
) -> Result<GateOptimization> {
    let mut pipe = GatePipeline::new(ops, *seed_params, cfg.evolution.clone())?;
    optimize_with(&mut pipe, seed_params, space, cfg)
}

pub fn optimize_with(
    pipe: &mut GatePipeline<'_>,
    seed_params: &CnotAsymParams,
    space: &ParamSpace,
    cfg: &OptimizeConfig,
) -> Result<GateOptimization> {
    if space.dim() != 12 {
        return Err(Error::DimensionMismatch { expected: 12, got: space.dim() });
    }
    let seed_params = &refit_free_theta(pipe, seed_params, space, cfg)?;
    let x0 = seed_params.to_vector();
    let mut failure: Option<Error> = None;
    let mut objective = |x: &[f64]| -> f64 {
        let p = seed_params.with_vector(x);
        match p.validate(pipe.ops().n_transmons()).and_then(|_| pipe.infidelity(&p, cfg.inner_m, cfg.seed)) {
            Ok(v) => v,
            Err(Error::Invalid(_)) => f64::INFINITY,
            Err(e) => {
                failure.get_or_insert(e);
                f64::INFINITY
            }
        }
    };
    let result = nelder_mead(&mut objective, &x0, space, &cfg.nm)?;
    if let Some(e) = failure {
        return Err(e);
    }
    let params = seed_params.with_vector(&result.x);
    let inner_infidelity = pipe.infidelity(&params, cfg.inner_m, cfg.seed)?;
    let report = pipe.report(&params, cfg.final_m, cfg.seed)?;
    Ok(GateOptimization { params, report, inner_infidelity, result })
}

/// Replaces the free virtual-Z angles of the seed by the fitted ones when that lowers the
/// infidelity.
fn refit_free_theta(
    pipe: &mut GatePipeline<'_>,
    seed: &CnotAsymParams,
    space: &ParamSpace,
    cfg: &OptimizeConfig,
) -> Result<CnotAsymParams> {
    let n = pipe.ops().n_transmons();
    let free: Vec<usize> = (0..n).filter(|&q| !space.fixed[9 + q]).collect();
    if free.is_empty() {
        return Ok(*seed);
    }
    let prop = pipe.propagate(seed)?;
    let block = computational_block(&prop, pipe.ops())?;
    let (theta, _) = fit_vz(&block, &pipe.ideal, cfg.inner_m, cfg.seed)?;
    let mut fitted = *seed;
    for q in free {
        fitted.theta[q] = theta[q];
    }
    if pipe.infidelity(&fitted, cfg.inner_m, cfg.seed)? < pipe.infidelity(seed, cfg.inner_m, cfg.seed)? {
        Ok(fitted)
    } else {
        Ok(*seed)
    }
}

/// Closed-form virtual-Z angles for a block close to a phased CNOT: each single-excitation
/// output's phase relative to `|0…0⟩`, negated.
pub fn vz_seed(block: &DMatrix<Complex64>, ideal: &IdealGate) -> Vec<f64> {
    let n = ideal.n_qubits;
    let phase_of = |out: usize| -> f64 {
        let input = (0..ideal.dim()).find(|&b| ideal.image(b) == out).expect("permutation");
        block[(out, input)].arg()
    };
    let p0 = phase_of(0);
    (0..n)
        .map(|q| {
            let out = 1 << (n - 1 - q);
            wrap_angle(-(phase_of(out) - p0))
        })
        .collect()
}

pub fn wrap_angle(a: f64) -> f64 {
    let t = std::f64::consts::TAU;
    let w = a.rem_euclid(t);
    if w > std::f64::consts::PI {
        w - t
    } else {
        w
    }
}

/// Fits the virtual-Z angles maximizing `F` for a fixed pulse block.
pub fn fit_vz(block: &DMatrix<Complex64>, ideal: &IdealGate, m: usize, seed: u64) -> Result<(Vec<f64>, f64)> {
    let theta0 = vz_seed(block, ideal);
    let n = theta0.len();
    let names: Vec<String> = (0..n).map(|i| format!("theta{i}")).collect();
    let name_refs: Vec<&str> = names.iter().map(String::as_str).collect();
    let space = ParamSpace::free(&name_refs, &vec![1.0; n]);
    let cfg = NmConfig { x_tol: 1e-9, f_tol: 1e-13, max_evals: 600, initial_step: 0.02, ..NmConfig::default() };
    let mut failure = None;
    let mut objective = |th: &[f64]| match average_fidelity(&vz_compose(block, th), ideal, m, seed) {
        Ok(e) => 1.0 - e.f,
        Err(e) => {
            failure.get_or_insert(e);
            f64::INFINITY
        }
    };
    let res = nelder_mead(&mut objective, &theta0, &space, &cfg)?;
    if let Some(e) = failure {
        return Err(e);
    }
    Ok((res.x.into_iter().map(wrap_angle).collect(), 1.0 - res.f))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuxFit {
    pub params: CnotAsymParams,
    pub mean_success: f64,
    pub fidelity: f64,
    /// Final `F` fell below the threshold; the CR point should be reset.
    pub local_maximum: bool,
}

/// Steps two and three of the seed search: auxiliary-pulse fit by mean success probability
/// over `(f2, TX, OmegaX, gamma2)`, then the virtual-Z fit.
pub fn aux_and_vz_fit(
    pipe: &mut GatePipeline<'_>,
    cr_point: &CnotAsymParams,
    cfg: &OptimizeConfig,
    threshold: f64,
) -> Result<AuxFit> {
    let space = ParamSpace::asym_cnot().with_free(&["f2", "TX", "OmegaX", "gamma2"])?;
    let x0 = cr_point.to_vector();
    let mut failure: Option<Error> = None;
    let mut objective = |x: &[f64]| -> f64 {
        let p = cr_point.with_vector(x);
        match p.validate(pipe.ops().n_transmons()).and_then(|_| pipe.mean_success(&p)) {
            Ok(v) => 1.0 - v,
            Err(Error::Invalid(_)) => f64::INFINITY,
            Err(e) => {
                failure.get_or_insert(e);
                f64::INFINITY
            }
        }
    };
    let res = nelder_mead(&mut objective, &x0, &space, &cfg.nm)?;
    if let Some(e) = failure {
        return Err(e);
    }
    let mut params = cr_point.with_vector(&res.x);
    let prop = pipe.propagate(&params)?;
    let block = computational_block(&prop, pipe.ops())?;
    let (theta, _) = fit_vz(&block, &pipe.ideal, cfg.inner_m, cfg.seed)?;
    params.theta[..theta.len()].copy_from_slice(&theta);
    let fidelity = 1.0 - pipe.infidelity(&params, cfg.final_m, cfg.seed)?;
    Ok(AuxFit {
        params,
        mean_success: 1.0 - res.f,
        fidelity,
        local_maximum: fidelity < threshold,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepAxis {
    pub name: String,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedPoint {
    pub values: Vec<f64>,
    pub success: Vec<f64>,
    pub variance: f64,
    pub orthogonality: f64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSearchReport {
    pub axes: Vec<SweepAxis>,
    pub points: Vec<SeedPoint>,
    /// Point indices, best score first.
    pub ranking: Vec<usize>,
}

impl SeedSearchReport {
    pub fn rank_of(&self, point: usize) -> Option<usize> {
        self.ranking.iter().position(|&p| p == point)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header: Vec<String> = self.axes.iter().map(|a| a.name.clone()).collect();
        header.extend(["variance", "orthogonality", "score", "rank"].map(String::from));
        if let Some(p) = self.points.first() {
            header.extend((0..p.success.len()).map(|b| format!("p{b}")));
        }
        w.write_record(&header)?;
        for (i, p) in self.points.iter().enumerate() {
            let mut row: Vec<String> = p.values.iter().map(|v| v.to_string()).collect();
            row.push(format!("{:.9}", p.variance));
            row.push(format!("{:.9}", p.orthogonality));
            row.push(format!("{:.9}", p.score));
            row.push(self.rank_of(i).unwrap_or(usize::MAX).to_string());
            row.extend(p.success.iter().map(|v| format!("{v:.9}")));
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Cartesian product of axis values, first axis slowest.
pub fn grid_points(axes: &[SweepAxis]) -> Vec<Vec<f64>> {
    let mut points = vec![Vec::new()];
    for axis in axes {
        points = points
            .into_iter()
            .flat_map(|p| {
                axis.values.iter().map(move |&v| {
                    let mut q = p.clone();
                    q.push(v);
                    q
                })
            })
            .collect();
    }
    points
}

fn set_named(p: &mut CnotAsymParams, name: &str, v: f64) -> Result<()> {
    let mut x = p.to_vector();
    let i = ASYM_PARAM_NAMES
        .iter()
        .position(|n| *n == name)
        .ok_or_else(|| Error::invalid(format!("unknown parameter {name:?}")))?;
    x[i] = v;
    *p = p.with_vector(&x);
    Ok(())
}

/// Scores CR-only evolutions over a grid of `(f1, TS, OmegaS, rho, gamma1)` values.
///
/// Score = variance of the basis success probabilities + (1 − orthogonality of the target
/// states conditioned on the control), lower is better.
pub fn sweet_spot_search(
    ops: &SystemOperators,
    base: &CnotAsymParams,
    axes: &[SweepAxis],
    evolution: &EvolutionConfig,
) -> Result<SeedSearchReport> {
    const CR_AXES: [&str; 5] = ["f1", "TS", "OmegaS", "rho", "gamma1"];
    if let Some(a) = axes.iter().find(|a| !CR_AXES.contains(&a.name.as_str())) {
        return Err(Error::invalid(format!("{} is not a cross-resonance parameter", a.name)));
    }
    let ideal = ideal_cnot(base.control, base.target, ops.n_transmons())?;
    let mut points = Vec::new();
    for values in grid_points(axes) {
        let mut p = *base;
        for (axis, &v) in axes.iter().zip(&values) {
            set_named(&mut p, &axis.name, v)?;
        }
        p.validate(ops.n_transmons())?;
        // CR tone alone: the auxiliary pulse is silenced and the window ends with the CR tone.
        let mut program = build_asym_cnot(&CnotAsymParams { omega_x: 0.0, ..p }, &ops.device)?;
        program.channels[p.target].clear();
        program.total_time = p.cr_end();
        let prop = crate::propagate::evolve(&program, ops, &EvolutionConfig { columns: None, ..evolution.clone() })?;
        let block = computational_block(&prop, ops)?;
        let d = ideal.dim();
        let success: Vec<f64> = (0..d).map(|b| block[(ideal.image(b), b)].norm_sqr()).collect();
        let mean = success.iter().sum::<f64>() / d as f64;
        let variance = success.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / d as f64;
        let orthogonality = conditional_orthogonality(&block, &ideal);
        points.push(SeedPoint { values, success, variance, orthogonality, score: variance + 1.0 - orthogonality });
    }
    let mut ranking: Vec<usize> = (0..points.len()).collect();
    ranking.sort_by(|&a, &b| points[a].score.total_cmp(&points[b].score).then(a.cmp(&b)));
    Ok(SeedSearchReport { axes: axes.to_vec(), points, ranking })
}

/// Mean of `1 − Tr(ρ₀ρ₁)` over inputs differing only in the control bit, with `ρ_c` the
/// normalized target block of the evolved state for control value `c`.
fn conditional_orthogonality(block: &DMatrix<Complex64>, ideal: &IdealGate) -> f64 {
    let n = ideal.n_qubits;
    let cbit = 1 << (n - 1 - ideal.control);
    let tbit = 1 << (n - 1 - ideal.target);
    let target_rho = |input: usize| -> [[Complex64; 2]; 2] {
        let mut rho = [[Complex64::new(0.0, 0.0); 2]; 2];
        for rest in 0..ideal.dim() {
            if rest & tbit != 0 {
                continue;
            }
            for a in 0..2 {
                for b in 0..2 {
                    let ia = rest | if a == 1 { tbit } else { 0 };
                    let ib = rest | if b == 1 { tbit } else { 0 };
                    rho[a][b] += block[(ia, input)] * block[(ib, input)].conj();
                }
            }
        }
        let tr = (rho[0][0] + rho[1][1]).re;
        if tr > 0.0 {
            rho.iter_mut().flatten().for_each(|z| *z /= tr);
        }
        rho
    };
    let mut acc = 0.0;
    let mut count = 0;
    for input in 0..ideal.dim() {
        if input & cbit != 0 {
            continue;
        }
        let r0 = target_rho(input);
        let r1 = target_rho(input | cbit);
        let overlap: f64 = (0..2)
            .flat_map(|a| (0..2).map(move |b| (a, b)))
            .map(|(a, b)| (r0[a][b] * r1[b][a]).re)
            .sum();
        acc += 1.0 - overlap;
        count += 1;
    }
    acc / count as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    #[serde(rename = "F")]
    pub f: f64,
    pub mean_success: f64,
}

/// One-parameter sweep of a full gate at fixed other parameters.
pub fn sweep_parameter(
    pipe: &mut GatePipeline<'_>,
    base: &CnotAsymParams,
    name: &str,
    values: &[f64],
    m: usize,
    seed: u64,
) -> Result<Vec<SweepRow>> {
    values
        .iter()
        .map(|&v| {
            let mut p = *base;
            set_named(&mut p, name, v)?;
            p.validate(pipe.ops().n_transmons())?;
            let f = 1.0 - pipe.infidelity(&p, m, seed)?;
            Ok(SweepRow { value: v, f, mean_success: pipe.mean_success(&p)? })
        })
        .collect()
}

pub fn write_sweep_csv(rows: &[SweepRow], name: &str, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([name, "F", "mean_success"])?;
    for r in rows {
        w.write_record([r.value.to_string(), format!("{:.9}", r.f), format!("{:.9}", r.mean_success)])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::device::{build_system, DeviceSpec, ResonatorSpec, TransmonSpec};
    use crate::pulse::CrLayout;
    use proptest::prelude::*;

    #[test]
    fn quadratic_12d() {
        let space = ParamSpace::free(&ASYM_PARAM_NAMES, &[1.0; 12]);
        let mut f = |x: &[f64]| x.iter().map(|v| (v - 1.0).powi(2)).sum::<f64>();
        let cfg = NmConfig { max_evals: 20_000, f_tol: 0.0, x_tol: 1e-8, ..NmConfig::default() };
        let r = nelder_mead(&mut f, &[0.0; 12], &space, &cfg).unwrap();
        assert!(r.converged);
        assert!(r.x.iter().all(|v| (v - 1.0).abs() < 1e-6), "{:?}", r.x);
    }

    #[test]
    fn rosenbrock() {
        let space = ParamSpace::free(&["x", "y"], &[1.0, 1.0]);
        let mut f = |x: &[f64]| 100.0 * (x[1] - x[0] * x[0]).powi(2) + (1.0 - x[0]).powi(2);
        let cfg = NmConfig { f_tol: 0.0, x_tol: 1e-10, max_evals: 5000, initial_step: 0.1, ..NmConfig::default() };
        let r = nelder_mead(&mut f, &[-1.2, 1.0], &space, &cfg).unwrap();
        assert!((r.x[0] - 1.0).abs() < 1e-4 && (r.x[1] - 1.0).abs() < 1e-4, "{:?}", r.x);
    }

    #[test]
    fn mask_empty_and_nan() {
        let mut space = ParamSpace::free(&["a", "b", "c"], &[1.0; 3]);
        space.fixed[1] = true;
        let mut f = |x: &[f64]| (x[0] - 2.0).powi(2) + (x[1] - 5.0).powi(2) + (x[2] + 1.0).powi(2);
        let r = nelder_mead(&mut f, &[0.0, 0.25, 0.0], &space, &NmConfig::default()).unwrap();
        assert_eq!(r.x[1], 0.25);
        space.fixed = vec![true; 3];
        let r = nelder_mead(&mut f, &[0.0, 0.25, 0.0], &space, &NmConfig::default()).unwrap();
        assert_eq!(r.x, vec![0.0, 0.25, 0.0]);
        assert_eq!(r.evals, 1);
        let mut nan = |x: &[f64]| if x[0] > 0.5 { f64::NAN } else { (x[0] - 1.0).powi(2) };
        let one = ParamSpace::free(&["a"], &[1.0]);
        let r = nelder_mead(&mut nan, &[0.0], &one, &NmConfig::default()).unwrap();
        assert!(r.x[0] <= 0.5 && r.f.is_finite());
        let mut bad = |_: &[f64]| f64::NAN;
        assert!(nelder_mead(&mut bad, &[0.0], &one, &NmConfig::default()).is_err());
    }

    #[test]
    fn soft_bounds_hold_the_optimum() {
        let mut space = ParamSpace::free(&["a"], &[1.0]);
        space.upper[0] = 1.0;
        let mut f = |x: &[f64]| (x[0] - 3.0).powi(2);
        let r = nelder_mead(&mut f, &[0.0], &space, &NmConfig::default()).unwrap();
        assert!((r.x[0] - 1.0).abs() < 1e-3);
    }

    #[test]
    fn budget_exhaustion_is_flagged() {
        let space = ParamSpace::free(&["a", "b"], &[1.0, 1.0]);
        let mut f = |x: &[f64]| 100.0 * (x[1] - x[0] * x[0]).powi(2) + (1.0 - x[0]).powi(2);
        let r = nelder_mead(&mut f, &[-1.2, 1.0], &space, &NmConfig { max_evals: 20, ..NmConfig::default() }).unwrap();
        assert!(r.exhausted && !r.converged);
        assert_eq!(r.evals, 20);
        assert!(nelder_mead(&mut f, &[-1.2, 1.0], &space, &NmConfig { max_evals: 2, ..NmConfig::default() }).is_err());
        assert!(r.f <= f(&[-1.2, 1.0]));
    }

    #[test]
    fn vz_fit_recovers_phases() {
        let ideal = ideal_cnot(0, 1, 3).unwrap();
        let theta = [0.9, -2.1, 2.7];
        // Z(−θ)·CNOT, so that Z(θ) restores the target gate.
        let block = VzGate::new(theta.iter().map(|t| -t).collect()).matrix() * &ideal.matrix;
        let (fit, f) = fit_vz(&block, &ideal, 256, 3).unwrap();
        for (a, b) in fit.iter().zip(theta) {
            assert!(wrap_angle(a - b).abs() < 1e-6, "{fit:?}");
        }
        assert!((f - 1.0).abs() < 1e-12);
        let (zero, _) = fit_vz(&ideal.matrix, &ideal, 256, 3).unwrap();
        assert!(zero.iter().all(|t| wrap_angle(*t).abs() < 1e-6));
    }

    #[test]
    fn grid_order() {
        let axes = vec![
            SweepAxis { name: "a".into(), values: vec![1.0, 2.0] },
            SweepAxis { name: "b".into(), values: vec![3.0, 4.0, 5.0] },
        ];
        let g = grid_points(&axes);
        assert_eq!(g.len(), 6);
        assert_eq!(g[1], vec![1.0, 4.0]);
        assert_eq!(g[3], vec![2.0, 3.0]);
    }

    fn two_transmon() -> SystemOperators {
        build_system(&DeviceSpec {
            transmons: vec![
                TransmonSpec::new(0.3461, 9.9178).with_levels(3),
                TransmonSpec::new(0.3421, 10.9781).with_levels(3),
            ],
            resonator: ResonatorSpec { frequency: 7.0, kept_levels: 3 },
            couplings: vec![0.07, 0.07],
        })
        .unwrap()
    }

    fn short_seed() -> CnotAsymParams {
        CnotAsymParams {
            f1: 5.1108,
            f2: 5.1108,
            tx: 10.0,
            ts: 20.0,
            omega_x: 0.029,
            omega_s: 0.1,
            rho: 0.16,
            gamma1: 0.0,
            gamma2: -0.9425,
            theta: [1.5394, -0.0628, 0.0],
            q: 1,
            control: 0,
            target: 1,
            layout: CrLayout::Inclusive,
        }
    }

    #[test]
    fn pipeline_cache_matches_fresh_evolution() {
        let ops = two_transmon();
        let evo = EvolutionConfig::default().with_tau(0.01);
        let mut pipe = GatePipeline::new(&ops, short_seed(), evo.clone()).unwrap();
        let a = short_seed();
        let b = CnotAsymParams { gamma2: 0.3, omega_x: 0.02, ..a };
        pipe.propagate(&a).unwrap();
        let cached = pipe.propagate(&b).unwrap();
        let fresh = crate::propagate::evolve(&build_asym_cnot(&b, &ops.device).unwrap(), &ops, &evo).unwrap();
        assert!((&cached.matrix - &fresh.matrix).norm() < 1e-12);
        // θ-only changes reuse the pulse propagator.
        let before = pipe.simulations;
        pipe.infidelity(&CnotAsymParams { theta: [0.1, 0.2, 0.0], ..b }, 64, 1).unwrap();
        assert_eq!(pipe.simulations, before);
    }

    #[test]
    fn sweep_rows_do_not_depend_on_order() {
        let ops = two_transmon();
        let evo = EvolutionConfig::default().with_tau(0.01);
        let base = short_seed();
        let values = [0.0, 0.02, 0.01];
        let mut pipe = GatePipeline::new(&ops, base, evo.clone()).unwrap();
        let fwd = sweep_parameter(&mut pipe, &base, "OmegaS", &values, 64, 3).unwrap();
        let mut pipe = GatePipeline::new(&ops, base, evo).unwrap();
        let rev: Vec<f64> = values.iter().rev().copied().collect();
        let back = sweep_parameter(&mut pipe, &base, "OmegaS", &rev, 64, 3).unwrap();
        for (a, b) in fwd.iter().zip(back.iter().rev()) {
            assert_eq!(a.value, b.value);
            assert!((a.f - b.f).abs() < 1e-12 && (a.mean_success - b.mean_success).abs() < 1e-12);
        }
    }

    #[test]
    fn optimize_never_worsens_and_respects_mask() {
        let ops = two_transmon();
        let cfg = OptimizeConfig {
            evolution: EvolutionConfig::default().with_tau(0.01),
            inner_m: 64,
            final_m: 64,
            nm: NmConfig { max_evals: 30, ..NmConfig::default() },
            ..OptimizeConfig::default()
        };
        let seed = short_seed();
        let space = ParamSpace::asym_cnot().with_free(&["gamma2", "theta0", "theta1"]).unwrap();
        let out = optimize_gate(&ops, &seed, &space, &cfg).unwrap();
        let rows = &out.result.trace.rows;
        assert!(rows.windows(2).all(|w| w[1].best_f <= w[0].best_f));
        assert!(rows.last().unwrap().best_f <= rows[0].best_f);
        assert_eq!(out.params.f1, seed.f1);
        assert_eq!(out.params.ts, seed.ts);
        let again = optimize_gate(&ops, &seed, &space, &cfg).unwrap();
        assert_eq!(out.result.trace.rows.len(), again.result.trace.rows.len());
        assert_eq!(out.params, again.params);
    }

    #[test]
    fn seed_search_scores() {
        let ops = two_transmon();
        let evo = EvolutionConfig::default().with_tau(0.01);
        let axes = vec![SweepAxis { name: "OmegaS".into(), values: vec![0.0, 0.1] }];
        let r = sweet_spot_search(&ops, &short_seed(), &axes, &evo).unwrap();
        assert_eq!(r.points.len(), 2);
        assert!((r.points[0].score - 1.25).abs() < 1e-2, "{}", r.points[0].score);
        assert_eq!(r.ranking, vec![1, 0]);
        let single = vec![SweepAxis { name: "TS".into(), values: vec![20.0] }];
        assert_eq!(sweet_spot_search(&ops, &short_seed(), &single, &evo).unwrap().points.len(), 1);
        let bad = vec![SweepAxis { name: "TX".into(), values: vec![20.0] }];
        assert!(sweet_spot_search(&ops, &short_seed(), &bad, &evo).is_err());
    }

    #[test]
    fn aux_fit_flags_missing_cr() {
        let ops = two_transmon();
        let cfg = OptimizeConfig {
            evolution: EvolutionConfig::default().with_tau(0.01),
            inner_m: 64,
            final_m: 256,
            nm: NmConfig { max_evals: 40, ..NmConfig::default() },
            ..OptimizeConfig::default()
        };
        let seed = CnotAsymParams { omega_s: 0.0, ..short_seed() };
        let mut pipe = GatePipeline::new(&ops, seed, cfg.evolution.clone()).unwrap();
        let fit = aux_and_vz_fit(&mut pipe, &seed, &cfg, 0.9).unwrap();
        assert!(fit.local_maximum, "F = {}", fit.fidelity);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn trace_is_monotone_and_mask_exact(
            target in proptest::collection::vec(-3.0f64..3.0, 4),
            mask in proptest::collection::vec(any::<bool>(), 4),
            budget in 5usize..400,
        ) {
            let mut space = ParamSpace::free(&["a", "b", "c", "d"], &[1.0; 4]);
            space.fixed = mask.clone();
            let x0 = [0.5, -0.5, 0.25, 1.0];
            let mut f = |x: &[f64]| x.iter().zip(&target).map(|(a, b)| (a - b).powi(2) * (1.0 + a.abs())).sum::<f64>();
            let r = nelder_mead(&mut f, &x0, &space, &NmConfig { max_evals: budget, ..NmConfig::default() }).unwrap();
            prop_assert!(r.trace.rows.windows(2).all(|w| w[1].best_f <= w[0].best_f));
            prop_assert!(r.evals <= budget);
            prop_assert_eq!(r.trace.rows.last().unwrap().evals, r.evals);
            for i in 0..4 {
                if mask[i] {
                    prop_assert_eq!(r.x[i], x0[i]);
                }
            }
        }
    }
}
