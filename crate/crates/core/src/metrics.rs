//! Target gates, virtual-Z corrections and gate quality measures on the computational subspace.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::device::SystemOperators;
use crate::error::{Error, Result};
use crate::propagate::{Frame, Propagator};

/// Computational-subspace index of a bitstring, transmon 0 most significant.
fn bit(index: usize, qubit: usize, n: usize) -> usize {
    (index >> (n - 1 - qubit)) & 1
}

pub fn bitstring(index: usize, n: usize) -> String {
    (0..n).map(|q| if bit(index, q, n) == 1 { '1' } else { '0' }).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdealGate {
    pub label: String,
    pub control: usize,
    pub target: usize,
    pub n_qubits: usize,
    pub matrix: DMatrix<Complex64>,
}

impl IdealGate {
    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    /// Image of basis state `b` when the gate is a permutation.
    pub fn image(&self, b: usize) -> usize {
        (0..self.dim())
            .max_by(|&x, &y| self.matrix[(x, b)].norm().total_cmp(&self.matrix[(y, b)].norm()))
            .expect("non-empty gate")
    }
}

pub fn ideal_identity(n_qubits: usize) -> IdealGate {
    let d = 1 << n_qubits;
    IdealGate {
        label: "I".into(),
        control: 0,
        target: 0,
        n_qubits,
        matrix: DMatrix::identity(d, d),
    }
}

pub fn ideal_cnot(control: usize, target: usize, n_qubits: usize) -> Result<IdealGate> {
    if control == target || control >= n_qubits || target >= n_qubits {
        return Err(Error::invalid(format!(
            "CNOT({control}→{target}) is not defined on {n_qubits} qubits"
        )));
    }
    let d = 1 << n_qubits;
    let mut m = DMatrix::zeros(d, d);
    for b in 0..d {
        let out = if bit(b, control, n_qubits) == 1 {
            b ^ (1 << (n_qubits - 1 - target))
        } else {
            b
        };
        m[(out, b)] = Complex64::new(1.0, 0.0);
    }
    Ok(IdealGate {
        label: format!("CNOT_{control}{target}"),
        control,
        target,
        n_qubits,
        matrix: m,
    })
}

/// Virtual-Z angles, one per transmon. `R_Z(θ)` multiplies level `m ∈ {0, 1}` by `e^{iθm}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VzGate {
    pub theta: Vec<f64>,
}

impl VzGate {
    pub fn new(theta: Vec<f64>) -> Self {
        VzGate { theta }
    }

    /// Phase on computational basis state `b`.
    pub fn phase(&self, b: usize) -> Complex64 {
        let n = self.theta.len();
        let angle: f64 = (0..n).map(|q| self.theta[q] * bit(b, q, n) as f64).sum();
        Complex64::from_polar(1.0, angle)
    }

    pub fn matrix(&self) -> DMatrix<Complex64> {
        let d = 1 << self.theta.len();
        DMatrix::from_fn(d, d, |r, c| if r == c { self.phase(r) } else { Complex64::new(0.0, 0.0) })
    }
}

/// `𝒵·𝒰_pulse` restricted to the computational subspace.
#[derive(Debug, Clone, PartialEq)]
pub struct ComposedGate {
    pub matrix: DMatrix<Complex64>,
    pub frame_warning: Option<String>,
}

/// Positions of the computational columns inside a propagator.
fn computational_positions(prop: &Propagator, ops: &SystemOperators) -> Result<Vec<usize>> {
    ops.computational_indices()
        .iter()
        .map(|b| {
            prop.columns.iter().position(|c| c == b).ok_or_else(|| {
                Error::invalid(format!(
                    "propagator lacks computational column {}",
                    ops.indexer.bitstring(*b)
                ))
            })
        })
        .collect()
}

/// The pulse propagator restricted to `𝒞 × 𝒞`, in computational order.
pub fn computational_block(prop: &Propagator, ops: &SystemOperators) -> Result<DMatrix<Complex64>> {
    if prop.dim() != ops.dim() {
        return Err(Error::DimensionMismatch { expected: ops.dim(), got: prop.dim() });
    }
    let rows = ops.computational_indices();
    let cols = computational_positions(prop, ops)?;
    Ok(DMatrix::from_fn(rows.len(), cols.len(), |r, c| prop.matrix[(rows[r], cols[c])]))
}

pub fn apply_vz(vz: &VzGate, prop: &Propagator, ops: &SystemOperators) -> Result<ComposedGate> {
    if vz.theta.len() != ops.n_transmons() {
        return Err(Error::DimensionMismatch { expected: ops.n_transmons(), got: vz.theta.len() });
    }
    let mut m = computational_block(prop, ops)?;
    for (r, mut row) in m.row_iter_mut().enumerate() {
        let ph = vz.phase(r);
        row.iter_mut().for_each(|z| *z *= ph);
    }
    let frame_warning = (prop.frame == Frame::Lab).then(|| {
        "virtual-Z angles applied to a lab-frame propagator; angles are frame dependent".to_string()
    });
    Ok(ComposedGate { matrix: m, frame_warning })
}

/// Neumaier-compensated running sum.
#[derive(Debug, Clone, Copy, Default)]
struct CompensatedSum {
    sum: f64,
    c: f64,
}

impl CompensatedSum {
    fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.c += (self.sum - t) + x;
        } else {
            self.c += (x - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(&self) -> f64 {
        self.sum + self.c
    }
}

/// Haar-random state number `j` of the stream `seed`.
pub fn haar_state(dim: usize, seed: u64, j: u64) -> DVector<Complex64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(j);
    let mut v = DVector::from_fn(dim, |_, _| {
        let re: f64 = StandardNormal.sample(&mut rng);
        let im: f64 = StandardNormal.sample(&mut rng);
        Complex64::new(re, im)
    });
    let n = v.norm();
    v /= Complex64::new(n, 0.0);
    v
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FidelityEstimate {
    #[serde(rename = "F")]
    pub f: f64,
    pub stderr: f64,
    #[serde(rename = "M")]
    pub m: usize,
    pub seed: u64,
}

/// Mean of `|⟨ψ|U†𝒰|ψ⟩|` over `m` Haar-random states on the computational subspace.
pub fn average_fidelity(u: &DMatrix<Complex64>, ideal: &IdealGate, m: usize, seed: u64) -> Result<FidelityEstimate> {
    if m == 0 {
        return Err(Error::invalid("sample count M must be at least 1"));
    }
    if u.shape() != ideal.matrix.shape() {
        return Err(Error::DimensionMismatch { expected: ideal.dim(), got: u.nrows() });
    }
    let a = ideal.matrix.adjoint() * u;
    let d = ideal.dim();
    let mut sum = CompensatedSum::default();
    let mut sum_sq = CompensatedSum::default();
    for j in 0..m {
        let psi = haar_state(d, seed, j as u64);
        let f = psi.dotc(&(&a * &psi)).norm();
        sum.add(f);
        sum_sq.add(f * f);
    }
    let mean = sum.value() / m as f64;
    let stderr = if m > 1 {
        let var = ((sum_sq.value() - m as f64 * mean * mean) / (m as f64 - 1.0)).max(0.0);
        (var / m as f64).sqrt()
    } else {
        0.0
    };
    Ok(FidelityEstimate { f: mean.clamp(0.0, 1.0), stderr, m, seed })
}

/// Standard average gate fidelity `(Tr(MM†) + |Tr M|²) / (d(d+1))` with `M = U†𝒰`.
/// A diagnostic only; it squares overlaps where [`average_fidelity`] does not.
pub fn standard_gate_fidelity(u: &DMatrix<Complex64>, ideal: &IdealGate) -> f64 {
    let m = ideal.matrix.adjoint() * u;
    let d = ideal.dim() as f64;
    ((&m * m.adjoint()).trace().re + m.trace().norm_sqr()) / (d * (d + 1.0))
}

/// `p_b = |⟨U b|𝒰_pulse|b⟩|²` per computational basis state, in computational order.
pub fn success_probabilities(prop: &Propagator, ideal: &IdealGate, ops: &SystemOperators) -> Result<Vec<f64>> {
    let block = computational_block(prop, ops)?;
    if block.nrows() != ideal.dim() {
        return Err(Error::DimensionMismatch { expected: ideal.dim(), got: block.nrows() });
    }
    Ok((0..ideal.dim()).map(|b| block[(ideal.image(b), b)].norm_sqr()).collect())
}

/// `|⟨b'|𝒰_pulse|b⟩|²` with inputs as rows and outputs as columns.
pub fn transition_grid(prop: &Propagator, ops: &SystemOperators) -> Result<DMatrix<f64>> {
    let block = computational_block(prop, ops)?;
    Ok(DMatrix::from_fn(block.ncols(), block.nrows(), |b, out| block[(out, b)].norm_sqr()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColumnDiagnostics {
    pub column: usize,
    pub leakage: f64,
    pub res_excitation: f64,
}

pub fn leakage_diagnostics(prop: &Propagator, ops: &SystemOperators) -> Vec<ColumnDiagnostics> {
    let comp = ops.computational_indices();
    prop.matrix
        .column_iter()
        .zip(&prop.columns)
        .map(|(col, &column)| {
            let in_c: f64 = comp.iter().map(|&b| col[b].norm_sqr()).sum();
            let norm: f64 = col.iter().map(|z| z.norm_sqr()).sum();
            let res: f64 = col
                .iter()
                .enumerate()
                .filter(|(b, _)| ops.indexer.resonator_label(*b) > 0)
                .map(|(_, z)| z.norm_sqr())
                .sum();
            ColumnDiagnostics { column, leakage: norm - in_c, res_excitation: res }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    pub gate: String,
    #[serde(rename = "F")]
    pub f: f64,
    pub stderr: f64,
    #[serde(rename = "M")]
    pub m: usize,
    pub seed: u64,
    pub success_probs: BTreeMap<String, f64>,
    pub leakage: f64,
    pub res_excitation: f64,
    pub standard_fidelity: f64,
    pub frame: Frame,
}

impl FidelityReport {
    pub fn mean_success(&self) -> f64 {
        self.success_probs.values().sum::<f64>() / self.success_probs.len() as f64
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Full evaluation of a propagated gate: fidelity, success probabilities and diagnostics.
pub fn evaluate_gate(
    prop: &Propagator,
    vz: &VzGate,
    ideal: &IdealGate,
    ops: &SystemOperators,
    m: usize,
    seed: u64,
) -> Result<FidelityReport> {
    let composed = apply_vz(vz, prop, ops)?;
    let est = average_fidelity(&composed.matrix, ideal, m, seed)?;
    let probs = success_probabilities(prop, ideal, ops)?;
    let n = ops.n_transmons();
    let comp = ops.computational_indices();
    let diags: Vec<ColumnDiagnostics> = leakage_diagnostics(prop, ops)
        .into_iter()
        .filter(|d| comp.contains(&d.column))
        .collect();
    let k = diags.len().max(1) as f64;
    Ok(FidelityReport {
        gate: ideal.label.clone(),
        f: est.f,
        stderr: est.stderr,
        m,
        seed,
        success_probs: probs.iter().enumerate().map(|(b, p)| (bitstring(b, n), *p)).collect(),
        leakage: diags.iter().map(|d| d.leakage).sum::<f64>() / k,
        res_excitation: diags.iter().map(|d| d.res_excitation).sum::<f64>() / k,
        standard_fidelity: standard_gate_fidelity(&composed.matrix, ideal),
        frame: prop.frame,
    })
}

/// CSV of the transition grid, one row per input basis state.
pub fn write_grid_csv<W: std::io::Write>(grid: &DMatrix<f64>, n_qubits: usize, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["input".to_string()];
    header.extend((0..grid.ncols()).map(|b| bitstring(b, n_qubits)));
    out.write_record(&header)?;
    for b in 0..grid.nrows() {
        let mut row = vec![bitstring(b, n_qubits)];
        row.extend((0..grid.ncols()).map(|o| format!("{:.9}", grid[(b, o)])));
        out.write_record(&row)?;
    }
    out.flush().map_err(|e| Error::io(Path::new("<grid csv>"), e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::device::{build_system, DeviceSpec, ResonatorSpec, TransmonSpec};
    use crate::propagate::{evolve, EvolutionConfig};
    use crate::pulse::PulseProgram;
    use proptest::prelude::*;

    fn c(re: f64) -> Complex64 {
        Complex64::new(re, 0.0)
    }

    #[test]
    fn cnot_truth_table() {
        let g = ideal_cnot(0, 1, 3).unwrap();
        // |100⟩ ↦ |110⟩, |000⟩ ↦ |000⟩.
        assert_eq!(g.image(0b100), 0b110);
        assert_eq!(g.image(0b000), 0b000);
        assert_eq!(g.image(0b111), 0b101);
        let id = DMatrix::<Complex64>::identity(8, 8);
        assert_eq!(&g.matrix * &g.matrix, id);
        assert!(g.matrix.iter().all(|z| z.im == 0.0 && (z.re == 0.0 || z.re == 1.0)));
        assert!(ideal_cnot(1, 1, 3).is_err());
        assert!(ideal_cnot(0, 3, 3).is_err());
    }

    #[test]
    fn three_alternating_cnots_swap() {
        let a = ideal_cnot(0, 1, 2).unwrap().matrix;
        let b = ideal_cnot(1, 0, 2).unwrap().matrix;
        let swap = &a * &b * &a;
        for x in 0..4 {
            let swapped = ((x & 1) << 1) | (x >> 1);
            assert_eq!(swap[(swapped, x)], c(1.0));
        }
    }

    fn ops_g0() -> SystemOperators {
        build_system(&DeviceSpec {
            transmons: vec![TransmonSpec::new(0.30783, 11.914), TransmonSpec::new(0.30902, 11.412)],
            resonator: ResonatorSpec { frequency: 7.0, kept_levels: 2 },
            couplings: vec![0.0, 0.0],
        })
        .unwrap()
    }

    fn identity_prop(ops: &SystemOperators) -> Propagator {
        evolve(&PulseProgram::idle(2, 1.0), ops, &EvolutionConfig::default().with_tau(0.01)).unwrap()
    }

    #[test]
    fn vz_conventions() {
        let ops = ops_g0();
        let prop = identity_prop(&ops);
        let base = apply_vz(&VzGate::new(vec![0.0, 0.0]), &prop, &ops).unwrap();
        assert!(base.frame_warning.is_none());
        let full = apply_vz(&VzGate::new(vec![std::f64::consts::TAU, 0.0]), &prop, &ops).unwrap();
        assert!((&full.matrix - &base.matrix).norm() < 1e-12);
        let pi = apply_vz(&VzGate::new(vec![std::f64::consts::PI, 0.0]), &prop, &ops).unwrap();
        for b in 0..4 {
            let expect = if b >> 1 == 1 { -1.0 } else { 1.0 };
            assert!((pi.matrix[(b, b)] - c(expect)).norm() < 1e-9);
        }
    }

    #[test]
    fn identity_pulse_scores() {
        let ops = ops_g0();
        let prop = identity_prop(&ops);
        let id_gate = IdealGate {
            label: "I".into(),
            control: 0,
            target: 1,
            n_qubits: 2,
            matrix: DMatrix::identity(4, 4),
        };
        assert!(success_probabilities(&prop, &id_gate, &ops).unwrap().iter().all(|p| (p - 1.0).abs() < 1e-9));
        for d in leakage_diagnostics(&prop, &ops) {
            assert!(d.leakage.abs() < 1e-12);
        }
        let report = evaluate_gate(&prop, &VzGate::new(vec![0.0, 0.0]), &id_gate, &ops, 100, 1).unwrap();
        assert!((report.f - 1.0).abs() < 1e-9);
        assert_eq!(report.success_probs.keys().cloned().collect::<Vec<_>>(), ["00", "01", "10", "11"]);
        let json = serde_json::to_value(&report).unwrap();
        for key in ["F", "stderr", "M", "seed", "success_probs", "leakage", "res_excitation"] {
            assert!(json.get(key).is_some(), "{key}");
        }
    }

    #[test]
    fn exact_gate_has_unit_fidelity() {
        let g = ideal_cnot(0, 2, 3).unwrap();
        for m in [1, 7, 500] {
            let est = average_fidelity(&g.matrix, &g, m, 42).unwrap();
            assert!((est.f - 1.0).abs() < 1e-12);
        }
        let phased = &g.matrix * Complex64::from_polar(1.0, 0.7);
        assert!((average_fidelity(&phased, &g, 300, 3).unwrap().f - 1.0).abs() < 1e-12);
        assert!((standard_gate_fidelity(&g.matrix, &g) - 1.0).abs() < 1e-12);
        assert!(average_fidelity(&g.matrix, &g, 0, 3).is_err());
    }

    #[test]
    fn seeded_estimates_are_reproducible() {
        let g = ideal_cnot(0, 1, 3).unwrap();
        let u = VzGate::new(vec![0.3, -0.2, 0.1]).matrix();
        let a = average_fidelity(&u, &g, 2000, 9).unwrap();
        let b = average_fidelity(&u, &g, 2000, 9).unwrap();
        assert_eq!(a.f.to_bits(), b.f.to_bits());
        let other = average_fidelity(&u, &g, 2000, 10).unwrap();
        assert_ne!(a.f, other.f);
    }

    #[test]
    fn standard_error_scales_with_samples() {
        let g = ideal_cnot(0, 1, 2).unwrap();
        let u = VzGate::new(vec![0.9, 0.4]).matrix();
        let small = average_fidelity(&u, &g, 10_000, 5).unwrap();
        let large = average_fidelity(&u, &g, 40_000, 6).unwrap();
        let combined = (small.stderr.powi(2) + large.stderr.powi(2)).sqrt();
        assert!((small.f - large.f).abs() <= 3.0 * combined);
        let ratio = small.stderr / large.stderr;
        assert!((1.8..2.2).contains(&ratio), "{ratio}");
    }

    #[test]
    fn diagonal_phase_fidelity_matches_closed_form() {
        // Phase error φ on qubit 1: F = E|1 − p + p·e^{iφ}| with p the Haar weight on m_1 = 1.
        // Oracle: Haar populations on C^4 are Dirichlet(1,1,1,1), sampled from exponentials.
        let g = ideal_cnot(0, 1, 2).unwrap();
        let phi: f64 = 0.8;
        let u = &g.matrix * VzGate::new(vec![0.0, phi]).matrix();
        let n = 200_000;
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let mut acc = 0.0;
        for _ in 0..n {
            let e: Vec<f64> = (0..4).map(|_| -rand::Rng::random::<f64>(&mut rng).ln()).collect();
            let s: f64 = e.iter().sum();
            // States with m1 = 1 are 01 and 11.
            let p1 = (e[1] + e[3]) / s;
            acc += ((1.0 - p1) + p1 * Complex64::from_polar(1.0, phi)).norm();
        }
        let oracle = acc / n as f64;
        let est = average_fidelity(&u, &g, 20_000, 77).unwrap();
        assert!((est.f - oracle).abs() < 4.0 * est.stderr + 1e-3, "{} vs {oracle}", est.f);
    }

    #[test]
    fn grid_csv_layout() {
        let ops = ops_g0();
        let prop = identity_prop(&ops);
        let grid = transition_grid(&prop, &ops).unwrap();
        let mut buf = Vec::new();
        write_grid_csv(&grid, 2, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("input,00,01,10,11\n00,1.000000000,0.000000000"));
    }

    proptest! {
        #[test]
        fn fidelity_in_unit_interval(angles in proptest::collection::vec(-6.3f64..6.3, 3), seed in 0u64..1000) {
            let g = ideal_cnot(2, 0, 3).unwrap();
            let u = VzGate::new(angles).matrix() * Complex64::new(0.97, 0.0);
            let est = average_fidelity(&u, &g, 64, seed).unwrap();
            prop_assert!((0.0..=1.0).contains(&est.f));
            prop_assert!(est.stderr >= 0.0);
        }

        #[test]
        fn vz_preserves_norms_and_success(angles in proptest::collection::vec(-6.3f64..6.3, 2)) {
            let ops = ops_g0();
            let prop = identity_prop(&ops);
            let g = ideal_cnot(0, 1, 2).unwrap();
            let plain = apply_vz(&VzGate::new(vec![0.0, 0.0]), &prop, &ops).unwrap().matrix;
            let rotated = apply_vz(&VzGate::new(angles), &prop, &ops).unwrap().matrix;
            for (a, b) in plain.column_iter().zip(rotated.column_iter()) {
                prop_assert!((a.norm() - b.norm()).abs() < 1e-14);
            }
            let p = success_probabilities(&prop, &g, &ops).unwrap();
            prop_assert_eq!(p.len(), 4);
        }

        #[test]
        fn global_phase_invariance(phi in -3.2f64..3.2) {
            let g = ideal_cnot(0, 1, 2).unwrap();
            let u = VzGate::new(vec![0.2, 0.5]).matrix();
            let a = average_fidelity(&u, &g, 200, 4).unwrap().f;
            let b = average_fidelity(&(&u * Complex64::from_polar(1.0, phi)), &g, 200, 4).unwrap().f;
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
