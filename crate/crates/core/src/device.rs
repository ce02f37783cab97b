//! Transmon and resonator models, and the coupled-system operators built from them.
//!
//! All energies are stored in GHz as cycles per nanosecond (the `E/2π` numbers hardware
//! tables quote). The propagator multiplies by 2π when it exponentiates.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_CHARGE_CUTOFF: usize = 15;
pub const DEFAULT_LEVELS: usize = 4;
/// Largest product-space dimension `build_system` accepts unless told otherwise.
pub const DEFAULT_DIMENSION_CAP: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransmonSpec {
    pub charging_energy: f64,
    pub josephson_energy: f64,
    pub charge_cutoff: usize,
    pub kept_levels: usize,
}

impl TransmonSpec {
    pub fn new(charging_energy: f64, josephson_energy: f64) -> Self {
        TransmonSpec {
            charging_energy,
            josephson_energy,
            charge_cutoff: DEFAULT_CHARGE_CUTOFF,
            kept_levels: DEFAULT_LEVELS,
        }
    }

    pub fn with_cutoff(mut self, charge_cutoff: usize) -> Self {
        self.charge_cutoff = charge_cutoff;
        self
    }

    pub fn with_levels(mut self, kept_levels: usize) -> Self {
        self.kept_levels = kept_levels;
        self
    }

    pub fn charge_dim(&self) -> usize {
        2 * self.charge_cutoff + 1
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.charging_energy > 0.0) {
            return Err(Error::invalid("transmon charging energy must be positive"));
        }
        if !(self.josephson_energy >= 0.0) {
            return Err(Error::invalid("transmon Josephson energy must be non-negative"));
        }
        if self.charge_cutoff < 5 {
            return Err(Error::invalid(format!(
                "charge cutoff {} below the minimum of 5",
                self.charge_cutoff
            )));
        }
        if self.kept_levels < 2 || self.kept_levels + 2 > self.charge_dim() {
            return Err(Error::invalid(format!(
                "kept_levels {} must lie in [2, {}] for charge cutoff {}",
                self.kept_levels,
                self.charge_dim() - 2,
                self.charge_cutoff
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResonatorSpec {
    pub frequency: f64,
    pub kept_levels: usize,
}

impl ResonatorSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.frequency > 0.0) {
            return Err(Error::invalid("resonator frequency must be positive"));
        }
        if self.kept_levels < 2 {
            return Err(Error::invalid("resonator needs at least two levels"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeviceSpec {
    pub transmons: Vec<TransmonSpec>,
    pub resonator: ResonatorSpec,
    /// Transmon-resonator coupling energy per transmon, GHz.
    pub couplings: Vec<f64>,
}

impl DeviceSpec {
    pub fn n_transmons(&self) -> usize {
        self.transmons.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.transmons.is_empty() {
            return Err(Error::invalid("device has no transmons"));
        }
        if self.couplings.len() != self.transmons.len() {
            return Err(Error::invalid(format!(
                "{} couplings given for {} transmons",
                self.couplings.len(),
                self.transmons.len()
            )));
        }
        if self.couplings.iter().any(|g| !g.is_finite()) {
            return Err(Error::invalid("coupling energies must be finite"));
        }
        self.resonator.validate()?;
        for t in &self.transmons {
            t.validate()?;
        }
        Ok(())
    }

    /// Same device with every transmon-resonator coupling switched off.
    pub fn uncoupled(&self) -> DeviceSpec {
        let mut d = self.clone();
        d.couplings.iter_mut().for_each(|g| *g = 0.0);
        d
    }
}

/// On-disk device description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub transmons: Vec<TransmonEntry>,
    pub resonator: ResonatorEntry,
    #[serde(rename = "couplings_GHz")]
    pub couplings_ghz: Vec<f64>,
    #[serde(default = "default_cutoff")]
    pub charge_cutoff: usize,
    #[serde(default = "default_levels")]
    pub transmon_levels: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransmonEntry {
    #[serde(rename = "EC_GHz")]
    pub ec_ghz: f64,
    #[serde(rename = "EJ_GHz")]
    pub ej_ghz: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResonatorEntry {
    #[serde(rename = "omega_GHz")]
    pub omega_ghz: f64,
    #[serde(default = "default_levels")]
    pub levels: usize,
}

fn default_cutoff() -> usize {
    DEFAULT_CHARGE_CUTOFF
}

fn default_levels() -> usize {
    DEFAULT_LEVELS
}

impl DeviceFile {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse {
            what: "device file".into(),
            line: e.line(),
            column: e.column(),
            msg: e.to_string(),
        })
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_spec(&self) -> Result<DeviceSpec> {
        let spec = DeviceSpec {
            transmons: self
                .transmons
                .iter()
                .map(|t| TransmonSpec {
                    charging_energy: t.ec_ghz,
                    josephson_energy: t.ej_ghz,
                    charge_cutoff: self.charge_cutoff,
                    kept_levels: self.transmon_levels,
                })
                .collect(),
            resonator: ResonatorSpec {
                frequency: self.resonator.omega_ghz,
                kept_levels: self.resonator.levels,
            },
            couplings: self.couplings_ghz.clone(),
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Sign-fixing rule applied to eigenvectors before projecting the charge operator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GaugeConvention {
    /// Largest-magnitude charge component made real and positive. Components within
    /// `1e-9` (relative) of the maximum count as tied, and the lowest charge index wins.
    LargestComponentPositive,
}

#[derive(Debug, Clone)]
pub struct EigenSolution {
    /// Level energies relative to the ground state, GHz, ascending.
    pub energies: Vec<f64>,
    /// `⟨m|n̂|m'⟩` in the kept eigenbasis. Real under the gauge convention.
    pub charge_matrix: DMatrix<f64>,
    pub gauge: GaugeConvention,
}

impl EigenSolution {
    pub fn levels(&self) -> usize {
        self.energies.len()
    }

    pub fn qubit_frequency(&self) -> f64 {
        self.energies[1] - self.energies[0]
    }

    /// `(E2 − E1) − (E1 − E0)`; needs at least three levels.
    pub fn anharmonicity(&self) -> Result<f64> {
        if self.energies.len() < 3 {
            return Err(Error::invalid("anharmonicity needs at least three kept levels"));
        }
        let e = &self.energies;
        Ok((e[2] - e[1]) - (e[1] - e[0]))
    }
}

/// Charge-basis transmon Hamiltonian at zero gate offset: `4E_C n²` on the diagonal and
/// `−E_J/2` linking neighbouring charge states.
pub fn charge_hamiltonian(spec: &TransmonSpec) -> DMatrix<f64> {
    let dim = spec.charge_dim();
    let nc = spec.charge_cutoff as f64;
    let mut h = DMatrix::zeros(dim, dim);
    for i in 0..dim {
        let n = i as f64 - nc;
        h[(i, i)] = 4.0 * spec.charging_energy * n * n;
        if i + 1 < dim {
            h[(i, i + 1)] = -0.5 * spec.josephson_energy;
            h[(i + 1, i)] = -0.5 * spec.josephson_energy;
        }
    }
    h
}

pub fn diagonalize_transmon(spec: &TransmonSpec) -> Result<EigenSolution> {
    spec.validate()?;
    let dim = spec.charge_dim();
    let h = charge_hamiltonian(spec);
    let eig = h
        .try_symmetric_eigen(1e-15, 10_000)
        .ok_or(Error::Eigensolver { dim })?;

    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let kept = spec.kept_levels;
    let e0 = eig.eigenvalues[order[0]];
    let energies: Vec<f64> = order[..kept].iter().map(|&k| eig.eigenvalues[k] - e0).collect();
    for w in energies.windows(2) {
        // Degenerate kept levels (E_J = 0) are fine; out-of-order ones are not.
        if w[1] < w[0] {
            return Err(Error::Eigensolver { dim });
        }
    }

    let mut vectors = DMatrix::<f64>::zeros(dim, kept);
    for (col, &k) in order[..kept].iter().enumerate() {
        let mut v: DVector<f64> = eig.eigenvectors.column(k).into_owned();
        fix_gauge(v.as_mut_slice());
        vectors.set_column(col, &v);
    }

    let nc = spec.charge_cutoff as f64;
    let n_diag = DMatrix::from_diagonal(&DVector::from_fn(dim, |i, _| i as f64 - nc));
    let mut charge_matrix = vectors.transpose() * n_diag * &vectors;
    // Symmetrize away rounding so Hermiticity holds exactly.
    for i in 0..kept {
        for j in 0..i {
            let avg = 0.5 * (charge_matrix[(i, j)] + charge_matrix[(j, i)]);
            charge_matrix[(i, j)] = avg;
            charge_matrix[(j, i)] = avg;
        }
    }

    Ok(EigenSolution {
        energies,
        charge_matrix,
        gauge: GaugeConvention::LargestComponentPositive,
    })
}

fn fix_gauge(v: &mut [f64]) {
    let max = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let pivot = v
        .iter()
        .position(|x| x.abs() >= max * (1.0 - 1e-9))
        .unwrap_or(0);
    if v[pivot] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

pub fn qubit_frequency(sol: &EigenSolution) -> f64 {
    sol.qubit_frequency()
}

pub fn anharmonicity(sol: &EigenSolution) -> Result<f64> {
    sol.anharmonicity()
}

#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceReport {
    pub cutoffs: Vec<usize>,
    /// Kept-level energies at each cutoff.
    pub energies: Vec<Vec<f64>>,
    /// `max_m |E_m(N_{c,k+1}) − E_m(N_{c,k})|` for each successive pair.
    pub max_deltas: Vec<f64>,
}

pub fn convergence_check(spec: &TransmonSpec, cutoffs: &[usize]) -> Result<ConvergenceReport> {
    if cutoffs.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid("charge cutoffs must be strictly ascending"));
    }
    let energies = cutoffs
        .iter()
        .map(|&nc| diagonalize_transmon(&spec.with_cutoff(nc)).map(|s| s.energies))
        .collect::<Result<Vec<_>>>()?;
    let max_deltas = energies
        .windows(2)
        .map(|w| {
            w[0].iter()
                .zip(&w[1])
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max)
        })
        .collect();
    Ok(ConvergenceReport {
        cutoffs: cutoffs.to_vec(),
        energies,
        max_deltas,
    })
}

/// Bijection between flat product-space indices and `(k, m_0, m_1, ...)` labels.
///
/// The resonator occupies the slowest-varying slot, followed by transmons in order, so the
/// last transmon has stride one.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BasisIndexer {
    dims: Vec<usize>,
    strides: Vec<usize>,
    total: usize,
}

impl BasisIndexer {
    pub fn new(dims: Vec<usize>) -> Self {
        let mut strides = vec![1; dims.len()];
        for s in (0..dims.len().saturating_sub(1)).rev() {
            strides[s] = strides[s + 1] * dims[s + 1];
        }
        let total = dims.iter().product();
        BasisIndexer { dims, strides, total }
    }

    pub fn dim(&self) -> usize {
        self.total
    }

    /// Slot dimensions; slot 0 is the resonator.
    pub fn slot_dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn stride(&self, slot: usize) -> usize {
        self.strides[slot]
    }

    pub fn n_transmons(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn index(&self, labels: &[usize]) -> Option<usize> {
        if labels.len() != self.dims.len() || labels.iter().zip(&self.dims).any(|(l, d)| l >= d) {
            return None;
        }
        Some(labels.iter().zip(&self.strides).map(|(l, s)| l * s).sum())
    }

    pub fn labels(&self, index: usize) -> Vec<usize> {
        self.dims
            .iter()
            .zip(&self.strides)
            .map(|(d, s)| (index / s) % d)
            .collect()
    }

    pub fn resonator_label(&self, index: usize) -> usize {
        index / self.strides[0]
    }

    pub fn is_computational(&self, index: usize) -> bool {
        let labels = self.labels(index);
        labels[0] == 0 && labels[1..].iter().all(|&m| m < 2)
    }

    /// Computational-basis indices ordered by the transmon bitstring `m_0 m_1 …` read as a
    /// binary number, transmon 0 most significant.
    pub fn computational_indices(&self) -> Vec<usize> {
        let n = self.n_transmons();
        (0..1usize << n)
            .map(|bits| {
                let mut labels = vec![0usize];
                labels.extend((0..n).map(|i| (bits >> (n - 1 - i)) & 1));
                self.index(&labels).expect("two-level labels are always in range")
            })
            .collect()
    }

    pub fn bitstring(&self, index: usize) -> String {
        self.labels(index)[1..].iter().map(|m| m.to_string()).collect()
    }

    /// Parses `"k,m0m1m2"` (e.g. `"0,100"`) or a bare bitstring (resonator in vacuum).
    pub fn parse_label(&self, label: &str) -> Result<usize> {
        let label = label.trim().trim_start_matches('|').trim_end_matches('>');
        let (k, ms) = match label.split_once(',') {
            Some((k, ms)) => (
                k.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::invalid(format!("bad resonator label in {label:?}")))?,
                ms.trim(),
            ),
            None => (0, label),
        };
        let mut labels = vec![k];
        for ch in ms.chars() {
            labels.push(
                ch.to_digit(10)
                    .ok_or_else(|| Error::invalid(format!("bad transmon label in {label:?}")))?
                    as usize,
            );
        }
        self.index(&labels)
            .ok_or_else(|| Error::invalid(format!("label {label:?} is outside the simulation basis")))
    }
}

/// Operators of the coupled system on the truncated product eigenbasis.
#[derive(Debug, Clone)]
pub struct SystemOperators {
    pub device: DeviceSpec,
    pub indexer: BasisIndexer,
    pub transmons: Vec<EigenSolution>,
    /// Resonator level energies `ω_R k`, GHz.
    pub resonator_energies: Vec<f64>,
    /// `a + a†` in the truncated Fock basis.
    pub resonator_quadrature: DMatrix<f64>,
    /// Diagonal of the static Hamiltonian, GHz.
    pub static_diagonal: Vec<f64>,
    /// Charge operator of each transmon embedded in the product space.
    pub drive_ops: Vec<DMatrix<f64>>,
    /// `Σ_i G_i (a + a†) n̂_i`, GHz.
    pub interaction: DMatrix<f64>,
}

impl SystemOperators {
    pub fn dim(&self) -> usize {
        self.indexer.dim()
    }

    pub fn n_transmons(&self) -> usize {
        self.transmons.len()
    }

    pub fn computational_indices(&self) -> Vec<usize> {
        self.indexer.computational_indices()
    }

    /// Full static Hamiltonian `H_0 + H_int`, GHz.
    pub fn static_hamiltonian(&self) -> DMatrix<f64> {
        let mut h = self.interaction.clone();
        for (i, e) in self.static_diagonal.iter().enumerate() {
            h[(i, i)] += e;
        }
        h
    }
}

/// Kronecker product of `local` on `slot` with identities elsewhere.
pub fn embed(indexer: &BasisIndexer, slot: usize, local: &DMatrix<f64>) -> DMatrix<f64> {
    embed_pair(indexer, &[(slot, local)])
}

/// Kronecker product of several single-slot factors (distinct slots) with identities elsewhere.
pub fn embed_pair(indexer: &BasisIndexer, factors: &[(usize, &DMatrix<f64>)]) -> DMatrix<f64> {
    let dim = indexer.dim();
    let mut out = DMatrix::zeros(dim, dim);
    for row in 0..dim {
        let rl = indexer.labels(row);
        'col: for col in 0..dim {
            let cl = indexer.labels(col);
            let mut value = 1.0;
            for s in 0..rl.len() {
                match factors.iter().find(|(slot, _)| *slot == s) {
                    Some((_, m)) => value *= m[(rl[s], cl[s])],
                    None if rl[s] != cl[s] => continue 'col,
                    None => {}
                }
            }
            out[(row, col)] = value;
        }
    }
    out
}

pub fn build_system(device: &DeviceSpec) -> Result<SystemOperators> {
    build_system_capped(device, DEFAULT_DIMENSION_CAP)
}

pub fn build_system_capped(device: &DeviceSpec, dimension_cap: usize) -> Result<SystemOperators> {
    device.validate()?;
    let mut dims = vec![device.resonator.kept_levels];
    dims.extend(device.transmons.iter().map(|t| t.kept_levels));
    let dim = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|&d| d <= dimension_cap)
        .ok_or(Error::DimensionTooLarge {
            dims: dims.clone(),
            cap: dimension_cap,
        })?;
    let indexer = BasisIndexer::new(dims);

    let transmons = device
        .transmons
        .iter()
        .map(diagonalize_transmon)
        .collect::<Result<Vec<_>>>()?;

    let lr = device.resonator.kept_levels;
    let resonator_energies: Vec<f64> = (0..lr).map(|k| device.resonator.frequency * k as f64).collect();
    let mut quadrature = DMatrix::zeros(lr, lr);
    for k in 1..lr {
        let s = (k as f64).sqrt();
        quadrature[(k - 1, k)] = s;
        quadrature[(k, k - 1)] = s;
    }

    let static_diagonal = (0..dim)
        .map(|idx| {
            let labels = indexer.labels(idx);
            resonator_energies[labels[0]]
                + transmons
                    .iter()
                    .zip(&labels[1..])
                    .map(|(t, &m)| t.energies[m])
                    .sum::<f64>()
        })
        .collect();

    let drive_ops: Vec<DMatrix<f64>> = transmons
        .iter()
        .enumerate()
        .map(|(i, t)| embed(&indexer, i + 1, &t.charge_matrix))
        .collect();

    let mut interaction = DMatrix::zeros(dim, dim);
    for (i, t) in transmons.iter().enumerate() {
        let g = device.couplings[i];
        if g != 0.0 {
            interaction += embed_pair(&indexer, &[(0, &quadrature), (i + 1, &t.charge_matrix)]) * g;
        }
    }

    Ok(SystemOperators {
        device: device.clone(),
        indexer,
        transmons,
        resonator_energies,
        resonator_quadrature: quadrature,
        static_diagonal,
        drive_ops,
        interaction,
    })
}

/// `max |A − Aᵀ|` over entries; real operators, so this is the Hermiticity residual.
pub fn hermiticity_residual(a: &DMatrix<f64>) -> f64 {
    (a - a.transpose()).amax()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table1_t0() -> TransmonSpec {
        TransmonSpec::new(0.30783, 11.914)
    }

    /// Dense diagonalization written independently of `diagonalize_transmon`.
    fn oracle_levels(ec: f64, ej: f64, nc: usize, k: usize) -> Vec<f64> {
        let dim = 2 * nc + 1;
        let h = DMatrix::from_fn(dim, dim, |i, j| {
            if i == j {
                let n = i as f64 - nc as f64;
                4.0 * ec * n * n
            } else if i.abs_diff(j) == 1 {
                -ej / 2.0
            } else {
                0.0
            }
        });
        let mut ev: Vec<f64> = h.symmetric_eigenvalues().iter().copied().collect();
        ev.sort_by(f64::total_cmp);
        ev[..k].iter().map(|e| e - ev[0]).collect()
    }

    #[test]
    fn charging_only_spectrum() {
        let sol = diagonalize_transmon(&TransmonSpec::new(0.25, 0.0).with_cutoff(5)).unwrap();
        let expect = [0.0, 1.0, 1.0, 4.0];
        for (e, x) in sol.energies.iter().zip(expect) {
            assert!((e - x).abs() < 1e-12, "{e} vs {x}");
        }
        assert!((sol.qubit_frequency() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn table1_frequencies() {
        for (ec, ej, w) in [(0.30783, 11.914, 5.0851), (0.30902, 11.412, 4.9783), (0.31040, 10.993, 4.8895)] {
            let sol = diagonalize_transmon(&TransmonSpec::new(ec, ej)).unwrap();
            assert!((sol.qubit_frequency() - w).abs() < 0.015, "{} vs {w}", sol.qubit_frequency());
        }
    }

    #[test]
    fn anharmonicity_matches_dense_oracle() {
        let sol = diagonalize_transmon(&table1_t0()).unwrap();
        let oracle = oracle_levels(0.30783, 11.914, 60, 3);
        let alpha_oracle = (oracle[2] - oracle[1]) - (oracle[1] - oracle[0]);
        assert!((sol.anharmonicity().unwrap() - alpha_oracle).abs() < 1e-9);
        // Frozen from the N_c = 60 oracle: −0.363861 GHz, i.e. 18% beyond −E_C.
        assert!((alpha_oracle + 0.363861).abs() < 1e-6, "{alpha_oracle}");
    }

    #[test]
    fn energies_ascending_and_grounded() {
        let sol = diagonalize_transmon(&table1_t0()).unwrap();
        assert_eq!(sol.energies[0], 0.0);
        assert!(sol.energies.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn charge_matrix_structure() {
        let sol = diagonalize_transmon(&table1_t0()).unwrap();
        let n = &sol.charge_matrix;
        assert!(hermiticity_residual(n) < 1e-12);
        assert!(n[(0, 1)].abs() > n[(0, 3)].abs());
        // Parity: same-parity levels are not connected at zero offset.
        assert!(n[(0, 2)].abs() < 1e-10 && n[(1, 3)].abs() < 1e-10);
    }

    #[test]
    fn gauge_is_reproducible() {
        let a = diagonalize_transmon(&table1_t0()).unwrap();
        let b = diagonalize_transmon(&table1_t0()).unwrap();
        assert_eq!(a.charge_matrix, b.charge_matrix);
        // Odd levels tie between ±n; the lowest charge index wins, which makes n_01 < 0.
        assert!(a.charge_matrix[(0, 1)] < 0.0);
    }

    #[test]
    fn convergence_between_cutoffs() {
        let rep = convergence_check(&table1_t0(), &[10, 15, 20]).unwrap();
        assert!(rep.max_deltas[1] <= 1e-9, "{:?}", rep.max_deltas);
        // N_c = 5 leaves level 3 unconverged; the dense N_c = 60 oracle puts it 3.826 MHz off.
        let wide = convergence_check(&table1_t0(), &[5, 60]).unwrap();
        let oracle_5 = oracle_levels(0.30783, 11.914, 5, 4);
        let oracle_60 = oracle_levels(0.30783, 11.914, 60, 4);
        let oracle_delta = oracle_5.iter().zip(&oracle_60).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!((wide.max_deltas[0] - oracle_delta).abs() < 1e-9);
        assert!((oracle_delta - 3.8258e-3).abs() < 1e-6, "{oracle_delta}");
        let seven = convergence_check(&table1_t0(), &[7, 60]).unwrap();
        assert!(seven.max_deltas[0] <= 1e-6, "{:?}", seven.max_deltas);
        let exact = convergence_check(&TransmonSpec::new(0.25, 0.0), &[5, 8, 12]).unwrap();
        assert!(exact.max_deltas.iter().all(|&d| d == 0.0));
        assert!(convergence_check(&table1_t0(), &[15, 10]).is_err());
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(diagonalize_transmon(&TransmonSpec::new(-0.3, 10.0)).is_err());
        assert!(diagonalize_transmon(&TransmonSpec::new(0.3, 10.0).with_cutoff(4)).is_err());
        assert!(diagonalize_transmon(&TransmonSpec::new(0.3, 10.0).with_cutoff(5).with_levels(10)).is_err());
    }

    fn three_transmon() -> DeviceSpec {
        DeviceSpec {
            transmons: vec![
                TransmonSpec::new(0.30783, 11.914),
                TransmonSpec::new(0.30902, 11.412),
                TransmonSpec::new(0.31040, 10.993),
            ],
            resonator: ResonatorSpec { frequency: 7.0, kept_levels: 4 },
            couplings: vec![0.07; 3],
        }
    }

    #[test]
    fn indexer_is_bijective() {
        let ix = BasisIndexer::new(vec![4, 4, 4, 4]);
        for i in 0..ix.dim() {
            assert_eq!(ix.index(&ix.labels(i)), Some(i));
        }
        let comp = ix.computational_indices();
        assert_eq!(comp.len(), 8);
        assert!(comp.iter().all(|&c| ix.resonator_label(c) == 0 && ix.is_computational(c)));
        assert_eq!(ix.parse_label("0,100").unwrap(), comp[4]);
        assert_eq!(ix.bitstring(comp[4]), "100");
        assert!(ix.parse_label("0,104").is_err());
    }

    #[test]
    fn system_dimensions() {
        let ops = build_system(&three_transmon()).unwrap();
        assert_eq!(ops.dim(), 256);
        assert_eq!(ops.computational_indices().len(), 8);
        let mut two = three_transmon();
        two.transmons.truncate(2);
        two.couplings.truncate(2);
        let ops2 = build_system(&two).unwrap();
        assert_eq!(ops2.dim(), 64);
        assert_eq!(ops2.computational_indices().len(), 4);
    }

    #[test]
    fn operators_hermitian() {
        let ops = build_system(&three_transmon()).unwrap();
        assert!(hermiticity_residual(&ops.interaction) < 1e-12);
        for d in &ops.drive_ops {
            assert!(hermiticity_residual(d) < 1e-12);
        }
    }

    #[test]
    fn zero_coupling_gives_zero_interaction() {
        let ops = build_system(&three_transmon().uncoupled()).unwrap();
        assert_eq!(ops.interaction.amax(), 0.0);
        // Each slot's share of H_0 commutes with drives acting on the other slots.
        for slot in 0..3 {
            let local = DMatrix::from_diagonal(&DVector::from_vec(ops.transmons[slot].energies.clone()));
            let h_slot = embed(&ops.indexer, slot + 1, &local);
            for (i, d) in ops.drive_ops.iter().enumerate().filter(|(i, _)| *i != slot) {
                assert!((&h_slot * d - d * &h_slot).amax() < 1e-12, "slot {slot} drive {i}");
            }
        }
        let (a, b) = (&ops.drive_ops[0], &ops.drive_ops[2]);
        assert!((a * b - b * a).amax() < 1e-12);
    }

    #[test]
    fn dimension_cap_enforced() {
        assert!(matches!(
            build_system_capped(&three_transmon(), 100),
            Err(Error::DimensionTooLarge { .. })
        ));
    }

    #[test]
    fn device_file_round_trip() {
        let text = r#"{"transmons":[{"EC_GHz":0.3461,"EJ_GHz":9.9178},{"EC_GHz":0.3421,"EJ_GHz":10.9781}],
            "resonator":{"omega_GHz":7.0,"levels":4},"couplings_GHz":[0.07,0.07]}"#;
        let f = DeviceFile::from_json(text).unwrap();
        assert_eq!(f.charge_cutoff, 15);
        let again = DeviceFile::from_json(&serde_json::to_string(&f).unwrap()).unwrap();
        assert_eq!(f, again);
        assert_eq!(f.to_spec().unwrap().n_transmons(), 2);
        let err = DeviceFile::from_json("{\"transmons\": [}").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }
}
