//! Time evolution of the lab-frame Hamiltonian under a pulse program.
//!
//! The Trotter stepper works with the resonator expressed in the eigenbasis of `a + a†`.
//! In that basis `H_int` is block diagonal with blocks `x_r Σ_i G_i n̂_i`, so within a block
//! the half-interaction, the drives and the second half-interaction all commute and fuse into
//! one local matrix per transmon. Each step is then
//! `R_{1/2} · Π_i M_i(r, t̃) · R_{1/2}` where `R_{1/2}` is the free resonator half step and
//! `M_i = P_i V_i e^{-iτ(x_r G_i + c_i) ν_i} V_iᵀ P_i` with `P_i` the transmon's free half step.
//! This is the palindromic split `H_0/2, H_int/2, drives, H_int/2, H_0/2` evaluated exactly.

use std::f64::consts::TAU;
use std::path::Path;

use base64::Engine;
use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::device::SystemOperators;
use crate::error::{Error, Result};
use crate::pulse::PulseProgram;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[default]
    Trotter2,
    ExactStep,
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "trotter2" | "trotter" => Ok(Method::Trotter2),
            "exact" | "exact_step" => Ok(Method::ExactStep),
            other => Err(Error::invalid(format!("unknown method {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Frame {
    Lab,
    #[default]
    Eigen,
}

impl std::str::FromStr for Frame {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lab" => Ok(Frame::Lab),
            "eigen" | "eigenframe" => Ok(Frame::Eigen),
            other => Err(Error::invalid(format!("unknown frame {other:?}"))),
        }
    }
}

impl std::fmt::Display for Frame {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Frame::Lab => "lab",
            Frame::Eigen => "eigen",
        })
    }
}

pub const DEFAULT_EXACT_STEP_LIMIT: usize = 20_000;

#[derive(Debug, Clone, PartialEq)]
pub struct EvolutionConfig {
    /// Step τ, ns.
    pub tau_ns: f64,
    pub method: Method,
    pub frame: Frame,
    pub record_stride: usize,
    /// Initial basis columns; `None` means the computational subspace.
    pub columns: Option<Vec<usize>>,
    /// Refuse exact-step runs needing more eigendecompositions than this.
    pub exact_step_limit: usize,
    /// Test hook: scales the state by 1.001 after the given global step.
    #[doc(hidden)]
    pub corrupt_step: Option<usize>,
}

impl Default for EvolutionConfig {
    fn default() -> Self {
        EvolutionConfig {
            tau_ns: 1e-3,
            method: Method::Trotter2,
            frame: Frame::Eigen,
            record_stride: 100,
            columns: None,
            exact_step_limit: DEFAULT_EXACT_STEP_LIMIT,
            corrupt_step: None,
        }
    }
}

impl EvolutionConfig {
    pub fn with_tau(mut self, tau_ns: f64) -> Self {
        self.tau_ns = tau_ns;
        self
    }

    pub fn with_method(mut self, method: Method) -> Self {
        self.method = method;
        self
    }

    pub fn with_frame(mut self, frame: Frame) -> Self {
        self.frame = frame;
        self
    }

    pub fn with_columns(mut self, columns: Vec<usize>) -> Self {
        self.columns = Some(columns);
        self
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if !(self.tau_ns > 0.0) || !self.tau_ns.is_finite() {
            return Err(Error::invalid(format!("step {} ns must be positive", self.tau_ns)));
        }
        if self.record_stride == 0 {
            return Err(Error::invalid("record stride must be at least 1"));
        }
        if let Some(cols) = &self.columns {
            if cols.is_empty() {
                return Err(Error::invalid("no columns to propagate"));
            }
            if let Some(&c) = cols.iter().find(|&&c| c >= dim) {
                return Err(Error::invalid(format!("column {c} outside the {dim}-dim basis")));
            }
        }
        Ok(())
    }
}

/// A run of equal steps on one segment of the time grid; the last step may be shorter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepSegment {
    pub start: f64,
    pub tau: f64,
    pub steps: usize,
    pub last_tau: f64,
}

impl StepSegment {
    fn new(start: f64, end: f64, tau: f64) -> Self {
        let len = end - start;
        let steps = ((len / tau) - 1e-9).ceil().max(1.0) as usize;
        let last_tau = len - (steps - 1) as f64 * tau;
        StepSegment { start, tau, steps, last_tau }
    }

    pub fn step_tau(&self, k: usize) -> f64 {
        if k + 1 == self.steps {
            self.last_tau
        } else {
            self.tau
        }
    }

    /// Midpoint `t̃` of step `k`.
    pub fn midpoint(&self, k: usize) -> f64 {
        self.start + k as f64 * self.tau + 0.5 * self.step_tau(k)
    }

    pub fn end(&self) -> f64 {
        self.start + (self.steps - 1) as f64 * self.tau + self.last_tau
    }
}

/// Splits `[t0, t1]` at the program's tone boundaries.
pub fn time_grid(program: &PulseProgram, t0: f64, t1: f64, tau: f64) -> Vec<StepSegment> {
    let mut cuts = vec![t0];
    cuts.extend(program.breakpoints().into_iter().filter(|&b| b > t0 + 1e-12 && b < t1 - 1e-12));
    cuts.push(t1);
    cuts.windows(2)
        .filter(|w| w[1] - w[0] > 1e-12)
        .map(|w| StepSegment::new(w[0], w[1], tau))
        .collect()
}

/// Complex square matrix as separate row-major real and imaginary parts.
#[derive(Debug, Clone)]
struct CMat {
    n: usize,
    re: Vec<f64>,
    im: Vec<f64>,
}

impl CMat {
    fn zeros(n: usize) -> Self {
        CMat { n, re: vec![0.0; n * n], im: vec![0.0; n * n] }
    }

    fn real(m: &DMatrix<f64>) -> Self {
        let n = m.nrows();
        let mut out = CMat::zeros(n);
        for j in 0..n {
            for k in 0..n {
                out.re[j * n + k] = m[(j, k)];
            }
        }
        out
    }

    /// `A · diag(d) · Bᵀ` for real `A`, `B` and complex `d`.
    fn sandwich(a: &DMatrix<f64>, d: &[Complex64], b: &DMatrix<f64>) -> Self {
        let n = a.nrows();
        let mut out = CMat::zeros(n);
        for j in 0..n {
            for k in 0..n {
                let mut acc = Complex64::new(0.0, 0.0);
                for (l, dl) in d.iter().enumerate() {
                    acc += dl * (a[(j, l)] * b[(k, l)]);
                }
                out.re[j * n + k] = acc.re;
                out.im[j * n + k] = acc.im;
            }
        }
        out
    }

    /// One Newton-Schulz step `U ← U(3I − U†U)/2` toward the nearest unitary, using
    /// `g` and `out` as scratch of the same size.
    fn polish_unitary(&mut self, g: &mut CMat, out: &mut CMat) {
        let n = self.n;
        let (ur, ui) = (&self.re, &self.im);
        for j in 0..n {
            for k in j..n {
                // (U†U)_jk = Σ_l conj(U_lj) U_lk
                let (mut re, mut im) = (0.0, 0.0);
                for l in 0..n {
                    let (ar, ai) = (ur[l * n + j], -ui[l * n + j]);
                    let (br, bi) = (ur[l * n + k], ui[l * n + k]);
                    re += ar * br - ai * bi;
                    im += ar * bi + ai * br;
                }
                let diag = if j == k { 1.5 } else { 0.0 };
                g.re[j * n + k] = diag - 0.5 * re;
                g.im[j * n + k] = -0.5 * im;
                g.re[k * n + j] = diag - 0.5 * re;
                g.im[k * n + j] = 0.5 * im;
            }
        }
        for j in 0..n {
            for k in 0..n {
                let (mut re, mut im) = (0.0, 0.0);
                for l in 0..n {
                    let (ar, ai) = (ur[j * n + l], ui[j * n + l]);
                    let (br, bi) = (g.re[l * n + k], g.im[l * n + k]);
                    re += ar * br - ai * bi;
                    im += ar * bi + ai * br;
                }
                out.re[j * n + k] = re;
                out.im[j * n + k] = im;
            }
        }
        std::mem::swap(&mut self.re, &mut out.re);
        std::mem::swap(&mut self.im, &mut out.im);
    }

    fn polished(mut self, iterations: usize) -> Self {
        let (mut g, mut out) = (CMat::zeros(self.n), CMat::zeros(self.n));
        for _ in 0..iterations {
            self.polish_unitary(&mut g, &mut out);
        }
        self
    }
}

/// Column state in structure-of-arrays layout: amplitude of basis `b` in column `c` sits at
/// `b * nc + c`.
#[derive(Debug, Clone, PartialEq)]
pub struct ColumnState {
    pub dim: usize,
    pub nc: usize,
    pub re: Vec<f64>,
    pub im: Vec<f64>,
    pub columns: Vec<usize>,
    /// Current time, ns.
    pub time: f64,
    pub segments: Vec<StepSegment>,
    pub steps: usize,
}

impl ColumnState {
    pub fn basis_columns(dim: usize, columns: &[usize]) -> Self {
        let nc = columns.len();
        let mut re = vec![0.0; dim * nc];
        for (c, &b) in columns.iter().enumerate() {
            re[b * nc + c] = 1.0;
        }
        ColumnState {
            dim,
            nc,
            re,
            im: vec![0.0; dim * nc],
            columns: columns.to_vec(),
            time: 0.0,
            segments: Vec::new(),
            steps: 0,
        }
    }

    pub fn from_vector(psi: &[Complex64]) -> Self {
        ColumnState {
            dim: psi.len(),
            nc: 1,
            re: psi.iter().map(|z| z.re).collect(),
            im: psi.iter().map(|z| z.im).collect(),
            columns: Vec::new(),
            time: 0.0,
            segments: Vec::new(),
            steps: 0,
        }
    }

    pub fn amplitude(&self, basis: usize, col: usize) -> Complex64 {
        let i = basis * self.nc + col;
        Complex64::new(self.re[i], self.im[i])
    }

    pub fn column(&self, col: usize) -> Vec<Complex64> {
        (0..self.dim).map(|b| self.amplitude(b, col)).collect()
    }

    pub fn column_norms(&self) -> Vec<f64> {
        let mut acc = vec![0.0; self.nc];
        for b in 0..self.dim {
            for (c, a) in acc.iter_mut().enumerate() {
                let i = b * self.nc + c;
                *a += self.re[i] * self.re[i] + self.im[i] * self.im[i];
            }
        }
        acc.into_iter().map(f64::sqrt).collect()
    }

    fn scale(&mut self, s: f64) {
        self.re.iter_mut().chain(self.im.iter_mut()).for_each(|v| *v *= s);
    }

    /// Multiplies basis row `b` by `e^{i·phase_b}`.
    fn rotate_rows(&mut self, phases: impl Fn(usize) -> f64) {
        for b in 0..self.dim {
            let (s, c) = phases(b).sin_cos();
            for i in b * self.nc..(b + 1) * self.nc {
                let (x, y) = (self.re[i], self.im[i]);
                self.re[i] = c * x - s * y;
                self.im[i] = s * x + c * y;
            }
        }
    }

    fn to_matrix(&self) -> DMatrix<Complex64> {
        DMatrix::from_fn(self.dim, self.nc, |b, c| self.amplitude(b, c))
    }
}

/// Applies the `n × n` matrix `m` on one tensor slot (stride `stride`) over the basis range
/// `[start, end)`.
///
/// For a fixed group the `n` slot rows are contiguous runs of `stride · nc` values, so the
/// contraction runs over long unit-stride vectors.
#[allow(clippy::too_many_arguments)]
fn apply_slot(
    re: &mut [f64],
    im: &mut [f64],
    nc: usize,
    start: usize,
    end: usize,
    stride: usize,
    m: &CMat,
    scratch: &mut Vec<f64>,
) {
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma") {
            // SAFETY: the required CPU features were detected at runtime.
            unsafe { apply_slot_avx2(re, im, nc, start, end, stride, m, scratch) };
            return;
        }
    }
    apply_slot_dispatch(re, im, nc, start, end, stride, m, scratch);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
#[allow(clippy::too_many_arguments)]
unsafe fn apply_slot_avx2(
    re: &mut [f64],
    im: &mut [f64],
    nc: usize,
    start: usize,
    end: usize,
    stride: usize,
    m: &CMat,
    scratch: &mut Vec<f64>,
) {
    apply_slot_dispatch(re, im, nc, start, end, stride, m, scratch);
}

#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn apply_slot_dispatch(
    re: &mut [f64],
    im: &mut [f64],
    nc: usize,
    start: usize,
    end: usize,
    stride: usize,
    m: &CMat,
    scratch: &mut Vec<f64>,
) {
    match m.n {
        2 => apply_slot_n::<2>(re, im, nc, start, end, stride, m, scratch),
        3 => apply_slot_n::<3>(re, im, nc, start, end, stride, m, scratch),
        4 => apply_slot_n::<4>(re, im, nc, start, end, stride, m, scratch),
        5 => apply_slot_n::<5>(re, im, nc, start, end, stride, m, scratch),
        6 => apply_slot_n::<6>(re, im, nc, start, end, stride, m, scratch),
        _ => apply_slot_any(re, im, nc, start, end, stride, m, scratch),
    }
}

#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn apply_slot_n<const N: usize>(
    re: &mut [f64],
    im: &mut [f64],
    nc: usize,
    start: usize,
    end: usize,
    stride: usize,
    m: &CMat,
    scratch: &mut Vec<f64>,
) {
    let len = stride * nc;
    scratch.resize(2 * N * len, 0.0);
    let (s_re, s_im) = scratch.split_at_mut(N * len);
    let mut a = [[0.0; N]; N];
    let mut b = [[0.0; N]; N];
    for j in 0..N {
        for l in 0..N {
            a[j][l] = m.re[j * N + l];
            b[j][l] = m.im[j * N + l];
        }
    }
    let mut hi = start;
    while hi < end {
        let o = hi * nc;
        s_re[..N * len].copy_from_slice(&re[o..o + N * len]);
        s_im[..N * len].copy_from_slice(&im[o..o + N * len]);
        let xr: [&[f64]; N] = std::array::from_fn(|l| &s_re[l * len..(l + 1) * len]);
        let xi: [&[f64]; N] = std::array::from_fn(|l| &s_im[l * len..(l + 1) * len]);
        for j in 0..N {
            let d_re = &mut re[o + j * len..o + (j + 1) * len];
            let d_im = &mut im[o + j * len..o + (j + 1) * len];
            for v in 0..len {
                let mut acc_re = 0.0;
                let mut acc_im = 0.0;
                for l in 0..N {
                    acc_re += a[j][l] * xr[l][v] - b[j][l] * xi[l][v];
                    acc_im += a[j][l] * xi[l][v] + b[j][l] * xr[l][v];
                }
                d_re[v] = acc_re;
                d_im[v] = acc_im;
            }
        }
        hi += N * stride;
    }
}

#[allow(clippy::too_many_arguments)]
fn apply_slot_any(
    re: &mut [f64],
    im: &mut [f64],
    nc: usize,
    start: usize,
    end: usize,
    stride: usize,
    m: &CMat,
    scratch: &mut Vec<f64>,
) {
    let n = m.n;
    let len = stride * nc;
    scratch.resize(2 * n * len, 0.0);
    let (s_re, s_im) = scratch.split_at_mut(n * len);
    let mut hi = start;
    while hi < end {
        let o = hi * nc;
        s_re[..n * len].copy_from_slice(&re[o..o + n * len]);
        s_im[..n * len].copy_from_slice(&im[o..o + n * len]);
        for j in 0..n {
            let d_re = &mut re[o + j * len..o + (j + 1) * len];
            let d_im = &mut im[o + j * len..o + (j + 1) * len];
            d_re.fill(0.0);
            d_im.fill(0.0);
            for l in 0..n {
                let (a, b) = (m.re[j * n + l], m.im[j * n + l]);
                let x_re = &s_re[l * len..(l + 1) * len];
                let x_im = &s_im[l * len..(l + 1) * len];
                for (((dr, di), &xr), &xi) in d_re.iter_mut().zip(d_im.iter_mut()).zip(x_re).zip(x_im) {
                    *dr += a * xr - b * xi;
                    *di += a * xi + b * xr;
                }
            }
        }
        hi += n * stride;
    }
}

#[derive(Debug, Clone)]
struct LocalFactor {
    stride: usize,
    coupling: f64,
    charging_energy: f64,
    energies: Vec<f64>,
    /// Eigenvalues of the transmon charge matrix.
    nu: Vec<f64>,
    /// `n̂ = V diag(ν) Vᵀ`.
    v: DMatrix<f64>,
}

/// Device-level factorization used by the Trotter stepper.
#[derive(Debug, Clone)]
pub struct TrotterSplit {
    dim: usize,
    block: usize,
    /// Columns are the eigenvectors of `a + a†`.
    res_basis: DMatrix<f64>,
    res_x: Vec<f64>,
    res_energies: Vec<f64>,
    locals: Vec<LocalFactor>,
}

fn sorted_eigen(m: &DMatrix<f64>) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let n = m.nrows();
    let eig = m
        .clone()
        .try_symmetric_eigen(1e-15, 10_000)
        .ok_or(Error::Eigensolver { dim: n })?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let mut vectors = DMatrix::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
    // The eigensolver leaves VᵀV − I near 1e-15; applied every step that error grows
    // linearly, so polish V with Newton-Schulz steps V ← V(3I − VᵀV)/2.
    let eye = DMatrix::<f64>::identity(n, n);
    for _ in 0..3 {
        let g = vectors.transpose() * &vectors;
        vectors = &vectors * (&eye * 3.0 - g) * 0.5;
    }
    Ok((values, vectors))
}

impl TrotterSplit {
    pub fn new(ops: &SystemOperators) -> Result<Self> {
        let (res_x, res_basis) = sorted_eigen(&ops.resonator_quadrature)?;
        let mut locals = Vec::with_capacity(ops.n_transmons());
        for (i, sol) in ops.transmons.iter().enumerate() {
            let (nu, v) = sorted_eigen(&sol.charge_matrix)?;
            locals.push(LocalFactor {
                stride: ops.indexer.stride(i + 1),
                coupling: ops.device.couplings[i],
                charging_energy: ops.device.transmons[i].charging_energy,
                energies: sol.energies.clone(),
                nu,
                v,
            });
        }
        let dim = ops.dim();
        Ok(TrotterSplit {
            dim,
            block: dim / res_x.len(),
            res_basis,
            res_x,
            res_energies: ops.resonator_energies.clone(),
            locals,
        })
    }

    /// Rebuilds `H_int` from the factorization, `(U_R ⊗ ⊗V_i) Λ (U_R ⊗ ⊗V_i)ᵀ`.
    pub fn reconstruct_interaction(&self, ops: &SystemOperators) -> DMatrix<f64> {
        let idx = &ops.indexer;
        let dim = self.dim;
        let mut w = DMatrix::from_element(dim, dim, 1.0);
        let mut lambda = vec![0.0; dim];
        for col in 0..dim {
            let cl = idx.labels(col);
            lambda[col] = self.res_x[cl[0]]
                * self
                    .locals
                    .iter()
                    .enumerate()
                    .map(|(i, f)| f.coupling * f.nu[cl[i + 1]])
                    .sum::<f64>();
            for row in 0..dim {
                let rl = idx.labels(row);
                let mut v = self.res_basis[(rl[0], cl[0])];
                for (i, f) in self.locals.iter().enumerate() {
                    v *= f.v[(rl[i + 1], cl[i + 1])];
                }
                w[(row, col)] = v;
            }
        }
        let scaled = DMatrix::from_fn(dim, dim, |r, c| w[(r, c)] * lambda[c]);
        scaled * w.transpose()
    }

    fn kernel(&self, tau: f64) -> StepKernel {
        let half = |e: f64| Complex64::from_polar(1.0, -0.5 * TAU * tau * e);
        let res_half: Vec<Complex64> = self.res_energies.iter().map(|&e| half(e)).collect();
        let res_full: Vec<Complex64> = res_half.iter().map(|z| z * z).collect();
        // The free resonator step, carried into the quadrature eigenbasis.
        let ub = &self.res_basis;
        let r_half = CMat::sandwich(&ub.transpose(), &res_half, &ub.transpose()).polished(2);
        let r_full = CMat::sandwich(&ub.transpose(), &res_full, &ub.transpose()).polished(2);
        let locals = self
            .locals
            .iter()
            .map(|f| {
                let n = f.energies.len();
                let y: Vec<Complex64> = (0..n * n)
                    .map(|jl| half(f.energies[jl / n]) * f.v[(jl / n, jl % n)])
                    .collect();
                let static_phase = self
                    .res_x
                    .iter()
                    .map(|&x| f.nu.iter().map(|&nu| TAU * tau * x * f.coupling * nu).collect())
                    .collect();
                let drive_phase = f.nu.iter().map(|&nu| TAU * tau * nu).collect();
                LocalKernel {
                    yd: vec![Complex64::new(0.0, 0.0); n * n],
                    y,
                    static_phase,
                    drive_phase,
                    drive: 0.0,
                    diag: vec![Complex64::new(0.0, 0.0); n],
                    m: CMat::zeros(n),
                    scratch: (CMat::zeros(n), CMat::zeros(n)),
                }
            })
            .collect();
        StepKernel { tau, r_half, r_full, locals }
    }
}

#[derive(Debug, Clone)]
struct LocalKernel {
    /// `Y = P V`, row-major, with `P` the free half step.
    y: Vec<Complex64>,
    /// `Y diag(d)` scratch.
    yd: Vec<Complex64>,
    /// `τ·2π·x_r G ν_l` per resonator block `r` and level `l`.
    static_phase: Vec<Vec<f64>>,
    /// `τ·2π·ν_l`.
    drive_phase: Vec<f64>,
    drive: f64,
    diag: Vec<Complex64>,
    m: CMat,
    scratch: (CMat, CMat),
}

impl LocalKernel {
    fn set_drive(&mut self, drive: f64) {
        self.drive = drive;
    }

    /// Fills `m = Y diag(e^{-iφ}) Yᵀ` for resonator block `r`.
    fn build(&mut self, r: usize) {
        let n = self.drive_phase.len();
        let d = &mut self.diag;
        // One phase per level: a cached static factor would repeat its rounding every step.
        for ((dl, s), p) in d.iter_mut().zip(&self.static_phase[r]).zip(&self.drive_phase) {
            *dl = Complex64::from_polar(1.0, -(s + self.drive * p));
        }
        // Products are formed against the current phases rather than cached pairwise, so
        // their rounding does not repeat identically from step to step.
        for (yd_row, y_row) in self.yd.chunks_exact_mut(n).zip(self.y.chunks_exact(n)) {
            for ((o, y), dl) in yd_row.iter_mut().zip(y_row).zip(d.iter()) {
                *o = y * dl;
            }
        }
        for j in 0..n {
            let yj = &self.yd[j * n..(j + 1) * n];
            for k in j..n {
                let acc: Complex64 = yj.iter().zip(&self.y[k * n..(k + 1) * n]).map(|(a, b)| a * b).sum();
                self.m.re[j * n + k] = acc.re;
                self.m.im[j * n + k] = acc.im;
                self.m.re[k * n + j] = acc.re;
                self.m.im[k * n + j] = acc.im;
            }
        }
        // Rounding in `m` is dominated by the static coupling phase and so repeats almost
        // identically every step; without this the full-basis residual grows ~1e-11 per ns.
        self.m.polish_unitary(&mut self.scratch.0, &mut self.scratch.1);
    }
}

#[derive(Debug, Clone)]
struct StepKernel {
    tau: f64,
    r_half: CMat,
    r_full: CMat,
    locals: Vec<LocalKernel>,
}

/// Propagated columns of the evolution operator.
#[derive(Debug, Clone, PartialEq)]
pub struct Propagator {
    /// `D × |columns|`.
    pub matrix: DMatrix<Complex64>,
    pub columns: Vec<usize>,
    pub frame: Frame,
    pub total_time: f64,
    pub segments: Vec<StepSegment>,
    pub steps: usize,
}

impl Propagator {
    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn column_norms(&self) -> Vec<f64> {
        self.matrix.column_iter().map(|c| c.norm()).collect()
    }

    /// Re-expresses the propagator in another frame using `e^{±i·2π·H_0·T}`.
    pub fn in_frame(&self, ops: &SystemOperators, frame: Frame) -> Propagator {
        if frame == self.frame {
            return self.clone();
        }
        let sign = if frame == Frame::Eigen { 1.0 } else { -1.0 };
        let mut out = self.clone();
        for (b, mut row) in out.matrix.row_iter_mut().enumerate() {
            let ph = Complex64::from_polar(1.0, sign * TAU * ops.static_diagonal[b] * self.total_time);
            row.iter_mut().for_each(|z| *z *= ph);
        }
        out.frame = frame;
        out
    }

    /// Sub-block on rows `rows`, in column order.
    pub fn restrict(&self, rows: &[usize]) -> DMatrix<Complex64> {
        DMatrix::from_fn(rows.len(), self.columns.len(), |r, c| self.matrix[(rows[r], c)])
    }

    pub fn dump(&self) -> PropagatorDump {
        let mut bytes = Vec::with_capacity(16 * self.matrix.len());
        for z in self.matrix.iter() {
            bytes.extend_from_slice(&z.re.to_le_bytes());
            bytes.extend_from_slice(&z.im.to_le_bytes());
        }
        PropagatorDump {
            rows: self.dim(),
            columns: self.columns.clone(),
            frame: self.frame,
            total_time_ns: self.total_time,
            steps: self.steps,
            encoding: DUMP_ENCODING.into(),
            payload: base64::engine::general_purpose::STANDARD.encode(bytes),
        }
    }

    pub fn write_dump(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.dump())?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

pub const DUMP_ENCODING: &str = "base64, column-major, interleaved re/im, little-endian f64";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropagatorDump {
    pub rows: usize,
    pub columns: Vec<usize>,
    pub frame: Frame,
    pub total_time_ns: f64,
    pub steps: usize,
    pub encoding: String,
    pub payload: String,
}

impl PropagatorDump {
    pub fn matrix(&self) -> Result<DMatrix<Complex64>> {
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(&self.payload)
            .map_err(|e| Error::invalid(format!("propagator payload: {e}")))?;
        let expected = 16 * self.rows * self.columns.len();
        if bytes.len() != expected {
            return Err(Error::DimensionMismatch { expected, got: bytes.len() });
        }
        let vals: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        Ok(DMatrix::from_iterator(
            self.rows,
            self.columns.len(),
            vals.chunks_exact(2).map(|p| Complex64::new(p[0], p[1])),
        ))
    }
}

fn drive_values(split: &TrotterSplit, program: &PulseProgram, t: f64) -> Result<Vec<f64>> {
    let c: Vec<f64> = split
        .locals
        .iter()
        .enumerate()
        .map(|(i, f)| -8.0 * f.charging_energy * program.sample_offset(i, t))
        .collect();
    if c.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { t_ns: t });
    }
    Ok(c)
}

/// `run` consecutive equal steps from step `k0`, sharing merged resonator half steps.
#[allow(clippy::too_many_arguments)]
fn run_steps(
    split: &TrotterSplit,
    kernel: &mut StepKernel,
    scratch: &mut Vec<f64>,
    state: &mut ColumnState,
    program: &PulseProgram,
    seg: &StepSegment,
    k0: usize,
    run: usize,
    corrupt_step: Option<usize>,
) -> Result<()> {
    let dim = state.dim;
    let nc = state.nc;
    let block = split.block;
    debug_assert!((kernel.tau - seg.step_tau(k0 + run - 1)).abs() < 1e-15);
    apply_slot(&mut state.re, &mut state.im, nc, 0, dim, block, &kernel.r_half, scratch);
    for k in k0..k0 + run {
        let c = drive_values(split, program, seg.midpoint(k))?;
        for (lk, &ci) in kernel.locals.iter_mut().zip(&c) {
            lk.set_drive(ci);
        }
        for r in 0..split.res_x.len() {
            for (i, lk) in kernel.locals.iter_mut().enumerate() {
                lk.build(r);
                let stride = split.locals[i].stride;
                apply_slot(&mut state.re, &mut state.im, nc, r * block, (r + 1) * block, stride, &lk.m, scratch);
            }
        }
        let r_op = if k + 1 < k0 + run { &kernel.r_full } else { &kernel.r_half };
        apply_slot(&mut state.re, &mut state.im, nc, 0, dim, block, r_op, scratch);
        state.steps += 1;
        if corrupt_step == Some(state.steps) {
            state.scale(1.001);
        }
    }
    Ok(())
}

/// Real sparse matrix in compressed-row form.
#[derive(Debug, Clone)]
struct SparseReal {
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl SparseReal {
    fn from_dense(m: &DMatrix<f64>) -> Self {
        let mut out = SparseReal { indptr: vec![0], indices: Vec::new(), values: Vec::new() };
        for r in 0..m.nrows() {
            for c in 0..m.ncols() {
                if m[(r, c)] != 0.0 {
                    out.indices.push(c);
                    out.values.push(m[(r, c)]);
                }
            }
            out.indptr.push(out.indices.len());
        }
        out
    }

    /// Largest absolute row sum.
    fn norm_inf(&self) -> f64 {
        self.indptr.windows(2).map(|w| self.values[w[0]..w[1]].iter().map(|v| v.abs()).sum()).fold(0.0, f64::max)
    }

    /// `y += a · M x` for `nc`-column row-major blocks.
    fn mul_add(&self, a: f64, x: &[f64], y: &mut [f64], nc: usize) {
        for (r, w) in self.indptr.windows(2).enumerate() {
            let yr = &mut y[r * nc..(r + 1) * nc];
            for (&c, &v) in self.indices[w[0]..w[1]].iter().zip(&self.values[w[0]..w[1]]) {
                let av = a * v;
                for (o, xi) in yr.iter_mut().zip(&x[c * nc..(c + 1) * nc]) {
                    *o += av * xi;
                }
            }
        }
    }
}

/// Reference stepper: `e^{-i·2π·H·τ}` of the full midpoint Hamiltonian, summed as a Taylor
/// series to rounding level. `H` is shifted by a scalar whose phase is applied exactly, and
/// long steps are split into equal sub-steps of the same `H`.
#[derive(Debug, Clone)]
struct ExactStepper {
    h_static: SparseReal,
    drives: Vec<SparseReal>,
    shift: f64,
    static_norm: f64,
    drive_norms: Vec<f64>,
}

impl ExactStepper {
    fn new(ops: &SystemOperators) -> Self {
        let diag = &ops.static_diagonal;
        let (lo, hi) = diag.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &e| (a.min(e), b.max(e)));
        let shift = 0.5 * (lo + hi);
        let mut h = ops.static_hamiltonian();
        for i in 0..h.nrows() {
            h[(i, i)] -= shift;
        }
        let h_static = SparseReal::from_dense(&h);
        let drives: Vec<SparseReal> = ops.drive_ops.iter().map(SparseReal::from_dense).collect();
        ExactStepper {
            static_norm: h_static.norm_inf(),
            drive_norms: drives.iter().map(SparseReal::norm_inf).collect(),
            h_static,
            drives,
            shift,
        }
    }

    /// `y = H x` with the real and imaginary parts handled separately.
    fn apply(&self, c: &[f64], x: &[f64], y: &mut [f64], nc: usize) {
        y.fill(0.0);
        self.h_static.mul_add(1.0, x, y, nc);
        for (d, &ci) in self.drives.iter().zip(c) {
            if ci != 0.0 {
                d.mul_add(ci, x, y, nc);
            }
        }
    }

    fn step(&self, state: &mut ColumnState, c: &[f64], tau: f64) {
        let bound = self.static_norm + c.iter().zip(&self.drive_norms).map(|(ci, n)| ci.abs() * n).sum::<f64>();
        let subs = (TAU * tau * bound / 0.5).ceil().max(1.0) as usize;
        let theta = TAU * tau / subs as f64;
        let n = state.re.len();
        let (mut tr, mut ti) = (vec![0.0; n], vec![0.0; n]);
        let (mut hr, mut hi) = (vec![0.0; n], vec![0.0; n]);
        for _ in 0..subs {
            // term_k = (−iθH)^k x / k!, accumulated into the state.
            tr.copy_from_slice(&state.re);
            ti.copy_from_slice(&state.im);
            for k in 1..60 {
                self.apply(c, &tr, &mut hr, state.nc);
                self.apply(c, &ti, &mut hi, state.nc);
                let f = theta / k as f64;
                let mut size: f64 = 0.0;
                for j in 0..n {
                    // −i·f·(hr + i·hi) = f·hi − i·f·hr
                    tr[j] = f * hi[j];
                    ti[j] = -f * hr[j];
                    state.re[j] += tr[j];
                    state.im[j] += ti[j];
                    size = size.max(tr[j].abs()).max(ti[j].abs());
                }
                if size < 1e-18 {
                    break;
                }
            }
        }
        state.rotate_rows(|_| -TAU * tau * self.shift);
    }
}

/// Steps column states through pulse programs on one device.
pub struct Evolver<'a> {
    ops: &'a SystemOperators,
    cfg: EvolutionConfig,
    split: TrotterSplit,
    kernel: StepKernel,
    exact: Option<ExactStepper>,
    scratch: Vec<f64>,
}

impl<'a> Evolver<'a> {
    pub fn new(ops: &'a SystemOperators, cfg: EvolutionConfig) -> Result<Self> {
        cfg.validate(ops.dim())?;
        if ops.drive_ops.len() != ops.n_transmons() {
            return Err(Error::DimensionMismatch {
                expected: ops.n_transmons(),
                got: ops.drive_ops.len(),
            });
        }
        let split = TrotterSplit::new(ops)?;
        let kernel = split.kernel(cfg.tau_ns);
        let exact = (cfg.method == Method::ExactStep).then(|| ExactStepper::new(ops));
        Ok(Evolver { ops, cfg, split, kernel, exact, scratch: Vec::new() })
    }

    pub fn config(&self) -> &EvolutionConfig {
        &self.cfg
    }

    pub fn split(&self) -> &TrotterSplit {
        &self.split
    }

    pub fn columns(&self) -> Vec<usize> {
        self.cfg
            .columns
            .clone()
            .unwrap_or_else(|| self.ops.computational_indices())
    }

    pub fn initial_state(&self) -> ColumnState {
        ColumnState::basis_columns(self.ops.dim(), &self.columns())
    }

    fn check_program(&self, program: &PulseProgram) -> Result<()> {
        program.validate()?;
        if program.n_transmons() != self.ops.n_transmons() {
            return Err(Error::DimensionMismatch {
                expected: self.ops.n_transmons(),
                got: program.n_transmons(),
            });
        }
        Ok(())
    }

    /// Advances `state` from its current time to `t_end`.
    pub fn advance(&mut self, state: &mut ColumnState, program: &PulseProgram, t_end: f64) -> Result<()> {
        self.advance_recording(state, program, t_end, &mut |_: &ColumnState| {})
    }

    /// As [`Evolver::advance`], calling `record` with the product-basis lab-frame state every
    /// `record_stride` steps and at `t_end`.
    pub fn advance_recording(
        &mut self,
        state: &mut ColumnState,
        program: &PulseProgram,
        t_end: f64,
        record: &mut dyn FnMut(&ColumnState),
    ) -> Result<()> {
        self.check_program(program)?;
        if state.dim != self.ops.dim() {
            return Err(Error::DimensionMismatch { expected: self.ops.dim(), got: state.dim });
        }
        if t_end < state.time - 1e-12 || t_end > program.total_time + 1e-9 {
            return Err(Error::invalid(format!(
                "cannot advance from {} ns to {t_end} ns on a {} ns program",
                state.time, program.total_time
            )));
        }
        let grid = time_grid(program, state.time, t_end, self.cfg.tau_ns);
        if self.cfg.method == Method::ExactStep {
            let total: usize = grid.iter().map(|s| s.steps).sum();
            if total > self.cfg.exact_step_limit {
                return Err(Error::TooManySteps { steps: total, limit: self.cfg.exact_step_limit });
            }
        }
        for seg in &grid {
            match self.cfg.method {
                Method::Trotter2 => self.trotter_segment(state, program, seg, record)?,
                Method::ExactStep => self.exact_segment(state, program, seg, record)?,
            }
            state.time = seg.end();
            state.segments.push(*seg);
        }
        state.time = t_end;
        Ok(())
    }

    fn to_quadrature_basis(&mut self, state: &mut ColumnState, forward: bool) {
        let ub = &self.split.res_basis;
        let m = if forward { CMat::real(&ub.transpose()) } else { CMat::real(ub) };
        let dim = state.dim;
        apply_slot(&mut state.re, &mut state.im, state.nc, 0, dim, self.split.block, &m, &mut self.scratch);
    }

    fn trotter_segment(
        &mut self,
        state: &mut ColumnState,
        program: &PulseProgram,
        seg: &StepSegment,
        record: &mut dyn FnMut(&ColumnState),
    ) -> Result<()> {
        let stride = self.cfg.record_stride;
        self.to_quadrature_basis(state, true);
        let partial_last = seg.last_tau != seg.tau;
        let mut k = 0;
        while k < seg.steps {
            // A run of equal steps ends at the partial step, a record point or the segment end.
            let partial = partial_last && k + 1 == seg.steps;
            let mut run = (stride - state.steps % stride).min(seg.steps - k);
            if partial_last && !partial && k + run == seg.steps {
                run -= 1;
            }
            let mut partial_kernel;
            let kernel = if partial {
                partial_kernel = self.split.kernel(seg.last_tau);
                &mut partial_kernel
            } else {
                &mut self.kernel
            };
            run_steps(&self.split, kernel, &mut self.scratch, state, program, seg, k, run, self.cfg.corrupt_step)?;
            k += run;
            if state.steps % stride == 0 {
                self.to_quadrature_basis(state, false);
                state.time = if k == seg.steps { seg.end() } else { seg.start + k as f64 * seg.tau };
                record(state);
                self.to_quadrature_basis(state, true);
            }
        }
        self.to_quadrature_basis(state, false);
        Ok(())
    }

    fn exact_segment(
        &mut self,
        state: &mut ColumnState,
        program: &PulseProgram,
        seg: &StepSegment,
        record: &mut dyn FnMut(&ColumnState),
    ) -> Result<()> {
        let exact = self.exact.get_or_insert_with(|| ExactStepper::new(self.ops));
        for k in 0..seg.steps {
            let c = drive_values(&self.split, program, seg.midpoint(k))?;
            exact.step(state, &c, seg.step_tau(k));
            state.steps += 1;
            if self.cfg.corrupt_step == Some(state.steps) {
                state.scale(1.001);
            }
            if state.steps % self.cfg.record_stride == 0 {
                state.time = if k + 1 == seg.steps { seg.end() } else { seg.start + (k + 1) as f64 * seg.tau };
                record(state);
            }
        }
        Ok(())
    }

    pub fn framed(&self, state: &ColumnState) -> ColumnState {
        framed(self.ops, self.cfg.frame, state)
    }

    pub fn finish(&self, state: &ColumnState) -> Propagator {
        Propagator {
            matrix: self.framed(state).to_matrix(),
            columns: state.columns.clone(),
            frame: self.cfg.frame,
            total_time: state.time,
            segments: state.segments.clone(),
            steps: state.steps,
        }
    }
}

/// Lab-frame state converted into `frame` at its current time.
pub fn framed(ops: &SystemOperators, frame: Frame, state: &ColumnState) -> ColumnState {
    let mut out = state.clone();
    if frame == Frame::Eigen {
        let t = state.time;
        let diag = &ops.static_diagonal;
        out.rotate_rows(|b| TAU * diag[b] * t);
    }
    out
}

/// Propagates the configured columns over the whole program with the configured method.
pub fn evolve(program: &PulseProgram, ops: &SystemOperators, cfg: &EvolutionConfig) -> Result<Propagator> {
    let mut ev = Evolver::new(ops, cfg.clone())?;
    let mut state = ev.initial_state();
    ev.advance(&mut state, program, program.total_time)?;
    Ok(ev.finish(&state))
}

/// Reference propagation exponentiating the full Hamiltonian at every step midpoint.
pub fn evolve_exact_step(
    program: &PulseProgram,
    ops: &SystemOperators,
    cfg: &EvolutionConfig,
) -> Result<Propagator> {
    evolve(program, ops, &cfg.clone().with_method(Method::ExactStep))
}

/// Single-transmon observables at one sample time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransmonSample {
    pub bloch: [f64; 3],
    /// Trace of the projected computational block.
    pub block_trace: f64,
    pub leakage: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrajectoryRecord {
    pub times: Vec<f64>,
    /// `samples[k][i]`: transmon `i` at `times[k]`.
    pub samples: Vec<Vec<TransmonSample>>,
    pub resonator_excitation: Vec<f64>,
}

impl TrajectoryRecord {
    pub fn n_transmons(&self) -> usize {
        self.samples.first().map_or(0, Vec::len)
    }

    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["t_ns", "qubit", "bloch_x", "bloch_y", "bloch_z", "leak_pop", "res_excited_prob"])?;
        for ((t, row), res) in self.times.iter().zip(&self.samples).zip(&self.resonator_excitation) {
            for (q, s) in row.iter().enumerate() {
                out.write_record([
                    format!("{t:.6}"),
                    q.to_string(),
                    format!("{:.9}", s.bloch[0]),
                    format!("{:.9}", s.bloch[1]),
                    format!("{:.9}", s.bloch[2]),
                    format!("{:.9}", s.leakage),
                    format!("{res:.9}"),
                ])?;
            }
        }
        out.flush().map_err(|e| Error::io(Path::new("<trajectory csv>"), e))?;
        Ok(())
    }
}

/// Reduced density matrix of transmon `i` from one state vector.
pub fn reduced_density(ops: &SystemOperators, psi: &[Complex64], transmon: usize) -> DMatrix<Complex64> {
    let idx = &ops.indexer;
    let slot = transmon + 1;
    let n = idx.slot_dims()[slot];
    let stride = idx.stride(slot);
    let mut rho = DMatrix::zeros(n, n);
    for (b, amp) in psi.iter().enumerate() {
        if (b / stride) % n != 0 {
            continue;
        }
        for m in 0..n {
            let a = psi[b + m * stride];
            for mp in 0..n {
                rho[(m, mp)] += a * psi[b + mp * stride].conj();
            }
        }
        let _ = amp;
    }
    rho
}

pub fn transmon_sample(rho: &DMatrix<Complex64>) -> TransmonSample {
    let n = rho.nrows();
    TransmonSample {
        bloch: [2.0 * rho[(0, 1)].re, 2.0 * rho[(1, 0)].im, rho[(0, 0)].re - rho[(1, 1)].re],
        block_trace: rho[(0, 0)].re + rho[(1, 1)].re,
        leakage: (2..n).map(|l| rho[(l, l)].re).sum(),
    }
}

pub fn resonator_excitation(ops: &SystemOperators, psi: &[Complex64]) -> f64 {
    let ground: f64 = psi
        .iter()
        .enumerate()
        .filter(|(b, _)| ops.indexer.resonator_label(*b) == 0)
        .map(|(_, z)| z.norm_sqr())
        .sum();
    1.0 - ground
}

#[derive(Debug, Clone, PartialEq)]
pub enum InitialState {
    Basis(usize),
    Vector(Vec<Complex64>),
}

/// Evolves one state and samples reduced single-transmon observables along the way.
pub fn bloch_trajectory(
    program: &PulseProgram,
    ops: &SystemOperators,
    cfg: &EvolutionConfig,
    initial: &InitialState,
) -> Result<TrajectoryRecord> {
    let dim = ops.dim();
    let mut state = match initial {
        InitialState::Basis(b) if *b < dim => ColumnState::basis_columns(dim, &[*b]),
        InitialState::Basis(b) => {
            return Err(Error::invalid(format!("initial index {b} outside the {dim}-dim basis")))
        }
        InitialState::Vector(v) if v.len() == dim => {
            let norm = v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
            if !(norm > 0.0) || !norm.is_finite() {
                return Err(Error::invalid("initial state has zero or non-finite norm"));
            }
            ColumnState::from_vector(&v.iter().map(|z| z / norm).collect::<Vec<_>>())
        }
        InitialState::Vector(v) => return Err(Error::DimensionMismatch { expected: dim, got: v.len() }),
    };
    let mut ev = Evolver::new(ops, cfg.clone())?;
    let mut rec = TrajectoryRecord::default();
    let frame = cfg.frame;
    let mut sample = |s: &ColumnState| {
        let psi = framed(ops, frame, s).column(0);
        rec.times.push(s.time);
        rec.samples.push(
            (0..ops.n_transmons())
                .map(|i| transmon_sample(&reduced_density(ops, &psi, i)))
                .collect(),
        );
        rec.resonator_excitation.push(resonator_excitation(ops, &psi));
    };
    sample(&state);
    ev.advance_recording(&mut state, program, program.total_time, &mut sample)?;
    if state.steps % cfg.record_stride != 0 {
        sample(&state);
    }
    Ok(rec)
}

/// `‖U†U − I‖_F` of the full-basis propagator.
pub fn unitarity_probe(program: &PulseProgram, ops: &SystemOperators, cfg: &EvolutionConfig) -> Result<f64> {
    let cfg = cfg.clone().with_columns((0..ops.dim()).collect());
    let u = evolve(program, ops, &cfg)?.matrix;
    let g = u.adjoint() * &u;
    Ok((g - DMatrix::<Complex64>::identity(ops.dim(), ops.dim())).norm())
}
