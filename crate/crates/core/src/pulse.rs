//! Pulse envelopes, tone schedules and the CNOT parameter encodings.
//!
//! A channel's gate offset is the sum of its tones,
//! `n_g(t) = Σ Ω(τ)·cos(2πfτ − γ) + β·Ω'(τ)·sin(2πfτ − γ)` with tone-local time
//! `τ = t − t_0`; the quadrature term is present only on DRAG-modified tones.

use std::f64::consts::{PI, TAU};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::device::DeviceSpec;
use crate::error::{Error, Result};

/// Gaussian lifted so it vanishes at both edges and renormalized to peak `amplitude`.
/// The width is fixed at `σ = duration / 4`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianEnvelope {
    pub amplitude: f64,
    pub duration: f64,
}

impl GaussianEnvelope {
    pub fn sigma(&self) -> f64 {
        self.duration / 4.0
    }

    fn edge(&self) -> f64 {
        let s = self.sigma();
        (-self.duration * self.duration / (8.0 * s * s)).exp()
    }

    pub fn value(&self, t: f64) -> f64 {
        if !(0.0..=self.duration).contains(&t) {
            return 0.0;
        }
        let s = self.sigma();
        let x = t - self.duration / 2.0;
        let edge = self.edge();
        self.amplitude * ((-x * x / (2.0 * s * s)).exp() - edge) / (1.0 - edge)
    }

    pub fn derivative(&self, t: f64) -> f64 {
        if !(0.0..=self.duration).contains(&t) {
            return 0.0;
        }
        let s = self.sigma();
        let x = t - self.duration / 2.0;
        -self.amplitude * x / (s * s) * (-x * x / (2.0 * s * s)).exp() / (1.0 - self.edge())
    }
}

/// How the flat-top envelope's rise and fall sit relative to `T_S`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CrLayout {
    /// Plateau lasts `T_S`; the tone spans `T_S + 2·T_rise`.
    Literal,
    /// Tone spans `T_S`; rise and fall eat into it, leaving a `T_S − 2·T_rise` plateau.
    #[default]
    Inclusive,
}

impl std::str::FromStr for CrLayout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "literal" => Ok(CrLayout::Literal),
            "inclusive" => Ok(CrLayout::Inclusive),
            other => Err(Error::invalid(format!("unknown CR layout {other:?}"))),
        }
    }
}

impl std::fmt::Display for CrLayout {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CrLayout::Literal => "literal",
            CrLayout::Inclusive => "inclusive",
        })
    }
}

/// Sinusoidal flat-top: rises as `sin^q(πt / 2T_rise)`, holds, then falls as the mirror image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlatTopEnvelope {
    pub amplitude: f64,
    /// `T_S`, ns.
    pub pulse_time: f64,
    /// `T_rise / T_S`.
    pub rise_ratio: f64,
    pub shape: u32,
    pub layout: CrLayout,
}

impl FlatTopEnvelope {
    pub fn rise_time(&self) -> f64 {
        self.rise_ratio * self.pulse_time
    }

    pub fn plateau(&self) -> f64 {
        match self.layout {
            CrLayout::Literal => self.pulse_time,
            CrLayout::Inclusive => self.pulse_time - 2.0 * self.rise_time(),
        }
    }

    pub fn duration(&self) -> f64 {
        self.plateau() + 2.0 * self.rise_time()
    }

    fn shape_fn(&self, u: f64) -> f64 {
        (PI * u / (2.0 * self.rise_time())).sin().powi(self.shape as i32)
    }

    fn shape_derivative(&self, u: f64) -> f64 {
        let tr = self.rise_time();
        let arg = PI * u / (2.0 * tr);
        let q = self.shape as i32;
        q as f64 * arg.sin().powi(q - 1) * arg.cos() * PI / (2.0 * tr)
    }

    pub fn value(&self, t: f64) -> f64 {
        let tr = self.rise_time();
        let plateau = self.plateau();
        if t < 0.0 || t > plateau + 2.0 * tr {
            0.0
        } else if t < tr {
            self.amplitude * self.shape_fn(t)
        } else if t < tr + plateau {
            self.amplitude
        } else {
            self.amplitude * self.shape_fn(t - plateau)
        }
    }

    pub fn derivative(&self, t: f64) -> f64 {
        let tr = self.rise_time();
        let plateau = self.plateau();
        if t < 0.0 || t > plateau + 2.0 * tr {
            0.0
        } else if t < tr {
            self.amplitude * self.shape_derivative(t)
        } else if t < tr + plateau {
            0.0
        } else {
            self.amplitude * self.shape_derivative(t - plateau)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.pulse_time > 0.0) {
            return Err(Error::invalid("flat-top pulse time must be positive"));
        }
        if !(self.rise_ratio > 0.0 && self.rise_ratio < 0.5) {
            return Err(Error::invalid(format!(
                "rising ratio {} outside (0, 0.5)",
                self.rise_ratio
            )));
        }
        if self.shape < 1 {
            return Err(Error::invalid("shape index q must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Envelope {
    Gaussian(GaussianEnvelope),
    FlatTop(FlatTopEnvelope),
}

impl Envelope {
    pub fn value(&self, t: f64) -> f64 {
        match self {
            Envelope::Gaussian(g) => g.value(t),
            Envelope::FlatTop(f) => f.value(t),
        }
    }

    pub fn derivative(&self, t: f64) -> f64 {
        match self {
            Envelope::Gaussian(g) => g.derivative(t),
            Envelope::FlatTop(f) => f.derivative(t),
        }
    }

    pub fn duration(&self) -> f64 {
        match self {
            Envelope::Gaussian(g) => g.duration,
            Envelope::FlatTop(f) => f.duration(),
        }
    }

    pub fn peak(&self) -> f64 {
        match self {
            Envelope::Gaussian(g) => g.amplitude,
            Envelope::FlatTop(f) => f.amplitude,
        }
    }
}

/// DRAG quadrature coefficient, ns.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DragModifier {
    pub beta: f64,
}

impl DragModifier {
    /// `β = 0.5 / E_C` with `E_C` the angular charging energy `2π·ec_ghz` of the driven
    /// transmon.
    pub fn for_charging_energy(ec_ghz: f64) -> Self {
        DragModifier {
            beta: 0.5 / (TAU * ec_ghz),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tone {
    pub envelope: Envelope,
    pub drag: Option<DragModifier>,
    /// Carrier frequency, GHz.
    pub frequency: f64,
    /// Carrier phase, rad.
    pub phase: f64,
    /// Start time, ns.
    pub start: f64,
}

impl Tone {
    pub fn end(&self) -> f64 {
        self.start + self.envelope.duration()
    }

    pub fn offset(&self, t: f64) -> f64 {
        let local = t - self.start;
        if local < 0.0 || local > self.envelope.duration() {
            return 0.0;
        }
        let arg = TAU * self.frequency * local - self.phase;
        let mut v = self.envelope.value(local) * arg.cos();
        if let Some(drag) = self.drag {
            v += drag.beta * self.envelope.derivative(local) * arg.sin();
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PulseProgram {
    /// Tones per transmon, ordered by start time.
    pub channels: Vec<Vec<Tone>>,
    pub total_time: f64,
    /// Virtual-Z angle per transmon, rad.
    pub vz_angles: Vec<f64>,
    pub allow_overlap: bool,
}

impl PulseProgram {
    pub fn idle(n_transmons: usize, total_time: f64) -> Self {
        PulseProgram {
            channels: vec![Vec::new(); n_transmons],
            total_time,
            vz_angles: vec![0.0; n_transmons],
            allow_overlap: false,
        }
    }

    pub fn n_transmons(&self) -> usize {
        self.channels.len()
    }

    pub fn add_tone(&mut self, qubit: usize, tone: Tone) -> Result<()> {
        let channel = self
            .channels
            .get_mut(qubit)
            .ok_or_else(|| Error::invalid(format!("no channel for transmon {qubit}")))?;
        if !self.allow_overlap {
            if let Some(other) = channel
                .iter()
                .find(|o| tone.start < o.end() - 1e-9 && o.start < tone.end() - 1e-9)
            {
                return Err(Error::invalid(format!(
                    "tone [{}, {}] overlaps [{}, {}] on transmon {qubit}",
                    tone.start,
                    tone.end(),
                    other.start,
                    other.end()
                )));
            }
        }
        channel.push(tone);
        channel.sort_by(|a, b| a.start.total_cmp(&b.start));
        Ok(())
    }

    pub fn latest_end(&self) -> f64 {
        self.channels
            .iter()
            .flatten()
            .map(Tone::end)
            .fold(0.0, f64::max)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.total_time > 0.0) || !self.total_time.is_finite() {
            return Err(Error::invalid("program total time must be positive and finite"));
        }
        if self.latest_end() > self.total_time + 1e-9 {
            return Err(Error::invalid(format!(
                "tones end at {} ns, after the program's {} ns",
                self.latest_end(),
                self.total_time
            )));
        }
        if self.vz_angles.len() != self.channels.len() {
            return Err(Error::invalid("one virtual-Z angle per transmon required"));
        }
        Ok(())
    }

    pub fn sample_offset(&self, qubit: usize, t: f64) -> f64 {
        self.channels
            .get(qubit)
            .map(|tones| tones.iter().map(|tone| tone.offset(t)).sum())
            .unwrap_or(0.0)
    }

    /// Tone starts and ends inside `(0, total_time)`, sorted and deduplicated.
    pub fn breakpoints(&self) -> Vec<f64> {
        let mut pts: Vec<f64> = self
            .channels
            .iter()
            .flatten()
            .flat_map(|t| [t.start, t.end()])
            .filter(|&t| t > 1e-12 && t < self.total_time - 1e-12)
            .collect();
        pts.sort_by(f64::total_cmp);
        pts.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
        pts
    }

    /// Time-reversed, phase-conjugated program: `n_g'(t) = n_g(T − t)`.
    ///
    /// Mirrors each tone's start and flips the carrier so the reversed waveform is pointwise
    /// the original played backwards. Only symmetric envelopes without DRAG reverse exactly.
    pub fn time_reversed(&self) -> Result<PulseProgram> {
        let mut out = PulseProgram::idle(self.n_transmons(), self.total_time);
        out.allow_overlap = self.allow_overlap;
        for (q, tones) in self.channels.iter().enumerate() {
            for tone in tones {
                if tone.drag.is_some() {
                    return Err(Error::invalid("DRAG tones have no exact time reversal"));
                }
                let d = tone.envelope.duration();
                // cos(2πf(T' − τ) − γ) = cos(2πfτ − (2πfT' − γ)) with T' = d.
                let reversed = Tone {
                    start: self.total_time - tone.end(),
                    phase: TAU * tone.frequency * d - tone.phase,
                    ..*tone
                };
                out.add_tone(q, reversed)?;
            }
        }
        Ok(out)
    }
}

/// Asymmetric CNOT: flat-top CR tone on the control, DRAG-Gaussian auxiliary tone on the
/// target once the CR tone ends, then virtual-Z corrections.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CnotAsymParams {
    pub f1: f64,
    pub f2: f64,
    pub tx: f64,
    pub ts: f64,
    pub omega_x: f64,
    pub omega_s: f64,
    pub rho: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    pub theta: [f64; 3],
    pub q: u32,
    pub control: usize,
    pub target: usize,
    pub layout: CrLayout,
}

pub const ASYM_PARAM_NAMES: [&str; 12] = [
    "f1", "f2", "TX", "TS", "OmegaX", "OmegaS", "rho", "gamma1", "gamma2", "theta0", "theta1",
    "theta2",
];

impl CnotAsymParams {
    pub fn to_vector(&self) -> [f64; 12] {
        [
            self.f1,
            self.f2,
            self.tx,
            self.ts,
            self.omega_x,
            self.omega_s,
            self.rho,
            self.gamma1,
            self.gamma2,
            self.theta[0],
            self.theta[1],
            self.theta[2],
        ]
    }

    /// Replaces the 12 continuous parameters, keeping `q`, the qubit pair and the layout.
    pub fn with_vector(&self, x: &[f64]) -> Self {
        assert_eq!(x.len(), 12, "asymmetric CNOT parameter vector has 12 entries");
        CnotAsymParams {
            f1: x[0],
            f2: x[1],
            tx: x[2],
            ts: x[3],
            omega_x: x[4],
            omega_s: x[5],
            rho: x[6],
            gamma1: x[7],
            gamma2: x[8],
            theta: [x[9], x[10], x[11]],
            ..*self
        }
    }

    pub fn cr_envelope(&self) -> FlatTopEnvelope {
        FlatTopEnvelope {
            amplitude: self.omega_s,
            pulse_time: self.ts,
            rise_ratio: self.rho,
            shape: self.q,
            layout: self.layout,
        }
    }

    /// When the CR tone ends and the auxiliary tone starts.
    pub fn cr_end(&self) -> f64 {
        self.cr_envelope().duration()
    }

    pub fn gate_time(&self) -> f64 {
        self.cr_end() + self.tx
    }

    pub fn validate(&self, n_transmons: usize) -> Result<()> {
        if self.control == self.target || self.control >= n_transmons || self.target >= n_transmons {
            return Err(Error::invalid(format!(
                "invalid control/target pair ({}, {}) for {n_transmons} transmons",
                self.control, self.target
            )));
        }
        if !(self.tx > 0.0) {
            return Err(Error::invalid("auxiliary pulse time must be positive"));
        }
        if !(1..=2).contains(&self.q) {
            return Err(Error::invalid(format!("shape index q = {} not in {{1, 2}}", self.q)));
        }
        self.cr_envelope().validate()?;
        if self.to_vector().iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite pulse parameter"));
        }
        Ok(())
    }
}

pub fn build_asym_cnot(params: &CnotAsymParams, device: &DeviceSpec) -> Result<PulseProgram> {
    let n = device.n_transmons();
    params.validate(n)?;
    let cr = params.cr_envelope();
    let mut program = PulseProgram::idle(n, params.gate_time());
    program.add_tone(
        params.control,
        Tone {
            envelope: Envelope::FlatTop(cr),
            drag: None,
            frequency: params.f1,
            phase: params.gamma1,
            start: 0.0,
        },
    )?;
    program.add_tone(
        params.target,
        Tone {
            envelope: Envelope::Gaussian(GaussianEnvelope {
                amplitude: params.omega_x,
                duration: params.tx,
            }),
            drag: Some(DragModifier::for_charging_energy(
                device.transmons[params.target].charging_energy,
            )),
            frequency: params.f2,
            phase: params.gamma2,
            start: cr.duration(),
        },
    )?;
    program.vz_angles = params.theta[..n].to_vec();
    Ok(program)
}

/// Echoed-CR (symmetric) CNOT parameters for a two-transmon device.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EcrParams {
    /// Carrier of the control's X pulses, GHz.
    pub f_c: f64,
    /// Carrier of the CR segments and of the target pulse, GHz.
    pub f_t: f64,
    pub tx_c: f64,
    pub tx_t: f64,
    pub t_cr: f64,
    pub omega_xc: f64,
    pub omega_xt: f64,
    pub omega_cr: f64,
    pub gamma_c: [f64; 4],
    pub gamma_t: f64,
    pub theta: [f64; 2],
    pub q: u32,
    pub rho: f64,
    pub control: usize,
    pub target: usize,
    pub layout: CrLayout,
}

impl EcrParams {
    fn segment(&self) -> FlatTopEnvelope {
        FlatTopEnvelope {
            amplitude: self.omega_cr,
            pulse_time: self.t_cr / 2.0,
            rise_ratio: self.rho,
            shape: self.q,
            layout: self.layout,
        }
    }

    pub fn gate_time(&self) -> f64 {
        2.0 * self.tx_c + 2.0 * self.segment().duration() + self.tx_t
    }
}

/// Control: X, CR/2, X, CR/2; target: one closing Gaussian.
pub fn build_ecr_cnot(params: &EcrParams, device: &DeviceSpec) -> Result<PulseProgram> {
    let n = device.n_transmons();
    if n != 2 {
        return Err(Error::invalid("the echoed CNOT is defined for two-transmon devices"));
    }
    if params.control == params.target || params.control >= n || params.target >= n {
        return Err(Error::invalid("invalid control/target pair"));
    }
    if !(params.tx_c > 0.0 && params.tx_t > 0.0 && params.t_cr > 0.0) {
        return Err(Error::invalid("echoed CNOT durations must be positive"));
    }
    let seg = params.segment();
    seg.validate()?;
    let x_c = GaussianEnvelope {
        amplitude: params.omega_xc,
        duration: params.tx_c,
    };
    let drag_c = DragModifier::for_charging_energy(device.transmons[params.control].charging_energy);
    let drag_t = DragModifier::for_charging_energy(device.transmons[params.target].charging_energy);

    let mut program = PulseProgram::idle(n, params.gate_time());
    let mut t = 0.0;
    for (k, &gamma) in params.gamma_c.iter().enumerate() {
        let tone = if k % 2 == 0 {
            Tone {
                envelope: Envelope::Gaussian(x_c),
                drag: Some(drag_c),
                frequency: params.f_c,
                phase: gamma,
                start: t,
            }
        } else {
            Tone {
                envelope: Envelope::FlatTop(seg),
                drag: None,
                frequency: params.f_t,
                phase: gamma,
                start: t,
            }
        };
        t = tone.end();
        program.add_tone(params.control, tone)?;
    }
    program.add_tone(
        params.target,
        Tone {
            envelope: Envelope::Gaussian(GaussianEnvelope {
                amplitude: params.omega_xt,
                duration: params.tx_t,
            }),
            drag: Some(drag_t),
            frequency: params.f_t,
            phase: params.gamma_t,
            start: t,
        },
    )?;
    program.vz_angles = params.theta.to_vec();
    Ok(program)
}

fn default_q() -> u32 {
    2
}

fn default_ecr_rho() -> f64 {
    0.25
}

/// Asymmetric CNOT record as stored in pulse parameter files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsymRecord {
    pub gate: String,
    pub control: usize,
    pub target: usize,
    #[serde(rename = "f1_GHz")]
    pub f1_ghz: f64,
    #[serde(rename = "f2_GHz")]
    pub f2_ghz: f64,
    #[serde(rename = "TX_ns")]
    pub tx_ns: f64,
    #[serde(rename = "TS_ns")]
    pub ts_ns: f64,
    #[serde(rename = "OmegaX")]
    pub omega_x: f64,
    #[serde(rename = "OmegaS")]
    pub omega_s: f64,
    pub q: u32,
    pub rho: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    pub theta0: f64,
    pub theta1: f64,
    #[serde(default)]
    pub theta2: f64,
    #[serde(default)]
    pub cr_layout: CrLayout,
    #[serde(rename = "F_reference", default, skip_serializing_if = "Option::is_none")]
    pub f_reference: Option<f64>,
    #[serde(rename = "success_reference", default, skip_serializing_if = "Option::is_none")]
    pub success_reference: Option<f64>,
}

impl AsymRecord {
    pub fn params(&self) -> CnotAsymParams {
        CnotAsymParams {
            f1: self.f1_ghz,
            f2: self.f2_ghz,
            tx: self.tx_ns,
            ts: self.ts_ns,
            omega_x: self.omega_x,
            omega_s: self.omega_s,
            rho: self.rho,
            gamma1: self.gamma1,
            gamma2: self.gamma2,
            theta: [self.theta0, self.theta1, self.theta2],
            q: self.q,
            control: self.control,
            target: self.target,
            layout: self.cr_layout,
        }
    }

    /// Copy of this record carrying new parameter values (labels and references kept).
    pub fn with_params(&self, p: &CnotAsymParams) -> AsymRecord {
        AsymRecord {
            f1_ghz: p.f1,
            f2_ghz: p.f2,
            tx_ns: p.tx,
            ts_ns: p.ts,
            omega_x: p.omega_x,
            omega_s: p.omega_s,
            q: p.q,
            rho: p.rho,
            gamma1: p.gamma1,
            gamma2: p.gamma2,
            theta0: p.theta[0],
            theta1: p.theta[1],
            theta2: p.theta[2],
            cr_layout: p.layout,
            control: p.control,
            target: p.target,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EcrRecord {
    pub gate: String,
    pub control: usize,
    pub target: usize,
    #[serde(rename = "fC_GHz")]
    pub f_c_ghz: f64,
    #[serde(rename = "fT_GHz")]
    pub f_t_ghz: f64,
    #[serde(rename = "TXC_ns")]
    pub tx_c_ns: f64,
    #[serde(rename = "TXT_ns")]
    pub tx_t_ns: f64,
    #[serde(rename = "TCR_ns")]
    pub t_cr_ns: f64,
    #[serde(rename = "OmegaXC")]
    pub omega_xc: f64,
    #[serde(rename = "OmegaXT")]
    pub omega_xt: f64,
    #[serde(rename = "OmegaCR")]
    pub omega_cr: f64,
    #[serde(rename = "gamma1C")]
    pub gamma1_c: f64,
    #[serde(rename = "gamma2C")]
    pub gamma2_c: f64,
    #[serde(rename = "gamma3C")]
    pub gamma3_c: f64,
    #[serde(rename = "gamma4C")]
    pub gamma4_c: f64,
    #[serde(rename = "gamma1T")]
    pub gamma1_t: f64,
    pub theta0: f64,
    pub theta1: f64,
    #[serde(default = "default_q")]
    pub q: u32,
    #[serde(default = "default_ecr_rho")]
    pub rho: f64,
    #[serde(default)]
    pub cr_layout: CrLayout,
    #[serde(rename = "F_reference", default, skip_serializing_if = "Option::is_none")]
    pub f_reference: Option<f64>,
}

impl EcrRecord {
    pub fn params(&self) -> EcrParams {
        EcrParams {
            f_c: self.f_c_ghz,
            f_t: self.f_t_ghz,
            tx_c: self.tx_c_ns,
            tx_t: self.tx_t_ns,
            t_cr: self.t_cr_ns,
            omega_xc: self.omega_xc,
            omega_xt: self.omega_xt,
            omega_cr: self.omega_cr,
            gamma_c: [self.gamma1_c, self.gamma2_c, self.gamma3_c, self.gamma4_c],
            gamma_t: self.gamma1_t,
            theta: [self.theta0, self.theta1],
            q: self.q,
            rho: self.rho,
            control: self.control,
            target: self.target,
            layout: self.cr_layout,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PulseRecord {
    Asym(AsymRecord),
    Ecr(EcrRecord),
}

impl PulseRecord {
    pub fn gate(&self) -> &str {
        match self {
            PulseRecord::Asym(r) => &r.gate,
            PulseRecord::Ecr(r) => &r.gate,
        }
    }

    pub fn control_target(&self) -> (usize, usize) {
        match self {
            PulseRecord::Asym(r) => (r.control, r.target),
            PulseRecord::Ecr(r) => (r.control, r.target),
        }
    }

    pub fn f_reference(&self) -> Option<f64> {
        match self {
            PulseRecord::Asym(r) => r.f_reference,
            PulseRecord::Ecr(r) => r.f_reference,
        }
    }

    pub fn set_layout(&mut self, layout: CrLayout) {
        match self {
            PulseRecord::Asym(r) => r.cr_layout = layout,
            PulseRecord::Ecr(r) => r.cr_layout = layout,
        }
    }

    pub fn build(&self, device: &DeviceSpec) -> Result<PulseProgram> {
        match self {
            PulseRecord::Asym(r) => build_asym_cnot(&r.params(), device),
            PulseRecord::Ecr(r) => build_ecr_cnot(&r.params(), device),
        }
    }
}

pub fn parse_pulse_file(text: &str) -> Result<Vec<PulseRecord>> {
    serde_json::from_str(text).map_err(|e| Error::Parse {
        what: "pulse file".into(),
        line: e.line(),
        column: e.column(),
        msg: e.to_string(),
    })
}

pub fn load_pulse_file(path: impl AsRef<Path>) -> Result<Vec<PulseRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_pulse_file(&text)
}

/// Looks a record up by gate label; a single-record file matches any label.
pub fn find_record<'a>(records: &'a [PulseRecord], gate: Option<&str>) -> Result<&'a PulseRecord> {
    match gate {
        None if records.len() == 1 => Ok(&records[0]),
        None => Err(Error::invalid(format!(
            "pulse file holds {} records; name one with --gate",
            records.len()
        ))),
        Some(g) => records
            .iter()
            .find(|r| r.gate() == g)
            .ok_or_else(|| Error::invalid(format!("no record for gate {g:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::device::{ResonatorSpec, TransmonSpec};

    fn table1() -> DeviceSpec {
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

    fn cnot01() -> CnotAsymParams {
        CnotAsymParams {
            f1: 4.9783,
            f2: 4.9783,
            tx: 10.0,
            ts: 130.0,
            omega_x: 0.0055,
            omega_s: 0.07,
            rho: 0.25,
            gamma1: 0.0,
            gamma2: 2.2007,
            theta: [0.6959, 0.0, 0.1001],
            q: 2,
            control: 0,
            target: 1,
            layout: CrLayout::Literal,
        }
    }

    #[test]
    fn gaussian_values() {
        let g = GaussianEnvelope { amplitude: 1.0, duration: 10.0 };
        assert!((g.value(5.0) - 1.0).abs() < 1e-15);
        assert!(g.value(0.0).abs() < 1e-15 && g.value(10.0).abs() < 1e-15);
        assert_eq!(g.value(-0.1), 0.0);
        let oracle = ((-0.5f64).exp() - (-2.0f64).exp()) / (1.0 - (-2.0f64).exp());
        assert!((g.value(2.5) - oracle).abs() < 1e-15);
        assert!((oracle - 0.544946).abs() < 1e-6);
    }

    #[test]
    fn gaussian_derivative_matches_finite_difference() {
        let g = GaussianEnvelope { amplitude: 0.3, duration: 10.0 };
        for t in [0.5, 2.0, 4.9, 7.3] {
            let h = 1e-5;
            let fd = (g.value(t + h) - g.value(t - h)) / (2.0 * h);
            assert!((fd - g.derivative(t)).abs() < 1e-8);
        }
        assert_eq!(g.derivative(5.0), 0.0);
    }

    #[test]
    fn flattop_values() {
        let f = FlatTopEnvelope {
            amplitude: 0.07,
            pulse_time: 130.0,
            rise_ratio: 0.25,
            shape: 2,
            layout: CrLayout::Literal,
        };
        assert!((f.value(f.rise_time()) - 0.07).abs() < 1e-15);
        assert!((f.duration() - 195.0).abs() < 1e-12);
        let unit = FlatTopEnvelope { amplitude: 1.0, ..f };
        assert!((unit.value(unit.rise_time() / 2.0) - 0.5).abs() < 1e-14);
        let q1 = FlatTopEnvelope { shape: 1, ..unit };
        assert!((q1.value(q1.rise_time() / 3.0) - 0.5).abs() < 1e-14);
        assert_eq!(f.value(-1.0), 0.0);
        assert_eq!(f.value(196.0), 0.0);
    }

    #[test]
    fn flattop_inclusive_layout() {
        let f = FlatTopEnvelope {
            amplitude: 1.0,
            pulse_time: 100.0,
            rise_ratio: 0.2,
            shape: 1,
            layout: CrLayout::Inclusive,
        };
        assert!((f.duration() - 100.0).abs() < 1e-12);
        assert!((f.plateau() - 60.0).abs() < 1e-12);
        assert_eq!(f.value(50.0), 1.0);
        assert!(f.value(100.0).abs() < 1e-15);
        assert!((f.value(90.0) - f.value(10.0)).abs() < 1e-14);
    }

    #[test]
    fn flattop_derivative_matches_finite_difference() {
        for layout in [CrLayout::Literal, CrLayout::Inclusive] {
            let f = FlatTopEnvelope {
                amplitude: 0.05,
                pulse_time: 120.0,
                rise_ratio: 0.3,
                shape: 2,
                layout,
            };
            for t in [3.0, 20.0, 60.0, f.duration() - 5.0] {
                let h = 1e-5;
                let fd = (f.value(t + h) - f.value(t - h)) / (2.0 * h);
                assert!((fd - f.derivative(t)).abs() < 1e-9, "{layout} t={t}");
            }
        }
    }

    #[test]
    fn drag_coefficient() {
        let d = DragModifier::for_charging_energy(0.30902);
        assert!((d.beta - 0.5 / (TAU * 0.30902)).abs() < 1e-15);
    }

    #[test]
    fn sample_offset_cases() {
        let mut p = PulseProgram::idle(3, 20.0);
        assert_eq!(p.sample_offset(2, 3.0), 0.0);
        // f = 0.2 GHz puts the peak (local 5 ns) at a whole carrier period.
        p.add_tone(
            0,
            Tone {
                envelope: Envelope::Gaussian(GaussianEnvelope { amplitude: 0.4, duration: 10.0 }),
                drag: None,
                frequency: 0.2,
                phase: 0.0,
                start: 2.0,
            },
        )
        .unwrap();
        assert!((p.sample_offset(0, 7.0) - 0.4).abs() < 1e-14);
        // DRAG tone with a cosine argument of π/2 at the peak: the derivative is zero there.
        p.add_tone(
            1,
            Tone {
                envelope: Envelope::Gaussian(GaussianEnvelope { amplitude: 0.4, duration: 10.0 }),
                drag: Some(DragModifier { beta: 1.3 }),
                frequency: 0.05,
                phase: 0.0,
                start: 0.0,
            },
        )
        .unwrap();
        assert!(p.sample_offset(1, 5.0).abs() < 1e-14);
        assert!(p
            .add_tone(
                0,
                Tone {
                    envelope: Envelope::Gaussian(GaussianEnvelope { amplitude: 0.1, duration: 4.0 }),
                    drag: None,
                    frequency: 1.0,
                    phase: 0.0,
                    start: 10.0,
                },
            )
            .is_err());
    }

    #[test]
    fn asym_cnot01_program() {
        let p = build_asym_cnot(&cnot01(), &table1()).unwrap();
        assert_eq!(p.channels[0].len(), 1);
        assert_eq!(p.channels[1].len(), 1);
        assert!(p.channels[2].is_empty());
        let cr = &p.channels[0][0];
        assert_eq!(cr.frequency, 4.9783);
        assert_eq!(cr.start, 0.0);
        let aux = &p.channels[1][0];
        assert_eq!(aux.phase, 2.2007);
        assert!((aux.start - 195.0).abs() < 1e-12);
        assert!(aux.drag.is_some());
        assert_eq!(p.vz_angles, vec![0.6959, 0.0, 0.1001]);
        assert!((p.total_time - 205.0).abs() < 1e-12);
        let inc = CnotAsymParams { layout: CrLayout::Inclusive, ..cnot01() };
        let p = build_asym_cnot(&inc, &table1()).unwrap();
        assert!((p.total_time - 140.0).abs() < 1e-12);
        assert!((p.channels[1][0].start - 130.0).abs() < 1e-12);
    }

    #[test]
    fn table5_total_time() {
        let mut dev = table1();
        dev.transmons = vec![TransmonSpec::new(0.3461, 9.9178), TransmonSpec::new(0.3421, 10.9781)];
        dev.couplings = vec![0.07; 2];
        let p = CnotAsymParams {
            f1: 5.1108,
            f2: 5.1108,
            tx: 10.0,
            ts: 200.0,
            omega_x: 0.029,
            omega_s: 0.1,
            rho: 0.16,
            gamma1: 0.0,
            gamma2: -0.9425,
            theta: [1.5394, -0.0628, 0.0],
            q: 1,
            control: 0,
            target: 1,
            layout: CrLayout::Literal,
        };
        let prog = build_asym_cnot(&p, &dev).unwrap();
        assert!((prog.total_time - (200.0 + 2.0 * 0.16 * 200.0 + 10.0)).abs() < 1e-9);
        assert_eq!(prog.vz_angles.len(), 2);
    }

    #[test]
    fn zero_amplitude_program_is_silent() {
        let p = CnotAsymParams { omega_x: 0.0, omega_s: 0.0, ..cnot01() };
        let prog = build_asym_cnot(&p, &table1()).unwrap();
        for q in 0..3 {
            for k in 0..2050 {
                assert_eq!(prog.sample_offset(q, k as f64 * 0.1), 0.0);
            }
        }
    }

    #[test]
    fn invalid_pairs_rejected() {
        let p = CnotAsymParams { target: 0, ..cnot01() };
        assert!(build_asym_cnot(&p, &table1()).is_err());
        let p = CnotAsymParams { target: 3, ..cnot01() };
        assert!(build_asym_cnot(&p, &table1()).is_err());
        let p = CnotAsymParams { rho: 0.5, ..cnot01() };
        assert!(build_asym_cnot(&p, &table1()).is_err());
    }

    fn table4_row1() -> EcrParams {
        EcrParams {
            f_c: 4.8641,
            f_t: 5.1108,
            tx_c: 13.095,
            tx_t: 13.095,
            t_cr: 150.0,
            omega_xc: 0.026486,
            omega_xt: 0.01394,
            omega_cr: 0.06,
            gamma_c: [-1.5708, 3.7699, 3.1416, 0.1571],
            gamma_t: 0.0,
            theta: [0.8796, -0.0314],
            q: 2,
            rho: 0.25,
            control: 0,
            target: 1,
            layout: CrLayout::Literal,
        }
    }

    #[test]
    fn ecr_structure() {
        let mut dev = table1();
        dev.transmons.truncate(2);
        dev.couplings.truncate(2);
        let p = table4_row1();
        let prog = build_ecr_cnot(&p, &dev).unwrap();
        assert_eq!(prog.channels[0].len(), 4);
        assert_eq!(prog.channels[1].len(), 1);
        // Two X pulses, two CR halves of 75 ns plateau with 18.75 ns rise each side, target X.
        let expect = 2.0 * 13.095 + 2.0 * (75.0 + 2.0 * 18.75) + 13.095;
        assert!((prog.total_time - expect).abs() < 1e-9);
        let inc = EcrParams { layout: CrLayout::Inclusive, ..p };
        let prog = build_ecr_cnot(&inc, &dev).unwrap();
        assert!((prog.total_time - (2.0 * 13.095 + 150.0 + 13.095)).abs() < 1e-9);
        let silent = EcrParams { omega_xc: 0.0, omega_xt: 0.0, omega_cr: 0.0, ..p };
        let prog = build_ecr_cnot(&silent, &dev).unwrap();
        assert!((0..3000).all(|k| prog.sample_offset(0, k as f64 * 0.1) == 0.0));
        assert!(build_ecr_cnot(&p, &table1()).is_err());
    }

    #[test]
    fn breakpoints_and_reversal() {
        let prog = build_asym_cnot(&cnot01(), &table1()).unwrap();
        assert_eq!(prog.breakpoints(), vec![195.0]);
        let mut plain = PulseProgram::idle(1, 30.0);
        plain
            .add_tone(
                0,
                Tone {
                    envelope: Envelope::Gaussian(GaussianEnvelope { amplitude: 0.01, duration: 10.0 }),
                    drag: None,
                    frequency: 4.9,
                    phase: 0.3,
                    start: 5.0,
                },
            )
            .unwrap();
        let rev = plain.time_reversed().unwrap();
        for k in 0..300 {
            let t = k as f64 * 0.1 + 0.013;
            assert!((rev.sample_offset(0, t) - plain.sample_offset(0, 30.0 - t)).abs() < 1e-12);
        }
    }

    #[test]
    fn record_round_trip() {
        let text = r#"[{"kind":"asym","gate":"CNOT_01","control":0,"target":1,"f1_GHz":4.9783,"f2_GHz":4.9783,
            "TX_ns":10,"TS_ns":130,"OmegaX":0.0055,"OmegaS":0.07,"q":2,"rho":0.25,"gamma1":0,"gamma2":2.2007,
            "theta0":0.6959,"theta1":0,"theta2":0.1001,"cr_layout":"literal","F_reference":0.9946}]"#;
        let recs = parse_pulse_file(text).unwrap();
        assert_eq!(recs[0].gate(), "CNOT_01");
        let PulseRecord::Asym(r) = &recs[0] else { panic!() };
        assert_eq!(r.params(), cnot01());
        let again = parse_pulse_file(&serde_json::to_string(&recs).unwrap()).unwrap();
        assert_eq!(recs, again);
        assert!(find_record(&recs, Some("CNOT_10")).is_err());
        assert!(find_record(&recs, None).is_ok());
    }

    /// Leakage and 0→1 transfer error of a resonant 10 ns Gaussian π pulse with scaled DRAG.
    fn drag_pi_pulse(beta_scale: f64) -> (f64, f64) {
        let tr = TransmonSpec::new(0.3421, 10.9781).with_levels(4);
        let spec = crate::device::DeviceSpec {
            transmons: vec![tr],
            resonator: ResonatorSpec { frequency: 7.0, kept_levels: 2 },
            couplings: vec![0.0],
        };
        let ops = crate::device::build_system(&spec).unwrap();
        let w = crate::device::diagonalize_transmon(&tr).unwrap().qubit_frequency();
        let mut drag = DragModifier::for_charging_energy(tr.charging_energy);
        drag.beta *= beta_scale;
        let mut p = PulseProgram::idle(1, 10.0);
        p.add_tone(
            0,
            Tone {
                envelope: Envelope::Gaussian(GaussianEnvelope { amplitude: 0.0354, duration: 10.0 }),
                drag: Some(drag),
                frequency: w,
                phase: 0.0,
                start: 0.0,
            },
        )
        .unwrap();
        let u = crate::propagate::evolve(&p, &ops, &crate::propagate::EvolutionConfig::default().with_tau(0.002)).unwrap();
        (crate::metrics::leakage_diagnostics(&u, &ops)[0].leakage, 1.0 - u.matrix[(1, 0)].norm_sqr())
    }

    #[test]
    fn drag_sign_suppresses_leakage() {
        let (leak_plus, err_plus) = drag_pi_pulse(1.0);
        let (leak_none, err_none) = drag_pi_pulse(0.0);
        let (leak_minus, _) = drag_pi_pulse(-1.0);
        assert!(leak_plus < 0.5 * leak_none, "{leak_plus:e} vs {leak_none:e}");
        assert!(leak_plus < 0.1 * leak_minus, "{leak_plus:e} vs {leak_minus:e}");
        assert!(err_plus < err_none);
    }
}
