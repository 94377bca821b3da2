//! Master equation for networks of modulated, possibly giant and chiral atoms
//! coupled to a waveguide, plus detector qubits for frequency-filtered
//! photon correlations.
//!
//! Everything lives in the frame rotating at the drive frequency. Each leg of
//! each node couples to the left- and right-moving channels; the coherent
//! exchange and the collective decay both come from one non-Hermitian
//! single-excitation matrix
//!
//! h_eff[n][m] = offset_n δ_nm − i Σ_λ Σ_{p∈n, q∈m} √(γ_λn γ_λm) e^{−i(φ_p−φ_q)} e^{ik₀|x_p−x_q|} w_λ(p, q)
//!
//! where w_λ(p, q) is 1 when leg p lies downstream of leg q in channel λ, 1/2
//! when they coincide and 0 otherwise. Its anti-Hermitian part is
//! −(i/2) Σ_λ c_λ†c_λ with c_L = Σ e^{ik₀x}e^{iφ}σ, c_R = Σ e^{−ik₀x}e^{iφ}σ.
//!
//! Detectors are extra two-level nodes fed by the reflected (left-going)
//! light, which is split evenly between them. They are cascaded after the
//! atoms, so they never act back on the system or on each other.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::modulation::Tone;

type C = Complex64;

const ZERO: C = C::new(0.0, 0.0);
const ONE: C = C::new(1.0, 0.0);
const I: C = C::new(0.0, 1.0);

/// Largest node count for the dense density-matrix path.
pub const MAX_DENSE_NODES: usize = 6;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MasterEquationError {
    #[error("network has no atoms")]
    NoAtoms,
    #[error("atom {0} has no legs")]
    NoLegs(usize),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error(
        "decay rates must be non-negative and not both zero (gamma_L={gamma_l}, gamma_R={gamma_r})"
    )]
    BadRates { gamma_l: f64, gamma_r: f64 },
    #[error("k0 must be positive, got {0}")]
    BadWavenumber(f64),
    #[error("modulation frequency must be positive when atoms are modulated, got {0}")]
    BadFrequency(f64),
    #[error("collective decay matrix has eigenvalue {eigenvalue:.3e}")]
    NonPositiveDissipator { eigenvalue: f64 },
    #[error("time step {dt:.3e} exceeds the limit {limit:.3e}")]
    StepTooLarge { dt: f64, limit: f64 },
    #[error("initial density matrix rejected: {0}")]
    BadDensityMatrix(String),
    #[error("time grid must be non-decreasing and non-negative")]
    BadTimeGrid,
    #[error("{nodes} nodes exceed the dense limit of {limit}")]
    TooManyNodes { nodes: usize, limit: usize },
    #[error("detector coupling {coupling:.3e} exceeds {limit:.3e}")]
    DetectorTooStrong { coupling: f64, limit: f64 },
    #[error("drive |rabi|={rabi:.3e} exceeds the weak-drive bound {limit:.3e}")]
    DriveTooStrong { rabi: f64, limit: f64 },
    #[error("filtered correlations not converged: relative drift {drift:.3e}")]
    NotConverged { drift: f64 },
    #[error("singular linear system")]
    Singular,
    #[error("matrix is zero")]
    ZeroMatrix,
}

type Result<T> = std::result::Result<T, MasterEquationError>;

/// One coupling point: position and coupling phase.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Leg {
    pub x: f64,
    #[serde(default)]
    pub phi: f64,
}

/// Frequency modulation of one atom, sharing the network's fundamental Ω.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum AtomModulation {
    #[default]
    None,
    /// Δ(t) = A cos(Ωt + α).
    Tone {
        #[serde(rename = "A")]
        amplitude: f64,
        #[serde(default)]
        alpha: f64,
    },
    /// Δ(t) = Σ a_r cos(rΩt) − b_r sin(rΩt).
    Harmonics { tones: Vec<Tone> },
}

impl AtomModulation {
    pub fn detuning(&self, omega: f64, t: f64) -> f64 {
        match self {
            Self::None => 0.0,
            Self::Tone { amplitude, alpha } => amplitude * (omega * t + alpha).cos(),
            Self::Harmonics { tones } => tones
                .iter()
                .map(|tn| {
                    let x = tn.r as f64 * omega * t;
                    tn.a * x.cos() - tn.b * x.sin()
                })
                .sum(),
        }
    }

    /// Coefficients D_r of Δ(t) = Σ_r D_r e^{−irΩt} + c.c.
    pub fn fourier(&self) -> Vec<(usize, C)> {
        match self {
            Self::None => Vec::new(),
            Self::Tone { amplitude, alpha } => {
                vec![(1, C::from_polar(0.5 * amplitude, -alpha))]
            }
            Self::Harmonics { tones } => tones
                .iter()
                .map(|tn| (tn.r as usize, C::new(0.5 * tn.a, -0.5 * tn.b)))
                .collect(),
        }
    }

    fn is_active(&self) -> bool {
        !self.fourier().iter().all(|(_, d)| d.norm() == 0.0)
    }

    fn validate(&self) -> Result<()> {
        match self {
            Self::None => Ok(()),
            Self::Tone { amplitude, alpha } => {
                if amplitude.is_finite() && alpha.is_finite() {
                    Ok(())
                } else {
                    Err(MasterEquationError::NonFinite("modulation"))
                }
            }
            Self::Harmonics { tones } => {
                if tones
                    .iter()
                    .all(|t| t.r >= 1 && t.a.is_finite() && t.b.is_finite())
                {
                    Ok(())
                } else {
                    Err(MasterEquationError::NonFinite("modulation"))
                }
            }
        }
    }
}

/// An atom with one or more legs. `rabi` is Ω_n in H_d = −½(Ω_n σ_n + Ω_n* σ_n†).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AtomNode {
    pub legs: Vec<Leg>,
    #[serde(default)]
    pub modulation: AtomModulation,
    #[serde(default)]
    pub rabi: C,
}

/// `epsilon` is the drive frequency measured from ω₀.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub atoms: Vec<AtomNode>,
    #[serde(rename = "gamma_L")]
    pub gamma_l: f64,
    #[serde(rename = "gamma_R")]
    pub gamma_r: f64,
    pub k0: f64,
    #[serde(rename = "Omega", default)]
    pub omega: f64,
    #[serde(default)]
    pub epsilon: f64,
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.atoms.is_empty() {
            return Err(MasterEquationError::NoAtoms);
        }
        let (gl, gr) = (self.gamma_l, self.gamma_r);
        if !(gl.is_finite() && gr.is_finite()) || gl < 0.0 || gr < 0.0 || gl + gr == 0.0 {
            return Err(MasterEquationError::BadRates {
                gamma_l: gl,
                gamma_r: gr,
            });
        }
        if !(self.k0.is_finite() && self.k0 > 0.0) {
            return Err(MasterEquationError::BadWavenumber(self.k0));
        }
        if !self.epsilon.is_finite() {
            return Err(MasterEquationError::NonFinite("epsilon"));
        }
        for (n, atom) in self.atoms.iter().enumerate() {
            if atom.legs.is_empty() {
                return Err(MasterEquationError::NoLegs(n));
            }
            if atom
                .legs
                .iter()
                .any(|l| !l.x.is_finite() || !l.phi.is_finite())
            {
                return Err(MasterEquationError::NonFinite("legs"));
            }
            if !(atom.rabi.re.is_finite() && atom.rabi.im.is_finite()) {
                return Err(MasterEquationError::NonFinite("rabi"));
            }
            atom.modulation.validate()?;
        }
        let modulated = self.atoms.iter().any(|a| a.modulation.is_active());
        if !self.omega.is_finite() || self.omega < 0.0 || (modulated && self.omega <= 0.0) {
            return Err(MasterEquationError::BadFrequency(self.omega));
        }
        Ok(())
    }

    /// Two braided two-leg atoms with legs at 0, d, 2d, 3d (atom 1 on 0 and 2d),
    /// k₀ = 1 so that d equals the propagation phase. `phase = 0` puts every
    /// leg at one point.
    pub fn braided_pair(gamma: f64, phase: f64, phi_l: f64, phi_r: f64) -> Self {
        let d = phase;
        let atom = |a: f64, b: f64| AtomNode {
            legs: vec![Leg { x: a, phi: phi_l }, Leg { x: b, phi: phi_r }],
            modulation: AtomModulation::None,
            rabi: ZERO,
        };
        Self {
            atoms: vec![atom(0.0, 2.0 * d), atom(d, 3.0 * d)],
            gamma_l: gamma,
            gamma_r: gamma,
            k0: 1.0,
            omega: 0.0,
            epsilon: 0.0,
        }
    }

    /// Two separate two-leg atoms with legs at 0, d and 2d, 3d.
    pub fn separate_pair(gamma: f64, phase: f64, phi_l: f64, phi_r: f64) -> Self {
        let mut cfg = Self::braided_pair(gamma, phase, phi_l, phi_r);
        let d = phase;
        cfg.atoms[0].legs[1].x = d;
        cfg.atoms[1].legs[0].x = 2.0 * d;
        cfg
    }

    /// Δ₁ = A cos Ωt on the first atom and Δ_n = A cos(Ωt + α) on the others.
    pub fn with_tones(mut self, amplitude: f64, alpha: f64, omega: f64) -> Self {
        self.omega = omega;
        for (n, atom) in self.atoms.iter_mut().enumerate() {
            let a = if n == 0 { 0.0 } else { alpha };
            atom.modulation = AtomModulation::Tone {
                amplitude,
                alpha: a,
            };
        }
        self
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.epsilon = epsilon;
        self
    }

    /// Rabi frequencies of a coherent field incident from the left with
    /// amplitude √γ_R·β = `amplitude`.
    pub fn with_drive_from_left(mut self, amplitude: C) -> Self {
        let k0 = self.k0;
        for atom in &mut self.atoms {
            let sum: C = atom
                .legs
                .iter()
                .map(|l| C::from_polar(1.0, l.phi - k0 * l.x))
                .sum();
            atom.rabi = -2.0 * I * amplitude.conj() * sum;
        }
        self
    }

    pub fn without_modulation(&self) -> Self {
        let mut cfg = self.clone();
        for a in &mut cfg.atoms {
            a.modulation = AtomModulation::None;
        }
        cfg
    }

    pub fn max_rabi(&self) -> f64 {
        self.atoms.iter().map(|a| a.rabi.norm()).fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone)]
struct Node {
    legs: Vec<Leg>,
    /// Zero for system atoms, γ_d for detectors.
    detector: f64,
    offset: f64,
    modulation: AtomModulation,
    rabi: C,
}

/// A validated network, optionally extended by detector qubits.
#[derive(Debug, Clone)]
pub struct Network {
    nodes: Vec<Node>,
    k0: f64,
    omega: f64,
    gamma_l: f64,
    gamma_r: f64,
    system: usize,
}

/// Hamiltonian (Hermitian) and jump operators of the Lindblad generator.
#[derive(Debug, Clone)]
pub struct Generators {
    pub hamiltonian: DMatrix<C>,
    pub jumps: Vec<Jump>,
}

/// D[op] with prefactor `rate`.
#[derive(Debug, Clone)]
pub struct Jump {
    pub rate: f64,
    pub op: DMatrix<C>,
}

fn same_point(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 * (1.0 + a.abs().max(b.abs()))
}

impl Network {
    pub fn new(config: &NetworkConfig) -> Result<Self> {
        config.validate()?;
        let nodes = config
            .atoms
            .iter()
            .map(|a| Node {
                legs: a.legs.clone(),
                detector: 0.0,
                offset: -config.epsilon,
                modulation: a.modulation.clone(),
                rabi: a.rabi,
            })
            .collect::<Vec<_>>();
        let net = Self {
            system: nodes.len(),
            nodes,
            k0: config.k0,
            omega: config.omega,
            gamma_l: config.gamma_l,
            gamma_r: config.gamma_r,
        };
        net.check_dissipator()?;
        Ok(net)
    }

    /// Adds one detector per entry of `sidebands`, resonant with ω₀ + nΩ.
    /// The reflected channel is split evenly between the detectors, each of
    /// which absorbs from its branch with rate `coupling`; detectors are
    /// cascaded after the atoms and never see each other.
    pub fn with_detectors(
        config: &NetworkConfig,
        sidebands: &[i32],
        coupling: f64,
    ) -> Result<Self> {
        let mut net = Self::new(config)?;
        if !(coupling.is_finite() && coupling > 0.0) {
            return Err(MasterEquationError::NonFinite("detector coupling"));
        }
        for &n in sidebands {
            net.nodes.push(Node {
                legs: Vec::new(),
                detector: coupling,
                offset: n as f64 * config.omega - config.epsilon,
                modulation: AtomModulation::None,
                rabi: ZERO,
            });
        }
        if net.nodes.len() > MAX_DENSE_NODES + 2 {
            return Err(MasterEquationError::TooManyNodes {
                nodes: net.nodes.len(),
                limit: MAX_DENSE_NODES,
            });
        }
        Ok(net)
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn system_count(&self) -> usize {
        self.system
    }

    pub fn dim(&self) -> usize {
        1 << self.nodes.len()
    }

    pub fn omega(&self) -> f64 {
        self.omega
    }

    fn coupling(&self, left: bool) -> DMatrix<C> {
        let n = self.nodes.len();
        let rate = if left { self.gamma_l } else { self.gamma_r };
        DMatrix::from_fn(n, n, |a, b| {
            let (na, nb) = (&self.nodes[a], &self.nodes[b]);
            if rate == 0.0 || a >= self.system || b >= self.system {
                return ZERO;
            }
            let mut acc = ZERO;
            for p in &na.legs {
                for q in &nb.legs {
                    let w = if same_point(p.x, q.x) {
                        0.5
                    } else if left == (p.x < q.x) {
                        1.0
                    } else {
                        0.0
                    };
                    if w > 0.0 {
                        acc +=
                            w * C::from_polar(1.0, self.k0 * (p.x - q.x).abs() - (p.phi - q.phi));
                    }
                }
            }
            acc * rate
        })
    }

    /// Static single-excitation effective Hamiltonian (offsets included,
    /// modulation excluded).
    pub fn single_excitation(&self) -> DMatrix<C> {
        let k = self.coupling(true) + self.coupling(false);
        let mut h = k * (-I);
        let u = self.jump_vector(true);
        let split = self.split();
        for (n, node) in self.nodes.iter().enumerate() {
            h[(n, n)] += node.offset;
            if node.detector > 0.0 {
                h[(n, n)] -= 0.5 * I * node.detector;
                for m in 0..self.system {
                    h[(n, m)] -= I * (node.detector * split).sqrt() * u[m];
                }
            }
        }
        h
    }

    fn split(&self) -> f64 {
        let count = self.nodes.len() - self.system;
        if count == 0 {
            1.0
        } else {
            1.0 / count as f64
        }
    }

    /// Amplitudes u_λ of the system's collective jump c_λ = Σ u_λn σ_n
    /// (rates folded in, zero on detectors).
    pub fn jump_vector(&self, left: bool) -> DVector<C> {
        let sign = if left { 1.0 } else { -1.0 };
        let rate = if left { self.gamma_l } else { self.gamma_r };
        DVector::from_iterator(
            self.nodes.len(),
            self.nodes.iter().map(|node| {
                let s: C = node
                    .legs
                    .iter()
                    .map(|l| C::from_polar(1.0, sign * self.k0 * l.x + l.phi))
                    .sum();
                s * rate.sqrt()
            }),
        )
    }

    /// Output channels as (rate, jump vector): right-going, then the left-going
    /// channel or, with detectors, one branch per detector.
    fn channels(&self) -> Vec<(f64, DVector<C>)> {
        let mut out = vec![(self.gamma_r, self.jump_vector(false))];
        let u = self.jump_vector(true);
        if self.nodes.len() == self.system {
            out.push((self.gamma_l, u));
        } else {
            let split = self.split();
            for (n, node) in self.nodes.iter().enumerate().skip(self.system) {
                let mut v = &u * C::new(split.sqrt(), 0.0);
                v[n] += node.detector.sqrt();
                out.push((self.gamma_l * split, v));
            }
        }
        out.retain(|(_, v)| v.iter().any(|c| *c != ZERO));
        out
    }

    /// Γ[n][m] = Σ_channels conj(v_n) v_m.
    pub fn collective_decay(&self) -> DMatrix<C> {
        let mut g = DMatrix::zeros(self.nodes.len(), self.nodes.len());
        for (_, v) in self.channels() {
            g += v.conjugate() * v.transpose();
        }
        g
    }

    fn check_dissipator(&self) -> Result<()> {
        let eig = self.collective_decay().symmetric_eigenvalues();
        let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
        if min < -1e-9 * (self.gamma_l + self.gamma_r) {
            return Err(MasterEquationError::NonPositiveDissipator { eigenvalue: min });
        }
        Ok(())
    }

    /// Fastest collective decay rate.
    pub fn fastest_rate(&self) -> f64 {
        self.collective_decay()
            .symmetric_eigenvalues()
            .iter()
            .cloned()
            .fold(0.0, f64::max)
    }

    pub fn step_limit(&self) -> f64 {
        let mut limit = 0.02 / self.fastest_rate().max(1e-300);
        let modulated = self.nodes.iter().any(|n| n.modulation.is_active());
        if modulated {
            limit = limit.min(0.02 / self.omega);
        }
        limit
    }

    fn detunings(&self, t: f64) -> Vec<f64> {
        self.nodes
            .iter()
            .map(|n| n.modulation.detuning(self.omega, t))
            .collect()
    }

    /// σ_n on the 2^N space; bit n of the basis index marks node n excited.
    pub fn lowering(&self, n: usize) -> DMatrix<C> {
        let d = self.dim();
        let mut m = DMatrix::zeros(d, d);
        for i in 0..d {
            if i & (1 << n) != 0 {
                m[(i ^ (1 << n), i)] = ONE;
            }
        }
        m
    }

    fn many_body(&self, h: &DMatrix<C>) -> DMatrix<C> {
        let d = self.dim();
        let n = self.nodes.len();
        let mut out = DMatrix::zeros(d, d);
        for i in 0..d {
            for a in 0..n {
                for b in 0..n {
                    let hab = h[(a, b)];
                    if hab == ZERO || i & (1 << b) == 0 {
                        continue;
                    }
                    let j = i ^ (1 << b);
                    if j & (1 << a) != 0 {
                        continue;
                    }
                    out[(j | (1 << a), i)] += hab;
                }
            }
        }
        out
    }

    fn drive(&self) -> DMatrix<C> {
        let mut h = DMatrix::zeros(self.dim(), self.dim());
        for (n, node) in self.nodes.iter().enumerate() {
            if node.rabi != ZERO {
                let s = self.lowering(n);
                h -= &s * (0.5 * node.rabi) + s.adjoint() * (0.5 * node.rabi.conj());
            }
        }
        h
    }

    /// Many-body effective Hamiltonian H − (i/2)Σ L†L at zero modulation.
    fn effective_static(&self) -> DMatrix<C> {
        self.many_body(&self.single_excitation()) + self.drive()
    }

    fn jump_operators(&self) -> Vec<Jump> {
        let mut jumps = Vec::new();
        for (rate, u) in self.channels() {
            let rate = if rate > 0.0 { rate } else { 1.0 };
            let mut op = DMatrix::zeros(self.dim(), self.dim());
            for (n, un) in u.iter().enumerate() {
                if *un != ZERO {
                    op += self.lowering(n) * (*un / rate.sqrt());
                }
            }
            jumps.push(Jump { rate, op });
        }
        jumps
    }

    pub fn generators(&self, t: f64) -> Generators {
        let mut heff = self.effective_static();
        for (i, d) in self.diagonal(t).iter().enumerate() {
            heff[(i, i)] += *d;
        }
        let hamiltonian = (&heff + heff.adjoint()) * C::new(0.5, 0.0);
        Generators {
            hamiltonian,
            jumps: self.jump_operators(),
        }
    }

    fn diagonal(&self, t: f64) -> Vec<f64> {
        let det = self.detunings(t);
        (0..self.dim())
            .map(|i| {
                det.iter()
                    .enumerate()
                    .filter(|(n, _)| i & (1 << n) != 0)
                    .map(|(_, d)| d)
                    .sum()
            })
            .collect()
    }

    /// The reflected-field operator c_L restricted to system atoms.
    pub fn reflection_operator(&self) -> DMatrix<C> {
        let u = self.jump_vector(true);
        let mut op = DMatrix::zeros(self.dim(), self.dim());
        for n in 0..self.system {
            op += self.lowering(n) * (u[n] / self.gamma_l.max(1e-300).sqrt());
        }
        op
    }

    pub fn number(&self, n: usize) -> DMatrix<C> {
        let s = self.lowering(n);
        s.adjoint() * s
    }

    /// Liouvillian superoperator at time t acting on column-stacked ρ.
    pub fn liouvillian(&self, t: f64) -> DMatrix<C> {
        let d = self.dim();
        let mut heff = self.effective_static();
        for (i, x) in self.diagonal(t).iter().enumerate() {
            heff[(i, i)] += *x;
        }
        let id = DMatrix::<C>::identity(d, d);
        let mut l = id.kronecker(&(&heff * (-I))) + heff.conjugate().kronecker(&(&id * I));
        for j in self.jump_operators() {
            let op = &j.op * C::new(j.rate.sqrt(), 0.0);
            l += op.conjugate().kronecker(&op);
        }
        l
    }

    /// Steady state of the time-independent generator (modulation ignored).
    pub fn static_steady_state(&self) -> Result<DMatrix<C>> {
        let d = self.dim();
        let l = self.liouvillian(0.0);
        let svd = l.svd(false, true);
        let v_t = svd.v_t.ok_or(MasterEquationError::Singular)?;
        let (imin, _) =
            svd.singular_values
                .iter()
                .enumerate()
                .fold(
                    (0, f64::INFINITY),
                    |acc, (i, s)| if *s < acc.1 { (i, *s) } else { acc },
                );
        let v = v_t.row(imin).adjoint();
        let mut rho = DMatrix::from_column_slice(d, d, v.as_slice());
        let tr = rho.trace();
        if tr.norm() < 1e-300 {
            return Err(MasterEquationError::Singular);
        }
        rho /= tr;
        Ok((&rho + rho.adjoint()) * C::new(0.5, 0.0))
    }
}

/// Hamiltonian and jump operators of the network at time t.
pub fn build_generators(config: &NetworkConfig, t: f64) -> Result<Generators> {
    Ok(Network::new(config)?.generators(t))
}

struct Lindblad {
    heff: DMatrix<C>,
    jumps: Vec<DMatrix<C>>,
}

impl Lindblad {
    fn new(net: &Network) -> Self {
        let jumps = net
            .jump_operators()
            .into_iter()
            .map(|j| j.op * C::new(j.rate.sqrt(), 0.0))
            .collect();
        Self {
            heff: net.effective_static(),
            jumps,
        }
    }

    fn rhs(&self, diag: &[f64], rho: &DMatrix<C>) -> DMatrix<C> {
        let mut out = (rho * self.heff.adjoint() - &self.heff * rho) * I;
        let d = rho.nrows();
        for j in 0..d {
            for i in 0..d {
                out[(i, j)] -= I * (diag[i] - diag[j]) * rho[(i, j)];
            }
        }
        for l in &self.jumps {
            out += l * rho * l.adjoint();
        }
        out
    }
}

fn check_density(rho: &DMatrix<C>, dim: usize) -> Result<()> {
    if rho.nrows() != dim || rho.ncols() != dim {
        return Err(MasterEquationError::BadDensityMatrix(format!(
            "expected {dim}×{dim}, got {}×{}",
            rho.nrows(),
            rho.ncols()
        )));
    }
    let herm = (rho - rho.adjoint()).camax();
    if herm > 1e-10 {
        return Err(MasterEquationError::BadDensityMatrix(format!(
            "not Hermitian ({herm:.1e})"
        )));
    }
    let tr = rho.trace();
    if (tr - ONE).norm() > 1e-10 {
        return Err(MasterEquationError::BadDensityMatrix(format!("trace {tr}")));
    }
    let min = rho
        .symmetric_eigenvalues()
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    if min < -1e-10 {
        return Err(MasterEquationError::BadDensityMatrix(format!(
            "negative eigenvalue {min:.1e}"
        )));
    }
    Ok(())
}

/// RK4 propagation of ρ from t = 0; returns ρ at each point of `t_grid`.
pub fn evolve_network(
    net: &Network,
    rho0: &DMatrix<C>,
    t_grid: &[f64],
    dt: f64,
) -> Result<Vec<DMatrix<C>>> {
    check_density(rho0, net.dim())?;
    let limit = net.step_limit();
    if !(dt > 0.0) || dt > limit {
        return Err(MasterEquationError::StepTooLarge { dt, limit });
    }
    if t_grid.iter().any(|t| !t.is_finite() || *t < 0.0) || t_grid.windows(2).any(|w| w[1] < w[0]) {
        return Err(MasterEquationError::BadTimeGrid);
    }
    let lb = Lindblad::new(net);
    let mut rho = rho0.clone();
    let mut t = 0.0;
    let mut out = Vec::with_capacity(t_grid.len());
    for &target in t_grid {
        let span = target - t;
        if span > 0.0 {
            let steps = (span / dt).ceil() as usize;
            let h = span / steps as f64;
            for s in 0..steps {
                let t0 = t + s as f64 * h;
                rho = rk4(&lb, net, &rho, t0, h);
            }
            t = target;
        }
        out.push(rho.clone());
    }
    Ok(out)
}

fn rk4(lb: &Lindblad, net: &Network, rho: &DMatrix<C>, t: f64, h: f64) -> DMatrix<C> {
    let d0 = net.diagonal(t);
    let dm = net.diagonal(t + 0.5 * h);
    let d1 = net.diagonal(t + h);
    let hc = C::new(h, 0.0);
    let k1 = lb.rhs(&d0, rho);
    let k2 = lb.rhs(&dm, &(rho + &k1 * (hc * 0.5)));
    let k3 = lb.rhs(&dm, &(rho + &k2 * (hc * 0.5)));
    let k4 = lb.rhs(&d1, &(rho + &k3 * hc));
    rho + (k1 + (k2 + k3) * C::new(2.0, 0.0) + k4) * (hc / 6.0)
}

/// Density-matrix trajectory of the system network.
pub fn evolve(
    config: &NetworkConfig,
    rho0: &DMatrix<C>,
    t_grid: &[f64],
    dt: f64,
) -> Result<Vec<DMatrix<C>>> {
    evolve_network(&Network::new(config)?, rho0, t_grid, dt)
}

/// |0…0⟩⟨0…0| on the network's Hilbert space.
pub fn ground_state(dim: usize) -> DMatrix<C> {
    let mut rho = DMatrix::zeros(dim, dim);
    rho[(0, 0)] = ONE;
    rho
}

pub fn expectation(rho: &DMatrix<C>, op: &DMatrix<C>) -> C {
    (op * rho).trace()
}

/// ⟨c_L†c_L⟩ and ⟨c_L†c_L†c_Lc_L⟩ of the reflected field.
pub fn reflection_moments(net: &Network, rho: &DMatrix<C>) -> (f64, f64) {
    let a = net.reflection_operator();
    let n1 = a.adjoint() * &a;
    let aa = &a * &a;
    let n2 = aa.adjoint() * aa;
    (expectation(rho, &n1).re, expectation(rho, &n2).re)
}

/// Steady-state amplitudes of the weak-drive wavefunction, expanded in
/// harmonics c(t) = Σ_k c_k e^{−ikΩt}, |k| ≤ K. The vacuum amplitude is
/// taken as 1 and quantum jumps are dropped, which is exact to leading order
/// in the drive for one- and two-excitation moments.
#[derive(Debug, Clone)]
pub struct FloquetAmplitudes {
    pub harmonics: usize,
    nodes: usize,
    one: Vec<C>,
    two: Vec<C>,
    pairs: Vec<(usize, usize)>,
}

impl FloquetAmplitudes {
    fn block(&self, k: i32) -> Option<usize> {
        let kk = k + self.harmonics as i32;
        (kk >= 0 && kk <= 2 * self.harmonics as i32).then_some(kk as usize)
    }

    pub fn one(&self, node: usize, k: i32) -> C {
        self.block(k)
            .map_or(ZERO, |b| self.one[b * self.nodes + node])
    }

    pub fn two(&self, a: usize, b: usize, k: i32) -> C {
        let (a, b) = if a < b { (a, b) } else { (b, a) };
        let p = self
            .pairs
            .iter()
            .position(|&q| q == (a, b))
            .expect("pair index");
        self.block(k)
            .map_or(ZERO, |blk| self.two[blk * self.pairs.len() + p])
    }

    /// Harmonic k of ⟨σ_aσ_b⟩ − ⟨σ_a⟩⟨σ_b⟩, the part not explained by the
    /// coherent (product) component of the field.
    pub fn connected(&self, a: usize, b: usize, k: i32) -> C {
        let h = self.harmonics as i32;
        let product: C = (-h..=h).map(|j| self.one(a, j) * self.one(b, k - j)).sum();
        self.two(a, b, k) - product
    }

    /// Period-averaged ⟨σ_n†σ_n⟩.
    pub fn population(&self, node: usize) -> f64 {
        let k = self.harmonics as i32;
        (-k..=k).map(|j| self.one(node, j).norm_sqr()).sum()
    }

    /// Period-averaged ⟨σ_a†σ_b†σ_bσ_a⟩.
    pub fn pair_population(&self, a: usize, b: usize) -> f64 {
        let k = self.harmonics as i32;
        (-k..=k).map(|j| self.two(a, b, j).norm_sqr()).sum()
    }
}

fn floquet_solve(
    h: &DMatrix<C>,
    diag_mod: &[Vec<(usize, C)>],
    omega: f64,
    harmonics: usize,
    source: &[C],
) -> Result<Vec<C>> {
    let p = h.nrows();
    let nb = 2 * harmonics + 1;
    let size = p * nb;
    let mut m = DMatrix::<C>::zeros(size, size);
    let kk = harmonics as i32;
    for blk in 0..nb {
        let k = blk as i32 - kk;
        for i in 0..p {
            for j in 0..p {
                m[(blk * p + i, blk * p + j)] = h[(i, j)];
            }
            m[(blk * p + i, blk * p + i)] -= k as f64 * omega;
            for &(r, d) in &diag_mod[i] {
                let r = r as i32;
                if let Some(src) = usize::try_from(k - r + kk).ok().filter(|b| *b < nb) {
                    m[(blk * p + i, src * p + i)] += d;
                }
                if let Some(src) = usize::try_from(k + r + kk).ok().filter(|b| *b < nb) {
                    m[(blk * p + i, src * p + i)] += d.conj();
                }
            }
        }
    }
    let rhs = DVector::from_iterator(size, source.iter().map(|s| -*s));
    m.lu()
        .solve(&rhs)
        .map(|v| v.as_slice().to_vec())
        .ok_or(MasterEquationError::Singular)
}

pub fn weak_drive_floquet(net: &Network, harmonics: usize) -> Result<FloquetAmplitudes> {
    let n = net.node_count();
    let nb = 2 * harmonics + 1;
    let h = net.single_excitation();
    let mods: Vec<Vec<(usize, C)>> = net.nodes.iter().map(|nd| nd.modulation.fourier()).collect();
    let mut src1 = vec![ZERO; n * nb];
    for (i, nd) in net.nodes.iter().enumerate() {
        src1[harmonics * n + i] = -0.5 * nd.rabi.conj();
    }
    let one = floquet_solve(&h, &mods, net.omega, harmonics, &src1)?;

    let pairs: Vec<(usize, usize)> = (0..n)
        .flat_map(|a| (a + 1..n).map(move |b| (a, b)))
        .collect();
    let np = pairs.len();
    let index = |a: usize, b: usize| {
        let key = if a < b { (a, b) } else { (b, a) };
        pairs.iter().position(|&q| q == key)
    };
    let mut h2 = DMatrix::<C>::zeros(np, np);
    for (col, &(c, d)) in pairs.iter().enumerate() {
        for m in 0..n {
            if m != d {
                if let Some(row) = index(m, d) {
                    h2[(row, col)] += h[(m, c)];
                }
            }
            if m != c {
                if let Some(row) = index(c, m) {
                    h2[(row, col)] += h[(m, d)];
                }
            }
        }
    }
    let mods2: Vec<Vec<(usize, C)>> = pairs
        .iter()
        .map(|&(a, b)| {
            let mut v = mods[a].clone();
            v.extend(mods[b].iter().cloned());
            v
        })
        .collect();
    let mut src2 = vec![ZERO; np * nb];
    for blk in 0..nb {
        for (q, &(a, b)) in pairs.iter().enumerate() {
            let (ra, rb) = (net.nodes[a].rabi.conj(), net.nodes[b].rabi.conj());
            src2[blk * np + q] = -0.5 * (ra * one[blk * n + b] + rb * one[blk * n + a]);
        }
    }
    let two = if np > 0 {
        floquet_solve(&h2, &mods2, net.omega, harmonics, &src2)?
    } else {
        Vec::new()
    };
    Ok(FloquetAmplitudes {
        harmonics,
        nodes: n,
        one,
        two,
        pairs,
    })
}

/// Harmonics E1_k = ⟨0|c_L|ψ⟩_k and E2_k = ⟨0|c_L c_L|ψ⟩_k of the reflected
/// field, system atoms only.
pub fn reflection_harmonics(net: &Network, amps: &FloquetAmplitudes) -> (Vec<C>, Vec<C>) {
    let u = net.jump_vector(true) / C::new(net.gamma_l.max(1e-300).sqrt(), 0.0);
    let s = net.system_count();
    let k = amps.harmonics as i32;
    let e1 = (-k..=k)
        .map(|j| (0..s).map(|n| u[n] * amps.one(n, j)).sum())
        .collect();
    let e2 = (-k..=k)
        .map(|j| {
            let mut acc = ZERO;
            for a in 0..s {
                for b in a + 1..s {
                    acc += 2.0 * u[a] * u[b] * amps.two(a, b, j);
                }
            }
            acc
        })
        .collect();
    (e1, e2)
}

/// Detector pair at sidebands n1, n2 with left-channel coupling γ_d.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorPair {
    pub n1: i32,
    pub n2: i32,
    pub coupling: f64,
}

/// All pairs with n1, n2 ∈ [n_min, n_max].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorGrid {
    pub n_min: i32,
    pub n_max: i32,
    /// γ_d relative to γ_L + γ_R.
    #[serde(default = "default_relative_coupling")]
    pub relative_coupling: f64,
}

fn default_relative_coupling() -> f64 {
    1e-3
}

impl Default for DetectorGrid {
    fn default() -> Self {
        Self {
            n_min: -6,
            n_max: 6,
            relative_coupling: default_relative_coupling(),
        }
    }
}

impl DetectorGrid {
    pub fn sidebands(&self) -> Vec<i32> {
        (self.n_min..=self.n_max).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairCorrelation {
    pub intensity1: f64,
    pub intensity2: f64,
    pub joint: f64,
    pub g2: f64,
    /// Period-averaged connected coherence ⟨σ_D1σ_D2⟩ − ⟨σ_D1⟩⟨σ_D2⟩ in the
    /// detectors' own rotating frame. The product part is rank one and
    /// dominates for narrow detectors, so it is removed.
    pub psi: C,
}

fn auto_harmonics(config: &NetworkConfig, n1: i32, n2: i32) -> usize {
    let excursion = config
        .atoms
        .iter()
        .map(|a| {
            a.modulation
                .fourier()
                .iter()
                .map(|(r, d)| 2.0 * d.norm() / (*r as f64 * config.omega))
                .sum::<f64>()
        })
        .fold(0.0, f64::max);
    let excursion = if excursion.is_finite() {
        excursion
    } else {
        0.0
    };
    8 + (4.0 * excursion).ceil() as usize
        + (n1 + n2).unsigned_abs() as usize
        + n1.unsigned_abs().max(n2.unsigned_abs()) as usize
}

fn pair_at(
    config: &NetworkConfig,
    pair: &DetectorPair,
    harmonics: usize,
) -> Result<PairCorrelation> {
    let net = Network::with_detectors(config, &[pair.n1, pair.n2], pair.coupling)?;
    let amps = weak_drive_floquet(&net, harmonics)?;
    let (d1, d2) = (net.system_count(), net.system_count() + 1);
    let intensity1 = amps.population(d1);
    let intensity2 = amps.population(d2);
    let joint = amps.pair_population(d1, d2);
    let g2 = if intensity1 > 0.0 && intensity2 > 0.0 {
        joint / (intensity1 * intensity2)
    } else {
        0.0
    };
    let psi = amps.connected(d1, d2, pair.n1 + pair.n2);
    Ok(PairCorrelation {
        intensity1,
        intensity2,
        joint,
        g2,
        psi,
    })
}

fn check_weak(config: &NetworkConfig, coupling: f64) -> Result<()> {
    config.validate()?;
    let total = config.gamma_l + config.gamma_r;
    let limit = 1e-3 * total * (1.0 + 1e-12);
    if coupling > limit {
        return Err(MasterEquationError::DetectorTooStrong { coupling, limit });
    }
    let rabi_limit = 0.05 * config.gamma_l.max(config.gamma_r);
    if config.max_rabi() > rabi_limit * (1.0 + 1e-12) {
        return Err(MasterEquationError::DriveTooStrong {
            rabi: config.max_rabi(),
            limit: rabi_limit,
        });
    }
    Ok(())
}

/// Steady-state correlation of one detector pair, with a truncation check.
pub fn pair_correlation(config: &NetworkConfig, pair: &DetectorPair) -> Result<PairCorrelation> {
    check_weak(config, pair.coupling)?;
    let k = auto_harmonics(config, pair.n1, pair.n2);
    let a = pair_at(config, pair, k)?;
    let b = pair_at(config, pair, k + 6)?;
    let scale = a.intensity1.max(a.intensity2).max(1e-300);
    let rel = |x: f64, y: f64, floor: f64| (x - y).abs() / x.abs().max(y.abs()).max(floor);
    let drift = rel(a.intensity1, b.intensity1, 1e-9 * scale)
        .max(rel(a.intensity2, b.intensity2, 1e-9 * scale))
        .max(rel(a.joint, b.joint, 1e-9 * scale * scale));
    if drift > 1e-2 {
        return Err(MasterEquationError::NotConverged { drift });
    }
    Ok(b)
}

/// Sideband intensities, cross-correlations g2[n1][n2] and the two-colour
/// amplitude Ψ over a detector grid.
#[derive(Debug, Clone)]
pub struct FilteredCorrelations {
    pub sidebands: Vec<i32>,
    pub intensity: Vec<f64>,
    pub g2: DMatrix<f64>,
    pub psi: DMatrix<C>,
}

impl FilteredCorrelations {
    pub fn intensity_of(&self, n: i32) -> f64 {
        self.sidebands
            .iter()
            .position(|&m| m == n)
            .map_or(0.0, |i| self.intensity[i])
    }

    /// Σ_{odd n} I1 / Σ_{even n} I1.
    pub fn odd_even_ratio(&self) -> f64 {
        let (mut odd, mut even) = (0.0, 0.0);
        for (n, i) in self.sidebands.iter().zip(&self.intensity) {
            if n.rem_euclid(2) == 1 {
                odd += i;
            } else {
                even += i;
            }
        }
        odd / even
    }

    pub fn entropy(&self) -> Result<Entropy> {
        entanglement_entropy(&self.psi)
    }
}

pub fn filtered_correlations(
    config: &NetworkConfig,
    grid: &DetectorGrid,
) -> Result<FilteredCorrelations> {
    let coupling = grid.relative_coupling * (config.gamma_l + config.gamma_r);
    check_weak(config, coupling)?;
    let sidebands = grid.sidebands();
    let ns = sidebands.len();
    let jobs: Vec<(usize, usize)> = (0..ns).flat_map(|i| (i..ns).map(move |j| (i, j))).collect();
    let results = jobs
        .par_iter()
        .map(|&(i, j)| {
            let pair = DetectorPair {
                n1: sidebands[i],
                n2: sidebands[j],
                coupling,
            };
            pair_correlation(config, &pair)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut g2 = DMatrix::zeros(ns, ns);
    let mut psi = DMatrix::zeros(ns, ns);
    let mut intensity = vec![0.0; ns];
    for (&(i, j), r) in jobs.iter().zip(&results) {
        g2[(i, j)] = r.g2;
        g2[(j, i)] = r.g2;
        psi[(i, j)] = r.psi;
        psi[(j, i)] = r.psi;
        if i == j {
            intensity[i] = r.intensity1;
        }
    }
    Ok(FilteredCorrelations {
        sidebands,
        intensity,
        g2,
        psi,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Entropy {
    pub entropy: f64,
    /// e^S, the effective Schmidt rank.
    pub schmidt_rank: f64,
}

/// S = −Σ |λ|² ln|λ|² over the singular values of Ψ/‖Ψ‖.
pub fn entanglement_entropy(psi: &DMatrix<C>) -> Result<Entropy> {
    let norm = psi.norm();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(MasterEquationError::ZeroMatrix);
    }
    let sv = (psi / C::new(norm, 0.0)).singular_values();
    let entropy: f64 = sv
        .iter()
        .map(|s| s * s)
        .filter(|p| *p > 1e-300)
        .map(|p| -p * p.ln())
        .sum::<f64>()
        .max(0.0);
    Ok(Entropy {
        entropy,
        schmidt_rank: entropy.exp(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    fn single(gl: f64, gr: f64) -> NetworkConfig {
        NetworkConfig {
            atoms: vec![AtomNode {
                legs: vec![Leg { x: 0.0, phi: 0.0 }],
                modulation: AtomModulation::None,
                rabi: ZERO,
            }],
            gamma_l: gl,
            gamma_r: gr,
            k0: 1.0,
            omega: 0.0,
            epsilon: 0.0,
        }
    }

    fn pair(phase: f64) -> NetworkConfig {
        let mut cfg = single(0.5, 0.5);
        cfg.atoms.push(AtomNode {
            legs: vec![Leg { x: phase, phi: 0.0 }],
            modulation: AtomModulation::None,
            rabi: ZERO,
        });
        cfg
    }

    fn excited(dim: usize, index: usize) -> DMatrix<C> {
        let mut rho = DMatrix::zeros(dim, dim);
        rho[(index, index)] = ONE;
        rho
    }

    #[test]
    fn one_leg_decays_at_total_rate() {
        let cfg = single(0.3, 0.7);
        let g = build_generators(&cfg, 0.0).unwrap();
        assert!(g.hamiltonian.camax() < 1e-15);
        let ts = [0.5, 1.0, 2.0];
        let traj = evolve(&cfg, &excited(2, 1), &ts, 1e-3).unwrap();
        for (t, rho) in ts.iter().zip(&traj) {
            assert_relative_eq!(rho[(1, 1)].re, (-t).exp(), max_relative = 1e-9);
        }
    }

    #[test]
    fn bidirectional_form_matches_sine_cosine_kernel() {
        // giant atom plus small atom, random legs, γ_L = γ_R
        let gamma = 0.4;
        let cfg = NetworkConfig {
            atoms: vec![
                AtomNode {
                    legs: vec![Leg { x: 0.1, phi: 0.3 }, Leg { x: 1.7, phi: -0.8 }],
                    modulation: AtomModulation::None,
                    rabi: ZERO,
                },
                AtomNode {
                    legs: vec![Leg { x: 0.9, phi: 1.1 }],
                    modulation: AtomModulation::None,
                    rabi: ZERO,
                },
            ],
            gamma_l: gamma,
            gamma_r: gamma,
            k0: 2.3,
            omega: 0.0,
            epsilon: 0.0,
        };
        let net = Network::new(&cfg).unwrap();
        let h = net.single_excitation();
        let legs: Vec<(usize, Leg)> = cfg
            .atoms
            .iter()
            .enumerate()
            .flat_map(|(n, a)| a.legs.iter().map(move |l| (n, *l)))
            .collect();
        let mut coh = DMatrix::<C>::zeros(2, 2);
        let mut dis = DMatrix::<C>::zeros(2, 2);
        for (n, p) in &legs {
            for (m, q) in &legs {
                let ph = C::from_polar(1.0, -(p.phi - q.phi));
                let kx = cfg.k0 * (p.x - q.x).abs();
                coh[(*n, *m)] += ph * gamma * kx.sin();
                dis[(*n, *m)] += ph * 2.0 * gamma * kx.cos();
            }
        }
        let herm = (&h + h.adjoint()) * C::new(0.5, 0.0);
        let anti = (&h - h.adjoint()) * C::new(0.5, 0.0);
        assert!((herm - &coh).camax() < 1e-12);
        assert!((anti - &dis * C::new(0.0, -0.5)).camax() < 1e-12);
        assert!((net.collective_decay() - dis).camax() < 1e-12);
    }

    #[test]
    fn chiral_anti_hermitian_part_is_jump_sum() {
        let mut cfg = pair(0.7);
        cfg.gamma_l = 0.2;
        cfg.gamma_r = 0.9;
        cfg.atoms[0].legs.push(Leg { x: 1.3, phi: 0.4 });
        let net = Network::new(&cfg).unwrap();
        let h = net.single_excitation();
        let anti = (&h - h.adjoint()) * C::new(0.5, 0.0);
        assert!((anti - net.collective_decay() * C::new(0.0, -0.5)).camax() < 1e-12);
        let g = net.generators(0.3);
        assert!((&g.hamiltonian - g.hamiltonian.adjoint()).camax() < 1e-14);
    }

    #[test]
    fn pi_spaced_pair_has_pure_dissipative_coupling() {
        let net = Network::new(&pair(PI)).unwrap();
        let h = net.single_excitation();
        let herm = (&h + h.adjoint()) * C::new(0.5, 0.0);
        assert!(herm.camax() < 1e-12);
        let g = net.collective_decay();
        assert_relative_eq!(g[(0, 1)].re, -1.0, epsilon = 1e-12);
        let eig = g.symmetric_eigenvalues();
        let (lo, hi) = (eig.min(), eig.max());
        assert!(lo.abs() < 1e-12);
        assert_relative_eq!(hi, 2.0, epsilon = 1e-12);
    }

    #[test]
    fn braided_quarter_wave_pair_is_decoherence_free() {
        let cfg = NetworkConfig::braided_pair(1.0, PI / 2.0, 0.0, 0.0);
        let net = Network::new(&cfg).unwrap();
        let g = net.collective_decay();
        assert!(g[(0, 0)].norm() < 1e-12);
        assert!(g[(1, 1)].norm() < 1e-12);
        assert!(g.camax() < 1e-12);
        // the exchange survives
        assert!(net.single_excitation()[(0, 1)].norm() > 1.0);
    }

    #[test]
    fn colocated_symmetric_state_is_superradiant() {
        let cfg = pair(0.0);
        let net = Network::new(&cfg).unwrap();
        let mut rho = DMatrix::zeros(4, 4);
        let h = C::new(0.5, 0.0);
        for i in [1, 2] {
            for j in [1, 2] {
                rho[(i, j)] = h;
            }
        }
        let ts = [0.3, 0.8];
        let traj = evolve_network(&net, &rho, &ts, 1e-3).unwrap();
        for (t, r) in ts.iter().zip(&traj) {
            let pop = r[(1, 1)].re + r[(2, 2)].re;
            assert_relative_eq!(pop, (-2.0 * t).exp(), max_relative = 1e-8);
        }
    }

    #[test]
    fn step_guard() {
        let cfg = pair(0.0).with_tones(1.0, 0.0, 50.0);
        let net = Network::new(&cfg).unwrap();
        assert_relative_eq!(net.step_limit(), 0.02 / 50.0, max_relative = 1e-12);
        let err = evolve(&cfg, &ground_state(4), &[1.0], 1e-3).unwrap_err();
        assert!(matches!(err, MasterEquationError::StepTooLarge { .. }));
    }

    #[test]
    fn evolution_keeps_a_valid_density_matrix() {
        let cfg = NetworkConfig::braided_pair(0.5, 0.6, 0.2, 1.0)
            .with_tones(0.8, 1.0, 2.0)
            .with_drive_from_left(C::new(0.3, 0.1));
        let net = Network::new(&cfg).unwrap();
        let ts: Vec<f64> = (1..=10).map(|i| i as f64).collect();
        let traj = evolve_network(&net, &ground_state(4), &ts, 2e-3).unwrap();
        for (t, r) in ts.iter().zip(&traj) {
            assert!((r.trace() - ONE).norm() < 1e-8 * t);
            assert!((r - r.adjoint()).camax() < 1e-10);
            for i in 0..4 {
                assert!(r[(i, i)].re > -1e-9 && r[(i, i)].re < 1.0 + 1e-9);
            }
            assert!(r.symmetric_eigenvalues().min() > -1e-9);
        }
    }

    #[test]
    fn liouvillian_has_a_zero_mode() {
        let cfg = NetworkConfig::braided_pair(1.0, 0.9, 0.0, 0.0);
        let l = Network::new(&cfg).unwrap().liouvillian(0.0);
        let min = l.singular_values().min();
        assert!(min < 1e-12);
    }

    #[test]
    fn rejects_bad_configs() {
        let mut cfg = single(0.0, 0.0);
        assert!(matches!(
            cfg.validate(),
            Err(MasterEquationError::BadRates { .. })
        ));
        cfg.gamma_l = 1.0;
        cfg.atoms[0].legs.clear();
        assert_eq!(cfg.validate(), Err(MasterEquationError::NoLegs(0)));
        let rho = DMatrix::from_element(2, 2, C::new(0.5, 0.0)) * C::new(1.5, 0.0);
        let err = evolve(&single(1.0, 0.0), &rho, &[1.0], 1e-3).unwrap_err();
        assert!(matches!(err, MasterEquationError::BadDensityMatrix(_)));
    }

    #[test]
    fn toml_round_trip_rejects_unknown_keys() {
        let text = r#"
gamma_L = 1.0
gamma_R = 1.0
k0 = 1.0
Omega = 4.0
[[atoms]]
legs = [{ x = 0.0 }, { x = 1.0, phi = 0.5 }]
rabi = [0.01, 0.0]
modulation = { kind = "tone", A = 0.1, alpha = 1.0 }
"#;
        let cfg: NetworkConfig = toml::from_str(text).unwrap();
        assert_eq!(
            cfg.atoms[0].modulation,
            AtomModulation::Tone {
                amplitude: 0.1,
                alpha: 1.0
            }
        );
        assert!(toml::from_str::<NetworkConfig>(&text.replace("k0", "kk")).is_err());
        assert!(toml::from_str::<NetworkConfig>(&text.replace("alpha", "beta")).is_err());
    }

    #[test]
    fn floquet_matches_density_matrix_for_reflection() {
        // weakly driven, modulated braided pair: compare the period-resolved
        // reflected intensity and two-photon moment at late times
        let cfg = NetworkConfig::braided_pair(1.0, 0.7, 0.0, 0.0)
            .with_tones(0.8, 1.2, 3.0)
            .with_epsilon(0.5)
            .with_drive_from_left(C::new(0.01, 0.0));
        let net = Network::new(&cfg).unwrap();
        let amps = weak_drive_floquet(&net, 24).unwrap();
        let (e1, e2) = reflection_harmonics(&net, &amps);
        let period = 2.0 * PI / 3.0;
        let t_end = 12.0 * period;
        let ts: Vec<f64> = (0..8).map(|j| t_end + j as f64 * period / 8.0).collect();
        let traj = evolve_network(&net, &ground_state(4), &ts, 1e-3).unwrap();
        let kk = amps.harmonics as i32;
        for (t, rho) in ts.iter().zip(&traj) {
            let field = |e: &[C]| -> C {
                (-kk..=kk)
                    .zip(e)
                    .map(|(k, c)| c * C::from_polar(1.0, -(k as f64) * 3.0 * t))
                    .sum()
            };
            let (n1, n2) = reflection_moments(&net, rho);
            assert_relative_eq!(n1, field(&e1).norm_sqr(), max_relative = 2e-3);
            assert_relative_eq!(n2, field(&e2).norm_sqr(), max_relative = 5e-3);
        }
    }

    #[test]
    fn detector_sees_rayleigh_line_of_unmodulated_atom() {
        let cfg = single(0.5, 0.5).with_drive_from_left(C::new(0.01, 0.0));
        let mut cfg = cfg;
        cfg.omega = 1.0;
        let c = 1e-3;
        let p0 = pair_correlation(
            &cfg,
            &DetectorPair {
                n1: 0,
                n2: 0,
                coupling: c,
            },
        )
        .unwrap();
        let p1 = pair_correlation(
            &cfg,
            &DetectorPair {
                n1: 1,
                n2: 1,
                coupling: c,
            },
        )
        .unwrap();
        assert!(p0.intensity1 > 1e6 * p1.intensity1);
        // resonance fluorescence of a two-level atom filtered at the laser line
        // is coherent: g2 → 1 for a narrow filter
        assert_relative_eq!(p0.g2, 1.0, max_relative = 1e-2);
    }

    #[test]
    fn detectors_match_density_matrix_with_detectors() {
        let cfg = NetworkConfig::braided_pair(0.5, 0.7, 0.0, 0.0)
            .with_tones(1.0, PI / 2.0, 2.0)
            .with_drive_from_left(C::new(0.003, 0.0));
        let pair = [0, 1];
        let coupling = 0.2;
        let net = Network::with_detectors(&cfg, &pair, coupling).unwrap();
        let amps = weak_drive_floquet(&net, 24).unwrap();
        let period = 2.0 * PI / 2.0;
        let t0 = 16.0 * period;
        let ts: Vec<f64> = (0..=10).map(|j| t0 + j as f64 * period / 10.0).collect();
        let traj = evolve_network(&net, &ground_state(net.dim()), &ts, 2e-3).unwrap();
        let avg = |op: &DMatrix<C>| -> f64 {
            traj[..10]
                .iter()
                .map(|r| expectation(r, op).re)
                .sum::<f64>()
                / 10.0
        };
        let (d1, d2) = (2, 3);
        let joint_op = {
            let s = net.lowering(d1) * net.lowering(d2);
            s.adjoint() * s
        };
        assert_relative_eq!(
            avg(&net.number(d1)),
            amps.population(d1),
            max_relative = 2e-2
        );
        assert_relative_eq!(
            avg(&net.number(d2)),
            amps.population(d2),
            max_relative = 2e-2
        );
        assert_relative_eq!(
            avg(&joint_op),
            amps.pair_population(d1, d2),
            max_relative = 3e-2
        );
    }

    #[test]
    fn entropy_examples() {
        let u = DVector::from_vec(vec![C::new(1.0, 0.0), C::new(0.5, -0.2), C::new(0.0, 2.0)]);
        let v = DVector::from_vec(vec![C::new(0.3, 0.0), C::new(-1.0, 0.4)]);
        let e = entanglement_entropy(&(&u * v.transpose())).unwrap();
        assert!(e.entropy.abs() < 1e-12);
        assert_relative_eq!(e.schmidt_rank, 1.0, epsilon = 1e-12);
        let id = DMatrix::<C>::identity(2, 2) / C::new(2f64.sqrt(), 0.0);
        let e = entanglement_entropy(&id).unwrap();
        assert_relative_eq!(e.entropy, 2f64.ln(), epsilon = 1e-12);
        assert_relative_eq!(e.schmidt_rank, 2.0, epsilon = 1e-12);
        assert_eq!(
            entanglement_entropy(&DMatrix::zeros(3, 3)),
            Err(MasterEquationError::ZeroMatrix)
        );
    }

    #[test]
    fn weak_drive_guards() {
        let cfg = pair(0.0).with_drive_from_left(C::new(0.5, 0.0));
        let err = pair_correlation(
            &cfg,
            &DetectorPair {
                n1: 0,
                n2: 0,
                coupling: 1e-4,
            },
        )
        .unwrap_err();
        assert!(matches!(err, MasterEquationError::DriveTooStrong { .. }));
        let cfg = pair(0.0).with_drive_from_left(C::new(0.001, 0.0));
        let err = pair_correlation(
            &cfg,
            &DetectorPair {
                n1: 0,
                n2: 0,
                coupling: 0.1,
            },
        )
        .unwrap_err();
        assert!(matches!(err, MasterEquationError::DetectorTooStrong { .. }));
    }

    fn fig3(phase: f64, phi_r: f64, alpha: f64) -> NetworkConfig {
        let omega = 500.0;
        NetworkConfig::braided_pair(1.0, phase, 0.0, phi_r)
            .with_tones(1.5 * omega, alpha, omega)
            .with_drive_from_left(C::new(0.005, 0.0))
    }

    fn small_grid() -> DetectorGrid {
        DetectorGrid {
            n_min: -4,
            n_max: 4,
            ..DetectorGrid::default()
        }
    }

    #[test]
    fn opposite_modulation_keeps_even_sidebands() {
        let fc = filtered_correlations(&fig3(0.0, 0.0, PI), &small_grid()).unwrap();
        assert!(fc.odd_even_ratio() < 1e-2);
        // the Rayleigh line and the ±2 lines carry the weight
        assert!(fc.intensity_of(2) > 1e6 * fc.intensity_of(1));
    }

    #[test]
    fn braided_chiral_pair_inverts_parity() {
        let fc = filtered_correlations(&fig3(0.5 * PI, PI, PI), &small_grid()).unwrap();
        assert!(fc.odd_even_ratio() > 1e2, "ratio {}", fc.odd_even_ratio());
    }

    #[test]
    fn swapped_detectors_give_the_same_g2() {
        let cfg = fig3(0.5 * PI, PI, PI);
        for (n1, n2) in [(0, 1), (-1, 3), (2, -3)] {
            let a = pair_correlation(
                &cfg,
                &DetectorPair {
                    n1,
                    n2,
                    coupling: 2e-3,
                },
            )
            .unwrap();
            let b = pair_correlation(
                &cfg,
                &DetectorPair {
                    n1: n2,
                    n2: n1,
                    coupling: 2e-3,
                },
            )
            .unwrap();
            assert_relative_eq!(a.g2, b.g2, max_relative = 1e-6);
            assert_relative_eq!(
                a.psi.re,
                b.psi.re,
                max_relative = 1e-6,
                epsilon = 1e-6 * a.psi.norm()
            );
            assert_relative_eq!(
                a.psi.im,
                b.psi.im,
                max_relative = 1e-6,
                epsilon = 1e-6 * a.psi.norm()
            );
        }
    }

    #[test]
    fn weaker_detectors_leave_g2_of_bright_lines_unchanged() {
        let cfg = fig3(0.0, 0.0, PI);
        for (n1, n2) in [(0, 0), (0, 2), (-2, 2)] {
            let a = pair_correlation(
                &cfg,
                &DetectorPair {
                    n1,
                    n2,
                    coupling: 2e-3,
                },
            )
            .unwrap();
            let b = pair_correlation(
                &cfg,
                &DetectorPair {
                    n1,
                    n2,
                    coupling: 1e-3,
                },
            )
            .unwrap();
            assert_relative_eq!(a.g2, b.g2, max_relative = 1e-2);
        }
    }

    #[test]
    fn dark_sidebands_bunch_strongly() {
        let p = pair_correlation(
            &fig3(0.0, 0.0, PI),
            &DetectorPair {
                n1: 1,
                n2: 1,
                coupling: 2e-3,
            },
        )
        .unwrap();
        assert!(p.g2 > 1e6);
    }

    #[test]
    fn in_phase_modulation_is_not_entangling() {
        let grid = small_grid();
        let entangled = filtered_correlations(&fig3(0.0, 0.0, PI), &grid).unwrap();
        // at ε = ω₀ the resonant pair is uncorrelated to leading order, so only
        // a small remainder survives
        let resonant = filtered_correlations(&fig3(0.0, 0.0, 0.0), &grid).unwrap();
        assert!(resonant.psi.norm() < 1e-2 * entangled.psi.norm());
        // off resonance the correlated part is a product of sideband weights
        let detuned = filtered_correlations(&fig3(0.0, 0.0, 0.0).with_epsilon(2.0), &grid).unwrap();
        assert!(detuned.entropy().unwrap().entropy < 1e-3);
        assert!(entangled.entropy().unwrap().entropy > 0.3);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]

            #[test]
            fn dissipator_is_positive(xs in proptest::collection::vec(-3.0f64..3.0, 3),
                                      phis in proptest::collection::vec(0.0f64..6.3, 3),
                                      gl in 0.0f64..2.0, gr in 0.01f64..2.0) {
                let legs: Vec<Leg> = xs.iter().zip(&phis).map(|(x, p)| Leg { x: *x, phi: *p }).collect();
                let cfg = NetworkConfig {
                    atoms: vec![
                        AtomNode { legs: legs[..2].to_vec(), modulation: AtomModulation::None, rabi: ZERO },
                        AtomNode { legs: legs[2..].to_vec(), modulation: AtomModulation::None, rabi: ZERO },
                    ],
                    gamma_l: gl, gamma_r: gr, k0: 1.3, omega: 0.0, epsilon: 0.0,
                };
                let net = Network::new(&cfg).unwrap();
                prop_assert!(net.collective_decay().symmetric_eigenvalues().min() > -1e-12);
                let h = net.single_excitation();
                let anti = (&h - h.adjoint()) * C::new(0.5, 0.0);
                prop_assert!((anti - net.collective_decay() * C::new(0.0, -0.5)).camax() < 1e-12);
            }

            #[test]
            fn entropy_is_bounded(re in proptest::collection::vec(-1.0f64..1.0, 12),
                                  im in proptest::collection::vec(-1.0f64..1.0, 12)) {
                let m = DMatrix::from_iterator(3, 4, re.iter().zip(&im).map(|(a, b)| C::new(*a, *b)));
                prop_assume!(m.norm() > 1e-6);
                let e = entanglement_entropy(&m).unwrap();
                prop_assert!(e.entropy >= 0.0);
                prop_assert!(e.entropy <= 3f64.ln() + 1e-12);
            }
        }
    }
}
