//! One- and two-photon scattering off arrays of (giant) atoms in a
//! bidirectional waveguide, from dressed Green functions in the hard-core
//! limit.
//!
//! Frequencies are measured from ω₀ and positions in units of 1/k₀, so a leg at
//! x picks up the phase e^{ix} and H_eff[m][n] = −iγ Σ_{p,q} e^{i|x_mp − x_nq|}.
//! ω-integrals over products of resolvents are evaluated in closed form with
//! Kronecker sums of H_eff (all poles of G lie in the lower half-plane), with
//! adaptive real-axis quadrature as the independent cross-check.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bessel::bessel_j;

type C = Complex64;

const I: C = C::new(0.0, 1.0);
const ZERO: C = C::new(0.0, 0.0);
const ONE: C = C::new(1.0, 0.0);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScatteringError {
    #[error("invalid array: {0}")]
    InvalidArray(String),
    #[error("{0} must be finite")]
    NonFinite(&'static str),
    #[error("singular resolvent at z = {0}")]
    SingularMatrix(C),
    #[error("closed-form external line invalid at phase {phase}")]
    ClosedFormInvalidPhase { phase: f64 },
    #[error("no closed-form external line for this layout")]
    ClosedFormUnavailable,
    #[error("Bessel series cut at |k| <= {k_max} leaves a tail of {tail:e}")]
    TruncationTooSmall { k_max: usize, tail: f64 },
    #[error("quadrature did not converge (relative error estimate {error:e})")]
    QuadratureNotConverged { error: f64 },
    #[error("amplitude list has {got} entries for {atoms} atoms")]
    AmplitudeCount { got: usize, atoms: usize },
}

pub type Result<T> = std::result::Result<T, ScatteringError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Topology {
    /// Every leg of atom n lies left of every leg of atom n+1.
    Separate,
    /// Legs interleave: leg p of atom n sits at (n + p·N)·φ.
    Braided,
    /// All legs at one point.
    Colocated,
}

/// Identical atoms with `legs` coupling points each; adjacent points are a
/// propagation phase `varphi` apart. `gamma` is the emission rate into each
/// direction per leg.
#[derive(Debug, Clone, PartialEq)]
pub struct GiantArray {
    topology: Topology,
    varphi: f64,
    gamma: f64,
    positions: DMatrix<f64>,
}

/// Serializable description of a [`GiantArray`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrayConfig {
    pub topology: Topology,
    pub atoms: usize,
    pub legs: usize,
    #[serde(default)]
    pub varphi: f64,
    #[serde(rename = "gamma1D")]
    pub gamma: f64,
}

impl ArrayConfig {
    pub fn build(&self) -> Result<GiantArray> {
        GiantArray::new(
            self.topology,
            self.atoms,
            self.legs,
            self.varphi,
            self.gamma,
        )
    }
}

impl GiantArray {
    pub fn new(
        topology: Topology,
        atoms: usize,
        legs: usize,
        varphi: f64,
        gamma: f64,
    ) -> Result<Self> {
        if atoms == 0 || legs == 0 {
            return Err(ScatteringError::InvalidArray(
                "need at least one atom with one leg".into(),
            ));
        }
        if !varphi.is_finite() || !gamma.is_finite() {
            return Err(ScatteringError::NonFinite("varphi and gamma1D"));
        }
        if varphi < 0.0 {
            return Err(ScatteringError::InvalidArray(format!(
                "negative leg spacing {varphi}"
            )));
        }
        if gamma <= 0.0 {
            return Err(ScatteringError::InvalidArray(format!(
                "gamma1D must be positive, got {gamma}"
            )));
        }
        let varphi = if topology == Topology::Colocated {
            0.0
        } else {
            varphi
        };
        let positions = DMatrix::from_fn(atoms, legs, |n, p| {
            let slot = match topology {
                Topology::Separate => n * legs + p,
                Topology::Braided => n + p * atoms,
                Topology::Colocated => 0,
            };
            slot as f64 * varphi
        });
        Ok(Self {
            topology,
            varphi,
            gamma,
            positions,
        })
    }

    pub fn separate(atoms: usize, legs: usize, varphi: f64, gamma: f64) -> Result<Self> {
        Self::new(Topology::Separate, atoms, legs, varphi, gamma)
    }

    pub fn braided(atoms: usize, legs: usize, varphi: f64, gamma: f64) -> Result<Self> {
        Self::new(Topology::Braided, atoms, legs, varphi, gamma)
    }

    pub fn colocated(atoms: usize, legs: usize, gamma: f64) -> Result<Self> {
        Self::new(Topology::Colocated, atoms, legs, 0.0, gamma)
    }

    pub fn atoms(&self) -> usize {
        self.positions.nrows()
    }

    pub fn legs(&self) -> usize {
        self.positions.ncols()
    }

    pub fn topology(&self) -> Topology {
        self.topology
    }

    pub fn varphi(&self) -> f64 {
        self.varphi
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// Leg positions x[n][p] in units of 1/k₀.
    pub fn positions(&self) -> &DMatrix<f64> {
        &self.positions
    }

    /// Σ_p e^{±i x_np}: the coupling of atom n to a right-moving (+) or
    /// left-moving (−) plane wave.
    pub fn leg_sums(&self, sign: f64) -> DVector<C> {
        DVector::from_fn(self.atoms(), |n, _| {
            self.positions
                .row(n)
                .iter()
                .map(|x| C::from_polar(1.0, sign * x))
                .sum()
        })
    }

    /// Collective emission rate of one atom into the waveguide, M²γ at φ = 0.
    pub fn single_atom_rate(&self) -> f64 {
        self.leg_sums(1.0)[0].norm_sqr() * self.gamma
    }
}

/// Complex modulation amplitudes A_n in Δ_n(t) = A_n e^{−iΩt} + A_n* e^{iΩt}.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModulationAmps {
    pub amplitudes: Vec<C>,
    #[serde(rename = "Omega")]
    pub omega: f64,
}

impl ModulationAmps {
    pub fn homogeneous(atoms: usize, amplitude: f64, omega: f64) -> Self {
        Self {
            amplitudes: vec![C::new(amplitude, 0.0); atoms],
            omega,
        }
    }

    /// A₁ = A, A₂ = A e^{iα}.
    pub fn pair(amplitude: f64, alpha: f64, omega: f64) -> Self {
        Self {
            amplitudes: vec![C::new(amplitude, 0.0), C::from_polar(amplitude, alpha)],
            omega,
        }
    }

    /// From cosine tones Δ_n(t) = a_n cos(Ωt + θ_n), i.e. A_n = (a_n/2) e^{−iθ_n}.
    pub fn from_cosines(tones: &[(f64, f64)], omega: f64) -> Self {
        Self {
            amplitudes: tones
                .iter()
                .map(|&(a, th)| C::from_polar(0.5 * a, -th))
                .collect(),
            omega,
        }
    }

    pub fn max_amplitude(&self) -> f64 {
        self.amplitudes.iter().map(|a| a.norm()).fold(0.0, f64::max)
    }

    fn check(&self, atoms: usize) -> Result<()> {
        if self.amplitudes.len() != atoms {
            return Err(ScatteringError::AmplitudeCount {
                got: self.amplitudes.len(),
                atoms,
            });
        }
        if !self.omega.is_finite()
            || self
                .amplitudes
                .iter()
                .any(|a| !a.re.is_finite() || !a.im.is_finite())
        {
            return Err(ScatteringError::NonFinite("modulation"));
        }
        Ok(())
    }

    fn conj(&self) -> Vec<C> {
        self.amplitudes.iter().map(|a| a.conj()).collect()
    }
}

pub fn effective_hamiltonian(array: &GiantArray) -> DMatrix<C> {
    let n = array.atoms();
    let x = array.positions();
    DMatrix::from_fn(n, n, |a, b| {
        let mut s = ZERO;
        for xp in x.row(a).iter() {
            for xq in x.row(b).iter() {
                s += C::from_polar(1.0, (xp - xq).abs());
            }
        }
        -I * array.gamma() * s
    })
}

fn eigenvalues(h: &DMatrix<C>) -> Vec<C> {
    h.clone()
        .schur()
        .eigenvalues()
        .map(|v| v.iter().cloned().collect())
        .unwrap_or_default()
}

fn resolvent(h: &DMatrix<C>, z: C) -> Result<DMatrix<C>> {
    let n = h.nrows();
    let m = DMatrix::<C>::identity(n, n) * z - h;
    let inv = m
        .clone()
        .try_inverse()
        .ok_or(ScatteringError::SingularMatrix(z))?;
    let cond = m.norm() * inv.norm();
    if !cond.is_finite() || cond > 1e13 {
        return Err(ScatteringError::SingularMatrix(z));
    }
    Ok(inv)
}

/// Evaluates `f` at `x`, or, when `x` sits on a real (dark-state) pole whose
/// residue the quantity never sees, as the mean of `f(x ± δ)`.
fn off_dark_pole<T>(
    x: f64,
    delta: f64,
    f: impl Fn(f64) -> Result<T>,
    mean: impl Fn(T, T) -> T,
) -> Result<T> {
    match f(x) {
        Err(ScatteringError::SingularMatrix(_)) => Ok(mean(f(x - delta)?, f(x + delta)?)),
        other => other,
    }
}

/// H_eff, after refusing an ω that sits on one of its eigenvalues.
fn hamiltonian_off_pole(array: &GiantArray, omega: f64) -> Result<DMatrix<C>> {
    if !omega.is_finite() {
        return Err(ScatteringError::NonFinite("omega"));
    }
    let h = effective_hamiltonian(array);
    let z = C::new(omega, 0.0);
    if eigenvalues(&h)
        .iter()
        .any(|l| (z - l).norm() < 1e-9 * array.gamma())
    {
        return Err(ScatteringError::SingularMatrix(z));
    }
    Ok(h)
}

/// G(ω) = (ω − H_eff)⁻¹.
pub fn green(array: &GiantArray, omega: f64) -> Result<DMatrix<C>> {
    let h = hamiltonian_off_pole(array, omega)?;
    resolvent(&h, C::new(omega, 0.0))
}

/// s⁺(ω) = G(ω)·u with u_m = Σ_p e^{ix_mp}.
pub fn external_line(array: &GiantArray, omega: f64) -> Result<DVector<C>> {
    Ok(green(array, omega)? * array.leg_sums(1.0))
}

/// The same line factor from the leftmost atom's row of H_eff, available for
/// two-leg atoms in a separate chain (any N) or a braided pair.
pub fn external_line_closed_form(array: &GiantArray, omega: f64) -> Result<DVector<C>> {
    if array.legs() != 2 {
        return Err(ScatteringError::ClosedFormUnavailable);
    }
    let phi = array.varphi();
    let gamma = array.gamma();
    let (shift, norm, extra) = match array.topology() {
        Topology::Separate => (
            2.0 * gamma * phi.sin(),
            ONE + C::from_polar(1.0, -phi),
            ZERO,
        ),
        Topology::Braided if array.atoms() == 2 => (
            2.0 * gamma * (2.0 * phi).sin(),
            ONE + C::from_polar(1.0, -2.0 * phi),
            C::new(2.0 * gamma * phi.sin(), 0.0),
        ),
        _ => return Err(ScatteringError::ClosedFormUnavailable),
    };
    if norm.norm() < 1e-6 {
        return Err(ScatteringError::ClosedFormInvalidPhase { phase: phi });
    }
    let h = effective_hamiltonian(array);
    let g = green(array, omega)?;
    let n = array.atoms();
    let x0 = array.positions()[(0, 0)];
    let mut row = DMatrix::<C>::zeros(1, n);
    for m in 0..n {
        row[(0, m)] = -h[(0, m)];
    }
    row[(0, 0)] += shift;
    if n > 1 {
        row[(0, 1)] += extra;
    }
    let pre = C::from_polar(1.0, x0) / (I * gamma * norm);
    let line = (row * g).transpose() * pre;
    Ok(DVector::from_iterator(n, line.iter().cloned()))
}

/// Elastic single-photon reflection and transmission for a photon incident
/// from the left.
pub fn single_photon_rt(array: &GiantArray, omega: f64) -> Result<(C, C)> {
    // solve rather than invert: near a dark pole the inverse carries a large
    // dark component that the waveguide projections cancel only in exact
    // arithmetic, while a solve keeps it out of the result
    let h = hamiltonian_off_pole(array, omega)?;
    let n = h.nrows();
    let m = DMatrix::<C>::identity(n, n) * C::new(omega, 0.0) - h;
    let up = array.leg_sums(1.0);
    let down = array.leg_sums(-1.0);
    let x = m
        .lu()
        .solve(&up)
        .ok_or(ScatteringError::SingularMatrix(C::new(omega, 0.0)))?;
    let gamma = array.gamma();
    let r = -I * gamma * (up.transpose() * &x)[(0, 0)];
    let t = ONE - I * gamma * (down.transpose() * &x)[(0, 0)];
    Ok((r, t))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Inelastic {
    pub amplitude: C,
    /// max|A_n|/Ω ≤ 0.1, where the first-order result applies.
    pub perturbative: bool,
}

/// First Stokes (order −1) or anti-Stokes (order +1) reflection amplitude
/// r_{±1}(ω) = −iγ Σ_k A_k^{(*)} s_k(ω ± Ω) s_k(ω).
pub fn inelastic_r(
    array: &GiantArray,
    omega: f64,
    amps: &ModulationAmps,
    order: i32,
) -> Result<Inelastic> {
    amps.check(array.atoms())?;
    if !omega.is_finite() {
        return Err(ScatteringError::NonFinite("omega"));
    }
    let sign = if order >= 0 { 1.0 } else { -1.0 };
    let a = if order >= 0 {
        amps.amplitudes.clone()
    } else {
        amps.conj()
    };
    let kernel = Kernel::new(array);
    let amplitude = off_dark_pole(
        omega,
        1e-6 * array.gamma(),
        |w| {
            let s = kernel.line(w)?;
            let shifted = kernel.line(w + sign * amps.omega)?;
            Ok(-I
                * array.gamma()
                * (0..array.atoms())
                    .map(|k| a[k] * shifted[k] * s[k])
                    .sum::<C>())
        },
        |x, y| 0.5 * (x + y),
    )?;
    let perturbative = amps.omega != 0.0 && amps.max_amplitude() / amps.omega.abs() <= 0.1;
    Ok(Inelastic {
        amplitude,
        perturbative,
    })
}

/// Reflection and transmission into sideband n for homogeneous modulation
/// 2A cos Ωt.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sideband {
    pub reflection: C,
    pub transmission: C,
}

/// Smallest cutoff with |J_k(z)| < 1e-14 for every |k| beyond it.
pub fn bessel_cutoff(z: f64) -> usize {
    let mut k = z.abs().ceil() as usize;
    while bessel_j(k as i32 + 1, z).abs() >= 1e-14 {
        k += 1;
    }
    k
}

/// S(ω + nΩ, ω) = Σ_{|k|≤k_max} S₀(ω − kΩ) J_{k+n}(2A/Ω) J_k(2A/Ω).
pub fn smatrix_modulated(
    array: &GiantArray,
    omega: f64,
    n: i32,
    amplitude: f64,
    mod_freq: f64,
    k_max: usize,
) -> Result<Sideband> {
    if !(amplitude.is_finite() && mod_freq.is_finite() && mod_freq > 0.0) {
        return Err(ScatteringError::NonFinite(
            "modulation amplitude and frequency",
        ));
    }
    let z = 2.0 * amplitude / mod_freq;
    let tail = bessel_j(k_max as i32 + 1, z)
        .abs()
        .max(bessel_j(k_max as i32 + 1 + n.abs(), z).abs());
    if tail >= 1e-12 {
        return Err(ScatteringError::TruncationTooSmall { k_max, tail });
    }
    let km = k_max as i32;
    let mut out = Sideband {
        reflection: ZERO,
        transmission: ZERO,
    };
    for k in -km..=km {
        let w = bessel_j(k + n, z) * bessel_j(k, z);
        if w == 0.0 {
            continue;
        }
        let (r, t) = single_photon_rt(array, omega - k as f64 * mod_freq)?;
        out.reflection += r * w;
        out.transmission += t * w;
    }
    Ok(out)
}

/// The building blocks every integral needs: H_eff, the coupling vector and
/// Kronecker embeddings.
struct Kernel {
    h: DMatrix<C>,
    u: DVector<C>,
    gamma: f64,
    poles: Vec<C>,
}

impl Kernel {
    fn new(array: &GiantArray) -> Self {
        let h = effective_hamiltonian(array);
        let poles = eigenvalues(&h);
        Self {
            h,
            u: array.leg_sums(1.0),
            gamma: array.gamma(),
            poles,
        }
    }

    fn n(&self) -> usize {
        self.h.nrows()
    }

    fn green(&self, omega: f64) -> Result<DMatrix<C>> {
        resolvent(&self.h, C::new(omega, 0.0))
    }

    fn line(&self, omega: f64) -> Result<DVector<C>> {
        Ok(self.green(omega)? * &self.u)
    }

    /// Pair propagator (z − H⊗1 − 1⊗H)⁻¹.
    fn pair(&self, z: f64) -> Result<DMatrix<C>> {
        let n = self.n();
        let id = DMatrix::<C>::identity(n, n);
        let sum = self.h.kronecker(&id) + id.kronecker(&self.h);
        resolvent(&sum, C::new(z, 0.0))
    }

    /// (z − H_a − H_b)⁻¹ on three copies, with (a, b) one of (0,1), (0,2), (1,2).
    fn triple(&self, z: f64, a: usize, b: usize) -> Result<DMatrix<C>> {
        let n = self.n();
        let id = DMatrix::<C>::identity(n, n);
        let embed = |slot: usize| -> DMatrix<C> {
            let f = |s: usize| {
                if s == slot {
                    self.h.clone()
                } else {
                    id.clone()
                }
            };
            f(0).kronecker(&f(1)).kronecker(&f(2))
        };
        resolvent(&(embed(a) + embed(b)), C::new(z, 0.0))
    }
}

/// ∫ dω/2π evaluators for the few integrals the two-photon amplitudes need.
trait Integrals {
    /// Σ_n = ∫ s_n(ω) s_n(b − ω).
    fn sigma(&self, b: f64) -> Result<DVector<C>>;
    /// [k][i] ↦ ∫ s_k(ω) s_i(b − ω) G_ki(ω − c).
    fn pre_modulated(&self, b: f64, c: f64) -> Result<DMatrix<C>>;
    /// [i][k] ↦ ∫ s_i(ω) s_k(b − ω) G_ik(c − ω).
    fn post_modulated(&self, b: f64, c: f64) -> Result<DMatrix<C>>;
    /// [m][n] ↦ i ∫ G_mn(ω) G_mn(z − ω), the pair propagator's diagonal block.
    fn pair_diagonal(&self, z: f64) -> Result<DMatrix<C>>;
    /// [m][n] ↦ i ∫ Σ_k a_k G_mn(ω) G_mk(2ε + Ω − ω) G_kn(2ε − ω).
    fn dressed_modulation(&self, eps: f64, a: &[C], omega: f64) -> Result<DMatrix<C>>;
}

struct Residues<'a>(&'a Kernel);

impl Integrals for Residues<'_> {
    fn sigma(&self, b: f64) -> Result<DVector<C>> {
        let k = self.0;
        let n = k.n();
        let v = k.pair(b)? * k.u.kronecker(&k.u);
        Ok(DVector::from_fn(n, |m, _| -I * v[m * n + m]))
    }

    fn pre_modulated(&self, b: f64, c: f64) -> Result<DMatrix<C>> {
        let k = self.0;
        let n = k.n();
        let t12 = k.triple(b, 0, 1)?;
        let t23 = k.triple(b - c, 1, 2)?;
        let prod = t12 * t23;
        let uu = k.u.kronecker(&k.u);
        let mut out = DMatrix::zeros(n, n);
        for i in 0..n {
            let mut e = DVector::<C>::zeros(n);
            e[i] = ONE;
            let y = &prod * uu.kronecker(&e);
            for kk in 0..n {
                out[(kk, i)] = -I * y[kk * n * n + i * n + kk];
            }
        }
        Ok(out)
    }

    fn post_modulated(&self, b: f64, c: f64) -> Result<DMatrix<C>> {
        let k = self.0;
        let n = k.n();
        let prod = k.triple(b, 0, 1)? * k.triple(c, 0, 2)?;
        let uu = k.u.kronecker(&k.u);
        let mut out = DMatrix::zeros(n, n);
        for kk in 0..n {
            let mut e = DVector::<C>::zeros(n);
            e[kk] = ONE;
            let y = &prod * uu.kronecker(&e);
            for i in 0..n {
                out[(i, kk)] = -I * y[i * n * n + kk * n + i];
            }
        }
        Ok(out)
    }

    fn pair_diagonal(&self, z: f64) -> Result<DMatrix<C>> {
        let n = self.0.n();
        let p = self.0.pair(z)?;
        Ok(DMatrix::from_fn(n, n, |a, b| p[(a * n + a, b * n + b)]))
    }

    fn dressed_modulation(&self, eps: f64, a: &[C], omega: f64) -> Result<DMatrix<C>> {
        let k = self.0;
        let n = k.n();
        let id = DMatrix::<C>::identity(n, n);
        let diag = DMatrix::from_diagonal(&DVector::from_column_slice(a)).kronecker(&id);
        let full = k.pair(2.0 * eps + omega)? * diag * k.pair(2.0 * eps)?;
        Ok(DMatrix::from_fn(n, n, |m, q| full[(m * n + m, q * n + q)]))
    }
}

/// Real-axis quadrature after ω = c + w tan θ, split at the real parts of
/// the poles.
struct Quadrature<'a> {
    kernel: &'a Kernel,
    tol: f64,
}

impl Quadrature<'_> {
    fn integrate<F>(&self, f: F, shifts: &[(f64, f64)]) -> Result<C>
    where
        F: Fn(f64) -> C,
    {
        // Pole sites: λ + shift for factors in ω, shift − λ for factors in (shift − ω).
        let mut sites: Vec<f64> = Vec::new();
        let mut width = 0.0_f64;
        for &(shift, sign) in shifts {
            for p in &self.kernel.poles {
                sites.push(shift + sign * p.re);
                width = width.max(p.im.abs());
            }
        }
        let width = width.max(1e-3 * self.kernel.gamma);
        let center = sites.iter().sum::<f64>() / sites.len().max(1) as f64;
        let mut cuts: Vec<f64> = sites
            .iter()
            .map(|s| ((s - center) / width).atan())
            .collect();
        cuts.push(-std::f64::consts::FRAC_PI_2);
        cuts.push(std::f64::consts::FRAC_PI_2);
        cuts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        cuts.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
        let g = |theta: f64, part: usize| -> f64 {
            let (s, c) = theta.sin_cos();
            if c.abs() < 1e-300 {
                return 0.0;
            }
            let w = center + width * s / c;
            let v = f(w) * (width / (c * c) / (2.0 * std::f64::consts::PI));
            let x = if part == 0 { v.re } else { v.im };
            if x.is_finite() {
                x
            } else {
                0.0
            }
        };
        let run = |target: f64| -> (C, f64) {
            let mut total = ZERO;
            let mut err = 0.0;
            for pair in cuts.windows(2) {
                let re = quadrature::double_exponential::integrate(
                    |t| g(t, 0),
                    pair[0],
                    pair[1],
                    target,
                );
                let im = quadrature::double_exponential::integrate(
                    |t| g(t, 1),
                    pair[0],
                    pair[1],
                    target,
                );
                total += C::new(re.integral, im.integral);
                err += re.error_estimate + im.error_estimate;
            }
            (total, err)
        };
        let (rough, _) = run(1e-6);
        let scale = rough.norm().max(1e-300);
        let (value, err) = run(1e-2 * self.tol * scale);
        let rel = err / value.norm().max(1e-300);
        if !(rel <= self.tol) {
            return Err(ScatteringError::QuadratureNotConverged { error: rel });
        }
        Ok(value)
    }

    fn line(&self, omega: f64) -> DVector<C> {
        self.kernel
            .line(omega)
            .unwrap_or_else(|_| DVector::zeros(self.kernel.n()))
    }

    fn green(&self, omega: f64) -> DMatrix<C> {
        let n = self.kernel.n();
        self.kernel
            .green(omega)
            .unwrap_or_else(|_| DMatrix::zeros(n, n))
    }
}

impl Integrals for Quadrature<'_> {
    fn sigma(&self, b: f64) -> Result<DVector<C>> {
        let n = self.kernel.n();
        let mut out = DVector::zeros(n);
        for m in 0..n {
            out[m] = self.integrate(
                |w| self.line(w)[m] * self.line(b - w)[m],
                &[(0.0, 1.0), (b, -1.0)],
            )?;
        }
        Ok(out)
    }

    fn pre_modulated(&self, b: f64, c: f64) -> Result<DMatrix<C>> {
        let n = self.kernel.n();
        let mut out = DMatrix::zeros(n, n);
        for k in 0..n {
            for i in 0..n {
                out[(k, i)] = self.integrate(
                    |w| self.line(w)[k] * self.line(b - w)[i] * self.green(w - c)[(k, i)],
                    &[(0.0, 1.0), (b, -1.0), (c, 1.0)],
                )?;
            }
        }
        Ok(out)
    }

    fn post_modulated(&self, b: f64, c: f64) -> Result<DMatrix<C>> {
        let n = self.kernel.n();
        let mut out = DMatrix::zeros(n, n);
        for i in 0..n {
            for k in 0..n {
                out[(i, k)] = self.integrate(
                    |w| self.line(w)[i] * self.line(b - w)[k] * self.green(c - w)[(i, k)],
                    &[(0.0, 1.0), (b, -1.0), (c, -1.0)],
                )?;
            }
        }
        Ok(out)
    }

    fn pair_diagonal(&self, z: f64) -> Result<DMatrix<C>> {
        let n = self.kernel.n();
        let mut out = DMatrix::zeros(n, n);
        for a in 0..n {
            for b in 0..n {
                let v = self.integrate(
                    |w| self.green(w)[(a, b)] * self.green(z - w)[(a, b)],
                    &[(0.0, 1.0), (z, -1.0)],
                )?;
                out[(a, b)] = I * v;
            }
        }
        Ok(out)
    }

    fn dressed_modulation(&self, eps: f64, a: &[C], omega: f64) -> Result<DMatrix<C>> {
        let n = self.kernel.n();
        let b = 2.0 * eps + omega;
        let mut out = DMatrix::zeros(n, n);
        for m in 0..n {
            for q in 0..n {
                let v = self.integrate(
                    |w| {
                        let (g0, g1, g2) =
                            (self.green(w), self.green(b - w), self.green(2.0 * eps - w));
                        (0..n)
                            .map(|k| a[k] * g0[(m, q)] * g1[(m, k)] * g2[(k, q)])
                            .sum()
                    },
                    &[(0.0, 1.0), (b, -1.0), (2.0 * eps, -1.0)],
                )?;
                out[(m, q)] = I * v;
            }
        }
        Ok(out)
    }
}

/// How the ω-integrals are evaluated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Integrator {
    /// Closed contours, exact up to round-off.
    Residues,
    /// Adaptive real-axis quadrature with the given relative tolerance.
    Quadrature { tol: f64 },
}

fn with_integrals<T>(
    array: &GiantArray,
    integrator: Integrator,
    f: impl FnOnce(&Kernel, &dyn Integrals) -> Result<T>,
) -> Result<T> {
    let kernel = Kernel::new(array);
    match integrator {
        Integrator::Residues => f(&kernel, &Residues(&kernel)),
        Integrator::Quadrature { tol } => f(
            &kernel,
            &Quadrature {
                kernel: &kernel,
                tol,
            },
        ),
    }
}

fn vertex_from(ints: &dyn Integrals, eps: f64) -> Result<DMatrix<C>> {
    let diag = ints.pair_diagonal(2.0 * eps)?;
    (-diag)
        .try_inverse()
        .ok_or(ScatteringError::SingularMatrix(C::new(eps, 0.0)))
}

/// Dressed two-excitation vertex 𝓜(ε) = (−iΞ)⁻¹ in the hard-core limit,
/// Ξ_mn = ∫ G_mn(ω) G_mn(2ε − ω) dω/2π.
pub fn vertex_m(array: &GiantArray, eps: f64) -> Result<DMatrix<C>> {
    vertex_m_with(array, eps, Integrator::Residues)
}

pub fn vertex_m_with(array: &GiantArray, eps: f64, integrator: Integrator) -> Result<DMatrix<C>> {
    with_integrals(array, integrator, |_, ints| vertex_from(ints, eps))
}

/// Dressed modulation vertex χ⁽⁺⁾ (sign > 0) or χ⁽⁻⁾ (sign < 0).
pub fn chi_pm(
    array: &GiantArray,
    eps: f64,
    amps: &ModulationAmps,
    sign: i32,
) -> Result<DMatrix<C>> {
    chi_pm_with(array, eps, amps, sign, Integrator::Residues)
}

pub fn chi_pm_with(
    array: &GiantArray,
    eps: f64,
    amps: &ModulationAmps,
    sign: i32,
    integrator: Integrator,
) -> Result<DMatrix<C>> {
    amps.check(array.atoms())?;
    let (a, omega) = if sign >= 0 {
        (amps.amplitudes.clone(), amps.omega)
    } else {
        (amps.conj(), -amps.omega)
    };
    with_integrals(array, integrator, |_, ints| {
        ints.dressed_modulation(eps, &a, omega)
    })
}

/// Equal-time two-photon reflection amplitudes for two photons at ε, the
/// Rayleigh harmonic S₀ and the first anti-Stokes/Stokes harmonics S±1.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoPhotonAmplitudeSet {
    pub s0: C,
    pub s1: C,
    pub sm1: C,
    /// Elastic reflection r(ε).
    pub reflection: C,
    pub line: DVector<C>,
    pub vertex: DMatrix<C>,
    pub chi_plus: DMatrix<C>,
    pub chi_minus: DMatrix<C>,
}

/// Harmonics of g²(t,t) ≈ g₀ + g₁e^{−iΩt} + g₁* e^{iΩt}.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct G2Harmonics {
    pub g0: f64,
    pub g1: C,
    pub omega: f64,
}

impl G2Harmonics {
    pub fn at(&self, t: f64) -> f64 {
        self.g0 + 2.0 * (self.g1 * C::from_polar(1.0, -self.omega * t)).re
    }
}

impl TwoPhotonAmplitudeSet {
    fn mean(&self, other: &Self) -> Self {
        let h = C::new(0.5, 0.0);
        Self {
            s0: h * (self.s0 + other.s0),
            s1: h * (self.s1 + other.s1),
            sm1: h * (self.sm1 + other.sm1),
            reflection: h * (self.reflection + other.reflection),
            line: (&self.line + &other.line) * h,
            vertex: (&self.vertex + &other.vertex) * h,
            chi_plus: (&self.chi_plus + &other.chi_plus) * h,
            chi_minus: (&self.chi_minus + &other.chi_minus) * h,
        }
    }

    /// Normalised by the unmodulated coherent value |2r²|².
    pub fn harmonics(&self, omega: f64) -> G2Harmonics {
        let norm = (2.0 * self.reflection * self.reflection).norm_sqr();
        G2Harmonics {
            g0: self.s0.norm_sqr() / norm,
            g1: (self.s1 * self.s0.conj() + self.s0 * self.sm1.conj()) / norm,
            omega,
        }
    }
}

fn rayleigh(kernel: &Kernel, ints: &dyn Integrals, eps: f64) -> Result<C> {
    let s = kernel.line(eps)?;
    let r = -I * kernel.gamma * kernel.u.dot(&s);
    let sigma = ints.sigma(2.0 * eps)?;
    let m = vertex_from(ints, eps)?;
    let s2 = s.map(|v| v * v);
    let g2 = kernel.gamma * kernel.gamma;
    Ok(2.0 * r * r - 2.0 * I * g2 * (sigma.transpose() * m * s2)[(0, 0)])
}

/// First anti-Stokes harmonic for amplitudes `a` at frequency `omega`; the
/// Stokes harmonic is the same expression at (a*, −Ω).
fn first_sideband(
    kernel: &Kernel,
    ints: &dyn Integrals,
    eps: f64,
    a: &[C],
    omega: f64,
) -> Result<C> {
    let n = kernel.n();
    let gamma = kernel.gamma;
    let b = 2.0 * eps + omega;
    let s = kernel.line(eps)?;
    let shifted = kernel.line(eps + omega)?;
    let r = -I * gamma * kernel.u.dot(&s);
    let r1: C = -I * gamma * (0..n).map(|k| a[k] * shifted[k] * s[k]).sum::<C>();
    let m0 = vertex_from(ints, eps)?;
    let mh = vertex_from(ints, eps + 0.5 * omega)?;
    let sigma = ints.sigma(b)?;
    let pre = ints.pre_modulated(b, omega)?;
    let post = ints.post_modulated(b, 2.0 * eps)?;
    let g_up = kernel.green(eps + omega)?;
    let chi = ints.dressed_modulation(eps, a, omega)?;

    let mut after = ZERO;
    let mut before = ZERO;
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                after += a[k] * m0[(i, j)] * (pre[(k, i)] + post[(i, k)]) * s[j] * s[j];
                before += a[k] * 2.0 * mh[(i, j)] * sigma[i] * s[k] * s[j] * g_up[(k, j)];
            }
        }
    }
    let s2 = s.map(|v| v * v);
    let twice = (sigma.transpose() * &mh * chi * &m0 * s2)[(0, 0)];
    let g2 = gamma * gamma;
    Ok(4.0 * r * r1 - 2.0 * I * g2 * (after + before) - 4.0 * I * g2 * twice)
}

pub fn two_photon_amplitudes(
    array: &GiantArray,
    eps: f64,
    amps: &ModulationAmps,
) -> Result<TwoPhotonAmplitudeSet> {
    two_photon_amplitudes_with(array, eps, amps, Integrator::Residues)
}

pub fn two_photon_amplitudes_with(
    array: &GiantArray,
    eps: f64,
    amps: &ModulationAmps,
    integrator: Integrator,
) -> Result<TwoPhotonAmplitudeSet> {
    amps.check(array.atoms())?;
    if !eps.is_finite() {
        return Err(ScatteringError::NonFinite("eps"));
    }
    let delta = 1e-6 * array.gamma();
    off_dark_pole(
        eps,
        delta,
        |e| amplitudes_at(array, e, amps, integrator),
        |x, y| x.mean(&y),
    )
}

fn amplitudes_at(
    array: &GiantArray,
    eps: f64,
    amps: &ModulationAmps,
    integrator: Integrator,
) -> Result<TwoPhotonAmplitudeSet> {
    let plus = amps.amplitudes.clone();
    let minus = amps.conj();
    let omega = amps.omega;
    with_integrals(array, integrator, |kernel, ints| {
        let s0 = rayleigh(kernel, ints, eps)?;
        let s1 = first_sideband(kernel, ints, eps, &plus, omega)?;
        let sm1 = first_sideband(kernel, ints, eps, &minus, -omega)?;
        let line = kernel.line(eps)?;
        Ok(TwoPhotonAmplitudeSet {
            s0,
            s1,
            sm1,
            reflection: -I * kernel.gamma * kernel.u.dot(&line),
            line,
            vertex: vertex_from(ints, eps)?,
            chi_plus: ints.dressed_modulation(eps, &plus, omega)?,
            chi_minus: ints.dressed_modulation(eps, &minus, -omega)?,
        })
    })
}

/// g²(t,t) of the reflected light on `t_grid`.
pub fn analytic_g2(
    array: &GiantArray,
    eps: f64,
    amps: &ModulationAmps,
    t_grid: &[f64],
) -> Result<Vec<f64>> {
    let h = two_photon_amplitudes(array, eps, amps)?.harmonics(amps.omega);
    Ok(t_grid.iter().map(|&t| h.at(t)).collect())
}
