//! A single modulated emitter under a rectangular coherent pulse, propagated
//! with its non-Hermitian effective Hamiltonian
//! H(t) = (Δ(t) − iγ/2)σ†σ + ξΘ(t)Θ(T_d − t)(σ† + σ)
//! in the frame rotating at ω₀.
//!
//! The stiff Δ(t) part is removed exactly: with f(t) = ϖ(t)e^{−γt/2} and
//! F = diag(1, f), U(t₂,t₁) = F(t₂) Ũ(t₂,t₁) F(t₁)⁻¹ where Ũ only feels the
//! drive, ξ[[0, f],[1/f, 0]]. Ũ is integrated with adaptive Dormand–Prince
//! steps that never cross the pulse edges.

use std::f64::consts::PI;

use nalgebra::{Matrix2, Vector2};
use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::modulation::{ModulationError, ModulationSpec};

type C = Complex64;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EmitterError {
    #[error("time step {dt:.3e} exceeds the limit {limit:.3e} = min(0.01/γ, 0.05/Ω_max)")]
    StepTooLarge { dt: f64, limit: f64 },
    #[error("emitter still holds {residual:.3e} excited population at t_f")]
    EmitterNotRelaxed { residual: f64 },
    #[error(
        "drive amplitude ξ={xi} outside [0, 0.1γ]; the one-photon truncation needs a weak drive"
    )]
    DriveTooStrong { xi: f64 },
    #[error("pulse duration must be positive, got {0}")]
    BadDuration(f64),
    #[error("decay rate must be positive, got {0}")]
    BadDecay(f64),
    #[error("time arguments out of order: t1={t1}, t2={t2}")]
    BadInterval { t1: f64, t2: f64 },
    #[error(transparent)]
    Modulation(#[from] ModulationError),
}

/// Rectangular pulse of amplitude ξ on [0, T_d].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriveSpec {
    pub xi: f64,
    #[serde(rename = "T_d")]
    pub duration: f64,
}

impl DriveSpec {
    /// ξ = 0.1γ, T_d = 2/γ.
    pub fn default_for(gamma: f64) -> Self {
        Self {
            xi: 0.1 * gamma,
            duration: 2.0 / gamma,
        }
    }

    fn amplitude(&self, t: f64) -> f64 {
        if (0.0..=self.duration).contains(&t) {
            self.xi
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Emitter {
    pub modulation: ModulationSpec,
    pub gamma: f64,
    pub drive: DriveSpec,
}

impl Emitter {
    pub fn new(
        modulation: ModulationSpec,
        gamma: f64,
        drive: DriveSpec,
    ) -> Result<Self, EmitterError> {
        let em = Self {
            modulation,
            gamma,
            drive,
        };
        em.validate()?;
        Ok(em)
    }

    pub fn validate(&self) -> Result<(), EmitterError> {
        self.modulation.validate()?;
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(EmitterError::BadDecay(self.gamma));
        }
        if !(self.drive.duration > 0.0 && self.drive.duration.is_finite()) {
            return Err(EmitterError::BadDuration(self.drive.duration));
        }
        if !(0.0..=0.1 * self.gamma * (1.0 + 1e-12)).contains(&self.drive.xi) {
            return Err(EmitterError::DriveTooStrong { xi: self.drive.xi });
        }
        Ok(())
    }

    /// Largest admissible grid step, min(0.01/γ, 0.05/Ω_max).
    pub fn max_step(&self) -> f64 {
        let w = self.modulation.max_tone_frequency();
        let lim = 0.01 / self.gamma;
        if w > 0.0 {
            lim.min(0.05 / w)
        } else {
            lim
        }
    }

    fn check_step(&self, dt: f64) -> Result<(), EmitterError> {
        let limit = self.max_step();
        if !(dt > 0.0) || dt > limit * (1.0 + 1e-12) {
            return Err(EmitterError::StepTooLarge { dt, limit });
        }
        Ok(())
    }

    /// f(t) = ϖ(t) e^{−γt/2}, the free excited-state amplitude.
    fn frame(&self, t: f64) -> C {
        self.modulation.floquet_phase(t) * (-0.5 * self.gamma * t).exp()
    }

    /// Right-hand side of the frame equation dŨ/dt = −iK(t)Ũ.
    fn rhs(&self, t: f64, u: &[C; 4]) -> [C; 4] {
        let xi = self.drive.amplitude(t);
        if xi == 0.0 {
            return [C::new(0.0, 0.0); 4];
        }
        let f = self.frame(t);
        let k01 = -C::i() * xi * f;
        let k10 = -C::i() * xi / f;
        // row-major [u00, u01, u10, u11]
        [k01 * u[2], k01 * u[3], k10 * u[0], k10 * u[1]]
    }

    /// Advance Ũ from t0 to t1 (no pulse edge strictly inside).
    fn advance_smooth(&self, u: &mut [C; 4], t0: f64, t1: f64, h_max: f64) {
        let mid = 0.5 * (t0 + t1);
        if self.drive.amplitude(mid) == 0.0 {
            return;
        }
        let mut t = t0;
        let mut h = (t1 - t0).min(h_max);
        while t < t1 - 1e-15 * t1.abs().max(1.0) {
            h = h.min(t1 - t).min(h_max);
            let (next, err) = dopri_step(self, t, u, h);
            let scale = u.iter().map(|z| z.norm()).fold(1e-3, f64::max);
            let tol = 1e-11 * scale;
            if err <= tol || h < 1e-14 {
                *u = next;
                t += h;
                let grow = if err > 0.0 {
                    0.9 * (tol / err).powf(0.2)
                } else {
                    5.0
                };
                h *= grow.clamp(0.2, 5.0);
            } else {
                h *= (0.9 * (tol / err).powf(0.25)).clamp(0.1, 0.9);
            }
        }
    }

    /// Advance Ũ across [t0, t1], splitting at the pulse edges.
    fn advance(&self, u: &mut [C; 4], t0: f64, t1: f64, h_max: f64) {
        let mut cuts = vec![t0];
        for edge in [0.0, self.drive.duration] {
            if edge > t0 && edge < t1 {
                cuts.push(edge);
            }
        }
        cuts.push(t1);
        for w in cuts.windows(2) {
            self.advance_smooth(u, w[0], w[1], h_max);
        }
    }

    fn lab(&self, u: &[C; 4], t2: f64, t1: f64) -> Matrix2<C> {
        let f2 = self.frame(t2);
        let f1 = self.frame(t1);
        Matrix2::new(u[0], u[1] / f1, f2 * u[2], f2 * u[3] / f1)
    }
}

// Dormand–Prince 5(4) tableau.
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const B1: f64 = 35.0 / 384.0;
const B3: f64 = 500.0 / 1113.0;
const B4: f64 = 125.0 / 192.0;
const B5: f64 = -2187.0 / 6784.0;
const B6: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

fn dopri_step(em: &Emitter, t: f64, u: &[C; 4], h: f64) -> ([C; 4], f64) {
    let comb = |terms: &[(f64, &[C; 4])]| -> [C; 4] {
        let mut out = *u;
        for (c, k) in terms {
            for i in 0..4 {
                out[i] += k[i] * (h * c);
            }
        }
        out
    };
    let k1 = em.rhs(t, u);
    let k2 = em.rhs(t + h / 5.0, &comb(&[(A21, &k1)]));
    let k3 = em.rhs(t + 0.3 * h, &comb(&[(A31, &k1), (A32, &k2)]));
    let k4 = em.rhs(t + 0.8 * h, &comb(&[(A41, &k1), (A42, &k2), (A43, &k3)]));
    let k5 = em.rhs(
        t + 8.0 / 9.0 * h,
        &comb(&[(A51, &k1), (A52, &k2), (A53, &k3), (A54, &k4)]),
    );
    let k6 = em.rhs(
        t + h,
        &comb(&[(A61, &k1), (A62, &k2), (A63, &k3), (A64, &k4), (A65, &k5)]),
    );
    let next = comb(&[(B1, &k1), (B3, &k3), (B4, &k4), (B5, &k5), (B6, &k6)]);
    let k7 = em.rhs(t + h, &next);
    let mut err = 0.0f64;
    for i in 0..4 {
        let e = (k1[i] * E1 + k3[i] * E3 + k4[i] * E4 + k5[i] * E5 + k6[i] * E6 + k7[i] * E7) * h;
        err = err.max(e.norm());
    }
    (next, err)
}

/// U_eff(t2, t1) in the frame rotating at ω₀.
pub fn effective_propagator(
    em: &Emitter,
    t1: f64,
    t2: f64,
    dt: f64,
) -> Result<Matrix2<C>, EmitterError> {
    em.validate()?;
    em.check_step(dt)?;
    if !(t2 >= t1) {
        return Err(EmitterError::BadInterval { t1, t2 });
    }
    let one = C::new(1.0, 0.0);
    let zero = C::new(0.0, 0.0);
    let mut u = [one, zero, zero, one];
    em.advance(&mut u, t1, t2, dt);
    Ok(em.lab(&u, t2, t1))
}

/// Propagator samples U(t_j, 0) on a uniform grid t_j = j·h over [0, t_end].
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub step: f64,
    pub props: Vec<Matrix2<C>>,
}

impl Trajectory {
    pub fn compute(em: &Emitter, t_end: f64, dt: f64) -> Result<Self, EmitterError> {
        em.validate()?;
        em.check_step(dt)?;
        let n = ((t_end / dt).ceil() as usize).max(1);
        let h = t_end / n as f64;
        let one = C::new(1.0, 0.0);
        let zero = C::new(0.0, 0.0);
        let mut u = [one, zero, zero, one];
        let mut props = Vec::with_capacity(n + 1);
        for j in 0..=n {
            let t = j as f64 * h;
            if j > 0 {
                em.advance(&mut u, (j - 1) as f64 * h, t, h);
            }
            props.push(em.lab(&u, t, 0.0));
        }
        Ok(Self { step: h, props })
    }

    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.props.len()).map(move |j| j as f64 * self.step)
    }

    /// U(t_j,0)|g⟩ = (c_g, c_e).
    fn state(&self, j: usize) -> Vector2<C> {
        self.props[j].column(0).into()
    }

    /// U(t_j,0)⁻¹|g⟩, so that U(t,s) = U(t,0)U(s,0)⁻¹ needs no second solve.
    fn back(&self, j: usize) -> Vector2<C> {
        let u = &self.props[j];
        let det = u[(0, 0)] * u[(1, 1)] - u[(0, 1)] * u[(1, 0)];
        Vector2::new(u[(1, 1)] / det, -u[(1, 0)] / det)
    }
}

/// Sector populations at one instant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Populations {
    pub t: f64,
    pub p0g: f64,
    pub p0e: f64,
    pub p1g: f64,
    pub p1e: f64,
}

impl Populations {
    pub fn total(&self) -> f64 {
        self.p0g + self.p0e + self.p1g + self.p1e
    }
}

/// P_{0,σ} and P_{1,σ} on every grid point of a trajectory, with
/// P_{1,σ}(t) = γ∫₀ᵗ |c_e(s)|² |⟨σ|U(t,s)|g⟩|² ds.
///
/// Writing ⟨σ|U(t,s)|g⟩ = Σ_j U_σj(t) v_j(s) with v = U(s,0)⁻¹|g⟩, the
/// s-integral collapses to a running 2×2 moment matrix, so the whole
/// trajectory costs one pass.
pub fn populations_on_trajectory(em: &Emitter, traj: &Trajectory) -> Vec<Populations> {
    let h = traj.step;
    let mut moment = Matrix2::<C>::zeros();
    let mut prev: Option<Matrix2<C>> = None;
    let mut out = Vec::with_capacity(traj.props.len());
    for (j, u) in traj.props.iter().enumerate() {
        let c = traj.state(j);
        let v = traj.back(j);
        let dens = v * v.adjoint() * C::new(em.gamma * c[1].norm_sqr(), 0.0);
        if let Some(p) = prev {
            moment += (p + dens) * C::new(0.5 * h, 0.0);
        }
        prev = Some(dens);
        let row = |s: usize| -> f64 {
            let mut acc = C::new(0.0, 0.0);
            for a in 0..2 {
                for b in 0..2 {
                    acc += u[(s, a)] * u[(s, b)].conj() * moment[(a, b)];
                }
            }
            acc.re.max(0.0)
        };
        out.push(Populations {
            t: j as f64 * h,
            p0g: c[0].norm_sqr(),
            p0e: c[1].norm_sqr(),
            p1g: row(0),
            p1e: row(1),
        });
    }
    out
}

/// Sector populations P_{0,g}, P_{0,e}, P_{1,g}, P_{1,e} at the requested times.
pub fn populations(
    em: &Emitter,
    t_grid: &[f64],
    dt: f64,
) -> Result<Vec<Populations>, EmitterError> {
    let t_end = t_grid.iter().copied().fold(0.0, f64::max);
    if t_end <= 0.0 {
        return Ok(t_grid
            .iter()
            .map(|&t| Populations {
                t,
                p0g: 1.0,
                p0e: 0.0,
                p1g: 0.0,
                p1e: 0.0,
            })
            .collect());
    }
    let traj = Trajectory::compute(em, t_end, dt)?;
    let all = populations_on_trajectory(em, &traj);
    Ok(t_grid
        .iter()
        .map(|&t| {
            let j = ((t / traj.step).round() as usize).min(all.len() - 1);
            Populations { t, ..all[j] }
        })
        .collect())
}

/// Amplitude integrand g(t) = ⟨g|U(t_f,t)σU(t,0)|g⟩ on the trajectory grid.
fn emission_integrand(traj: &Trajectory) -> Vec<C> {
    let u_final = traj.props.last().expect("nonempty trajectory");
    (0..traj.props.len())
        .map(|j| {
            let v = traj.back(j);
            (u_final[(0, 0)] * v[0] + u_final[(0, 1)] * v[1]) * traj.state(j)[1]
        })
        .collect()
}

fn relaxed_trajectory(em: &Emitter, t_f: f64, dt: f64) -> Result<Trajectory, EmitterError> {
    let traj = Trajectory::compute(em, t_f, dt)?;
    let pops = populations_on_trajectory(em, &traj);
    let last = pops.last().expect("nonempty trajectory");
    let residual = last.p0e + last.p1e;
    if residual > 1e-3 {
        return Err(EmitterError::EmitterNotRelaxed { residual });
    }
    Ok(traj)
}

/// |ψ(ω, t_f)|² on an absolute frequency grid, by direct quadrature of
/// ψ(ω) = −i√(γ/2π) ∫₀^{t_f} ⟨g|U(t_f,t)σU(t,0)|g⟩ e^{i(ω−ω₀)t} dt.
pub fn emission_spectrum(
    em: &Emitter,
    t_f: f64,
    omega_grid: &[f64],
    dt: f64,
) -> Result<Vec<f64>, EmitterError> {
    let traj = relaxed_trajectory(em, t_f, dt)?;
    let g = emission_integrand(&traj);
    let h = traj.step;
    let pref = em.gamma / (2.0 * PI);
    let omega0 = em.modulation.omega0;
    Ok(omega_grid
        .par_iter()
        .map(|&w| {
            let nu = w - omega0;
            let rot = C::from_polar(1.0, nu * h);
            let mut ph = C::new(1.0, 0.0);
            let mut acc = C::new(0.0, 0.0);
            let last = g.len() - 1;
            for (j, gj) in g.iter().enumerate() {
                let wgt = if j == 0 || j == last { 0.5 } else { 1.0 };
                acc += gj * ph * wgt;
                ph *= rot;
                if j % 1024 == 1023 {
                    ph = C::from_polar(1.0, nu * h * (j + 1) as f64);
                }
            }
            pref * (acc * h).norm_sqr()
        })
        .collect())
}

/// Emitted-photon weight in each comb window [kΩ − Ω/2, kΩ + Ω/2) around ω₀,
/// for |k| ≤ k_window, plus the total ∫|ψ|²dω. Uses a zero-padded FFT of the
/// amplitude integrand; the window sums inherit the discrete Parseval identity.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SidebandWeights {
    pub weights: Vec<(i32, f64)>,
    pub total: f64,
}

impl SidebandWeights {
    pub fn fraction(&self, pred: impl Fn(i32) -> bool) -> f64 {
        self.weights
            .iter()
            .filter(|(k, _)| pred(*k))
            .map(|(_, w)| w)
            .sum::<f64>()
            / self.total
    }
}

pub fn sideband_weights(
    em: &Emitter,
    t_f: f64,
    k_window: usize,
    dt: f64,
) -> Result<SidebandWeights, EmitterError> {
    let traj = relaxed_trajectory(em, t_f, dt)?;
    let mut buf = emission_integrand(&traj);
    let h = traj.step;
    let m = (2 * buf.len()).next_power_of_two();
    buf.resize(m, C::new(0.0, 0.0));
    FftPlanner::new().plan_fft_inverse(m).process(&mut buf);
    let d_omega = 2.0 * PI / (m as f64 * h);
    let pref = em.gamma / (2.0 * PI) * h * h;
    let omega = em.modulation.omega;
    let kw = k_window as i32;
    let mut weights: Vec<(i32, f64)> = (-kw..=kw).map(|k| (k, 0.0)).collect();
    let mut total = 0.0;
    for (idx, z) in buf.iter().enumerate() {
        let signed = if idx < m / 2 {
            idx as f64
        } else {
            idx as f64 - m as f64
        };
        let nu = signed * d_omega;
        let p = pref * z.norm_sqr() * d_omega;
        total += p;
        let k = (nu / omega).round() as i32;
        if k.abs() <= kw {
            weights[(k + kw) as usize].1 += p;
        }
    }
    Ok(SidebandWeights { weights, total })
}
