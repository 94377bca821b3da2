//! Two driven, modulated qubits exchanging photons with a delay τ = lΔt,
//! evolved as a matrix product state over time bins of the waveguide field.
//!
//! Each step couples the system to the current bin (fresh vacuum) and to the
//! feedback bin emitted l steps earlier:
//!
//! U_k = exp[−iH_sys(t_k)Δt + V₁ + V₂],
//! V₁ = √γ[ΔB_R†(t_k) + ΔB_L†(t_{k−l})e^{iφ}]σ₁ − h.c.,
//! V₂ = √γ[ΔB_R†(t_{k−l})e^{iφ} + ΔB_L†(t_k)]σ₂ − h.c.
//!
//! A bin is a fused (right, left) pair of dimension d². Chain layout, left to
//! right: pending bins from newest to oldest, then the system site. The oldest
//! pending bin is the next feedback bin, so it always sits next to the
//! system; a new bin is swapped l−1 sites to the far end. Bins that have seen
//! both qubits are measured and dropped as a right-canonical environment.

use faer::Mat;
use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

type C = Complex64;

const I: C = C::new(0.0, 1.0);
const ZERO: C = C::new(0.0, 0.0);
const ONE: C = C::new(1.0, 0.0);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MpsError {
    #[error("invalid time-bin config: {0}")]
    InvalidConfig(String),
    #[error("step {step} discarded weight {discarded:e} above 1e-4")]
    BondOverflow { step: usize, discarded: f64 },
    #[error("state already advanced through all {0} steps")]
    StepsExhausted(usize),
    #[error("need at least l = {delay} steps, got {steps}")]
    TooFewSteps { steps: usize, delay: usize },
}

pub type Result<T> = std::result::Result<T, MpsError>;

/// Δ(t) = A cos(Ωt + phase).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QubitTone {
    #[serde(rename = "A")]
    pub amplitude: f64,
    #[serde(rename = "Omega")]
    pub omega: f64,
    #[serde(default)]
    pub phase: f64,
}

impl QubitTone {
    pub fn detuning(&self, t: f64) -> f64 {
        self.amplitude * (self.omega * t + self.phase).cos()
    }
}

/// `rabi[n]` enters as −½(Ω_n σ_n + Ω_n* σ_n†); `gamma` is the decay rate
/// into each direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeBinConfig {
    pub dt: f64,
    #[serde(rename = "l")]
    pub delay_bins: usize,
    pub varphi: f64,
    pub gamma: f64,
    pub rabi: [C; 2],
    #[serde(default)]
    pub modulation: [QubitTone; 2],
    #[serde(default = "default_d_phys")]
    pub d_phys: usize,
    #[serde(default = "default_chi_max")]
    pub chi_max: usize,
    #[serde(default = "default_svd_tol")]
    pub svd_tol: f64,
}

fn default_d_phys() -> usize {
    2
}

fn default_chi_max() -> usize {
    64
}

fn default_svd_tol() -> f64 {
    1e-10
}

impl TimeBinConfig {
    /// Two qubits a delay `tau` apart, resonantly driven, unmodulated.
    pub fn new(dt: f64, tau: f64, varphi: f64, gamma: f64, rabi: [C; 2]) -> Self {
        Self {
            dt,
            delay_bins: (tau / dt).round().max(1.0) as usize,
            varphi,
            gamma,
            rabi,
            modulation: [QubitTone::default(); 2],
            d_phys: 2,
            chi_max: 64,
            svd_tol: 1e-10,
        }
    }

    pub fn with_modulation(mut self, tone: QubitTone) -> Self {
        self.modulation = [tone; 2];
        self
    }

    pub fn tau(&self) -> f64 {
        self.delay_bins as f64 * self.dt
    }

    /// Every violated invariant, in declaration order.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.dt.is_finite() && self.dt > 0.0) {
            out.push(format!("dt must be positive, got {}", self.dt));
        }
        if self.delay_bins < 1 {
            out.push("l must be at least 1".into());
        }
        if self.d_phys < 2 {
            out.push(format!("d_phys must be at least 2, got {}", self.d_phys));
        }
        if self.chi_max < 2 {
            out.push(format!("chi_max must be at least 2, got {}", self.chi_max));
        }
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            out.push(format!("gamma must be non-negative, got {}", self.gamma));
        }
        if !(self.svd_tol.is_finite() && self.svd_tol >= 0.0) {
            out.push(format!(
                "svd_tol must be non-negative, got {}",
                self.svd_tol
            ));
        }
        let finite = self.varphi.is_finite()
            && self
                .rabi
                .iter()
                .all(|r| r.re.is_finite() && r.im.is_finite())
            && self
                .modulation
                .iter()
                .all(|m| m.amplitude.is_finite() && m.omega.is_finite() && m.phase.is_finite());
        if !finite {
            out.push("non-finite phase, drive or modulation".into());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        match self.violations().into_iter().next() {
            Some(m) => Err(MpsError::InvalidConfig(m)),
            None => Ok(()),
        }
    }
}

/// Rank-3 tensor with index order (left bond, physical, right bond).
#[derive(Debug, Clone)]
struct Site {
    dl: usize,
    d: usize,
    dr: usize,
    data: Vec<C>,
}

impl Site {
    fn at(&self, a: usize, i: usize, b: usize) -> C {
        self.data[(a * self.d + i) * self.dr + b]
    }

    /// Bond-1 product tensor.
    fn basis(d: usize, amps: &[C]) -> Self {
        Self {
            dl: 1,
            d,
            dr: 1,
            data: amps.to_vec(),
        }
    }
}

/// Result of a truncated SVD split.
struct Split {
    left: Site,
    right: Site,
    discarded: f64,
}

/// Splits a (dl·d1) × (d2·dr) matrix, keeping the norm on the side named by
/// `center_left`.
fn split(
    m: Mat<C>,
    dl: usize,
    d1: usize,
    d2: usize,
    dr: usize,
    center_left: bool,
    chi_max: usize,
    tol: f64,
) -> Split {
    let svd = m.thin_svd().expect("svd");
    let (u, v, sv) = (svd.U(), svd.V(), svd.S().column_vector());
    // faer returns singular values sorted descending
    let sigma: Vec<f64> = (0..sv.nrows()).map(|i| sv[i].re).collect();
    let total: f64 = sigma.iter().map(|s| s * s).sum();
    let keep = sigma
        .iter()
        .take(chi_max)
        .take_while(|&&s| s > 0.0 && s * s > tol * total)
        .count()
        .max(1);
    let kept: f64 = sigma[..keep].iter().map(|s| s * s).sum();
    let discarded = if total > 0.0 {
        (total - kept) / total
    } else {
        0.0
    };
    // renormalise so truncation does not leak norm
    let scale = if kept > 0.0 {
        (total / kept).sqrt()
    } else {
        1.0
    };
    let mut left = vec![ZERO; dl * d1 * keep];
    let mut right = vec![ZERO; keep * d2 * dr];
    for col in 0..keep {
        let s = sigma[col] * scale;
        let (wl, wr) = if center_left { (s, 1.0) } else { (1.0, s) };
        for row in 0..dl * d1 {
            left[row * keep + col] = u[(row, col)] * wl;
        }
        for c in 0..d2 * dr {
            right[col * d2 * dr + c] = v[(c, col)].conj() * wr;
        }
    }
    Split {
        left: Site {
            dl,
            d: d1,
            dr: keep,
            data: left,
        },
        right: Site {
            dl: keep,
            d: d2,
            dr,
            data: right,
        },
        discarded,
    }
}

/// Moves the orthogonality center from `carry` into `next` without
/// truncation; returns the left-canonical `carry` and the new center.
fn shift_right(carry: &Site, next: &Site) -> (Site, Site) {
    let m = Mat::<C>::from_fn(carry.dl * carry.d, carry.dr, |r, c| {
        carry.data[r * carry.dr + c]
    });
    let qr = m.qr();
    let q = qr.compute_thin_Q();
    let r = qr.thin_R();
    let k = q.ncols();
    let left = Site {
        dl: carry.dl,
        d: carry.d,
        dr: k,
        data: (0..carry.dl * carry.d * k)
            .map(|x| q[(x / k, x % k)])
            .collect(),
    };
    let next_m = Mat::<C>::from_fn(next.dl, next.d * next.dr, |row, c| {
        next.data[row * next.d * next.dr + c]
    });
    let prod = r * next_m;
    let w = next.d * next.dr;
    let center = Site {
        dl: k,
        d: next.d,
        dr: next.dr,
        data: (0..k * w).map(|x| prod[(x / w, x % w)]).collect(),
    };
    (left, center)
}

/// Contracts two neighbouring sites into theta(a, i, j, b), returned as a
/// (dl·dA) × (dB·dr) matrix, optionally with the physical indices swapped.
fn merge(a: &Site, b: &Site, swap: bool) -> Mat<C> {
    let (d1, d2) = if swap { (b.d, a.d) } else { (a.d, b.d) };
    let am = Mat::<C>::from_fn(a.dl * a.d, a.dr, |r, c| a.data[r * a.dr + c]);
    let bm = Mat::<C>::from_fn(b.dl, b.d * b.dr, |r, c| b.data[r * b.d * b.dr + c]);
    let prod = am * bm;
    // prod rows (l, i), cols (j, r)
    Mat::from_fn(a.dl * d1, d2 * b.dr, |row, col| {
        let (l, p1) = (row / d1, row % d1);
        let (p2, r) = (col / b.dr, col % b.dr);
        let (i, j) = if swap { (p2, p1) } else { (p1, p2) };
        prod[(l * a.d + i, j * b.dr + r)]
    })
}

/// Populations of both qubits and the output photon flux (photons per unit
/// time) of the most recently completed bin.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct Observables {
    pub pop1: f64,
    pub pop2: f64,
    pub flux_left: f64,
    pub flux_right: f64,
}

#[derive(Debug, Clone)]
pub struct MPSState {
    /// Pending bins newest-first, then the system site (always last).
    sites: Vec<Site>,
    step: usize,
    n_steps: usize,
    /// Accumulated discarded weight.
    pub truncation_error: f64,
    pub max_bond: usize,
    /// Largest single-truncation discarded weight seen in the last step.
    pub worst_cut: f64,
    last_flux: (f64, f64),
}

impl MPSState {
    pub fn step_index(&self) -> usize {
        self.step
    }

    pub fn time(&self, config: &TimeBinConfig) -> f64 {
        self.step as f64 * config.dt
    }

    pub fn bond_dims(&self) -> Vec<usize> {
        self.sites.iter().map(|s| s.dr).collect()
    }

    pub fn norm(&self) -> f64 {
        // left part is left-canonical and the environment right-canonical
        self.sites.last().map_or(0.0, |s| {
            s.data.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt()
        })
    }
}

/// All bins in vacuum and both qubits in |g⟩.
pub fn init_vacuum(config: &TimeBinConfig, n_steps: usize) -> Result<MPSState> {
    init_product(config, n_steps, [ONE, ZERO, ZERO, ZERO])
}

/// Product initial state with the two-qubit amplitudes ordered
/// |gg⟩, |ge⟩, |eg⟩, |ee⟩ (qubit 1 first).
pub fn init_product(config: &TimeBinConfig, n_steps: usize, system: [C; 4]) -> Result<MPSState> {
    config.validate()?;
    if n_steps < config.delay_bins {
        return Err(MpsError::TooFewSteps {
            steps: n_steps,
            delay: config.delay_bins,
        });
    }
    let norm = system.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt();
    if !(norm > 0.0 && norm.is_finite()) {
        return Err(MpsError::InvalidConfig(
            "system amplitudes must be normalisable".into(),
        ));
    }
    let amps: Vec<C> = system.iter().map(|x| x / norm).collect();
    Ok(MPSState {
        sites: vec![Site::basis(4, &amps)],
        step: 0,
        n_steps,
        truncation_error: 0.0,
        max_bond: 1,
        worst_cut: 0.0,
        last_flux: (0.0, 0.0),
    })
}

/// Bosonic annihilator truncated at d levels.
fn annihilator(d: usize) -> DMatrix<C> {
    DMatrix::from_fn(d, d, |i, j| {
        if j == i + 1 {
            C::new((j as f64).sqrt(), 0.0)
        } else {
            ZERO
        }
    })
}

/// Step generator on feedback bin ⊗ system ⊗ current bin, with bin index
/// n_R·d + n_L and system index 2·q₁ + q₂.
fn step_unitary(config: &TimeBinConfig, t: f64) -> DMatrix<C> {
    let d = config.d_phys;
    let a = annihilator(d);
    let id_d = DMatrix::<C>::identity(d, d);
    let bin_r = a.kronecker(&id_d);
    let bin_l = id_d.kronecker(&a);
    let id_bin = DMatrix::<C>::identity(d * d, d * d);
    let sm = DMatrix::from_row_slice(2, 2, &[ZERO, ONE, ZERO, ZERO]);
    let id2 = DMatrix::<C>::identity(2, 2);
    let s1 = sm.kronecker(&id2);
    let s2 = id2.kronecker(&sm);
    let id_sys = DMatrix::<C>::identity(4, 4);

    // operators on (feedback, system, current)
    let on_f = |op: &DMatrix<C>| op.kronecker(&id_sys).kronecker(&id_bin);
    let on_s = |op: &DMatrix<C>| id_bin.kronecker(op).kronecker(&id_bin);
    let on_c = |op: &DMatrix<C>| id_bin.kronecker(&id_sys).kronecker(op);

    let mut h_sys = DMatrix::<C>::zeros(4, 4);
    for (n, s) in [&s1, &s2].into_iter().enumerate() {
        let det = config.modulation[n].detuning(t);
        let rabi = config.rabi[n];
        h_sys += s.adjoint() * s * C::new(det, 0.0)
            - (s * rabi + s.adjoint() * rabi.conj()) * C::new(0.5, 0.0);
    }
    let k = (config.gamma * config.dt).sqrt();
    let phase = C::from_polar(1.0, config.varphi);
    let s1f = on_s(&s1);
    let s2f = on_s(&s2);
    let emit1 = (on_c(&bin_r).adjoint() + on_f(&bin_l).adjoint() * phase) * &s1f;
    let emit2 = (on_f(&bin_r).adjoint() * phase + on_c(&bin_l).adjoint()) * &s2f;
    let v = (&emit1 + &emit2) * C::new(k, 0.0);
    let gen = on_s(&h_sys) * (-I * config.dt) + &v - v.adjoint();
    gen.exp()
}

/// Advances one time bin. On `BondOverflow` the step has still been applied
/// and the state stays usable.
pub fn step(state: &mut MPSState, config: &TimeBinConfig) -> Result<()> {
    if state.step >= state.n_steps {
        return Err(MpsError::StepsExhausted(state.n_steps));
    }
    let d2 = config.d_phys * config.d_phys;
    let l = config.delay_bins;
    let k = state.step;
    let t = k as f64 * config.dt;
    let mut discarded = 0.0;
    let mut worst: f64 = 0.0;

    // theta(a, f, s, e): feedback bin and system, center on the system site
    let sys = state.sites.pop().expect("system site");
    let de = sys.dr;
    let (theta, dl) = if k >= l {
        let f = state.sites.pop().expect("feedback bin");
        let dl = f.dl;
        (merge(&f, &sys, false), dl)
    } else {
        // no feedback yet: the bin emitted before t = 0 is vacuum
        let m = Mat::<C>::from_fn(sys.dl * d2, 4 * de, |row, col| {
            if row % d2 == 0 {
                sys.data[(row / d2) * 4 * de + col]
            } else {
                ZERO
            }
        });
        (m, sys.dl)
    };
    // with the fresh bin c in vacuum only the columns (f, s, c = 0) of U act
    let u = step_unitary(config, t);
    let u_in = Mat::<C>::from_fn(d2 * 4 * d2, d2 * 4, |row, col| u[(row, col * d2)]);
    // out[(f', s', c'), (a, e)] = U_in · theta reshaped to (f, s) × (a, e)
    let theta_fs = Mat::<C>::from_fn(d2 * 4, dl * de, |row, col| {
        let (f, s) = (row / 4, row % 4);
        let (a, e) = (col / de, col % de);
        theta[(a * d2 + f, s * de + e)]
    });
    let out = u_in * theta_fs;

    // flux of the completed feedback bin: ⟨n_R⟩, ⟨n_L⟩
    let dp = config.d_phys;
    let (mut n_r, mut n_l) = (0.0, 0.0);
    for row in 0..d2 * 4 * d2 {
        let f = row / (4 * d2);
        let p: f64 = (0..dl * de).map(|col| out[(row, col)].norm_sqr()).sum();
        n_r += p * (f / dp) as f64;
        n_l += p * (f % dp) as f64;
    }
    state.last_flux = (n_l / config.dt, n_r / config.dt);

    // reorder to (a, c, s | f, e) and split off the completed bin to the right
    let m = Mat::<C>::from_fn(dl * d2 * 4, d2 * de, |row, col| {
        let (a, c, s) = (row / (d2 * 4), (row / 4) % d2, row % 4);
        let (f, e) = (col / de, col % de);
        out[((f * 4 + s) * d2 + c, a * de + e)]
    });
    let sp = split(m, dl, d2 * 4, d2, de, true, config.chi_max, config.svd_tol);
    discarded += sp.discarded;
    worst = worst.max(sp.discarded);
    // the completed bin (sp.right) is right-canonical: drop it into the environment
    let left = sp.left;
    let de = left.dr;
    // (a, c | s, e)
    let m = Mat::<C>::from_fn(dl * d2, 4 * de, |row, col| {
        let (a, c) = (row / d2, row % d2);
        let (s, e) = (col / de, col % de);
        left.at(a, c * 4 + s, e)
    });
    let sp = split(m, dl, d2, 4, de, true, config.chi_max, config.svd_tol);
    discarded += sp.discarded;
    worst = worst.max(sp.discarded);
    let mut fresh = sp.left;
    let system = sp.right;

    // carry the new bin to the far end of the pending queue
    let mut right_part = vec![system];
    while let Some(prev) = state.sites.pop() {
        let m = merge(&prev, &fresh, true);
        let sp = split(
            m,
            prev.dl,
            fresh.d,
            prev.d,
            fresh.dr,
            true,
            config.chi_max,
            config.svd_tol,
        );
        discarded += sp.discarded;
        worst = worst.max(sp.discarded);
        fresh = sp.left;
        right_part.push(sp.right);
    }
    // bring the orthogonality center back to the system site
    let mut sites = Vec::with_capacity(right_part.len() + 1);
    let mut carry = fresh;
    while let Some(next) = right_part.pop() {
        let (left, center) = shift_right(&carry, &next);
        sites.push(left);
        carry = center;
    }
    sites.push(carry);
    state.sites = sites;
    state.max_bond = state.max_bond.max(
        state
            .sites
            .iter()
            .map(|s| s.dr.max(s.dl))
            .max()
            .unwrap_or(1),
    );
    state.truncation_error += discarded;
    state.worst_cut = worst;
    state.step += 1;
    if discarded > 1e-4 {
        return Err(MpsError::BondOverflow { step: k, discarded });
    }
    Ok(())
}

/// Mean photon number in the pending bins (emitted, not yet output).
pub fn photons_in_flight(state: &MPSState, config: &TimeBinConfig) -> f64 {
    let dp = config.d_phys;
    let sys = state.sites.last().expect("system site");
    // env(b, b') over the left bond of the site just contracted
    let mut env = vec![ZERO; sys.dl * sys.dl];
    for a in 0..sys.dl {
        for b in 0..sys.dl {
            let mut acc = ZERO;
            for s in 0..sys.d {
                for e in 0..sys.dr {
                    acc += sys.at(a, s, e) * sys.at(b, s, e).conj();
                }
            }
            env[a * sys.dl + b] = acc;
        }
    }
    let mut total = 0.0;
    for site in state.sites.iter().rev().skip(1) {
        let mut next = vec![ZERO; site.dl * site.dl];
        for i in 0..site.d {
            let n = (i / dp + i % dp) as f64;
            for a in 0..site.dl {
                for a2 in 0..site.dl {
                    let mut acc = ZERO;
                    for b in 0..site.dr {
                        let x = site.at(a, i, b);
                        if x == ZERO {
                            continue;
                        }
                        for b2 in 0..site.dr {
                            acc += x * env[b * site.dr + b2] * site.at(a2, i, b2).conj();
                        }
                    }
                    next[a * site.dl + a2] += acc;
                    if a == a2 {
                        total += n * acc.re;
                    }
                }
            }
        }
        env = next;
    }
    total
}

pub fn observables(state: &MPSState) -> Observables {
    let sys = state.sites.last().expect("system site");
    let (mut p1, mut p2, mut total) = (0.0, 0.0, 0.0);
    for a in 0..sys.dl {
        for s in 0..4 {
            for e in 0..sys.dr {
                let p = sys.at(a, s, e).norm_sqr();
                total += p;
                if s >= 2 {
                    p1 += p;
                }
                if s % 2 == 1 {
                    p2 += p;
                }
            }
        }
    }
    Observables {
        pop1: p1 / total,
        pop2: p2 / total,
        flux_left: state.last_flux.0,
        flux_right: state.last_flux.1,
    }
}

/// One output row per step, after the step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrajectoryRow {
    pub t: f64,
    pub pop1: f64,
    pub pop2: f64,
    pub flux_left: f64,
    pub flux_right: f64,
    pub max_bond: usize,
    pub discarded_weight: f64,
}

/// Runs `n_steps` from vacuum and records observables after each step.
pub fn run(config: &TimeBinConfig, n_steps: usize) -> Result<Vec<TrajectoryRow>> {
    let mut state = init_vacuum(config, n_steps.max(config.delay_bins))?;
    state.n_steps = n_steps.max(config.delay_bins);
    run_from(&mut state, config, n_steps)
}

pub fn run_from(
    state: &mut MPSState,
    config: &TimeBinConfig,
    n_steps: usize,
) -> Result<Vec<TrajectoryRow>> {
    let mut rows = Vec::with_capacity(n_steps);
    record(state, config, n_steps, &mut rows)?;
    Ok(rows)
}

/// Like [`run_from`] but appends to `rows` as it goes. A step that overflows
/// is completed and recorded before the error is returned, so the caller
/// keeps the trajectory and may continue stepping.
pub fn record(
    state: &mut MPSState,
    config: &TimeBinConfig,
    n_steps: usize,
    rows: &mut Vec<TrajectoryRow>,
) -> Result<()> {
    for _ in 0..n_steps {
        let outcome = step(state, config);
        if matches!(outcome, Err(MpsError::StepsExhausted(_))) {
            return outcome;
        }
        let o = observables(state);
        rows.push(TrajectoryRow {
            t: state.time(config),
            pop1: o.pop1,
            pop2: o.pop2,
            flux_left: o.flux_left,
            flux_right: o.flux_right,
            max_bond: state.sites.iter().map(|s| s.dr).max().unwrap_or(1),
            discarded_weight: state.truncation_error,
        });
        outcome?;
    }
    Ok(())
}
