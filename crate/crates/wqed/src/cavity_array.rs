//! Two modulated qubits side-coupled to a finite coupled-cavity array, the
//! discretised stand-in for the waveguide:
//!
//! H = Σ_n ω_n(t)σ_n†σ_n + ω_c Σ_j a_j†a_j − J Σ_j (a_j†a_{j+1} + h.c.)
//!     + g Σ_n (σ_n†a_{j_n} + h.c.)
//!
//! The dynamics is solved exactly in the one- and two-excitation sectors with
//! a matrix-free RK4. Everything runs in the frame rotating at ω_c, where the
//! cavity term is a global phase and ω_n(t) − ω_c = A cos(Ωt + α).
//!
//! Sites are 1-based in configs and 0-based in storage.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::f64::consts::{FRAC_1_SQRT_2, SQRT_2};
use thiserror::Error;

type C = Complex64;

const ZERO: C = C::new(0.0, 0.0);
const MINUS_I: C = C::new(0.0, -1.0);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LatticeError {
    #[error("invalid lattice config: {0}")]
    InvalidConfig(String),
    #[error("packet at {center} with width {sigma} needs 3σ clearance inside 1..={n_c}")]
    TooCloseToEdge { center: f64, sigma: f64, n_c: usize },
    #[error("dt = {dt} exceeds the RK4 guard {limit}")]
    StepTooLarge { dt: f64, limit: f64 },
    #[error("norm drifted by {drift:e} at t = {t}")]
    NormDrift { t: f64, drift: f64 },
    #[error("t = {t_max} lets edge reflections return to the atoms (limit {limit})")]
    EdgeReturn { t_max: f64, limit: f64 },
    #[error("time grid must be finite, non-negative and non-decreasing")]
    BadTimeGrid,
    #[error("state does not fit a lattice of {0} sites")]
    ShapeMismatch(usize),
}

pub type Result<T> = std::result::Result<T, LatticeError>;

/// ω_n(t) − ω_c = A cos(Ωt + α).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatticeTone {
    #[serde(rename = "A")]
    pub amplitude: f64,
    #[serde(rename = "Omega")]
    pub omega: f64,
    #[serde(default)]
    pub alpha: f64,
}

impl LatticeTone {
    pub fn detuning(&self, t: f64) -> f64 {
        self.amplitude * (self.omega * t + self.alpha).cos()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatticeConfig {
    #[serde(rename = "N_c")]
    pub n_c: usize,
    #[serde(default)]
    pub omega_c: f64,
    #[serde(rename = "J")]
    pub hopping: f64,
    pub g: f64,
    /// 1-based cavity indices of the two atoms.
    pub atom_sites: [usize; 2],
    #[serde(default)]
    pub modulation: [LatticeTone; 2],
}

impl LatticeConfig {
    /// Atoms at n₀ ∓ `half_gap` with the same tone on both, second one
    /// shifted by `alpha`.
    pub fn symmetric(
        n_c: usize,
        hopping: f64,
        g: f64,
        half_gap: usize,
        tone: LatticeTone,
        alpha: f64,
    ) -> Self {
        let n0 = (n_c + 1) / 2;
        Self {
            n_c,
            omega_c: 0.0,
            hopping,
            g,
            atom_sites: [n0 - half_gap, n0 + half_gap],
            modulation: [
                tone,
                LatticeTone {
                    alpha: tone.alpha + alpha,
                    ..tone
                },
            ],
        }
    }

    /// 1-based center cavity n₀.
    pub fn center(&self) -> usize {
        (self.n_c + 1) / 2
    }

    /// Every violated invariant, in declaration order.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.n_c < 3 || self.n_c % 2 == 0 {
            out.push(format!("N_c must be odd and at least 3, got {}", self.n_c));
        }
        if !(self.hopping.is_finite() && self.hopping > 0.0) {
            out.push(format!("J must be positive, got {}", self.hopping));
        }
        if !self.g.is_finite() || !self.omega_c.is_finite() {
            out.push("g and omega_c must be finite".into());
        }
        for &j in &self.atom_sites {
            if j < 1 || j > self.n_c {
                out.push(format!("atom site {j} outside 1..={}", self.n_c));
            }
        }
        for m in &self.modulation {
            if !(m.amplitude.is_finite() && m.omega.is_finite() && m.alpha.is_finite()) {
                out.push("non-finite modulation".into());
            } else if m.amplitude.abs() >= 2.0 * self.hopping {
                // keep the modulated resonance inside the band
                out.push(format!(
                    "|A| = {} must stay below the half-bandwidth 2J",
                    m.amplitude.abs()
                ));
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        match self.violations().into_iter().next() {
            Some(m) => Err(LatticeError::InvalidConfig(m)),
            None => Ok(()),
        }
    }

    /// Largest RK4 step the integrators accept, 0.02/J.
    pub fn max_step(&self) -> f64 {
        0.02 / self.hopping
    }

    /// Group velocity 2J sin k in sites per unit time.
    pub fn group_velocity(&self, k: f64) -> f64 {
        2.0 * self.hopping * k.sin()
    }

    /// Earliest time at which light leaving the atoms can bounce off a hard
    /// wall and come back.
    pub fn edge_return_time(&self) -> f64 {
        let lo = *self.atom_sites.iter().min().unwrap() - 1;
        let hi = self.n_c - *self.atom_sites.iter().max().unwrap();
        2.0 * lo.min(hi) as f64 / (2.0 * self.hopping)
    }

    fn sites0(&self) -> [usize; 2] {
        [self.atom_sites[0] - 1, self.atom_sites[1] - 1]
    }
}

/// Normalised Gaussian packet (π σ²)^{-1/4} e^{−(j−center)²/2σ²} e^{i k₀ j}
/// on 1-based sites; the output vector is indexed from 0.
pub fn gaussian_wavepacket(k0: f64, sigma: f64, center: f64, n_c: usize) -> Result<Vec<C>> {
    if !(sigma > 0.0 && sigma.is_finite() && k0.is_finite() && center.is_finite()) {
        return Err(LatticeError::InvalidConfig(
            "packet needs finite k0, center and σ > 0".into(),
        ));
    }
    let clearance = 3.0 * sigma;
    if center - clearance < 1.0 || center + clearance > n_c as f64 {
        return Err(LatticeError::TooCloseToEdge { center, sigma, n_c });
    }
    let mut psi: Vec<C> = (1..=n_c)
        .map(|j| {
            let x = j as f64 - center;
            C::from_polar((-x * x / (2.0 * sigma * sigma)).exp(), k0 * j as f64)
        })
        .collect();
    // the analytic prefactor is exact only on a continuum; normalise on the grid
    let norm = psi.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt();
    psi.iter_mut().for_each(|x| *x /= norm);
    Ok(psi)
}

/// Index of (j, j') with j ≤ j' in the packed upper triangle.
fn packed(n: usize, j: usize, k: usize) -> usize {
    j * n - j * (j + 1) / 2 + k
}

/// One photon or one excited atom.
#[derive(Debug, Clone, PartialEq)]
pub struct OneExcitationState {
    pub photon: Vec<C>,
    pub atoms: [C; 2],
}

impl OneExcitationState {
    pub fn from_packet(packet: Vec<C>) -> Self {
        Self {
            photon: packet,
            atoms: [ZERO; 2],
        }
    }

    pub fn norm(&self) -> f64 {
        self.photon
            .iter()
            .chain(&self.atoms)
            .map(|x| x.norm_sqr())
            .sum()
    }

    /// Photon probability on 1-based sites `from..=to`.
    pub fn photon_weight(&self, from: usize, to: usize) -> f64 {
        self.photon[from - 1..to].iter().map(|x| x.norm_sqr()).sum()
    }

    fn flatten(&self) -> Vec<C> {
        let mut v = self.photon.clone();
        v.extend_from_slice(&self.atoms);
        v
    }

    fn unflatten(&mut self, v: &[C]) {
        let n = self.photon.len();
        self.photon.copy_from_slice(&v[..n]);
        self.atoms = [v[n], v[n + 1]];
    }
}

/// Two excitations: two photons, a photon and an excited atom, or both atoms.
///
/// `pairs[packed(j, j')]` (j ≤ j') is the amplitude on the orthonormal state
/// a_j†a_{j'}†|G⟩ for j < j' and (a_j†)²/√2 |G⟩ on the diagonal, so that the
/// norm is a plain sum of squares. [`TwoExcitationState::phi`] converts to
/// the symmetric Φ of |Ψ⟩ = Σ_{jj'} Φ_{jj'} a_j†a_{j'}†|G⟩ + ….
#[derive(Debug, Clone, PartialEq)]
pub struct TwoExcitationState {
    n_c: usize,
    pairs: Vec<C>,
    /// C_{nj}: atom n excited and one photon on site j.
    pub atom_photon: [Vec<C>; 2],
    /// Amplitude of σ₁†σ₂†|G⟩.
    pub both_excited: C,
}

impl TwoExcitationState {
    pub fn vacuum_pairs(n_c: usize) -> Self {
        Self {
            n_c,
            pairs: vec![ZERO; n_c * (n_c + 1) / 2],
            atom_photon: [vec![ZERO; n_c], vec![ZERO; n_c]],
            both_excited: ZERO,
        }
    }

    pub fn n_c(&self) -> usize {
        self.n_c
    }

    /// Φ_{jj'} on 0-based sites.
    pub fn phi(&self, j: usize, k: usize) -> C {
        let (a, b) = if j <= k { (j, k) } else { (k, j) };
        let u = self.pairs[packed(self.n_c, a, b)];
        if a == b {
            u * FRAC_1_SQRT_2
        } else {
            u * 0.5
        }
    }

    pub fn norm(&self) -> f64 {
        self.pairs
            .iter()
            .chain(self.atom_photon[0].iter())
            .chain(self.atom_photon[1].iter())
            .map(|x| x.norm_sqr())
            .sum::<f64>()
            + self.both_excited.norm_sqr()
    }

    /// ⟨a_j†a_j⟩ for every site (0-based).
    pub fn occupation(&self) -> Vec<f64> {
        let n = self.n_c;
        let mut p = vec![0.0; n];
        for j in 0..n {
            for k in j..n {
                let w = self.pairs[packed(n, j, k)].norm_sqr();
                if j == k {
                    p[j] += 2.0 * w;
                } else {
                    p[j] += w;
                    p[k] += w;
                }
            }
        }
        for c in &self.atom_photon {
            for (pj, x) in p.iter_mut().zip(c) {
                *pj += x.norm_sqr();
            }
        }
        p
    }

    /// ⟨σ_n†σ_n⟩ for both atoms.
    pub fn populations(&self) -> [f64; 2] {
        let w = self.both_excited.norm_sqr();
        let pop = |c: &Vec<C>| c.iter().map(|x| x.norm_sqr()).sum::<f64>() + w;
        [pop(&self.atom_photon[0]), pop(&self.atom_photon[1])]
    }

    fn flatten(&self) -> Vec<C> {
        let mut v = self.pairs.clone();
        v.extend_from_slice(&self.atom_photon[0]);
        v.extend_from_slice(&self.atom_photon[1]);
        v.push(self.both_excited);
        v
    }

    fn unflatten(&mut self, v: &[C]) {
        let m = self.pairs.len();
        let n = self.n_c;
        self.pairs.copy_from_slice(&v[..m]);
        self.atom_photon[0].copy_from_slice(&v[m..m + n]);
        self.atom_photon[1].copy_from_slice(&v[m + n..m + 2 * n]);
        self.both_excited = v[m + 2 * n];
    }
}

/// 𝒩 of 𝒩 Σ_{jj'} [ψ₁(j)ψ₂(j') + ψ₂(j)ψ₁(j')] a_j†a_{j'}†|G⟩.
pub fn pair_normalization(packet1: &[C], packet2: &[C]) -> f64 {
    let overlap: C = packet1.iter().zip(packet2).map(|(a, b)| a.conj() * b).sum();
    let n1: f64 = packet1.iter().map(|x| x.norm_sqr()).sum();
    let n2: f64 = packet2.iter().map(|x| x.norm_sqr()).sum();
    // ‖Σ(...)a†a†|G⟩‖² = 4(n₁n₂ + |⟨ψ₁|ψ₂⟩|²)
    1.0 / (2.0 * (n1 * n2 + overlap.norm_sqr()).sqrt())
}

/// Symmetrised two-photon product state with both atoms in |g⟩.
pub fn init_two_photon(
    cfg: &LatticeConfig,
    packet1: &[C],
    packet2: &[C],
) -> Result<TwoExcitationState> {
    cfg.validate()?;
    let n = cfg.n_c;
    if packet1.len() != n || packet2.len() != n {
        return Err(LatticeError::ShapeMismatch(n));
    }
    let norm = pair_normalization(packet1, packet2);
    let mut s = TwoExcitationState::vacuum_pairs(n);
    for j in 0..n {
        for k in j..n {
            // coefficient of a_j†a_k† summed over both orderings
            let f = packet1[j] * packet2[k] + packet2[j] * packet1[k];
            s.pairs[packed(n, j, k)] = if j == k {
                f * norm * SQRT_2
            } else {
                f * norm * 2.0
            };
        }
    }
    Ok(s)
}

fn check_grid(t_grid: &[f64]) -> Result<()> {
    if t_grid.iter().any(|t| !t.is_finite() || *t < 0.0) || t_grid.windows(2).any(|w| w[1] < w[0]) {
        return Err(LatticeError::BadTimeGrid);
    }
    Ok(())
}

fn check_step(cfg: &LatticeConfig, dt: f64) -> Result<()> {
    let limit = cfg.max_step();
    if !(dt > 0.0 && dt <= limit * (1.0 + 1e-12)) {
        return Err(LatticeError::StepTooLarge { dt, limit });
    }
    Ok(())
}

/// Classical RK4 from t to each grid point; `rhs(t, y, dy)` writes −iHy.
fn integrate<F>(
    y: &mut [C],
    t_grid: &[f64],
    dt: f64,
    mut rhs: F,
    mut visit: impl FnMut(f64, &[C]) -> Result<()>,
) -> Result<()>
where
    F: FnMut(f64, &[C], &mut [C]),
{
    let n = y.len();
    let (mut k1, mut k2, mut k3, mut k4, mut tmp) = (
        vec![ZERO; n],
        vec![ZERO; n],
        vec![ZERO; n],
        vec![ZERO; n],
        vec![ZERO; n],
    );
    let mut t = 0.0;
    for &target in t_grid {
        let span = target - t;
        if span > 0.0 {
            let steps = (span / dt).ceil() as usize;
            let h = span / steps as f64;
            for s in 0..steps {
                let t0 = t + s as f64 * h;
                rhs(t0, y, &mut k1);
                for i in 0..n {
                    tmp[i] = y[i] + k1[i] * (0.5 * h);
                }
                rhs(t0 + 0.5 * h, &tmp, &mut k2);
                for i in 0..n {
                    tmp[i] = y[i] + k2[i] * (0.5 * h);
                }
                rhs(t0 + 0.5 * h, &tmp, &mut k3);
                for i in 0..n {
                    tmp[i] = y[i] + k3[i] * h;
                }
                rhs(t0 + h, &tmp, &mut k4);
                for i in 0..n {
                    y[i] += (k1[i] + (k2[i] + k3[i]) * 2.0 + k4[i]) * (h / 6.0);
                }
            }
            t = target;
        }
        visit(target, y)?;
    }
    Ok(())
}

/// −iH on the one-excitation vector [photon(0..n), atom1, atom2].
fn rhs_one(cfg: &LatticeConfig, t: f64, y: &[C], dy: &mut [C]) {
    let n = cfg.n_c;
    let jh = cfg.hopping;
    for j in 0..n {
        let mut hop = ZERO;
        if j > 0 {
            hop += y[j - 1];
        }
        if j + 1 < n {
            hop += y[j + 1];
        }
        dy[j] = -hop * jh;
    }
    let sites = cfg.sites0();
    for a in 0..2 {
        let det = cfg.modulation[a].detuning(t);
        dy[n + a] = y[n + a] * det + y[sites[a]] * cfg.g;
        dy[sites[a]] += y[n + a] * cfg.g;
    }
    dy.iter_mut().for_each(|x| *x *= MINUS_I);
}

/// −iH on the flattened two-excitation vector.
fn rhs_two(cfg: &LatticeConfig, t: f64, y: &[C], dy: &mut [C]) {
    let n = cfg.n_c;
    let m = n * (n + 1) / 2;
    let jh = cfg.hopping;
    let g = cfg.g;
    let sites = cfg.sites0();
    // symmetric two-photon wavefunction ψ_{ab} from the packed amplitudes
    let psi = |a: usize, b: usize| -> C {
        let (p, q) = if a <= b { (a, b) } else { (b, a) };
        let u = y[packed(n, p, q)];
        if p == q {
            u
        } else {
            u * FRAC_1_SQRT_2
        }
    };
    // (Hψ)_{jk} = −J Σ_nbr ψ; packed output carries the same weights as storage
    for j in 0..n {
        for k in j..n {
            let mut hop = ZERO;
            if j > 0 {
                hop += psi(j - 1, k);
            }
            if j + 1 < n {
                hop += psi(j + 1, k);
            }
            if k > 0 {
                hop += psi(j, k - 1);
            }
            if k + 1 < n {
                hop += psi(j, k + 1);
            }
            let w = if j == k { 1.0 } else { SQRT_2 };
            dy[packed(n, j, k)] = -hop * (jh * w);
        }
    }
    let c_off = [m, m + n];
    let w_idx = m + 2 * n;
    let w = y[w_idx];
    for a in 0..2 {
        let det = cfg.modulation[a].detuning(t);
        let base = c_off[a];
        for j in 0..n {
            let mut hop = ZERO;
            if j > 0 {
                hop += y[base + j - 1];
            }
            if j + 1 < n {
                hop += y[base + j + 1];
            }
            // photon absorbed at the atom's cavity: √2 ψ_{j_a, j}
            dy[base + j] = -hop * jh + y[base + j] * det + psi(sites[a], j) * (SQRT_2 * g);
        }
        // the atom's photon emitted into its cavity
        let ja = sites[a];
        for j in 0..n {
            let c = y[base + j] * g;
            if c == ZERO {
                continue;
            }
            let (p, q) = if ja <= j { (ja, j) } else { (j, ja) };
            // ψ_{ja,j} and ψ_{j,ja} each gain c/√2; packed weight √2 off the
            // diagonal, and the two halves coincide on it
            dy[packed(n, p, q)] += if p == q { c * SQRT_2 } else { c };
        }
    }
    // |e₁e₂⟩ ↔ one atom excited plus a photon at the other atom's cavity
    let d1 = cfg.modulation[0].detuning(t);
    let d2 = cfg.modulation[1].detuning(t);
    dy[w_idx] = w * (d1 + d2) + (y[c_off[0] + sites[1]] + y[c_off[1] + sites[0]]) * g;
    dy[c_off[0] + sites[1]] += w * g;
    dy[c_off[1] + sites[0]] += w * g;
    dy.iter_mut().for_each(|x| *x *= MINUS_I);
}

/// Lattice occupation and atom populations along a trajectory.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LatticeTrajectory {
    pub t: Vec<f64>,
    /// occupation[i][j] = P_j(t_i), 0-based j.
    pub occupation: Vec<Vec<f64>>,
    pub populations: Vec<[f64; 2]>,
    pub norm: Vec<f64>,
}

const NORM_DRIFT: f64 = 1e-5;

fn common_checks(cfg: &LatticeConfig, t_grid: &[f64], dt: f64) -> Result<()> {
    cfg.validate()?;
    check_step(cfg, dt)?;
    check_grid(t_grid)?;
    let t_max = t_grid.last().copied().unwrap_or(0.0);
    let limit = cfg.edge_return_time();
    if t_max > limit {
        return Err(LatticeError::EdgeReturn { t_max, limit });
    }
    Ok(())
}

/// Evolves `state` in place through `t_grid` (starting at t = 0).
pub fn evolve_lattice(
    cfg: &LatticeConfig,
    state: &mut TwoExcitationState,
    t_grid: &[f64],
    dt: f64,
) -> Result<LatticeTrajectory> {
    common_checks(cfg, t_grid, dt)?;
    if state.n_c != cfg.n_c {
        return Err(LatticeError::ShapeMismatch(cfg.n_c));
    }
    let norm0 = state.norm();
    let mut traj = LatticeTrajectory {
        t: Vec::new(),
        occupation: Vec::new(),
        populations: Vec::new(),
        norm: Vec::new(),
    };
    let mut y = state.flatten();
    let mut scratch = state.clone();
    integrate(
        &mut y,
        t_grid,
        dt,
        |t, y, dy| rhs_two(cfg, t, y, dy),
        |t, y| {
            scratch.unflatten(y);
            let norm = scratch.norm();
            if (norm - norm0).abs() > NORM_DRIFT {
                return Err(LatticeError::NormDrift {
                    t,
                    drift: norm - norm0,
                });
            }
            traj.t.push(t);
            traj.occupation.push(scratch.occupation());
            traj.populations.push(scratch.populations());
            traj.norm.push(norm);
            Ok(())
        },
    )?;
    state.unflatten(&y);
    Ok(traj)
}

/// Single-excitation counterpart of [`evolve_lattice`]; returns the state at
/// every grid point.
pub fn evolve_single(
    cfg: &LatticeConfig,
    state: &mut OneExcitationState,
    t_grid: &[f64],
    dt: f64,
) -> Result<Vec<OneExcitationState>> {
    common_checks(cfg, t_grid, dt)?;
    if state.photon.len() != cfg.n_c {
        return Err(LatticeError::ShapeMismatch(cfg.n_c));
    }
    let norm0 = state.norm();
    let mut out = Vec::new();
    let mut y = state.flatten();
    let mut scratch = state.clone();
    integrate(
        &mut y,
        t_grid,
        dt,
        |t, y, dy| rhs_one(cfg, t, y, dy),
        |t, y| {
            scratch.unflatten(y);
            let drift = scratch.norm() - norm0;
            if drift.abs() > NORM_DRIFT {
                return Err(LatticeError::NormDrift { t, drift });
            }
            out.push(scratch.clone());
            Ok(())
        },
    )?;
    state.unflatten(&y);
    Ok(out)
}

/// Fraction of a single-photon packet (momentum `k0`, width `sigma`) sent
/// from the left that ends up beyond the right atom once the scattered
/// pieces have separated.
pub fn single_photon_transmission(
    cfg: &LatticeConfig,
    k0: f64,
    sigma: f64,
    dt: f64,
) -> Result<f64> {
    cfg.validate()?;
    let left = *cfg.atom_sites.iter().min().unwrap() as f64;
    let right = *cfg.atom_sites.iter().max().unwrap();
    let v = cfg.group_velocity(k0);
    if v <= 0.0 {
        return Err(LatticeError::InvalidConfig(format!(
            "k0 = {k0} does not move right"
        )));
    }
    let start = left - 4.0 * sigma - 2.0;
    let packet = gaussian_wavepacket(k0, sigma, start, cfg.n_c)?;
    // time for the packet tail to clear the atoms, plus a few atomic lifetimes
    let gamma = cfg.g * cfg.g / v;
    let t_end = (right as f64 + 4.0 * sigma - start) / v + 10.0 / gamma.max(1e-12);
    let mut s = OneExcitationState::from_packet(packet);
    evolve_single(cfg, &mut s, &[t_end], dt)?;
    Ok(s.photon_weight(right + 1, cfg.n_c))
}
