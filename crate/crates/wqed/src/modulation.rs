//! Periodic frequency modulation of a two-level emitter, its Floquet phase and
//! sideband spectrum, and synthesis of modulations that hit a target spectrum.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModulationError {
    #[error("modulation frequency Omega must be positive and finite, got {0}")]
    BadFrequency(f64),
    #[error("harmonic index r={0} is zero or appears twice")]
    BadHarmonic(u32),
    #[error("tone amplitude for r={0} is not finite")]
    NonFiniteAmplitude(u32),
    #[error("truncation K={k_max} keeps only {kept:.6} of the spectral weight")]
    TruncationTooSmall { k_max: usize, kept: f64 },
    #[error("optimizer stopped at loss {loss:.3e}, above the 1e-2 convergence threshold")]
    NoConvergence { loss: f64 },
    #[error("target key k={0} lies outside the truncation window")]
    TargetOutsideWindow(i32),
    #[error("target magnitudes carry squared weight {0:.4} > 1")]
    TargetTooLarge(f64),
}

/// One harmonic of the modulation: a·cos(rΩt) − b·sin(rΩt).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tone {
    pub r: u32,
    pub a: f64,
    pub b: f64,
}

/// ω(t) = ω₀ + Σ_r [a_r cos(rΩt) − b_r sin(rΩt)].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModulationSpec {
    pub omega0: f64,
    #[serde(rename = "Omega")]
    pub omega: f64,
    #[serde(default)]
    pub tones: Vec<Tone>,
}

impl ModulationSpec {
    pub fn new(omega0: f64, omega: f64, tones: Vec<Tone>) -> Result<Self, ModulationError> {
        let spec = Self {
            omega0,
            omega,
            tones,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn unmodulated(omega0: f64, omega: f64) -> Self {
        Self {
            omega0,
            omega,
            tones: Vec::new(),
        }
    }

    /// Single tone A·cos(Ωt + α).
    pub fn single_tone(omega0: f64, omega: f64, amplitude: f64, alpha: f64) -> Self {
        Self {
            omega0,
            omega,
            tones: vec![Tone {
                r: 1,
                a: amplitude * alpha.cos(),
                b: amplitude * alpha.sin(),
            }],
        }
    }

    /// Build from the (A_r, α_r) form: Σ A_r cos(rΩt + α_r).
    pub fn from_amplitude_phase(omega0: f64, omega: f64, harmonics: &[(u32, f64, f64)]) -> Self {
        let tones = harmonics
            .iter()
            .map(|&(r, amp, alpha)| Tone {
                r,
                a: amp * alpha.cos(),
                b: amp * alpha.sin(),
            })
            .collect();
        Self {
            omega0,
            omega,
            tones,
        }
    }

    pub fn validate(&self) -> Result<(), ModulationError> {
        if !(self.omega > 0.0 && self.omega.is_finite()) {
            return Err(ModulationError::BadFrequency(self.omega));
        }
        let mut seen = BTreeSet::new();
        for t in &self.tones {
            if t.r == 0 || !seen.insert(t.r) {
                return Err(ModulationError::BadHarmonic(t.r));
            }
            if !(t.a.is_finite() && t.b.is_finite()) {
                return Err(ModulationError::NonFiniteAmplitude(t.r));
            }
        }
        Ok(())
    }

    pub fn period(&self) -> f64 {
        2.0 * PI / self.omega
    }

    /// Largest tone frequency r·Ω (zero without tones).
    pub fn max_tone_frequency(&self) -> f64 {
        self.tones
            .iter()
            .map(|t| t.r as f64 * self.omega)
            .fold(0.0, f64::max)
    }

    /// Δ(t), the deviation from ω₀.
    pub fn detuning(&self, t: f64) -> f64 {
        self.tones
            .iter()
            .map(|tone| {
                let x = tone.r as f64 * self.omega * t;
                tone.a * x.cos() - tone.b * x.sin()
            })
            .sum()
    }

    /// ∫₀ᵗ Δ(τ) dτ.
    pub fn phase_integral(&self, t: f64) -> f64 {
        self.tones
            .iter()
            .map(|tone| {
                let w = tone.r as f64 * self.omega;
                let x = w * t;
                (tone.a * x.sin() + tone.b * (x.cos() - 1.0)) / w
            })
            .sum()
    }

    /// ϖ(t) = exp(−i ∫₀ᵗ Δ).
    pub fn floquet_phase(&self, t: f64) -> Complex64 {
        Complex64::from_polar(1.0, -self.phase_integral(t))
    }

    /// Parameters flattened as [a_1, b_1, a_2, b_2, ...] in tone order.
    pub fn params(&self) -> Vec<f64> {
        self.tones.iter().flat_map(|t| [t.a, t.b]).collect()
    }

    pub fn with_params(&self, p: &[f64]) -> Self {
        let mut out = self.clone();
        for (i, t) in out.tones.iter_mut().enumerate() {
            t.a = p[2 * i];
            t.b = p[2 * i + 1];
        }
        out
    }

    /// Spec with tones r = 1..=n_tones and zero amplitudes.
    pub fn zeros(omega0: f64, omega: f64, n_tones: u32) -> Self {
        Self {
            omega0,
            omega,
            tones: (1..=n_tones).map(|r| Tone { r, a: 0.0, b: 0.0 }).collect(),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("modulation spec serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self, String> {
        let spec: Self = toml::from_str(text).map_err(|e| e.to_string())?;
        spec.validate().map_err(|e| e.to_string())?;
        Ok(spec)
    }
}

/// Fourier components X_k of ϖ(t) = Σ X_k e^{−ikΩt}, for |k| ≤ K. The dipole
/// then oscillates as Σ X_k e^{−i(ω₀+kΩ)t}, so X_k feeds the sideband at ω₀ + kΩ.
#[derive(Debug, Clone, PartialEq)]
pub struct FloquetSpectrum {
    k_max: usize,
    components: Vec<Complex64>,
}

impl FloquetSpectrum {
    pub fn k_max(&self) -> usize {
        self.k_max
    }

    /// X_k, zero outside the window.
    pub fn get(&self, k: i32) -> Complex64 {
        if k.unsigned_abs() as usize > self.k_max {
            return Complex64::new(0.0, 0.0);
        }
        self.components[(k + self.k_max as i32) as usize]
    }

    pub fn iter(&self) -> impl Iterator<Item = (i32, Complex64)> + '_ {
        let k0 = self.k_max as i32;
        self.components
            .iter()
            .enumerate()
            .map(move |(i, c)| (i as i32 - k0, *c))
    }

    /// Σ |X_k|² over the window.
    pub fn weight(&self) -> f64 {
        self.components.iter().map(|c| c.norm_sqr()).sum()
    }
}

/// Number of samples per period used by the DFT path: a power of two,
/// at least 4096 and at least 16·(K + Σ r(|a_r|+|b_r|)/Ω).
pub fn sample_count(spec: &ModulationSpec, k_max: usize) -> usize {
    let spread: f64 = spec
        .tones
        .iter()
        .map(|t| t.r as f64 * (t.a.abs() + t.b.abs()) / spec.omega)
        .sum();
    let need = (16.0 * (k_max as f64 + spread)).ceil() as usize;
    need.max(4096).next_power_of_two()
}

/// Full circular DFT of ϖ sampled over one period; index j holds X_{−j}
/// (negative k wrap to the top).
struct Dft {
    coeffs: Vec<Complex64>,
}

impl Dft {
    fn new(spec: &ModulationSpec, n: usize) -> Self {
        let mut buf: Vec<Complex64> = (0..n)
            .map(|j| spec.floquet_phase(spec.period() * j as f64 / n as f64))
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(n);
        fft.process(&mut buf);
        let scale = 1.0 / n as f64;
        for c in buf.iter_mut() {
            *c *= scale;
        }
        Self { coeffs: buf }
    }

    fn get(&self, k: i64) -> Complex64 {
        // the forward transform yields the e^{+ikΩt} coefficients
        let n = self.coeffs.len() as i64;
        self.coeffs[(-k).rem_euclid(n) as usize]
    }
}

/// Floquet spectrum by discrete Fourier transform over one period.
pub fn fourier_components(
    spec: &ModulationSpec,
    k_max: usize,
) -> Result<FloquetSpectrum, ModulationError> {
    spec.validate()?;
    let k_max = k_max.max(1);
    let dft = Dft::new(spec, sample_count(spec, k_max));
    let components: Vec<Complex64> = (-(k_max as i64)..=k_max as i64)
        .map(|k| dft.get(k))
        .collect();
    let out = FloquetSpectrum { k_max, components };
    let kept = out.weight();
    if kept < 1.0 - 1e-4 {
        return Err(ModulationError::TruncationTooSmall { k_max, kept });
    }
    Ok(out)
}

/// Desired sideband magnitudes. Sidebands in the window that are neither
/// targeted nor listed as don't-care are pulled toward zero with
/// `background_weight`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetSpectrum {
    pub entries: Vec<TargetEntry>,
    #[serde(default)]
    pub dont_care: Vec<i32>,
    #[serde(default = "default_background_weight")]
    pub background_weight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetEntry {
    pub k: i32,
    pub magnitude: f64,
    #[serde(default = "default_entry_weight")]
    pub weight: f64,
}

fn default_background_weight() -> f64 {
    0.1
}

fn default_entry_weight() -> f64 {
    1.0
}

impl TargetSpectrum {
    pub fn new(magnitudes: &[(i32, f64)]) -> Self {
        Self {
            entries: magnitudes
                .iter()
                .map(|&(k, magnitude)| TargetEntry {
                    k,
                    magnitude,
                    weight: 1.0,
                })
                .collect(),
            dont_care: Vec::new(),
            background_weight: default_background_weight(),
        }
    }

    pub fn with_background_weight(mut self, w: f64) -> Self {
        self.background_weight = w;
        self
    }

    pub fn with_dont_care(mut self, ks: &[i32]) -> Self {
        self.dont_care.extend_from_slice(ks);
        self
    }

    pub fn max_key(&self) -> usize {
        self.entries
            .iter()
            .map(|e| e.k.unsigned_abs() as usize)
            .max()
            .unwrap_or(0)
    }

    pub fn validate(&self, k_max: usize) -> Result<(), ModulationError> {
        for e in &self.entries {
            if e.k.unsigned_abs() as usize > k_max {
                return Err(ModulationError::TargetOutsideWindow(e.k));
            }
        }
        let total: f64 = self.entries.iter().map(|e| e.magnitude * e.magnitude).sum();
        if total > 1.0 + 1e-6 {
            return Err(ModulationError::TargetTooLarge(total));
        }
        Ok(())
    }

    /// (k, target magnitude, weight) for every k in the window with nonzero weight.
    fn terms(&self, k_max: usize) -> Vec<(i32, f64, f64)> {
        let targeted: BTreeMap<i32, (f64, f64)> = self
            .entries
            .iter()
            .map(|e| (e.k, (e.magnitude, e.weight)))
            .collect();
        let skip: BTreeSet<i32> = self.dont_care.iter().copied().collect();
        let km = k_max as i32;
        (-km..=km)
            .filter_map(|k| match targeted.get(&k) {
                Some(&(m, w)) => Some((k, m, w)),
                None if skip.contains(&k) => None,
                None => Some((k, 0.0, self.background_weight)),
            })
            .filter(|&(_, _, w)| w > 0.0)
            .collect()
    }
}

/// Σ_k w_k (|X_k| − target_k)² over the window |k| ≤ K.
pub fn spectrum_loss(spec: &ModulationSpec, target: &TargetSpectrum, k_max: usize) -> f64 {
    let dft = Dft::new(spec, sample_count(spec, k_max));
    target
        .terms(k_max)
        .into_iter()
        .map(|(k, m, w)| w * (dft.get(k as i64).norm() - m).powi(2))
        .sum()
}

/// Loss and its gradient with respect to [a_1, b_1, a_2, b_2, ...].
///
/// ∂X_k/∂a_r = (X_{k−r} − X_{k+r}) / (2rΩ) and
/// ∂X_k/∂b_r = −i[(X_{k−r} + X_{k+r})/2 − X_k] / (rΩ); both hold exactly for
/// the sampled DFT because sample products become circular convolutions.
pub fn spectrum_loss_gradient(
    spec: &ModulationSpec,
    target: &TargetSpectrum,
    k_max: usize,
) -> (f64, Vec<f64>) {
    let dft = Dft::new(spec, sample_count(spec, k_max));
    let mut grad = vec![0.0; 2 * spec.tones.len()];
    let mut loss = 0.0;
    let i = Complex64::i();
    for (k, m, w) in target.terms(k_max) {
        let k = k as i64;
        let x = dft.get(k);
        let mag = x.norm();
        loss += w * (mag - m).powi(2);
        // d loss = coef · Re(conj(X) dX)
        let coef = if m == 0.0 {
            2.0 * w
        } else if mag > 1e-300 {
            2.0 * w * (mag - m) / mag
        } else {
            0.0
        };
        if coef == 0.0 {
            continue;
        }
        for (idx, tone) in spec.tones.iter().enumerate() {
            let r = tone.r as i64;
            let ro = tone.r as f64 * spec.omega;
            let lo = dft.get(k - r);
            let hi = dft.get(k + r);
            let dxa = (lo - hi) / (2.0 * ro);
            let dxb = -i * ((lo + hi) * 0.5 - x) / ro;
            grad[2 * idx] += coef * (x.conj() * dxa).re;
            grad[2 * idx + 1] += coef * (x.conj() * dxb).re;
        }
    }
    (loss, grad)
}

/// Schedule for the swarm + quasi-Newton optimizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerSettings {
    pub particles: usize,
    pub iterations: usize,
    /// Box half-width for every a_r, b_r in units of Ω.
    pub bound: f64,
    /// How many of the best swarm members are polished by BFGS.
    pub polish: usize,
    pub bfgs_iterations: usize,
    /// Sideband window used in the loss; wider than the target keys so that
    /// background weight also catches leakage into far sidebands.
    pub k_max: usize,
    /// Stop early once the loss drops below this value.
    pub target_loss: f64,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        Self {
            particles: 40,
            iterations: 200,
            bound: 4.0,
            polish: 3,
            bfgs_iterations: 400,
            k_max: 12,
            target_loss: 1e-12,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizeOutcome {
    pub spec: ModulationSpec,
    pub loss: f64,
    pub converged: bool,
    pub evaluations: usize,
}

impl OptimizeOutcome {
    pub fn into_result(self) -> Result<Self, ModulationError> {
        if self.converged {
            Ok(self)
        } else {
            Err(ModulationError::NoConvergence { loss: self.loss })
        }
    }
}

/// Particle swarm over the box |a_r|, |b_r| ≤ bound·Ω followed by BFGS polish
/// of the best few particles. Each particle owns a ChaCha stream derived from
/// `seed`, so results do not depend on thread scheduling. `budget` caps the
/// number of loss evaluations.
pub fn optimize_modulation(
    target: &TargetSpectrum,
    omega0: f64,
    omega: f64,
    n_tones: u32,
    budget: usize,
    seed: u64,
    settings: &OptimizerSettings,
) -> Result<OptimizeOutcome, ModulationError> {
    let base = ModulationSpec::new(
        omega0,
        omega,
        (1..=n_tones.max(1))
            .map(|r| Tone { r, a: 0.0, b: 0.0 })
            .collect(),
    )?;
    let k_max = settings.k_max.max(target.max_key());
    target.validate(k_max)?;
    let dim = base.tones.len() * 2;
    let bound = settings.bound * omega;
    let n_part = settings.particles.max(1);
    let eval = |p: &[f64]| spectrum_loss(&base.with_params(p), target, k_max);
    let mut evaluations = 0usize;

    let mut rngs: Vec<ChaCha8Rng> = (0..n_part)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64 + 1);
            rng
        })
        .collect();
    // Higher harmonics move the phase by a_r/(rΩ), so their initial spread
    // shrinks as 1/r; the search box itself stays |a_r|, |b_r| ≤ bound.
    let spread: Vec<f64> = (0..dim).map(|d| bound / (d / 2 + 1) as f64).collect();
    let mut pos: Vec<Vec<f64>> = rngs
        .iter_mut()
        .map(|rng| spread.iter().map(|&s| rng.gen_range(-s..=s)).collect())
        .collect();
    // Particle 0 starts at the unmodulated point, which is the exact answer
    // for Rayleigh-only targets and a sensible anchor otherwise.
    pos[0].iter_mut().for_each(|v| *v = 0.0);
    let mut vel: Vec<Vec<f64>> = rngs
        .iter_mut()
        .map(|rng| {
            (0..dim)
                .map(|_| rng.gen_range(-0.1 * bound..=0.1 * bound))
                .collect()
        })
        .collect();
    let mut cost: Vec<f64> = pos.par_iter().map(|p| eval(p)).collect();
    evaluations += n_part;
    let mut best_pos = pos.clone();
    let mut best_cost = cost.clone();
    let mut g_idx = argmin(&best_cost);

    let (w_in, c1, c2) = (0.72, 1.49, 1.49);
    let bfgs_reserve = (settings.polish * settings.bfgs_iterations * 4).min(budget / 2);
    for _ in 0..settings.iterations {
        if evaluations + n_part + bfgs_reserve > budget || best_cost[g_idx] < settings.target_loss {
            break;
        }
        let g_best = best_pos[g_idx].clone();
        pos.par_iter_mut()
            .zip(vel.par_iter_mut())
            .zip(rngs.par_iter_mut())
            .zip(best_pos.par_iter())
            .for_each(|(((x, v), rng), pb)| {
                for d in 0..dim {
                    let r1: f64 = rng.gen();
                    let r2: f64 = rng.gen();
                    v[d] = w_in * v[d] + c1 * r1 * (pb[d] - x[d]) + c2 * r2 * (g_best[d] - x[d]);
                    v[d] = v[d].clamp(-bound, bound);
                    x[d] = (x[d] + v[d]).clamp(-bound, bound);
                }
            });
        cost = pos.par_iter().map(|p| eval(p)).collect();
        evaluations += n_part;
        for i in 0..n_part {
            if cost[i] < best_cost[i] {
                best_cost[i] = cost[i];
                best_pos[i] = pos[i].clone();
            }
        }
        g_idx = argmin(&best_cost);
    }

    let mut order: Vec<usize> = (0..n_part).collect();
    order.sort_by(|&a, &b| best_cost[a].total_cmp(&best_cost[b]).then(a.cmp(&b)));
    let starts: Vec<Vec<f64>> = order
        .iter()
        .take(settings.polish.max(1))
        .map(|&i| best_pos[i].clone())
        .collect();
    let per_start = (budget.saturating_sub(evaluations) / starts.len()).max(1);
    let polished: Vec<(Vec<f64>, f64, usize)> = starts
        .par_iter()
        .map(|p0| {
            bfgs(
                |p| spectrum_loss_gradient(&base.with_params(p), target, k_max),
                p0,
                settings.bfgs_iterations,
                per_start,
                settings.target_loss,
            )
        })
        .collect();

    let mut best = (best_pos[g_idx].clone(), best_cost[g_idx]);
    for (p, f, n) in polished {
        evaluations += n;
        if f < best.1 {
            best = (p, f);
        }
    }
    let spec = base.with_params(&best.0);
    let loss = spectrum_loss(&spec, target, k_max);
    Ok(OptimizeOutcome {
        spec,
        loss,
        converged: loss <= 1e-2,
        evaluations,
    })
}

fn argmin(v: &[f64]) -> usize {
    let mut idx = 0;
    for (i, x) in v.iter().enumerate() {
        if *x < v[idx] {
            idx = i;
        }
    }
    idx
}

/// BFGS with an Armijo backtracking line search. Returns the final point,
/// its value and the number of function evaluations.
pub fn bfgs<F>(
    f: F,
    x0: &[f64],
    max_iter: usize,
    max_evals: usize,
    f_stop: f64,
) -> (Vec<f64>, f64, usize)
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    let n = x0.len();
    let mut x = x0.to_vec();
    let (mut fx, mut g) = f(&x);
    let mut evals = 1;
    let mut h = identity(n);
    for _ in 0..max_iter {
        if fx < f_stop || evals >= max_evals {
            break;
        }
        let gnorm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if gnorm < 1e-14 {
            break;
        }
        let mut dir: Vec<f64> = (0..n)
            .map(|i| -(0..n).map(|j| h[i][j] * g[j]).sum::<f64>())
            .collect();
        let mut slope: f64 = dir.iter().zip(&g).map(|(d, gi)| d * gi).sum();
        if slope >= 0.0 {
            h = identity(n);
            dir = g.iter().map(|v| -v).collect();
            slope = -gnorm * gnorm;
        }
        let mut step = 1.0;
        let mut accepted = None;
        while evals < max_evals {
            let xn: Vec<f64> = x.iter().zip(&dir).map(|(xi, di)| xi + step * di).collect();
            let (fn_, gn) = f(&xn);
            evals += 1;
            if fn_.is_finite() && fn_ <= fx + 1e-4 * step * slope {
                accepted = Some((xn, fn_, gn));
                break;
            }
            step *= 0.5;
            if step < 1e-12 {
                break;
            }
        }
        let Some((xn, fn_, gn)) = accepted else { break };
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
        if sy > 1e-16 {
            let hy: Vec<f64> = (0..n)
                .map(|i| (0..n).map(|j| h[i][j] * y[j]).sum())
                .collect();
            let yhy: f64 = y.iter().zip(&hy).map(|(a, b)| a * b).sum();
            let rho = 1.0 / sy;
            for i in 0..n {
                for j in 0..n {
                    h[i][j] +=
                        (1.0 + yhy * rho) * rho * s[i] * s[j] - rho * (hy[i] * s[j] + s[i] * hy[j]);
                }
            }
        }
        let improvement = fx - fn_;
        x = xn;
        fx = fn_;
        g = gn;
        if improvement.abs() < 1e-16 * fx.abs().max(1e-300) {
            break;
        }
    }
    (x, fx, evals)
}

fn identity(n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect()
}

/// Even-parity comb on k ∈ {0, ±2, ±4} with every odd sideband in the loss
/// window pinned to zero; even sidebands beyond ±4 are left free.
pub fn pure_even_target(window: usize) -> TargetSpectrum {
    let w = window as i32;
    let mut entries: Vec<(i32, f64)> =
        vec![(-4, 0.159), (-2, 0.498), (0, 0.671), (2, 0.498), (4, 0.159)];
    entries.extend((-w..=w).filter(|k| k % 2 != 0).map(|k| (k, 0.0)));
    entries.sort_by_key(|e| e.0);
    let free: Vec<i32> = (-w..=w).filter(|k| k % 2 == 0 && k.abs() > 4).collect();
    TargetSpectrum::new(&entries).with_dont_care(&free)
}

/// Rayleigh line plus blue sidebands k = 1..5, with every red sideband in
/// the loss window pinned to zero.
pub fn pure_anti_stokes_target(window: usize) -> TargetSpectrum {
    let w = window as i32;
    let mut entries: Vec<(i32, f64)> =
        vec![(0, 0.5), (1, 0.7), (2, 0.4), (3, 0.2), (4, 0.1), (5, 0.05)];
    entries.extend((-w..0).map(|k| (k, 0.0)));
    entries.sort_by_key(|e| e.0);
    TargetSpectrum::new(&entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bessel::bessel_j;
    use proptest::prelude::*;

    fn tone(r: u32, a: f64, b: f64) -> Tone {
        Tone { r, a, b }
    }

    #[test]
    fn zero_modulation_phase_is_one() {
        let s = ModulationSpec::new(0.0, 3.0, vec![tone(1, 0.0, 0.0)]).unwrap();
        for &t in &[0.0, 0.3, 17.2] {
            assert_eq!(s.floquet_phase(t), Complex64::new(1.0, 0.0));
        }
    }

    #[test]
    fn phase_at_sine_node_is_one() {
        let om = 2.0;
        let s = ModulationSpec::new(0.0, om, vec![tone(1, 0.7, 0.0)]).unwrap();
        let z = s.floquet_phase(PI / om);
        assert!((z - Complex64::new(1.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn phase_quarter_period_matches_closed_form_and_quadrature() {
        let om = 1.3;
        let s = ModulationSpec::new(0.0, om, vec![tone(1, 1.5 * om, 0.0)]).unwrap();
        let t = PI / (2.0 * om);
        let expect = Complex64::from_polar(1.0, -1.5);
        assert!((s.floquet_phase(t) - expect).norm() < 1e-14);
        // Simpson quadrature of Δ as an independent path
        let n = 2000;
        let h = t / n as f64;
        let mut acc = s.detuning(0.0) + s.detuning(t);
        for j in 1..n {
            acc += if j % 2 == 1 { 4.0 } else { 2.0 } * s.detuning(j as f64 * h);
        }
        let integral = acc * h / 3.0;
        assert!((Complex64::from_polar(1.0, -integral) - expect).norm() < 1e-10);
    }

    #[test]
    fn detuning_has_zero_period_average() {
        let s = ModulationSpec::new(0.0, 2.0, vec![tone(1, 1.0, -0.4), tone(3, 0.2, 0.9)]).unwrap();
        let n = 1024;
        let avg: f64 = (0..n)
            .map(|j| s.detuning(s.period() * j as f64 / n as f64))
            .sum::<f64>()
            / n as f64;
        assert!(avg.abs() < 1e-13);
    }

    #[test]
    fn invalid_specs_rejected() {
        assert_eq!(
            ModulationSpec::new(0.0, 0.0, vec![]),
            Err(ModulationError::BadFrequency(0.0))
        );
        assert_eq!(
            ModulationSpec::new(0.0, 1.0, vec![tone(1, 0.0, 0.0), tone(1, 1.0, 0.0)]),
            Err(ModulationError::BadHarmonic(1))
        );
        assert_eq!(
            ModulationSpec::new(0.0, 1.0, vec![tone(0, 1.0, 0.0)]),
            Err(ModulationError::BadHarmonic(0))
        );
    }

    #[test]
    fn zero_modulation_spectrum_is_rayleigh_only() {
        let s = ModulationSpec::unmodulated(0.0, 1.0);
        let f = fourier_components(&s, 4).unwrap();
        assert!((f.get(0) - Complex64::new(1.0, 0.0)).norm() < 1e-15);
        for k in 1..=4 {
            assert!(f.get(k).norm() < 1e-15 && f.get(-k).norm() < 1e-15);
        }
    }

    #[test]
    fn single_tone_matches_jacobi_anger() {
        let om = 2.5;
        for &x in &[0.3, 1.0, 1.5, 2.9] {
            let s = ModulationSpec::single_tone(0.0, om, x * om, 0.0);
            let f = fourier_components(&s, 12).unwrap();
            for k in -12..=12 {
                assert!(
                    (f.get(k).norm() - bessel_j(k, x).abs()).abs() < 1e-12,
                    "x={x} k={k}"
                );
            }
        }
    }

    // Bessel-product expansion of ϖ for a general two-tone modulation:
    // each factor exp(−i u sin θ') and exp(−i v (cos θ' − 1)) is expanded
    // with Jacobi–Anger, then the constrained sum over harmonics is taken.
    fn bessel_sum(spec: &ModulationSpec, k: i32, order: i32) -> Complex64 {
        let i = Complex64::i();
        // per tone: map harmonic-of-θ index → coefficient
        let mut acc: BTreeMap<i32, Complex64> = BTreeMap::new();
        acc.insert(0, Complex64::new(1.0, 0.0));
        for t in &spec.tones {
            let r = t.r as i32;
            let u = t.a / (t.r as f64 * spec.omega);
            let v = t.b / (t.r as f64 * spec.omega);
            let mut factor: BTreeMap<i32, Complex64> = BTreeMap::new();
            // exp(−iu sin φ) = Σ J_g(u) e^{−igφ}; exp(−iv cos φ) = Σ (−i)^κ J_κ(v) e^{iκφ};
            // harmonic k collects e^{−ikθ}
            for g in -order..=order {
                for kap in -order..=order {
                    let c = bessel_j(g, u)
                        * bessel_j(kap, v)
                        * (-i).powi(kap)
                        * Complex64::from_polar(1.0, v);
                    *factor.entry(r * (g - kap)).or_default() += c;
                }
            }
            let mut next: BTreeMap<i32, Complex64> = BTreeMap::new();
            for (ka, ca) in &acc {
                for (kb, cb) in &factor {
                    *next.entry(ka + kb).or_default() += ca * cb;
                }
            }
            acc = next;
        }
        acc.get(&k).copied().unwrap_or_default()
    }

    #[test]
    fn bessel_sum_agrees_with_dft_for_one_and_two_tones() {
        let om = 1.0;
        let cases = [
            ModulationSpec::new(0.0, om, vec![tone(1, 2.7, 0.0)]).unwrap(),
            ModulationSpec::new(0.0, om, vec![tone(1, -1.2, 2.1)]).unwrap(),
            ModulationSpec::new(0.0, om, vec![tone(1, 0.8, -0.5), tone(2, 1.9, 0.6)]).unwrap(),
        ];
        for s in &cases {
            let f = fourier_components(s, 8).unwrap();
            for k in -8..=8 {
                let b = bessel_sum(s, k, 40);
                assert!((b - f.get(k)).norm() < 1e-8, "k={k}: {b} vs {}", f.get(k));
            }
        }
    }

    #[test]
    fn truncation_too_small_is_reported() {
        let s = ModulationSpec::single_tone(0.0, 1.0, 6.0, 0.0);
        match fourier_components(&s, 2) {
            Err(ModulationError::TruncationTooSmall { k_max: 2, kept }) => assert!(kept < 0.9),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn loss_examples() {
        let zero = ModulationSpec::unmodulated(0.0, 1.0);
        let t0 = TargetSpectrum::new(&[(0, 1.0)]);
        assert!(spectrum_loss(&zero, &t0, 3) < 1e-28);
        let t1 = TargetSpectrum::new(&[(1, 1.0)]).with_background_weight(0.0);
        assert!((spectrum_loss(&zero, &t1, 3) - 1.0).abs() < 1e-14);
        let t1_bg = TargetSpectrum::new(&[(1, 1.0)]);
        assert!((spectrum_loss(&zero, &t1_bg, 3) - 1.1).abs() < 1e-14);
        let t1_dc = TargetSpectrum::new(&[(1, 1.0)]).with_dont_care(&[0]);
        assert!((spectrum_loss(&zero, &t1_dc, 3) - 1.0).abs() < 1e-14);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let s = ModulationSpec::new(
            0.0,
            1.0,
            vec![tone(1, 0.9, -0.3), tone(2, 0.4, 1.1), tone(3, -0.6, 0.2)],
        )
        .unwrap();
        let target = TargetSpectrum::new(&[(-2, 0.1), (0, 0.5), (1, 0.6), (2, 0.4), (3, 0.0)]);
        let (_, g) = spectrum_loss_gradient(&s, &target, 5);
        let p = s.params();
        let h = 1e-6;
        for i in 0..p.len() {
            let mut up = p.clone();
            up[i] += h;
            let mut dn = p.clone();
            dn[i] -= h;
            let fd = (spectrum_loss(&s.with_params(&up), &target, 5)
                - spectrum_loss(&s.with_params(&dn), &target, 5))
                / (2.0 * h);
            let rel = (fd - g[i]).abs() / g[i].abs().max(1e-3);
            assert!(rel < 1e-5, "param {i}: analytic {} fd {fd}", g[i]);
        }
    }

    #[test]
    fn optimizer_finds_rayleigh_only_target() {
        let settings = OptimizerSettings {
            iterations: 20,
            ..Default::default()
        };
        let out = optimize_modulation(
            &TargetSpectrum::new(&[(0, 1.0)]),
            0.0,
            1.0,
            2,
            5_000,
            7,
            &settings,
        )
        .unwrap();
        assert!(out.loss <= 1e-6, "loss {}", out.loss);
        assert!(out.converged);
    }

    #[test]
    fn optimizer_is_deterministic() {
        let settings = OptimizerSettings {
            iterations: 10,
            particles: 12,
            ..Default::default()
        };
        let target = TargetSpectrum::new(&[(0, 0.6), (1, 0.6), (-1, 0.3)]);
        let a = optimize_modulation(&target, 0.0, 1.0, 2, 3_000, 42, &settings).unwrap();
        let b = optimize_modulation(&target, 0.0, 1.0, 2, 3_000, 42, &settings).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn toml_round_trip_uses_documented_keys() {
        let s =
            ModulationSpec::new(0.0, 500.0, vec![tone(1, 10.0, -2.0), tone(2, 0.5, 0.0)]).unwrap();
        let text = s.to_toml();
        assert!(text.contains("omega0") && text.contains("Omega") && text.contains("[[tones]]"));
        assert_eq!(ModulationSpec::from_toml(&text).unwrap(), s);
        assert!(ModulationSpec::from_toml("omega0 = 0.0\nOmega = 1.0\nbogus = 3\n").is_err());
    }

    #[test]
    fn mixed_parity_cosine_spectrum_is_not_symmetric() {
        let s = ModulationSpec::new(0.0, 1.0, vec![tone(1, 1.5, 0.0), tone(2, 2.6, 0.0)]).unwrap();
        let f = fourier_components(&s, 10).unwrap();
        let gap = (1..=10)
            .map(|k| (f.get(k).norm() - f.get(-k).norm()).abs())
            .fold(0.0, f64::max);
        assert!(gap > 1e-2);
    }

    fn arb_spec() -> impl Strategy<Value = ModulationSpec> {
        (
            0.5f64..5.0,
            prop::collection::vec((-3.0f64..3.0, -3.0f64..3.0), 1..4),
        )
            .prop_map(|(om, amps)| ModulationSpec {
                omega0: 0.0,
                omega: om,
                tones: amps
                    .iter()
                    .enumerate()
                    .map(|(i, &(a, b))| tone(i as u32 + 1, a * om, b * om))
                    .collect(),
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn floquet_phase_is_unimodular_and_periodic(s in arb_spec(), t in -50.0f64..50.0) {
            let z = s.floquet_phase(t);
            prop_assert!((z.norm() - 1.0).abs() < 1e-12);
            let zp = s.floquet_phase(t + s.period());
            prop_assert!((z - zp).norm() < 1e-9);
            prop_assert_eq!(s.floquet_phase(0.0), Complex64::new(1.0, 0.0));
        }

        #[test]
        fn parseval_holds(s in arb_spec()) {
            let f = fourier_components(&s, 40).unwrap();
            prop_assert!((f.weight() - 1.0).abs() < 1e-6);
        }

        #[test]
        fn odd_harmonic_cosine_spectrum_is_symmetric(om in 0.5f64..3.0, a in prop::collection::vec(-2.0f64..2.0, 1..4)) {
            let s = ModulationSpec {
                omega0: 0.0,
                omega: om,
                tones: a.iter().enumerate().map(|(i, &x)| tone(2 * i as u32 + 1, x * om, 0.0)).collect(),
            };
            let f = fourier_components(&s, 30).unwrap();
            for k in 1..=30 {
                prop_assert!((f.get(k).norm() - f.get(-k).norm()).abs() < 1e-10);
            }
        }
    }
}
