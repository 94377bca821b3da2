//! Acceptance report: one PASS/FAIL line per criterion at its stated
//! tolerance and runtime budget. Criteria that fail are reported, not hidden;
//! the process exits zero so the rest of the suite still runs.

use num_complex::Complex64 as C;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::f64::consts::{FRAC_PI_2, PI};
use std::path::{Path, PathBuf};
use std::time::Instant;

use wqed::cavity_array::{
    evolve_single, gaussian_wavepacket, single_photon_transmission, LatticeConfig, LatticeTone,
    OneExcitationState,
};
use wqed::chiral_master_equation::{
    self as me, AtomModulation, AtomNode, DetectorGrid, Leg, Network, NetworkConfig,
};
use wqed::cli::kinds::TargetName;
use wqed::cli::{self, output::RunManifest, Params, Scenario};
use wqed::mps_timebin::QubitTone;
use wqed::scattering::{
    bessel_cutoff, inelastic_r, single_photon_rt, smatrix_modulated, GiantArray, ModulationAmps,
    Topology,
};

struct Report {
    failures: usize,
}

impl Report {
    fn line(&mut self, id: u32, pass: bool, text: String) {
        if !pass {
            self.failures += 1;
        }
        println!(
            "criterion {id:>2} {}: {text}",
            if pass { "PASS" } else { "FAIL" }
        );
    }
}

fn work_dir() -> PathBuf {
    let d = std::env::temp_dir().join(format!("wqed-acceptance-{}", std::process::id()));
    std::fs::create_dir_all(&d).unwrap();
    d
}

/// Both runs of one preset, for the determinism check and reuse elsewhere.
struct PresetRuns {
    first: Result<RunManifest, String>,
    dirs: [PathBuf; 2],
}

fn run_preset(name: &str, root: &Path, twice: bool) -> PresetRuns {
    let s = Scenario::preset(name).unwrap();
    let dirs = [root.join(format!("{name}-a")), root.join(format!("{name}-b"))];
    let first = cli::run(&s, &dirs[0]).map_err(|e| e.to_string());
    if twice {
        let _ = cli::run(&s, &dirs[1]);
    }
    PresetRuns { first, dirs }
}

fn result_f64(m: &RunManifest, key: &str) -> f64 {
    m.results.get(key).and_then(|v| v.as_f64()).unwrap_or(f64::NAN)
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|x| x.unwrap().iter().map(String::from).collect())
        .collect();
    (header, rows)
}

fn criterion_1(rep: &mut Report) {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    let mut errors = 0;
    for _ in 0..200 {
        let topology = [Topology::Separate, Topology::Braided, Topology::Colocated][rng.gen_range(0..3)];
        let atoms = rng.gen_range(1..=3);
        let legs = rng.gen_range(1..=2);
        let varphi = rng.gen_range(0.0..2.0 * PI);
        let gamma = rng.gen_range(0.2..2.0);
        let a = GiantArray::new(topology, atoms, legs, varphi, gamma).unwrap();
        let shift = rng.gen_range(0.0..0.1);
        for j in 0..51 {
            let w = -5.0 + 10.0 * j as f64 / 50.0 + shift;
            match single_photon_rt(&a, w) {
                Ok((r, t)) => worst = worst.max((r.norm_sqr() + t.norm_sqr() - 1.0).abs()),
                Err(_) => errors += 1,
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    rep.line(
        1,
        worst < 1e-10 && errors == 0 && secs < 5.0,
        format!("flux conservation over 200 random arrays, max ||r|^2+|t|^2-1| = {worst:.2e} (tol 1e-10), {errors} solver errors, {secs:.2} s (budget 5 s)"),
    );
}

fn criterion_2(rep: &mut Report) {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut parts = Vec::new();
    for delta in [0.0, 1.0, 2.0] {
        let atom = AtomNode {
            legs: vec![Leg { x: 0.0, phi: 0.0 }],
            modulation: AtomModulation::None,
            rabi: C::new(0.0, 0.0),
        };
        let cfg = NetworkConfig {
            atoms: vec![atom.clone(), atom],
            gamma_l: 1.0,
            gamma_r: 1.0,
            k0: 1.0,
            omega: 0.0,
            epsilon: delta,
        }
        .with_drive_from_left(C::new(0.002, 0.0));
        let net = Network::new(&cfg).unwrap();
        let dt = net.step_limit().min(0.01);
        let rho = me::evolve_network(&net, &me::ground_state(net.dim()), &[60.0], dt).unwrap();
        let (i, g2) = me::reflection_moments(&net, &rho[0]);
        let got = g2 / (i * i);
        let expect = (1.0 + (delta / 2.0f64).powi(2)) / (1.0 + delta * delta);
        let dev = (got - expect).abs() / expect;
        worst = worst.max(dev);
        parts.push(format!("D={delta}: {got:.4} vs {expect:.4}"));
    }
    let secs = start.elapsed().as_secs_f64();
    rep.line(
        2,
        worst < 0.05 && secs < 120.0,
        format!("co-located pair g2(0) from the master equation, {}, max rel dev {worst:.2e} (tol 5e-2), {secs:.1} s (budget 120 s)", parts.join(", ")),
    );
}

fn criterion_3(rep: &mut Report, runs: &PresetRuns) {
    let text = match &runs.first {
        Ok(m) => {
            let curves = m.results["curves"].as_array().unwrap();
            let devs: Vec<f64> = curves
                .iter()
                .map(|c| c["max_rel_dev_tail"].as_f64().unwrap())
                .collect();
            let worst = devs.iter().cloned().fold(0.0, f64::max);
            let pass = curves.len() == 3 && worst < 0.1 && m.wall_time_s < 600.0;
            (
                pass,
                format!(
                    "analytic vs master-equation g2(t,t) for Omega t/2pi >= 25 at three leg spacings, max rel dev {:?} (tol 1e-1), {:.1} s (budget 600 s)",
                    devs.iter().map(|d| format!("{d:.2e}")).collect::<Vec<_>>(),
                    m.wall_time_s
                ),
            )
        }
        Err(e) => (false, format!("run failed: {e}")),
    };
    rep.line(3, text.0, text.1);
}

fn criterion_4(rep: &mut Report, even: &PresetRuns, odd: &PresetRuns) {
    match (&even.first, &odd.first) {
        (Ok(a), Ok(b)) => {
            let (ra, rb) = (result_f64(a, "odd_even_ratio"), result_f64(b, "odd_even_ratio"));
            let secs = a.wall_time_s + b.wall_time_s;
            rep.line(
                4,
                ra < 1e-2 && rb > 1e2 && secs < 600.0,
                format!("parity selection, odd/even = {ra:.2e} co-located (tol < 1e-2), {rb:.2e} braided chiral (tol > 1e2), {secs:.1} s (budget 600 s)"),
            );
        }
        (a, b) => rep.line(4, false, format!("run failed: {:?} {:?}", a.as_ref().err(), b.as_ref().err())),
    }
}

fn criterion_5(rep: &mut Report, even: &PresetRuns, root: &Path) {
    let mut parts = Vec::new();
    let mut pass = true;
    match &even.first {
        Ok(m) => {
            let (loss, frac) = (result_f64(m, "loss"), result_f64(m, "odd_fraction"));
            pass &= loss <= 1e-4 && frac < 1e-2 && m.wall_time_s < 300.0;
            parts.push(format!(
                "pure-even loss {loss:.2e} (tol 1e-4), odd emission {frac:.2e} (tol 1e-2), {:.1} s",
                m.wall_time_s
            ));
        }
        Err(e) => {
            pass = false;
            parts.push(format!("pure-even failed: {e}"));
        }
    }
    let mut s = Scenario::preset("fig1b").unwrap();
    if let Params::FloquetOptimize(p) = &mut s.params {
        p.target = TargetName::PureAntiStokes;
    }
    match cli::run(&s, &root.join("anti-stokes")) {
        Ok(m) => {
            let (loss, frac) = (result_f64(&m, "loss"), result_f64(&m, "stokes_fraction"));
            pass &= loss <= 1e-4 && frac < 1e-2 && m.wall_time_s < 300.0;
            parts.push(format!(
                "pure-anti-Stokes loss {loss:.2e} (tol 1e-4), Stokes emission {frac:.2e} (tol 1e-2), {:.1} s",
                m.wall_time_s
            ));
        }
        Err(e) => {
            pass = false;
            parts.push(format!("pure-anti-Stokes failed: {e}"));
        }
    }
    rep.line(5, pass, format!("Floquet shaping (K=5, R=6, budget 300 s each): {}", parts.join("; ")));
}

fn criterion_6(rep: &mut Report) {
    let start = Instant::now();
    let a = GiantArray::separate(2, 2, 0.4, 1.0).unwrap();
    let om = 20.0;
    let amp = 0.01 * om;
    let k = bessel_cutoff(2.0 * amp / om);
    let mut worst: f64 = 0.0;
    for j in 0..21 {
        let w = -3.0 + 6.0 * j as f64 / 20.0;
        let first = inelastic_r(&a, w, &ModulationAmps::homogeneous(2, amp, om), 1)
            .unwrap()
            .amplitude;
        let full = smatrix_modulated(&a, w, 1, amp, om, k).unwrap().reflection;
        worst = worst.max((full - first).norm() / first.norm());
    }
    let secs = start.elapsed().as_secs_f64();
    rep.line(
        6,
        worst < 1e-2 && secs < 10.0,
        format!("first-order vs Bessel sideband r_1 at A/Omega = 0.01 over 21 frequencies, max rel dev {worst:.2e} (tol 1e-2), {secs:.2} s (budget 10 s)"),
    );
}

/// Driven two-level atom with total decay 2γ, population only.
fn single_atom(gamma: f64, rabi: C, tone: QubitTone, times: &[f64]) -> Vec<f64> {
    let i = C::new(0.0, 1.0);
    let rhs = |t: f64, pe: f64, coh: C| -> (f64, C) {
        let det = tone.detuning(t);
        (
            -2.0 * gamma * pe + (rabi * coh).im,
            (-i * det - gamma) * coh + i * 0.5 * rabi.conj() * (1.0 - 2.0 * pe),
        )
    };
    let h: f64 = 1e-3;
    let (mut pe, mut coh, mut t) = (0.0, C::new(0.0, 0.0), 0.0);
    let mut out = Vec::new();
    for &target in times {
        while t < target - 1e-12 {
            let dt = h.min(target - t);
            let (a1, b1) = rhs(t, pe, coh);
            let (a2, b2) = rhs(t + dt / 2.0, pe + a1 * dt / 2.0, coh + b1 * (dt / 2.0));
            let (a3, b3) = rhs(t + dt / 2.0, pe + a2 * dt / 2.0, coh + b2 * (dt / 2.0));
            let (a4, b4) = rhs(t + dt, pe + a3 * dt, coh + b3 * dt);
            pe += (a1 + 2.0 * a2 + 2.0 * a3 + a4) * dt / 6.0;
            coh += (b1 + 2.0 * b2 + 2.0 * b3 + b4) * (dt / 6.0);
            t += dt;
        }
        out.push(pe);
    }
    out
}

fn criterion_7(rep: &mut Report, runs: &PresetRuns) {
    let s = Scenario::preset("fig5b").unwrap();
    let Params::MpsRun(p) = &s.params else {
        unreachable!()
    };
    let cfg = &p.timebin;
    let m = match &runs.first {
        Ok(m) => m,
        Err(e) => return rep.line(7, false, format!("run failed: {e}")),
    };
    let (header, rows) = read_csv(&runs.dirs[0].join("trajectory.csv"));
    let col = |name: &str| header.iter().position(|h| h == name).unwrap();
    let (ct, c1, c2) = (col("t"), col("pop1"), col("pop2"));
    let data: Vec<[f64; 3]> = rows
        .iter()
        .map(|r| [r[ct].parse().unwrap(), r[c1].parse().unwrap(), r[c2].parse().unwrap()])
        .collect();
    let tau = cfg.tau();
    let pre: Vec<&[f64; 3]> = data.iter().filter(|r| r[0] < tau - 1e-9).collect();
    let times: Vec<f64> = pre.iter().map(|r| r[0]).collect();
    let o1 = single_atom(cfg.gamma, cfg.rabi[0], cfg.modulation[0], &times);
    let o2 = single_atom(cfg.gamma, cfg.rabi[1], cfg.modulation[1], &times);
    let pre_err = pre
        .iter()
        .zip(o1.iter().zip(&o2))
        .map(|(r, (a, b))| (r[1] - a).abs().max((r[2] - b).abs()))
        .fold(0.0, f64::max);
    let post: Vec<&[f64; 3]> = data.iter().filter(|r| r[0] > tau + 2.0).collect();
    let mean = |i: usize| post.iter().map(|r| r[i]).sum::<f64>() / post.len() as f64;
    let (m1, m2) = (mean(1), mean(2));
    let overflow = !m.convergence.get("bond_within_limit").copied().unwrap_or(true);
    let pass = pre_err < 1e-3 && m1 < m2 && m.wall_time_s < 300.0;
    rep.line(
        7,
        pass,
        format!(
            "time-bin MPS at chi_max = 64: pre-delay error vs single-atom oracle {pre_err:.2e} (tol 1e-3); post-delay means pop1 {m1:.3} < pop2 {m2:.3}: {}; bond overflow: {overflow}, {} steps (largest step discard {:.1e}); {:.1} s (budget 300 s)",
            m1 < m2,
            m.results["overflow_steps"],
            result_f64(m, "largest_step_discarded_weight"),
            m.wall_time_s
        ),
    );
}

fn criterion_8(rep: &mut Report, lattice: &PresetRuns) {
    let start = Instant::now();
    // free packet with the atoms decoupled
    let cfg = LatticeConfig {
        g: 0.0,
        ..LatticeConfig::symmetric(249, 1.0, 0.0, 5, LatticeTone::default(), 0.0)
    };
    let p = gaussian_wavepacket(FRAC_PI_2, 8.0, 60.0, 249).unwrap();
    let mut s = OneExcitationState::from_packet(p);
    let snaps = evolve_single(&cfg, &mut s, &[0.0, 30.0], 0.01).unwrap();
    let centroid = |s: &OneExcitationState| {
        s.photon
            .iter()
            .enumerate()
            .map(|(j, x)| (j + 1) as f64 * x.norm_sqr())
            .sum::<f64>()
    };
    let speed = (centroid(&snaps[1]) - centroid(&snaps[0])) / 30.0;
    let speed_ok = (speed - 2.0).abs() <= 0.04;

    let (drift, lattice_secs) = match &lattice.first {
        Ok(m) => (result_f64(m, "max_norm_drift"), m.wall_time_s),
        Err(_) => (f64::NAN, 0.0),
    };
    let drift_ok = drift < 1e-6;

    // mid-band transmission against the packet-averaged waveguide result
    let (hopping, g, sigma, k0) = (1.0, 0.25, 60.0, FRAC_PI_2);
    let delta = g * g / (2.0 * hopping);
    let detuned = LatticeTone {
        amplitude: delta,
        omega: 0.0,
        alpha: 0.0,
    };
    let mut tc = LatticeConfig::symmetric(1201, hopping, g, 5, detuned, 0.0);
    tc.atom_sites = [597, 606];
    let trans = single_photon_transmission(&tc, k0, sigma, 0.02).unwrap();
    let (mut num, mut den) = (0.0, 0.0);
    for i in -1000..=1000 {
        let k = k0 + i as f64 * 1e-4;
        let w = (-(k - k0).powi(2) * sigma * sigma).exp();
        let array = GiantArray::separate(2, 1, 9.0 * k, g * g / tc.group_velocity(k)).unwrap();
        let (_, t) = single_photon_rt(&array, -2.0 * hopping * k.cos() - delta).unwrap();
        num += w * t.norm_sqr();
        den += w;
    }
    let expected = num / den;
    let rel = (trans - expected).abs() / expected;
    let secs = start.elapsed().as_secs_f64() + lattice_secs;
    rep.line(
        8,
        speed_ok && drift_ok && rel < 0.03 && secs < 300.0,
        format!("lattice: centroid speed {speed:.4} (2J +- 2%); two-photon run norm drift {drift:.1e} over tJ = 60 (tol 1e-6); |t|^2 {trans:.4} vs {expected:.4}, rel dev {rel:.2e} (tol 3e-2); {secs:.1} s (budget 300 s)"),
    );
}

fn criterion_9(rep: &mut Report) {
    let start = Instant::now();
    let omega = 500.0;
    let grid = DetectorGrid {
        n_min: -4,
        n_max: 4,
        ..DetectorGrid::default()
    };
    let mut values = Vec::new();
    for ratio in [0.25, 0.5, 1.0, 1.5] {
        let cfg = NetworkConfig::braided_pair(1.0, 0.0, 0.0, 0.0)
            .with_tones(ratio * omega, PI, omega)
            .with_drive_from_left(C::new(0.005, 0.0));
        let e = me::filtered_correlations(&cfg, &grid)
            .and_then(|fc| fc.entropy())
            .map(|e| e.schmidt_rank)
            .unwrap_or(f64::NAN);
        values.push(e);
    }
    let monotone = values.windows(2).all(|w| w[1] >= 0.95 * w[0]);
    let secs = start.elapsed().as_secs_f64();
    rep.line(
        9,
        monotone,
        format!(
            "e^S at A/Omega = 0.25, 0.5, 1, 1.5 (varphi = 0, alpha = pi): {:?}, non-decreasing within 5%: {monotone}; {secs:.1} s",
            values.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>()
        ),
    );
}

fn criterion_10(rep: &mut Report, runs: &BTreeMap<&str, PresetRuns>) {
    let mut bad = Vec::new();
    let mut compared = 0;
    for (name, r) in runs {
        let mut files: Vec<PathBuf> = std::fs::read_dir(&r.dirs[0])
            .map(|d| d.filter_map(|e| e.ok().map(|e| e.path())).collect())
            .unwrap_or_default();
        files.retain(|p| p.extension().is_some_and(|x| x == "csv"));
        files.sort();
        if files.is_empty() {
            bad.push(format!("{name}: no CSV output"));
        }
        for f in files {
            let other = r.dirs[1].join(f.file_name().unwrap());
            compared += 1;
            if std::fs::read(&f).ok() != std::fs::read(&other).ok() {
                bad.push(format!("{name}/{}", f.file_name().unwrap().to_string_lossy()));
            }
        }
    }
    rep.line(
        10,
        bad.is_empty(),
        format!(
            "determinism: {compared} CSV files across {} presets rerun with the same seed, differing: {:?}",
            runs.len(),
            bad
        ),
    );
}

/// Runs one criterion; a panic is reported as a failure of that criterion.
fn guarded(rep: &mut Report, id: u32, f: impl FnOnce(&mut Report)) {
    let before = rep.failures;
    let mut inner = Report { failures: 0 };
    let r = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| f(&mut inner)));
    rep.failures = before + inner.failures;
    if let Err(e) = r {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        rep.line(id, false, format!("panicked: {msg}"));
    }
}

/// `WQED_ACCEPTANCE=2,6` runs a subset; presets are only run when needed.
fn selected() -> Vec<u32> {
    match std::env::var("WQED_ACCEPTANCE") {
        Ok(v) if !v.trim().is_empty() => v.split(',').filter_map(|x| x.trim().parse().ok()).collect(),
        _ => (1..=10).collect(),
    }
}

fn main() {
    let root = work_dir();
    let mut rep = Report { failures: 0 };
    let ids = selected();
    let needs: &[(u32, &[&str])] = &[
        (3, &["fig4b"]),
        (4, &["fig3d", "fig3e"]),
        (5, &["fig1b"]),
        (7, &["fig5b"]),
        (8, &["figS7a"]),
    ];
    let mut runs = BTreeMap::new();
    for name in cli::preset_names() {
        let wanted = ids.contains(&10) || needs.iter().any(|(id, p)| ids.contains(id) && p.contains(&name));
        if wanted {
            runs.insert(name, run_preset(name, &root, ids.contains(&10)));
        }
    }
    for id in &ids {
        let id = *id;
        guarded(&mut rep, id, |r| match id {
            1 => criterion_1(r),
            2 => criterion_2(r),
            3 => criterion_3(r, &runs["fig4b"]),
            4 => criterion_4(r, &runs["fig3d"], &runs["fig3e"]),
            5 => criterion_5(r, &runs["fig1b"], &root),
            6 => criterion_6(r),
            7 => criterion_7(r, &runs["fig5b"]),
            8 => criterion_8(r, &runs["figS7a"]),
            9 => criterion_9(r),
            10 => criterion_10(r, &runs),
            _ => {}
        });
    }
    println!("acceptance: {} of {} criteria failed", rep.failures, ids.len());
    let _ = std::fs::remove_dir_all(&root);
}
