//! Optimize a two-harmonic modulation toward a pure even-parity comb, then
//! print the resulting sideband magnitudes.

use wqed::modulation::{fourier_components, optimize_modulation, pure_even_target, OptimizerSettings};

fn main() {
    let omega = 200.0;
    let settings = OptimizerSettings::default();
    let target = pure_even_target(settings.k_max);
    let out = optimize_modulation(&target, 0.0, omega, 6, 200_000, 1, &settings).expect("optimizer runs");
    println!("loss {:.3e} after {} evaluations, converged: {}", out.loss, out.evaluations, out.converged);
    let spectrum = fourier_components(&out.spec, settings.k_max).expect("spectrum");
    for (k, x) in spectrum.iter().filter(|(k, _)| k.abs() <= 5) {
        println!("k = {k:>3}  |X_k| = {:.4}", x.norm());
    }
    print!("{}", out.spec.to_toml());
}
