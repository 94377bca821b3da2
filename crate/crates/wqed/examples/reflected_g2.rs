//! Equal-time g2 of light reflected by a modulated braided pair.

use wqed::scattering::{analytic_g2, GiantArray, ModulationAmps};

fn main() {
    let omega = 4.0;
    let array = GiantArray::braided(2, 2, 0.6 * std::f64::consts::PI, 1.0).expect("array");
    let amps = ModulationAmps::pair(0.035, std::f64::consts::FRAC_PI_2, omega);
    let period = 2.0 * std::f64::consts::PI / omega;
    let t: Vec<f64> = (0..=20).map(|i| i as f64 * period / 20.0).collect();
    let g2 = analytic_g2(&array, -1.5 * omega, &amps, &t).expect("g2");
    for (t, g) in t.iter().zip(&g2) {
        println!("{:.4}  {:.5}", t / period, g);
    }
}
