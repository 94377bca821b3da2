//! Two co-located atoms modulated in antiphase emit only even sidebands.

use num_complex::Complex64 as C;
use std::f64::consts::PI;
use wqed::chiral_master_equation::{filtered_correlations, DetectorGrid, NetworkConfig};

fn main() {
    let omega = 500.0;
    let cfg = NetworkConfig::braided_pair(1.0, 0.0, 0.0, 0.0)
        .with_tones(1.5 * omega, PI, omega)
        .with_drive_from_left(C::new(0.005, 0.0));
    let grid = DetectorGrid {
        n_min: -4,
        n_max: 4,
        ..DetectorGrid::default()
    };
    let fc = filtered_correlations(&cfg, &grid).expect("correlations");
    for n in grid.sidebands() {
        println!("I({n:>2}) = {:.4e}", fc.intensity_of(n));
    }
    let e = fc.entropy().expect("entropy");
    println!("odd/even = {:.2e}, S = {:.3}, e^S = {:.3}", fc.odd_even_ratio(), e.entropy, e.schmidt_rank);
}
