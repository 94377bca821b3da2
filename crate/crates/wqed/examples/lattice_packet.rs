//! Single photon scattering off two atoms in a coupled-cavity array.

use std::f64::consts::FRAC_PI_2;
use wqed::cavity_array::{evolve_single, gaussian_wavepacket, LatticeConfig, LatticeTone, OneExcitationState};

fn main() {
    let tone = LatticeTone {
        amplitude: 0.4,
        omega: 1.8,
        alpha: 0.0,
    };
    let cfg = LatticeConfig::symmetric(249, 1.0, 0.6, 5, tone, 0.0);
    let n0 = cfg.center();
    let packet = gaussian_wavepacket(FRAC_PI_2, 8.0, n0 as f64 - 25.0, cfg.n_c).expect("packet");
    let mut s = OneExcitationState::from_packet(packet);
    let grid: Vec<f64> = (0..=6).map(|i| 10.0 * i as f64).collect();
    let snaps = evolve_single(&cfg, &mut s, &grid, 0.01).expect("evolution");
    let (left, right) = (cfg.atom_sites[0], cfg.atom_sites[1]);
    for (t, x) in grid.iter().zip(&snaps) {
        println!(
            "t {:4.0}  left {:.4}  right {:.4}  atoms {:.4}",
            t,
            x.photon_weight(1, left - 1),
            x.photon_weight(right + 1, cfg.n_c),
            x.atoms.iter().map(|a| a.norm_sqr()).sum::<f64>()
        );
    }
}
