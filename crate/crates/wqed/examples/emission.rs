//! Pulse-driven emitter under a single-tone modulation: sideband weights of
//! the emitted photon follow J_k(A/Omega)^2.

use wqed::emitter_dynamics::{sideband_weights, DriveSpec, Emitter};
use wqed::modulation::ModulationSpec;

fn main() {
    let (gamma, omega, amplitude) = (1.0, 50.0, 75.0);
    let spec = ModulationSpec::single_tone(0.0, omega, amplitude, 0.0);
    let em = Emitter::new(spec, gamma, DriveSpec::default_for(gamma)).expect("valid emitter");
    let w = sideband_weights(&em, 16.0, 4, em.max_step()).expect("weights");
    println!("total emitted weight {:.4e}", w.total);
    for (k, x) in &w.weights {
        println!("k = {k:>2}  fraction {:.4}", x / w.total);
    }
}
