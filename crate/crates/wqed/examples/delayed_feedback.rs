//! Two driven qubits a delay tau apart: populations from the time-bin MPS.
//! Before tau they follow identical Rabi oscillations; after it the delayed
//! field pulls qubit 1 down and qubit 2 up. Steps whose truncation exceeds
//! the per-step limit are kept and counted.

use num_complex::Complex64 as C;
use std::f64::consts::FRAC_PI_2;
use wqed::mps_timebin::{init_vacuum, record, MpsError, QubitTone, TimeBinConfig};

fn main() {
    let varphi = FRAC_PI_2;
    let cfg = TimeBinConfig::new(0.1, 2.0, varphi, 1.0, [C::new(1.5, 0.0), C::from_polar(1.5, -varphi)])
        .with_modulation(QubitTone {
            amplitude: 0.5,
            omega: 1.0,
            phase: 0.0,
        });
    let steps = 50;
    let mut state = init_vacuum(&cfg, steps).expect("valid config");
    let mut rows = Vec::new();
    let mut overflows = 0;
    while rows.len() < steps {
        match record(&mut state, &cfg, steps - rows.len(), &mut rows) {
            Ok(()) => break,
            Err(MpsError::BondOverflow { .. }) => overflows += 1,
            Err(e) => panic!("{e}"),
        }
    }
    for r in rows.iter().step_by(5) {
        println!("t {:5.2}  pop1 {:.4}  pop2 {:.4}  bond {}", r.t, r.pop1, r.pop2, r.max_bond);
    }
    println!("steps over the truncation limit: {overflows}");
}
