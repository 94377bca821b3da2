pub mod bessel;
pub mod cavity_array;
pub mod chiral_master_equation;
pub mod cli;
pub mod emitter_dynamics;
pub mod modulation;
pub mod mps_timebin;
pub mod scattering;
