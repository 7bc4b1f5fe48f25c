pub mod bit;
pub mod data;
pub mod distributions;
pub mod eval;
pub mod patient_model;
pub mod queries;
pub mod rigged;
pub mod rng;
pub mod scalar;
pub mod simulators;
pub mod subprograms;
pub mod svi;
