//! Gain-scheduled impedance control for soft dielectric-elastomer actuators.

pub mod augment;
pub mod cli;
pub mod impedance;
pub mod lmi;
pub mod plant;
pub mod poly;
pub mod selfsense;
pub mod sim;
pub mod synthesis;
