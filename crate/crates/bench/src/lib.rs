//! Shared fixtures for the benchmarks.

use neurolrp::synth::{generate_subject, Class};
use neurolrp::{ArchConfig, Network, PhantomParams, Regime, Volume};

/// Default desk-scale network with fixed initialization.
pub fn desk_network() -> Network {
    Network::from_arch(&ArchConfig::default(), 7).expect("default architecture builds")
}

pub fn patient_volume() -> Volume {
    generate_subject(Class::Patient, Regime::Lesion, &PhantomParams::default(), 3)
        .expect("default phantom generates")
        .0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixtures_fit_together() {
        let net = desk_network();
        let v = patient_volume();
        assert_eq!(net.input_dims(), v.dims());
        assert!(net.predict(&v).unwrap().1.is_finite());
    }
}
