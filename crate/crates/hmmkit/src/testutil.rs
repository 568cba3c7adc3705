//! Helpers shared by unit tests across modules.

use nalgebra::DMatrix;
use rand::rngs::StdRng;
use rand::Rng;

use crate::params::{EmissionFamily, EmissionParams, EmissionSpec, NaturalParams};

/// Random valid model: strictly positive transition rows, spread-out emissions.
pub(crate) fn random_natural(rng: &mut StdRng, spec: &EmissionSpec) -> NaturalParams {
    let m = spec.m();
    let mut gamma = DMatrix::zeros(m, m);
    for i in 0..m {
        let mut row: Vec<f64> = (0..m).map(|_| rng.random_range(0.05..1.0)).collect();
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
        for j in 0..m {
            gamma[(i, j)] = row[j];
        }
    }
    let emission = match spec.family() {
        EmissionFamily::Poisson => EmissionParams::Poisson {
            lambda: (0..m).map(|_| rng.random_range(0.2..15.0)).collect(),
        },
        EmissionFamily::Gaussian => EmissionParams::Gaussian {
            mu: (0..m).map(|_| rng.random_range(-8.0..8.0)).collect(),
            sigma: (0..m).map(|_| rng.random_range(0.3..4.0)).collect(),
        },
    };
    NaturalParams::new(gamma, emission).unwrap()
}

/// Random in-support observations for the family (not drawn from the model;
/// oracles only need valid inputs).
pub(crate) fn random_series(rng: &mut StdRng, family: EmissionFamily, t_len: usize) -> Vec<f64> {
    (0..t_len)
        .map(|_| match family {
            EmissionFamily::Poisson => rng.random_range(0..12u32) as f64,
            EmissionFamily::Gaussian => rng.random_range(-10.0..10.0),
        })
        .collect()
}
