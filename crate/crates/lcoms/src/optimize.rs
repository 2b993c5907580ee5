//! Gradient descent on the trained surrogate in latent space, and the
//! end-to-end optimization pipeline: encode an initial structure, descend
//! the latent vector, decode the result. The encoder and decoder run once
//! each; the descent itself never touches the oracle.

use crate::crystal::Crystal;
use crate::surrogate::LatentEnergy;
use crate::vae::{CdVaeModel, LatentVector, VaeError};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OptError {
    #[error("iterate left finite range at step {0}")]
    NonFiniteIterate(usize),
    #[error("latent dimension {got} does not match the model's {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Vae(#[from] VaeError),
}

/// Recorded descent path: iterates `z_0..z_T` and the surrogate energy at
/// each, in the surrogate's normalized units.
#[derive(Debug, Clone, PartialEq)]
pub struct OptTrajectory {
    pub zs: Vec<LatentVector>,
    pub energies: Vec<f64>,
    pub step_size: f64,
}

impl OptTrajectory {
    pub fn steps(&self) -> usize {
        self.zs.len() - 1
    }

    pub fn initial_energy(&self) -> f64 {
        self.energies[0]
    }

    pub fn final_energy(&self) -> f64 {
        *self.energies.last().unwrap()
    }

    pub fn final_z(&self) -> &LatentVector {
        self.zs.last().unwrap()
    }
}

/// Plain gradient descent `z <- z - step * grad` for `steps` iterations,
/// recording every iterate. Deterministic and free of global state.
pub fn descend(
    model: &impl LatentEnergy,
    z0: &LatentVector,
    steps: usize,
    step_size: f64,
) -> Result<OptTrajectory, OptError> {
    if z0.dim() != model.dim() {
        return Err(OptError::DimensionMismatch { expected: model.dim(), got: z0.dim() });
    }
    let mut zs = Vec::with_capacity(steps + 1);
    let mut energies = Vec::with_capacity(steps + 1);
    let mut z = z0.values().to_vec();
    zs.push(z0.clone());
    energies.push(model.value(&z));
    for k in 0..steps {
        let g = model.grad(&z);
        for (zi, gi) in z.iter_mut().zip(&g) {
            *zi -= step_size * gi;
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(OptError::NonFiniteIterate(k + 1));
        }
        zs.push(LatentVector::new(z.clone()));
        energies.push(model.value(&z));
    }
    Ok(OptTrajectory { zs, energies, step_size })
}

/// Wall-clock seconds spent in each phase of one optimization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseTimings {
    pub encode_s: f64,
    pub descend_s: f64,
    pub decode_s: f64,
}

impl PhaseTimings {
    pub fn total(&self) -> f64 {
        self.encode_s + self.descend_s + self.decode_s
    }
}

/// Result of one end-to-end latent optimization.
#[derive(Debug, Clone)]
pub struct LcomOutcome {
    pub crystal: Crystal,
    pub trajectory: OptTrajectory,
    pub timings: PhaseTimings,
}

/// Encodes `init` to its posterior mean, runs `steps` rounds of latent
/// gradient descent on the surrogate, and decodes the final latent vector.
pub fn lcom_optimize(
    vae: &CdVaeModel,
    model: &impl LatentEnergy,
    init: &Crystal,
    steps: usize,
    step_size: f64,
    rng: &mut ChaCha8Rng,
) -> Result<LcomOutcome, OptError> {
    let t0 = Instant::now();
    let (z0, _) = vae.encode(init)?;
    let encode_s = t0.elapsed().as_secs_f64();

    let t1 = Instant::now();
    let trajectory = descend(model, &z0, steps, step_size)?;
    let descend_s = t1.elapsed().as_secs_f64();

    let t2 = Instant::now();
    let crystal = vae.decode(trajectory.final_z(), rng)?;
    let decode_s = t2.elapsed().as_secs_f64();

    Ok(LcomOutcome {
        crystal,
        trajectory,
        timings: PhaseTimings { encode_s, descend_s, decode_s },
    })
}
