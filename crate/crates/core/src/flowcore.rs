//! Rectified-flow training objective and Euler sampling on latent grids.
//!
//! Time runs from `t = 0` (data) to `t = 1` (noise): `y_t = (1 - t) y + t eps`
//! and the regression target is the constant velocity `eps - y`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::LatentGrid;
use crate::segdit::{ModelError, ModelParams, TaskCondition};

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("timestep {0} outside [0, 1]")]
    TimeOutOfRange(f64),
    #[error("latent grids have different supports")]
    SupportMismatch,
    #[error("sampling needs at least one step")]
    ZeroSteps,
    #[error("loss weight table needs at least one entry")]
    EmptyWeightTable,
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Per-timestep loss weighting `w(t)`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind", content = "weights")]
pub enum LossWeight {
    #[default]
    Uniform,
    /// Piecewise-constant weights over equal-width bins of `[0, 1]`.
    Table(Vec<f64>),
}

impl LossWeight {
    pub fn weight(&self, t: f64) -> Result<f64, FlowError> {
        match self {
            LossWeight::Uniform => Ok(1.0),
            LossWeight::Table(w) if w.is_empty() => Err(FlowError::EmptyWeightTable),
            LossWeight::Table(w) => Ok(w[((t * w.len() as f64) as usize).min(w.len() - 1)]),
        }
    }
}

fn check_time(t: f64) -> Result<(), FlowError> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(FlowError::TimeOutOfRange(t))
    }
}

/// `(1 - t) y + t eps` on the shared support.
pub fn interpolate(y: &LatentGrid, eps: &LatentGrid, t: f64) -> Result<LatentGrid, FlowError> {
    check_time(t)?;
    if !y.same_support(eps) {
        return Err(FlowError::SupportMismatch);
    }
    Ok(y.with_values(y.values().iter().zip(eps.values()).map(|(a, e)| (1.0 - t) * a + t * e).collect()))
}

/// Weighted mean squared error between `v_hat` and `eps - y`, together with
/// its gradient with respect to `v_hat`.
pub fn cfm_loss_and_grad(
    v_hat: &LatentGrid,
    y: &LatentGrid,
    eps: &LatentGrid,
    t: f64,
    weight: &LossWeight,
) -> Result<(f64, Vec<f64>), FlowError> {
    check_time(t)?;
    if !v_hat.same_support(y) || !y.same_support(eps) {
        return Err(FlowError::SupportMismatch);
    }
    let w = weight.weight(t)?;
    let count = v_hat.values().len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(v_hat.values().len());
    for ((v, a), e) in v_hat.values().iter().zip(y.values()).zip(eps.values()) {
        let r = v - (e - a);
        loss += r * r;
        grad.push(w * 2.0 * r / count);
    }
    Ok((w * loss / count, grad))
}

pub fn cfm_loss(v_hat: &LatentGrid, y: &LatentGrid, eps: &LatentGrid, t: f64, weight: &LossWeight) -> Result<f64, FlowError> {
    cfm_loss_and_grad(v_hat, y, eps, t, weight).map(|(l, _)| l)
}

/// Standard normal latent on the support of `like`, deterministic in `seed`.
pub fn sample_noise(like: &LatentGrid, seed: u64) -> LatentGrid {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    like.with_values((0..like.values().len()).map(|_| StandardNormal.sample(&mut rng)).collect())
}

/// Anything that predicts a velocity field for the sampler.
pub trait VelocityModel {
    fn velocity(&self, y_t: &LatentGrid, z: &LatentGrid, cond: &TaskCondition, t: f64) -> Result<LatentGrid, FlowError>;
}

impl VelocityModel for ModelParams {
    fn velocity(&self, y_t: &LatentGrid, z: &LatentGrid, cond: &TaskCondition, t: f64) -> Result<LatentGrid, FlowError> {
        Ok(self.forward(y_t, z, cond, t)?)
    }
}

/// Integrates from pure noise at `t = 1` to `t = 0` with `steps` uniform
/// Euler steps: `y <- y - (1 / steps) v(y, t_k)` at `t_k = k / steps`.
pub fn euler_sample<M: VelocityModel + ?Sized>(
    model: &M,
    z: &LatentGrid,
    cond: &TaskCondition,
    steps: usize,
    seed: u64,
) -> Result<LatentGrid, FlowError> {
    euler_from(model, sample_noise(z, seed), z, cond, steps)
}

/// Euler integration starting from a given `t = 1` state.
pub fn euler_from<M: VelocityModel + ?Sized>(
    model: &M,
    start: LatentGrid,
    z: &LatentGrid,
    cond: &TaskCondition,
    steps: usize,
) -> Result<LatentGrid, FlowError> {
    if steps == 0 {
        return Err(FlowError::ZeroSteps);
    }
    if !start.same_support(z) {
        return Err(FlowError::SupportMismatch);
    }
    let dt = 1.0 / steps as f64;
    let mut y = start;
    for k in (1..=steps).rev() {
        let t = k as f64 * dt;
        let v = model.velocity(&y, z, cond, t)?;
        if !v.same_support(&y) {
            return Err(FlowError::SupportMismatch);
        }
        for (a, b) in y.values_mut().iter_mut().zip(v.values()) {
            *a -= dt * b;
        }
    }
    Ok(y)
}
