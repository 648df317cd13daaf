//! Variational latent path: recognition network, standard-normal prior,
//! reparameterized sampling, closed-form KL and the annealed objective.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{AutodiffError, Graph, Tensor, Var};
use crate::seqmodel::Linear;

type Result<T> = std::result::Result<T, AutodiffError>;

pub const LOG_VAR_MIN: f64 = -10.0;
pub const LOG_VAR_MAX: f64 = 10.0;
pub const DEFAULT_RAMP_STEPS: u64 = 5000;

/// Which distribution a latent sample was drawn from. Training draws from
/// the posterior, generation from the prior.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LatentPath {
    Posterior,
    Prior,
}

#[derive(Clone, Copy, Debug)]
pub struct RecognitionVars {
    pub hidden: Linear,
    pub mu: Linear,
    pub log_var: Linear,
}

/// Graph handles for the posterior's mean and clamped log-variance rows.
#[derive(Clone, Copy, Debug)]
pub struct LatentParams {
    pub mu: Var,
    pub log_var: Var,
}

/// `q(z | R, C, F)`: one tanh hidden layer over
/// `[response_vec, context_summary, fact_summary]`, then linear heads.
pub fn recognize(
    g: &mut Graph<'_>,
    response_vec: Var,
    context_summary: Var,
    fact_summary: Var,
    p: &RecognitionVars,
) -> Result<LatentParams> {
    let x = g.concat(&[response_vec, context_summary, fact_summary], 1)?;
    let h = g.affine(x, p.hidden.w, p.hidden.b)?;
    let h = g.tanh(h)?;
    let mu = g.affine(h, p.mu.w, p.mu.b)?;
    let lv = g.affine(h, p.log_var.w, p.log_var.b)?;
    let log_var = g.clamp(lv, LOG_VAR_MIN, LOG_VAR_MAX)?;
    Ok(LatentParams { mu, log_var })
}

/// `dim` independent standard-normal draws.
pub fn sample_prior<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

/// `z = mu + exp(log_var / 2) * eps`.
pub fn reparameterize(g: &mut Graph<'_>, lp: &LatentParams, eps: &[f64]) -> Result<Var> {
    let e = g.constant(Tensor::row(eps.to_vec()));
    let half = g.scale(lp.log_var, 0.5)?;
    let sigma = g.exp(half)?;
    let noise = g.mul(sigma, e)?;
    g.add(lp.mu, noise)
}

/// `KL(N(mu, e^lv) || N(0, I)) = -1/2 sum(1 + lv - mu^2 - e^lv)`, a `1 x 1`
/// node.
pub fn kl_to_standard_normal(g: &mut Graph<'_>, lp: &LatentParams) -> Result<Var> {
    let mu2 = g.mul(lp.mu, lp.mu)?;
    let var = g.exp(lp.log_var)?;
    let a = g.add_scalar(lp.log_var, 1.0)?;
    let a = g.sub(a, mu2)?;
    let a = g.sub(a, var)?;
    let s = g.sum_all(a)?;
    g.scale(s, -0.5)
}

/// Value-level twin of [`kl_to_standard_normal`].
pub fn kl_closed_form(mu: &[f64], log_var: &[f64]) -> f64 {
    -0.5 * mu
        .iter()
        .zip(log_var)
        .map(|(m, lv)| 1.0 + lv - m * m - lv.exp())
        .sum::<f64>()
}

/// Linear KL ramp over `ramp_steps` steps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AnnealSchedule {
    ramp_steps: u64,
}

impl AnnealSchedule {
    /// `None` when `ramp_steps` is 0.
    pub fn new(ramp_steps: u64) -> Option<Self> {
        (ramp_steps >= 1).then_some(Self { ramp_steps })
    }

    pub fn ramp_steps(&self) -> u64 {
        self.ramp_steps
    }
}

impl Default for AnnealSchedule {
    fn default() -> Self {
        Self {
            ramp_steps: DEFAULT_RAMP_STEPS,
        }
    }
}

/// `min(1, step / K)`.
pub fn anneal_weight(step: u64, schedule: &AnnealSchedule) -> f64 {
    if step >= schedule.ramp_steps {
        1.0
    } else {
        step as f64 / schedule.ramp_steps as f64
    }
}

/// Negated, KL-weighted lower bound: `recon_nll + w * kl`.
pub fn elbo_loss(recon_nll: f64, kl: f64, w: f64) -> f64 {
    recon_nll + w * kl
}
