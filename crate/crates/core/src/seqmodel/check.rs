//! Finite-difference verification of the full teacher-forced loss.

use rand::Rng;

use super::{LatentInput, Model, ModelVars, SeqModelError};
use crate::autodiff::{gradient_check_coords, Graph, Var};
use crate::corpus::ProcessedExample;
use crate::rng::{stream, Purpose};

impl Model {
    /// Redraw every parameter at a well-conditioned random point. Near the
    /// zero-bias initialization several gates and the attention query
    /// weights have second-order-small gradients that drown in
    /// finite-difference noise.
    pub fn randomize_for_check(&mut self, seed: u64, scale: f64) {
        let mut rng = stream(seed, Purpose::Synthetic, 99);
        for (name, t) in self.params.iter_mut() {
            let a = if name == "embedding" {
                1.0
            } else if t.rows() == 1 {
                0.5
            } else {
                scale / (t.rows() as f64).sqrt()
            };
            t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-a..a));
        }
    }

    /// Central-difference check of `sum over batch of (nll + kl)` with
    /// respect to the `per_tensor` coordinates of largest gradient magnitude
    /// in every parameter tensor. `noise[i]` is the posterior noise of
    /// example `i` when the latent path is on. Returns the largest relative
    /// error per tensor.
    ///
    /// Central differences at `eps` carry an absolute error near
    /// `1e-16 * |loss| / eps`; coordinates whose true gradient is below that
    /// floor cannot be resolved, so the largest ones are compared.
    pub fn loss_gradient_check(
        &self,
        batch: &[ProcessedExample],
        noise: &[Vec<f64>],
        eps: f64,
        per_tensor: usize,
    ) -> Result<Vec<(String, f64)>, SeqModelError> {
        let cfg = self.config;
        let objective = |g: &mut Graph<'_>, vars: &ModelVars| -> Result<Var, SeqModelError> {
            let mut total: Option<Var> = None;
            for (i, ex) in batch.iter().enumerate() {
                let latent = if cfg.cvae {
                    LatentInput::Posterior(&noise[i])
                } else {
                    LatentInput::None
                };
                let l = vars.example_loss(g, ex, latent)?;
                let mut v = l.nll;
                if let Some(kl) = l.kl {
                    v = g.add(v, kl)?;
                }
                total = Some(match total {
                    None => v,
                    Some(t) => g.add(t, v)?,
                });
            }
            total.ok_or(SeqModelError::EmptyInput("batch"))
        };
        let analytic = {
            let mut g = Graph::new();
            let vars = self.bind_trainable(&mut g)?;
            let loss = objective(&mut g, &vars)?;
            let grads = g.backward(loss)?;
            vars.leaves
                .iter()
                .map(|(name, v)| (name.clone(), grads.get(*v).map(|t| t.data().to_vec())))
                .collect::<Vec<_>>()
        };
        let mut out = Vec::new();
        for spec in cfg.parameter_specs() {
            let t = self.params.require(&spec.name)?;
            let n = t.numel();
            let grad = analytic
                .iter()
                .find(|(name, _)| *name == spec.name)
                .and_then(|(_, g)| g.clone())
                .unwrap_or_else(|| vec![0.0; n]);
            let mut coords: Vec<usize> = (0..n).collect();
            coords.sort_by(|&a, &b| grad[b].abs().total_cmp(&grad[a].abs()).then(a.cmp(&b)));
            coords.truncate(per_tensor);
            let err = gradient_check_coords(
                |g, x| {
                    let vars = ModelVars::bind(g, &cfg, &self.params, |_| false, Some((&spec.name, x)))?;
                    objective(g, &vars)
                },
                t,
                eps,
                &coords,
            )?;
            out.push((spec.name, err));
        }
        Ok(out)
    }
}
