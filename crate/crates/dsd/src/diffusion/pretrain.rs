//! Generative pretraining: minimize the epsilon-prediction MSE
//! `|| eps - eps_hat(z_t, t, r_y) ||^2` over random timesteps, jointly over
//! encoders and denoiser. The returned weights are what scoring freezes.

use serde::{Deserialize, Serialize};

use crate::data::{render, MatchInstance};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::{Graph, Tensor};
use crate::optim::{Momentum, OptimConfig};
use crate::rng::{derive2, SplitMix64};

const LABEL_BATCH: u64 = 0x4241;
const LABEL_NOISE: u64 = 0x4E4F;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optim: OptimConfig,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 3000,
            batch_size: 8,
            optim: OptimConfig {
                lr: 0.05,
                momentum: 0.9,
            },
            seed: 0,
        }
    }
}

/// Train in place on the positive (image, caption) pair of each instance.
/// Returns the per-step mean batch loss.
pub fn pretrain(
    model: &mut Model,
    instances: &[MatchInstance],
    cfg: &PretrainConfig,
) -> Result<Vec<f64>> {
    if instances.is_empty() {
        return Err(Error::Training("pretraining dataset is empty".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Parameter("batch_size must be positive".into()));
    }
    let mut opt = Momentum::new(cfg.optim)?;
    let n_tokens = model.config.n_image_tokens();
    let d = model.config.d_model;
    let timesteps = model.config.timesteps;
    let mut trace = Vec::with_capacity(cfg.steps);

    // Full-batch when the batch covers the dataset: deterministic sweeps.
    let full_batch = cfg.batch_size >= instances.len();
    let batch_len = cfg.batch_size.min(instances.len());
    for step in 0..cfg.steps {
        let mut batch_rng = SplitMix64::new(derive2(cfg.seed, LABEL_BATCH, step as u64));
        let mut grad_acc: Option<Vec<Tensor>> = None;
        let mut loss_sum = 0.0;

        for item in 0..batch_len {
            let inst = if full_batch {
                &instances[item]
            } else {
                &instances[batch_rng.next_index(instances.len())]
            };
            let caption = &inst.candidates[inst.true_index];
            let image = render(&inst.scene);

            let mut draw_rng =
                SplitMix64::new(derive2(cfg.seed, LABEL_NOISE ^ step as u64, item as u64));
            let t = 1 + draw_rng.next_index(timesteps);
            let eps = Tensor::randn(&[n_tokens, d], 1.0, &mut draw_rng);

            let mut g = Graph::new();
            let vars = model.bind(&mut g, true)?;
            let r_y = model.encode_caption(&mut g, &vars, caption)?;
            let z0 = model.encode_image(&mut g, &vars, &image)?;
            let eps_id = g.constant(eps)?;
            let trace_fwd = model
                .noised_forward(&mut g, &vars, z0, t, eps_id, r_y, None)
                .map_err(divergence)?;
            let diff = g.sub(trace_fwd.eps_hat, eps_id).map_err(divergence)?;
            let sq = g.mul(diff, diff).map_err(divergence)?;
            let loss = g.mean_all(sq).map_err(divergence)?;
            loss_sum += g.value(loss).item()?;
            g.backward(loss)?;

            let acc = grad_acc.get_or_insert_with(|| {
                vars.param_ids
                    .iter()
                    .map(|&id| Tensor::zeros(g.value(id).shape()))
                    .collect()
            });
            for (slot, &id) in acc.iter_mut().zip(&vars.param_ids) {
                if let Some(grad) = g.grad(id) {
                    for (a, b) in slot.data_mut().iter_mut().zip(grad.data()) {
                        *a += b;
                    }
                }
            }
        }

        let mut grads = grad_acc.expect("batch_size > 0");
        let inv = 1.0 / batch_len as f64;
        for grad in &mut grads {
            for v in grad.data_mut() {
                *v *= inv;
            }
        }
        let mean_loss = loss_sum * inv;
        if !mean_loss.is_finite() {
            return Err(Error::Training(format!(
                "loss diverged to {mean_loss} at step {step}"
            )));
        }
        trace.push(mean_loss);

        let mut params: Vec<&mut Tensor> = model
            .params_mut()
            .into_iter()
            .map(|(_, t)| t)
            .collect();
        opt.step(&mut params, &grads)?;
    }
    Ok(trace)
}

fn divergence(e: Error) -> Error {
    match e {
        Error::Numeric(msg) => Error::Training(format!("training diverged: {msg}")),
        other => other,
    }
}
