//! Conditional flow-matching pretraining.
//!
//! Regresses a velocity network onto the conditional velocity
//! `kappa_dot X_0 + omega_dot X_1` along the interpolant path
//! `X_t = kappa_t X_0 + omega_t X_1` with `t ~ U(0, 1)`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::flow::{FlowModel, SourceDistribution};
use crate::mixture::DataSampler;
use crate::net::{self, Activation, MlpParams, TIME_EMBED_DIM};
use crate::optim::{adam_step, AdamConfig, OptimizerState};
use crate::rng::{seeded_rng, stream};
use crate::schedule::Schedule;

#[derive(Debug, Clone, PartialEq)]
pub struct NetConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            hidden: vec![128, 128, 128],
            activation: Activation::Tanh,
        }
    }
}

impl NetConfig {
    pub fn with_hidden(hidden: &[usize]) -> Self {
        NetConfig {
            hidden: hidden.to_vec(),
            ..Default::default()
        }
    }

    pub fn velocity_widths(&self, dim: usize) -> Vec<usize> {
        let mut w = vec![dim + TIME_EMBED_DIM];
        w.extend_from_slice(&self.hidden);
        w.push(dim);
        w
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 5000,
            batch: 256,
            lr: 1e-3,
        }
    }
}

/// Train a velocity field on samples from `data`; the source is a standard
/// normal. Returns the trained model and the mean loss of the last 50 steps.
pub fn pretrain_cfm(
    data: &dyn DataSampler,
    schedule: Schedule,
    net_cfg: &NetConfig,
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<FlowModel> {
    Ok(pretrain_cfm_traced(data, schedule, net_cfg, cfg, seed)?.0)
}

pub fn pretrain_cfm_traced(
    data: &dyn DataSampler,
    schedule: Schedule,
    net_cfg: &NetConfig,
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<(FlowModel, f64)> {
    let d = data.dim();
    if cfg.batch == 0 {
        return Err(Error::config("pretraining batch must be positive"));
    }
    let mut init_rng = seeded_rng(seed, &[stream::INIT]);
    let mut params = MlpParams::seeded(
        &net_cfg.velocity_widths(d),
        net_cfg.activation,
        &mut init_rng,
    )?;
    let mut opt = OptimizerState::new(AdamConfig::with_lr(cfg.lr), params.param_count());
    let mut rng = seeded_rng(seed, &[stream::DATA]);

    let b = cfg.batch;
    let w = d + TIME_EMBED_DIM;
    let mut x0 = vec![0.0; b * d];
    let mut x1 = vec![0.0; b * d];
    let mut xt = vec![0.0; b * d];
    let mut target = vec![0.0; b * d];
    let mut input = vec![0.0; b * w];
    let mut emb = [0.0; TIME_EMBED_DIM];
    let mut tail_loss = 0.0;
    let mut tail_count = 0usize;

    for step in 0..cfg.steps {
        SourceDistribution::StandardNormal.sample_into(&mut rng, &mut x0);
        for r in 0..b {
            data.sample_into(&mut rng, &mut x1[r * d..(r + 1) * d]);
        }
        for r in 0..b {
            let t: f64 = rng.gen();
            let (k, om) = (schedule.kappa(t), schedule.omega(t));
            let (kd, od) = (schedule.kappa_dot(t), schedule.omega_dot(t));
            net::time_embedding(t, &mut emb);
            for i in 0..d {
                xt[r * d + i] = k * x0[r * d + i] + om * x1[r * d + i];
                target[r * d + i] = kd * x0[r * d + i] + od * x1[r * d + i];
            }
            input[r * w..r * w + d].copy_from_slice(&xt[r * d..(r + 1) * d]);
            input[r * w + d..(r + 1) * w].copy_from_slice(&emb);
        }
        let cache = net::forward_batch(&params, &input, b)?;
        let out = cache.output();
        let mut loss = 0.0;
        let mut cot = vec![0.0; b * d];
        let scale = 1.0 / (b as f64);
        for i in 0..b * d {
            let r = out[i] - target[i];
            loss += r * r * scale;
            cot[i] = 2.0 * r * scale;
        }
        if !loss.is_finite() {
            return Err(Error::non_finite(format!("pretraining loss at step {step}")));
        }
        params.zero_grads();
        net::backward_batch(&mut params, &cache, &cot, false)?;
        // Cosine decay to a tenth of the base rate polishes the late fit.
        let progress = step as f64 / cfg.steps.max(1) as f64;
        opt.config.lr =
            cfg.lr * (0.1 + 0.45 * (1.0 + (std::f64::consts::PI * progress).cos()));
        adam_step(&mut opt, &mut params)?;
        if step + 50 >= cfg.steps {
            tail_loss += loss;
            tail_count += 1;
        }
    }
    let model = FlowModel::new(d, schedule, params)?;
    let mean_tail = if tail_count > 0 {
        tail_loss / tail_count as f64
    } else {
        f64::NAN
    };
    Ok((model, mean_tail))
}
