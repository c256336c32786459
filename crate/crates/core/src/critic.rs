//! Variational critics for divergences without closed-form first variations:
//! the f-GAN critic estimating a KL divergence and the soft-1-Lipschitz
//! critic estimating a Wasserstein-1 distance. Critics persist across outer
//! merge iterations and are continually fine-tuned.

use rand::Rng;

use crate::error::{Error, Result};
use crate::net::{self, Activation, MlpParams};
use crate::optim::{adam_step, AdamConfig, OptimizerState};
use crate::rng::{seeded_rng, stream};

/// Clamp applied to critic outputs before exponentiation; only active while
/// the critic is far from its optimum.
pub const FGAN_EXP_CLAMP: f64 = 20.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CriticKind {
    ReverseKl,
    W1,
}

impl CriticKind {
    pub fn tag(self) -> u8 {
        match self {
            CriticKind::ReverseKl => 0,
            CriticKind::W1 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(CriticKind::ReverseKl),
            1 => Ok(CriticKind::W1),
            other => Err(Error::Format(format!("unknown critic kind tag {other}"))),
        }
    }
}

/// A scalar-output network with its optimizer state and kind tag.
#[derive(Debug, Clone)]
pub struct CriticNet {
    pub net: MlpParams,
    pub kind: CriticKind,
    pub opt: OptimizerState,
    pub trained_steps: u64,
    /// Number of clamped exponential evaluations seen during training.
    pub clamp_events: u64,
}

impl CriticNet {
    pub fn new(dim: usize, hidden: &[usize], kind: CriticKind, lr: f64, seed: u64) -> Result<Self> {
        let mut widths = vec![dim];
        widths.extend_from_slice(hidden);
        widths.push(1);
        let mut rng = seeded_rng(seed, &[stream::INIT, kind.tag() as u64]);
        let net = MlpParams::seeded(&widths, Activation::Tanh, &mut rng)?;
        let opt = OptimizerState::new(AdamConfig::with_lr(lr), net.param_count());
        Ok(CriticNet {
            net,
            kind,
            opt,
            trained_steps: 0,
            clamp_events: 0,
        })
    }

    pub fn dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn value_batch(&self, xs: &[f64], m: usize) -> Result<Vec<f64>> {
        net::output_batch(&self.net, xs, m)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CriticTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Gradient-penalty coefficient; used by the W1 kind only.
    pub grad_penalty: f64,
}

impl CriticTrainConfig {
    pub fn reverse_kl_defaults() -> Self {
        CriticTrainConfig {
            steps: 300,
            batch: 128,
            lr: 5e-5,
            grad_penalty: 0.0,
        }
    }

    pub fn w1_defaults() -> Self {
        CriticTrainConfig {
            steps: 800,
            batch: 128,
            lr: 1e-5,
            grad_penalty: 10.0,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.steps == 0 && self.batch == 0 {
            return Err(Error::config("critic config must be positive"));
        }
        if self.batch == 0 || self.lr <= 0.0 {
            return Err(Error::config("critic batch and learning rate must be positive"));
        }
        Ok(())
    }
}

/// f-GAN objective `mean_p[phi] - mean_q[exp(phi - 1)]`; its maximum over
/// phi estimates `KL(p || q)`.
pub fn fgan_reverse_kl_objective(
    critic: &CriticNet,
    samples_p: &[f64],
    samples_q: &[f64],
) -> Result<f64> {
    let d = critic.dim();
    let (np, nq) = (samples_p.len() / d, samples_q.len() / d);
    if np == 0 || nq == 0 {
        return Err(Error::input("critic objective needs non-empty sample sets"));
    }
    let vp = critic.value_batch(samples_p, np)?;
    let vq = critic.value_batch(samples_q, nq)?;
    let mean_p = vp.iter().sum::<f64>() / np as f64;
    let mean_q = vq
        .iter()
        .map(|&v| (v.min(FGAN_EXP_CLAMP) - 1.0).exp())
        .sum::<f64>()
        / nq as f64;
    let obj = mean_p - mean_q;
    if !obj.is_finite() {
        return Err(Error::non_finite("f-GAN objective"));
    }
    Ok(obj)
}

/// W1 critic objective `mean_p[phi] - mean_q[phi]` minus the gradient penalty
/// `lambda * mean[(||grad phi(xhat)|| - 1)^2]` on interpolates between paired
/// p- and q-samples.
pub fn w1_critic_objective(
    critic: &CriticNet,
    samples_p: &[f64],
    samples_q: &[f64],
    grad_penalty: f64,
    seed: u64,
) -> Result<f64> {
    let d = critic.dim();
    let (np, nq) = (samples_p.len() / d, samples_q.len() / d);
    if np == 0 || nq == 0 {
        return Err(Error::input("critic objective needs non-empty sample sets"));
    }
    let vp = critic.value_batch(samples_p, np)?;
    let vq = critic.value_batch(samples_q, nq)?;
    let mean_p = vp.iter().sum::<f64>() / np as f64;
    let mean_q = vq.iter().sum::<f64>() / nq as f64;
    let mut obj = mean_p - mean_q;
    if grad_penalty > 0.0 {
        let m = np.min(nq);
        let mut rng = seeded_rng(seed, &[stream::CRITIC, 0x17]);
        let interp = interpolates(samples_p, samples_q, d, m, &mut rng);
        let cache = net::forward_batch(&critic.net, &interp, m)?;
        let (g, _) = net::input_gradient_scalar(&critic.net, &cache)?;
        let mut pen = 0.0;
        for r in 0..m {
            let norm = l2(&g[r * d..(r + 1) * d]);
            pen += (norm - 1.0).powi(2);
        }
        obj -= grad_penalty * pen / m as f64;
    }
    if !obj.is_finite() {
        return Err(Error::non_finite("W1 critic objective"));
    }
    Ok(obj)
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn interpolates(
    p: &[f64],
    q: &[f64],
    d: usize,
    m: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Vec<f64> {
    let mut out = vec![0.0; m * d];
    for r in 0..m {
        let u: f64 = rng.gen();
        for i in 0..d {
            out[r * d + i] = u * p[r * d + i] + (1.0 - u) * q[r * d + i];
        }
    }
    out
}

fn minibatch(pool: &[f64], d: usize, batch: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Vec<f64> {
    let n = pool.len() / d;
    let mut out = vec![0.0; batch * d];
    for r in 0..batch {
        let idx = rng.gen_range(0..n);
        out[r * d..(r + 1) * d].copy_from_slice(&pool[idx * d..(idx + 1) * d]);
    }
    out
}

/// Ascend the f-GAN objective for `config.steps` minibatch steps, drawing
/// from fixed sample pools. The critic state persists, so calling this every
/// outer merge iteration continually fine-tunes the same critic. Returns the
/// per-step objective trace.
pub fn train_reverse_kl_critic(
    critic: &mut CriticNet,
    pool_p: &[f64],
    pool_q: &[f64],
    config: &CriticTrainConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    if critic.kind != CriticKind::ReverseKl {
        return Err(Error::state("train_reverse_kl_critic needs a reverse-kl critic"));
    }
    config.validate()?;
    let d = critic.dim();
    let mut rng = seeded_rng(seed, &[stream::CRITIC, critic.trained_steps]);
    let mut trace = Vec::with_capacity(config.steps);
    let b = config.batch;
    critic.opt.config.lr = config.lr;
    for _ in 0..config.steps {
        let xp = minibatch(pool_p, d, b, &mut rng);
        let xq = minibatch(pool_q, d, b, &mut rng);
        // Stack p then q rows in one batch.
        let mut input = xp.clone();
        input.extend_from_slice(&xq);
        let cache = net::forward_batch(&critic.net, &input, 2 * b)?;
        let out = cache.output();
        let mut obj = 0.0;
        let mut cot = vec![0.0; 2 * b];
        for r in 0..b {
            obj += out[r] / b as f64;
            // Maximizing: descend the negated objective.
            cot[r] = -1.0 / b as f64;
        }
        for r in b..2 * b {
            let phi = out[r];
            let clamped = phi > FGAN_EXP_CLAMP;
            if clamped {
                critic.clamp_events += 1;
            }
            let e = (phi.min(FGAN_EXP_CLAMP) - 1.0).exp();
            obj -= e / b as f64;
            cot[r] = if clamped { 0.0 } else { e / b as f64 };
        }
        critic.net.zero_grads();
        net::backward_batch(&mut critic.net, &cache, &cot, false)?;
        adam_step(&mut critic.opt, &mut critic.net)?;
        critic.trained_steps += 1;
        trace.push(obj);
    }
    Ok(trace)
}

/// Ascend the penalized W1 objective; same pooling and persistence contract
/// as the reverse-KL trainer.
pub fn train_w1_critic(
    critic: &mut CriticNet,
    pool_p: &[f64],
    pool_q: &[f64],
    config: &CriticTrainConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    if critic.kind != CriticKind::W1 {
        return Err(Error::state("train_w1_critic needs a w1 critic"));
    }
    config.validate()?;
    let d = critic.dim();
    let mut rng = seeded_rng(seed, &[stream::CRITIC, critic.trained_steps, 1]);
    let mut trace = Vec::with_capacity(config.steps);
    let b = config.batch;
    critic.opt.config.lr = config.lr;
    for _ in 0..config.steps {
        let xp = minibatch(pool_p, d, b, &mut rng);
        let xq = minibatch(pool_q, d, b, &mut rng);
        let mut input = xp.clone();
        input.extend_from_slice(&xq);
        let cache = net::forward_batch(&critic.net, &input, 2 * b)?;
        let out = cache.output();
        let mut obj = 0.0;
        let mut cot = vec![0.0; 2 * b];
        for r in 0..b {
            obj += out[r] / b as f64;
            cot[r] = -1.0 / b as f64;
        }
        for r in b..2 * b {
            obj -= out[r] / b as f64;
            cot[r] = 1.0 / b as f64;
        }
        critic.net.zero_grads();
        net::backward_batch(&mut critic.net, &cache, &cot, false)?;
        // Gradient penalty on interpolates, second-order backward.
        if config.grad_penalty > 0.0 {
            let interp = interpolates(&xp, &xq, d, b, &mut rng);
            let icache = net::forward_batch(&critic.net, &interp, b)?;
            let (g, chain) = net::input_gradient_scalar(&critic.net, &icache)?;
            let mut gbar = vec![0.0; b * d];
            for r in 0..b {
                let grow = &g[r * d..(r + 1) * d];
                let norm = l2(grow).max(1e-12);
                let coeff = config.grad_penalty * 2.0 * (norm - 1.0) / norm / b as f64;
                obj -= config.grad_penalty * (norm - 1.0).powi(2) / b as f64;
                for i in 0..d {
                    // Descending -objective: the penalty enters the loss with +.
                    gbar[r * d + i] = coeff * grow[i];
                }
            }
            net::grad_dot_backward(&mut critic.net, &icache, &chain, &gbar)?;
        }
        adam_step(&mut critic.opt, &mut critic.net)?;
        critic.trained_steps += 1;
        trace.push(obj);
    }
    Ok(trace)
}

/// Per-sample reward-gradient contribution of a trained critic:
/// `-grad_x exp(phi(x) - 1)` for the reverse-KL kind, `-grad_x phi(x)` for
/// the W1 kind.
pub fn critic_gradient_field(critic: &CriticNet, xs: &[f64], m: usize) -> Result<Vec<f64>> {
    match critic.kind {
        CriticKind::W1 => {
            let cot = vec![-1.0; m];
            net::input_vjp(&critic.net, xs, m, &cot)
        }
        CriticKind::ReverseKl => {
            let phi = critic.value_batch(xs, m)?;
            let cot: Vec<f64> = phi
                .iter()
                .map(|&v| {
                    if v > FGAN_EXP_CLAMP {
                        0.0
                    } else {
                        -(v - 1.0).exp()
                    }
                })
                .collect();
            net::input_vjp(&critic.net, xs, m, &cot)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::StandardNormal;

    fn gaussian_pool(mean: f64, n: usize, seed: u64) -> Vec<f64> {
        let mut rng = seeded_rng(seed, &[stream::SAMPLES, mean.to_bits()]);
        (0..n)
            .map(|_| mean + rng.sample::<f64, _>(StandardNormal))
            .collect()
    }

    fn constant_critic(kind: CriticKind, c: f64) -> CriticNet {
        let mut critic = CriticNet::new(1, &[4], kind, 1e-3, 0).unwrap();
        for l in 0..critic.net.num_layers() {
            critic.net.weight_mut(l).data_mut().iter_mut().for_each(|v| *v = 0.0);
            critic.net.bias_mut(l).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let last = critic.net.num_layers() - 1;
        critic.net.bias_mut(last).data_mut()[0] = c;
        critic
    }

    #[test]
    fn constant_one_critic_scores_zero_objective() {
        let critic = constant_critic(CriticKind::ReverseKl, 1.0);
        let p = gaussian_pool(0.0, 64, 1);
        let q = gaussian_pool(2.0, 64, 2);
        let obj = fgan_reverse_kl_objective(&critic, &p, &q).unwrap();
        assert!(obj.abs() < 1e-12);
    }

    #[test]
    fn constant_critic_w1_objective_is_zero_before_penalty() {
        let critic = constant_critic(CriticKind::W1, 3.3);
        let p = gaussian_pool(0.0, 64, 3);
        let q = gaussian_pool(1.0, 64, 4);
        let obj = w1_critic_objective(&critic, &p, &q, 0.0, 7).unwrap();
        assert!(obj.abs() < 1e-12);
    }

    #[test]
    fn constant_critic_has_zero_gradient_field() {
        let critic = constant_critic(CriticKind::ReverseKl, 0.4);
        let field = critic_gradient_field(&critic, &[0.1, -0.5, 2.0], 3).unwrap();
        assert!(field.iter().all(|v| v.abs() < 1e-12));
        let critic = constant_critic(CriticKind::W1, 0.4);
        let field = critic_gradient_field(&critic, &[0.1, -0.5, 2.0], 3).unwrap();
        assert!(field.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn linear_critic_gradient_fields_match_hand_computation() {
        // phi(x) = x via a single linear layer.
        let mut lin = CriticNet::new(1, &[], CriticKind::ReverseKl, 1e-3, 0).unwrap();
        lin.net.weight_mut(0).data_mut()[0] = 1.0;
        lin.net.bias_mut(0).data_mut()[0] = 0.0;
        // reverse-kl kind: -d/dx exp(x - 1) at x = 0 is -exp(-1).
        let f = critic_gradient_field(&lin, &[0.0], 1).unwrap();
        assert!((f[0] + (-1.0f64).exp()).abs() < 1e-12);
        // w1 kind: -d/dx phi = -1 everywhere.
        let mut linw = CriticNet::new(1, &[], CriticKind::W1, 1e-3, 0).unwrap();
        linw.net.weight_mut(0).data_mut()[0] = 1.0;
        let f = critic_gradient_field(&linw, &[0.3, -2.0], 2).unwrap();
        assert!(f.iter().all(|v| (v + 1.0).abs() < 1e-12));
    }

    #[test]
    fn zero_steps_leaves_critic_unchanged() {
        let mut critic = CriticNet::new(1, &[16, 16], CriticKind::ReverseKl, 1e-4, 5).unwrap();
        let before = critic.net.flat();
        let p = gaussian_pool(0.0, 256, 8);
        let q = gaussian_pool(0.0, 256, 9);
        let cfg = CriticTrainConfig {
            steps: 0,
            ..CriticTrainConfig::reverse_kl_defaults()
        };
        train_reverse_kl_critic(&mut critic, &p, &q, &cfg, 3).unwrap();
        assert_eq!(critic.net.flat(), before);
        assert_eq!(critic.trained_steps, 0);
    }

    #[test]
    fn matched_distributions_train_to_flat_critic() {
        let mut critic = CriticNet::new(1, &[32, 32], CriticKind::ReverseKl, 1e-3, 6).unwrap();
        let p = gaussian_pool(0.0, 4096, 10);
        let q = gaussian_pool(0.0, 4096, 11);
        let cfg = CriticTrainConfig {
            steps: 1200,
            batch: 256,
            lr: 1e-3,
            grad_penalty: 0.0,
        };
        train_reverse_kl_critic(&mut critic, &p, &q, &cfg, 4).unwrap();
        let obj = fgan_reverse_kl_objective(&critic, &p, &q).unwrap();
        assert!(obj.abs() < 0.02, "objective {obj}");
        // Gradient field is near zero on samples at the optimum.
        let field = critic_gradient_field(&critic, &p[..512], 512).unwrap();
        let mean_norm = field.iter().map(|v| v.abs()).sum::<f64>() / 512.0;
        assert!(mean_norm < 0.1, "mean field norm {mean_norm}");
    }

    #[test]
    fn gaussian_kl_is_recovered_within_tolerance() {
        // KL(N(1,1) || N(0,1)) = 0.5
        let mut critic = CriticNet::new(1, &[64, 64], CriticKind::ReverseKl, 1e-3, 7).unwrap();
        let p = gaussian_pool(1.0, 8192, 12);
        let q = gaussian_pool(0.0, 8192, 13);
        let cfg = CriticTrainConfig {
            steps: 2500,
            batch: 256,
            lr: 8e-4,
            grad_penalty: 0.0,
        };
        train_reverse_kl_critic(&mut critic, &p, &q, &cfg, 5).unwrap();
        let obj = fgan_reverse_kl_objective(&critic, &p, &q).unwrap();
        assert!((obj - 0.5).abs() < 0.1, "objective {obj}");
        assert!(obj > 0.4 && obj < 0.6);
    }

    #[test]
    fn w1_critic_recovers_translation_distance() {
        // W1(N(-1,1), N(1,1)) = 2.
        let mut critic = CriticNet::new(1, &[64, 64], CriticKind::W1, 1e-3, 8).unwrap();
        let p = gaussian_pool(-1.0, 8192, 14);
        let q = gaussian_pool(1.0, 8192, 15);
        let cfg = CriticTrainConfig {
            steps: 3000,
            batch: 256,
            lr: 1e-3,
            grad_penalty: 10.0,
        };
        train_w1_critic(&mut critic, &p, &q, &cfg, 6).unwrap();
        let obj = w1_critic_objective(&critic, &p, &q, 0.0, 16).unwrap();
        assert!((obj.abs() - 2.0).abs() < 0.3, "objective {obj}");
        // Soft Lipschitz constraint on interpolates.
        let mut rng = seeded_rng(17, &[stream::CRITIC]);
        let interp = interpolates(&p[..2048], &q[..2048], 1, 2048, &mut rng);
        let cache = net::forward_batch(&critic.net, &interp, 2048).unwrap();
        let (g, _) = net::input_gradient_scalar(&critic.net, &cache).unwrap();
        let mean_norm = g.iter().map(|v| v.abs()).sum::<f64>() / 2048.0;
        assert!(
            (0.8..=1.2).contains(&mean_norm),
            "mean gradient norm {mean_norm}"
        );
    }

    #[test]
    fn matched_w1_critic_objective_is_near_zero() {
        let mut critic = CriticNet::new(1, &[32, 32], CriticKind::W1, 1e-3, 9).unwrap();
        let p = gaussian_pool(0.5, 4096, 18);
        let q = gaussian_pool(0.5, 4096, 19);
        let cfg = CriticTrainConfig {
            steps: 1500,
            batch: 256,
            lr: 1e-3,
            grad_penalty: 10.0,
        };
        train_w1_critic(&mut critic, &p, &q, &cfg, 7).unwrap();
        let obj = w1_critic_objective(&critic, &p, &q, 0.0, 20).unwrap();
        assert!(obj.abs() < 0.05, "objective {obj}");
    }

    #[test]
    fn clamp_events_are_counted() {
        let mut critic = constant_critic(CriticKind::ReverseKl, 50.0);
        let p = gaussian_pool(0.0, 64, 30);
        let q = gaussian_pool(0.0, 64, 31);
        let cfg = CriticTrainConfig {
            steps: 1,
            batch: 16,
            lr: 1e-5,
            grad_penalty: 0.0,
        };
        train_reverse_kl_critic(&mut critic, &p, &q, &cfg, 8).unwrap();
        assert!(critic.clamp_events > 0);
    }
}
