//! Entropy-regularized fine-tuning by adjoint matching.
//!
//! One solve turns a base flow and a surrogate reward-gradient field into a
//! fine-tuned flow: sample memoryless-SDE trajectories under the current
//! fine model, integrate the lean adjoint ODE backwards along them under the
//! frozen base drift, then take a gradient step on the matching objective
//!
//! `sum_t || (2/sigma(t)) (u_fine(X_t,t) - u_base(X_t,t)) + sigma(t) a_t ||^2`.
//!
//! The sign convention maximizes the surrogate: the terminal adjoint seed is
//! `-gamma * terminal_grad(X_1)` and running increments subtract
//! `h * gamma * lambda_t * running_grad(X_t, t)`.

use std::time::Instant;

use crate::error::{Error, Result};
use crate::flow::{sample_sde_memoryless, FlowModel, TrajectoryBatch};
use crate::net;
use crate::operators::SurrogateField;
use crate::optim::{adam_step, AdamConfig, OptimizerState};
use crate::rng::split_seed;
use crate::schedule::TimeGrid;

#[derive(Debug, Clone, PartialEq)]
pub struct FineTuneConfig {
    /// Inner gradient steps N.
    pub inner_steps: usize,
    /// Trajectories per step m.
    pub trajectories: usize,
    /// SDE steps (h = 1 / sde_steps).
    pub sde_steps: usize,
    /// Fine-tuning strength gamma entering the adjoint seeds.
    pub gamma: f64,
    pub lr: f64,
    pub seed: u64,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        FineTuneConfig {
            inner_steps: 20,
            trajectories: 128,
            sde_steps: 100,
            gamma: 1.0,
            lr: 1e-3,
            seed: 0,
        }
    }
}

impl FineTuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trajectories == 0 || self.sde_steps == 0 {
            return Err(Error::config("fine-tune config needs trajectories and steps"));
        }
        if self.gamma <= 0.0 {
            return Err(Error::config("fine-tuning strength must be positive"));
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<TimeGrid> {
        TimeGrid::from_steps(self.sde_steps)
    }
}

/// Adjoint vectors along a trajectory batch, aligned with its grid.
#[derive(Debug, Clone)]
pub struct AdjointState {
    pub m: usize,
    pub dim: usize,
    pub steps: usize,
    /// Layout matches `TrajectoryBatch::states`: `adj[j * m * dim ..]`.
    pub adj: Vec<f64>,
}

impl AdjointState {
    pub fn at(&self, j: usize) -> &[f64] {
        let n = self.m * self.dim;
        &self.adj[j * n..(j + 1) * n]
    }
}

/// Solve the lean adjoint ODE backwards along recorded trajectories under
/// the frozen base drift `2 u_base - (omega_dot/omega) x`:
///
/// `a_{t-h} = a_t + h a_t^T d(drift)/dx [- h gamma lambda_t running(X_t, t)]`
///
/// seeded with `a_1 = -gamma * terminal_grad(X_1)`. Jacobian products are
/// exact reverse-mode products through the base network.
pub fn lean_adjoint_backward(
    base: &FlowModel,
    traj: &TrajectoryBatch,
    surrogate: &SurrogateField,
    gamma: f64,
) -> Result<AdjointState> {
    let d = base.dim;
    let m = traj.m;
    let steps = traj.grid.steps;
    let n = m * d;
    let h = traj.grid.h;
    let mut adj = vec![0.0; (steps + 1) * n];
    // Terminal seed.
    let terminal = surrogate.terminal_grad(traj.terminal(), m)?;
    for (a, g) in adj[steps * n..].iter_mut().zip(terminal.iter()) {
        *a = -gamma * g;
    }
    for j in (0..steps).rev() {
        let tau = traj.grid.eval_t(j + 1);
        let x = traj.state(j + 1);
        let (head, tail) = adj.split_at_mut((j + 1) * n);
        let a_next = &tail[..n];
        // v^T d(2u - c x)/dx = 2 v^T du/dx - c v
        let vjp = base.velocity_vjp(x, m, tau, a_next)?;
        let c = base.schedule.drift_coeff(tau)?;
        let a_cur = &mut head[j * n..];
        for i in 0..n {
            a_cur[i] = a_next[i] + h * (2.0 * vjp[i] - c * a_next[i]);
        }
        if surrogate.has_running() {
            let lam = surrogate.lambda(tau);
            let run = surrogate.running_grad(x, m, tau)?;
            for i in 0..n {
                a_cur[i] -= h * gamma * lam * run[i];
            }
        }
        if let Some(bad) = a_cur.iter().position(|v| !v.is_finite()) {
            return Err(Error::non_finite(format!(
                "lean adjoint (trajectory {}, step {j})",
                bad / d
            )));
        }
    }
    Ok(AdjointState {
        m,
        dim: d,
        steps,
        adj,
    })
}

fn residual_terms(
    fine_out: &[f64],
    base_out: &[f64],
    adj: &AdjointState,
    sigmas: &[f64],
    m: usize,
    d: usize,
    steps: usize,
) -> (f64, Vec<f64>) {
    // Rows are ordered step-major: row index = j * m + r.
    let mut loss = 0.0;
    let mut cot = vec![0.0; steps * m * d];
    let inv_m = 1.0 / m as f64;
    for j in 0..steps {
        let sig = sigmas[j];
        let a = 2.0 / sig;
        for r in 0..m {
            let row = (j * m + r) * d;
            for i in 0..d {
                let resid = a * (fine_out[row + i] - base_out[row + i])
                    + sig * adj.at(j)[r * d + i];
                loss += resid * resid * inv_m;
                cot[row + i] = 2.0 * resid * a * inv_m;
            }
        }
    }
    (loss, cot)
}

/// The matching objective summed over time steps and averaged over the
/// batch; gradients flow only through the fine model.
pub fn adjoint_matching_loss(
    fine: &FlowModel,
    base: &FlowModel,
    traj: &TrajectoryBatch,
    adj: &AdjointState,
) -> Result<f64> {
    let (m, d, steps) = (traj.m, traj.dim, traj.grid.steps);
    let (input, sigmas) = stacked_inputs(fine, traj)?;
    let rows = steps * m;
    let fine_out = net::output_batch(&fine.net, &input, rows)?;
    let base_out = net::output_batch(&base.net, &input, rows)?;
    let (loss, _) = residual_terms(&fine_out, &base_out, adj, &sigmas, m, d, steps);
    Ok(loss)
}

/// Inputs for all (state, clamped time) pairs along the batch, step-major,
/// plus sigma at each step's evaluation time.
fn stacked_inputs(model: &FlowModel, traj: &TrajectoryBatch) -> Result<(Vec<f64>, Vec<f64>)> {
    let (m, d, steps) = (traj.m, traj.dim, traj.grid.steps);
    let w = d + net::TIME_EMBED_DIM;
    let mut input = vec![0.0; steps * m * w];
    let mut sigmas = vec![0.0; steps];
    let mut emb = [0.0; net::TIME_EMBED_DIM];
    for j in 0..steps {
        let tau = traj.grid.eval_t(j);
        sigmas[j] = model.schedule.memoryless_sigma(tau)?;
        if sigmas[j] <= 0.0 {
            return Err(Error::TimeOutOfRange {
                t: tau,
                lo: crate::schedule::T_MIN,
                hi: 1.0 - crate::schedule::EPS_CLAMP,
            });
        }
        net::time_embedding(tau, &mut emb);
        let xs = traj.state(j);
        for r in 0..m {
            let row = (j * m + r) * w;
            input[row..row + d].copy_from_slice(&xs[r * d..(r + 1) * d]);
            input[row + d..row + w].copy_from_slice(&emb);
        }
    }
    Ok((input, sigmas))
}

#[derive(Debug, Clone, PartialEq)]
pub struct InnerLossRecord {
    pub inner_step: usize,
    pub loss: f64,
    pub seconds: f64,
}

/// One fine-tuning solve: `inner_steps` iterations of on-policy trajectory
/// sampling, backward adjoint under the frozen base drift, and an Adam step
/// on the matching loss. `inner_steps = 0` returns the base unchanged.
pub fn solve(
    base: &FlowModel,
    surrogate: &SurrogateField,
    config: &FineTuneConfig,
) -> Result<(FlowModel, Vec<InnerLossRecord>)> {
    config.validate()?;
    let grid = config.grid()?;
    let mut fine = base.clone();
    let mut records = Vec::with_capacity(config.inner_steps);
    if config.inner_steps == 0 {
        return Ok((fine, records));
    }
    let mut opt = OptimizerState::new(AdamConfig::with_lr(config.lr), fine.net.param_count());
    let (m, d, steps) = (config.trajectories, base.dim, grid.steps);
    let started = Instant::now();
    for step in 0..config.inner_steps {
        let seed = split_seed(config.seed, &[surrogate.iteration as u64, step as u64]);
        let traj = sample_sde_memoryless(&fine, fine.schedule, m, grid, seed)?;
        let adj = lean_adjoint_backward(base, &traj, surrogate, config.gamma)?;
        let (input, sigmas) = stacked_inputs(&fine, &traj)?;
        let rows = steps * m;
        let cache = net::forward_batch(&fine.net, &input, rows)?;
        let base_out = net::output_batch(&base.net, &input, rows)?;
        let (loss, cot) = residual_terms(cache.output(), &base_out, &adj, &sigmas, m, d, steps);
        if !loss.is_finite() {
            return Err(Error::non_finite(format!("matching loss at inner step {step}")));
        }
        fine.net.zero_grads();
        net::backward_batch(&mut fine.net, &cache, &cot, false)?;
        adam_step(&mut opt, &mut fine.net)?;
        records.push(InnerLossRecord {
            inner_step: step,
            loss,
            seconds: started.elapsed().as_secs_f64(),
        });
    }
    Ok((fine, records))
}

/// CSV export of per-inner-step losses: `iteration,inner_step,loss,seconds`.
pub fn write_loss_trace<W: std::io::Write>(
    w: &mut W,
    outer_iteration: usize,
    records: &[InnerLossRecord],
    header: bool,
) -> Result<()> {
    if header {
        writeln!(w, "iteration,inner_step,loss,seconds")?;
    }
    for r in records {
        writeln!(w, "{},{},{},{}", outer_iteration, r.inner_step, r.loss, r.seconds)?;
    }
    Ok(())
}
