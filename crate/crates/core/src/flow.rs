//! Flow models and their samplers.
//!
//! A flow model is a velocity field `u(x, t)` together with an interpolant
//! schedule. Sampling integrates either the deterministic flow ODE
//! `dx = u dt` or the marginal-preserving memoryless SDE
//! `dx = (2u - (omega_dot/omega) x) dt + sigma(t) dB`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::net::{self, MlpParams, TIME_EMBED_DIM};
use crate::rng::seeded_rng;
use crate::schedule::{Schedule, TimeGrid, EPS_CLAMP, T_MIN};

/// Anything that evaluates a velocity field on a batch of states at one time.
pub trait VelocityField {
    fn dim(&self) -> usize;
    /// Fill `out` (length `m * dim`) with `u(x_r, t)` for each row of `xs`.
    fn velocity_into(&self, xs: &[f64], m: usize, t: f64, out: &mut [f64]);
}

/// Source distribution of the flow at t = 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourceDistribution {
    StandardNormal,
}

impl SourceDistribution {
    pub fn sample_into(self, rng: &mut ChaCha8Rng, out: &mut [f64]) {
        match self {
            SourceDistribution::StandardNormal => {
                for v in out.iter_mut() {
                    *v = rng.sample(StandardNormal);
                }
            }
        }
    }
}

/// A network-backed velocity field plus its schedule and dimension. Doubles
/// as the policy being fine-tuned: actions are velocity evaluations.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowModel {
    pub dim: usize,
    pub schedule: Schedule,
    pub net: MlpParams,
}

impl FlowModel {
    pub fn new(dim: usize, schedule: Schedule, net: MlpParams) -> Result<Self> {
        if net.input_dim() != dim + TIME_EMBED_DIM {
            return Err(Error::Dimension {
                context: "FlowModel net input",
                expected: dim + TIME_EMBED_DIM,
                got: net.input_dim(),
            });
        }
        if net.output_dim() != dim {
            return Err(Error::Dimension {
                context: "FlowModel net output",
                expected: dim,
                got: net.output_dim(),
            });
        }
        Ok(FlowModel { dim, schedule, net })
    }

    /// Assemble `[x | embed(t)]` rows for the network, one shared time.
    pub fn net_input(&self, xs: &[f64], m: usize, t: f64) -> Vec<f64> {
        let d = self.dim;
        let w = d + TIME_EMBED_DIM;
        let mut emb = [0.0; TIME_EMBED_DIM];
        net::time_embedding(t, &mut emb);
        let mut input = vec![0.0; m * w];
        for r in 0..m {
            input[r * w..r * w + d].copy_from_slice(&xs[r * d..(r + 1) * d]);
            input[r * w + d..(r + 1) * w].copy_from_slice(&emb);
        }
        input
    }

    /// Assemble `[x | embed(t_r)]` rows with a per-row time.
    pub fn net_input_rows(&self, xs: &[f64], ts: &[f64], m: usize) -> Vec<f64> {
        let d = self.dim;
        let w = d + TIME_EMBED_DIM;
        let mut input = vec![0.0; m * w];
        let mut emb = [0.0; TIME_EMBED_DIM];
        for r in 0..m {
            net::time_embedding(ts[r], &mut emb);
            input[r * w..r * w + d].copy_from_slice(&xs[r * d..(r + 1) * d]);
            input[r * w + d..(r + 1) * w].copy_from_slice(&emb);
        }
        input
    }

    pub fn velocity_batch(&self, xs: &[f64], m: usize, t: f64) -> Result<Vec<f64>> {
        let input = self.net_input(xs, m, t);
        net::output_batch(&self.net, &input, m)
    }

    /// Vector-Jacobian product of the velocity with respect to the state:
    /// row r of the result is `v_r^T (du/dx)(x_r, t)`.
    pub fn velocity_vjp(&self, xs: &[f64], m: usize, t: f64, cotangent: &[f64]) -> Result<Vec<f64>> {
        let input = self.net_input(xs, m, t);
        let full = net::input_vjp(&self.net, &input, m, cotangent)?;
        let d = self.dim;
        let w = d + TIME_EMBED_DIM;
        let mut out = vec![0.0; m * d];
        for r in 0..m {
            out[r * d..(r + 1) * d].copy_from_slice(&full[r * w..r * w + d]);
        }
        Ok(out)
    }
}

impl VelocityField for FlowModel {
    fn dim(&self) -> usize {
        self.dim
    }

    fn velocity_into(&self, xs: &[f64], m: usize, t: f64, out: &mut [f64]) {
        let u = self.velocity_batch(xs, m, t).expect("velocity evaluation");
        out.copy_from_slice(&u);
    }
}

/// A velocity field given by a closure; used for analytic reference fields.
pub struct AnalyticField<F: Fn(&[f64], f64, &mut [f64])> {
    pub dim: usize,
    pub f: F,
}

impl<F: Fn(&[f64], f64, &mut [f64])> VelocityField for AnalyticField<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn velocity_into(&self, xs: &[f64], m: usize, t: f64, out: &mut [f64]) {
        let d = self.dim;
        for r in 0..m {
            (self.f)(&xs[r * d..(r + 1) * d], t, &mut out[r * d..(r + 1) * d]);
        }
    }
}

/// Whether score evaluation enforces the clamped time range.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreClamp {
    Enforce,
    Allow,
}

/// Score of the marginal density from the velocity field:
/// `s = (u(x,t) - (omega_dot/omega) x) / (kappa (omega_dot/omega kappa - kappa_dot))`.
/// The prefactor diverges at t -> 1, so by default t must stay inside
/// `[T_MIN, 1 - EPS_CLAMP]`.
pub fn score_from_velocity<V: VelocityField>(
    field: &V,
    schedule: Schedule,
    xs: &[f64],
    m: usize,
    t: f64,
    clamp: ScoreClamp,
) -> Result<Vec<f64>> {
    if clamp == ScoreClamp::Enforce && !(T_MIN..=1.0 - EPS_CLAMP).contains(&t) {
        return Err(Error::TimeOutOfRange {
            t,
            lo: T_MIN,
            hi: 1.0 - EPS_CLAMP,
        });
    }
    let d = field.dim();
    let denom = schedule.score_denominator(t)?;
    if denom.abs() < 1e-300 {
        return Err(Error::TimeOutOfRange { t, lo: T_MIN, hi: 1.0 - EPS_CLAMP });
    }
    let dc = schedule.drift_coeff(t)?;
    let mut u = vec![0.0; m * d];
    field.velocity_into(xs, m, t, &mut u);
    for (ui, xi) in u.iter_mut().zip(xs.iter()) {
        *ui = (*ui - dc * xi) / denom;
    }
    Ok(u)
}

/// Euler integration of the flow ODE from the source distribution; returns
/// `n` terminal samples.
pub fn sample_ode<V: VelocityField>(
    field: &V,
    source: SourceDistribution,
    n: usize,
    steps: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let grid = TimeGrid::from_steps(steps)?;
    let d = field.dim();
    let mut rng = seeded_rng(seed, &[crate::rng::stream::SAMPLES]);
    let mut x = vec![0.0; n * d];
    source.sample_into(&mut rng, &mut x);
    let mut u = vec![0.0; n * d];
    for j in 0..steps {
        let t = grid.t(j);
        field.velocity_into(&x, n, t, &mut u);
        for (xi, ui) in x.iter_mut().zip(u.iter()) {
            *xi += grid.h * ui;
        }
        if let Some(bad) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::non_finite(format!(
                "ODE state (step {j}, entry {bad})"
            )));
        }
    }
    Ok(x)
}

/// Euler integration of the flow ODE recording the state batch at selected
/// grid indices (the marginal law of the flow at those times).
pub fn sample_ode_states<V: VelocityField>(
    field: &V,
    source: SourceDistribution,
    n: usize,
    steps: usize,
    seed: u64,
    record: &[usize],
) -> Result<Vec<Vec<f64>>> {
    let grid = TimeGrid::from_steps(steps)?;
    let d = field.dim();
    let mut rng = seeded_rng(seed, &[crate::rng::stream::SAMPLES]);
    let mut x = vec![0.0; n * d];
    source.sample_into(&mut rng, &mut x);
    let mut u = vec![0.0; n * d];
    let mut out: Vec<Vec<f64>> = vec![Vec::new(); record.len()];
    let capture = |out: &mut Vec<Vec<f64>>, j: usize, x: &[f64]| {
        for (slot, &want) in record.iter().enumerate() {
            if want == j {
                out[slot] = x.to_vec();
            }
        }
    };
    capture(&mut out, 0, &x);
    for j in 0..steps {
        let t = grid.t(j);
        field.velocity_into(&x, n, t, &mut u);
        for (xi, ui) in x.iter_mut().zip(u.iter()) {
            *xi += grid.h * ui;
        }
        if let Some(bad) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::non_finite(format!(
                "ODE state (step {j}, entry {bad})"
            )));
        }
        capture(&mut out, j + 1, &x);
    }
    if out.iter().any(Vec::is_empty) {
        return Err(Error::input("recorded index beyond the grid"));
    }
    Ok(out)
}

/// Trajectories of the memoryless SDE on a uniform grid, all states stored.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryBatch {
    pub grid: TimeGrid,
    pub m: usize,
    pub dim: usize,
    pub seed: u64,
    /// Layout: `states[j * m * dim ..]` holds the batch at grid index `j`.
    pub states: Vec<f64>,
}

impl TrajectoryBatch {
    pub fn state(&self, j: usize) -> &[f64] {
        let n = self.m * self.dim;
        &self.states[j * n..(j + 1) * n]
    }

    pub fn terminal(&self) -> &[f64] {
        self.state(self.grid.steps)
    }

    /// CSV export with columns `traj_id, step, t, x_0..x_{d-1}`.
    pub fn write_csv<W: std::io::Write>(&self, w: &mut W) -> Result<()> {
        write!(w, "traj_id,step,t")?;
        for i in 0..self.dim {
            write!(w, ",x_{i}")?;
        }
        writeln!(w)?;
        for r in 0..self.m {
            for j in 0..=self.grid.steps {
                write!(w, "{r},{j},{}", self.grid.t(j))?;
                let row = &self.state(j)[r * self.dim..(r + 1) * self.dim];
                for v in row {
                    write!(w, ",{v}")?;
                }
                writeln!(w)?;
            }
        }
        Ok(())
    }
}

/// Euler-Maruyama integration of the memoryless SDE
/// `X_{t+h} = X_t + h (2 u(X_t, t) - (omega_dot/omega) X_t) + sqrt(h) sigma(t) eps`.
/// The final transition takes a deterministic Euler step with the plain flow
/// drift, avoiding the vanishing-noise endpoint.
pub fn sample_sde_memoryless<V: VelocityField>(
    field: &V,
    schedule: Schedule,
    m: usize,
    grid: TimeGrid,
    seed: u64,
) -> Result<TrajectoryBatch> {
    let d = field.dim();
    let n = m * d;
    let steps = grid.steps;
    let mut rng = seeded_rng(seed, &[crate::rng::stream::TRAJECTORIES]);
    let mut states = vec![0.0; (steps + 1) * n];
    SourceDistribution::StandardNormal.sample_into(&mut rng, &mut states[0..n]);
    let mut u = vec![0.0; n];
    for j in 0..steps {
        let tau = grid.eval_t(j);
        let (cur, next) = {
            let (a, b) = states.split_at_mut((j + 1) * n);
            (&a[j * n..], &mut b[..n])
        };
        field.velocity_into(cur, m, tau, &mut u);
        if j + 1 == steps {
            // Final deterministic flow step.
            for i in 0..n {
                next[i] = cur[i] + grid.h * u[i];
            }
        } else {
            let dc = schedule.drift_coeff(tau)?;
            let sig = schedule.memoryless_sigma(tau)?;
            let noise_scale = grid.h.sqrt() * sig;
            for i in 0..n {
                let eps: f64 = rng.sample(StandardNormal);
                next[i] = cur[i] + grid.h * (2.0 * u[i] - dc * cur[i]) + noise_scale * eps;
            }
        }
        if let Some(bad) = next.iter().position(|v| !v.is_finite()) {
            return Err(Error::non_finite(format!(
                "SDE state (step {}, entry {bad})",
                j + 1
            )));
        }
    }
    Ok(TrajectoryBatch {
        grid,
        m,
        dim: d,
        seed,
        states,
    })
}
