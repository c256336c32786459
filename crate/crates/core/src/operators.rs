//! Density-operator specifications and the per-iteration surrogate
//! reward-gradient fields they induce.
//!
//! Merging `n` pretrained flows under weighted divergences is driven, at each
//! outer iteration, by the gradient of the first variation of the merge
//! objective at the current model. This module assembles that field for the
//! intersection (forward KL, via scores), union (reverse KL, via f-GAN
//! critics or the mixture shortcut), and interpolation (W1, via Lipschitz
//! critics) operators, their reward-guided variants, the flow-process lift
//! with its running term, and composes operators into circuits.

use crate::critic::{critic_gradient_field, CriticKind, CriticNet};
use crate::error::{Error, Result};
use crate::flow::{sample_ode, score_from_velocity, FlowModel, ScoreClamp, SourceDistribution};
use crate::rng::{seeded_rng, stream};
use crate::schedule::T_MIN;

/// Terminal-time clamp for score evaluations: scores are read at
/// `1 - TERMINAL_SCORE_EPS` wherever the merge needs them at or near t = 1.
pub const TERMINAL_SCORE_EPS: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DivergenceKind {
    ForwardKl,
    ReverseKl,
    W1,
}

impl DivergenceKind {
    /// CLI tags name the operator the divergence implements.
    pub fn as_str(self) -> &'static str {
        match self {
            DivergenceKind::ForwardKl => "and",
            DivergenceKind::ReverseKl => "or",
            DivergenceKind::W1 => "w1",
        }
    }

    pub fn from_str(s: &str) -> Result<Self> {
        match s {
            "and" => Ok(DivergenceKind::ForwardKl),
            "or" => Ok(DivergenceKind::ReverseKl),
            "w1" => Ok(DivergenceKind::W1),
            other => Err(Error::config(format!(
                "unknown divergence tag {other:?} (expected \"and\", \"or\", or \"w1\")"
            ))),
        }
    }
}

/// Named analytic rewards with exact gradients.
#[derive(Debug, Clone, PartialEq)]
pub enum RewardFn {
    None,
    /// `f(x) = scale * x[axis]`
    CoordLinear { axis: usize, scale: f64 },
    /// `f(x) = -scale * ||x - center||^2`
    NegQuadraticWell { center: Vec<f64>, scale: f64 },
}

impl RewardFn {
    pub fn is_none(&self) -> bool {
        matches!(self, RewardFn::None)
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        match self {
            RewardFn::None => 0.0,
            RewardFn::CoordLinear { axis, scale } => scale * x[*axis],
            RewardFn::NegQuadraticWell { center, scale } => {
                -scale
                    * x.iter()
                        .zip(center.iter())
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
            }
        }
    }

    pub fn grad_into(&self, x: &[f64], out: &mut [f64]) {
        match self {
            RewardFn::None => out.iter_mut().for_each(|v| *v = 0.0),
            RewardFn::CoordLinear { axis, scale } => {
                out.iter_mut().for_each(|v| *v = 0.0);
                out[*axis] = *scale;
            }
            RewardFn::NegQuadraticWell { center, scale } => {
                for (o, (a, b)) in out.iter_mut().zip(x.iter().zip(center.iter())) {
                    *o = -2.0 * scale * (a - b);
                }
            }
        }
    }
}

/// Time weighting of the flow-process running term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LambdaSchedule {
    Flat(f64),
    /// `early` before `switch`, `late` after.
    TwoPhase { early: f64, late: f64, switch: f64 },
}

impl LambdaSchedule {
    pub fn value(&self, t: f64) -> f64 {
        match *self {
            LambdaSchedule::Flat(v) => v,
            LambdaSchedule::TwoPhase { early, late, switch } => {
                if t > switch {
                    late
                } else {
                    early
                }
            }
        }
    }

    /// The weighting used for the illustrative intersection runs: 0.4 below
    /// t = 0.95 and 0.2 above.
    pub fn late_damped() -> Self {
        LambdaSchedule::TwoPhase {
            early: 0.4,
            late: 0.2,
            switch: 0.95,
        }
    }
}

impl Default for LambdaSchedule {
    fn default() -> Self {
        LambdaSchedule::Flat(1.0)
    }
}

/// Whether the merge optimizes the terminal marginal only or lifts the
/// divergence terms to the whole flow process with a running term.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MergeMode {
    Terminal,
    FlowProcess,
}

/// Declarative description of one merge: priors, per-prior divergences and
/// weights, optional reward, time weighting, and which prior seeds the
/// fine-tuning.
#[derive(Debug, Clone)]
pub struct OperatorSpec {
    pub priors: Vec<FlowModel>,
    pub divergences: Vec<DivergenceKind>,
    pub alphas: Vec<f64>,
    pub reward: RewardFn,
    pub lambda: LambdaSchedule,
    /// Zero-based index into `priors`.
    pub init_index: usize,
}

impl OperatorSpec {
    pub fn validate(&self) -> Result<()> {
        let n = self.priors.len();
        if n == 0 {
            return Err(Error::config("operator needs at least one prior"));
        }
        if self.divergences.len() != n || self.alphas.len() != n {
            return Err(Error::config(
                "divergences and weights must match the number of priors",
            ));
        }
        if self.alphas.iter().any(|&a| a <= 0.0) {
            return Err(Error::config("weights must be positive"));
        }
        if self.init_index >= n {
            return Err(Error::config(format!(
                "init index {} out of range for {n} priors",
                self.init_index
            )));
        }
        let d = self.priors[0].dim;
        if self.priors.iter().any(|p| p.dim != d) {
            return Err(Error::config("priors must share one dimension"));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.priors[0].dim
    }

    pub fn init_model(&self) -> &FlowModel {
        &self.priors[self.init_index]
    }

    pub fn alpha_total(&self) -> f64 {
        self.alphas.iter().sum()
    }

    pub fn needs_critics(&self) -> bool {
        self.divergences
            .iter()
            .any(|d| matches!(d, DivergenceKind::ReverseKl | DivergenceKind::W1))
    }

    pub fn all_kind(&self, kind: DivergenceKind) -> bool {
        self.divergences.iter().all(|&d| d == kind)
    }
}

/// Critics backing the divergences that need variational estimates.
#[derive(Debug, Clone)]
pub enum CriticBank {
    None,
    /// One critic per prior, aligned with `OperatorSpec::priors`.
    PerPrior(Vec<Option<CriticNet>>),
    /// A single critic against the alpha-weighted prior mixture
    /// (reverse-KL-only specs).
    Mixture(CriticNet),
}

impl CriticBank {
    fn ensure_trained(&self) -> Result<()> {
        fn check(c: &CriticNet) -> Result<()> {
            if c.trained_steps == 0 {
                Err(Error::state("critic used before any training step"))
            } else {
                Ok(())
            }
        }
        match self {
            CriticBank::None => Ok(()),
            CriticBank::Mixture(c) => check(c),
            CriticBank::PerPrior(cs) => {
                for c in cs.iter().flatten() {
                    check(c)?;
                }
                Ok(())
            }
        }
    }
}

/// Intersection term of the surrogate gradient at time `t`:
/// `-sum_i alpha_i s_current(x, t) + sum_i alpha_i s_prior_i(x, t)` over the
/// forward-KL priors, with scores read from velocity fields. Evaluation
/// times are clamped into `[T_MIN, 1 - TERMINAL_SCORE_EPS]`.
pub fn intersection_gradient(
    current: &FlowModel,
    spec: &OperatorSpec,
    xs: &[f64],
    m: usize,
    t: f64,
) -> Result<Vec<f64>> {
    let d = spec.dim();
    let t_eval = t.clamp(T_MIN, 1.0 - TERMINAL_SCORE_EPS);
    let mut out = vec![0.0; m * d];
    let mut alpha_fkl = 0.0;
    for ((prior, &kind), &alpha) in spec
        .priors
        .iter()
        .zip(spec.divergences.iter())
        .zip(spec.alphas.iter())
    {
        if kind != DivergenceKind::ForwardKl {
            continue;
        }
        alpha_fkl += alpha;
        let s = score_from_velocity(prior, prior.schedule, xs, m, t_eval, ScoreClamp::Enforce)?;
        for (o, sv) in out.iter_mut().zip(s.iter()) {
            *o += alpha * sv;
        }
    }
    if alpha_fkl > 0.0 {
        let s_cur =
            score_from_velocity(current, current.schedule, xs, m, t_eval, ScoreClamp::Enforce)?;
        for (o, sv) in out.iter_mut().zip(s_cur.iter()) {
            *o -= alpha_fkl * sv;
        }
    }
    Ok(out)
}

/// Union term: the reverse-KL part of the surrogate gradient. With per-prior
/// critics this is `sum_i alpha_i * (-(critic field)_i)`; with a mixture
/// critic it is `(sum alpha) * (-(critic field))`, the single-critic shortcut
/// justified by the mixture representation of the union optimum.
pub fn union_gradient(
    bank: &CriticBank,
    spec: &OperatorSpec,
    xs: &[f64],
    m: usize,
) -> Result<Vec<f64>> {
    bank.ensure_trained()?;
    let d = spec.dim();
    let mut out = vec![0.0; m * d];
    match bank {
        CriticBank::Mixture(critic) => {
            let field = critic_gradient_field(critic, xs, m)?;
            let a = spec.alpha_total();
            for (o, f) in out.iter_mut().zip(field.iter()) {
                *o -= a * f;
            }
        }
        CriticBank::PerPrior(critics) => {
            for (i, critic) in critics.iter().enumerate() {
                if spec.divergences[i] != DivergenceKind::ReverseKl {
                    continue;
                }
                let critic = critic.as_ref().ok_or_else(|| {
                    Error::state(format!("missing critic for reverse-kl prior {i}"))
                })?;
                if critic.kind != CriticKind::ReverseKl {
                    return Err(Error::state("union gradient needs reverse-kl critics"));
                }
                let field = critic_gradient_field(critic, xs, m)?;
                for (o, f) in out.iter_mut().zip(field.iter()) {
                    *o -= spec.alphas[i] * f;
                }
            }
        }
        CriticBank::None => {
            return Err(Error::state("union gradient needs trained critics"));
        }
    }
    Ok(out)
}

/// Interpolation term: `sum_i alpha_i * (critic field)_i` over W1 priors,
/// i.e. `-sum_i alpha_i grad phi_i`.
pub fn interpolation_gradient(
    bank: &CriticBank,
    spec: &OperatorSpec,
    xs: &[f64],
    m: usize,
) -> Result<Vec<f64>> {
    bank.ensure_trained()?;
    let d = spec.dim();
    let mut out = vec![0.0; m * d];
    let critics = match bank {
        CriticBank::PerPrior(cs) => cs,
        _ => return Err(Error::state("interpolation needs per-prior critics")),
    };
    for (i, critic) in critics.iter().enumerate() {
        if spec.divergences[i] != DivergenceKind::W1 {
            continue;
        }
        let critic = critic
            .as_ref()
            .ok_or_else(|| Error::state(format!("missing critic for w1 prior {i}")))?;
        if critic.kind != CriticKind::W1 {
            return Err(Error::state("interpolation gradient needs w1 critics"));
        }
        let field = critic_gradient_field(critic, xs, m)?;
        for (o, f) in out.iter_mut().zip(field.iter()) {
            *o += spec.alphas[i] * f;
        }
    }
    Ok(out)
}

/// The assembled surrogate field for one outer iteration: a terminal
/// reward-gradient and, in flow-process mode, a raw running reward-gradient
/// weighted by the lambda schedule inside the fine-tuning solver.
#[derive(Debug)]
pub struct SurrogateField {
    pub iteration: usize,
    mode: MergeMode,
    current: FlowModel,
    spec_divergences: Vec<DivergenceKind>,
    spec_alphas: Vec<f64>,
    spec_priors: Vec<FlowModel>,
    reward: RewardFn,
    lambda: LambdaSchedule,
    bank: CriticBank,
}

impl SurrogateField {
    pub fn dim(&self) -> usize {
        self.current.dim
    }

    pub fn has_running(&self) -> bool {
        self.mode == MergeMode::FlowProcess
    }

    pub fn lambda(&self, t: f64) -> f64 {
        self.lambda.value(t)
    }

    fn spec_view(&self) -> OperatorSpec {
        OperatorSpec {
            priors: self.spec_priors.clone(),
            divergences: self.spec_divergences.clone(),
            alphas: self.spec_alphas.clone(),
            reward: self.reward.clone(),
            lambda: self.lambda,
            init_index: 0,
        }
    }

    /// Terminal reward gradient at the terminal states.
    ///
    /// In terminal mode this is the full first-variation gradient (reward
    /// plus divergence terms at the clamped terminal time). In flow-process
    /// mode the divergence terms live entirely in the running integral --
    /// the backward recursion already covers the endpoint step at weight
    /// `h * lambda` -- so only a genuine terminal reward seeds the adjoint.
    /// Seeding the scores there as well turns the self-score lag of the
    /// velocity transform near t = 1 into an unbounded drift.
    pub fn terminal_grad(&self, xs: &[f64], m: usize) -> Result<Vec<f64>> {
        let d = self.dim();
        let mut out = vec![0.0; m * d];
        if !self.reward.is_none() {
            let mut g = vec![0.0; d];
            for r in 0..m {
                self.reward.grad_into(&xs[r * d..(r + 1) * d], &mut g);
                out[r * d..(r + 1) * d].copy_from_slice(&g);
            }
        }
        if self.mode == MergeMode::FlowProcess {
            return Ok(out);
        }
        let spec = self.spec_view();
        if spec.divergences.iter().any(|&k| k == DivergenceKind::ForwardKl) {
            let g = intersection_gradient(&self.current, &spec, xs, m, 1.0)?;
            for (o, v) in out.iter_mut().zip(g.iter()) {
                *o += v;
            }
        }
        if spec.divergences.iter().any(|&k| k == DivergenceKind::ReverseKl) {
            let g = union_gradient(&self.bank, &spec, xs, m)?;
            for (o, v) in out.iter_mut().zip(g.iter()) {
                *o += v;
            }
        }
        if spec.divergences.iter().any(|&k| k == DivergenceKind::W1) {
            let g = interpolation_gradient(&self.bank, &spec, xs, m)?;
            for (o, v) in out.iter_mut().zip(g.iter()) {
                *o += v;
            }
        }
        Ok(out)
    }

    /// Raw running reward gradient at interior times (flow-process mode).
    /// The lambda weight is applied by the adjoint integrator, not here.
    pub fn running_grad(&self, xs: &[f64], m: usize, t: f64) -> Result<Vec<f64>> {
        if !self.has_running() {
            return Err(Error::state("running gradient requested in terminal mode"));
        }
        let spec = self.spec_view();
        intersection_gradient(&self.current, &spec, xs, m, t)
    }
}

/// Assemble the surrogate field for the current model. Critics must already
/// be refreshed against samples of `current`; flow-process mode is defined
/// for forward-KL divergences only.
pub fn assemble_surrogate(
    current: &FlowModel,
    spec: &OperatorSpec,
    bank: &CriticBank,
    mode: MergeMode,
    iteration: usize,
) -> Result<SurrogateField> {
    spec.validate()?;
    if mode == MergeMode::FlowProcess && !spec.all_kind(DivergenceKind::ForwardKl) {
        return Err(Error::unsupported(
            "flow-process mode is defined for forward-kl divergences only",
        ));
    }
    if spec.needs_critics() {
        bank.ensure_trained()?;
        match bank {
            CriticBank::None => {
                return Err(Error::state("spec needs critics but none were provided"))
            }
            CriticBank::Mixture(_) => {
                if !spec.all_kind(DivergenceKind::ReverseKl) {
                    return Err(Error::state(
                        "a mixture critic only serves all-reverse-kl specs",
                    ));
                }
            }
            CriticBank::PerPrior(cs) => {
                if cs.len() != spec.priors.len() {
                    return Err(Error::state("critic bank does not match the prior list"));
                }
            }
        }
    }
    Ok(SurrogateField {
        iteration,
        mode,
        current: current.clone(),
        spec_divergences: spec.divergences.clone(),
        spec_alphas: spec.alphas.clone(),
        spec_priors: spec.priors.clone(),
        reward: spec.reward.clone(),
        lambda: spec.lambda,
        bank: bank.clone(),
    })
}

/// Draw `n` terminal samples from the alpha-weighted prior mixture: pick a
/// prior with probability `alpha_i / sum(alpha)`, then sample it through its
/// flow ODE. Counts per prior are computed deterministically from the seed.
pub fn mixture_prior_sample(
    priors: &[FlowModel],
    alphas: &[f64],
    n: usize,
    ode_steps: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    use rand::Rng;
    if priors.is_empty() || priors.len() != alphas.len() {
        return Err(Error::input("mixture sampler needs one weight per prior"));
    }
    let d = priors[0].dim;
    let total: f64 = alphas.iter().sum();
    let mut rng = seeded_rng(seed, &[stream::SAMPLES, 0x6d69]);
    let mut counts = vec![0usize; priors.len()];
    for _ in 0..n {
        let u: f64 = rng.gen::<f64>() * total;
        let mut acc = 0.0;
        let mut chosen = priors.len() - 1;
        for (i, &a) in alphas.iter().enumerate() {
            acc += a;
            if u <= acc {
                chosen = i;
                break;
            }
        }
        counts[chosen] += 1;
    }
    let mut out = Vec::with_capacity(n * d);
    for (i, (prior, &count)) in priors.iter().zip(counts.iter()).enumerate() {
        if count == 0 {
            continue;
        }
        let block = sample_ode(
            prior,
            SourceDistribution::StandardNormal,
            count,
            ode_steps,
            crate::rng::split_seed(seed, &[stream::SAMPLES, i as u64]),
        )?;
        out.extend_from_slice(&block);
    }
    Ok(out)
}

/// A merge circuit: leaves are trained flows, internal nodes are operator
/// applications over their children's outputs.
pub enum CircuitNode {
    Leaf(FlowModel),
    Op {
        label: String,
        divergences: Vec<DivergenceKind>,
        alphas: Vec<f64>,
        reward: RewardFn,
        lambda: LambdaSchedule,
        mode: MergeMode,
        init_index: usize,
        children: Vec<CircuitNode>,
    },
}

/// Post-order circuit evaluation: each internal node materializes a flow by
/// running the supplied merge solver on its children's outputs. Errors are
/// annotated with the node path.
pub fn evaluate_circuit<F>(root: &CircuitNode, solve: &mut F) -> Result<FlowModel>
where
    F: FnMut(&OperatorSpec, MergeMode, &str) -> Result<FlowModel>,
{
    fn go<F>(node: &CircuitNode, path: &str, solve: &mut F) -> Result<FlowModel>
    where
        F: FnMut(&OperatorSpec, MergeMode, &str) -> Result<FlowModel>,
    {
        match node {
            CircuitNode::Leaf(model) => Ok(model.clone()),
            CircuitNode::Op {
                label,
                divergences,
                alphas,
                reward,
                lambda,
                mode,
                init_index,
                children,
            } => {
                let mut priors = Vec::with_capacity(children.len());
                for (i, child) in children.iter().enumerate() {
                    let child_path = format!("{path}/{label}[{i}]");
                    priors.push(go(child, &child_path, solve)?);
                }
                let spec = OperatorSpec {
                    priors,
                    divergences: divergences.clone(),
                    alphas: alphas.clone(),
                    reward: reward.clone(),
                    lambda: *lambda,
                    init_index: *init_index,
                };
                let node_path = format!("{path}/{label}");
                solve(&spec, *mode, &node_path).map_err(|e| match e {
                    Error::State(msg) => Error::State(format!("{node_path}: {msg}")),
                    Error::NonFinite(msg) => Error::NonFinite(format!("{node_path}: {msg}")),
                    other => other,
                })
            }
        }
    }
    go(root, "", solve)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cfm::NetConfig;
    use crate::net::MlpParams;
    use crate::schedule::Schedule;

    fn tiny_model(dim: usize, seed: u64) -> FlowModel {
        let cfg = NetConfig::with_hidden(&[8]);
        let mut rng = seeded_rng(seed, &[stream::INIT]);
        let net = MlpParams::seeded(&cfg.velocity_widths(dim), cfg.activation, &mut rng).unwrap();
        FlowModel::new(dim, Schedule::Linear, net).unwrap()
    }

    fn fkl_spec(priors: Vec<FlowModel>, alphas: Vec<f64>) -> OperatorSpec {
        let n = priors.len();
        OperatorSpec {
            priors,
            divergences: vec![DivergenceKind::ForwardKl; n],
            alphas,
            reward: RewardFn::None,
            lambda: LambdaSchedule::default(),
            init_index: 0,
        }
    }

    #[test]
    fn divergence_tags_roundtrip() {
        for kind in [
            DivergenceKind::ForwardKl,
            DivergenceKind::ReverseKl,
            DivergenceKind::W1,
        ] {
            assert_eq!(DivergenceKind::from_str(kind.as_str()).unwrap(), kind);
        }
        assert!(DivergenceKind::from_str("xor").is_err());
    }

    #[test]
    fn intersection_toward_itself_is_zero() {
        let m = tiny_model(1, 3);
        let spec = fkl_spec(vec![m.clone()], vec![1.0]);
        let g = intersection_gradient(&m, &spec, &[0.4, -1.0], 2, 0.7).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn intersection_of_identical_priors_equal_to_current_cancels() {
        let m = tiny_model(2, 5);
        let spec = fkl_spec(vec![m.clone(), m.clone()], vec![0.7, 0.7]);
        let g = intersection_gradient(&m, &spec, &[0.1, 0.2, -0.4, 1.0], 2, 0.5).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn intersection_matches_hand_computed_gaussian_scores() {
        // Priors and current realized by analytic conditional-path fields would
        // need trained nets; instead verify the linear combination directly by
        // comparing against score_from_velocity calls.
        let a = tiny_model(1, 7);
        let b = tiny_model(1, 8);
        let cur = tiny_model(1, 9);
        let spec = fkl_spec(vec![a.clone(), b.clone()], vec![0.3, 0.9]);
        let xs = [0.5, -0.2, 1.4];
        let t = 0.6;
        let g = intersection_gradient(&cur, &spec, &xs, 3, t).unwrap();
        let sa =
            score_from_velocity(&a, Schedule::Linear, &xs, 3, t, ScoreClamp::Enforce).unwrap();
        let sb =
            score_from_velocity(&b, Schedule::Linear, &xs, 3, t, ScoreClamp::Enforce).unwrap();
        let sc =
            score_from_velocity(&cur, Schedule::Linear, &xs, 3, t, ScoreClamp::Enforce).unwrap();
        for i in 0..3 {
            let want = 0.3 * sa[i] + 0.9 * sb[i] - 1.2 * sc[i];
            assert!((g[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn union_gradient_requires_trained_critics() {
        let m = tiny_model(1, 11);
        let spec = OperatorSpec {
            divergences: vec![DivergenceKind::ReverseKl],
            ..fkl_spec(vec![m.clone()], vec![1.0])
        };
        let untrained = CriticNet::new(1, &[8], CriticKind::ReverseKl, 1e-3, 0).unwrap();
        let bank = CriticBank::Mixture(untrained);
        match union_gradient(&bank, &spec, &[0.0], 1) {
            Err(Error::State(_)) => {}
            other => panic!("expected state error, got {other:?}"),
        }
    }

    #[test]
    fn constant_critics_give_zero_interpolation_field() {
        let m = tiny_model(1, 13);
        let spec = OperatorSpec {
            divergences: vec![DivergenceKind::W1],
            ..fkl_spec(vec![m.clone()], vec![1.0])
        };
        let mut critic = CriticNet::new(1, &[4], CriticKind::W1, 1e-3, 0).unwrap();
        for l in 0..critic.net.num_layers() {
            critic.net.weight_mut(l).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        critic.trained_steps = 1;
        let bank = CriticBank::PerPrior(vec![Some(critic)]);
        let g = interpolation_gradient(&bank, &spec, &[0.3, -0.8], 2).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn flow_process_mode_rejects_non_kl_divergences() {
        let m = tiny_model(1, 15);
        let spec = OperatorSpec {
            divergences: vec![DivergenceKind::ReverseKl],
            ..fkl_spec(vec![m.clone()], vec![1.0])
        };
        match assemble_surrogate(&m, &spec, &CriticBank::None, MergeMode::FlowProcess, 0) {
            Err(Error::Unsupported(_)) => {}
            other => panic!("expected unsupported-mode error, got {other:?}"),
        }
    }

    #[test]
    fn reward_only_spec_recovers_reward_gradient() {
        let m = tiny_model(2, 17);
        let mut spec = fkl_spec(vec![m.clone()], vec![1.0]);
        spec.priors = vec![m.clone()];
        spec.reward = RewardFn::CoordLinear { axis: 1, scale: 1.0 };
        // Divergence terms vanish because current equals the single prior, so
        // the terminal field is exactly the reward gradient.
        let sur = assemble_surrogate(&m, &spec, &CriticBank::None, MergeMode::Terminal, 0).unwrap();
        let g = sur.terminal_grad(&[0.3, 0.4, -0.5, 0.9], 2).unwrap();
        assert_eq!(g, vec![0.0, 1.0, 0.0, 1.0]);
        assert!(!sur.has_running());
    }

    #[test]
    fn zero_spec_gives_zero_fields() {
        let m = tiny_model(1, 19);
        let spec = fkl_spec(vec![m.clone()], vec![1.0]);
        let sur =
            assemble_surrogate(&m, &spec, &CriticBank::None, MergeMode::FlowProcess, 0).unwrap();
        let g = sur.terminal_grad(&[0.2], 1).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-12));
        let r = sur.running_grad(&[0.2], 1, 0.4).unwrap();
        assert!(r.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn single_leaf_circuit_returns_the_leaf() {
        let m = tiny_model(1, 23);
        let root = CircuitNode::Leaf(m.clone());
        let out = evaluate_circuit(&root, &mut |_spec, _mode, _path| {
            panic!("solver must not run for a leaf")
        })
        .unwrap();
        assert_eq!(out.net, m.net);
    }

    #[test]
    fn circuit_solves_post_order_with_paths() {
        let leaves: Vec<FlowModel> = (0..4).map(|i| tiny_model(1, 30 + i)).collect();
        let and_node = |l: FlowModel, r: FlowModel, label: &str| CircuitNode::Op {
            label: label.into(),
            divergences: vec![DivergenceKind::ForwardKl; 2],
            alphas: vec![0.5, 0.5],
            reward: RewardFn::None,
            lambda: LambdaSchedule::default(),
            mode: MergeMode::Terminal,
            init_index: 0,
            children: vec![CircuitNode::Leaf(l), CircuitNode::Leaf(r)],
        };
        let root = CircuitNode::Op {
            label: "or".into(),
            divergences: vec![DivergenceKind::ReverseKl; 2],
            alphas: vec![1.0, 1.0],
            reward: RewardFn::None,
            lambda: LambdaSchedule::default(),
            mode: MergeMode::Terminal,
            init_index: 0,
            children: vec![
                and_node(leaves[0].clone(), leaves[1].clone(), "and_left"),
                and_node(leaves[2].clone(), leaves[3].clone(), "and_right"),
            ],
        };
        let mut paths = Vec::new();
        let out = evaluate_circuit(&root, &mut |spec, _mode, path| {
            paths.push(path.to_string());
            Ok(spec.init_model().clone())
        })
        .unwrap();
        assert_eq!(paths.len(), 3);
        assert!(paths[0].contains("and_left"));
        assert!(paths[1].contains("and_right"));
        assert!(paths[2].ends_with("/or"));
        assert_eq!(out.dim, 1);
    }
}
