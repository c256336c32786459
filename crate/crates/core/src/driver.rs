//! The outer merge loop: at each iteration, refresh the critics against the
//! current model, assemble the surrogate reward-gradient field, run one
//! adjoint-matching fine-tuning solve, and record the decomposed objective.

use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use crate::critic::{
    train_reverse_kl_critic, train_w1_critic, CriticKind, CriticNet, CriticTrainConfig,
    w1_critic_objective,
};
use crate::error::{Error, Result};
use crate::finetune::{solve, FineTuneConfig, InnerLossRecord};
use crate::flow::{sample_ode, FlowModel, SourceDistribution};
use crate::grid::{self, GridDensity};
use crate::operators::{
    assemble_surrogate, mixture_prior_sample, CriticBank, DivergenceKind, MergeMode, OperatorSpec,
};
use crate::rng::{split_seed, stream};

#[derive(Debug, Clone, PartialEq)]
pub enum GammaSchedule {
    Constant(f64),
    PerIteration(Vec<f64>),
    /// Robbins-Monro style gamma_0 / k.
    Decaying { gamma0: f64 },
}

impl GammaSchedule {
    /// Step size for iteration k (1-based).
    pub fn value(&self, k: usize) -> f64 {
        match self {
            GammaSchedule::Constant(g) => *g,
            GammaSchedule::PerIteration(gs) => gs[(k - 1).min(gs.len() - 1)],
            GammaSchedule::Decaying { gamma0 } => gamma0 / k as f64,
        }
    }

    pub fn validate(&self, outer_iters: usize) -> Result<()> {
        let ok = match self {
            GammaSchedule::Constant(g) => *g > 0.0,
            GammaSchedule::PerIteration(gs) => {
                !gs.is_empty() && gs.len() >= outer_iters && gs.iter().all(|&g| g > 0.0)
            }
            GammaSchedule::Decaying { gamma0 } => *gamma0 > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::config("step sizes must be positive (one per iteration)"))
        }
    }
}

#[derive(Debug, Clone)]
pub struct MergeConfig {
    /// Outer iterations K.
    pub outer_iters: usize,
    pub gamma: GammaSchedule,
    pub mode: MergeMode,
    pub finetune: FineTuneConfig,
    pub critic_rkl: CriticTrainConfig,
    pub critic_w1: CriticTrainConfig,
    pub critic_hidden: Vec<usize>,
    /// Sample pool size per side for critic refreshes.
    pub critic_pool: usize,
    /// Use one critic per prior instead of the single mixture critic for
    /// all-reverse-KL merges.
    pub union_per_prior: bool,
    pub objective_samples: usize,
    pub ode_steps: usize,
    pub seed: u64,
    pub checkpoint_dir: Option<PathBuf>,
    /// Stop when the objective changes less than `tol` for three consecutive
    /// iterations.
    pub plateau_tol: Option<f64>,
    /// Return the iterate with the best estimated objective instead of the
    /// last one.
    pub keep_best: bool,
}

impl Default for MergeConfig {
    fn default() -> Self {
        MergeConfig {
            outer_iters: 10,
            gamma: GammaSchedule::Constant(1.0),
            mode: MergeMode::Terminal,
            finetune: FineTuneConfig::default(),
            critic_rkl: CriticTrainConfig::reverse_kl_defaults(),
            critic_w1: CriticTrainConfig::w1_defaults(),
            critic_hidden: vec![128, 128, 128],
            critic_pool: 4096,
            union_per_prior: false,
            objective_samples: 16_384,
            ode_steps: 100,
            seed: 0,
            plateau_tol: None,
            checkpoint_dir: None,
            keep_best: false,
        }
    }
}

impl MergeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.outer_iters == 0 {
            return Err(Error::config("merge needs at least one outer iteration"));
        }
        self.gamma.validate(self.outer_iters)?;
        self.finetune.validate()?;
        if self.objective_samples == 0 || self.ode_steps == 0 {
            return Err(Error::config("objective sampling parameters must be positive"));
        }
        Ok(())
    }
}

/// One line of the objective trace, decomposed per the merge functional:
/// `total = reward_term - sum(divergence_terms)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveRecord {
    pub k: usize,
    pub reward_term: f64,
    pub divergence_terms: Vec<f64>,
    pub total: f64,
    /// True when a divergence estimate came from a critic value rather than
    /// the grid oracle.
    pub approximate: bool,
    pub seconds: f64,
    pub checkpoint: Option<String>,
}

#[derive(Debug, Clone, Default)]
pub struct ObjectiveTrace {
    pub records: Vec<ObjectiveRecord>,
}

impl ObjectiveTrace {
    pub fn csv_header(n_divs: usize) -> String {
        let mut s = String::from("k,reward_term");
        for i in 1..=n_divs {
            s.push_str(&format!(",div_term_{i}"));
        }
        s.push_str(",total_G,approximate,seconds,checkpoint");
        s
    }

    fn record_csv(r: &ObjectiveRecord, canonical: bool) -> String {
        let mut s = format!("{},{}", r.k, r.reward_term);
        for d in &r.divergence_terms {
            s.push_str(&format!(",{d}"));
        }
        let secs = if canonical {
            "-".to_string()
        } else {
            format!("{}", r.seconds)
        };
        s.push_str(&format!(
            ",{},{},{},{}",
            r.total,
            r.approximate,
            secs,
            r.checkpoint.as_deref().unwrap_or("-")
        ));
        s
    }

    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        let n = self.records.first().map_or(0, |r| r.divergence_terms.len());
        writeln!(w, "{}", Self::csv_header(n))?;
        for r in &self.records {
            writeln!(w, "{}", Self::record_csv(r, false))?;
        }
        Ok(())
    }

    /// Trace bytes with volatile fields (wall-clock seconds) removed; equal
    /// across reruns of the same seed and config.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let n = self.records.first().map_or(0, |r| r.divergence_terms.len());
        let mut out = format!("{}\n", Self::csv_header(n));
        for r in &self.records {
            out.push_str(&Self::record_csv(r, true));
            out.push('\n');
        }
        out.into_bytes()
    }
}

/// Grid-backed objective estimation for d <= 2: the model is sampled through
/// its flow ODE, smoothed onto the grid, and compared against exact prior
/// grids. W1 terms in d = 2 fall back to the trained critic value and are
/// flagged approximate.
#[derive(Debug, Clone)]
pub struct ObjectiveEstimator {
    pub bounds: Vec<(f64, f64)>,
    pub shape: Vec<usize>,
    pub prior_grids: Vec<GridDensity>,
    pub samples: usize,
    pub ode_steps: usize,
}

impl ObjectiveEstimator {
    pub fn from_grids(prior_grids: Vec<GridDensity>, samples: usize, ode_steps: usize) -> Result<Self> {
        let first = prior_grids
            .first()
            .ok_or_else(|| Error::input("estimator needs at least one prior grid"))?;
        if first.dim() > 2 {
            return Err(Error::unsupported("grid objective backend supports d <= 2"));
        }
        Ok(ObjectiveEstimator {
            bounds: first.bounds.clone(),
            shape: first.shape.clone(),
            prior_grids,
            samples,
            ode_steps,
        })
    }

    /// Build prior grids by sampling each prior model (used when no analytic
    /// density is available).
    pub fn from_prior_models(
        spec: &OperatorSpec,
        bounds: Vec<(f64, f64)>,
        shape: Vec<usize>,
        samples: usize,
        ode_steps: usize,
        seed: u64,
    ) -> Result<Self> {
        if spec.dim() > 2 {
            return Err(Error::unsupported("grid objective backend supports d <= 2"));
        }
        let mut prior_grids = Vec::with_capacity(spec.priors.len());
        for (i, prior) in spec.priors.iter().enumerate() {
            let s = sample_ode(
                prior,
                SourceDistribution::StandardNormal,
                samples,
                ode_steps,
                split_seed(seed, &[stream::OBJECTIVE, i as u64]),
            )?;
            prior_grids.push(grid::density_from_samples(
                &s,
                spec.dim(),
                &bounds,
                &shape,
                None,
            )?);
        }
        Ok(ObjectiveEstimator {
            bounds,
            shape,
            prior_grids,
            samples,
            ode_steps,
        })
    }

    /// Decomposed objective of `model` under `spec`:
    /// `(reward_term, weighted divergence terms, any_approximate)`.
    pub fn estimate(
        &self,
        model: &FlowModel,
        spec: &OperatorSpec,
        bank: Option<&CriticBank>,
        seed: u64,
    ) -> Result<(f64, Vec<f64>, bool)> {
        if self.prior_grids.len() != spec.priors.len() {
            return Err(Error::input("estimator prior grids do not match the spec"));
        }
        let d = spec.dim();
        let samples = sample_ode(
            model,
            SourceDistribution::StandardNormal,
            self.samples,
            self.ode_steps,
            seed,
        )?;
        let model_grid =
            grid::density_from_samples(&samples, d, &self.bounds, &self.shape, None)?;
        let reward_term = if spec.reward.is_none() {
            0.0
        } else {
            let n = samples.len() / d;
            (0..n)
                .map(|r| spec.reward.value(&samples[r * d..(r + 1) * d]))
                .sum::<f64>()
                / n as f64
        };
        let mut divs = Vec::with_capacity(spec.priors.len());
        let mut approximate = false;
        for (i, ((prior_grid, &kind), &alpha)) in self
            .prior_grids
            .iter()
            .zip(spec.divergences.iter())
            .zip(spec.alphas.iter())
            .enumerate()
        {
            let value = match kind {
                DivergenceKind::ForwardKl => grid::grid_kl(&model_grid, prior_grid)?,
                DivergenceKind::ReverseKl => grid::grid_kl(prior_grid, &model_grid)?,
                DivergenceKind::W1 => {
                    if d == 1 {
                        grid::grid_w1_1d(&model_grid, prior_grid)?
                    } else {
                        approximate = true;
                        self.critic_w1_estimate(model, spec, bank, i, &samples, seed)?
                    }
                }
            };
            divs.push(alpha * value);
        }
        Ok((reward_term, divs, approximate))
    }

    fn critic_w1_estimate(
        &self,
        _model: &FlowModel,
        spec: &OperatorSpec,
        bank: Option<&CriticBank>,
        prior_idx: usize,
        model_samples: &[f64],
        seed: u64,
    ) -> Result<f64> {
        let critic = match bank {
            Some(CriticBank::PerPrior(cs)) => cs
                .get(prior_idx)
                .and_then(|c| c.as_ref())
                .ok_or_else(|| Error::state("no critic available for W1 estimate"))?,
            _ => return Err(Error::unsupported("W1 objective in d >= 2 needs critics")),
        };
        let prior_samples = sample_ode(
            &spec.priors[prior_idx],
            SourceDistribution::StandardNormal,
            self.samples.min(4096),
            self.ode_steps,
            split_seed(seed, &[stream::OBJECTIVE, 0x77, prior_idx as u64]),
        )?;
        let m = prior_samples.len().min(model_samples.len());
        Ok(
            w1_critic_objective(critic, &model_samples[..m], &prior_samples[..m], 0.0, seed)?
                .abs(),
        )
    }
}

/// Critic pools fixed for a whole run: prior-side samples never change.
struct PriorPools {
    /// For the mixture critic: samples of the alpha-weighted prior mixture.
    mixture: Option<Vec<f64>>,
    /// Per-prior sample pools where a critic needs one.
    per_prior: Vec<Option<Vec<f64>>>,
}

fn build_bank_and_pools(
    spec: &OperatorSpec,
    cfg: &MergeConfig,
) -> Result<(CriticBank, PriorPools)> {
    if !spec.needs_critics() {
        return Ok((
            CriticBank::None,
            PriorPools {
                mixture: None,
                per_prior: Vec::new(),
            },
        ));
    }
    let d = spec.dim();
    if spec.all_kind(DivergenceKind::ReverseKl) && !cfg.union_per_prior {
        let critic = CriticNet::new(
            d,
            &cfg.critic_hidden,
            CriticKind::ReverseKl,
            cfg.critic_rkl.lr,
            split_seed(cfg.seed, &[stream::CRITIC, 0xc0]),
        )?;
        let pool = mixture_prior_sample(
            &spec.priors,
            &spec.alphas,
            cfg.critic_pool,
            cfg.ode_steps,
            split_seed(cfg.seed, &[stream::CRITIC, 0xd1]),
        )?;
        return Ok((
            CriticBank::Mixture(critic),
            PriorPools {
                mixture: Some(pool),
                per_prior: Vec::new(),
            },
        ));
    }
    let mut critics = Vec::with_capacity(spec.priors.len());
    let mut pools = Vec::with_capacity(spec.priors.len());
    for (i, (&kind, prior)) in spec.divergences.iter().zip(spec.priors.iter()).enumerate() {
        match kind {
            DivergenceKind::ForwardKl => {
                critics.push(None);
                pools.push(None);
            }
            DivergenceKind::ReverseKl | DivergenceKind::W1 => {
                let ckind = if kind == DivergenceKind::ReverseKl {
                    CriticKind::ReverseKl
                } else {
                    CriticKind::W1
                };
                let lr = if ckind == CriticKind::ReverseKl {
                    cfg.critic_rkl.lr
                } else {
                    cfg.critic_w1.lr
                };
                critics.push(Some(CriticNet::new(
                    d,
                    &cfg.critic_hidden,
                    ckind,
                    lr,
                    split_seed(cfg.seed, &[stream::CRITIC, 0xc1, i as u64]),
                )?));
                let pool = sample_ode(
                    prior,
                    SourceDistribution::StandardNormal,
                    cfg.critic_pool,
                    cfg.ode_steps,
                    split_seed(cfg.seed, &[stream::CRITIC, 0xd0, i as u64]),
                )?;
                pools.push(Some(pool));
            }
        }
    }
    Ok((
        CriticBank::PerPrior(critics),
        PriorPools {
            mixture: None,
            per_prior: pools,
        },
    ))
}

fn refresh_critics(
    bank: &mut CriticBank,
    pools: &PriorPools,
    cfg: &MergeConfig,
    current: &FlowModel,
    k: usize,
) -> Result<()> {
    if matches!(bank, CriticBank::None) {
        return Ok(());
    }
    let current_pool = sample_ode(
        current,
        SourceDistribution::StandardNormal,
        cfg.critic_pool,
        cfg.ode_steps,
        split_seed(cfg.seed, &[stream::CRITIC, 0xe0, k as u64]),
    )?;
    match bank {
        CriticBank::None => {}
        CriticBank::Mixture(critic) => {
            let pool_p = pools
                .mixture
                .as_ref()
                .ok_or_else(|| Error::state("mixture pool missing"))?;
            train_reverse_kl_critic(
                critic,
                pool_p,
                &current_pool,
                &cfg.critic_rkl,
                split_seed(cfg.seed, &[stream::CRITIC, 0xf0, k as u64]),
            )?;
        }
        CriticBank::PerPrior(critics) => {
            for (i, critic) in critics.iter_mut().enumerate() {
                let Some(critic) = critic else { continue };
                let pool = pools.per_prior[i]
                    .as_ref()
                    .ok_or_else(|| Error::state("prior pool missing"))?;
                let seed = split_seed(cfg.seed, &[stream::CRITIC, 0xf1, k as u64, i as u64]);
                match critic.kind {
                    CriticKind::ReverseKl => {
                        // f-GAN slots: p = prior, q = current model.
                        train_reverse_kl_critic(critic, pool, &current_pool, &cfg.critic_rkl, seed)?;
                    }
                    CriticKind::W1 => {
                        // Potential high on current mass, low on prior mass.
                        train_w1_critic(critic, &current_pool, pool, &cfg.critic_w1, seed)?;
                    }
                }
            }
        }
    }
    Ok(())
}

/// Output of one merge run.
pub struct MergeRun {
    pub model: FlowModel,
    pub trace: ObjectiveTrace,
    pub inner_losses: Vec<Vec<InnerLossRecord>>,
    /// Iteration the returned model comes from (differs from the last
    /// iteration only under `keep_best`).
    pub selected_k: usize,
}

/// Run the outer merge loop: `outer_iters` iterations of critic refresh,
/// surrogate assembly at the current model, and one fine-tuning solve.
pub fn run(spec: &OperatorSpec, cfg: &MergeConfig, est: &ObjectiveEstimator) -> Result<MergeRun> {
    spec.validate()?;
    cfg.validate()?;
    if cfg.mode == MergeMode::FlowProcess && !spec.all_kind(DivergenceKind::ForwardKl) {
        return Err(Error::unsupported(
            "flow-process mode is defined for forward-kl divergences only",
        ));
    }
    if let Some(dir) = &cfg.checkpoint_dir {
        std::fs::create_dir_all(dir)?;
    }
    let started = Instant::now();
    let (mut bank, pools) = build_bank_and_pools(spec, cfg)?;
    let mut current = spec.init_model().clone();
    let mut trace = ObjectiveTrace::default();
    let mut inner_losses = Vec::with_capacity(cfg.outer_iters);
    let mut trace_file = match &cfg.checkpoint_dir {
        Some(dir) => {
            let mut f = std::fs::File::create(dir.join("trace.csv"))?;
            writeln!(f, "{}", ObjectiveTrace::csv_header(spec.priors.len()))?;
            Some(f)
        }
        None => None,
    };
    let mut plateau_hits = 0usize;
    let mut best: Option<(f64, usize, FlowModel)> = None;
    for k in 1..=cfg.outer_iters {
        refresh_critics(&mut bank, &pools, cfg, &current, k)?;
        let surrogate = assemble_surrogate(&current, spec, &bank, cfg.mode, k)?;
        let mut ft = cfg.finetune.clone();
        ft.gamma = cfg.gamma.value(k);
        ft.seed = split_seed(cfg.seed, &[stream::TRAJECTORIES, k as u64]);
        let (next, losses) = solve(&current, &surrogate, &ft).map_err(|e| {
            Error::state(format!(
                "inner solve failed at iteration {k} (last good checkpoint: {}): {e}",
                trace
                    .records
                    .last()
                    .and_then(|r| r.checkpoint.clone())
                    .unwrap_or_else(|| "none".into())
            ))
        })?;
        current = next;
        inner_losses.push(losses);
        let checkpoint = match &cfg.checkpoint_dir {
            Some(dir) => {
                let name = format!("model_k{k:03}.fmck");
                crate::checkpoint::save_flow(&dir.join(&name), &current)?;
                Some(name)
            }
            None => None,
        };
        let (reward_term, divergence_terms, approximate) = est.estimate(
            &current,
            spec,
            Some(&bank),
            split_seed(cfg.seed, &[stream::OBJECTIVE, k as u64]),
        )?;
        let total = reward_term - divergence_terms.iter().sum::<f64>();
        if !total.is_finite() {
            return Err(Error::non_finite(format!("objective estimate at iteration {k}")));
        }
        let record = ObjectiveRecord {
            k,
            reward_term,
            divergence_terms,
            total,
            approximate,
            seconds: started.elapsed().as_secs_f64(),
            checkpoint,
        };
        if let Some(f) = trace_file.as_mut() {
            writeln!(f, "{}", ObjectiveTrace::record_csv(&record, false))?;
            f.flush()?;
        }
        if cfg.keep_best && best.as_ref().map_or(true, |(b, _, _)| record.total > *b) {
            best = Some((record.total, k, current.clone()));
        }
        if let Some(tol) = cfg.plateau_tol {
            if let Some(prev) = trace.records.last() {
                if (record.total - prev.total).abs() < tol {
                    plateau_hits += 1;
                } else {
                    plateau_hits = 0;
                }
            }
        }
        trace.records.push(record);
        if cfg.plateau_tol.is_some() && plateau_hits >= 3 {
            break;
        }
    }
    let mut selected_k = trace.records.last().map_or(0, |r| r.k);
    if let Some((_, k, model)) = best {
        if cfg.keep_best {
            current = model;
            selected_k = k;
        }
    }
    Ok(MergeRun {
        model: current,
        trace,
        inner_losses,
        selected_k,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnEntry {
    pub outer_iters: usize,
    pub inner_steps: usize,
    pub final_objective: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default)]
pub struct KnReport {
    pub entries: Vec<KnEntry>,
}

impl KnReport {
    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "outer_iters,inner_steps,final_objective,seconds")?;
        for e in &self.entries {
            writeln!(
                w,
                "{},{},{},{}",
                e.outer_iters, e.inner_steps, e.final_objective, e.seconds
            )?;
        }
        Ok(())
    }
}

/// Run the merge once per (K, N) budget with matched seeds; all budgets must
/// share the same total K * N.
pub fn kn_tradeoff_study(
    spec: &OperatorSpec,
    budgets: &[(usize, usize)],
    base_cfg: &MergeConfig,
    est: &ObjectiveEstimator,
) -> Result<KnReport> {
    if budgets.is_empty() {
        return Err(Error::config("study needs at least one (K, N) budget"));
    }
    let total = budgets[0].0 * budgets[0].1;
    if budgets.iter().any(|(k, n)| k * n != total) {
        return Err(Error::config(format!(
            "all budgets must share the same total K*N = {total}"
        )));
    }
    let mut report = KnReport::default();
    for &(k, n) in budgets {
        let mut cfg = base_cfg.clone();
        cfg.outer_iters = k;
        cfg.finetune.inner_steps = n;
        cfg.checkpoint_dir = base_cfg
            .checkpoint_dir
            .as_ref()
            .map(|d| d.join(format!("k{k}_n{n}")));
        let t0 = Instant::now();
        let run_out = run(spec, &cfg, est)?;
        let final_objective = run_out
            .trace
            .records
            .last()
            .map(|r| r.total)
            .ok_or_else(|| Error::state("empty trace"))?;
        report.entries.push(KnEntry {
            outer_iters: k,
            inner_steps: n,
            final_objective,
            seconds: t0.elapsed().as_secs_f64(),
        });
    }
    Ok(report)
}
