//! Subcommand implementations and shared pipeline helpers.

pub mod inspect;
pub mod kn;
pub mod merge;
pub mod oracle;
pub mod pretrain;

use std::path::{Path, PathBuf};

use flowmerge_core::cfm::pretrain_cfm;
use flowmerge_core::checkpoint;
use flowmerge_core::driver::ObjectiveEstimator;
use flowmerge_core::error::{Error, Result};
use flowmerge_core::flow::{sample_ode, FlowModel, SourceDistribution};
use flowmerge_core::grid::{analytic_grid, density_from_samples, grid_kl, GridDensity};
use flowmerge_core::mixture::GaussianMixture;
use flowmerge_core::operators::{LambdaSchedule, OperatorSpec, RewardFn};
use flowmerge_core::rng::{split_seed, stream};
use flowmerge_core::schedule::Schedule;

use crate::config::ExperimentConfig;
use crate::manifest::RunManifest;

pub struct PriorBundle {
    pub name: String,
    pub model: FlowModel,
    pub mixture: Option<GaussianMixture>,
    pub untrained: bool,
}

/// Pretrain (or load) every declared prior, write checkpoints, and emit
/// sample and grid diagnostics.
pub fn build_priors(
    cfg: &ExperimentConfig,
    out_dir: &Path,
    manifest: &mut RunManifest,
) -> Result<Vec<PriorBundle>> {
    std::fs::create_dir_all(out_dir)?;
    let (net_cfg, pre_cfg) = cfg.pretrain_config();
    let mut bundles = Vec::with_capacity(cfg.prior.len());
    for (i, prior) in cfg.prior.iter().enumerate() {
        let mixture = cfg.mixture_for(prior)?;
        let seed = split_seed(cfg.seed, &[stream::PRETRAIN, i as u64]);
        let model = match &prior.checkpoint {
            Some(path) => checkpoint::load_flow(path)?,
            None => {
                let mix = mixture
                    .as_ref()
                    .ok_or_else(|| Error::config("prior needs components or checkpoint"))?;
                pretrain_cfm(mix, Schedule::Linear, &net_cfg, &pre_cfg, seed)?
            }
        };
        if model.dim != cfg.dim {
            return Err(Error::config(format!(
                "prior {:?} has dim {}, config says {}",
                prior.name, model.dim, cfg.dim
            )));
        }
        let rel = format!("prior_{}.fmck", prior.name);
        checkpoint::save_flow(&out_dir.join(&rel), &model)?;
        manifest.add_artifact(out_dir, &rel)?;
        bundles.push(PriorBundle {
            name: prior.name.clone(),
            model,
            mixture,
            untrained: prior.checkpoint.is_none() && pre_cfg.steps == 0,
        });
    }
    Ok(bundles)
}

/// Per-prior diagnostics: sample dumps and, for d <= 2 with known mixtures,
/// the grid KL against the analytic target.
pub fn prior_diagnostics(
    cfg: &ExperimentConfig,
    bundles: &[PriorBundle],
    out_dir: &Path,
    manifest: &mut RunManifest,
) -> Result<()> {
    let (bounds, shape) = cfg.grid_spec();
    let mut lines = vec!["prior,untrained,grid_kl_to_target".to_string()];
    for (i, b) in bundles.iter().enumerate() {
        let samples = sample_ode(
            &b.model,
            SourceDistribution::StandardNormal,
            cfg.output.sample_count,
            100,
            split_seed(cfg.seed, &[stream::SAMPLES, 0xa0, i as u64]),
        )?;
        if cfg.output.export_samples {
            let rel = format!("prior_{}_samples.csv", b.name);
            write_samples_csv(&out_dir.join(&rel), &samples, cfg.dim)?;
            manifest.add_artifact(out_dir, &rel)?;
        }
        let kl = match (&b.mixture, cfg.dim <= 2) {
            (Some(mix), true) => {
                let est = density_from_samples(&samples, cfg.dim, &bounds, &shape, None)?;
                let target = analytic_grid(mix, &bounds, &shape)?;
                if cfg.output.export_grids {
                    let rel = format!("prior_{}_grid.csv", b.name);
                    let mut f = std::fs::File::create(out_dir.join(&rel))?;
                    est.write_csv(&mut f)?;
                    manifest.add_artifact(out_dir, &rel)?;
                }
                format!("{}", grid_kl(&est, &target)?)
            }
            _ => "-".to_string(),
        };
        lines.push(format!("{},{},{}", b.name, b.untrained, kl));
    }
    std::fs::write(out_dir.join("prior_diagnostics.csv"), lines.join("\n") + "\n")?;
    manifest.add_artifact(out_dir, "prior_diagnostics.csv")?;
    Ok(())
}

pub fn write_samples_csv(path: &Path, samples: &[f64], dim: usize) -> Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    let header: Vec<String> = (0..dim).map(|i| format!("x_{i}")).collect();
    writeln!(f, "{}", header.join(","))?;
    for row in samples.chunks_exact(dim) {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(f, "{}", cells.join(","))?;
    }
    Ok(())
}

/// The single-operator spec from the config.
pub fn operator_spec(cfg: &ExperimentConfig, bundles: &[PriorBundle]) -> Result<OperatorSpec> {
    let op = cfg
        .operator
        .as_ref()
        .ok_or_else(|| Error::config("this command needs an [operator] section"))?;
    let reward = match &op.reward {
        Some(r) => r.to_reward(cfg.dim)?,
        None => RewardFn::None,
    };
    let lambda = match &op.lambda {
        Some(l) => l.to_lambda()?,
        None => LambdaSchedule::default(),
    };
    let spec = OperatorSpec {
        priors: bundles.iter().map(|b| b.model.clone()).collect(),
        divergences: op.kinds()?,
        alphas: op.alphas.clone(),
        reward,
        lambda,
        init_index: op.init_index - 1,
    };
    spec.validate()?;
    Ok(spec)
}

/// Grid-backed objective estimator: exact analytic prior grids when every
/// prior has a declared mixture, KDE grids of the prior models otherwise.
pub fn build_estimator(
    cfg: &ExperimentConfig,
    spec: &OperatorSpec,
    bundles: &[PriorBundle],
) -> Result<ObjectiveEstimator> {
    let (bounds, shape) = cfg.grid_spec();
    if cfg.dim > 2 {
        return Err(Error::unsupported(
            "objective estimation beyond d = 2 is not available in this build",
        ));
    }
    if bundles.iter().all(|b| b.mixture.is_some()) {
        let grids: Result<Vec<GridDensity>> = bundles
            .iter()
            .map(|b| analytic_grid(b.mixture.as_ref().unwrap(), &bounds, &shape))
            .collect();
        ObjectiveEstimator::from_grids(grids?, cfg.merge.objective_samples, 100)
    } else {
        ObjectiveEstimator::from_prior_models(
            spec,
            bounds,
            shape,
            cfg.merge.objective_samples,
            100,
            split_seed(cfg.seed, &[stream::OBJECTIVE, 0xee]),
        )
    }
}

pub fn ensure_out_dir(out: &Option<PathBuf>, default_name: &str) -> Result<PathBuf> {
    let dir = out
        .clone()
        .unwrap_or_else(|| PathBuf::from("runs").join(default_name));
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}
