//! `oracle`: the sampling-free reference — exact mirror descent on grid
//! densities against the closed-form merge target.

use std::io::Write;
use std::path::PathBuf;

use flowmerge_core::error::{Error, Result};
use flowmerge_core::grid::{
    analytic_grid, closed_form_target, exact_mirror_descent, grid_objective, sup_norm,
    GridDensity,
};
use flowmerge_core::operators::{DivergenceKind, RewardFn};

use crate::commands::ensure_out_dir;
use crate::config::ExperimentConfig;
use crate::manifest::RunManifest;

pub fn run(
    cfg: &ExperimentConfig,
    config_text: &str,
    out: &Option<PathBuf>,
) -> Result<PathBuf> {
    if cfg.dim > 2 {
        return Err(Error::unsupported("the grid oracle supports d <= 2 only"));
    }
    let op = cfg
        .operator
        .as_ref()
        .ok_or_else(|| Error::config("oracle needs an [operator] section"))?;
    let oracle = cfg
        .oracle
        .as_ref()
        .ok_or_else(|| Error::config("oracle needs an [oracle] section with gamma and steps"))?;
    let kinds = op.kinds()?;
    if kinds.iter().any(|k| *k == DivergenceKind::W1) {
        return Err(Error::unsupported(
            "the exact mirror-descent oracle covers forward/reverse KL and reward terms only",
        ));
    }
    let out_dir = ensure_out_dir(out, &format!("{}-oracle", cfg.name))?;
    let mut manifest = RunManifest::new("oracle", config_text, cfg.seed);
    let (bounds, shape) = cfg.grid_spec();
    let prior_grids: Result<Vec<GridDensity>> = cfg
        .prior
        .iter()
        .map(|p| {
            let mix = cfg
                .mixture_for(p)?
                .ok_or_else(|| Error::config("oracle priors need analytic mixtures"))?;
            analytic_grid(&mix, &bounds, &shape)
        })
        .collect();
    let prior_grids = prior_grids?;
    let reward = match &op.reward {
        Some(r) => r.to_reward(cfg.dim)?,
        None => RewardFn::None,
    };
    let reward_grid: Option<Vec<f64>> = if reward.is_none() {
        None
    } else {
        let probe = &prior_grids[0];
        Some(
            (0..probe.values.len())
                .map(|i| reward.value(&probe.coords(i)))
                .collect(),
        )
    };
    let init = prior_grids[op.init_index - 1].clone();
    let run = exact_mirror_descent(
        &prior_grids,
        &kinds,
        &op.alphas,
        reward_grid.as_deref(),
        oracle.gamma,
        oracle.steps,
        &init,
        oracle.keep_iterates,
    )?;

    // Convergence table: objective decomposition every few steps.
    let stride = (oracle.steps / 200).max(1);
    let mut f = std::fs::File::create(out_dir.join("oracle_trace.csv"))?;
    writeln!(f, "step,reward_term,divergence_sum,total")?;
    for (i, p) in run.objective_trace.iter().enumerate() {
        if i % stride == 0 || i == run.objective_trace.len() - 1 {
            writeln!(
                f,
                "{},{},{},{}",
                i,
                p.reward_term,
                p.divergence_terms.iter().sum::<f64>(),
                p.total
            )?;
        }
    }
    drop(f);
    manifest.add_artifact(&out_dir, "oracle_trace.csv")?;

    let stationary = oracle.gamma == 0.0;
    let mut report = vec![format!("stationary,{stationary}")];
    // Closed-form comparison for pure homogeneous merges.
    if reward.is_none() && kinds.iter().all(|k| *k == kinds[0]) {
        let target = closed_form_target(kinds[0], &op.alphas, &prior_grids)?;
        let sup = sup_norm(&run.final_density, &target);
        report.push(format!("sup_norm_to_closed_form,{sup}"));
        let mut f = std::fs::File::create(out_dir.join("closed_form_target.csv"))?;
        target.write_csv(&mut f)?;
        drop(f);
        manifest.add_artifact(&out_dir, "closed_form_target.csv")?;
    }
    let final_obj = grid_objective(
        &run.final_density,
        &kinds,
        &op.alphas,
        &prior_grids,
        reward_grid.as_deref(),
    )?;
    report.push(format!("final_total,{}", final_obj.total));
    let monotone = run
        .objective_trace
        .windows(2)
        .all(|w| {
            w[1].divergence_terms.iter().sum::<f64>()
                <= w[0].divergence_terms.iter().sum::<f64>() + 1e-14
        });
    report.push(format!("divergence_sum_nonincreasing,{monotone}"));
    let mut f = std::fs::File::create(out_dir.join("oracle_report.csv"))?;
    writeln!(f, "metric,value")?;
    for line in &report {
        writeln!(f, "{line}")?;
    }
    drop(f);
    manifest.add_artifact(&out_dir, "oracle_report.csv")?;

    let mut f = std::fs::File::create(out_dir.join("oracle_final.csv"))?;
    run.final_density.write_csv(&mut f)?;
    drop(f);
    manifest.add_artifact(&out_dir, "oracle_final.csv")?;
    manifest.write(&out_dir)?;
    for line in &report {
        println!("{line}");
    }
    Ok(out_dir)
}
