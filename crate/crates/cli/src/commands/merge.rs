//! `merge`: run the mirror-descent merge (single operator or circuit),
//! writing the merged checkpoint, objective trace, inner-loss trace, sample
//! dumps, and grid comparisons against the closed-form target.

use std::io::Write;
use std::path::PathBuf;

use flowmerge_core::checkpoint;
use flowmerge_core::driver::{run as run_merge, MergeConfig, ObjectiveEstimator};
use flowmerge_core::error::{Error, Result};
use flowmerge_core::finetune::write_loss_trace;
use flowmerge_core::flow::{sample_ode, FlowModel, SourceDistribution};
use flowmerge_core::grid::{
    analytic_grid, closed_form_target, density_from_samples, fit_mixture_weight, grid_kl,
    GridDensity,
};
use flowmerge_core::operators::{
    evaluate_circuit, CircuitNode, DivergenceKind, LambdaSchedule, MergeMode, OperatorSpec,
    RewardFn,
};
use flowmerge_core::rng::{split_seed, stream};

use crate::commands::{
    build_estimator, build_priors, ensure_out_dir, operator_spec, prior_diagnostics,
    write_samples_csv, PriorBundle,
};
use crate::config::{parse_mode, ExperimentConfig};
use crate::manifest::RunManifest;

pub fn run(
    cfg: &ExperimentConfig,
    config_text: &str,
    out: &Option<PathBuf>,
) -> Result<PathBuf> {
    let out_dir = ensure_out_dir(out, &cfg.name)?;
    let mut manifest = RunManifest::new("merge", config_text, cfg.seed);
    let bundles = build_priors(cfg, &out_dir, &mut manifest)?;
    prior_diagnostics(cfg, &bundles, &out_dir, &mut manifest)?;
    let model = if cfg.node.is_empty() {
        merge_single(cfg, &bundles, &out_dir, &mut manifest)?
    } else {
        merge_circuit(cfg, &bundles, &out_dir, &mut manifest)?
    };
    let rel = "merged.fmck";
    checkpoint::save_flow(&out_dir.join(rel), &model)?;
    manifest.add_artifact(&out_dir, rel)?;
    export_model(cfg, &model, &out_dir, &mut manifest)?;
    manifest.write(&out_dir)?;
    println!("merged model -> {}", out_dir.join(rel).display());
    Ok(out_dir)
}

fn merge_single(
    cfg: &ExperimentConfig,
    bundles: &[PriorBundle],
    out_dir: &std::path::Path,
    manifest: &mut RunManifest,
) -> Result<FlowModel> {
    let spec = operator_spec(cfg, bundles)?;
    let est = build_estimator(cfg, &spec, bundles)?;
    let merge_cfg = cfg.merge_config(Some(out_dir.to_path_buf()))?;
    let out = run_merge(&spec, &merge_cfg, &est)?;
    manifest.add_note("selected_k", out.selected_k);
    manifest.add_artifact(out_dir, "trace.csv")?;
    manifest.add_canonical("trace.csv", &out.trace.canonical_bytes());
    let mut f = std::fs::File::create(out_dir.join("inner_losses.csv"))?;
    for (k, records) in out.inner_losses.iter().enumerate() {
        write_loss_trace(&mut f, k + 1, records, k == 0)?;
    }
    drop(f);
    manifest.add_artifact(out_dir, "inner_losses.csv")?;
    for r in &out.trace.records {
        if let Some(name) = &r.checkpoint {
            manifest.add_artifact(out_dir, name)?;
        }
    }
    closed_form_comparison(cfg, &spec, &out.model, bundles, out_dir, manifest)?;
    Ok(out.model)
}

fn node_lambda(l: &Option<crate::config::LambdaSection>) -> Result<LambdaSchedule> {
    match l {
        Some(l) => l.to_lambda(),
        None => Ok(LambdaSchedule::default()),
    }
}

fn merge_circuit(
    cfg: &ExperimentConfig,
    bundles: &[PriorBundle],
    out_dir: &std::path::Path,
    manifest: &mut RunManifest,
) -> Result<FlowModel> {
    // Materialize the node tree from the flat list.
    fn build_node(
        id: &str,
        cfg: &ExperimentConfig,
        bundles: &[PriorBundle],
    ) -> Result<CircuitNode> {
        if let Some(b) = bundles.iter().find(|b| b.name == id) {
            return Ok(CircuitNode::Leaf(b.model.clone()));
        }
        let n = cfg
            .node
            .iter()
            .find(|n| n.id == id)
            .ok_or_else(|| Error::config(format!("unknown circuit input {id:?}")))?;
        let children: Result<Vec<CircuitNode>> = n
            .inputs
            .iter()
            .map(|input| build_node(input, cfg, bundles))
            .collect();
        let kind = DivergenceKind::from_str(&n.op)?;
        let reward = match &n.reward {
            Some(r) => r.to_reward(cfg.dim)?,
            None => RewardFn::None,
        };
        Ok(CircuitNode::Op {
            label: n.id.clone(),
            divergences: vec![kind; n.inputs.len()],
            alphas: n.alphas.clone(),
            reward,
            lambda: node_lambda(&n.lambda)?,
            mode: match &n.mode {
                Some(m) => parse_mode(m)?,
                None => MergeMode::Terminal,
            },
            init_index: n.init_index - 1,
            children: children?,
        })
    }
    // Root: the node nobody references.
    let referenced: Vec<&String> = cfg.node.iter().flat_map(|n| n.inputs.iter()).collect();
    let root_cfg = cfg
        .node
        .iter()
        .find(|n| !referenced.contains(&&n.id))
        .ok_or_else(|| Error::config("circuit has no root"))?;
    let root = build_node(&root_cfg.id, cfg, bundles)?;

    let base_merge = cfg.merge_config(None)?;
    let mut node_counter = 0usize;
    let out_path = out_dir.to_path_buf();
    let all_nodes = cfg.node.clone();
    let dim = cfg.dim;
    let (bounds, shape) = cfg.grid_spec();
    let objective_samples = cfg.merge.objective_samples;
    let seed = cfg.seed;
    let mut node_artifacts: Vec<(String, Vec<u8>)> = Vec::new();
    let model = evaluate_circuit(&root, &mut |spec: &OperatorSpec, mode, path| {
        node_counter += 1;
        let label = path.rsplit('/').next().unwrap_or("node").to_string();
        let section = all_nodes.iter().find(|n| n.id == label);
        let mut node_cfg = MergeConfig {
            mode,
            seed: split_seed(seed, &[stream::TRAJECTORIES, 0xc1_c0, node_counter as u64]),
            checkpoint_dir: Some(out_path.join(format!("node_{label}"))),
            ..base_merge.clone()
        };
        if let Some(s) = section {
            if let Some(k) = s.outer_iters {
                node_cfg.outer_iters = k;
            }
            if let Some(g) = s.gamma {
                node_cfg.gamma = flowmerge_core::driver::GammaSchedule::Constant(g);
            }
            if let Some(n) = s.inner_steps {
                node_cfg.finetune.inner_steps = n;
            }
        }
        if dim > 2 {
            return Err(Error::unsupported("circuit objective tracking needs d <= 2"));
        }
        let est = ObjectiveEstimator::from_prior_models(
            spec,
            bounds.clone(),
            shape.clone(),
            objective_samples,
            100,
            split_seed(seed, &[stream::OBJECTIVE, node_counter as u64]),
        )?;
        let out = run_merge(spec, &node_cfg, &est)?;
        node_artifacts.push((
            format!("node_{label}/trace.csv"),
            out.trace.canonical_bytes(),
        ));
        Ok(out.model)
    })?;
    for (rel, canonical) in node_artifacts {
        manifest.add_artifact(out_dir, &rel)?;
        manifest.add_canonical(&rel, &canonical);
    }
    manifest.add_note("circuit_nodes", node_counter);
    Ok(model)
}

fn closed_form_comparison(
    cfg: &ExperimentConfig,
    spec: &OperatorSpec,
    model: &FlowModel,
    bundles: &[PriorBundle],
    out_dir: &std::path::Path,
    manifest: &mut RunManifest,
) -> Result<()> {
    if cfg.dim > 2 || !bundles.iter().all(|b| b.mixture.is_some()) {
        return Ok(());
    }
    let kinds = &spec.divergences;
    let homogeneous = kinds.iter().all(|k| *k == kinds[0]);
    if !homogeneous || !spec.reward.is_none() {
        return Ok(());
    }
    if kinds[0] == DivergenceKind::W1 && cfg.dim != 1 {
        return Ok(());
    }
    let (bounds, shape) = cfg.grid_spec();
    let prior_grids: Result<Vec<GridDensity>> = bundles
        .iter()
        .map(|b| analytic_grid(b.mixture.as_ref().unwrap(), &bounds, &shape))
        .collect();
    let prior_grids = prior_grids?;
    let target = match closed_form_target(kinds[0], &spec.alphas, &prior_grids) {
        Ok(t) => t,
        Err(Error::Degenerate(_)) => return Ok(()),
        Err(e) => return Err(e),
    };
    let samples = sample_ode(
        model,
        SourceDistribution::StandardNormal,
        cfg.output.sample_count,
        100,
        split_seed(cfg.seed, &[stream::SAMPLES, 0xcf]),
    )?;
    let est = density_from_samples(&samples, cfg.dim, &bounds, &shape, None)?;
    let kl = grid_kl(&est, &target)?;
    let mut lines = vec![format!("grid_kl_to_closed_form,{kl}")];
    if kinds[0] == DivergenceKind::ReverseKl && prior_grids.len() == 2 {
        let w = fit_mixture_weight(&est, &prior_grids[0], &prior_grids[1])?;
        lines.push(format!("fitted_mixture_weight_on_prior_2,{w}"));
    }
    if cfg.output.export_grids {
        let mut f = std::fs::File::create(out_dir.join("closed_form_target.csv"))?;
        target.write_csv(&mut f)?;
        manifest.add_artifact(out_dir, "closed_form_target.csv")?;
        let mut f = std::fs::File::create(out_dir.join("merged_grid.csv"))?;
        est.write_csv(&mut f)?;
        manifest.add_artifact(out_dir, "merged_grid.csv")?;
    }
    let mut f = std::fs::File::create(out_dir.join("closed_form_comparison.csv"))?;
    writeln!(f, "metric,value")?;
    for line in lines {
        writeln!(f, "{line}")?;
    }
    drop(f);
    manifest.add_artifact(out_dir, "closed_form_comparison.csv")?;
    Ok(())
}

fn export_model(
    cfg: &ExperimentConfig,
    model: &FlowModel,
    out_dir: &std::path::Path,
    manifest: &mut RunManifest,
) -> Result<()> {
    if cfg.output.export_samples {
        let samples = sample_ode(
            model,
            SourceDistribution::StandardNormal,
            cfg.output.sample_count,
            100,
            split_seed(cfg.seed, &[stream::SAMPLES, 0xfe]),
        )?;
        write_samples_csv(&out_dir.join("merged_samples.csv"), &samples, cfg.dim)?;
        manifest.add_artifact(out_dir, "merged_samples.csv")?;
    }
    if cfg.output.export_trajectories {
        let grid = flowmerge_core::schedule::TimeGrid::from_steps(cfg.merge.sde_steps)?;
        let traj = flowmerge_core::flow::sample_sde_memoryless(
            model,
            model.schedule,
            64,
            grid,
            split_seed(cfg.seed, &[stream::SAMPLES, 0xaa]),
        )?;
        let mut f = std::fs::File::create(out_dir.join("merged_trajectories.csv"))?;
        traj.write_csv(&mut f)?;
        manifest.add_artifact(out_dir, "merged_trajectories.csv")?;
    }
    Ok(())
}
