//! `kn-study`: rerun the configured merge across (K, N) budgets sharing a
//! fixed total, with matched seeds, and compare final objectives and wall
//! times. With `--jobs > 1` each budget runs as a separate worker process
//! writing into its own subdirectory.

use std::io::Write;
use std::path::PathBuf;

use flowmerge_core::driver::kn_tradeoff_study;
use flowmerge_core::error::{Error, Result};

use crate::commands::{build_estimator, build_priors, ensure_out_dir, operator_spec};
use crate::config::ExperimentConfig;
use crate::manifest::RunManifest;

pub fn run(
    cfg: &ExperimentConfig,
    config_text: &str,
    out: &Option<PathBuf>,
    jobs: usize,
) -> Result<PathBuf> {
    let kn = cfg
        .kn_study
        .as_ref()
        .ok_or_else(|| Error::config("kn-study needs a [kn_study] section"))?;
    let out_dir = ensure_out_dir(out, &format!("{}-kn", cfg.name))?;
    if jobs > 1 && kn.budgets.len() > 1 {
        return run_parallel(cfg, config_text, &out_dir, jobs);
    }
    let mut manifest = RunManifest::new("kn-study", config_text, cfg.seed);
    let bundles = build_priors(cfg, &out_dir, &mut manifest)?;
    let spec = operator_spec(cfg, &bundles)?;
    let est = build_estimator(cfg, &spec, &bundles)?;
    let base = cfg.merge_config(Some(out_dir.clone()))?;
    let budgets: Vec<(usize, usize)> = kn.budgets.iter().map(|b| (b[0], b[1])).collect();
    let report = kn_tradeoff_study(&spec, &budgets, &base, &est)?;
    let mut f = std::fs::File::create(out_dir.join("kn_report.csv"))?;
    report.write_csv(&mut f)?;
    drop(f);
    manifest.add_artifact(&out_dir, "kn_report.csv")?;
    manifest.write(&out_dir)?;
    for e in &report.entries {
        println!(
            "K={} N={}: final objective {:.6} in {:.1}s",
            e.outer_iters, e.inner_steps, e.final_objective, e.seconds
        );
    }
    Ok(out_dir)
}

/// One worker process per budget, each with a single-budget config and a
/// disjoint output directory; the parent aggregates the per-budget reports.
fn run_parallel(
    cfg: &ExperimentConfig,
    config_text: &str,
    out_dir: &PathBuf,
    jobs: usize,
) -> Result<PathBuf> {
    let kn = cfg.kn_study.as_ref().unwrap();
    let exe = std::env::current_exe()?;
    let config_path = out_dir.join("config.effective.toml");
    std::fs::write(&config_path, config_text)?;
    let mut pending: Vec<(usize, usize, PathBuf)> = Vec::new();
    let mut children: Vec<(std::process::Child, usize)> = Vec::new();
    for b in &kn.budgets {
        let (k, n) = (b[0], b[1]);
        pending.push((k, n, out_dir.join(format!("job_k{k}_n{n}"))));
    }
    let mut queue = pending.clone();
    queue.reverse();
    let spawn_next = |queue: &mut Vec<(usize, usize, PathBuf)>| -> Result<Option<(std::process::Child, usize)>> {
        let Some((k, n, dir)) = queue.pop() else {
            return Ok(None);
        };
        let child = std::process::Command::new(&exe)
            .arg("kn-study")
            .arg("--config")
            .arg(&config_path)
            .arg("--out")
            .arg(&dir)
            .arg("--override")
            .arg(format!("kn_study.budgets=[[{k}, {n}]]"))
            .spawn()?;
        Ok(Some((child, k * 10000 + n)))
    };
    for _ in 0..jobs {
        if let Some(c) = spawn_next(&mut queue)? {
            children.push(c);
        }
    }
    while let Some((mut child, _)) = children.pop() {
        let status = child.wait()?;
        if !status.success() {
            return Err(Error::state(format!("worker failed with {status}")));
        }
        if let Some(c) = spawn_next(&mut queue)? {
            children.push(c);
        }
    }
    // Aggregate the per-budget reports.
    let mut manifest = RunManifest::new("kn-study", config_text, cfg.seed);
    let mut f = std::fs::File::create(out_dir.join("kn_report.csv"))?;
    writeln!(f, "outer_iters,inner_steps,final_objective,seconds")?;
    for (k, n, dir) in &pending {
        let text = std::fs::read_to_string(dir.join("kn_report.csv"))?;
        for line in text.lines().skip(1) {
            writeln!(f, "{line}")?;
        }
        manifest.add_note(&format!("job_k{k}_n{n}"), dir.display());
    }
    drop(f);
    manifest.add_artifact(out_dir, "kn_report.csv")?;
    manifest.write(out_dir)?;
    Ok(out_dir.clone())
}
