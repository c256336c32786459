//! `pretrain`: train every declared prior and emit checkpoints plus
//! diagnostics.

use std::path::PathBuf;

use flowmerge_core::error::Result;

use crate::commands::{build_priors, ensure_out_dir, prior_diagnostics};
use crate::config::ExperimentConfig;
use crate::manifest::RunManifest;

pub fn run(
    cfg: &ExperimentConfig,
    config_text: &str,
    out: &Option<PathBuf>,
) -> Result<PathBuf> {
    let out_dir = ensure_out_dir(out, &format!("{}-pretrain", cfg.name))?;
    let mut manifest = RunManifest::new("pretrain", config_text, cfg.seed);
    let bundles = build_priors(cfg, &out_dir, &mut manifest)?;
    prior_diagnostics(cfg, &bundles, &out_dir, &mut manifest)?;
    manifest.add_note("priors", bundles.len());
    manifest.write(&out_dir)?;
    println!("pretrained {} priors -> {}", bundles.len(), out_dir.display());
    Ok(out_dir)
}
