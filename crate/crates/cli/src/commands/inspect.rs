//! `inspect`: print checkpoint metadata.

use std::path::Path;

use flowmerge_core::checkpoint;
use flowmerge_core::error::Result;

pub fn run(path: &Path) -> Result<()> {
    let meta = checkpoint::inspect(path)?;
    println!("kind: {}", meta.kind);
    println!("format_version: {}", meta.version);
    println!("widths: {:?}", meta.widths);
    println!("activation_tag: {}", meta.activation);
    if let Some(dim) = meta.dim {
        println!("dim: {dim}");
    }
    if let Some(s) = meta.schedule {
        println!("schedule_tag: {s}");
    }
    if let Some(k) = meta.critic_kind {
        println!("critic_kind_tag: {k}");
    }
    println!("param_count: {}", meta.param_count);
    Ok(())
}
