use std::path::Path;

use delta_deltagen::dataset::{generate_dataset, verify_alignment, Report};
use delta_deltagen::external::HttpRewriter;

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::manifest::{create_dir, write_json, RunManifest};

pub const VERIFY_FILE: &str = "verify.json";

/// Generates the dataset into `out`, verifies it and writes the run manifest.
/// Verification failures are reported after everything is written.
pub fn cmd_gen(cfg: &RunConfig, out: &Path) -> Result<(RunManifest, Report)> {
    create_dir(out)?;
    let rewriter = cfg.rewrite_endpoint.as_deref().map(HttpRewriter::from_env);
    let m = generate_dataset(
        &cfg.dataset,
        out,
        rewriter.as_ref().map(|r| r as &dyn delta_deltagen::external::Rewriter),
    )?;
    let report = verify_alignment(out)?;
    write_json(&out.join(VERIFY_FILE), &report)?;
    let manifest = RunManifest::new("gen", cfg.seed, cfg).finish(out)?;
    eprintln!(
        "generated {} scenes, {} samples, {} masks; {} violations",
        m.scenes.len(),
        m.samples,
        m.masks,
        report.violations.len()
    );
    if !report.ok() {
        return Err(CliError::Contract(format!(
            "dataset failed verification with {} violations (see {VERIFY_FILE})",
            report.violations.len()
        )));
    }
    Ok((manifest, report))
}
