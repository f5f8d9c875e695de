use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use delta_core::params::GROUPS;
use delta_core::train::LossRecord;
use delta_deltagen::dataset::{verify_alignment, Dataset};
use delta_metrics::EvalReport;
use serde_json::{json, Value};

use crate::error::{CliError, Result};
use crate::infer::LoadedRun;
use crate::train::{LOSS_FILE, MODEL_FILE};

fn counts<'a>(keys: impl Iterator<Item = String> + 'a) -> BTreeMap<String, usize> {
    let mut m = BTreeMap::new();
    for k in keys {
        *m.entry(k).or_default() += 1;
    }
    m
}

fn name(v: impl serde::Serialize) -> String {
    match serde_json::to_value(v) {
        Ok(Value::String(s)) => s,
        Ok(v) => v.to_string(),
        Err(_) => String::new(),
    }
}

fn inspect_dataset(p: &Path) -> Result<Value> {
    let ds = Dataset::open(p)?;
    let report = verify_alignment(p)?;
    let s = &ds.samples;
    Ok(json!({
        "kind": "dataset",
        "format": ds.manifest.format,
        "seed": ds.manifest.seed,
        "phases": ds.phases(),
        "scenes": ds.manifest.scenes.len(),
        "test_scenes": ds.manifest.test_scenes.len(),
        "samples": s.len(),
        "masks": ds.manifest.masks,
        "by_task": counts(s.iter().map(|x| name(x.task))),
        "by_scope": counts(s.iter().map(|x| name(x.scope))),
        "by_format": counts(s.iter().map(|x| name(x.format))),
        "by_split": counts(s.iter().map(|x| x.split.clone())),
        "verification": {"ok": report.ok(), "violations": report.violations.len()},
    }))
}

fn inspect_run(p: &Path) -> Result<Value> {
    let run = LoadedRun::open(p)?;
    let groups: BTreeMap<&str, usize> = GROUPS
        .iter()
        .map(|g| {
            let n = run.store.subset(&[g]).iter().map(|(_, t)| t.data().len()).sum();
            (*g, n)
        })
        .collect();
    let lp = p.join(LOSS_FILE);
    let text = fs::read_to_string(&lp).map_err(|e| CliError::io(&lp, e))?;
    let mut last: BTreeMap<u8, LossRecord> = BTreeMap::new();
    let mut steps = 0;
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let r: LossRecord = serde_json::from_str(line).map_err(|e| CliError::Contract(format!("{}: {e}", lp.display())))?;
        steps += 1;
        last.insert(r.stage, r);
    }
    Ok(json!({
        "kind": "run",
        "label": crate::config::mechanism_label(&run.model),
        "model": run.model,
        "vocab": run.vocab.len(),
        "parameters_by_group": groups,
        "steps": steps,
        "last_loss_by_stage": last,
    }))
}

/// Summary of a dataset directory, a run directory or an evaluation report.
pub fn cmd_inspect(p: &Path) -> Result<Value> {
    if p.is_dir() {
        if p.join("qa.jsonl").is_file() {
            return inspect_dataset(p);
        }
        if p.join(MODEL_FILE).is_file() {
            return inspect_run(p);
        }
        return Err(CliError::Contract(format!("{} is neither a dataset nor a run", p.display())));
    }
    if !p.exists() {
        return Err(CliError::Io(format!("{}: not found", p.display())));
    }
    let r = EvalReport::read(p)?;
    Ok(json!({
        "kind": "report",
        "label": r.label,
        "scd": r.scd,
        "choice": r.choice,
        "cider": r.cider.map(|c| c.mean),
        "records": r.records.len(),
    }))
}
