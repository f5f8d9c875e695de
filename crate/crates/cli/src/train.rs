use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use delta_core::model::init_params;
use delta_core::train::{train_step, Adam, FaultInjection, LossRecord, Stage, StagePlan};
use delta_core::ModelError;
use delta_deltagen::dataset::{verify_alignment, Dataset};
use numcore::rng::Rng;
use numcore::SeedStream;
use serde_json::json;

use crate::config::RunConfig;
use crate::data::{build_vocab, load_train_scenes};
use crate::error::{CliError, Result};
use crate::manifest::{create_dir, sha256_file, write_json, RunManifest};

pub const LOSS_FILE: &str = "loss.jsonl";
pub const MODEL_FILE: &str = "model.json";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const FINAL_CKPT: &str = "ckpt/final";

/// Dataset settings a model must agree with.
pub fn check_compatible(cfg: &RunConfig, ds: &Dataset) -> Result<()> {
    let s = &ds.manifest.config.scene;
    let m = &cfg.model;
    if s.size != m.image_size || s.phases != m.phases || s.classes != m.n_categories {
        return Err(CliError::Contract(format!(
            "dataset has {}px scenes, K={}, {} classes but the model expects {}px, K={}, {} categories",
            s.size, s.phases, s.classes, m.image_size, m.phases, m.n_categories
        )));
    }
    Ok(())
}

/// Up to `n` distinct indices below `len`, ascending.
fn pick(rng: &mut impl Rng, len: usize, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..len).collect();
    let n = n.min(len);
    for i in 0..n {
        let j = rng.gen_range(i..len);
        idx.swap(i, j);
    }
    let mut out = idx[..n].to_vec();
    out.sort_unstable();
    out
}

pub fn stage_plans(cfg: &RunConfig) -> Vec<StagePlan> {
    let t = &cfg.train;
    let mut plans = Vec::new();
    if t.warmup_steps > 0 {
        plans.push(StagePlan::warmup(t.warmup_steps, t.warmup_lr, cfg.seed));
    }
    plans.push(StagePlan::pretrain(t.stage1_steps, t.stage1_lr, cfg.seed));
    plans.push(StagePlan::instruction(t.stage2_steps, t.stage2_lr, cfg.seed));
    plans
}

/// Warm-up, stage 1 and stage 2 on the training split of `data`.
///
/// Writes `model.json`, `vocab.txt`, `loss.jsonl`, a checkpoint per stage
/// under `ckpt/` (the last one as `ckpt/final`) and the run manifest.
pub fn cmd_train(cfg: &RunConfig, data: &Path, out: &Path) -> Result<Vec<LossRecord>> {
    let report = verify_alignment(data)?;
    if !report.ok() {
        return Err(CliError::Contract(format!(
            "dataset {} fails verification with {} violations",
            data.display(),
            report.violations.len()
        )));
    }
    let ds = Dataset::open(data)?;
    check_compatible(cfg, &ds)?;
    let vocab = build_vocab(&ds);
    if vocab.len() > cfg.model.vocab_size {
        return Err(CliError::Contract(format!(
            "vocabulary of {} tokens exceeds model capacity {}",
            vocab.len(),
            cfg.model.vocab_size
        )));
    }
    create_dir(out)?;
    let vp = out.join(VOCAB_FILE);
    vocab.save(&vp)?;
    write_json(&out.join(MODEL_FILE), &cfg.model)?;

    let scenes = load_train_scenes(&ds, &vocab)?;
    let seeds = SeedStream::new(cfg.seed);
    let mut store = init_params(&cfg.model, seeds.split("init"))?;
    let fault = FaultInjection {
        unfreeze: cfg.train.fault_unfreeze.clone(),
    };
    let lp = out.join(LOSS_FILE);
    let mut log = BufWriter::new(File::create(&lp).map_err(|e| CliError::io(&lp, e))?);
    let mut records = Vec::new();
    let mut step = 0;
    let plans = stage_plans(cfg);
    for (pi, plan) in plans.iter().enumerate() {
        let with_images = plan.stage != Stage::Warmup;
        let mut adam = Adam::new(plan.lr);
        let mut rng = seeds.split(&format!("stage{}", plan.stage.number())).rng();
        for i in 0..plan.steps {
            let scene = &scenes[rng.gen_range(0..scenes.len())];
            let chosen = pick(&mut rng, scene.samples.len(), cfg.train.samples_per_step);
            let batch = scene.batch(&chosen, with_images);
            let rec = train_step(&mut store, &mut adam, &batch, plan, &cfg.model, &cfg.train.weights, step, &fault)
                .map_err(|e| match e {
                    ModelError::Freezing(m) => CliError::Contract(format!("freezing violation: {m}")),
                    e => CliError::from(e),
                })?;
            let line = serde_json::to_string(&rec).expect("record serializes");
            writeln!(log, "{line}").map_err(|e| CliError::io(&lp, e))?;
            if (i + 1) % 100 == 0 || i + 1 == plan.steps {
                eprintln!("stage {} step {}/{} total {:.4}", plan.stage.number(), i + 1, plan.steps, rec.total);
            }
            records.push(rec);
            step += 1;
        }
        let name = if pi + 1 == plans.len() {
            FINAL_CKPT.to_string()
        } else {
            format!("ckpt/stage{}", plan.stage.number())
        };
        store.save(
            &out.join(&name),
            json!({"stage": plan.stage.number(), "steps": step, "label": cfg.label()}),
        )?;
    }
    log.flush().map_err(|e| CliError::io(&lp, e))?;
    drop(log);

    let mut m = RunManifest::new("train", cfg.seed, cfg);
    m.inputs.insert("dataset_manifest".into(), sha256_file(&data.join("manifest.json"))?);
    m.inputs.insert("dataset_qa".into(), sha256_file(&data.join("qa.jsonl"))?);
    m.finish(out)?;
    Ok(records)
}
