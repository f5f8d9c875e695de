use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use delta_core::changeseg::PromptGeometry;
use delta_core::lm::Vocab;
use delta_core::model::{infer, Inference};
use delta_core::{ModelConfig, ParamStore};
use delta_deltagen::dataset::mask_image;
use delta_deltagen::grid::Mask;
use numcore::Tensor;
use serde::{Deserialize, Serialize};

use crate::data::image_tensor;
use crate::error::{CliError, Result};
use crate::manifest::{create_dir, read_json, sha256_file, write_json, RunManifest};
use crate::train::{FINAL_CKPT, MODEL_FILE, VOCAB_FILE};

pub const RESULT_FILE: &str = "answer.json";

/// A trained run loaded from its directory.
pub struct LoadedRun {
    pub dir: PathBuf,
    pub model: ModelConfig,
    pub vocab: Vocab,
    pub store: ParamStore,
}

impl LoadedRun {
    pub fn open(dir: &Path) -> Result<LoadedRun> {
        let model: ModelConfig = read_json(&dir.join(MODEL_FILE))?;
        let vocab = Vocab::load(&dir.join(VOCAB_FILE))?;
        let ckpt = dir.join(FINAL_CKPT);
        if !ckpt.join("manifest.json").is_file() {
            return Err(CliError::Io(format!("{}: no checkpoint", ckpt.display())));
        }
        let (store, _) = ParamStore::load(&ckpt)?;
        Ok(LoadedRun {
            dir: dir.to_path_buf(),
            model,
            vocab,
            store,
        })
    }

    pub fn ask(&self, images: &[Tensor], question: &str, prompt: &PromptGeometry, max_new: usize) -> Result<Inference> {
        prompt.validate(self.model.image_size)?;
        let ids = self.vocab.encode(question);
        Ok(infer(&self.store, &self.model, images, &ids, prompt, max_new)?)
    }

    pub fn text(&self, inf: &Inference) -> String {
        self.vocab.decode(&inf.tokens)
    }
}

/// `box:x1,y1,x2,y2`, `point:x,y` or `none`.
pub fn parse_prompt(s: &str) -> Result<PromptGeometry> {
    let bad = || CliError::Contract(format!("bad prompt {s:?}; expected box:x1,y1,x2,y2 or point:x,y"));
    if s == "none" {
        return Ok(PromptGeometry::None);
    }
    let (kind, rest) = s.split_once(':').ok_or_else(bad)?;
    let v: Vec<usize> = rest
        .split(',')
        .map(|t| t.trim().parse().map_err(|_| bad()))
        .collect::<Result<_>>()?;
    match (kind, v.as_slice()) {
        ("box", &[x1, y1, x2, y2]) => Ok(PromptGeometry::Box { x1, y1, x2, y2 }),
        ("point", &[x, y]) => Ok(PromptGeometry::Point { x, y }),
        _ => Err(bad()),
    }
}

pub fn load_image(p: &Path) -> Result<Tensor> {
    let img = image::open(p).map_err(|e| match e {
        image::ImageError::IoError(e) => CliError::io(p, e),
        e => CliError::Contract(format!("{}: {e}", p.display())),
    })?;
    Ok(image_tensor(&img.to_rgb8()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskArtifact {
    pub pair: (usize, usize),
    pub file: String,
    pub pixels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceResult {
    pub question: String,
    pub answer: String,
    pub tokens: Vec<String>,
    pub truncated: bool,
    pub masks: Vec<MaskArtifact>,
    /// Seconds per component.
    pub timing: BTreeMap<String, f64>,
    pub total_seconds: f64,
}

impl InferenceResult {
    /// Share of the total spent in change-enhanced attention and the trainable segmentation branch.
    pub fn cea_and_changeseg_share(&self) -> f64 {
        let part = self.timing.get("cea").copied().unwrap_or(0.0) + self.timing.get("changeseg_train").copied().unwrap_or(0.0);
        part / self.total_seconds
    }
}

/// Runs the full pipeline for one question and writes `answer.json` plus one
/// binary PNG per `[SEG]`.
pub fn cmd_infer(
    run_dir: &Path,
    images: &[PathBuf],
    question: &str,
    prompt: &PromptGeometry,
    max_new: usize,
    out: &Path,
) -> Result<InferenceResult> {
    let run = LoadedRun::open(run_dir)?;
    if images.len() != run.model.phases {
        return Err(CliError::Contract(format!(
            "run was trained for K={} images, got {}",
            run.model.phases,
            images.len()
        )));
    }
    let tensors = images.iter().map(|p| load_image(p)).collect::<Result<Vec<_>>>()?;
    let start = Instant::now();
    let inf = run.ask(&tensors, question, prompt, max_new)?;
    let total_seconds = start.elapsed().as_secs_f64();
    create_dir(out)?;
    let side = run.model.image_size;
    let mut masks = Vec::new();
    for (i, s) in inf.segs.iter().enumerate() {
        let file = format!("mask_{i:02}_t{}t{}.png", s.pair.0, s.pair.1);
        let m = Mask {
            width: side,
            height: side,
            cells: s.mask.clone(),
        };
        let p = out.join(&file);
        mask_image(&m).save(&p).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
        masks.push(MaskArtifact {
            pair: s.pair,
            file,
            pixels: m.count(),
        });
    }
    let result = InferenceResult {
        question: question.to_string(),
        answer: run.text(&inf),
        tokens: inf.tokens.iter().map(|&t| run.vocab.token(t).to_string()).collect(),
        truncated: inf.truncated,
        masks,
        timing: inf.timing.clone(),
        total_seconds,
    };
    write_json(&out.join(RESULT_FILE), &result)?;
    let mut m = RunManifest::new("infer", 0, &serde_json::json!({
        "run": run_dir.display().to_string(),
        "question": question,
        "prompt": prompt,
        "max_new": max_new,
    }));
    for (i, p) in images.iter().enumerate() {
        m.inputs.insert(format!("image_t{}", i + 1), sha256_file(p)?);
    }
    m.inputs.insert("checkpoint".into(), sha256_file(&run_dir.join(FINAL_CKPT).join("params.bin"))?);
    m.finish(out)?;
    Ok(result)
}
