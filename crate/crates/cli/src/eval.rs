use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use delta_core::changeseg::PromptGeometry;
use delta_core::lm::tokenize;
use delta_deltagen::dataset::Dataset;
use delta_deltagen::qa::{self, QASample, Scope};
use delta_deltagen::scene::class_name;
use delta_metrics::{choice_accuracy, cider, AnswerFormat, Corpus, EvalReport, QAEvalRecord, ScdConfusion};
use numcore::Tensor;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{mechanism_label, EvalConfig};
use crate::data::{change_map, scene_images};
use crate::error::{CliError, Result};
use crate::infer::LoadedRun;
use crate::manifest::{create_dir, sha256_file, write_json, RunManifest};
use crate::train::{check_compatible, FINAL_CKPT};

pub const SUMMARY_FILE: &str = "summary.json";

/// A model's reply: answer text and per-`[SEG]` mask logits.
pub struct Reply {
    pub text: String,
    pub segs: Vec<((usize, usize), Vec<f64>)>,
}

pub trait Answerer {
    fn reply(&mut self, sample: &QASample, images: &[Tensor]) -> Result<Reply>;
}

pub struct ModelAnswerer<'a> {
    pub run: &'a LoadedRun,
    pub max_new: usize,
}

impl Answerer for ModelAnswerer<'_> {
    fn reply(&mut self, sample: &QASample, images: &[Tensor]) -> Result<Reply> {
        let inf = self.run.ask(images, &sample.full_question(), &sample.prompt, self.max_new)?;
        Ok(Reply {
            text: self.run.text(&inf),
            segs: inf.segs.into_iter().map(|s| (s.pair, s.logits)).collect(),
        })
    }
}

/// Answers with the reference answer and the reference masks (logit +1
/// inside, -1 outside).
pub struct OracleAnswerer<'a> {
    pub ds: &'a Dataset,
}

impl Answerer for OracleAnswerer<'_> {
    fn reply(&mut self, sample: &QASample, _: &[Tensor]) -> Result<Reply> {
        let segs = qa::seg_targets(sample, |r| self.ds.load_mask(r))?
            .into_iter()
            .map(|(pair, m)| (pair, m.cells.iter().map(|&v| if v { 1.0 } else { -1.0 }).collect()))
            .collect();
        Ok(Reply {
            text: sample.answer.clone(),
            segs,
        })
    }
}

fn answer_format(f: qa::Format) -> AnswerFormat {
    match f {
        qa::Format::SingleChoice => AnswerFormat::SingleChoice,
        qa::Format::MultiChoice => AnswerFormat::MultiChoice,
        qa::Format::Open => AnswerFormat::Open,
    }
}

fn task_name(t: qa::Task) -> String {
    serde_json::to_value(t)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

/// Holistic "segment the areas that changed into X" questions of a scene and pair.
fn class_questions<'a>(samples: &[&'a QASample], pair: (usize, usize)) -> Vec<&'a QASample> {
    samples
        .iter()
        .copied()
        .filter(|s| s.target_class.is_some() && s.scope == Scope::H && s.stage_pair == pair && s.prompt == PromptGeometry::None)
        .collect()
}

/// Predicted change map: each pixel takes the class whose `[SEG]` logit is
/// positive and highest; 0 where no mask claims it.
pub fn predict_change_map(
    answerer: &mut dyn Answerer,
    questions: &[&QASample],
    images: &[Tensor],
    pair: (usize, usize),
    pixels: usize,
) -> Result<Vec<u8>> {
    let mut pred = vec![0u8; pixels];
    let mut best = vec![0.0f64; pixels];
    for q in questions {
        let class = q.target_class.expect("class question");
        let reply = answerer.reply(q, images)?;
        for (_, logits) in reply.segs.iter().filter(|(p, _)| *p == pair) {
            for (i, &l) in logits.iter().enumerate() {
                if l > best[i] {
                    best[i] = l;
                    pred[i] = class;
                }
            }
        }
    }
    Ok(pred)
}

/// Answer text in token space: one space between tokens.
pub fn normalize(text: &str) -> String {
    tokenize(text).join(" ")
}

/// Evenly spaced subset of `n` items.
fn spaced<T: Copy>(items: &[T], n: usize) -> Vec<T> {
    if n >= items.len() {
        return items.to_vec();
    }
    (0..n).map(|i| items[i * items.len() / n]).collect()
}

/// SCD scores over every adjacent pair of the held-out scenes plus QA
/// scores over a spaced subset of the other held-out questions.
pub fn evaluate(
    answerer: &mut dyn Answerer,
    ds: &Dataset,
    cfg: &EvalConfig,
    label: &str,
    settings: serde_json::Value,
) -> Result<EvalReport> {
    let test: Vec<&QASample> = ds.samples.iter().filter(|s| s.split == "test").collect();
    if test.is_empty() {
        return Err(CliError::Contract("dataset has no held-out test split".into()));
    }
    let scenes: BTreeSet<&str> = test.iter().map(|s| s.scene_id.as_str()).collect();
    let classes = ds.manifest.config.scene.classes;
    let mut confusion = ScdConfusion::new(classes + 1);
    let mut images_by_scene: BTreeMap<&str, Vec<Tensor>> = BTreeMap::new();
    for &scene in &scenes {
        let images = scene_images(ds, scene)?;
        let labels = ds.load_labels(scene)?;
        let samples: Vec<&QASample> = test.iter().copied().filter(|s| s.scene_id == scene).collect();
        for k in 1..labels.len() {
            let pair = (k, k + 1);
            let gt = change_map(&labels, pair);
            let questions = class_questions(&samples, pair);
            if questions.len() != classes {
                return Err(CliError::Contract(format!(
                    "{scene}: {} class questions for pair {pair:?}, expected {classes}",
                    questions.len()
                )));
            }
            let pred = predict_change_map(answerer, &questions, &images, pair, gt.len())?;
            confusion.add(&pred, &gt)?;
        }
        images_by_scene.insert(scene, images);
    }
    let scd = delta_metrics::scd_scores(&confusion)?;
    let mut names = vec!["unchanged".to_string()];
    names.extend((1..=classes as u8).map(|c| format!("changed into {}", class_name(c))));
    let name_refs: Vec<&str> = names.iter().map(String::as_str).collect();
    let mut report = EvalReport::new(label, settings, confusion, scd, &name_refs);

    let others: Vec<&QASample> = test.iter().copied().filter(|s| s.target_class.is_none()).collect();
    let chosen = spaced(&others, cfg.qa_samples);
    let mut records = Vec::with_capacity(chosen.len());
    for s in chosen {
        let reply = answerer.reply(s, &images_by_scene[s.scene_id.as_str()])?;
        records.push(QAEvalRecord {
            id: s.id.clone(),
            task: task_name(s.task),
            format: answer_format(s.format),
            prediction: normalize(&reply.text),
            references: vec![normalize(&s.answer)],
            score: 0.0,
        });
    }
    if records.iter().any(|r| r.format != AnswerFormat::Open) {
        report.choice = Some(choice_accuracy(&mut records)?);
    }
    let open: Vec<usize> = (0..records.len()).filter(|&i| records[i].format == AnswerFormat::Open).collect();
    if !open.is_empty() {
        let preds: Vec<String> = open.iter().map(|&i| records[i].prediction.clone()).collect();
        let refs: Vec<Vec<String>> = open.iter().map(|&i| records[i].references.clone()).collect();
        let corpus = Corpus::from_references(&refs)?;
        let c = cider(&preds, &refs, &corpus)?;
        for (&i, &v) in open.iter().zip(&c.per_sample) {
            records[i].score = v;
        }
        report.cider = Some(c);
    }
    report.records = records;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub label: String,
    pub run: String,
    pub report: String,
    pub oa: f64,
    pub miou: f64,
    pub sek: f64,
    pub f_scd: f64,
    pub single_choice: Option<f64>,
    pub multi_choice: Option<f64>,
    pub cider: Option<f64>,
}

/// Evaluates every run on the held-out split of `data`; one report per run
/// (named after its mechanism setting) plus `summary.json`.
pub fn cmd_eval(cfg: &EvalConfig, seed: u64, runs: &[PathBuf], data: &Path, out: &Path) -> Result<Vec<SummaryRow>> {
    if runs.is_empty() {
        return Err(CliError::Contract("eval needs at least one --run".into()));
    }
    let ds = Dataset::open(data)?;
    create_dir(out)?;
    let mut rows = Vec::new();
    let mut seen = BTreeSet::new();
    let mut manifest = RunManifest::new("eval", seed, &json!({"eval": cfg, "runs": runs, "data": data}));
    manifest.inputs.insert("dataset_qa".into(), sha256_file(&data.join("qa.jsonl"))?);
    for dir in runs {
        let run = LoadedRun::open(dir)?;
        let label = mechanism_label(&run.model);
        if !seen.insert(label.clone()) {
            return Err(CliError::Contract(format!("two runs share the setting {label}")));
        }
        let rc = crate::config::RunConfig {
            model: run.model.clone(),
            ..Default::default()
        };
        check_compatible(&rc, &ds)?;
        let ckpt_hash = sha256_file(&dir.join(FINAL_CKPT).join("params.bin"))?;
        manifest.inputs.insert(format!("checkpoint_{label}"), ckpt_hash.clone());
        let settings = json!({"mechanisms": run.model.mechanisms, "checkpoint_sha256": ckpt_hash});
        let mut ans = ModelAnswerer {
            run: &run,
            max_new: cfg.max_new,
        };
        let report = evaluate(&mut ans, &ds, cfg, &label, settings)?;
        let stem = format!("report_{label}");
        report.write(out, &stem)?;
        eprintln!("{label}: miou {:.4} oa {:.4} sek {:.4} f_scd {:.4}", report.scd.miou, report.scd.oa, report.scd.sek, report.scd.f_scd);
        rows.push(SummaryRow {
            label,
            run: dir.display().to_string(),
            report: format!("{stem}.json"),
            oa: report.scd.oa,
            miou: report.scd.miou,
            sek: report.scd.sek,
            f_scd: report.scd.f_scd,
            single_choice: report.choice.as_ref().and_then(|c| c.single),
            multi_choice: report.choice.as_ref().and_then(|c| c.multi),
            cider: report.cider.as_ref().map(|c| c.mean),
        });
    }
    write_json(&out.join(SUMMARY_FILE), &rows)?;
    manifest.finish(out)?;
    Ok(rows)
}
