//! Dataset directory layout, generation driver, loading and alignment
//! verification.
//!
//! ```text
//! manifest.json
//! qa.jsonl
//! scenes/<id>/t1.png .. tK.png           rendered RGB
//! scenes/<id>/labels_t1.png ..           grayscale, value = class id
//! masks/<id>/<from>_<to>_t<a>t<b>.png    binary, 255 = member
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use delta_core::changeseg::PromptGeometry;
use image::{GrayImage, Luma, RgbImage};
use numcore::SeedStream;
use serde::{Deserialize, Serialize};

use crate::error::{GenError, Result};
use crate::external::Rewriter;
use crate::grid::{LabelGrid, Mask};
use crate::qa::{
    area_stats, compose_tritemporal, gen_qa, parse_quantity, pair_name, percent, prompt_region,
    quantity_answer, seg_targets, trend_answer, Format, MaskRef, MaskRule, PairFacts, QASample,
    Scope, Task, NO_CHANGE_REGION,
};
use crate::scene::{synth_scene, SceneConfig, TemporalScene};
use crate::transitions::{extract_transitions, Transitions};
use crate::trend::TrendTable;

pub const FORMAT: &str = "delta-qa/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub scene: SceneConfig,
    pub scenes: usize,
    pub seed: u64,
    /// Share of scenes held out for evaluation, spread evenly over ids.
    pub test_fraction: f64,
    /// Prompt-scope prompts per stage pair.
    pub max_prompts: usize,
    pub trend_table: TrendTable,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            scene: SceneConfig::default(),
            scenes: 200,
            seed: 0,
            test_fraction: 0.2,
            max_prompts: 3,
            trend_table: TrendTable::default(),
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        if self.scenes == 0 {
            return Err(GenError::Input("at least one scene is required".into()));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(GenError::Input(format!("test fraction {} outside [0, 1)", self.test_fraction)));
        }
        if !self.trend_table.covers(self.scene.classes) {
            return Err(GenError::Input("trend table does not cover every class pair".into()));
        }
        Ok(())
    }

    pub fn is_test(&self, index: usize) -> bool {
        let f = self.test_fraction;
        ((index + 1) as f64 * f).floor() > (index as f64 * f).floor()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub config: DatasetConfig,
    pub seed: u64,
    pub scenes: Vec<String>,
    pub test_scenes: Vec<String>,
    pub samples: usize,
    pub masks: usize,
}

pub fn scene_id(index: usize) -> String {
    format!("s{index:04}")
}

fn write_png_rgb(path: &Path, img: &RgbImage) -> Result<()> {
    img.save(path).map_err(|source| GenError::Image {
        path: path.display().to_string(),
        source,
    })
}

fn write_png_gray(path: &Path, img: &GrayImage) -> Result<()> {
    img.save(path).map_err(|source| GenError::Image {
        path: path.display().to_string(),
        source,
    })
}

pub fn label_image(g: &LabelGrid) -> GrayImage {
    GrayImage::from_fn(g.width as u32, g.height as u32, |x, y| Luma([g.get(x as usize, y as usize)]))
}

pub fn mask_image(m: &Mask) -> GrayImage {
    GrayImage::from_fn(m.width as u32, m.height as u32, |x, y| {
        Luma([if m.get(x as usize, y as usize) { 255 } else { 0 }])
    })
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| GenError::io(p, e))
}

/// Synthesises a scene, retrying with derived seeds when a budget is missed.
pub fn scene_for(cfg: &DatasetConfig, index: usize) -> Result<TemporalScene> {
    let base = SeedStream::new(cfg.seed).split_index("scene", index as u64);
    let mut last = None;
    for attempt in 0..8 {
        let seed = base.split_index("attempt", attempt).seed();
        match synth_scene(&scene_id(index), seed, &cfg.scene) {
            Ok(s) => return Ok(s),
            Err(e @ GenError::Generation(_)) => last = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last.expect("attempted"))
}

/// Transitions between consecutive phases, keyed by stage pair.
pub fn scene_transitions(scene: &TemporalScene) -> Result<Vec<((usize, usize), Transitions)>> {
    let seeds = SeedStream::new(scene.seed).split("points");
    (1..scene.phases())
        .map(|k| {
            let t = extract_transitions(&scene.grids[k - 1], &scene.grids[k], seeds.split_index("pair", k as u64))?;
            Ok(((k, k + 1), t))
        })
        .collect()
}

/// All QA samples for one scene, ids assigned in generation order.
pub fn scene_samples(cfg: &DatasetConfig, scene: &TemporalScene, stages: &[((usize, usize), Transitions)]) -> Result<Vec<QASample>> {
    let seeds = SeedStream::new(scene.seed).split("qa");
    let mut out = Vec::new();
    for (pair, t) in stages {
        let facts = PairFacts {
            scene_id: &scene.id,
            pair: *pair,
            transitions: t,
            classes: cfg.scene.classes,
            table: &cfg.trend_table,
        };
        for scope in [Scope::H, Scope::P] {
            for task in Task::ALL {
                out.extend(gen_qa(facts, scope, task, cfg.max_prompts, seeds)?);
            }
        }
    }
    if scene.phases() == 3 {
        let ts: Vec<Transitions> = stages.iter().map(|(_, t)| t.clone()).collect();
        out.extend(compose_tritemporal(&scene.id, &ts)?.1);
    }
    for (i, s) in out.iter_mut().enumerate() {
        s.id = format!("{}-{i:03}", scene.id);
    }
    Ok(out)
}

fn clear(out: &Path) -> Result<()> {
    for d in ["scenes", "masks"] {
        let p = out.join(d);
        if p.exists() {
            fs::remove_dir_all(&p).map_err(|e| GenError::io(&p, e))?;
        }
    }
    Ok(())
}

/// Generates the whole dataset under `out`. A rewriter, when given, may
/// reword question text only.
pub fn generate_dataset(cfg: &DatasetConfig, out: &Path, rewriter: Option<&dyn Rewriter>) -> Result<Manifest> {
    cfg.validate()?;
    create_dir(out)?;
    clear(out)?;
    let mut all = Vec::new();
    let mut masks = 0;
    let (mut scenes, mut test_scenes) = (Vec::new(), Vec::new());
    for i in 0..cfg.scenes {
        let scene = scene_for(cfg, i)?;
        let dir = out.join("scenes").join(&scene.id);
        create_dir(&dir)?;
        for (k, (img, g)) in scene.images.iter().zip(&scene.grids).enumerate() {
            write_png_rgb(&dir.join(format!("t{}.png", k + 1)), img)?;
            write_png_gray(&dir.join(format!("labels_t{}.png", k + 1)), &label_image(g))?;
        }
        let stages = scene_transitions(&scene)?;
        let mdir = out.join("masks").join(&scene.id);
        create_dir(&mdir)?;
        for (pair, t) in &stages {
            for r in &t.records {
                let name = format!("{}_{}_t{}t{}.png", r.from, r.to, pair.0, pair.1);
                write_png_gray(&mdir.join(name), &mask_image(&r.mask))?;
                masks += 1;
            }
        }
        let split = if cfg.is_test(i) { "test" } else { "train" };
        let mut samples = scene_samples(cfg, &scene, &stages)?;
        for s in &mut samples {
            s.split = split.to_string();
            if let Some(rw) = rewriter {
                let facts = serde_json::json!({
                    "task": s.task, "scope": s.scope, "answer": s.answer, "options": s.options,
                });
                s.question = rw.rewrite(&s.question, &facts)?;
            }
        }
        all.extend(samples);
        if split == "test" {
            test_scenes.push(scene.id.clone());
        }
        scenes.push(scene.id);
    }
    let qa_path = out.join("qa.jsonl");
    let f = fs::File::create(&qa_path).map_err(|e| GenError::io(&qa_path, e))?;
    let mut w = BufWriter::new(f);
    for s in &all {
        let line = serde_json::to_string(s).expect("serializable sample");
        writeln!(w, "{line}").map_err(|e| GenError::io(&qa_path, e))?;
    }
    w.flush().map_err(|e| GenError::io(&qa_path, e))?;
    let manifest = Manifest {
        format: FORMAT.into(),
        config: cfg.clone(),
        seed: cfg.seed,
        scenes,
        test_scenes,
        samples: all.len(),
        masks,
    };
    let mp = out.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("serializable manifest");
    fs::write(&mp, text + "\n").map_err(|e| GenError::io(&mp, e))?;
    Ok(manifest)
}

/// A dataset directory opened for reading.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub samples: Vec<QASample>,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Dataset> {
        let mp = root.join("manifest.json");
        let text = fs::read_to_string(&mp).map_err(|e| GenError::io(&mp, e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| GenError::Format {
            path: mp.display().to_string(),
            detail: e.to_string(),
        })?;
        let qp = root.join("qa.jsonl");
        let f = fs::File::open(&qp).map_err(|e| GenError::io(&qp, e))?;
        let mut samples = Vec::new();
        for (n, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| GenError::io(&qp, e))?;
            if line.trim().is_empty() {
                continue;
            }
            samples.push(serde_json::from_str(&line).map_err(|e| GenError::Format {
                path: qp.display().to_string(),
                detail: format!("line {}: {e}", n + 1),
            })?);
        }
        Ok(Dataset {
            root: root.to_path_buf(),
            manifest,
            samples,
        })
    }

    pub fn phases(&self) -> usize {
        self.manifest.config.scene.phases
    }

    pub fn image_path(&self, scene: &str, phase: usize) -> PathBuf {
        self.root.join("scenes").join(scene).join(format!("t{phase}.png"))
    }

    pub fn load_images(&self, scene: &str) -> Result<Vec<RgbImage>> {
        (1..=self.phases())
            .map(|k| {
                let p = self.image_path(scene, k);
                image::open(&p)
                    .map(|i| i.to_rgb8())
                    .map_err(|source| GenError::Image {
                        path: p.display().to_string(),
                        source,
                    })
            })
            .collect()
    }

    pub fn load_labels(&self, scene: &str) -> Result<Vec<LabelGrid>> {
        (1..=self.phases())
            .map(|k| {
                let p = self.root.join("scenes").join(scene).join(format!("labels_t{k}.png"));
                let img = read_gray(&p)?;
                Ok(LabelGrid {
                    width: img.width() as usize,
                    height: img.height() as usize,
                    cells: img.into_raw(),
                })
            })
            .collect()
    }

    pub fn mask_path(&self, mask_ref: &str) -> Result<PathBuf> {
        let r = MaskRef::parse(mask_ref).ok_or_else(|| GenError::Contract(format!("bad mask ref {mask_ref}")))?;
        Ok(self.root.join("masks").join(r.scene).join(format!(
            "{}_{}_t{}t{}.png",
            r.from, r.to, r.pair.0, r.pair.1
        )))
    }

    pub fn load_mask(&self, mask_ref: &str) -> Result<Mask> {
        read_mask(&self.mask_path(mask_ref)?)
    }

    pub fn scene_samples(&self, scene: &str) -> Vec<&QASample> {
        self.samples.iter().filter(|s| s.scene_id == scene).collect()
    }
}

fn read_gray(p: &Path) -> Result<GrayImage> {
    image::open(p)
        .map(|i| i.to_luma8())
        .map_err(|source| GenError::Image {
            path: p.display().to_string(),
            source,
        })
}

pub fn read_mask(p: &Path) -> Result<Mask> {
    let img = read_gray(p)?;
    Ok(Mask {
        width: img.width() as usize,
        height: img.height() as usize,
        cells: img.into_raw().into_iter().map(|v| v >= 128).collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub kind: String,
    /// The offending mask ref or sample id.
    pub subject: String,
    pub samples: Vec<String>,
    pub detail: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Report {
    pub samples: usize,
    pub masks_checked: usize,
    pub violations: Vec<Violation>,
}

impl Report {
    pub fn ok(&self) -> bool {
        self.violations.is_empty()
    }
}

fn violation(kind: &str, subject: &str, sample: &str, detail: String) -> Violation {
    Violation {
        kind: kind.into(),
        subject: subject.into(),
        samples: vec![sample.to_string()],
        detail,
    }
}

/// Re-derives every checkable fact of every sample from the stored masks.
/// A missing mask is reported once, listing the samples that reference it;
/// those samples skip the mask-dependent checks.
pub fn verify_alignment(root: &Path) -> Result<Report> {
    let ds = Dataset::open(root)?;
    let cfg = &ds.manifest.config;
    let size = cfg.scene.size;
    let total = size * size;
    let scenes: BTreeSet<&str> = ds.manifest.scenes.iter().map(String::as_str).collect();
    let mut cache: BTreeMap<String, Option<Mask>> = BTreeMap::new();
    let mut missing: BTreeMap<String, (String, Vec<String>)> = BTreeMap::new();
    let mut out = Vec::new();

    for s in &ds.samples {
        let id = s.id.as_str();
        if !scenes.contains(s.scene_id.as_str()) {
            out.push(violation("unknown-scene", id, id, format!("scene {} not in manifest", s.scene_id)));
            continue;
        }
        match (&s.scope, &s.prompt) {
            (Scope::P, PromptGeometry::None) => {
                out.push(violation("missing-prompt", id, id, "prompt-scope sample without prompt".into()))
            }
            (Scope::H, p) if !p.is_none() => {
                out.push(violation("unexpected-prompt", id, id, "holistic sample carries a prompt".into()))
            }
            _ => {}
        }
        if s.prompt.validate(size).is_err() {
            out.push(violation("prompt-bounds", id, id, format!("{:?} outside {size}x{size}", s.prompt)));
            continue;
        }

        let mut masks = Vec::new();
        let mut complete = true;
        for r in &s.mask_refs {
            let Some(parsed) = MaskRef::parse(r).filter(|p| p.scene == s.scene_id) else {
                out.push(violation("bad-mask-ref", id, id, format!("unresolvable ref {r}")));
                complete = false;
                continue;
            };
            let entry = cache.entry(r.clone()).or_insert_with(|| {
                ds.mask_path(r).ok().and_then(|p| read_mask(&p).ok())
            });
            match entry {
                Some(m) => masks.push(((parsed.from, parsed.to, parsed.pair), m.clone())),
                None => {
                    let path = ds.mask_path(r).map(|p| p.display().to_string()).unwrap_or_default();
                    missing.entry(r.clone()).or_insert_with(|| (path, Vec::new())).1.push(s.id.clone());
                    complete = false;
                }
            }
        }

        if matches!(s.format, Format::SingleChoice | Format::MultiChoice) {
            check_choice(s, &mut out);
        }
        if !complete {
            continue;
        }
        let mut union = Mask::empty(size, size);
        for (_, m) in &masks {
            union = union.or(m);
        }
        let region = prompt_region(&s.prompt, &union);

        if let Some(c) = s.target_class {
            if masks.iter().any(|((_, to, _), _)| *to != c) {
                out.push(violation("class-mismatch", id, id, format!("refs do not all end in class {c}")));
            }
        }
        if s.task == Task::Cqs {
            let stats = area_stats(&union.and(&region));
            let ok = match parse_quantity(&s.answer) {
                Some((patches, pixels, pct)) => {
                    let want: f64 = percent(stats.pixels, total).parse().expect("formatted");
                    patches == stats.patches && pixels == stats.pixels && (pct - want).abs() <= 0.005 + 1e-9
                }
                None => s.answer == NO_CHANGE_REGION && stats.pixels == 0,
            };
            if !ok {
                out.push(violation(
                    "cqs-mismatch",
                    id,
                    id,
                    format!("answer {:?}, masks give {}", s.answer, quantity_answer(stats, total)),
                ));
            }
        }
        if s.task == Task::Cti && s.scope == Scope::H && s.stage_pair.1 == s.stage_pair.0 + 1 {
            let mut acc: BTreeMap<String, usize> = BTreeMap::new();
            for ((from, to, _), m) in &masks {
                match cfg.trend_table.get(*from, *to) {
                    Some(t) => *acc.entry(t.to_string()).or_default() += m.count(),
                    None => out.push(violation("trend-coverage", id, id, format!("{from}->{to} unmapped"))),
                }
            }
            let mut bars: Vec<(String, usize)> = acc.into_iter().collect();
            bars.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
            let want = trend_answer(&bars, total);
            if want != s.answer {
                out.push(violation("cti-mismatch", id, id, format!("answer {:?}, masks give {want:?}", s.answer)));
            }
        }
        if s.answer.contains("[SEG]") {
            let by_ref: BTreeMap<String, Mask> = s
                .mask_refs
                .iter()
                .cloned()
                .zip(masks.iter().map(|(_, m)| m.clone()))
                .collect();
            match seg_targets(s, |r| Ok(by_ref[r].clone())) {
                Ok(targets) => {
                    for (pair, m) in targets {
                        if m.is_empty() {
                            out.push(violation("empty-seg-target", id, id, format!("[SEG] for t{}t{} has no pixels", pair.0, pair.1)));
                        }
                    }
                }
                Err(e) => out.push(violation("seg-target", id, id, e.to_string())),
            }
        } else if s.mask_rule == MaskRule::Chain {
            out.push(violation("seg-count", id, id, "chain sample without [SEG]".into()));
        }
    }
    for (r, (path, samples)) in missing {
        out.push(Violation {
            kind: "missing-mask".into(),
            subject: r,
            samples,
            detail: format!("{path} is missing or unreadable"),
        });
    }
    Ok(Report {
        samples: ds.samples.len(),
        masks_checked: cache.len(),
        violations: out,
    })
}

fn check_choice(s: &QASample, out: &mut Vec<Violation>) {
    let id = s.id.as_str();
    let Some(letters) = QASample::answer_letters(&s.answer) else {
        out.push(violation("choice-format", id, id, format!("answer {:?} is not a letter list", s.answer)));
        return;
    };
    if letters.iter().any(|&l| l >= s.options.len()) {
        out.push(violation("choice-not-in-options", id, id, format!("answer {:?} beyond {} options", s.answer, s.options.len())));
        return;
    }
    if s.format == Format::SingleChoice && letters.len() != 1 {
        out.push(violation("choice-format", id, id, "single-choice with several answers".into()));
    }
    let distinct: BTreeSet<&String> = s.options.iter().collect();
    if distinct.len() != s.options.len() {
        out.push(violation("choice-format", id, id, "repeated options".into()));
    }
    let chosen: BTreeSet<String> = letters.iter().map(|&l| s.options[l].clone()).collect();
    let expected: BTreeSet<String> = s
        .mask_refs
        .iter()
        .filter_map(|r| MaskRef::parse(r))
        .map(|r| pair_name(r.from, r.to))
        .collect();
    if chosen != expected {
        out.push(violation("choice-mismatch", id, id, format!("answer names {chosen:?}, masks name {expected:?}")));
    }
}
