//! Template QA generation over transition records: identification,
//! quantification, trend and spatial questions in holistic and prompt scopes,
//! plus tri-temporal composite events.

use std::fmt;

use delta_core::changeseg::PromptGeometry;
use numcore::rng::Rng;
use numcore::SeedStream;
use serde::{Deserialize, Serialize};

use crate::error::{GenError, Result};
use crate::grid::{connected_components, BBox, Mask};
use crate::scene::class_name;
use crate::transitions::{TransitionRecord, Transitions};
use crate::trend::{abstract_trend, TrendTable};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Task {
    Cic,
    Cqs,
    Cti,
    Csa,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::Cic, Task::Cqs, Task::Cti, Task::Csa];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Scope {
    H,
    P,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Format {
    SingleChoice,
    MultiChoice,
    Open,
}

/// How a `[SEG]` target is assembled from `mask_refs`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskRule {
    /// Union of the refs of the `[SEG]`'s stage pair.
    #[default]
    Union,
    /// Intersection of all refs, for composite events.
    Chain,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QASample {
    pub id: String,
    pub scene_id: String,
    pub stage_pair: (usize, usize),
    pub task: Task,
    pub scope: Scope,
    pub format: Format,
    pub question: String,
    pub answer: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub options: Vec<String>,
    pub prompt: PromptGeometry,
    pub mask_refs: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub trends: Vec<String>,
    #[serde(default)]
    pub mask_rule: MaskRule,
    /// Set on per-class segmentation questions used for SCD evaluation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_class: Option<u8>,
    #[serde(default)]
    pub split: String,
}

pub const LETTERS: [&str; 6] = ["a", "b", "c", "d", "e", "f"];

impl QASample {
    /// Question text followed by lettered options, as fed to the model.
    pub fn full_question(&self) -> String {
        if self.options.is_empty() {
            return self.question.clone();
        }
        let mut q = format!("{} options :", self.question);
        for (l, o) in LETTERS.iter().zip(&self.options) {
            q.push_str(&format!(" {l} . {o}"));
        }
        q
    }

    /// Option letters of a choice answer, `None` when malformed.
    pub fn answer_letters(answer: &str) -> Option<Vec<usize>> {
        let mut out = Vec::new();
        for part in answer.split(',') {
            let p = part.trim();
            out.push(LETTERS.iter().position(|&l| l == p)?);
        }
        Some(out)
    }
}

/// `<scene>/<from>_<to>_t<a>t<b>`, stored as `masks/<scene>/<from>_<to>_t<a>t<b>.png`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct MaskRef<'a> {
    pub scene: &'a str,
    pub from: u8,
    pub to: u8,
    pub pair: (usize, usize),
}

impl fmt::Display for MaskRef<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}/{}_{}_t{}t{}",
            self.scene, self.from, self.to, self.pair.0, self.pair.1
        )
    }
}

impl<'a> MaskRef<'a> {
    pub fn parse(s: &'a str) -> Option<MaskRef<'a>> {
        let (scene, rest) = s.split_once('/')?;
        let mut it = rest.split('_');
        let from = it.next()?.parse().ok()?;
        let to = it.next()?.parse().ok()?;
        let tag = it.next()?.strip_prefix('t')?;
        let (a, b) = tag.split_once('t')?;
        if it.next().is_some() {
            return None;
        }
        Some(MaskRef {
            scene,
            from,
            to,
            pair: (a.parse().ok()?, b.parse().ok()?),
        })
    }
}

pub fn pair_marker(pair: (usize, usize)) -> &'static str {
    match pair {
        (2, 3) => "<T2T3>",
        _ => "<T1T2>",
    }
}

fn stage_phrase(pair: (usize, usize)) -> String {
    format!("between t{} and t{}", pair.0, pair.1)
}

pub fn pair_name(from: u8, to: u8) -> String {
    format!("{} to {}", class_name(from), class_name(to))
}

pub fn percent(pixels: usize, total: usize) -> String {
    format!("{:.2}", 100.0 * pixels as f64 / total as f64)
}

/// 3x3 sector of a point in an image of side `size`.
pub fn sector(x: f64, y: f64, size: usize) -> &'static str {
    const NAMES: [[&str; 3]; 3] = [
        ["north-west", "north", "north-east"],
        ["west", "center", "east"],
        ["south-west", "south", "south-east"],
    ];
    let cell = |v: f64| (((v + 0.5) * 3.0 / size as f64) as usize).min(2);
    NAMES[cell(y)][cell(x)]
}

pub const SECTOR_ORDER: [&str; 9] = [
    "north-west",
    "north",
    "north-east",
    "west",
    "center",
    "east",
    "south-west",
    "south",
    "south-east",
];

/// Sectors of the bounding-box centres of the components of `mask`, in
/// reading order without repeats.
pub fn mask_sectors(mask: &Mask) -> Vec<&'static str> {
    let mut hit = [false; 9];
    for inst in connected_components(mask) {
        let b = bbox_of(&inst.pixels);
        let (cx, cy) = b.center();
        let s = sector(cx, cy, mask.width);
        hit[SECTOR_ORDER.iter().position(|&n| n == s).expect("sector")] = true;
    }
    SECTOR_ORDER.iter().zip(hit).filter(|(_, h)| *h).map(|(n, _)| *n).collect()
}

fn bbox_of(pixels: &[(usize, usize)]) -> BBox {
    let mut b = BBox {
        x1: usize::MAX,
        y1: usize::MAX,
        x2: 0,
        y2: 0,
    };
    for &(x, y) in pixels {
        b.x1 = b.x1.min(x);
        b.y1 = b.y1.min(y);
        b.x2 = b.x2.max(x);
        b.y2 = b.y2.max(y);
    }
    b
}

/// Cells a prompt refers to. Boxes cover their rectangle; a point covers the
/// component of `changed` under it (or just itself off the change).
pub fn prompt_region(prompt: &PromptGeometry, changed: &Mask) -> Mask {
    let (w, h) = (changed.width, changed.height);
    match *prompt {
        PromptGeometry::None => Mask::full(w, h),
        PromptGeometry::Box { x1, y1, x2, y2 } => Mask::boxed(w, h, BBox { x1, y1, x2, y2 }),
        PromptGeometry::Point { x, y } => {
            let mut m = Mask::empty(w, h);
            if x >= w || y >= h {
                return m;
            }
            match connected_components(changed).into_iter().find(|i| i.contains(x, y)) {
                Some(inst) => {
                    for (px, py) in inst.pixels {
                        m.cells[py * w + px] = true;
                    }
                }
                None => m.cells[y * w + x] = true,
            }
            m
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AreaStats {
    pub patches: usize,
    pub pixels: usize,
}

pub fn area_stats(mask: &Mask) -> AreaStats {
    AreaStats {
        patches: connected_components(mask).len(),
        pixels: mask.count(),
    }
}

pub const NO_CHANGE_REGION: &str = "no change in the marked region .";

/// `"2 patches covering 40 pixels , 0.98% of the image ."`
pub fn quantity_answer(s: AreaStats, total: usize) -> String {
    let noun = if s.patches == 1 { "patch" } else { "patches" };
    format!(
        "{} {noun} covering {} pixels , {}% of the image .",
        s.patches,
        s.pixels,
        percent(s.pixels, total)
    )
}

/// Parses [`quantity_answer`] text into `(patches, pixels, percent)`.
pub fn parse_quantity(answer: &str) -> Option<(usize, usize, f64)> {
    let w: Vec<&str> = answer.split_whitespace().collect();
    if w.len() != 11 || !matches!(w[1], "patch" | "patches") || w[2] != "covering" {
        return None;
    }
    let pct = w[6].strip_suffix('%')?;
    Some((w[0].parse().ok()?, w[3].parse().ok()?, pct.parse().ok()?))
}

/// Everything the templates need about one stage pair of one scene.
#[derive(Clone, Copy, Debug)]
pub struct PairFacts<'a> {
    pub scene_id: &'a str,
    pub pair: (usize, usize),
    pub transitions: &'a Transitions,
    pub classes: usize,
    pub table: &'a TrendTable,
}

impl PairFacts<'_> {
    fn total(&self) -> usize {
        self.transitions.unchanged.cells.len()
    }

    fn mask_ref(&self, r: &TransitionRecord) -> String {
        MaskRef {
            scene: self.scene_id,
            from: r.from,
            to: r.to,
            pair: self.pair,
        }
        .to_string()
    }

    fn by_area(&self) -> Vec<&TransitionRecord> {
        let mut v: Vec<&TransitionRecord> = self.transitions.records.iter().collect();
        v.sort_by(|a, b| b.pixel_count.cmp(&a.pixel_count).then((a.from, a.to).cmp(&(b.from, b.to))));
        v
    }

    fn unobserved(&self) -> Vec<(u8, u8)> {
        let c = self.classes as u8;
        (1..=c)
            .flat_map(|f| (1..=c).map(move |t| (f, t)))
            .filter(|&(f, t)| f != t && self.transitions.get(f, t).is_none())
            .collect()
    }
}

struct Builder<'a> {
    facts: PairFacts<'a>,
    scope: Scope,
    out: Vec<QASample>,
}

impl Builder<'_> {
    fn push(&mut self, task: Task, format: Format, question: String, answer: String) -> &mut QASample {
        self.out.push(QASample {
            id: String::new(),
            scene_id: self.facts.scene_id.to_string(),
            stage_pair: self.facts.pair,
            task,
            scope: self.scope,
            format,
            question,
            answer,
            options: Vec::new(),
            prompt: PromptGeometry::None,
            mask_refs: Vec::new(),
            trends: Vec::new(),
            mask_rule: MaskRule::Union,
            target_class: None,
            split: String::new(),
        });
        self.out.last_mut().expect("pushed")
    }
}

/// Shuffled options holding every `correct` pair plus seeded distractors.
fn choice(
    correct: &[(u8, u8)],
    pool: &[(u8, u8)],
    n_options: usize,
    rng: &mut impl Rng,
) -> (Vec<String>, String) {
    let mut pool = pool.to_vec();
    let mut opts: Vec<((u8, u8), bool)> = correct.iter().map(|&p| (p, true)).collect();
    while opts.len() < n_options && !pool.is_empty() {
        let i = rng.gen_range(0..pool.len());
        opts.push((pool.swap_remove(i), false));
    }
    for i in (1..opts.len()).rev() {
        let j = rng.gen_range(0..=i);
        opts.swap(i, j);
    }
    let answer = opts
        .iter()
        .enumerate()
        .filter(|(_, o)| o.1)
        .map(|(i, _)| LETTERS[i])
        .collect::<Vec<_>>()
        .join(" , ");
    (opts.iter().map(|((f, t), _)| pair_name(*f, *t)).collect(), answer)
}

fn holistic(b: &mut Builder, task: Task, rng: &mut impl Rng) -> Result<()> {
    let f = b.facts;
    let stage = stage_phrase(f.pair);
    let ranked = f.by_area();
    let all_refs: Vec<String> = ranked.iter().map(|r| f.mask_ref(r)).collect();
    match task {
        Task::Cic => {
            if let Some(top) = ranked.first() {
                let (options, answer) = choice(&[(top.from, top.to)], &f.unobserved(), 4, rng);
                let s = b.push(
                    Task::Cic,
                    Format::SingleChoice,
                    format!("which land-cover change covers the largest area {stage} ?"),
                    answer,
                );
                s.options = options;
                s.mask_refs = vec![f.mask_ref(top)];

                let top3: Vec<(u8, u8)> = ranked.iter().take(3).map(|r| (r.from, r.to)).collect();
                let (options, answer) = choice(&top3, &f.unobserved(), (top3.len() + 3).min(6), rng);
                let s = b.push(
                    Task::Cic,
                    Format::MultiChoice,
                    format!("which of these land-cover changes occurred {stage} ? select all that apply ."),
                    answer,
                );
                s.options = options;
                s.mask_refs = ranked.iter().take(3).map(|r| f.mask_ref(r)).collect();
            } else {
                b.push(
                    Task::Cic,
                    Format::Open,
                    format!("did any land-cover change occur {stage} ?"),
                    "no , the scene is unchanged .".into(),
                );
            }
            for c in 1..=f.classes as u8 {
                let hits: Vec<&&TransitionRecord> = ranked.iter().filter(|r| r.to == c).collect();
                let answer = if hits.is_empty() {
                    format!("no area changed into {} .", class_name(c))
                } else {
                    format!("{} [SEG]", pair_marker(f.pair))
                };
                let s = b.push(
                    Task::Cic,
                    Format::Open,
                    format!("segment the areas that changed into {} {stage} .", class_name(c)),
                    answer,
                );
                s.mask_refs = hits.iter().map(|r| f.mask_ref(r)).collect();
                s.target_class = Some(c);
            }
        }
        Task::Cqs => {
            for r in ranked.iter().take(3) {
                let s = b.push(
                    Task::Cqs,
                    Format::Open,
                    format!(
                        "how many patches changed from {} {stage} , and how large are they ?",
                        pair_name(r.from, r.to)
                    ),
                    quantity_answer(area_stats(&r.mask), f.total()),
                );
                s.mask_refs = vec![f.mask_ref(r)];
            }
            let changed = f.transitions.changed();
            let s = b.push(
                Task::Cqs,
                Format::Open,
                format!("how much of the image changed {stage} ?"),
                quantity_answer(area_stats(&changed), f.total()),
            );
            s.mask_refs = all_refs.clone();
        }
        Task::Cti => {
            let bars = abstract_trend(&f.transitions.records, f.table)?;
            let answer = trend_answer(&bars.iter().map(|t| (t.trend.clone(), t.pixels)).collect::<Vec<_>>(), f.total());
            let s = b.push(
                Task::Cti,
                Format::Open,
                format!("what is the dominant land evolution trend {stage} ?"),
                answer,
            );
            s.trends = bars.into_iter().map(|t| t.trend).collect();
            s.mask_refs = all_refs.clone();
        }
        Task::Csa => {
            let changed = f.transitions.changed();
            let s = b.push(
                Task::Csa,
                Format::Open,
                format!("where are the changed areas located {stage} ?"),
                sector_answer(&mask_sectors(&changed), "changes are located in the"),
            );
            s.mask_refs = all_refs.clone();
            if let Some(top) = ranked.first() {
                let c = top.to;
                let hits: Vec<&&TransitionRecord> = ranked.iter().filter(|r| r.to == c).collect();
                let mut m = Mask::empty(changed.width, changed.height);
                for r in &hits {
                    m = m.or(&r.mask);
                }
                let s = b.push(
                    Task::Csa,
                    Format::Open,
                    format!("where did areas change into {} {stage} ?", class_name(c)),
                    sector_answer(&mask_sectors(&m), "they are located in the"),
                );
                s.mask_refs = hits.iter().map(|r| f.mask_ref(r)).collect();
            }
        }
    }
    Ok(())
}

/// `"mainly <t1> ( 3.20% of the image ) , followed by <t2> ( 1.10% ) ."`
pub fn trend_answer(bars: &[(String, usize)], total: usize) -> String {
    if bars.is_empty() {
        return "no evolution trend , the scene is unchanged .".into();
    }
    let mut s = format!(
        "mainly {} ( {}% of the image )",
        bars[0].0,
        percent(bars[0].1, total)
    );
    for (t, px) in &bars[1..] {
        s.push_str(&format!(" , followed by {t} ( {}% )", percent(*px, total)));
    }
    s.push_str(" .");
    s
}

pub fn sector_answer(sectors: &[&str], lead: &str) -> String {
    if sectors.is_empty() {
        return "there is no change .".into();
    }
    format!("{lead} {} .", sectors.join(" , "))
}

/// Questions about the region a prompt marks.
pub fn prompt_samples(
    facts: PairFacts,
    prompt: PromptGeometry,
    seeds: SeedStream,
) -> Result<Vec<QASample>> {
    let mut b = Builder {
        facts,
        scope: Scope::P,
        out: Vec::new(),
    };
    let mut rng = seeds.rng();
    let total = facts.total();
    let changed = facts.transitions.changed();
    let region = prompt_region(&prompt, &changed);
    let inside: Vec<(&TransitionRecord, usize)> = facts
        .by_area()
        .into_iter()
        .map(|r| (r, r.mask.and(&region).count()))
        .filter(|(_, n)| *n > 0)
        .collect();
    let refs: Vec<String> = inside.iter().map(|(r, _)| facts.mask_ref(r)).collect();
    let local = changed.and(&region);
    if inside.is_empty() {
        for (task, q) in [
            (Task::Cic, "what change happened in the marked region ?"),
            (Task::Cqs, "how much changed inside the marked region ?"),
        ] {
            b.push(task, Format::Open, q.into(), NO_CHANGE_REGION.into());
        }
    } else {
        let major = inside.iter().max_by(|a, b| a.1.cmp(&b.1).then((b.0.from, b.0.to).cmp(&(a.0.from, a.0.to)))).expect("non-empty").0;
        let (options, answer) = choice(&[(major.from, major.to)], &facts.unobserved(), 4, &mut rng);
        let s = b.push(
            Task::Cic,
            Format::SingleChoice,
            "what is the main change in the marked region ?".into(),
            answer,
        );
        s.options = options;
        s.mask_refs = vec![facts.mask_ref(major)];

        let s = b.push(
            Task::Cqs,
            Format::Open,
            "how much changed inside the marked region ?".into(),
            quantity_answer(area_stats(&local), total),
        );
        s.mask_refs = refs.clone();

        let s = b.push(
            Task::Cic,
            Format::Open,
            "segment the change in the marked region .".into(),
            format!("{} [SEG]", pair_marker(facts.pair)),
        );
        s.mask_refs = refs.clone();

        let trend = facts
            .table
            .get(major.from, major.to)
            .ok_or(GenError::Coverage(major.from, major.to))?;
        let s = b.push(
            Task::Cti,
            Format::Open,
            "which evolution trend does the marked change follow ?".into(),
            format!("{trend} , from {} .", pair_name(major.from, major.to)),
        );
        s.trends = vec![trend.to_string()];
        s.mask_refs = vec![facts.mask_ref(major)];

        let s = b.push(
            Task::Csa,
            Format::Open,
            "where is the marked change located ?".into(),
            sector_answer(&mask_sectors(&local), "it is located in the"),
        );
        s.mask_refs = refs;
    }
    for s in &mut b.out {
        s.prompt = prompt;
    }
    Ok(b.out)
}

/// Samples of one task family and scope for a stage pair. Prompt scope
/// emits one box or point prompt for each of the `max_prompts` largest instances.
pub fn gen_qa(
    facts: PairFacts,
    scope: Scope,
    task: Task,
    max_prompts: usize,
    seeds: SeedStream,
) -> Result<Vec<QASample>> {
    let seeds = seeds.split(&format!("{}/t{}t{}/{:?}/{:?}", facts.scene_id, facts.pair.0, facts.pair.1, scope, task));
    match scope {
        Scope::H => {
            let mut b = Builder {
                facts,
                scope,
                out: Vec::new(),
            };
            holistic(&mut b, task, &mut seeds.rng())?;
            Ok(b.out)
        }
        Scope::P => {
            let mut out = Vec::new();
            for (i, prompt) in instance_prompts(facts, max_prompts, seeds.split("prompts")).into_iter().enumerate() {
                let samples = prompt_samples(facts, prompt, seeds.split_index("prompt", i as u64))?;
                out.extend(samples.into_iter().filter(|s| s.task == task));
            }
            Ok(out)
        }
    }
}

/// Box or point prompts (seeded coin) on the largest instances.
pub fn instance_prompts(facts: PairFacts, max_prompts: usize, seeds: SeedStream) -> Vec<PromptGeometry> {
    let mut inst: Vec<_> = facts
        .transitions
        .records
        .iter()
        .flat_map(|r| r.instances.iter())
        .collect();
    inst.sort_by(|a, b| {
        b.instance
            .pixels
            .len()
            .cmp(&a.instance.pixels.len())
            .then(a.instance.pixels[0].1.cmp(&b.instance.pixels[0].1))
            .then(a.instance.pixels[0].0.cmp(&b.instance.pixels[0].0))
    });
    let mut rng = seeds.rng();
    inst.into_iter()
        .take(max_prompts)
        .map(|i| {
            let g = i.geometry;
            if rng.gen_bool(0.5) {
                PromptGeometry::Box {
                    x1: g.mbr.x1,
                    y1: g.mbr.y1,
                    x2: g.mbr.x2,
                    y2: g.mbr.y2,
                }
            } else {
                PromptGeometry::Point {
                    x: g.point.0,
                    y: g.point.1,
                }
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompositeEvent {
    /// Class path, two entries for single-stage events and three for chains.
    pub path: Vec<u8>,
    /// Stage pairs the event spans.
    pub stages: Vec<(usize, usize)>,
    pub mask: Mask,
}

impl CompositeEvent {
    pub fn describe(&self) -> String {
        self.path.iter().map(|&c| class_name(c)).collect::<Vec<_>>().join(" to ")
    }
}

/// Chained `A -> B -> C` events (cells changed in both stages) and
/// single-stage events for the two adjacent pairs of a tri-temporal scene.
pub fn composite_events(stages: &[Transitions]) -> Result<Vec<CompositeEvent>> {
    let [t12, t23] = stages else {
        return Err(GenError::Input(format!(
            "composite events need 2 adjacent stage pairs, got {}",
            stages.len()
        )));
    };
    let (c12, c23) = (t12.changed(), t23.changed());
    let mut out = Vec::new();
    for a in &t12.records {
        for b in t23.records.iter().filter(|b| b.from == a.to) {
            let m = a.mask.and(&b.mask);
            if !m.is_empty() {
                out.push(CompositeEvent {
                    path: vec![a.from, a.to, b.to],
                    stages: vec![(1, 2), (2, 3)],
                    mask: m,
                });
            }
        }
    }
    for (t, other, pair) in [(t12, &c23, (1, 2)), (t23, &c12, (2, 3))] {
        for r in &t.records {
            let m = r.mask.and_not(other);
            if !m.is_empty() {
                out.push(CompositeEvent {
                    path: vec![r.from, r.to],
                    stages: vec![pair],
                    mask: m,
                });
            }
        }
    }
    Ok(out)
}

/// Composite-event questions for a tri-temporal scene; the segmentation
/// answers carry one `[SEG]` per stage.
pub fn compose_tritemporal(scene_id: &str, stages: &[Transitions]) -> Result<(Vec<CompositeEvent>, Vec<QASample>)> {
    let events = composite_events(stages)?;
    let total = stages[0].unchanged.cells.len();
    let mut chains: Vec<&CompositeEvent> = events.iter().filter(|e| e.path.len() == 3).collect();
    chains.sort_by(|a, b| b.mask.count().cmp(&a.mask.count()).then(a.path.cmp(&b.path)));
    let blank = |task, format, question: String, answer: String| QASample {
        id: String::new(),
        scene_id: scene_id.to_string(),
        stage_pair: (1, 3),
        task,
        scope: Scope::H,
        format,
        question,
        answer,
        options: Vec::new(),
        prompt: PromptGeometry::None,
        mask_refs: Vec::new(),
        trends: Vec::new(),
        mask_rule: MaskRule::Chain,
        target_class: None,
        split: String::new(),
    };
    let refs = |e: &CompositeEvent| -> Vec<String> {
        vec![
            MaskRef { scene: scene_id, from: e.path[0], to: e.path[1], pair: (1, 2) }.to_string(),
            MaskRef { scene: scene_id, from: e.path[1], to: e.path[2], pair: (2, 3) }.to_string(),
        ]
    };
    let mut out = Vec::new();
    let answer = if chains.is_empty() {
        "no area changed in both stages .".to_string()
    } else {
        let parts: Vec<String> = chains
            .iter()
            .take(3)
            .map(|e| format!("{} ( {}% of the image )", e.describe(), percent(e.mask.count(), total)))
            .collect();
        format!("{} .", parts.join(" ; "))
    };
    let mut s = blank(
        Task::Cti,
        Format::Open,
        "which composite evolution events happened from t1 through t3 ?".into(),
        answer,
    );
    s.mask_refs = chains.iter().take(3).flat_map(|e| refs(e)).collect();
    s.mask_rule = MaskRule::Union;
    out.push(s);
    for e in chains.iter().take(3) {
        let mut s = blank(
            Task::Cic,
            Format::Open,
            format!(
                "segment the area that changed from {} to {} and then to {} .",
                class_name(e.path[0]),
                class_name(e.path[1]),
                class_name(e.path[2])
            ),
            "<T1T2> [SEG] <T2T3> [SEG]".into(),
        );
        s.mask_refs = refs(e);
        out.push(s);
    }
    Ok((events, out))
}

/// Target of each `[SEG]` in order, from the stored masks `load` resolves.
pub fn seg_targets(
    sample: &QASample,
    mut load: impl FnMut(&str) -> Result<Mask>,
) -> Result<Vec<((usize, usize), Mask)>> {
    let pairs = seg_pairs_in(&sample.answer);
    if pairs.is_empty() {
        return Ok(Vec::new());
    }
    let mut masks = Vec::with_capacity(sample.mask_refs.len());
    for r in &sample.mask_refs {
        let parsed = MaskRef::parse(r).ok_or_else(|| GenError::Contract(format!("bad mask ref {r}")))?;
        masks.push((parsed.pair, load(r)?));
    }
    let Some((_, first)) = masks.first() else {
        return Err(GenError::Contract(format!("sample {} has [SEG] but no mask refs", sample.id)));
    };
    let (w, h) = (first.width, first.height);
    let mut union = Mask::empty(w, h);
    for (_, m) in &masks {
        union = union.or(m);
    }
    let region = prompt_region(&sample.prompt, &union);
    let mut out = Vec::new();
    for pair in pairs {
        let m = match sample.mask_rule {
            MaskRule::Union => masks
                .iter()
                .filter(|(p, _)| *p == pair)
                .fold(Mask::empty(w, h), |acc, (_, m)| acc.or(m)),
            MaskRule::Chain => masks.iter().fold(Mask::full(w, h), |acc, (_, m)| acc.and(m)),
        };
        out.push((pair, m.and(&region)));
    }
    Ok(out)
}

/// Stage pair of each `[SEG]` in answer text, from the last transition marker.
pub fn seg_pairs_in(answer: &str) -> Vec<(usize, usize)> {
    let mut pair = (1, 2);
    let mut out = Vec::new();
    for w in answer.split_whitespace() {
        match w {
            "<T1T2>" => pair = (1, 2),
            "<T2T3>" => pair = (2, 3),
            "[SEG]" => out.push(pair),
            _ => {}
        }
    }
    out
}
