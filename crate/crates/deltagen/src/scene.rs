//! Seeded synthetic multi-temporal scenes: Voronoi land cover, region
//! mutations per phase and palette rendering.

use image::{Rgb, RgbImage};
use numcore::rng::Rng;
use numcore::SeedStream;
use serde::{Deserialize, Serialize};

use crate::error::{GenError, Result};
use crate::grid::LabelGrid;

/// Land-cover classes 1..=6; id 0 is background and never generated.
pub const CLASS_NAMES: [&str; 7] = [
    "background",
    "low vegetation",
    "ground",
    "tree",
    "water",
    "building",
    "playground",
];

const PALETTE: [[u8; 3]; 7] = [
    [0, 0, 0],
    [128, 176, 84],
    [170, 146, 112],
    [38, 102, 46],
    [48, 92, 172],
    [196, 72, 64],
    [214, 186, 70],
];

/// Per-class noise amplitude; water is smooth, trees and buildings are busy.
const TEXTURE: [f64; 7] = [0.0, 10.0, 12.0, 22.0, 4.0, 18.0, 8.0];

pub fn class_name(class: u8) -> &'static str {
    CLASS_NAMES.get(class as usize).copied().unwrap_or("unknown")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub size: usize,
    pub phases: usize,
    /// Land-cover classes, ids 1..=classes.
    pub classes: usize,
    /// Target fraction of cells that change between consecutive phases.
    pub change_budget: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            size: 64,
            phases: 2,
            classes: 6,
            change_budget: 0.15,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size == 0 || self.size > 128 {
            return Err(GenError::Input(format!("scene size {} outside 1..=128", self.size)));
        }
        if !(2..=3).contains(&self.phases) {
            return Err(GenError::Input(format!("phases must be 2 or 3, got {}", self.phases)));
        }
        if !(2..=6).contains(&self.classes) {
            return Err(GenError::Input(format!("classes must be in 2..=6, got {}", self.classes)));
        }
        if !(self.change_budget > 0.0 && self.change_budget <= 0.5) {
            return Err(GenError::Input(format!(
                "change budget {} outside (0, 0.5]",
                self.change_budget
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TemporalScene {
    pub id: String,
    pub grids: Vec<LabelGrid>,
    pub images: Vec<RgbImage>,
    pub seed: u64,
}

impl TemporalScene {
    pub fn phases(&self) -> usize {
        self.grids.len()
    }
}

fn voronoi(size: usize, classes: usize, rng: &mut impl Rng) -> LabelGrid {
    let n = rng.gen_range(6..=14);
    let sites: Vec<(f64, f64, u8)> = (0..n)
        .map(|i| {
            // cycle through classes first so every class tends to appear
            let class = if i < classes {
                (i + 1) as u8
            } else {
                rng.gen_range(1..=classes) as u8
            };
            (
                rng.gen_range(0.0..size as f64),
                rng.gen_range(0.0..size as f64),
                class,
            )
        })
        .collect();
    let mut g = LabelGrid::filled(size, size, 1);
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let best = sites
                .iter()
                .min_by(|a, b| {
                    let da = (a.0 - px).powi(2) + (a.1 - py).powi(2);
                    let db = (b.0 - px).powi(2) + (b.1 - py).powi(2);
                    da.total_cmp(&db)
                })
                .expect("sites");
            g.set(x, y, best.2);
        }
    }
    g
}

fn changed_cells(a: &LabelGrid, b: &LabelGrid) -> usize {
    a.cells.iter().zip(&b.cells).filter(|(x, y)| x != y).count()
}

/// Copies `prev` and repaints rectangles and discs until about `budget` of
/// the cells differ.
fn mutate(prev: &LabelGrid, budget: f64, classes: usize, rng: &mut impl Rng) -> Result<LabelGrid> {
    let size = prev.width;
    let total = size * size;
    let target = (budget * total as f64).round() as usize;
    if target == 0 {
        return Err(GenError::Generation(format!(
            "budget {budget} is below one cell of a {size}x{size} grid"
        )));
    }
    let max_side = (size / 3).clamp(2, 16);
    let mut next = prev.clone();
    let mut changed = 0;
    for _ in 0..4000 {
        if changed as f64 >= 0.95 * target as f64 {
            break;
        }
        let mut cand = next.clone();
        let class = rng.gen_range(1..=classes) as u8;
        let (cx, cy) = (rng.gen_range(0..size), rng.gen_range(0..size));
        let disc = rng.gen_bool(0.5);
        let (hw, hh) = (rng.gen_range(1..=max_side / 2 + 1), rng.gen_range(1..=max_side / 2 + 1));
        for y in cy.saturating_sub(hh)..(cy + hh).min(size) {
            for x in cx.saturating_sub(hw)..(cx + hw).min(size) {
                let inside = !disc || {
                    let (dx, dy) = (x as f64 - cx as f64, y as f64 - cy as f64);
                    (dx / hw as f64).powi(2) + (dy / hh as f64).powi(2) <= 1.0
                };
                if inside && prev.get(x, y) != class {
                    cand.set(x, y, class);
                }
            }
        }
        let c = changed_cells(prev, &cand);
        if c > changed && c as f64 <= 1.1 * target as f64 {
            next = cand;
            changed = c;
        }
    }
    if (changed as f64) < 0.8 * target as f64 {
        return Err(GenError::Generation(format!(
            "reached {changed} of {target} changed cells on a {size}x{size} grid"
        )));
    }
    Ok(next)
}

/// Palette colour, per-class texture noise and a per-phase brightness shift.
pub fn render(grid: &LabelGrid, rng: &mut impl Rng) -> RgbImage {
    let shift: f64 = rng.gen_range(-8.0..8.0);
    let mut img = RgbImage::new(grid.width as u32, grid.height as u32);
    for y in 0..grid.height {
        for x in 0..grid.width {
            let c = grid.get(x, y) as usize;
            let amp = TEXTURE[c.min(6)];
            let n: f64 = rng.gen_range(-1.0..1.0) * amp;
            let mut px = [0u8; 3];
            for (ch, v) in px.iter_mut().enumerate() {
                let base = PALETTE[c.min(6)][ch] as f64;
                *v = (base + n + shift).round().clamp(0.0, 255.0) as u8;
            }
            img.put_pixel(x as u32, y as u32, Rgb(px));
        }
    }
    img
}

pub fn synth_scene(id: &str, seed: u64, cfg: &SceneConfig) -> Result<TemporalScene> {
    cfg.validate()?;
    let seeds = SeedStream::new(seed);
    let mut rng = seeds.split("layout").rng();
    let mut grids = vec![voronoi(cfg.size, cfg.classes, &mut rng)];
    for _ in 1..cfg.phases {
        let next = mutate(grids.last().expect("phase 1"), cfg.change_budget, cfg.classes, &mut rng)?;
        grids.push(next);
    }
    let images = grids
        .iter()
        .enumerate()
        .map(|(k, g)| render(g, &mut seeds.split_index("render", k as u64).rng()))
        .collect();
    Ok(TemporalScene {
        id: id.to_string(),
        grids,
        images,
        seed,
    })
}
