//! Label grids, binary masks, 4-connected instances and their geometry.

use std::collections::VecDeque;

use numcore::rng::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GenError, Result};

/// Per-cell land-cover class ids, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelGrid {
    pub width: usize,
    pub height: usize,
    pub cells: Vec<u8>,
}

impl LabelGrid {
    pub fn filled(width: usize, height: usize, class: u8) -> LabelGrid {
        LabelGrid {
            width,
            height,
            cells: vec![class; width * height],
        }
    }

    pub fn from_rows(rows: &[&[u8]]) -> LabelGrid {
        LabelGrid {
            width: rows.first().map_or(0, |r| r.len()),
            height: rows.len(),
            cells: rows.concat(),
        }
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.cells[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, class: u8) {
        self.cells[y * self.width + x] = class;
    }

    pub fn check_classes(&self, n_land: usize) -> Result<()> {
        match self.cells.iter().find(|&&c| c as usize >= n_land) {
            Some(c) => Err(GenError::Input(format!("class id {c} outside {n_land} land-cover classes"))),
            None => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub cells: Vec<bool>,
}

impl Mask {
    pub fn empty(width: usize, height: usize) -> Mask {
        Mask {
            width,
            height,
            cells: vec![false; width * height],
        }
    }

    pub fn full(width: usize, height: usize) -> Mask {
        Mask {
            width,
            height,
            cells: vec![true; width * height],
        }
    }

    pub fn from_rows(rows: &[&str]) -> Mask {
        Mask {
            width: rows.first().map_or(0, |r| r.len()),
            height: rows.len(),
            cells: rows.iter().flat_map(|r| r.chars().map(|c| c == '1')).collect(),
        }
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.cells[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.cells.iter().any(|&c| c)
    }

    fn zip(&self, other: &Mask, f: impl Fn(bool, bool) -> bool) -> Mask {
        assert_eq!((self.width, self.height), (other.width, other.height));
        Mask {
            width: self.width,
            height: self.height,
            cells: self.cells.iter().zip(&other.cells).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn and(&self, other: &Mask) -> Mask {
        self.zip(other, |a, b| a && b)
    }

    pub fn or(&self, other: &Mask) -> Mask {
        self.zip(other, |a, b| a || b)
    }

    pub fn and_not(&self, other: &Mask) -> Mask {
        self.zip(other, |a, b| a && !b)
    }

    /// Cells of the inclusive box `(x1, y1, x2, y2)`.
    pub fn boxed(width: usize, height: usize, b: BBox) -> Mask {
        let mut m = Mask::empty(width, height);
        for y in b.y1..=b.y2.min(height - 1) {
            for x in b.x1..=b.x2.min(width - 1) {
                m.cells[y * width + x] = true;
            }
        }
        m
    }
}

/// Inclusive pixel box.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: usize,
    pub y1: usize,
    pub x2: usize,
    pub y2: usize,
}

impl BBox {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        self.x1 <= x && x <= self.x2 && self.y1 <= y && y <= self.y2
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) as f64 / 2.0, (self.y1 + self.y2) as f64 / 2.0)
    }
}

/// A 4-connected component; `pixels` are `(x, y)` in raster order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Instance {
    pub id: usize,
    pub pixels: Vec<(usize, usize)>,
}

impl Instance {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        self.pixels.binary_search_by(|&(px, py)| (py, px).cmp(&(y, x))).is_ok()
    }
}

/// 4-connected components labelled in raster order of their first pixel.
pub fn connected_components(mask: &Mask) -> Vec<Instance> {
    let (w, h) = (mask.width, mask.height);
    let mut seen = vec![false; w * h];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..w * h {
        if !mask.cells[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut idx = Vec::new();
        while let Some(i) = queue.pop_front() {
            idx.push(i);
            let (x, y) = (i % w, i / w);
            let mut visit = |j: usize| {
                if mask.cells[j] && !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
        }
        idx.sort_unstable();
        out.push(Instance {
            id: out.len(),
            pixels: idx.into_iter().map(|i| (i % w, i / w)).collect(),
        });
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Geometry {
    pub mbr: BBox,
    pub point: (usize, usize),
}

/// Bounding box and a uniformly drawn member pixel.
pub fn instance_geometry(instance: &Instance, rng: &mut impl Rng) -> Result<Geometry> {
    let Some(&(x0, y0)) = instance.pixels.first() else {
        return Err(GenError::Contract(format!("instance {} has no pixels", instance.id)));
    };
    let mut b = BBox {
        x1: x0,
        y1: y0,
        x2: x0,
        y2: y0,
    };
    for &(x, y) in &instance.pixels {
        b.x1 = b.x1.min(x);
        b.y1 = b.y1.min(y);
        b.x2 = b.x2.max(x);
        b.y2 = b.y2.max(y);
    }
    let point = instance.pixels[rng.gen_range(0..instance.pixels.len())];
    Ok(Geometry { mbr: b, point })
}
