//! Per-pair transition records between two label grids.

use numcore::SeedStream;

use crate::error::{GenError, Result};
use crate::grid::{connected_components, instance_geometry, Geometry, Instance, LabelGrid, Mask};

#[derive(Clone, Debug, PartialEq)]
pub struct InstanceRecord {
    pub instance: Instance,
    pub geometry: Geometry,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransitionRecord {
    pub from: u8,
    pub to: u8,
    pub pixel_count: usize,
    /// Fraction of the whole image.
    pub area_proportion: f64,
    pub instances: Vec<InstanceRecord>,
    pub mask: Mask,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transitions {
    /// Sorted by `(from, to)`.
    pub records: Vec<TransitionRecord>,
    pub unchanged: Mask,
    pub unchanged_proportion: f64,
}

impl Transitions {
    pub fn changed(&self) -> Mask {
        Mask {
            width: self.unchanged.width,
            height: self.unchanged.height,
            cells: self.unchanged.cells.iter().map(|&u| !u).collect(),
        }
    }

    pub fn get(&self, from: u8, to: u8) -> Option<&TransitionRecord> {
        self.records.iter().find(|r| r.from == from && r.to == to)
    }
}

/// One record per observed `(from, to)` pair with 4-connected instances;
/// sample points are drawn from `seeds`.
pub fn extract_transitions(a: &LabelGrid, b: &LabelGrid, seeds: SeedStream) -> Result<Transitions> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(GenError::Input(format!(
            "grids {}x{} and {}x{} differ",
            a.width, a.height, b.width, b.height
        )));
    }
    let (w, h) = (a.width, a.height);
    let total = (w * h) as f64;
    let mut pairs: Vec<(u8, u8)> = a
        .cells
        .iter()
        .zip(&b.cells)
        .filter(|(x, y)| x != y)
        .map(|(&x, &y)| (x, y))
        .collect();
    pairs.sort_unstable();
    pairs.dedup();
    let mut records = Vec::with_capacity(pairs.len());
    for (from, to) in pairs {
        let mask = Mask {
            width: w,
            height: h,
            cells: a
                .cells
                .iter()
                .zip(&b.cells)
                .map(|(&x, &y)| x == from && y == to)
                .collect(),
        };
        let mut rng = seeds.split(&format!("points/{from}/{to}")).rng();
        let instances = connected_components(&mask)
            .into_iter()
            .map(|instance| {
                let geometry = instance_geometry(&instance, &mut rng)?;
                Ok(InstanceRecord { instance, geometry })
            })
            .collect::<Result<Vec<_>>>()?;
        let pixel_count = mask.count();
        records.push(TransitionRecord {
            from,
            to,
            pixel_count,
            area_proportion: pixel_count as f64 / total,
            instances,
            mask,
        });
    }
    let unchanged = Mask {
        width: w,
        height: h,
        cells: a.cells.iter().zip(&b.cells).map(|(x, y)| x == y).collect(),
    };
    let unchanged_proportion = unchanged.count() as f64 / total;
    Ok(Transitions {
        records,
        unchanged,
        unchanged_proportion,
    })
}
