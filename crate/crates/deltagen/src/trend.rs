//! Grouping of elementary transitions into evolution trends.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{GenError, Result};
use crate::transitions::TransitionRecord;

pub const VEGETATION_SUCCESSION: &str = "vegetation succession";
pub const ARTIFICIAL_SURFACES: &str = "conversion to artificial surfaces";
pub const ECOLOGICAL_RESTORATION: &str = "ecological restoration";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrendTable {
    /// Keyed `"from->to"` so the table round-trips through JSON.
    pub map: BTreeMap<String, String>,
}

fn key(from: u8, to: u8) -> String {
    format!("{from}->{to}")
}

impl TrendTable {
    pub fn new(entries: impl IntoIterator<Item = ((u8, u8), String)>) -> TrendTable {
        TrendTable {
            map: entries.into_iter().map(|((f, t), v)| (key(f, t), v)).collect(),
        }
    }

    pub fn get(&self, from: u8, to: u8) -> Option<&str> {
        self.map.get(&key(from, to)).map(String::as_str)
    }

    pub fn covers(&self, classes: usize) -> bool {
        (1..=classes as u8).all(|f| {
            (1..=classes as u8).all(|t| f == t || self.get(f, t).is_some())
        })
    }
}

impl Default for TrendTable {
    /// Built-up and bare ground targets are artificial conversion, vegetation
    /// or water replacing built-up land is restoration, everything else that
    /// ends in vegetation is succession and any new water is restoration.
    fn default() -> Self {
        let (lveg, ground, tree, water, building, play) = (1u8, 2u8, 3u8, 4u8, 5u8, 6u8);
        let mut entries = Vec::new();
        for from in 1..=6u8 {
            for to in 1..=6u8 {
                if from == to {
                    continue;
                }
                let built = from == building || from == play;
                let trend = if to == building || to == play || to == ground {
                    ARTIFICIAL_SURFACES
                } else if to == water || built {
                    ECOLOGICAL_RESTORATION
                } else {
                    debug_assert!(to == lveg || to == tree);
                    VEGETATION_SUCCESSION
                };
                entries.push(((from, to), trend.to_string()));
            }
        }
        TrendTable::new(entries)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrendBar {
    pub trend: String,
    pub pixels: usize,
    /// Fraction of the whole image.
    pub proportion: f64,
}

/// Per-trend pixel totals, largest first (ties by name).
pub fn abstract_trend(records: &[TransitionRecord], table: &TrendTable) -> Result<Vec<TrendBar>> {
    let mut acc: BTreeMap<&str, (usize, f64)> = BTreeMap::new();
    for r in records {
        let trend = table.get(r.from, r.to).ok_or(GenError::Coverage(r.from, r.to))?;
        let e = acc.entry(trend).or_insert((0, 0.0));
        e.0 += r.pixel_count;
        e.1 += r.area_proportion;
    }
    let mut bars: Vec<TrendBar> = acc
        .into_iter()
        .map(|(t, (pixels, proportion))| TrendBar {
            trend: t.to_string(),
            pixels,
            proportion,
        })
        .collect();
    bars.sort_by(|a, b| b.pixels.cmp(&a.pixels).then_with(|| a.trend.cmp(&b.trend)));
    Ok(bars)
}
