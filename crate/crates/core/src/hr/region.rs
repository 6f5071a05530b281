use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::HrError;
use crate::ingest::LandmarkFrame;

pub const DEFAULT_CENTRAL_FRACTION: f64 = 0.15;

/// Which feature points feed the heart-rate estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionConfig {
    /// Points whose median position lies within `±fraction` of the face
    /// bounding box around the landmark centroid.
    CentralBox { fraction: f64 },
    /// Exactly these point ids.
    Allowlist(Vec<u32>),
}

impl Default for RegionConfig {
    fn default() -> Self {
        RegionConfig::CentralBox { fraction: DEFAULT_CENTRAL_FRACTION }
    }
}

impl RegionConfig {
    pub fn describe(&self) -> String {
        match self {
            RegionConfig::CentralBox { fraction } => format!("central box ±{fraction} of face bounds"),
            RegionConfig::Allowlist(ids) => format!("allowlist {ids:?}"),
        }
    }
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median position of every point id seen in `frames`.
pub fn median_positions(frames: &[LandmarkFrame]) -> BTreeMap<u32, (f64, f64)> {
    let mut xs: BTreeMap<u32, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for f in frames {
        for p in &f.points {
            let e = xs.entry(p.id).or_default();
            e.0.push(p.x);
            e.1.push(p.y);
        }
    }
    xs.into_iter().map(|(id, (mut x, mut y))| (id, (median(&mut x), median(&mut y)))).collect()
}

pub fn select_central_points(frames: &[LandmarkFrame], region: &RegionConfig) -> Result<Vec<u32>, HrError> {
    if frames.is_empty() {
        return Err(HrError::EmptyTrack);
    }
    let medians = median_positions(frames);
    let selected: Vec<u32> = match region {
        RegionConfig::Allowlist(ids) => {
            let mut ids: Vec<u32> = ids.iter().copied().filter(|id| medians.contains_key(id)).collect();
            ids.sort_unstable();
            ids.dedup();
            ids
        }
        RegionConfig::CentralBox { fraction } => {
            if medians.is_empty() {
                return Err(HrError::EmptySelection(region.describe()));
            }
            let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
            let (mut sx, mut sy) = (0.0, 0.0);
            for &(x, y) in medians.values() {
                x0 = x0.min(x);
                x1 = x1.max(x);
                y0 = y0.min(y);
                y1 = y1.max(y);
                sx += x;
                sy += y;
            }
            let n = medians.len() as f64;
            let (cx, cy) = (sx / n, sy / n);
            let (hw, hh) = (fraction * (x1 - x0), fraction * (y1 - y0));
            medians
                .iter()
                .filter(|(_, &(x, y))| (x - cx).abs() <= hw && (y - cy).abs() <= hh)
                .map(|(&id, _)| id)
                .collect()
        }
    };
    if selected.is_empty() {
        return Err(HrError::EmptySelection(region.describe()));
    }
    Ok(selected)
}
