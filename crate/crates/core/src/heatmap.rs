//! LoC map export: 16-bit PGM heatmaps with a scaling sidecar, and CSV rasters.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::change::LocMap;
use crate::error::{Error, Result};
use crate::image::write_pgm16;

/// Affine map from LoC values to 16-bit samples:
/// `sample = clamp(round((value − offset) · scale), 0, 65535)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapScaling {
    pub width: u32,
    pub height: u32,
    pub offset: f64,
    pub scale: f64,
    pub min: f64,
    pub max: f64,
}

impl HeatmapScaling {
    /// Stretches `[min, max]` of the map onto the full 16-bit range.
    pub fn fit(loc: &LocMap) -> Self {
        let min = loc.values().iter().copied().fold(f64::INFINITY, f64::min);
        let max = loc.values().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let scale = if max > min { 65535.0 / (max - min) } else { 0.0 };
        Self {
            width: loc.width(),
            height: loc.height(),
            offset: min,
            scale,
            min,
            max,
        }
    }

    pub fn sample(&self, value: f64) -> u16 {
        ((value - self.offset) * self.scale).round().clamp(0.0, 65535.0) as u16
    }
}

/// Writes `<stem>.pgm`, `<stem>.json` (scaling) and `<stem>.csv` into `dir`.
pub fn write_loc_outputs(loc: &LocMap, dir: &Path, stem: &str) -> Result<()> {
    let scaling = HeatmapScaling::fit(loc);
    let samples: Vec<u16> = loc.values().iter().map(|&v| scaling.sample(v)).collect();
    write_pgm16(dir.join(format!("{stem}.pgm")), loc.width(), loc.height(), &samples)?;
    let sidecar = dir.join(format!("{stem}.json"));
    let mut json = serde_json::to_vec_pretty(&scaling).expect("in-memory serialisation");
    json.push(b'\n');
    std::fs::write(&sidecar, json).map_err(|e| Error::io(&sidecar, e))?;
    write_loc_csv(loc, &dir.join(format!("{stem}.csv")))
}

/// Row-major values, one image row per line, shortest round-trip decimals.
pub fn write_loc_csv(loc: &LocMap, path: &Path) -> Result<()> {
    let mut out = String::with_capacity(loc.values().len() * 8);
    for row in loc.values().chunks(loc.width() as usize) {
        for (i, v) in row.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            let _ = write!(out, "{v}");
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_loc_csv(path: &Path) -> Result<LocMap> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut values = Vec::new();
    let mut width = None;
    let mut height = 0u32;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let before = values.len();
        for field in line.split(',') {
            values.push(field.trim().parse::<f64>().map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: format!("`{field}`: {e}"),
            })?);
        }
        let n = values.len() - before;
        if *width.get_or_insert(n) != n {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: format!("row has {n} values, expected {}", width.unwrap()),
            });
        }
        height += 1;
    }
    let width = width.ok_or_else(|| Error::Parse {
        path: path.to_path_buf(),
        line: 1,
        message: "empty LoC raster".into(),
    })?;
    LocMap::new(width as u32, height, values)
}
