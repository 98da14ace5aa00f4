//! Top-X accuracy over max-pooled grid cells, and the reconstruction baseline.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::bolf::BoundingBox;
use crate::change::LocMap;
use crate::ensemble::AeEnsemble;
use crate::error::{Error, Result};
use crate::image::GrayImage;

/// Changed objects annotated in one query image.
#[derive(Debug, Clone, PartialEq)]
pub struct Annotation {
    pub query_id: String,
    pub boxes: Vec<BoundingBox>,
}

/// LoC max-pooled over a regular grid; edge cells may be narrower.
#[derive(Debug, Clone, PartialEq)]
pub struct CellGrid {
    cell_size: u32,
    width: u32,
    height: u32,
    cols: u32,
    rows: u32,
    scores: Vec<f64>,
}

impl CellGrid {
    pub fn cell_size(&self) -> u32 {
        self.cell_size
    }

    pub fn cols(&self) -> u32 {
        self.cols
    }

    pub fn rows(&self) -> u32 {
        self.rows
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn score(&self, row: u32, col: u32) -> f64 {
        self.scores[(row * self.cols + col) as usize]
    }

    pub fn cell_box(&self, row: u32, col: u32) -> BoundingBox {
        let x0 = col * self.cell_size;
        let y0 = row * self.cell_size;
        BoundingBox {
            x0,
            y0,
            x1: (x0 + self.cell_size).min(self.width),
            y1: (y0 + self.cell_size).min(self.height),
        }
    }
}

pub fn pool_cells(loc: &LocMap, cell_size: u32) -> Result<CellGrid> {
    if cell_size == 0 {
        return Err(Error::InvalidArgument("cell size must be at least 1".into()));
    }
    let (w, h) = (loc.width(), loc.height());
    let cols = w.div_ceil(cell_size);
    let rows = h.div_ceil(cell_size);
    let mut scores = vec![f64::NEG_INFINITY; (cols * rows) as usize];
    for y in 0..h {
        let row = (y / cell_size) * cols;
        for x in 0..w {
            let cell = &mut scores[(row + x / cell_size) as usize];
            *cell = cell.max(loc.get(x, y));
        }
    }
    Ok(CellGrid {
        cell_size,
        width: w,
        height: h,
        cols,
        rows,
        scores,
    })
}

/// How well the selected cells must cover an annotated box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OverlapMetric {
    /// `area(box ∩ selected) / area(box)`.
    Coverage,
    /// `area(box ∩ selected) / area(box ∪ selected)` within the same image.
    Iou,
}

impl OverlapMetric {
    pub fn name(&self) -> &'static str {
        match self {
            OverlapMetric::Coverage => "coverage",
            OverlapMetric::Iou => "iou",
        }
    }

    /// Column label used in reports.
    pub fn label(&self) -> &'static str {
        match self {
            OverlapMetric::Coverage => "cover",
            OverlapMetric::Iou => "IoU",
        }
    }
}

/// Number of cells making up the top `x_percent` of `total`.
pub fn selection_count(total: usize, x_percent: f64) -> usize {
    ((x_percent * total as f64) / 100.0).ceil() as usize
}

/// Selected cells per query, for one X.
fn select_cells(grids: &BTreeMap<String, CellGrid>, x_percent: f64) -> BTreeMap<&str, Vec<bool>> {
    let mut cells: Vec<(f64, &str, u32, u32)> = Vec::new();
    for (id, g) in grids {
        for row in 0..g.rows {
            for col in 0..g.cols {
                cells.push((g.score(row, col), id.as_str(), row, col));
            }
        }
    }
    // BTreeMap iteration already orders by id, then row, then column; a
    // stable sort on the score keeps that order among ties.
    cells.sort_by(|a, b| b.0.total_cmp(&a.0));
    let keep = selection_count(cells.len(), x_percent).min(cells.len());
    let mut selected: BTreeMap<&str, Vec<bool>> = grids
        .iter()
        .map(|(id, g)| (id.as_str(), vec![false; (g.rows * g.cols) as usize]))
        .collect();
    for &(_, id, row, col) in &cells[..keep] {
        let g = &grids[id];
        selected.get_mut(id).unwrap()[(row * g.cols + col) as usize] = true;
    }
    selected
}

fn overlap(grid: &CellGrid, mask: &[bool], bbox: &BoundingBox, metric: OverlapMetric) -> f64 {
    let mut inter = 0u64;
    let mut selected_area = 0u64;
    for row in 0..grid.rows {
        for col in 0..grid.cols {
            if !mask[(row * grid.cols + col) as usize] {
                continue;
            }
            let cell = grid.cell_box(row, col);
            selected_area += cell.area();
            inter += cell.intersection(bbox).map_or(0, |b| b.area());
        }
    }
    match metric {
        OverlapMetric::Coverage => inter as f64 / bbox.area() as f64,
        OverlapMetric::Iou => inter as f64 / (bbox.area() + selected_area - inter) as f64,
    }
}

/// Fraction of annotated boxes covered to at least `threshold` by the top
/// `x_percent` of all cells pooled across all queries.
pub fn top_x_accuracy(
    grids: &BTreeMap<String, CellGrid>,
    annotations: &[Annotation],
    x_percent: f64,
    threshold: f64,
    metric: OverlapMetric,
) -> Result<f64> {
    if !(x_percent > 0.0 && x_percent <= 100.0) {
        return Err(Error::InvalidArgument(format!(
            "top-X percentage {x_percent} outside (0, 100]"
        )));
    }
    let total: usize = annotations.iter().map(|a| a.boxes.len()).sum();
    if total == 0 {
        return Err(Error::InvalidArgument("no annotated boxes to evaluate".into()));
    }
    let selected = select_cells(grids, x_percent);
    let mut detected = 0usize;
    for ann in annotations {
        let grid = grids
            .get(&ann.query_id)
            .ok_or_else(|| Error::UnknownId(ann.query_id.clone()))?;
        let mask = &selected[ann.query_id.as_str()];
        for b in &ann.boxes {
            b.check_within(grid.width, grid.height)?;
            if overlap(grid, mask, b, metric) >= threshold {
                detected += 1;
            }
        }
    }
    Ok(detected as f64 / total as f64)
}

/// Accuracy for every (X, threshold) pair of one method.
#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyTable {
    pub x_percents: Vec<f64>,
    pub thresholds: Vec<f64>,
    /// `values[xi][ti]`.
    pub values: Vec<Vec<f64>>,
}

impl AccuracyTable {
    pub fn compute(
        grids: &BTreeMap<String, CellGrid>,
        annotations: &[Annotation],
        x_percents: &[f64],
        thresholds: &[f64],
        metric: OverlapMetric,
    ) -> Result<Self> {
        let values = x_percents
            .iter()
            .map(|&x| {
                thresholds
                    .iter()
                    .map(|&t| top_x_accuracy(grids, annotations, x, t, metric))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            x_percents: x_percents.to_vec(),
            thresholds: thresholds.to_vec(),
            values,
        })
    }

    pub fn get(&self, x_percent: f64, threshold: f64) -> Option<f64> {
        let xi = self.x_percents.iter().position(|&x| x == x_percent)?;
        let ti = self.thresholds.iter().position(|&t| t == threshold)?;
        Some(self.values[xi][ti])
    }
}

/// Renders one block per metric: rows are top-X, columns are grouped by
/// threshold with one column per method.
pub fn render_report(
    metrics: &[(OverlapMetric, Vec<(String, AccuracyTable)>)],
    cell_size: u32,
) -> String {
    let mut out = String::new();
    for (metric, methods) in metrics {
        let Some((_, first)) = methods.first() else {
            continue;
        };
        let _ = writeln!(
            out,
            "# top-X accuracy [%], metric={}, cell={}",
            metric.name(),
            cell_size
        );
        let mut header = String::from("top-X");
        for t in &first.thresholds {
            for (name, _) in methods {
                let _ = write!(header, "\t{}>={}% {}", metric.label(), fmt_num(t * 100.0), name);
            }
        }
        let _ = writeln!(out, "{header}");
        for (xi, x) in first.x_percents.iter().enumerate() {
            let _ = write!(out, "{}%", fmt_num(*x));
            for ti in 0..first.thresholds.len() {
                for (_, table) in methods {
                    let _ = write!(out, "\t{:.1}", table.values[xi][ti] * 100.0);
                }
            }
            out.push('\n');
        }
        out.push('\n');
    }
    out
}

fn fmt_num(v: f64) -> String {
    if v.fract() == 0.0 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

/// Reconstruction-error LoC of `query` through the background model of the
/// cluster holding `matched_reference`.
pub fn baseline_ae_locmap(
    ensemble: &AeEnsemble,
    query: &GrayImage,
    matched_reference: &str,
) -> Result<LocMap> {
    let model = ensemble.model_for(matched_reference)?;
    LocMap::new(query.width(), query.height(), model.image_error_map(query)?)
}
