//! Overlap and contour-distance metrics for binary masks.

use std::fmt;

use crate::error::{Error, Result};
use crate::image::{MaskImage, Spacing};

fn check_dims(pred: &MaskImage, truth: &MaskImage) -> Result<()> {
    if (pred.height(), pred.width()) != (truth.height(), truth.width()) {
        return Err(Error::shape(format!(
            "prediction is {}x{} but truth is {}x{}",
            pred.height(),
            pred.width(),
            truth.height(),
            truth.width()
        )));
    }
    Ok(())
}

fn overlap(pred: &MaskImage, truth: &MaskImage) -> usize {
    pred.pixels()
        .iter()
        .zip(truth.pixels())
        .filter(|&(&p, &t)| p & t == 1)
        .count()
}

/// `2|P ∩ T| / (|P| + |T|)`, and 1 when both masks are empty.
pub fn dice(pred: &MaskImage, truth: &MaskImage) -> Result<f64> {
    check_dims(pred, truth)?;
    let total = pred.count() + truth.count();
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * overlap(pred, truth) as f64 / total as f64)
}

/// Foreground recall `TP / (TP + FN)`, and 1 when the truth is empty.
pub fn sensitivity(pred: &MaskImage, truth: &MaskImage) -> Result<f64> {
    check_dims(pred, truth)?;
    let positives = truth.count();
    if positives == 0 {
        return Ok(1.0);
    }
    Ok(overlap(pred, truth) as f64 / positives as f64)
}

/// Boundary pixel centers of a mask, in `(row, col)` pixel coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct ContourSet {
    points: Vec<(usize, usize)>,
    spacing: Spacing,
}

impl ContourSet {
    pub fn new(points: Vec<(usize, usize)>, spacing: Spacing) -> Self {
        ContourSet { points, spacing }
    }

    pub fn points(&self) -> &[(usize, usize)] {
        &self.points
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Foreground pixels with at least one background 4-neighbour; pixels
/// outside the image count as background. Points come out in raster order.
pub fn extract_contour(mask: &MaskImage, spacing: Spacing) -> ContourSet {
    let (h, w) = (mask.height(), mask.width());
    let mut points = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !mask.get(y, x) {
                continue;
            }
            let edge = y == 0
                || x == 0
                || y + 1 == h
                || x + 1 == w
                || !mask.get(y - 1, x)
                || !mask.get(y + 1, x)
                || !mask.get(y, x - 1)
                || !mask.get(y, x + 1);
            if edge {
                points.push((y, x));
            }
        }
    }
    ContourSet { points, spacing }
}

fn distance_mm(a: (usize, usize), b: (usize, usize), s: Spacing) -> f64 {
    let dy = (a.0 as f64 - b.0 as f64) * s.row;
    let dx = (a.1 as f64 - b.1 as f64) * s.col;
    (dy * dy + dx * dx).sqrt()
}

/// Uniform bucket grid over a point set for exact nearest-neighbour queries.
struct Grid<'a> {
    points: &'a [(usize, usize)],
    cell: usize,
    rows: usize,
    cols: usize,
    origin: (usize, usize),
    buckets: Vec<Vec<usize>>,
}

impl<'a> Grid<'a> {
    const CELL: usize = 4;

    fn new(points: &'a [(usize, usize)]) -> Self {
        let min_r = points.iter().map(|p| p.0).min().unwrap_or(0);
        let min_c = points.iter().map(|p| p.1).min().unwrap_or(0);
        let max_r = points.iter().map(|p| p.0).max().unwrap_or(0);
        let max_c = points.iter().map(|p| p.1).max().unwrap_or(0);
        let cell = Self::CELL;
        let rows = (max_r - min_r) / cell + 1;
        let cols = (max_c - min_c) / cell + 1;
        let mut buckets = vec![Vec::new(); rows * cols];
        for (i, p) in points.iter().enumerate() {
            buckets[(p.0 - min_r) / cell * cols + (p.1 - min_c) / cell].push(i);
        }
        Grid {
            points,
            cell,
            rows,
            cols,
            origin: (min_r, min_c),
            buckets,
        }
    }

    /// Distance from `q` to the nearest stored point.
    fn nearest(&self, q: (usize, usize), s: Spacing) -> f64 {
        let cell_of = |v: usize, o: usize, n: usize| (v.saturating_sub(o) / self.cell).min(n - 1) as isize;
        let (qr, qc) = (
            cell_of(q.0, self.origin.0, self.rows),
            cell_of(q.1, self.origin.1, self.cols),
        );
        let min_spacing = s.row.min(s.col);
        let max_ring = self.rows.max(self.cols) as isize + 1;
        let mut best = f64::INFINITY;
        for ring in 0..=max_ring {
            for r in qr - ring..=qr + ring {
                if r < 0 || r >= self.rows as isize {
                    continue;
                }
                let on_edge_row = r == qr - ring || r == qr + ring;
                let step = if on_edge_row { 1 } else { (2 * ring).max(1) };
                let mut c = qc - ring;
                while c <= qc + ring {
                    if c >= 0 && c < self.cols as isize {
                        for &i in &self.buckets[r as usize * self.cols + c as usize] {
                            best = best.min(distance_mm(q, self.points[i], s));
                        }
                    }
                    c += step;
                }
            }
            // Cells beyond this ring sit more than `ring · cell` pixels away
            // along at least one axis. Queries outside the grid are clamped to
            // an edge cell, which only makes that bound more conservative.
            if best <= (ring as usize * self.cell) as f64 * min_spacing {
                break;
            }
        }
        best
    }
}

fn directed_mean(from: &ContourSet, to: &Grid, s: Spacing) -> f64 {
    from.points.iter().map(|&p| to.nearest(p, s)).sum::<f64>() / from.len() as f64
}

/// Symmetric average contour distance in millimetres: the mean nearest
/// distance from `pred` to `truth` averaged with the reverse direction.
/// Distances use the spacing of `truth`.
pub fn apd(pred: &ContourSet, truth: &ContourSet) -> Result<f64> {
    if pred.is_empty() || truth.is_empty() {
        return Err(Error::UndefinedMetric(format!(
            "average contour distance needs two non-empty contours (got {} and {} points)",
            pred.len(),
            truth.len()
        )));
    }
    let s = truth.spacing;
    let forward = directed_mean(pred, &Grid::new(&truth.points), s);
    let backward = directed_mean(truth, &Grid::new(&pred.points), s);
    Ok((forward + backward) / 2.0)
}

/// Summary over a set of cases.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub dice_mean: f64,
    /// Population standard deviation.
    pub dice_std: f64,
    pub sensitivity: f64,
    /// Mean over cases where both contours exist; NaN if there are none.
    pub apd_mm: f64,
    pub n_cases: usize,
    /// Cases left out of `apd_mm` because a contour was empty.
    pub apd_excluded: usize,
}

pub const REPORT_CSV_HEADER: [&str; 7] = [
    "model",
    "augmented",
    "dice_mean",
    "dice_std",
    "sensitivity",
    "apd_mm",
    "n_cases",
];

fn fmt_metric(v: f64) -> String {
    if v.is_nan() {
        "nan".to_string()
    } else {
        format!("{v:.6}")
    }
}

impl EvalReport {
    /// Values for one row under [`REPORT_CSV_HEADER`].
    pub fn csv_row(&self, model: &str, augmented: bool) -> Vec<String> {
        vec![
            model.to_string(),
            augmented.to_string(),
            fmt_metric(self.dice_mean),
            fmt_metric(self.dice_std),
            fmt_metric(self.sensitivity),
            fmt_metric(self.apd_mm),
            self.n_cases.to_string(),
        ]
    }
}

impl fmt::Display for EvalReport {
    /// Flat `key = value` lines.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "dice_mean = {}", fmt_metric(self.dice_mean))?;
        writeln!(f, "dice_std = {}", fmt_metric(self.dice_std))?;
        writeln!(f, "sensitivity = {}", fmt_metric(self.sensitivity))?;
        writeln!(f, "apd_mm = {}", fmt_metric(self.apd_mm))?;
        writeln!(f, "n_cases = {}", self.n_cases)?;
        writeln!(f, "apd_excluded = {}", self.apd_excluded)
    }
}

/// Per-case metrics aggregated into a report.
pub fn evaluate(preds: &[MaskImage], truths: &[MaskImage], spacing: Spacing) -> Result<EvalReport> {
    if preds.is_empty() || preds.len() != truths.len() {
        return Err(Error::Contract(format!(
            "evaluate needs equal non-empty case lists, got {} predictions and {} truths",
            preds.len(),
            truths.len()
        )));
    }
    let n = preds.len() as f64;
    let mut dices = Vec::with_capacity(preds.len());
    let mut sens = 0.0;
    let mut apd_sum = 0.0;
    let mut apd_count = 0usize;
    for (p, t) in preds.iter().zip(truths) {
        dices.push(dice(p, t)?);
        sens += sensitivity(p, t)?;
        match apd(&extract_contour(p, spacing), &extract_contour(t, spacing)) {
            Ok(d) => {
                apd_sum += d;
                apd_count += 1;
            }
            Err(Error::UndefinedMetric(_)) => {}
            Err(e) => return Err(e),
        }
    }
    let dice_mean = dices.iter().sum::<f64>() / n;
    let dice_var = dices.iter().map(|d| (d - dice_mean).powi(2)).sum::<f64>() / n;
    Ok(EvalReport {
        dice_mean,
        dice_std: dice_var.sqrt(),
        sensitivity: sens / n,
        apd_mm: if apd_count == 0 {
            f64::NAN
        } else {
            apd_sum / apd_count as f64
        },
        n_cases: preds.len(),
        apd_excluded: preds.len() - apd_count,
    })
}
