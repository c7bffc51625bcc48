//! Tracking-by-detection association: hybrid IoU/appearance costs, optimal
//! assignment, and two-stage confidence-split matching.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::assignment::min_cost_assignment;
use crate::detection::Detection;
use crate::error::{Error, Result};
use crate::feedback::FlexiTrackInstance;
use crate::geometry::Geometry;
use crate::vector::cosine;

/// Cosine below which a zero-overlap pair is forbidden.
pub const APPEARANCE_GATE: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AssociationConfig {
    pub w_iou: f64,
    pub w_app: f64,
    /// Matches costlier than this are dissolved (first stage).
    pub max_cost: f64,
    /// Same, for the IoU-only second stage.
    pub max_cost_low: f64,
    /// Detections scoring at least this go to the first stage.
    pub tau_split: f64,
    pub geometry: Geometry,
}

impl Default for AssociationConfig {
    fn default() -> Self {
        Self {
            w_iou: 0.6,
            w_app: 0.4,
            max_cost: 0.8,
            max_cost_low: 0.5,
            tau_split: 0.5,
            geometry: Geometry::Cyclic,
        }
    }
}

impl AssociationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.w_iou < 0.0 || self.w_app < 0.0 || (self.w_iou + self.w_app - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!(
                "association weights must be non-negative and sum to 1 (got {} + {})",
                self.w_iou, self.w_app
            )));
        }
        if !(0.0..=1.0).contains(&self.tau_split) {
            return Err(Error::config("tau_split outside [0, 1]"));
        }
        Ok(())
    }

    /// Combined similarity in `[0, 1]`; one minus the hybrid cost.
    pub fn similarity(&self, iou: f64, cos: f64) -> f64 {
        self.w_iou * iou + self.w_app * (1.0 + cos) / 2.0
    }

    pub fn cost(&self, iou: f64, cos: f64) -> f64 {
        self.w_iou * (1.0 - iou) + self.w_app * (1.0 - cos) / 2.0
    }
}

/// Track-by-detection costs with a forbidden-pair mask.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    pub costs: Array2<f64>,
    /// `true` marks a forbidden pair.
    pub gate_mask: Array2<bool>,
}

impl CostMatrix {
    pub fn new(costs: Array2<f64>, gate_mask: Array2<bool>) -> Result<Self> {
        if costs.dim() != gate_mask.dim() {
            return Err(Error::input("cost and mask dimensions differ"));
        }
        if costs
            .iter()
            .zip(gate_mask.iter())
            .any(|(c, &m)| !m && !c.is_finite())
        {
            return Err(Error::input("non-finite cost on an allowed pair"));
        }
        Ok(Self { costs, gate_mask })
    }

    pub fn unmasked(costs: Array2<f64>) -> Self {
        let gate_mask = Array2::from_elem(costs.dim(), false);
        Self { costs, gate_mask }
    }

    pub fn rows(&self) -> usize {
        self.costs.nrows()
    }

    pub fn cols(&self) -> usize {
        self.costs.ncols()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AssignmentResult {
    /// `(track index, detection index)`, sorted by track index.
    pub matches: Vec<(usize, usize)>,
    pub unmatched_tracks: Vec<usize>,
    pub unmatched_detections: Vec<usize>,
}

/// Hybrid cost between track instances and detections.
pub fn hybrid_cost(
    tracks: &[FlexiTrackInstance],
    detections: &[Detection],
    cfg: &AssociationConfig,
) -> CostMatrix {
    let shape = (tracks.len(), detections.len());
    let mut costs = Array2::zeros(shape);
    let mut gate_mask = Array2::from_elem(shape, false);
    for (i, t) in tracks.iter().enumerate() {
        for (j, d) in detections.iter().enumerate() {
            let iou = cfg.geometry.iou(&t.anchor, &d.bbox);
            let cos = cosine(&t.feature, &d.embedding);
            costs[(i, j)] = cfg.cost(iou, cos);
            gate_mask[(i, j)] = iou == 0.0 && cos < APPEARANCE_GATE;
        }
    }
    CostMatrix { costs, gate_mask }
}

/// IoU-only cost (`1 − IoU`), forbidding non-overlapping pairs.
pub fn iou_cost(
    tracks: &[FlexiTrackInstance],
    detections: &[Detection],
    geometry: Geometry,
) -> CostMatrix {
    let shape = (tracks.len(), detections.len());
    let mut costs = Array2::zeros(shape);
    let mut gate_mask = Array2::from_elem(shape, false);
    for (i, t) in tracks.iter().enumerate() {
        for (j, d) in detections.iter().enumerate() {
            let iou = geometry.iou(&t.anchor, &d.bbox);
            costs[(i, j)] = 1.0 - iou;
            gate_mask[(i, j)] = iou == 0.0;
        }
    }
    CostMatrix { costs, gate_mask }
}

/// Optimal one-to-one assignment over allowed pairs.
///
/// The solver first maximizes the number of allowed pairs, then minimizes
/// their total cost; matches costlier than `max_cost` are then dissolved.
pub fn solve_assignment(c: &CostMatrix, max_cost: f64) -> AssignmentResult {
    let (rows, cols) = c.costs.dim();
    let mut result = AssignmentResult::default();
    if rows == 0 || cols == 0 {
        result.unmatched_tracks = (0..rows).collect();
        result.unmatched_detections = (0..cols).collect();
        return result;
    }
    // A forbidden cell costs more than any full assignment of allowed cells.
    let allowed_max = c
        .costs
        .iter()
        .zip(c.gate_mask.iter())
        .filter(|(_, &m)| !m)
        .map(|(v, _)| v.abs())
        .fold(0.0f64, f64::max);
    let forbidden = (allowed_max + 1.0) * (rows.min(cols) as f64 + 1.0);
    let dense = Array2::from_shape_fn((rows, cols), |ij| {
        if c.gate_mask[ij] {
            forbidden
        } else {
            c.costs[ij]
        }
    });
    let assignment = min_cost_assignment(&dense);
    let mut det_used = vec![false; cols];
    for (i, a) in assignment.into_iter().enumerate() {
        match a {
            Some(j) if !c.gate_mask[(i, j)] && c.costs[(i, j)] <= max_cost => {
                result.matches.push((i, j));
                det_used[j] = true;
            }
            _ => result.unmatched_tracks.push(i),
        }
    }
    result.unmatched_detections = (0..cols).filter(|&j| !det_used[j]).collect();
    result
}

/// Counts cost matrices built by the association branch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AssociationStats {
    pub cost_matrices: usize,
}

/// Two-stage association: confident detections against all tracks with the
/// hybrid cost, then weak detections against the leftover tracks by IoU.
pub fn staged_associate(
    tracks: &[FlexiTrackInstance],
    detections: &[Detection],
    cfg: &AssociationConfig,
    stats: &mut AssociationStats,
) -> AssignmentResult {
    let (high, low): (Vec<usize>, Vec<usize>) =
        (0..detections.len()).partition(|&j| detections[j].score >= cfg.tau_split);

    let high_dets: Vec<Detection> = high.iter().map(|&j| detections[j].clone()).collect();
    let first = solve_assignment(&hybrid_cost(tracks, &high_dets, cfg), cfg.max_cost);
    stats.cost_matrices += 1;

    let mut matches: Vec<(usize, usize)> =
        first.matches.iter().map(|&(i, j)| (i, high[j])).collect();
    let mut unmatched_detections: Vec<usize> =
        first.unmatched_detections.iter().map(|&j| high[j]).collect();
    let mut unmatched_tracks = first.unmatched_tracks.clone();

    if !low.is_empty() {
        let rest: Vec<FlexiTrackInstance> = unmatched_tracks
            .iter()
            .map(|&i| tracks[i].clone())
            .collect();
        let low_dets: Vec<Detection> = low.iter().map(|&j| detections[j].clone()).collect();
        let second = solve_assignment(&iou_cost(&rest, &low_dets, cfg.geometry), cfg.max_cost_low);
        stats.cost_matrices += 1;
        matches.extend(
            second
                .matches
                .iter()
                .map(|&(i, j)| (unmatched_tracks[i], low[j])),
        );
        unmatched_detections.extend(second.unmatched_detections.iter().map(|&j| low[j]));
        unmatched_tracks = second
            .unmatched_tracks
            .iter()
            .map(|&i| unmatched_tracks[i])
            .collect();
    }

    matches.sort_unstable();
    unmatched_tracks.sort_unstable();
    unmatched_detections.sort_unstable();
    AssignmentResult {
        matches,
        unmatched_tracks,
        unmatched_detections,
    }
}
