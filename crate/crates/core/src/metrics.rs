//! Tracking metrics on the cylinder: HOTA (with DetA and AssA), CLEAR-MOT
//! MOTA, IDF1 and per-frame OSPA.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::assignment::min_cost_assignment;
use crate::association::{solve_assignment, CostMatrix};
use crate::error::{Error, Result};
use crate::geometry::{Geometry, PanoBox};

/// A box with an identity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Labeled {
    pub id: u64,
    pub bbox: PanoBox,
}

impl Labeled {
    pub fn new(id: u64, bbox: PanoBox) -> Self {
        Self { id, bbox }
    }
}

/// Per-frame labeled boxes; `frames[k]` is frame `k + 1`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Sequence {
    frames: Vec<Vec<Labeled>>,
}

impl Sequence {
    pub fn new(frames: Vec<Vec<Labeled>>) -> Result<Self> {
        for (k, f) in frames.iter().enumerate() {
            let ids: BTreeSet<u64> = f.iter().map(|l| l.id).collect();
            if ids.len() != f.len() {
                return Err(Error::input(format!("frame {}: duplicate ids", k + 1)));
            }
        }
        Ok(Self { frames })
    }

    /// `n` empty frames.
    pub fn empty(n: usize) -> Self {
        Self {
            frames: vec![Vec::new(); n],
        }
    }

    /// Groups `(frame, labeled)` records; frames are 1-based and the
    /// sequence spans `1..=n_frames`.
    pub fn from_records(
        records: impl IntoIterator<Item = (u64, Labeled)>,
        n_frames: usize,
    ) -> Result<Self> {
        let mut frames = vec![Vec::new(); n_frames];
        for (f, l) in records {
            if f == 0 || f as usize > n_frames {
                return Err(Error::input(format!("frame {f} outside 1..={n_frames}")));
            }
            frames[f as usize - 1].push(l);
        }
        Self::new(frames)
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frames(&self) -> &[Vec<Labeled>] {
        &self.frames
    }

    /// Boxes in 1-based frame `f`.
    pub fn frame(&self, f: usize) -> &[Labeled] {
        &self.frames[f - 1]
    }

    pub fn box_count(&self) -> usize {
        self.frames.iter().map(Vec::len).sum()
    }

    pub fn ids(&self) -> BTreeSet<u64> {
        self.frames.iter().flatten().map(|l| l.id).collect()
    }

    /// The same sequence rotated by `s` in azimuth.
    pub fn shifted(&self, s: f64) -> Self {
        Self {
            frames: self
                .frames
                .iter()
                .map(|f| {
                    f.iter()
                        .map(|l| Labeled::new(l.id, l.bbox.shifted(s)))
                        .collect()
                })
                .collect(),
        }
    }

    /// The same sequence with ids mapped through `f`, which must be injective.
    pub fn relabeled(&self, f: impl Fn(u64) -> u64) -> Self {
        Self {
            frames: self
                .frames
                .iter()
                .map(|fr| fr.iter().map(|l| Labeled::new(f(l.id), l.bbox)).collect())
                .collect(),
        }
    }

    /// Removes the box of `id` in 1-based frame `f`, if present.
    pub fn without(&self, f: usize, id: u64) -> Self {
        let mut out = self.clone();
        out.frames[f - 1].retain(|l| l.id != id);
        out
    }
}

fn check_aligned(gt: &Sequence, pred: &Sequence) -> Result<()> {
    if gt.len() != pred.len() {
        return Err(Error::input(format!(
            "ground truth spans {} frames but predictions span {}",
            gt.len(),
            pred.len()
        )));
    }
    Ok(())
}

fn iou_matrix(a: &[Labeled], b: &[Labeled], geometry: Geometry) -> Array2<f64> {
    Array2::from_shape_fn((a.len(), b.len()), |(i, j)| geometry.iou(&a[i].bbox, &b[j].bbox))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MotCounts {
    pub gt: usize,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub idsw: usize,
}

/// CLEAR-MOT accuracy. A ground-truth object keeps its previous partner
/// while their IoU stays at or above `iou_thresh`; the remaining objects are
/// matched optimally. With no ground truth at all but some predictions, the
/// result is negative infinity.
pub fn eval_mota(gt: &Sequence, pred: &Sequence, iou_thresh: f64) -> Result<(f64, MotCounts)> {
    eval_mota_with(gt, pred, iou_thresh, Geometry::Cyclic)
}

pub fn eval_mota_with(
    gt: &Sequence,
    pred: &Sequence,
    iou_thresh: f64,
    geometry: Geometry,
) -> Result<(f64, MotCounts)> {
    check_aligned(gt, pred)?;
    let mut counts = MotCounts::default();
    let mut last: BTreeMap<u64, u64> = BTreeMap::new();
    for (g, p) in gt.frames().iter().zip(pred.frames()) {
        let iou = iou_matrix(g, p, geometry);
        let mut gt_used = vec![false; g.len()];
        let mut pred_used = vec![false; p.len()];
        let mut matches: Vec<(usize, usize)> = Vec::new();
        for (i, gl) in g.iter().enumerate() {
            if let Some(&pid) = last.get(&gl.id) {
                if let Some(j) = p.iter().position(|pl| pl.id == pid) {
                    if !pred_used[j] && iou[(i, j)] >= iou_thresh {
                        gt_used[i] = true;
                        pred_used[j] = true;
                        matches.push((i, j));
                    }
                }
            }
        }
        let rows: Vec<usize> = (0..g.len()).filter(|&i| !gt_used[i]).collect();
        let cols: Vec<usize> = (0..p.len()).filter(|&j| !pred_used[j]).collect();
        let sub = Array2::from_shape_fn((rows.len(), cols.len()), |(a, b)| {
            1.0 - iou[(rows[a], cols[b])]
        });
        let mask =
            Array2::from_shape_fn(sub.dim(), |(a, b)| iou[(rows[a], cols[b])] < iou_thresh);
        let cm = CostMatrix::new(sub, mask).expect("finite costs");
        for (a, b) in solve_assignment(&cm, f64::INFINITY).matches {
            let (i, j) = (rows[a], cols[b]);
            if let Some(&prev) = last.get(&g[i].id) {
                if prev != p[j].id {
                    counts.idsw += 1;
                }
            }
            matches.push((i, j));
        }
        for &(i, j) in &matches {
            last.insert(g[i].id, p[j].id);
        }
        counts.gt += g.len();
        counts.tp += matches.len();
        counts.fn_ += g.len() - matches.len();
        counts.fp += p.len() - matches.len();
    }
    let mota = if counts.gt == 0 {
        if counts.fp == 0 {
            1.0
        } else {
            f64::NEG_INFINITY
        }
    } else {
        1.0 - (counts.fn_ + counts.fp + counts.idsw) as f64 / counts.gt as f64
    };
    Ok((mota, counts))
}

/// Identity F1 over a global one-to-one mapping of ground-truth ids to
/// predicted ids that maximizes co-located frames.
pub fn eval_idf1(gt: &Sequence, pred: &Sequence, iou_thresh: f64) -> Result<f64> {
    eval_idf1_with(gt, pred, iou_thresh, Geometry::Cyclic)
}

pub fn eval_idf1_with(
    gt: &Sequence,
    pred: &Sequence,
    iou_thresh: f64,
    geometry: Geometry,
) -> Result<f64> {
    check_aligned(gt, pred)?;
    let gt_ids: Vec<u64> = gt.ids().into_iter().collect();
    let pred_ids: Vec<u64> = pred.ids().into_iter().collect();
    let gi: BTreeMap<u64, usize> = gt_ids.iter().enumerate().map(|(k, &v)| (v, k)).collect();
    let pi: BTreeMap<u64, usize> = pred_ids.iter().enumerate().map(|(k, &v)| (v, k)).collect();
    let mut overlap = Array2::<f64>::zeros((gt_ids.len(), pred_ids.len()));
    for (g, p) in gt.frames().iter().zip(pred.frames()) {
        for gl in g {
            for pl in p {
                if geometry.iou(&gl.bbox, &pl.bbox) >= iou_thresh {
                    overlap[(gi[&gl.id], pi[&pl.id])] += 1.0;
                }
            }
        }
    }
    let (n_gt, n_pred) = (gt.box_count(), pred.box_count());
    if n_gt + n_pred == 0 {
        return Ok(1.0);
    }
    let idtp: f64 = min_cost_assignment(&overlap.mapv(|c| -c))
        .into_iter()
        .enumerate()
        .filter_map(|(i, j)| j.map(|j| overlap[(i, j)]))
        .sum();
    Ok(2.0 * idtp / (n_gt + n_pred) as f64)
}

/// Localization thresholds `0.05, 0.10, …, 0.95`.
pub fn hota_alphas() -> Vec<f64> {
    (1..=19).map(|k| k as f64 / 20.0).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HotaAlpha {
    pub alpha: f64,
    pub hota: f64,
    pub deta: f64,
    pub assa: f64,
    pub tp: usize,
    pub fn_: usize,
    pub fp: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HotaReport {
    pub hota: f64,
    pub deta: f64,
    pub assa: f64,
    pub per_alpha: Vec<HotaAlpha>,
}

/// Global alignment score between every ground-truth and predicted id,
/// accumulated from normalized per-frame IoU.
pub fn alignment_scores(
    gt: &Sequence,
    pred: &Sequence,
    geometry: Geometry,
) -> (BTreeMap<(u64, u64), f64>, BTreeMap<u64, usize>, BTreeMap<u64, usize>) {
    let mut potential: BTreeMap<(u64, u64), f64> = BTreeMap::new();
    let mut gt_count: BTreeMap<u64, usize> = BTreeMap::new();
    let mut pred_count: BTreeMap<u64, usize> = BTreeMap::new();
    for (g, p) in gt.frames().iter().zip(pred.frames()) {
        for l in g {
            *gt_count.entry(l.id).or_default() += 1;
        }
        for l in p {
            *pred_count.entry(l.id).or_default() += 1;
        }
        if g.is_empty() || p.is_empty() {
            continue;
        }
        let sim = iou_matrix(g, p, geometry);
        let row_sums: Vec<f64> = sim.rows().into_iter().map(|r| r.sum()).collect();
        let col_sums: Vec<f64> = sim.columns().into_iter().map(|c| c.sum()).collect();
        for ((i, j), &s) in sim.indexed_iter() {
            let denom = row_sums[i] + col_sums[j] - s;
            if s > 0.0 && denom > f64::EPSILON {
                *potential.entry((g[i].id, p[j].id)).or_default() += s / denom;
            }
        }
    }
    let align = potential
        .into_iter()
        .map(|((g, p), v)| {
            let denom = gt_count[&g] as f64 + pred_count[&p] as f64 - v;
            ((g, p), v / denom)
        })
        .collect();
    (align, gt_count, pred_count)
}

/// HOTA averaged over the 19 localization thresholds. At each threshold the
/// per-frame matching maximizes the number of pairs with IoU ≥ α and, among
/// those, the total of alignment score times IoU.
pub fn eval_hota(gt: &Sequence, pred: &Sequence) -> Result<HotaReport> {
    eval_hota_with(gt, pred, Geometry::Cyclic)
}

pub fn eval_hota_with(gt: &Sequence, pred: &Sequence, geometry: Geometry) -> Result<HotaReport> {
    check_aligned(gt, pred)?;
    let (align, gt_count, pred_count) = alignment_scores(gt, pred, geometry);
    let sims: Vec<Array2<f64>> = gt
        .frames()
        .iter()
        .zip(pred.frames())
        .map(|(g, p)| iou_matrix(g, p, geometry))
        .collect();
    let (n_gt, n_pred) = (gt.box_count(), pred.box_count());

    let per_alpha: Vec<HotaAlpha> = hota_alphas()
        .into_iter()
        .map(|alpha| {
            let mut pair_counts: BTreeMap<(u64, u64), usize> = BTreeMap::new();
            let mut tp = 0usize;
            for ((g, p), sim) in gt.frames().iter().zip(pred.frames()).zip(&sims) {
                if g.is_empty() || p.is_empty() {
                    continue;
                }
                let allowed = sim.mapv(|s| s < alpha - f64::EPSILON);
                let costs = Array2::from_shape_fn(sim.dim(), |(i, j)| {
                    -align.get(&(g[i].id, p[j].id)).copied().unwrap_or(0.0) * sim[(i, j)]
                });
                let cm = CostMatrix::new(costs, allowed).expect("finite costs");
                for (i, j) in solve_assignment(&cm, f64::INFINITY).matches {
                    tp += 1;
                    *pair_counts.entry((g[i].id, p[j].id)).or_default() += 1;
                }
            }
            hota_from_counts(alpha, tp, n_gt, n_pred, &pair_counts, &gt_count, &pred_count)
        })
        .collect();

    let mean = |f: fn(&HotaAlpha) -> f64| per_alpha.iter().map(f).sum::<f64>() / per_alpha.len() as f64;
    Ok(HotaReport {
        hota: mean(|a| a.hota),
        deta: mean(|a| a.deta),
        assa: mean(|a| a.assa),
        per_alpha,
    })
}

/// Assembles HOTA at one threshold from match counts.
pub fn hota_from_counts(
    alpha: f64,
    tp: usize,
    n_gt: usize,
    n_pred: usize,
    pair_counts: &BTreeMap<(u64, u64), usize>,
    gt_count: &BTreeMap<u64, usize>,
    pred_count: &BTreeMap<u64, usize>,
) -> HotaAlpha {
    let fn_ = n_gt - tp;
    let fp = n_pred - tp;
    if n_gt + n_pred == 0 {
        return HotaAlpha {
            alpha,
            hota: 1.0,
            deta: 1.0,
            assa: 1.0,
            tp,
            fn_,
            fp,
        };
    }
    let deta = tp as f64 / (tp + fn_ + fp) as f64;
    let assa = if tp == 0 {
        0.0
    } else {
        pair_counts
            .iter()
            .map(|(&(g, p), &c)| {
                let c = c as f64;
                c * c / (gt_count[&g] as f64 + pred_count[&p] as f64 - c)
            })
            .sum::<f64>()
            / tp as f64
    };
    HotaAlpha {
        alpha,
        hota: (deta * assa).sqrt(),
        deta,
        assa,
        tp,
        fn_,
        fp,
    }
}

/// Per-frame OSPA with base distance `min(cutoff, 1 − IoU)`, averaged over
/// frames.
pub fn eval_ospa(gt: &Sequence, pred: &Sequence, cutoff: f64, order: f64) -> Result<f64> {
    eval_ospa_with(gt, pred, cutoff, order, Geometry::Cyclic)
}

pub fn eval_ospa_with(
    gt: &Sequence,
    pred: &Sequence,
    cutoff: f64,
    order: f64,
    geometry: Geometry,
) -> Result<f64> {
    check_aligned(gt, pred)?;
    if !(cutoff > 0.0) || !(order > 0.0) {
        return Err(Error::config("OSPA cutoff and order must be positive"));
    }
    if gt.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = gt
        .frames()
        .iter()
        .zip(pred.frames())
        .map(|(g, p)| ospa_frame(g, p, cutoff, order, geometry))
        .sum();
    Ok(total / gt.len() as f64)
}

fn ospa_frame(g: &[Labeled], p: &[Labeled], cutoff: f64, order: f64, geometry: Geometry) -> f64 {
    let (small, large) = if g.len() <= p.len() { (g, p) } else { (p, g) };
    let (m, n) = (small.len(), large.len());
    if n == 0 {
        return 0.0;
    }
    if m == 0 {
        return cutoff;
    }
    let cost = Array2::from_shape_fn((m, n), |(i, j)| {
        libm::pow((1.0 - geometry.iou(&small[i].bbox, &large[j].bbox)).min(cutoff), order)
    });
    let matched: f64 = min_cost_assignment(&cost)
        .into_iter()
        .enumerate()
        .filter_map(|(i, j)| j.map(|j| cost[(i, j)]))
        .sum();
    let penalty = libm::pow(cutoff, order) * (n - m) as f64;
    libm::pow((matched + penalty) / n as f64, 1.0 / order)
}

/// Evaluation settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// IoU threshold for MOTA and IDF1.
    pub iou_thresh: f64,
    pub ospa_cutoff: f64,
    pub ospa_order: f64,
    pub geometry: Geometry,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_thresh: 0.5,
            ospa_cutoff: 1.0,
            ospa_order: 1.0,
            geometry: Geometry::Cyclic,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub hota: f64,
    pub deta: f64,
    pub assa: f64,
    pub mota: f64,
    pub idf1: f64,
    pub ospa: f64,
    pub counts: MotCounts,
    pub per_alpha: Vec<HotaAlpha>,
}

pub fn evaluate(gt: &Sequence, pred: &Sequence, cfg: &EvalConfig) -> Result<MetricReport> {
    let h = eval_hota_with(gt, pred, cfg.geometry)?;
    let (mota, counts) = eval_mota_with(gt, pred, cfg.iou_thresh, cfg.geometry)?;
    let idf1 = eval_idf1_with(gt, pred, cfg.iou_thresh, cfg.geometry)?;
    let ospa = eval_ospa_with(gt, pred, cfg.ospa_cutoff, cfg.ospa_order, cfg.geometry)?;
    Ok(MetricReport {
        hota: h.hota,
        deta: h.deta,
        assa: h.assa,
        mota,
        idf1,
        ospa,
        counts,
        per_alpha: h.per_alpha,
    })
}

/// Averages reports weighted by ground-truth box counts; counts are summed.
pub fn aggregate(reports: &[MetricReport]) -> Option<MetricReport> {
    let first = reports.first()?;
    let total: usize = reports.iter().map(|r| r.counts.gt).sum();
    let weight = |r: &MetricReport| {
        if total == 0 {
            1.0 / reports.len() as f64
        } else {
            r.counts.gt as f64 / total as f64
        }
    };
    let avg = |f: fn(&MetricReport) -> f64| reports.iter().map(|r| weight(r) * f(r)).sum::<f64>();
    let mut counts = MotCounts::default();
    for r in reports {
        counts.gt += r.counts.gt;
        counts.tp += r.counts.tp;
        counts.fp += r.counts.fp;
        counts.fn_ += r.counts.fn_;
        counts.idsw += r.counts.idsw;
    }
    let per_alpha = (0..first.per_alpha.len())
        .map(|k| {
            let w = |f: fn(&HotaAlpha) -> f64| {
                reports.iter().map(|r| weight(r) * f(&r.per_alpha[k])).sum::<f64>()
            };
            HotaAlpha {
                alpha: first.per_alpha[k].alpha,
                hota: w(|a| a.hota),
                deta: w(|a| a.deta),
                assa: w(|a| a.assa),
                tp: reports.iter().map(|r| r.per_alpha[k].tp).sum(),
                fn_: reports.iter().map(|r| r.per_alpha[k].fn_).sum(),
                fp: reports.iter().map(|r| r.per_alpha[k].fp).sum(),
            }
        })
        .collect();
    Some(MetricReport {
        hota: avg(|r| r.hota),
        deta: avg(|r| r.deta),
        assa: avg(|r| r.assa),
        mota: avg(|r| r.mota),
        idf1: avg(|r| r.idf1),
        ospa: avg(|r| r.ospa),
        counts,
        per_alpha,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(cu: f64) -> PanoBox {
        PanoBox::new(cu, 0.5, 0.04, 0.2).unwrap()
    }

    fn single(n: usize, id_of: impl Fn(usize) -> u64) -> Sequence {
        Sequence::new(
            (0..n)
                .map(|k| vec![Labeled::new(id_of(k), bx(0.1 + 0.01 * k as f64))])
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn perfect_tracking() {
        let gt = single(10, |_| 1);
        let (mota, c) = eval_mota(&gt, &gt, 0.5).unwrap();
        assert_eq!(mota, 1.0);
        assert_eq!((c.fp, c.fn_, c.idsw), (0, 0, 0));
        assert_eq!(eval_idf1(&gt, &gt, 0.5).unwrap(), 1.0);
        let h = eval_hota(&gt, &gt).unwrap();
        assert_eq!((h.hota, h.deta, h.assa), (1.0, 1.0, 1.0));
        assert_eq!(eval_ospa(&gt, &gt, 1.0, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn id_swap_halves_idf1() {
        let gt = single(10, |_| 1);
        let pred = single(10, |k| if k < 5 { 7 } else { 8 });
        assert!((eval_idf1(&gt, &pred, 0.5).unwrap() - 0.5).abs() < 1e-12);
        let (mota, c) = eval_mota(&gt, &pred, 0.5).unwrap();
        assert_eq!(c.idsw, 1);
        assert!((mota - 0.9).abs() < 1e-12);
    }

    #[test]
    fn missing_predictions() {
        let gt = Sequence::new(
            (0..10)
                .map(|k| vec![Labeled::new(k as u64, bx(0.05 * k as f64 + 0.02))])
                .collect(),
        )
        .unwrap();
        let pred = Sequence::new(
            gt.frames()
                .iter()
                .enumerate()
                .map(|(k, f)| if k < 3 { vec![] } else { f.clone() })
                .collect(),
        )
        .unwrap();
        assert!((eval_mota(&gt, &pred, 0.5).unwrap().0 - 0.7).abs() < 1e-12);
        let empty = Sequence::empty(10);
        assert_eq!(eval_idf1(&gt, &empty, 0.5).unwrap(), 0.0);
        assert_eq!(eval_hota(&gt, &empty).unwrap().hota, 0.0);
    }

    #[test]
    fn ospa_cardinality_miss() {
        let gt = Sequence::new(vec![vec![Labeled::new(1, bx(0.1)), Labeled::new(2, bx(0.5))]]).unwrap();
        let pred = Sequence::new(vec![vec![Labeled::new(1, bx(0.1))]]).unwrap();
        assert!((eval_ospa(&gt, &pred, 1.0, 1.0).unwrap() - 0.5).abs() < 1e-12);
        let e = Sequence::empty(3);
        assert_eq!(eval_ospa(&e, &e, 1.0, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn empty_gt_with_predictions() {
        let e = Sequence::empty(2);
        let pred = single(2, |_| 1);
        let (mota, c) = eval_mota(&e, &pred, 0.5).unwrap();
        assert_eq!(mota, f64::NEG_INFINITY);
        assert_eq!(c.fp, 2);
        assert_eq!(eval_idf1(&e, &e, 0.5).unwrap(), 1.0);
    }

    #[test]
    fn misaligned_sequences_are_rejected() {
        assert!(eval_hota(&Sequence::empty(2), &Sequence::empty(3)).is_err());
    }

    #[test]
    fn duplicate_ids_rejected() {
        assert!(Sequence::new(vec![vec![Labeled::new(1, bx(0.1)), Labeled::new(1, bx(0.3))]]).is_err());
    }
}
