//! Ablation suites over the synthetic occlusion benchmark.

use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalConfig, Labeled, MetricReport, Sequence};
use crate::synth::{generate, ScenarioConfig, SyntheticSequence};
use crate::tracker::{FrameResult, InstanceSource, Tracker, TrackerConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Components,
    Flexitrack,
    Thresholds,
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "components" => Ok(Self::Components),
            "flexitrack" => Ok(Self::Flexitrack),
            "thresholds" => Ok(Self::Thresholds),
            _ => Err(Error::config(format!("unknown suite `{s}`"))),
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Components => "components",
            Self::Flexitrack => "flexitrack",
            Self::Thresholds => "thresholds",
        })
    }
}

#[cfg(feature = "parallel")]
fn map_all<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync + Send) -> Vec<R> {
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn map_all<T, R>(items: &[T], f: impl Fn(&T) -> R) -> Vec<R> {
    items.iter().map(f).collect()
}

/// A set of generated sequences shared by every row of a suite.
#[derive(Debug, Clone)]
pub struct Benchmark {
    pub sequences: Vec<SyntheticSequence>,
    pub eval: EvalConfig,
}

impl Benchmark {
    pub fn generate(scenarios: &[ScenarioConfig]) -> Result<Self> {
        let sequences = map_all(scenarios, generate).into_iter().collect::<Result<_>>()?;
        Ok(Self {
            sequences,
            eval: EvalConfig::default(),
        })
    }

    /// The occlusion scenario for seeds `0..n_seeds`.
    pub fn occlusion(n_seeds: u64) -> Result<Self> {
        Self::generate(&(0..n_seeds).map(ScenarioConfig::occlusion).collect::<Vec<_>>())
    }

    /// Same, with every sequence cut to `seq_len` frames.
    pub fn occlusion_with_len(n_seeds: u64, seq_len: usize) -> Result<Self> {
        let scenarios: Vec<_> = (0..n_seeds)
            .map(|s| ScenarioConfig {
                seq_len,
                ..ScenarioConfig::occlusion(s)
            })
            .collect();
        Self::generate(&scenarios)
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }
}

/// Converts tracker outputs into a labelled sequence.
pub fn predictions(results: &[FrameResult]) -> Result<Sequence> {
    Sequence::new(
        results
            .iter()
            .map(|r| r.outputs.iter().map(|o| Labeled::new(o.id.0, o.bbox)).collect())
            .collect(),
    )
}

pub fn track_sequence(cfg: &TrackerConfig, seq: &SyntheticSequence) -> Result<Vec<FrameResult>> {
    Tracker::new(cfg.clone())?.run(seq.frames())
}

pub fn run_sequence(cfg: &TrackerConfig, seq: &SyntheticSequence, eval: &EvalConfig) -> Result<MetricReport> {
    let results = track_sequence(cfg, seq)?;
    evaluate(&seq.gt, &predictions(&results)?, eval)
}

/// Unweighted per-sequence means of the headline metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub label: String,
    pub hota: f64,
    pub deta: f64,
    pub assa: f64,
    pub mota: f64,
    pub idf1: f64,
    pub ospa: f64,
    pub idsw: usize,
}

impl AblationRow {
    fn mean(label: &str, reports: &[MetricReport]) -> Self {
        let n = reports.len().max(1) as f64;
        let avg = |f: fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        Self {
            label: label.to_string(),
            hota: avg(|r| r.hota),
            deta: avg(|r| r.deta),
            assa: avg(|r| r.assa),
            mota: avg(|r| r.mota),
            idf1: avg(|r| r.idf1),
            ospa: avg(|r| r.ospa),
            idsw: reports.iter().map(|r| r.counts.idsw).sum(),
        }
    }
}

/// Runs every configuration on every sequence and averages per configuration.
pub fn run_grid(labelled: &[(String, TrackerConfig)], bench: &Benchmark) -> Result<Vec<AblationRow>> {
    for (_, cfg) in labelled {
        cfg.validate()?;
    }
    let jobs: Vec<(usize, usize)> = (0..labelled.len())
        .flat_map(|c| (0..bench.len()).map(move |s| (c, s)))
        .collect();
    let reports = map_all(&jobs, |&(c, s)| run_sequence(&labelled[c].1, &bench.sequences[s], &bench.eval))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(labelled
        .iter()
        .enumerate()
        .map(|(c, (label, _))| {
            let n = bench.len();
            AblationRow::mean(label, &reports[c * n..(c + 1) * n])
        })
        .collect())
}

/// Baseline, +memory, +DSSM and both.
pub fn components(base: &TrackerConfig, bench: &Benchmark) -> Result<Vec<AblationRow>> {
    let variant = |memory: bool, dssm: bool| {
        let mut cfg = base.clone();
        cfg.memory.enabled = memory;
        cfg.dssm = dssm;
        cfg
    };
    let grid = vec![
        ("baseline".to_string(), variant(false, false)),
        ("+etm".to_string(), variant(true, false)),
        ("+dssm".to_string(), variant(false, true)),
        ("+both".to_string(), variant(true, true)),
    ];
    run_grid(&grid, bench)
}

/// One row per instance source.
pub fn flexitrack(base: &TrackerConfig, bench: &Benchmark) -> Result<Vec<AblationRow>> {
    let grid: Vec<_> = [
        InstanceSource::None,
        InstanceSource::Feedback,
        InstanceSource::Denoise,
        InstanceSource::Both,
    ]
    .into_iter()
    .map(|instances| {
        (
            instances.to_string(),
            TrackerConfig {
                instances,
                ..base.clone()
            },
        )
    })
    .collect();
    run_grid(&grid, bench)
}

/// CSV with absolute metrics and deltas against the first row.
pub fn rows_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("row,hota,deta,assa,mota,idf1,ospa,idsw,d_hota,d_idf1,d_ospa,d_mota\n");
    let Some(base) = rows.first() else {
        return out;
    };
    for r in rows {
        let _ = writeln!(
            out,
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{},{:.6},{:.6},{:.6},{:.6}",
            r.label,
            r.hota,
            r.deta,
            r.assa,
            r.mota,
            r.idf1,
            r.ospa,
            r.idsw,
            r.hota - base.hota,
            r.idf1 - base.idf1,
            r.ospa - base.ospa,
            r.mota - base.mota,
        );
    }
    out
}

/// Fixed-width table of the same numbers, for terminals.
pub fn rows_table(rows: &[AblationRow]) -> String {
    let mut out = format!(
        "{:<10} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7} {:>8}\n",
        "row", "HOTA", "DetA", "AssA", "MOTA", "IDF1", "OSPA", "dHOTA"
    );
    let base = rows.first().map_or(0.0, |r| r.hota);
    for r in rows {
        let _ = writeln!(
            out,
            "{:<10} {:>7.2} {:>7.2} {:>7.2} {:>7.2} {:>7.2} {:>7.3} {:>+8.2}",
            r.label,
            100.0 * r.hota,
            100.0 * r.deta,
            100.0 * r.assa,
            100.0 * r.mota,
            100.0 * r.idf1,
            r.ospa,
            100.0 * (r.hota - base)
        );
    }
    out
}

/// The 0.1-step grid `0.0, 0.1, ..., 1.0`.
pub fn threshold_grid() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 10.0).collect()
}

/// Mean HOTA over the benchmark for each `(tau_init, tau_update)` pair.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdSurface {
    pub taus: Vec<f64>,
    /// `hota[i][u]` for `tau_init = taus[i]`, `tau_update = taus[u]`.
    pub hota: Vec<Vec<f64>>,
}

impl ThresholdSurface {
    /// Index of the best cell; ties go to the first in row-major order.
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = (0, 0);
        for (i, row) in self.hota.iter().enumerate() {
            for (u, &h) in row.iter().enumerate() {
                if h > self.hota[best.0][best.1] {
                    best = (i, u);
                }
            }
        }
        best
    }

    /// True when the best cell is on neither boundary row nor boundary column.
    pub fn max_is_interior(&self) -> bool {
        let (i, u) = self.argmax();
        let n = self.taus.len();
        i > 0 && u > 0 && i + 1 < n && u + 1 < n
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("tau_init,tau_update,hota\n");
        for (i, row) in self.hota.iter().enumerate() {
            for (u, h) in row.iter().enumerate() {
                let _ = writeln!(out, "{:.1},{:.1},{:.6}", self.taus[i], self.taus[u], h);
            }
        }
        out
    }

    /// Heatmap with `tau_update` on x and `tau_init` on y, best cell outlined.
    pub fn to_svg(&self) -> String {
        const CELL: usize = 40;
        const LEFT: usize = 60;
        const TOP: usize = 30;
        let n = self.taus.len();
        let (lo, hi) = self
            .hota
            .iter()
            .flatten()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &h| (a.min(h), b.max(h)));
        let span = if hi > lo { hi - lo } else { 1.0 };
        let w = LEFT + n * CELL + 20;
        let h = TOP + n * CELL + 50;
        let mut out = String::new();
        let _ = writeln!(
            out,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="10">"#
        );
        let _ = writeln!(
            out,
            r#"<text x="{}" y="18" text-anchor="middle" font-size="12">HOTA (max {:.2})</text>"#,
            LEFT + n * CELL / 2,
            100.0 * hi
        );
        for (i, row) in self.hota.iter().enumerate() {
            // tau_init grows upwards.
            let y = TOP + (n - 1 - i) * CELL;
            for (u, &v) in row.iter().enumerate() {
                let x = LEFT + u * CELL;
                let t = (v - lo) / span;
                let (r, g, b) = ramp(t);
                let _ = writeln!(
                    out,
                    r##"<rect x="{x}" y="{y}" width="{CELL}" height="{CELL}" fill="#{r:02x}{g:02x}{b:02x}"><title>tau_init={:.1} tau_update={:.1} hota={:.4}</title></rect>"##,
                    self.taus[i], self.taus[u], v
                );
                let ink = if t > 0.6 { "black" } else { "white" };
                let _ = writeln!(
                    out,
                    r#"<text x="{}" y="{}" text-anchor="middle" fill="{ink}">{:.1}</text>"#,
                    x + CELL / 2,
                    y + CELL / 2 + 4,
                    100.0 * v
                );
            }
            let _ = writeln!(
                out,
                r#"<text x="{}" y="{}" text-anchor="end">{:.1}</text>"#,
                LEFT - 6,
                y + CELL / 2 + 4,
                self.taus[i]
            );
        }
        for (u, tau) in self.taus.iter().enumerate() {
            let _ = writeln!(
                out,
                r#"<text x="{}" y="{}" text-anchor="middle">{tau:.1}</text>"#,
                LEFT + u * CELL + CELL / 2,
                TOP + n * CELL + 14
            );
        }
        let (bi, bu) = self.argmax();
        let _ = writeln!(
            out,
            r#"<rect x="{}" y="{}" width="{CELL}" height="{CELL}" fill="none" stroke="red" stroke-width="2"/>"#,
            LEFT + bu * CELL,
            TOP + (n - 1 - bi) * CELL
        );
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" text-anchor="middle">update threshold</text>"#,
            LEFT + n * CELL / 2,
            TOP + n * CELL + 34
        );
        let _ = writeln!(
            out,
            r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">initialize threshold</text>"#,
            TOP + n * CELL / 2,
            TOP + n * CELL / 2
        );
        out.push_str("</svg>\n");
        out
    }
}

// Dark blue to yellow.
fn ramp(t: f64) -> (u8, u8, u8) {
    let t = t.clamp(0.0, 1.0);
    let lerp = |a: f64, b: f64| (a + (b - a) * t).round() as u8;
    (lerp(40.0, 250.0), lerp(30.0, 230.0), lerp(110.0, 60.0))
}

pub fn thresholds(base: &TrackerConfig, bench: &Benchmark) -> Result<ThresholdSurface> {
    let taus = threshold_grid();
    let grid: Vec<_> = taus
        .iter()
        .flat_map(|&ti| {
            taus.iter().map(move |&tu| {
                (
                    format!("{ti:.1}/{tu:.1}"),
                    TrackerConfig {
                        tau_init: ti,
                        tau_update: tu,
                        ..base.clone()
                    },
                )
            })
        })
        .collect();
    let rows = run_grid(&grid, bench)?;
    let n = taus.len();
    let hota = (0..n).map(|i| (0..n).map(|u| rows[i * n + u].hota).collect()).collect();
    Ok(ThresholdSurface { taus, hota })
}
