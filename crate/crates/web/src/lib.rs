//! WebAssembly bindings for the static demo page in `www/`.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use panotrack::ablation::{predictions, thresholds, track_sequence, Benchmark};
use panotrack::geometry::clamped_iou;
use panotrack::metrics::{evaluate, EvalConfig};
use panotrack::synth::{generate, MotionRegime, ScenarioConfig};
use panotrack::{cyclic_iou, Geometry, PanoBox, TrackerConfig, TrackingMode};

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

fn pano(b: &[f64]) -> Result<PanoBox, JsError> {
    match b {
        [cu, cv, w, h] => PanoBox::new(*cu, *cv, *w, *h).map_err(js_err),
        _ => Err(JsError::new("a box is [cu, cv, w, h]")),
    }
}

/// `[cyclic, clamped]` IoU of two `[cu, cv, w, h]` boxes.
#[wasm_bindgen]
pub fn iou_pair(a: &[f64], b: &[f64]) -> Result<Vec<f64>, JsError> {
    let (a, b) = (pano(a)?, pano(b)?);
    Ok(vec![cyclic_iou(&a, &b), clamped_iou(&a, &b)])
}

#[derive(Serialize)]
struct Run {
    /// Per frame: `[id, cu, cv, w, h]` rows.
    gt: Vec<Vec<[f64; 5]>>,
    tracks: Vec<Vec<[f64; 5]>>,
    hota: f64,
    mota: f64,
    idf1: f64,
    idsw: usize,
}

fn rows<'a>(items: impl Iterator<Item = (u64, &'a PanoBox)>) -> Vec<[f64; 5]> {
    items.map(|(id, b)| [id as f64, b.cu(), b.cv(), b.w(), b.h()]).collect()
}

/// Generates a sequence, tracks it and returns JSON with boxes and scores.
#[wasm_bindgen]
pub fn simulate(
    seed: u64,
    frames: usize,
    targets: usize,
    regime: &str,
    mode: &str,
    memory: bool,
    cyclic: bool,
) -> Result<String, JsError> {
    let regime: MotionRegime = regime.parse().map_err(js_err)?;
    let scenario = ScenarioConfig { n_targets: targets, seq_len: frames, regime, seed, ..ScenarioConfig::default() };
    let seq = generate(&scenario).map_err(js_err)?;
    let mut cfg = TrackerConfig { mode: mode.parse::<TrackingMode>().map_err(js_err)?, ..TrackerConfig::default() };
    cfg.memory.enabled = memory;
    cfg.association.geometry = if cyclic { Geometry::Cyclic } else { Geometry::Clamped };
    let results = track_sequence(&cfg, &seq).map_err(js_err)?;
    let pred = predictions(&results).map_err(js_err)?;
    let eval = EvalConfig { geometry: cfg.geometry(), ..EvalConfig::default() };
    let m = evaluate(&seq.gt, &pred, &eval).map_err(js_err)?;
    let run = Run {
        gt: seq.gt.frames().iter().map(|f| rows(f.iter().map(|l| (l.id, &l.bbox)))).collect(),
        tracks: results.iter().map(|r| rows(r.outputs.iter().map(|o| (o.id.0, &o.bbox)))).collect(),
        hota: m.hota,
        mota: m.mota,
        idf1: m.idf1,
        idsw: m.counts.idsw,
    };
    serde_json::to_string(&run).map_err(js_err)
}

/// Row-major 11x11 HOTA grid over `(tau_init, tau_update)` in E2E mode.
#[wasm_bindgen]
pub fn threshold_surface(seeds: u64, frames: usize) -> Result<Vec<f64>, JsError> {
    let bench = Benchmark::occlusion_with_len(seeds, frames).map_err(js_err)?;
    let cfg = TrackerConfig { mode: TrackingMode::E2e, ..TrackerConfig::default() };
    let s = thresholds(&cfg, &bench).map_err(js_err)?;
    Ok(s.hota.concat())
}
