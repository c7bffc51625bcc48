use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use panotrack::ablation::{self, Benchmark, Suite};
use panotrack::config::{load_config, parse_config};
use panotrack::feedback::{conditional_entropy, entropy, feedback_gain, x_marginal};
use panotrack::metrics::{aggregate, evaluate, EvalConfig, MetricReport};
use panotrack::mot::{
    read_detections, read_records, sequence_from_records, sequence_records, track_records, write_detections,
    write_records,
};
use panotrack::synth::{generate, MotionRegime, ScenarioConfig};
use panotrack::tracker::FrameResult;
use panotrack::{Error, Result, Tracker, TrackerConfig};

use crate::manifest::{file_sha256, Artifact, RunManifest};
use crate::{AblateArgs, EntropyArgs, EvalArgs, SynthArgs, TrackArgs};

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Input(format!("cannot create {}: {e}", dir.display())))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Input(format!("cannot write {}: {e}", path.display())))
}

fn base_config(path: Option<&PathBuf>) -> Result<TrackerConfig> {
    match path {
        Some(p) => load_config(p),
        None => Ok(TrackerConfig::default()),
    }
}

pub fn frames_csv(results: &[FrameResult]) -> String {
    let mut out = String::from("frame,branches,claimed,unclaimed,updates,inits,deletes,removed,cost_matrices,outputs\n");
    for r in results {
        let d = &r.diagnostics;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.frame,
            d.branches,
            d.claimed,
            d.unclaimed,
            d.updates,
            d.inits,
            d.deletes,
            d.removed,
            d.cost_matrices,
            r.outputs.len()
        );
    }
    out
}

/// Config and input paths recorded in a manifest, after checking that the
/// inputs still hash to the recorded values.
fn replay_inputs(path: &Path) -> Result<(TrackerConfig, PathBuf, Option<PathBuf>)> {
    let m = RunManifest::load(path)?;
    let cfg = parse_config(&m.config_text())?;
    for input in &m.inputs {
        let actual = file_sha256(Path::new(&input.path))?;
        if actual != input.sha256 {
            return Err(Error::Input(format!("{} changed since the recorded run", input.path)));
        }
    }
    let dets = m
        .input("dets")
        .ok_or_else(|| Error::Input(format!("{} records no detections", path.display())))?;
    Ok((cfg, PathBuf::from(&dets.path), m.input("embeds").map(|e| PathBuf::from(&e.path))))
}

pub fn track(a: &TrackArgs) -> Result<bool> {
    let started = SystemTime::now();
    let clock = Instant::now();
    let (mut cfg, dets, embeds) = match &a.manifest {
        Some(m) => replay_inputs(m)?,
        None => {
            let dets = a.dets.clone().ok_or_else(|| Error::Input("--dets is required".into()))?;
            (base_config(a.config.as_ref())?, dets, a.embeds.clone())
        }
    };
    if let Some(m) = &a.mode {
        cfg.mode = m.parse()?;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let frames = read_detections(&dets, embeds.as_deref())?;
    let mut tracker = Tracker::new(cfg.clone())?;
    let results = tracker.run(frames.iter().enumerate().map(|(k, d)| (k as u64 + 1, d.as_slice())))?;

    create_dir(&a.out)?;
    let tracks = a.out.join("tracks.txt");
    let diagnostics = a.out.join("frames.csv");
    write_records(&tracks, &track_records(&results))?;
    write_file(&diagnostics, &frames_csv(&results))?;

    let mut manifest = RunManifest::new("track", &cfg, started, clock.elapsed());
    manifest.inputs.push(Artifact::hash("dets", &dets)?);
    if let Some(p) = &embeds {
        manifest.inputs.push(Artifact::hash("embeds", p)?);
    }
    if let (None, Some(p)) = (&a.manifest, &a.config) {
        manifest.inputs.push(Artifact::hash("config", p)?);
    }
    manifest.outputs = vec![Artifact::hash("tracks", &tracks)?, Artifact::hash("frames", &diagnostics)?];
    manifest.save(&a.out.join("manifest.json"))?;

    let ids: std::collections::BTreeSet<_> = results.iter().flat_map(|r| r.outputs.iter().map(|o| o.id)).collect();
    println!(
        "{} frames, {} tracks, {} cost matrices ({} mode) -> {}",
        results.len(),
        ids.len(),
        tracker.cost_matrices(),
        cfg.mode,
        a.out.display()
    );
    Ok(true)
}

const METRICS: [&str; 6] = ["hota", "deta", "assa", "mota", "idf1", "ospa"];

fn metric_value(r: &MetricReport, name: &str) -> f64 {
    match name {
        "hota" => r.hota,
        "deta" => r.deta,
        "assa" => r.assa,
        "mota" => r.mota,
        "idf1" => r.idf1,
        _ => r.ospa,
    }
}

pub fn parse_metrics(list: &str) -> Result<Vec<&'static str>> {
    let mut out = Vec::new();
    for name in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let name = name.to_ascii_lowercase();
        let Some(&m) = METRICS.iter().find(|m| **m == name) else {
            return Err(Error::Config(format!("unknown metric `{name}`")));
        };
        if !out.contains(&m) {
            out.push(m);
        }
    }
    if out.is_empty() {
        return Err(Error::Config("no metrics requested".into()));
    }
    Ok(out)
}

pub fn eval(a: &EvalArgs) -> Result<bool> {
    let metrics = parse_metrics(&a.metrics)?;
    if !(0.0..=1.0).contains(&a.iou) || !(a.ospa_cutoff > 0.0) || !(a.ospa_order >= 1.0) {
        return Err(Error::Config("need iou in [0, 1], ospa cutoff > 0 and ospa order >= 1".into()));
    }
    if a.gt.len() != a.pred.len() {
        return Err(Error::Input(format!(
            "{} ground-truth files for {} prediction files",
            a.gt.len(),
            a.pred.len()
        )));
    }
    let eval_cfg = EvalConfig {
        iou_thresh: a.iou,
        ospa_cutoff: a.ospa_cutoff,
        ospa_order: a.ospa_order,
        ..EvalConfig::default()
    };
    let mut rows = Vec::new();
    for (gt_path, pred_path) in a.gt.iter().zip(&a.pred) {
        let gt = sequence_from_records(&read_records(gt_path)?, 0)?;
        let pred_records = read_records(pred_path)?;
        if let Some(r) = pred_records.iter().find(|r| r.frame as usize > gt.len()) {
            return Err(Error::Input(format!(
                "frame-range mismatch: {} has frame {} but {} ends at frame {}",
                pred_path.display(),
                r.frame,
                gt_path.display(),
                gt.len()
            )));
        }
        let pred = sequence_from_records(&pred_records, gt.len())?;
        rows.push((gt_path.display().to_string(), evaluate(&gt, &pred, &eval_cfg)?));
    }
    if rows.len() > 1 {
        let reports: Vec<_> = rows.iter().map(|(_, r)| r.clone()).collect();
        if let Some(agg) = aggregate(&reports) {
            rows.push(("aggregate".into(), agg));
        }
    }

    let mut csv = format!("sequence,{},gt,tp,fp,fn,idsw\n", metrics.join(","));
    let mut table = format!("{:<32}", "sequence");
    for m in &metrics {
        let _ = write!(table, " {:>8}", m.to_uppercase());
    }
    table.push('\n');
    for (name, r) in &rows {
        let _ = write!(csv, "{name}");
        let _ = write!(table, "{:<32}", name);
        for m in &metrics {
            let v = metric_value(r, m);
            let _ = write!(csv, ",{v:.6}");
            if *m == "ospa" {
                let _ = write!(table, " {v:>8.4}");
            } else {
                let _ = write!(table, " {:>8.2}", 100.0 * v);
            }
        }
        let c = &r.counts;
        let _ = writeln!(csv, ",{},{},{},{},{}", c.gt, c.tp, c.fp, c.fn_, c.idsw);
        table.push('\n');
    }
    print!("{table}");
    if let Some(out) = &a.out {
        write_file(out, &csv)?;
    }
    Ok(true)
}

pub fn scenario(a: &SynthArgs) -> Result<ScenarioConfig> {
    let regime: MotionRegime = a.regime.parse()?;
    let mut cfg = match a.seam_turns {
        Some(turns) => ScenarioConfig::seam_circuit(turns, a.frames),
        None => ScenarioConfig {
            n_targets: a.targets,
            seq_len: a.frames,
            regime,
            ..ScenarioConfig::default()
        },
    };
    cfg.seed = a.seed;
    if let Some(v) = a.p_miss {
        cfg.p_miss = v;
    }
    if let Some(v) = a.clutter_rate {
        cfg.clutter_rate = v;
    }
    if let Some(v) = a.embed_noise {
        cfg.embed_noise = v;
    }
    if a.noiseless {
        cfg = cfg.noiseless();
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn synth(a: &SynthArgs) -> Result<bool> {
    let cfg = scenario(a)?;
    let seq = generate(&cfg)?;
    create_dir(&a.out)?;
    write_records(a.out.join("gt.txt"), &sequence_records(&seq.gt))?;
    write_detections(a.out.join("dets.txt"), Some(&a.out.join("embeds.txt")), &seq.detections)?;
    let json = serde_json_pretty(&cfg)?;
    write_file(&a.out.join("scenario.json"), &json)?;
    println!(
        "{} frames, {} ids, {} gt boxes, {} detections -> {}",
        seq.gt.len(),
        seq.gt.ids().len(),
        seq.gt.box_count(),
        seq.detections.iter().map(Vec::len).sum::<usize>(),
        a.out.display()
    );
    Ok(true)
}

fn serde_json_pretty<T: serde::Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v)
        .map(|s| s + "\n")
        .map_err(|e| Error::Input(e.to_string()))
}

pub fn ablate(a: &AblateArgs) -> Result<bool> {
    let suite: Suite = a.suite.parse()?;
    let mut cfg = base_config(a.config.as_ref())?;
    cfg.mode = a.mode.parse()?;
    cfg.validate()?;
    if a.frames == 0 {
        return Err(Error::Config("--frames must be at least 1".into()));
    }
    let seeds = a.seeds.unwrap_or(if suite == Suite::Thresholds { 4 } else { 20 });
    let bench = Benchmark::occlusion_with_len(seeds, a.frames)?;
    create_dir(&a.out)?;
    match suite {
        Suite::Components | Suite::Flexitrack => {
            let rows = if suite == Suite::Components {
                ablation::components(&cfg, &bench)?
            } else {
                ablation::flexitrack(&cfg, &bench)?
            };
            write_file(&a.out.join(format!("{suite}.csv")), &ablation::rows_csv(&rows))?;
            print!("{}", ablation::rows_table(&rows));
        }
        Suite::Thresholds => {
            let s = ablation::thresholds(&cfg, &bench)?;
            write_file(&a.out.join("thresholds.csv"), &s.to_csv())?;
            write_file(&a.out.join("thresholds.svg"), &s.to_svg())?;
            let (i, u) = s.argmax();
            println!(
                "best HOTA {:.2} at tau_init = {:.1}, tau_update = {:.1} ({})",
                100.0 * s.hota[i][u],
                s.taus[i],
                s.taus[u],
                if s.max_is_interior() { "interior" } else { "on the boundary" }
            );
        }
    }
    println!("{} sequences of {} frames, {} mode -> {}", seeds, a.frames, cfg.mode, a.out.display());
    Ok(true)
}

fn random_joint(n: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let mut j = Array2::from_shape_fn((n, n), |_| {
        if rng.random::<f64>() < 0.2 {
            0.0
        } else {
            rng.random::<f64>()
        }
    });
    if j.sum() == 0.0 {
        j[(0, 0)] = 1.0;
    }
    let s = j.sum();
    j / s
}

fn random_marginal(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let v: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 1e-3).collect();
    let s: f64 = v.iter().sum();
    v.into_iter().map(|x| x / s).collect()
}

fn read_table(path: &Path) -> Result<Array2<f64>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Input(format!("cannot read {}: {e}", path.display())))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (k, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let row = line
            .split(',')
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Parse {
                line: k + 1,
                message: e.to_string(),
            })?;
        rows.push(row);
    }
    let cols = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || cols == 0 || rows.iter().any(|r| r.len() != cols) {
        return Err(Error::Input(format!("{} is not a rectangular table", path.display())));
    }
    Array2::from_shape_vec((rows.len(), cols), rows.concat()).map_err(|e| Error::Input(e.to_string()))
}

pub fn entropy_check(a: &EntropyArgs) -> Result<bool> {
    if a.size < 2 || a.frames == 0 {
        return Err(Error::Config("need --size >= 2 and --frames >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let n = a.size;
    let mut worst = f64::INFINITY;
    let mut factor_err: f64 = 0.0;
    for _ in 0..a.tables {
        let seq: Vec<_> = (0..a.frames).map(|_| random_joint(n, &mut rng)).collect();
        worst = worst.min(feedback_gain(&seq)?);
        let (px, py) = (random_marginal(n, &mut rng), random_marginal(n, &mut rng));
        let indep = Array2::from_shape_fn((n, n), |(i, j)| px[i] * py[j]);
        factor_err = factor_err.max(feedback_gain(&[indep])?.abs());
    }
    let coupled = Array2::from_shape_fn((n, n), |(i, j)| if i == j { 1.0 / n as f64 } else { 0.0 });
    let expected = a.frames as f64 * (n as f64).ln();
    let coupled_gain = feedback_gain(&vec![coupled; a.frames])?;

    let nonneg = a.tables == 0 || worst >= -1e-9;
    let factorized = factor_err <= 1e-9;
    let coupling = (coupled_gain - expected).abs() <= 1e-9;
    let mark = |ok: bool| if ok { "ok  " } else { "FAIL" };
    println!(
        "{} gain >= 0 on {} random {n}x{n} sequences of {} frames (min {worst:.3e})",
        mark(nonneg),
        a.tables,
        a.frames
    );
    println!("{} gain = 0 on factorized tables (max |gain| {factor_err:.3e})", mark(factorized));
    println!(
        "{} deterministic coupling gain {coupled_gain:.12} = T ln n = {expected:.12}",
        mark(coupling)
    );
    if let Some(p) = &a.table {
        let joint = read_table(p)?;
        let hx = entropy(&x_marginal(&joint))?;
        let hc = conditional_entropy(&joint)?;
        println!("{}: H(x) = {hx:.6}, H(x|y) = {hc:.6}, gain = {:.6}", p.display(), hx - hc);
    }
    Ok(nonneg && factorized && coupling)
}
