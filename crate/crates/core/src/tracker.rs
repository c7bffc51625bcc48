//! Dual-branch tracklet management: branch selection, confidence
//! thresholding, association dispatch, ensemble fusion and lifecycle.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::association::{staged_associate, AssociationConfig, AssociationStats};
use crate::detection::Detection;
use crate::dynamicssm::DynamicSsmBlock;
use crate::error::{Error, Result};
use crate::feedback::{
    claim_detections, instances_from_predicted, perturb, ClaimedDetections, FlexiTrackInstance,
};
use crate::geometry::{Geometry, PanoBox};
use crate::kalman::{
    kalman_predict, kalman_update_with, CyclicKalmanState, MeasurementNoise, ProcessNoise,
};
use crate::memory::{MemoryBank, MemorySlot, MoeParams};
use crate::refine::refine_embeddings;

/// Track identity. Ids start at 1 and are never reused within a sequence.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub struct TrackId(pub u64);

impl fmt::Display for TrackId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrackState {
    Active,
    Lost,
    Removed,
}

/// Which branch produced a track's latest output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Provenance {
    E2e,
    Tbd,
    Ensemble,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Provenance::E2e => "e2e",
            Provenance::Tbd => "tbd",
            Provenance::Ensemble => "ensemble",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum TrackingMode {
    E2e,
    Tbd,
    #[default]
    Ensemble,
    Auto,
}

impl FromStr for TrackingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "e2e" => Ok(Self::E2e),
            "tbd" => Ok(Self::Tbd),
            "ensemble" => Ok(Self::Ensemble),
            "auto" => Ok(Self::Auto),
            _ => Err(Error::config(format!(
                "unknown mode `{s}` (expected e2e, tbd, ensemble or auto)"
            ))),
        }
    }
}

impl fmt::Display for TrackingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::E2e => "e2e",
            Self::Tbd => "tbd",
            Self::Ensemble => "ensemble",
            Self::Auto => "auto",
        })
    }
}

/// Branches executed in one frame. There is no empty variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BranchSet {
    E2e,
    Tbd,
    Both,
}

impl BranchSet {
    pub fn has_e2e(self) -> bool {
        matches!(self, Self::E2e | Self::Both)
    }

    pub fn has_tbd(self) -> bool {
        matches!(self, Self::Tbd | Self::Both)
    }
}

impl fmt::Display for BranchSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::E2e => "e2e",
            Self::Tbd => "tbd",
            Self::Both => "both",
        })
    }
}

/// One of the two paradigms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    E2e,
    Tbd,
}

/// Fate of a single detection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Decision {
    Update,
    Initialize,
    Delete,
}

/// Where the instances used for claiming come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum InstanceSource {
    /// No instances; nothing is ever claimed.
    None,
    /// One instance per track from its own state.
    #[default]
    Feedback,
    /// One perturbed instance per track.
    Denoise,
    /// Both of the above; a track keeps its better claim.
    Both,
}

impl FromStr for InstanceSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "feedback" => Ok(Self::Feedback),
            "denoise" => Ok(Self::Denoise),
            "both" => Ok(Self::Both),
            _ => Err(Error::config(format!("unknown instance source `{s}`"))),
        }
    }
}

impl fmt::Display for InstanceSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::Feedback => "feedback",
            Self::Denoise => "denoise",
            Self::Both => "both",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemoryConfig {
    pub enabled: bool,
    /// Bank capacity `n_m` (even).
    pub capacity: usize,
    pub k_r: usize,
    pub n_experts: usize,
    pub theta_sim: f64,
    pub temperature: f64,
    pub lambda: f64,
    /// Spread of the seeded expert weights around the identity.
    pub expert_perturbation: f64,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            capacity: 8,
            k_r: 4,
            n_experts: 4,
            theta_sim: 0.7,
            temperature: 1.0,
            lambda: 0.5,
            expert_perturbation: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackerConfig {
    pub tau_init: f64,
    pub tau_update: f64,
    pub max_age: u32,
    pub mode: TrackingMode,
    pub association: AssociationConfig,
    /// Minimum similarity for an instance to claim a detection.
    pub claim_gate: f64,
    pub memory: MemoryConfig,
    pub instances: InstanceSource,
    pub sigma_x: f64,
    pub sigma_y: f64,
    /// Also report Lost tracks at their predicted position.
    pub emit_lost: bool,
    pub process_noise: ProcessNoise,
    pub measurement_noise: MeasurementNoise,
    /// Refine detection embeddings with a DynamicSSM block.
    pub dssm: bool,
    pub dssm_directions: usize,
    /// Cross-branch overlap at which ensemble outputs merge.
    pub ensemble_iou: f64,
    /// Claimed fraction at or above which auto mode runs E2E alone.
    pub auto_high: f64,
    /// Claimed fraction below which auto mode runs TBD alone.
    pub auto_low: f64,
    pub seed: u64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            tau_init: 0.5,
            tau_update: 0.5,
            max_age: 30,
            mode: TrackingMode::Ensemble,
            association: AssociationConfig::default(),
            claim_gate: 0.3,
            memory: MemoryConfig::default(),
            instances: InstanceSource::Feedback,
            sigma_x: 0.1,
            sigma_y: 0.1,
            emit_lost: false,
            process_noise: ProcessNoise::default(),
            measurement_noise: MeasurementNoise::default(),
            dssm: false,
            dssm_directions: 4,
            ensemble_iou: 0.7,
            auto_high: 0.8,
            auto_low: 0.5,
            seed: 0,
        }
    }
}

impl TrackerConfig {
    pub fn geometry(&self) -> Geometry {
        self.association.geometry
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::config(format!("{name} = {v} is outside [0, 1]")))
            }
        };
        unit("tau_init", self.tau_init)?;
        unit("tau_update", self.tau_update)?;
        unit("claim_gate", self.claim_gate)?;
        unit("theta_sim", self.memory.theta_sim)?;
        unit("lambda", self.memory.lambda)?;
        unit("ensemble_iou", self.ensemble_iou)?;
        unit("auto_high", self.auto_high)?;
        unit("auto_low", self.auto_low)?;
        if self.auto_low > self.auto_high {
            return Err(Error::config("auto_low exceeds auto_high"));
        }
        if self.max_age < 1 {
            return Err(Error::config("max_age must be at least 1"));
        }
        if self.memory.capacity == 0 || self.memory.capacity % 2 != 0 {
            return Err(Error::config("n_m must be a positive even number"));
        }
        if self.memory.k_r == 0 || self.memory.n_experts == 0 {
            return Err(Error::config("K_r and n_e must be positive"));
        }
        if !(self.memory.temperature > 0.0) {
            return Err(Error::config("temperature must be positive"));
        }
        if !(self.sigma_x >= 0.0 && self.sigma_y >= 0.0) {
            return Err(Error::config("perturbation scales must be non-negative"));
        }
        if !(1..=4).contains(&self.dssm_directions) {
            return Err(Error::config("dssm_directions must be in 1..=4"));
        }
        self.association.validate()
    }
}

/// A track with its motion state and appearance memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Tracklet {
    pub id: TrackId,
    pub state: TrackState,
    pub kalman: CyclicKalmanState,
    pub bank: MemoryBank,
    /// Number of frames with an update, birth included.
    pub hits: u32,
    pub time_since_update: u32,
    pub last_score: f64,
    pub provenance: Provenance,
    pub last_embedding: Vec<f64>,
}

impl Tracklet {
    fn born(id: TrackId, d: &Detection, score: f64, provenance: Provenance, cfg: &TrackerConfig, frame: u64) -> Self {
        let mut bank = MemoryBank::new(cfg.memory.capacity).expect("capacity validated");
        if cfg.memory.enabled {
            bank.admit(
                MemorySlot::new(d.embedding.clone(), score, frame),
                cfg.memory.theta_sim,
            );
        }
        Self {
            id,
            state: TrackState::Active,
            kalman: CyclicKalmanState::from_box(&d.bbox),
            bank,
            hits: 1,
            time_since_update: 0,
            last_score: score,
            provenance,
            last_embedding: d.embedding.clone(),
        }
    }

    fn absorb(
        &mut self,
        d: &Detection,
        score: f64,
        provenance: Provenance,
        cfg: &TrackerConfig,
        frame: u64,
    ) -> Result<()> {
        self.kalman =
            kalman_update_with(&self.kalman, &d.bbox, &cfg.measurement_noise, cfg.geometry())?;
        if cfg.memory.enabled {
            self.bank.admit(
                MemorySlot::new(d.embedding.clone(), score, frame),
                cfg.memory.theta_sim,
            );
        }
        self.last_embedding = d.embedding.clone();
        self.last_score = score;
        self.provenance = provenance;
        self.hits += 1;
        self.time_since_update = 0;
        self.state = TrackState::Active;
        Ok(())
    }

    pub fn bbox(&self) -> PanoBox {
        self.kalman.to_box()
    }
}

/// One reported track in a frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackOutput {
    pub id: TrackId,
    pub bbox: PanoBox,
    pub score: f64,
    pub provenance: Provenance,
    /// Track history length, used to arbitrate ensemble conflicts.
    pub hits: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameDiagnostics {
    pub branches: BranchSet,
    pub claimed: usize,
    pub unclaimed: usize,
    pub updates: usize,
    pub inits: usize,
    /// Detections discarded.
    pub deletes: usize,
    /// Tracks that aged out this frame.
    pub removed: usize,
    pub cost_matrices: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameResult {
    pub frame: u64,
    pub outputs: Vec<TrackOutput>,
    pub diagnostics: FrameDiagnostics,
}

/// Dual-branch choice for one frame.
pub fn branch_select(claimed: &ClaimedDetections, n_tracks: usize, cfg: &TrackerConfig) -> BranchSet {
    match cfg.mode {
        TrackingMode::E2e => BranchSet::E2e,
        TrackingMode::Tbd => BranchSet::Tbd,
        TrackingMode::Ensemble => BranchSet::Both,
        TrackingMode::Auto => {
            let claimed_tracks: BTreeSet<TrackId> =
                claimed.claimed.iter().map(|c| c.track_id).collect();
            let fraction = claimed_tracks.len() as f64 / n_tracks.max(1) as f64;
            if fraction >= cfg.auto_high {
                BranchSet::E2e
            } else if fraction < cfg.auto_low {
                BranchSet::Tbd
            } else {
                BranchSet::Both
            }
        }
    }
}

/// Single-branch thresholding rule for one detection.
///
/// `owned` means claimed by an instance (E2E) or matched to a track (TBD).
/// E2E updates owned detections scoring above `tau_update`; TBD updates every
/// matched detection. Both initialize unowned detections scoring above
/// `tau_init` and discard the rest.
pub fn threshold_decision(branch: Branch, owned: bool, score: f64, cfg: &TrackerConfig) -> Decision {
    match (branch, owned) {
        (Branch::E2e, true) if score > cfg.tau_update => Decision::Update,
        (Branch::Tbd, true) => Decision::Update,
        (_, false) if score > cfg.tau_init => Decision::Initialize,
        _ => Decision::Delete,
    }
}

/// Result of running one branch on a copy of the track set.
#[derive(Debug, Clone)]
struct BranchOutcome {
    branch: Branch,
    tracks: Vec<Tracklet>,
    decisions: Vec<Decision>,
    /// Track id to detection index, for tracks updated or born this frame.
    touched: BTreeMap<TrackId, usize>,
    born: BTreeSet<TrackId>,
    cost_matrices: usize,
}

impl BranchOutcome {
    fn outputs(&self) -> Vec<TrackOutput> {
        self.tracks
            .iter()
            .filter(|t| self.touched.contains_key(&t.id))
            .map(|t| TrackOutput {
                id: t.id,
                bbox: t.bbox(),
                score: t.last_score,
                provenance: t.provenance,
                hits: t.hits,
            })
            .collect()
    }
}

struct FrameContext<'a> {
    frame: u64,
    cfg: &'a TrackerConfig,
    detections: &'a [Detection],
}

fn e2e_branch(
    claimed: &ClaimedDetections,
    tracks: &[Tracklet],
    ctx: &FrameContext<'_>,
    next_id: &mut u64,
) -> Result<BranchOutcome> {
    let cfg = ctx.cfg;
    let mut out = BranchOutcome {
        branch: Branch::E2e,
        tracks: tracks.to_vec(),
        decisions: vec![Decision::Delete; ctx.detections.len()],
        touched: BTreeMap::new(),
        born: BTreeSet::new(),
        cost_matrices: 0,
    };
    for c in &claimed.claimed {
        if threshold_decision(Branch::E2e, true, c.score, cfg) == Decision::Update {
            let t = out
                .tracks
                .iter_mut()
                .find(|t| t.id == c.track_id)
                .expect("claims come from live tracks");
            t.absorb(&c.detection, c.score, Provenance::E2e, cfg, ctx.frame)?;
            out.decisions[c.index] = Decision::Update;
            out.touched.insert(c.track_id, c.index);
        }
    }
    for u in &claimed.unclaimed {
        if threshold_decision(Branch::E2e, false, u.score, cfg) == Decision::Initialize {
            let id = TrackId(*next_id);
            *next_id += 1;
            out.tracks
                .push(Tracklet::born(id, &u.detection, u.score, Provenance::E2e, cfg, ctx.frame));
            out.decisions[u.index] = Decision::Initialize;
            out.touched.insert(id, u.index);
            out.born.insert(id);
        }
    }
    Ok(out)
}

fn tbd_branch(
    views: &[FlexiTrackInstance],
    tracks: &[Tracklet],
    ctx: &FrameContext<'_>,
    next_id: &mut u64,
) -> Result<BranchOutcome> {
    let cfg = ctx.cfg;
    let mut stats = AssociationStats::default();
    let result = staged_associate(views, ctx.detections, &cfg.association, &mut stats);
    let mut out = BranchOutcome {
        branch: Branch::Tbd,
        tracks: tracks.to_vec(),
        decisions: vec![Decision::Delete; ctx.detections.len()],
        touched: BTreeMap::new(),
        born: BTreeSet::new(),
        cost_matrices: stats.cost_matrices,
    };
    for &(i, j) in &result.matches {
        let id = views[i].track_id;
        let d = &ctx.detections[j];
        let t = out
            .tracks
            .iter_mut()
            .find(|t| t.id == id)
            .expect("views come from live tracks");
        t.absorb(d, d.score, Provenance::Tbd, cfg, ctx.frame)?;
        out.decisions[j] = Decision::Update;
        out.touched.insert(id, j);
    }
    for &j in &result.unmatched_detections {
        let d = &ctx.detections[j];
        if threshold_decision(Branch::Tbd, false, d.score, cfg) == Decision::Initialize {
            let id = TrackId(*next_id);
            *next_id += 1;
            out.tracks
                .push(Tracklet::born(id, d, d.score, Provenance::Tbd, cfg, ctx.frame));
            out.decisions[j] = Decision::Initialize;
            out.touched.insert(id, j);
            out.born.insert(id);
        }
    }
    Ok(out)
}

/// How one ensemble output was formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum MergeItem {
    /// Output `usize` of the given branch, unmatched.
    Single(Branch, usize),
    /// Outputs `tbd`, `e2e` merged.
    Pair {
        tbd: usize,
        e2e: usize,
        survivor: Branch,
        winner: Branch,
    },
}

/// `same_source` pairs outputs built from one detection; they merge right
/// after outputs of the same track.
fn merge_plan(
    tbd: &[TrackOutput],
    e2e: &[TrackOutput],
    iou_threshold: f64,
    geometry: Geometry,
    same_source: &dyn Fn(usize, usize) -> bool,
) -> Vec<MergeItem> {
    let mut tbd_used = vec![false; tbd.len()];
    let mut e2e_used = vec![false; e2e.len()];
    let mut pairs = Vec::new();
    for (i, a) in tbd.iter().enumerate() {
        if let Some(j) = e2e.iter().position(|b| b.id == a.id) {
            tbd_used[i] = true;
            e2e_used[j] = true;
            pairs.push((i, j));
        }
    }
    for i in 0..tbd.len() {
        if tbd_used[i] {
            continue;
        }
        if let Some(j) = (0..e2e.len()).find(|&j| !e2e_used[j] && same_source(i, j)) {
            tbd_used[i] = true;
            e2e_used[j] = true;
            pairs.push((i, j));
        }
    }
    let mut candidates = Vec::new();
    for (i, a) in tbd.iter().enumerate() {
        if tbd_used[i] {
            continue;
        }
        for (j, b) in e2e.iter().enumerate() {
            if e2e_used[j] {
                continue;
            }
            let iou = geometry.iou(&a.bbox, &b.bbox);
            if iou >= iou_threshold {
                candidates.push((iou, i, j));
            }
        }
    }
    candidates.sort_by(|x, y| {
        y.0.total_cmp(&x.0)
            .then(tbd[x.1].id.cmp(&tbd[y.1].id))
            .then(e2e[x.2].id.cmp(&e2e[y.2].id))
    });
    for (_, i, j) in candidates {
        if !tbd_used[i] && !e2e_used[j] {
            tbd_used[i] = true;
            e2e_used[j] = true;
            pairs.push((i, j));
        }
    }
    let mut items: Vec<MergeItem> = pairs
        .into_iter()
        .map(|(i, j)| {
            let (a, b) = (&tbd[i], &e2e[j]);
            let survivor = if a.hits != b.hits {
                if a.hits > b.hits { Branch::Tbd } else { Branch::E2e }
            } else if a.score != b.score {
                if a.score > b.score { Branch::Tbd } else { Branch::E2e }
            } else if a.id <= b.id {
                Branch::Tbd
            } else {
                Branch::E2e
            };
            let winner = if b.score > a.score { Branch::E2e } else { Branch::Tbd };
            MergeItem::Pair {
                tbd: i,
                e2e: j,
                survivor,
                winner,
            }
        })
        .collect();
    items.extend(
        (0..tbd.len())
            .filter(|&i| !tbd_used[i])
            .map(|i| MergeItem::Single(Branch::Tbd, i)),
    );
    items.extend(
        (0..e2e.len())
            .filter(|&j| !e2e_used[j])
            .map(|j| MergeItem::Single(Branch::E2e, j)),
    );
    items
}

fn merged_output(item: MergeItem, tbd: &[TrackOutput], e2e: &[TrackOutput]) -> TrackOutput {
    match item {
        MergeItem::Single(Branch::Tbd, i) => tbd[i].clone(),
        MergeItem::Single(Branch::E2e, j) => e2e[j].clone(),
        MergeItem::Pair {
            tbd: i,
            e2e: j,
            survivor,
            winner,
        } => {
            let pick = |b: Branch| if b == Branch::Tbd { &tbd[i] } else { &e2e[j] };
            let s = pick(survivor);
            let w = pick(winner);
            let provenance = if tbd[i].provenance == e2e[j].provenance {
                tbd[i].provenance
            } else {
                Provenance::Ensemble
            };
            TrackOutput {
                id: s.id,
                bbox: w.bbox,
                score: w.score,
                provenance,
                hits: tbd[i].hits.max(e2e[j].hits),
            }
        }
    }
}

/// Fuses the outputs of the two branches for one frame, merging outputs of
/// the same track or overlapping with IoU ≥ 0.7.
///
/// The merged output keeps the id with the longer history (then the higher
/// score, then the lower id) and the box and score of the higher-scoring
/// side. Diagnostics are carried over from `tbd`.
pub fn ensemble(tbd: &FrameResult, e2e: &FrameResult) -> Result<FrameResult> {
    ensemble_with(tbd, e2e, 0.7, Geometry::Cyclic)
}

pub fn ensemble_with(
    tbd: &FrameResult,
    e2e: &FrameResult,
    iou_threshold: f64,
    geometry: Geometry,
) -> Result<FrameResult> {
    if tbd.frame != e2e.frame {
        return Err(Error::input(format!(
            "ensemble of frames {} and {}",
            tbd.frame, e2e.frame
        )));
    }
    let plan = merge_plan(&tbd.outputs, &e2e.outputs, iou_threshold, geometry, &|_, _| false);
    let mut outputs: Vec<TrackOutput> = plan
        .into_iter()
        .map(|item| merged_output(item, &tbd.outputs, &e2e.outputs))
        .collect();
    outputs.sort_by_key(|o| o.id);
    let mut diagnostics = tbd.diagnostics.clone();
    diagnostics.branches = BranchSet::Both;
    Ok(FrameResult {
        frame: tbd.frame,
        outputs,
        diagnostics,
    })
}

/// Reconciles track states after both branches ran on copies of the same
/// set. Returns the fused tracks, per-detection decisions, and outputs.
fn reconcile(
    tbd: BranchOutcome,
    e2e: BranchOutcome,
    cfg: &TrackerConfig,
) -> (Vec<Tracklet>, Vec<Decision>, Vec<TrackOutput>, BTreeSet<TrackId>) {
    let tbd_out = tbd.outputs();
    let e2e_out = e2e.outputs();
    let same_source = |i: usize, j: usize| tbd.touched[&tbd_out[i].id] == e2e.touched[&e2e_out[j].id];
    let plan = merge_plan(&tbd_out, &e2e_out, cfg.ensemble_iou, cfg.geometry(), &same_source);

    // Chosen updated state per surviving touched id, and ids to drop or age.
    let mut chosen: BTreeMap<TrackId, (Branch, Option<Provenance>)> = BTreeMap::new();
    let mut losers: BTreeSet<TrackId> = BTreeSet::new();
    let mut outputs = Vec::with_capacity(plan.len());
    for &item in &plan {
        let merged = merged_output(item, &tbd_out, &e2e_out);
        match item {
            MergeItem::Single(b, i) => {
                let id = if b == Branch::Tbd { tbd_out[i].id } else { e2e_out[i].id };
                chosen.insert(id, (b, None));
            }
            MergeItem::Pair {
                tbd: i,
                e2e: j,
                survivor,
                winner,
            } => {
                let (sid, lid) = if survivor == Branch::Tbd {
                    (tbd_out[i].id, e2e_out[j].id)
                } else {
                    (e2e_out[j].id, tbd_out[i].id)
                };
                let source = if sid == lid { winner } else { survivor };
                chosen.insert(sid, (source, Some(merged.provenance)));
                if lid != sid {
                    losers.insert(lid);
                }
            }
        }
        outputs.push(merged);
    }
    outputs.sort_by_key(|o| o.id);

    let pick = |b: Branch, id: TrackId| -> Option<&Tracklet> {
        let src = if b == Branch::Tbd { &tbd.tracks } else { &e2e.tracks };
        src.iter().find(|t| t.id == id)
    };
    let touched_in = |b: Branch, id: TrackId| -> bool {
        if b == Branch::Tbd {
            tbd.touched.contains_key(&id)
        } else {
            e2e.touched.contains_key(&id)
        }
    };

    let all_ids: BTreeSet<TrackId> = tbd
        .tracks
        .iter()
        .chain(&e2e.tracks)
        .map(|t| t.id)
        .collect();
    let born: BTreeSet<TrackId> = tbd.born.union(&e2e.born).copied().collect();
    let mut fused = Vec::with_capacity(all_ids.len());
    let mut touched: BTreeMap<TrackId, usize> = BTreeMap::new();
    let mut kept_births = BTreeSet::new();
    for id in all_ids {
        if let Some(&(b, provenance)) = chosen.get(&id) {
            let mut t = pick(b, id).expect("chosen ids exist").clone();
            if let Some(p) = provenance {
                t.provenance = p;
            }
            let det = if b == Branch::Tbd { tbd.touched[&id] } else { e2e.touched[&id] };
            touched.insert(id, det);
            if born.contains(&id) {
                kept_births.insert(id);
            }
            fused.push(t);
        } else if born.contains(&id) {
            // A new track that lost a merge is discarded.
            debug_assert!(losers.contains(&id));
        } else {
            // Untouched in the chosen sense: take the copy that did not move.
            let aged = [Branch::Tbd, Branch::E2e]
                .into_iter()
                .find(|&b| !touched_in(b, id))
                .and_then(|b| pick(b, id))
                .or_else(|| pick(Branch::Tbd, id))
                .expect("existing ids are in both copies");
            fused.push(aged.clone());
        }
    }

    let n = tbd.decisions.len();
    let mut decisions = vec![Decision::Delete; n];
    for (id, &j) in &touched {
        decisions[j] = if kept_births.contains(id) {
            Decision::Initialize
        } else {
            Decision::Update
        };
    }
    let touched_ids = touched.keys().copied().collect();
    (fused, decisions, outputs, touched_ids)
}

/// Stateful tracker for a single sequence.
#[derive(Debug, Clone)]
pub struct Tracker {
    cfg: TrackerConfig,
    moe: Option<MoeParams>,
    dssm: Option<DynamicSsmBlock>,
    tracks: Vec<Tracklet>,
    next_id: u64,
    last_frame: Option<u64>,
    rng: ChaCha8Rng,
    cost_matrices: usize,
}

impl Tracker {
    pub fn new(cfg: TrackerConfig) -> Result<Self> {
        cfg.validate()?;
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(Self {
            cfg,
            moe: None,
            dssm: None,
            tracks: Vec::new(),
            next_id: 1,
            last_frame: None,
            rng,
            cost_matrices: 0,
        })
    }

    /// Uses explicit expert parameters instead of seeded ones.
    pub fn with_moe(mut self, params: MoeParams) -> Result<Self> {
        params.validate()?;
        self.moe = Some(params);
        Ok(self)
    }

    /// Uses an explicit DynamicSSM block instead of a seeded one.
    pub fn with_dssm(mut self, block: DynamicSsmBlock) -> Self {
        self.dssm = Some(block);
        self
    }

    pub fn config(&self) -> &TrackerConfig {
        &self.cfg
    }

    /// Live (Active or Lost) tracks, by id.
    pub fn tracks(&self) -> &[Tracklet] {
        &self.tracks
    }

    pub fn moe(&self) -> Option<&MoeParams> {
        self.moe.as_ref()
    }

    /// Total cost matrices built by the association branch so far.
    pub fn cost_matrices(&self) -> usize {
        self.cost_matrices
    }

    fn ensure_models(&mut self, dim: usize) -> Result<()> {
        if dim == 0 {
            return Ok(());
        }
        if self.cfg.memory.enabled && self.moe.is_none() {
            let mut p = MoeParams::seeded(
                dim,
                self.cfg.memory.n_experts,
                self.cfg.memory.expert_perturbation,
                self.cfg.seed,
            );
            p.lambda = self.cfg.memory.lambda;
            p.k_r = self.cfg.memory.k_r;
            p.temperature = self.cfg.memory.temperature;
            self.moe = Some(p);
        }
        if let Some(p) = &self.moe {
            if p.dim() != dim {
                return Err(Error::input(format!(
                    "embedding width {dim} does not match expert width {}",
                    p.dim()
                )));
            }
        }
        if self.cfg.dssm && self.dssm.is_none() {
            self.dssm = Some(DynamicSsmBlock::seeded(
                dim,
                self.cfg.dssm_directions,
                self.cfg.seed,
            ));
        }
        Ok(())
    }

    fn claim_instances(&mut self, views: &[FlexiTrackInstance]) -> Vec<FlexiTrackInstance> {
        let (sx, sy) = (self.cfg.sigma_x, self.cfg.sigma_y);
        match self.cfg.instances {
            InstanceSource::None => Vec::new(),
            InstanceSource::Feedback => views.to_vec(),
            InstanceSource::Denoise => views
                .iter()
                .map(|v| perturb(v, sx, sy, &mut self.rng))
                .collect(),
            InstanceSource::Both => {
                let mut all = views.to_vec();
                for v in views {
                    all.push(perturb(v, sx, sy, &mut self.rng));
                }
                all
            }
        }
    }

    /// Processes one frame. Frames must arrive in strictly increasing order.
    pub fn step(&mut self, frame: u64, detections: &[Detection]) -> Result<FrameResult> {
        if let Some(last) = self.last_frame {
            if frame <= last {
                return Err(Error::input(format!(
                    "frame {frame} arrived after frame {last}"
                )));
            }
        }
        let dim = detections.first().map_or(0, |d| d.embedding.len());
        if detections.iter().any(|d| d.embedding.len() != dim) {
            return Err(Error::input(format!("frame {frame}: mixed embedding widths")));
        }
        self.ensure_models(dim)?;
        let refined;
        let detections = match (&self.dssm, self.cfg.dssm) {
            (Some(block), true) if dim > 0 && !detections.is_empty() => {
                refined = refine_embeddings(block, detections)?;
                refined.as_slice()
            }
            _ => detections,
        };
        self.last_frame = Some(frame);

        for t in &mut self.tracks {
            t.kalman = kalman_predict(&t.kalman, &self.cfg.process_noise);
        }
        let moe = if self.cfg.memory.enabled { self.moe.as_ref() } else { None };
        let views = instances_from_predicted(&self.tracks, moe);
        let instances = self.claim_instances(&views);
        let mut claimed =
            claim_detections(&instances, detections, self.cfg.claim_gate, &self.cfg.association);
        if self.cfg.instances == InstanceSource::Both {
            keep_best_claim_per_track(&mut claimed);
        }
        let branches = branch_select(&claimed, self.tracks.len(), &self.cfg);

        let ctx = FrameContext {
            frame,
            cfg: &self.cfg,
            detections,
        };
        let mut next_id = self.next_id;
        let (tracks, decisions, outputs, touched, cost_matrices) = match branches {
            BranchSet::E2e => {
                let o = e2e_branch(&claimed, &self.tracks, &ctx, &mut next_id)?;
                let outputs = o.outputs();
                let touched = o.touched.keys().copied().collect();
                (o.tracks, o.decisions, outputs, touched, 0)
            }
            BranchSet::Tbd => {
                let o = tbd_branch(&views, &self.tracks, &ctx, &mut next_id)?;
                let outputs = o.outputs();
                let touched = o.touched.keys().copied().collect();
                let n = o.cost_matrices;
                (o.tracks, o.decisions, outputs, touched, n)
            }
            BranchSet::Both => {
                let e = e2e_branch(&claimed, &self.tracks, &ctx, &mut next_id)?;
                let t = tbd_branch(&views, &self.tracks, &ctx, &mut next_id)?;
                debug_assert_eq!((e.branch, t.branch), (Branch::E2e, Branch::Tbd));
                let n = t.cost_matrices;
                let (tracks, decisions, outputs, touched) = reconcile(t, e, &self.cfg);
                (tracks, decisions, outputs, touched, n)
            }
        };
        self.next_id = next_id;
        self.cost_matrices += cost_matrices;

        let touched: BTreeSet<TrackId> = touched;
        let mut removed = 0;
        let mut live = Vec::with_capacity(tracks.len());
        for mut t in tracks {
            if !touched.contains(&t.id) {
                t.time_since_update += 1;
                t.state = if t.time_since_update > self.cfg.max_age {
                    TrackState::Removed
                } else {
                    TrackState::Lost
                };
            }
            if t.state == TrackState::Removed {
                removed += 1;
            } else {
                live.push(t);
            }
        }
        live.sort_by_key(|t| t.id);
        self.tracks = live;

        let mut outputs: Vec<TrackOutput> = outputs
            .into_iter()
            .filter(|o| self.tracks.iter().any(|t| t.id == o.id))
            .collect();
        if self.cfg.emit_lost {
            outputs.extend(
                self.tracks
                    .iter()
                    .filter(|t| t.state == TrackState::Lost)
                    .map(|t| TrackOutput {
                        id: t.id,
                        bbox: t.bbox(),
                        score: t.last_score,
                        provenance: t.provenance,
                        hits: t.hits,
                    }),
            );
            outputs.sort_by_key(|o| o.id);
        }

        let count = |d: Decision| decisions.iter().filter(|&&x| x == d).count();
        let diagnostics = FrameDiagnostics {
            branches,
            claimed: claimed.claimed.len(),
            unclaimed: claimed.unclaimed.len(),
            updates: count(Decision::Update),
            inits: count(Decision::Initialize),
            deletes: count(Decision::Delete),
            removed,
            cost_matrices,
        };
        Ok(FrameResult {
            frame,
            outputs,
            diagnostics,
        })
    }

    /// Runs a whole sequence given as `(frame, detections)` pairs.
    pub fn run<'a>(
        &mut self,
        frames: impl IntoIterator<Item = (u64, &'a [Detection])>,
    ) -> Result<Vec<FrameResult>> {
        frames.into_iter().map(|(f, d)| self.step(f, d)).collect()
    }
}

/// With duplicate instances per track, keeps each track's best claim and
/// returns the rest to the unclaimed pool.
fn keep_best_claim_per_track(claimed: &mut ClaimedDetections) {
    let mut best: BTreeMap<TrackId, usize> = BTreeMap::new();
    for (k, c) in claimed.claimed.iter().enumerate() {
        match best.get(&c.track_id) {
            Some(&b) if claimed.claimed[b].similarity >= c.similarity => {}
            _ => {
                best.insert(c.track_id, k);
            }
        }
    }
    let keep: BTreeSet<usize> = best.values().copied().collect();
    let all = std::mem::take(&mut claimed.claimed);
    for (k, c) in all.into_iter().enumerate() {
        if keep.contains(&k) {
            claimed.claimed.push(c);
        } else {
            claimed.unclaimed.push(crate::feedback::Unclaimed {
                index: c.index,
                score: c.detection.score,
                detection: c.detection,
            });
        }
    }
    claimed.unclaimed.sort_by_key(|u| u.index);
}
