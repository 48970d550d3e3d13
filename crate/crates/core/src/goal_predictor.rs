//! Shared 3D goal queries. Candidates live on the ground plane; each view
//! projects them, embeds the projected coordinates and refines them
//! against its own state features. The per-view results are fused under a
//! visibility and random mask into one set of query features, scored into
//! a single heatmap, and sampled by coverage hill climbing. Because both
//! views read the same heatmap and the same sampled indices, the selected
//! goals agree across views by construction.

use std::collections::HashSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::BEV_INPUT_SCALE;
use crate::geometry::{
    from_absolute_frame, is_visible, project_to_bev, project_to_fpv, to_absolute_frame, CameraModel, Point2,
    Point3,
};
use crate::nn::{BlockSpec, KeySets, Mlp, NnError, ParameterStore, Tape, Tensor, TransformerLayer, Var};
use crate::scene::Sample;

#[derive(Debug, thiserror::Error)]
pub enum GoalError {
    #[error("no candidates: no lane vertex within {radius} m of the target")]
    NoCandidates { radius: f64 },
    #[error("mask probability {0} outside [0, 1]")]
    InvalidBeta(f64),
    #[error("invalid candidate config: {0}")]
    InvalidConfig(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Sparse,
    Dense,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CandidateConfig {
    pub candidate_radius: f64,
    pub dense_step: f64,
    pub dense_radius: f64,
    pub dedup_cell: f64,
}

impl Default for CandidateConfig {
    fn default() -> Self {
        Self {
            candidate_radius: 50.0,
            dense_step: 1.0,
            dense_radius: 3.0,
            dedup_cell: 0.5,
        }
    }
}

impl CandidateConfig {
    pub fn validate(&self) -> Result<(), GoalError> {
        let ok = self.candidate_radius > 0.0
            && self.dense_step > 0.0
            && self.dense_radius >= 0.0
            && self.dedup_cell > 0.0
            && [
                self.candidate_radius,
                self.dense_step,
                self.dense_radius,
                self.dedup_cell,
            ]
            .iter()
            .all(|x| x.is_finite());
        if ok {
            Ok(())
        } else {
            Err(GoalError::InvalidConfig(format!("{self:?}")))
        }
    }
}

/// Goal candidates, sparse first.
#[derive(Clone, Debug, PartialEq)]
pub struct GoalCandidateSet {
    /// World coordinates, `z = 0`.
    pub points: Vec<Point3>,
    /// The same points in the sample's absolute frame.
    pub frame_points: Vec<Point2>,
    pub provenance: Vec<Provenance>,
    /// Instance index of the lane a sparse point came from.
    pub owner_lane: Vec<Option<usize>>,
}

impl GoalCandidateSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn ground(&self) -> Vec<Point2> {
        self.points.iter().map(|p| project_to_bev(*p)).collect()
    }
}

fn cell(p: Point2, size: f64) -> (i64, i64) {
    ((p.x / size).floor() as i64, (p.y / size).floor() as i64)
}

/// Sparse candidates are lane vertices within `candidate_radius` of the
/// target's last observed position. Dense candidates are the points of a
/// lattice anchored at the absolute-frame origin that lie within
/// `dense_radius` of a sparse point and whose dedup cell no earlier
/// candidate occupies.
pub fn sample_candidates(s: &Sample, cfg: &CandidateConfig) -> Result<GoalCandidateSet, GoalError> {
    cfg.validate()?;
    let centre = s.last_observed().ground();
    let frame = &s.frame;
    let to_frame = |p: Point3| {
        let q = to_absolute_frame(Point3::new(p.x, p.y, 0.0), frame);
        Point2::new(q.x, q.y)
    };
    let mut set = GoalCandidateSet {
        points: Vec::new(),
        frame_points: Vec::new(),
        provenance: Vec::new(),
        owner_lane: Vec::new(),
    };
    for (idx, lane) in s.lanes() {
        for p in &lane.polyline {
            if p.ground().distance(centre) <= cfg.candidate_radius {
                set.points.push(Point3::new(p.x, p.y, 0.0));
                set.frame_points.push(to_frame(*p));
                set.provenance.push(Provenance::Sparse);
                set.owner_lane.push(Some(idx));
            }
        }
    }
    if set.is_empty() {
        return Err(GoalError::NoCandidates {
            radius: cfg.candidate_radius,
        });
    }
    let mut occupied: HashSet<(i64, i64)> = set
        .frame_points
        .iter()
        .map(|p| cell(*p, cfg.dedup_cell))
        .collect();
    let sparse = set.frame_points.clone();
    let (step, r) = (cfg.dense_step, cfg.dense_radius);
    for c in sparse {
        let (i0, i1) = (
            ((c.x - r) / step).ceil() as i64,
            ((c.x + r) / step).floor() as i64,
        );
        let (j0, j1) = (
            ((c.y - r) / step).ceil() as i64,
            ((c.y + r) / step).floor() as i64,
        );
        for i in i0..=i1 {
            for j in j0..=j1 {
                let q = Point2::new(i as f64 * step, j as f64 * step);
                if q.distance(c) > r || !occupied.insert(cell(q, cfg.dedup_cell)) {
                    continue;
                }
                let w = from_absolute_frame(Point3::new(q.x, q.y, 0.0), frame);
                set.points.push(Point3::new(w.x, w.y, 0.0));
                set.frame_points.push(q);
                set.provenance.push(Provenance::Dense);
                set.owner_lane.push(None);
            }
        }
    }
    Ok(set)
}

/// Per-view keep flags.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskMatrix {
    pub bev: Vec<bool>,
    pub fpv: Vec<bool>,
}

impl MaskMatrix {
    /// Geometric visibility only.
    pub fn visibility(points: &[Point3], cam: &CameraModel) -> Self {
        Self {
            bev: vec![true; points.len()],
            fpv: points.iter().map(|p| is_visible(*p, cam)).collect(),
        }
    }
}

/// Visibility mask, then during training an independent Bernoulli(`beta`)
/// drop of each visible flag. BEV flags draw first, then FPV, one draw per
/// visible flag.
pub fn build_mask<R: Rng + ?Sized>(
    points: &[Point3],
    cam: &CameraModel,
    rng: &mut R,
    beta: f64,
    training: bool,
) -> Result<MaskMatrix, GoalError> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(GoalError::InvalidBeta(beta));
    }
    let mut m = MaskMatrix::visibility(points, cam);
    if training && beta > 0.0 {
        for flags in [&mut m.bev, &mut m.fpv] {
            for f in flags.iter_mut().filter(|f| **f) {
                *f = rng.random::<f64>() >= beta;
            }
        }
    }
    Ok(m)
}

/// Query coordinates per view: absolute-frame meters times
/// [`BEV_INPUT_SCALE`] in BEV, pixels divided by the image size in FPV (zero
/// where invisible).
#[derive(Clone, Debug)]
pub struct QueryCoords {
    pub bev: Tensor,
    pub fpv: Tensor,
    pub fpv_visible: Vec<bool>,
}

impl QueryCoords {
    pub fn new(set: &GoalCandidateSet, cam: &CameraModel) -> Self {
        let n = set.len();
        let mut bev = Vec::with_capacity(2 * n);
        let mut fpv = Vec::with_capacity(2 * n);
        let mut vis = Vec::with_capacity(n);
        for (p, f) in set.points.iter().zip(&set.frame_points) {
            bev.extend([f.x * BEV_INPUT_SCALE, f.y * BEV_INPUT_SCALE]);
            match project_to_fpv(*p, cam) {
                Some(px) => {
                    fpv.extend([px.x / cam.image_width, px.y / cam.image_height]);
                    vis.push(true);
                }
                None => {
                    fpv.extend([0.0, 0.0]);
                    vis.push(false);
                }
            }
        }
        Self {
            bev: Tensor::from_vec(n, 2, bev).expect("two coordinates per query"),
            fpv: Tensor::from_vec(n, 2, fpv).expect("two coordinates per query"),
            fpv_visible: vis,
        }
    }
}

#[derive(Clone, Debug)]
struct ViewRefiner {
    embed: Mlp,
    rounds: Vec<TransformerLayer>,
}

/// Per-view coordinate embedding plus transformer refinement against the
/// view's state features.
#[derive(Clone, Debug)]
pub struct QueryRefiner {
    bev: ViewRefiner,
    fpv: ViewRefiner,
}

impl QueryRefiner {
    pub fn new(store: &mut ParameterStore, rounds: usize, spec: &BlockSpec) -> Result<Self, NnError> {
        let e = spec.embedding_size;
        let mut make = |view: &str| -> Result<ViewRefiner, NnError> {
            Ok(ViewRefiner {
                embed: Mlp::new(store, &format!("query.{view}.embed"), 2, e, spec)?,
                rounds: (0..rounds)
                    .map(|r| TransformerLayer::new(store, &format!("query.{view}.tf.{r}"), e, spec))
                    .collect::<Result<_, _>>()?,
            })
        };
        Ok(Self {
            bev: make("bev")?,
            fpv: make("fpv")?,
        })
    }

    fn refine_view(
        r: &ViewRefiner,
        tape: &mut Tape<'_>,
        coords: &Tensor,
        coord_visible: Option<&[bool]>,
        p: Var,
        p_visible: &[bool],
    ) -> Result<Var, NnError> {
        let x = tape.input(coords.clone());
        let mut q = r.embed.forward(tape, x)?;
        if let Some(vis) = coord_visible {
            if vis.iter().any(|v| !v) {
                q = tape.mask_rows(q, vis)?;
            }
        }
        let keys: Vec<usize> = (0..p_visible.len()).filter(|&j| p_visible[j]).collect();
        let n = coords.rows();
        for layer in &r.rounds {
            q = layer.forward(tape, q, p, KeySets::shared(n, &keys))?;
        }
        Ok(q)
    }

    /// Unmasked per-view query features `[Ω'_bev, Ω'_fpv]`.
    pub fn per_view(
        &self,
        tape: &mut Tape<'_>,
        coords: &QueryCoords,
        p: [Var; 2],
        p_visible: [&[bool]; 2],
    ) -> Result<[Var; 2], NnError> {
        let b = Self::refine_view(&self.bev, tape, &coords.bev, None, p[0], p_visible[0])?;
        let f = Self::refine_view(
            &self.fpv,
            tape,
            &coords.fpv,
            Some(&coords.fpv_visible),
            p[1],
            p_visible[1],
        )?;
        Ok([b, f])
    }
}

/// `Ω = Ω'_bev ⊙ λ_bev + Ω'_fpv ⊙ λ_fpv` with the flags broadcast over the
/// feature width.
pub fn fuse_queries(tape: &mut Tape<'_>, per_view: [Var; 2], mask: &MaskMatrix) -> Result<Var, NnError> {
    let b = tape.mask_rows(per_view[0], &mask.bev)?;
    let f = tape.mask_rows(per_view[1], &mask.fpv)?;
    tape.add(b, f)
}

/// Refinement and fusion in one call.
pub fn refine_queries(
    tape: &mut Tape<'_>,
    refiner: &QueryRefiner,
    coords: &QueryCoords,
    p: [Var; 2],
    p_visible: [&[bool]; 2],
    mask: &MaskMatrix,
) -> Result<Var, NnError> {
    let per_view = refiner.per_view(tape, coords, p, p_visible)?;
    fuse_queries(tape, per_view, mask)
}

/// Score distribution over the candidates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub scores: Vec<f64>,
}

/// Scores each query row, `n x 1` logits.
pub fn score_logits(tape: &mut Tape<'_>, scorer: &Mlp, omega: Var) -> Result<Var, NnError> {
    scorer.forward(tape, omega)
}

/// Softmax of the logits restricted to `support`; zero outside it.
pub fn heatmap_from_logits(logits: &Tensor, support: Option<&[bool]>) -> Heatmap {
    let data = logits.data();
    let inside = |i: usize| support.is_none_or(|s| s[i]);
    let max = (0..data.len())
        .filter(|&i| inside(i))
        .map(|i| data[i])
        .fold(f64::NEG_INFINITY, f64::max);
    let mut scores: Vec<f64> = (0..data.len())
        .map(|i| if inside(i) { (data[i] - max).exp() } else { 0.0 })
        .collect();
    let z: f64 = scores.iter().sum();
    if z > 0.0 {
        scores.iter_mut().for_each(|s| *s /= z);
    }
    Heatmap { scores }
}

/// Index of the candidate nearest to `endpoint`, lowest index on ties,
/// among those with `allowed[i]` (all when `None`).
pub fn goal_target(points: &[Point2], endpoint: Point2, allowed: Option<&[bool]>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, p) in points.iter().enumerate() {
        if allowed.is_some_and(|a| !a[i]) {
            continue;
        }
        let d = p.distance(endpoint);
        if best.is_none_or(|(_, bd)| d < bd) {
            best = Some((i, d));
        }
    }
    best.map(|(i, _)| i)
}

/// Cross entropy of the heatmap against the one-hot target.
pub fn goal_loss(
    tape: &mut Tape<'_>,
    logits: Var,
    support: Option<&[bool]>,
    target: usize,
) -> Result<Var, NnError> {
    tape.softmax_cross_entropy(logits, support, target)
}

/// Sampled goal indices, in selection order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoalSet {
    pub indices: Vec<usize>,
}

/// Pass limit of the exchange phase.
pub const MAX_HILL_CLIMB_PASSES: usize = 100;

/// `Σ_q σ(q)·[dist(q, G) ≤ r]`.
pub fn coverage(scores: &[f64], points: &[Point2], goals: &[usize], radius: f64) -> f64 {
    scores
        .iter()
        .zip(points)
        .filter(|(_, q)| goals.iter().any(|&g| points[g].distance(**q) <= radius))
        .map(|(s, _)| s)
        .sum()
}

struct Coverage<'a> {
    scores: &'a [f64],
    /// `near[i]`: candidates within the radius of `i`, ascending.
    near: Vec<Vec<usize>>,
    count: Vec<u32>,
}

impl Coverage<'_> {
    fn gain(&self, c: usize) -> f64 {
        self.near[c]
            .iter()
            .filter(|&&q| self.count[q] == 0)
            .map(|&q| self.scores[q])
            .sum()
    }

    fn add(&mut self, c: usize) {
        for &q in &self.near[c] {
            self.count[q] += 1;
        }
    }

    fn remove(&mut self, c: usize) {
        for &q in &self.near[c] {
            self.count[q] -= 1;
        }
    }

    fn total(&self) -> f64 {
        self.scores
            .iter()
            .zip(&self.count)
            .filter(|(_, c)| **c > 0)
            .map(|(s, _)| s)
            .sum()
    }
}

/// Greedy coverage seeding, then local exchange: a goal is replaced by the
/// best unselected candidate within `radius` of it while coverage strictly
/// increases. Ties go to the lowest index. Returns every candidate when
/// there are at most `k`.
pub fn hill_climb_sample(scores: &[f64], points: &[Point2], k: usize, radius: f64) -> GoalSet {
    let n = scores.len();
    if n <= k {
        return GoalSet {
            indices: (0..n).collect(),
        };
    }
    let near: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| points[i].distance(points[j]) <= radius)
                .collect()
        })
        .collect();
    let mut cov = Coverage {
        scores,
        near,
        count: vec![0; n],
    };
    let mut selected = vec![false; n];
    let mut goals = Vec::with_capacity(k);
    for _ in 0..k {
        let mut best: Option<(usize, f64)> = None;
        for c in (0..n).filter(|&c| !selected[c]) {
            let g = cov.gain(c);
            if best.is_none_or(|(_, bg)| g > bg) {
                best = Some((c, g));
            }
        }
        let (c, _) = best.expect("n > k leaves an unselected candidate");
        selected[c] = true;
        cov.add(c);
        goals.push(c);
    }
    for _ in 0..MAX_HILL_CLIMB_PASSES {
        let mut improved = false;
        for goal in goals.iter_mut() {
            let g = *goal;
            let current = cov.total();
            cov.remove(g);
            let mut best: Option<(usize, f64)> = None;
            let nbrs = cov.near[g].clone();
            for &c in nbrs.iter().filter(|&&c| !selected[c]) {
                cov.add(c);
                let value = cov.total();
                cov.remove(c);
                if value > current && best.is_none_or(|(_, bv)| value > bv) {
                    best = Some((c, value));
                }
            }
            match best {
                Some((c, _)) => {
                    selected[g] = false;
                    selected[c] = true;
                    cov.add(c);
                    *goal = c;
                    improved = true;
                }
                None => cov.add(g),
            }
        }
        if !improved {
            break;
        }
    }
    GoalSet { indices: goals }
}

/// Goal coordinates in both views.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerViewGoals {
    pub indices_bev: Vec<usize>,
    pub indices_fpv: Vec<usize>,
    /// World ground plane, meters.
    pub bev: Vec<Point2>,
    /// Pixels, `None` when invisible.
    pub fpv: Vec<Option<Point2>>,
}

/// Projects goals into both views. With one shared [`GoalSet`] pass the
/// same set twice.
pub fn select_goals_per_view(
    bev_goals: &GoalSet,
    fpv_goals: &GoalSet,
    set: &GoalCandidateSet,
    cam: &CameraModel,
) -> PerViewGoals {
    PerViewGoals {
        indices_bev: bev_goals.indices.clone(),
        indices_fpv: fpv_goals.indices.clone(),
        bev: bev_goals
            .indices
            .iter()
            .map(|&i| project_to_bev(set.points[i]))
            .collect(),
        fpv: fpv_goals
            .indices
            .iter()
            .map(|&i| project_to_fpv(set.points[i], cam))
            .collect(),
    }
}

/// JSON form consumed by the plot command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatmapExport {
    pub candidates: Vec<[f64; 3]>,
    pub scores: Vec<f64>,
}

impl HeatmapExport {
    pub fn new(set: &GoalCandidateSet, heatmap: &Heatmap) -> Self {
        Self {
            candidates: set.points.iter().map(|p| [p.x, p.y, p.z]).collect(),
            scores: heatmap.scores.clone(),
        }
    }
}
