//! The full predictor: both encoders, the query refiner, goal scoring and
//! both trajectory generators, in shared-query or single-view wiring.

use serde::{Deserialize, Serialize};

use crate::encoder::{
    global_graph_forward, sparse_goal_loss, Encoder, GraphMode, ViewInput, BEV_INPUT_SCALE,
};
use crate::geometry::{
    from_absolute_frame, project_to_fpv, AbsoluteFrame, CameraModel, Point2, Point3, ViewId,
};
use crate::goal_predictor::{
    goal_loss, goal_target, heatmap_from_logits, hill_climb_sample, refine_queries, sample_candidates,
    score_logits, select_goals_per_view, CandidateConfig, GoalCandidateSet, GoalError, GoalSet, Heatmap,
    MaskMatrix, PerViewGoals, QueryCoords, QueryRefiner,
};
use crate::nn::{BlockSpec, Checkpoint, Mlp, NnError, ParameterStore, Tape, Tensor, Var};
use crate::scene::{vectorize_bev, vectorize_fpv, Sample, SceneError};
use crate::trajectory_generator::{
    regression_loss, rows_to_trajectories, TrajectoryGenerator, TrajectoryPrediction,
};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Goal(#[from] GoalError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("checkpoint does not match the model: {0}")]
    Checkpoint(String),
}

/// Architecture and wiring. Everything here is fixed for the lifetime of
/// a parameter set and is stored in checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub block: BlockSpec,
    pub subgraph_layers: usize,
    pub global_layers: usize,
    pub refinement_rounds: usize,
    pub t_pred: usize,
    pub k: usize,
    pub coverage_radius: f64,
    pub candidates: CandidateConfig,
    pub use_shared_queries: bool,
    pub use_cross_attention: bool,
    pub epsilon: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            block: BlockSpec::default(),
            subgraph_layers: 6,
            global_layers: 6,
            refinement_rounds: 1,
            t_pred: 12,
            k: 6,
            coverage_radius: 2.0,
            candidates: CandidateConfig::default(),
            use_shared_queries: true,
            use_cross_attention: true,
            epsilon: 0.05,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        self.block.validate()?;
        self.candidates.validate()?;
        let bad = |m: &str| Err(ModelError::Config(m.into()));
        if self.subgraph_layers == 0 {
            return bad("subgraph_layers must be positive");
        }
        if self.t_pred == 0 || self.k == 0 {
            return bad("t_pred and k must be positive");
        }
        if !(self.coverage_radius > 0.0 && self.coverage_radius.is_finite()) {
            return bad("coverage_radius must be positive");
        }
        if !(0.0..1.0).contains(&self.epsilon) {
            return bad("epsilon must lie in [0, 1)");
        }
        Ok(())
    }

    pub fn graph_mode(&self) -> GraphMode {
        if self.use_cross_attention {
            GraphMode::CrossView {
                epsilon: self.epsilon,
            }
        } else {
            GraphMode::Plain
        }
    }
}

/// Lane-scoring target of one view.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseTarget {
    /// Instance indices of the scored lanes.
    pub lanes: Vec<usize>,
    /// Position of the positive lane in `lanes`.
    pub label: usize,
}

/// Everything the model reads from one sample, computed once.
#[derive(Clone, Debug)]
pub struct PreparedSample {
    pub views: [ViewInput; 2],
    pub target: usize,
    pub candidates: GoalCandidateSet,
    pub coords: QueryCoords,
    /// Candidate nearest the true endpoint.
    pub goal_target: usize,
    pub sparse: [Option<SparseTarget>; 2],
    /// Teacher-forcing goal per view in view units, with FPV visibility.
    pub teacher_goal: [([f64; 2], bool); 2],
    /// Ground-truth future per view in view units.
    pub future: [Vec<Option<[f64; 2]>>; 2],
    pub camera: CameraModel,
    pub frame: AbsoluteFrame,
}

fn frame_xy(p: Point2, frame: &AbsoluteFrame) -> [f64; 2] {
    let q = crate::geometry::to_absolute_frame(Point3::new(p.x, p.y, 0.0), frame);
    [q.x, q.y]
}

fn normalized(px: Point2, cam: &CameraModel) -> [f64; 2] {
    [px.x / cam.image_width, px.y / cam.image_height]
}

/// Precomputes inputs and targets of `s`.
pub fn prepare(s: &Sample, cfg: &ModelConfig) -> Result<PreparedSample, ModelError> {
    if s.t_pred() != cfg.t_pred {
        return Err(ModelError::Config(format!(
            "sample has {} future steps, model predicts {}",
            s.t_pred(),
            cfg.t_pred
        )));
    }
    let bev = ViewInput::from_view(&vectorize_bev(s)).scaled(BEV_INPUT_SCALE);
    let fpv = ViewInput::from_view(&vectorize_fpv(s));
    let candidates = sample_candidates(s, &cfg.candidates)?;
    let coords = QueryCoords::new(&candidates, &s.camera);
    let endpoint = *s.future.last().expect("validated future");
    let ground = candidates.ground();
    let goal_target = goal_target(&ground, endpoint, None).expect("candidate set is nonempty");

    let sparse_idx: Vec<usize> = (0..candidates.len())
        .filter(|&i| candidates.owner_lane[i].is_some())
        .collect();
    let sparse_pts: Vec<Point2> = sparse_idx.iter().map(|&i| ground[i]).collect();
    let nearest = goal_target_sparse(&sparse_pts, endpoint);
    let positive = candidates.owner_lane[sparse_idx[nearest]].expect("sparse point has an owner");
    let mut owners: Vec<usize> = sparse_idx
        .iter()
        .filter_map(|&i| candidates.owner_lane[i])
        .collect();
    owners.sort_unstable();
    owners.dedup();
    let sparse = [&bev.visible, &fpv.visible].map(|visible| {
        let lanes: Vec<usize> = owners.iter().copied().filter(|&l| visible[l]).collect();
        lanes
            .iter()
            .position(|&l| l == positive)
            .map(|label| SparseTarget {
                lanes: lanes.clone(),
                label,
            })
    });

    let end_fpv = project_to_fpv(Point3::new(endpoint.x, endpoint.y, 0.0), &s.camera);
    let teacher_goal = [
        (frame_xy(endpoint, &s.frame), true),
        match end_fpv {
            Some(px) => (normalized(px, &s.camera), true),
            None => ([0.0, 0.0], false),
        },
    ];
    let future = [
        s.future.iter().map(|p| Some(frame_xy(*p, &s.frame))).collect(),
        s.future_fpv()
            .iter()
            .map(|p| p.map(|px| normalized(px, &s.camera)))
            .collect(),
    ];
    Ok(PreparedSample {
        views: [bev, fpv],
        target: s.target_index(),
        candidates,
        coords,
        goal_target,
        sparse,
        teacher_goal,
        future,
        camera: s.camera.clone(),
        frame: s.frame,
    })
}

impl PreparedSample {
    /// Keeps the first `n` candidates plus the goal target. Smaller sets
    /// make finite-difference checks cheap.
    pub fn truncate_candidates(&mut self, n: usize) {
        let mut keep: Vec<usize> = (0..n.min(self.candidates.len())).collect();
        if self.goal_target >= n {
            keep.push(self.goal_target);
            self.goal_target = keep.len() - 1;
        }
        let c = &self.candidates;
        self.candidates = GoalCandidateSet {
            points: keep.iter().map(|&i| c.points[i]).collect(),
            frame_points: keep.iter().map(|&i| c.frame_points[i]).collect(),
            provenance: keep.iter().map(|&i| c.provenance[i]).collect(),
            owner_lane: keep.iter().map(|&i| c.owner_lane[i]).collect(),
        };
        self.coords = QueryCoords::new(&self.candidates, &self.camera);
    }
}

fn goal_target_sparse(points: &[Point2], endpoint: Point2) -> usize {
    goal_target(points, endpoint, None).expect("at least one sparse candidate")
}

#[derive(Clone, Debug)]
enum Scorers {
    Shared(Mlp),
    PerView([Mlp; 2]),
}

/// Loss weights of the composite objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
    pub w_bev: f64,
    pub w_fpv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w1: 1.0,
            w2: 1.0,
            w3: 1.0,
            w_bev: 1.0,
            w_fpv: 1.0,
        }
    }
}

/// Loss terms on the tape. Missing terms (no evaluable target) are `None`
/// and count as zero. Under shared queries both views hold the same `L2`.
#[derive(Clone, Debug)]
pub struct LossVars {
    pub l1: [Option<Var>; 2],
    pub l2: [Option<Var>; 2],
    pub l3: [Option<Var>; 2],
    pub total: Var,
}

/// Plain values of [`LossVars`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub l1: [f64; 2],
    pub l2: [f64; 2],
    pub l3: [f64; 2],
    pub total: f64,
}

impl LossVars {
    pub fn record(&self, tape: &Tape<'_>) -> LossRecord {
        let v = |x: &Option<Var>| x.map_or(0.0, |x| tape.value(x).item());
        LossRecord {
            l1: [v(&self.l1[0]), v(&self.l1[1])],
            l2: [v(&self.l2[0]), v(&self.l2[1])],
            l3: [v(&self.l3[0]), v(&self.l3[1])],
            total: tape.value(self.total).item(),
        }
    }
}

/// Inference output of one sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    /// One shared heatmap, or BEV then FPV in single-view wiring.
    pub heatmaps: Vec<Heatmap>,
    pub goals: PerViewGoals,
    pub trajectories: TrajectoryPrediction,
}

/// Checkpoint tensor names starting with this belong to the optimizer.
pub const OPTIMIZER_PREFIX: &str = "optim.";

/// Parameters plus wiring.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParameterStore,
    encoder: Encoder,
    refiner: QueryRefiner,
    scorers: Scorers,
    generators: [TrajectoryGenerator; 2],
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let spec = config.block;
        let e = spec.embedding_size;
        let mut store = ParameterStore::new(seed);
        let encoder = Encoder::new(&mut store, config.subgraph_layers, config.global_layers, &spec)?;
        let refiner = QueryRefiner::new(&mut store, config.refinement_rounds, &spec)?;
        let scorers = if config.use_shared_queries {
            Scorers::Shared(Mlp::new(&mut store, "goal.scorer", e, 1, &spec)?)
        } else {
            Scorers::PerView([
                Mlp::new(&mut store, "goal.scorer.bev", e, 1, &spec)?,
                Mlp::new(&mut store, "goal.scorer.fpv", e, 1, &spec)?,
            ])
        };
        let generators = [
            TrajectoryGenerator::new(&mut store, ViewId::Bev, config.t_pred, &spec)?,
            TrajectoryGenerator::new(&mut store, ViewId::Fpv, config.t_pred, &spec)?,
        ];
        Ok(Self {
            config,
            store,
            encoder,
            refiner,
            scorers,
            generators,
        })
    }

    /// Rebuilds a model whose config is `meta["model"]` and loads every
    /// tensor by name.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, ModelError> {
        let cfg: ModelConfig = serde_json::from_value(ckpt.meta["model"].clone())
            .map_err(|e| ModelError::Checkpoint(format!("model config: {e}")))?;
        let mut model = Self::new(cfg, 0)?;
        model.load_tensors(ckpt)?;
        Ok(model)
    }

    /// Copies the checkpoint's tensors into this model; names and shapes
    /// must match exactly. Optimizer state (names under `optim.`) is
    /// ignored.
    pub fn load_tensors(&mut self, ckpt: &Checkpoint) -> Result<(), ModelError> {
        let params: Vec<&(String, Tensor)> = ckpt
            .tensors
            .iter()
            .filter(|(n, _)| !n.starts_with(OPTIMIZER_PREFIX))
            .collect();
        if params.len() != self.store.len() {
            return Err(ModelError::Checkpoint(format!(
                "{} tensors, model has {}",
                params.len(),
                self.store.len()
            )));
        }
        for (name, t) in params {
            let id = self
                .store
                .id(name)
                .ok_or_else(|| ModelError::Checkpoint(format!("unknown tensor {name}")))?;
            self.store
                .assign(id, t.clone())
                .map_err(|e| ModelError::Checkpoint(format!("{name}: {e}")))?;
        }
        Ok(())
    }

    pub fn tensors(&self) -> Vec<(String, Tensor)> {
        self.store
            .iter()
            .map(|(_, n, t)| (n.to_string(), t.clone()))
            .collect()
    }

    /// State features `[P_bev, P_fpv]`.
    pub fn encode(&self, tape: &mut Tape<'_>, prep: &PreparedSample) -> Result<[Var; 2], ModelError> {
        let a_bev = self.encoder.bev.subgraph_forward(tape, &prep.views[0])?;
        let a_fpv = self.encoder.fpv.subgraph_forward(tape, &prep.views[1])?;
        let out = global_graph_forward(
            tape,
            &self.encoder,
            a_bev,
            a_fpv,
            [&prep.views[0].visible, &prep.views[1].visible],
            self.config.graph_mode(),
        )?;
        Ok([out.bev, out.fpv])
    }

    /// Goal logits: one shared `n x 1` column, or one per view.
    fn goal_logits(
        &self,
        tape: &mut Tape<'_>,
        prep: &PreparedSample,
        p: [Var; 2],
        mask: &MaskMatrix,
    ) -> Result<Vec<Var>, ModelError> {
        let vis = [&prep.views[0].visible[..], &prep.views[1].visible[..]];
        match &self.scorers {
            Scorers::Shared(scorer) => {
                let omega = refine_queries(tape, &self.refiner, &prep.coords, p, vis, mask)?;
                Ok(vec![score_logits(tape, scorer, omega)?])
            }
            Scorers::PerView(scorers) => {
                let per_view = self.refiner.per_view(tape, &prep.coords, p, vis)?;
                let flags = [&mask.bev, &mask.fpv];
                let mut out = Vec::with_capacity(2);
                for v in 0..2 {
                    let masked = tape.mask_rows(per_view[v], flags[v])?;
                    out.push(score_logits(tape, &scorers[v], masked)?);
                }
                Ok(out)
            }
        }
    }

    fn fpv_support(prep: &PreparedSample) -> &[bool] {
        &prep.coords.fpv_visible
    }

    /// All loss terms and their weighted total for one sample.
    pub fn loss(
        &self,
        tape: &mut Tape<'_>,
        prep: &PreparedSample,
        mask: &MaskMatrix,
        w: &LossWeights,
    ) -> Result<LossVars, ModelError> {
        let p = self.encode(tape, prep)?;
        let mut l1 = [None, None];
        for v in 0..2 {
            if let Some(t) = &prep.sparse[v] {
                let branch = self.encoder.branch(ViewId::ALL[v]);
                let logits = branch.sparse_logits(tape, p[v], &t.lanes)?;
                let mut labels = vec![false; t.lanes.len()];
                labels[t.label] = true;
                l1[v] = Some(sparse_goal_loss(
                    tape,
                    logits,
                    &vec![true; t.lanes.len()],
                    &labels,
                )?);
            }
        }
        let logits = self.goal_logits(tape, prep, p, mask)?;
        let l2 = if logits.len() == 1 {
            let l = goal_loss(tape, logits[0], None, prep.goal_target)?;
            [Some(l), Some(l)]
        } else {
            let bev = goal_loss(tape, logits[0], None, prep.goal_target)?;
            let support = Self::fpv_support(prep);
            let fpv = if support[prep.goal_target] {
                Some(goal_loss(tape, logits[1], Some(support), prep.goal_target)?)
            } else {
                None
            };
            [Some(bev), fpv]
        };
        let mut l3 = [None, None];
        for v in 0..2 {
            let (goal, visible) = prep.teacher_goal[v];
            let goals = Tensor::from_rows(&[goal])?;
            let pred = self.generators[v].complete(tape, p[v], prep.target, &goals, &[visible])?;
            if prep.future[v].iter().any(|g| g.is_some()) {
                l3[v] = Some(regression_loss(tape, pred, &prep.future[v])?);
            }
        }
        let mut terms = Vec::new();
        for (v, wv) in [w.w_bev, w.w_fpv].into_iter().enumerate() {
            for (term, wt) in [(l1[v], w.w1), (l2[v], w.w2), (l3[v], w.w3)] {
                if let Some(t) = term {
                    terms.push((t, wv * wt));
                }
            }
        }
        let total = if terms.is_empty() {
            let z = tape.input(Tensor::scalar(0.0));
            tape.weighted_sum(&[(z, 0.0)])?
        } else {
            tape.weighted_sum(&terms)?
        };
        Ok(LossVars { l1, l2, l3, total })
    }

    /// Heatmaps, `k` goals and `k` trajectories per view, with the
    /// visibility mask only.
    pub fn predict(&self, prep: &PreparedSample) -> Result<Prediction, ModelError> {
        let mut tape = Tape::new(&self.store);
        let p = self.encode(&mut tape, prep)?;
        let mask = MaskMatrix {
            bev: vec![true; prep.candidates.len()],
            fpv: prep.coords.fpv_visible.clone(),
        };
        let logits = self.goal_logits(&mut tape, prep, p, &mask)?;
        let ground = prep.candidates.ground();
        let (k, r) = (self.config.k, self.config.coverage_radius);
        let heatmaps: Vec<Heatmap> = if logits.len() == 1 {
            vec![heatmap_from_logits(tape.value(logits[0]), None)]
        } else {
            vec![
                heatmap_from_logits(tape.value(logits[0]), None),
                heatmap_from_logits(tape.value(logits[1]), Some(Self::fpv_support(prep))),
            ]
        };
        let sets: Vec<GoalSet> = heatmaps
            .iter()
            .map(|h| hill_climb_sample(&h.scores, &ground, k, r))
            .collect();
        let (bev_set, fpv_set) = (&sets[0], sets.last().expect("one or two heatmaps"));
        let goals = select_goals_per_view(bev_set, fpv_set, &prep.candidates, &prep.camera);

        let bev_goals: Vec<[f64; 2]> = bev_set
            .indices
            .iter()
            .map(|&i| {
                let f = prep.candidates.frame_points[i];
                [f.x, f.y]
            })
            .collect();
        let fpv_goals: Vec<[f64; 2]> = fpv_set
            .indices
            .iter()
            .map(|&i| [prep.coords.fpv.get(i, 0), prep.coords.fpv.get(i, 1)])
            .collect();
        let fpv_evaluable: Vec<bool> = fpv_set
            .indices
            .iter()
            .map(|&i| prep.coords.fpv_visible[i])
            .collect();

        let bev_rows = self.generators[0].complete(
            &mut tape,
            p[0],
            prep.target,
            &Tensor::from_rows(&bev_goals)?,
            &vec![true; bev_goals.len()],
        )?;
        let fpv_rows = self.generators[1].complete(
            &mut tape,
            p[1],
            prep.target,
            &Tensor::from_rows(&fpv_goals)?,
            &fpv_evaluable,
        )?;
        let frame = &prep.frame;
        let bev = rows_to_trajectories(tape.value(bev_rows))
            .into_iter()
            .map(|t| {
                t.into_iter()
                    .map(|q| {
                        let w = from_absolute_frame(Point3::new(q[0], q[1], 0.0), frame);
                        [w.x, w.y]
                    })
                    .collect()
            })
            .collect();
        let (w, h) = (prep.camera.image_width, prep.camera.image_height);
        let fpv = rows_to_trajectories(tape.value(fpv_rows))
            .into_iter()
            .map(|t| t.into_iter().map(|q| [q[0] * w, q[1] * h]).collect())
            .collect();
        Ok(Prediction {
            heatmaps,
            goals,
            trajectories: TrajectoryPrediction {
                bev,
                fpv,
                fpv_evaluable,
            },
        })
    }
}
