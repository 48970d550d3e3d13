//! Goal-conditioned trajectory completion, one generator per view with
//! identical structure and independent parameters.

use serde::{Deserialize, Serialize};

use crate::geometry::ViewId;
use crate::nn::{BlockSpec, Mlp, NnError, ParameterStore, Tape, Tensor, Var};

/// `Ŷ = MLP([p_i; MLP(goal)])`, decoded to `2 * t_pred` values laid out
/// `x0, y0, x1, y1, ...`.
#[derive(Clone, Debug)]
pub struct TrajectoryGenerator {
    pub view: ViewId,
    pub t_pred: usize,
    goal_embed: Mlp,
    decoder: Mlp,
}

impl TrajectoryGenerator {
    pub fn new(
        store: &mut ParameterStore,
        view: ViewId,
        t_pred: usize,
        spec: &BlockSpec,
    ) -> Result<Self, NnError> {
        if t_pred == 0 {
            return Err(NnError::InvalidSpec("t_pred must be positive".into()));
        }
        let e = spec.embedding_size;
        let name = format!("trajectory.{}", view.as_str());
        Ok(Self {
            view,
            t_pred,
            goal_embed: Mlp::new(store, &format!("{name}.goal_embed"), 2, e, spec)?,
            decoder: Mlp::new(store, &format!("{name}.decoder"), 2 * e, 2 * t_pred, spec)?,
        })
    }

    /// One trajectory per row of `goals` (`k x 2`, view coordinates) for
    /// the instance `target` of the state features `p`. Goals with
    /// `goal_visible == false` get a zero embedding.
    pub fn complete(
        &self,
        tape: &mut Tape<'_>,
        p: Var,
        target: usize,
        goals: &Tensor,
        goal_visible: &[bool],
    ) -> Result<Var, NnError> {
        let k = goals.rows();
        if goal_visible.len() != k {
            return Err(NnError::Shape {
                context: "complete",
                expected: format!("{k} visibility flags"),
                actual: goal_visible.len().to_string(),
            });
        }
        let g = tape.input(goals.clone());
        let mut emb = self.goal_embed.forward(tape, g)?;
        if goal_visible.iter().any(|v| !v) {
            emb = tape.mask_rows(emb, goal_visible)?;
        }
        let state = tape.gather_rows(p, &vec![target; k])?;
        let joint = tape.concat_cols(state, emb)?;
        self.decoder.forward(tape, joint)
    }
}

/// Sum over evaluable steps of the per-step Euclidean distance, for one
/// `1 x 2T` prediction row. Contributes zero with a warning when no step is
/// evaluable.
pub fn regression_loss(tape: &mut Tape<'_>, pred: Var, gt: &[Option<[f64; 2]>]) -> Result<Var, NnError> {
    if gt.iter().all(|g| g.is_none()) {
        log::warn!("regression loss has no evaluable steps");
    }
    tape.step_distance_sum(pred, gt)
}

/// [`regression_loss`] on plain values.
pub fn regression_loss_value(pred: &[[f64; 2]], gt: &[Option<[f64; 2]>]) -> f64 {
    pred.iter()
        .zip(gt)
        .filter_map(|(p, g)| g.map(|g| (p[0] - g[0]).hypot(p[1] - g[1])))
        .sum()
}

/// Splits `k x 2T` rows into `k` trajectories of `T` points.
pub fn rows_to_trajectories(t: &Tensor) -> Vec<Vec<[f64; 2]>> {
    (0..t.rows())
        .map(|i| t.row(i).chunks_exact(2).map(|c| [c[0], c[1]]).collect())
        .collect()
}

/// Predicted trajectories of one sample: meters in the world ground plane
/// for BEV, pixels for FPV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPrediction {
    pub bev: Vec<Vec<[f64; 2]>>,
    pub fpv: Vec<Vec<[f64; 2]>>,
    /// False for FPV trajectories decoded from an invisible goal.
    pub fpv_evaluable: Vec<bool>,
}
