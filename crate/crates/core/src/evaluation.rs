//! minADE/minFDE, cross-view consistency and branch coverage, aggregated
//! into an [`EvalReport`].

use serde::{Deserialize, Serialize};

use crate::geometry::{Point2, Point3};
use crate::model::{prepare, Model, ModelError, Prediction};
use crate::nn::Checkpoint;
use crate::scene::{closest_arclength, point_at_arclength, Sample, LABEL_BRANCH};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("cannot evaluate an empty dataset")]
    EmptyDataset,
    #[error("prediction has no trajectories")]
    NoTrajectories,
    #[error("prediction has {pred} steps, ground truth has {gt}")]
    StepMismatch { pred: usize, gt: usize },
    #[error("sample {index}: {source}")]
    Sample {
        index: usize,
        #[source]
        source: ModelError,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn check_steps(preds: &[Vec<[f64; 2]>], gt: &[Option<[f64; 2]>]) -> Result<(), EvalError> {
    match preds.iter().find(|p| p.len() != gt.len()) {
        Some(p) => Err(EvalError::StepMismatch {
            pred: p.len(),
            gt: gt.len(),
        }),
        None => Ok(()),
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Minimum over candidates of the mean distance on the evaluable steps.
/// `None` when there is no candidate or no evaluable step.
pub fn min_ade(preds: &[Vec<[f64; 2]>], gt: &[Option<[f64; 2]>]) -> Result<Option<f64>, EvalError> {
    check_steps(preds, gt)?;
    let steps: Vec<(usize, [f64; 2])> = gt
        .iter()
        .enumerate()
        .filter_map(|(t, g)| g.map(|g| (t, g)))
        .collect();
    if steps.is_empty() {
        return Ok(None);
    }
    Ok(preds
        .iter()
        .map(|p| steps.iter().map(|&(t, g)| dist(p[t], g)).sum::<f64>() / steps.len() as f64)
        .min_by(f64::total_cmp))
}

/// Minimum over candidates of the distance at the last evaluable step.
/// With every step evaluable this is the final step.
pub fn min_fde(preds: &[Vec<[f64; 2]>], gt: &[Option<[f64; 2]>]) -> Result<Option<f64>, EvalError> {
    check_steps(preds, gt)?;
    let Some((t, g)) = gt.iter().enumerate().rev().find_map(|(t, g)| g.map(|g| (t, g))) else {
        return Ok(None);
    };
    Ok(preds.iter().map(|p| dist(p[t], g)).min_by(f64::total_cmp))
}

/// Order-sensitive equality of the goal index lists of the two views.
pub fn consistency_check(goal_indices_bev: &[usize], goal_indices_fpv: &[usize]) -> bool {
    goal_indices_bev == goal_indices_fpv
}

/// Whether `goals` cover every outgoing branch of the scene within
/// `radius`. `None` for scenes with fewer than two branch lanes.
///
/// The mode point of a branch is the point at the arclength the true
/// endpoint reached along the branch it actually took; an endpoint still
/// short of the intersection is its own mode point on every branch.
pub fn covers_branches(s: &Sample, goals: &[Point2], radius: f64) -> Option<bool> {
    let branches: Vec<&[Point3]> = s
        .lanes()
        .filter(|(_, l)| l.label == LABEL_BRANCH)
        .map(|(_, l)| l.polyline.as_slice())
        .collect();
    if branches.len() < 2 {
        return None;
    }
    let end = *s.future.last()?;
    let (_, reached) = branches
        .iter()
        .map(|b| closest_arclength(b, end))
        .min_by(|a, b| a.0.total_cmp(&b.0))?;
    let covered = branches.iter().all(|b| {
        let mode = if reached > 0.0 {
            point_at_arclength(b, reached)
        } else {
            end
        };
        goals.iter().any(|g| g.distance(mode) <= radius)
    });
    Some(covered)
}

/// Metrics of one sample; FPV entries are `None` when no FPV candidate or
/// step is evaluable.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub bev_ade: f64,
    pub bev_fde: f64,
    pub fpv_ade: Option<f64>,
    pub fpv_fde: Option<f64>,
    pub consistent: bool,
    pub covered: Option<bool>,
}

/// Scores a prediction against its sample: BEV in world meters, FPV in
/// pixels over visible steps and goals.
pub fn sample_metrics(
    s: &Sample,
    pred: &Prediction,
    coverage_radius: f64,
) -> Result<SampleMetrics, EvalError> {
    let bev_gt: Vec<Option<[f64; 2]>> = s.future.iter().map(|p| Some([p.x, p.y])).collect();
    let bev = &pred.trajectories.bev;
    let nonempty = |v: Option<f64>| v.ok_or(EvalError::NoTrajectories);
    let bev_ade = nonempty(min_ade(bev, &bev_gt)?)?;
    let bev_fde = nonempty(min_fde(bev, &bev_gt)?)?;

    let fpv_gt: Vec<Option<[f64; 2]>> = s.future_fpv().iter().map(|p| p.map(|p| [p.x, p.y])).collect();
    let fpv: Vec<Vec<[f64; 2]>> = pred
        .trajectories
        .fpv
        .iter()
        .zip(&pred.trajectories.fpv_evaluable)
        .filter(|(_, ok)| **ok)
        .map(|(t, _)| t.clone())
        .collect();
    let fpv_ade = min_ade(&fpv, &fpv_gt)?;
    let fpv_fde = min_fde(&fpv, &fpv_gt)?;

    Ok(SampleMetrics {
        bev_ade,
        bev_fde,
        fpv_ade,
        fpv_fde,
        consistent: consistency_check(&pred.goals.indices_bev, &pred.goals.indices_fpv),
        covered: covers_branches(s, &pred.goals.bev, coverage_radius),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BevMetrics {
    pub minade: f64,
    pub minfde: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FpvMetrics {
    /// `None` when every sample was skipped.
    pub minade: Option<f64>,
    pub minfde: Option<f64>,
    /// Samples with no evaluable FPV step or goal.
    pub skipped: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub bev: BevMetrics,
    pub fpv: FpvMetrics,
    pub consistency_rate: f64,
    /// Over scenes with at least two branches; `None` if there are none.
    pub mode_coverage: Option<f64>,
    pub n: usize,
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| sum / n as f64)
}

impl EvalReport {
    /// Sequential reduction, so the result is independent of how the
    /// per-sample metrics were computed.
    pub fn aggregate(metrics: &[SampleMetrics]) -> Result<Self, EvalError> {
        if metrics.is_empty() {
            return Err(EvalError::EmptyDataset);
        }
        let n = metrics.len();
        // an ADE exists exactly when an FDE does
        let fpv_ok: Vec<&SampleMetrics> = metrics.iter().filter(|m| m.fpv_ade.is_some()).collect();
        let covered: Vec<bool> = metrics.iter().filter_map(|m| m.covered).collect();
        Ok(Self {
            bev: BevMetrics {
                minade: mean(metrics.iter().map(|m| m.bev_ade)).expect("nonempty"),
                minfde: mean(metrics.iter().map(|m| m.bev_fde)).expect("nonempty"),
            },
            fpv: FpvMetrics {
                minade: mean(fpv_ok.iter().filter_map(|m| m.fpv_ade)),
                minfde: mean(fpv_ok.iter().filter_map(|m| m.fpv_fde)),
                skipped: n - fpv_ok.len(),
            },
            consistency_rate: metrics.iter().filter(|m| m.consistent).count() as f64 / n as f64,
            mode_coverage: mean(covered.iter().map(|&c| if c { 1.0 } else { 0.0 })),
            n,
        })
    }
}

/// Runs inference (visibility mask only, no random mask) on every sample.
pub fn evaluate(model: &Model, samples: &[Sample]) -> Result<EvalReport, EvalError> {
    if samples.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    let metrics = samples
        .iter()
        .enumerate()
        .map(|(index, s)| {
            let pred = prepare(s, &model.config)
                .and_then(|prep| model.predict(&prep))
                .map_err(|source| EvalError::Sample { index, source })?;
            sample_metrics(s, &pred, model.config.coverage_radius)
        })
        .collect::<Result<Vec<_>, _>>()?;
    EvalReport::aggregate(&metrics)
}

/// [`evaluate`] on the model stored in `ckpt`.
pub fn evaluate_checkpoint(ckpt: &Checkpoint, samples: &[Sample]) -> Result<EvalReport, EvalError> {
    let model = Model::from_checkpoint(ckpt)?;
    evaluate(&model, samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_synthetic_scene, GenConfig};
    use proptest::prelude::*;

    fn line(offset: f64, n: usize) -> Vec<[f64; 2]> {
        (0..n).map(|t| [t as f64 + offset, 0.0]).collect()
    }

    fn gt(n: usize) -> Vec<Option<[f64; 2]>> {
        line(0.0, n).into_iter().map(Some).collect()
    }

    #[test]
    fn exact_candidate_gives_zero() {
        let g = gt(12);
        let preds = vec![line(0.0, 12), line(2.0, 12)];
        assert_eq!(min_ade(&preds, &g).unwrap(), Some(0.0));
        assert_eq!(min_fde(&preds, &g).unwrap(), Some(0.0));
    }

    #[test]
    fn constant_offsets_one_and_three() {
        let preds = vec![line(3.0, 12), line(1.0, 12)];
        assert!((min_ade(&preds, &gt(12)).unwrap().unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn endpoint_distances_pick_the_minimum() {
        let g = gt(4);
        let mut preds = vec![line(0.0, 4); 3];
        for (p, d) in preds.iter_mut().zip([2.0, 0.5, 5.0]) {
            p[3][1] = d;
        }
        assert_eq!(min_fde(&preds, &g).unwrap(), Some(0.5));
    }

    #[test]
    fn invisible_steps_are_excluded() {
        let mut g = gt(4);
        g[3] = None;
        g[1] = None;
        let mut p = line(0.0, 4);
        p[1] = [100.0, 100.0];
        p[3] = [-50.0, 0.0];
        p[2][1] = 4.0;
        assert_eq!(min_ade(&[p.clone()], &g).unwrap(), Some(2.0));
        // the last evaluable step stands in for the final one
        assert_eq!(min_fde(&[p], &g).unwrap(), Some(4.0));
        assert_eq!(min_ade(&[line(0.0, 4)], &[None; 4]).unwrap(), None);
        assert_eq!(min_fde(&[line(0.0, 4)], &[None; 4]).unwrap(), None);
    }

    #[test]
    fn step_mismatch_is_an_error() {
        assert!(matches!(
            min_ade(&[line(0.0, 3)], &gt(4)),
            Err(EvalError::StepMismatch { pred: 3, gt: 4 })
        ));
    }

    #[test]
    fn consistency_is_order_sensitive() {
        assert!(consistency_check(&[1, 4, 2], &[1, 4, 2]));
        assert!(!consistency_check(&[1, 4, 2], &[4, 1, 2]));
        assert!(!consistency_check(&[1, 4], &[1, 4, 2]));
    }

    fn mode_points(s: &Sample) -> Vec<Point2> {
        let end = *s.future.last().unwrap();
        let branches: Vec<_> = s
            .lanes()
            .filter(|(_, l)| l.label == LABEL_BRANCH)
            .map(|(_, l)| l)
            .collect();
        let (_, reached) = branches
            .iter()
            .map(|b| closest_arclength(&b.polyline, end))
            .min_by(|a, b| a.0.total_cmp(&b.0))
            .unwrap();
        assert!(reached > 0.0, "default scenes end past the intersection");
        branches
            .iter()
            .map(|b| point_at_arclength(&b.polyline, reached))
            .collect()
    }

    #[test]
    fn branch_mode_points_are_covered_by_exact_goals() {
        let mut separated = 0;
        for seed in 0..20 {
            let s = generate_synthetic_scene(seed, &GenConfig::default()).unwrap();
            let modes = mode_points(&s);
            assert_eq!(covers_branches(&s, &modes, 2.0), Some(true));
            assert_eq!(covers_branches(&s, &[], 2.0), Some(false));
            if modes[0].distance(modes[1]) > 4.0 {
                separated += 1;
                // one goal cannot sit within 2 m of two points more than 4 m apart
                for m in &modes {
                    assert_eq!(covers_branches(&s, &[*m], 2.0), Some(false));
                }
            }
        }
        assert!(separated > 10, "{separated}");
    }

    #[test]
    fn report_rejects_empty_input() {
        assert!(matches!(EvalReport::aggregate(&[]), Err(EvalError::EmptyDataset)));
    }

    #[test]
    fn aggregate_counts_skips_and_rates() {
        let m = |fpv: Option<f64>, consistent, covered| SampleMetrics {
            bev_ade: 1.0,
            bev_fde: 2.0,
            fpv_ade: fpv,
            fpv_fde: fpv.map(|x| 2.0 * x),
            consistent,
            covered,
        };
        let r = EvalReport::aggregate(&[
            m(Some(10.0), true, Some(true)),
            m(None, false, None),
            m(Some(20.0), true, Some(false)),
            m(Some(30.0), true, Some(true)),
        ])
        .unwrap();
        assert_eq!(r.n, 4);
        assert_eq!(r.fpv.skipped, 1);
        assert_eq!(r.fpv.minade, Some(20.0));
        assert_eq!(r.fpv.minfde, Some(40.0));
        assert_eq!(r.consistency_rate, 0.75);
        assert!((r.mode_coverage.unwrap() - 2.0 / 3.0).abs() < 1e-15);
        let json = serde_json::to_value(&r).unwrap();
        for key in ["bev", "fpv", "consistency_rate", "mode_coverage", "n"] {
            assert!(json.get(key).is_some(), "{key}");
        }
        assert!(json["fpv"].get("skipped").is_some());
    }

    fn traj() -> impl Strategy<Value = Vec<[f64; 2]>> {
        prop::collection::vec((-30.0f64..30.0, -30.0f64..30.0).prop_map(|(x, y)| [x, y]), 6)
    }

    proptest! {
        #[test]
        fn fde_is_ade_on_the_final_step(preds in prop::collection::vec(traj(), 1..7), g in traj()) {
            let gt: Vec<Option<[f64; 2]>> = g.iter().copied().map(Some).collect();
            let last: Vec<Vec<[f64; 2]>> = preds.iter().map(|p| vec![p[5]]).collect();
            prop_assert_eq!(min_fde(&preds, &gt).unwrap(), min_ade(&last, &[gt[5]]).unwrap());
        }

        #[test]
        fn metrics_ignore_candidate_order_and_never_grow(
            preds in prop::collection::vec(traj(), 2..7),
            extra in traj(),
            g in traj(),
        ) {
            let gt: Vec<Option<[f64; 2]>> = g.iter().copied().map(Some).collect();
            let mut rev = preds.clone();
            rev.reverse();
            prop_assert_eq!(min_ade(&preds, &gt).unwrap(), min_ade(&rev, &gt).unwrap());
            prop_assert_eq!(min_fde(&preds, &gt).unwrap(), min_fde(&rev, &gt).unwrap());
            let mut more = preds.clone();
            more.push(extra);
            prop_assert!(min_ade(&more, &gt).unwrap() <= min_ade(&preds, &gt).unwrap());
            let max_end = preds.iter().map(|p| dist(p[5], g[5])).fold(0.0, f64::max);
            prop_assert!(min_fde(&preds, &gt).unwrap().unwrap() <= max_end);
        }
    }
}
