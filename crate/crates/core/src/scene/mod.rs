//! Scenes: agents and lanes as polylines, the synthetic intersection
//! generator, per-view vectorization, filtering and JSON Lines storage.

mod generate;
mod io;
mod vectorize;

pub use generate::{generate_dataset, generate_synthetic_scene, GenConfig};
pub use io::{load_dataset, read_dataset, save_dataset, write_dataset};
pub use vectorize::{vectorize, vectorize_bev, vectorize_fpv, VectorizedView, FEATURE_WIDTH};

use thiserror::Error;

use crate::geometry::{project_to_fpv, AbsoluteFrame, CameraModel, GeometryError, Point2, Point3};

pub const LABEL_TARGET: &str = "target";
pub const LABEL_VEHICLE: &str = "vehicle";
pub const LABEL_INBOUND: &str = "inbound";
pub const LABEL_BRANCH: &str = "branch";

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("invalid generator config: {0}")]
    InvalidConfig(String),
    #[error("invalid sample: {0}")]
    InvalidSample(String),
    #[error("fraction {0} outside [0, 1]")]
    InvalidFraction(f64),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}, field `{field}`: {message}")]
    Parse {
        line: usize,
        field: String,
        message: String,
    },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InstanceKind {
    Agent,
    Lane,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub id: usize,
    pub kind: InstanceKind,
    pub label: String,
    /// World frame. Agents carry one point per observed step.
    pub polyline: Vec<Point3>,
}

/// One prediction problem: the observed scene plus the target's future.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub instances: Vec<Instance>,
    pub target_id: usize,
    /// Ground-truth future of the target, world ground plane, meters.
    pub future: Vec<Point2>,
    pub camera: CameraModel,
    pub frame: AbsoluteFrame,
}

impl Sample {
    pub fn instance(&self, id: usize) -> Option<&Instance> {
        self.instances.iter().find(|i| i.id == id)
    }

    pub fn target_index(&self) -> usize {
        self.instances
            .iter()
            .position(|i| i.id == self.target_id)
            .expect("validated sample has its target")
    }

    pub fn target(&self) -> &Instance {
        &self.instances[self.target_index()]
    }

    pub fn t_obs(&self) -> usize {
        self.target().polyline.len()
    }

    pub fn t_pred(&self) -> usize {
        self.future.len()
    }

    pub fn last_observed(&self) -> Point3 {
        *self.target().polyline.last().expect("nonempty polyline")
    }

    pub fn lanes(&self) -> impl Iterator<Item = (usize, &Instance)> {
        self.instances
            .iter()
            .enumerate()
            .filter(|(_, i)| i.kind == InstanceKind::Lane)
    }

    /// The future lifted to `z = 0` and projected into the camera.
    pub fn future_fpv(&self) -> Vec<Option<Point2>> {
        self.future
            .iter()
            .map(|p| project_to_fpv(Point3::new(p.x, p.y, 0.0), &self.camera))
            .collect()
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        let bad = |m: String| Err(SceneError::InvalidSample(m));
        let target = match self.instance(self.target_id) {
            Some(t) if t.kind == InstanceKind::Agent => t,
            Some(_) => return bad(format!("target {} is not an agent", self.target_id)),
            None => return bad(format!("target {} not among instances", self.target_id)),
        };
        let t_obs = target.polyline.len();
        let mut ids = std::collections::HashSet::new();
        for inst in &self.instances {
            if !ids.insert(inst.id) {
                return bad(format!("duplicate instance id {}", inst.id));
            }
            if inst.polyline.len() < 2 {
                return bad(format!("instance {} has fewer than 2 points", inst.id));
            }
            if inst.kind == InstanceKind::Agent && inst.polyline.len() != t_obs {
                return bad(format!(
                    "agent {} has {} points, target has {t_obs}",
                    inst.id,
                    inst.polyline.len()
                ));
            }
            if inst.polyline.iter().any(|p| !p.is_finite()) {
                return bad(format!("instance {} has non-finite points", inst.id));
            }
        }
        if self.future.is_empty() {
            return bad("empty future".into());
        }
        if self.future.iter().any(|p| !p.x.is_finite() || !p.y.is_finite()) {
            return bad("non-finite future".into());
        }
        self.camera.validate()?;
        Ok(())
    }
}

/// Keeps samples whose projected future has at least `fraction` visible
/// steps, preserving order.
pub fn filter_unqualified(samples: Vec<Sample>, fraction: f64) -> Result<Vec<Sample>, SceneError> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(SceneError::InvalidFraction(fraction));
    }
    Ok(samples
        .into_iter()
        .filter(|s| visible_future_fraction(s) >= fraction)
        .collect())
}

pub fn visible_future_fraction(s: &Sample) -> f64 {
    let fpv = s.future_fpv();
    if fpv.is_empty() {
        return 0.0;
    }
    fpv.iter().filter(|p| p.is_some()).count() as f64 / fpv.len() as f64
}

/// Point at arclength `s` along a ground-plane polyline, clamped to its ends.
pub fn point_at_arclength(polyline: &[Point3], s: f64) -> Point2 {
    let mut remaining = s.max(0.0);
    for w in polyline.windows(2) {
        let (a, b) = (w[0].ground(), w[1].ground());
        let len = a.distance(b);
        if remaining <= len && len > 0.0 {
            let t = remaining / len;
            return Point2::new(a.x + t * (b.x - a.x), a.y + t * (b.y - a.y));
        }
        remaining -= len;
    }
    polyline.last().map(|p| p.ground()).unwrap_or_default()
}

/// `(distance, arclength)` of the closest point of a ground-plane polyline.
pub fn closest_arclength(polyline: &[Point3], p: Point2) -> (f64, f64) {
    let mut best = (f64::INFINITY, 0.0);
    let mut walked = 0.0;
    for w in polyline.windows(2) {
        let (a, b) = (w[0].ground(), w[1].ground());
        let (dx, dy) = (b.x - a.x, b.y - a.y);
        let len2 = dx * dx + dy * dy;
        let t = if len2 > 0.0 {
            (((p.x - a.x) * dx + (p.y - a.y) * dy) / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let q = Point2::new(a.x + t * dx, a.y + t * dy);
        let d = q.distance(p);
        if d < best.0 {
            best = (d, walked + t * len2.sqrt());
        }
        walked += len2.sqrt();
    }
    best
}
