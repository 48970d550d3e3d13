use std::ops::Range;

use super::{InstanceKind, Sample};
use crate::geometry::{project_to_fpv, to_absolute_frame, Point2, Point3, ViewId};
use crate::nn::Tensor;

/// Width of one vector feature:
/// `[sx, sy, ex, ey, is_target, is_other_agent, is_lane, time_index, valid, pad]`.
pub const FEATURE_WIDTH: usize = 10;

const TARGET: usize = 4;
const TIME: usize = 7;
const VALID: usize = 8;

/// One view of a sample as padded per-instance vector arrays.
///
/// Surviving vectors of an instance are stored first, padding rows are all
/// zero. Instance order and ids match the sample in both views.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorizedView {
    pub view: ViewId,
    pub instance_ids: Vec<usize>,
    pub kinds: Vec<InstanceKind>,
    pub labels: Vec<String>,
    pub max_vectors: usize,
    /// `instances x max_vectors x FEATURE_WIDTH`, row-major.
    pub features: Vec<f64>,
    pub vector_counts: Vec<usize>,
    pub instance_visible: Vec<bool>,
}

impl VectorizedView {
    pub fn num_instances(&self) -> usize {
        self.instance_ids.len()
    }

    pub fn vector(&self, instance: usize, j: usize) -> &[f64] {
        let base = (instance * self.max_vectors + j) * FEATURE_WIDTH;
        &self.features[base..base + FEATURE_WIDTH]
    }

    pub fn is_valid(&self, instance: usize, j: usize) -> bool {
        self.vector(instance, j)[VALID] == 1.0
    }

    /// Valid vectors stacked as rows, with each instance's row range.
    pub fn packed(&self) -> (Tensor, Vec<Range<usize>>) {
        let total: usize = self.vector_counts.iter().sum();
        let mut data = Vec::with_capacity(total * FEATURE_WIDTH);
        let mut segments = Vec::with_capacity(self.num_instances());
        for (i, &n) in self.vector_counts.iter().enumerate() {
            let start = data.len() / FEATURE_WIDTH;
            for j in 0..n {
                data.extend_from_slice(self.vector(i, j));
            }
            segments.push(start..start + n);
        }
        let t = Tensor::from_vec(total, FEATURE_WIDTH, data).expect("packed rows are whole");
        (t, segments)
    }
}

fn feature(start: Point2, end: Point2, kind: usize, time: f64) -> [f64; FEATURE_WIDTH] {
    let mut f = [0.0; FEATURE_WIDTH];
    f[0] = start.x;
    f[1] = start.y;
    f[2] = end.x;
    f[3] = end.y;
    f[TARGET + kind] = 1.0;
    f[TIME] = time;
    f[VALID] = 1.0;
    f
}

fn type_slot(s: &Sample, idx: usize) -> usize {
    let inst = &s.instances[idx];
    match inst.kind {
        InstanceKind::Agent if inst.id == s.target_id => 0,
        InstanceKind::Agent => 1,
        InstanceKind::Lane => 2,
    }
}

fn build<F>(s: &Sample, view: ViewId, mut coords: F) -> VectorizedView
where
    F: FnMut(&crate::scene::Instance, Point3) -> Option<Point2>,
{
    let max_vectors = s
        .instances
        .iter()
        .map(|i| i.polyline.len().saturating_sub(1))
        .max()
        .unwrap_or(0);
    let n = s.instances.len();
    let mut features = vec![0.0; n * max_vectors * FEATURE_WIDTH];
    let mut vector_counts = Vec::with_capacity(n);
    for (idx, inst) in s.instances.iter().enumerate() {
        let kind = type_slot(s, idx);
        let steps = inst.polyline.len() as f64;
        let pts: Vec<Option<Point2>> = inst.polyline.iter().map(|p| coords(inst, *p)).collect();
        let mut count = 0;
        for (j, w) in pts.windows(2).enumerate() {
            if let (Some(a), Some(b)) = (w[0], w[1]) {
                let time = match inst.kind {
                    InstanceKind::Agent => (j + 1) as f64 / steps,
                    InstanceKind::Lane => 0.0,
                };
                let base = (idx * max_vectors + count) * FEATURE_WIDTH;
                features[base..base + FEATURE_WIDTH].copy_from_slice(&feature(a, b, kind, time));
                count += 1;
            }
        }
        vector_counts.push(count);
    }
    VectorizedView {
        view,
        instance_ids: s.instances.iter().map(|i| i.id).collect(),
        kinds: s.instances.iter().map(|i| i.kind).collect(),
        labels: s.instances.iter().map(|i| i.label.clone()).collect(),
        max_vectors,
        features,
        instance_visible: vector_counts.iter().map(|c| *c > 0).collect(),
        vector_counts,
    }
}

/// Consecutive polyline points as vectors in the sample's absolute frame,
/// meters. Every instance is visible.
pub fn vectorize_bev(s: &Sample) -> VectorizedView {
    build(s, ViewId::Bev, |_, p| {
        let q = to_absolute_frame(p, &s.frame);
        Some(Point2::new(q.x, q.y))
    })
}

/// Vertices projected into the camera, agents lifted to the ground plane.
/// Vectors with an invisible endpoint are dropped; pixel coordinates are
/// divided by the image size.
pub fn vectorize_fpv(s: &Sample) -> VectorizedView {
    let cam = &s.camera;
    build(s, ViewId::Fpv, |inst, p| {
        let lifted = match inst.kind {
            InstanceKind::Agent => Point3::new(p.x, p.y, 0.0),
            InstanceKind::Lane => p,
        };
        project_to_fpv(lifted, cam).map(|px| Point2::new(px.x / cam.image_width, px.y / cam.image_height))
    })
}

pub fn vectorize(s: &Sample, view: ViewId) -> VectorizedView {
    match view {
        ViewId::Bev => vectorize_bev(s),
        ViewId::Fpv => vectorize_fpv(s),
    }
}
