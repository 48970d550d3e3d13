use std::f64::consts::PI;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{
    Instance, InstanceKind, Sample, SceneError, LABEL_BRANCH, LABEL_INBOUND, LABEL_TARGET, LABEL_VEHICLE,
};
use crate::geometry::{AbsoluteFrame, CameraModel, Point2, Point3};

/// Synthetic intersection generator settings.
///
/// A scene is one inbound lane meeting `branches` outgoing lanes at an
/// intersection. Each outgoing lane turns by an angle drawn without
/// replacement from `branch_angles_deg` (0 is straight on, positive turns
/// left) along an arc of `turn_radius`, then continues straight.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub branches: usize,
    pub t_obs: usize,
    pub t_pred: usize,
    /// Seconds per step.
    pub dt: f64,
    /// Standard deviation of the per-step position noise, meters.
    pub noise_sigma: f64,
    pub lane_half_width: f64,
    pub max_neighbors: usize,
    pub branch_angles_deg: Vec<f64>,
    pub turn_radius: f64,
    pub inbound_length: f64,
    pub branch_length: f64,
    /// Arclength between consecutive lane vertices.
    pub lane_spacing: f64,
    pub min_speed: f64,
    pub max_speed: f64,
    /// Range of the distance between the last observed position and the
    /// intersection.
    pub min_gap: f64,
    pub max_gap: f64,
    /// Half-extent of the random world translation.
    pub world_extent: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            branches: 2,
            t_obs: 8,
            t_pred: 12,
            dt: 0.2,
            noise_sigma: 0.2,
            lane_half_width: 1.75,
            max_neighbors: 4,
            branch_angles_deg: vec![-90.0, -45.0, 0.0, 45.0, 90.0],
            turn_radius: 8.0,
            inbound_length: 14.0,
            branch_length: 16.0,
            lane_spacing: 4.0,
            min_speed: 4.0,
            max_speed: 6.0,
            min_gap: 1.0,
            max_gap: 3.0,
            world_extent: 100.0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<(), SceneError> {
        let bad = |m: String| Err(SceneError::InvalidConfig(m));
        if !(2..=4).contains(&self.branches) {
            return bad(format!("branch count {} outside 2..=4", self.branches));
        }
        if self.t_obs < 2 || self.t_pred < 1 {
            return bad(format!(
                "need t_obs >= 2 and t_pred >= 1, got {} and {}",
                self.t_obs, self.t_pred
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise sigma {} must be >= 0", self.noise_sigma));
        }
        if self.branch_angles_deg.len() < self.branches {
            return bad(format!(
                "{} branch angles for {} branches",
                self.branch_angles_deg.len(),
                self.branches
            ));
        }
        let positive = [
            self.dt,
            self.turn_radius,
            self.inbound_length,
            self.branch_length,
            self.lane_spacing,
            self.min_speed,
            self.lane_half_width,
        ];
        if positive.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return bad("lengths, speeds and dt must be positive".into());
        }
        if !(self.max_speed >= self.min_speed && self.max_gap >= self.min_gap && self.min_gap >= 0.0) {
            return bad("speed and gap ranges must be ordered".into());
        }
        if !(self.world_extent >= 0.0) {
            return bad("world extent must be >= 0".into());
        }
        Ok(())
    }

    fn route_start(&self) -> f64 {
        -self.inbound_length
    }
}

/// Point at signed arclength `s` of a branch turning by `angle`, in the
/// local intersection frame (inbound lane along +x ending at the origin).
fn route_point(s: f64, angle: f64, radius: f64) -> Point2 {
    if s <= 0.0 {
        return Point2::new(s, 0.0);
    }
    if angle.abs() < 1e-12 {
        return Point2::new(s, 0.0);
    }
    let sign = angle.signum();
    let arc = radius * angle.abs();
    let on_arc = |a: f64| {
        let phi = a / radius;
        Point2::new(radius * phi.sin(), sign * radius * (1.0 - phi.cos()))
    };
    if s <= arc {
        on_arc(s)
    } else {
        let end = on_arc(arc);
        let rest = s - arc;
        Point2::new(end.x + rest * angle.cos(), end.y + rest * angle.sin())
    }
}

fn lane_polyline(from: f64, to: f64, spacing: f64, angle: f64, radius: f64) -> Vec<Point2> {
    let n = ((to - from) / spacing).ceil().max(1.0) as usize;
    (0..=n)
        .map(|i| {
            let s = if i == n { to } else { from + i as f64 * spacing };
            route_point(s, angle, radius)
        })
        .collect()
}

/// Generates one intersection scene; the same seed and config always give
/// the same sample.
pub fn generate_synthetic_scene(seed: u64, cfg: &GenConfig) -> Result<Sample, SceneError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(generate_with(&mut rng, cfg))
}

/// `count` scenes, scene `i` drawn from its own stream of `seed`.
pub fn generate_dataset(count: usize, seed: u64, cfg: &GenConfig) -> Result<Vec<Sample>, SceneError> {
    cfg.validate()?;
    Ok((0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64 + 1);
            generate_with(&mut rng, cfg)
        })
        .collect())
}

fn generate_with(rng: &mut ChaCha8Rng, cfg: &GenConfig) -> Sample {
    let noise = Normal::new(0.0, cfg.noise_sigma).expect("validated sigma");
    let jitter = |rng: &mut ChaCha8Rng, p: Point2| {
        if cfg.noise_sigma == 0.0 {
            p
        } else {
            Point2::new(p.x + noise.sample(rng), p.y + noise.sample(rng))
        }
    };

    let mut angles: Vec<f64> = cfg
        .branch_angles_deg
        .choose_multiple(rng, cfg.branches)
        .map(|d| d.to_radians())
        .collect();
    angles.sort_by(f64::total_cmp);
    let chosen = rng.random_range(0..cfg.branches);

    let speed = rng.random_range(cfg.min_speed..=cfg.max_speed);
    let gap = rng.random_range(cfg.min_gap..=cfg.max_gap);
    let step = speed * cfg.dt;
    let observed: Vec<Point2> = (0..cfg.t_obs)
        .map(|k| {
            let s = -gap - (cfg.t_obs - 1 - k) as f64 * step;
            jitter(rng, route_point(s, angles[chosen], cfg.turn_radius))
        })
        .collect();
    let future: Vec<Point2> = (1..=cfg.t_pred)
        .map(|k| {
            let s = -gap + k as f64 * step;
            jitter(rng, route_point(s, angles[chosen], cfg.turn_radius))
        })
        .collect();

    let n_neighbors = rng.random_range(0..=cfg.max_neighbors);
    let mut neighbors = Vec::with_capacity(n_neighbors);
    for _ in 0..n_neighbors {
        let lane = rng.random_range(0..cfg.branches);
        let v = rng.random_range(cfg.min_speed..=cfg.max_speed);
        let span = v * cfg.dt * (cfg.t_obs - 1) as f64;
        let start = rng.random_range(0.0..=(cfg.branch_length - span).max(0.0));
        // lateral position inside the lane, constant along the track
        let lateral = rng.random_range(-0.5..=0.5) * cfg.lane_half_width;
        let track: Vec<Point2> = (0..cfg.t_obs)
            .map(|k| {
                let s = start + k as f64 * v * cfg.dt;
                let p = route_point(s, angles[lane], cfg.turn_radius);
                let q = route_point(s + 1e-3, angles[lane], cfg.turn_radius);
                let (tx, ty) = (q.x - p.x, q.y - p.y);
                let norm = tx.hypot(ty);
                let shifted = Point2::new(p.x - lateral * ty / norm, p.y + lateral * tx / norm);
                jitter(rng, shifted)
            })
            .collect();
        neighbors.push(track);
    }

    // random rigid placement of the local intersection frame in the world
    let rot = rng.random_range(-PI..PI);
    let shift = Point2::new(
        rng.random_range(-cfg.world_extent..=cfg.world_extent),
        rng.random_range(-cfg.world_extent..=cfg.world_extent),
    );
    let (sr, cr) = rot.sin_cos();
    let place = |p: Point2| Point3::new(cr * p.x - sr * p.y + shift.x, sr * p.x + cr * p.y + shift.y, 0.0);

    let mut instances = Vec::new();
    let mut next_id = 0usize;
    let mut push = |kind, label: &str, pts: Vec<Point3>| {
        instances.push(Instance {
            id: next_id,
            kind,
            label: label.to_string(),
            polyline: pts,
        });
        next_id += 1;
    };
    push(
        InstanceKind::Agent,
        LABEL_TARGET,
        observed.iter().map(|p| place(*p)).collect(),
    );
    for track in &neighbors {
        push(
            InstanceKind::Agent,
            LABEL_VEHICLE,
            track.iter().map(|p| place(*p)).collect(),
        );
    }
    let inbound = lane_polyline(cfg.route_start(), 0.0, cfg.lane_spacing, 0.0, cfg.turn_radius);
    push(
        InstanceKind::Lane,
        LABEL_INBOUND,
        inbound.iter().map(|p| place(*p)).collect(),
    );
    for &a in &angles {
        let pts = lane_polyline(0.0, cfg.branch_length, cfg.lane_spacing, a, cfg.turn_radius);
        push(
            InstanceKind::Lane,
            LABEL_BRANCH,
            pts.iter().map(|p| place(*p)).collect(),
        );
    }

    let first = place(observed[0]);
    let last = place(observed[cfg.t_obs - 1]);
    let heading = (last.y - first.y).atan2(last.x - first.x);
    let frame = AbsoluteFrame::new(first, heading).expect("finite frame");
    let camera = CameraModel::default_for_frame(&frame);
    let future = future
        .iter()
        .map(|p| {
            let q = place(*p);
            Point2::new(q.x, q.y)
        })
        .collect();
    Sample {
        instances,
        target_id: 0,
        future,
        camera,
        frame,
    }
}
