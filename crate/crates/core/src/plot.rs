//! Per-sample prediction dumps and their BEV/FPV renderings.
//!
//! Heatmaps are drawn as pink dots whose colour darkens with probability,
//! the observed track in blue, the ground-truth future in green, predicted
//! trajectories in orange and the sampled goals as red stars.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::geometry::{project_to_fpv, Point3};
use crate::goal_predictor::Heatmap;
use crate::model::Prediction;
use crate::scene::Sample;

#[derive(Debug, thiserror::Error)]
pub enum PlotError {
    #[error("{path}: {source}")]
    Image {
        path: String,
        #[source]
        source: image::ImageError,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Everything drawn in one panel, in that panel's units.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Panel {
    /// `(position, probability)` of every drawable candidate.
    pub heatmap: Vec<([f64; 2], f64)>,
    /// Lane polylines split into drawable runs.
    pub lanes: Vec<Vec<[f64; 2]>>,
    pub observed: Vec<[f64; 2]>,
    pub truth: Vec<[f64; 2]>,
    pub predicted: Vec<Vec<[f64; 2]>>,
    pub goals: Vec<[f64; 2]>,
}

/// One line of a prediction dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionDump {
    pub index: usize,
    pub goal_indices_bev: Vec<usize>,
    pub goal_indices_fpv: Vec<usize>,
    /// World meters.
    pub bev: Panel,
    /// Pixels; invisible points are left out.
    pub fpv: Panel,
    pub image_size: [f64; 2],
}

fn runs<I: Iterator<Item = Option<[f64; 2]>>>(points: I) -> Vec<Vec<[f64; 2]>> {
    let mut out = vec![Vec::new()];
    for p in points {
        match p {
            Some(p) => out.last_mut().expect("nonempty").push(p),
            None if out.last().is_some_and(|r| !r.is_empty()) => out.push(Vec::new()),
            None => {}
        }
    }
    out.retain(|r| !r.is_empty());
    out
}

impl PredictionDump {
    pub fn new(index: usize, s: &Sample, candidates: &[Point3], pred: &Prediction) -> Self {
        let cam = &s.camera;
        let px = |p: Point3| project_to_fpv(p, cam).map(|q| [q.x, q.y]);
        let xy = |p: &Point3| [p.x, p.y];
        let shared = &pred.heatmaps[0];
        let fpv_map: &Heatmap = pred.heatmaps.last().expect("at least one heatmap");

        let bev = Panel {
            heatmap: candidates
                .iter()
                .map(xy)
                .zip(shared.scores.iter().copied())
                .collect(),
            lanes: s
                .lanes()
                .map(|(_, l)| l.polyline.iter().map(xy).collect())
                .collect(),
            observed: s.target().polyline.iter().map(xy).collect(),
            truth: s.future.iter().map(|p| [p.x, p.y]).collect(),
            predicted: pred.trajectories.bev.clone(),
            goals: pred.goals.bev.iter().map(|g| [g.x, g.y]).collect(),
        };
        let fpv = Panel {
            heatmap: candidates
                .iter()
                .zip(&fpv_map.scores)
                .filter_map(|(c, w)| px(*c).map(|q| (q, *w)))
                .collect(),
            lanes: s
                .lanes()
                .flat_map(|(_, l)| runs(l.polyline.iter().map(|p| px(*p))))
                .collect(),
            observed: s.target().polyline.iter().filter_map(|p| px(*p)).collect(),
            truth: s.future_fpv().iter().flatten().map(|q| [q.x, q.y]).collect(),
            predicted: pred
                .trajectories
                .fpv
                .iter()
                .zip(&pred.trajectories.fpv_evaluable)
                .filter(|(_, ok)| **ok)
                .map(|(t, _)| t.clone())
                .collect(),
            goals: pred.goals.fpv.iter().flatten().map(|q| [q.x, q.y]).collect(),
        };
        Self {
            index,
            goal_indices_bev: pred.goals.indices_bev.clone(),
            goal_indices_fpv: pred.goals.indices_fpv.clone(),
            bev,
            fpv,
            image_size: [cam.image_width, cam.image_height],
        }
    }
}

const WHITE: Rgb<u8> = Rgb([255, 255, 255]);
const LANE: Rgb<u8> = Rgb([190, 190, 190]);
const OBSERVED: Rgb<u8> = Rgb([40, 90, 200]);
const TRUTH: Rgb<u8> = Rgb([30, 150, 60]);
const PREDICTED: Rgb<u8> = Rgb([240, 140, 20]);
const GOAL: Rgb<u8> = Rgb([210, 20, 30]);

/// Light pink at zero probability to dark magenta at the panel maximum.
fn heat_colour(w: f64, max: f64) -> Rgb<u8> {
    let t = if max > 0.0 { (w / max).clamp(0.0, 1.0) } else { 0.0 };
    let lerp = |a: f64, b: f64| (a + t * (b - a)).round() as u8;
    Rgb([lerp(255.0, 120.0), lerp(200.0, 0.0), lerp(220.0, 70.0)])
}

/// Maps panel coordinates to pixels of a `w x h` canvas.
struct View {
    scale: f64,
    offset: [f64; 2],
    flip_y: bool,
}

impl View {
    fn map(&self, p: [f64; 2], h: u32) -> [f64; 2] {
        let x = (p[0] - self.offset[0]) * self.scale;
        let y = (p[1] - self.offset[1]) * self.scale;
        if self.flip_y {
            [x, h as f64 - 1.0 - y]
        } else {
            [x, y]
        }
    }
}

struct Canvas {
    img: RgbImage,
    view: View,
}

impl Canvas {
    fn dot(&mut self, p: [f64; 2], radius: f64, c: Rgb<u8>) {
        let q = self.view.map(p, self.img.height());
        let r = radius.ceil() as i64;
        for dy in -r..=r {
            for dx in -r..=r {
                if ((dx * dx + dy * dy) as f64) <= radius * radius {
                    self.put(q[0].round() as i64 + dx, q[1].round() as i64 + dy, c);
                }
            }
        }
    }

    fn put(&mut self, x: i64, y: i64, c: Rgb<u8>) {
        if x >= 0 && y >= 0 && (x as u32) < self.img.width() && (y as u32) < self.img.height() {
            self.img.put_pixel(x as u32, y as u32, c);
        }
    }

    fn line(&mut self, a: [f64; 2], b: [f64; 2], c: Rgb<u8>) {
        let (p, q) = (
            self.view.map(a, self.img.height()),
            self.view.map(b, self.img.height()),
        );
        let steps = (q[0] - p[0])
            .abs()
            .max((q[1] - p[1]).abs())
            .ceil()
            .clamp(1.0, 10_000.0) as usize;
        for i in 0..=steps {
            let t = i as f64 / steps as f64;
            let (x, y) = (p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1]));
            for (dx, dy) in [(0, 0), (1, 0), (0, 1)] {
                self.put(x.round() as i64 + dx, y.round() as i64 + dy, c);
            }
        }
    }

    fn polyline(&mut self, pts: &[[f64; 2]], c: Rgb<u8>) {
        for w in pts.windows(2) {
            self.line(w[0], w[1], c);
        }
    }

    /// Five-pointed star of outer radius `r` canvas pixels.
    fn star(&mut self, p: [f64; 2], r: f64, c: Rgb<u8>) {
        let s = self.view.scale;
        let verts: Vec<[f64; 2]> = (0..=10)
            .map(|i| {
                let ang = std::f64::consts::FRAC_PI_2 + i as f64 * std::f64::consts::PI / 5.0;
                let rad = if i % 2 == 0 { r } else { 0.45 * r } / s;
                [p[0] + rad * ang.cos(), p[1] + rad * ang.sin()]
            })
            .collect();
        self.polyline(&verts, c);
        self.dot(p, 0.3 * r, c);
    }

    fn panel(&mut self, panel: &Panel) {
        for lane in &panel.lanes {
            self.polyline(lane, LANE);
        }
        let max = panel.heatmap.iter().map(|(_, w)| *w).fold(0.0, f64::max);
        // low scores first so that the dark dots stay on top
        let mut heat = panel.heatmap.clone();
        heat.sort_by(|a, b| a.1.total_cmp(&b.1));
        for (p, w) in heat {
            self.dot(p, 3.0, heat_colour(w, max));
        }
        self.polyline(&panel.observed, OBSERVED);
        for p in &panel.observed {
            self.dot(*p, 2.0, OBSERVED);
        }
        for t in &panel.predicted {
            self.polyline(t, PREDICTED);
        }
        self.polyline(&panel.truth, TRUTH);
        for p in &panel.truth {
            self.dot(*p, 2.0, TRUTH);
        }
        for g in &panel.goals {
            self.star(*g, 9.0, GOAL);
        }
    }
}

const BEV_SIZE: u32 = 640;
const FPV_SCALE: f64 = 0.5;

fn bev_canvas(panel: &Panel) -> Canvas {
    let all = panel
        .lanes
        .iter()
        .flatten()
        .chain(&panel.observed)
        .chain(&panel.truth)
        .chain(panel.predicted.iter().flatten())
        .chain(&panel.goals)
        .chain(panel.heatmap.iter().map(|(p, _)| p));
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in all {
        for d in 0..2 {
            lo[d] = lo[d].min(p[d]);
            hi[d] = hi[d].max(p[d]);
        }
    }
    if !lo[0].is_finite() {
        (lo, hi) = ([-1.0; 2], [1.0; 2]);
    }
    let span = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1.0) * 1.1;
    let centre = [(lo[0] + hi[0]) / 2.0, (lo[1] + hi[1]) / 2.0];
    Canvas {
        img: RgbImage::from_pixel(BEV_SIZE, BEV_SIZE, WHITE),
        view: View {
            scale: BEV_SIZE as f64 / span,
            offset: [centre[0] - span / 2.0, centre[1] - span / 2.0],
            flip_y: true,
        },
    }
}

fn fpv_canvas(image_size: [f64; 2]) -> Canvas {
    let w = (image_size[0] * FPV_SCALE).round().max(1.0) as u32;
    let h = (image_size[1] * FPV_SCALE).round().max(1.0) as u32;
    Canvas {
        img: RgbImage::from_pixel(w, h, WHITE),
        view: View {
            scale: FPV_SCALE,
            offset: [0.0, 0.0],
            flip_y: false,
        },
    }
}

pub fn render_bev(dump: &PredictionDump) -> RgbImage {
    let mut c = bev_canvas(&dump.bev);
    c.panel(&dump.bev);
    c.img
}

pub fn render_fpv(dump: &PredictionDump) -> RgbImage {
    let mut c = fpv_canvas(dump.image_size);
    c.panel(&dump.fpv);
    c.img
}

/// Writes `sample_<index>_bev.png` and `sample_<index>_fpv.png` into `dir`
/// and returns their paths.
pub fn write_plots(dump: &PredictionDump, dir: &Path) -> Result<[PathBuf; 2], PlotError> {
    std::fs::create_dir_all(dir).map_err(|source| PlotError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    let paths = [
        dir.join(format!("sample_{:04}_bev.png", dump.index)),
        dir.join(format!("sample_{:04}_fpv.png", dump.index)),
    ];
    for (img, path) in [render_bev(dump), render_fpv(dump)].iter().zip(&paths) {
        img.save(path).map_err(|source| PlotError::Image {
            path: path.display().to_string(),
            source,
        })?;
    }
    Ok(paths)
}
