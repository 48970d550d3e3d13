//! JSON Lines scene files. Every float is written as the shortest decimal
//! string that parses back to the same binary64 value.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::{self, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::{Instance, InstanceKind, Sample, SceneError};
use crate::geometry::{AbsoluteFrame, CameraModel, Point2, Point3};

#[derive(Clone, Copy, Debug, PartialEq)]
struct Dec(f64);

impl Serialize for Dec {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format!("{:?}", self.0))
    }
}

struct DecVisitor;

impl Visitor<'_> for DecVisitor {
    type Value = Dec;

    fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("a decimal string or number")
    }

    fn visit_str<E: de::Error>(self, v: &str) -> Result<Dec, E> {
        v.trim()
            .parse::<f64>()
            .map(Dec)
            .map_err(|_| E::custom(format!("`{v}` is not a decimal number")))
    }

    fn visit_f64<E: de::Error>(self, v: f64) -> Result<Dec, E> {
        Ok(Dec(v))
    }

    fn visit_i64<E: de::Error>(self, v: i64) -> Result<Dec, E> {
        Ok(Dec(v as f64))
    }

    fn visit_u64<E: de::Error>(self, v: u64) -> Result<Dec, E> {
        Ok(Dec(v as f64))
    }
}

impl<'de> Deserialize<'de> for Dec {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        d.deserialize_any(DecVisitor)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InstanceRecord {
    id: usize,
    kind: InstanceKind,
    label: String,
    polyline: Vec<[Dec; 3]>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CameraRecord {
    fx: Dec,
    fy: Dec,
    cx: Dec,
    cy: Dec,
    w: Dec,
    h: Dec,
    #[serde(rename = "R")]
    r: [Dec; 9],
    t: [Dec; 3],
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FrameRecord {
    origin: [Dec; 3],
    heading: Dec,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleRecord {
    instances: Vec<InstanceRecord>,
    target_id: usize,
    future: Vec<[Dec; 2]>,
    camera: CameraRecord,
    frame: FrameRecord,
}

fn p3(p: &Point3) -> [Dec; 3] {
    [Dec(p.x), Dec(p.y), Dec(p.z)]
}

impl From<&Sample> for SampleRecord {
    fn from(s: &Sample) -> Self {
        let c = &s.camera;
        let mut r = [Dec(0.0); 9];
        for i in 0..3 {
            for j in 0..3 {
                r[3 * i + j] = Dec(c.rotation[i][j]);
            }
        }
        Self {
            instances: s
                .instances
                .iter()
                .map(|i| InstanceRecord {
                    id: i.id,
                    kind: i.kind,
                    label: i.label.clone(),
                    polyline: i.polyline.iter().map(p3).collect(),
                })
                .collect(),
            target_id: s.target_id,
            future: s.future.iter().map(|p| [Dec(p.x), Dec(p.y)]).collect(),
            camera: CameraRecord {
                fx: Dec(c.focal_x),
                fy: Dec(c.focal_y),
                cx: Dec(c.principal_x),
                cy: Dec(c.principal_y),
                w: Dec(c.image_width),
                h: Dec(c.image_height),
                r,
                t: [
                    Dec(c.translation[0]),
                    Dec(c.translation[1]),
                    Dec(c.translation[2]),
                ],
            },
            frame: FrameRecord {
                origin: p3(&s.frame.origin),
                heading: Dec(s.frame.heading()),
            },
        }
    }
}

impl SampleRecord {
    fn into_sample(self) -> Result<Sample, SceneError> {
        let c = self.camera;
        let rotation: [[f64; 3]; 3] = std::array::from_fn(|i| std::array::from_fn(|j| c.r[3 * i + j].0));
        let camera = CameraModel {
            focal_x: c.fx.0,
            focal_y: c.fy.0,
            principal_x: c.cx.0,
            principal_y: c.cy.0,
            image_width: c.w.0,
            image_height: c.h.0,
            rotation,
            translation: [c.t[0].0, c.t[1].0, c.t[2].0],
        };
        let o = self.frame.origin;
        let frame = AbsoluteFrame::new(Point3::new(o[0].0, o[1].0, o[2].0), self.frame.heading.0)?;
        let sample = Sample {
            instances: self
                .instances
                .into_iter()
                .map(|i| Instance {
                    id: i.id,
                    kind: i.kind,
                    label: i.label,
                    polyline: i
                        .polyline
                        .iter()
                        .map(|p| Point3::new(p[0].0, p[1].0, p[2].0))
                        .collect(),
                })
                .collect(),
            target_id: self.target_id,
            future: self.future.iter().map(|p| Point2::new(p[0].0, p[1].0)).collect(),
            camera,
            frame,
        };
        sample.validate()?;
        Ok(sample)
    }
}

pub fn write_dataset<W: Write>(samples: &[Sample], mut out: W) -> std::io::Result<()> {
    for s in samples {
        serde_json::to_writer(&mut out, &SampleRecord::from(s))?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

/// Parses JSON Lines; blank lines are skipped and errors name the 1-based
/// line and the offending field.
pub fn read_dataset<R: BufRead>(input: R) -> Result<Vec<Sample>, SceneError> {
    let mut out = Vec::new();
    for (idx, line) in input.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| SceneError::Parse {
            line: line_no,
            field: "<line>".into(),
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let de = &mut serde_json::Deserializer::from_str(&line);
        let record: SampleRecord = serde_path_to_error::deserialize(de).map_err(|e| SceneError::Parse {
            line: line_no,
            field: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        let sample = record.into_sample().map_err(|e| SceneError::Parse {
            line: line_no,
            field: "<sample>".into(),
            message: e.to_string(),
        })?;
        out.push(sample);
    }
    Ok(out)
}

pub fn save_dataset(samples: &[Sample], path: &Path) -> Result<(), SceneError> {
    let io_err = |source| SceneError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = File::create(path).map_err(io_err)?;
    write_dataset(samples, BufWriter::new(file)).map_err(io_err)
}

pub fn load_dataset(path: &Path) -> Result<Vec<Sample>, SceneError> {
    let file = File::open(path).map_err(|source| SceneError::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_dataset(BufReader::new(file))
}
