//! Vehicles, intentions, trajectories and scenes.
//!
//! All positions live in an intersection-centred frame: +x east, +y north,
//! metres. Headings are radians, counter-clockwise from +x, wrapped into
//! `[-pi, pi)`.

use std::collections::HashSet;
use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec2 = [f64; 2];

/// Default normalisation scale for network inputs and outputs, metres.
pub const DEFAULT_SCALE: f64 = 50.0;

/// Wraps an angle into `[-pi, pi)`.
pub fn wrap_angle(angle: f64) -> f64 {
    let two_pi = 2.0 * PI;
    let mut w = (angle + PI).rem_euclid(two_pi) - PI;
    if w >= PI {
        w -= two_pi;
    }
    if w < -PI {
        w = -PI;
    }
    w
}

pub(crate) fn dist(a: Vec2, b: Vec2) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Manoeuvre declared for the upcoming intersection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Intention {
    Left,
    Straight,
    Right,
}

impl Intention {
    /// One-hot ordering. Frozen: checkpoints depend on it.
    pub const ORDER: [Intention; 3] = [Intention::Left, Intention::Straight, Intention::Right];

    pub fn index(self) -> usize {
        match self {
            Intention::Left => 0,
            Intention::Straight => 1,
            Intention::Right => 2,
        }
    }

    pub fn one_hot(self) -> [f64; 3] {
        let mut v = [0.0; 3];
        v[self.index()] = 1.0;
        v
    }

    pub fn name(self) -> &'static str {
        match self {
            Intention::Left => "Left",
            Intention::Straight => "Straight",
            Intention::Right => "Right",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VehicleSnapshot {
    pub id: u64,
    pub position: Vec2,
    heading: f64,
    pub intention: Intention,
}

impl VehicleSnapshot {
    pub fn new(id: u64, position: Vec2, heading: f64, intention: Intention) -> Self {
        Self {
            id,
            position,
            heading: wrap_angle(heading),
            intention,
        }
    }

    pub fn heading(&self) -> f64 {
        self.heading
    }

    pub fn set_heading(&mut self, heading: f64) {
        self.heading = wrap_angle(heading);
    }
}

/// Network input for one vehicle: `[x/scale, y/scale, heading, one_hot(intention)]`.
pub fn assemble_input(v: &VehicleSnapshot, scale: f64) -> [f64; 6] {
    debug_assert!(scale > 0.0);
    let oh = v.intention.one_hot();
    [
        v.position[0] / scale,
        v.position[1] / scale,
        v.heading,
        oh[0],
        oh[1],
        oh[2],
    ]
}

/// Future positions sampled every `dt` seconds, starting one step after the
/// current instant.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    points: Vec<Vec2>,
    dt: f64,
}

impl Trajectory {
    pub fn new(points: Vec<Vec2>, dt: f64) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(Error::Scene(format!("trajectory dt must be positive, got {dt}")));
        }
        if points.is_empty() {
            return Err(Error::Scene("trajectory must have at least one point".into()));
        }
        Ok(Self { points, dt })
    }

    pub fn points(&self) -> &[Vec2] {
        &self.points
    }

    pub fn points_mut(&mut self) -> &mut [Vec2] {
        &mut self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn last(&self) -> Vec2 {
        *self.points.last().expect("non-empty by construction")
    }
}

/// All vehicles present at one instant, plus (for training data) their
/// ground-truth futures.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    vehicles: Vec<VehicleSnapshot>,
    futures: Option<Vec<Trajectory>>,
    /// Source episode, used for leakage-free validation splits.
    pub episode: Option<u64>,
    /// Source frame within the episode.
    pub frame: Option<i64>,
}

impl Scene {
    pub fn new(vehicles: Vec<VehicleSnapshot>, futures: Option<Vec<Trajectory>>) -> Result<Self> {
        if vehicles.is_empty() {
            return Err(Error::Scene("a scene needs at least one vehicle".into()));
        }
        let mut seen = HashSet::with_capacity(vehicles.len());
        for v in &vehicles {
            if !seen.insert(v.id) {
                return Err(Error::Scene(format!("duplicate vehicle id {}", v.id)));
            }
            if !(v.position[0].is_finite() && v.position[1].is_finite() && v.heading.is_finite()) {
                return Err(Error::Scene(format!("vehicle {} has a non-finite pose", v.id)));
            }
        }
        if let Some(f) = &futures {
            if f.len() != vehicles.len() {
                return Err(Error::Scene(format!(
                    "{} futures for {} vehicles",
                    f.len(),
                    vehicles.len()
                )));
            }
            let (t, dt) = (f[0].len(), f[0].dt());
            if f.iter().any(|tr| tr.len() != t || tr.dt() != dt) {
                return Err(Error::Scene("futures disagree on horizon or dt".into()));
            }
        }
        Ok(Self {
            vehicles,
            futures,
            episode: None,
            frame: None,
        })
    }

    pub fn with_source(mut self, episode: Option<u64>, frame: Option<i64>) -> Self {
        self.episode = episode;
        self.frame = frame;
        self
    }

    /// Episode the scene was cut from, if known.
    pub fn episode(&self) -> Option<u64> {
        self.episode
    }

    pub fn frame(&self) -> Option<i64> {
        self.frame
    }

    pub fn vehicles(&self) -> &[VehicleSnapshot] {
        &self.vehicles
    }

    pub fn futures(&self) -> Option<&[Trajectory]> {
        self.futures.as_deref()
    }

    pub fn len(&self) -> usize {
        self.vehicles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vehicles.is_empty()
    }

    pub fn horizon(&self) -> Option<usize> {
        self.futures.as_ref().map(|f| f[0].len())
    }

    /// Replaces one vehicle and its future, keeping every scene invariant.
    pub fn replace_vehicle(&mut self, k: usize, v: VehicleSnapshot, future: Option<Trajectory>) -> Result<()> {
        if v.id != self.vehicles[k].id {
            return Err(Error::Scene("replacement must keep the vehicle id".into()));
        }
        if let (Some(futs), Some(f)) = (self.futures.as_mut(), future) {
            if f.len() != futs[k].len() {
                return Err(Error::Scene("replacement future has a different horizon".into()));
            }
            futs[k] = f;
        }
        self.vehicles[k] = v;
        Ok(())
    }

    /// Reorders vehicles (and futures) by `perm`, where entry `i` of the result
    /// is entry `perm[i]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Scene {
        let vehicles = perm.iter().map(|&i| self.vehicles[i]).collect();
        let futures = self
            .futures
            .as_ref()
            .map(|f| perm.iter().map(|&i| f[i].clone()).collect());
        Scene {
            vehicles,
            futures,
            episode: self.episode,
            frame: self.frame,
        }
    }
}

// ---------------------------------------------------------------------------
// Newline-delimited JSON persistence.

pub const DATASET_FORMAT: &str = "mtp-scenes";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format: String,
    pub version: u32,
    pub horizon: usize,
    pub dt: f64,
    pub n_scenes: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct VehicleRecord {
    id: u64,
    x: f64,
    y: f64,
    heading: f64,
    intention: Intention,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SceneRecord {
    vehicles: Vec<VehicleRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    futures: Option<Vec<Vec<Vec2>>>,
    dt: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    episode: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    frame: Option<i64>,
}

impl Scene {
    pub fn to_json_line(&self, dt: f64) -> Result<String> {
        let rec = SceneRecord {
            vehicles: self
                .vehicles
                .iter()
                .map(|v| VehicleRecord {
                    id: v.id,
                    x: v.position[0],
                    y: v.position[1],
                    heading: v.heading,
                    intention: v.intention,
                })
                .collect(),
            futures: self
                .futures
                .as_ref()
                .map(|f| f.iter().map(|t| t.points.clone()).collect()),
            dt: self.futures.as_ref().map_or(dt, |f| f[0].dt()),
            episode: self.episode,
            frame: self.frame,
        };
        Ok(serde_json::to_string(&rec)?)
    }

    pub fn from_json_line(line: &str) -> Result<Scene> {
        let rec: SceneRecord = serde_json::from_str(line)?;
        let vehicles = rec
            .vehicles
            .iter()
            .map(|v| VehicleSnapshot::new(v.id, [v.x, v.y], v.heading, v.intention))
            .collect();
        let futures = match rec.futures {
            Some(f) => Some(
                f.into_iter()
                    .map(|pts| Trajectory::new(pts, rec.dt))
                    .collect::<Result<Vec<_>>>()?,
            ),
            None => None,
        };
        Ok(Scene::new(vehicles, futures)?.with_source(rec.episode, rec.frame))
    }
}

/// Writes a dataset: one header line followed by one scene per line.
pub fn write_dataset(path: &Path, scenes: &[Scene], horizon: usize, dt: f64) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let header = DatasetHeader {
        format: DATASET_FORMAT.into(),
        version: DATASET_VERSION,
        horizon,
        dt,
        n_scenes: scenes.len(),
    };
    let mut out = serde_json::to_string(&header)?;
    out.push('\n');
    for s in scenes {
        if let Some(t) = s.horizon() {
            if t != horizon {
                return Err(Error::Dataset(format!(
                    "scene horizon {t} differs from dataset horizon {horizon}"
                )));
            }
        }
        out.push_str(&s.to_json_line(dt)?);
        out.push('\n');
    }
    w.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<(DatasetHeader, Vec<Scene>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let first = lines
        .next()
        .ok_or_else(|| Error::Dataset(format!("{} is empty (no header)", path.display())))?
        .map_err(|e| Error::io(path, e))?;
    let header: DatasetHeader = serde_json::from_str(&first)
        .map_err(|e| Error::Dataset(format!("bad header in {}: {e}", path.display())))?;
    if header.format != DATASET_FORMAT || header.version != DATASET_VERSION {
        return Err(Error::Dataset(format!(
            "unsupported dataset {} v{} (expected {DATASET_FORMAT} v{DATASET_VERSION})",
            header.format, header.version
        )));
    }
    let mut scenes = Vec::with_capacity(header.n_scenes);
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let scene = Scene::from_json_line(&line)
            .map_err(|e| Error::Dataset(format!("{} line {}: {e}", path.display(), i + 2)))?;
        if scene.horizon().is_some_and(|t| t != header.horizon) {
            return Err(Error::Dataset(format!(
                "{} line {}: horizon differs from header",
                path.display(),
                i + 2
            )));
        }
        scenes.push(scene);
    }
    Ok((header, scenes))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64]) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-7)
    }

    #[test]
    fn input_at_origin() {
        let v = VehicleSnapshot::new(1, [0.0, 0.0], 0.0, Intention::Straight);
        assert_eq!(assemble_input(&v, 50.0), [0.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn input_scaling() {
        let v = VehicleSnapshot::new(1, [25.0, -50.0], PI / 2.0, Intention::Left);
        assert!(close(
            &assemble_input(&v, 50.0),
            &[0.5, -1.0, 1.5707963, 1.0, 0.0, 0.0]
        ));
    }

    #[test]
    fn input_heading_boundary() {
        let v = VehicleSnapshot::new(1, [10.0, 0.0], -PI, Intention::Right);
        assert!(close(
            &assemble_input(&v, 50.0),
            &[0.2, 0.0, -3.1415927, 0.0, 0.0, 1.0]
        ));
        let w = VehicleSnapshot::new(1, [10.0, 0.0], PI, Intention::Right);
        assert_eq!(w.heading(), -PI);
    }

    #[test]
    fn scene_rejects_duplicates_and_misaligned_futures() {
        let a = VehicleSnapshot::new(3, [0.0, 0.0], 0.0, Intention::Left);
        assert!(Scene::new(vec![a, a], None).is_err());
        assert!(Scene::new(vec![], None).is_err());
        let t = Trajectory::new(vec![[0.0, 0.0]], 0.2).unwrap();
        assert!(Scene::new(vec![a], Some(vec![t.clone(), t])).is_err());
        assert!(Trajectory::new(vec![[0.0, 0.0]], 0.0).is_err());
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        let a = VehicleSnapshot::new(3, [1.5, -2.0], 0.3, Intention::Left);
        let b = VehicleSnapshot::new(9, [4.0, 2.0], -1.0, Intention::Right);
        let fa = Trajectory::new(vec![[1.0, 2.0], [3.0, 4.0]], 0.2).unwrap();
        let fb = Trajectory::new(vec![[0.1, 0.2], [0.3, 0.4]], 0.2).unwrap();
        let s = Scene::new(vec![a, b], Some(vec![fa, fb]))
            .unwrap()
            .with_source(Some(4), Some(10));
        write_dataset(&p, &[s.clone()], 2, 0.2).unwrap();
        let (h, back) = read_dataset(&p).unwrap();
        assert_eq!(h.n_scenes, 1);
        assert_eq!(back, vec![s]);
    }

    #[test]
    fn empty_dataset_has_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        write_dataset(&p, &[], 30, 0.2).unwrap();
        let (h, s) = read_dataset(&p).unwrap();
        assert_eq!(h.horizon, 30);
        assert!(s.is_empty());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn wrap_is_in_range_and_preserves_direction(h in -1.0e4f64..1.0e4) {
                let w = wrap_angle(h);
                prop_assert!((-PI..PI).contains(&w));
                prop_assert!((w.sin() - h.sin()).abs() < 1e-12 * h.abs().max(1.0));
                prop_assert!((w.cos() - h.cos()).abs() < 1e-12 * h.abs().max(1.0));
            }

            #[test]
            fn assemble_is_injective(
                x1 in -60.0f64..60.0, y1 in -60.0f64..60.0, h1 in -3.0f64..3.0, i1 in 0usize..3,
                x2 in -60.0f64..60.0, y2 in -60.0f64..60.0, h2 in -3.0f64..3.0, i2 in 0usize..3,
            ) {
                let a = VehicleSnapshot::new(0, [x1, y1], h1, Intention::ORDER[i1]);
                let b = VehicleSnapshot::new(0, [x2, y2], h2, Intention::ORDER[i2]);
                let same = (x1, y1, h1, i1) == (x2, y2, h2, i2);
                prop_assert_eq!(assemble_input(&a, 50.0) == assemble_input(&b, 50.0), same);
            }
        }
    }
}
