//! Track-file ingestion and slicing into supervised scenes.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::arm::Arm;
use crate::error::{Error, Result};
use crate::scene::{Intention, Scene, Trajectory, VehicleSnapshot};

/// Column names used to locate the required fields. Defaults follow the
/// inD spelling.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeaderMapping {
    pub track_id: String,
    pub frame: String,
    pub x: String,
    pub y: String,
    pub heading: String,
}

impl Default for HeaderMapping {
    fn default() -> Self {
        Self {
            track_id: "trackId".into(),
            frame: "frame".into(),
            x: "xCenter".into(),
            y: "yCenter".into(),
            heading: "heading".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadingUnit {
    #[default]
    Degrees,
    Radians,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackRecord {
    pub track_id: u64,
    pub frame: i64,
    pub x: f64,
    pub y: f64,
    /// Radians, wrapped.
    pub heading: f64,
}

/// Frame-contiguous pose sequence of one vehicle.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackSequence {
    pub track_id: u64,
    /// Known manoeuvre, e.g. from a simulator. When absent it is derived from
    /// the entry and exit arms.
    pub intention: Option<Intention>,
    pub records: Vec<TrackRecord>,
}

impl TrackSequence {
    pub fn first_frame(&self) -> i64 {
        self.records[0].frame
    }

    pub fn last_frame(&self) -> i64 {
        self.records[self.records.len() - 1].frame
    }

    pub fn at(&self, frame: i64) -> Option<&TrackRecord> {
        if frame < self.first_frame() || frame > self.last_frame() {
            return None;
        }
        self.records.get((frame - self.first_frame()) as usize)
    }

    /// Intention from the known label, or the (entry arm, exit arm) lookup.
    pub fn intention(&self) -> Option<Intention> {
        self.intention.or_else(|| label_intention(self))
    }
}

/// Entry arm of the first pose, exit arm of the last pose, right-hand traffic.
pub fn label_intention(seq: &TrackSequence) -> Option<Intention> {
    let first = seq.records.first()?;
    let last = seq.records.last()?;
    let entry = Arm::of_point([first.x, first.y]);
    let exit = Arm::of_point([last.x, last.y]);
    entry.intention_to(exit)
}

fn column(headers: &csv::StringRecord, name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| Error::MissingColumn(name.to_string()))
}

pub fn load_tracks_from_path(path: &Path, mapping: &HeaderMapping, unit: HeadingUnit) -> Result<Vec<TrackSequence>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    load_tracks(f, mapping, unit)
}

/// Parses a CSV track file into per-track sequences sorted by frame.
pub fn load_tracks<R: Read>(reader: R, mapping: &HeaderMapping, unit: HeadingUnit) -> Result<Vec<TrackSequence>> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let cols = [
        column(&headers, &mapping.track_id)?,
        column(&headers, &mapping.frame)?,
        column(&headers, &mapping.x)?,
        column(&headers, &mapping.y)?,
        column(&headers, &mapping.heading)?,
    ];
    let names = [&mapping.track_id, &mapping.frame, &mapping.x, &mapping.y, &mapping.heading];

    let mut by_track: BTreeMap<u64, BTreeMap<i64, TrackRecord>> = BTreeMap::new();
    let mut row = csv::StringRecord::new();
    loop {
        let line = rdr.position().line() + 1;
        let more = rdr.read_record(&mut row).map_err(|e| Error::TrackRow {
            line,
            message: e.to_string(),
        })?;
        if !more {
            break;
        }
        let line = row.position().map_or(line, |p| p.line());
        let field = |i: usize| -> Result<&str> {
            row.get(cols[i]).map(str::trim).ok_or_else(|| Error::TrackRow {
                line,
                message: format!("missing field `{}`", names[i]),
            })
        };
        let bad = |i: usize, v: &str| Error::TrackRow {
            line,
            message: format!("cannot parse `{}` value {v:?}", names[i]),
        };
        let track_id: u64 = field(0)?.parse().map_err(|_| bad(0, field(0).unwrap_or("")))?;
        let frame: i64 = field(1)?.parse().map_err(|_| bad(1, field(1).unwrap_or("")))?;
        let mut vals = [0.0f64; 3];
        for (k, v) in vals.iter_mut().enumerate() {
            let s = field(k + 2)?;
            *v = s.parse().map_err(|_| bad(k + 2, s))?;
            if !v.is_finite() {
                return Err(bad(k + 2, s));
            }
        }
        let heading = match unit {
            HeadingUnit::Degrees => vals[2].to_radians(),
            HeadingUnit::Radians => vals[2],
        };
        let rec = TrackRecord {
            track_id,
            frame,
            x: vals[0],
            y: vals[1],
            heading: crate::scene::wrap_angle(heading),
        };
        if by_track.entry(track_id).or_default().insert(frame, rec).is_some() {
            return Err(Error::DuplicateFrame { track_id, frame });
        }
    }

    let mut out = Vec::with_capacity(by_track.len());
    for (track_id, frames) in by_track {
        let records: Vec<TrackRecord> = frames.into_values().collect();
        for w in records.windows(2) {
            if w[1].frame != w[0].frame + 1 {
                return Err(Error::FrameGap {
                    track_id,
                    prev: w[0].frame,
                    next: w[1].frame,
                });
            }
        }
        out.push(TrackSequence {
            track_id,
            intention: None,
            records,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SliceConfig {
    /// Frames between consecutive sampled instants.
    pub stride: usize,
    /// Number of future points per vehicle.
    pub horizon: usize,
    /// Seconds between future points.
    pub dt: f64,
    /// Frames between consecutive future points.
    pub frame_step: usize,
}

impl Default for SliceConfig {
    fn default() -> Self {
        Self {
            stride: 5,
            horizon: 30,
            dt: 0.2,
            frame_step: 1,
        }
    }
}

/// Cuts sequences into scenes. At each sampled frame `f` a vehicle qualifies
/// when it is present at `f` and at every `f + t * frame_step` for
/// `t = 1..=horizon`; its future is those `horizon` positions. Vehicles
/// whose intention cannot be determined (U-turns) are excluded. Scenes with
/// no qualifying vehicle are skipped. Vehicles are ordered by track id.
pub fn slice_scenes(seqs: &[TrackSequence], cfg: &SliceConfig) -> Result<Vec<Scene>> {
    if cfg.horizon < 1 || cfg.stride < 1 || cfg.frame_step < 1 {
        return Err(Error::Config("horizon, stride and frame_step must be >= 1".into()));
    }
    if !(cfg.dt > 0.0) {
        return Err(Error::Config("slice dt must be positive".into()));
    }
    let mut labeled: Vec<(&TrackSequence, Intention)> = seqs
        .iter()
        .filter(|s| !s.records.is_empty())
        .filter_map(|s| s.intention().map(|i| (s, i)))
        .collect();
    labeled.sort_by_key(|(s, _)| s.track_id);
    let (Some(f_min), Some(f_max)) = (
        labeled.iter().map(|(s, _)| s.first_frame()).min(),
        labeled.iter().map(|(s, _)| s.last_frame()).max(),
    ) else {
        return Ok(Vec::new());
    };

    let span = (cfg.horizon * cfg.frame_step) as i64;
    let mut scenes = Vec::new();
    let mut f = f_min;
    while f <= f_max {
        let mut vehicles = Vec::new();
        let mut futures = Vec::new();
        for &(seq, intention) in &labeled {
            let Some(now) = seq.at(f) else { continue };
            if seq.last_frame() < f + span {
                continue;
            }
            let points = (1..=cfg.horizon)
                .map(|t| {
                    let r = seq.at(f + (t * cfg.frame_step) as i64).expect("contiguous");
                    [r.x, r.y]
                })
                .collect();
            vehicles.push(VehicleSnapshot::new(seq.track_id, [now.x, now.y], now.heading, intention));
            futures.push(Trajectory::new(points, cfg.dt)?);
        }
        if !vehicles.is_empty() {
            scenes.push(Scene::new(vehicles, Some(futures))?.with_source(None, Some(f)));
        }
        f += cfg.stride as i64;
    }
    Ok(scenes)
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEADER: &str = "recordingId,trackId,frame,xCenter,yCenter,heading,lonVelocity\n";

    fn straight_track(id: u64, frames: std::ops::Range<i64>) -> TrackSequence {
        TrackSequence {
            track_id: id,
            intention: Some(Intention::Straight),
            records: frames
                .map(|f| TrackRecord {
                    track_id: id,
                    frame: f,
                    x: 1.75,
                    y: -50.0 + f as f64,
                    heading: std::f64::consts::FRAC_PI_2,
                })
                .collect(),
        }
    }

    #[test]
    fn one_track_three_rows() {
        let csv = format!("{HEADER}0,4,0,1.0,2.0,90,3\n0,4,1,1.5,2.0,90,3\n0,4,2,2.0,2.0,90,3\n");
        let t = load_tracks(csv.as_bytes(), &HeaderMapping::default(), HeadingUnit::Degrees).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t[0].records.len(), 3);
        assert!((t[0].records[0].heading - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
    }

    #[test]
    fn interleaved_tracks_are_grouped_and_sorted() {
        let csv = format!(
            "{HEADER}0,1,1,0,0,0,0\n0,2,5,0,0,0,0\n0,1,0,0,0,0,0\n0,2,4,0,0,180,0\n0,1,2,0,0,0,0\n"
        );
        let t = load_tracks(csv.as_bytes(), &HeaderMapping::default(), HeadingUnit::Degrees).unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t[0].records.iter().map(|r| r.frame).collect::<Vec<_>>(), vec![0, 1, 2]);
        assert_eq!(t[1].records.iter().map(|r| r.frame).collect::<Vec<_>>(), vec![4, 5]);
        // 180 degrees wraps to -pi
        assert_eq!(t[1].records[0].heading, -std::f64::consts::PI);
    }

    #[test]
    fn duplicate_key_is_reported() {
        let csv = format!("{HEADER}0,7,11,0,0,0,0\n0,7,12,0,0,0,0\n0,7,12,1,0,0,0\n");
        let err = load_tracks(csv.as_bytes(), &HeaderMapping::default(), HeadingUnit::Degrees).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("track 7") && msg.contains("frame 12"), "{msg}");
    }

    #[test]
    fn malformed_row_names_line() {
        let csv = format!("{HEADER}0,7,11,0,0,0,0\n0,7,12,abc,0,0,0\n");
        let err = load_tracks(csv.as_bytes(), &HeaderMapping::default(), HeadingUnit::Degrees).unwrap_err();
        match err {
            Error::TrackRow { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn missing_column_and_custom_mapping() {
        let csv = "id,frame,x,y,yaw\n1,0,0,0,0.5\n";
        let err = load_tracks(csv.as_bytes(), &HeaderMapping::default(), HeadingUnit::Radians).unwrap_err();
        assert!(matches!(err, Error::MissingColumn(_)));
        let mapping = HeaderMapping {
            track_id: "id".into(),
            frame: "frame".into(),
            x: "x".into(),
            y: "y".into(),
            heading: "yaw".into(),
        };
        let t = load_tracks(csv.as_bytes(), &mapping, HeadingUnit::Radians).unwrap();
        assert_eq!(t[0].records[0].heading, 0.5);
    }

    #[test]
    fn frame_gap_is_rejected() {
        let csv = format!("{HEADER}0,1,0,0,0,0,0\n0,1,2,0,0,0,0\n");
        assert!(matches!(
            load_tracks(csv.as_bytes(), &HeaderMapping::default(), HeadingUnit::Degrees),
            Err(Error::FrameGap { .. })
        ));
    }

    fn cfg(horizon: usize, stride: usize) -> SliceConfig {
        SliceConfig {
            stride,
            horizon,
            dt: 0.2,
            frame_step: 1,
        }
    }

    #[test]
    fn slicing_single_track() {
        // 101 frames (0..=100): the last instant with 30 strictly-future frames is 70.
        let scenes = slice_scenes(&[straight_track(1, 0..101)], &cfg(30, 10)).unwrap();
        let frames: Vec<i64> = scenes.iter().map(|s| s.frame.unwrap()).collect();
        assert_eq!(frames, vec![0, 10, 20, 30, 40, 50, 60, 70]);
        assert!(scenes.iter().all(|s| s.len() == 1 && s.horizon() == Some(30)));
        // future starts one frame after the instant
        let s = &scenes[0];
        assert_eq!(s.futures().unwrap()[0].points()[0], [1.75, -49.0]);
    }

    #[test]
    fn slicing_hundred_frames_with_strict_future() {
        let scenes = slice_scenes(&[straight_track(1, 0..100)], &cfg(30, 10)).unwrap();
        assert_eq!(scenes.len(), 7);
    }

    #[test]
    fn slicing_overlapping_tracks() {
        let scenes = slice_scenes(&[straight_track(2, 0..101), straight_track(1, 0..101)], &cfg(30, 10)).unwrap();
        assert_eq!(scenes.len(), 8);
        for s in &scenes {
            assert_eq!(s.len(), 2);
            let ids: Vec<u64> = s.vehicles().iter().map(|v| v.id).collect();
            assert_eq!(ids, vec![1, 2]);
            // futures aligned with vehicles: the first future point of each
            // vehicle continues that vehicle's own track.
            for (v, f) in s.vehicles().iter().zip(s.futures().unwrap()) {
                assert!((f.points()[0][1] - v.position[1] - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn short_tracks_are_dropped_not_errors() {
        let scenes = slice_scenes(&[straight_track(1, 0..101), straight_track(2, 50..70)], &cfg(30, 10)).unwrap();
        assert!(scenes.iter().all(|s| s.len() == 1));
        assert!(slice_scenes(&[straight_track(2, 0..10)], &cfg(30, 10)).unwrap().is_empty());
    }

    #[test]
    fn south_to_west_track_is_labeled_left() {
        let mut records = Vec::new();
        for f in 0..40 {
            records.push(TrackRecord {
                track_id: 5,
                frame: f,
                x: 1.75,
                y: -40.0 + f as f64,
                heading: 1.57,
            });
        }
        for f in 40..80 {
            records.push(TrackRecord {
                track_id: 5,
                frame: f,
                x: -(f - 40) as f64 - 2.0,
                y: 1.75,
                heading: 3.1,
            });
        }
        let seq = TrackSequence {
            track_id: 5,
            intention: None,
            records,
        };
        assert_eq!(label_intention(&seq), Some(Intention::Left));
        let scenes = slice_scenes(&[seq], &cfg(10, 10)).unwrap();
        assert!(scenes.iter().all(|s| s.vehicles()[0].intention == Intention::Left));
    }
}
