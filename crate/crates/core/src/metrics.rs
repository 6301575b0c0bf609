//! Offline prediction metrics (ADE/FDE/MR/CR) and the online
//! distance-collision ratio.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::min_distance;
use crate::scene::{dist, Trajectory, Vec2};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OfflineReport {
    pub ade: f64,
    pub fde: f64,
    pub mr: f64,
    pub cr: f64,
    pub mr_plus_cr: f64,
    pub n_vehicles: usize,
}

/// Pools per-vehicle errors over many scenes.
#[derive(Debug, Clone, Default)]
pub struct OfflineAccumulator {
    sum_point_err: f64,
    n_points: usize,
    sum_final_err: f64,
    n_vehicles: usize,
    misses: usize,
    collided: usize,
}

impl OfflineAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds one scene and returns that scene's own report.
    pub fn add_scene(&mut self, pred: &[Trajectory], gt: &[Trajectory], miss_threshold: f64, lambda: f64) -> Result<OfflineReport> {
        let mut scene = OfflineAccumulator::default();
        if pred.len() != gt.len() {
            return Err(Error::Shape(format!("{} predictions for {} ground truths", pred.len(), gt.len())));
        }
        for (p, g) in pred.iter().zip(gt) {
            if p.len() != g.len() {
                return Err(Error::Shape("prediction and ground truth horizons differ".into()));
            }
            for (a, b) in p.points().iter().zip(g.points()) {
                scene.sum_point_err += dist(*a, *b);
            }
            scene.n_points += p.len();
            let fe = dist(p.last(), g.last());
            scene.sum_final_err += fe;
            if fe > miss_threshold {
                scene.misses += 1;
            }
        }
        scene.n_vehicles = pred.len();
        for i in 0..pred.len() {
            if (0..pred.len()).any(|j| j != i && min_distance(&pred[i], &pred[j]).0 < lambda) {
                scene.collided += 1;
            }
        }
        self.sum_point_err += scene.sum_point_err;
        self.n_points += scene.n_points;
        self.sum_final_err += scene.sum_final_err;
        self.n_vehicles += scene.n_vehicles;
        self.misses += scene.misses;
        self.collided += scene.collided;
        Ok(scene.report())
    }

    pub fn report(&self) -> OfflineReport {
        let nv = self.n_vehicles.max(1) as f64;
        let mr = self.misses as f64 / nv;
        let cr = self.collided as f64 / nv;
        OfflineReport {
            ade: self.sum_point_err / self.n_points.max(1) as f64,
            fde: self.sum_final_err / nv,
            mr,
            cr,
            mr_plus_cr: mr + cr,
            n_vehicles: self.n_vehicles,
        }
    }
}

/// ADE, FDE, miss rate and per-vehicle collision rate for one set of
/// aligned trajectories.
pub fn offline_metrics(pred: &[Trajectory], gt: &[Trajectory], miss_threshold: f64, lambda: f64) -> Result<OfflineReport> {
    OfflineAccumulator::new().add_scene(pred, gt, miss_threshold, lambda)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneMetricsRow {
    pub scene: usize,
    pub episode: Option<u64>,
    pub frame: Option<i64>,
    pub n_vehicles: usize,
    pub ade: f64,
    pub fde: f64,
    pub mr: f64,
    pub cr: f64,
}

pub fn write_scene_rows<W: Write>(w: W, rows: &[SceneMetricsRow]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for r in rows {
        wtr.serialize(r)?;
    }
    wtr.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

/// Driven paths and collision counts of one closed-loop episode.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeOutcome {
    /// Time-ordered positions of every vehicle while it was alive.
    pub paths: Vec<Vec<Vec2>>,
    pub v2v_collisions: usize,
    pub v2b_collisions: usize,
}

impl EpisodeOutcome {
    pub fn distance(&self) -> f64 {
        self.paths
            .iter()
            .map(|p| p.windows(2).map(|w| dist(w[0], w[1])).sum::<f64>())
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OnlineReport {
    pub total_distance: f64,
    pub v2v_collisions: usize,
    pub v2b_collisions: usize,
    /// Metres per V2V collision; equals `total_distance` when collision-free.
    pub dcr_v2v: f64,
    pub dcr_v2b: f64,
    pub v2v_collision_free: bool,
    pub v2b_collision_free: bool,
    pub episodes: usize,
}

/// Distance-collision ratio, pooled: total distance over all episodes
/// divided once by the total collision count of each kind.
pub fn dcr(episodes: &[EpisodeOutcome]) -> OnlineReport {
    let total_distance: f64 = episodes.iter().map(EpisodeOutcome::distance).sum();
    let v2v: usize = episodes.iter().map(|e| e.v2v_collisions).sum();
    let v2b: usize = episodes.iter().map(|e| e.v2b_collisions).sum();
    let ratio = |c: usize| if c == 0 { total_distance } else { total_distance / c as f64 };
    OnlineReport {
        total_distance,
        v2v_collisions: v2v,
        v2b_collisions: v2b,
        dcr_v2v: ratio(v2v),
        dcr_v2b: ratio(v2b),
        v2v_collision_free: v2v == 0,
        v2b_collision_free: v2b == 0,
        episodes: episodes.len(),
    }
}
