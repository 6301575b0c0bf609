//! Episode logs, expert rollouts and slicing of logs into scenes.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::expert::{expert_step, ExpertConfig};
use super::map::IntersectionMap;
use super::scenario::{derive_seed, generate_scenario, Scenario, ScenarioConfig};
use super::world::{CollisionDetector, CollisionEvent, CollisionKind, World};
use crate::arm::Arm;
use crate::bicycle::VehicleLimits;
use crate::error::{Error, Result};
use crate::metrics::EpisodeOutcome;
use crate::scene::{Intention, Scene, Trajectory, Vec2, VehicleSnapshot};

pub const EPISODE_FORMAT: &str = "mtp-episode";
pub const EPISODE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleInfo {
    pub id: u64,
    pub entry: Arm,
    pub intention: Intention,
    pub spawn_distance: f64,
    pub spawn_speed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeHeader {
    pub format: String,
    pub version: u32,
    pub episode: usize,
    pub seed: u64,
    pub dt: f64,
    /// `expert` or `closed-loop`.
    pub kind: String,
    pub vehicles: Vec<VehicleInfo>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseRecord {
    pub id: u64,
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    pub v: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TickRecord {
    pub tick: u64,
    pub time: f64,
    pub vehicles: Vec<PoseRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub spawned: usize,
    pub despawned: usize,
    pub alive: usize,
    pub v2v: usize,
    pub v2b: usize,
    /// Vehicles that reached the end of their route.
    pub completed: Vec<u64>,
    /// Set when the episode stopped early because of a non-finite
    /// prediction or a solver failure.
    pub aborted: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeLog {
    pub header: EpisodeHeader,
    pub ticks: Vec<TickRecord>,
    pub events: Vec<CollisionEvent>,
    pub summary: EpisodeSummary,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum LogLine {
    Header(EpisodeHeader),
    Tick(TickRecord),
    Collision(CollisionEvent),
    Summary(EpisodeSummary),
}

impl EpisodeLog {
    pub(crate) fn start(world: &World, scenario: &Scenario, episode: usize, kind: &str) -> EpisodeLog {
        let header = EpisodeHeader {
            format: EPISODE_FORMAT.into(),
            version: EPISODE_VERSION,
            episode,
            seed: scenario.seed,
            dt: world.dt,
            kind: kind.into(),
            vehicles: scenario
                .vehicles
                .iter()
                .map(|s| VehicleInfo {
                    id: s.id,
                    entry: s.arm,
                    intention: s.intention,
                    spawn_distance: s.distance,
                    spawn_speed: s.speed,
                })
                .collect(),
        };
        let mut log = EpisodeLog {
            header,
            ticks: Vec::new(),
            events: Vec::new(),
            summary: EpisodeSummary {
                spawned: scenario.vehicles.len(),
                despawned: 0,
                alive: scenario.vehicles.len(),
                v2v: 0,
                v2b: 0,
                completed: Vec::new(),
                aborted: None,
            },
        };
        log.record(world);
        log
    }

    pub(crate) fn record(&mut self, world: &World) {
        self.ticks.push(TickRecord {
            tick: world.tick,
            time: world.tick as f64 * world.dt,
            vehicles: world
                .alive()
                .map(|v| PoseRecord {
                    id: v.id,
                    x: v.state.x,
                    y: v.state.y,
                    theta: v.state.theta,
                    v: v.state.v,
                })
                .collect(),
        });
    }

    pub(crate) fn add_events(&mut self, events: Vec<CollisionEvent>) {
        for e in events {
            match e.kind {
                CollisionKind::V2v => self.summary.v2v += 1,
                CollisionKind::V2b => self.summary.v2b += 1,
            }
            self.events.push(e);
        }
    }

    pub(crate) fn finish(&mut self, world: &World) {
        self.summary.alive = world.n_alive();
        self.summary.despawned = world.vehicles.iter().filter(|v| !v.alive).count();
    }

    pub fn collisions(&self) -> usize {
        self.summary.v2v + self.summary.v2b
    }

    /// Time-ordered positions of every vehicle.
    pub fn paths(&self) -> BTreeMap<u64, Vec<(u64, PoseRecord)>> {
        let mut out: BTreeMap<u64, Vec<(u64, PoseRecord)>> = BTreeMap::new();
        for t in &self.ticks {
            for p in &t.vehicles {
                out.entry(p.id).or_default().push((t.tick, *p));
            }
        }
        out
    }

    pub fn outcome(&self) -> EpisodeOutcome {
        EpisodeOutcome {
            paths: self
                .paths()
                .into_values()
                .map(|v| v.into_iter().map(|(_, p)| [p.x, p.y]).collect())
                .collect(),
            v2v_collisions: self.summary.v2v,
            v2b_collisions: self.summary.v2b,
        }
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        let mut line = |l: &LogLine| -> Result<()> {
            let s = serde_json::to_string(l)?;
            writeln!(w, "{s}").map_err(|e| Error::io("<episode log>", e))
        };
        line(&LogLine::Header(self.header.clone()))?;
        let mut ev = self.events.iter().peekable();
        for t in &self.ticks {
            line(&LogLine::Tick(t.clone()))?;
            while let Some(e) = ev.next_if(|e| e.tick == t.tick) {
                line(&LogLine::Collision(e.clone()))?;
            }
        }
        for e in ev {
            line(&LogLine::Collision(e.clone()))?;
        }
        line(&LogLine::Summary(self.summary.clone()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        self.write_jsonl(&mut w)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<EpisodeLog> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut header = None;
        let mut ticks = Vec::new();
        let mut events = Vec::new();
        let mut summary = None;
        for (i, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: LogLine = serde_json::from_str(&line)
                .map_err(|e| Error::Dataset(format!("{}: line {}: {e}", path.display(), i + 1)))?;
            match parsed {
                LogLine::Header(h) => {
                    if h.format != EPISODE_FORMAT || h.version != EPISODE_VERSION {
                        return Err(Error::Dataset(format!("{}: not an episode log", path.display())));
                    }
                    header = Some(h)
                }
                LogLine::Tick(t) => ticks.push(t),
                LogLine::Collision(c) => events.push(c),
                LogLine::Summary(s) => summary = Some(s),
            }
        }
        let missing = |what: &str| Error::Dataset(format!("{}: missing {what} line", path.display()));
        Ok(EpisodeLog {
            header: header.ok_or_else(|| missing("header"))?,
            ticks,
            events,
            summary: summary.ok_or_else(|| missing("summary"))?,
        })
    }
}

/// Runs the expert on one scenario. Vehicles stay alive until the end of
/// their route so that late scenes still have complete futures.
pub fn run_expert_episode(
    map: &Arc<IntersectionMap>,
    scenario: &Scenario,
    episode: usize,
    scfg: &ScenarioConfig,
    ecfg: &ExpertConfig,
    limits: VehicleLimits,
) -> EpisodeLog {
    let mut world = World::new(map.clone(), scenario, scfg.dt, limits);
    let mut log = EpisodeLog::start(&world, scenario, episode, "expert");
    let mut detector = CollisionDetector::new();
    log.add_events(detector.detect(world.tick, &world.poses(), map));
    for _ in 0..scfg.max_ticks() {
        if world.n_alive() == 0 {
            break;
        }
        let cmds = expert_step(&mut world, ecfg);
        world.step(&cmds);
        log.add_events(detector.detect(world.tick, &world.poses(), map));
        log.record(&world);
        let done = world.despawn_where(|r, v| v.s >= r.length() - 0.5);
        log.summary.completed.extend(done);
    }
    log.finish(&world);
    log
}

pub const MAX_EXPERT_ATTEMPTS: usize = 20;

/// Generates `episodes` collision-free expert episodes. An episode whose
/// rollout collides is rejected and regenerated from the next seed in its
/// stream; `rejected` counts those retries.
pub fn rollout_expert(
    map: &Arc<IntersectionMap>,
    scfg: &ScenarioConfig,
    ecfg: &ExpertConfig,
    limits: VehicleLimits,
    episodes: usize,
    workers: usize,
) -> Result<ExpertRollout> {
    let run = |e: usize| -> Result<(Scenario, EpisodeLog, usize)> {
        let mut detail = String::new();
        for attempt in 0..MAX_EXPERT_ATTEMPTS {
            let seed = derive_seed(scfg.seed, &[e as u64, attempt as u64]);
            let scenario = generate_scenario(scfg, seed)?;
            let log = run_expert_episode(map, &scenario, e, scfg, ecfg, limits);
            if log.collisions() == 0 {
                return Ok((scenario, log, attempt));
            }
            if detail.is_empty() {
                detail = format!("seed {seed}: first event {:?}", log.events[0]);
            }
        }
        Err(Error::ExpertCollision {
            episode: e,
            attempts: MAX_EXPERT_ATTEMPTS,
            detail,
        })
    };
    let results: Vec<Result<(Scenario, EpisodeLog, usize)>> = crate::parallel::map_indexed(episodes, workers, run);
    let mut out = ExpertRollout::default();
    for r in results {
        let (s, l, rejected) = r?;
        out.scenarios.push(s);
        out.logs.push(l);
        out.rejected += rejected;
    }
    Ok(out)
}

#[derive(Debug, Clone, Default)]
pub struct ExpertRollout {
    pub scenarios: Vec<Scenario>,
    pub logs: Vec<EpisodeLog>,
    pub rejected: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SliceOptions {
    pub horizon: usize,
    /// Scene spacing in recorded frames.
    pub stride: usize,
    /// Ticks per recorded frame.
    pub record_every: usize,
    /// Vehicles farther than this along their exit arm are left out.
    pub exit_radius: f64,
}

/// Cuts a log into scenes: at every `stride`-th recorded frame, every
/// vehicle that is still near the junction and has `horizon` further frames
/// becomes part of the scene.
pub fn scenes_from_log(log: &EpisodeLog, opts: &SliceOptions) -> Result<Vec<Scene>> {
    let frame_dt = log.header.dt * opts.record_every as f64;
    let info: BTreeMap<u64, &VehicleInfo> = log.header.vehicles.iter().map(|v| (v.id, v)).collect();
    let frames: Vec<&TickRecord> = log
        .ticks
        .iter()
        .filter(|t| t.tick % opts.record_every as u64 == 0)
        .collect();
    let lookup: Vec<BTreeMap<u64, PoseRecord>> = frames
        .iter()
        .map(|t| t.vehicles.iter().map(|p| (p.id, *p)).collect())
        .collect();
    let mut scenes = Vec::new();
    let mut f = 0;
    while f + opts.horizon < frames.len() {
        let mut vehicles = Vec::new();
        let mut futures = Vec::new();
        for (id, p) in &lookup[f] {
            let Some(vi) = info.get(id) else {
                return Err(Error::Dataset(format!("vehicle {id} missing from log header")));
            };
            if beyond_exit(vi.entry, vi.intention, [p.x, p.y], opts.exit_radius) {
                continue;
            }
            let fut: Option<Vec<Vec2>> = (1..=opts.horizon)
                .map(|k| lookup[f + k].get(id).map(|q| [q.x, q.y]))
                .collect();
            if let Some(fut) = fut {
                vehicles.push(VehicleSnapshot::new(*id, [p.x, p.y], p.theta, vi.intention));
                futures.push(Trajectory::new(fut, frame_dt)?);
            }
        }
        if !vehicles.is_empty() {
            let scene = Scene::new(vehicles, Some(futures))?
                .with_source(Some(log.header.episode as u64), Some(frames[f].tick as i64 / opts.record_every as i64));
            scenes.push(scene);
        }
        f += opts.stride;
    }
    Ok(scenes)
}

/// True once a vehicle is on its exit arm farther than `radius` from the centre.
pub fn beyond_exit(entry: Arm, intention: Intention, p: Vec2, radius: f64) -> bool {
    let exit = entry.exit_for(intention);
    let o = exit.outbound();
    Arm::of_point(p) == exit && p[0] * o[0] + p[1] * o[1] > radius
}
