//! Closed-loop evaluation: every tick each vehicle predicts its future with
//! a [`Predictor`], tracks the first points with the MPC and applies the
//! first command.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use super::episode::{beyond_exit, EpisodeLog, PoseRecord};
use super::map::IntersectionMap;
use super::scenario::{Scenario, ScenarioConfig};
use super::world::{CollisionDetector, World};
use crate::bicycle::ControlCommand;
use crate::error::{Error, Result};
use crate::metrics::{dcr, EpisodeOutcome, OnlineReport};
use crate::mpc::{reference_from_points, solve_mpc, MpcConfig, MpcProblem};
use crate::net::MtpNetwork;
use crate::scene::{Scene, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictContext {
    pub episode: usize,
    pub tick: u64,
    pub time: f64,
}

pub trait Predictor: Sync {
    fn horizon(&self) -> usize;
    /// Spacing of the predicted points, seconds.
    fn dt(&self) -> f64;
    /// One trajectory per scene vehicle, in scene order.
    fn predict(&self, ctx: &PredictContext, scene: &Scene) -> Result<Vec<Trajectory>>;
}

impl Predictor for MtpNetwork {
    fn horizon(&self) -> usize {
        self.config().horizon
    }

    fn dt(&self) -> f64 {
        self.config().dt
    }

    fn predict(&self, _ctx: &PredictContext, scene: &Scene) -> Result<Vec<Trajectory>> {
        MtpNetwork::predict(self, scene)
    }
}

/// Replays the future of every vehicle from expert logs of the same
/// scenarios. Past the end of a log the last pose is extrapolated at
/// constant velocity.
#[derive(Debug, Clone)]
pub struct ExpertOracle {
    tracks: BTreeMap<usize, BTreeMap<u64, Vec<(u64, PoseRecord)>>>,
    sim_dt: f64,
    horizon: usize,
    dt: f64,
}

impl ExpertOracle {
    pub fn new(logs: &[EpisodeLog], horizon: usize, dt: f64) -> Result<Self> {
        let sim_dt = logs.first().map_or(0.1, |l| l.header.dt);
        if logs.iter().any(|l| l.header.dt != sim_dt) {
            return Err(Error::Config("oracle logs use different time steps".into()));
        }
        Ok(Self {
            tracks: logs.iter().map(|l| (l.header.episode, l.paths())).collect(),
            sim_dt,
            horizon,
            dt,
        })
    }
}

impl Predictor for ExpertOracle {
    fn horizon(&self) -> usize {
        self.horizon
    }

    fn dt(&self) -> f64 {
        self.dt
    }

    fn predict(&self, ctx: &PredictContext, scene: &Scene) -> Result<Vec<Trajectory>> {
        let ep = self
            .tracks
            .get(&ctx.episode)
            .ok_or_else(|| Error::Dataset(format!("no expert log for episode {}", ctx.episode)))?;
        scene
            .vehicles()
            .iter()
            .map(|v| {
                let path = ep
                    .get(&v.id)
                    .ok_or_else(|| Error::Dataset(format!("vehicle {} not in expert log {}", v.id, ctx.episode)))?;
                let (first, _) = path[0];
                let (last_tick, last) = *path.last().expect("paths are non-empty");
                let pts = (1..=self.horizon)
                    .map(|k| {
                        let t = ctx.time + k as f64 * self.dt;
                        let tick = (t / self.sim_dt).round() as u64;
                        if tick <= last_tick {
                            let p = path[tick.saturating_sub(first) as usize].1;
                            [p.x, p.y]
                        } else {
                            let h = t - last_tick as f64 * self.sim_dt;
                            [last.x + h * last.v * last.theta.cos(), last.y + h * last.v * last.theta.sin()]
                        }
                    })
                    .collect();
                Trajectory::new(pts, self.dt)
            })
            .collect()
    }
}

/// Predicts every point at the intersection centre, the output of a network
/// whose weights are all zero.
#[derive(Debug, Clone, Copy)]
pub struct CentrePredictor {
    pub horizon: usize,
    pub dt: f64,
}

impl Predictor for CentrePredictor {
    fn horizon(&self) -> usize {
        self.horizon
    }

    fn dt(&self) -> f64 {
        self.dt
    }

    fn predict(&self, _ctx: &PredictContext, scene: &Scene) -> Result<Vec<Trajectory>> {
        (0..scene.len())
            .map(|_| Trajectory::new(vec![[0.0, 0.0]; self.horizon], self.dt))
            .collect()
    }
}

fn check_config(predictor: &dyn Predictor, mpc: &MpcConfig, scfg: &ScenarioConfig) -> Result<usize> {
    mpc.validate()?;
    scfg.validate()?;
    if mpc.horizon > predictor.horizon() {
        return Err(Error::Config(format!(
            "mpc horizon {} exceeds the prediction horizon {}",
            mpc.horizon,
            predictor.horizon()
        )));
    }
    // the MPC integrates with the simulator step
    let ratio = predictor.dt() / scfg.dt;
    if !(ratio >= 1.0) || (ratio - ratio.round()).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "prediction step {} must be a whole multiple of the simulator step {}",
            predictor.dt(),
            scfg.dt
        )));
    }
    Ok(ratio.round() as usize)
}

/// Runs one closed-loop episode. A non-finite prediction or a solver failure
/// stops the episode early; the reason is kept in `summary.aborted`.
pub fn closed_loop_episode(
    map: &Arc<IntersectionMap>,
    scenario: &Scenario,
    episode: usize,
    scfg: &ScenarioConfig,
    mpc: &MpcConfig,
    predictor: &dyn Predictor,
) -> Result<EpisodeLog> {
    let substeps = check_config(predictor, mpc, scfg)?;
    let mpc = MpcConfig { substeps, ..*mpc };
    let mut world = World::new(map.clone(), scenario, scfg.dt, mpc.limits);
    let mut log = EpisodeLog::start(&world, scenario, episode, "closed-loop");
    let mut detector = CollisionDetector::new();
    log.add_events(detector.detect(world.tick, &world.poses(), map));
    let mut warm: HashMap<u64, Vec<ControlCommand>> = HashMap::new();
    let half = map.config.arm_half_length;

    for _ in 0..scfg.max_ticks() {
        if world.n_alive() == 0 {
            break;
        }
        let scene = world.scene()?;
        let ctx = PredictContext {
            episode,
            tick: world.tick,
            time: world.tick as f64 * world.dt,
        };
        match plan(&world, &scene, &ctx, predictor, &mpc, &mut warm) {
            Ok(cmds) => world.step(&cmds),
            Err(e) => {
                log.summary.aborted = Some(format!("tick {}: {e}", world.tick));
                break;
            }
        }
        log.add_events(detector.detect(world.tick, &world.poses(), map));
        log.record(&world);
        let radius = scfg.exit_radius;
        let gone = world.despawn_where(|_, v| {
            let p = v.position();
            beyond_exit(v.entry, v.intention, p, radius) || p[0].abs() > half || p[1].abs() > half
        });
        for id in gone {
            warm.remove(&id);
        }
    }
    log.finish(&world);
    Ok(log)
}

fn plan(
    world: &World,
    scene: &Scene,
    ctx: &PredictContext,
    predictor: &dyn Predictor,
    mpc: &MpcConfig,
    warm: &mut HashMap<u64, Vec<ControlCommand>>,
) -> Result<Vec<ControlCommand>> {
    let preds = predictor.predict(ctx, scene)?;
    if preds.len() != scene.len() {
        return Err(Error::Shape(format!("{} predictions for {} vehicles", preds.len(), scene.len())));
    }
    let mut cmds = vec![ControlCommand::ZERO; world.vehicles.len()];
    for (snap, pred) in scene.vehicles().iter().zip(&preds) {
        let pts = &pred.points()[..mpc.horizon.min(pred.len())];
        if pts.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinitePrediction(format!("vehicle {}", snap.id)));
        }
        let i = world
            .vehicles
            .iter()
            .position(|v| v.id == snap.id)
            .expect("scene vehicles come from the world");
        let state = world.vehicles[i].state;
        let problem = MpcProblem {
            initial: state,
            reference: reference_from_points(state.theta, [state.x, state.y], pts),
            dt: pred.dt(),
            terminal_only: false,
        };
        let sol = solve_mpc(&problem, mpc, warm.get(&snap.id).map(Vec::as_slice))?;
        cmds[i] = sol.commands[0];
        warm.insert(snap.id, sol.commands);
    }
    Ok(cmds)
}

#[derive(Debug, Clone)]
pub struct ClosedLoopResult {
    pub logs: Vec<EpisodeLog>,
    pub report: OnlineReport,
    pub aborted: usize,
}

/// Runs every scenario (episode index = position in `scenarios`) on
/// `workers` threads and pools the distance-collision ratio.
pub fn closed_loop_eval(
    map: &Arc<IntersectionMap>,
    scenarios: &[Scenario],
    scfg: &ScenarioConfig,
    mpc: &MpcConfig,
    predictor: &dyn Predictor,
    workers: usize,
) -> Result<ClosedLoopResult> {
    check_config(predictor, mpc, scfg)?;
    let logs = crate::parallel::map_indexed(scenarios.len(), workers, |e| {
        closed_loop_episode(map, &scenarios[e], e, scfg, mpc, predictor)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let outcomes: Vec<EpisodeOutcome> = logs.iter().map(EpisodeLog::outcome).collect();
    Ok(ClosedLoopResult {
        report: dcr(&outcomes),
        aborted: logs.iter().filter(|l| l.summary.aborted.is_some()).count(),
        logs,
    })
}

/// RMS distance between two logs of the same scenario over the (tick,
/// vehicle) pairs present in both.
pub fn tracking_rms(a: &EpisodeLog, b: &EpisodeLog) -> Option<f64> {
    let index: HashMap<(u64, u64), [f64; 2]> = b
        .ticks
        .iter()
        .flat_map(|t| t.vehicles.iter().map(move |p| ((t.tick, p.id), [p.x, p.y])))
        .collect();
    let mut sum = 0.0;
    let mut n = 0usize;
    for t in &a.ticks {
        for p in &t.vehicles {
            if let Some(q) = index.get(&(t.tick, p.id)) {
                sum += (p.x - q[0]).powi(2) + (p.y - q[1]).powi(2);
                n += 1;
            }
        }
    }
    (n > 0).then(|| (sum / n as f64).sqrt())
}
