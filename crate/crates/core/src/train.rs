//! Mini-batch training with Adam, the collision-aware loss and MPC-relabelled
//! data augmentation.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::bicycle::{ControlCommand, DynamicVehicle};
use crate::error::{Error, Result};
use crate::losses::{total_loss, LossConfig};
use crate::metrics::{OfflineAccumulator, OfflineReport};
use crate::mpc::{reference_from_points, solve_mpc, solve_mpc_to_point, MpcConfig, MpcProblem};
use crate::net::{AggregationMode, MtpNetwork, NetConfig, ParamSet};
use crate::parallel::Workers;
use crate::scene::{dist, Scene, Trajectory, VehicleSnapshot};
use crate::sim::scenario::derive_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub enabled: bool,
    /// Position noise per axis, metres.
    pub sigma: f64,
    /// Heading noise, radians.
    pub heading_sigma: f64,
    /// Probability that a vehicle of a training scene is replaced by a
    /// perturbed copy in a given epoch.
    pub fraction: f64,
    /// Perturbed copies precomputed per vehicle. Zero draws a fresh
    /// perturbation every time (slow: one MPC solve per use).
    pub pool_size: usize,
    /// MPC control intervals used to relabel a future; must divide the horizon.
    pub control_intervals: usize,
    /// Relabelled futures ending farther than this from the original end
    /// point are dropped.
    pub max_terminal_error: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            sigma: 0.5,
            heading_sigma: 0.1,
            fraction: 0.5,
            pool_size: 4,
            control_intervals: 10,
            max_terminal_error: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine decay from the base rate to zero over all epochs.
    Cosine,
}

impl LrSchedule {
    pub fn rate(self, base: f64, epoch: usize, epochs: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine => 0.5 * base * (1.0 + (std::f64::consts::PI * epoch as f64 / epochs.max(1) as f64).cos()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Scenes per optimizer step.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub lr_schedule: LrSchedule,
    #[serde(flatten)]
    pub loss: LossConfig,
    pub augmentation: AugmentConfig,
    pub disable_aggregation: bool,
    /// Share of episodes held out for validation.
    pub validation_fraction: f64,
    /// Final-point error above which a prediction counts as a miss.
    pub miss_threshold: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 32,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            lr_schedule: LrSchedule::Constant,
            loss: LossConfig::default(),
            augmentation: AugmentConfig::default(),
            disable_aggregation: false,
            validation_fraction: 0.2,
            miss_threshold: 2.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("train: {m}")));
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be > 0");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return bad("need 0 <= beta1, beta2 < 1 and adam_eps > 0");
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return bad("validation_fraction must be in [0, 1)");
        }
        let a = &self.augmentation;
        if !(0.0..=1.0).contains(&a.fraction) {
            return bad("augmentation fraction must be in [0, 1]");
        }
        if !(a.sigma >= 0.0) || !(a.heading_sigma >= 0.0) || !(a.max_terminal_error > 0.0) || a.control_intervals == 0 {
            return bad("augmentation sigma must be >= 0, max_terminal_error > 0, control_intervals >= 1");
        }
        self.loss.validate()
    }
}

/// Adam state over the flattened parameters.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(n_params: usize, cfg: &TrainConfig) -> Self {
        Self {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
        }
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn step(&mut self, params: &mut ParamSet, grad: &ParamSet) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let mut i = 0;
        for (p, g) in params.slices_mut().into_iter().zip(grad.slices()) {
            for (pj, gj) in p.iter_mut().zip(g) {
                let m = &mut self.m[i];
                let v = &mut self.v[i];
                *m = self.beta1 * *m + (1.0 - self.beta1) * gj;
                *v = self.beta2 * *v + (1.0 - self.beta2) * gj * gj;
                *pj -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
                i += 1;
            }
        }
    }
}

/// Loss of one scene and its parameter gradient.
pub fn scene_gradient(net: &MtpNetwork, scene: &Scene, loss: &LossConfig) -> Result<(f64, ParamSet)> {
    let gt = scene
        .futures()
        .ok_or_else(|| Error::Scene("training scenes need ground-truth futures".into()))?;
    let (pred, acts) = net.forward(scene)?;
    let l = total_loss(&pred, gt, loss)?;
    let g = net.backward(&acts, &l.grad)?;
    Ok((l.total, g))
}

/// Mean loss and gradient over a batch. Scenes may be processed in
/// parallel; the reduction is always in batch order.
pub fn batch_gradient(
    net: &MtpNetwork,
    scenes: &[&Scene],
    ids: &[usize],
    loss: &LossConfig,
    workers: &Workers,
) -> Result<(f64, ParamSet)> {
    let parts = workers.map(scenes.len(), |i| scene_gradient(net, scenes[i], loss));
    let mut total = 0.0;
    let mut grad = net.params().zeros_like();
    for (i, r) in parts.into_iter().enumerate() {
        let (l, g) = r?;
        if !l.is_finite() || !g.is_finite() {
            return Err(Error::NonFiniteLoss { scene: ids[i] });
        }
        total += l;
        grad.add_scaled(&g, 1.0);
    }
    let s = 1.0 / scenes.len().max(1) as f64;
    grad.scale(s);
    Ok((total * s, grad))
}

/// Speed implied by the first step of a future.
fn initial_speed(v: &VehicleSnapshot, fut: &Trajectory) -> f64 {
    dist(v.position, fut.points()[0]) / fut.dt()
}

fn check_divides(horizon: usize, intervals: usize) -> Result<usize> {
    if intervals == 0 || horizon % intervals != 0 {
        return Err(Error::Config(format!(
            "{intervals} control intervals do not divide the horizon {horizon}"
        )));
    }
    Ok(horizon / intervals)
}

/// Controls that reproduce `fut` from the vehicle's recorded pose; used to
/// warm-start relabelling.
pub fn fit_future(v: &VehicleSnapshot, fut: &Trajectory, intervals: usize, mpc: &MpcConfig) -> Result<Vec<ControlCommand>> {
    let sub = check_divides(fut.len(), intervals)?;
    let state = DynamicVehicle::new(v.position[0], v.position[1], v.heading(), initial_speed(v, fut), mpc.limits.wheelbase);
    // headings from the full-rate points, so the last pose matches the relabelling target
    let full = reference_from_points(v.heading(), v.position, fut.points());
    let reference: Vec<_> = full.into_iter().skip(sub - 1).step_by(sub).collect();
    let cfg = MpcConfig {
        horizon: intervals,
        substeps: sub,
        ..*mpc
    };
    let p = MpcProblem {
        initial: state,
        reference,
        dt: fut.dt() * sub as f64,
        terminal_only: false,
    };
    Ok(solve_mpc(&p, &cfg, None)?.commands)
}

/// Drives from `start` to the end pose of `original` and resamples the
/// rollout at the original spacing. Returns the new future and its
/// end-point error.
pub fn relabel_future(
    start: &DynamicVehicle,
    original: &Trajectory,
    intervals: usize,
    mpc: &MpcConfig,
    warm: Option<&[ControlCommand]>,
) -> Result<(Trajectory, f64)> {
    let sub = check_divides(original.len(), intervals)?;
    let refs = reference_from_points(start.theta, [start.x, start.y], original.points());
    let end = *refs.last().expect("non-empty future");
    let cfg = MpcConfig {
        horizon: intervals,
        substeps: sub,
        ..*mpc
    };
    let sol = solve_mpc_to_point(start, end, intervals, original.dt() * sub as f64, &cfg, warm)?;
    let pts: Vec<_> = sol.fine_rollout.iter().map(|s| s.position()).collect();
    let err = dist(*pts.last().expect("non-empty rollout"), original.last());
    Ok((Trajectory::new(pts, original.dt())?, err))
}

/// A perturbed copy of one vehicle with its relabelled future, or `None`
/// when the relabelled future misses the original end point.
pub fn augment_vehicle(
    v: &VehicleSnapshot,
    fut: &Trajectory,
    cfg: &AugmentConfig,
    mpc: &MpcConfig,
    warm: Option<&[ControlCommand]>,
    rng: &mut impl Rng,
) -> Result<Option<(VehicleSnapshot, Trajectory)>> {
    let pos_noise = Normal::new(0.0, cfg.sigma).map_err(|e| Error::Config(e.to_string()))?;
    let head_noise = Normal::new(0.0, cfg.heading_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let p = [v.position[0] + pos_noise.sample(rng), v.position[1] + pos_noise.sample(rng)];
    let theta = v.heading() + head_noise.sample(rng);
    let start = DynamicVehicle::new(p[0], p[1], theta, initial_speed(v, fut), mpc.limits.wheelbase);
    let (new_fut, err) = relabel_future(&start, fut, cfg.control_intervals, mpc, warm)?;
    if !(err <= cfg.max_terminal_error) {
        return Ok(None);
    }
    Ok(Some((VehicleSnapshot::new(v.id, p, theta, v.intention), new_fut)))
}

/// Replaces a `fraction` of the vehicles by perturbed, relabelled copies.
/// Returns the scene and the number of vehicles whose relabelling failed
/// (those keep their original data).
pub fn augment_scene(scene: &Scene, cfg: &AugmentConfig, mpc: &MpcConfig, rng: &mut impl Rng) -> Result<(Scene, usize)> {
    let futs = scene
        .futures()
        .ok_or_else(|| Error::Scene("augmentation needs ground-truth futures".into()))?
        .to_vec();
    let mut out = scene.clone();
    let mut dropped = 0;
    for (k, (v, f)) in scene.vehicles().iter().zip(&futs).enumerate() {
        if rng.random::<f64>() >= cfg.fraction {
            continue;
        }
        let warm = fit_future(v, f, cfg.control_intervals, mpc).ok();
        match augment_vehicle(v, f, cfg, mpc, warm.as_deref(), rng) {
            Ok(Some((nv, nf))) => out.replace_vehicle(k, nv, Some(nf))?,
            Ok(None) | Err(Error::MpcDiverged { .. }) => dropped += 1,
            Err(e) => return Err(e),
        }
    }
    Ok((out, dropped))
}

const STREAM_INIT: u64 = 1;
const STREAM_SHUFFLE: u64 = 2;
const STREAM_POOL: u64 = 3;
const STREAM_EPOCH_AUG: u64 = 4;
const STREAM_SPLIT: u64 = 5;

/// Precomputed perturbed copies, `[scene][vehicle][variant]`.
struct AugmentPool {
    variants: Vec<Vec<Vec<(VehicleSnapshot, Trajectory)>>>,
    dropped: usize,
}

fn build_pool(scenes: &[&Scene], ids: &[usize], cfg: &TrainConfig, mpc: &MpcConfig, workers: &Workers) -> Result<AugmentPool> {
    let a = &cfg.augmentation;
    let per_scene = workers.map(scenes.len(), |i| -> Result<(Vec<Vec<(VehicleSnapshot, Trajectory)>>, usize)> {
        let scene = scenes[i];
        let futs = scene.futures().ok_or_else(|| Error::Scene("training scenes need futures".into()))?;
        let mut out = Vec::with_capacity(scene.len());
        let mut dropped = 0;
        for (k, (v, f)) in scene.vehicles().iter().zip(futs).enumerate() {
            let warm = fit_future(v, f, a.control_intervals, mpc).ok();
            let mut list = Vec::with_capacity(a.pool_size);
            for j in 0..a.pool_size {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[STREAM_POOL, ids[i] as u64, k as u64, j as u64]));
                match augment_vehicle(v, f, a, mpc, warm.as_deref(), &mut rng) {
                    Ok(Some(x)) => list.push(x),
                    Ok(None) | Err(Error::MpcDiverged { .. }) => dropped += 1,
                    Err(e) => return Err(e),
                }
            }
            out.push(list);
        }
        Ok((out, dropped))
    });
    let mut pool = AugmentPool {
        variants: Vec::with_capacity(scenes.len()),
        dropped: 0,
    };
    for r in per_scene {
        let (v, d) = r?;
        pool.variants.push(v);
        pool.dropped += d;
    }
    Ok(pool)
}

/// Train/validation scene indices. Whole episodes go to one side; scenes
/// without an episode id are treated as their own episode.
pub fn split_by_episode(scenes: &[Scene], validation_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    #[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
    enum Group {
        Episode(u64),
        Lone(usize),
    }
    let key = |i: usize| scenes[i].episode.map_or(Group::Lone(i), Group::Episode);
    let mut groups: Vec<Group> = (0..scenes.len()).map(key).collect();
    groups.sort();
    groups.dedup();
    let mut n_val = (validation_fraction * groups.len() as f64).round() as usize;
    if validation_fraction > 0.0 && groups.len() > 1 {
        n_val = n_val.clamp(1, groups.len() - 1);
    } else {
        n_val = 0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[STREAM_SPLIT]));
    groups.shuffle(&mut rng);
    let val: std::collections::BTreeSet<Group> = groups[..n_val].iter().copied().collect();
    (0..scenes.len()).partition(|&i| !val.contains(&key(i)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_ade: f64,
    pub val_fde: f64,
    pub val_mr: f64,
    pub val_cr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub net: MtpNetwork,
    pub history: Vec<EpochLog>,
    pub train_scenes: usize,
    pub val_scenes: usize,
    /// Perturbations whose relabelled future was rejected.
    pub dropped_augmentations: usize,
}

/// Offline metrics of `net` on scenes with ground truth.
pub fn evaluate(net: &MtpNetwork, scenes: &[&Scene], miss_threshold: f64, lambda: f64) -> Result<OfflineReport> {
    let mut acc = OfflineAccumulator::new();
    for s in scenes {
        let gt = s.futures().ok_or_else(|| Error::Scene("evaluation scenes need futures".into()))?;
        acc.add_scene(&net.predict(s)?, gt, miss_threshold, lambda)?;
    }
    Ok(acc.report())
}

/// Trains a fresh network. `on_epoch` sees every epoch's log and the
/// current weights (for logging and periodic checkpoints).
pub fn train(
    scenes: &[Scene],
    net_cfg: &NetConfig,
    cfg: &TrainConfig,
    mpc: &MpcConfig,
    workers: usize,
    mut on_epoch: impl FnMut(&EpochLog, &MtpNetwork) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    net_cfg.validate()?;
    mpc.validate()?;
    if scenes.is_empty() {
        return Err(Error::Dataset("no scenes to train on".into()));
    }
    for s in scenes {
        if s.horizon() != Some(net_cfg.horizon) {
            return Err(Error::HorizonMismatch {
                expected: net_cfg.horizon,
                found: s.horizon().unwrap_or(0),
            });
        }
    }
    let mut net_cfg = net_cfg.clone();
    if cfg.disable_aggregation {
        net_cfg.aggregation = AggregationMode::Disabled;
    }
    let mut net = MtpNetwork::init(net_cfg, derive_seed(cfg.seed, &[STREAM_INIT]))?;
    let pool_workers = Workers::new(workers);

    let (train_idx, val_idx) = split_by_episode(scenes, cfg.validation_fraction, cfg.seed);
    let train_scenes: Vec<&Scene> = train_idx.iter().map(|&i| &scenes[i]).collect();
    let val_scenes: Vec<&Scene> = val_idx.iter().map(|&i| &scenes[i]).collect();

    let aug = &cfg.augmentation;
    let augmenting = aug.enabled && aug.fraction > 0.0;
    if augmenting {
        check_divides(net.horizon(), aug.control_intervals)?;
    }
    let pool = if augmenting && aug.pool_size > 0 {
        Some(build_pool(&train_scenes, &train_idx, cfg, mpc, &pool_workers)?)
    } else {
        None
    };
    let mut dropped = pool.as_ref().map_or(0, |p| p.dropped);

    let mut adam = Adam::new(net.params().num_params(), cfg);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train_scenes.len()).collect();
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[STREAM_SHUFFLE, epoch as u64]));
        order.sort_unstable();
        order.shuffle(&mut rng);

        adam.set_learning_rate(cfg.lr_schedule.rate(cfg.learning_rate, epoch, cfg.epochs));
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut owned: Vec<Scene> = Vec::new();
            if augmenting {
                let parts = pool_workers.map(batch.len(), |b| -> Result<(Scene, usize)> {
                    let i = batch[b];
                    let mut rng =
                        ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[STREAM_EPOCH_AUG, epoch as u64, train_idx[i] as u64]));
                    match &pool {
                        Some(p) => Ok((pick_from_pool(train_scenes[i], &p.variants[i], aug.fraction, &mut rng)?, 0)),
                        None => augment_scene(train_scenes[i], aug, mpc, &mut rng),
                    }
                });
                for r in parts {
                    let (s, d) = r?;
                    owned.push(s);
                    dropped += d;
                }
            }
            let batch_scenes: Vec<&Scene> = if augmenting {
                owned.iter().collect()
            } else {
                batch.iter().map(|&i| train_scenes[i]).collect()
            };
            let ids: Vec<usize> = batch.iter().map(|&i| train_idx[i]).collect();
            let (loss, grad) = batch_gradient(&net, &batch_scenes, &ids, &cfg.loss, &pool_workers)?;
            adam.step(net.params_mut(), &grad);
            epoch_loss += loss * batch.len() as f64;
        }
        let val = if val_scenes.is_empty() {
            None
        } else {
            Some(evaluate(&net, &val_scenes, cfg.miss_threshold, cfg.loss.lambda)?)
        };
        let nan = f64::NAN;
        let log = EpochLog {
            epoch: epoch + 1,
            train_loss: epoch_loss / train_scenes.len() as f64,
            val_ade: val.map_or(nan, |v| v.ade),
            val_fde: val.map_or(nan, |v| v.fde),
            val_mr: val.map_or(nan, |v| v.mr),
            val_cr: val.map_or(nan, |v| v.cr),
        };
        on_epoch(&log, &net)?;
        history.push(log);
    }
    Ok(TrainOutcome {
        net,
        history,
        train_scenes: train_scenes.len(),
        val_scenes: val_scenes.len(),
        dropped_augmentations: dropped,
    })
}

fn pick_from_pool(
    scene: &Scene,
    variants: &[Vec<(VehicleSnapshot, Trajectory)>],
    fraction: f64,
    rng: &mut impl Rng,
) -> Result<Scene> {
    let mut out = scene.clone();
    for (k, list) in variants.iter().enumerate() {
        if rng.random::<f64>() >= fraction || list.is_empty() {
            continue;
        }
        let (v, f) = list[rng.random_range(0..list.len())].clone();
        out.replace_vehicle(k, v, Some(f))?;
    }
    Ok(out)
}

/// Writes the per-epoch log as CSV.
pub fn write_history<W: std::io::Write>(w: W, history: &[EpochLog]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for h in history {
        wtr.serialize(h)?;
    }
    wtr.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}
