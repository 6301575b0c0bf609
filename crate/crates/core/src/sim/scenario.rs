//! Initial vehicle sets for expert rollouts and closed-loop episodes.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arm::Arm;
use crate::error::{Error, Result};
use crate::scene::Intention;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpawnSpec {
    pub arm: Arm,
    pub intention: Intention,
    /// Distance from the intersection centre, metres.
    pub distance: f64,
    pub speed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub n_vehicles_min: usize,
    pub n_vehicles_max: usize,
    pub speed_min: f64,
    pub speed_max: f64,
    pub spawn_distance_min: f64,
    pub spawn_distance_max: f64,
    /// Minimum spacing of two vehicles spawned on the same arm.
    pub spawn_headway: f64,
    /// Episode time limit, seconds.
    pub episode_length: f64,
    pub dt: f64,
    /// Scenes are recorded every `record_every` ticks.
    pub record_every: usize,
    /// Vehicles farther than this from the centre along their exit arm are
    /// left out of scenes and removed in closed loop.
    pub exit_radius: f64,
    pub seed: u64,
    /// Fixed vehicle list; replaces random sampling when present.
    pub scripted: Option<Vec<SpawnSpec>>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            n_vehicles_min: 3,
            n_vehicles_max: 8,
            speed_min: 5.0,
            speed_max: 8.0,
            spawn_distance_min: 25.0,
            spawn_distance_max: 58.0,
            spawn_headway: 18.0,
            episode_length: 60.0,
            dt: 0.1,
            record_every: 2,
            exit_radius: 40.0,
            seed: 0,
            scripted: None,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("scenario: {m}")));
        if self.n_vehicles_min == 0 || self.n_vehicles_min > self.n_vehicles_max {
            return bad("need 1 <= n_vehicles_min <= n_vehicles_max");
        }
        if !(self.speed_min >= 0.0 && self.speed_min <= self.speed_max) {
            return bad("need 0 <= speed_min <= speed_max");
        }
        if !(self.spawn_distance_min > 0.0 && self.spawn_distance_min <= self.spawn_distance_max) {
            return bad("need 0 < spawn_distance_min <= spawn_distance_max");
        }
        if !(self.spawn_headway > 0.0) {
            return bad("spawn_headway must be > 0");
        }
        if !(self.exit_radius > 0.0) {
            return bad("exit_radius must be > 0");
        }
        if !(self.dt > 0.0) || !(self.episode_length > 0.0) || self.record_every == 0 {
            return bad("dt, episode_length and record_every must be positive");
        }
        Ok(())
    }

    /// Time between recorded frames.
    pub fn record_dt(&self) -> f64 {
        self.dt * self.record_every as f64
    }

    pub fn max_ticks(&self) -> usize {
        (self.episode_length / self.dt).round() as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spawn {
    pub id: u64,
    pub arm: Arm,
    pub intention: Intention,
    pub distance: f64,
    pub speed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub seed: u64,
    pub vehicles: Vec<Spawn>,
}

/// Mixes a base seed with stream indices (splitmix64 finaliser).
pub fn derive_seed(base: u64, stream: &[u64]) -> u64 {
    let mut z = base;
    for &s in stream {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(s.wrapping_mul(0xD6E8_FEB8_6659_FD93));
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

fn check_headway(spawns: &[Spawn], headway: f64) -> Result<()> {
    for arm in Arm::ALL {
        let mut d: Vec<f64> = spawns.iter().filter(|s| s.arm == arm).map(|s| s.distance).collect();
        d.sort_by(f64::total_cmp);
        if d.windows(2).any(|w| w[1] - w[0] < headway) {
            return Err(Error::InfeasibleSpawn {
                arm: arm.to_string(),
                requested: d.len(),
                headway,
            });
        }
    }
    Ok(())
}

/// Builds the spawn list for one episode; identical for identical seeds.
pub fn generate_scenario(cfg: &ScenarioConfig, seed: u64) -> Result<Scenario> {
    cfg.validate()?;
    if let Some(script) = &cfg.scripted {
        let vehicles: Vec<Spawn> = script
            .iter()
            .enumerate()
            .map(|(i, s)| Spawn {
                id: i as u64 + 1,
                arm: s.arm,
                intention: s.intention,
                distance: s.distance,
                speed: s.speed,
            })
            .collect();
        check_headway(&vehicles, cfg.spawn_headway)?;
        return Ok(Scenario { seed, vehicles });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let span = cfg.spawn_distance_max - cfg.spawn_distance_min;
    let per_arm = (span / cfg.spawn_headway).floor() as usize + 1;
    let n = rng.random_range(cfg.n_vehicles_min..=cfg.n_vehicles_max);
    if n > 4 * per_arm {
        return Err(Error::InfeasibleSpawn {
            arm: "any".into(),
            requested: n,
            headway: cfg.spawn_headway,
        });
    }
    let mut counts = [0usize; 4];
    let mut arms = Vec::with_capacity(n);
    for _ in 0..n {
        let open: Vec<Arm> = Arm::ALL.into_iter().filter(|a| counts[a.index()] < per_arm).collect();
        let a = *open.choose(&mut rng).expect("capacity checked above");
        counts[a.index()] += 1;
        arms.push(a);
    }
    // per arm: k ordered distances with the headway, uniform over the slack
    let mut slots: [Vec<f64>; 4] = Default::default();
    for arm in Arm::ALL {
        let k = counts[arm.index()];
        if k == 0 {
            continue;
        }
        let slack = span - (k - 1) as f64 * cfg.spawn_headway;
        let mut u: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..=slack)).collect();
        u.sort_by(f64::total_cmp);
        slots[arm.index()] = u
            .iter()
            .enumerate()
            .map(|(i, x)| cfg.spawn_distance_min + x + i as f64 * cfg.spawn_headway)
            .collect();
    }
    let mut used = [0usize; 4];
    let mut vehicles = Vec::with_capacity(n);
    for (i, arm) in arms.into_iter().enumerate() {
        let distance = slots[arm.index()][used[arm.index()]];
        used[arm.index()] += 1;
        let intention = Intention::ORDER[rng.random_range(0..3)];
        let speed = if cfg.speed_max > cfg.speed_min {
            rng.random_range(cfg.speed_min..cfg.speed_max)
        } else {
            cfg.speed_min
        };
        vehicles.push(Spawn {
            id: i as u64 + 1,
            arm,
            intention,
            distance,
            speed,
        });
    }
    check_headway(&vehicles, cfg.spawn_headway - 1e-9)?;
    Ok(Scenario { seed, vehicles })
}

/// The scripted scene of the intention-flip experiment: a vehicle from the
/// south, two oncoming straight vehicles from the north and a right turner
/// from the east.
pub fn turn_demo_script(south_intention: Intention) -> Vec<SpawnSpec> {
    vec![
        SpawnSpec {
            arm: Arm::South,
            intention: south_intention,
            distance: 34.0,
            speed: 8.0,
        },
        SpawnSpec {
            arm: Arm::North,
            intention: Intention::Straight,
            distance: 30.0,
            speed: 8.0,
        },
        SpawnSpec {
            arm: Arm::North,
            intention: Intention::Straight,
            distance: 50.0,
            speed: 8.0,
        },
        SpawnSpec {
            arm: Arm::East,
            intention: Intention::Right,
            distance: 40.0,
            speed: 6.0,
        },
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_scenario() {
        let cfg = ScenarioConfig::default();
        assert_eq!(generate_scenario(&cfg, 42).unwrap(), generate_scenario(&cfg, 42).unwrap());
        assert_ne!(generate_scenario(&cfg, 42).unwrap(), generate_scenario(&cfg, 43).unwrap());
    }

    #[test]
    fn spawns_respect_ranges_and_headway() {
        let cfg = ScenarioConfig::default();
        for seed in 0..300 {
            let s = generate_scenario(&cfg, seed).unwrap();
            assert!((cfg.n_vehicles_min..=cfg.n_vehicles_max).contains(&s.vehicles.len()));
            for v in &s.vehicles {
                assert!(v.distance >= cfg.spawn_distance_min && v.distance <= cfg.spawn_distance_max);
                assert!(v.speed >= cfg.speed_min && v.speed <= cfg.speed_max);
            }
            for a in &s.vehicles {
                for b in &s.vehicles {
                    if a.id != b.id && a.arm == b.arm {
                        assert!((a.distance - b.distance).abs() >= cfg.spawn_headway - 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn one_per_arm_script() {
        let cfg = ScenarioConfig {
            scripted: Some(
                Arm::ALL
                    .iter()
                    .map(|&arm| SpawnSpec {
                        arm,
                        intention: Intention::Straight,
                        distance: 30.0,
                        speed: 6.0,
                    })
                    .collect(),
            ),
            ..ScenarioConfig::default()
        };
        let s = generate_scenario(&cfg, 0).unwrap();
        let mut arms: Vec<Arm> = s.vehicles.iter().map(|v| v.arm).collect();
        arms.dedup();
        assert_eq!(arms.len(), 4);
    }

    #[test]
    fn crowded_script_is_infeasible() {
        let spec = |d| SpawnSpec {
            arm: Arm::West,
            intention: Intention::Left,
            distance: d,
            speed: 5.0,
        };
        let cfg = ScenarioConfig {
            scripted: Some(vec![spec(30.0), spec(35.0)]),
            ..ScenarioConfig::default()
        };
        let e = generate_scenario(&cfg, 0).unwrap_err();
        assert!(matches!(e, Error::InfeasibleSpawn { .. }), "{e}");
        assert!(e.to_string().contains("west"));
    }

    #[test]
    fn too_many_vehicles_is_infeasible() {
        let cfg = ScenarioConfig {
            n_vehicles_min: 12,
            n_vehicles_max: 12,
            ..ScenarioConfig::default()
        };
        assert!(matches!(generate_scenario(&cfg, 1), Err(Error::InfeasibleSpawn { .. })));
    }

    #[test]
    fn turn_demo_matches_the_scene() {
        let s = turn_demo_script(Intention::Left);
        assert_eq!((s[0].arm, s[0].intention), (Arm::South, Intention::Left));
        assert!(s[1..3].iter().all(|v| v.arm == Arm::North && v.intention == Intention::Straight));
        assert_eq!((s[3].arm, s[3].intention), (Arm::East, Intention::Right));
    }
}
