use std::sync::Arc;

use mtp_core::arm::Arm;
use mtp_core::bicycle::VehicleLimits;
use mtp_core::scene::Intention;
use mtp_core::sim::episode::{run_expert_episode, EpisodeLog};
use mtp_core::sim::expert::ExpertConfig;
use mtp_core::sim::map::{IntersectionMap, MapConfig};
use mtp_core::sim::scenario::{derive_seed, generate_scenario, turn_demo_script, ScenarioConfig, SpawnSpec};

fn map() -> Arc<IntersectionMap> {
    Arc::new(IntersectionMap::new(MapConfig::default()).unwrap())
}

fn run_script(script: Vec<SpawnSpec>) -> EpisodeLog {
    let cfg = ScenarioConfig {
        scripted: Some(script),
        ..ScenarioConfig::default()
    };
    let sc = generate_scenario(&cfg, 0).unwrap();
    run_expert_episode(&map(), &sc, 0, &cfg, &ExpertConfig::default(), VehicleLimits::default())
}

#[test]
fn random_episodes_are_collision_free() {
    let m = map();
    let cfg = ScenarioConfig::default();
    let ecfg = ExpertConfig::default();
    let mut bad = Vec::new();
    let mut unfinished = 0;
    for e in 0..200u64 {
        let sc = generate_scenario(&cfg, derive_seed(7, &[e])).unwrap();
        let log = run_expert_episode(&m, &sc, e as usize, &cfg, &ecfg, VehicleLimits::default());
        if log.collisions() > 0 {
            bad.push((e, log.events.clone()));
        }
        unfinished += log.summary.alive;
    }
    assert!(bad.is_empty(), "{} episodes collided: {:?}", bad.len(), &bad[..bad.len().min(5)]);
    assert_eq!(unfinished, 0, "vehicles still on the map at the time limit");
}


fn spec(arm: Arm, intention: Intention, distance: f64, speed: f64) -> SpawnSpec {
    SpawnSpec {
        arm,
        intention,
        distance,
        speed,
    }
}

fn min_speed(log: &EpisodeLog, id: u64) -> f64 {
    log.paths()[&id].iter().map(|(_, p)| p.v).fold(f64::INFINITY, f64::min)
}

/// First and last tick inside the turn box.
fn box_interval(log: &EpisodeLog, id: u64) -> (u64, u64) {
    let inside: Vec<u64> = log.paths()[&id]
        .iter()
        .filter(|(_, p)| p.x.abs() < 8.0 && p.y.abs() < 8.0)
        .map(|(t, _)| *t)
        .collect();
    (inside[0], *inside.last().unwrap())
}

#[test]
fn lone_priority_vehicle_keeps_cruise_speed() {
    let log = run_script(vec![spec(Arm::North, Intention::Straight, 40.0, 8.0)]);
    assert_eq!(log.collisions(), 0);
    assert!(min_speed(&log, 1) > 0.9 * 8.0);
    assert_eq!(log.summary.completed, vec![1]);
}

#[test]
fn every_route_is_driven_without_contact() {
    let m = map();
    for arm in Arm::ALL {
        for it in Intention::ORDER {
            let log = run_script(vec![spec(arm, it, 40.0, 8.0)]);
            assert_eq!(log.collisions(), 0, "{arm} {it:?}");
            assert_eq!(log.summary.completed, vec![1], "{arm} {it:?}");
            let clearance = log.paths()[&1]
                .iter()
                .map(|(_, p)| m.barrier_distance([p.x, p.y]))
                .fold(f64::INFINITY, f64::min);
            assert!(clearance > 1.2, "{arm} {it:?}: barrier clearance {clearance}");
        }
    }
}

#[test]
fn left_turner_yields_to_oncoming_traffic() {
    let log = run_script(turn_demo_script(Intention::Left));
    assert_eq!(log.collisions(), 0);
    // both oncoming vehicles leave the box before the left turner enters it
    let (south_in, _) = box_interval(&log, 1);
    assert!(box_interval(&log, 2).1 < south_in);
    assert!(box_interval(&log, 3).1 < south_in);
    assert!(min_speed(&log, 1) < 1.0);
}

#[test]
fn straight_vehicle_passes_without_yielding() {
    let log = run_script(turn_demo_script(Intention::Straight));
    assert_eq!(log.collisions(), 0);
    assert!(min_speed(&log, 1) > 0.9 * 8.0);
    assert!(box_interval(&log, 1).0 < box_interval(&log, 3).0);
    // the minor-road right turner merges behind it
    assert!(box_interval(&log, 1).1 < box_interval(&log, 4).0);
}

#[test]
fn follower_keeps_minimum_headway() {
    let ecfg = ExpertConfig::default();
    let log = run_script(vec![
        spec(Arm::West, Intention::Straight, 30.0, 3.0),
        spec(Arm::West, Intention::Straight, 48.0, 8.0),
    ]);
    assert_eq!(log.collisions(), 0);
    let gap = log
        .ticks
        .iter()
        .filter(|t| t.vehicles.len() == 2)
        .map(|t| (t.vehicles[0].x - t.vehicles[1].x).hypot(t.vehicles[0].y - t.vehicles[1].y))
        .fold(f64::INFINITY, f64::min);
    assert!(gap >= ecfg.headway_min - 0.5, "min gap {gap}");
}

