//! Simulated vehicles, stepping and collision detection.

use std::collections::BTreeSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::map::{route_index, IntersectionMap, Route};
use super::scenario::Scenario;
use crate::arm::Arm;
use crate::bicycle::{ControlCommand, DynamicVehicle, VehicleLimits};
use crate::error::Result;
use crate::scene::{Intention, Scene, VehicleSnapshot};

#[derive(Debug, Clone, PartialEq)]
pub struct SimVehicle {
    pub id: u64,
    pub entry: Arm,
    pub intention: Intention,
    pub route: usize,
    pub state: DynamicVehicle,
    /// Progress along the route (closest-point arc length).
    pub s: f64,
    pub lateral: f64,
    /// Holds the right to cross its conflict zones.
    pub committed: bool,
    /// Has left every conflict zone.
    pub cleared: bool,
    pub alive: bool,
    pub despawn_tick: Option<u64>,
}

impl SimVehicle {
    pub fn position(&self) -> [f64; 2] {
        [self.state.x, self.state.y]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CollisionKind {
    V2v,
    V2b,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CollisionEvent {
    pub kind: CollisionKind,
    pub tick: u64,
    pub participants: Vec<u64>,
}

/// Counts one event per contiguous contact interval.
#[derive(Debug, Clone, Default)]
pub struct CollisionDetector {
    pairs: BTreeSet<(u64, u64)>,
    barrier: BTreeSet<u64>,
}

impl CollisionDetector {
    pub fn new() -> Self {
        Self::default()
    }

    /// `poses` are `(id, position)` of the vehicles present this tick.
    pub fn detect(&mut self, tick: u64, poses: &[(u64, [f64; 2])], map: &IntersectionMap) -> Vec<CollisionEvent> {
        let r = map.config.vehicle_radius;
        let mut events = Vec::new();
        let mut pairs = BTreeSet::new();
        for (i, (a, pa)) in poses.iter().enumerate() {
            for (b, pb) in &poses[i + 1..] {
                if (pa[0] - pb[0]).hypot(pa[1] - pb[1]) < 2.0 * r {
                    let key = (*a.min(b), *a.max(b));
                    if !self.pairs.contains(&key) {
                        events.push(CollisionEvent {
                            kind: CollisionKind::V2v,
                            tick,
                            participants: vec![key.0, key.1],
                        });
                    }
                    pairs.insert(key);
                }
            }
        }
        let mut barrier = BTreeSet::new();
        for (id, p) in poses {
            if map.barrier_distance(*p) < r {
                if !self.barrier.contains(id) {
                    events.push(CollisionEvent {
                        kind: CollisionKind::V2b,
                        tick,
                        participants: vec![*id],
                    });
                }
                barrier.insert(*id);
            }
        }
        self.pairs = pairs;
        self.barrier = barrier;
        events
    }
}

#[derive(Debug, Clone)]
pub struct World {
    pub map: Arc<IntersectionMap>,
    pub vehicles: Vec<SimVehicle>,
    pub tick: u64,
    pub dt: f64,
    pub limits: VehicleLimits,
}

impl World {
    pub fn new(map: Arc<IntersectionMap>, scenario: &Scenario, dt: f64, limits: VehicleLimits) -> World {
        let vehicles = scenario
            .vehicles
            .iter()
            .map(|sp| {
                let ri = route_index(sp.arm, sp.intention);
                let route = map.route_by_index(ri);
                let s = route.s_at_entry_distance(sp.distance);
                let p = route.point_at(s);
                SimVehicle {
                    id: sp.id,
                    entry: sp.arm,
                    intention: sp.intention,
                    route: ri,
                    state: DynamicVehicle::new(p.position[0], p.position[1], p.heading, sp.speed, limits.wheelbase),
                    s,
                    lateral: 0.0,
                    committed: false,
                    cleared: false,
                    alive: true,
                    despawn_tick: None,
                }
            })
            .collect();
        World {
            map,
            vehicles,
            tick: 0,
            dt,
            limits,
        }
    }

    pub fn route_of(&self, v: &SimVehicle) -> &Route {
        self.map.route_by_index(v.route)
    }

    pub fn alive(&self) -> impl Iterator<Item = &SimVehicle> {
        self.vehicles.iter().filter(|v| v.alive)
    }

    pub fn n_alive(&self) -> usize {
        self.alive().count()
    }

    /// Current poses and intentions of the living vehicles, ordered by id.
    pub fn scene(&self) -> Result<Scene> {
        let mut v: Vec<VehicleSnapshot> = self
            .alive()
            .map(|v| VehicleSnapshot::new(v.id, v.position(), v.state.theta, v.intention))
            .collect();
        v.sort_by_key(|s| s.id);
        Scene::new(v, None)
    }

    /// Applies one command per vehicle (ignored for despawned vehicles) and
    /// advances time by one tick.
    pub fn step(&mut self, commands: &[ControlCommand]) {
        let dt = self.dt;
        let vmax = self.limits.max_speed;
        for (v, u) in self.vehicles.iter_mut().zip(commands) {
            if !v.alive {
                continue;
            }
            v.state = v.state.step(u.clamped(&self.limits), dt, vmax);
        }
        for i in 0..self.vehicles.len() {
            if !self.vehicles[i].alive {
                continue;
            }
            let v = &self.vehicles[i];
            let route = self.map.route_by_index(v.route);
            let hint = v.s + v.state.v * dt;
            let rp = route.project(v.position(), Some(hint));
            let v = &mut self.vehicles[i];
            v.s = rp.s;
            v.lateral = rp.lateral;
        }
        self.tick += 1;
    }

    pub fn poses(&self) -> Vec<(u64, [f64; 2])> {
        self.alive().map(|v| (v.id, v.position())).collect()
    }

    /// Marks vehicles as despawned when `done` holds; returns their ids.
    pub fn despawn_where(&mut self, mut done: impl FnMut(&Route, &SimVehicle) -> bool) -> Vec<u64> {
        let mut out = Vec::new();
        let tick = self.tick;
        let map = self.map.clone();
        for v in self.vehicles.iter_mut().filter(|v| v.alive) {
            if done(map.route_by_index(v.route), v) {
                v.alive = false;
                v.despawn_tick = Some(tick);
                out.push(v.id);
            }
        }
        out
    }
}
