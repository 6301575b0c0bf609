//! Rule-based driver used to generate demonstrations.
//!
//! Longitudinal control is IDM against the nearest in-path vehicle and, for
//! a vehicle that has not been granted passage yet, a virtual obstacle at
//! its stop line. Passage through the conflict zones is granted one vehicle
//! at a time: a vehicle commits only if no conflicting vehicle is committed
//! and every conflicting vehicle with right of way is far enough away.

use serde::{Deserialize, Serialize};

use super::map::Route;
use super::world::{SimVehicle, World};
use crate::bicycle::ControlCommand;
use crate::error::{Error, Result};
use crate::scene::wrap_angle;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExpertConfig {
    pub cruise_speed: f64,
    /// IDM maximum acceleration.
    pub accel: f64,
    /// IDM comfortable deceleration.
    pub comfort_decel: f64,
    pub time_headway: f64,
    /// IDM jam distance added on top of `headway_min`.
    pub min_gap: f64,
    /// Minimum centre-to-centre distance to an in-path vehicle.
    pub headway_min: f64,
    pub lateral_accel: f64,
    /// A vehicle enters only if every conflicting vehicle with right of way
    /// needs more than this many seconds to reach the conflict.
    pub yield_window: f64,
    /// Additional slack over the time this vehicle needs to clear the zone.
    pub clear_margin: f64,
    /// Extra distance, beyond the braking distance, at which a vehicle asks
    /// for passage.
    pub decision_margin: f64,
    /// Lateral distance within which another vehicle counts as in-path.
    pub in_path_width: f64,
    pub lookahead: f64,
    pub k_lateral: f64,
    pub k_heading: f64,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        Self {
            cruise_speed: 8.0,
            accel: 1.5,
            comfort_decel: 2.0,
            time_headway: 1.2,
            min_gap: 1.5,
            headway_min: 8.0,
            lateral_accel: 2.0,
            yield_window: 4.0,
            clear_margin: 1.5,
            decision_margin: 5.0,
            in_path_width: 2.0,
            lookahead: 60.0,
            k_lateral: 0.1,
            k_heading: 0.6,
        }
    }
}

impl ExpertConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = [
            self.cruise_speed,
            self.accel,
            self.comfort_decel,
            self.time_headway,
            self.headway_min,
            self.lateral_accel,
            self.in_path_width,
            self.lookahead,
        ];
        if pos.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::Config("expert speeds, gains and distances must be > 0".into()));
        }
        if [self.min_gap, self.yield_window, self.clear_margin, self.decision_margin, self.k_lateral, self.k_heading]
            .iter()
            .any(|v| !(*v >= 0.0))
        {
            return Err(Error::Config("expert margins and gains must be >= 0".into()));
        }
        Ok(())
    }

    pub fn turn_speed(&self, route: &Route) -> f64 {
        (self.lateral_accel * route.turn_radius).sqrt().min(self.cruise_speed)
    }

    /// Speed limit at arc length `s`: cruise, the turn speed inside the arc
    /// and a comfortable braking envelope before it.
    pub fn speed_limit(&self, route: &Route, s: f64) -> f64 {
        if !route.turn_radius.is_finite() {
            return self.cruise_speed;
        }
        let vt = self.turn_speed(route);
        if s < route.box_in_s {
            (vt * vt + 2.0 * self.comfort_decel * (route.box_in_s - s)).sqrt().min(self.cruise_speed)
        } else if s <= route.box_out_s {
            vt
        } else {
            self.cruise_speed
        }
    }

    fn idm(&self, v: f64, v0: f64, obstacle: Option<(f64, f64)>) -> f64 {
        let free = 1.0 - (v / v0.max(0.1)).powi(4);
        match obstacle {
            None => self.accel * free,
            Some((gap, dv)) => {
                if gap <= 1e-3 {
                    return f64::NEG_INFINITY;
                }
                let dyn_gap = v * self.time_headway + v * dv / (2.0 * (self.accel * self.comfort_decel).sqrt());
                let star = self.min_gap + dyn_gap.max(0.0);
                self.accel * (free - (star / gap).powi(2))
            }
        }
    }
}

/// Time to cover `d` metres starting at `v`, accelerating at `a` up to `vmax`.
fn time_to_cover(d: f64, v: f64, a: f64, vmax: f64) -> f64 {
    if d <= 0.0 {
        return 0.0;
    }
    let vmax = vmax.max(v).max(0.1);
    let t_acc = (vmax - v) / a;
    let d_acc = v * t_acc + 0.5 * a * t_acc * t_acc;
    if d <= d_acc {
        (-v + (v * v + 2.0 * a * d).sqrt()) / a
    } else {
        t_acc + (d - d_acc) / vmax
    }
}

struct InPath {
    s: f64,
    speed_along: f64,
}

fn in_path(world: &World, me: &SimVehicle, cfg: &ExpertConfig) -> Vec<InPath> {
    let route = world.route_of(me);
    world
        .alive()
        .filter(|q| q.id != me.id)
        .filter_map(|q| {
            let d = (q.state.x - me.state.x).hypot(q.state.y - me.state.y);
            if d > cfg.lookahead {
                return None;
            }
            let rp = route.project(q.position(), Some(me.s + d));
            let ahead = rp.s - me.s;
            (rp.lateral.abs() < cfg.in_path_width && ahead > 1e-6 && ahead < cfg.lookahead).then(|| InPath {
                s: rp.s,
                speed_along: q.state.v * (q.state.theta - rp.heading).cos(),
            })
        })
        .collect()
}

/// One command per vehicle (zero for despawned ones). Updates the passage
/// flags of the vehicles, processing them in index order.
pub fn expert_step(world: &mut World, cfg: &ExpertConfig) -> Vec<ControlCommand> {
    let mut out = vec![ControlCommand::ZERO; world.vehicles.len()];
    for i in 0..world.vehicles.len() {
        if !world.vehicles[i].alive {
            continue;
        }
        let (cmd, committed, cleared) = decide(world, i, cfg);
        let v = &mut world.vehicles[i];
        v.committed = committed;
        v.cleared = cleared;
        out[i] = cmd;
    }
    out
}

fn decide(world: &World, i: usize, cfg: &ExpertConfig) -> (ControlCommand, bool, bool) {
    let me = &world.vehicles[i];
    let map = &world.map;
    let route = world.route_of(me);
    let v = me.state.v;
    let v0 = cfg.speed_limit(route, me.s);

    let window_end = route.box_out_s + (route.box_in_s - route.stop_line_s);
    let mut committed = me.committed;
    let mut cleared = me.cleared;
    if !cleared && me.s > window_end {
        cleared = true;
        committed = false;
    }

    let ahead = in_path(world, me, cfg);
    let mut obstacles: Vec<(f64, f64)> = ahead
        .iter()
        .map(|o| (o.s - me.s - cfg.headway_min, v - o.speed_along))
        .collect();

    if !committed && !cleared {
        // conflicts still ahead of both vehicles
        let relevant: Vec<(&SimVehicle, f64, f64, f64)> = world
            .alive()
            .filter(|q| q.id != me.id)
            .filter_map(|q| {
                let zm = map.conflict(me.route, q.route)?;
                let zq = map.conflict(q.route, me.route)?;
                (me.s <= zm.s_out && q.s <= zq.s_out).then_some((q, zm.s_out, zq.s_in, zq.s_out))
            })
            .collect();
        if !relevant.is_empty() {
            let d_stop = route.stop_line_s - me.s;
            let deciding = d_stop <= v * v / (2.0 * cfg.comfort_decel) + cfg.decision_margin;
            if d_stop < -0.5 {
                committed = true;
            } else if deciding {
                let blocked_by_leader = ahead.iter().any(|o| o.s < route.stop_line_s + 1.0);
                let mine = map.precedence(me.entry, me.intention);
                let vcap = if route.turn_radius.is_finite() {
                    cfg.turn_speed(route)
                } else {
                    cfg.cruise_speed
                };
                let allowed = !blocked_by_leader
                    && relevant.iter().all(|&(q, my_out, q_in, _)| {
                        if q.committed {
                            return false;
                        }
                        if map.precedence(q.entry, q.intention) < mine {
                            return true;
                        }
                        let ttc = (q_in - q.s).max(0.0) / q.state.v.max(1.0);
                        let t_clear = time_to_cover(my_out - me.s, v, cfg.accel, vcap);
                        ttc >= cfg.yield_window.max(t_clear + cfg.clear_margin)
                    });
                committed = allowed;
            }
            if !committed && deciding {
                obstacles.push((route.stop_line_s + cfg.min_gap - me.s, v));
            }
        }
    }

    let mut accel = if obstacles.is_empty() {
        cfg.idm(v, v0, None)
    } else {
        obstacles
            .iter()
            .map(|&o| cfg.idm(v, v0, Some(o)))
            .fold(f64::INFINITY, f64::min)
    };
    let lim = &world.limits;
    accel = accel.clamp(-lim.max_accel, lim.max_accel);

    let rp = route.point_at(me.s);
    let preview = route.point_at(me.s + v * world.dt);
    let e_theta = wrap_angle(me.state.theta - rp.heading);
    let kappa = preview.curvature - cfg.k_lateral * me.lateral - cfg.k_heading * e_theta;
    let steer = (lim.wheelbase * kappa).atan();
    (ControlCommand { accel, steer }.clamped(lim), committed, cleared)
}
