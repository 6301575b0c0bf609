//! Four-way intersection geometry: lanes, turn arcs, barriers and the
//! pairwise conflict zones of all routes.

use std::f64::consts::{FRAC_PI_2, PI};

use serde::{Deserialize, Serialize};

use crate::arm::Arm;
use crate::error::{Error, Result};
use crate::scene::{wrap_angle, Intention, Vec2};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PriorityAxis {
    Vertical,
    Horizontal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MapConfig {
    /// Distance from the centre to the end of each arm (and of the barriers).
    pub arm_half_length: f64,
    pub lane_width: f64,
    /// Stop line distance from the centre.
    pub stop_line: f64,
    /// Half-size of the square in which turns happen.
    pub turn_box_half: f64,
    pub priority: PriorityAxis,
    /// Segments per curb arc in the barrier polylines.
    pub curb_segments: usize,
    /// Routes extend this far from the centre along the exit arm.
    pub route_exit_length: f64,
    /// Vehicle disc radius.
    pub vehicle_radius: f64,
    /// Extra clearance added to two disc radii when deciding whether two
    /// routes conflict.
    pub conflict_margin: f64,
}

impl Default for MapConfig {
    fn default() -> Self {
        Self {
            arm_half_length: 60.0,
            lane_width: 3.5,
            stop_line: 10.0,
            turn_box_half: 8.0,
            priority: PriorityAxis::Vertical,
            curb_segments: 16,
            route_exit_length: 100.0,
            vehicle_radius: 0.9,
            conflict_margin: 0.5,
        }
    }
}

impl MapConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("map: {m}")));
        if !(self.lane_width > 0.0 && self.vehicle_radius > 0.0) {
            return bad("lane_width and vehicle_radius must be > 0");
        }
        if !(self.turn_box_half > self.lane_width) {
            return bad("turn_box_half must exceed lane_width");
        }
        if !(self.stop_line >= self.turn_box_half) {
            return bad("stop_line must not lie inside the turn box");
        }
        if !(self.stop_line < self.arm_half_length) {
            return bad("stop_line must be smaller than arm_half_length");
        }
        if !(self.route_exit_length >= self.arm_half_length) {
            return bad("route_exit_length must be >= arm_half_length");
        }
        if self.curb_segments == 0 || !(self.conflict_margin >= 0.0) {
            return bad("curb_segments must be >= 1 and conflict_margin >= 0");
        }
        Ok(())
    }
}

fn right_normal(d: Vec2) -> Vec2 {
    [d[1], -d[0]]
}

fn add(a: Vec2, b: Vec2, k: f64) -> Vec2 {
    [a[0] + k * b[0], a[1] + k * b[1]]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Segment {
    Line { start: Vec2, dir: Vec2, len: f64 },
    /// `turn` is +1 for counter-clockwise (left), -1 for clockwise.
    Arc { centre: Vec2, radius: f64, phi0: f64, heading0: f64, turn: f64, len: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoutePoint {
    pub s: f64,
    pub position: Vec2,
    pub heading: f64,
    pub curvature: f64,
    /// Signed lateral offset of the projected point, positive to the left.
    pub lateral: f64,
}

impl Segment {
    pub fn len(&self) -> f64 {
        match *self {
            Segment::Line { len, .. } | Segment::Arc { len, .. } => len,
        }
    }

    fn at(&self, s: f64) -> (Vec2, f64, f64) {
        match *self {
            Segment::Line { start, dir, .. } => (add(start, dir, s), dir[1].atan2(dir[0]), 0.0),
            Segment::Arc { centre, radius, phi0, heading0, turn, .. } => {
                let phi = phi0 + turn * s / radius;
                (
                    [centre[0] + radius * phi.cos(), centre[1] + radius * phi.sin()],
                    wrap_angle(heading0 + turn * s / radius),
                    turn / radius,
                )
            }
        }
    }

    /// Closest point on the segment: `(s, lateral, distance)`.
    fn project(&self, p: Vec2) -> (f64, f64, f64) {
        match *self {
            Segment::Line { start, dir, len } => {
                let v = [p[0] - start[0], p[1] - start[1]];
                let along = v[0] * dir[0] + v[1] * dir[1];
                let lat = dir[0] * v[1] - dir[1] * v[0];
                let s = along.clamp(0.0, len);
                let d = if along < 0.0 {
                    v[0].hypot(v[1])
                } else if along > len {
                    (along - len).hypot(lat)
                } else {
                    lat.abs()
                };
                (s, lat, d)
            }
            Segment::Arc { centre, radius, phi0, turn, len, .. } => {
                let v = [p[0] - centre[0], p[1] - centre[1]];
                let r = v[0].hypot(v[1]);
                let dphi = wrap_angle(turn * (v[1].atan2(v[0]) - phi0));
                let s = (dphi * radius).clamp(0.0, len);
                let lat = turn * (radius - r);
                let (q, _, _) = self.at(s);
                (s, lat, (p[0] - q[0]).hypot(p[1] - q[1]))
            }
        }
    }
}

/// Path of one (entry, intention) pair from the far end of the entry arm
/// to `route_exit_length` along the exit arm.
#[derive(Debug, Clone, PartialEq)]
pub struct Route {
    pub entry: Arm,
    pub intention: Intention,
    pub exit: Arm,
    segments: Vec<Segment>,
    starts: Vec<f64>,
    length: f64,
    pub stop_line_s: f64,
    pub box_in_s: f64,
    pub box_out_s: f64,
    /// Distance from the centre of the route start on the entry arm.
    pub start_distance: f64,
    /// Speed-relevant turn radius; infinite for straight routes.
    pub turn_radius: f64,
}

impl Route {
    pub fn new(cfg: &MapConfig, entry: Arm, intention: Intention) -> Route {
        let exit = entry.exit_for(intention);
        let d = entry.inbound();
        let o = exit.outbound();
        let half = cfg.lane_width / 2.0;
        let b = cfg.turn_box_half;
        let start_r = cfg.arm_half_length;

        let start = add(add([0.0, 0.0], entry.outbound(), start_r), right_normal(d), half);
        let box_in = add(add([0.0, 0.0], entry.outbound(), b), right_normal(d), half);
        let box_out = add(add([0.0, 0.0], o, b), right_normal(o), half);

        let mut segments = vec![Segment::Line {
            start,
            dir: d,
            len: start_r - b,
        }];
        let heading0 = d[1].atan2(d[0]);
        let turn_radius = match intention {
            Intention::Straight => {
                segments.push(Segment::Line {
                    start: box_in,
                    dir: d,
                    len: 2.0 * b,
                });
                f64::INFINITY
            }
            Intention::Right | Intention::Left => {
                let (radius, turn) = if intention == Intention::Right {
                    (b - half, -1.0)
                } else {
                    (b + half, 1.0)
                };
                // centre lies on the turning side of the entry lane
                let centre = add(box_in, right_normal(d), -turn * radius);
                segments.push(Segment::Arc {
                    centre,
                    radius,
                    phi0: (box_in[1] - centre[1]).atan2(box_in[0] - centre[0]),
                    heading0,
                    turn,
                    len: radius * FRAC_PI_2,
                });
                radius
            }
        };
        segments.push(Segment::Line {
            start: box_out,
            dir: o,
            len: cfg.route_exit_length - b,
        });
        let mut starts = Vec::with_capacity(segments.len());
        let mut acc = 0.0;
        for s in &segments {
            starts.push(acc);
            acc += s.len();
        }
        let box_in_s = starts[1];
        let box_out_s = starts[2];
        Route {
            entry,
            intention,
            exit,
            segments,
            starts,
            length: acc,
            stop_line_s: start_r - cfg.stop_line,
            box_in_s,
            box_out_s,
            start_distance: start_r,
            turn_radius,
        }
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    fn locate(&self, s: f64) -> (usize, f64) {
        let s = s.clamp(0.0, self.length);
        let i = match self.starts.iter().rposition(|&st| st <= s) {
            Some(i) => i,
            None => 0,
        };
        (i, s - self.starts[i])
    }

    pub fn point_at(&self, s: f64) -> RoutePoint {
        let (i, local) = self.locate(s);
        let (position, heading, curvature) = self.segments[i].at(local);
        RoutePoint {
            s: s.clamp(0.0, self.length),
            position,
            heading,
            curvature,
            lateral: 0.0,
        }
    }

    /// Arc length at which the vehicle is `distance` metres from the centre
    /// on its entry arm.
    pub fn s_at_entry_distance(&self, distance: f64) -> f64 {
        self.start_distance - distance
    }

    /// Distance from the centre along the exit arm, or `None` before the
    /// vehicle has left the turn box.
    pub fn exit_distance(&self, s: f64) -> Option<f64> {
        (s > self.box_out_s).then(|| s - self.box_out_s + (self.start_distance - self.box_in_s))
    }

    /// Closest route point to `p`. Ties between segments go to the one whose
    /// arc length is nearest to `hint`.
    pub fn project(&self, p: Vec2, hint: Option<f64>) -> RoutePoint {
        let mut best: Option<(f64, f64, f64)> = None;
        for (i, seg) in self.segments.iter().enumerate() {
            let (local, lat, d) = seg.project(p);
            let s = self.starts[i] + local;
            let better = match best {
                None => true,
                Some((bs, _, bd)) => {
                    if (d - bd).abs() < 1e-9 {
                        match hint {
                            Some(h) => (s - h).abs() < (bs - h).abs(),
                            None => false,
                        }
                    } else {
                        d < bd
                    }
                }
            };
            if better {
                best = Some((s, lat, d));
            }
        }
        let (s, lat, _) = best.expect("routes have segments");
        let mut rp = self.point_at(s);
        rp.lateral = lat;
        rp
    }

    /// Points every `step` metres over `[from, to]`.
    pub fn sample(&self, from: f64, to: f64, step: f64) -> Vec<(f64, Vec2)> {
        let n = ((to - from) / step).ceil().max(0.0) as usize;
        (0..=n)
            .map(|k| {
                let s = (from + k as f64 * step).min(to);
                (s, self.point_at(s).position)
            })
            .collect()
    }
}

/// Arc-length interval in which a route is too close to another route.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Zone {
    pub s_in: f64,
    pub s_out: f64,
}

pub fn route_index(entry: Arm, intention: Intention) -> usize {
    entry.index() * 3 + intention.index()
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntersectionMap {
    pub config: MapConfig,
    routes: Vec<Route>,
    /// `conflicts[a][b]` is the zone on route `a` shared with route `b`.
    conflicts: Vec<Vec<Option<Zone>>>,
    barriers: Vec<Vec<Vec2>>,
}

impl IntersectionMap {
    pub fn new(config: MapConfig) -> Result<Self> {
        config.validate()?;
        let mut routes = Vec::with_capacity(12);
        for arm in Arm::ALL {
            for i in Intention::ORDER {
                routes.push(Route::new(&config, arm, i));
            }
        }
        let clearance = 2.0 * config.vehicle_radius + config.conflict_margin;
        let window = |r: &Route| (r.stop_line_s, r.box_out_s + (r.box_in_s - r.stop_line_s));
        let samples: Vec<Vec<(f64, Vec2)>> = routes
            .iter()
            .map(|r| {
                let (a, b) = window(r);
                r.sample(a, b, 0.2)
            })
            .collect();
        let mut conflicts = vec![vec![None; routes.len()]; routes.len()];
        for a in 0..routes.len() {
            for b in 0..routes.len() {
                if routes[a].entry == routes[b].entry {
                    continue;
                }
                let close: Vec<f64> = samples[a]
                    .iter()
                    .filter(|(_, p)| samples[b].iter().any(|(_, q)| (p[0] - q[0]).hypot(p[1] - q[1]) < clearance))
                    .map(|(s, _)| *s)
                    .collect();
                if let (Some(&s_in), Some(&s_out)) = (close.first(), close.last()) {
                    conflicts[a][b] = Some(Zone { s_in, s_out });
                }
            }
        }
        let barriers = build_barriers(&config);
        Ok(Self {
            config,
            routes,
            conflicts,
            barriers,
        })
    }

    pub fn route(&self, entry: Arm, intention: Intention) -> &Route {
        &self.routes[route_index(entry, intention)]
    }

    pub fn route_by_index(&self, i: usize) -> &Route {
        &self.routes[i]
    }

    pub fn routes(&self) -> &[Route] {
        &self.routes
    }

    /// Zone on route `a` where it conflicts with route `b`.
    pub fn conflict(&self, a: usize, b: usize) -> Option<Zone> {
        self.conflicts[a][b]
    }

    pub fn barriers(&self) -> &[Vec<Vec2>] {
        &self.barriers
    }

    pub fn is_priority(&self, arm: Arm) -> bool {
        match self.config.priority {
            PriorityAxis::Vertical => arm.is_vertical(),
            PriorityAxis::Horizontal => !arm.is_vertical(),
        }
    }

    /// Right-of-way order: a route yields to every conflicting route with a
    /// larger key.
    pub fn precedence(&self, entry: Arm, intention: Intention) -> (u8, u8) {
        let rank = 2 * u8::from(self.is_priority(entry)) + u8::from(intention != Intention::Left);
        // ties never conflict geometrically; the arm index keeps the order total
        (rank, 3 - entry.index() as u8)
    }

    /// Smallest distance from `p` to any barrier polyline.
    pub fn barrier_distance(&self, p: Vec2) -> f64 {
        self.barriers
            .iter()
            .flat_map(|b| b.windows(2))
            .map(|w| point_segment_distance(p, w[0], w[1]))
            .fold(f64::INFINITY, f64::min)
    }
}

pub fn point_segment_distance(p: Vec2, a: Vec2, b: Vec2) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let ap = [p[0] - a[0], p[1] - a[1]];
    let l2 = ab[0] * ab[0] + ab[1] * ab[1];
    let t = if l2 > 0.0 {
        ((ap[0] * ab[0] + ap[1] * ab[1]) / l2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (p[0] - (a[0] + t * ab[0])).hypot(p[1] - (a[1] + t * ab[1]))
}

/// One curb polyline per quadrant: along the road edge of one arm, around
/// the corner arc, and out along the next arm.
fn build_barriers(cfg: &MapConfig) -> Vec<Vec<Vec2>> {
    let hw = cfg.lane_width;
    let b = cfg.turn_box_half;
    let l = cfg.arm_half_length;
    let r = b - hw;
    let mut out = Vec::with_capacity(4);
    for (sx, sy) in [(1.0, 1.0), (-1.0, 1.0), (-1.0, -1.0), (1.0, -1.0)] {
        let c = [sx * b, sy * b];
        let a0 = if sx > 0.0 { PI } else { 0.0 };
        let a1 = if sy > 0.0 { -FRAC_PI_2 } else { FRAC_PI_2 };
        let mut sweep = wrap_angle(a1 - a0);
        if sweep.abs() < 1e-12 {
            sweep = FRAC_PI_2;
        }
        let mut poly = vec![[sx * hw, sy * l]];
        for k in 0..=cfg.curb_segments {
            let phi = a0 + sweep * k as f64 / cfg.curb_segments as f64;
            poly.push([c[0] + r * phi.cos(), c[1] + r * phi.sin()]);
        }
        poly.push([sx * l, sy * hw]);
        out.push(poly);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map() -> IntersectionMap {
        IntersectionMap::new(MapConfig::default()).unwrap()
    }

    #[test]
    fn right_hand_lanes() {
        let m = map();
        let south = m.route(Arm::South, Intention::Straight);
        let p = south.point_at(0.0);
        assert!((p.position[0] - 1.75).abs() < 1e-12 && (p.position[1] + 60.0).abs() < 1e-12);
        assert!((p.heading - FRAC_PI_2).abs() < 1e-12);
        let east = m.route(Arm::East, Intention::Straight);
        assert!((east.point_at(0.0).position[1] - 1.75).abs() < 1e-12);
    }

    #[test]
    fn turns_are_tangent_arcs() {
        let m = map();
        for r in m.routes() {
            for s in [r.box_in_s, r.box_out_s] {
                let a = r.point_at(s - 1e-9);
                let b = r.point_at(s + 1e-9);
                assert!((a.position[0] - b.position[0]).hypot(a.position[1] - b.position[1]) < 1e-6);
                assert!(wrap_angle(a.heading - b.heading).abs() < 1e-6);
            }
            let end = r.point_at(r.length());
            let o = r.exit.outbound();
            let along = end.position[0] * o[0] + end.position[1] * o[1];
            assert!((along - m.config.route_exit_length).abs() < 1e-9);
        }
        let left = m.route(Arm::South, Intention::Left);
        assert!((left.turn_radius - 9.75).abs() < 1e-12);
        let right = m.route(Arm::South, Intention::Right);
        assert!((right.turn_radius - 6.25).abs() < 1e-12);
    }

    #[test]
    fn projection_recovers_arc_length_and_offset() {
        let m = map();
        for r in m.routes() {
            for k in 1..40 {
                let s = r.length() * k as f64 / 40.0;
                let p = r.point_at(s);
                let left = [-p.heading.sin(), p.heading.cos()];
                let q = add(p.position, left, 0.3);
                let pr = r.project(q, Some(s));
                assert!((pr.s - s).abs() < 1e-6, "{:?} {s} {}", r.entry, pr.s);
                assert!((pr.lateral - 0.3).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn lanes_clear_the_barriers() {
        let m = map();
        for r in m.routes() {
            for (_, p) in r.sample(0.0, r.length(), 0.25) {
                if p[0].abs().max(p[1].abs()) > m.config.arm_half_length {
                    continue;
                }
                assert!(m.barrier_distance(p) > m.config.vehicle_radius + 0.5, "{:?} {:?} at {p:?}", r.entry, r.intention);
            }
        }
    }

    #[test]
    fn conflict_structure() {
        let m = map();
        let idx = route_index;
        // opposite straights never meet
        assert!(m.conflict(idx(Arm::South, Intention::Straight), idx(Arm::North, Intention::Straight)).is_none());
        // left turn crosses oncoming straight
        assert!(m.conflict(idx(Arm::South, Intention::Left), idx(Arm::North, Intention::Straight)).is_some());
        // crossing straights conflict
        assert!(m.conflict(idx(Arm::South, Intention::Straight), idx(Arm::East, Intention::Straight)).is_some());
        // merging into the same exit lane conflicts
        assert!(m.conflict(idx(Arm::East, Intention::Right), idx(Arm::South, Intention::Straight)).is_some());
        // a right turn from the east is no hindrance to a left turn from the south
        assert!(m.conflict(idx(Arm::South, Intention::Left), idx(Arm::East, Intention::Right)).is_none());
        for a in 0..12 {
            for b in 0..12 {
                assert_eq!(m.conflict(a, b).is_some(), m.conflict(b, a).is_some());
                if let Some(z) = m.conflict(a, b) {
                    assert!(z.s_in > m.route_by_index(a).stop_line_s, "zone starts before the stop line");
                }
            }
        }
    }

    #[test]
    fn conflicting_routes_have_distinct_precedence() {
        let m = map();
        for a in m.routes() {
            for b in m.routes() {
                let ia = route_index(a.entry, a.intention);
                let ib = route_index(b.entry, b.intention);
                if m.conflict(ia, ib).is_some() {
                    assert_ne!(m.precedence(a.entry, a.intention), m.precedence(b.entry, b.intention));
                }
            }
        }
        assert!(m.precedence(Arm::South, Intention::Left) < m.precedence(Arm::North, Intention::Straight));
        assert!(m.precedence(Arm::East, Intention::Right) < m.precedence(Arm::South, Intention::Straight));
    }

    #[test]
    fn bad_config() {
        let cfg = MapConfig {
            stop_line: 70.0,
            ..MapConfig::default()
        };
        assert!(IntersectionMap::new(cfg).is_err());
    }
}
