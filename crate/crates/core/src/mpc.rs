//! Direct-shooting MPC over the bicycle model.
//!
//! The decision vector is the flattened `(a, δ)` sequence. Each iteration
//! builds a central-difference Jacobian of the tracking residuals, takes a
//! damped Gauss-Newton step, projects onto the actuator box and backtracks
//! until the cost decreases.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::bicycle::{ControlCommand, DynamicVehicle, VehicleLimits};
use crate::error::{Error, Result};
use crate::scene::{wrap_angle, Vec2};

/// Reference waypoint `(x, y, θ)`.
pub type Pose = [f64; 3];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MpcConfig {
    /// Number of control points taken from a prediction.
    pub horizon: usize,
    pub max_iters: usize,
    pub fd_eps: f64,
    /// Euler substeps per control interval.
    pub substeps: usize,
    /// Optional quadratic penalty on the controls. Zero reproduces the pure
    /// tracking cost.
    pub control_weight: f64,
    pub limits: VehicleLimits,
}

impl Default for MpcConfig {
    fn default() -> Self {
        Self {
            horizon: 10,
            max_iters: 200,
            fd_eps: 1e-6,
            substeps: 1,
            control_weight: 0.0,
            limits: VehicleLimits::default(),
        }
    }
}

impl MpcConfig {
    pub fn validate(&self) -> Result<()> {
        let l = &self.limits;
        if self.horizon == 0 || self.max_iters == 0 || self.substeps == 0 {
            return Err(Error::Config("mpc horizon, max_iters and substeps must be >= 1".into()));
        }
        if !(self.fd_eps > 0.0) || !(self.control_weight >= 0.0) {
            return Err(Error::Config("mpc fd_eps must be > 0 and control_weight >= 0".into()));
        }
        if !(l.wheelbase > 0.0 && l.max_accel > 0.0 && l.max_steer > 0.0 && l.max_speed > 0.0) {
            return Err(Error::Config("vehicle limits must be positive".into()));
        }
        if l.max_steer >= std::f64::consts::FRAC_PI_2 {
            return Err(Error::Config("max_steer must be below pi/2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpcProblem {
    pub initial: DynamicVehicle,
    /// One waypoint per control interval.
    pub reference: Vec<Pose>,
    /// Length of a control interval, seconds.
    pub dt: f64,
    /// Penalise only the last waypoint.
    pub terminal_only: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpcSolution {
    pub commands: Vec<ControlCommand>,
    /// State at the end of every control interval.
    pub rollout: Vec<DynamicVehicle>,
    /// State after every Euler substep.
    pub fine_rollout: Vec<DynamicVehicle>,
    pub cost: f64,
    pub zero_control_cost: f64,
    pub iterations: usize,
}

/// Rolls the bicycle model forward, returning interval-end and substep states.
pub fn rollout(
    initial: &DynamicVehicle,
    commands: &[ControlCommand],
    dt: f64,
    substeps: usize,
    limits: &VehicleLimits,
) -> (Vec<DynamicVehicle>, Vec<DynamicVehicle>) {
    let h = dt / substeps as f64;
    let mut s = *initial;
    let mut coarse = Vec::with_capacity(commands.len());
    let mut fine = Vec::with_capacity(commands.len() * substeps);
    for u in commands {
        for _ in 0..substeps {
            s = s.step(*u, h, limits.max_speed);
            fine.push(s);
        }
        coarse.push(s);
    }
    (coarse, fine)
}

/// Reference poses for a list of predicted points. Each heading points to
/// the next point; the last point reuses the previous heading, and
/// near-stationary steps keep the heading that came before.
pub fn reference_from_points(current_heading: f64, current_position: Vec2, points: &[Vec2]) -> Vec<Pose> {
    const MIN_STEP: f64 = 0.05;
    let mut prev = current_heading;
    let mut out = Vec::with_capacity(points.len());
    for i in 0..points.len() {
        let (from, to) = if i + 1 < points.len() {
            (points[i], points[i + 1])
        } else if i == 0 {
            (current_position, points[0])
        } else {
            (points[i], points[i])
        };
        let (dx, dy) = (to[0] - from[0], to[1] - from[1]);
        if dx.hypot(dy) >= MIN_STEP {
            prev = dy.atan2(dx);
        }
        out.push([points[i][0], points[i][1], prev]);
    }
    out
}

struct Shooting<'a> {
    p: &'a MpcProblem,
    cfg: &'a MpcConfig,
    j: usize,
    n_res: usize,
}

impl<'a> Shooting<'a> {
    fn new(p: &'a MpcProblem, cfg: &'a MpcConfig) -> Self {
        let j = p.reference.len();
        let tracked = if p.terminal_only { 1 } else { j };
        let n_res = 3 * tracked + if cfg.control_weight > 0.0 { 2 * j } else { 0 };
        Self { p, cfg, j, n_res }
    }

    fn tracked(&self, i: usize) -> Option<usize> {
        if self.p.terminal_only {
            (i + 1 == self.j).then_some(0)
        } else {
            Some(i)
        }
    }

    fn step_interval(&self, s: DynamicVehicle, u: ControlCommand) -> DynamicVehicle {
        let h = self.p.dt / self.cfg.substeps as f64;
        let mut s = s;
        for _ in 0..self.cfg.substeps {
            s = s.step(u, h, self.cfg.limits.max_speed);
        }
        s
    }

    fn write_state_residual(&self, i: usize, s: &DynamicVehicle, r: &mut [f64]) {
        if let Some(k) = self.tracked(i) {
            let w = self.p.reference[i];
            r[3 * k] = s.x - w[0];
            r[3 * k + 1] = s.y - w[1];
            r[3 * k + 2] = wrap_angle(s.theta - w[2]);
        }
    }

    fn control_offset(&self) -> usize {
        if self.p.terminal_only {
            3
        } else {
            3 * self.j
        }
    }

    /// Residual vector plus the interval-end states.
    fn residuals(&self, u: &[f64], r: &mut [f64], states: &mut Vec<DynamicVehicle>) {
        states.clear();
        let mut s = self.p.initial;
        for i in 0..self.j {
            s = self.step_interval(s, cmd(u, i));
            self.write_state_residual(i, &s, r);
            states.push(s);
        }
        if self.cfg.control_weight > 0.0 {
            let w = self.cfg.control_weight.sqrt();
            let off = self.control_offset();
            for (k, v) in u.iter().enumerate() {
                r[off + k] = w * v;
            }
        }
    }

    /// Residuals after changing only the controls of interval `from` onward,
    /// reusing the cached states before it.
    fn residuals_from(&self, u: &[f64], from: usize, states: &[DynamicVehicle], base: &[f64], r: &mut [f64]) {
        r.copy_from_slice(base);
        let mut s = if from == 0 { self.p.initial } else { states[from - 1] };
        for i in from..self.j {
            s = self.step_interval(s, cmd(u, i));
            self.write_state_residual(i, &s, r);
        }
        if self.cfg.control_weight > 0.0 {
            let w = self.cfg.control_weight.sqrt();
            let off = self.control_offset();
            for k in 2 * from..2 * from + 2 {
                r[off + k] = w * u[k];
            }
        }
    }

    fn jacobian(&self, u: &[f64], states: &[DynamicVehicle], base: &[f64]) -> DMatrix<f64> {
        let m = 2 * self.j;
        let eps = self.cfg.fd_eps;
        let mut jac = DMatrix::zeros(self.n_res, m);
        let mut up = u.to_vec();
        let mut rp = vec![0.0; self.n_res];
        let mut rm = vec![0.0; self.n_res];
        for c in 0..m {
            let orig = up[c];
            up[c] = orig + eps;
            self.residuals_from(&up, c / 2, states, base, &mut rp);
            up[c] = orig - eps;
            self.residuals_from(&up, c / 2, states, base, &mut rm);
            up[c] = orig;
            for r in 0..self.n_res {
                let mut d = rp[r] - rm[r];
                if r < self.control_offset() && r % 3 == 2 {
                    d = wrap_angle(d);
                }
                jac[(r, c)] = d / (2.0 * eps);
            }
        }
        jac
    }

    fn project(&self, u: &mut [f64]) {
        let l = &self.cfg.limits;
        for k in 0..u.len() / 2 {
            u[2 * k] = u[2 * k].clamp(-l.max_accel, l.max_accel);
            u[2 * k + 1] = u[2 * k + 1].clamp(-l.max_steer, l.max_steer);
        }
    }

    fn pinned(&self, u: &[f64], i: usize, g: f64) -> bool {
        let l = &self.cfg.limits;
        let hi = if i % 2 == 0 { l.max_accel } else { l.max_steer };
        let tol = 1e-10;
        (u[i] >= hi - tol && g < 0.0) || (u[i] <= -hi + tol && g > 0.0)
    }

    fn cost_of(&self, u: &[f64]) -> f64 {
        let mut r = vec![0.0; self.n_res];
        let mut st = Vec::with_capacity(self.j);
        self.residuals(u, &mut r, &mut st);
        sq(&r)
    }

    /// Replaces each acceleration by the speed change it actually produced.
    /// Keeps the optimizer out of the flat region where the speed clamp
    /// swallows a braking command.
    fn canonical_accels(&self, u: &[f64], states: &[DynamicVehicle]) -> Vec<f64> {
        let mut out = u.to_vec();
        let mut v0 = self.p.initial.v;
        for (i, s) in states.iter().enumerate() {
            let eff = (s.v - v0) / self.p.dt;
            if (eff - u[2 * i]).abs() > 1e-12 {
                out[2 * i] = eff;
            }
            v0 = s.v;
        }
        self.project(&mut out);
        out
    }
}

fn cmd(u: &[f64], i: usize) -> ControlCommand {
    ControlCommand {
        accel: u[2 * i],
        steer: u[2 * i + 1],
    }
}

fn sq(r: &[f64]) -> f64 {
    r.iter().map(|x| x * x).sum()
}

fn validate_problem(p: &MpcProblem, cfg: &MpcConfig) -> Result<()> {
    cfg.validate()?;
    if p.reference.is_empty() {
        return Err(Error::Config("mpc reference must contain at least one waypoint".into()));
    }
    if !(p.dt > 0.0) {
        return Err(Error::Config("mpc dt must be > 0".into()));
    }
    if p.reference.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Config("mpc reference contains non-finite values".into()));
    }
    let s = &p.initial;
    if ![s.x, s.y, s.theta, s.v].iter().all(|v| v.is_finite()) || !(s.wheelbase > 0.0) {
        return Err(Error::Config("mpc initial state is not finite".into()));
    }
    Ok(())
}

/// Minimises the tracking cost over the control sequence. The search starts
/// from whichever of `warm_start` and the zero sequence is cheaper, so the
/// returned cost never exceeds the zero-control cost.
pub fn solve_mpc(p: &MpcProblem, cfg: &MpcConfig, warm_start: Option<&[ControlCommand]>) -> Result<MpcSolution> {
    validate_problem(p, cfg)?;
    let sh = Shooting::new(p, cfg);
    let m = 2 * sh.j;

    let zero = vec![0.0; m];
    let zero_cost = sh.cost_of(&zero);
    let mut u = zero;
    let mut cost = zero_cost;
    if let Some(w) = warm_start {
        let mut cand: Vec<f64> = (0..sh.j)
            .flat_map(|i| {
                let c = w.get(i).or(w.last()).copied().unwrap_or(ControlCommand::ZERO);
                [c.accel, c.steer]
            })
            .collect();
        sh.project(&mut cand);
        let c = sh.cost_of(&cand);
        if c < cost {
            u = cand;
            cost = c;
        }
    }
    if !cost.is_finite() {
        return Err(Error::MpcDiverged {
            iteration: 0,
            last_cost: cost,
        });
    }

    let mut r = vec![0.0; sh.n_res];
    let mut states = Vec::with_capacity(sh.j);
    let mut trial_r = vec![0.0; sh.n_res];
    let mut trial_states = Vec::with_capacity(sh.j);
    sh.residuals(&u, &mut r, &mut states);

    let mut mu = 1e-4;
    let mut iterations = 0;
    while iterations < cfg.max_iters && cost > 1e-16 {
        iterations += 1;

        let canon = sh.canonical_accels(&u, &states);
        if canon != u {
            sh.residuals(&canon, &mut trial_r, &mut trial_states);
            let c = sq(&trial_r);
            if c <= cost {
                u = canon;
                cost = c;
                std::mem::swap(&mut r, &mut trial_r);
                std::mem::swap(&mut states, &mut trial_states);
            }
        }

        let jac = sh.jacobian(&u, &states, &r);
        let rv = DVector::from_column_slice(&r);
        let g = jac.transpose() * &rv;
        if !g.iter().all(|v| v.is_finite()) {
            return Err(Error::MpcDiverged {
                iteration: iterations,
                last_cost: cost,
            });
        }
        // freeze variables held at a bound by the gradient
        let active: Vec<bool> = (0..m).map(|i| sh.pinned(&u, i, g[i])).collect();
        let free_grad: f64 = (0..m).filter(|&i| !active[i]).map(|i| g[i] * g[i]).sum();
        if free_grad.sqrt() < 1e-9 {
            break;
        }
        let mut jtj = jac.transpose() * &jac;
        let mut rhs = -g.clone();
        for i in (0..m).filter(|&i| active[i]) {
            for k in 0..m {
                jtj[(i, k)] = 0.0;
                jtj[(k, i)] = 0.0;
            }
            jtj[(i, i)] = 1.0;
            rhs[i] = 0.0;
        }
        let scale = jtj.diagonal().max().max(1e-12);

        let mut improved = false;
        let mut converged = false;
        while mu < 1e8 {
            let mut a = jtj.clone();
            for d in 0..m {
                a[(d, d)] += mu * scale;
            }
            let step = match a.cholesky() {
                Some(ch) => ch.solve(&rhs),
                None => {
                    mu *= 10.0;
                    continue;
                }
            };
            let mut alpha = 1.0;
            for _ in 0..10 {
                let mut cand: Vec<f64> = u.iter().zip(step.iter()).map(|(x, d)| x + alpha * d).collect();
                sh.project(&mut cand);
                let pred: f64 = cand.iter().zip(&u).zip(g.iter()).map(|((c, x), gi)| gi * (c - x)).sum();
                sh.residuals(&cand, &mut trial_r, &mut trial_states);
                let c = sq(&trial_r);
                if !c.is_finite() {
                    return Err(Error::MpcDiverged {
                        iteration: iterations,
                        last_cost: cost,
                    });
                }
                if c < cost && c <= cost + 1e-4 * 2.0 * pred {
                    let rel = (cost - c) / cost.max(1e-300);
                    u = cand;
                    cost = c;
                    std::mem::swap(&mut r, &mut trial_r);
                    std::mem::swap(&mut states, &mut trial_states);
                    improved = true;
                    converged = rel < 1e-11;
                    break;
                }
                alpha *= 0.5;
            }
            if improved {
                mu = (mu / 3.0).max(1e-12);
                break;
            }
            mu *= 10.0;
        }
        if !improved || converged {
            break;
        }
    }

    let commands: Vec<ControlCommand> = (0..sh.j).map(|i| cmd(&u, i)).collect();
    let (rollout, fine_rollout) = rollout(&p.initial, &commands, p.dt, cfg.substeps, &cfg.limits);
    Ok(MpcSolution {
        commands,
        rollout,
        fine_rollout,
        cost,
        zero_control_cost: zero_cost,
        iterations,
    })
}

/// Same solver with the cost applied only at the last of `horizon` intervals.
pub fn solve_mpc_to_point(
    initial: &DynamicVehicle,
    endpoint: Pose,
    horizon: usize,
    dt: f64,
    cfg: &MpcConfig,
    warm_start: Option<&[ControlCommand]>,
) -> Result<MpcSolution> {
    if horizon == 0 {
        return Err(Error::Config("mpc horizon must be >= 1".into()));
    }
    let mut reference = vec![endpoint; horizon];
    // only the last entry is penalised; the others are placeholders
    for w in reference.iter_mut().take(horizon - 1) {
        *w = [initial.x, initial.y, initial.theta];
    }
    let p = MpcProblem {
        initial: *initial,
        reference,
        dt,
        terminal_only: true,
    };
    solve_mpc(&p, cfg, warm_start)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lim() -> VehicleLimits {
        VehicleLimits::default()
    }

    #[test]
    fn reference_headings_follow_displacement() {
        let pts = [[1.0, 0.0], [1.0, 1.0], [1.0, 1.0 + 1e-4]];
        let r = reference_from_points(0.3, [0.0, 0.0], &pts);
        assert!((r[0][2] - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
        // tiny step keeps previous heading; last reuses previous
        assert_eq!(r[1][2], r[0][2]);
        assert_eq!(r[2][2], r[1][2]);
        let single = reference_from_points(0.3, [0.0, 0.0], &[[0.0, 2.0]]);
        assert!((single[0][2] - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
        let still = reference_from_points(0.3, [0.0, 0.0], &[[0.0, 0.0]]);
        assert_eq!(still[0][2], 0.3);
    }

    #[test]
    fn j_equals_one() {
        let s = DynamicVehicle::new(0.0, 0.0, 0.0, 5.0, 2.5);
        let p = MpcProblem {
            initial: s,
            reference: vec![[1.2, 0.0, 0.0]],
            dt: 0.2,
            terminal_only: false,
        };
        let sol = solve_mpc(&p, &MpcConfig::default(), None).unwrap();
        assert_eq!(sol.commands.len(), 1);
        assert_eq!(sol.rollout.len(), 1);
        assert_eq!(sol.rollout[0], s.step(sol.commands[0], 0.2, lim().max_speed));
        assert!(sol.cost <= sol.zero_control_cost);
        // Euler position uses the initial speed, so only heading is free
        assert!((sol.rollout[0].x - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bad_problems_are_rejected() {
        let s = DynamicVehicle::new(0.0, 0.0, 0.0, 5.0, 2.5);
        let mut p = MpcProblem {
            initial: s,
            reference: vec![],
            dt: 0.2,
            terminal_only: false,
        };
        assert!(solve_mpc(&p, &MpcConfig::default(), None).is_err());
        p.reference = vec![[f64::NAN, 0.0, 0.0]];
        assert!(solve_mpc(&p, &MpcConfig::default(), None).is_err());
        p.reference = vec![[0.0, 0.0, 0.0]];
        p.dt = 0.0;
        assert!(solve_mpc(&p, &MpcConfig::default(), None).is_err());
    }

    #[test]
    fn braking_warm_start_at_standstill_recovers() {
        // warm start brakes hard while the vehicle is stopped; the speed
        // clamp hides the gradient unless accelerations are canonicalised
        let s = DynamicVehicle::new(0.0, 0.0, 0.0, 0.0, 2.5);
        let cmds = vec![ControlCommand { accel: 1.0, steer: 0.0 }; 5];
        let (truth, _) = rollout(&s, &cmds, 0.2, 2, &lim());
        let p = MpcProblem {
            initial: s,
            reference: truth.iter().map(|t| [t.x, t.y, t.theta]).collect(),
            dt: 0.2,
            terminal_only: false,
        };
        let warm = vec![ControlCommand { accel: -3.0, steer: 0.0 }; 5];
        let cfg = MpcConfig {
            substeps: 2,
            ..MpcConfig::default()
        };
        let sol = solve_mpc(&p, &cfg, Some(&warm)).unwrap();
        assert!(sol.cost < 1e-6, "{}", sol.cost);
    }
}
