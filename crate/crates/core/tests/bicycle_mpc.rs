use std::f64::consts::PI;

use mtp_core::bicycle::{step_bicycle, ControlCommand, DynamicVehicle, VehicleLimits};
use mtp_core::mpc::{rollout, solve_mpc, solve_mpc_to_point, MpcConfig, MpcProblem, Pose};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn poses(states: &[DynamicVehicle]) -> Vec<Pose> {
    states.iter().map(|s| [s.x, s.y, s.theta]).collect()
}

fn rms(a: &[DynamicVehicle], b: &[Pose]) -> f64 {
    let s: f64 = a.iter().zip(b).map(|(s, w)| (s.x - w[0]).powi(2) + (s.y - w[1]).powi(2)).sum();
    (s / a.len() as f64).sqrt()
}

#[test]
fn constant_steer_traces_circle() {
    let lim = VehicleLimits::default();
    for &delta in &[0.1, 0.3, 0.6] {
        let v = 5.0;
        let dt = 1e-3;
        let radius = lim.wheelbase / f64::tan(delta);
        let centre = [0.0, radius];
        let period = 2.0 * PI * radius / v;
        let steps = (period / dt).ceil() as usize;
        let mut s = DynamicVehicle::new(0.0, 0.0, 0.0, v, lim.wheelbase);
        let u = ControlCommand { accel: 0.0, steer: delta };
        let mut worst: f64 = 0.0;
        for _ in 0..steps {
            s = step_bicycle(&s, u, dt, &lim);
            let r = (s.x - centre[0]).hypot(s.y - centre[1]);
            worst = worst.max((r - radius).abs() / radius);
        }
        assert!(worst < 0.01, "delta {delta}: radius error {worst}");
    }
}

#[test]
fn straight_reference_needs_no_control() {
    let s = DynamicVehicle::new(0.0, 0.0, 0.0, 8.0, 2.5);
    let reference: Vec<Pose> = (1..=10).map(|i| [8.0 * 0.2 * i as f64, 0.0, 0.0]).collect();
    let p = MpcProblem {
        initial: s,
        reference: reference.clone(),
        dt: 0.2,
        terminal_only: false,
    };
    let sol = solve_mpc(&p, &MpcConfig::default(), None).unwrap();
    for c in &sol.commands {
        assert!(c.accel.abs() < 1e-6 && c.steer.abs() < 1e-6, "{c:?}");
    }
    let last = sol.rollout.last().unwrap();
    assert!((last.x - reference[9][0]).hypot(last.y - reference[9][1]) < 0.1);
}

#[test]
fn recovers_known_control_sequences() {
    let lim = VehicleLimits::default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for case in 0..30 {
        let substeps = if case % 2 == 0 { 1 } else { 2 };
        let s = DynamicVehicle::new(
            rng.random_range(-20.0..20.0),
            rng.random_range(-20.0..20.0),
            rng.random_range(-PI..PI),
            rng.random_range(2.0..12.0),
            2.5,
        );
        let cmds: Vec<ControlCommand> = (0..10)
            .map(|_| ControlCommand {
                accel: rng.random_range(-2.0..2.0),
                steer: rng.random_range(-0.4..0.4),
            })
            .collect();
        let (truth, _) = rollout(&s, &cmds, 0.2, substeps, &lim);
        let reference = poses(&truth);
        let p = MpcProblem {
            initial: s,
            reference: reference.clone(),
            dt: 0.2,
            terminal_only: false,
        };
        let cfg = MpcConfig {
            substeps,
            ..MpcConfig::default()
        };
        let sol = solve_mpc(&p, &cfg, None).unwrap();
        let e = rms(&sol.rollout, &reference);
        assert!(e < 0.05, "case {case}: rms {e}");
        assert!(sol.cost <= sol.zero_control_cost);
    }
}

#[test]
fn heading_offset_by_two_pi_gives_same_solution() {
    let s = DynamicVehicle::new(0.0, 0.0, 0.5, 6.0, 2.5);
    let cmds = vec![ControlCommand { accel: 0.5, steer: 0.2 }; 8];
    let (truth, _) = rollout(&s, &cmds, 0.2, 1, &VehicleLimits::default());
    let mut reference = poses(&truth);
    for w in reference.iter_mut() {
        w[1] += 0.3;
    }
    let mk = |r: Vec<Pose>| MpcProblem {
        initial: s,
        reference: r,
        dt: 0.2,
        terminal_only: false,
    };
    let a = solve_mpc(&mk(reference.clone()), &MpcConfig::default(), None).unwrap();
    let shifted = reference.iter().map(|w| [w[0], w[1], w[2] + 2.0 * PI]).collect();
    let b = solve_mpc(&mk(shifted), &MpcConfig::default(), None).unwrap();
    assert!((a.cost - b.cost).abs() < 1e-12);
    for (x, y) in a.commands.iter().zip(&b.commands) {
        assert!((x.accel - y.accel).abs() < 1e-6 && (x.steer - y.steer).abs() < 1e-6, "{x:?} {y:?}");
    }
}

#[test]
fn mirror_symmetry_negates_steering() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..10 {
        let s = DynamicVehicle::new(0.0, rng.random_range(-3.0..3.0), rng.random_range(-1.0..1.0), 7.0, 2.5);
        let reference: Vec<Pose> = (1..=10)
            .map(|i| {
                let t = i as f64 * 0.2;
                [7.0 * t, 1.5 * (t * 1.3).sin() + rng.random_range(-0.2..0.2), 0.2 * (t * 1.3).cos()]
            })
            .collect();
        let p = MpcProblem {
            initial: s,
            reference: reference.clone(),
            dt: 0.2,
            terminal_only: false,
        };
        let mirrored = MpcProblem {
            initial: DynamicVehicle::new(s.x, -s.y, -s.theta, s.v, s.wheelbase),
            reference: reference.iter().map(|w| [w[0], -w[1], -w[2]]).collect(),
            dt: 0.2,
            terminal_only: false,
        };
        let a = solve_mpc(&p, &MpcConfig::default(), None).unwrap();
        let b = solve_mpc(&mirrored, &MpcConfig::default(), None).unwrap();
        for (x, y) in a.commands.iter().zip(&b.commands) {
            assert!((x.steer + y.steer).abs() < 1e-3, "{} vs {}", x.steer, y.steer);
            assert!((x.accel - y.accel).abs() < 1e-3);
        }
    }
}

#[test]
fn never_worse_than_zero_control() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..40 {
        let s = DynamicVehicle::new(0.0, 0.0, rng.random_range(-PI..PI), rng.random_range(0.0..15.0), 2.5);
        let reference: Vec<Pose> = (0..rng.random_range(1..12))
            .map(|_| [rng.random_range(-30.0..30.0), rng.random_range(-30.0..30.0), rng.random_range(-10.0..10.0)])
            .collect();
        let p = MpcProblem {
            initial: s,
            reference,
            dt: 0.2,
            terminal_only: rng.random_bool(0.3),
        };
        let warm: Vec<ControlCommand> = (0..5)
            .map(|_| ControlCommand {
                accel: rng.random_range(-3.0..3.0),
                steer: rng.random_range(-0.6..0.6),
            })
            .collect();
        let sol = solve_mpc(&p, &MpcConfig::default(), Some(&warm)).unwrap();
        assert!(sol.cost <= sol.zero_control_cost);
        let lim = VehicleLimits::default();
        for c in &sol.commands {
            assert!(c.accel.abs() <= lim.max_accel && c.steer.abs() <= lim.max_steer);
        }
    }
}

#[test]
fn to_point_straight_ahead() {
    let s = DynamicVehicle::new(1.0, 2.0, 0.3, 8.0, 2.5);
    let (truth, _) = rollout(&s, &[ControlCommand::ZERO; 10], 0.2, 1, &VehicleLimits::default());
    let end = truth[9];
    let sol = solve_mpc_to_point(&s, [end.x, end.y, end.theta], 10, 0.2, &MpcConfig::default(), None).unwrap();
    for c in &sol.commands {
        assert!(c.accel.abs() < 1e-6 && c.steer.abs() < 1e-6);
    }
    let last = sol.rollout.last().unwrap();
    assert!((last.x - end.x).hypot(last.y - end.y) < 0.1);
}

#[test]
fn to_point_lateral_offset() {
    let s = DynamicVehicle::new(0.0, 0.0, 0.0, 8.0, 2.5);
    let target = [16.0, 2.0, 0.0];
    let sol = solve_mpc_to_point(&s, target, 10, 0.2, &MpcConfig::default(), None).unwrap();
    let last = sol.rollout.last().unwrap();
    assert!((last.x - target[0]).hypot(last.y - target[1]) < 0.2);
    assert!(last.theta.abs() < 0.1);
}

#[test]
fn to_point_single_step() {
    let s = DynamicVehicle::new(0.0, 0.0, 0.0, 5.0, 2.5);
    let sol = solve_mpc_to_point(&s, [1.0, 0.0, 0.1], 1, 0.2, &MpcConfig::default(), None).unwrap();
    assert_eq!(sol.commands.len(), 1);
    assert_eq!(sol.rollout[0], s.step(sol.commands[0], 0.2, 15.0));
}
