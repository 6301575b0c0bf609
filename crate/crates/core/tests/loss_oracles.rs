use mtp_core::losses::{collision_loss, imitation_loss, total_loss, LossConfig};
use mtp_core::metrics::offline_metrics;
use mtp_core::scene::Trajectory;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_set(rng: &mut ChaCha8Rng, n: usize, t: usize, spread: f64) -> Vec<Trajectory> {
    (0..n)
        .map(|_| {
            let pts = (0..t)
                .map(|_| [rng.random_range(-spread..spread), rng.random_range(-spread..spread)])
                .collect();
            Trajectory::new(pts, 0.2).unwrap()
        })
        .collect()
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Every pair, every timestep, largest violation.
fn brute_force_collision(set: &[Trajectory], lambda: f64) -> f64 {
    let mut total = 0.0;
    for i in 0..set.len() {
        for j in i + 1..set.len() {
            let mut worst: f64 = 0.0;
            for t in 0..set[i].len() {
                worst = worst.max(lambda - dist(set[i].points()[t], set[j].points()[t]));
            }
            total += worst;
        }
    }
    total
}

#[test]
fn collision_loss_matches_brute_force_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for _ in 0..1000 {
        let n = rng.random_range(0..=6);
        let t = rng.random_range(1..=8);
        let lambda = rng.random_range(0.5..4.0);
        let set = random_set(&mut rng, n, t, 5.0);
        assert_eq!(collision_loss(&set, lambda).0, brute_force_collision(&set, lambda));
    }
}

#[test]
fn imitation_loss_matches_direct_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    for _ in 0..1000 {
        let n = rng.random_range(1..=6);
        let t = rng.random_range(1..=8);
        let pred = random_set(&mut rng, n, t, 30.0);
        let gt = random_set(&mut rng, n, t, 30.0);
        let mut sum = 0.0;
        for (p, g) in pred.iter().zip(&gt) {
            for (a, b) in p.points().iter().zip(g.points()) {
                sum += dist(*a, *b);
            }
        }
        assert_eq!(imitation_loss(&pred, &gt).unwrap().0, sum / n as f64);
    }
}

#[test]
fn collision_rate_flags_vehicles_not_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    for _ in 0..300 {
        let n = rng.random_range(1..=6);
        let set = random_set(&mut rng, n, 4, 6.0);
        let flagged = (0..n)
            .filter(|&i| {
                (0..n).any(|j| {
                    j != i && (0..4).any(|t| dist(set[i].points()[t], set[j].points()[t]) < 2.0)
                })
            })
            .count();
        let r = offline_metrics(&set, &set, 2.0, 2.0).unwrap();
        assert_eq!(r.cr, flagged as f64 / n as f64);
    }
}

#[test]
fn total_loss_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(34);
    let cfg = LossConfig {
        lambda: 3.0,
        collision_weight: 1.5,
        normalize_by_horizon: false,
    };
    let eps = 1e-6;
    for _ in 0..100 {
        let pred = random_set(&mut rng, 3, 3, 3.0);
        let gt = random_set(&mut rng, 3, 3, 3.0);
        let l = total_loss(&pred, &gt, &cfg).unwrap();
        for k in 0..3 {
            for t in 0..3 {
                for c in 0..2 {
                    let shifted = |h: f64| {
                        let mut p = pred.clone();
                        let mut pts = p[k].points().to_vec();
                        pts[t][c] += h;
                        p[k] = Trajectory::new(pts, 0.2).unwrap();
                        total_loss(&p, &gt, &cfg).unwrap().total
                    };
                    let (up, down) = (shifted(eps), shifted(-eps));
                    // skip stencils that straddle a hinge or an arg-min switch
                    if ((up - l.total) - (l.total - down)).abs() > 1e-9 {
                        continue;
                    }
                    let fd = (up - down) / (2.0 * eps);
                    assert!((fd - l.grad[k][t][c]).abs() < 1e-5, "fd {fd} analytic {}", l.grad[k][t][c]);
                }
            }
        }
    }
}
