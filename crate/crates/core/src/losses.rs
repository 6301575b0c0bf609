//! Training objective: imitation loss plus pairwise collision hinge.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{Trajectory, Vec2};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Safety distance, metres.
    pub lambda: f64,
    pub collision_weight: f64,
    /// Divide the imitation loss by the horizon. Off by default.
    pub normalize_by_horizon: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 2.0,
            collision_weight: 1.0,
            normalize_by_horizon: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) || !(self.collision_weight >= 0.0) {
            return Err(Error::Config("lambda must be > 0 and collision_weight >= 0".into()));
        }
        Ok(())
    }
}

/// Loss gradient with respect to every predicted point, `[vehicle][t]`.
pub type PointGrad = Vec<Vec<Vec2>>;

fn zero_grad(pred: &[Trajectory]) -> PointGrad {
    pred.iter().map(|t| vec![[0.0, 0.0]; t.len()]).collect()
}

fn check_aligned(pred: &[Trajectory], gt: &[Trajectory]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!("{} predictions for {} ground truths", pred.len(), gt.len())));
    }
    if pred.iter().zip(gt).any(|(p, g)| p.len() != g.len()) {
        return Err(Error::Shape("prediction and ground truth horizons differ".into()));
    }
    Ok(())
}

/// `(1/N) sum_k sum_t |pred - gt|`, optionally also divided by `T`.
pub fn imitation_loss_with(pred: &[Trajectory], gt: &[Trajectory], normalize_by_horizon: bool) -> Result<(f64, PointGrad)> {
    check_aligned(pred, gt)?;
    let n = pred.len();
    let mut grad = zero_grad(pred);
    if n == 0 {
        return Ok((0.0, grad));
    }
    let mut denom = n as f64;
    if normalize_by_horizon {
        denom *= pred[0].len() as f64;
    }
    let mut total = 0.0;
    for (k, (p, g)) in pred.iter().zip(gt).enumerate() {
        for (t, (a, b)) in p.points().iter().zip(g.points()).enumerate() {
            let d = [a[0] - b[0], a[1] - b[1]];
            let norm = d[0].hypot(d[1]);
            total += norm;
            if norm > 0.0 {
                grad[k][t] = [d[0] / (norm * denom), d[1] / (norm * denom)];
            }
        }
    }
    Ok((total / denom, grad))
}

pub fn imitation_loss(pred: &[Trajectory], gt: &[Trajectory]) -> Result<(f64, PointGrad)> {
    imitation_loss_with(pred, gt, false)
}

/// Minimum same-time distance of two trajectories and the first timestep
/// attaining it.
pub fn min_distance(a: &Trajectory, b: &Trajectory) -> (f64, usize) {
    let mut best = (f64::INFINITY, 0);
    for (t, (p, q)) in a.points().iter().zip(b.points()).enumerate() {
        let d = (p[0] - q[0]).hypot(p[1] - q[1]);
        if d < best.0 {
            best = (d, t);
        }
    }
    best
}

/// `sum_{i<j} max(0, lambda - min_t |p_i^t - p_j^t|)`. The gradient flows
/// through the arg-min timestep of each violating pair only.
pub fn collision_loss(pred: &[Trajectory], lambda: f64) -> (f64, PointGrad) {
    let mut grad = zero_grad(pred);
    let mut total = 0.0;
    for i in 0..pred.len() {
        for j in i + 1..pred.len() {
            let (d, t) = min_distance(&pred[i], &pred[j]);
            if d < lambda {
                total += lambda - d;
                if d > 0.0 {
                    let p = pred[i].points()[t];
                    let q = pred[j].points()[t];
                    let u = [(p[0] - q[0]) / d, (p[1] - q[1]) / d];
                    grad[i][t][0] -= u[0];
                    grad[i][t][1] -= u[1];
                    grad[j][t][0] += u[0];
                    grad[j][t][1] += u[1];
                }
            }
        }
    }
    (total, grad)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub imitation: f64,
    pub collision: f64,
    pub grad: PointGrad,
}

/// `L_imitation + collision_weight * L_collision` with its point gradient.
pub fn total_loss(pred: &[Trajectory], gt: &[Trajectory], cfg: &LossConfig) -> Result<LossBreakdown> {
    let (imitation, mut grad) = imitation_loss_with(pred, gt, cfg.normalize_by_horizon)?;
    let mut collision = 0.0;
    if cfg.collision_weight > 0.0 {
        let (c, cg) = collision_loss(pred, cfg.lambda);
        collision = c;
        for (gk, ck) in grad.iter_mut().zip(cg) {
            for (g, c) in gk.iter_mut().zip(ck) {
                g[0] += cfg.collision_weight * c[0];
                g[1] += cfg.collision_weight * c[1];
            }
        }
    }
    Ok(LossBreakdown {
        total: imitation + cfg.collision_weight * collision,
        imitation,
        collision,
        grad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tr(points: &[Vec2]) -> Trajectory {
        Trajectory::new(points.to_vec(), 0.2).unwrap()
    }

    #[test]
    fn imitation_examples() {
        let a = tr(&[[0.0, 0.0], [1.0, 1.0]]);
        assert_eq!(imitation_loss(&[a.clone()], &[a.clone()]).unwrap().0, 0.0);
        let b = tr(&[[3.0, 4.0], [4.0, 5.0]]);
        assert_eq!(imitation_loss(&[b], &[a]).unwrap().0, 10.0);
        let p = [tr(&[[3.0, 4.0]]), tr(&[[1.0, 1.0]])];
        let g = [tr(&[[0.0, 0.0]]), tr(&[[1.0, 1.0]])];
        let (l, grad) = imitation_loss(&p, &g).unwrap();
        assert_eq!(l, 2.5);
        assert_eq!(grad[1][0], [0.0, 0.0]);
        assert!((grad[0][0][0] - 0.3).abs() < 1e-15 && (grad[0][0][1] - 0.4).abs() < 1e-15);
    }

    #[test]
    fn imitation_length_mismatch() {
        let a = tr(&[[0.0, 0.0]]);
        let b = tr(&[[0.0, 0.0], [1.0, 0.0]]);
        assert!(imitation_loss(&[a.clone()], &[b]).is_err());
        assert!(imitation_loss(&[a.clone()], &[a.clone(), a]).is_err());
    }

    #[test]
    fn collision_examples() {
        assert_eq!(collision_loss(&[tr(&[[0.0, 0.0]])], 2.0).0, 0.0);
        let a = tr(&[[0.0, 0.0], [0.0, 0.0]]);
        let b = tr(&[[5.0, 0.0], [0.8, 0.0]]);
        assert!((collision_loss(&[a, b], 2.0).0 - 1.2).abs() < 1e-12);
    }

    #[test]
    fn collision_three_vehicles() {
        // pairwise minima: (0,1) = 0.5, (0,2) = 2.5, (1,2) = 1.9
        let a = tr(&[[0.0, 0.0], [0.0, 0.0]]);
        let b = tr(&[[0.5, 0.0], [10.0, 0.0]]);
        let c = tr(&[[-2.5, 0.0], [10.0, 1.9]]);
        let (l, _) = collision_loss(&[a, b, c], 2.0);
        assert!((l - 1.6).abs() < 1e-12, "{l}");
    }

    #[test]
    fn collision_tie_uses_first_timestep() {
        let a = tr(&[[0.0, 0.0], [0.0, 0.0]]);
        let b = tr(&[[1.0, 0.0], [0.0, 1.0]]);
        let (_, g) = collision_loss(&[a, b], 2.0);
        assert_eq!(g[0][0], [1.0, 0.0]);
        assert_eq!(g[0][1], [0.0, 0.0]);
    }

    #[test]
    fn weight_zero_drops_collision() {
        let a = tr(&[[0.0, 0.0]]);
        let b = tr(&[[0.5, 0.0]]);
        let cfg = LossConfig {
            collision_weight: 0.0,
            ..LossConfig::default()
        };
        let l = total_loss(&[a.clone(), b.clone()], &[a, b], &cfg).unwrap();
        assert_eq!(l.total, 0.0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn trajs(n: usize, t: usize) -> impl Strategy<Value = Vec<Trajectory>> {
            prop::collection::vec(prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), t), n).prop_map(|v| {
                v.into_iter()
                    .map(|pts| Trajectory::new(pts.into_iter().map(|(x, y)| [x, y]).collect(), 0.2).unwrap())
                    .collect()
            })
        }

        proptest! {
            #[test]
            fn collision_zero_iff_separated(p in trajs(3, 4)) {
                let (l, _) = collision_loss(&p, 2.0);
                let separated = (0..3).all(|i| (i + 1..3).all(|j| min_distance(&p[i], &p[j]).0 >= 2.0));
                prop_assert_eq!(l == 0.0, separated);
            }

            #[test]
            fn translation_invariance(p in trajs(3, 4), g in trajs(3, 4), dx in -20.0f64..20.0, dy in -20.0f64..20.0) {
                let shift = |v: &[Trajectory]| -> Vec<Trajectory> {
                    v.iter().map(|t| Trajectory::new(t.points().iter().map(|q| [q[0] + dx, q[1] + dy]).collect(), 0.2).unwrap()).collect()
                };
                let (c0, _) = collision_loss(&p, 2.0);
                let (c1, _) = collision_loss(&shift(&p), 2.0);
                prop_assert!((c0 - c1).abs() < 1e-9);
                let i0 = imitation_loss(&p, &g).unwrap().0;
                let i1 = imitation_loss(&shift(&p), &shift(&g)).unwrap().0;
                prop_assert!((i0 - i1).abs() < 1e-9);
            }
        }
    }
}
