//! Trajectory metrics, pose recovery and feature distances.

mod common;

use common::*;
use mwm::metrics::{ate, pose_recovery, rpe};
use mwm::rng;
use mwm::sim::{wrap_angle, Pose, World, WorldConfig};
use proptest::prelude::*;
use rand::Rng as _;

#[test]
fn closed_form_oracles() {
    metric_oracles().assert();
}

#[test]
fn pose_recovery_round_trip() {
    let w = World::generate(WorldConfig::default()).unwrap();
    let mut r = rng::seeded(100);
    let half = 0.5 * w.config.extent;
    for _ in 0..100 {
        let p = Pose::new(r.gen_range(-half..half), r.gen_range(-half..half), r.gen_range(-3.1..3.1));
        let rec = pose_recovery(&w, &w.render(&p)).unwrap();
        assert!(rec.pose.distance(&p) < 1e-2, "{p:?} -> {:?}", rec.pose);
        assert!(wrap_angle(rec.pose.theta - p.theta).abs() < 1e-2);
        assert!(!rec.low_confidence);
    }
}

fn poses() -> impl Strategy<Value = Vec<(f64, f64, f64)>> {
    prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0, -3.0f64..3.0), 2..12)
}

proptest! {
    #[test]
    fn rpe_is_rigid_invariant_ate_is_not(gt in poses(), noise in poses(), dx in 0.5f64..2.0, dth in -3.0f64..3.0) {
        let n = gt.len().min(noise.len());
        let gt: Vec<Pose> = gt[..n].iter().map(|&(x, y, t)| Pose::new(x, y, t)).collect();
        let pred: Vec<Pose> = gt.iter().zip(&noise).map(|(p, e)| Pose::new(p.x + 0.1 * e.0, p.y + 0.1 * e.1, p.theta + 0.1 * e.2)).collect();
        let (c, s) = (dth.cos(), dth.sin());
        let moved: Vec<Pose> = pred.iter().map(|p| Pose::new(c * p.x - s * p.y + dx, s * p.x + c * p.y, p.theta + dth)).collect();
        prop_assert!((rpe(&moved, &gt, 1).unwrap() - rpe(&pred, &gt, 1).unwrap()).abs() < 1e-9);
        prop_assert!(ate(&pred, &gt).unwrap() >= 0.0);
        let shifted_gt: Vec<Pose> = gt.iter().map(|p| Pose::new(c * p.x - s * p.y + dx, s * p.x + c * p.y, p.theta + dth)).collect();
        prop_assert!(ate(&shifted_gt, &gt).unwrap() > 0.0);
        prop_assert!(rpe(&shifted_gt, &gt, 1).unwrap() < 1e-9);
    }

    #[test]
    fn constant_offset_ate(gt in poses(), c in -2.0f64..2.0) {
        let gt: Vec<Pose> = gt.iter().map(|&(x, y, t)| Pose::new(x, y, t)).collect();
        let pred: Vec<Pose> = gt.iter().map(|p| Pose::new(p.x + c, p.y + c, p.theta)).collect();
        prop_assert!((ate(&pred, &gt).unwrap() - (2.0 * c * c).sqrt()).abs() < 1e-9);
    }
}
