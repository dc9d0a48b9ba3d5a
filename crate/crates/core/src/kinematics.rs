//! Finite-difference kinematics: velocity and acceleration from positions,
//! anchored pseudo sequences from predictions, and integration back to positions.
//!
//! All sequences use one step per frame. Velocities are per-step displacements,
//! not divided by the frame interval.

use std::ops::{Add, AddAssign, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Seconds between consecutive frames in the benchmark datasets.
pub const BENCHMARK_FRAME_INTERVAL: f64 = 0.4;

/// A 2-D point or displacement.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const ZERO: Vec2 = Vec2 { x: 0.0, y: 0.0 };

    pub const fn new(x: f64, y: f64) -> Self {
        Vec2 { x, y }
    }

    pub fn dot(self, other: Vec2) -> f64 {
        self.x * other.x + self.y * other.y
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn distance(self, other: Vec2) -> f64 {
        (self - other).norm()
    }
}

impl Add for Vec2 {
    type Output = Vec2;
    fn add(self, rhs: Vec2) -> Vec2 {
        Vec2::new(self.x + rhs.x, self.y + rhs.y)
    }
}

impl AddAssign for Vec2 {
    fn add_assign(&mut self, rhs: Vec2) {
        self.x += rhs.x;
        self.y += rhs.y;
    }
}

impl Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, rhs: Vec2) -> Vec2 {
        Vec2::new(self.x - rhs.x, self.y - rhs.y)
    }
}

impl Mul<f64> for Vec2 {
    type Output = Vec2;
    fn mul(self, rhs: f64) -> Vec2 {
        Vec2::new(self.x * rhs, self.y * rhs)
    }
}

impl Neg for Vec2 {
    type Output = Vec2;
    fn neg(self) -> Vec2 {
        Vec2::new(-self.x, -self.y)
    }
}

impl From<(f64, f64)> for Vec2 {
    fn from((x, y): (f64, f64)) -> Self {
        Vec2::new(x, y)
    }
}

/// Ordered positions of one agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionSeq {
    pub points: Vec<Vec2>,
    pub frame_interval: f64,
}

impl PositionSeq {
    pub fn new(points: Vec<Vec2>) -> Self {
        PositionSeq {
            points,
            frame_interval: BENCHMARK_FRAME_INTERVAL,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn last(&self) -> Option<Vec2> {
        self.points.last().copied()
    }

    pub fn validate(&self) -> Result<()> {
        check_finite(&self.points, "position")
    }
}

impl From<Vec<Vec2>> for PositionSeq {
    fn from(points: Vec<Vec2>) -> Self {
        PositionSeq::new(points)
    }
}

/// Per-step displacements.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct VelocitySeq {
    pub vectors: Vec<Vec2>,
}

/// Per-step velocity changes.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AccelSeq {
    pub vectors: Vec<Vec2>,
}

impl VelocitySeq {
    pub fn new(vectors: Vec<Vec2>) -> Self {
        VelocitySeq { vectors }
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }
}

impl AccelSeq {
    pub fn new(vectors: Vec<Vec2>) -> Self {
        AccelSeq { vectors }
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// Magnitude of every step, the statistic the similarity scorer works on.
    pub fn magnitudes(&self) -> Vec<f64> {
        self.vectors.iter().map(|a| a.norm()).collect()
    }
}

/// Aligned position, velocity and acceleration sequences of equal length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KinematicTriple {
    pub position: PositionSeq,
    pub velocity: VelocitySeq,
    pub accel: AccelSeq,
}

impl KinematicTriple {
    pub fn new(position: PositionSeq, velocity: VelocitySeq, accel: AccelSeq) -> Result<Self> {
        if position.len() != velocity.len() || position.len() != accel.len() {
            return Err(Error::invalid(format!(
                "kinematic triple lengths differ: {} / {} / {}",
                position.len(),
                velocity.len(),
                accel.len()
            )));
        }
        Ok(KinematicTriple {
            position,
            velocity,
            accel,
        })
    }

    /// Builds the encoder input triple from observed positions.
    ///
    /// Velocity (length T-1) and acceleration (length T-2) are left-padded with
    /// their first element so all three streams have length T. Requires T >= 3.
    pub fn from_observed(position: PositionSeq) -> Result<Self> {
        if position.len() < 3 {
            return Err(Error::invalid(format!(
                "observed track needs at least 3 positions, got {}",
                position.len()
            )));
        }
        position.validate()?;
        let vel = derive_velocity(&position)?;
        let acc = derive_accel(&vel)?;
        let t = position.len();
        let velocity = VelocitySeq::new(left_pad(&vel.vectors, t));
        let accel = AccelSeq::new(left_pad(&acc.vectors, t));
        KinematicTriple::new(position, velocity, accel)
    }

    pub fn len(&self) -> usize {
        self.position.len()
    }

    pub fn is_empty(&self) -> bool {
        self.position.is_empty()
    }

    /// Last observed velocity, the anchor for pseudo acceleration.
    pub fn last_velocity(&self) -> Vec2 {
        self.velocity.vectors.last().copied().unwrap_or(Vec2::ZERO)
    }

    /// The unpadded observed acceleration history (length T-2).
    pub fn accel_history(&self) -> AccelSeq {
        let skip = 2.min(self.accel.len().saturating_sub(1));
        AccelSeq::new(self.accel.vectors[skip..].to_vec())
    }
}

fn left_pad(v: &[Vec2], len: usize) -> Vec<Vec2> {
    let first = v.first().copied().unwrap_or(Vec2::ZERO);
    let mut out = vec![first; len - v.len()];
    out.extend_from_slice(v);
    out
}

fn check_finite(v: &[Vec2], what: &str) -> Result<()> {
    match v.iter().position(|p| !p.is_finite()) {
        Some(i) => Err(Error::DataQuality(format!("non-finite {what} at step {i}"))),
        None => Ok(()),
    }
}

fn forward_diff(v: &[Vec2]) -> Vec<Vec2> {
    v.windows(2).map(|w| w[1] - w[0]).collect()
}

fn anchored_diff(v: &[Vec2], anchor: Vec2) -> Vec<Vec2> {
    let mut prev = anchor;
    v.iter()
        .map(|&cur| {
            let d = cur - prev;
            prev = cur;
            d
        })
        .collect()
}

/// `V[j] = P[j+1] - P[j]`.
pub fn derive_velocity(p: &PositionSeq) -> Result<VelocitySeq> {
    if p.len() < 2 {
        return Err(Error::invalid(format!(
            "derive_velocity needs at least 2 positions, got {}",
            p.len()
        )));
    }
    Ok(VelocitySeq::new(forward_diff(&p.points)))
}

/// `A[j] = V[j+1] - V[j]`.
pub fn derive_accel(v: &VelocitySeq) -> Result<AccelSeq> {
    if v.len() < 2 {
        return Err(Error::invalid(format!(
            "derive_accel needs at least 2 velocities, got {}",
            v.len()
        )));
    }
    Ok(AccelSeq::new(forward_diff(&v.vectors)))
}

/// Velocity implied by predicted positions, anchored on the last observed position
/// so the output keeps the prediction length.
pub fn pseudo_velocity(pred_pos: &PositionSeq, last_obs_pos: Vec2) -> Result<VelocitySeq> {
    if pred_pos.is_empty() {
        return Err(Error::invalid("pseudo_velocity on empty prediction"));
    }
    Ok(VelocitySeq::new(anchored_diff(&pred_pos.points, last_obs_pos)))
}

/// Acceleration implied by predicted velocities, anchored on the last observed velocity.
pub fn pseudo_accel(pred_vel: &VelocitySeq, last_obs_vel: Vec2) -> Result<AccelSeq> {
    if pred_vel.is_empty() {
        return Err(Error::invalid("pseudo_accel on empty prediction"));
    }
    Ok(AccelSeq::new(anchored_diff(&pred_vel.vectors, last_obs_vel)))
}

/// Cumulative sum of `vel` starting from `start` (the start point itself is not emitted).
pub fn integrate_positions(vel: &VelocitySeq, start: Vec2) -> Result<PositionSeq> {
    if vel.is_empty() {
        return Err(Error::invalid("integrate_positions on empty velocity"));
    }
    check_finite(&vel.vectors, "velocity")?;
    let mut cur = start;
    let points = vel
        .vectors
        .iter()
        .map(|&v| {
            cur += v;
            cur
        })
        .collect();
    Ok(PositionSeq::new(points))
}

/// Mean per-step displacement between the first and last observed frames.
pub fn global_velocity(p: &PositionSeq) -> Result<Vec2> {
    let t = p.len();
    if t < 2 {
        return Err(Error::invalid(format!(
            "global_velocity needs at least 2 positions, got {t}"
        )));
    }
    Ok((p.points[t - 1] - p.points[0]) * (1.0 / (t - 1) as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pts(v: &[(f64, f64)]) -> Vec<Vec2> {
        v.iter().map(|&p| p.into()).collect()
    }

    fn pos(v: &[(f64, f64)]) -> PositionSeq {
        PositionSeq::new(pts(v))
    }

    #[test]
    fn velocity_examples() {
        let v = derive_velocity(&pos(&[(0., 0.), (1., 0.), (2., 0.)])).unwrap();
        assert_eq!(v.vectors, pts(&[(1., 0.), (1., 0.)]));
        let v = derive_velocity(&pos(&[(0., 0.), (0., 0.)])).unwrap();
        assert_eq!(v.vectors, pts(&[(0., 0.)]));
        let v = derive_velocity(&pos(&[(0., 0.), (1., 0.), (1., 1.)])).unwrap();
        assert_eq!(v.vectors, pts(&[(1., 0.), (0., 1.)]));
        assert!(derive_velocity(&pos(&[(0., 0.)])).is_err());
    }

    #[test]
    fn accel_examples() {
        let a = derive_accel(&VelocitySeq::new(pts(&[(1., 0.), (1., 0.)]))).unwrap();
        assert_eq!(a.vectors, pts(&[(0., 0.)]));
        let a = derive_accel(&VelocitySeq::new(pts(&[(1., 0.), (2., 0.), (4., 0.)]))).unwrap();
        assert_eq!(a.vectors, pts(&[(1., 0.), (2., 0.)]));
        let a = derive_accel(&VelocitySeq::new(pts(&[(1., 0.), (0., 1.)]))).unwrap();
        assert_eq!(a.vectors, pts(&[(-1., 1.)]));
        assert!(derive_accel(&VelocitySeq::new(pts(&[(1., 0.)]))).is_err());
    }

    #[test]
    fn pseudo_examples() {
        let v = pseudo_velocity(&pos(&[(1., 0.), (2., 0.)]), Vec2::ZERO).unwrap();
        assert_eq!(v.vectors, pts(&[(1., 0.), (1., 0.)]));
        let v = pseudo_velocity(&pos(&[(0., 0.)]), Vec2::ZERO).unwrap();
        assert_eq!(v.vectors, pts(&[(0., 0.)]));
        let v = pseudo_velocity(&pos(&[(3., 4.)]), Vec2::ZERO).unwrap();
        assert_eq!(v.vectors, pts(&[(3., 4.)]));
        assert!(pseudo_velocity(&pos(&[]), Vec2::ZERO).is_err());

        let a = pseudo_accel(&VelocitySeq::new(pts(&[(1., 0.), (1., 0.)])), Vec2::new(1., 0.)).unwrap();
        assert_eq!(a.vectors, pts(&[(0., 0.), (0., 0.)]));
        let a = pseudo_accel(&VelocitySeq::new(pts(&[(2., 0.)])), Vec2::new(1., 0.)).unwrap();
        assert_eq!(a.vectors, pts(&[(1., 0.)]));
        let a = pseudo_accel(&VelocitySeq::new(pts(&[(0., 1.), (0., 3.)])), Vec2::ZERO).unwrap();
        assert_eq!(a.vectors, pts(&[(0., 1.), (0., 2.)]));
        assert!(pseudo_accel(&VelocitySeq::default(), Vec2::ZERO).is_err());
    }

    #[test]
    fn integrate_examples() {
        let p = integrate_positions(&VelocitySeq::new(pts(&[(1., 0.), (1., 0.)])), Vec2::ZERO).unwrap();
        assert_eq!(p.points, pts(&[(1., 0.), (2., 0.)]));
        let p = integrate_positions(&VelocitySeq::new(pts(&[(0., 0.)])), Vec2::new(5., 5.)).unwrap();
        assert_eq!(p.points, pts(&[(5., 5.)]));
        let orig = pos(&[(0., 0.), (1., 2.), (3., 3.), (2., 7.)]);
        let back = integrate_positions(&derive_velocity(&orig).unwrap(), orig.points[0]).unwrap();
        assert_eq!(back.points, orig.points[1..]);
    }

    #[test]
    fn global_velocity_examples() {
        assert_eq!(global_velocity(&pos(&[(0., 0.), (2., 0.), (4., 0.)])).unwrap(), Vec2::new(2., 0.));
        assert_eq!(global_velocity(&pos(&[(1., 1.), (1., 1.)])).unwrap(), Vec2::ZERO);
        assert_eq!(global_velocity(&pos(&[(0., 0.), (0., 0.), (3., 3.)])).unwrap(), Vec2::new(1.5, 1.5));
        assert!(global_velocity(&pos(&[(0., 0.)])).is_err());
    }

    #[test]
    fn observed_triple_is_left_padded() {
        let t = KinematicTriple::from_observed(pos(&[(0., 0.), (1., 0.), (3., 0.), (6., 0.)])).unwrap();
        assert_eq!(t.len(), 4);
        assert_eq!(t.velocity.vectors, pts(&[(1., 0.), (1., 0.), (2., 0.), (3., 0.)]));
        assert_eq!(t.accel.vectors, pts(&[(1., 0.), (1., 0.), (1., 0.), (1., 0.)]));
        assert_eq!(t.accel_history().len(), 2);
        assert_eq!(t.last_velocity(), Vec2::new(3., 0.));
    }

    #[test]
    fn non_finite_observation_is_rejected() {
        let p = pos(&[(0., 0.), (f64::NAN, 0.), (1., 1.)]);
        assert!(matches!(KinematicTriple::from_observed(p), Err(Error::DataQuality(_))));
    }

    fn seq_strategy() -> impl Strategy<Value = Vec<(f64, f64)>> {
        prop::collection::vec((-100.0..100.0f64, -100.0..100.0f64), 2..40)
    }

    proptest! {
        #[test]
        fn derive_then_integrate_round_trips(p in seq_strategy()) {
            let p = pos(&p);
            let v = derive_velocity(&p).unwrap();
            prop_assert_eq!(v.len(), p.len() - 1);
            let back = integrate_positions(&v, p.points[0]).unwrap();
            for (a, b) in back.points.iter().zip(&p.points[1..]) {
                prop_assert!((a.x - b.x).abs() < 1e-9 && (a.y - b.y).abs() < 1e-9);
            }
        }

        #[test]
        fn derive_velocity_is_linear_and_translation_invariant(
            p in prop::collection::vec((-10.0..10.0f64, -10.0..10.0f64), 5),
            q in prop::collection::vec((-10.0..10.0f64, -10.0..10.0f64), 5),
            a in -3.0..3.0f64, b in -3.0..3.0f64, cx in -50.0..50.0f64, cy in -50.0..50.0f64,
        ) {
            let (p, q) = (pos(&p), pos(&q));
            let mixed = PositionSeq::new(p.points.iter().zip(&q.points).map(|(&x, &y)| x * a + y * b).collect());
            let dv = derive_velocity(&mixed).unwrap();
            let (dp, dq) = (derive_velocity(&p).unwrap(), derive_velocity(&q).unwrap());
            for j in 0..dv.len() {
                let expect = dp.vectors[j] * a + dq.vectors[j] * b;
                prop_assert!((dv.vectors[j] - expect).norm() < 1e-9);
            }
            let shifted = PositionSeq::new(p.points.iter().map(|&x| x + Vec2::new(cx, cy)).collect());
            let ds = derive_velocity(&shifted).unwrap();
            for (s, o) in ds.vectors.iter().zip(&dp.vectors) {
                prop_assert!((*s - *o).norm() < 1e-9);
            }
            let offset = VelocitySeq::new(dp.vectors.iter().map(|&v| v + Vec2::new(cx, cy)).collect());
            let (a1, a2) = (derive_accel(&offset).unwrap(), derive_accel(&dp).unwrap());
            for (s, o) in a1.vectors.iter().zip(&a2.vectors) {
                prop_assert!((*s - *o).norm() < 1e-9);
            }
        }

        #[test]
        fn pseudo_sequences_preserve_length(p in seq_strategy()) {
            let p = pos(&p);
            let v = pseudo_velocity(&p, Vec2::ZERO).unwrap();
            prop_assert_eq!(v.len(), p.len());
            prop_assert_eq!(pseudo_accel(&v, Vec2::ZERO).unwrap().len(), p.len());
        }
    }
}
