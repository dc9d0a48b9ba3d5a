//! Heuristic evaluation of velocity and acceleration candidates and the
//! learnable score that picks one candidate pair per agent.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::Vec2;

/// Learnable mixing weights of the directional and acceleration scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreWeights {
    pub w_alpha: f64,
    pub w_beta: f64,
}

impl Default for ScoreWeights {
    fn default() -> Self {
        ScoreWeights {
            w_alpha: 0.5,
            w_beta: 0.5,
        }
    }
}

/// Per-candidate scores for one agent. `selected_index` is zero-based.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateScores {
    pub dc: Vec<f64>,
    pub sim: Vec<f64>,
    pub combined: Vec<f64>,
    pub selected_index: usize,
}

/// Cosine between the observed global velocity and a candidate's first velocity.
///
/// Zero-norm inputs score 0 so stationary agents stay neutral.
pub fn directional_consistency(v_global: Vec2, first_pred_vel: Vec2) -> f64 {
    let denom = v_global.norm() * first_pred_vel.norm();
    if denom == 0.0 || !denom.is_finite() {
        return 0.0;
    }
    (v_global.dot(first_pred_vel) / denom).clamp(-1.0, 1.0)
}

/// Mean and population standard deviation of acceleration magnitudes.
pub fn magnitude_stats(acc: &[Vec2]) -> Result<(f64, f64)> {
    if acc.is_empty() {
        return Err(Error::invalid("acceleration statistics of an empty sequence"));
    }
    let n = acc.len() as f64;
    let mags: Vec<f64> = acc.iter().map(|a| a.norm()).collect();
    let mean = mags.iter().sum::<f64>() / n;
    let var = mags.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}

/// Distance between the (mean, std) magnitude statistics of two acceleration
/// sequences. Smaller is more similar.
pub fn accel_similarity(hist_accel: &[Vec2], pred_accel: &[Vec2]) -> Result<f64> {
    let (mu_h, sd_h) = magnitude_stats(hist_accel)?;
    let (mu_p, sd_p) = magnitude_stats(pred_accel)?;
    Ok((mu_h - mu_p).hypot(sd_h - sd_p))
}

/// Numerically stable softmax.
pub fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// `w_alpha * softmax(dc) + w_beta * softmax(-sim)`.
///
/// `sim` is negated so the most similar (smallest) candidate gets the largest share.
pub fn combined_scores(dc: &[f64], sim: &[f64], w: ScoreWeights) -> Result<Vec<f64>> {
    if dc.len() != sim.len() {
        return Err(Error::invalid(format!(
            "score length mismatch: {} directional vs {} similarity",
            dc.len(),
            sim.len()
        )));
    }
    if dc.is_empty() {
        return Err(Error::invalid("no candidates to score"));
    }
    let neg_sim: Vec<f64> = sim.iter().map(|s| -s).collect();
    Ok(softmax(dc)
        .into_iter()
        .zip(softmax(&neg_sim))
        .map(|(a, b)| w.w_alpha * a + w.w_beta * b)
        .collect())
}

/// Index of the maximum; ties go to the lowest index.
pub fn select_best(scores: &[f64]) -> Result<usize> {
    argmax(scores).ok_or_else(|| Error::invalid("select_best on empty scores"))
}

pub(crate) fn argmax(xs: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &x) in xs.iter().enumerate() {
        match best {
            Some((_, b)) if x <= b => {}
            _ => best = Some((i, x)),
        }
    }
    best.map(|(i, _)| i)
}

pub(crate) fn argmin(xs: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &x) in xs.iter().enumerate() {
        match best {
            Some((_, b)) if x >= b => {}
            _ => best = Some((i, x)),
        }
    }
    best.map(|(i, _)| i)
}

/// Scores all K candidates of one agent.
///
/// `first_vels[k]` is the first predicted velocity of candidate k and
/// `pred_accels[k]` its full predicted acceleration sequence.
pub fn score_candidates(
    v_global: Vec2,
    hist_accel: &[Vec2],
    first_vels: &[Vec2],
    pred_accels: &[&[Vec2]],
    w: ScoreWeights,
) -> Result<CandidateScores> {
    let dc: Vec<f64> = first_vels
        .iter()
        .map(|&v| directional_consistency(v_global, v))
        .collect();
    let sim = pred_accels
        .iter()
        .map(|a| accel_similarity(hist_accel, a))
        .collect::<Result<Vec<_>>>()?;
    let combined = combined_scores(&dc, &sim, w)?;
    let selected_index = select_best(&combined)?;
    Ok(CandidateScores {
        dc,
        sim,
        combined,
        selected_index,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn v(x: f64, y: f64) -> Vec2 {
        Vec2::new(x, y)
    }

    #[test]
    fn directional_examples() {
        assert_abs_diff_eq!(directional_consistency(v(1., 0.), v(1., 0.)), 1.0);
        assert_abs_diff_eq!(directional_consistency(v(1., 0.), v(0., 1.)), 0.0);
        assert_abs_diff_eq!(directional_consistency(v(1., 0.), v(-2., 0.)), -1.0);
        assert_eq!(directional_consistency(Vec2::ZERO, v(1., 0.)), 0.0);
        assert_eq!(directional_consistency(v(1., 1.), Vec2::ZERO), 0.0);
    }

    #[test]
    fn similarity_examples() {
        let x = [v(1., 2.), v(-0.5, 0.3), v(0., 0.)];
        assert_eq!(accel_similarity(&x, &x).unwrap(), 0.0);
        let hist = [v(1., 0.), v(0., 1.), v(-1., 0.)];
        let pred = [v(3., 0.), v(0., -3.)];
        assert_abs_diff_eq!(accel_similarity(&hist, &pred).unwrap(), 2.0, epsilon = 1e-12);
        assert_eq!(accel_similarity(&[v(1., 0.)], &[v(0., 1.)]).unwrap(), 0.0);
        assert!(accel_similarity(&[], &[v(0., 1.)]).is_err());
        assert!(accel_similarity(&[v(0., 1.)], &[]).is_err());
    }

    #[test]
    fn combined_examples() {
        let w = ScoreWeights { w_alpha: 0.3, w_beta: 0.9 };
        let s = combined_scores(&[0.2], &[5.0], w).unwrap();
        assert_abs_diff_eq!(s[0], 1.2, epsilon = 1e-12);

        // Independent evaluation: e / (e + e^-1) and e^-1 / (e + e^-1).
        let e = std::f64::consts::E;
        let s = combined_scores(&[1., -1.], &[0., 0.], ScoreWeights { w_alpha: 1., w_beta: 0. }).unwrap();
        assert_abs_diff_eq!(s[0], e / (e + 1. / e), epsilon = 1e-12);
        assert_abs_diff_eq!(s[1], (1. / e) / (e + 1. / e), epsilon = 1e-12);
        assert_abs_diff_eq!(s[0], 0.8808, epsilon = 1e-4);
        assert_abs_diff_eq!(s[1], 0.1192, epsilon = 1e-4);

        let s = combined_scores(&[0.4; 4], &[2.0; 4], w).unwrap();
        for x in s {
            assert_abs_diff_eq!(x, 1.2 / 4.0, epsilon = 1e-12);
        }
        assert!(combined_scores(&[1.0], &[1.0, 2.0], w).is_err());
    }

    #[test]
    fn select_examples() {
        assert_eq!(select_best(&[0.1, 0.9, 0.3]).unwrap(), 1);
        assert_eq!(select_best(&[0.5, 0.5]).unwrap(), 0);
        assert_eq!(select_best(&[10.1, 10.9, 10.3]).unwrap(), 1);
        assert!(select_best(&[]).is_err());
        assert_eq!(argmin(&[3.0, 1.0, 1.0]), Some(1));
    }

    #[test]
    fn similar_candidate_wins_the_sim_share() {
        let s = combined_scores(&[0., 0.], &[0.1, 3.0], ScoreWeights { w_alpha: 0., w_beta: 1. }).unwrap();
        assert_eq!(select_best(&s).unwrap(), 0);
    }

    #[test]
    fn score_candidates_picks_aligned_and_similar() {
        let hist = [v(0.1, 0.), v(0.1, 0.)];
        let good = [v(0.1, 0.), v(0.1, 0.)];
        let bad = [v(2., 0.), v(0., 0.)];
        let s = score_candidates(
            v(1., 0.),
            &hist,
            &[v(-1., 0.), v(1., 0.)],
            &[&bad, &good],
            ScoreWeights::default(),
        )
        .unwrap();
        assert_eq!(s.selected_index, 1);
        assert_eq!(s.dc, vec![-1.0, 1.0]);
        assert_eq!(s.sim[1], 0.0);
    }

    proptest! {
        #[test]
        fn cosine_is_bounded_symmetric_and_scale_invariant(
            ax in -10.0..10.0f64, ay in -10.0..10.0f64, bx in -10.0..10.0f64, by in -10.0..10.0f64,
            c1 in 0.01..100.0f64, c2 in 0.01..100.0f64,
        ) {
            let (a, b) = (v(ax, ay), v(bx, by));
            let d = directional_consistency(a, b);
            prop_assert!(d.abs() <= 1.0);
            prop_assert!((d - directional_consistency(b, a)).abs() < 1e-12);
            prop_assert!((d - directional_consistency(a * c1, b * c2)).abs() < 1e-9);
        }

        #[test]
        fn combined_scores_sum_to_weight_total(
            dc in prop::collection::vec(-1.0..1.0f64, 1..20),
            wa in -2.0..2.0f64, wb in -2.0..2.0f64, seed in 0u64..1000,
        ) {
            let sim: Vec<f64> = dc.iter().enumerate().map(|(i, d)| ((i as u64 * 31 + seed) % 17) as f64 * 0.1 + d.abs()).collect();
            let s = combined_scores(&dc, &sim, ScoreWeights { w_alpha: wa, w_beta: wb }).unwrap();
            prop_assert!((s.iter().sum::<f64>() - (wa + wb)).abs() < 1e-9);
        }
    }
}
