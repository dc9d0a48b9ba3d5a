//! Displacement metrics, best-of-K aggregation and batched inference.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::arrays::CandidateArray;
use crate::autodiff::Graph;
use crate::data::SceneWindow;
use crate::error::{Error, Result};
use crate::kinematics::{KinematicTriple, PositionSeq, Vec2};
use crate::model::{ModelInput, TrajectoryModel};

/// Windows per forward pass during inference.
pub const INFERENCE_CHUNK: usize = 64;

fn check_pair(pred: &[Vec2], gt: &[Vec2]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::invalid(format!(
            "prediction has {} steps, ground truth {}",
            pred.len(),
            gt.len()
        )));
    }
    if gt.is_empty() {
        return Err(Error::invalid("empty trajectory"));
    }
    Ok(())
}

pub fn ade_points(pred: &[Vec2], gt: &[Vec2]) -> Result<f64> {
    check_pair(pred, gt)?;
    Ok(pred.iter().zip(gt).map(|(p, g)| p.distance(*g)).sum::<f64>() / gt.len() as f64)
}

pub fn fde_points(pred: &[Vec2], gt: &[Vec2]) -> Result<f64> {
    check_pair(pred, gt)?;
    Ok(pred[pred.len() - 1].distance(gt[gt.len() - 1]))
}

/// Mean Euclidean distance over steps.
pub fn ade(pred: &PositionSeq, gt: &PositionSeq) -> Result<f64> {
    ade_points(&pred.points, &gt.points)
}

/// Euclidean distance at the last step.
pub fn fde(pred: &PositionSeq, gt: &PositionSeq) -> Result<f64> {
    fde_points(&pred.points, &gt.points)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Ade,
    Fde,
}

impl Metric {
    fn eval(self, pred: &[Vec2], gt: &[Vec2]) -> Result<f64> {
        match self {
            Metric::Ade => ade_points(pred, gt),
            Metric::Fde => fde_points(pred, gt),
        }
    }
}

/// Smallest metric value over the candidates.
pub fn min_of_k(preds: &[PositionSeq], gt: &PositionSeq, metric: Metric) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::invalid("min_of_k over zero candidates"));
    }
    let mut best = f64::INFINITY;
    for p in preds {
        best = best.min(metric.eval(&p.points, &gt.points)?);
    }
    Ok(best)
}

/// Whether best-of-K ADE and FDE may come from different candidates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MinMode {
    #[default]
    Independent,
    /// FDE is taken from the candidate with the lowest ADE.
    Joint,
}

/// Best-of-K ADE and FDE of one agent.
pub fn best_of_k(cands: &[Vec<Vec2>], gt: &[Vec2], mode: MinMode) -> Result<(f64, f64)> {
    if cands.is_empty() {
        return Err(Error::invalid("best_of_k over zero candidates"));
    }
    let ades = cands.iter().map(|c| ade_points(c, gt)).collect::<Result<Vec<_>>>()?;
    let fdes = cands.iter().map(|c| fde_points(c, gt)).collect::<Result<Vec<_>>>()?;
    let min = |v: &[f64]| v.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(match mode {
        MinMode::Independent => (min(&ades), min(&fdes)),
        MinMode::Joint => {
            let i = crate::scoring::argmin(&ades).expect("non-empty");
            (ades[i], fdes[i])
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneMetrics {
    pub scene: String,
    pub agents: usize,
    pub ade: f64,
    pub fde: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub ade: f64,
    pub fde: f64,
    pub k: usize,
    pub t_pred: usize,
    pub mode: MinMode,
    pub agents: usize,
    pub windows: usize,
    pub per_scene: Vec<SceneMetrics>,
}

impl EvalResult {
    pub fn report(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "min-of-{} over {} steps ({:?} minima), {} agents in {} windows",
            self.k, self.t_pred, self.mode, self.agents, self.windows
        );
        let _ = writeln!(s, "{:<16} {:>8} {:>10} {:>10}", "scene", "agents", "ADE", "FDE");
        for m in &self.per_scene {
            let _ = writeln!(s, "{:<16} {:>8} {:>10.4} {:>10.4}", m.scene, m.agents, m.ade, m.fde);
        }
        let _ = writeln!(s, "{:<16} {:>8} {:>10.4} {:>10.4}", "all", self.agents, self.ade, self.fde);
        s
    }
}

/// Absolute-coordinate candidates for every scene, `(agents, K, t_pred)` each.
pub fn predict<S: AsRef<[KinematicTriple]>>(model: &TrajectoryModel, scenes: &[S]) -> Result<Vec<CandidateArray>> {
    let cfg = &model.config;
    let mut out = Vec::with_capacity(scenes.len());
    for chunk in scenes.chunks(INFERENCE_CHUNK) {
        let input = ModelInput::from_scenes(chunk, cfg.t_obs, cfg.coord_scale)?;
        let g = Graph::new();
        let ctx = model.eval_ctx(&g);
        let pred = model.forward(&ctx, &input)?;
        let rel = pred.positions.value();
        let per_agent = cfg.k * cfg.t_pred * 2;
        let mut agent = 0;
        for scene in chunk {
            let n = scene.as_ref().len();
            let mut data = Vec::with_capacity(n * per_agent);
            for i in 0..n {
                let anchor = input.anchors[agent + i];
                let src = &rel.data()[(agent + i) * per_agent..(agent + i + 1) * per_agent];
                for c in src.chunks_exact(2) {
                    data.push(c[0] * input.scale + anchor.x);
                    data.push(c[1] * input.scale + anchor.y);
                }
            }
            agent += n;
            out.push(CandidateArray::from_data(n, cfg.k, cfg.t_pred, data)?);
        }
    }
    Ok(out)
}

/// Mean best-of-K ADE/FDE over all agents of `windows`, with a per-scene breakdown.
pub fn evaluate(
    model: &TrajectoryModel,
    windows: &[SceneWindow],
    k: usize,
    t_pred: usize,
    mode: MinMode,
) -> Result<EvalResult> {
    if t_pred != model.config.t_pred {
        return Err(Error::invalid(format!(
            "requested horizon {t_pred} but the model predicts {}",
            model.config.t_pred
        )));
    }
    if k != model.config.k {
        return Err(Error::invalid(format!(
            "requested K = {k} but the model has {} candidates",
            model.config.k
        )));
    }
    if windows.is_empty() {
        return Err(Error::invalid("no evaluation windows"));
    }
    for w in windows {
        if let Some(f) = w.future.iter().find(|f| f.len() != t_pred) {
            return Err(Error::invalid(format!(
                "window {} of {} has a {}-step future, expected {t_pred}",
                w.window_id,
                w.scene_id,
                f.len()
            )));
        }
    }
    let observed: Vec<&[KinematicTriple]> = windows.iter().map(|w| w.observed.as_slice()).collect();
    let preds = predict(model, &observed)?;
    let mut per_scene: BTreeMap<&str, (usize, f64, f64)> = BTreeMap::new();
    let (mut sum_a, mut sum_f, mut count) = (0.0, 0.0, 0);
    for (w, p) in windows.iter().zip(&preds) {
        for (i, gt) in w.future.iter().enumerate() {
            let cands: Vec<Vec<Vec2>> = (0..k).map(|c| p.points(i, c)).collect();
            let (a, f) = best_of_k(&cands, &gt.points, mode)?;
            let e = per_scene.entry(&w.scene_id).or_default();
            e.0 += 1;
            e.1 += a;
            e.2 += f;
            sum_a += a;
            sum_f += f;
            count += 1;
        }
    }
    Ok(EvalResult {
        ade: sum_a / count as f64,
        fde: sum_f / count as f64,
        k,
        t_pred,
        mode,
        agents: count,
        windows: windows.len(),
        per_scene: per_scene
            .into_iter()
            .map(|(s, (n, a, f))| SceneMetrics {
                scene: s.to_string(),
                agents: n,
                ade: a / n as f64,
                fde: f / n as f64,
            })
            .collect(),
    })
}
