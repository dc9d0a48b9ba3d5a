//! One optimisation step over all loss terms, and the epoch loop around it.
//!
//! Losses are computed on plain arrays with their own gradients and spliced into
//! the graph as opaque nodes. The combined score weights receive gradient from
//! the consistency term through a straight-through path: the selected targets
//! keep the hard (argmax) value in the forward pass while their gradient flows
//! into the softmax of the combined scores.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::arrays::{CandidateArray, TrackArray};
use crate::autodiff::{Graph, ParamId, Tensor, Var};
use crate::checkpoint;
use crate::config::{TrainConfig, VaSelection};
use crate::data::SceneWindow;
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, MinMode};
use crate::kinematics::{global_velocity, pseudo_accel, pseudo_velocity, Vec2};
use crate::losses::{
    cons1_loss, cons2_loss, huber_mean, mse_best_of_k_loss, position_loss, total_loss, va_loss,
    LossConfig, LossReport, LossTerms, PositionLossKind,
};
use crate::model::{ModelInput, TrajectoryModel};
use crate::optim::{clip_global_norm, Adam};
use crate::records::{JsonlWriter, LogRecord};
use crate::scoring::{accel_similarity, argmax, argmin, combined_scores, directional_consistency, select_best, softmax};

pub const CHECKPOINT_FILE: &str = "best.safetensors";
pub const LOG_FILE: &str = "train_log.jsonl";

/// Model inputs plus targets, all in the model's scaled, anchor-relative frame.
#[derive(Debug, Clone)]
pub struct TrainBatch {
    pub input: ModelInput,
    pub gt_pos: TrackArray,
    pub gt_vel: TrackArray,
    pub gt_acc: TrackArray,
    pub last_vel: Vec<Vec2>,
    pub global_vel: Vec<Vec2>,
    pub hist_acc: Vec<Vec<Vec2>>,
}

impl TrainBatch {
    pub fn new(windows: &[&SceneWindow], t_obs: usize, t_pred: usize, scale: f64) -> Result<Self> {
        let observed: Vec<_> = windows.iter().map(|w| w.observed.as_slice()).collect();
        let input = ModelInput::from_scenes(&observed, t_obs, scale)?;
        let inv = 1.0 / scale;
        let (mut pos, mut vel, mut acc) = (Vec::new(), Vec::new(), Vec::new());
        let (mut last_vel, mut global_vel, mut hist_acc) = (Vec::new(), Vec::new(), Vec::new());
        for w in windows {
            for (obs, fut) in w.observed.iter().zip(&w.future) {
                if fut.len() != t_pred {
                    return Err(Error::invalid(format!(
                        "future of {} steps, expected {t_pred}",
                        fut.len()
                    )));
                }
                let anchor = obs.position.points[t_obs - 1];
                let lv = obs.last_velocity();
                let v = pseudo_velocity(fut, anchor)?;
                let a = pseudo_accel(&v, lv)?;
                pos.push(fut.points.iter().map(|&p| (p - anchor) * inv).collect::<Vec<_>>());
                vel.push(v.vectors.iter().map(|&x| x * inv).collect::<Vec<_>>());
                acc.push(a.vectors.iter().map(|&x| x * inv).collect::<Vec<_>>());
                last_vel.push(lv * inv);
                global_vel.push(global_velocity(&obs.position)?);
                hist_acc.push(obs.accel_history().vectors.iter().map(|&x| x * inv).collect());
            }
        }
        Ok(TrainBatch {
            input,
            gt_pos: TrackArray::from_points(&pos)?,
            gt_vel: TrackArray::from_points(&vel)?,
            gt_acc: TrackArray::from_points(&acc)?,
            last_vel,
            global_vel,
            hist_acc,
        })
    }

    pub fn num_agents(&self) -> usize {
        self.input.num_agents()
    }
}

/// Loss values and parameter gradients of one forward/backward pass.
pub struct StepGrads {
    pub report: LossReport,
    pub grads: Vec<(ParamId, Vec<f64>)>,
    /// Per agent: chosen velocity candidate, acceleration candidate and consistency target.
    pub selections: Vec<(usize, usize, usize)>,
}

fn candidates(v: Var<'_>) -> Result<CandidateArray> {
    let t = v.value();
    let s = t.shape();
    CandidateArray::from_data(s[0], s[1], s[2], t.data().to_vec())
}

fn tensor_of(c: &CandidateArray) -> Tensor {
    Tensor::new(&[c.agents, c.k, c.steps, 2], c.data.clone())
}

fn track_tensor(t: &TrackArray) -> Tensor {
    Tensor::new(&[t.agents, t.steps, 2], t.data.clone())
}

fn finite(term: &'static str, v: f64, step: usize) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NumericalAbort { term, step })
    }
}

/// Candidate index with the smallest Huber distance to the target, per agent.
fn closest_by_huber(c: &CandidateArray, gt: &TrackArray, delta: f64) -> Result<Vec<usize>> {
    (0..c.agents)
        .map(|i| {
            let errs = (0..c.k)
                .map(|k| huber_mean(c.candidate(i, k), gt.row(i), delta).map(|h| h.value))
                .collect::<Result<Vec<_>>>()?;
            Ok(argmin(&errs).expect("k > 0"))
        })
        .collect()
}

pub struct Trainer {
    pub model: TrajectoryModel,
    pub loss: LossConfig,
    pub va_selection: VaSelection,
    pub grad_clip: f64,
    opt: Adam,
    seed: u64,
    step: usize,
}

impl Trainer {
    pub fn new(model: TrajectoryModel, cfg: &TrainConfig) -> Self {
        let opt = Adam::new(&model.params, cfg.learning_rate);
        Trainer {
            model,
            loss: cfg.loss.clone(),
            va_selection: cfg.va_selection,
            grad_clip: cfg.grad_clip,
            opt,
            seed: cfg.seed,
            step: 0,
        }
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn learning_rate(&self) -> f64 {
        self.opt.lr
    }

    /// Forward and backward pass without updating parameters.
    pub fn compute(&self, batch: &TrainBatch) -> Result<StepGrads> {
        let model = &self.model;
        let cfg = &self.loss;
        let step = self.step;
        let g = Graph::new();
        let dropout_seed = self.seed ^ (step as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let ctx = model.train_ctx(&g, dropout_seed);
        let pred = model.forward(&ctx, &batch.input)?;
        let pos = candidates(pred.positions)?;
        let vel = candidates(pred.velocities)?;
        let acc = candidates(pred.accels)?;
        let (n, k) = (pos.agents, pos.k);

        // per-candidate heuristics
        let mut dc = Vec::with_capacity(n);
        let mut sim = Vec::with_capacity(n);
        for i in 0..n {
            dc.push(
                (0..k)
                    .map(|c| directional_consistency(batch.global_vel[i], vel.point(i, c, 0)))
                    .collect::<Vec<_>>(),
            );
            sim.push(
                (0..k)
                    .map(|c| accel_similarity(&batch.hist_acc[i], &acc.points(i, c)))
                    .collect::<Result<Vec<_>>>()?,
            );
        }
        let weights = model.score_weights();
        let (vel_idx, acc_idx, joint_idx): (Vec<usize>, Vec<usize>, Vec<usize>) = match self.va_selection {
            VaSelection::Heuristic => {
                let mut joint = Vec::with_capacity(n);
                for i in 0..n {
                    joint.push(select_best(&combined_scores(&dc[i], &sim[i], weights)?)?);
                }
                (
                    dc.iter().map(|d| argmax(d).expect("k > 0")).collect(),
                    sim.iter().map(|s| argmin(s).expect("k > 0")).collect(),
                    joint,
                )
            }
            VaSelection::GroundTruth => {
                let v = closest_by_huber(&vel, &batch.gt_vel, cfg.huber_delta)?;
                let a = closest_by_huber(&acc, &batch.gt_acc, cfg.huber_delta)?;
                (v.clone(), a, v)
            }
        };

        let mut terms = LossTerms::default();
        let mut parts: Vec<Var<'_>> = Vec::new();

        if cfg.enable_pos {
            let graded = match cfg.position_kind {
                PositionLossKind::Tolerance => position_loss(&pos, &batch.gt_pos, cfg)?,
                PositionLossKind::MseBestOfK => mse_best_of_k_loss(&pos, &batch.gt_pos)?,
            };
            terms.pos = finite("pos", graded.value, step)?;
            parts.push(g.custom(&[pred.positions], terms.pos, vec![tensor_of(&graded.grad)]));
        }
        if cfg.enable_va {
            let r = va_loss(&vel, &vel_idx, &batch.gt_vel, &acc, &acc_idx, &batch.gt_acc, cfg)?;
            terms.va = finite("va", r.value, step)?;
            parts.push(g.custom(
                &[pred.velocities, pred.accels],
                terms.va,
                vec![tensor_of(&r.d_vel), tensor_of(&r.d_acc)],
            ));
        }
        if cfg.enable_cons1 {
            let r = cons1_loss(&vel, &acc, &batch.last_vel)?;
            terms.cons1 = finite("cons1", r.value, step)?;
            parts.push(g.custom(
                &[pred.velocities, pred.accels],
                terms.cons1,
                vec![tensor_of(&r.d_vel), tensor_of(&r.d_acc)],
            ));
        }
        if cfg.enable_cons2 {
            let sel_vel = vel.select(&joint_idx);
            let sel_acc = acc.select(&joint_idx);
            let anchors = vec![Vec2::ZERO; n];
            let r = cons2_loss(&pos, &anchors, &batch.last_vel, &sel_vel, &sel_acc)?;
            terms.cons2 = finite("cons2", r.value, step)?;
            let (tv, ta) = match self.va_selection {
                VaSelection::Heuristic => (
                    straight_through(&g, model, &dc, &sim, &vel, &sel_vel),
                    straight_through(&g, model, &dc, &sim, &acc, &sel_acc),
                ),
                VaSelection::GroundTruth => (
                    g.constant(track_tensor(&sel_vel)),
                    g.constant(track_tensor(&sel_acc)),
                ),
            };
            let node = g.custom(
                &[pred.positions, tv, ta],
                terms.cons2,
                vec![tensor_of(&r.d_pos), track_tensor(&r.d_sel_vel), track_tensor(&r.d_sel_acc)],
            );
            parts.push(node.scale(cfg.lambda));
        }

        let report = total_loss(terms, cfg);
        finite("total", report.total, step)?;
        let root = parts
            .into_iter()
            .reduce(|a, b| a.add(b))
            .ok_or_else(|| Error::Config("no loss term enabled".into()))?;
        let grads = g.backward(root);
        let grads = grads
            .params()
            .into_iter()
            .map(|(id, gr)| (id, gr.to_vec()))
            .collect();
        let selections = (0..n).map(|i| (vel_idx[i], acc_idx[i], joint_idx[i])).collect();
        Ok(StepGrads {
            report,
            grads,
            selections,
        })
    }

    /// Forward, backward, clipping and one Adam update.
    pub fn train_step(&mut self, batch: &TrainBatch) -> Result<LossReport> {
        let StepGrads { report, mut grads, .. } = self.compute(batch)?;
        if grads.iter().any(|(_, g)| g.iter().any(|x| !x.is_finite())) {
            return Err(Error::NumericalAbort {
                term: "gradient",
                step: self.step,
            });
        }
        clip_global_norm(&mut grads, self.grad_clip);
        self.opt.step(&mut self.model.params, &grads);
        self.step += 1;
        Ok(report)
    }
}

/// Selected targets whose value is the hard selection and whose gradient reaches
/// the score weights through `softmax(combined scores)`.
fn straight_through<'g>(
    g: &'g Graph,
    model: &TrajectoryModel,
    dc: &[Vec<f64>],
    sim: &[Vec<f64>],
    cands: &CandidateArray,
    hard: &TrackArray,
) -> Var<'g> {
    let (n, k, steps) = (cands.agents, cands.k, cands.steps);
    let dc_soft: Vec<f64> = dc.iter().flat_map(|d| softmax(d)).collect();
    let sim_soft: Vec<f64> = sim
        .iter()
        .flat_map(|s| softmax(&s.iter().map(|x| -x).collect::<Vec<_>>()))
        .collect();
    let wa = g.param(&model.params, model.w_alpha);
    let wb = g.param(&model.params, model.w_beta);
    let scores = g
        .constant(Tensor::new(&[n, k], dc_soft))
        .mul_scalar(wa)
        .add(g.constant(Tensor::new(&[n, k], sim_soft)).mul_scalar(wb));
    let q = scores.softmax();
    let zero_valued = q.sub(q.detach()).reshape(&[n, 1, k]);
    let c = g.constant(Tensor::new(&[n, k, steps * 2], cands.data.clone()));
    let st = zero_valued.bmm(c, false).reshape(&[n, steps, 2]);
    g.constant(track_tensor(hard)).add(st)
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub best_val_ade: f64,
    pub steps: usize,
    pub last_report: LossReport,
}

/// Splits off a seeded validation subset (`fraction` of windows, at least one
/// when there are two or more). With a single window it is used for both.
pub fn validation_split(windows: &[SceneWindow], fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..windows.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    if windows.len() < 2 || fraction <= 0.0 {
        return (idx.clone(), idx);
    }
    let n_val = ((windows.len() as f64 * fraction).round() as usize).clamp(1, windows.len() - 1);
    let val = idx[..n_val].to_vec();
    let train = idx[n_val..].to_vec();
    (train, val)
}

/// Trains on `windows`, logging every step and keeping the checkpoint with the
/// best validation ADE in `out_dir`.
pub fn fit(windows: &[SceneWindow], cfg: &TrainConfig, out_dir: &Path) -> Result<FitOutcome> {
    fit_with(windows, cfg, out_dir, |_, _| {})
}

/// [`fit`] with a callback after every step.
pub fn fit_with(
    windows: &[SceneWindow],
    cfg: &TrainConfig,
    out_dir: &Path,
    mut on_step: impl FnMut(usize, &LossReport),
) -> Result<FitOutcome> {
    cfg.validate()?;
    if windows.is_empty() {
        return Err(Error::invalid("no training windows"));
    }
    let mc = &cfg.model;
    let (train_idx, val_idx) = validation_split(windows, cfg.val_fraction, cfg.seed);
    let val: Vec<SceneWindow> = val_idx.iter().map(|&i| windows[i].clone()).collect();
    let mut trainer = Trainer::new(TrajectoryModel::new(mc.clone())?, cfg);
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let ckpt = out_dir.join(CHECKPOINT_FILE);
    let log_path = out_dir.join(LOG_FILE);
    let mut log = JsonlWriter::create(&log_path)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut order = train_idx.clone();
    let mut best = f64::INFINITY;
    let mut last = LossReport::default();
    let cap = cfg.max_steps.unwrap_or(usize::MAX);

    let validate = |trainer: &Trainer, best: &mut f64| -> Result<()> {
        let r = evaluate(&trainer.model, &val, mc.k, mc.t_pred, MinMode::Independent)?;
        log::info!("step {}: validation ADE {:.4} FDE {:.4}", trainer.steps_done(), r.ade, r.fde);
        if r.ade < *best || !best.is_finite() {
            *best = r.ade;
            checkpoint::save(&trainer.model, &ckpt)?;
        }
        Ok(())
    };

    'epochs: for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            if trainer.steps_done() >= cap {
                break 'epochs;
            }
            let batch_windows: Vec<&SceneWindow> = chunk.iter().map(|&i| &windows[i]).collect();
            let batch = TrainBatch::new(&batch_windows, mc.t_obs, mc.t_pred, mc.coord_scale)?;
            let step = trainer.steps_done();
            last = trainer.train_step(&batch)?;
            log.write(&LogRecord::new(step, &last))?;
            on_step(step, &last);
            if cfg.eval_every > 0 && trainer.steps_done() % cfg.eval_every == 0 {
                validate(&trainer, &mut best)?;
            }
        }
        if cfg.eval_every == 0 {
            log::debug!("epoch {epoch} done");
            validate(&trainer, &mut best)?;
        }
    }
    if !ckpt.exists() {
        validate(&trainer, &mut best)?;
    }
    Ok(FitOutcome {
        checkpoint: ckpt,
        log: log_path,
        best_val_ade: best,
        steps: trainer.steps_done(),
        last_report: last,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ablation_variant;
    use crate::data::{synth_dataset, SynthKind};
    use crate::model::ModelConfig;

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            learning_rate: 1e-3,
            model: ModelConfig {
                d_model: 16,
                n_heads: 2,
                ff_width: 32,
                k: 4,
                t_obs: 8,
                t_pred: 6,
                dropout: 0.0,
                ..ModelConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    fn batch(cfg: &TrainConfig, seed: u64) -> TrainBatch {
        let ws = synth_dataset(&SynthKind::ALL, 4, 2, 0.0, seed, cfg.model.t_obs, cfg.model.t_pred).unwrap();
        let refs: Vec<&SceneWindow> = ws.iter().collect();
        TrainBatch::new(&refs, cfg.model.t_obs, cfg.model.t_pred, 1.0).unwrap()
    }

    #[test]
    fn batch_targets_are_anchor_relative() {
        let cfg = small_cfg();
        let b = batch(&cfg, 1);
        assert_eq!(b.num_agents(), 8);
        // first pseudo velocity equals the first relative position
        for i in 0..8 {
            assert!((b.gt_pos.point(i, 0).x - b.gt_vel.point(i, 0).x).abs() < 1e-12);
        }
    }

    #[test]
    fn disabled_terms_report_zero() {
        let mut cfg = small_cfg();
        for a in ["no_va", "no_cons1", "no_cons2"] {
            cfg = ablation_variant(&cfg, a).unwrap();
        }
        let b = batch(&cfg, 2);
        let t = Trainer::new(TrajectoryModel::new(cfg.model.clone()).unwrap(), &cfg);
        let r = t.compute(&b).unwrap().report;
        assert_eq!((r.va, r.cons1, r.cons2), (0.0, 0.0, 0.0));
        assert!(r.pos > 0.0 && r.total == r.pos);
    }

    #[test]
    fn every_parameter_group_receives_gradient() {
        let cfg = small_cfg();
        let b = batch(&cfg, 3);
        let t = Trainer::new(TrajectoryModel::new(cfg.model.clone()).unwrap(), &cfg);
        let out = t.compute(&b).unwrap();
        let norm_of = |prefix: &str| -> f64 {
            out.grads
                .iter()
                .filter(|(id, _)| t.model.params.name(*id).starts_with(prefix))
                .flat_map(|(_, g)| g.iter())
                .map(|x| x * x)
                .sum::<f64>()
        };
        for group in [
            "pos.encoder", "vel.encoder", "acc.encoder", "inject.acc_to_vel", "inject.vel_to_pos",
            "pos.decoder", "vel.decoder", "acc.decoder", "score.w_alpha", "score.w_beta",
        ] {
            assert!(norm_of(group) > 0.0, "{group} has no gradient");
        }
        assert!(out.grads.iter().all(|(_, g)| g.iter().all(|x| x.is_finite())));
    }

    #[test]
    fn first_step_is_deterministic() {
        let cfg = TrainConfig {
            model: ModelConfig { dropout: 0.1, ..small_cfg().model },
            ..small_cfg()
        };
        let b = batch(&cfg, 4);
        let run = || {
            let mut t = Trainer::new(TrajectoryModel::new(cfg.model.clone()).unwrap(), &cfg);
            t.train_step(&b).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn selected_targets_keep_their_hard_value() {
        let cfg = small_cfg();
        let b = batch(&cfg, 5);
        let t = Trainer::new(TrajectoryModel::new(cfg.model.clone()).unwrap(), &cfg);
        let g = Graph::new();
        let ctx = t.model.eval_ctx(&g);
        let pred = t.model.forward(&ctx, &b.input).unwrap();
        let vel = candidates(pred.velocities).unwrap();
        let n = vel.agents;
        let dc = vec![vec![0.1, 0.9, 0.3, 0.2]; n];
        let sim = vec![vec![1.0, 0.5, 0.2, 3.0]; n];
        let hard = vel.select(&vec![2; n]);
        let st = straight_through(&g, &t.model, &dc, &sim, &vel, &hard);
        assert_eq!(st.value().data(), hard.data.as_slice());
        let w = g.constant(Tensor::full(&st.shape(), 1.0));
        let grads = g.backward(st.mul(w).sum_all());
        assert!(grads.param(t.model.w_alpha).is_some());
    }

    #[test]
    fn manual_selection_trains() {
        let cfg = ablation_variant(&small_cfg(), "manual_va_select").unwrap();
        let b = batch(&cfg, 6);
        let mut t = Trainer::new(TrajectoryModel::new(cfg.model.clone()).unwrap(), &cfg);
        let r = t.train_step(&b).unwrap();
        assert!(r.total.is_finite() && r.va > 0.0);
    }

    #[test]
    fn fit_writes_log_and_checkpoint() {
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 4,
            ..small_cfg()
        };
        let ws = synth_dataset(&SynthKind::ALL, 10, 1, 0.0, 7, 8, 6).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let out = fit(&ws, &cfg, dir.path()).unwrap();
        // 9 training windows in batches of 4 -> 3 steps per epoch
        assert_eq!(out.steps, 6);
        assert!(out.best_val_ade.is_finite());
        let log = std::fs::read_to_string(&out.log).unwrap();
        assert_eq!(log.lines().count(), 6);
        let back = checkpoint::load(&out.checkpoint).unwrap();
        assert_eq!(back.config, cfg.model);
    }
}
