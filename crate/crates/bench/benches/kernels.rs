use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use std::hint::black_box;

use trajcons_bench::{bench_model_config, candidates, points, track, windows};
use trajcons_core::config::TrainConfig;
use trajcons_core::data::SceneWindow;
use trajcons_core::kinematics::{derive_velocity, integrate_positions, PositionSeq};
use trajcons_core::losses::{cons1_loss, cons2_loss, position_loss, LossConfig};
use trajcons_core::model::{ModelInput, TrajectoryModel};
use trajcons_core::autodiff::Graph;
use trajcons_core::training::{TrainBatch, Trainer};

fn kinematics(c: &mut Criterion) {
    let p = PositionSeq::new(points(40, 1));
    c.bench_function("kinematics/derive_integrate_40", |b| {
        b.iter(|| {
            let v = derive_velocity(black_box(&p)).unwrap();
            integrate_positions(&v, p.points[0]).unwrap()
        })
    });
}

fn losses(c: &mut Criterion) {
    let (n, k, t) = (16, 20, 12);
    let preds = candidates(n, k, t, 2);
    let gt = track(n, t, 3);
    let cfg = LossConfig::default();
    c.bench_function("losses/position_16x20x12", |b| {
        b.iter(|| position_loss(black_box(&preds), &gt, &cfg).unwrap())
    });
    let acc = candidates(n, k, t, 4);
    let anchors = points(n, 5);
    c.bench_function("losses/cons1_16x20x12", |b| {
        b.iter(|| cons1_loss(black_box(&preds), &acc, &anchors).unwrap())
    });
    let (sv, sa) = (track(n, t, 6), track(n, t, 7));
    c.bench_function("losses/cons2_16x20x12", |b| {
        b.iter(|| cons2_loss(black_box(&preds), &anchors, &anchors, &sv, &sa).unwrap())
    });
}

fn model(c: &mut Criterion) {
    let mc = bench_model_config();
    let model = TrajectoryModel::new(mc.clone()).unwrap();
    let ws = windows(8, 3, &mc);
    let scenes: Vec<_> = ws.iter().map(|w| w.observed.as_slice()).collect();
    let input = ModelInput::from_scenes(&scenes, mc.t_obs, mc.coord_scale).unwrap();
    let mut group = c.benchmark_group("model");
    group.sample_size(20);
    group.bench_function("forward_8x3", |b| {
        b.iter(|| {
            let g = Graph::new();
            let ctx = model.eval_ctx(&g);
            model.forward(&ctx, black_box(&input)).unwrap().positions.value()
        })
    });

    let cfg = TrainConfig { learning_rate: 1e-4, model: mc.clone(), ..TrainConfig::default() };
    let refs: Vec<&SceneWindow> = ws.iter().collect();
    let batch = TrainBatch::new(&refs, mc.t_obs, mc.t_pred, mc.coord_scale).unwrap();
    group.bench_function("train_step_8x3", |b| {
        b.iter_batched(
            || Trainer::new(model.clone(), &cfg),
            |mut trainer| trainer.train_step(&batch).unwrap(),
            BatchSize::LargeInput,
        )
    });
    group.finish();
}

criterion_group!(benches, kinematics, losses, model);
criterion_main!(benches);
