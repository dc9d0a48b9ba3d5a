//! Three-stream forecaster: temporal encoders for position, velocity and
//! acceleration, cross-stream feature injection and K-query social decoders.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::kinematics::{KinematicTriple, Vec2};
use crate::nn::{
    sinusoidal_encoding, CrossInjection, Ctx, DecoderLayer, EncoderLayer, Init, LayerNorm, Linear,
    MASK_NEG,
};
use crate::scoring::ScoreWeights;

/// Encoder and decoder depth are fixed.
pub const NUM_LAYERS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers_enc: usize,
    pub n_layers_dec: usize,
    pub ff_width: usize,
    pub k: usize,
    pub t_obs: usize,
    pub t_pred: usize,
    pub dropout: f64,
    /// Inputs and outputs are divided by this before entering the network.
    pub coord_scale: f64,
    pub use_injection: bool,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            n_heads: 4,
            n_layers_enc: NUM_LAYERS,
            n_layers_dec: NUM_LAYERS,
            ff_width: 256,
            k: 20,
            t_obs: 8,
            t_pred: 12,
            dropout: 0.1,
            coord_scale: 1.0,
            use_injection: true,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.n_layers_enc != NUM_LAYERS || self.n_layers_dec != NUM_LAYERS {
            return bad(format!(
                "encoder and decoder depth must be {NUM_LAYERS}, got {} / {}",
                self.n_layers_enc, self.n_layers_dec
            ));
        }
        if self.k == 0 {
            return bad("k must be >= 1".into());
        }
        if self.t_obs < 3 {
            return bad(format!("t_obs must be >= 3, got {}", self.t_obs));
        }
        if self.t_pred == 0 || self.ff_width == 0 {
            return bad("t_pred and ff_width must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if !(self.coord_scale > 0.0 && self.coord_scale.is_finite()) {
            return bad(format!("coord_scale must be > 0, got {}", self.coord_scale));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stream {
    Position,
    Velocity,
    Accel,
}

impl Stream {
    pub const ALL: [Stream; 3] = [Stream::Position, Stream::Velocity, Stream::Accel];

    pub fn name(self) -> &'static str {
        match self {
            Stream::Position => "pos",
            Stream::Velocity => "vel",
            Stream::Accel => "acc",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

/// Encoder, query set, decoder and output head of one stream.
#[derive(Debug, Clone)]
pub struct StreamNet {
    pub embed: Linear,
    pub encoder: Vec<EncoderLayer>,
    pub encoder_norm: LayerNorm,
    pub queries: ParamId,
    pub decoder: Vec<DecoderLayer>,
    pub decoder_norm: LayerNorm,
    pub head: Linear,
}

impl StreamNet {
    fn new(store: &mut ParamStore, init: &mut Init, cfg: &ModelConfig, name: &str) -> Self {
        let d = cfg.d_model;
        StreamNet {
            embed: Linear::new(store, init, &format!("{name}.embed"), 2, d),
            encoder: (0..cfg.n_layers_enc)
                .map(|l| {
                    EncoderLayer::new(store, init, &format!("{name}.encoder.{l}"), d, cfg.n_heads, cfg.ff_width)
                })
                .collect(),
            encoder_norm: LayerNorm::new(store, &format!("{name}.encoder.norm"), d),
            queries: store.register(format!("{name}.queries"), init.normal(&[cfg.k, d], 1.0)),
            decoder: (0..cfg.n_layers_dec)
                .map(|l| {
                    DecoderLayer::new(store, init, &format!("{name}.decoder.{l}"), d, cfg.n_heads, cfg.ff_width)
                })
                .collect(),
            decoder_norm: LayerNorm::new(store, &format!("{name}.decoder.norm"), d),
            head: Linear::new(store, init, &format!("{name}.head"), d, cfg.t_pred * 2),
        }
    }
}

/// Network inputs for a batch of scenes, agents concatenated scene by scene.
///
/// Positions are relative to each agent's last observed position; all three
/// streams are divided by the coordinate scale.
#[derive(Debug, Clone)]
pub struct ModelInput {
    pub scene_sizes: Vec<usize>,
    pub positions: Tensor,
    pub velocities: Tensor,
    pub accels: Tensor,
    /// Last observed position of every agent, unscaled.
    pub anchors: Vec<Vec2>,
    pub scale: f64,
}

impl ModelInput {
    pub fn from_scenes<S: AsRef<[KinematicTriple]>>(scenes: &[S], t_obs: usize, scale: f64) -> Result<Self> {
        let mut sizes = Vec::with_capacity(scenes.len());
        let mut anchors = Vec::new();
        let (mut pos, mut vel, mut acc) = (Vec::new(), Vec::new(), Vec::new());
        for scene in scenes {
            let scene = scene.as_ref();
            if scene.is_empty() {
                return Err(Error::invalid("scene without agents"));
            }
            sizes.push(scene.len());
            for tri in scene {
                if tri.len() != t_obs {
                    return Err(Error::invalid(format!(
                        "observed length {} does not match model input length {t_obs}",
                        tri.len()
                    )));
                }
                let anchor = tri.position.points[t_obs - 1];
                anchors.push(anchor);
                for t in 0..t_obs {
                    let p = (tri.position.points[t] - anchor) * (1.0 / scale);
                    let v = tri.velocity.vectors[t] * (1.0 / scale);
                    let a = tri.accel.vectors[t] * (1.0 / scale);
                    pos.extend([p.x, p.y]);
                    vel.extend([v.x, v.y]);
                    acc.extend([a.x, a.y]);
                }
            }
        }
        let a = anchors.len();
        Ok(ModelInput {
            scene_sizes: sizes,
            positions: Tensor::new(&[a, t_obs, 2], pos),
            velocities: Tensor::new(&[a, t_obs, 2], vel),
            accels: Tensor::new(&[a, t_obs, 2], acc),
            anchors,
            scale,
        })
    }

    pub fn num_agents(&self) -> usize {
        self.anchors.len()
    }

    fn stream(&self, s: Stream) -> &Tensor {
        match s {
            Stream::Position => &self.positions,
            Stream::Velocity => &self.velocities,
            Stream::Accel => &self.accels,
        }
    }
}

/// K aligned candidates per agent and stream, each `(agents, K, t_pred, 2)` in
/// scaled coordinates relative to the agent's last observed position.
pub struct Prediction<'g> {
    pub positions: Var<'g>,
    pub velocities: Var<'g>,
    pub accels: Var<'g>,
}

#[derive(Debug, Clone)]
pub struct TrajectoryModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    streams: Vec<StreamNet>,
    /// Acceleration features into the velocity stream.
    inject_acc_vel: CrossInjection,
    /// Velocity features into the position stream.
    inject_vel_pos: CrossInjection,
    pub w_alpha: ParamId,
    pub w_beta: ParamId,
    encoding: Tensor,
}

impl TrajectoryModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init::new(config.init_seed);
        let streams = Stream::ALL
            .iter()
            .map(|s| StreamNet::new(&mut store, &mut init, &config, s.name()))
            .collect();
        let d = config.d_model;
        let inject_acc_vel = CrossInjection::new(&mut store, &mut init, "inject.acc_to_vel", d, config.n_heads);
        let inject_vel_pos = CrossInjection::new(&mut store, &mut init, "inject.vel_to_pos", d, config.n_heads);
        let defaults = ScoreWeights::default();
        let w_alpha = store.register("score.w_alpha", Tensor::scalar(defaults.w_alpha));
        let w_beta = store.register("score.w_beta", Tensor::scalar(defaults.w_beta));
        let encoding = sinusoidal_encoding(config.t_obs, d);
        Ok(TrajectoryModel {
            config,
            params: store,
            streams,
            inject_acc_vel,
            inject_vel_pos,
            w_alpha,
            w_beta,
            encoding,
        })
    }

    pub fn stream(&self, s: Stream) -> &StreamNet {
        &self.streams[s.index()]
    }

    pub fn score_weights(&self) -> ScoreWeights {
        ScoreWeights {
            w_alpha: self.params.get(self.w_alpha).item(),
            w_beta: self.params.get(self.w_beta).item(),
        }
    }

    /// Context with dropout disabled.
    pub fn eval_ctx<'g>(&'g self, graph: &'g Graph) -> Ctx<'g> {
        Ctx::eval(graph, &self.params)
    }

    pub fn train_ctx<'g>(&'g self, graph: &'g Graph, seed: u64) -> Ctx<'g> {
        Ctx::train(graph, &self.params, self.config.dropout, seed)
    }

    /// Encodes one stream, `(agents, t_obs, 2) -> (agents, t_obs, d_model)`, each agent
    /// independently.
    pub fn encode_stream<'g>(&self, ctx: &Ctx<'g>, stream: Stream, seq: Var<'g>) -> Result<Var<'g>> {
        let shape = seq.shape();
        if shape.len() != 3 || shape[1] != self.config.t_obs || shape[2] != 2 {
            return Err(Error::invalid(format!(
                "{} encoder expects (agents, {}, 2), got {shape:?}",
                stream.name(),
                self.config.t_obs
            )));
        }
        if !seq.value().all_finite() {
            return Err(Error::DataQuality(format!("non-finite value in {} input", stream.name())));
        }
        let net = self.stream(stream);
        let pe = ctx.constant(self.encoding.clone());
        let mut x = ctx.dropout(net.embed.forward(ctx, seq).add_bcast(pe));
        for layer in &net.encoder {
            x = layer.forward(ctx, x, None);
        }
        Ok(net.encoder_norm.forward(ctx, x))
    }

    /// Adds `source` stream information into `target` through cross-attention.
    /// `into` names the receiving stream: velocity (from acceleration) or
    /// position (from velocity).
    pub fn inject_features<'g>(
        &self,
        ctx: &Ctx<'g>,
        into: Stream,
        target: Var<'g>,
        source: Var<'g>,
    ) -> Result<Var<'g>> {
        let (ts, ss) = (target.shape(), source.shape());
        if ts != ss || ts.len() != 3 || ts[2] != self.config.d_model {
            return Err(Error::invalid(format!(
                "injection shapes differ: target {ts:?}, source {ss:?}"
            )));
        }
        let block = match into {
            Stream::Velocity => &self.inject_acc_vel,
            Stream::Position => &self.inject_vel_pos,
            Stream::Accel => return Err(Error::invalid("the acceleration stream receives no injection")),
        };
        Ok(block.forward(ctx, target, source))
    }

    /// Decodes K candidates for every agent slot of every scene.
    ///
    /// `memory` is `(scenes, max_agents, d_model)`; slots at or beyond
    /// `scene_sizes[b]` are padding and are masked out as attention keys.
    /// Returns `(scenes, max_agents, K, t_pred * 2)`.
    pub fn social_decode<'g>(
        &self,
        ctx: &Ctx<'g>,
        stream: Stream,
        memory: Var<'g>,
        scene_sizes: &[usize],
    ) -> Result<Var<'g>> {
        let shape = memory.shape();
        let (b, n, d) = (shape[0], shape[1], shape[2]);
        if shape.len() != 3 || b != scene_sizes.len() || d != self.config.d_model {
            return Err(Error::invalid(format!(
                "decoder memory {shape:?} does not match {} scenes",
                scene_sizes.len()
            )));
        }
        if let Some(i) = scene_sizes.iter().position(|&c| c == 0 || c > n) {
            return Err(Error::invalid(format!(
                "scene {i} has {} real agents out of {n} slots",
                scene_sizes[i]
            )));
        }
        let k = self.config.k;
        let heads = self.config.n_heads;
        let net = self.stream(stream);

        let mut mask = vec![0.0; b * k * heads * n * n];
        for (bi, &count) in scene_sizes.iter().enumerate() {
            let block = k * heads * n * n;
            for row in mask[bi * block..(bi + 1) * block].chunks_exact_mut(n) {
                row[count..].iter_mut().for_each(|v| *v = MASK_NEG);
            }
        }
        let mask = ctx.constant(Tensor::new(&[b * k * heads, n, n], mask));

        let queries = ctx.p(net.queries).expand(1, n);
        let mut x = memory
            .expand(1, k)
            .add_bcast(queries)
            .reshape(&[b * k, n, d]);
        for layer in &net.decoder {
            x = layer.forward(ctx, x, memory, k, Some(mask), Some(mask));
        }
        let out = net.head.forward(ctx, net.decoder_norm.forward(ctx, x));
        let m = self.config.t_pred * 2;
        Ok(out.reshape(&[b, k, n, m]).permute(&[0, 2, 1, 3]))
    }

    /// Runs the full network. Every output is `(agents, K, t_pred, 2)`.
    pub fn forward<'g>(&self, ctx: &Ctx<'g>, input: &ModelInput) -> Result<Prediction<'g>> {
        let a = input.num_agents();
        let feats: Vec<Var<'g>> = Stream::ALL
            .iter()
            .map(|&s| self.encode_stream(ctx, s, ctx.constant(input.stream(s).clone())))
            .collect::<Result<_>>()?;
        let (mut pos, mut vel, acc) = (feats[0], feats[1], feats[2]);
        if self.config.use_injection {
            vel = self.inject_features(ctx, Stream::Velocity, vel, acc)?;
            pos = self.inject_features(ctx, Stream::Position, pos, vel)?;
        }

        let sizes = &input.scene_sizes;
        let b = sizes.len();
        let n = sizes.iter().copied().max().unwrap_or(0);
        let mut slots = Vec::with_capacity(b * n);
        let mut real = Vec::with_capacity(a);
        let mut offset = 0;
        for (bi, &count) in sizes.iter().enumerate() {
            for j in 0..n {
                slots.push((j < count).then_some(offset + j));
                if j < count {
                    real.push(Some(bi * n + j));
                }
            }
            offset += count;
        }

        let d = self.config.d_model;
        let (k, t) = (self.config.k, self.config.t_pred);
        let mut outs = Vec::with_capacity(3);
        for (s, f) in Stream::ALL.iter().zip([pos, vel, acc]) {
            let memory = f.mean_axis(1).gather_rows(&slots).reshape(&[b, n, d]);
            let dec = self.social_decode(ctx, *s, memory, sizes)?;
            outs.push(
                dec.reshape(&[b * n, k * t * 2])
                    .gather_rows(&real)
                    .reshape(&[a, k, t, 2]),
            );
        }
        Ok(Prediction {
            positions: outs[0],
            velocities: outs[1],
            accels: outs[2],
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::PositionSeq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_config() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            n_heads: 2,
            ff_width: 32,
            k: 3,
            t_obs: 5,
            t_pred: 4,
            dropout: 0.0,
            ..ModelConfig::default()
        }
    }

    fn random_scene(rng: &mut ChaCha8Rng, n: usize, t: usize) -> Vec<KinematicTriple> {
        (0..n)
            .map(|_| {
                let mut p = Vec2::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
                let pts = (0..t)
                    .map(|_| {
                        p += Vec2::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5));
                        p
                    })
                    .collect();
                KinematicTriple::from_observed(PositionSeq::new(pts)).unwrap()
            })
            .collect()
    }

    fn run(model: &TrajectoryModel, scenes: &[Vec<KinematicTriple>]) -> [Vec<f64>; 3] {
        let g = Graph::new();
        let ctx = model.eval_ctx(&g);
        let input = ModelInput::from_scenes(scenes, model.config.t_obs, 1.0).unwrap();
        let p = model.forward(&ctx, &input).unwrap();
        [p.positions, p.velocities, p.accels].map(|v| v.value().data().to_vec())
    }

    #[test]
    fn config_rejects_bad_values() {
        assert!(ModelConfig::default().validate().is_ok());
        for cfg in [
            ModelConfig { n_heads: 3, ..ModelConfig::default() },
            ModelConfig { n_layers_enc: 2, ..ModelConfig::default() },
            ModelConfig { k: 0, ..ModelConfig::default() },
            ModelConfig { dropout: 1.0, ..ModelConfig::default() },
        ] {
            assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn output_shapes_match_config() {
        let model = TrajectoryModel::new(small_config()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let scenes = vec![random_scene(&mut rng, 1, 5), random_scene(&mut rng, 3, 5)];
        let g = Graph::new();
        let ctx = model.eval_ctx(&g);
        let input = ModelInput::from_scenes(&scenes, 5, 1.0).unwrap();
        let p = model.forward(&ctx, &input).unwrap();
        for v in [p.positions, p.velocities, p.accels] {
            assert_eq!(v.shape(), vec![4, 3, 4, 2]);
            assert!(v.value().all_finite());
        }
    }

    #[test]
    fn zero_input_gives_finite_features() {
        let model = TrajectoryModel::new(small_config()).unwrap();
        let g = Graph::new();
        let ctx = model.eval_ctx(&g);
        for s in Stream::ALL {
            let f = model
                .encode_stream(&ctx, s, g.constant(Tensor::zeros(&[2, 5, 2])))
                .unwrap();
            assert_eq!(f.shape(), vec![2, 5, 16]);
            assert!(f.value().all_finite());
        }
    }

    #[test]
    fn nan_input_is_a_data_error() {
        let model = TrajectoryModel::new(small_config()).unwrap();
        let g = Graph::new();
        let ctx = model.eval_ctx(&g);
        let mut t = Tensor::zeros(&[1, 5, 2]);
        t.data_mut()[3] = f64::NAN;
        let err = model.encode_stream(&ctx, Stream::Velocity, g.constant(t)).unwrap_err();
        assert!(matches!(err, Error::DataQuality(_)));
    }

    #[test]
    fn injection_checks_shapes_and_passes_gradient_to_both_inputs() {
        let model = TrajectoryModel::new(small_config()).unwrap();
        let g = Graph::new();
        let ctx = model.eval_ctx(&g);
        let mut init = Init::new(9);
        let target = g.variable(init.normal(&[2, 5, 16], 1.0));
        let source = g.variable(init.normal(&[2, 5, 16], 1.0));
        let bad = g.variable(init.normal(&[2, 4, 16], 1.0));
        assert!(model.inject_features(&ctx, Stream::Position, target, bad).is_err());
        let out = model.inject_features(&ctx, Stream::Position, target, source).unwrap();
        assert_eq!(out.shape(), target.shape());
        let w = g.constant(init.normal(&[2, 5, 16], 1.0));
        let grads = g.backward(out.mul(w).sum_all());
        for v in [target, source] {
            assert!(grads.of(v).unwrap().iter().any(|x| x.abs() > 1e-8));
        }
    }

    #[test]
    fn permuting_agents_permutes_predictions() {
        let model = TrajectoryModel::new(small_config()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let scene = random_scene(&mut rng, 3, 5);
        let perm = [2, 0, 1];
        let permuted: Vec<_> = perm.iter().map(|&i| scene[i].clone()).collect();
        let a = run(&model, &[scene]);
        let b = run(&model, &[permuted]);
        let row = 3 * 4 * 2;
        for s in 0..3 {
            for (j, &i) in perm.iter().enumerate() {
                for e in 0..row {
                    assert!((a[s][i * row + e] - b[s][j * row + e]).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn scenes_in_a_batch_do_not_interact() {
        let model = TrajectoryModel::new(small_config()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s1 = random_scene(&mut rng, 2, 5);
        let s2 = random_scene(&mut rng, 4, 5);
        let alone = run(&model, &[s1.clone()]);
        let joint = run(&model, &[s1, s2]);
        for s in 0..3 {
            for (x, y) in alone[s].iter().zip(&joint[s]) {
                assert!((x - y).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn padding_content_does_not_reach_real_agents() {
        let model = TrajectoryModel::new(small_config()).unwrap();
        let g = Graph::new();
        let ctx = model.eval_ctx(&g);
        let mut init = Init::new(4);
        let mem = init.normal(&[2, 3, 16], 1.0);
        let mut noisy = mem.clone();
        // scene 0 has 1 real agent, scene 1 has 2
        let d = noisy.data_mut();
        for slot in [1, 2, 5] {
            for e in 0..16 {
                d[slot * 16 + e] = 100.0 * ((slot * 16 + e) as f64).sin();
            }
        }
        let mut zeroed = mem.clone();
        for slot in [1, 2, 5] {
            zeroed.data_mut()[slot * 16..(slot + 1) * 16].fill(0.0);
        }
        let sizes = [1, 2];
        let a = model
            .social_decode(&ctx, Stream::Position, g.constant(noisy), &sizes)
            .unwrap()
            .value();
        let b = model
            .social_decode(&ctx, Stream::Position, g.constant(zeroed), &sizes)
            .unwrap()
            .value();
        let row = 3 * 8;
        for slot in [0, 3, 4] {
            assert_eq!(a.data()[slot * row..(slot + 1) * row], b.data()[slot * row..(slot + 1) * row]);
        }
    }

    #[test]
    fn all_padded_scene_is_rejected() {
        let model = TrajectoryModel::new(small_config()).unwrap();
        let g = Graph::new();
        let ctx = model.eval_ctx(&g);
        let mem = g.constant(Tensor::zeros(&[1, 2, 16]));
        assert!(model.social_decode(&ctx, Stream::Accel, mem, &[0]).is_err());
    }

    #[test]
    fn candidates_differ_at_initialisation() {
        let model = TrajectoryModel::new(small_config()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let out = run(&model, &[random_scene(&mut rng, 1, 5)]);
        let m = 8;
        for s in 0..3 {
            let c = &out[s];
            for k1 in 0..3 {
                for k2 in (k1 + 1)..3 {
                    let dist: f64 = (0..m).map(|e| (c[k1 * m + e] - c[k2 * m + e]).abs()).sum();
                    assert!(dist > 1e-3, "stream {s} candidates {k1} and {k2} coincide");
                }
            }
        }
    }

    #[test]
    fn single_agent_scene_decodes() {
        let model = TrajectoryModel::new(small_config()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let out = run(&model, &[random_scene(&mut rng, 1, 5)]);
        assert!(out.iter().all(|s| s.len() == 3 * 8 && s.iter().all(|v| v.is_finite())));
    }

    #[test]
    fn disabling_injection_changes_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let scene = random_scene(&mut rng, 2, 5);
        let with = TrajectoryModel::new(small_config()).unwrap();
        let without = TrajectoryModel::new(ModelConfig {
            use_injection: false,
            ..small_config()
        })
        .unwrap();
        let a = run(&with, &[scene.clone()]);
        let b = run(&without, &[scene]);
        assert_ne!(a[0], b[0]);
        // the acceleration stream never receives injected features
        assert_eq!(a[2], b[2]);
    }
}
