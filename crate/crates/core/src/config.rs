//! Run configuration as a TOML tree, with dotted-key overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{make_splits, synth_dataset, Manifest, SceneWindow, SplitSpec, SynthKind};
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::model::ModelConfig;

/// How the velocity and acceleration candidates that receive supervision are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum VaSelection {
    /// Directional consistency for velocity, magnitude similarity for
    /// acceleration, learned combined score for the consistency targets.
    #[default]
    Heuristic,
    /// Candidates closest to the ground truth.
    GroundTruth,
}

/// Synthetic training corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub kinds: Vec<SynthKind>,
    pub count: usize,
    pub agents: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            kinds: SynthKind::ALL.to_vec(),
            count: 64,
            agents: 3,
            noise: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset manifest; relative to the config file.
    pub manifest: Option<PathBuf>,
    pub split: Option<SplitSpec>,
    /// Used when no manifest is given.
    pub synthetic: Option<SynthConfig>,
    /// Window stride in steps for training windows.
    pub train_stride: usize,
    /// Window stride for evaluation windows; defaults to the window length.
    pub eval_stride: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Optional cap on optimizer steps across all epochs.
    pub max_steps: Option<usize>,
    pub grad_clip: f64,
    pub val_fraction: f64,
    /// Validation (and checkpoint selection) every this many steps; 0 means once per epoch.
    pub eval_every: usize,
    pub va_selection: VaSelection,
    /// Names of ablations applied on top of the other settings.
    pub ablations: Vec<String>,
    pub output_dir: PathBuf,
    pub loss: LossConfig,
    pub model: ModelConfig,
    pub data: DataConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            epochs: 500,
            batch_size: 32,
            seed: 0,
            max_steps: None,
            grad_clip: 1.0,
            val_fraction: 0.1,
            eval_every: 0,
            va_selection: VaSelection::Heuristic,
            ablations: Vec::new(),
            output_dir: PathBuf::from("runs/default"),
            loss: LossConfig::default(),
            model: ModelConfig::default(),
            data: DataConfig {
                train_stride: 1,
                ..DataConfig::default()
            },
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.data.train_stride == 0 {
            return Err(Error::Config("epochs, batch_size and train_stride must be positive".into()));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::Config(format!("grad_clip must be > 0, got {}", self.grad_clip)));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(format!("val_fraction must be in [0, 1), got {}", self.val_fraction)));
        }
        self.loss.validate()?;
        self.model.validate()
    }

    /// Parses TOML, applies `key = value` overrides with dotted keys, resolves
    /// the listed ablations and validates the result.
    pub fn from_toml(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut tree = toml::Value::try_from(TrainConfig::default())
            .map_err(|e| Error::Config(e.to_string()))?;
        let file: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut tree, toml::Value::Table(file));
        for (key, raw) in overrides {
            set_dotted(&mut tree, key, raw)?;
        }
        let mut cfg: TrainConfig = tree.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for name in cfg.ablations.clone() {
            cfg = ablation_variant(&cfg, &name)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a config file; relative paths inside it are resolved against its directory.
    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text, overrides)?;
        let base = path.parent().unwrap_or(Path::new(""));
        if let Some(m) = cfg.data.manifest.as_mut().filter(|m| m.is_relative()) {
            *m = base.join(&*m);
        }
        if cfg.output_dir.is_relative() {
            cfg.output_dir = base.join(&cfg.output_dir);
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Training and test windows described by the data section.
    ///
    /// With a manifest, training windows use `train_stride` and test windows
    /// `eval_stride`; a split partitions both by scene, otherwise every scene
    /// serves both roles. Synthetic test scenes continue the training seed
    /// sequence, so the two sets never share a seed.
    pub fn corpus(&self) -> Result<Corpus> {
        let (t_obs, t_pred) = (self.model.t_obs, self.model.t_pred);
        if let Some(path) = &self.data.manifest {
            let manifest = Manifest::load(path)?;
            let eval_stride = self.data.eval_stride.unwrap_or(t_obs + t_pred);
            let train = manifest.windows(t_obs, t_pred, self.data.train_stride)?;
            let test = manifest.windows(t_obs, t_pred, eval_stride)?;
            return match &self.data.split {
                Some(spec) => Ok(Corpus {
                    train: make_splits(train, spec)?.0,
                    test: make_splits(test, spec)?.1,
                }),
                None => Ok(Corpus { train, test }),
            };
        }
        let Some(s) = &self.data.synthetic else {
            return Err(Error::Config("data needs either a manifest or a synthetic section".into()));
        };
        let train = synth_dataset(&s.kinds, s.count, s.agents, s.noise, s.seed, t_obs, t_pred)?;
        let n_test = (s.count / 4).max(1);
        let test = synth_dataset(&s.kinds, n_test, s.agents, s.noise, s.seed + s.count as u64, t_obs, t_pred)?;
        Ok(Corpus { train, test })
    }
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub train: Vec<SceneWindow>,
    pub test: Vec<SceneWindow>,
}

fn merge(into: &mut toml::Value, from: toml::Value) {
    match (into, from) {
        (toml::Value::Table(a), toml::Value::Table(b)) => {
            for (k, v) in b {
                match a.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        a.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = coerce(slot, v),
    }
}

/// Integers written where the default is a float become floats.
fn coerce(existing: &toml::Value, new: toml::Value) -> toml::Value {
    match (existing, new) {
        (toml::Value::Float(_), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
        (_, v) => v,
    }
}

fn parse_scalar(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&doc) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Sets `a.b.c = raw`, creating intermediate tables.
pub fn set_dotted(tree: &mut toml::Value, key: &str, raw: &str) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key {key:?}")));
    }
    let mut node = tree;
    for p in &parts[..parts.len() - 1] {
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {key:?}: {p:?} is not a table")))?;
        node = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    let table = node
        .as_table_mut()
        .ok_or_else(|| Error::Config(format!("override {key:?} does not address a table entry")))?;
    let last = parts[parts.len() - 1];
    let value = parse_scalar(raw);
    let value = match table.get(last) {
        Some(old) => coerce(old, value),
        None => value,
    };
    table.insert(last.to_string(), value);
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    NoPos,
    NoCons1,
    NoVa,
    NoCons2,
    NoInjection,
    MsePos,
    ManualVaSelect,
}

impl Ablation {
    pub const ALL: [Ablation; 7] = [
        Ablation::NoPos,
        Ablation::NoCons1,
        Ablation::NoVa,
        Ablation::NoCons2,
        Ablation::NoInjection,
        Ablation::MsePos,
        Ablation::ManualVaSelect,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::NoPos => "no_pos",
            Ablation::NoCons1 => "no_cons1",
            Ablation::NoVa => "no_va",
            Ablation::NoCons2 => "no_cons2",
            Ablation::NoInjection => "no_injection",
            Ablation::MsePos => "mse_pos",
            Ablation::ManualVaSelect => "manual_va_select",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == name)
            .ok_or_else(|| Error::Config(format!("unknown ablation {name:?}")))
    }
}

/// `base` with one loss term removed or one component replaced.
pub fn ablation_variant(base: &TrainConfig, name: &str) -> Result<TrainConfig> {
    let mut cfg = base.clone();
    match Ablation::parse(name)? {
        Ablation::NoPos => cfg.loss.enable_pos = false,
        Ablation::NoCons1 => cfg.loss.enable_cons1 = false,
        Ablation::NoVa => cfg.loss.enable_va = false,
        Ablation::NoCons2 => cfg.loss.enable_cons2 = false,
        Ablation::NoInjection => cfg.model.use_injection = false,
        Ablation::MsePos => cfg.loss.position_kind = crate::losses::PositionLossKind::MseBestOfK,
        Ablation::ManualVaSelect => cfg.va_selection = VaSelection::GroundTruth,
    }
    if !cfg.ablations.iter().any(|a| a == name) {
        cfg.ablations.push(name.to_string());
    }
    Ok(cfg)
}
