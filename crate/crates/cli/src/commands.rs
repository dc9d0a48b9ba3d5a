use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use trajcons_core::checkpoint;
use trajcons_core::config::TrainConfig;
use trajcons_core::data::{
    load_tracks, synth_dataset, window_observations, windows_to_canonical, Manifest, SceneEntry, SynthKind,
    TrackFormat, Units,
};
use trajcons_core::evaluation::{evaluate, predict as predict_candidates, MinMode};
use trajcons_core::kinematics::KinematicTriple;
use trajcons_core::records::{format_predictions, PredictionRecord};
use trajcons_core::training::fit_with;

use crate::{usage, EvalArgs, PredictArgs, SynthArgs};

/// Frame ids advance by this much per step in synthesized track files.
const SYNTH_FRAME_STEP: i64 = 10;

/// `--key value` and `--key=value` pairs; dashes in keys become underscores.
pub fn parse_overrides(raw: &[String]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut it = raw.iter();
    while let Some(tok) = it.next() {
        let Some(key) = tok.strip_prefix("--") else {
            return Err(usage(format!("expected a `--key value` override, got {tok:?}")));
        };
        let (key, value) = match key.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it.next().ok_or_else(|| usage(format!("override --{key} needs a value")))?;
                (key.to_string(), v.clone())
            }
        };
        if key.is_empty() {
            return Err(usage("empty override key"));
        }
        out.push((key.replace('-', "_"), value));
    }
    Ok(out)
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn train(config: Option<&Path>, raw: &[String]) -> Result<()> {
    let overrides = parse_overrides(raw)?;
    let cfg = match config {
        Some(p) => TrainConfig::load(p, &overrides)?,
        None => TrainConfig::from_toml("", &overrides)?,
    };
    let corpus = cfg.corpus()?;
    log::info!("{} training windows, {} test windows", corpus.train.len(), corpus.test.len());
    let out = &cfg.output_dir;
    write(&out.join("config.toml"), &cfg.to_toml()?)?;
    let outcome = fit_with(&corpus.train, &cfg, out, |step, r| {
        if step % 50 == 0 {
            log::info!("step {step}: total {:.4} (pos {:.4}, cons2 {:.4})", r.total, r.pos, r.cons2);
        }
    })?;
    println!("trained {} steps, best validation ADE {:.4}", outcome.steps, outcome.best_val_ade);
    println!("checkpoint: {}", outcome.checkpoint.display());
    println!("log: {}", outcome.log.display());
    if !corpus.test.is_empty() {
        let model = checkpoint::load(&outcome.checkpoint)?;
        let r = evaluate(&model, &corpus.test, cfg.model.k, cfg.model.t_pred, MinMode::Independent)?;
        print!("{}", r.report());
    }
    Ok(())
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let model = checkpoint::load(&a.checkpoint)?;
    let mc = model.config.clone();
    if let Some(k) = a.k.filter(|&k| k != mc.k) {
        return Err(usage(format!("--k {k} does not match the checkpoint's K = {}", mc.k)));
    }
    if let Some(t) = a.t_pred.filter(|&t| t != mc.t_pred) {
        return Err(usage(format!("--t-pred {t} does not match the checkpoint's horizon {}", mc.t_pred)));
    }
    let mut cfg = TrainConfig::load(&a.config, &parse_overrides(&a.overrides)?)?;
    cfg.model = mc.clone();
    let test = cfg.corpus()?.test;
    if test.is_empty() {
        return Err(anyhow!("the config yields no test windows"));
    }
    let mode = if a.joint { MinMode::Joint } else { MinMode::Independent };
    let r = evaluate(&model, &test, mc.k, mc.t_pred, mode)?;
    let report = r.report();
    print!("{report}");
    let dir = a
        .output_dir
        .clone()
        .or_else(|| a.checkpoint.parent().map(Path::to_path_buf))
        .unwrap_or_else(|| PathBuf::from("."));
    write(&dir.join("eval.json"), &serde_json::to_string_pretty(&r)?)?;
    write(&dir.join("eval.txt"), &report)?;
    Ok(())
}

pub fn parse_format(s: &str) -> Result<TrackFormat> {
    s.parse().map_err(|e: trajcons_core::Error| usage(e.to_string()))
}

pub fn predict(a: &PredictArgs) -> Result<()> {
    let model = checkpoint::load(&a.checkpoint)?;
    let format = parse_format(&a.format)?;
    let (t_obs, k, t_pred) = (model.config.t_obs, model.config.k, model.config.t_pred);
    let stride = a.stride.unwrap_or(t_obs);
    if stride == 0 {
        return Err(usage("--stride must be positive"));
    }
    let tracks = load_tracks(&a.input, format)?;
    let scene = a.input.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let windows = window_observations(&tracks, &scene, t_obs, stride)?;
    if windows.is_empty() {
        return Err(anyhow!(
            "{}: no agent is observed for {t_obs} consecutive steps",
            a.input.display()
        ));
    }
    let observed: Vec<&[KinematicTriple]> = windows.iter().map(|w| w.observed.as_slice()).collect();
    let preds = predict_candidates(&model, &observed)?;
    let mut records = Vec::with_capacity(preds.iter().map(|p| p.agents * k * t_pred).sum());
    for (w, p) in windows.iter().zip(&preds) {
        for (i, &agent_id) in w.agent_ids.iter().enumerate() {
            for c in 0..k {
                for (step, pt) in p.points(i, c).into_iter().enumerate() {
                    records.push(PredictionRecord {
                        window_id: w.window_id,
                        agent_id,
                        candidate_id: c,
                        step,
                        x: pt.x,
                        y: pt.y,
                    });
                }
            }
        }
    }
    let body = format_predictions(&records);
    let (header, rest) = body.split_once('\n').unwrap_or((&body, ""));
    write(&a.output, &format!("{header}\n# t_obs={t_obs} stride={stride}\n{rest}"))?;
    println!("{} windows, {} records -> {}", windows.len(), records.len(), a.output.display());
    Ok(())
}

pub fn synth(a: &SynthArgs) -> Result<()> {
    let kinds = a
        .kind
        .iter()
        .map(|k| k.parse::<SynthKind>().map_err(|e| usage(e.to_string())))
        .collect::<Result<Vec<_>>>()?;
    if a.count == 0 || a.t_obs < 3 || a.t_pred == 0 {
        return Err(usage("--count and --t-pred must be positive and --t-obs at least 3"));
    }
    let mut manifest = Manifest::default();
    for (i, kind) in kinds.iter().enumerate() {
        let seed = a.seed + (i * a.count) as u64;
        let windows = synth_dataset(&[*kind], a.count, a.agents, a.noise, seed, a.t_obs, a.t_pred)?;
        let file = format!("{kind}.txt");
        write(&a.output_dir.join(&file), &windows_to_canonical(&windows, SYNTH_FRAME_STEP))?;
        manifest.scenes.push(SceneEntry {
            name: kind.to_string(),
            path: PathBuf::from(file),
            units: Units::Meters,
            format: TrackFormat::EthucyTxt,
        });
    }
    let path = a.output_dir.join("manifest.toml");
    write(&path, &toml::to_string(&manifest)?)?;
    println!("{} kinds x {} windows -> {}", kinds.len(), a.count, path.display());
    Ok(())
}
