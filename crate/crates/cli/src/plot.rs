//! SVG rendering of candidate fans and loss curves.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{anyhow, Context, Result};
use plotters::prelude::*;
use trajcons_core::data::{load_tracks, lookahead, window_observations};
use trajcons_core::kinematics::Vec2;
use trajcons_core::records::{parse_log, parse_predictions, LogRecord, PredictionRecord, PREDICTION_HEADER};

use crate::commands::parse_format;
use crate::{usage, ColorMode, PlotArgs};

const SIZE: (u32, u32) = (900, 700);

#[derive(Debug)]
enum Records {
    Log(Vec<LogRecord>),
    Predictions { records: Vec<PredictionRecord>, meta: Option<(usize, usize)> },
}

/// `# t_obs=8 stride=8` as written by the predict command.
fn window_meta(text: &str) -> Option<(usize, usize)> {
    text.lines().filter_map(|l| l.strip_prefix('#')).find_map(|l| {
        let mut t_obs = None;
        let mut stride = None;
        for kv in l.split_whitespace() {
            match kv.split_once('=') {
                Some(("t_obs", v)) => t_obs = v.parse().ok(),
                Some(("stride", v)) => stride = v.parse().ok(),
                _ => {}
            }
        }
        Some((t_obs?, stride?))
    })
}

fn detect(text: &str, source: &str) -> Result<Records> {
    let first = text.lines().map(str::trim).find(|l| !l.is_empty() && !l.starts_with('#'));
    let has_header = text.lines().any(|l| l.trim() == PREDICTION_HEADER);
    match first {
        Some(l) if l.starts_with('{') => Ok(Records::Log(parse_log(text, source)?)),
        Some(l) if has_header || l.split_whitespace().count() == 6 => Ok(Records::Predictions {
            records: parse_predictions(text, source)?,
            meta: window_meta(text),
        }),
        _ => Err(anyhow!("{source}: unknown record schema")),
    }
}

pub fn run(a: &PlotArgs) -> Result<()> {
    if a.output.extension().and_then(|e| e.to_str()) != Some("svg") {
        return Err(usage("plots are written as SVG; give an output path ending in .svg"));
    }
    let source = a.input.display().to_string();
    let text = fs::read_to_string(&a.input).with_context(|| format!("reading {source}"))?;
    match detect(&text, &source)? {
        Records::Log(log) => loss_curves(&log, &a.output)?,
        Records::Predictions { records, meta } => fan(a, &records, meta)?,
    }
    println!("wrote {}", a.output.display());
    Ok(())
}

fn bounds<'a>(pts: impl Iterator<Item = &'a Vec2>) -> (std::ops::Range<f64>, std::ops::Range<f64>) {
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for p in pts {
        x0 = x0.min(p.x);
        x1 = x1.max(p.x);
        y0 = y0.min(p.y);
        y1 = y1.max(p.y);
    }
    let pad = 0.05 * (x1 - x0).max(y1 - y0).max(1e-3);
    (x0 - pad..x1 + pad, y0 - pad..y1 + pad)
}

/// Slow is blue, fast is red.
fn speed_color(t: f64) -> RGBColor {
    let t = t.clamp(0.0, 1.0);
    RGBColor((40.0 + 215.0 * t) as u8, (90.0 * (1.0 - (2.0 * t - 1.0).abs())) as u8, (255.0 * (1.0 - t)) as u8)
}

fn draw_err<E: std::error::Error + Send + Sync + 'static>(e: DrawingAreaErrorKind<E>) -> anyhow::Error {
    anyhow!("drawing failed: {e}")
}

fn fan(a: &PlotArgs, records: &[PredictionRecord], meta: Option<(usize, usize)>) -> Result<()> {
    // (agent, candidate) -> points by step
    let mut cands: BTreeMap<(i64, usize), Vec<(usize, Vec2)>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.window_id == a.window) {
        cands.entry((r.agent_id, r.candidate_id)).or_default().push((r.step, Vec2::new(r.x, r.y)));
    }
    if cands.is_empty() {
        return Err(anyhow!("no predictions for window {}", a.window));
    }
    let horizon = cands.values().flatten().map(|(s, _)| s + 1).max().unwrap_or(0);
    let mut cands: BTreeMap<(i64, usize), Vec<Vec2>> = cands
        .into_iter()
        .map(|(key, mut v)| {
            v.sort_by_key(|(s, _)| *s);
            (key, v.into_iter().map(|(_, p)| p).collect())
        })
        .collect();

    // agent -> (observed, actual future)
    let mut context: BTreeMap<i64, (Vec<Vec2>, Option<Vec<Vec2>>)> = BTreeMap::new();
    if let Some(path) = &a.tracks {
        let (t_obs, stride) =
            meta.ok_or_else(|| anyhow!("prediction file lacks the `# t_obs=.. stride=..` line needed to match tracks"))?;
        let tracks = load_tracks(path, parse_format(&a.format)?)?;
        let windows = window_observations(&tracks, "", t_obs, stride)?;
        let w = windows
            .iter()
            .find(|w| w.window_id == a.window)
            .ok_or_else(|| anyhow!("{}: no window {}", path.display(), a.window))?;
        for ((id, obs), fut) in w.agent_ids.iter().zip(&w.observed).zip(lookahead(&tracks, w, horizon)) {
            context.insert(*id, (obs.position.points.clone(), fut));
        }
        // Fans start at the last observed point.
        for ((id, _), pts) in cands.iter_mut() {
            if let Some(last) = context.get(id).and_then(|(o, _)| o.last()) {
                pts.insert(0, *last);
            }
        }
    }

    let all = cands
        .values()
        .flatten()
        .chain(context.values().flat_map(|(o, f)| o.iter().chain(f.iter().flatten())));
    let (xr, yr) = bounds(all);
    let root = SVGBackend::new(&a.output, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(draw_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(format!("window {}", a.window), ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(35)
        .y_label_area_size(45)
        .build_cartesian_2d(xr, yr)
        .map_err(draw_err)?;
    chart.configure_mesh().x_desc("x").y_desc("y").draw().map_err(draw_err)?;

    let speeds: Vec<f64> = cands
        .values()
        .flat_map(|p| p.windows(2).map(|s| s[0].distance(s[1])))
        .collect();
    let (lo, hi) = speeds.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &s| (l.min(s), h.max(s)));
    let span = (hi - lo).max(1e-12);
    for (i, pts) in cands.values().enumerate() {
        let xy: Vec<(f64, f64)> = pts.iter().map(|p| (p.x, p.y)).collect();
        match a.color {
            ColorMode::Uniform => {
                let s = chart
                    .draw_series(LineSeries::new(xy, BLUE.mix(0.35).stroke_width(1)))
                    .map_err(draw_err)?;
                if i == 0 {
                    s.label("candidates")
                        .legend(|(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], BLUE.mix(0.6)));
                }
            }
            ColorMode::Speed => {
                let segs = xy.windows(2).map(|s| {
                    let v = (Vec2::new(s[0].0, s[0].1).distance(Vec2::new(s[1].0, s[1].1)) - lo) / span;
                    PathElement::new(vec![s[0], s[1]], speed_color(v).stroke_width(2))
                });
                let s = chart.draw_series(segs).map_err(draw_err)?;
                if i == 0 {
                    s.label(format!("candidates, speed {lo:.3} (blue) to {hi:.3} (red) per step"))
                        .legend(|(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], speed_color(1.0)));
                }
            }
        }
    }
    for (i, (obs, fut)) in context.values().enumerate() {
        let s = chart
            .draw_series(LineSeries::new(obs.iter().map(|p| (p.x, p.y)), BLACK.stroke_width(2)))
            .map_err(draw_err)?;
        if i == 0 {
            s.label("observed").legend(|(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], BLACK));
        }
        if let (Some(f), Some(last)) = (fut, obs.last()) {
            let line = std::iter::once(last).chain(f).map(|p| (p.x, p.y));
            let s = chart.draw_series(LineSeries::new(line, GREEN.stroke_width(2))).map_err(draw_err)?;
            if i == 0 {
                s.label("actual").legend(|(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], GREEN));
            }
        }
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(draw_err)?;
    root.present().map_err(draw_err)?;
    Ok(())
}

fn loss_curves(log: &[LogRecord], out: &Path) -> Result<()> {
    if log.is_empty() {
        return Err(anyhow!("training log is empty"));
    }
    type Term = fn(&LogRecord) -> f64;
    let terms: [(&str, Term, RGBColor); 5] = [
        ("total", |r| r.total, BLACK),
        ("pos", |r| r.pos, BLUE),
        ("va", |r| r.va, RGBColor(230, 140, 0)),
        ("cons1", |r| r.cons1, GREEN),
        ("cons2", |r| r.cons2, RED),
    ];
    let x_max = log.iter().map(|r| r.step).max().unwrap_or(0).max(1) as f64;
    let y_max = log
        .iter()
        .flat_map(|r| terms.iter().map(move |(_, f, _)| f(r)))
        .fold(0.0f64, f64::max)
        .max(1e-9);
    let root = SVGBackend::new(out, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(draw_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("training loss", ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(35)
        .y_label_area_size(55)
        .build_cartesian_2d(0.0..x_max, 0.0..y_max * 1.05)
        .map_err(draw_err)?;
    chart.configure_mesh().x_desc("step").y_desc("loss").draw().map_err(draw_err)?;
    for (name, f, color) in terms {
        chart
            .draw_series(LineSeries::new(log.iter().map(|r| (r.step as f64, f(r))), color.stroke_width(1)))
            .map_err(draw_err)?
            .label(name)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(draw_err)?;
    root.present().map_err(draw_err)?;
    Ok(())
}
