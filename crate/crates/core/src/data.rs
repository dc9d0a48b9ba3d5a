//! Track ingest, scene windowing, train/test splits and synthetic scenes.
//!
//! The canonical text format has one record per line: `frame_id agent_id x y`,
//! whitespace separated. Raw Stanford Drone annotations
//! (`track xmin ymin xmax ymax frame lost occluded generated "label"`) are
//! converted on load: pedestrian rows only, lost rows dropped, bounding-box
//! centre, every 12th frame.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::{KinematicTriple, PositionSeq, Vec2};

/// Frame decimation applied to raw drone annotations (30 fps to 2.5 fps).
pub const SDD_FRAME_STEP: i64 = 12;

/// Environment variable that overrides the base directory of relative manifest paths.
pub const DATA_ROOT_ENV: &str = "TRAJCONS_DATA_ROOT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Units {
    #[default]
    Meters,
    Pixels,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TrackFormat {
    #[default]
    EthucyTxt,
    SddTxt,
}

impl FromStr for TrackFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ethucy_txt" => Ok(TrackFormat::EthucyTxt),
            "sdd_txt" => Ok(TrackFormat::SddTxt),
            other => Err(Error::invalid(format!("unknown track format {other:?}"))),
        }
    }
}

/// All observations of one agent, sorted by frame.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTrack {
    pub agent_id: i64,
    pub frames: Vec<i64>,
    pub coords: Vec<Vec2>,
}

impl RawTrack {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// A window in which every listed agent is observed at every step.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneWindow {
    pub scene_id: String,
    pub window_id: usize,
    pub start_frame: i64,
    pub agent_ids: Vec<i64>,
    pub observed: Vec<KinematicTriple>,
    pub future: Vec<PositionSeq>,
    pub units: Units,
}

impl SceneWindow {
    pub fn num_agents(&self) -> usize {
        self.agent_ids.len()
    }
}

/// Observation-only window, used for inference on tracks without a future.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationWindow {
    pub scene_id: String,
    pub window_id: usize,
    pub start_frame: i64,
    pub agent_ids: Vec<i64>,
    pub observed: Vec<KinematicTriple>,
}

fn parse_err(source: &str, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: source.to_string(),
        line,
        msg: msg.into(),
    }
}

fn parse_f64(tok: &str, what: &str, source: &str, line: usize) -> Result<f64> {
    let v: f64 = tok
        .parse()
        .map_err(|_| parse_err(source, line, format!("{what} {tok:?} is not a number")))?;
    if !v.is_finite() {
        return Err(parse_err(source, line, format!("{what} is not finite")));
    }
    Ok(v)
}

/// Integer field that may be written as a float (`780.0`).
fn parse_id(tok: &str, what: &str, source: &str, line: usize) -> Result<i64> {
    if let Ok(v) = tok.parse::<i64>() {
        return Ok(v);
    }
    let v = parse_f64(tok, what, source, line)?;
    if v.fract() != 0.0 || v.abs() > 9.0e15 {
        return Err(parse_err(source, line, format!("{what} {tok:?} is not an integer")));
    }
    Ok(v as i64)
}

type Row = (i64, i64, Vec2);

fn parse_ethucy_line(fields: &[&str], source: &str, line: usize) -> Result<Row> {
    if fields.len() != 4 {
        return Err(parse_err(
            source,
            line,
            format!("expected 4 fields (frame agent x y), got {}", fields.len()),
        ));
    }
    let frame = parse_id(fields[0], "frame", source, line)?;
    let agent = parse_id(fields[1], "agent", source, line)?;
    let x = parse_f64(fields[2], "x", source, line)?;
    let y = parse_f64(fields[3], "y", source, line)?;
    Ok((frame, agent, Vec2::new(x, y)))
}

fn parse_sdd_line(fields: &[&str], source: &str, line: usize) -> Result<Option<Row>> {
    if fields.len() < 10 {
        return Err(parse_err(
            source,
            line,
            format!("expected 10 annotation fields, got {}", fields.len()),
        ));
    }
    let label = fields[9..].join(" ");
    let label = label.trim_matches('"');
    let lost = parse_id(fields[6], "lost flag", source, line)?;
    let frame = parse_id(fields[5], "frame", source, line)?;
    if label != "Pedestrian" || lost != 0 || frame % SDD_FRAME_STEP != 0 {
        return Ok(None);
    }
    let agent = parse_id(fields[0], "track", source, line)?;
    let mut b = [0.0; 4];
    for (i, v) in b.iter_mut().enumerate() {
        *v = parse_f64(fields[1 + i], "bbox", source, line)?;
    }
    Ok(Some((frame, agent, Vec2::new((b[0] + b[2]) / 2.0, (b[1] + b[3]) / 2.0))))
}

/// Parses track text. `source` names the input in error messages.
/// Blank lines and lines starting with `#` are skipped.
pub fn parse_tracks(text: &str, format: TrackFormat, source: &str) -> Result<Vec<RawTrack>> {
    let mut seen: HashMap<(i64, i64), usize> = HashMap::new();
    let mut by_agent: BTreeMap<i64, Vec<(i64, Vec2)>> = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        let row = match format {
            TrackFormat::EthucyTxt => Some(parse_ethucy_line(&fields, source, line)?),
            TrackFormat::SddTxt => parse_sdd_line(&fields, source, line)?,
        };
        let Some((frame, agent, p)) = row else { continue };
        if let Some(first) = seen.insert((frame, agent), line) {
            return Err(parse_err(
                source,
                line,
                format!("duplicate record for frame {frame}, agent {agent} (first at line {first})"),
            ));
        }
        by_agent.entry(agent).or_default().push((frame, p));
    }
    Ok(by_agent
        .into_iter()
        .map(|(agent_id, mut rows)| {
            rows.sort_by_key(|r| r.0);
            RawTrack {
                agent_id,
                frames: rows.iter().map(|r| r.0).collect(),
                coords: rows.iter().map(|r| r.1).collect(),
            }
        })
        .collect())
}

pub fn load_tracks(path: &Path, format: TrackFormat) -> Result<Vec<RawTrack>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_tracks(&text, format, &path.display().to_string())
}

/// Smallest positive gap between distinct frame ids; 1 if there is none.
pub fn infer_frame_step(tracks: &[RawTrack]) -> i64 {
    let frames: BTreeSet<i64> = tracks.iter().flat_map(|t| t.frames.iter().copied()).collect();
    frames
        .iter()
        .zip(frames.iter().skip(1))
        .map(|(a, b)| b - a)
        .min()
        .unwrap_or(1)
}

/// Agents fully present on `len` grid steps from every window start.
struct Grid {
    step: i64,
    starts: Vec<i64>,
}

fn grid(tracks: &[RawTrack], len: usize, stride: usize) -> Option<Grid> {
    let first = tracks.iter().filter_map(|t| t.frames.first()).min().copied()?;
    let last = tracks.iter().filter_map(|t| t.frames.last()).max().copied()?;
    let step = infer_frame_step(tracks);
    let span = (len as i64 - 1) * step;
    let stride = stride.max(1) as i64 * step;
    let mut starts = Vec::new();
    let mut s = first;
    while s + span <= last {
        starts.push(s);
        s += stride;
    }
    Some(Grid { step, starts })
}

/// Positions of `track` at frames `start, start+step, ...` (len of them), if all present.
fn slice_track(track: &RawTrack, start: i64, step: i64, len: usize) -> Option<Vec<Vec2>> {
    let mut i = track.frames.binary_search(&start).ok()?;
    let mut out = Vec::with_capacity(len);
    for j in 0..len {
        let want = start + j as i64 * step;
        while i < track.frames.len() && track.frames[i] < want {
            i += 1;
        }
        if track.frames.get(i) != Some(&want) {
            return None;
        }
        out.push(track.coords[i]);
    }
    Some(out)
}

fn sorted_tracks(tracks: &[RawTrack]) -> Vec<&RawTrack> {
    let mut sorted: Vec<&RawTrack> = tracks.iter().collect();
    sorted.sort_by_key(|t| t.agent_id);
    sorted
}

/// Sliding windows of `t_obs + t_pred` steps; `stride` counts steps.
pub fn window_scenes(
    tracks: &[RawTrack],
    scene_id: &str,
    units: Units,
    t_obs: usize,
    t_pred: usize,
    stride: usize,
) -> Result<Vec<SceneWindow>> {
    let len = t_obs + t_pred;
    let Some(g) = grid(tracks, len, stride) else {
        return Ok(Vec::new());
    };
    let sorted = sorted_tracks(tracks);
    let mut out = Vec::new();
    for &start in &g.starts {
        let mut w = SceneWindow {
            scene_id: scene_id.to_string(),
            window_id: out.len(),
            start_frame: start,
            agent_ids: Vec::new(),
            observed: Vec::new(),
            future: Vec::new(),
            units,
        };
        for t in &sorted {
            let Some(pts) = slice_track(t, start, g.step, len) else { continue };
            w.agent_ids.push(t.agent_id);
            w.observed
                .push(KinematicTriple::from_observed(PositionSeq::new(pts[..t_obs].to_vec()))?);
            w.future.push(PositionSeq::new(pts[t_obs..].to_vec()));
        }
        if !w.agent_ids.is_empty() {
            out.push(w);
        }
    }
    Ok(out)
}

/// Windows of `t_obs` observed steps, no future required.
pub fn window_observations(
    tracks: &[RawTrack],
    scene_id: &str,
    t_obs: usize,
    stride: usize,
) -> Result<Vec<ObservationWindow>> {
    let Some(g) = grid(tracks, t_obs, stride) else {
        return Ok(Vec::new());
    };
    let sorted = sorted_tracks(tracks);
    let mut out = Vec::new();
    for &start in &g.starts {
        let mut ids = Vec::new();
        let mut observed = Vec::new();
        for t in &sorted {
            if let Some(pts) = slice_track(t, start, g.step, t_obs) {
                ids.push(t.agent_id);
                observed.push(KinematicTriple::from_observed(PositionSeq::new(pts))?);
            }
        }
        if !ids.is_empty() {
            out.push(ObservationWindow {
                scene_id: scene_id.to_string(),
                window_id: out.len(),
                start_frame: start,
                agent_ids: ids,
                observed,
            });
        }
    }
    Ok(out)
}

/// Actual positions of each agent for `len` steps after the end of an observation window.
pub fn lookahead(
    tracks: &[RawTrack],
    window: &ObservationWindow,
    len: usize,
) -> Vec<Option<Vec<Vec2>>> {
    let step = infer_frame_step(tracks);
    let t_obs = window.observed.first().map_or(0, |o| o.len()) as i64;
    let start = window.start_frame + t_obs * step;
    window
        .agent_ids
        .iter()
        .map(|id| {
            tracks
                .iter()
                .find(|t| t.agent_id == *id)
                .and_then(|t| slice_track(t, start, step, len))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "protocol", rename_all = "snake_case", deny_unknown_fields)]
pub enum SplitSpec {
    LeaveOneOut { held_out: String },
    Fixed { train: Vec<String>, test: Vec<String> },
}

/// Partitions windows by scene name.
pub fn make_splits(windows: Vec<SceneWindow>, spec: &SplitSpec) -> Result<(Vec<SceneWindow>, Vec<SceneWindow>)> {
    let present: BTreeSet<String> = windows.iter().map(|w| w.scene_id.clone()).collect();
    let (train, test): (Vec<_>, Vec<_>) = match spec {
        SplitSpec::LeaveOneOut { held_out } => {
            if !present.contains(held_out) {
                return Err(Error::invalid(format!("held-out scene {held_out:?} not in corpus")));
            }
            windows.into_iter().partition(|w| &w.scene_id != held_out)
        }
        SplitSpec::Fixed { train, test } => {
            if let Some(s) = train.iter().find(|s| test.contains(s)) {
                return Err(Error::invalid(format!("scene {s:?} listed in both train and test")));
            }
            if let Some(s) = train.iter().chain(test).find(|s| !present.contains(*s)) {
                return Err(Error::invalid(format!("scene {s:?} not in corpus")));
            }
            let (tr, rest): (Vec<_>, Vec<_>) = windows.into_iter().partition(|w| train.contains(&w.scene_id));
            let te = rest.into_iter().filter(|w| test.contains(&w.scene_id)).collect();
            (tr, te)
        }
    };
    if train.is_empty() {
        return Err(Error::invalid("split leaves no training windows"));
    }
    Ok((train, test))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthKind {
    ConstantVelocity,
    ConstantAccel,
    Turn,
    Stop,
}

impl SynthKind {
    pub const ALL: [SynthKind; 4] = [
        SynthKind::ConstantVelocity,
        SynthKind::ConstantAccel,
        SynthKind::Turn,
        SynthKind::Stop,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SynthKind::ConstantVelocity => "constant_velocity",
            SynthKind::ConstantAccel => "constant_accel",
            SynthKind::Turn => "turn",
            SynthKind::Stop => "stop",
        }
    }
}

impl fmt::Display for SynthKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SynthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SynthKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown synthetic kind {s:?}")))
    }
}

/// Full synthetic path of one agent: `len` positions.
fn synth_path(kind: SynthKind, rng: &mut ChaCha8Rng, t_obs: usize, len: usize) -> Vec<Vec2> {
    let start = Vec2::new(rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0));
    let mut heading = rng.random_range(0.0..std::f64::consts::TAU);
    let mut speed: f64 = rng.random_range(0.3..0.6);
    let accel = rng.random_range(0.01..0.03);
    // turn spread over a few steps straddling the end of the observation
    let turn = rng.random_range(0.5..1.5) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let turn_steps = 4;
    let turn_from = t_obs.saturating_sub(3);
    let stop_from = t_obs.saturating_sub(2);
    let stop_steps = 5.0;
    let decay = speed / stop_steps;

    let mut p = start;
    let mut out = Vec::with_capacity(len);
    out.push(p);
    for j in 1..len {
        match kind {
            SynthKind::ConstantVelocity => {}
            SynthKind::ConstantAccel => {
                if j > 1 {
                    speed += accel;
                }
            }
            SynthKind::Turn => {
                if j > turn_from && j <= turn_from + turn_steps {
                    heading += turn / turn_steps as f64;
                }
            }
            SynthKind::Stop => {
                if j > stop_from {
                    speed = (speed - decay).max(0.0);
                }
            }
        }
        p += Vec2::new(heading.cos(), heading.sin()) * speed;
        out.push(p);
    }
    out
}

/// Deterministic synthetic scene with `n_agents` agents moving on their own.
/// Positions get i.i.d. Gaussian noise of standard deviation `noise_sigma`.
pub fn synth_scene(
    kind: SynthKind,
    n_agents: usize,
    noise_sigma: f64,
    seed: u64,
    t_obs: usize,
    t_pred: usize,
) -> Result<SceneWindow> {
    if n_agents == 0 {
        return Err(Error::invalid("synthetic scene needs at least one agent"));
    }
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(Error::invalid(format!("noise sigma must be >= 0, got {noise_sigma}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, noise_sigma).expect("validated sigma");
    let len = t_obs + t_pred;
    let mut w = SceneWindow {
        scene_id: format!("synth_{kind}"),
        window_id: 0,
        start_frame: 0,
        agent_ids: Vec::new(),
        observed: Vec::new(),
        future: Vec::new(),
        units: Units::Meters,
    };
    for a in 0..n_agents {
        let mut pts = synth_path(kind, &mut rng, t_obs, len);
        if noise_sigma > 0.0 {
            for p in &mut pts {
                *p += Vec2::new(noise.sample(&mut rng), noise.sample(&mut rng));
            }
        }
        w.agent_ids.push(a as i64);
        w.observed
            .push(KinematicTriple::from_observed(PositionSeq::new(pts[..t_obs].to_vec()))?);
        w.future.push(PositionSeq::new(pts[t_obs..].to_vec()));
    }
    Ok(w)
}

/// `count` synthetic scenes cycling through `kinds`; scene `i` uses seed `seed + i`.
pub fn synth_dataset(
    kinds: &[SynthKind],
    count: usize,
    n_agents: usize,
    noise_sigma: f64,
    seed: u64,
    t_obs: usize,
    t_pred: usize,
) -> Result<Vec<SceneWindow>> {
    if kinds.is_empty() {
        return Err(Error::invalid("no synthetic kinds given"));
    }
    (0..count)
        .map(|i| {
            let mut w = synth_scene(kinds[i % kinds.len()], n_agents, noise_sigma, seed + i as u64, t_obs, t_pred)?;
            w.window_id = i;
            Ok(w)
        })
        .collect()
}

/// Writes windows back-to-back in the canonical format: window `i` occupies frames
/// `[i * len * frame_step, (i + 1) * len * frame_step)` and agent ids are made
/// unique across windows, so windowing the file with stride `len` recovers them.
pub fn windows_to_canonical(windows: &[SceneWindow], frame_step: i64) -> String {
    let mut out = String::new();
    let mut next_agent = 0i64;
    for (i, w) in windows.iter().enumerate() {
        let len = w.observed.first().map_or(0, |o| o.len()) + w.future.first().map_or(0, |f| f.len());
        let base = i as i64 * len as i64 * frame_step;
        let mut rows = Vec::new();
        for (a, (obs, fut)) in w.observed.iter().zip(&w.future).enumerate() {
            let id = next_agent + a as i64;
            for (j, p) in obs.position.points.iter().chain(&fut.points).enumerate() {
                rows.push((base + j as i64 * frame_step, id, *p));
            }
        }
        next_agent += w.num_agents() as i64;
        rows.sort_by_key(|r| (r.0, r.1));
        for (f, id, p) in rows {
            out.push_str(&format!("{f} {id} {} {}\n", p.x, p.y));
        }
    }
    out
}

/// One entry of a dataset manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneEntry {
    pub name: String,
    pub path: PathBuf,
    #[serde(default)]
    pub units: Units,
    #[serde(default)]
    pub format: TrackFormat,
}

/// Scene name to file mapping, read from TOML:
///
/// ```toml
/// [[scene]]
/// name = "eth"
/// path = "eth.txt"
/// units = "meters"
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    #[serde(default, rename = "scene")]
    pub scenes: Vec<SceneEntry>,
    /// Base for relative paths; set from the manifest location when loaded from a file.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut m: Manifest = toml::from_str(text).map_err(|e| Error::Config(format!("manifest: {e}")))?;
        m.base_dir = base_dir.to_path_buf();
        let mut names = BTreeSet::new();
        for s in &m.scenes {
            if !names.insert(&s.name) {
                return Err(Error::Config(format!("manifest lists scene {:?} twice", s.name)));
            }
        }
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Resolves a scene path; relative paths use the data-root variable when set.
    pub fn resolve(&self, entry: &SceneEntry) -> PathBuf {
        if entry.path.is_absolute() {
            return entry.path.clone();
        }
        match std::env::var_os(DATA_ROOT_ENV) {
            Some(root) if !root.is_empty() => PathBuf::from(root).join(&entry.path),
            _ => self.base_dir.join(&entry.path),
        }
    }

    /// Loads and windows every scene.
    pub fn windows(&self, t_obs: usize, t_pred: usize, stride: usize) -> Result<Vec<SceneWindow>> {
        let mut out = Vec::new();
        for s in &self.scenes {
            let tracks = load_tracks(&self.resolve(s), s.format)?;
            out.extend(window_scenes(&tracks, &s.name, s.units, t_obs, t_pred, stride)?);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::derive_accel;

    fn track_text(agent: i64, frames: std::ops::Range<i64>) -> String {
        frames
            .map(|f| format!("{f} {agent} {}.5 {}\n", f, -f))
            .collect()
    }

    #[test]
    fn parses_canonical_rows() {
        let tracks = parse_tracks("0 1 1.0 2.0\n10 1 1.5 2.5\n", TrackFormat::EthucyTxt, "t").unwrap();
        assert_eq!(tracks.len(), 1);
        assert_eq!(tracks[0].frames, vec![0, 10]);
        assert_eq!(tracks[0].coords[1], Vec2::new(1.5, 2.5));
        assert!(parse_tracks("", TrackFormat::EthucyTxt, "t").unwrap().is_empty());
        let floats = parse_tracks("780.0\t1.0\t8.46\t3.59\n", TrackFormat::EthucyTxt, "t").unwrap();
        assert_eq!((floats[0].frames[0], floats[0].agent_id), (780, 1));
    }

    #[test]
    fn rejects_bad_rows_with_line_numbers() {
        let err = parse_tracks("0 1 1 2\n0 1 3 4\n", TrackFormat::EthucyTxt, "f.txt").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        let err = parse_tracks("0 1 1 2\n\n5 2 x 1\n", TrackFormat::EthucyTxt, "f.txt").unwrap_err();
        assert!(err.to_string().starts_with("f.txt:3:"), "{err}");
        assert!(parse_tracks("0 1 2\n", TrackFormat::EthucyTxt, "f").is_err());
        assert!(parse_tracks("0.5 1 2 3\n", TrackFormat::EthucyTxt, "f").is_err());
    }

    #[test]
    fn sdd_rows_use_box_centre_and_decimate() {
        let text = "\
3 10 20 30 60 0 0 0 0 \"Pedestrian\"
3 12 20 32 60 6 0 0 0 \"Pedestrian\"
3 14 20 34 60 12 0 0 0 \"Pedestrian\"
3 16 20 36 60 24 1 0 0 \"Pedestrian\"
4 0 0 10 10 0 0 0 0 \"Biker\"
";
        let tracks = parse_tracks(text, TrackFormat::SddTxt, "sdd").unwrap();
        assert_eq!(tracks.len(), 1);
        assert_eq!(tracks[0].frames, vec![0, 12]);
        assert_eq!(tracks[0].coords, vec![Vec2::new(20.0, 40.0), Vec2::new(24.0, 40.0)]);
    }

    #[test]
    fn window_counts_follow_track_lengths() {
        let t20 = parse_tracks(&track_text(1, 0..20), TrackFormat::EthucyTxt, "t").unwrap();
        assert_eq!(window_scenes(&t20, "s", Units::Meters, 8, 12, 20).unwrap().len(), 1);
        let t19 = parse_tracks(&track_text(1, 0..19), TrackFormat::EthucyTxt, "t").unwrap();
        assert!(window_scenes(&t19, "s", Units::Meters, 8, 12, 20).unwrap().is_empty());
        let two = format!("{}{}", track_text(1, 0..20), track_text(2, 0..20));
        let t2 = parse_tracks(&two, TrackFormat::EthucyTxt, "t").unwrap();
        let w = window_scenes(&t2, "s", Units::Meters, 8, 12, 20).unwrap();
        assert_eq!((w.len(), w[0].num_agents()), (1, 2));
    }

    #[test]
    fn windowing_uses_the_inferred_frame_step() {
        let text: String = (0..20).map(|i| format!("{} 7 {} 0\n", i * 10, i)).collect();
        let tracks = parse_tracks(&text, TrackFormat::EthucyTxt, "t").unwrap();
        assert_eq!(infer_frame_step(&tracks), 10);
        let w = window_scenes(&tracks, "s", Units::Meters, 8, 12, 1).unwrap();
        assert_eq!(w.len(), 1);
        assert_eq!(w[0].future[0].points[0], Vec2::new(8.0, 0.0));
    }

    #[test]
    fn gaps_exclude_agents_from_windows() {
        let mut text = track_text(1, 0..20);
        text.push_str(&track_text(2, 0..9));
        text.push_str(&track_text(2, 10..20));
        let tracks = parse_tracks(&text, TrackFormat::EthucyTxt, "t").unwrap();
        let w = window_scenes(&tracks, "s", Units::Meters, 8, 12, 1).unwrap();
        assert_eq!(w[0].agent_ids, vec![1]);
    }

    #[test]
    fn windowing_ignores_track_order() {
        let text = format!("{}{}", track_text(5, 0..25), track_text(2, 3..30));
        let mut tracks = parse_tracks(&text, TrackFormat::EthucyTxt, "t").unwrap();
        let a = window_scenes(&tracks, "s", Units::Meters, 8, 12, 1).unwrap();
        tracks.reverse();
        let b = window_scenes(&tracks, "s", Units::Meters, 8, 12, 1).unwrap();
        assert_eq!(a, b);
    }

    fn scene_windows(names: &[&str]) -> Vec<SceneWindow> {
        names
            .iter()
            .map(|n| {
                let mut w = synth_scene(SynthKind::ConstantVelocity, 1, 0.0, 1, 8, 12).unwrap();
                w.scene_id = n.to_string();
                w
            })
            .collect()
    }

    #[test]
    fn splits_partition_by_scene() {
        let ws = scene_windows(&["eth", "hotel", "eth", "zara1"]);
        let (tr, te) = make_splits(ws.clone(), &SplitSpec::LeaveOneOut { held_out: "eth".into() }).unwrap();
        assert_eq!((tr.len(), te.len()), (2, 2));
        assert!(te.iter().all(|w| w.scene_id == "eth"));
        assert!(tr.iter().all(|w| w.scene_id != "eth"));
        let fixed = SplitSpec::Fixed {
            train: vec!["hotel".into(), "zara1".into()],
            test: vec!["eth".into()],
        };
        let (tr, te) = make_splits(ws.clone(), &fixed).unwrap();
        assert_eq!((tr.len(), te.len()), (2, 2));
        assert!(make_splits(ws, &SplitSpec::LeaveOneOut { held_out: "univ".into() }).is_err());
        let single = scene_windows(&["eth", "eth"]);
        assert!(make_splits(single, &SplitSpec::LeaveOneOut { held_out: "eth".into() }).is_err());
    }

    #[test]
    fn synthetic_scenes_have_the_promised_kinematics() {
        let cv = synth_scene(SynthKind::ConstantVelocity, 3, 0.0, 4, 8, 12).unwrap();
        for o in &cv.observed {
            let acc = derive_accel(&crate::kinematics::derive_velocity(&o.position).unwrap()).unwrap();
            assert!(acc.vectors.iter().all(|a| a.norm() < 1e-12));
        }
        let ca = synth_scene(SynthKind::ConstantAccel, 2, 0.0, 4, 8, 12).unwrap();
        for o in &ca.observed {
            let h = o.accel_history();
            for a in &h.vectors {
                assert!((a.x - h.vectors[0].x).abs() < 1e-12 && (a.y - h.vectors[0].y).abs() < 1e-12);
            }
            assert!(h.vectors[0].norm() > 1e-3);
        }
        let stop = synth_scene(SynthKind::Stop, 1, 0.0, 4, 8, 12).unwrap();
        let f = &stop.future[0].points;
        assert_eq!(f[f.len() - 1], f[f.len() - 2]);
        let turn = synth_scene(SynthKind::Turn, 1, 0.0, 4, 8, 12).unwrap();
        let p = &turn.observed[0].position.points;
        let q = &turn.future[0].points;
        let before = p[1] - p[0];
        let after = q[11] - q[10];
        let cos = before.dot(after) / (before.norm() * after.norm());
        assert!(cos < (0.4f64).cos());
    }

    #[test]
    fn synthesis_is_deterministic() {
        for kind in SynthKind::ALL {
            assert_eq!(
                synth_scene(kind, 2, 0.1, 9, 8, 12).unwrap(),
                synth_scene(kind, 2, 0.1, 9, 8, 12).unwrap()
            );
        }
        assert_ne!(
            synth_scene(SynthKind::Turn, 2, 0.0, 1, 8, 12).unwrap(),
            synth_scene(SynthKind::Turn, 2, 0.0, 2, 8, 12).unwrap()
        );
    }

    #[test]
    fn canonical_export_round_trips_through_windowing() {
        let ws = synth_dataset(&SynthKind::ALL, 5, 2, 0.0, 3, 8, 12).unwrap();
        let text = windows_to_canonical(&ws, 10);
        let tracks = parse_tracks(&text, TrackFormat::EthucyTxt, "synth").unwrap();
        let back = window_scenes(&tracks, "synth", Units::Meters, 8, 12, 20).unwrap();
        assert_eq!(back.len(), 5);
        for (a, b) in ws.iter().zip(&back) {
            assert_eq!(a.observed, b.observed);
            assert_eq!(a.future, b.future);
        }
    }

    #[test]
    fn manifest_resolves_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a.txt"), track_text(1, 0..20)).unwrap();
        let m = Manifest::parse(
            "[[scene]]\nname = \"a\"\npath = \"a.txt\"\n",
            dir.path(),
        )
        .unwrap();
        assert_eq!(m.scenes[0].units, Units::Meters);
        if std::env::var_os(DATA_ROOT_ENV).is_none() {
            assert_eq!(m.windows(8, 12, 20).unwrap().len(), 1);
        }
        assert!(Manifest::parse("[[scene]]\nname = \"a\"\npath = \"a\"\n[[scene]]\nname = \"a\"\npath = \"b\"\n", dir.path()).is_err());
    }
}
