//! File-to-file commands and the end-to-end pipeline.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::config::{ConfigError, SessionConfig, SpeedSource};
use crate::geom::UnitQuaternion;
use crate::grid::UniformGrid;
use crate::records::{self, RecordError, RecordKind, RecordReader};
use crate::retarget::{
    fingertip_targets, retarget_sequence, shipped_hand, target_digits, FingertipTargets, KinematicChain,
    RetargetError, RetargetOptions, ShippedHand,
};
use crate::simnet::{
    simulate_captures, simulate_session, AnchorRecord, CaptureRecording, Digit, GroundTruthLog, MotionParams, Segment, SensorTopology,
    SimError,
};
use crate::spatialcal::{calibrate_hand, reconstruct, CalError, CalibrationCaptures, HandFrameSeries, SpatialCalibration};
use crate::spectral::{angular_speed, energy_landscape, BandEnergyProfile, SpectralError, SpeedInput};
use crate::timesync::{drift_report, fit_all, resample, AlignedSeries, ClockMap, DriftReport, SyncError};

#[derive(Debug, Error)]
pub enum Error {
    #[error("config: {0}")]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Record(#[from] RecordError),
    #[error("simulation: {0}")]
    Sim(#[from] SimError),
    #[error("sync: {0}")]
    Sync(#[from] SyncError),
    #[error("calibration: {0}")]
    Cal(#[from] CalError),
    #[error("spectrum: {0}")]
    Spectral(#[from] SpectralError),
    #[error("retarget: {0}")]
    Retarget(#[from] RetargetError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Invalid(String),
}

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_IO: i32 = 4;
pub const EXIT_VALIDATION: i32 = 5;

impl Error {
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(ConfigError::Io { .. }) | Error::Io { .. } | Error::Record(RecordError::Io { .. }) => EXIT_IO,
            Error::Config(_) => EXIT_CONFIG,
            _ => EXIT_VALIDATION,
        }
    }
}

fn ext(gzip: bool) -> &'static str {
    if gzip {
        ".txt.gz"
    } else {
        ".txt"
    }
}

fn create_dir(dir: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(dir).map_err(|source| Error::Io { path: dir.to_path_buf(), source })
}

pub fn write_text(path: &Path, text: &str) -> Result<(), Error> {
    std::fs::write(path, text).map_err(|source| Error::Io { path: path.to_path_buf(), source })
}

// ---------------------------------------------------------------------------
// simulate

#[derive(Debug, Clone, PartialEq)]
pub struct SimulatePaths {
    pub samples: PathBuf,
    pub anchors: PathBuf,
    pub ground_truth: PathBuf,
    pub captures: PathBuf,
}

impl SimulatePaths {
    pub fn in_dir(dir: &Path, gzip: bool) -> Self {
        let e = ext(gzip);
        Self {
            samples: dir.join(format!("samples{e}")),
            anchors: dir.join(format!("anchors{e}")),
            ground_truth: dir.join(format!("ground_truth{e}")),
            captures: dir.join(format!("captures{e}")),
        }
    }
}

pub struct Simulated {
    pub session: crate::simnet::SimulatedSession,
    pub captures: CaptureRecording,
}

pub fn simulate(cfg: &SessionConfig) -> Result<Simulated, Error> {
    let spec = cfg.session_spec()?;
    let session = simulate_session(&spec)?;
    let captures = simulate_captures(
        &spec.topology,
        &spec.mountings,
        &spec.noise,
        &cfg.capture_protocol(),
        cfg.oscillators.nominal_rate_hz,
        cfg.seed,
    );
    Ok(Simulated { session, captures })
}

pub fn write_simulated(sim: &Simulated, paths: &SimulatePaths) -> Result<(), Error> {
    records::write_samples(&paths.samples, &sim.session.samples)?;
    records::write_anchors(&paths.anchors, &sim.session.anchors)?;
    records::write_ground_truth(&paths.ground_truth, &sim.session.truth)?;
    records::write_captures(&paths.captures, &sim.captures)?;
    Ok(())
}

pub fn cmd_simulate(cfg: &SessionConfig, out_dir: &Path) -> Result<SimulatePaths, Error> {
    create_dir(out_dir)?;
    let paths = SimulatePaths::in_dir(out_dir, cfg.gzip);
    write_simulated(&simulate(cfg)?, &paths)?;
    Ok(paths)
}

// ---------------------------------------------------------------------------
// sync

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyncOptions {
    pub baseline: bool,
    pub grid_rate_hz: f64,
    pub drift_cadence_s: f64,
}

impl From<&SessionConfig> for SyncOptions {
    fn from(c: &SessionConfig) -> Self {
        Self { baseline: c.sync.baseline, grid_rate_hz: c.sync.grid_rate_hz, drift_cadence_s: c.sync.drift_cadence_s }
    }
}

#[derive(Debug)]
pub struct Synced {
    pub maps: Vec<ClockMap>,
    pub aligned: AlignedSeries,
    pub drift: DriftReport,
}

/// Master grid spanning the first to the last anchor.
pub fn anchor_grid(anchors: &[AnchorRecord], rate_hz: f64) -> Result<UniformGrid, Error> {
    let no_anchors = || Error::Invalid("no anchors to define the master grid".into());
    let first = anchors.iter().map(|a| a.t_master_us).min().ok_or_else(no_anchors)?;
    let last = anchors.iter().map(|a| a.t_master_us).max().ok_or_else(no_anchors)?;
    let count = ((last - first) as f64 * 1e-6 * rate_hz + 1e-9).floor() as usize + 1;
    UniformGrid::new(first, rate_hz, count).ok_or_else(|| Error::Invalid(format!("invalid grid rate {rate_hz}")))
}

pub fn sync(streams: &[Vec<crate::simnet::SensorSample>], anchors: &[AnchorRecord], opts: &SyncOptions) -> Result<Synced, Error> {
    let ids: Vec<_> = streams.iter().filter_map(|s| s.first().map(|x| x.sensor_id)).collect();
    let maps = fit_all(anchors, &ids, opts.baseline)?;
    let grid = anchor_grid(anchors, opts.grid_rate_hz)?;
    let aligned = resample(streams, &maps, &grid)?;
    let span = (grid.count.saturating_sub(1)) as f64 / grid.rate_hz;
    let drift = drift_report(&maps, None, Some(anchors), span, opts.drift_cadence_s);
    Ok(Synced { maps, aligned, drift })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stats {
    pub max: f64,
    pub rms: f64,
    pub count: usize,
}

impl Stats {
    fn of(values: impl Iterator<Item = f64>) -> Self {
        let (mut max, mut sum2, mut count) = (0.0f64, 0.0, 0usize);
        for v in values {
            max = max.max(v.abs());
            sum2 += v * v;
            count += 1;
        }
        Self { max, rms: if count == 0 { 0.0 } else { (sum2 / count as f64).sqrt() }, count }
    }
}

/// Per-sensor mapping error (seconds) of `maps` against the true local
/// clock readings in the ground-truth log.
pub fn sync_error_vs_truth(maps: &[ClockMap], truth: &GroundTruthLog) -> Vec<Stats> {
    maps.iter()
        .map(|m| {
            let Some(i) = truth.sensor_ids.iter().position(|s| *s == m.sensor_id()) else {
                return Stats { max: 0.0, rms: 0.0, count: 0 };
            };
            Stats::of(
                truth.entries[i]
                    .iter()
                    .enumerate()
                    .map(|(k, e)| (m.local_to_master(e.t_local_us) - truth.grid.tick_us(k)) * 1e-6),
            )
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyncPaths {
    pub aligned: PathBuf,
    pub drift: PathBuf,
}

impl SyncPaths {
    pub fn in_dir(dir: &Path, gzip: bool) -> Self {
        let e = ext(gzip);
        Self { aligned: dir.join(format!("aligned{e}")), drift: dir.join(format!("drift{e}")) }
    }
}

pub fn cmd_sync(samples: &Path, anchors: &Path, opts: &SyncOptions, out: &SyncPaths) -> Result<Synced, Error> {
    let streams = records::read_samples(samples)?;
    let anchors = records::read_anchors(anchors)?;
    let s = sync(&streams, &anchors, opts)?;
    records::write_aligned(&out.aligned, &s.aligned)?;
    records::write_drift(&out.drift, &s.drift)?;
    Ok(s)
}

// ---------------------------------------------------------------------------
// calibrate / reconstruct

pub fn calibrate(captures: &CaptureRecording, threshold: f64) -> Result<SpatialCalibration, Error> {
    let c = CalibrationCaptures::from_recording(captures)?;
    Ok(calibrate_hand(&c, &SensorTopology::standard(), threshold)?)
}

pub fn cmd_calibrate(captures: &Path, threshold: f64, out: &Path) -> Result<SpatialCalibration, Error> {
    let cal = calibrate(&records::read_captures(captures)?, threshold)?;
    records::write_calibration(out, &cal)?;
    Ok(cal)
}

pub fn cmd_reconstruct(aligned: &Path, calibration: &Path, out: &Path) -> Result<HandFrameSeries, Error> {
    let aligned = records::read_aligned(aligned)?;
    let cal = records::read_calibration(calibration)?;
    let frames = reconstruct(&aligned, &cal, &SensorTopology::standard())?;
    records::write_hand_frames(out, &frames)?;
    Ok(frames)
}

/// Per-segment geodesic error (radians) of reconstructed frames against the
/// ground truth, over ticks valid in the reconstruction and present on the
/// truth grid.
pub fn reconstruction_error(frames: &HandFrameSeries, truth: &GroundTruthLog) -> Vec<Stats> {
    frames
        .sensor_ids
        .iter()
        .enumerate()
        .map(|(s, id)| {
            let Some(ti) = truth.sensor_ids.iter().position(|x| x == id) else {
                return Stats { max: 0.0, rms: 0.0, count: 0 };
            };
            Stats::of((0..frames.grid.count).filter(|k| frames.valid[s][*k]).filter_map(|k| {
                let t = frames.grid.tick_us_int(k);
                let j = truth_tick(&truth.grid, t)?;
                Some(frames.orientations[s][k].angle_to(&truth.entries[ti][j].orientation))
            }))
        })
        .collect()
}

fn truth_tick(grid: &UniformGrid, t_us: i64) -> Option<usize> {
    let j = ((t_us - grid.t_start_us) as f64 / grid.period_us()).round();
    if j < 0.0 || j as usize >= grid.count {
        return None;
    }
    (grid.tick_us_int(j as usize) == t_us).then_some(j as usize)
}

/// Largest pairwise geodesic distance between digit segments, per window of
/// `window_s` seconds: `(window end time, max divergence)`. On motions where
/// every segment follows the same trajectory this isolates timing error.
pub fn finger_divergence(frames: &HandFrameSeries, window_s: f64) -> Vec<(f64, f64)> {
    let digits: Vec<usize> = (0..frames.segments.len()).filter(|s| frames.segments[*s].digit().is_some()).collect();
    let per_window = ((window_s * frames.grid.rate_hz).round() as usize).max(1);
    let mut out = Vec::new();
    let mut current = 0.0f64;
    for k in 0..frames.grid.count {
        if digits.iter().all(|s| frames.valid[*s][k]) {
            let qs: Vec<&UnitQuaternion> = digits.iter().map(|s| &frames.orientations[*s][k]).collect();
            for a in 0..qs.len() {
                for b in a + 1..qs.len() {
                    current = current.max(qs[a].angle_to(qs[b]));
                }
            }
        }
        if (k + 1) % per_window == 0 {
            out.push((frames.grid.tick_s(k), current));
            current = 0.0;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// spectrum

pub fn spectrum_of_frames(frames: &HandFrameSeries, f_min: f64, window: usize, hop: usize) -> Result<BandEnergyProfile, Error> {
    let speed = angular_speed(SpeedInput::Frames(frames), &SensorTopology::standard());
    Ok(energy_landscape(&speed, f_min, window, hop)?)
}

pub fn spectrum_of_aligned(aligned: &AlignedSeries, source: SpeedSource, f_min: f64, window: usize, hop: usize) -> Result<BandEnergyProfile, Error> {
    let input = match source {
        SpeedSource::Orientation => SpeedInput::SensorOrientation(aligned),
        _ => SpeedInput::Gyro(aligned),
    };
    let speed = angular_speed(input, &SensorTopology::standard());
    Ok(energy_landscape(&speed, f_min, window, hop)?)
}

/// Accepts a hand-frame or an aligned file. Aligned input uses the gyro
/// channels unless `source` asks for orientations.
pub fn cmd_spectrum(input: &Path, source: SpeedSource, f_min: f64, window: usize, hop: usize, out: &Path) -> Result<BandEnergyProfile, Error> {
    let kind = RecordReader::open(input, RecordKind::HandFrames).map(|_| RecordKind::HandFrames).or_else(|_| {
        RecordReader::open(input, RecordKind::Aligned).map(|_| RecordKind::Aligned)
    });
    let profile = match kind {
        Ok(RecordKind::HandFrames) => spectrum_of_frames(&records::read_hand_frames(input)?, f_min, window, hop)?,
        Ok(_) => spectrum_of_aligned(&records::read_aligned(input)?, source, f_min, window, hop)?,
        Err(_) => {
            // Surface the error of the expected kind.
            records::read_hand_frames(input)?;
            unreachable!("read of an unreadable file succeeded")
        }
    };
    records::write_spectrum(out, &profile, window, hop)?;
    Ok(profile)
}

// ---------------------------------------------------------------------------
// retarget

pub fn load_chain(cfg: &SessionConfig, config_dir: &Path) -> Result<KinematicChain, Error> {
    match &cfg.retarget.chain {
        Some(p) => read_chain(&config_dir.join(p)),
        None => Ok(shipped_hand(cfg.retarget.hand)),
    }
}

pub fn read_chain(path: &Path) -> Result<KinematicChain, Error> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
    KinematicChain::from_toml(&text).map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))
}

/// Wrist-frame fingertip targets every `stride` ticks where the needed
/// segments are valid.
pub fn targets_from_frames(frames: &HandFrameSeries, hand: ShippedHand, stride: usize) -> Vec<records::TargetFrame> {
    let digits = target_digits(hand);
    (0..frames.grid.count)
        .step_by(stride.max(1))
        .filter_map(|k| fingertip_targets(frames, k, &digits).map(|t| (frames.grid.tick_s(k), t.0)))
        .collect()
}

pub fn cmd_targets(frames: &Path, hand: ShippedHand, stride: usize, out: &Path) -> Result<Vec<records::TargetFrame>, Error> {
    let targets = targets_from_frames(&records::read_hand_frames(frames)?, hand, stride);
    records::write_targets(out, &targets)?;
    Ok(targets)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetargetReport {
    pub frames: usize,
    pub converged: usize,
    pub rmse: Vec<f64>,
    pub mean_rmse: f64,
    pub max_rmse: f64,
}

pub struct Retargeted {
    pub joints: Vec<records::JointFrame>,
    pub report: RetargetReport,
}

pub fn retarget_frames(chain: &KinematicChain, targets: &[records::TargetFrame], opts: &RetargetOptions) -> Result<Retargeted, Error> {
    if targets.is_empty() {
        return Ok(Retargeted {
            joints: Vec::new(),
            report: RetargetReport { frames: 0, converged: 0, rmse: Vec::new(), mean_rmse: 0.0, max_rmse: 0.0 },
        });
    }
    let stream: Vec<FingertipTargets> = targets.iter().map(|(_, p)| FingertipTargets(p.clone())).collect();
    let seq = retarget_sequence(chain, &stream, &chain.rest(), opts)?;
    let joints = targets.iter().zip(&seq.q).map(|((t, _), q)| (*t, q.iter().copied().collect())).collect();
    let n = seq.rmse.len();
    let report = RetargetReport {
        frames: n,
        converged: seq.converged.iter().filter(|c| **c).count(),
        mean_rmse: seq.rmse.iter().sum::<f64>() / n as f64,
        max_rmse: seq.rmse.iter().fold(0.0, |m, v| m.max(*v)),
        rmse: seq.rmse,
    };
    Ok(Retargeted { joints, report })
}

pub fn render_retarget_report(r: &RetargetReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "frames = {}", r.frames);
    let _ = writeln!(s, "converged = {}", r.converged);
    let _ = writeln!(s, "rmse_mean_m = {:?}", r.mean_rmse);
    let _ = writeln!(s, "rmse_max_m = {:?}", r.max_rmse);
    s
}

pub fn cmd_retarget(chain: &Path, targets: &Path, opts: &RetargetOptions, joints_out: &Path, report_out: &Path) -> Result<RetargetReport, Error> {
    let chain = read_chain(chain)?;
    let targets = records::read_targets(targets)?;
    if let Some((t, pts)) = targets.iter().find(|(_, p)| p.len() != chain.fingertip_count()) {
        return Err(Error::Invalid(format!(
            "frame at {t} s has {} targets, chain `{}` has {} fingertips",
            pts.len(),
            chain.name(),
            chain.fingertip_count()
        )));
    }
    let r = retarget_frames(&chain, &targets, opts)?;
    let names: Vec<&str> = chain.joints().iter().map(|j| j.name.as_str()).collect();
    records::write_joints(joints_out, &names, &r.joints)?;
    write_text(report_out, &render_retarget_report(&r.report))?;
    Ok(r.report)
}

// ---------------------------------------------------------------------------
// pipeline

pub const DIVERGENCE_WINDOW_S: f64 = 10.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub value: f64,
    pub threshold: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineSummary {
    pub baseline: bool,
    pub samples: usize,
    pub anchors: usize,
    pub sync_error: Vec<Stats>,
    pub sync_error_max_s: f64,
    pub reconstruction_error: Vec<Stats>,
    pub reconstruction_error_max_rad: f64,
    pub divergence: Vec<(f64, f64)>,
    pub spectrum_peak: Vec<(String, f64)>,
    pub retarget: RetargetReport,
    pub checks: Vec<Check>,
}

impl PipelineSummary {
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "sync_mode = {}", if self.baseline { "one-time" } else { "broadcast" });
        let _ = writeln!(s, "samples = {}", self.samples);
        let _ = writeln!(s, "anchors = {}", self.anchors);
        let _ = writeln!(s, "sync_error_max_s = {:?}", self.sync_error_max_s);
        let ids = SensorTopology::standard().ids();
        for (id, e) in ids.iter().zip(&self.sync_error) {
            let _ = writeln!(s, "sync_error sensor={} max_s={:?} rms_s={:?}", id.0, e.max, e.rms);
        }
        let _ = writeln!(s, "reconstruction_error_max_rad = {:?}", self.reconstruction_error_max_rad);
        let topo = SensorTopology::standard();
        for (node, e) in topo.sensors().iter().zip(&self.reconstruction_error) {
            let _ = writeln!(s, "reconstruction_error segment={} max_rad={:?} rms_rad={:?} ticks={}", node.segment.label(), e.max, e.rms, e.count);
        }
        for (t, d) in &self.divergence {
            let _ = writeln!(s, "finger_divergence window_end_s={t:?} max_rad={d:?}");
        }
        for (label, e) in &self.spectrum_peak {
            let _ = writeln!(s, "spectrum_peak segment={label} energy={e:?}");
        }
        s.push_str(&render_retarget_report(&self.retarget).lines().map(|l| format!("retarget_{l}\n")).collect::<String>());
        for c in &self.checks {
            let _ = writeln!(s, "check {} value={:?} threshold={:?} {}", c.name, c.value, c.threshold, if c.pass { "PASS" } else { "FAIL" });
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelinePaths {
    pub sim: SimulatePaths,
    pub sync: SyncPaths,
    pub calibration: PathBuf,
    pub hand_frames: PathBuf,
    pub spectrum: PathBuf,
    pub targets: PathBuf,
    pub joints: PathBuf,
    pub retarget_report: PathBuf,
    pub summary: PathBuf,
}

impl PipelinePaths {
    pub fn in_dir(dir: &Path, gzip: bool) -> Self {
        let e = ext(gzip);
        Self {
            sim: SimulatePaths::in_dir(dir, gzip),
            sync: SyncPaths::in_dir(dir, gzip),
            calibration: dir.join(format!("calibration{e}")),
            hand_frames: dir.join(format!("hand_frames{e}")),
            spectrum: dir.join(format!("spectrum{e}")),
            targets: dir.join(format!("targets{e}")),
            joints: dir.join(format!("joints{e}")),
            retarget_report: dir.join("retarget_report.txt"),
            summary: dir.join("summary.txt"),
        }
    }
}

/// In-memory results of one pipeline run, alongside the files it wrote.
pub struct PipelineRun {
    pub paths: PipelinePaths,
    pub summary: PipelineSummary,
    pub frames: HandFrameSeries,
    pub spectrum: BandEnergyProfile,
    pub timings: Vec<(&'static str, std::time::Duration)>,
}

pub fn cmd_pipeline(cfg: &SessionConfig, config_dir: &Path, out_dir: &Path) -> Result<PipelineRun, Error> {
    use std::time::Instant;
    create_dir(out_dir)?;
    let paths = PipelinePaths::in_dir(out_dir, cfg.gzip);
    let chain = load_chain(cfg, config_dir)?;
    let mut timings = Vec::new();

    let t = Instant::now();
    let sim = simulate(cfg)?;
    timings.push(("simulate", t.elapsed()));
    let t = Instant::now();
    write_simulated(&sim, &paths.sim)?;
    timings.push(("write raw records", t.elapsed()));

    let t = Instant::now();
    let synced = sync(&sim.session.samples, &sim.session.anchors, &SyncOptions::from(cfg))?;
    timings.push(("sync + resample", t.elapsed()));
    records::write_aligned(&paths.sync.aligned, &synced.aligned)?;
    records::write_drift(&paths.sync.drift, &synced.drift)?;
    let sync_error = sync_error_vs_truth(&synced.maps, &sim.session.truth);

    let t = Instant::now();
    let cal = calibrate(&sim.captures, cfg.capture.degeneracy_threshold)?;
    records::write_calibration(&paths.calibration, &cal)?;
    let frames = reconstruct(&synced.aligned, &cal, &SensorTopology::standard())?;
    timings.push(("calibrate + reconstruct", t.elapsed()));
    records::write_hand_frames(&paths.hand_frames, &frames)?;
    let recon = reconstruction_error(&frames, &sim.session.truth);

    let t = Instant::now();
    let sp = &cfg.spectrum;
    let spectrum = match sp.source {
        SpeedSource::Frames => spectrum_of_frames(&frames, sp.f_min_hz, sp.window, sp.hop)?,
        other => spectrum_of_aligned(&synced.aligned, other, sp.f_min_hz, sp.window, sp.hop)?,
    };
    timings.push(("spectrum", t.elapsed()));
    records::write_spectrum(&paths.spectrum, &spectrum, sp.window, sp.hop)?;

    let t = Instant::now();
    let hand = match &cfg.retarget.chain {
        Some(_) => {
            if chain.fingertip_count() == 4 {
                ShippedHand::FourFinger
            } else {
                ShippedHand::FiveFinger
            }
        }
        None => cfg.retarget.hand,
    };
    let targets = targets_from_frames(&frames, hand, cfg.retarget.stride);
    if let Some((_, pts)) = targets.first() {
        if pts.len() != chain.fingertip_count() {
            return Err(Error::Invalid(format!("chain `{}` needs {} fingertips, targets provide {}", chain.name(), chain.fingertip_count(), pts.len())));
        }
    }
    let opts = RetargetOptions { tol: cfg.retarget.tol, max_iter: cfg.retarget.max_iter, ..RetargetOptions::default() };
    let rt = retarget_frames(&chain, &targets, &opts)?;
    timings.push(("retarget", t.elapsed()));
    records::write_targets(&paths.targets, &targets)?;
    let names: Vec<&str> = chain.joints().iter().map(|j| j.name.as_str()).collect();
    records::write_joints(&paths.joints, &names, &rt.joints)?;
    write_text(&paths.retarget_report, &render_retarget_report(&rt.report))?;

    let sync_error_max_s = sync_error.iter().fold(0.0f64, |m, e| m.max(e.max));
    let reconstruction_error_max_rad = recon.iter().fold(0.0f64, |m, e| m.max(e.max));
    let spectrum_peak: Vec<(String, f64)> = spectrum
        .labels
        .iter()
        .zip(&spectrum.energy)
        .map(|(l, e)| (l.clone(), e.iter().fold(0.0f64, |m, v| m.max(*v))))
        .collect();
    let mut checks = vec![
        Check { name: "sync_subframe_max_s", value: sync_error_max_s, threshold: 0.625e-3, pass: sync_error_max_s < 0.625e-3 },
        Check {
            name: "reconstruction_max_rad",
            value: reconstruction_error_max_rad,
            threshold: 0.5f64.to_radians(),
            pass: reconstruction_error_max_rad < 0.5f64.to_radians(),
        },
    ];
    // only meaningful when the thumb is held still while other segments burst
    let thumb_still = match cfg.motion_params()? {
        MotionParams::Burst { segments, .. } => spectrum
            .labels
            .iter()
            .filter_map(|l| Segment::parse(l))
            .filter(|s| s.digit() == Some(Digit::Thumb))
            .all(|s| !segments.selects(s)),
        _ => false,
    };
    if let Some(thumb) = thumb_fraction(&spectrum).filter(|_| thumb_still) {
        checks.push(Check { name: "thumb_band_fraction", value: thumb, threshold: 0.01, pass: thumb < 0.01 });
    }
    let summary = PipelineSummary {
        baseline: cfg.sync.baseline,
        samples: sim.session.samples.iter().map(|s| s.len()).sum(),
        anchors: sim.session.anchors.len(),
        sync_error,
        sync_error_max_s,
        reconstruction_error: recon,
        reconstruction_error_max_rad,
        divergence: finger_divergence(&frames, DIVERGENCE_WINDOW_S),
        spectrum_peak,
        retarget: rt.report,
        checks,
    };
    write_text(&paths.summary, &summary.render())?;
    Ok(PipelineRun { paths, summary, frames, spectrum, timings })
}

/// Worst thumb-row band energy over all frames, relative to the peak energy
/// of any non-thumb row over the whole profile. `None` when no thumb row has
/// data or the non-thumb rows are all zero.
pub fn thumb_fraction(p: &BandEnergyProfile) -> Option<f64> {
    let is_thumb = |i: usize| p.labels[i].starts_with("thumb");
    let peak = (0..p.labels.len()).filter(|i| !is_thumb(*i)).flat_map(|i| p.energy[i].iter()).fold(0.0f64, |m, v| m.max(*v));
    let thumb = (0..p.labels.len())
        .filter(|i| is_thumb(*i) && !p.energy[*i].is_empty())
        .flat_map(|i| p.energy[i].iter())
        .fold(None, |m: Option<f64>, v| Some(m.unwrap_or(0.0).max(*v)))?;
    (peak > 0.0).then(|| thumb / peak)
}
