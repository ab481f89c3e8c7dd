//! Session configuration (TOML). Unknown keys are rejected everywhere.

use std::path::Path;

use serde::Deserialize;
use thiserror::Error;

use crate::retarget::ShippedHand;
use crate::simnet::{
    draw_mountings, draw_oscillators, gen_motion, CaptureProtocol, MotionParams, OscillatorModel, SegmentSelection,
    SensorId, SensorNoise, SensorTopology, SessionSpec,
};
use crate::spectral::{DEFAULT_F_MIN_HZ, DEFAULT_HOP, DEFAULT_WINDOW};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("{0}")]
    Parse(String),
    #[error("field `{field}`: {message}")]
    Field { field: String, message: String },
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

fn field(field: &str, message: impl ToString) -> ConfigError {
    ConfigError::Field { field: field.to_string(), message: message.to_string() }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OscillatorConfig {
    pub nominal_rate_hz: f64,
    /// Offsets are drawn from `U(-range, range)` ppm per sensor.
    pub offset_range_ppm: f64,
    pub random_walk_ppm_per_sqrt_s: f64,
    pub latch_jitter_s: f64,
    pub initial_offset_s: f64,
    pub overrides: Vec<OscillatorOverride>,
}

impl Default for OscillatorConfig {
    fn default() -> Self {
        Self {
            nominal_rate_hz: 800.0,
            offset_range_ppm: 100.0,
            random_walk_ppm_per_sqrt_s: 5.0,
            latch_jitter_s: 5e-6,
            initial_offset_s: 0.0,
            overrides: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OscillatorOverride {
    pub sensor_id: u16,
    pub nominal_rate_hz: Option<f64>,
    pub freq_offset_ppm: Option<f64>,
    pub random_walk_ppm_per_sqrt_s: Option<f64>,
    pub latch_jitter_s: Option<f64>,
    pub initial_offset_s: Option<f64>,
}

/// Motion kind plus optional parameter overrides; keys that do not belong
/// to the chosen kind are rejected.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MotionConfig {
    pub kind: String,
    pub freq_hz: Option<f64>,
    pub amplitude_rad: Option<f64>,
    pub f0_hz: Option<f64>,
    pub f1_hz: Option<f64>,
    pub rate_amplitude: Option<f64>,
    pub only: Option<Vec<String>>,
    pub exclude: Option<Vec<String>>,
    pub first_s: Option<f64>,
    pub period_s: Option<f64>,
    pub burst_s: Option<f64>,
}

impl Default for MotionConfig {
    fn default() -> Self {
        Self {
            kind: "flip".into(),
            freq_hz: None,
            amplitude_rad: None,
            f0_hz: None,
            f1_hz: None,
            rate_amplitude: None,
            only: None,
            exclude: None,
            first_s: None,
            period_s: None,
            burst_s: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    pub orientation_deg: f64,
    pub gyro_rad_s: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self { orientation_deg: 0.05, gyro_rad_s: 0.01 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CaptureConfig {
    pub alpha_deg: f64,
    pub start_pitch_deg: f64,
    pub window_s: f64,
    pub degeneracy_threshold: f64,
}

impl Default for CaptureConfig {
    fn default() -> Self {
        Self { alpha_deg: 90.0, start_pitch_deg: 0.0, window_s: 0.25, degeneracy_threshold: crate::spatialcal::DEFAULT_DEGENERACY_THRESHOLD }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyncConfig {
    /// Use only the first anchor (slope 1) instead of the piecewise map.
    pub baseline: bool,
    pub grid_rate_hz: f64,
    pub drift_cadence_s: f64,
}

impl Default for SyncConfig {
    fn default() -> Self {
        Self { baseline: false, grid_rate_hz: 800.0, drift_cadence_s: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpeedSource {
    Frames,
    Gyro,
    Orientation,
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpectrumConfig {
    pub f_min_hz: f64,
    pub window: usize,
    pub hop: usize,
    pub source: SpeedSource,
}

impl Default for SpectrumConfig {
    fn default() -> Self {
        Self { f_min_hz: DEFAULT_F_MIN_HZ, window: DEFAULT_WINDOW, hop: DEFAULT_HOP, source: SpeedSource::Gyro }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetargetConfig {
    pub hand: ShippedHand,
    /// Chain file; overrides `hand` when set. Relative to the config file.
    pub chain: Option<String>,
    /// Solve every `stride`-th grid tick.
    pub stride: usize,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for RetargetConfig {
    fn default() -> Self {
        Self { hand: ShippedHand::FiveFinger, chain: None, stride: 8, tol: 1e-7, max_iter: 100 }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SessionConfig {
    pub seed: u64,
    pub duration_s: f64,
    pub anchor_period_s: f64,
    pub truth_rate_hz: f64,
    pub topology: String,
    pub gzip: bool,
    pub oscillators: OscillatorConfig,
    pub motion: MotionConfig,
    pub noise: NoiseConfig,
    pub capture: CaptureConfig,
    pub sync: SyncConfig,
    pub spectrum: SpectrumConfig,
    pub retarget: RetargetConfig,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            duration_s: 140.0,
            anchor_period_s: 1.0,
            truth_rate_hz: 800.0,
            topology: "standard".into(),
            gzip: false,
            oscillators: OscillatorConfig::default(),
            motion: MotionConfig::default(),
            noise: NoiseConfig::default(),
            capture: CaptureConfig::default(),
            sync: SyncConfig::default(),
            spectrum: SpectrumConfig::default(),
            retarget: RetargetConfig::default(),
        }
    }
}

fn positive(name: &str, v: f64) -> Result<(), ConfigError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(field(name, format!("must be a positive finite number, got {v}")))
    }
}

fn non_negative(name: &str, v: f64) -> Result<(), ConfigError> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(field(name, format!("must be a non-negative finite number, got {v}")))
    }
}

impl SessionConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: SessionConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Io { path: path.display().to_string(), message: e.to_string() })?;
        Self::from_toml(&text).map_err(|e| match e {
            ConfigError::Parse(m) => ConfigError::Parse(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        positive("duration_s", self.duration_s)?;
        positive("anchor_period_s", self.anchor_period_s)?;
        positive("truth_rate_hz", self.truth_rate_hz)?;
        if self.topology != "standard" {
            return Err(field("topology", format!("unknown topology `{}` (only `standard`)", self.topology)));
        }
        let o = &self.oscillators;
        positive("oscillators.nominal_rate_hz", o.nominal_rate_hz)?;
        non_negative("oscillators.offset_range_ppm", o.offset_range_ppm)?;
        non_negative("oscillators.random_walk_ppm_per_sqrt_s", o.random_walk_ppm_per_sqrt_s)?;
        non_negative("oscillators.latch_jitter_s", o.latch_jitter_s)?;
        if !o.initial_offset_s.is_finite() {
            return Err(field("oscillators.initial_offset_s", "must be finite"));
        }
        let topo = SensorTopology::standard();
        for ov in &o.overrides {
            if topo.node(SensorId(ov.sensor_id)).is_none() {
                return Err(field("oscillators.overrides.sensor_id", format!("no sensor {}", ov.sensor_id)));
            }
        }
        for (s, m) in topo.ids().iter().zip(self.oscillators().iter()) {
            m.validate(*s).map_err(|e| field("oscillators", e))?;
        }
        self.motion_params()?;
        non_negative("noise.orientation_deg", self.noise.orientation_deg)?;
        non_negative("noise.gyro_rad_s", self.noise.gyro_rad_s)?;
        let c = &self.capture;
        if !(c.alpha_deg > 0.0 && c.alpha_deg < 180.0) {
            return Err(field("capture.alpha_deg", "must lie in (0, 180)"));
        }
        if !c.start_pitch_deg.is_finite() {
            return Err(field("capture.start_pitch_deg", "must be finite"));
        }
        positive("capture.window_s", c.window_s)?;
        positive("capture.degeneracy_threshold", c.degeneracy_threshold)?;
        positive("sync.grid_rate_hz", self.sync.grid_rate_hz)?;
        positive("sync.drift_cadence_s", self.sync.drift_cadence_s)?;
        let sp = &self.spectrum;
        if !sp.f_min_hz.is_finite() {
            return Err(field("spectrum.f_min_hz", "must be finite"));
        }
        if sp.window < 2 {
            return Err(field("spectrum.window", "must be at least 2"));
        }
        if sp.hop == 0 {
            return Err(field("spectrum.hop", "must be at least 1"));
        }
        let r = &self.retarget;
        if r.stride == 0 {
            return Err(field("retarget.stride", "must be at least 1"));
        }
        positive("retarget.tol", r.tol)?;
        if r.max_iter == 0 {
            return Err(field("retarget.max_iter", "must be at least 1"));
        }
        Ok(())
    }

    pub fn motion_params(&self) -> Result<MotionParams, ConfigError> {
        let m = &self.motion;
        let mut p = MotionParams::default_for(&m.kind).map_err(|e| field("motion.kind", e))?;
        let reject = |name: &str, set: bool| -> Result<(), ConfigError> {
            if set {
                Err(field(&format!("motion.{name}"), format!("not a parameter of motion kind `{}`", m.kind)))
            } else {
                Ok(())
            }
        };
        let selection = |sel: &mut SegmentSelection| -> Result<(), ConfigError> {
            match (&m.only, &m.exclude) {
                (Some(_), Some(_)) => Err(field("motion.only", "`only` and `exclude` are mutually exclusive")),
                (Some(o), None) => {
                    *sel = SegmentSelection::Only(o.clone());
                    Ok(())
                }
                (None, Some(e)) => {
                    *sel = SegmentSelection::Exclude(e.clone());
                    Ok(())
                }
                (None, None) => Ok(()),
            }
        };
        match &mut p {
            MotionParams::Static => {
                for (n, set) in [
                    ("freq_hz", m.freq_hz.is_some()),
                    ("amplitude_rad", m.amplitude_rad.is_some()),
                    ("f0_hz", m.f0_hz.is_some()),
                    ("f1_hz", m.f1_hz.is_some()),
                    ("rate_amplitude", m.rate_amplitude.is_some()),
                    ("only", m.only.is_some()),
                    ("exclude", m.exclude.is_some()),
                    ("first_s", m.first_s.is_some()),
                    ("period_s", m.period_s.is_some()),
                    ("burst_s", m.burst_s.is_some()),
                ] {
                    reject(n, set)?;
                }
            }
            MotionParams::Flip { freq_hz, amplitude_rad } => {
                for (n, set) in [
                    ("f0_hz", m.f0_hz.is_some()),
                    ("f1_hz", m.f1_hz.is_some()),
                    ("rate_amplitude", m.rate_amplitude.is_some()),
                    ("only", m.only.is_some()),
                    ("exclude", m.exclude.is_some()),
                    ("first_s", m.first_s.is_some()),
                    ("period_s", m.period_s.is_some()),
                    ("burst_s", m.burst_s.is_some()),
                ] {
                    reject(n, set)?;
                }
                *freq_hz = m.freq_hz.unwrap_or(*freq_hz);
                *amplitude_rad = m.amplitude_rad.unwrap_or(*amplitude_rad);
                positive("motion.freq_hz", *freq_hz)?;
                non_negative("motion.amplitude_rad", *amplitude_rad)?;
            }
            MotionParams::Chirp { f0_hz, f1_hz, rate_amplitude, segments } => {
                for (n, set) in [
                    ("freq_hz", m.freq_hz.is_some()),
                    ("amplitude_rad", m.amplitude_rad.is_some()),
                    ("first_s", m.first_s.is_some()),
                    ("period_s", m.period_s.is_some()),
                    ("burst_s", m.burst_s.is_some()),
                ] {
                    reject(n, set)?;
                }
                *f0_hz = m.f0_hz.unwrap_or(*f0_hz);
                *f1_hz = m.f1_hz.unwrap_or(*f1_hz);
                *rate_amplitude = m.rate_amplitude.unwrap_or(*rate_amplitude);
                positive("motion.f0_hz", *f0_hz)?;
                positive("motion.f1_hz", *f1_hz)?;
                non_negative("motion.rate_amplitude", *rate_amplitude)?;
                selection(segments)?;
            }
            MotionParams::Burst { segments, first_s, period_s, burst_s, freq_hz, rate_amplitude } => {
                for (n, set) in [
                    ("amplitude_rad", m.amplitude_rad.is_some()),
                    ("f0_hz", m.f0_hz.is_some()),
                    ("f1_hz", m.f1_hz.is_some()),
                ] {
                    reject(n, set)?;
                }
                *first_s = m.first_s.unwrap_or(*first_s);
                *period_s = m.period_s.unwrap_or(*period_s);
                *burst_s = m.burst_s.unwrap_or(*burst_s);
                *freq_hz = m.freq_hz.unwrap_or(*freq_hz);
                *rate_amplitude = m.rate_amplitude.unwrap_or(*rate_amplitude);
                non_negative("motion.first_s", *first_s)?;
                positive("motion.period_s", *period_s)?;
                positive("motion.burst_s", *burst_s)?;
                positive("motion.freq_hz", *freq_hz)?;
                non_negative("motion.rate_amplitude", *rate_amplitude)?;
                selection(segments)?;
            }
        }
        gen_motion(&m.kind, &p, self.duration_s).map_err(|e| field("motion", e))?;
        Ok(p)
    }

    pub fn oscillators(&self) -> Vec<OscillatorModel> {
        let o = &self.oscillators;
        let topo = SensorTopology::standard();
        let template = OscillatorModel {
            nominal_rate_hz: o.nominal_rate_hz,
            freq_offset_ppm: 0.0,
            random_walk_ppm_per_sqrt_s: o.random_walk_ppm_per_sqrt_s,
            latch_jitter_s: o.latch_jitter_s,
            initial_offset_s: o.initial_offset_s,
        };
        let mut models = draw_oscillators(&topo, self.seed, o.offset_range_ppm, template);
        for ov in &o.overrides {
            if let Some(i) = topo.index_of(SensorId(ov.sensor_id)) {
                let m = &mut models[i];
                m.nominal_rate_hz = ov.nominal_rate_hz.unwrap_or(m.nominal_rate_hz);
                m.freq_offset_ppm = ov.freq_offset_ppm.unwrap_or(m.freq_offset_ppm);
                m.random_walk_ppm_per_sqrt_s = ov.random_walk_ppm_per_sqrt_s.unwrap_or(m.random_walk_ppm_per_sqrt_s);
                m.latch_jitter_s = ov.latch_jitter_s.unwrap_or(m.latch_jitter_s);
                m.initial_offset_s = ov.initial_offset_s.unwrap_or(m.initial_offset_s);
            }
        }
        models
    }

    pub fn noise(&self) -> SensorNoise {
        SensorNoise { orientation_rad: self.noise.orientation_deg.to_radians(), gyro_rad_s: self.noise.gyro_rad_s }
    }

    pub fn capture_protocol(&self) -> CaptureProtocol {
        CaptureProtocol {
            alpha_rad: self.capture.alpha_deg.to_radians(),
            start_pitch_rad: self.capture.start_pitch_deg.to_radians(),
            window_s: self.capture.window_s,
        }
    }

    pub fn session_spec(&self) -> Result<SessionSpec, ConfigError> {
        self.validate()?;
        let topology = SensorTopology::standard();
        let params = self.motion_params()?;
        let motion = gen_motion(&self.motion.kind, &params, self.duration_s).map_err(|e| field("motion", e))?;
        Ok(SessionSpec {
            mountings: draw_mountings(&topology, self.seed),
            oscillators: self.oscillators(),
            topology,
            motion,
            noise: self.noise(),
            duration_s: self.duration_s,
            anchor_period_s: self.anchor_period_s,
            seed: self.seed,
            truth_rate_hz: self.truth_rate_hz,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const EXAMPLE: &str = include_str!("../../../configs/default.toml");

    #[test]
    fn committed_example_parses_to_defaults() {
        let cfg = SessionConfig::from_toml(EXAMPLE).unwrap();
        assert_eq!(cfg.duration_s, 140.0);
        assert_eq!(cfg.motion.kind, "flip");
        let spec = cfg.session_spec().unwrap();
        assert_eq!(spec.oscillators.len(), 18);
        assert!(spec.oscillators.iter().all(|o| o.freq_offset_ppm.abs() < 100.0));
        assert_eq!(SessionConfig::from_toml("").unwrap(), SessionConfig::default());
    }

    #[test]
    fn unknown_and_invalid_fields_are_named() {
        let e = SessionConfig::from_toml("seed = 1\nbogus = 2\n").unwrap_err().to_string();
        assert!(e.contains("bogus"), "{e}");
        let e = SessionConfig::from_toml("[noise]\norientation = 1.0\n").unwrap_err().to_string();
        assert!(e.contains("orientation"), "{e}");
        let e = SessionConfig::from_toml("duration_s = -1.0\n").unwrap_err();
        assert!(matches!(&e, ConfigError::Field { field, .. } if field == "duration_s"));
        let e = SessionConfig::from_toml("[motion]\nkind = \"flip\"\nf0_hz = 3.0\n").unwrap_err();
        assert!(matches!(&e, ConfigError::Field { field, .. } if field == "motion.f0_hz"));
        let e = SessionConfig::from_toml("[motion]\nkind = \"spin\"\n").unwrap_err();
        assert!(matches!(&e, ConfigError::Field { field, .. } if field == "motion.kind"));
        let e = SessionConfig::from_toml("[[oscillators.overrides]]\nsensor_id = 40\n").unwrap_err();
        assert!(matches!(&e, ConfigError::Field { field, .. } if field.ends_with("sensor_id")));
        let e = SessionConfig::from_toml("[motion]\nkind = \"burst\"\nonly = [\"nose\"]\n").unwrap_err();
        assert!(matches!(&e, ConfigError::Field { field, .. } if field == "motion"));
    }

    #[test]
    fn overrides_apply_to_named_sensor() {
        let cfg = SessionConfig::from_toml(
            "[oscillators]\noffset_range_ppm = 0.0\n[[oscillators.overrides]]\nsensor_id = 5\nfreq_offset_ppm = 42.0\n",
        )
        .unwrap();
        let o = cfg.oscillators();
        assert_eq!(o[5].freq_offset_ppm, 42.0);
        assert!(o.iter().enumerate().all(|(i, m)| i == 5 || m.freq_offset_ppm == 0.0));
    }

    #[test]
    fn motion_overrides() {
        let cfg = SessionConfig::from_toml("[motion]\nkind = \"burst\"\nexclude = [\"thumb\"]\nfreq_hz = 120.0\n").unwrap();
        match cfg.motion_params().unwrap() {
            MotionParams::Burst { segments, freq_hz, .. } => {
                assert_eq!(segments, SegmentSelection::Exclude(vec!["thumb".into()]));
                assert_eq!(freq_hz, 120.0);
            }
            other => panic!("{other:?}"),
        }
    }
}
