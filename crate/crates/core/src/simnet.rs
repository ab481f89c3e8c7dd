//! Simulated 18-node IMU network.
//!
//! Every node runs on its own drifting oscillator and samples a scripted
//! ground-truth hand motion whenever its local clock crosses a multiple of
//! the nominal sample period. A broadcast latch captures all local clocks at
//! a common master instant.
//!
//! Randomness: each sensor owns a ChaCha8 generator seeded with
//! `session_seed ^ sensor_id`; independent purposes use distinct streams of
//! that generator (see [`Stream`]).

use std::f64::consts::PI;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{exp_so3, rot_x, rot_z, RotationMatrix, UnitQuaternion, Vec3};
use crate::grid::UniformGrid;

pub const SENSOR_COUNT: usize = 18;
pub const NOMINAL_RATE_HZ: f64 = 800.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("topology: {0}")]
    Topology(String),
    #[error("invalid oscillator for sensor {sensor}: {reason}")]
    Oscillator { sensor: SensorId, reason: String },
    #[error("duration must be positive and finite, got {0}")]
    Duration(f64),
    #[error("anchor period must be positive and finite, got {0}")]
    AnchorPeriod(f64),
    #[error("unknown motion kind `{0}`")]
    UnknownMotion(String),
    #[error("unknown segment label `{0}`")]
    UnknownSegment(String),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SensorId(pub u16);

impl fmt::Display for SensorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Random substreams of a sensor's generator.
#[derive(Debug, Clone, Copy)]
#[repr(u64)]
pub enum Stream {
    ClockWalk = 0,
    LatchJitter = 1,
    SampleNoise = 2,
    CaptureNoise = 3,
    OscillatorDraw = 4,
    MountingDraw = 5,
}

pub fn sensor_rng(session_seed: u64, sensor: SensorId, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(session_seed ^ u64::from(sensor.0));
    rng.set_stream(stream as u64);
    rng
}

// ---------------------------------------------------------------------------
// Topology

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Digit {
    Thumb,
    Index,
    Middle,
    Ring,
    Pinky,
}

impl Digit {
    pub const ALL: [Digit; 5] = [Digit::Thumb, Digit::Index, Digit::Middle, Digit::Ring, Digit::Pinky];

    pub fn label(&self) -> &'static str {
        match self {
            Digit::Thumb => "thumb",
            Digit::Index => "index",
            Digit::Middle => "middle",
            Digit::Ring => "ring",
            Digit::Pinky => "pinky",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Bone {
    /// Metacarpal.
    MC,
    /// Proximal phalanx.
    PP,
    /// Middle phalanx.
    MP,
    /// Distal phalanx.
    DP,
}

impl Bone {
    pub fn label(&self) -> &'static str {
        match self {
            Bone::MC => "MC",
            Bone::PP => "PP",
            Bone::MP => "MP",
            Bone::DP => "DP",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Segment {
    WristHub,
    Forearm,
    Palm,
    Finger(Digit, Bone),
}

impl Segment {
    pub fn label(&self) -> String {
        match self {
            Segment::WristHub => "wrist-hub".to_string(),
            Segment::Forearm => "forearm".to_string(),
            Segment::Palm => "palm".to_string(),
            Segment::Finger(d, b) => format!("{}-{}", d.label(), b.label()),
        }
    }

    pub fn parse(label: &str) -> Option<Segment> {
        match label {
            "wrist-hub" => return Some(Segment::WristHub),
            "forearm" => return Some(Segment::Forearm),
            "palm" => return Some(Segment::Palm),
            _ => {}
        }
        let (d, b) = label.split_once('-')?;
        let digit = Digit::ALL.into_iter().find(|x| x.label() == d)?;
        let bone = [Bone::MC, Bone::PP, Bone::MP, Bone::DP].into_iter().find(|x| x.label() == b)?;
        Some(Segment::Finger(digit, bone))
    }

    pub fn digit(&self) -> Option<Digit> {
        match self {
            Segment::Finger(d, _) => Some(*d),
            _ => None,
        }
    }

    /// Label-prefix match: `"thumb"` selects every thumb bone, `"palm"` the palm.
    pub fn matches(&self, selector: &str) -> bool {
        let label = self.label();
        label == selector || label.strip_prefix(selector).is_some_and(|rest| rest.starts_with('-'))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensorNode {
    pub id: SensorId,
    pub segment: Segment,
    pub parent: Option<SensorId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensorTopology {
    sensors: Vec<SensorNode>,
}

impl SensorTopology {
    /// The 18-node glove: wrist hub (root), forearm, palm, three thumb bones
    /// and three phalanges on each of the four fingers.
    pub fn standard() -> Self {
        let mut sensors = Vec::with_capacity(SENSOR_COUNT);
        let mut push = |segment: Segment, parent: Option<u16>| {
            let id = SensorId(sensors.len() as u16);
            sensors.push(SensorNode { id, segment, parent: parent.map(SensorId) });
            id.0
        };
        let hub = push(Segment::WristHub, None);
        push(Segment::Forearm, Some(hub));
        let palm = push(Segment::Palm, Some(hub));
        let mc = push(Segment::Finger(Digit::Thumb, Bone::MC), Some(palm));
        let pp = push(Segment::Finger(Digit::Thumb, Bone::PP), Some(mc));
        push(Segment::Finger(Digit::Thumb, Bone::DP), Some(pp));
        for d in [Digit::Index, Digit::Middle, Digit::Ring, Digit::Pinky] {
            let pp = push(Segment::Finger(d, Bone::PP), Some(palm));
            let mp = push(Segment::Finger(d, Bone::MP), Some(pp));
            push(Segment::Finger(d, Bone::DP), Some(mp));
        }
        Self { sensors }
    }

    pub fn new(sensors: Vec<SensorNode>) -> Result<Self, SimError> {
        let t = Self { sensors };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let err = |m: String| Err(SimError::Topology(m));
        if self.sensors.is_empty() {
            return err("empty topology".into());
        }
        if self.sensors.len() != SENSOR_COUNT {
            return err(format!("expected {SENSOR_COUNT} sensors, found {}", self.sensors.len()));
        }
        let mut labels: Vec<String> = self.sensors.iter().map(|s| s.segment.label()).collect();
        labels.sort();
        labels.dedup();
        if labels.len() != self.sensors.len() {
            return err("segment labels are not unique".into());
        }
        let roots: Vec<_> = self.sensors.iter().filter(|s| s.parent.is_none()).collect();
        if roots.len() != 1 || roots[0].segment != Segment::WristHub {
            return err("tree must have exactly one root, the wrist hub".into());
        }
        for s in &self.sensors {
            let mut cur = s;
            for _ in 0..=self.sensors.len() {
                match cur.parent {
                    None => break,
                    Some(p) => match self.node(p) {
                        Some(n) => cur = n,
                        None => return err(format!("sensor {} has unknown parent {p}", s.id)),
                    },
                }
            }
            if cur.parent.is_some() {
                return err(format!("cycle through sensor {}", s.id));
            }
        }
        Ok(())
    }

    pub fn sensors(&self) -> &[SensorNode] {
        &self.sensors
    }

    pub fn len(&self) -> usize {
        self.sensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sensors.is_empty()
    }

    pub fn node(&self, id: SensorId) -> Option<&SensorNode> {
        self.sensors.iter().find(|s| s.id == id)
    }

    pub fn index_of(&self, id: SensorId) -> Option<usize> {
        self.sensors.iter().position(|s| s.id == id)
    }

    pub fn find_segment(&self, segment: Segment) -> Option<&SensorNode> {
        self.sensors.iter().find(|s| s.segment == segment)
    }

    pub fn ids(&self) -> Vec<SensorId> {
        self.sensors.iter().map(|s| s.id).collect()
    }
}

// ---------------------------------------------------------------------------
// Oscillators

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OscillatorModel {
    pub nominal_rate_hz: f64,
    pub freq_offset_ppm: f64,
    pub random_walk_ppm_per_sqrt_s: f64,
    pub latch_jitter_s: f64,
    pub initial_offset_s: f64,
}

impl Default for OscillatorModel {
    fn default() -> Self {
        Self::ideal(NOMINAL_RATE_HZ)
    }
}

impl OscillatorModel {
    pub fn ideal(rate_hz: f64) -> Self {
        Self {
            nominal_rate_hz: rate_hz,
            freq_offset_ppm: 0.0,
            random_walk_ppm_per_sqrt_s: 0.0,
            latch_jitter_s: 0.0,
            initial_offset_s: 0.0,
        }
    }

    pub fn validate(&self, sensor: SensorId) -> Result<(), SimError> {
        let bad = |reason: &str| Err(SimError::Oscillator { sensor, reason: reason.to_string() });
        let all = [
            self.nominal_rate_hz,
            self.freq_offset_ppm,
            self.random_walk_ppm_per_sqrt_s,
            self.latch_jitter_s,
            self.initial_offset_s,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return bad("non-finite parameter");
        }
        if self.nominal_rate_hz <= 0.0 {
            return bad("nominal_rate must be > 0");
        }
        if self.random_walk_ppm_per_sqrt_s < 0.0 {
            return bad("random_walk must be >= 0");
        }
        if self.latch_jitter_s < 0.0 {
            return bad("latch_jitter must be >= 0");
        }
        if self.freq_offset_ppm.abs() >= 1e5 {
            return bad("frequency offset must be well below 1e6 ppm");
        }
        Ok(())
    }
}

/// Spacing of the frequency random-walk knots.
const WALK_KNOT_S: f64 = 0.01;

/// A realized oscillator: deterministic offset plus one draw of the
/// frequency random walk. Between knots the frequency deviation is linear,
/// so the phase is piecewise quadratic and can be evaluated exactly.
#[derive(Debug, Clone)]
pub struct DriftingClock {
    model: OscillatorModel,
    scale: f64,
    /// Fractional frequency deviation at each knot.
    freq: Vec<f64>,
    /// Accumulated phase deviation (seconds) at each knot.
    phase: Vec<f64>,
}

impl DriftingClock {
    /// Realizes the random walk over `[0, horizon_s]`; beyond the horizon the
    /// last frequency is held.
    pub fn realize(model: OscillatorModel, horizon_s: f64, rng: &mut impl Rng) -> Self {
        let scale = 1.0 + model.freq_offset_ppm * 1e-6;
        let sigma = model.random_walk_ppm_per_sqrt_s * 1e-6;
        if sigma == 0.0 {
            return Self { model, scale, freq: vec![0.0], phase: vec![0.0] };
        }
        let n = (horizon_s.max(0.0) / WALK_KNOT_S).ceil() as usize + 2;
        let step = sigma * WALK_KNOT_S.sqrt();
        let mut freq = Vec::with_capacity(n);
        let mut phase = Vec::with_capacity(n);
        let (mut f, mut p) = (0.0f64, 0.0f64);
        freq.push(f);
        phase.push(p);
        for _ in 1..n {
            let z: f64 = StandardNormal.sample(rng);
            let next = f + step * z;
            p += 0.5 * WALK_KNOT_S * (f + next);
            f = next;
            freq.push(f);
            phase.push(p);
        }
        Self { model, scale, freq, phase }
    }

    pub fn ideal() -> Self {
        Self::realize(OscillatorModel::default(), 0.0, &mut ChaCha8Rng::seed_from_u64(0))
    }

    pub fn model(&self) -> &OscillatorModel {
        &self.model
    }

    fn walk(&self, t: f64) -> (f64, f64) {
        if self.freq.len() == 1 || t <= 0.0 {
            // Before t = 0 the walk has not started.
            return (0.0, 0.0);
        }
        let last = self.freq.len() - 1;
        let pos = t / WALK_KNOT_S;
        let k = (pos.floor() as usize).min(last);
        if k >= last {
            let tau = t - last as f64 * WALK_KNOT_S;
            return (self.phase[last] + self.freq[last] * tau, self.freq[last]);
        }
        let tau = t - k as f64 * WALK_KNOT_S;
        let slope = (self.freq[k + 1] - self.freq[k]) / WALK_KNOT_S;
        (self.phase[k] + self.freq[k] * tau + 0.5 * slope * tau * tau, self.freq[k] + slope * tau)
    }

    /// Local clock reading (seconds) at master time `t_master` (seconds).
    pub fn local_time(&self, t_master: f64) -> f64 {
        t_master * self.scale + self.model.initial_offset_s + self.walk(t_master).0
    }

    /// d(local)/d(master).
    pub fn rate(&self, t_master: f64) -> f64 {
        self.scale + self.walk(t_master).1
    }

    /// Master time at which the local clock reads `t_local`; Newton on the
    /// strictly increasing piecewise-quadratic phase.
    pub fn master_time(&self, t_local: f64, guess: f64) -> f64 {
        let mut t = guess;
        for _ in 0..50 {
            let err = self.local_time(t) - t_local;
            let dt = err / self.rate(t);
            t -= dt;
            if dt.abs() < 1e-15 * t.abs().max(1.0) {
                break;
            }
        }
        t
    }
}

/// Closed-form local clock reading (`t_master * (1 + ppm) + offset`) plus the
/// realized walk; this is [`DriftingClock::local_time`] under its op name.
pub fn local_clock(clock: &DriftingClock, t_master: f64) -> f64 {
    clock.local_time(t_master)
}

// ---------------------------------------------------------------------------
// Motion scripts

/// Scalar rotation-angle profile about a fixed axis.
#[derive(Debug, Clone, PartialEq)]
pub enum AngleProfile {
    Zero,
    /// Constant angular rate (rad/s).
    Ramp { rate: f64 },
    /// `amplitude * sin(2 pi f t + phase)`.
    Sine { amplitude: f64, freq_hz: f64, phase: f64 },
    /// Angular rate `a(t) * sin(phi(t))`, `phi` sweeping `f0 -> f1` linearly over
    /// `sweep_s`; angle `A (1 - cos phi)` with `A = rate_amplitude / (2 pi f0)`.
    Chirp { rate_amplitude: f64, f0_hz: f64, f1_hz: f64, sweep_s: f64 },
    /// Hann-enveloped carrier bursts in angular rate.
    Bursts(Vec<Burst>),
    Sum(Vec<AngleProfile>),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Burst {
    pub start_s: f64,
    pub duration_s: f64,
    pub freq_hz: f64,
    pub rate_amplitude: f64,
}

impl Burst {
    /// `(1 - cos(2 pi g tau)) / (2 pi g)`, the integral of `sin(2 pi g s)` over `[0, tau]`.
    fn int_sin(g: f64, tau: f64) -> f64 {
        if g.abs() < 1e-12 {
            0.0
        } else {
            (1.0 - (2.0 * PI * g * tau).cos()) / (2.0 * PI * g)
        }
    }

    fn angle_rate(&self, t: f64) -> (f64, f64) {
        let tau = (t - self.start_s).clamp(0.0, self.duration_s);
        let d = 1.0 / self.duration_s;
        let f = self.freq_hz;
        // rate = a sin^2(pi tau / D) sin(2 pi f tau)
        //      = a [ sin(2 pi f tau)/2 - sin(2 pi (f+d) tau)/4 - sin(2 pi (f-d) tau)/4 ]
        let angle = self.rate_amplitude
            * (0.5 * Self::int_sin(f, tau) - 0.25 * Self::int_sin(f + d, tau) - 0.25 * Self::int_sin(f - d, tau));
        let rate = if t < self.start_s || t > self.start_s + self.duration_s {
            0.0
        } else {
            let env = (PI * tau * d).sin();
            self.rate_amplitude * env * env * (2.0 * PI * f * tau).sin()
        };
        (angle, rate)
    }
}

impl AngleProfile {
    /// `(angle rad, angular rate rad/s)` at time `t`.
    pub fn eval(&self, t: f64) -> (f64, f64) {
        match self {
            AngleProfile::Zero => (0.0, 0.0),
            AngleProfile::Ramp { rate } => (rate * t, *rate),
            AngleProfile::Sine { amplitude, freq_hz, phase } => {
                let w = 2.0 * PI * freq_hz;
                let (s, c) = (w * t + phase).sin_cos();
                (amplitude * s, amplitude * w * c)
            }
            AngleProfile::Chirp { rate_amplitude, f0_hz, f1_hz, sweep_s } => {
                let k = (f1_hz - f0_hz) / sweep_s;
                let phi = 2.0 * PI * (f0_hz * t + 0.5 * k * t * t);
                let dphi = 2.0 * PI * (f0_hz + k * t);
                let amp = rate_amplitude / (2.0 * PI * f0_hz);
                let (s, c) = phi.sin_cos();
                (amp * (1.0 - c), amp * dphi * s)
            }
            AngleProfile::Bursts(bursts) => bursts.iter().fold((0.0, 0.0), |(a, r), b| {
                let (da, dr) = b.angle_rate(t);
                (a + da, r + dr)
            }),
            AngleProfile::Sum(parts) => parts.iter().fold((0.0, 0.0), |(a, r), p| {
                let (da, dr) = p.eval(t);
                (a + da, r + dr)
            }),
        }
    }

    pub fn is_zero(&self) -> bool {
        match self {
            AngleProfile::Zero => true,
            AngleProfile::Bursts(b) => b.is_empty(),
            AngleProfile::Sum(p) => p.iter().all(|x| x.is_zero()),
            _ => false,
        }
    }
}

/// Per-segment motion: `R^W_H(t) = base * exp(axis * angle(t))`, so the body
/// angular velocity is `axis * rate(t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentMotion {
    pub base: RotationMatrix,
    pub axis: Vec3,
    pub profile: AngleProfile,
}

impl SegmentMotion {
    pub fn still() -> Self {
        Self { base: RotationMatrix::identity(), axis: Vec3::x(), profile: AngleProfile::Zero }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MotionScript {
    pub duration_s: f64,
    /// Indexed like the topology's sensor list.
    pub segments: Vec<SegmentMotion>,
}

impl MotionScript {
    /// Segment orientation `R^W_H(t)` and body angular velocity (rad/s).
    pub fn ground_truth(&self, t: f64, segment_index: usize) -> (RotationMatrix, Vec3) {
        let (q, w) = self.ground_truth_quat(t, segment_index);
        (q.to_matrix(), w)
    }

    pub fn ground_truth_quat(&self, t: f64, segment_index: usize) -> (UnitQuaternion, Vec3) {
        let seg = &self.segments[segment_index];
        let (angle, rate) = seg.profile.eval(t);
        let q = seg.base.to_quat() * UnitQuaternion::exp(&(seg.axis * angle));
        (q, seg.axis * rate)
    }

    /// Upper bound on |omega| over the script, sampled at 10 kHz.
    pub fn max_rate(&self) -> f64 {
        let n = (self.duration_s * 10_000.0).ceil() as usize;
        let mut best = 0.0f64;
        for seg in &self.segments {
            if seg.profile.is_zero() {
                continue;
            }
            for i in 0..=n {
                best = best.max(seg.profile.eval(i as f64 * 1e-4).1.abs());
            }
        }
        best
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentSelection {
    All,
    Only(Vec<String>),
    Exclude(Vec<String>),
}

impl SegmentSelection {
    pub fn selects(&self, seg: Segment) -> bool {
        match self {
            SegmentSelection::All => true,
            SegmentSelection::Only(sel) => sel.iter().any(|s| seg.matches(s)),
            SegmentSelection::Exclude(sel) => !sel.iter().any(|s| seg.matches(s)),
        }
    }

    fn check(&self) -> Result<(), SimError> {
        let labels = match self {
            SegmentSelection::All => return Ok(()),
            SegmentSelection::Only(l) | SegmentSelection::Exclude(l) => l,
        };
        let topo = SensorTopology::standard();
        for l in labels {
            if !topo.sensors().iter().any(|s| s.segment.matches(l)) {
                return Err(SimError::UnknownSegment(l.clone()));
            }
        }
        Ok(())
    }
}

/// Parameters for the named motion generators.
#[derive(Debug, Clone, PartialEq)]
pub enum MotionParams {
    Static,
    /// Sinusoidal pitch (about world x) of the whole hand.
    Flip { freq_hz: f64, amplitude_rad: f64 },
    Chirp { f0_hz: f64, f1_hz: f64, rate_amplitude: f64, segments: SegmentSelection },
    /// Periodic Hann-enveloped bursts on the selected segments.
    Burst {
        segments: SegmentSelection,
        first_s: f64,
        period_s: f64,
        burst_s: f64,
        freq_hz: f64,
        rate_amplitude: f64,
    },
}

impl MotionParams {
    pub fn kind(&self) -> &'static str {
        match self {
            MotionParams::Static => "static",
            MotionParams::Flip { .. } => "flip",
            MotionParams::Chirp { .. } => "chirp",
            MotionParams::Burst { .. } => "burst",
        }
    }

    /// Defaults for a kind name.
    pub fn default_for(kind: &str) -> Result<Self, SimError> {
        Ok(match kind {
            "static" => MotionParams::Static,
            "flip" => MotionParams::Flip { freq_hz: 1.0, amplitude_rad: 1.2 },
            "chirp" => MotionParams::Chirp {
                f0_hz: 20.0,
                f1_hz: 300.0,
                rate_amplitude: 2.0,
                segments: SegmentSelection::Only(vec!["index-MP".into()]),
            },
            "burst" => MotionParams::Burst {
                segments: SegmentSelection::Exclude(vec!["thumb".into(), "forearm".into()]),
                first_s: 0.5,
                period_s: 1.0,
                burst_s: 0.08,
                freq_hz: 150.0,
                rate_amplitude: 5.0,
            },
            other => return Err(SimError::UnknownMotion(other.to_string())),
        })
    }
}

/// Builds an analytic motion script for the standard topology.
pub fn gen_motion(kind: &str, params: &MotionParams, duration_s: f64) -> Result<MotionScript, SimError> {
    if kind != params.kind() {
        return Err(SimError::UnknownMotion(kind.to_string()));
    }
    if !(duration_s > 0.0 && duration_s.is_finite()) {
        return Err(SimError::Duration(duration_s));
    }
    let topo = SensorTopology::standard();
    let mut segments = vec![SegmentMotion::still(); topo.len()];
    match params {
        MotionParams::Static => {}
        MotionParams::Flip { freq_hz, amplitude_rad } => {
            if !(*freq_hz > 0.0) || !amplitude_rad.is_finite() {
                return Err(SimError::Invalid("flip needs freq_hz > 0 and finite amplitude".into()));
            }
            for s in segments.iter_mut() {
                s.profile = AngleProfile::Sine { amplitude: *amplitude_rad, freq_hz: *freq_hz, phase: 0.0 };
            }
        }
        MotionParams::Chirp { f0_hz, f1_hz, rate_amplitude, segments: sel } => {
            if !(*f0_hz > 0.0 && *f1_hz > 0.0) {
                return Err(SimError::Invalid("chirp frequencies must be positive".into()));
            }
            sel.check()?;
            for (node, s) in topo.sensors().iter().zip(segments.iter_mut()) {
                if sel.selects(node.segment) {
                    s.profile = AngleProfile::Chirp {
                        rate_amplitude: *rate_amplitude,
                        f0_hz: *f0_hz,
                        f1_hz: *f1_hz,
                        sweep_s: duration_s,
                    };
                }
            }
        }
        MotionParams::Burst { segments: sel, first_s, period_s, burst_s, freq_hz, rate_amplitude } => {
            if !(*period_s > 0.0 && *burst_s > 0.0 && *freq_hz > 0.0 && *first_s >= 0.0) {
                return Err(SimError::Invalid("burst timing parameters must be positive".into()));
            }
            sel.check()?;
            let mut bursts = Vec::new();
            let mut t0 = *first_s;
            while t0 + burst_s <= duration_s {
                bursts.push(Burst { start_s: t0, duration_s: *burst_s, freq_hz: *freq_hz, rate_amplitude: *rate_amplitude });
                t0 += period_s;
            }
            for (node, s) in topo.sensors().iter().zip(segments.iter_mut()) {
                if sel.selects(node.segment) {
                    s.profile = AngleProfile::Bursts(bursts.clone());
                }
            }
        }
    }
    Ok(MotionScript { duration_s, segments })
}

// ---------------------------------------------------------------------------
// Sensors and records

/// Sensor installation: its private world heading and its bone mount.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensorMounting {
    /// `R^W_IW = rot_z(heading)`.
    pub heading_rad: f64,
    /// `R^I_H`.
    pub mount: RotationMatrix,
}

impl SensorMounting {
    pub fn aligned() -> Self {
        Self { heading_rad: 0.0, mount: RotationMatrix::identity() }
    }

    /// Uniform heading in `[-pi, pi)` and a uniformly random mount.
    pub fn random(rng: &mut impl Rng) -> Self {
        Self { heading_rad: rng.random_range(-PI..PI), mount: random_rotation(rng) }
    }

    /// `R^IW_I` reported by the sensor when its segment is at `r_w_h`.
    pub fn sensor_orientation(&self, r_w_h: &RotationMatrix) -> RotationMatrix {
        rot_z(self.heading_rad).transpose() * *r_w_h * self.mount.transpose()
    }

    pub fn sensor_orientation_quat(&self, q_w_h: &UnitQuaternion) -> UnitQuaternion {
        let heading = UnitQuaternion::exp(&(Vec3::z() * -self.heading_rad));
        heading * *q_w_h * self.mount.to_quat().conjugate()
    }

    /// Body-frame gyro reading for segment body rate `omega_h`.
    pub fn sensor_rate(&self, omega_h: &Vec3) -> Vec3 {
        self.mount.apply(omega_h)
    }
}

/// Uniform rotation (normalized Gaussian quaternion).
pub fn random_rotation(rng: &mut impl Rng) -> RotationMatrix {
    loop {
        let c: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(rng));
        if let Ok(q) = UnitQuaternion::new(c[0], c[1], c[2], c[3]) {
            return q.to_matrix();
        }
    }
}

/// Right-multiplied Gaussian rotation perturbation with per-axis std `sigma_rad`.
pub fn perturb(q: &UnitQuaternion, sigma_rad: f64, rng: &mut impl Rng) -> UnitQuaternion {
    if sigma_rad == 0.0 {
        return *q;
    }
    let n: [f64; 3] = std::array::from_fn(|_| StandardNormal.sample(rng));
    *q * UnitQuaternion::exp(&(Vec3::new(n[0], n[1], n[2]) * sigma_rad))
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SensorNoise {
    /// Per-axis std of the orientation perturbation, radians.
    pub orientation_rad: f64,
    /// Per-axis gyro white noise std, rad/s.
    pub gyro_rad_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensorSample {
    pub sensor_id: SensorId,
    pub seq: u64,
    pub t_local_us: i64,
    /// `R^IW_I`.
    pub orientation: UnitQuaternion,
    /// Body-frame angular velocity, rad/s.
    pub gyro: Vec3,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorRecord {
    pub anchor_id: u64,
    pub t_master_us: i64,
    /// Latched local clocks, one per sensor, ordered by sensor id.
    pub latched: Vec<(SensorId, i64)>,
}

impl AnchorRecord {
    pub fn latched_for(&self, id: SensorId) -> Option<i64> {
        self.latched.iter().find(|(s, _)| *s == id).map(|(_, t)| *t)
    }
}

/// One row of the ground-truth log: a segment's true state at a master tick.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruthEntry {
    /// The sensor's true local clock reading at this tick, microseconds.
    pub t_local_us: f64,
    /// `R^W_H`.
    pub orientation: UnitQuaternion,
    /// Segment body angular velocity.
    pub omega: Vec3,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthLog {
    pub grid: UniformGrid,
    pub sensor_ids: Vec<SensorId>,
    /// `entries[sensor_index][tick]`.
    pub entries: Vec<Vec<TruthEntry>>,
}

/// Simultaneous broadcast latch of every node's local clock at `t_master_s`.
pub fn broadcast_latch(
    anchor_id: u64,
    t_master_us: i64,
    nodes: &[(SensorId, &DriftingClock)],
    jitter_rngs: &mut [ChaCha8Rng],
) -> AnchorRecord {
    let t = t_master_us as f64 * 1e-6;
    let latched = nodes
        .iter()
        .zip(jitter_rngs.iter_mut())
        .map(|((id, clock), rng)| {
            let sigma = clock.model().latch_jitter_s;
            let jitter = if sigma > 0.0 { sigma * Distribution::<f64>::sample(&StandardNormal, rng) } else { 0.0 };
            (*id, ((clock.local_time(t) + jitter) * 1e6).round() as i64)
        })
        .collect();
    AnchorRecord { anchor_id, t_master_us, latched }
}

// ---------------------------------------------------------------------------
// Session

#[derive(Debug, Clone)]
pub struct SessionSpec {
    pub topology: SensorTopology,
    pub oscillators: Vec<OscillatorModel>,
    pub mountings: Vec<SensorMounting>,
    pub motion: MotionScript,
    pub noise: SensorNoise,
    pub duration_s: f64,
    pub anchor_period_s: f64,
    pub seed: u64,
    /// Rate of the ground-truth master grid.
    pub truth_rate_hz: f64,
}

#[derive(Debug, Clone)]
pub struct SimulatedSession {
    /// Per sensor, topology order.
    pub samples: Vec<Vec<SensorSample>>,
    pub anchors: Vec<AnchorRecord>,
    pub truth: GroundTruthLog,
    pub clocks: Vec<DriftingClock>,
}

/// Draws oscillator parameters: offset `U(-range, range)` ppm with the given
/// walk and jitter, from each sensor's own stream.
pub fn draw_oscillators(
    topology: &SensorTopology,
    seed: u64,
    offset_range_ppm: f64,
    template: OscillatorModel,
) -> Vec<OscillatorModel> {
    topology
        .sensors()
        .iter()
        .map(|s| {
            let mut rng = sensor_rng(seed, s.id, Stream::OscillatorDraw);
            let offset = if offset_range_ppm > 0.0 { rng.random_range(-offset_range_ppm..offset_range_ppm) } else { 0.0 };
            OscillatorModel { freq_offset_ppm: offset, ..template }
        })
        .collect()
}

pub fn draw_mountings(topology: &SensorTopology, seed: u64) -> Vec<SensorMounting> {
    topology
        .sensors()
        .iter()
        .map(|s| SensorMounting::random(&mut sensor_rng(seed, s.id, Stream::MountingDraw)))
        .collect()
}

fn validate_spec(spec: &SessionSpec) -> Result<(), SimError> {
    if spec.topology.is_empty() {
        return Err(SimError::Topology("empty topology".into()));
    }
    spec.topology.validate()?;
    if !(spec.duration_s > 0.0 && spec.duration_s.is_finite()) {
        return Err(SimError::Duration(spec.duration_s));
    }
    if !(spec.anchor_period_s > 0.0 && spec.anchor_period_s.is_finite()) {
        return Err(SimError::AnchorPeriod(spec.anchor_period_s));
    }
    let n = spec.topology.len();
    if spec.oscillators.len() != n || spec.mountings.len() != n || spec.motion.segments.len() != n {
        return Err(SimError::Invalid("oscillators, mountings and motion must cover every sensor".into()));
    }
    for (s, o) in spec.topology.sensors().iter().zip(&spec.oscillators) {
        o.validate(s.id)?;
    }
    if !(spec.truth_rate_hz > 0.0) {
        return Err(SimError::Invalid("truth rate must be positive".into()));
    }
    Ok(())
}

/// Generates the sample stream of one sensor: sample `k` fires when the local
/// clock reads `round(k * 1e6 / rate)` microseconds.
fn sensor_stream(
    id: SensorId,
    index: usize,
    clock: &DriftingClock,
    spec: &SessionSpec,
) -> Vec<SensorSample> {
    let model = clock.model();
    let rate = model.nominal_rate_hz;
    let mounting = &spec.mountings[index];
    let mut rng = sensor_rng(spec.seed, id, Stream::SampleNoise);
    let local0 = clock.local_time(0.0);
    let mut k = (local0 * rate - 1e-9).ceil().max(0.0) as u64;
    let expected = (spec.duration_s * rate * 1.001) as usize + 2;
    let mut out = Vec::with_capacity(expected);
    let mut guess = 0.0;
    loop {
        let t_local_us = (k as f64 * 1e6 / rate).round() as i64;
        let t_master = clock.master_time(t_local_us as f64 * 1e-6, guess);
        if t_master > spec.duration_s {
            break;
        }
        guess = t_master + 1.0 / rate;
        if t_master >= 0.0 {
            let (q_wh, omega_h) = spec.motion.ground_truth_quat(t_master, index);
            let q = perturb(&mounting.sensor_orientation_quat(&q_wh), spec.noise.orientation_rad, &mut rng);
            let mut gyro = mounting.sensor_rate(&omega_h);
            if spec.noise.gyro_rad_s > 0.0 {
                let n: [f64; 3] = std::array::from_fn(|_| StandardNormal.sample(&mut rng));
                gyro += Vec3::new(n[0], n[1], n[2]) * spec.noise.gyro_rad_s;
            }
            out.push(SensorSample { sensor_id: id, seq: k, t_local_us, orientation: q, gyro });
        }
        k += 1;
    }
    out
}

pub fn simulate_session(spec: &SessionSpec) -> Result<SimulatedSession, SimError> {
    validate_spec(spec)?;
    let sensors = spec.topology.sensors();
    let horizon = spec.duration_s + 1.0;
    let clocks: Vec<DriftingClock> = sensors
        .iter()
        .zip(&spec.oscillators)
        .map(|(s, o)| DriftingClock::realize(*o, horizon, &mut sensor_rng(spec.seed, s.id, Stream::ClockWalk)))
        .collect();

    let samples = sensors
        .iter()
        .enumerate()
        .map(|(i, s)| sensor_stream(s.id, i, &clocks[i], spec))
        .collect();

    let mut jitter_rngs: Vec<ChaCha8Rng> =
        sensors.iter().map(|s| sensor_rng(spec.seed, s.id, Stream::LatchJitter)).collect();
    let nodes: Vec<(SensorId, &DriftingClock)> = sensors.iter().map(|s| s.id).zip(clocks.iter()).collect();
    let period_us = (spec.anchor_period_s * 1e6).round() as i64;
    let duration_us = (spec.duration_s * 1e6).round() as i64;
    let mut anchors = Vec::new();
    let mut a = 0i64;
    while a * period_us <= duration_us {
        anchors.push(broadcast_latch(a as u64, a * period_us, &nodes, &mut jitter_rngs));
        a += 1;
    }

    let grid = UniformGrid::covering(spec.duration_s, spec.truth_rate_hz);
    let entries = (0..sensors.len())
        .map(|i| {
            (0..grid.count)
                .map(|k| {
                    let t = grid.tick_s(k);
                    let (orientation, omega) = spec.motion.ground_truth_quat(t, i);
                    TruthEntry { t_local_us: clocks[i].local_time(t) * 1e6, orientation, omega }
                })
                .collect()
        })
        .collect();
    let truth = GroundTruthLog { grid, sensor_ids: spec.topology.ids(), entries };
    Ok(SimulatedSession { samples, anchors, truth, clocks })
}

// ---------------------------------------------------------------------------
// Calibration captures

/// The two-pose calibration routine: hold the zero pose, then rotate about
/// world x from `start_pitch` by `alpha`; each pose is held for `window_s`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CaptureProtocol {
    pub alpha_rad: f64,
    pub start_pitch_rad: f64,
    pub window_s: f64,
}

impl Default for CaptureProtocol {
    fn default() -> Self {
        Self { alpha_rad: PI / 2.0, start_pitch_rad: 0.0, window_s: 0.25 }
    }
}

/// Static holds recorded by every sensor: zero pose, rotation start, rotation end.
#[derive(Debug, Clone)]
pub struct CaptureRecording {
    pub zero: Vec<Vec<SensorSample>>,
    pub start: Vec<Vec<SensorSample>>,
    pub end: Vec<Vec<SensorSample>>,
}

pub fn simulate_captures(
    topology: &SensorTopology,
    mountings: &[SensorMounting],
    noise: &SensorNoise,
    protocol: &CaptureProtocol,
    rate_hz: f64,
    seed: u64,
) -> CaptureRecording {
    let n = ((protocol.window_s * rate_hz).round() as usize).max(1);
    let poses = [
        RotationMatrix::identity(),
        rot_x(protocol.start_pitch_rad),
        rot_x(protocol.start_pitch_rad + protocol.alpha_rad),
    ];
    let mut per_pose: Vec<Vec<Vec<SensorSample>>> = vec![Vec::new(), Vec::new(), Vec::new()];
    for (s, m) in topology.sensors().iter().zip(mountings) {
        let mut rng = sensor_rng(seed, s.id, Stream::CaptureNoise);
        for (p, pose) in poses.iter().enumerate() {
            let q = m.sensor_orientation(pose).to_quat();
            let t0 = (p as f64 * 10.0 * 1e6) as i64;
            let rows = (0..n)
                .map(|k| SensorSample {
                    sensor_id: s.id,
                    seq: k as u64,
                    t_local_us: t0 + (k as f64 * 1e6 / rate_hz).round() as i64,
                    orientation: perturb(&q, noise.orientation_rad, &mut rng),
                    gyro: Vec3::zeros(),
                })
                .collect();
            per_pose[p].push(rows);
        }
    }
    let end = per_pose.pop().unwrap_or_default();
    let start = per_pose.pop().unwrap_or_default();
    let zero = per_pose.pop().unwrap_or_default();
    CaptureRecording { zero, start, end }
}

/// Convenience: exp of a rotation vector, re-exported for script authors.
pub fn rotation_from_vector(v: &Vec3) -> RotationMatrix {
    exp_so3(v)
}
