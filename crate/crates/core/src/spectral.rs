//! Angular-speed extraction, Hann-windowed STFT and high-band energy profiles.

use std::f64::consts::PI;
use std::sync::{Arc, OnceLock};

use nalgebra::{DMatrix, DVector};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use thiserror::Error;

use crate::geom::{UnitQuaternion, Vec3};
use crate::grid::UniformGrid;
use crate::simnet::SensorTopology;
use crate::spatialcal::HandFrameSeries;
use crate::timesync::AlignedSeries;

pub const DEFAULT_WINDOW: usize = 256;
pub const DEFAULT_HOP: usize = 16;
pub const DEFAULT_F_MIN_HZ: f64 = 100.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpectralError {
    #[error("signal of {len} samples is shorter than one window of {window}")]
    TooShort { len: usize, window: usize },
    #[error("window length and hop must be positive")]
    BadFrame,
    #[error("sample rate must be positive and finite")]
    BadRate,
    #[error("orientation input has no gyro channels")]
    NoGyro,
}

// ---------------------------------------------------------------------------
// Angular speed

#[derive(Debug, Clone, PartialEq)]
pub struct AngularSpeedSeries {
    pub grid: UniformGrid,
    pub labels: Vec<String>,
    /// `values[segment][tick]`, 0 where invalid.
    pub values: Vec<Vec<f64>>,
    pub valid: Vec<Vec<bool>>,
}

pub enum SpeedInput<'a> {
    /// Magnitude of the resampled gyro channels.
    Gyro(&'a AlignedSeries),
    /// Differentiated resampled sensor orientations.
    SensorOrientation(&'a AlignedSeries),
    /// Differentiated reconstructed segment orientations.
    Frames(&'a HandFrameSeries),
}

const DIFF_HALF_TAPS: usize = 16;

/// Half-stencil `c[0..m]` of a symmetric differentiator acting on unit-spaced
/// rotation increments centred at `k +- (j + 1/2)`. The least-squares target
/// is `H(u) sinc(u) = 1` on `u in [0, 1/4]` cycles/sample (the increment is a
/// box average) and 0 on `[3/8, 1/2]`, with DC gain exactly 1.
fn design_differentiator(m: usize) -> Vec<f64> {
    if m == 1 {
        return vec![0.5];
    }
    let sinc = |u: f64| if u == 0.0 { 1.0 } else { (PI * u).sin() / (PI * u) };
    let (n_pass, n_stop) = (200usize, 100usize);
    let mut rows: Vec<(f64, f64, f64)> = Vec::with_capacity(n_pass + n_stop);
    for i in 0..n_pass {
        rows.push((0.25 * i as f64 / (n_pass - 1) as f64, 1.0, 1.0));
    }
    for i in 0..n_stop {
        rows.push((0.375 + 0.125 * i as f64 / (n_stop - 1) as f64, 0.0, 0.05));
    }
    let a = DMatrix::from_fn(rows.len(), m, |r, j| {
        let (u, _, w) = rows[r];
        w * 2.0 * (2.0 * PI * u * (j as f64 + 0.5)).cos() * sinc(u)
    });
    let b = DVector::from_fn(rows.len(), |r, _| rows[r].1 * rows[r].2);
    let c = a.svd(true, true).solve(&b, 1e-12).unwrap_or_else(|_| DVector::from_element(m, 0.5 / m as f64));
    let dc: f64 = 2.0 * c.iter().sum::<f64>();
    c.iter().map(|v| v / dc).collect()
}

fn differentiators() -> &'static [Vec<f64>] {
    static TABLE: OnceLock<Vec<Vec<f64>>> = OnceLock::new();
    TABLE.get_or_init(|| (1..=DIFF_HALF_TAPS).map(design_differentiator).collect())
}

/// Body angular velocity from uniformly sampled orientations.
pub fn differentiate_orientations(q: &[UnitQuaternion], rate_hz: f64) -> Vec<Vec3> {
    let n = q.len();
    if n < 2 {
        return vec![Vec3::zeros(); n];
    }
    let inc: Vec<Vec3> = q.windows(2).map(|w| (w[0].conjugate() * w[1]).log()).collect();
    let table = differentiators();
    (0..n)
        .map(|k| {
            let m = DIFF_HALF_TAPS.min(k).min(n - 1 - k);
            if m == 0 {
                return inc[if k == 0 { 0 } else { n - 2 }] * rate_hz;
            }
            let c = &table[m - 1];
            let mut acc = Vec3::zeros();
            for (j, cj) in c.iter().enumerate() {
                acc += (inc[k + j] + inc[k - 1 - j]) * *cj;
            }
            acc * rate_hz
        })
        .collect()
}

fn contiguous_runs(valid: &[bool]) -> Vec<(usize, usize)> {
    let mut runs = Vec::new();
    let mut start = None;
    for (k, v) in valid.iter().chain(std::iter::once(&false)).enumerate() {
        match (start, *v) {
            (None, true) => start = Some(k),
            (Some(s), false) => {
                runs.push((s, k));
                start = None;
            }
            _ => {}
        }
    }
    runs
}

fn speed_from_orientations(q: &[UnitQuaternion], valid: &[bool], rate: f64) -> Vec<f64> {
    let mut out = vec![0.0; q.len()];
    for (s, e) in contiguous_runs(valid) {
        if e - s < 2 {
            continue;
        }
        for (k, w) in differentiate_orientations(&q[s..e], rate).iter().enumerate() {
            out[s + k] = w.norm();
        }
    }
    out
}

pub fn angular_speed(input: SpeedInput<'_>, topology: &SensorTopology) -> AngularSpeedSeries {
    let label = |id| topology.node(id).map(|n| n.segment.label()).unwrap_or_else(|| format!("sensor-{id}"));
    match input {
        SpeedInput::Gyro(a) => AngularSpeedSeries {
            grid: a.grid,
            labels: a.sensor_ids.iter().map(|id| label(*id)).collect(),
            values: a
                .gyro
                .iter()
                .zip(&a.valid)
                .map(|(g, v)| g.iter().zip(v).map(|(g, v)| if *v { g.norm() } else { 0.0 }).collect())
                .collect(),
            valid: a.valid.clone(),
        },
        SpeedInput::SensorOrientation(a) => AngularSpeedSeries {
            grid: a.grid,
            labels: a.sensor_ids.iter().map(|id| label(*id)).collect(),
            values: a
                .orientations
                .iter()
                .zip(&a.valid)
                .map(|(q, v)| speed_from_orientations(q, v, a.grid.rate_hz))
                .collect(),
            valid: mask_single_ticks(&a.valid),
        },
        SpeedInput::Frames(h) => AngularSpeedSeries {
            grid: h.grid,
            labels: h.segments.iter().map(|s| s.label()).collect(),
            values: h
                .orientations
                .iter()
                .zip(&h.valid)
                .map(|(q, v)| speed_from_orientations(q, v, h.grid.rate_hz))
                .collect(),
            valid: mask_single_ticks(&h.valid),
        },
    }
}

/// Isolated valid ticks carry no derivative information.
fn mask_single_ticks(valid: &[Vec<bool>]) -> Vec<Vec<bool>> {
    valid
        .iter()
        .map(|v| {
            let mut out = v.clone();
            for (s, e) in contiguous_runs(v) {
                if e - s < 2 {
                    out[s] = false;
                }
            }
            out
        })
        .collect()
}

// ---------------------------------------------------------------------------
// STFT

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).collect()
}

/// Reusable one-sided power spectrum of Hann-windowed frames.
pub struct FramePower {
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    buf: Vec<Complex<f64>>,
    scratch: Vec<Complex<f64>>,
}

impl FramePower {
    pub fn new(window_length: usize) -> Self {
        let fft = FftPlanner::new().plan_fft_forward(window_length);
        let scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];
        Self { fft, window: hann(window_length), buf: vec![Complex::new(0.0, 0.0); window_length], scratch }
    }

    pub fn bins(&self) -> usize {
        self.window.len() / 2 + 1
    }

    /// `P_k = c_k |X_k|^2 / N` with `c_k = 1` at DC and Nyquist, 2 elsewhere,
    /// so that the bins sum to the windowed frame energy.
    pub fn compute(&mut self, frame: &[f64], out: &mut [f64]) {
        let n = self.window.len();
        for ((b, x), w) in self.buf.iter_mut().zip(frame).zip(&self.window) {
            *b = Complex::new(x * w, 0.0);
        }
        self.fft.process_with_scratch(&mut self.buf, &mut self.scratch);
        let nyq = if n % 2 == 0 { Some(n / 2) } else { None };
        for (k, o) in out.iter_mut().enumerate().take(n / 2 + 1) {
            let p = self.buf[k].norm_sqr() / n as f64;
            *o = if k == 0 || Some(k) == nyq { p } else { 2.0 * p };
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub rate_hz: f64,
    pub window_length: usize,
    pub hop: usize,
    /// Window-centre times, seconds from the first sample.
    pub frame_times: Vec<f64>,
    pub freqs: Vec<f64>,
    /// `power[frame][bin]`.
    pub power: Vec<Vec<f64>>,
}

fn check_frame(len: usize, rate_hz: f64, window: usize, hop: usize) -> Result<usize, SpectralError> {
    if window == 0 || hop == 0 {
        return Err(SpectralError::BadFrame);
    }
    if !(rate_hz > 0.0 && rate_hz.is_finite()) {
        return Err(SpectralError::BadRate);
    }
    if len < window {
        return Err(SpectralError::TooShort { len, window });
    }
    Ok((len - window) / hop + 1)
}

pub fn frame_time(offset: usize, window: usize, rate_hz: f64) -> f64 {
    (offset as f64 + (window as f64 - 1.0) / 2.0) / rate_hz
}

pub fn stft(signal: &[f64], rate_hz: f64, window: usize, hop: usize) -> Result<Spectrogram, SpectralError> {
    let frames = check_frame(signal.len(), rate_hz, window, hop)?;
    let mut fp = FramePower::new(window);
    let bins = fp.bins();
    let mut power = Vec::with_capacity(frames);
    let mut frame_times = Vec::with_capacity(frames);
    for f in 0..frames {
        let off = f * hop;
        let mut row = vec![0.0; bins];
        fp.compute(&signal[off..off + window], &mut row);
        power.push(row);
        frame_times.push(frame_time(off, window, rate_hz));
    }
    let freqs = (0..bins).map(|k| k as f64 * rate_hz / window as f64).collect();
    Ok(Spectrogram { rate_hz, window_length: window, hop, frame_times, freqs, power })
}

/// Linear sum of power over bins with centre frequency strictly above `f_min`.
pub fn band_energy(spec: &Spectrogram, f_min: f64) -> Vec<f64> {
    spec.power
        .iter()
        .map(|row| row.iter().zip(&spec.freqs).filter(|(_, f)| **f > f_min).fold(0.0, |a, (p, _)| a + p))
        .collect()
}

/// Sum over the complementary bins (`f <= f_min`).
pub fn band_complement(spec: &Spectrogram, f_min: f64) -> Vec<f64> {
    spec.power
        .iter()
        .map(|row| row.iter().zip(&spec.freqs).filter(|(_, f)| **f <= f_min).fold(0.0, |a, (p, _)| a + p))
        .collect()
}

pub fn total_power(spec: &Spectrogram) -> Vec<f64> {
    spec.power.iter().map(|row| row.iter().sum()).collect()
}

// ---------------------------------------------------------------------------
// Landscape

#[derive(Debug, Clone, PartialEq)]
pub struct BandEnergyProfile {
    pub f_min: f64,
    /// Seconds on the master timeline.
    pub frame_times: Vec<f64>,
    pub labels: Vec<String>,
    /// `energy[segment][frame]`; empty for segments without data.
    pub energy: Vec<Vec<f64>>,
}

impl BandEnergyProfile {
    pub fn row(&self, label: &str) -> Option<&[f64]> {
        self.labels.iter().position(|l| l == label).map(|i| self.energy[i].as_slice())
    }
}

/// Band energy per segment on a common frame timeline. The analysed span is
/// the range between the first and last tick valid for every segment that
/// has data; isolated invalid ticks inside it count as zero speed.
pub fn energy_landscape(
    speed: &AngularSpeedSeries,
    f_min: f64,
    window: usize,
    hop: usize,
) -> Result<BandEnergyProfile, SpectralError> {
    let rate = speed.grid.rate_hz;
    let with_data: Vec<&Vec<bool>> = speed.valid.iter().filter(|v| v.iter().any(|b| *b)).collect();
    let first = with_data.iter().filter_map(|v| v.iter().position(|b| *b)).max().unwrap_or(0);
    let last = with_data.iter().filter_map(|v| v.iter().rposition(|b| *b)).min().unwrap_or(0);
    let span = if with_data.is_empty() || last < first { 0 } else { last - first + 1 };
    let empty = |frame_times| BandEnergyProfile {
        f_min,
        frame_times,
        labels: speed.labels.clone(),
        energy: vec![Vec::new(); speed.labels.len()],
    };
    let frames = match check_frame(span, rate, window, hop) {
        Ok(f) => f,
        Err(SpectralError::TooShort { .. }) => return Ok(empty(Vec::new())),
        Err(e) => return Err(e),
    };
    let t0 = speed.grid.tick_s(first);
    let frame_times: Vec<f64> = (0..frames).map(|f| t0 + frame_time(f * hop, window, rate)).collect();
    let mut fp = FramePower::new(window);
    let freqs: Vec<f64> = (0..fp.bins()).map(|k| k as f64 * rate / window as f64).collect();
    let mut row = vec![0.0; fp.bins()];
    let mut buf = vec![0.0; span];
    let mut energy = Vec::with_capacity(speed.values.len());
    for (values, valid) in speed.values.iter().zip(&speed.valid) {
        if !valid.iter().any(|b| *b) {
            energy.push(Vec::new());
            continue;
        }
        for (k, b) in buf.iter_mut().enumerate() {
            *b = if valid[first + k] { values[first + k] } else { 0.0 };
        }
        let e = (0..frames)
            .map(|f| {
                fp.compute(&buf[f * hop..f * hop + window], &mut row);
                row.iter().zip(&freqs).filter(|(_, fr)| **fr > f_min).map(|(p, _)| p).sum()
            })
            .collect();
        energy.push(e);
    }
    Ok(BandEnergyProfile { f_min, frame_times, labels: speed.labels.clone(), energy })
}
