//! Temporal alignment: per-sensor clock maps from broadcast anchors,
//! resampling onto a uniform master grid, and drift reporting.

use thiserror::Error;

use crate::geom::{slerp, UnitQuaternion, Vec3};
use crate::grid::UniformGrid;
use crate::simnet::{AnchorRecord, DriftingClock, SensorId, SensorSample};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SyncError {
    #[error("no anchor carries sensor {0}")]
    NoAnchors(SensorId),
    #[error("corrupted anchor stream for sensor {sensor}: latched {prev} then {next}")]
    NonMonotoneAnchors { sensor: SensorId, prev: i64, next: i64 },
    #[error("duplicate anchor master time {0} us")]
    DuplicateMaster(i64),
    #[error("samples of sensor {sensor} are not sorted by local time at index {index}")]
    UnsortedSamples { sensor: SensorId, index: usize },
    #[error("no clock map for sensor {0}")]
    MissingMap(SensorId),
    #[error("sample stream for sensor {0} mixes sensor ids")]
    MixedStream(SensorId),
}

/// Piecewise-linear local-to-master mapping, exact at its anchor pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct ClockMap {
    sensor_id: SensorId,
    /// `(t_local_us, t_master_us)`, strictly increasing in both.
    pairs: Vec<(i64, i64)>,
}

impl ClockMap {
    pub fn new(sensor_id: SensorId, pairs: Vec<(i64, i64)>) -> Result<Self, SyncError> {
        if pairs.is_empty() {
            return Err(SyncError::NoAnchors(sensor_id));
        }
        for w in pairs.windows(2) {
            if w[1].1 <= w[0].1 {
                return Err(SyncError::DuplicateMaster(w[1].1));
            }
            if w[1].0 <= w[0].0 {
                return Err(SyncError::NonMonotoneAnchors { sensor: sensor_id, prev: w[0].0, next: w[1].0 });
            }
        }
        Ok(Self { sensor_id, pairs })
    }

    pub fn sensor_id(&self) -> SensorId {
        self.sensor_id
    }

    pub fn pairs(&self) -> &[(i64, i64)] {
        &self.pairs
    }

    /// Segment index `i` such that the query is interpreted on `[pairs[i], pairs[i+1]]`,
    /// clamped to the end segments for extrapolation.
    fn segment(keys: impl Fn(usize) -> f64, n: usize, x: f64) -> usize {
        if n < 2 {
            return 0;
        }
        // first index with key > x
        let (mut lo, mut hi) = (0usize, n);
        while lo < hi {
            let mid = (lo + hi) / 2;
            if keys(mid) <= x {
                lo = mid + 1;
            } else {
                hi = mid;
            }
        }
        lo.saturating_sub(1).min(n - 2)
    }

    fn eval(&self, x: f64, forward: bool) -> f64 {
        let pick = |p: &(i64, i64)| if forward { (p.0 as f64, p.1 as f64) } else { (p.1 as f64, p.0 as f64) };
        let n = self.pairs.len();
        if n == 1 {
            let (x0, y0) = pick(&self.pairs[0]);
            return y0 + (x - x0);
        }
        let i = Self::segment(|k| pick(&self.pairs[k]).0, n, x);
        let (x0, y0) = pick(&self.pairs[i]);
        let (x1, y1) = pick(&self.pairs[i + 1]);
        if x == x0 {
            return y0;
        }
        if x == x1 {
            return y1;
        }
        y0 + (x - x0) * ((y1 - y0) / (x1 - x0))
    }

    /// Master time (µs) for a local clock reading (µs).
    pub fn local_to_master(&self, t_local_us: f64) -> f64 {
        self.eval(t_local_us, true)
    }

    /// Inverse of [`ClockMap::local_to_master`].
    pub fn master_to_local(&self, t_master_us: f64) -> f64 {
        self.eval(t_master_us, false)
    }

    /// Slope of each segment, d(master)/d(local).
    pub fn slopes(&self) -> Vec<f64> {
        self.pairs
            .windows(2)
            .map(|w| (w[1].1 - w[0].1) as f64 / (w[1].0 - w[0].0) as f64)
            .collect()
    }
}

fn sensor_pairs(anchors: &[AnchorRecord], sensor: SensorId) -> Result<Vec<(i64, i64)>, SyncError> {
    let mut pairs: Vec<(i64, i64)> = anchors
        .iter()
        .filter_map(|a| a.latched_for(sensor).map(|l| (l, a.t_master_us)))
        .collect();
    if pairs.is_empty() {
        return Err(SyncError::NoAnchors(sensor));
    }
    pairs.sort_by_key(|p| p.1);
    Ok(pairs)
}

/// Clock map through every `(latched, t_master)` pair of `sensor`.
pub fn fit_clock_map(anchors: &[AnchorRecord], sensor: SensorId) -> Result<ClockMap, SyncError> {
    ClockMap::new(sensor, sensor_pairs(anchors, sensor)?)
}

/// Offset-only map from the earliest anchor; the uncompensated reference.
pub fn one_time_baseline(anchors: &[AnchorRecord], sensor: SensorId) -> Result<ClockMap, SyncError> {
    let pairs = sensor_pairs(anchors, sensor)?;
    // Validate the whole stream the same way the full fit does.
    ClockMap::new(sensor, pairs.clone())?;
    ClockMap::new(sensor, vec![pairs[0]])
}

pub fn fit_all(anchors: &[AnchorRecord], sensors: &[SensorId], baseline: bool) -> Result<Vec<ClockMap>, SyncError> {
    sensors
        .iter()
        .map(|s| if baseline { one_time_baseline(anchors, *s) } else { fit_clock_map(anchors, *s) })
        .collect()
}

/// Orientation and gyro of every sensor on a shared master grid.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedSeries {
    pub grid: UniformGrid,
    pub sensor_ids: Vec<SensorId>,
    /// `orientations[sensor][tick]`; identity where invalid.
    pub orientations: Vec<Vec<UnitQuaternion>>,
    /// `gyro[sensor][tick]`; zero where invalid.
    pub gyro: Vec<Vec<Vec3>>,
    pub valid: Vec<Vec<bool>>,
}

impl AlignedSeries {
    pub fn sensor_index(&self, id: SensorId) -> Option<usize> {
        self.sensor_ids.iter().position(|s| *s == id)
    }

    /// Ticks valid for every sensor.
    pub fn common_valid(&self) -> Vec<bool> {
        (0..self.grid.count).map(|k| self.valid.iter().all(|v| v[k])).collect()
    }
}

fn resample_one(samples: &[SensorSample], map: &ClockMap, grid: &UniformGrid) -> (Vec<UnitQuaternion>, Vec<Vec3>, Vec<bool>) {
    let n = grid.count;
    let mut q_out = vec![UnitQuaternion::IDENTITY; n];
    let mut g_out = vec![Vec3::zeros(); n];
    let mut valid = vec![false; n];
    if samples.is_empty() {
        return (q_out, g_out, valid);
    }
    let masters: Vec<f64> = samples.iter().map(|s| map.local_to_master(s.t_local_us as f64)).collect();
    let last = masters.len() - 1;
    let mut i = 0usize;
    for k in 0..n {
        let t = grid.tick_us(k);
        if t < masters[0] || t > masters[last] {
            continue;
        }
        while i + 1 < last && masters[i + 1] <= t {
            i += 1;
        }
        if last == 0 {
            q_out[k] = samples[0].orientation;
            g_out[k] = samples[0].gyro;
        } else {
            let (m0, m1) = (masters[i], masters[i + 1]);
            let (a, b) = (&samples[i], &samples[i + 1]);
            if t == m0 {
                q_out[k] = a.orientation;
                g_out[k] = a.gyro;
            } else if t == m1 {
                q_out[k] = b.orientation;
                g_out[k] = b.gyro;
            } else {
                let u = (t - m0) / (m1 - m0);
                q_out[k] = slerp(&a.orientation, &b.orientation, u);
                g_out[k] = a.gyro + (b.gyro - a.gyro) * u;
            }
        }
        valid[k] = true;
    }
    (q_out, g_out, valid)
}

/// Interpolates each sensor's stream onto `grid` through its clock map.
/// Ticks outside a sensor's mapped data range are marked invalid.
pub fn resample(streams: &[Vec<SensorSample>], maps: &[ClockMap], grid: &UniformGrid) -> Result<AlignedSeries, SyncError> {
    let mut sensor_ids = Vec::with_capacity(streams.len());
    let mut orientations = Vec::with_capacity(streams.len());
    let mut gyro = Vec::with_capacity(streams.len());
    let mut valid = Vec::with_capacity(streams.len());
    for (idx, stream) in streams.iter().enumerate() {
        let id = match stream.first() {
            Some(s) => s.sensor_id,
            None => maps.get(idx).map(|m| m.sensor_id()).ok_or(SyncError::MissingMap(SensorId(idx as u16)))?,
        };
        if stream.iter().any(|s| s.sensor_id != id) {
            return Err(SyncError::MixedStream(id));
        }
        if let Some(index) = stream.windows(2).position(|w| w[1].t_local_us <= w[0].t_local_us) {
            return Err(SyncError::UnsortedSamples { sensor: id, index: index + 1 });
        }
        let map = maps.iter().find(|m| m.sensor_id() == id).ok_or(SyncError::MissingMap(id))?;
        let (q, g, v) = resample_one(stream, map, grid);
        sensor_ids.push(id);
        orientations.push(q);
        gyro.push(g);
        valid.push(v);
    }
    Ok(AlignedSeries { grid: *grid, sensor_ids, orientations, gyro, valid })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorStats {
    pub max_abs_s: f64,
    pub rms_s: f64,
}

impl ErrorStats {
    fn of(values: impl Iterator<Item = f64>) -> Self {
        let (mut max, mut sum2, mut n) = (0.0f64, 0.0, 0usize);
        for v in values {
            max = max.max(v.abs());
            sum2 += v * v;
            n += 1;
        }
        Self { max_abs_s: max, rms_s: if n == 0 { 0.0 } else { (sum2 / n as f64).sqrt() } }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensorDrift {
    pub sensor_id: SensorId,
    /// `(t_master_s, t_local_s - t_master_s)`.
    pub offsets: Vec<(f64, f64)>,
    pub max_abs_offset_s: f64,
    pub final_offset_s: f64,
    /// Map residual at its own anchor pairs.
    pub anchor_residual: ErrorStats,
    /// Mapping error against the true clock, when supplied.
    pub truth_error: Option<ErrorStats>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DriftReport {
    pub sensors: Vec<SensorDrift>,
}

impl DriftReport {
    pub fn max_truth_error_s(&self) -> Option<f64> {
        self.sensors
            .iter()
            .map(|s| s.truth_error.map(|e| e.max_abs_s))
            .try_fold(0.0f64, |acc, e| e.map(|e| acc.max(e)))
    }
}

/// Offset trajectories sampled every `cadence_s` over `[0, span_s]`.
/// `truth[i]` is the simulated clock of `maps[i]`; with `anchors` the map
/// residuals are measured against those anchors (defaults to the map's own pairs).
pub fn drift_report(
    maps: &[ClockMap],
    truth: Option<&[DriftingClock]>,
    anchors: Option<&[AnchorRecord]>,
    span_s: f64,
    cadence_s: f64,
) -> DriftReport {
    let steps = if cadence_s > 0.0 { (span_s / cadence_s + 1e-9).floor() as usize } else { 0 };
    let times: Vec<f64> = (0..=steps).map(|i| i as f64 * cadence_s).collect();
    let sensors = maps
        .iter()
        .enumerate()
        .map(|(i, map)| {
            let offsets: Vec<(f64, f64)> =
                times.iter().map(|&t| (t, (map.master_to_local(t * 1e6) - t * 1e6) * 1e-6)).collect();
            let pairs: Vec<(i64, i64)> = match anchors {
                Some(a) => a
                    .iter()
                    .filter_map(|r| r.latched_for(map.sensor_id()).map(|l| (l, r.t_master_us)))
                    .collect(),
                None => map.pairs().to_vec(),
            };
            let anchor_residual =
                ErrorStats::of(pairs.iter().map(|&(l, m)| (map.local_to_master(l as f64) - m as f64) * 1e-6));
            let truth_error = truth.and_then(|c| c.get(i)).map(|clock| {
                ErrorStats::of(times.iter().map(|&t| (map.local_to_master(clock.local_time(t) * 1e6) - t * 1e6) * 1e-6))
            });
            SensorDrift {
                sensor_id: map.sensor_id(),
                max_abs_offset_s: offsets.iter().fold(0.0f64, |m, o| m.max(o.1.abs())),
                final_offset_s: offsets.last().map(|o| o.1).unwrap_or(0.0),
                offsets,
                anchor_residual,
                truth_error,
            }
        })
        .collect();
    DriftReport { sensors }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{geodesic_distance, rot_z};
    use crate::simnet::{broadcast_latch, sensor_rng, OscillatorModel, Stream};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn anchors_for(clocks: &[DriftingClock], duration_s: f64, seed: u64) -> Vec<AnchorRecord> {
        let ids: Vec<SensorId> = (0..clocks.len()).map(|i| SensorId(i as u16)).collect();
        let nodes: Vec<_> = ids.iter().copied().zip(clocks.iter()).collect();
        let mut rngs: Vec<_> = ids.iter().map(|id| sensor_rng(seed, *id, Stream::LatchJitter)).collect();
        (0..=duration_s as i64).map(|a| broadcast_latch(a as u64, a * 1_000_000, &nodes, &mut rngs)).collect()
    }

    fn clock(ppm: f64, walk: f64, jitter: f64, seed: u64, horizon: f64) -> DriftingClock {
        let m = OscillatorModel {
            freq_offset_ppm: ppm,
            random_walk_ppm_per_sqrt_s: walk,
            latch_jitter_s: jitter,
            ..OscillatorModel::default()
        };
        DriftingClock::realize(m, horizon, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn single_anchor_is_identity_slope() {
        let m = ClockMap::new(SensorId(0), vec![(0, 0)]).unwrap();
        assert_eq!(m.local_to_master(12345.5), 12345.5);
        assert_eq!(m.master_to_local(-7.0), -7.0);
    }

    #[test]
    fn pure_ppm_clock_slopes() {
        let c = clock(100.0, 0.0, 0.0, 0, 20.0);
        let anchors = anchors_for(std::slice::from_ref(&c), 10.0, 0);
        let m = fit_clock_map(&anchors, SensorId(0)).unwrap();
        for s in m.slopes() {
            assert!((s - 1.0 / (1.0 + 1e-4)).abs() < 1e-12);
        }
    }

    #[test]
    fn baseline_closed_form_divergence() {
        let c = clock(100.0, 0.0, 0.0, 0, 150.0);
        let anchors = anchors_for(std::slice::from_ref(&c), 140.0, 0);
        let base = one_time_baseline(&anchors, SensorId(0)).unwrap();
        let full = fit_clock_map(&anchors, SensorId(0)).unwrap();
        let t_end = 140e6;
        let local = c.local_time(140.0) * 1e6;
        assert!((base.local_to_master(local) - t_end - 14_000.0).abs() < 1e-6);
        assert!((full.local_to_master(local) - t_end).abs() < 1e-6);
    }

    #[test]
    fn ideal_clocks_baseline_equals_full_map() {
        let c = clock(0.0, 0.0, 0.0, 0, 10.0);
        let anchors = anchors_for(std::slice::from_ref(&c), 5.0, 0);
        let base = one_time_baseline(&anchors, SensorId(0)).unwrap();
        let full = fit_clock_map(&anchors, SensorId(0)).unwrap();
        for k in 0..100 {
            let t = k as f64 * 61_234.5;
            assert_eq!(base.local_to_master(t), full.local_to_master(t));
        }
    }

    #[test]
    fn rejects_corrupted_anchor_streams() {
        let mk = |id, t, l| AnchorRecord { anchor_id: id, t_master_us: t, latched: vec![(SensorId(0), l)] };
        let bad = vec![mk(0, 0, 10), mk(1, 1_000_000, 5)];
        assert!(matches!(fit_clock_map(&bad, SensorId(0)), Err(SyncError::NonMonotoneAnchors { .. })));
        assert!(matches!(one_time_baseline(&bad, SensorId(0)), Err(SyncError::NonMonotoneAnchors { .. })));
        assert!(matches!(fit_clock_map(&bad, SensorId(3)), Err(SyncError::NoAnchors(_))));
    }

    #[test]
    fn default_session_is_sub_frame_and_beats_baseline() {
        let duration = 140.0;
        let clocks: Vec<_> = (0..18)
            .map(|i| clock(-100.0 + 200.0 * i as f64 / 17.0, 5.0, 5e-6, 100 + i, duration + 1.0))
            .collect();
        let anchors = anchors_for(&clocks, duration, 4);
        let ids: Vec<SensorId> = (0..18).map(SensorId).collect();
        let full = fit_all(&anchors, &ids, false).unwrap();
        let base = fit_all(&anchors, &ids, true).unwrap();
        let rf = drift_report(&full, Some(&clocks), None, duration, 0.01);
        let rb = drift_report(&base, Some(&clocks), Some(&anchors), duration, 0.01);
        let full_max = rf.max_truth_error_s().unwrap();
        assert!(full_max < 100e-6, "full map error {full_max}");
        for (i, (f, b)) in rf.sensors.iter().zip(&rb.sensors).enumerate() {
            let ppm = (-100.0 + 200.0 * i as f64 / 17.0f64).abs();
            let (fe, be) = (f.truth_error.unwrap().max_abs_s, b.truth_error.unwrap().max_abs_s);
            if ppm >= 20.0 {
                assert!(fe < be / 10.0, "sensor {i}: {fe} vs {be}");
            }
            assert_eq!(f.anchor_residual.max_abs_s, 0.0);
        }
    }

    #[test]
    fn drift_report_offsets_match_drawn_ppm() {
        let ppms = [-100.0, -37.5, 0.0, 64.0, 100.0];
        let clocks: Vec<_> = ppms.iter().map(|p| clock(*p, 0.0, 0.0, 0, 141.0)).collect();
        let mut anchors = anchors_for(&clocks, 140.0, 0);
        let ids: Vec<SensorId> = (0..ppms.len() as u16).map(SensorId).collect();
        let r = drift_report(&fit_all(&anchors, &ids, false).unwrap(), None, None, 140.0, 1.0);
        for (s, p) in r.sensors.iter().zip(ppms) {
            assert!((s.final_offset_s - 140.0 * p * 1e-6).abs() < 1e-6);
            assert!(s.max_abs_offset_s <= 0.014 + 1e-6);
        }
        anchors.reverse();
        let r2 = drift_report(&fit_all(&anchors, &ids, false).unwrap(), None, None, 140.0, 1.0);
        assert_eq!(r, r2);

        let ideal = vec![clock(0.0, 0.0, 0.0, 0, 10.0)];
        let anchors = anchors_for(&ideal, 5.0, 0);
        let r = drift_report(&fit_all(&anchors, &[SensorId(0)], false).unwrap(), Some(&ideal), None, 5.0, 0.1);
        assert!(r.sensors[0].offsets.iter().all(|o| o.1 == 0.0));
    }

    fn stream(id: u16, clock: &DriftingClock, duration: f64, f: impl Fn(f64) -> (UnitQuaternion, Vec3)) -> Vec<SensorSample> {
        let mut out = Vec::new();
        let mut k = 0u64;
        loop {
            let t_local_us = (k as f64 * 1250.0).round() as i64;
            let t = clock.master_time(t_local_us as f64 * 1e-6, k as f64 / 800.0);
            if t > duration {
                break;
            }
            let (q, g) = f(t);
            out.push(SensorSample { sensor_id: SensorId(id), seq: k, t_local_us, orientation: q, gyro: g });
            k += 1;
        }
        out
    }

    #[test]
    fn on_grid_samples_are_reproduced() {
        let c = clock(0.0, 0.0, 0.0, 0, 3.0);
        let s = stream(0, &c, 2.0, |t| (rot_z(0.3 * t).to_quat(), Vec3::new(t, 0.0, 0.0)));
        let anchors = anchors_for(std::slice::from_ref(&c), 2.0, 0);
        let maps = fit_all(&anchors, &[SensorId(0)], false).unwrap();
        let grid = UniformGrid::covering(2.0, 800.0);
        let a = resample(std::slice::from_ref(&s), &maps, &grid).unwrap();
        assert_eq!(a.orientations[0].len(), s.len());
        for (k, smp) in s.iter().enumerate() {
            assert!(a.valid[0][k]);
            assert_eq!(a.orientations[0][k], smp.orientation);
            assert_eq!(a.gyro[0][k], smp.gyro);
        }
    }

    #[test]
    fn constant_rate_rotation_is_exact_under_drift() {
        let c = clock(100.0, 0.0, 0.0, 0, 12.0);
        let truth = |t: f64| rot_z(1.0 * t);
        let s = stream(0, &c, 10.0, |t| (truth(t).to_quat(), Vec3::z()));
        let anchors = anchors_for(std::slice::from_ref(&c), 10.0, 0);
        let maps = fit_all(&anchors, &[SensorId(0)], false).unwrap();
        let grid = UniformGrid::covering(10.0, 800.0);
        let a = resample(std::slice::from_ref(&s), &maps, &grid).unwrap();
        assert!(!a.valid[0][grid.count - 1], "last tick lies beyond the data");
        let mut checked = 0;
        for k in 0..grid.count {
            if a.valid[0][k] {
                let err = geodesic_distance(&a.orientations[0][k].to_matrix(), &truth(grid.tick_s(k)));
                assert!(err < 1e-9, "tick {k}: {err}");
                checked += 1;
            }
        }
        assert!(checked > grid.count - 5);
    }

    #[test]
    fn first_tick_before_data_is_masked() {
        let s: Vec<SensorSample> = (1..10)
            .map(|k| SensorSample {
                sensor_id: SensorId(0),
                seq: k,
                t_local_us: k as i64 * 1250,
                orientation: UnitQuaternion::IDENTITY,
                gyro: Vec3::zeros(),
            })
            .collect();
        let maps = vec![ClockMap::new(SensorId(0), vec![(0, 0)]).unwrap()];
        let a = resample(&[s], &maps, &UniformGrid::covering(0.02, 800.0)).unwrap();
        assert!(!a.valid[0][0]);
        assert!(a.valid[0][1] && a.valid[0][9] && !a.valid[0][10]);
    }

    #[test]
    fn unsorted_input_is_rejected() {
        let mk = |t| SensorSample {
            sensor_id: SensorId(0),
            seq: 0,
            t_local_us: t,
            orientation: UnitQuaternion::IDENTITY,
            gyro: Vec3::zeros(),
        };
        let maps = vec![ClockMap::new(SensorId(0), vec![(0, 0)]).unwrap()];
        let r = resample(&[vec![mk(0), mk(2500), mk(1250)]], &maps, &UniformGrid::covering(0.01, 800.0));
        assert!(matches!(r, Err(SyncError::UnsortedSamples { index: 2, .. })));
    }

    /// Slow large-amplitude motion plus small content up to 200 Hz, sampled on
    /// offset clocks and resampled at 800 Hz. Walk-induced map error is
    /// covered separately; here it would mask the interpolant.
    #[test]
    fn band_limited_motion_resampling_error() {
        use std::f64::consts::PI;
        // (amplitude rad, frequency Hz, phase)
        let terms = [(1.0, 1.0, 0.0), (0.01, 20.0, 0.0), (1e-4, 120.0, 0.3), (5e-5, 200.0, 1.1)];
        let motion = |t: f64| {
            let a: f64 = terms.iter().map(|(amp, f, ph)| amp * (2.0 * PI * f * t + ph).sin()).sum();
            let b = 0.4 * (2.0 * PI * 0.7 * t + 0.2).sin();
            UnitQuaternion::exp(&Vec3::new(a, b, 0.5 * a))
        };
        // Chord interpolation error is bounded by peak angular acceleration * dt^2 / 8.
        let accel: f64 = 1.25f64.sqrt() * terms.iter().map(|(amp, f, _)| amp * (2.0 * PI * f).powi(2)).sum::<f64>()
            + 0.4 * (2.0 * PI * 0.7f64).powi(2);
        let bound = accel * (1.0 / 800.0f64).powi(2) / 8.0;
        let clocks: Vec<_> = (0..4).map(|i| clock(-80.0 + 50.0 * i as f64, 0.0, 0.0, i, 12.0)).collect();
        let streams: Vec<_> = clocks
            .iter()
            .enumerate()
            .map(|(i, c)| stream(i as u16, c, 10.0, |t| (motion(t), Vec3::zeros())))
            .collect();
        let anchors = anchors_for(&clocks, 10.0, 1);
        let ids: Vec<SensorId> = (0..4).map(SensorId).collect();
        let maps = fit_all(&anchors, &ids, false).unwrap();
        let grid = UniformGrid::covering(10.0, 800.0);
        let a = resample(&streams, &maps, &grid).unwrap();
        let mut worst = 0.0f64;
        for i in 0..4 {
            for k in 0..grid.count {
                if a.valid[i][k] {
                    worst = worst.max(a.orientations[i][k].angle_to(&motion(grid.tick_s(k))));
                }
            }
        }
        assert!(worst < 1e-4, "worst {worst}");
        assert!(worst < 1.2 * bound, "worst {worst} bound {bound}");
    }

    proptest! {
        #[test]
        fn map_exact_and_monotone(
            steps in proptest::collection::vec((1i64..2_000_000, 1i64..2_000_000), 1..30),
            queries in proptest::collection::vec(-5_000_000i64..80_000_000, 2..50),
        ) {
            let mut pairs = vec![(123i64, -50i64)];
            for (dl, dm) in steps {
                let (l, m) = *pairs.last().unwrap();
                pairs.push((l + dl, m + dm));
            }
            let map = ClockMap::new(SensorId(1), pairs.clone()).unwrap();
            for (l, m) in &pairs {
                prop_assert_eq!(map.local_to_master(*l as f64), *m as f64);
                prop_assert_eq!(map.master_to_local(*m as f64), *l as f64);
            }
            let mut q = queries;
            q.sort();
            q.dedup();
            let mapped: Vec<f64> = q.iter().map(|x| map.local_to_master(*x as f64)).collect();
            for w in mapped.windows(2) {
                prop_assert!(w[1] > w[0]);
            }
        }

        #[test]
        fn anchors_exact_for_random_clocks(seed in 0u64..1000, ppm in -100.0f64..100.0) {
            let c = clock(ppm, 5.0, 5e-6, seed, 31.0);
            let anchors = anchors_for(std::slice::from_ref(&c), 30.0, seed);
            let map = fit_clock_map(&anchors, SensorId(0)).unwrap();
            for a in &anchors {
                let l = a.latched_for(SensorId(0)).unwrap();
                prop_assert_eq!(map.local_to_master(l as f64), a.t_master_us as f64);
            }
        }
    }
}
