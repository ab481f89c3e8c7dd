//! Two-step closed-form spatial calibration: per-sensor heading of the
//! private world frame and sensor-to-bone mount, then reconstruction of
//! segment orientations in the shared world frame.

use thiserror::Error;

use crate::geom::{rot_z, GeomError, Mat3, RotationMatrix, UnitQuaternion};
use crate::grid::UniformGrid;
use crate::simnet::{CaptureRecording, Segment, SensorId, SensorSample, SensorTopology};
use crate::timesync::AlignedSeries;

pub const DEFAULT_DEGENERACY_THRESHOLD: f64 = 0.05;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CalError {
    #[error("degenerate capture (sin(alpha) proxy {proxy:.4} below {threshold}), recapture required")]
    Degenerate { proxy: f64, threshold: f64 },
    #[error("degenerate captures for sensors {0:?}, recapture required")]
    DegenerateSensors(Vec<SensorId>),
    #[error("sensor {0} missing from calibration captures")]
    MissingSensor(SensorId),
    #[error("no calibration entry for sensor {0}")]
    MissingCalibration(SensorId),
    #[error("aligned series has no stream for sensor {0}")]
    MissingStream(SensorId),
    #[error("capture window for sensor {0} is empty")]
    EmptyCapture(SensorId),
    #[error(transparent)]
    Geom(#[from] GeomError),
}

/// Static-pose readings `R^IW_I` per sensor: zero pose, rotation start, rotation end.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationCaptures {
    pub sensor_ids: Vec<SensorId>,
    pub zero: Vec<RotationMatrix>,
    pub start: Vec<RotationMatrix>,
    pub end: Vec<RotationMatrix>,
}

/// Chordal mean of a set of rotations: the SVD projection of their sum.
pub fn chordal_mean(rotations: impl IntoIterator<Item = RotationMatrix>) -> Result<RotationMatrix, GeomError> {
    let mut sum = Mat3::zeros();
    let mut n = 0usize;
    for r in rotations {
        sum += r.matrix();
        n += 1;
    }
    if n == 0 {
        return Err(GeomError::NonFinite);
    }
    RotationMatrix::project(&sum)
}

fn window_mean(samples: &[SensorSample], id: SensorId) -> Result<RotationMatrix, CalError> {
    if samples.is_empty() {
        return Err(CalError::EmptyCapture(id));
    }
    Ok(chordal_mean(samples.iter().map(|s| s.orientation.to_matrix()))?)
}

impl CalibrationCaptures {
    /// Averages each static window (chordal mean, re-orthonormalized).
    pub fn from_windows(
        zero: &[Vec<SensorSample>],
        start: &[Vec<SensorSample>],
        end: &[Vec<SensorSample>],
    ) -> Result<Self, CalError> {
        let mut out = Self { sensor_ids: Vec::new(), zero: Vec::new(), start: Vec::new(), end: Vec::new() };
        for z in zero {
            let id = z.first().map(|s| s.sensor_id).ok_or(CalError::EmptyCapture(SensorId(out.sensor_ids.len() as u16)))?;
            fn find(set: &[Vec<SensorSample>], id: SensorId) -> Result<&[SensorSample], CalError> {
                set.iter()
                    .find(|w| w.first().is_some_and(|s| s.sensor_id == id))
                    .map(|w| w.as_slice())
                    .ok_or(CalError::MissingSensor(id))
            }
            out.zero.push(window_mean(z, id)?);
            out.start.push(window_mean(find(start, id)?, id)?);
            out.end.push(window_mean(find(end, id)?, id)?);
            out.sensor_ids.push(id);
        }
        Ok(out)
    }

    pub fn from_recording(rec: &CaptureRecording) -> Result<Self, CalError> {
        Self::from_windows(&rec.zero, &rec.start, &rec.end)
    }

    fn index_of(&self, id: SensorId) -> Option<usize> {
        self.sensor_ids.iter().position(|s| *s == id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensorCalibration {
    pub sensor_id: SensorId,
    pub theta: f64,
    /// `R^W_IW = rot_z(theta)`.
    pub r_w_iw: RotationMatrix,
    /// `R^I_H`.
    pub r_i_h: RotationMatrix,
}

impl SensorCalibration {
    pub fn new(sensor_id: SensorId, theta: f64, r_i_h: RotationMatrix) -> Self {
        Self { sensor_id, theta, r_w_iw: rot_z(theta), r_i_h }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpatialCalibration {
    pub sensors: Vec<SensorCalibration>,
}

impl SpatialCalibration {
    pub fn get(&self, id: SensorId) -> Option<&SensorCalibration> {
        self.sensors.iter().find(|c| c.sensor_id == id)
    }
}

/// Heading of the sensor's private world frame from the three captures.
/// Returns `(theta, sin_alpha_proxy)`.
pub fn solve_theta(
    r0: &RotationMatrix,
    rs: &RotationMatrix,
    re: &RotationMatrix,
    threshold: f64,
) -> Result<(f64, f64), CalError> {
    let r = *r0 * rs.transpose() * *re * r0.transpose();
    let (r13, r23) = (r.at(0, 2), r.at(1, 2));
    let proxy = r13.hypot(r23);
    if !(proxy >= threshold) {
        return Err(CalError::Degenerate { proxy, threshold });
    }
    Ok(((-r13).atan2(-r23), proxy))
}

/// `R^I_H = R0^T rot_z(theta)^T`.
pub fn compute_mount(r0: &RotationMatrix, theta: f64) -> RotationMatrix {
    r0.transpose() * rot_z(theta).transpose()
}

/// `R^W_H = R^W_IW R^IW_I R^I_H`.
pub fn apply_calibration(r_iw_i: &RotationMatrix, cal: &SensorCalibration) -> RotationMatrix {
    cal.r_w_iw * *r_iw_i * cal.r_i_h
}

/// Calibrates every sensor of `topology`; fails as a whole if any is degenerate.
pub fn calibrate_hand(
    captures: &CalibrationCaptures,
    topology: &SensorTopology,
    threshold: f64,
) -> Result<SpatialCalibration, CalError> {
    let mut sensors = Vec::with_capacity(topology.len());
    let mut degenerate = Vec::new();
    for node in topology.sensors() {
        let i = captures.index_of(node.id).ok_or(CalError::MissingSensor(node.id))?;
        match solve_theta(&captures.zero[i], &captures.start[i], &captures.end[i], threshold) {
            Ok((theta, _)) => sensors.push(SensorCalibration::new(node.id, theta, compute_mount(&captures.zero[i], theta))),
            Err(CalError::Degenerate { .. }) => degenerate.push(node.id),
            Err(e) => return Err(e),
        }
    }
    if !degenerate.is_empty() {
        return Err(CalError::DegenerateSensors(degenerate));
    }
    Ok(SpatialCalibration { sensors })
}

/// Segment orientations `R^W_H` on the aligned grid.
#[derive(Debug, Clone, PartialEq)]
pub struct HandFrameSeries {
    pub grid: UniformGrid,
    pub sensor_ids: Vec<SensorId>,
    pub segments: Vec<Segment>,
    /// `orientations[segment][tick]`.
    pub orientations: Vec<Vec<UnitQuaternion>>,
    pub valid: Vec<Vec<bool>>,
}

impl HandFrameSeries {
    pub fn index_of(&self, segment: Segment) -> Option<usize> {
        self.segments.iter().position(|s| *s == segment)
    }
}

pub fn reconstruct(
    aligned: &AlignedSeries,
    cal: &SpatialCalibration,
    topology: &SensorTopology,
) -> Result<HandFrameSeries, CalError> {
    let mut out = HandFrameSeries {
        grid: aligned.grid,
        sensor_ids: Vec::new(),
        segments: Vec::new(),
        orientations: Vec::new(),
        valid: Vec::new(),
    };
    for node in topology.sensors() {
        let idx = aligned.sensor_index(node.id).ok_or(CalError::MissingStream(node.id))?;
        let c = cal.get(node.id).ok_or(CalError::MissingCalibration(node.id))?;
        let (qa, qb) = (c.r_w_iw.to_quat(), c.r_i_h.to_quat());
        let valid = aligned.valid[idx].clone();
        let q: Vec<UnitQuaternion> = aligned.orientations[idx]
            .iter()
            .zip(&valid)
            .map(|(q, v)| if *v { (qa * *q * qb).canonical() } else { UnitQuaternion::IDENTITY })
            .collect();
        out.sensor_ids.push(node.id);
        out.segments.push(node.segment);
        out.orientations.push(q);
        out.valid.push(valid);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{geodesic_distance, rot_x, Vec3};
    use crate::simnet::{random_rotation, SensorMounting};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    /// Forward synthesis of the three captures for heading `theta`, mount, pitch `alpha`.
    fn synth(theta: f64, mount: &RotationMatrix, alpha: f64) -> [RotationMatrix; 3] {
        let m = SensorMounting { heading_rad: theta, mount: *mount };
        [
            m.sensor_orientation(&RotationMatrix::identity()),
            m.sensor_orientation(&RotationMatrix::identity()),
            m.sensor_orientation(&rot_x(alpha)),
        ]
    }

    fn wrap(a: f64) -> f64 {
        (a + PI).rem_euclid(2.0 * PI) - PI
    }

    #[test]
    fn aligned_frames() {
        let i = RotationMatrix::identity();
        let (theta, proxy) = solve_theta(&i, &i, &rot_x(PI / 2.0), 0.05).unwrap();
        assert!(theta.abs() < 1e-15);
        assert!((proxy - 1.0).abs() < 1e-15);
        assert_eq!(compute_mount(&i, 0.0), i);
    }

    #[test]
    fn recovers_synthesized_heading_and_mount() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mount = random_rotation(&mut rng);
        let [r0, rs, re] = synth(0.7, &mount, PI / 3.0);
        let (theta, _) = solve_theta(&r0, &rs, &re, 0.05).unwrap();
        assert!((theta - 0.7).abs() < 1e-10);
        assert!(geodesic_distance(&compute_mount(&r0, theta), &mount) < 1e-10);

        // Independent check: grid search over theta of the Frobenius residual of
        // rot_z(theta) R rot_z(theta)^T = rot_x(alpha).
        let r = r0 * rs.transpose() * re * r0.transpose();
        let target = rot_x(PI / 3.0);
        let resid = |t: f64| ((rot_z(t) * r * rot_z(t).transpose()).matrix() - target.matrix()).norm();
        let n = 200_000;
        let best = (0..n).map(|k| -PI + 2.0 * PI * k as f64 / n as f64).min_by(|a, b| resid(*a).total_cmp(&resid(*b))).unwrap();
        assert!((best - theta).abs() < 2.0 * PI / n as f64);
    }

    #[test]
    fn degenerate_alpha_is_rejected() {
        let [r0, rs, re] = synth(0.3, &RotationMatrix::identity(), PI - 1e-9);
        assert!(matches!(solve_theta(&r0, &rs, &re, 0.05), Err(CalError::Degenerate { .. })));
    }

    #[test]
    fn apply_recovers_zero_and_end_poses() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let theta = rng.random_range(-PI..PI);
            let alpha = rng.random_range(0.2..3.0);
            let mount = random_rotation(&mut rng);
            let [r0, rs, re] = synth(theta, &mount, alpha);
            let (t, _) = solve_theta(&r0, &rs, &re, 0.05).unwrap();
            let cal = SensorCalibration::new(SensorId(0), t, compute_mount(&r0, t));
            assert!(geodesic_distance(&apply_calibration(&r0, &cal), &RotationMatrix::identity()) < 1e-10);
            assert!(geodesic_distance(&apply_calibration(&re, &cal), &rot_x(alpha)) < 1e-10);
            let pose = random_rotation(&mut rng);
            let reading = SensorMounting { heading_rad: theta, mount }.sensor_orientation(&pose);
            assert!(geodesic_distance(&apply_calibration(&reading, &cal), &pose) < 1e-9);
        }
    }

    #[test]
    fn calibrate_hand_per_sensor_and_atomic_failure() {
        let topo = SensorTopology::standard();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let truth: Vec<(f64, RotationMatrix)> =
            (0..18).map(|_| (rng.random_range(-PI..PI), random_rotation(&mut rng))).collect();
        let mut caps = CalibrationCaptures { sensor_ids: topo.ids(), zero: vec![], start: vec![], end: vec![] };
        for (theta, mount) in &truth {
            let [a, b, c] = synth(*theta, mount, 1.2);
            caps.zero.push(a);
            caps.start.push(b);
            caps.end.push(c);
        }
        let cal = calibrate_hand(&caps, &topo, 0.05).unwrap();
        for (c, (theta, mount)) in cal.sensors.iter().zip(&truth) {
            assert!(wrap(c.theta - theta).abs() < 1e-10);
            assert!(geodesic_distance(&c.r_i_h, mount) < 1e-10);
            assert_eq!(c.r_w_iw, rot_z(c.theta));
        }

        // identical ideal mounts -> identical theta
        let mut same = caps.clone();
        let [a, b, c] = synth(0.4, &RotationMatrix::identity(), 1.0);
        same.zero = vec![a; 18];
        same.start = vec![b; 18];
        same.end = vec![c; 18];
        let cal = calibrate_hand(&same, &topo, 0.05).unwrap();
        assert!(cal.sensors.iter().all(|c| c.theta == cal.sensors[0].theta));

        caps.end[7] = caps.start[7];
        match calibrate_hand(&caps, &topo, 0.05) {
            Err(CalError::DegenerateSensors(ids)) => assert_eq!(ids, vec![SensorId(7)]),
            other => panic!("{other:?}"),
        }
        caps.sensor_ids.pop();
        assert!(matches!(calibrate_hand(&caps, &topo, 0.05), Err(CalError::MissingSensor(_))));
    }

    #[test]
    fn chordal_mean_of_symmetric_spread_is_center() {
        let c = rot_x(0.4);
        let d = 0.01;
        let rs = [Vec3::x(), -Vec3::x(), Vec3::y(), -Vec3::y()].map(|v| c * crate::geom::exp_so3(&(v * d)));
        assert!(geodesic_distance(&chordal_mean(rs).unwrap(), &c) < 1e-12);
    }

    #[test]
    fn static_session_reconstructs_identity() {
        use crate::simnet::*;
        use crate::timesync::{fit_all, resample};
        let topo = SensorTopology::standard();
        let mountings = draw_mountings(&topo, 21);
        let motion = gen_motion("static", &MotionParams::Static, 1.0).unwrap();
        let spec = SessionSpec {
            topology: topo.clone(),
            oscillators: draw_oscillators(&topo, 21, 100.0, OscillatorModel::default()),
            mountings: mountings.clone(),
            motion,
            noise: SensorNoise::default(),
            duration_s: 1.0,
            anchor_period_s: 0.25,
            seed: 21,
            truth_rate_hz: 800.0,
        };
        let session = simulate_session(&spec).unwrap();
        let rec = simulate_captures(&topo, &mountings, &SensorNoise::default(), &CaptureProtocol::default(), 800.0, 21);
        let cal = calibrate_hand(&CalibrationCaptures::from_recording(&rec).unwrap(), &topo, 0.05).unwrap();
        let maps = fit_all(&session.anchors, &topo.ids(), false).unwrap();
        let aligned = resample(&session.samples, &maps, &UniformGrid::covering(1.0, 800.0)).unwrap();
        let frames = reconstruct(&aligned, &cal, &topo).unwrap();
        assert_eq!(frames.segments.len(), 18);
        let mut n = 0;
        for (q, v) in frames.orientations.iter().zip(&frames.valid) {
            for (q, v) in q.iter().zip(v) {
                if *v {
                    assert!(q.angle() < 1e-9);
                    n += 1;
                }
            }
        }
        assert!(n > 18 * 790);
        let short = SpatialCalibration { sensors: cal.sensors[..17].to_vec() };
        assert!(matches!(reconstruct(&aligned, &short, &topo), Err(CalError::MissingCalibration(_))));
    }

    proptest! {
        #[test]
        fn noiseless_round_trip(seed in 0u64..u64::MAX, theta in -PI..PI, alpha in 0.1..(PI - 0.1)) {
            let mount = random_rotation(&mut ChaCha8Rng::seed_from_u64(seed));
            let [r0, rs, re] = synth(theta, &mount, alpha);
            let (t, _) = solve_theta(&r0, &rs, &re, 0.05).unwrap();
            prop_assert!(wrap(t - theta).abs() < 1e-9);
            prop_assert!(geodesic_distance(&compute_mount(&r0, t), &mount) < 1e-9);
            let cal = SensorCalibration::new(SensorId(0), t, compute_mount(&r0, t));
            prop_assert!(geodesic_distance(&apply_calibration(&r0, &cal), &RotationMatrix::identity()) < 1e-10);
        }

        #[test]
        fn theta_independent_of_alpha(seed in 0u64..u64::MAX, theta in -PI..PI) {
            let mount = random_rotation(&mut ChaCha8Rng::seed_from_u64(seed));
            let ts: Vec<f64> = [0.2, PI / 2.0, 2.9]
                .iter()
                .map(|a| {
                    let [r0, rs, re] = synth(theta, &mount, *a);
                    solve_theta(&r0, &rs, &re, 0.05).unwrap().0
                })
                .collect();
            prop_assert!(wrap(ts[0] - ts[1]).abs() < 1e-9 && wrap(ts[1] - ts[2]).abs() < 1e-9);
        }

        #[test]
        fn third_column_convention(seed in 0u64..u64::MAX, theta in -PI..PI, alpha in 0.1..(PI - 0.1)) {
            let mount = random_rotation(&mut ChaCha8Rng::seed_from_u64(seed));
            let [r0, rs, re] = synth(theta, &mount, alpha);
            let r = r0 * rs.transpose() * re * r0.transpose();
            prop_assert!((r.at(0, 2) + theta.sin() * alpha.sin()).abs() < 1e-10);
            prop_assert!((r.at(1, 2) + theta.cos() * alpha.sin()).abs() < 1e-10);
        }

        #[test]
        fn heading_cancels_in_chain(theta in -PI..PI, seed in 0u64..u64::MAX) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (mount, pose) = (random_rotation(&mut rng), random_rotation(&mut rng));
            let reading = SensorMounting { heading_rad: theta, mount }.sensor_orientation(&pose);
            let r0 = SensorMounting { heading_rad: theta, mount }.sensor_orientation(&RotationMatrix::identity());
            let cal = SensorCalibration::new(SensorId(0), theta, compute_mount(&r0, theta));
            prop_assert!(geodesic_distance(&apply_calibration(&reading, &cal), &pose) < 1e-9);
        }
    }
}
