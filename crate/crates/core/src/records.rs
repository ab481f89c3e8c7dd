//! Line-oriented text record files.
//!
//! The first line is a header of `key=value` tokens after a `#` marker:
//! `# format_version=1 kind=<kind> fields=<a,b,...> [meta...]`. Every other
//! line holds one record as space-separated tokens in field order.
//! Timestamps are integer microseconds. Floats use Rust's shortest
//! round-trip form, so a parse of a written value returns the same bits.
//! Paths ending in `.gz` are gzip-wrapped transparently.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::MultiGzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use thiserror::Error;

use crate::geom::{RotationMatrix, UnitQuaternion, Vec3};
use crate::grid::UniformGrid;
use crate::simnet::{AnchorRecord, CaptureRecording, GroundTruthLog, SensorId, SensorSample, Segment, TruthEntry};
use crate::spatialcal::{HandFrameSeries, SensorCalibration, SpatialCalibration};
use crate::spectral::BandEnergyProfile;
use crate::timesync::{AlignedSeries, DriftReport};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum RecordError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecordKind {
    Sample,
    Capture,
    Anchor,
    GroundTruth,
    Aligned,
    HandFrames,
    Drift,
    Spectrum,
    Targets,
    Joints,
    Calibration,
}

impl RecordKind {
    pub fn name(&self) -> &'static str {
        match self {
            RecordKind::Sample => "sample",
            RecordKind::Capture => "capture",
            RecordKind::Anchor => "anchor",
            RecordKind::GroundTruth => "ground_truth",
            RecordKind::Aligned => "aligned",
            RecordKind::HandFrames => "hand_frames",
            RecordKind::Drift => "drift",
            RecordKind::Spectrum => "spectrum",
            RecordKind::Targets => "targets",
            RecordKind::Joints => "joints",
            RecordKind::Calibration => "calibration",
        }
    }

    pub fn fields(&self) -> &'static [&'static str] {
        match self {
            RecordKind::Sample => &["sensor_id", "seq", "t_local_us", "qw", "qx", "qy", "qz", "gx", "gy", "gz"],
            RecordKind::Capture => &["pose", "sensor_id", "seq", "t_local_us", "qw", "qx", "qy", "qz"],
            RecordKind::Anchor => &["anchor_id", "t_master_us", "sensor_id", "t_local_us"],
            RecordKind::GroundTruth => {
                &["sensor_id", "t_master_us", "clock_offset_us", "qw", "qx", "qy", "qz", "wx", "wy", "wz"]
            }
            RecordKind::Aligned => &["sensor_id", "t_master_us", "valid", "qw", "qx", "qy", "qz", "gx", "gy", "gz"],
            RecordKind::HandFrames => &["sensor_id", "segment", "t_master_us", "valid", "qw", "qx", "qy", "qz"],
            RecordKind::Drift => &["sensor_id", "t_master_s", "offset_s"],
            RecordKind::Spectrum => &["frame_time_s", "segment_label", "energy"],
            RecordKind::Targets => &["frame_time_s", "finger_index", "x", "y", "z"],
            RecordKind::Joints => &["frame_time_s", "joint_index", "joint", "q_rad"],
            RecordKind::Calibration => {
                &["sensor_id", "theta_rad", "r00", "r01", "r02", "r10", "r11", "r12", "r20", "r21", "r22"]
            }
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|k| k.name() == name)
    }

    pub const ALL: [RecordKind; 11] = [
        RecordKind::Sample,
        RecordKind::Capture,
        RecordKind::Anchor,
        RecordKind::GroundTruth,
        RecordKind::Aligned,
        RecordKind::HandFrames,
        RecordKind::Drift,
        RecordKind::Spectrum,
        RecordKind::Targets,
        RecordKind::Joints,
        RecordKind::Calibration,
    ];
}

#[derive(Debug, Clone, PartialEq)]
pub struct Header {
    pub kind: RecordKind,
    pub meta: BTreeMap<String, String>,
}

impl Header {
    pub fn new(kind: RecordKind) -> Self {
        Self { kind, meta: BTreeMap::new() }
    }

    pub fn with(mut self, key: &str, value: impl ToString) -> Self {
        self.meta.insert(key.to_string(), value.to_string());
        self
    }

    fn with_grid(self, grid: &UniformGrid) -> Self {
        self.with("t_start_us", grid.t_start_us).with("rate_hz", fmt_f64(grid.rate_hz)).with("count", grid.count)
    }

    fn line(&self) -> String {
        let mut s = format!("# format_version={FORMAT_VERSION} kind={} fields={}", self.kind.name(), self.kind.fields().join(","));
        for (k, v) in &self.meta {
            let _ = write!(s, " {k}={v}");
        }
        s
    }
}

pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

// ---------------------------------------------------------------------------
// Writing

enum Sink {
    Plain(BufWriter<File>),
    Gz(GzEncoder<BufWriter<File>>),
}

impl Sink {
    fn writer(&mut self) -> &mut dyn Write {
        match self {
            Sink::Plain(w) => w,
            Sink::Gz(w) => w,
        }
    }
}

pub struct RecordWriter {
    out: Sink,
    path: PathBuf,
    buf: String,
    fields: usize,
    in_row: usize,
}

impl RecordWriter {
    pub fn create(path: &Path, header: &Header) -> Result<Self, RecordError> {
        let io_err = |source| RecordError::Io { path: path.to_path_buf(), source };
        let file = File::create(path).map_err(io_err)?;
        let file = BufWriter::with_capacity(1 << 20, file);
        let out = if is_gz(path) { Sink::Gz(GzEncoder::new(file, Compression::fast())) } else { Sink::Plain(file) };
        let mut w = Self { out, path: path.to_path_buf(), buf: String::with_capacity(1 << 16), fields: header.kind.fields().len(), in_row: 0 };
        w.buf.push_str(&header.line());
        w.buf.push('\n');
        Ok(w)
    }

    fn sep(&mut self) {
        if self.in_row > 0 {
            self.buf.push(' ');
        }
        self.in_row += 1;
    }

    pub fn int(&mut self, v: i64) -> &mut Self {
        self.sep();
        let _ = write!(self.buf, "{v}");
        self
    }

    pub fn float(&mut self, v: f64) -> &mut Self {
        self.sep();
        let _ = write!(self.buf, "{v:?}");
        self
    }

    pub fn text(&mut self, v: &str) -> &mut Self {
        debug_assert!(!v.is_empty() && !v.contains(char::is_whitespace));
        self.sep();
        self.buf.push_str(v);
        self
    }

    pub fn quat(&mut self, q: &UnitQuaternion) -> &mut Self {
        let [w, x, y, z] = q.to_array();
        self.float(w).float(x).float(y).float(z)
    }

    pub fn vec3(&mut self, v: &Vec3) -> &mut Self {
        self.float(v.x).float(v.y).float(v.z)
    }

    pub fn end(&mut self) -> Result<(), RecordError> {
        debug_assert_eq!(self.in_row, self.fields);
        self.in_row = 0;
        self.buf.push('\n');
        if self.buf.len() > (1 << 16) - 512 {
            self.flush_buf()?;
        }
        Ok(())
    }

    fn flush_buf(&mut self) -> Result<(), RecordError> {
        self.out
            .writer()
            .write_all(self.buf.as_bytes())
            .map_err(|source| RecordError::Io { path: self.path.clone(), source })?;
        self.buf.clear();
        Ok(())
    }

    pub fn finish(mut self) -> Result<(), RecordError> {
        self.flush_buf()?;
        let io_err = |source| RecordError::Io { path: self.path.clone(), source };
        match self.out {
            Sink::Plain(mut w) => w.flush().map_err(io_err),
            Sink::Gz(w) => w.finish().and_then(|mut f| f.flush()).map_err(io_err),
        }
    }
}

fn is_gz(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "gz")
}

// ---------------------------------------------------------------------------
// Reading

pub struct RecordReader {
    lines: io::Lines<Box<dyn BufRead>>,
    path: PathBuf,
    line_no: usize,
    pub header: Header,
}

pub struct Row<'a> {
    tokens: std::str::SplitAsciiWhitespace<'a>,
    fields: &'static [&'static str],
    index: usize,
    path: &'a Path,
    line: usize,
}

impl<'a> Row<'a> {
    fn err(&self, message: String) -> RecordError {
        RecordError::Parse { path: self.path.to_path_buf(), line: self.line, message }
    }

    fn token(&mut self) -> Result<(&'a str, &'static str), RecordError> {
        let name = self.fields.get(self.index).copied().unwrap_or("?");
        self.index += 1;
        let t = self.tokens.next().ok_or_else(|| self.err(format!("missing field `{name}`")))?;
        Ok((t, name))
    }

    pub fn int(&mut self) -> Result<i64, RecordError> {
        let (t, name) = self.token()?;
        t.parse().map_err(|_| self.err(format!("field `{name}`: `{t}` is not an integer")))
    }

    pub fn uint(&mut self) -> Result<u64, RecordError> {
        let (t, name) = self.token()?;
        t.parse().map_err(|_| self.err(format!("field `{name}`: `{t}` is not a non-negative integer")))
    }

    pub fn sensor(&mut self) -> Result<SensorId, RecordError> {
        let (t, name) = self.token()?;
        t.parse().map(SensorId).map_err(|_| self.err(format!("field `{name}`: `{t}` is not a sensor id")))
    }

    pub fn float(&mut self) -> Result<f64, RecordError> {
        let (t, name) = self.token()?;
        t.parse().map_err(|_| self.err(format!("field `{name}`: `{t}` is not a number")))
    }

    pub fn flag(&mut self) -> Result<bool, RecordError> {
        match self.int()? {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(self.err(format!("field `{}`: expected 0 or 1, got {v}", self.fields[self.index - 1]))),
        }
    }

    pub fn text(&mut self) -> Result<&'a str, RecordError> {
        Ok(self.token()?.0)
    }

    pub fn quat(&mut self) -> Result<UnitQuaternion, RecordError> {
        let (w, x, y, z) = (self.float()?, self.float()?, self.float()?, self.float()?);
        UnitQuaternion::from_parts_unit(w, x, y, z).map_err(|e| self.err(format!("quaternion: {e}")))
    }

    pub fn vec3(&mut self) -> Result<Vec3, RecordError> {
        Ok(Vec3::new(self.float()?, self.float()?, self.float()?))
    }

    fn done(mut self) -> Result<(), RecordError> {
        if self.tokens.next().is_some() {
            return Err(self.err(format!("more than {} fields", self.fields.len())));
        }
        Ok(())
    }
}

impl RecordReader {
    pub fn open(path: &Path, expected: RecordKind) -> Result<Self, RecordError> {
        let io_err = |source| RecordError::Io { path: path.to_path_buf(), source };
        let file = File::open(path).map_err(io_err)?;
        let inner: Box<dyn Read> = if is_gz(path) { Box::new(MultiGzDecoder::new(file)) } else { Box::new(file) };
        let reader: Box<dyn BufRead> = Box::new(BufReader::with_capacity(1 << 20, inner));
        let mut lines = reader.lines();
        let perr = |line, message: String| RecordError::Parse { path: path.to_path_buf(), line, message };
        let first = lines.next().ok_or_else(|| perr(1, "empty file, expected a header".into()))?.map_err(io_err)?;
        let rest = first.strip_prefix('#').ok_or_else(|| perr(1, "header must start with `#`".into()))?;
        let mut meta = BTreeMap::new();
        for tok in rest.split_ascii_whitespace() {
            let (k, v) = tok.split_once('=').ok_or_else(|| perr(1, format!("header token `{tok}` is not key=value")))?;
            meta.insert(k.to_string(), v.to_string());
        }
        match meta.remove("format_version").as_deref() {
            Some("1") => {}
            Some(v) => return Err(perr(1, format!("unsupported format_version {v}"))),
            None => return Err(perr(1, "header lacks format_version".into())),
        }
        let kind_name = meta.remove("kind").ok_or_else(|| perr(1, "header lacks kind".into()))?;
        let kind = RecordKind::parse(&kind_name).ok_or_else(|| perr(1, format!("unknown record kind `{kind_name}`")))?;
        if kind != expected {
            return Err(perr(1, format!("expected a {} file, found {}", expected.name(), kind.name())));
        }
        let fields = meta.remove("fields").ok_or_else(|| perr(1, "header lacks fields".into()))?;
        if fields != kind.fields().join(",") {
            return Err(perr(1, format!("field list `{fields}` does not match kind {}", kind.name())));
        }
        Ok(Self { lines, path: path.to_path_buf(), line_no: 1, header: Header { kind, meta } })
    }

    pub fn meta<T: std::str::FromStr>(&self, key: &str) -> Result<T, RecordError> {
        let v = self.header.meta.get(key).ok_or_else(|| self.err(1, format!("header lacks `{key}`")))?;
        v.parse().map_err(|_| self.err(1, format!("header `{key}`: cannot parse `{v}`")))
    }

    fn grid(&self) -> Result<UniformGrid, RecordError> {
        UniformGrid::new(self.meta("t_start_us")?, self.meta("rate_hz")?, self.meta("count")?)
            .ok_or_else(|| self.err(1, "invalid grid in header".into()))
    }

    fn err(&self, line: usize, message: String) -> RecordError {
        RecordError::Parse { path: self.path.clone(), line, message }
    }

    /// Calls `f` for every record line.
    pub fn for_each(&mut self, mut f: impl FnMut(&mut Row<'_>) -> Result<(), RecordError>) -> Result<(), RecordError> {
        let fields = self.header.kind.fields();
        while let Some(line) = self.lines.next() {
            self.line_no += 1;
            let line = line.map_err(|source| RecordError::Io { path: self.path.clone(), source })?;
            if line.is_empty() {
                continue;
            }
            let mut row = Row { tokens: line.split_ascii_whitespace(), fields, index: 0, path: &self.path, line: self.line_no };
            f(&mut row)?;
            row.done()?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Typed files

fn group_by_sensor<T>(rows: Vec<(SensorId, T)>) -> Vec<(SensorId, Vec<T>)> {
    let mut out: Vec<(SensorId, Vec<T>)> = Vec::new();
    for (id, v) in rows {
        match out.last_mut() {
            Some((last, items)) if *last == id => items.push(v),
            _ => {
                if out.iter().any(|(s, _)| *s == id) {
                    // Interleaved input: fall back to a keyed merge.
                    let pos = out.iter().position(|(s, _)| *s == id).unwrap_or(0);
                    out[pos].1.push(v);
                } else {
                    out.push((id, vec![v]));
                }
            }
        }
    }
    out
}

pub fn write_samples(path: &Path, streams: &[Vec<SensorSample>]) -> Result<(), RecordError> {
    let mut w = RecordWriter::create(path, &Header::new(RecordKind::Sample))?;
    for s in streams.iter().flatten() {
        w.int(s.sensor_id.0 as i64).int(s.seq as i64).int(s.t_local_us).quat(&s.orientation).vec3(&s.gyro).end()?;
    }
    w.finish()
}

fn parse_sample(r: &mut Row<'_>) -> Result<SensorSample, RecordError> {
    Ok(SensorSample { sensor_id: r.sensor()?, seq: r.uint()?, t_local_us: r.int()?, orientation: r.quat()?, gyro: r.vec3()? })
}

/// Per-sensor streams in first-appearance order.
pub fn read_samples(path: &Path) -> Result<Vec<Vec<SensorSample>>, RecordError> {
    let mut rd = RecordReader::open(path, RecordKind::Sample)?;
    let mut rows = Vec::new();
    rd.for_each(|r| {
        let s = parse_sample(r)?;
        rows.push((s.sensor_id, s));
        Ok(())
    })?;
    Ok(group_by_sensor(rows).into_iter().map(|(_, v)| v).collect())
}

const CAPTURE_POSES: [&str; 3] = ["zero", "start", "end"];

pub fn write_captures(path: &Path, rec: &CaptureRecording) -> Result<(), RecordError> {
    let mut w = RecordWriter::create(path, &Header::new(RecordKind::Capture))?;
    for (pose, set) in CAPTURE_POSES.iter().zip([&rec.zero, &rec.start, &rec.end]) {
        for s in set.iter().flatten() {
            w.text(pose).int(s.sensor_id.0 as i64).int(s.seq as i64).int(s.t_local_us).quat(&s.orientation).end()?;
        }
    }
    w.finish()
}

pub fn read_captures(path: &Path) -> Result<CaptureRecording, RecordError> {
    let mut rd = RecordReader::open(path, RecordKind::Capture)?;
    let mut rows: [Vec<(SensorId, SensorSample)>; 3] = Default::default();
    rd.for_each(|r| {
        let pose = r.text()?;
        let p = CAPTURE_POSES.iter().position(|x| *x == pose).ok_or_else(|| r.err(format!("unknown capture pose `{pose}`")))?;
        let s = SensorSample { sensor_id: r.sensor()?, seq: r.uint()?, t_local_us: r.int()?, orientation: r.quat()?, gyro: Vec3::zeros() };
        rows[p].push((s.sensor_id, s));
        Ok(())
    })?;
    let [z, s, e] = rows.map(|r| group_by_sensor(r).into_iter().map(|(_, v)| v).collect::<Vec<_>>());
    Ok(CaptureRecording { zero: z, start: s, end: e })
}

pub fn write_anchors(path: &Path, anchors: &[AnchorRecord]) -> Result<(), RecordError> {
    let mut w = RecordWriter::create(path, &Header::new(RecordKind::Anchor))?;
    for a in anchors {
        for (id, t) in &a.latched {
            w.int(a.anchor_id as i64).int(a.t_master_us).int(id.0 as i64).int(*t).end()?;
        }
    }
    w.finish()
}

pub fn read_anchors(path: &Path) -> Result<Vec<AnchorRecord>, RecordError> {
    let mut rd = RecordReader::open(path, RecordKind::Anchor)?;
    let mut out: Vec<AnchorRecord> = Vec::new();
    rd.for_each(|r| {
        let (anchor_id, t_master_us, id, t) = (r.uint()?, r.int()?, r.sensor()?, r.int()?);
        match out.last_mut() {
            Some(a) if a.anchor_id == anchor_id => {
                if a.t_master_us != t_master_us {
                    return Err(r.err(format!("anchor {anchor_id} has two master times")));
                }
                a.latched.push((id, t));
            }
            _ => out.push(AnchorRecord { anchor_id, t_master_us, latched: vec![(id, t)] }),
        }
        Ok(())
    })?;
    Ok(out)
}

pub fn write_ground_truth(path: &Path, truth: &GroundTruthLog) -> Result<(), RecordError> {
    let mut w = RecordWriter::create(path, &Header::new(RecordKind::GroundTruth).with_grid(&truth.grid))?;
    for (id, entries) in truth.sensor_ids.iter().zip(&truth.entries) {
        for (k, e) in entries.iter().enumerate() {
            let t = truth.grid.tick_us_int(k);
            w.int(id.0 as i64).int(t).float(e.t_local_us - truth.grid.tick_us(k)).quat(&e.orientation).vec3(&e.omega).end()?;
        }
    }
    w.finish()
}

fn check_tick(r: &Row<'_>, grid: &UniformGrid, k: usize, t: i64) -> Result<(), RecordError> {
    if k >= grid.count || grid.tick_us_int(k) != t {
        return Err(r.err(format!("timestamp {t} is not tick {k} of the header grid")));
    }
    Ok(())
}

pub fn read_ground_truth(path: &Path) -> Result<GroundTruthLog, RecordError> {
    let mut rd = RecordReader::open(path, RecordKind::GroundTruth)?;
    let grid = rd.grid()?;
    let mut rows = Vec::new();
    let mut counters: BTreeMap<u16, usize> = BTreeMap::new();
    rd.for_each(|r| {
        let id = r.sensor()?;
        let t = r.int()?;
        let k = counters.entry(id.0).or_insert(0);
        check_tick(r, &grid, *k, t)?;
        let off = r.float()?;
        let e = TruthEntry { t_local_us: grid.tick_us(*k) + off, orientation: r.quat()?, omega: r.vec3()? };
        *k += 1;
        rows.push((id, e));
        Ok(())
    })?;
    let grouped = group_by_sensor(rows);
    Ok(GroundTruthLog {
        grid,
        sensor_ids: grouped.iter().map(|(s, _)| *s).collect(),
        entries: grouped.into_iter().map(|(_, v)| v).collect(),
    })
}

pub fn write_aligned(path: &Path, a: &AlignedSeries) -> Result<(), RecordError> {
    let mut w = RecordWriter::create(path, &Header::new(RecordKind::Aligned).with_grid(&a.grid))?;
    for (s, id) in a.sensor_ids.iter().enumerate() {
        for k in 0..a.grid.count {
            w.int(id.0 as i64)
                .int(a.grid.tick_us_int(k))
                .int(a.valid[s][k] as i64)
                .quat(&a.orientations[s][k])
                .vec3(&a.gyro[s][k])
                .end()?;
        }
    }
    w.finish()
}

pub fn read_aligned(path: &Path) -> Result<AlignedSeries, RecordError> {
    let mut rd = RecordReader::open(path, RecordKind::Aligned)?;
    let grid = rd.grid()?;
    let mut out = AlignedSeries { grid, sensor_ids: Vec::new(), orientations: Vec::new(), gyro: Vec::new(), valid: Vec::new() };
    rd.for_each(|r| {
        let id = r.sensor()?;
        if out.sensor_ids.last() != Some(&id) {
            if out.sensor_ids.contains(&id) {
                return Err(r.err(format!("sensor {id} rows are not contiguous")));
            }
            out.sensor_ids.push(id);
            out.orientations.push(Vec::with_capacity(grid.count));
            out.gyro.push(Vec::with_capacity(grid.count));
            out.valid.push(Vec::with_capacity(grid.count));
        }
        let s = out.sensor_ids.len() - 1;
        let t = r.int()?;
        check_tick(r, &grid, out.valid[s].len(), t)?;
        out.valid[s].push(r.flag()?);
        out.orientations[s].push(r.quat()?);
        out.gyro[s].push(r.vec3()?);
        Ok(())
    })?;
    if out.valid.iter().any(|v| v.len() != grid.count) {
        return Err(rd.err(rd.line_no, "aligned file is missing ticks".into()));
    }
    Ok(out)
}

pub fn write_hand_frames(path: &Path, f: &HandFrameSeries) -> Result<(), RecordError> {
    let mut w = RecordWriter::create(path, &Header::new(RecordKind::HandFrames).with_grid(&f.grid))?;
    for (s, (id, seg)) in f.sensor_ids.iter().zip(&f.segments).enumerate() {
        let label = seg.label();
        for k in 0..f.grid.count {
            w.int(id.0 as i64).text(&label).int(f.grid.tick_us_int(k)).int(f.valid[s][k] as i64).quat(&f.orientations[s][k]).end()?;
        }
    }
    w.finish()
}

pub fn read_hand_frames(path: &Path) -> Result<HandFrameSeries, RecordError> {
    let mut rd = RecordReader::open(path, RecordKind::HandFrames)?;
    let grid = rd.grid()?;
    let mut out = HandFrameSeries { grid, sensor_ids: Vec::new(), segments: Vec::new(), orientations: Vec::new(), valid: Vec::new() };
    rd.for_each(|r| {
        let id = r.sensor()?;
        let label = r.text()?;
        if out.sensor_ids.last() != Some(&id) {
            if out.sensor_ids.contains(&id) {
                return Err(r.err(format!("sensor {id} rows are not contiguous")));
            }
            let seg = Segment::parse(label).ok_or_else(|| r.err(format!("unknown segment `{label}`")))?;
            out.sensor_ids.push(id);
            out.segments.push(seg);
            out.orientations.push(Vec::with_capacity(grid.count));
            out.valid.push(Vec::with_capacity(grid.count));
        }
        let s = out.sensor_ids.len() - 1;
        let t = r.int()?;
        check_tick(r, &grid, out.valid[s].len(), t)?;
        out.valid[s].push(r.flag()?);
        out.orientations[s].push(r.quat()?);
        Ok(())
    })?;
    if out.valid.iter().any(|v| v.len() != grid.count) {
        return Err(rd.err(rd.line_no, "hand-frame file is missing ticks".into()));
    }
    Ok(out)
}

pub fn write_drift(path: &Path, report: &DriftReport) -> Result<(), RecordError> {
    let mut w = RecordWriter::create(path, &Header::new(RecordKind::Drift))?;
    for s in &report.sensors {
        for (t, off) in &s.offsets {
            w.int(s.sensor_id.0 as i64).float(*t).float(*off).end()?;
        }
    }
    w.finish()
}

/// Offset trajectories per sensor.
pub fn read_drift(path: &Path) -> Result<Vec<(SensorId, Vec<(f64, f64)>)>, RecordError> {
    let mut rd = RecordReader::open(path, RecordKind::Drift)?;
    let mut rows = Vec::new();
    rd.for_each(|r| {
        rows.push((r.sensor()?, (r.float()?, r.float()?)));
        Ok(())
    })?;
    Ok(group_by_sensor(rows))
}

pub fn write_spectrum(path: &Path, p: &BandEnergyProfile, window: usize, hop: usize) -> Result<(), RecordError> {
    let header = Header::new(RecordKind::Spectrum).with("f_min_hz", fmt_f64(p.f_min)).with("window", window).with("hop", hop);
    let mut w = RecordWriter::create(path, &header)?;
    for (f, t) in p.frame_times.iter().enumerate() {
        for (label, row) in p.labels.iter().zip(&p.energy) {
            if let Some(e) = row.get(f) {
                w.float(*t).text(label).float(*e).end()?;
            }
        }
    }
    w.finish()
}

pub fn read_spectrum(path: &Path) -> Result<BandEnergyProfile, RecordError> {
    let mut rd = RecordReader::open(path, RecordKind::Spectrum)?;
    let f_min = rd.meta("f_min_hz")?;
    let mut out = BandEnergyProfile { f_min, frame_times: Vec::new(), labels: Vec::new(), energy: Vec::new() };
    rd.for_each(|r| {
        let t = r.float()?;
        let label = r.text()?;
        let e = r.float()?;
        if out.frame_times.last().map(|x| x.to_bits()) != Some(t.to_bits()) {
            out.frame_times.push(t);
        }
        let f = out.frame_times.len() - 1;
        let i = match out.labels.iter().position(|l| l == label) {
            Some(i) => i,
            None => {
                out.labels.push(label.to_string());
                out.energy.push(Vec::new());
                out.labels.len() - 1
            }
        };
        if out.energy[i].len() != f {
            return Err(r.err(format!("segment `{label}` has a gap before frame {f}")));
        }
        out.energy[i].push(e);
        Ok(())
    })?;
    Ok(out)
}

/// `(frame_time_s, per-finger wrist-frame targets)`.
pub type TargetFrame = (f64, Vec<Vec3>);

pub fn write_targets(path: &Path, frames: &[TargetFrame]) -> Result<(), RecordError> {
    let mut w = RecordWriter::create(path, &Header::new(RecordKind::Targets))?;
    for (t, pts) in frames {
        for (i, p) in pts.iter().enumerate() {
            w.float(*t).int(i as i64).vec3(p).end()?;
        }
    }
    w.finish()
}

pub fn read_targets(path: &Path) -> Result<Vec<TargetFrame>, RecordError> {
    let mut rd = RecordReader::open(path, RecordKind::Targets)?;
    let mut out: Vec<TargetFrame> = Vec::new();
    rd.for_each(|r| {
        let t = r.float()?;
        let i = r.uint()? as usize;
        let p = r.vec3()?;
        match out.last_mut() {
            Some((lt, pts)) if lt.to_bits() == t.to_bits() => {
                if i != pts.len() {
                    return Err(r.err(format!("finger index {i} out of order")));
                }
                pts.push(p);
            }
            _ => {
                if i != 0 {
                    return Err(r.err("each frame must start at finger 0".into()));
                }
                out.push((t, vec![p]));
            }
        }
        Ok(())
    })?;
    Ok(out)
}

/// `(frame_time_s, joint values)`.
pub type JointFrame = (f64, Vec<f64>);

pub fn write_joints(path: &Path, names: &[&str], frames: &[JointFrame]) -> Result<(), RecordError> {
    let mut w = RecordWriter::create(path, &Header::new(RecordKind::Joints))?;
    for (t, q) in frames {
        for (i, (name, v)) in names.iter().zip(q).enumerate() {
            w.float(*t).int(i as i64).text(name).float(*v).end()?;
        }
    }
    w.finish()
}

pub fn read_joints(path: &Path) -> Result<(Vec<String>, Vec<JointFrame>), RecordError> {
    let mut rd = RecordReader::open(path, RecordKind::Joints)?;
    let mut names: Vec<String> = Vec::new();
    let mut out: Vec<JointFrame> = Vec::new();
    rd.for_each(|r| {
        let t = r.float()?;
        let i = r.uint()? as usize;
        let name = r.text()?;
        let v = r.float()?;
        if i == 0 {
            out.push((t, Vec::new()));
        }
        let (ft, q) = out.last_mut().ok_or_else(|| r.err("each frame must start at joint 0".into()))?;
        if ft.to_bits() != t.to_bits() || q.len() != i {
            return Err(r.err(format!("joint index {i} out of order")));
        }
        if out.len() == 1 {
            names.push(name.to_string());
        } else if names.get(i).map(String::as_str) != Some(name) {
            return Err(r.err(format!("joint `{name}` does not match the first frame")));
        }
        out.last_mut().map(|(_, q)| q.push(v));
        Ok(())
    })?;
    Ok((names, out))
}

pub fn write_calibration(path: &Path, cal: &SpatialCalibration) -> Result<(), RecordError> {
    let mut w = RecordWriter::create(path, &Header::new(RecordKind::Calibration))?;
    for c in &cal.sensors {
        w.int(c.sensor_id.0 as i64).float(c.theta);
        for r in 0..3 {
            for col in 0..3 {
                w.float(c.r_i_h.at(r, col));
            }
        }
        w.end()?;
    }
    w.finish()
}

pub fn read_calibration(path: &Path) -> Result<SpatialCalibration, RecordError> {
    let mut rd = RecordReader::open(path, RecordKind::Calibration)?;
    let mut sensors = Vec::new();
    rd.for_each(|r| {
        let id = r.sensor()?;
        let theta = r.float()?;
        let mut m = [0.0; 9];
        for v in &mut m {
            *v = r.float()?;
        }
        let rot = RotationMatrix::from_rows([[m[0], m[1], m[2]], [m[3], m[4], m[5]], [m[6], m[7], m[8]]]).map_err(|e| r.err(format!("R_I_H: {e}")))?;
        sensors.push(SensorCalibration::new(id, theta, rot));
        Ok(())
    })?;
    Ok(SpatialCalibration { sensors })
}
