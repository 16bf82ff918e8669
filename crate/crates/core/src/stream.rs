//! Recording ingest, label grouping, window extraction and smoothed
//! real-time classification.

use std::collections::VecDeque;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gesture::{
    Classifier, FeatureWindow, GestureClass, LabeledWindow, NUM_CLASSES, STREAM_FEATURES,
    WINDOW_LEN,
};
use crate::kinematics::{DeviceId, FEATURES_PER_DEVICE};

/// Kinematic columns in a recording row (four devices).
pub const KINEMATIC_COLUMNS: usize = 4 * FEATURES_PER_DEVICE;
/// Kinematic columns plus the gesture label.
pub const RECORDING_COLUMNS: usize = KINEMATIC_COLUMNS + 1;
pub const EMA_WINDOW: usize = 10;
pub const EMIT_THRESHOLD: f64 = 0.8;
pub const DEFAULT_STRIDE: usize = 5;

const FEATURE_NAMES: [&str; FEATURES_PER_DEVICE] = [
    "pos_x", "pos_y", "pos_z", "rot_00", "rot_01", "rot_02", "rot_10", "rot_11", "rot_12",
    "rot_20", "rot_21", "rot_22", "vel_x", "vel_y", "vel_z", "angvel_x", "angvel_y", "angvel_z",
    "gripper",
];
const LABEL_COLUMN: &str = "gesture";

/// Original fine-grained gesture code, `G1` through `G15`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct RawGestureLabel(u8);

impl RawGestureLabel {
    pub const MAX: u8 = 15;

    pub fn new(n: u8) -> Result<Self> {
        if (1..=Self::MAX).contains(&n) {
            Ok(Self(n))
        } else {
            Err(Error::Config(format!("gesture code G{n} out of range")))
        }
    }

    pub fn number(self) -> u8 {
        self.0
    }
}

impl fmt::Display for RawGestureLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "G{}", self.0)
    }
}

impl FromStr for RawGestureLabel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let digits = s
            .strip_prefix('G')
            .ok_or_else(|| Error::Config(format!("bad gesture label {s:?}")))?;
        let n = digits
            .parse::<u8>()
            .map_err(|_| Error::Config(format!("bad gesture label {s:?}")))?;
        Self::new(n)
    }
}

impl TryFrom<String> for RawGestureLabel {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<RawGestureLabel> for String {
    fn from(l: RawGestureLabel) -> String {
        l.to_string()
    }
}

/// The two ways of folding raw gestures into the five surgeme classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum LabelStrategy {
    /// Only the core gesture of each surgeme keeps its class.
    Narrow = 1,
    /// Auxiliary gestures join the surgeme they support.
    Broad = 2,
}

impl LabelStrategy {
    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn from_id(id: u8) -> Result<Self> {
        match id {
            1 => Ok(Self::Narrow),
            2 => Ok(Self::Broad),
            _ => Err(Error::Config(format!("unknown label strategy {id}"))),
        }
    }

    pub fn map(self, raw: RawGestureLabel) -> GestureClass {
        use GestureClass::*;
        match (self, raw.0) {
            (_, 2) => Positioning,
            (_, 3) => Push,
            (_, 6) => Pull,
            (_, 4) => Handoff,
            (Self::Broad, 5) => Positioning,
            (Self::Broad, 10) => Pull,
            (Self::Broad, 8) => Handoff,
            _ => Other,
        }
    }
}

impl TryFrom<u8> for LabelStrategy {
    type Error = Error;
    fn try_from(id: u8) -> Result<Self> {
        Self::from_id(id)
    }
}

impl std::str::FromStr for LabelStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "1" | "narrow" => Ok(Self::Narrow),
            "2" | "broad" => Ok(Self::Broad),
            _ => Err(Error::Config(format!("unknown label strategy {s:?}"))),
        }
    }
}

impl From<LabelStrategy> for u8 {
    fn from(s: LabelStrategy) -> u8 {
        s.id()
    }
}

/// One 20 Hz frame across all four devices.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordingRow {
    pub kinematics: [f64; KINEMATIC_COLUMNS],
    pub label: RawGestureLabel,
}

impl RecordingRow {
    pub fn device(&self, d: DeviceId) -> &[f64] {
        let i = DeviceId::ALL.iter().position(|&x| x == d).expect("known device");
        &self.kinematics[i * FEATURES_PER_DEVICE..(i + 1) * FEATURES_PER_DEVICE]
    }

    /// Linear velocity, angular velocity and gripper angle of each device.
    pub fn streaming_features(&self) -> [f64; STREAM_FEATURES] {
        let mut out = [0.0; STREAM_FEATURES];
        for (i, chunk) in self.kinematics.chunks_exact(FEATURES_PER_DEVICE).enumerate() {
            out[i * 7..(i + 1) * 7].copy_from_slice(&chunk[12..19]);
        }
        out
    }
}

pub fn recording_header() -> Vec<String> {
    let mut h = Vec::with_capacity(RECORDING_COLUMNS);
    for d in DeviceId::ALL {
        for f in FEATURE_NAMES {
            h.push(format!("{}_{}", d.name(), f));
        }
    }
    h.push(LABEL_COLUMN.to_string());
    h
}

/// Parses a recording. Row indices in errors count data rows from 0.
pub fn load_recording<R: Read>(source: R) -> Result<Vec<RecordingRow>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(source);
    let mut records = rdr.records();
    match records.next() {
        None => return Ok(Vec::new()),
        Some(header) => {
            let header = header.map_err(|e| Error::Parse {
                row: 0,
                message: e.to_string(),
            })?;
            if header.len() != RECORDING_COLUMNS {
                return Err(Error::Parse {
                    row: 0,
                    message: format!("header has {} columns, expected {RECORDING_COLUMNS}", header.len()),
                });
            }
        }
    }
    let mut rows = Vec::new();
    for (row, rec) in records.enumerate() {
        let rec = rec.map_err(|e| Error::Parse {
            row,
            message: e.to_string(),
        })?;
        if rec.len() != RECORDING_COLUMNS {
            return Err(Error::Parse {
                row,
                message: format!("{} columns, expected {RECORDING_COLUMNS}", rec.len()),
            });
        }
        let mut kinematics = [0.0; KINEMATIC_COLUMNS];
        for (col, (dst, field)) in kinematics.iter_mut().zip(rec.iter()).enumerate() {
            *dst = field.trim().parse().map_err(|_| Error::Parse {
                row,
                message: format!("column {col}: not a number: {field:?}"),
            })?;
        }
        let label = rec[KINEMATIC_COLUMNS].trim().parse().map_err(|e: Error| Error::Parse {
            row,
            message: e.to_string(),
        })?;
        rows.push(RecordingRow { kinematics, label });
    }
    Ok(rows)
}

pub fn load_recording_file(path: &Path) -> Result<Vec<RecordingRow>> {
    load_recording(std::fs::File::open(path)?)
}

/// Writes the header and rows. Floats use shortest round-trip formatting.
pub fn write_recording<W: Write>(sink: W, rows: &[RecordingRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(recording_header()).map_err(csv_err)?;
    let mut fields = Vec::with_capacity(RECORDING_COLUMNS);
    for r in rows {
        fields.clear();
        fields.extend(r.kinematics.iter().map(|v| v.to_string()));
        fields.push(r.label.to_string());
        w.write_record(&fields).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_recording_file(path: &Path, rows: &[RecordingRow]) -> Result<()> {
    write_recording(std::io::BufWriter::new(std::fs::File::create(path)?), rows)
}

/// A row reduced to what the classifier sees, with its grouped label.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassifiedRow {
    pub features: [f64; STREAM_FEATURES],
    pub label: GestureClass,
}

pub fn apply_strategy(rows: &[RecordingRow], strategy: LabelStrategy) -> Vec<ClassifiedRow> {
    rows.iter()
        .map(|r| ClassifiedRow {
            features: r.streaming_features(),
            label: strategy.map(r.label),
        })
        .collect()
}

/// Number of windows `extract_windows` yields for `rows` rows.
pub fn window_count(rows: usize, stride: usize) -> usize {
    if rows < WINDOW_LEN || stride == 0 {
        0
    } else {
        (rows - WINDOW_LEN) / stride + 1
    }
}

/// Sliding 60-row windows from one recording, labelled by their last row.
pub fn extract_windows(
    rows: &[ClassifiedRow],
    stride: usize,
    recording: usize,
) -> Result<Vec<LabeledWindow>> {
    if stride == 0 {
        return Err(Error::Config("window stride must be positive".into()));
    }
    let n = window_count(rows.len(), stride);
    let mut out = Vec::with_capacity(n);
    for w in 0..n {
        let start = w * stride;
        let slice = &rows[start..start + WINDOW_LEN];
        let data = Array2::from_shape_fn((WINDOW_LEN, STREAM_FEATURES), |(t, f)| slice[t].features[f]);
        out.push(LabeledWindow {
            window: FeatureWindow::new(data)?,
            label: slice[WINDOW_LEN - 1].label,
            recording,
        });
    }
    Ok(out)
}

/// Exponentially weighted mean of probability vectors, oldest first.
///
/// The newest vector has weight 1, the one before `1 - gamma`, and so on;
/// weights are renormalized over however many vectors are present.
pub fn ema<'a, I>(history: I, gamma: f64) -> Option<[f64; NUM_CLASSES]>
where
    I: IntoIterator<Item = &'a [f64; NUM_CLASSES]>,
    I::IntoIter: DoubleEndedIterator,
{
    let decay = 1.0 - gamma;
    let mut acc = [0.0; NUM_CLASSES];
    let mut total = 0.0;
    let mut w = 1.0;
    for p in history.into_iter().rev() {
        for (a, v) in acc.iter_mut().zip(p) {
            *a += w * v;
        }
        total += w;
        w *= decay;
    }
    if total == 0.0 {
        return None;
    }
    for a in &mut acc {
        *a /= total;
    }
    Some(acc)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StreamConfig {
    pub ema_window: usize,
    pub threshold: f64,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            ema_window: EMA_WINDOW,
            threshold: EMIT_THRESHOLD,
        }
    }
}

impl StreamConfig {
    pub fn gamma(&self) -> f64 {
        2.0 / (self.ema_window as f64 + 1.0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.ema_window == 0 {
            return Err(Error::Config("ema_window must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config("threshold must be in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StreamOutput {
    pub emitted: GestureClass,
    /// Smoothed probabilities; `None` until the window buffer has filled.
    pub averaged: Option<[f64; NUM_CLASSES]>,
}

/// Per-session classifier state.
#[derive(Debug, Clone)]
pub struct StreamState {
    config: StreamConfig,
    rows: VecDeque<[f64; STREAM_FEATURES]>,
    probs: VecDeque<[f64; NUM_CLASSES]>,
    emitted: GestureClass,
}

impl StreamState {
    pub fn new(config: StreamConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            rows: VecDeque::with_capacity(WINDOW_LEN),
            probs: VecDeque::with_capacity(config.ema_window),
            emitted: GestureClass::Other,
        })
    }

    pub fn config(&self) -> &StreamConfig {
        &self.config
    }

    pub fn emitted(&self) -> GestureClass {
        self.emitted
    }

    pub fn buffered_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn buffered_probabilities(&self) -> impl Iterator<Item = &[f64; NUM_CLASSES]> {
        self.probs.iter()
    }

    pub fn window(&self) -> Option<FeatureWindow> {
        if self.rows.len() < WINDOW_LEN {
            return None;
        }
        let data = Array2::from_shape_fn((WINDOW_LEN, STREAM_FEATURES), |(t, f)| self.rows[t][f]);
        FeatureWindow::new(data).ok()
    }

    /// Feeds one probability vector directly, bypassing the window buffer.
    pub fn push_probabilities(&mut self, p: [f64; NUM_CLASSES]) -> StreamOutput {
        if p.iter().any(|v| !v.is_finite()) {
            return StreamOutput {
                emitted: self.emitted,
                averaged: None,
            };
        }
        if self.probs.len() == self.config.ema_window {
            self.probs.pop_front();
        }
        self.probs.push_back(p);
        let averaged = ema(self.probs.iter(), self.config.gamma()).expect("buffer not empty");
        let (best, prob) = GestureClass::argmax(&averaged);
        if prob >= self.config.threshold {
            self.emitted = best;
        }
        StreamOutput {
            emitted: self.emitted,
            averaged: Some(averaged),
        }
    }

    /// Appends one row of streaming features and classifies the current
    /// window once 60 rows are buffered. Rows with non-finite values and
    /// classifier failures leave the emitted class unchanged.
    pub fn step<C: Classifier + ?Sized>(
        &mut self,
        row: &[f64; STREAM_FEATURES],
        model: &C,
    ) -> StreamOutput {
        let retained = StreamOutput {
            emitted: self.emitted,
            averaged: None,
        };
        if row.iter().any(|v| !v.is_finite()) {
            return retained;
        }
        if self.rows.len() == WINDOW_LEN {
            self.rows.pop_front();
        }
        self.rows.push_back(*row);
        let Some(window) = self.window() else {
            return retained;
        };
        match model.predict(window.view()) {
            Ok(p) => self.push_probabilities(p),
            Err(_) => retained,
        }
    }
}

/// Replays a whole stream of rows, returning the emitted class per row.
pub fn stream_replay<C: Classifier + ?Sized>(
    rows: &[[f64; STREAM_FEATURES]],
    model: &C,
    config: StreamConfig,
) -> Result<Vec<GestureClass>> {
    let mut s = StreamState::new(config)?;
    Ok(rows.iter().map(|r| s.step(r, model).emitted).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::ArrayView2;
    use proptest::prelude::*;

    fn raw(n: u8) -> RawGestureLabel {
        RawGestureLabel::new(n).unwrap()
    }

    fn one_hot(c: GestureClass) -> [f64; NUM_CLASSES] {
        let mut p = [0.0; NUM_CLASSES];
        p[c.code()] = 1.0;
        p
    }

    fn synthetic_row(i: usize, label: u8) -> RecordingRow {
        let mut kinematics = [0.0; KINEMATIC_COLUMNS];
        for (j, v) in kinematics.iter_mut().enumerate() {
            *v = ((i * 31 + j * 7) as f64 * 0.013).sin() / 3.0;
        }
        RecordingRow {
            kinematics,
            label: raw(label),
        }
    }

    #[test]
    fn table_mappings() {
        use GestureClass::*;
        let s1 = LabelStrategy::Narrow;
        let s2 = LabelStrategy::Broad;
        assert_eq!(s1.map(raw(2)), Positioning);
        assert_eq!(s1.map(raw(5)), Other);
        assert_eq!(s2.map(raw(5)), Positioning);
        assert_eq!(s1.map(raw(3)), Push);
        assert_eq!(s2.map(raw(3)), Push);
        let s1_expect = [
            (1, Other), (2, Positioning), (3, Push), (4, Handoff), (5, Other), (6, Pull),
            (8, Other), (9, Other), (10, Other), (11, Other),
        ];
        let s2_expect = [
            (1, Other), (2, Positioning), (3, Push), (4, Handoff), (5, Positioning), (6, Pull),
            (8, Handoff), (9, Other), (10, Pull), (11, Other),
        ];
        for (g, c) in s1_expect {
            assert_eq!(s1.map(raw(g)), c, "G{g}");
        }
        for (g, c) in s2_expect {
            assert_eq!(s2.map(raw(g)), c, "G{g}");
        }
    }

    #[test]
    fn raw_label_parsing() {
        assert_eq!("G11".parse::<RawGestureLabel>().unwrap().number(), 11);
        assert!("G0".parse::<RawGestureLabel>().is_err());
        assert!("G16".parse::<RawGestureLabel>().is_err());
        assert!("3".parse::<RawGestureLabel>().is_err());
        assert_eq!(raw(7).to_string(), "G7");
    }

    #[test]
    fn header_has_77_names_in_device_order() {
        let h = recording_header();
        assert_eq!(h.len(), RECORDING_COLUMNS);
        assert_eq!(h.len(), 77);
        assert_eq!(h[0], "PSM1_pos_x");
        assert_eq!(h[19], "PSM2_pos_x");
        assert_eq!(h[38], "SIGMA_R_pos_x");
        assert_eq!(h[57], "SIGMA_L_pos_x");
        assert_eq!(h[76], "gesture");
    }

    #[test]
    fn empty_source_is_empty_recording() {
        assert!(load_recording("".as_bytes()).unwrap().is_empty());
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut rows: Vec<_> = (0..100).map(|i| synthetic_row(i, [1, 2, 3, 6, 4][i / 20] as u8)).collect();
        rows[3].kinematics[5] = 0.1 + 0.2;
        rows[4].kinematics[0] = f64::MIN_POSITIVE;
        rows[5].kinematics[1] = -1.0e300;
        let mut buf = Vec::new();
        write_recording(&mut buf, &rows).unwrap();
        let back = load_recording(buf.as_slice()).unwrap();
        assert_eq!(back.len(), rows.len());
        for (a, b) in rows.iter().zip(&back) {
            assert_eq!(a.label, b.label);
            for (x, y) in a.kinematics.iter().zip(&b.kinematics) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn parse_errors_carry_row_index() {
        let rows: Vec<_> = (0..3).map(|i| synthetic_row(i, 2)).collect();
        let mut buf = Vec::new();
        write_recording(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        lines[3] = lines[3].replacen(|c: char| c.is_ascii_digit(), "x", 1);
        match load_recording(lines.join("\n").as_bytes()) {
            Err(Error::Parse { row, .. }) => assert_eq!(row, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
        let short = format!("{}\n1,2,3\n", lines[0]);
        assert!(matches!(load_recording(short.as_bytes()), Err(Error::Parse { row: 0, .. })));
    }

    #[test]
    fn streaming_features_pick_twists_and_gripper() {
        let row = synthetic_row(4, 2);
        let f = row.streaming_features();
        for d in 0..4 {
            for k in 0..7 {
                assert_eq!(f[d * 7 + k], row.kinematics[d * 19 + 12 + k]);
            }
        }
    }

    #[test]
    fn window_counts() {
        let rows = |n: usize| apply_strategy(&(0..n).map(|i| synthetic_row(i, 3)).collect::<Vec<_>>(), LabelStrategy::Narrow);
        assert_eq!(extract_windows(&rows(60), 1, 0).unwrap().len(), 1);
        assert_eq!(extract_windows(&rows(61), 1, 0).unwrap().len(), 2);
        assert!(extract_windows(&rows(59), 1, 0).unwrap().is_empty());
        let enumerated = (0..600).step_by(5).filter(|s| s + 60 <= 600).count();
        assert_eq!(enumerated, 109);
        assert_eq!(extract_windows(&rows(600), 5, 0).unwrap().len(), enumerated);
        assert!(extract_windows(&rows(600), 0, 0).is_err());
    }

    #[test]
    fn window_label_is_final_row_label() {
        let recording: Vec<_> = (0..80).map(|i| synthetic_row(i, if i < 70 { 2 } else { 3 })).collect();
        let rows = apply_strategy(&recording, LabelStrategy::Narrow);
        let ws = extract_windows(&rows, 1, 4).unwrap();
        for (start, w) in ws.iter().enumerate() {
            let last = start + 59;
            assert_eq!(w.label, rows[last].label);
            assert_eq!(w.recording, 4);
            assert_eq!(w.window.view()[(59, 0)], rows[last].features[0]);
            assert_eq!(w.window.view()[(0, 27)], rows[start].features[27]);
        }
    }

    struct Fixed([f64; NUM_CLASSES]);
    impl Classifier for Fixed {
        fn predict(&self, _: ArrayView2<'_, f64>) -> Result<[f64; NUM_CLASSES]> {
            Ok(self.0)
        }
    }

    #[test]
    fn emits_other_until_window_fills() {
        let mut s = StreamState::new(StreamConfig::default()).unwrap();
        let model = Fixed(one_hot(GestureClass::Pull));
        for i in 0..WINDOW_LEN {
            let out = s.step(&[0.0; STREAM_FEATURES], &model);
            if i < WINDOW_LEN - 1 {
                assert_eq!(out.emitted, GestureClass::Other);
                assert!(out.averaged.is_none());
            } else {
                assert_eq!(out.emitted, GestureClass::Pull);
            }
        }
        assert_eq!(s.buffered_rows(), WINDOW_LEN);
    }

    #[test]
    fn non_finite_row_is_ignored() {
        let mut s = StreamState::new(StreamConfig::default()).unwrap();
        let model = Fixed(one_hot(GestureClass::Pull));
        let mut bad = [0.0; STREAM_FEATURES];
        bad[3] = f64::NAN;
        s.step(&bad, &model);
        assert_eq!(s.buffered_rows(), 0);
    }

    #[test]
    fn constant_stream_is_fixed_point() {
        let p = [0.1, 0.2, 0.3, 0.15, 0.25];
        let mut s = StreamState::new(StreamConfig::default()).unwrap();
        for _ in 0..25 {
            let avg = s.push_probabilities(p).averaged.unwrap();
            for (a, b) in avg.iter().zip(&p) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn threshold_boundary() {
        let mut s = StreamState::new(StreamConfig::default()).unwrap();
        s.push_probabilities(one_hot(GestureClass::Push));
        assert_eq!(s.emitted(), GestureClass::Push);
        let below = [0.79, 0.21, 0.0, 0.0, 0.0];
        for _ in 0..20 {
            assert_eq!(s.push_probabilities(below).emitted, GestureClass::Push);
        }
        // A single buffered vector averages to itself exactly.
        let mut s = StreamState::new(StreamConfig::default()).unwrap();
        let out = s.push_probabilities([0.0, 0.79, 0.21, 0.0, 0.0]);
        assert_eq!(out.averaged.unwrap()[1], 0.79);
        assert_eq!(out.emitted, GestureClass::Other);
        let mut s = StreamState::new(StreamConfig::default()).unwrap();
        let out = s.push_probabilities([0.0, 0.8, 0.2, 0.0, 0.0]);
        assert_eq!(out.averaged.unwrap()[1], 0.8);
        assert_eq!(out.emitted, GestureClass::Positioning);
    }

    #[test]
    fn alternating_stream_lags_by_replayed_delay() {
        // Hand replay: with r = 1 - 2/11, after n new-class vectors in a full
        // buffer the new class holds (1 - r^n) / (1 - r^10) of the weight.
        // That first reaches 0.8 at n = 6, so the lag is 5 ticks.
        let r: f64 = 9.0 / 11.0;
        let full: f64 = (0..10).map(|a| r.powi(a)).sum();
        let first: usize = (1..=10usize)
            .find(|&n| (0..n as i32).map(|a| r.powi(a)).sum::<f64>() / full >= 0.8)
            .unwrap();
        assert_eq!(first, 6);
        let lag = first - 1;

        let classes = [GestureClass::Push, GestureClass::Pull];
        let mut s = StreamState::new(StreamConfig::default()).unwrap();
        let mut emitted = Vec::new();
        for t in 0..400 {
            emitted.push(s.push_probabilities(one_hot(classes[(t / 40) % 2])).emitted);
        }
        for t in 0..400 {
            let raw_class = classes[(t / 40) % 2];
            let since_switch = t % 40;
            let expected = if t < 40 || since_switch >= lag { raw_class } else { classes[(t / 40 + 1) % 2] };
            assert_eq!(emitted[t], expected, "tick {t}");
        }
    }

    fn prob_vec() -> impl Strategy<Value = [f64; NUM_CLASSES]> {
        prop::array::uniform5(0.0..1.0f64).prop_map(|mut p| {
            let s: f64 = p.iter().sum::<f64>() + 1e-9;
            p.iter_mut().for_each(|v| *v /= s);
            p
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(500))]

        #[test]
        fn ema_is_convex_combination(hist in prop::collection::vec(prob_vec(), 1..=10)) {
            let avg = ema(hist.iter(), 2.0 / 11.0).unwrap();
            for c in 0..NUM_CLASSES {
                let lo = hist.iter().map(|p| p[c]).fold(f64::INFINITY, f64::min);
                let hi = hist.iter().map(|p| p[c]).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(avg[c] >= lo - 1e-12 && avg[c] <= hi + 1e-12);
            }
        }

        #[test]
        fn class_changes_only_above_threshold(stream in prop::collection::vec(prob_vec(), 1..80)) {
            let mut s = StreamState::new(StreamConfig::default()).unwrap();
            let mut prev = s.emitted();
            for p in stream {
                let out = s.push_probabilities(p);
                let avg = out.averaged.unwrap();
                if out.emitted != prev {
                    let (best, prob) = GestureClass::argmax(&avg);
                    prop_assert!(prob >= EMIT_THRESHOLD);
                    prop_assert_eq!(best, out.emitted);
                }
                prev = out.emitted;
            }
        }

        #[test]
        fn strategies_are_total_and_agree_on_core_gestures(n in 1u8..=15) {
            let g = raw(n);
            let a = LabelStrategy::Narrow.map(g);
            let b = LabelStrategy::Broad.map(g);
            if [2, 3, 4, 6].contains(&n) {
                prop_assert_eq!(a, b);
            }
            if a != GestureClass::Other {
                prop_assert_eq!(a, b);
            }
        }
    }
}
