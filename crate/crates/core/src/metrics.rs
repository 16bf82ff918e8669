//! Run metrics derived from a [`SimEventLog`] alone, paired comparisons and
//! report emission.

use std::io::Write;

use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, DiscreteCDF};

use crate::error::{Error, Result};
use crate::gesture::{GestureClass, NUM_CLASSES};
use crate::sim::{Mode, SimEvent, SimEventLog, TickRecord};

/// Undefined statistics travel as JSON `null`.
mod nan_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_nan() {
            s.serialize_none()
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }
}

/// Sample mean and standard deviation (n − 1 denominator).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    #[serde(with = "nan_as_null")]
    pub mean: f64,
    #[serde(with = "nan_as_null")]
    pub std: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self {
                n,
                mean: f64::NAN,
                std: f64::NAN,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self { n, mean, std }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntryTime {
    pub entry: usize,
    /// Seconds from trial start to success, or to the end of the trial.
    pub time: f64,
    pub timed_out: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurgemeTiming {
    pub surgeme: GestureClass,
    /// Contiguous runs of this emitted surgeme.
    pub segments: usize,
    pub duration: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub kind: String,
    pub seed: u64,
    pub mode: Mode,
    pub ticks: usize,
    pub duration: f64,
    pub entry_times: Vec<EntryTime>,
    /// Sum of entry times; `None` without trials.
    pub total_time: Option<f64>,
    pub timeouts: usize,
    pub surgeme_durations: Vec<SurgemeTiming>,
    pub throw_times: Vec<f64>,
    pub throw_time: Summary,
    /// Degrees, over ticks whose emitted surgeme is Push.
    pub push_perpendicularity: Summary,
    /// Frame-wise agreement of emitted and true surgeme.
    #[serde(with = "nan_as_null")]
    pub realtime_accuracy: f64,
    pub rejected_ticks: usize,
    pub stale_ticks: usize,
}

fn tick_seconds(records: &[TickRecord]) -> f64 {
    match records {
        [a, b, ..] => b.time - a.time,
        _ => 0.0,
    }
}

/// Runs of identical emitted surgeme: (class, first index, length).
fn runs(records: &[TickRecord]) -> Vec<(GestureClass, usize, usize)> {
    let mut out: Vec<(GestureClass, usize, usize)> = Vec::new();
    for (i, r) in records.iter().enumerate() {
        match out.last_mut() {
            Some((c, _, n)) if *c == r.emitted_surgeme => *n += 1,
            _ => out.push((r.emitted_surgeme, i, 1)),
        }
    }
    out
}

/// Throws are delimited by emitted Positioning runs that begin a cycle (the
/// first one, or one following Handoff); the last throw closes where the
/// final Handoff run ends. Spans without any Push are dropped.
fn throw_times(records: &[TickRecord], dt: f64) -> Vec<f64> {
    let segs = runs(records);
    let mut bounds = Vec::new();
    let mut seen_positioning = false;
    for (k, &(c, start, _)) in segs.iter().enumerate() {
        if c == GestureClass::Positioning {
            let after_handoff = k > 0 && segs[k - 1].0 == GestureClass::Handoff;
            if !seen_positioning || after_handoff {
                bounds.push(start);
            }
            seen_positioning = true;
        }
    }
    if let Some(&(_, s, n)) = segs.iter().rev().find(|s| s.0 == GestureClass::Handoff) {
        if bounds.last().is_some_and(|&b| s + n > b) {
            bounds.push(s + n);
        }
    }
    bounds.dedup();
    bounds
        .windows(2)
        .filter(|w| records[w[0]..w[1]].iter().any(|r| r.emitted_surgeme == GestureClass::Push))
        .map(|w| (w[1] - w[0]) as f64 * dt)
        .collect()
}

fn entry_times(records: &[TickRecord], dt: f64) -> Vec<EntryTime> {
    let mut open: Option<(usize, u64)> = None;
    let mut out = Vec::new();
    for r in records {
        for e in &r.events {
            match *e {
                SimEvent::TrialStart { entry } => open = Some((entry, r.tick)),
                SimEvent::Reached { entry } | SimEvent::Timeout { entry } => {
                    if let Some((j, t0)) = open.take() {
                        if j == entry {
                            let timed_out = matches!(e, SimEvent::Timeout { .. });
                            let ticks = r.tick - t0 + u64::from(timed_out);
                            out.push(EntryTime {
                                entry,
                                time: ticks as f64 * dt,
                                timed_out,
                            });
                        }
                    }
                }
                _ => {}
            }
        }
    }
    out
}

pub fn compute_metrics(log: &SimEventLog) -> MetricsReport {
    let records = &log.records;
    let dt = tick_seconds(records);
    let entries = entry_times(records, dt);
    let segs = runs(records);
    let surgeme_durations = GestureClass::ALL
        .iter()
        .map(|&c| {
            let d: Vec<f64> = segs.iter().filter(|s| s.0 == c).map(|s| s.2 as f64 * dt).collect();
            SurgemeTiming {
                surgeme: c,
                segments: d.len(),
                duration: Summary::of(&d),
            }
        })
        .collect();
    let throws = throw_times(records, dt);
    let push: Vec<f64> = records
        .iter()
        .filter(|r| r.emitted_surgeme == GestureClass::Push)
        .map(|r| r.perpendicularity)
        .collect();
    let correct = records.iter().filter(|r| r.emitted_surgeme == r.true_surgeme).count();
    MetricsReport {
        kind: log.header.kind.clone(),
        seed: log.header.seed,
        mode: records.first().map_or(Mode::Traditional, |r| r.mode),
        ticks: records.len(),
        duration: records.len() as f64 * dt,
        total_time: (!entries.is_empty()).then(|| entries.iter().map(|e| e.time).sum()),
        timeouts: entries.iter().filter(|e| e.timed_out).count(),
        entry_times: entries,
        surgeme_durations,
        throw_time: Summary::of(&throws),
        throw_times: throws,
        push_perpendicularity: Summary::of(&push),
        realtime_accuracy: if records.is_empty() {
            f64::NAN
        } else {
            correct as f64 / records.len() as f64
        },
        rejected_ticks: records.iter().filter(|r| r.rejected).count(),
        stale_ticks: records.iter().filter(|r| r.flags.stale).count(),
    }
}

/// Exact two-sided sign test: probability under a fair coin of a split at
/// least as uneven as `wins` out of `n`.
pub fn sign_test(wins: usize, n: usize) -> f64 {
    if n == 0 {
        return 1.0;
    }
    let k = wins.min(n - wins) as u64;
    let b = Binomial::new(0.5, n as u64).expect("valid binomial");
    (2.0 * b.cdf(k)).min(1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedComparison {
    pub metric: String,
    pub pairs: usize,
    /// Pairs where the shared-control run scored lower.
    pub ciac_better: usize,
    pub ties: usize,
    pub p_value: f64,
    pub ciac: Summary,
    pub traditional: Summary,
}

impl PairedComparison {
    /// Lower is better. Pairs with a non-finite side are skipped.
    pub fn lower_is_better(metric: &str, pairs: &[(f64, f64)]) -> Self {
        let pairs: Vec<(f64, f64)> =
            pairs.iter().copied().filter(|(c, t)| c.is_finite() && t.is_finite()).collect();
        let better = pairs.iter().filter(|(c, t)| c < t).count();
        let worse = pairs.iter().filter(|(c, t)| c > t).count();
        let ties = pairs.len() - better - worse;
        let c: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let t: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        Self {
            metric: metric.to_string(),
            pairs: pairs.len(),
            ciac_better: better,
            ties,
            p_value: sign_test(better, better + worse),
            ciac: Summary::of(&c),
            traditional: Summary::of(&t),
        }
    }

    /// Shared control better in the majority of pairs at level `alpha`.
    pub fn significant(&self, alpha: f64) -> bool {
        let decided = self.pairs - self.ties;
        2 * self.ciac_better > decided && self.p_value < alpha
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub kind: String,
    pub runs: Vec<MetricsReport>,
    pub comparisons: Vec<PairedComparison>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Table,
    Json,
    Csv,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "table" => Ok(Self::Table),
            "json" => Ok(Self::Json),
            "csv" => Ok(Self::Csv),
            _ => Err(Error::Config(format!("unknown report format {s:?}"))),
        }
    }
}

/// Column order of the per-run CSV.
pub fn csv_header(entries: usize) -> Vec<String> {
    let mut h: Vec<String> = ["kind", "seed", "mode", "ticks", "duration"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for j in 0..entries {
        h.push(format!("entry{j}_time"));
        h.push(format!("entry{j}_timed_out"));
    }
    h.extend(
        [
            "total_time",
            "timeouts",
            "throws",
            "throw_mean",
            "throw_std",
            "push_perp_n",
            "push_perp_mean",
            "push_perp_std",
            "realtime_accuracy",
            "rejected_ticks",
            "stale_ticks",
        ]
        .iter()
        .map(|s| s.to_string()),
    );
    for c in GestureClass::ALL {
        let n = c.name().to_lowercase();
        h.push(format!("{n}_segments"));
        h.push(format!("{n}_mean"));
        h.push(format!("{n}_std"));
    }
    h
}

fn csv_row(r: &MetricsReport, entries: usize) -> Vec<String> {
    let f = |v: f64| v.to_string();
    let mut row = vec![
        r.kind.clone(),
        r.seed.to_string(),
        r.mode.to_string(),
        r.ticks.to_string(),
        f(r.duration),
    ];
    for j in 0..entries {
        match r.entry_times.iter().find(|e| e.entry == j) {
            Some(e) => {
                row.push(f(e.time));
                row.push(e.timed_out.to_string());
            }
            None => {
                row.push(String::new());
                row.push(String::new());
            }
        }
    }
    row.push(r.total_time.map_or(String::new(), f));
    row.push(r.timeouts.to_string());
    row.push(r.throw_times.len().to_string());
    row.push(f(r.throw_time.mean));
    row.push(f(r.throw_time.std));
    row.push(r.push_perpendicularity.n.to_string());
    row.push(f(r.push_perpendicularity.mean));
    row.push(f(r.push_perpendicularity.std));
    row.push(f(r.realtime_accuracy));
    row.push(r.rejected_ticks.to_string());
    row.push(r.stale_ticks.to_string());
    for s in &r.surgeme_durations {
        row.push(s.segments.to_string());
        row.push(f(s.duration.mean));
        row.push(f(s.duration.std));
    }
    row
}

fn fmt_summary(s: &Summary) -> String {
    if s.n == 0 {
        "-".into()
    } else {
        format!("{:.2} ± {:.2}", s.mean, s.std)
    }
}

fn write_table<W: Write>(report: &ExperimentReport, mut w: W) -> Result<()> {
    writeln!(w, "{} ({} runs)", report.kind, report.runs.len())?;
    writeln!(
        w,
        "{:<8} {:<12} {:>8} {:>10} {:>9} {:>16} {:>16} {:>9}",
        "seed", "mode", "ticks", "total[s]", "timeouts", "throw[s]", "push perp[deg]", "rt acc"
    )?;
    for r in &report.runs {
        writeln!(
            w,
            "{:<8} {:<12} {:>8} {:>10} {:>9} {:>16} {:>16} {:>9.3}",
            r.seed,
            r.mode.to_string(),
            r.ticks,
            r.total_time.map_or("-".into(), |t| format!("{t:.2}")),
            r.timeouts,
            fmt_summary(&r.throw_time),
            fmt_summary(&r.push_perpendicularity),
            r.realtime_accuracy
        )?;
    }
    if !report.comparisons.is_empty() {
        writeln!(w)?;
        writeln!(
            w,
            "{:<22} {:>6} {:>7} {:>5} {:>18} {:>18} {:>10}",
            "metric", "pairs", "better", "ties", "CIAC", "TRADITIONAL", "p"
        )?;
        for c in &report.comparisons {
            writeln!(
                w,
                "{:<22} {:>6} {:>7} {:>5} {:>18} {:>18} {:>10.3e}",
                c.metric,
                c.pairs,
                c.ciac_better,
                c.ties,
                fmt_summary(&c.ciac),
                fmt_summary(&c.traditional),
                c.p_value
            )?;
        }
    }
    Ok(())
}

/// Writes `report` in `format`. CSV holds one row per run.
pub fn emit_report<W: Write>(report: &ExperimentReport, format: ReportFormat, mut w: W) -> Result<()> {
    match format {
        ReportFormat::Json => {
            serde_json::to_writer_pretty(&mut w, report)?;
            writeln!(w)?;
        }
        ReportFormat::Table => write_table(report, w)?,
        ReportFormat::Csv => {
            let entries = report.runs.iter().map(|r| r.entry_times.len()).max().unwrap_or(0);
            let mut cw = csv::Writer::from_writer(w);
            cw.write_record(csv_header(entries))?;
            for r in &report.runs {
                cw.write_record(csv_row(r, entries))?;
            }
            cw.flush()?;
        }
    }
    Ok(())
}

/// Writes `report.{txt,json,csv}` into `dir`.
pub fn emit_report_files(report: &ExperimentReport, dir: &std::path::Path, stem: &str) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (fmt, ext) in [
        (ReportFormat::Table, "txt"),
        (ReportFormat::Json, "json"),
        (ReportFormat::Csv, "csv"),
    ] {
        let f = std::fs::File::create(dir.join(format!("{stem}.{ext}")))?;
        emit_report(report, fmt, std::io::BufWriter::new(f))?;
    }
    Ok(())
}

/// Per-class frame counts of a confusion between true and emitted surgemes.
pub fn realtime_confusion(log: &SimEventLog) -> [[u64; NUM_CLASSES]; NUM_CLASSES] {
    let mut m = [[0u64; NUM_CLASSES]; NUM_CLASSES];
    for r in &log.records {
        m[r.true_surgeme.code()][r.emitted_surgeme.code()] += 1;
    }
    m
}
