//! Scripted experiments: dataset generation, paired target reaching and
//! suturing runs, model evaluation and log replay.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gesture::{
    confusion, load_checkpoint, Classifier, ConfusionMatrix, LabeledWindow, ModelParams,
};
use crate::metrics::{compute_metrics, ExperimentReport, MetricsReport, PairedComparison};
use crate::operator::{reach_script, suture_script, ReachProfile, SutureProfile};
use crate::sim::{LogHeader, Mode, OcclusionConfig, SimEventLog};
use crate::stream::{
    apply_strategy, extract_windows, load_recording_file, write_recording_file, LabelStrategy,
    RecordingRow,
};
use crate::teleop::{IntentSource, LambdaSource};
use crate::world::{FrameInput, SurgemeSource, World, WorldConfig};

/// Everything needed to regenerate a run; stored in the log header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RunSpec {
    Reach {
        world: WorldConfig,
        profile: ReachProfile,
        seed: u64,
    },
    Suture {
        world: WorldConfig,
        profile: SutureProfile,
        throws: usize,
        seed: u64,
        /// Classifier checkpoint; ground-truth surgemes when absent.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        model: Option<PathBuf>,
    },
    /// Interactive session; the recorded inputs drive replay.
    Session {
        world: WorldConfig,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        inputs: Option<PathBuf>,
    },
}

impl RunSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Reach { .. } => "reach",
            Self::Suture { .. } => "suture",
            Self::Session { .. } => "session",
        }
    }

    pub fn seed(&self) -> u64 {
        match self {
            Self::Reach { seed, .. } | Self::Suture { seed, .. } => *seed,
            Self::Session { world, .. } => world.seed,
        }
    }

    pub fn world(&self) -> &WorldConfig {
        match self {
            Self::Reach { world, .. } | Self::Suture { world, .. } | Self::Session { world, .. } => world,
        }
    }

    pub fn header(&self) -> Result<LogHeader> {
        Ok(LogHeader::new(self.kind(), self.seed(), serde_json::to_value(self)?))
    }

    /// Operator input stream of the run.
    pub fn frames(&self) -> Result<Vec<FrameInput>> {
        match self {
            Self::Reach { world, profile, seed } => reach_script(world, profile, *seed),
            Self::Suture {
                world,
                profile,
                throws,
                seed,
                ..
            } => Ok(suture_script(world, profile, *throws, *seed)?.frames),
            Self::Session { inputs: Some(path), .. } => read_inputs(path),
            Self::Session { inputs: None, .. } => {
                Err(Error::Config("session run has no recorded inputs".into()))
            }
        }
    }

    /// Surgeme source, loading the checkpoint if one is named.
    pub fn source(&self) -> Result<SurgemeSource> {
        match self {
            Self::Suture {
                model: Some(path),
                world,
                ..
            } => SurgemeSource::model(Arc::new(load_checkpoint(path)?), world.stream),
            _ => Ok(SurgemeSource::Oracle),
        }
    }
}

/// Feeds `frames` through a fresh world.
pub fn simulate(spec: &RunSpec, frames: &[FrameInput], source: SurgemeSource) -> Result<SimEventLog> {
    let mut world = World::new(*spec.world(), source, spec.header()?)?;
    world.run(frames)?;
    Ok(world.into_log())
}

/// Writes one input frame per line.
pub fn write_inputs(path: &Path, frames: &[FrameInput]) -> Result<()> {
    use std::io::Write;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for f in frames {
        serde_json::to_writer(&mut w, f)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_inputs(path: &Path) -> Result<Vec<FrameInput>> {
    use std::io::BufRead;
    let r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Mixes a base seed with an index.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base ^ index.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

// ---------------------------------------------------------------------------
// Dataset

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    pub world: WorldConfig,
    pub profile: SutureProfile,
    pub recordings: usize,
    pub throws: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        let mut world = WorldConfig::default();
        world.pipeline.mode = Mode::Traditional;
        world.sim.occlusion = OcclusionConfig::none();
        Self {
            world,
            profile: SutureProfile::default(),
            recordings: 10,
            throws: 4,
            seed: 2024,
        }
    }
}

/// Recordings of the scripted suturing operator under direct teleoperation,
/// labeled with raw gesture codes.
pub fn gen_dataset(spec: &DatasetSpec) -> Result<Vec<Vec<RecordingRow>>> {
    if spec.throws == 0 || spec.recordings == 0 {
        return Err(Error::Config("recordings and throws must be positive".into()));
    }
    (0..spec.recordings)
        .into_par_iter()
        .map(|r| {
            let seed = derive_seed(spec.seed, r as u64);
            let frames = suture_script(&spec.world, &spec.profile, spec.throws, seed)?.frames;
            let mut world = spec.world;
            world.seed = seed;
            let header = LogHeader::new("dataset", seed, serde_json::Value::Null);
            World::new(world, SurgemeSource::Oracle, header)?.run(&frames)
        })
        .collect()
}

pub fn recording_path(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("recording_{index:02}.csv"))
}

pub fn write_dataset(dir: &Path, recordings: &[Vec<RecordingRow>]) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    recordings
        .iter()
        .enumerate()
        .map(|(i, rows)| {
            let p = recording_path(dir, i);
            write_recording_file(&p, rows)?;
            Ok(p)
        })
        .collect()
}

/// Loads `recording_NN.csv` files in index order.
pub fn load_dataset(dir: &Path) -> Result<Vec<Vec<RecordingRow>>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("recording_") && n.ends_with(".csv"))
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Dataset(format!("no recordings in {}", dir.display())));
    }
    paths.iter().map(|p| load_recording_file(p)).collect()
}

/// Windows from every recording, tagged with the recording index.
pub fn dataset_windows(
    recordings: &[Vec<RecordingRow>],
    strategy: LabelStrategy,
    stride: usize,
) -> Result<Vec<LabeledWindow>> {
    let mut out = Vec::new();
    for (i, rows) in recordings.iter().enumerate() {
        out.extend(extract_windows(&apply_strategy(rows, strategy), stride, i)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub strategy: LabelStrategy,
    pub windows: usize,
    pub accuracy: f64,
    pub confusion: ConfusionMatrix,
}

/// Frame-wise confusion of `model` over every full window (stride 1 gives
/// one prediction per frame once the window has filled).
pub fn evaluate_model<C: Classifier + ?Sized>(
    model: &C,
    recordings: &[Vec<RecordingRow>],
    strategy: LabelStrategy,
    stride: usize,
) -> Result<Evaluation> {
    let windows = dataset_windows(recordings, strategy, stride)?;
    if windows.is_empty() {
        return Err(Error::Dataset("no evaluation windows".into()));
    }
    let cm = confusion(model, &windows)?;
    Ok(Evaluation {
        strategy,
        windows: windows.len(),
        accuracy: cm.accuracy(),
        confusion: cm,
    })
}

// ---------------------------------------------------------------------------
// Paired experiments

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentSpec {
    pub world: WorldConfig,
    pub lambda: LambdaSource,
    pub intent: IntentSource,
    pub seeds: Vec<u64>,
    pub modes: Vec<Mode>,
    pub reach: ReachProfile,
    pub suture: SutureProfile,
    pub throws: usize,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            world: WorldConfig::default(),
            lambda: LambdaSource::Bayes,
            intent: IntentSource::Estimated,
            seeds: (0..20).collect(),
            modes: vec![Mode::Traditional, Mode::Ciac],
            reach: ReachProfile::default(),
            suture: SutureProfile::default(),
            throws: 4,
        }
    }
}

impl ExperimentSpec {
    /// Reaching defaults: linear ramp over 2 s, no occlusion.
    pub fn reaching() -> Self {
        let mut s = Self {
            lambda: LambdaSource::LinearRamp { duration: 2.0 },
            ..Self::default()
        };
        s.world.sim.occlusion = OcclusionConfig::none();
        s
    }

    pub fn suturing() -> Self {
        Self::default()
    }

    fn world_for(&self, mode: Mode, seed: u64) -> WorldConfig {
        let mut w = self.world;
        w.pipeline.mode = mode;
        w.pipeline.lambda = self.lambda;
        w.pipeline.intent = self.intent;
        w.seed = seed;
        w
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() || self.modes.is_empty() {
            return Err(Error::Config("seeds and modes must be non-empty".into()));
        }
        self.world_for(Mode::Ciac, 0).pipeline.validate()?;
        self.world.sim.validate()
    }
}

/// One run's log and metrics.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub spec: RunSpec,
    pub log: SimEventLog,
    pub metrics: MetricsReport,
}

/// All runs of an experiment, ordered by seed then mode.
#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub report: ExperimentReport,
    pub runs: Vec<RunOutcome>,
}

fn paired(runs: &[RunOutcome], metric: &str, f: impl Fn(&MetricsReport) -> Option<f64>) -> Option<PairedComparison> {
    let mut pairs = Vec::new();
    for c in runs.iter().filter(|r| r.metrics.mode == Mode::Ciac) {
        let t = runs
            .iter()
            .find(|r| r.metrics.mode == Mode::Traditional && r.metrics.seed == c.metrics.seed)?;
        pairs.push((f(&c.metrics)?, f(&t.metrics)?));
    }
    (!pairs.is_empty()).then(|| PairedComparison::lower_is_better(metric, &pairs))
}

fn run_all(
    spec: &ExperimentSpec,
    make: impl Fn(WorldConfig, u64) -> RunSpec + Sync,
    source: impl Fn(&RunSpec) -> Result<SurgemeSource> + Sync,
) -> Result<Vec<RunOutcome>> {
    spec.validate()?;
    let jobs: Vec<(u64, Mode)> = spec
        .seeds
        .iter()
        .flat_map(|&s| spec.modes.iter().map(move |&m| (s, m)))
        .collect();
    jobs.par_iter()
        .map(|&(seed, mode)| {
            let run = make(spec.world_for(mode, seed), seed);
            let frames = run.frames()?;
            let log = simulate(&run, &frames, source(&run)?)?;
            let metrics = compute_metrics(&log);
            Ok(RunOutcome {
                spec: run,
                log,
                metrics,
            })
        })
        .collect()
}

/// Paired target-reaching runs: per seed, every mode consumes the same
/// operator stream.
pub fn run_target_reaching(spec: &ExperimentSpec) -> Result<ExperimentOutcome> {
    let profile = spec.reach;
    let runs = run_all(
        spec,
        |world, seed| RunSpec::Reach { world, profile, seed },
        |_| Ok(SurgemeSource::Oracle),
    )?;
    let mut comparisons: Vec<PairedComparison> =
        paired(&runs, "total_time", |m| m.total_time).into_iter().collect();
    for j in 0..spec.world.sim.entry_offsets.len() {
        comparisons.extend(paired(&runs, &format!("entry{j}_time"), |m| {
            m.entry_times.iter().find(|e| e.entry == j).map(|e| e.time)
        }));
    }
    Ok(ExperimentOutcome {
        report: ExperimentReport {
            kind: "reach".into(),
            runs: runs.iter().map(|r| r.metrics.clone()).collect(),
            comparisons,
        },
        runs,
    })
}

/// Classifier for suturing runs. `path` is recorded in log headers so the
/// runs can be regenerated.
#[derive(Clone)]
pub struct SutureModel {
    pub model: Arc<ModelParams>,
    pub path: Option<PathBuf>,
}

/// Paired four-throw suturing runs.
pub fn run_suturing(spec: &ExperimentSpec, model: Option<&SutureModel>) -> Result<ExperimentOutcome> {
    let profile = spec.suture;
    let throws = spec.throws;
    let path = model.and_then(|m| m.path.clone());
    let runs = run_all(
        spec,
        |world, seed| RunSpec::Suture {
            world,
            profile,
            throws,
            seed,
            model: path.clone(),
        },
        |run| match model {
            Some(m) => SurgemeSource::model(m.model.clone(), run.world().stream),
            None => Ok(SurgemeSource::Oracle),
        },
    )?;
    let comparisons = [
        paired(&runs, "push_perpendicularity", |m| Some(m.push_perpendicularity.mean)),
        paired(&runs, "throw_time", |m| Some(m.throw_time.mean)),
        paired(&runs, "task_time", |m| Some(m.duration)),
    ]
    .into_iter()
    .flatten()
    .collect();
    Ok(ExperimentOutcome {
        report: ExperimentReport {
            kind: "suture".into(),
            runs: runs.iter().map(|r| r.metrics.clone()).collect(),
            comparisons,
        },
        runs,
    })
}

// ---------------------------------------------------------------------------
// Replay

#[derive(Debug, Clone)]
pub struct ReplayOutcome {
    pub metrics: MetricsReport,
    /// Whether regenerating the run from its header reproduced the log
    /// byte for byte; `None` when the header cannot regenerate it.
    pub resimulated: Option<bool>,
}

/// Recomputes metrics from a stored log and, when the header names a
/// reproducible run, regenerates it and compares.
pub fn replay(log: &SimEventLog) -> Result<ReplayOutcome> {
    let metrics = compute_metrics(log);
    let spec: Option<RunSpec> = serde_json::from_value(log.header.config.clone()).ok();
    let resimulated = match spec {
        Some(RunSpec::Session { inputs: None, .. }) | None => None,
        Some(spec) => {
            let again = simulate(&spec, &spec.frames()?, spec.source()?)?;
            Some(again.to_ndjson()? == log.to_ndjson()?)
        }
    };
    Ok(ReplayOutcome {
        metrics,
        resimulated,
    })
}
