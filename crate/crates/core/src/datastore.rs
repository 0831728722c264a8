//! Append-only JSON Lines trajectory log, validation and training-set
//! extraction.

use std::collections::HashMap;
use std::fs::File;
use std::hash::Hasher;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::domain::{Actor, EpisodeId, Frame, Mode, RobotId, Score, TaskTemplate, TICK_RATE};
use crate::error::{Error, Result};
use crate::gridworld::{feature_layout, FeatureLayout};
use crate::policies::TrainingPair;
use crate::sentinel::{label_frames, LabeledFrame};
use crate::session::REWIND_CAPACITY;

pub const LOG_VERSION: u32 = 1;
pub const LOG_EXTENSION: &str = ".gcent.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub version: u32,
    pub task: String,
    pub tick_rate: u32,
    pub robot_ids: Vec<RobotId>,
    pub config_digest: String,
}

impl Header {
    pub fn new(task: &str, robot_ids: Vec<RobotId>, config_digest: String) -> Self {
        Header {
            version: LOG_VERSION,
            task: task.to_string(),
            tick_rate: TICK_RATE,
            robot_ids,
            config_digest,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepBoundary {
    pub robot_id: RobotId,
    pub episode_id: EpisodeId,
    pub step_index: u32,
    pub end_tick: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeEnd {
    pub robot_id: RobotId,
    pub episode_id: EpisodeId,
    pub score: Score,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum LogRecord {
    Header(Header),
    Frame(Frame),
    StepBoundary(StepBoundary),
    EpisodeEnd(EpisodeEnd),
}

/// Hex FNV-1a (64-bit) of a value's canonical JSON serialization.
pub fn config_digest<T: Serialize>(config: &T) -> String {
    let canonical = serde_json::to_vec(config).expect("config serializes");
    let mut h = fnv::FnvHasher::default();
    h.write(&canonical);
    format!("{:016x}", h.finish())
}

fn check_well_formed(record: &LogRecord) -> Result<()> {
    match record {
        LogRecord::Header(h) if h.version != LOG_VERSION => Err(Error::MalformedRecord(format!(
            "unsupported version {}",
            h.version
        ))),
        LogRecord::Frame(f) if f.episode_id.is_empty() => {
            Err(Error::MalformedRecord("frame without episode id".into()))
        }
        LogRecord::EpisodeEnd(e) if e.score.total == 0 || e.score.completed > e.score.total => Err(
            Error::MalformedRecord(format!("score {}/{}", e.score.completed, e.score.total)),
        ),
        _ => Ok(()),
    }
}

/// Streaming writer: one JSON record per line, header exactly once and first.
pub struct LogWriter<W: Write> {
    out: BufWriter<W>,
    header_written: bool,
    records: u64,
}

impl LogWriter<File> {
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        Ok(LogWriter::new(File::create(path)?))
    }
}

impl<W: Write> LogWriter<W> {
    pub fn new(out: W) -> Self {
        LogWriter {
            out: BufWriter::new(out),
            header_written: false,
            records: 0,
        }
    }

    pub fn append(&mut self, record: &LogRecord) -> Result<()> {
        check_well_formed(record)?;
        match (record, self.header_written) {
            (LogRecord::Header(_), true) => return Err(Error::DuplicateHeader),
            (LogRecord::Header(_), false) => self.header_written = true,
            (_, false) => {
                return Err(Error::MalformedRecord(
                    "first record must be a header".into(),
                ))
            }
            _ => {}
        }
        serde_json::to_writer(&mut self.out, record)?;
        self.out.write_all(b"\n")?;
        self.records += 1;
        Ok(())
    }

    pub fn records_written(&self) -> u64 {
        self.records
    }

    pub fn finish(mut self) -> Result<W> {
        self.out.flush()?;
        self.out
            .into_inner()
            .map_err(|e| Error::Io(e.into_error()))
    }
}

pub fn read_records(reader: impl BufRead) -> Result<Vec<LogRecord>> {
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line)
            .map_err(|e| Error::MalformedRecord(format!("line {}: {e}", n + 1)))?;
        out.push(record);
    }
    Ok(out)
}

pub fn read_log(path: impl AsRef<Path>) -> Result<Vec<LogRecord>> {
    read_records(BufReader::new(File::open(path)?))
}

pub fn write_log(path: impl AsRef<Path>, records: &[LogRecord]) -> Result<()> {
    let mut w = LogWriter::create(path)?;
    for r in records {
        w.append(r)?;
    }
    w.finish()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredRecord {
    /// Aggregation round that contributed the record; 0 for the seed set.
    pub round: u32,
    pub record: LogRecord,
}

/// In-memory dataset D_i: every record ever aggregated, in order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrajectoryStore {
    version: u32,
    records: Vec<StoredRecord>,
    header: Option<Header>,
}

type EpisodeKey = (RobotId, EpisodeId);

impl TrajectoryStore {
    pub fn new() -> Self {
        TrajectoryStore::default()
    }

    pub fn version(&self) -> u32 {
        self.version
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn header(&self) -> Option<&Header> {
        self.header.as_ref()
    }

    pub fn records(&self) -> &[StoredRecord] {
        &self.records
    }

    pub fn append(&mut self, record: LogRecord) -> Result<()> {
        check_well_formed(&record)?;
        if let LogRecord::Header(h) = &record {
            if self.header.is_some() {
                return Err(Error::DuplicateHeader);
            }
            self.header = Some(h.clone());
        }
        self.records.push(StoredRecord {
            round: self.version,
            record,
        });
        Ok(())
    }

    /// D_{i+1} = D_i plus `new_records` tagged with round i+1. Headers in the
    /// new batch are dropped; duplicates are kept.
    pub fn aggregate(mut self, new_records: impl IntoIterator<Item = LogRecord>) -> Result<Self> {
        self.version += 1;
        for record in new_records {
            if matches!(record, LogRecord::Header(_)) {
                continue;
            }
            self.append(record)?;
        }
        Ok(self)
    }

    pub fn frames(&self) -> impl Iterator<Item = &Frame> {
        self.records.iter().filter_map(|r| match &r.record {
            LogRecord::Frame(f) => Some(f),
            _ => None,
        })
    }

    pub fn frame_count(&self) -> usize {
        self.frames().count()
    }

    pub fn episode_ends(&self) -> impl Iterator<Item = &EpisodeEnd> {
        self.records.iter().filter_map(|r| match &r.record {
            LogRecord::EpisodeEnd(e) => Some(e),
            _ => None,
        })
    }

    /// Frames grouped per (robot, episode), in first-appearance order.
    pub fn episodes(&self) -> Vec<(EpisodeKey, Vec<&Frame>)> {
        let mut index: HashMap<EpisodeKey, usize> = HashMap::new();
        let mut out: Vec<(EpisodeKey, Vec<&Frame>)> = Vec::new();
        for f in self.frames() {
            let key = (f.robot_id, f.episode_id.clone());
            let i = *index.entry(key.clone()).or_insert_with(|| {
                out.push((key, Vec::new()));
                out.len() - 1
            });
            out[i].1.push(f);
        }
        out
    }

    /// Human intervention frames (seed demonstrations are stored the same
    /// way), in log order.
    pub fn extract_policy_trainset(&self) -> Vec<TrainingPair> {
        self.frames()
            .filter(|f| f.mode == Mode::Intervention && f.actor == Actor::Human)
            .map(|f| TrainingPair {
                features: f.observation.clone(),
                action: f.action,
            })
            .collect()
    }

    /// Every frame regardless of mode, labelled by the final-second rule.
    pub fn extract_sentinel_trainset(&self) -> Result<Vec<LabeledFrame>> {
        let episodes = self.episodes();
        let index: HashMap<&EpisodeKey, usize> =
            episodes.iter().enumerate().map(|(i, (k, _))| (k, i)).collect();
        let mut bounds: Vec<Vec<(u32, u64)>> = vec![Vec::new(); episodes.len()];
        for r in &self.records {
            if let LogRecord::StepBoundary(b) = &r.record {
                let key = (b.robot_id, b.episode_id.clone());
                let i = *index.get(&key).ok_or_else(|| Error::UnknownEpisode {
                    robot_id: b.robot_id,
                    episode_id: b.episode_id.clone(),
                })?;
                bounds[i].push((b.step_index, b.end_tick));
            }
        }
        let mut out = Vec::new();
        for ((_, frames), b) in episodes.iter().zip(&bounds) {
            out.extend(label_frames(frames, b)?);
        }
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = LogWriter::create(path)?;
        let header = self
            .header
            .clone()
            .ok_or_else(|| Error::MalformedRecord("store has no header".into()))?;
        w.append(&LogRecord::Header(header))?;
        for r in &self.records {
            if !matches!(r.record, LogRecord::Header(_)) {
                w.append(&r.record)?;
            }
        }
        w.finish()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut store = TrajectoryStore::new();
        for r in read_log(path)? {
            store.append(r)?;
        }
        Ok(store)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    MissingHeader,
    DuplicateHeader,
    TickOrder,
    IllegalTransition,
    ActorMismatch,
    Discontinuity,
    UnknownEpisode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    /// Zero-based record index.
    pub record: usize,
    pub kind: ViolationKind,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub records: usize,
    pub frames: usize,
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn count(&self, kind: ViolationKind) -> usize {
        self.violations.iter().filter(|v| v.kind == kind).count()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ValidateOptions {
    /// Flag object moves not explained by the previous frame's action.
    pub continuity: bool,
}

#[derive(Default)]
struct EpisodeTrack<'a> {
    prev: Option<&'a Frame>,
    high_water: Option<u64>,
    /// Mirror of the session's rewind buffer: (tick, observation).
    buffer: Vec<(u64, &'a [f32])>,
}

fn objects_moved(layout: &FeatureLayout, a: &Frame, b: &Frame) -> bool {
    let r = layout.object_grid_range();
    a.observation.get(r.clone()) != b.observation.get(r)
}

/// Checks tick order, mode transitions between consecutive frames of an
/// episode, actor/mode agreement and header placement.
///
/// Rewind frames must replay the episode's buffered states newest first,
/// which is what a legitimate BeginRewind/RewindTo sequence produces.
pub fn validate(records: &[LogRecord], options: ValidateOptions) -> ValidationReport {
    let mut report = ValidationReport {
        records: records.len(),
        ..Default::default()
    };
    let mut flag = |record: usize, kind: ViolationKind, detail: String| {
        report.violations.push(Violation {
            record,
            kind,
            detail,
        })
    };
    let mut layout = None;
    match records.first() {
        Some(LogRecord::Header(h)) => {
            layout = h.task.parse::<TaskTemplate>().ok().map(feature_layout);
        }
        _ => flag(0, ViolationKind::MissingHeader, "first record is not a header".into()),
    }
    let mut tracks: HashMap<(RobotId, &str), EpisodeTrack> = HashMap::new();
    let mut frames = 0;
    for (i, record) in records.iter().enumerate() {
        let f = match record {
            LogRecord::Header(_) if i > 0 => {
                flag(i, ViolationKind::DuplicateHeader, "header repeated".into());
                continue;
            }
            LogRecord::Frame(f) => f,
            LogRecord::StepBoundary(b) => {
                if !tracks.contains_key(&(b.robot_id, b.episode_id.as_str())) {
                    flag(
                        i,
                        ViolationKind::UnknownEpisode,
                        format!("boundary for {}/{} precedes its frames", b.robot_id, b.episode_id),
                    );
                }
                continue;
            }
            _ => continue,
        };
        frames += 1;
        if f.actor != f.mode.expected_actor() {
            flag(
                i,
                ViolationKind::ActorMismatch,
                format!("{:?} frame in {} mode", f.actor, f.mode),
            );
        }
        let t = tracks.entry((f.robot_id, f.episode_id.as_str())).or_default();
        if let Some(p) = t.prev {
            if f.mode == Mode::AwaitingIntervention
                && matches!(p.mode, Mode::Intervention | Mode::Rewind)
            {
                flag(
                    i,
                    ViolationKind::IllegalTransition,
                    format!("{} -> {}", p.mode, f.mode),
                );
            }
        }
        if f.mode == Mode::Rewind {
            if let Some(p) = t.prev.filter(|p| p.mode == Mode::Rewind) {
                if f.tick >= p.tick {
                    flag(
                        i,
                        ViolationKind::TickOrder,
                        format!("rewind tick {} after {}", f.tick, p.tick),
                    );
                }
            }
            match t.buffer.pop() {
                Some((tick, obs)) if tick == f.tick && obs == f.observation.as_slice() => {}
                _ => flag(
                    i,
                    ViolationKind::IllegalTransition,
                    format!(
                        "rewind frame at tick {} does not restore a buffered state",
                        f.tick
                    ),
                ),
            }
        } else {
            if t.high_water.is_some_and(|hw| f.tick <= hw) {
                flag(
                    i,
                    ViolationKind::TickOrder,
                    format!("tick {} not after {}", f.tick, t.high_water.unwrap_or(0)),
                );
            }
            t.high_water = Some(t.high_water.map_or(f.tick, |hw| hw.max(f.tick)));
            if matches!(f.mode, Mode::Inference | Mode::Intervention) {
                if t.buffer.len() == REWIND_CAPACITY {
                    t.buffer.remove(0);
                }
                t.buffer.push((f.tick, &f.observation));
            }
            if let (true, Some(layout), Some(p)) = (options.continuity, layout.as_ref(), t.prev) {
                let carried = p.action.is_move()
                    && p.observation.get(layout.held_offset()).is_some_and(|h| *h != 0.0);
                if p.mode != Mode::Rewind && !carried && objects_moved(layout, p, f) {
                    flag(
                        i,
                        ViolationKind::Discontinuity,
                        format!("objects moved between ticks {} and {}", p.tick, f.tick),
                    );
                }
            }
        }
        t.prev = Some(f);
    }
    report.frames = frames;
    report
}

pub fn validate_file(path: impl AsRef<Path>, options: ValidateOptions) -> Result<ValidationReport> {
    Ok(validate(&read_log(path)?, options))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::Action;
    use proptest::prelude::*;

    fn header() -> LogRecord {
        LogRecord::Header(Header::new("stacking", vec![0], "00".repeat(8)))
    }

    fn frame(tick: u64, mode: Mode, obs: f32) -> Frame {
        Frame {
            tick,
            episode_id: "e0".into(),
            robot_id: 0,
            step_index: 0,
            observation: vec![obs],
            action: Action::NoOp,
            actor: mode.expected_actor(),
            mode,
            sentinel_verdict: None,
        }
    }

    fn records(frames: Vec<Frame>) -> Vec<LogRecord> {
        std::iter::once(header())
            .chain(frames.into_iter().map(LogRecord::Frame))
            .collect()
    }

    #[test]
    fn frame_round_trip_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(format!("one{LOG_EXTENSION}"));
        let f = frame(3, Mode::Inference, 0.25);
        write_log(&path, &[header(), LogRecord::Frame(f.clone())]).unwrap();
        let back = read_log(&path).unwrap();
        assert_eq!(back[1], LogRecord::Frame(f));
    }

    #[test]
    fn header_rules() {
        let mut w = LogWriter::new(Vec::new());
        assert!(w.append(&LogRecord::Frame(frame(0, Mode::Inference, 0.0))).is_err());
        w.append(&header()).unwrap();
        assert!(matches!(w.append(&header()), Err(Error::DuplicateHeader)));
        let mut store = TrajectoryStore::new();
        store.append(header()).unwrap();
        assert!(matches!(store.append(header()), Err(Error::DuplicateHeader)));
    }

    #[test]
    fn bulk_round_trip() {
        let mut w = LogWriter::new(Vec::new());
        w.append(&header()).unwrap();
        for t in 0..100_000u64 {
            w.append(&LogRecord::Frame(frame(t, Mode::Inference, t as f32)))
                .unwrap();
        }
        let bytes = w.finish().unwrap();
        let back = read_records(bytes.as_slice()).unwrap();
        assert_eq!(back.len(), 100_001);
    }

    #[test]
    fn digest_is_fnv1a() {
        // FNV-1a 64 of the empty string is the offset basis
        let mut h = fnv::FnvHasher::default();
        h.write(b"");
        assert_eq!(h.finish(), 0xcbf2_9ce4_8422_2325);
        // "a" -> af63dc4c8601ec8c (published test vector)
        let mut h = fnv::FnvHasher::default();
        h.write(b"a");
        assert_eq!(format!("{:016x}", h.finish()), "af63dc4c8601ec8c");
        assert_eq!(config_digest(&"x"), config_digest(&"x"));
        assert_ne!(config_digest(&1), config_digest(&2));
    }

    #[test]
    fn validator_flags_injected_faults() {
        let clean = records(vec![
            frame(0, Mode::Inference, 0.0),
            frame(1, Mode::Inference, 1.0),
            frame(1, Mode::Rewind, 1.0),
            frame(0, Mode::Rewind, 0.0),
            frame(2, Mode::Intervention, 0.0),
            frame(3, Mode::Inference, 2.0),
            frame(4, Mode::AwaitingIntervention, 3.0),
        ]);
        assert!(validate(&clean, ValidateOptions::default()).is_clean());

        // Inference -> Rewind without a buffered state to restore
        let jump = records(vec![frame(0, Mode::Inference, 0.0), frame(5, Mode::Rewind, 9.0)]);
        let r = validate(&jump, ValidateOptions::default());
        assert_eq!(r.count(ViolationKind::IllegalTransition), 1);

        let mut bad_actor = frame(0, Mode::Intervention, 0.0);
        bad_actor.actor = Actor::Policy;
        let r = validate(&records(vec![bad_actor]), ValidateOptions::default());
        assert_eq!(r.count(ViolationKind::ActorMismatch), 1);

        let r = validate(
            &records(vec![frame(0, Mode::Intervention, 0.0), frame(1, Mode::AwaitingIntervention, 0.0)]),
            ValidateOptions::default(),
        );
        assert_eq!(r.count(ViolationKind::IllegalTransition), 1);

        let r = validate(
            &records(vec![frame(3, Mode::Inference, 0.0), frame(3, Mode::Inference, 0.0)]),
            ValidateOptions::default(),
        );
        assert_eq!(r.count(ViolationKind::TickOrder), 1);

        let r = validate(&[LogRecord::Frame(frame(0, Mode::Inference, 0.0))], ValidateOptions::default());
        assert_eq!(r.count(ViolationKind::MissingHeader), 1);
    }

    #[test]
    fn continuity_check_sees_teleported_objects() {
        let layout = feature_layout(TaskTemplate::Stacking);
        let mut a = frame(0, Mode::Intervention, 0.0);
        a.observation = vec![0.0; layout.len()];
        a.observation[5] = 1.0;
        let mut b = a.clone();
        b.tick = 1;
        b.observation[5] = 0.0;
        b.observation[6] = 1.0;
        let recs = records(vec![a.clone(), b.clone()]);
        assert!(validate(&recs, ValidateOptions::default()).is_clean());
        let r = validate(&recs, ValidateOptions { continuity: true });
        assert_eq!(r.count(ViolationKind::Discontinuity), 1);
        // carrying the object while moving explains the change
        a.action = Action::Right;
        a.observation[layout.held_offset()] = 1.0;
        assert!(validate(&records(vec![a, b]), ValidateOptions { continuity: true }).is_clean());
    }

    #[test]
    fn trainset_extraction() {
        let mut store = TrajectoryStore::new();
        store.append(header()).unwrap();
        store
            .append(LogRecord::Frame(frame(0, Mode::Inference, 0.0)))
            .unwrap();
        assert!(store.extract_policy_trainset().is_empty());
        for t in 1..4 {
            store
                .append(LogRecord::Frame(frame(t, Mode::Intervention, t as f32)))
                .unwrap();
        }
        let pairs = store.extract_policy_trainset();
        assert_eq!(
            pairs.iter().map(|p| p.features[0]).collect::<Vec<_>>(),
            vec![1.0, 2.0, 3.0]
        );
    }

    #[test]
    fn sentinel_extraction_includes_rewind_frames() {
        let mut store = TrajectoryStore::new();
        store.append(header()).unwrap();
        for t in 0..30 {
            store
                .append(LogRecord::Frame(frame(t, Mode::Inference, t as f32)))
                .unwrap();
        }
        store
            .append(LogRecord::Frame(frame(29, Mode::Rewind, 29.0)))
            .unwrap();
        store
            .append(LogRecord::StepBoundary(StepBoundary {
                robot_id: 0,
                episode_id: "e0".into(),
                step_index: 0,
                end_tick: 29,
            }))
            .unwrap();
        let labels = store.extract_sentinel_trainset().unwrap();
        assert_eq!(labels.len(), 31);
        assert_eq!(labels.iter().filter(|l| l.label).count(), 10);

        store
            .append(LogRecord::StepBoundary(StepBoundary {
                robot_id: 0,
                episode_id: "nope".into(),
                step_index: 0,
                end_tick: 1,
            }))
            .unwrap();
        assert!(matches!(
            store.extract_sentinel_trainset(),
            Err(Error::UnknownEpisode { .. })
        ));
    }

    #[test]
    fn aggregation_is_append_only() {
        let mut d0 = TrajectoryStore::new();
        d0.append(header()).unwrap();
        d0.append(LogRecord::Frame(frame(0, Mode::Intervention, 0.0)))
            .unwrap();
        let before = d0.extract_policy_trainset();
        let d1 = d0.clone().aggregate(vec![]).unwrap();
        assert_eq!(d1.version(), 1);
        assert_eq!(d1.extract_policy_trainset(), before);

        let new = vec![header(), LogRecord::Frame(frame(1, Mode::Intervention, 1.0))];
        let d2 = d1.clone().aggregate(new.clone()).unwrap();
        let d3 = d2.clone().aggregate(new).unwrap();
        assert_eq!(d2.len(), d1.len() + 1);
        assert_eq!(d3.len(), d2.len() + 1);
        assert_eq!(&d3.records()[..d2.len()], d2.records());
        assert_eq!(d3.records().last().unwrap().round, 3);
    }

    fn arb_mode() -> impl Strategy<Value = Mode> {
        (0usize..4).prop_map(|i| Mode::ALL[i])
    }

    fn arb_record() -> impl Strategy<Value = LogRecord> {
        prop_oneof![
            (any::<u32>(), "[a-z]{1,8}", proptest::collection::vec(any::<u32>(), 0..4))
                .prop_map(|(v, task, ids)| LogRecord::Header(Header {
                    version: v,
                    task,
                    tick_rate: 10,
                    robot_ids: ids,
                    config_digest: "0123456789abcdef".into(),
                })),
            (
                any::<u64>(),
                "[a-z0-9-]{1,12}",
                any::<u32>(),
                proptest::collection::vec(any::<f32>().prop_filter("finite", |x| x.is_finite()), 0..20),
                0u8..8,
                arb_mode(),
                proptest::option::of(any::<bool>())
            )
                .prop_map(|(tick, ep, step, obs, a, mode, z)| LogRecord::Frame(Frame {
                    tick,
                    episode_id: ep,
                    robot_id: step % 8,
                    step_index: step,
                    observation: obs,
                    action: Action::from_ordinal(a).unwrap(),
                    actor: mode.expected_actor(),
                    mode,
                    sentinel_verdict: z,
                })),
            (any::<u32>(), "[a-z]{1,6}", any::<u32>(), any::<u64>()).prop_map(|(r, e, s, t)| {
                LogRecord::StepBoundary(StepBoundary {
                    robot_id: r,
                    episode_id: e,
                    step_index: s,
                    end_tick: t,
                })
            }),
            (any::<u32>(), "[a-z]{1,6}", 1u32..20, 0u32..20).prop_map(|(r, e, total, c)| {
                LogRecord::EpisodeEnd(EpisodeEnd {
                    robot_id: r,
                    episode_id: e,
                    score: Score {
                        completed: c.min(total),
                        total,
                    },
                })
            }),
        ]
    }

    proptest! {
        #[test]
        fn every_record_round_trips(r in arb_record()) {
            let line = serde_json::to_string(&r).unwrap();
            prop_assert!(!line.contains('\n'));
            let back: LogRecord = serde_json::from_str(&line).unwrap();
            prop_assert_eq!(back, r);
        }
    }
}
