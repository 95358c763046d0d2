//! Training and prediction running side by side.
//!
//! The calling thread is the prediction worker: it parses frames, predicts
//! with the current model snapshot, debounces, segments and judges task
//! durations. It also feeds the window sampler and, every `retrain_every`
//! accepted frames, hands a snapshot of the sampler to the training worker
//! over a bounded queue. The training worker pseudo-labels the snapshot,
//! grows the dataset, retrains and publishes a new snapshot.

use std::collections::{BTreeMap, VecDeque};
use std::sync::mpsc::{self, Receiver, SyncSender, TrySendError};
use std::sync::{Arc, Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use arc_swap::ArcSwap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::anomaly::AnomalyTracker;
use crate::config::{PipelineConfig, SwapMode};
use crate::dtree::{split_holdout, DecisionTree, EvalMetrics};
use crate::error::{ParseError, PipelineError, SamplerError, TreeError};
use crate::io::Record;
use crate::labeler::{pseudo_label, reference_centroids, References};
use crate::sampler::WindowBank;
use crate::timeline::{row_for, Debouncer, Detection, ReportRow, Segmenter, TaskEvent};
use crate::types::{Dataset, LabeledSample, SensorFrame, TaskLabel};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSnapshot {
    pub version: u64,
    pub tree: DecisionTree,
    pub eval: Option<EvalMetrics>,
}

/// Published model plus a count of training batches the worker has finished.
pub struct ModelSlot {
    current: ArcSwap<ModelSnapshot>,
    progress: Mutex<Progress>,
    changed: Condvar,
}

#[derive(Debug, Default)]
struct Progress {
    processed: u64,
    closed: bool,
}

impl ModelSlot {
    pub fn new(initial: ModelSnapshot) -> Self {
        ModelSlot {
            current: ArcSwap::from_pointee(initial),
            progress: Mutex::new(Progress::default()),
            changed: Condvar::new(),
        }
    }

    pub fn load(&self) -> Arc<ModelSnapshot> {
        self.current.load_full()
    }

    /// Swaps in a newer snapshot. Older or equal versions are ignored.
    pub fn publish(&self, snapshot: ModelSnapshot) -> bool {
        if snapshot.version <= self.current.load().version {
            return false;
        }
        self.current.store(Arc::new(snapshot));
        true
    }

    fn mark_processed(&self, seq: u64) {
        let mut p = self.progress.lock().expect("progress lock");
        p.processed = p.processed.max(seq);
        self.changed.notify_all();
    }

    fn close(&self) {
        self.progress.lock().expect("progress lock").closed = true;
        self.changed.notify_all();
    }

    /// Blocks until batch `seq` has been handled, then returns the current
    /// snapshot. `None` if the worker stopped first.
    fn wait_processed(&self, seq: u64) -> Option<Arc<ModelSnapshot>> {
        let mut p = self.progress.lock().expect("progress lock");
        while p.processed < seq {
            if p.closed {
                return None;
            }
            p = self.changed.wait(p).expect("progress lock");
        }
        Some(self.load())
    }
}

/// Everything `run` needs from a training session, persisted as one JSON
/// document.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelFile {
    pub snapshot: ModelSnapshot,
    pub references: Option<References>,
    /// Historical durations per task, seconds, in `TaskLabel::ALL` order.
    pub durations: [Vec<f64>; TaskLabel::COUNT],
}

const MODEL_FORMAT: &str = "handtask-model/1";

#[derive(Serialize, Deserialize)]
struct ModelDoc {
    format: String,
    version: u64,
    eval: Option<EvalMetrics>,
    references: Option<Vec<Vec<f64>>>,
    durations: BTreeMap<TaskLabel, Vec<f64>>,
    tree: serde_json::Value,
}

impl ModelFile {
    pub fn to_json(&self) -> String {
        let doc = ModelDoc {
            format: MODEL_FORMAT.into(),
            version: self.snapshot.version,
            eval: self.snapshot.eval.clone(),
            references: self.references.as_ref().map(|r| r.centroids.clone()),
            durations: TaskLabel::ALL.iter().map(|&l| (l, self.durations[l.index()].clone())).collect(),
            tree: serde_json::from_str(&self.snapshot.tree.to_json()).expect("tree json"),
        };
        serde_json::to_string_pretty(&doc).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, TreeError> {
        let doc: ModelDoc = serde_json::from_str(text).map_err(|e| TreeError::Model(e.to_string()))?;
        if doc.format != MODEL_FORMAT {
            return Err(TreeError::Model(format!("unsupported model format {:?}", doc.format)));
        }
        let tree = DecisionTree::from_json(&doc.tree.to_string())?;
        let dim = tree.schema.len();
        let references = match doc.references {
            Some(c) if c.len() == TaskLabel::COUNT && c.iter().all(|v| v.len() == dim) => {
                Some(References { centroids: c })
            }
            Some(_) => return Err(TreeError::Model("reference centroids do not match the schema".into())),
            None => None,
        };
        let mut durations: [Vec<f64>; TaskLabel::COUNT] = Default::default();
        for (l, d) in doc.durations {
            durations[l.index()] = d;
        }
        Ok(ModelFile { snapshot: ModelSnapshot { version: doc.version, tree, eval: doc.eval }, references, durations })
    }
}

/// Durations of the label runs in a time-ordered labeled sequence.
pub fn run_durations(samples: &[LabeledSample], tick_seconds: f64) -> [Vec<f64>; TaskLabel::COUNT] {
    let mut seg = Segmenter::new(tick_seconds);
    let mut out: [Vec<f64>; TaskLabel::COUNT] = Default::default();
    for (i, s) in samples.iter().enumerate() {
        if let Some(ev) = seg.push(Detection { id: i as u64, ts: s.frame.ts, label: s.label }) {
            if let Some(d) = ev.processing_time.filter(|d| *d > 0.0) {
                out[ev.label.index()].push(d);
            }
        }
    }
    out
}

/// Holdout training: fit on `train_fraction` of the data, score the rest.
pub fn train_snapshot(ds: &Dataset, cfg: &PipelineConfig, seed: u64, version: u64) -> Result<ModelSnapshot, TreeError> {
    let (train, test) = split_holdout(ds, cfg.train_fraction, seed)?;
    let tree = DecisionTree::train(&train, cfg.tree)?;
    let eval = tree.evaluate(test.samples())?;
    Ok(ModelSnapshot { version, tree, eval: Some(eval) })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub model: ModelFile,
    pub leaf_count: usize,
    pub contribution: Vec<(crate::types::ChannelId, f64)>,
}

/// First model from a historical, time-ordered labeled dataset.
pub fn train_model(samples: Vec<LabeledSample>, cfg: &PipelineConfig) -> Result<TrainOutcome, PipelineError> {
    let durations = run_durations(&samples, cfg.timeline.tick_seconds);
    let references = reference_centroids(&samples).ok();
    let ds = Dataset::from_samples(cfg.schema.clone(), samples);
    if ds.len() < 2 {
        return Err(TreeError::DatasetTooSmall(ds.len()).into());
    }
    let snapshot = train_snapshot(&ds, cfg, cfg.seed, 1)?;
    let leaf_count = snapshot.tree.leaf_count();
    let contribution = snapshot.tree.attribute_contribution(ds.samples());
    Ok(TrainOutcome { model: ModelFile { snapshot, references, durations }, leaf_count, contribution })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub seq: u64,
    pub snapshot_len: usize,
    pub new_samples: usize,
    pub total_error: f64,
    /// Pseudo-label error on the snapshot when the stream carries labels.
    pub error_rate: Option<f64>,
    /// Version published for this batch, if retraining succeeded.
    pub version: Option<u64>,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub rows: Vec<ReportRow>,
    pub frames: usize,
    /// Debounced label reported for every frame.
    pub predictions: Vec<TaskLabel>,
    /// Labels carried by the stream, if any.
    pub truth: Vec<Option<TaskLabel>>,
    pub batches: Vec<BatchStats>,
    pub dropped_batches: usize,
    pub final_version: u64,
    /// Mean seconds spent on parse plus predict per frame.
    pub mean_latency: f64,
}

impl RunOutput {
    /// Fraction of labeled frames whose reported label matches the truth.
    pub fn frame_accuracy(&self) -> Option<f64> {
        let scored: Vec<bool> = self
            .predictions
            .iter()
            .zip(&self.truth)
            .filter_map(|(p, t)| t.map(|t| *p == t))
            .collect();
        if scored.is_empty() {
            None
        } else {
            Some(scored.iter().filter(|&&ok| ok).count() as f64 / scored.len() as f64)
        }
    }

    /// Mean pseudo-label error over scored batches.
    pub fn mean_batch_error(&self) -> Option<f64> {
        let rates: Vec<f64> = self.batches.iter().filter_map(|b| b.error_rate).collect();
        if rates.is_empty() {
            None
        } else {
            Some(rates.iter().sum::<f64>() / rates.len() as f64)
        }
    }
}

struct Batch {
    seq: u64,
    frames: Vec<SensorFrame>,
    truth: Option<Vec<TaskLabel>>,
    /// Frames at or before this timestamp were already handed over.
    watermark: Option<u64>,
}

struct Trainer {
    cfg: PipelineConfig,
    refs: References,
    dataset: Dataset,
    version: u64,
}

impl Trainer {
    fn handle(&mut self, batch: Batch, slot: &ModelSlot) -> BatchStats {
        let mut stats = BatchStats {
            seq: batch.seq,
            snapshot_len: batch.frames.len(),
            new_samples: 0,
            total_error: f64::NAN,
            error_rate: None,
            version: None,
            failure: None,
        };
        let seed = self.cfg.seed.wrapping_add(batch.seq);
        let mut labeled = match pseudo_label(&batch.frames, &self.refs, &self.cfg.schema, &self.cfg.labeler, seed) {
            Ok(b) => b,
            Err(e) => {
                stats.failure = Some(e.to_string());
                return stats;
            }
        };
        stats.total_error = labeled.assignment.total_error;
        if let Some(t) = &batch.truth {
            stats.error_rate = Some(labeled.score(t));
        }
        for s in labeled.samples {
            if batch.watermark.is_none_or(|w| s.frame.ts > w) {
                self.dataset.push_pseudo(s);
                stats.new_samples += 1;
            }
        }
        match train_snapshot(&self.dataset, &self.cfg, seed, self.version + 1) {
            Ok(snap) => {
                self.version += 1;
                stats.version = Some(self.version);
                slot.publish(snap);
            }
            Err(e) => stats.failure = Some(e.to_string()),
        }
        stats
    }

    fn serve(mut self, rx: Receiver<Batch>, slot: &ModelSlot) -> Vec<BatchStats> {
        // Runs on every exit, panics included, so a waiting stream never hangs.
        struct CloseOnDrop<'a>(&'a ModelSlot);
        impl Drop for CloseOnDrop<'_> {
            fn drop(&mut self) {
                self.0.close();
            }
        }
        let _close = CloseOnDrop(slot);
        let mut out = Vec::new();
        for batch in rx {
            let seq = batch.seq;
            out.push(self.handle(batch, slot));
            slot.mark_processed(seq);
        }
        out
    }
}

/// Historical samples (if any) plus what the stream adds.
pub struct RunInputs {
    pub model: ModelFile,
    pub history: Option<Vec<LabeledSample>>,
}

struct Predictor<'a> {
    debouncer: Debouncer,
    segmenter: Segmenter,
    tracker: AnomalyTracker,
    on_row: &'a mut dyn FnMut(&ReportRow),
    rows: Vec<ReportRow>,
}

impl Predictor<'_> {
    fn push(&mut self, d: Detection, version: u64) -> TaskLabel {
        let stable = self.debouncer.push(d);
        if let Some(ev) = self.segmenter.push(stable) {
            self.close(&ev, version);
        }
        stable.label
    }

    fn close(&mut self, ev: &TaskEvent, version: u64) {
        let rec = ev.processing_time.map(|d| self.tracker.observe(ev.label, d));
        let row = row_for(ev, rec.as_ref(), Some(version));
        (self.on_row)(&row);
        self.rows.push(row);
    }

    fn finish(mut self, version: u64) -> Vec<ReportRow> {
        let open = self.segmenter.open_event().copied();
        if let Some(ev) = open {
            let row = row_for(&ev, None, Some(version));
            (self.on_row)(&row);
            self.rows.push(row);
        }
        self.rows
    }
}

/// Runs prediction over `records` while a second worker retrains. Rows are
/// passed to `on_row` as soon as each event closes.
pub fn run<I>(
    records: I,
    inputs: RunInputs,
    cfg: &PipelineConfig,
    on_row: &mut dyn FnMut(&ReportRow),
) -> Result<RunOutput, PipelineError>
where
    I: Iterator<Item = Result<Record, ParseError>>,
{
    cfg.validate()?;
    let model = inputs.model;
    if model.snapshot.tree.schema != cfg.schema {
        return Err(crate::error::SchemaError::SchemaMismatch {
            expected: model.snapshot.tree.schema.len(),
            actual: cfg.schema.len(),
        }
        .into());
    }

    let mut tracker = AnomalyTracker::new(cfg.anomaly);
    for l in TaskLabel::ALL {
        tracker.seed_history(l, &model.durations[l.index()]);
    }

    let refs = match (&model.references, &inputs.history) {
        (Some(r), _) => Some(r.clone()),
        (None, Some(h)) => reference_centroids(h).ok(),
        (None, None) => None,
    };
    let retrain = cfg.retrain && refs.is_some();
    let base_version = model.snapshot.version;
    let slot = ModelSlot::new(model.snapshot);

    let mut dataset = Dataset::new(cfg.schema.clone(), cfg.dataset_capacity);
    for s in inputs.history.into_iter().flatten() {
        dataset.push_historical(s);
    }
    dataset.set_capacity(cfg.dataset_capacity.max(dataset.historical_len() + 1));

    let (tx, rx) = mpsc::sync_channel::<Batch>(cfg.queue_depth);
    let trainer = Trainer { cfg: cfg.clone(), refs: refs.unwrap_or(References { centroids: Vec::new() }), dataset, version: base_version };

    thread::scope(|scope| {
        let slot = &slot;
        let handle = retrain.then(|| scope.spawn(move || trainer.serve(rx, slot)));
        let tx = retrain.then_some(tx);
        // predict_loop consumes the sender, so the worker drains and exits.
        let result = predict_loop(records, cfg, slot, tracker, tx, on_row);
        let stats = match handle {
            Some(h) => h.join().map_err(|_| PipelineError::Worker("training worker panicked".into()))?,
            None => Vec::new(),
        };
        let mut out = result?;
        out.batches = stats;
        out.final_version = slot.load().version;
        Ok(out)
    })
}

fn predict_loop<I>(
    mut records: I,
    cfg: &PipelineConfig,
    slot: &ModelSlot,
    tracker: AnomalyTracker,
    tx: Option<SyncSender<Batch>>,
    on_row: &mut dyn FnMut(&ReportRow),
) -> Result<RunOutput, PipelineError>
where
    I: Iterator<Item = Result<Record, ParseError>>,
{
    let mut bank = WindowBank::new(cfg.sampler)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut predictor = Predictor {
        debouncer: Debouncer::new(cfg.timeline.debounce)?,
        segmenter: Segmenter::new(cfg.timeline.tick_seconds),
        tracker,
        on_row,
        rows: Vec::new(),
    };
    let mut model = slot.load();
    let mut predictions = Vec::new();
    let mut truth = Vec::new();
    let mut truth_by_ts: BTreeMap<u64, TaskLabel> = BTreeMap::new();
    let mut all_labeled = true;
    let mut accepted_since = 0usize;
    let mut seq = 0u64;
    let mut watermark: Option<u64> = None;
    let mut pending: VecDeque<(usize, u64)> = VecDeque::new();
    let mut dropped = 0usize;
    let mut last_ts: Option<u64> = None;
    let mut latency = 0.0;
    let pace_start = Instant::now();
    let mut first_ts = None;

    let mut index = 0usize;
    loop {
        let t0 = Instant::now();
        let Some(rec) = records.next() else { break };
        let rec = rec?;
        let parse_time = t0.elapsed().as_secs_f64();
        if let Some(prev) = last_ts {
            if rec.frame.ts < prev {
                return Err(PipelineError::ClockRegression { line: rec.line, previous: prev, now: rec.frame.ts });
            }
        }
        last_ts = Some(rec.frame.ts);

        if cfg.replay_speed > 0.0 {
            let origin = *first_ts.get_or_insert(rec.frame.ts);
            let due = Duration::from_secs_f64(
                (rec.frame.ts - origin) as f64 * cfg.timeline.tick_seconds / cfg.replay_speed,
            );
            if let Some(wait) = due.checked_sub(pace_start.elapsed()) {
                thread::sleep(wait);
            }
        }

        match cfg.swap_mode {
            SwapMode::Deterministic => {
                while pending.front().is_some_and(|&(at, _)| at <= index) {
                    let (_, s) = pending.pop_front().expect("checked");
                    match slot.wait_processed(s) {
                        Some(m) => model = m,
                        None => return Err(PipelineError::Worker("training worker stopped".into())),
                    }
                }
            }
            SwapMode::Live => model = slot.load(),
        }

        let t_predict = Instant::now();
        let label = model.tree.predict(&rec.frame)?;
        latency += parse_time + t_predict.elapsed().as_secs_f64();

        let id = index as u64 + 1;
        let stable = predictor.push(Detection { id, ts: rec.frame.ts, label }, model.version);
        predictions.push(stable);
        truth.push(rec.label);
        all_labeled &= rec.label.is_some();

        if let Some(tx) = &tx {
            let ts = rec.frame.ts;
            if let Some(l) = rec.label {
                truth_by_ts.insert(ts, l);
            }
            let draw: f64 = rng.gen();
            let decision = bank.offer(rec.frame, draw, ts).map_err(|e| match e {
                SamplerError::NonMonotoneClock { previous, now } => {
                    PipelineError::ClockRegression { line: rec.line, previous, now }
                }
                other => other.into(),
            })?;
            if decision.accepted() {
                accepted_since += 1;
            }
            if accepted_since >= cfg.retrain_every {
                accepted_since = 0;
                seq += 1;
                let frames = bank.snapshot();
                let batch_truth = if all_labeled {
                    frames.iter().map(|f| truth_by_ts.get(&f.ts).copied()).collect::<Option<Vec<_>>>()
                } else {
                    None
                };
                if let Some(oldest) = frames.iter().map(|f| f.ts).min() {
                    truth_by_ts = truth_by_ts.split_off(&oldest);
                }
                let newest = frames.iter().map(|f| f.ts).max();
                let batch = Batch { seq, frames, truth: batch_truth, watermark };
                match cfg.swap_mode {
                    SwapMode::Deterministic => {
                        tx.send(batch).map_err(|_| PipelineError::Worker("training worker stopped".into()))?;
                        pending.push_back((index + cfg.swap_lag, seq));
                        watermark = newest;
                    }
                    SwapMode::Live => match tx.try_send(batch) {
                        Ok(()) => watermark = newest,
                        Err(TrySendError::Full(_)) => {
                            dropped += 1;
                            seq -= 1;
                        }
                        Err(TrySendError::Disconnected(_)) => {
                            return Err(PipelineError::Worker("training worker stopped".into()))
                        }
                    },
                }
            }
        }
        index += 1;
    }
    drop(tx);

    let frames = index;
    let rows = predictor.finish(model.version);
    Ok(RunOutput {
        rows,
        frames,
        predictions,
        truth,
        batches: Vec::new(),
        dropped_batches: dropped,
        final_version: model.version,
        mean_latency: if frames == 0 { 0.0 } else { latency / frames as f64 },
    })
}
