use std::sync::OnceLock;

use handtask::anomaly::Verdict;
use handtask::config::{PipelineConfig, SwapMode};
use handtask::error::{ParseError, PipelineError};
use handtask::io::Record;
use handtask::pipeline::{run, train_model, ModelFile, RunInputs, RunOutput, TrainOutcome};
use handtask::simgen::{gen_cycles, reference_profiles, CyclePlan, SimOutput};
use handtask::types::{ChannelSchema, LabeledSample, SensorFrame, TaskLabel};

fn schema() -> ChannelSchema {
    ChannelSchema::reference()
}

fn history() -> &'static (SimOutput, TrainOutcome) {
    static H: OnceLock<(SimOutput, TrainOutcome)> = OnceLock::new();
    H.get_or_init(|| {
        let sim = gen_cycles(&CyclePlan::default(), &reference_profiles(), &schema(), 20, 7).unwrap();
        let trained = train_model(sim.frames.clone(), &PipelineConfig::default()).unwrap();
        (sim, trained)
    })
}

fn as_records(frames: &[LabeledSample]) -> Vec<Result<Record, ParseError>> {
    frames
        .iter()
        .enumerate()
        .map(|(i, s)| Ok(Record { line: i + 1, frame: s.frame.clone(), label: Some(s.label) }))
        .collect()
}

fn replay(frames: &[LabeledSample], cfg: &PipelineConfig) -> Result<RunOutput, PipelineError> {
    let (hist, trained) = history();
    let inputs = RunInputs { model: trained.model.clone(), history: Some(hist.frames.clone()) };
    run(as_records(frames).into_iter(), inputs, cfg, &mut |_| {})
}

#[test]
fn empty_stream_shuts_down_cleanly() {
    let out = replay(&[], &PipelineConfig::default()).unwrap();
    assert!(out.rows.is_empty());
    assert_eq!(out.frames, 0);
    assert_eq!(out.final_version, 1);
}

#[test]
fn tripled_joining_is_flagged() {
    let mean = reference_profiles()[TaskLabel::Joining.index()].duration_mean;
    let plan = CyclePlan { overrides: vec![(4, TaskLabel::Joining, 3.0 * mean)], ..CyclePlan::default() };
    let live = gen_cycles(&plan, &reference_profiles(), &schema(), 8, 9).unwrap();
    let cfg = PipelineConfig { retrain: false, ..PipelineConfig::default() };
    let out = replay(&live.frames, &cfg).unwrap();
    let long: Vec<_> = out
        .rows
        .iter()
        .filter(|r| r.task == TaskLabel::Joining && r.processing_time.is_some_and(|d| d > 2.0 * mean))
        .collect();
    assert_eq!(long.len(), 1, "rows: {:?}", out.rows);
    assert_eq!(long[0].abnormality, Verdict::Abnormal);
}

#[test]
fn schema_mismatch_is_rejected() {
    let (_, trained) = history();
    let cfg = PipelineConfig { schema: ChannelSchema::from_names(&["A", "B"]).unwrap(), ..PipelineConfig::default() };
    let inputs = RunInputs { model: trained.model.clone(), history: None };
    let err = run(std::iter::empty(), inputs, &cfg, &mut |_| {}).unwrap_err();
    assert!(matches!(err, PipelineError::Schema(_)), "{err}");
}

#[test]
fn clock_regression_is_reported_with_line() {
    let s = schema();
    let frame = |ts| SensorFrame::new(ts, vec![1.0; 5], &s).unwrap();
    let recs = vec![
        Ok(Record { line: 1, frame: frame(100), label: None }),
        Ok(Record { line: 2, frame: frame(120), label: None }),
        Ok(Record { line: 3, frame: frame(110), label: None }),
    ];
    let inputs = RunInputs { model: history().1.model.clone(), history: None };
    let err = run(recs.into_iter(), inputs, &PipelineConfig::default(), &mut |_| {}).unwrap_err();
    assert!(matches!(err, PipelineError::ClockRegression { line: 3, previous: 120, now: 110 }), "{err}");
}

#[test]
fn parse_errors_surface() {
    let recs = vec![Err(ParseError::MalformedLine { line: 4, reason: "bad".into() })];
    let inputs = RunInputs { model: history().1.model.clone(), history: None };
    let err = run(recs.into_iter(), inputs, &PipelineConfig::default(), &mut |_| {}).unwrap_err();
    assert!(matches!(err, PipelineError::Parse(_)));
}

#[test]
fn versions_along_rows_never_decrease() {
    let live = gen_cycles(&CyclePlan::default(), &reference_profiles(), &schema(), 10, 8).unwrap();
    let out = replay(&live.frames, &PipelineConfig::default()).unwrap();
    let versions: Vec<u64> = out.rows.iter().map(|r| r.model_version.unwrap()).collect();
    assert!(versions.windows(2).all(|w| w[0] <= w[1]));
    assert!(out.final_version > 1);
    assert!(*versions.last().unwrap() <= out.final_version);
    let published: Vec<u64> = out.batches.iter().filter_map(|b| b.version).collect();
    assert!(published.windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn rows_are_streamed_through_callback() {
    let live = gen_cycles(&CyclePlan::default(), &reference_profiles(), &schema(), 3, 8).unwrap();
    let (hist, trained) = history();
    let inputs = RunInputs { model: trained.model.clone(), history: Some(hist.frames.clone()) };
    let mut seen = Vec::new();
    let out = run(as_records(&live.frames).into_iter(), inputs, &PipelineConfig::default(), &mut |r| {
        seen.push(r.clone())
    })
    .unwrap();
    assert_eq!(seen, out.rows);
}

#[test]
fn live_mode_completes_and_tracks_truth() {
    let live = gen_cycles(&CyclePlan::default(), &reference_profiles(), &schema(), 10, 8).unwrap();
    let cfg = PipelineConfig { swap_mode: SwapMode::Live, ..PipelineConfig::default() };
    let out = replay(&live.frames, &cfg).unwrap();
    assert_eq!(out.frames, live.frames.len());
    assert!(out.frame_accuracy().unwrap() > 0.85);
}

#[test]
fn model_file_round_trips() {
    let model = &history().1.model;
    let text = model.to_json();
    let back = ModelFile::from_json(&text).unwrap();
    assert_eq!(back.to_json(), text);
    assert_eq!(back.snapshot.version, 1);
    assert_eq!(back.durations, model.durations);
    for s in history().0.frames.iter().step_by(97) {
        assert_eq!(back.snapshot.tree.predict(&s.frame).unwrap(), model.snapshot.tree.predict(&s.frame).unwrap());
    }
}

#[test]
fn model_file_rejects_foreign_documents() {
    assert!(ModelFile::from_json("{}").is_err());
    let text = history().1.model.to_json().replace("handtask-model/1", "other/9");
    assert!(ModelFile::from_json(&text).is_err());
}

#[test]
fn training_reports_holdout_metrics() {
    let trained = &history().1;
    let eval = trained.model.snapshot.eval.as_ref().unwrap();
    assert!(eval.accuracy > 0.9, "{}", eval.accuracy);
    assert!(trained.leaf_count >= 4);
    assert_eq!(trained.contribution.len(), 5);
    assert!(trained.model.references.is_some());
    assert!(trained.model.durations.iter().all(|d| d.len() >= 19));
}
