//! Seeded synthetic glove streams.
//!
//! Each task is a Gaussian blob around a centroid over the reference channels;
//! a cycle runs the planned tasks back to back with Gaussian durations. The
//! generator also emits the ground-truth task events so every downstream
//! stage can be scored.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::SimError;
use crate::timeline::TaskEvent;
use crate::types::{ChannelId, ChannelSchema, LabeledSample, SensorFrame, TaskLabel, REFERENCE_CHANNELS};

/// Per-task centroids over `REFERENCE_CHANNELS`, in `TaskLabel::ALL` order.
pub const REFERENCE_CENTROIDS: [[f64; 5]; 4] = [
    [1.167, 0.430, 0.634, -2.062, 1.093],
    [3.293, 2.059, 2.816, 0.480, 2.723],
    [3.612, 2.400, 3.400, -0.355, 2.805],
    [2.800, 2.022, 2.822, -0.820, 2.133],
];

/// Default mean durations in seconds, in `TaskLabel::ALL` order.
pub const REFERENCE_DURATIONS: [f64; 4] = [4.2, 2.7, 3.4, 13.0];

pub const DEFAULT_CHANNEL_SIGMA: f64 = 0.3;
/// Duration spread as a fraction of the mean.
pub const DEFAULT_DURATION_CV: f64 = 0.05;
pub const DEFAULT_FRAME_PERIOD_MS: u64 = 20;
const SIGMA_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskProfile {
    pub label: TaskLabel,
    pub centroid: Vec<(ChannelId, f64)>,
    pub channel_sigma: f64,
    pub duration_mean: f64,
    pub duration_sigma: f64,
}

impl TaskProfile {
    pub fn reference(label: TaskLabel) -> Self {
        let i = label.index();
        let centroid = REFERENCE_CHANNELS
            .iter()
            .zip(REFERENCE_CENTROIDS[i])
            .map(|(name, v)| (ChannelId::new(*name).expect("static channel"), v))
            .collect();
        TaskProfile {
            label,
            centroid,
            channel_sigma: DEFAULT_CHANNEL_SIGMA,
            duration_mean: REFERENCE_DURATIONS[i],
            duration_sigma: DEFAULT_DURATION_CV * REFERENCE_DURATIONS[i],
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.channel_sigma >= 0.0 && self.channel_sigma.is_finite()) {
            return Err(SimError::InvalidProfile("channel_sigma must be finite and >= 0"));
        }
        if !(self.duration_mean > 0.0 && self.duration_mean.is_finite()) {
            return Err(SimError::InvalidProfile("duration_mean must be > 0"));
        }
        if !(self.duration_sigma >= 0.0 && self.duration_sigma.is_finite()) {
            return Err(SimError::InvalidProfile("duration_sigma must be finite and >= 0"));
        }
        Ok(())
    }

    /// Per-schema-channel means; channels the profile does not know sit at 0.
    fn means(&self, schema: &ChannelSchema) -> Vec<f64> {
        schema
            .channels()
            .iter()
            .map(|c| self.centroid.iter().find(|(id, _)| id == c).map_or(0.0, |(_, v)| *v))
            .collect()
    }
}

/// One reference profile per task, in `TaskLabel::ALL` order.
pub fn reference_profiles() -> Vec<TaskProfile> {
    TaskLabel::ALL.iter().map(|&l| TaskProfile::reference(l)).collect()
}

/// Profiles with every channel sigma replaced.
pub fn profiles_with_sigma(sigma: f64) -> Vec<TaskProfile> {
    reference_profiles().into_iter().map(|p| TaskProfile { channel_sigma: sigma, ..p }).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CyclePlan {
    pub tasks: Vec<TaskLabel>,
    pub frame_period_ms: u64,
    /// Forced durations `(cycle, task, seconds)` that bypass the random draw.
    pub overrides: Vec<(usize, TaskLabel, f64)>,
}

impl Default for CyclePlan {
    fn default() -> Self {
        CyclePlan { tasks: TaskLabel::ALL.to_vec(), frame_period_ms: DEFAULT_FRAME_PERIOD_MS, overrides: Vec::new() }
    }
}

impl CyclePlan {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.tasks.is_empty() {
            return Err(SimError::InvalidPlan("task sequence is empty"));
        }
        if self.frame_period_ms == 0 {
            return Err(SimError::InvalidPlan("frame period must be > 0"));
        }
        if self.overrides.iter().any(|o| !(o.2 > 0.0 && o.2.is_finite())) {
            return Err(SimError::InvalidPlan("override durations must be > 0"));
        }
        Ok(())
    }

    fn override_for(&self, cycle: usize, task: TaskLabel) -> Option<f64> {
        self.overrides.iter().find(|o| o.0 == cycle && o.1 == task).map(|o| o.2)
    }
}

fn push_frames(
    rng: &mut ChaCha8Rng,
    profile: &TaskProfile,
    schema: &ChannelSchema,
    count: usize,
    start_ts: u64,
    period: u64,
    out: &mut Vec<LabeledSample>,
) {
    let means = profile.means(schema);
    let noise = Normal::new(0.0, profile.channel_sigma.max(SIGMA_FLOOR)).expect("valid sigma");
    for i in 0..count {
        let values: Vec<f64> = means.iter().map(|m| m + noise.sample(rng)).collect();
        let frame = SensorFrame::new(start_ts + i as u64 * period, values, schema).expect("schema-sized frame");
        out.push(LabeledSample::historical(frame, profile.label));
    }
}

pub fn gen_frames(
    profile: &TaskProfile,
    schema: &ChannelSchema,
    count: usize,
    seed: u64,
    start_ts: u64,
    period: u64,
) -> Result<Vec<LabeledSample>, SimError> {
    profile.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    push_frames(&mut rng, profile, schema, count, start_ts, period, &mut out);
    Ok(out)
}

/// `per_label` frames of every profile, concatenated in profile order on one
/// clock.
pub fn gen_mixture(
    profiles: &[TaskProfile],
    schema: &ChannelSchema,
    per_label: usize,
    seed: u64,
) -> Result<Vec<LabeledSample>, SimError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(per_label * profiles.len());
    for p in profiles {
        p.validate()?;
        let start = out.len() as u64 * DEFAULT_FRAME_PERIOD_MS;
        push_frames(&mut rng, p, schema, per_label, start, DEFAULT_FRAME_PERIOD_MS, &mut out);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimOutput {
    pub frames: Vec<LabeledSample>,
    /// One complete event per task run; `start_id` indexes into `frames`.
    pub truth: Vec<TaskEvent>,
}

pub fn gen_cycles(
    plan: &CyclePlan,
    profiles: &[TaskProfile],
    schema: &ChannelSchema,
    n_cycles: usize,
    seed: u64,
) -> Result<SimOutput, SimError> {
    plan.validate()?;
    if n_cycles == 0 {
        return Err(SimError::NoCycles);
    }
    let lookup = |t: TaskLabel| profiles.iter().find(|p| p.label == t).ok_or(SimError::MissingProfile(t));
    for &t in &plan.tasks {
        lookup(t)?.validate()?;
    }

    let period = plan.frame_period_ms;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut frames = Vec::new();
    let mut truth = Vec::with_capacity(n_cycles * plan.tasks.len());
    let mut ts = 0u64;
    for cycle in 0..n_cycles {
        for &task in &plan.tasks {
            let profile = lookup(task)?;
            let drawn = match plan.override_for(cycle, task) {
                Some(d) => d,
                None => {
                    let dist = Normal::new(profile.duration_mean, profile.duration_sigma.max(SIGMA_FLOOR))
                        .expect("valid duration");
                    dist.sample(&mut rng)
                }
            };
            let count = ((drawn * 1000.0 / period as f64).round() as i64).max(1) as usize;
            let start_id = frames.len() as u64;
            push_frames(&mut rng, profile, schema, count, ts, period, &mut frames);
            let end_ts = ts + count as u64 * period;
            truth.push(TaskEvent {
                label: task,
                start_id,
                start_ts: ts,
                end_ts: Some(end_ts),
                processing_time: Some((end_ts - ts) as f64 / 1000.0),
            });
            ts = end_ts;
        }
    }
    Ok(SimOutput { frames, truth })
}

/// Truth events as CSV: `label,start_ts,end_ts,duration_s`.
pub fn write_truth<W: Write>(out: W, truth: &[TaskEvent]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["label", "start_ts", "end_ts", "duration_s"])?;
    for ev in truth {
        w.write_record([
            ev.label.ident().to_string(),
            ev.start_ts.to_string(),
            ev.end_ts.map(|t| t.to_string()).unwrap_or_default(),
            ev.processing_time.map(|d| format!("{d:.3}")).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Ground-truth durations per task, in seconds.
pub fn durations_by_task(truth: &[TaskEvent]) -> [Vec<f64>; TaskLabel::COUNT] {
    let mut out: [Vec<f64>; TaskLabel::COUNT] = Default::default();
    for ev in truth {
        if let Some(d) = ev.processing_time {
            out[ev.label.index()].push(d);
        }
    }
    out
}
