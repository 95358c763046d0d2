//! Recursive Bayesian model of task processing times.
//!
//! Each task keeps a Gaussian belief over its latent mean duration. The prior
//! comes from historical durations; every completed task duration is a
//! Gaussian observation with known variance, so the posterior stays Gaussian:
//!
//! ```text
//! 1/tau'^2 = 1/tau^2 + 1/sigma^2
//! mu'      = tau'^2 * (mu/tau^2 + z/sigma^2)
//! ```
//!
//! A duration outside the credible interval of the current belief is flagged
//! abnormal.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::AnomalyError;
use crate::types::TaskLabel;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DurationPosterior {
    pub task: TaskLabel,
    /// Posterior mean of the latent duration, seconds.
    pub mean: f64,
    /// Posterior variance of the latent mean, seconds^2.
    pub variance: f64,
    /// Fixed observation variance, seconds^2.
    pub obs_variance: f64,
    /// Updates applied since the prior was formed.
    pub n: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IntervalMode {
    /// Interval on the latent mean.
    Mean,
    /// Interval on the next observation (adds the observation variance).
    Predictive,
}

impl std::str::FromStr for IntervalMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "mean" => Ok(IntervalMode::Mean),
            "predictive" => Ok(IntervalMode::Predictive),
            other => Err(format!("unknown interval mode {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AcceptanceInterval {
    pub lo: f64,
    pub hi: f64,
    pub level: f64,
}

impl AcceptanceInterval {
    pub fn contains(&self, x: f64) -> bool {
        self.lo <= x && x <= self.hi
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Normal,
    Abnormal,
    NA,
}

impl Verdict {
    /// Report spelling: "No", "Yes" or "NA".
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Normal => "No",
            Verdict::Abnormal => "Yes",
            Verdict::NA => "NA",
        }
    }

    pub fn parse(s: &str) -> Option<Verdict> {
        match s.trim().to_ascii_lowercase().as_str() {
            "no" => Some(Verdict::Normal),
            "yes" => Some(Verdict::Abnormal),
            "na" => Some(Verdict::NA),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnomalyRecord {
    pub task: TaskLabel,
    pub duration: f64,
    pub interval: Option<AcceptanceInterval>,
    pub verdict: Verdict,
}

/// Builds the prior from historical durations: mean and (floored) sample
/// variance, with the prior variance of the mean set to variance / n.
pub fn init_prior(
    task: TaskLabel,
    durations: &[f64],
    min_n: usize,
    variance_floor: f64,
) -> Result<DurationPosterior, AnomalyError> {
    let required = min_n.max(2);
    if durations.len() < required {
        return Err(AnomalyError::InsufficientHistory { got: durations.len(), required });
    }
    let n = durations.len() as f64;
    let mean = durations.iter().sum::<f64>() / n;
    let var = durations.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let obs_variance = var.max(variance_floor).max(f64::MIN_POSITIVE);
    Ok(DurationPosterior { task, mean, variance: obs_variance / n, obs_variance, n: 0 })
}

impl DurationPosterior {
    pub fn update(&self, z: f64) -> Result<DurationPosterior, AnomalyError> {
        if !(z > 0.0 && z.is_finite()) {
            return Err(AnomalyError::NonPositiveDuration(z));
        }
        let variance = 1.0 / (1.0 / self.variance + 1.0 / self.obs_variance);
        let mean = variance * (self.mean / self.variance + z / self.obs_variance);
        Ok(DurationPosterior { mean, variance, n: self.n + 1, ..*self })
    }

    pub fn credible_interval(&self, level: f64, mode: IntervalMode) -> Result<AcceptanceInterval, AnomalyError> {
        let q = two_sided_quantile(level)?;
        let spread = match mode {
            IntervalMode::Mean => self.variance.sqrt(),
            IntervalMode::Predictive => (self.variance + self.obs_variance).sqrt(),
        };
        Ok(AcceptanceInterval { lo: self.mean - q * spread, hi: self.mean + q * spread, level })
    }
}

/// Standard-normal quantile q with P(|Z| <= q) = level.
pub fn two_sided_quantile(level: f64) -> Result<f64, AnomalyError> {
    if !(level > 0.0 && level < 1.0) {
        return Err(AnomalyError::InvalidLevel(level));
    }
    let std = Normal::new(0.0, 1.0).expect("standard normal");
    Ok(std.inverse_cdf(0.5 + level / 2.0))
}

/// Closed-interval test; no interval means no verdict.
pub fn classify(duration: f64, interval: Option<&AcceptanceInterval>) -> Verdict {
    match interval {
        None => Verdict::NA,
        Some(i) if i.contains(duration) => Verdict::Normal,
        Some(_) => Verdict::Abnormal,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnomalyConfig {
    pub level: f64,
    pub mode: IntervalMode,
    pub min_history: usize,
    pub variance_floor: f64,
    /// Whether durations judged abnormal still update the posterior.
    pub update_on_abnormal: bool,
}

impl Default for AnomalyConfig {
    fn default() -> Self {
        AnomalyConfig {
            level: 0.99,
            mode: IntervalMode::Mean,
            min_history: 5,
            variance_floor: 1e-4,
            update_on_abnormal: true,
        }
    }
}

#[derive(Debug, Clone)]
struct TaskState {
    history: Vec<f64>,
    posterior: Option<DurationPosterior>,
}

/// One posterior per task. Tasks without enough history yield NA verdicts
/// and collect observed durations until a prior can be formed.
#[derive(Debug, Clone)]
pub struct AnomalyTracker {
    config: AnomalyConfig,
    tasks: BTreeMap<TaskLabel, TaskState>,
}

impl AnomalyTracker {
    pub fn new(config: AnomalyConfig) -> Self {
        AnomalyTracker { config, tasks: BTreeMap::new() }
    }

    pub fn config(&self) -> &AnomalyConfig {
        &self.config
    }

    fn state(&mut self, task: TaskLabel) -> &mut TaskState {
        self.tasks.entry(task).or_insert_with(|| TaskState { history: Vec::new(), posterior: None })
    }

    fn try_init(&mut self, task: TaskLabel) {
        let (min_n, floor) = (self.config.min_history, self.config.variance_floor);
        let st = self.state(task);
        if st.posterior.is_none() {
            if let Ok(p) = init_prior(task, &st.history, min_n, floor) {
                st.posterior = Some(p);
            }
        }
    }

    /// Adds historical durations ahead of the live stream.
    pub fn seed_history(&mut self, task: TaskLabel, durations: &[f64]) {
        let st = self.state(task);
        st.history.extend(durations.iter().copied().filter(|d| *d > 0.0 && d.is_finite()));
        self.try_init(task);
    }

    pub fn posterior(&self, task: TaskLabel) -> Option<&DurationPosterior> {
        self.tasks.get(&task).and_then(|s| s.posterior.as_ref())
    }

    /// Judges one completed duration against the current belief, then folds
    /// it into the belief.
    pub fn observe(&mut self, task: TaskLabel, duration: f64) -> AnomalyRecord {
        let cfg = self.config;
        let st = self.state(task);
        let Some(post) = st.posterior else {
            if duration > 0.0 && duration.is_finite() {
                st.history.push(duration);
            }
            self.try_init(task);
            return AnomalyRecord { task, duration, interval: None, verdict: Verdict::NA };
        };
        let interval = post.credible_interval(cfg.level, cfg.mode).ok();
        let verdict = classify(duration, interval.as_ref());
        if verdict == Verdict::Normal || cfg.update_on_abnormal {
            if let Ok(next) = post.update(duration) {
                st.posterior = Some(next);
            }
        }
        AnomalyRecord { task, duration, interval, verdict }
    }
}
