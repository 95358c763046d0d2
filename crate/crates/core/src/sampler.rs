//! Sliding-window stream filter.
//!
//! `W` arrays of `C` slots are laid out on a cyclic index space, each array
//! followed by a gap of `G` slots, giving a period `P = W * (C + G)`. Every
//! incoming frame carries a uniform draw in `[0, 1)`; the draw is mapped to
//! `r = floor(draw * P)` and the frame is stored if `r` lands inside an array,
//! otherwise it passes through. An array that has not been written for longer
//! than `stale_after` ms is force-refreshed by the next frame.

use serde::{Deserialize, Serialize};

use crate::error::SamplerError;
use crate::types::SensorFrame;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowConfig {
    pub windows: usize,
    pub capacity: usize,
    pub gap: usize,
    pub stale_after_ms: u64,
}

impl Default for WindowConfig {
    fn default() -> Self {
        WindowConfig { windows: 4, capacity: 64, gap: 64, stale_after_ms: 2000 }
    }
}

impl WindowConfig {
    pub fn validate(&self) -> Result<(), SamplerError> {
        if self.windows == 0 {
            return Err(SamplerError::InvalidConfig("windows must be >= 1"));
        }
        if self.capacity == 0 {
            return Err(SamplerError::InvalidConfig("capacity must be >= 1"));
        }
        Ok(())
    }

    /// Length of one array plus its trailing gap.
    pub fn stride(&self) -> usize {
        self.capacity + self.gap
    }

    pub fn period(&self) -> usize {
        self.windows * self.stride()
    }

    /// Long-run fraction of frames stored when nothing goes stale.
    pub fn acceptance_rate(&self) -> f64 {
        self.capacity as f64 / self.stride() as f64
    }

    pub fn total_slots(&self) -> usize {
        self.windows * self.capacity
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleDecision {
    Stored { window: usize, slot: usize },
    PassedThrough,
    ForcedStale { window: usize },
}

impl SampleDecision {
    pub fn accepted(&self) -> bool {
        !matches!(self, SampleDecision::PassedThrough)
    }
}

#[derive(Debug, Clone)]
pub struct WindowBank {
    config: WindowConfig,
    slots: Vec<Vec<Option<SensorFrame>>>,
    last_update: Vec<Option<u64>>,
    started_at: Option<u64>,
    last_now: Option<u64>,
}

impl WindowBank {
    pub fn new(config: WindowConfig) -> Result<Self, SamplerError> {
        config.validate()?;
        Ok(WindowBank {
            slots: vec![vec![None; config.capacity]; config.windows],
            last_update: vec![None; config.windows],
            started_at: None,
            last_now: None,
            config,
        })
    }

    pub fn config(&self) -> &WindowConfig {
        &self.config
    }

    pub fn last_update(&self, window: usize) -> Option<u64> {
        self.last_update[window]
    }

    /// Windows never written count as updated when the bank saw its first frame.
    fn is_stale(&self, window: usize, now: u64) -> bool {
        match self.last_update[window].or(self.started_at) {
            Some(t) => now.saturating_sub(t) > self.config.stale_after_ms,
            None => false,
        }
    }

    pub fn stale_windows(&self, now: u64) -> Vec<usize> {
        (0..self.config.windows).filter(|&w| self.is_stale(w, now)).collect()
    }

    pub fn offer(&mut self, frame: SensorFrame, draw: f64, now: u64) -> Result<SampleDecision, SamplerError> {
        if !(0.0..1.0).contains(&draw) {
            return Err(SamplerError::DrawOutOfRange(draw));
        }
        if let Some(prev) = self.last_now {
            if now < prev {
                return Err(SamplerError::NonMonotoneClock { previous: prev, now });
            }
        }
        self.last_now = Some(now);
        if self.started_at.is_none() {
            self.started_at = Some(now);
        }

        if let Some(window) = (0..self.config.windows).find(|&w| self.is_stale(w, now)) {
            let slot = ((draw * self.config.capacity as f64) as usize).min(self.config.capacity - 1);
            self.write(window, slot, frame, now);
            return Ok(SampleDecision::ForcedStale { window });
        }

        let period = self.config.period();
        let r = ((draw * period as f64) as usize).min(period - 1);
        let stride = self.config.stride();
        let offset = r % stride;
        if offset < self.config.capacity {
            let window = r / stride;
            self.write(window, offset, frame, now);
            Ok(SampleDecision::Stored { window, slot: offset })
        } else {
            Ok(SampleDecision::PassedThrough)
        }
    }

    fn write(&mut self, window: usize, slot: usize, frame: SensorFrame, now: u64) {
        self.slots[window][slot] = Some(frame);
        self.last_update[window] = Some(now);
    }

    /// Point-in-time copy of every filled slot, window-major then slot order.
    pub fn snapshot(&self) -> Vec<SensorFrame> {
        self.slots.iter().flatten().flatten().cloned().collect()
    }

    pub fn filled(&self) -> usize {
        self.slots.iter().flatten().filter(|s| s.is_some()).count()
    }
}
