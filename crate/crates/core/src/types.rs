//! Domain types shared by every stage of the pipeline.

use std::collections::{HashSet, VecDeque};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::SchemaError;

/// Name of one sensor channel, e.g. `RING3.Z`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ChannelId(String);

impl ChannelId {
    pub fn new(name: impl Into<String>) -> Result<Self, SchemaError> {
        let name = name.into();
        if name.trim().is_empty() {
            return Err(SchemaError::EmptyChannel);
        }
        Ok(ChannelId(name))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for ChannelId {
    type Error = SchemaError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        ChannelId::new(s)
    }
}

impl From<ChannelId> for String {
    fn from(c: ChannelId) -> String {
        c.0
    }
}

impl fmt::Display for ChannelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// The five glove channels carrying task information in the reference setup.
pub const REFERENCE_CHANNELS: [&str; 5] = ["RING3.Z", "INDEX1.Z", "INDEX2.Z", "MIDDLE1.X", "LITTLE2.Z"];

/// Ordered set of channels. The order is the feature order used by every
/// vector operation downstream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<ChannelId>", into = "Vec<ChannelId>")]
pub struct ChannelSchema {
    channels: Vec<ChannelId>,
}

impl ChannelSchema {
    pub fn new(channels: Vec<ChannelId>) -> Result<Self, SchemaError> {
        if channels.is_empty() {
            return Err(SchemaError::NoChannels);
        }
        let mut seen = HashSet::new();
        for c in &channels {
            if !seen.insert(c.as_str()) {
                return Err(SchemaError::DuplicateChannel(c.to_string()));
            }
        }
        Ok(ChannelSchema { channels })
    }

    pub fn from_names<S: AsRef<str>>(names: &[S]) -> Result<Self, SchemaError> {
        let channels = names
            .iter()
            .map(|n| ChannelId::new(n.as_ref()))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(channels)
    }

    /// The 5-channel layout of the reference glove configuration.
    pub fn reference() -> Self {
        Self::from_names(&REFERENCE_CHANNELS).expect("reference schema is valid")
    }

    pub fn channels(&self) -> &[ChannelId] {
        &self.channels
    }

    pub fn len(&self) -> usize {
        self.channels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.channels.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.channels.iter().position(|c| c.as_str() == name)
    }

    pub fn channel(&self, idx: usize) -> &ChannelId {
        &self.channels[idx]
    }
}

impl TryFrom<Vec<ChannelId>> for ChannelSchema {
    type Error = SchemaError;
    fn try_from(v: Vec<ChannelId>) -> Result<Self, Self::Error> {
        ChannelSchema::new(v)
    }
}

impl From<ChannelSchema> for Vec<ChannelId> {
    fn from(s: ChannelSchema) -> Self {
        s.channels
    }
}

/// One timestamped reading of every schema channel, stored in schema order.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorFrame {
    pub ts: u64,
    values: Vec<f64>,
}

impl SensorFrame {
    /// Builds a frame from values already in schema order.
    pub fn new(ts: u64, values: Vec<f64>, schema: &ChannelSchema) -> Result<Self, SchemaError> {
        if values.len() != schema.len() {
            return Err(SchemaError::SchemaMismatch {
                expected: schema.len(),
                actual: values.len(),
            });
        }
        Ok(SensorFrame { ts, values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value(&self, idx: usize) -> f64 {
        self.values[idx]
    }
}

/// Ordered channel vector of a frame under `schema`.
pub fn channel_vector<'a>(frame: &'a SensorFrame, schema: &ChannelSchema) -> &'a [f64] {
    debug_assert_eq!(frame.values.len(), schema.len());
    &frame.values
}

/// The grafting tasks recognised by the engine, in declaration order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TaskLabel {
    ScionCutting,
    RootstockCutting,
    RootstockClipping,
    Joining,
}

impl TaskLabel {
    pub const ALL: [TaskLabel; 4] = [
        TaskLabel::ScionCutting,
        TaskLabel::RootstockCutting,
        TaskLabel::RootstockClipping,
        TaskLabel::Joining,
    ];
    pub const COUNT: usize = 4;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    /// Canonical identifier form (`ScionCutting`).
    pub fn ident(self) -> &'static str {
        match self {
            TaskLabel::ScionCutting => "ScionCutting",
            TaskLabel::RootstockCutting => "RootstockCutting",
            TaskLabel::RootstockClipping => "RootstockClipping",
            TaskLabel::Joining => "Joining",
        }
    }

    /// Human form used in reports (`Scion Cutting`).
    pub fn display_name(self) -> &'static str {
        match self {
            TaskLabel::ScionCutting => "Scion Cutting",
            TaskLabel::RootstockCutting => "Rootstock Cutting",
            TaskLabel::RootstockClipping => "Rootstock Clipping",
            TaskLabel::Joining => "Joining",
        }
    }
}

impl fmt::Display for TaskLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.display_name())
    }
}

/// Label text did not name one of the four tasks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnknownLabel(pub String);

impl FromStr for TaskLabel {
    type Err = UnknownLabel;

    /// Case- and whitespace-insensitive: "Scion Cutting", "scioncutting" and
    /// "ScionCutting" all map to the same label.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key: String = s
            .chars()
            .filter(|c| !c.is_whitespace())
            .flat_map(char::to_lowercase)
            .collect();
        match key.as_str() {
            "scioncutting" => Ok(TaskLabel::ScionCutting),
            "rootstockcutting" => Ok(TaskLabel::RootstockCutting),
            "rootstockclipping" => Ok(TaskLabel::RootstockClipping),
            "joining" => Ok(TaskLabel::Joining),
            _ => Err(UnknownLabel(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    Historical,
    PseudoLabeled,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub frame: SensorFrame,
    pub label: TaskLabel,
    pub provenance: Provenance,
}

impl LabeledSample {
    pub fn historical(frame: SensorFrame, label: TaskLabel) -> Self {
        LabeledSample { frame, label, provenance: Provenance::Historical }
    }

    pub fn pseudo(frame: SensorFrame, label: TaskLabel) -> Self {
        LabeledSample { frame, label, provenance: Provenance::PseudoLabeled }
    }
}

/// Bounded training set. Historical samples are pinned; pseudo-labeled
/// samples are evicted oldest first once capacity is reached.
#[derive(Debug, Clone)]
pub struct Dataset {
    schema: ChannelSchema,
    capacity: usize,
    historical: Vec<LabeledSample>,
    pseudo: VecDeque<LabeledSample>,
}

impl Dataset {
    pub fn new(schema: ChannelSchema, capacity: usize) -> Self {
        Dataset { schema, capacity: capacity.max(1), historical: Vec::new(), pseudo: VecDeque::new() }
    }

    /// Builds an unbounded dataset (capacity = sample count) from samples.
    pub fn from_samples(schema: ChannelSchema, samples: Vec<LabeledSample>) -> Self {
        let capacity = samples.len().max(1);
        let mut ds = Dataset::new(schema, capacity);
        for s in samples {
            match s.provenance {
                Provenance::Historical => ds.historical.push(s),
                Provenance::PseudoLabeled => ds.pseudo.push_back(s),
            }
        }
        ds
    }

    pub fn schema(&self) -> &ChannelSchema {
        &self.schema
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Raises capacity; it never drops below the number of historical samples.
    pub fn set_capacity(&mut self, capacity: usize) {
        self.capacity = capacity.max(self.historical.len()).max(1);
        self.enforce_capacity();
    }

    pub fn len(&self) -> usize {
        self.historical.len() + self.pseudo.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn historical_len(&self) -> usize {
        self.historical.len()
    }

    pub fn pseudo_len(&self) -> usize {
        self.pseudo.len()
    }

    /// Adds a historical sample, growing capacity if needed since historical
    /// samples may not be evicted.
    pub fn push_historical(&mut self, sample: LabeledSample) {
        self.historical.push(LabeledSample { provenance: Provenance::Historical, ..sample });
        if self.len() > self.capacity {
            if self.pseudo.is_empty() {
                self.capacity = self.len();
            } else {
                self.enforce_capacity();
            }
        }
    }

    /// Adds a pseudo-labeled sample; returns the evicted sample, if any.
    pub fn push_pseudo(&mut self, sample: LabeledSample) -> Option<LabeledSample> {
        self.pseudo.push_back(LabeledSample { provenance: Provenance::PseudoLabeled, ..sample });
        if self.len() > self.capacity {
            self.pseudo.pop_front()
        } else {
            None
        }
    }

    fn enforce_capacity(&mut self) {
        while self.len() > self.capacity && !self.pseudo.is_empty() {
            self.pseudo.pop_front();
        }
    }

    /// Historical samples first, then pseudo-labeled oldest to newest.
    pub fn samples(&self) -> impl Iterator<Item = &LabeledSample> + '_ {
        self.historical.iter().chain(self.pseudo.iter())
    }

    pub fn to_vec(&self) -> Vec<LabeledSample> {
        self.samples().cloned().collect()
    }

    pub fn label_counts(&self) -> [usize; TaskLabel::COUNT] {
        let mut counts = [0; TaskLabel::COUNT];
        for s in self.samples() {
            counts[s.label.index()] += 1;
        }
        counts
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(ts: u64, schema: &ChannelSchema) -> SensorFrame {
        SensorFrame::new(ts, vec![ts as f64; schema.len()], schema).unwrap()
    }

    #[test]
    fn schema_rejects_duplicates_and_empty_names() {
        assert_eq!(
            ChannelSchema::from_names(&["A", "B", "A"]),
            Err(SchemaError::DuplicateChannel("A".into()))
        );
        assert_eq!(ChannelSchema::from_names(&["A", " "]), Err(SchemaError::EmptyChannel));
        assert_eq!(ChannelSchema::from_names::<&str>(&[]), Err(SchemaError::NoChannels));
    }

    #[test]
    fn label_normalization_table() {
        let table = [
            ("ScionCutting", TaskLabel::ScionCutting),
            ("Scion Cutting", TaskLabel::ScionCutting),
            ("scion cutting", TaskLabel::ScionCutting),
            ("  SCION\tCUTTING ", TaskLabel::ScionCutting),
            ("Rootstock Cutting", TaskLabel::RootstockCutting),
            ("rootstockclipping", TaskLabel::RootstockClipping),
            ("Rootstock  Clipping", TaskLabel::RootstockClipping),
            ("Joining", TaskLabel::Joining),
            ("JOINING", TaskLabel::Joining),
        ];
        for (text, label) in table {
            assert_eq!(text.parse::<TaskLabel>(), Ok(label), "{text}");
        }
        assert!("Watering".parse::<TaskLabel>().is_err());
        assert!("Scion_Cutting".parse::<TaskLabel>().is_err());
        for l in TaskLabel::ALL {
            assert_eq!(l.display_name().parse::<TaskLabel>(), Ok(l));
            assert_eq!(l.ident().parse::<TaskLabel>(), Ok(l));
            assert_eq!(TaskLabel::from_index(l.index()), Some(l));
        }
    }

    #[test]
    fn dataset_evicts_oldest_pseudo_and_keeps_historical() {
        let schema = ChannelSchema::from_names(&["A"]).unwrap();
        let mut ds = Dataset::new(schema.clone(), 5);
        for t in 0..3 {
            ds.push_historical(LabeledSample::historical(frame(t, &schema), TaskLabel::Joining));
        }
        let k = 4;
        let mut evicted = Vec::new();
        for t in 100..(100 + 2 + k) {
            if let Some(s) = ds.push_pseudo(LabeledSample::pseudo(frame(t, &schema), TaskLabel::ScionCutting)) {
                evicted.push(s.frame.ts);
            }
        }
        assert_eq!(ds.len(), 5);
        assert_eq!(evicted, vec![100, 101, 102, 103]);
        assert_eq!(ds.historical_len(), 3);
        let ts: Vec<u64> = ds.samples().map(|s| s.frame.ts).collect();
        assert_eq!(ts, vec![0, 1, 2, 104, 105]);
    }

    #[test]
    fn historical_growth_beyond_capacity_is_kept() {
        let schema = ChannelSchema::from_names(&["A"]).unwrap();
        let mut ds = Dataset::new(schema.clone(), 2);
        for t in 0..4 {
            ds.push_historical(LabeledSample::historical(frame(t, &schema), TaskLabel::Joining));
        }
        assert_eq!(ds.len(), 4);
        assert!(ds.capacity() >= 4);
    }

    #[test]
    fn channel_vector_follows_schema() {
        let schema = ChannelSchema::reference();
        let f = SensorFrame::new(0, vec![1.167, 0.430, 0.634, -2.062, 1.093], &schema).unwrap();
        assert_eq!(channel_vector(&f, &schema), &[1.167, 0.430, 0.634, -2.062, 1.093]);
        assert!(SensorFrame::new(0, vec![1.0], &schema).is_err());
    }
}
