//! Domain types shared by every other module: support actions, task items,
//! datasets, interaction records, and the 0/1 decision loss.

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type ActionId = String;

const DISTRIBUTION_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("context entry {index} is not finite")]
    NonFiniteEntry { index: usize },
    #[error("label {label} out of range for {label_count} labels")]
    LabelOutOfRange { label: usize, label_count: usize },
}

/// What a form of support shows the decision-maker.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SupportKind {
    NoSupport,
    ModelPrediction,
    ConsensusDistribution,
    LlmAnswer,
    Other,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupportAction {
    pub action_id: ActionId,
    pub kind: SupportKind,
    /// Cost of showing this support, in `[0, 1]`.
    pub cost: f64,
}

/// Dense feature vector describing an input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ContextVector(pub Vec<f64>);

impl ContextVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

impl From<Vec<f64>> for ContextVector {
    fn from(values: Vec<f64>) -> Self {
        Self(values)
    }
}

/// Scales `x` into the unit ball: `x / max(1, ||x||)`.
///
/// Vectors already inside the ball (including the zero vector) are returned
/// unchanged, so the operation is idempotent.
pub fn normalize_context(x: &ContextVector) -> Result<ContextVector, ModelError> {
    if let Some(index) = x.0.iter().position(|v| !v.is_finite()) {
        return Err(ModelError::NonFiniteEntry { index });
    }
    let norm = x.norm();
    if norm <= 1.0 {
        return Ok(x.clone());
    }
    let mut out: Vec<f64> = x.0.iter().map(|v| v / norm).collect();
    // Division can land a hair above 1; one more pass pins it.
    let renorm = out.iter().map(|v| v * v).sum::<f64>().sqrt();
    if renorm > 1.0 {
        out.iter_mut().for_each(|v| *v /= renorm);
    }
    Ok(ContextVector(out))
}

/// The 0/1 loss between a true label and a decision.
pub fn zero_one_loss(y: usize, y_hat: usize, label_count: usize) -> Result<u8, ModelError> {
    for label in [y, y_hat] {
        if label >= label_count {
            return Err(ModelError::LabelOutOfRange { label, label_count });
        }
    }
    Ok(u8::from(y != y_hat))
}

/// What a form of support displays for a particular item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Payload {
    /// A single predicted label.
    Label { value: usize },
    /// A distribution over labels (e.g. annotator votes).
    Distribution { value: Vec<f64> },
    /// Free text; `label` is the answer the text commits to, when known.
    Text {
        value: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        label: Option<usize>,
    },
}

impl Payload {
    /// The label this support points the decision-maker towards, if any.
    /// Distributions point at their argmax (first maximum on ties).
    pub fn support_label(&self) -> Option<usize> {
        match self {
            Payload::Label { value } => Some(*value),
            Payload::Distribution { value } => value
                .iter()
                .enumerate()
                .fold(None, |best: Option<(usize, f64)>, (i, &p)| match best {
                    Some((_, bp)) if bp >= p => best,
                    _ => Some((i, p)),
                })
                .map(|(i, _)| i),
            Payload::Text { label, .. } => *label,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskItem {
    pub item_id: String,
    pub context: ContextVector,
    pub true_label: usize,
    pub region: String,
    #[serde(default)]
    pub payloads: BTreeMap<ActionId, Payload>,
    /// Display stimulus (image URL or question text). Opaque to the engine.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stimulus: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskDataset {
    pub name: String,
    pub label_count: usize,
    #[serde(default)]
    pub label_names: Vec<String>,
    pub actions: Vec<SupportAction>,
    pub regions: Vec<String>,
    pub items: Vec<TaskItem>,
    /// Minimum time a question must be on screen before answering.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_display_ms: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ViolationKind {
    DimensionMismatch,
    MissingPayload,
    DistributionNotNormalized,
    UnknownRegion,
    DuplicateId,
    CostOutOfRange,
    LabelOutOfRange,
    NonFiniteEntry,
    UnknownAction,
    Empty,
}

/// One problem found while validating a dataset document.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub item_id: Option<String>,
    pub field: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.item_id {
            Some(id) => write!(f, "{:?} at item {id} ({}): {}", self.kind, self.field, self.message),
            None => write!(f, "{:?} ({}): {}", self.kind, self.field, self.message),
        }
    }
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("dataset is not valid JSON: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("dataset failed validation with {} violation(s); first: {}", .0.len(), .0[0])]
    Invalid(Vec<Violation>),
}

impl DatasetError {
    pub fn violations(&self) -> &[Violation] {
        match self {
            DatasetError::Invalid(v) => v,
            DatasetError::Parse(_) => &[],
        }
    }
}

/// Parses and validates a dataset document.
pub fn validate_dataset(raw: &str) -> Result<TaskDataset, DatasetError> {
    let dataset: TaskDataset = serde_json::from_str(raw)?;
    dataset.validate()?;
    Ok(dataset)
}

impl TaskDataset {
    pub fn from_json(raw: &str) -> Result<Self, DatasetError> {
        validate_dataset(raw)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("dataset serializes")
    }

    /// Checks every type invariant, collecting all violations.
    pub fn validate(&self) -> Result<(), DatasetError> {
        let mut out = Vec::new();
        let mut push = |kind, item_id: Option<&str>, field: &str, message: String| {
            out.push(Violation {
                kind,
                item_id: item_id.map(str::to_owned),
                field: field.to_owned(),
                message,
            })
        };

        if self.label_count < 2 {
            push(ViolationKind::LabelOutOfRange, None, "label_count", "at least two labels are required".into());
        }
        if self.actions.is_empty() {
            push(ViolationKind::Empty, None, "actions", "no support actions".into());
        }
        if self.items.is_empty() {
            push(ViolationKind::Empty, None, "items", "no items".into());
        }

        let mut action_ids = HashSet::new();
        for action in &self.actions {
            if !action_ids.insert(action.action_id.as_str()) {
                push(ViolationKind::DuplicateId, None, "actions.action_id", format!("duplicate action {}", action.action_id));
            }
            if !(0.0..=1.0).contains(&action.cost) || !action.cost.is_finite() {
                push(ViolationKind::CostOutOfRange, None, "actions.cost", format!("action {} has cost {}", action.action_id, action.cost));
            }
        }

        let regions: HashSet<&str> = self.regions.iter().map(String::as_str).collect();
        if regions.len() != self.regions.len() {
            push(ViolationKind::DuplicateId, None, "regions", "duplicate region tag".into());
        }

        let dim = self.items.first().map(|i| i.context.dim());
        let mut item_ids = HashSet::new();
        for item in &self.items {
            let id = Some(item.item_id.as_str());
            if !item_ids.insert(item.item_id.as_str()) {
                push(ViolationKind::DuplicateId, id, "item_id", "duplicate item id".into());
            }
            if Some(item.context.dim()) != dim || item.context.dim() == 0 {
                push(ViolationKind::DimensionMismatch, id, "context", format!("expected dimension {}, got {}", dim.unwrap_or(0), item.context.dim()));
            }
            if item.context.0.iter().any(|v| !v.is_finite()) {
                push(ViolationKind::NonFiniteEntry, id, "context", "non-finite context entry".into());
            }
            if item.true_label >= self.label_count {
                push(ViolationKind::LabelOutOfRange, id, "true_label", format!("label {} >= {}", item.true_label, self.label_count));
            }
            if !regions.contains(item.region.as_str()) {
                push(ViolationKind::UnknownRegion, id, "region", format!("unknown region {}", item.region));
            }
            for key in item.payloads.keys() {
                if !action_ids.contains(key.as_str()) {
                    push(ViolationKind::UnknownAction, id, "payloads", format!("payload for unknown action {key}"));
                }
            }
            for action in self.actions.iter().filter(|a| a.kind != SupportKind::NoSupport) {
                match item.payloads.get(&action.action_id) {
                    None => push(ViolationKind::MissingPayload, id, "payloads", format!("no payload for action {}", action.action_id)),
                    Some(Payload::Distribution { value }) => {
                        let sum: f64 = value.iter().sum();
                        if value.len() != self.label_count {
                            push(ViolationKind::DistributionNotNormalized, id, "payloads", format!("distribution for {} has {} entries, expected {}", action.action_id, value.len(), self.label_count));
                        } else if value.iter().any(|p| !p.is_finite() || *p < 0.0) || (sum - 1.0).abs() > DISTRIBUTION_TOLERANCE {
                            push(ViolationKind::DistributionNotNormalized, id, "payloads", format!("distribution for {} sums to {sum}", action.action_id));
                        }
                    }
                    Some(Payload::Label { value }) if *value >= self.label_count => {
                        push(ViolationKind::LabelOutOfRange, id, "payloads", format!("predicted label {value} for {}", action.action_id));
                    }
                    Some(Payload::Text { label: Some(l), .. }) if *l >= self.label_count => {
                        push(ViolationKind::LabelOutOfRange, id, "payloads", format!("answer label {l} for {}", action.action_id));
                    }
                    Some(_) => {}
                }
            }
        }

        if out.is_empty() {
            Ok(())
        } else {
            Err(DatasetError::Invalid(out))
        }
    }

    /// Context dimension shared by every item.
    pub fn dim(&self) -> usize {
        self.items.first().map_or(0, |i| i.context.dim())
    }

    pub fn action_index(&self, action_id: &str) -> Option<usize> {
        self.actions.iter().position(|a| a.action_id == action_id)
    }

    pub fn action_ids(&self) -> Vec<ActionId> {
        self.actions.iter().map(|a| a.action_id.clone()).collect()
    }

    pub fn costs(&self) -> Vec<f64> {
        self.actions.iter().map(|a| a.cost).collect()
    }

    pub fn item(&self, item_id: &str) -> Option<&TaskItem> {
        self.items.iter().find(|i| i.item_id == item_id)
    }

    pub fn item_position(&self, item_id: &str) -> Option<usize> {
        self.items.iter().position(|i| i.item_id == item_id)
    }
}

/// One trial of a session: the unit of persistence and of the KNN buffer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionRecord {
    pub t: usize,
    pub item_id: String,
    pub action_id: ActionId,
    pub human_label: usize,
    pub loss: u8,
    /// Whether the shown support pointed at the true label. Absent for
    /// no-support trials and for support that commits to no label.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub support_was_correct: Option<bool>,
    /// The label the shown support pointed at.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub support_label: Option<usize>,
}
