//! Demonstration corpus: vocabularies, annotated feature streams, on-disk
//! formats, dataset splits and a synthetic procedural-task generator.

mod format;
mod labels;
mod split;
mod stats;
pub mod synth;

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use format::{
    load_corpus, parse_annotations, parse_features, parse_vocabulary, save_corpus,
    write_annotations, write_features, AnnotationLine, CorpusManifest, SegmentRecord,
    FEATURE_MAGIC, FEATURE_VERSION,
};
pub use labels::{
    compressed_sequence, condition_windows, framewise_labels, round_half_up, ConditionWindows,
};
pub use split::{split_corpus, split_dataset, CorpusSplit, Split};
pub use stats::{corpus_stats, render_stats, StatsRow};

pub const NULL_NAME: &str = "<NULL>";
pub const EOS_NAME: &str = "<EOS>";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{file}: parse error at {location}: {message}")]
    Parse {
        file: String,
        location: String,
        message: String,
    },
    #[error("data error in {context}: {message}")]
    Data { context: String, message: String },
    #[error("invalid synthetic task spec: {0}")]
    Spec(String),
    #[error("I/O error on {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl CorpusError {
    pub(crate) fn data(context: impl Into<String>, message: impl Into<String>) -> Self {
        CorpusError::Data {
            context: context.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        CorpusError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

/// Index into a task vocabulary. `0` is the null action; the end-of-sequence
/// token sits one past the last real action.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ActionId(pub u32);

impl ActionId {
    pub const NULL: ActionId = ActionId(0);

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn is_null(self) -> bool {
        self == Self::NULL
    }
}

impl fmt::Display for ActionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// Ordered action names of one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "VocabFile", into = "VocabFile")]
pub struct ActionVocabulary {
    task_id: String,
    actions: Vec<String>,
    index: HashMap<String, ActionId>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    task_id: String,
    actions: Vec<String>,
}

impl TryFrom<VocabFile> for ActionVocabulary {
    type Error = CorpusError;

    fn try_from(v: VocabFile) -> Result<Self, Self::Error> {
        ActionVocabulary::new(v.task_id, v.actions)
    }
}

impl From<ActionVocabulary> for VocabFile {
    fn from(v: ActionVocabulary) -> Self {
        VocabFile {
            task_id: v.task_id,
            actions: v.actions,
        }
    }
}

/// Identifiers double as file and directory names.
pub(crate) fn check_identifier(kind: &str, id: &str) -> Result<(), CorpusError> {
    let ok = !id.is_empty()
        && id.len() <= 128
        && !id.starts_with('.')
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'));
    if ok {
        Ok(())
    } else {
        Err(CorpusError::data(
            kind,
            format!("{id:?} is not a valid identifier (ASCII letters, digits, '_', '-', '.')"),
        ))
    }
}

impl ActionVocabulary {
    pub fn new(task_id: impl Into<String>, actions: Vec<String>) -> Result<Self, CorpusError> {
        let task_id = task_id.into();
        check_identifier("task id", &task_id)?;
        if actions.is_empty() {
            return Err(CorpusError::data(&task_id, "vocabulary has no actions"));
        }
        let mut index = HashMap::new();
        for (i, name) in actions.iter().enumerate() {
            if name.is_empty() || name == NULL_NAME || name == EOS_NAME {
                return Err(CorpusError::data(
                    &task_id,
                    format!("action name {name:?} is empty or reserved"),
                ));
            }
            if index.insert(name.clone(), ActionId(i as u32 + 1)).is_some() {
                return Err(CorpusError::data(&task_id, format!("duplicate action {name:?}")));
            }
        }
        Ok(Self {
            task_id,
            actions,
            index,
        })
    }

    pub fn task_id(&self) -> &str {
        &self.task_id
    }

    pub fn actions(&self) -> &[String] {
        &self.actions
    }

    /// Number of real actions (excluding NULL and EOS).
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn eos(&self) -> ActionId {
        ActionId(self.actions.len() as u32 + 1)
    }

    pub fn id(&self, name: &str) -> Option<ActionId> {
        match name {
            NULL_NAME => Some(ActionId::NULL),
            EOS_NAME => Some(self.eos()),
            _ => self.index.get(name).copied(),
        }
    }

    pub fn name(&self, id: ActionId) -> &str {
        if id.is_null() {
            NULL_NAME
        } else if id == self.eos() {
            EOS_NAME
        } else {
            &self.actions[id.index() - 1]
        }
    }

    pub fn is_action(&self, id: ActionId) -> bool {
        id.0 >= 1 && id.index() <= self.actions.len()
    }

    /// Real action ids in index order.
    pub fn action_ids(&self) -> impl Iterator<Item = ActionId> {
        (1..=self.actions.len() as u32).map(ActionId)
    }
}

/// An annotated action occurrence, in seconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub action: ActionId,
    pub t_start: f64,
    pub t_end: f64,
}

impl Segment {
    /// Inclusive 1-based second interval after rounding both ends half-up.
    pub fn rounded(&self) -> (i64, i64) {
        (round_half_up(self.t_start), round_half_up(self.t_end))
    }
}

/// `T × D` per-second feature vectors, stored as 32-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStream {
    frames: usize,
    dim: usize,
    data: Vec<f32>,
}

impl FeatureStream {
    pub fn new(frames: usize, dim: usize, data: Vec<f32>) -> Result<Self, CorpusError> {
        if frames == 0 || dim == 0 {
            return Err(CorpusError::data("features", "T and D must be positive"));
        }
        if frames.checked_mul(dim) != Some(data.len()) {
            return Err(CorpusError::data(
                "features",
                format!("{frames}x{dim} stream needs {} values, got {}", frames * dim, data.len()),
            ));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(CorpusError::data("features", format!("non-finite value at index {i}")));
        }
        Ok(Self { frames, dim, data })
    }

    /// Number of seconds `T`.
    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Frame of second `t` (1-based).
    pub fn frame(&self, t: usize) -> &[f32] {
        assert!(t >= 1 && t <= self.frames, "second {t} outside 1..={}", self.frames);
        &self.data[(t - 1) * self.dim..t * self.dim]
    }

    pub fn frame_f64(&self, t: usize) -> Vec<f64> {
        self.frame(t).iter().map(|v| *v as f64).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoRecord {
    pub video_id: String,
    pub task_id: String,
    pub features: FeatureStream,
    pub segments: Vec<Segment>,
}

impl VideoRecord {
    /// Checks segment ordering, bounds and rounded non-overlap.
    pub fn validate(&self, vocab: &ActionVocabulary) -> Result<(), CorpusError> {
        let ctx = || format!("video {}", self.video_id);
        let t_max = self.features.frames() as i64;
        let mut prev_end: Option<i64> = None;
        let mut prev_start = f64::NEG_INFINITY;
        for seg in &self.segments {
            if !vocab.is_action(seg.action) {
                return Err(CorpusError::data(ctx(), format!("segment uses non-action id {}", seg.action)));
            }
            if !(seg.t_start.is_finite() && seg.t_end.is_finite())
                || seg.t_start < 0.0
                || seg.t_start >= seg.t_end
            {
                return Err(CorpusError::data(
                    ctx(),
                    format!("segment [{}, {}] is not a valid interval", seg.t_start, seg.t_end),
                ));
            }
            if seg.t_start < prev_start {
                return Err(CorpusError::data(ctx(), "segments are not sorted by start time"));
            }
            prev_start = seg.t_start;
            let (t1, t2) = seg.rounded();
            if t1 < 1 || t2 > t_max {
                return Err(CorpusError::data(
                    ctx(),
                    format!(
                        "segment [{}, {}] rounds to [{t1}, {t2}] outside 1..={t_max}",
                        seg.t_start, seg.t_end
                    ),
                ));
            }
            if let Some(pe) = prev_end {
                if t1 <= pe {
                    return Err(CorpusError::data(
                        ctx(),
                        format!("segment starting at {} overlaps the previous one after rounding", seg.t_start),
                    ));
                }
            }
            prev_end = Some(t2);
        }
        Ok(())
    }
}

/// All videos of one task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskCorpus {
    pub vocab: ActionVocabulary,
    pub videos: Vec<VideoRecord>,
}

impl TaskCorpus {
    pub fn task_id(&self) -> &str {
        self.vocab.task_id()
    }

    pub fn video(&self, video_id: &str) -> Option<&VideoRecord> {
        self.videos.iter().find(|v| v.video_id == video_id)
    }

    pub fn video_ids(&self) -> Vec<String> {
        self.videos.iter().map(|v| v.video_id.clone()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub tasks: Vec<TaskCorpus>,
}

impl Corpus {
    pub fn task(&self, task_id: &str) -> Option<&TaskCorpus> {
        self.tasks.iter().find(|t| t.task_id() == task_id)
    }

    /// Feature dimension shared by every video.
    pub fn feature_dim(&self) -> Option<usize> {
        self.tasks
            .iter()
            .flat_map(|t| t.videos.iter())
            .map(|v| v.features.dim())
            .next()
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        let dim = self.feature_dim();
        let mut seen_tasks = std::collections::HashSet::new();
        for task in &self.tasks {
            if !seen_tasks.insert(task.task_id()) {
                return Err(CorpusError::data("corpus", format!("duplicate task {}", task.task_id())));
            }
            let mut seen = std::collections::HashSet::new();
            for v in &task.videos {
                check_identifier("video id", &v.video_id)?;
                if !seen.insert(v.video_id.as_str()) {
                    return Err(CorpusError::data(task.task_id(), format!("duplicate video {}", v.video_id)));
                }
                if v.task_id != task.task_id() {
                    return Err(CorpusError::data(
                        format!("video {}", v.video_id),
                        format!("belongs to task {} but is filed under {}", v.task_id, task.task_id()),
                    ));
                }
                if Some(v.features.dim()) != dim {
                    return Err(CorpusError::data(
                        format!("video {}", v.video_id),
                        format!("feature dimension {} differs from corpus dimension {:?}", v.features.dim(), dim),
                    ));
                }
                v.validate(&task.vocab)?;
            }
        }
        Ok(())
    }
}
