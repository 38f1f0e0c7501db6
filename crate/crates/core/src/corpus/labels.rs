use super::{ActionId, ActionVocabulary, CorpusError, Segment, VideoRecord};
use crate::numkit::Tensor;

/// Nearest integer with ties rounded up.
pub fn round_half_up(x: f64) -> i64 {
    (x + 0.5).floor() as i64
}

/// Per-second action ids (index `t - 1` holds second `t`). Seconds outside
/// every rounded, inclusive segment interval are NULL.
pub fn framewise_labels(
    video: &VideoRecord,
    vocab: &ActionVocabulary,
) -> Result<Vec<ActionId>, CorpusError> {
    let t_max = video.features.frames();
    let mut labels = vec![ActionId::NULL; t_max];
    for seg in &video.segments {
        if !vocab.is_action(seg.action) {
            return Err(CorpusError::data(
                format!("video {}", video.video_id),
                format!("segment uses non-action id {}", seg.action),
            ));
        }
        let (t1, t2) = seg.rounded();
        let lo = t1.max(1) as usize;
        let hi = (t2.min(t_max as i64)).max(0) as usize;
        for t in lo..=hi {
            if !labels[t - 1].is_null() {
                return Err(CorpusError::data(
                    format!("video {}", video.video_id),
                    format!("segments overlap at second {t} after rounding"),
                ));
            }
            labels[t - 1] = seg.action;
        }
    }
    Ok(labels)
}

/// Runs of identical labels collapsed to one entry, with NULL runs dropped.
pub fn compressed_sequence(labels: &[ActionId]) -> Vec<ActionId> {
    let mut out = Vec::new();
    let mut prev: Option<ActionId> = None;
    for &l in labels {
        if prev != Some(l) && !l.is_null() {
            out.push(l);
        }
        prev = Some(l);
    }
    out
}

/// Two-frame windows around the start and end of a segment, each `2 × D`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionWindows {
    pub pre: Tensor,
    pub post: Tensor,
}

/// `pre = (x[t1-1], x[t1])`, `post = (x[t2], x[t2+1])` with frame indices
/// clamped into `1..=T`.
pub fn condition_windows(video: &VideoRecord, seg: &Segment) -> ConditionWindows {
    let feats = &video.features;
    let t_max = feats.frames() as i64;
    let (t1, t2) = seg.rounded();
    let window = |a: i64, b: i64| {
        let mut data = Vec::with_capacity(2 * feats.dim());
        for t in [a, b] {
            let t = t.clamp(1, t_max) as usize;
            data.extend(feats.frame(t).iter().map(|v| *v as f64));
        }
        Tensor::matrix(2, feats.dim(), data).expect("window from validated features")
    };
    ConditionWindows {
        pre: window(t1 - 1, t1),
        post: window(t2, t2 + 1),
    }
}
