//! On-disk corpus layout.
//!
//! ```text
//! <root>/corpus.json                       manifest: format, version, feature_dim, tasks
//! <root>/<task_id>/vocab.json              {"task_id", "actions": [...]}
//! <root>/<task_id>/annotations.jsonl       one {"video_id", "segments": [...]} per line
//! <root>/<task_id>/features/<video>.feat   ADTGFEAT binary
//! ```
//!
//! Feature files: magic `ADTGFEAT`, version `u16`, `T: u32`, `D: u32`, then
//! `T * D` little-endian `f32` values in row-major order.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{
    check_identifier, ActionVocabulary, Corpus, CorpusError, FeatureStream, Segment, TaskCorpus,
    VideoRecord,
};

pub const FEATURE_MAGIC: &[u8; 8] = b"ADTGFEAT";
pub const FEATURE_VERSION: u16 = 1;
const HEADER_LEN: usize = 8 + 2 + 4 + 4;
const MANIFEST_FILE: &str = "corpus.json";
const CORPUS_FORMAT: &str = "adtg-corpus";

fn parse_err(file: &str, location: impl Into<String>, message: impl Into<String>) -> CorpusError {
    CorpusError::Parse {
        file: file.to_string(),
        location: location.into(),
        message: message.into(),
    }
}

pub fn parse_features(bytes: &[u8], file: &str) -> Result<FeatureStream, CorpusError> {
    if bytes.len() < HEADER_LEN {
        return Err(parse_err(
            file,
            format!("byte {}", bytes.len()),
            format!("truncated header ({} of {HEADER_LEN} bytes)", bytes.len()),
        ));
    }
    if &bytes[..8] != FEATURE_MAGIC {
        return Err(parse_err(file, "byte 0", "bad magic, expected ADTGFEAT"));
    }
    let version = u16::from_le_bytes([bytes[8], bytes[9]]);
    if version != FEATURE_VERSION {
        return Err(parse_err(file, "byte 8", format!("unsupported version {version}")));
    }
    let frames = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[14..18].try_into().unwrap()) as usize;
    if frames == 0 || dim == 0 {
        return Err(parse_err(file, "byte 10", format!("empty stream {frames}x{dim}")));
    }
    let expected = frames
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| parse_err(file, "byte 10", "stream size overflows"))?;
    let body = &bytes[HEADER_LEN..];
    if body.len() != expected {
        return Err(parse_err(
            file,
            format!("byte {}", HEADER_LEN + body.len().min(expected)),
            format!("{frames}x{dim} stream needs {expected} payload bytes, found {}", body.len()),
        ));
    }
    let mut data = Vec::with_capacity(frames * dim);
    for (i, chunk) in body.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(parse_err(
                file,
                format!("byte {}", HEADER_LEN + 4 * i),
                "non-finite feature value",
            ));
        }
        data.push(v);
    }
    FeatureStream::new(frames, dim, data)
}

pub fn write_features(stream: &FeatureStream) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * stream.data().len());
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&(stream.frames() as u32).to_le_bytes());
    out.extend_from_slice(&(stream.dim() as u32).to_le_bytes());
    for v in stream.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentRecord {
    pub action: String,
    pub t_start: f64,
    pub t_end: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationLine {
    pub video_id: String,
    pub segments: Vec<SegmentRecord>,
}

/// Parses a JSON-lines annotation file; blank lines are skipped.
pub fn parse_annotations(
    text: &str,
    vocab: &ActionVocabulary,
    file: &str,
) -> Result<Vec<(String, Vec<Segment>)>, CorpusError> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let location = |col: usize| format!("line {}, column {col}", lineno + 1);
        let rec: AnnotationLine =
            serde_json::from_str(line).map_err(|e| parse_err(file, location(e.column()), e.to_string()))?;
        check_identifier("video id", &rec.video_id)?;
        let mut segments = Vec::with_capacity(rec.segments.len());
        for s in rec.segments {
            let action = vocab
                .id(&s.action)
                .filter(|id| vocab.is_action(*id))
                .ok_or_else(|| {
                    CorpusError::data(
                        format!("{file} line {}", lineno + 1),
                        format!("unknown action {:?} in video {}", s.action, rec.video_id),
                    )
                })?;
            segments.push(Segment {
                action,
                t_start: s.t_start,
                t_end: s.t_end,
            });
        }
        out.push((rec.video_id, segments));
    }
    Ok(out)
}

pub fn write_annotations(videos: &[VideoRecord], vocab: &ActionVocabulary) -> String {
    let mut out = String::new();
    for v in videos {
        let line = AnnotationLine {
            video_id: v.video_id.clone(),
            segments: v
                .segments
                .iter()
                .map(|s| SegmentRecord {
                    action: vocab.name(s.action).to_string(),
                    t_start: s.t_start,
                    t_end: s.t_end,
                })
                .collect(),
        };
        out.push_str(&serde_json::to_string(&line).expect("annotation serializes"));
        out.push('\n');
    }
    out
}

pub fn parse_vocabulary(text: &str, file: &str) -> Result<ActionVocabulary, CorpusError> {
    serde_json::from_str(text).map_err(|e| {
        parse_err(file, format!("line {}, column {}", e.line(), e.column()), e.to_string())
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusManifest {
    pub format: String,
    pub version: u32,
    pub feature_dim: usize,
    pub tasks: Vec<String>,
}

fn read_text(path: &Path) -> Result<String, CorpusError> {
    fs::read_to_string(path).map_err(|e| CorpusError::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CorpusError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| CorpusError::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| CorpusError::io(path, e))
}

fn task_dir(root: &Path, task_id: &str) -> PathBuf {
    root.join(task_id)
}

pub fn save_corpus(corpus: &Corpus, root: &Path) -> Result<(), CorpusError> {
    corpus.validate()?;
    let manifest = CorpusManifest {
        format: CORPUS_FORMAT.into(),
        version: 1,
        feature_dim: corpus.feature_dim().unwrap_or(0),
        tasks: corpus.tasks.iter().map(|t| t.task_id().to_string()).collect(),
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_file(&root.join(MANIFEST_FILE), json.as_bytes())?;
    for task in &corpus.tasks {
        let dir = task_dir(root, task.task_id());
        let vocab = serde_json::to_string_pretty(&task.vocab).expect("vocab serializes");
        write_file(&dir.join("vocab.json"), vocab.as_bytes())?;
        write_file(
            &dir.join("annotations.jsonl"),
            write_annotations(&task.videos, &task.vocab).as_bytes(),
        )?;
        for v in &task.videos {
            let path = dir.join("features").join(format!("{}.feat", v.video_id));
            write_file(&path, &write_features(&v.features))?;
        }
    }
    Ok(())
}

pub fn load_corpus(root: &Path) -> Result<Corpus, CorpusError> {
    let manifest_path = root.join(MANIFEST_FILE);
    let text = read_text(&manifest_path)?;
    let file = manifest_path.display().to_string();
    let manifest: CorpusManifest = serde_json::from_str(&text).map_err(|e| {
        parse_err(&file, format!("line {}, column {}", e.line(), e.column()), e.to_string())
    })?;
    if manifest.format != CORPUS_FORMAT || manifest.version != 1 {
        return Err(parse_err(
            &file,
            "line 1",
            format!("unsupported corpus format {} v{}", manifest.format, manifest.version),
        ));
    }
    let mut tasks = Vec::with_capacity(manifest.tasks.len());
    for task_id in &manifest.tasks {
        check_identifier("task id", task_id)?;
        let dir = task_dir(root, task_id);
        let vocab_path = dir.join("vocab.json");
        let vocab = parse_vocabulary(&read_text(&vocab_path)?, &vocab_path.display().to_string())?;
        if vocab.task_id() != task_id {
            return Err(CorpusError::data(
                vocab_path.display().to_string(),
                format!("vocabulary is for task {} not {task_id}", vocab.task_id()),
            ));
        }
        let ann_path = dir.join("annotations.jsonl");
        let lines = parse_annotations(&read_text(&ann_path)?, &vocab, &ann_path.display().to_string())?;
        let mut videos = Vec::with_capacity(lines.len());
        for (video_id, segments) in lines {
            let feat_path = dir.join("features").join(format!("{video_id}.feat"));
            let bytes = fs::read(&feat_path).map_err(|e| CorpusError::io(&feat_path, e))?;
            let features = parse_features(&bytes, &feat_path.display().to_string())?;
            if features.dim() != manifest.feature_dim {
                return Err(CorpusError::data(
                    format!("video {video_id}"),
                    format!(
                        "feature dimension {} does not match corpus dimension {}",
                        features.dim(),
                        manifest.feature_dim
                    ),
                ));
            }
            let video = VideoRecord {
                video_id,
                task_id: task_id.clone(),
                features,
                segments,
            };
            video.validate(&vocab)?;
            videos.push(video);
        }
        tasks.push(TaskCorpus { vocab, videos });
    }
    let corpus = Corpus { tasks };
    corpus.validate()?;
    Ok(corpus)
}
