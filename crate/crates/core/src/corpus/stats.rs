use serde::{Deserialize, Serialize};

use super::{compressed_sequence, framewise_labels, Corpus, CorpusError};

/// Per-task dataset statistics in the layout of the dataset appendix table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsRow {
    pub task_id: String,
    pub videos: usize,
    pub action_space: usize,
    /// Mean length of the compressed action sequence per video.
    pub mean_steps: f64,
    /// Fraction of all seconds labelled NULL.
    pub null_fraction: f64,
}

pub fn corpus_stats(corpus: &Corpus) -> Result<Vec<StatsRow>, CorpusError> {
    let mut rows = Vec::with_capacity(corpus.tasks.len());
    for task in &corpus.tasks {
        let mut steps = 0usize;
        let mut seconds = 0usize;
        let mut nulls = 0usize;
        for v in &task.videos {
            let labels = framewise_labels(v, &task.vocab)?;
            steps += compressed_sequence(&labels).len();
            seconds += labels.len();
            nulls += labels.iter().filter(|l| l.is_null()).count();
        }
        let n = task.videos.len();
        rows.push(StatsRow {
            task_id: task.task_id().to_string(),
            videos: n,
            action_space: task.vocab.len(),
            mean_steps: if n == 0 { 0.0 } else { steps as f64 / n as f64 },
            null_fraction: if seconds == 0 { 0.0 } else { nulls as f64 / seconds as f64 },
        });
    }
    Ok(rows)
}

/// Plain-text table, one row per task plus an unweighted average row.
pub fn render_stats(rows: &[StatsRow]) -> String {
    let width = rows.iter().map(|r| r.task_id.len()).max().unwrap_or(0).max(7);
    let mut out = format!(
        "{:<width$}  {:>6}  {:>6}  {:>6}  {:>6}\n",
        "task", "videos", "A_T", "steps", "null%"
    );
    let line = |name: &str, videos: f64, actions: f64, steps: f64, null: f64, int: bool| {
        if int {
            format!("{name:<width$}  {videos:>6.0}  {actions:>6.0}  {steps:>6.2}  {:>6.1}\n", null * 100.0)
        } else {
            format!("{name:<width$}  {videos:>6.1}  {actions:>6.1}  {steps:>6.2}  {:>6.1}\n", null * 100.0)
        }
    };
    for r in rows {
        out.push_str(&line(
            &r.task_id,
            r.videos as f64,
            r.action_space as f64,
            r.mean_steps,
            r.null_fraction,
            true,
        ));
    }
    if !rows.is_empty() {
        let n = rows.len() as f64;
        let mean = |f: &dyn Fn(&StatsRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
        out.push_str(&line(
            "average",
            mean(&|r| r.videos as f64),
            mean(&|r| r.action_space as f64),
            mean(&|r| r.mean_steps),
            mean(&|r| r.null_fraction),
            false,
        ));
    }
    out
}
