//! Metrics, evaluation drivers for tracking, recommendation and planning,
//! and the ablation harness.
//!
//! Per seed, counting metrics pool over all positions of a task and mIoU
//! averages over its videos; the aggregate is the unweighted mean over
//! tasks. Reports then give the mean and standard deviation over seeds.

mod metrics;
mod pipeline;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::corpus::{compressed_sequence, framewise_labels, ActionId, ActionVocabulary, Corpus, CorpusSplit, VideoRecord};
use crate::graph::Adtg;
use crate::{Error, Result};

pub use crate::config::Variant;
pub use metrics::{
    accuracy, accuracy_excl_null, loglik_pair, loglik_pair_argmax, match_counts, match_counts_excl_null, miou,
    prefix_match_counts, LogLikPair,
};
pub use pipeline::{
    build_graphs, train_embedding_stage, train_model, train_recommender_stage, train_tracker_stage, TrainLogs,
    TrainedModel,
};

/// A planning request: plan from `frame` (1-based) of `video` after the
/// teacher-forced `prefix`.
#[derive(Debug, Clone, Copy)]
pub struct PlanQuery<'a> {
    pub vocab: &'a ActionVocabulary,
    pub video: &'a VideoRecord,
    pub frame: usize,
    pub prefix: &'a [ActionId],
}

/// What evaluation needs from a trained model.
pub trait Guide {
    fn graph(&self, task_id: &str) -> Option<&Adtg>;
    /// Per-second predictions over a whole video.
    fn track(&self, vocab: &ActionVocabulary, video: &VideoRecord) -> Result<Vec<ActionId>>;
    /// Candidates and their log-probabilities after a non-empty history.
    fn recommend(&self, graph: &Adtg, history: &[ActionId]) -> Result<(Vec<ActionId>, Vec<f64>)>;
    fn plan(&self, graph: &Adtg, q: &PlanQuery<'_>) -> Result<Vec<ActionId>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    Tracking,
    Recommendation,
    PlanComplete,
    PlanPrefix,
}

impl EvalMode {
    pub const ALL: [EvalMode; 4] =
        [EvalMode::Tracking, EvalMode::Recommendation, EvalMode::PlanComplete, EvalMode::PlanPrefix];

    pub fn name(self) -> &'static str {
        match self {
            EvalMode::Tracking => "tracking",
            EvalMode::Recommendation => "recommendation",
            EvalMode::PlanComplete => "plan_complete",
            EvalMode::PlanPrefix => "plan_prefix",
        }
    }

    pub fn metrics(self) -> &'static [&'static str] {
        match self {
            EvalMode::Tracking => &["accuracy", "accuracy_excl_null"],
            EvalMode::Recommendation => &["accuracy", "loglik_prediction", "loglik_ground_truth"],
            EvalMode::PlanComplete | EvalMode::PlanPrefix => &["accuracy", "miou", "length_diff"],
        }
    }
}

impl std::str::FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EvalMode::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| {
            Error::Usage(format!(
                "unknown mode {s:?} (expected tracking, recommendation, plan_complete or plan_prefix)"
            ))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalOptions {
    /// Seed of the prefix cut points.
    pub cut_seed: u64,
    /// Complete plans start from frame `1 + plan_offset` (clamped).
    pub plan_offset: usize,
    pub variant: String,
    pub config_hash: String,
}

impl EvalOptions {
    pub fn from_config(cfg: &RunConfig) -> Self {
        Self {
            cut_seed: cfg.cut_seed,
            plan_offset: cfg.guidance.plan_offset,
            variant: cfg.variant.to_string(),
            config_hash: cfg.hash(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Population standard deviation; present with two or more values.
    pub std: Option<f64>,
    pub n: usize,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = (n >= 2).then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt());
        Some(Self { mean, std, n })
    }

    fn render(&self) -> String {
        match self.std {
            Some(s) => format!("{:.3} ± {:.3}", self.mean, s),
            None => format!("{:.3}", self.mean),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: EvalMode,
    pub variant: String,
    pub seeds: Vec<u64>,
    pub config_hash: String,
    pub metrics: Vec<String>,
    /// task → metric → over seeds.
    pub per_task: BTreeMap<String, BTreeMap<String, MeanStd>>,
    /// metric → over seeds of the per-seed task mean.
    pub aggregate: BTreeMap<String, MeanStd>,
    /// Per seed: metric → task mean.
    pub per_seed: Vec<BTreeMap<String, f64>>,
    /// Event counters summed over seeds (skipped steps and the like).
    pub counts: BTreeMap<String, usize>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Plain-text table: one row per metric, aggregate column first.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        let _ = writeln!(out, "{} | variant {} | seeds {}", self.mode.name(), self.variant, seeds.join(","));
        let tasks: Vec<&String> = self.per_task.keys().collect();
        let _ = write!(out, "{:<20} {:>15}", "metric", "all tasks");
        for t in &tasks {
            let _ = write!(out, " {:>15}", t);
        }
        out.push('\n');
        for m in &self.metrics {
            let cell = |x: Option<&MeanStd>| x.map(MeanStd::render).unwrap_or_else(|| "-".into());
            let _ = write!(out, "{:<20} {:>15}", m, cell(self.aggregate.get(m)));
            for t in &tasks {
                let _ = write!(out, " {:>15}", cell(self.per_task[*t].get(m)));
            }
            out.push('\n');
        }
        for (k, v) in &self.counts {
            let _ = writeln!(out, "{k}: {v}");
        }
        out
    }
}

/// Pooled counts for one task under one seed.
#[derive(Debug, Default)]
struct TaskTally {
    hit: usize,
    n: usize,
    hit_x: usize,
    n_x: usize,
    miou: Vec<f64>,
    len_diff: Vec<f64>,
    lp: Vec<Vec<f64>>,
    lp_gt: Vec<Option<usize>>,
}

impl TaskTally {
    fn metrics(&self, mode: EvalMode) -> Result<BTreeMap<String, f64>> {
        let mut m = BTreeMap::new();
        let ratio = |h: usize, n: usize| (n > 0).then(|| h as f64 / n as f64);
        let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
        let mut put = |k: &str, v: Option<f64>| {
            if let Some(v) = v {
                m.insert(k.to_string(), v);
            }
        };
        match mode {
            EvalMode::Tracking => {
                put("accuracy", ratio(self.hit, self.n));
                put("accuracy_excl_null", ratio(self.hit_x, self.n_x));
            }
            EvalMode::Recommendation => {
                put("accuracy", ratio(self.hit, self.n));
                if self.lp_gt.iter().any(Option::is_some) {
                    let ll = loglik_pair_argmax(&self.lp, &self.lp_gt)?;
                    put("loglik_prediction", Some(ll.prediction));
                    put("loglik_ground_truth", Some(ll.ground_truth));
                }
            }
            EvalMode::PlanComplete | EvalMode::PlanPrefix => {
                put("accuracy", ratio(self.hit, self.n));
                put("miou", mean(&self.miou));
                put("length_diff", mean(&self.len_diff));
            }
        }
        Ok(m)
    }
}

/// Seconds `0..c` are observed; `c` is uniform over cuts that leave at
/// least one action second.
fn sample_cut(labels: &[ActionId], rng: &mut ChaCha8Rng) -> Option<usize> {
    let last = labels.iter().rposition(|a| !a.is_null())?;
    Some(rng.random_range(0..=last))
}

fn bump(counts: &mut BTreeMap<String, usize>, key: &str, by: usize) {
    if by > 0 {
        *counts.entry(key.to_string()).or_default() += by;
    }
}

fn evaluate_seed(
    split: &Corpus,
    model: &dyn Guide,
    mode: EvalMode,
    opts: &EvalOptions,
    counts: &mut BTreeMap<String, usize>,
) -> Result<BTreeMap<String, BTreeMap<String, f64>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.cut_seed);
    let mut per_task = BTreeMap::new();
    for task in &split.tasks {
        let mut tally = TaskTally::default();
        let graph = match mode {
            EvalMode::Tracking => None,
            _ => Some(
                model
                    .graph(task.task_id())
                    .ok_or_else(|| Error::Config(format!("model has no graph for task {}", task.task_id())))?,
            ),
        };
        for v in &task.videos {
            let labels = framewise_labels(v, &task.vocab)?;
            match (mode, graph) {
                (EvalMode::Tracking, _) => {
                    let pred = model.track(&task.vocab, v)?;
                    let (h, n) = match_counts(&pred, &labels)?;
                    let (hx, nx) = match_counts_excl_null(&pred, &labels)?;
                    tally.hit += h;
                    tally.n += n;
                    tally.hit_x += hx;
                    tally.n_x += nx;
                }
                (EvalMode::Recommendation, Some(g)) => {
                    let seq = compressed_sequence(&labels);
                    for i in 0..seq.len() {
                        let next = seq.get(i + 1).copied().unwrap_or(g.eos());
                        tally.n += 1;
                        if !g.contains(seq[i]) {
                            bump(counts, "recommendation_context_not_in_graph", 1);
                            continue;
                        }
                        let (cands, lp) = model.recommend(g, &seq[..=i])?;
                        let best = cands[crate::numkit::argmax(&lp)];
                        tally.hit += usize::from(best == next);
                        let gt = cands.iter().position(|c| *c == next);
                        bump(counts, "recommendation_truth_not_candidate", usize::from(gt.is_none()));
                        tally.lp.push(lp);
                        tally.lp_gt.push(gt);
                    }
                }
                (EvalMode::PlanComplete | EvalMode::PlanPrefix, Some(g)) => {
                    let (cut, frame) = if mode == EvalMode::PlanPrefix {
                        let Some(c) = sample_cut(&labels, &mut rng) else {
                            bump(counts, "videos_without_actions", 1);
                            continue;
                        };
                        (c, c + 1)
                    } else {
                        (0, (1 + opts.plan_offset).min(labels.len()))
                    };
                    let prefix = compressed_sequence(&labels[..cut]);
                    let gt = compressed_sequence(&labels[cut..]);
                    if frame == 0 {
                        bump(counts, "videos_without_frames", 1);
                        continue;
                    }
                    let q = PlanQuery { vocab: &task.vocab, video: v, frame, prefix: &prefix };
                    let plan = model.plan(g, &q)?;
                    let (h, n) = prefix_match_counts(&plan, &gt);
                    tally.hit += h;
                    tally.n += n;
                    tally.miou.push(miou(&plan, &gt));
                    tally.len_diff.push((plan.len() as f64 - gt.len() as f64).abs());
                }
                _ => unreachable!("graph is present for every non-tracking mode"),
            }
        }
        per_task.insert(task.task_id().to_string(), tally.metrics(mode)?);
    }
    Ok(per_task)
}

/// Scores one model per seed on `split`.
pub fn evaluate(
    split: &Corpus,
    models: &[(u64, &dyn Guide)],
    seeds: &[u64],
    mode: EvalMode,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    if seeds.is_empty() {
        return Err(Error::Config("evaluation needs at least one seed".into()));
    }
    let mut counts = BTreeMap::new();
    let mut runs = Vec::with_capacity(seeds.len());
    for s in seeds {
        let model = models
            .iter()
            .find(|(ms, _)| ms == s)
            .ok_or_else(|| Error::Config(format!("no trained model for seed {s}")))?
            .1;
        runs.push(evaluate_seed(split, model, mode, opts, &mut counts)?);
    }
    let metrics: Vec<String> = mode.metrics().iter().map(|m| m.to_string()).collect();
    let mut per_task: BTreeMap<String, BTreeMap<String, MeanStd>> = BTreeMap::new();
    for task in &split.tasks {
        let t = task.task_id();
        let row = per_task.entry(t.to_string()).or_default();
        for m in &metrics {
            let vals: Vec<f64> = runs.iter().filter_map(|r| r[t].get(m).copied()).collect();
            if let Some(ms) = MeanStd::of(&vals) {
                row.insert(m.clone(), ms);
            }
        }
    }
    let per_seed: Vec<BTreeMap<String, f64>> = runs
        .iter()
        .map(|r| {
            metrics
                .iter()
                .filter_map(|m| {
                    let vals: Vec<f64> = r.values().filter_map(|t| t.get(m).copied()).collect();
                    MeanStd::of(&vals).map(|ms| (m.clone(), ms.mean))
                })
                .collect()
        })
        .collect();
    let aggregate = metrics
        .iter()
        .filter_map(|m| {
            let vals: Vec<f64> = per_seed.iter().filter_map(|r| r.get(m).copied()).collect();
            MeanStd::of(&vals).map(|ms| (m.clone(), ms))
        })
        .collect();
    Ok(EvalReport {
        mode,
        variant: opts.variant.clone(),
        seeds: seeds.to_vec(),
        config_hash: opts.config_hash.clone(),
        metrics,
        per_task,
        aggregate,
        per_seed,
        counts,
    })
}

/// Trains one model per seed with `variant` applied and evaluates each mode
/// on the test split.
pub fn run_ablation(
    variant: Variant,
    data: &CorpusSplit,
    cfg: &RunConfig,
    modes: &[EvalMode],
) -> Result<Vec<EvalReport>> {
    let cfg = RunConfig { variant, ..cfg.clone() };
    cfg.validate()?;
    let models = cfg
        .seeds
        .iter()
        .map(|s| train_model(&data.train, &cfg, *s))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<(u64, &dyn Guide)> = models.iter().map(|m| (m.seed, m as &dyn Guide)).collect();
    let opts = EvalOptions::from_config(&cfg);
    modes.iter().map(|m| evaluate(&data.test, &refs, &cfg.seeds, *m, &opts)).collect()
}
