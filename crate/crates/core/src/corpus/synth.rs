//! Synthetic procedural tasks with a known partial order.
//!
//! A frame splits into a state half and an activity half. While an action
//! runs, the state moves linearly from the action's pre-state center to its
//! post-state center and the activity half sits at the action's activity
//! center. The null second right before an action carries its pre-state, the
//! null second right after carries its post-state; every other null second
//! carries the background state. Null seconds always show background
//! activity. Gaussian noise with `noise_sigma` is added to every value.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{
    ActionId, ActionVocabulary, Corpus, CorpusError, FeatureStream, Segment, TaskCorpus,
    VideoRecord,
};

/// Linear-extension counting is exponential in the action count.
pub const MAX_SYNTH_ACTIONS: usize = 20;
const CENTER_RESAMPLES: usize = 100;

fn default_true() -> bool {
    true
}

fn default_center_scale() -> f64 {
    1.0
}

fn default_duration() -> (usize, usize) {
    (3, 6)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthTaskSpec {
    pub task_id: String,
    pub actions: Vec<String>,
    /// Precedence pairs `[before, after]` by action name.
    #[serde(default)]
    pub partial_order: Vec<(String, String)>,
    pub feature_dim: usize,
    pub noise_sigma: f64,
    pub null_fraction: f64,
    pub n_videos: usize,
    pub seed: u64,
    /// Inclusive range of action durations in seconds.
    #[serde(default = "default_duration")]
    pub duration: (usize, usize),
    /// Standard deviation of the randomly drawn cluster centers.
    #[serde(default = "default_center_scale")]
    pub center_scale: f64,
    /// Pairs of actions that share every cluster center.
    #[serde(default)]
    pub shared_clusters: Vec<(String, String)>,
    /// Requires distinct centers to lie more than `4 * noise_sigma` apart.
    #[serde(default = "default_true")]
    pub separable: bool,
}

/// Cluster centers; per-action vectors are indexed by `ActionId::index() - 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterCenters {
    pub pre_state: Vec<Vec<f64>>,
    pub post_state: Vec<Vec<f64>>,
    pub activity: Vec<Vec<f64>>,
    pub background_state: Vec<f64>,
    pub background_activity: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthTask {
    pub task: TaskCorpus,
    /// Union of consecutive pairs over every emitted order, plus each final
    /// action to EOS.
    pub truth_edges: BTreeSet<(ActionId, ActionId)>,
    pub orders: Vec<Vec<ActionId>>,
    pub centers: ClusterCenters,
}

impl SynthTask {
    pub fn truth_edge_names(&self) -> Vec<(String, String)> {
        let v = &self.task.vocab;
        self.truth_edges
            .iter()
            .map(|(a, b)| (v.name(*a).to_string(), v.name(*b).to_string()))
            .collect()
    }
}

#[derive(Serialize, Deserialize)]
struct TruthGraphFile {
    task_id: String,
    edges: Vec<(String, String)>,
}

/// Writes `<root>/<task_id>/truth_graph.json` for every task.
pub fn write_truth_graphs(tasks: &[SynthTask], root: &Path) -> Result<(), CorpusError> {
    for t in tasks {
        let dir = root.join(t.task.task_id());
        fs::create_dir_all(&dir).map_err(|e| CorpusError::io(&dir, e))?;
        let file = TruthGraphFile {
            task_id: t.task.task_id().to_string(),
            edges: t.truth_edge_names(),
        };
        let path = dir.join("truth_graph.json");
        let json = serde_json::to_string_pretty(&file).expect("truth graph serializes");
        fs::write(&path, json).map_err(|e| CorpusError::io(&path, e))?;
    }
    Ok(())
}

/// Reads back the edge names written by [`write_truth_graphs`].
pub fn read_truth_graph(path: &Path) -> Result<(String, Vec<(String, String)>), CorpusError> {
    let text = fs::read_to_string(path).map_err(|e| CorpusError::io(path, e))?;
    let f: TruthGraphFile = serde_json::from_str(&text).map_err(|e| CorpusError::Parse {
        file: path.display().to_string(),
        location: format!("line {}, column {}", e.line(), e.column()),
        message: e.to_string(),
    })?;
    Ok((f.task_id, f.edges))
}

fn spec_err(msg: impl Into<String>) -> CorpusError {
    CorpusError::Spec(msg.into())
}

fn resolve_pairs(
    vocab: &ActionVocabulary,
    pairs: &[(String, String)],
    what: &str,
) -> Result<Vec<(usize, usize)>, CorpusError> {
    pairs
        .iter()
        .map(|(a, b)| {
            let look = |n: &str| {
                vocab
                    .id(n)
                    .filter(|id| vocab.is_action(*id))
                    .map(|id| id.index() - 1)
                    .ok_or_else(|| spec_err(format!("{what} names unknown action {n:?}")))
            };
            Ok((look(a)?, look(b)?))
        })
        .collect()
}

/// Predecessor bitmasks, or an error naming an action on a cycle.
fn predecessor_masks(n: usize, order: &[(usize, usize)], names: &[String]) -> Result<Vec<u32>, CorpusError> {
    let mut preds = vec![0u32; n];
    for &(a, b) in order {
        if a == b {
            return Err(spec_err(format!("partial order has a self-loop on {:?}", names[a])));
        }
        preds[b] |= 1 << a;
    }
    // Kahn's algorithm over the bitmasks.
    let mut placed = 0u32;
    for _ in 0..n {
        match (0..n).find(|&i| placed & (1 << i) == 0 && preds[i] & !placed == 0) {
            Some(i) => placed |= 1 << i,
            None => {
                let stuck = (0..n).find(|&i| placed & (1 << i) == 0).unwrap();
                return Err(spec_err(format!(
                    "partial order is cyclic (action {:?} is on or after a cycle)",
                    names[stuck]
                )));
            }
        }
    }
    Ok(preds)
}

/// Samples linear extensions uniformly: `count[mask]` is the number of ways
/// to order the actions outside `mask` once `mask` has been placed.
struct ExtensionSampler {
    n: usize,
    preds: Vec<u32>,
    count: Vec<u128>,
}

impl ExtensionSampler {
    fn new(n: usize, preds: Vec<u32>) -> Self {
        let full = (1usize << n) - 1;
        let mut count = vec![0u128; full + 1];
        count[full] = 1;
        for mask in (0..full).rev() {
            let mut c = 0u128;
            for i in 0..n {
                if mask & (1 << i) == 0 && preds[i] & !(mask as u32) == 0 {
                    c += count[mask | (1 << i)];
                }
            }
            count[mask] = c;
        }
        Self { n, preds, count }
    }

    fn total(&self) -> u128 {
        self.count[0]
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut mask = 0usize;
        let mut out = Vec::with_capacity(self.n);
        for _ in 0..self.n {
            let mut r = rng.random_range(0..self.count[mask]);
            for i in 0..self.n {
                if mask & (1 << i) == 0 && self.preds[i] & !(mask as u32) == 0 {
                    let c = self.count[mask | (1 << i)];
                    if r < c {
                        out.push(i);
                        mask |= 1 << i;
                        break;
                    }
                    r -= c;
                }
            }
        }
        out
    }
}

fn gaussian_vec(rng: &mut ChaCha8Rng, len: usize, scale: f64) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    (0..len).map(|_| scale * normal.sample(rng)).collect()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Minimum distance between distinct vectors in `set`.
fn min_distinct_gap(set: &[&Vec<f64>]) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..set.len() {
        for j in i + 1..set.len() {
            if set[i] != set[j] {
                best = best.min(dist(set[i], set[j]));
            }
        }
    }
    best
}

fn draw_centers(
    spec: &SynthTaskSpec,
    shared: &[(usize, usize)],
    rng: &mut ChaCha8Rng,
) -> Result<ClusterCenters, CorpusError> {
    let n = spec.actions.len();
    let state_dim = spec.feature_dim / 2;
    let act_dim = spec.feature_dim - state_dim;
    let threshold = 4.0 * spec.noise_sigma;
    for _ in 0..CENTER_RESAMPLES {
        let mut c = ClusterCenters {
            pre_state: (0..n).map(|_| gaussian_vec(rng, state_dim, spec.center_scale)).collect(),
            post_state: (0..n).map(|_| gaussian_vec(rng, state_dim, spec.center_scale)).collect(),
            activity: (0..n).map(|_| gaussian_vec(rng, act_dim, spec.center_scale)).collect(),
            background_state: gaussian_vec(rng, state_dim, spec.center_scale),
            background_activity: gaussian_vec(rng, act_dim, spec.center_scale),
        };
        for &(a, b) in shared {
            c.pre_state[b] = c.pre_state[a].clone();
            c.post_state[b] = c.post_state[a].clone();
            c.activity[b] = c.activity[a].clone();
        }
        if !spec.separable {
            return Ok(c);
        }
        let states: Vec<&Vec<f64>> = c
            .pre_state
            .iter()
            .chain(&c.post_state)
            .chain(std::iter::once(&c.background_state))
            .collect();
        let acts: Vec<&Vec<f64>> = c
            .activity
            .iter()
            .chain(std::iter::once(&c.background_activity))
            .collect();
        if min_distinct_gap(&states) > threshold && min_distinct_gap(&acts) > threshold {
            return Ok(c);
        }
    }
    Err(spec_err(format!(
        "could not draw centers more than 4 sigma apart in {CENTER_RESAMPLES} attempts; raise center_scale or feature_dim"
    )))
}

fn validate_spec(spec: &SynthTaskSpec) -> Result<(), CorpusError> {
    let n = spec.actions.len();
    if n == 0 || n > MAX_SYNTH_ACTIONS {
        return Err(spec_err(format!("need 1..={MAX_SYNTH_ACTIONS} actions, got {n}")));
    }
    if spec.feature_dim < 2 {
        return Err(spec_err("feature_dim must be at least 2"));
    }
    if !(spec.noise_sigma >= 0.0 && spec.noise_sigma.is_finite()) {
        return Err(spec_err("noise_sigma must be finite and non-negative"));
    }
    if !(0.0..1.0).contains(&spec.null_fraction) {
        return Err(spec_err("null_fraction must lie in [0, 1)"));
    }
    if spec.n_videos == 0 {
        return Err(spec_err("n_videos must be positive"));
    }
    if spec.duration.0 < 2 || spec.duration.1 < spec.duration.0 {
        return Err(spec_err("duration must satisfy 2 <= min <= max"));
    }
    if !(spec.center_scale > 0.0 && spec.center_scale.is_finite()) {
        return Err(spec_err("center_scale must be positive"));
    }
    Ok(())
}

/// Seconds of each gap before, between and after the actions.
fn gap_lengths(n_actions: usize, action_seconds: usize, null_fraction: f64, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let target = (action_seconds as f64 * null_fraction / (1.0 - null_fraction)).round() as usize;
    let mut gaps: Vec<usize> = (0..=n_actions)
        .map(|i| if i == 0 || i == n_actions { 1 } else { 2 })
        .collect();
    let minimum: usize = gaps.iter().sum();
    for _ in minimum..target.max(minimum) {
        let g = rng.random_range(0..gaps.len());
        gaps[g] += 1;
    }
    gaps
}

fn jitter(t: f64, rng: &mut ChaCha8Rng) -> f64 {
    let j: f64 = rng.random_range(-0.45..=0.45);
    ((t + j) * 100.0).round() / 100.0
}

pub fn generate(spec: &SynthTaskSpec) -> Result<SynthTask, CorpusError> {
    validate_spec(spec)?;
    let vocab = ActionVocabulary::new(spec.task_id.clone(), spec.actions.clone())
        .map_err(|e| spec_err(e.to_string()))?;
    let n = vocab.len();
    let order_pairs = resolve_pairs(&vocab, &spec.partial_order, "partial_order")?;
    let shared = resolve_pairs(&vocab, &spec.shared_clusters, "shared_clusters")?;
    let preds = predecessor_masks(n, &order_pairs, vocab.actions())?;
    let sampler = ExtensionSampler::new(n, preds);
    debug_assert!(sampler.total() > 0);

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let centers = draw_centers(spec, &shared, &mut rng)?;
    let noise = Normal::new(0.0, spec.noise_sigma.max(0.0)).expect("valid sigma");
    let state_dim = spec.feature_dim / 2;

    let mut videos = Vec::with_capacity(spec.n_videos);
    let mut orders = Vec::with_capacity(spec.n_videos);
    let mut truth_edges = BTreeSet::new();
    for vi in 0..spec.n_videos {
        let order = sampler.sample(&mut rng);
        let durations: Vec<usize> = order
            .iter()
            .map(|_| rng.random_range(spec.duration.0..=spec.duration.1))
            .collect();
        let gaps = gap_lengths(n, durations.iter().sum(), spec.null_fraction, &mut rng);
        let t_total: usize = durations.iter().sum::<usize>() + gaps.iter().sum::<usize>();

        // Per second: (state center blend, activity source).
        let mut state: Vec<Vec<f64>> = vec![centers.background_state.clone(); t_total];
        let mut activity: Vec<&Vec<f64>> = vec![&centers.background_activity; t_total];
        let mut segments = Vec::with_capacity(n);
        let mut t = gaps[0];
        for (k, (&a, &d)) in order.iter().zip(&durations).enumerate() {
            let t1 = t + 1;
            let t2 = t + d;
            state[t1 - 2] = centers.pre_state[a].clone();
            state[t2] = centers.post_state[a].clone();
            for s in t1..=t2 {
                let lambda = (s - t1) as f64 / (t2 - t1) as f64;
                state[s - 1] = centers.pre_state[a]
                    .iter()
                    .zip(&centers.post_state[a])
                    .map(|(p, q)| (1.0 - lambda) * p + lambda * q)
                    .collect();
                activity[s - 1] = &centers.activity[a];
            }
            segments.push(Segment {
                action: ActionId(a as u32 + 1),
                t_start: jitter(t1 as f64, &mut rng),
                t_end: jitter(t2 as f64, &mut rng),
            });
            t = t2 + gaps[k + 1];
        }

        let mut data = Vec::with_capacity(t_total * spec.feature_dim);
        for s in 0..t_total {
            for v in state[s].iter().chain(activity[s].iter()) {
                let x = if spec.noise_sigma > 0.0 { v + noise.sample(&mut rng) } else { *v };
                data.push(x as f32);
            }
        }
        debug_assert_eq!(data.len(), t_total * (state_dim + (spec.feature_dim - state_dim)));
        let features = FeatureStream::new(t_total, spec.feature_dim, data)?;

        let ids: Vec<ActionId> = order.iter().map(|&a| ActionId(a as u32 + 1)).collect();
        for w in ids.windows(2) {
            truth_edges.insert((w[0], w[1]));
        }
        truth_edges.insert((*ids.last().unwrap(), vocab.eos()));
        let video = VideoRecord {
            video_id: format!("v{vi:04}"),
            task_id: spec.task_id.clone(),
            features,
            segments,
        };
        video.validate(&vocab)?;
        videos.push(video);
        orders.push(ids);
    }
    Ok(SynthTask {
        task: TaskCorpus { vocab, videos },
        truth_edges,
        orders,
        centers,
    })
}

pub fn generate_suite(specs: &[SynthTaskSpec]) -> Result<(Corpus, Vec<SynthTask>), CorpusError> {
    let tasks = specs.iter().map(generate).collect::<Result<Vec<_>, _>>()?;
    let corpus = Corpus {
        tasks: tasks.iter().map(|t| t.task.clone()).collect(),
    };
    corpus.validate()?;
    Ok((corpus, tasks))
}

fn letters(n: usize) -> Vec<String> {
    (0..n)
        .map(|i| {
            if i < 26 {
                ((b'a' + i as u8) as char).to_string()
            } else {
                format!("act{i}")
            }
        })
        .collect()
}

fn pair(a: &str, b: &str) -> (String, String) {
    (a.to_string(), b.to_string())
}

fn base_spec(task_id: &str, actions: Vec<String>, seed: u64) -> SynthTaskSpec {
    SynthTaskSpec {
        task_id: task_id.to_string(),
        actions,
        partial_order: Vec::new(),
        feature_dim: 32,
        noise_sigma: 0.3,
        null_fraction: 0.72,
        n_videos: 60,
        seed,
        duration: default_duration(),
        center_scale: default_center_scale(),
        shared_clusters: Vec::new(),
        separable: true,
    }
}

/// Six well-separated actions: `a -> {b, c} -> d -> {e, f}`.
pub fn separable_spec(seed: u64) -> SynthTaskSpec {
    let mut s = base_spec("separable", letters(6), seed);
    s.partial_order = vec![
        pair("a", "b"),
        pair("a", "c"),
        pair("b", "d"),
        pair("c", "d"),
        pair("d", "e"),
        pair("d", "f"),
    ];
    s
}

/// A total order over `n` actions.
pub fn chain_spec(n: usize, seed: u64) -> SynthTaskSpec {
    let names = letters(n);
    let mut s = base_spec("chain", names.clone(), seed);
    s.partial_order = names.windows(2).map(|w| pair(&w[0], &w[1])).collect();
    s
}

/// `{a, b} -> c -> {d, e}` where `d` looks exactly like `a` and `e` like `b`.
/// Only the history tells the two halves apart.
pub fn ambiguous_spec(seed: u64) -> SynthTaskSpec {
    let mut s = base_spec("ambiguous", letters(5), seed);
    s.partial_order = vec![
        pair("a", "c"),
        pair("b", "c"),
        pair("c", "d"),
        pair("c", "e"),
    ];
    s.shared_clusters = vec![pair("a", "d"), pair("b", "e")];
    s
}

/// Random DAG over `n` actions: edge `i -> i+1` with probability 0.7 and
/// `i -> i+2` with probability 0.3.
pub fn random_dag_spec(task_id: &str, n: usize, seed: u64) -> SynthTaskSpec {
    let names = letters(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x05ee_dda6);
    let mut order = Vec::new();
    for i in 0..n {
        if i + 1 < n && rng.random_bool(0.7) {
            order.push(pair(&names[i], &names[i + 1]));
        }
        if i + 2 < n && rng.random_bool(0.3) {
            order.push(pair(&names[i], &names[i + 2]));
        }
    }
    let mut s = base_spec(task_id, names, seed);
    s.partial_order = order;
    s
}

/// `(task id, videos, action space, null percentage)` for the 18 primary
/// tasks of the instructional-video benchmark.
pub const CROSSTASK_PRIMARY: [(&str, usize, usize, u32); 18] = [
    ("make_jello_shots", 182, 6, 72),
    ("build_simple_floating_shelves", 153, 5, 58),
    ("make_taco_salad", 170, 8, 79),
    ("grill_steak", 228, 11, 75),
    ("make_kimchi_fried_rice", 120, 6, 70),
    ("make_meringue", 154, 6, 67),
    ("make_a_latte", 157, 6, 71),
    ("make_bread_and_butter_pickles", 106, 11, 75),
    ("make_lemonade", 131, 8, 69),
    ("make_french_toast", 252, 10, 68),
    ("jack_up_a_car", 89, 3, 81),
    ("make_kerala_fish_curry", 149, 7, 69),
    ("make_banana_ice_cream", 170, 5, 80),
    ("add_oil_to_your_car", 137, 8, 85),
    ("change_a_tire", 99, 11, 62),
    ("make_irish_coffee", 185, 5, 74),
    ("make_french_strawberry_cake", 86, 9, 63),
    ("make_pancakes", 182, 8, 70),
];

/// Stand-ins shaped like the 18 primary tasks (action space and null
/// fraction); video counts are multiplied by `video_scale` (at least 3).
pub fn crosstask18_specs(seed: u64, video_scale: f64) -> Vec<SynthTaskSpec> {
    CROSSTASK_PRIMARY
        .iter()
        .enumerate()
        .map(|(i, &(id, videos, actions, null_pct))| {
            let mut s = random_dag_spec(id, actions, seed.wrapping_add(i as u64));
            s.n_videos = ((videos as f64 * video_scale).round() as usize).max(3);
            s.null_fraction = null_pct as f64 / 100.0;
            s
        })
        .collect()
}

/// Mixed tasks used by the planning comparisons.
pub fn suite_specs(seed: u64) -> Vec<SynthTaskSpec> {
    let mut chain = chain_spec(5, seed.wrapping_add(1));
    chain.n_videos = 40;
    let mut sep = separable_spec(seed.wrapping_add(2));
    sep.n_videos = 40;
    let mut dag = random_dag_spec("random_dag", 7, seed.wrapping_add(3));
    dag.n_videos = 40;
    vec![chain, sep, dag]
}
