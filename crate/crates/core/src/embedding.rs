//! Action embeddings learned as transformations of condition features.
//!
//! A shared condition generator `f` maps a two-frame window to a condition
//! vector. A transformation predictor `g` maps `(f(pre), e_a)` to a predicted
//! post-condition. Training pulls `g(f(pre), e_a)` towards `f(post)` in cosine
//! distance and pushes every other action's prediction at least a margin
//! away.

use std::path::Path;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{condition_windows, ActionId, ActionVocabulary, Corpus};
use crate::numkit::{
    cosine_distance, mlp2_forward, Activation, AdamState, Mlp2Params, Mlp2Vars, Tape, Tensor, Var,
};
use crate::store::{self, StoreError};
use crate::{Error, Result};

pub const NULL_ROW: usize = 0;
pub const EOS_ROW: usize = 1;
const BUNDLE_KIND: &str = "adtg-embedding";

/// Which actions act as negatives for a training segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeSet {
    /// Every other action of the segment's task.
    Task,
    /// Every other action of every task.
    AllTasks,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbeddingConfig {
    pub cond_dim: usize,
    pub embed_dim: usize,
    /// Hidden width of both `f` and `g`.
    pub hidden: usize,
    pub margin: f64,
    pub lr: f64,
    pub epochs: usize,
    pub negatives: NegativeSet,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            cond_dim: 128,
            embed_dim: 96,
            hidden: 128,
            margin: 0.5,
            lr: 1e-5,
            epochs: 50,
            negatives: NegativeSet::Task,
        }
    }
}

/// How the embedding table was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TableKind {
    /// Learned by the transformation objective.
    Trained,
    /// Frozen at its seeded random initialization.
    Random,
    /// Frozen one-hot rows.
    OneHot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRows {
    pub task_id: String,
    pub actions: Vec<String>,
    /// Table row of the task's first action.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct EmbeddingMeta {
    feature_dim: usize,
    margin: f64,
    kind: TableKind,
    seed: u64,
    tasks: Vec<TaskRows>,
    vocab_hash: String,
}

/// `f`, `g` and the embedding table. Row 0 is NULL, row 1 is EOS, then the
/// actions of each task in vocabulary order.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBundle {
    pub cond_gen: Mlp2Params,
    pub predictor: Mlp2Params,
    pub table: Tensor,
    pub margin: f64,
    pub kind: TableKind,
    pub seed: u64,
    feature_dim: usize,
    tasks: Vec<TaskRows>,
}

fn layout(vocabs: &[&ActionVocabulary]) -> Result<Vec<TaskRows>> {
    let mut rows = Vec::with_capacity(vocabs.len());
    let mut offset = 2;
    for v in vocabs {
        if rows.iter().any(|r: &TaskRows| r.task_id == v.task_id()) {
            return Err(Error::Config(format!("task {} listed twice", v.task_id())));
        }
        rows.push(TaskRows {
            task_id: v.task_id().to_string(),
            actions: v.actions().to_vec(),
            offset,
        });
        offset += v.len();
    }
    Ok(rows)
}

/// SHA-256 over task ids and action names in table order.
pub fn vocab_hash_of(tasks: &[TaskRows]) -> String {
    let mut h = Sha256::new();
    for t in tasks {
        h.update(t.task_id.as_bytes());
        h.update([0]);
        for a in &t.actions {
            h.update(a.as_bytes());
            h.update([1]);
        }
        h.update([2]);
    }
    hex::encode(h.finalize())
}

impl EmbeddingBundle {
    /// Seeded initialization with uniform `±1/√fan_in` weights and uniform
    /// `±1` table entries.
    pub fn init(
        vocabs: &[&ActionVocabulary],
        feature_dim: usize,
        cfg: &EmbeddingConfig,
        kind: TableKind,
        seed: u64,
    ) -> Result<Self> {
        if feature_dim == 0 || cfg.cond_dim == 0 || cfg.embed_dim == 0 || cfg.hidden == 0 {
            return Err(Error::Config("embedding dimensions must be positive".into()));
        }
        let tasks = layout(vocabs)?;
        let n_rows = 2 + vocabs.iter().map(|v| v.len()).sum::<usize>();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cond_gen = Mlp2Params::init(2 * feature_dim, cfg.hidden, cfg.cond_dim, Activation::Relu, &mut rng);
        let (embed_dim, table) = match kind {
            TableKind::OneHot => {
                let mut t = Tensor::zeros(&[n_rows, n_rows]);
                for i in 0..n_rows {
                    t.row_mut(i)[i] = 1.0;
                }
                (n_rows, t)
            }
            TableKind::Trained | TableKind::Random => {
                (cfg.embed_dim, Tensor::uniform_init(&[n_rows, cfg.embed_dim], 1, &mut rng))
            }
        };
        let predictor = Mlp2Params::init(cfg.cond_dim + embed_dim, cfg.hidden, cfg.cond_dim, Activation::Relu, &mut rng);
        Ok(Self {
            cond_gen,
            predictor,
            table,
            margin: cfg.margin,
            kind,
            seed,
            feature_dim,
            tasks,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn embed_dim(&self) -> usize {
        self.table.cols()
    }

    pub fn cond_dim(&self) -> usize {
        self.cond_gen.output_dim()
    }

    pub fn n_rows(&self) -> usize {
        self.table.rows()
    }

    pub fn tasks(&self) -> &[TaskRows] {
        &self.tasks
    }

    pub fn task_rows(&self, task_id: &str) -> Result<&TaskRows> {
        self.tasks
            .iter()
            .find(|t| t.task_id == task_id)
            .ok_or_else(|| Error::Config(format!("embedding bundle has no task {task_id}")))
    }

    /// Table row of `a` within `task_id`.
    pub fn row(&self, task_id: &str, a: ActionId) -> Result<usize> {
        let t = self.task_rows(task_id)?;
        let n = t.actions.len() as u32;
        match a.0 {
            0 => Ok(NULL_ROW),
            i if i == n + 1 => Ok(EOS_ROW),
            i if i <= n => Ok(t.offset + i as usize - 1),
            _ => Err(Error::Usage(format!("action {a} is outside task {task_id}"))),
        }
    }

    /// Checks that `vocab` matches the task layout recorded in the bundle.
    pub fn check_vocab(&self, vocab: &ActionVocabulary) -> Result<()> {
        let t = self.task_rows(vocab.task_id())?;
        if t.actions != vocab.actions() {
            return Err(Error::Config(format!(
                "task {} vocabulary differs from the one the embeddings were trained with",
                vocab.task_id()
            )));
        }
        Ok(())
    }

    pub fn embedding(&self, row: usize) -> &[f64] {
        self.table.row(row)
    }

    pub fn vocab_hash(&self) -> String {
        vocab_hash_of(&self.tasks)
    }

    fn meta(&self) -> EmbeddingMeta {
        EmbeddingMeta {
            feature_dim: self.feature_dim,
            margin: self.margin,
            kind: self.kind,
            seed: self.seed,
            tasks: self.tasks.clone(),
            vocab_hash: self.vocab_hash(),
        }
    }

    fn named(&self) -> Vec<(&'static str, &Tensor)> {
        let mut out = Vec::with_capacity(9);
        for (n, t) in self.cond_gen.params() {
            out.push((cond_name(n), t));
        }
        for (n, t) in self.predictor.params() {
            out.push((pred_name(n), t));
        }
        out.push(("table", &self.table));
        out
    }

    /// Hash over every parameter value and the layout metadata.
    pub fn content_hash(&self) -> String {
        let meta = serde_json::to_value(self.meta()).expect("meta serializes");
        store::content_hash(BUNDLE_KIND, &meta, &self.named())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::to_value(self.meta()).expect("meta serializes");
        store::save_bundle(path, BUNDLE_KIND, meta, &self.named())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = path.display().to_string();
        let (meta, mut tensors) = store::load_bundle(path, BUNDLE_KIND)?;
        let meta: EmbeddingMeta = serde_json::from_value(meta).map_err(|e| StoreError::Format {
            file: file.clone(),
            message: format!("bad metadata: {e}"),
        })?;
        let [cw1, cb1, cw2, cb2, pw1, pb1, pw2, pb2, table] = store::take_tensors(
            &mut tensors,
            ["cond.w1", "cond.b1", "cond.w2", "cond.b2", "pred.w1", "pred.b1", "pred.w2", "pred.b2", "table"],
            &file,
        )?;
        let bundle = Self {
            cond_gen: Mlp2Params { w1: cw1, b1: cb1, w2: cw2, b2: cb2, activation: Activation::Relu },
            predictor: Mlp2Params { w1: pw1, b1: pb1, w2: pw2, b2: pb2, activation: Activation::Relu },
            table,
            margin: meta.margin,
            kind: meta.kind,
            seed: meta.seed,
            feature_dim: meta.feature_dim,
            tasks: meta.tasks,
        };
        bundle.validate().map_err(|e| StoreError::Format { file: file.clone(), message: e.to_string() })?;
        if bundle.vocab_hash() != meta.vocab_hash {
            return Err(StoreError::Format { file, message: "vocabulary hash mismatch".into() }.into());
        }
        Ok(bundle)
    }

    pub fn validate(&self) -> Result<()> {
        self.cond_gen.validate()?;
        self.predictor.validate()?;
        let rows = 2 + self.tasks.iter().map(|t| t.actions.len()).sum::<usize>();
        let ok = self.cond_gen.input_dim() == 2 * self.feature_dim
            && self.predictor.input_dim() == self.cond_dim() + self.embed_dim()
            && self.predictor.output_dim() == self.cond_dim()
            && self.table.shape().len() == 2
            && self.table.rows() == rows;
        if ok {
            Ok(())
        } else {
            Err(Error::Config("embedding bundle dimensions are inconsistent".into()))
        }
    }
}

fn cond_name(n: &str) -> &'static str {
    match n {
        "w1" => "cond.w1",
        "b1" => "cond.b1",
        "w2" => "cond.w2",
        _ => "cond.b2",
    }
}

fn pred_name(n: &str) -> &'static str {
    match n {
        "w1" => "pred.w1",
        "b1" => "pred.b1",
        "w2" => "pred.w2",
        _ => "pred.b2",
    }
}

/// `f` applied to a `2 × D` window.
pub fn condition_features(bundle: &EmbeddingBundle, window: &Tensor) -> Result<Vec<f64>> {
    if window.shape() != [2, bundle.feature_dim] {
        return Err(crate::numkit::NumError::Shape(format!(
            "condition window must be 2x{}, got {:?}",
            bundle.feature_dim,
            window.shape()
        ))
        .into());
    }
    Ok(mlp2_forward(&bundle.cond_gen, window.as_slice())?)
}

/// `g(f_pre, e_a)`.
pub fn predict_post(bundle: &EmbeddingBundle, f_pre: &[f64], e_a: &[f64]) -> Result<Vec<f64>> {
    if f_pre.len() != bundle.cond_dim() || e_a.len() != bundle.embed_dim() {
        return Err(crate::numkit::NumError::Shape(format!(
            "predictor takes {}+{} inputs, got {}+{}",
            bundle.cond_dim(),
            bundle.embed_dim(),
            f_pre.len(),
            e_a.len()
        ))
        .into());
    }
    let x: Vec<f64> = f_pre.iter().chain(e_a).copied().collect();
    Ok(mlp2_forward(&bundle.predictor, &x)?)
}

fn check_row(bundle: &EmbeddingBundle, row: usize) -> Result<()> {
    if row < 2 || row >= bundle.n_rows() {
        return Err(Error::Usage(format!(
            "row {row} is not an action row (2..{})",
            bundle.n_rows()
        )));
    }
    Ok(())
}

/// Cosine distance between the predicted and observed post-condition.
pub fn disc_loss(bundle: &EmbeddingBundle, x_pre: &Tensor, x_post: &Tensor, row: usize) -> Result<f64> {
    check_row(bundle, row)?;
    let f_pre = condition_features(bundle, x_pre)?;
    let f_post = condition_features(bundle, x_post)?;
    let pred = predict_post(bundle, &f_pre, bundle.embedding(row))?;
    Ok(cosine_distance(&pred, &f_post)?)
}

/// Disc losses of several candidate rows, sharing the condition features.
pub fn disc_losses(bundle: &EmbeddingBundle, x_pre: &Tensor, x_post: &Tensor, rows: &[usize]) -> Result<Vec<f64>> {
    let f_pre = condition_features(bundle, x_pre)?;
    let f_post = condition_features(bundle, x_post)?;
    rows.iter()
        .map(|&r| {
            check_row(bundle, r)?;
            let pred = predict_post(bundle, &f_pre, bundle.embedding(r))?;
            Ok(cosine_distance(&pred, &f_post)?)
        })
        .collect()
}

/// Hinge `Σ max(0, M − D(g(f(pre), e_n), f(post)))` over the negatives.
pub fn cont_loss(
    bundle: &EmbeddingBundle,
    x_pre: &Tensor,
    x_post: &Tensor,
    row: usize,
    negatives: &[usize],
) -> Result<f64> {
    if negatives.contains(&row) {
        return Err(Error::Usage(format!("positive row {row} is among the negatives")));
    }
    let d = disc_losses(bundle, x_pre, x_post, negatives)?;
    Ok(d.iter().map(|x| (bundle.margin - x).max(0.0)).sum())
}

/// Tape handles of a bundle's trainable parameters.
#[derive(Debug, Clone, Copy)]
pub struct EmbeddingVars {
    pub cond: Mlp2Vars,
    pub pred: Mlp2Vars,
    pub table: Var,
}

impl EmbeddingVars {
    pub fn register<'a>(tape: &mut Tape<'a>, b: &'a EmbeddingBundle) -> Self {
        Self {
            cond: tape.mlp2(&b.cond_gen),
            pred: tape.mlp2(&b.predictor),
            table: tape.leaf(&b.table),
        }
    }

    pub fn leaves(&self) -> [Var; 9] {
        let [a, b, c, d] = self.cond.leaves();
        let [e, f, g, h] = self.pred.leaves();
        [a, b, c, d, e, f, g, h, self.table]
    }
}

/// Transformation loss of one segment on a tape: the positive's cosine
/// distance plus the hinge over the negatives.
pub fn segment_loss(
    tape: &mut Tape<'_>,
    vars: &EmbeddingVars,
    pre: Var,
    post: Var,
    positive: usize,
    negatives: &[usize],
    margin: f64,
) -> Result<Var> {
    let f_pre = tape.mlp2_forward(&vars.cond, &[pre])?;
    let f_post = tape.mlp2_forward(&vars.cond, &[post])?;
    let (partial, offset) = tape.mlp2_partial(&vars.pred, &[f_pre], 0)?;
    let mut terms = Vec::with_capacity(1 + negatives.len());
    for (k, &r) in std::iter::once(&positive).chain(negatives).enumerate() {
        let e = tape.row(vars.table, r)?;
        let p = tape.mlp2_finish(&vars.pred, partial, offset, &[e])?;
        let d = tape.cosine_distance(p, f_post)?;
        terms.push(if k == 0 { d } else { tape.hinge(d, margin)? });
    }
    Ok(tape.sum_scalars(&terms)?)
}

struct Sample {
    pre: Vec<f64>,
    post: Vec<f64>,
    positive: usize,
    negatives: Vec<usize>,
}

fn training_samples(bundle: &EmbeddingBundle, train: &Corpus, negatives: NegativeSet) -> Result<Vec<Sample>> {
    let all_actions: Vec<usize> = (2..bundle.n_rows()).collect();
    let mut out = Vec::new();
    for task in &train.tasks {
        bundle.check_vocab(&task.vocab)?;
        let rows: Vec<usize> = task
            .vocab
            .action_ids()
            .map(|a| bundle.row(task.task_id(), a))
            .collect::<Result<_>>()?;
        for v in &task.videos {
            for seg in &v.segments {
                let w = condition_windows(v, seg);
                let positive = bundle.row(task.task_id(), seg.action)?;
                let pool = match negatives {
                    NegativeSet::Task => &rows,
                    NegativeSet::AllTasks => &all_actions,
                };
                out.push(Sample {
                    pre: w.pre.into_vec(),
                    post: w.post.into_vec(),
                    positive,
                    negatives: pool.iter().copied().filter(|r| *r != positive).collect(),
                });
            }
        }
    }
    Ok(out)
}

/// Per-epoch mean training loss.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub epoch_loss: Vec<f64>,
}

/// Online Adam over every annotated training segment, one segment per step,
/// in a freshly shuffled order each epoch. Frozen tables are returned as-is.
pub fn train_embeddings(
    mut bundle: EmbeddingBundle,
    train: &Corpus,
    cfg: &EmbeddingConfig,
    shuffle_seed: u64,
) -> Result<(EmbeddingBundle, TrainLog)> {
    let samples = training_samples(&bundle, train, cfg.negatives)?;
    if samples.is_empty() {
        return Err(Error::Training("no annotated segments to train embeddings on".into()));
    }
    let mut log = TrainLog::default();
    if bundle.kind != TableKind::Trained || cfg.epochs == 0 {
        return Ok((bundle, log));
    }
    let mut adam = AdamState::new(bundle.named().into_iter().map(|(n, t)| (n.to_string(), t)));
    let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &i in &order {
            let s = &samples[i];
            let (loss, grads) = {
                let mut tape = Tape::new();
                let vars = EmbeddingVars::register(&mut tape, &bundle);
                let pre = tape.input_slice(&s.pre);
                let post = tape.input_slice(&s.post);
                let loss = segment_loss(&mut tape, &vars, pre, post, s.positive, &s.negatives, bundle.margin)?;
                let g = tape.backward(loss)?;
                (tape.scalar(loss), g.into_dense(vars.leaves()))
            };
            total += loss;
            let [cw1, cb1, cw2, cb2] = bundle.cond_gen.params_mut().map(|(_, t)| t);
            let [pw1, pb1, pw2, pb2] = bundle.predictor.params_mut().map(|(_, t)| t);
            adam.step(
                &mut [cw1, cb1, cw2, cb2, pw1, pb1, pw2, pb2, &mut bundle.table],
                &grads,
                cfg.lr,
            )?;
        }
        let mean = total / samples.len() as f64;
        info!("embeddings epoch {}/{}: mean loss {mean:.6}", epoch + 1, cfg.epochs);
        log.epoch_loss.push(mean);
    }
    Ok((bundle, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::finite_diff_check;

    fn vocab(task: &str, n: usize) -> ActionVocabulary {
        ActionVocabulary::new(task, (0..n).map(|i| format!("x{i}")).collect()).unwrap()
    }

    fn small_cfg() -> EmbeddingConfig {
        EmbeddingConfig { cond_dim: 6, embed_dim: 5, hidden: 7, ..Default::default() }
    }

    fn bundle() -> EmbeddingBundle {
        let (a, b) = (vocab("t", 3), vocab("u", 2));
        EmbeddingBundle::init(&[&a, &b], 4, &small_cfg(), TableKind::Trained, 3).unwrap()
    }

    fn window(seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::uniform_init(&[2, 4], 1, &mut rng)
    }

    #[test]
    fn row_layout() {
        let b = bundle();
        assert_eq!(b.n_rows(), 7);
        assert_eq!(b.row("t", ActionId(1)).unwrap(), 2);
        assert_eq!(b.row("u", ActionId(2)).unwrap(), 6);
        assert_eq!(b.row("u", ActionId(3)).unwrap(), EOS_ROW);
        assert_eq!(b.row("t", ActionId::NULL).unwrap(), NULL_ROW);
        assert!(b.row("u", ActionId(4)).is_err());
        assert!(b.row("zz", ActionId(1)).is_err());
    }

    #[test]
    fn zero_weights_give_bias() {
        let mut b = bundle();
        b.cond_gen = Mlp2Params::zeros(8, 7, 6, Activation::Relu);
        b.cond_gen.b2 = Tensor::vector(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let f = condition_features(&b, &Tensor::zeros(&[2, 4])).unwrap();
        assert_eq!(f, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        b.predictor = Mlp2Params::zeros(11, 7, 6, Activation::Relu);
        b.predictor.b2 = Tensor::vector(vec![-1.0; 6]).unwrap();
        assert_eq!(predict_post(&b, &f, b.embedding(2)).unwrap(), vec![-1.0; 6]);
        assert_eq!(predict_post(&b, &f, b.embedding(3)).unwrap(), vec![-1.0; 6]);
        b.predictor.b2 = b.cond_gen.b2.clone();
        assert_eq!(disc_loss(&b, &window(1), &window(2), 2).unwrap(), 0.0);
        b.predictor.b2 = Tensor::vector(vec![-1.0, -2.0, -3.0, -4.0, -5.0, -6.0]).unwrap();
        assert!((disc_loss(&b, &window(1), &window(2), 2).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn shape_and_usage_errors() {
        let b = bundle();
        assert!(condition_features(&b, &Tensor::zeros(&[3, 4])).is_err());
        assert!(predict_post(&b, &[0.0; 5], b.embedding(2)).is_err());
        assert!(cont_loss(&b, &window(1), &window(2), 2, &[3, 2]).is_err());
        assert!(disc_loss(&b, &window(1), &window(2), EOS_ROW).is_err());
    }

    /// Straight-line two-layer evaluation with explicit loops.
    fn mlp_oracle(p: &Mlp2Params, x: &[f64]) -> Vec<f64> {
        let (h, o) = (p.hidden_dim(), p.output_dim());
        let hid: Vec<f64> = (0..h)
            .map(|i| {
                let mut s = p.b1.as_slice()[i];
                for (j, xj) in x.iter().enumerate() {
                    s += p.w1.as_slice()[i * x.len() + j] * xj;
                }
                s.max(0.0)
            })
            .collect();
        (0..o)
            .map(|i| {
                let mut s = p.b2.as_slice()[i];
                for (j, hj) in hid.iter().enumerate() {
                    s += p.w2.as_slice()[i * h + j] * hj;
                }
                s
            })
            .collect()
    }

    #[test]
    fn matches_straight_line_oracle() {
        let b = bundle();
        let (pre, post) = (window(5), window(6));
        let f = condition_features(&b, &pre).unwrap();
        let fo = mlp_oracle(&b.cond_gen, pre.as_slice());
        assert!(f.iter().zip(&fo).all(|(a, c)| (a - c).abs() < 1e-12));
        let x: Vec<f64> = f.iter().chain(b.embedding(4)).copied().collect();
        let g = predict_post(&b, &f, b.embedding(4)).unwrap();
        let go = mlp_oracle(&b.predictor, &x);
        assert!(g.iter().zip(&go).all(|(a, c)| (a - c).abs() < 1e-12));
        let fp = condition_features(&b, &post).unwrap();
        let d = cosine_distance(&g, &fp).unwrap();
        assert!((disc_loss(&b, &pre, &post, 4).unwrap() - d).abs() < 1e-12);
        let g2 = predict_post(&b, &f, b.embedding(5)).unwrap();
        assert_ne!(g, g2);
    }

    #[test]
    fn cont_loss_direct_formula() {
        let b = bundle();
        let (pre, post) = (window(8), window(9));
        let d = disc_losses(&b, &pre, &post, &[3, 4]).unwrap();
        let expected: f64 = d.iter().map(|x| (0.5 - x).max(0.0)).sum();
        assert!((cont_loss(&b, &pre, &post, 2, &[3, 4]).unwrap() - expected).abs() < 1e-12);
        let swapped = cont_loss(&b, &pre, &post, 2, &[4, 3]).unwrap();
        assert_eq!(swapped, cont_loss(&b, &pre, &post, 2, &[3, 4]).unwrap());
    }

    #[test]
    fn segment_loss_matches_value_functions() {
        let b = bundle();
        let (pre, post) = (window(10), window(11));
        let mut tape = Tape::new();
        let vars = EmbeddingVars::register(&mut tape, &b);
        let p = tape.input_slice(pre.as_slice());
        let q = tape.input_slice(post.as_slice());
        let l = segment_loss(&mut tape, &vars, p, q, 2, &[3, 4], b.margin).unwrap();
        let expected = disc_loss(&b, &pre, &post, 2).unwrap() + cont_loss(&b, &pre, &post, 2, &[3, 4]).unwrap();
        assert!((tape.scalar(l) - expected).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let b = bundle();
        let (pre, post) = (window(12), window(13));
        let mut params: Vec<Tensor> = b.named().into_iter().map(|(_, t)| t.clone()).collect();
        // Shift the margin so every hinge is active.
        let margin = 2.5;
        params.push(pre);
        params.push(post);
        let err = finite_diff_check(
            |tape, v| {
                let relu = Activation::Relu;
                let cond = Mlp2Vars { w1: v[0], b1: v[1], w2: v[2], b2: v[3], activation: relu };
                let pred = Mlp2Vars { w1: v[4], b1: v[5], w2: v[6], b2: v[7], activation: relu };
                let vars = EmbeddingVars { cond, pred, table: v[8] };
                segment_loss(tape, &vars, v[9], v[10], 2, &[3, 4], margin).map_err(|e| match e {
                    Error::Num(n) => n,
                    other => panic!("{other}"),
                })
            },
            &params,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn save_load_round_trip() {
        let b = bundle();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("emb.json");
        b.save(&p).unwrap();
        let back = EmbeddingBundle::load(&p).unwrap();
        assert_eq!(back, b);
        assert_eq!(back.content_hash(), b.content_hash());
    }

    #[test]
    fn onehot_rows_are_orthonormal() {
        let a = vocab("t", 3);
        let b = EmbeddingBundle::init(&[&a], 4, &small_cfg(), TableKind::OneHot, 0).unwrap();
        for i in 0..b.n_rows() {
            for j in 0..b.n_rows() {
                let d: f64 = b.embedding(i).iter().zip(b.embedding(j)).map(|(x, y)| x * y).sum();
                assert_eq!(d, if i == j { 1.0 } else { 0.0 });
            }
        }
    }
}
