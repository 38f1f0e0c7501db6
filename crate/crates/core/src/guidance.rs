//! Task tracking, next-action recommendation and beam-search planning over
//! a task graph, sharing one recurrent history cell.
//!
//! The tracker scores `(x_t, h, e_a)` for every candidate action `a` and
//! localizes the second to the best one. The recommender scores
//! `(e_last, h, e_c)` for every graph successor `c` of the last action. `h`
//! summarizes the action history. Both scorers are two-layer networks with
//! a scalar output; scores are normalized with a softmax over the candidates.

use std::collections::BTreeMap;
use std::path::Path;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{compressed_sequence, framewise_labels, ActionId, ActionVocabulary, Corpus, VideoRecord};
use crate::embedding::{EmbeddingBundle, EOS_ROW, NULL_ROW};
use crate::graph::Adtg;
use crate::numkit::{
    argmax, log_softmax, matvec_cols_acc, rnn_step, Activation, AdamState, Mlp2Params, Mlp2Vars, RnnParams,
    RnnVars, Tape, Tensor, Var,
};
use crate::store::{self, StoreError};
use crate::{Error, Result};

const BUNDLE_KIND: &str = "adtg-guidance";

/// What the history cell consumes while tracking.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HistoryMode {
    /// One step per action event (compressed, null-free history).
    Events,
    /// One step per second, including null seconds.
    Seconds,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceConfig {
    pub rnn_hidden: usize,
    pub scorer_hidden: usize,
    pub lr: f64,
    pub tracker_epochs: usize,
    pub recommender_epochs: usize,
    pub history_mode: HistoryMode,
    /// `false` feeds the scorers a zero history and never trains the cell.
    pub use_history: bool,
    /// Whether recommender training also updates the history cell.
    pub joint_rnn: bool,
    pub beam_width: usize,
    pub max_len: usize,
    /// Complete plans start from frame `1 + plan_offset`.
    pub plan_offset: usize,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            rnn_hidden: 128,
            scorer_hidden: 128,
            lr: 5e-5,
            tracker_epochs: 50,
            recommender_epochs: 100,
            history_mode: HistoryMode::Events,
            use_history: true,
            joint_rnn: true,
            beam_width: 5,
            max_len: 20,
            plan_offset: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct GuidanceMeta {
    feature_dim: usize,
    use_history: bool,
    history_mode: HistoryMode,
    embedding_hash: String,
    graph_hashes: BTreeMap<String, String>,
    seed: u64,
}

/// History cell, both scorers and trainable NULL/EOS embeddings, bound to the
/// embedding bundle and graphs they were trained with.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceBundle {
    pub rnn: RnnParams,
    pub track: Mlp2Params,
    pub rec: Mlp2Params,
    /// Row 0 is NULL, row 1 is EOS.
    pub special: Tensor,
    pub use_history: bool,
    pub history_mode: HistoryMode,
    pub seed: u64,
    feature_dim: usize,
    embedding_hash: String,
    graph_hashes: BTreeMap<String, String>,
}

pub fn graph_hash(g: &Adtg) -> String {
    store::sha256_hex(g.to_json().as_bytes())
}

impl GuidanceBundle {
    pub fn init(
        emb: &EmbeddingBundle,
        graphs: &BTreeMap<String, Adtg>,
        cfg: &GuidanceConfig,
        seed: u64,
    ) -> Result<Self> {
        if cfg.rnn_hidden == 0 || cfg.scorer_hidden == 0 {
            return Err(Error::Config("guidance dimensions must be positive".into()));
        }
        let (d, e, h) = (emb.feature_dim(), emb.embed_dim(), cfg.rnn_hidden);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rnn = RnnParams::init(e, h, &mut rng);
        let track = Mlp2Params::init(d + h + e, cfg.scorer_hidden, 1, Activation::Relu, &mut rng);
        let rec = Mlp2Params::init(e + h + e, cfg.scorer_hidden, 1, Activation::Relu, &mut rng);
        let mut special = Tensor::zeros(&[2, e]);
        special.row_mut(0).copy_from_slice(emb.embedding(NULL_ROW));
        special.row_mut(1).copy_from_slice(emb.embedding(EOS_ROW));
        Ok(Self {
            rnn,
            track,
            rec,
            special,
            use_history: cfg.use_history,
            history_mode: cfg.history_mode,
            seed,
            feature_dim: d,
            embedding_hash: emb.content_hash(),
            graph_hashes: graphs.iter().map(|(k, g)| (k.clone(), graph_hash(g))).collect(),
        })
    }

    pub fn hidden_dim(&self) -> usize {
        self.rnn.hidden_dim()
    }

    pub fn embedding_hash(&self) -> &str {
        &self.embedding_hash
    }

    fn meta(&self) -> GuidanceMeta {
        GuidanceMeta {
            feature_dim: self.feature_dim,
            use_history: self.use_history,
            history_mode: self.history_mode,
            embedding_hash: self.embedding_hash.clone(),
            graph_hashes: self.graph_hashes.clone(),
            seed: self.seed,
        }
    }

    fn named(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("rnn.w_in", &self.rnn.w_in),
            ("rnn.w_h", &self.rnn.w_h),
            ("rnn.b", &self.rnn.b),
            ("track.w1", &self.track.w1),
            ("track.b1", &self.track.b1),
            ("track.w2", &self.track.w2),
            ("track.b2", &self.track.b2),
            ("rec.w1", &self.rec.w1),
            ("rec.b1", &self.rec.b1),
            ("rec.w2", &self.rec.w2),
            ("rec.b2", &self.rec.b2),
            ("special", &self.special),
        ]
    }

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
        let meta: GuidanceMeta = serde_json::from_value(meta).map_err(|e| StoreError::Format {
            file: file.clone(),
            message: format!("bad metadata: {e}"),
        })?;
        let [w_in, w_h, b, tw1, tb1, tw2, tb2, rw1, rb1, rw2, rb2, special] = store::take_tensors(
            &mut tensors,
            [
                "rnn.w_in", "rnn.w_h", "rnn.b", "track.w1", "track.b1", "track.w2", "track.b2", "rec.w1",
                "rec.b1", "rec.w2", "rec.b2", "special",
            ],
            &file,
        )?;
        let relu = Activation::Relu;
        let g = Self {
            rnn: RnnParams { w_in, w_h, b },
            track: Mlp2Params { w1: tw1, b1: tb1, w2: tw2, b2: tb2, activation: relu },
            rec: Mlp2Params { w1: rw1, b1: rb1, w2: rw2, b2: rb2, activation: relu },
            special,
            use_history: meta.use_history,
            history_mode: meta.history_mode,
            seed: meta.seed,
            feature_dim: meta.feature_dim,
            embedding_hash: meta.embedding_hash,
            graph_hashes: meta.graph_hashes,
        };
        g.validate().map_err(|e| StoreError::Format { file, message: e.to_string() })?;
        Ok(g)
    }

    fn validate(&self) -> Result<()> {
        self.track.validate()?;
        self.rec.validate()?;
        let (h, e) = (self.rnn.hidden_dim(), self.rnn.input_dim());
        let ok = self.rnn.w_h.shape() == [h, h]
            && self.rnn.w_in.shape() == [h, e]
            && self.track.input_dim() == self.feature_dim + h + e
            && self.rec.input_dim() == 2 * e + h
            && self.track.output_dim() == 1
            && self.rec.output_dim() == 1
            && self.special.shape() == [2, e];
        if ok {
            Ok(())
        } else {
            Err(Error::Config("guidance bundle dimensions are inconsistent".into()))
        }
    }
}

/// Progress through one task: the history summary, the last action that
/// entered it and the history itself.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackState {
    pub h: Vec<f64>,
    pub last_action: ActionId,
    pub history: Vec<ActionId>,
}

/// One scored step of a planning session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub step: usize,
    pub kind: String,
    pub candidates: Vec<String>,
    pub log_probs: Vec<f64>,
    pub chosen: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    /// Localized action first, EOS excluded.
    pub actions: Vec<ActionId>,
    pub log_prob: f64,
    /// Whether the plan ended by choosing EOS.
    pub finished: bool,
    pub trace: Vec<TraceStep>,
}

impl Plan {
    pub fn trace_jsonl(&self) -> String {
        let mut out = String::new();
        for s in &self.trace {
            out.push_str(&serde_json::to_string(s).expect("trace serializes"));
            out.push('\n');
        }
        out
    }
}

/// `W1[:, offset..offset + x.len()] · x`.
fn block(net: &Mlp2Params, offset: usize, x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; net.hidden_dim()];
    matvec_cols_acc(net.w1.as_slice(), net.w1.cols(), offset, x, &mut out);
    out
}

/// Scalar output from first-layer partial products (bias added here).
fn head(net: &Mlp2Params, parts: &[&[f64]]) -> f64 {
    let w2 = net.w2.as_slice();
    let mut out = net.b2.as_slice()[0];
    for (i, b) in net.b1.as_slice().iter().enumerate() {
        let pre = b + parts.iter().map(|p| p[i]).sum::<f64>();
        out += w2[i] * net.activation.apply(pre);
    }
    out
}

/// Read-only view pairing a guidance bundle with its embeddings.
#[derive(Debug, Clone, Copy)]
pub struct Guidance<'a> {
    pub emb: &'a EmbeddingBundle,
    pub bundle: &'a GuidanceBundle,
}

impl<'a> Guidance<'a> {
    /// Fails when the bundle was trained against different embeddings.
    pub fn new(emb: &'a EmbeddingBundle, bundle: &'a GuidanceBundle) -> Result<Self> {
        if emb.content_hash() != bundle.embedding_hash {
            return Err(Error::Config(
                "guidance bundle was trained with a different embedding bundle".into(),
            ));
        }
        if emb.feature_dim() != bundle.feature_dim || emb.embed_dim() != bundle.rnn.input_dim() {
            return Err(Error::Config("guidance and embedding dimensions disagree".into()));
        }
        Ok(Self { emb, bundle })
    }

    /// Checks that `graph` is the one the bundle was trained with.
    pub fn check_graph(&self, graph: &Adtg) -> Result<()> {
        match self.bundle.graph_hashes.get(graph.task_id()) {
            Some(h) if *h == graph_hash(graph) => Ok(()),
            Some(_) => Err(Error::Config(format!("graph for task {} changed since training", graph.task_id()))),
            None => Err(Error::Config(format!("guidance bundle has no graph for task {}", graph.task_id()))),
        }
    }

    pub fn initial_state(&self) -> TrackState {
        TrackState {
            h: vec![0.0; self.bundle.hidden_dim()],
            last_action: ActionId::NULL,
            history: Vec::new(),
        }
    }

    /// Embedding of `a`, with NULL and EOS taken from the trainable copies.
    pub fn embed(&self, task_id: &str, a: ActionId) -> Result<&'a [f64]> {
        let row = self.emb.row(task_id, a)?;
        Ok(match row {
            NULL_ROW => self.bundle.special.row(0),
            EOS_ROW => self.bundle.special.row(1),
            r => self.emb.embedding(r),
        })
    }

    fn context<'s>(&self, state: &'s TrackState, zeros: &'s [f64]) -> &'s [f64] {
        if self.bundle.use_history {
            &state.h
        } else {
            zeros
        }
    }

    /// Log-probabilities of `candidates` for frame `x`; returns the argmax
    /// (ties to the lowest candidate index) and the log-probabilities.
    pub fn track_step(
        &self,
        task_id: &str,
        state: &TrackState,
        x: &[f64],
        candidates: &[ActionId],
    ) -> Result<(ActionId, Vec<f64>)> {
        let cands = self.track_candidates(task_id, candidates)?;
        let ctx = self.track_context(state)?;
        let lp = self.track_scores(&cands, &ctx, x)?;
        Ok((candidates[argmax(&lp)], lp))
    }

    fn track_candidates(&self, task_id: &str, candidates: &[ActionId]) -> Result<Vec<Vec<f64>>> {
        if candidates.is_empty() {
            return Err(Error::Usage("tracking needs at least one candidate".into()));
        }
        let off = self.bundle.feature_dim + self.bundle.hidden_dim();
        candidates
            .iter()
            .map(|a| Ok(block(&self.bundle.track, off, self.embed(task_id, *a)?)))
            .collect()
    }

    fn track_context(&self, state: &TrackState) -> Result<Vec<f64>> {
        let zeros = vec![0.0; self.bundle.hidden_dim()];
        let h = self.context(state, &zeros);
        if h.len() != self.bundle.hidden_dim() {
            return Err(crate::numkit::NumError::Shape(format!("history vector of length {}", h.len())).into());
        }
        Ok(block(&self.bundle.track, self.bundle.feature_dim, h))
    }

    fn track_scores(&self, cands: &[Vec<f64>], ctx: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.bundle.feature_dim {
            return Err(crate::numkit::NumError::Shape(format!(
                "frame of length {} for a tracker over {} features",
                x.len(),
                self.bundle.feature_dim
            ))
            .into());
        }
        let xp = block(&self.bundle.track, 0, x);
        let logits: Vec<f64> = cands.iter().map(|c| head(&self.bundle.track, &[&xp, ctx, c])).collect();
        Ok(log_softmax(&logits))
    }

    fn step_history(&self, task_id: &str, state: &TrackState, a: ActionId) -> Result<TrackState> {
        let h = if self.bundle.use_history {
            rnn_step(&self.bundle.rnn, &state.h, self.embed(task_id, a)?)?
        } else {
            state.h.clone()
        };
        let mut history = state.history.clone();
        history.push(a);
        Ok(TrackState { h, last_action: a, history })
    }

    /// Feeds a non-null action into the history.
    pub fn advance_history(&self, task_id: &str, state: &TrackState, a: ActionId) -> Result<TrackState> {
        if a.is_null() {
            return Err(Error::Usage("the null action never enters the history".into()));
        }
        self.step_history(task_id, state, a)
    }

    /// Scores the graph successors of the last action.
    pub fn recommend(&self, graph: &Adtg, state: &TrackState) -> Result<(ActionId, Vec<ActionId>, Vec<f64>)> {
        let cands = graph.successors(state.last_action)?;
        if cands.is_empty() {
            return Err(Error::Planning(format!(
                "dead-end node {} in task {}",
                graph.label(state.last_action).unwrap_or("?"),
                graph.task_id()
            )));
        }
        let task = graph.task_id();
        let (e, hd) = (self.emb.embed_dim(), self.bundle.hidden_dim());
        let zeros = vec![0.0; hd];
        let last = block(&self.bundle.rec, 0, self.embed(task, state.last_action)?);
        let hp = block(&self.bundle.rec, e, self.context(state, &zeros));
        let mut logits = Vec::with_capacity(cands.len());
        for c in &cands {
            let cp = block(&self.bundle.rec, e + hd, self.embed(task, *c)?);
            logits.push(head(&self.bundle.rec, &[&last, &hp, &cp]));
        }
        let lp = log_softmax(&logits);
        Ok((cands[argmax(&lp)], cands, lp))
    }

    /// Free-running per-second localization over NULL and every task action.
    /// The history advances with the predicted action whenever a non-null
    /// prediction differs from the previous second's prediction (or every
    /// second in per-second history mode).
    pub fn track_video(&self, vocab: &ActionVocabulary, video: &VideoRecord) -> Result<Vec<ActionId>> {
        let task = vocab.task_id();
        let candidates: Vec<ActionId> = std::iter::once(ActionId::NULL).chain(vocab.action_ids()).collect();
        let cands = self.track_candidates(task, &candidates)?;
        let mut state = self.initial_state();
        let mut ctx = self.track_context(&state)?;
        let mut prev = ActionId::NULL;
        let mut out = Vec::with_capacity(video.features.frames());
        for t in 1..=video.features.frames() {
            let lp = self.track_scores(&cands, &ctx, &video.features.frame_f64(t))?;
            let p = candidates[argmax(&lp)];
            let fire = match self.bundle.history_mode {
                HistoryMode::Events => !p.is_null() && p != prev,
                HistoryMode::Seconds => true,
            };
            if fire {
                state = self.step_history(task, &state, p)?;
                ctx = self.track_context(&state)?;
            }
            prev = p;
            out.push(p);
        }
        Ok(out)
    }

    /// History state after teacher-forcing `prefix`.
    pub fn state_after(&self, task_id: &str, prefix: &[ActionId]) -> Result<TrackState> {
        let mut s = self.initial_state();
        for a in prefix {
            s = self.advance_history(task_id, &s, *a)?;
        }
        Ok(s)
    }

    /// Localizes `x_init` among the graph's action nodes after `prefix`, then
    /// extends the plan by beam search over recommendations until EOS or
    /// `max_len` actions. Trajectories are ranked by unnormalized cumulative
    /// log-probability; ties keep the earlier-generated trajectory.
    pub fn plan(
        &self,
        graph: &Adtg,
        x_init: &[f64],
        prefix: &[ActionId],
        beam_width: usize,
        max_len: usize,
    ) -> Result<Plan> {
        if beam_width < 1 || max_len < 1 {
            return Err(Error::Usage("beam width and max plan length must be at least 1".into()));
        }
        let task = graph.task_id();
        let state = self.state_after(task, prefix)?;
        let nodes = graph.action_nodes();
        let (a0, track_lp) = self.track_step(task, &state, x_init, &nodes)?;
        let state = if prefix.last() == Some(&a0) {
            state
        } else {
            self.advance_history(task, &state, a0)?
        };

        struct Traj {
            actions: Vec<ActionId>,
            lp: f64,
            state: TrackState,
            finished: bool,
        }
        let mut live = vec![Traj { actions: vec![a0], lp: 0.0, state, finished: false }];
        let mut finished: Vec<Traj> = Vec::new();
        while !live.is_empty() && live.iter().any(|t| t.actions.len() < max_len) {
            let mut next: Vec<Traj> = Vec::new();
            for t in live {
                if t.actions.len() >= max_len {
                    next.push(t);
                    continue;
                }
                let (_, cands, lp) = self.recommend(graph, &t.state)?;
                for (c, l) in cands.iter().zip(&lp) {
                    if *c == graph.eos() {
                        next.push(Traj {
                            actions: t.actions.clone(),
                            lp: t.lp + l,
                            state: t.state.clone(),
                            finished: true,
                        });
                    } else {
                        let mut actions = t.actions.clone();
                        actions.push(*c);
                        next.push(Traj {
                            actions,
                            lp: t.lp + l,
                            state: self.advance_history(task, &t.state, *c)?,
                            finished: false,
                        });
                    }
                }
            }
            next.sort_by(|a, b| b.lp.total_cmp(&a.lp));
            next.truncate(beam_width);
            let (done, rest): (Vec<Traj>, Vec<Traj>) = next.into_iter().partition(|t| t.finished);
            finished.extend(done);
            live = rest;
        }
        let best = {
            let pool = if finished.is_empty() { &live } else { &finished };
            let mut best = &pool[0];
            for t in pool {
                if t.lp > best.lp {
                    best = t;
                }
            }
            best
        };

        let name = |a: ActionId| graph.label(a).unwrap_or("?").to_string();
        let mut trace = vec![TraceStep {
            step: 0,
            kind: "track".into(),
            candidates: nodes.iter().map(|a| name(*a)).collect(),
            log_probs: track_lp,
            chosen: name(a0),
        }];
        let mut s = self.state_after(task, prefix)?;
        if prefix.last() != Some(&a0) {
            s = self.advance_history(task, &s, a0)?;
        }
        let chosen: Vec<ActionId> = best.actions[1..]
            .iter()
            .copied()
            .chain(best.finished.then(|| graph.eos()))
            .collect();
        for (i, c) in chosen.iter().enumerate() {
            let (_, cands, lp) = self.recommend(graph, &s)?;
            trace.push(TraceStep {
                step: i + 1,
                kind: "recommend".into(),
                candidates: cands.iter().map(|a| name(*a)).collect(),
                log_probs: lp,
                chosen: name(*c),
            });
            if *c != graph.eos() {
                s = self.advance_history(task, &s, *c)?;
            }
        }
        Ok(Plan {
            actions: best.actions.clone(),
            log_prob: best.lp,
            finished: best.finished,
            trace,
        })
    }

    /// Greedy rollout: localize, then follow the most likely successor until
    /// EOS or `max_len` actions.
    pub fn greedy_plan(&self, graph: &Adtg, x_init: &[f64], prefix: &[ActionId], max_len: usize) -> Result<Vec<ActionId>> {
        let task = graph.task_id();
        let mut state = self.state_after(task, prefix)?;
        let (a0, _) = self.track_step(task, &state, x_init, &graph.action_nodes())?;
        if prefix.last() != Some(&a0) {
            state = self.advance_history(task, &state, a0)?;
        }
        let mut out = vec![a0];
        while out.len() < max_len {
            let (c, _, _) = self.recommend(graph, &state)?;
            if c == graph.eos() {
                break;
            }
            state = self.advance_history(task, &state, c)?;
            out.push(c);
        }
        Ok(out)
    }
}

/// Tape handles for every guidance parameter.
#[derive(Debug, Clone, Copy)]
pub struct GuidanceVars {
    pub rnn: RnnVars,
    pub track: Mlp2Vars,
    pub rec: Mlp2Vars,
    pub special: Var,
}

impl GuidanceVars {
    pub fn register<'a>(tape: &mut Tape<'a>, g: &'a GuidanceBundle) -> Self {
        Self {
            rnn: tape.rnn(&g.rnn),
            track: tape.mlp2(&g.track),
            rec: tape.mlp2(&g.rec),
            special: tape.leaf(&g.special),
        }
    }
}

/// Where a tape input embedding comes from.
#[derive(Debug, Clone, Copy)]
pub enum EmbedSource<'a> {
    /// Frozen action embedding.
    Fixed(&'a [f64]),
    /// Row of the trainable NULL/EOS table.
    Special(usize),
}

fn embed_var<'a>(tape: &mut Tape<'a>, special: Var, src: EmbedSource<'a>) -> Result<Var> {
    Ok(match src {
        EmbedSource::Fixed(v) => tape.input_slice(v),
        EmbedSource::Special(r) => tape.row(special, r)?,
    })
}

/// Runs the history cell over `history` from a zero state; with
/// `use_history` off the result is a zero vector.
pub fn history_on_tape<'a>(
    tape: &mut Tape<'a>,
    vars: &GuidanceVars,
    hidden: usize,
    history: &[EmbedSource<'a>],
    use_history: bool,
) -> Result<Var> {
    let mut h = tape.input(vec![0.0; hidden]);
    if use_history {
        for src in history {
            let e = embed_var(tape, vars.special, *src)?;
            h = tape.rnn_step(&vars.rnn, h, e)?;
        }
    }
    Ok(h)
}

fn finish_logit(tape: &mut Tape<'_>, net: &Mlp2Vars, pre: Var) -> Result<Var> {
    let a = tape.activate(pre, net.activation);
    let o = tape.matvec(net.w2, a)?;
    Ok(tape.add(o, net.b2)?)
}

/// Mean tracking cross-entropy over several frames sharing one history.
pub fn tracking_loss<'a>(
    tape: &mut Tape<'a>,
    vars: &GuidanceVars,
    h: Var,
    frames: &[(Var, usize)],
    candidates: &[EmbedSource<'a>],
    feature_dim: usize,
) -> Result<Var> {
    let hd = tape.value(h).len();
    let hh = tape.matvec_cols(vars.track.w1, h, feature_dim)?;
    let base = tape.add(hh, vars.track.b1)?;
    let mut cand = Vec::with_capacity(candidates.len());
    for src in candidates {
        let e = embed_var(tape, vars.special, *src)?;
        cand.push(tape.matvec_cols(vars.track.w1, e, feature_dim + hd)?);
    }
    let mut losses = Vec::with_capacity(frames.len());
    for &(x, target) in frames {
        let xp = tape.matvec_cols(vars.track.w1, x, 0)?;
        let sb = tape.add(base, xp)?;
        let mut logits = Vec::with_capacity(cand.len());
        for c in &cand {
            let pre = tape.add(sb, *c)?;
            logits.push(finish_logit(tape, &vars.track, pre)?);
        }
        let l = tape.concat(&logits);
        losses.push(tape.softmax_cross_entropy(l, target)?);
    }
    let total = tape.sum_scalars(&losses)?;
    Ok(tape.scale(total, 1.0 / frames.len().max(1) as f64))
}

/// Recommendation cross-entropy for one `(last, next)` pair.
pub fn recommendation_loss<'a>(
    tape: &mut Tape<'a>,
    vars: &GuidanceVars,
    h: Var,
    last: EmbedSource<'a>,
    candidates: &[EmbedSource<'a>],
    target: usize,
) -> Result<Var> {
    let e_last = embed_var(tape, vars.special, last)?;
    let e = tape.value(e_last).len();
    let hd = tape.value(h).len();
    let (partial, off) = tape.mlp2_partial(&vars.rec, &[e_last, h], 0)?;
    debug_assert_eq!(off, e + hd);
    let mut logits = Vec::with_capacity(candidates.len());
    for src in candidates {
        let c = embed_var(tape, vars.special, *src)?;
        let cp = tape.matvec_cols(vars.rec.w1, c, off)?;
        let pre = tape.add(partial, cp)?;
        logits.push(finish_logit(tape, &vars.rec, pre)?);
    }
    let l = tape.concat(&logits);
    Ok(tape.softmax_cross_entropy(l, target)?)
}

fn source<'a>(emb: &'a EmbeddingBundle, task: &str, a: ActionId) -> Result<EmbedSource<'a>> {
    Ok(match emb.row(task, a)? {
        NULL_ROW => EmbedSource::Special(0),
        EOS_ROW => EmbedSource::Special(1),
        r => EmbedSource::Fixed(emb.embedding(r)),
    })
}

/// Frames `lo..=hi` (1-based) tracked under one teacher-forced history.
struct TrackUnit {
    task: usize,
    video: usize,
    lo: usize,
    hi: usize,
    history: Vec<ActionId>,
}

/// Per task, per video: the per-second labels.
type TaskLabels = Vec<Vec<Vec<ActionId>>>;

fn tracking_units(train: &Corpus, mode: HistoryMode) -> Result<(Vec<TrackUnit>, TaskLabels)> {
    let mut units = Vec::new();
    let mut labels_all = Vec::with_capacity(train.tasks.len());
    for (ti, task) in train.tasks.iter().enumerate() {
        let mut task_labels = Vec::with_capacity(task.videos.len());
        for (vi, v) in task.videos.iter().enumerate() {
            let labels = framewise_labels(v, &task.vocab)?;
            let mut history: Vec<ActionId> = Vec::new();
            let mut lo = 1;
            for t in 2..=labels.len() + 1 {
                let prev = labels[t - 2];
                let fire = match mode {
                    HistoryMode::Events => !prev.is_null() && (t == 2 || labels[t - 3] != prev),
                    HistoryMode::Seconds => true,
                };
                if fire || t == labels.len() + 1 {
                    units.push(TrackUnit { task: ti, video: vi, lo, hi: t - 1, history: history.clone() });
                    lo = t;
                }
                if fire {
                    history.push(prev);
                }
            }
            task_labels.push(labels);
        }
        labels_all.push(task_labels);
    }
    Ok((units, labels_all))
}

fn check_bound(emb: &EmbeddingBundle, g: &GuidanceBundle, train: &Corpus) -> Result<()> {
    if emb.content_hash() != g.embedding_hash {
        return Err(Error::Config("guidance bundle is not bound to this embedding bundle".into()));
    }
    for t in &train.tasks {
        emb.check_vocab(&t.vocab)?;
    }
    Ok(())
}

/// Per-epoch mean loss of a guidance training stage.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct StageLog {
    pub epoch_loss: Vec<f64>,
}

/// Trains the tracker, the history cell and the NULL embedding on every
/// second of the training videos with teacher-forced history. Frames that
/// share a history form one Adam step.
pub fn train_tracker(
    mut g: GuidanceBundle,
    emb: &EmbeddingBundle,
    train: &Corpus,
    cfg: &GuidanceConfig,
    shuffle_seed: u64,
) -> Result<(GuidanceBundle, StageLog)> {
    check_bound(emb, &g, train)?;
    let (units, labels) = tracking_units(train, g.history_mode)?;
    if units.is_empty() {
        return Err(Error::Training("no training videos for the tracker".into()));
    }
    let mut log = StageLog::default();
    if cfg.tracker_epochs == 0 {
        return Ok((g, log));
    }
    let frames: Vec<Vec<Vec<f64>>> = train
        .tasks
        .iter()
        .flat_map(|t| t.videos.iter())
        .map(|v| (1..=v.features.frames()).map(|t| v.features.frame_f64(t)).collect())
        .collect();
    let video_base: Vec<usize> = train
        .tasks
        .iter()
        .scan(0, |acc, t| {
            let b = *acc;
            *acc += t.videos.len();
            Some(b)
        })
        .collect();
    let candidates: Vec<Vec<ActionId>> = train
        .tasks
        .iter()
        .map(|t| std::iter::once(ActionId::NULL).chain(t.vocab.action_ids()).collect())
        .collect();

    let names = ["rnn.w_in", "rnn.w_h", "rnn.b", "track.w1", "track.b1", "track.w2", "track.b2", "special"];
    let mut adam = {
        let ts = [&g.rnn.w_in, &g.rnn.w_h, &g.rnn.b, &g.track.w1, &g.track.b1, &g.track.w2, &g.track.b2, &g.special];
        AdamState::new(names.iter().map(|n| n.to_string()).zip(ts))
    };
    let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
    let mut order: Vec<usize> = (0..units.len()).collect();
    let hidden = g.hidden_dim();
    for epoch in 0..cfg.tracker_epochs {
        order.shuffle(&mut rng);
        let (mut total, mut count) = (0.0, 0usize);
        for &ui in &order {
            let u = &units[ui];
            let task = train.tasks[u.task].task_id();
            let (loss, grads) = {
                let mut tape = Tape::new();
                let vars = GuidanceVars::register(&mut tape, &g);
                let hist = u.history.iter().map(|a| source(emb, task, *a)).collect::<Result<Vec<_>>>()?;
                let h = history_on_tape(&mut tape, &vars, hidden, &hist, g.use_history)?;
                let cands = candidates[u.task].iter().map(|a| source(emb, task, *a)).collect::<Result<Vec<_>>>()?;
                let vframes = &frames[video_base[u.task] + u.video];
                let vlabels = &labels[u.task][u.video];
                let fr: Vec<(Var, usize)> = (u.lo..=u.hi)
                    .map(|t| (tape.input_slice(&vframes[t - 1]), vlabels[t - 1].index()))
                    .collect();
                let loss = tracking_loss(&mut tape, &vars, h, &fr, &cands, g.feature_dim)?;
                let gr = tape.backward(loss)?;
                let leaves = [
                    vars.rnn.w_in, vars.rnn.w_h, vars.rnn.b, vars.track.w1, vars.track.b1, vars.track.w2,
                    vars.track.b2, vars.special,
                ];
                (tape.scalar(loss), gr.into_dense(leaves))
            };
            total += loss * (u.hi - u.lo + 1) as f64;
            count += u.hi - u.lo + 1;
            let GuidanceBundle { rnn, track, special, .. } = &mut g;
            adam.step(
                &mut [
                    &mut rnn.w_in, &mut rnn.w_h, &mut rnn.b, &mut track.w1, &mut track.b1, &mut track.w2,
                    &mut track.b2, special,
                ],
                &grads,
                cfg.lr,
            )?;
        }
        let mean = total / count as f64;
        info!("tracker epoch {}/{}: mean loss {mean:.6}", epoch + 1, cfg.tracker_epochs);
        log.epoch_loss.push(mean);
    }
    Ok((g, log))
}

/// Trains the recommender (and the EOS embedding, and the history cell when
/// `joint_rnn` is set) on every consecutive action pair of the training
/// sequences plus each final action to EOS, one Adam step per pair. Pairs
/// with a single candidate carry no signal and are skipped.
pub fn train_recommender(
    mut g: GuidanceBundle,
    emb: &EmbeddingBundle,
    graphs: &BTreeMap<String, Adtg>,
    train: &Corpus,
    cfg: &GuidanceConfig,
    shuffle_seed: u64,
) -> Result<(GuidanceBundle, StageLog)> {
    check_bound(emb, &g, train)?;
    struct Pair {
        task: usize,
        seq: usize,
        pos: usize,
        cands: Vec<ActionId>,
        target: usize,
    }
    let mut seqs: Vec<Vec<ActionId>> = Vec::new();
    let mut pairs = Vec::new();
    let mut n_pairs = 0;
    for (ti, task) in train.tasks.iter().enumerate() {
        let graph = graphs
            .get(task.task_id())
            .ok_or_else(|| Error::Config(format!("no graph for task {}", task.task_id())))?;
        for v in &task.videos {
            let seq = compressed_sequence(&framewise_labels(v, &task.vocab)?);
            for pos in 0..seq.len() {
                let next = seq.get(pos + 1).copied().unwrap_or(graph.eos());
                let cands = graph.successors(seq[pos])?;
                n_pairs += 1;
                let Some(target) = cands.iter().position(|c| *c == next) else {
                    return Err(Error::Training(format!(
                        "training transition {} -> {} is missing from the graph of task {}",
                        seq[pos],
                        next,
                        task.task_id()
                    )));
                };
                if cands.len() > 1 {
                    pairs.push(Pair { task: ti, seq: seqs.len(), pos, cands, target });
                }
            }
            seqs.push(seq);
        }
    }
    if n_pairs == 0 {
        return Err(Error::Training("no action pairs for the recommender".into()));
    }
    let mut log = StageLog::default();
    if cfg.recommender_epochs == 0 || pairs.is_empty() {
        return Ok((g, log));
    }
    let joint = cfg.joint_rnn && g.use_history;
    let names = ["rnn.w_in", "rnn.w_h", "rnn.b", "rec.w1", "rec.b1", "rec.w2", "rec.b2", "special"];
    let mut adam = {
        let ts = [&g.rnn.w_in, &g.rnn.w_h, &g.rnn.b, &g.rec.w1, &g.rec.b1, &g.rec.w2, &g.rec.b2, &g.special];
        AdamState::new(names.iter().map(|n| n.to_string()).zip(ts))
    };
    let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let hidden = g.hidden_dim();
    for epoch in 0..cfg.recommender_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &pi in &order {
            let p = &pairs[pi];
            let task = train.tasks[p.task].task_id();
            let seq = &seqs[p.seq];
            let (loss, mut grads) = {
                let mut tape = Tape::new();
                let vars = GuidanceVars::register(&mut tape, &g);
                let hist = seq[..=p.pos].iter().map(|a| source(emb, task, *a)).collect::<Result<Vec<_>>>()?;
                let h = history_on_tape(&mut tape, &vars, hidden, &hist, g.use_history)?;
                let cands = p.cands.iter().map(|a| source(emb, task, *a)).collect::<Result<Vec<_>>>()?;
                let last = source(emb, task, seq[p.pos])?;
                let loss = recommendation_loss(&mut tape, &vars, h, last, &cands, p.target)?;
                let gr = tape.backward(loss)?;
                let leaves = [
                    vars.rnn.w_in, vars.rnn.w_h, vars.rnn.b, vars.rec.w1, vars.rec.b1, vars.rec.w2, vars.rec.b2,
                    vars.special,
                ];
                (tape.scalar(loss), gr.into_dense(leaves))
            };
            if !joint {
                for gv in grads.iter_mut().take(3) {
                    gv.iter_mut().for_each(|x| *x = 0.0);
                }
            }
            total += loss;
            let GuidanceBundle { rnn, rec, special, .. } = &mut g;
            adam.step(
                &mut [
                    &mut rnn.w_in, &mut rnn.w_h, &mut rnn.b, &mut rec.w1, &mut rec.b1, &mut rec.w2, &mut rec.b2,
                    special,
                ],
                &grads,
                cfg.lr,
            )?;
        }
        let mean = total / pairs.len() as f64;
        info!("recommender epoch {}/{}: mean loss {mean:.6}", epoch + 1, cfg.recommender_epochs);
        log.epoch_loss.push(mean);
    }
    Ok((g, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{EmbeddingConfig, TableKind};
    use crate::graph::build_graph;

    fn fixture() -> (ActionVocabulary, EmbeddingBundle, BTreeMap<String, Adtg>) {
        let vocab = ActionVocabulary::new("t", vec!["a".into(), "b".into(), "c".into()]).unwrap();
        let ecfg = EmbeddingConfig { cond_dim: 4, embed_dim: 5, hidden: 4, ..Default::default() };
        let emb = EmbeddingBundle::init(&[&vocab], 3, &ecfg, TableKind::Random, 1).unwrap();
        let (a, b, c) = (ActionId(1), ActionId(2), ActionId(3));
        let g = build_graph(&vocab, &[vec![a, b, c], vec![b, a, c]]).unwrap().graph;
        (vocab, emb, BTreeMap::from([("t".to_string(), g)]))
    }

    fn small() -> GuidanceConfig {
        GuidanceConfig { rnn_hidden: 6, scorer_hidden: 7, ..Default::default() }
    }

    #[test]
    fn single_candidate_and_ties() {
        let (_, emb, graphs) = fixture();
        let gb = GuidanceBundle::init(&emb, &graphs, &small(), 2).unwrap();
        let gd = Guidance::new(&emb, &gb).unwrap();
        let s = gd.initial_state();
        let (a, lp) = gd.track_step("t", &s, &[0.1, 0.2, 0.3], &[ActionId(2)]).unwrap();
        assert_eq!((a, lp), (ActionId(2), vec![0.0]));
        let (a, lp) = gd.track_step("t", &s, &[0.1, 0.2, 0.3], &[ActionId(3), ActionId(3)]).unwrap();
        assert_eq!(a, ActionId(3));
        assert_eq!(lp[0], lp[1]);
        assert!(gd.track_step("t", &s, &[0.1], &[ActionId(1)]).is_err());
        assert!(gd.track_step("t", &s, &[0.1, 0.2, 0.3], &[]).is_err());
    }

    #[test]
    fn history_rules() {
        let (_, emb, graphs) = fixture();
        let mut gb = GuidanceBundle::init(&emb, &graphs, &small(), 2).unwrap();
        let gd = Guidance::new(&emb, &gb).unwrap();
        let s = gd.initial_state();
        assert!(gd.advance_history("t", &s, ActionId::NULL).is_err());
        let ab = gd.state_after("t", &[ActionId(1), ActionId(2)]).unwrap();
        let ba = gd.state_after("t", &[ActionId(2), ActionId(1)]).unwrap();
        assert_ne!(ab.h, ba.h);
        assert_eq!(ab, gd.state_after("t", &[ActionId(1), ActionId(2)]).unwrap());
        assert_eq!(ab.last_action, ActionId(2));
        gb.rnn = RnnParams::zeros(5, 6);
        let gd = Guidance::new(&emb, &gb).unwrap();
        assert_eq!(gd.state_after("t", &[ActionId(1)]).unwrap().h, vec![0.0; 6]);
    }

    #[test]
    fn recommend_candidates_and_dead_end() {
        let (_, emb, graphs) = fixture();
        let gb = GuidanceBundle::init(&emb, &graphs, &small(), 2).unwrap();
        let gd = Guidance::new(&emb, &gb).unwrap();
        let g = &graphs["t"];
        let s = gd.state_after("t", &[ActionId(1), ActionId(2), ActionId(3)]).unwrap();
        let (next, cands, lp) = gd.recommend(g, &s).unwrap();
        assert_eq!((next, cands, lp), (g.eos(), vec![g.eos()], vec![0.0]));
        let s = gd.state_after("t", &[ActionId(1)]).unwrap();
        let (_, cands, lp) = gd.recommend(g, &s).unwrap();
        assert_eq!(cands, vec![ActionId(2), ActionId(3)]);
        assert!((lp.iter().map(|x| x.exp()).sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn binding_is_checked() {
        let (vocab, emb, graphs) = fixture();
        let gb = GuidanceBundle::init(&emb, &graphs, &small(), 2).unwrap();
        let ecfg = EmbeddingConfig { cond_dim: 4, embed_dim: 5, hidden: 4, ..Default::default() };
        let other = EmbeddingBundle::init(&[&vocab], 3, &ecfg, TableKind::Random, 9).unwrap();
        assert!(Guidance::new(&other, &gb).is_err());
    }

    #[test]
    fn plan_small_cases() {
        let (_, emb, graphs) = fixture();
        let gb = GuidanceBundle::init(&emb, &graphs, &small(), 4).unwrap();
        let gd = Guidance::new(&emb, &gb).unwrap();
        let g = &graphs["t"];
        let x = [0.3, -0.2, 0.9];
        let one = gd.plan(g, &x, &[], 5, 1).unwrap();
        assert_eq!(one.actions.len(), 1);
        assert!(gd.plan(g, &x, &[], 0, 3).is_err());
        assert!(gd.plan(g, &x, &[], 2, 0).is_err());
        let p = gd.plan(g, &x, &[], 1, 20).unwrap();
        assert_eq!(p.actions, gd.greedy_plan(g, &x, &[], 20).unwrap());
        assert!(p.finished || p.actions.len() == 20);
        assert!(p.actions.windows(2).all(|w| g.has_edge(w[0], w[1])));
        assert!(!p.finished || g.is_replayable(&p.actions));
        assert_eq!(p.trace.len(), p.actions.len() + usize::from(p.finished));
        assert_eq!(p.trace_jsonl().lines().count(), p.trace.len());
    }

    #[test]
    fn save_load_round_trip() {
        let (_, emb, graphs) = fixture();
        let gb = GuidanceBundle::init(&emb, &graphs, &small(), 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.json");
        gb.save(&p).unwrap();
        assert_eq!(GuidanceBundle::load(&p).unwrap(), gb);
    }

    fn as_num(e: Error) -> crate::numkit::NumError {
        match e {
            Error::Num(n) => n,
            other => crate::numkit::NumError::Usage(other.to_string()),
        }
    }

    fn vars_from(v: &[Var]) -> GuidanceVars {
        let net = |i: usize| Mlp2Vars { w1: v[i], b1: v[i + 1], w2: v[i + 2], b2: v[i + 3], activation: Activation::Tanh };
        GuidanceVars { rnn: RnnVars { w_in: v[0], w_h: v[1], b: v[2] }, track: net(3), rec: net(7), special: v[11] }
    }

    fn fd_params(seed: u64) -> (Vec<Tensor>, Vec<Vec<f64>>) {
        let (d, h, e, k) = (4, 5, 3, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rnn = RnnParams::init(e, h, &mut rng);
        let tr = Mlp2Params::init(d + h + e, k, 1, Activation::Tanh, &mut rng);
        let rc = Mlp2Params::init(2 * e + h, k, 1, Activation::Tanh, &mut rng);
        let special = Tensor::uniform_init(&[2, e], 1, &mut rng);
        let params = vec![
            rnn.w_in, rnn.w_h, rnn.b, tr.w1, tr.b1, tr.w2, tr.b2, rc.w1, rc.b1, rc.w2, rc.b2, special,
        ];
        let fixed = Tensor::uniform_init(&[6, e.max(d)], 1, &mut rng);
        (params, (0..6).map(|r| fixed.row(r).to_vec()).collect())
    }

    #[test]
    fn tracking_gradient_matches_finite_differences() {
        let (params, fixed) = fd_params(11);
        // Tape inputs borrow for every tape lifetime, so the fixtures must be 'static.
        let fixed: &'static [Vec<f64>] = Box::leak(fixed.into_boxed_slice());
        let emb: &'static [Vec<f64>] = Box::leak(fixed.iter().map(|r| r[..3].to_vec()).collect());
        let err = crate::numkit::finite_diff_check(
            |t, v| {
                let vars = vars_from(v);
                let hist: Vec<EmbedSource> = (0..5).map(|i| EmbedSource::Fixed(&emb[i])).collect();
                let h = history_on_tape(t, &vars, 5, &hist, true).map_err(as_num)?;
                let cands = [EmbedSource::Special(0), EmbedSource::Fixed(&emb[1]), EmbedSource::Fixed(&emb[4])];
                let frames = [(t.input_slice(&fixed[2]), 1), (t.input_slice(&fixed[5]), 0)];
                tracking_loss(t, &vars, h, &frames, &cands, 4).map_err(as_num)
            },
            &params,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn recommendation_gradient_matches_finite_differences() {
        let (params, fixed) = fd_params(12);
        // Tape inputs borrow for every tape lifetime, so the fixtures must be 'static.
        let fixed: &'static [Vec<f64>] = Box::leak(fixed.into_boxed_slice());
        let emb: &'static [Vec<f64>] = Box::leak(fixed.iter().map(|r| r[..3].to_vec()).collect());
        let err = crate::numkit::finite_diff_check(
            |t, v| {
                let vars = vars_from(v);
                let hist: Vec<EmbedSource> = (0..5).map(|i| EmbedSource::Fixed(&emb[i])).collect();
                let h = history_on_tape(t, &vars, 5, &hist, true).map_err(as_num)?;
                let cands = [EmbedSource::Fixed(&emb[5]), EmbedSource::Special(1), EmbedSource::Fixed(&emb[0])];
                recommendation_loss(t, &vars, h, EmbedSource::Fixed(&emb[4]), &cands, 1).map_err(as_num)
            },
            &params,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }

}
