//! Training all stages for one root seed.

use std::collections::BTreeMap;

use crate::config::{derive_seed, stream, RunConfig, Variant};
use crate::corpus::{compressed_sequence, framewise_labels, ActionId, ActionVocabulary, Corpus, VideoRecord};
use crate::embedding::{train_embeddings, EmbeddingBundle, TableKind};
use crate::graph::{build_graph, Adtg};
use crate::guidance::{train_recommender, train_tracker, Guidance, GuidanceBundle};
use crate::{Error, Result};

use super::{Guide, PlanQuery};

/// One graph per task from the compressed sequences of `train`.
pub fn build_graphs(train: &Corpus) -> Result<(BTreeMap<String, Adtg>, usize)> {
    let mut graphs = BTreeMap::new();
    let mut skipped = 0;
    for task in &train.tasks {
        let seqs = task
            .videos
            .iter()
            .map(|v| Ok(compressed_sequence(&framewise_labels(v, &task.vocab)?)))
            .collect::<Result<Vec<_>>>()?;
        let out = build_graph(&task.vocab, &seqs)?;
        skipped += out.skipped_empty;
        graphs.insert(task.task_id().to_string(), out.graph);
    }
    Ok((graphs, skipped))
}

fn feature_dim(train: &Corpus, cfg: &RunConfig) -> Result<usize> {
    let d = train
        .feature_dim()
        .ok_or_else(|| Error::Config("training split has no videos".into()))?;
    match cfg.feature_dim {
        Some(want) if want != d => Err(Error::Config(format!(
            "config expects {want}-dimensional features but the corpus has {d}"
        ))),
        _ => Ok(d),
    }
}

fn table_kind(v: Variant) -> TableKind {
    match v {
        Variant::Full | Variant::NoHistory => TableKind::Trained,
        Variant::RandomEmbed => TableKind::Random,
        Variant::OnehotEmbed => TableKind::OneHot,
    }
}

pub fn train_embedding_stage(train: &Corpus, cfg: &RunConfig, seed: u64) -> Result<(EmbeddingBundle, Vec<f64>)> {
    let d = feature_dim(train, cfg)?;
    let vocabs: Vec<&ActionVocabulary> = train.tasks.iter().map(|t| &t.vocab).collect();
    let init = EmbeddingBundle::init(
        &vocabs,
        d,
        &cfg.embedding,
        table_kind(cfg.variant),
        derive_seed(seed, stream::EMBED_INIT),
    )?;
    let (emb, log) = train_embeddings(init, train, &cfg.embedding, derive_seed(seed, stream::EMBED_SHUFFLE))?;
    Ok((emb, log.epoch_loss))
}

pub fn train_tracker_stage(
    emb: &EmbeddingBundle,
    graphs: &BTreeMap<String, Adtg>,
    train: &Corpus,
    cfg: &RunConfig,
    seed: u64,
) -> Result<(GuidanceBundle, Vec<f64>)> {
    let g = cfg.guidance_for_variant();
    let init = GuidanceBundle::init(emb, graphs, &g, derive_seed(seed, stream::GUIDANCE_INIT))?;
    let (bundle, log) = train_tracker(init, emb, train, &g, derive_seed(seed, stream::TRACKER_SHUFFLE))?;
    Ok((bundle, log.epoch_loss))
}

pub fn train_recommender_stage(
    bundle: GuidanceBundle,
    emb: &EmbeddingBundle,
    graphs: &BTreeMap<String, Adtg>,
    train: &Corpus,
    cfg: &RunConfig,
    seed: u64,
) -> Result<(GuidanceBundle, Vec<f64>)> {
    let g = cfg.guidance_for_variant();
    let (bundle, log) =
        train_recommender(bundle, emb, graphs, train, &g, derive_seed(seed, stream::RECOMMENDER_SHUFFLE))?;
    Ok((bundle, log.epoch_loss))
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLogs {
    pub embedding: Vec<f64>,
    pub tracker: Vec<f64>,
    pub recommender: Vec<f64>,
}

/// Embeddings, graphs and guidance trained for one root seed.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub seed: u64,
    pub emb: EmbeddingBundle,
    pub guidance: GuidanceBundle,
    pub graphs: BTreeMap<String, Adtg>,
    pub beam_width: usize,
    pub max_len: usize,
    pub logs: TrainLogs,
}

impl TrainedModel {
    /// Binds already trained parts; fails when they were not trained together.
    pub fn assemble(
        seed: u64,
        emb: EmbeddingBundle,
        guidance: GuidanceBundle,
        graphs: BTreeMap<String, Adtg>,
        cfg: &RunConfig,
    ) -> Result<Self> {
        {
            let g = Guidance::new(&emb, &guidance)?;
            for graph in graphs.values() {
                g.check_graph(graph)?;
            }
        }
        Ok(Self {
            seed,
            emb,
            guidance,
            graphs,
            beam_width: cfg.guidance.beam_width,
            max_len: cfg.guidance.max_len,
            logs: TrainLogs::default(),
        })
    }

    pub fn view(&self) -> Guidance<'_> {
        Guidance { emb: &self.emb, bundle: &self.guidance }
    }
}

/// Runs every stage on `train` with `cfg.variant` applied.
pub fn train_model(train: &Corpus, cfg: &RunConfig, seed: u64) -> Result<TrainedModel> {
    let (emb, emb_log) = train_embedding_stage(train, cfg, seed)?;
    let (graphs, _) = build_graphs(train)?;
    let (g, track_log) = train_tracker_stage(&emb, &graphs, train, cfg, seed)?;
    let (g, rec_log) = train_recommender_stage(g, &emb, &graphs, train, cfg, seed)?;
    let mut m = TrainedModel::assemble(seed, emb, g, graphs, cfg)?;
    m.logs = TrainLogs { embedding: emb_log, tracker: track_log, recommender: rec_log };
    Ok(m)
}

impl Guide for TrainedModel {
    fn graph(&self, task_id: &str) -> Option<&Adtg> {
        self.graphs.get(task_id)
    }

    fn track(&self, vocab: &ActionVocabulary, video: &VideoRecord) -> Result<Vec<ActionId>> {
        self.view().track_video(vocab, video)
    }

    fn recommend(&self, graph: &Adtg, history: &[ActionId]) -> Result<(Vec<ActionId>, Vec<f64>)> {
        let g = self.view();
        let state = g.state_after(graph.task_id(), history)?;
        let (_, cands, lp) = g.recommend(graph, &state)?;
        Ok((cands, lp))
    }

    fn plan(&self, graph: &Adtg, q: &PlanQuery<'_>) -> Result<Vec<ActionId>> {
        let x = q.video.features.frame_f64(q.frame);
        Ok(self.view().plan(graph, &x, q.prefix, self.beam_width, self.max_len)?.actions)
    }
}
