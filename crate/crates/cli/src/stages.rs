//! Staged training. Each stage writes a bundle, a per-epoch loss CSV and a
//! stage manifest. A manifest is current when its training key, its input
//! hashes and the hash of the bundle on disk all match; only current stages
//! are skipped or used as prerequisites.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use adtg::config::RunConfig;
use adtg::corpus::{load_corpus, split_corpus, CorpusSplit};
use adtg::embedding::EmbeddingBundle;
use adtg::eval::{build_graphs, train_embedding_stage, train_recommender_stage, train_tracker_stage, TrainedModel};
use adtg::guidance::GuidanceBundle;
use adtg::store::sha256_hex;

use crate::StageArg;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Embeddings,
    Tracker,
    Recommender,
}

impl Stage {
    pub const ORDER: [Stage; 3] = [Stage::Embeddings, Stage::Tracker, Stage::Recommender];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Embeddings => "embeddings",
            Stage::Tracker => "tracker",
            Stage::Recommender => "recommender",
        }
    }

    fn bundle_file(self) -> &'static str {
        match self {
            Stage::Embeddings => "embedding.json",
            Stage::Tracker => "tracker.json",
            Stage::Recommender => "guidance.json",
        }
    }

    fn prerequisite(self) -> Option<Stage> {
        match self {
            Stage::Embeddings => None,
            Stage::Tracker => Some(Stage::Embeddings),
            Stage::Recommender => Some(Stage::Tracker),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageManifest {
    pub stage: String,
    pub seed: u64,
    pub variant: String,
    /// Hash of the training-relevant config, the seed and the corpus.
    pub key: String,
    /// Output hashes of the prerequisite stages.
    pub inputs: BTreeMap<String, String>,
    pub bundle: String,
    pub output_hash: String,
    pub loss_csv: String,
    pub epochs: usize,
}

/// `<out>/<variant>/seed-<seed>`.
pub fn run_dir(cfg: &RunConfig, seed: u64) -> PathBuf {
    cfg.out.join(cfg.variant.name()).join(format!("seed-{seed}"))
}

/// SHA-256 over the relative paths and contents of every file under `root`.
pub fn corpus_fingerprint(root: &Path) -> Result<String> {
    fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
        for e in fs::read_dir(dir)? {
            let p = e?.path();
            if p.is_dir() {
                walk(&p, out)?;
            } else {
                out.push(p);
            }
        }
        Ok(())
    }
    let mut files = Vec::new();
    walk(root, &mut files).with_context(|| format!("listing corpus {}", root.display()))?;
    files.sort();
    let mut buf = Vec::new();
    for f in files {
        let rel = f.strip_prefix(root).expect("under root").to_string_lossy().into_owned();
        buf.extend_from_slice(rel.as_bytes());
        buf.push(0);
        buf.extend_from_slice(sha256_hex(&fs::read(&f).with_context(|| format!("reading {}", f.display()))?).as_bytes());
    }
    Ok(sha256_hex(&buf))
}

/// Hash of everything that changes trained parameters for `seed`; fields
/// read only at evaluation time are left out.
pub fn training_key(cfg: &RunConfig, seed: u64, corpus_hash: &str) -> String {
    let mut v = serde_json::to_value(cfg).expect("config serializes");
    let obj = v.as_object_mut().expect("object");
    for k in ["corpus", "out", "seeds", "cut_seed", "synth"] {
        obj.remove(k);
    }
    let g = obj.get_mut("guidance").and_then(|g| g.as_object_mut()).expect("guidance object");
    for k in ["beam_width", "max_len", "plan_offset"] {
        g.remove(k);
    }
    obj.insert("seed".into(), seed.into());
    obj.insert("corpus_hash".into(), corpus_hash.into());
    sha256_hex(&serde_json::to_vec(&v).expect("serializes"))
}

fn manifest_path(dir: &Path, stage: Stage) -> PathBuf {
    dir.join(format!("{}.stage.json", stage.name()))
}

fn read_manifest(dir: &Path, stage: Stage) -> Option<StageManifest> {
    let text = fs::read_to_string(manifest_path(dir, stage)).ok()?;
    serde_json::from_str(&text).ok()
}

fn bundle_hash(dir: &Path, stage: Stage) -> Option<String> {
    let p = dir.join(stage.bundle_file());
    match stage {
        Stage::Embeddings => EmbeddingBundle::load(&p).ok().map(|b| b.content_hash()),
        Stage::Tracker | Stage::Recommender => GuidanceBundle::load(&p).ok().map(|b| b.content_hash()),
    }
}

/// Everything a run needs to decide whether a stage is current.
pub struct Run<'a> {
    pub cfg: &'a RunConfig,
    pub data: CorpusSplit,
    corpus_hash: String,
}

impl<'a> Run<'a> {
    pub fn open(cfg: &'a RunConfig) -> Result<Self> {
        let corpus = load_corpus(&cfg.corpus)?;
        let data = split_corpus(&corpus, cfg.split_seed)?;
        let corpus_hash = corpus_fingerprint(&cfg.corpus)?;
        Ok(Self { cfg, data, corpus_hash })
    }

    fn key(&self, seed: u64) -> String {
        training_key(self.cfg, seed, &self.corpus_hash)
    }

    fn inputs(&self, seed: u64, stage: Stage) -> Result<BTreeMap<String, String>> {
        let mut m = BTreeMap::new();
        if let Some(pre) = stage.prerequisite() {
            let man = self.current(seed, pre).ok_or_else(|| {
                adtg::Error::Config(format!(
                    "stage {} for seed {seed} needs an up-to-date {} stage in {}; run `train --stage {}` first",
                    stage.name(),
                    pre.name(),
                    run_dir(self.cfg, seed).display(),
                    pre.name()
                ))
            })?;
            m.insert(pre.name().to_string(), man.output_hash);
        }
        Ok(m)
    }

    /// The stage manifest if the stage is current.
    pub fn current(&self, seed: u64, stage: Stage) -> Option<StageManifest> {
        let dir = run_dir(self.cfg, seed);
        let man = read_manifest(&dir, stage)?;
        let inputs = self.inputs(seed, stage).ok()?;
        let ok = man.key == self.key(seed)
            && man.inputs == inputs
            && bundle_hash(&dir, stage).as_deref() == Some(man.output_hash.as_str());
        ok.then_some(man)
    }

    fn run_stage(&self, seed: u64, stage: Stage, force: bool) -> Result<()> {
        let dir = run_dir(self.cfg, seed);
        let inputs = self.inputs(seed, stage)?;
        if !force && self.current(seed, stage).is_some() {
            log::info!("seed {seed}: {} is up to date", stage.name());
            return Ok(());
        }
        log::info!("seed {seed}: training {}", stage.name());
        let train = &self.data.train;
        let bundle_path = dir.join(stage.bundle_file());
        let (hash, losses) = match stage {
            Stage::Embeddings => {
                let (b, l) = train_embedding_stage(train, self.cfg, seed)?;
                b.save(&bundle_path)?;
                (b.content_hash(), l)
            }
            Stage::Tracker => {
                let emb = EmbeddingBundle::load(&dir.join(Stage::Embeddings.bundle_file()))?;
                let (graphs, _) = build_graphs(train)?;
                let (b, l) = train_tracker_stage(&emb, &graphs, train, self.cfg, seed)?;
                b.save(&bundle_path)?;
                (b.content_hash(), l)
            }
            Stage::Recommender => {
                let emb = EmbeddingBundle::load(&dir.join(Stage::Embeddings.bundle_file()))?;
                let tracked = GuidanceBundle::load(&dir.join(Stage::Tracker.bundle_file()))?;
                let (graphs, _) = build_graphs(train)?;
                let (b, l) = train_recommender_stage(tracked, &emb, &graphs, train, self.cfg, seed)?;
                b.save(&bundle_path)?;
                (b.content_hash(), l)
            }
        };
        let loss_csv = format!("{}_loss.csv", stage.name());
        let mut csv = String::from("epoch,loss\n");
        for (i, l) in losses.iter().enumerate() {
            csv.push_str(&format!("{},{l}\n", i + 1));
        }
        fs::write(dir.join(&loss_csv), csv)?;
        let man = StageManifest {
            stage: stage.name().into(),
            seed,
            variant: self.cfg.variant.to_string(),
            key: self.key(seed),
            inputs,
            bundle: stage.bundle_file().into(),
            output_hash: hash,
            loss_csv,
            epochs: losses.len(),
        };
        fs::write(
            manifest_path(&dir, stage),
            serde_json::to_string_pretty(&man).expect("manifest serializes"),
        )?;
        if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
            log::info!("seed {seed}: {} loss {first:.5} -> {last:.5}", stage.name());
        }
        Ok(())
    }

    /// Loads the fully trained model of `seed`; every stage must be current.
    pub fn model(&self, seed: u64) -> Result<TrainedModel> {
        for stage in Stage::ORDER {
            if self.current(seed, stage).is_none() {
                return Err(adtg::Error::Config(format!(
                    "seed {seed} has no up-to-date {} stage in {}; run `train` first",
                    stage.name(),
                    run_dir(self.cfg, seed).display()
                ))
                .into());
            }
        }
        let dir = run_dir(self.cfg, seed);
        let emb = EmbeddingBundle::load(&dir.join(Stage::Embeddings.bundle_file()))?;
        let guidance = GuidanceBundle::load(&dir.join(Stage::Recommender.bundle_file()))?;
        let (graphs, _) = build_graphs(&self.data.train)?;
        Ok(TrainedModel::assemble(seed, emb, guidance, graphs, self.cfg)?)
    }
}

pub fn train(cfg: &RunConfig, stage: StageArg, force: bool) -> Result<()> {
    let run = Run::open(cfg)?;
    let stages: &[Stage] = match stage {
        StageArg::Embeddings => &[Stage::Embeddings],
        StageArg::Tracker => &[Stage::Tracker],
        StageArg::Recommender => &[Stage::Recommender],
        StageArg::All => &Stage::ORDER,
    };
    for &seed in &cfg.seeds {
        fs::create_dir_all(run_dir(cfg, seed))?;
        for s in stages {
            run.run_stage(seed, *s, force)?;
        }
    }
    Ok(())
}
