use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use std::collections::BTreeMap;

use super::{Corpus, CorpusError, TaskCorpus};

pub const TRAIN_VIDEOS: usize = 50;
pub const VAL_VIDEOS: usize = 20;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl Split {
    pub fn contains_train(&self, id: &str) -> bool {
        self.train.iter().any(|v| v == id)
    }
}

/// Seeded shuffle, then 50 train / 20 val / rest test. Tasks too small for
/// that (70 videos or fewer) fall back to 60/20/20 with at least one video in
/// every part.
pub fn split_dataset(video_ids: &[String], seed: u64) -> Result<Split, CorpusError> {
    let n = video_ids.len();
    if n < 3 {
        return Err(CorpusError::data(
            "split",
            format!("need at least 3 videos to split, got {n}"),
        ));
    }
    let mut ids = video_ids.to_vec();
    ids.sort();
    ids.dedup();
    if ids.len() != n {
        return Err(CorpusError::data("split", "duplicate video ids"));
    }
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let (n_train, n_val) = if n > TRAIN_VIDEOS + VAL_VIDEOS {
        (TRAIN_VIDEOS, VAL_VIDEOS)
    } else {
        let fifth = ((n as f64) * 0.2).round() as usize;
        let n_val = fifth.max(1);
        let n_test = fifth.max(1);
        (n - n_val - n_test, n_val)
    };
    let test = ids.split_off(n_train + n_val);
    let val = ids.split_off(n_train);
    Ok(Split {
        train: ids,
        val,
        test,
    })
}

/// A corpus cut into train, validation and test corpora, task by task.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSplit {
    pub splits: BTreeMap<String, Split>,
    pub train: Corpus,
    pub val: Corpus,
    pub test: Corpus,
}

/// Splits every task with the same seed; videos keep their corpus order.
pub fn split_corpus(corpus: &Corpus, seed: u64) -> Result<CorpusSplit, CorpusError> {
    let mut splits = BTreeMap::new();
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for task in &corpus.tasks {
        let split = split_dataset(&task.video_ids(), seed)
            .map_err(|e| CorpusError::data(task.task_id(), e.to_string()))?;
        let pick = |ids: &[String]| TaskCorpus {
            vocab: task.vocab.clone(),
            videos: task
                .videos
                .iter()
                .filter(|v| ids.contains(&v.video_id))
                .cloned()
                .collect(),
        };
        train.push(pick(&split.train));
        val.push(pick(&split.val));
        test.push(pick(&split.test));
        splits.insert(task.task_id().to_string(), split);
    }
    Ok(CorpusSplit {
        splits,
        train: Corpus { tasks: train },
        val: Corpus { tasks: val },
        test: Corpus { tasks: test },
    })
}
