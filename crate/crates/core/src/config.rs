//! Run configuration and seed derivation.
//!
//! Every random stream in a run is `derive_seed(root, stream)` for a root
//! seed from [`RunConfig::seeds`] and one of the [`stream`] counters, so
//! stages can be rerun independently and still reproduce bit-for-bit.

use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::corpus::synth::SynthTaskSpec;
use crate::embedding::EmbeddingConfig;
use crate::guidance::GuidanceConfig;
use crate::{Error, Result};

/// SplitMix64 finalizer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stream counters for [`derive_seed`].
pub mod stream {
    pub const EMBED_INIT: u64 = 1;
    pub const EMBED_SHUFFLE: u64 = 2;
    pub const GUIDANCE_INIT: u64 = 3;
    pub const TRACKER_SHUFFLE: u64 = 4;
    pub const RECOMMENDER_SHUFFLE: u64 = 5;
    pub const SYNTH: u64 = 6;
}

/// `splitmix64(splitmix64(root) ^ stream)`.
pub fn derive_seed(root: u64, stream: u64) -> u64 {
    splitmix64(splitmix64(root) ^ stream)
}

/// Ablation variants; everything not named stays as in `Full`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    /// Scorers see a zero history vector; the history cell is never trained.
    NoHistory,
    /// Embedding table frozen at its seeded random initialization.
    RandomEmbed,
    /// Frozen one-hot table, embedding width = number of rows.
    OnehotEmbed,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::NoHistory, Variant::RandomEmbed, Variant::OnehotEmbed];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoHistory => "no_history",
            Variant::RandomEmbed => "random_embed",
            Variant::OnehotEmbed => "onehot_embed",
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Usage(format!("unknown variant {s:?} (expected full, no_history, random_embed or onehot_embed)")))
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub corpus: PathBuf,
    pub out: PathBuf,
    /// Root seeds; one trained model per seed.
    pub seeds: Vec<u64>,
    /// Seed of the train/val/test split, shared by every root seed.
    pub split_seed: u64,
    /// Seed of the prefix cut points, shared by every root seed and variant.
    pub cut_seed: u64,
    /// Expected feature width; `None` takes it from the corpus.
    pub feature_dim: Option<usize>,
    pub embedding: EmbeddingConfig,
    pub guidance: GuidanceConfig,
    pub variant: Variant,
    /// Task generators for `synth`.
    pub synth: Vec<SynthTaskSpec>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            corpus: PathBuf::from("corpus"),
            out: PathBuf::from("out"),
            seeds: vec![0],
            split_seed: 0,
            cut_seed: 0,
            feature_dim: None,
            embedding: EmbeddingConfig::default(),
            guidance: GuidanceConfig::default(),
            variant: Variant::Full,
            synth: Vec::new(),
        }
    }
}

fn positive(name: &str, ok: bool) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must be positive")))
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let v: Value = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("config line {}, column {}: {e}", e.line(), e.column())))?;
        Self::from_value(v)
    }

    fn from_value(v: Value) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Applies `key=value` overrides; dotted keys reach nested fields and
    /// values parse as JSON, falling back to a plain string.
    pub fn with_overrides<'s>(&self, overrides: impl IntoIterator<Item = &'s str>) -> Result<Self> {
        let mut v = serde_json::to_value(self).expect("config serializes");
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Usage(format!("override {o:?} is not key=value")))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            let mut slot = &mut v;
            for part in key.split('.') {
                let obj = slot
                    .as_object_mut()
                    .ok_or_else(|| Error::Config(format!("override key {key:?}: {part:?} is not inside an object")))?;
                if !obj.contains_key(part) {
                    return Err(Error::Config(format!("override key {key:?}: unknown field {part:?}")));
                }
                slot = obj.get_mut(part).expect("checked");
            }
            *slot = value;
        }
        Self::from_value(v)
    }

    pub fn validate(&self) -> Result<()> {
        let (e, g) = (&self.embedding, &self.guidance);
        positive("seeds", !self.seeds.is_empty())?;
        positive("feature_dim", self.feature_dim != Some(0))?;
        positive("embedding.cond_dim", e.cond_dim > 0)?;
        positive("embedding.embed_dim", e.embed_dim > 0)?;
        positive("embedding.hidden", e.hidden > 0)?;
        positive("embedding.margin", e.margin > 0.0 && e.margin.is_finite())?;
        positive("embedding.lr", e.lr > 0.0 && e.lr.is_finite())?;
        positive("guidance.rnn_hidden", g.rnn_hidden > 0)?;
        positive("guidance.scorer_hidden", g.scorer_hidden > 0)?;
        positive("guidance.lr", g.lr > 0.0 && g.lr.is_finite())?;
        positive("guidance.beam_width", g.beam_width > 0)?;
        positive("guidance.max_len", g.max_len > 0)?;
        let mut seen = std::collections::BTreeSet::new();
        for s in &self.seeds {
            if !seen.insert(s) {
                return Err(Error::Config(format!("seed {s} is listed twice")));
            }
        }
        Ok(())
    }

    /// Hash of everything that affects results (paths excluded).
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        let obj = v.as_object_mut().expect("object");
        obj.remove("corpus");
        obj.remove("out");
        crate::store::sha256_hex(&serde_json::to_vec(&v).expect("serializes"))
    }

    /// Guidance settings with the variant applied.
    pub fn guidance_for_variant(&self) -> GuidanceConfig {
        let mut g = self.guidance.clone();
        if self.variant == Variant::NoHistory {
            g.use_history = false;
        }
        g
    }
}
