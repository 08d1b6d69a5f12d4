//! Desk-scale sequence models with full glass-box access.
//!
//! [`seq2seq`] holds the LSTM encoder-decoder translator, [`lm`] the
//! source-side language models. Both expose, per output position, the
//! normalized distribution, the pre-normalization scores and the softmax input
//! vector.

pub mod lm;
pub mod seq2seq;

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::nn;

pub use lm::{corpus_perplexity, lm_score, train_lm, LanguageModel, LmConfig, LmScore};
pub use seq2seq::{mc_dropout_replays, train_seq2seq, translate, Seq2SeqConfig, Seq2SeqModel, TrainLog};

pub const UNK: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
const SPECIALS: [&str; 3] = ["<unk>", "<s>", "</s>"];

/// Token vocabulary with the three reserved ids `UNK`, `BOS`, `EOS`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocab {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocab { tokens, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

impl Vocab {
    /// Builds a vocabulary from every token seen, in sorted order after the specials.
    pub fn build<'a, I: IntoIterator<Item = &'a String>>(tokens: I) -> Self {
        let set: BTreeSet<&String> = tokens.into_iter().collect();
        let mut all: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        all.extend(set.into_iter().filter(|t| !SPECIALS.contains(&t.as_str())).cloned());
        Vocab::from(all)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, tok: &str) -> usize {
        self.index.get(tok).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn encode(&self, toks: &[String]) -> Vec<usize> {
        toks.iter().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.tokens[i].clone()).collect()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Glass-box record of one output position.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// The actual token at this position.
    pub token: usize,
    /// Normalized distribution over the output vocabulary.
    pub probs: Vec<f64>,
    /// Pre-normalization scores; `softmax(logits) == probs`.
    pub logits: Vec<f64>,
    /// Input vector of the softmax layer.
    pub hidden: Vec<f64>,
}

impl StepRecord {
    pub fn new(token: usize, logits: Vec<f64>, hidden: Vec<f64>) -> Self {
        StepRecord { token, probs: nn::softmax(&logits), logits, hidden }
    }

    pub fn log_prob(&self) -> f64 {
        self.logits[self.token] - nn::logsumexp(&self.logits)
    }
}

/// Everything the translator exposes about one translation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlassBoxTrace {
    pub source: Vec<String>,
    pub target: Vec<String>,
    /// One record per target token.
    pub steps: Vec<StepRecord>,
    /// The end-of-sentence step, absent when decoding was truncated.
    pub end: Option<StepRecord>,
    /// Top-layer encoder state per source position, in source order.
    pub encoder_states: Vec<Vec<f64>>,
    /// `sum_k log P(t_k*)` over the target tokens.
    pub log_prob: f64,
    pub truncated: bool,
}

impl GlassBoxTrace {
    pub fn token_log_probs(&self) -> Vec<f64> {
        self.steps.iter().map(StepRecord::log_prob).collect()
    }
}
