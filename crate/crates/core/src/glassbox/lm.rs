//! Source-side LSTM language models: a base model and incrementally adapted
//! copies of it.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{StepRecord, Vocab, BOS, EOS};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::nn::{self, Adam, LstmStack, Params, StackRun, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LmConfig {
    pub embed: usize,
    pub hidden: usize,
    pub layers: usize,
    pub dropout: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub clip: f64,
    pub seed: u64,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig {
            embed: 32,
            hidden: 64,
            layers: 1,
            dropout: 0.0,
            lr: 5e-3,
            epochs: 10,
            batch_size: 16,
            clip: 5.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LmParams {
    pub emb: Tensor,
    pub stack: LstmStack,
    pub out_w: Tensor,
    pub out_b: Tensor,
}

impl Params for LmParams {
    fn tensors(&self) -> Vec<&Tensor> {
        let mut v = vec![&self.emb];
        v.extend(self.stack.tensors());
        v.push(&self.out_w);
        v.push(&self.out_b);
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![&mut self.emb];
        v.extend(self.stack.tensors_mut());
        v.push(&mut self.out_w);
        v.push(&mut self.out_b);
        v
    }
}

impl LmParams {
    fn zeros_like(&self) -> Self {
        LmParams {
            emb: self.emb.zeros_like(),
            stack: self.stack.zeros_like(),
            out_w: self.out_w.zeros_like(),
            out_b: self.out_b.zeros_like(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LanguageModel {
    pub vocab: Vocab,
    pub config: LmConfig,
    pub params: LmParams,
    /// Fingerprint of the model this one was adapted from.
    pub parent: Option<String>,
}

/// Per-token glass-box records of one sentence plus its perplexity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmScore {
    pub steps: Vec<StepRecord>,
    pub perplexity: f64,
}

impl LmScore {
    pub fn log_prob_sum(&self) -> f64 {
        self.steps.iter().map(StepRecord::log_prob).sum()
    }
}

impl LanguageModel {
    pub fn init(vocab: Vocab, config: LmConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let params = LmParams {
            emb: Tensor::uniform(vocab.len(), config.embed, 0.1, &mut rng),
            stack: LstmStack::new(config.embed, config.hidden, config.layers, &mut rng),
            out_w: Tensor::glorot(vocab.len(), config.hidden, &mut rng),
            out_b: Tensor::zeros(vocab.len(), 1),
        };
        LanguageModel { vocab, config, params, parent: None }
    }

    /// FNV-1a hash of the parameters' f32 images.
    pub fn fingerprint(&self) -> String {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in self.params.flatten() {
            for b in (v as f32).to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        format!("{h:016x}")
    }

    fn forward(&self, ids: &[usize], rng: Option<&mut ChaCha8Rng>) -> (StackRun, Vec<Vec<f64>>) {
        let inputs: Vec<Vec<f64>> = std::iter::once(BOS)
            .chain(ids.iter().copied())
            .map(|id| self.params.emb.row(id).to_vec())
            .collect();
        let masks = match rng {
            Some(rng) => self.params.stack.sample_masks(inputs.len(), self.config.dropout, rng),
            None => None,
        };
        let run = self.params.stack.forward(&inputs, &self.params.stack.zero_state(), masks);
        let logits = run
            .outputs
            .iter()
            .map(|h| {
                let mut l = self.params.out_b.data.clone();
                self.params.out_w.matvec_add(h, &mut l);
                l
            })
            .collect();
        (run, logits)
    }

    fn loss_and_grad(&self, ids: &[usize], rng: Option<&mut ChaCha8Rng>, grad: &mut LmParams) -> f64 {
        let (run, logits) = self.forward(ids, rng);
        let mut loss = 0.0;
        let mut douts = Vec::with_capacity(logits.len());
        for (k, y) in ids.iter().copied().chain(std::iter::once(EOS)).enumerate() {
            loss += nn::logsumexp(&logits[k]) - logits[k][y];
            let mut d = nn::softmax(&logits[k]);
            d[y] -= 1.0;
            grad.out_w.outer_add(&d, &run.outputs[k]);
            for (b, dv) in grad.out_b.data.iter_mut().zip(&d) {
                *b += dv;
            }
            let mut dout = vec![0.0; self.config.hidden];
            self.params.out_w.matvec_t_add(&d, &mut dout);
            douts.push(dout);
        }
        let zero = self.params.stack.zero_state();
        let (dxs, _) = self.params.stack.backward(&run, &douts, &zero, &mut grad.stack);
        for (dx, id) in dxs.iter().zip(std::iter::once(BOS).chain(ids.iter().copied())) {
            for (g, d) in grad.emb.row_mut(id).iter_mut().zip(dx) {
                *g += d;
            }
        }
        loss
    }

    /// Summed loss and gradient over id-encoded sentences, dropout off.
    pub fn batch_loss_grad(&self, batch: &[Vec<usize>]) -> (f64, LmParams) {
        let mut grad = self.params.zeros_like();
        let loss = batch.iter().map(|s| self.loss_and_grad(s, None, &mut grad)).sum();
        (loss, grad)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = serde_json::json!({
            "config": self.config,
            "vocab": self.vocab,
            "parent": self.parent,
        });
        let mut ck = Checkpoint::new("lm", meta);
        let mut names = vec!["emb".to_string()];
        names.extend(self.params.stack.tensor_names("lstm"));
        names.extend(["out_w".to_string(), "out_b".to_string()]);
        for (n, t) in names.into_iter().zip(self.params.tensors()) {
            ck.push(n, t);
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind("lm")?;
        let config: LmConfig = serde_json::from_value(ck.meta["config"].clone())?;
        let vocab: Vocab = serde_json::from_value(ck.meta["vocab"].clone())?;
        let parent: Option<String> = serde_json::from_value(ck.meta["parent"].clone())?;
        let mut lm = LanguageModel::init(vocab, config);
        lm.parent = parent;
        ck.fill(lm.params.tensors_mut())?;
        Ok(lm)
    }
}

/// Trains a language model on `corpus`.
///
/// Without `init` a fresh model is built over `vocab` (or the corpus
/// vocabulary). With `init`, training continues from its parameters; `vocab`
/// and the shape fields of `config` must then agree with it.
pub fn train_lm(
    corpus: &[Vec<String>],
    vocab: Option<&Vocab>,
    config: &LmConfig,
    init: Option<&LanguageModel>,
) -> Result<LanguageModel> {
    if !(0.0..1.0).contains(&config.dropout) || config.batch_size == 0 {
        return Err(Error::invalid("invalid LM config"));
    }
    let mut lm = match init {
        Some(base) => {
            if let Some(v) = vocab {
                if v != &base.vocab {
                    return Err(Error::VocabMismatch(format!(
                        "adaptation vocabulary has {} tokens, base has {}",
                        v.len(),
                        base.vocab.len()
                    )));
                }
            }
            if (config.embed, config.hidden, config.layers) != (base.config.embed, base.config.hidden, base.config.layers) {
                return Err(Error::shape("adaptation config shape differs from the base LM"));
            }
            let mut lm = base.clone();
            lm.parent = Some(base.fingerprint());
            lm.config = LmConfig { embed: base.config.embed, hidden: base.config.hidden, layers: base.config.layers, ..config.clone() };
            lm
        }
        None => {
            let v = match vocab {
                Some(v) => v.clone(),
                None => Vocab::build(corpus.iter().flatten()),
            };
            LanguageModel::init(v, config.clone())
        }
    };
    let data: Vec<Vec<usize>> = corpus.iter().filter(|s| !s.is_empty()).map(|s| lm.vocab.encode(s)).collect();
    if data.is_empty() && config.epochs > 0 {
        return Err(Error::invalid("empty LM training corpus"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(7));
    let mut adam = Adam::new(config.lr);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step = 0;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut count = 0;
        for chunk in order.chunks(config.batch_size) {
            let mut grad = lm.params.zeros_like();
            let mut loss = 0.0;
            let mut tokens = 0;
            for &i in chunk {
                loss += lm.loss_and_grad(&data[i], Some(&mut rng), &mut grad);
                tokens += data[i].len() + 1;
            }
            if !loss.is_finite() || !grad.all_finite() {
                return Err(Error::Diverged { step, detail: format!("LM epoch {epoch}: loss {loss}") });
            }
            grad.scale(1.0 / tokens as f64);
            nn::clip_grad_norm(&mut grad, config.clip);
            adam.step(&mut lm.params, &grad);
            total += loss;
            count += tokens;
            step += 1;
        }
        log::debug!("lm epoch {epoch}: loss {:.4}", total / count as f64);
    }
    Ok(lm)
}

/// Per-token distributions and perplexity `exp(-(1/T) sum_k log P(s_k*))`
/// over the sentence's tokens (the end token is not scored).
pub fn lm_score(lm: &LanguageModel, sentence: &[String]) -> Result<LmScore> {
    if sentence.is_empty() {
        return Err(Error::invalid("cannot score an empty sentence"));
    }
    let ids = lm.vocab.encode(sentence);
    let (run, logits) = lm.forward(&ids, None);
    let steps: Vec<StepRecord> = ids
        .iter()
        .enumerate()
        .map(|(k, &id)| StepRecord::new(id, logits[k].clone(), run.outputs[k].clone()))
        .collect();
    let lp: f64 = steps.iter().map(StepRecord::log_prob).sum();
    let perplexity = (-lp / steps.len() as f64).exp();
    Ok(LmScore { steps, perplexity })
}

/// Token-weighted corpus perplexity.
pub fn corpus_perplexity(lm: &LanguageModel, sentences: &[Vec<String>]) -> Result<f64> {
    let mut lp = 0.0;
    let mut tokens = 0usize;
    for s in sentences {
        let score = lm_score(lm, s)?;
        lp += score.log_prob_sum();
        tokens += s.len();
    }
    if tokens == 0 {
        return Err(Error::invalid("empty corpus"));
    }
    Ok((-lp / tokens as f64).exp())
}
