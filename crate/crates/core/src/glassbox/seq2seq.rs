//! LSTM encoder-decoder translator trained by manual backpropagation.
//!
//! The encoder reads the source reversed. Its final per-layer states
//! initialize the decoder. Every decoder input is the previous target
//! embedding concatenated with the context vector (encoder top output at the
//! last step) and the encoder top output at the same source position as the
//! decoder step (zeros past the end of the source). The alignment is fixed,
//! not learned. Dropout acts on every recurrent layer's output, never on the
//! recurrent connections.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{GlassBoxTrace, StepRecord, Vocab, BOS, EOS};
use crate::checkpoint::Checkpoint;
use crate::datakit::SentencePair;
use crate::error::{Error, Result};
use crate::nn::{self, Adam, LstmStack, LstmState, Params, StackRun, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Seq2SeqConfig {
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

impl Default for Seq2SeqConfig {
    fn default() -> Self {
        Seq2SeqConfig {
            embed: 32,
            hidden: 64,
            layers: 1,
            dropout: 0.1,
            lr: 5e-3,
            epochs: 30,
            batch_size: 16,
            clip: 5.0,
            seed: 0,
        }
    }
}

impl Seq2SeqConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed == 0 || self.hidden == 0 || self.layers == 0 || self.batch_size == 0 {
            return Err(Error::invalid("seq2seq dimensions and batch size must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(self.lr > 0.0) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Seq2SeqParams {
    pub src_emb: Tensor,
    pub tgt_emb: Tensor,
    pub encoder: LstmStack,
    pub decoder: LstmStack,
    pub out_w: Tensor,
    pub out_b: Tensor,
}

impl Params for Seq2SeqParams {
    fn tensors(&self) -> Vec<&Tensor> {
        let mut v = vec![&self.src_emb, &self.tgt_emb];
        v.extend(self.encoder.tensors());
        v.extend(self.decoder.tensors());
        v.push(&self.out_w);
        v.push(&self.out_b);
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![&mut self.src_emb, &mut self.tgt_emb];
        v.extend(self.encoder.tensors_mut());
        v.extend(self.decoder.tensors_mut());
        v.push(&mut self.out_w);
        v.push(&mut self.out_b);
        v
    }
}

impl Seq2SeqParams {
    fn names(&self) -> Vec<String> {
        let mut v = vec!["src_emb".to_string(), "tgt_emb".to_string()];
        v.extend(self.encoder.tensor_names("enc"));
        v.extend(self.decoder.tensor_names("dec"));
        v.push("out_w".into());
        v.push("out_b".into());
        v
    }

    fn zeros_like(&self) -> Self {
        Seq2SeqParams {
            src_emb: self.src_emb.zeros_like(),
            tgt_emb: self.tgt_emb.zeros_like(),
            encoder: self.encoder.zeros_like(),
            decoder: self.decoder.zeros_like(),
            out_w: self.out_w.zeros_like(),
            out_b: self.out_b.zeros_like(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Seq2SeqModel {
    pub src_vocab: Vocab,
    pub tgt_vocab: Vocab,
    pub config: Seq2SeqConfig,
    pub params: Seq2SeqParams,
}

/// Per-epoch mean token cross-entropy.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epoch_loss: Vec<f64>,
}

struct Forward {
    enc: StackRun,
    dec: StackRun,
    logits: Vec<Vec<f64>>,
}

impl Seq2SeqModel {
    pub fn init(src_vocab: Vocab, tgt_vocab: Vocab, config: Seq2SeqConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (e, h) = (config.embed, config.hidden);
        let params = Seq2SeqParams {
            src_emb: Tensor::uniform(src_vocab.len(), e, 0.1, &mut rng),
            tgt_emb: Tensor::uniform(tgt_vocab.len(), e, 0.1, &mut rng),
            encoder: LstmStack::new(e, h, config.layers, &mut rng),
            decoder: LstmStack::new(e + 2 * h, h, config.layers, &mut rng),
            out_w: Tensor::glorot(tgt_vocab.len(), h, &mut rng),
            out_b: Tensor::zeros(tgt_vocab.len(), 1),
        };
        Ok(Seq2SeqModel { src_vocab, tgt_vocab, config, params })
    }

    fn encode_inputs(&self, src: &[usize]) -> Vec<Vec<f64>> {
        src.iter().rev().map(|&id| self.params.src_emb.row(id).to_vec()).collect()
    }

    /// `enc_out` holds encoder top outputs in encoder (reversed) order.
    fn decoder_input(&self, prev: usize, k: usize, enc_out: &[Vec<f64>]) -> Vec<f64> {
        let n = enc_out.len();
        let mut x = self.params.tgt_emb.row(prev).to_vec();
        x.extend_from_slice(&enc_out[n - 1]);
        match k < n {
            true => x.extend_from_slice(&enc_out[n - 1 - k]),
            false => x.extend(std::iter::repeat(0.0).take(self.config.hidden)),
        }
        x
    }

    fn logits(&self, hidden: &[f64]) -> Vec<f64> {
        let mut l = self.params.out_b.data.clone();
        self.params.out_w.matvec_add(hidden, &mut l);
        l
    }

    /// Teacher-forced forward pass; `tgt` excludes BOS/EOS.
    fn forward(&self, src: &[usize], tgt: &[usize], rate: f64, rng: Option<&mut ChaCha8Rng>) -> Forward {
        let (enc_masks, dec_masks) = match rng {
            Some(rng) if rate > 0.0 => (
                self.params.encoder.sample_masks(src.len(), rate, rng),
                self.params.decoder.sample_masks(tgt.len() + 1, rate, rng),
            ),
            _ => (None, None),
        };
        let enc = self.params.encoder.forward(&self.encode_inputs(src), &self.params.encoder.zero_state(), enc_masks);
        let inputs: Vec<Vec<f64>> = std::iter::once(BOS)
            .chain(tgt.iter().copied())
            .enumerate()
            .map(|(k, prev)| self.decoder_input(prev, k, &enc.outputs))
            .collect();
        let dec = self.params.decoder.forward(&inputs, &enc.finals, dec_masks);
        let logits = dec.outputs.iter().map(|o| self.logits(o)).collect();
        Forward { enc, dec, logits }
    }

    /// Summed token cross-entropy of one pair, accumulating gradients into `grad`.
    fn loss_and_grad(
        &self,
        src: &[usize],
        tgt: &[usize],
        rate: f64,
        rng: Option<&mut ChaCha8Rng>,
        grad: &mut Seq2SeqParams,
    ) -> f64 {
        let fwd = self.forward(src, tgt, rate, rng);
        let gold: Vec<usize> = tgt.iter().copied().chain(std::iter::once(EOS)).collect();
        let h = self.config.hidden;
        let e = self.config.embed;
        let mut loss = 0.0;
        let mut douts = Vec::with_capacity(gold.len());
        for (k, &y) in gold.iter().enumerate() {
            let logits = &fwd.logits[k];
            loss += nn::logsumexp(logits) - logits[y];
            let mut d = nn::softmax(logits);
            d[y] -= 1.0;
            grad.out_w.outer_add(&d, &fwd.dec.outputs[k]);
            for (b, dv) in grad.out_b.data.iter_mut().zip(&d) {
                *b += dv;
            }
            let mut dout = vec![0.0; h];
            self.params.out_w.matvec_t_add(&d, &mut dout);
            douts.push(dout);
        }
        let zero_finals = self.params.decoder.zero_state();
        let (dxs, dinit) = self.params.decoder.backward(&fwd.dec, &douts, &zero_finals, &mut grad.decoder);
        let n = src.len();
        let mut enc_douts = vec![vec![0.0; h]; n];
        let prevs = std::iter::once(BOS).chain(tgt.iter().copied());
        for (k, (dx, prev)) in dxs.iter().zip(prevs).enumerate() {
            for (g, d) in grad.tgt_emb.row_mut(prev).iter_mut().zip(&dx[..e]) {
                *g += d;
            }
            for (c, d) in enc_douts[n - 1].iter_mut().zip(&dx[e..e + h]) {
                *c += d;
            }
            if k < n {
                for (c, d) in enc_douts[n - 1 - k].iter_mut().zip(&dx[e + h..]) {
                    *c += d;
                }
            }
        }
        let (dsrc, _) = self.params.encoder.backward(&fwd.enc, &enc_douts, &dinit, &mut grad.encoder);
        for (dx, &id) in dsrc.iter().zip(src.iter().rev()) {
            for (g, d) in grad.src_emb.row_mut(id).iter_mut().zip(dx) {
                *g += d;
            }
        }
        loss
    }

    /// Summed loss and gradient over a batch of id-encoded pairs, dropout off.
    /// Exposed for gradient checking.
    pub fn batch_loss_grad(&self, batch: &[(Vec<usize>, Vec<usize>)]) -> (f64, Seq2SeqParams) {
        let mut grad = self.params.zeros_like();
        let loss = batch.iter().map(|(s, t)| self.loss_and_grad(s, t, 0.0, None, &mut grad)).sum();
        (loss, grad)
    }

    /// Summed loss over a batch, dropout off.
    pub fn batch_loss(&self, batch: &[(Vec<usize>, Vec<usize>)]) -> f64 {
        batch
            .iter()
            .map(|(s, t)| {
                let fwd = self.forward(s, t, 0.0, None);
                t.iter()
                    .chain(std::iter::once(&EOS))
                    .zip(&fwd.logits)
                    .map(|(&y, l)| nn::logsumexp(l) - l[y])
                    .sum::<f64>()
            })
            .sum()
    }

    /// Teacher-forced scoring of a fixed target with dropout at `rate`.
    fn score_ids(&self, src: &[usize], tgt: &[usize], rate: f64, rng: Option<&mut ChaCha8Rng>) -> (Vec<StepRecord>, StepRecord, Forward) {
        let fwd = self.forward(src, tgt, rate, rng);
        let mut steps: Vec<StepRecord> = tgt
            .iter()
            .chain(std::iter::once(&EOS))
            .enumerate()
            .map(|(k, &y)| StepRecord::new(y, fwd.logits[k].clone(), fwd.dec.outputs[k].clone()))
            .collect();
        let end = steps.pop().expect("EOS step");
        (steps, end, fwd)
    }

    /// Teacher-forced glass-box trace of `target` given `source`, dropout off.
    pub fn score_pair(&self, source: &[String], target: &[String]) -> Result<GlassBoxTrace> {
        if source.is_empty() {
            return Err(Error::invalid("empty source sentence"));
        }
        let src = self.src_vocab.encode(source);
        let tgt = self.tgt_vocab.encode(target);
        let (steps, end, fwd) = self.score_ids(&src, &tgt, 0.0, None);
        let log_prob = steps.iter().map(StepRecord::log_prob).sum();
        Ok(GlassBoxTrace {
            source: source.to_vec(),
            target: target.to_vec(),
            steps,
            end: Some(end),
            encoder_states: fwd.enc.outputs.iter().rev().cloned().collect(),
            log_prob,
            truncated: false,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = serde_json::json!({
            "config": self.config,
            "src_vocab": self.src_vocab,
            "tgt_vocab": self.tgt_vocab,
        });
        let mut ck = Checkpoint::new("seq2seq", meta);
        for (name, t) in self.params.names().into_iter().zip(self.params.tensors()) {
            ck.push(name, t);
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind("seq2seq")?;
        let config: Seq2SeqConfig = serde_json::from_value(ck.meta["config"].clone())?;
        let src_vocab: Vocab = serde_json::from_value(ck.meta["src_vocab"].clone())?;
        let tgt_vocab: Vocab = serde_json::from_value(ck.meta["tgt_vocab"].clone())?;
        let mut model = Seq2SeqModel::init(src_vocab, tgt_vocab, config)?;
        ck.fill(model.params.tensors_mut())?;
        Ok(model)
    }
}

fn training_target(p: &SentencePair) -> &[String] {
    p.reference.as_deref().unwrap_or(&p.target)
}

/// Trains the translator on every pair of `corpus` (the reference side when
/// present). Deterministic in `config.seed`.
pub fn train_seq2seq(corpus: &[SentencePair], config: &Seq2SeqConfig) -> Result<(Seq2SeqModel, TrainLog)> {
    if corpus.is_empty() {
        return Err(Error::invalid("empty training corpus"));
    }
    let src_vocab = Vocab::build(corpus.iter().flat_map(|p| p.source.iter()));
    let tgt_vocab = Vocab::build(corpus.iter().flat_map(|p| training_target(p).iter()));
    let mut model = Seq2SeqModel::init(src_vocab, tgt_vocab, config.clone())?;
    let data: Vec<(Vec<usize>, Vec<usize>)> = corpus
        .iter()
        .map(|p| (model.src_vocab.encode(&p.source), model.tgt_vocab.encode(training_target(p))))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut adam = Adam::new(config.lr);
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step = 0;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_tokens = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let mut grad = model.params.zeros_like();
            let mut loss = 0.0;
            let mut tokens = 0;
            for &i in chunk {
                let (s, t) = &data[i];
                loss += model.loss_and_grad(s, t, config.dropout, Some(&mut rng), &mut grad);
                tokens += t.len() + 1;
            }
            if !loss.is_finite() || !grad.all_finite() {
                return Err(Error::Diverged {
                    step,
                    detail: format!("epoch {epoch}: batch loss {loss}, grad norm {}", grad.norm()),
                });
            }
            grad.scale(1.0 / tokens as f64);
            nn::clip_grad_norm(&mut grad, config.clip);
            adam.step(&mut model.params, &grad);
            epoch_loss += loss;
            epoch_tokens += tokens;
            step += 1;
        }
        let mean = epoch_loss / epoch_tokens as f64;
        log::debug!("seq2seq epoch {epoch}: loss {mean:.4}");
        log.epoch_loss.push(mean);
    }
    Ok((model, log))
}

/// Greedy decoding with dropout disabled. The end token is not allowed as the
/// first output; decoding stops at `4 * |source|` tokens with the truncation
/// flag set.
pub fn translate(model: &Seq2SeqModel, source: &[String]) -> Result<(Vec<String>, GlassBoxTrace)> {
    if source.is_empty() {
        return Err(Error::invalid("empty source sentence"));
    }
    let src = model.src_vocab.encode(source);
    let p = &model.params;
    let enc = p.encoder.forward(&model.encode_inputs(&src), &p.encoder.zero_state(), None);
    let mut state: Vec<LstmState> = enc.finals.clone();
    let mut prev = BOS;
    let mut steps = Vec::new();
    let mut end = None;
    let max_len = 4 * source.len();
    loop {
        let x = model.decoder_input(prev, steps.len(), &enc.outputs);
        let run = p.decoder.forward(&[x], &state, None);
        let hidden = run.outputs[0].clone();
        let logits = model.logits(&hidden);
        let mut best = None::<usize>;
        for (i, &l) in logits.iter().enumerate() {
            if i == BOS || (i == EOS && steps.is_empty()) {
                continue;
            }
            if best.is_none_or(|b| l > logits[b]) {
                best = Some(i);
            }
        }
        let tok = best.expect("vocabulary has a non-special token");
        let record = StepRecord::new(tok, logits, hidden);
        if tok == EOS {
            end = Some(record);
            break;
        }
        steps.push(record);
        state = run.finals;
        prev = tok;
        if steps.len() >= max_len {
            break;
        }
    }
    let ids: Vec<usize> = steps.iter().map(|s| s.token).collect();
    let target = model.tgt_vocab.decode(&ids);
    let log_prob = steps.iter().map(StepRecord::log_prob).sum();
    let trace = GlassBoxTrace {
        source: source.to_vec(),
        target: target.clone(),
        truncated: end.is_none(),
        steps,
        end,
        encoder_states: enc.outputs.iter().rev().cloned().collect(),
        log_prob,
    };
    Ok((target, trace))
}

/// Teacher-forced replays of `target` under `n_runs` dropout masks.
/// Row `r` is `log P(t_k* | s)` for every target position, computed with the
/// mask stream `(seed, r)`.
pub fn mc_dropout_replays(
    model: &Seq2SeqModel,
    source: &[String],
    target: &[String],
    n_runs: usize,
    dropout_rate: f64,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    if !(0.0..1.0).contains(&dropout_rate) {
        return Err(Error::invalid(format!("dropout rate {dropout_rate} outside [0, 1)")));
    }
    if n_runs == 0 {
        return Err(Error::invalid("n_runs must be at least 1"));
    }
    if source.is_empty() || target.is_empty() {
        return Err(Error::invalid("empty sentence"));
    }
    let src = model.src_vocab.encode(source);
    let tgt = model.tgt_vocab.encode(target);
    Ok((0..n_runs)
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(r as u64);
            let (steps, _, _) = model.score_ids(&src, &tgt, dropout_rate, Some(&mut rng));
            steps.iter().map(StepRecord::log_prob).collect()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datakit::{Domain, Origin};

    fn pair(id: &str, src: &str, tgt: &str) -> SentencePair {
        let toks = |s: &str| s.split_whitespace().map(str::to_string).collect::<Vec<_>>();
        SentencePair {
            id: id.into(),
            source: toks(src),
            target: toks(tgt),
            reference: None,
            origin: Origin::MtTrain,
            domain: Domain::InDomain,
        }
    }

    fn tiny_config() -> Seq2SeqConfig {
        Seq2SeqConfig { embed: 8, hidden: 16, epochs: 0, ..Seq2SeqConfig::default() }
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let corpus = vec![pair("a", "a b", "A B")];
        let (m, log) = train_seq2seq(&corpus, &tiny_config()).unwrap();
        let init = Seq2SeqModel::init(m.src_vocab.clone(), m.tgt_vocab.clone(), tiny_config()).unwrap();
        assert_eq!(m, init);
        assert!(log.epoch_loss.is_empty());
    }

    #[test]
    fn training_is_bitwise_deterministic() {
        let corpus = vec![pair("a", "a b", "A B"), pair("b", "b a c", "B A C")];
        let cfg = Seq2SeqConfig { epochs: 3, ..tiny_config() };
        let (m1, l1) = train_seq2seq(&corpus, &cfg).unwrap();
        let (m2, l2) = train_seq2seq(&corpus, &cfg).unwrap();
        assert_eq!(m1.params.flatten(), m2.params.flatten());
        assert_eq!(l1, l2);
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert!(train_seq2seq(&[], &tiny_config()).is_err());
    }

    #[test]
    fn trace_is_self_consistent() {
        let corpus = vec![pair("a", "a b c", "A B C")];
        let (m, _) = train_seq2seq(&corpus, &Seq2SeqConfig { epochs: 2, ..tiny_config() }).unwrap();
        let src: Vec<String> = vec!["a".into(), "c".into()];
        let (target, trace) = translate(&m, &src).unwrap();
        assert_eq!(trace.steps.len(), target.len());
        let mut sum = 0.0;
        for s in trace.steps.iter().chain(trace.end.iter()) {
            assert!((s.probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            let lse = nn::logsumexp(&s.logits);
            for (l, p) in s.logits.iter().zip(&s.probs) {
                assert!((lse + p.ln() - l).abs() < 1e-5);
            }
        }
        for s in &trace.steps {
            sum += s.probs[s.token].ln();
        }
        assert!((sum - trace.log_prob).abs() < 1e-9);
        assert_eq!(trace.encoder_states.len(), 2);

        // Teacher-forced scoring of the greedy output reproduces decoding exactly.
        let scored = m.score_pair(&src, &target).unwrap();
        assert_eq!(scored.steps, trace.steps);
        if let Some(end) = &trace.end {
            assert_eq!(scored.end.as_ref().unwrap().probs, end.probs);
        }
    }

    #[test]
    fn truncation_flag_set_when_no_end_token() {
        let corpus = vec![pair("a", "a", "A")];
        let (mut m, _) = train_seq2seq(&corpus, &tiny_config()).unwrap();
        // Make EOS unreachable.
        m.params.out_b.data[EOS] = -1e9;
        let (target, trace) = translate(&m, &["a".to_string()]).unwrap();
        assert!(trace.truncated);
        assert_eq!(target.len(), 4);
        assert!(trace.end.is_none());
    }

    #[test]
    fn mc_replays_rate_zero_and_reproducibility() {
        let corpus = vec![pair("a", "a b c", "A B C")];
        let (m, _) = train_seq2seq(&corpus, &Seq2SeqConfig { epochs: 2, ..tiny_config() }).unwrap();
        let src: Vec<String> = vec!["a".into(), "b".into()];
        let tgt: Vec<String> = vec!["A".into(), "B".into()];
        let det = m.score_pair(&src, &tgt).unwrap().token_log_probs();
        let rows = mc_dropout_replays(&m, &src, &tgt, 8, 0.0, 3).unwrap();
        assert!(rows.iter().all(|r| *r == det));

        for n in [8, 16, 32] {
            let rows = mc_dropout_replays(&m, &src, &tgt, n, 0.3, 11).unwrap();
            assert_eq!(rows.len(), n);
            let again = mc_dropout_replays(&m, &src, &tgt, 2, 0.3, 11).unwrap();
            assert_eq!(rows[1], again[1]);
        }
        assert!(mc_dropout_replays(&m, &src, &tgt, 4, 1.0, 0).is_err());
        assert!(mc_dropout_replays(&m, &src, &tgt, 4, -0.1, 0).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let corpus = vec![pair("a", "a b", "A B")];
        let (m, _) = train_seq2seq(&corpus, &Seq2SeqConfig { epochs: 1, ..tiny_config() }).unwrap();
        let mut buf = Vec::new();
        m.to_checkpoint().write_to(&mut buf).unwrap();
        let back = Seq2SeqModel::from_checkpoint(&Checkpoint::read_from(&buf[..]).unwrap()).unwrap();
        assert_eq!(back.src_vocab, m.src_vocab);
        for (a, b) in back.params.flatten().iter().zip(m.params.flatten()) {
            assert_eq!(*a, b as f32 as f64);
        }
    }
}
