//! Confidence-estimation classifier over feature bundles.
//!
//! Each sequence block is reduced to a fixed vector by a bidirectional LSTM
//! stack followed by layer normalization; the block vectors (plus optional
//! scalar features) feed an affine map to two logits, `[good, needs_work]`.

mod naive;
mod train;

pub use naive::{naive_model_fit, NaiveModel};
pub use train::{grid_search, train_ce, GridSpec, LeaderboardEntry, SearchResult, StepLogEntry, TrainOutcome};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::features::{BlockSpec, FeatureBundle, FeatureHeader, BLOCK_SOURCE_ENC, META_WIDTH};
use crate::nn::{self, LayerNorm, LayerNormCache, LstmStack, Params, StackRun, Tensor};
use crate::Label;

/// Discrete hyper-parameter values accepted without `unrestricted`.
pub mod grid {
    pub const EMA_DECAY: [f64; 2] = [0.999, 0.9999];
    pub const LAYERS: [usize; 3] = [2, 4, 8];
    pub const WIDTH: [usize; 3] = [32, 64, 128];
    pub const DROPOUT: (f64, f64) = (0.3, 0.6);
    pub const DROPOUT_STEPS: [f64; 3] = [0.3, 0.45, 0.6];
    pub const LR: [f64; 3] = [1e-5, 5e-5, 1e-4];
    pub const LABEL_SMOOTHING: [f64; 3] = [0.07, 0.09, 0.11];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub ema_decay: f64,
    pub layers: usize,
    pub width: usize,
    pub dropout: f64,
    pub lr: f64,
    pub label_smoothing: f64,
    pub use_encoder_output: bool,
    pub use_meta_features: bool,
    /// Appends the naive length-normalized logP to the predictor input.
    pub append_naive_logp: bool,
    /// Ramps the EMA decay as `min(decay, (1 + step) / (10 + step))`.
    pub ema_warmup: bool,
    /// Accepts values off the search grid.
    pub unrestricted: bool,
    pub seed: u64,
    pub max_steps: usize,
    pub batch_size: usize,
    pub eval_every: usize,
    pub target_precision: f64,
    pub clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            ema_decay: 0.999,
            layers: 4,
            width: 128,
            dropout: 0.6,
            lr: 5e-5,
            label_smoothing: 0.11,
            use_encoder_output: true,
            use_meta_features: true,
            append_naive_logp: false,
            ema_warmup: true,
            unrestricted: false,
            seed: 0,
            max_steps: 1000,
            batch_size: 32,
            eval_every: 50,
            target_precision: 0.95,
            clip: 5.0,
        }
    }
}

fn on_grid<T: PartialEq + std::fmt::Debug>(name: &str, v: T, allowed: &[T]) -> Result<()> {
    if allowed.contains(&v) {
        Ok(())
    } else {
        Err(Error::invalid(format!("{name} = {v:?} is off the grid {allowed:?}; pass unrestricted to allow it")))
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.width == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::invalid("layers, width, batch_size and eval_every must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) || !(0.0..0.5).contains(&self.label_smoothing) {
            return Err(Error::invalid("dropout must lie in [0, 1) and label smoothing in [0, 0.5)"));
        }
        if !(0.0..1.0).contains(&self.ema_decay) || self.lr <= 0.0 {
            return Err(Error::invalid("EMA decay must lie in [0, 1) and lr be positive"));
        }
        if !(self.target_precision > 0.0 && self.target_precision <= 1.0) {
            return Err(Error::invalid("target precision outside (0, 1]"));
        }
        if self.unrestricted {
            return Ok(());
        }
        on_grid("ema_decay", self.ema_decay, &grid::EMA_DECAY)?;
        on_grid("layers", self.layers, &grid::LAYERS)?;
        on_grid("width", self.width, &grid::WIDTH)?;
        on_grid("lr", self.lr, &grid::LR)?;
        on_grid("label_smoothing", self.label_smoothing, &grid::LABEL_SMOOTHING)?;
        let (lo, hi) = grid::DROPOUT;
        if !(lo..=hi).contains(&self.dropout) {
            return Err(Error::invalid(format!("dropout {} outside [{lo}, {hi}]; pass unrestricted", self.dropout)));
        }
        Ok(())
    }
}

/// Per-dimension standardization fitted on training data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn identity(width: usize) -> Self {
        Standardizer { mean: vec![0.0; width], std: vec![1.0; width] }
    }

    pub fn fit<'a, I: IntoIterator<Item = &'a [f64]>>(rows: I, width: usize) -> Self {
        let mut n = 0usize;
        let mut sum = vec![0.0; width];
        let mut sq = vec![0.0; width];
        for r in rows {
            n += 1;
            for k in 0..width {
                sum[k] += r[k];
                sq[k] += r[k] * r[k];
            }
        }
        if n == 0 {
            return Self::identity(width);
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let std = (0..width)
            .map(|k| {
                let v = (sq[k] / n as f64 - mean[k] * mean[k]).max(0.0).sqrt();
                if v < 1e-8 {
                    1.0
                } else {
                    v
                }
            })
            .collect();
        Standardizer { mean, std }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| (v - m) / s).collect()
    }
}

/// Bidirectional LSTM reduction plus layer normalization; output width `2 W`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderBlock {
    pub fwd: LstmStack,
    pub bwd: LstmStack,
    pub norm: LayerNorm,
}

pub struct BlockCache {
    fwd: StackRun,
    bwd: StackRun,
    norm: LayerNormCache,
    out_mask: Option<Vec<f64>>,
}

impl EncoderBlock {
    pub fn new<R: Rng>(input: usize, width: usize, layers: usize, rng: &mut R) -> Self {
        EncoderBlock {
            fwd: LstmStack::new(input, width, layers, rng),
            bwd: LstmStack::new(input, width, layers, rng),
            norm: LayerNorm::new(2 * width),
        }
    }

    pub fn output_width(&self) -> usize {
        2 * self.fwd.width()
    }

    pub fn input_width(&self) -> usize {
        self.fwd.input_width()
    }

    pub fn zeros_like(&self) -> Self {
        EncoderBlock { fwd: self.fwd.zeros_like(), bwd: self.bwd.zeros_like(), norm: self.norm.zeros_like() }
    }

    fn tensors(&self) -> Vec<&Tensor> {
        let mut t = self.fwd.tensors();
        t.extend(self.bwd.tensors());
        t.extend([&self.norm.gain, &self.norm.bias]);
        t
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut t = self.fwd.tensors_mut();
        t.extend(self.bwd.tensors_mut());
        t.extend([&mut self.norm.gain, &mut self.norm.bias]);
        t
    }

    fn names(&self, prefix: &str) -> Vec<String> {
        let mut n = self.fwd.tensor_names(&format!("{prefix}.fwd"));
        n.extend(self.bwd.tensor_names(&format!("{prefix}.bwd")));
        n.extend([format!("{prefix}.norm.gain"), format!("{prefix}.norm.bias")]);
        n
    }

    fn check(&self, xs: &[Vec<f64>]) -> Result<()> {
        if xs.is_empty() {
            return Err(Error::invalid("cannot encode an empty sequence"));
        }
        if let Some(x) = xs.iter().find(|x| x.len() != self.input_width()) {
            return Err(Error::shape(format!("input width {} != {}", x.len(), self.input_width())));
        }
        Ok(())
    }

    pub fn encode(&self, xs: &[Vec<f64>]) -> Result<Vec<f64>> {
        self.check(xs)?;
        Ok(self.forward(xs, None).0)
    }

    fn forward(&self, xs: &[Vec<f64>], out_mask: Option<Vec<f64>>) -> (Vec<f64>, BlockCache) {
        let rev: Vec<Vec<f64>> = xs.iter().rev().cloned().collect();
        let fwd = self.fwd.forward(xs, &self.fwd.zero_state(), None);
        let bwd = self.bwd.forward(&rev, &self.bwd.zero_state(), None);
        let mut h = fwd.finals.last().unwrap().h.clone();
        h.extend_from_slice(&bwd.finals.last().unwrap().h);
        let (mut y, norm) = self.norm.forward(&h);
        if let Some(m) = &out_mask {
            y.iter_mut().zip(m).for_each(|(a, b)| *a *= b);
        }
        (y, BlockCache { fwd, bwd, norm, out_mask })
    }

    fn backward(&self, cache: &BlockCache, dy: &[f64], steps: usize, grad: &mut EncoderBlock) {
        let dy: Vec<f64> = match &cache.out_mask {
            Some(m) => dy.iter().zip(m).map(|(a, b)| a * b).collect(),
            None => dy.to_vec(),
        };
        let dh = self.norm.backward(&cache.norm, &dy, &mut grad.norm);
        let w = self.fwd.width();
        let top = self.fwd.depth() - 1;
        let zeros_out = vec![vec![0.0; w]; steps];
        for (stack, run, g, half) in [
            (&self.fwd, &cache.fwd, &mut grad.fwd, &dh[..w]),
            (&self.bwd, &cache.bwd, &mut grad.bwd, &dh[w..]),
        ] {
            let mut dfinals = stack.zero_state();
            dfinals[top].h = half.to_vec();
            stack.backward(run, &zeros_out, &dfinals, g);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CeParams {
    pub blocks: Vec<EncoderBlock>,
    /// `2 x D`, row 0 scores `good`.
    pub pred_w: Tensor,
    pub pred_b: Tensor,
}

impl Params for CeParams {
    fn tensors(&self) -> Vec<&Tensor> {
        let mut t: Vec<&Tensor> = self.blocks.iter().flat_map(EncoderBlock::tensors).collect();
        t.extend([&self.pred_w, &self.pred_b]);
        t
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut t: Vec<&mut Tensor> = self.blocks.iter_mut().flat_map(EncoderBlock::tensors_mut).collect();
        t.extend([&mut self.pred_w, &mut self.pred_b]);
        t
    }
}

impl CeParams {
    pub fn zeros_like(&self) -> Self {
        CeParams {
            blocks: self.blocks.iter().map(EncoderBlock::zeros_like).collect(),
            pred_w: self.pred_w.zeros_like(),
            pred_b: self.pred_b.zeros_like(),
        }
    }

    fn names(&self, prefix: &str) -> Vec<String> {
        let mut n: Vec<String> =
            self.blocks.iter().enumerate().flat_map(|(i, b)| b.names(&format!("{prefix}.block{i}"))).collect();
        n.extend([format!("{prefix}.pred.w"), format!("{prefix}.pred.b")]);
        n
    }
}

/// Which parts of a bundle the model reads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputLayout {
    pub blocks: Vec<BlockSpec>,
    pub meta: bool,
    pub naive: bool,
}

impl InputLayout {
    pub fn from_header(header: &FeatureHeader, config: &TrainConfig) -> Self {
        let blocks = header
            .blocks
            .iter()
            .filter(|b| config.use_encoder_output || b.name != BLOCK_SOURCE_ENC)
            .cloned()
            .collect();
        InputLayout { blocks, meta: config.use_meta_features, naive: config.append_naive_logp }
    }

    pub fn scalar_width(&self) -> usize {
        (if self.meta { META_WIDTH } else { 0 }) + usize::from(self.naive)
    }

    fn scalars(&self, b: &FeatureBundle) -> Vec<f64> {
        let mut s = Vec::with_capacity(self.scalar_width());
        if self.meta {
            s.extend_from_slice(&b.meta);
        }
        if self.naive {
            s.push(b.naive_logp);
        }
        s
    }

    fn sequences<'b>(&self, b: &'b FeatureBundle) -> Result<Vec<&'b [Vec<f64>]>> {
        let present = b.blocks();
        self.blocks
            .iter()
            .map(|spec| {
                let rows = present
                    .iter()
                    .find(|(n, _)| *n == spec.name)
                    .map(|(_, r)| *r)
                    .ok_or_else(|| Error::shape(format!("bundle {} lacks block {}", b.id, spec.name)))?;
                if rows.is_empty() {
                    return Err(Error::shape(format!("bundle {} block {} is empty", b.id, spec.name)));
                }
                if let Some(r) = rows.iter().find(|r| r.len() != spec.width) {
                    return Err(Error::shape(format!(
                        "bundle {} block {} width {} != {}",
                        b.id,
                        spec.name,
                        r.len(),
                        spec.width
                    )));
                }
                Ok(rows)
            })
            .collect()
    }
}

/// A bundle after standardization, ready for the network.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub blocks: Vec<Vec<Vec<f64>>>,
    pub scalars: Vec<f64>,
    pub label: Option<Label>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CeModel {
    pub config: TrainConfig,
    pub layout: InputLayout,
    pub block_norms: Vec<Standardizer>,
    pub scalar_norm: Standardizer,
    pub params: CeParams,
    pub shadow: CeParams,
    pub best_step: usize,
}

/// Per-sample forward record.
pub struct Forward {
    caches: Vec<BlockCache>,
    steps: Vec<usize>,
    z: Vec<f64>,
    pub logits: [f64; 2],
}

impl CeModel {
    /// Fresh model; standardizers are fitted on `train`.
    pub fn init(header: &FeatureHeader, config: &TrainConfig, train: &[FeatureBundle]) -> Result<Self> {
        config.validate()?;
        let layout = InputLayout::from_header(header, config);
        let mut per_block: Vec<Vec<&[Vec<f64>]>> = vec![Vec::new(); layout.blocks.len()];
        for b in train {
            for (i, rows) in layout.sequences(b)?.into_iter().enumerate() {
                per_block[i].push(rows);
            }
        }
        let block_norms = layout
            .blocks
            .iter()
            .zip(&per_block)
            .map(|(spec, seqs)| Standardizer::fit(seqs.iter().flat_map(|s| s.iter().map(Vec::as_slice)), spec.width))
            .collect();
        let scalars: Vec<Vec<f64>> = train.iter().map(|b| layout.scalars(b)).collect();
        let scalar_norm = Standardizer::fit(scalars.iter().map(Vec::as_slice), layout.scalar_width());
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let blocks: Vec<EncoderBlock> = layout
            .blocks
            .iter()
            .map(|spec| EncoderBlock::new(spec.width, config.width, config.layers, &mut rng))
            .collect();
        let d = blocks.iter().map(EncoderBlock::output_width).sum::<usize>() + layout.scalar_width();
        let params = CeParams { blocks, pred_w: Tensor::glorot(2, d, &mut rng), pred_b: Tensor::zeros(2, 1) };
        Ok(CeModel {
            config: config.clone(),
            layout,
            block_norms,
            scalar_norm,
            shadow: params.clone(),
            params,
            best_step: 0,
        })
    }

    pub fn predictor_width(&self) -> usize {
        self.params.pred_w.cols
    }

    pub fn prepare(&self, b: &FeatureBundle) -> Result<Prepared> {
        let seqs = self.layout.sequences(b)?;
        let blocks = seqs
            .iter()
            .zip(&self.block_norms)
            .map(|(rows, norm)| rows.iter().map(|r| norm.apply(r)).collect())
            .collect();
        let scalars = self.scalar_norm.apply(&self.layout.scalars(b));
        if scalars.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("bundle {} has non-finite scalar features", b.id)));
        }
        Ok(Prepared { blocks, scalars, label: b.label })
    }

    pub fn prepare_all(&self, bundles: &[FeatureBundle]) -> Result<Vec<Prepared>> {
        bundles.iter().map(|b| self.prepare(b)).collect()
    }

    /// Forward pass. With `dropout = Some((rate, rng))`, inverted dropout acts
    /// on every block's inputs and on its output vector.
    pub fn forward(params: &CeParams, x: &Prepared, dropout: Option<(f64, &mut ChaCha8Rng)>) -> Forward {
        let mut z = Vec::with_capacity(params.pred_w.cols);
        let mut caches = Vec::with_capacity(params.blocks.len());
        let mut steps = Vec::with_capacity(params.blocks.len());
        let mut dropout = dropout.filter(|(r, _)| *r > 0.0);
        for (block, xs) in params.blocks.iter().zip(&x.blocks) {
            let (y, cache) = match dropout.as_mut() {
                Some((rate, rng)) => {
                    let dropped: Vec<Vec<f64>> = xs
                        .iter()
                        .map(|v| {
                            let m = nn::dropout_mask(v.len(), *rate, *rng);
                            v.iter().zip(&m).map(|(a, b)| a * b).collect()
                        })
                        .collect();
                    let m = nn::dropout_mask(block.output_width(), *rate, *rng);
                    block.forward(&dropped, Some(m))
                }
                None => block.forward(xs, None),
            };
            z.extend(y);
            caches.push(cache);
            steps.push(xs.len());
        }
        z.extend_from_slice(&x.scalars);
        let mut logits = [params.pred_b.data[0], params.pred_b.data[1]];
        for (r, l) in logits.iter_mut().enumerate() {
            *l += nn::dot(params.pred_w.row(r), &z);
        }
        Forward { caches, steps, z, logits }
    }

    fn backward(params: &CeParams, fwd: &Forward, dlogits: &[f64; 2], grad: &mut CeParams) {
        grad.pred_w.outer_add(dlogits, &fwd.z);
        grad.pred_b.data[0] += dlogits[0];
        grad.pred_b.data[1] += dlogits[1];
        let mut dz = vec![0.0; fwd.z.len()];
        params.pred_w.matvec_t_add(dlogits, &mut dz);
        let mut off = 0;
        for (i, block) in params.blocks.iter().enumerate() {
            let w = block.output_width();
            block.backward(&fwd.caches[i], &dz[off..off + w], fwd.steps[i], &mut grad.blocks[i]);
            off += w;
        }
    }

    /// Smoothed target `(1 - eps, eps)` on the rated label, ordered `[good, needs_work]`.
    pub fn smoothed_target(label: Label, eps: f64) -> [f64; 2] {
        let mut q = [eps; 2];
        q[label.index()] = 1.0 - eps;
        q
    }

    /// Mean smoothed cross-entropy over `batch` and its gradient. Samples
    /// without a label are rejected.
    pub fn batch_loss_grad(
        params: &CeParams,
        batch: &[&Prepared],
        eps: f64,
        mut dropout: Option<(f64, &mut ChaCha8Rng)>,
    ) -> Result<(f64, CeParams)> {
        let mut grad = params.zeros_like();
        let mut loss = 0.0;
        let scale = 1.0 / batch.len().max(1) as f64;
        for x in batch {
            let label = x.label.ok_or_else(|| Error::invalid("training sample without label"))?;
            let d = dropout.as_mut().map(|(r, rng)| (*r, &mut **rng));
            let fwd = Self::forward(params, x, d);
            let q = Self::smoothed_target(label, eps);
            let logp = nn::log_softmax(&fwd.logits);
            loss -= q[0] * logp[0] + q[1] * logp[1];
            let dlogits = [(logp[0].exp() - q[0]) * scale, (logp[1].exp() - q[1]) * scale];
            Self::backward(params, &fwd, &dlogits, &mut grad);
        }
        Ok((loss * scale, grad))
    }

    /// Mean smoothed cross-entropy without dropout.
    pub fn loss(params: &CeParams, data: &[Prepared], eps: f64) -> Result<f64> {
        let mut loss = 0.0;
        for x in data {
            let label = x.label.ok_or_else(|| Error::invalid("sample without label"))?;
            let q = Self::smoothed_target(label, eps);
            let logp = nn::log_softmax(&Self::forward(params, x, None).logits);
            loss -= q[0] * logp[0] + q[1] * logp[1];
        }
        Ok(loss / data.len().max(1) as f64)
    }

    pub fn prob_good(params: &CeParams, x: &Prepared) -> f64 {
        nn::softmax(&Self::forward(params, x, None).logits)[Label::Good.index()]
    }

    /// P(good) for one bundle; deterministic, dropout off.
    pub fn predict(&self, bundle: &FeatureBundle, use_ema: bool) -> Result<f64> {
        let x = self.prepare(bundle)?;
        Ok(Self::prob_good(if use_ema { &self.shadow } else { &self.params }, &x))
    }

    pub fn predict_all(&self, bundles: &[FeatureBundle], use_ema: bool) -> Result<Vec<f64>> {
        bundles.iter().map(|b| self.predict(b, use_ema)).collect()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = serde_json::json!({
            "config": self.config,
            "layout": self.layout,
            "block_norms": self.block_norms,
            "scalar_norm": self.scalar_norm,
            "best_step": self.best_step,
        });
        let mut ck = Checkpoint::new("ce", meta);
        for (prefix, p) in [("live", &self.params), ("ema", &self.shadow)] {
            for (name, t) in p.names(prefix).into_iter().zip(p.tensors()) {
                ck.push(name, t);
            }
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind("ce")?;
        let config: TrainConfig = serde_json::from_value(ck.meta["config"].clone())?;
        let layout: InputLayout = serde_json::from_value(ck.meta["layout"].clone())?;
        let block_norms: Vec<Standardizer> = serde_json::from_value(ck.meta["block_norms"].clone())?;
        let scalar_norm: Standardizer = serde_json::from_value(ck.meta["scalar_norm"].clone())?;
        let best_step: usize = serde_json::from_value(ck.meta["best_step"].clone())?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let blocks: Vec<EncoderBlock> = layout
            .blocks
            .iter()
            .map(|spec| EncoderBlock::new(spec.width, config.width, config.layers, &mut rng))
            .collect();
        let d = blocks.iter().map(EncoderBlock::output_width).sum::<usize>() + layout.scalar_width();
        let mut params = CeParams { blocks, pred_w: Tensor::zeros(2, d), pred_b: Tensor::zeros(2, 1) };
        let mut shadow = params.clone();
        let mut targets = params.tensors_mut();
        targets.extend(shadow.tensors_mut());
        ck.fill(targets)?;
        Ok(CeModel { config, layout, block_norms, scalar_norm, params, shadow, best_step })
    }
}

/// One EMA update: `shadow <- d shadow + (1 - d) live`.
pub fn ema_update(shadow: &mut CeParams, live: &CeParams, decay: f64) {
    for (s, l) in shadow.tensors_mut().into_iter().zip(live.tensors()) {
        for (a, b) in s.data.iter_mut().zip(&l.data) {
            *a = decay * *a + (1.0 - decay) * b;
        }
    }
}

/// Decay used at `step` (0-based).
pub fn effective_decay(decay: f64, step: usize, warmup: bool) -> f64 {
    if warmup {
        decay.min((1.0 + step as f64) / (10.0 + step as f64))
    } else {
        decay
    }
}
