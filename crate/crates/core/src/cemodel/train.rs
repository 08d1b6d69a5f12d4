use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{effective_decay, ema_update, grid, CeModel, CeParams, Prepared, TrainConfig};
use crate::error::{Error, Result};
use crate::eval::{dev_recall_at_precision, ScoredSet};
use crate::features::{FeatureBundle, FeatureHeader};
use crate::nn::{clip_grad_norm, Adam, Params};
use crate::Label;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLogEntry {
    pub step: usize,
    /// Mean training loss since the previous entry.
    pub train_loss: Option<f64>,
    /// Smoothed dev loss under the EMA parameters.
    pub dev_loss: f64,
    pub dev_recall: f64,
    pub dev_threshold: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: CeModel,
    pub log: Vec<StepLogEntry>,
    pub best_step: usize,
    pub best_dev_recall: f64,
    pub best_dev_loss: f64,
    pub initial_dev_loss: f64,
}

fn labels_of(data: &[Prepared]) -> Result<Vec<Label>> {
    data.iter().map(|x| x.label.ok_or_else(|| Error::invalid("sample without label"))).collect()
}

fn both_classes(labels: &[Label], what: &str) -> Result<()> {
    let good = labels.iter().filter(|l| l.is_good()).count();
    if good == 0 || good == labels.len() {
        return Err(Error::invalid(format!("{what} data has a single class")));
    }
    Ok(())
}

fn evaluate(params: &CeParams, dev: &[Prepared], labels: &[Label], config: &TrainConfig, step: usize) -> Result<StepLogEntry> {
    let scores: Vec<f64> = dev.iter().map(|x| CeModel::prob_good(params, x)).collect();
    let point = dev_recall_at_precision(&ScoredSet::new(scores, labels.to_vec())?, config.target_precision)?;
    Ok(StepLogEntry {
        step,
        train_loss: None,
        dev_loss: CeModel::loss(params, dev, config.label_smoothing)?,
        dev_recall: point.recall,
        dev_threshold: point.threshold,
    })
}

/// Trains with Adam on the smoothed cross-entropy, keeps an EMA shadow and
/// returns the checkpoint whose EMA parameters give the highest dev
/// Recall@`target_precision` (lower dev loss, then the earlier step, on ties).
/// Step 0 is the initialization.
pub fn train_ce(
    header: &FeatureHeader,
    train: &[FeatureBundle],
    dev: &[FeatureBundle],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if dev.is_empty() {
        return Err(Error::invalid("empty dev set"));
    }
    let mut model = CeModel::init(header, config, train)?;
    let train_x = model.prepare_all(train)?;
    both_classes(&labels_of(&train_x)?, "training")?;
    let dev_x = model.prepare_all(dev)?;
    let dev_labels = labels_of(&dev_x)?;
    both_classes(&dev_labels, "dev")?;

    let mut order_rng = ChaCha8Rng::seed_from_u64(config.seed);
    order_rng.set_stream(1);
    let mut drop_rng = ChaCha8Rng::seed_from_u64(config.seed);
    drop_rng.set_stream(2);
    let mut adam = Adam::new(config.lr);
    let mut params = model.params.clone();
    let mut shadow = model.shadow.clone();

    let first = evaluate(&shadow, &dev_x, &dev_labels, config, 0)?;
    let initial_dev_loss = first.dev_loss;
    let mut best = (first.clone(), params.clone(), shadow.clone());
    let mut log = vec![first];

    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let (mut loss_sum, mut loss_n) = (0.0, 0usize);
    for step in 1..=config.max_steps {
        let mut batch = Vec::with_capacity(config.batch_size);
        while batch.len() < config.batch_size.min(train_x.len()) {
            if cursor == order.len() {
                order = (0..train_x.len()).collect();
                order.shuffle(&mut order_rng);
                cursor = 0;
            }
            batch.push(&train_x[order[cursor]]);
            cursor += 1;
        }
        let (loss, mut grad) =
            CeModel::batch_loss_grad(&params, &batch, config.label_smoothing, Some((config.dropout, &mut drop_rng)))?;
        if !loss.is_finite() || !grad.all_finite() {
            return Err(Error::Diverged { step, detail: format!("loss {loss}") });
        }
        clip_grad_norm(&mut grad, config.clip);
        adam.step(&mut params, &grad);
        ema_update(&mut shadow, &params, effective_decay(config.ema_decay, step - 1, config.ema_warmup));
        loss_sum += loss;
        loss_n += 1;
        if step % config.eval_every == 0 || step == config.max_steps {
            let mut entry = evaluate(&shadow, &dev_x, &dev_labels, config, step)?;
            if !entry.dev_loss.is_finite() {
                return Err(Error::Diverged { step, detail: "non-finite dev loss".into() });
            }
            entry.train_loss = Some(loss_sum / loss_n as f64);
            (loss_sum, loss_n) = (0.0, 0);
            let b = &best.0;
            if entry.dev_recall > b.dev_recall || (entry.dev_recall == b.dev_recall && entry.dev_loss < b.dev_loss) {
                best = (entry.clone(), params.clone(), shadow.clone());
            }
            log::debug!("ce step {step}: dev loss {:.4} recall {:.3}", entry.dev_loss, entry.dev_recall);
            log.push(entry);
        }
    }
    let (entry, live, ema) = best;
    model.params = live;
    model.shadow = ema;
    model.best_step = entry.step;
    Ok(TrainOutcome {
        model,
        log,
        best_step: entry.step,
        best_dev_recall: entry.dev_recall,
        best_dev_loss: entry.dev_loss,
        initial_dev_loss,
    })
}

/// Lattice of grid values; every other field comes from the base config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridSpec {
    pub ema_decay: Vec<f64>,
    pub layers: Vec<usize>,
    pub width: Vec<usize>,
    pub dropout: Vec<f64>,
    pub lr: Vec<f64>,
    pub label_smoothing: Vec<f64>,
    pub use_encoder_output: Vec<bool>,
    pub use_meta_features: Vec<bool>,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            ema_decay: grid::EMA_DECAY.to_vec(),
            layers: grid::LAYERS.to_vec(),
            width: grid::WIDTH.to_vec(),
            dropout: grid::DROPOUT_STEPS.to_vec(),
            lr: grid::LR.to_vec(),
            label_smoothing: grid::LABEL_SMOOTHING.to_vec(),
            use_encoder_output: vec![true, false],
            use_meta_features: vec![true, false],
        }
    }
}

impl GridSpec {
    pub fn size(&self) -> usize {
        self.ema_decay.len()
            * self.layers.len()
            * self.width.len()
            * self.dropout.len()
            * self.lr.len()
            * self.label_smoothing.len()
            * self.use_encoder_output.len()
            * self.use_meta_features.len()
    }

    /// Every grid point in a fixed order.
    pub fn lattice(&self, base: &TrainConfig) -> Vec<TrainConfig> {
        let mut out = Vec::with_capacity(self.size());
        for &ema_decay in &self.ema_decay {
            for &layers in &self.layers {
                for &width in &self.width {
                    for &dropout in &self.dropout {
                        for &lr in &self.lr {
                            for &label_smoothing in &self.label_smoothing {
                                for &use_encoder_output in &self.use_encoder_output {
                                    for &use_meta_features in &self.use_meta_features {
                                        out.push(TrainConfig {
                                            ema_decay,
                                            layers,
                                            width,
                                            dropout,
                                            lr,
                                            label_smoothing,
                                            use_encoder_output,
                                            use_meta_features,
                                            ..base.clone()
                                        });
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeaderboardEntry {
    /// Position in the lattice order.
    pub index: usize,
    pub config: TrainConfig,
    pub dev_recall: f64,
    pub best_step: usize,
    pub dev_loss: f64,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub best: TrainConfig,
    pub exhaustive: bool,
    pub leaderboard: Vec<LeaderboardEntry>,
}

/// Exhaustive when the lattice fits in `budget`, otherwise a seeded uniform
/// sample without replacement. Ranked by dev recall, then the earlier best
/// step, then lattice order. Failed trials rank last with their error.
pub fn grid_search(
    header: &FeatureHeader,
    train: &[FeatureBundle],
    dev: &[FeatureBundle],
    base: &TrainConfig,
    spec: &GridSpec,
    budget: usize,
    seed: u64,
) -> Result<SearchResult> {
    if budget == 0 {
        return Err(Error::invalid("budget must be at least 1"));
    }
    let lattice = spec.lattice(base);
    if lattice.is_empty() {
        return Err(Error::invalid("empty grid"));
    }
    let exhaustive = lattice.len() <= budget;
    let mut picked: Vec<usize> = if exhaustive {
        (0..lattice.len()).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rand::seq::index::sample(&mut rng, lattice.len(), budget).into_vec()
    };
    picked.sort_unstable();
    let mut board: Vec<LeaderboardEntry> = picked
        .into_iter()
        .map(|index| {
            let config = lattice[index].clone();
            match train_ce(header, train, dev, &config) {
                Ok(o) => LeaderboardEntry {
                    index,
                    config,
                    dev_recall: o.best_dev_recall,
                    best_step: o.best_step,
                    dev_loss: o.best_dev_loss,
                    error: None,
                },
                Err(e) => LeaderboardEntry {
                    index,
                    config,
                    dev_recall: f64::NEG_INFINITY,
                    best_step: usize::MAX,
                    dev_loss: f64::INFINITY,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    board.sort_by(|a, b| {
        b.dev_recall
            .total_cmp(&a.dev_recall)
            .then(a.best_step.cmp(&b.best_step))
            .then(a.index.cmp(&b.index))
    });
    if board.iter().all(|e| e.error.is_some()) {
        return Err(Error::invalid(format!(
            "every grid trial failed; first error: {}",
            board[0].error.as_deref().unwrap_or("")
        )));
    }
    Ok(SearchResult { best: board[0].config.clone(), exhaustive, leaderboard: board })
}
