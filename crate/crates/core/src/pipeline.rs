//! Seeded end-to-end run: corpus, translator, oracle labels, features, CE
//! and naive models, evaluation, plus the LM domain diagnostic.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::annotation::{oracle_ratings, sacc, write_rating_log};
use crate::cemodel::{naive_model_fit, train_ce, NaiveModel, TrainConfig};
use crate::datakit::{generate_corpus, write_dataset, CorpusSpec, Dataset, Domain, Metadata, Origin, SentencePair};
use crate::error::{Error, Result};
use crate::eval::{evaluate, write_pr_tsv, write_scores, EvalReport, ScoreRecord, ScoredSet};
use crate::features::{write_features, ExtractConfig, Extractor, FeatureBundle};
use crate::glassbox::{corpus_perplexity, train_lm, train_seq2seq, translate, LanguageModel, LmConfig, Seq2SeqConfig};
use crate::Label;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub corpus: CorpusSpec,
    pub mt: Seq2SeqConfig,
    pub lm: LmConfig,
    /// Continued training of the base LM on CE training sources.
    pub lm_adapt: LmConfig,
    pub extract: ExtractConfig,
    pub ce: TrainConfig,
    pub target_precision: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            corpus: CorpusSpec {
                sizes: [(Origin::MtTrain, 8000), (Origin::CeTrain, 6000), (Origin::CeDev, 1200), (Origin::CeTest, 1200)]
                    .into_iter()
                    .collect(),
                ..CorpusSpec::default()
            },
            mt: Seq2SeqConfig { epochs: 20, ..Seq2SeqConfig::default() },
            lm: LmConfig::default(),
            lm_adapt: LmConfig { epochs: 1, lr: 1e-3, ..LmConfig::default() },
            extract: ExtractConfig { include_encoder: true, lm: true, contrastive: true, mc_runs: 4, mc_dropout: None, mc_seed: 0 },
            ce: TrainConfig {
                width: 16,
                layers: 1,
                lr: 2e-3,
                dropout: 0.3,
                unrestricted: true,
                max_steps: 3000,
                batch_size: 32,
                eval_every: 100,
                ..TrainConfig::default()
            },
            target_precision: 0.95,
        }
    }
}

/// Held-out perplexities of the base and adapted LMs, split by domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmDiagnostic {
    pub base_in_domain: f64,
    pub adapted_in_domain: f64,
    pub base_out_of_domain: f64,
    pub adapted_out_of_domain: f64,
    /// `(adapted - base) / base` on in-domain sources.
    pub in_domain_relative_change: f64,
}

impl LmDiagnostic {
    pub fn out_of_domain_improves(&self) -> bool {
        self.adapted_out_of_domain < self.base_out_of_domain
    }

    pub fn in_domain_stable(&self, tolerance: f64) -> bool {
        self.in_domain_relative_change.abs() < tolerance
    }
}

pub fn lm_domain_diagnostic(base: &LanguageModel, adapted: &LanguageModel, held_out: &[SentencePair]) -> Result<LmDiagnostic> {
    let by = |d: Domain| -> Vec<Vec<String>> {
        held_out.iter().filter(|p| p.domain == d).map(|p| p.source.clone()).collect()
    };
    let (ind, ood) = (by(Domain::InDomain), by(Domain::OutOfDomain));
    if ind.is_empty() || ood.is_empty() {
        return Err(Error::invalid("diagnostic needs in-domain and out-of-domain held-out sources"));
    }
    let base_in_domain = corpus_perplexity(base, &ind)?;
    let adapted_in_domain = corpus_perplexity(adapted, &ind)?;
    Ok(LmDiagnostic {
        base_in_domain,
        adapted_in_domain,
        base_out_of_domain: corpus_perplexity(base, &ood)?,
        adapted_out_of_domain: corpus_perplexity(adapted, &ood)?,
        in_domain_relative_change: (adapted_in_domain - base_in_domain) / base_in_domain,
    })
}

/// Trains the base LM on translator-training sources and adapts a copy on
/// CE training sources.
pub fn train_lm_pair(ds: &Dataset, base_cfg: &LmConfig, adapt_cfg: &LmConfig) -> Result<(LanguageModel, LanguageModel)> {
    let sources = |o: Origin| -> Vec<Vec<String>> { ds.with_origin(o).map(|p| p.source.clone()).collect() };
    let base = train_lm(&sources(Origin::MtTrain), None, base_cfg, None)?;
    let adapted = train_lm(&sources(Origin::CeTrain), Some(&base.vocab), adapt_cfg, Some(&base))?;
    Ok((base, adapted))
}

/// Replaces each CE pair's target with the translator's output; the oracle
/// reference is kept.
pub fn translate_ce(model: &crate::glassbox::Seq2SeqModel, ds: &Dataset) -> Result<Dataset> {
    let mut out = ds.clone();
    for p in out.pairs.iter_mut().filter(|p| p.origin != Origin::MtTrain) {
        p.target = translate(model, &p.source)?.0;
    }
    Ok(out)
}

pub fn oracle_label(p: &SentencePair) -> Option<Label> {
    p.matches_reference().map(|ok| if ok { Label::Good } else { Label::NeedsWork })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub origin: Origin,
    pub samples: usize,
    /// SACC under oracle exact-match labels.
    pub sacc: f64,
    pub sacc_in_domain: f64,
    pub sacc_out_of_domain: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub config: PipelineConfig,
    pub mt_epoch_loss: Vec<f64>,
    pub splits: Vec<SplitSummary>,
    pub baseline: EvalReport,
    pub naive: EvalReport,
    pub naive_model: NaiveModel,
    pub baseline_beats_naive: bool,
    pub lm_diagnostic: Option<LmDiagnostic>,
    pub seconds: Vec<(String, f64)>,
}

fn split_summary(ds: &Dataset, origin: Origin) -> Result<SplitSummary> {
    let pairs: Vec<&SentencePair> = ds.with_origin(origin).collect();
    let rate = |f: &dyn Fn(&SentencePair) -> bool| -> f64 {
        let sel: Vec<_> = pairs.iter().filter(|p| f(p)).collect();
        if sel.is_empty() {
            return f64::NAN;
        }
        sel.iter().filter(|p| p.matches_reference() == Some(true)).count() as f64 / sel.len() as f64
    };
    let sub = ds.subset(origin);
    Ok(SplitSummary {
        origin,
        samples: pairs.len(),
        sacc: sacc(&oracle_ratings(&sub), 1)?,
        sacc_in_domain: rate(&|p| p.domain == Domain::InDomain),
        sacc_out_of_domain: rate(&|p| p.domain == Domain::OutOfDomain),
    })
}

fn scored(ids: &[FeatureBundle], scores: Vec<f64>) -> Result<ScoredSet> {
    ScoredSet::new(scores, ids.iter().map(|b| b.label.expect("oracle label")).collect())
}

/// Runs everything; artifacts are written under `out_dir` when given.
pub fn run_pipeline(cfg: &PipelineConfig, out_dir: Option<&Path>) -> Result<PipelineReport> {
    let mut seconds = Vec::new();
    let mut clock = Instant::now();
    let mut lap = |name: &str, seconds: &mut Vec<(String, f64)>| {
        seconds.push((name.to_string(), clock.elapsed().as_secs_f64()));
        log::info!("pipeline: {name} done in {:.1}s", clock.elapsed().as_secs_f64());
        clock = Instant::now();
    };

    let corpus = generate_corpus(&cfg.corpus)?;
    let mt_train: Vec<SentencePair> = corpus.with_origin(Origin::MtTrain).cloned().collect();
    let (mt, mt_log) = train_seq2seq(&mt_train, &cfg.mt)?;
    lap("train-mt", &mut seconds);

    let ds = translate_ce(&mt, &corpus)?;
    lap("translate", &mut seconds);
    let splits = [Origin::CeTrain, Origin::CeDev, Origin::CeTest]
        .into_iter()
        .map(|o| split_summary(&ds, o))
        .collect::<Result<Vec<_>>>()?;

    let lms = if cfg.extract.lm { Some(train_lm_pair(&ds, &cfg.lm, &cfg.lm_adapt)?) } else { None };
    let lm_diagnostic = match &lms {
        Some((base, adapted)) => {
            let held: Vec<SentencePair> = ds.with_origin(Origin::CeTest).cloned().collect();
            Some(lm_domain_diagnostic(base, adapted, &held)?)
        }
        None => None,
    };
    lap("train-lm", &mut seconds);

    let mut extractor = Extractor::new(&mt, cfg.extract.clone());
    if let Some((base, adapted)) = &lms {
        extractor = extractor.with_lms(base, cfg.extract.contrastive.then_some(adapted));
    }
    let header = extractor.header()?;
    let bundles = |o: Origin| -> Result<Vec<FeatureBundle>> {
        let pairs: Vec<SentencePair> = ds.with_origin(o).cloned().collect();
        let labels: Vec<Option<Label>> = pairs.iter().map(oracle_label).collect();
        extractor.extract_all(&pairs, &labels)
    };
    let (train, dev, test) = (bundles(Origin::CeTrain)?, bundles(Origin::CeDev)?, bundles(Origin::CeTest)?);
    lap("extract-features", &mut seconds);

    let ce_cfg = TrainConfig { target_precision: cfg.target_precision, ..cfg.ce.clone() };
    let outcome = train_ce(&header, &train, &dev, &ce_cfg)?;
    let model = &outcome.model;
    let baseline = evaluate(
        "baseline",
        &scored(&dev, model.predict_all(&dev, true)?)?,
        &scored(&test, model.predict_all(&test, true)?)?,
        cfg.target_precision,
        Some(outcome.best_step),
    )?;
    lap("train-ce", &mut seconds);

    let naive_x = |b: &[FeatureBundle]| -> Vec<f64> { b.iter().map(|x| x.naive_logp).collect() };
    let train_labels: Vec<Label> = train.iter().map(|b| b.label.expect("oracle label")).collect();
    let naive_model = naive_model_fit(&naive_x(&train), &train_labels)?;
    let naive = evaluate(
        "naive-logp",
        &scored(&dev, naive_model.predict(&naive_x(&dev)))?,
        &scored(&test, naive_model.predict(&naive_x(&test)))?,
        cfg.target_precision,
        None,
    )?;
    lap("naive", &mut seconds);

    let report = PipelineReport {
        config: cfg.clone(),
        mt_epoch_loss: mt_log.epoch_loss,
        splits,
        baseline_beats_naive: baseline.test_recall_at_threshold > naive.test_recall_at_threshold,
        baseline,
        naive,
        naive_model,
        lm_diagnostic,
        seconds,
    };

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        write_dataset(&ds, &dir.join("corpus.jsonl"))?;
        mt.to_checkpoint().save(&dir.join("mt.ckpt"))?;
        if let Some((base, adapted)) = &lms {
            base.to_checkpoint().save(&dir.join("lm-base.ckpt"))?;
            adapted.to_checkpoint().save(&dir.join("lm-adapted.ckpt"))?;
        }
        for (name, b) in [("train", &train), ("dev", &dev), ("test", &test)] {
            write_features(&header, b, &dir.join(format!("features-{name}.bin")))?;
        }
        model.to_checkpoint().save(&dir.join("ce.ckpt"))?;
        let test_scores: Vec<ScoreRecord> = test
            .iter()
            .zip(model.predict_all(&test, true)?)
            .map(|(b, score)| ScoreRecord { id: b.id.clone(), score, label: b.label.expect("oracle label") })
            .collect();
        write_scores(&test_scores, &dir.join("scores-test.jsonl"))?;
        write_pr_tsv(&report.baseline.pr_points, &dir.join("pr-baseline.tsv"))?;
        write_pr_tsv(&report.naive.pr_points, &dir.join("pr-naive.tsv"))?;
        let ce_pairs = Dataset {
            pairs: ds.pairs.iter().filter(|p| p.origin != Origin::MtTrain).cloned().collect(),
            metadata: Metadata::Note("translated CE splits".into()),
        };
        write_rating_log(&oracle_ratings(&ce_pairs), &dir.join("oracle-ratings.jsonl"))?;
        std::fs::write(dir.join("ce-train-log.json"), serde_json::to_vec_pretty(&outcome.log)?)?;
        std::fs::write(dir.join("report.json"), serde_json::to_vec_pretty(&report)?)?;
    }
    Ok(report)
}
