//! Subcommands of the `cewb` binary. Every step reads and writes plain files so
//! the pipeline can be run piecewise or all at once with `pipeline`.

use std::io::Write;
use std::path::{Path, PathBuf};

use cewb_core::annotation::{analytics_report, load_rating_log, Metric, Pool};
use cewb_core::cemodel::{grid_search, naive_model_fit, train_ce, CeModel, GridSpec, NaiveModel, TrainConfig};
use cewb_core::checkpoint::Checkpoint;
use cewb_core::datakit::{generate_corpus, load_dataset, parse_fractions, split_dataset, write_dataset, CorpusSpec, Origin};
use cewb_core::eval::{evaluate, load_scores, write_pr_tsv, write_scores, ScoreRecord};
use cewb_core::features::{read_features, write_features, ExtractConfig, Extractor, FeatureBundle};
use cewb_core::glassbox::{corpus_perplexity, train_lm, train_seq2seq, translate, LanguageModel, LmConfig, Seq2SeqConfig, Seq2SeqModel};
use cewb_core::pipeline::{oracle_label, run_pipeline, PipelineConfig};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::campaign::Campaign;
use crate::http::{serve, AppState};

pub type CliResult<T = ()> = Result<T, Box<dyn std::error::Error + Send + Sync>>;

#[derive(Parser, Debug)]
#[command(name = "cewb", version, about = "Confidence estimation workbench for machine translation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic parallel corpus.
    GenCorpus {
        /// Corpus spec JSON; defaults are used when absent.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Reassign origin tags, e.g. `--fractions ce_dev=0.5,ce_test=0.5`.
    Split {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        fractions: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the translator on the `mt_train` pairs.
    TrainMt {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a source-side LM; with `--init` the base LM is adapted in place.
    TrainLm {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "mt_train")]
        origin: String,
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Greedy-translate pairs, replacing their targets.
    Translate {
        #[arg(long)]
        mt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Origins to translate; all but `mt_train` by default.
        #[arg(long, value_delimiter = ',')]
        origins: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        /// JSONL of `{id, trace}` glass-box records.
        #[arg(long)]
        trace_out: Option<PathBuf>,
    },
    /// Perplexity of an LM on the sources of a dataset.
    Ppl {
        #[arg(long)]
        lm: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        origin: Option<String>,
    },
    ExtractFeatures(ExtractArgs),
    /// Train the CE model on extracted features.
    TrainCe {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        dev: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0.95)]
        target_precision: f64,
        #[arg(long)]
        unrestricted: bool,
        #[arg(long)]
        out: PathBuf,
        /// Training log (JSON).
        #[arg(long)]
        log_out: Option<PathBuf>,
    },
    /// Search CE hyper-parameters on dev Recall@Precision.
    GridSearch {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        dev: PathBuf,
        /// Base config for the fields the grid does not cover.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Grid JSON; the full lattice by default.
        #[arg(long)]
        grid: Option<PathBuf>,
        #[arg(long, default_value_t = 32)]
        budget: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.95)]
        target_precision: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a feature file with a CE checkpoint or the naive logP model.
    Predict {
        #[arg(long)]
        features: PathBuf,
        #[arg(long, conflicts_with = "naive")]
        ce: Option<PathBuf>,
        /// Naive model JSON as written by `fit-naive`.
        #[arg(long)]
        naive: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the two-feature naive logP baseline.
    FitNaive {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Recall at fixed precision with the threshold chosen on dev.
    Eval {
        #[arg(long, default_value_t = 0.95)]
        target_precision: f64,
        #[arg(long)]
        dev: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long, default_value = "model")]
        name: String,
        #[arg(long)]
        pr_out: Option<PathBuf>,
    },
    /// Analytics over a rating log.
    Report {
        #[arg(long)]
        ratings: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "sacc,alpha,entropy,bootstrap,error-model")]
        metrics: Vec<String>,
        #[arg(long, default_value_t = 3)]
        n: usize,
        #[arg(long, value_enum, default_value_t = PoolArg::NonExpert)]
        pool: PoolArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Create a campaign directory from a dataset.
    CampaignInit {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        origin: Option<String>,
        #[arg(long)]
        id: String,
        #[arg(long, default_value_t = 3)]
        target: usize,
        #[arg(long, value_enum, default_value_t = PoolArg::NonExpert)]
        pool: PoolArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fill a campaign with simulated annotators.
    Simulate {
        #[arg(long)]
        campaign: PathBuf,
        #[arg(long, default_value_t = 5)]
        annotators: usize,
        #[arg(long, default_value_t = 0.1)]
        error_rate: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Serve campaigns over HTTP.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, required = true)]
        campaign: Vec<PathBuf>,
        #[arg(long)]
        ui_dir: Option<PathBuf>,
    },
    /// Corpus, translator, LMs, features, CE and baselines in one run.
    Pipeline {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Debug)]
/// Extract glass-box feature bundles for one split.
pub struct ExtractArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "ce_train")]
    pub origin: String,
    #[arg(long)]
    pub mt_model: PathBuf,
    /// Add the source-side encoder block.
    #[arg(long)]
    pub mt: bool,
    /// Add the source LM block (needs `--base-lm`).
    #[arg(long)]
    pub lm: bool,
    /// Add adapted-LM features to the LM block (needs `--adapted-lm`).
    #[arg(long)]
    pub contrastive: bool,
    #[arg(long)]
    pub base_lm: Option<PathBuf>,
    #[arg(long)]
    pub adapted_lm: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub mc_runs: usize,
    #[arg(long)]
    pub mc_dropout: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub mc_seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum PoolArg {
    NonExpert,
    Expert,
    Oracle,
    Simulated,
}

impl From<PoolArg> for Pool {
    fn from(p: PoolArg) -> Pool {
        match p {
            PoolArg::NonExpert => Pool::NonExpert,
            PoolArg::Expert => Pool::Expert,
            PoolArg::Oracle => Pool::Oracle,
            PoolArg::Simulated => Pool::Simulated,
        }
    }
}

fn read_json<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    Ok(serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?)
}

fn read_json_or_default<T: DeserializeOwned + Default>(path: Option<&PathBuf>) -> CliResult<T> {
    path.map_or_else(|| Ok(T::default()), |p| read_json(p))
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> CliResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, serde_json::to_vec_pretty(value)?)?;
    Ok(())
}

fn print_json<T: Serialize>(value: &T) -> CliResult {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn load_mt(path: &Path) -> CliResult<Seq2SeqModel> {
    Ok(Seq2SeqModel::from_checkpoint(&Checkpoint::load(path)?)?)
}

fn load_lm(path: &Path) -> CliResult<LanguageModel> {
    Ok(LanguageModel::from_checkpoint(&Checkpoint::load(path)?)?)
}

fn labels_of(bundles: &[FeatureBundle]) -> CliResult<Vec<cewb_core::Label>> {
    bundles
        .iter()
        .map(|b| b.label.ok_or_else(|| format!("bundle {} has no label", b.id).into()))
        .collect()
}

pub fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::GenCorpus { spec, out } => {
            let spec: CorpusSpec = read_json_or_default(spec.as_ref())?;
            let ds = generate_corpus(&spec)?;
            std::fs::create_dir_all(&out)?;
            write_dataset(&ds, &out.join("corpus.jsonl"))?;
            write_json(&spec, &out.join("corpus-spec.json"))?;
            log::info!("wrote {} pairs to {}", ds.len(), out.display());
        }
        Command::Split { data, fractions, seed, out } => {
            let ds = split_dataset(&load_dataset(&data)?, &parse_fractions(&fractions)?, seed)?;
            write_dataset(&ds, &out)?;
            let counts: Vec<_> = Origin::ALL.iter().map(|o| (o.as_str(), ds.count(*o))).collect();
            log::info!("split counts {counts:?}");
        }
        Command::TrainMt { data, config, out } => {
            let cfg: Seq2SeqConfig = read_json_or_default(config.as_ref())?;
            let ds = load_dataset(&data)?;
            let pairs: Vec<_> = ds.with_origin(Origin::MtTrain).cloned().collect();
            let (model, log) = train_seq2seq(&pairs, &cfg)?;
            model.to_checkpoint().save(&out)?;
            print_json(&log.epoch_loss)?;
        }
        Command::TrainLm { data, origin, init, config, out } => {
            let cfg: LmConfig = read_json_or_default(config.as_ref())?;
            let ds = load_dataset(&data)?;
            let origin: Origin = origin.parse()?;
            let sources: Vec<Vec<String>> = ds.with_origin(origin).map(|p| p.source.clone()).collect();
            let base = init.as_deref().map(load_lm).transpose()?;
            let lm = train_lm(&sources, base.as_ref().map(|b| &b.vocab), &cfg, base.as_ref())?;
            lm.to_checkpoint().save(&out)?;
        }
        Command::Translate { mt, data, origins, out, trace_out } => {
            let model = load_mt(&mt)?;
            let mut ds = load_dataset(&data)?;
            let origins: Vec<Origin> = if origins.is_empty() {
                vec![Origin::CeTrain, Origin::CeDev, Origin::CeTest]
            } else {
                origins.iter().map(|o| o.parse()).collect::<Result<_, _>>()?
            };
            let mut traces = trace_out.as_deref().map(std::fs::File::create).transpose()?.map(std::io::BufWriter::new);
            for p in ds.pairs.iter_mut().filter(|p| origins.contains(&p.origin)) {
                let (target, trace) = translate(&model, &p.source)?;
                p.target = target;
                if let Some(w) = traces.as_mut() {
                    serde_json::to_writer(&mut *w, &serde_json::json!({ "id": p.id, "trace": trace }))?;
                    w.write_all(b"\n")?;
                }
            }
            if let Some(mut w) = traces {
                w.flush()?;
            }
            write_dataset(&ds, &out)?;
        }
        Command::Ppl { lm, data, origin } => {
            let lm = load_lm(&lm)?;
            let ds = load_dataset(&data)?;
            let origin: Option<Origin> = origin.map(|o| o.parse()).transpose()?;
            let sources: Vec<Vec<String>> =
                ds.pairs.iter().filter(|p| origin.is_none_or(|o| p.origin == o)).map(|p| p.source.clone()).collect();
            println!("{}", corpus_perplexity(&lm, &sources)?);
        }
        Command::ExtractFeatures(a) => extract(a)?,
        Command::TrainCe { train, dev, config, target_precision, unrestricted, out, log_out } => {
            let mut cfg: TrainConfig = read_json_or_default(config.as_ref())?;
            cfg.target_precision = target_precision;
            cfg.unrestricted |= unrestricted;
            let (header, train) = read_features(&train)?;
            let (dev_header, dev) = read_features(&dev)?;
            if dev_header != header {
                return Err("train and dev feature headers differ".into());
            }
            let outcome = train_ce(&header, &train, &dev, &cfg)?;
            outcome.model.to_checkpoint().save(&out)?;
            if let Some(p) = log_out {
                write_json(&outcome.log, &p)?;
            }
            print_json(&serde_json::json!({
                "best_step": outcome.best_step,
                "best_dev_recall": outcome.best_dev_recall,
                "best_dev_loss": outcome.best_dev_loss,
                "initial_dev_loss": outcome.initial_dev_loss,
            }))?;
        }
        Command::GridSearch { train, dev, config, grid, budget, seed, target_precision, out } => {
            let mut base: TrainConfig = read_json_or_default(config.as_ref())?;
            base.target_precision = target_precision;
            let spec: GridSpec = read_json_or_default(grid.as_ref())?;
            let (header, train) = read_features(&train)?;
            let (_, dev) = read_features(&dev)?;
            let result = grid_search(&header, &train, &dev, &base, &spec, budget, seed)?;
            match out {
                Some(p) => write_json(&result, &p)?,
                None => print_json(&result)?,
            }
        }
        Command::Predict { features, ce, naive, out } => {
            let (_, bundles) = read_features(&features)?;
            let scores = match (ce, naive) {
                (Some(ce), None) => CeModel::from_checkpoint(&Checkpoint::load(&ce)?)?.predict_all(&bundles, true)?,
                (None, Some(naive)) => {
                    let m: NaiveModel = read_json(&naive)?;
                    m.predict(&bundles.iter().map(|b| b.naive_logp).collect::<Vec<_>>())
                }
                _ => return Err("exactly one of --ce or --naive is required".into()),
            };
            let labels = labels_of(&bundles)?;
            let records: Vec<ScoreRecord> = bundles
                .iter()
                .zip(scores)
                .zip(labels)
                .map(|((b, score), label)| ScoreRecord { id: b.id.clone(), score, label })
                .collect();
            write_scores(&records, &out)?;
        }
        Command::FitNaive { train, out } => {
            let (_, bundles) = read_features(&train)?;
            let xs: Vec<f64> = bundles.iter().map(|b| b.naive_logp).collect();
            let model = naive_model_fit(&xs, &labels_of(&bundles)?)?;
            write_json(&model, &out)?;
        }
        Command::Eval { target_precision, dev, test, name, pr_out } => {
            let report = evaluate(&name, &load_scores(&dev)?, &load_scores(&test)?, target_precision, None)?;
            if let Some(p) = pr_out {
                write_pr_tsv(&report.pr_points, &p)?;
            }
            print_json(&report)?;
        }
        Command::Report { ratings, metrics, n, pool, seed } => {
            let log = load_rating_log(&ratings, pool.into())?;
            let metrics: Vec<Metric> = metrics.iter().map(|m| m.parse()).collect::<Result<_, _>>()?;
            print_json(&analytics_report(&log, &metrics, n, seed))?;
        }
        Command::CampaignInit { data, origin, id, target, pool, out } => {
            let mut ds = load_dataset(&data)?;
            if let Some(o) = origin {
                ds = ds.subset(o.parse()?);
            }
            let c = Campaign::create(&out, &id, &ds, target, pool.into())?;
            print_json(&c.progress())?;
        }
        Command::Simulate { campaign, annotators, error_rate, seed } => {
            let mut c = Campaign::open(&campaign)?;
            let added = c.simulate(annotators, error_rate, seed)?;
            log::info!("recorded {added} simulated submissions");
            print_json(&c.progress())?;
        }
        Command::Serve { port, campaign, ui_dir } => {
            let campaigns = campaign.iter().map(|d| Campaign::open(d)).collect::<Result<Vec<_>, _>>()?;
            let state = AppState::new(campaigns);
            tokio::runtime::Builder::new_multi_thread()
                .enable_all()
                .build()?
                .block_on(serve(state, ui_dir.as_deref(), port))?;
        }
        Command::Pipeline { config, out } => {
            let cfg: PipelineConfig = read_json_or_default(config.as_ref())?;
            let report = run_pipeline(&cfg, Some(&out))?;
            let mut summary = serde_json::to_value(&report)?;
            for k in ["baseline", "naive"] {
                if let Some(m) = summary.get_mut(k).and_then(|v| v.as_object_mut()) {
                    m.remove("pr_points");
                }
            }
            print_json(&summary)?;
        }
    }
    Ok(())
}

fn extract(a: ExtractArgs) -> CliResult {
    let mt = load_mt(&a.mt_model)?;
    let base = a.base_lm.as_deref().map(load_lm).transpose()?;
    let adapted = a.adapted_lm.as_deref().map(load_lm).transpose()?;
    let config = ExtractConfig {
        include_encoder: a.mt,
        lm: a.lm,
        contrastive: a.contrastive,
        mc_runs: a.mc_runs,
        mc_dropout: a.mc_dropout,
        mc_seed: a.mc_seed,
    };
    let mut ex = Extractor::new(&mt, config);
    if let Some(b) = base.as_ref() {
        ex = ex.with_lms(b, adapted.as_ref());
    }
    let header = ex.header()?;
    let ds = load_dataset(&a.data)?;
    let pairs: Vec<_> = ds.with_origin(a.origin.parse()?).cloned().collect();
    let labels: Vec<_> = pairs.iter().map(oracle_label).collect();
    let bundles = ex.extract_all(&pairs, &labels)?;
    write_features(&header, &bundles, &a.out)?;
    log::info!("wrote {} bundles to {}", bundles.len(), a.out.display());
    Ok(())
}
