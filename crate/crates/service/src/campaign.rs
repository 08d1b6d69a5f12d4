//! Annotation campaigns persisted as a directory:
//!
//! - `campaign.json`: id, rating target, pool and the work-item partition
//! - `dataset.jsonl`: the sentence pairs under annotation
//! - `ratings.log`: append-only, one JSON line per submission of 6 labels
//!
//! Submissions are newline-terminated lines written with one `write_all` and
//! synced, so after a crash a submission is either complete or part of a torn
//! tail after the last newline, which opening truncates away.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use cewb_core::annotation::{analytics_report, AnalyticsReport, Metric, Pool, Rating, RatingLog};
use cewb_core::datakit::{load_dataset, write_dataset, Dataset, SentencePair};
use cewb_core::Label;
use chrono::{DateTime, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const PAIRS_PER_ITEM: usize = 6;
const CONFIG_FILE: &str = "campaign.json";
const DATASET_FILE: &str = "dataset.jsonl";
const LOG_FILE: &str = "ratings.log";

#[derive(Debug, thiserror::Error)]
pub enum CampaignError {
    #[error("unknown work item {0}")]
    UnknownItem(String),
    #[error("expected {expected} labels, got {got}")]
    Arity { expected: usize, got: usize },
    #[error("annotator {annotator} already submitted different labels for {work_item}")]
    Conflict { annotator: String, work_item: String },
    #[error("invalid campaign: {0}")]
    Invalid(String),
    #[error(transparent)]
    Core(#[from] cewb_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = CampaignError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemDef {
    pub id: String,
    pub samples: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CampaignConfig {
    pub id: String,
    /// Odd number of ratings wanted per work item.
    pub target_ratings: usize,
    pub pool: Pool,
    pub created: DateTime<Utc>,
    pub items: Vec<ItemDef>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CampaignState {
    Open,
    Complete,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairView {
    pub sample_id: String,
    pub source: String,
    pub target: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkItem {
    pub id: String,
    pub pairs: Vec<PairView>,
    pub ratings: usize,
    pub target_ratings: usize,
}

/// One line of the rating log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Submission {
    pub annotator: String,
    pub work_item: String,
    pub labels: Vec<Label>,
    pub timestamp: DateTime<Utc>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ack {
    pub work_item: String,
    pub annotator: String,
    /// False when an identical submission was already recorded.
    pub recorded: bool,
    pub item_ratings: usize,
    pub state: CampaignState,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub id: String,
    pub state: CampaignState,
    pub items: usize,
    pub complete_items: usize,
    pub target_ratings: usize,
    pub submissions: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CampaignReport {
    pub progress: Progress,
    pub analytics: AnalyticsReport,
}

pub struct Campaign {
    dir: PathBuf,
    pub config: CampaignConfig,
    pairs: HashMap<String, SentencePair>,
    /// `(work_item, annotator) -> labels`
    submissions: BTreeMap<(String, String), Vec<Label>>,
    counts: Vec<usize>,
    rated_by: HashMap<String, HashSet<usize>>,
    item_index: HashMap<String, usize>,
    log: RatingLog,
}

fn join_tokens(t: &[String]) -> String {
    t.join(" ")
}

impl Campaign {
    /// Partitions `ds` into work items of 6 pairs in file order and writes a
    /// new campaign directory. Pairs past the last full item are left out.
    pub fn create(dir: &Path, id: &str, ds: &Dataset, target_ratings: usize, pool: Pool) -> Result<Campaign> {
        if target_ratings == 0 || target_ratings % 2 == 0 {
            return Err(CampaignError::Invalid(format!("target ratings {target_ratings} must be odd")));
        }
        if ds.pairs.len() < PAIRS_PER_ITEM {
            return Err(CampaignError::Invalid(format!("need at least {PAIRS_PER_ITEM} pairs")));
        }
        if dir.join(CONFIG_FILE).exists() {
            return Err(CampaignError::Invalid(format!("{} already holds a campaign", dir.display())));
        }
        let items: Vec<ItemDef> = ds
            .pairs
            .chunks_exact(PAIRS_PER_ITEM)
            .enumerate()
            .map(|(i, c)| ItemDef { id: format!("wi-{i:05}"), samples: c.iter().map(|p| p.id.clone()).collect() })
            .collect();
        let left = ds.pairs.len() % PAIRS_PER_ITEM;
        if left > 0 {
            log::warn!("{left} trailing pairs do not fill a work item and are left out");
        }
        std::fs::create_dir_all(dir)?;
        let config = CampaignConfig { id: id.to_string(), target_ratings, pool, created: Utc::now(), items };
        write_dataset(ds, &dir.join(DATASET_FILE))?;
        File::create(dir.join(LOG_FILE))?;
        let tmp = dir.join(format!("{CONFIG_FILE}.tmp"));
        std::fs::write(&tmp, serde_json::to_vec_pretty(&config)?)?;
        std::fs::rename(&tmp, dir.join(CONFIG_FILE))?;
        Campaign::open(dir)
    }

    /// Loads a campaign, replaying its rating log.
    pub fn open(dir: &Path) -> Result<Campaign> {
        let config: CampaignConfig = serde_json::from_slice(&std::fs::read(dir.join(CONFIG_FILE))?)?;
        let ds = load_dataset(&dir.join(DATASET_FILE))?;
        let pairs: HashMap<String, SentencePair> = ds.pairs.into_iter().map(|p| (p.id.clone(), p)).collect();
        for item in &config.items {
            if item.samples.len() != PAIRS_PER_ITEM {
                return Err(CampaignError::Invalid(format!("item {} has {} pairs", item.id, item.samples.len())));
            }
            if let Some(s) = item.samples.iter().find(|s| !pairs.contains_key(*s)) {
                return Err(CampaignError::Invalid(format!("item {} references unknown sample {s}", item.id)));
            }
        }
        let item_index = config.items.iter().enumerate().map(|(i, it)| (it.id.clone(), i)).collect();
        let mut c = Campaign {
            dir: dir.to_path_buf(),
            counts: vec![0; config.items.len()],
            rated_by: HashMap::new(),
            log: RatingLog::new(config.pool),
            config,
            pairs,
            submissions: BTreeMap::new(),
            item_index,
        };
        let path = dir.join(LOG_FILE);
        if path.exists() {
            let bytes = std::fs::read(&path)?;
            let complete = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
            if complete < bytes.len() {
                log::warn!("dropping a torn trailing record of {} bytes in {}", bytes.len() - complete, path.display());
                OpenOptions::new().write(true).open(&path)?.set_len(complete as u64)?;
            }
            for line in bytes[..complete].split(|&b| b == b'\n') {
                if line.iter().all(u8::is_ascii_whitespace) {
                    continue;
                }
                c.apply(serde_json::from_slice::<Submission>(line)?)?;
            }
        }
        Ok(c)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn item(&self, id: &str) -> Result<usize> {
        self.item_index.get(id).copied().ok_or_else(|| CampaignError::UnknownItem(id.to_string()))
    }

    fn apply(&mut self, s: Submission) -> Result<()> {
        let idx = self.item(&s.work_item)?;
        if s.labels.len() != PAIRS_PER_ITEM {
            return Err(CampaignError::Arity { expected: PAIRS_PER_ITEM, got: s.labels.len() });
        }
        for (sample, label) in self.config.items[idx].samples.iter().zip(&s.labels) {
            self.log.insert(Rating {
                sample_id: sample.clone(),
                annotator_id: s.annotator.clone(),
                label: *label,
                timestamp: s.timestamp,
            })?;
        }
        self.counts[idx] += 1;
        self.rated_by.entry(s.annotator.clone()).or_default().insert(idx);
        self.submissions.insert((s.work_item, s.annotator), s.labels);
        Ok(())
    }

    pub fn state(&self) -> CampaignState {
        if self.counts.iter().all(|&c| c >= self.config.target_ratings) {
            CampaignState::Complete
        } else {
            CampaignState::Open
        }
    }

    fn view(&self, idx: usize) -> WorkItem {
        let def = &self.config.items[idx];
        WorkItem {
            id: def.id.clone(),
            pairs: def
                .samples
                .iter()
                .map(|s| {
                    let p = &self.pairs[s];
                    PairView { sample_id: s.clone(), source: join_tokens(&p.source), target: join_tokens(&p.target) }
                })
                .collect(),
            ratings: self.counts[idx],
            target_ratings: self.config.target_ratings,
        }
    }

    pub fn work_item(&self, id: &str) -> Result<WorkItem> {
        Ok(self.view(self.item(id)?))
    }

    /// An item this annotator has not rated that is still below target,
    /// furthest from target first (lowest index on ties).
    pub fn next_work_item(&self, annotator: &str) -> Option<WorkItem> {
        self.eligible(annotator).first().map(|&i| self.view(i))
    }

    /// Eligible item indices for `annotator` in serving order.
    fn eligible(&self, annotator: &str) -> Vec<usize> {
        let target = self.config.target_ratings;
        let rated = self.rated_by.get(annotator);
        let mut items: Vec<usize> = (0..self.config.items.len())
            .filter(|&i| self.counts[i] < target && !rated.is_some_and(|r| r.contains(&i)))
            .collect();
        items.sort_by_key(|&i| (self.counts[i], i));
        items
    }

    /// Records 6 labels; an identical resubmission is acknowledged without
    /// writing, a differing one is a conflict.
    pub fn submit(&mut self, annotator: &str, work_item: &str, labels: &[Label]) -> Result<Ack> {
        let idx = self.item(work_item)?;
        if labels.len() != PAIRS_PER_ITEM {
            return Err(CampaignError::Arity { expected: PAIRS_PER_ITEM, got: labels.len() });
        }
        if annotator.trim().is_empty() {
            return Err(CampaignError::Invalid("empty annotator id".into()));
        }
        let key = (work_item.to_string(), annotator.to_string());
        if let Some(prev) = self.submissions.get(&key) {
            if prev.as_slice() != labels {
                return Err(CampaignError::Conflict { annotator: annotator.into(), work_item: work_item.into() });
            }
            return Ok(self.ack(idx, annotator, false));
        }
        self.append(vec![Submission {
            annotator: annotator.to_string(),
            work_item: work_item.to_string(),
            labels: labels.to_vec(),
            timestamp: Utc::now(),
        }])?;
        Ok(self.ack(idx, annotator, true))
    }

    /// Writes pre-validated submissions in one append and sync.
    fn append(&mut self, subs: Vec<Submission>) -> Result<()> {
        let mut buf = Vec::new();
        for s in &subs {
            serde_json::to_writer(&mut buf, s)?;
            buf.push(b'\n');
        }
        let mut f = OpenOptions::new().append(true).create(true).open(self.dir.join(LOG_FILE))?;
        f.write_all(&buf)?;
        f.sync_data()?;
        for s in subs {
            self.apply(s)?;
        }
        Ok(())
    }

    fn ack(&self, idx: usize, annotator: &str, recorded: bool) -> Ack {
        Ack {
            work_item: self.config.items[idx].id.clone(),
            annotator: annotator.to_string(),
            recorded,
            item_ratings: self.counts[idx],
            state: self.state(),
        }
    }

    pub fn ratings(&self) -> &RatingLog {
        &self.log
    }

    pub fn progress(&self) -> Progress {
        Progress {
            id: self.config.id.clone(),
            state: self.state(),
            items: self.config.items.len(),
            complete_items: self.counts.iter().filter(|&&c| c >= self.config.target_ratings).count(),
            target_ratings: self.config.target_ratings,
            submissions: self.submissions.len(),
        }
    }

    /// Analytics over every sample in the campaign's work items; samples with
    /// fewer than `n` ratings produce a coverage note.
    pub fn report(&self, n: usize) -> CampaignReport {
        CampaignReport { progress: self.progress(), analytics: analytics_report(&self.log, &Metric::ALL, n, 0) }
    }

    /// Fills the campaign up to its target with scripted annotators. Labels
    /// are exact match against the reference, flipped with probability
    /// `error_rate`.
    pub fn simulate(&mut self, annotators: usize, error_rate: f64, seed: u64) -> Result<usize> {
        if !(0.0..=1.0).contains(&error_rate) {
            return Err(CampaignError::Invalid(format!("error rate {error_rate} is not a probability")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut written = 0;
        for a in 0..annotators {
            let name = format!("sim-{a:03}");
            let mut batch = Vec::new();
            for idx in self.eligible(&name) {
                let labels = self.config.items[idx]
                    .samples
                    .iter()
                    .map(|s| {
                        let truth = match self.pairs[s].matches_reference() {
                            Some(true) => Label::Good,
                            Some(false) => Label::NeedsWork,
                            None => return Err(CampaignError::Invalid(format!("{s} has no reference"))),
                        };
                        Ok(if rng.gen::<f64>() < error_rate { truth.flip() } else { truth })
                    })
                    .collect::<Result<Vec<_>>>()?;
                batch.push(Submission {
                    annotator: name.clone(),
                    work_item: self.config.items[idx].id.clone(),
                    labels,
                    timestamp: Utc::now(),
                });
            }
            written += batch.len();
            self.append(batch)?;
        }
        Ok(written)
    }
}
