//! Annotation analytics: majority voting, SACC(N), Krippendorff's alpha,
//! labeling entropy, quasi-bootstrap SACC intervals and the Bernoulli
//! annotation-error model.

use std::collections::BTreeMap;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use chrono::{DateTime, TimeZone, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datakit::Dataset;
use crate::error::{Error, Result};
use crate::Label;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rating {
    pub sample_id: String,
    pub annotator_id: String,
    pub label: Label,
    pub timestamp: DateTime<Utc>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pool {
    #[default]
    NonExpert,
    Expert,
    Oracle,
    Simulated,
}

/// Ratings grouped by sample id. `(sample_id, annotator_id)` is unique.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RatingLog {
    pub pool: Pool,
    samples: BTreeMap<String, Vec<Rating>>,
}

impl RatingLog {
    pub fn new(pool: Pool) -> Self {
        RatingLog { pool, samples: BTreeMap::new() }
    }

    pub fn from_ratings<I: IntoIterator<Item = Rating>>(pool: Pool, ratings: I) -> Result<Self> {
        let mut log = RatingLog::new(pool);
        for r in ratings {
            log.insert(r)?;
        }
        Ok(log)
    }

    pub fn insert(&mut self, r: Rating) -> Result<()> {
        let entry = self.samples.entry(r.sample_id.clone()).or_default();
        if entry.iter().any(|x| x.annotator_id == r.annotator_id) {
            return Err(Error::invalid(format!(
                "annotator {} already rated sample {}",
                r.annotator_id, r.sample_id
            )));
        }
        entry.push(r);
        Ok(())
    }

    pub fn samples(&self) -> impl Iterator<Item = (&String, &Vec<Rating>)> {
        self.samples.iter()
    }

    pub fn ratings_for(&self, sample_id: &str) -> Option<&[Rating]> {
        self.samples.get(sample_id).map(Vec::as_slice)
    }

    pub fn sample_count(&self) -> usize {
        self.samples.len()
    }

    pub fn rating_count(&self) -> usize {
        self.samples.values().map(Vec::len).sum()
    }

    pub fn rating_counts(&self) -> BTreeMap<&str, usize> {
        self.samples.iter().map(|(k, v)| (k.as_str(), v.len())).collect()
    }

    pub fn ratings(&self) -> impl Iterator<Item = &Rating> {
        self.samples.values().flatten()
    }

    /// Samples with fewer than `n` ratings.
    pub fn under_rated(&self, n: usize) -> Vec<String> {
        self.samples.iter().filter(|(_, r)| r.len() < n).map(|(k, _)| k.clone()).collect()
    }

    /// Swaps the two label values everywhere.
    pub fn with_flipped_labels(&self) -> RatingLog {
        let mut out = self.clone();
        for r in out.samples.values_mut().flatten() {
            r.label = r.label.flip();
        }
        out
    }
}

/// Fixed timestamp for synthetic ratings.
pub fn epoch_timestamp() -> DateTime<Utc> {
    Utc.timestamp_opt(0, 0).unwrap()
}

/// Writes one rating per line.
pub fn write_rating_log(log: &RatingLog, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for r in log.ratings() {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_rating_log(path: &Path, pool: Pool) -> Result<RatingLog> {
    let f = std::fs::File::open(path)?;
    let mut log = RatingLog::new(pool);
    for (i, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: Rating = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        log.insert(r)?;
    }
    Ok(log)
}

fn majority(labels: impl Iterator<Item = Label>, n: usize) -> Label {
    let good = labels.filter(|l| l.is_good()).count();
    if 2 * good > n {
        Label::Good
    } else {
        Label::NeedsWork
    }
}

fn check_odd(n: usize) -> Result<()> {
    if n == 0 || n % 2 == 0 {
        return Err(Error::invalid(format!("rating count {n} must be odd; an even count allows ties")));
    }
    Ok(())
}

/// Majority label over the first `n` ratings in annotator-id order.
pub fn majority_label(ratings: &[Rating], n: usize) -> Result<Label> {
    check_odd(n)?;
    if ratings.len() < n {
        return Err(Error::invalid(format!("{} ratings, need {n}", ratings.len())));
    }
    let mut sorted: Vec<&Rating> = ratings.iter().collect();
    sorted.sort_by(|a, b| a.annotator_id.cmp(&b.annotator_id));
    Ok(majority(sorted.iter().take(n).map(|r| r.label), n))
}

/// Fraction of samples whose majority label over `n` ratings is good.
pub fn sacc(log: &RatingLog, n: usize) -> Result<f64> {
    check_odd(n)?;
    let short = log.under_rated(n);
    if !short.is_empty() {
        return Err(Error::InsufficientRatings { needed: n, samples: short });
    }
    if log.sample_count() == 0 {
        return Err(Error::invalid("empty rating log"));
    }
    let mut good = 0;
    for (_, r) in log.samples() {
        if majority_label(r, n)?.is_good() {
            good += 1;
        }
    }
    Ok(good as f64 / log.sample_count() as f64)
}

/// Nominal Krippendorff's alpha over the coincidence matrix. Units with fewer
/// than two ratings are not pairable and are skipped.
pub fn krippendorff_alpha(log: &RatingLog) -> Result<f64> {
    // o[v][v'] for v, v' in {good, needs_work}
    let mut o = [[0.0f64; 2]; 2];
    for (_, ratings) in log.samples() {
        let m = ratings.len();
        if m < 2 {
            continue;
        }
        let mut counts = [0usize; 2];
        for r in ratings {
            counts[r.label.index()] += 1;
        }
        let w = 1.0 / (m - 1) as f64;
        for v in 0..2 {
            for u in 0..2 {
                let pairs = if v == u { counts[v] * counts[v].saturating_sub(1) } else { counts[v] * counts[u] };
                o[v][u] += pairs as f64 * w;
            }
        }
    }
    let nv = [o[0][0] + o[0][1], o[1][0] + o[1][1]];
    let n = nv[0] + nv[1];
    let d_o = o[0][1] + o[1][0];
    if n <= 1.0 {
        return Err(Error::UndefinedAlpha);
    }
    let d_e = 2.0 * nv[0] * nv[1] / (n - 1.0);
    if d_e == 0.0 {
        return Err(Error::UndefinedAlpha);
    }
    Ok(1.0 - d_o / d_e)
}

/// Base-2 binary entropy with `0 log 0 = 0`.
pub fn binary_entropy_bits(p: f64) -> f64 {
    let term = |x: f64| if x <= 0.0 { 0.0 } else { -x * x.log2() };
    term(p) + term(1.0 - p)
}

/// Mean per-sample labeling entropy (bits); every sample needs exactly `n` ratings.
pub fn labeling_entropy(log: &RatingLog, n: usize) -> Result<f64> {
    if log.sample_count() == 0 {
        return Err(Error::invalid("empty rating log"));
    }
    let ragged: Vec<String> = log.samples().filter(|(_, r)| r.len() != n).map(|(k, _)| k.clone()).collect();
    if !ragged.is_empty() {
        return Err(Error::invalid(format!("samples without exactly {n} ratings: {ragged:?}")));
    }
    let total: f64 = log
        .samples()
        .map(|(_, r)| {
            let k = r.iter().filter(|x| x.label.is_good()).count();
            binary_entropy_bits(k as f64 / n as f64)
        })
        .sum();
    Ok(total / log.sample_count() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapSacc {
    pub n: usize,
    pub trials: usize,
    pub mean: f64,
    /// Sample standard deviation across trials.
    pub std: f64,
    /// `mean - 1.96 * std`
    pub ci_low: f64,
    /// `mean + 1.96 * std`
    pub ci_high: f64,
}

pub const BOOTSTRAP_RATINGS: usize = 5;
pub const CI_Z: f64 = 1.96;

/// Quasi-bootstrap SACC(n): every trial draws `n` of the 5 ratings of each
/// sample without replacement and takes the majority. Trial `t` uses the
/// random stream `(seed, t)`.
pub fn bootstrap_sacc(log: &RatingLog, n: usize, trials: usize, seed: u64) -> Result<BootstrapSacc> {
    check_odd(n)?;
    if n > BOOTSTRAP_RATINGS {
        return Err(Error::invalid(format!("cannot draw {n} of {BOOTSTRAP_RATINGS} ratings")));
    }
    if trials == 0 {
        return Err(Error::invalid("at least one trial required"));
    }
    let bad: Vec<String> =
        log.samples().filter(|(_, r)| r.len() != BOOTSTRAP_RATINGS).map(|(k, _)| k.clone()).collect();
    if !bad.is_empty() {
        return Err(Error::invalid(format!("samples without exactly 5 ratings: {bad:?}")));
    }
    if log.sample_count() == 0 {
        return Err(Error::invalid("empty rating log"));
    }
    let labels: Vec<Vec<Label>> = log
        .samples()
        .map(|(_, r)| {
            let mut sorted: Vec<&Rating> = r.iter().collect();
            sorted.sort_by(|a, b| a.annotator_id.cmp(&b.annotator_id));
            sorted.into_iter().map(|x| x.label).collect()
        })
        .collect();
    let values: Vec<f64> = (0..trials)
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(t as u64);
            let good = labels
                .iter()
                .filter(|ls| {
                    let picked = rand::seq::index::sample(&mut rng, BOOTSTRAP_RATINGS, n);
                    majority(picked.iter().map(|i| ls[i]), n).is_good()
                })
                .count();
            good as f64 / labels.len() as f64
        })
        .collect();
    let mean = values.iter().sum::<f64>() / trials as f64;
    let std = if trials > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (trials - 1) as f64).sqrt()
    } else {
        0.0
    };
    Ok(BootstrapSacc { n, trials, mean, std, ci_low: mean - CI_Z * std, ci_high: mean + CI_Z * std })
}

/// Bernoulli annotation-error model fitted from SACC(5) and SACC(1).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorModelReport {
    /// Estimated fraction of good samples, `SACC(5)`.
    pub g: f64,
    /// Per-rating label-flip probability.
    pub e: f64,
    /// `g (1-e)^2 (1+2e)`
    pub predicted_sacc3_approx: f64,
    /// `g (1-e)^2 (1+2e) + (1-g) e^2 (3-2e)`
    pub predicted_sacc3_full: f64,
    pub human_precision: f64,
    pub human_recall: f64,
}

pub fn error_model_report(sacc5: f64, sacc1: f64) -> Result<ErrorModelReport> {
    let g = sacc5;
    if !(g > 0.5 && g <= 1.0) {
        return Err(Error::ModelInapplicable(format!("SACC(5) = {g} must lie in (0.5, 1]")));
    }
    if !(0.0..=1.0).contains(&sacc1) || sacc1 > g {
        return Err(Error::ModelInapplicable(format!("SACC(1) = {sacc1} must lie in [0, SACC(5) = {g}]")));
    }
    let e = (g - sacc1) / (2.0 * g - 1.0);
    if e >= 0.5 {
        return Err(Error::ModelInapplicable(format!("estimated error probability {e} is not below 0.5")));
    }
    let approx = g * (1.0 - e).powi(2) * (1.0 + 2.0 * e);
    let full = approx + (1.0 - g) * e * e * (3.0 - 2.0 * e);
    let tp = g * (1.0 - e);
    let fp = (1.0 - g) * e;
    Ok(ErrorModelReport {
        g,
        e,
        predicted_sacc3_approx: approx,
        predicted_sacc3_full: full,
        human_precision: tp / (tp + fp),
        human_recall: 1.0 - e,
    })
}

/// Expected SACC(1) under the error model: `g - e (2g - 1)`.
pub fn expected_sacc1(g: f64, e: f64) -> f64 {
    g - e * (2.0 * g - 1.0)
}

/// Simulates i.i.d. Bernoulli annotators: each sample is truly good with
/// probability `g`, each rating flips the truth with probability `e`.
/// Returns the log and the true labels in sample order.
pub fn simulate_pool(samples: usize, raters: usize, g: f64, e: f64, seed: u64) -> Result<(RatingLog, Vec<Label>)> {
    if !(0.0..=1.0).contains(&g) || !(0.0..=1.0).contains(&e) {
        return Err(Error::invalid("g and e must be probabilities"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut log = RatingLog::new(Pool::Simulated);
    let mut truth = Vec::with_capacity(samples);
    let ts = epoch_timestamp();
    for s in 0..samples {
        let label = if rng.gen::<f64>() < g { Label::Good } else { Label::NeedsWork };
        truth.push(label);
        let sample_id = format!("sim-{s:06}");
        for a in 0..raters {
            let observed = if rng.gen::<f64>() < e { label.flip() } else { label };
            log.insert(Rating {
                sample_id: sample_id.clone(),
                annotator_id: format!("annotator-{a:02}"),
                label: observed,
                timestamp: ts,
            })?;
        }
    }
    Ok((log, truth))
}

/// Single-rating log whose labels are exact match against the oracle
/// reference. Pairs without a reference are skipped.
pub fn oracle_ratings(ds: &Dataset) -> RatingLog {
    let mut log = RatingLog::new(Pool::Oracle);
    let ts = epoch_timestamp();
    for p in &ds.pairs {
        if let Some(ok) = p.matches_reference() {
            let label = if ok { Label::Good } else { Label::NeedsWork };
            log.insert(Rating { sample_id: p.id.clone(), annotator_id: "oracle".into(), label, timestamp: ts })
                .expect("dataset ids are unique");
        }
    }
    log
}

/// Metrics selectable in [`analytics_report`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Metric {
    Sacc,
    Alpha,
    Entropy,
    Bootstrap,
    ErrorModel,
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim() {
            "sacc" => Metric::Sacc,
            "alpha" => Metric::Alpha,
            "entropy" => Metric::Entropy,
            "bootstrap" => Metric::Bootstrap,
            "error-model" | "error_model" => Metric::ErrorModel,
            other => return Err(Error::invalid(format!("unknown metric {other:?}"))),
        })
    }
}

impl Metric {
    pub const ALL: [Metric; 5] = [Metric::Sacc, Metric::Alpha, Metric::Entropy, Metric::Bootstrap, Metric::ErrorModel];
}

/// Bundle of reliability analytics over one rating log. Metrics that cannot be
/// computed carry the reason in `notes` instead of failing the whole report.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AnalyticsReport {
    pub pool: Pool,
    pub n: usize,
    pub samples: usize,
    pub ratings: usize,
    /// Samples with at least `n` ratings.
    pub covered_samples: usize,
    pub sacc: Option<f64>,
    pub alpha: Option<f64>,
    pub entropy: Option<f64>,
    pub bootstrap_sacc1: Option<BootstrapSacc>,
    pub bootstrap_sacc3: Option<BootstrapSacc>,
    pub sacc5: Option<f64>,
    pub error_model: Option<ErrorModelReport>,
    pub notes: Vec<String>,
}

pub const BOOTSTRAP_TRIALS: usize = 100;

/// Computes the requested metrics. Under-rated samples are excluded from
/// SACC(n) and reported in a coverage note.
pub fn analytics_report(log: &RatingLog, metrics: &[Metric], n: usize, seed: u64) -> AnalyticsReport {
    let mut rep = AnalyticsReport {
        pool: log.pool,
        n,
        samples: log.sample_count(),
        ratings: log.rating_count(),
        ..AnalyticsReport::default()
    };
    let under = log.under_rated(n);
    rep.covered_samples = rep.samples - under.len();
    let covered = if under.is_empty() {
        log.clone()
    } else {
        rep.notes.push(format!(
            "coverage: {} of {} samples have at least {n} ratings; SACC uses the covered samples only",
            rep.covered_samples, rep.samples
        ));
        let keep = log.samples().filter(|(_, r)| r.len() >= n).flat_map(|(_, r)| r.iter().cloned());
        RatingLog::from_ratings(log.pool, keep).expect("subset of a valid log")
    };
    let mut notes = Vec::new();
    let all_five = log.sample_count() > 0 && log.samples().all(|(_, r)| r.len() == BOOTSTRAP_RATINGS);
    for m in metrics {
        match m {
            Metric::Sacc => match sacc(&covered, n) {
                Ok(v) => rep.sacc = Some(v),
                Err(e) => notes.push(rep_note("sacc", e)),
            },
            Metric::Alpha => match krippendorff_alpha(log) {
                Ok(v) => rep.alpha = Some(v),
                Err(e) => notes.push(rep_note("alpha", e)),
            },
            Metric::Entropy => {
                let counts: std::collections::BTreeSet<usize> = log.samples().map(|(_, r)| r.len()).collect();
                match counts.iter().next().copied() {
                    Some(k) if counts.len() == 1 => match labeling_entropy(log, k) {
                        Ok(v) => rep.entropy = Some(v),
                        Err(e) => notes.push(rep_note("entropy", e)),
                    },
                    _ => notes.push("entropy: rating counts are ragged or empty".to_string()),
                }
            }
            Metric::Bootstrap => {
                if !all_five {
                    notes.push("bootstrap: requires exactly 5 ratings per sample".to_string());
                    continue;
                }
                match (bootstrap_sacc(log, 1, BOOTSTRAP_TRIALS, seed), bootstrap_sacc(log, 3, BOOTSTRAP_TRIALS, seed)) {
                    (Ok(b1), Ok(b3)) => {
                        rep.bootstrap_sacc1 = Some(b1);
                        rep.bootstrap_sacc3 = Some(b3);
                    }
                    (Err(e), _) | (_, Err(e)) => notes.push(rep_note("bootstrap", e)),
                }
            }
            Metric::ErrorModel => {
                if !all_five {
                    notes.push("error-model: requires exactly 5 ratings per sample".to_string());
                    continue;
                }
                let fitted = sacc(log, 5).and_then(|s5| {
                    rep.sacc5 = Some(s5);
                    let s1 = bootstrap_sacc(log, 1, BOOTSTRAP_TRIALS, seed)?.mean;
                    error_model_report(s5, s1)
                });
                match fitted {
                    Ok(r) => rep.error_model = Some(r),
                    Err(e) => notes.push(rep_note("error-model", e)),
                }
            }
        }
    }
    rep.notes.extend(notes);
    rep
}

fn rep_note(what: &str, e: Error) -> String {
    format!("{what}: {e}")
}
