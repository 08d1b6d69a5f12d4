//! Scoring-set evaluation: PR curves and Recall at a fixed Precision with the
//! threshold chosen on dev and transferred unchanged to test.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Label;

/// Scores are P(good); the positive class is `good`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoredSet {
    pub scores: Vec<f64>,
    pub labels: Vec<Label>,
}

impl ScoredSet {
    pub fn new(scores: Vec<f64>, labels: Vec<Label>) -> Result<Self> {
        let s = ScoredSet { scores, labels };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.scores.len() != self.labels.len() {
            return Err(Error::shape(format!("{} scores for {} labels", self.scores.len(), self.labels.len())));
        }
        if let Some(s) = self.scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(Error::invalid(format!("score {s} outside [0, 1]")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|l| l.is_good()).count()
    }

    pub fn positive_rate(&self) -> f64 {
        self.positives() as f64 / self.len() as f64
    }

    fn require_both_classes(&self, what: &str) -> Result<()> {
        self.validate()?;
        let p = self.positives();
        if p == 0 || p == self.len() {
            return Err(Error::invalid(format!("{what} set has a single class")));
        }
        Ok(())
    }

    /// Operating point of the rule `score >= threshold`. With nothing
    /// predicted good, precision is reported as 1.
    pub fn operating_point(&self, threshold: f64) -> PrPoint {
        let mut tp = 0usize;
        let mut fp = 0usize;
        for (s, l) in self.scores.iter().zip(&self.labels) {
            if *s >= threshold {
                if l.is_good() {
                    tp += 1;
                } else {
                    fp += 1;
                }
            }
        }
        let pos = self.positives();
        PrPoint {
            threshold: Some(threshold).filter(|t| t.is_finite()),
            precision: if tp + fp == 0 { 1.0 } else { tp as f64 / (tp + fp) as f64 },
            recall: if pos == 0 { 0.0 } else { tp as f64 / pos as f64 },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    /// `None` is the +inf sentinel: nothing is predicted good.
    pub threshold: Option<f64>,
    pub precision: f64,
    pub recall: f64,
}

/// One point per distinct score, thresholds descending.
pub fn pr_curve(set: &ScoredSet) -> Result<Vec<PrPoint>> {
    set.require_both_classes("scored")?;
    let mut order: Vec<usize> = (0..set.len()).collect();
    order.sort_by(|&a, &b| set.scores[b].total_cmp(&set.scores[a]));
    let pos = set.positives() as f64;
    let mut points = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let t = set.scores[order[i]];
        while i < order.len() && set.scores[order[i]] == t {
            if set.labels[order[i]].is_good() {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(PrPoint { threshold: Some(t), precision: tp as f64 / (tp + fp) as f64, recall: tp as f64 / pos });
    }
    Ok(points)
}

/// Highest-recall point with precision at least `target`; lowest threshold on
/// ties. Falls back to the +inf sentinel with recall 0.
pub fn best_point(points: &[PrPoint], target: f64) -> PrPoint {
    let mut best = PrPoint { threshold: None, precision: 1.0, recall: 0.0 };
    for p in points {
        if p.precision >= target && p.recall > 0.0 {
            let lower = match (p.threshold, best.threshold) {
                (Some(a), Some(b)) => a < b,
                (Some(_), None) => true,
                _ => false,
            };
            if p.recall > best.recall || (p.recall == best.recall && lower) {
                best = *p;
            }
        }
    }
    best
}

fn check_target(target: f64) -> Result<()> {
    if !(target > 0.0 && target <= 1.0) {
        return Err(Error::invalid(format!("target precision {target} outside (0, 1]")));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallAtPrecision {
    pub target_precision: f64,
    /// `None` when no dev threshold reaches the target.
    pub dev_threshold: Option<f64>,
    pub dev_precision: f64,
    pub dev_recall: f64,
    pub test_precision_at_threshold: f64,
    pub test_recall_at_threshold: f64,
    /// Diagnostic only: the best point chosen on test itself.
    pub test_optimal: Option<PrPoint>,
}

/// Dev-only selection, used for checkpoint and grid ranking.
pub fn dev_recall_at_precision(dev: &ScoredSet, target: f64) -> Result<PrPoint> {
    check_target(target)?;
    Ok(best_point(&pr_curve(dev)?, target))
}

pub fn recall_at_precision(dev: &ScoredSet, test: &ScoredSet, target: f64) -> Result<RecallAtPrecision> {
    check_target(target)?;
    let chosen = best_point(&pr_curve(dev)?, target);
    test.validate()?;
    let applied = test.operating_point(chosen.threshold.unwrap_or(f64::INFINITY));
    let test_optimal = pr_curve(test).ok().map(|pts| best_point(&pts, target));
    Ok(RecallAtPrecision {
        target_precision: target,
        dev_threshold: chosen.threshold,
        dev_precision: chosen.precision,
        dev_recall: chosen.recall,
        test_precision_at_threshold: applied.precision,
        test_recall_at_threshold: applied.recall,
        test_optimal,
    })
}

pub fn utility(recall: f64, sacc: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&recall) || !(0.0..=1.0).contains(&sacc) {
        return Err(Error::invalid(format!("recall {recall} and SACC {sacc} must lie in [0, 1]")));
    }
    Ok(recall * sacc)
}

/// Accept-everything operating point: precision equals SACC, recall 1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrivialBaseline {
    pub precision: f64,
    pub recall: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub target_precision: f64,
    pub dev_threshold: Option<f64>,
    pub dev_recall: f64,
    pub test_precision_at_threshold: f64,
    pub test_recall_at_threshold: f64,
    pub test_optimal: Option<PrPoint>,
    /// SACC of the test set under its gold labels.
    pub sacc: f64,
    /// `test_recall_at_threshold * sacc`
    pub utility: f64,
    pub trivial: TrivialBaseline,
    pub best_checkpoint_step: Option<usize>,
    pub pr_points: Vec<PrPoint>,
}

/// Full report; the PR curve is over the test set.
pub fn evaluate(
    model: &str,
    dev: &ScoredSet,
    test: &ScoredSet,
    target: f64,
    best_checkpoint_step: Option<usize>,
) -> Result<EvalReport> {
    let r = recall_at_precision(dev, test, target)?;
    if test.is_empty() {
        return Err(Error::invalid("empty test set"));
    }
    let sacc = test.positive_rate();
    Ok(EvalReport {
        model: model.to_string(),
        target_precision: target,
        dev_threshold: r.dev_threshold,
        dev_recall: r.dev_recall,
        test_precision_at_threshold: r.test_precision_at_threshold,
        test_recall_at_threshold: r.test_recall_at_threshold,
        test_optimal: r.test_optimal,
        sacc,
        utility: utility(r.test_recall_at_threshold, sacc)?,
        trivial: TrivialBaseline { precision: sacc, recall: 1.0 },
        best_checkpoint_step,
        pr_points: pr_curve(test).unwrap_or_default(),
    })
}

pub fn write_pr_tsv(points: &[PrPoint], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "threshold\tprecision\trecall")?;
    for p in points {
        let t = p.threshold.map_or("inf".to_string(), |t| t.to_string());
        writeln!(f, "{t}\t{}\t{}", p.precision, p.recall)?;
    }
    f.flush()?;
    Ok(())
}

/// Score files are JSONL: `{"id": .., "score": .., "label": ..}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub id: String,
    pub score: f64,
    pub label: Label,
}

pub fn write_scores(records: &[ScoreRecord], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn load_scores(path: &Path) -> Result<ScoredSet> {
    let text = std::fs::read_to_string(path)?;
    let mut set = ScoredSet::default();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let r: ScoreRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        set.scores.push(r.score);
        set.labels.push(r.label);
    }
    set.validate()?;
    Ok(set)
}
