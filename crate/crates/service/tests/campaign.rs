use std::fs::OpenOptions;
use std::io::Write;

use cewb_core::annotation::{sacc, Pool};
use cewb_core::datakit::{Dataset, Domain, Origin, SentencePair};
use cewb_core::Label;
use cewb_service::campaign::{Ack, Campaign, CampaignError, CampaignState, PAIRS_PER_ITEM};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn pair(i: usize, good: bool) -> SentencePair {
    let source: Vec<String> = vec![format!("s{}", i % 7), format!("s{}", i % 11)];
    let reference: Vec<String> = source.iter().map(|t| t.replace('s', "t")).collect();
    let mut target = reference.clone();
    if !good {
        target.reverse();
        target.push("t-extra".into());
    }
    SentencePair {
        id: format!("p{i:06}"),
        source,
        target,
        reference: Some(reference),
        origin: Origin::CeTest,
        domain: Domain::InDomain,
    }
}

/// `n` pairs, each good with probability `g`.
fn dataset(n: usize, g: f64, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Dataset::new((0..n).map(|i| pair(i, rng.gen::<f64>() < g)).collect(), "test pairs").unwrap()
}

fn good_rate(ds: &Dataset) -> f64 {
    ds.pairs.iter().filter(|p| p.matches_reference() == Some(true)).count() as f64 / ds.len() as f64
}

fn all(label: Label) -> Vec<Label> {
    vec![label; PAIRS_PER_ITEM]
}

fn log_lines(c: &Campaign) -> usize {
    std::fs::read_to_string(c.dir().join("ratings.log")).unwrap().lines().count()
}

#[test]
fn fresh_campaign_serves_six_pairs() {
    let dir = tempfile::tempdir().unwrap();
    let c = Campaign::create(dir.path(), "c1", &dataset(30, 0.7, 1), 3, Pool::NonExpert).unwrap();
    let item = c.next_work_item("alice").unwrap();
    assert_eq!(item.pairs.len(), 6);
    assert_eq!(item.target_ratings, 3);
    assert_eq!(c.progress().items, 5);
    assert_eq!(c.state(), CampaignState::Open);
}

#[test]
fn trailing_pairs_are_left_out() {
    let dir = tempfile::tempdir().unwrap();
    let c = Campaign::create(dir.path(), "c1", &dataset(20, 0.7, 1), 1, Pool::NonExpert).unwrap();
    assert_eq!(c.progress().items, 3);
}

#[test]
fn creation_preconditions() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset(12, 0.5, 1);
    assert!(matches!(Campaign::create(dir.path(), "c", &ds, 2, Pool::NonExpert), Err(CampaignError::Invalid(_))));
    assert!(matches!(
        Campaign::create(dir.path(), "c", &dataset(5, 0.5, 1), 3, Pool::NonExpert),
        Err(CampaignError::Invalid(_))
    ));
    Campaign::create(dir.path(), "c", &ds, 3, Pool::NonExpert).unwrap();
    assert!(matches!(Campaign::create(dir.path(), "c", &ds, 3, Pool::NonExpert), Err(CampaignError::Invalid(_))));
}

#[test]
fn annotator_who_rated_everything_gets_none() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = Campaign::create(dir.path(), "c1", &dataset(18, 0.7, 1), 3, Pool::NonExpert).unwrap();
    while let Some(item) = c.next_work_item("alice") {
        c.submit("alice", &item.id, &all(Label::Good)).unwrap();
    }
    assert_eq!(c.progress().submissions, 3);
    assert!(c.next_work_item("alice").is_none());
    assert!(c.next_work_item("bob").is_some());
}

#[test]
fn furthest_from_target_is_served_first() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = Campaign::create(dir.path(), "c1", &dataset(18, 0.7, 1), 3, Pool::NonExpert).unwrap();
    c.submit("a", "wi-00000", &all(Label::Good)).unwrap();
    c.submit("b", "wi-00000", &all(Label::Good)).unwrap();
    c.submit("a", "wi-00001", &all(Label::Good)).unwrap();
    assert_eq!(c.next_work_item("z").unwrap().id, "wi-00002");
    c.submit("b", "wi-00002", &all(Label::Good)).unwrap();
    c.submit("c", "wi-00002", &all(Label::Good)).unwrap();
    // counts: 2, 1, 2
    assert_eq!(c.next_work_item("z").unwrap().id, "wi-00001");
}

#[test]
fn concurrent_annotators_may_share_an_item() {
    let dir = tempfile::tempdir().unwrap();
    let c = Campaign::create(dir.path(), "c1", &dataset(12, 0.7, 1), 3, Pool::NonExpert).unwrap();
    assert_eq!(c.next_work_item("a").unwrap().id, c.next_work_item("b").unwrap().id);
}

#[test]
fn complete_items_are_not_served() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = Campaign::create(dir.path(), "c1", &dataset(12, 0.7, 1), 1, Pool::NonExpert).unwrap();
    c.submit("a", "wi-00000", &all(Label::Good)).unwrap();
    assert_eq!(c.next_work_item("b").unwrap().id, "wi-00001");
    let ack = c.submit("b", "wi-00001", &all(Label::NeedsWork)).unwrap();
    assert_eq!(ack.state, CampaignState::Complete);
    assert!(c.next_work_item("c").is_none());
}

#[test]
fn submission_appends_six_ratings() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = Campaign::create(dir.path(), "c1", &dataset(12, 0.7, 1), 3, Pool::NonExpert).unwrap();
    let before = c.ratings().rating_count();
    let ack = c.submit("alice", "wi-00000", &all(Label::Good)).unwrap();
    assert!(ack.recorded);
    assert_eq!(ack.item_ratings, 1);
    assert_eq!(c.ratings().rating_count(), before + 6);
    assert_eq!(log_lines(&c), 1);
}

#[test]
fn identical_resubmission_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = Campaign::create(dir.path(), "c1", &dataset(12, 0.7, 1), 3, Pool::NonExpert).unwrap();
    let labels = vec![Label::Good, Label::NeedsWork, Label::Good, Label::Good, Label::NeedsWork, Label::Good];
    let first = c.submit("alice", "wi-00001", &labels).unwrap();
    let log_before = std::fs::read(c.dir().join("ratings.log")).unwrap();
    let again = c.submit("alice", "wi-00001", &labels).unwrap();
    assert!(!again.recorded);
    assert_eq!(Ack { recorded: true, ..again }, first);
    assert_eq!(std::fs::read(c.dir().join("ratings.log")).unwrap(), log_before);
    assert_eq!(c.ratings().rating_count(), 6);
}

#[test]
fn differing_resubmission_conflicts() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = Campaign::create(dir.path(), "c1", &dataset(12, 0.7, 1), 3, Pool::NonExpert).unwrap();
    c.submit("alice", "wi-00000", &all(Label::Good)).unwrap();
    let err = c.submit("alice", "wi-00000", &all(Label::NeedsWork)).unwrap_err();
    assert!(matches!(err, CampaignError::Conflict { .. }));
    assert_eq!(log_lines(&c), 1);
}

#[test]
fn wrong_arity_and_unknown_item_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = Campaign::create(dir.path(), "c1", &dataset(12, 0.7, 1), 3, Pool::NonExpert).unwrap();
    let five = vec![Label::Good; 5];
    assert!(matches!(c.submit("a", "wi-00000", &five), Err(CampaignError::Arity { expected: 6, got: 5 })));
    assert!(matches!(c.submit("a", "wi-99999", &all(Label::Good)), Err(CampaignError::UnknownItem(_))));
    assert_eq!(log_lines(&c), 0);
}

#[test]
fn reopening_replays_the_log() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset(18, 0.7, 1);
    {
        let mut c = Campaign::create(dir.path(), "c1", &ds, 3, Pool::Expert).unwrap();
        c.submit("a", "wi-00000", &all(Label::Good)).unwrap();
        c.submit("b", "wi-00000", &all(Label::NeedsWork)).unwrap();
        c.submit("a", "wi-00002", &all(Label::Good)).unwrap();
    }
    let mut c = Campaign::open(dir.path()).unwrap();
    assert_eq!(c.progress().submissions, 3);
    assert_eq!(c.ratings().rating_count(), 18);
    assert_eq!(c.ratings().pool, Pool::Expert);
    assert!(!c.submit("a", "wi-00000", &all(Label::Good)).unwrap().recorded);
    assert!(c.submit("a", "wi-00000", &all(Label::NeedsWork)).is_err());
}

#[test]
fn torn_trailing_record_is_dropped_on_restart() {
    let dir = tempfile::tempdir().unwrap();
    {
        let mut c = Campaign::create(dir.path(), "c1", &dataset(12, 0.7, 1), 3, Pool::NonExpert).unwrap();
        c.submit("a", "wi-00000", &all(Label::Good)).unwrap();
    }
    let path = dir.path().join("ratings.log");
    let intact = std::fs::read(&path).unwrap();
    // A crash halfway through the next write.
    let next = std::str::from_utf8(&intact).unwrap().replace("\"a\"", "\"b\"");
    let mut f = OpenOptions::new().append(true).open(&path).unwrap();
    f.write_all(&next.as_bytes()[..next.len() / 2]).unwrap();
    drop(f);

    let mut c = Campaign::open(dir.path()).unwrap();
    assert_eq!(c.progress().submissions, 1);
    assert_eq!(c.ratings().rating_count(), 6);
    assert_eq!(std::fs::read(&path).unwrap(), intact);
    assert!(c.submit("b", "wi-00000", &all(Label::Good)).unwrap().recorded);
    drop(c);
    let c = Campaign::open(dir.path()).unwrap();
    assert_eq!(c.ratings().rating_count(), 12);
}

#[test]
fn corrupt_complete_line_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    drop(Campaign::create(dir.path(), "c1", &dataset(12, 0.7, 1), 3, Pool::NonExpert).unwrap());
    std::fs::write(dir.path().join("ratings.log"), b"{not json}\n").unwrap();
    assert!(Campaign::open(dir.path()).is_err());
}

#[test]
fn oracle_campaign_sacc_is_the_good_rate() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset(600, 0.63, 7);
    let mut c = Campaign::create(dir.path(), "oracle", &ds, 1, Pool::Oracle).unwrap();
    c.simulate(1, 0.0, 0).unwrap();
    assert_eq!(c.state(), CampaignState::Complete);
    let report = c.report(1);
    assert_eq!(report.analytics.sacc, Some(good_rate(&ds)));
    assert_eq!(sacc(c.ratings(), 1).unwrap(), good_rate(&ds));
}

#[test]
fn unanimous_campaign_has_alpha_one() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset(60, 0.5, 3);
    let mut c = Campaign::create(dir.path(), "u", &ds, 3, Pool::Simulated).unwrap();
    c.simulate(3, 0.0, 0).unwrap();
    let r = c.report(3);
    assert_eq!(r.analytics.alpha, Some(1.0));
    assert_eq!(r.analytics.entropy, Some(0.0));
    assert_eq!(r.analytics.covered_samples, r.analytics.samples);
}

#[test]
fn under_rated_report_has_coverage_note() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = Campaign::create(dir.path(), "c", &dataset(12, 0.5, 3), 3, Pool::NonExpert).unwrap();
    c.submit("a", "wi-00000", &all(Label::Good)).unwrap();
    let r = c.report(3);
    assert_eq!(r.analytics.sacc, None);
    assert!(!r.analytics.notes.is_empty());
}

#[test]
fn reports_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = Campaign::create(dir.path(), "c", &dataset(120, 0.8, 3), 5, Pool::Simulated).unwrap();
    c.simulate(5, 0.2, 9).unwrap();
    let a = serde_json::to_string(&c.report(3).analytics).unwrap();
    let reopened = Campaign::open(dir.path()).unwrap();
    assert_eq!(serde_json::to_string(&reopened.report(3).analytics).unwrap(), a);
}

#[test]
fn simulated_campaign_recovers_error_rate() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dataset(10_002, 0.9, 11);
    let mut c = Campaign::create(dir.path(), "sim", &ds, 5, Pool::Simulated).unwrap();
    c.simulate(5, 0.1, 5).unwrap();
    assert_eq!(c.state(), CampaignState::Complete);
    let model = c.report(5).analytics.error_model.expect("error model");
    assert!((model.e - 0.1).abs() <= 0.01, "e = {}", model.e);
}
