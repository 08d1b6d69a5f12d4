use cewb_core::datakit::{generate_corpus, CorpusSpec, Domain, Origin, SentencePair};
use cewb_core::features::mc_features;
use cewb_core::glassbox::{corpus_perplexity, mc_dropout_replays, train_lm, train_seq2seq, translate, LmConfig, Seq2SeqConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn toks(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

#[test]
fn unambiguous_task_held_out_exact_match() {
    let spec = CorpusSpec {
        source_vocab_size: 50,
        homograph_fraction: 0.0,
        reorder_marker_rate: 0.0,
        ood_fraction: 0.0,
        sizes: [(Origin::MtTrain, 1000), (Origin::CeTest, 200)].into_iter().collect(),
        seed: 1,
        ..CorpusSpec::default()
    };
    let ds = generate_corpus(&spec).unwrap();
    let train: Vec<SentencePair> = ds.with_origin(Origin::MtTrain).cloned().collect();
    let (model, log) = train_seq2seq(&train, &Seq2SeqConfig { epochs: 30, ..Seq2SeqConfig::default() }).unwrap();
    assert!(log.epoch_loss.last() < log.epoch_loss.first());

    let held: Vec<&SentencePair> = ds.with_origin(Origin::CeTest).collect();
    assert_eq!(held.len(), 200);
    let exact = held.iter().filter(|p| translate(&model, &p.source).unwrap().0 == *p.reference.as_ref().unwrap()).count();
    let rate = exact as f64 / held.len() as f64;
    assert!(rate >= 0.95, "held-out exact match {rate}");
}

#[test]
fn identity_task_translates_and_traces() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let letters = ["a", "b", "c", "d", "e", "f"];
    let corpus: Vec<SentencePair> = (0..300)
        .map(|i| {
            let src: Vec<String> = (0..rng.gen_range(1..=4)).map(|_| letters[rng.gen_range(0..letters.len())].to_string()).collect();
            let tgt: Vec<String> = src.iter().map(|t| t.to_uppercase()).collect();
            SentencePair {
                id: format!("id{i}"),
                source: src,
                target: tgt.clone(),
                reference: Some(tgt),
                origin: Origin::MtTrain,
                domain: Domain::InDomain,
            }
        })
        .collect();
    let cfg = Seq2SeqConfig { embed: 16, hidden: 32, epochs: 20, dropout: 0.0, ..Seq2SeqConfig::default() };
    let (model, _) = train_seq2seq(&corpus, &cfg).unwrap();
    let (target, trace) = translate(&model, &toks("a b")).unwrap();
    assert_eq!(target, toks("A B"));
    assert_eq!(trace.steps.len(), 2);
    assert!(trace.end.is_some());
    let sum: f64 = trace.token_log_probs().iter().sum();
    assert!((sum - trace.log_prob).abs() < 1e-9);
}

#[test]
fn mc_variance_vanishes_with_the_dropout_rate() {
    let spec = CorpusSpec {
        source_vocab_size: 30,
        sizes: [(Origin::MtTrain, 200)].into_iter().collect(),
        ..CorpusSpec::default()
    };
    let ds = generate_corpus(&spec).unwrap();
    let (model, _) = train_seq2seq(&ds.pairs, &Seq2SeqConfig { epochs: 3, ..Seq2SeqConfig::default() }).unwrap();
    let p = &ds.pairs[0];
    let mean_var = |rate: f64| -> f64 {
        let rows = mc_dropout_replays(&model, &p.source, &p.reference.clone().unwrap(), 16, rate, 4).unwrap();
        let stats = mc_features(&rows).unwrap();
        stats.iter().map(|(_, v)| v).sum::<f64>() / stats.len() as f64
    };
    let vars: Vec<f64> = [0.4, 0.1, 0.01, 0.0].iter().map(|&r| mean_var(r)).collect();
    assert!(vars[0] > vars[2], "{vars:?}");
    assert!(vars[1] > vars[2], "{vars:?}");
    assert!(vars[3] < 1e-20, "{vars:?}");
}

#[test]
fn adaptation_on_out_of_domain_sources_lowers_their_perplexity() {
    let spec = CorpusSpec {
        sizes: [(Origin::MtTrain, 800), (Origin::CeTrain, 400), (Origin::CeTest, 200)].into_iter().collect(),
        ood_fraction: 1.0,
        ..CorpusSpec::default()
    };
    let ds = generate_corpus(&spec).unwrap();
    let sources = |o: Origin| -> Vec<Vec<String>> { ds.with_origin(o).map(|p| p.source.clone()).collect() };
    let base_cfg = LmConfig { epochs: 3, ..LmConfig::default() };
    let base = train_lm(&sources(Origin::MtTrain), None, &base_cfg, None).unwrap();
    let adapted = train_lm(
        &sources(Origin::CeTrain),
        Some(&base.vocab),
        &LmConfig { epochs: 1, lr: 1e-3, ..LmConfig::default() },
        Some(&base),
    )
    .unwrap();
    let held = sources(Origin::CeTest);
    let (b, a) = (corpus_perplexity(&base, &held).unwrap(), corpus_perplexity(&adapted, &held).unwrap());
    assert!(a < b, "adapted {a} vs base {b}");
}
