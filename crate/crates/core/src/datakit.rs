//! Dataset model, line-delimited dataset files and the synthetic translation task.
//!
//! The synthetic grammar maps source tokens to target tokens one by one, with
//! two twists that a small model gets wrong some of the time:
//!
//! * a reorder marker `<swap>` swaps the translations of the two tokens after it;
//! * homograph tokens have two translations, selected by the parity class of the
//!   following source token.
//!
//! Out-of-domain sentences come from a vocabulary that only partially overlaps
//! the in-domain one and from a different bigram table.

use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SWAP_MARKER: &str = "<swap>";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    MtTrain,
    CeTrain,
    CeDev,
    CeTest,
}

impl Origin {
    pub const ALL: [Origin; 4] = [Origin::MtTrain, Origin::CeTrain, Origin::CeDev, Origin::CeTest];

    pub fn as_str(self) -> &'static str {
        match self {
            Origin::MtTrain => "mt_train",
            Origin::CeTrain => "ce_train",
            Origin::CeDev => "ce_dev",
            Origin::CeTest => "ce_test",
        }
    }
}

impl FromStr for Origin {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Origin::ALL
            .into_iter()
            .find(|o| o.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown origin {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    #[default]
    InDomain,
    OutOfDomain,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SentencePair {
    pub id: String,
    pub source: Vec<String>,
    /// Model translation (equal to the reference until a model has translated it).
    pub target: Vec<String>,
    pub reference: Option<Vec<String>>,
    pub origin: Origin,
    pub domain: Domain,
}

impl SentencePair {
    /// Exact match against the oracle reference, when one exists.
    pub fn matches_reference(&self) -> Option<bool> {
        self.reference.as_ref().map(|r| *r == self.target)
    }
}

/// On-disk form of a [`SentencePair`].
#[derive(Serialize, Deserialize)]
struct Record {
    id: String,
    source: String,
    target: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    reference: Option<String>,
    origin: Origin,
    #[serde(default, skip_serializing_if = "is_in_domain")]
    domain: Domain,
}

fn is_in_domain(d: &Domain) -> bool {
    *d == Domain::InDomain
}

fn split_tokens(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSpec {
    pub source_vocab_size: usize,
    pub length_range: (usize, usize),
    pub homograph_fraction: f64,
    pub reorder_marker_rate: f64,
    pub ood_vocab_overlap: f64,
    /// Fraction of every CE split drawn from the out-of-domain grammar.
    pub ood_fraction: f64,
    pub sizes: BTreeMap<Origin, usize>,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        let sizes = [(Origin::MtTrain, 4000), (Origin::CeTrain, 2000), (Origin::CeDev, 600), (Origin::CeTest, 600)]
            .into_iter()
            .collect();
        CorpusSpec {
            source_vocab_size: 200,
            length_range: (3, 12),
            homograph_fraction: 0.10,
            reorder_marker_rate: 0.15,
            ood_vocab_overlap: 0.5,
            ood_fraction: 0.25,
            sizes,
            seed: 0,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let probs = [
            ("homograph_fraction", self.homograph_fraction),
            ("reorder_marker_rate", self.reorder_marker_rate),
            ("ood_vocab_overlap", self.ood_vocab_overlap),
            ("ood_fraction", self.ood_fraction),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid(format!("{name} = {p} is not a probability")));
            }
        }
        let (min, max) = self.length_range;
        if min < 1 || max < min {
            return Err(Error::invalid(format!("length range [{min}, {max}] is invalid")));
        }
        if self.source_vocab_size < 4 {
            return Err(Error::invalid("source_vocab_size must be at least 4"));
        }
        if self.sizes.is_empty() || self.sizes.values().any(|&n| n == 0) {
            return Err(Error::invalid("every split size must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metadata {
    Generated(CorpusSpec),
    Note(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub pairs: Vec<SentencePair>,
    pub metadata: Metadata,
}

impl Dataset {
    pub fn new(pairs: Vec<SentencePair>, note: impl Into<String>) -> Result<Self> {
        let ds = Dataset { pairs, metadata: Metadata::Note(note.into()) };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for p in &self.pairs {
            if !seen.insert(p.id.as_str()) {
                return Err(Error::DuplicateId(p.id.clone()));
            }
            if p.source.is_empty() || p.target.is_empty() {
                return Err(Error::invalid(format!("pair {} has an empty side", p.id)));
            }
        }
        Ok(())
    }

    pub fn with_origin(&self, origin: Origin) -> impl Iterator<Item = &SentencePair> {
        self.pairs.iter().filter(move |p| p.origin == origin)
    }

    pub fn subset(&self, origin: Origin) -> Dataset {
        Dataset {
            pairs: self.with_origin(origin).cloned().collect(),
            metadata: Metadata::Note(format!("{} subset", origin.as_str())),
        }
    }

    pub fn count(&self, origin: Origin) -> usize {
        self.with_origin(origin).count()
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

#[derive(Serialize, Deserialize)]
struct MetaLine {
    meta: Metadata,
}

pub fn write_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer(&mut w, &MetaLine { meta: ds.metadata.clone() })?;
    w.write_all(b"\n")?;
    for p in &ds.pairs {
        let rec = Record {
            id: p.id.clone(),
            source: p.source.join(" "),
            target: p.target.join(" "),
            reference: p.reference.as_ref().map(|r| r.join(" ")),
            origin: p.origin,
            domain: p.domain,
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a dataset file. An optional first line `{"meta": ...}` carries metadata.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let f = std::fs::File::open(path)?;
    let mut pairs = Vec::new();
    let mut metadata = Metadata::Note(format!("loaded from {}", path.display()));
    let mut seen = HashSet::new();
    for (i, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse { path: path.to_path_buf(), line: lineno, message };
        if pairs.is_empty() && line.trim_start().starts_with("{\"meta\"") {
            let m: MetaLine = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
            metadata = m.meta;
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        if !seen.insert(rec.id.clone()) {
            return Err(Error::DuplicateId(rec.id));
        }
        let pair = SentencePair {
            source: split_tokens(&rec.source),
            target: split_tokens(&rec.target),
            reference: rec.reference.as_deref().map(split_tokens),
            origin: rec.origin,
            domain: rec.domain,
            id: rec.id,
        };
        if pair.source.is_empty() || pair.target.is_empty() {
            return Err(parse_err(format!("pair {} has an empty side", pair.id)));
        }
        pairs.push(pair);
    }
    Ok(Dataset { pairs, metadata })
}

/// Parses `ce_dev=0.5,ce_test=0.5`.
pub fn parse_fractions(s: &str) -> Result<BTreeMap<Origin, f64>> {
    let mut out = BTreeMap::new();
    for part in s.split(',').filter(|p| !p.trim().is_empty()) {
        let (k, v) = part
            .split_once('=')
            .ok_or_else(|| Error::invalid(format!("expected origin=fraction, got {part:?}")))?;
        let f: f64 = v.trim().parse().map_err(|_| Error::invalid(format!("bad fraction {v:?}")))?;
        out.insert(k.trim().parse()?, f);
    }
    Ok(out)
}

/// Reassigns origin tags of every pair according to `fractions`.
///
/// Split sizes are `round(fraction * N)`; the remainder goes to the split with
/// the largest fraction (first in origin order on ties).
pub fn split_dataset(ds: &Dataset, fractions: &BTreeMap<Origin, f64>, seed: u64) -> Result<Dataset> {
    let total: f64 = fractions.values().sum();
    if fractions.is_empty() || (total - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("fractions sum to {total}, expected 1")));
    }
    if fractions.values().any(|&f| f < 0.0) {
        return Err(Error::invalid("negative fraction"));
    }
    let n = ds.pairs.len();
    let mut counts: BTreeMap<Origin, i64> =
        fractions.iter().map(|(&o, &f)| (o, (f * n as f64).round() as i64)).collect();
    let assigned: i64 = counts.values().sum();
    let largest = fractions
        .iter()
        .fold(None::<(Origin, f64)>, |best, (&o, &f)| match best {
            Some((_, bf)) if bf >= f => best,
            _ => Some((o, f)),
        })
        .map(|(o, _)| o)
        .expect("non-empty fractions");
    *counts.get_mut(&largest).unwrap() += n as i64 - assigned;
    if counts.values().any(|&c| c < 0) {
        return Err(Error::invalid("fractions produce a negative split size"));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut pairs = ds.pairs.clone();
    let mut cursor = 0;
    for (&origin, &count) in &counts {
        for &idx in &order[cursor..cursor + count as usize] {
            pairs[idx].origin = origin;
        }
        cursor += count as usize;
    }
    Ok(Dataset { pairs, metadata: Metadata::Note(format!("split with seed {seed}")) })
}

/// The synthetic grammar. It is the oracle for reference translations.
#[derive(Clone, Debug)]
pub struct Grammar {
    vocab_size: usize,
    homographs: usize,
    in_vocab: Vec<usize>,
    ood_vocab: Vec<usize>,
    in_successors: BTreeMap<usize, Vec<usize>>,
    ood_successors: BTreeMap<usize, Vec<usize>>,
}

const SUCCESSORS_REGULAR: usize = 6;
const SUCCESSORS_HOMOGRAPH: usize = 2;
const SUCCESSOR_PROB: f64 = 0.8;

impl Grammar {
    pub fn new(spec: &CorpusSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x6772_616d_6d61_7221);
        let v = spec.source_vocab_size;
        let homographs = (v / 10).max(1);
        let regular: Vec<usize> = (homographs..v).collect();
        let in_vocab: Vec<usize> = (0..v).collect();

        let mut shuffled = regular.clone();
        shuffled.shuffle(&mut rng);
        let keep = (spec.ood_vocab_overlap * regular.len() as f64).round() as usize;
        let mut ood_vocab: Vec<usize> = (0..homographs).collect();
        ood_vocab.extend_from_slice(&shuffled[..keep]);
        ood_vocab.extend(v..v + (regular.len() - keep));
        ood_vocab.sort_unstable();

        let in_successors = Self::successor_table(&in_vocab, homographs, &mut rng);
        let ood_successors = Self::successor_table(&ood_vocab, homographs, &mut rng);
        Grammar { vocab_size: v, homographs, in_vocab, ood_vocab, in_successors, ood_successors }
    }

    fn successor_table(vocab: &[usize], homographs: usize, rng: &mut ChaCha8Rng) -> BTreeMap<usize, Vec<usize>> {
        let regular: Vec<usize> = vocab.iter().copied().filter(|&t| t >= homographs).collect();
        let homs: Vec<usize> = vocab.iter().copied().filter(|&t| t < homographs).collect();
        vocab
            .iter()
            .map(|&t| {
                let mut succ: Vec<usize> = regular.choose_multiple(rng, SUCCESSORS_REGULAR).copied().collect();
                succ.extend(homs.choose_multiple(rng, SUCCESSORS_HOMOGRAPH).copied());
                (t, succ)
            })
            .collect()
    }

    pub fn homograph_count(&self) -> usize {
        self.homographs
    }

    pub fn source_token(idx: usize) -> String {
        format!("s{idx}")
    }

    fn token_index(tok: &str) -> Option<usize> {
        tok.strip_prefix('s').and_then(|n| n.parse().ok())
    }

    pub fn is_homograph(&self, tok: &str) -> bool {
        Self::token_index(tok).is_some_and(|i| i < self.homographs)
    }

    /// Parity class used for homograph disambiguation; markers and the
    /// sentence end are class 0.
    fn parity(tok: Option<&String>) -> usize {
        tok.and_then(|t| Self::token_index(t)).map_or(0, |i| i % 2)
    }

    fn translate_token(&self, tok: &str, next: Option<&String>) -> String {
        match Self::token_index(tok) {
            Some(i) if i < self.homographs => format!("t{i}.{}", Self::parity(next)),
            Some(i) => format!("t{i}"),
            None => tok.to_string(),
        }
    }

    /// The grammar's forward map from a source sentence to its reference.
    pub fn translate(&self, source: &[String]) -> Vec<String> {
        let mut out = Vec::with_capacity(source.len());
        let mut i = 0;
        while i < source.len() {
            if source[i] == SWAP_MARKER && i + 2 < source.len() {
                out.push(SWAP_MARKER.to_string());
                out.push(self.translate_token(&source[i + 2], source.get(i + 3)));
                out.push(self.translate_token(&source[i + 1], source.get(i + 2)));
                i += 3;
            } else {
                out.push(self.translate_token(&source[i], source.get(i + 1)));
                i += 1;
            }
        }
        out
    }

    fn draw_token<R: Rng>(&self, domain: Domain, prev: Option<usize>, homograph: bool, rng: &mut R) -> usize {
        let (vocab, succ) = match domain {
            Domain::InDomain => (&self.in_vocab, &self.in_successors),
            Domain::OutOfDomain => (&self.ood_vocab, &self.ood_successors),
        };
        let in_class = |t: &usize| (*t < self.homographs) == homograph;
        if let Some(p) = prev {
            if rng.gen::<f64>() < SUCCESSOR_PROB {
                let cands: Vec<usize> = succ[&p].iter().copied().filter(in_class).collect();
                if let Some(&t) = cands.choose(rng) {
                    return t;
                }
            }
        }
        let cands: Vec<usize> = vocab.iter().copied().filter(in_class).collect();
        *cands.choose(rng).expect("non-empty token class")
    }

    /// Samples one source sentence of the given domain.
    pub fn sample_source<R: Rng>(&self, spec: &CorpusSpec, domain: Domain, rng: &mut R) -> Vec<String> {
        let (min, max) = spec.length_range;
        let len = rng.gen_range(min..=max);
        let mut out = Vec::with_capacity(len);
        let mut prev = None;
        let content = |prev: &mut Option<usize>, rng: &mut R| {
            let hom = rng.gen::<f64>() < spec.homograph_fraction;
            let t = self.draw_token(domain, *prev, hom, rng);
            *prev = Some(t);
            Self::source_token(t)
        };
        while out.len() < len {
            if len - out.len() >= 3 && rng.gen::<f64>() < spec.reorder_marker_rate {
                out.push(SWAP_MARKER.to_string());
                out.push(content(&mut prev, rng));
                out.push(content(&mut prev, rng));
            } else {
                out.push(content(&mut prev, rng));
            }
        }
        out
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }
}

/// Generates the full synthetic corpus. Deterministic in `spec.seed`.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Dataset> {
    spec.validate()?;
    let grammar = Grammar::new(spec);
    let mut pairs = Vec::new();
    for (&origin, &size) in &spec.sizes {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_mul(31).wrapping_add(origin as u64 + 1));
        let ood = if origin == Origin::MtTrain {
            0
        } else {
            (spec.ood_fraction * size as f64).round() as usize
        };
        for k in 0..size {
            let domain = if k >= size - ood { Domain::OutOfDomain } else { Domain::InDomain };
            let source = grammar.sample_source(spec, domain, &mut rng);
            let reference = grammar.translate(&source);
            pairs.push(SentencePair {
                id: format!("{}-{k:06}", origin.as_str()),
                target: reference.clone(),
                reference: Some(reference),
                source,
                origin,
                domain,
            });
        }
    }
    Ok(Dataset { pairs, metadata: Metadata::Generated(spec.clone()) })
}
