//! Glass-box feature extraction: per-token mismatch features, contrastive LM
//! features, MC-dropout statistics and the naive length-normalized logP.
//!
//! All logarithms are natural. The entropy feature is Shannon entropy
//! `-sum p ln p`; a negated convention would be absorbed by the first learned
//! linear layer, and the header records which one is used.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datakit::SentencePair;
use crate::error::{Error, Result};
use crate::glassbox::{lm_score, mc_dropout_replays, GlassBoxTrace, LanguageModel, LmScore, Seq2SeqModel, StepRecord};
use crate::nn;
use crate::Label;

pub const MISMATCH_WIDTH: usize = 5;
pub const CONTRASTIVE_WIDTH: usize = 2;
pub const MC_WIDTH: usize = 2;
pub const META_WIDTH: usize = 3;
pub const ENTROPY_CONVENTION: &str = "shannon: -sum_t P(t) ln P(t), non-negative";

/// `[match, log maxP - log P(t*), logit(argmax), logit(t*), entropy]`.
pub fn mismatch(step: &StepRecord) -> [f64; MISMATCH_WIDTH] {
    let a = nn::argmax(&step.logits);
    let t = step.token;
    let logp = nn::log_softmax(&step.logits);
    let entropy: f64 = -logp.iter().filter(|l| l.is_finite()).map(|&l| l.exp() * l).sum::<f64>();
    [
        if a == t { 1.0 } else { 0.0 },
        step.logits[a] - step.logits[t],
        step.logits[a],
        step.logits[t],
        entropy.max(0.0),
    ]
}

fn step_row(step: &StepRecord) -> Vec<f64> {
    let mut row = step.hidden.clone();
    row.extend_from_slice(&mismatch(step));
    row
}

/// Per-position mean and unbiased variance over the rows of an
/// `n_runs x T` log-probability matrix. One run gives variance 0.
pub fn mc_features(samples: &[Vec<f64>]) -> Result<Vec<(f64, f64)>> {
    let t = samples.first().map_or(0, Vec::len);
    if t == 0 {
        return Err(Error::invalid("empty MC sample matrix"));
    }
    if samples.iter().any(|r| r.len() != t) {
        return Err(Error::shape("ragged MC sample matrix"));
    }
    let n = samples.len();
    if n == 1 {
        log::warn!("a single MC run has no variance; reporting 0");
    }
    Ok((0..t)
        .map(|k| {
            let mean = samples.iter().map(|r| r[k]).sum::<f64>() / n as f64;
            let var = if n > 1 { samples.iter().map(|r| (r[k] - mean).powi(2)).sum::<f64>() / (n - 1) as f64 } else { 0.0 };
            (mean, var)
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct MtFeatures {
    pub target_mt: Vec<Vec<f64>>,
    pub source_enc: Option<Vec<Vec<f64>>>,
}

/// Per target position: decoder softmax input, the 5 mismatch features and,
/// when given, the MC mean and variance of `log P(t_k*)`.
pub fn mt_features(trace: &GlassBoxTrace, include_encoder: bool, mc: Option<&[(f64, f64)]>) -> Result<MtFeatures> {
    if trace.steps.len() != trace.target.len() {
        return Err(Error::shape(format!(
            "trace has {} steps for {} target tokens",
            trace.steps.len(),
            trace.target.len()
        )));
    }
    if let Some(mc) = mc {
        if mc.len() != trace.steps.len() {
            return Err(Error::shape(format!("{} MC positions for {} target tokens", mc.len(), trace.steps.len())));
        }
    }
    let target_mt = trace
        .steps
        .iter()
        .enumerate()
        .map(|(k, s)| {
            let mut row = step_row(s);
            if let Some(mc) = mc {
                row.extend_from_slice(&[mc[k].0, mc[k].1]);
            }
            row
        })
        .collect();
    let source_enc = if include_encoder {
        if trace.encoder_states.len() != trace.source.len() {
            return Err(Error::shape("encoder states do not match the source length"));
        }
        Some(trace.encoder_states.clone())
    } else {
        None
    };
    Ok(MtFeatures { target_mt, source_enc })
}

/// Per source position: base LM block and, with an adapted LM, the adapted
/// block plus `[argmax_base == argmax_adapted, log P_base(s*) - log P_adapted(s*)]`.
pub fn lm_features(base: &LmScore, adapted: Option<&LmScore>) -> Result<Vec<Vec<f64>>> {
    let Some(adapted) = adapted else {
        return Ok(base.steps.iter().map(step_row).collect());
    };
    if adapted.steps.len() != base.steps.len() {
        return Err(Error::shape(format!("LM traces of length {} and {}", base.steps.len(), adapted.steps.len())));
    }
    base.steps
        .iter()
        .zip(&adapted.steps)
        .map(|(b, a)| {
            if a.token != b.token {
                return Err(Error::invalid("LM traces are over different sentences"));
            }
            let mut row = step_row(b);
            row.extend(step_row(a));
            let same = nn::argmax(&b.logits) == nn::argmax(&a.logits);
            row.push(if same { 1.0 } else { 0.0 });
            row.push(b.log_prob() - a.log_prob());
            Ok(row)
        })
        .collect()
}

/// `(1/T) sum_k log P(t_k*)`.
pub fn naive_logp(trace: &GlassBoxTrace) -> Result<f64> {
    if trace.steps.is_empty() {
        return Err(Error::invalid("naive logP of an empty target"));
    }
    Ok(trace.token_log_probs().iter().sum::<f64>() / trace.steps.len() as f64)
}

/// `[ln |src|, ln |tgt|, |tgt| / |src|]`.
pub fn meta_features(source_len: usize, target_len: usize) -> [f64; META_WIDTH] {
    let (s, t) = (source_len.max(1) as f64, target_len.max(1) as f64);
    [s.ln(), t.ln(), t / s]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureBundle {
    pub id: String,
    pub target_mt: Vec<Vec<f64>>,
    pub source_enc: Option<Vec<Vec<f64>>>,
    pub source_lm: Option<Vec<Vec<f64>>>,
    pub naive_logp: f64,
    pub meta: [f64; META_WIDTH],
    pub label: Option<Label>,
}

impl FeatureBundle {
    /// Sequence blocks in header order.
    pub fn blocks(&self) -> Vec<(&'static str, &[Vec<f64>])> {
        let mut out: Vec<(&'static str, &[Vec<f64>])> = vec![(BLOCK_TARGET_MT, &self.target_mt)];
        if let Some(b) = &self.source_enc {
            out.push((BLOCK_SOURCE_ENC, b));
        }
        if let Some(b) = &self.source_lm {
            out.push((BLOCK_SOURCE_LM, b));
        }
        out
    }

    fn round_to_f32(&mut self) {
        let r = |v: &mut f64| *v = *v as f32 as f64;
        for block in [Some(&mut self.target_mt), self.source_enc.as_mut(), self.source_lm.as_mut()].into_iter().flatten() {
            block.iter_mut().flatten().for_each(r);
        }
        r(&mut self.naive_logp);
        self.meta.iter_mut().for_each(r);
    }
}

pub const BLOCK_TARGET_MT: &str = "target_mt";
pub const BLOCK_SOURCE_ENC: &str = "source_enc";
pub const BLOCK_SOURCE_LM: &str = "source_lm";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub name: String,
    pub width: usize,
    pub layout: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractConfig {
    pub include_encoder: bool,
    pub lm: bool,
    pub contrastive: bool,
    pub mc_runs: usize,
    /// `None` uses the translator's training dropout rate.
    pub mc_dropout: Option<f64>,
    pub mc_seed: u64,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        ExtractConfig { include_encoder: true, lm: false, contrastive: false, mc_runs: 0, mc_dropout: None, mc_seed: 0 }
    }
}

/// Self-describing layout shared by every bundle of one extraction run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureHeader {
    pub blocks: Vec<BlockSpec>,
    pub meta_layout: String,
    pub entropy: String,
    pub config: ExtractConfig,
}

impl FeatureHeader {
    pub fn width(&self, name: &str) -> Option<usize> {
        self.blocks.iter().find(|b| b.name == name).map(|b| b.width)
    }

    pub fn validate(&self, b: &FeatureBundle) -> Result<()> {
        let blocks = b.blocks();
        if blocks.len() != self.blocks.len() {
            return Err(Error::shape(format!("bundle {} has {} blocks, header {}", b.id, blocks.len(), self.blocks.len())));
        }
        for ((name, rows), spec) in blocks.iter().zip(&self.blocks) {
            if *name != spec.name {
                return Err(Error::shape(format!("bundle {} block {name} where header has {}", b.id, spec.name)));
            }
            if rows.is_empty() {
                return Err(Error::shape(format!("bundle {} block {name} is empty", b.id)));
            }
            if let Some(r) = rows.iter().find(|r| r.len() != spec.width) {
                return Err(Error::shape(format!("bundle {} block {name} row width {} != {}", b.id, r.len(), spec.width)));
            }
            if rows.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("bundle {} block {name} has non-finite values", b.id)));
            }
        }
        Ok(())
    }
}

/// Models feeding one extraction run.
pub struct Extractor<'a> {
    pub mt: &'a Seq2SeqModel,
    pub base_lm: Option<&'a LanguageModel>,
    pub adapted_lm: Option<&'a LanguageModel>,
    pub config: ExtractConfig,
}

impl<'a> Extractor<'a> {
    pub fn new(mt: &'a Seq2SeqModel, config: ExtractConfig) -> Self {
        Extractor { mt, base_lm: None, adapted_lm: None, config }
    }

    pub fn with_lms(mut self, base: &'a LanguageModel, adapted: Option<&'a LanguageModel>) -> Self {
        self.base_lm = Some(base);
        self.adapted_lm = adapted;
        self
    }

    fn mc_rate(&self) -> f64 {
        self.config.mc_dropout.unwrap_or(self.mt.config.dropout)
    }

    pub fn header(&self) -> Result<FeatureHeader> {
        let c = &self.config;
        let dh = self.mt.config.hidden;
        let mc = if c.mc_runs > 0 { MC_WIDTH } else { 0 };
        let mut blocks = vec![BlockSpec {
            name: BLOCK_TARGET_MT.into(),
            width: dh + MISMATCH_WIDTH + mc,
            layout: format!(
                "decoder softmax input [{dh}] | match, log maxP - log P(t*), logit(argmax), logit(t*), entropy{}",
                if mc > 0 { " | mc mean, mc variance of log P(t*)" } else { "" }
            ),
        }];
        if c.include_encoder {
            blocks.push(BlockSpec {
                name: BLOCK_SOURCE_ENC.into(),
                width: dh,
                layout: format!("top encoder state [{dh}]"),
            });
        }
        if c.lm {
            let base = self.base_lm.ok_or_else(|| Error::invalid("LM features requested without a base LM"))?;
            let w = base.config.hidden + MISMATCH_WIDTH;
            let (width, layout) = if c.contrastive {
                let adapted = self.adapted_lm.ok_or_else(|| Error::invalid("contrastive features need an adapted LM"))?;
                if adapted.config.hidden != base.config.hidden {
                    return Err(Error::shape("base and adapted LM widths differ"));
                }
                (
                    2 * w + CONTRASTIVE_WIDTH,
                    "base LM [hidden | 5 mismatch] | adapted LM [hidden | 5 mismatch] | argmax equal, log P_base - log P_adapted"
                        .to_string(),
                )
            } else {
                (w, "base LM [hidden | 5 mismatch]".to_string())
            };
            blocks.push(BlockSpec { name: BLOCK_SOURCE_LM.into(), width, layout });
        }
        Ok(FeatureHeader {
            blocks,
            meta_layout: "ln |src|, ln |tgt|, |tgt| / |src|".into(),
            entropy: ENTROPY_CONVENTION.into(),
            config: c.clone(),
        })
    }

    /// Features for the pair's stored translation. Values are rounded to f32
    /// so in-memory bundles equal their on-disk image.
    pub fn extract(&self, pair: &SentencePair, label: Option<Label>) -> Result<FeatureBundle> {
        let c = &self.config;
        let trace = self.mt.score_pair(&pair.source, &pair.target)?;
        let mc = if c.mc_runs > 0 {
            let rows = mc_dropout_replays(self.mt, &pair.source, &pair.target, c.mc_runs, self.mc_rate(), c.mc_seed)?;
            Some(mc_features(&rows)?)
        } else {
            None
        };
        let mt = mt_features(&trace, c.include_encoder, mc.as_deref())?;
        let source_lm = if c.lm {
            let base = self.base_lm.ok_or_else(|| Error::invalid("LM features requested without a base LM"))?;
            let bs = lm_score(base, &pair.source)?;
            let adapted = if c.contrastive {
                let a = self.adapted_lm.ok_or_else(|| Error::invalid("contrastive features need an adapted LM"))?;
                Some(lm_score(a, &pair.source)?)
            } else {
                None
            };
            Some(lm_features(&bs, adapted.as_ref())?)
        } else {
            None
        };
        let mut b = FeatureBundle {
            id: pair.id.clone(),
            target_mt: mt.target_mt,
            source_enc: mt.source_enc,
            source_lm,
            naive_logp: naive_logp(&trace)?,
            meta: meta_features(pair.source.len(), pair.target.len()),
            label,
        };
        b.round_to_f32();
        Ok(b)
    }

    pub fn extract_all(&self, pairs: &[SentencePair], labels: &[Option<Label>]) -> Result<Vec<FeatureBundle>> {
        if pairs.len() != labels.len() {
            return Err(Error::shape("one label slot per pair required"));
        }
        pairs.iter().zip(labels).map(|(p, l)| self.extract(p, *l)).collect()
    }
}

const MAGIC: &[u8; 4] = b"CEFT";
const VERSION: u32 = 1;

fn put_f32s(w: &mut impl Write, vals: impl Iterator<Item = f64>) -> Result<()> {
    for v in vals {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

fn put_u32(w: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::shape("value exceeds u32"))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

/// Binary layout: magic, version, header length, JSON header, record count,
/// then per record: id, label byte, naive logP, meta, and each block as a row
/// count followed by `rows * width` little-endian f32 values.
pub fn write_features(header: &FeatureHeader, bundles: &[FeatureBundle], path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    let json = serde_json::to_vec(header)?;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    put_u32(&mut w, json.len())?;
    w.write_all(&json)?;
    put_u32(&mut w, bundles.len())?;
    for b in bundles {
        header.validate(b)?;
        put_u32(&mut w, b.id.len())?;
        w.write_all(b.id.as_bytes())?;
        w.write_all(&[match b.label {
            Some(Label::Good) => 0,
            Some(Label::NeedsWork) => 1,
            None => 255,
        }])?;
        put_f32s(&mut w, std::iter::once(b.naive_logp).chain(b.meta.iter().copied()))?;
        for (_, rows) in b.blocks() {
            put_u32(&mut w, rows.len())?;
            put_f32s(&mut w, rows.iter().flatten().copied())?;
        }
    }
    w.flush()?;
    Ok(())
}

struct Cursor<R> {
    r: R,
}

impl<R: Read> Cursor<R> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.r.read_exact(&mut buf).map_err(|e| Error::Checkpoint(format!("truncated feature file: {e}")))?;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()) as usize)
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        Ok(self.bytes(4 * n)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect())
    }
}

pub fn read_features(path: &Path) -> Result<(FeatureHeader, Vec<FeatureBundle>)> {
    let mut c = Cursor { r: std::io::BufReader::new(std::fs::File::open(path)?) };
    if c.bytes(4)? != MAGIC {
        return Err(Error::Checkpoint(format!("{} is not a feature file", path.display())));
    }
    let version = c.u32()? as u32;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported feature file version {version}")));
    }
    let n = c.u32()?;
    let header: FeatureHeader = serde_json::from_slice(&c.bytes(n)?)?;
    let count = c.u32()?;
    let mut bundles = Vec::with_capacity(count);
    for _ in 0..count {
        let n = c.u32()?;
        let id = String::from_utf8(c.bytes(n)?).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let label = match c.bytes(1)?[0] {
            0 => Some(Label::Good),
            1 => Some(Label::NeedsWork),
            255 => None,
            x => return Err(Error::Checkpoint(format!("bad label byte {x}"))),
        };
        let scalars = c.f32s(1 + META_WIDTH)?;
        let mut blocks = Vec::new();
        for spec in &header.blocks {
            let rows = c.u32()?;
            let flat = c.f32s(rows * spec.width)?;
            blocks.push(flat.chunks(spec.width.max(1)).map(<[f64]>::to_vec).collect::<Vec<_>>());
        }
        let mut it = header.blocks.iter().zip(blocks);
        let target_mt = it.next().map(|(_, b)| b).ok_or_else(|| Error::Checkpoint("no target block".into()))?;
        let mut bundle = FeatureBundle {
            id,
            target_mt,
            source_enc: None,
            source_lm: None,
            naive_logp: scalars[0],
            meta: [scalars[1], scalars[2], scalars[3]],
            label,
        };
        for (spec, b) in it {
            match spec.name.as_str() {
                BLOCK_SOURCE_ENC => bundle.source_enc = Some(b),
                BLOCK_SOURCE_LM => bundle.source_lm = Some(b),
                other => return Err(Error::Checkpoint(format!("unknown block {other}"))),
            }
        }
        bundles.push(bundle);
    }
    Ok((header, bundles))
}
