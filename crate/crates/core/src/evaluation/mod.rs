//! Decoding, EM/F1 metrics, position-grouped reports and sentence
//! perplexity probes.

mod metrics;

use std::fmt::Write as _;
use std::path::Path;

use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{AttributeKind, Document, QaPair};
use crate::error::{Error, Result};
use crate::model::{forward, forward_batch_logits, Mode, ModelParams, Real};
use crate::parallel::{self, Exec};
use crate::text::{Vocab, BOS_ID, EOS_ID};
use crate::training::qa_prompt;

pub use metrics::{exact_match, position_group, token_f1};

/// Temperature and top-k sampling in place of greedy argmax.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sampling {
    pub temperature: f64,
    pub top_k: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeOptions {
    pub max_new_tokens: usize,
    pub sampling: Option<Sampling>,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        Self {
            max_new_tokens: 8,
            sampling: None,
        }
    }
}

fn argmax<T: Real>(row: &[T]) -> u32 {
    let mut best = 0;
    for (i, x) in row.iter().enumerate() {
        if *x > row[best] {
            best = i;
        }
    }
    best as u32
}

fn sample_top_k<T: Real>(row: &[T], s: &Sampling, rng: &mut ChaCha8Rng) -> u32 {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    idx.truncate(s.top_k.max(1));
    let top = row[idx[0]].to_f64().unwrap_or(0.0);
    let t = s.temperature.max(1e-6);
    let w: Vec<f64> = idx
        .iter()
        .map(|&i| ((row[i].to_f64().unwrap_or(f64::NEG_INFINITY) - top) / t).exp())
        .collect();
    match WeightedIndex::new(&w) {
        Ok(d) => idx[d.sample(rng)] as u32,
        Err(_) => idx[0] as u32,
    }
}

fn decode_ids<T: Real>(params: &ModelParams<T>, prompt: Vec<u32>, opts: &DecodeOptions, stream: u64) -> Result<Vec<u32>> {
    let vsz = params.config.vocab_size;
    let max_len = params.config.max_seq_len;
    if prompt.len() > max_len {
        return Err(Error::TooLong {
            len: prompt.len(),
            max: max_len,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.sampling.map_or(0, |s| s.seed));
    rng.set_stream(stream);
    let mut ids = prompt;
    let mut out = Vec::new();
    for _ in 0..opts.max_new_tokens {
        if ids.len() > max_len {
            break;
        }
        let logits = forward(params, &ids, Mode::Eval, &mut rng)?;
        let row = &logits[(ids.len() - 1) * vsz..];
        let next = match &opts.sampling {
            None => argmax(row),
            Some(s) => sample_top_k(row, s, &mut rng),
        };
        if next == EOS_ID {
            break;
        }
        out.push(next);
        ids.push(next);
    }
    Ok(out)
}

/// Answers `question` from the model: instruction-wrapped prompt, argmax
/// (or sampled) tokens until EOS or `max_new_tokens`, specials dropped.
pub fn greedy_decode<T: Real>(params: &ModelParams<T>, vocab: &Vocab, question: &str, opts: &DecodeOptions) -> Result<String> {
    let prompt = qa_prompt(question, vocab)?;
    Ok(vocab.decode(&decode_ids(params, prompt, opts, 0)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub person_name: String,
    pub attribute_kind: AttributeKind,
    pub group: usize,
    pub prediction: String,
    pub gold: String,
    pub em: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub group: usize,
    pub n: usize,
    /// Percent, 0 to 100.
    pub em: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Non-empty groups in ascending order.
    pub groups: Vec<GroupMetrics>,
    pub macro_em: f64,
    pub macro_f1: f64,
    pub micro_em: f64,
    pub micro_f1: f64,
    pub predictions: Vec<Prediction>,
}

impl MetricsReport {
    pub fn total(&self) -> usize {
        self.groups.iter().map(|g| g.n).sum()
    }

    pub fn group(&self, g: usize) -> Option<&GroupMetrics> {
        self.groups.iter().find(|m| m.group == g)
    }

    /// EM per attribute kind, percent, in canonical kind order; `None` for
    /// kinds without predictions.
    pub fn em_by_attribute(&self) -> Vec<(AttributeKind, Option<f64>)> {
        AttributeKind::ALL
            .into_iter()
            .map(|k| {
                let xs: Vec<f64> = self.predictions.iter().filter(|p| p.attribute_kind == k).map(|p| p.em).collect();
                (k, (!xs.is_empty()).then(|| 100.0 * xs.iter().sum::<f64>() / xs.len() as f64))
            })
            .collect()
    }

    /// Groups aggregated from scored predictions.
    pub fn from_predictions(mut predictions: Vec<Prediction>) -> Result<Self> {
        if predictions.is_empty() {
            return Err(Error::Argument("cannot report on an empty QA set".into()));
        }
        predictions.sort_by(|a, b| {
            (a.group, &a.person_name, a.attribute_kind).cmp(&(b.group, &b.person_name, b.attribute_kind))
        });
        let mut groups: Vec<GroupMetrics> = Vec::new();
        let mut acc: Vec<(usize, f64, f64)> = Vec::new();
        for p in &predictions {
            if groups.last().map(|g| g.group) != Some(p.group) {
                groups.push(GroupMetrics {
                    group: p.group,
                    n: 0,
                    em: 0.0,
                    f1: 0.0,
                });
                acc.push((0, 0.0, 0.0));
            }
            let a = acc.last_mut().expect("pushed above");
            a.0 += 1;
            a.1 += p.em;
            a.2 += p.f1;
        }
        for (g, (n, em, f1)) in groups.iter_mut().zip(&acc) {
            g.n = *n;
            g.em = 100.0 * em / *n as f64;
            g.f1 = 100.0 * f1 / *n as f64;
        }
        let ng = groups.len() as f64;
        let total = predictions.len() as f64;
        Ok(Self {
            macro_em: groups.iter().map(|g| g.em).sum::<f64>() / ng,
            macro_f1: groups.iter().map(|g| g.f1).sum::<f64>() / ng,
            micro_em: 100.0 * predictions.iter().map(|p| p.em).sum::<f64>() / total,
            micro_f1: 100.0 * predictions.iter().map(|p| p.f1).sum::<f64>() / total,
            groups,
            predictions,
        })
    }

    /// `group,n,em,f1` rows, then `macro` and `micro` summary rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("group,n,em,f1\n");
        for g in &self.groups {
            let _ = writeln!(s, "{},{},{:.4},{:.4}", g.group, g.n, g.em, g.f1);
        }
        let n = self.total();
        let _ = writeln!(s, "macro,{n},{:.4},{:.4}", self.macro_em, self.macro_f1);
        let _ = writeln!(s, "micro,{n},{:.4},{:.4}", self.micro_em, self.micro_f1);
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Decodes every QA pair and reports EM/F1 per position group.
///
/// A pair's group is `position_group(source_sentence_index, groups)`.
pub fn evaluate<T: Real>(
    params: &ModelParams<T>,
    vocab: &Vocab,
    qa: &[QaPair],
    groups: usize,
    opts: &DecodeOptions,
) -> Result<MetricsReport> {
    evaluate_with(Exec::default(), params, vocab, qa, groups, opts)
}

pub fn evaluate_with<T: Real>(
    exec: Exec,
    params: &ModelParams<T>,
    vocab: &Vocab,
    qa: &[QaPair],
    groups: usize,
    opts: &DecodeOptions,
) -> Result<MetricsReport> {
    if groups == 0 {
        return Err(Error::Argument("group count must be at least 1".into()));
    }
    let preds = parallel::map_indexed(exec, qa, |i, q| -> Result<Prediction> {
        let prompt = qa_prompt(&q.question, vocab)?;
        let text = vocab.decode(&decode_ids(params, prompt, opts, i as u64)?);
        Ok(Prediction {
            person_name: q.person_name.clone(),
            attribute_kind: q.attribute_kind,
            group: position_group(q.source_sentence_index, groups),
            em: exact_match(&text, &q.answer),
            f1: token_f1(&text, &q.answer),
            prediction: text,
            gold: q.answer.clone(),
        })
    });
    MetricsReport::from_predictions(preds.into_iter().collect::<Result<Vec<_>>>()?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerplexityMode {
    /// Conditioned on `[BOS, title]` and every sentence before the target.
    InContext,
    /// Conditioned on `[BOS, title]` only.
    TitleOnly,
}

impl PerplexityMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PerplexityMode::InContext => "in_context",
            PerplexityMode::TitleOnly => "title_only",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerplexityRecord {
    pub k: usize,
    pub mode: PerplexityMode,
    pub ppl: f64,
}

/// Prefix ids and target ids for probing sentence `target` of `doc`.
fn probe_sequence(doc: &Document, target: usize, mode: PerplexityMode, vocab: &Vocab) -> Result<(Vec<u32>, usize)> {
    if target >= doc.sentences.len() {
        return Err(Error::Argument(format!(
            "sentence {target} outside document of {} sentences",
            doc.sentences.len()
        )));
    }
    let mut ids = vec![BOS_ID];
    ids.extend(vocab.encode_ids(&doc.title)?);
    if mode == PerplexityMode::InContext {
        for s in &doc.sentences[..target] {
            ids.extend(vocab.encode_ids(s)?);
        }
    }
    let prefix = ids.len();
    ids.extend(vocab.encode_ids(&doc.sentences[target])?);
    Ok((ids, prefix))
}

fn log_softmax_at<T: Real>(row: &[T], label: usize) -> f64 {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, x| m.max(x.to_f64().unwrap_or(f64::NAN)));
    let z: f64 = row.iter().map(|x| (x.to_f64().unwrap_or(f64::NAN) - max).exp()).sum();
    row[label].to_f64().unwrap_or(f64::NAN) - max - z.ln()
}

/// Summed NLL and token count of sentence `target` (zero-based) in `doc`.
pub fn sentence_nll<T: Real>(
    params: &ModelParams<T>,
    vocab: &Vocab,
    doc: &Document,
    target: usize,
    mode: PerplexityMode,
) -> Result<(f64, usize)> {
    let (ids, prefix) = probe_sequence(doc, target, mode, vocab)?;
    let vsz = params.config.vocab_size;
    let inputs = &ids[..ids.len() - 1];
    let logits = forward_batch_logits(params, &[inputs])?.pop().expect("one sequence");
    let mut nll = 0.0;
    for pos in prefix..ids.len() {
        let row = &logits[(pos - 1) * vsz..pos * vsz];
        nll -= log_softmax_at(row, ids[pos] as usize);
    }
    Ok((nll, ids.len() - prefix))
}

/// `exp` of the mean per-token NLL of sentence `target` (zero-based) of
/// `doc_k`. `k` in the record is its one-based position.
pub fn sentence_perplexity<T: Real>(
    params: &ModelParams<T>,
    vocab: &Vocab,
    doc_k: &Document,
    target: usize,
    mode: PerplexityMode,
) -> Result<PerplexityRecord> {
    let (nll, n) = sentence_nll(params, vocab, doc_k, target, mode)?;
    Ok(PerplexityRecord {
        k: target + 1,
        mode,
        ppl: (nll / n as f64).exp(),
    })
}

/// Perplexity pooled over documents: `exp(total NLL / total tokens)` of the
/// sentence realizing `kind` in each document.
pub fn pooled_perplexity<T: Real>(
    params: &ModelParams<T>,
    vocab: &Vocab,
    docs: &[Document],
    kind: AttributeKind,
    mode: PerplexityMode,
) -> Result<PerplexityRecord> {
    if docs.is_empty() {
        return Err(Error::Argument("no documents to probe".into()));
    }
    let parts = parallel::map_indexed(Exec::default(), docs, |_, d| -> Result<(usize, f64, usize)> {
        let at = d
            .position_of(kind)
            .ok_or_else(|| Error::Argument(format!("document {:?} has no {kind} sentence", d.title)))?;
        let (nll, n) = sentence_nll(params, vocab, d, at, mode)?;
        Ok((at + 1, nll, n))
    });
    let (mut nll, mut n, mut k) = (0.0, 0usize, None);
    for p in parts {
        let (at, a, b) = p?;
        if *k.get_or_insert(at) != at {
            return Err(Error::Argument(format!("{kind} sentence is not at one position across documents")));
        }
        nll += a;
        n += b;
    }
    Ok(PerplexityRecord {
        k: k.expect("non-empty"),
        mode,
        ppl: (nll / n as f64).exp(),
    })
}

pub fn perplexity_csv(records: &[PerplexityRecord]) -> String {
    let mut s = String::from("k,mode,ppl\n");
    for r in records {
        let _ = writeln!(s, "{},{},{:.6}", r.k, r.mode.as_str(), r.ppl);
    }
    s
}
