use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::corpus::{Document, QaPair};
use crate::error::{Error, Result};
use crate::model::Example;
use crate::text::{TokenSequence, Vocab, BOS_ID, EOS_ID, INST_CLOSE_ID, INST_OPEN_ID};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExampleKind {
    Document,
    Qa,
}

/// A next-token example: `label_ids[i]` is the original token at position
/// `i + 1`, whatever `input_ids` holds after corruption.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainExample {
    pub input_ids: Vec<u32>,
    pub label_ids: Vec<u32>,
    pub loss_mask: Vec<u8>,
    pub corruption_mask: Vec<u8>,
    pub kind: ExampleKind,
}

impl TrainExample {
    pub fn as_example(&self) -> Example<'_> {
        Example {
            inputs: &self.input_ids,
            labels: &self.label_ids,
            loss_mask: &self.loss_mask,
        }
    }

    pub fn supervised(&self) -> usize {
        self.loss_mask.iter().filter(|&&m| m != 0).count()
    }

    /// Splits a full sequence into shifted inputs and labels. `supervised`
    /// is the index range of `full` whose tokens are prediction targets.
    fn from_full(full: Vec<u32>, supervised: std::ops::Range<usize>, kind: ExampleKind) -> Self {
        let n = full.len() - 1;
        let loss_mask = (0..n).map(|i| supervised.contains(&(i + 1)) as u8).collect();
        Self {
            input_ids: full[..n].to_vec(),
            label_ids: full[1..].to_vec(),
            loss_mask,
            corruption_mask: vec![0; n],
            kind,
        }
    }

    fn corrupt<R: Rng + ?Sized>(&mut self, ratio: f64, vocab: &Vocab, rng: &mut R) {
        let seq = TokenSequence {
            ids: std::mem::take(&mut self.input_ids),
            loss_mask: vec![],
            corruption_mask: std::mem::take(&mut self.corruption_mask),
        };
        let out = corrupt_tokens(&seq, ratio, vocab, rng);
        self.input_ids = out.ids;
        self.corruption_mask = out.corruption_mask;
    }
}

/// Replaces each content position with probability `ratio` by a different
/// content token drawn uniformly. Specials are never selected or produced.
pub fn corrupt_tokens<R: Rng + ?Sized>(seq: &TokenSequence, ratio: f64, vocab: &Vocab, rng: &mut R) -> TokenSequence {
    let mut out = seq.clone();
    if out.corruption_mask.len() != out.ids.len() {
        out.corruption_mask = vec![0; out.ids.len()];
    }
    let first = vocab.first_content_id();
    let n_content = vocab.content_len() as u32;
    if ratio <= 0.0 || n_content < 2 {
        return out;
    }
    for (id, flag) in out.ids.iter_mut().zip(out.corruption_mask.iter_mut()) {
        if Vocab::is_special(*id) || !rng.random_bool(ratio) {
            continue;
        }
        // Uniform over the other n_content - 1 tokens.
        let mut r = first + rng.random_range(0..n_content - 1);
        if r >= *id {
            r += 1;
        }
        *id = r;
        *flag = 1;
    }
    out
}

/// Uniform random permutation of the sentences; tags move with them.
pub fn shuffle_sentences<R: Rng + ?Sized>(doc: &Document, rng: &mut R) -> Document {
    let mut order: Vec<usize> = (0..doc.sentences.len()).collect();
    order.shuffle(rng);
    Document {
        title: doc.title.clone(),
        template_set: doc.template_set,
        sentences: order.iter().map(|&i| doc.sentences[i].clone()).collect(),
        source_attribute: order.iter().map(|&i| doc.source_attribute[i]).collect(),
    }
}

fn check_len(len: usize, max_seq_len: usize) -> Result<()> {
    if len > max_seq_len {
        return Err(Error::TooLong { len, max: max_seq_len });
    }
    Ok(())
}

/// `[BOS, title, body]` with loss on the body tokens only.
pub fn build_doc_example<R: Rng + ?Sized>(
    doc: &Document,
    vocab: &Vocab,
    config: &TrainConfig,
    max_seq_len: usize,
    rng: &mut R,
) -> Result<TrainExample> {
    let shuffled;
    let doc = if config.shuffle {
        shuffled = shuffle_sentences(doc, rng);
        &shuffled
    } else {
        doc
    };
    let title = vocab.encode_ids(&doc.title)?;
    let body = vocab.encode_ids(&doc.body())?;
    if body.is_empty() {
        return Err(Error::Argument(format!("document {:?} has no body", doc.title)));
    }
    let mut full = Vec::with_capacity(1 + title.len() + body.len());
    full.push(BOS_ID);
    full.extend(&title);
    full.extend(&body);
    check_len(full.len() - 1, max_seq_len)?;
    let start = 1 + title.len();
    let end = full.len();
    let mut ex = TrainExample::from_full(full, start..end, ExampleKind::Document);
    if config.corruption_ratio > 0.0 {
        ex.corrupt(config.corruption_ratio, vocab, rng);
        if !config.denoise_loss_on_corrupted {
            drop_replaced_targets(&mut ex);
        }
    }
    Ok(ex)
}

/// Input position `p` holds the token that label position `p - 1` predicts,
/// so a replaced input removes that target.
fn drop_replaced_targets(ex: &mut TrainExample) {
    for p in 1..ex.corruption_mask.len() {
        if ex.corruption_mask[p] != 0 {
            ex.loss_mask[p - 1] = 0;
        }
    }
}

/// `[BOS, INST_OPEN, question, INST_CLOSE, answer, EOS]` with loss on the
/// answer and EOS.
pub fn build_qa_example<R: Rng + ?Sized>(
    qa: &QaPair,
    vocab: &Vocab,
    config: &TrainConfig,
    max_seq_len: usize,
    rng: &mut R,
) -> Result<TrainExample> {
    let prompt = qa_prompt(&qa.question, vocab)?;
    let answer = vocab.encode_ids(&qa.answer)?;
    let start = prompt.len();
    let mut full = prompt;
    full.extend(&answer);
    full.push(EOS_ID);
    check_len(full.len() - 1, max_seq_len)?;
    let end = full.len();
    let mut ex = TrainExample::from_full(full, start..end, ExampleKind::Qa);
    if config.corrupt_qa && config.corruption_ratio > 0.0 {
        ex.corrupt(config.corruption_ratio, vocab, rng);
        if !config.denoise_loss_on_corrupted {
            drop_replaced_targets(&mut ex);
        }
    }
    Ok(ex)
}

/// `[BOS, INST_OPEN, question, INST_CLOSE]`, the decoding prompt.
pub fn qa_prompt(question: &str, vocab: &Vocab) -> Result<Vec<u32>> {
    let q = vocab.encode_ids(question)?;
    let mut ids = Vec::with_capacity(q.len() + 3);
    ids.push(BOS_ID);
    ids.push(INST_OPEN_ID);
    ids.extend(q);
    ids.push(INST_CLOSE_ID);
    Ok(ids)
}

/// Documents and QA pairs a run samples from.
#[derive(Debug, Clone)]
pub struct TrainPools<'a> {
    pub documents: Vec<&'a Document>,
    pub qa: Vec<&'a QaPair>,
}

/// Fills a batch slot by slot: QA with probability `qa_fraction`, else a
/// document. `order_rng` picks slots and items, `noise_rng` drives shuffling
/// and corruption, so recipes that differ only in noise see the same items.
pub fn sample_batch<R1: Rng + ?Sized, R2: Rng + ?Sized>(
    pools: &TrainPools<'_>,
    vocab: &Vocab,
    config: &TrainConfig,
    max_seq_len: usize,
    order_rng: &mut R1,
    noise_rng: &mut R2,
) -> Result<Vec<TrainExample>> {
    let f = config.qa_fraction;
    if f > 0.0 && pools.qa.is_empty() {
        return Err(Error::Config("qa_fraction > 0 but there are no training QA pairs".into()));
    }
    if f < 1.0 && pools.documents.is_empty() {
        return Err(Error::Config("qa_fraction < 1 but there are no training documents".into()));
    }
    (0..config.batch_size)
        .map(|_| {
            if order_rng.random_bool(f) {
                let qa = pools.qa[order_rng.random_range(0..pools.qa.len())];
                build_qa_example(qa, vocab, config, max_seq_len, noise_rng)
            } else {
                let doc = pools.documents[order_rng.random_range(0..pools.documents.len())];
                build_doc_example(doc, vocab, config, max_seq_len, noise_rng)
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_profiles, render_canonical, render_qa, AttributeKind, AttributePools};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fixture() -> (Vec<Document>, Vec<QaPair>, Vocab) {
        let ps = generate_profiles(30, &AttributePools::default(), 1).unwrap();
        let docs: Vec<Document> = ps.iter().map(|p| render_canonical(p, 1).unwrap()).collect();
        let qa: Vec<QaPair> = ps.iter().flat_map(render_qa).collect();
        let texts = docs
            .iter()
            .flat_map(|d| std::iter::once(d.title.clone()).chain(d.sentences.clone()))
            .chain(qa.iter().flat_map(|q| [q.question.clone(), q.answer.clone()]))
            .collect::<Vec<_>>();
        let vocab = Vocab::build(texts.iter().map(String::as_str));
        (docs, qa, vocab)
    }

    #[test]
    fn ar_document_layout() {
        let (docs, _, vocab) = fixture();
        let cfg = TrainConfig::default();
        let ex = build_doc_example(&docs[0], &vocab, &cfg, 128, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let title = vocab.encode_ids(&docs[0].title).unwrap();
        let body = vocab.encode_ids(&docs[0].body()).unwrap();
        assert_eq!(ex.input_ids[0], BOS_ID);
        assert_eq!(&ex.input_ids[1..=title.len()], &title[..]);
        assert_eq!(&ex.label_ids[title.len()..], &body[..]);
        assert_eq!(ex.supervised(), body.len());
        assert!(ex.loss_mask[..title.len()].iter().all(|&m| m == 0));
        assert!(ex.corruption_mask.iter().all(|&m| m == 0));
    }

    #[test]
    fn denoise_off_drops_one_target_per_replaced_body_token() {
        let (docs, _, vocab) = fixture();
        let cfg = TrainConfig {
            corruption_ratio: 0.3,
            denoise_loss_on_corrupted: false,
            ..TrainConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for doc in &docs {
            let ex = build_doc_example(doc, &vocab, &cfg, 128, &mut rng).unwrap();
            let t = vocab.encode_ids(&doc.title).unwrap().len();
            let body = vocab.encode_ids(&doc.body()).unwrap().len();
            let corrupted_body = ex.corruption_mask[1 + t..].iter().filter(|&&m| m != 0).count();
            assert_eq!(ex.supervised(), body - corrupted_body);
        }
    }

    #[test]
    fn qa_layout_and_default_no_corruption() {
        let (_, qa, vocab) = fixture();
        let cfg = TrainConfig {
            corruption_ratio: 0.5,
            ..TrainConfig::default()
        };
        let pair = qa.iter().find(|q| q.attribute_kind == AttributeKind::Birthday).unwrap();
        let ex = build_qa_example(pair, &vocab, &cfg, 128, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        // Birthdays are three tokens, plus EOS.
        assert_eq!(ex.supervised(), 4);
        assert!(ex.corruption_mask.iter().all(|&m| m == 0));
        assert_eq!(*ex.label_ids.last().unwrap(), EOS_ID);
        assert_eq!(ex.input_ids[1], INST_OPEN_ID);
    }

    #[test]
    fn corruption_keeps_specials_and_changes_selected() {
        let (docs, _, vocab) = fixture();
        let cfg = TrainConfig {
            corruption_ratio: 0.5,
            ..TrainConfig::default()
        };
        let clean = build_doc_example(&docs[0], &vocab, &TrainConfig::default(), 128, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let ex = build_doc_example(&docs[0], &vocab, &cfg, 128, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(ex.label_ids, clean.label_ids);
        assert_eq!(ex.input_ids[0], BOS_ID);
        for i in 0..ex.input_ids.len() {
            let changed = ex.input_ids[i] != clean.input_ids[i];
            assert_eq!(changed, ex.corruption_mask[i] == 1);
            assert!(!Vocab::is_special(ex.input_ids[i]) || i == 0);
        }
    }

    #[test]
    fn overlong_is_an_error() {
        let (docs, qa, vocab) = fixture();
        let cfg = TrainConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            build_doc_example(&docs[0], &vocab, &cfg, 10, &mut rng),
            Err(Error::TooLong { .. })
        ));
        assert!(matches!(
            build_qa_example(&qa[0], &vocab, &cfg, 5, &mut rng),
            Err(Error::TooLong { .. })
        ));
    }

    #[test]
    fn batch_mix_follows_qa_fraction() {
        let (docs, qa, vocab) = fixture();
        let pools = TrainPools {
            documents: docs.iter().collect(),
            qa: qa.iter().collect(),
        };
        let mut cfg = TrainConfig {
            batch_size: 10_000,
            ..TrainConfig::default()
        };
        let mut o = ChaCha8Rng::seed_from_u64(1);
        let mut n = ChaCha8Rng::seed_from_u64(2);
        let b = sample_batch(&pools, &vocab, &cfg, 128, &mut o, &mut n).unwrap();
        let frac = b.iter().filter(|e| e.kind == ExampleKind::Qa).count() as f64 / 1e4;
        assert!((0.48..=0.52).contains(&frac), "{frac}");

        cfg.qa_fraction = 0.0;
        cfg.batch_size = 256;
        let b = sample_batch(&pools, &vocab, &cfg, 128, &mut o, &mut n).unwrap();
        assert_eq!(b.len(), 256);
        assert!(b.iter().all(|e| e.kind == ExampleKind::Document));

        cfg.qa_fraction = 0.5;
        let empty = TrainPools {
            documents: pools.documents.clone(),
            qa: vec![],
        };
        assert!(matches!(
            sample_batch(&empty, &vocab, &cfg, 128, &mut o, &mut n),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn shuffle_of_single_sentence_is_identity() {
        let doc = Document {
            title: "x".into(),
            template_set: 1,
            sentences: vec!["one .".into()],
            source_attribute: vec![AttributeKind::Food],
        };
        assert_eq!(shuffle_sentences(&doc, &mut ChaCha8Rng::seed_from_u64(0)), doc);
    }
}
