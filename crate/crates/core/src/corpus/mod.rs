//! Synthetic biography corpus: profiles, rendered documents, QA pairs,
//! answer-position modulation and person-level splits.

mod io;
mod pools;

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::{tokenize, Vocab};

pub use io::{load_corpus, serialize_corpus, to_json};

pub const N_ATTRIBUTES: usize = 9;

/// Template set used when nothing else is requested.
pub const CANONICAL_TEMPLATE_SET: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttributeKind {
    Birthday,
    Birthplace,
    School,
    Major,
    Company,
    Job,
    Food,
    Sports,
    Hobby,
}

impl AttributeKind {
    /// Canonical order: birthday first, hobby last.
    pub const ALL: [AttributeKind; N_ATTRIBUTES] = [
        AttributeKind::Birthday,
        AttributeKind::Birthplace,
        AttributeKind::School,
        AttributeKind::Major,
        AttributeKind::Company,
        AttributeKind::Job,
        AttributeKind::Food,
        AttributeKind::Sports,
        AttributeKind::Hobby,
    ];

    /// Zero-based slot in the canonical order.
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        use AttributeKind::*;
        match self {
            Birthday => "birthday",
            Birthplace => "birthplace",
            School => "school",
            Major => "major",
            Company => "company",
            Job => "job",
            Food => "food",
            Sports => "sports",
            Hobby => "hobby",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.as_str() == s)
    }
}

impl fmt::Display for AttributeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attribute {
    pub kind: AttributeKind,
    pub value: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Profile {
    pub person_name: String,
    /// Exactly one attribute per kind, in canonical order.
    pub attributes: Vec<Attribute>,
}

impl Profile {
    pub fn value(&self, kind: AttributeKind) -> &str {
        &self.attributes[kind.index()].value
    }

    pub fn validate(&self) -> Result<()> {
        if self.attributes.len() != N_ATTRIBUTES
            || self
                .attributes
                .iter()
                .zip(AttributeKind::ALL)
                .any(|(a, k)| a.kind != k)
        {
            return Err(Error::Validation(format!(
                "profile {:?} must list the 9 attributes in canonical order",
                self.person_name
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub title: String,
    pub template_set: u32,
    pub sentences: Vec<String>,
    /// Attribute realized by each sentence.
    pub source_attribute: Vec<AttributeKind>,
}

impl Document {
    pub fn body(&self) -> String {
        self.sentences.join(" ")
    }

    pub fn position_of(&self, kind: AttributeKind) -> Option<usize> {
        self.source_attribute.iter().position(|&k| k == kind)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaPair {
    pub person_name: String,
    pub question: String,
    pub answer: String,
    /// One-based index of the sentence carrying the answer in the
    /// unmodulated document.
    pub source_sentence_index: usize,
    pub attribute_kind: AttributeKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusSplit {
    pub train_profiles: Vec<Profile>,
    pub val_profiles: Vec<Profile>,
    pub test_profiles: Vec<Profile>,
    /// Documents of every person, whichever split their questions went to.
    pub documents: Vec<Document>,
    pub qa_train: Vec<QaPair>,
    pub qa_val: Vec<QaPair>,
    pub qa_test: Vec<QaPair>,
}

impl CorpusSplit {
    pub fn all_profiles(&self) -> impl Iterator<Item = &Profile> {
        self.train_profiles
            .iter()
            .chain(&self.val_profiles)
            .chain(&self.test_profiles)
    }

    pub fn n_persons(&self) -> usize {
        self.train_profiles.len() + self.val_profiles.len() + self.test_profiles.len()
    }

    pub fn qa(&self, split: Split) -> &[QaPair] {
        match split {
            Split::Train => &self.qa_train,
            Split::Val => &self.qa_val,
            Split::Test => &self.qa_test,
        }
    }

    /// Every surface string the model will see.
    pub fn texts(&self) -> impl Iterator<Item = &str> {
        let docs = self
            .documents
            .iter()
            .flat_map(|d| std::iter::once(d.title.as_str()).chain(d.sentences.iter().map(String::as_str)));
        let qa = self
            .qa_train
            .iter()
            .chain(&self.qa_val)
            .chain(&self.qa_test)
            .flat_map(|q| [q.question.as_str(), q.answer.as_str()]);
        docs.chain(qa)
    }

    /// Vocabulary over every document and QA string of the corpus.
    pub fn build_vocab(&self) -> Vocab {
        Vocab::build(self.texts())
    }

    /// Checks the cross-field invariants of a split.
    pub fn validate(&self) -> Result<()> {
        let mut names = HashSet::new();
        for p in self.all_profiles() {
            p.validate()?;
            if !names.insert(p.person_name.as_str()) {
                return Err(Error::Validation(format!("duplicate person name {:?}", p.person_name)));
            }
        }
        for (split, profiles) in [
            (Split::Train, &self.train_profiles),
            (Split::Val, &self.val_profiles),
            (Split::Test, &self.test_profiles),
        ] {
            let qa = self.qa(split);
            if qa.len() != N_ATTRIBUTES * profiles.len() {
                return Err(Error::Validation(format!(
                    "{split:?} split has {} QA pairs for {} persons",
                    qa.len(),
                    profiles.len()
                )));
            }
            let members: HashSet<&str> = profiles.iter().map(|p| p.person_name.as_str()).collect();
            if let Some(q) = qa.iter().find(|q| !members.contains(q.person_name.as_str())) {
                return Err(Error::Validation(format!(
                    "QA for {:?} is not in the {split:?} split",
                    q.person_name
                )));
            }
        }
        for d in &self.documents {
            if !names.contains(d.title.as_str()) {
                return Err(Error::Validation(format!("document for unknown person {:?}", d.title)));
            }
            if d.sentences.len() != d.source_attribute.len() {
                return Err(Error::Validation(format!(
                    "document {:?} has {} sentences but {} tags",
                    d.title,
                    d.sentences.len(),
                    d.source_attribute.len()
                )));
            }
        }
        Ok(())
    }
}

/// Value pools per attribute kind.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributePools(pub BTreeMap<AttributeKind, Vec<String>>);

impl Default for AttributePools {
    fn default() -> Self {
        Self(
            AttributeKind::ALL
                .into_iter()
                .map(|k| (k, pools::builtin(k).iter().map(|s| s.to_string()).collect()))
                .collect(),
        )
    }
}

impl AttributePools {
    /// Reads a JSON object `{kind: [values]}`. Kinds left out keep their
    /// built-in pool.
    pub fn from_file(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let user: BTreeMap<AttributeKind, Vec<String>> =
            serde_json::from_str(&raw).map_err(|e| Error::Parse {
                location: format!("{}:{}:{}", path.display(), e.line(), e.column()),
                message: e.to_string(),
            })?;
        let mut pools = Self::default();
        pools.0.extend(user);
        pools.validate()?;
        Ok(pools)
    }

    pub fn get(&self, kind: AttributeKind) -> &[String] {
        self.0.get(&kind).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn validate(&self) -> Result<()> {
        for k in AttributeKind::ALL {
            let pool = self.get(k);
            if pool.is_empty() {
                return Err(Error::Config(format!("empty pool for {k}")));
            }
            if let Some(v) = pool.iter().find(|v| tokenize(v).is_empty()) {
                return Err(Error::Config(format!("blank value {v:?} in pool for {k}")));
            }
        }
        Ok(())
    }
}

/// Parts for person names: shared first and middle names plus a surname
/// assembled from syllables, unique per person.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NameParts {
    pub first: Vec<String>,
    pub middle: Vec<String>,
    pub onsets: Vec<String>,
    pub vowels: Vec<String>,
    pub middles: Vec<String>,
    pub endings: Vec<String>,
}

impl Default for NameParts {
    fn default() -> Self {
        let own = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect();
        Self {
            first: own(&pools::FIRST_NAMES),
            middle: own(&pools::MIDDLE_NAMES),
            onsets: own(&pools::SURNAME_ONSETS),
            vowels: own(&pools::SURNAME_VOWELS),
            middles: own(&pools::SURNAME_MIDDLES),
            endings: own(&pools::SURNAME_ENDINGS),
        }
    }
}

/// Draw attempts per person before giving up on finding a fresh surname.
const NAME_RETRIES: usize = 10_000;

impl NameParts {
    fn draw_surname<R: Rng>(&self, rng: &mut R) -> String {
        let pick = |xs: &[String], rng: &mut R| xs[rng.random_range(0..xs.len())].clone();
        let mut s = pick(&self.onsets, rng);
        s.push_str(&pick(&self.vowels, rng));
        s.push_str(&pick(&self.middles, rng));
        s.push_str(&pick(&self.endings, rng));
        s
    }
}

/// Tokens a surname must never collide with.
fn reserved_tokens(pools: &AttributePools, names: &NameParts) -> HashSet<String> {
    let mut out: HashSet<String> = HashSet::new();
    for k in AttributeKind::ALL {
        for v in pools.get(k) {
            out.extend(tokenize(v).into_iter().map(str::to_string));
        }
    }
    for set in pools::SENTENCE_TEMPLATES.iter() {
        for t in set {
            out.extend(tokenize(t).into_iter().map(str::to_string));
        }
    }
    for t in pools::QUESTION_TEMPLATES {
        out.extend(tokenize(t).into_iter().map(str::to_string));
    }
    out.extend(names.first.iter().cloned());
    out.extend(names.middle.iter().cloned());
    out
}

/// Draws `n_persons` profiles with attribute values i.i.d. uniform over the
/// pools and unique person names.
pub fn generate_profiles(n_persons: usize, pools: &AttributePools, seed: u64) -> Result<Vec<Profile>> {
    generate_profiles_with(n_persons, pools, &NameParts::default(), seed)
}

pub fn generate_profiles_with(
    n_persons: usize,
    pools: &AttributePools,
    names: &NameParts,
    seed: u64,
) -> Result<Vec<Profile>> {
    pools.validate()?;
    if n_persons == 0 {
        return Err(Error::Config("n_persons must be at least 1".into()));
    }
    if names.first.is_empty() || names.middle.is_empty() || names.onsets.is_empty() || names.vowels.is_empty()
        || names.middles.is_empty() || names.endings.is_empty()
    {
        return Err(Error::Config("name part lists must be non-empty".into()));
    }
    let reserved = reserved_tokens(pools, names);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut used = HashSet::new();
    let mut out = Vec::with_capacity(n_persons);
    for i in 0..n_persons {
        let first = names.first[rng.random_range(0..names.first.len())].clone();
        let middle = names.middle[rng.random_range(0..names.middle.len())].clone();
        let mut surname = None;
        for _ in 0..NAME_RETRIES {
            let s = names.draw_surname(&mut rng);
            if !reserved.contains(&s) && !used.contains(&s) {
                surname = Some(s);
                break;
            }
        }
        let surname = surname.ok_or_else(|| {
            Error::Generation(format!("no unused surname left after {i} persons"))
        })?;
        used.insert(surname.clone());
        let attributes = AttributeKind::ALL
            .into_iter()
            .map(|kind| {
                let pool = pools.get(kind);
                Attribute {
                    kind,
                    value: pool[rng.random_range(0..pool.len())].clone(),
                }
            })
            .collect();
        out.push(Profile {
            person_name: format!("{first} {middle} {surname}"),
            attributes,
        });
    }
    Ok(out)
}

/// Number of built-in template sets; ids run from 1.
pub fn template_set_count() -> u32 {
    pools::SENTENCE_TEMPLATES.len() as u32
}

fn template_set(id: u32) -> Result<&'static [&'static str; N_ATTRIBUTES]> {
    if id == 0 || id > template_set_count() {
        return Err(Error::Config(format!(
            "unknown template set {id}; defined sets are 1..={}",
            template_set_count()
        )));
    }
    Ok(&pools::SENTENCE_TEMPLATES[id as usize - 1])
}

fn check_permutation(order: &[AttributeKind]) -> Result<()> {
    let distinct: BTreeSet<_> = order.iter().collect();
    if order.len() != N_ATTRIBUTES || distinct.len() != N_ATTRIBUTES {
        return Err(Error::Argument(format!("{order:?} is not a permutation of the 9 kinds")));
    }
    Ok(())
}

/// Renders one sentence per attribute, in `attribute_order`.
pub fn render_document(profile: &Profile, template_set_id: u32, attribute_order: &[AttributeKind]) -> Result<Document> {
    let templates = template_set(template_set_id)?;
    check_permutation(attribute_order)?;
    let sentences = attribute_order
        .iter()
        .map(|&k| templates[k.index()].replacen("{}", profile.value(k), 1))
        .collect();
    Ok(Document {
        title: profile.person_name.clone(),
        template_set: template_set_id,
        sentences,
        source_attribute: attribute_order.to_vec(),
    })
}

pub fn render_canonical(profile: &Profile, template_set_id: u32) -> Result<Document> {
    render_document(profile, template_set_id, &AttributeKind::ALL)
}

/// One question per attribute kind, with the canonical sentence position.
pub fn render_qa(profile: &Profile) -> Vec<QaPair> {
    AttributeKind::ALL
        .into_iter()
        .map(|k| QaPair {
            person_name: profile.person_name.clone(),
            question: pools::QUESTION_TEMPLATES[k.index()].replacen("{}", &profile.person_name, 1),
            answer: profile.value(k).to_string(),
            source_sentence_index: k.index() + 1,
            attribute_kind: k,
        })
        .collect()
}

/// Moves the first sentence to one-based position `k`:
/// `[s2, ..., sk, s1, s(k+1), ..., sn]`.
pub fn modulate_position(doc: &Document, k: usize) -> Result<Document> {
    let n = doc.sentences.len();
    if k < 1 || k > n {
        return Err(Error::Argument(format!("position {k} outside 1..={n}")));
    }
    let mut out = doc.clone();
    out.sentences[..k].rotate_left(1);
    out.source_attribute[..k].rotate_left(1);
    Ok(out)
}

/// Partitions persons into train/val/test and renders documents (canonical
/// template set) and QA pairs.
pub fn split_corpus(profiles: &[Profile], n_val: usize, n_test: usize, seed: u64) -> Result<CorpusSplit> {
    split_corpus_with(profiles, n_val, n_test, seed, &[CANONICAL_TEMPLATE_SET])
}

/// Like [`split_corpus`], rendering one document per person per template set.
pub fn split_corpus_with(
    profiles: &[Profile],
    n_val: usize,
    n_test: usize,
    seed: u64,
    template_sets: &[u32],
) -> Result<CorpusSplit> {
    if n_val + n_test >= profiles.len() {
        return Err(Error::Argument(format!(
            "n_val + n_test = {} must be below the {} persons",
            n_val + n_test,
            profiles.len()
        )));
    }
    if template_sets.is_empty() {
        return Err(Error::Config("at least one template set is required".into()));
    }
    let mut idx: Vec<usize> = (0..profiles.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut test: Vec<usize> = idx[..n_test].to_vec();
    let mut val: Vec<usize> = idx[n_test..n_test + n_val].to_vec();
    let mut train: Vec<usize> = idx[n_test + n_val..].to_vec();
    for part in [&mut test, &mut val, &mut train] {
        part.sort_unstable();
    }
    let pick = |ix: &[usize]| ix.iter().map(|&i| profiles[i].clone()).collect::<Vec<_>>();
    let qa = |ix: &[usize]| ix.iter().flat_map(|&i| render_qa(&profiles[i])).collect::<Vec<_>>();

    let mut documents = Vec::with_capacity(profiles.len() * template_sets.len());
    for p in profiles {
        for &t in template_sets {
            documents.push(render_canonical(p, t)?);
        }
    }
    let split = CorpusSplit {
        train_profiles: pick(&train),
        val_profiles: pick(&val),
        test_profiles: pick(&test),
        documents,
        qa_train: qa(&train),
        qa_val: qa(&val),
        qa_test: qa(&test),
    };
    split.validate()?;
    Ok(split)
}
