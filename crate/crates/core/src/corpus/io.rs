use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CorpusSplit, Document, Profile, QaPair, Split};
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
struct ProfileRecord {
    split: Split,
    #[serde(flatten)]
    profile: Profile,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CorpusFile {
    profiles: Vec<ProfileRecord>,
    documents: Vec<Document>,
    qa_train: Vec<QaPair>,
    qa_val: Vec<QaPair>,
    qa_test: Vec<QaPair>,
}

/// Pretty JSON with a fixed field order.
pub fn to_json(split: &CorpusSplit) -> Result<String> {
    let tag = |s: Split, ps: &[Profile]| {
        ps.iter()
            .map(move |p| ProfileRecord {
                split: s,
                profile: p.clone(),
            })
            .collect::<Vec<_>>()
    };
    let mut profiles = tag(Split::Train, &split.train_profiles);
    profiles.extend(tag(Split::Val, &split.val_profiles));
    profiles.extend(tag(Split::Test, &split.test_profiles));
    let file = CorpusFile {
        profiles,
        documents: split.documents.clone(),
        qa_train: split.qa_train.clone(),
        qa_val: split.qa_val.clone(),
        qa_test: split.qa_test.clone(),
    };
    let mut s = serde_json::to_string_pretty(&file)?;
    s.push('\n');
    Ok(s)
}

pub fn serialize_corpus(split: &CorpusSplit, path: &Path) -> Result<()> {
    let s = to_json(split)?;
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn from_json(raw: &str, location: &str) -> Result<CorpusSplit> {
    let file: CorpusFile = serde_json::from_str(raw).map_err(|e| Error::Parse {
        location: format!("{location}:{}:{}", e.line(), e.column()),
        message: e.to_string(),
    })?;
    let mut split = CorpusSplit {
        train_profiles: vec![],
        val_profiles: vec![],
        test_profiles: vec![],
        documents: file.documents,
        qa_train: file.qa_train,
        qa_val: file.qa_val,
        qa_test: file.qa_test,
    };
    for r in file.profiles {
        match r.split {
            Split::Train => split.train_profiles.push(r.profile),
            Split::Val => split.val_profiles.push(r.profile),
            Split::Test => split.test_profiles.push(r.profile),
        }
    }
    split.validate()?;
    Ok(split)
}

/// Reads and validates a corpus file written by [`serialize_corpus`].
pub fn load_corpus(path: &Path) -> Result<CorpusSplit> {
    let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_json(&raw, &path.display().to_string())
}
