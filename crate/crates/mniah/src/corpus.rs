//! Ingestion of multi-hop QA sources and the filler-essay corpus.
//!
//! Every question item carries exactly two supporting passages ("needles")
//! and eight distractor passages; records that cannot satisfy that
//! structure are rejected at ingestion with a reason rather than patched.
//! Filler text is segmented into sentences once here, and all placement
//! code downstream works on those sentence boundaries.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

use crate::error::{Classify, ErrorClass};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    FileUnreadable {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse {path}: {source}")]
    ParseFailed {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("release file {0} contains no records")]
    EmptyRelease(PathBuf),
    #[error("requested sample of {requested} items but only {available} are valid")]
    SampleTooLarge { requested: usize, available: usize },
    #[error("no filler files were given")]
    NoFillerFiles,
    #[error("cannot write {path}: {source}")]
    WriteFailed {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Classify for CorpusError {
    fn class(&self) -> ErrorClass {
        match self {
            CorpusError::SampleTooLarge { .. } => ErrorClass::Validation,
            _ => ErrorClass::Ingestion,
        }
    }
}

/// One titled paragraph from a QA source.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Passage {
    pub title: String,
    pub text: String,
}

impl Passage {
    /// Inline rendering used when a passage is inserted into a context.
    pub fn rendered(&self) -> String {
        format!("{}. {}", self.title, self.text)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QaSource {
    Hotpotqa,
    Ire,
}

/// A multi-hop question with its gold answer, two supporting passages and
/// eight distractor passages. The 2/8 structure is enforced by the types.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SourceQaItem {
    pub id: String,
    pub question: String,
    pub gold_answer: String,
    pub needles: [Passage; 2],
    pub distractors: [Passage; 8],
    pub source: QaSource,
}

impl SourceQaItem {
    /// All ten passages, needles first.
    pub fn passages(&self) -> impl Iterator<Item = &Passage> {
        self.needles.iter().chain(self.distractors.iter())
    }
}

/// A record that failed ingestion, with the reason it was dropped.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Rejection {
    pub id: String,
    pub reason: String,
}

/// Items that survived ingestion plus the per-record rejection report.
#[derive(Debug, Clone)]
pub struct IngestReport {
    pub items: Vec<SourceQaItem>,
    pub rejected: Vec<Rejection>,
}

/// Sentence-segmented filler text used to pad contexts to a target length.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FillerCorpus {
    pub sentences: Vec<String>,
    pub provenance: Vec<String>,
}

// ---------------------------------------------------------------------------
// HotpotQA dev_distractor adapter
// ---------------------------------------------------------------------------

#[derive(Deserialize)]
struct HotpotRecord {
    #[serde(rename = "_id")]
    id: String,
    question: String,
    answer: String,
    supporting_facts: Vec<(String, u64)>,
    context: Vec<(String, Vec<String>)>,
}

/// Loads the HotpotQA dev_distractor release and draws a seeded uniform
/// sample of `sample_size` valid items without replacement.
pub fn load_hotpotqa(
    path: &Path,
    sample_size: usize,
    seed: u64,
) -> Result<IngestReport, CorpusError> {
    let raw = read_file(path)?;
    let records: Vec<serde_json::Value> =
        serde_json::from_str(&raw).map_err(|source| CorpusError::ParseFailed {
            path: path.to_path_buf(),
            source,
        })?;
    if records.is_empty() {
        return Err(CorpusError::EmptyRelease(path.to_path_buf()));
    }

    let mut items = Vec::new();
    let mut rejected = Vec::new();
    for (idx, value) in records.into_iter().enumerate() {
        let fallback_id = value
            .get("_id")
            .and_then(|v| v.as_str())
            .map(str::to_string)
            .unwrap_or_else(|| format!("record-{idx}"));
        match serde_json::from_value::<HotpotRecord>(value) {
            Err(e) => rejected.push(Rejection {
                id: fallback_id,
                reason: format!("malformed record: {e}"),
            }),
            Ok(rec) => match hotpot_to_item(rec) {
                Ok(item) => items.push(item),
                Err((id, reason)) => rejected.push(Rejection { id, reason }),
            },
        }
    }

    if sample_size > items.len() {
        return Err(CorpusError::SampleTooLarge {
            requested: sample_size,
            available: items.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices: Vec<usize> = (0..items.len()).collect();
    indices.shuffle(&mut rng);
    indices.truncate(sample_size);
    indices.sort_unstable();
    let sampled = indices.into_iter().map(|i| items[i].clone()).collect();

    Ok(IngestReport {
        items: sampled,
        rejected,
    })
}

fn hotpot_to_item(rec: HotpotRecord) -> Result<SourceQaItem, (String, String)> {
    if rec.question.trim().is_empty() || rec.answer.trim().is_empty() {
        return Err((rec.id, "empty question or answer".into()));
    }
    let mut supporting_titles: Vec<&str> = Vec::new();
    for (title, _) in &rec.supporting_facts {
        if !supporting_titles.contains(&title.as_str()) {
            supporting_titles.push(title);
        }
    }
    if supporting_titles.len() != 2 {
        return Err((
            rec.id,
            format!(
                "expected 2 distinct supporting titles, found {}",
                supporting_titles.len()
            ),
        ));
    }

    let paragraph = |title: &str| -> Option<Passage> {
        rec.context.iter().find(|(t, _)| t == title).map(|(t, sents)| Passage {
            title: t.clone(),
            text: join_sentences(sents),
        })
    };
    let Some(n1) = paragraph(supporting_titles[0]) else {
        return Err((rec.id, format!("supporting paragraph '{}' missing", supporting_titles[0])));
    };
    let Some(n2) = paragraph(supporting_titles[1]) else {
        return Err((rec.id, format!("supporting paragraph '{}' missing", supporting_titles[1])));
    };

    let distractors: Vec<Passage> = rec
        .context
        .iter()
        .filter(|(t, _)| !supporting_titles.contains(&t.as_str()))
        .map(|(t, sents)| Passage {
            title: t.clone(),
            text: join_sentences(sents),
        })
        .collect();
    if distractors.len() < 8 {
        return Err((
            rec.id,
            format!("only {} distractor paragraphs available, need 8", distractors.len()),
        ));
    }
    let distractors: [Passage; 8] = distractors
        .into_iter()
        .take(8)
        .collect::<Vec<_>>()
        .try_into()
        .expect("length checked above");

    Ok(SourceQaItem {
        id: rec.id,
        question: rec.question,
        gold_answer: rec.answer,
        needles: [n1, n2],
        distractors,
        source: QaSource::Hotpotqa,
    })
}

fn join_sentences(sentences: &[String]) -> String {
    sentences
        .iter()
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .collect::<Vec<_>>()
        .join(" ")
}

// ---------------------------------------------------------------------------
// IRE adapter
// ---------------------------------------------------------------------------

#[derive(Deserialize)]
struct IreDoc {
    title: String,
    text: String,
}

#[derive(Deserialize)]
struct IreRecord {
    id: String,
    question: String,
    answer: String,
    supporting_docs: Vec<IreDoc>,
    distractor_docs: Vec<IreDoc>,
}

/// Loads all valid items from an IRE release file (a JSON array of records
/// with `supporting_docs` and `distractor_docs`).
pub fn load_ire(path: &Path) -> Result<IngestReport, CorpusError> {
    let raw = read_file(path)?;
    let records: Vec<serde_json::Value> =
        serde_json::from_str(&raw).map_err(|source| CorpusError::ParseFailed {
            path: path.to_path_buf(),
            source,
        })?;
    if records.is_empty() {
        return Err(CorpusError::EmptyRelease(path.to_path_buf()));
    }

    let mut items = Vec::new();
    let mut rejected = Vec::new();
    for (idx, value) in records.into_iter().enumerate() {
        let fallback_id = value
            .get("id")
            .and_then(|v| v.as_str())
            .map(str::to_string)
            .unwrap_or_else(|| format!("record-{idx}"));
        match serde_json::from_value::<IreRecord>(value) {
            Err(e) => rejected.push(Rejection {
                id: fallback_id,
                reason: format!("malformed record: {e}"),
            }),
            Ok(rec) => match ire_to_item(rec) {
                Ok(item) => items.push(item),
                Err((id, reason)) => rejected.push(Rejection { id, reason }),
            },
        }
    }
    Ok(IngestReport { items, rejected })
}

fn ire_to_item(rec: IreRecord) -> Result<SourceQaItem, (String, String)> {
    if rec.question.trim().is_empty() || rec.answer.trim().is_empty() {
        return Err((rec.id, "empty question or answer".into()));
    }
    if rec.supporting_docs.len() != 2 {
        return Err((
            rec.id,
            format!("expected 2 supporting docs, found {}", rec.supporting_docs.len()),
        ));
    }
    if rec.distractor_docs.len() < 8 {
        return Err((
            rec.id,
            format!("only {} distractor docs available, need 8", rec.distractor_docs.len()),
        ));
    }
    let to_passage = |d: IreDoc| Passage {
        title: d.title,
        text: d.text,
    };
    let needles: Vec<Passage> = rec.supporting_docs.into_iter().map(to_passage).collect();
    let distractors: Vec<Passage> = rec
        .distractor_docs
        .into_iter()
        .take(8)
        .map(to_passage)
        .collect();
    Ok(SourceQaItem {
        id: rec.id,
        question: rec.question,
        gold_answer: rec.answer,
        needles: needles.try_into().expect("length checked"),
        distractors: distractors.try_into().expect("length checked"),
        source: QaSource::Ire,
    })
}

// ---------------------------------------------------------------------------
// Filler corpus
// ---------------------------------------------------------------------------

/// Terminal '.' is not a sentence boundary when the word it ends is one of
/// these abbreviations.
const ABBREVIATIONS: &[&str] = &[
    "Mr.", "Mrs.", "Ms.", "Dr.", "Prof.", "St.", "Jr.", "Sr.", "vs.", "etc.", "e.g.", "i.e.",
    "Inc.", "Ltd.", "Co.", "No.", "Fig.", "U.S.", "U.K.",
];

/// Splits text into sentences at '.', '!' or '?' followed by whitespace or
/// end of input, skipping the fixed abbreviation list. Trailing text without
/// terminal punctuation becomes a final sentence.
pub fn split_sentences(text: &str) -> Vec<String> {
    let bytes = text.as_bytes();
    let mut sentences = Vec::new();
    let mut start = 0usize;
    let mut iter = text.char_indices().peekable();
    while let Some((idx, ch)) = iter.next() {
        if ch != '.' && ch != '!' && ch != '?' {
            continue;
        }
        let at_end = match iter.peek() {
            None => true,
            Some((_, next)) => next.is_whitespace(),
        };
        if !at_end {
            continue;
        }
        if ch == '.' && ends_with_abbreviation(&text[start..=idx]) {
            continue;
        }
        let sentence = text[start..=idx].trim();
        if !sentence.is_empty() {
            sentences.push(sentence.to_string());
        }
        start = idx + ch.len_utf8();
    }
    if start < bytes.len() {
        let tail = text[start..].trim();
        if !tail.is_empty() {
            sentences.push(tail.to_string());
        }
    }
    sentences
}

fn ends_with_abbreviation(prefix: &str) -> bool {
    let word = prefix.rsplit(char::is_whitespace).next().unwrap_or(prefix);
    ABBREVIATIONS.contains(&word)
}

/// Reads and segments filler files; sentence order is file order then
/// in-file order.
pub fn load_filler(paths: &[PathBuf]) -> Result<FillerCorpus, CorpusError> {
    if paths.is_empty() {
        return Err(CorpusError::NoFillerFiles);
    }
    let mut sentences = Vec::new();
    let mut provenance = Vec::new();
    for path in paths {
        let raw = read_file(path)?;
        sentences.extend(split_sentences(&raw));
        provenance.push(path.display().to_string());
    }
    Ok(FillerCorpus {
        sentences,
        provenance,
    })
}

// ---------------------------------------------------------------------------
// Normalized items file (one JSON record per line)
// ---------------------------------------------------------------------------

pub fn write_items(path: &Path, items: &[SourceQaItem]) -> Result<usize, CorpusError> {
    let mut file = std::fs::File::create(path).map_err(|source| CorpusError::WriteFailed {
        path: path.to_path_buf(),
        source,
    })?;
    for item in items {
        let line = serde_json::to_string(item).expect("items serialize");
        writeln!(file, "{line}").map_err(|source| CorpusError::WriteFailed {
            path: path.to_path_buf(),
            source,
        })?;
    }
    Ok(items.len())
}

pub fn read_items(path: &Path) -> Result<Vec<SourceQaItem>, CorpusError> {
    let file = std::fs::File::open(path).map_err(|source| CorpusError::FileUnreadable {
        path: path.to_path_buf(),
        source,
    })?;
    let mut items = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|source| CorpusError::FileUnreadable {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|source| CorpusError::ParseFailed {
            path: path.to_path_buf(),
            source,
        })?;
        items.push(item);
    }
    Ok(items)
}

/// Structural check over an ingested set; returns one message per violation.
pub fn validate_items(items: &[SourceQaItem]) -> Vec<String> {
    let mut violations = Vec::new();
    for item in items {
        if item.question.trim().is_empty() {
            violations.push(format!("{}: empty question", item.id));
        }
        if item.gold_answer.trim().is_empty() {
            violations.push(format!("{}: empty gold answer", item.id));
        }
        for needle in &item.needles {
            if item.distractors.iter().any(|d| d == needle) {
                violations.push(format!(
                    "{}: needle '{}' also appears as a distractor",
                    item.id, needle.title
                ));
            }
        }
        if item.needles[0] == item.needles[1] {
            violations.push(format!("{}: duplicate needles", item.id));
        }
    }
    violations
}

fn read_file(path: &Path) -> Result<String, CorpusError> {
    std::fs::read_to_string(path).map_err(|source| CorpusError::FileUnreadable {
        path: path.to_path_buf(),
        source,
    })
}
