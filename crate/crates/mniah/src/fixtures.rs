//! Deterministic sample data for offline runs.
//!
//! Everything here is generated from a seed: multi-hop question items in
//! the 2-needle/8-distractor shape, essay-style filler text, release files
//! in the source dataset schemas, and small math problem sets. The items
//! follow a fixed convention — the second needle names a vault passphrase
//! in double quotes — which the scripted offline model in [`crate::llm::mock`]
//! relies on to answer questions deterministically.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::Path;

use crate::corpus::{CorpusError, FillerCorpus, Passage, QaSource, SourceQaItem};
use crate::mathapp::MathProblem;

const ADJECTIVES: &[&str] = &[
    "amber", "cobalt", "ivory", "crimson", "jade", "onyx", "silver", "umber", "violet", "slate",
    "copper", "pearl", "russet", "teal", "ochre",
];

const ARTIFACTS: &[&str] = &[
    "astrolabe", "sundial", "tapestry", "codex", "orrery", "sextant", "reliquary", "medallion",
    "chronometer", "manuscript", "seal", "lantern", "compass", "chalice",
];

const CITIES: &[&str] = &[
    "Calloway", "Brightmere", "Southport", "Averline", "Kestrel Bay", "Norwick", "Eastmoor",
    "Fenwick", "Larkhall", "Windrow", "Marblegate", "Thorncliff",
];

const HALLS: &[&str] = &[
    "Meridian", "Larkspur", "Pemberton", "Halcyon", "Rookfield", "Silvermane", "Thessaly",
    "Windmere", "Ashgrove", "Corvid",
];

const PASS_WORDS: &[&str] = &[
    "cedar", "quartz", "harbor", "ember", "willow", "granite", "sorrel", "tundra", "beacon",
    "mallow", "juniper", "basalt",
];

const FILLER_SUBJECTS: &[&str] = &[
    "The committee", "A young printer", "The harbor master", "One stubborn engineer",
    "The town council", "A travelling bookbinder", "The night clerk", "An old cartographer",
    "The festival crowd", "A patient archivist", "The junior surveyor", "The orchard keeper",
];

const FILLER_VERBS: &[&str] = &[
    "argued about", "catalogued", "repaired", "misplaced", "sketched", "debated", "rehearsed",
    "measured", "restored", "inspected", "auctioned", "documented",
];

const FILLER_OBJECTS: &[&str] = &[
    "the tide tables", "a ledger of debts", "the broken signal lamp", "an unfinished mural",
    "the census rolls", "a crate of spare type", "the bridge tolls", "an atlas of old roads",
    "the grain receipts", "a set of survey pins", "the festival banners", "two barrels of ink",
];

const FILLER_TAILS: &[&str] = &[
    "before the rain returned",
    "while the ferries sat idle",
    "despite the printers' objections",
    "until the ledgers balanced",
    "long after the market closed",
    "without telling the council",
    "as the season turned",
    "under the gaslight",
    "for the third week running",
    "to settle an old wager",
];

fn tag(i: usize) -> String {
    let mut n = i;
    let mut out = ['a'; 3];
    for slot in out.iter_mut().rev() {
        *slot = (b'a' + (n % 26) as u8) as char;
        n /= 26;
    }
    out.iter().collect()
}

/// Text containing exactly `n` whitespace-separated words.
pub fn word_block(n: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut words = Vec::with_capacity(n);
    for i in 0..n {
        let w = PASS_WORDS[rng.gen_range(0..PASS_WORDS.len())];
        if i > 0 && i % 14 == 0 {
            words.push(format!("\n{w}"));
        } else {
            words.push(w.to_string());
        }
    }
    words.join(" ")
}

fn filler_sentence(rng: &mut ChaCha8Rng) -> String {
    let subject = FILLER_SUBJECTS[rng.gen_range(0..FILLER_SUBJECTS.len())];
    let verb = FILLER_VERBS[rng.gen_range(0..FILLER_VERBS.len())];
    let object = FILLER_OBJECTS[rng.gen_range(0..FILLER_OBJECTS.len())];
    let tail = FILLER_TAILS[rng.gen_range(0..FILLER_TAILS.len())];
    match rng.gen_range(0..4) {
        0 => format!("{subject} {verb} {object}."),
        1 => format!("{subject} {verb} {object} {tail}."),
        2 => {
            let lower = subject.to_lowercase();
            format!("Nobody remembers why {lower} {verb} {object} {tail}.")
        }
        _ => format!("{subject} {verb} {object}, {tail}."),
    }
}

/// Essay-like text of `n_sentences` sentences, each 5–25 tokens.
pub fn essay_text(n_sentences: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x5eed));
    let mut sentences = Vec::with_capacity(n_sentences);
    for _ in 0..n_sentences {
        sentences.push(filler_sentence(&mut rng));
    }
    sentences.join(" ")
}

/// A pre-segmented filler corpus with at least `min_tokens` whitespace tokens.
pub fn filler_corpus(min_tokens: usize, seed: u64) -> FillerCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x5eed));
    let mut sentences = Vec::new();
    let mut tokens = 0usize;
    while tokens < min_tokens {
        let s = filler_sentence(&mut rng);
        tokens += s.split_whitespace().count();
        sentences.push(s);
    }
    FillerCorpus {
        sentences,
        provenance: vec![format!("fixture(seed={seed})")],
    }
}

/// Writes `n_files` essay files under `dir` and returns their paths.
pub fn write_filler_files(
    dir: &Path,
    n_files: usize,
    sentences_per_file: usize,
    seed: u64,
) -> std::io::Result<Vec<std::path::PathBuf>> {
    let mut paths = Vec::new();
    for k in 0..n_files {
        let path = dir.join(format!("essay_{k:02}.txt"));
        std::fs::write(&path, essay_text(sentences_per_file, seed.wrapping_add(k as u64)))?;
        paths.push(path);
    }
    Ok(paths)
}

fn build_item(prefix: &str, i: usize, rng: &mut ChaCha8Rng) -> SourceQaItem {
    // The source prefix is part of every unique token so items from two
    // fixture sources can never share questions or passphrases.
    let t = format!("{prefix}{}", tag(i));
    let artifact = format!(
        "{} {} {t}",
        ADJECTIVES[rng.gen_range(0..ADJECTIVES.len())],
        ARTIFACTS[rng.gen_range(0..ARTIFACTS.len())]
    );
    let hall = format!("{}-{t}", HALLS[rng.gen_range(0..HALLS.len())]);
    let city = CITIES[rng.gen_range(0..CITIES.len())];
    let pass = format!(
        "{}-{}-{prefix}{i:04}",
        PASS_WORDS[rng.gen_range(0..PASS_WORDS.len())],
        PASS_WORDS[rng.gen_range(0..PASS_WORDS.len())]
    );

    let needle_1 = Passage {
        title: format!("Provenance of the {artifact}"),
        text: format!(
            "Registry notes from {city} confirm that the {artifact} is housed in the {hall} archive."
        ),
    };
    let needle_2 = Passage {
        title: format!("{hall} Archive"),
        text: format!("The {hall} archive guards its vault with the passphrase \"{pass}\"."),
    };

    let mut distractors = Vec::with_capacity(8);
    for j in 0..8u32 {
        let adj = ADJECTIVES[rng.gen_range(0..ADJECTIVES.len())];
        let art = ARTIFACTS[rng.gen_range(0..ARTIFACTS.len())];
        let other_city = CITIES[rng.gen_range(0..CITIES.len())];
        let text = match j % 4 {
            0 => format!("The {adj} {art} {t}{j} drew steady crowds in {other_city} last spring."),
            1 => format!("Restorers in {other_city} spent a full season cleaning the {adj} {art} {t}{j}."),
            2 => format!("A catalogue printed in {other_city} lists the {adj} {art} {t}{j} among minor holdings."),
            _ => format!("Visitors to {other_city} often overlook the {adj} {art} {t}{j} entirely."),
        };
        distractors.push(Passage {
            title: format!("Notes on the {adj} {art} {t}{j}"),
            text,
        });
    }

    SourceQaItem {
        id: format!("{prefix}-{i:05}"),
        question: format!(
            "What passphrase guards the vault of the archive that houses the {artifact}?"
        ),
        gold_answer: pass,
        needles: [needle_1, needle_2],
        distractors: distractors.try_into().expect("eight distractors"),
        source: QaSource::Hotpotqa,
    }
}

/// Deterministic multi-hop items following the passphrase convention.
pub fn qa_items(n: usize, seed: u64) -> Vec<SourceQaItem> {
    qa_items_with_prefix("fx", n, seed)
}

pub fn qa_items_with_prefix(prefix: &str, n: usize, seed: u64) -> Vec<SourceQaItem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|i| build_item(prefix, i, &mut rng)).collect()
}

/// Writes a HotpotQA dev_distractor-shaped release file with `n` valid records.
pub fn write_hotpotqa_release(path: &Path, n: usize, seed: u64) -> Result<(), CorpusError> {
    let items = qa_items_with_prefix("hp", n, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let records: Vec<serde_json::Value> = items
        .iter()
        .map(|item| {
            let mut context: Vec<(String, Vec<String>)> = item
                .passages()
                .map(|p| (p.title.clone(), vec![p.text.clone()]))
                .collect();
            context.shuffle(&mut rng);
            serde_json::json!({
                "_id": item.id,
                "question": item.question,
                "answer": item.gold_answer,
                "supporting_facts": [[item.needles[0].title, 0], [item.needles[1].title, 0]],
                "context": context,
                "type": "bridge",
                "level": "medium",
            })
        })
        .collect();
    write_json(path, &records)
}

/// Writes an IRE-shaped release file with `n` valid records.
pub fn write_ire_release(path: &Path, n: usize, seed: u64) -> Result<(), CorpusError> {
    let items = qa_items_with_prefix("ire", n, seed);
    let doc = |p: &Passage| serde_json::json!({ "title": p.title, "text": p.text });
    let records: Vec<serde_json::Value> = items
        .iter()
        .map(|item| {
            serde_json::json!({
                "id": item.id,
                "question": item.question,
                "answer": item.gold_answer,
                "supporting_docs": item.needles.iter().map(doc).collect::<Vec<_>>(),
                "distractor_docs": item.distractors.iter().map(doc).collect::<Vec<_>>(),
            })
        })
        .collect();
    write_json(path, &records)
}

fn write_json(path: &Path, records: &[serde_json::Value]) -> Result<(), CorpusError> {
    let body = serde_json::to_string(records).expect("fixture records serialize");
    std::fs::write(path, body).map_err(|source| CorpusError::WriteFailed {
        path: path.to_path_buf(),
        source,
    })
}

/// One hand-labeled noisy judge output: the raw response, the expected
/// verdict (absent = unparsable) and whether recovery is required.
pub struct VerdictCase {
    pub raw: &'static str,
    pub expected: Option<bool>,
    pub recovered: bool,
}

/// Twenty noisy judge outputs with hand-assigned labels, covering clean
/// verdicts, recoverable decoration and outputs that must fail closed.
pub fn noisy_verdict_cases() -> Vec<VerdictCase> {
    let case = |raw, expected, recovered| VerdictCase {
        raw,
        expected,
        recovered,
    };
    vec![
        case("Assessment result: 1", Some(true), false),
        case("Assessment result: 0", Some(false), false),
        case("The answer is right. Assessment result:1.", Some(true), true),
        case("Assessment result: 1\n", Some(true), false),
        case("  Assessment result: 0  ", Some(false), false),
        case("**Assessment result: 1**", Some(true), true),
        case("Assessment result = 1", Some(true), true),
        case(
            "The model answer matches the correct answer.\nAssessment result: 1",
            Some(true),
            true,
        ),
        case(
            "Assessment result: 0\nThe model confused the two archives.",
            Some(false),
            true,
        ),
        case("Assessment result:\n1", Some(true), true),
        case("Sure! Assessment result: 0.", Some(false), true),
        case("Assessment result: 0. Assessment result: 1.", Some(true), true),
        case("Assessment result: 1. Assessment result: 0.", Some(false), true),
        case("The verdict follows.\nAssessment result:**0**", Some(false), true),
        case("Assessment result: 0 or 1", Some(true), true),
        case("assessment result: 1", None, false),
        case("I think the answer is correct.", None, false),
        case("1", None, false),
        case("Assessment result: yes", None, false),
        case("Assessment result: 10", None, false),
    ]
}

/// Small integer-product problems in the contest-answer range 0–999. The
/// statement names both factors, so the scripted offline model can solve a
/// deterministic share of them.
pub fn math_problems(n: usize, seed: u64) -> Vec<MathProblem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let a = rng.gen_range(4..=31u32);
            let b = rng.gen_range(4..=(999 / a).min(31));
            MathProblem {
                id: format!("math-{i:03}"),
                statement: format!(
                    "Compute the product of {a} and {b}, showing each intermediate step."
                ),
                gold_answer: a * b,
            }
        })
        .collect()
}
