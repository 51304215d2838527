//! Context assembly: inserting the ten passages of an item into filler
//! text so the result hits a target token length under one of three
//! placement regimes.
//!
//! All positions are planned in final-context token space. Passages are
//! processed in increasing position order, so each placement accounts
//! exactly for the token mass of everything inserted before it. Insertion
//! points are always filler sentence boundaries; the snapping error this
//! introduces is bounded by the tolerances below.
//!
//! Placement tolerances honored by construction and checked by
//! [`measure_placement`]:
//! - realized context length within ±16 tokens of target (exact under the
//!   builtin tokenizer),
//! - realized first-needle depth within ±2 percentage points,
//! - realized needle gap within ±32 tokens.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

use crate::corpus::{FillerCorpus, SourceQaItem};
use crate::error::{Classify, ErrorClass};
use crate::tokenizer::Tokenizer;

pub const LENGTH_TOLERANCE_TOKENS: usize = 16;
pub const DEPTH_TOLERANCE_PCT: f64 = 2.0;
pub const GAP_TOLERANCE_TOKENS: i64 = 32;

/// Number of equal token-range bins a context is divided into; one passage
/// lands in each bin under the even-random regime.
pub const PLACEMENT_BINS: usize = 10;

#[derive(Debug, Error)]
pub enum TaskGenError {
    #[error("target of {target} tokens is too small; this item requires at least {required}")]
    TargetTooSmall { target: usize, required: usize },
    #[error("needles span {needed} tokens from the requested start, beyond the {target}-token window")]
    NeedleOverflow { needed: usize, target: usize },
    #[error("filler corpus has no usable sentences")]
    EmptyFiller,
    #[error("invalid placement spec: {0}")]
    InvalidSpec(String),
    #[error("needle '{title}' occurs {count} times in the context, expected exactly 1")]
    NeedleNotUnique { title: String, count: usize },
    #[error("cannot read instances from {path}: {detail}")]
    InstancesUnreadable { path: PathBuf, detail: String },
    #[error("cannot write instances to {path}: {source}")]
    InstancesUnwritable {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Classify for TaskGenError {
    fn class(&self) -> ErrorClass {
        match self {
            TaskGenError::NeedleNotUnique { .. } => ErrorClass::Integrity,
            TaskGenError::InstancesUnreadable { .. } => ErrorClass::Ingestion,
            TaskGenError::InstancesUnwritable { .. } => ErrorClass::Other,
            _ => ErrorClass::Validation,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlacementMode {
    EvenRandom,
    DepthControlled,
    DistanceControlled,
}

/// Parameters of one construction run. Optional fields are required by the
/// mode that uses them and ignored otherwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacementSpec {
    pub mode: PlacementMode,
    pub target_tokens: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub first_depth_pct: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub needle_interval_tokens: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub first_pos_tokens: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gap_tokens: Option<usize>,
    pub seed: u64,
}

impl PlacementSpec {
    pub fn even_random(target_tokens: usize, seed: u64) -> Self {
        Self {
            mode: PlacementMode::EvenRandom,
            target_tokens,
            first_depth_pct: None,
            needle_interval_tokens: None,
            first_pos_tokens: None,
            gap_tokens: None,
            seed,
        }
    }

    pub fn depth_controlled(
        target_tokens: usize,
        first_depth_pct: f64,
        needle_interval_tokens: usize,
        seed: u64,
    ) -> Self {
        Self {
            mode: PlacementMode::DepthControlled,
            target_tokens,
            first_depth_pct: Some(first_depth_pct),
            needle_interval_tokens: Some(needle_interval_tokens),
            first_pos_tokens: None,
            gap_tokens: None,
            seed,
        }
    }

    pub fn distance_controlled(
        target_tokens: usize,
        first_pos_tokens: usize,
        gap_tokens: usize,
        seed: u64,
    ) -> Self {
        Self {
            mode: PlacementMode::DistanceControlled,
            target_tokens,
            first_depth_pct: None,
            needle_interval_tokens: None,
            first_pos_tokens: Some(first_pos_tokens),
            gap_tokens: Some(gap_tokens),
            seed,
        }
    }

    fn validate(&self) -> Result<(), TaskGenError> {
        match self.mode {
            PlacementMode::EvenRandom => Ok(()),
            PlacementMode::DepthControlled => {
                let depth = self
                    .first_depth_pct
                    .ok_or_else(|| TaskGenError::InvalidSpec("first_depth_pct is required".into()))?;
                if !(0.0..=100.0).contains(&depth) {
                    return Err(TaskGenError::InvalidSpec(format!(
                        "first_depth_pct {depth} outside [0, 100]"
                    )));
                }
                match self.needle_interval_tokens {
                    Some(i) if i > 0 => Ok(()),
                    _ => Err(TaskGenError::InvalidSpec(
                        "needle_interval_tokens must be positive".into(),
                    )),
                }
            }
            PlacementMode::DistanceControlled => {
                if self.first_pos_tokens.is_none() {
                    return Err(TaskGenError::InvalidSpec("first_pos_tokens is required".into()));
                }
                if self.gap_tokens.is_none() {
                    return Err(TaskGenError::InvalidSpec("gap_tokens is required".into()));
                }
                Ok(())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PassageRole {
    Needle1,
    Needle2,
    Distractor,
}

/// Where one passage landed, in final-context token coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InsertionRecord {
    pub passage_role: PassageRole,
    pub start_token: usize,
    pub end_token: usize,
    pub depth_pct: f64,
}

/// An assembled context with its placement bookkeeping.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskInstance {
    pub item_id: String,
    pub context: String,
    pub insertions: Vec<InsertionRecord>,
    pub spec: PlacementSpec,
    pub tokenizer_profile: String,
}

/// Realized placement, recomputed from the final context text alone.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlacementMeasurement {
    pub needle_starts: [usize; 2],
    pub needle_depth_pcts: [f64; 2],
    pub gap_tokens: i64,
    pub length_tokens: usize,
}

// ---------------------------------------------------------------------------
// Builders
// ---------------------------------------------------------------------------

pub fn build_even_random(
    tokenizer: &Tokenizer,
    item: &SourceQaItem,
    filler: &FillerCorpus,
    target_tokens: usize,
    seed: u64,
) -> Result<TaskInstance, TaskGenError> {
    build(tokenizer, item, filler, &PlacementSpec::even_random(target_tokens, seed))
}

pub fn build_depth_controlled(
    tokenizer: &Tokenizer,
    item: &SourceQaItem,
    filler: &FillerCorpus,
    target_tokens: usize,
    first_depth_pct: f64,
    needle_interval_tokens: usize,
    seed: u64,
) -> Result<TaskInstance, TaskGenError> {
    build(
        tokenizer,
        item,
        filler,
        &PlacementSpec::depth_controlled(target_tokens, first_depth_pct, needle_interval_tokens, seed),
    )
}

pub fn build_distance_controlled(
    tokenizer: &Tokenizer,
    item: &SourceQaItem,
    filler: &FillerCorpus,
    target_tokens: usize,
    first_pos_tokens: usize,
    gap_tokens: usize,
    seed: u64,
) -> Result<TaskInstance, TaskGenError> {
    build(
        tokenizer,
        item,
        filler,
        &PlacementSpec::distance_controlled(target_tokens, first_pos_tokens, gap_tokens, seed),
    )
}

struct RenderedPassage {
    role: PassageRole,
    text: String,
    tokens: usize,
}

enum SlotTarget {
    /// Any sentence boundary whose final position falls in [lo, hi).
    Bin { lo: usize, hi: usize },
    /// The sentence boundary nearest this final position.
    Point { target: usize },
    /// The boundary nearest (realized end of the previous needle + gap).
    AfterGap { gap: usize },
}

struct Slot {
    sort_key: (usize, u8),
    passage: usize,
    target: SlotTarget,
}

/// Builds one instance under the given spec.
pub fn build(
    tokenizer: &Tokenizer,
    item: &SourceQaItem,
    filler: &FillerCorpus,
    spec: &PlacementSpec,
) -> Result<TaskInstance, TaskGenError> {
    spec.validate()?;
    let target = spec.target_tokens;

    let passages: Vec<RenderedPassage> = item
        .passages()
        .enumerate()
        .map(|(i, p)| {
            let text = p.rendered();
            let tokens = tokenizer.count_tokens(&text);
            let role = match i {
                0 => PassageRole::Needle1,
                1 => PassageRole::Needle2,
                _ => PassageRole::Distractor,
            };
            RenderedPassage { role, text, tokens }
        })
        .collect();
    let passage_total: usize = passages.iter().map(|p| p.tokens).sum();
    let required = passage_total + PLACEMENT_BINS;
    if target < required {
        return Err(TaskGenError::TargetTooSmall { target, required });
    }

    let filler_budget = target - passage_total;
    let plan = plan_filler(tokenizer, filler, filler_budget)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let bin_lo = |j: usize| j * target / PLACEMENT_BINS;
    let bin_hi = |j: usize| (j + 1) * target / PLACEMENT_BINS;
    let bin_of = |pos: usize| (pos * PLACEMENT_BINS / target).min(PLACEMENT_BINS - 1);

    let mut slots: Vec<Slot> = Vec::with_capacity(PLACEMENT_BINS);
    match spec.mode {
        PlacementMode::EvenRandom => {
            let mut order: Vec<usize> = (0..passages.len()).collect();
            order.shuffle(&mut rng);
            for (j, &p) in order.iter().enumerate() {
                slots.push(Slot {
                    sort_key: (bin_lo(j), 1),
                    passage: p,
                    target: SlotTarget::Bin {
                        lo: bin_lo(j),
                        hi: bin_hi(j),
                    },
                });
            }
        }
        PlacementMode::DepthControlled | PlacementMode::DistanceControlled => {
            let (first_start, gap) = match spec.mode {
                PlacementMode::DepthControlled => (
                    (spec.first_depth_pct.unwrap() / 100.0 * target as f64).floor() as usize,
                    spec.needle_interval_tokens.unwrap(),
                ),
                _ => (spec.first_pos_tokens.unwrap(), spec.gap_tokens.unwrap()),
            };
            let needed = first_start + passages[0].tokens + gap + passages[1].tokens;
            if needed > target {
                return Err(TaskGenError::NeedleOverflow { needed, target });
            }
            let second_estimate = first_start + passages[0].tokens + gap;

            slots.push(Slot {
                sort_key: (first_start, 0),
                passage: 0,
                target: SlotTarget::Point { target: first_start },
            });
            slots.push(Slot {
                sort_key: (second_estimate, 0),
                passage: 1,
                target: SlotTarget::AfterGap { gap },
            });

            let occupied = [bin_of(first_start), bin_of(second_estimate.min(target - 1))];
            let mut remaining: Vec<usize> =
                (0..PLACEMENT_BINS).filter(|j| !occupied.contains(j)).collect();
            while remaining.len() > passages.len() - 2 {
                let drop = rng.gen_range(0..remaining.len());
                remaining.remove(drop);
            }
            let mut distractors: Vec<usize> = (2..passages.len()).collect();
            distractors.shuffle(&mut rng);
            for (&j, &p) in remaining.iter().zip(distractors.iter()) {
                slots.push(Slot {
                    sort_key: (bin_lo(j), 1),
                    passage: p,
                    target: SlotTarget::Bin {
                        lo: bin_lo(j),
                        hi: bin_hi(j),
                    },
                });
            }
        }
    }
    slots.sort_by_key(|s| s.sort_key);

    // Placement sweep: `inserted` is the token mass of passages already
    // placed, so boundary value + inserted = final position.
    let mut inserted = 0usize;
    let mut prev_boundary = 0usize;
    let mut last_needle_end: Option<usize> = None;
    let mut placed: Vec<(usize, usize, usize)> = Vec::new(); // (boundary_idx, passage_idx, final_start)

    for slot in &slots {
        let p = &passages[slot.passage];
        let boundary_idx = match slot.target {
            SlotTarget::Bin { lo, hi } => choose_in_window(
                &mut rng,
                &plan.boundaries,
                prev_boundary,
                lo.saturating_sub(inserted),
                hi.saturating_sub(inserted),
            ),
            SlotTarget::Point { target } => nearest_boundary(
                &plan.boundaries,
                prev_boundary,
                target.saturating_sub(inserted),
            ),
            SlotTarget::AfterGap { gap } => {
                let want = last_needle_end.expect("first needle placed before second") + gap;
                nearest_boundary(&plan.boundaries, prev_boundary, want.saturating_sub(inserted))
            }
        };
        let final_start = plan.boundaries[boundary_idx] + inserted;
        if p.role != PassageRole::Distractor {
            last_needle_end = Some(final_start + p.tokens);
        }
        placed.push((boundary_idx, slot.passage, final_start));
        inserted += p.tokens;
        prev_boundary = boundary_idx;
    }

    // Assemble: passages assigned to boundary i go immediately before
    // filler segment i (or at the very end for the closing boundary).
    let mut at_boundary: Vec<Vec<usize>> = vec![Vec::new(); plan.boundaries.len()];
    for (k, &(b, _, _)) in placed.iter().enumerate() {
        at_boundary[b].push(k);
    }
    let mut parts: Vec<&str> = Vec::with_capacity(plan.segments.len() + placed.len());
    for (i, passage_refs) in at_boundary.iter().enumerate() {
        for &k in passage_refs {
            parts.push(&passages[placed[k].1].text);
        }
        if i < plan.segments.len() {
            parts.push(&plan.segments[i]);
        }
    }
    let context = parts.join(" ");

    for needle in &item.needles {
        let rendered = needle.rendered();
        let count = context.matches(&rendered).count();
        if count != 1 {
            return Err(TaskGenError::NeedleNotUnique {
                title: needle.title.clone(),
                count,
            });
        }
    }

    let mut insertions: Vec<InsertionRecord> = placed
        .iter()
        .map(|&(_, passage_idx, start)| {
            let p = &passages[passage_idx];
            InsertionRecord {
                passage_role: p.role,
                start_token: start,
                end_token: start + p.tokens,
                depth_pct: 100.0 * start as f64 / target as f64,
            }
        })
        .collect();
    insertions.sort_by_key(|r| r.start_token);

    Ok(TaskInstance {
        item_id: item.id.clone(),
        context,
        insertions,
        spec: spec.clone(),
        tokenizer_profile: tokenizer.profile_name().to_string(),
    })
}

struct FillerPlan {
    segments: Vec<String>,
    /// Cumulative token offsets; boundaries[i] precedes segments[i], and the
    /// final entry equals the filler budget.
    boundaries: Vec<usize>,
}

/// Lays out filler sentences to exactly `budget` tokens, cycling the corpus
/// when it is shorter than the budget and hard-truncating the final
/// sentence at a token boundary.
fn plan_filler(
    tokenizer: &Tokenizer,
    filler: &FillerCorpus,
    budget: usize,
) -> Result<FillerPlan, TaskGenError> {
    let usable: Vec<(&String, usize)> = filler
        .sentences
        .iter()
        .map(|s| (s, tokenizer.count_tokens(s)))
        .filter(|(_, n)| *n > 0)
        .collect();
    if usable.is_empty() {
        return Err(TaskGenError::EmptyFiller);
    }

    let mut segments = Vec::new();
    let mut boundaries = vec![0usize];
    let mut total = 0usize;
    let mut idx = 0usize;
    while total < budget {
        let (sentence, tokens) = usable[idx % usable.len()];
        idx += 1;
        if total + tokens <= budget {
            segments.push(sentence.clone());
            total += tokens;
        } else {
            let cut = tokenizer.truncate_to_tokens(sentence, budget - total);
            segments.push(cut.to_string());
            total = budget;
        }
        boundaries.push(total);
    }
    Ok(FillerPlan { segments, boundaries })
}

/// Uniform seeded choice among boundaries at or after `min_idx` whose value
/// lies in `[lo, hi)`; falls back to the boundary nearest the window center
/// when none qualifies.
fn choose_in_window(
    rng: &mut ChaCha8Rng,
    boundaries: &[usize],
    min_idx: usize,
    lo: usize,
    hi: usize,
) -> usize {
    let candidates: Vec<usize> = (min_idx..boundaries.len())
        .filter(|&i| boundaries[i] >= lo && boundaries[i] < hi)
        .collect();
    if candidates.is_empty() {
        let center = lo + (hi.saturating_sub(lo)) / 2;
        nearest_boundary(boundaries, min_idx, center)
    } else {
        candidates[rng.gen_range(0..candidates.len())]
    }
}

/// Boundary index at or after `min_idx` whose value is closest to `value`
/// (ties go to the earlier boundary).
fn nearest_boundary(boundaries: &[usize], min_idx: usize, value: usize) -> usize {
    let mut best = min_idx;
    let mut best_dist = boundaries[min_idx].abs_diff(value);
    for (offset, &b) in boundaries[min_idx..].iter().enumerate() {
        let dist = b.abs_diff(value);
        if dist < best_dist {
            best = min_idx + offset;
            best_dist = dist;
        }
        if b > value && dist > best_dist {
            break;
        }
    }
    best
}

// ---------------------------------------------------------------------------
// Measurement
// ---------------------------------------------------------------------------

/// Recomputes realized placement by locating the needle texts in the final
/// context and re-tokenizing, without consulting the insertion records.
pub fn measure_placement(
    tokenizer: &Tokenizer,
    instance: &TaskInstance,
    item: &SourceQaItem,
) -> Result<PlacementMeasurement, TaskGenError> {
    let mut starts = [0usize; 2];
    let mut depths = [0f64; 2];
    let mut ends = [0usize; 2];
    for (i, needle) in item.needles.iter().enumerate() {
        let rendered = needle.rendered();
        let positions: Vec<usize> = instance.context.match_indices(&rendered).map(|(p, _)| p).collect();
        if positions.len() != 1 {
            return Err(TaskGenError::NeedleNotUnique {
                title: needle.title.clone(),
                count: positions.len(),
            });
        }
        let start_token = tokenizer.count_tokens(&instance.context[..positions[0]]);
        starts[i] = start_token;
        ends[i] = start_token + tokenizer.count_tokens(&rendered);
        depths[i] = 100.0 * start_token as f64 / instance.spec.target_tokens as f64;
    }
    Ok(PlacementMeasurement {
        needle_starts: starts,
        needle_depth_pcts: depths,
        gap_tokens: starts[1] as i64 - ends[0] as i64,
        length_tokens: tokenizer.count_tokens(&instance.context),
    })
}

// ---------------------------------------------------------------------------
// Default sweep grids
// ---------------------------------------------------------------------------

pub const DEFAULT_NEEDLE_INTERVAL_TOKENS: usize = 500;
pub const DEFAULT_FIRST_POS_TOKENS: usize = 250;
pub const DEFAULT_SWEEP_TARGET_TOKENS: usize = 10_000;

/// Ten first-needle depths spanning 2.5%–97.5% uniformly (roughly
/// ten-point steps; both endpoints sit 2.5% in from the window edges).
pub fn default_depth_grid() -> Vec<f64> {
    (0..10).map(|k| 2.5 + 95.0 * k as f64 / 9.0).collect()
}

/// Needle gaps 1000–9000 tokens in 1000-token steps.
pub fn default_distance_grid() -> Vec<usize> {
    (1..=9).map(|k| k * 1000).collect()
}

/// Context lengths 1000–10000 tokens in 1000-token steps.
pub fn default_length_grid() -> Vec<usize> {
    (1..=10).map(|k| k * 1000).collect()
}

// ---------------------------------------------------------------------------
// Instances file (one JSON record per line, optional context spill)
// ---------------------------------------------------------------------------

/// Contexts above this token count are spilled to sidecar files.
pub const DEFAULT_SPILL_THRESHOLD_TOKENS: usize = 16_384;

#[derive(Serialize, Deserialize)]
struct InstanceRecord {
    item_id: String,
    spec: PlacementSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    context: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    context_ref: Option<String>,
    insertions: Vec<InsertionRecord>,
    tokenizer_profile: String,
}

/// Writes instances as JSONL, preceding them with `manifest` when given.
/// Contexts longer than `spill_threshold_tokens` targets go to a sidecar
/// directory next to `path`.
pub fn write_instances(
    path: &Path,
    instances: &[TaskInstance],
    manifest: Option<&serde_json::Value>,
    spill_threshold_tokens: usize,
) -> Result<(), TaskGenError> {
    let io_err = |source| TaskGenError::InstancesUnwritable {
        path: path.to_path_buf(),
        source,
    };
    let mut file = std::fs::File::create(path).map_err(io_err)?;
    if let Some(m) = manifest {
        writeln!(file, "{}", serde_json::to_string(m).expect("manifest serializes")).map_err(io_err)?;
    }
    let spill_dir = path.with_extension("contexts");
    for (i, inst) in instances.iter().enumerate() {
        let record = if inst.spec.target_tokens > spill_threshold_tokens {
            std::fs::create_dir_all(&spill_dir).map_err(io_err)?;
            let name = format!("{}_{i}.txt", inst.item_id.replace(['/', '\\'], "_"));
            let ctx_path = spill_dir.join(&name);
            std::fs::write(&ctx_path, &inst.context).map_err(io_err)?;
            InstanceRecord {
                item_id: inst.item_id.clone(),
                spec: inst.spec.clone(),
                context: None,
                context_ref: Some(ctx_path.display().to_string()),
                insertions: inst.insertions.clone(),
                tokenizer_profile: inst.tokenizer_profile.clone(),
            }
        } else {
            InstanceRecord {
                item_id: inst.item_id.clone(),
                spec: inst.spec.clone(),
                context: Some(inst.context.clone()),
                context_ref: None,
                insertions: inst.insertions.clone(),
                tokenizer_profile: inst.tokenizer_profile.clone(),
            }
        };
        writeln!(file, "{}", serde_json::to_string(&record).expect("record serializes"))
            .map_err(io_err)?;
    }
    Ok(())
}

/// Reads an instances file, resolving any spilled contexts. Leading records
/// carrying a `kind` field (the manifest) are skipped.
pub fn read_instances(path: &Path) -> Result<Vec<TaskInstance>, TaskGenError> {
    let unreadable = |detail: String| TaskGenError::InstancesUnreadable {
        path: path.to_path_buf(),
        detail,
    };
    let file = std::fs::File::open(path).map_err(|e| unreadable(e.to_string()))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| unreadable(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value =
            serde_json::from_str(&line).map_err(|e| unreadable(e.to_string()))?;
        if value.get("kind").is_some() {
            continue;
        }
        let record: InstanceRecord =
            serde_json::from_value(value).map_err(|e| unreadable(e.to_string()))?;
        let context = match (record.context, record.context_ref) {
            (Some(c), _) => c,
            (None, Some(r)) => std::fs::read_to_string(&r)
                .map_err(|e| unreadable(format!("spilled context {r}: {e}")))?,
            (None, None) => return Err(unreadable("record has neither context nor context_ref".into())),
        };
        out.push(TaskInstance {
            item_id: record.item_id,
            context,
            insertions: record.insertions,
            spec: record.spec,
            tokenizer_profile: record.tokenizer_profile,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;

    fn setup() -> (Tokenizer, Vec<SourceQaItem>, FillerCorpus) {
        (
            Tokenizer::builtin(),
            fixtures::qa_items(6, 42),
            fixtures::filler_corpus(14_000, 42),
        )
    }

    #[test]
    fn even_random_is_deterministic() {
        let (tok, items, filler) = setup();
        let a = build_even_random(&tok, &items[0], &filler, 10_000, 1).unwrap();
        let b = build_even_random(&tok, &items[0], &filler, 10_000, 1).unwrap();
        assert_eq!(a.context, b.context);
        assert_eq!(
            serde_json::to_string(&a.insertions).unwrap(),
            serde_json::to_string(&b.insertions).unwrap()
        );
        let c = build_even_random(&tok, &items[0], &filler, 10_000, 2).unwrap();
        assert_ne!(a.context, c.context);
    }

    #[test]
    fn even_random_fills_every_bin_once() {
        let (tok, items, filler) = setup();
        for seed in 0..5 {
            let inst = build_even_random(&tok, &items[1], &filler, 4000, seed).unwrap();
            let mut bins = vec![0usize; PLACEMENT_BINS];
            for rec in &inst.insertions {
                bins[(rec.start_token * PLACEMENT_BINS / 4000).min(PLACEMENT_BINS - 1)] += 1;
            }
            assert_eq!(bins, vec![1; PLACEMENT_BINS], "seed {seed}: {bins:?}");
        }
    }

    #[test]
    fn even_random_length_is_exact_under_builtin() {
        let (tok, items, filler) = setup();
        let inst = build_even_random(&tok, &items[2], &filler, 1000, 9).unwrap();
        assert_eq!(tok.count_tokens(&inst.context), 1000);
    }

    #[test]
    fn too_small_target_errors_with_required_minimum() {
        let (tok, items, filler) = setup();
        let err = build_even_random(&tok, &items[0], &filler, 50, 1).unwrap_err();
        match err {
            TaskGenError::TargetTooSmall { required, .. } => assert!(required > 50),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn depth_zero_starts_at_token_zero() {
        let (tok, items, filler) = setup();
        let inst = build_depth_controlled(&tok, &items[0], &filler, 2000, 0.0, 100, 3).unwrap();
        let n1 = inst
            .insertions
            .iter()
            .find(|r| r.passage_role == PassageRole::Needle1)
            .unwrap();
        assert_eq!(n1.start_token, 0);
    }

    #[test]
    fn depth_controlled_hits_depth_and_gap() {
        let (tok, items, filler) = setup();
        let inst =
            build_depth_controlled(&tok, &items[3], &filler, 10_000, 2.5, 500, 7).unwrap();
        let m = measure_placement(&tok, &inst, &items[3]).unwrap();
        assert!(
            (m.needle_depth_pcts[0] - 2.5).abs() <= DEPTH_TOLERANCE_PCT,
            "depth {}",
            m.needle_depth_pcts[0]
        );
        assert!(
            (m.gap_tokens - 500).abs() <= GAP_TOLERANCE_TOKENS,
            "gap {}",
            m.gap_tokens
        );
        assert_eq!(m.length_tokens, 10_000);
    }

    #[test]
    fn distance_controlled_hits_gap() {
        let (tok, items, filler) = setup();
        let inst =
            build_distance_controlled(&tok, &items[4], &filler, 10_000, 250, 1000, 5).unwrap();
        let m = measure_placement(&tok, &inst, &items[4]).unwrap();
        assert!((m.gap_tokens - 1000).abs() <= GAP_TOLERANCE_TOKENS, "gap {}", m.gap_tokens);
    }

    #[test]
    fn zero_gap_makes_needles_adjacent() {
        let (tok, items, filler) = setup();
        let inst = build_distance_controlled(&tok, &items[0], &filler, 4000, 250, 0, 5).unwrap();
        let m = measure_placement(&tok, &inst, &items[0]).unwrap();
        assert_eq!(m.gap_tokens, 0);
    }

    #[test]
    fn overflow_is_a_construction_error() {
        let (tok, items, filler) = setup();
        let err =
            build_distance_controlled(&tok, &items[0], &filler, 1000, 250, 9000, 5).unwrap_err();
        assert!(matches!(err, TaskGenError::NeedleOverflow { .. }));
    }

    #[test]
    fn measurement_agrees_with_records() {
        let (tok, items, filler) = setup();
        let inst = build_distance_controlled(&tok, &items[5], &filler, 6000, 300, 2000, 11).unwrap();
        let m = measure_placement(&tok, &inst, &items[5]).unwrap();
        let n1 = inst.insertions.iter().find(|r| r.passage_role == PassageRole::Needle1).unwrap();
        let n2 = inst.insertions.iter().find(|r| r.passage_role == PassageRole::Needle2).unwrap();
        assert_eq!(m.needle_starts[0], n1.start_token);
        assert_eq!(m.needle_starts[1], n2.start_token);
        assert_eq!(m.gap_tokens, n2.start_token as i64 - n1.end_token as i64);
    }

    #[test]
    fn duplicated_needle_fails_integrity() {
        let (tok, items, filler) = setup();
        let mut inst = build_even_random(&tok, &items[0], &filler, 1000, 1).unwrap();
        let dup = items[0].needles[0].rendered();
        inst.context.push(' ');
        inst.context.push_str(&dup);
        let err = measure_placement(&tok, &inst, &items[0]).unwrap_err();
        assert!(matches!(err, TaskGenError::NeedleNotUnique { count: 2, .. }));
        assert_eq!(err.class(), ErrorClass::Integrity);
    }

    #[test]
    fn realized_gap_is_monotone_in_requested_gap() {
        let (tok, items, filler) = setup();
        let mut last = -1i64;
        for gap in [0usize, 500, 1000, 2000, 3000, 4500, 6000] {
            let inst =
                build_distance_controlled(&tok, &items[2], &filler, 10_000, 250, gap, 13).unwrap();
            let m = measure_placement(&tok, &inst, &items[2]).unwrap();
            assert!(m.gap_tokens >= last, "gap {gap}: realized {} < {last}", m.gap_tokens);
            last = m.gap_tokens;
        }
    }

    #[test]
    fn default_grids_match_documented_shapes() {
        let depths = default_depth_grid();
        assert_eq!(depths.len(), 10);
        assert_eq!(depths[0], 2.5);
        assert_eq!(*depths.last().unwrap(), 97.5);
        for w in depths.windows(2) {
            assert!((w[1] - w[0] - 95.0 / 9.0).abs() < 1e-9);
        }
        assert_eq!(default_distance_grid(), vec![1000, 2000, 3000, 4000, 5000, 6000, 7000, 8000, 9000]);
        assert_eq!(default_length_grid().len(), 10);
    }

    #[test]
    fn instances_file_round_trips_with_spill() {
        let (tok, items, filler) = setup();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("instances.jsonl");
        let a = build_even_random(&tok, &items[0], &filler, 1000, 1).unwrap();
        let b = build_even_random(&tok, &items[1], &filler, 2000, 1).unwrap();
        let manifest = serde_json::json!({"kind": "manifest", "seed": 1});
        // Force the second instance to spill.
        write_instances(&path, &[a.clone(), b.clone()], Some(&manifest), 1500).unwrap();
        let back = read_instances(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].context, a.context);
        assert_eq!(back[1].context, b.context);
    }
}
