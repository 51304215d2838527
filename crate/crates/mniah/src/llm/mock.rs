//! Scripted transports for offline runs and tests.
//!
//! [`ScriptedTransport`] wraps a closure and records every request it sees.
//! [`offline_model`] is a deterministic stand-in model that recognizes each
//! prompt template of the harness and answers from the prompt text alone;
//! paired with the fixture data in [`crate::fixtures`] it drives the whole
//! pipeline with zero network access.

use regex::Regex;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, OnceLock};

use super::{ChatRequest, ChatResponse, Transport, TransportError};

type Script = Box<dyn Fn(&ChatRequest) -> Result<ChatResponse, TransportError> + Send + Sync>;

/// Transport backed by a closure, with a log of every request handled.
pub struct ScriptedTransport {
    script: Script,
    seen: Mutex<Vec<ChatRequest>>,
}

impl ScriptedTransport {
    pub fn new(
        script: impl Fn(&ChatRequest) -> Result<ChatResponse, TransportError> + Send + Sync + 'static,
    ) -> Self {
        Self {
            script: Box::new(script),
            seen: Mutex::new(Vec::new()),
        }
    }

    /// Every request this transport has handled, in arrival order.
    pub fn requests(&self) -> Vec<ChatRequest> {
        self.seen.lock().unwrap().clone()
    }

    pub fn call_count(&self) -> usize {
        self.seen.lock().unwrap().len()
    }
}

impl Transport for ScriptedTransport {
    fn send(&self, request: &ChatRequest) -> Result<ChatResponse, TransportError> {
        self.seen.lock().unwrap().push(request.clone());
        (self.script)(request)
    }
}

/// Fails the first `n` sends with a network error, then delegates.
pub struct FlakyTransport {
    remaining_failures: AtomicUsize,
    inner: Arc<dyn Transport>,
}

impl FlakyTransport {
    pub fn failing_first(n: usize, inner: Arc<dyn Transport>) -> Self {
        Self {
            remaining_failures: AtomicUsize::new(n),
            inner,
        }
    }
}

impl Transport for FlakyTransport {
    fn send(&self, request: &ChatRequest) -> Result<ChatResponse, TransportError> {
        let remaining = self.remaining_failures.load(Ordering::SeqCst);
        if remaining > 0 {
            self.remaining_failures.store(remaining - 1, Ordering::SeqCst);
            return Err(TransportError::Network("scripted failure".into()));
        }
        self.inner.send(request)
    }
}

/// Delegates the first `n` sends, then fails everything; used to simulate
/// a run dying mid-flight.
pub struct DyingTransport {
    budget: AtomicUsize,
    inner: Arc<dyn Transport>,
}

impl DyingTransport {
    pub fn dying_after(n: usize, inner: Arc<dyn Transport>) -> Self {
        Self {
            budget: AtomicUsize::new(n),
            inner,
        }
    }
}

impl Transport for DyingTransport {
    fn send(&self, request: &ChatRequest) -> Result<ChatResponse, TransportError> {
        loop {
            let left = self.budget.load(Ordering::SeqCst);
            if left == 0 {
                return Err(TransportError::Network("scripted shutdown".into()));
            }
            if self
                .budget
                .compare_exchange(left, left - 1, Ordering::SeqCst, Ordering::SeqCst)
                .is_ok()
            {
                break;
            }
        }
        self.inner.send(request)
    }
}

// ---------------------------------------------------------------------------
// Offline model
// ---------------------------------------------------------------------------

fn passphrase_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r#"passphrase "([A-Za-z0-9-]+)""#).unwrap())
}

fn housed_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"[^.]*is housed in the[^.]*\.").unwrap())
}

fn boxed_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\\boxed\{(-?\d+)\}").unwrap())
}

fn product_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"the product of (\d+) and (\d+)").unwrap())
}

fn section<'a>(text: &'a str, start: &str, end: &str) -> Option<&'a str> {
    let s = text.find(start)? + start.len();
    let e = text[s..].find(end)? + s;
    Some(text[s..e].trim())
}

fn fenced_context(prompt: &str) -> &str {
    section(prompt, "### Context\n```\n", "\n```").unwrap_or("")
}

fn find_passphrase(text: &str) -> Option<String> {
    passphrase_re()
        .captures(text)
        .map(|c| c.get(1).unwrap().as_str().to_string())
}

/// A deterministic scripted model able to answer every prompt template in
/// the harness. It answers context questions via the fixture passphrase
/// convention, judges by substring match against the gold answer, refuses
/// closed-book questions, and solves fixture math problems whose factors
/// sum to an even number.
pub fn offline_model() -> ScriptedTransport {
    ScriptedTransport::new(|req| Ok(ChatResponse::of(offline_completions(req))))
}

fn offline_completions(req: &ChatRequest) -> Vec<String> {
    let prompt = req.last_user_content();
    let n = req.decoding.n_samples as usize;

    // Verdict calls: compare the quoted model answer against the gold.
    if prompt.starts_with("As an evaluator") {
        let model_answer = section(prompt, "### Model's Answer:\n", "\n\n### Correct Answer:").unwrap_or("");
        let gold = section(prompt, "### Correct Answer:\n", "\n\n### Assessment Tasks").unwrap_or("");
        let correct = !gold.is_empty()
            && model_answer.to_lowercase().contains(gold.trim().to_lowercase().as_str());
        return vec![format!("Assessment result: {}", u8::from(correct))];
    }

    // Reflection retrieval: one repeat (dropped by dedup) plus fresh items.
    if prompt.contains("<Last Time's Retrieved Information>:") {
        let ctx = fenced_context(prompt);
        let registry = housed_re()
            .find(ctx)
            .map(|m| m.as_str().trim().to_string())
            .unwrap_or_else(|| "No registry sentence found.".into());
        return vec![format!(
            "Evidence:\n1. {registry}\n2. Reading the context again surfaces no further vault references.\n3. The filler passages describe unrelated events and can be ignored."
        )];
    }

    // First retrieval: registry sentence, passphrase sentence, one filler note.
    if prompt.contains("Just retrieve the information and do not answer") {
        let ctx = fenced_context(prompt);
        let registry = housed_re()
            .find(ctx)
            .map(|m| m.as_str().trim().to_string())
            .unwrap_or_else(|| "No registry sentence found.".into());
        let vault = passphrase_re()
            .find(ctx)
            .map(|m| {
                let start = ctx[..m.start()].rfind(". ").map(|p| p + 2).unwrap_or(0);
                let end = ctx[m.end()..].find('.').map(|p| m.end() + p + 1).unwrap_or(ctx.len());
                ctx[start..end].trim().to_string()
            })
            .unwrap_or_else(|| "No vault sentence found.".into());
        return vec![format!(
            "Evidence:\n1. {registry}\n2. {vault}\n3. The rest of the context is unrelated archive business."
        )];
    }

    // Reasoning over gathered evidence.
    if prompt.contains("<All Retrived Information>") {
        return match find_passphrase(prompt) {
            Some(p) => vec![format!("Answer: {p}")],
            None => vec!["Answer: unknown".to_string()],
        };
    }

    // Math solution sampling: solvable problems get 3 of 5 samples right.
    if prompt.contains("use tree-like thinking") {
        if let Some(caps) = product_re().captures(prompt) {
            let a: i64 = caps[1].parse().unwrap_or(0);
            let b: i64 = caps[2].parse().unwrap_or(0);
            let value = a * b;
            let solvable = (a + b) % 2 == 0;
            return (0..n)
                .map(|i| {
                    let v = if solvable && i % 2 == 0 { value } else { value + 1 + i as i64 };
                    format!(
                        "Step 1: take {a} groups of {b}.\nStep 2: accumulate the partial sums.\nThe final answer is \\boxed{{{v}}}."
                    )
                })
                .collect();
        }
        return (0..n).map(|_| "I cannot solve this.".to_string()).collect();
    }

    // Rewriting a transcript into natural prose; the tag varies the output.
    if prompt.contains("NaturalReasoning") {
        let variant = if req.tag.is_empty() { "0" } else { req.tag.as_str() };
        let text = format!(
            "Let me work through this. First I scanned the context for anything about the archive, and two lines stood out: 1. the registry note naming where the piece is housed, 2. the vault line with its passphrase. Hmm, answering from those felt right, but wait, let me double-check the rest of the context. Oh, nothing else mentions the vault, so the passphrase stands. (pass {variant})"
        );
        let json = serde_json::json!({ "NaturalReasoning": text });
        return vec![format!("```json\n{json}\n```")];
    }

    // Thinking-format answering.
    if prompt.contains("Thought Process: <Step-by-step thinking process>") {
        let ctx = fenced_context(prompt);
        let answer = find_passphrase(ctx).unwrap_or_else(|| "unknown".into());
        return vec![format!(
            "Thought Process: I looked for the archive holding the piece, found the registry note, then located the vault sentence naming its passphrase.\nAnswer: {answer}"
        )];
    }

    // Plain context answering; doubles as solution extraction when the
    // context carries boxed values.
    if prompt.contains("Answer the Question based only on the information provided in the Context.") {
        let ctx = section(prompt, "### Context\n```\n", "\n```\n### Instruction").unwrap_or("");
        let boxed: Vec<i64> = boxed_re()
            .captures_iter(ctx)
            .filter_map(|c| c[1].parse().ok())
            .collect();
        if !boxed.is_empty() {
            let winner = majority(&boxed);
            return (0..n)
                .map(|_| format!("Comparing the candidate solutions, the consistent result is \\boxed{{{winner}}}."))
                .collect();
        }
        return match find_passphrase(ctx) {
            Some(p) => vec![format!("The passphrase is \"{p}\".")],
            None => vec!["The context does not say.".to_string()],
        };
    }

    // Closed-book probe: no context, no answer.
    if prompt.contains("Answer the question directly.") {
        return vec!["I cannot determine that without more information.".to_string()];
    }

    vec!["unknown".to_string()]
}

/// Most frequent value; ties break toward the smaller value.
fn majority(values: &[i64]) -> i64 {
    let mut counts: std::collections::BTreeMap<i64, usize> = std::collections::BTreeMap::new();
    for &v in values {
        *counts.entry(v).or_default() += 1;
    }
    counts
        .into_iter()
        .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
        .map(|(v, _)| v)
        .unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{preset, ChatMessage, Preset};
    use crate::prompts;

    fn ask(transport: &ScriptedTransport, prompt: &str, p: Preset) -> Vec<String> {
        let req = ChatRequest {
            model_id: "mock".into(),
            messages: vec![ChatMessage::user(prompt)],
            decoding: preset(p),
            tag: String::new(),
        };
        transport.send(&req).unwrap().completions
    }

    #[test]
    fn offline_model_answers_from_needle_context() {
        let items = crate::fixtures::qa_items(1, 7);
        let item = &items[0];
        let context = item
            .passages()
            .map(|p| p.rendered())
            .collect::<Vec<_>>()
            .join("\n");
        let model = offline_model();
        let out = ask(
            &model,
            &prompts::answer_with_context(&context, &item.question),
            Preset::AnswerShort,
        );
        assert!(out[0].contains(&item.gold_answer));
    }

    #[test]
    fn offline_model_refuses_closed_book() {
        let items = crate::fixtures::qa_items(1, 7);
        let model = offline_model();
        let out = ask(&model, &prompts::closed_book(&items[0].question), Preset::AnswerShort);
        assert!(!out[0].contains(&items[0].gold_answer));
    }

    #[test]
    fn offline_judge_compares_against_gold() {
        let model = offline_model();
        let yes = ask(
            &model,
            &prompts::judge("q", "the phrase is cedar-quartz-0001", "cedar-quartz-0001"),
            Preset::Judge,
        );
        assert_eq!(yes[0], "Assessment result: 1");
        let no = ask(&model, &prompts::judge("q", "no idea", "cedar-quartz-0001"), Preset::Judge);
        assert_eq!(no[0], "Assessment result: 0");
    }

    #[test]
    fn offline_math_generation_is_majority_correct_for_solvable() {
        let model = offline_model();
        let out = ask(
            &model,
            &prompts::math_solution("Compute the product of 6 and 8, showing each intermediate step."),
            Preset::MathGenerate,
        );
        assert_eq!(out.len(), 5);
        let correct = out.iter().filter(|s| s.contains("\\boxed{48}")).count();
        assert_eq!(correct, 3);
    }

    #[test]
    fn majority_prefers_smaller_on_tie() {
        assert_eq!(majority(&[3, 5]), 3);
        assert_eq!(majority(&[5, 5, 3]), 5);
    }
}
