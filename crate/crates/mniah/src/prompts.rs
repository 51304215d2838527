//! The prompt catalog.
//!
//! Each function renders one fixed template with its slots filled. The
//! template text is part of the harness contract: downstream parsers key
//! on the exact marker strings, and rendered prompts must be byte-stable
//! so cached calls replay identically. Templates are sent as the user
//! message of a chat request; any model-specific chat template is applied
//! by the serving side.

/// Marker preceding the reasoning span in thinking-format responses.
pub const THOUGHT_MARKER: &str = "Thought Process:";
/// Marker preceding the final answer in thinking/reason responses.
pub const ANSWER_MARKER: &str = "Answer:";
/// Marker preceding retrieved items in retrieval responses.
pub const EVIDENCE_MARKER: &str = "Evidence:";
/// Literal the judge's verdict line must contain.
pub const ASSESSMENT_MARKER: &str = "Assessment result";

/// Question answering over a provided context, answer only.
pub fn answer_with_context(context: &str, question: &str) -> String {
    format!(
        "### Context\n```\n{context}\n```\n### Instruction\n```\nAnswer the Question based only on the information provided in the Context.\n```\n### Question\n```\n{question}\n```"
    )
}

/// Question answering with an explicit step-by-step thought process.
pub fn answer_with_thinking(context: &str, question: &str) -> String {
    format!(
        "### Context\n```\n{context}\n```\n\n<Question>: {question}\n### Instruction\n```\n1. Answer only based on the information provided in the Context.\n2. Please reason step by step, give your thought process and the answer to the <Question>.\n3. Please answer in the following format:\nThought Process: <Step-by-step thinking process>\nAnswer: <The Answer to the Question>\n```"
    )
}

/// First retrieval pass: list supporting information without answering.
pub fn retrieve_first(context: &str, question: &str) -> String {
    format!(
        "### Context\n```\n{context}\n```\n<Question>: {question}\n### Instruction\n1. Please accurately retrieve the information needed to answer the <Question> in the context as much as possible, and list them in points, with no less than 3 items. Just retrieve the information and do not answer the <Question>.\n2. Please answer in the following format:\nEvidence: <Retrieved Information>"
    )
}

/// Reasoning over all evidence retrieved so far.
pub fn reason_over_evidence(evidence: &str, question: &str) -> String {
    format!(
        "<All Retrived Information>: {evidence}\n<Question>: {question}\n### Instruction\n1. Please answer the <Question> based on the <All Retrived Information>.\n2. Please answer in the following format:\nAnswer: <The answer to the question>"
    )
}

/// Reflection pass: retrieve again without repeating earlier evidence.
pub fn reflect_retrieve(
    context: &str,
    question: &str,
    prior_evidence: &str,
    prior_answer: &str,
) -> String {
    format!(
        "### Context\n```\n{context}\n```\n<Question>: {question}\n<Last Time's Retrieved Information>: {prior_evidence}\n<Last Time's Answer>: {prior_answer}\n### Instruction\n```\n1. Your previous responses may be wrong. Now, please reflect on your previous responses and retrieve the information needed to answer <Question> from the Context again, while ensuring that it does not repeat information already in <Last Time's Retrieved Information>. List the information you retrieved this time, at least 3 items.\n2. Just retrieve the information and do not answer the <Question>.\n3. Please answer in the following format:\nEvidence: <The Information Retrieved this Time>\n```"
    )
}

/// Solution generation for a math problem, boxed final answer required.
pub fn math_solution(problem: &str) -> String {
    format!(
        "<Question>: {problem}\n### Instruction\n```\n1. Based on the known information provided by <Question>, use tree-like thinking to reason step by step. Each step of reasoning should have a detailed problem-solving process and clear intermediate step calculation results.\n2. You must give a final answer and put your final answer within \\boxed{{}}.\n```"
    )
}

/// Binary correctness judgment of a model answer against the gold answer.
pub fn judge(question: &str, model_answer: &str, gold_answer: &str) -> String {
    format!(
        "As an evaluator, your task is to evaluate Model's Answer according to the given Reasoning Question and Correct Answer.\n### Reasoning Question:\n{question}\n\n### Model's Answer:\n{model_answer}\n\n### Correct Answer:\n{gold_answer}\n\n### Assessment Tasks\nDetermine whether the Model's Answer is correct based on the Reasoning Question and Correct Answer, return 1 if it is correct and 0 if it is incorrect.\n\n### Answer Format:\nPlease answer in the following format: Assessment result: 0 or 1"
    )
}

/// Rewriting a two-round retrieve/reason transcript into natural prose.
pub fn rewrite_natural(thought_process: &str, question: &str) -> String {
    format!(
        "### Background\nNow I am testing LLM on a multi-hop question answering task, where the evidence needed to answer the question is scattered in a context full of irrelevant information.\n\n### The \"4R\" Method\nMy testing method follows the System 2 paradigm, which I call \"4R\"\u{2014}\"Retrieve, Reason, Retrieve again, Reason\":\n- 1R (Retrieve): The model first retrieves the information necessary to answer the Question from the Context.\n- 2R (Reason): The model then answers the Question based on the information retrieved in 1R.\n- 3R (Retrieve again): The model reflects on whether the results from 1R and 2R are correct, then retrieves the required information again, ensuring it does not repeat what was already retrieved in 1R.\n- 4R (Reason): Finally, the model answers the Question based on the information from both 1R and 3R.\n\n### Natural Thinking Process Generation\n<Thought Process>\n{thought_process}\n</Thought Process>\n<Question>\n{question}\n</Question>\n\nThe <Thought Process> above reflects the model\u{2019}s reasoning based on the <Question> using the \"4R\" Method. Your task is to rewrite the <Thought Process> to resemble a more human-like, intuitive natural thinking process. The new version should:\n1. Be presented as step-by-step reasoning:\n    1. The reasoning process including the preliminary retrieval in the context, initial answering, reflection, further retrieval in the context, and final answering.\n    2. The preliminary retrieval and further retrieval process must list all the retrieval information items in \"1R (Retrieve)\" and \"3R (Retrieve again)\" by points, like \"1. 2. 3. ...\".\n2. Phrases that cannot be used:\n    1. Don't use the phrase \"I remember\". We are now answering the <Question> entirely based on context.\n    2. Don't use the terms like \"1R (Retrieve)\", \"2R (Reason)\", \"3R (Retrieve again)\", \"4R (Reason)\" and \"step1\", \"step2\", \"step3\", etc.\n3. Focusing on natural transitions. Use casual and natural language for transitions, such as \"hmm,\" \"oh,\" \"also,\" or \"wait.\"\n\nReturn directly the revised natural thinking in the following format:\n```json\n{{\n\"NaturalReasoning\": \"...\"\n}}\n```"
    )
}

/// Closed-book probe: the bare question with a direct-answer instruction.
pub fn closed_book(question: &str) -> String {
    format!("{question}\nAnswer the question directly.")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rendering_is_byte_stable() {
        let a = judge("q?", "ans", "gold");
        let b = judge("q?", "ans", "gold");
        assert_eq!(a, b);
    }

    #[test]
    fn slots_appear_verbatim() {
        let p = answer_with_context("CTX-BODY", "QUESTION-BODY");
        assert!(p.contains("CTX-BODY"));
        assert!(p.contains("QUESTION-BODY"));
        assert!(p.contains("Answer the Question based only on the information provided in the Context."));
    }

    #[test]
    fn thinking_template_declares_both_markers() {
        let p = answer_with_thinking("c", "q");
        assert!(p.contains("Thought Process: <Step-by-step thinking process>"));
        assert!(p.contains("Answer: <The Answer to the Question>"));
    }

    #[test]
    fn retrieval_templates_forbid_answering() {
        let first = retrieve_first("c", "q");
        assert!(first.contains("no less than 3 items"));
        assert!(first.contains("Just retrieve the information and do not answer the <Question>."));
        let reflect = reflect_retrieve("c", "q", "e", "a");
        assert!(reflect.contains("does not repeat information already in <Last Time's Retrieved Information>"));
        assert!(reflect.contains("<Last Time's Answer>: a"));
    }

    #[test]
    fn reason_template_carries_all_evidence() {
        let p = reason_over_evidence("1. first fact\n2. second fact", "q");
        assert!(p.contains("<All Retrived Information>: 1. first fact\n2. second fact"));
    }

    #[test]
    fn math_template_requires_boxed_answer() {
        let p = math_solution("problem body");
        assert!(p.contains("use tree-like thinking to reason step by step"));
        assert!(p.contains("put your final answer within \\boxed{}"));
    }

    #[test]
    fn judge_template_states_format() {
        let p = judge("q", "a", "g");
        assert!(p.ends_with("Please answer in the following format: Assessment result: 0 or 1"));
    }

    #[test]
    fn rewrite_template_keeps_forbidden_phrase_rules() {
        let p = rewrite_natural("tp", "q");
        assert!(p.contains("Don't use the phrase \"I remember\""));
        assert!(p.contains("\"NaturalReasoning\""));
        assert!(p.contains("such as \"hmm,\" \"oh,\" \"also,\" or \"wait.\""));
    }
}
