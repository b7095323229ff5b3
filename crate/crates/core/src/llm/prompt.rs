//! Prompt rendering and reply parsing.
//!
//! The three annotation templates are reproduced byte-for-byte; only the
//! placeholders are substituted. List-valued placeholders are rendered one
//! item per line, each prefixed with `"- "`, starting on a new line.

use super::LlmError;

const SUMMARIZE_TEMPLATE: &str = "\
Summarize the text based on the following instruction. The summary must focus on the instruction's key points and not exceed 10 words.
Instruction: {instruction}
Text: {text}
Required Format: Summary: <summary>
Note: Only output the summary in English starting with \"Summary:\", do not include any other text.";

const LABEL_TEMPLATE: &str = "\
Analyze these two groups of texts and define a clear category label that best describes the characteristics of the current group based on the following instructions.
Instruction: {instruction}
Current Group Texts: {positive_texts}
Other Group Texts: {negative_texts}
Requirements:
- The label MUST strictly follow and reflect the given instruction.
- Focus on the main characteristics of the current group based on the instruction.
- Label should be generalizable but distinguishable from other texts.
- Use clear and precise language.
- The category name should be no more than 5 words.
Required Format: Category: <category>
Note: Only output the category name starting with \"Category:\", do not include any other text.";

const CLASSIFY_TEMPLATE: &str = "\
Please classify the following text based on the instruction and available categories.

Instruction: {instruction}
Available Categories: {categories}
Text to Classify: {text}
Required Format: Classification: <category_name>
Note: Only output the category name starting with \"Classification:\", do not include any other text. The category must be exactly as listed above.";

// Used only by the directed-label ablation.
const DIRECTED_TEMPLATE: &str = "\
Propose {k} distinct category labels for the texts below based on the following instruction.
Instruction: {instruction}
Sample Texts: {texts}
Requirements:
- Each label MUST strictly follow and reflect the given instruction.
- Labels should be mutually exclusive and together cover the texts.
- Each category name should be no more than 5 words.
Required Format: a numbered list with one category per line, e.g. 1. <category>
Note: Only output the numbered list, do not include any other text.";

pub const SUMMARY_MARKER: &str = "Summary:";
pub const CATEGORY_MARKER: &str = "Category:";
pub const CLASSIFICATION_MARKER: &str = "Classification:";

/// Collapses internal whitespace so one list item occupies one line.
fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Single-pass placeholder substitution, so values containing `{...}` are
/// never re-expanded.
fn fill(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len() + 256);
    let mut rest = template;
    'scan: while let Some(pos) = rest.find('{') {
        out.push_str(&rest[..pos]);
        let tail = &rest[pos..];
        for (name, value) in vars {
            if tail.len() > name.len() + 1
                && tail[1..].starts_with(name)
                && tail[1 + name.len()..].starts_with('}')
            {
                out.push_str(value);
                rest = &tail[name.len() + 2..];
                continue 'scan;
            }
        }
        out.push('{');
        rest = &tail[1..];
    }
    out.push_str(rest);
    out
}

pub fn render_list<S: AsRef<str>>(items: &[S]) -> String {
    items
        .iter()
        .map(|s| format!("\n- {}", one_line(s.as_ref())))
        .collect()
}

pub fn render_summarize(instruction: &str, text: &str) -> String {
    fill(SUMMARIZE_TEMPLATE, &[("instruction", instruction), ("text", text)])
}

pub fn render_generate_label<S: AsRef<str>>(
    instruction: &str,
    positives: &[S],
    negatives: &[S],
) -> String {
    fill(
        LABEL_TEMPLATE,
        &[
            ("instruction", instruction),
            ("positive_texts", &render_list(positives)),
            ("negative_texts", &render_list(negatives)),
        ],
    )
}

pub fn render_classify<S: AsRef<str>>(instruction: &str, categories: &[S], text: &str) -> String {
    fill(
        CLASSIFY_TEMPLATE,
        &[
            ("instruction", instruction),
            ("categories", &render_list(categories)),
            ("text", text),
        ],
    )
}

pub fn render_directed<S: AsRef<str>>(instruction: &str, texts: &[S], k: usize) -> String {
    fill(
        DIRECTED_TEMPLATE,
        &[
            ("k", &k.to_string()),
            ("instruction", instruction),
            ("texts", &render_list(texts)),
        ],
    )
}

/// Returns the trimmed payload after the first line starting with `marker`.
///
/// Leading whitespace and marker case are ignored; an empty payload counts as
/// no match.
pub fn parse_marker(reply: &str, marker: &str) -> Result<String, LlmError> {
    for line in reply.lines() {
        let line = line.trim_start();
        let head = match line.get(..marker.len()) {
            Some(h) => h,
            None => continue,
        };
        if head.eq_ignore_ascii_case(marker) {
            let payload = line[marker.len()..].trim();
            if payload.is_empty() {
                break;
            }
            return Ok(payload.to_string());
        }
    }
    Err(LlmError::ParseFailure {
        marker: marker.to_string(),
        raw: reply.to_string(),
    })
}

/// Parses `1. label` / `2) label` lines. Non-matching lines are ignored.
pub fn parse_numbered_list(reply: &str) -> Vec<String> {
    reply
        .lines()
        .filter_map(|line| {
            let line = line.trim();
            let digits = line.chars().take_while(char::is_ascii_digit).count();
            if digits == 0 {
                return None;
            }
            let rest = line[digits..].strip_prefix(['.', ')'])?.trim();
            let rest = match rest.get(..CATEGORY_MARKER.len()) {
                Some(h) if h.eq_ignore_ascii_case(CATEGORY_MARKER) => {
                    rest[CATEGORY_MARKER.len()..].trim()
                }
                _ => rest,
            };
            (!rest.is_empty()).then(|| rest.to_string())
        })
        .collect()
}

pub fn word_count(s: &str) -> usize {
    s.split_whitespace().count()
}
