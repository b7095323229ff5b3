use std::path::Path;

use gst_core::llm::prompt::{
    parse_marker, render_classify, render_generate_label, render_summarize, CATEGORY_MARKER, CLASSIFICATION_MARKER,
    SUMMARY_MARKER,
};
use proptest::prelude::*;

const INSTRUCTION: &str = "Group the texts by their topic.";

fn golden(name: &str) -> String {
    std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)).unwrap()
}

#[test]
fn summarize_matches_golden() {
    assert_eq!(render_summarize(INSTRUCTION, "I loved the match."), golden("summarize.txt"));
}

#[test]
fn generate_label_matches_golden() {
    let got = render_generate_label(
        INSTRUCTION,
        &["I loved the match.", "Our striker scored twice."],
        &["The risotto was bland.", "My mortgage rate went up."],
    );
    assert_eq!(got, golden("generate_label.txt"));
}

#[test]
fn classify_matches_golden() {
    let got = render_classify(INSTRUCTION, &["Sports", "Cooking", "Personal finance"], "I loved the match.");
    assert_eq!(got, golden("classify.txt"));
}

#[test]
fn placeholders_inside_values_stay_literal() {
    let p = render_summarize("Use {text} literally.", "a {instruction} b");
    assert!(p.contains("Use {text} literally."));
    assert!(p.contains("a {instruction} b"));
}

fn flip_case(s: &str, mask: u64) -> String {
    s.chars()
        .enumerate()
        .map(|(i, c)| if mask >> (i % 64) & 1 == 1 { c.to_ascii_uppercase() } else { c.to_ascii_lowercase() })
        .collect()
}

proptest! {
    #[test]
    fn marker_payload_survives_formatting(
        payload in "[A-Za-z][A-Za-z0-9 ,'-]{0,30}[A-Za-z0-9]",
        marker in prop::sample::select(vec![SUMMARY_MARKER, CATEGORY_MARKER, CLASSIFICATION_MARKER]),
        mask in any::<u64>(),
        indent in "[ \t]{0,4}",
        gap in "[ \t]{0,4}",
        trail in "[ \t]{0,4}",
        preamble in prop::option::of("[A-Za-z !.]{1,20}"),
    ) {
        let mut reply = String::new();
        if let Some(p) = &preamble {
            reply.push_str(p);
            reply.push('\n');
        }
        reply.push_str(&format!("{indent}{}{gap}{payload}{trail}\r\n", flip_case(marker, mask)));
        prop_assert_eq!(parse_marker(&reply, marker).unwrap(), payload.trim());
    }

    #[test]
    fn list_items_render_one_per_line(items in prop::collection::vec("[a-z]{1,8}( [a-z]{1,8}){0,3}", 1..8)) {
        let p = render_classify(INSTRUCTION, &items, "text");
        for item in &items {
            let line = format!("\n- {item}");
            prop_assert!(p.contains(&line));
        }
    }
}
