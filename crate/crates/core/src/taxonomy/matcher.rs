//! Label normalization, uniqueness repair and reply-to-category matching.

/// Case-folded with whitespace runs collapsed to one space.
pub fn normalize_label(s: &str) -> String {
    s.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Strips wrapping quotes/brackets and trailing punctuation some models add
/// around a category name.
fn strip_decoration(s: &str) -> &str {
    s.trim()
        .trim_matches(|c: char| matches!(c, '"' | '\'' | '`' | '*' | '[' | ']' | '<' | '>'))
        .trim_end_matches(['.', ','])
        .trim()
}

/// Finds the category a classification reply refers to.
///
/// Tries an exact match, then a normalized (case/whitespace-insensitive)
/// match, then the smallest edit distance between normalized strings as long
/// as it is at most 0.2 × the label length. Ties go to the lowest index.
pub fn match_category<S: AsRef<str>>(reply: &str, labels: &[S]) -> Option<usize> {
    let reply = strip_decoration(reply);
    if let Some(i) = labels.iter().position(|l| l.as_ref() == reply) {
        return Some(i);
    }
    let norm = normalize_label(reply);
    if norm.is_empty() {
        return None;
    }
    if let Some(i) = labels.iter().position(|l| normalize_label(l.as_ref()) == norm) {
        return Some(i);
    }
    let mut best: Option<(usize, usize)> = None;
    for (i, label) in labels.iter().enumerate() {
        let label = normalize_label(label.as_ref());
        let d = strsim::levenshtein(&norm, &label);
        if (d as f64) <= 0.2 * label.chars().count() as f64 && best.is_none_or(|(_, bd)| d < bd) {
            best = Some((i, d));
        }
    }
    best.map(|(i, _)| i)
}

/// Appends `" (variant n)"` to `label`, with the smallest `n >= 2` whose
/// result is not already taken.
pub fn variant_label(label: &str, taken: &dyn Fn(&str) -> bool) -> String {
    (2..)
        .map(|n| format!("{label} (variant {n})"))
        .find(|l| !taken(&normalize_label(l)))
        .expect("unbounded search")
}

/// Makes labels unique after normalization by suffixing later duplicates.
pub fn dedupe_with_variants(labels: Vec<String>) -> Vec<String> {
    let mut seen = std::collections::HashSet::new();
    labels
        .into_iter()
        .map(|l| {
            let l = l.trim();
            let l = if seen.contains(&normalize_label(&l)) {
                variant_label(l, &|n| seen.contains(n))
            } else {
                l.to_string()
            };
            seen.insert(normalize_label(&l));
            l
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization() {
        assert_eq!(normalize_label("  Sports\t News "), "sports news");
    }

    #[test]
    fn matching_ladder() {
        let labels = ["Sports", "Sports News", "Politics", "Economy"];
        assert_eq!(match_category("Sports", &labels), Some(0));
        assert_eq!(match_category("sports news", &labels), Some(1));
        assert_eq!(match_category("  SPORTS   NEWS.", &labels), Some(1));
        assert_eq!(match_category("\"Politics\"", &labels), Some(2));
        // one edit on an 8-char label is within 0.2 × 8
        assert_eq!(match_category("Politcs", &labels), Some(2));
        assert_eq!(match_category("Econmy", &labels), Some(3));
        assert_eq!(match_category("Unknown", &labels), None);
        assert_eq!(match_category("", &labels), None);
    }

    #[test]
    fn edit_distance_threshold_is_relative_to_label() {
        // 2 edits on a 6-char label exceeds 1.2
        assert_eq!(match_category("Spxrtz", &["Sports"]), None);
        assert_eq!(match_category("Sportz", &["Sports"]), Some(0));
    }

    #[test]
    fn fuzzy_tie_goes_to_lowest_index() {
        assert_eq!(match_category("abcdX", &["abcdY", "abcdZ"]), Some(0));
    }

    #[test]
    fn variants() {
        let out = dedupe_with_variants(vec![
            "Sports".into(),
            "sports".into(),
            "Politics".into(),
            "SPORTS ".into(),
        ]);
        assert_eq!(out, ["Sports", "sports (variant 2)", "Politics", "SPORTS (variant 3)"]);
        let uniq: std::collections::HashSet<_> = out.iter().map(|l| normalize_label(l)).collect();
        assert_eq!(uniq.len(), 4);
    }
}
