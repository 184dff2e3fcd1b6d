//! Tokenization and the small set-overlap measures shared by the feature
//! extractors.

use std::collections::{BTreeSet, HashMap};
use std::sync::OnceLock;

use regex::Regex;

/// Splits on whitespace and punctuation. Alphanumeric runs become tokens;
/// every other non-space character is a token of its own. Case is kept.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            word.push(ch);
            continue;
        }
        if !word.is_empty() {
            out.push(std::mem::take(&mut word));
        }
        if !ch.is_whitespace() {
            out.push(ch.to_string());
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

pub fn is_punct(token: &str) -> bool {
    let mut chars = token.chars();
    match (chars.next(), chars.next()) {
        (Some(c), None) => !c.is_alphanumeric() && !c.is_whitespace(),
        _ => false,
    }
}

/// Uppercase-only tokens of one to four ASCII letters, e.g. `O`, `AB`, `ABC`.
pub fn is_point_label(token: &str) -> bool {
    !token.is_empty() && token.len() <= 4 && token.chars().all(|c| c.is_ascii_uppercase())
}

pub fn lower(tokens: &[String]) -> Vec<String> {
    tokens.iter().map(|t| t.to_lowercase()).collect()
}

/// Lowercased non-punctuation tokens.
pub fn words(tokens: &[String]) -> Vec<String> {
    tokens
        .iter()
        .filter(|t| !is_punct(t))
        .map(|t| t.to_lowercase())
        .collect()
}

pub fn bigrams(tokens: &[String]) -> Vec<(String, String)> {
    tokens
        .windows(2)
        .map(|w| (w[0].clone(), w[1].clone()))
        .collect()
}

/// Dice coefficient over sets: `2|A∩B| / (|A|+|B|)`, zero when both are empty.
pub fn dice<T: Ord>(a: &BTreeSet<T>, b: &BTreeSet<T>) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 0.0;
    }
    let common = a.intersection(b).count();
    2.0 * common as f64 / (a.len() + b.len()) as f64
}

pub fn unigram_overlap(a: &[String], b: &[String]) -> f64 {
    let sa: BTreeSet<String> = words(a).into_iter().collect();
    let sb: BTreeSet<String> = words(b).into_iter().collect();
    dice(&sa, &sb)
}

pub fn bigram_overlap(a: &[String], b: &[String]) -> f64 {
    let sa: BTreeSet<_> = bigrams(&words(a)).into_iter().collect();
    let sb: BTreeSet<_> = bigrams(&words(b)).into_iter().collect();
    dice(&sa, &sb)
}

/// `2·|LCS(a,b)| / (|a|+|b|)`; zero when both sequences are empty.
pub fn lcs_ratio(a: &[String], b: &[String]) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 0.0;
    }
    2.0 * lcs_len(a, b) as f64 / (a.len() + b.len()) as f64
}

pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Greedy one-to-one word matching. A word matches an unused word of the other
/// side when they are equal or share a four-character prefix. Returns
/// `2·matches / (|a|+|b|)`.
pub fn greedy_match_ratio(a: &[String], b: &[String]) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 0.0;
    }
    let stem = |w: &str| w.chars().take(4).collect::<String>();
    let mut exact: HashMap<&str, usize> = HashMap::new();
    let mut stems: HashMap<String, usize> = HashMap::new();
    for w in b {
        *exact.entry(w.as_str()).or_default() += 1;
        *stems.entry(stem(w)).or_default() += 1;
    }
    // exact matches first, then stem matches over what is left
    let mut matched = 0usize;
    let mut leftover = Vec::new();
    for w in a {
        match exact.get_mut(w.as_str()) {
            Some(n) if *n > 0 => {
                *n -= 1;
                *stems.get_mut(&stem(w)).expect("stem recorded with word") -= 1;
                matched += 1;
            }
            _ => leftover.push(w),
        }
    }
    for w in leftover {
        if let Some(n) = stems.get_mut(&stem(w)) {
            if *n > 0 {
                *n -= 1;
                matched += 1;
            }
        }
    }
    2.0 * matched as f64 / (a.len() + b.len()) as f64
}

/// Skip-bigram F-measure: ordered token pairs at any distance, counted as
/// multisets, `2·common / (pairs(a)+pairs(b))`.
pub fn skip_bigram_similarity(a: &[String], b: &[String]) -> f64 {
    fn pairs(t: &[String]) -> HashMap<(&str, &str), usize> {
        let mut m = HashMap::new();
        for i in 0..t.len() {
            for j in i + 1..t.len() {
                *m.entry((t[i].as_str(), t[j].as_str())).or_insert(0) += 1;
            }
        }
        m
    }
    let total = |n: usize| n * n.saturating_sub(1) / 2;
    let denom = total(a.len()) + total(b.len());
    if denom == 0 {
        return 0.0;
    }
    let pa = pairs(a);
    let pb = pairs(b);
    let common: usize = pa
        .iter()
        .map(|(k, &n)| n.min(pb.get(k).copied().unwrap_or(0)))
        .sum();
    2.0 * common as f64 / denom as f64
}

fn figure_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?i)\b(?:fig(?:ure)?\.?)\s*(\d+(?:\.\d+)*)").expect("valid figure regex")
    })
}

/// Figure pointers such as "Figure 2.1" or "fig. 3", normalized to
/// `Figure <number>` in order of appearance.
pub fn figure_refs(text: &str) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for cap in figure_regex().captures_iter(text) {
        let r = format!("Figure {}", &cap[1]);
        if !out.contains(&r) {
            out.push(r);
        }
    }
    out
}

/// True when more than half of the non-space characters are equation-like:
/// digits, operators, parentheses or capital point labels. At least one
/// operator must be present.
pub fn looks_like_equation(text: &str) -> bool {
    let mut total = 0usize;
    let mut hits = 0usize;
    let mut has_op = false;
    for c in text.chars().filter(|c| !c.is_whitespace()) {
        total += 1;
        let op = matches!(c, '=' | '+' | '-' | '−' | '×' | '*' | '·' | '/' | '^');
        has_op |= op;
        if op || c.is_ascii_digit() || c == '(' || c == ')' || c.is_ascii_uppercase() {
            hits += 1;
        }
    }
    has_op && total > 0 && 2 * hits > total
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        tokenize(s)
    }

    #[test]
    fn tokenize_splits_punctuation() {
        assert_eq!(toks("If AB, then PT^2."), ["If", "AB", ",", "then", "PT", "^", "2", "."]);
        assert_eq!(toks("  "), Vec::<String>::new());
    }

    #[test]
    fn lcs_examples() {
        assert_eq!(lcs_ratio(&[], &toks("x")), 0.0);
        assert_eq!(lcs_ratio(&[], &[]), 0.0);
        let s = toks("a b c d");
        assert_eq!(lcs_ratio(&s, &s), 1.0);
        assert_eq!(lcs_ratio(&toks("a b c d"), &toks("a x c y")), 0.5);
        assert!((lcs_ratio(&toks("a b c"), &toks("a x c")) - 2.0 * 2.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn figure_refs_are_normalized() {
        assert_eq!(figure_refs("as shown in Figure 2.1 and fig. 3"), ["Figure 2.1", "Figure 3"]);
        assert!(figure_refs("a figure of speech").is_empty());
    }

    #[test]
    fn equation_detection() {
        assert!(looks_like_equation("PA × PB = PT^2"));
        assert!(looks_like_equation("BC^2 + AC^2 = AB^2"));
        assert!(!looks_like_equation("The sum of the angles is 180 degrees."));
        assert!(!looks_like_equation("ABC"));
    }

    #[test]
    fn similarity_measures_are_bounded() {
        let a = toks("the angles of a triangle add up");
        let b = toks("a triangle has angles that add up");
        for v in [
            unigram_overlap(&a, &b),
            bigram_overlap(&a, &b),
            greedy_match_ratio(&a, &b),
            skip_bigram_similarity(&a, &b),
            lcs_ratio(&a, &b),
        ] {
            assert!((0.0..=1.0).contains(&v), "{v}");
        }
        assert_eq!(skip_bigram_similarity(&a, &a), 1.0);
        assert_eq!(greedy_match_ratio(&a, &a), 1.0);
    }
}
