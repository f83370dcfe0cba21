use std::collections::{BTreeSet, HashMap};

use super::EvalError;

/// Lowercases, splits on whitespace and strips ASCII punctuation from each
/// word; words that become empty are dropped.
pub fn normalize_words(s: &str) -> Vec<String> {
    s.split_whitespace()
        .map(|w| w.chars().filter(|c| !c.is_ascii_punctuation()).collect::<String>().to_lowercase())
        .filter(|w| !w.is_empty())
        .collect()
}

/// Share of distinct reference words that occur in the candidate.
pub fn recall(candidate: &str, reference: &str) -> Result<f64, EvalError> {
    let r: BTreeSet<String> = normalize_words(reference).into_iter().collect();
    if r.is_empty() {
        return Err(EvalError::EmptyReference);
    }
    let c: BTreeSet<String> = normalize_words(candidate).into_iter().collect();
    let tp = r.iter().filter(|w| c.contains(*w)).count();
    let fn_ = r.len() - tp;
    Ok(tp as f64 / (tp + fn_) as f64)
}

/// Share of candidate words that occur in the reference; 0 for an empty
/// candidate.
pub fn exact_match(candidate: &str, reference: &str) -> f64 {
    let c = normalize_words(candidate);
    if c.is_empty() {
        return 0.0;
    }
    let r: BTreeSet<String> = normalize_words(reference).into_iter().collect();
    c.iter().filter(|w| r.contains(*w)).count() as f64 / c.len() as f64
}

fn ngrams(words: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    for g in words.windows(n) {
        *m.entry(g).or_insert(0) += 1;
    }
    m
}

/// Clipped n-gram precision: matches limited by the reference count.
pub fn modified_precision(candidate: &[String], reference: &[String], n: usize) -> f64 {
    if candidate.len() < n {
        return 0.0;
    }
    let c = ngrams(candidate, n);
    let r = ngrams(reference, n);
    let clipped: usize = c.iter().map(|(g, &k)| k.min(r.get(g).copied().unwrap_or(0))).sum();
    clipped as f64 / (candidate.len() + 1 - n) as f64
}

/// Single-reference sentence BLEU with uniform weights, no smoothing, and
/// the order capped at the candidate length.
pub fn bleu(candidate: &str, reference: &str, max_n: usize) -> f64 {
    let c = normalize_words(candidate);
    let r = normalize_words(reference);
    let n_max = max_n.min(c.len());
    if n_max == 0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=n_max {
        let p = modified_precision(&c, &r, n);
        if p == 0.0 {
            return 0.0;
        }
        log_sum += p.ln() / n_max as f64;
    }
    let (cl, rl) = (c.len() as f64, r.len() as f64);
    let bp = if cl > rl { 1.0 } else { (1.0 - rl / cl).exp() };
    bp * log_sum.exp()
}

/// Whether the first normalized word of a yes/no prediction matches.
pub fn closed_correct(prediction: &str, reference: &str) -> Result<bool, EvalError> {
    let r = normalize_words(reference);
    let r0 = r.first().map(String::as_str).unwrap_or("");
    if r0 != "yes" && r0 != "no" {
        return Err(EvalError::NotClosed(reference.to_string()));
    }
    Ok(normalize_words(prediction).first().map(String::as_str) == Some(r0))
}

pub fn closed_accuracy(predictions: &[String], references: &[String]) -> Result<f64, EvalError> {
    if predictions.len() != references.len() {
        return Err(EvalError::Length(predictions.len(), references.len()));
    }
    if predictions.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0;
    for (p, r) in predictions.iter().zip(references) {
        hits += usize::from(closed_correct(p, r)?);
    }
    Ok(hits as f64 / predictions.len() as f64)
}

/// Full normalized string equality.
pub fn classification_correct(prediction: &str, reference: &str) -> bool {
    normalize_words(prediction) == normalize_words(reference)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn recall_examples() {
        assert_eq!(recall("upper left", "upper left").unwrap(), 1.0);
        assert_eq!(recall("a", "a b").unwrap(), 0.5);
        assert_eq!(recall("c d", "a b").unwrap(), 0.0);
        assert!(matches!(recall("a", " "), Err(EvalError::EmptyReference)));
    }

    #[test]
    fn ems_examples() {
        assert_eq!(exact_match("a b", "a b"), 1.0);
        assert!((exact_match("a b c", "a") - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(exact_match("", "a"), 0.0);
    }

    #[test]
    fn bleu_examples() {
        assert_eq!(bleu("one round lesion in the upper left", "one round lesion in the upper left", 4), 1.0);
        let b = bleu("a b c", "a b c d e f", 1);
        assert!((b - (-1f64).exp()).abs() < 1e-15);
        assert!((b - 0.3679).abs() < 1e-4);
        assert_eq!(bleu("x y z", "a b c", 4), 0.0);
        assert_eq!(bleu("", "a", 4), 0.0);
    }

    #[test]
    fn closed_examples() {
        assert!(closed_correct("Yes.", "yes").unwrap());
        assert!(!closed_correct("no", "yes").unwrap());
        let p: Vec<String> = ["yes", "no", "yes", "no"].map(String::from).to_vec();
        let r: Vec<String> = ["yes", "no", "yes", "yes"].map(String::from).to_vec();
        assert_eq!(closed_accuracy(&p, &r).unwrap(), 0.75);
        assert!(matches!(closed_correct("yes", "maybe"), Err(EvalError::NotClosed(_))));
    }

    fn naive_unclipped(c: &[String], r: &[String]) -> f64 {
        c.iter().filter(|w| r.contains(w)).count() as f64 / c.len() as f64
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn clipping_never_exceeds_naive(
            c in proptest::collection::vec(0u8..6, 1..8),
            r in proptest::collection::vec(0u8..6, 1..8),
        ) {
            let c: Vec<String> = c.iter().map(|x| format!("w{x}")).collect();
            let r: Vec<String> = r.iter().map(|x| format!("w{x}")).collect();
            let p1 = modified_precision(&c, &r, 1);
            prop_assert!(p1 <= naive_unclipped(&c, &r) + 1e-15);
            let cs = c.join(" ");
            let rs = r.join(" ");
            for v in [recall(&cs, &rs).unwrap(), exact_match(&cs, &rs), bleu(&cs, &rs, 4)] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            prop_assert_eq!(recall(&cs, &cs).unwrap(), 1.0);
            prop_assert_eq!(exact_match(&cs, &cs), 1.0);
            prop_assert!((bleu(&cs, &cs, 4) - 1.0).abs() < 1e-12);
        }
    }
}
