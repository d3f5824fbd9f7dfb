//! Evaluation metrics: Recall@k, span macro-F1, rejection F1, ROUGE-L F1, and
//! header soft-match F1. Corpus-level aggregation is fixed-order for
//! determinism.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

mod harness;
pub use harness::{
    eval_bench, eval_extraction, eval_generation, eval_retrieval, pool_bm25, EvalReport,
};

/// |gold ∩ top-k| / |gold|. Returns None when gold is empty (skipped sample).
pub fn recall_at_k(ranked: &[String], gold: &BTreeSet<String>, k: usize) -> Option<f64> {
    if gold.is_empty() {
        return None;
    }
    let topk: BTreeSet<&String> = ranked.iter().take(k).collect();
    let hit = gold.iter().filter(|g| topk.contains(g)).count();
    Some(hit as f64 / gold.len() as f64)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrF1 {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn prf1(tp: usize, n_pred: usize, n_gold: usize) -> PrF1 {
    let p = if n_pred == 0 { 0.0 } else { tp as f64 / n_pred as f64 };
    let r = if n_gold == 0 { 0.0 } else { tp as f64 / n_gold as f64 };
    let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    PrF1 { precision: p, recall: r, f1 }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MacroF1 {
    pub per_type: BTreeMap<String, PrF1>,
    pub macro_f1: f64,
}

/// Exact-match (type, span) comparison with set semantics; macro mean is
/// unweighted over the types present in gold.
pub fn span_macro_f1(pred: &[(String, String)], gold: &[(String, String)]) -> MacroF1 {
    let pred: BTreeSet<(String, String)> = pred.iter().cloned().collect();
    let gold: BTreeSet<(String, String)> = gold.iter().cloned().collect();
    let gold_types: BTreeSet<&String> = gold.iter().map(|(t, _)| t).collect();
    let mut per_type = BTreeMap::new();
    let mut sum = 0.0;
    for ty in &gold_types {
        let p: BTreeSet<&(String, String)> = pred.iter().filter(|(t, _)| t == *ty).collect();
        let g: BTreeSet<&(String, String)> = gold.iter().filter(|(t, _)| t == *ty).collect();
        let tp = p.intersection(&g).count();
        let scores = prf1(tp, p.len(), g.len());
        sum += scores.f1;
        per_type.insert((*ty).clone(), scores);
    }
    let macro_f1 = if gold_types.is_empty() {
        0.0
    } else {
        sum / gold_types.len() as f64
    };
    MacroF1 { per_type, macro_f1 }
}

/// Binary F1 with "reject" as the positive class, plus plain accuracy.
/// Input: (predicted rejection?, gold schema-free?).
pub fn rejection_score(decisions: &[(bool, bool)]) -> (PrF1, f64) {
    let tp = decisions.iter().filter(|(p, g)| *p && *g).count();
    let n_pred = decisions.iter().filter(|(p, _)| *p).count();
    let n_gold = decisions.iter().filter(|(_, g)| *g).count();
    let correct = decisions.iter().filter(|(p, g)| p == g).count();
    let acc = if decisions.is_empty() {
        0.0
    } else {
        correct as f64 / decisions.len() as f64
    };
    (prf1(tp, n_pred, n_gold), acc)
}

/// Length of the longest common subsequence of two word sequences.
pub fn lcs_len(a: &[&str], b: &[&str]) -> usize {
    let mut dp = vec![0usize; b.len() + 1];
    for &aw in a {
        let mut prev = 0;
        for (j, &bw) in b.iter().enumerate() {
            let cur = dp[j + 1];
            dp[j + 1] = if aw == bw {
                prev + 1
            } else {
                dp[j + 1].max(dp[j])
            };
            prev = cur;
        }
    }
    dp[b.len()]
}

/// Word-level ROUGE-L F1: P = LCS/|pred|, R = LCS/|ref|, F1 = 2PR/(P+R).
pub fn rouge_l_f1(pred: &str, reference: &str) -> f64 {
    let p: Vec<&str> = pred.split_whitespace().collect();
    let r: Vec<&str> = reference.split_whitespace().collect();
    if p.is_empty() || r.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(&p, &r) as f64;
    let prec = lcs / p.len() as f64;
    let rec = lcs / r.len() as f64;
    if prec + rec == 0.0 {
        0.0
    } else {
        2.0 * prec * rec / (prec + rec)
    }
}

/// Token-level F1 between two role names after lowercasing (bag of words).
fn name_token_f1(a: &str, b: &str) -> f64 {
    let ta: Vec<String> = a.split_whitespace().map(|w| w.to_lowercase()).collect();
    let tb: Vec<String> = b.split_whitespace().map(|w| w.to_lowercase()).collect();
    if ta.is_empty() || tb.is_empty() {
        return 0.0;
    }
    let mut counts: BTreeMap<&String, i64> = BTreeMap::new();
    for w in &ta {
        *counts.entry(w).or_insert(0) += 1;
    }
    let mut overlap = 0i64;
    for w in &tb {
        if let Some(c) = counts.get_mut(w) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    let p = overlap as f64 / ta.len() as f64;
    let r = overlap as f64 / tb.len() as f64;
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Greedy one-to-one role matching: a pred/gold pair matches when the
/// token-level F1 of their names reaches `threshold`; the result is set-F1
/// over matched pairs.
pub fn header_soft_f1(pred: &[String], gold: &[String], threshold: f64) -> f64 {
    if pred.is_empty() && gold.is_empty() {
        return 1.0;
    }
    if pred.is_empty() || gold.is_empty() {
        return 0.0;
    }
    // all candidate pairs above threshold, best first; greedy one-to-one
    let mut pairs: Vec<(usize, usize, f64)> = Vec::new();
    for (i, p) in pred.iter().enumerate() {
        for (j, g) in gold.iter().enumerate() {
            let s = name_token_f1(p, g);
            if s >= threshold {
                pairs.push((i, j, s));
            }
        }
    }
    pairs.sort_by(|a, b| {
        b.2.partial_cmp(&a.2)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.0.cmp(&b.0))
            .then(a.1.cmp(&b.1))
    });
    let mut used_p = vec![false; pred.len()];
    let mut used_g = vec![false; gold.len()];
    let mut matched = 0usize;
    for (i, j, _) in pairs {
        if !used_p[i] && !used_g[j] {
            used_p[i] = true;
            used_g[j] = true;
            matched += 1;
        }
    }
    let p = matched as f64 / pred.len() as f64;
    let r = matched as f64 / gold.len() as f64;
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(items: &[&str]) -> BTreeSet<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    fn ranked(items: &[&str]) -> Vec<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn recall_basics() {
        let r = ranked(&["a", "b", "c", "d", "e"]);
        assert_eq!(recall_at_k(&r, &set(&["a", "b"]), 5), Some(1.0));
        assert_eq!(recall_at_k(&r, &set(&["x"]), 5), Some(0.0));
        assert_eq!(recall_at_k(&r, &set(&["a", "x"]), 5), Some(0.5));
        assert_eq!(recall_at_k(&r, &set(&[]), 5), None);
    }

    #[test]
    fn recall_monotone_in_k() {
        let r = ranked(&["a", "b", "c", "d"]);
        let gold = set(&["b", "d"]);
        let mut prev = 0.0;
        for k in 1..=4 {
            let v = recall_at_k(&r, &gold, k).unwrap();
            assert!(v >= prev);
            prev = v;
        }
    }

    fn spans(items: &[(&str, &str)]) -> Vec<(String, String)> {
        items
            .iter()
            .map(|(t, s)| (t.to_string(), s.to_string()))
            .collect()
    }

    #[test]
    fn macro_f1_basics() {
        let gold = spans(&[("person", "john"), ("year", "2010")]);
        assert_eq!(span_macro_f1(&gold, &gold).macro_f1, 1.0);
        assert_eq!(span_macro_f1(&[], &gold).macro_f1, 0.0);
        // one type perfect, one fully missed -> macro 0.5
        let pred = spans(&[("person", "john")]);
        assert_eq!(span_macro_f1(&pred, &gold).macro_f1, 0.5);
    }

    #[test]
    fn macro_f1_duplicate_predictions_are_set_semantics() {
        let gold = spans(&[("t", "x")]);
        let pred = spans(&[("t", "x"), ("t", "x")]);
        assert_eq!(span_macro_f1(&pred, &gold).macro_f1, 1.0);
    }

    #[test]
    fn rejection_cases() {
        let all_right = vec![(true, true), (false, false)];
        assert_eq!(rejection_score(&all_right).0.f1, 1.0);
        let never = vec![(false, true), (false, false)];
        assert_eq!(rejection_score(&never).0.f1, 0.0);
        // TP=1 FP=1 FN=1
        let mixed = vec![(true, true), (true, false), (false, true)];
        let (s, _) = rejection_score(&mixed);
        assert_eq!(s.precision, 0.5);
        assert_eq!(s.recall, 0.5);
        assert_eq!(s.f1, 0.5);
    }

    #[test]
    fn rouge_basics() {
        assert_eq!(rouge_l_f1("a b c", "a b c"), 1.0);
        assert_eq!(rouge_l_f1("a b", "x y"), 0.0);
        assert_eq!(rouge_l_f1("", "a"), 0.0);
        // pred "the cat", ref "the cat sat": LCS=2, P=1, R=2/3, F1=0.8
        assert!((rouge_l_f1("the cat", "the cat sat") - 0.8).abs() < 1e-12);
    }

    #[test]
    fn header_soft_match_rule() {
        let pred = vec!["Found Organization".to_string()];
        let gold = vec!["Organization".to_string()];
        // token F1 = 2*(1/2*1)/(1/2+1) = 2/3 >= 0.5 -> match -> F1 1.0
        assert_eq!(header_soft_f1(&pred, &gold, 0.5), 1.0);
        let gold2 = vec!["Year".to_string()];
        assert_eq!(header_soft_f1(&pred, &gold2, 0.5), 0.0);
        let same = vec!["person".to_string(), "year".to_string()];
        assert_eq!(header_soft_f1(&same, &same, 0.5), 1.0);
    }

    #[test]
    fn header_matching_is_one_to_one() {
        let pred = vec!["person".to_string(), "person".to_string()];
        let gold = vec!["person".to_string()];
        // one pred matches, the other is a false positive: P=1/2, R=1 -> 2/3
        let f1 = header_soft_f1(&pred, &gold, 0.5);
        assert!((f1 - 2.0 / 3.0).abs() < 1e-12);
    }
}
