//! NLG metrics (BLEU-4, ROUGE-L, METEOR) and clinical-accuracy metrics.
//!
//! Tokenization for all three NLG metrics is the same: lowercase, split on
//! whitespace and punctuation (alphanumeric runs survive). METEOR matching
//! runs an exact stage then a suffix-stem stage, aligning left to right.

use std::collections::HashMap;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::eval::labels::LabelVector;

/// Metric tokenizer: lowercase alphanumeric runs.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_string())
        .collect()
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts: HashMap<&[String], usize> = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// BLEU-4 with modified n-gram precision (clipped against the best reference),
/// add-one smoothing for n ≥ 2 when the clipped count is zero, and the usual
/// brevity penalty against the closest reference length.
pub fn bleu4(candidate: &str, references: &[&str]) -> f64 {
    let cand = tokenize(candidate);
    if cand.is_empty() || references.is_empty() {
        return 0.0;
    }
    let refs: Vec<Vec<String>> = references.iter().map(|r| tokenize(r)).collect();
    if refs.iter().all(|r| r.is_empty()) {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let cand_counts = ngram_counts(&cand, n);
        let total: usize = cand_counts.values().sum();
        let mut matched = 0usize;
        for (gram, &count) in &cand_counts {
            let best_ref = refs
                .iter()
                .map(|r| ngram_counts(r, n).get(gram).copied().unwrap_or(0))
                .max()
                .unwrap_or(0);
            matched += count.min(best_ref);
        }
        let p = if matched > 0 {
            matched as f64 / total as f64
        } else if n >= 2 {
            (matched as f64 + 1.0) / (total as f64 + 1.0)
        } else {
            return 0.0; // no unigram overlap
        };
        log_sum += p.ln();
    }
    // Closest reference length; ties break toward the shorter reference.
    let c_len = cand.len() as f64;
    let r_len = refs
        .iter()
        .map(|r| r.len())
        .min_by_key(|&l| ((l as f64 - c_len).abs() * 1e6) as i64 * 2 + i64::from(l as f64 > c_len))
        .unwrap() as f64;
    let bp = if c_len >= r_len { 1.0 } else { (1.0 - r_len / c_len).exp() };
    bp * (log_sum / 4.0).exp()
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut dp = vec![0usize; b.len() + 1];
    for ai in a {
        let mut prev = 0;
        for (j, bj) in b.iter().enumerate() {
            let cur = dp[j + 1];
            dp[j + 1] = if ai == bj { prev + 1 } else { dp[j + 1].max(dp[j]) };
            prev = cur;
        }
    }
    dp[b.len()]
}

/// ROUGE-L F-measure with recall weight β = 1.2.
pub fn rouge_l(candidate: &str, reference: &str) -> f64 {
    const BETA: f64 = 1.2;
    let cand = tokenize(candidate);
    let reference = tokenize(reference);
    if cand.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(&cand, &reference) as f64;
    if lcs == 0.0 {
        return 0.0;
    }
    let p = lcs / cand.len() as f64;
    let r = lcs / reference.len() as f64;
    let b2 = BETA * BETA;
    (1.0 + b2) * p * r / (r + b2 * p)
}

/// Strip one inflection suffix when enough stem remains.
pub fn stem(token: &str) -> String {
    for suffix in ["ing", "ed", "s"] {
        if let Some(stripped) = token.strip_suffix(suffix) {
            if stripped.len() >= 3 {
                return stripped.to_string();
            }
        }
    }
    token.to_string()
}

/// METEOR with exact + stem matching stages, harmonic mean F (α = 0.9) and
/// fragmentation penalty (γ = 0.5, β = 3).
pub fn meteor(candidate: &str, reference: &str) -> f64 {
    const ALPHA: f64 = 0.9;
    const GAMMA: f64 = 0.5;
    const BETA: f64 = 3.0;
    let cand = tokenize(candidate);
    let reference = tokenize(reference);
    if cand.is_empty() || reference.is_empty() {
        return 0.0;
    }
    // pairs[i] = Some(ref index matched by candidate token i)
    let mut pairs: Vec<Option<usize>> = vec![None; cand.len()];
    let mut ref_used = vec![false; reference.len()];
    // Stage 1: exact; stage 2: stem. Left-to-right, first free reference slot.
    for stage in 0..2 {
        let key = |t: &str| if stage == 0 { t.to_string() } else { stem(t) };
        for (i, c) in cand.iter().enumerate() {
            if pairs[i].is_some() {
                continue;
            }
            let ck = key(c);
            for (j, r) in reference.iter().enumerate() {
                if !ref_used[j] && key(r) == ck {
                    pairs[i] = Some(j);
                    ref_used[j] = true;
                    break;
                }
            }
        }
    }
    let matched: Vec<(usize, usize)> = pairs
        .iter()
        .enumerate()
        .filter_map(|(i, j)| j.map(|j| (i, j)))
        .collect();
    let m = matched.len() as f64;
    if m == 0.0 {
        return 0.0;
    }
    let p = m / cand.len() as f64;
    let r = m / reference.len() as f64;
    let f = p * r / (ALPHA * p + (1.0 - ALPHA) * r);
    let mut chunks = 1usize;
    for w in matched.windows(2) {
        if w[1].0 != w[0].0 + 1 || w[1].1 != w[0].1 + 1 {
            chunks += 1;
        }
    }
    let penalty = GAMMA * (chunks as f64 / m).powf(BETA);
    f * (1.0 - penalty)
}

/// Precision / recall / F1 with raw counts.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Prf {
    fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let precision = if tp + fp > 0 { tp as f64 / (tp + fp) as f64 } else { 0.0 };
        let recall = if tp + fn_ > 0 { tp as f64 / (tp + fn_) as f64 } else { 0.0 };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Prf { precision, recall, f1, tp, fp, fn_ }
    }
}

/// Per-finding and macro-averaged clinical accuracy.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CaReport {
    pub per_finding: IndexMap<String, Prf>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
}

/// Standard precision/recall/F1 per finding over paired label vectors, plus
/// unweighted macro averages.
pub fn ca_metrics(pred: &[LabelVector], gt: &[LabelVector]) -> Result<CaReport> {
    if pred.len() != gt.len() {
        return Err(Error::invalid(format!(
            "ca_metrics length mismatch: {} predictions vs {} references",
            pred.len(),
            gt.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::invalid("ca_metrics needs at least one example"));
    }
    let names: Vec<String> = gt[0].keys().cloned().collect();
    for lv in pred.iter().chain(gt.iter()) {
        if lv.keys().cloned().collect::<Vec<_>>() != names {
            return Err(Error::invalid("label vectors must share one lexicon"));
        }
    }
    let mut per_finding = IndexMap::new();
    for name in &names {
        let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
        for (p, g) in pred.iter().zip(gt) {
            match (p[name.as_str()], g[name.as_str()]) {
                (1, 1) => tp += 1,
                (1, 0) => fp += 1,
                (0, 1) => fn_ += 1,
                _ => {}
            }
        }
        per_finding.insert(name.clone(), Prf::from_counts(tp, fp, fn_));
    }
    let k = per_finding.len() as f64;
    let macro_precision = per_finding.values().map(|p| p.precision).sum::<f64>() / k;
    let macro_recall = per_finding.values().map(|p| p.recall).sum::<f64>() / k;
    let macro_f1 = per_finding.values().map(|p| p.f1).sum::<f64>() / k;
    Ok(CaReport { per_finding, macro_precision, macro_recall, macro_f1 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::labels::{extract_labels, AbnormalityLexicon};

    #[test]
    fn bleu_identity_is_one() {
        let s = "there is a nodule in the left upper region";
        assert!((bleu4(s, &[s]) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bleu_empty_candidate_is_zero() {
        assert_eq!(bleu4("", &["a b c"]), 0.0);
        assert_eq!(bleu4("   ", &["a b c"]), 0.0);
    }

    #[test]
    fn bleu_disjoint_is_zero() {
        assert_eq!(bleu4("x y z", &["a b c"]), 0.0);
    }

    #[test]
    fn bleu_near_match_hand_case() {
        // p1=4/5, p2=3/4, p3=2/3, p4=1/2, BP=1 -> (0.2)^(1/4)
        let got = bleu4("a b c d e", &["a b c d f"]);
        let want = 0.2f64.powf(0.25);
        assert!((got - want).abs() < 1e-12, "got {got}, want {want}");
    }

    #[test]
    fn rouge_identity_and_disjoint() {
        assert!((rouge_l("a b c", "a b c") - 1.0).abs() < 1e-12);
        assert_eq!(rouge_l("x y", "a b"), 0.0);
        assert_eq!(rouge_l("", "a"), 0.0);
    }

    #[test]
    fn rouge_lcs_hand_case() {
        // LCS("a b c d", "a c b d") = 3, P = R = 0.75 -> F = 0.75
        let got = rouge_l("a b c d", "a c b d");
        assert!((got - 0.75).abs() < 1e-12, "got {got}");
    }

    #[test]
    fn meteor_identity_closed_form() {
        // single chunk: score = 1 - 0.5 * (1/m)^3
        let s = "a b c d e";
        let m = 5.0f64;
        let want = 1.0 - 0.5 * (1.0 / m).powi(3);
        assert!((meteor(s, s) - want).abs() < 1e-12);
    }

    #[test]
    fn meteor_no_match_is_zero() {
        assert_eq!(meteor("x y z", "a b c"), 0.0);
    }

    #[test]
    fn meteor_partial_hand_case() {
        // cand "a b c", ref "a x c": matches a, c -> m=2, P=R=2/3, F=2/3
        // pairs (0,0) and (2,2) are non-contiguous -> 2 chunks
        // penalty = 0.5 * (2/2)^3 = 0.5 -> score = (2/3) * 0.5 = 1/3
        let got = meteor("a b c", "a x c");
        assert!((got - 1.0 / 3.0).abs() < 1e-12, "got {got}");
    }

    #[test]
    fn meteor_stem_stage_matches_inflections() {
        let got = meteor("nodules", "nodule");
        assert!(got > 0.0);
    }

    #[test]
    fn ca_perfect_prediction() {
        let lex = AbnormalityLexicon::synthetic();
        let v = extract_labels("there is a nodule . no effusion .", &lex);
        let report = ca_metrics(&[v.clone()], &[v]).unwrap();
        assert_eq!(report.per_finding["nodule"].f1, 1.0);
        // findings absent everywhere have no positives: P=R=F1=0 by convention
        assert_eq!(report.per_finding["effusion"].tp, 0);
    }

    #[test]
    fn ca_counting_hand_case() {
        // one finding: TP=2, FP=1, FN=1 -> P = R = F1 = 2/3
        let mk = |v: u8| {
            let mut lv = LabelVector::new();
            lv.insert("nodule".into(), v);
            lv
        };
        let pred = vec![mk(1), mk(1), mk(1), mk(0)];
        let gt = vec![mk(1), mk(1), mk(0), mk(1)];
        let rep = ca_metrics(&pred, &gt).unwrap();
        let p = rep.per_finding["nodule"];
        assert!((p.precision - 2.0 / 3.0).abs() < 1e-12);
        assert!((p.recall - 2.0 / 3.0).abs() < 1e-12);
        assert!((p.f1 - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn ca_all_negative_recall_zero() {
        let mk = |v: u8| {
            let mut lv = LabelVector::new();
            lv.insert("nodule".into(), v);
            lv
        };
        let rep = ca_metrics(&[mk(0), mk(0)], &[mk(1), mk(0)]).unwrap();
        assert_eq!(rep.per_finding["nodule"].recall, 0.0);
        assert_eq!(rep.per_finding["nodule"].f1, 0.0);
    }

    #[test]
    fn ca_rejects_length_mismatch() {
        let mk = || {
            let mut lv = LabelVector::new();
            lv.insert("nodule".into(), 1);
            lv
        };
        assert!(ca_metrics(&[mk()], &[mk(), mk()]).is_err());
    }

    #[test]
    fn macro_f1_is_mean_of_per_finding() {
        let mk = |a: u8, b: u8| {
            let mut lv = LabelVector::new();
            lv.insert("x".into(), a);
            lv.insert("y".into(), b);
            lv
        };
        let rep = ca_metrics(&[mk(1, 0), mk(0, 1)], &[mk(1, 1), mk(0, 1)]).unwrap();
        let mean = (rep.per_finding["x"].f1 + rep.per_finding["y"].f1) / 2.0;
        assert!((rep.macro_f1 - mean).abs() < 1e-12);
    }
}
