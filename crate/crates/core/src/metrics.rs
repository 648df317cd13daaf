//! Corpus-level response metrics: BLEU, NIST, distinct-n and n-gram
//! entropy.
//!
//! Counts are kept in ordered maps so every floating-point sum runs in the
//! same order on every run.

use std::collections::BTreeMap;
use std::io::BufRead;

/// One hypothesis and its references.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EvalPair {
    pub hypothesis: Vec<String>,
    pub references: Vec<Vec<String>>,
}

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("{file} has {found} lines, expected {expected}")]
    LineCount {
        file: String,
        expected: usize,
        found: usize,
    },
    #[error("line {line} has no reference")]
    NoReference { line: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

type Counts<'a> = BTreeMap<&'a [String], usize>;

fn ngram_counts(tokens: &[String], n: usize) -> Counts<'_> {
    let mut c = Counts::new();
    if n > 0 && tokens.len() >= n {
        for w in tokens.windows(n) {
            *c.entry(w).or_insert(0) += 1;
        }
    }
    c
}

/// Per hypothesis n-gram: the largest count in any single reference.
fn max_ref_counts<'a>(refs: &'a [Vec<String>], n: usize) -> Counts<'a> {
    let mut out = Counts::new();
    for r in refs {
        for (g, c) in ngram_counts(r, n) {
            let e = out.entry(g).or_insert(0);
            *e = (*e).max(c);
        }
    }
    out
}

/// Clipped matches and total hypothesis n-grams of one order over the
/// corpus.
fn clipped_counts(pairs: &[EvalPair], n: usize) -> (usize, usize) {
    let (mut matched, mut total) = (0, 0);
    for p in pairs {
        let hyp = ngram_counts(&p.hypothesis, n);
        let refs = max_ref_counts(&p.references, n);
        for (g, c) in &hyp {
            matched += (*c).min(refs.get(g).copied().unwrap_or(0));
            total += c;
        }
    }
    (matched, total)
}

/// Length of the reference closest to `hyp_len`; ties go to the shorter one.
fn closest_ref_len(refs: &[Vec<String>], hyp_len: usize) -> usize {
    refs.iter()
        .map(Vec::len)
        .min_by_key(|&r| (r.abs_diff(hyp_len), r))
        .unwrap_or(0)
}

pub const BLEU_SMOOTHING_EPS: f64 = 1e-9;

/// Corpus BLEU in [0, 1] with uniform weights over orders `1..=max_n`.
/// With `smoothing`, an order without matches counts `1e-9` matches
/// instead of zeroing the score.
pub fn bleu(pairs: &[EvalPair], max_n: usize, smoothing: bool) -> f64 {
    let hyp_len: usize = pairs.iter().map(|p| p.hypothesis.len()).sum();
    if hyp_len == 0 || max_n == 0 {
        return 0.0;
    }
    let ref_len: usize = pairs
        .iter()
        .map(|p| closest_ref_len(&p.references, p.hypothesis.len()))
        .sum();
    let mut log_sum = 0.0;
    for n in 1..=max_n {
        let (matched, total) = clipped_counts(pairs, n);
        if total == 0 {
            return 0.0;
        }
        let m = if matched == 0 {
            if !smoothing {
                return 0.0;
            }
            BLEU_SMOOTHING_EPS
        } else {
            matched as f64
        };
        log_sum += (m / total as f64).ln();
    }
    let bp = (1.0 - ref_len as f64 / hyp_len as f64).min(0.0).exp();
    bp * (log_sum / max_n as f64).exp()
}

/// `info(w1..wn) = log2(count(w1..w(n-1)) / count(w1..wn))` over all
/// reference n-grams up to `max_n`; for unigrams the prefix count is the
/// total number of reference words.
pub fn info_weights(pairs: &[EvalPair], max_n: usize) -> BTreeMap<Vec<String>, f64> {
    let mut counts: BTreeMap<&[String], usize> = BTreeMap::new();
    let mut words = 0usize;
    for p in pairs {
        for r in &p.references {
            words += r.len();
            for n in 1..=max_n {
                for (g, c) in ngram_counts(r, n) {
                    *counts.entry(g).or_insert(0) += c;
                }
            }
        }
    }
    counts
        .iter()
        .map(|(g, &c)| {
            let prefix = if g.len() == 1 {
                words
            } else {
                counts[&g[..g.len() - 1]]
            };
            (g.to_vec(), (prefix as f64 / c as f64).log2())
        })
        .collect()
}

/// `exp(-b ln^2(min(c / r, 1)))` with `b` chosen so that a ratio of 2/3
/// gives 0.5.
pub fn nist_brevity(hyp_len: f64, ref_len: f64) -> f64 {
    if hyp_len <= 0.0 {
        return 0.0;
    }
    let ratio = (hyp_len / ref_len).min(1.0);
    let beta = 0.5f64.ln() / 1.5f64.ln().powi(2);
    (beta * ratio.ln().powi(2)).exp()
}

/// Corpus NIST: the sum over orders `1..=max_n` of matched information per
/// hypothesis n-gram, times the brevity factor against the average
/// reference length.
pub fn nist(pairs: &[EvalPair], max_n: usize) -> f64 {
    let hyp_len: usize = pairs.iter().map(|p| p.hypothesis.len()).sum();
    if hyp_len == 0 {
        return 0.0;
    }
    let info = info_weights(pairs, max_n);
    let mut score = 0.0;
    for n in 1..=max_n {
        let (mut num, mut den) = (0.0, 0usize);
        for p in pairs {
            let hyp = ngram_counts(&p.hypothesis, n);
            let refs = max_ref_counts(&p.references, n);
            for (g, c) in &hyp {
                let m = (*c).min(refs.get(g).copied().unwrap_or(0));
                if m > 0 {
                    num += m as f64 * info[*g];
                }
                den += c;
            }
        }
        if den > 0 {
            score += num / den as f64;
        }
    }
    let ref_len: f64 = pairs
        .iter()
        .map(|p| {
            let k = p.references.len().max(1) as f64;
            p.references.iter().map(Vec::len).sum::<usize>() as f64 / k
        })
        .sum();
    score * nist_brevity(hyp_len as f64, ref_len)
}

fn pooled<S: AsRef<[String]>>(hyps: &[S], n: usize) -> (Counts<'_>, usize) {
    let mut all = Counts::new();
    let mut total = 0;
    for h in hyps {
        for (g, c) in ngram_counts(h.as_ref(), n) {
            *all.entry(g).or_insert(0) += c;
            total += c;
        }
    }
    (all, total)
}

/// Distinct n-grams over all n-grams, pooled across hypotheses.
pub fn distinct<S: AsRef<[String]>>(hyps: &[S], n: usize) -> f64 {
    let (all, total) = pooled(hyps, n);
    if total == 0 {
        0.0
    } else {
        all.len() as f64 / total as f64
    }
}

/// Natural-log entropy of the pooled n-gram distribution.
pub fn entropy<S: AsRef<[String]>>(hyps: &[S], n: usize) -> f64 {
    let (all, total) = pooled(hyps, n);
    if total == 0 {
        return 0.0;
    }
    let t = total as f64;
    -all.values()
        .map(|&c| {
            let p = c as f64 / t;
            p * p.ln()
        })
        .sum::<f64>()
}

/// The standard report: BLEU-1..4 (x100), NIST-1..4, distinct-1/2,
/// entropy-1..4.
pub fn metric_table(pairs: &[EvalPair], bleu_smoothing: bool) -> Vec<(String, f64)> {
    let hyps: Vec<&[String]> = pairs.iter().map(|p| p.hypothesis.as_slice()).collect();
    let mut out = Vec::new();
    for n in 1..=4 {
        out.push((format!("bleu-{n}"), 100.0 * bleu(pairs, n, bleu_smoothing)));
    }
    for n in 1..=4 {
        out.push((format!("nist-{n}"), nist(pairs, n)));
    }
    for n in 1..=2 {
        out.push((format!("distinct-{n}"), distinct(&hyps, n)));
    }
    for n in 1..=4 {
        out.push((format!("entropy-{n}"), entropy(&hyps, n)));
    }
    out
}

pub fn format_table(rows: &[(String, f64)]) -> String {
    rows.iter().map(|(k, v)| format!("{k}\t{v:.6}\n")).collect()
}

/// One whitespace-tokenized sentence per line.
pub fn read_sentences<R: BufRead>(reader: R) -> Result<Vec<Vec<String>>, MetricsError> {
    reader
        .lines()
        .map(|l| Ok(l?.split_whitespace().map(str::to_string).collect()))
        .collect()
}

/// Pair hypotheses with parallel reference files. Reference file `k > 0`
/// may leave a line empty when that context has fewer references; every
/// line must have at least one.
pub fn pair_up(
    hypotheses: Vec<Vec<String>>,
    references: Vec<(String, Vec<Vec<String>>)>,
) -> Result<Vec<EvalPair>, MetricsError> {
    let n = hypotheses.len();
    for (name, r) in &references {
        if r.len() != n {
            return Err(MetricsError::LineCount {
                file: name.clone(),
                expected: n,
                found: r.len(),
            });
        }
    }
    hypotheses
        .into_iter()
        .enumerate()
        .map(|(i, hypothesis)| {
            let refs: Vec<Vec<String>> = references
                .iter()
                .map(|(_, r)| r[i].clone())
                .filter(|r| !r.is_empty())
                .collect();
            if refs.is_empty() {
                return Err(MetricsError::NoReference { line: i + 1 });
            }
            Ok(EvalPair {
                hypothesis,
                references: refs,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    fn pair(h: &str, refs: &[&str]) -> EvalPair {
        EvalPair {
            hypothesis: toks(h),
            references: refs.iter().map(|r| toks(r)).collect(),
        }
    }

    #[test]
    fn bleu_examples() {
        let same = [pair("the cat sat on the mat", &["the cat sat on the mat"])];
        for n in 1..=4 {
            assert!((bleu(&same, n, false) - 1.0).abs() < 1e-15);
        }
        assert_eq!(bleu(&[pair("a a", &["a b"])], 1, false), 0.5);
        // c = 2, r = 4: BP = e^(1 - 2)
        let short = [pair("a b", &["a b c d"])];
        assert!((bleu(&short, 1, false) - (-1f64).exp()).abs() < 1e-15);
        // closest reference length decides the penalty
        let multi = [pair("a b", &["a b c d", "a b x"])];
        assert!((bleu(&multi, 1, false) - (1.0 - 1.5f64).exp()).abs() < 1e-15);
        assert_eq!(bleu(&[pair("", &["a"])], 1, false), 0.0);
        assert_eq!(bleu(&[pair("a b", &["c d"])], 2, false), 0.0);
        assert!(bleu(&[pair("a b", &["a c"])], 2, true) > 0.0);
    }

    #[test]
    fn nist_examples() {
        let p = [pair("a b", &["a b"])];
        assert!((nist(&p, 1) - 1.0).abs() < 1e-15);
        assert!((nist(&p, 2) - 1.0).abs() < 1e-15);
        assert_eq!(nist(&[pair("x y", &["a b"])], 2), 0.0);

        let once = [pair("a b c", &["a b a c"]), pair("c a", &["c a b"])];
        let twice: Vec<EvalPair> = once
            .iter()
            .map(|p| EvalPair {
                hypothesis: p.hypothesis.clone(),
                references: p.references.iter().chain(p.references.iter()).cloned().collect(),
            })
            .collect();
        assert_eq!(info_weights(&once, 3), info_weights(&twice, 3));
    }

    #[test]
    fn nist_brevity_factor() {
        assert_eq!(nist_brevity(5.0, 5.0), 1.0);
        assert_eq!(nist_brevity(7.0, 5.0), 1.0);
        assert!((nist_brevity(2.0, 3.0) - 0.5).abs() < 1e-15);
        assert_eq!(nist_brevity(0.0, 3.0), 0.0);
    }

    #[test]
    fn distinct_and_entropy_examples() {
        let h = [toks("a a b")];
        assert!((distinct(&h, 1) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(distinct(&[toks("a b c d")], 1), 1.0);
        assert_eq!(distinct(&[toks("z z z z z")], 1), 0.2);
        assert_eq!(distinct(&[toks("")], 2), 0.0);

        assert!((entropy(&[toks("a b")], 1) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(entropy(&[toks("q q q")], 1), 0.0);
        assert!((entropy(&[toks("a b c d e")], 1) - 5f64.ln()).abs() < 1e-15);
        assert!((entropy(&[toks("a b"), toks("c d")], 1) - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn pairing_files() {
        let hyps = vec![toks("a b"), toks("")];
        let refs = vec![
            ("ref.0.txt".to_string(), vec![toks("a b"), toks("c")]),
            ("ref.1.txt".to_string(), vec![toks(""), toks("d e")]),
        ];
        let pairs = pair_up(hyps.clone(), refs).unwrap();
        assert_eq!(pairs[0].references.len(), 1);
        assert_eq!(pairs[1].references.len(), 2);
        let bad = vec![("ref.0.txt".to_string(), vec![toks("a")])];
        assert!(matches!(pair_up(hyps, bad), Err(MetricsError::LineCount { .. })));
        let none = vec![("ref.0.txt".to_string(), vec![toks("")])];
        assert!(matches!(pair_up(vec![toks("a")], none), Err(MetricsError::NoReference { line: 1 })));
    }

    fn arb_sentence() -> impl Strategy<Value = Vec<String>> {
        prop::collection::vec((0u8..6).prop_map(|i| format!("w{i}")), 0..8)
    }

    fn arb_pairs() -> impl Strategy<Value = Vec<EvalPair>> {
        prop::collection::vec(
            (arb_sentence(), prop::collection::vec(arb_sentence(), 1..3)).prop_map(|(hypothesis, references)| {
                EvalPair {
                    hypothesis,
                    references,
                }
            }),
            1..6,
        )
    }

    proptest! {
        #[test]
        fn bounds(pairs in arb_pairs()) {
            let hyps: Vec<&[String]> = pairs.iter().map(|p| p.hypothesis.as_slice()).collect();
            for n in 1..=4 {
                let b = bleu(&pairs, n, true);
                prop_assert!((0.0..=1.0 + 1e-12).contains(&b));
                prop_assert!(nist(&pairs, n) >= 0.0);
                let total: usize = hyps.iter().map(|h| h.len().saturating_sub(n - 1)).sum();
                let e = entropy(&hyps, n);
                prop_assert!(e >= 0.0);
                if total > 0 {
                    prop_assert!(e <= (total as f64).ln() + 1e-12);
                }
            }
            for n in 1..=2 {
                prop_assert!((0.0..=1.0).contains(&distinct(&hyps, n)));
            }
        }

        #[test]
        fn self_reference_scores_one(h in prop::collection::vec((0u8..6).prop_map(|i| format!("w{i}")), 4..10)) {
            let p = [EvalPair { hypothesis: h.clone(), references: vec![h] }];
            for n in 1..=4 {
                prop_assert!((bleu(&p, n, false) - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn pairing_order_does_not_matter(pairs in arb_pairs(), rot in 0usize..6) {
            let mut rotated = pairs.clone();
            let k = rot % rotated.len();
            rotated.rotate_left(k);
            let hyps: Vec<&[String]> = pairs.iter().map(|p| p.hypothesis.as_slice()).collect();
            let hyps_r: Vec<&[String]> = rotated.iter().map(|p| p.hypothesis.as_slice()).collect();
            for n in 1..=4 {
                prop_assert!((bleu(&pairs, n, true) - bleu(&rotated, n, true)).abs() < 1e-12);
                prop_assert!((nist(&pairs, n) - nist(&rotated, n)).abs() < 1e-12);
                prop_assert!((entropy(&hyps, n) - entropy(&hyps_r, n)).abs() < 1e-12);
            }
            prop_assert!((distinct(&hyps, 2) - distinct(&hyps_r, 2)).abs() < 1e-12);
        }
    }
}
