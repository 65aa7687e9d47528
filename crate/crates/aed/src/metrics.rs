//! Edit-distance evaluation: Levenshtein distance, normalized edit
//! distance in percent, and recognition reports aggregating character-
//! and word-level scores over a test set.

use crate::error::{Error, Result};
use crate::vocab::nfc;

/// Minimum unit-cost insert/delete/substitute count, bottom-up DP.
pub fn levenshtein<Tok: PartialEq>(a: &[Tok], b: &[Tok]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for i in 1..=a.len() {
        cur[0] = i;
        for j in 1..=b.len() {
            let sub = prev[j - 1] + usize::from(a[i - 1] != b[j - 1]);
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Normalized edit distance in percent: 100·ED/|reference|.
pub fn ned<Tok: PartialEq>(reference: &[Tok], hypothesis: &[Tok]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Usage(
            "normalized edit distance needs a non-empty reference".into(),
        ));
    }
    Ok(100.0 * levenshtein(reference, hypothesis) as f64 / reference.len() as f64)
}

/// Unicode scalar values of the NFC-composed string.
pub fn chars_of(s: &str) -> Vec<char> {
    nfc(s).chars().collect()
}

/// Whitespace-split words of the NFC-composed string.
pub fn words_of(s: &str) -> Vec<String> {
    nfc(s).split_whitespace().map(str::to_owned).collect()
}

#[derive(Debug, Clone)]
pub struct EvalRow {
    pub reference: String,
    pub hypothesis: String,
    pub char_ed: usize,
    pub word_ed: usize,
    pub ned_char: f64,
    pub ned_word: f64,
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    /// mean of per-sample character-level NEDs, percent
    pub cer: f64,
    /// mean of per-sample word-level NEDs, percent
    pub wer: f64,
}

impl EvalReport {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("reference\thypothesis\tchar_ed\tword_ed\tned_char\tned_word\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{:.4}\t{:.4}\n",
                r.reference, r.hypothesis, r.char_ed, r.word_ed, r.ned_char, r.ned_word
            ));
        }
        out
    }

    pub fn summary_line(&self) -> String {
        format!("CER={:.2} WER={:.2}", self.cer, self.wer)
    }
}

/// Score (reference, hypothesis) pairs. References must be non-empty.
pub fn score_pairs(pairs: &[(String, String)]) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(Error::Usage("empty evaluation set".into()));
    }
    let mut rows = Vec::with_capacity(pairs.len());
    for (r, h) in pairs {
        let (rc, hc) = (chars_of(r), chars_of(h));
        let (rw, hw) = (words_of(r), words_of(h));
        let char_ed = levenshtein(&rc, &hc);
        let word_ed = levenshtein(&rw, &hw);
        rows.push(EvalRow {
            reference: r.clone(),
            hypothesis: h.clone(),
            char_ed,
            word_ed,
            ned_char: ned(&rc, &hc)?,
            ned_word: ned(&rw, &hw)?,
        });
    }
    let n = rows.len() as f64;
    let cer = rows.iter().map(|r| r.ned_char).sum::<f64>() / n;
    let wer = rows.iter().map(|r| r.ned_word).sum::<f64>() / n;
    Ok(EvalReport { rows, cer, wer })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashMap;

    // independent oracle: top-down recursion with memoization
    fn lev_oracle(a: &[u8], b: &[u8]) -> usize {
        fn go(a: &[u8], b: &[u8], i: usize, j: usize, memo: &mut HashMap<(usize, usize), usize>) -> usize {
            if i == 0 {
                return j;
            }
            if j == 0 {
                return i;
            }
            if let Some(&v) = memo.get(&(i, j)) {
                return v;
            }
            let del = go(a, b, i - 1, j, memo) + 1;
            let ins = go(a, b, i, j - 1, memo) + 1;
            let sub = go(a, b, i - 1, j - 1, memo) + usize::from(a[i - 1] != b[j - 1]);
            let v = del.min(ins).min(sub);
            memo.insert((i, j), v);
            v
        }
        go(a, b, a.len(), b.len(), &mut HashMap::new())
    }

    fn all_strings(alphabet: &[u8], max_len: usize) -> Vec<Vec<u8>> {
        let mut out = vec![vec![]];
        let mut layer = vec![vec![]];
        for _ in 0..max_len {
            let mut next = Vec::new();
            for s in &layer {
                for &c in alphabet {
                    let mut t = s.clone();
                    t.push(c);
                    next.push(t);
                }
            }
            out.extend(next.iter().cloned());
            layer = next;
        }
        out
    }

    #[test]
    fn known_cases() {
        assert_eq!(levenshtein(b"", b"abc"), 3);
        assert_eq!(levenshtein(b"kitten", b"sitting"), 3);
        assert_eq!(lev_oracle(b"kitten", b"sitting"), 3);
        assert_eq!(levenshtein(b"abc", b"abc"), 0);
    }

    #[test]
    fn matches_oracle_exhaustively() {
        // full cross product of token sequences with length <= 6 over a
        // 3-token alphabet, on a thinned grid to keep runtime sane: all
        // pairs up to length 3, sampled pairs up to length 6
        let short = all_strings(b"xyz", 3);
        for a in &short {
            for b in &short {
                assert_eq!(levenshtein(a, b), lev_oracle(a, b), "{a:?} vs {b:?}");
            }
        }
        let long = all_strings(b"xyz", 6);
        let mut rng = crate::util::SplitMix64::new(99);
        for _ in 0..2000 {
            let a = &long[rng.below(long.len())];
            let b = &long[rng.below(long.len())];
            assert_eq!(levenshtein(a, b), lev_oracle(a, b), "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn ned_examples() {
        let r = chars_of("thành");
        let h = chars_of("thanh");
        assert_eq!(r.len(), 5);
        assert_eq!(levenshtein(&r, &h), 1);
        assert_eq!(ned(&r, &h).unwrap(), 20.0);

        let rw = words_of("tôi từng nghĩ");
        let hw = words_of("tôi từng nghỉ");
        assert_eq!(rw.len(), 3);
        assert!((ned(&rw, &hw).unwrap() - 100.0 / 3.0).abs() < 1e-12);

        assert_eq!(ned(&r, &r).unwrap(), 0.0);
        assert!(matches!(ned::<char>(&[], &r), Err(Error::Usage(_))));
    }

    #[test]
    fn nfc_equates_combining_and_precomposed() {
        // "e" + COMBINING ACUTE vs precomposed U+00E9
        let decomposed = "e\u{0301}";
        assert_eq!(chars_of(decomposed), chars_of("é"));
        assert_eq!(levenshtein(&chars_of(decomposed), &chars_of("é")), 0);
    }

    #[test]
    fn report_aggregates_are_means() {
        let pairs = vec![
            ("thành".to_string(), "thanh".to_string()),
            ("abc".to_string(), "abc".to_string()),
        ];
        let rep = score_pairs(&pairs).unwrap();
        assert_eq!(rep.rows.len(), 2);
        assert!((rep.cer - 10.0).abs() < 1e-12);
        assert_eq!(rep.summary_line(), "CER=10.00 WER=50.00");
        assert_eq!(rep.to_tsv().lines().count(), 3);
    }

    #[test]
    fn empty_set_rejected() {
        assert!(matches!(score_pairs(&[]), Err(Error::Usage(_))));
    }

    proptest! {
        #[test]
        fn metric_properties(a in proptest::collection::vec(0u8..3, 0..8),
                             b in proptest::collection::vec(0u8..3, 0..8),
                             c in proptest::collection::vec(0u8..3, 0..8)) {
            let dab = levenshtein(&a, &b);
            prop_assert_eq!(dab, levenshtein(&b, &a));
            prop_assert_eq!(dab == 0, a == b);
            prop_assert!(dab <= levenshtein(&a, &c) + levenshtein(&c, &b));
        }
    }
}
