//! Edit distance and character error rate.

use crate::error::{Error, Result};

/// Unit-cost insert/delete/substitute distance over Unicode scalar values.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut row: Vec<usize> = (0..=b.len()).collect();
    for (i, ca) in a.iter().enumerate() {
        let mut diag = row[0];
        row[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = diag + usize::from(ca != cb);
            diag = row[j + 1];
            row[j + 1] = sub.min(row[j] + 1).min(diag + 1);
        }
    }
    row[b.len()]
}

/// Pooled character error rate: total distance over total reference length.
pub fn cer<R: AsRef<str>, H: AsRef<str>>(refs: &[R], hyps: &[H]) -> Result<f64> {
    Ok(EvalReport::new(refs, hyps)?.cer)
}

/// Per-sample distances and the pooled error rate.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub distances: Vec<usize>,
    pub ref_lengths: Vec<usize>,
    pub cer: f64,
}

impl EvalReport {
    pub fn new<R: AsRef<str>, H: AsRef<str>>(refs: &[R], hyps: &[H]) -> Result<Self> {
        if refs.len() != hyps.len() {
            return Err(Error::Data(format!("{} references but {} hypotheses", refs.len(), hyps.len())));
        }
        let distances: Vec<usize> = refs.iter().zip(hyps).map(|(r, h)| levenshtein(r.as_ref(), h.as_ref())).collect();
        let ref_lengths: Vec<usize> = refs.iter().map(|r| r.as_ref().chars().count()).collect();
        let total: usize = ref_lengths.iter().sum();
        if total == 0 {
            return Err(Error::Data("references are all empty".into()));
        }
        let cer = distances.iter().sum::<usize>() as f64 / total as f64;
        Ok(Self { distances, ref_lengths, cer })
    }

    /// Per-sample rates; empty references give `None`.
    pub fn sample_cers(&self) -> Vec<Option<f64>> {
        self.distances
            .iter()
            .zip(&self.ref_lengths)
            .map(|(&d, &n)| (n > 0).then(|| d as f64 / n as f64))
            .collect()
    }
}

/// 1-based ranks with ties sharing their mean rank.
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let mean = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = mean;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation: Pearson correlation of tie-averaged ranks.
/// `None` for fewer than two points or a constant input.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn spearman_examples() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 35.0]), Some(1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), Some(-1.0));
        assert_eq!(spearman(&[1.0, 2.0], &[5.0, 5.0]), None);
        // Ranks [1,2,3,4] vs [1,2.5,2.5,4]: r = 4.5 / √(5·4.5).
        let r = spearman(&[1.0, 2.0, 3.0, 4.0], &[0.0, 7.0, 7.0, 9.0]).unwrap();
        assert!((r - 4.5 / (5.0f64 * 4.5).sqrt()).abs() < 1e-12);
    }

    /// Direct recursive definition, exponential time.
    fn naive(a: &[char], b: &[char]) -> usize {
        match (a.split_first(), b.split_first()) {
            (None, _) => b.len(),
            (_, None) => a.len(),
            (Some((x, ra)), Some((y, rb))) => {
                let sub = naive(ra, rb) + usize::from(x != y);
                sub.min(naive(ra, b) + 1).min(naive(a, rb) + 1)
            }
        }
    }

    #[test]
    fn distance_examples() {
        assert_eq!(levenshtein("abc", "abc"), 0);
        assert_eq!(levenshtein("", "abc"), 3);
        assert_eq!(levenshtein("kitten", "sitting"), 3);
        let k: Vec<char> = "kitten".chars().collect();
        let s: Vec<char> = "sitting".chars().collect();
        assert_eq!(naive(&k, &s), 3);
        assert_eq!(levenshtein("é", "e"), 1);
        assert_eq!(levenshtein("\u{fffd}b", "ab"), 1);
    }

    #[test]
    fn cer_examples() {
        assert_eq!(cer(&["abc", "de"], &["abc", "de"]).unwrap(), 0.0);
        assert_eq!(cer(&["abcd"], &["abed"]).unwrap(), 0.25);
        assert_eq!(cer(&["ab", "cd"], &["ab", "xy"]).unwrap(), 0.5);
        assert_eq!(cer(&["ab"], &["abxxxxxx"]).unwrap(), 3.0);
        assert!(cer(&["", ""], &["a", "b"]).is_err());
        assert!(cer(&["a"], &["a", "b"]).is_err());
    }

    #[test]
    fn report_keeps_per_sample_rates() {
        let r = EvalReport::new(&["abcd", ""], &["abed", "x"]).unwrap();
        assert_eq!(r.distances, vec![1, 1]);
        assert_eq!(r.sample_cers(), vec![Some(0.25), None]);
        assert_eq!(r.cer, 0.5);
    }

    fn small_string() -> impl Strategy<Value = String> {
        proptest::collection::vec(prop_oneof![Just('a'), Just('b'), Just('c')], 0..=6).prop_map(|v| v.into_iter().collect())
    }

    proptest! {
        #[test]
        fn metric_properties(a in small_string(), b in small_string(), c in small_string()) {
            let d = levenshtein(&a, &b);
            prop_assert_eq!(d, levenshtein(&b, &a));
            prop_assert_eq!(levenshtein(&a, &a), 0);
            let (la, lb) = (a.chars().count(), b.chars().count());
            prop_assert!(la.abs_diff(lb) <= d && d <= la.max(lb));
            prop_assert!(levenshtein(&a, &c) <= d + levenshtein(&b, &c));
        }

        #[test]
        fn cer_is_permutation_invariant(pairs in proptest::collection::vec((small_string(), small_string()), 1..8), seed in any::<u64>()) {
            prop_assume!(pairs.iter().any(|(r, _)| !r.is_empty()));
            let refs: Vec<_> = pairs.iter().map(|p| p.0.clone()).collect();
            let hyps: Vec<_> = pairs.iter().map(|p| p.1.clone()).collect();
            let mut order: Vec<usize> = (0..pairs.len()).collect();
            order.rotate_left((seed % pairs.len() as u64) as usize);
            order.reverse();
            let r2: Vec<_> = order.iter().map(|&i| refs[i].clone()).collect();
            let h2: Vec<_> = order.iter().map(|&i| hyps[i].clone()).collect();
            prop_assert_eq!(cer(&refs, &hyps).unwrap(), cer(&r2, &h2).unwrap());
        }
    }
}
