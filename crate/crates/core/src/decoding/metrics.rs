//! Word error rate and Spearman rank correlation.

use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::alphabet::normalize;
use crate::error::{Error, Result};

/// Edit counts of a word-level alignment.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EditCounts {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub reference_words: usize,
}

impl EditCounts {
    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    pub fn rate(&self) -> f64 {
        self.errors() as f64 / self.reference_words as f64
    }

    pub fn add(&mut self, o: &EditCounts) {
        self.substitutions += o.substitutions;
        self.deletions += o.deletions;
        self.insertions += o.insertions;
        self.reference_words += o.reference_words;
    }
}

/// Levenshtein distance between token sequences.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
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

/// Minimum-edit alignment counts. Among optimal alignments, substitutions are
/// preferred, then deletions.
pub fn word_edits(hypothesis: &[&str], reference: &[&str]) -> Result<EditCounts> {
    if reference.is_empty() {
        return Err(Error::pre("WER is undefined for an empty reference"));
    }
    let (n, m) = (reference.len(), hypothesis.len());
    // d[i][j]: (cost, subs, dels, ins) aligning reference[..i] with hypothesis[..j]
    let mut d = vec![vec![(0usize, 0usize, 0usize, 0usize); m + 1]; n + 1];
    for i in 1..=n {
        d[i][0] = (i, 0, i, 0);
    }
    for j in 1..=m {
        d[0][j] = (j, 0, 0, j);
    }
    for i in 1..=n {
        for j in 1..=m {
            let (c, s, dl, ins) = d[i - 1][j - 1];
            let same = reference[i - 1] == hypothesis[j - 1];
            let diag = if same { (c, s, dl, ins) } else { (c + 1, s + 1, dl, ins) };
            let (c, s, dl, ins) = d[i - 1][j];
            let del = (c + 1, s, dl + 1, ins);
            let (c, s, dl, ins) = d[i][j - 1];
            let insr = (c + 1, s, dl, ins + 1);
            let mut best = diag;
            for cand in [del, insr] {
                if cand.0 < best.0 {
                    best = cand;
                }
            }
            d[i][j] = best;
        }
    }
    let (_, s, dl, ins) = d[n][m];
    Ok(EditCounts {
        substitutions: s,
        deletions: dl,
        insertions: ins,
        reference_words: n,
    })
}

/// `(S + D + I) / N` over whitespace-separated, lowercased words.
pub fn wer(hypothesis: &str, reference: &str) -> Result<f64> {
    Ok(wer_counts(hypothesis, reference)?.rate())
}

pub fn wer_counts(hypothesis: &str, reference: &str) -> Result<EditCounts> {
    let h = normalize(hypothesis);
    let r = normalize(reference);
    let hw: Vec<&str> = h.split_whitespace().collect();
    let rw: Vec<&str> = r.split_whitespace().collect();
    word_edits(&hw, &rw)
}

/// Corpus WER: total edits over total reference words.
pub fn corpus_wer<'a, I>(pairs: I) -> Result<f64>
where
    I: IntoIterator<Item = (&'a str, &'a str)>,
{
    let mut acc = EditCounts::default();
    for (h, r) in pairs {
        acc.add(&wer_counts(h, r)?);
    }
    if acc.reference_words == 0 {
        return Err(Error::pre("no reference words"));
    }
    Ok(acc.rate())
}

/// Ranks starting at 1; tied values share the average of their positions.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

/// Largest sample for which the p-value is computed by full enumeration.
pub const EXACT_P_MAX_N: usize = 10;

/// Spearman's rho (Pearson correlation of average ranks) with a two-sided
/// p-value: exact over all permutations for `n <= 10`, Student-t
/// approximation with `n − 2` degrees of freedom above that.
pub fn spearman_rho(xs: &[f64], ys: &[f64]) -> Result<(f64, f64)> {
    if xs.len() != ys.len() {
        return Err(Error::dim(format!("{} vs {} values", xs.len(), ys.len())));
    }
    let n = xs.len();
    if n < 3 {
        return Err(Error::pre("Spearman needs at least 3 pairs"));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("Spearman input".into()));
    }
    let rx = average_ranks(xs);
    let ry = average_ranks(ys);
    let rho = pearson(&rx, &ry);
    if !rho.is_finite() {
        return Err(Error::pre("a constant column has no rank correlation"));
    }
    let p = if n <= EXACT_P_MAX_N {
        exact_p(&rx, &ry, rho)
    } else {
        t_approx_p(rho, n)
    };
    Ok((rho, p))
}

/// Share of permutations of `ry` whose |rho| reaches the observed |rho|.
fn exact_p(rx: &[f64], ry: &[f64], rho: f64) -> f64 {
    let n = rx.len();
    let mx = rx.iter().sum::<f64>() / n as f64;
    let my = ry.iter().sum::<f64>() / n as f64;
    let cx: Vec<f64> = rx.iter().map(|x| x - mx).collect();
    let mut cy: Vec<f64> = ry.iter().map(|y| y - my).collect();
    let denom = (cx.iter().map(|x| x * x).sum::<f64>() * cy.iter().map(|y| y * y).sum::<f64>()).sqrt();
    let threshold = rho.abs() * denom - 1e-9 * denom.max(1.0);
    let dot = |cy: &[f64]| cx.iter().zip(cy).map(|(a, b)| a * b).sum::<f64>();

    // Heap's algorithm, iterative
    let mut c = vec![0usize; n];
    let mut hits: u64 = u64::from(dot(&cy).abs() >= threshold);
    let mut total: u64 = 1;
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                cy.swap(0, i);
            } else {
                cy.swap(c[i], i);
            }
            total += 1;
            if dot(&cy).abs() >= threshold {
                hits += 1;
            }
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    hits as f64 / total as f64
}

fn t_approx_p(rho: f64, n: usize) -> f64 {
    if rho.abs() >= 1.0 {
        return 0.0;
    }
    let df = (n - 2) as f64;
    let t = rho * (df / (1.0 - rho * rho)).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df).expect("df > 0");
    2.0 * (1.0 - dist.cdf(t.abs()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const REF: &str = "after breakfast instead of working i decided to walk down towards the common";
    const HYP: &str = "after breakfast instead forking at aside to walk down towards the common";

    #[test]
    fn transcription_example() {
        let c = wer_counts(HYP, REF).unwrap();
        assert_eq!(c.reference_words, 13);
        assert_eq!((c.substitutions, c.deletions, c.insertions), (3, 1, 0));
        assert!((wer(HYP, REF).unwrap() - 4.0 / 13.0).abs() < 1e-15);
    }

    #[test]
    fn wer_edge_cases() {
        assert_eq!(wer(REF, REF).unwrap(), 0.0);
        assert_eq!(wer("", "a b c").unwrap(), 1.0);
        assert_eq!(wer("x a b c", "a b c").unwrap(), 1.0 / 3.0);
        assert!(wer("a", "").is_err());
        assert_eq!(corpus_wer([("a", "a b"), ("c d", "c d")]).unwrap(), 1.0 / 4.0);
    }

    #[test]
    fn spearman_examples() {
        let xs = [1.0, 2.0, 3.0, 4.0, 5.0];
        let (r, p) = spearman_rho(&xs, &xs).unwrap();
        assert!((r - 1.0).abs() < 1e-12);
        // only the identity and the reversal reach |rho| = 1
        assert!((p - 2.0 / 120.0).abs() < 1e-12);
        let rev: Vec<f64> = xs.iter().rev().copied().collect();
        assert!((spearman_rho(&xs, &rev).unwrap().0 + 1.0).abs() < 1e-12);
        assert!(spearman_rho(&xs, &xs[..4]).is_err());
        assert!(spearman_rho(&[1.0, 2.0], &[1.0, 2.0]).is_err());
        assert_eq!(average_ranks(&[10.0, 20.0, 10.0, 5.0]), vec![2.5, 4.0, 2.5, 1.0]);
    }

    /// Ten (validation, test) WER pairs from the run table.
    const RUNS: [(f64, f64); 10] = [
        (20.63, 22.17),
        (20.79, 21.69),
        (21.26, 21.75),
        (21.32, 21.87),
        (21.45, 20.72),
        (21.45, 20.90),
        (21.63, 20.96),
        (21.69, 22.54),
        (21.82, 22.11),
        (22.27, 21.87),
    ];

    #[test]
    fn run_table_rank_correlation() {
        let xs: Vec<f64> = RUNS.iter().map(|r| r.0).collect();
        let ys: Vec<f64> = RUNS.iter().map(|r| r.1).collect();
        let (rho, p) = spearman_rho(&xs, &ys).unwrap();
        // values computed independently with average ranks (scipy.stats.spearmanr
        // gives the same rho; the exact permutation p differs slightly from its t approximation)
        assert!((rho - 0.12195121951219515).abs() < 1e-12, "{rho}");
        assert!((p - 0.7359468694885362).abs() < 1e-9, "{p}");
        assert!((t_approx_p(rho, 10) - 0.7371638352014935).abs() < 1e-9);
    }

    #[test]
    fn large_n_uses_t_approximation() {
        let xs: Vec<f64> = (0..30).map(f64::from).collect();
        let ys: Vec<f64> = (0..30).map(|i| f64::from((i * 7) % 30)).collect();
        let (rho, p) = spearman_rho(&xs, &ys).unwrap();
        assert!((p - t_approx_p(rho, 30)).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn edit_distance_is_a_metric(
            a in proptest::collection::vec(0u8..4, 0..7),
            b in proptest::collection::vec(0u8..4, 0..7),
            c in proptest::collection::vec(0u8..4, 0..7),
        ) {
            let ab = edit_distance(&a, &b);
            prop_assert_eq!(ab, edit_distance(&b, &a));
            prop_assert!(edit_distance(&a, &c) <= ab + edit_distance(&b, &c));
            prop_assert_eq!(ab == 0, a == b);
            if !b.is_empty() {
                let sa: Vec<String> = a.iter().map(|x| x.to_string()).collect();
                let sb: Vec<String> = b.iter().map(|x| x.to_string()).collect();
                let ra: Vec<&str> = sa.iter().map(String::as_str).collect();
                let rb: Vec<&str> = sb.iter().map(String::as_str).collect();
                prop_assert_eq!(word_edits(&ra, &rb).unwrap().errors(), ab);
            }
        }
    }
}
