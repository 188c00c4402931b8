//! Quality and diversity metrics over tokenized sentences.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::hash::Hash;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("hypothesis count {hyps} does not match reference count {refs}")]
    CountMismatch { hyps: usize, refs: usize },
    #[error("empty input")]
    Empty,
    #[error("self-BLEU needs at least two sentences")]
    TooFewSentences,
    #[error("max_n must be >= 1")]
    BadOrder,
}

/// Tokens of the repetition window.
pub const REPETITION_WINDOW: usize = 20;

fn ngram_counts<T: Hash + Eq>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if n > 0 && tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

fn total_ngrams(len: usize, n: usize) -> usize {
    (len + 1).saturating_sub(n)
}

/// Clipped matches of `hyp` n-grams against the element-wise maximum counts
/// over `refs`.
fn clipped_matches<T: Hash + Eq, R: AsRef<[T]>>(hyp: &[T], refs: &[R], n: usize) -> usize {
    let mut max_ref: HashMap<&[T], usize> = HashMap::new();
    for r in refs {
        for (g, c) in ngram_counts(r.as_ref(), n) {
            let e = max_ref.entry(g).or_insert(0);
            *e = (*e).max(c);
        }
    }
    ngram_counts(hyp, n).into_iter().map(|(g, c)| c.min(max_ref.get(g).copied().unwrap_or(0))).sum()
}

fn brevity_penalty(c: usize, r: usize) -> f64 {
    if c == 0 {
        0.0
    } else if c > r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    }
}

fn geometric_bleu(matches: &[usize], totals: &[usize], bp: f64) -> f64 {
    if matches.iter().zip(totals).any(|(&m, &t)| m == 0 || t == 0) {
        return 0.0;
    }
    let log_mean = matches
        .iter()
        .zip(totals)
        .map(|(&m, &t)| (m as f64 / t as f64).ln())
        .sum::<f64>()
        / matches.len() as f64;
    bp * log_mean.exp()
}

/// Corpus-level cumulative BLEU with one reference per hypothesis, no smoothing.
pub fn corpus_bleu<T, H, R>(hypotheses: &[H], references: &[R], max_n: usize) -> Result<f64, MetricError>
where
    T: Hash + Eq,
    H: AsRef<[T]>,
    R: AsRef<[T]>,
{
    if hypotheses.len() != references.len() {
        return Err(MetricError::CountMismatch { hyps: hypotheses.len(), refs: references.len() });
    }
    if hypotheses.is_empty() {
        return Err(MetricError::Empty);
    }
    if max_n == 0 {
        return Err(MetricError::BadOrder);
    }
    let mut matches = vec![0usize; max_n];
    let mut totals = vec![0usize; max_n];
    let (mut c, mut r) = (0, 0);
    for (h, rf) in hypotheses.iter().zip(references) {
        let (h, rf) = (h.as_ref(), rf.as_ref());
        c += h.len();
        r += rf.len();
        for n in 1..=max_n {
            matches[n - 1] += clipped_matches(h, std::slice::from_ref(&rf), n);
            totals[n - 1] += total_ngrams(h.len(), n);
        }
    }
    Ok(geometric_bleu(&matches, &totals, brevity_penalty(c, r)))
}

/// Sentence-level cumulative BLEU against several references. The effective
/// reference length is the one closest to the hypothesis (shorter on ties).
pub fn sentence_bleu<T: Hash + Eq, R: AsRef<[T]>>(hypothesis: &[T], references: &[R], max_n: usize) -> f64 {
    let c = hypothesis.len();
    let r = references
        .iter()
        .map(|x| x.as_ref().len())
        .min_by_key(|&l| (l.abs_diff(c), l))
        .unwrap_or(0);
    let matches: Vec<usize> = (1..=max_n).map(|n| clipped_matches(hypothesis, references, n)).collect();
    let totals: Vec<usize> = (1..=max_n).map(|n| total_ngrams(c, n)).collect();
    geometric_bleu(&matches, &totals, brevity_penalty(c, r))
}

/// Mean BLEU-`n` of each sentence against all the others.
pub fn self_bleu<T: Hash + Eq, S: AsRef<[T]>>(sentences: &[S], n: usize) -> Result<f64, MetricError> {
    if sentences.len() < 2 {
        return Err(MetricError::TooFewSentences);
    }
    let all: Vec<&[T]> = sentences.iter().map(|s| s.as_ref()).collect();
    let mut sum = 0.0;
    for i in 0..all.len() {
        let others: Vec<&[T]> = all.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, s)| *s).collect();
        sum += sentence_bleu(all[i], &others, n);
    }
    Ok(sum / all.len() as f64)
}

/// NIST brevity factor: 1 at or above the reference length, 0.5 at 2/3 of it.
pub fn nist_brevity(sys_len: usize, ref_len: f64) -> f64 {
    if sys_len == 0 || ref_len <= 0.0 {
        return 0.0;
    }
    let beta = 0.5f64.ln() / 1.5f64.ln().powi(2);
    let ratio = (sys_len as f64 / ref_len).min(1.0);
    (beta * ratio.ln().powi(2)).exp()
}

/// Corpus NIST with information weights estimated from the references.
pub fn corpus_nist<T, H, R>(hypotheses: &[H], references: &[R], max_n: usize) -> Result<f64, MetricError>
where
    T: Hash + Eq,
    H: AsRef<[T]>,
    R: AsRef<[T]>,
{
    if hypotheses.len() != references.len() {
        return Err(MetricError::CountMismatch { hyps: hypotheses.len(), refs: references.len() });
    }
    if hypotheses.is_empty() {
        return Err(MetricError::Empty);
    }
    if max_n == 0 {
        return Err(MetricError::BadOrder);
    }
    // n-gram counts over the whole reference side, n = 1..max_n.
    let mut ref_counts: Vec<HashMap<&[T], usize>> = vec![HashMap::new(); max_n + 1];
    let mut ref_words = 0usize;
    for r in references {
        let r = r.as_ref();
        ref_words += r.len();
        for n in 1..=max_n {
            for (g, c) in ngram_counts(r, n) {
                *ref_counts[n].entry(g).or_insert(0) += c;
            }
        }
    }
    let info = |g: &[T]| -> f64 {
        let n = g.len();
        let count = ref_counts[n].get(g).copied().unwrap_or(0);
        if count == 0 {
            return 0.0;
        }
        let prefix = if n == 1 { ref_words } else { ref_counts[n - 1].get(&g[..n - 1]).copied().unwrap_or(0) };
        (prefix as f64 / count as f64).log2()
    };
    let mut score = 0.0;
    let mut sys_len = 0usize;
    for n in 1..=max_n {
        let (mut num, mut den) = (0.0, 0usize);
        for (h, r) in hypotheses.iter().zip(references) {
            let (h, r) = (h.as_ref(), r.as_ref());
            let rc = ngram_counts(r, n);
            for (g, c) in ngram_counts(h, n) {
                let m = c.min(rc.get(g).copied().unwrap_or(0));
                if m > 0 {
                    num += m as f64 * info(g);
                }
            }
            den += total_ngrams(h.len(), n);
        }
        if den > 0 {
            score += num / den as f64;
        }
    }
    for h in hypotheses {
        sys_len += h.as_ref().len();
    }
    Ok(score * nist_brevity(sys_len, ref_words as f64))
}

/// Unique n-grams across all sentences over the total token count.
pub fn distinct_n<T: Hash + Eq, S: AsRef<[T]>>(sentences: &[S], n: usize) -> f64 {
    let mut unique: HashSet<&[T]> = HashSet::new();
    let mut tokens = 0usize;
    for s in sentences {
        let s = s.as_ref();
        tokens += s.len();
        if n > 0 && s.len() >= n {
            unique.extend(s.windows(n));
        }
    }
    if tokens == 0 {
        0.0
    } else {
        unique.len() as f64 / tokens as f64
    }
}

/// Within the first 20 content tokens, some unigram occurs three or more
/// times or some trigram twice or more.
pub fn repetition_flag<T: Hash + Eq>(content: &[T]) -> bool {
    let w = &content[..content.len().min(REPETITION_WINDOW)];
    ngram_counts(w, 1).values().any(|&c| c >= 3) || ngram_counts(w, 3).values().any(|&c| c >= 2)
}

fn is_subsequence<T: PartialEq>(needle: &[T], hay: &[T]) -> bool {
    let mut it = hay.iter();
    needle.iter().all(|n| it.any(|h| h == n))
}

pub fn keyword_covered<T: PartialEq>(output: &[T], keywords: &[T]) -> bool {
    is_subsequence(keywords, output)
}

/// Share of cases whose output holds the keywords as an ordered subsequence.
pub fn keyword_coverage<T: PartialEq, O: AsRef<[T]>, K: AsRef<[T]>>(outputs: &[O], keyword_sets: &[K]) -> Result<f64, MetricError> {
    if outputs.len() != keyword_sets.len() {
        return Err(MetricError::CountMismatch { hyps: outputs.len(), refs: keyword_sets.len() });
    }
    if outputs.is_empty() {
        return Err(MetricError::Empty);
    }
    let hit = outputs.iter().zip(keyword_sets).filter(|(o, k)| keyword_covered(o.as_ref(), k.as_ref())).count();
    Ok(hit as f64 / outputs.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub cases: usize,
    pub bleu2: f64,
    pub bleu4: f64,
    pub nist2: f64,
    pub nist4: f64,
    /// Absent for fewer than two sentences.
    pub self_bleu4: Option<f64>,
    pub distinct2: f64,
    pub distinct4: f64,
    pub repetition_rate: f64,
    pub keyword_coverage: f64,
    pub mean_length: f64,
}

/// All metrics over aligned outputs, references and keyword sets.
pub fn compute_report<T, O, R, K>(outputs: &[O], references: &[R], keywords: &[K]) -> Result<MetricReport, MetricError>
where
    T: Hash + Eq,
    O: AsRef<[T]>,
    R: AsRef<[T]>,
    K: AsRef<[T]>,
{
    let n = outputs.len();
    Ok(MetricReport {
        cases: n,
        bleu2: corpus_bleu(outputs, references, 2)?,
        bleu4: corpus_bleu(outputs, references, 4)?,
        nist2: corpus_nist(outputs, references, 2)?,
        nist4: corpus_nist(outputs, references, 4)?,
        self_bleu4: self_bleu(outputs, 4).ok(),
        distinct2: distinct_n(outputs, 2),
        distinct4: distinct_n(outputs, 4),
        repetition_rate: outputs.iter().filter(|o| repetition_flag(o.as_ref())).count() as f64 / n as f64,
        keyword_coverage: keyword_coverage(outputs, keywords)?,
        mean_length: outputs.iter().map(|o| o.as_ref().len()).sum::<usize>() as f64 / n as f64,
    })
}

/// Overall report plus one report per keyword count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub overall: MetricReport,
    pub by_keywords: BTreeMap<usize, MetricReport>,
}

pub fn evaluate<T, O, R, K>(outputs: &[O], references: &[R], keywords: &[K]) -> Result<EvaluationReport, MetricError>
where
    T: Hash + Eq,
    O: AsRef<[T]>,
    R: AsRef<[T]>,
    K: AsRef<[T]>,
{
    let overall = compute_report(outputs, references, keywords)?;
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, k) in keywords.iter().enumerate() {
        groups.entry(k.as_ref().len()).or_default().push(i);
    }
    let mut by_keywords = BTreeMap::new();
    for (count, idx) in groups {
        let o: Vec<&[T]> = idx.iter().map(|&i| outputs[i].as_ref()).collect();
        let r: Vec<&[T]> = idx.iter().map(|&i| references[i].as_ref()).collect();
        let k: Vec<&[T]> = idx.iter().map(|&i| keywords[i].as_ref()).collect();
        by_keywords.insert(count, compute_report(&o, &r, &k)?);
    }
    Ok(EvaluationReport { overall, by_keywords })
}

const COLUMNS: [&str; 11] = [
    "bleu2", "bleu4", "nist2", "nist4", "self_bleu4", "distinct2", "distinct4", "repetition_rate", "keyword_coverage", "mean_length", "cases",
];

fn values(r: &MetricReport) -> [String; 11] {
    let f = |v: f64| format!("{v:.6}");
    [
        f(r.bleu2),
        f(r.bleu4),
        f(r.nist2),
        f(r.nist4),
        r.self_bleu4.map(f).unwrap_or_else(|| "NA".into()),
        f(r.distinct2),
        f(r.distinct4),
        f(r.repetition_rate),
        f(r.keyword_coverage),
        f(r.mean_length),
        r.cases.to_string(),
    ]
}

impl EvaluationReport {
    /// Two TSV sections separated by a blank line: `metric/value` rows, then
    /// one row per keyword count.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("metric\tvalue\n");
        for (name, v) in COLUMNS.iter().zip(values(&self.overall)) {
            let _ = writeln!(out, "{name}\t{v}");
        }
        out.push('\n');
        let _ = writeln!(out, "n_keywords\t{}", COLUMNS.join("\t"));
        for (n, r) in &self.by_keywords {
            let _ = writeln!(out, "{n}\t{}", values(r).join("\t"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn bleu_examples() {
        let h = [toks("a b c d")];
        let r = [toks("a b c e")];
        let b = corpus_bleu(&h, &r, 2).unwrap();
        assert!((b - (0.75f64 * 2.0 / 3.0).sqrt()).abs() < 1e-12);
        assert!((b - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert_eq!(corpus_bleu(&r, &r, 4).unwrap(), 1.0);
        assert_eq!(corpus_bleu(&[toks("x y")], &[toks("a b")], 2).unwrap(), 0.0);
        assert_eq!(corpus_bleu(&h, &[] as &[Vec<&str>], 2).unwrap_err(), MetricError::CountMismatch { hyps: 1, refs: 0 });
    }

    #[test]
    fn nist_identical_uniform() {
        let s = [toks("a b c d e")];
        let v = corpus_nist(&s, &s, 4).unwrap();
        assert!((v - 5f64.log2()).abs() < 1e-12);
        assert_eq!(corpus_nist(&[toks("x y")], &[toks("a b")], 2).unwrap(), 0.0);
        assert_eq!(corpus_nist::<&str, Vec<&str>, Vec<&str>>(&[], &[], 2).unwrap_err(), MetricError::Empty);
        assert!((nist_brevity(2, 3.0) - 0.5).abs() < 1e-12);
        assert_eq!(nist_brevity(4, 3.0), 1.0);
    }

    #[test]
    fn self_bleu_extremes() {
        let same = [toks("a b c d e"), toks("a b c d e"), toks("a b c d e")];
        assert!((self_bleu(&same, 4).unwrap() - 1.0).abs() < 1e-12);
        let disjoint = [toks("a b c d"), toks("e f g h")];
        assert_eq!(self_bleu(&disjoint, 4).unwrap(), 0.0);
        assert_eq!(self_bleu(&[toks("a")], 4).unwrap_err(), MetricError::TooFewSentences);
    }

    #[test]
    fn distinct_examples() {
        assert!((distinct_n(&[toks("a a a")], 2) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(distinct_n(&[toks("a b"), toks("c d")], 1), 1.0);
        assert_eq!(distinct_n(&[toks("a b"), toks("c")], 3), 0.0);
    }

    #[test]
    fn repetition_examples() {
        assert!(repetition_flag(&toks("a a a")));
        let distinct: Vec<String> = (0..20).map(|i| format!("t{i}")).collect();
        assert!(!repetition_flag(&distinct));
        assert!(repetition_flag(&toks("x y z x y z w")));
        let mut late = distinct.clone();
        late.extend(["t0".to_string(), "t0".to_string()]);
        assert!(!repetition_flag(&late));
    }

    #[test]
    fn coverage_examples() {
        let kw = [toks("cat mat")];
        assert_eq!(keyword_coverage(&[toks("cat mat")], &kw).unwrap(), 1.0);
        assert_eq!(keyword_coverage(&[toks("mat cat")], &kw).unwrap(), 0.0);
        assert_eq!(keyword_coverage(&[toks("the cat sat on the mat")], &kw).unwrap(), 1.0);
    }

    #[test]
    fn tsv_layout() {
        let o = [toks("the cat sat"), toks("a dog ran far")];
        let r = [toks("the cat sat"), toks("a dog ran")];
        let k = [toks("cat"), toks("dog ran")];
        let rep = evaluate(&o, &r, &k).unwrap();
        let tsv = rep.to_tsv();
        let lines: Vec<&str> = tsv.lines().collect();
        assert_eq!(lines[0], "metric\tvalue");
        assert!(lines[1].starts_with("bleu2\t"));
        assert_eq!(lines[12], "");
        assert!(lines[13].starts_with("n_keywords\tbleu2"));
        assert!(lines[14].starts_with("1\t"));
        assert!(lines[14].contains("\tNA\t"));
        assert_eq!(rep.by_keywords.len(), 2);
    }
}
