//! Brute-force n-gram metrics. Every count is a linear scan over explicit
//! n-gram lists, with no hashing.

#![allow(dead_code)]

pub fn ngrams(s: &[u32], n: usize) -> Vec<Vec<u32>> {
    if n == 0 || s.len() < n {
        return Vec::new();
    }
    (0..=s.len() - n).map(|i| s[i..i + n].to_vec()).collect()
}

pub fn count(list: &[Vec<u32>], g: &[u32]) -> usize {
    list.iter().filter(|x| x.as_slice() == g).count()
}

fn distinct(list: &[Vec<u32>]) -> Vec<Vec<u32>> {
    let mut out: Vec<Vec<u32>> = Vec::new();
    for g in list {
        if !out.contains(g) {
            out.push(g.clone());
        }
    }
    out
}

fn clipped(hyp: &[u32], refs: &[&[u32]], n: usize) -> usize {
    let h = ngrams(hyp, n);
    let mut total = 0;
    for g in distinct(&h) {
        let best = refs.iter().map(|r| count(&ngrams(r, n), &g)).max().unwrap_or(0);
        total += count(&h, &g).min(best);
    }
    total
}

fn bleu_from(p_num: &[usize], p_den: &[usize], c: usize, r: usize) -> f64 {
    for i in 0..p_num.len() {
        if p_num[i] == 0 || p_den[i] == 0 {
            return 0.0;
        }
    }
    let mut log = 0.0;
    for i in 0..p_num.len() {
        log += (p_num[i] as f64 / p_den[i] as f64).ln();
    }
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    bp * (log / p_num.len() as f64).exp()
}

pub fn corpus_bleu(hyps: &[Vec<u32>], refs: &[Vec<u32>], max_n: usize) -> f64 {
    let mut num = vec![0; max_n];
    let mut den = vec![0; max_n];
    let (mut c, mut r) = (0, 0);
    for (h, rf) in hyps.iter().zip(refs) {
        c += h.len();
        r += rf.len();
        for n in 1..=max_n {
            num[n - 1] += clipped(h, &[rf.as_slice()], n);
            den[n - 1] += ngrams(h, n).len();
        }
    }
    if c == 0 {
        return 0.0;
    }
    bleu_from(&num, &den, c, r)
}

pub fn sentence_bleu(hyp: &[u32], refs: &[&[u32]], max_n: usize) -> f64 {
    let c = hyp.len();
    if c == 0 {
        return 0.0;
    }
    let mut r = usize::MAX;
    for rf in refs {
        let l = rf.len();
        if r == usize::MAX || l.abs_diff(c) < r.abs_diff(c) || (l.abs_diff(c) == r.abs_diff(c) && l < r) {
            r = l;
        }
    }
    let num: Vec<usize> = (1..=max_n).map(|n| clipped(hyp, refs, n)).collect();
    let den: Vec<usize> = (1..=max_n).map(|n| ngrams(hyp, n).len()).collect();
    bleu_from(&num, &den, c, r)
}

pub fn self_bleu(sents: &[Vec<u32>], n: usize) -> f64 {
    let mut sum = 0.0;
    for i in 0..sents.len() {
        let others: Vec<&[u32]> = (0..sents.len()).filter(|&j| j != i).map(|j| sents[j].as_slice()).collect();
        sum += sentence_bleu(&sents[i], &others, n);
    }
    sum / sents.len() as f64
}

pub fn distinct_n(sents: &[Vec<u32>], n: usize) -> f64 {
    let mut all = Vec::new();
    let mut tokens = 0;
    for s in sents {
        tokens += s.len();
        all.extend(ngrams(s, n));
    }
    if tokens == 0 {
        return 0.0;
    }
    distinct(&all).len() as f64 / tokens as f64
}

pub fn repetition_flag(content: &[u32]) -> bool {
    let w = &content[..content.len().min(20)];
    let uni = ngrams(w, 1);
    let tri = ngrams(w, 3);
    uni.iter().any(|g| count(&uni, g) >= 3) || tri.iter().any(|g| count(&tri, g) >= 2)
}

pub fn corpus_nist(hyps: &[Vec<u32>], refs: &[Vec<u32>], max_n: usize) -> f64 {
    let mut ref_all: Vec<Vec<Vec<u32>>> = vec![Vec::new(); max_n + 1];
    let mut ref_words = 0;
    for r in refs {
        ref_words += r.len();
        for n in 1..=max_n {
            ref_all[n].extend(ngrams(r, n));
        }
    }
    let info = |g: &[u32]| {
        let n = g.len();
        let c = count(&ref_all[n], g);
        if c == 0 {
            return 0.0;
        }
        let prefix = if n == 1 { ref_words } else { count(&ref_all[n - 1], &g[..n - 1]) };
        (prefix as f64 / c as f64).log2()
    };
    let mut score = 0.0;
    for n in 1..=max_n {
        let mut num = 0.0;
        let mut den = 0;
        for (h, r) in hyps.iter().zip(refs) {
            let hg = ngrams(h, n);
            let rg = ngrams(r, n);
            den += hg.len();
            for g in distinct(&hg) {
                let m = count(&hg, &g).min(count(&rg, &g));
                num += m as f64 * info(&g);
            }
        }
        if den > 0 {
            score += num / den as f64;
        }
    }
    let sys: usize = hyps.iter().map(|h| h.len()).sum();
    if sys == 0 || ref_words == 0 {
        return 0.0;
    }
    let ratio = (sys as f64 / ref_words as f64).min(1.0);
    let beta = 0.5f64.ln() / (1.5f64.ln() * 1.5f64.ln());
    score * (beta * ratio.ln() * ratio.ln()).exp()
}

pub type Case = (Vec<Vec<u32>>, Vec<Vec<u32>>);

/// Small hand-sized cases: (hypotheses, references).
pub fn cases() -> Vec<Case> {
    let s = |t: &str| -> Vec<u32> { t.split_whitespace().map(|w| w.parse().unwrap()).collect() };
    let c = |h: &[&str], r: &[&str]| (h.iter().map(|x| s(x)).collect(), r.iter().map(|x| s(x)).collect());
    vec![
        c(&["1 2 3 4 5"], &["1 2 3 4 5"]),
        c(&["1 2 3 4"], &["1 2 3 4 5 6"]),
        c(&["1 1 1 1 1 1"], &["1 2 1 3 1 4"]),
        c(&["1 2 3 4 5 6 7"], &["1 2 3 4 5"]),
        c(&["7 8 9 10"], &["1 2 3 4"]),
        c(&["1 2 3 1 2 3 1 2", "4 5 6 7"], &["1 2 3 4 1 2 3", "4 5 6 8 7"]),
        c(&["5 6 7 8 9", "1 2", "3 4 3 4 3"], &["5 6 7 8 9 10", "1 2 3", "3 4 3 4"]),
        c(&["2 2 3 3 4 4 5 5"], &["2 3 4 5 2 3 4 5"]),
        c(&["1 2 3 4 5 6 7 8 9 10 11 12"], &["1 2 3 4 9 10 11 12 5 6 7 8"]),
        c(&["1 2 3 4", "1 2 3 4", "1 2 3 4"], &["1 2 3 4", "4 3 2 1", "1 2 4 3"]),
        c(&["10 20 30 40 50 60", "10 20 30"], &["10 20 30 40 50 60 70", "10 20 40 30"]),
        c(&["1 2 1 2 1 2 1 2 1 2 1 2 1 2 1 2 1 2 1 2 3 3 3"], &["1 2 3 1 2 3"]),
    ]
}
