//! BLEU and CIDEr by brute force, sharing no code with the library: n-grams
//! are compared slice by slice, with no maps.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

#[derive(Deserialize)]
struct Record {
    image_id: u64,
    refs: Vec<Vec<usize>>,
}

pub fn fixture() -> Vec<(u64, Vec<Vec<usize>>)> {
    include_str!("../fixtures/metrics_corpus.jsonl")
        .lines()
        .map(|l| {
            let r: Record = serde_json::from_str(l).unwrap();
            (r.image_id, r.refs)
        })
        .collect()
}

pub fn grams(s: &[usize], n: usize) -> Vec<&[usize]> {
    if s.len() < n {
        return vec![];
    }
    (0..=s.len() - n).map(|i| &s[i..i + n]).collect()
}

pub fn count(s: &[usize], g: &[usize]) -> usize {
    grams(s, g.len()).into_iter().filter(|x| *x == g).count()
}

pub fn distinct(s: &[usize], n: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = Vec::new();
    for g in grams(s, n) {
        if !out.contains(&g) {
            out.push(g);
        }
    }
    out
}

pub fn brute_bleu(c: &[usize], refs: &[Vec<usize>], n_max: usize) -> f64 {
    if c.is_empty() {
        return 0.0;
    }
    let mut prod = 1.0;
    for n in 1..=n_max {
        let total = grams(c, n).len();
        let mut matched = 0;
        for g in distinct(c, n) {
            let best = refs.iter().map(|r| count(r, g)).max().unwrap();
            matched += count(c, g).min(best);
        }
        if total == 0 || matched == 0 {
            return 0.0;
        }
        prod *= matched as f64 / total as f64;
    }
    let mut r = refs[0].len();
    for x in refs {
        let (d, e) = (x.len().abs_diff(c.len()), r.abs_diff(c.len()));
        if d < e || (d == e && x.len() < r) {
            r = x.len();
        }
    }
    let bp = if c.len() >= r { 1.0 } else { (1.0 - r as f64 / c.len() as f64).exp() };
    bp * prod.powf(1.0 / n_max as f64)
}

pub fn brute_cider(c: &[usize], refs: &[Vec<usize>], corpus: &[(u64, Vec<Vec<usize>>)]) -> f64 {
    if c.is_empty() {
        return 0.0;
    }
    let n_img = corpus.len() as f64;
    let idf = |g: &[usize]| {
        let df = corpus
            .iter()
            .filter(|(_, rs)| rs.iter().any(|r| count(r, g) > 0))
            .count()
            .max(1);
        (n_img / df as f64).ln()
    };
    let mut total = 0.0;
    for n in 1..=4 {
        let mut per_ref = 0.0;
        for r in refs {
            let mut vocab = distinct(c, n);
            for g in distinct(r, n) {
                if !vocab.contains(&g) {
                    vocab.push(g);
                }
            }
            let (mut dot, mut nc, mut nr) = (0.0, 0.0, 0.0);
            for g in vocab {
                let w = idf(g);
                let a = count(c, g) as f64 * w;
                let b = count(r, g) as f64 * w;
                dot += a * b;
                nc += a * a;
                nr += b * b;
            }
            if nc > 0.0 && nr > 0.0 {
                per_ref += dot / (nc.sqrt() * nr.sqrt());
            }
        }
        total += per_ref / refs.len() as f64;
    }
    total / 4.0
}

/// Every fixture sentence, a mutated copy of it, and a random sentence, each
/// scored against every image's references.
pub fn candidates(data: &[(u64, Vec<Vec<usize>>)]) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let mut out = Vec::new();
    for (_, refs) in data {
        for r in refs {
            out.push(r.clone());
            let mut m = r.clone();
            let i = rng.gen_range(0..m.len());
            m[i] = rng.gen_range(4..14);
            m.push(rng.gen_range(4..14));
            out.push(m);
            out.push((0..rng.gen_range(1..9)).map(|_| rng.gen_range(4..14)).collect());
        }
    }
    out
}
