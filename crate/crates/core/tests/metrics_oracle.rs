mod common;

use c2f_caption::metrics::{bleu_n, score_all, Metric, ReferenceCorpus};
use c2f_caption::vocab::{EOS, PAD};
use common::metric_oracle::{brute_bleu, brute_cider, candidates, count, fixture, grams};

#[test]
fn fixture_has_fifty_sentences() {
    let n: usize = fixture().iter().map(|(_, r)| r.len()).sum();
    assert_eq!(n, 50);
}

#[test]
fn bleu_one_to_four_match_brute_force() {
    let data = fixture();
    for c in candidates(&data) {
        for (_, refs) in &data {
            for n in 1..=4 {
                let got = bleu_n(&c, refs, n).unwrap();
                let want = brute_bleu(&c, refs, n);
                assert!((got - want).abs() < 1e-9, "BLEU-{n} {c:?}: {got} vs {want}");
            }
        }
    }
}

#[test]
fn cider_matches_brute_force() {
    let data = fixture();
    let corpus = ReferenceCorpus::new(data.clone()).unwrap();
    let mut positive = 0;
    for c in candidates(&data) {
        for (id, refs) in &data {
            let want = brute_cider(&c, refs, &data);
            let got = corpus.cider_for(*id, &c).unwrap();
            assert!((got - want).abs() < 1e-9, "image {id} {c:?}: {got} vs {want}");
            assert!((corpus.cider(&c, refs).unwrap() - want).abs() < 1e-9);
            if want > 0.0 {
                positive += 1;
            }
        }
    }
    assert!(positive > 100, "fixture exercises non-trivial scores");
}

#[test]
fn document_frequencies_match_brute_force() {
    let data = fixture();
    let corpus = ReferenceCorpus::new(data.clone()).unwrap();
    for (_, refs) in &data {
        for r in refs {
            for n in 1..=4 {
                for g in grams(r, n) {
                    let df = data.iter().filter(|(_, rs)| rs.iter().any(|x| count(x, g) > 0)).count();
                    assert_eq!(corpus.document_frequency(g), df);
                    assert!(df <= corpus.num_images());
                }
            }
        }
    }
}

#[test]
fn corpus_averages_match_per_sentence_scores() {
    let data = fixture();
    let corpus = ReferenceCorpus::new(data.clone()).unwrap();
    let cands: Vec<(u64, Vec<usize>)> = data.iter().map(|(id, r)| (*id, r[0].clone())).collect();
    let s = score_all(&corpus, &cands).unwrap();
    let k = cands.len() as f64;
    let b4: f64 = data.iter().map(|(_, r)| brute_bleu(&r[0], r, 4)).sum::<f64>() / k;
    let ci: f64 = data.iter().map(|(_, r)| brute_cider(&r[0], r, &data)).sum::<f64>() / k;
    assert!((s.bleu4 - b4).abs() < 1e-9);
    assert!((s.cider - ci).abs() < 1e-9);
}

#[test]
fn identical_caption_has_unit_bleu4() {
    for (_, refs) in fixture() {
        for r in refs.iter().filter(|r| r.len() >= 4) {
            assert!((bleu_n(r, &refs, 4).unwrap() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn single_image_corpus_gives_zero_cider() {
    let data = fixture();
    let (id, refs) = data[0].clone();
    let corpus = ReferenceCorpus::new(vec![(id, refs.clone())]).unwrap();
    for c in candidates(&data) {
        assert_eq!(corpus.cider_for(id, &c).unwrap(), 0.0);
    }
}

#[test]
fn hand_computed_bleu_example() {
    let got = bleu_n(&[4, 5, 6], &[vec![4, 5, 6, 7]], 2).unwrap();
    assert!((got - (-1.0f64 / 3.0).exp()).abs() < 1e-12);
    assert!((brute_bleu(&[4, 5, 6], &[vec![4, 5, 6, 7]], 2) - got).abs() < 1e-15);
}

#[test]
fn two_disjoint_images_give_unit_reward() {
    let corpus = ReferenceCorpus::new(vec![(1, vec![vec![4, 5, 6, 7]]), (2, vec![vec![8, 9, 10]])]).unwrap();
    assert!((corpus.reward_for(1, &[4, 5, 6, 7], Metric::Cider).unwrap() - 1.0).abs() < 1e-12);
    assert!((corpus.reward_for(1, &[4, 5, 6, 7], Metric::Bleu4).unwrap() - 1.0).abs() < 1e-12);
    let mix = corpus.reward_for(1, &[4, 5, 6], Metric::Mix { cider: 0.5, bleu4: 0.5 }).unwrap();
    let c = corpus.reward_for(1, &[4, 5, 6], Metric::Cider).unwrap();
    let b = corpus.reward_for(1, &[4, 5, 6], Metric::Bleu4).unwrap();
    assert!((mix - 0.5 * (c + b)).abs() < 1e-12);
}

#[test]
fn trailing_reserved_tokens_do_not_change_scores() {
    let data = fixture();
    let corpus = ReferenceCorpus::new(data.clone()).unwrap();
    for (id, refs) in &data {
        let c = refs[0].clone();
        let mut padded = c.clone();
        padded.extend([EOS, PAD, PAD]);
        assert_eq!(corpus.cider_for(*id, &c).unwrap(), corpus.cider_for(*id, &padded).unwrap());
        assert_eq!(bleu_n(&c, refs, 4).unwrap(), bleu_n(&padded, refs, 4).unwrap());
    }
}
