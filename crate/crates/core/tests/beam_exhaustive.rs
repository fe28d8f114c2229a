mod common;

use c2f_caption::beam::beam_search;
use c2f_caption::decoder::rollout_greedy;
use common::{all_sequences, dims, features, model, Oracle};

#[test]
fn wide_beam_finds_the_exhaustive_optimum() {
    // Four words plus the reserved ids, T = 3. At most 7 * 7 = 49 prefixes are
    // still live before the last step, so width 64 never prunes them.
    let d = dims(8, 4, 3);
    for seed in 0..15 {
        let p = model(d, 900 + seed, 4.0);
        let v = features(&d, 900 + seed);
        let oracle = Oracle::new(&p, &v);
        let mut best: Option<(Vec<usize>, f64)> = None;
        for s in all_sequences(d.vocab_size, d.max_len) {
            let score = oracle.forced_final_score(&s);
            if best.as_ref().map_or(true, |(_, b)| score > *b) {
                best = Some((s, score));
            }
        }
        let (want, want_score) = best.unwrap();
        let got = beam_search(&p, &v, 64).unwrap();
        assert!((got.score - want_score).abs() < 1e-10, "seed {seed}: {} vs {want_score}", got.score);
        assert_eq!(got.tokens, want, "seed {seed}");
    }
}

#[test]
fn beam_of_one_is_greedy_on_twenty_models() {
    let d = dims(10, 4, 6);
    for seed in 0..20 {
        let p = model(d, 40 + seed, 8.0);
        let v = features(&d, seed);
        let greedy = rollout_greedy(&p, &v).unwrap();
        let beam = beam_search(&p, &v, 1).unwrap();
        let last = greedy.last().unwrap();
        assert_eq!(beam.tokens, last.tokens, "seed {seed}");
        assert!((beam.score - last.total_log_prob()).abs() < 1e-10);
    }
}

#[test]
fn wider_beams_never_score_below_greedy() {
    let d = dims(10, 4, 6);
    for seed in 0..10 {
        let p = model(d, 70 + seed, 5.0);
        let v = features(&d, seed);
        let g = rollout_greedy(&p, &v).unwrap().last().unwrap().total_log_prob();
        for k in [2, 3, 5, 8] {
            assert!(beam_search(&p, &v, k).unwrap().score >= g - 1e-12);
        }
    }
}
