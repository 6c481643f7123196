use kgdialog_core::beam::{beam_decode, greedy_decode, BeamConfig};
use oracle::{exhaustive_search as brute_force, ToyLm};

mod oracle;

#[test]
fn hand_built_lm_beam_two_is_optimal_where_greedy_is_not() {
    let lm = ToyLm::hand_built();
    let (opt, opt_lp) = brute_force(&lm, 3);
    assert_eq!(opt, vec![2]);
    let greedy = greedy_decode(&lm, 3).unwrap();
    assert_ne!(greedy.tokens, opt);
    let beam = beam_decode(&lm, BeamConfig { beam_size: 2, max_len: 3, length_normalize: false }).unwrap();
    assert_eq!(beam.tokens, opt);
    assert!((beam.log_prob - opt_lp).abs() < 1e-12);
}

#[test]
fn wide_beam_equals_exhaustive_search_and_never_loses_to_greedy() {
    for seed in 0..200 {
        let lm = ToyLm::random(seed);
        let (opt, opt_lp) = brute_force(&lm, 3);
        let wide = beam_decode(&lm, BeamConfig { beam_size: 16, max_len: 3, length_normalize: false }).unwrap();
        assert!((wide.log_prob - opt_lp).abs() < 1e-12, "seed {seed}: {:?} vs {opt:?}", wide.tokens);
        let greedy = greedy_decode(&lm, 3).unwrap();
        for b in 1..5 {
            let h = beam_decode(&lm, BeamConfig { beam_size: b, max_len: 3, length_normalize: false }).unwrap();
            assert!(h.log_prob >= greedy.log_prob, "seed {seed} beam {b}");
            assert!(h.log_prob <= opt_lp + 1e-12);
            if b == 1 {
                assert_eq!(h.tokens, greedy.tokens);
            }
        }
        let again = beam_decode(&lm, BeamConfig { beam_size: 3, max_len: 3, length_normalize: false }).unwrap();
        assert_eq!(again, beam_decode(&lm, BeamConfig { beam_size: 3, max_len: 3, length_normalize: false }).unwrap());
    }
}
