use msnmt_demo_wasm::{attention_window, bleu_score, combine_states};

#[test]
fn window_weights_are_bounded_by_align() {
    let v = attention_window(20, 3, 0.4, 1.0, 7);
    let p_t = v["p_t"].as_f64().unwrap();
    assert!((p_t - 20.0 / (1.0 + (-0.4f64).exp())).abs() < 1e-12);
    let (start, end) = (v["window_start"].as_u64().unwrap(), v["window_end"].as_u64().unwrap());
    assert_eq!(end - start, 7);
    let mut align_sum = 0.0;
    for p in v["positions"].as_array().unwrap() {
        let (a, w) = (p["align"].as_f64().unwrap(), p["weight"].as_f64().unwrap());
        assert!(w <= a);
        align_sum += a;
        if !p["in_window"].as_bool().unwrap() {
            assert_eq!(a, 0.0);
        }
    }
    assert!((align_sum - 1.0).abs() < 1e-12);
}

#[test]
fn window_rejects_bad_input() {
    assert!(attention_window(0, 3, 0.0, 1.0, 1)["error"].is_string());
    assert!(attention_window(5, 0, 0.0, 1.0, 1)["error"].is_string());
}

#[test]
fn combiner_symmetries_hold() {
    let v = combine_states(&[0.2, -0.4], &[1.0, 0.5], &[0.7, 0.1], &[-0.3, 2.0], 1.0, 3);
    assert_eq!(v["basic_cell_commutes"], true);
    assert_eq!(v["childsum_swap_exact"], true);
    let c: Vec<f64> = v["basic"]["c"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
    assert_eq!(c, vec![0.7, 2.5]);
    assert!(combine_states(&[0.1], &[0.1, 0.2], &[0.1], &[0.1], 1.0, 1)["error"].is_string());
}

#[test]
fn bleu_matches_hand_example() {
    let v = bleu_score("the cat sat on the mat", "the cat sat on a red mat", false);
    assert!((v["bleu"].as_f64().unwrap() - 45.48).abs() < 0.01);
    assert_eq!(
        v["line"],
        "BLEU = 45.48, 83.3/60.0/50.0/33.3 (BP=0.846, ratio=0.857, hyp_len=6, ref_len=7)"
    );
    assert_eq!(bleu_score("a b c d", "a b c d", false)["bleu"], 100.0);
    assert!(bleu_score("a\nb", "a", false)["error"].is_string());
}
