mod support;

use std::collections::BTreeMap;

use audiocap::metrics::{
    bleu_n, cider, corpus_bleu, div_n, evaluate_fidelity, evaluate_human, evaluate_sets, mbleu_n, ngram_count_ratios,
    vocab_by_threshold, vocab_size, IdfTable,
};
use proptest::prelude::*;
use support::oracle;

const TOL: f64 = 1e-9;

fn sentence() -> impl Strategy<Value = String> {
    prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "d", "dog", "barks"]), 1..=6).prop_map(|w| w.join(" "))
}

fn sentences(lo: usize, hi: usize) -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(sentence(), lo..=hi)
}

fn strs(v: &[String]) -> Vec<&str> {
    v.iter().map(String::as_str).collect()
}

#[test]
fn bleu_seed_case_matches_arithmetic() {
    // clipped precisions 4/5, 3/4, 2/3, 1/2 and no brevity penalty
    let expected = 100.0 * (0.8f64 * 0.75 * (2.0 / 3.0) * 0.5).powf(0.25);
    let got = bleu_n("a b c d e", &["a b c d f"], 4).unwrap();
    assert!((got - expected).abs() < TOL);
    assert!((got - oracle::bleu("a b c d e", &["a b c d f"], 4, true)).abs() < TOL);
    assert!((got - 66.874_030_497_6).abs() < 1e-6);
}

#[test]
fn cider_micro_corpus_matches_hand_idf() {
    let sets = vec![
        vec!["a dog barks", "the dog barks"],
        vec!["a dog runs", "rain falls"],
        vec!["heavy rain falls", "rain falls"],
    ];
    let idf = IdfTable::from_reference_sets(&sets);
    let refs = ["a dog barks", "the dog barks"];
    let got = cider("a dog barks loudly", &refs, &idf);
    // document frequencies written out by hand; unseen n-grams count as 1
    let df = |g: &str| -> f64 {
        match g {
            "a" | "dog" | "a dog" | "rain" | "falls" | "rain falls" => 2.0,
            _ => 1.0,
        }
    };
    let hand = |g: &[String]| 3f64.ln() - df(&g.join(" ")).ln();
    let expected = oracle::cider_with("a dog barks loudly", &refs, &hand);
    assert!((got - expected).abs() < TOL, "{got} vs {expected}");
    assert!((got - oracle::cider("a dog barks loudly", &refs, &sets)).abs() < TOL);
    assert!(got > 0.0 && got < 10.0);
}

#[test]
fn count_ratio_half_case() {
    // "dog" twice in 2 training captions, once in 2 generated → 1 / (2·2/2)
    let r = ngram_count_ratios(&["a dog", "dog"], &["a dog", "a cat"], 2, 2).unwrap();
    let dog = r.iter().find(|c| c.ngram == "dog").unwrap();
    assert!((dog.ratio - 0.5).abs() < TOL);
    assert!((dog.ratio - oracle::count_ratio(&["a dog", "dog"], &["a dog", "a cat"], "dog", 2, 2)).abs() < TOL);
}

#[test]
fn human_score_is_leave_one_out_average() {
    let refs: BTreeMap<String, Vec<String>> = [
        ("x", ["a dog barks", "a dog is barking", "dog barks loudly", "a dog barks far away", "the dog barks"]),
        ("y", ["rain falls", "heavy rain falls", "rain is falling", "rain falls on a roof", "the rain falls"]),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v.iter().map(|s| s.to_string()).collect()))
    .collect();
    let h = evaluate_human(&refs).unwrap();
    let mut bleu = 0.0;
    for i in 0..5 {
        let pairs: Vec<(&str, Vec<&str>)> = refs
            .values()
            .map(|v| {
                let rest = (0..5).filter(|&j| j != i).map(|j| v[j].as_str()).collect();
                (v[i].as_str(), rest)
            })
            .collect();
        bleu += oracle::corpus_bleu(&pairs, 4) / 5.0;
    }
    assert!((h.bleu_4 - bleu).abs() < TOL);
}

#[test]
fn set_report_averages_fidelity_over_slots() {
    let refs: BTreeMap<String, Vec<String>> =
        BTreeMap::from([("x".to_string(), vec!["a dog barks".to_string(), "the dog barks".to_string()])]);
    let gen: BTreeMap<String, Vec<String>> =
        BTreeMap::from([("x".to_string(), vec!["a dog barks".to_string(), "dog".to_string()])]);
    let r = evaluate_sets(&gen, &refs, None).unwrap();
    let one = |c: &str| {
        evaluate_fidelity(&BTreeMap::from([("x".to_string(), c.to_string())]), &refs, None).unwrap()
    };
    let (a, b) = (one("a dog barks"), one("dog"));
    assert!((r.cider - 100.0 * (a.cider + b.cider) / 2.0).abs() < TOL);
    assert!((r.mbleu_4.unwrap() - oracle::mbleu(&["a dog barks", "dog"], 4)).abs() < TOL);
}

proptest! {
    #[test]
    fn bleu_matches_oracle(c in sentence(), refs in sentences(1, 4), n in 1usize..=4) {
        let r = strs(&refs);
        prop_assert!((bleu_n(&c, &r, n).unwrap() - oracle::bleu(&c, &r, n, true)).abs() < TOL);
    }

    #[test]
    fn corpus_bleu_matches_oracle(cands in sentences(1, 4), refs in sentences(2, 2)) {
        let pairs: Vec<(&str, Vec<&str>)> = cands.iter().map(|c| (c.as_str(), strs(&refs))).collect();
        prop_assert!((corpus_bleu(&pairs, 4).unwrap() - oracle::corpus_bleu(&pairs, 4)).abs() < TOL);
    }

    #[test]
    fn cider_matches_oracle(c in sentence(), sets in prop::collection::vec(sentences(1, 3), 1..=3)) {
        let s: Vec<Vec<&str>> = sets.iter().map(|v| strs(v)).collect();
        let idf = IdfTable::from_reference_sets(&s);
        let got = cider(&c, &s[0], &idf);
        prop_assert!((got - oracle::cider(&c, &s[0], &s)).abs() < TOL);
    }

    #[test]
    fn uniform_idf_cider_is_plain_cosine(c in sentence(), refs in sentences(1, 3)) {
        let r = strs(&refs);
        let got = cider(&c, &r, &IdfTable::uniform());
        prop_assert!((got - oracle::cider_with(&c, &r, &|_| 1.0)).abs() < TOL);
    }

    #[test]
    fn mbleu_matches_oracle_and_ignores_order(set in sentences(2, 5), n in 1usize..=4) {
        let s = strs(&set);
        let got = mbleu_n(&s, n).unwrap();
        prop_assert!((got - oracle::mbleu(&s, n)).abs() < TOL);
        let mut rev = s.clone();
        rev.reverse();
        prop_assert!((mbleu_n(&rev, n).unwrap() - got).abs() < TOL);
    }

    #[test]
    fn div_matches_oracle_and_shrinks_with_duplicates(set in sentences(1, 5), n in 1usize..=2) {
        let s = strs(&set);
        let d = div_n(&s, n);
        prop_assert!((d - oracle::div(&s, n)).abs() < TOL);
        prop_assert!(d > 0.0 || n > 1);
        prop_assert!(d <= 100.0);
        let mut dup = s.clone();
        dup.push(s[0]);
        prop_assert!(div_n(&dup, n) <= d + TOL);
    }

    #[test]
    fn vocab_matches_oracle(set in sentences(1, 6)) {
        let s = strs(&set);
        prop_assert_eq!(vocab_size(&s), oracle::vocab(&s));
    }

    #[test]
    fn count_ratios_match_oracle(train in sentences(1, 5), eval in sentences(1, 5)) {
        let (t, e) = (strs(&train), strs(&eval));
        for r in ngram_count_ratios(&t, &e, t.len(), e.len()).unwrap() {
            let want = oracle::count_ratio(&t, &e, &r.ngram, t.len(), e.len());
            prop_assert!((r.ratio - want).abs() < TOL, "{} {} {}", r.ngram, r.ratio, want);
        }
    }

    #[test]
    fn bleu_of_self_is_100(c in sentence(), n in 1usize..=4) {
        prop_assume!(c.split_whitespace().count() >= n);
        prop_assert!((bleu_n(&c, &[&c], n).unwrap() - 100.0).abs() < TOL);
    }

    #[test]
    fn threshold_curve_is_non_increasing(set in sentences(1, 6)) {
        let curve = vocab_by_threshold(&set, &[0, 1, 2, 3, 5, 8]).unwrap();
        prop_assert!(curve.windows(2).all(|w| w[0].1 >= w[1].1));
    }
}
