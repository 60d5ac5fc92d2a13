use super::synth::*;
use super::*;
use proptest::prelude::*;

fn toy_vocab(words: &[&str]) -> Vocab {
    let all: Vec<String> = SPECIAL_TOKENS
        .iter()
        .map(|s| s.to_string())
        .chain(words.iter().map(|s| s.to_string()))
        .collect();
    Vocab::from_words(all).unwrap()
}

#[test]
fn vocab_frequency_rule() {
    let v = Vocab::build(&["a a b"], 7).unwrap();
    assert_eq!(v.size(), 7);
    assert_eq!(v.id("a"), 5);
    assert_eq!(v.id("b"), 6);
}

#[test]
fn vocab_tie_break_drops_rarer_word() {
    let v = Vocab::build(&["x y", "y"], 6).unwrap();
    assert_eq!(v.size(), 6);
    assert!(v.contains("y"));
    assert!(!v.contains("x"));
}

#[test]
fn vocab_caps_at_limit() {
    let corpus: Vec<String> = (0..6000).map(|i| format!("w{i}")).collect();
    let v = Vocab::build(&corpus, 5000).unwrap();
    assert_eq!(v.size(), 5000);
}

#[test]
fn vocab_rejects_empty_corpus() {
    let corpus: Vec<String> = vec![];
    assert!(matches!(Vocab::build(&corpus, 100), Err(TextError::EmptyCorpus)));
}

#[test]
fn encode_empty_text() {
    let v = toy_vocab(&[]);
    let seq = encode("", Role::Input, &v);
    assert_eq!(seq.ids.len(), INPUT_LEN);
    assert_eq!(&seq.ids[..2], &[BOS, EOS]);
    assert!(seq.ids[2..].iter().all(|&id| id == PAD));
    assert_eq!(seq.true_length, 2);
}

#[test]
fn encode_detaches_punctuation() {
    let v = toy_vocab(&["what", "wood", "?"]);
    let seq = encode("What wood?", Role::Input, &v);
    assert_eq!(
        &seq.ids[..5],
        &[BOS, v.id("what"), v.id("wood"), v.id("?"), EOS]
    );
    assert!(seq.ids[5..].iter().all(|&id| id == PAD));
}

#[test]
fn encode_truncates_but_keeps_eos() {
    let words: Vec<String> = (0..40).map(|i| format!("w{i}")).collect();
    let v = toy_vocab(&words.iter().map(|s| s.as_str()).collect::<Vec<_>>());
    let text = words.join(" ");
    let seq = encode(&text, Role::Input, &v);
    assert_eq!(seq.ids.len(), INPUT_LEN);
    assert_eq!(seq.true_length, INPUT_LEN);
    assert_eq!(*seq.ids.last().unwrap(), EOS);
    assert_eq!(seq.ids[INPUT_LEN - 2], v.id("w27"));
}

#[test]
fn decode_empty_sequence() {
    let v = toy_vocab(&[]);
    let mut ids = vec![BOS, EOS];
    ids.resize(INPUT_LEN, PAD);
    assert_eq!(decode_tokens(&ids, &v).unwrap(), "");
}

#[test]
fn decode_keeps_unk_placeholder() {
    let v = toy_vocab(&["hi"]);
    let out = decode_tokens(&[BOS, v.id("hi"), UNK, EOS], &v).unwrap();
    assert_eq!(out, "hi <unk>");
}

#[test]
fn decode_rejects_out_of_range() {
    let v = toy_vocab(&[]);
    assert!(matches!(
        decode_tokens(&[BOS, 99, EOS], &v),
        Err(TextError::IdOutOfRange { id: 99, .. })
    ));
}

fn raw(id: &str, text: &str, responses: u32) -> RawQA {
    RawQA {
        id: id.into(),
        image_ref: format!("img-{id}"),
        question_text: text.into(),
        response_count: responses,
    }
}

#[test]
fn triples_pick_first_question_sentence() {
    let (triples, dropped) = construct_triples(&[raw("1", "Love this! What wood is that?", 2)]);
    assert_eq!(dropped, 0);
    assert_eq!(triples[0].bland, "What wood is that?");
    assert_eq!(triples[0].attractive, "Love this! What wood is that?");
}

#[test]
fn triples_drop_single_sentence() {
    let (triples, dropped) = construct_triples(&[raw("1", "What wood?", 3)]);
    assert!(triples.is_empty());
    assert_eq!(dropped, 1);
}

#[test]
fn triples_fall_back_to_first_sentence() {
    let (triples, _) = construct_triples(&[raw("1", "Nice. Very nice.", 1)]);
    assert_eq!(triples[0].bland, "Nice.");
}

#[test]
fn triples_drop_unanswered() {
    let (triples, dropped) = construct_triples(&[raw("1", "Love this! What wood is that?", 0)]);
    assert!(triples.is_empty());
    assert_eq!(dropped, 1);
}

fn dummy_triples(n: usize) -> Vec<TripleExample> {
    (0..n)
        .map(|i| TripleExample {
            id: format!("t{i}"),
            feature_ref: format!("f{i}"),
            bland: format!("q {i} ?"),
            attractive: format!("nice ! q {i} ?"),
        })
        .collect()
}

#[test]
fn split_ratio() {
    let (train, test) = split(dummy_triples(4000), 1).unwrap();
    assert_eq!((train.len(), test.len()), (3200, 800));
    let (train, test) = split(dummy_triples(5), 1).unwrap();
    assert_eq!((train.len(), test.len()), (4, 1));
}

#[test]
fn split_is_deterministic_and_partitions() {
    let data = dummy_triples(103);
    let (tr1, te1) = split(data.clone(), 17).unwrap();
    let (tr2, te2) = split(data.clone(), 17).unwrap();
    assert_eq!(tr1, tr2);
    assert_eq!(te1, te2);

    let mut all: Vec<String> = tr1.iter().chain(&te1).map(|t| t.id.clone()).collect();
    all.sort();
    let mut orig: Vec<String> = data.iter().map(|t| t.id.clone()).collect();
    orig.sort();
    assert_eq!(all, orig);
}

#[test]
fn split_rejects_tiny_sets() {
    assert!(matches!(split(dummy_triples(4), 0), Err(TextError::TooFewExamples(4))));
}

#[test]
fn synth_is_deterministic() {
    let cfg = SynthConfig::new(200, 8, 42);
    let a = synth_generate(&cfg).unwrap();
    let b = synth_generate(&cfg).unwrap();
    assert_eq!(a.triples, b.triples);
    assert_eq!(a.detail_classes, b.detail_classes);
    for (k, v) in &a.features {
        assert_eq!(&b.features[k], v);
    }
}

#[test]
fn synth_structure_matches_tables() {
    let cfg = SynthConfig::new(500, 8, 7);
    let data = synth_generate(&cfg).unwrap();
    for (triple, &d) in data.triples.iter().zip(&data.detail_classes) {
        let expected = format!(
            "{} {} {}",
            emotion_prefix(&triple.bland),
            triple.bland,
            detail_suffix(d)
        );
        assert_eq!(triple.attractive, expected);
        assert!(triple.attractive.contains(&triple.bland));
        // The class is recoverable from the suffix alone.
        assert_eq!(detail_class_of(&triple.attractive, 8), Some(d));
        // Feature embeds the one-hot of d under modest noise.
        let c = &data.features[&triple.feature_ref];
        assert_eq!(c.len(), cfg.feature_dim);
        let argmax = c
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(argmax, d);
    }
}

#[test]
fn synth_example_fixture() {
    // Regenerate and check the documented shape: the bland question
    // "what wood is this ?" with detail class 3 rewrites to
    // "love this ! what wood is this ? what is the stain ?".
    let data = synth_generate(&SynthConfig::new(10_000, 8, 3)).unwrap();
    let hit = data
        .triples
        .iter()
        .zip(&data.detail_classes)
        .find(|(t, &d)| t.bland == "what wood is this ?" && d == 3)
        .expect("combination occurs in 10k samples");
    assert_eq!(
        hit.0.attractive,
        "love this ! what wood is this ? what is the stain ?"
    );
}

#[test]
fn synth_detail_marginal_is_uniform() {
    let k = 8usize;
    let n = 10_000usize;
    let data = synth_generate(&SynthConfig::new(n, k, 0)).unwrap();
    let mut counts = vec![0usize; k];
    for &d in &data.detail_classes {
        counts[d] += 1;
    }
    let expected = n as f64 / k as f64;
    for (d, &c) in counts.iter().enumerate() {
        let rel = (c as f64 - expected).abs() / expected;
        assert!(rel < 0.05, "class {d}: count {c} deviates {rel:.3} from uniform");
    }
}

#[test]
fn synth_detail_independent_of_bland() {
    // Chi-square test of independence between the bland sentence and the
    // detail class. Critical value from the Wilson-Hilferty approximation
    // at the 99th percentile, so the test asserts p > 0.01.
    let k = 8usize;
    let data = synth_generate(&SynthConfig::new(10_000, k, 123)).unwrap();
    let mut blands: Vec<&str> = data.triples.iter().map(|t| t.bland.as_str()).collect();
    blands.sort();
    blands.dedup();
    let index: std::collections::HashMap<&str, usize> =
        blands.iter().enumerate().map(|(i, &b)| (b, i)).collect();

    let mut table = vec![vec![0f64; k]; blands.len()];
    for (t, &d) in data.triples.iter().zip(&data.detail_classes) {
        table[index[t.bland.as_str()]][d] += 1.0;
    }
    let n = data.triples.len() as f64;
    let row_totals: Vec<f64> = table.iter().map(|r| r.iter().sum()).collect();
    let col_totals: Vec<f64> =
        (0..k).map(|c| table.iter().map(|r| r[c]).sum()).collect();

    let mut stat = 0.0f64;
    for (r, row) in table.iter().enumerate() {
        for (c, &obs) in row.iter().enumerate() {
            let exp = row_totals[r] * col_totals[c] / n;
            if exp > 0.0 {
                stat += (obs - exp).powi(2) / exp;
            }
        }
    }
    let dof = ((blands.len() - 1) * (k - 1)) as f64;
    let z99 = 2.3263478740;
    let h = 2.0 / (9.0 * dof);
    let critical = dof * (1.0 - h + z99 * h.sqrt()).powi(3);
    assert!(
        stat < critical,
        "chi-square {stat:.1} >= {critical:.1} (dof {dof}): suffix class leaks into bland text"
    );
}

#[test]
fn synth_validates_detail_count() {
    assert!(matches!(
        synth_generate(&SynthConfig::new(10, 1, 0)),
        Err(TextError::InvalidDetailCount(1))
    ));
    assert!(matches!(
        synth_generate(&SynthConfig::new(10, 65, 0)),
        Err(TextError::InvalidDetailCount(65))
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn encode_decode_identity(words in proptest::collection::vec("[a-d]{1,3}", 1..20)) {
        let v = toy_vocab(&["a", "b", "c", "d", "aa", "ab", "ba", "bb",
                            "aaa", "abc", "abd", "aab", "bcd", "cd", "dc",
                            "ca", "cb", "cc", "dd", "da", "db", "ac", "ad",
                            "bc", "bd", "cda", "dab", "bda", "cab", "dba"]);
        // Restrict to in-vocab words shorter than the role limit.
        let text = words.join(" ");
        let normalized = normalize(&text);
        prop_assume!(normalized.iter().all(|w| v.contains(w)));
        prop_assume!(normalized.len() <= INPUT_LEN - 2);
        let seq = encode(&text, Role::Input, &v);
        let back = decode_tokens(&seq.ids, &v).unwrap();
        prop_assert_eq!(back, normalized.join(" "));
    }

    #[test]
    fn bland_is_substring_of_attractive(
        parts in proptest::collection::vec("[a-z ]{1,12}[?.!]", 2..5),
        responses in 1u32..4,
    ) {
        let text = parts.join(" ");
        let (triples, _) = construct_triples(&[RawQA {
            id: "x".into(),
            image_ref: "img".into(),
            question_text: text,
            response_count: responses,
        }]);
        for t in &triples {
            prop_assert!(t.attractive.contains(&t.bland));
        }
    }
}
