use proptest::prelude::*;

use super::*;
use crate::codebook::init_codebook;
use crate::corpus::SourceFunction;
use crate::model::{ModelConfig, PoolingMode};
use crate::tokenizer::{train_bpe, Vocab};

fn gold(id: &str, labels: &[u8]) -> EncodedFunction {
    let code: Vec<String> = (0..labels.len()).map(|i| format!("s{i};")).collect();
    let f = SourceFunction::new(id, code.join("\n"), labels, vec![]).unwrap();
    let vocab = train_bpe(["s0; s1; s2; s3; s4; s5; s6; s7; s8; s9;"], 20).unwrap();
    let mut cfg = ModelConfig::desk(vocab.size());
    cfg.n = 64;
    EncodedFunction::new(&f, &vocab, &cfg)
}

fn result(id: &str, y: bool, z: &[bool]) -> MatchResult {
    MatchResult {
        id: id.to_string(),
        y_hat: if y { 0.9 } else { 0.1 },
        decision: y,
        z_hat: z.iter().map(|&b| if b { 0.9 } else { 0.1 }).collect(),
        statement_decisions: z.to_vec(),
        best_centroid: None,
    }
}

#[test]
fn hand_counted_confusion() {
    let golds = [gold("a", &[1, 1, 0, 0]), gold("b", &[0, 0, 0, 0])];
    let results = [
        result("a", true, &[true, false, false, false]),
        result("b", true, &[false, true, false, false]),
    ];
    let r = evaluate(&results, &golds).unwrap();
    let s = r.statement;
    assert_eq!((s.counts.tp, s.counts.fp, s.counts.fn_, s.counts.tn), (1, 1, 1, 5));
    assert_eq!((s.precision, s.recall, s.f1, s.accuracy), (0.5, 0.5, 0.5, 0.75));
}

#[test]
fn perfect_predictions_score_one() {
    let golds = [gold("a", &[0, 1, 0]), gold("b", &[0, 0])];
    let results = [result("a", true, &[false, true, false]), result("b", false, &[false, false])];
    let r = evaluate(&results, &golds).unwrap();
    for m in [r.function, r.statement] {
        assert_eq!((m.accuracy, m.precision, m.recall, m.f1), (1.0, 1.0, 1.0, 1.0));
    }
}

#[test]
fn all_negative_has_zero_recall_and_flagged_precision() {
    let golds = [gold("a", &[0, 1])];
    let results = [result("a", false, &[false, false])];
    let r = evaluate(&results, &golds).unwrap();
    assert_eq!(r.statement.recall, 0.0);
    assert!(r.statement.precision_undefined);
    assert_eq!(r.statement.precision, 0.0);
    assert!(r.statement.f1_undefined);
}

#[test]
fn misaligned_ids_are_usage_errors() {
    let golds = [gold("a", &[0, 1])];
    assert!(matches!(
        evaluate(&[result("b", false, &[false, false])], &golds),
        Err(Error::Usage(_))
    ));
    assert!(evaluate(&[], &golds).is_err());
}

#[test]
fn statements_past_cap_are_counted_as_excluded() {
    let code: Vec<String> = (0..10).map(|i| format!("s{i};")).collect();
    let f = SourceFunction::new("x", code.join("\n"), &[0; 10], vec![]).unwrap();
    let vocab = train_bpe(["s0; s1; s2; s3; s4; s5; s6; s7; s8; s9;"], 20).unwrap();
    let mut cfg = ModelConfig::desk(vocab.size());
    cfg.n = 6;
    let g = EncodedFunction::new(&f, &vocab, &cfg);
    let r = evaluate(&[result("x", false, &[false; 6])], &[g]).unwrap();
    assert_eq!(r.excluded_statements, 4);
    assert_eq!(r.statement.counts.total(), 6);
}

#[test]
fn decide_zeroes_predicted_benign() {
    let r = MatchResult::decide("x", 0.4, vec![0.9, 0.8], Some(2));
    assert!(!r.decision);
    assert_eq!(r.z_hat, vec![0.0, 0.0]);
    assert_eq!(r.statement_decisions, vec![false, false]);
    let r = MatchResult::decide("x", 0.6, vec![0.9, 0.2], None);
    assert_eq!(r.statement_decisions, vec![true, false]);
}

fn tiny_model(vocab: &Vocab) -> Model {
    let cfg = ModelConfig {
        d: 8,
        h: 4,
        n: 6,
        r: 4,
        q: 2,
        layers: 1,
        heads: 2,
        dropout: 0.1,
        vocab_size: vocab.size(),
        pooling: PoolingMode::Rnn,
        positional_encoding: false,
        ffn_width: 16,
        init_std: 0.5,
    };
    Model::new(cfg, 21).unwrap()
}

fn tiny_example(vocab: &Vocab, model: &Model) -> EncodedFunction {
    let f = SourceFunction::new("f", "s1; s2;\ns3;\ns4; s5;", &[0, 1, 0], vec![]).unwrap();
    EncodedFunction::new(&f, vocab, &model.config)
}

#[test]
fn codebook_permutation_does_not_change_pooled_output() {
    let vocab = train_bpe(["s0; s1; s2; s3; s4; s5;"], 20).unwrap();
    let model = tiny_model(&vocab);
    let ex = tiny_example(&vocab, &model);
    let book = init_codebook(5, 4, 3).unwrap();
    let a = match_function(&model, Some(&book), &ex).unwrap();
    let perm = [3, 0, 4, 1, 2];
    let b = match_function(&model, Some(&book.permuted(&perm)), &ex).unwrap();
    assert!((a.y_hat - b.y_hat).abs() < 1e-12);
    for (x, y) in a.z_hat.iter().zip(&b.z_hat) {
        assert!((x - y).abs() < 1e-12);
    }
    assert_eq!(perm[b.best_centroid.unwrap()], a.best_centroid.unwrap());
}

#[test]
fn single_centroid_is_one_forward() {
    let vocab = train_bpe(["s0; s1; s2; s3; s4; s5;"], 20).unwrap();
    let model = tiny_model(&vocab);
    let ex = tiny_example(&vocab, &model);
    let book = init_codebook(1, 4, 3).unwrap();
    let m = match_function(&model, Some(&book), &ex).unwrap();
    let s = model.statement_values(&ex.statements).unwrap();
    let (y, _) = model.predict_with_aux(s.view(), model.centroid_aux(book.centroid(0)).view()).unwrap();
    assert_eq!(m.y_hat, y);
    assert_eq!(m.best_centroid, Some(0));
}

#[test]
fn missing_codebook_is_usage_error() {
    let vocab = train_bpe(["s0; s1; s2; s3; s4; s5;"], 20).unwrap();
    let model = tiny_model(&vocab);
    let ex = tiny_example(&vocab, &model);
    assert!(matches!(match_function(&model, None, &ex), Err(Error::Usage(_))));
}

/// Independent confusion counter over flat label lists.
fn brute_force(pred: &[bool], gold: &[bool]) -> (usize, usize, usize, usize) {
    let count = |p: bool, g: bool| pred.iter().zip(gold).filter(|&(&a, &b)| a == p && b == g).count();
    (count(true, true), count(true, false), count(false, true), count(false, false))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn evaluate_matches_brute_force(labels in prop::collection::vec(
        (any::<bool>(), prop::collection::vec((any::<bool>(), any::<bool>()), 1..6)), 1..8)
    ) {
        let mut golds = Vec::new();
        let mut results = Vec::new();
        let (mut ps, mut gs) = (Vec::new(), Vec::new());
        for (i, (fpred, stmts)) in labels.iter().enumerate() {
            let id = format!("f{i}");
            let gl: Vec<u8> = stmts.iter().map(|&(_, g)| g as u8).collect();
            let pl: Vec<bool> = stmts.iter().map(|&(p, _)| p).collect();
            golds.push(gold(&id, &gl));
            results.push(result(&id, *fpred, &pl));
            ps.extend(pl);
            gs.extend(stmts.iter().map(|&(_, g)| g));
        }
        let r = evaluate(&results, &golds).unwrap();
        let (tp, fp, fn_, tn) = brute_force(&ps, &gs);
        let c = r.statement.counts;
        prop_assert_eq!((c.tp, c.fp, c.fn_, c.tn), (tp, fp, fn_, tn));
        let m = c.metrics();
        prop_assert_eq!(m, r.statement);
    }
}
