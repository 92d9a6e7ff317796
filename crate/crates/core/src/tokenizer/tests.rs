use proptest::prelude::*;

use super::*;
use crate::corpus::{synthesize_corpus, GeneratorSpec, SourceFunction};

/// Out-of-bounds write example: a nine-line function whose loop writes
/// `buffer[offset + i]` without a bound check.
const WRITE_TO_BUFFER: &str = "void writeToBuffer(int offset, int data[]) {
    int buffer[20];
    int i;

    for (i = 0; i < 10; i++) {
        buffer[offset + i] = data[i];
    }
    printf(\"done\");
    return;
}";

fn func(code: &str, labels: &[u8]) -> SourceFunction {
    SourceFunction::new("t", code, labels, vec![]).unwrap()
}

fn toy_vocab() -> Vocab {
    let corpus = synthesize_corpus(&GeneratorSpec {
        num_functions: 30,
        seed: 3,
        ..GeneratorSpec::default()
    })
    .unwrap();
    let texts: Vec<&str> = corpus.iter().map(|f| f.code.as_str()).collect();
    train_bpe(texts, 300).unwrap()
}

#[test]
fn segmentation_drops_blank_lines() {
    assert_eq!(segment_statements("a=1;\n\nb=2;").unwrap(), vec!["a=1;", "b=2;"]);
    assert_eq!(segment_statements("  x  =   y ;  ").unwrap(), vec!["x = y ;"]);
    assert!(matches!(segment_statements(" \n\t\n"), Err(Error::Segmentation(_))));
}

#[test]
fn figure_style_function_has_nine_statements() {
    assert_eq!(segment_statements(WRITE_TO_BUFFER).unwrap().len(), 9);
}

#[test]
fn pretokenizer_splits_classes() {
    assert_eq!(
        pretokenize("buf[off+i] = src->x;"),
        vec!["buf", "[", "off", "+", "i", "]", "=", "src", "->", "x", ";"]
    );
}

#[test]
fn single_merge_budget_merges_the_only_pair() {
    let vocab = train_bpe(["aaaa"], 4).unwrap();
    assert_eq!(vocab.merges(), &[("a".to_string(), "a".to_string())]);
    assert_eq!(vocab.size(), 4);
    assert_eq!(vocab.encode("aaaa"), vec![3, 3]);
}

#[test]
fn too_small_vocab_is_config_error() {
    assert!(matches!(train_bpe(["abc"], 5), Err(Error::Config(_))));
    assert!(matches!(train_bpe(Vec::<&str>::new(), 50), Err(Error::Config(_))));
}

#[test]
fn ties_break_lexicographically() {
    // ("a","b") and ("c","d") both occur twice.
    let vocab = train_bpe(["ab cd ab cd"], 8).unwrap();
    assert_eq!(vocab.merges()[0], ("a".to_string(), "b".to_string()));
    assert_eq!(vocab.merges()[1], ("c".to_string(), "d".to_string()));
}

#[test]
fn training_is_deterministic() {
    assert_eq!(toy_vocab(), toy_vocab());
}

#[test]
fn toy_corpus_encodes_without_unk() {
    let corpus = synthesize_corpus(&GeneratorSpec {
        num_functions: 30,
        seed: 3,
        ..GeneratorSpec::default()
    })
    .unwrap();
    let vocab = toy_vocab();
    let statements: Vec<&String> = corpus.iter().flat_map(|f| &f.statements).take(20).collect();
    for s in statements {
        let ids = vocab.encode(s);
        assert!(!ids.contains(&UNK), "{s}");
        let squash = |x: &str| x.split_whitespace().collect::<String>();
        assert_eq!(squash(&vocab.decode(&ids)), squash(s));
    }
}

#[test]
fn unknown_characters_map_to_unk() {
    let vocab = train_bpe(["abc"], 10).unwrap();
    assert_eq!(vocab.encode("a$"), vec![vocab.id("a").unwrap(), UNK]);
}

#[test]
fn vocab_text_round_trip() {
    let vocab = toy_vocab();
    let text = vocab.to_text();
    assert!(text.starts_with("#bpe-vocab v1\n#specials <pad> <unk>\n#alphabet "));
    assert_eq!(Vocab::from_text(&text).unwrap(), vocab);
    assert!(Vocab::from_text("garbage").is_err());
    let broken = text.replacen("#alphabet", "#alphabets", 1);
    assert!(Vocab::from_text(&broken).is_err());
}

#[test]
fn encode_function_pads_to_n() {
    let vocab = toy_vocab();
    let f = func("int a = 1;\nint b = 2;\nreturn a;", &[0, 0, 0]);
    let sm = encode_function(&f, &vocab, 155, 20);
    assert_eq!(sm.ids.dim(), (155, 20));
    assert_eq!(sm.real_statements(), 3);
    assert!(sm.ids.rows().into_iter().skip(3).all(|r| r.iter().all(|&x| x == PAD)));
    assert!(sm.token_counts[..3].iter().all(|&c| c >= 1));
}

#[test]
fn long_statement_truncates_to_r() {
    let vocab = train_bpe(["a b c d e f g h i j k l m n o p q r s t u v w x y"], 30).unwrap();
    let f = func("a b c d e f g h i j k l m n o p q r s t u v w x y", &[0]);
    let full = vocab.encode(&f.statements[0]);
    assert_eq!(full.len(), 25);
    let sm = encode_function(&f, &vocab, 4, 20);
    assert_eq!(sm.tokens(0), &full[..20]);
    assert_eq!(sm.token_counts[0], 20);
}

#[test]
fn statements_beyond_n_are_dropped() {
    let vocab = toy_vocab();
    let code: Vec<String> = (0..10).map(|i| format!("int a = {i};")).collect();
    let f = func(&code.join("\n"), &[0; 10]);
    let sm = encode_function(&f, &vocab, 4, 6);
    assert_eq!(sm.real_statements(), 4);
}

#[test]
fn scope_encoding() {
    let vocab = toy_vocab();
    let f = func("a = 1;\nb = 2;\nc = 3;\nd = 4;", &[0, 1, 1, 0]);
    let pm = encode_scope(&f, &vocab, 12, 8);
    assert!(!pm.is_benign);
    assert_eq!(pm.real_statements(), 2);
    assert_eq!(pm.tokens(0), vocab.encode("b = 2;").as_slice());

    let benign = func("a = 1;", &[0]);
    let pm = encode_scope(&benign, &vocab, 12, 8);
    assert!(pm.is_benign);
    assert!(pm.scope_mask.iter().all(|m| !m));
    assert!(pm.ids.iter().all(|&x| x == PAD));
}

#[test]
fn scope_keeps_first_q_vulnerable_statements() {
    let vocab = toy_vocab();
    let code: Vec<String> = (0..16).map(|i| format!("int a = {i};")).collect();
    let mut labels = vec![1u8; 16];
    labels[0] = 0;
    labels[15] = 0;
    let f = func(&code.join("\n"), &labels);
    let pm = encode_scope(&f, &vocab, 12, 8);
    assert_eq!(pm.real_statements(), 12);
    assert_eq!(pm.tokens(11), vocab.encode("int a = 12;").as_slice());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn encoding_invariants(seed in 0u64..1000, n in 1usize..24, r in 1usize..16) {
        let corpus = synthesize_corpus(&GeneratorSpec {
            num_functions: 10,
            seed,
            ..GeneratorSpec::default()
        }).unwrap();
        let vocab = toy_vocab();
        for f in &corpus {
            let sm = encode_function(f, &vocab, n, r);
            prop_assert_eq!(sm.real_statements(), f.statements.len().min(n));
            prop_assert!(sm.ids.iter().all(|&id| (id as usize) < vocab.size()));
            for (j, &m) in sm.statement_mask.iter().enumerate() {
                if !m {
                    prop_assert!(sm.ids.row(j).iter().all(|&x| x == PAD));
                }
            }
            prop_assert_eq!(&sm, &encode_function(f, &vocab, n, r));
        }
    }
}
