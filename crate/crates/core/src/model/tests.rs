use ndarray::{array, Array2};

use super::*;
use crate::codebook::init_codebook;
use crate::corpus::SourceFunction;
use crate::diffcore::{grad_check, Mode, Tape};
use crate::tokenizer::{train_bpe, Vocab};

fn tiny_config(vocab: usize) -> ModelConfig {
    ModelConfig {
        d: 8,
        h: 4,
        n: 4,
        r: 3,
        q: 2,
        layers: 1,
        heads: 2,
        dropout: 0.0,
        vocab_size: vocab,
        pooling: PoolingMode::Rnn,
        positional_encoding: false,
        ffn_width: 16,
        init_std: 0.3,
    }
}

fn vocab() -> Vocab {
    train_bpe(["int a = b + c ; x [ i ] = y ; return z ;"], 40).unwrap()
}

fn example(code: &str, labels: &[u8], vocab: &Vocab, cfg: &ModelConfig) -> EncodedFunction {
    let f = SourceFunction::new("t", code, labels, vec![]).unwrap();
    EncodedFunction::new(&f, vocab, cfg)
}

fn sample(vocab: &Vocab, cfg: &ModelConfig) -> EncodedFunction {
    example("int a = b;\nx[i] = y;\nreturn z;", &[0, 1, 0], vocab, cfg)
}

fn eval_forward(model: &Model, ex: &EncodedFunction, cond: Conditioning<'_>) -> (f64, Vec<f64>) {
    let mut tape = Tape::new(&model.store, Mode::Eval);
    let out = model.forward(&mut tape, ex, cond).unwrap();
    (
        tape.scalar(out.y_hat),
        tape.value(out.z_hat).iter().copied().collect(),
    )
}

#[test]
fn config_validation() {
    let mut cfg = ModelConfig::desk(100);
    assert!(cfg.validate().is_ok());
    cfg.heads = 3;
    assert!(cfg.validate().is_err());
    let mut cfg = ModelConfig::desk(100);
    cfg.h = 128;
    assert!(cfg.validate().is_err());
    let full = ModelConfig::full(100);
    assert_eq!((full.n, full.r, full.q), (155, 20, 12));
}

#[test]
fn padded_statement_rows_are_zero() {
    let v = vocab();
    let cfg = tiny_config(v.size());
    let model = Model::new(cfg.clone(), 1).unwrap();
    let ex = example("int a = b;\nreturn z;", &[0, 0], &v, &cfg);
    let mut tape = Tape::new(&model.store, Mode::Eval);
    let s = model.embed_statements(&mut tape, &ex.statements).unwrap();
    let s = tape.value(s);
    assert_eq!(s.dim(), (4, 8));
    assert!(s.row(2).iter().chain(s.row(3).iter()).all(|&x| x == 0.0));
    assert!(s.row(0).iter().any(|&x| x != 0.0));
}

#[test]
fn one_token_statement_is_one_gru_step() {
    let v = vocab();
    let cfg = tiny_config(v.size());
    let model = Model::new(cfg, 2).unwrap();
    let id = v.id("a").unwrap();
    let mut tape = Tape::new(&model.store, Mode::Eval);
    let s = model.embed_rows(&mut tape, &[&[id]]).unwrap();
    let gru = model.params.gru_statement.bind(&mut tape);
    let x = tape.lookup(model.params.embedding, &[id as usize]).unwrap();
    let h0 = tape.zeros(1, 8);
    let h1 = gru.step(&mut tape, x, h0).unwrap();
    assert_eq!(tape.value(s), tape.value(h1));
}

#[test]
fn packed_gru_matches_per_statement_runs() {
    let v = vocab();
    let cfg = tiny_config(v.size());
    let model = Model::new(cfg, 3).unwrap();
    let rows: Vec<Vec<u32>> = vec![vec![3, 4], vec![5, 6, 7, 8], vec![9], vec![10, 11, 12]];
    let refs: Vec<&[u32]> = rows.iter().map(Vec::as_slice).collect();
    let mut tape = Tape::new(&model.store, Mode::Eval);
    let packed = model.embed_rows(&mut tape, &refs).unwrap();
    let packed = tape.value(packed).clone();
    for (j, r) in rows.iter().enumerate() {
        let mut tape = Tape::new(&model.store, Mode::Eval);
        let ids: Vec<usize> = r.iter().map(|&i| i as usize).collect();
        let x = tape.lookup(model.params.embedding, &ids).unwrap();
        let gru = model.params.gru_statement.bind(&mut tape);
        let h = gru.run_sequence(&mut tape, x).unwrap();
        for (a, b) in tape.value(h).iter().zip(packed.row(j)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn mean_pooling_averages_tokens() {
    let v = vocab();
    let mut cfg = tiny_config(v.size());
    cfg.pooling = PoolingMode::Mean;
    let model = Model::new(cfg, 4).unwrap();
    let mut tape = Tape::new(&model.store, Mode::Eval);
    let s = model.embed_rows(&mut tape, &[&[3, 5]]).unwrap();
    let e = model.store.get(model.params.embedding);
    let expect = (&e.row(3) + &e.row(5)) / 2.0;
    for (a, b) in tape.value(s).iter().zip(expect.iter()) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn max_pooling_takes_columnwise_max() {
    let v = vocab();
    let mut cfg = tiny_config(v.size());
    cfg.pooling = PoolingMode::Max;
    let model = Model::new(cfg, 4).unwrap();
    let mut tape = Tape::new(&model.store, Mode::Eval);
    let s = model.embed_rows(&mut tape, &[&[3, 5]]).unwrap();
    let e = model.store.get(model.params.embedding);
    for c in 0..8 {
        assert_eq!(tape.value(s)[[0, c]], e[[3, c]].max(e[[5, c]]));
    }
}

#[test]
fn pooling_modes_share_shapes() {
    let v = vocab();
    for pooling in [PoolingMode::Rnn, PoolingMode::Mean, PoolingMode::Max] {
        let mut cfg = tiny_config(v.size());
        cfg.pooling = pooling;
        let model = Model::new(cfg.clone(), 5).unwrap();
        let ex = sample(&v, &cfg);
        let mut tape = Tape::new(&model.store, Mode::Eval);
        let out = model.forward(&mut tape, &ex, Conditioning::Scope).unwrap();
        assert_eq!(tape.shape(out.y_hat), [1, 1]);
        assert_eq!(tape.shape(out.z_hat), [3, 1]);
    }
}

#[test]
fn benign_scope_is_p_benign() {
    let v = vocab();
    let cfg = tiny_config(v.size());
    let model = Model::new(cfg.clone(), 6).unwrap();
    let ex = example("int a = b;\nreturn z;", &[0, 0], &v, &cfg);
    let mut tape = Tape::new(&model.store, Mode::Eval);
    let p = model.embed_scope(&mut tape, &ex.scope).unwrap();
    assert_eq!(tape.value(p), model.store.get(model.params.p_benign));
}

#[test]
fn scope_padding_and_repeats() {
    let v = vocab();
    let mut cfg = tiny_config(v.size());
    cfg.q = 4;
    let model = Model::new(cfg.clone(), 7).unwrap();
    let ex = example("int a = b;\nint a = b;\nreturn z;", &[1, 1, 0], &v, &cfg);
    let mut tape = Tape::new(&model.store, Mode::Eval);
    let p = model.embed_scope(&mut tape, &ex.scope).unwrap();
    let p = tape.value(p);
    assert_eq!(p.row(0), p.row(1));
    assert!(p.row(2).iter().chain(p.row(3).iter()).all(|&x| x == 0.0));
}

#[test]
fn different_scopes_give_different_summaries() {
    let v = vocab();
    let cfg = tiny_config(v.size());
    let model = Model::new(cfg.clone(), 8).unwrap();
    let a = example("int a = b;\nreturn z;", &[1, 0], &v, &cfg);
    let b = example("int a = b;\nreturn z;", &[0, 1], &v, &cfg);
    let va = model.scope_vector(&a.scope).unwrap();
    let vb = model.scope_vector(&b.scope).unwrap();
    assert!(va.iter().zip(vb.iter()).any(|(x, y)| (x - y).abs() > 1e-9));
}

#[test]
fn factorization_is_normalized_and_scale_invariant() {
    let v = vocab();
    let cfg = tiny_config(v.size());
    let model = Model::new(cfg, 9).unwrap();
    let raw = Array2::from_shape_fn((1, 8), |(_, c)| (c as f64 * 0.7).sin());
    let run = |x: Array2<f64>| {
        let mut tape = Tape::new(&model.store, Mode::Eval);
        let x = tape.constant(x);
        let out = model.factorize_scope(&mut tape, x).unwrap();
        tape.value(out).clone()
    };
    let v1 = run(raw.clone());
    let mean = v1.mean().unwrap();
    let var = v1.mapv(|x| (x - mean).powi(2)).mean().unwrap();
    assert!(mean.abs() < 1e-12);
    assert!((var - 1.0).abs() < 1e-3);
    let v2 = run(raw * 2.0);
    for (a, b) in v1.iter().zip(v2.iter()) {
        assert!((a - b).abs() < 1e-4);
    }
}

#[test]
fn zero_layers_pass_statements_through() {
    let v = vocab();
    let mut cfg = tiny_config(v.size());
    cfg.layers = 0;
    let model = Model::new(cfg, 10).unwrap();
    let mut tape = Tape::new(&model.store, Mode::Eval);
    let s = tape.constant(Array2::from_shape_fn((3, 8), |(i, j)| (i * 8 + j) as f64));
    let aux = tape.zeros(1, 8);
    let h = model.encode(&mut tape, s, aux, None).unwrap();
    assert_eq!(tape.value(h), tape.value(s));
}

#[test]
fn attention_rows_sum_to_one() {
    let v = vocab();
    let cfg = tiny_config(v.size());
    let model = Model::new(cfg, 11).unwrap();
    let mut tape = Tape::new(&model.store, Mode::Eval);
    let s = tape.constant(Array2::from_shape_fn((3, 8), |(i, j)| ((i + 2 * j) as f64).cos()));
    let aux = tape.constant(Array2::from_elem((1, 8), 0.1));
    let mut maps = Vec::new();
    model.encode(&mut tape, s, aux, Some(&mut maps)).unwrap();
    assert_eq!(maps.len(), 2);
    for m in maps {
        assert_eq!(tape.shape(m), [4, 4]);
        for row in tape.value(m).rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn masked_rows_do_not_affect_real_rows() {
    let v = vocab();
    let mut cfg = tiny_config(v.size());
    cfg.n = 5;
    let model = Model::new(cfg, 12).unwrap();
    let mask = [true, false, true, false, true];
    let run = |fill: f64| {
        let mut tape = Tape::new(&model.store, Mode::Eval);
        let s = tape.constant(Array2::from_shape_fn((5, 8), |(i, j)| {
            if mask[i] {
                ((i * 3 + j) as f64).sin()
            } else {
                fill * (j as f64 + i as f64)
            }
        }));
        let aux = tape.constant(Array2::from_elem((1, 8), 0.2));
        let h = model.encoder_forward(&mut tape, s, &mask, aux).unwrap();
        tape.value(h).clone()
    };
    let a = run(0.0);
    let b = run(7.5);
    assert_eq!(a, b);
    assert!(a.row(1).iter().all(|&x| x == 0.0));
}

#[test]
fn zero_heads_give_half() {
    let v = vocab();
    let cfg = tiny_config(v.size());
    let mut model = Model::new(cfg.clone(), 13).unwrap();
    for id in [model.params.w_g, model.params.w_u, model.params.w_i, model.params.w_j] {
        model.store.get_mut(id).fill(0.0);
    }
    let (y, z) = eval_forward(&model, &sample(&v, &cfg), Conditioning::Scope);
    assert_eq!(y, 0.5);
    assert!(z.iter().all(|&p| p == 0.5));
}

#[test]
fn statement_head_is_row_local() {
    let v = vocab();
    let cfg = tiny_config(v.size());
    let model = Model::new(cfg, 14).unwrap();
    let run = |bump: f64| {
        let mut tape = Tape::new(&model.store, Mode::Eval);
        let h = tape.constant(Array2::from_shape_fn((4, 8), |(i, j)| {
            (i as f64 - j as f64) * 0.3 + if i == 3 { bump } else { 0.0 }
        }));
        let z = model.predict_statements(&mut tape, h).unwrap();
        tape.value(z).clone()
    };
    let (a, b) = (run(0.0), run(1.0));
    assert_eq!(a.nrows(), 4);
    for i in 0..3 {
        assert_eq!(a[[i, 0]], b[[i, 0]]);
    }
    assert_ne!(a[[3, 0]], b[[3, 0]]);
}

#[test]
fn function_head_skips_padding() {
    let v = vocab();
    let cfg = tiny_config(v.size());
    let model = Model::new(cfg, 15).unwrap();
    let mut tape = Tape::new(&model.store, Mode::Eval);
    let real = tape.constant(array![[0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8]]);
    let padded = tape.constant(array![
        [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8],
        [9.0, 9.0, 9.0, 9.0, 9.0, 9.0, 9.0, 9.0]
    ]);
    let a = model.predict_function(&mut tape, real, None).unwrap();
    let b = model.predict_function(&mut tape, padded, Some(&[true, false])).unwrap();
    let (a, b) = (tape.scalar(a), tape.scalar(b));
    assert_eq!(a, b);
    assert!(a > 0.0 && a < 1.0);
}

#[test]
fn evaluation_is_deterministic() {
    let v = vocab();
    let cfg = tiny_config(v.size());
    let model = Model::new(cfg.clone(), 16).unwrap();
    let ex = sample(&v, &cfg);
    assert_eq!(
        eval_forward(&model, &ex, Conditioning::Scope),
        eval_forward(&model, &ex, Conditioning::Scope)
    );
}

#[test]
fn precomputed_path_matches_forward() {
    let v = vocab();
    let cfg = tiny_config(v.size());
    let model = Model::new(cfg.clone(), 17).unwrap();
    let ex = sample(&v, &cfg);
    let codebook = init_codebook(3, cfg.h, 1).unwrap();
    let c = codebook.centroid(1);
    let direct = eval_forward(&model, &ex, Conditioning::Centroid(c));
    let s = model.statement_values(&ex.statements).unwrap();
    let aux = model.centroid_aux(c);
    let (y, z) = model.predict_with_aux(s.view(), aux.view()).unwrap();
    assert!((y - direct.0).abs() < 1e-14);
    for (a, b) in z.iter().zip(&direct.1) {
        assert!((a - b).abs() < 1e-14);
    }
}

#[test]
fn warmup_model_gradient_check() {
    let v = vocab();
    let cfg = tiny_config(v.size());
    let model = Model::new(cfg.clone(), 18).unwrap();
    let ex = sample(&v, &cfg);
    let ids: Vec<_> = model.store.ids().collect();
    let report = grad_check(&model.store, &ids, 1e-5, |tape| {
        let out = model.forward(tape, &ex, Conditioning::Scope)?;
        let y = tape.bce(out.y_hat, array![[1.0]], array![[1.0]])?;
        let z = tape.bce(out.z_hat, array![[0.0], [1.0], [0.0]], Array2::from_elem((3, 1), 1.0 / 3.0))?;
        tape.add(y, z)
    })
    .unwrap();
    assert!(report.max_rel_error <= 1e-4, "{report:?}");
}

#[test]
fn bad_token_id_is_an_error() {
    let v = vocab();
    let cfg = tiny_config(v.size());
    let model = Model::new(cfg, 19).unwrap();
    let mut tape = Tape::new(&model.store, Mode::Eval);
    assert!(model.embed_rows(&mut tape, &[&[9999]]).is_err());
}
