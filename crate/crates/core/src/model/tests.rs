use super::*;
use crate::numcore::{grad_check_params, Tape};

const V: usize = 16;

fn config(arch: Architecture) -> ModelConfig {
    ModelConfig {
        architecture: arch,
        n_layers: 2,
        model_dim: 8,
        hidden_dim: 12,
        head_count: 2,
        vocab_size: V,
        max_len: 12,
        max_len_offset: 4,
        ..Default::default()
    }
}

fn model(arch: Architecture) -> ReorderNatParams {
    ReorderNatParams::new(config(arch)).unwrap()
}

const NAT: Architecture = Architecture::ReorderNat(ReorderKind::Nat);
const AT: Architecture = Architecture::ReorderNat(ReorderKind::At);

#[test]
fn restricted_vocab_examples() {
    let (a, b) = (7, 9);
    assert_eq!(restricted_vocab(&[a, b, a]), vec![a, b, NULL]);
    assert_eq!(restricted_vocab(&[a]), vec![a, NULL]);
    let x = [5, 6, 7, 5, 8, 9, 6, 10, 11, 5];
    assert_eq!(restricted_vocab(&x).len(), 8);
}

#[test]
fn guidance_examples() {
    let scores = Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap();
    let g = guidance_from_scores(&scores, 0.2, vec![5, NULL]).unwrap();
    assert!((g.q.get(0, 0) - 0.00669).abs() < 1e-5);
    assert!((g.q.get(0, 1) - 0.99331).abs() < 1e-5);
    let plain = guidance_from_scores(&scores, 1.0, vec![5, NULL]).unwrap();
    let e = (1f64.exp(), 2f64.exp());
    assert!((plain.q.get(0, 0) - e.0 / (e.0 + e.1)).abs() < 1e-12);
    assert!(matches!(
        guidance_from_scores(&scores, 0.0, vec![5, NULL]),
        Err(Error::Parameter(_))
    ));
    assert!(guidance_from_scores(&scores, 1.0, vec![NULL]).is_err());
}

#[test]
fn guidance_argmax_ignores_temperature() {
    let scores = Tensor::matrix(2, 3, vec![0.3, -1.0, 0.29, 2.0, 2.0, -4.0]).unwrap();
    for t in [1e-3, 0.2, 1.0, 50.0] {
        let g = guidance_from_scores(&scores, t, vec![5, 6, NULL]).unwrap();
        for r in 0..2 {
            assert_eq!(argmax(g.q.row(r)), argmax(scores.row(r)));
        }
    }
}

#[test]
fn config_validation() {
    assert!(ReorderNatParams::new(ModelConfig { n_layers: 1, ..config(NAT) }).is_err());
    assert!(ReorderNatParams::new(ModelConfig { reorder_layers: 2, n_layers: 3, ..config(NAT) }).is_err());
    assert!(ReorderNatParams::new(ModelConfig { head_count: 3, ..config(NAT) }).is_err());
    assert!(ReorderNatParams::new(ModelConfig { vocab_size: 5, ..config(NAT) }).is_err());
    assert!(ReorderNatParams::new(ModelConfig { temperature: 0.0, ..config(NAT) }).is_err());
    for a in ["reorder-nat", "reorder-at", "plain-nat", "teacher"] {
        assert_eq!(a.parse::<Architecture>().unwrap().to_string(), a);
    }
}

#[test]
fn encode_shapes_and_errors() {
    let m = model(NAT);
    let mut tape = Tape::new();
    let mut f = Forward::new(&mut tape, &m.store);
    let enc = m.encode(&mut f, &[7]).unwrap();
    assert_eq!(f.tape.dims(enc.s), (1, 8));
    assert!(matches!(m.encode(&mut f, &[]), Err(Error::Contract(_))));
    assert!(matches!(m.encode(&mut f, &[7, V]), Err(Error::Vocab(_))));
    assert!(matches!(m.encode(&mut f, &[7; 13]), Err(Error::Contract(_))));
}

#[test]
fn encoder_sees_word_order() {
    let m = model(NAT);
    let mut tape = Tape::new();
    let mut f = Forward::new(&mut tape, &m.store);
    let a = m.encode(&mut f, &[7, 8, 9]).unwrap();
    let b = m.encode(&mut f, &[8, 7, 9]).unwrap();
    assert_ne!(f.tape.value(a.s), f.tape.value(b.s));
}

fn projection_loss(tape: &mut Tape, v: Var) -> Var {
    let (r, c) = tape.dims(v);
    let w = tape.constant(r, c, (0..r * c).map(|i| ((i * 7 % 11) as f64 - 5.0) / 5.0).collect());
    let p = tape.mul(v, w).unwrap();
    tape.sum(p)
}

#[test]
fn encode_gradients() {
    let m = model(NAT);
    let report = grad_check_params(
        &m.store,
        |tape, store| {
            let mut f = Forward::new(tape, store);
            let enc = m.encode(&mut f, &[7, 8, 7, 10])?;
            Ok(projection_loss(f.tape, enc.s))
        },
        1e-5,
        1e-4,
        3,
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
}

#[test]
fn length_tie_break_and_arithmetic() {
    let mut m = model(NAT);
    let classes = m.config.length_classes();
    m.store.set("len.w", Tensor::zeros(vec![8, classes])).unwrap();
    m.store.set("len.b", Tensor::zeros(vec![1, classes])).unwrap();
    let mut tape = Tape::new();
    let mut f = Forward::new(&mut tape, &m.store);
    let enc = m.encode(&mut f, &[7, 8, 9, 10, 11, 12]).unwrap();
    let p = m.predict_length(&mut f, &enc).unwrap();
    assert_eq!(p.offset, -4);
    assert_eq!(p.length, 2);
    // n = 5, favour δ = +2
    let mut bias = vec![0.0; classes];
    bias[4 + 2] = 1.0;
    m.store.set("len.b", Tensor::matrix(1, classes, bias).unwrap()).unwrap();
    let mut tape = Tape::new();
    let mut f = Forward::new(&mut tape, &m.store);
    let enc = m.encode(&mut f, &[7, 8, 9, 10, 11]).unwrap();
    assert_eq!(m.predict_length(&mut f, &enc).unwrap().length, 7);
    assert_eq!(m.length_class(5, 7), 6);
    assert_eq!(m.length_class(5, 50), 8);
    assert_eq!(m.length_class(30, 1), 0);
}

#[test]
fn nat_reordering_is_restricted() {
    let m = model(NAT);
    let mut tape = Tape::new();
    let mut f = Forward::new(&mut tape, &m.store);
    let enc = m.encode(&mut f, &[7]).unwrap();
    let s = m.reorder_nonautoregressive(&mut f, &enc, 1).unwrap();
    assert_eq!(f.tape.dims(s), (1, 2));
    let q = f.tape.softmax(s, 1.0).unwrap();
    assert!((f.tape.value(q).iter().sum::<f64>() - 1.0).abs() < 1e-12);

    let x = [9, 7, 9, 12];
    let enc = m.encode(&mut f, &x).unwrap();
    let s = m.reorder_nonautoregressive(&mut f, &enc, 6).unwrap();
    assert_eq!(f.tape.dims(s), (6, 4));
    let vr = restricted_vocab(&x);
    for i in 0..6 {
        let tok = vr[argmax(f.tape.row(s, i))];
        assert!(tok == NULL || x.contains(&tok));
    }
    assert!(matches!(m.reorder_nonautoregressive(&mut f, &enc, 13), Err(Error::Contract(_))));
    assert!(m.reorder_at_forced(&mut f, &enc, &[9]).is_err());
}

#[test]
fn at_reordering_is_deterministic_and_restricted() {
    let m = model(AT);
    let x = [9, 7, 9, 12, 13];
    let run = || {
        let mut tape = Tape::new();
        let mut f = Forward::new(&mut tape, &m.store);
        let enc = m.encode(&mut f, &x).unwrap();
        let out = m.reorder_autoregressive(&mut f, &enc, 8).unwrap();
        let scores = f.tape.to_tensor(out.scores);
        (out.tokens, scores, out.truncated)
    };
    let (a, sa, ta) = run();
    let (b, sb, tb) = run();
    assert_eq!(a, b);
    assert_eq!(sa, sb);
    assert_eq!(ta, tb);
    assert!(!a.is_empty() && a.len() <= 8);
    assert_eq!(sa.shape(), &[a.len(), 5]);
    for t in &a {
        assert!(*t == NULL || x.contains(t));
    }
}

#[test]
fn at_forced_scores_match_greedy_prefix() {
    let m = model(AT);
    let x = [9, 7, 12];
    let mut tape = Tape::new();
    let mut f = Forward::new(&mut tape, &m.store);
    let enc = m.encode(&mut f, &x).unwrap();
    let greedy = m.reorder_autoregressive(&mut f, &enc, 5).unwrap();
    let forced = m.reorder_at_forced(&mut f, &enc, &greedy.tokens).unwrap();
    let k = restricted_vocab(&x).len();
    assert_eq!(f.tape.dims(forced), (greedy.tokens.len() + 1, k + 1));
    for i in 0..greedy.tokens.len() {
        let a = &f.tape.row(forced, i)[..k];
        let b = f.tape.row(greedy.scores, i);
        for (u, v) in a.iter().zip(b) {
            assert!((u - v).abs() < 1e-12);
        }
    }
}

#[test]
fn one_hot_guidance_reproduces_dgd_input() {
    let m = model(NAT);
    let x = [9, 7, 12];
    let vr = restricted_vocab(&x);
    let z = [12, NULL, 9];
    let mut tape = Tape::new();
    let mut f = Forward::new(&mut tape, &m.store);
    let mut q = vec![0.0; z.len() * vr.len()];
    for (i, t) in z.iter().enumerate() {
        q[i * vr.len() + vr.iter().position(|v| v == t).unwrap()] = 1.0;
    }
    let q = f.tape.constant(z.len(), vr.len(), q);
    let soft = m.ndgd_input(&mut f, q, &vr).unwrap();
    let hard = m.dgd_input(&mut f, &z).unwrap();
    assert_eq!(f.tape.value(soft), f.tape.value(hard));
}

#[test]
fn vanishing_temperature_reaches_dgd_input() {
    let m = model(NAT);
    let x = [9, 7, 12];
    let vr = restricted_vocab(&x);
    let scores = Tensor::matrix(2, 4, vec![0.5, 0.49, -1.0, 0.2, -3.0, 1.0, 1.01, 0.0]).unwrap();
    let g = guidance_from_scores(&scores, 1e-6, vr.clone()).unwrap();
    let z: Vec<usize> = (0..2).map(|r| vr[argmax(scores.row(r))]).collect();
    let mut tape = Tape::new();
    let mut f = Forward::new(&mut tape, &m.store);
    let q = f.tape.leaf(&g.q);
    let soft = m.ndgd_input(&mut f, q, &vr).unwrap();
    let hard = m.dgd_input(&mut f, &z).unwrap();
    let gap = f
        .tape
        .value(soft)
        .iter()
        .zip(f.tape.value(hard))
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(gap <= 1e-6, "gap {gap}");
}

#[test]
fn decoder_module_shapes() {
    let m = model(NAT);
    let mut tape = Tape::new();
    let mut f = Forward::new(&mut tape, &m.store);
    let enc = m.encode(&mut f, &[9, 7, 12]).unwrap();
    let input = m.dgd_input(&mut f, &[12, 9, 7, NULL]).unwrap();
    let logits = m.decoder_module(&mut f, input, &enc).unwrap();
    assert_eq!(f.tape.dims(logits), (4, V));
    let narrow = f.tape.constant(4, 6, vec![0.0; 24]);
    assert!(matches!(m.decoder_module(&mut f, narrow, &enc), Err(Error::Shape(_))));
}

#[test]
fn plain_nat_only_on_its_architecture() {
    let m = model(Architecture::PlainNat);
    let mut tape = Tape::new();
    let mut f = Forward::new(&mut tape, &m.store);
    let enc = m.encode(&mut f, &[9, 7, 12]).unwrap();
    let logits = m.plain_nat_forward(&mut f, &enc, 5).unwrap();
    assert_eq!(f.tape.dims(logits), (5, V));
    assert!(m.reorder_nonautoregressive(&mut f, &enc, 3).is_err());
    assert!(m.at_teacher_forward(&mut f, &enc, &[]).is_err());
}

#[test]
fn teacher_is_causal() {
    let m = model(Architecture::Teacher);
    let mut tape = Tape::new();
    let mut f = Forward::new(&mut tape, &m.store);
    let enc = m.encode(&mut f, &[9, 7, 12]).unwrap();
    let a = m.at_teacher_forward(&mut f, &enc, &[10, 11]).unwrap();
    let b = m.at_teacher_forward(&mut f, &enc, &[13, 14]).unwrap();
    assert_eq!(f.tape.dims(a), (3, V));
    assert_eq!(f.tape.row(a, 0), f.tape.row(b, 0));
    assert_ne!(f.tape.row(a, 1), f.tape.row(b, 1));
    assert!(m.length_logits(&mut f, &enc).is_err());
}

#[test]
fn census_differs_by_reordering_block_only() {
    let nat = model(NAT);
    let at = model(AT);
    let d = 8;
    let h = 12;
    let ln = 2 * d;
    let attn = 4 * (d * d + d) + ln;
    let ffn = d * h + h + h * d + d + ln;
    let transformer_block = 2 * attn + ffn;
    let gru_block = attn + 3 * (3 * d * d + d);
    assert_eq!(nat.census() as i64 - at.census() as i64, transformer_block as i64 - gru_block as i64);
    let plain = model(Architecture::PlainNat);
    assert_eq!(nat.census() - plain.census(), transformer_block + d * V + V);
    let total: usize = nat.census_by_component().iter().map(|(_, n)| n).sum();
    assert_eq!(total, nat.census());
}
