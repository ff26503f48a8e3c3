use ndarray::{s, Array2};
use rand::Rng as _;

use super::batch::{classifier_batch, mlm_batch};
use super::gradcheck::gradient_check;
use super::model::*;
use super::params::{EncoderConfig, EncoderParameters};
use super::vocab::{self, build_vocabulary, Vocabulary};
use crate::data_model::tests::inst;
use crate::seed;

pub(crate) fn tiny_config(vocab_size: usize, layers: usize) -> EncoderConfig {
    EncoderConfig {
        d_model: 8,
        layers,
        heads: 2,
        ffn: 12,
        max_len: 32,
        vocab_size,
        num_labels: 3,
        ln_eps: 1e-5,
    }
}

/// Random parameters with a larger spread than the default init, so that
/// attention and GELU operate away from their linear regime.
pub(crate) fn rough_params(cfg: EncoderConfig, seed_value: u64) -> EncoderParameters {
    let mut p = EncoderParameters::init(cfg, seed_value).unwrap();
    let mut rng = seed::rng(seed_value, &[99]);
    for t in p.tensors_mut() {
        t.mapv_inplace(|x| x + rng.random_range(-0.3..0.3));
    }
    p
}

fn vocab() -> Vocabulary {
    build_vocabulary(
        "joe biden is the president of america paris france a b c d x".split(' '),
        1,
    )
}

#[test]
fn marks_paper_example() {
    let v = vocab();
    let i = inst("joe biden is the president of america", (0, 2), (6, 7), "r");
    let m = mark_instance(&i, &v, 128).unwrap();
    assert_eq!(m.h_index, 1);
    assert_eq!(m.t_index, 9);
    assert_eq!(m.ids[0], vocab::CLS);
    assert_eq!(m.ids[4], vocab::H_SEP);
    assert_eq!(m.ids[11], vocab::T_SEP);
    assert_eq!(*m.ids.last().unwrap(), vocab::SEP);
    assert_eq!(m.len(), 7 + 6);
    // Tail on "of" instead.
    let i = inst("joe biden is the president of america", (0, 2), (5, 6), "r");
    assert_eq!(mark_instance(&i, &v, 128).unwrap().t_index, 8);
}

#[test]
fn marks_reversed_order() {
    let v = vocab();
    let i = inst("paris is in france", (3, 4), (0, 1), "r");
    let m = mark_instance(&i, &v, 128).unwrap();
    assert_eq!(m.t_index, 1);
    assert_eq!(m.h_index, 6);
    assert_eq!(m.ids[m.h_index], vocab::H_CLS);
    assert_eq!(m.ids[m.t_index], vocab::T_CLS);
    assert_eq!(m.ids[3], vocab::T_SEP);
    assert_eq!(m.ids[8], vocab::H_SEP);
}

#[test]
fn marks_minimal_sentence_and_rejects_long() {
    let v = vocab();
    let i = inst("paris", (0, 1), (0, 1), "r");
    let m = mark_instance(&i, &v, 128).unwrap();
    assert_eq!(m.len(), 7);
    assert_eq!(m.ids[m.h_index], vocab::H_CLS);
    assert_eq!(m.ids[m.t_index], vocab::T_CLS);
    let long = inst(&vec!["a"; 200].join(" "), (0, 1), (2, 3), "r");
    let err = mark_instance(&long, &v, 128).unwrap_err();
    assert!(err.to_string().contains("sequence too long"));
}

#[test]
fn encode_shape_and_determinism() {
    let v = vocab();
    let cfg = EncoderConfig {
        vocab_size: v.len(),
        ..Default::default()
    };
    let p = EncoderParameters::init(cfg, 1).unwrap();
    let m = mark_instance(&inst("joe biden is the president of america", (0, 2), (6, 7), "r"), &v, 128).unwrap();
    let h1 = encode(&p, &m).unwrap();
    let h2 = encode(&p, &m).unwrap();
    assert_eq!(h1.dim(), (m.len(), 64));
    assert_eq!(h1, h2);
    assert_eq!(instance_representation(&p, &m).unwrap().len(), 128);

    let bad = MarkedSequence {
        ids: vec![2, v.len() as u32],
        h_index: 0,
        t_index: 0,
    };
    assert!(encode(&p, &bad).is_err());
}

#[test]
fn zero_embeddings_stay_finite() {
    let cfg = tiny_config(20, 2);
    let mut p = EncoderParameters::init(cfg, 1).unwrap();
    p.tok_emb.fill(0.0);
    p.pos_emb.fill(0.0);
    let h = forward(&p, &[2, 5, 9, 6, 7, 10, 8, 3]).unwrap();
    assert!(h.hidden().iter().all(|x| x.is_finite()));
}

#[test]
fn representation_is_marker_concatenation() {
    let cfg = tiny_config(20, 2);
    let p = rough_params(cfg, 4);
    let seq = MarkedSequence {
        ids: vec![2, 5, 9, 6, 10, 7, 11, 8, 3],
        h_index: 1,
        t_index: 5,
    };
    let h = encode(&p, &seq).unwrap();
    let x = instance_representation(&p, &seq).unwrap();
    assert_eq!(x.slice(s![..8]), h.row(1));
    assert_eq!(x.slice(s![8..]), h.row(5));
}

#[test]
fn zero_layers_depend_only_on_token_and_position() {
    let v = vocab();
    let cfg = tiny_config(v.len(), 0);
    let p = rough_params(cfg, 2);
    let a = mark_instance(&inst("a b c d", (0, 1), (2, 3), "r"), &v, 32).unwrap();
    let b = mark_instance(&inst("a x c x", (0, 1), (2, 3), "r"), &v, 32).unwrap();
    assert_ne!(a.ids, b.ids);
    assert_eq!(
        instance_representation(&p, &a).unwrap(),
        instance_representation(&p, &b).unwrap()
    );
}

#[test]
fn swapping_roles_swaps_halves_with_tied_markers() {
    let v = vocab();
    let cfg = tiny_config(v.len(), 2);
    let mut p = rough_params(cfg, 8);
    let hc = p.tok_emb.row(vocab::H_CLS as usize).to_owned();
    let hs = p.tok_emb.row(vocab::H_SEP as usize).to_owned();
    p.tok_emb.row_mut(vocab::T_CLS as usize).assign(&hc);
    p.tok_emb.row_mut(vocab::T_SEP as usize).assign(&hs);
    let fwd = mark_instance(&inst("paris is in france", (0, 1), (3, 4), "r"), &v, 32).unwrap();
    let rev = mark_instance(&inst("paris is in france", (3, 4), (0, 1), "r"), &v, 32).unwrap();
    let x = instance_representation(&p, &fwd).unwrap();
    let y = instance_representation(&p, &rev).unwrap();
    assert_eq!(x.slice(s![..8]), y.slice(s![8..]));
    assert_eq!(x.slice(s![8..]), y.slice(s![..8]));
}

fn mlm_example(targets: Vec<u32>) -> MaskedExample {
    MaskedExample {
        ids: vec![2, 4, 3],
        positions: vec![1; targets.len()],
        targets,
    }
}

#[test]
fn mlm_hand_values() {
    let cfg = tiny_config(9, 1);
    let mut p = EncoderParameters::init(cfg, 0).unwrap();
    p.mlm_w.fill(0.0);
    assert!((mlm_forward(&p, &mlm_example(vec![7])).unwrap() - 9f64.ln()).abs() < 1e-12);

    p.mlm_b[[0, 0]] = 2.0;
    let expected = -(2f64.exp() / (2f64.exp() + 8.0)).ln();
    assert!((mlm_forward(&p, &mlm_example(vec![0])).unwrap() - expected).abs() < 1e-12);

    p.mlm_b.fill(0.0);
    p.mlm_b[[0, 5]] = 1000.0;
    assert_eq!(mlm_forward(&p, &mlm_example(vec![5])).unwrap(), 0.0);

    let empty = MaskedExample {
        ids: vec![2, 4, 3],
        positions: vec![],
        targets: vec![],
    };
    assert_eq!(mlm_forward(&p, &empty).unwrap(), 0.0);
}

pub(crate) fn toy_mlm_batch(vocab_size: usize, seed_value: u64) -> Vec<MaskedExample> {
    let mut rng = seed::rng(seed_value, &[5]);
    // Two sequences of 10 regular tokens each, three targets apiece.
    (0..2)
        .map(|_| {
            let mut ids = vec![vocab::CLS];
            ids.extend((0..10).map(|_| rng.random_range(9..vocab_size as u32)));
            ids.push(vocab::SEP);
            let positions = vec![2, 5, 9];
            let targets = positions.iter().map(|_| rng.random_range(0..vocab_size as u32)).collect();
            for &p in &positions {
                ids[p] = vocab::MASK;
            }
            MaskedExample { ids, positions, targets }
        })
        .collect()
}

#[test]
fn mlm_gradient_matches_finite_differences() {
    for s in 0..2 {
        let cfg = tiny_config(16, 2);
        let p = rough_params(cfg, s);
        let batch = toy_mlm_batch(16, s);
        let rep = gradient_check(|q| mlm_batch(q, &batch), &p, s, 1e-5, 200).unwrap();
        assert!(rep.coordinates >= 200);
        assert!(rep.max_rel_error < 1e-4, "{rep:?}");
    }
}

#[test]
fn classifier_gradient_matches_finite_differences() {
    let cfg = tiny_config(16, 2);
    let p = rough_params(cfg, 11);
    let items = vec![
        (
            MarkedSequence { ids: vec![2, 5, 9, 6, 10, 7, 11, 8, 3], h_index: 1, t_index: 5 },
            0,
        ),
        (
            MarkedSequence { ids: vec![2, 7, 12, 8, 13, 14, 5, 15, 6, 3], h_index: 6, t_index: 1 },
            2,
        ),
    ];
    let rep = gradient_check(|q| classifier_batch(q, &items), &p, 3, 1e-5, 200).unwrap();
    assert!(rep.max_rel_error < 1e-4, "{rep:?}");
    // Also from the standard initialization.
    let p = EncoderParameters::init(cfg, 12).unwrap();
    let rep = gradient_check(|q| classifier_batch(q, &items), &p, 4, 1e-5, 200).unwrap();
    assert!(rep.max_rel_error < 1e-4, "{rep:?}");
}

#[test]
fn backward_accumulates_linearly() {
    let cfg = tiny_config(16, 1);
    let p = rough_params(cfg, 1);
    let cache = forward(&p, &[2, 9, 10, 3]).unwrap();
    let dh = Array2::from_elem((4, 8), 0.5);
    let mut g1 = p.zeros_like();
    backward(&p, &cache, &dh, &mut g1);
    let mut g2 = p.zeros_like();
    backward(&p, &cache, &dh, &mut g2);
    backward(&p, &cache, &dh, &mut g2);
    g1.scale(2.0);
    for (a, b) in g1.tensors().iter().zip(g2.tensors()) {
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()));
        }
    }
}
