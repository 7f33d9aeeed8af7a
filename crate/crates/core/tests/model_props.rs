mod common;

use common::*;
use mmd_core::model::Model;
use mmd_core::tensor::Graph;
use mmd_core::textnum::{MixedSequence, Modality, NumberCodec, NumberScheme, BOS, EOS, NUM};
use mmd_core::train::{composite_loss_graph, Labels, LossWeights, TrainConfig, Trainer};
use proptest::prelude::*;

fn tiny(scheme: NumberScheme, seed: u64) -> Model {
    Model::new(micro_config(scheme, 8, 12), seed).unwrap()
}

fn seq_strategy() -> impl Strategy<Value = Vec<(usize, f64)>> {
    prop::collection::vec(
        prop_oneof![(5usize..12).prop_map(|t| (t, 0.0)), (-100.0..100.0f64).prop_map(|v| (NUM, v))],
        1..6,
    )
}

fn with_bos(items: &[(usize, f64)]) -> MixedSequence {
    let mut all = vec![(BOS, 0.0)];
    all.extend_from_slice(items);
    seq(&all)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn decoder_rows_ignore_later_positions(
        src in seq_strategy(),
        tgt in seq_strategy(),
        cut in 0usize..6,
        seed in 0u64..4,
    ) {
        let model = tiny(NumberScheme::Mmd, seed);
        let src = with_bos(&src);
        let a = with_bos(&tgt);
        let cut = cut.min(a.len() - 1);
        // Replace every position after `cut` with something else.
        let mut items: Vec<(usize, f64)> = (0..=cut)
            .map(|i| (a.token_ids()[i], a.values()[i]))
            .collect();
        for i in cut + 1..a.len() {
            items.push(if a.modality()[i] == Modality::Number { (7, 0.0) } else { (NUM, 42.0) });
        }
        let b = seq(&items);
        let oa = model.forward(&src, &a).unwrap();
        let ob = model.forward(&src, &b).unwrap();
        let v = 12;
        for i in 0..=cut {
            prop_assert_eq!(&oa.text_logits.data()[i * v..(i + 1) * v], &ob.text_logits.data()[i * v..(i + 1) * v]);
            prop_assert_eq!(&oa.route_logits.data()[i * 2..i * 2 + 2], &ob.route_logits.data()[i * 2..i * 2 + 2]);
            prop_assert_eq!(oa.num_preds.data()[i], ob.num_preds.data()[i]);
        }
    }

    #[test]
    fn xval_embedding_is_linear_in_the_value(a in -50.0..50.0f64, b in -50.0..50.0f64, seed in 0u64..8) {
        let model = tiny(NumberScheme::XVal, seed);
        let e = |v: f64| model.embed_content(&seq(&[(NUM, v)])).unwrap().into_data();
        let (ea, eb, eab) = (e(a), e(b), e(a + b));
        for j in 0..ea.len() {
            prop_assert!((eab[j] - ea[j] - eb[j]).abs() <= 1e-12 * (1.0 + eab[j].abs()));
        }
    }
}

#[test]
fn same_seed_same_model_and_outputs() {
    let src = seq(&[(BOS, 0.0), (6, 0.0), (NUM, 3.0), (EOS, 0.0)]);
    let tgt = seq(&[(BOS, 0.0), (NUM, 1.0), (EOS, 0.0)]);
    let a = tiny(NumberScheme::MmdLog, 9);
    let b = tiny(NumberScheme::MmdLog, 9);
    assert_eq!(a, b);
    assert_eq!(a.forward(&src, &tgt).unwrap(), b.forward(&src, &tgt).unwrap());
    assert_ne!(a.params(), tiny(NumberScheme::MmdLog, 10).params());
}

#[test]
fn mlp_encoder_keeps_close_numbers_close_at_init() {
    for seed in 0..10 {
        let model = Model::new(micro_config(NumberScheme::Mmd, 64, 12), seed).unwrap();
        let e = |v: f64| model.embed_content(&seq(&[(NUM, v)])).unwrap().into_data();
        let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let (one, near, two) = (e(1.0), e(1.0001), e(2.0));
        assert!(dist(&one, &near) < dist(&one, &two), "seed {seed}");
        assert!(dist(&one, &near) > 0.0, "seed {seed}");
    }
}

fn param_grads(model: &Model, src: &MixedSequence, tgt: &MixedSequence, w: LossWeights) -> Vec<(String, Vec<f64>)> {
    let mut g = Graph::new();
    let b = model.bind(&mut g, true);
    let heads = model.forward_graph(&mut g, &b, &[(src, tgt)]).unwrap();
    let labels = Labels::new(&[tgt], model.config().scheme);
    let [total, ..] = composite_loss_graph(&mut g, heads, &labels, w).unwrap();
    g.backward(total).unwrap();
    model
        .params()
        .names()
        .iter()
        .zip(b.vars())
        .map(|(n, v)| (n.clone(), g.grad(*v).map(<[f64]>::to_vec).unwrap_or_default()))
        .collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[test]
fn number_encoder_receives_gradient() {
    let model = tiny(NumberScheme::Mmd, 2);
    let src = seq(&[(BOS, 0.0), (NUM, 12.5), (EOS, 0.0)]);
    let tgt = seq(&[(BOS, 0.0), (NUM, 3.0), (EOS, 0.0)]);
    let w = LossWeights { route: 1.0, num: 1.0 };
    for (name, grad) in param_grads(&model, &src, &tgt, w) {
        if name.starts_with("numenc.") {
            assert!(norm(&grad) > 0.0, "{name} has zero gradient");
        }
    }
}

#[test]
fn number_positions_do_not_train_the_text_head() {
    let model = tiny(NumberScheme::Mmd, 2);
    let src = seq(&[(BOS, 0.0), (6, 0.0), (EOS, 0.0)]);
    let tgt = seq(&[(BOS, 0.0), (NUM, 3.0)]);
    let w = LossWeights { route: 0.0, num: 0.0 };
    for (name, grad) in param_grads(&model, &src, &tgt, w) {
        assert_eq!(norm(&grad), 0.0, "{name} moved with every weighted term masked or zero");
    }
    let w = LossWeights { route: 1.0, num: 1.0 };
    for (name, grad) in param_grads(&model, &src, &tgt, w) {
        if name.starts_with("head.text") {
            assert_eq!(norm(&grad), 0.0, "{name}");
        }
    }
}

#[test]
fn overfits_a_single_pair() {
    let src = seq(&[(BOS, 0.0), (5, 0.0), (NUM, 2.0), (6, 0.0), (EOS, 0.0)]);
    let tgt = seq(&[(BOS, 0.0), (9, 0.0), (NUM, 4.5), (EOS, 0.0)]);
    let model = Model::new(micro_config(NumberScheme::Mmd, 16, 12), 0).unwrap();
    let cfg = TrainConfig {
        lr: 1e-2,
        batch_size: 1,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(model, cfg).unwrap();
    let pair = (src.clone(), tgt.clone());
    for _ in 0..300 {
        trainer.step(&[&pair]).unwrap();
    }
    let out = trainer.model().generate(&src, NumberCodec::Identity, 10).unwrap();
    assert!(!out.truncated);
    assert_eq!(out.seq.token_ids(), &[9, NUM]);
    assert!((out.seq.values()[1] - 4.5).abs() < 0.05, "{:?}", out.seq.values());
}

#[test]
fn word_level_never_emits_numbers() {
    for seed in 0..5 {
        let model = tiny(NumberScheme::WordLevel, seed);
        let src = seq(&[(BOS, 0.0), (6, 0.0), (7, 0.0), (EOS, 0.0)]);
        let out = model.generate(&src, NumberCodec::Identity, 20).unwrap();
        assert!(out.seq.modality().iter().all(|m| *m == Modality::Text));
        assert!(!out.seq.token_ids().contains(&NUM));
        assert!(!out.seq.token_ids().contains(&EOS));
    }
}
