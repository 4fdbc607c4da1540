use gedi_core::eval::{accuracy_with, conditional_perplexity, Classifier};
use gedi_core::synth::{half_split, sample_corpus, LabeledCorpus, Provenance, Record, SourceSpec, Split};
use gedi_core::train::{
    class_posterior_offline, generative_loss, hybrid_loss, loss_gradients, train, TrainConfig, TrainingBatch,
    TrainingExample,
};
use gedi_core::{ControlCodeSet, InitScheme, TabularCCLM, TokenId, Vocab};
use proptest::prelude::*;

fn vocab(size: usize) -> Vocab {
    let names: Vec<String> = (0..size).map(|i| format!("w{i}")).collect();
    Vocab::new(&names).unwrap()
}

fn classes(c: usize) -> Vec<String> {
    (0..c).map(|i| format!("k{i}")).collect()
}

fn instance() -> impl Strategy<Value = (TabularCCLM, TrainingBatch)> {
    (2usize..5, 2usize..4, 0usize..2, any::<u64>(), -1.0f64..1.5).prop_flat_map(|(size, c, order, seed, log_alpha)| {
        let examples = prop::collection::vec((prop::collection::vec(0..size, 1..7), 0..c), 1..5);
        examples.prop_map(move |ex| {
            let mut m = TabularCCLM::new(
                vocab(size),
                ControlCodeSet::new(&classes(c)).unwrap(),
                order,
                InitScheme::Noise { sigma: 1.0 },
                seed,
            )
            .unwrap();
            m.set_log_alpha(log_alpha);
            let batch = TrainingBatch::new(ex.into_iter().map(|(t, y)| TrainingExample::standard(t, y)).collect());
            (m, batch)
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn gradients_match_finite_differences((model, batch) in instance(), lambda in 0.0f64..=1.0) {
        const H: f64 = 1e-5;
        let g = loss_gradients(&model, &batch, lambda).unwrap();
        let loss = |m: &TabularCCLM| hybrid_loss(m, &batch, lambda).unwrap().total;
        let rel = |a: f64, n: f64| (a - n).abs() / (a.abs() + n.abs()).max(1e-8);
        for i in 0..model.logits().len() {
            let (mut up, mut down) = (model.clone(), model.clone());
            up.logits_mut()[i] += H;
            down.logits_mut()[i] -= H;
            let fd = (loss(&up) - loss(&down)) / (2.0 * H);
            prop_assert!(rel(g.logits[i], fd) <= 1e-4, "logit {}: {} vs {}", i, g.logits[i], fd);
        }
        let (mut up, mut down) = (model.clone(), model.clone());
        up.set_log_alpha(model.log_alpha() + H);
        down.set_log_alpha(model.log_alpha() - H);
        let fd = (loss(&up) - loss(&down)) / (2.0 * H);
        prop_assert!(rel(g.log_alpha, fd) <= 1e-4, "log alpha: {} vs {}", g.log_alpha, fd);
    }

    #[test]
    fn hybrid_loss_is_affine_in_lambda((model, batch) in instance()) {
        let at = |l: f64| hybrid_loss(&model, &batch, l).unwrap();
        let (l0, l1, mid) = (at(0.0), at(1.0), at(0.3));
        prop_assert_eq!(l0.total, l0.discriminative);
        prop_assert_eq!(l1.total, l1.generative);
        prop_assert!((mid.total - (0.3 * l1.total + 0.7 * l0.total)).abs() <= 1e-12);
    }

    #[test]
    fn offline_posteriors_are_normalized((model, batch) in instance()) {
        for ex in &batch.examples {
            let p = class_posterior_offline(&model, &ex.tokens).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn perplexity_is_exp_generative_loss_for_equal_lengths(seed in any::<u64>(), len in 1usize..8, n in 1usize..6) {
        let m = TabularCCLM::new(vocab(3), ControlCodeSet::new(&classes(2)).unwrap(), 1, InitScheme::Noise { sigma: 1.0 }, seed).unwrap();
        let records: Vec<Record> = (0..n)
            .map(|i| Record {
                tokens: (0..len).map(|j| (i * 7 + j * 3 + seed as usize) % 3).collect(),
                class: i % 2,
                split: Split::Unsplit,
            })
            .collect();
        let batch = TrainingBatch::new(records.iter().map(|r| TrainingExample::standard(r.tokens.clone(), r.class)).collect());
        let corpus = LabeledCorpus {
            vocab: vocab(3),
            classes: classes(2),
            records,
            provenance: Provenance { source_hash: None, seed: None },
        };
        let ppl = conditional_perplexity(&m, &corpus).unwrap();
        let lg = generative_loss(&m, &batch).unwrap();
        prop_assert!((ppl - lg.exp()).abs() <= 1e-9 * ppl);
    }
}

#[test]
fn binarized_gradients_match_finite_differences() {
    const H: f64 = 1e-5;
    let codes = ControlCodeSet::binarized(&classes(3))
        .unwrap()
        .with_biases(&[0.2, -0.4])
        .unwrap();
    let model = TabularCCLM::new(vocab(3), codes, 1, InitScheme::Noise { sigma: 1.0 }, 8).unwrap();
    let ex = |tokens: Vec<TokenId>, class: usize, name: usize| TrainingExample {
        tokens,
        class,
        paired: Some(1 - class),
        name: Some(name),
    };
    let batch = TrainingBatch::new(vec![ex(vec![0, 1, 2], 0, 2), ex(vec![2, 2], 1, 0), ex(vec![1], 0, 1)]);
    let g = loss_gradients(&model, &batch, 0.4).unwrap();
    let loss = |m: &TabularCCLM| hybrid_loss(m, &batch, 0.4).unwrap().total;
    for c in 0..2 {
        let (mut up, mut down) = (model.clone(), model.clone());
        up.set_bias(c, model.biases()[c] + H).unwrap();
        down.set_bias(c, model.biases()[c] - H).unwrap();
        let fd = (loss(&up) - loss(&down)) / (2.0 * H);
        assert!((g.biases[c] - fd).abs() <= 1e-4 * (g.biases[c].abs() + fd.abs()).max(1e-8));
    }
    for i in 0..model.logits().len() {
        let (mut up, mut down) = (model.clone(), model.clone());
        up.logits_mut()[i] += H;
        down.logits_mut()[i] -= H;
        let fd = (loss(&up) - loss(&down)) / (2.0 * H);
        assert!((g.logits[i] - fd).abs() <= 1e-4 * (g.logits[i].abs() + fd.abs()).max(1e-8));
    }
}

#[test]
fn training_is_deterministic_and_keeps_alpha_positive() {
    let corpus = sample_corpus(&SourceSpec::s1(), 300, 4).unwrap();
    let init = TabularCCLM::new(
        corpus.vocab.clone(),
        ControlCodeSet::new(&corpus.classes).unwrap(),
        0,
        InitScheme::Zeros,
        0,
    )
    .unwrap();
    let cfg = TrainConfig {
        lambda: 0.2,
        epochs: 4,
        batch_size: 16,
        seed: 4,
        learn_bias: true,
        ..TrainConfig::default()
    };
    let (a, ha) = train(&init, &corpus, Some(&corpus), &cfg).unwrap();
    let (b, hb) = train(&init, &corpus, Some(&corpus), &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(ha, hb);
    assert!(a.alpha() > 0.0);
    assert_ne!(a.alpha(), 1.0);
    assert!(ha
        .iter()
        .all(|m| m.heldout_accuracy.is_some() && m.heldout_perplexity.is_some()));
}

#[test]
fn discriminative_weight_improves_heldout_accuracy_of_a_misspecified_model() {
    // order-0 models on the order-1 S2 source
    let spec = SourceSpec::s2(1);
    let corpus = sample_corpus(&spec, 4000, 1).unwrap();
    let (a, _, val) = half_split(&corpus, 1).unwrap();
    let init = TabularCCLM::new(
        a.vocab.clone(),
        ControlCodeSet::new(&a.classes).unwrap(),
        0,
        InitScheme::Zeros,
        0,
    )
    .unwrap();
    let run = |lambda: f64| {
        let cfg = TrainConfig {
            lambda,
            epochs: 12,
            batch_size: 50,
            seed: 1,
            ..TrainConfig::default()
        };
        let (m, _) = train(&init, &a, None, &cfg).unwrap();
        (
            accuracy_with(Classifier::Model(&m), &val).unwrap(),
            conditional_perplexity(&m, &val).unwrap(),
        )
    };
    let (acc_gen, ppl_gen) = run(1.0);
    for lambda in [0.25, 0.5, 0.75] {
        assert!(run(lambda).0 >= acc_gen, "λ = {lambda}");
    }
    assert!(ppl_gen <= run(0.05).1);
}

#[test]
fn binarized_training_runs_on_multiclass_data() {
    let corpus = sample_corpus(&SourceSpec::s2(3), 400, 3).unwrap();
    let init = TabularCCLM::new(
        corpus.vocab.clone(),
        ControlCodeSet::binarized(&corpus.classes).unwrap(),
        1,
        InitScheme::Zeros,
        0,
    )
    .unwrap();
    let cfg = TrainConfig {
        binarized: true,
        epochs: 3,
        ..TrainConfig::default()
    };
    let (m, history) = train(&init, &corpus, Some(&corpus), &cfg).unwrap();
    assert_eq!(history.len(), 3);
    let acc = accuracy_with(Classifier::Model(&m), &corpus).unwrap();
    assert!(acc > 0.25, "accuracy {acc} not above chance");
}
