use gedi_core::checkpoint::{read_checkpoint, write_checkpoint};
use gedi_core::{ControlCodeSet, InitScheme, TabularCCLM, TokenId, Vocab};
use proptest::prelude::*;

fn model(size: usize, classes: usize, order: usize, binarized: bool, seed: u64) -> TabularCCLM {
    let names: Vec<String> = (0..size).map(|i| format!("w{i}")).collect();
    let class_names: Vec<String> = (0..classes).map(|i| format!("k{i}")).collect();
    let codes = if binarized {
        ControlCodeSet::binarized(&class_names).unwrap()
    } else {
        ControlCodeSet::new(&class_names).unwrap()
    };
    TabularCCLM::new(
        Vocab::new(&names).unwrap(),
        codes,
        order,
        InitScheme::Noise { sigma: 3.0 },
        seed,
    )
    .unwrap()
}

fn shape() -> impl Strategy<Value = (usize, usize, usize, bool, u64)> {
    (1usize..6, 2usize..4, 0usize..3, any::<bool>(), any::<u64>())
}

fn tokens(size: usize) -> impl Strategy<Value = Vec<TokenId>> {
    prop::collection::vec(0..size, 0..12)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn every_row_is_normalized((size, classes, order, _, seed) in shape(), path in prop::collection::vec(0usize..64, 0..6)) {
        let m = model(size, classes, order, false, seed);
        for c in 0..classes {
            let mut state = m.init_state(c).unwrap();
            for &t in &path {
                let lp = m.next_token_logprobs(&state);
                let total: f64 = lp.iter().map(|x| x.exp()).sum();
                prop_assert!((total - 1.0).abs() <= 1e-12, "row sums to {}", total);
                state = m.advance(&state, t % size).unwrap();
            }
        }
    }

    #[test]
    fn sequence_logprob_is_the_chain_rule_sum((size, classes, order, binarized, seed) in shape(), raw in tokens(64)) {
        let m = model(size, classes, order, binarized, seed);
        let xs: Vec<TokenId> = raw.iter().map(|t| t % size).collect();
        for c in 0..m.codes().len() {
            let (mut state, whole) = if binarized {
                (m.init_binarized_state(c, 1).unwrap(), m.sequence_logprob_binarized(c, 1, &xs).unwrap())
            } else {
                (m.init_state(c).unwrap(), m.sequence_logprob(c, &xs).unwrap())
            };
            let mut sum = 0.0;
            for &x in &xs {
                sum += m.next_token_logprobs(&state)[x];
                state = m.advance(&state, x).unwrap();
            }
            prop_assert_eq!(sum.to_bits(), whole.to_bits());
            prop_assert_eq!(state.cumulative_logprob().to_bits(), whole.to_bits());
            prop_assert_eq!(state.t(), xs.len());
        }
    }

    #[test]
    fn construction_is_deterministic((size, classes, order, binarized, seed) in shape()) {
        let a = model(size, classes, order, binarized, seed);
        let b = model(size, classes, order, binarized, seed);
        prop_assert!(a.logits().iter().zip(b.logits()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn checkpoints_round_trip_bitwise((size, classes, order, binarized, seed) in shape(), log_alpha in -3.0f64..3.0) {
        let mut m = model(size, classes, order, binarized, seed);
        m.set_log_alpha(log_alpha);
        let mut buf = Vec::new();
        write_checkpoint(&m, &mut buf).unwrap();
        let back = read_checkpoint(&buf[..]).unwrap();
        prop_assert_eq!(back.log_alpha().to_bits(), m.log_alpha().to_bits());
        prop_assert_eq!(back, m);
    }
}

#[test]
fn out_of_range_inputs_are_rejected() {
    let m = model(3, 2, 1, false, 1);
    assert!(m.init_state(2).is_err());
    assert!(m.sequence_logprob(0, &[0, 3]).is_err());
    let state = m.init_state(0).unwrap();
    assert!(m.advance(&state, m.vocab().bos()).is_err());
    assert!(m.advance(&state, m.vocab().pad()).is_err());
}
