use ltdqg_core::decoding::{greedy_decode, ModelScorer};
use ltdqg_core::model::{DecoderTrace, ModelConfig, ModelParams};
use ltdqg_core::training::div_loss;
use ltdqg_core::Tensor;
use proptest::prelude::*;

fn config(d_model: usize, n_heads: usize, layers: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: 30,
        d_model,
        n_heads,
        enc_layers: layers,
        dec_layers: layers,
        d_ff: 2 * d_model,
        max_len: 12,
        ..ModelConfig::default()
    }
}

fn ids(max: usize) -> impl Strategy<Value = Vec<u32>> {
    prop::collection::vec(4u32..30, 1..max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn shapes_hold_for_random_configs(
        d in prop::sample::select(vec![8usize, 16]),
        heads in 1usize..3,
        layers in 1usize..4,
        context in ids(8),
        question in ids(8),
    ) {
        let m = ModelParams::init(&config(d, heads, layers), 1).unwrap();
        let enc = m.encode(&context).unwrap();
        prop_assert_eq!(enc.states.shape(), &[context.len(), d][..]);
        let trace = m.decode_teacher_forced(&enc, &question).unwrap();
        prop_assert_eq!(trace.logits.shape(), &[question.len() + 1, 30][..]);
        prop_assert_eq!(trace.layer_states.len(), layers);
        for s in &trace.layer_states {
            prop_assert_eq!(s.shape(), &[question.len() + 1, d][..]);
        }
    }

    #[test]
    fn pads_leave_encoder_rows_and_logits_unchanged(context in ids(6), question in ids(6), pads in 1usize..5) {
        let m = ModelParams::init(&config(8, 2, 2), 4).unwrap();
        let pad = m.config().pad_id;
        let mut padded = context.clone();
        padded.extend(std::iter::repeat(pad).take(pads));
        let (a, b) = (m.encode(&context).unwrap(), m.encode(&padded).unwrap());
        for i in 0..context.len() {
            for (x, y) in a.states.row(i).iter().zip(b.states.row(i)) {
                prop_assert!((x - y).abs() < 1e-10);
            }
        }
        let ta = m.decode_teacher_forced(&a, &question).unwrap();
        let tb = m.decode_teacher_forced(&b, &question).unwrap();
        for (x, y) in ta.logits.data().iter().zip(tb.logits.data()) {
            prop_assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn log_likelihood_is_minus_token_count_times_cross_entropy(context in ids(8), question in ids(8)) {
        let m = ModelParams::init(&config(8, 2, 1), 6).unwrap();
        let ll = m.sequence_log_likelihood(&context, &question).unwrap();
        let enc = m.encode(&context).unwrap();
        let trace = m.decode_teacher_forced(&enc, &question).unwrap();
        let ce = ltdqg_core::training::cg_loss(&trace).unwrap();
        let count = trace.target_mask.iter().filter(|&&k| k).count() as f64;
        prop_assert!((ll + count * ce).abs() < 1e-10);
        prop_assert!(ll <= 0.0);
    }
}

#[test]
fn swapping_context_tokens_changes_encoder_states() {
    let m = ModelParams::init(&config(8, 2, 2), 2).unwrap();
    let a = m.encode(&[5, 6, 7, 8]).unwrap();
    let b = m.encode(&[6, 5, 7, 8]).unwrap();
    let diff = a.states.data().iter().zip(b.states.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(diff > 1e-6);
}

#[test]
fn greedy_rollout_from_step_scores_matches_greedy_decode() {
    let mut m = ModelParams::init(&config(16, 2, 2), 9).unwrap();
    for (i, t) in m.tensors_mut().iter_mut().enumerate() {
        for (j, x) in t.data_mut().iter_mut().enumerate() {
            *x += 0.3 * (((i * 131 + j * 17) % 23) as f64 / 11.0 - 1.0);
        }
    }
    let context = [5, 9, 13, 4];
    let enc = m.encode(&context).unwrap();
    let cfg = m.config().clone();
    let mut prefix = vec![cfg.bos_id];
    while prefix.len() < cfg.max_len {
        let lp = m.decode_step(&enc, &prefix).unwrap();
        assert!((lp.iter().map(|l| l.exp()).sum::<f64>() - 1.0).abs() < 1e-10);
        let mut best = None::<(usize, f64)>;
        for (t, &l) in lp.iter().enumerate() {
            if t as u32 == cfg.pad_id || t as u32 == cfg.bos_id {
                continue;
            }
            if best.map_or(true, |(_, b)| l > b) {
                best = Some((t, l));
            }
        }
        let tok = best.unwrap().0 as u32;
        prefix.push(tok);
        if tok == cfg.eos_id {
            break;
        }
    }
    let scorer = ModelScorer::new(&m, &context).unwrap();
    let greedy = greedy_decode(&scorer, 100).unwrap();
    assert_eq!(greedy, prefix[1..]);
    assert_eq!(greedy, greedy_decode(&scorer, 100).unwrap());
}

fn trace(layers: &[&[&[f64]]]) -> DecoderTrace {
    let rows = layers[0].len();
    DecoderTrace {
        layer_states: layers
            .iter()
            .map(|l| Tensor::from_rows(&l.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap())
            .collect(),
        logits: Tensor::zeros(vec![rows, 4]),
        targets: vec![1; rows],
        target_mask: vec![true; rows],
        // Row 0 is the BOS input and never pooled.
        pool_mask: (0..rows).map(|i| i > 0).collect(),
    }
}

#[test]
fn div_loss_on_constructed_states() {
    let bos: &[f64] = &[9.0, 9.0];
    let a = trace(&[&[bos, &[1.0, 0.0], &[1.0, 0.0]], &[bos, &[0.0, 2.0], &[0.0, 4.0]]]);
    let b = trace(&[&[bos, &[0.0, 1.0], &[0.0, 3.0]], &[bos, &[5.0, 0.0], &[1.0, 0.0]]]);
    assert!(div_loss(&a, &b).unwrap().abs() < 1e-12, "orthogonal at every layer");
    let c = trace(&[&[bos, &[2.0, 0.0], &[4.0, 0.0]], &[bos, &[1.0, 0.0], &[3.0, 0.0]]]);
    // Layer 1 cosine 1, layer 2 cosine 0.
    assert!((div_loss(&a, &c).unwrap() - 0.5).abs() < 1e-12);
    let one_layer = trace(&[&[bos, &[1.0, 0.0]]]);
    assert!(div_loss(&a, &one_layer).is_err());
}
