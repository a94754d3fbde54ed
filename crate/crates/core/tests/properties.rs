mod common;

use las_core::attention::{expected_alignment, expected_chunk_attention, AttentionKind, Smoothing};
use las_core::data::Utterance;
use las_core::encoder::Direction;
use las_core::harness::{cer, levenshtein};
use las_core::model::Feedback;
use las_core::speller::{beam_search, DecodeOptions};
use las_core::training::{count_above, multitask_loss, utterance_loss, TrainRecipe};
use las_core::{rng, Graph, Tensor};
use proptest::prelude::*;
use rand::Rng as _;

use common::*;

fn probs(max_i: usize, max_u: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    (1..=max_i, 1..=max_u).prop_flat_map(|(i, u)| prop::collection::vec(prop::collection::vec(0.0..=1.0f64, u), i))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn softmax_normalises_and_ignores_shifts(z in prop::collection::vec(-30.0..30.0f64, 1..12), c in -50.0..50.0f64) {
        let mut g = Graph::inference();
        let a = g.constant_vec(z.clone());
        let shifted = g.constant_vec(z.iter().map(|x| x + c).collect());
        let p = g.softmax(a);
        let q = g.softmax(shifted);
        prop_assert!((g.value(p).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        for (x, y) in g.value(p).iter().zip(g.value(q)) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn edit_distance_is_symmetric(a in prop::collection::vec(0u8..4, 0..12), b in prop::collection::vec(0u8..4, 0..12)) {
        prop_assert_eq!(levenshtein(&a, &b), levenshtein(&b, &a));
        prop_assert!(levenshtein(&a, &b) <= a.len().max(b.len()));
        if !a.is_empty() {
            prop_assert_eq!(cer(&a, &a).unwrap(), 0.0);
        }
    }

    #[test]
    fn alignment_mass_never_exceeds_one(p in probs(5, 8), w in 1usize..5, d in prop::collection::vec(-3.0..3.0f64, 8)) {
        let alpha = expected_alignment(&p);
        for row in &alpha {
            let mass: f64 = row.iter().sum();
            prop_assert!(mass <= 1.0 + 1e-9, "mass {}", mass);
            let beta = expected_chunk_attention(row, &d[..row.len()], w);
            prop_assert!((beta.iter().sum::<f64>() - mass).abs() <= 1e-10);
        }
    }

    #[test]
    fn chunk_labels_are_positive_for_distributions(w in prop::collection::vec(0.0..1.0f64, 1..=100)) {
        let total: f64 = w.iter().sum();
        prop_assume!(total > 0.0);
        let row: Vec<f64> = w.iter().map(|x| x / total).collect();
        prop_assert!(count_above(&row, 0.01) >= 1);
    }

    #[test]
    fn multitask_loss_is_linear_in_lambda(ce in 0.0..10.0f64, pred in prop::collection::vec(0.0..20.0f64, 1..5)) {
        let targets: Vec<f64> = pred.iter().map(|p| p + 1.5).collect();
        let at = |lambda: f64| {
            let mut g = Graph::inference();
            let c = g.constant_vec(vec![ce]);
            let pv: Vec<_> = pred.iter().map(|&p| g.constant_vec(vec![p])).collect();
            let (total, _) = multitask_loss(&mut g, c, &pv, &targets, lambda).unwrap();
            g.scalar(total)
        };
        let (a, b, c) = (at(0.0), at(0.3), at(1.0));
        prop_assert!((b - (0.7 * a + 0.3 * c)).abs() <= 1e-12 * (1.0 + a.abs() + c.abs()));
    }
}

/// Changing raw frames from `k*Nc + Nc + Nr` on never changes the listener
/// rows produced for block `k`, for single layers and pyramid stacks.
#[test]
fn future_frames_never_reach_earlier_blocks() {
    let mut r = rng::stream(61, 0);
    for case in 0..40 {
        let (nc, nr) = [(4, 0), (4, 4), (8, 4), (8, 8), (12, 4)][case % 5];
        let pyramid = case % 2 == 1;
        let layers: &[(Direction, usize, bool)] = if pyramid {
            &[(Direction::LatencyControlled, 3, false), (Direction::LatencyControlled, 3, true)]
        } else {
            &[(Direction::LatencyControlled, 3, false)]
        };
        let mut m = tiny_model_lc(layers, AttentionKind::Gsa, Smoothing::None, 2, 2, case as u64, (nc, nr));
        rescale_params(&mut m.params, &mut r, 1.0);
        let s = if pyramid { 2 } else { 1 };
        let t = 30;
        let x = random_frames(&mut r, t, 2);
        let listen = |x: &Tensor| {
            let mut g = Graph::inference();
            let xv = g.constant(x);
            let h = m.encoder().listen(&mut g, &m.params, xv).unwrap();
            (g.value(h).to_vec(), g.shape(h)[1])
        };
        let (base, dim) = listen(&x);
        for k in 0..t.div_ceil(nc) {
            let cut = k * nc + nc + nr;
            if cut >= t {
                break;
            }
            let mut y = x.clone();
            for v in &mut y.data_mut()[cut * 2..] {
                *v = r.gen_range(-1.0..1.0);
            }
            let (changed, _) = listen(&y);
            let rows = (k * nc / s)..((k + 1) * nc / s);
            for u in rows {
                for j in 0..dim {
                    assert_eq!(base[u * dim + j], changed[u * dim + j], "case {case} block {k} row {u}");
                }
            }
        }
    }
}

/// Window 1 smoothing leaves training loss and decoding bit-identical.
#[test]
fn unit_window_smoothing_is_the_identity() {
    let utt = Utterance {
        id: "x".into(),
        frames: random_frames(&mut rng::stream(62, 0), 9, 3),
        targets: vec![3, 4, 3],
        durations: vec![3, 3, 3],
    };
    for (name, kind) in all_kinds().into_iter().skip(1) {
        let m = |smoothing| tiny_model(&[(Direction::Bi, 4, false)], kind, smoothing, 3, 2, 7);
        let run = |model: &las_core::model::Model| {
            let mut g = Graph::inference();
            let (_, stats) =
                utterance_loss(model, &mut g, &utt, None, &TrainRecipe::default(), &mut Feedback::teacher_forced()).unwrap();
            let d = beam_search(model, &utt.frames, &DecodeOptions::default()).unwrap();
            (stats.loss.to_bits(), d.tokens, d.score.to_bits())
        };
        let plain = run(&m(Smoothing::None));
        assert_eq!(run(&m(Smoothing::M1 { w: 1 })), plain, "{name} M1");
        assert_eq!(run(&m(Smoothing::M2 { w: 1 })), plain, "{name} M2");
    }
}

/// Best score found as the beam widens, over 100 random models.
#[test]
fn wider_beams_never_score_worse() {
    let mut r = rng::stream(63, 0);
    let kinds = all_kinds();
    let mut regressions = Vec::new();
    for case in 0..100u64 {
        let (name, kind) = kinds[case as usize % kinds.len()];
        let mut m = tiny_model(&[(Direction::Bi, 4, false)], kind, Smoothing::None, 3, 3, 200 + case);
        rescale_params(&mut m.params, &mut r, 1.5);
        let t = r.gen_range(3..=8);
        let x = random_frames(&mut r, t, 3);
        let mut prev = f64::NEG_INFINITY;
        for beam in 1..=6 {
            let opts = DecodeOptions {
                beam,
                max_len: Some(6),
                ..DecodeOptions::default()
            };
            let score = beam_search(&m, &x, &opts).unwrap().score;
            if score < prev - 1e-12 {
                regressions.push(format!("model {case} ({name}): beam {beam} {score} < {prev}"));
            }
            prev = prev.max(score);
        }
    }
    assert!(regressions.is_empty(), "{} regressions:\n{}", regressions.len(), regressions.join("\n"));
}
