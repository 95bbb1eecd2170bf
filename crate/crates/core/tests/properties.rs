use pabridge_core::aligner::beta_from_probability;
use pabridge_core::discretizer::{CodebookSet, SemanticCode, LEVELS};
use pabridge_core::evalsim::{auc, exposure_concentration, recall_at_k};
use pabridge_core::numcore::{grad_check, numeric_gradient, Tape, Tensor2};
use pabridge_core::popstats::FrequencyTable;
use pabridge_core::synthworld::{read_event_log, read_embeddings, write_embeddings, write_event_log, zipf_weights, Domain, InteractionEvent};
use pabridge_core::towers::{base_loss, TrainBatch, TwoTowerParams};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn scores_and_labels() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
    (2usize..40).prop_flat_map(|n| {
        (
            prop::collection::vec(-100.0f64..100.0, n),
            prop::collection::vec(0u8..=1, n).prop_filter("both classes", |l| l.contains(&0) && l.contains(&1)),
        )
    })
}

fn tensor(rows: usize, cols: usize) -> impl Strategy<Value = Tensor2> {
    prop::collection::vec(-2.0f64..2.0, rows * cols).prop_map(move |d| Tensor2::new(rows, cols, d).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn auc_in_unit_interval_and_monotone_invariant((s, l) in scores_and_labels()) {
        let a = auc(&s, &l).unwrap();
        prop_assert!((0.0..=1.0).contains(&a));
        let warped: Vec<f64> = s.iter().map(|x| (x / 50.0).exp() * 3.0 + 1.0).collect();
        prop_assert!((auc(&warped, &l).unwrap() - a).abs() < 1e-12);
        let flipped: Vec<f64> = s.iter().map(|x| -x).collect();
        prop_assert!((auc(&flipped, &l).unwrap() - (1.0 - a)).abs() < 1e-12);
    }

    #[test]
    fn concentration_nondecreasing(counts in prop::collection::vec(0.0f64..50.0, 1..200), f1 in 0.001f64..1.0, f2 in 0.001f64..1.0) {
        prop_assume!(counts.iter().sum::<f64>() > 0.0);
        let (lo, hi) = if f1 <= f2 { (f1, f2) } else { (f2, f1) };
        let a = exposure_concentration(&counts, lo).unwrap();
        let b = exposure_concentration(&counts, hi).unwrap();
        prop_assert!(a <= b + 1e-12);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&b));
        prop_assert!((exposure_concentration(&counts, 1.0).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn recall_nondecreasing_in_k(ranked in Just((0..30usize).collect::<Vec<_>>()).prop_shuffle(), relevant in prop::collection::vec(0usize..30, 1..5), k in 1usize..30) {
        let r1 = recall_at_k(&ranked, &relevant, k).unwrap();
        let mut distinct = relevant.clone();
        distinct.sort_unstable();
        distinct.dedup();
        let r2 = recall_at_k(&ranked, &relevant, k + 1).unwrap();
        prop_assert!((0.0..=1.0).contains(&r1));
        // the denominator min(K, |rel|) grows with K only while K < |rel|
        if k >= distinct.len() {
            prop_assert!(r1 <= r2 + 1e-12);
        }
        prop_assert!((recall_at_k(&ranked, &relevant, 30).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn beta_is_affine_in_probability(p in 0.0f64..=1.0, q in 0.0f64..=1.0, t in 0.0f64..=1.0) {
        let mix = t * p + (1.0 - t) * q;
        let lhs = beta_from_probability(mix);
        let rhs = t * beta_from_probability(p) + (1.0 - t) * beta_from_probability(q);
        prop_assert!((lhs - rhs).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&lhs));
    }

    #[test]
    fn zipf_normalised(n in 1usize..2000, s in 0.0f64..3.0) {
        let w = zipf_weights(n, s);
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(w.windows(2).all(|p| p[0] >= p[1]));
    }

    #[test]
    fn quantize_decomposes_input(seed in any::<u64>(), z in prop::collection::vec(-3.0f64..3.0, 4)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let levels: [Tensor2; LEVELS] = std::array::from_fn(|_| {
            let mut t = Tensor2::random_normal(6, 4, 1.0, &mut rng);
            t.row_mut(0).fill(0.0);
            t
        });
        let books = CodebookSet::from_codewords(levels).unwrap();
        let q = books.quantize(&z).unwrap();
        for ((x, r), c) in z.iter().zip(&q.residual).zip(&q.reconstruction) {
            prop_assert!((x - (r + c)).abs() < 1e-12);
        }
        prop_assert_eq!(books.reconstruct(&q.code).unwrap(), q.reconstruction.clone());
        let norms = books.residual_norms(&z).unwrap();
        prop_assert!(norms.windows(2).all(|w| w[1] <= w[0] + 1e-12));
    }

    #[test]
    fn joint_probabilities_sum_to_one(codes in prop::collection::vec((0u32..3, 0u32..2, 0u32..2), 0..60), alpha in 0.01f64..2.0, gamma in 0.5f64..=1.0) {
        let mut table = FrequencyTable::new([3, 2, 2], gamma, alpha).unwrap();
        let codes: Vec<SemanticCode> = codes.into_iter().map(|(a, b, c)| SemanticCode::new(a, b, c)).collect();
        for chunk in codes.chunks(7) {
            table.update(chunk).unwrap();
        }
        let mut total = 0.0;
        for a in 0..3 { for b in 0..2 { for c in 0..2 {
            total += table.probability(&SemanticCode::new(a, b, c)).unwrap();
        }}}
        prop_assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn base_loss_invariant_to_batch_order(seed in any::<u64>(), perm in Just((0..6usize).collect::<Vec<_>>()).prop_shuffle()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = TwoTowerParams::new(5, 4, &[6], 0.1, true, &mut rng).unwrap();
        let batch = TrainBatch::new(
            Tensor2::random_normal(6, 5, 1.0, &mut rng),
            Tensor2::random_normal(6, 4, 1.0, &mut rng),
            vec![Domain::Starter; 6],
        ).unwrap();
        let a = base_loss(&batch, &params).unwrap();
        let b = base_loss(&batch.permuted(&perm).unwrap(), &params).unwrap();
        prop_assert!((a - b).abs() < 1e-10);
    }

    #[test]
    fn gradients_are_linear(x in tensor(3, 4), w in tensor(4, 2), a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let l1 = |t: &mut Tape, v: &[pabridge_core::Var]| {
            let h = t.matmul(v[0], v[1])?;
            let h = t.tanh(h)?;
            t.sum(h)
        };
        let l2 = |t: &mut Tape, v: &[pabridge_core::Var]| {
            let h = t.matmul(v[0], v[1])?;
            let h = t.sigmoid(h)?;
            t.mean(h)
        };
        let grads = |f: &dyn Fn(&mut Tape, &[pabridge_core::Var]) -> pabridge_core::Result<pabridge_core::Var>| {
            let mut tape = Tape::new();
            let vars = tape.leaves(&[&x, &w]);
            let loss = f(&mut tape, &vars).unwrap();
            tape.backward(loss).unwrap().collect(&vars)
        };
        let combo = |t: &mut Tape, v: &[pabridge_core::Var]| {
            let p = l1(t, v)?;
            let q = l2(t, v)?;
            let p = t.affine(p, a, 0.0)?;
            let q = t.affine(q, b, 0.0)?;
            t.add(p, q)
        };
        let g1 = grads(&l1);
        let g2 = grads(&l2);
        let g = grads(&combo);
        for i in 0..2 {
            let expect = g1[i].scale(a).add(&g2[i].scale(b)).unwrap();
            prop_assert!(g[i].max_abs_diff(&expect) < 1e-12);
        }
        prop_assert!(grad_check(combo, &[x.clone(), w.clone()], 1e-5).unwrap() < 1e-4);
        prop_assert!(numeric_gradient(&l1, &[x.clone(), w.clone()], 1e-5).is_ok());
    }

    #[test]
    fn event_log_round_trips(events in prop::collection::vec((0usize..50, any::<bool>(), 0usize..10, prop::collection::vec(-1e3f64..1e3, 3)), 0..20)) {
        let events: Vec<InteractionEvent> = events
            .into_iter()
            .enumerate()
            .map(|(ts, (user_id, active, s, q))| InteractionEvent {
                user_id,
                domain: if active { Domain::Active } else { Domain::Starter },
                starter_id: (!active).then_some(s),
                label: u8::from(active || s % 2 == 0),
                timestamp: ts as u64,
                query_embedding: q,
            })
            .collect();
        let mut buf = Vec::new();
        write_event_log(&mut buf, &events).unwrap();
        prop_assert_eq!(buf.iter().filter(|b| **b == b'\n').count(), events.len());
        prop_assert_eq!(read_event_log(buf.as_slice()).unwrap(), events);
    }

    #[test]
    fn embeddings_round_trip_at_single_precision(t in (1usize..8, 1usize..6).prop_flat_map(|(r, c)| tensor(r, c))) {
        let mut buf = Vec::new();
        write_embeddings(&mut buf, &t).unwrap();
        let back = read_embeddings(buf.as_slice()).unwrap();
        prop_assert_eq!(back.shape(), t.shape());
        prop_assert!(back.max_abs_diff(&t) <= 2.0 * f32::EPSILON as f64);
    }
}
