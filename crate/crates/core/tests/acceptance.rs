//! End-to-end acceptance checks. Each test prints one PASS/FAIL line.
//!
//! Run with `cargo test -p pabridge-core --test acceptance`.

use std::io::Write;
use std::time::{Duration, Instant};

use pabridge_core::aligner::{
    adv_losses_tape, discriminator_accuracy, train_alignment, AlignConfig, AlignerParams, AlignerVars,
};
use pabridge_core::discretizer::{fit_rqvae, CodebookSet, RqConfig, SemanticCode, LEVELS};
use pabridge_core::evalsim::{offline_comparison, run_loop, write_loop_csv, LoopConfig, Policy, RunMeta};
use pabridge_core::mmd::{median_bandwidth, mmd2_rbf};
use pabridge_core::numcore::{grad_check, squared_distance, MlpVars, Tensor2};
use pabridge_core::popstats::{debiased_loss, debiased_loss_from_params, FrequencyTable};
use pabridge_core::rng::substream;
use pabridge_core::synthworld::{generate_world, sample_events, Domain, WorldConfig};
use pabridge_core::towers::{base_loss, base_loss_tape, TowerVars, TrainBatch, TwoTowerParams};
use pabridge_core::trainer::{read_checkpoint, write_checkpoint, TrainConfig, TrainState, Variant};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

// written to the raw handle so the line shows without --nocapture
fn verdict(id: u32, name: &str, pass: bool, detail: String) {
    let line = format!("criterion {id} [{name}]: {} ({detail})\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().lock().write_all(line.as_bytes());
}

fn random_towers(rng: &mut ChaCha8Rng, user_dim: usize, dim: usize, normalize: bool) -> TwoTowerParams {
    let mut p = TwoTowerParams::new(user_dim, dim, &[6], 0.05 + rng.random::<f64>(), normalize, rng).unwrap();
    // move the query head off the identity so every tensor matters
    for t in p.tensors_mut() {
        *t = t.add(&Tensor2::random_normal(t.rows(), t.cols(), 0.2, rng)).unwrap();
    }
    p
}

fn random_batch(rng: &mut ChaCha8Rng, b: usize, user_dim: usize, dim: usize) -> TrainBatch {
    let domains = (0..b).map(|i| if i % 3 == 0 { Domain::Active } else { Domain::Starter }).collect();
    TrainBatch::new(
        Tensor2::random_normal(b, user_dim, 1.0, rng),
        Tensor2::random_normal(b, dim, 1.0, rng),
        domains,
    )
    .unwrap()
}

fn tower_vars(v: &[pabridge_core::Var], n_user: usize) -> TowerVars {
    TowerVars {
        user: MlpVars { vars: v[..n_user].to_vec() },
        query: MlpVars { vars: v[n_user..].to_vec() },
    }
}

#[test]
fn c1_gradient_correctness() {
    let start = Instant::now();
    let instances = 20;
    let mut worst = [0.0_f64; 4];
    for i in 0..instances {
        let mut rng = substream(i, "acceptance/grad");
        let b = rng.random_range(2..=8);
        let dim = rng.random_range(2..=16);
        let user_dim = rng.random_range(2..=16);
        let normalize = i % 2 == 0;
        let params = random_towers(&mut rng, user_dim, dim, normalize);
        let mut batch = random_batch(&mut rng, b, user_dim, dim);
        let n_user = params.user_tower.tensors().len();
        let flat: Vec<Tensor2> = params.tensors().into_iter().cloned().collect();

        let e = grad_check(
            |tape, v| base_loss_tape(tape, &tower_vars(v, n_user), &batch, &params),
            &flat,
            1e-5,
        )
        .unwrap();
        worst[0] = worst[0].max(e);

        let mut table = FrequencyTable::new([4, 3, 2], 0.99, 0.1).unwrap();
        let codes: Vec<SemanticCode> = (0..b)
            .map(|_| SemanticCode::new(rng.random_range(0..4), rng.random_range(0..3), rng.random_range(0..2)))
            .collect();
        table.update(&codes[..b / 2 + 1]).unwrap();
        batch.codes = codes.into_iter().map(Some).collect();
        batch.betas = (0..b).map(|_| rng.random::<f64>()).collect();
        let e = grad_check(
            |tape, v| debiased_loss_from_params(tape, &tower_vars(v, n_user), &batch, &params, &table),
            &flat,
            1e-5,
        )
        .unwrap();
        worst[3] = worst[3].max(e);

        let mut aligner = AlignerParams::new(dim, &[rng.random_range(2..=8)], &[rng.random_range(2..=8)], &mut rng).unwrap();
        for t in aligner.generator.tensors_mut() {
            *t = t.add(&Tensor2::random_normal(t.rows(), t.cols(), 0.3, &mut rng)).unwrap();
        }
        let active = Tensor2::random_normal(rng.random_range(1..=8), dim, 1.0, &mut rng);
        let starter = Tensor2::random_normal(rng.random_range(1..=8), dim, 1.0, &mut rng);
        let ng = aligner.generator.tensors().len();
        let flat: Vec<Tensor2> = aligner.generator.tensors().into_iter().chain(aligner.discriminator.tensors()).cloned().collect();
        for which in [0usize, 1] {
            let e = grad_check(
                |tape, v| {
                    let vars = AlignerVars {
                        generator: MlpVars { vars: v[..ng].to_vec() },
                        discriminator: MlpVars { vars: v[ng..].to_vec() },
                    };
                    let a = tape.leaf(active.clone());
                    let s = tape.leaf(starter.clone());
                    let (ld, lg) = adv_losses_tape(tape, &aligner, &vars, a, s)?;
                    Ok(if which == 0 { ld } else { lg })
                },
                &flat,
                1e-5,
            )
            .unwrap();
            worst[1 + which] = worst[1 + which].max(e);
        }
    }
    let elapsed = start.elapsed();
    let pass = worst.iter().all(|e| *e < 1e-4) && elapsed < Duration::from_secs(30);
    verdict(
        1,
        "gradient correctness",
        pass,
        format!(
            "{instances} instances; max rel err base {:.1e}, L_D {:.1e}, L_G {:.1e}, debiased {:.1e}; {:.1?}",
            worst[0], worst[1], worst[2], worst[3], elapsed
        ),
    );
    assert!(pass);
}

#[test]
fn c2_debias_neutrality() {
    let mut worst = 0.0_f64;
    for i in 0..100 {
        let mut rng = substream(i, "acceptance/neutral");
        let b = rng.random_range(2..=32);
        let dim = rng.random_range(2..=16);
        let user_dim = rng.random_range(2..=16);
        let params = random_towers(&mut rng, user_dim, dim, i % 2 == 0);
        let mut batch = random_batch(&mut rng, b, user_dim, dim);
        let sizes = [rng.random_range(1..=8), rng.random_range(1..=8), rng.random_range(1..=8)];
        // no observations: every code has probability alpha / (alpha V) = 1/V
        let table = FrequencyTable::new(sizes, 0.999, 0.5).unwrap();
        batch.codes = (0..b)
            .map(|_| {
                Some(SemanticCode::new(
                    rng.random_range(0..sizes[0] as u32),
                    rng.random_range(0..sizes[1] as u32),
                    rng.random_range(0..sizes[2] as u32),
                ))
            })
            .collect();
        let d = (debiased_loss(&batch, &params, &table).unwrap() - base_loss(&batch, &params).unwrap()).abs();
        worst = worst.max(d);
    }
    let pass = worst < 1e-9;
    verdict(2, "debias neutrality", pass, format!("max |debiased - base| = {worst:.2e} over 100 batches"));
    assert!(pass);
}

#[test]
fn c3_quantizer_oracle() {
    let mut rng = substream(3, "acceptance/quantizer");
    let dim = 8;
    let k = 16;
    let random_books = |rng: &mut ChaCha8Rng, pinned: bool| {
        let levels: [Tensor2; LEVELS] = std::array::from_fn(|l| {
            let mut t = Tensor2::random_normal(k, dim, 1.0 / (l + 1) as f64, rng);
            if pinned {
                t.row_mut(0).fill(0.0);
            }
            t
        });
        CodebookSet::from_codewords(levels).unwrap()
    };

    let books = random_books(&mut rng, false);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let z: Vec<f64> = (0..dim).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
        let q = books.quantize(&z).unwrap();
        let mut r = z.clone();
        for l in 0..LEVELS {
            let cb = &books.levels[l].codewords;
            let best = (0..k)
                .min_by(|&a, &b| squared_distance(&r, cb.row(a)).total_cmp(&squared_distance(&r, cb.row(b))))
                .unwrap();
            if best != q.code.level(l) {
                mismatches += 1;
            }
            for (x, c) in r.iter_mut().zip(cb.row(best)) {
                *x -= c;
            }
        }
    }

    let pinned = random_books(&mut rng, true);
    let mut monotone = 0;
    for _ in 0..1000 {
        let z: Vec<f64> = (0..dim).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
        let norms = pinned.residual_norms(&z).unwrap();
        let z_norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
        let ok = norms[0] <= z_norm + 1e-12 && norms.windows(2).all(|w| w[1] <= w[0] + 1e-12);
        monotone += usize::from(ok);
    }

    let n = 32;
    let points = Tensor2::random_normal(n, dim, 1.0, &mut rng);
    let cfg = RqConfig {
        k: n,
        active_levels: 1,
        pin_zero: false,
        epochs: 30,
        ..RqConfig::default()
    };
    let (_, report) = fit_rqvae(&[points], &cfg, &mut rng).unwrap();
    let mse = *report.epoch_mse.last().unwrap();

    let pass = mismatches == 0 && monotone == 1000 && mse < 1e-6;
    verdict(
        3,
        "quantizer oracle equivalence",
        pass,
        format!("{mismatches} level mismatches on 1000 inputs; monotone {monotone}/1000; K=N={n} fit mse {mse:.2e}"),
    );
    assert!(pass);
}

fn total_variation(table: &FrequencyTable, target: &[f64]) -> f64 {
    0.5 * target
        .iter()
        .enumerate()
        .map(|(i, p)| (table.probability(&SemanticCode::new(i as u32, 0, 0)).unwrap() - p).abs())
        .sum::<f64>()
}

fn draw(cdf: &[f64], rng: &mut ChaCha8Rng) -> u32 {
    let u: f64 = rng.random();
    cdf.partition_point(|c| *c < u).min(cdf.len() - 1) as u32
}

fn cdf_of(p: &[f64]) -> Vec<f64> {
    p.iter()
        .scan(0.0, |acc, x| {
            *acc += x;
            Some(*acc)
        })
        .collect()
}

#[test]
fn c4_frequency_convergence() {
    let mut rng = substream(4, "acceptance/frequency");
    let zipf = pabridge_core::synthworld::zipf_weights(1000, 1.0);
    let cdf = cdf_of(&zipf);
    let mut table = FrequencyTable::new([1000, 1, 1], 1.0, 0.5).unwrap();
    for _ in 0..100 {
        let codes: Vec<SemanticCode> = (0..1000).map(|_| SemanticCode::new(draw(&cdf, &mut rng), 0, 0)).collect();
        table.update(&codes).unwrap();
    }
    let max_err = (0..1000)
        .map(|i| (table.probability(&SemanticCode::new(i, 0, 0)).unwrap() - zipf[i as usize]).abs())
        .fold(0.0, f64::max);

    // forgetting: one observation per update, so the decay acts per draw
    let n = 10;
    let a = pabridge_core::synthworld::zipf_weights(n, 1.0);
    let b: Vec<f64> = a.iter().rev().copied().collect();
    let (cdf_a, cdf_b) = (cdf_of(&a), cdf_of(&b));
    let mut table = FrequencyTable::new([n, 1, 1], 0.999, 0.5).unwrap();
    for _ in 0..20_000 {
        table.update(&[SemanticCode::new(draw(&cdf_a, &mut rng), 0, 0)]).unwrap();
    }
    let tv_before = total_variation(&table, &b);
    let mut first_below = None;
    for t in 1..=10_000 {
        table.update(&[SemanticCode::new(draw(&cdf_b, &mut rng), 0, 0)]).unwrap();
        if first_below.is_none() && total_variation(&table, &b) < 0.05 {
            first_below = Some(t);
        }
    }
    let tv_after = total_variation(&table, &b);

    let pass = max_err < 0.005 && tv_after < 0.05;
    verdict(
        4,
        "frequency estimator convergence",
        pass,
        format!(
            "Zipf max |P^-P| = {max_err:.4}; switch TV {tv_before:.3} -> {tv_after:.4} after 10k draws (first < 0.05 at {first_below:?})"
        ),
    );
    assert!(pass);
}

fn alignment_run(seed: u64) -> (f64, f64) {
    let dim = 8;
    let mut rng = substream(seed, "acceptance/align");
    let offset: Vec<f64> = (0..dim).map(|_| 1.5 * (rng.random::<f64>() * 2.0 - 1.0)).collect();
    let shifted = |n: usize, rng: &mut ChaCha8Rng| {
        let mut t = Tensor2::random_normal(n, dim, 1.0, rng);
        for r in 0..n {
            for (x, o) in t.row_mut(r).iter_mut().zip(&offset) {
                *x += o;
            }
        }
        t
    };
    let active = shifted(2000, &mut rng);
    let starter = Tensor2::random_normal(2000, dim, 1.0, &mut rng);
    let held_a = shifted(1000, &mut rng);
    let held_s = Tensor2::random_normal(1000, dim, 1.0, &mut rng);

    let mut params = AlignerParams::new(dim, &[32], &[32], &mut rng).unwrap();
    let bw = median_bandwidth(&held_a, &held_s, 500);
    let before = mmd2_rbf(&held_a, &held_s, bw).unwrap();
    let main = AlignConfig {
        steps: 10_000,
        batch_size: 256,
        lr_generator: 1e-4,
        lr_discriminator: 5e-4,
        ..AlignConfig::default()
    };
    train_alignment(&mut params, &active, &starter, &main, &mut rng).unwrap();
    // short low-rate phase to settle the oscillation of the minimax game
    let settle = AlignConfig {
        steps: 4_000,
        lr_generator: 1e-5,
        lr_discriminator: 5e-5,
        ..main
    };
    train_alignment(&mut params, &active, &starter, &settle, &mut rng).unwrap();
    let ga = params.map_intent(&held_a).unwrap();
    let gs = params.map_intent(&held_s).unwrap();
    let after = mmd2_rbf(&ga, &gs, bw).unwrap();
    let acc = discriminator_accuracy(&params, &ga, &gs).unwrap();
    (acc, 1.0 - after / before)
}

#[test]
fn c5_alignment_toy() {
    let start = Instant::now();
    let results: Vec<(f64, f64)> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..3u64).map(|seed| s.spawn(move || alignment_run(seed))).collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let elapsed = start.elapsed();
    let passes = results.iter().filter(|(acc, red)| (0.45..=0.55).contains(acc) && *red >= 0.8).count();
    let details: Vec<String> = results
        .iter()
        .enumerate()
        .map(|(seed, (acc, red))| format!("seed {seed}: acc {acc:.3}, mmd -{:.1}%", 100.0 * red))
        .collect();
    let pass = passes >= 2 && elapsed < Duration::from_secs(120);
    verdict(5, "alignment toy", pass, format!("{passes}/3 seeds; {}; {:.1?}", details.join("; "), elapsed));
    assert!(pass);
}

#[test]
fn c6_echo_chamber() {
    let start = Instant::now();
    let config = LoopConfig {
        policy: Policy::ClosedBaseline,
        ..LoopConfig::default()
    };
    let rows = run_loop(&config, &WorldConfig::default(), &TrainConfig::default()).unwrap();
    let elapsed = start.elapsed();
    let first = rows.first().unwrap().top1pct_share;
    let last = rows.last().unwrap().top1pct_share;
    let pass = rows.len() == 30 && last > 0.5 && last > first && elapsed < Duration::from_secs(300);
    verdict(
        6,
        "echo chamber",
        pass,
        format!("top-1% share round 1 {first:.3} -> round {} {last:.3}; {:.1?}", rows.len(), elapsed),
    );
    assert!(pass);
}

#[test]
fn c7_mitigation() {
    let mut passes = 0;
    let mut details = Vec::new();
    for seed in [1u64, 2, 3] {
        let train = TrainConfig { seed, ..TrainConfig::default() };
        let finals: Vec<usize> = [Policy::ClosedBaseline, Policy::PaBridge]
            .into_iter()
            .map(|policy| {
                let cfg = LoopConfig { policy, ..LoopConfig::default() };
                run_loop(&cfg, &WorldConfig::default(), &train).unwrap().last().unwrap().unique_exposed
            })
            .collect();
        let ratio = finals[1] as f64 / finals[0] as f64;
        passes += usize::from(ratio >= 1.2);
        details.push(format!("seed {seed}: {} vs {} ({ratio:.2}x)", finals[1], finals[0]));
    }
    let pass = passes >= 2;
    verdict(7, "mitigation", pass, format!("{passes}/3 seeds; {}", details.join("; ")));
    assert!(pass);
}

#[test]
fn c8_offline_ordering() {
    let variants = [Variant::Base, Variant::NaiveActive, Variant::Full];
    let mut sums = [0.0; 3];
    for seed in [1u64, 2, 3] {
        let train = TrainConfig { seed, ..TrainConfig::default() };
        let world = WorldConfig {
            shift_scale: 1.0,
            p_active: 0.3,
            ..WorldConfig::default()
        };
        let res = offline_comparison(&world, &train, 50_000, &variants).unwrap();
        for (i, (_, a)) in res.iter().enumerate() {
            sums[i] += a / 3.0;
        }
    }
    let [base, naive, full] = sums;
    let pass = full - naive >= 0.01 && full - base >= 0.01;
    verdict(
        8,
        "offline AUC ordering",
        pass,
        format!("mean AUC base {base:.4}, naive {naive:.4}, full {full:.4}"),
    );
    assert!(pass);
}

#[test]
fn c9_determinism_and_persistence() {
    let world = WorldConfig {
        n_users: 300,
        n_starters: 200,
        ..WorldConfig::default()
    };
    let sim = LoopConfig {
        rounds: 3,
        users_per_round: 80,
        history_events: 2000,
        holdout_pairs: 1000,
        policy: Policy::PaBridge,
        ..LoopConfig::default()
    };
    let train = TrainConfig::default();
    let csv_bytes = || {
        let rows = run_loop(&sim, &world, &train).unwrap();
        let mut buf = Vec::new();
        let meta = RunMeta {
            config_hash: "h".into(),
            world_hash: "w".into(),
            seed: train.seed,
        };
        write_loop_csv(&mut buf, &rows, &meta).unwrap();
        buf
    };
    let identical_csv = csv_bytes() == csv_bytes();

    let w = generate_world(&world).unwrap();
    let events = sample_events(&w, 4000, 0.3, &mut substream(9, "acceptance/persist")).unwrap();
    let cfg = TrainConfig {
        batch_size: 64,
        warmup_samples: 1000,
        rq: RqConfig { k: 16, ..RqConfig::default() },
        ..TrainConfig::default()
    };
    let mut straight = TrainState::new(cfg.clone(), w.user_feature_dim(), w.embed_dim()).unwrap();
    straight.train_on(&events, &w.user_features, 40).unwrap();

    let mut first = TrainState::new(cfg, w.user_feature_dim(), w.embed_dim()).unwrap();
    first.train_on(&events, &w.user_features, 15).unwrap();
    let mut bytes = Vec::new();
    write_checkpoint(&first, &mut bytes).unwrap();
    let mut resumed = read_checkpoint(bytes.as_slice()).unwrap();
    resumed.train_on(&events, &w.user_features, 25).unwrap();

    let (mut a, mut b) = (Vec::new(), Vec::new());
    write_checkpoint(&straight, &mut a).unwrap();
    write_checkpoint(&resumed, &mut b).unwrap();
    let resume_equal = a == b;

    let pass = identical_csv && resume_equal;
    verdict(
        9,
        "determinism and persistence",
        pass,
        format!("byte-identical loop CSVs: {identical_csv}; resume == uninterrupted checkpoint bytes: {resume_equal}"),
    );
    assert!(pass);
}
