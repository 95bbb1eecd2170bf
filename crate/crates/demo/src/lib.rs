//! WebAssembly entry points for the static demo page in `www/`.
//!
//! Every export takes plain numbers or strings and returns a JSON string, so
//! the page needs no bindings beyond what `wasm-bindgen` generates.

use pabridge_core::aligner::{discriminator_accuracy, train_alignment, AlignConfig, AlignerParams};
use pabridge_core::discretizer::SemanticCode;
use pabridge_core::evalsim::{run_loop, LoopConfig, Policy, RoundMetrics};
use pabridge_core::mmd::{median_bandwidth, mmd2_rbf};
use pabridge_core::popstats::FrequencyTable;
use pabridge_core::rng::substream;
use pabridge_core::synthworld::{zipf_weights, WorldConfig};
use pabridge_core::trainer::TrainConfig;
use pabridge_core::Tensor2;
use rand::distr::{weighted::WeightedIndex, Distribution};
use serde::Serialize;
use wasm_bindgen::prelude::*;

fn to_js<E: std::fmt::Display>(e: E) -> JsValue {
    JsValue::from_str(&e.to_string())
}

#[derive(Serialize)]
pub struct LoopCurves {
    pub closed_baseline: Vec<RoundMetrics>,
    pub pa_bridge: Vec<RoundMetrics>,
}

/// Both policies on the same small world and seed.
pub fn loop_curves(seed: u64, rounds: usize) -> pabridge_core::Result<LoopCurves> {
    let world = WorldConfig {
        n_users: 300,
        n_starters: 200,
        seed,
        ..WorldConfig::default()
    };
    let train = TrainConfig { seed, ..TrainConfig::default() };
    let run = |policy| {
        let sim = LoopConfig {
            rounds,
            users_per_round: 100,
            history_events: 3000,
            holdout_pairs: 1000,
            recall_users: 50,
            policy,
            ..LoopConfig::default()
        };
        run_loop(&sim, &world, &train)
    };
    Ok(LoopCurves {
        closed_baseline: run(Policy::ClosedBaseline)?,
        pa_bridge: run(Policy::PaBridge)?,
    })
}

#[wasm_bindgen]
pub fn simulate_loops(seed: u32, rounds: u32) -> Result<String, JsValue> {
    let curves = loop_curves(seed as u64, rounds.clamp(1, 20) as usize).map_err(to_js)?;
    serde_json::to_string(&curves).map_err(to_js)
}

#[derive(Serialize)]
pub struct AlignmentToy {
    pub active: Vec<[f64; 2]>,
    pub starter: Vec<[f64; 2]>,
    pub mapped: Vec<[f64; 2]>,
    pub discriminator_loss: Vec<f64>,
    pub generator_loss: Vec<f64>,
    pub accuracy_before: f64,
    pub accuracy_after: f64,
    pub mmd_before: f64,
    pub mmd_after: f64,
}

fn points(t: &Tensor2) -> Vec<[f64; 2]> {
    (0..t.rows()).map(|r| [t.row(r)[0], t.row(r)[1]]).collect()
}

/// Two-dimensional version of the alignment toy: the active cloud is a
/// standard normal shifted by (dx, dy), the starter cloud is unshifted.
pub fn alignment_toy(seed: u64, dx: f64, dy: f64, steps: usize) -> pabridge_core::Result<AlignmentToy> {
    let mut rng = substream(seed, "demo/align");
    let n = 400;
    let mut active = Tensor2::random_normal(n, 2, 1.0, &mut rng);
    for r in 0..n {
        let row = active.row_mut(r);
        row[0] += dx;
        row[1] += dy;
    }
    let starter = Tensor2::random_normal(n, 2, 1.0, &mut rng);
    let mut params = AlignerParams::new(2, &[16], &[16], &mut rng)?;
    let bw = median_bandwidth(&active, &starter, 400);
    let mmd_before = mmd2_rbf(&active, &starter, bw)?;
    let accuracy_before = {
        let mut warm = params.clone();
        let cfg = AlignConfig {
            steps: 300,
            batch_size: 128,
            train_generator: false,
            ..AlignConfig::default()
        };
        train_alignment(&mut warm, &active, &starter, &cfg, &mut rng)?;
        discriminator_accuracy(&warm, &active, &starter)?
    };
    let cfg = AlignConfig {
        steps,
        batch_size: 128,
        lr_generator: 5e-4,
        lr_discriminator: 1e-3,
        ..AlignConfig::default()
    };
    let history = train_alignment(&mut params, &active, &starter, &cfg, &mut rng)?;
    let mapped = params.map_intent(&active)?;
    let starter_mapped = params.map_intent(&starter)?;
    Ok(AlignmentToy {
        active: points(&active),
        starter: points(&starter),
        accuracy_after: discriminator_accuracy(&params, &mapped, &starter_mapped)?,
        mmd_after: mmd2_rbf(&mapped, &starter_mapped, bw)?,
        mapped: points(&mapped),
        discriminator_loss: history.discriminator_loss,
        generator_loss: history.generator_loss,
        accuracy_before,
        mmd_before,
    })
}

#[wasm_bindgen]
pub fn align_toy(seed: u32, dx: f64, dy: f64, steps: u32) -> Result<String, JsValue> {
    let toy = alignment_toy(seed as u64, dx, dy, steps.clamp(1, 5000) as usize).map_err(to_js)?;
    serde_json::to_string(&toy).map_err(to_js)
}

#[derive(Serialize)]
pub struct FrequencyTrace {
    /// Total variation between the estimate and the current true
    /// distribution, recorded after every update.
    pub total_variation: Vec<f64>,
    pub truth_after: Vec<f64>,
    pub estimate_after: Vec<f64>,
}

/// Streams draws from a Zipf distribution over `codes` first codes; after
/// `switch_at` draws the popularity order is reversed.
pub fn frequency_trace(
    seed: u64,
    codes: usize,
    gamma: f64,
    alpha: f64,
    switch_at: usize,
    draws: usize,
) -> pabridge_core::Result<FrequencyTrace> {
    let before = zipf_weights(codes, 1.0);
    let after: Vec<f64> = before.iter().rev().copied().collect();
    let mut table = FrequencyTable::new([codes, 1, 1], gamma, alpha)?;
    let mut rng = substream(seed, "demo/frequency");
    let pick_before = WeightedIndex::new(&before).map_err(|e| pabridge_core::Error::Config(e.to_string()))?;
    let pick_after = WeightedIndex::new(&after).map_err(|e| pabridge_core::Error::Config(e.to_string()))?;
    let estimate = |table: &FrequencyTable| -> pabridge_core::Result<Vec<f64>> {
        (0..codes).map(|c| table.probability(&SemanticCode::new(c as u32, 0, 0))).collect()
    };
    let mut total_variation = Vec::with_capacity(draws);
    for i in 0..draws {
        let (pick, truth) = if i < switch_at { (&pick_before, &before) } else { (&pick_after, &after) };
        let c = pick.sample(&mut rng);
        table.update(&[SemanticCode::new(c as u32, 0, 0)])?;
        let est = estimate(&table)?;
        total_variation.push(0.5 * est.iter().zip(truth).map(|(a, b)| (a - b).abs()).sum::<f64>());
    }
    Ok(FrequencyTrace {
        total_variation,
        truth_after: if draws > switch_at { after } else { before },
        estimate_after: estimate(&table)?,
    })
}

#[wasm_bindgen]
pub fn frequency_switch(seed: u32, gamma: f64, alpha: f64, switch_at: u32, draws: u32) -> Result<String, JsValue> {
    let trace = frequency_trace(seed as u64, 10, gamma, alpha, switch_at as usize, draws.clamp(1, 50_000) as usize).map_err(to_js)?;
    serde_json::to_string(&trace).map_err(to_js)
}
