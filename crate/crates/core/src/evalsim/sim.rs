//! Exposure → click → retrain loop over a synthetic world.

use std::collections::BTreeSet;
use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::metrics::{auc, exposure_concentration, recall_at_k};
use crate::error::{Error, Result};
use crate::numcore::Tensor2;
use crate::rng::substream;
use crate::synthworld::{generate_world, sample_events, InteractionEvent, SyntheticWorld, WorldConfig};
use crate::trainer::{TrainConfig, TrainState, Variant};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    /// Retrain on starter clicks only, plain in-batch loss.
    #[default]
    ClosedBaseline,
    /// Also log active queries and retrain with the full pipeline.
    PaBridge,
}

impl Policy {
    pub fn as_str(self) -> &'static str {
        match self {
            Policy::ClosedBaseline => "closed_baseline",
            Policy::PaBridge => "pa_bridge",
        }
    }

    pub fn variant(self) -> Variant {
        match self {
            Policy::ClosedBaseline => Variant::Base,
            Policy::PaBridge => Variant::Full,
        }
    }
}

impl std::str::FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "closed_baseline" => Ok(Policy::ClosedBaseline),
            "pa_bridge" => Ok(Policy::PaBridge),
            other => Err(Error::Config(format!("unknown policy {other:?}; expected closed_baseline or pa_bridge"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoopConfig {
    pub rounds: usize,
    /// Slate size K.
    pub slate_size: usize,
    /// Users served per round.
    pub users_per_round: usize,
    pub retrain_steps: usize,
    pub policy: Policy,
    /// Per-slot probability of replacing the model's pick with a uniformly
    /// random starter.
    pub epsilon: f64,
    /// Organic (popularity-driven) events logged before the first round.
    pub history_events: usize,
    /// Give the closed baseline the usual item-id logQ correction.
    /// Without it in-batch negatives push exposure away from popular
    /// starters and the loop diversifies on its own.
    pub baseline_item_logq: bool,
    /// Oracle-labelled (user, starter) pairs for the holdout AUC.
    pub holdout_pairs: usize,
    /// Users whose oracle-best starter is checked by recall@K.
    pub recall_users: usize,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            rounds: 30,
            slate_size: 10,
            users_per_round: 500,
            retrain_steps: 50,
            policy: Policy::ClosedBaseline,
            epsilon: 0.01,
            history_events: 20000,
            baseline_item_logq: true,
            holdout_pairs: 5000,
            recall_users: 200,
        }
    }
}

impl LoopConfig {
    pub fn validate(&self, world: &WorldConfig) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::Config("loop.rounds must be >= 1".into()));
        }
        if self.slate_size == 0 || self.slate_size > world.n_starters {
            return Err(Error::Config("loop.slate_size must lie in 1..=world.n_starters".into()));
        }
        if self.users_per_round == 0 {
            return Err(Error::Config("loop.users_per_round must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::Config("loop.epsilon must lie in [0, 1]".into()));
        }
        if self.holdout_pairs < 2 || self.recall_users == 0 {
            return Err(Error::Config("loop.holdout_pairs must be >= 2 and loop.recall_users >= 1".into()));
        }
        Ok(())
    }
}

/// Metrics of one round, measured on the model that produced its slates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub policy: Policy,
    pub top1pct_share: f64,
    pub unique_exposed: usize,
    pub unique_clicked: usize,
    pub auc: f64,
    pub recall_at_k: f64,
}

/// Oracle-labelled evaluation pairs drawn uniformly over users × starters.
#[derive(Clone, Debug, PartialEq)]
pub struct Holdout {
    pub users: Vec<usize>,
    pub starters: Vec<usize>,
    pub labels: Vec<u8>,
    /// Users for recall@K, with their oracle-best starter.
    pub recall_users: Vec<usize>,
    pub best_starter: Vec<usize>,
}

/// Holdout for `world`. Labels are Bernoulli draws from the true click
/// model, not logged clicks.
pub fn build_holdout(world: &SyntheticWorld, pairs: usize, recall_users: usize) -> Result<Holdout> {
    let mut rng = substream(world.config.seed, "holdout");
    let mut users = Vec::with_capacity(pairs);
    let mut starters = Vec::with_capacity(pairs);
    let mut labels = Vec::with_capacity(pairs);
    for _ in 0..pairs {
        let u = rng.random_range(0..world.n_users());
        let s = rng.random_range(0..world.n_starters());
        let p = world.starter_click_probability(u, s);
        users.push(u);
        starters.push(s);
        labels.push(u8::from(rng.random::<f64>() < p));
    }
    let ru: Vec<usize> = (0..recall_users).map(|_| rng.random_range(0..world.n_users())).collect();
    let best = ru
        .iter()
        .map(|&u| {
            let scores = world.starter_embeddings.matmul_t(&Tensor2::row_vector(world.user_intents.row(u)))?;
            Ok(top_k(scores.data(), 1)[0])
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Holdout {
        users,
        starters,
        labels,
        recall_users: ru,
        best_starter: best,
    })
}

/// Indices of the `k` largest scores, best first; ties go to the lower index.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    let cmp = |a: &usize, b: &usize| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b));
    let k = k.min(idx.len());
    if k == 0 {
        return Vec::new();
    }
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, cmp);
        idx.truncate(k);
    }
    idx.sort_by(cmp);
    idx
}

/// Holdout AUC and mean recall@K of `state` on `world`.
pub fn evaluate(state: &TrainState, world: &SyntheticWorld, holdout: &Holdout, k: usize) -> Result<(f64, f64)> {
    let user_repr = state.user_repr(&world.user_features)?;
    let starter_repr = state.query_repr(&world.starter_embeddings)?;
    let scores: Vec<f64> = holdout
        .users
        .iter()
        .zip(&holdout.starters)
        .map(|(&u, &s)| crate::numcore::dot(user_repr.row(u), starter_repr.row(s)))
        .collect();
    let a = auc(&scores, &holdout.labels)?;
    let picked = user_repr.select_rows(&holdout.recall_users)?;
    let all = picked.matmul_t(&starter_repr)?;
    let mut recall = 0.0;
    for (i, best) in holdout.best_starter.iter().enumerate() {
        recall += recall_at_k(&top_k(all.row(i), k), &[*best], k)?;
    }
    Ok((a, recall / holdout.best_starter.len() as f64))
}

/// Runs the loop and returns one [`RoundMetrics`] per round.
///
/// Each round: serve `users_per_round` users the model's top-K starters
/// (with ε-greedy slot replacement), draw clicks from the true click model,
/// log them (plus active queries under `pa_bridge`), record metrics, then
/// retrain on the accumulated log.
pub fn run_loop(config: &LoopConfig, world_config: &WorldConfig, train: &TrainConfig) -> Result<Vec<RoundMetrics>> {
    config.validate(world_config)?;
    let world = generate_world(world_config)?;
    let holdout = build_holdout(&world, config.holdout_pairs, config.recall_users)?;
    let train = TrainConfig {
        variant: config.policy.variant(),
        item_logq: config.policy == Policy::ClosedBaseline && config.baseline_item_logq,
        ..train.clone()
    };
    let mut state = TrainState::new(train.clone(), world.user_feature_dim(), world.embed_dim())?;
    let seed = train.seed;
    let mut serve_rng = substream(seed, "loop/serve");
    let mut explore_rng = substream(seed, "loop/explore");
    let mut click_rng = substream(seed, "loop/click");
    let mut active_rng = substream(seed, "loop/active");

    let mut log: Vec<InteractionEvent> = if config.history_events > 0 {
        let p_active = if config.policy == Policy::PaBridge { world.config.p_active } else { 0.0 };
        sample_events(&world, config.history_events, p_active, &mut substream(seed, "loop/history"))?
    } else {
        Vec::new()
    };
    let mut ts = log.len() as u64;
    if state.positive_indices(&log).len() >= 2 {
        state.train_on(&log, &world.user_features, config.retrain_steps)?;
    }

    let n = world.n_starters();
    let mut out = Vec::with_capacity(config.rounds);
    for round in 1..=config.rounds {
        let users: Vec<usize> = (0..config.users_per_round).map(|_| serve_rng.random_range(0..world.n_users())).collect();
        let user_repr = state.user_repr(&world.user_features.select_rows(&users)?)?;
        let starter_repr = state.query_repr(&world.starter_embeddings)?;
        let scores = user_repr.matmul_t(&starter_repr)?;
        if !scores.is_finite() {
            return Err(Error::Numeric(format!("non-finite scores in round {round}")));
        }

        let mut exposure = vec![0.0; n];
        let mut clicked = BTreeSet::new();
        for (i, &u) in users.iter().enumerate() {
            let mut slate = top_k(scores.row(i), config.slate_size);
            for slot in 0..slate.len() {
                if explore_rng.random::<f64>() < config.epsilon {
                    loop {
                        let s = explore_rng.random_range(0..n);
                        if !slate.contains(&s) {
                            slate[slot] = s;
                            break;
                        }
                    }
                }
            }
            for &s in &slate {
                exposure[s] += 1.0;
                let ev = world.starter_event(u, s, ts, &mut click_rng);
                ts += 1;
                if ev.is_positive() {
                    clicked.insert(s);
                }
                log.push(ev);
            }
            if config.policy == Policy::PaBridge && active_rng.random::<f64>() < world.config.p_active {
                log.push(world.active_event(u, ts, &mut active_rng));
                ts += 1;
            }
        }

        let (auc, recall) = evaluate(&state, &world, &holdout, config.slate_size)?;
        out.push(RoundMetrics {
            round,
            policy: config.policy,
            top1pct_share: exposure_concentration(&exposure, 0.01)?,
            unique_exposed: exposure.iter().filter(|c| **c > 0.0).count(),
            unique_clicked: clicked.len(),
            auc,
            recall_at_k: recall,
        });

        if state.positive_indices(&log).len() >= 2 {
            state
                .train_on(&log, &world.user_features, config.retrain_steps)
                .map_err(|e| Error::Numeric(format!("round {round} aborted: {e}")))?;
        }
    }
    Ok(out)
}

/// Provenance recorded in every metrics CSV row.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunMeta {
    pub config_hash: String,
    pub world_hash: String,
    pub seed: u64,
}

pub const LOOP_CSV_HEADER: [&str; 10] = [
    "round",
    "policy",
    "top1pct_share",
    "unique_exposed",
    "unique_clicked",
    "auc",
    "recall_at_k",
    "config_hash",
    "world_hash",
    "seed",
];

pub fn write_loop_csv<W: Write>(w: W, rows: &[RoundMetrics], meta: &RunMeta) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let err = |e: csv::Error| Error::Format(format!("csv: {e}"));
    out.write_record(LOOP_CSV_HEADER).map_err(err)?;
    for r in rows {
        out.write_record([
            r.round.to_string(),
            r.policy.as_str().to_string(),
            format!("{:.6}", r.top1pct_share),
            r.unique_exposed.to_string(),
            r.unique_clicked.to_string(),
            format!("{:.6}", r.auc),
            format!("{:.6}", r.recall_at_k),
            meta.config_hash.clone(),
            meta.world_hash.clone(),
            meta.seed.to_string(),
        ])
        .map_err(err)?;
    }
    out.flush()?;
    Ok(())
}

/// Holdout AUC of one offline training run per variant on the same logged
/// events.
pub fn offline_comparison(
    world_config: &WorldConfig,
    train: &TrainConfig,
    n_events: usize,
    variants: &[Variant],
) -> Result<Vec<(Variant, f64)>> {
    let world = generate_world(world_config)?;
    let holdout = build_holdout(&world, 5000, 50)?;
    let events = sample_events(&world, n_events, world_config.p_active, &mut substream(train.seed, "offline/events"))?;
    variants
        .iter()
        .map(|&variant| {
            let cfg = TrainConfig { variant, ..train.clone() };
            let mut state = TrainState::new(cfg, world.user_feature_dim(), world.embed_dim())?;
            state.train_on(&events, &world.user_features, train.steps)?;
            let (a, _) = evaluate(&state, &world, &holdout, 10)?;
            Ok((variant, a))
        })
        .collect()
}
