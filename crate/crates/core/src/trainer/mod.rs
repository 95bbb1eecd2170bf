//! Joint training: frequency-corrected retrieval loss plus the adversarial
//! alignment game, with one discriminator step and one joint step per batch.

mod checkpoint;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use rand::seq::index::sample;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aligner::{discriminator_accuracy, discriminator_loss_tape, generator_loss_tape, AlignerParams};
use crate::config::config_hash;
use crate::discretizer::{fit_rqvae, CodebookSet, FitReport, RqConfig, SemanticCode, LEVELS};
use crate::error::{Error, Result};
use crate::numcore::{Optimizer, OptimizerKind, Tape, Tensor2};
use crate::popstats::{Estimator, FrequencyTable};
use crate::rng::substream;
use crate::synthworld::{Domain, InteractionEvent};
use crate::towers::{in_batch_loss_tape, TwoTowerParams};

/// Id space of the item-id frequency table.

/// Which training recipe to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Starter clicks only, plain in-batch softmax.
    Base,
    /// Starter clicks and raw active queries, plain in-batch softmax.
    NaiveActive,
    /// Aligned active queries, β weights, frequency correction and the
    /// adversarial term.
    #[default]
    Full,
}

impl Variant {
    pub fn uses_active(self) -> bool {
        !matches!(self, Variant::Base)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub variant: Variant,
    /// Weight of the generator's adversarial loss in the joint objective.
    pub lambda_adv: f64,
    /// Learning rate of the two towers.
    pub lr: f64,
    pub lr_generator: f64,
    pub lr_discriminator: f64,
    pub optimizer: OptimizerKind,
    pub batch_size: usize,
    pub steps: usize,
    pub temperature: f64,
    pub normalize: bool,
    pub user_hidden: Vec<usize>,
    pub generator_hidden: Vec<usize>,
    pub discriminator_hidden: Vec<usize>,
    /// Query embeddings used to fit the codebooks before training.
    pub warmup_samples: usize,
    pub rq: RqConfig,
    /// Per-batch decay of the code frequency table.
    pub freq_decay: f64,
    /// Laplace smoothing of code probabilities.
    pub freq_smoothing: f64,
    pub freq_estimator: Estimator,
    /// Weight rows by `1 - D(G(z))` (Full only).
    pub reweight: bool,
    /// Subtract `log P(code)` from every candidate logit (Full only).
    pub debias: bool,
    /// Base variant only: subtract the log streaming frequency of each
    /// starter id from its logit (item-id logQ correction).
    pub item_logq: bool,
    /// Refit codebooks every this many steps; 0 keeps them frozen.
    pub refit_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Full,
            lambda_adv: 0.1,
            lr: 1e-3,
            lr_generator: 1e-3,
            lr_discriminator: 1e-3,
            optimizer: OptimizerKind::Adam,
            batch_size: 256,
            steps: 1000,
            temperature: 0.05,
            normalize: true,
            user_hidden: vec![32],
            generator_hidden: vec![32],
            discriminator_hidden: vec![32],
            warmup_samples: 5000,
            rq: RqConfig::default(),
            freq_decay: 0.999,
            freq_smoothing: 0.01,
            freq_estimator: Estimator::Joint,
            reweight: true,
            debias: true,
            item_logq: false,
            refit_every: 0,
            seed: 11,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lambda_adv >= 0.0) || !self.lambda_adv.is_finite() {
            return bad("train.lambda_adv must be finite and >= 0".into());
        }
        for (name, lr) in [("lr", self.lr), ("lr_generator", self.lr_generator), ("lr_discriminator", self.lr_discriminator)] {
            if !(lr >= 0.0) || !lr.is_finite() {
                return bad(format!("train.{name} must be finite and >= 0"));
            }
        }
        if self.batch_size < 2 {
            return bad("train.batch_size must be >= 2 for in-batch negatives".into());
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return bad("train.temperature must be > 0".into());
        }
        if !(self.freq_decay > 0.0 && self.freq_decay <= 1.0) {
            return bad("train.freq_decay must lie in (0, 1]".into());
        }
        if !(self.freq_smoothing >= 0.0) || !self.freq_smoothing.is_finite() {
            return bad("train.freq_smoothing must be finite and >= 0".into());
        }
        if self.item_logq && self.variant != Variant::Base {
            return bad("train.item_logq applies to the base variant only".into());
        }
        if self.variant == Variant::Full && self.warmup_samples == 0 {
            return bad("train.warmup_samples must be > 0 for the full variant".into());
        }
        self.rq.validate().map_err(|e| Error::Config(format!("train.{}", e.to_string().trim_start_matches("invalid config: "))))
    }
}

/// Metrics reported by one [`train_step`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    /// `retrieval_loss + lambda_adv * generator_loss`.
    pub total_loss: f64,
    pub retrieval_loss: f64,
    pub discriminator_loss: f64,
    pub generator_loss: f64,
    pub beta_mean: f64,
    pub discriminator_accuracy: f64,
    pub n_active: usize,
    pub n_starter: usize,
}

/// Everything the training loop mutates.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub config: TrainConfig,
    pub config_hash: String,
    pub towers: TwoTowerParams,
    pub aligner: AlignerParams,
    pub codebooks: Option<CodebookSet>,
    pub frequencies: FrequencyTable,
    /// Streaming starter-id frequencies (item-id logQ).
    pub item_frequencies: FrequencyTable,
    pub tower_opt: Optimizer,
    pub generator_opt: Optimizer,
    pub discriminator_opt: Optimizer,
    pub step: u64,
    /// Drives batch sampling and codebook refits.
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(config: TrainConfig, user_dim: usize, embed_dim: usize) -> Result<Self> {
        config.validate()?;
        let mut init = substream(config.seed, "init");
        let towers = TwoTowerParams::new(user_dim, embed_dim, &config.user_hidden, config.temperature, config.normalize, &mut init)?;
        let aligner = AlignerParams::new(embed_dim, &config.generator_hidden, &config.discriminator_hidden, &mut init)?;
        let k = config.rq.k;
        let frequencies = FrequencyTable::new([k; LEVELS], config.freq_decay, config.freq_smoothing)?.with_estimator(config.freq_estimator);
        let item_frequencies = FrequencyTable::new([1, 1, 1], config.freq_decay, 0.0)?;
        let tower_opt = Optimizer::for_params(config.optimizer, config.lr, &towers.tensors());
        let generator_opt = Optimizer::for_params(config.optimizer, config.lr_generator, &aligner.generator.tensors());
        let discriminator_opt = Optimizer::for_params(config.optimizer, config.lr_discriminator, &aligner.discriminator.tensors());
        Ok(Self {
            config_hash: config_hash(&config),
            rng: substream(config.seed, "batches"),
            config,
            towers,
            aligner,
            codebooks: None,
            frequencies,
            item_frequencies,
            tower_opt,
            generator_opt,
            discriminator_opt,
            step: 0,
        })
    }

    pub fn user_dim(&self) -> usize {
        self.towers.user_tower.in_dim()
    }

    pub fn embed_dim(&self) -> usize {
        self.aligner.dim()
    }

    /// Scoring-space representation of user features.
    pub fn user_repr(&self, features: &Tensor2) -> Result<Tensor2> {
        self.towers.user_repr(features)
    }

    /// Scoring-space representation of raw query embeddings, `head(G(z))`.
    pub fn query_repr(&self, z: &Tensor2) -> Result<Tensor2> {
        self.towers.query_repr(&self.aligner.map_intent(z)?)
    }

    /// Inner-product scores of every user row against every query row.
    pub fn score_matrix(&self, features: &Tensor2, queries: &Tensor2) -> Result<Tensor2> {
        self.user_repr(features)?.matmul_t(&self.query_repr(queries)?)
    }

    /// Tower, generator and discriminator tensors in a fixed order.
    pub fn parameters(&self) -> Vec<&Tensor2> {
        let mut v = self.towers.tensors();
        v.extend(self.aligner.generator.tensors());
        v.extend(self.aligner.discriminator.tensors());
        v
    }

    pub fn warmed_up(&self) -> bool {
        self.codebooks.is_some()
    }

    /// Fits the codebooks on `G(z)` of up to `warmup_samples` query
    /// embeddings drawn from `events`, then freezes them.
    pub fn warm_up(&mut self, events: &[InteractionEvent]) -> Result<FitReport> {
        if events.is_empty() {
            return Err(Error::Argument("warm-up needs at least one event".into()));
        }
        let n = self.config.warmup_samples.min(events.len()).max(1);
        let idx: Vec<usize> = sample(&mut self.rng, events.len(), n).into_vec();
        let rows: Vec<&[f64]> = idx.iter().map(|&i| events[i].query_embedding.as_slice()).collect();
        let mapped = self.aligner.map_intent(&Tensor2::from_rows(&rows)?)?;
        let chunk = self.config.batch_size.max(1);
        let stream: Vec<Tensor2> = (0..mapped.rows())
            .step_by(chunk)
            .map(|s| mapped.select_rows(&(s..(s + chunk).min(mapped.rows())).collect::<Vec<_>>()))
            .collect::<Result<_>>()?;
        let mut rq_rng = substream(self.config.seed ^ self.step, "rq");
        let (books, report) = fit_rqvae(&stream, &self.config.rq, &mut rq_rng)?;
        self.codebooks = Some(books);
        Ok(report)
    }

    /// Indices of events usable as positives by this variant.
    pub fn positive_indices(&self, events: &[InteractionEvent]) -> Vec<usize> {
        events
            .iter()
            .enumerate()
            .filter(|(_, e)| e.is_positive() && (e.domain == Domain::Starter || self.config.variant.uses_active()))
            .map(|(i, _)| i)
            .collect()
    }

    /// Draws a batch of distinct positives (the whole pool when it is
    /// smaller than the batch size).
    pub fn sample_batch<'a>(&mut self, events: &'a [InteractionEvent], pool: &[usize]) -> Vec<&'a InteractionEvent> {
        let b = self.config.batch_size.min(pool.len());
        sample(&mut self.rng, pool.len(), b).iter().map(|i| &events[pool[i]]).collect()
    }

    /// Runs `steps` training steps on batches sampled from `events`.
    pub fn train_on(&mut self, events: &[InteractionEvent], user_features: &Tensor2, steps: usize) -> Result<Vec<StepMetrics>> {
        let pool = self.positive_indices(events);
        if pool.len() < 2 {
            return Err(Error::Argument(format!("only {} usable positives; need at least 2", pool.len())));
        }
        if self.config.variant == Variant::Full && !self.warmed_up() {
            self.warm_up(events)?;
        }
        let mut out = Vec::with_capacity(steps);
        for _ in 0..steps {
            if self.config.refit_every > 0 && self.step > 0 && self.step % self.config.refit_every as u64 == 0 {
                self.warm_up(events)?;
            }
            let batch = self.sample_batch(events, &pool);
            out.push(train_step(self, &batch, user_features)?);
        }
        Ok(out)
    }
}

fn split_domains(batch: &[&InteractionEvent]) -> (Vec<usize>, Vec<usize>) {
    let mut active = Vec::new();
    let mut starter = Vec::new();
    for (i, e) in batch.iter().enumerate() {
        match e.domain {
            Domain::Active => active.push(i),
            Domain::Starter => starter.push(i),
        }
    }
    (active, starter)
}

fn check_finite(step: u64, what: &str, v: f64, batch: &[&InteractionEvent]) -> Result<()> {
    if v.is_finite() {
        return Ok(());
    }
    let first_ts = batch.first().map_or(0, |e| e.timestamp);
    Err(Error::Numeric(format!(
        "{what} is {v} at step {step} (batch of {} events, first ts {first_ts}, users {:?})",
        batch.len(),
        batch.iter().take(8).map(|e| e.user_id).collect::<Vec<_>>()
    )))
}

/// One training step on a batch of positive events.
///
/// Full variant: `z' = G(z)`, `β = 1 - D(z')` (constant), codes of `z'`
/// update the frequency table, one discriminator step on `L_D`, then one
/// joint step of towers and `G` on `L_debiased + λ L_G`. Other variants
/// take a single tower step on the plain in-batch loss.
pub fn train_step(state: &mut TrainState, batch: &[&InteractionEvent], user_features: &Tensor2) -> Result<StepMetrics> {
    if batch.len() < 2 {
        return Err(Error::Argument(format!("batch of {} rows; in-batch negatives need at least 2", batch.len())));
    }
    if let Some(e) = batch.iter().find(|e| !e.is_positive()) {
        return Err(Error::Argument(format!("event at ts {} is not a positive", e.timestamp)));
    }
    let variant = state.config.variant;
    if !variant.uses_active() && batch.iter().any(|e| e.domain == Domain::Active) {
        return Err(Error::Argument("the base variant trains on starter events only".into()));
    }
    let user_ids: Vec<usize> = batch.iter().map(|e| e.user_id).collect();
    let x = user_features.select_rows(&user_ids)?;
    let rows: Vec<&[f64]> = batch.iter().map(|e| e.query_embedding.as_slice()).collect();
    let z = Tensor2::from_rows(&rows)?;
    if z.cols() != state.embed_dim() {
        return Err(Error::Argument(format!("events carry dim {} embeddings, model expects {}", z.cols(), state.embed_dim())));
    }
    let (active, starter) = split_domains(batch);
    let step = state.step;

    if variant != Variant::Full {
        let log_q = if state.config.item_logq {
            let ids = batch
                .iter()
                .map(|e| e.starter_id.map(|s| SemanticCode::new(s as u32, 0, 0)))
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| Error::Argument("item-id correction needs starter ids".into()))?;
            let widest = ids.iter().map(|c| c.level(0) + 1).max().unwrap_or(1);
            state.item_frequencies.widen_first_level(widest);
            state.item_frequencies.update(&ids)?;
            Some(state.item_frequencies.log_probabilities(&ids)?)
        } else {
            None
        };
        let mut tape = Tape::new();
        let vars = state.towers.bind(&mut tape);
        let xv = tape.leaf(x);
        let zv = tape.leaf(z);
        let u = state.towers.user_repr_tape(&mut tape, &vars, xv)?;
        let q = state.towers.query_repr_tape(&mut tape, &vars, zv)?;
        let loss = in_batch_loss_tape(&mut tape, u, q, state.towers.temperature, log_q.as_deref(), None)?;
        let value = tape.scalar(loss);
        check_finite(step, "retrieval loss", value, batch)?;
        let grads = tape.backward(loss)?.collect(&vars.all());
        state.tower_opt.step(&mut state.towers.tensors_mut(), &grads)?;
        state.step += 1;
        return Ok(StepMetrics {
            step: state.step,
            total_loss: value,
            retrieval_loss: value,
            discriminator_loss: 0.0,
            generator_loss: 0.0,
            beta_mean: 1.0,
            discriminator_accuracy: 0.0,
            n_active: active.len(),
            n_starter: starter.len(),
        });
    }

    let books = state
        .codebooks
        .as_ref()
        .ok_or_else(|| Error::State("codebooks are not fitted; run warm-up first".into()))?;
    let mapped = state.aligner.map_intent(&z)?;
    let betas: Vec<f64> = if state.config.reweight {
        state.aligner.sample_weight(&z)?
    } else {
        vec![1.0; batch.len()]
    };
    let codes: Vec<SemanticCode> = books.quantize_rows(&mapped)?.into_iter().map(|q| q.code).collect();
    state.frequencies.update(&codes)?;
    let both = !active.is_empty() && !starter.is_empty();

    // discriminator step
    let mut d_loss = 0.0;
    let mut d_acc = 0.0;
    if both {
        let ga = mapped.select_rows(&active)?;
        let gs = mapped.select_rows(&starter)?;
        d_acc = discriminator_accuracy(&state.aligner, &ga, &gs)?;
        let mut tape = Tape::new();
        let dvars = state.aligner.discriminator.bind(&mut tape);
        let av = tape.leaf(ga);
        let sv = tape.leaf(gs);
        let ld = discriminator_loss_tape(&mut tape, &state.aligner, &dvars, av, sv)?;
        d_loss = tape.scalar(ld);
        check_finite(step, "discriminator loss", d_loss, batch)?;
        let grads = tape.backward(ld)?.collect(&dvars.vars);
        state.discriminator_opt.step(&mut state.aligner.discriminator.tensors_mut(), &grads)?;
    }

    // joint step: towers and G
    let log_probs = if state.config.debias {
        Some(state.frequencies.log_probabilities(&codes)?)
    } else {
        None
    };
    let mut tape = Tape::new();
    let tvars = state.towers.bind(&mut tape);
    let gvars = state.aligner.generator.bind(&mut tape);
    let dvars = state.aligner.discriminator.bind(&mut tape);
    let xv = tape.leaf(x);
    let zv = tape.leaf(z);
    let gz = state.aligner.generator.forward_tape(&mut tape, &gvars, zv)?;
    let u = state.towers.user_repr_tape(&mut tape, &tvars, xv)?;
    let q = state.towers.query_repr_tape(&mut tape, &tvars, gz)?;
    let retrieval = in_batch_loss_tape(&mut tape, u, q, state.towers.temperature, log_probs.as_deref(), Some(&betas))?;
    let retrieval_value = tape.scalar(retrieval);
    check_finite(step, "retrieval loss", retrieval_value, batch)?;
    let (total, g_loss) = if both {
        let ga = tape.select_rows(gz, &active)?;
        let gs = tape.select_rows(gz, &starter)?;
        let lg = generator_loss_tape(&mut tape, &state.aligner, &dvars, ga, gs)?;
        let g_loss = tape.scalar(lg);
        check_finite(step, "generator loss", g_loss, batch)?;
        let weighted = tape.affine(lg, state.config.lambda_adv, 0.0)?;
        (tape.add(retrieval, weighted)?, g_loss)
    } else {
        (retrieval, 0.0)
    };
    let total_value = tape.scalar(total);
    let grads = tape.backward(total)?;
    let tower_grads = grads.collect(&tvars.all());
    let gen_grads = grads.collect(&gvars.vars);
    state.tower_opt.step(&mut state.towers.tensors_mut(), &tower_grads)?;
    state.generator_opt.step(&mut state.aligner.generator.tensors_mut(), &gen_grads)?;
    state.step += 1;

    Ok(StepMetrics {
        step: state.step,
        total_loss: total_value,
        retrieval_loss: retrieval_value,
        discriminator_loss: d_loss,
        generator_loss: g_loss,
        beta_mean: betas.iter().sum::<f64>() / betas.len() as f64,
        discriminator_accuracy: d_acc,
        n_active: active.len(),
        n_starter: starter.len(),
    })
}
