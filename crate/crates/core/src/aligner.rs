//! Adversarial alignment of active-query and starter embeddings.
//!
//! `G` (intent mapper) is a residual MLP that starts as the identity; `D`
//! (domain discriminator) outputs `P(domain = Active)`. `D` descends
//! `L_D = -E_A[log D(G z)] - E_S[log(1 - D(G z))]`; `G` descends the
//! non-saturating, label-flipped counterpart `L_G`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::numcore::{Activation, Layer, MlpParams, MlpVars, Optimizer, OptimizerKind, Tape, Tensor2, Var};

/// Clamp applied to discriminator outputs inside the losses.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignerParams {
    pub generator: MlpParams,
    pub discriminator: MlpParams,
}

#[derive(Clone, Debug)]
pub struct AlignerVars {
    pub generator: MlpVars,
    pub discriminator: MlpVars,
}

impl AlignerParams {
    /// Identity-initialised residual `G` and a `dim → hidden → 1` sigmoid `D`.
    pub fn new<R: Rng + ?Sized>(dim: usize, g_hidden: &[usize], d_hidden: &[usize], rng: &mut R) -> Result<Self> {
        let generator = MlpParams::residual_identity(dim, g_hidden, Activation::Tanh, rng)?;
        let mut dims = vec![dim];
        dims.extend_from_slice(d_hidden);
        dims.push(1);
        let discriminator = MlpParams::random(&dims, Activation::Relu, Activation::Sigmoid, rng)?;
        let p = Self { generator, discriminator };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.discriminator.validate()?;
        if self.generator.in_dim() != self.generator.out_dim() {
            return shape_err("AlignerParams", "generator must map embed_dim to embed_dim");
        }
        if self.discriminator.in_dim() != self.generator.out_dim() || self.discriminator.out_dim() != 1 {
            return shape_err("AlignerParams", "discriminator must map embed_dim to 1");
        }
        if self.discriminator.final_activation() != Activation::Sigmoid {
            return Err(Error::Config("discriminator must end in a sigmoid".into()));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.generator.in_dim()
    }

    pub fn bind(&self, tape: &mut Tape) -> AlignerVars {
        AlignerVars {
            generator: self.generator.bind(tape),
            discriminator: self.discriminator.bind(tape),
        }
    }

    /// `G(z)`.
    pub fn map_intent(&self, z: &Tensor2) -> Result<Tensor2> {
        self.generator.forward(z)
    }

    /// `D(z_mapped)` as a `B x 1` column of `P(Active)`.
    pub fn discriminate(&self, z_mapped: &Tensor2) -> Result<Tensor2> {
        self.discriminator.forward(z_mapped)
    }

    /// `β = 1 - D(G(z))`, clamped to `[0, 1]`; never differentiated.
    pub fn sample_weight(&self, z: &Tensor2) -> Result<Vec<f64>> {
        let d = self.discriminate(&self.map_intent(z)?)?;
        Ok(d.data().iter().map(|p| beta_from_probability(*p)).collect())
    }

    /// Replaces the discriminator's last layer by zeros (outputs 0.5).
    pub fn zero_discriminator_head(&mut self) {
        let last = self.discriminator.layers.len() - 1;
        let l = &self.discriminator.layers[last];
        self.discriminator.layers[last] = Layer::zeros(l.in_dim(), l.out_dim(), l.activation);
    }
}

pub fn beta_from_probability(p: f64) -> f64 {
    (1.0 - p).clamp(0.0, 1.0)
}

fn clamped_d(tape: &mut Tape, params: &AlignerParams, d_vars: &MlpVars, mapped: Var) -> Result<Var> {
    let p = params.discriminator.forward_tape(tape, d_vars, mapped)?;
    tape.clamp(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// `-mean log(p)` of a column of probabilities.
fn neg_mean_log(tape: &mut Tape, p: Var) -> Result<Var> {
    let l = tape.log(p)?;
    let m = tape.mean(l)?;
    tape.affine(m, -1.0, 0.0)
}

/// `-mean log(1 - p)`.
fn neg_mean_log_complement(tape: &mut Tape, p: Var) -> Result<Var> {
    let q = tape.affine(p, -1.0, 1.0)?;
    neg_mean_log(tape, q)
}

/// Discriminator loss on already-mapped batches.
pub fn discriminator_loss_tape(
    tape: &mut Tape,
    params: &AlignerParams,
    d_vars: &MlpVars,
    active_mapped: Var,
    starter_mapped: Var,
) -> Result<Var> {
    let pa = clamped_d(tape, params, d_vars, active_mapped)?;
    let ps = clamped_d(tape, params, d_vars, starter_mapped)?;
    let a = neg_mean_log(tape, pa)?;
    let s = neg_mean_log_complement(tape, ps)?;
    tape.add(a, s)
}

/// Non-saturating generator loss on already-mapped batches.
pub fn generator_loss_tape(
    tape: &mut Tape,
    params: &AlignerParams,
    d_vars: &MlpVars,
    active_mapped: Var,
    starter_mapped: Var,
) -> Result<Var> {
    let pa = clamped_d(tape, params, d_vars, active_mapped)?;
    let ps = clamped_d(tape, params, d_vars, starter_mapped)?;
    let a = neg_mean_log_complement(tape, pa)?;
    let s = neg_mean_log(tape, ps)?;
    tape.add(a, s)
}

fn check_batches(active_z: &Tensor2, starter_z: &Tensor2, dim: usize) -> Result<()> {
    if active_z.rows() == 0 || starter_z.rows() == 0 {
        return Err(Error::Argument("adversarial losses need non-empty active and starter batches".into()));
    }
    if active_z.cols() != dim || starter_z.cols() != dim {
        return shape_err("adv_losses", format!("inputs {} / {} vs dim {dim}", active_z.cols(), starter_z.cols()));
    }
    Ok(())
}

/// Records `(L_D, L_G)` with `G` applied to both raw batches.
pub fn adv_losses_tape(
    tape: &mut Tape,
    params: &AlignerParams,
    vars: &AlignerVars,
    active_z: Var,
    starter_z: Var,
) -> Result<(Var, Var)> {
    check_batches(tape.value(active_z), tape.value(starter_z), params.dim())?;
    let ga = params.generator.forward_tape(tape, &vars.generator, active_z)?;
    let gs = params.generator.forward_tape(tape, &vars.generator, starter_z)?;
    let ld = discriminator_loss_tape(tape, params, &vars.discriminator, ga, gs)?;
    let lg = generator_loss_tape(tape, params, &vars.discriminator, ga, gs)?;
    Ok((ld, lg))
}

/// `(L_D, L_G)` for raw active and starter embeddings.
pub fn adv_losses(active_z: &Tensor2, starter_z: &Tensor2, params: &AlignerParams) -> Result<(f64, f64)> {
    params.validate()?;
    check_batches(active_z, starter_z, params.dim())?;
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let a = tape.leaf(active_z.clone());
    let s = tape.leaf(starter_z.clone());
    let (ld, lg) = adv_losses_tape(&mut tape, params, &vars, a, s)?;
    Ok((tape.scalar(ld), tape.scalar(lg)))
}

/// Fraction of rows classified correctly at threshold 0.5.
pub fn discriminator_accuracy(params: &AlignerParams, active_mapped: &Tensor2, starter_mapped: &Tensor2) -> Result<f64> {
    let pa = params.discriminate(active_mapped)?;
    let ps = params.discriminate(starter_mapped)?;
    let correct = pa.data().iter().filter(|p| **p > 0.5).count() + ps.data().iter().filter(|p| **p <= 0.5).count();
    let total = pa.len() + ps.len();
    if total == 0 {
        return Err(Error::Argument("accuracy of empty batches".into()));
    }
    Ok(correct as f64 / total as f64)
}

/// Settings of standalone adversarial training (no retrieval loss).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlignConfig {
    pub steps: usize,
    /// Rows drawn (with replacement) from each domain per step.
    pub batch_size: usize,
    pub lr_generator: f64,
    pub lr_discriminator: f64,
    pub optimizer: OptimizerKind,
    /// `false` freezes `G` and trains only `D`.
    pub train_generator: bool,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 128,
            lr_generator: 1e-3,
            lr_discriminator: 1e-3,
            optimizer: OptimizerKind::Adam,
            train_generator: true,
        }
    }
}

/// Per-step losses of [`train_alignment`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AlignHistory {
    pub discriminator_loss: Vec<f64>,
    pub generator_loss: Vec<f64>,
}

/// Optimisers for `G` and `D`, kept apart.
#[derive(Clone, Debug)]
pub struct AlignerOptimizers {
    pub generator: Optimizer,
    pub discriminator: Optimizer,
}

impl AlignerOptimizers {
    pub fn new(params: &AlignerParams, kind: OptimizerKind, lr_generator: f64, lr_discriminator: f64) -> Self {
        Self {
            generator: Optimizer::for_params(kind, lr_generator, &params.generator.tensors()),
            discriminator: Optimizer::for_params(kind, lr_discriminator, &params.discriminator.tensors()),
        }
    }
}

/// One descent step of `D` on `L_D` with `G` held fixed. Returns `L_D`.
pub fn discriminator_step(params: &mut AlignerParams, opt: &mut Optimizer, active_z: &Tensor2, starter_z: &Tensor2) -> Result<f64> {
    check_batches(active_z, starter_z, params.dim())?;
    let ga = params.map_intent(active_z)?;
    let gs = params.map_intent(starter_z)?;
    let mut tape = Tape::new();
    let d_vars = params.discriminator.bind(&mut tape);
    let a = tape.leaf(ga);
    let s = tape.leaf(gs);
    let ld = discriminator_loss_tape(&mut tape, params, &d_vars, a, s)?;
    let grads = tape.backward(ld)?.collect(&d_vars.vars);
    opt.step(&mut params.discriminator.tensors_mut(), &grads)?;
    Ok(tape.scalar(ld))
}

/// One descent step of `G` on `L_G` with `D` held fixed. Returns `L_G`.
pub fn generator_step(params: &mut AlignerParams, opt: &mut Optimizer, active_z: &Tensor2, starter_z: &Tensor2) -> Result<f64> {
    check_batches(active_z, starter_z, params.dim())?;
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let a = tape.leaf(active_z.clone());
    let s = tape.leaf(starter_z.clone());
    let ga = params.generator.forward_tape(&mut tape, &vars.generator, a)?;
    let gs = params.generator.forward_tape(&mut tape, &vars.generator, s)?;
    let lg = generator_loss_tape(&mut tape, params, &vars.discriminator, ga, gs)?;
    let grads = tape.backward(lg)?.collect(&vars.generator.vars);
    opt.step(&mut params.generator.tensors_mut(), &grads)?;
    Ok(tape.scalar(lg))
}

fn draw_rows<R: Rng + ?Sized>(x: &Tensor2, n: usize, rng: &mut R) -> Result<Tensor2> {
    let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..x.rows())).collect();
    x.select_rows(&idx)
}

/// Alternates one `D` step and one `G` step per iteration on minibatches
/// drawn from the two pools.
pub fn train_alignment<R: Rng + ?Sized>(
    params: &mut AlignerParams,
    active: &Tensor2,
    starter: &Tensor2,
    config: &AlignConfig,
    rng: &mut R,
) -> Result<AlignHistory> {
    check_batches(active, starter, params.dim())?;
    if config.batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    let mut opt = AlignerOptimizers::new(params, config.optimizer, config.lr_generator, config.lr_discriminator);
    let mut hist = AlignHistory::default();
    for _ in 0..config.steps {
        let a = draw_rows(active, config.batch_size, rng)?;
        let s = draw_rows(starter, config.batch_size, rng)?;
        hist.discriminator_loss.push(discriminator_step(params, &mut opt.discriminator, &a, &s)?);
        if config.train_generator {
            let a = draw_rows(active, config.batch_size, rng)?;
            let s = draw_rows(starter, config.batch_size, rng)?;
            hist.generator_loss.push(generator_step(params, &mut opt.generator, &a, &s)?);
        }
    }
    Ok(hist)
}
