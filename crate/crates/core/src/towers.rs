//! Two-tower scoring and the in-batch softmax loss.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::discretizer::SemanticCode;
use crate::error::{shape_err, Error, Result};
use crate::numcore::{Activation, MlpParams, MlpVars, Tape, Tensor2, Var};
use crate::synthworld::Domain;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwoTowerParams {
    pub user_tower: MlpParams,
    /// Learnable head on top of the (frozen, external) query embedding.
    pub query_head: MlpParams,
    pub temperature: f64,
    /// L2-normalise both representations before the inner product.
    pub normalize: bool,
}

impl TwoTowerParams {
    /// Random MLP user tower (`user_dim → hidden… → embed_dim`) and an
    /// identity-initialised linear query head.
    pub fn new<R: Rng + ?Sized>(
        user_dim: usize,
        embed_dim: usize,
        hidden: &[usize],
        temperature: f64,
        normalize: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let mut dims = vec![user_dim];
        dims.extend_from_slice(hidden);
        dims.push(embed_dim);
        let params = Self {
            user_tower: MlpParams::random(&dims, Activation::Tanh, Activation::Identity, rng)?,
            query_head: MlpParams::identity(embed_dim),
            temperature,
            normalize,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::Config(format!("temperature must be > 0, got {}", self.temperature)));
        }
        self.user_tower.validate()?;
        self.query_head.validate()?;
        if self.user_tower.out_dim() != self.query_head.out_dim() {
            return shape_err(
                "TwoTowerParams",
                format!("user tower emits {} dims, query head {}", self.user_tower.out_dim(), self.query_head.out_dim()),
            );
        }
        Ok(())
    }

    pub fn tensors(&self) -> Vec<&Tensor2> {
        let mut v = self.user_tower.tensors();
        v.extend(self.query_head.tensors());
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor2> {
        let mut v = self.user_tower.tensors_mut();
        v.extend(self.query_head.tensors_mut());
        v
    }

    pub fn bind(&self, tape: &mut Tape) -> TowerVars {
        TowerVars {
            user: self.user_tower.bind(tape),
            query: self.query_head.bind(tape),
        }
    }

    pub fn user_repr(&self, features: &Tensor2) -> Result<Tensor2> {
        let u = self.user_tower.forward(features)?;
        Ok(if self.normalize { u.normalize_rows() } else { u })
    }

    /// Query representation of already-mapped query inputs.
    pub fn query_repr(&self, inputs: &Tensor2) -> Result<Tensor2> {
        let q = self.query_head.forward(inputs)?;
        Ok(if self.normalize { q.normalize_rows() } else { q })
    }

    pub fn user_repr_tape(&self, tape: &mut Tape, vars: &TowerVars, features: Var) -> Result<Var> {
        let u = self.user_tower.forward_tape(tape, &vars.user, features)?;
        if self.normalize {
            tape.normalize_rows(u)
        } else {
            Ok(u)
        }
    }

    pub fn query_repr_tape(&self, tape: &mut Tape, vars: &TowerVars, inputs: Var) -> Result<Var> {
        let q = self.query_head.forward_tape(tape, &vars.query, inputs)?;
        if self.normalize {
            tape.normalize_rows(q)
        } else {
            Ok(q)
        }
    }
}

/// Tape handles for [`TwoTowerParams::tensors`] (user tower first).
#[derive(Clone, Debug)]
pub struct TowerVars {
    pub user: MlpVars,
    pub query: MlpVars,
}

impl TowerVars {
    pub fn all(&self) -> Vec<Var> {
        self.user.vars.iter().chain(&self.query.vars).copied().collect()
    }
}

/// One in-batch training batch: row `i` pairs user `i` with its positive
/// query `i`; every other row's query is a negative.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainBatch {
    pub user_features: Tensor2,
    pub query_embeddings: Tensor2,
    pub domains: Vec<Domain>,
    pub codes: Vec<Option<SemanticCode>>,
    pub betas: Vec<f64>,
}

impl TrainBatch {
    /// Batch with unset codes and unit weights.
    pub fn new(user_features: Tensor2, query_embeddings: Tensor2, domains: Vec<Domain>) -> Result<Self> {
        let b = user_features.rows();
        let batch = Self {
            user_features,
            query_embeddings,
            codes: vec![None; b],
            betas: vec![1.0; b],
            domains,
        };
        batch.validate()?;
        Ok(batch)
    }

    pub fn len(&self) -> usize {
        self.user_features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<()> {
        let b = self.user_features.rows();
        if b == 0 {
            return Err(Error::Argument("empty batch".into()));
        }
        if self.query_embeddings.rows() != b || self.domains.len() != b || self.codes.len() != b || self.betas.len() != b {
            return shape_err(
                "TrainBatch",
                format!(
                    "row counts differ: users {b}, queries {}, domains {}, codes {}, betas {}",
                    self.query_embeddings.rows(),
                    self.domains.len(),
                    self.codes.len(),
                    self.betas.len()
                ),
            );
        }
        Ok(())
    }

    /// Rows re-ordered by `perm`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        Ok(Self {
            user_features: self.user_features.select_rows(perm)?,
            query_embeddings: self.query_embeddings.select_rows(perm)?,
            domains: perm.iter().map(|&i| self.domains[i]).collect(),
            codes: perm.iter().map(|&i| self.codes[i]).collect(),
            betas: perm.iter().map(|&i| self.betas[i]).collect(),
        })
    }
}

/// `logits[i][j] = <user_i, query_j>`.
pub fn score(user_repr: &Tensor2, query_repr: &Tensor2) -> Result<Tensor2> {
    if user_repr.cols() != query_repr.cols() {
        return shape_err("score", format!("user dim {} vs query dim {}", user_repr.cols(), query_repr.cols()));
    }
    user_repr.matmul_t(query_repr)
}

/// In-batch softmax cross-entropy over `user · queryᵀ / τ`.
///
/// `log_q`, when given, is subtracted from column `j` of every row (the
/// popularity correction); `weights` scales each row's term.
pub fn in_batch_loss_tape(
    tape: &mut Tape,
    user: Var,
    query: Var,
    temperature: f64,
    log_q: Option<&[f64]>,
    weights: Option<&[f64]>,
) -> Result<Var> {
    if !(temperature > 0.0) {
        return Err(Error::Config(format!("temperature must be > 0, got {temperature}")));
    }
    let logits = tape.matmul_t(user, query)?;
    let mut logits = tape.affine(logits, 1.0 / temperature, 0.0)?;
    let b = tape.value(logits).rows();
    if let Some(lq) = log_q {
        if lq.len() != tape.value(logits).cols() {
            return shape_err("in_batch_loss", format!("{} log-probabilities for {} candidates", lq.len(), tape.value(logits).cols()));
        }
        let neg: Vec<f64> = lq.iter().map(|v| -v).collect();
        let offsets = tape.leaf(Tensor2::row_vector(&neg));
        logits = tape.add_row(logits, offsets)?;
    }
    let targets: Vec<usize> = (0..b).collect();
    tape.softmax_ce(logits, &targets, weights)
}

/// Records the towers on `tape` and returns the in-batch loss node.
pub fn base_loss_tape(tape: &mut Tape, vars: &TowerVars, batch: &TrainBatch, params: &TwoTowerParams) -> Result<Var> {
    batch.validate()?;
    let x = tape.leaf(batch.user_features.clone());
    let z = tape.leaf(batch.query_embeddings.clone());
    let u = params.user_repr_tape(tape, vars, x)?;
    let q = params.query_repr_tape(tape, vars, z)?;
    in_batch_loss_tape(tape, u, q, params.temperature, None, None)
}

/// `L = -(1/B) Σ_i log softmax_j(f(u_i, q_j) / τ)[i]`.
pub fn base_loss(batch: &TrainBatch, params: &TwoTowerParams) -> Result<f64> {
    params.validate()?;
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let loss = base_loss_tape(&mut tape, &vars, batch, params)?;
    Ok(tape.scalar(loss))
}

/// Same loss from an explicit logit matrix (already divided by τ).
pub fn in_batch_loss_from_logits(logits: &Tensor2) -> Result<f64> {
    let mut tape = Tape::new();
    let l = tape.leaf(logits.clone());
    let targets: Vec<usize> = (0..logits.rows()).collect();
    let loss = tape.softmax_ce(l, &targets, None)?;
    Ok(tape.scalar(loss))
}
