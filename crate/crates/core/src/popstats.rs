//! Streaming code frequencies and the frequency-corrected in-batch loss.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::discretizer::{SemanticCode, LEVELS};
use crate::error::{shape_err, Error, Result};
use crate::numcore::{Tape, Var};
use crate::towers::{in_batch_loss_tape, TowerVars, TrainBatch, TwoTowerParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    /// Frequency of the full code tuple.
    #[default]
    Joint,
    /// Product of per-level marginal frequencies.
    PerLevel,
}

/// Decayed counts over code tuples with Laplace smoothing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrequencyTable {
    counts: BTreeMap<SemanticCode, f64>,
    level_counts: Vec<Vec<f64>>,
    total: f64,
    gamma: f64,
    alpha: f64,
    level_sizes: [usize; LEVELS],
    estimator: Estimator,
}

impl FrequencyTable {
    pub fn new(level_sizes: [usize; LEVELS], gamma: f64, alpha: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err(Error::Config(format!("decay must lie in (0, 1], got {gamma}")));
        }
        if !(alpha >= 0.0 && alpha.is_finite()) {
            return Err(Error::Config(format!("smoothing must be >= 0, got {alpha}")));
        }
        if level_sizes.contains(&0) {
            return Err(Error::Config("every level needs at least one code".into()));
        }
        Ok(Self {
            counts: BTreeMap::new(),
            level_counts: level_sizes.iter().map(|&k| vec![0.0; k]).collect(),
            total: 0.0,
            gamma,
            alpha,
            level_sizes,
            estimator: Estimator::Joint,
        })
    }

    pub fn with_estimator(mut self, estimator: Estimator) -> Self {
        self.estimator = estimator;
        self
    }

    pub fn estimator(&self) -> Estimator {
        self.estimator
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn level_sizes(&self) -> [usize; LEVELS] {
        self.level_sizes
    }

    /// `V = K1·K2·K3`.
    pub fn support_size(&self) -> f64 {
        self.level_sizes.iter().map(|&k| k as f64).product()
    }

    pub fn total(&self) -> f64 {
        self.total
    }

    pub fn count(&self, code: &SemanticCode) -> f64 {
        self.counts.get(code).copied().unwrap_or(0.0)
    }

    pub fn counts(&self) -> &BTreeMap<SemanticCode, f64> {
        &self.counts
    }

    pub fn level_counts(&self) -> &[Vec<f64>] {
        &self.level_counts
    }

    /// Overwrites marginals and total, e.g. when restoring a checkpoint.
    pub(crate) fn restore_marginals(&mut self, level_counts: Vec<Vec<f64>>, total: f64) -> Result<()> {
        if level_counts.len() != LEVELS || level_counts.iter().zip(self.level_sizes).any(|(c, k)| c.len() != k) {
            return Err(Error::Format("frequency marginals do not match the level sizes".into()));
        }
        self.level_counts = level_counts;
        self.total = total;
        Ok(())
    }

    /// Rebuilds a table whose later levels hold a single code, so joint
    /// counts coincide with the first-level marginals.
    pub(crate) fn from_marginals(level_counts: Vec<Vec<f64>>, total: f64, gamma: f64, alpha: f64) -> Result<Self> {
        let sizes = [0, 1, 2].map(|l| level_counts.get(l).map_or(0, Vec::len));
        if sizes[1] != 1 || sizes[2] != 1 {
            return Err(Error::Format("only single-code trailing levels can be rebuilt from marginals".into()));
        }
        let mut t = Self::new(sizes, gamma, alpha)?;
        for (i, &c) in level_counts[0].iter().enumerate() {
            if c != 0.0 {
                t.counts.insert(SemanticCode::new(i as u32, 0, 0), c);
            }
        }
        t.restore_marginals(level_counts, total)?;
        Ok(t)
    }

    /// Grows the first level to `k` codes, keeping existing counts. Only
    /// meaningful without smoothing, where the support size drops out.
    pub(crate) fn widen_first_level(&mut self, k: usize) {
        if k > self.level_sizes[0] {
            self.level_sizes[0] = k;
            self.level_counts[0].resize(k, 0.0);
        }
    }

    fn check_code(&self, code: &SemanticCode) -> Result<()> {
        for l in 0..LEVELS {
            if code.level(l) >= self.level_sizes[l] {
                return Err(Error::Argument(format!(
                    "code index {} out of range at level {l} (K = {})",
                    code.level(l),
                    self.level_sizes[l]
                )));
            }
        }
        Ok(())
    }

    /// Decays every count by γ, then adds one per observed code. An empty
    /// batch leaves the table untouched.
    pub fn update(&mut self, codes: &[SemanticCode]) -> Result<()> {
        if codes.is_empty() {
            return Ok(());
        }
        for c in codes {
            self.check_code(c)?;
        }
        if self.gamma != 1.0 {
            let g = self.gamma;
            self.counts.values_mut().for_each(|v| *v *= g);
            self.level_counts.iter_mut().flatten().for_each(|v| *v *= g);
            self.total *= g;
        }
        for c in codes {
            *self.counts.entry(*c).or_insert(0.0) += 1.0;
            for l in 0..LEVELS {
                self.level_counts[l][c.level(l)] += 1.0;
            }
        }
        self.total += codes.len() as f64;
        Ok(())
    }

    /// Smoothed probability `(count + α) / (total + α·V)`.
    pub fn probability(&self, code: &SemanticCode) -> Result<f64> {
        self.check_code(code)?;
        let p = match self.estimator {
            Estimator::Joint => {
                let denom = self.total + self.alpha * self.support_size();
                if denom <= 0.0 {
                    return Err(Error::Numeric("probability of a code in an empty, unsmoothed table".into()));
                }
                (self.count(code) + self.alpha) / denom
            }
            Estimator::PerLevel => {
                let mut p = 1.0;
                for l in 0..LEVELS {
                    let denom = self.total + self.alpha * self.level_sizes[l] as f64;
                    if denom <= 0.0 {
                        return Err(Error::Numeric("probability of a code in an empty, unsmoothed table".into()));
                    }
                    p *= (self.level_counts[l][code.level(l)] + self.alpha) / denom;
                }
                p
            }
        };
        if p <= 0.0 {
            return Err(Error::Numeric(format!("code {:?} has zero probability", code.0)));
        }
        Ok(p)
    }

    pub fn log_probabilities(&self, codes: &[SemanticCode]) -> Result<Vec<f64>> {
        codes.iter().map(|c| self.probability(c).map(f64::ln)).collect()
    }

    /// Snapshot as CSV with columns `c1,c2,c3,count,probability`, one row per
    /// observed code, in code order.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["c1", "c2", "c3", "count", "probability"]).map_err(csv_err)?;
        for (code, count) in &self.counts {
            let p = self.probability(code)?;
            out.write_record([
                code.0[0].to_string(),
                code.0[1].to_string(),
                code.0[2].to_string(),
                format!("{count:?}"),
                format!("{p:?}"),
            ])
            .map_err(csv_err)?;
        }
        out.flush()?;
        Ok(())
    }

    /// Rebuilds counts from a CSV snapshot. Per-level marginals are
    /// recomputed from the joint counts; the total is their sum.
    pub fn read_csv<R: Read>(r: R, level_sizes: [usize; LEVELS], gamma: f64, alpha: f64) -> Result<Self> {
        let mut table = Self::new(level_sizes, gamma, alpha)?;
        let mut rd = csv::Reader::from_reader(r);
        let headers = rd.headers().map_err(csv_err)?.clone();
        if headers.iter().collect::<Vec<_>>() != ["c1", "c2", "c3", "count", "probability"] {
            return Err(Error::Format(format!("unexpected frequency CSV header {headers:?}")));
        }
        for rec in rd.records() {
            let rec = rec.map_err(csv_err)?;
            let idx = |i: usize| -> Result<u32> {
                rec.get(i)
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| Error::Format(format!("bad code field in {rec:?}")))
            };
            let code = SemanticCode([idx(0)?, idx(1)?, idx(2)?]);
            table.check_code(&code).map_err(|e| Error::Format(e.to_string()))?;
            let count: f64 = rec
                .get(3)
                .and_then(|s| s.parse().ok())
                .filter(|c: &f64| *c >= 0.0)
                .ok_or_else(|| Error::Format(format!("bad count field in {rec:?}")))?;
            table.counts.insert(code, count);
            for l in 0..LEVELS {
                table.level_counts[l][code.level(l)] += count;
            }
            table.total += count;
        }
        Ok(table)
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("csv: {e}"))
}

/// Per-row log-probabilities for the codes carried by `batch`.
pub fn batch_log_probabilities(batch: &TrainBatch, table: &FrequencyTable) -> Result<Vec<f64>> {
    let codes = batch
        .codes
        .iter()
        .enumerate()
        .map(|(i, c)| c.ok_or_else(|| Error::Argument(format!("batch row {i} has no semantic code"))))
        .collect::<Result<Vec<_>>>()?;
    table.log_probabilities(&codes)
}

fn batch_betas(batch: &TrainBatch) -> Result<Vec<f64>> {
    if batch.betas.len() != batch.len() {
        return shape_err("debiased_loss", format!("{} weights for {} rows", batch.betas.len(), batch.len()));
    }
    Ok(batch.betas.clone())
}

/// Frequency-corrected, β-weighted in-batch softmax on precomputed
/// user and query representations.
pub fn debiased_loss_tape(
    tape: &mut Tape,
    user_repr: Var,
    query_repr: Var,
    temperature: f64,
    log_probs: &[f64],
    betas: &[f64],
) -> Result<Var> {
    in_batch_loss_tape(tape, user_repr, query_repr, temperature, Some(log_probs), Some(betas))
}

/// Records the full debiased loss for `batch` using bound tower parameters.
pub fn debiased_loss_from_params(
    tape: &mut Tape,
    vars: &TowerVars,
    batch: &TrainBatch,
    params: &TwoTowerParams,
    table: &FrequencyTable,
) -> Result<Var> {
    batch.validate()?;
    let log_probs = batch_log_probabilities(batch, table)?;
    let betas = batch_betas(batch)?;
    let users = tape.leaf(batch.user_features.clone());
    let queries = tape.leaf(batch.query_embeddings.clone());
    let u = params.user_repr_tape(tape, vars, users)?;
    let q = params.query_repr_tape(tape, vars, queries)?;
    debiased_loss_tape(tape, u, q, params.temperature, &log_probs, &betas)
}

/// `-(1/B) Σ_i β_i log softmax_i(f(u_i, q_j)/τ − log P(c_j))`.
pub fn debiased_loss(batch: &TrainBatch, params: &TwoTowerParams, table: &FrequencyTable) -> Result<f64> {
    params.validate()?;
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let loss = debiased_loss_from_params(&mut tape, &vars, batch, params, table)?;
    Ok(tape.scalar(loss))
}
