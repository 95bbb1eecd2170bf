//! Three-level residual quantizer ("semantic IDs").
//!
//! Quantization is greedy: each level picks the codeword nearest to the
//! current residual and subtracts it. Codebooks are fitted with EMA k-means
//! updates. With pinning on, codeword 0 of every level is the zero vector
//! and is never updated, which makes residual norms non-increasing.

use std::collections::VecDeque;
use std::io::{Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::numcore::{squared_distance, Tape, Tensor2, Var};

pub const LEVELS: usize = 3;
pub const CODEBOOK_MAGIC: &[u8; 4] = b"PARQ";
pub const CODEBOOK_VERSION: u32 = 1;

/// Code tuple `(c1, c2, c3)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SemanticCode(pub [u32; LEVELS]);

impl SemanticCode {
    pub fn new(c1: u32, c2: u32, c3: u32) -> Self {
        Self([c1, c2, c3])
    }

    pub fn level(&self, l: usize) -> usize {
        self.0[l] as usize
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Codebook {
    pub codewords: Tensor2,
    pub ema_counts: Vec<f64>,
    pub ema_sums: Tensor2,
}

impl Codebook {
    fn zeros(k: usize, dim: usize) -> Self {
        Self {
            codewords: Tensor2::zeros(k, dim),
            ema_counts: vec![0.0; k],
            ema_sums: Tensor2::zeros(k, dim),
        }
    }

    pub fn k(&self) -> usize {
        self.codewords.rows()
    }

    /// Nearest codeword to `x`; ties go to the lowest index.
    pub fn nearest(&self, x: &[f64]) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (k, c) in self.codewords.iter_rows().enumerate() {
            let d = squared_distance(x, c);
            if d < best_d {
                best = k;
                best_d = d;
            }
        }
        best
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodebookSet {
    pub levels: Vec<Codebook>,
    /// Codeword 0 of every level is held at the zero vector.
    pub pinned_zero: bool,
    /// Set once codewords have been fitted or loaded.
    pub fitted: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Quantized {
    pub code: SemanticCode,
    pub residual: Vec<f64>,
    pub reconstruction: Vec<f64>,
}

impl CodebookSet {
    /// All-zero, unfitted codebooks with `k` codewords per level.
    pub fn empty(k: usize, dim: usize, pinned_zero: bool) -> Result<Self> {
        if k == 0 || dim == 0 {
            return Err(Error::Config("codebooks need k >= 1 and dim >= 1".into()));
        }
        Ok(Self {
            levels: (0..LEVELS).map(|_| Codebook::zeros(k, dim)).collect(),
            pinned_zero,
            fitted: false,
        })
    }

    /// Codebooks from explicit codewords (one tensor per level).
    pub fn from_codewords(levels: [Tensor2; LEVELS]) -> Result<Self> {
        let dim = levels[0].cols();
        for (l, c) in levels.iter().enumerate() {
            if c.rows() == 0 || c.cols() != dim {
                return shape_err("CodebookSet", format!("level {l} has shape {:?}", c.shape()));
            }
        }
        let pinned_zero = levels.iter().all(|c| c.row(0).iter().all(|v| *v == 0.0));
        Ok(Self {
            levels: levels
                .into_iter()
                .map(|c| Codebook {
                    ema_counts: vec![0.0; c.rows()],
                    ema_sums: Tensor2::zeros(c.rows(), c.cols()),
                    codewords: c,
                })
                .collect(),
            pinned_zero,
            fitted: true,
        })
    }

    pub fn dim(&self) -> usize {
        self.levels[0].codewords.cols()
    }

    pub fn k(&self, level: usize) -> usize {
        self.levels[level].k()
    }

    /// Size of the joint code space `K1·K2·K3`.
    pub fn support_size(&self) -> usize {
        self.levels.iter().map(Codebook::k).product()
    }

    fn check_ready(&self) -> Result<()> {
        if !self.fitted {
            return Err(Error::State("codebooks have not been fitted".into()));
        }
        Ok(())
    }

    /// Greedy residual quantization of one vector.
    pub fn quantize(&self, z: &[f64]) -> Result<Quantized> {
        self.check_ready()?;
        if z.len() != self.dim() {
            return shape_err("quantize", format!("input dim {} vs codebook dim {}", z.len(), self.dim()));
        }
        let mut residual = z.to_vec();
        let mut recon = vec![0.0; z.len()];
        let mut code = [0u32; LEVELS];
        for (l, book) in self.levels.iter().enumerate() {
            let k = book.nearest(&residual);
            code[l] = k as u32;
            for ((r, s), c) in residual.iter_mut().zip(recon.iter_mut()).zip(book.codewords.row(k)) {
                *r -= c;
                *s += c;
            }
        }
        Ok(Quantized {
            code: SemanticCode(code),
            residual,
            reconstruction: recon,
        })
    }

    pub fn quantize_rows(&self, z: &Tensor2) -> Result<Vec<Quantized>> {
        z.iter_rows().map(|r| self.quantize(r)).collect()
    }

    /// Sum of the addressed codewords.
    pub fn reconstruct(&self, code: &SemanticCode) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim()];
        for (l, book) in self.levels.iter().enumerate() {
            let k = code.level(l);
            if k >= book.k() {
                return Err(Error::Argument(format!("code index {k} out of range at level {l} (K = {})", book.k())));
            }
            for (o, c) in out.iter_mut().zip(book.codewords.row(k)) {
                *o += c;
            }
        }
        Ok(out)
    }

    /// Residual norms after each level for one input.
    pub fn residual_norms(&self, z: &[f64]) -> Result<[f64; LEVELS]> {
        self.check_ready()?;
        let mut residual = z.to_vec();
        let mut out = [0.0; LEVELS];
        for (l, book) in self.levels.iter().enumerate() {
            let k = book.nearest(&residual);
            for (r, c) in residual.iter_mut().zip(book.codewords.row(k)) {
                *r -= c;
            }
            out[l] = residual.iter().map(|v| v * v).sum::<f64>().sqrt();
        }
        Ok(out)
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        let k = self.k(0);
        if self.levels.iter().any(|b| b.k() != k) {
            return Err(Error::Format("codebook file needs the same K on every level".into()));
        }
        w.write_all(CODEBOOK_MAGIC)?;
        w.write_all(&CODEBOOK_VERSION.to_le_bytes())?;
        w.write_all(&(LEVELS as u32).to_le_bytes())?;
        w.write_all(&(k as u32).to_le_bytes())?;
        w.write_all(&(self.dim() as u32).to_le_bytes())?;
        for book in &self.levels {
            for v in book.codewords.data() {
                w.write_all(&(*v as f32).to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() < 20 || &bytes[..4] != CODEBOOK_MAGIC {
            return Err(Error::Format("not a PARQ codebook file".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes")) as usize;
        let (version, levels, k, dim) = (word(4), word(8), word(12), word(16));
        if version as u32 != CODEBOOK_VERSION {
            return Err(Error::Format(format!("unsupported PARQ version {version}")));
        }
        if levels != LEVELS {
            return Err(Error::Format(format!("PARQ file has {levels} levels, expected {LEVELS}")));
        }
        if k == 0 || dim == 0 {
            return Err(Error::Format("PARQ header has zero K or dim".into()));
        }
        let per_level = k * dim;
        if bytes.len() - 20 != LEVELS * per_level * 4 {
            return Err(Error::Format(format!(
                "PARQ body has {} bytes, header implies {}",
                bytes.len() - 20,
                LEVELS * per_level * 4
            )));
        }
        let values: Vec<f64> = bytes[20..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        let mk = |l: usize| Tensor2::new(k, dim, values[l * per_level..(l + 1) * per_level].to_vec());
        Self::from_codewords([mk(0)?, mk(1)?, mk(2)?])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RqConfig {
    /// Codewords per level.
    pub k: usize,
    pub decay: f64,
    pub commitment: f64,
    /// Levels that are trained; the rest stay all-zero.
    pub active_levels: usize,
    pub pin_zero: bool,
    pub epochs: usize,
    /// Codewords whose EMA count falls below this after an epoch are
    /// re-seeded from recent inputs.
    pub dead_threshold: f64,
}

impl Default for RqConfig {
    fn default() -> Self {
        Self {
            k: 64,
            decay: 0.99,
            commitment: 0.25,
            active_levels: LEVELS,
            pin_zero: true,
            epochs: 20,
            dead_threshold: 1e-3,
        }
    }
}

impl RqConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("rq.k must be >= 1".into()));
        }
        if !(self.decay > 0.0 && self.decay < 1.0) {
            return Err(Error::Config("rq.decay must lie in (0, 1)".into()));
        }
        if self.active_levels == 0 || self.active_levels > LEVELS {
            return Err(Error::Config(format!("rq.active_levels must lie in 1..={LEVELS}")));
        }
        if self.epochs == 0 {
            return Err(Error::Config("rq.epochs must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitReport {
    /// Mean squared reconstruction error per epoch.
    pub epoch_mse: Vec<f64>,
    /// `commitment · mean ‖z − sg(reconstruction)‖²` at the last epoch.
    pub commitment_loss: f64,
    pub reinitialized: usize,
}

/// Fits codebooks on a buffered stream of batches.
///
/// Each epoch walks every batch; per level the residuals are assigned to
/// their nearest codeword and the EMA statistics updated
/// (`n ← γ n + (1-γ) count`, `s ← γ s + (1-γ) Σ r`, `c = s / n`). After an
/// epoch, dead codewords are re-seeded from randomly chosen residuals of the
/// most recent batches.
pub fn fit_rqvae<R: Rng + ?Sized>(stream: &[Tensor2], config: &RqConfig, rng: &mut R) -> Result<(CodebookSet, FitReport)> {
    config.validate()?;
    let first = stream
        .iter()
        .find(|b| b.rows() > 0)
        .ok_or_else(|| Error::Argument("fit_rqvae needs a non-empty stream".into()))?;
    let dim = first.cols();
    if stream.iter().any(|b| b.cols() != dim) {
        return shape_err("fit_rqvae", "batches disagree on dimension");
    }
    let mut books = CodebookSet::empty(config.k, dim, config.pin_zero)?;
    let mut initialized = [false; LEVELS];
    // recent per-level residuals, for seeding and re-seeding codewords
    let recent_cap = 4 * config.k.max(64);
    let mut recent: Vec<VecDeque<Vec<f64>>> = (0..LEVELS).map(|_| VecDeque::new()).collect();
    let first_free = usize::from(config.pin_zero);
    let mut report = FitReport {
        epoch_mse: Vec::with_capacity(config.epochs),
        commitment_loss: 0.0,
        reinitialized: 0,
    };

    for _epoch in 0..config.epochs {
        let mut sq_err = 0.0;
        let mut count = 0usize;
        for batch in stream.iter().filter(|b| b.rows() > 0) {
            let mut residual = batch.clone();
            for l in 0..config.active_levels {
                for r in residual.iter_rows() {
                    if recent[l].len() == recent_cap {
                        recent[l].pop_front();
                    }
                    recent[l].push_back(r.to_vec());
                }
                if !initialized[l] {
                    seed_codewords(&mut books.levels[l], first_free, &recent[l], rng);
                    initialized[l] = true;
                }
                let book = &mut books.levels[l];
                let assign: Vec<usize> = residual.iter_rows().map(|r| book.nearest(r)).collect();
                let mut counts = vec![0.0; book.k()];
                let mut sums = Tensor2::zeros(book.k(), dim);
                for (i, &k) in assign.iter().enumerate() {
                    counts[k] += 1.0;
                    for (s, v) in sums.row_mut(k).iter_mut().zip(residual.row(i)) {
                        *s += v;
                    }
                }
                let g = config.decay;
                for k in first_free..book.k() {
                    book.ema_counts[k] = g * book.ema_counts[k] + (1.0 - g) * counts[k];
                    let n = book.ema_counts[k];
                    for j in 0..dim {
                        let s = g * book.ema_sums.get(k, j) + (1.0 - g) * sums.get(k, j);
                        book.ema_sums.set(k, j, s);
                        if n > 0.0 {
                            book.codewords.set(k, j, s / n);
                        }
                    }
                }
                for (i, &k) in assign.iter().enumerate() {
                    for (r, c) in residual.row_mut(i).iter_mut().zip(book.codewords.row(k)) {
                        *r -= c;
                    }
                }
            }
            sq_err += residual.data().iter().map(|v| v * v).sum::<f64>();
            count += residual.rows();
        }
        books.fitted = true;
        let mse = sq_err / (count * dim) as f64;
        report.epoch_mse.push(mse);
        report.commitment_loss = config.commitment * sq_err / count as f64;

        for l in 0..config.active_levels {
            let book = &mut books.levels[l];
            for k in first_free..book.k() {
                if book.ema_counts[k] < config.dead_threshold {
                    let pool = &recent[l];
                    let pick = pool[rng.random_range(0..pool.len())].clone();
                    book.codewords.row_mut(k).copy_from_slice(&pick);
                    book.ema_counts[k] = 0.0;
                    book.ema_sums.row_mut(k).iter_mut().for_each(|v| *v = 0.0);
                    report.reinitialized += 1;
                }
            }
        }
    }

    // final pass: report the error of the codebooks as returned
    let mut sq_err = 0.0;
    let mut count = 0usize;
    for batch in stream {
        for r in batch.iter_rows() {
            let q = books.quantize(r)?;
            sq_err += q.residual.iter().map(|v| v * v).sum::<f64>();
            count += 1;
        }
    }
    if let Some(last) = report.epoch_mse.last_mut() {
        *last = sq_err / (count * dim) as f64;
    }
    report.commitment_loss = config.commitment * sq_err / count as f64;
    Ok((books, report))
}

/// k-means++ seeding of codewords `first..K` from `pool`. Already placed
/// codewords (including a pinned zero) count as existing centres.
fn seed_codewords<R: Rng + ?Sized>(book: &mut Codebook, first: usize, pool: &VecDeque<Vec<f64>>, rng: &mut R) {
    let mut d2: Vec<f64> = if first > 0 {
        pool.iter()
            .map(|p| (0..first).map(|k| squared_distance(p, book.codewords.row(k))).fold(f64::INFINITY, f64::min))
            .collect()
    } else {
        vec![1.0; pool.len()]
    };
    for k in first..book.k() {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut idx = pool.len() - 1;
            for (i, w) in d2.iter().enumerate() {
                if u < *w {
                    idx = i;
                    break;
                }
                u -= w;
            }
            idx
        } else {
            rng.random_range(0..pool.len())
        };
        book.codewords.row_mut(k).copy_from_slice(&pool[pick]);
        for (d, p) in d2.iter_mut().zip(pool) {
            *d = d.min(squared_distance(p, &pool[pick]));
        }
    }
}

/// Quantizer inserted into a differentiable graph: the forward value is
/// the reconstruction, gradients pass straight through to `z`.
pub fn quantize_straight_through(tape: &mut Tape, books: &CodebookSet, z: Var) -> Result<(Var, Vec<SemanticCode>)> {
    let q = books.quantize_rows(tape.value(z))?;
    let rows: Vec<&[f64]> = q.iter().map(|x| x.reconstruction.as_slice()).collect();
    let recon = Tensor2::from_rows(&rows)?;
    let out = tape.straight_through(z, recon)?;
    Ok((out, q.into_iter().map(|x| x.code).collect()))
}

/// `β_c · mean ‖z − sg(recon)‖²` over rows, for use on a tape.
pub fn commitment_loss_tape(tape: &mut Tape, books: &CodebookSet, z: Var, weight: f64) -> Result<Var> {
    let q = books.quantize_rows(tape.value(z))?;
    let rows: Vec<&[f64]> = q.iter().map(|x| x.reconstruction.as_slice()).collect();
    let recon = tape.leaf(Tensor2::from_rows(&rows)?.scale(-1.0));
    let diff = tape.add(z, recon)?;
    let sq = tape.mul(diff, diff)?;
    let s = tape.sum(sq)?;
    let rows = tape.value(z).rows().max(1) as f64;
    tape.affine(s, weight / rows, 0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(rows: &[[f64; 2]]) -> Tensor2 {
        Tensor2::from_rows(rows).unwrap()
    }

    #[test]
    fn single_level_nearest() {
        let books = CodebookSet::from_codewords([t(&[[0.0, 0.0], [1.0, 1.0]]), t(&[[0.0, 0.0]]), t(&[[0.0, 0.0]])]).unwrap();
        let q = books.quantize(&[0.9, 1.2]).unwrap();
        assert_eq!(q.code, SemanticCode::new(1, 0, 0));
        assert!((q.residual[0] + 0.1).abs() < 1e-12 && (q.residual[1] - 0.2).abs() < 1e-12);
    }

    #[test]
    fn exact_codeword_has_zero_residual() {
        let books = CodebookSet::from_codewords([t(&[[3.0, -1.0], [0.5, 0.5]]), t(&[[0.0, 0.0], [1.0, 0.0]]), t(&[[0.0, 0.0]])]).unwrap();
        let q = books.quantize(&[3.0, -1.0]).unwrap();
        assert_eq!(q.residual, vec![0.0, 0.0]);
        assert_eq!(q.reconstruction, vec![3.0, -1.0]);
    }

    #[test]
    fn three_level_example() {
        let books = CodebookSet::from_codewords([
            t(&[[1.0, 1.0], [-1.0, -1.0]]),
            t(&[[0.5, 0.0], [0.0, 0.5]]),
            t(&[[0.0, 0.0], [1.0, 1.0]]),
        ])
        .unwrap();
        let q = books.quantize(&[1.5, 1.0]).unwrap();
        assert_eq!(q.code, SemanticCode::new(0, 0, 0));
        assert_eq!(q.reconstruction, vec![1.5, 1.0]);
        assert_eq!(q.residual, vec![0.0, 0.0]);
        assert_eq!(books.reconstruct(&q.code).unwrap(), q.reconstruction);
    }

    #[test]
    fn ties_pick_lowest_index() {
        let books = CodebookSet::from_codewords([t(&[[1.0, 0.0], [-1.0, 0.0]]), t(&[[0.0, 0.0]]), t(&[[0.0, 0.0]])]).unwrap();
        assert_eq!(books.quantize(&[0.0, 5.0]).unwrap().code.level(0), 0);
    }

    #[test]
    fn unfitted_is_state_error() {
        let books = CodebookSet::empty(4, 2, true).unwrap();
        assert!(matches!(books.quantize(&[0.0, 0.0]), Err(Error::State(_))));
    }

    #[test]
    fn reconstruct_rejects_out_of_range() {
        let books = CodebookSet::from_codewords([t(&[[0.0, 0.0]]), t(&[[0.0, 0.0]]), t(&[[0.0, 0.0]])]).unwrap();
        assert_eq!(books.reconstruct(&SemanticCode::new(0, 0, 0)).unwrap(), vec![0.0, 0.0]);
        assert!(matches!(books.reconstruct(&SemanticCode::new(0, 1, 0)), Err(Error::Argument(_))));
    }

    #[test]
    fn repeated_point_fixed_point() {
        let p = [0.7, -1.3, 2.2];
        let batch = Tensor2::from_rows(&vec![p; 32]).unwrap();
        let cfg = RqConfig {
            k: 1,
            pin_zero: false,
            epochs: 3,
            ..RqConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (books, _) = fit_rqvae(&vec![batch; 10], &cfg, &mut rng).unwrap();
        for (a, b) in books.levels[0].codewords.row(0).iter().zip(p) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn empty_stream_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(fit_rqvae(&[], &RqConfig::default(), &mut rng).is_err());
    }

    #[test]
    fn fit_is_deterministic() {
        let mut data_rng = ChaCha8Rng::seed_from_u64(1);
        let stream: Vec<Tensor2> = (0..5).map(|_| Tensor2::random_normal(64, 4, 1.0, &mut data_rng)).collect();
        let cfg = RqConfig { k: 8, epochs: 3, ..RqConfig::default() };
        let a = fit_rqvae(&stream, &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap().0;
        let b = fit_rqvae(&stream, &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap().0;
        assert_eq!(a, b);
        assert!(a.levels.iter().all(|l| l.codewords.row(0).iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn codebook_file_round_trip() {
        let books = CodebookSet::from_codewords([
            t(&[[0.0, 0.0], [1.5, -2.0]]),
            t(&[[0.0, 0.0], [0.25, 0.5]]),
            t(&[[0.0, 0.0], [-0.125, 4.0]]),
        ])
        .unwrap();
        let mut buf = Vec::new();
        books.write(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"PARQ");
        assert_eq!(buf.len(), 20 + 3 * 2 * 2 * 4);
        let back = CodebookSet::read(buf.as_slice()).unwrap();
        assert_eq!(back.levels[1].codewords, books.levels[1].codewords);
        assert!(back.pinned_zero);
        assert!(CodebookSet::read(&buf[..30]).is_err());
    }

    #[test]
    fn straight_through_passes_gradient() {
        let books = CodebookSet::from_codewords([t(&[[0.0, 0.0], [1.0, 1.0]]), t(&[[0.0, 0.0]]), t(&[[0.0, 0.0]])]).unwrap();
        let mut tape = Tape::new();
        let z = tape.leaf(t(&[[0.9, 1.2], [0.1, -0.3]]));
        let (q, codes) = quantize_straight_through(&mut tape, &books, z).unwrap();
        assert_eq!(codes[0].level(0), 1);
        assert_eq!(tape.value(q).row(0), &[1.0, 1.0]);
        let w = tape.leaf(t(&[[2.0, -1.0], [0.5, 3.0]]));
        let prod = tape.mul(q, w).unwrap();
        let loss = tape.sum(prod).unwrap();
        let g = tape.backward(loss).unwrap().get(z);
        assert_eq!(g, t(&[[2.0, -1.0], [0.5, 3.0]]));
    }
}
