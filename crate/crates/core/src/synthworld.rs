//! Synthetic users, starter corpus and active-query process.
//!
//! The world lives directly in embedding space and doubles as the embedding
//! provider: starter and active-query texts are represented by the vectors
//! generated here (or loaded from a `PABE` file) instead of a language model.

use std::io::{BufRead, Read, Write};

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{dot, sigmoid, Tensor2};
use crate::rng::substream;

/// Largest accepted condition number of the active-domain shift matrix.
const MAX_SHIFT_CONDITION: f64 = 50.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub n_users: usize,
    pub n_starters: usize,
    pub embed_dim: usize,
    pub n_intents: usize,
    pub zipf_exponent: f64,
    /// Magnitude of the affine shift applied to active queries.
    pub shift_scale: f64,
    pub active_noise_sigma: f64,
    pub p_active: f64,
    pub seed: u64,
    /// Spread of users and starters around their intent centroid.
    pub intent_spread: f64,
    /// Weight of the shared "mainstream" direction in every user's intent.
    /// Popular starters lean towards the same direction in proportion to
    /// their popularity.
    pub mainstream_weight: f64,
    /// Noise on the user features seen by the user tower.
    pub user_feature_noise: f64,
    /// Click model `sigmoid(slope * <u, q> + offset)`.
    pub click_slope: f64,
    pub click_offset: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            n_users: 2000,
            n_starters: 1000,
            embed_dim: 16,
            n_intents: 40,
            zipf_exponent: 1.0,
            shift_scale: 1.0,
            active_noise_sigma: 0.1,
            p_active: 0.3,
            seed: 7,
            intent_spread: 0.35,
            mainstream_weight: 2.0,
            user_feature_noise: 0.05,
            click_slope: 4.0,
            click_offset: -1.0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_users == 0 || self.n_starters == 0 || self.embed_dim == 0 || self.n_intents == 0 {
            return bad("world.n_users, n_starters, embed_dim and n_intents must be positive");
        }
        if self.n_intents > self.n_starters {
            return bad("world.n_intents must not exceed world.n_starters");
        }
        if !(0.0..=1.0).contains(&self.p_active) {
            return bad("world.p_active must lie in [0, 1]");
        }
        for (name, v) in [
            ("zipf_exponent", self.zipf_exponent),
            ("shift_scale", self.shift_scale),
            ("active_noise_sigma", self.active_noise_sigma),
            ("intent_spread", self.intent_spread),
            ("mainstream_weight", self.mainstream_weight),
            ("user_feature_noise", self.user_feature_noise),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("world.{name} must be finite and >= 0")));
            }
        }
        if !self.click_slope.is_finite() || !self.click_offset.is_finite() {
            return bad("world.click_slope and click_offset must be finite");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Active,
    Starter,
}

/// One logged interaction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InteractionEvent {
    pub user_id: usize,
    pub domain: Domain,
    pub starter_id: Option<usize>,
    pub label: u8,
    #[serde(rename = "ts")]
    pub timestamp: u64,
    #[serde(rename = "embedding")]
    pub query_embedding: Vec<f64>,
}

impl InteractionEvent {
    pub fn is_positive(&self) -> bool {
        self.label == 1
    }

    pub fn validate(&self, world: &SyntheticWorld) -> Result<()> {
        if self.user_id >= world.n_users() {
            return Err(Error::Argument(format!("user_id {} out of range", self.user_id)));
        }
        if self.query_embedding.len() != world.embed_dim() {
            return Err(Error::Argument(format!(
                "embedding has {} values, world dim is {}",
                self.query_embedding.len(),
                world.embed_dim()
            )));
        }
        if self.label > 1 {
            return Err(Error::Argument(format!("label {} is not binary", self.label)));
        }
        match (self.domain, self.starter_id) {
            (Domain::Active, None) if self.label == 1 => Ok(()),
            (Domain::Active, None) => Err(Error::Argument("active events must carry label 1".into())),
            (Domain::Active, Some(_)) => Err(Error::Argument("active events carry no starter_id".into())),
            (Domain::Starter, Some(k)) if k < world.n_starters() => Ok(()),
            (Domain::Starter, _) => Err(Error::Argument("starter event without a valid starter_id".into())),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticWorld {
    pub config: WorldConfig,
    pub intent_centroids: Tensor2,
    pub mainstream: Vec<f64>,
    pub user_intents: Tensor2,
    pub user_intent_ids: Vec<usize>,
    pub user_features: Tensor2,
    pub starter_embeddings: Tensor2,
    pub starter_intent_ids: Vec<usize>,
    /// Zipf weights in starter index order; index 0 is the most popular.
    pub popularity: Vec<f64>,
    /// Active-domain map `x ↦ A x + b`.
    pub shift_matrix: Tensor2,
    pub shift_offset: Vec<f64>,
}

/// Zipf probabilities `∝ 1 / rank^s` over `n` ranks.
pub fn zipf_weights(n: usize, exponent: f64) -> Vec<f64> {
    let raw: Vec<f64> = (1..=n).map(|r| (r as f64).powf(-exponent)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

fn unit_gaussian(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut v: Vec<f64> = (0..dim).map(|_| normal.sample(rng)).collect();
    let n = dot(&v, &v).sqrt().max(1e-12);
    v.iter_mut().for_each(|x| *x /= n);
    v
}

fn normalized(mut v: Vec<f64>) -> Vec<f64> {
    let n = dot(&v, &v).sqrt().max(1e-12);
    v.iter_mut().for_each(|x| *x /= n);
    v
}

fn condition_number(a: &Tensor2) -> f64 {
    let m = DMatrix::from_row_slice(a.rows(), a.cols(), a.data());
    let sv = m.singular_values();
    let max = sv.iter().copied().fold(0.0, f64::max);
    let min = sv.iter().copied().fold(f64::INFINITY, f64::min);
    if min > 0.0 {
        max / min
    } else {
        f64::INFINITY
    }
}

/// Builds the world; a pure function of the config (including its seed).
pub fn generate_world(config: &WorldConfig) -> Result<SyntheticWorld> {
    config.validate()?;
    let d = config.embed_dim;
    let mut rng = substream(config.seed, "world");
    let gauss = Normal::new(0.0, 1.0).expect("unit normal");

    let centroids: Vec<Vec<f64>> = (0..config.n_intents).map(|_| unit_gaussian(d, &mut rng)).collect();
    let mainstream = unit_gaussian(d, &mut rng);
    let spread = config.intent_spread / (d as f64).sqrt();

    let mut user_rows = Vec::with_capacity(config.n_users);
    let mut user_intent_ids = Vec::with_capacity(config.n_users);
    let mut feature_rows = Vec::with_capacity(config.n_users);
    let feat_noise = config.user_feature_noise / (d as f64).sqrt();
    for _ in 0..config.n_users {
        let k = rng.random_range(0..config.n_intents);
        let u: Vec<f64> = (0..d)
            .map(|j| centroids[k][j] + config.mainstream_weight * mainstream[j] + spread * gauss.sample(&mut rng))
            .collect();
        let u = normalized(u);
        let f: Vec<f64> = u.iter().map(|x| x + feat_noise * gauss.sample(&mut rng)).collect();
        user_rows.push(u);
        feature_rows.push(f);
        user_intent_ids.push(k);
    }

    let popularity = zipf_weights(config.n_starters, config.zipf_exponent);
    let top = popularity[0];
    let mut starter_rows = Vec::with_capacity(config.n_starters);
    let mut starter_intent_ids = Vec::with_capacity(config.n_starters);
    for (i, p) in popularity.iter().enumerate() {
        // every intent owns at least one starter
        let k = if i < config.n_intents { i } else { rng.random_range(0..config.n_intents) };
        let lean = config.mainstream_weight * p / top;
        let s: Vec<f64> = (0..d)
            .map(|j| centroids[k][j] + lean * mainstream[j] + spread * gauss.sample(&mut rng))
            .collect();
        starter_rows.push(normalized(s));
        starter_intent_ids.push(k);
    }

    let mut shift_rng = substream(config.seed, "shift");
    let (shift_matrix, shift_offset) = loop {
        let r = Tensor2::random_normal(d, d, 1.0 / (d as f64).sqrt(), &mut shift_rng);
        let b: Vec<f64> = (0..d).map(|_| gauss.sample(&mut shift_rng) / (d as f64).sqrt()).collect();
        if config.shift_scale == 0.0 {
            break (Tensor2::identity(d), vec![0.0; d]);
        }
        let a = Tensor2::identity(d).add(&r.scale(config.shift_scale))?;
        if condition_number(&a) <= MAX_SHIFT_CONDITION {
            break (a, b.iter().map(|x| config.shift_scale * x).collect());
        }
    };

    Ok(SyntheticWorld {
        config: config.clone(),
        intent_centroids: Tensor2::from_rows(&centroids)?,
        mainstream,
        user_intents: Tensor2::from_rows(&user_rows)?,
        user_intent_ids,
        user_features: Tensor2::from_rows(&feature_rows)?,
        starter_embeddings: Tensor2::from_rows(&starter_rows)?,
        starter_intent_ids,
        popularity,
        shift_matrix,
        shift_offset,
    })
}

impl SyntheticWorld {
    pub fn n_users(&self) -> usize {
        self.user_intents.rows()
    }

    pub fn n_starters(&self) -> usize {
        self.starter_embeddings.rows()
    }

    pub fn embed_dim(&self) -> usize {
        self.starter_embeddings.cols()
    }

    pub fn user_feature_dim(&self) -> usize {
        self.user_features.cols()
    }

    /// Replaces the generated starter corpus with externally computed
    /// embeddings (e.g. read from a `PABE` file). Intents are reassigned to
    /// the nearest centroid by inner product.
    pub fn with_starter_embeddings(mut self, embeddings: Tensor2) -> Result<Self> {
        if embeddings.cols() != self.embed_dim() {
            return Err(Error::Config(format!(
                "embedding file has dim {}, world.embed_dim is {}",
                embeddings.cols(),
                self.embed_dim()
            )));
        }
        if embeddings.rows() == 0 {
            return Err(Error::Config("embedding file holds no rows".into()));
        }
        let scores = embeddings.matmul_t(&self.intent_centroids)?;
        self.starter_intent_ids = scores
            .iter_rows()
            .map(|r| (0..r.len()).max_by(|a, b| r[*a].total_cmp(&r[*b])).unwrap_or(0))
            .collect();
        self.popularity = zipf_weights(embeddings.rows(), self.config.zipf_exponent);
        self.config.n_starters = embeddings.rows();
        self.starter_embeddings = embeddings;
        Ok(self)
    }

    /// Ground-truth click probability `sigmoid(a <u, q> + c)`.
    pub fn click_probability(&self, user_id: usize, query: &[f64]) -> f64 {
        sigmoid(self.config.click_slope * dot(self.user_intents.row(user_id), query) + self.config.click_offset)
    }

    pub fn starter_click_probability(&self, user_id: usize, starter_id: usize) -> f64 {
        self.click_probability(user_id, self.starter_embeddings.row(starter_id))
    }

    /// `A x + b`.
    pub fn apply_shift(&self, x: &[f64]) -> Vec<f64> {
        (0..self.embed_dim())
            .map(|i| dot(self.shift_matrix.row(i), x) + self.shift_offset[i])
            .collect()
    }

    /// Active query typed by `user_id`: shift of the noisy user intent.
    pub fn active_query<R: Rng + ?Sized>(&self, user_id: usize, rng: &mut R) -> Vec<f64> {
        let sigma = self.config.active_noise_sigma;
        let u = self.user_intents.row(user_id);
        let noisy: Vec<f64> = if sigma > 0.0 {
            let normal = Normal::new(0.0, sigma).expect("finite sigma");
            u.iter().map(|x| x + normal.sample(rng)).collect()
        } else {
            u.to_vec()
        };
        self.apply_shift(&noisy)
    }

    /// Active event for `user_id` at time `ts`.
    pub fn active_event<R: Rng + ?Sized>(&self, user_id: usize, ts: u64, rng: &mut R) -> InteractionEvent {
        InteractionEvent {
            user_id,
            domain: Domain::Active,
            starter_id: None,
            label: 1,
            timestamp: ts,
            query_embedding: self.active_query(user_id, rng),
        }
    }

    /// Starter event with a label drawn from the click model.
    pub fn starter_event<R: Rng + ?Sized>(&self, user_id: usize, starter_id: usize, ts: u64, rng: &mut R) -> InteractionEvent {
        let p = self.starter_click_probability(user_id, starter_id);
        InteractionEvent {
            user_id,
            domain: Domain::Starter,
            starter_id: Some(starter_id),
            label: u8::from(rng.random::<f64>() < p),
            timestamp: ts,
            query_embedding: self.starter_embeddings.row(starter_id).to_vec(),
        }
    }
}

/// Draws `n` logged events with timestamps `first_ts..first_ts + n`.
///
/// Starter ids are sampled `∝ popularity × click probability` for a
/// uniformly chosen user.
pub fn sample_events_at<R: Rng + ?Sized>(
    world: &SyntheticWorld,
    n: usize,
    p_active: f64,
    rng: &mut R,
    first_ts: u64,
) -> Result<Vec<InteractionEvent>> {
    if n == 0 {
        return Err(Error::Argument("sample_events needs n > 0".into()));
    }
    if !(0.0..=1.0).contains(&p_active) {
        return Err(Error::Config("p_active must lie in [0, 1]".into()));
    }
    let mut weights = vec![0.0; world.n_starters()];
    let mut out = Vec::with_capacity(n);
    for t in 0..n as u64 {
        let user = rng.random_range(0..world.n_users());
        let ts = first_ts + t;
        if rng.random::<f64>() < p_active {
            out.push(world.active_event(user, ts, rng));
            continue;
        }
        let mut total = 0.0;
        for (s, w) in weights.iter_mut().enumerate() {
            *w = world.popularity[s] * world.starter_click_probability(user, s);
            total += *w;
        }
        let mut pick = rng.random::<f64>() * total;
        let mut starter = world.n_starters() - 1;
        for (s, w) in weights.iter().enumerate() {
            if pick < *w {
                starter = s;
                break;
            }
            pick -= w;
        }
        out.push(world.starter_event(user, starter, ts, rng));
    }
    Ok(out)
}

pub fn sample_events<R: Rng + ?Sized>(world: &SyntheticWorld, n: usize, p_active: f64, rng: &mut R) -> Result<Vec<InteractionEvent>> {
    sample_events_at(world, n, p_active, rng, 0)
}

/// Embedding provider: the stored query vector as a `1 x dim` tensor.
pub fn embed(event: &InteractionEvent) -> Tensor2 {
    Tensor2::row_vector(&event.query_embedding)
}

/// Stacks the query embeddings of `events` into a `B x dim` tensor.
pub fn embed_batch(events: &[&InteractionEvent]) -> Result<Tensor2> {
    let rows: Vec<&[f64]> = events.iter().map(|e| e.query_embedding.as_slice()).collect();
    Tensor2::from_rows(&rows)
}

// ---------------------------------------------------------------------------
// Event log (NDJSON)

pub fn write_event_log<W: Write>(mut w: W, events: &[InteractionEvent]) -> Result<()> {
    for e in events {
        serde_json::to_writer(&mut w, e).map_err(|e| Error::Format(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_event_log<R: BufRead>(r: R) -> Result<Vec<InteractionEvent>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let e: InteractionEvent =
            serde_json::from_str(&line).map_err(|err| Error::Format(format!("event log line {}: {err}", i + 1)))?;
        out.push(e);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Embedding file: "PABE", u32 version, u32 dim, u64 count, count*dim f32 LE

pub const EMBEDDING_MAGIC: &[u8; 4] = b"PABE";
pub const EMBEDDING_VERSION: u32 = 1;

pub fn write_embeddings<W: Write>(mut w: W, embeddings: &Tensor2) -> Result<()> {
    w.write_all(EMBEDDING_MAGIC)?;
    w.write_all(&EMBEDDING_VERSION.to_le_bytes())?;
    w.write_all(&(embeddings.cols() as u32).to_le_bytes())?;
    w.write_all(&(embeddings.rows() as u64).to_le_bytes())?;
    for v in embeddings.data() {
        w.write_all(&(*v as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_embeddings<R: Read>(mut r: R) -> Result<Tensor2> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() < 20 || &bytes[..4] != EMBEDDING_MAGIC {
        return Err(Error::Format("not a PABE embedding file".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != EMBEDDING_VERSION {
        return Err(Error::Format(format!("unsupported PABE version {version}")));
    }
    let dim = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let count = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let expected = count
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::Format("PABE header overflows".into()))?;
    if bytes.len() - 20 != expected {
        return Err(Error::Format(format!("PABE body has {} bytes, header implies {expected}", bytes.len() - 20)));
    }
    let data = bytes[20..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Tensor2::new(count, dim, data)
}
