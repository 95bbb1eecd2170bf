use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use log::info;
use pabridge_core::config::ExperimentConfig;
use pabridge_core::discretizer::CodebookSet;
use pabridge_core::evalsim::{build_holdout, evaluate, run_loop, write_loop_csv, Policy, RunMeta};
use pabridge_core::rng::substream;
use pabridge_core::synthworld::{generate_world, read_event_log, sample_events, write_embeddings, write_event_log, InteractionEvent, SyntheticWorld};
use pabridge_core::trainer::{load_checkpoint, save_checkpoint, TrainConfig, TrainState, Variant};
use serde_json::json;

use crate::{CliError, Common};

pub type CmdResult = Result<(), CliError>;

/// Resolved config plus the directory outputs go to.
pub struct Run {
    pub config: ExperimentConfig,
    pub out: PathBuf,
}

impl Run {
    pub fn meta(&self) -> RunMeta {
        RunMeta {
            config_hash: self.config.hash(),
            world_hash: self.config.world_hash(),
            seed: self.config.train.seed,
        }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }
}

pub fn load_run(common: &Common) -> Result<Run, CliError> {
    let mut config = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
            ExperimentConfig::from_json_str(&text)?
        }
        None => ExperimentConfig::default(),
    };
    for s in &common.sets {
        config.apply_set(s)?;
    }
    if let Some(seed) = common.seed {
        config.train.seed = seed;
    }
    if let Some(out) = &common.out {
        config.out_dir = out.to_string_lossy().into_owned();
    }
    config.validate()?;
    let out = PathBuf::from(&config.out_dir);
    fs::create_dir_all(&out)?;
    Ok(Run { config, out })
}

/// Writes `<file>.meta.json` next to a binary or NDJSON output.
fn write_sidecar(run: &Run, file: &Path, command: &str, extra: serde_json::Value) -> CmdResult {
    let meta = run.meta();
    let mut doc = json!({
        "file": file.file_name().map(|f| f.to_string_lossy().into_owned()),
        "command": command,
        "config_hash": meta.config_hash,
        "world_hash": meta.world_hash,
        "seed": meta.seed,
        "config": run.config,
    });
    if let (Some(d), serde_json::Value::Object(e)) = (doc.as_object_mut(), extra) {
        d.extend(e);
    }
    let mut side = file.as_os_str().to_owned();
    side.push(".meta.json");
    let mut w = BufWriter::new(File::create(PathBuf::from(side))?);
    serde_json::to_writer_pretty(&mut w, &doc).map_err(|e| CliError::Runtime(e.to_string()))?;
    writeln!(w)?;
    Ok(())
}

fn variant_name(v: Variant) -> String {
    serde_json::to_value(v).ok().and_then(|x| x.as_str().map(String::from)).unwrap_or_default()
}

fn read_events(run: &Run, events_file: Option<PathBuf>, world: &SyntheticWorld) -> Result<Vec<InteractionEvent>, CliError> {
    let path = events_file.unwrap_or_else(|| run.path("events.ndjson"));
    let file = File::open(&path).map_err(|e| CliError::Runtime(format!("cannot open event log {}: {e}", path.display())))?;
    let events = read_event_log(BufReader::new(file))?;
    for (i, e) in events.iter().enumerate() {
        e.validate(world)
            .map_err(|err| CliError::Runtime(format!("{} line {}: {err}", path.display(), i + 1)))?;
    }
    info!("read {} events from {}", events.len(), path.display());
    Ok(events)
}

pub fn gen_data(common: &Common, n_events: usize) -> CmdResult {
    let run = load_run(common)?;
    if n_events == 0 {
        return Err(CliError::Usage("--events must be >= 1".into()));
    }
    let world = generate_world(&run.config.world)?;
    let mut rng = substream(run.config.train.seed, "gen-data/events");
    let events = sample_events(&world, n_events, run.config.world.p_active, &mut rng)?;

    let log_path = run.path("events.ndjson");
    let mut w = BufWriter::new(File::create(&log_path)?);
    write_event_log(&mut w, &events)?;
    w.flush()?;
    write_sidecar(&run, &log_path, "gen-data", json!({ "events": n_events }))?;

    let emb_path = run.path("starters.pabe");
    let mut w = BufWriter::new(File::create(&emb_path)?);
    write_embeddings(&mut w, &world.starter_embeddings)?;
    w.flush()?;
    write_sidecar(&run, &emb_path, "gen-data", json!({ "starters": world.n_starters() }))?;

    info!("wrote {} events and {} starter embeddings to {}", n_events, world.n_starters(), run.out.display());
    println!("{}", log_path.display());
    Ok(())
}

pub fn fit_rqvae(common: &Common, events_file: Option<PathBuf>) -> CmdResult {
    let run = load_run(common)?;
    let world = generate_world(&run.config.world)?;
    let events = read_events(&run, events_file, &world)?;
    let cfg = TrainConfig {
        variant: Variant::Full,
        item_logq: false,
        ..run.config.train.clone()
    };
    let mut state = TrainState::new(cfg, world.user_feature_dim(), world.embed_dim())?;
    let report = state.warm_up(&events)?;
    let books = state.codebooks.as_ref().expect("warm-up sets codebooks");

    let path = run.path("codebooks.parq");
    let mut w = BufWriter::new(File::create(&path)?);
    books.write(&mut w)?;
    w.flush()?;
    write_sidecar(
        &run,
        &path,
        "fit-rqvae",
        json!({ "commitment_loss": report.commitment_loss, "reinitialized": report.reinitialized }),
    )?;

    let meta = run.meta();
    let mut csv = csv::Writer::from_path(run.path("rq_fit.csv"))?;
    csv.write_record(["epoch", "mse", "config_hash", "world_hash", "seed"])?;
    for (i, mse) in report.epoch_mse.iter().enumerate() {
        csv.write_record([(i + 1).to_string(), mse.to_string(), meta.config_hash.clone(), meta.world_hash.clone(), meta.seed.to_string()])?;
    }
    csv.flush()?;
    info!(
        "codebooks: k={} final mse {:?}, {} codes reinitialized",
        books.k(0),
        report.epoch_mse.last(),
        report.reinitialized
    );
    println!("{}", path.display());
    Ok(())
}

pub fn train(common: &Common, events_file: Option<PathBuf>, codebooks: Option<PathBuf>, resume: Option<PathBuf>) -> CmdResult {
    let run = load_run(common)?;
    let world = generate_world(&run.config.world)?;
    let events = read_events(&run, events_file, &world)?;
    let mut state = match &resume {
        Some(p) => load_checkpoint(p)?,
        None => TrainState::new(run.config.train.clone(), world.user_feature_dim(), world.embed_dim())?,
    };
    if state.user_dim() != world.user_feature_dim() || state.embed_dim() != world.embed_dim() {
        return Err(CliError::Runtime("checkpoint dimensions do not match the configured world".into()));
    }
    if let Some(p) = &codebooks {
        let books = CodebookSet::read(BufReader::new(File::open(p)?))?;
        if books.dim() != world.embed_dim() {
            return Err(CliError::Runtime(format!("codebooks have dim {} but the world has {}", books.dim(), world.embed_dim())));
        }
        if (0..3).any(|l| books.k(l) > state.config.rq.k) {
            return Err(CliError::Usage(format!("train.rq.k: codebooks hold {} codes per level but train.rq.k is {}", books.k(0), state.config.rq.k)));
        }
        state.codebooks = Some(books);
    }
    let steps = run.config.train.steps;
    let metrics = state.train_on(&events, &world.user_features, steps)?;
    if let Some(last) = metrics.last() {
        info!("step {} total loss {:.5}", last.step, last.total_loss);
    }

    let ckpt = run.path("checkpoint.pack");
    save_checkpoint(&state, &ckpt)?;
    write_sidecar(&run, &ckpt, "train", json!({ "step": state.step }))?;

    let meta = run.meta();
    let mut csv = csv::Writer::from_path(run.path("train_metrics.csv"))?;
    csv.write_record([
        "step",
        "total_loss",
        "retrieval_loss",
        "discriminator_loss",
        "generator_loss",
        "beta_mean",
        "discriminator_accuracy",
        "n_active",
        "n_starter",
        "config_hash",
        "world_hash",
        "seed",
    ])?;
    for m in &metrics {
        csv.write_record([
            m.step.to_string(),
            m.total_loss.to_string(),
            m.retrieval_loss.to_string(),
            m.discriminator_loss.to_string(),
            m.generator_loss.to_string(),
            m.beta_mean.to_string(),
            m.discriminator_accuracy.to_string(),
            m.n_active.to_string(),
            m.n_starter.to_string(),
            meta.config_hash.clone(),
            meta.world_hash.clone(),
            meta.seed.to_string(),
        ])?;
    }
    csv.flush()?;
    println!("{}", ckpt.display());
    Ok(())
}

pub fn eval(common: &Common, checkpoint: Option<PathBuf>) -> CmdResult {
    let run = load_run(common)?;
    let world = generate_world(&run.config.world)?;
    let path = checkpoint.unwrap_or_else(|| run.path("checkpoint.pack"));
    let state = load_checkpoint(&path)?;
    if state.user_dim() != world.user_feature_dim() || state.embed_dim() != world.embed_dim() {
        return Err(CliError::Runtime(format!("{} does not match the configured world", path.display())));
    }
    let k = run.config.sim.slate_size;
    let holdout = build_holdout(&world, run.config.sim.holdout_pairs, run.config.sim.recall_users)?;
    let (auc, recall) = evaluate(&state, &world, &holdout, k)?;

    let meta = run.meta();
    let mut csv = csv::Writer::from_path(run.path("eval.csv"))?;
    csv.write_record(["variant", "step", "auc", "recall_at_k", "k", "config_hash", "world_hash", "seed"])?;
    csv.write_record([
        variant_name(state.config.variant),
        state.step.to_string(),
        format!("{auc:.6}"),
        format!("{recall:.6}"),
        k.to_string(),
        meta.config_hash,
        meta.world_hash,
        meta.seed.to_string(),
    ])?;
    csv.flush()?;
    println!("auc={auc:.6} recall@{k}={recall:.6}");
    Ok(())
}

pub fn simulate(common: &Common, policy: Option<Policy>) -> CmdResult {
    let mut run = load_run(common)?;
    if let Some(p) = policy {
        run.config.sim.policy = p;
    }
    let policy = run.config.sim.policy;
    let rows = run_loop(&run.config.sim, &run.config.world, &run.config.train)?;
    for r in &rows {
        info!(
            "round {} top1%={:.4} exposed={} clicked={} auc={:.4}",
            r.round, r.top1pct_share, r.unique_exposed, r.unique_clicked, r.auc
        );
    }
    let path = run.path(&format!("loop_{}_seed{}.csv", policy.as_str(), run.config.train.seed));
    let mut w = BufWriter::new(File::create(&path)?);
    write_loop_csv(&mut w, &rows, &run.meta())?;
    w.flush()?;
    println!("{}", path.display());
    Ok(())
}
