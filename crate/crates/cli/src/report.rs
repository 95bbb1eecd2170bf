use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::PathBuf;

use log::info;
use pabridge_core::evalsim::LOOP_CSV_HEADER;

use crate::commands::{load_run, CmdResult};
use crate::{CliError, Common};

const METRICS: [&str; 5] = ["top1pct_share", "unique_exposed", "unique_clicked", "auc", "recall_at_k"];

struct LoopRun {
    source: String,
    policy: String,
    seed: String,
    world_hash: String,
    /// Per round, the metric values in `METRICS` order.
    rounds: Vec<(u64, [f64; 5])>,
}

fn read_loop_csv(path: &PathBuf) -> Result<LoopRun, CliError> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::Runtime(format!("{}: missing column `{name}`", path.display())))
    };
    for h in LOOP_CSV_HEADER {
        col(h)?;
    }
    let (round_c, policy_c, seed_c, world_c) = (col("round")?, col("policy")?, col("seed")?, col("world_hash")?);
    let metric_cols: Vec<usize> = METRICS.iter().map(|m| col(m)).collect::<Result<_, _>>()?;
    let mut run = LoopRun {
        source: path.display().to_string(),
        policy: String::new(),
        seed: String::new(),
        world_hash: String::new(),
        rounds: Vec::new(),
    };
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let bad = |what: &str| CliError::Runtime(format!("{} row {}: bad {what}", path.display(), i + 2));
        let round: u64 = rec[round_c].parse().map_err(|_| bad("round"))?;
        let mut vals = [0.0; 5];
        for (v, &c) in vals.iter_mut().zip(&metric_cols) {
            *v = rec[c].parse().map_err(|_| bad(&headers[c]))?;
        }
        if i == 0 {
            run.policy = rec[policy_c].to_string();
            run.seed = rec[seed_c].to_string();
            run.world_hash = rec[world_c].to_string();
        } else if rec[world_c] != run.world_hash || rec[policy_c] != run.policy || rec[seed_c] != run.seed {
            return Err(CliError::Runtime(format!("{}: rows from more than one run", path.display())));
        }
        run.rounds.push((round, vals));
    }
    if run.rounds.is_empty() {
        return Err(CliError::Runtime(format!("{}: no rounds", path.display())));
    }
    Ok(run)
}

fn default_inputs(out: &PathBuf) -> Result<Vec<PathBuf>, CliError> {
    let mut found: Vec<PathBuf> = fs::read_dir(out)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("loop_") && n.ends_with(".csv"))
        })
        .collect();
    found.sort();
    Ok(found)
}

pub fn report(common: &Common, inputs: Vec<PathBuf>, force: bool) -> CmdResult {
    let run = load_run(common)?;
    let inputs = if inputs.is_empty() { default_inputs(&run.out)? } else { inputs };
    if inputs.is_empty() {
        return Err(CliError::Usage(format!("no loop CSVs given and none found in {}", run.out.display())));
    }
    let runs: Vec<LoopRun> = inputs.iter().map(read_loop_csv).collect::<Result<_, _>>()?;
    let worlds: BTreeSet<&str> = runs.iter().map(|r| r.world_hash.as_str()).collect();
    if worlds.len() > 1 && !force {
        return Err(CliError::Runtime(format!(
            "runs come from {} different worlds; pass --force to aggregate anyway",
            worlds.len()
        )));
    }

    let mut summary = csv::Writer::from_path(run.out.join("report.csv"))?;
    summary.write_record([
        "policy",
        "seed",
        "rounds",
        "top1pct_share_first",
        "top1pct_share_final",
        "unique_exposed_final",
        "unique_clicked_final",
        "auc_final",
        "recall_at_k_final",
        "world_hash",
        "source",
    ])?;
    let mut series = csv::Writer::from_path(run.out.join("report_series.csv"))?;
    series.write_record(["policy", "seed", "round", "metric", "value"])?;

    println!("{:<16} {:>6} {:>7} {:>9} {:>9} {:>8} {:>8} {:>7}", "policy", "seed", "rounds", "top1%@1", "top1%@T", "exposed", "clicked", "auc");
    for r in &runs {
        let (_, first) = r.rounds[0];
        let (_, last) = *r.rounds.last().expect("non-empty");
        summary.write_record([
            r.policy.clone(),
            r.seed.clone(),
            r.rounds.len().to_string(),
            format!("{:.6}", first[0]),
            format!("{:.6}", last[0]),
            format!("{}", last[1]),
            format!("{}", last[2]),
            format!("{:.6}", last[3]),
            format!("{:.6}", last[4]),
            r.world_hash.clone(),
            r.source.clone(),
        ])?;
        for (round, vals) in &r.rounds {
            for (m, v) in METRICS.iter().zip(vals) {
                series.write_record([r.policy.clone(), r.seed.clone(), round.to_string(), m.to_string(), format!("{v}")])?;
            }
        }
        println!(
            "{:<16} {:>6} {:>7} {:>9.4} {:>9.4} {:>8} {:>8} {:>7.4}",
            r.policy,
            r.seed,
            r.rounds.len(),
            first[0],
            last[0],
            last[1],
            last[2],
            last[3]
        );
    }
    summary.flush()?;
    series.flush()?;

    // unique-exposed ratio wherever both policies ran with the same seed
    let mut by_seed: BTreeMap<&str, BTreeMap<&str, f64>> = BTreeMap::new();
    for r in &runs {
        let last = r.rounds.last().expect("non-empty").1;
        by_seed.entry(&r.seed).or_default().insert(&r.policy, last[1]);
    }
    for (seed, p) in by_seed {
        if let (Some(b), Some(a)) = (p.get("closed_baseline"), p.get("pa_bridge")) {
            if *b > 0.0 {
                println!("seed {seed}: pa_bridge / closed_baseline unique exposed = {:.3}", a / b);
            }
        }
    }
    info!("aggregated {} runs into {}", runs.len(), run.out.display());
    Ok(())
}
