//! The three subcommands: analytical cost comparison, desk-scale split
//! federated training, and scheduling studies.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use splitlora::aggregate::{self, Weighting};
use splitlora::cost::{
    client_timings, compare_report, scheme_report, task_profiles, CompareReport, CostReport,
    Ratios, RoundCounts, Scheme,
};
use splitlora::data::{dirichlet_partition, generate, Shard, TaskSpec};
use splitlora::model::{
    forward_monolithic, init_adapters, init_base, save_checkpoint, sgd_step_full, AdapterSet,
    Partition,
};
use splitlora::protocol::{
    run_training, ClientState, Policy, RoundRecord, ServerState, TrainSetup,
};
use splitlora::sched::{
    brute_force_order, fifo_order, greedy_order, Schedule, TaskProfile, BRUTE_FORCE_LIMIT,
};
use splitlora::tensor::Tensor;

use crate::config::{ExperimentConfig, Resolved};
use crate::{runtime_err, CliError};

fn ensure_out_dir(cfg: &ExperimentConfig) -> Result<PathBuf, CliError> {
    fs::create_dir_all(&cfg.out_dir).map_err(|e| {
        CliError::Runtime(format!("cannot create {}: {e}", cfg.out_dir.display()))
    })?;
    Ok(cfg.out_dir.clone())
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text)
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(runtime_err)?;
    text.push('\n');
    write_text(path, &text)
}

fn write_snapshot(cfg: &ExperimentConfig, resolved: &Resolved, dir: &Path) -> Result<(), CliError> {
    write_text(&dir.join("config.json"), &cfg.snapshot_json(resolved))
}

/// Cost reports for the requested scheme subset; `ratios` is present
/// exactly when all three schemes ran.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateOutput {
    pub preset: String,
    pub reports: Vec<CostReport>,
    pub ratios: Option<Ratios>,
}

impl SimulateOutput {
    fn as_compare(&self) -> Option<CompareReport> {
        self.ratios.map(|ratios| CompareReport {
            preset: self.preset.clone(),
            reports: self.reports.clone(),
            ratios,
        })
    }

    pub fn to_csv(&self) -> String {
        if let Some(full) = self.as_compare() {
            return full.to_csv();
        }
        let mut out = String::from(CostReport::CSV_HEADER);
        out.push('\n');
        for r in &self.reports {
            out.push_str(&r.csv_rows());
        }
        out
    }

    pub fn to_text_table(&self) -> String {
        if let Some(full) = self.as_compare() {
            return full.to_text_table();
        }
        let mut out = format!("preset: {}\n\n", self.preset);
        out.push_str(&CostReport::text_table_header());
        for r in &self.reports {
            out.push_str(&r.text_row());
        }
        out
    }
}

/// Analytical comparison of the configured schemes on the device preset.
/// Writes `cost_report.{json,csv,txt}` plus the config snapshot and
/// prints the summary table.
pub fn simulate(cfg: &ExperimentConfig, resolved: &Resolved) -> Result<(), CliError> {
    let preset = &resolved.active;
    let output = if cfg.schemes.len() == Scheme::ALL.len() {
        let report = compare_report(
            preset,
            &cfg.model,
            &cfg.hyper,
            &RoundCounts::equal(cfg.rounds),
        )
        .map_err(runtime_err)?;
        SimulateOutput {
            preset: report.preset,
            reports: report.reports,
            ratios: Some(report.ratios),
        }
    } else {
        let reports = cfg
            .schemes
            .iter()
            .map(|&s| scheme_report(s, preset, &cfg.model, &cfg.hyper, cfg.rounds))
            .collect::<splitlora::Result<Vec<_>>>()
            .map_err(runtime_err)?;
        SimulateOutput {
            preset: preset.name.clone(),
            reports,
            ratios: None,
        }
    };

    let dir = ensure_out_dir(cfg)?;
    write_snapshot(cfg, resolved, &dir)?;
    write_json(&dir.join("cost_report.json"), &output)?;
    write_text(&dir.join("cost_report.csv"), &output.to_csv())?;
    write_text(&dir.join("cost_report.txt"), &output.to_text_table())?;
    print!("{}", output.to_text_table());
    Ok(())
}

fn metrics_csv(history: &[RoundRecord]) -> String {
    let mut out =
        String::from("round,t_start,t_end,train_loss,heldout_loss,heldout_accuracy,aggregated\n");
    for r in history {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.round, r.t_start, r.t_end, r.train_loss, r.heldout_loss, r.heldout_accuracy,
            r.aggregated
        ));
    }
    out
}

fn adapter_tensors(set: &AdapterSet) -> Vec<&Tensor> {
    let mut out = Vec::with_capacity(4 * set.blocks.len() + 2);
    for b in &set.blocks {
        out.extend([&b.q.a, &b.q.b, &b.v.a, &b.v.b]);
    }
    out.push(&set.head_w);
    out.push(&set.head_b);
    out
}

/// Largest |a - b| / max(|a|, |b|) over all adapter coordinates; exact
/// zero when the sets are bit-identical.
fn max_rel_deviation(a: &AdapterSet, b: &AdapterSet) -> f64 {
    let mut max = 0.0f64;
    for (x, y) in adapter_tensors(a).iter().zip(adapter_tensors(b)) {
        for (&u, &v) in x.data().iter().zip(y.data()) {
            if u != v {
                max = max.max((u - v).abs() / u.abs().max(v.abs()));
            }
        }
    }
    max
}

/// Replays client 0's exact batch sequence through the monolithic path
/// and returns the max relative deviation against the split result.
fn monolithic_deviation(
    cfg: &ExperimentConfig,
    shard: &Shard,
    split_set: &AdapterSet,
) -> Result<f64, CliError> {
    let base = init_base(&cfg.model, cfg.init_seed).map_err(runtime_err)?;
    let mut set = init_adapters(&cfg.model, cfg.init_seed + 1).map_err(runtime_err)?;
    let n = shard.examples.len();
    let mut cursor = 0usize;
    for _ in 0..cfg.rounds {
        let mut tokens = Vec::with_capacity(cfg.hyper.batch * cfg.model.seq_len);
        let mut labels = Vec::with_capacity(cfg.hyper.batch);
        for j in 0..cfg.hyper.batch {
            let ex = &shard.examples[(cursor + j) % n];
            tokens.extend_from_slice(&ex.tokens);
            labels.push(ex.label);
        }
        cursor = (cursor + cfg.hyper.batch) % n;
        let pass = forward_monolithic(&base, &set, &tokens, &labels).map_err(runtime_err)?;
        let grads = pass.backward().map_err(runtime_err)?;
        sgd_step_full(&mut set, &grads, cfg.hyper.lr).map_err(runtime_err)?;
    }
    Ok(max_rel_deviation(&set, split_set))
}

/// Split federated training at desk scale: greedy serving, sample-count
/// FedAvg every `agg_every` rounds. Writes `metrics.csv`,
/// `trace.ndjson`, `global.ckpt`, and the config snapshot. With
/// `compare_monolithic` (K=1 only) also replays the monolithic oracle
/// and fails unless the parameters match to 1e-9.
pub fn train(
    cfg: &ExperimentConfig,
    resolved: &Resolved,
    compare_monolithic: bool,
) -> Result<(), CliError> {
    let preset = &resolved.active;
    let k = preset.clients.len();
    if compare_monolithic && k != 1 {
        return Err(CliError::Config(format!(
            "--compare-monolithic needs exactly one client (pass --clients 1), got {k}"
        )));
    }

    let spec = TaskSpec::from_model_config(&cfg.model).map_err(crate::config_err)?;
    let train_set = generate(&spec, cfg.train_examples, cfg.seed).map_err(runtime_err)?;
    let heldout = generate(&spec, cfg.heldout_examples, cfg.seed + 1).map_err(runtime_err)?;
    let shards = dirichlet_partition(&train_set, k, cfg.alpha, cfg.seed + 2).map_err(runtime_err)?;

    let base = Arc::new(init_base(&cfg.model, cfg.init_seed).map_err(runtime_err)?);
    let init = init_adapters(&cfg.model, cfg.init_seed + 1).map_err(runtime_err)?;
    let mut server = ServerState::new(Arc::clone(&base), cfg.hyper.lr);
    let mut clients = Vec::with_capacity(k);
    for shard in &shards {
        let cut = preset.clients[shard.client_id].client_layers;
        let partition = Partition::new(cut, cfg.model.num_blocks).map_err(runtime_err)?;
        let (client_half, server_half) = aggregate::split(&init, partition).map_err(runtime_err)?;
        server
            .register_client(shard.client_id, server_half)
            .map_err(runtime_err)?;
        clients.push(
            ClientState::new(
                shard.client_id,
                partition,
                Arc::clone(&base),
                client_half,
                shard.clone(),
                cfg.hyper.batch,
                cfg.hyper.lr,
            )
            .map_err(runtime_err)?,
        );
    }

    let timings = client_timings(preset, &cfg.model, &cfg.hyper).map_err(runtime_err)?;
    let setup = TrainSetup {
        rounds: cfg.rounds as usize,
        agg_every: cfg.agg_every,
        policy: Policy::Greedy,
        weighting: Weighting::SampleCounts,
    };
    let run =
        run_training(&mut clients, &mut server, &timings, &setup, &heldout).map_err(runtime_err)?;

    let dir = ensure_out_dir(cfg)?;
    write_snapshot(cfg, resolved, &dir)?;
    write_text(&dir.join("metrics.csv"), &metrics_csv(&run.history))?;
    let mut ndjson = String::new();
    for trace in &run.traces {
        ndjson.push_str(&trace.to_ndjson().map_err(runtime_err)?);
    }
    write_text(&dir.join("trace.ndjson"), &ndjson)?;
    let ckpt = dir.join("global.ckpt");
    save_checkpoint(&ckpt, &cfg.model, &run.global.set).map_err(runtime_err)?;
    println!("wrote {}", ckpt.display());

    let last = run.history.last().expect("rounds >= 1");
    println!(
        "round {}: train_loss {:.6} heldout_loss {:.6} heldout_accuracy {:.4}",
        last.round, last.train_loss, last.heldout_loss, last.heldout_accuracy
    );

    if compare_monolithic {
        let deviation = monolithic_deviation(cfg, &shards[0], &run.global.set)?;
        write_json(
            &dir.join("monolithic.json"),
            &serde_json::json!({ "max_relative_deviation": deviation }),
        )?;
        println!("monolithic max relative parameter deviation: {deviation:e}");
        if deviation >= 1e-9 {
            return Err(CliError::Runtime(format!(
                "split run deviates from the monolithic oracle by {deviation:e} (limit 1e-9)"
            )));
        }
    }
    Ok(())
}

fn three_schedules(tasks: &[TaskProfile]) -> Result<(Schedule, Schedule, Schedule), CliError> {
    let greedy = greedy_order(tasks).map_err(runtime_err)?;
    let fifo = fifo_order(tasks).map_err(runtime_err)?;
    let brute = brute_force_order(tasks).map_err(runtime_err)?;
    Ok((greedy, fifo, brute))
}

fn check_brute_limit(k: usize) -> Result<(), CliError> {
    if k > BRUTE_FORCE_LIMIT {
        return Err(CliError::Config(format!(
            "the brute-force baseline handles at most {BRUTE_FORCE_LIMIT} clients, got {k}"
        )));
    }
    Ok(())
}

/// One scheduling instance: the tasks, the three policy schedules, and
/// makespan ratios against the brute-force optimum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleOutput {
    pub preset: String,
    pub tasks: Vec<TaskProfile>,
    pub schedules: Vec<Schedule>,
    pub greedy_over_optimal: f64,
    pub fifo_over_optimal: f64,
}

fn print_schedule_table(schedules: &[Schedule], optimal: f64) {
    println!("{:<12} {:>12} {:>12}", "policy", "makespan_s", "vs_optimal");
    for s in schedules {
        println!(
            "{:<12} {:>12.6} {:>12.4}",
            s.policy,
            s.makespan,
            s.makespan / optimal
        );
    }
}

/// Schedules the preset's round once under every policy. Writes
/// `schedule.json` plus the config snapshot and prints the makespan
/// table.
pub fn schedule_preset(cfg: &ExperimentConfig, resolved: &Resolved) -> Result<(), CliError> {
    let preset = &resolved.active;
    check_brute_limit(preset.clients.len())?;
    let timings = client_timings(preset, &cfg.model, &cfg.hyper).map_err(runtime_err)?;
    let tasks = task_profiles(&timings);
    let (greedy, fifo, brute) = three_schedules(&tasks)?;
    let output = ScheduleOutput {
        preset: preset.name.clone(),
        tasks,
        greedy_over_optimal: greedy.makespan / brute.makespan,
        fifo_over_optimal: fifo.makespan / brute.makespan,
        schedules: vec![greedy, fifo, brute],
    };

    let dir = ensure_out_dir(cfg)?;
    write_snapshot(cfg, resolved, &dir)?;
    write_json(&dir.join("schedule.json"), &output)?;
    let optimal = output.schedules[2].makespan;
    print_schedule_table(&output.schedules, optimal);
    Ok(())
}

/// Mean, 95th percentile (nearest-rank), and max of a ratio sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatioStats {
    pub mean: f64,
    pub p95: f64,
    pub max: f64,
}

fn ratio_stats(ratios: &mut [f64]) -> RatioStats {
    ratios.sort_by(|a, b| a.partial_cmp(b).expect("finite ratios"));
    let n = ratios.len();
    let p95_rank = ((n as f64 * 0.95).ceil() as usize).max(1);
    RatioStats {
        mean: ratios.iter().sum::<f64>() / n as f64,
        p95: ratios[p95_rank - 1],
        max: ratios[n - 1],
    }
}

/// Monte-Carlo summary over seeded random scheduling instances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleStats {
    pub instances: usize,
    pub clients: usize,
    pub seed: u64,
    pub greedy_le_fifo: usize,
    pub fraction_greedy_le_fifo: f64,
    pub greedy_over_optimal: RatioStats,
    pub fifo_over_optimal: RatioStats,
}

/// Integer-valued task durations keep every makespan exactly
/// representable, so policy comparisons are true equalities. Instance `i`
/// draws from `ChaCha8Rng` seeded with `seed + i`: release 0..=30,
/// server time 1..=20, tail 0..=20.
fn random_tasks(seed: u64, instance: usize, clients: usize) -> Vec<TaskProfile> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed + instance as u64);
    (0..clients)
        .map(|client_id| TaskProfile {
            client_id,
            release: rng.gen_range(0..=30) as f64,
            server_time: rng.gen_range(1..=20) as f64,
            tail: rng.gen_range(0..=20) as f64,
        })
        .collect()
}

/// Monte-Carlo comparison of greedy vs FIFO vs brute force on `n` random
/// instances. Writes `schedule_stats.json` plus the config snapshot and
/// prints the summary.
pub fn schedule_random(
    cfg: &ExperimentConfig,
    resolved: &Resolved,
    n: usize,
) -> Result<(), CliError> {
    if n == 0 {
        return Err(CliError::Config("need at least one random instance".to_string()));
    }
    let k = resolved.active.clients.len();
    check_brute_limit(k)?;

    let mut greedy_ratios = Vec::with_capacity(n);
    let mut fifo_ratios = Vec::with_capacity(n);
    let mut greedy_le_fifo = 0usize;
    for i in 0..n {
        let tasks = random_tasks(cfg.seed, i, k);
        let (greedy, fifo, brute) = three_schedules(&tasks)?;
        if greedy.makespan <= fifo.makespan {
            greedy_le_fifo += 1;
        }
        greedy_ratios.push(greedy.makespan / brute.makespan);
        fifo_ratios.push(fifo.makespan / brute.makespan);
    }

    let stats = ScheduleStats {
        instances: n,
        clients: k,
        seed: cfg.seed,
        greedy_le_fifo,
        fraction_greedy_le_fifo: greedy_le_fifo as f64 / n as f64,
        greedy_over_optimal: ratio_stats(&mut greedy_ratios),
        fifo_over_optimal: ratio_stats(&mut fifo_ratios),
    };

    let dir = ensure_out_dir(cfg)?;
    write_snapshot(cfg, resolved, &dir)?;
    write_json(&dir.join("schedule_stats.json"), &stats)?;
    println!("{n} instances, {k} clients, seed {}", cfg.seed);
    println!(
        "greedy <= fifo: {}/{} ({:.1}%)",
        stats.greedy_le_fifo,
        n,
        100.0 * stats.fraction_greedy_le_fifo
    );
    for (name, s) in [
        ("greedy/optimal", stats.greedy_over_optimal),
        ("fifo/optimal", stats.fifo_over_optimal),
    ] {
        println!(
            "{name}: mean {:.4} p95 {:.4} max {:.4}",
            s.mean, s.p95, s.max
        );
    }
    Ok(())
}
