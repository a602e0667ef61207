use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use coordtrain::costmodel::{cost_report, sweep_csv, CostConfig, SweepKey};
use coordtrain::experiment::{set_path, ExperimentConfig, ModelSection};
use coordtrain::io::write_atomic;
use coordtrain::orchestrator::checkpoint;
use coordtrain::orchestrator::{Algorithm, Trainer};

const OUTPUT_ROOT_ENV: &str = "COORDTRAIN_OUTPUT_ROOT";

#[derive(Parser)]
#[command(name = "coordtrain", version, about = "Low-communication training simulator with partial parameter updates")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write metrics, checkpoints and a summary.
    Train(TrainArgs),
    /// Print the analytic cost report, or a sweep table with --sweep.
    Cost(CostArgs),
    /// Run or load several experiments and tabulate their final results.
    Compare(CompareArgs),
    /// Describe a checkpoint file.
    CheckpointInspect(InspectArgs),
}

#[derive(Args, Clone, Default)]
struct Overrides {
    /// Override any config field, e.g. `--set run.num_slices=4`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Worker threads for the simulated nodes (default: every core).
    #[arg(long)]
    threads: Option<usize>,
    /// Seed for initialization, data and node randomness.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    config: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
    /// Output directory (relative paths are taken under $COORDTRAIN_OUTPUT_ROOT when set).
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Continue from a checkpoint written by the same config.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct CostArgs {
    /// Experiment config with a `cost` block, or a bare cost config. Defaults
    /// to the built-in 1.3B-parameter setup.
    config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// `key=v1,v2,...` with key one of bandwidth, slices, nodes, sync_period.
    #[arg(long)]
    sweep: Option<String>,
    /// Also write the report (or sweep CSV) to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    /// Experiment configs (trained now) or finished run directories.
    #[arg(required = true, num_args = 1..)]
    inputs: Vec<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
    /// Write the comparison table as CSV here.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct InspectArgs {
    checkpoint: PathBuf,
    /// Print the metadata as JSON instead of text.
    #[arg(long)]
    json: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Summary {
    name: String,
    algorithm: Algorithm,
    seed: u64,
    num_nodes: usize,
    num_slices: usize,
    local_steps: usize,
    rounds: usize,
    steps: usize,
    tokens: u64,
    final_train_loss: f64,
    final_eval_loss: f64,
    final_eval_perplexity: f64,
    sim_comm_s: f64,
    sim_comp_s: f64,
    model: ModelSection,
}

fn parse_set(items: &[String]) -> Result<Vec<(String, String)>> {
    items
        .iter()
        .map(|s| {
            s.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.to_string()))
                .ok_or_else(|| anyhow!("--set expects KEY=VALUE, got {s:?}"))
        })
        .collect()
}

fn under_output_root(p: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if p.is_relative() => PathBuf::from(root).join(p),
        _ => p.to_path_buf(),
    }
}

fn run_name(cfg: &ExperimentConfig, config_path: &Path) -> String {
    cfg.name.clone().unwrap_or_else(|| {
        config_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "run".into())
    })
}

/// Loads a config with `--set` values applied first and dedicated flags last.
fn load_config(path: &Path, o: &Overrides, out_dir: Option<&Path>, resume: Option<&Path>) -> Result<ExperimentConfig> {
    let mut ov = parse_set(&o.set)?;
    if let Some(s) = o.seed {
        ov.push(("seed".into(), s.to_string()));
    }
    if let Some(t) = o.threads {
        ov.push(("threads".into(), t.to_string()));
    }
    for (key, p) in [("output_dir", out_dir), ("resume_from", resume)] {
        if let Some(p) = p {
            ov.push((key.into(), serde_json::to_string(&p.to_string_lossy())?));
        }
    }
    ExperimentConfig::load(path, &ov).with_context(|| format!("invalid config {}", path.display()))
}

fn output_dir(cfg: &ExperimentConfig, name: &str) -> PathBuf {
    let dir = cfg
        .output_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from("runs").join(name));
    under_output_root(&dir)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes()).with_context(|| format!("writing {}", path.display()))
}

fn train(config_path: &Path, cfg: &ExperimentConfig) -> Result<(PathBuf, Summary)> {
    let name = run_name(cfg, config_path);
    let dir = output_dir(cfg, &name);
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    write_json(&dir.join("config.json"), cfg)?;
    eprintln!("resolved config written to {}", dir.join("config.json").display());

    let (train, eval) = cfg.corpora()?;
    let (train, eval) = (Arc::new(train), Arc::new(eval));
    let threads = cfg.threads.unwrap_or(0);
    let mut trainer = match &cfg.resume_from {
        Some(ck_path) => {
            let ck = checkpoint::read(ck_path)?;
            if ck.meta.run != cfg.run || ck.meta.model != cfg.model_config() {
                bail!(
                    "checkpoint {} was written by a different model or run config",
                    ck_path.display()
                );
            }
            eprintln!("resuming from {} at step {}", ck_path.display(), ck.meta.step);
            Trainer::from_checkpoint(ck, train, eval, threads)?
        }
        None => Trainer::new(cfg.model_config(), cfg.run.clone(), train, eval, threads)?,
    };

    let start = Instant::now();
    let every = cfg.run.checkpoint_every;
    let ck_dir = dir.join("checkpoints");
    let metrics_path = dir.join("metrics.csv");
    while !trainer.is_done() {
        let res = if every > 0 {
            trainer.run_rounds(every)
        } else {
            trainer.run_to_end()
        };
        if let Err(e) = res {
            trainer.metrics().write_csv(&metrics_path)?;
            return Err(e.into());
        }
        if every > 0 && !trainer.is_done() {
            trainer.save_checkpoint(&ck_dir.join(format!("round_{:05}.ckpt", trainer.completed_rounds())))?;
            trainer.metrics().write_csv(&metrics_path)?;
        }
        if let Some(r) = trainer.metrics().final_round() {
            eprintln!(
                "round {:>4}: train {:.4} eval {:.4} ({:.1}s)",
                r.round + 1,
                r.mean_train_loss,
                r.eval_loss,
                start.elapsed().as_secs_f64()
            );
        }
    }
    trainer.save_checkpoint(&ck_dir.join("final.ckpt"))?;
    trainer.metrics().write_csv(&metrics_path)?;

    let last = trainer
        .metrics()
        .final_round()
        .ok_or_else(|| anyhow!("run finished without completing a round"))?;
    let summary = Summary {
        name,
        algorithm: cfg.run.algorithm,
        seed: cfg.seed,
        num_nodes: cfg.run.num_nodes,
        num_slices: cfg.run.num_slices,
        local_steps: cfg.run.local_steps,
        rounds: cfg.run.rounds,
        steps: trainer.completed_steps(),
        tokens: last.tokens,
        final_train_loss: last.mean_train_loss,
        final_eval_loss: last.eval_loss,
        final_eval_perplexity: last.eval_perplexity,
        sim_comm_s: last.sim_comm_s,
        sim_comp_s: last.sim_comp_s,
        model: cfg.model.clone(),
    };
    write_json(&dir.join("summary.json"), &summary)?;
    eprintln!("finished in {:.1}s; outputs in {}", start.elapsed().as_secs_f64(), dir.display());
    Ok((dir, summary))
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let cfg = load_config(&a.config, &a.overrides, a.out_dir.as_deref(), a.resume.as_deref())?;
    let (_, summary) = train(&a.config, &cfg)?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn load_cost_config(path: Option<&Path>, set: &[String]) -> Result<CostConfig> {
    let mut v = match path {
        None => serde_json::json!({}),
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let v: serde_json::Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
            if v.get("schema_version").is_some() {
                let exp = ExperimentConfig::from_value(v, &[])?;
                let cost = exp.cost.ok_or_else(|| anyhow!("{} has no cost block", p.display()))?;
                serde_json::to_value(cost)?
            } else {
                v
            }
        }
    };
    for (k, raw) in parse_set(set)? {
        set_path(&mut v, &k, &raw)?;
    }
    serde_json::from_value(v).context("invalid cost config")
}

fn cmd_cost(a: &CostArgs) -> Result<()> {
    let cfg = load_cost_config(a.config.as_deref(), &a.set)?;
    let text = match &a.sweep {
        Some(spec) => {
            let (key, values) = spec
                .split_once('=')
                .ok_or_else(|| anyhow!("--sweep expects key=v1,v2,..., got {spec:?}"))?;
            let key: SweepKey = key.trim().parse()?;
            let values = values
                .split(',')
                .map(|v| v.trim().parse::<f64>().with_context(|| format!("sweep value {v:?}")))
                .collect::<Result<Vec<_>>>()?;
            sweep_csv(&cfg, key, &values)?
        }
        None => {
            let mut s = serde_json::to_string_pretty(&cost_report(&cfg)?)?;
            s.push('\n');
            s
        }
    };
    if let Some(out) = &a.out {
        let out = under_output_root(out);
        write_atomic(&out, text.as_bytes()).with_context(|| format!("writing {}", out.display()))?;
    }
    print!("{text}");
    Ok(())
}

fn load_run_dir(dir: &Path) -> Result<Summary> {
    let read = |f: &str| {
        let p = dir.join(f);
        std::fs::read_to_string(&p).with_context(|| format!("{} is not a finished run ({f} missing)", dir.display()))
    };
    serde_json::from_str(&read("summary.json")?).with_context(|| format!("parsing {}/summary.json", dir.display()))
}

const COMPARE_HEADER: &str = "run,algorithm,num_nodes,num_slices,local_steps,rounds,tokens,final_train_loss,final_eval_loss,final_eval_perplexity,sim_comm_s,sim_comp_s";

fn cmd_compare(a: &CompareArgs) -> Result<()> {
    let mut rows = Vec::new();
    for input in &a.inputs {
        let summary = if input.is_dir() {
            load_run_dir(input)?
        } else {
            let cfg = load_config(input, &a.overrides, None, None)?;
            train(input, &cfg)?.1
        };
        let label = input
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| summary.name.clone());
        rows.push((label, summary));
    }
    let first = &rows[0].1;
    for ((_, s), input) in rows.iter().zip(&a.inputs).skip(1) {
        if s.model != first.model {
            bail!(
                "refusing to compare runs of different models: {} uses {:?} but {} uses {:?}",
                a.inputs[0].display(),
                first.model,
                input.display(),
                s.model
            );
        }
    }

    let mut csv = String::from(COMPARE_HEADER);
    csv.push('\n');
    println!(
        "{:<24} {:<16} {:>3} {:>3} {:>5} {:>6} {:>12} {:>10} {:>10} {:>10}",
        "run", "algorithm", "K", "N", "H", "rounds", "tokens", "train", "eval", "eval ppl"
    );
    for (label, s) in &rows {
        let alg = serde_json::to_value(s.algorithm)?.as_str().unwrap_or_default().to_string();
        println!(
            "{:<24} {:<16} {:>3} {:>3} {:>5} {:>6} {:>12} {:>10.4} {:>10.4} {:>10.3}",
            label, alg, s.num_nodes, s.num_slices, s.local_steps, s.rounds, s.tokens,
            s.final_train_loss, s.final_eval_loss, s.final_eval_perplexity
        );
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}\n",
            label, alg, s.num_nodes, s.num_slices, s.local_steps, s.rounds, s.tokens,
            s.final_train_loss, s.final_eval_loss, s.final_eval_perplexity, s.sim_comm_s, s.sim_comp_s
        ));
    }
    if let Some(p) = &a.csv {
        let p = under_output_root(p);
        write_atomic(&p, csv.as_bytes()).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn cmd_inspect(a: &InspectArgs) -> Result<()> {
    let ck = checkpoint::read(&a.checkpoint)?;
    if a.json {
        #[derive(Serialize)]
        struct Tensor<'a> {
            name: &'a str,
            shape: &'a [u64],
            l2_norm: f64,
        }
        let tensors: Vec<Tensor> = ck
            .tensors
            .iter()
            .map(|t| Tensor {
                name: &t.name,
                shape: &t.shape,
                l2_norm: t.data.iter().map(|v| v * v).sum::<f64>().sqrt(),
            })
            .collect();
        let out = serde_json::json!({
            "version": ck.version,
            "step": ck.meta.step,
            "tokens": ck.meta.tokens,
            "model": ck.meta.model,
            "run": ck.meta.run,
            "train_fingerprint": ck.meta.train_fingerprint,
            "eval_fingerprint": ck.meta.eval_fingerprint,
            "rounds_logged": ck.meta.metrics.rounds.len(),
            "tensors": tensors,
        });
        println!("{}", serde_json::to_string_pretty(&out)?);
        return Ok(());
    }
    let m = &ck.meta;
    let run = &m.run;
    println!("checkpoint {} (format version {})", a.checkpoint.display(), ck.version);
    println!(
        "algorithm {:?}, K = {}, N = {}, H = {}, T = {}",
        run.algorithm, run.num_nodes, run.num_slices, run.local_steps, run.rounds
    );
    println!(
        "model: L = {}, d = {}, heads = {}, ffn = {}, V = {}, S = {}",
        m.model.num_layers, m.model.hidden_dim, m.model.num_heads, m.model.ffn_dim, m.model.vocab_size, m.model.seq_len
    );
    println!(
        "progress: step {} of {}, {} tokens, simulated {:.3}s compute + {:.3}s comm",
        m.step,
        run.total_steps(),
        m.tokens,
        m.sim_comp_s,
        m.sim_comm_s
    );
    if let Some(r) = m.metrics.rounds.last() {
        println!("last eval loss {:.6} (perplexity {:.4})", r.eval_loss, r.eval_perplexity);
    }
    println!("train corpus {}", m.train_fingerprint);
    println!("{} tensors:", ck.tensors.len());
    for t in &ck.tensors {
        let shape: Vec<String> = t.shape.iter().map(|d| d.to_string()).collect();
        println!("  {:<28} [{}]", t.name, shape.join(" x "));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Cost(a) => cmd_cost(a),
        Command::Compare(a) => cmd_compare(a),
        Command::CheckpointInspect(a) => cmd_inspect(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
