//! The `rec2pm` command line.

pub mod config;
pub mod manifest;
pub mod params_io;

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::ModelParams;
use crate::data::{generate_synthetic, load_dataset, save_dataset, Dataset};
use crate::error::{Error, Result};
use crate::eval::{
    attention_csv, eval_context, evaluate, export_attention, final_update_inputs,
    run_ablation_suite, AblationPlan, AttentionTarget, EvalReport,
};
use crate::inference::{bench, decode_scores, BenchTarget, InferenceSession, Ranking, SessionProtocol};
use crate::memory::{load_memory, save_memory, UpdateMode};
use crate::training::{train, TrainerKind};
use crate::verify::run_suite;

use config::{resolve, ConfigLayer, RunConfig};
use manifest::{write_atomic, RunManifest};
use params_io::{load_params_for, save_params};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "rec2pm", version, about = "Recurrent preference memory for sequential recommendation")]
#[command(arg_required_else_help = true, subcommand_required = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
struct Common {
    /// JSON config file; flags override its fields.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, value_name = "DIR", default_value = "rec2pm-out")]
    out: PathBuf,
    #[command(flatten)]
    layer: ConfigLayer,
}

#[derive(Debug, Clone, Args)]
struct DataArg {
    /// Dataset in JSONL form; generated from the config when absent.
    #[arg(long, value_name = "PATH")]
    data: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train a model and score it on the configured split.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
    },
    /// Score saved parameters; several files are averaged.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long = "params", value_name = "PATH", required = true)]
        params: Vec<PathBuf>,
    },
    /// Rank the catalog for one history.
    Infer {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long, value_name = "PATH")]
        params: PathBuf,
        /// Comma-separated item ids, oldest first.
        #[arg(long, value_delimiter = ',', conflicts_with = "user")]
        items: Option<Vec<u32>>,
        /// User id whose test context is used.
        #[arg(long)]
        user: Option<String>,
        /// Memory file to resume from.
        #[arg(long, value_name = "PATH")]
        memory: Option<PathBuf>,
        /// Where to write the memory after ingesting.
        #[arg(long, value_name = "PATH")]
        save_memory: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        top: usize,
        /// iterative | one-off
        #[arg(long, default_value = "iterative")]
        session: SessionProtocol,
    },
    /// Time prediction and memory updates.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Trained memory model; random weights when absent.
        #[arg(long, value_name = "PATH")]
        params: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        reps: usize,
        /// History length per request (default 16 segments).
        #[arg(long)]
        context_len: Option<usize>,
        /// Distinct random histories.
        #[arg(long, default_value_t = 8)]
        contexts: usize,
    },
    /// Train and score the ablation variants.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16")]
        slot_values: Vec<usize>,
        /// Reconstruction weight of the reconstruction variant.
        #[arg(long, default_value_t = 1.0)]
        variant_recon_weight: f64,
    },
    /// Attention of the memory queries in a user's last update, as CSV.
    ExportAttention {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long, value_name = "PATH")]
        params: PathBuf,
        #[arg(long)]
        user: String,
        /// position | category
        #[arg(long, default_value = "position")]
        by: String,
        #[arg(long)]
        per_layer: bool,
    },
    /// Run the mask, gradient and metric invariant suite.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Self::GenData { .. } => "gen-data",
            Self::Train { .. } => "train",
            Self::Evaluate { .. } => "evaluate",
            Self::Infer { .. } => "infer",
            Self::Bench { .. } => "bench",
            Self::Ablate { .. } => "ablate",
            Self::ExportAttention { .. } => "export-attention",
            Self::Verify { .. } => "verify",
        }
    }

    fn common(&self) -> Option<&Common> {
        match self {
            Self::GenData { common }
            | Self::Train { common, .. }
            | Self::Evaluate { common, .. }
            | Self::Infer { common, .. }
            | Self::Bench { common, .. }
            | Self::Ablate { common, .. }
            | Self::ExportAttention { common, .. } => Some(common),
            Self::Verify { .. } => None,
        }
    }
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let cfg = match cli.command.common().map(resolve_common).transpose() {
        Ok(c) => c.unwrap_or_default(),
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_USAGE;
        }
    };
    match execute(&cli.command, &cfg) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}: {e}", cli.command.name());
            EXIT_RUNTIME
        }
    }
}

fn resolve_common(common: &Common) -> Result<RunConfig> {
    let file = common.config.as_deref().map(ConfigLayer::read).transpose()?;
    resolve(file.as_ref(), &common.layer)
}

fn execute(command: &Command, cfg: &RunConfig) -> Result<i32> {
    if let Command::Verify { seed } = command {
        return verify(*seed);
    }
    let common = command.common().expect("non-verify commands carry common flags");
    fs::create_dir_all(&common.out)?;
    let out = common.out.as_path();
    let mut manifest = RunManifest::start(command.name(), cfg);
    match command {
        Command::GenData { .. } => {
            let path = out.join("dataset.jsonl");
            save_dataset(&generate_synthetic(&cfg.data)?, &path)?;
            manifest.artifacts.push(path);
        }
        Command::Train { data, .. } => {
            let dataset = dataset(data, cfg)?;
            train_cmd(&dataset, cfg, out, &mut manifest)?;
        }
        Command::Evaluate { data, params, .. } => {
            let dataset = dataset(data, cfg)?;
            let report = evaluate_files(&dataset, cfg, params, &mut manifest.warnings)?;
            let path = out.join("report.jsonl");
            write_atomic(&path, &jsonl(std::slice::from_ref(&report))?)?;
            print_report(&report);
            manifest.artifacts.push(path);
            manifest.reports.push(report);
        }
        Command::Infer {
            data,
            params,
            items,
            user,
            memory,
            save_memory,
            top,
            session,
            ..
        } => {
            let model = load_model(params, cfg, None, &mut manifest.warnings)?;
            let history = match (items, user) {
                (Some(items), _) => items.clone(),
                (None, Some(user)) => {
                    let dataset = dataset(data, cfg)?;
                    user_context(&dataset, user, cfg)?
                }
                (None, None) => {
                    return Err(Error::Config("infer needs --items or --user".into()));
                }
            };
            let ranking = infer(&model, &history, memory.as_deref(), save_memory.as_deref(), *session, cfg)?;
            let top = ranking.top(*top);
            let line = serde_json::json!({
                "items": top,
                "scores": top.iter().map(|&i| ranking.scores[i as usize]).collect::<Vec<_>>(),
            });
            println!("{line}");
            let path = out.join("ranking.json");
            write_atomic(&path, line.to_string().as_bytes())?;
            manifest.artifacts.push(path);
            if let Some(p) = save_memory {
                manifest.artifacts.push(p.clone());
            }
        }
        Command::Bench {
            params,
            reps,
            context_len,
            contexts,
            ..
        } => {
            let reports = bench_cmd(cfg, params.as_deref(), *reps, *context_len, *contexts, &mut manifest.warnings)?;
            let path = out.join("bench.jsonl");
            write_atomic(&path, &jsonl(&reports)?)?;
            for r in &reports {
                println!(
                    "{:<18} len {:>5}  predict p50 {:>8.3} ms  p95 {:>8.3} ms  update p50 {}  state {} B",
                    r.protocol,
                    r.context_len,
                    r.predict_median_ms,
                    r.predict_p95_ms,
                    r.update_median_ms.map_or("-".to_string(), |m| format!("{m:.3} ms")),
                    r.bytes_per_user
                );
            }
            manifest.artifacts.push(path);
        }
        Command::Ablate {
            data,
            seeds,
            slot_values,
            variant_recon_weight,
            ..
        } => {
            let dataset = dataset(data, cfg)?;
            let plan = AblationPlan {
                seeds: seeds.clone(),
                slot_values: slot_values.clone(),
                recon_weight: *variant_recon_weight,
                protocol_users: cfg.eval.eval_users,
            };
            let table = run_ablation_suite(&dataset, &cfg.train, &plan)?;
            let path = out.join("ablation.jsonl");
            write_atomic(&path, &jsonl(&table.rows)?)?;
            for row in &table.rows {
                println!(
                    "{:<14} {:<14} H@10 {:>6.2}  N@10 {:>6.2}  mse {}",
                    row.name,
                    row.report.protocol,
                    row.report.metric("H@10"),
                    row.report.metric("N@10"),
                    row.consistency_mse.map_or("-".to_string(), |m| format!("{m:.4e}"))
                );
            }
            manifest.artifacts.push(path);
            manifest.reports.extend(table.rows.into_iter().map(|r| r.report));
        }
        Command::ExportAttention {
            data,
            params,
            user,
            by,
            per_layer,
            ..
        } => {
            let target: AttentionTarget = crate::error::parse_variant("attention target", by)?;
            let model = load_model(params, cfg, None, &mut manifest.warnings)?;
            let dataset = dataset(data, cfg)?;
            let history = user_context(&dataset, user, cfg)?;
            let (prior, segment) = final_update_inputs(&model, &history, cfg.train.mode)?
                .ok_or_else(|| Error::Memory(format!("user {user} has no full segment")))?;
            let cats = dataset.item_categories();
            let rows = export_attention(
                &model,
                prior.as_ref(),
                &segment,
                target,
                (!cats.is_empty()).then_some(&cats),
                *per_layer,
            )?;
            let path = out.join("attention.csv");
            write_atomic(&path, attention_csv(&rows).as_bytes())?;
            manifest.artifacts.push(path);
        }
        Command::Verify { .. } => unreachable!(),
    }
    let path = manifest.finish(out)?;
    eprintln!("wrote {}", path.display());
    Ok(EXIT_OK)
}

fn verify(seed: u64) -> Result<i32> {
    let checks = run_suite(seed);
    let mut stdout = std::io::stdout().lock();
    for c in &checks {
        writeln!(
            stdout,
            "{} {:<32} {} ({:.2}s)",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.detail,
            c.seconds
        )?;
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    writeln!(stdout, "{} checks, {failed} failed", checks.len())?;
    Ok(if failed == 0 { EXIT_OK } else { EXIT_RUNTIME })
}

fn dataset(arg: &DataArg, cfg: &RunConfig) -> Result<Dataset> {
    let d = match &arg.data {
        Some(p) => load_dataset(p, None)?,
        None => generate_synthetic(&cfg.data)?,
    };
    d.validate()?;
    Ok(d)
}

fn jsonl<T: serde::Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    Ok(buf)
}

fn print_report(r: &EvalReport) {
    let cells: Vec<String> = r.metrics.iter().map(|(k, v)| format!("{k} {v:.2}")).collect();
    println!("{} ({} users): {}", r.protocol, r.n_users, cells.join("  "));
}

/// Loads parameters, checking them against the architecture the config
/// implies for `n_items` (the stored catalog size when `None`).
fn load_model(
    path: &Path,
    cfg: &RunConfig,
    n_items: Option<usize>,
    warnings: &mut Vec<String>,
) -> Result<ModelParams> {
    let n_items = match n_items {
        Some(n) => n,
        None => params_io::load_params(path)?.params.config.n_items,
    };
    let (params, warning) = load_params_for(path, &cfg.train.model_config(n_items))?;
    if let Some(w) = warning {
        eprintln!("warning: {}: {w}", path.display());
        warnings.push(w);
    }
    Ok(params)
}

fn train_cmd(dataset: &Dataset, cfg: &RunConfig, out: &Path, manifest: &mut RunManifest) -> Result<()> {
    let outcome = train(dataset, &cfg.train)?;
    let params_path = out.join("params.r2pw");
    save_params(&outcome.params, &params_path)?;
    let metrics_path = out.join("metrics.jsonl");
    write_atomic(&metrics_path, &jsonl(&outcome.log)?)?;
    for e in &outcome.log {
        eprintln!(
            "epoch {:>3}  loss {:.4}  ar {:.4}  con {:.4}  valid H@10 {:.2}  ({:.1}s)",
            e.epoch, e.loss_total, e.loss_ar, e.loss_con, e.valid_h10, e.train_seconds
        );
    }
    let report = evaluate(&outcome.params, dataset, cfg.eval.protocol, &cfg.eval_options())?;
    print_report(&report);
    let report_path = out.join("report.jsonl");
    write_atomic(&report_path, &jsonl(std::slice::from_ref(&report))?)?;
    manifest.artifacts.extend([params_path, metrics_path, report_path]);
    manifest.reports.push(report);
    Ok(())
}

fn evaluate_files(
    dataset: &Dataset,
    cfg: &RunConfig,
    files: &[PathBuf],
    warnings: &mut Vec<String>,
) -> Result<EvalReport> {
    let mut reports = Vec::with_capacity(files.len());
    for f in files {
        let params = load_model(f, cfg, Some(dataset.catalog_size), warnings)?;
        reports.push(evaluate(&params, dataset, cfg.eval.protocol, &cfg.eval_options())?);
    }
    if reports.len() == 1 {
        Ok(reports.pop().unwrap())
    } else {
        EvalReport::average(&reports)
    }
}

fn user_context(dataset: &Dataset, user: &str, cfg: &RunConfig) -> Result<Vec<u32>> {
    let u = dataset
        .users
        .iter()
        .find(|u| u.user_id == user)
        .ok_or_else(|| Error::Config(format!("user `{user}` not in the dataset")))?;
    Ok(eval_context(&u.items, cfg.eval.split, cfg.train.l_full)?.0.to_vec())
}

fn infer(
    model: &ModelParams,
    history: &[u32],
    memory: Option<&Path>,
    save_to: Option<&Path>,
    protocol: SessionProtocol,
    cfg: &RunConfig,
) -> Result<Ranking> {
    if !model.config.with_memory {
        if memory.is_some() || save_to.is_some() {
            return Err(Error::Config("a model without memory cannot read or write memory files".into()));
        }
        let l = model.config.max_positions.min(history.len());
        return Ok(Ranking::from_scores(decode_scores(model, None, &history[history.len() - l..])?));
    }
    let mut session = InferenceSession::new(model, protocol, cfg.train.mode, 0)?;
    if let Some(p) = memory {
        if protocol != SessionProtocol::Iterative {
            return Err(Error::Config("resuming from a memory file needs the iterative session".into()));
        }
        let m = load_memory(p)?;
        if m.slots != model.config.slots || m.dim != model.config.d_model {
            return Err(Error::Memory(format!(
                "memory has {} slots of width {}, model expects {} of width {}",
                m.slots, m.dim, model.config.slots, model.config.d_model
            )));
        }
        session.mode = m.mode;
        session.memory = Some(m);
    }
    session.ingest_all(history)?;
    if let (Some(p), Some(m)) = (save_to, &session.memory) {
        save_memory(m, p)?;
    }
    session.predict_next()
}

fn bench_cmd(
    cfg: &RunConfig,
    params: Option<&Path>,
    reps: usize,
    context_len: Option<usize>,
    contexts: usize,
    warnings: &mut Vec<String>,
) -> Result<Vec<crate::inference::BenchReport>> {
    let t = &cfg.train;
    let n_items = cfg.data.catalog_size;
    let len = context_len.unwrap_or(16 * t.l_seg);
    let memory_cfg = crate::training::TrainConfig {
        trainer: TrainerKind::Rec2pm,
        ..t.clone()
    };
    let memory_model = match params {
        Some(p) => {
            let mut tmp = cfg.clone();
            tmp.train.trainer = TrainerKind::Rec2pm;
            load_model(p, &tmp, None, warnings)?
        }
        None => ModelParams::init(memory_cfg.model_config(n_items), t.seed)?,
    };
    let n_items = memory_model.config.n_items;
    let short = ModelParams::init(
        crate::training::TrainConfig {
            trainer: TrainerKind::PlainShort,
            ..t.clone()
        }
        .model_config(n_items),
        t.seed,
    )?;
    let full = ModelParams::init(
        crate::training::TrainConfig {
            trainer: TrainerKind::PlainFull,
            l_full: len,
            ..t.clone()
        }
        .model_config(n_items),
        t.seed,
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(t.seed);
    let histories: Vec<Vec<u32>> = (0..contexts.max(1))
        .map(|_| (0..len).map(|_| rng.gen_range(0..n_items as u32)).collect())
        .collect();
    let refs: Vec<&[u32]> = histories.iter().map(Vec::as_slice).collect();
    bench(
        &[
            BenchTarget::Short(&short),
            BenchTarget::Full(&full),
            BenchTarget::Memory(&memory_model, UpdateMode::Overwrite),
            BenchTarget::Memory(&memory_model, UpdateMode::Append),
        ],
        &refs,
        reps,
    )
}
