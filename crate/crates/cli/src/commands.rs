//! Subcommands and their output files.
//!
//! Every command that writes `<out>` also writes `<out>.config`, the
//! resolved configuration, and embeds the same text inside the artifact
//! itself (a `config` JSON field or `# ` CSV header lines).

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Arg, ArgMatches, Command};
use elastic_dllm::decode::{decode, DecodeError};
use elastic_dllm::diagnostics::{
    attention_dump, capture_step, cost_report, eos_trace, hidden_dump, planned_cost, DiagnosticsError,
};
use elastic_dllm::layout::{BlockPartition, LayoutError};
use elastic_dllm::model::{init_weights, ModelError, ModelWeights};
use elastic_dllm::train::{generate_corpus, train, TrainError};
use elastic_dllm::verify::run_all;
use serde_json::json;
use thiserror::Error;

use crate::config::{file_key, ConfigError, IndexList, RunConfig, CONFIG_ENV, KEYS};

/// Keys describing the architecture; these come from the weights file when one is loaded.
const MODEL_KEYS: &[&str] = &[
    "vocab_size",
    "d_model",
    "num_heads",
    "num_layers",
    "d_ff",
    "theta_base",
    "init_seed",
    "pad_id",
    "bos_id",
    "eos_id",
    "mask_id",
];

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("usage: {0}")]
    Usage(String),
    #[error("cannot write {path}: {source}")]
    Write {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Layout(#[from] LayoutError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Diagnostics(#[from] DiagnosticsError),
    #[error("{failed} of {total} checks failed")]
    Verification { failed: usize, total: usize },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}

fn config_args(cmd: Command) -> Command {
    let cmd = cmd.arg(
        Arg::new("config")
            .long("config")
            .value_name("PATH")
            .help(format!("Configuration file [default: ${CONFIG_ENV}]")),
    );
    KEYS.iter().fold(cmd, |cmd, k| {
        cmd.arg(
            Arg::new(k.flag)
                .long(k.flag)
                .value_name("VALUE")
                .help(k.help)
                .help_heading("Configuration"),
        )
    })
}

fn weights_arg() -> Arg {
    Arg::new("weights")
        .long("weights")
        .value_name("PATH")
        .required(true)
        .help("Weights file")
}

fn out_arg(required: bool, help: &'static str) -> Arg {
    Arg::new("out")
        .long("out")
        .value_name("PATH")
        .required(required)
        .help(help)
}

pub fn command() -> Command {
    let sub = |name: &'static str, about: &'static str| config_args(Command::new(name).about(about));
    Command::new("elastic-dllm")
        .about("Elastic layouts for masked diffusion decoding on a toy transformer")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(
            sub("train", "Train a model on a synthetic corpus")
                .arg(out_arg(true, "Weights output; the loss curve goes to <out>.loss.csv")),
        )
        .subcommand(
            sub("decode", "Decode a prompt and write the step trace")
                .arg(weights_arg())
                .arg(out_arg(true, "Trace JSONL; the cost report goes to <out>.cost.json")),
        )
        .subcommand(
            sub("verify", "Run the structural oracle suite")
                .arg(weights_arg())
                .arg(out_arg(false, "Optional JSON report")),
        )
        .subcommand(
            sub("trace-eos", "Track where [EOS] is most likely at every step")
                .arg(weights_arg())
                .arg(out_arg(true, "CSV output")),
        )
        .subcommand(
            sub("dump-attn", "Dump attention matrices of one decode step")
                .arg(weights_arg())
                .arg(out_arg(true, "Binary matrices; the sidecar goes to <out>.json")),
        )
        .subcommand(
            sub("dump-hidden", "Dump residual-stream vectors of one decode step")
                .arg(weights_arg())
                .arg(out_arg(true, "CSV output")),
        )
        .subcommand(
            sub("cost", "Analytic per-step cost of a decode configuration")
                .arg(out_arg(true, "JSON output; a CSV copy goes to <out>.csv")),
        )
}

/// Parses `args` (including the program name), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let (name, sub) = matches.subcommand().expect("subcommand required");
    match dispatch(name, sub) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn resolve_config(m: &ArgMatches) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::default();
    let path = match m.get_one::<String>("config") {
        Some(p) => Some(PathBuf::from(p)),
        None => std::env::var_os(CONFIG_ENV)
            .filter(|v| !v.is_empty())
            .map(PathBuf::from),
    };
    if let Some(path) = path {
        cfg.apply_file(&path)?;
    }
    for k in KEYS {
        if let Some(v) = m.get_one::<String>(k.flag) {
            cfg.set(&file_key(k.flag), v)?;
        }
    }
    Ok(cfg)
}

fn path_arg(m: &ArgMatches, id: &str) -> Option<PathBuf> {
    m.get_one::<String>(id).map(PathBuf::from)
}

fn suffixed(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|source| CliError::Write {
        path: path.display().to_string(),
        source,
    })
}

fn write_config(out: &Path, cfg: &RunConfig) -> Result<(), CliError> {
    write(&suffixed(out, ".config"), cfg.to_text())
}

fn pretty(v: &serde_json::Value) -> String {
    serde_json::to_string_pretty(v).expect("serializable") + "\n"
}

/// Loads weights and makes the architecture keys match them.
fn load_weights(m: &ArgMatches, cfg: &mut RunConfig) -> Result<ModelWeights<f32>, CliError> {
    let path = path_arg(m, "weights").expect("required argument");
    let weights = ModelWeights::load(&path)?;
    let from_file = RunConfig {
        model: weights.config.clone(),
        ..RunConfig::default()
    };
    for &key in MODEL_KEYS {
        let actual = from_file.get(key).expect("model key");
        let requested = cfg.get(key).expect("model key");
        if cfg.explicit.contains(key) && requested != actual {
            return Err(ConfigError::BadValue {
                key: key.to_string(),
                value: requested,
                reason: format!("weights file {} has {actual}", path.display()),
            }
            .into());
        }
    }
    cfg.model = weights.config.clone();
    Ok(weights)
}

fn dispatch(name: &str, m: &ArgMatches) -> Result<(), CliError> {
    let mut cfg = resolve_config(m)?;
    let out = path_arg(m, "out");
    match name {
        "train" => cmd_train(&cfg, &out.expect("required argument")),
        "decode" => {
            let w = load_weights(m, &mut cfg)?;
            cmd_decode(&cfg, &w, &out.expect("required argument"))
        }
        "verify" => {
            let w = load_weights(m, &mut cfg)?;
            cmd_verify(&cfg, &w, out.as_deref())
        }
        "trace-eos" => {
            let w = load_weights(m, &mut cfg)?;
            cmd_trace_eos(&cfg, &w, &out.expect("required argument"))
        }
        "dump-attn" => {
            let w = load_weights(m, &mut cfg)?;
            cmd_dump_attn(&cfg, &w, &out.expect("required argument"))
        }
        "dump-hidden" => {
            let w = load_weights(m, &mut cfg)?;
            cmd_dump_hidden(&cfg, &w, &out.expect("required argument"))
        }
        "cost" => cmd_cost(&cfg, &out.expect("required argument")),
        other => Err(CliError::Usage(format!("unknown command {other}"))),
    }
}

pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let initial = init_weights(&cfg.model)?;
    let corpus = generate_corpus(&cfg.corpus, &cfg.model.special, cfg.model.vocab_size)?;
    let outcome = train(&initial, &corpus, &cfg.train)?;
    write(out, outcome.weights.to_bytes())?;
    let mut csv = cfg.to_comment();
    csv.push_str("step,loss\n");
    for (i, l) in outcome.losses.iter().enumerate() {
        csv.push_str(&format!("{i},{l}\n"));
    }
    write(&suffixed(out, ".loss.csv"), csv)?;
    write_config(out, cfg)?;
    let first = outcome.losses.first().copied().unwrap_or(f32::NAN);
    let last = outcome.losses.last().copied().unwrap_or(f32::NAN);
    println!(
        "trained {} steps: loss {first:.4} -> {last:.4}; weights {} (sha256 {})",
        outcome.losses.len(),
        out.display(),
        outcome.weights.checksum()
    );
    Ok(())
}

pub fn cmd_decode(cfg: &RunConfig, weights: &ModelWeights<f32>, out: &Path) -> Result<(), CliError> {
    let trace = decode(&cfg.prompt, weights, &cfg.decode)?;
    let partition = cfg.decode.partition(cfg.prompt.len())?;
    let cost = cost_report(&partition, &cfg.decode, &weights.config, &trace.records)?;
    let labels = cfg.decode.ablation_labels();
    let metadata = json!({
        "config": cfg.to_text(),
        "weights_sha256": weights.checksum(),
        "ablation": !labels.is_empty(),
        "ablation_labels": labels,
    });
    write(out, trace.to_jsonl(&metadata))?;
    write(
        &suffixed(out, ".cost.json"),
        pretty(&json!({
            "config": cfg.to_text(),
            "weights_sha256": weights.checksum(),
            "cost": cost,
        })),
    )?;
    write_config(out, cfg)?;
    let tokens: Vec<String> = trace.final_tokens.iter().map(ToString::to_string).collect();
    println!(
        "{} steps, token ratio {:.4}, pair ratio {:.4}{}",
        trace.records.len(),
        cost.token_ratio,
        cost.pair_ratio,
        if labels.is_empty() {
            String::new()
        } else {
            format!(", ablation: {}", labels.join(" "))
        }
    );
    println!("{}", tokens.join(" "));
    Ok(())
}

pub fn cmd_verify(cfg: &RunConfig, weights: &ModelWeights<f32>, out: Option<&Path>) -> Result<(), CliError> {
    let checks = run_all(weights, cfg.train.seed);
    for c in &checks {
        println!("{c}");
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    println!("{} of {} checks passed", checks.len() - failed, checks.len());
    if let Some(out) = out {
        write(
            out,
            pretty(&json!({
                "config": cfg.to_text(),
                "weights_sha256": weights.checksum(),
                "checks": checks,
            })),
        )?;
        write_config(out, cfg)?;
    }
    if failed > 0 {
        return Err(CliError::Verification {
            failed,
            total: checks.len(),
        });
    }
    Ok(())
}

pub fn cmd_trace_eos(cfg: &RunConfig, weights: &ModelWeights<f32>, out: &Path) -> Result<(), CliError> {
    let trace = eos_trace(&cfg.prompt, weights, &cfg.decode)?;
    write(out, cfg.to_comment() + &trace.to_csv())?;
    write_config(out, cfg)?;
    println!(
        "{} steps; early-stage terminal-block fraction {:.4}; final [EOS] position {}",
        trace.records.len(),
        trace.early_terminal_fraction,
        trace.final_eos_position.map_or("none".to_string(), |p| p.to_string())
    );
    Ok(())
}

pub fn cmd_dump_attn(cfg: &RunConfig, weights: &ModelWeights<f32>, out: &Path) -> Result<(), CliError> {
    let step = capture_step(&cfg.prompt, weights, &cfg.decode, cfg.capture_step)?;
    let layers = cfg.layer.resolve(weights.config.num_layers);
    let heads = cfg.head.resolve(weights.config.num_heads);
    let entries = step.entries(weights.config.special.mask);
    let sidecar = attention_dump(weights, &step.inputs(), &entries, &layers, &heads, out, &cfg.to_text())?;
    write_config(out, cfg)?;
    println!(
        "{} matrices of {}x{} from step {} (block {})",
        sidecar.matrices.len(),
        sidecar.size,
        sidecar.size,
        step.step,
        step.current_block
    );
    Ok(())
}

pub fn cmd_dump_hidden(cfg: &RunConfig, weights: &ModelWeights<f32>, out: &Path) -> Result<(), CliError> {
    let layer = match &cfg.layer {
        IndexList::All => weights.config.num_layers,
        IndexList::Some(v) if v.len() == 1 => v[0],
        IndexList::Some(_) => return Err(CliError::Usage("dump-hidden takes a single --layer".into())),
    };
    let step = capture_step(&cfg.prompt, weights, &cfg.decode, cfg.capture_step)?;
    let entries = step.entries(weights.config.special.mask);
    hidden_dump(weights, &step.inputs(), &entries, layer, out, &cfg.to_text())?;
    write_config(out, cfg)?;
    println!("{} entries after layer {layer} from step {}", entries.len(), step.step);
    Ok(())
}

pub fn cmd_cost(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    cfg.model.validate()?;
    let partition = BlockPartition::new(cfg.cost_prompt_len(), cfg.decode.gen_len, cfg.decode.block_size)?;
    let report = planned_cost(&partition, &cfg.decode, &cfg.model)?;
    write(
        out,
        pretty(&json!({
            "config": cfg.to_text(),
            "cost": report,
        })),
    )?;
    write(&suffixed(out, ".csv"), cfg.to_comment() + &report.to_csv())?;
    write_config(out, cfg)?;
    println!(
        "{} steps, {} vs {} tokens per step at most, token ratio {:.6}, pair ratio {:.6}",
        report.per_step.len(),
        report.per_step.iter().map(|s| s.active_tokens).max().unwrap_or(0),
        partition.total_len(),
        report.token_ratio,
        report.pair_ratio
    );
    Ok(())
}
