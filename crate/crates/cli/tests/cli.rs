use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_elastic-dllm"));
    c.env_remove("ELASTIC_DLLM_CONFIG");
    c
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn with_weights() -> (TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    ok(
        dir.path(),
        &["train", "--steps", "1", "--corpus-size", "8", "--out", "w.bin"],
    );
    let w = dir.path().join("w.bin");
    (dir, w)
}

fn summary(path: &Path) -> serde_json::Value {
    let text = fs::read_to_string(path).unwrap();
    serde_json::from_str(text.lines().last().unwrap()).unwrap()
}

const SMALL: &[&str] = &[
    "--gen-len",
    "64",
    "--block-size",
    "32",
    "--steps-per-block",
    "8",
    "--prompt",
    "1,5,6",
];

#[test]
fn train_writes_weights_loss_and_config() {
    let dir = tempfile::tempdir().unwrap();
    ok(
        dir.path(),
        &["train", "--steps", "3", "--corpus-size", "16", "--out", "w.bin"],
    );
    assert_eq!(&fs::read(dir.path().join("w.bin")).unwrap()[..4], b"EDLM");
    let config = fs::read_to_string(dir.path().join("w.bin.config")).unwrap();
    let loss = fs::read_to_string(dir.path().join("w.bin.loss.csv")).unwrap();
    let embedded: String = loss
        .lines()
        .map_while(|l| l.strip_prefix("# "))
        .map(|l| format!("{l}\n"))
        .collect();
    assert_eq!(embedded, config);
    assert!(config.contains("steps = 3\n"));
    let rows: Vec<&str> = loss.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows[0], "step,loss");
    assert_eq!(rows.len(), 4);
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(dir.path(), &["train"]).status.code(), Some(2));
    assert_eq!(
        run(dir.path(), &["train", "--out", "w", "--no-such-flag", "1"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        run(dir.path(), &["train", "--out", "w", "--r", "many"]).status.code(),
        Some(2)
    );
    assert_eq!(
        run(dir.path(), &["train", "--out", "w", "--config", "missing.cfg"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(run(dir.path(), &[]).status.code(), Some(2));
}

#[test]
fn elastic_with_full_retention_matches_baseline() {
    let (dir, w) = with_weights();
    let w = w.to_str().unwrap();
    ok(
        dir.path(),
        &[&["decode", "--weights", w, "--out", "base.jsonl"], SMALL].concat(),
    );
    ok(
        dir.path(),
        &[
            &[
                "decode",
                "--weights",
                w,
                "--mode",
                "elastic",
                "--r",
                "32",
                "--out",
                "el.jsonl",
            ],
            SMALL,
        ]
        .concat(),
    );
    let (a, b) = (
        summary(&dir.path().join("base.jsonl")),
        summary(&dir.path().join("el.jsonl")),
    );
    assert_eq!(a["final_tokens"], b["final_tokens"]);
    assert_eq!(a["steps"], 16);
    let cost: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("el.jsonl.cost.json")).unwrap()).unwrap();
    assert_eq!(cost["cost"]["pair_ratio"], 1.0);
}

#[test]
fn compact_rank_changes_the_trace() {
    let (dir, w) = with_weights();
    let w = w.to_str().unwrap();
    let elastic = [
        "decode",
        "--weights",
        w,
        "--mode",
        "elastic",
        "--r",
        "2",
        "--gen-len",
        "64",
        "--block-size",
        "8",
        "--steps-per-block",
        "2",
        "--prompt",
        "1,5,6",
    ];
    ok(dir.path(), &[&elastic[..], &["--out", "p.jsonl"]].concat());
    ok(
        dir.path(),
        &[&elastic[..], &["--position-mode", "compact_rank", "--out", "c.jsonl"]].concat(),
    );
    let steps = |name: &str| -> Vec<String> {
        let text = fs::read_to_string(dir.path().join(name)).unwrap();
        text.lines()
            .filter(|l| l.contains("\"type\":\"step\""))
            .map(String::from)
            .collect()
    };
    assert_ne!(steps("p.jsonl"), steps("c.jsonl"));
    assert_eq!(
        summary(&dir.path().join("c.jsonl"))["metadata"]["ablation_labels"][0],
        "position_mode=compact_rank"
    );
}

#[test]
fn block_anchor_ablation_is_labeled() {
    let (dir, w) = with_weights();
    let w = w.to_str().unwrap();
    ok(
        dir.path(),
        &[
            &[
                "decode",
                "--weights",
                w,
                "--mode",
                "block_anchor",
                "--anchor-content",
                "eos",
                "--out",
                "a.jsonl",
            ],
            SMALL,
        ]
        .concat(),
    );
    let s = summary(&dir.path().join("a.jsonl"));
    assert_eq!(s["metadata"]["ablation"], true);
    assert_eq!(s["metadata"]["ablation_labels"][0], "anchor_content=eos_token");
    assert!(s["metadata"]["config"]
        .as_str()
        .unwrap()
        .contains("anchor_content = eos_token\n"));
}

#[test]
fn verify_reports_named_checks() {
    let (dir, w) = with_weights();
    let w = w.to_str().unwrap();
    let stdout = ok(dir.path(), &["verify", "--weights", w]);
    let checks: Vec<&str> = stdout.lines().filter(|l| l.starts_with("[PASS]")).collect();
    assert!(checks.len() >= 6, "{stdout}");
    assert!(!stdout.contains("[FAIL]"));

    let mut bytes = fs::read(w).unwrap();
    bytes[200] ^= 1;
    fs::write(dir.path().join("bad.bin"), bytes).unwrap();
    let out = run(dir.path(), &["verify", "--weights", "bad.bin"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad weights"));
}

#[test]
fn diagnostics_commands() {
    let (dir, w) = with_weights();
    let w = w.to_str().unwrap();
    ok(
        dir.path(),
        &[&["trace-eos", "--weights", w, "--out", "eos.csv"], SMALL].concat(),
    );
    let csv = fs::read_to_string(dir.path().join("eos.csv")).unwrap();
    let rows = csv.lines().filter(|l| !l.starts_with('#')).count() - 1;
    assert_eq!(rows, 16);
    let embedded: String = csv
        .lines()
        .map_while(|l| l.strip_prefix("# "))
        .map(|l| format!("{l}\n"))
        .collect();
    assert_eq!(embedded, fs::read_to_string(dir.path().join("eos.csv.config")).unwrap());

    let out = run(
        dir.path(),
        &[&["dump-attn", "--weights", w, "--layer", "99", "--out", "a.bin"], SMALL].concat(),
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("out of range"));

    ok(
        dir.path(),
        &[
            &[
                "dump-attn",
                "--weights",
                w,
                "--capture-step",
                "3",
                "--head",
                "1",
                "--out",
                "a.bin",
            ],
            SMALL,
        ]
        .concat(),
    );
    let sidecar: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("a.bin.json")).unwrap()).unwrap();
    assert_eq!(sidecar["matrices"].as_array().unwrap().len(), 2);
    assert_eq!(
        sidecar["config"].as_str().unwrap(),
        fs::read_to_string(dir.path().join("a.bin.config")).unwrap()
    );

    ok(
        dir.path(),
        &[
            &["dump-hidden", "--weights", w, "--layer", "0", "--out", "h.csv"],
            SMALL,
        ]
        .concat(),
    );
    let hidden = fs::read_to_string(dir.path().join("h.csv")).unwrap();
    assert_eq!(hidden.lines().filter(|l| !l.starts_with('#')).count(), 1 + 3 + 64);
    let out = run(
        dir.path(),
        &[
            &["dump-hidden", "--weights", w, "--layer", "0,1", "--out", "h2.csv"],
            SMALL,
        ]
        .concat(),
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn cost_reports_the_mid_generation_count() {
    let dir = tempfile::tempdir().unwrap();
    ok(
        dir.path(),
        &[
            "cost",
            "--prompt-len",
            "64",
            "--mode",
            "elastic",
            "--r",
            "8",
            "--out",
            "cost.json",
        ],
    );
    let v: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("cost.json")).unwrap()).unwrap();
    let steps = v["cost"]["per_step"].as_array().unwrap();
    assert_eq!(steps.len(), 512);
    let mid: Vec<&serde_json::Value> = steps.iter().filter(|s| s["current_block"] == 8).collect();
    assert!(mid
        .iter()
        .all(|s| s["active_tokens"] == 408 && s["baseline_tokens"] == 576));
    assert!(fs::read_to_string(dir.path().join("cost.json.csv"))
        .unwrap()
        .contains("\nstep,mode,current_block,"));
}

#[test]
fn config_file_from_environment_and_flag_precedence() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("run.cfg"),
        "# cost run\nprompt_len = 64\nmode = elastic\nr = 4\n",
    )
    .unwrap();
    let out = bin()
        .current_dir(dir.path())
        .env("ELASTIC_DLLM_CONFIG", "run.cfg")
        .args(["cost", "--r", "8", "--out", "cost.json"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let config = fs::read_to_string(dir.path().join("cost.json.config")).unwrap();
    assert!(config.contains("prompt_len = 64\n"));
    assert!(config.contains("mode = elastic\n"));
    assert!(config.contains("r = 8\n"));
}
