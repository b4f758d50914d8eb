use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use privlora_cli::record::RunSummary;

const SMALL: &str = r#"{"fed": {"task": {"n": 16, "layers": 2, "modules": 2, "clients": 5, "train_size": 200, "eval_size": 100, "shift_rank": 4},
                        "local": {"rank": 4}, "rounds": 3, "codec": {"train": {"steps": 30, "holdout": 8}}}}"#;

fn privlora(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_privlora")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap_or(-1)
}

fn write_config(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p.to_string_lossy().into_owned()
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

#[test]
fn exit_codes_follow_the_contract() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let out = s(&dir.join("out"));

    let bad = write_config(dir, "bad.json", r#"{"fed": {"rounds": 3, "extra": true}}"#);
    let o = privlora(&["simulate", "--config", &bad, "--out-dir", &out]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("extra"));

    let neg = write_config(dir, "neg.json", r#"{"fed": {"privacy": {"budget": {"epsilon": -1.0, "delta": 0.001}}}}"#);
    assert_eq!(code(&privlora(&["simulate", "--config", &neg, "--out-dir", &out])), 3);
    assert_eq!(code(&privlora(&["calibrate", "--epsilons=-2", "--out-dir", &out])), 3);

    let small = write_config(dir, "small.json", SMALL);
    let o = privlora(&["simulate", "--config", &small, "--codec-dir", &s(&dir.join("nowhere")), "--out-dir", &out]);
    assert_eq!(code(&o), 4);
    assert!(String::from_utf8_lossy(&o.stderr).contains("nowhere"));
    assert_eq!(code(&privlora(&["histograms", "--log", &s(&dir.join("none.jsonl")), "--out", &out])), 4);
    assert_eq!(code(&privlora(&["report", "--runs", &s(&dir.join("missing")), "--out-dir", &out])), 4);

    let wild = write_config(
        dir,
        "wild.json",
        r#"{"fed": {"task": {"n": 16, "layers": 2, "modules": 2, "clients": 5, "train_size": 200, "eval_size": 100, "shift_rank": 4},
                    "local": {"rank": 4}, "rounds": 3, "server_lr": 1e308, "server_lr_decay": 1.0, "clip": null,
                    "codec": {"mode": "none"}, "privacy": {"fixed_sigma": {"sigma": 1.0, "delta": 0.001}}}}"#,
    );
    let o = privlora(&["simulate", "--config", &wild, "--out-dir", &s(&dir.join("wild"))]);
    assert_eq!(code(&o), 5, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.join("wild/summary.json").exists());
}

#[test]
fn codec_is_accepted_only_for_its_own_config() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let cfg = write_config(dir, "small.json", SMALL);
    let codec = s(&dir.join("codec"));
    assert_eq!(code(&privlora(&["pretrain", "--config", &cfg, "--out-dir", &codec])), 0);
    assert!(dir.join("codec/stats/client_004.json").exists());

    let run = s(&dir.join("run"));
    let ok = privlora(&["simulate", "--config", &cfg, "--codec-dir", &codec, "--out-dir", &run]);
    assert_eq!(code(&ok), 0, "{}", String::from_utf8_lossy(&ok.stderr));

    let stored = fs::read(dir.join("run/rounds.csv")).unwrap();

    // Inline pretraining gives the same run as the stored codec.
    let inline = s(&dir.join("inline"));
    assert_eq!(code(&privlora(&["simulate", "--config", &cfg, "--out-dir", &inline])), 0);
    assert_eq!(fs::read(dir.join("inline/rounds.csv")).unwrap(), stored);

    // A different privacy level reuses the codec; a different seed does not.
    let sweep = SMALL.replace(r#""rounds": 3"#, r#""rounds": 3, "privacy": {"budget": {"epsilon": 1.0, "delta": 0.001}}"#);
    let cfg2 = write_config(dir, "sweep.json", &sweep);
    let other = s(&dir.join("sweep"));
    assert_eq!(code(&privlora(&["simulate", "--config", &cfg2, "--codec-dir", &codec, "--out-dir", &other])), 0);
    assert_ne!(fs::read(dir.join("sweep/rounds.csv")).unwrap(), stored);
    let o = privlora(&["simulate", "--config", &cfg, "--seed", "9", "--codec-dir", &codec, "--out-dir", &other]);
    assert_eq!(code(&o), 2);
}

#[test]
fn report_merges_seeds_into_one_row_per_level() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let base = SMALL.replace(r#""rounds": 3"#, r#""rounds": 2, "codec": {"mode": "none"}"#).replace(
        r#", "codec": {"train": {"steps": 30, "holdout": 8}}"#,
        "",
    );
    let mut runs = Vec::new();
    for (label, privacy) in [("inf", r#"{"fixed_sigma": {"sigma": 0.0, "delta": 0.001}}"#), ("eight", r#"{"budget": {"epsilon": 8.0, "delta": 0.001}}"#)] {
        let body = base.replace(r#""rounds": 2"#, &format!(r#""rounds": 2, "privacy": {privacy}"#));
        let cfg = write_config(dir, &format!("{label}.json"), &body);
        for seed in 0..10 {
            let out = dir.join(format!("{label}_{seed}"));
            let o = privlora(&["simulate", "--config", &cfg, "--seed", &seed.to_string(), "--out-dir", &s(&out)]);
            assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
            runs.push(s(&out));
        }
    }
    let summary: RunSummary = serde_json::from_slice(&fs::read(dir.join("inf_0/summary.json")).unwrap()).unwrap();
    assert_eq!(summary.pretrain_scalars, 0);
    assert_eq!(summary.final_gdp_epsilon, "inf");

    let mut args = vec!["report", "--out-dir"];
    let rep = s(&dir.join("report"));
    args.push(&rep);
    args.push("--runs");
    args.extend(runs.iter().map(String::as_str));
    assert_eq!(code(&privlora(&args)), 0);
    let csv = fs::read_to_string(dir.join("report/report.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 2, "{csv}");
    assert!(rows[0].starts_with("none,inf,10,"));
    assert!(rows[1].starts_with("none,8,10,"));
    let curves = fs::read_to_string(dir.join("report/report_curves.csv")).unwrap();
    assert_eq!(curves.lines().count(), 1 + 2 * 2);
}

#[test]
fn calibrate_writes_both_delta_conventions() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    assert_eq!(code(&privlora(&["calibrate", "--profile", "llama", "--out-dir", &s(&a)])), 0);
    assert_eq!(code(&privlora(&["calibrate", "--profile", "llama", "--delta-mode", "fixed", "--out-dir", &s(&b)])), 0);
    let ta = fs::read_to_string(a.join("calibration.csv")).unwrap();
    let tb = fs::read_to_string(b.join("calibration.csv")).unwrap();
    assert_ne!(ta, tb);
    assert!(ta.lines().nth(1).unwrap().starts_with("inf,0,inf"));
    assert_eq!(fs::read_to_string(a.join("calibration_trace.csv")).unwrap().lines().count(), 1 + 7 * 20);
}

#[test]
fn histograms_of_a_logged_run() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let cfg = write_config(dir, "small.json", &SMALL.replace(r#""steps": 30"#, r#""steps": 5"#));
    let run = dir.join("run");
    assert_eq!(code(&privlora(&["simulate", "--config", &cfg, "--out-dir", &s(&run), "--log-gradients"])), 0);
    let out = dir.join("hist.csv");
    assert_eq!(code(&privlora(&["histograms", "--log", &s(&run.join("gradients.jsonl")), "--out", &s(&out), "--bins", "21"])), 0);
    let csv = fs::read_to_string(&out).unwrap();
    // 2 layers x 2 epochs x 2 parts x 21 bins.
    assert_eq!(csv.lines().count(), 1 + 2 * 2 * 2 * 21);
    assert_eq!(code(&privlora(&["histograms", "--log", &s(&run.join("gradients.jsonl")), "--out", &s(&out), "--bins", "20"])), 2);
}
