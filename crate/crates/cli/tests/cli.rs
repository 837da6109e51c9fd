use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use asvlab_cli::manifest::{read_manifest, CONFIG_FILE, MANIFEST_FILE};

fn asvlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_asvlab"))
        .args(args)
        .env("ASVLAB_THREADS", "2")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = asvlab(args);
    assert!(
        out.status.success(),
        "asvlab {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_json(dir: &Path, name: &str, v: serde_json::Value) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, v.to_string()).unwrap();
    p
}

fn tiny_dataset(dir: &Path) -> PathBuf {
    let cfg = write_json(
        dir,
        "data_cfg.json",
        serde_json::json!({"dataset": {"n_pilot": 40, "n_synth_mixed": 20, "n_synth_dyn": 10, "n_synth_stat": 10}}),
    );
    let out = dir.join("data");
    ok(&["gen-data", "--config", s(&cfg), "--seed", "3", "--out", s(&out)]);
    out.join("dataset.bin")
}

/// Re-runs a finished run from its own config.json and compares manifests.
fn assert_replays(subcommand: &str, out: &Path, replay: &Path) {
    let cfg = out.join(CONFIG_FILE);
    ok(&[subcommand, "--config", s(&cfg), "--out", s(replay)]);
    let a = read_manifest(&out.join(MANIFEST_FILE)).unwrap();
    let b = read_manifest(&replay.join(MANIFEST_FILE)).unwrap();
    assert_eq!(a.config_sha256, b.config_sha256, "{subcommand}: config digest");
    assert_eq!(a.seed, b.seed);
    let strip = |m: &asvlab_cli::manifest::Manifest| -> Vec<(String, String)> {
        m.outputs
            .iter()
            .filter(|f| !Path::new(&f.path).is_absolute())
            .map(|f| (f.path.clone(), f.sha256.clone()))
            .collect()
    };
    assert_eq!(strip(&a), strip(&b), "{subcommand}: outputs differ");
    assert!(!a.outputs.is_empty());
}

#[test]
fn unknown_flag_prints_usage_and_exits_2() {
    let out = asvlab(&["gen-data", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("Usage"), "{err}");
    assert_eq!(asvlab(&["no-such-subcommand"]).status.code(), Some(2));
}

#[test]
fn missing_input_exits_1_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere.bin");
    let out = asvlab(&["train-vae", "--data", s(&missing), "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains(s(&missing)));

    let out = asvlab(&[
        "gen-data",
        "--config",
        s(&dir.path().join("cfg.json")),
        "--out",
        s(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("cfg.json"));
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_json(dir.path(), "c.json", serde_json::json!({"dataset": {"n_pilots": 3}}));
    let out = asvlab(&["gen-data", "--config", s(&cfg), "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("dataset.n_pilots"));
}

#[test]
fn data_and_vae_pipeline_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = tiny_dataset(d);
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("data/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["rows"], 240);
    assert_replays("gen-data", &d.join("data"), &d.join("data2"));

    let vae_out = d.join("vae");
    ok(&[
        "train-vae",
        "--arch",
        "shallow",
        "--beta",
        "0,1",
        "--seeds",
        "1,2",
        "--latent-dim",
        "2",
        "--epochs",
        "2",
        "--data",
        s(&data),
        "--out",
        s(&vae_out),
    ]);
    let runs = std::fs::read_to_string(vae_out.join("runs.csv")).unwrap();
    assert_eq!(runs.lines().count(), 5);
    let summary = std::fs::read_to_string(vae_out.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 3);
    assert!(vae_out.join("vae_shallow_beta1_seed2.ckpt").exists());
    assert!(vae_out.join("vae_shallow_beta1_seed2_curve.csv").exists());
    assert_replays("train-vae", &vae_out, &d.join("vae2"));

    let ck1 = vae_out.join("vae_shallow_beta1_seed1.ckpt");
    let ck2 = vae_out.join("vae_shallow_beta1_seed2.ckpt");
    let ckpts = format!("{},{}", s(&ck1), s(&ck2));
    let eval_out = d.join("evalvae");
    ok(&[
        "eval-vae",
        "--ckpt",
        &ckpts,
        "--data",
        s(&data),
        "--latents",
        "--out",
        s(&eval_out),
    ]);
    let report = std::fs::read_to_string(eval_out.join("report.csv")).unwrap();
    assert!(report.starts_with("ckpt,arch,latent_dim,beta,bce,kl,total,active_dims"));
    assert_eq!(report.lines().count(), 3);
    assert!(eval_out.join("latents_001.csv").exists());
    assert_replays("eval-vae", &eval_out, &d.join("evalvae2"));

    let exp = d.join("export");
    ok(&[
        "export",
        "--dataset",
        s(&data),
        "--vae",
        s(&ck1),
        "--data",
        s(&data),
        "--out",
        s(&exp),
    ]);
    assert_eq!(
        std::fs::read_to_string(exp.join("dataset.csv"))
            .unwrap()
            .lines()
            .count(),
        241
    );
    assert!(exp.join("latents.csv").exists());
    assert_replays("export", &exp, &d.join("export2"));
}

#[test]
fn agent_pipeline_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = tiny_dataset(d);
    let vae_out = d.join("vae");
    ok(&[
        "train-vae",
        "--beta",
        "0,1",
        "--epochs",
        "1",
        "--data",
        s(&data),
        "--out",
        s(&vae_out),
    ]);
    let b0 = vae_out.join("vae_shallow_beta0_seed0.ckpt");
    let b1 = vae_out.join("vae_shallow_beta1_seed0.ckpt");

    let cfg = write_json(
        d,
        "agent.json",
        serde_json::json!({
            "ppo": {"n_steps": 64, "hidden": 16},
            "env": {"max_steps": 40}
        }),
    );
    let agent_out = d.join("agent");
    ok(&[
        "train-agent",
        "--config",
        s(&cfg),
        "--mode",
        "shallow_locked",
        "--encoder",
        s(&b1),
        "--steps",
        "192",
        "--static",
        "2",
        "--dynamic",
        "2",
        "--eval-episodes",
        "3",
        "--out",
        s(&agent_out),
    ]);
    for f in [
        "policy.ckpt",
        "episodes.csv",
        "updates.csv",
        "curves.csv",
        "summary.json",
        "report.csv",
    ] {
        assert!(agent_out.join(f).exists(), "{f}");
    }
    let episodes = std::fs::read_to_string(agent_out.join("episodes.csv")).unwrap();
    assert!(episodes.starts_with("episode,steps,progress,mean_cte,cumulative_reward,collision,termination_reason\n"));
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(agent_out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["encoder_hash_start"], summary["encoder_hash_end"]);
    assert_replays("train-agent", &agent_out, &d.join("agent2"));

    let sweep = d.join("sweep");
    let list = format!("{},{}", s(&b0), s(&b1));
    ok(&[
        "train-agent",
        "--config",
        s(&cfg),
        "--mode",
        "shallow_unlocked",
        "--beta-sweep",
        &list,
        "--steps",
        "64",
        "--out",
        s(&sweep),
    ]);
    assert!(sweep.join("beta0/policy.ckpt").exists() && sweep.join("beta1/policy.ckpt").exists());

    let eval_out = d.join("eval");
    let report = d.join("table.csv");
    ok(&[
        "eval-agent",
        "--policy",
        s(&agent_out.join("policy.ckpt")),
        "--episodes",
        "4",
        "--trajectories",
        "2",
        "--report",
        s(&report),
        "--out",
        s(&eval_out),
    ]);
    let text = std::fs::read_to_string(&report).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 5);
    assert_eq!(lines[0], "metric,mean,ci_lo,ci_hi,std,n");
    for (line, name) in lines[1..]
        .iter()
        .zip(["progress_pct", "cte_m", "duration_steps", "collision_rate_pct"])
    {
        assert!(line.starts_with(name));
    }
    assert!(eval_out.join("trajectory_001.csv").exists());
    // The recorded training environment is picked up from the checkpoint.
    let resolved: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(eval_out.join(CONFIG_FILE)).unwrap()).unwrap();
    assert_eq!(resolved["env"]["max_steps"], 40);
    assert_eq!(resolved["env"]["scenario"]["n_static"], 2);
    let m = read_manifest(&eval_out.join(MANIFEST_FILE)).unwrap();
    assert!(m.outputs.iter().any(|f| f.path == s(&report)));
    assert_replays("eval-agent", &eval_out, &d.join("eval2"));

    let exp = d.join("curves");
    ok(&[
        "export",
        "--episodes",
        s(&agent_out.join("episodes.csv")),
        "--window",
        "10",
        "--out",
        s(&exp),
    ]);
    let curves = std::fs::read_to_string(exp.join("curves.csv")).unwrap();
    assert_eq!(curves.lines().count(), episodes.lines().count());
}

#[test]
fn baseline_needs_no_checkpoint_but_locked_modes_do() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_json(
        dir.path(),
        "a.json",
        serde_json::json!({"ppo": {"n_steps": 32, "hidden": 8}, "env": {"max_steps": 20}}),
    );
    let out = asvlab(&[
        "train-agent",
        "--config",
        s(&cfg),
        "--mode",
        "deep_locked",
        "--steps",
        "32",
        "--out",
        s(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(1));
    ok(&[
        "train-agent",
        "--config",
        s(&cfg),
        "--mode",
        "baseline",
        "--steps",
        "32",
        "--out",
        s(&dir.path().join("b")),
    ]);
}
