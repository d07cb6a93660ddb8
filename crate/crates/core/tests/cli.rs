use std::path::Path;
use std::process::{Command, Output};

fn sdae(out: &Path, args: &[&str]) -> Output {
    // subcommand words first, then --out, then the flags
    let split = args.iter().position(|a| a.starts_with("--")).unwrap_or(args.len());
    Command::new(env!("CARGO_BIN_EXE_sdae"))
        .args(&args[..split])
        .args(["--out", out.to_str().unwrap()])
        .args(&args[split..])
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

#[test]
fn complexity_prints_the_table() {
    let dir = tempfile::tempdir().unwrap();
    let o = sdae(dir.path(), &["complexity", "--n", "196", "--d", "768", "--r", "0.75", "--t", "3"]);
    assert!(o.status.success());
    let text = stdout(&o);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("mode,n,d,r,r_c,t,cost,ratio_vs_full"));
    let cost = |mode: &str| -> f64 {
        let line = text.lines().find(|l| l.starts_with(&format!("{mode},"))).unwrap();
        line.split(',').nth(6).unwrap().parse().unwrap()
    };
    assert_eq!(cost("full_image"), 29_503_488.0);
    let ratio = cost("multi_fold") / cost("only_masked");
    assert!((ratio - 1.0 / 3.0).abs() < 1e-12);
    assert_eq!(std::fs::read_to_string(dir.path().join("complexity.csv")).unwrap(), text);
    assert!(dir.path().join("resolved.config").exists());
}

#[test]
fn mask_demo_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["mask-demo", "--n", "64", "--r", "0.75", "--t", "3", "--seed", "7"];
    let a = sdae(dir.path(), &args);
    let b = sdae(dir.path(), &args);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
    let json_line = stdout(&a).lines().last().unwrap().to_string();
    let v: serde_json::Value = serde_json::from_str(&json_line).unwrap();
    assert_eq!(v["visible"].as_array().unwrap().len(), 16);
    let folds = v["folds"].as_array().unwrap();
    assert_eq!(folds.iter().map(|f| f.as_array().unwrap().len()).collect::<Vec<_>>(), [16, 16, 16]);
}

#[test]
fn resolved_config_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let first = sdae(dir.path(), &["mask-demo", "--n=100", "--seed", "3", "--mode", "teacher_crop"]);
    assert!(first.status.success());
    let again = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("resolved.config");
    let second = sdae(again.path(), &["mask-demo", "--config", cfg.to_str().unwrap()]);
    assert_eq!(first.stdout, second.stdout);
    assert_eq!(
        std::fs::read_to_string(&cfg).unwrap(),
        std::fs::read_to_string(again.path().join("resolved.config")).unwrap()
    );
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("in.config");
    std::fs::write(&cfg, "# comment\nn = 36\nseed = 1\n").unwrap();
    let o = sdae(dir.path(), &["mask-demo", "--config", cfg.to_str().unwrap(), "--seed", "2"]);
    assert!(o.status.success());
    let resolved = std::fs::read_to_string(dir.path().join("resolved.config")).unwrap();
    assert!(resolved.contains("n = 36\n") && resolved.contains("seed = 2\n"), "{resolved}");
}

#[test]
fn config_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(sdae(dir.path(), &["complexity", "--bogus", "1"]).status.code(), Some(1));
    assert_eq!(sdae(dir.path(), &["complexity", "--r", "1.5"]).status.code(), Some(1));
    assert_eq!(sdae(dir.path(), &["pretrain", "--embed_dim", "63"]).status.code(), Some(1));
    assert_eq!(sdae(dir.path(), &["pretrain", "--preset", "huge"]).status.code(), Some(1));
    assert_eq!(sdae(dir.path(), &["probe"]).status.code(), Some(1));
}

#[test]
fn runtime_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = sdae(dir.path(), &["probe", "--checkpoint", "/nonexistent/ckpt.sdae"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("ckpt.sdae"));
}

#[test]
fn grad_check_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = sdae(dir.path(), &["grad-check", "--cases", "2"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("checks passed"));
    let lines = std::fs::read_to_string(dir.path().join("gradcheck.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 2 * sdae::gradcheck::KERNELS.len() + 2);
}

#[test]
fn pretrain_probe_and_attention_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let small = ["--synth_items", "32", "--batch_size", "16", "--epochs", "2", "--warmup_epochs", "1"];
    let run = dir.path().join("run");
    let mut args = vec!["pretrain"];
    args.extend(small);
    let o = sdae(&run, &args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let metrics = std::fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 4);
    for line in metrics.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        for key in ["step", "loss", "lr", "eta"] {
            assert!(v.get(key).is_some(), "{line}");
        }
    }
    let ckpt = run.join("checkpoint.sdae");
    let ckpt = ckpt.to_str().unwrap();

    let probe_dir = dir.path().join("probe");
    let o = sdae(
        &probe_dir,
        &["probe", "--checkpoint", ckpt, "--synth_items", "32", "--test_items", "16", "--probe_epochs", "20"],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows: Vec<serde_json::Value> = stdout(&o).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let branches: Vec<&str> = rows.iter().map(|r| r["branch"].as_str().unwrap()).collect();
    assert_eq!(branches, ["random_init", "student", "teacher"]);
    assert!(rows.iter().all(|r| r["n_eval"] == 16));

    let attn = dir.path().join("attn");
    let o = sdae(&attn, &["attn-dump", "--checkpoint", ckpt, "--index", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let pgm = std::fs::read(attn.join("attention-mean.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n8 8\n255\n"));
    assert_eq!(pgm.len(), b"P5\n8 8\n255\n".len() + 64);
}

#[test]
fn data_synth_writes_a_loadable_file() {
    let dir = tempfile::tempdir().unwrap();
    let o = sdae(dir.path(), &["data", "synth", "--synth_items", "24", "--file", "shapes.sdds"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let d = sdae::data::load_sdds(&dir.path().join("shapes.sdds")).unwrap();
    assert_eq!(d.len(), 24);
    assert_eq!(d.labels.unwrap().len(), 24);
    assert!(dir.path().join("preview.ppm").exists());
}
