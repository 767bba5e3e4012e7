use std::process::{Command, Output};

fn cagi(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cagi")).args(args).output().unwrap()
}

fn tiny_config(dir: &std::path::Path) -> String {
    let p = dir.join("tiny.json");
    std::fs::write(
        &p,
        r#"{"generator": {"num_slots": 3, "latent_len": 4, "height": 8, "width": 8},
            "inversion": {"stage1": {"max_iters": 3}, "stage2_iters": 2},
            "source": {"count": 2}}"#,
    )
    .unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn sequence_csv_goes_to_stdout() {
    let dir = tempfile::tempdir().unwrap();
    let out = cagi(&["sequence", "--config", &tiny_config(dir.path()), "--seed", "1"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().count(), 3);
    assert!(text.starts_with("round,snr_db,n_s,hits,"));
}

#[test]
fn threshold_file_is_accepted() {
    let dir = tempfile::tempdir().unwrap();
    let t = dir.path().join("gamma.txt");
    std::fs::write(&t, "# per-slot\n0=0.5\n1=0.6\n2=0.7\n").unwrap();
    let out = cagi(&[
        "sequence",
        "--config",
        &tiny_config(dir.path()),
        "--thresholds",
        t.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    // 28-entry table against 3 slots.
    assert_eq!(
        cagi(&["sequence", "--config", &cfg, "--thresholds", "gamma_A"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        cagi(&["cache-stats", "--config", &cfg, "--no-cache"]).status.code(),
        Some(2)
    );
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{not json").unwrap();
    assert_eq!(
        cagi(&["invert", "--config", bad.to_str().unwrap()]).status.code(),
        Some(2)
    );
    assert_eq!(
        cagi(&["invert", "--config", "/nonexistent/cfg.json"]).status.code(),
        Some(4)
    );
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, "").unwrap();
    let out_dir = blocker.join("sub");
    assert_eq!(
        cagi(&["transmit", "--config", &cfg, "--out", out_dir.to_str().unwrap()])
            .status
            .code(),
        Some(4)
    );
    assert_eq!(cagi(&["bogus"]).status.code(), Some(2));
}

#[test]
fn out_dir_receives_named_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("reports");
    for (sub, file) in [
        ("sequence", "report.json"),
        ("cache-stats", "cache_stats.json"),
        ("invert", "invert.json"),
    ] {
        let s = cagi(&[
            sub,
            "--config",
            &cfg,
            "--format",
            "json",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(s.status.success());
        let text = std::fs::read_to_string(out.join(file)).unwrap();
        serde_json::from_str::<serde_json::Value>(&text).unwrap();
    }
}
