//! End-to-end subcommand contracts: exit codes, file outputs, determinism.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_channel-mae"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).env("CHANNEL_MAE_THREADS", "0").output().expect("spawn channel-mae")
}

fn desk_overrides(dir: &Path) -> Vec<String> {
    // Tiny profile so CLI tests stay fast.
    let cfg = dir.join("desk.cfg");
    std::fs::write(
        &cfg,
        "system.n_antennas=4\n\
         system.n_subcarriers=16\n\
         system.n_scenarios=2\n\
         patch.rows=1\n\
         patch.cols=8\n\
         model.d_e=16\n\
         model.l_enc=1\n\
         model.l_dec=1\n\
         model.m_enc=2\n\
         model.m_dec=2\n\
         model.d_c=8\n\
         train.epochs=2\n\
         train.batch_size=8\n\
         train.lr_max=1e-3\n\
         train.lr_min=1e-5\n",
    )
    .unwrap();
    vec!["--config".into(), cfg.display().to_string()]
}

fn tmpdir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("channel-mae-cli-{name}-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

#[test]
fn unknown_subcommand_and_flags_exit_2() {
    let out = run(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(&["synth", "--count", "4", "--out", "/tmp/x.wchd", "--bogus-flag"]);
    assert_eq!(out.status.code(), Some(2));
    let usage = String::from_utf8_lossy(&out.stderr);
    assert!(usage.to_lowercase().contains("usage"), "stderr: {usage}");
}

#[test]
fn help_exits_zero() {
    let out = run(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn synth_writes_the_requested_record_count_deterministically() {
    let dir = tmpdir("synth");
    let cfg = desk_overrides(&dir);
    let out_path = dir.join("d.wchd");
    let mut args: Vec<String> = vec![
        "synth".into(),
        "--count".into(),
        "100".into(),
        "--seed".into(),
        "7".into(),
        "--out".into(),
        out_path.display().to_string(),
    ];
    args.extend(cfg.clone());
    let argv: Vec<&str> = args.iter().map(String::as_str).collect();
    let out = run(&argv);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&out.stderr));

    let ds = channel_mae::dataset::read(&out_path).unwrap();
    assert_eq!(ds.records.len(), 100);

    let first = std::fs::read(&out_path).unwrap();
    let out = run(&argv);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(std::fs::read(&out_path).unwrap(), first, "regeneration changed bytes");
}

#[test]
fn contrain_without_init_is_a_validation_error() {
    let dir = tmpdir("contrain");
    let out = run(&[
        "contrain",
        "--data",
        dir.join("missing.wchd").to_str().unwrap(),
        "--out",
        dir.join("o.wmae").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("warm-start checkpoint required"), "stderr: {stderr}");
    assert_eq!(stderr.lines().count(), 1, "expected a single-line error, got: {stderr}");
}

#[test]
fn pipeline_pretrain_probe_and_dump() {
    let dir = tmpdir("pipeline");
    let cfg = desk_overrides(&dir);
    let with_cfg = |mut v: Vec<String>| -> Vec<String> {
        v.extend(cfg.clone());
        v
    };
    let sh = |args: Vec<String>| -> Output {
        let argv: Vec<&str> = args.iter().map(String::as_str).collect();
        run(&argv)
    };

    let data = dir.join("d.wchd");
    let out = sh(with_cfg(vec![
        "synth".into(),
        "--count".into(),
        "64".into(),
        "--seed".into(),
        "3".into(),
        "--out".into(),
        data.display().to_string(),
    ]));
    assert_eq!(out.status.code(), Some(0), "synth: {}", String::from_utf8_lossy(&out.stderr));

    let ckpt = dir.join("m.wmae");
    let log = dir.join("train.log");
    let out = sh(with_cfg(vec![
        "pretrain".into(),
        "--data".into(),
        data.display().to_string(),
        "--out".into(),
        ckpt.display().to_string(),
        "--log".into(),
        log.display().to_string(),
    ]));
    assert_eq!(out.status.code(), Some(0), "pretrain: {}", String::from_utf8_lossy(&out.stderr));
    assert!(ckpt.exists());
    let log_text = std::fs::read_to_string(&log).unwrap();
    assert_eq!(log_text.lines().count(), 2, "one line per epoch");
    for line in log_text.lines() {
        assert_eq!(line.split('\t').count(), 8, "log line: {line}");
        assert!(line.split('\t').nth(4).unwrap() == "-", "plain run logs '-' contra: {line}");
    }

    let contra = dir.join("c.wmae");
    let out = sh(with_cfg(vec![
        "contrain".into(),
        "--data".into(),
        data.display().to_string(),
        "--init".into(),
        ckpt.display().to_string(),
        "--out".into(),
        contra.display().to_string(),
    ]));
    assert_eq!(out.status.code(), Some(0), "contrain: {}", String::from_utf8_lossy(&out.stderr));

    // Probe the raw baseline at a fractional budget; check the line format.
    let metrics = dir.join("metrics.tsv");
    let out = sh(with_cfg(vec![
        "probe-beam".into(),
        "--data".into(),
        data.display().to_string(),
        "--raw".into(),
        "--cs".into(),
        "16".into(),
        "--budget".into(),
        "0.25".into(),
        "--out".into(),
        metrics.display().to_string(),
        "--set".into(),
        "probe.beam.max_epochs=5".into(),
    ]));
    assert_eq!(out.status.code(), Some(0), "probe: {}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("beam\traw\t16\t0.25\ttop1\t"), "stdout: {stdout}");
    assert!(stdout.contains("\ttop3\t"));
    assert_eq!(std::fs::read_to_string(&metrics).unwrap(), stdout.to_string());

    // Probe on encoder features names the model from the checkpoint.
    let out = sh(with_cfg(vec![
        "probe-los".into(),
        "--data".into(),
        data.display().to_string(),
        "--ckpt".into(),
        contra.display().to_string(),
        "--set".into(),
        "probe.los.max_epochs=5".into(),
    ]));
    assert_eq!(out.status.code(), Some(0), "probe-los: {}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("los\tcontra-mae\t-\t1\taccuracy\t"), "stdout: {stdout}");
    assert!(stdout.contains("\tf1\t") && stdout.contains("\tauc\t"));

    // Feature extraction file header.
    let feats = dir.join("f.wfea");
    let out = sh(with_cfg(vec![
        "embed".into(),
        "--data".into(),
        data.display().to_string(),
        "--ckpt".into(),
        ckpt.display().to_string(),
        "--task".into(),
        "los".into(),
        "--out".into(),
        feats.display().to_string(),
    ]));
    assert_eq!(out.status.code(), Some(0), "embed: {}", String::from_utf8_lossy(&out.stderr));
    let bytes = std::fs::read(&feats).unwrap();
    assert_eq!(&bytes[0..4], b"WFEA");
    let count = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    let dim = u32::from_le_bytes(bytes[12..16].try_into().unwrap());
    assert_eq!(count, 64);
    assert_eq!(dim, 16); // pooled d_e
    assert_eq!(bytes.len(), 16 + (count * dim * 8) as usize);

    // Reconstruction dump: one sample, eight grids, NaN sentinels on the
    // masked grid.
    let dump = dir.join("dump");
    let out = sh(with_cfg(vec![
        "recon-dump".into(),
        "--data".into(),
        data.display().to_string(),
        "--ckpt".into(),
        ckpt.display().to_string(),
        "--n".into(),
        "1".into(),
        "--out-dir".into(),
        dump.display().to_string(),
    ]));
    assert_eq!(out.status.code(), Some(0), "recon-dump: {}", String::from_utf8_lossy(&out.stderr));
    let files: Vec<_> = std::fs::read_dir(&dump).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(files.len(), 8, "files: {files:?}");
    let masked = std::fs::read_to_string(dump.join("sample0_masked_mag.csv")).unwrap();
    assert!(masked.contains("NaN"), "masked grid should contain NaN sentinels");
    let rows = masked.lines().count();
    assert_eq!(rows, 4);

    let _ = std::fs::remove_dir_all(&dir);
}
