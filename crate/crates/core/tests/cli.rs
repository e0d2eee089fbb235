use std::path::Path;
use std::process::Command;

fn convslu() -> Command {
    Command::new(env!("CARGO_BIN_EXE_convslu"))
}

fn smoke_config(dir: &Path, extra: &str) -> std::path::PathBuf {
    let base = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.toml")).unwrap();
    let path = dir.join("smoke.toml");
    std::fs::write(&path, format!("{extra}{base}")).unwrap();
    path
}

#[test]
fn invalid_key_fails_without_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = smoke_config(tmp.path(), "learning_rate = 3\n");
    let out = convslu()
        .args(["generate-corpus", "--config"])
        .arg(&cfg)
        .arg("--output-root")
        .arg(tmp.path().join("out"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown field"));
    assert!(!tmp.path().join("out").exists());
}

#[test]
fn unknown_subcommand_fails() {
    let out = convslu().arg("transmogrify").output().unwrap();
    assert!(!out.status.success());
}

#[test]
fn intent_matrix_writes_four_rows_and_is_idempotent() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = smoke_config(tmp.path(), "");
    let root = tmp.path().join("out");
    let run = |args: &[&str]| {
        let out = convslu().args(args).arg("--config").arg(&cfg).arg("--output-root").arg(&root).arg("-q").output().unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    };
    let first = run(&["run-matrix"]);
    assert_eq!(first.lines().count(), 4);
    let dir = root.join("smoke");
    for row in ["D1", "D2", "D3", "D4"] {
        assert!(dir.join("rows").join(row).join("report.json").exists());
    }
    assert!(!dir.join("rows/D3/model.ckpt").exists());
    assert!(dir.join("config.toml").exists());
    assert!(!dir.join("run.lock").exists());
    let stamp = std::fs::metadata(dir.join("rows/D1/model.ckpt")).unwrap().modified().unwrap();
    assert_eq!(run(&["run-matrix"]), first);
    assert_eq!(std::fs::metadata(dir.join("rows/D1/model.ckpt")).unwrap().modified().unwrap(), stamp);
    let tables = run(&["emit-tables"]);
    assert!(tables.contains("intent.txt"));
}

#[test]
fn single_stage_commands() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = smoke_config(tmp.path(), "");
    let root = tmp.path().join("out");
    for cmd in ["generate-corpus", "extract-features", "pretrain-asr", "adapt-slu", "train-slu", "evaluate", "build-dec-histories"] {
        let out = convslu().arg(cmd).arg("--config").arg(&cfg).arg("--output-root").arg(&root).arg("-q").output().unwrap();
        assert!(out.status.success(), "{cmd}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let dir = root.join("smoke");
    for f in ["corpus/manifest.jsonl", "features/norm_stats.json", "asr/model.ckpt", "slu/adapted.ckpt", "rows/D1/report.json", "dec/histories.jsonl"] {
        assert!(dir.join(f).exists(), "{f}");
    }
}
