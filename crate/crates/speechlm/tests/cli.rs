use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn smoke() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/smoke.json")
}

fn speechlm(config: &Path, out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_speechlm"))
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(args)
        .env_remove("SPEECHLM_OUT")
        .env_remove("SPEECHLM_THREADS")
        .output()
        .expect("binary runs")
}

fn stderr_line(o: &Output) -> String {
    assert!(!o.status.success(), "expected failure");
    let err = String::from_utf8_lossy(&o.stderr).into_owned();
    let lines: Vec<&str> = err.lines().collect();
    assert_eq!(lines.len(), 1, "{err}");
    assert!(lines[0].starts_with("error: "), "{err}");
    lines[0].to_string()
}

fn ok(o: Output) -> String {
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

#[test]
fn invalid_variant_config_fails_with_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(
        &cfg,
        format!(
            r#"{{"extends": {:?}, "variants": {{"E3": {{"lora": {{"enabled": false}}}}}}}}"#,
            smoke()
        ),
    )
    .unwrap();
    let line = stderr_line(&speechlm(&cfg, &dir.path().join("out"), &["train", "--variant", "E3"]));
    assert!(line.contains("E3") && line.contains("lora.enabled = true"), "{line}");
    let line = stderr_line(&speechlm(&cfg, &dir.path().join("out"), &["run-matrix"]));
    assert!(line.contains("lora.enabled = true"), "{line}");
}

#[test]
fn missing_inputs_name_the_producing_command() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let line = stderr_line(&speechlm(&smoke(), &out, &["train", "--variant", "E2"]));
    assert!(line.contains("run `gen-data` first"), "{line}");
    ok(speechlm(&smoke(), &out, &["gen-data"]));
    let line = stderr_line(&speechlm(&smoke(), &out, &["train", "--variant", "E2"]));
    assert!(line.contains("run `pretrain-lm` first"), "{line}");
    let line = stderr_line(&speechlm(&smoke(), &out, &["rescore"]));
    assert!(line.contains("run `pretrain-lm` first"), "{line}");
    let line = stderr_line(&speechlm(&smoke(), &out, &["eval-bleu", "--variant", "E4"]));
    assert!(line.contains("run `decode --variant E4` first"), "{line}");
}

#[test]
fn step_by_step_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let run = |args: &[&str]| ok(speechlm(&smoke(), &out, args));
    run(&["gen-data"]);
    run(&["pretrain-lm"]);
    let report: serde_json::Value = serde_json::from_str(&run(&["pretrain-ctc"])).unwrap();
    assert_eq!(report["blank_remove_exact"], report["utterances"]);
    for v in ["E3", "B1"] {
        run(&["train", "--variant", v]);
        run(&["decode", "--variant", v]);
    }
    run(&["rescore"]);
    let eval: serde_json::Value = serde_json::from_str(&run(&["eval-bleu", "--variant", "B2"])).unwrap();
    assert!(eval["bleu"].as_f64().unwrap() >= 0.0);
    assert!(out.join("B2/mu_grid.json").exists());

    let listing = run(&["inspect-checkpoint", out.join("E3/model.slmk").to_str().unwrap()]);
    let frozen = |prefix: &str| {
        listing
            .lines()
            .filter(|l| l.starts_with(prefix))
            .all(|l| l.ends_with(" frozen"))
    };
    assert!(frozen("lm.") && frozen("compressor."), "{listing}");
    assert!(listing.lines().any(|l| l.starts_with("lora.") && !l.ends_with(" frozen")));
    assert!(listing.contains("# audio_encoder:"), "{listing}");
}
