use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn copy_demo(dir: &Path) {
    let demo = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../demo");
    for f in ["demo.toml", "formal.txt", "plain.txt", "formal_to_plain.tsv", "plain_to_formal.tsv"] {
        fs::copy(demo.join(f), dir.join(f)).unwrap();
    }
}

fn stylepipe(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stylepipe"))
        .current_dir(dir)
        .args(["--config", "demo.toml", "--log-level", "warn"])
        .args(args)
        .env_remove("RUST_LOG")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn all_then_rerun_skips_every_stage() {
    let dir = tempfile::tempdir().unwrap();
    copy_demo(dir.path());
    let first = stylepipe(dir.path(), &["all"]);
    assert!(first.status.success(), "{}", String::from_utf8_lossy(&first.stderr));
    assert_eq!(stdout(&first).matches(": done").count(), 9);
    let work = dir.path().join("work");
    for f in ["report/report.md", "report/report.csv", "report/report.json", "ft/formal/manifest.json"] {
        assert!(work.join(f).is_file(), "{f}");
    }
    assert!(work.join("manifests/report.json").is_file());

    let again = stylepipe(dir.path(), &["all"]);
    assert!(again.status.success());
    assert_eq!(stdout(&again).matches(": up to date").count(), 9, "{}", stdout(&again));

    let forced = stylepipe(dir.path(), &["--force", "index"]);
    assert!(forced.status.success());
    assert_eq!(stdout(&forced).trim(), "index: done");
}

#[test]
fn corrupt_intermediate_fails_with_checksum_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    copy_demo(dir.path());
    assert!(stylepipe(dir.path(), &["all"]).status.success());
    let pairs = dir.path().join("work/pairs/formal.jsonl");
    let mut text = fs::read_to_string(&pairs).unwrap();
    text.push_str("{\"tampered\": true}\n");
    fs::write(&pairs, text).unwrap();

    let out = stylepipe(dir.path(), &["index"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("checksum mismatch"), "{err}");
    assert!(err.contains("pairs/formal.jsonl"), "{err}");

    // The producing stage itself also notices its output changed.
    let out = stylepipe(dir.path(), &["build-dataset"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("pairs/formal.jsonl"));

    let out = stylepipe(dir.path(), &["--force", "build-dataset"]);
    assert!(out.status.success());
    assert!(stylepipe(dir.path(), &["index"]).status.success());
}

#[test]
fn later_stage_without_inputs_fails() {
    let dir = tempfile::tempdir().unwrap();
    copy_demo(dir.path());
    let out = stylepipe(dir.path(), &["index"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("does not exist"));
}

#[test]
fn seed_flag_changes_only_seeded_stages() {
    let dir = tempfile::tempdir().unwrap();
    copy_demo(dir.path());
    assert!(stylepipe(dir.path(), &["all"]).status.success());
    let out = stylepipe(dir.path(), &["--seed", "99", "all"]);
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(text.contains("ingest: up to date"), "{text}");
    assert!(text.contains("emit-ft: done"), "{text}");
    let manifest = fs::read_to_string(dir.path().join("work/ft/formal/manifest.json")).unwrap();
    assert!(manifest.contains("\"seed\": 99"));
}

#[test]
fn bad_config_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    copy_demo(dir.path());
    let toml = fs::read_to_string(dir.path().join("demo.toml")).unwrap();
    fs::write(dir.path().join("demo.toml"), toml.replace("formal.txt", "missing.txt")).unwrap();
    let out = stylepipe(dir.path(), &["ingest"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.txt"));

    fs::write(dir.path().join("demo.toml"), format!("{toml}\nunknown_key = 1\n")).unwrap();
    let out = stylepipe(dir.path(), &["ingest"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn http_backends_from_environment() {
    use std::thread;

    // One server answers both the MT and the generation contracts.
    let server = tiny_http::Server::http("127.0.0.1:0").unwrap();
    let addr = server.server_addr().to_ip().unwrap();
    thread::spawn(move || {
        for mut req in server.incoming_requests() {
            let mut body = String::new();
            req.as_reader().read_to_string(&mut body).unwrap();
            let v: serde_json::Value = serde_json::from_str(&body).unwrap();
            let reply = if let Some(texts) = v.get("texts") {
                serde_json::json!({ "translations": texts })
            } else {
                let prompt = v["prompt"].as_str().unwrap();
                let query = prompt.rsplit("Input: ").next().unwrap().split(". The").next().unwrap();
                serde_json::json!({ "text": query })
            };
            req.respond(tiny_http::Response::from_string(reply.to_string())).unwrap();
        }
    });

    let dir = tempfile::tempdir().unwrap();
    copy_demo(dir.path());
    let toml = fs::read_to_string(dir.path().join("demo.toml")).unwrap();
    let toml = toml
        .replace(
            "kind = \"mock_scramble\", src_lang = \"en\", tgt_lang = \"zh\", seed = 5, substitutions = \"formal_to_plain.tsv\"",
            "kind = \"http\", src_lang = \"en\", tgt_lang = \"zh\"",
        )
        .replace(
            "kind = \"mock_scramble\", src_lang = \"zh\", tgt_lang = \"en\", seed = 5, inverse = true",
            "kind = \"http\", src_lang = \"zh\", tgt_lang = \"en\"",
        )
        .replace("kind = \"mock_rulebook\"\nrules = \"plain_to_formal.tsv\"", "kind = \"http_completion\"");
    fs::write(dir.path().join("demo.toml"), toml).unwrap();
    let url = format!("http://{addr}/");
    let out = Command::new(env!("CARGO_BIN_EXE_stylepipe"))
        .current_dir(dir.path())
        .args(["--config", "demo.toml", "--log-level", "warn", "--workers", "2", "all"])
        .env("STYLEPIPE_MT_URL", &url)
        .env("STYLEPIPE_LLM_URL", &url)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let pairs = fs::read_to_string(dir.path().join("work/pairs/formal.jsonl")).unwrap();
    assert!(pairs.contains("\"trivial_pair\""));
}
