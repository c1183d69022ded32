use std::path::Path;
use std::process::{Command, Output};

fn cwvae(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cwvae")).args(args).output().expect("spawn cwvae")
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 path")
}

const CONFIG: &str = r#"{
    "max_epochs": 2, "batch_size": 8, "dev_samples": 2,
    "model": {"embedding_dim": 8, "hidden": 8, "latent": 4, "abi_attention": 8, "abi_hidden": 8,
              "decoder_attention": 8, "max_decode_len": 6}
}"#;

fn write_task(dir: &Path) -> std::path::PathBuf {
    let mut csv = String::from("event,dim,target\n");
    for i in 0..30 {
        let thing = ["a letter", "the car", "a cake", "the dog", "a song"][i % 5];
        let verb = ["writes", "washes", "bakes", "walks", "sings"][i % 5];
        csv.push_str(&format!("PersonX {verb} {thing} {i},xIntent,to be nice\n"));
        csv.push_str(&format!("PersonX {verb} {thing} {i},xIntent,to help PersonY\n"));
        csv.push_str(&format!("PersonX {verb} {thing} {i},xReact,happy\n"));
    }
    let path = dir.join("task.csv");
    std::fs::write(&path, csv).unwrap();
    path
}

fn write_stories(dir: &Path) -> std::path::PathBuf {
    let mut text = String::new();
    for i in 0..20 {
        let s: Vec<String> = (0..5).map(|j| format!("PersonX writes a letter {} .", (i + j) % 7)).collect();
        text.push_str(&serde_json::json!({ "sentences": s }).to_string());
        text.push('\n');
    }
    let path = dir.join("stories.jsonl");
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn pretrain_finetune_eval_generate() {
    let dir = tempfile::tempdir().unwrap();
    let task = write_task(dir.path());
    let stories = write_stories(dir.path());
    let config = dir.path().join("config.json");
    std::fs::write(&config, CONFIG).unwrap();
    let pre = dir.path().join("pre.ckpt");
    let ft = dir.path().join("ft.ckpt");

    let out = cwvae(&["pretrain", "--config", p(&config), "--stories", p(&stories), "--data", p(&task), "--dim", "xIntent", "--out", p(&pre), "--seed", "1"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let pre_summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();

    let out = cwvae(&["finetune", "--config", p(&config), "--data", p(&task), "--dim", "xIntent", "--checkpoint", p(&pre), "--out", p(&ft)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let ft_summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(ft_summary["initial_params"], pre_summary["final_params"]);
    let log = std::fs::read_to_string(ft.with_extension("metrics.jsonl")).unwrap();
    for line in log.lines() {
        let rec: serde_json::Value = serde_json::from_str(line).unwrap();
        for key in ["epoch", "stage", "recon", "kl_zc_prime", "kl_z", "kl_ctx", "dev_ppl"] {
            assert!(rec.get(key).is_some(), "missing {key} in {line}");
        }
    }

    let report = dir.path().join("report.json");
    let vocab = ft.with_extension("vocab");
    let out = cwvae(&["eval", "--checkpoint", p(&ft), "--data", p(&task), "--dim", "xIntent", "--k", "3", "--out", p(&report), "--vocab", p(&vocab)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("distinct"));
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(json["metadata"]["decode"]["k"], 3);
    assert_eq!(json["metadata"]["model_kind"], "cwvae");

    let out = cwvae(&["generate", "--checkpoint", p(&ft), "--event", "PersonX writes a letter", "--k", "2", "--seed", "4"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let again = cwvae(&["generate", "--checkpoint", p(&ft), "--event", "PersonX writes a letter", "--k", "2", "--seed", "4"]);
    assert_eq!(out.stdout, again.stdout);
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("PersonX writes a letter"));
}

#[test]
fn validation_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let task = write_task(dir.path());
    let bad_config = dir.path().join("bad.json");
    std::fs::write(&bad_config, r#"{"learning_rate": 0.1}"#).unwrap();
    let out = cwvae(&["finetune", "--config", p(&bad_config), "--data", p(&task), "--out", p(&dir.path().join("x.ckpt"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));

    let bad_dim = dir.path().join("dim.csv");
    std::fs::write(&bad_dim, "event,dim,target\nPersonX runs,xFeels,tired\n").unwrap();
    let out = cwvae(&["finetune", "--data", p(&bad_dim), "--out", p(&dir.path().join("y.ckpt"))]);
    assert_eq!(out.status.code(), Some(2));

    let out = cwvae(&["eval", "--checkpoint", p(&dir.path().join("none.ckpt")), "--data", p(&task), "--k", "0"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(cwvae(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn vocabulary_mismatch_is_a_digest_error() {
    let dir = tempfile::tempdir().unwrap();
    let task = write_task(dir.path());
    let config = dir.path().join("config.json");
    std::fs::write(&config, CONFIG.replace("\"max_epochs\": 2", "\"max_epochs\": 1")).unwrap();
    let ckpt = dir.path().join("m.ckpt");
    let out = cwvae(&["finetune", "--config", p(&config), "--data", p(&task), "--out", p(&ckpt)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let other = dir.path().join("other.vocab");
    std::fs::write(&other, "<pad>\n<unk>\n<bos>\n<eos>\nsomething\n").unwrap();
    let out = cwvae(&["eval", "--checkpoint", p(&ckpt), "--data", p(&task), "--vocab", p(&other)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("digest"));
}
