mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use nmt_cli::config::{PipelineConfig, Profiles};
use nmt_cli::synth_text::{generate, join_lines, SynthTextSpec};

fn nmt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nmt"))
        .args(args)
        .env_remove("NMT_SEED")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = nmt(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn bundled_corpus_matches_the_generator() {
    let text = generate(&SynthTextSpec::default());
    let data = Path::new(env!("CARGO_MANIFEST_DIR")).join("data");
    assert_eq!(fs::read(data.join("synthetic.src")).unwrap(), join_lines(&text.src));
    assert_eq!(fs::read(data.join("synthetic.tgt")).unwrap(), join_lines(&text.tgt));
    let lex = fs::read_to_string(data.join("synthetic.tgt.lex")).unwrap();
    assert_eq!(lex.lines().collect::<Vec<_>>(), text.tgt_lexicon);
}

#[test]
fn config_layers_apply_in_order() {
    let dir = tempfile::tempdir().unwrap();
    let defaults = PipelineConfig::load(None, Profiles::default()).unwrap();
    assert_eq!(defaults.model.d_model, 512);
    assert_eq!(defaults.train.warmup_steps, 8000);
    assert_eq!(defaults.train.token_budget, 25_000);
    assert_eq!(defaults.train.save_interval_steps, 1500);
    assert_eq!(defaults.decode.beam, 4);

    let deep = PipelineConfig::load(None, Profiles { toy: false, deep: true }).unwrap();
    assert_eq!((deep.model.enc_layers, deep.model.dec_layers), (24, 24));

    let both = PipelineConfig::load(None, Profiles { toy: true, deep: true }).unwrap();
    assert_eq!(both.model.enc_layers, 2);

    let file = dir.path().join("user.toml");
    fs::write(&file, "[model]\nd_model = 32\n[data]\nsrc = \"x/a.src\"\n").unwrap();
    let user = PipelineConfig::load(Some(&file), Profiles { toy: true, deep: false }).unwrap();
    assert_eq!(user.model.d_model, 32);
    assert_eq!(user.model.enc_layers, 2);
    assert_eq!(user.data.src, std::path::absolute(dir.path().join("x/a.src")).unwrap());

    let dumped = PipelineConfig::from_toml(&user.to_toml().unwrap()).unwrap();
    assert_eq!(dumped, user);
}

#[test]
fn seed_comes_from_the_environment() {
    let out = Command::new(env!("CARGO_BIN_EXE_nmt"))
        .args(["config", "--toy"])
        .env("NMT_SEED", "77")
        .output()
        .unwrap();
    assert!(out.status.success());
    let cfg = PipelineConfig::from_toml(&String::from_utf8(out.stdout).unwrap()).unwrap();
    assert_eq!(cfg.train.seed, 77);

    let bad = Command::new(env!("CARGO_BIN_EXE_nmt"))
        .args(["config"])
        .env("NMT_SEED", "seven")
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn exit_codes_follow_error_kinds() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(nmt(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(nmt(&["split", "--src", "a"]).status.code(), Some(1));
    assert_eq!(nmt(&["--help"]).status.code(), Some(0));

    let missing = dir.path().join("missing.txt");
    let out = nmt(&["score", "--hyp", s(&missing), "--ref", s(&missing)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(out.stdout.is_empty());
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.txt"));

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[model]\nd_model = \"wide\"\n").unwrap();
    assert_eq!(nmt(&["config", "--config", s(&bad)]).status.code(), Some(1));
    fs::write(&bad, "[model]\nd_model = 30\nheads = 4\n").unwrap();
    assert_eq!(nmt(&["config", "--config", s(&bad)]).status.code(), Some(1));

    let h = dir.path().join("h.txt");
    let r = dir.path().join("r.txt");
    fs::write(&h, "a\n").unwrap();
    fs::write(&r, "a\nb\n").unwrap();
    assert_eq!(nmt(&["score", "--hyp", s(&h), "--ref", s(&r)]).status.code(), Some(1));
}

#[test]
fn score_prints_tsv_then_summary() {
    let dir = tempfile::tempdir().unwrap();
    let h = dir.path().join("h.txt");
    fs::write(&h, "今天天气很好\n我们去公园\n").unwrap();
    let out = ok(&["score", "--hyp", s(&h), "--ref", s(&h), "--max-n", "5"]);
    let stdout = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[0].starts_with("BLEU5\t100.0000\t"));
    assert!(lines[1].starts_with("BLEU5 = 100.00"));
}

#[test]
fn stage_commands_chain_into_a_translation() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    common::tiny_setup(d, 200);
    let p = |name: &str| d.join(name);

    ok(&[
        "clean", "--src", s(&p("corpus.src")), "--tgt", s(&p("corpus.tgt")),
        "--tgt-lexicon", s(&p("corpus.tgt.lex")),
        "--out-prefix", s(&p("clean")), "--report", s(&p("report.json")),
    ]);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(p("report.json")).unwrap()).unwrap();
    assert_eq!(report["input"], 200);
    assert!(report["dropped_encoding"].as_u64().unwrap() > 0);

    ok(&["split", "--src", s(&p("clean.src")), "--tgt", s(&p("clean.tgt")), "--holdout", "20", "--out-prefix", s(&p("d"))]);
    assert_eq!(fs::read_to_string(p("d.valid.src")).unwrap().lines().count(), 20);

    for side in ["src", "tgt"] {
        ok(&["bpe-learn", "--input", s(&p(&format!("d.train.{side}"))), "--merges", "40", "--out-prefix", s(&p(&format!("b.{side}")))]);
        for split in ["train", "valid"] {
            ok(&[
                "bpe-apply", "--merges", s(&p(&format!("b.{side}.merges"))),
                "--vocab", s(&p(&format!("b.{side}.vocab"))),
                "--input", s(&p(&format!("d.{split}.{side}"))),
                "--output", s(&p(&format!("b.{split}.{side}"))),
            ]);
        }
    }
    assert_eq!(fs::read_to_string(p("b.src.merges")).unwrap().lines().filter(|l| !l.starts_with('#')).count(), 40);
    let vocab_only = nmt(&["bpe-learn", "--input", s(&p("d.train.tgt")), "--vocab-size", "50", "--out-prefix", s(&p("v"))]);
    assert!(vocab_only.status.success());

    ok(&["train", "--config", s(&p("tiny.toml")), "--data-prefix", s(&p("b")), "--out-dir", s(&p("ckpt"))]);
    let mut ckpts: Vec<String> = fs::read_dir(p("ckpt"))
        .unwrap()
        .map(|e| e.unwrap().path().to_str().unwrap().to_owned())
        .filter(|n| n.ends_with(".nmtc"))
        .collect();
    ckpts.sort();
    assert!(ckpts.len() >= 2, "{ckpts:?}");

    let avg = p("avg.nmtc");
    let mut args = vec!["average-checkpoints", "--out", s(&avg)];
    args.extend(ckpts.iter().map(String::as_str));
    ok(&args);

    let hyp = p("valid.hyp");
    ok(&[
        "translate", "--ckpt", s(&avg), "--src-merges", s(&p("b.src.merges")),
        "--src-vocab", s(&p("b.src.vocab")), "--tgt-vocab", s(&p("b.tgt.vocab")),
        "--input", s(&p("d.valid.src")), "--output", s(&hyp), "--beam", "2", "--max-len", "10",
    ]);
    assert_eq!(fs::read_to_string(&hyp).unwrap().lines().count(), 20);
    ok(&["score", "--hyp", s(&hyp), "--ref", s(&p("d.valid.tgt"))]);

    let wrong = nmt(&[
        "translate", "--ckpt", s(&avg), "--src-merges", s(&p("b.src.merges")),
        "--src-vocab", s(&p("b.tgt.vocab")), "--tgt-vocab", s(&p("b.tgt.vocab")),
        "--input", s(&p("d.valid.src")), "--output", s(&hyp),
    ]);
    assert_eq!(wrong.status.code(), Some(1));
}
