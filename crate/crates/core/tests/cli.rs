use std::path::Path;

use difflab::cli::main_with;
use difflab::eval::EvalReport;
use difflab::synth::Corpus;

fn run(args: &[&str]) -> i32 {
    main_with(std::iter::once("difflab").chain(args.iter().copied()))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn subcommands_chain_from_corpus_to_comparison() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name);

    assert_eq!(run(&["synth", "--out", s(&p("corpus.bin")), "--n-per-class", "40", "--ppm-dir", s(&p("ppm")), "--ppm-count", "2"]), 0);
    assert_eq!(Corpus::load(&p("corpus.bin")).unwrap().len(), 80);
    assert!(p("ppm").join("record_0001.ppm").exists());
    assert!(!p("ppm").join("record_0002.ppm").exists());

    assert_eq!(run(&["synth", "--out", s(&p("held_out.bin")), "--n-per-class", "4", "--seed", "9"]), 0);
    assert_eq!(run(&["fit-pca", "--corpus", s(&p("corpus.bin")), "--kmax", "4", "--out", s(&p("pca"))]), 0);
    assert_eq!(run(&["analyze", "--corpus", s(&p("corpus.bin")), "--samples", "200", "--out", s(&p("gap.json"))]), 0);
    let gap: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(p("gap.json")).unwrap()).unwrap();
    assert!(gap["predicted"]["ratio2"].as_f64().unwrap() > 0.01);

    assert_eq!(run(&["sweep-schedule", "--out", s(&p("sweep.csv"))]), 0);
    assert_eq!(std::fs::read_to_string(p("sweep.csv")).unwrap().lines().count(), 5);

    let corpus = p("corpus.bin");
    let train = ["train", "--corpus", s(&corpus), "--iters", "30", "--hidden", "16", "--batch-size", "8"];
    assert_eq!(run(&[&train[..], &["--out", s(&p("std"))]].concat()), 0);
    assert_eq!(run(&[&train[..], &["--mode", "offset", "--pca", s(&p("pca")), "--out", s(&p("off"))]].concat()), 0);
    let ckpt = p("std").join("step_30");
    assert!(ckpt.join("tensors.bin").exists());

    let held_path = p("held_out.bin");
    let held = s(&held_path);
    let sample = ["sample", "--checkpoint", s(&ckpt), "--conditions", held, "--count", "8"];
    assert_eq!(run(&[&sample[..], &["--out", s(&p("s_noise")), "--trace-out", s(&p("t_noise"))]].concat()), 0);
    assert_eq!(run(&[&sample[..], &["--mode", "pca", "--k", "0", "--pca", s(&p("pca")), "--out", s(&p("s_mean"))]].concat()), 0);
    assert!(p("s_noise").join("samples.bin").exists());

    assert_eq!(run(&["trace", "--checkpoint", s(&ckpt), "--pca", s(&p("pca")), "--conditions", held, "--count", "2", "--out", s(&p("trace"))]), 0);
    assert!(p("trace").join("summary.csv").exists());

    for arm in ["noise", "mean"] {
        let out = p(&format!("eval_{arm}.json"));
        assert_eq!(run(&["eval", "--images-dir", s(&p(&format!("s_{arm}"))), "--arm", arm, "--out", s(&out)]), 0);
        assert_eq!(EvalReport::load_json(&out).unwrap().count, 8);
    }
    assert_eq!(run(&["compare", s(&p("eval_noise.json")), s(&p("eval_mean.json")), "--out", s(&p("cmp.json"))]), 0);
    assert!(p("cmp.csv").exists());
}

#[test]
fn exit_codes_separate_bad_input_from_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("c.bin");
    assert_eq!(run(&["--help"]), 0);
    assert_eq!(run(&["no-such-command"]), 1);
    assert_eq!(run(&["fit-pca", "--corpus", s(&dir.path().join("missing.bin")), "--out", s(dir.path())]), 1);
    assert_eq!(run(&["synth", "--out", s(&corpus), "--n-per-class", "0"]), 1);
    assert_eq!(run(&["synth", "--out", s(&corpus), "--set", "synth.height=banana"]), 1);

    assert_eq!(run(&["synth", "--out", s(&corpus), "--n-per-class", "8"]), 0);
    let out = dir.path().join("t");
    assert_eq!(run(&["train", "--corpus", s(&corpus), "--iters", "20", "--hidden", "8", "--lr", "1e30", "--out", s(&out)]), 2);
}
