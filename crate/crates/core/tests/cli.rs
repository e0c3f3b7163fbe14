use std::fs;
use std::process::Command;

use auglin::cli::cli_main;

fn run(args: &[&str]) -> i32 {
    cli_main(std::iter::once("auglin").chain(args.iter().copied()))
}

#[test]
fn bench_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bench.csv");
    let code = run(&[
        "--group",
        "8",
        "--kernel",
        "3",
        "bench",
        "--seq",
        "16,32",
        "--heads",
        "2",
        "--head-dim",
        "4",
        "--reps",
        "1",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    let text = fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "variant,seq_len,ms_mean,ms_p50,mem_bytes");
    assert_eq!(lines.len(), 5);
    assert!(lines[1].starts_with("augmented,16,"));
    assert!(lines[4].starts_with("quadratic,32,"));

    let code = run(&[
        "--dtype",
        "f32",
        "bench",
        "--seq",
        "8",
        "--heads",
        "1",
        "--head-dim",
        "4",
        "--reps",
        "1",
        "--augmented-only",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    assert_eq!(fs::read_to_string(&out).unwrap().lines().count(), 2);
}

#[test]
fn spec_bench_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("spec.csv");
    let code = run(&[
        "--kernel",
        "3",
        "--group",
        "4",
        "spec-bench",
        "--tree",
        "4,2,2",
        "--rounds",
        "3",
        "--head-dim",
        "8",
        "--prefix",
        "10",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    let text = fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "mode,nodes,leaves,ms_mean");
    assert!(lines[1].starts_with("tree,28,16,"));
    assert!(lines[2].starts_with("per-path,28,16,"));
}

#[test]
fn train_demo_is_deterministic_and_reads_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("model.cfg");
    fs::write(
        &cfg,
        "# tiny\nd_model = 8\nn_heads = 2\nn_layers = 1\nconv_kernel = 3\n",
    )
    .unwrap();
    let csv = |name: &str, leaky: bool| {
        let out = dir.path().join(name);
        let mut args = vec![
            "--config",
            cfg.to_str().unwrap(),
            "train-demo",
            "--steps",
            "4",
            "--batch",
            "2",
            "--seq-len",
            "10",
            "--log-every",
            "2",
            "--eval-every",
            "2",
            "--eval-examples",
            "2",
            "--out",
            out.to_str().unwrap(),
        ];
        if leaky {
            args.push("--leaky");
        }
        assert_eq!(run(&args), 0);
        fs::read_to_string(out).unwrap()
    };
    let a = csv("a.csv", false);
    assert_eq!(a, csv("b.csv", false));
    let lines: Vec<&str> = a.lines().collect();
    assert_eq!(lines[0], "mode,step,loss,batch_loss,eval_acc");
    assert_eq!(lines.len(), 4);
    assert!(lines[1].starts_with("masked,0,"));
    assert!(csv("c.csv", true)
        .lines()
        .nth(1)
        .unwrap()
        .starts_with("unmasked,0,"));

    fs::write(&cfg, "colour = blue\n").unwrap();
    assert_eq!(
        run(&[
            "--config",
            cfg.to_str().unwrap(),
            "train-demo",
            "--steps",
            "1"
        ]),
        2
    );
}

#[test]
fn usage_errors_exit_nonzero() {
    assert_eq!(run(&["bench", "--seq", "10,x"]), 2);
    assert_eq!(run(&["no-such-command"]), 2);
    assert_eq!(run(&["spec-bench", "--tree", "4,,2"]), 2);
    assert_eq!(run(&["--dtype", "f32", "train-demo"]), 2);
    assert_eq!(run(&["--group", "0", "bench", "--seq", "4"]), 2);
    assert_eq!(run(&["train-demo", "--task", "sorting"]), 2);
}

#[test]
fn binary_runs_invariants() {
    let out = Command::new(env!("CARGO_BIN_EXE_auglin"))
        .arg("invariants")
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().filter(|l| l.starts_with("PASS ")).count() >= 7);
    assert!(!text.contains("FAIL"));

    let bad = Command::new(env!("CARGO_BIN_EXE_auglin"))
        .arg("--bogus")
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(2));
}
