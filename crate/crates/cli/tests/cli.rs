use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mimicdiff")).args(args).current_dir(dir).output().unwrap()
}

const SMALL: &str = "data.train = 200\ndata.eval = 8\nclassifier.epochs = 5\nattack.steps = 10\npurify.count = 3\n";

#[test]
fn help_lists_every_subcommand() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&["--help"], tmp.path());
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for cmd in ["train-score", "train-clf", "attack", "purify", "verify-lemma", "ablate", "bench", "mimic"] {
        assert!(text.contains(cmd), "{cmd} missing from help");
    }
}

#[test]
fn config_errors_exit_nonzero_with_a_message() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("typo.cfg"), "guidance.nrom = l1\n").unwrap();
    std::fs::write(tmp.path().join("bad.cfg"), "schedule.steps = many\n").unwrap();
    for cfg in ["typo.cfg", "bad.cfg", "missing.cfg"] {
        let out = run(&["verify-lemma", "--config", cfg, "--out", "o"], tmp.path());
        assert!(!out.status.success(), "{cfg} accepted");
        assert!(!out.stderr.is_empty());
    }
    let out = run(&["verify-lemma", "--seed", "minus-one"], tmp.path());
    assert!(!out.status.success());
}

#[test]
fn thread_count_does_not_change_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("small.cfg"), SMALL).unwrap();
    let a = run(&["purify", "--config", "small.cfg", "--out", "par"], tmp.path());
    let b = run(&["purify", "--config", "small.cfg", "--out", "seq", "--sequential"], tmp.path());
    assert!(a.status.success() && b.status.success());
    for f in ["purified.mpt", "guidance_log.csv", "trajectory.csv", "purify.json", "config.txt"] {
        let x = std::fs::read(tmp.path().join("par").join(f)).unwrap();
        let y = std::fs::read(tmp.path().join("seq").join(f)).unwrap();
        assert_eq!(x, y, "{f} differs");
    }
}

#[test]
fn seeds_change_outputs_and_config_is_echoed() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("small.cfg"), SMALL).unwrap();
    assert!(run(&["attack", "--config", "small.cfg", "--out", "s1", "--seed", "1"], tmp.path()).status.success());
    assert!(run(&["attack", "--config", "small.cfg", "--out", "s2", "--seed", "2"], tmp.path()).status.success());
    let a = std::fs::read(tmp.path().join("s1/adversarial.mpt")).unwrap();
    let b = std::fs::read(tmp.path().join("s2/adversarial.mpt")).unwrap();
    assert_ne!(a, b);
    assert_eq!(&a[..8], b"MPTENS01");
    let echoed = std::fs::read_to_string(tmp.path().join("s1/config.txt")).unwrap();
    assert!(echoed.contains("data.train = 200"));
    assert!(echoed.contains("purify.count = 3"));
}
