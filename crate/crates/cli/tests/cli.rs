use std::path::Path;
use std::process::{Command, Output};

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_reordernat"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn reordernat")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

const TINY: &str = "model_dim = 16\nhidden_dim = 32\nn_layers = 2\nbatch_size = 8\nmax_steps = 12\nlr_schedule = constant\nlr = 0.003\n";

#[test]
fn full_pipeline_on_a_tiny_corpus() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("tiny.cfg"), TINY).unwrap();
    ok(d, &["gen-data", "--out-dir", "data", "--pairs", "60", "--test-pairs", "10", "--vocab-size", "12", "--max-len", "6"]);
    for f in ["train.src", "train.tgt", "train.pseudo", "train.align", "test.src", "test.tgt"] {
        assert!(d.join("data").join(f).exists(), "{f} missing");
    }

    ok(
        d,
        &["align", "--src", "data/train.src", "--tgt", "data/train.tgt", "--iterations", "5", "--out-align", "ibm.align", "--out-pseudo", "ibm.pseudo"],
    );
    let pseudo = std::fs::read_to_string(d.join("ibm.pseudo")).unwrap();
    assert_eq!(pseudo.lines().count(), 60);

    let train = |arch: &str, mode: &str, out: &str, extra: &[&str]| {
        let mut args = vec![
            "train", "--src", "data/train.src", "--tgt", "data/train.tgt", "--pseudo", "data/train.pseudo", "--config", "tiny.cfg",
            "--architecture", arch, "--mode", mode, "--out", out,
        ];
        args.extend_from_slice(extra);
        ok(d, &args);
    };
    train("reorder-nat", "dgd", "dgd.ckpt", &[]);
    let log = std::fs::read_to_string(d.join("dgd.ckpt.log")).unwrap();
    assert_eq!(log.lines().next(), Some("step\tL\tL_R\tL_T\tlr\tgradnorm"));
    assert_eq!(log.lines().count(), 13);
    for line in log.lines().skip(1) {
        let f: Vec<f64> = line.split('\t').map(|x| x.parse().unwrap()).collect();
        assert!((f[1] - (f[2] + f[3])).abs() < 2e-6, "{line}");
    }
    train("reorder-nat", "ndgd", "ndgd.ckpt", &["--init-from", "dgd.ckpt"]);
    train("teacher", "dgd", "t.ckpt", &[]);

    ok(d, &["translate", "--model", "ndgd.ckpt", "--input", "data/test.src", "--output", "n.hyp", "--strategy", "ndgd", "--sidecar", "n.side"]);
    ok(d, &["translate", "--model", "t.ckpt", "--input", "data/test.src", "--output", "t.hyp", "--strategy", "beam", "--beam", "2"]);
    ok(d, &["translate", "--model", "dgd.ckpt", "--input", "data/test.src", "--output", "l.hyp", "--strategy", "lpd", "--samples", "3"]);
    for f in ["n.hyp", "t.hyp", "l.hyp"] {
        assert_eq!(std::fs::read_to_string(d.join(f)).unwrap().lines().count(), 10, "{f}");
    }

    ok(d, &["evaluate", "--hyp", "t.hyp", "--ref", "data/test.tgt", "--system", "teacher", "--out", "t.rep"]);
    ok(
        d,
        &["evaluate", "--hyp", "n.hyp", "--ref", "data/test.tgt", "--system", "ndgd", "--baseline", "t.hyp", "--sidecar", "n.side", "--out", "n.rep"],
    );
    let table = ok(d, &["report", "t.rep", "n.rep"]);
    assert!(table.contains("teacher") && table.contains("ndgd"), "{table}");
}

#[test]
fn reference_against_itself_scores_100() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("r.txt"), "a b c d\ne f g h i\n").unwrap();
    ok(d, &["evaluate", "--hyp", "r.txt", "--ref", "r.txt", "--system", "self", "--out", "s.rep"]);
    let rep = std::fs::read_to_string(d.join("s.rep")).unwrap();
    assert!(rep.contains("bleu=100.0000"), "{rep}");
    assert!(rep.contains("ribes=100.0000"), "{rep}");
}

#[test]
fn usage_and_runtime_errors_use_distinct_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let out = run(d, &["translate", "--bogus"]);
    assert_eq!(out.status.code(), Some(1));
    let out = run(d, &["translate", "--model", "nope.ckpt", "--input", "x", "--output", "y"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.ckpt"));
    std::fs::write(d.join("bad.cfg"), "model_dim = 16\nmodel_dim = 8\n").unwrap();
    std::fs::write(d.join("s"), "a b\n").unwrap();
    let out = run(d, &["train", "--src", "s", "--tgt", "s", "--config", "bad.cfg", "--architecture", "teacher", "--out", "m.ckpt"]);
    assert_ne!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"), "{}", String::from_utf8_lossy(&out.stderr));
}
