use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: [&str; 8] = ["--set", "base_channels=4", "--set", "depth=2", "--set", "batch=4", "--epochs", "1"];

fn acdr(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_acdr")).args(args).output().expect("binary runs");
    assert!(
        out.status.success(),
        "acdr {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn lines(path: &Path) -> Vec<String> {
    fs::read_to_string(path)
        .unwrap_or_else(|e| panic!("{}: {e}", path.display()))
        .lines()
        .map(str::to_string)
        .collect()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn dataset_train_eval_infer_viz() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    acdr(&["gen-data", "--n", "12", "--size", "32", "--seed", "3", "--train-frac", "0.75", "--out", s(&data)]);
    let index = lines(&data.join("index.csv"));
    assert_eq!(index[0], "id,split");
    assert_eq!(index.len(), 13);
    assert_eq!(index.iter().filter(|l| l.ends_with(",test")).count(), 3);
    assert_eq!(fs::read_dir(data.join("images")).unwrap().count(), 12);

    let run = tmp.path().join("run");
    let mut args = vec!["train", "--data", s(&data), "--out", s(&run), "--quiet", "--k", "8", "-T", "2"];
    args.extend(SMALL);
    acdr(&args);
    for f in ["config.txt", "final.ckpt", "best.ckpt", "metrics.csv", "losses.csv", "test_metrics.csv"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    assert_eq!(lines(&run.join("test_metrics.csv"))[0], "f1,miou,wcov,boundf");

    let ckpt = run.join("best.ckpt");
    let eval = tmp.path().join("eval");
    let stdout = acdr(&["eval", "--checkpoint", s(&ckpt), "--out", s(&eval)]).stdout;
    assert!(String::from_utf8_lossy(&stdout).contains("mIoU"));
    let per_image = lines(&eval.join("per_image.csv"));
    assert_eq!(per_image[0], "id,f1,iou,boundf");
    assert_eq!(per_image.len(), 4);
    // The config stored beside the checkpoint is reused, so the result
    // matches the training run's own test score.
    assert_eq!(lines(&eval.join("metrics.csv")), lines(&run.join("test_metrics.csv")));

    let image = fs::read_dir(data.join("images")).unwrap().next().unwrap().unwrap().path();
    let mask = data.join("masks").join(image.file_name().unwrap());
    let inf = tmp.path().join("infer");
    acdr(&["infer", "--checkpoint", s(&ckpt), "--image", s(&image), "--gt", s(&mask), "--out", s(&inf)]);
    let trace = lines(&inf.join("trace.csv"));
    assert_eq!(trace[0], "t,vertex_index,x,y");
    assert_eq!(trace.len(), 1 + 3 * 8, "T+1 polygons of k vertices");
    assert!(inf.join("mask.png").exists() && inf.join("overlay.png").exists());

    let viz = tmp.path().join("viz");
    acdr(&["viz", "--checkpoint", s(&ckpt), "--count", "2", "--out", s(&viz)]);
    let overlays = fs::read_dir(&viz)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().ends_with("_overlay.png"))
        .count();
    assert_eq!(overlays, 2);
}

#[test]
fn loss_ablation_sweep_writes_a_table() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("sweep");
    let mut args = vec![
        "sweep", "--axis", "losses", "--out", s(&out), "--quiet",
        "--set", "size=32", "--set", "n_train=8", "--set", "n_val=4", "--set", "n_test=4", "--k", "6",
    ];
    args.extend(SMALL);
    let stdout = String::from_utf8(acdr(&args).stdout).unwrap();
    let rows = lines(&out.join("sweep_losses.csv"));
    assert_eq!(rows.len(), 5, "{rows:?}");
    for label in ["seg", "seg+K", "seg+B", "full"] {
        assert!(rows.iter().any(|r| r.starts_with(&format!("{label},"))), "{label} missing");
        assert!(stdout.contains(label));
    }
    // A second sweep reuses the finished runs.
    let before = fs::read_dir(out.join("runs")).unwrap().count();
    acdr(&args);
    assert_eq!(fs::read_dir(out.join("runs")).unwrap().count(), before);
    assert_eq!(lines(&out.join("sweep_losses.csv")), rows);
}

#[test]
fn bad_arguments_fail_cleanly() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = |args: &[&str]| {
        let out = Command::new(env!("CARGO_BIN_EXE_acdr")).args(args).output().unwrap();
        assert!(!out.status.success(), "{args:?} should fail");
        String::from_utf8_lossy(&out.stderr).to_string()
    };
    let o = s(tmp.path());
    bad(&["train", "--out", o, "--set", "nonsense=1"]);
    bad(&["train", "--out", o, "--set", "k=2"]);
    bad(&["sweep", "--axis", "colors", "--out", o]);
    let missing = bad(&["eval", "--checkpoint", "/no/such.ckpt", "--out", o]);
    assert!(missing.contains("such.ckpt"), "{missing}");
}
