use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use linerec::metrics::{char_accuracy, Pair};

fn linerec(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_linerec"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn generate(dir: &Path, n: usize, seed: u64, extra: &[&str]) {
    let (n, seed) = (n.to_string(), seed.to_string());
    let mut args = vec!["generate", "--n", &n, "--seed", &seed, "--out", p(dir)];
    args.extend_from_slice(extra);
    let o = linerec(&args);
    assert!(o.status.success(), "{}", stderr(&o));
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((
                    path.strip_prefix(dir).unwrap().to_path_buf(),
                    fs::read(&path).unwrap(),
                ));
            }
        }
    }
    out.sort();
    out
}

fn labels(dir: &Path) -> Vec<(String, String)> {
    fs::read_to_string(dir.join("labels.tsv"))
        .unwrap()
        .lines()
        .map(|l| {
            let (a, b) = l.split_once('\t').unwrap();
            (a.to_string(), b.to_string())
        })
        .collect()
}

#[test]
fn generate_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    generate(&a, 4, 7, &[]);
    generate(&b, 4, 7, &[]);
    let ta = tree(&a);
    assert_eq!(ta.len(), 4 + 3);
    assert_eq!(ta, tree(&b));
}

#[test]
fn eval_on_perfect_predictions_prints_one() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    generate(&data, 5, 1, &[]);
    let preds: String = labels(&data)
        .iter()
        .map(|(a, b)| format!("{a}\t{b}\n"))
        .collect();
    let pred_path = tmp.path().join("perfect.tsv");
    fs::write(&pred_path, preds).unwrap();
    let out_dir = tmp.path().join("report");
    let o = linerec(&[
        "eval",
        "--data",
        p(&data),
        "--predictions",
        p(&pred_path),
        "--out",
        p(&out_dir),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert_eq!(text.lines().next(), Some("accuracy\t1.0"));
    assert!(text.contains("char\tcodepoint\thits\ttotal\taccuracy"));
    assert!(out_dir.join("report.tsv").is_file());
    assert!(out_dir.join("config.conf").is_file());
    assert_eq!(
        fs::read_to_string(out_dir.join("predictions.tsv"))
            .unwrap()
            .lines()
            .count(),
        5
    );
}

#[test]
fn eval_accuracy_equals_the_metric() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    generate(&data, 6, 2, &[]);
    let rows = labels(&data);
    let mut pairs = Vec::new();
    let mut preds = String::new();
    for (i, (path, gt)) in rows.iter().enumerate() {
        let mut pred: String = gt.chars().skip(i % 3).collect();
        if i % 2 == 0 {
            pred.push('a');
        }
        preds.push_str(&format!("{path}\t{pred}\n"));
        pairs.push(Pair::new(pred, gt.clone()));
    }
    let pred_path = tmp.path().join("preds.tsv");
    fs::write(&pred_path, preds).unwrap();
    let o = linerec(&["eval", "--data", p(&data), "--predictions", p(&pred_path)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let line = stdout(&o).lines().next().unwrap().to_string();
    let shown: f64 = line.strip_prefix("accuracy\t").unwrap().parse().unwrap();
    assert_eq!(shown, char_accuracy(&pairs).unwrap());
}

#[test]
fn usage_errors_exit_two() {
    let o = linerec(&["generate", "--bogus"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("error[E2-usage]"));

    let o = linerec(&["train"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--data"));

    let o = linerec(&["eval", "--data", "x"]);
    assert_eq!(o.status.code(), Some(2));

    let tmp = tempfile::tempdir().unwrap();
    let o = linerec(&[
        "generate",
        "--n",
        "2",
        "--out",
        p(tmp.path()),
        "--set",
        "synth.max_words=zero",
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error[E2-usage]: "));

    let o = linerec(&["generate", "--n", "2", "--set", "nonsense"]);
    assert_eq!(o.status.code(), Some(2));

    for help in [vec!["--help"], vec!["eval", "--help"], vec!["--version"]] {
        let o = linerec(&help);
        assert_eq!(o.status.code(), Some(0));
    }
}

#[test]
fn data_and_checkpoint_errors_exit_three() {
    let tmp = tempfile::tempdir().unwrap();
    let o = linerec(&[
        "eval",
        "--data",
        p(&tmp.path().join("missing")),
        "--predictions",
        "none.tsv",
    ]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).starts_with("error[E3-io]: "));

    let data = tmp.path().join("data");
    generate(&data, 2, 3, &[]);
    let bad = tmp.path().join("bad.ckpt");
    fs::write(&bad, b"not a model").unwrap();
    let o = linerec(&["eval", "--data", p(&data), "--model", p(&bad)]);
    assert_eq!(o.status.code(), Some(3));
    let err = stderr(&o);
    assert!(err.starts_with("error[E3-checkpoint]: "), "{err}");
    assert_eq!(err.lines().count(), 1);

    let o = linerec(&[
        "predict",
        "--model",
        p(&bad),
        "--input",
        p(&data.join("images")),
    ]);
    assert_eq!(o.status.code(), Some(3));
}

const SMALL: [&str; 12] = [
    "--set",
    "model.unet_base=4",
    "--set",
    "model.hidden=16",
    "--set",
    "train.batch_size=2",
    "--set",
    "train.eval_every=10",
    "--set",
    "train.target_accuracy=1",
    "--set",
    "train.max_iters=1500",
];

#[test]
fn train_then_predict_recovers_the_training_transcripts() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    generate(
        &data,
        2,
        11,
        &[
            "--set",
            "synth.max_words=1",
            "--set",
            "synth.max_word_len=3",
        ],
    );
    let run = tmp.path().join("run");
    let mut args = vec!["train", "--data", p(&data), "--seed", "0", "--out", p(&run)];
    args.extend_from_slice(&SMALL);
    let o = linerec(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["config.conf", "train.log", "model.ckpt", "final.ckpt"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    let echo = fs::read_to_string(run.join("config.conf")).unwrap();
    assert!(echo.contains("direction = rtl"), "{echo}");

    let model = run.join("model.ckpt");
    let o = linerec(&[
        "predict",
        "--model",
        p(&model),
        "--input",
        p(&data.join("images")),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let predicted: Vec<String> = stdout(&o)
        .lines()
        .map(|l| l.split_once('\t').unwrap().1.to_string())
        .collect();
    let truth: Vec<String> = labels(&data).into_iter().map(|r| r.1).collect();
    assert_eq!(predicted, truth);

    let o = linerec(&[
        "eval",
        "--data",
        p(&data),
        "--model",
        p(&model),
        "--beam",
        "4",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).lines().next(), Some("accuracy\t1.0"));
}
