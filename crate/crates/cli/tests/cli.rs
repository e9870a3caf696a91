use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use flowcon::datasets::{read_features, write_features, FeatureDataset, UNLABELED};
use flowcon::flow::{init_model, save_checkpoint};
use flowcon::oodscore::embed;

fn flowcon(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flowcon"))
        .args(args)
        .env("FLOWCON_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = flowcon(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    flowcon(args).status.code().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn moons(dir: &Path) -> PathBuf {
    let data = dir.join("data");
    ok(&["gen-synth", "--kind", "moons", "--n", "200", "--n-ood", "60", "--seed", "3", "--out", p(&data)]);
    data
}

fn write_config(dir: &Path, data: &Path, extra: &str) -> PathBuf {
    let path = dir.join("run.cfg");
    let text = format!(
        "# small run\ntrain = {}\nout_dir = {}\nepochs = 2\nhidden = 8\nlr = 1e-3\n{extra}",
        data.join("train.fcft").display(),
        dir.join("run").display()
    );
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn gen_synth_writes_three_deterministic_files() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        ok(&["gen-synth", "--kind", "moons", "--n", "2000", "--noise", "0.08", "--seed", "7", "--out", p(out)]);
    }
    for name in ["train.fcft", "test.fcft", "ood.fcft"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }
    assert_eq!(read_features(a.join("train.fcft")).unwrap().len(), 2000);
    assert_eq!(read_features(a.join("test.fcft")).unwrap().len(), 500);
    assert_eq!(read_features(a.join("ood.fcft")).unwrap().len(), 400);
}

#[test]
fn gen_synth_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = flowcon(&["gen-synth", "--kind", "moons"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(code(&["gen-synth", "--kind", "moons", "--k", "3", "--out", p(dir.path())]), 2);
    assert_eq!(code(&["gen-synth", "--kind", "blobs", "--noise", "0.1", "--out", p(dir.path())]), 2);
}

#[test]
fn blobs_report_class_count() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(&[
        "gen-synth", "--kind", "blobs", "--k", "10", "--d", "64", "--n", "20", "--out", p(dir.path()),
    ]);
    assert!(stdout.contains("num_classes 10"));
    for name in ["train.fcft", "test.fcft"] {
        let ds = read_features(dir.path().join(name)).unwrap();
        assert_eq!((ds.num_classes, ds.dim), (10, 64));
    }
    let ood = read_features(dir.path().join("ood.fcft")).unwrap();
    assert!(ood.labels.iter().all(|&l| l == UNLABELED));
}

#[test]
fn train_writes_outputs_and_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let data = moons(dir.path());
    let cfg = write_config(dir.path(), &data, "");
    ok(&["train", "--config", p(&cfg)]);
    let run = dir.path().join("run");
    let first = fs::read(run.join("model.fckp")).unwrap();
    let protos = fs::read(run.join("prototypes.fcpt")).unwrap();

    let log = fs::read_to_string(run.join("train_log.jsonl")).unwrap();
    let header: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    let loss = &header["config"]["train_config"]["loss"];
    assert_eq!(loss["tau1"], 1.5);
    assert_eq!(loss["tau2"], 0.1);
    assert_eq!(loss["lambda"], 0.07);
    assert_eq!(log.lines().count(), 3);

    ok(&["train", "--config", p(&cfg)]);
    assert_eq!(fs::read(run.join("model.fckp")).unwrap(), first);
    assert_eq!(fs::read(run.join("prototypes.fcpt")).unwrap(), protos);
}

#[test]
fn lambda_override_reaches_the_log() {
    let dir = tempfile::tempdir().unwrap();
    let data = moons(dir.path());
    let cfg = write_config(dir.path(), &data, "");
    ok(&["train", "--config", p(&cfg), "--set", "lambda=0.0", "--set", "contrastive=false"]);
    let log = fs::read_to_string(dir.path().join("run/train_log.jsonl")).unwrap();
    let header: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert_eq!(header["config"]["train_config"]["loss"]["lambda"], 0.0);
}

#[test]
fn config_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let data = moons(dir.path());
    let cfg = write_config(dir.path(), &data, "learning_rate = 3\n");
    assert_eq!(code(&["train", "--config", p(&cfg)]), 2);
    let cfg = write_config(dir.path(), &data, "d = 5\n");
    assert_eq!(code(&["train", "--config", p(&cfg)]), 2);
}

#[test]
fn numeric_failure_exits_three_and_keeps_last_good() {
    let dir = tempfile::tempdir().unwrap();
    let data = moons(dir.path());
    // a subnormal temperature overflows the softmax logits
    let cfg = write_config(dir.path(), &data, "tau2 = 1e-310\n");
    assert_eq!(code(&["train", "--config", p(&cfg)]), 3);
    let run = dir.path().join("run");
    assert!(run.join("last_good.fckp").exists());
    assert!(!run.join("model.fckp").exists());
}

fn trained(dir: &Path) -> (PathBuf, PathBuf) {
    let data = moons(dir);
    let cfg = write_config(dir, &data, "");
    ok(&["train", "--config", p(&cfg)]);
    (data, dir.join("run"))
}

#[test]
fn eval_writes_reports_per_set_and_mean() {
    let dir = tempfile::tempdir().unwrap();
    let (data, run) = trained(dir.path());
    let out = dir.path().join("eval");
    let ood = data.join("ood.fcft");
    let stdout = ok(&[
        "eval",
        "--checkpoint", p(&run.join("model.fckp")),
        "--prototypes", p(&run.join("prototypes.fcpt")),
        "--id-test", p(&data.join("test.fcft")),
        "--ood", &format!("box={}", ood.display()),
        "--ood", &format!("box2={}", ood.display()),
        "--ratio", "0.2",
        "--seed", "11",
        "--out", p(&out),
    ]);
    for col in ["AUROC", "AUPR-S", "AUPR-E", "FPR95", "mean"] {
        assert!(stdout.contains(col), "{stdout}");
    }
    let mut jsons: Vec<String> = fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.ends_with(".json"))
        .collect();
    jsons.sort();
    assert_eq!(jsons, ["report_box.json", "report_box2.json", "report_mean.json"]);
    for name in &jsons {
        let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join(name)).unwrap()).unwrap();
        assert_eq!(v["seed"], 11);
        assert_eq!(v["ratio"], 0.2);
        for key in ["auroc", "aupr_s", "aupr_e", "fpr95"] {
            assert!(v[key].is_f64(), "{name} lacks {key}");
        }
    }
    let csv = fs::read_to_string(out.join("hist_box.csv")).unwrap();
    assert_eq!(csv.lines().count(), 101);

    let hist_only = dir.path().join("hist");
    flowcon(&[
        "export-hist",
        "--checkpoint", p(&run.join("model.fckp")),
        "--prototypes", p(&run.join("prototypes.fcpt")),
        "--id-test", p(&data.join("test.fcft")),
        "--ood", &format!("box={}", ood.display()),
        "--ood", &format!("box2={}", ood.display()),
        "--ratio", "0.2",
        "--seed", "11",
        "--out", p(&hist_only),
    ]);
    assert_eq!(fs::read(hist_only.join("hist_box.csv")).unwrap(), csv.as_bytes());
    assert!(!hist_only.join("report_mean.json").exists());
}

#[test]
fn eval_rejects_dimension_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let (data, run) = trained(dir.path());
    let wide = dir.path().join("wide.fcft");
    let mut ds = FeatureDataset::new(3, 2, "wide");
    ds.push(0, &[0.0, 1.0, 2.0]).unwrap();
    write_features(&ds, &wide).unwrap();
    let (ckpt, protos, test) = (run.join("model.fckp"), run.join("prototypes.fcpt"), data.join("test.fcft"));
    let args = [
        "eval",
        "--checkpoint", p(&ckpt),
        "--prototypes", p(&protos),
        "--id-test", p(&test),
        "--ood", &format!("wide={}", wide.display()),
        "--out", p(dir.path()),
    ];
    assert_eq!(code(&args), 2);
}

#[test]
fn classify_reports_accuracy_and_rejects_unlabeled() {
    let dir = tempfile::tempdir().unwrap();
    let (data, run) = trained(dir.path());
    let json_path = dir.path().join("acc.json");
    let stdout = ok(&[
        "classify",
        "--checkpoint", p(&run.join("model.fckp")),
        "--prototypes", p(&run.join("prototypes.fcpt")),
        "--data", p(&data.join("test.fcft")),
        "--out", p(&json_path),
    ]);
    let v: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    assert_eq!(v["labeled"], 50);
    assert_eq!(v["unlabeled"], 0);
    assert_eq!(fs::read_to_string(&json_path).unwrap(), stdout);

    let out = flowcon(&[
        "classify",
        "--checkpoint", p(&run.join("model.fckp")),
        "--prototypes", p(&run.join("prototypes.fcpt")),
        "--data", p(&data.join("ood.fcft")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no labeled rows"));
}

#[test]
fn export_embed_rows_and_precision() {
    let dir = tempfile::tempdir().unwrap();
    let (data, run) = trained(dir.path());
    let csv_path = dir.path().join("emb.csv");
    ok(&[
        "export-embed",
        "--checkpoint", p(&run.join("model.fckp")),
        "--data", &format!("id={}", data.join("test.fcft").display()),
        "--data", &format!("ood={}", data.join("ood.fcft").display()),
        "--out", p(&csv_path),
    ]);
    let csv = fs::read_to_string(&csv_path).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("z0,z1,label,source"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 50 + 60);
    assert!(rows[..50].iter().all(|r| r.ends_with(",id")));
    assert!(rows[50..].iter().all(|r| r.ends_with(",-1,ood")));

    let model = flowcon::load_checkpoint(run.join("model.fckp")).unwrap();
    let z = embed(&model, &read_features(data.join("test.fcft")).unwrap()).unwrap();
    for (i, row) in rows[..50].iter().enumerate() {
        let cols: Vec<f64> = row.split(',').take(2).map(|c| c.parse().unwrap()).collect();
        for (a, b) in cols.iter().zip(z.row(i)) {
            assert!((a - b).abs() <= 1e-9);
        }
    }
}

#[test]
fn identity_model_embeds_to_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let data = moons(dir.path());
    let ckpt = dir.path().join("identity.fckp");
    save_checkpoint(&init_model(2, 8, 8, 0).unwrap(), &ckpt).unwrap();
    let csv_path = dir.path().join("emb.csv");
    ok(&[
        "export-embed",
        "--checkpoint", p(&ckpt),
        "--data", &format!("id={}", data.join("test.fcft").display()),
        "--out", p(&csv_path),
    ]);
    let test = read_features(data.join("test.fcft")).unwrap();
    let csv = fs::read_to_string(&csv_path).unwrap();
    for (i, row) in csv.lines().skip(1).enumerate() {
        let cols: Vec<f64> = row.split(',').take(2).map(|c| c.parse().unwrap()).collect();
        assert_eq!(cols, test.row_f64(i));
    }
}
