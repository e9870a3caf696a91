use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use flowcon::datasets::{self, read_features, write_features, FeatureDataset, UNLABELED};
use flowcon::flow::{init_model, load_checkpoint, FlowModel};
use flowcon::metrics::{evaluate_suite, EvalConfig, EvalReport, Metrics, SuiteReport};
use flowcon::oodscore::{self, compute_prototypes, load_prototypes, save_prototypes, ClassPrototypes};
use flowcon::train::{fit, EpochMetrics, FitOptions, TrainState};
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::CliError;
use crate::{ClassifyArgs, Command, EvalArgs, ExportEmbedArgs, GenSynthArgs, SweepArgs, SynthKind};

pub const CHECKPOINT_FILE: &str = "model.fckp";
pub const PROTOTYPES_FILE: &str = "prototypes.fcpt";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const LAST_GOOD_FILE: &str = "last_good.fckp";

pub fn dispatch(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::GenSynth(a) => gen_synth(&a),
        Command::Train(a) => {
            let cfg = RunConfig::load(&a.config, &a.overrides)?;
            let out = train(&cfg)?;
            if let Some(m) = &out.last_epoch {
                println!("epoch {}: total {:.6} con {:.6} flow {:.6}", m.epoch, m.l_total, m.l_con, m.l_flow);
            }
            println!("wrote {} and {}", out.checkpoint.display(), out.prototypes.display());
            Ok(())
        }
        Command::Eval(a) => {
            let suite = eval(&a, false)?;
            let mut rows: Vec<(String, Metrics)> =
                suite.reports.iter().map(|r| (r.ood_set.clone(), r.metrics)).collect();
            rows.extend(suite.mean.iter().map(|m| (m.ood_set.clone(), m.metrics)));
            print!("{}", metrics_table(&rows, "ood_set"));
            Ok(())
        }
        Command::ExportHist(a) => eval(&a, true).map(|_| ()),
        Command::Classify(a) => classify(&a),
        Command::ExportEmbed(a) => export_embed(&a),
        Command::SweepLambda(a) => sweep_lambda(&a),
    }
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn to_json<T: Serialize>(value: &T) -> Result<String, CliError> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

fn check_dim(what: &str, got: usize, want: usize) -> Result<(), CliError> {
    if got != want {
        return Err(CliError::Usage(format!(
            "dimension mismatch: {what} has dimension {got}, checkpoint expects {want}"
        )));
    }
    Ok(())
}

/// Splits `NAME=PATH`; names end up in file names so they are kept simple.
fn named_path(spec: &str) -> Result<(String, PathBuf), CliError> {
    let (name, path) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("expected NAME=PATH, got {spec:?}")))?;
    let ok = !name.is_empty()
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'));
    if !ok {
        return Err(CliError::Usage(format!(
            "set name {name:?} must be non-empty and use only letters, digits, '-', '_' or '.'"
        )));
    }
    Ok((name.to_string(), PathBuf::from(path)))
}

fn gen_synth(a: &GenSynthArgs) -> Result<(), CliError> {
    let conflict = |flags: &[(&str, bool)], kind: &str| -> Result<(), CliError> {
        let used: Vec<&str> = flags.iter().filter(|(_, set)| *set).map(|(f, _)| *f).collect();
        if used.is_empty() {
            Ok(())
        } else {
            Err(CliError::Usage(format!("{} cannot be used with --kind {kind}", used.join(", "))))
        }
    };
    let (train, test, ood) = match a.kind {
        SynthKind::Moons => {
            conflict(
                &[
                    ("--k", a.k.is_some()),
                    ("--d", a.d.is_some()),
                    ("--mean-scale", a.mean_scale.is_some()),
                    ("--sigma", a.sigma.is_some()),
                    ("--displacement", a.displacement.is_some()),
                ],
                "moons",
            )?;
            let n = a.n.unwrap_or(2000);
            let n_test = a.n_test.unwrap_or(n / 4);
            if n == 0 || n_test == 0 || !(n + n_test).is_multiple_of(2) {
                return Err(CliError::Usage(format!(
                    "moons need positive --n and --n-test with an even sum, got {n} + {n_test}"
                )));
            }
            let all = datasets::gen_moons(n + n_test, a.noise.unwrap_or(0.08), a.seed)?;
            let s = datasets::split(&all, n as f64 / (n + n_test) as f64, a.seed)?;
            let ood = datasets::gen_moons_ood(a.n_ood.unwrap_or(400), a.seed)?;
            (s.train, s.test, ood)
        }
        SynthKind::Blobs => {
            conflict(&[("--noise", a.noise.is_some())], "blobs")?;
            let n = a.n.unwrap_or(500);
            let n_test = a.n_test.unwrap_or(n / 4);
            if n == 0 || n_test == 0 {
                return Err(CliError::Usage("blobs need positive --n and --n-test".into()));
            }
            let (k, d) = (a.k.unwrap_or(10), a.d.unwrap_or(64));
            let scale = a.mean_scale.unwrap_or(5.0);
            let sigma = a.sigma.unwrap_or(1.0);
            let all = datasets::gen_blobs(k, d, n + n_test, scale, sigma, a.seed)?;
            let s = datasets::split(&all, n as f64 / (n + n_test) as f64, a.seed)?;
            let n_ood = a.n_ood.unwrap_or(k * n_test);
            let shift = a.displacement.unwrap_or(8.0) * scale;
            let ood = datasets::gen_displaced_blob(k, d, n_ood, scale, sigma, shift, a.seed)?;
            (s.train, s.test, ood)
        }
    };
    create_dir(&a.out)?;
    for (name, ds) in [("train", &train), ("test", &test), ("ood", &ood)] {
        let path = a.out.join(format!("{name}.fcft"));
        write_features(ds, &path)?;
        println!(
            "{}: {} rows, dim {}, num_classes {}",
            path.display(),
            ds.len(),
            ds.dim,
            ds.num_classes
        );
    }
    Ok(())
}

/// Files produced by a training run.
#[derive(Debug, Clone)]
pub struct TrainOutputs {
    pub checkpoint: PathBuf,
    pub prototypes: PathBuf,
    pub log: PathBuf,
    pub last_epoch: Option<EpochMetrics>,
}

#[derive(Serialize)]
struct LogHeader<'a> {
    config: &'a RunConfig,
}

pub fn train(cfg: &RunConfig) -> Result<TrainOutputs, CliError> {
    let data = read_features(&cfg.train)?;
    if let Some(d) = cfg.d {
        if d != data.dim {
            return Err(CliError::Config(format!(
                "config sets d = {d} but {} has dimension {}",
                cfg.train.display(),
                data.dim
            )));
        }
    }
    let tc = &cfg.train_config;
    let mut state = match &cfg.resume {
        Some(path) => {
            let mut s = TrainState::load(path)?;
            check_dim("training data", data.dim, s.model.d)?;
            s.optimizer.config = tc.optimizer;
            s
        }
        None => {
            let model = init_model(data.dim, cfg.blocks, cfg.hidden_for(data.dim), tc.seed)?;
            TrainState::new(model, tc.optimizer)
        }
    };
    create_dir(&cfg.out_dir)?;
    let log_path = cfg.out_dir.join(LOG_FILE);
    let file = fs::File::create(&log_path).map_err(|e| CliError::Io(format!("{}: {e}", log_path.display())))?;
    let mut log = BufWriter::new(file);
    serde_json::to_writer(&mut log, &LogHeader { config: cfg })?;
    writeln!(log)?;

    let checkpoint_dir = (tc.checkpoint_every > 0).then(|| cfg.out_dir.join("checkpoints"));
    if let Some(dir) = &checkpoint_dir {
        create_dir(dir)?;
    }
    let opts = FitOptions { checkpoint_dir };
    let result = fit(&mut state, &data, tc, &opts, &mut |rec| {
        serde_json::to_writer(&mut log, rec).map_err(|e| flowcon::Error::State(e.to_string()))?;
        writeln!(log).map_err(|e| flowcon::Error::State(e.to_string()))
    });
    log.flush()?;
    let history = match result {
        Ok(history) => history,
        Err(e) if e.is_numeric() => {
            let path = cfg.out_dir.join(LAST_GOOD_FILE);
            state.save(&path)?;
            return Err(CliError::Numeric(format!(
                "{e}; last good parameters written to {}",
                path.display()
            )));
        }
        Err(e) => return Err(e.into()),
    };

    let checkpoint = cfg.out_dir.join(CHECKPOINT_FILE);
    state.save(&checkpoint)?;
    let protos = compute_prototypes(&state.model, &data)?;
    let prototypes = cfg.out_dir.join(PROTOTYPES_FILE);
    save_prototypes(&protos, &prototypes)?;
    Ok(TrainOutputs {
        checkpoint,
        prototypes,
        log: log_path,
        last_epoch: history.last().cloned(),
    })
}

fn load_model(checkpoint: &Path, prototypes: &Path) -> Result<(FlowModel, ClassPrototypes), CliError> {
    let model = load_checkpoint(checkpoint)?;
    let protos = load_prototypes(prototypes)?;
    check_dim("prototypes", protos.d, model.d)?;
    Ok((model, protos))
}

fn read_checked(path: &Path, model: &FlowModel) -> Result<FeatureDataset, CliError> {
    let ds = read_features(path)?;
    check_dim(&path.display().to_string(), ds.dim, model.d)?;
    Ok(ds)
}

fn metrics_table(rows: &[(String, Metrics)], label: &str) -> String {
    let mut s = format!("{label:<12} {:>8} {:>8} {:>8} {:>8}\n", "AUROC", "AUPR-S", "AUPR-E", "FPR95");
    for (name, m) in rows {
        let _ = writeln!(
            s,
            "{name:<12} {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
            m.auroc, m.aupr_s, m.aupr_e, m.fpr95
        );
    }
    s
}

/// Runs the evaluation suite and writes its files into `a.out`. With
/// `hist_only` only the histogram CSVs are written.
pub fn eval(a: &EvalArgs, hist_only: bool) -> Result<SuiteReport, CliError> {
    let (model, protos) = load_model(&a.checkpoint, &a.prototypes)?;
    let id_test = read_checked(&a.id_test, &model)?;
    let mut sets = Vec::new();
    for spec in &a.ood {
        let (name, path) = named_path(spec)?;
        if name == "mean" || sets.iter().any(|(n, _)| *n == name) {
            return Err(CliError::Usage(format!("OOD set name {name:?} is reserved or repeated")));
        }
        sets.push((name, read_checked(&path, &model)?));
    }
    let cfg = EvalConfig {
        seed: a.seed,
        ratio: a.ratio,
        bins: a.bins,
    };
    let suite = evaluate_suite(&model, &protos, &id_test, &sets, &cfg)?;
    for s in &suite.skipped {
        eprintln!("warning: skipped {}: {}", s.ood_set, s.error);
    }
    if suite.reports.is_empty() {
        return Err(CliError::Data("no OOD set could be evaluated".into()));
    }
    create_dir(&a.out)?;
    for r in &suite.reports {
        for w in &r.warnings {
            eprintln!("warning: {}: {w}", r.ood_set);
        }
        if let Some(h) = &r.histogram {
            write_file(&a.out.join(format!("hist_{}.csv", r.ood_set)), h.to_csv().as_bytes())?;
        }
        if !hist_only {
            let report = EvalReport {
                histogram: None,
                ..r.clone()
            };
            write_file(&a.out.join(format!("report_{}.json", r.ood_set)), to_json(&report)?.as_bytes())?;
        }
    }
    if !hist_only {
        if let Some(mean) = &suite.mean {
            write_file(&a.out.join("report_mean.json"), to_json(mean)?.as_bytes())?;
        }
    }
    Ok(suite)
}

fn classify(a: &ClassifyArgs) -> Result<(), CliError> {
    let (model, protos) = load_model(&a.checkpoint, &a.prototypes)?;
    let data = read_checked(&a.data, &model)?;
    let acc = oodscore::accuracy(&model, &protos, &data)?;
    if acc.unlabeled > 0 {
        eprintln!("warning: {} unlabeled rows excluded", acc.unlabeled);
    }
    let json = to_json(&acc)?;
    print!("{json}");
    if let Some(out) = &a.out {
        write_file(out, json.as_bytes())?;
    }
    Ok(())
}

/// One CSV row per input row: latent coordinates, label (`-1` when
/// unlabeled) and the source tag.
fn export_embed(a: &ExportEmbedArgs) -> Result<(), CliError> {
    let model = load_checkpoint(&a.checkpoint)?;
    let mut csv = String::new();
    for i in 0..model.d {
        let _ = write!(csv, "z{i},");
    }
    csv.push_str("label,source\n");
    let mut rows = 0;
    for spec in &a.data {
        let (source, path) = named_path(spec)?;
        let ds = read_checked(&path, &model)?;
        let z = oodscore::embed(&model, &ds)?;
        for i in 0..ds.len() {
            for v in z.row(i) {
                let _ = write!(csv, "{v},");
            }
            let label = ds.labels[i];
            if label == UNLABELED {
                csv.push_str("-1");
            } else {
                let _ = write!(csv, "{label}");
            }
            let _ = writeln!(csv, ",{source}");
        }
        rows += ds.len();
    }
    if let Some(dir) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_file(&a.out, csv.as_bytes())?;
    println!("wrote {rows} rows to {}", a.out.display());
    Ok(())
}

#[derive(Debug, Serialize)]
struct SweepRow {
    lambda: f64,
    #[serde(flatten)]
    metrics: Metrics,
}

fn sweep_lambda(a: &SweepArgs) -> Result<(), CliError> {
    if a.lambdas.is_empty() {
        return Err(CliError::Usage("--lambdas is empty".into()));
    }
    let out = std::env::current_dir()?.join(&a.out);
    create_dir(&out)?;
    let mut rows = Vec::new();
    for &lambda in &a.lambdas {
        let run_dir = out.join(format!("lambda_{lambda}"));
        let mut overrides = a.overrides.clone();
        overrides.push(format!("lambda={lambda}"));
        overrides.push(format!("out_dir={}", run_dir.display()));
        let cfg = RunConfig::load(&a.config, &overrides)?;
        eprintln!("lambda {lambda}: training into {}", run_dir.display());
        let trained = train(&cfg)?;
        let suite = eval(
            &EvalArgs {
                checkpoint: trained.checkpoint,
                prototypes: trained.prototypes,
                id_test: a.id_test.clone(),
                ood: a.ood.clone(),
                out: run_dir,
                ratio: a.ratio,
                seed: a.seed,
                bins: flowcon::metrics::HISTOGRAM_BINS,
            },
            false,
        )?;
        let mean: &EvalReport = suite
            .mean
            .as_ref()
            .ok_or_else(|| CliError::Data("no OOD set could be evaluated".into()))?;
        rows.push(SweepRow {
            lambda,
            metrics: mean.metrics,
        });
    }
    let mut csv = String::from("lambda,auroc,aupr_s,aupr_e,fpr95\n");
    for r in &rows {
        let m = &r.metrics;
        let _ = writeln!(csv, "{},{},{},{},{}", r.lambda, m.auroc, m.aupr_s, m.aupr_e, m.fpr95);
    }
    write_file(&out.join("sweep.csv"), csv.as_bytes())?;
    write_file(&out.join("sweep.json"), to_json(&rows)?.as_bytes())?;
    let table: Vec<(String, Metrics)> = rows.iter().map(|r| (r.lambda.to_string(), r.metrics)).collect();
    print!("{}", metrics_table(&table, "lambda"));
    Ok(())
}
