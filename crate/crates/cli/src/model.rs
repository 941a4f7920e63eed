use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use iflow::condgen::{accuracy, sample_latent, train as fit, TrainConfig};
use iflow::flow::{ArchConfig, FlowModel, InverseOptions};
use iflow::metrics::{
    generation_report, invertibility_audit, uniform_in_box, AuditReport, MetricsReport,
};
use iflow::DenseMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{create_dir, manifest_beside, parse, read_json, write_json, write_manifest};
use crate::data::{load_eval, load_splits};
use crate::error::{CliError, CliResult};

/// Architecture file: the block layout plus the head variance.
#[derive(Debug, Deserialize)]
struct ArchFile {
    #[serde(flatten)]
    arch: ArchConfig,
    #[serde(default = "default_sigma2")]
    sigma2: f64,
}

fn default_sigma2() -> f64 {
    0.1
}

const AUDIT_ROWS: usize = 1000;

#[derive(Serialize)]
struct Audit {
    report: Option<AuditReport>,
    error: Option<String>,
}

fn audit(model: &FlowModel, x: &DenseMatrix, seed: u64) -> Audit {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows: Vec<usize> = (0..x.rows().min(AUDIT_ROWS)).collect();
    let x_in = x.select_rows(&rows);
    let ood = uniform_in_box(x, AUDIT_ROWS, &mut rng);
    match invertibility_audit(model, &x_in, &ood, InverseOptions::default()) {
        Ok(r) => Audit {
            report: Some(r),
            error: None,
        },
        Err(e) => Audit {
            report: None,
            error: Some(e.to_string()),
        },
    }
}

pub fn train(
    data: &Path,
    arch_path: &Path,
    hparams_path: &Path,
    out: &Path,
    seed: u64,
) -> CliResult<()> {
    let arch_value = read_json(arch_path)?;
    let arch: ArchFile = parse(&arch_value, &arch_path.display().to_string())?;
    let hp_value = read_json(hparams_path)?;
    let mut cfg: TrainConfig = parse(&hp_value, &hparams_path.display().to_string())?;
    cfg.seed = seed;
    let (train_set, test_set) = load_splits(data)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = FlowModel::new(
        train_set.graph.clone(),
        train_set.channels,
        train_set.classes,
        &arch.arch,
        arch.sigma2,
        &mut rng,
    )?;
    create_dir(out)?;
    let report = fit(&mut model, &train_set, test_set.as_ref(), &cfg, |r| {
        let te = r
            .test_err
            .map_or_else(|| "-".to_string(), |e| format!("{e:.4}"));
        eprintln!(
            "epoch {:>4}  total {:.5}  L_g {:.5}  W2 {:.5}  L_c {:.5}  train_err {:.4}  test_err {te}",
            r.epoch, r.total, r.l_g, r.w2, r.l_c, r.train_err
        );
    })?;

    let model_path = out.join("model.json");
    let trace_path = out.join("loss_trace.csv");
    let summary_path = out.join("summary.json");
    model.save(&model_path)?;
    report.write_csv(&trace_path)?;
    let eval_set = test_set.as_ref().unwrap_or(&train_set);
    let audit = audit(&model, &eval_set.features, seed);
    if let Some(e) = &audit.error {
        eprintln!("warning: invertibility audit failed: {e}");
    }
    let summary = json!({
        "stop": report.stop,
        "epochs": report.trace.len(),
        "last_epoch": report.trace.last(),
        "train_accuracy": accuracy(&model, &train_set)?,
        "test_accuracy": test_set.as_ref().map(|t| accuracy(&model, t)).transpose()?,
        "head_separation": model.mean_separation(),
        "audit": audit,
    });
    write_json(&summary_path, &summary)?;
    let config = json!({
        "data": data.display().to_string(),
        "arch": arch_value,
        "hparams": hp_value,
    });
    write_manifest(
        &out.join("manifest.json"),
        "train",
        seed,
        &config,
        &[model_path, trace_path, summary_path],
    )
}

/// `inline` is `0,1,1;1,0,0`; a path names a CSV with one label vector per
/// line (a non-numeric first line is taken as a header).
pub fn parse_labels(spec: &str) -> CliResult<Vec<Vec<usize>>> {
    let path = Path::new(spec);
    let (text, sep) = if path.is_file() {
        (
            std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?,
            '\n',
        )
    } else {
        (spec.to_string(), ';')
    };
    let mut out = Vec::new();
    for (i, line) in text.split(sep).map(str::trim).enumerate() {
        if line.is_empty() {
            continue;
        }
        let parsed: Result<Vec<usize>, _> =
            line.split(',').map(|c| c.trim().parse::<usize>()).collect();
        match parsed {
            Ok(v) => out.push(v),
            Err(_) if i == 0 && sep == '\n' => continue,
            Err(_) => {
                return Err(CliError::usage(format!(
                    "--labels: cannot parse label vector '{line}'"
                )))
            }
        }
    }
    if out.is_empty() {
        return Err(CliError::usage("--labels: no label vectors given"));
    }
    Ok(out)
}

/// Inverts row by row after a batch failure; failed rows come back as NaN.
fn invert_flagged(
    model: &FlowModel,
    h: &DenseMatrix,
    opts: InverseOptions,
) -> CliResult<(DenseMatrix, Vec<bool>)> {
    if let Ok(x) = model.inverse_robust(h, opts) {
        return Ok((x, vec![true; h.rows()]));
    }
    let mut x = DenseMatrix::zeros(h.rows(), h.cols());
    let mut ok = vec![true; h.rows()];
    for i in 0..h.rows() {
        let row = h.select_rows(&[i]);
        match model.inverse_robust(&row, opts) {
            Ok(xi) => x.row_mut(i).copy_from_slice(xi.row(0)),
            Err(iflow::Error::NonConvergent { .. }) => {
                ok[i] = false;
                x.row_mut(i).fill(f64::NAN);
            }
            Err(e) => return Err(e.into()),
        }
    }
    Ok((x, ok))
}

pub fn generate(
    model_path: &Path,
    labels: &str,
    n: usize,
    out: &Path,
    opts: InverseOptions,
    seed: u64,
) -> CliResult<()> {
    if opts.tol.is_nan() || opts.tol <= 0.0 || opts.max_iter == 0 {
        return Err(CliError::usage(
            "--tol must be positive and --max-iter at least 1",
        ));
    }
    let model = FlowModel::load(model_path)?;
    let vectors = parse_labels(labels)?;
    let all: Vec<Vec<usize>> = vectors
        .iter()
        .flat_map(|y| std::iter::repeat_n(y.clone(), n))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = sample_latent(&model, &all, &mut rng)?;
    let (x, ok) = invert_flagged(&model, &h, opts)?;

    let (v, c) = (model.nodes(), model.channels());
    let mut text = String::new();
    let mut header: Vec<String> = (0..v).map(|i| format!("y{i}")).collect();
    for i in 0..v {
        header.extend((0..c).map(|j| format!("x{i}_{j}")));
    }
    header.push("converged".into());
    text.push_str(&header.join(","));
    text.push('\n');
    for (r, y) in all.iter().enumerate() {
        let mut cells: Vec<String> = y.iter().map(usize::to_string).collect();
        cells.extend(x.row(r).iter().map(f64::to_string));
        cells.push(u8::from(ok[r]).to_string());
        writeln!(text, "{}", cells.join(",")).expect("string write");
    }
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    std::fs::write(out, text).map_err(|e| CliError::io(out, e))?;
    let failed = ok.iter().filter(|&&b| !b).count();
    if failed > 0 {
        eprintln!(
            "warning: {failed} of {} samples did not converge (flagged converged=0)",
            ok.len()
        );
    }
    let config = json!({
        "model": model_path.display().to_string(),
        "labels": vectors,
        "n": n,
        "tol": opts.tol,
        "max_iter": opts.max_iter,
    });
    write_manifest(
        &manifest_beside(out),
        "generate",
        seed,
        &config,
        &[out.to_path_buf()],
    )
}

#[derive(Serialize)]
struct EvaluationReport {
    metrics: MetricsReport,
    accuracy: f64,
    head_separation: f64,
    audit: Audit,
}

pub fn evaluate(model_path: &Path, data: &Path, out: &Path, seed: u64) -> CliResult<()> {
    let model = FlowModel::load(model_path)?;
    let ds = load_eval(data)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let metrics = generation_report(&model, &ds, &mut rng, InverseOptions::default())?;
    let report = EvaluationReport {
        accuracy: accuracy(&model, &ds)?,
        head_separation: model.mean_separation(),
        audit: audit(&model, &ds.features, seed),
        metrics,
    };
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_json(out, &report)?;
    let csv: PathBuf = out.with_extension("csv");
    report.metrics.write_csv(&csv)?;
    eprintln!(
        "weighted MMD(alpha=1) {:.5}  energy {:.5}  accuracy {:.4}",
        report.metrics.weighted.mmd[1], report.metrics.weighted.energy, report.accuracy
    );
    let config = json!({
        "model": model_path.display().to_string(),
        "data": data.display().to_string(),
    });
    write_manifest(
        &manifest_beside(out),
        "evaluate",
        seed,
        &config,
        &[out.to_path_buf(), csv],
    )
}
