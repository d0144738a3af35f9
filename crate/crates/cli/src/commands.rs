//! One function per subcommand.

use std::path::{Path, PathBuf};

use icarec_core::baselines::{cancel_multichannel, AdaptiveFilterConfig, Method};
use icarec_core::datagen::{generate, Condition, PairedDataset};
use icarec_core::eval::{
    as_points, best_spearman, evaluation_report, import_coloring_csv, pca_coloring, svg_scatter, write_coloring_csv,
    EvalSettings, MetricsReport,
};
use icarec_core::infometrics::DiscreteSystem;
use icarec_core::io;
use icarec_core::nn::Mode;
use icarec_core::trainer::{self, encode_dataset, probe_independence, TrainCheckpoint};
use icarec_core::Tensor;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{lags_for, ExperimentConfig};
use crate::error::{loading, CliError, CliResult, Kind};

/// Resolved config file written next to training outputs.
pub const CONFIG_FILE: &str = "config.json";
pub const REPORT_FILE: &str = "report.json";
pub const RESIDUALS_FILE: &str = "residuals.csv";
pub const PRESENCE_FILE: &str = "presence.json";

/// Colour levels for rank-quantized scatter plots.
const RANK_LEVELS: usize = 8;

/// Process-wide settings shared by every subcommand.
#[derive(Clone, Copy, Debug)]
pub struct Env {
    pub threads: usize,
}

/// Reads `ICAREC_THREADS`; absent means 1.
pub fn env_from(value: Option<String>) -> CliResult<Env> {
    let threads = match value {
        None => 1,
        Some(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => n,
            _ => return Err(CliError::new(Kind::Usage, format!("ICAREC_THREADS must be a positive integer, got `{v}`"))),
        },
    };
    Ok(Env { threads })
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("report types serialize")
}

/// Standard envelope: every output JSON carries its command, config and seed.
fn envelope(command: &str, config: Value, seed: u64, env: Env, fields: Value) -> Value {
    let mut out = json!({
        "command": command,
        "config": config,
        "seed": seed,
        "threads": env.threads,
    });
    if let (Value::Object(o), Value::Object(f)) = (&mut out, fields) {
        o.extend(f);
    }
    out
}

fn ensure_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::new(Kind::Other, format!("cannot create {}: {e}", dir.display())))
}

fn require_file(path: &Path, what: &str) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::new(Kind::MissingFile, format!("{what} {} not found", path.display())))
    }
}

fn read_dataset(path: &Path) -> CliResult<PairedDataset> {
    require_file(path, "dataset")?;
    require_file(&PairedDataset::meta_path(path), "dataset meta")?;
    PairedDataset::read(path).map_err(loading)
}

pub fn gen(config: &Path, out: &Path, env: Env) -> CliResult<Value> {
    let cfg = ExperimentConfig::load(config)?;
    let spec = cfg
        .dataset
        .generator
        .as_ref()
        .ok_or_else(|| CliError::schema("gen needs dataset.generator"))?;
    let data = generate(spec, cfg.dataset.n.unwrap_or(0), cfg.seed).map_err(loading)?;
    data.write(out)?;
    Ok(envelope(
        "gen",
        to_value(&cfg),
        cfg.seed,
        env,
        json!({
            "out": out,
            "meta": PairedDataset::meta_path(out),
            "samples": data.len(),
        }),
    ))
}

/// Codes of a dataset and the evaluation report on it.
fn evaluate(nets_encoder: &icarec_core::nn::Net, data: &PairedDataset, cfg_lags: Option<&crate::config::EvalSection>, settings: &EvalSettings) -> CliResult<(Tensor, MetricsReport)> {
    let codes = encode_dataset(nets_encoder, &data.x)?;
    let lags = lags_for(cfg_lags, data);
    let report = evaluation_report(
        &codes,
        Some(&data.x),
        Some(&data.t),
        data.s.as_ref(),
        lags.as_deref(),
        settings,
    )?;
    Ok((codes, report))
}

pub fn train(config: &Path, out: Option<&Path>, env: Env) -> CliResult<Value> {
    let cfg = ExperimentConfig::load(config)?;
    let tc = cfg.require_train_config()?;
    let out: PathBuf = match (out, &cfg.output) {
        (Some(o), _) => o.to_path_buf(),
        (None, Some(o)) => config.parent().unwrap_or(Path::new(".")).join(o),
        (None, None) => return Err(CliError::new(Kind::Usage, "train needs --out or an `output` entry in the config")),
    };
    let (data, holdout) = cfg.train_and_holdout()?;
    tc.validate_for(&data).map_err(|e| CliError::schema(e.to_string()))?;
    if cfg.eval.probe.is_some() && data.is_sequence() {
        return Err(CliError::schema("eval.probe applies to flat datasets only"));
    }
    ensure_dir(&out)?;
    io::write_json(&out.join(CONFIG_FILE), &cfg)?;

    let (nets, report) = trainer::train(&tc, &data, Some(&out))?;
    let eval_data = holdout.as_ref().unwrap_or(&data);
    let (codes, metrics) = evaluate(&nets.encoder, eval_data, Some(&cfg.eval), &cfg.eval.settings)?;
    let probe = match &cfg.eval.probe {
        Some(p) => Some(probe_independence(&codes, &eval_data.t, &tc.discriminator, p)?),
        None => None,
    };
    let value = envelope(
        "train",
        to_value(&cfg),
        cfg.seed,
        env,
        json!({
            "train": report,
            "evaluated_on": if holdout.is_some() { "holdout" } else { "training" },
            "evaluation_samples": eval_data.len(),
            "evaluation": metrics,
            "probe": probe,
        }),
    );
    io::write_json(&out.join(REPORT_FILE), &value)?;
    Ok(value)
}

/// Optional exports of `eval`.
#[derive(Clone, Debug, Default)]
pub struct EvalExports {
    pub pca_csv: Option<PathBuf>,
    pub svg: Option<PathBuf>,
}

/// The experiment config stored beside a checkpoint by `train`, if any.
fn sibling_config(checkpoint: &Path) -> CliResult<Option<ExperimentConfig>> {
    let path = checkpoint.parent().unwrap_or(Path::new(".")).join(CONFIG_FILE);
    if !path.is_file() {
        return Ok(None);
    }
    let cfg: ExperimentConfig = io::read_json(&path).map_err(loading)?;
    Ok(Some(cfg))
}

pub fn eval(
    checkpoint: &Path,
    data: &Path,
    out: &Path,
    config: Option<&Path>,
    exports: &EvalExports,
    env: Env,
) -> CliResult<Value> {
    require_file(checkpoint, "checkpoint")?;
    let cfg = match config {
        Some(p) => Some(ExperimentConfig::load(p)?),
        None => sibling_config(checkpoint)?,
    };
    let ckpt: TrainCheckpoint = io::read_json(checkpoint).map_err(loading)?;
    let data = read_dataset(data)?;
    let mut nets = ckpt.nets()?;
    nets.set_mode(Mode::Eval);
    let section = cfg.as_ref().map(|c| &c.eval);
    let settings = section.map(|e| e.settings).unwrap_or_default();
    let (codes, metrics) = evaluate(&nets.encoder, &data, section, &settings)?;

    if exports.pca_csv.is_some() || exports.svg.is_some() {
        export_codes(&codes, &data, section, exports)?;
    }
    let value = envelope(
        "eval",
        json!({ "experiment": cfg, "train": ckpt.config, "epoch": ckpt.epoch }),
        ckpt.config.seed,
        env,
        json!({
            "checkpoint": checkpoint,
            "data": data.meta,
            "samples": data.len(),
            "evaluation": metrics,
        }),
    );
    io::write_json(out, &value)?;
    Ok(value)
}

/// Rank of each value quantized into `levels` equal-count bins.
fn rank_levels(v: &[f64], levels: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]).then(a.cmp(&b)));
    let mut out = vec![0; v.len()];
    for (rank, &i) in order.iter().enumerate() {
        out[i] = rank * levels / v.len().max(1);
    }
    out
}

fn column(points: &[f64], dim: usize, j: usize) -> Vec<f64> {
    points.iter().skip(j).step_by(dim).copied().collect()
}

/// Sequence codes: PCA of the first segment's code trajectory, coloured by
/// position within the fetal and maternal periods. Flat codes: the code
/// coordinate that best tracks the source against the source itself.
fn export_codes(
    codes: &Tensor,
    data: &PairedDataset,
    section: Option<&crate::config::EvalSection>,
    exports: &EvalExports,
) -> CliResult<()> {
    if codes.ndim() == 3 {
        let lags = lags_for(section, data).ok_or_else(|| CliError::schema("PCA coloring needs segment lags"))?;
        let first = lags.first().ok_or_else(|| CliError::schema("PCA coloring needs segment lags"))?;
        let seg = codes.select_rows(&[0])?;
        let (pts, dim) = as_points(&seg)?;
        let n = pts.len() / dim;
        let points = pca_coloring(&pts, n, dim, first.fetal, first.maternal)?;
        if let Some(p) = &exports.pca_csv {
            write_coloring_csv(&points, p)?;
        }
        if let Some(p) = &exports.svg {
            let xs: Vec<f64> = points.iter().map(|q| q.pc1).collect();
            let ys: Vec<f64> = points.iter().map(|q| q.pc2).collect();
            let cs: Vec<usize> = points.iter().map(|q| q.color_f).collect();
            io::write_atomic(p, svg_scatter(&xs, &ys, &cs, "code PCA, fetal phase")?.as_bytes())?;
        }
        return Ok(());
    }
    if exports.pca_csv.is_some() {
        return Err(CliError::schema("--pca-csv applies to sequence datasets only"));
    }
    let Some(svg) = &exports.svg else { return Ok(()) };
    let s = data
        .s
        .as_ref()
        .ok_or_else(|| CliError::schema("the code plot needs the hidden source column s_0"))?;
    let (cp, cd) = as_points(codes)?;
    let (sp, sd) = as_points(s)?;
    if sd != 1 {
        return Err(CliError::schema("the code plot needs a one-dimensional source"));
    }
    let best = (0..cd)
        .max_by(|&a, &b| {
            let ra = best_spearman(&column(&cp, cd, a), 1, &sp).map(f64::abs).unwrap_or(0.0);
            let rb = best_spearman(&column(&cp, cd, b), 1, &sp).map(f64::abs).unwrap_or(0.0);
            ra.total_cmp(&rb).then(b.cmp(&a))
        })
        .unwrap_or(0);
    let (tp, td) = as_points(&data.t.to_tensor())?;
    let colors = rank_levels(&column(&tp, td, 0), RANK_LEVELS);
    let title = format!("source vs code_{best}");
    io::write_atomic(svg, svg_scatter(&sp, &column(&cp, cd, best), &colors, &title)?.as_bytes())?;
    Ok(())
}

/// Default report path: `<stem>.report.json` in the working directory.
pub fn lemma_report_path(system: &Path) -> PathBuf {
    let stem = system.file_stem().and_then(|s| s.to_str()).unwrap_or("system");
    PathBuf::from(format!("{stem}.report.json"))
}

pub fn lemma(system: &Path, out: Option<&Path>, env: Env) -> CliResult<Value> {
    require_file(system, "system")?;
    let sys: DiscreteSystem = io::read_json(system).map_err(loading)?;
    let report = sys.lemma_check().map_err(loading)?;
    let value = envelope("lemma", to_value(&sys), 0, env, json!({ "report": report }));
    let path = out.map(Path::to_path_buf).unwrap_or_else(|| lemma_report_path(system));
    io::write_json(&path, &value)?;
    Ok(value)
}

pub fn baseline(method: Method, config: &Path, data: &Path, out: &Path, env: Env) -> CliResult<Value> {
    let cfg = ExperimentConfig::load(config)?;
    let filter: AdaptiveFilterConfig = cfg.baseline.unwrap_or_default();
    let data = read_dataset(data)?;
    let Condition::Numeric(t) = &data.t else {
        return Err(CliError::schema("baselines need numeric reference channels"));
    };
    if !data.is_sequence() {
        return Err(CliError::schema("baselines need a sequence dataset"));
    }
    let lags = lags_for(Some(&cfg.eval), &data).ok_or_else(|| CliError::schema("baselines need segment lags"))?;
    let residual = cancel_multichannel(&data.x, t, method, &filter)?;
    let presence = icarec_core::eval::presence_ratio(&residual, &lags)?;
    let presence_x = icarec_core::eval::presence_ratio(&data.x, &lags)?;

    ensure_dir(out)?;
    let residuals = PairedDataset::new(residual, data.t.clone(), data.s.clone(), data.meta.clone())?;
    residuals.write(&out.join(RESIDUALS_FILE))?;
    let value = envelope(
        "baseline",
        to_value(&cfg),
        cfg.seed,
        env,
        json!({
            "method": method,
            "filter": filter,
            "data": data.meta,
            "presence": presence,
            "presence_x": presence_x,
        }),
    );
    io::write_json(&out.join(PRESENCE_FILE), &value)?;
    Ok(value)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlotKind {
    Scatter,
    PcaColor,
}

/// `scatter`: any numeric CSV; the first two columns are the axes, and the
/// `s_0` column (else the third) gives rank-quantized colours.
/// `pca-color`: a coloring table from `eval --pca-csv`.
pub fn plot(data: &Path, kind: PlotKind, out: &Path, env: Env) -> CliResult<Value> {
    require_file(data, "data")?;
    let (xs, ys, colors, title) = match kind {
        PlotKind::PcaColor => {
            let pts = import_coloring_csv(data).map_err(loading)?;
            (
                pts.iter().map(|p| p.pc1).collect::<Vec<_>>(),
                pts.iter().map(|p| p.pc2).collect::<Vec<_>>(),
                pts.iter().map(|p| p.color_f).collect::<Vec<_>>(),
                "pc1 vs pc2, fetal phase".to_string(),
            )
        }
        PlotKind::Scatter => {
            let text = io::read_text(data)?;
            let mut r = csv::Reader::from_reader(text.as_bytes());
            let header: Vec<String> = r.headers().map_err(|e| CliError::schema(e.to_string()))?.iter().map(str::to_string).collect();
            if header.len() < 2 {
                return Err(CliError::schema("scatter needs at least two columns"));
            }
            let color_col = header.iter().position(|h| h == "s_0").or((header.len() > 2).then_some(2));
            let mut cols: Vec<Vec<f64>> = vec![Vec::new(); header.len()];
            for (line, rec) in r.records().enumerate() {
                let rec = rec.map_err(|e| CliError::schema(e.to_string()))?;
                for (j, col) in cols.iter_mut().enumerate() {
                    let v: f64 = rec.get(j).unwrap_or("").trim().parse().map_err(|_| {
                        CliError::schema(format!("row {}: column `{}` is not a number", line + 2, header[j]))
                    })?;
                    col.push(v);
                }
            }
            let colors = match color_col {
                Some(j) => rank_levels(&cols[j], RANK_LEVELS),
                None => vec![0; cols[0].len()],
            };
            let title = format!("{} vs {}", header[1], header[0]);
            (cols[0].clone(), cols[1].clone(), colors, title)
        }
    };
    let svg = svg_scatter(&xs, &ys, &colors, &title).map_err(loading)?;
    io::write_atomic(out, svg.as_bytes())?;
    Ok(json!({
        "command": "plot",
        "data": data,
        "kind": match kind { PlotKind::Scatter => "scatter", PlotKind::PcaColor => "pca-color" },
        "out": out,
        "points": xs.len(),
        "threads": env.threads,
    }))
}
