//! Building operators, datasets and models from a config, running training
//! legs and writing their artifacts.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use eqimaging::identifiability::{analyze_pair, StackReport};
use eqimaging::io::save_checkpoint;
use eqimaging::operators::EXPLICIT_CAP;
use eqimaging::reconstruct::{ModelSpec, ReconstructionModel};
use eqimaging::training::{
    self, format_psnr, history_csv, Dataset, EpochMetrics, GroupSampling, LossKind, LossSpec, OptimizerKind, Split,
    SupervisedSet, TrainConfig,
};
use eqimaging::{rng, CompareRegion, Error, ImageAction, LinearOperator, NoiseModel, Result, Tensor};
use sha2::{Digest, Sha256};

use crate::config::{DataSource, ExperimentConfig};
use crate::imageio::{read_image_dir, write_image, ImageFormat, Window};
use crate::synth::{synth_images, SynthSpec};

/// Header of the summary and comparison CSV files.
pub const METRICS_HEADER: &str = "method,epoch,train_loss,test_psnr_db,rank_verdict";
pub const COMPARE_HEADER: &str = "method,epoch,train_loss,test_psnr_db,rank_verdict,dataset_hash";

/// Largest `M` (entries) analyzed directly; bigger pairs use a probe grid.
pub const STACK_ENTRY_CAP: usize = 1 << 23;

/// Everything a training leg needs, shared between legs.
#[derive(Debug)]
pub struct Prepared {
    pub operator: Arc<LinearOperator<f64>>,
    pub action: Arc<ImageAction>,
    pub train: SupervisedSet<f64>,
    pub validation: Option<SupervisedSet<f64>>,
    pub test: SupervisedSet<f64>,
    pub noise: NoiseModel,
    /// SHA-256 over every image and measurement, hex encoded.
    pub dataset_hash: String,
}

/// Train, validation and test images for a config.
pub fn dataset_images(config: &ExperimentConfig) -> Result<(Vec<Tensor<f64>>, Vec<Tensor<f64>>, Vec<Tensor<f64>>)> {
    let d = &config.dataset;
    match &d.source {
        DataSource::Synth => {
            let spec = |count, seed| SynthSpec {
                count,
                size: d.size,
                family: d.family,
                invariant: d.invariant,
                seed,
                max_shapes: d.max_shapes,
            };
            Ok((
                synth_images(&spec(d.count, d.seed))?,
                synth_images(&spec(d.val_count, rng::substream(d.seed, 2)))?,
                synth_images(&spec(d.test_count, rng::substream(d.seed, 1)))?,
            ))
        }
        DataSource::Dir(dir) => {
            let mut all = read_image_dir::<f64>(dir)?;
            if let Some(bad) = all.iter().find(|t| t.shape() != [1, d.size, d.size]) {
                return Err(Error::InvalidShape {
                    shape: bad.shape().to_vec(),
                    reason: format!("images in {} must be {}x{}", dir.display(), d.size, d.size),
                });
            }
            let need = d.count + d.val_count + d.test_count;
            if all.len() < need {
                return Err(Error::InvalidArgument(format!(
                    "{} holds {} images; the config needs {need}",
                    dir.display(),
                    all.len()
                )));
            }
            all.truncate(need);
            let test = all.split_off(d.count + d.val_count);
            let val = all.split_off(d.count);
            Ok((all, val, test))
        }
    }
}

fn hash_sets(sets: &[&SupervisedSet<f64>]) -> String {
    let mut h = Sha256::new();
    for s in sets {
        h.update((s.len() as u64).to_le_bytes());
        for i in 0..s.len() {
            for t in [s.ground_truth(i), s.measurement(i)] {
                for v in t.data() {
                    h.update(v.to_le_bytes());
                }
            }
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn prepare(config: &ExperimentConfig) -> Result<Prepared> {
    let n = config.dataset.size;
    let operator = Arc::new(LinearOperator::<f64>::parse(&config.operator, n, n)?);
    let action = Arc::new(ImageAction::parse(&config.group, n, n)?);
    let noise = NoiseModel::parse(&config.noise, rng::substream(config.seed, 0x11))?;
    let (train, val, test) = dataset_images(config)?;
    let reseed = |label| NoiseModel::parse(&config.noise, rng::substream(config.seed, label));
    let train = SupervisedSet::simulate(operator.clone(), train, noise, Split::Train)?;
    let validation = if val.is_empty() {
        None
    } else {
        Some(SupervisedSet::simulate(operator.clone(), val, reseed(0x13)?, Split::Test)?)
    };
    let test = SupervisedSet::simulate(operator.clone(), test, reseed(0x12)?, Split::Test)?;
    let mut sets = vec![&train, &test];
    sets.extend(validation.as_ref());
    let dataset_hash = hash_sets(&sets);
    Ok(Prepared {
        operator,
        action,
        train,
        validation,
        test,
        noise,
        dataset_hash,
    })
}

pub const LOSS_GRAMMAR: &str = "supervised | supervised-da | mc | ei";

/// Loss spec for a loss kind name, using the config's group and weights.
pub fn loss_spec(config: &ExperimentConfig, kind: &str, prepared: &Prepared) -> Result<LossSpec> {
    let mut spec = match kind {
        "supervised" => LossSpec::supervised(),
        "supervised-da" => LossSpec::supervised_da(prepared.action.clone(), prepared.noise, config.loss.resample_noise),
        "mc" => LossSpec::measurement_consistency(),
        "ei" => {
            let mut s = LossSpec::equivariant_imaging(prepared.action.clone(), config.loss.alpha)?;
            if let LossKind::EquivariantImaging { sampling, region, .. } = &mut s.kind {
                *sampling = match config.loss.samples {
                    0 => GroupSampling::Full,
                    k => GroupSampling::Random(k),
                };
                *region = CompareRegion::parse(&config.loss.region, &prepared.action)?;
            }
            s
        }
        _ => {
            return Err(Error::Spec {
                spec: kind.to_string(),
                reason: "unknown loss kind".into(),
                grammar: LOSS_GRAMMAR,
            })
        }
    };
    spec.l1 = config.loss.l1;
    Ok(spec)
}

pub fn train_config(config: &ExperimentConfig) -> Result<TrainConfig> {
    let optimizer = match config.train.optimizer.as_str() {
        "adam" => OptimizerKind::adam(),
        "sgd" => OptimizerKind::Sgd,
        other => {
            return Err(Error::Spec {
                spec: other.to_string(),
                reason: "unknown optimizer".into(),
                grammar: "adam | sgd",
            })
        }
    };
    if config.train.select_best && config.dataset.val_count == 0 {
        return Err(Error::InvalidArgument(
            "train.select_best needs a validation split (dataset.val_count > 0)".into(),
        ));
    }
    Ok(TrainConfig {
        epochs: config.train.epochs,
        batch_size: config.train.batch_size,
        lr: config.train.lr,
        optimizer,
        seed: config.seed,
        eval_every: config.train.eval_every,
        select_best: config.train.select_best,
    })
}

pub fn build_model(config: &ExperimentConfig) -> Result<ReconstructionModel<f64>> {
    let n = config.dataset.size;
    ReconstructionModel::new(ModelSpec::parse(&config.model)?, n, n, config.seed)
}

/// Identifiability report for the config's operator and group, with the
/// probe grid size when the full grid was too large to analyze.
pub fn stack_report(operator: &str, group: &str, size: usize) -> Result<(StackReport, Option<usize>)> {
    let fits = |op: &LinearOperator<f64>, act: &ImageAction| {
        op.n() <= EXPLICIT_CAP && op.m().saturating_mul(act.order()).saturating_mul(op.n()) <= STACK_ENTRY_CAP
    };
    let op = LinearOperator::<f64>::parse(operator, size, size)?;
    let act = ImageAction::parse(group, size, size)?;
    if fits(&op, &act) {
        return Ok((analyze_pair(&op, &act)?, None));
    }
    for s in (4..size).rev() {
        let spec = resize_spec(operator, size, s);
        let (Ok(op), Ok(act)) = (LinearOperator::<f64>::parse(&spec, s, s), ImageAction::parse(group, s, s)) else {
            continue;
        };
        if fits(&op, &act) {
            return Ok((analyze_pair(&op, &act)?, Some(s)));
        }
    }
    Err(Error::SizeCap {
        size: op.n(),
        cap: EXPLICIT_CAP,
    })
}

fn resize_spec(spec: &str, from: usize, to: usize) -> String {
    spec.split(':')
        .map(|p| if p == format!("size={from}") { format!("size={to}") } else { p.to_string() })
        .collect::<Vec<_>>()
        .join(":")
}

/// Result of one training leg.
#[derive(Clone, Debug)]
pub struct LegResult {
    pub method: String,
    pub loss: String,
    pub model: ReconstructionModel<f64>,
    pub history: Vec<EpochMetrics>,
    pub best_epoch: usize,
    pub test_psnr: f64,
}

/// Trains one method on prepared data. Measurement-only losses only ever
/// see the measurements.
pub fn run_leg(config: &ExperimentConfig, prepared: &Prepared, kind: &str) -> Result<LegResult> {
    let spec = loss_spec(config, kind, prepared)?;
    let tc = train_config(config)?;
    let model = build_model(config)?;
    let dataset = if spec.needs_ground_truth() {
        Dataset::Supervised(prepared.train.clone())
    } else {
        Dataset::Unsupervised(prepared.train.measurements_only())
    };
    let out = training::train_with_validation(
        &model,
        &dataset,
        Some(&prepared.test),
        prepared.validation.as_ref(),
        &spec,
        &tc,
    )?;
    let test_psnr = training::evaluate_model(&out.model, &prepared.test)?;
    Ok(LegResult {
        method: kind.to_string(),
        loss: spec.to_string(),
        model: out.model,
        history: out.history,
        best_epoch: out.best_epoch,
        test_psnr,
    })
}

/// Summary of a finished experiment.
#[derive(Clone, Debug)]
pub struct RunResult {
    pub leg: LegResult,
    pub pinv_psnr: f64,
    pub report: StackReport,
    pub probe_size: Option<usize>,
    pub dataset_hash: String,
    pub warnings: Vec<String>,
    pub output: PathBuf,
}

fn metric_row(method: &str, epoch: usize, train_loss: Option<f64>, psnr: Option<f64>, verdict: &str) -> String {
    format!(
        "{method},{epoch},{},{},{verdict}",
        train_loss.map(|v| v.to_string()).unwrap_or_default(),
        psnr.map(format_psnr).unwrap_or_default()
    )
}

fn report_text(config: &ExperimentConfig, report: &StackReport, probe: Option<usize>) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "identifiability of {} under {}", config.operator, config.group);
    if let Some(s) = probe {
        let _ = writeln!(
            out,
            "(analyzed on a {s}x{s} probe grid; the {0}x{0} stack exceeds the dense size cap)",
            config.dataset.size
        );
    }
    let _ = write!(out, "{report}");
    out
}

/// Writes truth | A^+ y | reconstruction panels for the first test items.
pub fn write_panels(
    dir: &Path,
    format: ImageFormat,
    count: usize,
    prepared: &Prepared,
    methods: &[(&str, &ReconstructionModel<f64>)],
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let test = &prepared.test;
    for i in 0..count.min(test.len()) {
        let truth = test.ground_truth(i).clone();
        let y = test.measurement(i);
        let mut columns = vec![("truth".to_string(), truth.clone(), None)];
        let pinv = prepared.operator.pseudo_inverse(y)?;
        let p = training::psnr(&truth, &pinv, 1.0)?;
        columns.push(("pinv".to_string(), pinv, Some(p)));
        for (name, model) in methods {
            let u = model.reconstruct(&prepared.operator, y)?;
            let p = training::psnr(&truth, &u, 1.0)?;
            columns.push((name.to_string(), u, Some(p)));
        }
        let (h, w) = (truth.shape()[1], truth.shape()[2]);
        let k = columns.len();
        let mut panel = vec![0.0; h * w * k];
        for (j, (_, img, _)) in columns.iter().enumerate() {
            for r in 0..h {
                for c in 0..w {
                    panel[r * w * k + j * w + c] = img.data()[r * w + c];
                }
            }
        }
        let mut notes = vec![("columns", columns.iter().map(|c| c.0.clone()).collect::<Vec<_>>().join(","))];
        let names: Vec<String> = columns.iter().map(|c| format!("psnr_db_{}", c.0)).collect();
        for (name, c) in names.iter().zip(&columns) {
            if let Some(p) = c.2 {
                notes.push((name.as_str(), format_psnr(p)));
            }
        }
        let path = dir.join(format!("test_{i:03}.{}", format.extension()));
        write_image(&path, &Tensor::new(vec![1, h, w * k], panel)?, Window::unit(), &notes)?;
    }
    Ok(())
}

/// Trains the config's loss and writes metrics, panels, checkpoint,
/// resolved config and the identifiability report to `config.output`.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunResult> {
    let format = ImageFormat::parse(&config.image_format)?;
    let prepared = prepare(config)?;
    let (report, probe_size) = stack_report(&config.operator, &config.group, config.dataset.size)?;
    let leg = run_leg(config, &prepared, &config.loss.kind)?;
    let pinv_psnr = training::evaluate_pinv(&prepared.test)?;
    let mut warnings = Vec::new();
    if config.loss.kind == "ei" {
        warnings.extend(report.warning());
    }
    let out = &config.output;
    fs::create_dir_all(out)?;
    fs::write(out.join("config.ini"), config.dump())?;
    fs::write(out.join("metrics.csv"), history_csv(&leg.history))?;
    let verdict = report.verdict();
    let last = leg.history.last();
    let summary = format!(
        "{METRICS_HEADER}\n{}\n{}\n",
        metric_row("pinv", 0, None, Some(pinv_psnr), verdict),
        metric_row(
            &leg.method,
            leg.best_epoch,
            last.map(|h| h.train_loss),
            Some(leg.test_psnr),
            verdict
        )
    );
    fs::write(out.join("summary.csv"), summary)?;
    save_checkpoint(out.join("model.ckpt"), &leg.model)?;
    let mut text = String::new();
    for w in &warnings {
        let _ = writeln!(text, "{w}\n");
    }
    let _ = writeln!(text, "experiment {}", config.name);
    let _ = writeln!(text, "loss {}", leg.loss);
    let _ = writeln!(text, "dataset sha256 {}", prepared.dataset_hash);
    let _ = writeln!(text, "test PSNR (A^+ y) {} dB", format_psnr(pinv_psnr));
    let _ = writeln!(
        text,
        "test PSNR ({}) {} dB at epoch {}\n",
        leg.method,
        format_psnr(leg.test_psnr),
        leg.best_epoch
    );
    text.push_str(&report_text(config, &report, probe_size));
    fs::write(out.join("report.txt"), text)?;
    fs::write(
        out.join("stack_report.csv"),
        format!("{}\n{}\n", StackReport::CSV_HEADER, report.csv_row()),
    )?;
    write_panels(&out.join("images"), format, config.images, &prepared, &[(leg.method.as_str(), &leg.model)])?;
    Ok(RunResult {
        leg,
        pinv_psnr,
        report,
        probe_size,
        dataset_hash: prepared.dataset_hash,
        warnings,
        output: out.clone(),
    })
}

/// Result of [`compare`].
#[derive(Clone, Debug)]
pub struct CompareResult {
    pub legs: Vec<LegResult>,
    pub pinv_psnr: f64,
    pub report: StackReport,
    pub dataset_hash: String,
    /// Contents of `compare.csv`.
    pub csv: String,
}

/// Trains every method on the same data; legs run on `jobs` threads.
pub fn compare(config: &ExperimentConfig, methods: &[String], jobs: usize) -> Result<CompareResult> {
    let format = ImageFormat::parse(&config.image_format)?;
    let prepared = prepare(config)?;
    let (report, probe_size) = stack_report(&config.operator, &config.group, config.dataset.size)?;
    let pinv_psnr = training::evaluate_pinv(&prepared.test)?;
    let legs: Vec<LegResult> = if jobs <= 1 {
        methods.iter().map(|m| run_leg(config, &prepared, m)).collect::<Result<_>>()?
    } else {
        let mut results: Vec<Option<Result<LegResult>>> = methods.iter().map(|_| None).collect();
        for (chunk_methods, chunk_slots) in methods.chunks(jobs).zip(results.chunks_mut(jobs)) {
            std::thread::scope(|s| {
                let handles: Vec<_> = chunk_methods
                    .iter()
                    .map(|m| s.spawn(|| run_leg(config, &prepared, m)))
                    .collect();
                for (slot, h) in chunk_slots.iter_mut().zip(handles) {
                    *slot = Some(h.join().expect("training thread panicked"));
                }
            });
        }
        results.into_iter().map(|r| r.expect("every leg ran")).collect::<Result<_>>()?
    };
    let verdict = report.verdict();
    let hash = &prepared.dataset_hash;
    let mut csv = format!("{COMPARE_HEADER}\n{},{hash}\n", metric_row("pinv", 0, None, Some(pinv_psnr), verdict));
    let mut history = format!("{METRICS_HEADER}\n");
    for leg in &legs {
        let loss = leg.history.last().map(|h| h.train_loss);
        let _ = writeln!(
            csv,
            "{},{hash}",
            metric_row(&leg.method, leg.best_epoch, loss, Some(leg.test_psnr), verdict)
        );
        for h in &leg.history {
            let _ = writeln!(
                history,
                "{}",
                metric_row(&leg.method, h.epoch, Some(h.train_loss), h.test_psnr_db, verdict)
            );
        }
    }
    let out = &config.output;
    fs::create_dir_all(out)?;
    fs::write(out.join("config.ini"), config.dump())?;
    fs::write(out.join("compare.csv"), &csv)?;
    fs::write(out.join("compare_history.csv"), history)?;
    let mut text = String::new();
    if methods.iter().any(|m| m == "ei") {
        if let Some(w) = report.warning() {
            let _ = writeln!(text, "{w}\n");
        }
    }
    text.push_str(&report_text(config, &report, probe_size));
    fs::write(out.join("report.txt"), text)?;
    for leg in &legs {
        save_checkpoint(out.join(format!("model_{}.ckpt", leg.method)), &leg.model)?;
    }
    let named: Vec<(&str, &ReconstructionModel<f64>)> = legs.iter().map(|l| (l.method.as_str(), &l.model)).collect();
    write_panels(&out.join("images"), format, config.images, &prepared, &named)?;
    Ok(CompareResult {
        legs,
        pinv_psnr,
        report,
        dataset_hash: prepared.dataset_hash,
        csv,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn probe_grid_for_large_stacks() {
        let (r, probe) = stack_report("inpaint:p=0.5:seed=1", "c4+shifts", 32).unwrap();
        let s = probe.unwrap();
        assert!(s < 32 && r.n == s * s);
        let (_, none) = stack_report("inpaint:p=0.5:seed=1", "c4", 8).unwrap();
        assert!(none.is_none());
        assert_eq!(resize_spec("radon:views=4:size=16", 16, 8), "radon:views=4:size=8");
    }
}
