//! Subcommand bodies. Each takes plain arguments and returns a typed
//! outcome so the integration tests drive the same code as the binary.
//!
//! A run directory looks like
//!
//! ```text
//! config.toml        copy of the effective configuration
//! run.json           dataset hash, model checksum, config fingerprint
//! train_log.jsonl    one line per optimizer step
//! checkpoints/       epoch-NNNNN/{patch.png, patch.json, optimizer.json}
//! patch.png          final patch (+ patch.json)
//! eval_report.json   per-scene records and aggregates
//! ```

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use depthpatch_core::attack::{
    initial_state, prepare_samples, run_attack, AttackConfig, AttackObserver, RunState, SceneSample,
    StepRecord,
};
use depthpatch_core::experiment::{
    ExperimentKind, ExperimentSpec, ExperimentTable, TableHeader, TableRow,
};
use depthpatch_core::metrics::{
    aggregate, evaluate_scene, EvalAggregate, EvalConfig, EvalRecord, EvalReport, EvalTransforms,
};
use depthpatch_core::model::{
    generate_corpus, train_toy_model, SceneParams, SyntheticScene, ToyTrainConfig,
};
use depthpatch_core::pipeline::{apply_patch, TransformSample};
use depthpatch_core::{DepthModel, DetectorConfig, Patch};

use crate::checkpoint::{latest_checkpoint, manifest_for, save_checkpoint};
use crate::config::{save_config, RunConfig};
use crate::dataset::{
    load_dataset, load_disparities, split_dir, write_annotations, AnnotationRow, Split,
};
use crate::error::{AppError, AppResult};
use crate::io::{read_json, save_patch, write_disparity, write_image, write_json};
use crate::kitti::convert_label_dir;
use crate::model_store::{load_toy_model, save_toy_model, ModelManifest};
use crate::plot;

pub const LOG: &str = "train_log.jsonl";
pub const EVAL_REPORT: &str = "eval_report.json";
pub const TABLE_JSON: &str = "table.json";

// ---------------------------------------------------------------- scenes

/// Render a synthetic corpus into the dataset layout: `train/` gets the
/// first `train` scenes, `test/` the remaining `test`.
pub fn gen_scenes(out: &Path, train: usize, test: usize, seed: u64, params: &SceneParams) -> AppResult<()> {
    if train == 0 {
        return Err(AppError::Config("need at least one training scene".into()));
    }
    params.validate()?;
    let scenes = generate_corpus(seed, train + test, params)?;
    for (split, range) in [(Split::Train, 0..train), (Split::Test, train..train + test)] {
        if range.is_empty() {
            continue;
        }
        let dir = split_dir(out, split);
        for sub in ["images", "disparity"] {
            let p = dir.join(sub);
            fs::create_dir_all(&p).map_err(|e| AppError::io(&p, e))?;
        }
        let mut rows = Vec::new();
        for (i, scene) in scenes[range].iter().enumerate() {
            let id = format!("{i:06}");
            write_image(&dir.join("images").join(format!("{id}.png")), &scene.image)?;
            write_disparity(&dir.join("disparity").join(format!("{id}.png")), &scene.true_disparity, None)?;
            rows.extend(scene.objects.iter().map(|o| AnnotationRow::from_box(&id, &o.bbox)));
        }
        write_annotations(&dir.join("annotations.json"), &rows)?;
    }
    Ok(())
}

/// Fit the toy network to the ground-truth disparities of the train split.
pub fn train_model(dataset: &Path, out: &Path, cfg: &ToyTrainConfig) -> AppResult<ModelManifest> {
    let data = load_dataset(dataset, Split::Train, &DetectorConfig::default())?;
    let disparities = load_disparities(&data.manifest)?;
    let corpus: Vec<SyntheticScene> = data
        .items
        .into_iter()
        .zip(disparities)
        .map(|((image, _), true_disparity)| SyntheticScene {
            image,
            true_disparity,
            objects: Vec::new(),
            horizon: 0.0,
        })
        .collect();
    let (model, report) = train_toy_model(&corpus, cfg, |e, l| {
        log::info!("model epoch {}/{}: mse {l:.6}", e + 1, cfg.epochs)
    })
    .map_err(AppError::training)?;
    fs::create_dir_all(out).map_err(|e| AppError::io(out, e))?;
    save_toy_model(out, &model, Some(report))?;
    Ok(load_toy_model(out)?.1)
}

// ---------------------------------------------------------------- samples

/// Detections, clean predictions and targets for one split.
pub struct Prepared {
    pub samples: Vec<SceneSample>,
    pub dataset_hash: String,
}

pub fn prepare(
    model: &dyn DepthModel,
    dataset: &Path,
    split: Split,
    attack: &AttackConfig,
    detector: &DetectorConfig,
) -> AppResult<Prepared> {
    let data = load_dataset(dataset, split, detector)?;
    let samples = prepare_samples(
        model,
        data.items,
        attack.target_class,
        attack.target_mode,
        attack.resize,
    )?;
    Ok(Prepared {
        samples,
        dataset_hash: data.manifest.content_hash,
    })
}

/// The split to evaluate on: `test` when the dataset has one.
pub fn eval_split(dataset: &Path) -> Split {
    if split_dir(dataset, Split::Test).join("annotations.json").is_file() {
        Split::Test
    } else {
        Split::Train
    }
}

// ---------------------------------------------------------------- evaluation

/// Evaluate on `workers` threads; records keep scene order.
pub fn evaluate_parallel(
    patch: &Patch,
    samples: &[SceneSample],
    model: &dyn DepthModel,
    cfg: &EvalConfig,
    workers: usize,
) -> AppResult<EvalReport> {
    if !(cfg.patch_scale_factor > 0.0 && cfg.patch_scale_factor < 1.0) {
        return Err(AppError::Config(format!(
            "patch_scale_factor must be in (0, 1), got {}",
            cfg.patch_scale_factor
        )));
    }
    let workers = workers.clamp(1, samples.len().max(1));
    let chunk = samples.len().div_ceil(workers).max(1);
    let results: Vec<depthpatch_core::Result<Vec<Option<EvalRecord>>>> = std::thread::scope(|s| {
        let handles: Vec<_> = samples
            .chunks(chunk)
            .enumerate()
            .map(|(k, part)| {
                s.spawn(move || {
                    part.iter()
                        .enumerate()
                        .map(|(i, sample)| evaluate_scene(patch, sample, k * chunk + i, model, cfg))
                        .collect()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("evaluation worker panicked")).collect()
    });
    let mut records = Vec::new();
    let mut skipped = Vec::new();
    for (r, sample) in results
        .into_iter()
        .collect::<depthpatch_core::Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .zip(samples)
    {
        match r {
            Some(r) => records.push(r),
            None => skipped.push(sample.image_id.clone()),
        }
    }
    let aggregate = aggregate(&records)?;
    Ok(EvalReport {
        records,
        aggregate,
        skipped,
    })
}

/// What `eval_report.json` holds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalFile {
    pub dataset_hash: String,
    pub split: Split,
    pub model_checksum: String,
    pub config: EvalConfig,
    /// The untrained patch of the same run under the same placement.
    pub random_patch: Option<EvalAggregate>,
    #[serde(flatten)]
    pub report: EvalReport,
}

pub fn write_csv(path: &Path, records: &[EvalRecord]) -> AppResult<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in records {
        w.serialize(r).map_err(|e| AppError::io(path, e))?;
    }
    let bytes = w.into_inner().map_err(|e| AppError::io(path, e))?;
    crate::io::write_atomic(path, &bytes)
}

/// Before/after image grid for the first `n` evaluable scenes.
pub fn example_grid(
    path: &Path,
    patch: &Patch,
    samples: &[SceneSample],
    model: &dyn DepthModel,
    cfg: &EvalConfig,
    n: usize,
) -> AppResult<()> {
    let mut adv = Vec::new();
    for s in samples.iter().filter(|s| !s.boxes.is_empty()).take(n) {
        let t: Vec<TransformSample> = s.boxes.iter().map(|_| TransformSample::identity()).collect();
        let ex = apply_patch(&s.image, patch, &s.boxes, &t, cfg.patch_scale_factor)?;
        let d = depthpatch_core::model::forward_with(model, &ex.image, cfg.resize)?;
        adv.push((s, ex.image, d));
    }
    let rows: Vec<plot::GridRow> = adv
        .iter()
        .map(|(s, im, d)| plot::GridRow {
            clean_image: &s.image,
            clean: &s.clean,
            adv_image: im,
            adv: d,
        })
        .collect();
    plot::disparity_grid(path, &rows)
}

pub struct EvaluateArgs<'a> {
    pub patch: &'a Path,
    pub model: &'a Path,
    pub dataset: &'a Path,
    pub split: Option<Split>,
    pub report: &'a Path,
    pub csv: Option<&'a Path>,
    pub examples: Option<(&'a Path, usize)>,
    pub workers: usize,
    pub eval: EvalConfig,
    pub target_class: u32,
    pub detector: DetectorConfig,
}

pub fn evaluate(args: &EvaluateArgs) -> AppResult<EvalFile> {
    let patch = crate::io::load_patch_lenient(args.patch)?;
    let (model, _) = load_toy_model(args.model)?;
    let split = args.split.unwrap_or_else(|| eval_split(args.dataset));
    let attack = AttackConfig {
        target_class: args.target_class,
        resize: args.eval.resize,
        ..Default::default()
    };
    let prep = prepare(&model, args.dataset, split, &attack, &args.detector)?;
    let report = evaluate_parallel(&patch, &prep.samples, &model, &args.eval, args.workers)?;
    let file = EvalFile {
        dataset_hash: prep.dataset_hash,
        split,
        model_checksum: model.parameter_checksum(),
        config: args.eval.clone(),
        random_patch: None,
        report,
    };
    write_json(args.report, &file)?;
    if let Some(csv) = args.csv {
        write_csv(csv, &file.report.records)?;
    }
    if let Some((path, n)) = args.examples {
        example_grid(path, &patch, &prep.samples, &model, &args.eval, n)?;
    }
    Ok(file)
}

// ---------------------------------------------------------------- training

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub dataset_hash: String,
    pub model_checksum: String,
    pub config_hash: String,
    pub seed: u64,
}

#[derive(Serialize)]
struct LogLine<'a> {
    ts: f64,
    #[serde(flatten)]
    record: &'a StepRecord,
}

fn now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0.0, |d| d.as_secs_f64())
}

/// Streams the step log and writes periodic checkpoints.
struct RunObserver {
    dir: PathBuf,
    log: BufWriter<File>,
    every: usize,
    epochs: usize,
    error: Option<AppError>,
}

impl RunObserver {
    /// Open the log, dropping lines past `keep_steps` (left over from an
    /// interrupted run).
    fn open(dir: &Path, keep_steps: u64, every: usize, epochs: usize) -> AppResult<Self> {
        let path = dir.join(LOG);
        let mut kept = Vec::new();
        if keep_steps > 0 && path.is_file() {
            let f = File::open(&path).map_err(|e| AppError::io(&path, e))?;
            for line in BufReader::new(f).lines() {
                let line = line.map_err(|e| AppError::io(&path, e))?;
                let step = serde_json::from_str::<serde_json::Value>(&line)
                    .ok()
                    .and_then(|v| v.get("step").and_then(|s| s.as_u64()));
                if matches!(step, Some(s) if s < keep_steps) {
                    kept.push(line);
                }
            }
        }
        let mut log = BufWriter::new(File::create(&path).map_err(|e| AppError::io(&path, e))?);
        for line in kept {
            writeln!(log, "{line}").map_err(|e| AppError::io(&path, e))?;
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            log,
            every,
            epochs,
            error: None,
        })
    }
}

impl AttackObserver for RunObserver {
    fn on_step(&mut self, record: &StepRecord) {
        let line = serde_json::to_string(&LogLine { ts: now(), record }).expect("serializable record");
        if let Err(e) = writeln!(self.log, "{line}") {
            self.error.get_or_insert(AppError::io(&self.dir.join(LOG), e));
        }
    }

    fn on_epoch(&mut self, state: &RunState) -> depthpatch_core::Result<bool> {
        if let Err(e) = self.log.flush() {
            self.error.get_or_insert(AppError::io(&self.dir.join(LOG), e));
        }
        let epoch = state.patch.epoch;
        if self.every > 0 && (epoch % self.every == 0 || epoch == self.epochs) {
            if let Err(e) = save_checkpoint(&self.dir, state) {
                self.error.get_or_insert(e);
            }
        }
        Ok(self.error.is_none())
    }
}

pub struct TrainOutcome {
    pub state: RunState,
    pub eval: EvalFile,
    pub resumed_from: Option<usize>,
}

/// Train a patch into `out`, continuing from its latest checkpoint if any.
pub fn train_patch(cfg: &RunConfig, model_dir: &Path, dataset: &Path, out: &Path) -> AppResult<TrainOutcome> {
    cfg.validate()?;
    let (model, _) = load_toy_model(model_dir)?;
    let prep = prepare(&model, dataset, Split::Train, &cfg.attack, &cfg.detector)?;
    fs::create_dir_all(out).map_err(|e| AppError::io(out, e))?;

    let info = RunInfo {
        dataset_hash: prep.dataset_hash.clone(),
        model_checksum: model.parameter_checksum(),
        config_hash: cfg.attack.fingerprint(),
        seed: cfg.attack.seed,
    };
    let info_path = out.join("run.json");
    let resume = latest_checkpoint(out)?;
    if resume.is_some() && info_path.is_file() {
        let old: RunInfo = read_json(&info_path)?;
        if old != info {
            return Err(AppError::Config(format!(
                "{} belongs to a run with a different dataset, model or configuration",
                out.display()
            )));
        }
    }
    save_config(&out.join("config.toml"), cfg)?;
    write_json(&info_path, &info)?;

    let resumed_from = resume.as_ref().map(|s| s.patch.epoch);
    if let Some(e) = resumed_from {
        log::info!("resuming {} from epoch {e}", out.display());
    }
    let keep = resume.as_ref().map_or(0, |s| s.patch.step);
    let mut obs = RunObserver::open(out, keep, cfg.checkpoint_every, cfg.attack.epochs)?;
    let result = run_attack(&prep.samples, &model, &cfg.attack, resume, &mut obs);
    let _ = obs.log.flush();
    if let Some(e) = obs.error.take() {
        return Err(e);
    }
    let state = result.map_err(AppError::training)?;
    save_patch(&out.join("patch.png"), &state.patch.patch, manifest_for(&state.patch))?;

    let split = eval_split(dataset);
    let eval_samples = if split == Split::Train {
        prep.samples
    } else {
        prepare(&model, dataset, split, &cfg.attack, &cfg.detector)?.samples
    };
    let eval_cfg = EvalConfig {
        patch_scale_factor: cfg.attack.patch_scale_factor,
        transforms: cfg.eval_transforms(),
        resize: cfg.attack.resize,
        ..Default::default()
    };
    let report = evaluate_parallel(&state.patch.patch, &eval_samples, &model, &eval_cfg, 1)?;
    let random = initial_state(&cfg.attack)?.patch;
    let baseline = evaluate_parallel(&random, &eval_samples, &model, &eval_cfg, 1)?;
    let eval = EvalFile {
        dataset_hash: info.dataset_hash,
        split,
        model_checksum: info.model_checksum,
        config: eval_cfg,
        random_patch: Some(baseline.aggregate),
        report,
    };
    write_json(&out.join(EVAL_REPORT), &eval)?;
    Ok(TrainOutcome {
        state,
        eval,
        resumed_from,
    })
}

// ---------------------------------------------------------------- experiments

fn slug(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' { c } else { '-' })
        .collect()
}

/// Train one variant in its own directory and evaluate it with identity
/// placement on `eval_samples`.
pub fn run_variant_dir(
    name: &str,
    cfg: &AttackConfig,
    samples: &[SceneSample],
    eval_samples: &[SceneSample],
    model: &dyn DepthModel,
    dir: &Path,
) -> AppResult<TableRow> {
    fs::create_dir_all(dir).map_err(|e| AppError::io(dir, e))?;
    let run_cfg = RunConfig {
        attack: cfg.clone(),
        checkpoint_every: 0,
        ..Default::default()
    };
    save_config(&dir.join("config.toml"), &run_cfg)?;
    let mut obs = RunObserver::open(dir, 0, 0, cfg.epochs)?;
    let result = run_attack(samples, model, cfg, None, &mut obs);
    let _ = obs.log.flush();
    if let Some(e) = obs.error.take() {
        return Err(e);
    }
    let state = result.map_err(AppError::training)?;
    save_patch(&dir.join("patch.png"), &state.patch.patch, manifest_for(&state.patch))?;
    let eval = EvalConfig {
        patch_scale_factor: cfg.patch_scale_factor,
        transforms: EvalTransforms::Identity,
        resize: cfg.resize,
        ..Default::default()
    };
    let report = evaluate_parallel(&state.patch.patch, eval_samples, model, &eval, 1)?;
    write_json(&dir.join(EVAL_REPORT), &report)?;
    log::info!(
        "{name}: E_d {:.4} R_a {:.4}",
        report.aggregate.e_d,
        report.aggregate.r_a
    );
    Ok(TableRow {
        name: name.into(),
        patch_scale_factor: cfg.patch_scale_factor,
        e_d: report.aggregate.e_d,
        r_a: report.aggregate.r_a,
        mse: report.aggregate.mse,
        final_loss: state.history.last().map_or(f64::NAN, |h| h.losses.l_total),
    })
}

/// Run every variant of `spec` (on up to `workers` threads) and write
/// `table.md` / `table.json` under `out`. The table is written even when a
/// variant fails; the failure is then returned as a training error.
pub fn run_experiment_dir(
    spec: &ExperimentSpec,
    samples: &[SceneSample],
    eval_samples: &[SceneSample],
    model: &dyn DepthModel,
    dataset_hash: &str,
    out: &Path,
    workers: usize,
) -> AppResult<ExperimentTable> {
    spec.validate()?;
    let variants = spec.resolved();
    let results: Vec<Mutex<Option<AppResult<TableRow>>>> = variants.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let failed = AtomicUsize::new(usize::MAX);
    let work = || loop {
        let i = next.fetch_add(1, Ordering::SeqCst);
        // Sequential semantics: nothing after a failed variant starts.
        if i >= variants.len() || i > failed.load(Ordering::SeqCst) {
            break;
        }
        let (name, cfg) = &variants[i];
        let r = run_variant_dir(name, cfg, samples, eval_samples, model, &out.join(slug(name)));
        if r.is_err() {
            failed.fetch_min(i, Ordering::SeqCst);
        }
        *results[i].lock().expect("result slot") = Some(r);
    };
    let workers = workers.clamp(1, variants.len().max(1));
    if workers == 1 {
        work();
    } else {
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(&work);
            }
        });
    }

    let mut rows = Vec::new();
    for ((name, _), slot) in variants.iter().zip(results) {
        match slot.into_inner().expect("result slot") {
            Some(r) => rows.push((name.clone(), r.map_err(|e| depthpatch_core::Error::Config(e.to_string())))),
            None => break,
        }
    }
    let first_error = rows.iter().find_map(|(n, r)| r.as_ref().err().map(|e| format!("{n}: {e}")));
    let table = ExperimentTable::assemble(
        spec.kind,
        TableHeader {
            dataset_hash: dataset_hash.into(),
            seed: spec.base.seed,
            model_checksum: model.parameter_checksum(),
        },
        rows,
    );
    write_json(&out.join(TABLE_JSON), &table)?;
    crate::io::write_atomic(&out.join("table.md"), table.to_markdown().as_bytes())?;
    match first_error {
        Some(e) => Err(AppError::Training(format!("variant {e}"))),
        None => Ok(table),
    }
}

pub struct ExperimentArgs<'a> {
    pub kind: ExperimentKind,
    pub config: RunConfig,
    pub scales: Vec<f64>,
    pub model: &'a Path,
    pub dataset: &'a Path,
    pub out: &'a Path,
    pub workers: usize,
}

pub fn experiment(args: &ExperimentArgs) -> AppResult<ExperimentTable> {
    args.config.validate()?;
    let base = args.config.attack.clone();
    let spec = match args.kind {
        ExperimentKind::Ablation => ExperimentSpec::ablation(base),
        ExperimentKind::ScaleSweep => ExperimentSpec::scale_sweep(base, &args.scales),
    };
    spec.validate()?;
    let (model, _) = load_toy_model(args.model)?;
    let prep = prepare(&model, args.dataset, Split::Train, &args.config.attack, &args.config.detector)?;
    let split = eval_split(args.dataset);
    let eval = if split == Split::Train {
        None
    } else {
        Some(prepare(&model, args.dataset, split, &args.config.attack, &args.config.detector)?.samples)
    };
    fs::create_dir_all(args.out).map_err(|e| AppError::io(args.out, e))?;
    save_config(&args.out.join("config.toml"), &args.config)?;
    run_experiment_dir(
        &spec,
        &prep.samples,
        eval.as_deref().unwrap_or(&prep.samples),
        &model,
        &prep.dataset_hash,
        args.out,
        args.workers,
    )
}

// ---------------------------------------------------------------- conversion

pub fn convert_annotations(
    labels: &Path,
    out: &Path,
    classes: &std::collections::BTreeMap<String, u32>,
) -> AppResult<crate::kitti::Conversion> {
    let conv = convert_label_dir(labels, classes)?;
    write_annotations(out, &conv.rows)?;
    for (kind, n) in &conv.skipped {
        log::info!("skipped {n} object(s) of type {kind}");
    }
    Ok(conv)
}

// ---------------------------------------------------------------- report

/// Per-epoch means of each loss term from a step log.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossCurves {
    pub l_total: Vec<f64>,
    pub l_d1: Vec<f64>,
    pub l_d2: Vec<f64>,
    pub l_tv: Vec<f64>,
}

pub fn loss_curves(log_path: &Path) -> AppResult<LossCurves> {
    let f = File::open(log_path).map_err(|e| AppError::io(log_path, e))?;
    let mut sums: Vec<([f64; 4], usize)> = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| AppError::io(log_path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: StepRecord = serde_json::from_str(&line)
            .map_err(|e| AppError::Data(format!("{}:{}: {e}", log_path.display(), n + 1)))?;
        if sums.len() <= r.epoch {
            sums.resize(r.epoch + 1, ([0.0; 4], 0));
        }
        let (s, c) = &mut sums[r.epoch];
        let l = r.losses;
        for (a, v) in s.iter_mut().zip([l.l_total, l.l_d1, l.l_d2, l.l_tv]) {
            *a += v;
        }
        *c += 1;
    }
    let mut out = LossCurves::default();
    for (s, c) in sums {
        let m = |i: usize| if c == 0 { f64::NAN } else { s[i] / c as f64 };
        out.l_total.push(m(0));
        out.l_d1.push(m(1));
        out.l_d2.push(m(2));
        out.l_tv.push(m(3));
    }
    Ok(out)
}

/// Summarize a run or experiment directory into `report.md`, plus PNG
/// charts when `plots` is set. Returns the files written.
pub fn report(dir: &Path, plots: bool) -> AppResult<Vec<PathBuf>> {
    let mut md = String::new();
    let mut written = Vec::new();
    let log_path = dir.join(LOG);
    if log_path.is_file() {
        let c = loss_curves(&log_path)?;
        if let (Some(first), Some(last)) = (c.l_total.first(), c.l_total.last()) {
            md.push_str(&format!(
                "## Training\n\n{} epochs, mean total loss {first:.6} -> {last:.6}\n\n",
                c.l_total.len()
            ));
        }
        if plots {
            // Each curve is scaled to its own first value so the terms share an axis.
            let rel = |v: &Vec<f64>| {
                let f = v.iter().copied().find(|x| x.is_finite() && *x != 0.0).unwrap_or(1.0);
                v.iter().map(|x| x / f).collect::<Vec<_>>()
            };
            let p = dir.join("loss_curve.png");
            plot::line_chart(&p, &[rel(&c.l_total), rel(&c.l_d1), rel(&c.l_d2), rel(&c.l_tv)])?;
            written.push(p);
        }
    }
    let eval_path = dir.join(EVAL_REPORT);
    if eval_path.is_file() {
        let v: serde_json::Value = read_json(&eval_path)?;
        let rep: EvalReport = serde_json::from_value(v.clone())
            .map_err(|e| AppError::Data(format!("{}: {e}", eval_path.display())))?;
        let a = rep.aggregate;
        md.push_str(&format!(
            "## Evaluation\n\n| scenes | E_d | R_a | MSE |\n|---|---|---|---|\n| {} | {:.4} | {:.4} | {:.5} |\n\n",
            a.scenes, a.e_d, a.r_a, a.mse
        ));
        if let Some(b) = v.get("random_patch").filter(|b| !b.is_null()) {
            if let Ok(b) = serde_json::from_value::<EvalAggregate>(b.clone()) {
                md.push_str(&format!(
                    "Untrained patch: E_d {:.4}, R_a {:.4} (trained/untrained E_d {:.2})\n\n",
                    b.e_d,
                    b.r_a,
                    a.e_d / b.e_d
                ));
            }
        }
        if plots {
            for (name, vals) in [
                ("e_d_hist.png", rep.records.iter().map(|r| r.e_d).collect::<Vec<_>>()),
                ("r_a_hist.png", rep.records.iter().map(|r| r.r_a).collect()),
            ] {
                let p = dir.join(name);
                plot::histogram(&p, &vals, 20, 0.0, 1.0)?;
                written.push(p);
            }
        }
    }
    let table_path = dir.join(TABLE_JSON);
    if table_path.is_file() {
        let t: ExperimentTable = read_json(&table_path)?;
        md.push_str(&t.to_markdown());
        if plots {
            let p = dir.join("table_bars.png");
            let groups: Vec<Vec<f64>> = t.rows.iter().map(|r| vec![r.e_d, r.r_a]).collect();
            plot::bar_chart(&p, &groups)?;
            written.push(p);
        }
    }
    if md.is_empty() {
        return Err(AppError::Data(format!(
            "{}: no {LOG}, {EVAL_REPORT} or {TABLE_JSON} to report on",
            dir.display()
        )));
    }
    let p = dir.join("report.md");
    crate::io::write_atomic(&p, md.as_bytes())?;
    written.push(p);
    Ok(written)
}

/// Models are directories; a bare name resolves under `models/`.
pub fn resolve_model(arg: &Path) -> PathBuf {
    if arg.join(crate::model_store::MANIFEST).is_file() || arg.components().count() > 1 {
        arg.to_path_buf()
    } else {
        Path::new("models").join(arg)
    }
}
