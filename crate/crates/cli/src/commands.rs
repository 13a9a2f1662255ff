use std::collections::BTreeSet;
use std::fs;
use std::io::{BufWriter, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};

use ndarray::{concatenate, Array2, Axis};
use serde::{Deserialize, Serialize};

use less_core::cloud::synth::generate_synthetic;
use less_core::cloud::{kitti, FusedCloud};
use less_core::labeling::{derive_labels, label_statistics, random_point_labels, simulate_annotation, LabelBundle, StatsReport};
use less_core::metrics::{ConfusionMatrix, MetricsReport};
use less_core::model::{
    self, compute_features, CheckpointSidecar, EvalSet, ToyModel, TrainFrame, NUM_FEATURES,
};
use less_core::pipeline::{
    candidate_rows, frame_labels, model_input, required_scans, sample_rows, FrameLabels, InputMode, LabelCounts,
    Sequence,
};
use less_core::preseg::{presegment, read_component_ids, read_result, write_ply, write_result};
use less_core::{stream_seed, ClassId};

use crate::config::{ClickPolicy, RunConfig};
use crate::CliError;

pub struct Context {
    pub config: RunConfig,
    pub model: Option<PathBuf>,
    pub teacher: Option<PathBuf>,
}

const MODEL_FORMAT: &str = "less-model/1";

fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    }
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Data(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| io_error(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| io_error(path, e))
}

/// Resolved configuration beside the outputs of `command`.
fn record_config(ctx: &Context, out: &Path, command: &str) -> Result<(), CliError> {
    write_json(&out.join(format!("{command}.config.json")), &ctx.config)
}

/// Windows pre-segmented by `preseg`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct WindowIndex {
    format: String,
    windows: Vec<WindowEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct WindowEntry {
    stem: String,
    start: usize,
    end: usize,
}

impl WindowEntry {
    fn range(&self) -> Range<usize> {
        self.start..self.end
    }
}

fn preseg_dir(out: &Path) -> PathBuf {
    out.join("preseg")
}

fn labels_dir(out: &Path, stem: &str) -> PathBuf {
    out.join("labels").join(stem)
}

fn read_index(out: &Path) -> Result<WindowIndex, CliError> {
    let path = preseg_dir(out).join("index.json");
    if !path.exists() {
        return Err(CliError::Usage(format!(
            "--out {}: no pre-segmentation found; run `less preseg` first",
            out.display()
        )));
    }
    read_json(&path)
}

/// Fused window with ground truth mapped to training classes.
fn window_cloud(ctx: &Context, seq: &Sequence, range: Range<usize>) -> Result<FusedCloud, CliError> {
    let mut cloud = seq.fuse(range)?;
    let map = ctx.config.data.labels;
    cloud.map_labels(|c| map.map(c));
    Ok(cloud)
}

fn ground_truth(cloud: &FusedCloud, what: &str) -> Result<Vec<ClassId>, CliError> {
    cloud
        .gt_label
        .clone()
        .ok_or_else(|| CliError::Data(format!("{what} needs ground-truth labels in the input sequence")))
}

pub fn synth(ctx: &Context) -> Result<(), CliError> {
    let out = ctx.config.output()?;
    let seq = generate_synthetic(&ctx.config.synth)?;
    seq.write(out)?;
    record_config(ctx, out, "synth")?;
    println!("{} scans, {} points", seq.scans.len(), seq.total_points());
    Ok(())
}

pub fn preseg(ctx: &Context) -> Result<(), CliError> {
    let input = ctx.config.input()?;
    let out = ctx.config.output()?;
    ctx.config.preseg.validate()?;
    let num_scans = kitti::list_scans(input)?.len();
    let windows = ctx.config.window.windows(num_scans)?;
    let dir = preseg_dir(out);
    let mut index = WindowIndex {
        format: "less-windows/1".into(),
        windows: Vec::new(),
    };
    let mut total = (0, 0);
    for w in windows {
        let seq = Sequence::load(input, w.clone())?;
        let cloud = seq.fuse(w.clone())?;
        let result = presegment(&cloud, &ctx.config.preseg)?;
        let stem = format!("w{:06}", w.start);
        write_result(&dir, &stem, &cloud, &result, &ctx.config.preseg)?;
        log::info!("{stem}: {} points, {} components", cloud.len(), result.components.len());
        total.0 += cloud.len();
        total.1 += result.components.len();
        index.windows.push(WindowEntry {
            stem,
            start: w.start,
            end: w.end,
        });
    }
    write_json(&dir.join("index.json"), &index)?;
    record_config(ctx, out, "preseg")?;
    println!("{} windows, {} points, {} components", index.windows.len(), total.0, total.1);
    Ok(())
}

pub fn label(ctx: &Context) -> Result<(), CliError> {
    let input = ctx.config.input()?;
    let out = ctx.config.output()?;
    let index = read_index(out)?;
    let num_classes = ctx.config.data.labels.num_classes();
    let (mut clicks, mut points) = (0, 0);
    for w in &index.windows {
        let seq = Sequence::load(input, w.range())?;
        let cloud = window_cloud(ctx, &seq, w.range())?;
        let gt = ground_truth(&cloud, "label")?;
        let (result, _) = read_result(&preseg_dir(out), &w.stem)?;
        if result.num_points != cloud.len() {
            return Err(CliError::Data(format!(
                "{}: pre-segmentation covers {} points, window has {}",
                w.stem,
                result.num_points,
                cloud.len()
            )));
        }
        let mut annotation = ctx.config.annotation.clone();
        annotation.rng_seed = stream_seed(annotation.rng_seed, w.start as u64);
        let component_clicks = simulate_annotation(&gt, &result.components, num_classes, &annotation)?;
        let bundle = match ctx.config.data.policy {
            ClickPolicy::Component => derive_labels(cloud.len(), &result.components, &component_clicks, num_classes)?,
            ClickPolicy::Random => {
                let random = random_point_labels(&gt, component_clicks.len(), stream_seed(annotation.rng_seed, 1));
                LabelBundle::sparse_only(cloud.len(), &random, num_classes)?
            }
        };
        bundle.write(&labels_dir(out, &w.stem))?;
        clicks += bundle.sparse.len();
        points += cloud.len();
    }
    record_config(ctx, out, "label")?;
    println!(
        "{clicks} clicks over {points} points ({:.4}%)",
        100.0 * clicks as f64 / points.max(1) as f64
    );
    Ok(())
}

pub fn stats(ctx: &Context) -> Result<(), CliError> {
    let input = ctx.config.input()?;
    let out = ctx.config.output()?;
    let index = read_index(out)?;
    let names = ctx.config.data.labels.class_names();
    let mut reports = Vec::new();
    for w in &index.windows {
        let seq = Sequence::load(input, w.range())?;
        let cloud = window_cloud(ctx, &seq, w.range())?;
        let gt = ground_truth(&cloud, "stats")?;
        let (result, _) = read_result(&preseg_dir(out), &w.stem)?;
        let bundle = LabelBundle::read(&labels_dir(out, &w.stem))?;
        reports.push(label_statistics(&bundle, &result.components, &gt, names)?);
    }
    let merged = StatsReport::merge(&reports).ok_or_else(|| CliError::Data("no windows to summarize".into()))?;
    let table = merged.to_table();
    write_json(&out.join("stats.json"), &merged)?;
    write_text(&out.join("stats.txt"), &table)?;
    record_config(ctx, out, "stats")?;
    print!("{table}");
    Ok(())
}

/// Candidate rows of every scan of every labeled window, with features for
/// each requested input mode.
struct TrainingData {
    features: Vec<Vec<Array2<f64>>>,
    labels: Vec<FrameLabels>,
    counts: LabelCounts,
}

fn training_data(ctx: &Context, modes: &[InputMode]) -> Result<TrainingData, CliError> {
    let cfg = &ctx.config;
    let input = cfg.input()?;
    let out = cfg.output()?;
    let index = read_index(out)?;
    let context = if modes.contains(&InputMode::Multi) {
        InputMode::Multi
    } else {
        InputMode::Single
    };
    let mut data = TrainingData {
        features: vec![Vec::new(); modes.len()],
        labels: Vec::new(),
        counts: LabelCounts::new(cfg.data.labels.num_classes()),
    };
    for w in &index.windows {
        let window = w.range();
        let seq = Sequence::load(input, required_scans(&window, context, &cfg.fusion))?;
        let bundle = LabelBundle::read(&labels_dir(out, &w.stem))?;
        let points = seq.offset_in_window(&window, window.end);
        if bundle.num_points() != points || bundle.num_classes != cfg.data.labels.num_classes() {
            return Err(CliError::Data(format!(
                "{}: labels cover {} points and {} classes, window has {points} points and the label map {} classes",
                w.stem,
                bundle.num_points(),
                bundle.num_classes,
                cfg.data.labels.num_classes()
            )));
        }
        let clicked: BTreeSet<u32> = bundle.sparse.iter().map(|&(p, _)| p).collect();
        for k in window.clone() {
            let (rows, fused) =
                candidate_rows(&seq, &window, k, &clicked, cfg.data.dense_samples, stream_seed(cfg.train.seed, k as u64));
            data.labels.push(frame_labels(&bundle, &fused));
            for (dst, &mode) in data.features.iter_mut().zip(modes) {
                dst.push(compute_features(&model_input(&seq, k, mode, &cfg.fusion).as_input(), &rows, &cfg.features));
            }
        }
        data.counts.add(&bundle);
    }
    if data.labels.is_empty() {
        return Err(CliError::Data("no training frames".into()));
    }
    Ok(data)
}

fn frames<'a>(
    features: &'a [Array2<f64>],
    labels: &'a [FrameLabels],
    teacher: Option<&'a [Array2<f64>]>,
) -> Vec<TrainFrame<'a>> {
    features
        .iter()
        .zip(labels)
        .enumerate()
        .map(|(i, (f, l))| TrainFrame {
            features: f.view(),
            sparse: l.sparse.clone(),
            propagated: l.propagated.clone(),
            weak: l.weak.clone(),
            sparse_rows: l.sparse_rows.clone(),
            dense_rows: (0..l.sparse.len()).collect(),
            teacher_logits: teacher.map(|t| t[i].view()),
        })
        .collect()
}

fn scan_list(dir: &Path, chosen: &[usize]) -> Result<Vec<usize>, CliError> {
    let all = kitti::list_scans(dir)?;
    if chosen.is_empty() {
        return Ok(all);
    }
    match chosen.iter().find(|k| !all.contains(k)) {
        Some(k) => Err(CliError::Usage(format!("scan {k} is not in {}", dir.display()))),
        None => Ok(chosen.to_vec()),
    }
}

/// Features and mapped ground truth of the given rows of scan `k`.
fn scan_rows(
    ctx: &Context,
    dir: &Path,
    k: usize,
    mode: InputMode,
    rows: impl FnOnce(usize) -> Vec<usize>,
) -> Result<(Array2<f64>, Vec<ClassId>), CliError> {
    let cfg = &ctx.config;
    let seq = Sequence::load(dir, required_scans(&(k..k + 1), mode, &cfg.fusion))?;
    let rows = rows(seq.scan(k).len());
    let map = cfg.data.labels;
    let gt = seq.labels(k, |c| map.map(c))?;
    let features = compute_features(&model_input(&seq, k, mode, &cfg.fusion).as_input(), &rows, &cfg.features);
    Ok((features, rows.iter().map(|&r| gt[r]).collect()))
}

fn stack(parts: &[Array2<f64>]) -> Result<Array2<f64>, CliError> {
    if parts.is_empty() {
        return Ok(Array2::zeros((0, NUM_FEATURES)));
    }
    let views: Vec<_> = parts.iter().map(|a| a.view()).collect();
    concatenate(Axis(0), &views).map_err(|e| CliError::Data(e.to_string()))
}

/// Subsample of the validation sequence scored after each epoch.
fn monitor_set(ctx: &Context, mode: InputMode) -> Result<Option<EvalSet>, CliError> {
    let cfg = &ctx.config;
    let Some(dir) = cfg.data.val_input.as_deref() else {
        return Ok(None);
    };
    if !dir.exists() {
        return Err(CliError::Usage(format!("data.val_input {}: no such directory", dir.display())));
    }
    let scans = scan_list(dir, &cfg.data.val_scans)?;
    if cfg.data.monitor_points == 0 || scans.is_empty() {
        return Ok(None);
    }
    let per_scan = cfg.data.monitor_points.div_ceil(scans.len());
    let (mut features, mut gt) = (Vec::new(), Vec::new());
    for &k in &scans {
        let (f, g) = scan_rows(ctx, dir, k, mode, |n| sample_rows(n, per_scan, stream_seed(cfg.train.seed, k as u64)))?;
        features.push(f);
        gt.extend(g);
    }
    Ok(Some(EvalSet {
        features: stack(&features)?,
        gt,
    }))
}

fn sidecar_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("json")
}

fn load_checkpoint(path: &Path, flag: &str) -> Result<(ToyModel, CheckpointSidecar), CliError> {
    if !path.exists() {
        return Err(CliError::Usage(format!("{flag} {}: no such file", path.display())));
    }
    let model = ToyModel::load(path)?;
    let sidecar: CheckpointSidecar = read_json(&sidecar_path(path))?;
    if sidecar.format != MODEL_FORMAT || sidecar.num_classes != model.num_classes {
        return Err(CliError::Data(format!("{}: sidecar does not describe this checkpoint", path.display())));
    }
    Ok((model, sidecar))
}

fn save_checkpoint(path: &Path, model: &ToyModel, sidecar: &CheckpointSidecar) -> Result<(), CliError> {
    model.save(path)?;
    write_json(&sidecar_path(path), sidecar)
}

fn mode_name(mode: InputMode) -> &'static str {
    match mode {
        InputMode::Single => "single",
        InputMode::Multi => "multi",
    }
}

fn sidecar_mode(s: &CheckpointSidecar) -> InputMode {
    if s.mode == "multi" {
        InputMode::Multi
    } else {
        InputMode::Single
    }
}

fn class_names(ctx: &Context) -> Vec<String> {
    ctx.config.data.labels.class_names().iter().map(|s| s.to_string()).collect()
}

fn report_history(history: &[model::EpochRecord]) {
    if let Some(last) = history.last() {
        let val = last.val_miou.map_or_else(|| "-".into(), |v| format!("{:.1}", 100.0 * v));
        println!(
            "{} epochs, final loss {:.4}, monitor mIoU {val}",
            history.len(),
            last.loss.total()
        );
    }
}

pub fn train(ctx: &Context) -> Result<(), CliError> {
    let cfg = &ctx.config;
    let out = cfg.output()?;
    cfg.train.validate()?;
    let mode = cfg.data.mode;
    let data = training_data(ctx, &[mode])?;
    let monitor = monitor_set(ctx, mode)?;
    let mut model = ToyModel::new(NUM_FEATURES, cfg.data.labels.num_classes(), cfg.train.model.clone(), cfg.train.seed)?;
    model.fit_normalization(stack(&data.features[0])?.view());
    let frames = frames(&data.features[0], &data.labels, None);
    let history = model::train(&mut model, &frames, &data.counts.weights(), &cfg.losses, &cfg.train, monitor.as_ref())?;
    let path = ctx
        .model
        .clone()
        .unwrap_or_else(|| out.join(format!("{}.ckpt", mode_name(mode))));
    let sidecar = CheckpointSidecar {
        format: MODEL_FORMAT.into(),
        mode: mode_name(mode).into(),
        num_features: NUM_FEATURES,
        num_classes: model.num_classes,
        class_names: class_names(ctx),
        train: cfg.train.clone(),
        losses: cfg.losses.clone(),
        history,
    };
    save_checkpoint(&path, &model, &sidecar)?;
    record_config(ctx, out, "train")?;
    report_history(&sidecar.history);
    Ok(())
}

pub fn distill(ctx: &Context) -> Result<(), CliError> {
    let cfg = &ctx.config;
    let out = cfg.output()?;
    cfg.train.validate()?;
    let student_path = ctx
        .model
        .as_deref()
        .ok_or_else(|| CliError::Usage("--model (the single-scan student) is required".into()))?;
    let teacher_path = ctx
        .teacher
        .as_deref()
        .ok_or_else(|| CliError::Usage("--teacher is required".into()))?;
    let (mut student, mut sidecar) = load_checkpoint(student_path, "--model")?;
    let (teacher, teacher_sidecar) = load_checkpoint(teacher_path, "--teacher")?;
    if sidecar_mode(&sidecar) != InputMode::Single || sidecar_mode(&teacher_sidecar) != InputMode::Multi {
        return Err(CliError::Usage(format!(
            "--model must be a single-scan checkpoint and --teacher a multi-scan one (got {} and {})",
            sidecar.mode, teacher_sidecar.mode
        )));
    }
    if teacher.num_classes != student.num_classes || student.num_classes != cfg.data.labels.num_classes() {
        return Err(CliError::Usage(format!(
            "class counts differ: student {}, teacher {}, label map {}",
            student.num_classes,
            teacher.num_classes,
            cfg.data.labels.num_classes()
        )));
    }
    let data = training_data(ctx, &[InputMode::Single, InputMode::Multi])?;
    let logits: Vec<Array2<f64>> = data.features[1]
        .iter()
        .map(|f| teacher.logits(f.view()))
        .collect::<Result<_, _>>()?;
    let monitor = monitor_set(ctx, InputMode::Single)?;
    let frames = frames(&data.features[0], &data.labels, Some(&logits));
    let history = model::distill(&mut student, &frames, &data.counts.weights(), &cfg.losses, &cfg.train, monitor.as_ref())?;
    report_history(&history);
    sidecar.mode = "distilled".into();
    sidecar.train = cfg.train.clone();
    sidecar.history.extend(history);
    save_checkpoint(&out.join("distilled.ckpt"), &student, &sidecar)?;
    record_config(ctx, out, "distill")
}

#[derive(Debug, Clone, Serialize)]
struct EvalOutput {
    checkpoint_mode: String,
    scans: Vec<usize>,
    metrics: MetricsReport,
    confusion: ConfusionMatrix,
}

pub fn eval(ctx: &Context) -> Result<(), CliError> {
    let cfg = &ctx.config;
    let input = cfg.input()?;
    let out = cfg.output()?;
    let path = ctx
        .model
        .as_deref()
        .ok_or_else(|| CliError::Usage("--model is required".into()))?;
    let (model, sidecar) = load_checkpoint(path, "--model")?;
    if model.num_classes != cfg.data.labels.num_classes() {
        return Err(CliError::Usage(format!(
            "--model predicts {} classes, the label map has {}",
            model.num_classes,
            cfg.data.labels.num_classes()
        )));
    }
    let mode = sidecar_mode(&sidecar);
    let scans = scan_list(input, &cfg.data.eval_scans)?;
    let mut cm = ConfusionMatrix::new(model.num_classes);
    for &k in &scans {
        let (features, gt) = scan_rows(ctx, input, k, mode, |n| (0..n).collect())?;
        let pred = model.predict(features.view())?;
        cm.accumulate(&gt, &pred, &[])?;
    }
    let names = cfg.data.labels.class_names();
    let metrics = cm.report(names);
    let table = metrics.to_table();
    write_json(
        &out.join("eval.json"),
        &EvalOutput {
            checkpoint_mode: sidecar.mode,
            scans,
            metrics,
            confusion: cm,
        },
    )?;
    write_text(&out.join("eval.txt"), &table)?;
    record_config(ctx, out, "eval")?;
    print!("{table}");
    Ok(())
}

pub fn export_ply(ctx: &Context) -> Result<(), CliError> {
    let input = ctx.config.input()?;
    let out = ctx.config.output()?;
    let index = read_index(out)?;
    let dir = out.join("ply");
    fs::create_dir_all(&dir).map_err(|e| io_error(&dir, e))?;
    for w in &index.windows {
        let seq = Sequence::load(input, w.range())?;
        let cloud = seq.fuse(w.range())?;
        let ids = read_component_ids(&preseg_dir(out).join(format!("{}.ids", w.stem)))?;
        if ids.len() != cloud.len() {
            return Err(CliError::Data(format!(
                "{}: {} component ids for {} points",
                w.stem,
                ids.len(),
                cloud.len()
            )));
        }
        let path = dir.join(format!("{}.ply", w.stem));
        let file = fs::File::create(&path).map_err(|e| io_error(&path, e))?;
        let mut writer = BufWriter::new(file);
        write_ply(&mut writer, &cloud, &ids)
            .and_then(|_| writer.flush())
            .map_err(|e| io_error(&path, e))?;
    }
    record_config(ctx, out, "export-ply")?;
    println!("{} windows exported", index.windows.len());
    Ok(())
}
