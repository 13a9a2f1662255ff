//! Synthetic ablation benchmark: annotation policies and loss combinations
//! compared on held-out scenes at a fixed click budget.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::time::Instant;

use ndarray::{concatenate, Array2, Axis};
use serde::{Deserialize, Serialize};

use super::{candidate_rows, frame_labels, sample_rows, student_input, teacher_input, FrameLabels, FusionConfig, LabelCounts, Sequence};
use crate::cloud::synth::{classes, generate_synthetic, SyntheticSceneSpec};
use crate::labeling::{derive_labels, random_point_labels, simulate_annotation, AnnotationConfig, LabelBundle};
use crate::losses::LossConfig;
use crate::metrics::ConfusionMatrix;
use crate::model::{
    compute_features, distill, evaluate, train, EvalSet, FeatureConfig, ToyModel, TrainConfig, TrainFrame,
    NUM_FEATURES,
};
use crate::preseg::{presegment, Component, PresegConfig};
use crate::{stream_seed, ClassId, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkConfig {
    /// Scene template; each scene replaces the seed.
    pub scene: SyntheticSceneSpec,
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub train_seed_base: u64,
    pub val_seed_base: u64,
    /// Scans `window_start..window_start + window_size` of every training
    /// scene are annotated together and used as training frames.
    pub window_start: usize,
    pub window_size: usize,
    /// Validation scans; every point is evaluated.
    pub val_scans: Vec<usize>,
    pub preseg: PresegConfig,
    pub annotation: AnnotationConfig,
    /// Click flip rate of the noisy run.
    pub noise_rate: f64,
    pub fusion: FusionConfig,
    pub features: FeatureConfig,
    /// Unclicked points per frame that carry features.
    pub dense_samples: usize,
    /// Validation points scored after every epoch; 0 disables monitoring.
    pub monitor_points: usize,
    pub seeds: Vec<u64>,
    pub train: TrainConfig,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            scene: SyntheticSceneSpec::default(),
            train_scenes: 20,
            val_scenes: 5,
            train_seed_base: 1000,
            val_seed_base: 2000,
            window_start: 10,
            window_size: 5,
            val_scans: vec![10, 12, 14],
            preseg: PresegConfig::default(),
            annotation: AnnotationConfig::default(),
            noise_rate: 0.03,
            fusion: FusionConfig::default(),
            features: FeatureConfig::default(),
            dense_samples: 2000,
            monitor_points: 4000,
            seeds: (0..5).collect(),
            train: TrainConfig::default(),
        }
    }
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.preseg.validate()?;
        self.annotation.validate()?;
        self.train.validate()?;
        let scans = self.scene.trajectory.scans;
        if self.train_scenes == 0 || self.val_scenes == 0 || self.seeds.is_empty() || self.window_size == 0 {
            return Err(Error::Argument("benchmark needs scenes, seeds and a non-empty window".into()));
        }
        if self.window_start + self.window_size > scans || self.val_scans.iter().any(|&k| k >= scans) {
            return Err(Error::Argument(format!("benchmark scans exceed the {scans}-scan trajectory")));
        }
        if !(0.0..1.0).contains(&self.noise_rate) {
            return Err(Error::Argument(format!("noise rate {} outside [0, 1)", self.noise_rate)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationStep {
    /// Random point clicks, sparse loss.
    RandomSparse,
    /// Component clicks, sparse loss.
    PresegSparse,
    Weak,
    Propagated,
    /// All four losses; the single-scan student before distillation.
    Prototype,
    /// Multi-scan teacher with all four losses.
    Teacher,
    /// Student fine-tuned against the teacher.
    Distilled,
    /// The distilled student when clicks are flipped at `noise_rate`.
    NoisyDistilled,
}

impl AblationStep {
    /// Steps whose mean mIoU should increase in this order.
    pub const CHAIN: [AblationStep; 6] = [
        AblationStep::RandomSparse,
        AblationStep::PresegSparse,
        AblationStep::Weak,
        AblationStep::Propagated,
        AblationStep::Prototype,
        AblationStep::Distilled,
    ];

    pub const ALL: [AblationStep; 8] = [
        AblationStep::RandomSparse,
        AblationStep::PresegSparse,
        AblationStep::Weak,
        AblationStep::Propagated,
        AblationStep::Prototype,
        AblationStep::Teacher,
        AblationStep::Distilled,
        AblationStep::NoisyDistilled,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationStep::RandomSparse => "random-sparse",
            AblationStep::PresegSparse => "preseg-sparse",
            AblationStep::Weak => "+weak",
            AblationStep::Propagated => "+propagated",
            AblationStep::Prototype => "+prototype",
            AblationStep::Teacher => "teacher",
            AblationStep::Distilled => "+distillation",
            AblationStep::NoisyDistilled => "noisy+distillation",
        }
    }

    fn losses(self) -> LossConfig {
        let only = |weak, propagated, proto| LossConfig {
            sparse: true,
            propagated,
            weak,
            proto,
            distill_temperature: None,
        };
        match self {
            AblationStep::RandomSparse | AblationStep::PresegSparse => only(false, false, false),
            AblationStep::Weak => only(true, false, false),
            AblationStep::Propagated => only(true, true, false),
            _ => only(true, true, true),
        }
    }
}

/// Candidate rows of one training frame with student and teacher features.
#[derive(Debug, Clone)]
struct PreparedFrame {
    student: Array2<f64>,
    teacher: Array2<f64>,
}

/// Frame labels of one annotation policy over all training frames.
#[derive(Debug, Clone)]
struct LabelSet {
    frames: Vec<FrameLabels>,
    counts: LabelCounts,
    clicks: usize,
}

#[derive(Debug, Clone)]
struct SeedLabels {
    random: LabelSet,
    component: LabelSet,
    noisy: LabelSet,
}

/// Features and labels shared by every run of the benchmark.
#[derive(Debug, Clone)]
pub struct PreparedBenchmark {
    pub config: BenchmarkConfig,
    frames: Vec<PreparedFrame>,
    labels: Vec<SeedLabels>,
    val_student: EvalSet,
    val_teacher: EvalSet,
    monitor_student: EvalSet,
    monitor_teacher: EvalSet,
    /// Points of all annotated windows.
    pub window_points: usize,
    pub prepare_seconds: f64,
}

impl PreparedBenchmark {
    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn val_points(&self) -> usize {
        self.val_student.gt.len()
    }

    /// Component clicks per seed.
    pub fn clicks(&self) -> Vec<usize> {
        self.labels.iter().map(|l| l.component.clicks).collect()
    }
}

fn empty_set() -> LabelSet {
    LabelSet {
        frames: Vec::new(),
        counts: LabelCounts::new(classes::NUM_CLASSES),
        clicks: 0,
    }
}

fn scene(config: &BenchmarkConfig, seed: u64) -> Result<Sequence> {
    Ok(generate_synthetic(&config.scene.clone().with_seed(seed))?.into())
}

/// Generates the scenes, pre-segments and annotates the training windows for
/// every seed, and computes features of each frame's candidate rows: a dense
/// sample plus every point clicked under any policy or seed.
pub fn prepare_benchmark(config: &BenchmarkConfig) -> Result<PreparedBenchmark> {
    config.validate()?;
    let started = Instant::now();
    let num_classes = classes::NUM_CLASSES;
    let window = config.window_start..config.window_start + config.window_size;
    let mut frames = Vec::new();
    let mut labels: Vec<SeedLabels> = config
        .seeds
        .iter()
        .map(|_| SeedLabels {
            random: empty_set(),
            component: empty_set(),
            noisy: empty_set(),
        })
        .collect();
    let mut window_points = 0;
    for si in 0..config.train_scenes {
        let scene_seed = config.train_seed_base + si as u64;
        let seq = scene(config, scene_seed)?;
        let cloud = seq.fuse(window.clone())?;
        let gt = cloud
            .gt_label
            .clone()
            .ok_or_else(|| Error::Consistency("synthetic scan without ground truth".into()))?;
        let preseg = presegment(&cloud, &config.preseg)?;
        window_points += cloud.len();

        let mut bundles = Vec::with_capacity(config.seeds.len());
        for &seed in &config.seeds {
            let s = stream_seed(seed, scene_seed);
            let annotate = |noise_rate, stream| {
                let ac = AnnotationConfig {
                    noise_rate,
                    rng_seed: stream_seed(s, stream),
                    ..config.annotation.clone()
                };
                simulate_annotation(&gt, &preseg.components, num_classes, &ac)
            };
            let clicks = annotate(0.0, 0)?;
            let noisy = annotate(config.noise_rate, 1)?;
            let random = random_point_labels(&gt, clicks.len(), stream_seed(s, 2));
            bundles.push([
                LabelBundle::sparse_only(cloud.len(), &random, num_classes)?,
                bundle(cloud.len(), &preseg.components, &clicks, num_classes)?,
                bundle(cloud.len(), &preseg.components, &noisy, num_classes)?,
            ]);
        }
        let clicked: BTreeSet<u32> = bundles
            .iter()
            .flat_map(|b| b.iter().flat_map(|x| x.sparse.iter().map(|&(p, _)| p)))
            .collect();

        for k in window.clone() {
            let (rows, fused) =
                candidate_rows(&seq, &window, k, &clicked, config.dense_samples, stream_seed(scene_seed, k as u64));
            for (set, b) in labels.iter_mut().zip(&bundles) {
                for (dst, src) in [&mut set.random, &mut set.component, &mut set.noisy].into_iter().zip(b) {
                    let fl = frame_labels(src, &fused);
                    dst.clicks += fl.sparse_rows.len();
                    dst.frames.push(fl);
                }
            }
            frames.push(PreparedFrame {
                student: compute_features(&student_input(&seq, k).as_input(), &rows, &config.features),
                teacher: compute_features(&teacher_input(&seq, k, &config.fusion).as_input(), &rows, &config.features),
            });
        }
        for (set, b) in labels.iter_mut().zip(&bundles) {
            set.random.counts.add(&b[0]);
            set.component.counts.add(&b[1]);
            set.noisy.counts.add(&b[2]);
        }
        log::info!("train scene {scene_seed}: {} points, {} components", cloud.len(), preseg.components.len());
    }

    let mut student = Vec::new();
    let mut teacher = Vec::new();
    let mut gt: Vec<ClassId> = Vec::new();
    for vi in 0..config.val_scenes {
        let seq = scene(config, config.val_seed_base + vi as u64)?;
        for &k in &config.val_scans {
            let rows: Vec<usize> = (0..seq.scan(k).len()).collect();
            student.push(compute_features(&student_input(&seq, k).as_input(), &rows, &config.features));
            teacher.push(compute_features(&teacher_input(&seq, k, &config.fusion).as_input(), &rows, &config.features));
            gt.extend(
                seq.scan(k)
                    .semantic_labels()
                    .ok_or_else(|| Error::Consistency("synthetic scan without ground truth".into()))?,
            );
        }
    }
    let stack = |parts: &[Array2<f64>]| {
        let views: Vec<_> = parts.iter().map(|a| a.view()).collect();
        concatenate(Axis(0), &views).map_err(|e| Error::Consistency(e.to_string()))
    };
    let val_student = EvalSet {
        features: stack(&student)?,
        gt: gt.clone(),
    };
    let val_teacher = EvalSet {
        features: stack(&teacher)?,
        gt,
    };
    let monitor = sample_rows(val_student.gt.len(), config.monitor_points, config.val_seed_base);
    let subset = |set: &EvalSet| EvalSet {
        features: set.features.select(Axis(0), &monitor),
        gt: monitor.iter().map(|&r| set.gt[r]).collect(),
    };
    Ok(PreparedBenchmark {
        monitor_student: subset(&val_student),
        monitor_teacher: subset(&val_teacher),
        val_student,
        val_teacher,
        config: config.clone(),
        frames,
        labels,
        window_points,
        prepare_seconds: started.elapsed().as_secs_f64(),
    })
}

fn bundle(n: usize, components: &[Component], clicks: &[(u32, ClassId)], num_classes: usize) -> Result<LabelBundle> {
    derive_labels(n, components, clicks, num_classes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub step: AblationStep,
    pub seed: u64,
    pub miou: f64,
    pub class_iou: Vec<Option<f64>>,
    /// Monitor-set mIoU after each epoch.
    pub history: Vec<Option<f64>>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSummary {
    pub step: AblationStep,
    pub name: String,
    pub mean_miou: f64,
    pub per_seed: Vec<f64>,
    pub mean_class_iou: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub config: BenchmarkConfig,
    pub class_names: Vec<String>,
    pub window_points: usize,
    pub val_points: usize,
    /// Component clicks per seed; the random baseline uses the same count.
    pub clicks: Vec<usize>,
    /// Mean clicks as a fraction of annotated window points.
    pub label_fraction: f64,
    pub runs: Vec<RunResult>,
    pub summary: Vec<StepSummary>,
    pub prepare_seconds: f64,
    pub train_seconds: f64,
}

impl BenchmarkReport {
    pub fn step(&self, step: AblationStep) -> Option<&StepSummary> {
        self.summary.iter().find(|s| s.step == step)
    }

    pub fn to_table(&self) -> String {
        let pct = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{:.1}", 100.0 * x));
        let mut out = format!(
            "label budget {:.4}% of {} points, {} validation points\n",
            100.0 * self.label_fraction,
            self.window_points,
            self.val_points
        );
        let _ = write!(out, "{:<20}{:>7}", "config", "mIoU");
        for name in &self.class_names {
            let _ = write!(out, " {:>w$}", name, w = name.len().max(5));
        }
        out.push('\n');
        for s in &self.summary {
            let _ = write!(out, "{:<20}{:>7}", s.name, pct(Some(s.mean_miou)));
            for (name, v) in self.class_names.iter().zip(&s.mean_class_iou) {
                let _ = write!(out, " {:>w$}", pct(*v), w = name.len().max(5));
            }
            out.push('\n');
        }
        out.push_str("per seed:\n");
        for s in &self.summary {
            let seeds: Vec<String> = s.per_seed.iter().map(|&v| pct(Some(v))).collect();
            let _ = writeln!(out, "{:<20}{}", s.name, seeds.join(" "));
        }
        out
    }
}

struct Runner<'a> {
    prep: &'a PreparedBenchmark,
    /// Input standardization of student and teacher features.
    norms: [(Vec<f64>, Vec<f64>); 2],
}

impl<'a> Runner<'a> {
    fn new(prep: &'a PreparedBenchmark) -> Result<Self> {
        let norm = |teacher: bool| -> Result<(Vec<f64>, Vec<f64>)> {
            let rows: Vec<_> = prep
                .frames
                .iter()
                .map(|f| if teacher { f.teacher.view() } else { f.student.view() })
                .collect();
            let all = concatenate(Axis(0), &rows).map_err(|e| Error::Consistency(e.to_string()))?;
            let mut m = ToyModel::new(NUM_FEATURES, classes::NUM_CLASSES, prep.config.train.model.clone(), 0)?;
            m.fit_normalization(all.view());
            Ok((m.input_mean, m.input_std))
        };
        Ok(Self {
            prep,
            norms: [norm(false)?, norm(true)?],
        })
    }

    fn frames<'b>(&'b self, set: &'b LabelSet, teacher: bool, logits: Option<&'b [Array2<f64>]>) -> Vec<TrainFrame<'b>> {
        self.prep
            .frames
            .iter()
            .zip(&set.frames)
            .enumerate()
            .map(|(i, (f, l))| TrainFrame {
                features: if teacher { f.teacher.view() } else { f.student.view() },
                sparse: l.sparse.clone(),
                propagated: l.propagated.clone(),
                weak: l.weak.clone(),
                sparse_rows: l.sparse_rows.clone(),
                dense_rows: (0..l.sparse.len()).collect(),
                teacher_logits: logits.map(|t| t[i].view()),
            })
            .collect()
    }

    fn model(&self, seed: u64, teacher: bool) -> Result<ToyModel> {
        let mut m = ToyModel::new(NUM_FEATURES, classes::NUM_CLASSES, self.prep.config.train.model.clone(), seed)?;
        let (mean, std) = &self.norms[teacher as usize];
        m.input_mean.clone_from(mean);
        m.input_std.clone_from(std);
        Ok(m)
    }

    fn score(&self, model: &ToyModel, teacher: bool) -> Result<ConfusionMatrix> {
        evaluate(model, if teacher { &self.prep.val_teacher } else { &self.prep.val_student })
    }

    fn monitor(&self, teacher: bool) -> Option<&EvalSet> {
        let set = if teacher { &self.prep.monitor_teacher } else { &self.prep.monitor_student };
        (!set.gt.is_empty()).then_some(set)
    }

    /// Trains from scratch and scores on the full validation set.
    fn train(&self, step: AblationStep, set: &LabelSet, seed: u64, teacher: bool) -> Result<(ToyModel, RunResult)> {
        let started = Instant::now();
        let config = TrainConfig {
            seed,
            ..self.prep.config.train.clone()
        };
        let mut model = self.model(seed, teacher)?;
        let frames = self.frames(set, teacher, None);
        let history = train(&mut model, &frames, &set.counts.weights(), &step.losses(), &config, self.monitor(teacher))?;
        let cm = self.score(&model, teacher)?;
        let result = RunResult {
            step,
            seed,
            miou: cm.miou(),
            class_iou: cm.iou(),
            history: history.iter().map(|h| h.val_miou).collect(),
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!("seed {seed} {}: mIoU {:.4}", step.name(), result.miou);
        Ok((model, result))
    }

    fn distill(&self, student: &ToyModel, teacher: &ToyModel, set: &LabelSet, seed: u64, step: AblationStep) -> Result<RunResult> {
        let started = Instant::now();
        let config = TrainConfig {
            seed,
            ..self.prep.config.train.clone()
        };
        let logits: Vec<Array2<f64>> = self
            .prep
            .frames
            .iter()
            .map(|f| teacher.logits(f.teacher.view()))
            .collect::<Result<_>>()?;
        let frames = self.frames(set, false, Some(&logits));
        let mut model = student.clone();
        let history = distill(
            &mut model,
            &frames,
            &set.counts.weights(),
            &AblationStep::Prototype.losses(),
            &config,
            self.monitor(false),
        )?;
        let cm = self.score(&model, false)?;
        let result = RunResult {
            step,
            seed,
            miou: cm.miou(),
            class_iou: cm.iou(),
            history: history.iter().map(|h| h.val_miou).collect(),
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!("seed {seed} {}: mIoU {:.4}", step.name(), result.miou);
        Ok(result)
    }
}

/// Runs every step of the ablation for every seed.
pub fn run_benchmark(prep: &PreparedBenchmark) -> Result<BenchmarkReport> {
    run_steps(prep, &AblationStep::ALL)
}

/// Runs the given steps (and whatever they depend on) for every seed.
pub fn run_steps(prep: &PreparedBenchmark, steps: &[AblationStep]) -> Result<BenchmarkReport> {
    let started = Instant::now();
    let runner = Runner::new(prep)?;
    let want = |s: AblationStep| steps.contains(&s);
    let mut runs = Vec::new();
    for (&seed, labels) in prep.config.seeds.iter().zip(&prep.labels) {
        for step in [
            AblationStep::RandomSparse,
            AblationStep::PresegSparse,
            AblationStep::Weak,
            AblationStep::Propagated,
        ] {
            if want(step) {
                let set = if step == AblationStep::RandomSparse {
                    &labels.random
                } else {
                    &labels.component
                };
                runs.push(runner.train(step, set, seed, false)?.1);
            }
        }
        let needs_teacher = want(AblationStep::Teacher) || want(AblationStep::Distilled);
        if want(AblationStep::Prototype) || needs_teacher {
            let (student, r) = runner.train(AblationStep::Prototype, &labels.component, seed, false)?;
            runs.push(r);
            if needs_teacher {
                let (teacher, r) = runner.train(AblationStep::Teacher, &labels.component, seed, true)?;
                runs.push(r);
                if want(AblationStep::Distilled) {
                    runs.push(runner.distill(&student, &teacher, &labels.component, seed, AblationStep::Distilled)?);
                }
            }
        }
        if want(AblationStep::NoisyDistilled) {
            let (student, _) = runner.train(AblationStep::Prototype, &labels.noisy, seed, false)?;
            let (teacher, _) = runner.train(AblationStep::Teacher, &labels.noisy, seed, true)?;
            runs.push(runner.distill(&student, &teacher, &labels.noisy, seed, AblationStep::NoisyDistilled)?);
        }
    }
    let summary = AblationStep::ALL
        .iter()
        .filter_map(|&step| {
            let rs: Vec<&RunResult> = runs.iter().filter(|r| r.step == step).collect();
            if rs.is_empty() {
                return None;
            }
            let per_seed: Vec<f64> = rs.iter().map(|r| r.miou).collect();
            let mean_class_iou = (0..classes::NUM_CLASSES)
                .map(|c| {
                    let v: Vec<f64> = rs.iter().filter_map(|r| r.class_iou[c]).collect();
                    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
                })
                .collect();
            Some(StepSummary {
                step,
                name: step.name().to_string(),
                mean_miou: per_seed.iter().sum::<f64>() / per_seed.len() as f64,
                per_seed,
                mean_class_iou,
            })
        })
        .collect();
    let clicks = prep.clicks();
    let mean_clicks = clicks.iter().sum::<usize>() as f64 / clicks.len() as f64;
    Ok(BenchmarkReport {
        config: prep.config.clone(),
        class_names: classes::NAMES.iter().map(|s| s.to_string()).collect(),
        window_points: prep.window_points,
        val_points: prep.val_points(),
        label_fraction: mean_clicks / prep.window_points as f64,
        clicks,
        runs,
        summary,
        prepare_seconds: prep.prepare_seconds,
        train_seconds: started.elapsed().as_secs_f64(),
    })
}
