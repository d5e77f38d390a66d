//! Training, evaluation and the cross-entropy vs long-range loss comparison.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{forward_clip, logits, prediction_from_logits, SftConfig, SftParams};
use crate::objective::{long_loss, long_loss_node, mean_average_precision, Batch, LongLossParams};
use crate::preproc::{preprocess_clip, PreprocConfig};
use crate::rng::Rng;
use crate::synthdata::{load_clip, DatasetSpec, GestureClass, ManifestRecord, SceneConfig, Split};
use crate::tensor::Tensor;

/// Rng sub-stream of a clip's seed used by its keyframe clustering.
const PREPROC_STREAM: u64 = 0x9e0c;
const INIT_STREAM: u64 = 0;
const SHUFFLE_STREAM: u64 = 1;

/// Far bin: the top third of the 4-20 m range.
pub const FAR_THRESHOLD_M: f64 = 4.0 + 16.0 * 2.0 / 3.0;
/// Coarse bins `[4, 9)`, `[9, 14)`, `[14, 20]` of the distance trend.
pub const RANGE_EDGES_M: [f64; 4] = [4.0, 9.0, 14.0, 20.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossMode {
    Ce,
    LongLoss,
}

impl LossMode {
    pub fn name(self) -> &'static str {
        match self {
            LossMode::Ce => "ce",
            LossMode::LongLoss => "longloss",
        }
    }
}

impl std::str::FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ce" => Ok(LossMode::Ce),
            "longloss" => Ok(LossMode::LongLoss),
            other => Err(Error::invalid(format!("unknown loss mode {other:?} (ce | longloss)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Learning rate over the run, as a multiple of `learning_rate`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Constant,
    /// Half-cosine from 1 at the first step to 0 after the last.
    Cosine,
}

impl LrSchedule {
    pub fn factor(self, step: usize, total: usize) -> f64 {
        match self {
            LrSchedule::Constant => 1.0,
            LrSchedule::Cosine => 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total.max(1) as f64).cos()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub schedule: LrSchedule,
    pub adam: AdamConfig,
    pub seed: u64,
    pub loss: LossMode,
    pub long_loss: LongLossParams,
    pub checkpoint: Option<PathBuf>,
    /// Evaluate every this many epochs when an evaluation set is given; 0
    /// disables.
    pub eval_every: usize,
    /// Computes per-clip gradients on the rayon pool. They are still summed
    /// in clip order.
    pub parallel: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 16,
            learning_rate: 1e-3,
            schedule: LrSchedule::Cosine,
            adam: AdamConfig::default(),
            seed: 0,
            loss: LossMode::LongLoss,
            long_loss: LongLossParams::default(),
            checkpoint: None,
            eval_every: 0,
            parallel: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::invalid(format!("learning_rate must be finite and >= 0, got {}", self.learning_rate)));
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return Err(Error::invalid("Adam needs beta1, beta2 in [0, 1) and eps > 0"));
        }
        self.long_loss.validate()
    }

    /// Loss actually optimized: cross-entropy is the weighted loss with
    /// `alpha = 0`.
    pub fn training_loss(&self) -> LongLossParams {
        match self.loss {
            LossMode::Ce => LongLossParams {
                alpha: 0.0,
                ..self.long_loss
            },
            LossMode::LongLoss => self.long_loss,
        }
    }
}

/// Clip counts of a generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub per_meter_train: usize,
    pub per_meter_test: usize,
    /// Whole-meter range `[lo, hi)`.
    pub meters: (u32, u32),
}

impl Default for DataConfig {
    fn default() -> Self {
        let (train, test) = (DatasetSpec::desk_train(), DatasetSpec::desk_test());
        Self {
            per_meter_train: train.per_meter_count,
            per_meter_test: test.per_meter_count,
            meters: train.meters,
        }
    }
}

impl DataConfig {
    pub fn specs(&self) -> [DatasetSpec; 2] {
        [
            DatasetSpec {
                per_meter_count: self.per_meter_train,
                meters: self.meters,
                split: Split::Train,
            },
            DatasetSpec {
                per_meter_count: self.per_meter_test,
                meters: self.meters,
                split: Split::Test,
            },
        ]
    }
}

/// Everything a run needs; the JSON config file of the command line tool.
/// Missing sections and fields take their defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: SftConfig,
    pub train: TrainConfig,
    pub scene: SceneConfig,
    pub preproc: PreprocConfig,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.scene.validate()?;
        if self.preproc.k != self.model.k || self.preproc.out_hw != self.model.input_hw {
            return Err(Error::invalid(format!(
                "preproc produces {} frames of {:?} but the model expects {} of {:?}",
                self.preproc.k, self.preproc.out_hw, self.model.k, self.model.input_hw
            )));
        }
        Ok(())
    }
}

/// Adam with bias correction; moments kept per parameter element.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    lr: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &SftParams<f32>, lr: f64, cfg: AdamConfig) -> Self {
        let zeros = || params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        Self {
            cfg,
            lr,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update with the base learning rate scaled by `lr_factor`.
    pub fn step(&mut self, params: &mut SftParams<f32>, grads: &[Tensor<f32>], lr_factor: f64) {
        self.step += 1;
        let lr = self.lr * lr_factor;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.step);
        let c2 = 1.0 - beta2.powi(self.step);
        for (i, (p, g)) in params.tensors_mut().iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gj = gj as f64;
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                let update = lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
                *w = (*w as f64 - update) as f32;
            }
        }
    }
}

/// Preprocessed keyframes with their labels and distances.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PreparedSet {
    /// One `[k, C, h, w]` tensor per clip.
    pub frames: Vec<Tensor<f32>>,
    pub labels: Vec<usize>,
    pub distances: Vec<f64>,
}

impl PreparedSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            frames: indices.iter().map(|&i| self.frames[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            distances: indices.iter().map(|&i| self.distances[i]).collect(),
        }
    }
}

/// Where the raw clips of a manifest come from.
#[derive(Debug, Clone, Copy)]
pub enum ClipSource<'a> {
    /// Clip files relative to the manifest directory.
    Files(&'a Path),
    /// Re-rendered from each record's seed; nothing touches the disk.
    Render(&'a SceneConfig),
}

/// Loads or renders each record and reduces it to keyframes. Raw clips are
/// dropped as soon as they are preprocessed. Clustering draws from a
/// sub-stream of the record's own seed, so results do not depend on order or
/// threading.
pub fn prepare(
    records: &[ManifestRecord],
    source: ClipSource<'_>,
    cfg: &PreprocConfig,
    parallel: bool,
) -> Result<PreparedSet> {
    if records.is_empty() {
        return Err(Error::invalid("manifest is empty"));
    }
    let one = |r: &ManifestRecord| -> Result<(Tensor<f32>, usize, f64)> {
        let clip = match source {
            ClipSource::Files(root) => load_clip(&root.join(&r.path))?,
            ClipSource::Render(scene) => r.render(scene)?.0,
        };
        let mut rng = Rng::stream(r.seed, PREPROC_STREAM);
        let frames = preprocess_clip(&clip, cfg, &mut rng).map_err(|e| e.in_file(&r.path))?;
        Ok((frames, clip.label(), clip.distance_m() as f64))
    };
    let items: Vec<_> = if parallel {
        records.par_iter().map(one).collect::<Result<_>>()?
    } else {
        records.iter().map(one).collect::<Result<_>>()?
    };
    let mut set = PreparedSet::default();
    for (f, l, d) in items {
        set.frames.push(f);
        set.labels.push(l);
        set.distances.push(d);
    }
    Ok(set)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub eval: Option<EvalSummary>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub accuracy: f64,
    pub mean_loss: f64,
    pub map: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: SftParams<f32>,
    pub log: Vec<EpochLog>,
}

/// Loss value and summed parameter gradients of the clips `batch`, each
/// clip's weighted loss divided by the batch size.
pub fn batch_gradients(
    params: &SftParams<f32>,
    set: &PreparedSet,
    batch: &[usize],
    loss: &LongLossParams,
    parallel: bool,
) -> Result<(f64, Vec<Tensor<f32>>)> {
    let inv_b = 1.0 / batch.len() as f32;
    let m = params.config().n_classes;
    let one = |&i: &usize| -> Result<(f64, Vec<Tensor<f32>>)> {
        let mut g = Graph::new();
        let p = params.bind(&mut g);
        let x = g.constant(set.frames[i].clone());
        let out = forward_clip(&mut g, &p, x)?;
        let row = g.reshape(out.head.logits, &[1, m])?;
        let l = long_loss_node(&mut g, row, &[set.labels[i]], &[set.distances[i]], loss)?;
        let root = g.scale(l, inv_b);
        let mut grads = g.backward(root)?;
        let value = g.value(root).data()[0] as f64;
        let tensors = p
            .ids()
            .iter()
            .zip(params.tensors())
            .map(|(&id, t)| grads.take(id).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        Ok((value, tensors))
    };
    let per_clip: Vec<_> = if parallel {
        batch.par_iter().map(one).collect::<Result<_>>()?
    } else {
        batch.iter().map(one).collect::<Result<_>>()?
    };
    let mut iter = per_clip.into_iter();
    let (mut total, mut acc) = iter.next().ok_or_else(|| Error::invalid("empty batch"))?;
    for (v, grads) in iter {
        total += v;
        for (a, g) in acc.iter_mut().zip(&grads) {
            for (x, &y) in a.data_mut().iter_mut().zip(g.data()) {
                *x += y;
            }
        }
    }
    Ok((total, acc))
}

fn norms_summary(params: &SftParams<f32>) -> String {
    let mut s = String::new();
    for (name, t) in params.names().iter().zip(params.tensors()) {
        let _ = write!(s, "{name}={:.4e} ", t.norm());
    }
    s.trim_end().to_string()
}

/// Trains fresh parameters with Adam on shuffled mini-batches.
///
/// Deterministic for a fixed seed, including in parallel mode.
pub fn train(
    set: &PreparedSet,
    model: &SftConfig,
    cfg: &TrainConfig,
    eval_set: Option<&PreparedSet>,
) -> Result<TrainOutcome> {
    let params = SftParams::init(model, &mut Rng::stream(cfg.seed, INIT_STREAM))?;
    train_from(params, set, cfg, eval_set)
}

/// As [`train`], starting from given parameters.
pub fn train_from(
    mut params: SftParams<f32>,
    set: &PreparedSet,
    cfg: &TrainConfig,
    eval_set: Option<&PreparedSet>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if set.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let loss = cfg.training_loss();
    let mut adam = Adam::new(&params, cfg.learning_rate, cfg.adam);
    let mut shuffle = Rng::stream(cfg.seed, SHUFFLE_STREAM);
    let mut order: Vec<usize> = (0..set.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let total_steps = cfg.epochs * set.len().div_ceil(cfg.batch_size);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        shuffle.shuffle(&mut order);
        let mut total = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let (value, grads) = batch_gradients(&params, set, batch, &loss, cfg.parallel)?;
            if !value.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: b,
                    norms: norms_summary(&params),
                });
            }
            total += value * batch.len() as f64;
            adam.step(&mut params, &grads, cfg.schedule.factor(step, total_steps));
            step += 1;
        }
        let eval = match eval_set {
            Some(es) if cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0 => {
                let r = evaluate(es, &params, &cfg.long_loss, cfg.parallel)?;
                Some(EvalSummary {
                    accuracy: r.accuracy,
                    mean_loss: r.mean_loss,
                    map: r.map,
                })
            }
            _ => None,
        };
        log.push(EpochLog {
            epoch: epoch + 1,
            mean_loss: total / set.len() as f64,
            eval,
        });
    }
    if let Some(path) = &cfg.checkpoint {
        checkpoint::save(&params, path)?;
    }
    Ok(TrainOutcome { params, log })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinReport {
    pub lo_m: f64,
    pub hi_m: f64,
    pub count: usize,
    pub correct: usize,
    /// `None` for an empty bin.
    pub accuracy: Option<f64>,
}

impl BinReport {
    fn new(lo_m: f64, hi_m: f64) -> Self {
        Self {
            lo_m,
            hi_m,
            count: 0,
            correct: 0,
            accuracy: None,
        }
    }

    fn add(&mut self, hit: bool) {
        self.count += 1;
        self.correct += hit as usize;
    }

    fn finish(&mut self) {
        self.accuracy = (self.count > 0).then(|| self.correct as f64 / self.count as f64);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class_id: usize,
    pub name: Option<String>,
    pub count: usize,
    pub correct: usize,
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub accuracy: f64,
    /// Mean distance-weighted loss with the parameters in `loss`, for every
    /// model regardless of the loss it was trained with.
    pub mean_loss: f64,
    pub loss: LongLossParams,
    pub map: f64,
    /// One-meter bins `floor(d - 4)`, clipped to 0..=15.
    pub distance_bins: Vec<BinReport>,
    /// `[4, 9)`, `[9, 14)`, `[14, 20]`.
    pub range_bins: Vec<BinReport>,
    /// `d >= 14.67`, the top third of the range.
    pub far_bin: BinReport,
    pub per_class: Vec<ClassReport>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// `metric,value` rows.
    pub fn metrics_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        let fmt = |v: Option<f64>| v.map_or_else(String::new, |v| v.to_string());
        let _ = writeln!(s, "n,{}", self.n);
        let _ = writeln!(s, "accuracy,{}", self.accuracy);
        let _ = writeln!(s, "mean_loss,{}", self.mean_loss);
        let _ = writeln!(s, "map,{}", self.map);
        let _ = writeln!(s, "far_bin_accuracy,{}", fmt(self.far_bin.accuracy));
        for b in self.range_bins.iter().chain(&self.distance_bins) {
            let _ = writeln!(s, "bin_{}_{}_accuracy,{}", b.lo_m, b.hi_m, fmt(b.accuracy));
        }
        for c in &self.per_class {
            let _ = writeln!(s, "class_{}_accuracy,{}", c.class_id, fmt(c.accuracy));
        }
        s
    }
}

fn distance_bin(d: f64) -> usize {
    ((d - 4.0).floor().max(0.0) as usize).min(15)
}

fn range_bin(d: f64) -> usize {
    RANGE_EDGES_M[1..3].iter().filter(|&&e| d >= e).count()
}

/// Aggregates metrics from precomputed logits `[N, m]`.
pub fn evaluate_logits(
    logits: &Tensor<f32>,
    labels: &[usize],
    distances: &[f64],
    loss: &LongLossParams,
) -> Result<EvalReport> {
    let (n, m) = match logits.shape() {
        [n, m] => (*n, *m),
        s => return Err(Error::shape("evaluate", format!("logits must be [N, m], got {s:?}"))),
    };
    let wide: Tensor<f64> = logits.cast();
    let mean_loss = long_loss(
        &Batch {
            logits: &wide,
            labels,
            distances,
        },
        loss,
    )?;
    let map = mean_average_precision(&wide, labels)?;
    let mut confusion = vec![vec![0usize; m]; m];
    let mut distance_bins: Vec<BinReport> = (0..16).map(|i| BinReport::new(4.0 + i as f64, 5.0 + i as f64)).collect();
    let mut range_bins: Vec<BinReport> = RANGE_EDGES_M.windows(2).map(|e| BinReport::new(e[0], e[1])).collect();
    let mut far_bin = BinReport::new(FAR_THRESHOLD_M, 20.0);
    let mut correct = 0usize;
    for i in 0..n {
        let row = Tensor::from_vec(wide.data()[i * m..(i + 1) * m].to_vec());
        let pred = prediction_from_logits(&row).class;
        let hit = pred == labels[i];
        correct += hit as usize;
        confusion[labels[i]][pred] += 1;
        let d = distances[i];
        distance_bins[distance_bin(d)].add(hit);
        range_bins[range_bin(d)].add(hit);
        if d >= FAR_THRESHOLD_M {
            far_bin.add(hit);
        }
    }
    for b in distance_bins.iter_mut().chain(range_bins.iter_mut()) {
        b.finish();
    }
    far_bin.finish();
    let per_class = (0..m)
        .map(|c| {
            let count: usize = confusion[c].iter().sum();
            ClassReport {
                class_id: c,
                name: GestureClass::from_id(c).ok().map(|g| g.name().to_string()),
                count,
                correct: confusion[c][c],
                accuracy: (count > 0).then(|| confusion[c][c] as f64 / count as f64),
            }
        })
        .collect();
    Ok(EvalReport {
        n,
        accuracy: correct as f64 / n as f64,
        mean_loss,
        loss: *loss,
        map,
        distance_bins,
        range_bins,
        far_bin,
        per_class,
        confusion,
    })
}

/// Logits `[N, m]` of every clip in the set. Reads parameters only.
pub fn predict_logits(set: &PreparedSet, params: &SftParams<f32>, parallel: bool) -> Result<Tensor<f32>> {
    let rows: Vec<Tensor<f32>> = if parallel {
        set.frames.par_iter().map(|f| logits(params, f)).collect::<Result<_>>()?
    } else {
        set.frames.iter().map(|f| logits(params, f)).collect::<Result<_>>()?
    };
    Tensor::stack(&rows)
}

/// Predicts every clip and aggregates the report. Distances feed only the
/// reported loss and the bins, never the predictions.
pub fn evaluate(
    set: &PreparedSet,
    params: &SftParams<f32>,
    loss: &LongLossParams,
    parallel: bool,
) -> Result<EvalReport> {
    if set.is_empty() {
        return Err(Error::invalid("evaluation set is empty"));
    }
    let logits = predict_logits(set, params, parallel)?;
    evaluate_logits(&logits, &set.labels, &set.distances, loss)
}

#[derive(Debug, Clone, Serialize)]
pub struct ComparisonRun {
    pub seed: u64,
    pub loss_mode: LossMode,
    pub report: EvalReport,
    pub log: Vec<EpochLog>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Comparison {
    pub runs: Vec<ComparisonRun>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ModeMeans {
    pub accuracy: f64,
    pub mean_loss: f64,
    pub map: f64,
    pub far_bin_accuracy: f64,
}

impl Comparison {
    pub fn runs_of(&self, mode: LossMode) -> impl Iterator<Item = &ComparisonRun> {
        self.runs.iter().filter(move |r| r.loss_mode == mode)
    }

    pub fn means(&self, mode: LossMode) -> ModeMeans {
        let runs: Vec<_> = self.runs_of(mode).collect();
        let n = runs.len().max(1) as f64;
        let mean = |f: &dyn Fn(&EvalReport) -> f64| runs.iter().map(|r| f(&r.report)).sum::<f64>() / n;
        ModeMeans {
            accuracy: mean(&|r| r.accuracy),
            mean_loss: mean(&|r| r.mean_loss),
            map: mean(&|r| r.map),
            far_bin_accuracy: mean(&|r| r.far_bin.accuracy.unwrap_or(f64::NAN)),
        }
    }

    /// One row per (seed, loss mode), then a `mean_diff` row holding the
    /// long-range loss means minus the cross-entropy means.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("seed,loss_mode,accuracy,mean_loss,map,far_bin_accuracy\n");
        for r in &self.runs {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.seed,
                r.loss_mode.name(),
                r.report.accuracy,
                r.report.mean_loss,
                r.report.map,
                r.report.far_bin.accuracy.map_or_else(String::new, |v| v.to_string())
            );
        }
        let (a, b) = (self.means(LossMode::LongLoss), self.means(LossMode::Ce));
        let _ = writeln!(
            s,
            "mean_diff,longloss-ce,{},{},{},{}",
            a.accuracy - b.accuracy,
            a.mean_loss - b.mean_loss,
            a.map - b.map,
            a.far_bin_accuracy - b.far_bin_accuracy
        );
        s
    }
}

/// Paired runs per seed: identical configs except the loss. Both modes are
/// evaluated with `base.long_loss` so the loss column is comparable.
pub fn compare_losses(
    train_set: &PreparedSet,
    test_set: &PreparedSet,
    model: &SftConfig,
    base: &TrainConfig,
    seeds: &[u64],
    mut on_run: impl FnMut(&ComparisonRun),
) -> Result<Comparison> {
    if seeds.len() < 3 {
        return Err(Error::invalid(format!("compare needs at least 3 seeds, got {}", seeds.len())));
    }
    let mut runs = Vec::with_capacity(seeds.len() * 2);
    for &seed in seeds {
        for mode in [LossMode::Ce, LossMode::LongLoss] {
            let cfg = TrainConfig {
                seed,
                loss: mode,
                checkpoint: None,
                ..base.clone()
            };
            let out = train(train_set, model, &cfg, None)?;
            let report = evaluate(test_set, &out.params, &base.long_loss, base.parallel)?;
            let run = ComparisonRun {
                seed,
                loss_mode: mode,
                report,
                log: out.log,
            };
            on_run(&run);
            runs.push(run);
        }
    }
    Ok(Comparison { runs })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_set(n: usize, cfg: &SftConfig, seed: u64) -> PreparedSet {
        let mut rng = Rng::new(seed);
        let mut set = PreparedSet::default();
        for i in 0..n {
            let label = i % cfg.n_classes;
            // class signal: brightness level plus noise
            let mut t = Tensor::<f32>::rand_uniform(&cfg.input_shape(), 0.0, 0.3, &mut rng);
            for v in t.data_mut() {
                *v += label as f32 * 0.5;
            }
            set.frames.push(t);
            set.labels.push(label);
            set.distances.push(4.0 + (i % 16) as f64 + 0.5);
        }
        set
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let cfg = SftConfig::tiny();
        let set = toy_set(6, &cfg, 1);
        let tc = TrainConfig { epochs: 2, batch_size: 4, learning_rate: 0.0, ..TrainConfig::default() };
        let out = train(&set, &cfg, &tc, None).unwrap();
        let fresh = SftParams::<f32>::init(&cfg, &mut Rng::stream(0, INIT_STREAM)).unwrap();
        assert_eq!(checkpoint::encode(&out.params).unwrap(), checkpoint::encode(&fresh).unwrap());
    }

    #[test]
    fn ce_equals_zero_alpha_longloss() {
        let cfg = SftConfig::tiny();
        let set = toy_set(8, &cfg, 2);
        let ce = TrainConfig { epochs: 2, batch_size: 3, loss: LossMode::Ce, ..TrainConfig::default() };
        let ll = TrainConfig {
            loss: LossMode::LongLoss,
            long_loss: LongLossParams { alpha: 0.0, ..LongLossParams::default() },
            ..ce.clone()
        };
        let a = train(&set, &cfg, &ce, None).unwrap();
        let b = train(&set, &cfg, &ll, None).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.log, b.log);
    }

    #[test]
    fn parallel_matches_serial() {
        let cfg = SftConfig::tiny();
        let set = toy_set(8, &cfg, 3);
        let tc = TrainConfig { epochs: 1, batch_size: 4, ..TrainConfig::default() };
        let a = train(&set, &cfg, &tc, None).unwrap();
        let b = train(&set, &cfg, &TrainConfig { parallel: true, ..tc }, None).unwrap();
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn batch_gradient_matches_single_graph() {
        let cfg = SftConfig::tiny();
        let set = toy_set(3, &cfg, 4);
        let params = SftParams::<f32>::init(&cfg, &mut Rng::new(5)).unwrap();
        let loss = LongLossParams::default();
        let (v, grads) = batch_gradients(&params, &set, &[0, 1, 2], &loss, false).unwrap();
        let mut g = Graph::new();
        let p = params.bind(&mut g);
        let xs: Vec<_> = set.frames.iter().map(|f| g.constant(f.clone())).collect();
        let root = crate::model::batch_loss(&mut g, &p, &xs, &set.labels, &set.distances, &loss).unwrap();
        let full = g.backward(root).unwrap();
        assert!((g.value(root).data()[0] as f64 - v).abs() < 1e-5);
        for (&id, ga) in p.ids().iter().zip(&grads) {
            for (a, b) in full.get(id).unwrap().data().iter().zip(ga.data()) {
                assert!((a - b).abs() <= 1e-5 * (1.0 + a.abs()));
            }
        }
    }

    #[test]
    fn oracle_logits_are_perfect() {
        let labels: Vec<usize> = (0..30).map(|i| i % 10).collect();
        let distances: Vec<f64> = (0..30).map(|i| 4.0 + i as f64 * 0.5).collect();
        let mut data = vec![0.0f32; 30 * 10];
        for (i, &l) in labels.iter().enumerate() {
            data[i * 10 + l] = 8.0;
        }
        let logits = Tensor::new(vec![30, 10], data).unwrap();
        let r = evaluate_logits(&logits, &labels, &distances, &LongLossParams::default()).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.map, 1.0);
        assert_eq!(r.far_bin.accuracy, Some(1.0));
    }

    #[test]
    fn bins_recombine_to_overall() {
        let mut rng = Rng::new(8);
        let n = 200;
        let labels: Vec<usize> = (0..n).map(|_| rng.below(10)).collect();
        let distances: Vec<f64> = (0..n).map(|_| rng.uniform_range(4.0, 20.0)).collect();
        let logits = Tensor::<f32>::randn(&[n, 10], 1.0, &mut rng);
        let r = evaluate_logits(&logits, &labels, &distances, &LongLossParams::default()).unwrap();
        let correct: usize = r.distance_bins.iter().map(|b| b.correct).sum();
        let count: usize = r.distance_bins.iter().map(|b| b.count).sum();
        assert_eq!(count, n);
        assert_eq!(correct as f64 / n as f64, r.accuracy);
        let trace: usize = (0..10).map(|c| r.confusion[c][c]).sum();
        assert_eq!(trace as f64 / n as f64, r.accuracy);
        for c in &r.per_class {
            assert_eq!(r.confusion[c.class_id].iter().sum::<usize>(), c.count);
        }
    }

    #[test]
    fn bin_edges() {
        assert_eq!(distance_bin(3.0), 0);
        assert_eq!(distance_bin(4.99), 0);
        assert_eq!(distance_bin(19.99), 15);
        assert_eq!(distance_bin(20.0), 15);
        assert_eq!(range_bin(8.99), 0);
        assert_eq!(range_bin(9.0), 1);
        assert_eq!(range_bin(14.0), 2);
        assert_eq!(range_bin(20.0), 2);
        assert!((FAR_THRESHOLD_M - 14.666_666_666_666_666).abs() < 1e-12);
    }

    #[test]
    fn compare_needs_three_seeds() {
        let cfg = SftConfig::tiny();
        let set = toy_set(4, &cfg, 1);
        let r = compare_losses(&set, &set, &cfg, &TrainConfig::default(), &[1, 2], |_| {});
        assert!(r.is_err());
    }
}
